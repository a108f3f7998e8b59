//! Hierarchical transformer encoder producing a four-stage feature pyramid
//! at strides 4, 8, 16 and 32.
//!
//! Every stage is a strided patch embedding followed by transformer blocks
//! whose attention reads keys and values from a spatially reduced copy of the
//! tokens. Stages 2, 3 and 4 are exported through a final 1x1 projection;
//! stage 1 only feeds stage 2.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ChannelNorm, Conv};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Pyramid scales handed to the rest of the network.
pub const EXPORTED_SCALES: [usize; 3] = [2, 3, 4];

/// Input height and width must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

const PROJ_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub widths: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128, 160],
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 5],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            if self.widths[i] == 0 {
                return Err(Error::Config(format!("encoder stage {} has zero width", i + 1)));
            }
            if self.heads[i] == 0 || !self.widths[i].is_multiple_of(self.heads[i]) {
                return Err(Error::Config(format!(
                    "encoder stage {}: {} heads do not divide width {}",
                    i + 1,
                    self.heads[i],
                    self.widths[i]
                )));
            }
            if self.sr_ratios[i] == 0 || !(1usize << (3 - i)).is_multiple_of(self.sr_ratios[i]) {
                return Err(Error::Config(format!(
                    "encoder stage {}: reduction ratio {} must divide {}",
                    i + 1,
                    self.sr_ratios[i],
                    1usize << (3 - i)
                )));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Channel width of an exported scale (2, 3 or 4).
    pub fn scale_width(&self, scale: usize) -> usize {
        self.widths[scale - 1]
    }

    /// Every width multiplied by `factor`.
    pub fn scaled(&self, factor: usize) -> Self {
        let mut c = self.clone();
        for w in &mut c.widths {
            *w *= factor;
        }
        c
    }
}

fn embed_geometry(stage: usize) -> (usize, usize, usize) {
    if stage == 0 {
        (7, 4, 3)
    } else {
        (3, 2, 1)
    }
}

/// Spatial size of pyramid scale `scale` for an `h x w` input:
/// `(ceil(h / 2^(scale+1)), ceil(w / 2^(scale+1)))`.
pub fn pyramid_dims(h: usize, w: usize, scale: usize) -> (usize, usize) {
    let f = 1usize << (scale + 1);
    (h.div_ceil(f), w.div_ceil(f))
}

/// Exact number of trainable scalars of an encoder built from `config`.
pub fn encoder_param_count(config: &EncoderConfig) -> usize {
    let mut total = 0;
    for i in 0..4 {
        let cin = if i == 0 { 1 } else { config.widths[i - 1] };
        let c = config.widths[i];
        let (k, _, _) = embed_geometry(i);
        total += Conv::param_count(cin, c, k) + ChannelNorm::param_count(c);
        let hidden = config.mlp_ratio * c;
        let mut block = 2 * ChannelNorm::param_count(c) + 4 * Conv::param_count(c, c, 1);
        if config.sr_ratios[i] > 1 {
            block += Conv::param_count(c, c, config.sr_ratios[i]) + ChannelNorm::param_count(c);
        }
        block += Conv::param_count(c, hidden, 1) + Conv::param_count(hidden, c, 1);
        total += config.depths[i] * block;
        total += ChannelNorm::param_count(c);
        if i > 0 {
            total += Conv::param_count(c, c, 1);
        }
    }
    total
}

/// Per-frame features at scales 2, 3 and 4.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: [Tensor; 3],
    input_size: (usize, usize),
}

impl FeaturePyramid {
    pub fn new(levels: [Tensor; 3], input_size: (usize, usize)) -> Result<Self> {
        for (t, &s) in levels.iter().zip(&EXPORTED_SCALES) {
            let (_, h, w) = t.dims3();
            if (h, w) != pyramid_dims(input_size.0, input_size.1, s) {
                return Err(Error::Shape(format!(
                    "scale {s} has {h}x{w}, expected {:?}",
                    pyramid_dims(input_size.0, input_size.1, s)
                )));
            }
            if !t.all_finite() {
                return Err(Error::Numerical(format!("non-finite features at scale {s}")));
            }
        }
        Ok(Self { levels, input_size })
    }

    pub fn level(&self, scale: usize) -> Option<&Tensor> {
        EXPORTED_SCALES
            .iter()
            .position(|&s| s == scale)
            .map(|i| &self.levels[i])
    }

    pub fn levels(&self) -> &[Tensor; 3] {
        &self.levels
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.input_size
    }
}

/// Checks a `[1, H, W]` (or `[H, W]`) frame against the encoder contract.
pub fn validate_frame(frame: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = match frame.shape().len() {
        2 | 3 => frame.dims3(),
        _ => return Err(Error::Shape(format!("frame must be HxW, got {:?}", frame.shape()))),
    };
    if c != 1 {
        return Err(Error::Shape(format!("expected one channel, got {c}")));
    }
    if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::InvalidInput(format!(
            "frame size {h}x{w} is not a positive multiple of {INPUT_MULTIPLE}; pad or resize first"
        )));
    }
    if !frame.all_finite() {
        return Err(Error::InvalidInput("frame contains non-finite pixels".into()));
    }
    Ok((h, w))
}

#[derive(Clone, Debug)]
struct Attention {
    heads: usize,
    q: Conv,
    k: Conv,
    v: Conv,
    reduce: Option<(Conv, ChannelNorm)>,
    proj: Conv,
}

impl Attention {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (c, h, w) = g.value(x).dims3();
        let head_dim = c / self.heads;
        let q = self.q.forward(g, x);
        let kv_src = match &self.reduce {
            Some((conv, norm)) => {
                let r = conv.forward(g, x);
                norm.forward(g, r)
            }
            None => x,
        };
        let k = self.k.forward(g, kv_src);
        let v = self.v.forward(g, kv_src);
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = g.narrow(q, head * head_dim, head_dim);
            let kh = g.narrow(k, head * head_dim, head_dim);
            let vh = g.narrow(v, head * head_dim, head_dim);
            let scores = g.matmul(qh, kh, true, false);
            let scores = g.affine(scores, scale, 0.0);
            let attn = g.softmax_rows(scores);
            let o = g.matmul(vh, attn, false, true);
            outs.push(g.reshape(o, &[head_dim, h, w]));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat(&outs) };
        self.proj.forward(g, merged)
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: ChannelNorm,
    attn: Attention,
    norm2: ChannelNorm,
    fc1: Conv,
    fc2: Conv,
}

impl Block {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = self.norm1.forward(g, x);
        let a = self.attn.forward(g, n);
        let x = g.add(x, a);
        let n = self.norm2.forward(g, x);
        let hdn = self.fc1.forward(g, n);
        let hdn = g.gelu(hdn);
        let m = self.fc2.forward(g, hdn);
        g.add(x, m)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    embed: Conv,
    embed_norm: ChannelNorm,
    blocks: Vec<Block>,
    norm: ChannelNorm,
    out_proj: Option<Conv>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, ps: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str) -> Result<Self> {
        config.validate()?;
        let init = Init::TruncNormal(PROJ_STD);
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let p = format!("{prefix}.stage{}", i + 1);
            let cin = if i == 0 { 1 } else { config.widths[i - 1] };
            let c = config.widths[i];
            let (k, s, pad) = embed_geometry(i);
            let embed = Conv::new(ps, rng, &format!("{p}.embed"), cin, c, k, s, pad, init);
            let embed_norm = ChannelNorm::new(ps, rng, &format!("{p}.embed_norm"), c);
            let blocks = (0..config.depths[i])
                .map(|b| {
                    let bp = format!("{p}.block{b}");
                    let sr = config.sr_ratios[i];
                    let reduce = (sr > 1).then(|| {
                        (
                            Conv::new(ps, rng, &format!("{bp}.attn.sr"), c, c, sr, sr, 0, init),
                            ChannelNorm::new(ps, rng, &format!("{bp}.attn.sr_norm"), c),
                        )
                    });
                    let hidden = config.mlp_ratio * c;
                    Block {
                        norm1: ChannelNorm::new(ps, rng, &format!("{bp}.norm1"), c),
                        attn: Attention {
                            heads: config.heads[i],
                            q: Conv::same(ps, rng, &format!("{bp}.attn.q"), c, c, 1, init),
                            k: Conv::same(ps, rng, &format!("{bp}.attn.k"), c, c, 1, init),
                            v: Conv::same(ps, rng, &format!("{bp}.attn.v"), c, c, 1, init),
                            reduce,
                            proj: Conv::same(ps, rng, &format!("{bp}.attn.proj"), c, c, 1, init),
                        },
                        norm2: ChannelNorm::new(ps, rng, &format!("{bp}.norm2"), c),
                        fc1: Conv::same(ps, rng, &format!("{bp}.mlp.fc1"), c, hidden, 1, init),
                        fc2: Conv::same(ps, rng, &format!("{bp}.mlp.fc2"), hidden, c, 1, init),
                    }
                })
                .collect();
            let norm = ChannelNorm::new(ps, rng, &format!("{p}.norm"), c);
            let out_proj = (i > 0).then(|| Conv::same(ps, rng, &format!("{p}.out_proj"), c, c, 1, init));
            stages.push(Stage {
                embed,
                embed_norm,
                blocks,
                norm,
                out_proj,
            });
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Final 1x1 projections of the exported stages.
    pub fn out_projections(&self) -> impl Iterator<Item = &Conv> {
        self.stages.iter().filter_map(|s| s.out_proj.as_ref())
    }

    /// Runs the encoder on a `[1, H, W]` frame with pixels in `[0, 1]`.
    /// Returns the scale 2, 3 and 4 features.
    pub fn forward(&self, g: &mut Graph, frame: Var) -> Result<[Var; 3]> {
        let (h, w) = validate_frame(g.value(frame))?;
        let mut x = g.reshape(frame, &[1, h, w]);
        // fixed 0.5 / 0.5 standardization
        x = g.affine(x, 2.0, -1.0);
        let mut exported = Vec::with_capacity(3);
        for stage in &self.stages {
            x = stage.embed.forward(g, x);
            x = stage.embed_norm.forward(g, x);
            for block in &stage.blocks {
                x = block.forward(g, x);
            }
            x = stage.norm.forward(g, x);
            if let Some(proj) = &stage.out_proj {
                exported.push(proj.forward(g, x));
            }
        }
        Ok([exported[0], exported[1], exported[2]])
    }

    /// Inference-only convenience wrapper around [`Encoder::forward`].
    pub fn encode(&self, ps: &ParamStore, frame: &Tensor) -> Result<FeaturePyramid> {
        let (h, w) = validate_frame(frame)?;
        let mut g = Graph::inference(ps);
        let x = g.constant(frame.clone());
        let vars = self.forward(&mut g, x)?;
        let levels = vars.map(|v| g.value(v).clone());
        FeaturePyramid::new(levels, (h, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            widths: [4, 8, 8, 8],
            depths: [1, 1, 1, 1],
            heads: [1, 2, 2, 1],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 2,
        }
    }

    fn build(cfg: &EncoderConfig) -> (Encoder, ParamStore) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(cfg, &mut ps, &mut rng, "encoder").unwrap();
        (enc, ps)
    }

    #[test]
    fn default_resolution_dims() {
        assert_eq!(pyramid_dims(352, 352, 2), (44, 44));
        assert_eq!(pyramid_dims(352, 352, 3), (22, 22));
        assert_eq!(pyramid_dims(352, 352, 4), (11, 11));
    }

    #[test]
    fn rejects_bad_frames() {
        let (enc, ps) = build(&tiny());
        let bad = Tensor::zeros(&[1, 48, 64]);
        assert!(matches!(enc.encode(&ps, &bad), Err(Error::InvalidInput(_))));
        let mut nan = Tensor::zeros(&[1, 32, 32]);
        nan.data_mut()[5] = f64::NAN;
        assert!(matches!(enc.encode(&ps, &nan), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_projection_gives_zero_features() {
        let (enc, mut ps) = build(&tiny());
        for p in enc.out_projections() {
            p.zero(&mut ps);
        }
        let pyr = enc.encode(&ps, &Tensor::zeros(&[1, 64, 64])).unwrap();
        for l in pyr.levels() {
            assert!(l.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn param_count_matches_store() {
        let cfg = tiny();
        let (_, ps) = build(&cfg);
        assert_eq!(encoder_param_count(&cfg), ps.num_scalars());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.heads[1] = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny();
        cfg.sr_ratios[2] = 3;
        assert!(cfg.validate().is_err());
    }
}
