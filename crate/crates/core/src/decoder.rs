//! Coarse-to-fine mask decoder.
//!
//! A neighbor-connection decoder fuses the three refined scales into a
//! one-channel coarse logit map at scale 2. Three reverse-attention stages
//! then run from the deepest scale to the shallowest; each sees the previous
//! prediction resized to its resolution, attends to the complement
//! `1 - sigmoid(prior)` alongside channel groups of its features, and adds a
//! learned residual to the prior.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::EXPORTED_SCALES;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{conv_gelu, Conv};
use crate::params::{Init, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Common channel width after the 1x1 unification convs.
    pub width: usize,
    /// Channel groups per reverse-attention unit.
    pub groups: usize,
    /// Reverse-attention units chained inside each stage.
    pub units: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            groups: 4,
            units: 2,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.groups == 0 || !self.width.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "decoder groups {} must divide width {}",
                self.groups, self.width
            )));
        }
        if self.units == 0 {
            return Err(Error::Config("decoder needs at least one attention unit".into()));
        }
        Ok(())
    }
}

/// Decoder outputs for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// `[1, H/8, W/8]` coarse logits.
    pub coarse_logits: Tensor,
    /// Refined logits of the stages at scales 4, 3, 2 (coarsest first).
    pub stage_logits: Vec<Tensor>,
    /// `[1, H, W]` sigmoid of the last stage upsampled to the input size.
    pub final_prob: Tensor,
}

/// Graph handles of a [`PredictionSet`].
#[derive(Clone, Debug)]
pub struct PredictionVars {
    pub coarse_logits: Var,
    pub stage_logits: Vec<Var>,
    pub final_prob: Var,
}

impl PredictionVars {
    pub fn to_tensors(&self, g: &Graph) -> PredictionSet {
        PredictionSet {
            coarse_logits: g.value(self.coarse_logits).clone(),
            stage_logits: self.stage_logits.iter().map(|&v| g.value(v).clone()).collect(),
            final_prob: g.value(self.final_prob).clone(),
        }
    }

    /// Every supervised map: coarse first, then the stages.
    pub fn supervised_maps(&self) -> Vec<(String, Var)> {
        let mut maps = vec![("coarse".to_string(), self.coarse_logits)];
        for (&v, s) in self.stage_logits.iter().zip(STAGE_SCALES) {
            maps.push((format!("stage{s}"), v));
        }
        maps
    }
}

/// Reverse-attention stages run deepest first.
pub const STAGE_SCALES: [usize; 3] = [4, 3, 2];

/// `1 - sigmoid(logits)` element-wise.
pub fn reverse_mask(prior_logits: &Tensor) -> Tensor {
    prior_logits.map(|v| 1.0 - tensor::sigmoid(v))
}

/// Intermediate products of the neighbor-connection decoder.
#[derive(Clone, Debug)]
pub struct NcdTrace {
    /// Unified features at scales 2, 3, 4.
    pub unified: [Var; 3],
    /// `up(x4) * x3` at scale 3.
    pub product3: Var,
    /// `up(up(x4)) * up(x3) * x2` at scale 2.
    pub product2: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Ncd {
    width: usize,
    /// 1x1 unification convs for scales 2, 3, 4.
    pub unify: [Conv; 3],
    up1: Conv,
    up2: Conv,
    up3: Conv,
    up4: Conv,
    up5: Conv,
    concat3: Conv,
    concat2: Conv,
    head1: Conv,
    head2: Conv,
}

impl Ncd {
    fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_widths: [usize; 3], width: usize) -> Self {
        let c = width;
        let mut conv = |name: &str, cin: usize, cout: usize, k: usize| {
            Conv::same(ps, rng, &format!("{prefix}.{name}"), cin, cout, k, Init::He)
        };
        let unify = [
            conv("unify2", in_widths[0], c, 1),
            conv("unify3", in_widths[1], c, 1),
            conv("unify4", in_widths[2], c, 1),
        ];
        Self {
            width,
            unify,
            up1: conv("up1", c, c, 3),
            up2: conv("up2", c, c, 3),
            up3: conv("up3", c, c, 3),
            up4: conv("up4", c, c, 3),
            up5: conv("up5", 2 * c, 2 * c, 3),
            concat3: conv("concat3", 2 * c, 2 * c, 3),
            concat2: conv("concat2", 3 * c, 3 * c, 3),
            head1: conv("head1", 3 * c, 3 * c, 3),
            head2: conv("head2", 3 * c, 1, 1),
        }
    }

    fn param_count(in_widths: [usize; 3], width: usize) -> usize {
        let c = width;
        in_widths.iter().map(|&w| Conv::param_count(w, c, 1)).sum::<usize>()
            + 4 * Conv::param_count(c, c, 3)
            + 2 * Conv::param_count(2 * c, 2 * c, 3)
            + 2 * Conv::param_count(3 * c, 3 * c, 3)
            + Conv::param_count(3 * c, 1, 1)
    }

    /// Coarse logits at scale-2 resolution from features at scales 2, 3, 4.
    pub fn forward(&self, g: &mut Graph, feats: [Var; 3]) -> Result<NcdTrace> {
        let dims: Vec<(usize, usize, usize)> = feats.iter().map(|&f| g.value(f).dims3()).collect();
        for (i, (&(c, _, _), conv)) in dims.iter().zip(&self.unify).enumerate() {
            if c != conv.in_channels {
                return Err(shape_err!(
                    "scale {} feature has {c} channels, expected {}",
                    EXPORTED_SCALES[i],
                    conv.in_channels
                ));
            }
        }
        let (_, h2, w2) = dims[0];
        let (_, h3, w3) = dims[1];
        if (h3 * 2, w3 * 2) != (h2, w2) || (dims[2].1 * 2, dims[2].2 * 2) != (h3, w3) {
            return Err(shape_err!("pyramid scales are not successive halvings: {dims:?}"));
        }
        let x2 = conv_gelu(g, &self.unify[0], feats[0]);
        let x3 = conv_gelu(g, &self.unify[1], feats[1]);
        let x4 = conv_gelu(g, &self.unify[2], feats[2]);

        let x4_up = g.resize(x4, h3, w3);
        let x4_upup = g.resize(x4_up, h2, w2);
        let x3_up = g.resize(x3, h2, w2);

        let a = conv_gelu(g, &self.up1, x4_up);
        let product3 = g.mul(a, x3);

        let b = conv_gelu(g, &self.up2, x4_upup);
        let c = conv_gelu(g, &self.up3, x3_up);
        let bc = g.mul(b, c);
        let product2 = g.mul(bc, x2);

        let d = conv_gelu(g, &self.up4, x4_up);
        let cat3 = g.concat(&[product3, d]);
        let merged3 = conv_gelu(g, &self.concat3, cat3);

        let merged3_up = g.resize(merged3, h2, w2);
        let e = conv_gelu(g, &self.up5, merged3_up);
        let cat2 = g.concat(&[product2, e]);
        let merged2 = conv_gelu(g, &self.concat2, cat2);

        let h = conv_gelu(g, &self.head1, merged2);
        let logits = self.head2.forward(g, h);
        Ok(NcdTrace {
            unified: [x2, x3, x4],
            product3,
            product2,
            logits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

#[derive(Clone, Debug)]
struct GraUnit {
    conv: Conv,
    score: Conv,
}

/// Intermediates of one reverse-attention stage.
#[derive(Clone, Debug)]
pub struct GraTrace {
    /// Reversed prior `1 - sigmoid(prior)`.
    pub reversed: Var,
    /// Input of the first unit: every feature group followed by the
    /// reversed map, `[x_1, r, x_2, r, ...]`.
    pub first_concat: Var,
    pub residual: Var,
    pub refined: Var,
}

#[derive(Clone, Debug)]
pub struct GraStage {
    groups: usize,
    width: usize,
    reduce: Conv,
    units: Vec<GraUnit>,
    /// Final one-channel residual conv.
    pub out: Conv,
}

impl GraStage {
    fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_channels: usize, cfg: &DecoderConfig) -> Self {
        let c = cfg.width;
        let units = (0..cfg.units)
            .map(|u| GraUnit {
                conv: Conv::same(
                    ps,
                    rng,
                    &format!("{prefix}.unit{u}.conv"),
                    c + cfg.groups,
                    c,
                    3,
                    Init::He,
                ),
                score: Conv::same(ps, rng, &format!("{prefix}.unit{u}.score"), c, 1, 3, Init::He),
            })
            .collect();
        Self {
            groups: cfg.groups,
            width: c,
            reduce: Conv::same(ps, rng, &format!("{prefix}.reduce"), in_channels, c, 1, Init::He),
            units,
            out: Conv::same(ps, rng, &format!("{prefix}.out"), c, 1, 3, Init::He),
        }
    }

    fn param_count(in_channels: usize, cfg: &DecoderConfig) -> usize {
        let c = cfg.width;
        Conv::param_count(in_channels, c, 1)
            + cfg.units * (Conv::param_count(c + cfg.groups, c, 3) + Conv::param_count(c, 1, 3))
            + Conv::param_count(c, 1, 3)
    }

    /// Refines `prior` (already at this stage's resolution) with features
    /// `feat`: `refined = prior + residual`.
    pub fn forward(&self, g: &mut Graph, feat: Var, prior: Var) -> Result<GraTrace> {
        let (c, h, w) = g.value(feat).dims3();
        if c != self.reduce.in_channels {
            return Err(shape_err!(
                "stage expects {} channels, got {c}",
                self.reduce.in_channels
            ));
        }
        if g.shape(prior) != [1, h, w] {
            return Err(shape_err!("prior {:?} does not match features {h}x{w}", g.shape(prior)));
        }
        let mut x = conv_gelu(g, &self.reduce, feat);
        let s = g.sigmoid(prior);
        let reversed = g.affine(s, -1.0, 1.0);
        let mut attn = reversed;
        let gc = self.width / self.groups;
        let mut first_concat = None;
        for unit in &self.units {
            let mut parts = Vec::with_capacity(2 * self.groups);
            for j in 0..self.groups {
                parts.push(g.narrow(x, j * gc, gc));
                parts.push(attn);
            }
            let cat = g.concat(&parts);
            first_concat.get_or_insert(cat);
            let d = conv_gelu(g, &unit.conv, cat);
            x = g.add(x, d);
            let sc = unit.score.forward(g, x);
            attn = g.add(attn, sc);
        }
        let residual = self.out.forward(g, x);
        let refined = g.add(prior, residual);
        Ok(GraTrace {
            reversed,
            first_concat: first_concat.expect("at least one unit"),
            residual,
            refined,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    pub ncd: Ncd,
    /// Stages at scales 4, 3, 2.
    pub stages: [GraStage; 3],
}

impl Decoder {
    /// `in_widths` are the channel counts at scales 2, 3, 4.
    pub fn new(
        config: &DecoderConfig,
        in_widths: [usize; 3],
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
    ) -> Result<Self> {
        config.validate()?;
        let ncd = Ncd::new(ps, rng, &format!("{prefix}.ncd"), in_widths, config.width);
        let stages =
            STAGE_SCALES.map(|s| GraStage::new(ps, rng, &format!("{prefix}.gra{s}"), in_widths[s - 2], config));
        Ok(Self {
            config: config.clone(),
            ncd,
            stages,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn param_count(config: &DecoderConfig, in_widths: [usize; 3]) -> usize {
        Ncd::param_count(in_widths, config.width)
            + STAGE_SCALES
                .iter()
                .map(|&s| GraStage::param_count(in_widths[s - 2], config))
                .sum::<usize>()
    }

    /// Zeroes the residual conv of every reverse-attention stage.
    pub fn zero_stage_residuals(&self, ps: &mut ParamStore) {
        for s in &self.stages {
            s.out.zero(ps);
        }
    }

    /// Full decode of features at scales 2, 3, 4 for an `out_h x out_w` frame.
    pub fn forward(&self, g: &mut Graph, feats: [Var; 3], out_h: usize, out_w: usize) -> Result<PredictionVars> {
        let ncd = self.ncd.forward(g, feats)?;
        let coarse = ncd.logits;
        let mut prior = coarse;
        let mut stage_logits = Vec::with_capacity(3);
        for (stage, &s) in self.stages.iter().zip(&STAGE_SCALES) {
            let feat = feats[s - 2];
            let (_, h, w) = g.value(feat).dims3();
            let resized = g.resize(prior, h, w);
            let trace = stage.forward(g, feat, resized)?;
            stage_logits.push(trace.refined);
            prior = trace.refined;
        }
        let full = g.resize(prior, out_h, out_w);
        let final_prob = g.sigmoid(full);
        Ok(PredictionVars {
            coarse_logits: coarse,
            stage_logits,
            final_prob,
        })
    }

    /// Inference wrapper.
    pub fn decode(&self, ps: &ParamStore, feats: [&Tensor; 3], out_h: usize, out_w: usize) -> Result<PredictionSet> {
        let mut g = Graph::inference(ps);
        let vars = feats.map(|t| g.constant(t.clone()));
        let p = self.forward(&mut g, vars, out_h, out_w)?;
        Ok(p.to_tensors(&g))
    }
}
