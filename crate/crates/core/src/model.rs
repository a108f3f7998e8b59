//! Full network: encoder, per-scale temporal correlation and spatial
//! perception, and the mask decoder, with module switches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{encoder_param_count, Encoder, EXPORTED_SCALES};
use crate::config::{ModelConfig, Switches};
use crate::ctc::CtcBlock;
use crate::data::{mirror_neighbor, Frame, Mask};
use crate::decoder::{Decoder, PredictionSet, PredictionVars};
use crate::error::{Error, Result};
use crate::fsp::Fsp;
use crate::graph::{Graph, Var};
use crate::nn::Conv;
use crate::parallel::{self, Execution};
use crate::params::{Init, ParamStore};
use crate::tensor::{self, Tensor};

/// Per-scale refinement: spatial perception, or a plain 3x3 conv when the
/// module is switched off.
#[derive(Clone, Debug)]
pub enum Refiner {
    Fsp(Fsp),
    Plain(Conv),
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    switches: Switches,
    pub encoder: Encoder,
    /// One block per exported scale when the correlation module is on.
    pub ctc: Option<[CtcBlock; 3]>,
    pub refiners: [Refiner; 3],
    pub decoder: Decoder,
}

/// Generator for one module: the run seed on a stream named after the
/// module, so modules shared between switch settings start identical.
fn module_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let stream = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn scale_widths(config: &ModelConfig) -> [usize; 3] {
    EXPORTED_SCALES.map(|s| config.encoder.scale_width(s))
}

impl Model {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(config: &ModelConfig, switches: Switches, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let encoder = Encoder::new(&config.encoder, &mut ps, &mut module_rng(seed, "encoder"), "encoder")?;
        let widths = scale_widths(config);
        let ctc = switches.ctc.then(|| {
            [0, 1, 2].map(|i| {
                let name = format!("ctc.s{}", EXPORTED_SCALES[i]);
                CtcBlock::new(&mut ps, &mut module_rng(seed, &name), &name, widths[i])
            })
        });
        let mut refiners = Vec::with_capacity(3);
        for (i, &c) in widths.iter().enumerate() {
            let s = EXPORTED_SCALES[i];
            refiners.push(if switches.fsp {
                let name = format!("fsp.s{s}");
                Refiner::Fsp(Fsp::new(
                    &mut ps,
                    &mut module_rng(seed, &name),
                    &name,
                    c,
                    config.fsp_groups,
                )?)
            } else {
                let name = format!("bypass.s{s}");
                Refiner::Plain(Conv::same(
                    &mut ps,
                    &mut module_rng(seed, &name),
                    &name,
                    c,
                    c,
                    3,
                    Init::He,
                ))
            });
        }
        let refiners: [Refiner; 3] = refiners.try_into().expect("three scales");
        let decoder = Decoder::new(
            &config.decoder,
            widths,
            &mut ps,
            &mut module_rng(seed, "decoder"),
            "decoder",
        )?;
        Ok((
            Self {
                config: config.clone(),
                switches,
                encoder,
                ctc,
                refiners,
                decoder,
            },
            ps,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn switches(&self) -> Switches {
        self.switches
    }

    /// Number of trainable scalars of the correlation blocks.
    pub fn ctc_param_count(config: &ModelConfig) -> usize {
        scale_widths(config).iter().map(|&c| CtcBlock::param_count(c)).sum()
    }

    /// Scalars of the spatial perception blocks.
    pub fn fsp_param_count(config: &ModelConfig) -> usize {
        scale_widths(config)
            .iter()
            .map(|&c| Fsp::param_count(c, config.fsp_groups))
            .sum()
    }

    /// Scalars of the plain convs that replace spatial perception.
    pub fn bypass_param_count(config: &ModelConfig) -> usize {
        scale_widths(config).iter().map(|&c| Conv::param_count(c, c, 3)).sum()
    }

    pub fn param_count(config: &ModelConfig, switches: Switches) -> usize {
        encoder_param_count(&config.encoder)
            + if switches.ctc { Self::ctc_param_count(config) } else { 0 }
            + if switches.fsp {
                Self::fsp_param_count(config)
            } else {
                Self::bypass_param_count(config)
            }
            + Decoder::param_count(&config.decoder, scale_widths(config))
    }

    /// Whether a forward pass reads the adjacent frame at all.
    pub fn uses_adjacent(&self) -> bool {
        self.ctc.is_some()
    }

    /// Refined features from the current and adjacent frames' encoder
    /// features.
    pub fn refine(&self, g: &mut Graph, feats_t: [Var; 3], feats_adj: Option<[Var; 3]>) -> Result<[Var; 3]> {
        let mut out = Vec::with_capacity(3);
        for i in 0..3 {
            let f = feats_t[i];
            let motion = match (&self.ctc, feats_adj) {
                (Some(blocks), Some(adj)) => blocks[i].forward(g, f, adj[i])?,
                (Some(_), None) => return Err(Error::InvalidInput("correlation needs an adjacent frame".into())),
                (None, _) => g.constant(Tensor::zeros(g.shape(f))),
            };
            out.push(match &self.refiners[i] {
                Refiner::Fsp(fsp) => fsp.forward(g, motion, f)?,
                Refiner::Plain(conv) => {
                    let z = Fsp::fuse_inputs(g, motion, f)?;
                    conv.forward(g, z)
                }
            });
        }
        Ok([out[0], out[1], out[2]])
    }

    /// One pass on `[1, H, W]` frames: the current frame and one neighbour.
    pub fn forward(&self, g: &mut Graph, frame_t: Var, frame_adj: Var) -> Result<PredictionVars> {
        let (h, w) = crate::backbone::validate_frame(g.value(frame_t))?;
        if g.shape(frame_t) != g.shape(frame_adj) {
            return Err(crate::error::shape_err!(
                "frames {:?} and {:?} differ",
                g.shape(frame_t),
                g.shape(frame_adj)
            ));
        }
        let ft = self.encoder.forward(g, frame_t)?;
        let fa = if self.uses_adjacent() {
            Some(self.encoder.forward(g, frame_adj)?)
        } else {
            None
        };
        let refined = self.refine(g, ft, fa)?;
        self.decoder.forward(g, refined, h, w)
    }

    /// Inference pass from pre-computed encoder features.
    pub fn predict_from_features(
        &self,
        ps: &ParamStore,
        feats_t: &[Tensor; 3],
        feats_adj: &[Tensor; 3],
        size: (usize, usize),
    ) -> Result<PredictionSet> {
        let mut g = Graph::inference(ps);
        let ft = feats_t.clone().map(|t| g.constant(t));
        let fa = self.uses_adjacent().then(|| feats_adj.clone().map(|t| g.constant(t)));
        let refined = self.refine(&mut g, ft, fa)?;
        let p = self.decoder.forward(&mut g, refined, size.0, size.1)?;
        Ok(p.to_tensors(&g))
    }

    pub fn forward_pass(&self, ps: &ParamStore, frame_t: &Tensor, frame_adj: &Tensor) -> Result<PredictionSet> {
        let mut g = Graph::inference(ps);
        let a = g.constant(frame_t.clone());
        let b = g.constant(frame_adj.clone());
        let p = self.forward(&mut g, a, b)?;
        Ok(p.to_tensors(&g))
    }

    pub fn encode(&self, ps: &ParamStore, frame: &Tensor) -> Result<[Tensor; 3]> {
        Ok(self.encoder.encode(ps, frame)?.levels().clone())
    }
}

/// Frame as a `[1, h, w]` model input: bilinear resize, then per-frame
/// min-max stretch to `[0, 1]`.
pub fn prepare_frame(frame: &Frame, size: (usize, usize)) -> Tensor {
    let mut t = frame.to_tensor();
    if (frame.height(), frame.width()) != size {
        t = tensor::resize_bilinear(&t, size.0, size.1);
    }
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi > lo {
        t = t.map(|v| (v - lo) / (hi - lo));
    } else {
        t = t.map(|v| v.clamp(0.0, 1.0));
    }
    t
}

/// Mask as a `[1, h, w]` 0/1 tensor at the model input size.
pub fn prepare_mask(mask: &Mask, size: (usize, usize)) -> Tensor {
    mask.resized(size.0, size.1).to_tensor()
}

/// Average of two probability maps.
pub fn merge_passes(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |i| 0.5 * (a.data()[i] + b.data()[i]))
}

/// Two-pass probability maps for every frame of a sequence, at the model
/// input size. Each frame is encoded once.
pub fn infer_sequence(
    model: &Model,
    ps: &ParamStore,
    frames: &[Frame],
    size: (usize, usize),
    exec: Execution,
) -> Result<Vec<Tensor>> {
    let inputs: Vec<Tensor> = parallel::map_slice(exec, frames, |f| prepare_frame(f, size));
    let feats: Vec<[Tensor; 3]> = parallel::map_slice(exec, &inputs, |x| model.encode(ps, x))
        .into_iter()
        .collect::<Result<_>>()?;
    let n = frames.len();
    parallel::map_range(exec, n, |t| {
        let prev = mirror_neighbor(n, t, false);
        let next = mirror_neighbor(n, t, true);
        let a = model.predict_from_features(ps, &feats[t], &feats[prev], size)?;
        if !model.uses_adjacent() || prev == next {
            return Ok(a.final_prob);
        }
        let b = model.predict_from_features(ps, &feats[t], &feats[next], size)?;
        Ok(merge_passes(&a.final_prob, &b.final_prob))
    })
    .into_iter()
    .collect()
}

/// Two-pass probability map of frame `t`.
pub fn infer_frame(model: &Model, ps: &ParamStore, frames: &[Frame], t: usize, size: (usize, usize)) -> Result<Tensor> {
    if t >= frames.len() {
        return Err(Error::InvalidInput(format!("frame {t} of {}", frames.len())));
    }
    let n = frames.len();
    let x = prepare_frame(&frames[t], size);
    let prev = prepare_frame(&frames[mirror_neighbor(n, t, false)], size);
    let next = prepare_frame(&frames[mirror_neighbor(n, t, true)], size);
    let a = model.forward_pass(ps, &x, &prev)?;
    let b = model.forward_pass(ps, &x, &next)?;
    Ok(merge_passes(&a.final_prob, &b.final_prob))
}
