//! Training loop: Adam, per-frame pair sampling, per-epoch checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{
    epoch_file_name, AdamState, Checkpoint, CheckpointHeader, EpochStats, RngState, TensorEntry, VERSION,
};
use crate::config::RunConfig;
use crate::data::{mirror_neighbor, ClipSegment, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{hybrid_loss_graph, LossBreakdown};
use crate::model::{prepare_frame, prepare_mask, Model};
use crate::parallel::{self, Execution};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Stream of the pair-sampling generator; epoch orders use stream `epoch + 1`.
const SAMPLER_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. A zero learning rate leaves the
    /// parameters untouched.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                if lr != 0.0 {
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

/// A segment resized to the model input: frames min-max stretched, masks
/// nearest-resampled.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub id: String,
    pub frames: Vec<Tensor>,
    pub masks: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct TrainSet {
    pub clips: Vec<PreparedClip>,
    /// `(clip, frame)` of every sample.
    index: Vec<(usize, usize)>,
}

impl TrainSet {
    pub fn prepare(segments: &[ClipSegment], size: (usize, usize), exec: Execution) -> Self {
        let clips: Vec<PreparedClip> = parallel::map_slice(exec, segments, |s| PreparedClip {
            id: format!("{}@{}", s.meta.id, s.meta.start),
            frames: s.frames.iter().map(|f| prepare_frame(f, size)).collect(),
            masks: s.masks.iter().map(|m| prepare_mask(m, size)).collect(),
        });
        let index = clips
            .iter()
            .enumerate()
            .flat_map(|(c, clip)| (0..clip.frames.len()).map(move |t| (c, t)))
            .collect();
        Self { clips, index }
    }

    /// Number of training samples (frames).
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Loss and parameter gradients of one `(frame, neighbour)` sample.
pub fn sample_gradients(
    model: &Model,
    params: &ParamStore,
    frame: &Tensor,
    adjacent: &Tensor,
    mask: &Tensor,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut g = Graph::new(params);
    let x = g.constant(frame.clone());
    let a = g.constant(adjacent.clone());
    let pred = model.forward(&mut g, x, a)?;
    let loss = hybrid_loss_graph(&mut g, &pred.supervised_maps(), mask)?;
    let breakdown = loss.breakdown(&g);
    let grads = g.backward(loss.total).param_grads(&g);
    Ok((breakdown, grads))
}

pub struct Trainer {
    config: RunConfig,
    model: Model,
    params: ParamStore,
    adam: Adam,
    sampler: ChaCha8Rng,
    epoch: usize,
    cursor: usize,
    partial_loss: f64,
    history: Vec<EpochStats>,
    exec: Execution,
}

impl Trainer {
    pub fn new(config: RunConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        let (model, params) = Model::new(&config.model, config.switches, config.seed)?;
        let adam = Adam::new(&params);
        let mut sampler = ChaCha8Rng::seed_from_u64(config.seed);
        sampler.set_stream(SAMPLER_STREAM);
        Ok(Self {
            config,
            model,
            params,
            adam,
            sampler,
            epoch: 0,
            cursor: 0,
            partial_loss: 0.0,
            history: Vec::new(),
            exec,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step on the given samples; returns their mean loss.
    pub fn step_on(&mut self, set: &TrainSet, samples: &[(usize, usize)]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let jobs: Vec<(usize, usize, usize)> = samples
            .iter()
            .map(|&(c, t)| {
                let forward = self.sampler.gen::<bool>();
                (c, t, mirror_neighbor(set.clips[c].frames.len(), t, forward))
            })
            .collect();
        let (model, params) = (&self.model, &self.params);
        let results = parallel::map_slice(self.exec, &jobs, |&(c, t, adj)| {
            let clip = &set.clips[c];
            sample_gradients(model, params, &clip.frames[t], &clip.frames[adj], &clip.masks[t])
        });
        let mut sum: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;
        for (r, &(c, t, adj)) in results.into_iter().zip(&jobs) {
            let (loss, grads) = r?;
            let finite_grads = grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()));
            if !loss.total.is_finite() || !finite_grads {
                return Err(Error::Numerical(format!(
                    "step {}: clip {} frame {t} (adjacent {adj}): loss {} with terms [{}]{}",
                    self.adam.steps() + 1,
                    set.clips[c].id,
                    loss.total,
                    loss.per_map
                        .iter()
                        .map(|m| format!("{} ce={} iou={}", m.name, m.ce_w, m.iou_w))
                        .collect::<Vec<_>>()
                        .join(", "),
                    if finite_grads { "" } else { "; non-finite gradient" }
                )));
            }
            loss_sum += loss.total;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let scale = 1.0 / samples.len() as f64;
        let mut grads = sum.expect("non-empty batch");
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        self.adam
            .update(self.params.values_mut(), &grads, self.config.learning_rate);
        Ok(loss_sum * scale)
    }

    /// Advances by one batch of the current epoch, closing the epoch when
    /// its last batch is done.
    pub fn advance(&mut self, set: &TrainSet) -> Result<Option<EpochStats>> {
        let n = set.len();
        if n == 0 {
            return Err(Error::Data("training set is empty".into()));
        }
        let order = self.epoch_order(n);
        let end = (self.cursor + self.config.batch_size).min(n);
        let batch: Vec<(usize, usize)> = order[self.cursor..end].iter().map(|&k| set.index[k]).collect();
        let mean = self.step_on(set, &batch)?;
        self.partial_loss += mean * batch.len() as f64;
        self.cursor = end;
        if self.cursor < n {
            return Ok(None);
        }
        self.epoch += 1;
        let stats = EpochStats {
            epoch: self.epoch,
            mean_loss: self.partial_loss / n as f64,
            samples: n,
        };
        self.history.push(stats);
        self.cursor = 0;
        self.partial_loss = 0.0;
        Ok(Some(stats))
    }

    /// Finishes the current epoch.
    pub fn run_epoch(&mut self, set: &TrainSet) -> Result<EpochStats> {
        loop {
            if let Some(stats) = self.advance(set)? {
                return Ok(stats);
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let entries = self
            .params
            .names()
            .iter()
            .zip(self.params.values())
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let seed: String = self.sampler.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Checkpoint {
            header: CheckpointHeader {
                version: VERSION,
                epoch: self.epoch,
                cursor: self.cursor,
                partial_loss: self.partial_loss,
                step: self.adam.t,
                config: self.config.clone(),
                rng: RngState {
                    seed,
                    stream: self.sampler.get_stream(),
                    word_pos: self.sampler.get_word_pos().to_string(),
                },
                adam: AdamState {
                    t: self.adam.t,
                    beta1: self.adam.beta1,
                    beta2: self.adam.beta2,
                    eps: self.adam.eps,
                },
                params: entries,
                history: self.history.clone(),
            },
            params: self.params.values().to_vec(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().write(path)
    }

    pub fn from_checkpoint(ckpt: Checkpoint, exec: Execution) -> Result<Self> {
        let h = ckpt.header;
        let mut trainer = Self::new(h.config, exec)?;
        load_params(&mut trainer.params, &h.params, ckpt.params)?;
        trainer.adam.m = ckpt.adam_m;
        trainer.adam.v = ckpt.adam_v;
        trainer.adam.t = h.adam.t;
        trainer.adam.beta1 = h.adam.beta1;
        trainer.adam.beta2 = h.adam.beta2;
        trainer.adam.eps = h.adam.eps;
        trainer.sampler = restore_rng(&h.rng)?;
        trainer.epoch = h.epoch;
        trainer.cursor = h.cursor;
        trainer.partial_loss = h.partial_loss;
        trainer.history = h.history;
        Ok(trainer)
    }

    pub fn load(path: &Path, exec: Execution) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::read(path)?, exec)
    }
}

fn load_params(ps: &mut ParamStore, entries: &[TensorEntry], values: Vec<Tensor>) -> Result<()> {
    if entries.len() != ps.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, the configured model has {}",
            entries.len(),
            ps.len()
        )));
    }
    for ((entry, value), id) in entries.iter().zip(values).zip(ps.ids().collect::<Vec<_>>()) {
        if entry.name != ps.name(id) || entry.shape != ps.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match model tensor {} {:?}",
                entry.name,
                entry.shape,
                ps.name(id),
                ps.get(id).shape()
            )));
        }
        *ps.get_mut(id) = value;
    }
    Ok(())
}

fn restore_rng(state: &RngState) -> Result<ChaCha8Rng> {
    let bad = || Error::Checkpoint("malformed generator state".into());
    if state.seed.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&state.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos.parse::<u128>().map_err(|_| bad())?);
    Ok(rng)
}

/// Model, parameters and configuration stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(RunConfig, Model, ParamStore)> {
    let ckpt = Checkpoint::read(path)?;
    let cfg = ckpt.header.config.clone();
    cfg.validate()?;
    let (model, mut ps) = Model::new(&cfg.model, cfg.switches, cfg.seed)?;
    load_params(&mut ps, &ckpt.header.params, ckpt.params)?;
    Ok((cfg, model, ps))
}

/// Per-epoch progress passed to [`train`]'s observer.
#[derive(Clone, Debug)]
pub struct EpochReport {
    pub stats: EpochStats,
    pub checkpoint: PathBuf,
}

/// Segments to train on: the manifest's train split, or every video when
/// the dataset has no manifest.
pub fn training_segments(config: &RunConfig, exec: Execution) -> Result<Vec<ClipSegment>> {
    let has_manifest = config.data.manifest.is_some() || config.data.root.join(crate::data::MANIFEST_FILE).is_file();
    config.load_split(has_manifest.then_some(Split::Train), exec)
}

/// Trains for the configured number of epochs, writing one checkpoint per
/// epoch. Resumes from `resume` when given.
pub fn train(
    config: RunConfig,
    segments: &[ClipSegment],
    resume: Option<&Path>,
    exec: Execution,
    mut observe: impl FnMut(&EpochReport),
) -> Result<Trainer> {
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::load(p, exec)?;
            t.config.epochs = config.epochs;
            t.config.checkpoint_dir = config.checkpoint_dir.clone();
            t
        }
        None => Trainer::new(config, exec)?,
    };
    let set = TrainSet::prepare(segments, trainer.config.input_dims(), exec);
    if set.is_empty() {
        return Err(Error::Data("no training frames".into()));
    }
    while trainer.epoch < trainer.config.epochs {
        let stats = trainer.run_epoch(&set)?;
        let path = trainer.config.checkpoint_dir.join(epoch_file_name(stats.epoch));
        trainer.save(&path)?;
        log::info!("epoch {} mean loss {:.6}", stats.epoch, stats.mean_loss);
        observe(&EpochReport {
            stats,
            checkpoint: path,
        });
    }
    Ok(trainer)
}
