//! Consecutive temporal correlation: motion features between two adjacent
//! frames at one pyramid scale.
//!
//! For every query position of the current frame the all-pairs dot-product
//! volume against the reference frame is turned into a distribution over
//! reference positions (softmax over `(u, v)`), which then gathers learned
//! channel features of the frame pair. A small conv block and a residual
//! from the current frame's features produce the motion features.
//!
//! Indexing follows `[C, X, Y]` feature maps: `(x, y)` is a query position
//! in the current frame and `(u, v)` a reference position.

use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv;
use crate::parallel::{self, Execution};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Dense 4-d correlation volume `H' x W' x H' x W'`.
///
/// Unnormalized volumes keep `exp(dot - shift[q])` per query row `q` so the
/// stored values never overflow; [`CorrelationVolume::get`] re-applies the
/// shift to return the raw `exp(dot)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVolume {
    height: usize,
    width: usize,
    values: Vec<f64>,
    shifts: Vec<f64>,
    normalized: bool,
}

impl CorrelationVolume {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Entry at query `(x, y)` and reference `(u, v)`.
    pub fn get(&self, x: usize, y: usize, u: usize, v: usize) -> f64 {
        let n = self.positions();
        let q = x * self.width + y;
        let r = u * self.width + v;
        let stored = self.values[q * n + r];
        if self.normalized {
            stored
        } else {
            stored * self.shifts[q].exp()
        }
    }

    /// The `(u, v)` slice for query `(x, y)`, flattened row-major. For an
    /// unnormalized volume this is scaled by `exp(-shift)`.
    pub fn row(&self, x: usize, y: usize) -> &[f64] {
        let n = self.positions();
        let q = x * self.width + y;
        &self.values[q * n..(q + 1) * n]
    }

    /// `(x, y)` slice sums over `(u, v)`, in query order.
    pub fn slice_sums(&self) -> Vec<f64> {
        let n = self.positions();
        self.values
            .chunks(n)
            .zip(&self.shifts)
            .map(|(row, &s)| {
                let sum: f64 = row.iter().sum();
                if self.normalized {
                    sum
                } else {
                    sum * s.exp()
                }
            })
            .collect()
    }
}

fn check_pair(f_t: &Tensor, f_prev: &Tensor) -> Result<()> {
    if f_t.shape().len() != 3 || f_t.shape() != f_prev.shape() {
        return Err(shape_err!(
            "correlation inputs must be matching [C, H, W] maps, got {:?} and {:?}",
            f_t.shape(),
            f_prev.shape()
        ));
    }
    if !f_t.all_finite() || !f_prev.all_finite() {
        return Err(Error::InvalidInput("non-finite correlation input".into()));
    }
    Ok(())
}

/// `values[x, y, u, v] = exp(sum_c f_t[c, x, y] * f_prev[c, u, v])`, stored
/// with per-query max subtraction.
pub fn correlation_volume(f_t: &Tensor, f_prev: &Tensor) -> Result<CorrelationVolume> {
    correlation_volume_with(f_t, f_prev, Execution::default())
}

pub fn correlation_volume_with(f_t: &Tensor, f_prev: &Tensor, exec: Execution) -> Result<CorrelationVolume> {
    check_pair(f_t, f_prev)?;
    let (c, h, w) = f_t.dims3();
    let n = h * w;
    let (a, b) = (f_t.data(), f_prev.data());
    let rows = parallel::map_range(exec, n, |q| {
        let mut row: Vec<f64> = (0..n)
            .map(|r| (0..c).map(|ch| a[ch * n + q] * b[ch * n + r]).sum())
            .collect();
        let shift = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in row.iter_mut() {
            *v = (*v - shift).exp();
        }
        (row, shift)
    });
    let mut values = Vec::with_capacity(n * n);
    let mut shifts = Vec::with_capacity(n);
    for (row, shift) in rows {
        values.extend_from_slice(&row);
        shifts.push(shift);
    }
    Ok(CorrelationVolume {
        height: h,
        width: w,
        values,
        shifts,
        normalized: false,
    })
}

/// Divides every `(x, y)` slice by its sum over `(u, v)`; the result equals
/// a softmax of the raw dot products over reference positions.
pub fn normalize_correlation(vol: &CorrelationVolume) -> CorrelationVolume {
    if vol.normalized {
        return vol.clone();
    }
    let n = vol.positions();
    let mut values = vol.values.clone();
    for row in values.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    CorrelationVolume {
        height: vol.height,
        width: vol.width,
        values,
        shifts: vec![0.0; n],
        normalized: true,
    }
}

/// `out[c, x, y] = sum_{u, v} delta[c, u, v] * vol[x, y, u, v]`.
pub fn apply_correlation(delta: &Tensor, vol: &CorrelationVolume) -> Result<Tensor> {
    if !vol.normalized {
        return Err(Error::InvalidInput(
            "apply_correlation needs a normalized volume".into(),
        ));
    }
    if delta.shape().len() != 3 {
        return Err(shape_err!("delta must be [C, H, W], got {:?}", delta.shape()));
    }
    let (c, h, w) = delta.dims3();
    if (h, w) != (vol.height, vol.width) {
        return Err(shape_err!(
            "delta is {h}x{w} but the volume is {}x{}",
            vol.height,
            vol.width
        ));
    }
    let n = h * w;
    let mut out = vec![0.0; c * n];
    crate::tensor::gemm(c, n, n, delta.data(), false, &vol.values, true, 0.0, &mut out);
    Ok(Tensor::new(&[c, h, w], out))
}

/// Motion features for one pyramid scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFeatures {
    pub values: Tensor,
    pub scale: usize,
}

/// Learned parameters of one scale's temporal correlation block.
#[derive(Clone, Debug)]
pub struct CtcBlock {
    channels: usize,
    /// 1x1 fusion of `[f_t, f_prev]` (2C -> C).
    pub fuse: Conv,
    /// 3x3 refinement added on top of the fused features.
    pub refine: Conv,
    /// Post-correlation conv block.
    pub post1: Conv,
    pub post2: Conv,
}

impl CtcBlock {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, channels: usize) -> Self {
        let c = channels;
        Self {
            channels,
            fuse: Conv::same(ps, rng, &format!("{prefix}.fuse"), 2 * c, c, 1, Init::He),
            refine: Conv::same(ps, rng, &format!("{prefix}.refine"), c, c, 3, Init::He),
            post1: Conv::same(ps, rng, &format!("{prefix}.post1"), c, c, 3, Init::He),
            post2: Conv::same(ps, rng, &format!("{prefix}.post2"), c, c, 3, Init::TruncNormal(0.02)),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn param_count(channels: usize) -> usize {
        let c = channels;
        Conv::param_count(2 * c, c, 1) + 3 * Conv::param_count(c, c, 3)
    }

    /// Zeroes the post-correlation block so the block reduces to `f_t`.
    pub fn zero_post_block(&self, ps: &mut ParamStore) {
        self.post1.zero(ps);
        self.post2.zero(ps);
    }

    fn check(&self, g: &Graph, f_t: Var, f_prev: Var) -> Result<()> {
        let (a, b) = (g.shape(f_t), g.shape(f_prev));
        if a != b || a.len() != 3 {
            return Err(shape_err!("temporal pair shapes {a:?} and {b:?} differ"));
        }
        if a[0] != self.channels {
            return Err(shape_err!("expected {} channels, got {}", self.channels, a[0]));
        }
        Ok(())
    }

    /// Channel features `p + Conv3x3(GELU(p))` with `p = Conv1x1([f_t, f_prev])`.
    pub fn channel_features(&self, g: &mut Graph, f_t: Var, f_prev: Var) -> Result<Var> {
        self.check(g, f_t, f_prev)?;
        let cat = g.concat(&[f_t, f_prev]);
        let p = self.fuse.forward(g, cat);
        let a = g.gelu(p);
        let r = self.refine.forward(g, a);
        Ok(g.add(p, r))
    }

    /// Normalized correlation of `f_t` against `f_prev` as an `[N, N]`
    /// matrix (query rows), `N = H' * W'`.
    pub fn normalized_correlation(g: &mut Graph, f_t: Var, f_prev: Var) -> Var {
        let scores = g.matmul(f_t, f_prev, true, false);
        g.softmax_rows(scores)
    }

    /// Correlation read-out `xi[c, q] = sum_r delta[c, r] * vol[q, r]`.
    pub fn apply(g: &mut Graph, delta: Var, vol: Var) -> Var {
        let shape = g.shape(delta).to_vec();
        let xi = g.matmul(delta, vol, false, true);
        g.reshape(xi, &shape)
    }

    /// Full block: `eps = Conv3x3(GELU(Conv3x3(xi))) + f_t`.
    pub fn forward(&self, g: &mut Graph, f_t: Var, f_prev: Var) -> Result<Var> {
        let delta = self.channel_features(g, f_t, f_prev)?;
        let vol = Self::normalized_correlation(g, f_t, f_prev);
        let xi = Self::apply(g, delta, vol);
        let h = self.post1.forward(g, xi);
        let h = g.gelu(h);
        let h = self.post2.forward(g, h);
        Ok(g.add(h, f_t))
    }
}

/// Inference wrapper: motion features of `f_t` relative to `f_prev`.
pub fn ctc_forward(
    block: &CtcBlock,
    ps: &ParamStore,
    f_t: &Tensor,
    f_prev: &Tensor,
    scale: usize,
) -> Result<MotionFeatures> {
    check_pair(f_t, f_prev)?;
    let mut g = Graph::inference(ps);
    let a = g.constant(f_t.clone());
    let b = g.constant(f_prev.clone());
    let out = block.forward(&mut g, a, b)?;
    Ok(MotionFeatures {
        values: g.value(out).clone(),
        scale,
    })
}

/// Inference wrapper for the learned channel features alone.
pub fn channel_features(block: &CtcBlock, ps: &ParamStore, f_t: &Tensor, f_prev: &Tensor) -> Result<Tensor> {
    check_pair(f_t, f_prev)?;
    let mut g = Graph::inference(ps);
    let a = g.constant(f_t.clone());
    let b = g.constant(f_prev.clone());
    let out = block.channel_features(&mut g, a, b)?;
    Ok(g.value(out).clone())
}
