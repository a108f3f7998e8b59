//! Foreground-map evaluation scores and their dataset-level aggregation.
//!
//! Every score takes a probability map `pred` in `[0, 1]` and a binary mask
//! `gt` of the same size, both `[H, W]` or `[1, H, W]` tensors.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::parallel::{self, Execution};
use crate::tensor::Tensor;

/// Machine epsilon used as the denominator guard of the reference code.
pub const EPS: f64 = f64::EPSILON;
pub const S_ALPHA: f64 = 0.5;
pub const BINARY_THRESHOLD: f64 = 0.5;
pub const E_THRESHOLDS: usize = 256;

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize)> {
    let ok = |t: &Tensor| t.shape().len() == 2 || (t.shape().len() == 3 && t.shape()[0] == 1);
    if !ok(pred) || !ok(gt) || pred.dims3() != gt.dims3() {
        return Err(shape_err!(
            "prediction {:?} and mask {:?} must be matching single-channel maps",
            pred.shape(),
            gt.shape()
        ));
    }
    if pred.is_empty() {
        return Err(shape_err!("empty prediction map"));
    }
    if pred.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("prediction values must lie in [0, 1]".into()));
    }
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
    }
    let (_, h, w) = gt.dims3();
    Ok((h, w))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean absolute error.
pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(mean(pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs())))
}

/// IoU and Dice of `pred >= threshold` against `gt`; both are 1 when the two
/// sets are empty.
pub fn miou_mdice(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<(f64, f64)> {
    check_pair(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&pv, &gv) in pred.data().iter().zip(gt.data()) {
        let pb = pv >= threshold;
        let gb = gv == 1.0;
        inter += (pb && gb) as usize;
        p += pb as usize;
        g += gb as usize;
    }
    let union = p + g - inter;
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    Ok((inter as f64 / union as f64, 2.0 * inter as f64 / (p + g) as f64))
}

// ---------------------------------------------------------------- S-measure

fn s_object(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * m / (m * m + 1.0 + std + EPS)
}

fn object_score(p: &[f64], g: &[f64]) -> f64 {
    let u = mean(g.iter().copied());
    let fg: Vec<f64> = p.iter().zip(g).filter(|(_, &g)| g == 1.0).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = p
        .iter()
        .zip(g)
        .filter(|(_, &g)| g == 0.0)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    u * s_object(&fg) + (1.0 - u) * s_object(&bg)
}

/// One-based centroid `(x, y)` of the mask, rounded half to even.
fn centroid(g: &[f64], h: usize, w: usize) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, &v) in g.iter().enumerate() {
        if v == 1.0 {
            sy += (i / w) as f64;
            sx += (i % w) as f64;
            n += 1;
        }
    }
    let (x, y) = if n == 0 {
        ((w as f64 / 2.0).round_ties_even(), (h as f64 / 2.0).round_ties_even())
    } else {
        ((sx / n as f64).round_ties_even(), (sy / n as f64).round_ties_even())
    };
    (x as usize + 1, y as usize + 1)
}

fn block_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len();
    if n == 0 {
        return 0.0;
    }
    let mx = p.iter().sum::<f64>() / n as f64;
    let my = g.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(g) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let d = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let (sxx, syy, sxy) = (sxx / d, syy / d, sxy / d);
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn block(data: &[f64], w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    rows.flat_map(|y| cols.clone().map(move |x| (y, x)))
        .map(|(y, x)| data[y * w + x])
        .collect()
}

fn region_score(p: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let (cx, cy) = centroid(g, h, w);
    let (x, y) = (cx.min(w), cy.min(h));
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let parts = [(0..y, 0..x, w1), (0..y, x..w, w2), (y..h, 0..x, w3), (y..h, x..w, w4)];
    parts
        .into_iter()
        .map(|(rows, cols, wt)| {
            let bp = block(p, w, rows.clone(), cols.clone());
            let bg = block(g, w, rows, cols);
            wt * block_ssim(&bp, &bg)
        })
        .sum()
}

/// Structure measure: `alpha * object + (1 - alpha) * region`, clamped at 0.
/// An all-background mask scores `1 - mean(pred)`, an all-foreground mask
/// `mean(pred)`.
pub fn s_measure(pred: &Tensor, gt: &Tensor, alpha: f64) -> Result<f64> {
    let (h, w) = check_pair(pred, gt)?;
    let (p, g) = (pred.data(), gt.data());
    let y = mean(g.iter().copied());
    let score = if y == 0.0 {
        1.0 - mean(p.iter().copied())
    } else if y == 1.0 {
        mean(p.iter().copied())
    } else {
        (alpha * object_score(p, g) + (1.0 - alpha) * region_score(p, g, h, w)).max(0.0)
    };
    Ok(score)
}

// --------------------------------------------------------- weighted F-measure

/// 7x7 Gaussian with sigma 5, normalized to unit sum, with entries below
/// `eps * max` cut to zero.
fn gaussian_kernel() -> [[f64; 7]; 7] {
    let sigma: f64 = 5.0;
    let mut k = [[0.0; 7]; 7];
    let mut max = 0.0f64;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            max = max.max(*v);
        }
    }
    let mut sum = 0.0;
    for v in k.iter_mut().flatten() {
        if *v < f64::EPSILON * max {
            *v = 0.0;
        }
        sum += *v;
    }
    for v in k.iter_mut().flatten() {
        *v /= sum;
    }
    k
}

/// For every pixel, the Euclidean distance to the nearest foreground pixel
/// and that pixel's index (itself for foreground). Ties go to the smallest
/// row-major index. Only foreground pixels with a background 4-neighbour can
/// be nearest to a background pixel, so the search is limited to them.
fn nearest_foreground(g: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let fg = |y: usize, x: usize| g[y * w + x] == 1.0;
    let mut boundary = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !fg(y, x) {
                continue;
            }
            let touches_bg = (y > 0 && !fg(y - 1, x))
                || (y + 1 < h && !fg(y + 1, x))
                || (x > 0 && !fg(y, x - 1))
                || (x + 1 < w && !fg(y, x + 1));
            if touches_bg {
                boundary.push((y * w + x, y as f64, x as f64));
            }
        }
    }
    let mut dist = vec![0.0; h * w];
    let mut idx: Vec<usize> = (0..h * w).collect();
    for i in 0..h * w {
        if g[i] == 1.0 {
            continue;
        }
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let mut best = (f64::INFINITY, usize::MAX);
        for &(j, by, bx) in &boundary {
            let d2 = (by - y) * (by - y) + (bx - x) * (bx - x);
            if d2 < best.0 {
                best = (d2, j);
            }
        }
        dist[i] = best.0.sqrt();
        idx[i] = best.1;
    }
    (dist, idx)
}

/// Weighted F-measure with beta^2 = 1. The dependency smoothing replicates
/// edge pixels. An all-background mask scores `1 - mean(pred)`.
pub fn weighted_fmeasure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (h, w) = check_pair(pred, gt)?;
    let (p, g) = (pred.data(), gt.data());
    if g.iter().all(|&v| v == 0.0) {
        return Ok(1.0 - mean(p.iter().copied()));
    }
    let (dist, idx) = nearest_foreground(g, h, w);
    let e: Vec<f64> = p.iter().zip(g).map(|(a, b)| (a - b).abs()).collect();
    let et: Vec<f64> = (0..h * w).map(|i| e[idx[i]]).collect();
    let k = gaussian_kernel();
    let mut ea = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, row) in k.iter().enumerate() {
                let yy = (y + ky).saturating_sub(3).min(h - 1);
                for (kx, &kv) in row.iter().enumerate() {
                    let xx = (x + kx).saturating_sub(3).min(w - 1);
                    acc += kv * et[yy * w + xx];
                }
            }
            ea[y * w + x] = acc;
        }
    }
    let decay = 0.5f64.ln() / 5.0;
    let (mut sum_gt, mut ew_fg, mut ew_bg, mut n_fg) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..h * w {
        if g[i] == 1.0 {
            let m = if ea[i] < e[i] { ea[i] } else { e[i] };
            ew_fg += m;
            sum_gt += 1.0;
            n_fg += 1;
        } else {
            ew_bg += e[i] * (2.0 - (decay * dist[i]).exp());
        }
    }
    let tp = sum_gt - ew_fg;
    let r = 1.0 - ew_fg / n_fg as f64;
    let pr = tp / (tp + ew_bg + EPS);
    Ok(2.0 * r * pr / (r + pr + EPS))
}

// ---------------------------------------------------------------- E-measure

/// Enhanced-alignment measure averaged over 256 thresholds. Threshold `k`
/// marks a pixel as foreground when `pred >= (k + 1) / 256`, so a binary
/// prediction is binarized identically at every threshold. Degenerate masks
/// score the fraction of pixels predicted as the mask's single class.
pub fn e_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let (p, g) = (pred.data(), gt.data());
    let n = p.len();
    let bins = E_THRESHOLDS + 1;
    // hist[b]: pixels with floor(pred * 256) == b, split by mask value
    let mut fg_hist = vec![0usize; bins];
    let mut bg_hist = vec![0usize; bins];
    for (&pv, &gv) in p.iter().zip(g) {
        let b = ((pv * E_THRESHOLDS as f64).floor() as usize).min(E_THRESHOLDS);
        if gv == 1.0 {
            fg_hist[b] += 1;
        } else {
            bg_hist[b] += 1;
        }
    }
    let gt_fg: usize = fg_hist.iter().sum();
    let nf = n as f64;
    let (mut fg_fg, mut bg_fg) = (0usize, 0usize);
    let mut total = 0.0;
    // walk thresholds from the highest down so counts accumulate
    for k in (0..E_THRESHOLDS).rev() {
        fg_fg += fg_hist[k + 1];
        bg_fg += bg_hist[k + 1];
        let pred_fg = fg_fg + bg_fg;
        let score = if gt_fg == 0 {
            (n - pred_fg) as f64 / nf
        } else if gt_fg == n {
            pred_fg as f64 / nf
        } else {
            let mu_p = pred_fg as f64 / nf;
            let mu_g = gt_fg as f64 / nf;
            let counts = [
                (fg_fg, 1.0 - mu_p, 1.0 - mu_g),
                (bg_fg, 1.0 - mu_p, -mu_g),
                (gt_fg - fg_fg, -mu_p, 1.0 - mu_g),
                ((n - gt_fg) - bg_fg, -mu_p, -mu_g),
            ];
            counts
                .iter()
                .map(|&(c, a, b)| {
                    let xi = 2.0 * a * b / (a * a + b * b + EPS);
                    c as f64 * (xi + 1.0) * (xi + 1.0) / 4.0
                })
                .sum::<f64>()
                / nf
        };
        total += score;
    }
    Ok(total / E_THRESHOLDS as f64)
}

// -------------------------------------------------------------- aggregation

/// Scores of one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScores {
    pub s_alpha: f64,
    pub f_beta_w: f64,
    pub mae: f64,
    pub e_phi: f64,
    pub iou: f64,
    pub dice: f64,
}

pub fn score_frame(pred: &Tensor, gt: &Tensor) -> Result<FrameScores> {
    let (iou, dice) = miou_mdice(pred, gt, BINARY_THRESHOLD)?;
    Ok(FrameScores {
        s_alpha: s_measure(pred, gt, S_ALPHA)?,
        f_beta_w: weighted_fmeasure(pred, gt)?,
        mae: mae(pred, gt)?,
        e_phi: e_measure(pred, gt)?,
        iou,
        dice,
    })
}

/// Scores `(pred, gt)` pairs, concurrently when `exec` allows; results keep
/// input order.
pub fn score_frames(exec: Execution, pairs: &[(Tensor, Tensor)]) -> Result<Vec<FrameScores>> {
    parallel::map_slice(exec, pairs, |(p, g)| score_frame(p, g))
        .into_iter()
        .collect()
}

/// Dataset-level means of the six scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub s_alpha: f64,
    pub f_beta_w: f64,
    pub mae: f64,
    pub e_phi: f64,
    pub miou: f64,
    pub mdice: f64,
    pub n_frames: usize,
}

pub const CSV_HEADER: &str = "s_alpha,f_beta_w,mae,e_phi,miou,mdice,n_frames";

pub fn aggregate(per_frame: &[FrameScores]) -> Result<MetricsReport> {
    if per_frame.is_empty() {
        return Err(Error::InvalidInput("cannot aggregate zero frames".into()));
    }
    let m = |f: fn(&FrameScores) -> f64| mean(per_frame.iter().map(f));
    Ok(MetricsReport {
        s_alpha: m(|s| s.s_alpha),
        f_beta_w: m(|s| s.f_beta_w),
        mae: m(|s| s.mae),
        e_phi: m(|s| s.e_phi),
        miou: m(|s| s.iou),
        mdice: m(|s| s.dice),
        n_frames: per_frame.len(),
    })
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.s_alpha, self.f_beta_w, self.mae, self.e_phi, self.miou, self.mdice, self.n_frames
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.csv_row())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Fixed-width comparison table, one row per named report.
pub fn render_table(rows: &[(String, MetricsReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
        "Method", "S_alpha", "wF", "MAE", "E_phi", "mIoU", "mDice"
    );
    let _ = writeln!(out, "{}", "-".repeat(name_w + 6 * 9));
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>7.3}  {:>7.3}  {:>7.3}  {:>7.3}  {:>7.3}  {:>7.3}",
            name, r.s_alpha, r.f_beta_w, r.mae, r.e_phi, r.miou, r.mdice
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;
    use rand::Rng;

    fn blob(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[h, w], |i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let (cy, cx) = (h as f64 * 0.45, w as f64 * 0.55);
            if (y - cy).powi(2) / 16.0 + (x - cx).powi(2) / 36.0 < 1.0 {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn perfect_prediction_is_a_fixed_point() {
        let gt = blob(24, 30);
        let s = score_frame(&gt, &gt).unwrap();
        assert!((s.s_alpha - 1.0).abs() < 1e-6, "{s:?}");
        assert!((s.f_beta_w - 1.0).abs() < 1e-6, "{s:?}");
        assert_eq!(s.mae, 0.0);
        assert!((s.e_phi - 1.0).abs() < 1e-6, "{s:?}");
        assert_eq!((s.iou, s.dice), (1.0, 1.0));
    }

    #[test]
    fn inverted_prediction() {
        let gt = blob(24, 30);
        let inv = gt.map(|v| 1.0 - v);
        let s = score_frame(&inv, &gt).unwrap();
        assert!(s.s_alpha <= 0.35, "{s:?}");
        assert!(s.f_beta_w <= 1e-3, "{s:?}");
        assert_eq!(s.mae, 1.0);
        assert!(s.e_phi <= 0.35, "{s:?}");
        assert_eq!((s.iou, s.dice), (0.0, 0.0));
    }

    #[test]
    fn constant_and_degenerate_cases() {
        let gt = blob(16, 16);
        assert_eq!(mae(&Tensor::full(&[16, 16], 0.5), &gt).unwrap(), 0.5);
        let empty = Tensor::zeros(&[8, 8]);
        let full = Tensor::full(&[8, 8], 1.0);
        assert_eq!(s_measure(&empty, &empty, S_ALPHA).unwrap(), 1.0);
        assert_eq!(s_measure(&Tensor::full(&[8, 8], 0.25), &full, S_ALPHA).unwrap(), 0.25);
        assert_eq!(e_measure(&full, &full).unwrap(), 1.0);
        assert_eq!(e_measure(&empty, &empty).unwrap(), 1.0);
        assert_eq!(miou_mdice(&empty, &empty, 0.5).unwrap(), (1.0, 1.0));
        assert_eq!(weighted_fmeasure(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks_have_no_overlap() {
        let a = Tensor::from_fn(&[4, 4], |i| if i < 8 { 1.0 } else { 0.0 });
        let b = a.map(|v| 1.0 - v);
        assert_eq!(miou_mdice(&a, &b, 0.5).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let gt = Tensor::zeros(&[4, 4]);
        assert!(matches!(
            mae(&Tensor::full(&[4, 4], 1.5), &gt),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(mae(&Tensor::zeros(&[4, 5]), &gt), Err(Error::Shape(_))));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn nearest_foreground_matches_exhaustive_search() {
        let mut r = rng(1);
        let (h, w) = (9, 11);
        let g: Vec<f64> = (0..h * w).map(|_| if r.gen_bool(0.2) { 1.0 } else { 0.0 }).collect();
        let (dist, idx) = nearest_foreground(&g, h, w);
        for i in 0..h * w {
            let mut best = (f64::INFINITY, usize::MAX);
            for (j, &gj) in g.iter().enumerate() {
                if gj == 1.0 {
                    let d2 = ((i / w) as f64 - (j / w) as f64).powi(2) + ((i % w) as f64 - (j % w) as f64).powi(2);
                    if d2 < best.0 {
                        best = (d2, j);
                    }
                }
            }
            assert_eq!(idx[i], best.1);
            assert_eq!(dist[i], best.0.sqrt());
        }
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel();
        let s: f64 = k.iter().flatten().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(k[0][1], k[1][0]);
        assert_eq!(k[0][0], k[6][6]);
    }

    #[test]
    fn aggregation() {
        let a = FrameScores {
            s_alpha: 0.5,
            f_beta_w: 0.25,
            mae: 0.1,
            e_phi: 0.75,
            iou: 0.0,
            dice: 0.0,
        };
        let b = FrameScores {
            iou: 1.0,
            dice: 1.0,
            ..a
        };
        let single = aggregate(&[a]).unwrap();
        assert_eq!(single.s_alpha, 0.5);
        assert_eq!(single.n_frames, 1);
        let r = aggregate(&[a, b]).unwrap();
        assert_eq!(r.miou, 0.5);
        assert_eq!(r.to_csv().lines().next().unwrap(), CSV_HEADER);
        assert!(render_table(&[("full".into(), r)]).contains("0.500"));
    }

    #[test]
    fn execution_modes_agree() {
        let mut r = rng(2);
        let pairs: Vec<(Tensor, Tensor)> = (0..6)
            .map(|_| {
                let p = Tensor::from_fn(&[12, 12], |_| r.gen_range(0.0..1.0));
                let g = Tensor::from_fn(&[12, 12], |_| if r.gen_bool(0.3) { 1.0 } else { 0.0 });
                (p, g)
            })
            .collect();
        let s = score_frames(Execution::Sequential, &pairs).unwrap();
        let p = score_frames(Execution::Parallel, &pairs).unwrap();
        assert_eq!(s, p);
    }
}
