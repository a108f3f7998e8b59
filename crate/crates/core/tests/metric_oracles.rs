//! Reference implementations of the saliency scores, written directly from
//! the textbook definitions on 2-D grids, compared against the library on
//! random maps.

#![allow(clippy::needless_range_loop)]

use plumeseg::metrics::{e_measure, miou_mdice, s_measure, weighted_fmeasure, S_ALPHA};
use plumeseg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = f64::EPSILON;

type Grid = Vec<Vec<f64>>;

fn grid(t: &Tensor, h: usize, w: usize) -> Grid {
    (0..h).map(|y| t.data()[y * w..(y + 1) * w].to_vec()).collect()
}

fn random_case(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Tensor, Tensor) {
    let density: f64 = rng.gen_range(0.05..0.95);
    let gt = Tensor::from_fn(&[1, h, w], |_| f64::from(rng.gen_bool(density)));
    let pred = Tensor::from_fn(&[1, h, w], |i| {
        let g = gt.data()[i];
        match rng.gen_range(0..4) {
            0 => g,
            1 => rng.gen::<f64>(),
            2 => (0.7 * g + 0.3 * rng.gen::<f64>()).clamp(0.0, 1.0),
            _ => (rng.gen_range(0..=256) as f64) / 256.0,
        }
    });
    (pred, gt)
}

// ------------------------------------------------------------------ S-measure

fn std_ddof1(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn ref_object(p: &Grid, g: &Grid) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    let mut ones = 0.0;
    let mut total = 0.0;
    for (pr, gr) in p.iter().zip(g) {
        for (&pv, &gv) in pr.iter().zip(gr) {
            total += 1.0;
            if gv > 0.5 {
                fg.push(pv);
                ones += 1.0;
            } else {
                bg.push(1.0 - pv);
            }
        }
    }
    let score = |v: &[f64]| {
        if v.is_empty() {
            return 0.0;
        }
        let x = v.iter().sum::<f64>() / v.len() as f64;
        2.0 * x / (x * x + 1.0 + std_ddof1(v) + EPS)
    };
    let u = ones / total;
    u * score(&fg) + (1.0 - u) * score(&bg)
}

fn ref_ssim(p: &Grid, g: &Grid) -> f64 {
    let xs: Vec<f64> = p.iter().flatten().copied().collect();
    let ys: Vec<f64> = g.iter().flatten().copied().collect();
    let n = xs.len() as f64;
    if xs.is_empty() {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let d = if n > 1.0 { n - 1.0 } else { 1.0 };
    let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / d;
    let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / d;
    let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / d;
    let alpha = 4.0 * mx * my * cxy;
    let beta = (mx * mx + my * my) * (vx + vy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn sub(m: &Grid, r0: usize, r1: usize, c0: usize, c1: usize) -> Grid {
    m[r0..r1].iter().map(|row| row[c0..c1].to_vec()).collect()
}

fn ref_region(p: &Grid, g: &Grid) -> f64 {
    let (h, w) = (g.len(), g[0].len());
    let pts: Vec<(f64, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| g[y][x] > 0.5)
        .map(|(y, x)| (y as f64, x as f64))
        .collect();
    let (cy, cx) = if pts.is_empty() {
        ((h as f64 / 2.0).round_ties_even(), (w as f64 / 2.0).round_ties_even())
    } else {
        let n = pts.len() as f64;
        (
            (pts.iter().map(|p| p.0).sum::<f64>() / n).round_ties_even(),
            (pts.iter().map(|p| p.1).sum::<f64>() / n).round_ties_even(),
        )
    };
    let y = (cy as usize + 1).min(h);
    let x = (cx as usize + 1).min(w);
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = ((w - x) * y) as f64 / area;
    let w3 = (x * (h - y)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    w1 * ref_ssim(&sub(p, 0, y, 0, x), &sub(g, 0, y, 0, x))
        + w2 * ref_ssim(&sub(p, 0, y, x, w), &sub(g, 0, y, x, w))
        + w3 * ref_ssim(&sub(p, y, h, 0, x), &sub(g, y, h, 0, x))
        + w4 * ref_ssim(&sub(p, y, h, x, w), &sub(g, y, h, x, w))
}

fn ref_s_measure(p: &Grid, g: &Grid) -> f64 {
    let n = (g.len() * g[0].len()) as f64;
    let y = g.iter().flatten().sum::<f64>() / n;
    let mp = p.iter().flatten().sum::<f64>() / n;
    if y == 0.0 {
        1.0 - mp
    } else if y == 1.0 {
        mp
    } else {
        (S_ALPHA * ref_object(p, g) + (1.0 - S_ALPHA) * ref_region(p, g)).max(0.0)
    }
}

// -------------------------------------------------------- weighted F-measure

/// Exhaustive nearest-foreground search over every foreground pixel.
fn ref_nearest(g: &Grid) -> Vec<Vec<(f64, (usize, usize))>> {
    let (h, w) = (g.len(), g[0].len());
    let mut out = vec![vec![(0.0, (0, 0)); w]; h];
    for y in 0..h {
        for x in 0..w {
            if g[y][x] > 0.5 {
                out[y][x] = (0.0, (y, x));
                continue;
            }
            let mut best = (f64::INFINITY, (0, 0));
            for yy in 0..h {
                for xx in 0..w {
                    if g[yy][xx] > 0.5 {
                        let d = ((yy as f64 - y as f64).powi(2) + (xx as f64 - x as f64).powi(2)).sqrt();
                        if d < best.0 {
                            best = (d, (yy, xx));
                        }
                    }
                }
            }
            out[y][x] = best;
        }
    }
    out
}

fn ref_weighted_f(p: &Grid, g: &Grid) -> f64 {
    let (h, w) = (g.len(), g[0].len());
    if g.iter().flatten().all(|&v| v == 0.0) {
        return 1.0 - p.iter().flatten().sum::<f64>() / (h * w) as f64;
    }
    let e: Grid = (0..h)
        .map(|y| (0..w).map(|x| (g[y][x] - p[y][x]).abs()).collect())
        .collect();
    let near = ref_nearest(g);
    let et: Grid = (0..h)
        .map(|y| {
            (0..w)
                .map(|x| {
                    let (ny, nx) = near[y][x].1;
                    e[ny][nx]
                })
                .collect()
        })
        .collect();
    let mut k = [[0.0; 7]; 7];
    let mut s = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(dx * dx + dy * dy) / 50.0).exp();
            s += *v;
        }
    }
    let mut ea = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            for (i, row) in k.iter().enumerate() {
                for (j, kv) in row.iter().enumerate() {
                    let yy = (y as isize + i as isize - 3).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + j as isize - 3).clamp(0, w as isize - 1) as usize;
                    ea[y][x] += kv / s * et[yy][xx];
                }
            }
        }
    }
    let (mut ew_fg, mut ew_bg, mut n_fg) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if g[y][x] > 0.5 {
                ew_fg += ea[y][x].min(e[y][x]);
                n_fg += 1.0;
            } else {
                let b = 2.0 - (0.5f64.ln() / 5.0 * near[y][x].0).exp();
                ew_bg += e[y][x] * b;
            }
        }
    }
    let tpw = n_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let pr = tpw / (tpw + ew_bg + EPS);
    2.0 * r * pr / (r + pr + EPS)
}

// ----------------------------------------------------------------- E-measure

fn ref_e_measure(p: &Grid, g: &Grid) -> f64 {
    let cells: Vec<(f64, f64)> = p.iter().flatten().copied().zip(g.iter().flatten().copied()).collect();
    let n = cells.len() as f64;
    let gt_sum = cells.iter().filter(|c| c.1 > 0.5).count() as f64;
    let mut total = 0.0;
    for k in 0..256 {
        let thr = (k + 1) as f64 / 256.0;
        let bin: Vec<f64> = cells.iter().map(|c| f64::from(c.0 >= thr)).collect();
        let score = if gt_sum == 0.0 {
            bin.iter().filter(|&&b| b == 0.0).count() as f64 / n
        } else if gt_sum == n {
            bin.iter().sum::<f64>() / n
        } else {
            let mp = bin.iter().sum::<f64>() / n;
            let mg = gt_sum / n;
            cells
                .iter()
                .zip(&bin)
                .map(|(c, b)| {
                    let (a, d) = (b - mp, c.1 - mg);
                    let xi = 2.0 * a * d / (a * a + d * d + EPS);
                    (1.0 + xi).powi(2) / 4.0
                })
                .sum::<f64>()
                / n
        };
        total += score;
    }
    total / 256.0
}

// --------------------------------------------------------------------- tests

#[test]
fn s_measure_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..300 {
        let (h, w) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
        let (pred, gt) = random_case(&mut rng, h, w);
        let want = ref_s_measure(&grid(&pred, h, w), &grid(&gt, h, w));
        let got = s_measure(&pred, &gt, S_ALPHA).unwrap();
        assert!((got - want).abs() < 1e-12, "case {case} {h}x{w}: {got} vs {want}");
    }
}

#[test]
fn weighted_fmeasure_matches_exhaustive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..300 {
        let (h, w) = (rng.gen_range(1..=10), rng.gen_range(1..=10));
        let (pred, gt) = random_case(&mut rng, h, w);
        let want = ref_weighted_f(&grid(&pred, h, w), &grid(&gt, h, w));
        let got = weighted_fmeasure(&pred, &gt).unwrap();
        assert!((got - want).abs() < 1e-12, "case {case} {h}x{w}: {got} vs {want}");
    }
}

#[test]
fn e_measure_matches_per_threshold_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let (pred, gt) = random_case(&mut rng, h, w);
        let want = ref_e_measure(&grid(&pred, h, w), &grid(&gt, h, w));
        let got = e_measure(&pred, &gt).unwrap();
        assert!((got - want).abs() < 1e-12, "case {case} {h}x{w}: {got} vs {want}");
    }
}

#[test]
fn iou_and_dice_match_pixel_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let (pred, gt) = random_case(&mut rng, 8, 8);
        let p: std::collections::BTreeSet<usize> = (0..64).filter(|&i| pred.data()[i] >= 0.5).collect();
        let g: std::collections::BTreeSet<usize> = (0..64).filter(|&i| gt.data()[i] == 1.0).collect();
        let inter = p.intersection(&g).count() as f64;
        let union = p.union(&g).count() as f64;
        let (iou, dice) = miou_mdice(&pred, &gt, 0.5).unwrap();
        if union == 0.0 {
            assert_eq!((iou, dice), (1.0, 1.0));
        } else {
            assert_eq!(iou, inter / union);
            assert_eq!(dice, 2.0 * inter / (p.len() + g.len()) as f64);
        }
    }
}
