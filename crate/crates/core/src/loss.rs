//! Boundary-weighted hybrid loss with deep supervision.

use serde::Serialize;

use crate::decoder::PredictionSet;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Side of the mean-pooling window used for boundary weights.
pub const POOL_SIZE: usize = 31;
/// Extra weight given to pixels whose neighborhood disagrees with them.
pub const BOUNDARY_GAIN: f64 = 5.0;

/// Loss values of one supervised map.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapLoss {
    pub name: String,
    pub ce_w: f64,
    pub iou_w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_map: Vec<MapLoss>,
}

fn check_binary(gt: &Tensor) -> Result<(usize, usize)> {
    if gt.shape().len() != 2 && !(gt.shape().len() == 3 && gt.shape()[0] == 1) {
        return Err(shape_err!("mask must be [H, W] or [1, H, W], got {:?}", gt.shape()));
    }
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
    }
    let (_, h, w) = gt.dims3();
    Ok((h, w))
}

/// `1 + 5 |meanpool31(gt) - gt|`. The pool averages over the part of the
/// window that lies inside the image, so a uniform mask gets weight 1
/// everywhere, borders included.
pub fn pixel_weights(gt: &Tensor) -> Result<Tensor> {
    let (h, w) = check_binary(gt)?;
    let r = POOL_SIZE / 2;
    let g = gt.data();
    // integral image with a zero first row and column
    let iw = w + 1;
    let mut integral = vec![0.0; (h + 1) * iw];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += g[y * w + x];
            integral[(y + 1) * iw + x + 1] = integral[y * iw + x + 1] + row;
        }
    }
    let out = Tensor::from_fn(gt.shape(), |i| {
        let (y, x) = (i / w, i % w);
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
        let sum = integral[y1 * iw + x1] - integral[y0 * iw + x1] - integral[y1 * iw + x0] + integral[y0 * iw + x0];
        let mean = sum / ((y1 - y0) * (x1 - x0)) as f64;
        1.0 + BOUNDARY_GAIN * (mean - g[i]).abs()
    });
    Ok(out)
}

fn check_triplet(logits: &Tensor, gt: &Tensor, w: &Tensor) -> Result<()> {
    if logits.len() != gt.len() || w.len() != gt.len() || logits.dims3() != gt.dims3() {
        return Err(shape_err!(
            "logits {:?}, mask {:?} and weights {:?} must match",
            logits.shape(),
            gt.shape(),
            w.shape()
        ));
    }
    Ok(())
}

fn eval_scalar(build: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let ps = ParamStore::new();
    let mut g = Graph::inference(&ps);
    let v = build(&mut g);
    g.value(v).item()
}

/// `sum(w * bce(sigmoid(logits), gt)) / sum(w)`.
pub fn weighted_ce(logits: &Tensor, gt: &Tensor, w: &Tensor) -> Result<f64> {
    check_triplet(logits, gt, w)?;
    Ok(eval_scalar(|g| {
        let x = g.constant(logits.clone());
        g.weighted_bce(x, gt, w)
    }))
}

/// `1 - (sum(w p gt) + 1) / (sum(w (p + gt - p gt)) + 1)`.
pub fn weighted_iou(logits: &Tensor, gt: &Tensor, w: &Tensor) -> Result<f64> {
    check_triplet(logits, gt, w)?;
    Ok(eval_scalar(|g| {
        let x = g.constant(logits.clone());
        g.weighted_iou(x, gt, w)
    }))
}

/// Graph handles of the hybrid loss.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub per_map: Vec<(String, Var, Var)>,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            total: g.value(self.total).item(),
            per_map: self
                .per_map
                .iter()
                .map(|(name, ce, iou)| MapLoss {
                    name: name.clone(),
                    ce_w: g.value(*ce).item(),
                    iou_w: g.value(*iou).item(),
                })
                .collect(),
        }
    }
}

/// Upsamples every map to the mask size and sums the weighted CE and IoU
/// terms, all sharing the weights of `gt`.
pub fn hybrid_loss_graph(g: &mut Graph, maps: &[(String, Var)], gt: &Tensor) -> Result<LossVars> {
    if maps.is_empty() {
        return Err(Error::InvalidInput("no maps to supervise".into()));
    }
    let w = pixel_weights(gt)?;
    let (_, h, wd) = gt.dims3();
    let gt3 = gt.clone().reshape(&[1, h, wd]);
    let mut per_map = Vec::with_capacity(maps.len());
    let mut total: Option<Var> = None;
    for (name, v) in maps {
        if g.shape(*v).len() != 3 || g.shape(*v)[0] != 1 {
            return Err(shape_err!("map {name} must be [1, h, w], got {:?}", g.shape(*v)));
        }
        let up = g.resize(*v, h, wd);
        let ce = g.weighted_bce(up, &gt3, &w);
        let iou = g.weighted_iou(up, &gt3, &w);
        let term = g.add(ce, iou);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
        per_map.push((name.clone(), ce, iou));
    }
    Ok(LossVars {
        total: total.expect("non-empty"),
        per_map,
    })
}

/// Tensor-level hybrid loss over the coarse map and every stage.
pub fn hybrid_loss(pred: &PredictionSet, gt: &Tensor) -> Result<LossBreakdown> {
    let ps = ParamStore::new();
    let mut g = Graph::inference(&ps);
    let mut maps = vec![("coarse".to_string(), g.constant(pred.coarse_logits.clone()))];
    for (i, s) in pred.stage_logits.iter().enumerate() {
        maps.push((format!("stage{}", i + 1), g.constant(s.clone())));
    }
    let vars = hybrid_loss_graph(&mut g, &maps, gt)?;
    Ok(vars.breakdown(&g))
}
