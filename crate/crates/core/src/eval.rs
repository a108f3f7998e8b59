//! Dataset evaluation, prediction export and the module ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::config::{RunConfig, Switches};
use crate::data::ClipSegment;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, render_table, score_frames, FrameScores, MetricsReport, CSV_HEADER};
use crate::model::{infer_sequence, Model};
use crate::parallel::{self, Execution};
use crate::params::ParamStore;
use crate::tensor::{self, Tensor};
use crate::train::{train, EpochReport};

/// Scores of one evaluated segment.
#[derive(Clone, Debug)]
pub struct SegmentScores {
    pub id: String,
    pub category: Option<String>,
    pub start: usize,
    pub frames: Vec<FrameScores>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub segments: Vec<SegmentScores>,
}

/// Brings a prediction to the `[1, h, w]` ground-truth grid, clamped to
/// `[0, 1]`.
fn to_grid(pred: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, ph, pw) = pred.dims3();
    if c != 1 {
        return Err(Error::InvalidInput(format!("prediction has {c} channels")));
    }
    let p = if (ph, pw) == (h, w) {
        pred.clone()
    } else {
        tensor::resize_bilinear(pred, h, w)
    };
    Ok(p.map(|v| v.clamp(0.0, 1.0)))
}

/// Scores `predict`'s probability maps against every frame of every
/// segment. Segments are processed concurrently; scores keep input order.
pub fn evaluate_with<F>(segments: &[ClipSegment], exec: Execution, predict: F) -> Result<Evaluation>
where
    F: Fn(&ClipSegment) -> Result<Vec<Tensor>> + Sync + Send,
{
    if segments.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let scored: Vec<Result<SegmentScores>> = parallel::map_slice(exec, segments, |seg| {
        let preds = predict(seg)?;
        if preds.len() != seg.len() {
            return Err(Error::InvalidInput(format!(
                "{} predictions for a {}-frame segment",
                preds.len(),
                seg.len()
            )));
        }
        let (h, w) = seg.dims();
        let pairs = preds
            .iter()
            .zip(&seg.masks)
            .map(|(p, m)| Ok((to_grid(p, h, w)?, m.to_tensor())))
            .collect::<Result<Vec<_>>>()?;
        Ok(SegmentScores {
            id: seg.meta.id.clone(),
            category: seg.meta.category.map(|c| c.to_string()),
            start: seg.meta.start,
            frames: score_frames(Execution::Sequential, &pairs)?,
        })
    });
    let segments = scored.into_iter().collect::<Result<Vec<_>>>()?;
    let all: Vec<FrameScores> = segments.iter().flat_map(|s| s.frames.iter().copied()).collect();
    Ok(Evaluation {
        report: aggregate(&all)?,
        segments,
    })
}

/// Two-pass model probabilities for a segment.
pub fn predict_segment(model: &Model, ps: &ParamStore, seg: &ClipSegment, size: (usize, usize)) -> Result<Vec<Tensor>> {
    infer_sequence(model, ps, &seg.frames, size, Execution::Sequential)
}

pub fn evaluate_model(
    model: &Model,
    ps: &ParamStore,
    size: (usize, usize),
    segments: &[ClipSegment],
    exec: Execution,
) -> Result<Evaluation> {
    evaluate_with(segments, exec, |seg| predict_segment(model, ps, seg, size))
}

impl Evaluation {
    /// Overall row followed by one row per category present.
    pub fn table(&self, name: &str) -> String {
        let mut rows = vec![(name.to_string(), self.report)];
        let mut cats: Vec<&str> = self.segments.iter().filter_map(|s| s.category.as_deref()).collect();
        cats.sort_unstable();
        cats.dedup();
        for cat in cats {
            let frames: Vec<FrameScores> = self
                .segments
                .iter()
                .filter(|s| s.category.as_deref() == Some(cat))
                .flat_map(|s| s.frames.iter().copied())
                .collect();
            if let Ok(r) = aggregate(&frames) {
                rows.push((format!("  {cat}"), r));
            }
        }
        render_table(&rows)
    }

    pub fn per_frame_csv(&self) -> String {
        let mut out = String::from("video,frame,s_alpha,f_beta_w,mae,e_phi,iou,dice\n");
        for s in &self.segments {
            for (i, f) in s.frames.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    s.id,
                    s.start + i,
                    f.s_alpha,
                    f.f_beta_w,
                    f.mae,
                    f.e_phi,
                    f.iou,
                    f.dice
                );
            }
        }
        out
    }

    /// Writes `metrics.csv`, `frames.csv` and `table.txt` into `dir`.
    pub fn write(&self, dir: &Path, name: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("metrics.csv", self.report.to_csv()),
            ("frames.csv", self.per_frame_csv()),
            ("table.txt", self.table(name)),
        ];
        files
            .into_iter()
            .map(|(f, text)| {
                let p = dir.join(f);
                fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
                Ok(p)
            })
            .collect()
    }
}

/// Saves probability maps as 8-bit grayscale `%06d.png` files named by
/// `indices`.
pub fn write_probability_maps(probs: &[Tensor], indices: &[usize], dir: &Path) -> Result<Vec<PathBuf>> {
    if probs.len() != indices.len() {
        return Err(Error::InvalidInput(format!(
            "{} maps but {} names",
            probs.len(),
            indices.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (_, h, w) = p.dims3();
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                let v = p.data()[y as usize * w + x as usize].clamp(0.0, 1.0);
                Luma([(v * 255.0).round() as u8])
            });
            let path = dir.join(format!("{:06}.png", indices[i]));
            img.save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            Ok(path)
        })
        .collect()
}

/// One row of the ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub switches: Switches,
    pub final_loss: f64,
    pub report: MetricsReport,
}

/// Trains and evaluates the four switch configurations on the same split
/// and seed. Checkpoints go to `<checkpoint_dir>/<name>/`.
pub fn ablate(
    base: &RunConfig,
    train_set: &[ClipSegment],
    test_set: &[ClipSegment],
    exec: Execution,
    mut observe: impl FnMut(&str, &EpochReport),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(Switches::ABLATION.len());
    for (name, switches) in Switches::ABLATION {
        let mut cfg = base.clone();
        cfg.switches = switches;
        cfg.checkpoint_dir = base.checkpoint_dir.join(name);
        let trainer = train(cfg, train_set, None, exec, |r| observe(name, r))?;
        let eval = evaluate_model(
            trainer.model(),
            trainer.params(),
            trainer.config().input_dims(),
            test_set,
            exec,
        )?;
        rows.push(AblationRow {
            name: name.to_string(),
            switches,
            final_loss: trainer.history().last().map_or(f64::NAN, |s| s.mean_loss),
            report: eval.report,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    render_table(&rows.iter().map(|r| (r.name.clone(), r.report)).collect::<Vec<_>>())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("config,ctc,fsp,final_loss,{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{}",
            r.name,
            r.switches.ctc,
            r.switches.fsp,
            r.final_loss,
            r.report.csv_row()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClipMeta, Frame, Mask};

    fn segment(len: usize) -> ClipSegment {
        let frames = (0..len).map(|_| Frame::new(8, 8, vec![0.5; 64])).collect();
        let masks = (0..len)
            .map(|t| Mask::new(8, 8, (0..64).map(|i| u8::from((i + t) % 5 < 2)).collect()))
            .collect();
        ClipSegment::new(
            frames,
            masks,
            ClipMeta {
                id: "v".into(),
                category: Some(crate::synth::Category::CloseClear),
                start: 10,
            },
        )
        .unwrap()
    }

    #[test]
    fn ground_truth_predictor_is_perfect() {
        let segs = [segment(3), segment(2)];
        let e = evaluate_with(&segs, Execution::Parallel, |s| {
            Ok(s.masks.iter().map(|m| m.to_tensor()).collect())
        })
        .unwrap();
        let r = e.report;
        assert_eq!(r.n_frames, 5);
        for v in [r.s_alpha, r.f_beta_w, r.e_phi, r.miou, r.mdice] {
            assert!((v - 1.0).abs() < 1e-6, "{r:?}");
        }
        assert!(r.mae.abs() < 1e-12);
    }

    #[test]
    fn constant_half_has_mae_half() {
        let segs = [segment(4)];
        let e = evaluate_with(&segs, Execution::Sequential, |s| {
            Ok(vec![Tensor::full(&[1, 8, 8], 0.5); s.len()])
        })
        .unwrap();
        assert!((e.report.mae - 0.5).abs() < 1e-12);
    }

    #[test]
    fn predictions_are_resampled_to_mask_size() {
        let segs = [segment(1)];
        let e = evaluate_with(&segs, Execution::Sequential, |_| Ok(vec![Tensor::zeros(&[1, 4, 4])])).unwrap();
        assert_eq!(e.report.n_frames, 1);
        let bad = evaluate_with(&segs, Execution::Sequential, |_| Ok(vec![]));
        assert!(bad.is_err());
    }

    #[test]
    fn reports_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let segs = [segment(2)];
        let e = evaluate_with(&segs, Execution::Sequential, |s| {
            Ok(s.masks.iter().map(|m| m.to_tensor()).collect())
        })
        .unwrap();
        e.write(dir.path(), "oracle").unwrap();
        let frames = fs::read_to_string(dir.path().join("frames.csv")).unwrap();
        assert_eq!(frames.lines().count(), 3);
        assert!(frames.lines().nth(1).unwrap().starts_with("v,10,"));
        let table = fs::read_to_string(dir.path().join("table.txt")).unwrap();
        assert!(table.contains("oracle") && table.contains("close-clear"));
        let probs = write_probability_maps(&[Tensor::full(&[1, 2, 3], 1.0)], &[7], dir.path()).unwrap();
        assert!(probs[0].ends_with("000007.png"));
    }
}
