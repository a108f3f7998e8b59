//! Side-by-side panels: input | ground truth | prediction overlay.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::data::{ClipSegment, Frame, Mask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SEPARATOR: u32 = 4;
const SEPARATOR_RGB: Rgb<u8> = Rgb([64, 64, 64]);
const OVERLAY_RGB: [f64; 3] = [255.0, 40.0, 40.0];
const OVERLAY_ALPHA: f64 = 0.5;
const THRESHOLD: f64 = 0.5;

/// Panel size for `h x w` frames.
pub fn panel_dims(h: usize, w: usize) -> (u32, u32) {
    (3 * w as u32 + 2 * SEPARATOR, h as u32)
}

fn gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn render_panel(frame: &Frame, gt: &Mask, prob: &Tensor) -> Result<RgbImage> {
    let (h, w) = (frame.height(), frame.width());
    if (gt.height(), gt.width()) != (h, w) || prob.shape() != [1, h, w] {
        return Err(Error::InvalidInput(format!(
            "panel inputs differ in size: frame {h}x{w}, mask {}x{}, prediction {:?}",
            gt.height(),
            gt.width(),
            prob.shape()
        )));
    }
    let (pw, ph) = panel_dims(h, w);
    let mut img = RgbImage::from_pixel(pw, ph, SEPARATOR_RGB);
    let stride = w as u32 + SEPARATOR;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = gray(frame.data()[i]);
            let (xu, yu) = (x as u32, y as u32);
            img.put_pixel(xu, yu, Rgb([g; 3]));
            img.put_pixel(stride + xu, yu, Rgb([255 * gt.data()[i]; 3]));
            let px = if prob.data()[i] >= THRESHOLD {
                let mix = |c: f64| ((1.0 - OVERLAY_ALPHA) * g as f64 + OVERLAY_ALPHA * c).round() as u8;
                Rgb(OVERLAY_RGB.map(mix))
            } else {
                Rgb([g; 3])
            };
            img.put_pixel(2 * stride + xu, yu, px);
        }
    }
    Ok(img)
}

/// Writes one `%06d_viz.png` per frame, numbered by source frame index.
pub fn write_panels(seg: &ClipSegment, probs: &[Tensor], dir: &Path) -> Result<Vec<PathBuf>> {
    if probs.len() != seg.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for a {}-frame segment",
            probs.len(),
            seg.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = seg.dims();
    seg.frames
        .iter()
        .zip(&seg.masks)
        .zip(probs)
        .zip(seg.frame_indices())
        .map(|(((f, m), p), idx)| {
            let p = if p.shape() == [1, h, w] {
                p.clone()
            } else {
                crate::tensor::resize_bilinear(p, h, w)
            };
            let path = dir.join(format!("{idx:06}_viz.png"));
            render_panel(f, m, &p)?.save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            Ok(path)
        })
        .collect()
}
