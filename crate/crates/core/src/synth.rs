//! Procedural plume videos with exact ground truth.
//!
//! A plume is an opacity field inside a cone that opens along the flow
//! direction (wind plus buoyancy). Its interior is fractal value noise
//! advected with the flow and slowly evolving in time. The field is blurred
//! according to camera distance, composited additively onto the background
//! together with moving clouds and birds, and corrupted with Gaussian sensor
//! noise. Masks threshold the blurred opacity before any distractor or noise
//! is added.
//!
//! Value noise hashes lattice coordinates with SplitMix64; distractor
//! placement and sensor noise draw from ChaCha8 seeded with the scene seed.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ClipMeta, ClipSegment, Frame, Mask};
use crate::error::{Error, Result};

/// The five scene categories of the benchmark protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    CloseClear,
    MediumClear,
    CloseComplex,
    LongClear,
    LongComplex,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::CloseClear,
        Category::MediumClear,
        Category::CloseComplex,
        Category::LongClear,
        Category::LongComplex,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::CloseClear => "close-clear",
            Category::MediumClear => "medium-clear",
            Category::CloseComplex => "close-complex",
            Category::LongClear => "long-clear",
            Category::LongComplex => "long-complex",
        }
    }

    /// Category of a scene, if its distance and background match one.
    pub fn classify(distance: Distance, complex: bool) -> Option<Category> {
        match (distance, complex) {
            (Distance::Close, false) => Some(Category::CloseClear),
            (Distance::Medium, false) => Some(Category::MediumClear),
            (Distance::Close, true) => Some(Category::CloseComplex),
            (Distance::Long, false) => Some(Category::LongClear),
            (Distance::Long, true) => Some(Category::LongComplex),
            (Distance::Medium, true) => None,
        }
    }

    /// A randomized scene of this category; `seed` fixes every choice.
    pub fn preset(self, height: usize, width: usize, seed: u64) -> PlumeSceneConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let (distance, complex) = match self {
            Category::CloseClear => (Distance::Close, false),
            Category::MediumClear => (Distance::Medium, false),
            Category::CloseComplex => (Distance::Close, true),
            Category::LongClear => (Distance::Long, false),
            Category::LongComplex => (Distance::Long, true),
        };
        let gain = match distance {
            Distance::Close => 0.35,
            Distance::Medium => 0.3,
            Distance::Long => 0.25,
        };
        PlumeSceneConfig {
            height,
            width,
            background: if complex {
                BackgroundKind::Cloudy
            } else {
                BackgroundKind::Clear
            },
            distance,
            source: [rng.gen_range(0.3..0.7), rng.gen_range(0.65..0.85)],
            emission_rate: rng.gen_range(2.0..4.0),
            wind: [rng.gen_range(-0.8..0.8), rng.gen_range(-0.2..0.2)],
            buoyancy: rng.gen_range(0.6..1.0),
            turbulence_octaves: 4,
            turbulence_scale: 0.12 * height.min(width) as f64,
            plume_gain: gain,
            clouds: if complex { 3 } else { 0 },
            cloud_speed: 0.4,
            birds: if complex { 4 } else { 0 },
            bird_speed: 1.5,
            noise_std: 0.02,
            alpha_min: 0.15,
            seed,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown category `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundKind {
    Clear,
    Cloudy,
    Textured,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    Close,
    Medium,
    Long,
}

impl Distance {
    /// Apparent plume size relative to a close plume.
    pub fn scale(self) -> f64 {
        match self {
            Distance::Close => 1.0,
            Distance::Medium => 0.7,
            Distance::Long => 0.45,
        }
    }

    /// Gaussian blur sigma in pixels applied to the opacity field.
    pub fn blur_sigma(self) -> f64 {
        match self {
            Distance::Close => 0.6,
            Distance::Medium => 1.2,
            Distance::Long => 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlumeSceneConfig {
    pub height: usize,
    pub width: usize,
    pub background: BackgroundKind,
    pub distance: Distance,
    /// Source position as fractions of `(width, height)`.
    pub source: [f64; 2],
    /// Plume density; 0 disables the plume.
    pub emission_rate: f64,
    /// Drift in pixels per frame, `(x, y)`.
    pub wind: [f64; 2],
    /// Upward drift in pixels per frame.
    pub buoyancy: f64,
    pub turbulence_octaves: u32,
    /// Base noise cell size in pixels.
    pub turbulence_scale: f64,
    /// Brightness added at full opacity.
    pub plume_gain: f64,
    pub clouds: usize,
    pub cloud_speed: f64,
    pub birds: usize,
    pub bird_speed: f64,
    pub noise_std: f64,
    /// Mask threshold as a fraction of the clip's peak opacity.
    pub alpha_min: f64,
    pub seed: u64,
}

impl PlumeSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.height < 8 || self.width < 8 {
            return bad(format!("scene {}x{} is too small", self.height, self.width));
        }
        if !self.source.iter().all(|v| (0.0..=1.0).contains(v)) {
            return bad(format!("source {:?} must lie in [0, 1]^2", self.source));
        }
        if !(self.emission_rate.is_finite() && self.emission_rate >= 0.0) {
            return bad("emission rate must be finite and non-negative".into());
        }
        let speed = |v: f64| v.is_finite() && v.abs() <= 20.0;
        if !self.wind.iter().all(|&v| speed(v)) || !speed(self.buoyancy) {
            return bad("wind and buoyancy must be finite and at most 20 px/frame".into());
        }
        if !(1..=8).contains(&self.turbulence_octaves) {
            return bad("turbulence octaves must be in 1..=8".into());
        }
        if !(self.turbulence_scale.is_finite() && self.turbulence_scale > 0.0) {
            return bad("turbulence scale must be positive".into());
        }
        if !(self.plume_gain > 0.0 && self.plume_gain <= 1.0) {
            return bad("plume gain must be in (0, 1]".into());
        }
        if !(speed(self.cloud_speed) && self.cloud_speed >= 0.0) || !(speed(self.bird_speed) && self.bird_speed >= 0.0)
        {
            return bad("distractor speeds must be in [0, 20]".into());
        }
        if !(0.0..=0.5).contains(&self.noise_std) {
            return bad("noise std must be in [0, 0.5]".into());
        }
        if !(self.alpha_min > 0.0 && self.alpha_min < 1.0) {
            return bad("alpha_min must be in (0, 1)".into());
        }
        Ok(())
    }

    /// Reads and validates a scene from TOML.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn is_complex(&self) -> bool {
        self.background != BackgroundKind::Clear || self.clouds > 0 || self.birds > 0
    }
}

// ------------------------------------------------------------- value noise

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let h = splitmix(
        seed ^ splitmix(
            (x as u64).wrapping_mul(0x8da6_b343)
                ^ splitmix((y as u64).wrapping_mul(0xd816_3841) ^ (z as u64).wrapping_mul(0xcb1a_b31f)),
        ),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinear value noise in `[0, 1)`.
fn value_noise(seed: u64, x: f64, y: f64, z: f64) -> f64 {
    let (xf, yf, zf) = (x.floor(), y.floor(), z.floor());
    let (xi, yi, zi) = (xf as i64, yf as i64, zf as i64);
    let (tx, ty, tz) = (smooth(x - xf), smooth(y - yf), smooth(z - zf));
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let mut c = [0.0; 2];
    for (dz, slot) in c.iter_mut().enumerate() {
        let zz = zi + dz as i64;
        let a = lerp(lattice(seed, xi, yi, zz), lattice(seed, xi + 1, yi, zz), tx);
        let b = lerp(lattice(seed, xi, yi + 1, zz), lattice(seed, xi + 1, yi + 1, zz), tx);
        *slot = lerp(a, b, ty);
    }
    lerp(c[0], c[1], tz)
}

/// Fractal sum of `octaves` value-noise layers, normalized to `[0, 1)`.
fn fbm(seed: u64, x: f64, y: f64, z: f64, octaves: u32) -> f64 {
    let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0);
    for o in 0..octaves {
        sum += amp * value_noise(seed.wrapping_add(o as u64 * 0x51_7cc1), x * freq, y * freq, z * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

/// Separable Gaussian blur with zero padding and a 3-sigma support.
fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += t * field[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += t * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

// ----------------------------------------------------------------- scenes

struct Cloud {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    radius: f64,
    brightness: f64,
    seed: u64,
}

struct Bird {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    radius: f64,
}

fn background(cfg: &PlumeSceneConfig) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let base_seed = cfg.seed.wrapping_mul(31).wrapping_add(7);
    let m = h.min(w) as f64;
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let sky = 0.3 + 0.1 * (1.0 - y / h as f64);
            let fine = fbm(base_seed, x / (0.1 * m), y / (0.1 * m), 0.0, 3);
            match cfg.background {
                BackgroundKind::Clear => sky + 0.03 * fine,
                BackgroundKind::Cloudy => {
                    let broad = fbm(base_seed ^ 0xc10d, x / (0.4 * m), y / (0.4 * m), 0.0, 3);
                    sky + 0.03 * fine + 0.15 * broad
                }
                BackgroundKind::Textured => 0.25 + 0.25 * fine,
            }
        })
        .collect()
}

fn plume_density(cfg: &PlumeSceneConfig, t: usize) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut out = vec![0.0; h * w];
    if cfg.emission_rate == 0.0 {
        return out;
    }
    let s = cfg.distance.scale();
    let m = h.min(w) as f64;
    let (vx, vy) = (cfg.wind[0], cfg.wind[1] - cfg.buoyancy);
    let speed = (vx * vx + vy * vy).sqrt();
    let (dx, dy) = if speed > 1e-9 {
        (vx / speed, vy / speed)
    } else {
        (0.0, -1.0)
    };
    let (sx, sy) = (cfg.source[0] * w as f64, cfg.source[1] * h as f64);
    let length = 0.75 * m * s;
    let w0 = 0.04 * m * s;
    let amplitude = 1.0 - (-cfg.emission_rate).exp();
    let tf = t as f64;
    let puff = 0.85 + 0.15 * (std::f64::consts::TAU * tf / 37.0 + cfg.seed as f64 % 6.0).sin();
    let scale = cfg.turbulence_scale * s;
    let noise_seed = cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d);
    for (i, o) in out.iter_mut().enumerate() {
        let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        let (rx, ry) = (x - sx, y - sy);
        let along = rx * dx + ry * dy;
        if along < -3.0 * w0 {
            continue;
        }
        let across = -rx * dy + ry * dx;
        let sigma = w0 + 0.35 * along.max(0.0);
        let env = (-across * across / (2.0 * sigma * sigma)).exp()
            * smooth(((along + 3.0 * w0) / (4.0 * w0)).clamp(0.0, 1.0))
            * (-along.max(0.0) / length).exp();
        if env < 1e-4 {
            continue;
        }
        // texture travels with the flow and slowly changes shape
        let nx = (x - vx * tf) / scale;
        let ny = (y - vy * tf) / scale;
        let turb = fbm(noise_seed, nx, ny, tf * 0.04, cfg.turbulence_octaves);
        *o = (amplitude * puff * env * (0.2 + 0.8 * turb)).clamp(0.0, 1.0);
    }
    gaussian_blur(&out, h, w, cfg.distance.blur_sigma())
}

fn distractors(cfg: &PlumeSceneConfig, rng: &mut ChaCha8Rng) -> (Vec<Cloud>, Vec<Bird>) {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let m = h.min(w);
    let clouds = (0..cfg.clouds)
        .map(|_| {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            Cloud {
                cx: rng.gen_range(0.0..w),
                cy: rng.gen_range(0.0..0.6 * h),
                vx: cfg.cloud_speed * a.cos(),
                vy: 0.3 * cfg.cloud_speed * a.sin(),
                radius: rng.gen_range(0.1..0.25) * m,
                brightness: rng.gen_range(0.12..0.25),
                seed: rng.gen(),
            }
        })
        .collect();
    let birds = (0..cfg.birds)
        .map(|_| {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            Bird {
                x: rng.gen_range(0.0..w),
                y: rng.gen_range(0.0..h),
                vx: cfg.bird_speed * a.cos(),
                vy: cfg.bird_speed * a.sin(),
                radius: rng.gen_range(0.8..1.6),
            }
        })
        .collect();
    (clouds, birds)
}

fn add_distractors(frame: &mut [f64], cfg: &PlumeSceneConfig, t: usize, clouds: &[Cloud], birds: &[Bird]) {
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);
    let tf = t as f64;
    for c in clouds {
        let cx = (c.cx + c.vx * tf).rem_euclid(wf + 2.0 * c.radius) - c.radius;
        let cy = c.cy + c.vy * tf;
        let r = c.radius;
        let (y0, y1) = (
            ((cy - 2.0 * r).floor().max(0.0)) as usize,
            ((cy + 2.0 * r).ceil().min(hf)) as usize,
        );
        let (x0, x1) = (
            ((cx - 2.0 * r).floor().max(0.0)) as usize,
            ((cx + 2.0 * r).ceil().min(wf)) as usize,
        );
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let d2 = ((px - cx).powi(2) + (py - cy).powi(2)) / (r * r);
                let env = (-d2).exp();
                if env < 1e-3 {
                    continue;
                }
                let tex = fbm(
                    c.seed,
                    (px - c.vx * tf) / (0.5 * r),
                    (py - c.vy * tf) / (0.5 * r),
                    0.0,
                    3,
                );
                frame[y * w + x] += c.brightness * env * (0.5 + tex);
            }
        }
    }
    for b in birds {
        let bx = (b.x + b.vx * tf).rem_euclid(wf);
        let by = (b.y + b.vy * tf).rem_euclid(hf);
        let r = b.radius;
        let (y0, y1) = (
            ((by - 3.0 * r).floor().max(0.0)) as usize,
            ((by + 3.0 * r).ceil().min(hf)) as usize,
        );
        let (x0, x1) = (
            ((bx - 3.0 * r).floor().max(0.0)) as usize,
            ((bx + 3.0 * r).ceil().min(wf)) as usize,
        );
        for y in y0..y1 {
            for x in x0..x1 {
                let d2 = ((x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2)) / (r * r);
                frame[y * w + x] -= 0.25 * (-d2).exp();
            }
        }
    }
}

/// A rendered clip together with the opacity fields behind its masks.
pub struct RenderedClip {
    pub clip: ClipSegment,
    /// Per-frame blurred plume opacity.
    pub alpha: Vec<Vec<f64>>,
    /// Absolute mask threshold used for the clip.
    pub threshold: f64,
}

/// Renders `length` frames of a scene.
pub fn render_clip(cfg: &PlumeSceneConfig, length: usize) -> Result<RenderedClip> {
    cfg.validate()?;
    if length == 0 {
        return Err(Error::Config("clip length must be positive".into()));
    }
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (clouds, birds) = distractors(cfg, &mut rng);
    let bg = background(cfg);
    let alpha: Vec<Vec<f64>> = (0..length).map(|t| plume_density(cfg, t)).collect();
    let peak = alpha.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    // an empty plume must give empty masks
    let threshold = if peak > 0.0 {
        cfg.alpha_min * peak
    } else {
        f64::INFINITY
    };
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut frames = Vec::with_capacity(length);
    let mut masks = Vec::with_capacity(length);
    for (t, a) in alpha.iter().enumerate() {
        let mut f: Vec<f64> = bg.iter().zip(a).map(|(b, a)| b + cfg.plume_gain * a).collect();
        add_distractors(&mut f, cfg, t, &clouds, &birds);
        if cfg.noise_std > 0.0 {
            for v in f.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        frames.push(Frame::new(h, w, f.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect()));
        masks.push(Mask::new(h, w, a.iter().map(|&v| u8::from(v > threshold)).collect()));
    }
    let meta = ClipMeta {
        id: format!("synth-{:016x}", cfg.seed),
        category: Category::classify(cfg.distance, cfg.is_complex()),
        start: 0,
    };
    Ok(RenderedClip {
        clip: ClipSegment::new(frames, masks, meta)?,
        alpha,
        threshold,
    })
}

/// Renders a clip and keeps only frames and masks.
pub fn generate_clip(cfg: &PlumeSceneConfig, length: usize) -> Result<ClipSegment> {
    render_clip(cfg, length).map(|r| r.clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> PlumeSceneConfig {
        Category::CloseClear.preset(48, 64, 3)
    }

    #[test]
    fn deterministic_per_seed() {
        let mut cfg = Category::LongComplex.preset(32, 32, 11);
        cfg.noise_std = 0.05;
        let a = generate_clip(&cfg, 6).unwrap();
        let b = generate_clip(&cfg, 6).unwrap();
        assert_eq!(a, b);
        cfg.seed += 1;
        assert_ne!(a.frames, generate_clip(&cfg, 6).unwrap().frames);
    }

    #[test]
    fn zero_emission_gives_empty_masks() {
        let mut cfg = scene();
        cfg.emission_rate = 0.0;
        cfg.noise_std = 0.0;
        let r = render_clip(&cfg, 5).unwrap();
        assert!(r.clip.masks.iter().all(|m| m.data().iter().all(|&v| v == 0)));
        let bg = background(&cfg);
        for f in &r.clip.frames {
            for (a, b) in f.data().iter().zip(&bg) {
                assert_eq!(*a, b.clamp(0.0, 1.0) as f32);
            }
        }
    }

    #[test]
    fn frame_changes_follow_the_plume() {
        let mut cfg = scene();
        cfg.noise_std = 0.0;
        let r = render_clip(&cfg, 4).unwrap();
        for t in 1..4 {
            let (f0, f1) = (&r.clip.frames[t - 1], &r.clip.frames[t]);
            for i in 0..f0.data().len() {
                if f0.data()[i] != f1.data()[i] {
                    assert_ne!(r.alpha[t - 1][i], r.alpha[t][i]);
                }
            }
        }
    }

    #[test]
    fn masks_mark_opaque_pixels_only() {
        let r = render_clip(&Category::CloseComplex.preset(48, 48, 5), 8).unwrap();
        let mut any = false;
        for (m, a) in r.clip.masks.iter().zip(&r.alpha) {
            for (&mv, &av) in m.data().iter().zip(a) {
                if mv == 1 {
                    any = true;
                    assert!(av > r.threshold);
                }
            }
        }
        assert!(any);
    }

    #[test]
    fn presets_cover_every_category() {
        for c in Category::ALL {
            let cfg = c.preset(32, 32, 1);
            cfg.validate().unwrap();
            assert_eq!(Category::classify(cfg.distance, cfg.is_complex()), Some(c));
            assert_eq!(c.as_str().parse::<Category>().unwrap(), c);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = scene();
        cfg.noise_std = -1.0;
        assert!(matches!(generate_clip(&cfg, 3), Err(Error::Config(_))));
        let mut cfg = scene();
        cfg.turbulence_octaves = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn blur_preserves_mass_away_from_borders() {
        let mut f = vec![0.0; 15 * 15];
        f[7 * 15 + 7] = 1.0;
        let b = gaussian_blur(&f, 15, 15, 1.2);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
