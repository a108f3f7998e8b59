//! Clips, segments and the on-disk dataset layout.
//!
//! ```text
//! <root>/manifest.txt              <video_id> <category> <train|test>
//! <root>/<video_id>/frames/%06d.png   8-bit grayscale
//! <root>/<video_id>/masks/%06d.png    8-bit, 0 or 255
//! ```
//!
//! Videos are cut into fixed-length segments; a shorter tail is dropped.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{self, Execution};
use crate::synth::Category;
use crate::tensor::Tensor;

pub const DEFAULT_SEGMENT_LEN: usize = 150;
pub const MANIFEST_FILE: &str = "manifest.txt";
/// Mask pixels at or above this 8-bit value are foreground.
pub const MASK_LEVEL: u8 = 128;

/// Grayscale frame with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width, "frame buffer size");
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (_, h, w) = t.dims3();
        Self::new(h, w, t.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())
    }

    pub fn to_image(&self) -> GrayImage {
        let px = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, px).expect("buffer size")
    }

    pub fn from_image(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self::new(
            h as usize,
            w as usize,
            img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        )
    }
}

/// Binary mask with values 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "mask buffer size");
        assert!(data.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| v * 255).collect(),
        )
        .expect("buffer size")
    }

    pub fn from_image(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self::new(
            h as usize,
            w as usize,
            img.as_raw().iter().map(|&v| u8::from(v >= MASK_LEVEL)).collect(),
        )
    }

    /// Nearest-neighbour resampling.
    pub fn resized(&self, height: usize, width: usize) -> Mask {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let data = (0..height * width)
            .map(|i| {
                let sy = ((i / width) * self.height) / height;
                let sx = ((i % width) * self.width) / width;
                self.data[sy * self.width + sx]
            })
            .collect();
        Mask::new(height, width, data)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub id: String,
    pub category: Option<Category>,
    /// Index of the first frame within the source video.
    pub start: usize,
}

/// Neighbour of frame `t` in a `len`-frame sequence on one side, mirrored
/// at the ends: frame 1 stands in for frame -1 and `len - 2` for `len`.
pub fn mirror_neighbor(len: usize, t: usize, forward: bool) -> usize {
    let last = len.saturating_sub(1);
    match (forward, t) {
        _ if last == 0 => 0,
        (false, 0) => 1,
        (false, _) => t - 1,
        (true, t) if t >= last => last - 1,
        (true, _) => t + 1,
    }
}

/// Fixed-length frame sequence with one mask per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSegment {
    pub frames: Vec<Frame>,
    pub masks: Vec<Mask>,
    pub meta: ClipMeta,
}

impl ClipSegment {
    pub fn new(frames: Vec<Frame>, masks: Vec<Mask>, meta: ClipMeta) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Data(format!("clip {} has no frames", meta.id)));
        }
        if frames.len() != masks.len() {
            return Err(Error::Data(format!(
                "clip {} has {} frames but {} masks",
                meta.id,
                frames.len(),
                masks.len()
            )));
        }
        let (h, w) = (frames[0].height, frames[0].width);
        for (i, (f, m)) in frames.iter().zip(&masks).enumerate() {
            if (f.height, f.width) != (h, w) || (m.height, m.width) != (h, w) {
                return Err(Error::Data(format!(
                    "clip {} frame {} is not {h}x{w}",
                    meta.id,
                    meta.start + i
                )));
            }
        }
        Ok(Self { frames, masks, meta })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.frames[0].height, self.frames[0].width)
    }

    /// Source-video indices of the segment's frames.
    pub fn frame_indices(&self) -> std::ops::Range<usize> {
        self.meta.start..self.meta.start + self.len()
    }

    /// Index of the neighbour of `t` on one side, mirrored at the ends.
    pub fn neighbor(&self, t: usize, forward: bool) -> usize {
        mirror_neighbor(self.len(), t, forward)
    }

    /// `(t - 1, t, t + 1)` with the mirror rule at both ends.
    pub fn triplet_indices(&self, t: usize) -> Result<(usize, usize, usize)> {
        if t >= self.len() {
            return Err(Error::InvalidInput(format!(
                "frame {t} is outside a {}-frame segment",
                self.len()
            )));
        }
        Ok((self.neighbor(t, false), t, self.neighbor(t, true)))
    }

    pub fn triplet(&self, t: usize) -> Result<(&Frame, &Frame, &Frame)> {
        let (a, b, c) = self.triplet_indices(t)?;
        Ok((&self.frames[a], &self.frames[b], &self.frames[c]))
    }

    /// Splits into consecutive `len`-frame segments, dropping the remainder.
    pub fn split(self, len: usize) -> Vec<ClipSegment> {
        let n = self.len() / len.max(1);
        let ClipSegment { frames, masks, meta } = self;
        let mut frames = frames.into_iter();
        let mut masks = masks.into_iter();
        (0..n)
            .map(|k| ClipSegment {
                frames: frames.by_ref().take(len).collect(),
                masks: masks.by_ref().take(len).collect(),
                meta: ClipMeta {
                    id: meta.id.clone(),
                    category: meta.category,
                    start: meta.start + k * len,
                },
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub category: Category,
    pub split: Split,
}

/// Parses manifest text; blank lines and `#` comments are ignored.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Data(format!(
                    "manifest line {}: expected `<id> <category> <split>`",
                    i + 1
                )));
            }
            Ok(ManifestEntry {
                id: parts[0].to_string(),
                category: parts[1].parse()?,
                split: parts[2].parse()?,
            })
        })
        .collect()
}

pub fn render_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("# video_id category split\n");
    for e in entries {
        s.push_str(&format!("{} {} {}\n", e.id, e.category, e.split));
    }
    s
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    read_manifest_file(&root.join(MANIFEST_FILE))
}

pub fn read_manifest_file(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(root: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, render_manifest(entries)).map_err(|e| Error::io(&path, e))
}

fn frame_name(index: usize) -> String {
    format!("{index:06}.png")
}

fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn open_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.into_luma8())
}

/// Writes a clip under `<root>/<id>/`.
pub fn write_clip(root: &Path, clip: &ClipSegment) -> Result<()> {
    let dir = root.join(&clip.meta.id);
    let frames = dir.join("frames");
    let masks = dir.join("masks");
    for d in [&frames, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for ((f, m), idx) in clip.frames.iter().zip(&clip.masks).zip(clip.frame_indices()) {
        save_png(&f.to_image(), &frames.join(frame_name(idx)))?;
        save_png(&m.to_image(), &masks.join(frame_name(idx)))?;
    }
    Ok(())
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Frames of a video directory (its `frames/` subdirectory when present),
/// in file-name order, with each file's numeric stem.
pub fn load_frames(dir: &Path) -> Result<(Vec<Frame>, Vec<usize>)> {
    let frames_dir = dir.join("frames");
    let src = if frames_dir.is_dir() {
        frames_dir
    } else {
        dir.to_path_buf()
    };
    let paths = sorted_pngs(&src)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no frames under {}", src.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    let mut indices = Vec::with_capacity(paths.len());
    for (k, p) in paths.iter().enumerate() {
        let f = Frame::from_image(&open_gray(p)?);
        if let Some(first) = frames.first() {
            let first: &Frame = first;
            if (f.height, f.width) != (first.height, first.width) {
                return Err(Error::Data(format!(
                    "{} differs in size from the first frame",
                    p.display()
                )));
            }
        }
        frames.push(f);
        let stem = p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok());
        indices.push(stem.unwrap_or(k));
    }
    Ok((frames, indices))
}

/// Reads every frame of one video directory as a single clip.
pub fn load_video(dir: &Path, id: &str, category: Option<Category>) -> Result<ClipSegment> {
    let frame_paths = sorted_pngs(&dir.join("frames"))?;
    let mask_dir = dir.join("masks");
    let mut frames = Vec::with_capacity(frame_paths.len());
    let mut masks = Vec::with_capacity(frame_paths.len());
    for fp in &frame_paths {
        let mp = mask_dir.join(fp.file_name().expect("file name"));
        if !mp.is_file() {
            return Err(Error::MissingMask(mp));
        }
        let f = Frame::from_image(&open_gray(fp)?);
        let m = Mask::from_image(&open_gray(&mp)?);
        if (f.height, f.width) != (m.height, m.width) {
            return Err(Error::Data(format!(
                "{} is {}x{} but its mask is {}x{}",
                fp.display(),
                f.height,
                f.width,
                m.height,
                m.width
            )));
        }
        frames.push(f);
        masks.push(m);
    }
    if frames.is_empty() {
        return Err(Error::Data(format!("no frames under {}", dir.display())));
    }
    let meta = ClipMeta {
        id: id.to_string(),
        category,
        start: 0,
    };
    ClipSegment::new(frames, masks, meta)
}

/// A video entry to load.
#[derive(Clone, Debug)]
struct VideoRef {
    id: String,
    category: Option<Category>,
}

fn videos(root: &Path, manifest: Option<&Path>, split: Option<Split>) -> Result<Vec<VideoRef>> {
    let default = root.join(MANIFEST_FILE);
    let manifest = manifest.unwrap_or(&default);
    if manifest.is_file() || manifest != default {
        return Ok(read_manifest_file(manifest)?
            .into_iter()
            .filter(|e| split.is_none_or(|s| s == e.split))
            .map(|e| VideoRef {
                id: e.id,
                category: Some(e.category),
            })
            .collect());
    }
    if split.is_some() {
        return Err(Error::Data(format!(
            "{} has no {MANIFEST_FILE} to select a split from",
            root.display()
        )));
    }
    let rd = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.join("frames").is_dir() {
            ids.push(p.file_name().expect("dir name").to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids.into_iter().map(|id| VideoRef { id, category: None }).collect())
}

/// Loads every video (or those of one split) and cuts them into
/// `segment_len`-frame segments.
pub fn load_dataset_with(
    root: &Path,
    split: Option<Split>,
    segment_len: usize,
    exec: Execution,
) -> Result<Vec<ClipSegment>> {
    load_dataset_from(root, None, split, segment_len, exec)
}

/// As [`load_dataset_with`], reading the video list from `manifest` instead
/// of `<root>/manifest.txt`.
pub fn load_dataset_from(
    root: &Path,
    manifest: Option<&Path>,
    split: Option<Split>,
    segment_len: usize,
    exec: Execution,
) -> Result<Vec<ClipSegment>> {
    if segment_len == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    let refs = videos(root, manifest, split)?;
    let clips: Result<Vec<ClipSegment>> =
        parallel::map_slice(exec, &refs, |v| load_video(&root.join(&v.id), &v.id, v.category))
            .into_iter()
            .collect();
    let segments: Vec<ClipSegment> = clips?.into_iter().flat_map(|c| c.split(segment_len)).collect();
    if segments.is_empty() {
        return Err(Error::Data(format!(
            "no {segment_len}-frame segments under {}",
            root.display()
        )));
    }
    Ok(segments)
}

pub fn load_dataset(root: &Path) -> Result<Vec<ClipSegment>> {
    load_dataset_with(root, None, DEFAULT_SEGMENT_LEN, Execution::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(len: usize, id: &str) -> ClipSegment {
        let frames = (0..len)
            .map(|t| Frame::new(2, 3, (0..6).map(|i| ((t * 6 + i) % 256) as f32 / 255.0).collect()))
            .collect();
        let masks = (0..len)
            .map(|t| Mask::new(2, 3, (0..6).map(|i| ((t + i) % 2) as u8).collect()))
            .collect();
        ClipSegment::new(
            frames,
            masks,
            ClipMeta {
                id: id.into(),
                category: Some(Category::LongClear),
                start: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn triplets_mirror_at_the_ends() {
        let c = clip(5, "a");
        assert_eq!(c.triplet_indices(0).unwrap(), (1, 0, 1));
        assert_eq!(c.triplet_indices(4).unwrap(), (3, 4, 3));
        assert_eq!(c.triplet_indices(2).unwrap(), (1, 2, 3));
        assert!(c.triplet_indices(5).is_err());
        let one = clip(1, "b");
        assert_eq!(one.triplet_indices(0).unwrap(), (0, 0, 0));
    }

    #[test]
    fn split_drops_remainder() {
        assert_eq!(clip(300, "a").split(150).len(), 2);
        let segs = clip(449, "a").split(150);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[1].frame_indices(), 150..300);
        assert_eq!(segs[1].frames[0], clip(449, "a").frames[150]);
    }

    #[test]
    fn manifest_round_trip() {
        let entries = vec![
            ManifestEntry {
                id: "v1".into(),
                category: Category::CloseClear,
                split: Split::Train,
            },
            ManifestEntry {
                id: "v2".into(),
                category: Category::LongComplex,
                split: Split::Test,
            },
        ];
        assert_eq!(parse_manifest(&render_manifest(&entries)).unwrap(), entries);
        assert!(parse_manifest("v1 nowhere train").is_err());
        assert!(parse_manifest("v1 close-clear").is_err());
    }

    #[test]
    fn mask_resize_nearest() {
        let m = Mask::new(2, 2, vec![1, 0, 0, 1]);
        let r = m.resized(4, 4);
        assert_eq!(r.data()[0..4], [1, 1, 0, 0]);
        assert_eq!(r.data()[12..16], [0, 0, 1, 1]);
    }

    #[test]
    fn mismatched_clip_is_rejected() {
        let mut c = clip(3, "a");
        c.masks.pop();
        assert!(ClipSegment::new(c.frames, c.masks, c.meta).is_err());
    }
}
