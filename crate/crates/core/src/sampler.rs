//! Segment-based frame sampling and spatial preprocessing.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ManifestEntry;
use crate::rng::{self, StreamRng};
use crate::tensor::ClipTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// One uniformly random frame inside each segment.
    TrainRandom,
    /// The middle frame of each segment.
    EvalCenter,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSpec {
    pub segments: usize,
    pub mode: SampleMode,
    pub seed: Option<u64>,
}

impl SampleSpec {
    pub fn eval(segments: usize) -> Self {
        Self {
            segments,
            mode: SampleMode::EvalCenter,
            seed: None,
        }
    }

    pub fn train(segments: usize, seed: u64) -> Self {
        Self {
            segments,
            mode: SampleMode::TrainRandom,
            seed: Some(seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    Center,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    pub resize_short_side: u32,
    pub crop_size: u32,
    pub crop_mode: CropMode,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            resize_short_side: 256,
            crop_size: 224,
            crop_mode: CropMode::Center,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::Config("crop.crop_size must be positive".into()));
        }
        if self.crop_size > self.resize_short_side {
            return Err(Error::Config(format!(
                "crop.crop_size {} exceeds crop.resize_short_side {}",
                self.crop_size, self.resize_short_side
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("crop.std entries must be positive".into()));
        }
        Ok(())
    }
}

fn segment_bounds(i: usize, frame_count: usize, segments: usize) -> (usize, usize) {
    (i * frame_count / segments, (i + 1) * frame_count / segments)
}

fn indices_with(
    frame_count: usize,
    segments: usize,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let last = frame_count - 1;
    (0..segments)
        .map(|i| {
            let (start, end) = segment_bounds(i, frame_count, segments);
            let idx = match mode {
                SampleMode::EvalCenter => start + frame_count / (2 * segments),
                SampleMode::TrainRandom if end > start => rng.random_range(start..end),
                SampleMode::TrainRandom => start,
            };
            idx.min(last)
        })
        .collect()
}

/// Pick one frame per segment.
///
/// Segment `i` covers `[floor(i*L/K), floor((i+1)*L/K))`. Videos shorter than
/// the segment count repeat frames rather than failing.
pub fn sample_indices(frame_count: usize, spec: &SampleSpec) -> Result<Vec<usize>> {
    if frame_count < 1 {
        return Err(Error::Input("frame_count must be at least 1".into()));
    }
    if spec.segments < 1 {
        return Err(Error::Config("segments must be at least 1".into()));
    }
    let mut rng = match spec.seed {
        Some(seed) => rng::substream(seed, "segment_indices", &[]),
        None => rng::substream(rand::random(), "segment_indices", &[]),
    };
    Ok(indices_with(frame_count, spec.segments, spec.mode, &mut rng))
}

pub fn frame_path(frame_dir: &Path, index: usize) -> PathBuf {
    frame_dir.join(format!("img_{index:05}.jpg"))
}

fn decode_frame(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

fn resize_short_side(img: RgbImage, short: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let (nw, nh) = if w <= h {
        (short, ((h as u64 * short as u64 + w as u64 / 2) / w as u64).max(1) as u32)
    } else {
        (((w as u64 * short as u64 + h as u64 / 2) / h as u64).max(1) as u32, short)
    };
    if (nw, nh) == (w, h) {
        img
    } else {
        imageops::resize(&img, nw, nh, FilterType::Triangle)
    }
}

#[derive(Debug, Clone, Copy)]
struct CropWindow {
    x0: u32,
    y0: u32,
    flip: bool,
}

fn write_frame(img: &RgbImage, win: CropWindow, crop: &CropSpec, out: &mut [f64]) {
    let size = crop.crop_size as usize;
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let sx = if win.flip { size - 1 - x } else { x };
            let px = img.get_pixel(win.x0 + sx as u32, win.y0 + y as u32);
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                out[c * plane + y * size + x] = (v - crop.mean[c]) / crop.std[c];
            }
        }
    }
}

fn check_frame_store(entry: &ManifestEntry) -> Result<()> {
    let missing = |i: usize| -> Error {
        Error::Ingest {
            video_id: entry.video_id.clone(),
            message: format!(
                "frame {} missing from {}",
                frame_path(&entry.frame_dir, i).display(),
                entry.frame_dir.display()
            ),
        }
    };
    if entry.frame_count == 0 {
        return Err(Error::Ingest {
            video_id: entry.video_id.clone(),
            message: "manifest lists zero frames".into(),
        });
    }
    if !entry.frame_dir.is_dir() {
        return Err(Error::Ingest {
            video_id: entry.video_id.clone(),
            message: format!("frame directory {} does not exist", entry.frame_dir.display()),
        });
    }
    let last = entry.frame_count - 1;
    if !frame_path(&entry.frame_dir, last).is_file() {
        return Err(missing(last));
    }
    Ok(())
}

/// Load one sampled clip `[1, segments, 3, crop, crop]` from a frame store.
///
/// In `EvalCenter` mode the crop is centred. In `TrainRandom` mode the crop
/// window and a horizontal flip are drawn once per clip from a stream keyed by
/// `(seed, video_id)`, so parallel loaders produce identical clips.
pub fn load_clip(entry: &ManifestEntry, spec: &SampleSpec, crop: &CropSpec) -> Result<ClipTensor> {
    crop.validate()?;
    check_frame_store(entry)?;
    let mut rng: StreamRng = match spec.seed {
        Some(seed) => rng::substream(seed, "clip", &[entry.video_id.as_str().into()]),
        None => rng::substream(rand::random(), "clip", &[]),
    };
    if spec.segments < 1 {
        return Err(Error::Config("segments must be at least 1".into()));
    }
    let indices = indices_with(entry.frame_count, spec.segments, spec.mode, &mut rng);
    let size = crop.crop_size as usize;
    let frame_len = 3 * size * size;
    let mut data = vec![0.0; spec.segments * frame_len];
    let mut window: Option<CropWindow> = None;
    for (t, &idx) in indices.iter().enumerate() {
        let path = frame_path(&entry.frame_dir, idx);
        if !path.is_file() {
            return Err(Error::Ingest {
                video_id: entry.video_id.clone(),
                message: format!("frame {} missing", path.display()),
            });
        }
        let img = resize_short_side(decode_frame(&path)?, crop.resize_short_side);
        let (w, h) = img.dimensions();
        let win = *window.get_or_insert_with(|| {
            let (max_x, max_y) = (w - crop.crop_size, h - crop.crop_size);
            match spec.mode {
                SampleMode::EvalCenter => CropWindow {
                    x0: max_x / 2,
                    y0: max_y / 2,
                    flip: false,
                },
                SampleMode::TrainRandom => CropWindow {
                    x0: rng.random_range(0..=max_x),
                    y0: rng.random_range(0..=max_y),
                    flip: rng.random_bool(0.5),
                },
            }
        });
        if win.x0 + crop.crop_size > w || win.y0 + crop.crop_size > h {
            return Err(Error::Ingest {
                video_id: entry.video_id.clone(),
                message: format!("frame {idx} has inconsistent size {w}x{h}"),
            });
        }
        write_frame(&img, win, crop, &mut data[t * frame_len..(t + 1) * frame_len]);
    }
    ClipTensor::from_vec([1, spec.segments, 3, size, size], data)
}
