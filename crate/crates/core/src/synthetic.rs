//! Colour-coded synthetic frame stores for smoke tests and desk-scale training.
//!
//! Each class owns a base colour; every video jitters its brightness and adds
//! per-pixel noise, so classes are separable by colour alone.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{ImageEncoder, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};
use crate::ingest::EarCategory;
use crate::rng;
use crate::sampler::frame_path;

/// Source labels used by the synthetic dataset, in category order.
pub const SYNTHETIC_LABELS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

const COLOURS: [[u8; 3]; 6] = [
    [200, 40, 40],
    [40, 200, 40],
    [40, 40, 200],
    [200, 200, 40],
    [200, 40, 200],
    [40, 200, 200],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub videos_per_class: usize,
    pub width: u32,
    pub height: u32,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Amplitude of uniform per-pixel noise.
    pub noise: u8,
    /// Subject tag in the video names; different tags give disjoint id sets.
    pub subject: String,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            videos_per_class: 8,
            width: 48,
            height: 40,
            min_frames: 8,
            max_frames: 24,
            noise: 20,
            subject: "S01".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub video_id: String,
    pub dir: PathBuf,
    pub frames: usize,
    pub category: EarCategory,
}

/// Write frame stores under `root`, one directory per video.
pub fn generate(root: &Path, spec: &SynthSpec) -> Result<Vec<SynthVideo>> {
    if spec.min_frames == 0 || spec.min_frames > spec.max_frames {
        return Err(Error::Config(format!(
            "synthetic frame range {}..={} is empty",
            spec.min_frames, spec.max_frames
        )));
    }
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::Config("synthetic frames need a positive size".into()));
    }
    let mut out = Vec::new();
    for (class, label) in SYNTHETIC_LABELS.iter().enumerate() {
        for v in 0..spec.videos_per_class {
            let video_id = format!("{label}_{}_{v:03}", spec.subject);
            let mut r = rng::substream(spec.seed, "synthetic", &[video_id.as_str().into()]);
            let frames = r.random_range(spec.min_frames..=spec.max_frames);
            let gain: f64 = r.random_range(0.8..1.2);
            let base = COLOURS[class].map(|c| (c as f64 * gain).clamp(0.0, 255.0));
            let dir = root.join(&video_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for f in 0..frames {
                let img = RgbImage::from_fn(spec.width, spec.height, |_, _| {
                    let mut px = [0u8; 3];
                    for (p, b) in px.iter_mut().zip(base) {
                        let n = if spec.noise == 0 {
                            0.0
                        } else {
                            r.random_range(-(spec.noise as f64)..=spec.noise as f64)
                        };
                        *p = (b + n).round().clamp(0.0, 255.0) as u8;
                    }
                    image::Rgb(px)
                });
                write_jpeg(&frame_path(&dir, f), &img)?;
            }
            out.push(SynthVideo {
                video_id,
                dir,
                frames,
                category: EarCategory::from_index(class).expect("six classes"),
            });
        }
    }
    Ok(out)
}

pub fn write_jpeg(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    JpegEncoder::new_with_quality(BufWriter::new(file), 95)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generates_reproducible_stores() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            videos_per_class: 2,
            ..SynthSpec::default()
        };
        let va = generate(a.path(), &spec).unwrap();
        let vb = generate(b.path(), &spec).unwrap();
        assert_eq!(va.len(), 12);
        for (x, y) in va.iter().zip(&vb) {
            assert_eq!(x.frames, y.frames);
            let fa = fs::read(frame_path(&x.dir, 0)).unwrap();
            let fb = fs::read(frame_path(&y.dir, 0)).unwrap();
            assert_eq!(fa, fb);
        }
        assert_eq!(va[0].video_id, "a_S01_000");
        assert_eq!(va[11].category, EarCategory::Leisure);
    }
}
