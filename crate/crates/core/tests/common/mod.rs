#![allow(dead_code)]

use std::path::Path;

use ear_tsm::ingest::{self, LabelMapping, ManifestEntry, SourceDataset};
use ear_tsm::net::{build_model, BackboneSpec, HeadSpec, Model};
use ear_tsm::rng;
use ear_tsm::shift::ShiftConfig;
use ear_tsm::synthetic::{self, SynthSpec};
use ear_tsm::tensor::{ClipTensor, Tensor};
use rand_distr::{Distribution, Normal};

/// Temporal shift written as a per-element gather, independent of the library kernel.
pub fn brute_force_shift(x: &[f64], dims: [usize; 5], shift_div: usize) -> Vec<f64> {
    let [n, t, c, h, w] = dims;
    let fold = c / shift_div;
    let idx = |ni: usize, ti: usize, ci: usize, hi: usize, wi: usize| {
        (((ni * t + ti) * c + ci) * h + hi) * w + wi
    };
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let src_t = if ci < fold {
                            (ti + 1 < t).then_some(ti + 1)
                        } else if ci < 2 * fold {
                            ti.checked_sub(1)
                        } else {
                            Some(ti)
                        };
                        out[idx(ni, ti, ci, hi, wi)] =
                            src_t.map_or(0.0, |s| x[idx(ni, s, ci, hi, wi)]);
                    }
                }
            }
        }
    }
    out
}

pub fn random_values(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::substream(seed, "test-values", &[]);
    let d = Normal::new(0.0, 1.0).unwrap();
    (0..len).map(|_| d.sample(&mut r)).collect()
}

pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, random_values(len, seed)).unwrap()
}

pub fn random_clip(dims: [usize; 5], seed: u64) -> ClipTensor {
    ClipTensor::from_vec(dims, random_values(dims.iter().product(), seed)).unwrap()
}

pub fn tiny_shift(segments: usize) -> ShiftConfig {
    ShiftConfig::new(8, segments).with_stages(vec![1, 2])
}

pub fn tiny_model(shift: &ShiftConfig, dropout: f64, seed: u64) -> Model {
    let head = HeadSpec {
        dropout_rate: dropout,
        ..HeadSpec::default()
    };
    build_model(&BackboneSpec::tiny_residual(), &head, shift, seed).unwrap()
}

/// Generate a synthetic colour dataset under `root` and scan it into a manifest.
pub fn synthetic_manifest(root: &Path, spec: &SynthSpec) -> Vec<ManifestEntry> {
    synthetic::generate(root, spec).unwrap();
    let mapping = LabelMapping::parse(ingest::DEFAULT_MAPPING).unwrap();
    ingest::build_manifest(&[(root.to_path_buf(), SourceDataset::Synthetic)], &mapping, &[])
        .unwrap()
        .entries
}

pub fn small_synth(videos_per_class: usize, subject: &str, seed: u64) -> SynthSpec {
    SynthSpec {
        videos_per_class,
        width: 20,
        height: 18,
        min_frames: 8,
        max_frames: 12,
        subject: subject.into(),
        seed,
        ..SynthSpec::default()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-8);
        (self.analytic - self.numeric).abs() / scale
    }
}

pub struct GradCheck {
    pub samples: Vec<GradSample>,
    /// Draws rejected because the stencil crossed a ReLU kink.
    pub kinked: usize,
}

fn batch_loss(model: &Model, clip: &ClipTensor, targets: &[usize]) -> (f64, Vec<bool>) {
    use ear_tsm::net::{cross_entropy, Mode};
    let mode = Mode::Train { dropout_seed: 0 };
    let logits = model.forward_clip(clip, mode).unwrap();
    let pattern = model.relu_pattern(clip, mode).unwrap();
    (cross_entropy(&logits, targets).unwrap().0, pattern)
}

/// Central finite differences against the analytic gradient at `wanted`
/// uniformly drawn parameter entries, spread round-robin over every trainable
/// tensor. Batch statistics are used throughout, so dropout must be off.
///
/// A draw is rejected, before its gradients are compared, when either stencil
/// endpoint changes the ReLU sign pattern: the loss is not differentiable
/// across a kink and the difference quotient is meaningless there.
pub fn gradient_check(model: &mut Model, clip: &ClipTensor, targets: &[usize], step: f64, wanted: usize) -> GradCheck {
    use ear_tsm::net::cross_entropy;
    use ear_tsm::nn::Visit;
    use rand::Rng;

    model.zero_grad();
    let pass = model.forward_train(clip, 0).unwrap();
    let (_, dlogits) = cross_entropy(&pass.logits, targets).unwrap();
    model.backward(pass, &dlogits).unwrap();

    let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit("", &mut |name, p| {
        if p.trainable() {
            tensors.push((name.to_string(), p.grad().to_vec()));
        }
    });
    let set = |model: &mut Model, name: &str, i: usize, delta: f64| {
        model.visit_mut("", &mut |n, p| {
            if n == name {
                p.value[i] += delta;
            }
        });
    };
    let (_, centre) = batch_loss(model, clip, targets);
    let mut r = rng::substream(17, "grad-check", &[]);
    let mut samples = Vec::new();
    let mut kinked = 0;
    let mut draw = 0usize;
    while samples.len() < wanted && draw < 50 * wanted {
        let (name, grad) = &tensors[draw % tensors.len()];
        draw += 1;
        let index = r.random_range(0..grad.len());
        set(model, name, index, step);
        let (up, p_up) = batch_loss(model, clip, targets);
        set(model, name, index, -2.0 * step);
        let (down, p_down) = batch_loss(model, clip, targets);
        set(model, name, index, step);
        if p_up != centre || p_down != centre {
            kinked += 1;
            continue;
        }
        samples.push(GradSample {
            name: name.clone(),
            index,
            analytic: grad[index],
            numeric: (up - down) / (2.0 * step),
        });
    }
    GradCheck { samples, kinked }
}

/// Largest eval-mode logit change over a fixed set of segment permutations
/// (reversal, rotation and three seeded shuffles) for a fresh tiny model.
pub fn permutation_effect(shift: &ShiftConfig, seed: u64) -> f64 {
    use ear_tsm::net::Mode;
    use rand::seq::SliceRandom;

    let t = shift.segments;
    let model = tiny_model(shift, 0.0, seed);
    let clip = random_clip([2, t, 3, 8, 8], seed.wrapping_mul(31).wrapping_add(7));
    let base = model.forward_clip(&clip, Mode::Eval).unwrap();
    let mut perms: Vec<Vec<usize>> = vec![(0..t).rev().collect(), (0..t).map(|i| (i + 1) % t).collect()];
    let mut r = rng::substream(seed, "permutations", &[]);
    for _ in 0..3 {
        let mut p: Vec<usize> = (0..t).collect();
        p.shuffle(&mut r);
        perms.push(p);
    }
    perms
        .iter()
        .map(|p| {
            let out = model.forward_clip(&clip.permute_segments(p).unwrap(), Mode::Eval).unwrap();
            out.0.max_abs_diff(&base.0)
        })
        .fold(0.0, f64::max)
}

/// Independent statement of centre sampling: the middle of segment `i`.
pub fn centre_oracle(l: usize, k: usize) -> Vec<usize> {
    (0..k)
        .map(|i| {
            let start = i * l / k;
            (start + l / (2 * k)).min(l - 1)
        })
        .collect()
}
