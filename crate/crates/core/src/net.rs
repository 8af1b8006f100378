//! The recognition network: a grouped-convolution residual backbone with
//! temporal shifts inside its residual blocks, a dropout + linear head, and
//! average consensus over segments.
//!
//! Segments are folded into the batch axis (`[N, T, C, H, W] -> [N*T, C, H, W]`)
//! for every 2-D operation; only the temporal shift reads across time.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::ingest::EarCategory;
use crate::nn::{self, BatchNorm2d, BnCache, Conv2d, Linear, Param, PoolCache, Visit};
use crate::rng;
use crate::shift::{shift_folded, shift_folded_adjoint, Placement, ShiftConfig};
use crate::tensor::{ClipTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "resnext50_32x4d")]
    Resnext50_32x4d,
    #[serde(rename = "tiny_residual")]
    TinyResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub cardinality: usize,
    pub width_per_group: usize,
    pub pretrained_init: bool,
    /// Parameter archive used when `pretrained_init` is set; empty when unused.
    pub pretrained_path: String,
}

impl BackboneSpec {
    pub fn resnext50_32x4d() -> Self {
        Self {
            kind: BackboneKind::Resnext50_32x4d,
            cardinality: 32,
            width_per_group: 4,
            pretrained_init: false,
            pretrained_path: String::new(),
        }
    }

    pub fn tiny_residual() -> Self {
        Self {
            kind: BackboneKind::TinyResidual,
            cardinality: 4,
            width_per_group: 4,
            pretrained_init: false,
            pretrained_path: String::new(),
        }
    }

    pub fn num_stages(&self) -> usize {
        match self.kind {
            BackboneKind::Resnext50_32x4d => 4,
            BackboneKind::TinyResidual => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cardinality == 0 || self.width_per_group == 0 {
            return Err(Error::Config(
                "backbone.cardinality and backbone.width_per_group must be positive".into(),
            ));
        }
        if self.kind == BackboneKind::TinyResidual
            && self.cardinality * self.width_per_group > TINY_MAX_CHANNELS
        {
            return Err(Error::Config(format!(
                "tiny_residual is limited to {TINY_MAX_CHANNELS} channels, \
                 cardinality x width_per_group = {}",
                self.cardinality * self.width_per_group
            )));
        }
        if self.pretrained_init && self.pretrained_path.is_empty() {
            return Err(Error::Config(
                "backbone.pretrained_init is set but backbone.pretrained_path is empty; \
                 no pretrained weights are bundled"
                    .into(),
            ));
        }
        Ok(())
    }
}

const TINY_MAX_CHANNELS: usize = 64;
const TINY_STEM: usize = 16;
const TINY_OUT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consensus {
    Average,
}

/// Which per-segment scores the consensus averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusInput {
    Logits,
    /// Averages softmax probabilities and reports their logarithm.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub consensus: Consensus,
    pub consensus_input: ConsensusInput,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            num_classes: EarCategory::ALL.len(),
            dropout_rate: 0.5,
            consensus: Consensus::Average,
            consensus_input: ConsensusInput::Logits,
        }
    }
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != EarCategory::ALL.len() {
            return Err(Error::Config(format!(
                "head.num_classes must be {} for the EAR categories, got {}",
                EarCategory::ALL.len(),
                self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "head.dropout_rate must lie in [0, 1], got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation layers and dropout drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
    Eval,
}

/// Video-level class scores `[batch, num_classes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Tensor);

impl Logits {
    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let k = self.num_classes();
        &self.0.data()[n * k..(n + 1) * k]
    }

    /// Index of the largest score per row; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.batch())
            .map(|n| {
                let row = self.row(n);
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Logits, targets: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = (logits.batch(), logits.num_classes());
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} targets for a batch of {}",
            targets.len(),
            n
        )));
    }
    let mut grad = Tensor::zeros(vec![n, k]);
    let mut loss = 0.0;
    for (b, &y) in targets.iter().enumerate() {
        if y >= k {
            return Err(Error::Input(format!("target class {y} out of range")));
        }
        let row = logits.row(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        let g = &mut grad.data_mut()[b * k..(b + 1) * k];
        for (i, v) in row.iter().enumerate() {
            g[i] = (v - lse).exp() / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

#[derive(Debug, Clone, Copy)]
struct BlockShift {
    fold: usize,
    segments: usize,
    placement: Placement,
}

/// Grouped-convolution bottleneck: 1x1 reduce, 3x3 grouped, 1x1 expand.
#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    shift: Option<BlockShift>,
}

struct BlockCache {
    branch_in: Tensor,
    identity_in: Option<Tensor>,
    bn1: BnCache,
    r1: Tensor,
    bn2: BnCache,
    r2: Tensor,
    bn3: BnCache,
    bn_down: Option<BnCache>,
    out: Tensor,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    fn new(
        in_ch: usize,
        width: usize,
        out_ch: usize,
        stride: usize,
        groups: usize,
        shift: Option<BlockShift>,
        seed: u64,
        name: &str,
    ) -> Self {
        let p = |s: &str| nn::join(name, s);
        let downsample = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(in_ch, out_ch, 1, stride, 0, 1, false, seed, &p("downsample.0")),
                BatchNorm2d::new(out_ch),
            )
        });
        Self {
            conv1: Conv2d::new(in_ch, width, 1, 1, 0, 1, false, seed, &p("conv1")),
            bn1: BatchNorm2d::new(width),
            conv2: Conv2d::new(width, width, 3, stride, 1, groups, false, seed, &p("conv2")),
            bn2: BatchNorm2d::new(width),
            conv3: Conv2d::new(width, out_ch, 1, 1, 0, 1, false, seed, &p("conv3")),
            bn3: BatchNorm2d::new(out_ch),
            downsample,
            shift,
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<(Tensor, BlockCache)> {
        let shifted = match self.shift {
            Some(s) if s.fold > 0 => Some(shift_folded(x, s.segments, s.fold)?),
            _ => None,
        };
        let placement = self.shift.map_or(Placement::ResidualBranch, |s| s.placement);
        let (branch_in, identity_src) = match (&shifted, placement) {
            (Some(sh), Placement::ResidualBranch) => (sh.clone(), x),
            (Some(sh), Placement::InPlace) => (sh.clone(), sh),
            (None, _) => (x.clone(), x),
        };
        let (b1, bn1) = self.bn1.forward(&self.conv1.forward(&branch_in), train);
        let r1 = nn::relu(b1);
        let (b2, bn2) = self.bn2.forward(&self.conv2.forward(&r1), train);
        let r2 = nn::relu(b2);
        let (mut out, bn3) = self.bn3.forward(&self.conv3.forward(&r2), train);
        let bn_down = match &self.downsample {
            Some((conv, bn)) => {
                let (d, cache) = bn.forward(&conv.forward(identity_src), train);
                out.add_assign(&d);
                Some(cache)
            }
            None => {
                out.add_assign(identity_src);
                None
            }
        };
        let out = nn::relu(out);
        let identity_in = self.downsample.as_ref().map(|_| identity_src.clone());
        Ok((
            out.clone(),
            BlockCache {
                branch_in,
                identity_in,
                bn1,
                r1,
                bn2,
                r2,
                bn3,
                bn_down,
                out,
            },
        ))
    }

    fn update_running_stats(&mut self, c: &BlockCache) {
        self.bn1.update_running_stats(&c.bn1);
        self.bn2.update_running_stats(&c.bn2);
        self.bn3.update_running_stats(&c.bn3);
        if let (Some((_, bn)), Some(cache)) = (&mut self.downsample, &c.bn_down) {
            bn.update_running_stats(cache);
        }
    }

    fn backward(&mut self, c: &BlockCache, dy: &Tensor) -> Result<Tensor> {
        let d = nn::relu_backward(&c.out, dy);
        let d3 = self.bn3.backward(&c.bn3, &d);
        let d_r2 = self.conv3.backward(&c.r2, &d3);
        let d2 = self.bn2.backward(&c.bn2, &nn::relu_backward(&c.r2, &d_r2));
        let d_r1 = self.conv2.backward(&c.r1, &d2);
        let d1 = self.bn1.backward(&c.bn1, &nn::relu_backward(&c.r1, &d_r1));
        let d_branch = self.conv1.backward(&c.branch_in, &d1);
        let d_identity = match (&mut self.downsample, &c.bn_down, &c.identity_in) {
            (Some((conv, bn)), Some(bc), Some(xin)) => conv.backward(xin, &bn.backward(bc, &d)),
            _ => d,
        };
        let placement = self.shift.map_or(Placement::ResidualBranch, |s| s.placement);
        match self.shift {
            Some(s) if s.fold > 0 => match placement {
                Placement::ResidualBranch => {
                    let mut dx = shift_folded_adjoint(&d_branch, s.segments, s.fold)?;
                    dx.add_assign(&d_identity);
                    Ok(dx)
                }
                Placement::InPlace => {
                    let mut ds = d_branch;
                    ds.add_assign(&d_identity);
                    shift_folded_adjoint(&ds, s.segments, s.fold)
                }
            },
            _ => {
                let mut dx = d_branch;
                dx.add_assign(&d_identity);
                Ok(dx)
            }
        }
    }
}

impl Visit for Bottleneck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        let p = |s: &str| nn::join(prefix, s);
        self.conv1.visit(&p("conv1"), f);
        self.bn1.visit(&p("bn1"), f);
        self.conv2.visit(&p("conv2"), f);
        self.bn2.visit(&p("bn2"), f);
        self.conv3.visit(&p("conv3"), f);
        self.bn3.visit(&p("bn3"), f);
        if let Some((conv, bn)) = &self.downsample {
            conv.visit(&p("downsample.0"), f);
            bn.visit(&p("downsample.1"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        let p = |s: &str| nn::join(prefix, s);
        self.conv1.visit_mut(&p("conv1"), f);
        self.bn1.visit_mut(&p("bn1"), f);
        self.conv2.visit_mut(&p("conv2"), f);
        self.bn2.visit_mut(&p("bn2"), f);
        self.conv3.visit_mut(&p("conv3"), f);
        self.bn3.visit_mut(&p("bn3"), f);
        if let Some((conv, bn)) = &mut self.downsample {
            conv.visit_mut(&p("downsample.0"), f);
            bn.visit_mut(&p("downsample.1"), f);
        }
    }
}

#[derive(Debug, Clone)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    max_pool: bool,
}

struct StemCache {
    input: Tensor,
    bn: BnCache,
    relu_out: Tensor,
    pool: Option<PoolCache>,
}

impl Stem {
    fn forward(&self, x: &Tensor, train: bool) -> (Tensor, StemCache) {
        let (b, bn) = self.bn.forward(&self.conv.forward(x), train);
        let r = nn::relu(b);
        let (out, pool) = if self.max_pool {
            let (o, c) = nn::max_pool_3x3_s2(&r);
            (o, Some(c))
        } else {
            (r.clone(), None)
        };
        (
            out,
            StemCache {
                input: x.clone(),
                bn,
                relu_out: r,
                pool,
            },
        )
    }

    fn backward(&mut self, c: &StemCache, dy: &Tensor) -> Tensor {
        let d = match &c.pool {
            Some(p) => nn::max_pool_backward(p, dy),
            None => dy.clone(),
        };
        let d = self.bn.backward(&c.bn, &nn::relu_backward(&c.relu_out, &d));
        self.conv.backward(&c.input, &d)
    }
}

struct Tape {
    n: usize,
    t: usize,
    stem: StemCache,
    blocks: Vec<BlockCache>,
    pooled_shape: Vec<usize>,
    dropout_mask: Option<Vec<f64>>,
    features: Tensor,
    frame_logits: Tensor,
}

/// A built recognition model. Eval forwards take `&self` and may run concurrently.
#[derive(Debug, Clone)]
pub struct Model {
    backbone: BackboneSpec,
    head: HeadSpec,
    shift: ShiftConfig,
    stem: Stem,
    /// `(stage, block)` pairs in execution order.
    blocks: Vec<(usize, Bottleneck)>,
    fc: Linear,
}

/// Assemble a model from its specs, initialising parameters from `seed`.
pub fn build_model(
    backbone: &BackboneSpec,
    head: &HeadSpec,
    shift: &ShiftConfig,
    seed: u64,
) -> Result<Model> {
    backbone.validate()?;
    head.validate()?;
    shift.validate()?;
    if let Some(bad) = shift
        .stages
        .iter()
        .find(|s| shift.enabled && **s > backbone.num_stages())
    {
        return Err(Error::Config(format!(
            "shift stage {bad} does not exist; {:?} has {} stages",
            backbone.kind,
            backbone.num_stages()
        )));
    }
    let block_shift = |stage: usize, in_ch: usize| {
        shift.applies_to_stage(stage).then(|| BlockShift {
            fold: shift.fold(in_ch),
            segments: shift.segments,
            placement: shift.placement,
        })
    };
    let groups = backbone.cardinality;
    let (stem, blocks, feat) = match backbone.kind {
        BackboneKind::Resnext50_32x4d => {
            let stem = Stem {
                conv: Conv2d::new(3, 64, 7, 2, 3, 1, false, seed, "conv1"),
                bn: BatchNorm2d::new(64),
                max_pool: true,
            };
            let mut blocks = Vec::new();
            let mut in_ch = 64;
            for (stage, (&planes, &count)) in
                [64usize, 128, 256, 512].iter().zip(&[3usize, 4, 6, 3]).enumerate()
            {
                let stage = stage + 1;
                let width = planes * backbone.width_per_group / 64 * groups;
                let out_ch = planes * 4;
                for i in 0..count {
                    let stride = if i == 0 && stage > 1 { 2 } else { 1 };
                    let name = format!("layer{stage}.{i}");
                    blocks.push((
                        stage,
                        Bottleneck::new(
                            in_ch,
                            width,
                            out_ch,
                            stride,
                            groups,
                            block_shift(stage, in_ch),
                            seed,
                            &name,
                        ),
                    ));
                    in_ch = out_ch;
                }
            }
            (stem, blocks, in_ch)
        }
        BackboneKind::TinyResidual => {
            let width = groups * backbone.width_per_group;
            let stem = Stem {
                conv: Conv2d::new(3, TINY_STEM, 3, 2, 1, 1, false, seed, "conv1"),
                bn: BatchNorm2d::new(TINY_STEM),
                max_pool: false,
            };
            let blocks = vec![
                (
                    1,
                    Bottleneck::new(
                        TINY_STEM,
                        width,
                        TINY_OUT,
                        1,
                        groups,
                        block_shift(1, TINY_STEM),
                        seed,
                        "layer1.0",
                    ),
                ),
                (
                    2,
                    Bottleneck::new(
                        TINY_OUT,
                        width,
                        TINY_OUT,
                        2,
                        groups,
                        block_shift(2, TINY_OUT),
                        seed,
                        "layer2.0",
                    ),
                ),
            ];
            (stem, blocks, TINY_OUT)
        }
    };
    let mut model = Model {
        backbone: backbone.clone(),
        head: head.clone(),
        shift: shift.clone(),
        stem,
        blocks,
        fc: Linear::new(feat, head.num_classes, 0.001, seed, "fc"),
    };
    if backbone.pretrained_init {
        model.load_pretrained(Path::new(&backbone.pretrained_path))?;
    }
    Ok(model)
}

impl Model {
    pub fn backbone(&self) -> &BackboneSpec {
        &self.backbone
    }

    pub fn head(&self) -> &HeadSpec {
        &self.head
    }

    pub fn shift(&self) -> &ShiftConfig {
        &self.shift
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn max_channels(&self) -> usize {
        let mut max = self.stem.conv.out_channels;
        for (_, b) in &self.blocks {
            max = max.max(b.conv2.out_channels).max(b.conv3.out_channels);
        }
        max
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable() {
                n += p.len()
            }
        });
        n
    }

    /// Copy backbone parameters from an archive, leaving the classifier as initialised.
    fn load_pretrained(&mut self, path: &Path) -> Result<()> {
        let archive = checkpoint::read_tensors(path)?;
        let mut missing = Vec::new();
        let mut result = Ok(());
        self.visit_mut("", &mut |name, p| {
            if name.starts_with("fc.") || result.is_err() {
                return;
            }
            match archive.get(name) {
                Some((shape, data)) if *shape == p.shape => p.value.clone_from(data),
                Some((shape, _)) => {
                    result = Err(Error::Checkpoint(format!(
                        "pretrained tensor {name} has shape {shape:?}, expected {:?}",
                        p.shape
                    )))
                }
                None => missing.push(name.to_string()),
            }
        });
        result?;
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "pretrained archive lacks {} tensors, first: {}",
                missing.len(),
                missing[0]
            )));
        }
        Ok(())
    }

    fn check_clip(&self, clip: &ClipTensor) -> Result<()> {
        let [_, t, c, h, w] = clip.dims();
        if t != self.shift.segments {
            return Err(Error::Shape(format!(
                "clip has {t} segments, model expects {}",
                self.shift.segments
            )));
        }
        if c != 3 {
            return Err(Error::Shape(format!("clip has {c} channels, expected RGB")));
        }
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("clip frames of {h}x{w} are too small")));
        }
        Ok(())
    }

    fn run(&self, clip: &ClipTensor, mode: Mode) -> Result<(Logits, Tape)> {
        self.check_clip(clip)?;
        let [n, t, ..] = clip.dims();
        let train = matches!(mode, Mode::Train { .. });
        let frames = clip.clone().fold_time();
        let (mut x, stem) = self.stem.forward(&frames, train);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (_, block) in &self.blocks {
            let (y, cache) = block.forward(&x, train)?;
            blocks.push(cache);
            x = y;
        }
        let pooled_shape = x.shape().to_vec();
        let pooled = nn::global_avg_pool(&x);
        let (features, dropout_mask) = match mode {
            Mode::Train { dropout_seed } => {
                let mut r = rng::substream(dropout_seed, "dropout", &[]);
                nn::dropout(&pooled, self.head.dropout_rate, Some(&mut r))
            }
            Mode::Eval => (pooled, None),
        };
        let frame_logits = self.fc.forward(&features);
        let logits = self.consensus(&frame_logits, n, t);
        Ok((
            logits,
            Tape {
                n,
                t,
                stem,
                blocks,
                pooled_shape,
                dropout_mask,
                features,
                frame_logits,
            },
        ))
    }

    fn consensus(&self, frame_logits: &Tensor, n: usize, t: usize) -> Logits {
        let k = self.head.num_classes;
        let mut out = Tensor::zeros(vec![n, k]);
        let fl = frame_logits.data();
        let o = out.data_mut();
        match self.head.consensus_input {
            ConsensusInput::Logits => {
                for b in 0..n {
                    for s in 0..t {
                        for c in 0..k {
                            o[b * k + c] += fl[(b * t + s) * k + c];
                        }
                    }
                    for c in 0..k {
                        o[b * k + c] /= t as f64;
                    }
                }
            }
            ConsensusInput::Softmax => {
                for b in 0..n {
                    for s in 0..t {
                        let p = softmax(&fl[(b * t + s) * k..][..k]);
                        for c in 0..k {
                            o[b * k + c] += p[c] / t as f64;
                        }
                    }
                    for c in 0..k {
                        o[b * k + c] = o[b * k + c].ln();
                    }
                }
            }
        }
        Logits(out)
    }

    fn consensus_backward(&self, tape: &Tape, dlogits: &Tensor) -> Tensor {
        let (n, t, k) = (tape.n, tape.t, self.head.num_classes);
        let mut d = Tensor::zeros(vec![n * t, k]);
        let dd = d.data_mut();
        let dl = dlogits.data();
        match self.head.consensus_input {
            ConsensusInput::Logits => {
                for b in 0..n {
                    for s in 0..t {
                        for c in 0..k {
                            dd[(b * t + s) * k + c] = dl[b * k + c] / t as f64;
                        }
                    }
                }
            }
            ConsensusInput::Softmax => {
                let fl = tape.frame_logits.data();
                for b in 0..n {
                    let probs: Vec<Vec<f64>> = (0..t)
                        .map(|s| softmax(&fl[(b * t + s) * k..][..k]))
                        .collect();
                    let mean: Vec<f64> = (0..k)
                        .map(|c| probs.iter().map(|p| p[c]).sum::<f64>() / t as f64)
                        .collect();
                    let u: Vec<f64> = (0..k).map(|c| dl[b * k + c] / (t as f64 * mean[c])).collect();
                    for (s, p) in probs.iter().enumerate() {
                        let dot: f64 = u.iter().zip(p).map(|(a, b)| a * b).sum();
                        for c in 0..k {
                            dd[(b * t + s) * k + c] = p[c] * (u[c] - dot);
                        }
                    }
                }
            }
        }
        d
    }

    /// Video-level logits for a clip `[N, T, 3, H, W]`. Does not touch model state.
    pub fn forward_clip(&self, clip: &ClipTensor, mode: Mode) -> Result<Logits> {
        Ok(self.run(clip, mode)?.0)
    }

    /// Per-segment logits `[N*T, num_classes]` before consensus, in eval mode.
    pub fn segment_logits(&self, clip: &ClipTensor) -> Result<Tensor> {
        Ok(self.run(clip, Mode::Eval)?.1.frame_logits)
    }

    /// Which ReLU units are active for `clip`, in forward order.
    ///
    /// Parameter settings with equal patterns lie in one piecewise-smooth region
    /// of the loss, so a finite-difference stencil whose endpoints share the
    /// centre's pattern has not crossed a kink.
    pub fn relu_pattern(&self, clip: &ClipTensor, mode: Mode) -> Result<Vec<bool>> {
        let (_, tape) = self.run(clip, mode)?;
        let mut out: Vec<bool> = tape.stem.relu_out.data().iter().map(|v| *v > 0.0).collect();
        for b in &tape.blocks {
            for t in [&b.r1, &b.r2, &b.out] {
                out.extend(t.data().iter().map(|v| *v > 0.0));
            }
        }
        Ok(out)
    }

    /// Training forward: records a tape for [`Model::backward`] and updates
    /// batch-norm running statistics.
    pub fn forward_train(&mut self, clip: &ClipTensor, dropout_seed: u64) -> Result<TrainPass> {
        let (logits, tape) = self.run(clip, Mode::Train { dropout_seed })?;
        self.stem.bn.update_running_stats(&tape.stem.bn);
        for ((_, block), cache) in self.blocks.iter_mut().zip(&tape.blocks) {
            block.update_running_stats(cache);
        }
        Ok(TrainPass { logits, tape })
    }

    /// Accumulate parameter gradients for the recorded pass given `dL/dlogits`.
    pub fn backward(&mut self, pass: TrainPass, dlogits: &Tensor) -> Result<()> {
        let tape = pass.tape;
        if dlogits.shape() != pass.logits.0.shape() {
            return Err(Error::Shape(format!(
                "logit gradient {:?} does not match logits {:?}",
                dlogits.shape(),
                pass.logits.0.shape()
            )));
        }
        let d_frame = self.consensus_backward(&tape, dlogits);
        let d_feat = self.fc.backward(&tape.features, &d_frame);
        let d_pooled = nn::dropout_backward(tape.dropout_mask.as_deref(), &d_feat);
        let mut d = nn::global_avg_pool_backward(&tape.pooled_shape, &d_pooled);
        for ((_, block), cache) in self.blocks.iter_mut().zip(&tape.blocks).rev() {
            d = block.backward(cache, &d)?;
        }
        self.stem.backward(&tape.stem, &d);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// All parameters and buffers keyed by hierarchical name.
    pub fn state(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |name, p| {
            out.insert(name.to_string(), (p.shape.clone(), p.value.clone()));
        });
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        let mut problems = Vec::new();
        self.visit_mut("", &mut |name, p| match state.get(name) {
            Some((shape, data)) if *shape == p.shape => p.value.clone_from(data),
            Some((shape, _)) => problems.push(format!("{name}: shape {shape:?} vs {:?}", p.shape)),
            None => problems.push(format!("{name}: missing")),
        });
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "state does not fit the model: {}",
                problems.join(", ")
            )))
        }
    }
}

impl Visit for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.conv.visit(&nn::join(prefix, "conv1"), f);
        self.stem.bn.visit(&nn::join(prefix, "bn1"), f);
        for (i, (stage, block)) in self.blocks.iter().enumerate() {
            block.visit(&nn::join(prefix, &self.block_name(i, *stage)), f);
        }
        self.fc.visit(&nn::join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        let names: Vec<String> = (0..self.blocks.len())
            .map(|i| self.block_name(i, self.blocks[i].0))
            .collect();
        self.stem.conv.visit_mut(&nn::join(prefix, "conv1"), f);
        self.stem.bn.visit_mut(&nn::join(prefix, "bn1"), f);
        for ((_, block), name) in self.blocks.iter_mut().zip(&names) {
            block.visit_mut(&nn::join(prefix, name), f);
        }
        self.fc.visit_mut(&nn::join(prefix, "fc"), f);
    }
}

impl Model {
    fn block_name(&self, i: usize, stage: usize) -> String {
        let first = self.blocks.iter().position(|(s, _)| *s == stage).unwrap_or(0);
        format!("layer{stage}.{}", i - first)
    }
}

/// A recorded training forward pass.
pub struct TrainPass {
    pub logits: Logits,
    tape: Tape,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(shift: ShiftConfig) -> Model {
        let shift = shift.with_stages(vec![1, 2]);
        build_model(&BackboneSpec::tiny_residual(), &HeadSpec::default(), &shift, 11).unwrap()
    }

    fn clip(n: usize, t: usize, size: usize, seed: u64) -> ClipTensor {
        use rand_distr::{Distribution, Normal};
        let mut r = rng::substream(seed, "clip", &[]);
        let d = Normal::new(0.0, 1.0).unwrap();
        let len = n * t * 3 * size * size;
        ClipTensor::from_vec([n, t, 3, size, size], (0..len).map(|_| d.sample(&mut r)).collect())
            .unwrap()
    }

    #[test]
    fn tiny_parameter_count() {
        // stem: 3*16*9 + 2*16                                         = 464
        // layer1.0: 16*16 + 32 + 16*4*9 + 32 + 16*32 + 64 + 16*32 + 64 = 2048
        // layer2.0: 32*16 + 32 + 16*4*9 + 32 + 16*32 + 64 + 32*32 + 64 = 2816
        // fc: 32*6 + 6                                                 = 198
        let m = tiny(ShiftConfig::new(8, 8));
        assert_eq!(m.parameter_count(), 464 + 2048 + 2816 + 198);
        assert!(m.num_blocks() <= 4);
        assert!(m.max_channels() <= 64);
    }

    #[test]
    fn resnext50_parameter_count() {
        // torchvision resnext50_32x4d has 25_028_904 parameters with a
        // 1000-way classifier; swapping in a 6-way head removes 2048*994 + 994.
        let m = build_model(
            &BackboneSpec::resnext50_32x4d(),
            &HeadSpec::default(),
            &ShiftConfig::new(8, 8),
            0,
        )
        .unwrap();
        assert_eq!(m.parameter_count(), 25_028_904 - 2048 * 994 - 994);
        assert_eq!(m.num_blocks(), 16);
    }

    #[test]
    fn state_names_are_hierarchical() {
        let m = tiny(ShiftConfig::new(8, 8));
        let state = m.state();
        assert!(state.contains_key("conv1.weight"));
        assert!(state.contains_key("layer1.0.conv2.weight"));
        assert!(state.contains_key("layer2.0.downsample.1.running_var"));
        assert!(state.contains_key("fc.bias"));
        assert_eq!(state["layer1.0.conv2.weight"].0, vec![16, 4, 3, 3]);
    }

    #[test]
    fn segment_mismatch_is_shape_error() {
        let m = tiny(ShiftConfig::new(8, 4));
        assert!(matches!(
            m.forward_clip(&clip(1, 3, 8, 0), Mode::Eval),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn invalid_specs() {
        let mut b = BackboneSpec::tiny_residual();
        b.cardinality = 32;
        b.width_per_group = 4;
        assert!(matches!(
            build_model(&b, &HeadSpec::default(), &ShiftConfig::new(8, 8), 0),
            Err(Error::Config(_))
        ));
        let mut h = HeadSpec::default();
        h.num_classes = 5;
        assert!(build_model(&BackboneSpec::tiny_residual(), &h, &ShiftConfig::new(8, 8), 0).is_err());
        let mut s = ShiftConfig::new(8, 8);
        s.stages = vec![3];
        assert!(build_model(&BackboneSpec::tiny_residual(), &HeadSpec::default(), &s, 0).is_err());
        let mut p = BackboneSpec::tiny_residual();
        p.pretrained_init = true;
        assert!(matches!(
            build_model(&p, &HeadSpec::default(), &ShiftConfig::new(8, 8), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_dropout_train_matches_eval_with_frozen_stats() {
        let mut head = HeadSpec::default();
        head.dropout_rate = 0.0;
        let mut m =
            build_model(&BackboneSpec::tiny_residual(), &head, &ShiftConfig::new(8, 4).with_stages(vec![1, 2]), 3)
                .unwrap();
        let x = clip(2, 4, 8, 1);
        // Freeze statistics: make running stats equal to this batch's statistics.
        for _ in 0..400 {
            m.forward_train(&x, 0).unwrap();
        }
        let train = m.forward_clip(&x, Mode::Train { dropout_seed: 9 }).unwrap();
        let eval = m.forward_clip(&x, Mode::Eval).unwrap();
        assert!(train.0.max_abs_diff(&eval.0) < 1e-3);
    }

    #[test]
    fn identical_segments_give_single_segment_logits() {
        let m = tiny(ShiftConfig::disabled(4));
        let one = clip(1, 1, 8, 5);
        let frames = one.tensor().data().to_vec();
        let four = ClipTensor::from_vec([1, 4, 3, 8, 8], frames.repeat(4)).unwrap();
        let logits = m.forward_clip(&four, Mode::Eval).unwrap();
        let seg = m.segment_logits(&four).unwrap();
        for c in 0..6 {
            assert!((logits.row(0)[c] - seg.data()[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = Logits(Tensor::new(vec![2, 6], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
        let (loss, grad) = cross_entropy(&logits, &[0, 5]).unwrap();
        assert!(loss > 0.0);
        let h = 1e-6;
        for i in 0..12 {
            let mut p = logits.clone();
            p.0.data_mut()[i] += h;
            let mut q = logits.clone();
            q.0.data_mut()[i] -= h;
            let fd = (cross_entropy(&p, &[0, 5]).unwrap().0 - cross_entropy(&q, &[0, 5]).unwrap().0)
                / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let l = Logits(Tensor::new(vec![1, 6], vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        assert_eq!(l.argmax(), vec![1]);
    }
}
