//! Temporal shift: moving a fraction of channels one step along the time axis.
//!
//! With `fold = floor(C / shift_div)`, channels `[0, fold)` read from the next
//! segment, channels `[fold, 2 * fold)` read from the previous segment, and the
//! remaining channels pass through. Missing neighbours at the clip boundaries
//! are filled with zeros. The operation is pure data movement, so its adjoint
//! is the same movement with the two directions swapped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ClipTensor, Tensor};

/// Where the shift sits relative to a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Shift only the input of the convolutional branch; the identity path
    /// sees the unshifted activations.
    ResidualBranch,
    /// Shift the block input before both paths.
    InPlace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub enabled: bool,
    pub shift_div: usize,
    pub placement: Placement,
    pub segments: usize,
    /// 1-based backbone stages whose residual blocks carry a shift.
    pub stages: Vec<usize>,
}

impl ShiftConfig {
    pub fn new(shift_div: usize, segments: usize) -> Self {
        Self {
            enabled: true,
            shift_div,
            placement: Placement::ResidualBranch,
            segments,
            stages: vec![1, 2, 3, 4],
        }
    }

    pub fn with_stages(mut self, stages: Vec<usize>) -> Self {
        self.stages = stages;
        self
    }

    pub fn disabled(segments: usize) -> Self {
        Self {
            enabled: false,
            ..Self::new(8, segments)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(Error::Config("shift.segments must be at least 1".into()));
        }
        if self.enabled && self.shift_div < 2 {
            return Err(Error::Config(format!(
                "shift.shift_div must be at least 2 when the shift is enabled, got {}",
                self.shift_div
            )));
        }
        if self.stages.contains(&0) {
            return Err(Error::Config("shift.stages are 1-based".into()));
        }
        Ok(())
    }

    /// Channels moved in each direction for a block of width `channels`.
    pub fn fold(&self, channels: usize) -> usize {
        if self.enabled {
            channels / self.shift_div
        } else {
            0
        }
    }

    pub fn applies_to_stage(&self, stage: usize) -> bool {
        self.enabled && self.stages.contains(&stage)
    }
}

#[derive(Debug, Clone, Copy)]
enum Direction {
    Forward,
    Adjoint,
}

/// Shift a folded frame batch laid out as `[N*T, C, spatial]`.
fn shift_frames(
    src: &[f64],
    dst: &mut [f64],
    segments: usize,
    channels: usize,
    spatial: usize,
    fold: usize,
    direction: Direction,
) {
    debug_assert_eq!(src.len(), dst.len());
    let frame = channels * spatial;
    let clips = src.len() / (segments * frame);
    let fold = fold.min(channels);
    let second = (2 * fold).min(channels);
    // (source time offset) for group 0 and group 1
    let (off0, off1): (isize, isize) = match direction {
        Direction::Forward => (1, -1),
        Direction::Adjoint => (-1, 1),
    };
    for n in 0..clips {
        for t in 0..segments {
            let out_base = (n * segments + t) * frame;
            let neighbour = |off: isize| -> Option<usize> {
                let s = t as isize + off;
                (s >= 0 && (s as usize) < segments).then(|| (n * segments + s as usize) * frame)
            };
            let groups = [(0, fold, neighbour(off0)), (fold, second, neighbour(off1))];
            for (lo, hi, src_base) in groups {
                let range = lo * spatial..hi * spatial;
                let out = &mut dst[out_base + range.start..out_base + range.end];
                match src_base {
                    Some(b) => out.copy_from_slice(&src[b + range.start..b + range.end]),
                    None => out.fill(0.0),
                }
            }
            let rest = second * spatial..frame;
            dst[out_base + rest.start..out_base + rest.end]
                .copy_from_slice(&src[out_base + rest.start..out_base + rest.end]);
        }
    }
}

fn check_frames(frames: &Tensor, segments: usize) -> Result<(usize, usize)> {
    if frames.rank() != 4 {
        return Err(Error::Shape(format!(
            "expected a frame batch [N*T, C, H, W], got {:?}",
            frames.shape()
        )));
    }
    let s = frames.shape();
    if segments == 0 || !s[0].is_multiple_of(segments) {
        return Err(Error::Shape(format!(
            "frame batch of {} is not a multiple of {} segments",
            s[0], segments
        )));
    }
    Ok((s[1], s[2] * s[3]))
}

/// Shift a time-folded frame batch `[N*T, C, H, W]` by `fold` channels per direction.
pub fn shift_folded(frames: &Tensor, segments: usize, fold: usize) -> Result<Tensor> {
    let (channels, spatial) = check_frames(frames, segments)?;
    let mut out = Tensor::zeros(frames.shape().to_vec());
    shift_frames(
        frames.data(),
        out.data_mut(),
        segments,
        channels,
        spatial,
        fold,
        Direction::Forward,
    );
    Ok(out)
}

/// Adjoint of [`shift_folded`]; maps output gradients back onto the input.
pub fn shift_folded_adjoint(grad: &Tensor, segments: usize, fold: usize) -> Result<Tensor> {
    let (channels, spatial) = check_frames(grad, segments)?;
    let mut out = Tensor::zeros(grad.shape().to_vec());
    shift_frames(
        grad.data(),
        out.data_mut(),
        segments,
        channels,
        spatial,
        fold,
        Direction::Adjoint,
    );
    Ok(out)
}

fn clip_layout(clip: &Tensor, shift_div: usize) -> Result<([usize; 5], usize)> {
    if clip.rank() != 5 {
        return Err(Error::Shape(format!(
            "temporal shift expects a rank-5 clip [N, T, C, H, W], got {:?}",
            clip.shape()
        )));
    }
    if shift_div < 1 {
        return Err(Error::Config("shift_div must be at least 1".into()));
    }
    let s = clip.shape();
    let dims = [s[0], s[1], s[2], s[3], s[4]];
    Ok((dims, dims[2] / shift_div))
}

/// Temporal shift of a clip `[N, T, C, H, W]`. The input is left untouched.
pub fn temporal_shift(clip: &Tensor, shift_div: usize) -> Result<Tensor> {
    let ([_, t, c, h, w], fold) = clip_layout(clip, shift_div)?;
    let mut out = Tensor::zeros(clip.shape().to_vec());
    shift_frames(clip.data(), out.data_mut(), t, c, h * w, fold, Direction::Forward);
    Ok(out)
}

/// Gradient of [`temporal_shift`]: the shift with both directions reversed.
pub fn temporal_shift_adjoint(grad: &Tensor, shift_div: usize) -> Result<Tensor> {
    let ([_, t, c, h, w], fold) = clip_layout(grad, shift_div)?;
    let mut out = Tensor::zeros(grad.shape().to_vec());
    shift_frames(grad.data(), out.data_mut(), t, c, h * w, fold, Direction::Adjoint);
    Ok(out)
}

/// The convolutional branch `F` of a residual block, applied per frame.
pub trait ResidualBranch {
    fn channels(&self) -> usize;

    /// Maps `[B, C, H, W]` to `[B, C, H, W]`.
    fn apply(&self, frames: &Tensor) -> Result<Tensor>;
}

/// Residual block `x + F(x)` with a temporal shift placed per `config`.
pub fn shifted_residual_block(
    clip: &ClipTensor,
    branch: &dyn ResidualBranch,
    config: &ShiftConfig,
) -> Result<ClipTensor> {
    let [n, t, c, h, w] = clip.dims();
    if c != branch.channels() {
        return Err(Error::Shape(format!(
            "clip has {} channels but the block expects {}",
            c,
            branch.channels()
        )));
    }
    if t != config.segments {
        return Err(Error::Shape(format!(
            "clip has {} segments but the shift is configured for {}",
            t, config.segments
        )));
    }
    let fold = config.fold(c);
    let frames = clip.clone().fold_time();
    let shifted = shift_folded(&frames, t, fold)?;
    let (identity, branch_in) = match config.placement {
        Placement::ResidualBranch => (&frames, &shifted),
        Placement::InPlace => (&shifted, &shifted),
    };
    let out = branch.apply(branch_in)?;
    if out.shape() != identity.shape() {
        return Err(Error::Shape(format!(
            "branch output {:?} does not match identity {:?}",
            out.shape(),
            identity.shape()
        )));
    }
    let sum = identity.add(&out)?;
    ClipTensor::new(sum.reshape(vec![n, t, c, h, w])?)
}

/// Pointwise (1x1) convolution branch with a dense `C x C` weight.
#[derive(Debug, Clone)]
pub struct PointwiseBranch {
    channels: usize,
    /// Row-major `[out, in]`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl PointwiseBranch {
    pub fn new(channels: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != channels * channels || bias.len() != channels {
            return Err(Error::Shape(format!(
                "pointwise branch over {channels} channels needs {} weights and {channels} biases",
                channels * channels
            )));
        }
        Ok(Self {
            channels,
            weight,
            bias,
        })
    }

    pub fn identity(channels: usize) -> Self {
        let mut weight = vec![0.0; channels * channels];
        for c in 0..channels {
            weight[c * channels + c] = 1.0;
        }
        Self {
            channels,
            weight,
            bias: vec![0.0; channels],
        }
    }

    pub fn zero(channels: usize) -> Self {
        Self {
            channels,
            weight: vec![0.0; channels * channels],
            bias: vec![0.0; channels],
        }
    }
}

impl ResidualBranch for PointwiseBranch {
    fn channels(&self) -> usize {
        self.channels
    }

    fn apply(&self, frames: &Tensor) -> Result<Tensor> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Shape(format!(
                "pointwise branch over {} channels got {:?}",
                self.channels, s
            )));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let x = frames.data();
        let mut out = Tensor::zeros(s.to_vec());
        let y = out.data_mut();
        for n in 0..b {
            for o in 0..c {
                let dst = &mut y[(n * c + o) * hw..(n * c + o + 1) * hw];
                dst.fill(self.bias[o]);
                for i in 0..c {
                    let wv = self.weight[o * c + i];
                    if wv == 0.0 {
                        continue;
                    }
                    let src = &x[(n * c + i) * hw..(n * c + i + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
        Ok(out)
    }
}
