//! Dense row-major `f64` arrays.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot add {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A batch of sampled clips laid out as `[batch, time, channel, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTensor(Tensor);

impl ClipTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 5 {
            return Err(Error::Shape(format!(
                "clip must have rank 5 [N, T, C, H, W], got shape {:?}",
                tensor.shape()
            )));
        }
        if tensor.shape().contains(&0) {
            return Err(Error::Shape(format!(
                "clip axes must be strictly positive, got {:?}",
                tensor.shape()
            )));
        }
        Ok(Self(tensor))
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(shape.to_vec(), data)?)
    }

    pub fn zeros(shape: [usize; 5]) -> Result<Self> {
        Self::new(Tensor::zeros(shape.to_vec()))
    }

    pub fn dims(&self) -> [usize; 5] {
        let s = self.0.shape();
        [s[0], s[1], s[2], s[3], s[4]]
    }

    pub fn batch(&self) -> usize {
        self.dims()[0]
    }

    pub fn segments(&self) -> usize {
        self.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.dims()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Flat offset of element `(n, t, c, y, x)`.
    pub fn offset(&self, n: usize, t: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, tt, cc, hh, ww] = self.dims();
        (((n * tt + t) * cc + c) * hh + y) * ww + x
    }

    pub fn get(&self, n: usize, t: usize, c: usize, y: usize, x: usize) -> f64 {
        self.0.data()[self.offset(n, t, c, y, x)]
    }

    /// View the clip as a frame batch `[N*T, C, H, W]`.
    pub fn fold_time(self) -> Tensor {
        let [n, t, c, h, w] = self.dims();
        Tensor {
            shape: vec![n * t, c, h, w],
            data: self.0.data,
        }
    }

    /// Concatenate clips along the batch axis.
    pub fn stack(clips: &[ClipTensor]) -> Result<ClipTensor> {
        let first = clips
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty clip list".into()))?;
        let [_, t, c, h, w] = first.dims();
        let mut data = Vec::with_capacity(clips.iter().map(|c| c.0.len()).sum());
        let mut n = 0;
        for clip in clips {
            let [cn, ct, cc, ch, cw] = clip.dims();
            if (ct, cc, ch, cw) != (t, c, h, w) {
                return Err(Error::Shape(format!(
                    "cannot stack clip {:?} with {:?}",
                    clip.dims(),
                    first.dims()
                )));
            }
            n += cn;
            data.extend_from_slice(clip.0.data());
        }
        ClipTensor::from_vec([n, t, c, h, w], data)
    }

    /// Reorder the time axis so that output segment `i` is input segment `perm[i]`.
    pub fn permute_segments(&self, perm: &[usize]) -> Result<ClipTensor> {
        let [n, t, c, h, w] = self.dims();
        if perm.len() != t {
            return Err(Error::Shape(format!(
                "permutation of length {} for {} segments",
                perm.len(),
                t
            )));
        }
        let frame = c * h * w;
        let mut data = Vec::with_capacity(self.0.len());
        for b in 0..n {
            for &src in perm {
                if src >= t {
                    return Err(Error::Shape(format!("segment index {src} out of range")));
                }
                let start = (b * t + src) * frame;
                data.extend_from_slice(&self.0.data()[start..start + frame]);
            }
        }
        ClipTensor::from_vec([n, t, c, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_rejects_wrong_rank_and_empty_axes() {
        assert!(matches!(
            ClipTensor::new(Tensor::zeros(vec![1, 2, 3, 4])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            ClipTensor::zeros([1, 0, 3, 4, 4]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn permute_and_stack() {
        let clip = ClipTensor::from_vec([1, 3, 1, 1, 1], vec![0.0, 1.0, 2.0]).unwrap();
        let p = clip.permute_segments(&[2, 0, 1]).unwrap();
        assert_eq!(p.tensor().data(), &[2.0, 0.0, 1.0]);
        let s = ClipTensor::stack(&[clip, p]).unwrap();
        assert_eq!(s.dims(), [2, 3, 1, 1, 1]);
        assert_eq!(s.get(1, 0, 0, 0, 0), 2.0);
    }
}
