use rand::Rng;

use super::{join, Param, ParamKind, Visit};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected [B, C, H, W], got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// 2-D convolution with optional channel groups, square kernel, no dilation.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weight: Param,
    pub bias: Option<Param>,
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
fn tap_range(k: usize, stride: usize, padding: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - padding < in_len
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_len + padding > k {
        ((in_len + padding - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        seed: u64,
        name: &str,
    ) -> Self {
        assert!(groups >= 1 && in_channels.is_multiple_of(groups) && out_channels.is_multiple_of(groups));
        let shape = vec![out_channels, in_channels / groups, kernel, kernel];
        // fan-out mode for ReLU networks
        let weight = Param::he_normal(
            shape,
            out_channels * kernel * kernel,
            seed,
            &join(name, "weight"),
        );
        let bias = bias.then(|| Param::filled(vec![out_channels], 0.0, ParamKind::NoDecay));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            weight,
            bias,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (b, c, h, w) = dims4(x);
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let mut out = Tensor::zeros(vec![b, self.out_channels, ho, wo]);
        let xd = x.data();
        let wd = &self.weight.value;
        let y = out.data_mut();
        let rows: Vec<_> = (0..k).map(|t| tap_range(t, s, p, h, ho)).collect();
        let cols: Vec<_> = (0..k).map(|t| tap_range(t, s, p, w, wo)).collect();
        for n in 0..b {
            for oc in 0..self.out_channels {
                let g = oc / cout_g;
                let plane = &mut y[(n * self.out_channels + oc) * ho * wo..][..ho * wo];
                if let Some(bias) = &self.bias {
                    plane.fill(bias.value[oc]);
                }
                for icg in 0..cin_g {
                    let ic = g * cin_g + icg;
                    let inp = &xd[(n * c + ic) * h * w..][..h * w];
                    for ky in 0..k {
                        let (oy_lo, oy_hi) = rows[ky];
                        for kx in 0..k {
                            let wv = wd[((oc * cin_g + icg) * k + ky) * k + kx];
                            let (ox_lo, ox_hi) = cols[kx];
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - p;
                                let out_row = &mut plane[oy * wo..(oy + 1) * wo];
                                let in_row = &inp[iy * w..(iy + 1) * w];
                                if s == 1 {
                                    let off = kx as isize - p as isize;
                                    let src = &in_row[(ox_lo as isize + off) as usize
                                        ..(ox_hi as isize + off) as usize];
                                    for (o, v) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                        *o += wv * v;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        out_row[ox] += wv * in_row[ox * s + kx - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulate weight/bias gradients and return the input gradient.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (b, c, h, w) = dims4(x);
        let (_, oc_n, ho, wo) = dims4(dy);
        debug_assert_eq!(oc_n, self.out_channels);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let mut dx = Tensor::zeros(x.shape().to_vec());
        let xd = x.data();
        let dyd = dy.data();
        let rows: Vec<_> = (0..k).map(|t| tap_range(t, s, p, h, ho)).collect();
        let cols: Vec<_> = (0..k).map(|t| tap_range(t, s, p, w, wo)).collect();
        if let Some(bias) = &mut self.bias {
            let g = bias.grad_mut();
            for n in 0..b {
                for oc in 0..oc_n {
                    g[oc] += dyd[(n * oc_n + oc) * ho * wo..][..ho * wo].iter().sum::<f64>();
                }
            }
        }
        let wv_all = self.weight.value.clone();
        let dw = self.weight.grad_mut();
        let dxd = dx.data_mut();
        for n in 0..b {
            for oc in 0..oc_n {
                let g = oc / cout_g;
                let dplane = &dyd[(n * oc_n + oc) * ho * wo..][..ho * wo];
                for icg in 0..cin_g {
                    let ic = g * cin_g + icg;
                    let base = (n * c + ic) * h * w;
                    for ky in 0..k {
                        let (oy_lo, oy_hi) = rows[ky];
                        for kx in 0..k {
                            let widx = ((oc * cin_g + icg) * k + ky) * k + kx;
                            let wv = wv_all[widx];
                            let (ox_lo, ox_hi) = cols[kx];
                            let mut acc = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - p;
                                let drow = &dplane[oy * wo..(oy + 1) * wo];
                                let row = base + iy * w;
                                for ox in ox_lo..ox_hi {
                                    let ix = row + ox * s + kx - p;
                                    acc += drow[ox] * xd[ix];
                                    dxd[ix] += wv * drow[ox];
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Visit for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            weight: Param::filled(vec![channels], 1.0, ParamKind::NoDecay),
            bias: Param::filled(vec![channels], 0.0, ParamKind::NoDecay),
            running_mean: Param::filled(vec![channels], 0.0, ParamKind::Buffer),
            running_var: Param::filled(vec![channels], 1.0, ParamKind::Buffer),
        }
    }

    /// Normalise with batch statistics (`train`) or running statistics.
    pub fn forward(&self, x: &Tensor, train: bool) -> (Tensor, BnCache) {
        let (b, c, h, w) = dims4(x);
        assert_eq!(c, self.channels, "batch-norm channels");
        let hw = h * w;
        let m = (b * hw) as f64;
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut var_unbiased = vec![0.0; c];
        if train {
            for ch in 0..c {
                let mut sum = 0.0;
                for n in 0..b {
                    sum += xd[(n * c + ch) * hw..][..hw].iter().sum::<f64>();
                }
                let mu = sum / m;
                let mut sq = 0.0;
                for n in 0..b {
                    sq += xd[(n * c + ch) * hw..][..hw]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = sq / m;
                var_unbiased[ch] = if m > 1.0 { sq / (m - 1.0) } else { sq / m };
            }
        } else {
            mean.copy_from_slice(&self.running_mean.value);
            var.copy_from_slice(&self.running_var.value);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut out = Tensor::zeros(x.shape().to_vec());
        let mut xhat = vec![0.0; x.len()];
        let y = out.data_mut();
        for n in 0..b {
            for ch in 0..c {
                let (g, bt) = (self.weight.value[ch], self.bias.value[ch]);
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    y[i] = g * xh + bt;
                }
            }
        }
        (
            out,
            BnCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: var_unbiased,
                train,
            },
        )
    }

    pub fn update_running_stats(&mut self, cache: &BnCache) {
        if !cache.train {
            return;
        }
        let m = self.momentum;
        for ch in 0..self.channels {
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - m) * *rm + m * cache.batch_mean[ch];
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - m) * *rv + m * cache.batch_var_unbiased[ch];
        }
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let (b, c, h, w) = dims4(dy);
        let hw = h * w;
        let m = (b * hw) as f64;
        let dyd = dy.data();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    sum_dy[ch] += dyd[i];
                    sum_dy_xhat[ch] += dyd[i] * cache.xhat[i];
                }
            }
        }
        {
            let gw = self.weight.grad_mut();
            for ch in 0..c {
                gw[ch] += sum_dy_xhat[ch];
            }
        }
        {
            let gb = self.bias.grad_mut();
            for ch in 0..c {
                gb[ch] += sum_dy[ch];
            }
        }
        let mut dx = Tensor::zeros(dy.shape().to_vec());
        let dxd = dx.data_mut();
        for n in 0..b {
            for ch in 0..c {
                let g = self.weight.value[ch];
                let scale = g * cache.inv_std[ch];
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    dxd[i] = if cache.train {
                        scale * (dyd[i] - sum_dy[ch] / m - cache.xhat[i] * sum_dy_xhat[ch] / m)
                    } else {
                        scale * dyd[i]
                    };
                }
            }
        }
        dx
    }
}

impl Visit for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Fully connected layer over `[B, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, std: f64, seed: u64, name: &str) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::normal(
                vec![out_features, in_features],
                std,
                seed,
                &join(name, "weight"),
                ParamKind::Weight,
            ),
            bias: Param::filled(vec![out_features], 0.0, ParamKind::NoDecay),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1], self.in_features, "linear input features");
        let b = s[0];
        let (fi, fo) = (self.in_features, self.out_features);
        let mut out = Tensor::zeros(vec![b, fo]);
        let y = out.data_mut();
        for n in 0..b {
            let row = &x.data()[n * fi..(n + 1) * fi];
            for o in 0..fo {
                let wrow = &self.weight.value[o * fi..(o + 1) * fi];
                y[n * fo + o] =
                    self.bias.value[o] + wrow.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let b = x.shape()[0];
        let (fi, fo) = (self.in_features, self.out_features);
        let xd = x.data();
        let dyd = dy.data();
        {
            let gb = self.bias.grad_mut();
            for n in 0..b {
                for o in 0..fo {
                    gb[o] += dyd[n * fo + o];
                }
            }
        }
        {
            let gw = self.weight.grad_mut();
            for n in 0..b {
                for o in 0..fo {
                    let d = dyd[n * fo + o];
                    for i in 0..fi {
                        gw[o * fi + i] += d * xd[n * fi + i];
                    }
                }
            }
        }
        let mut dx = Tensor::zeros(vec![b, fi]);
        let dxd = dx.data_mut();
        for n in 0..b {
            for o in 0..fo {
                let d = dyd[n * fo + o];
                let wrow = &self.weight.value[o * fi..(o + 1) * fi];
                for i in 0..fi {
                    dxd[n * fi + i] += d * wrow[i];
                }
            }
        }
        dx
    }
}

impl Visit for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub fn relu(mut x: Tensor) -> Tensor {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    let data = out
        .data()
        .iter()
        .zip(dy.data())
        .map(|(o, d)| if *o > 0.0 { *d } else { 0.0 })
        .collect();
    Tensor::new(dy.shape().to_vec(), data).expect("same shape")
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// 3x3 max pooling, stride 2, padding 1.
pub fn max_pool_3x3_s2(x: &Tensor) -> (Tensor, PoolCache) {
    let (b, c, h, w) = dims4(x);
    let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut out = Tensor::zeros(vec![b, c, ho, wo]);
    let mut argmax = vec![0; b * c * ho * wo];
    let xd = x.data();
    let y = out.data_mut();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                y[o] = best;
                argmax[o] = best_i;
            }
        }
    }
    (
        out,
        PoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    )
}

pub fn max_pool_backward(cache: &PoolCache, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(cache.input_shape.clone());
    let dxd = dx.data_mut();
    for (o, &i) in cache.argmax.iter().enumerate() {
        dxd[i] += dy.data()[o];
    }
    dx
}

/// `[B, C, H, W] -> [B, C]`
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (b, c, h, w) = dims4(x);
    let hw = h * w;
    let data = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(vec![b, c], data).expect("pooled shape")
}

pub fn global_avg_pool_backward(input_shape: &[usize], dy: &Tensor) -> Tensor {
    let hw = input_shape[2] * input_shape[3];
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (plane, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
        chunk.fill(dy.data()[plane] / hw as f64);
    }
    dx
}

/// Inverted dropout; returns the output and the scaling mask.
pub fn dropout(x: &Tensor, rate: f64, rng: Option<&mut StreamRng>) -> (Tensor, Option<Vec<f64>>) {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let mask: Vec<f64> = (0..x.len())
                .map(|_| {
                    if keep > 0.0 && rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            (Tensor::new(x.shape().to_vec(), data).expect("shape"), Some(mask))
        }
        _ => (x.clone(), None),
    }
}

pub fn dropout_backward(mask: Option<&[f64]>, dy: &Tensor) -> Tensor {
    match mask {
        Some(mask) => {
            let data = dy.data().iter().zip(mask).map(|(d, m)| d * m).collect();
            Tensor::new(dy.shape().to_vec(), data).expect("shape")
        }
        None => dy.clone(),
    }
}
