//! Dense rank-4 tensors in NCHW layout and the forward numeric primitives.
//!
//! Everything is `f64` and row-major `(batch, channel, row, col)`. All
//! operations are pure: inputs are borrowed immutably and a fresh tensor is
//! returned, so values can be shared freely across threads.

use thiserror::Error;

use crate::parallel::for_each_chunk_mut;

/// Errors raised by tensor primitives when shapes do not line up.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("channel mismatch: input has {input} channels, layer expects {expected}")]
    ChannelMismatch { input: usize, expected: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: [usize; 4],
        right: [usize; 4],
    },
    #[error("convolution output would be empty for input {h}x{w}, kernel {k}, stride {stride}, padding {padding}")]
    EmptyOutput {
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    #[error("channel split at {at} out of range for {channels} channels")]
    SplitOutOfRange { at: usize, channels: usize },
    #[error("pixel shuffle: {channels} channels not divisible by {s}^2")]
    ShuffleChannels { channels: usize, s: usize },
    #[error("concat: no parts given")]
    EmptyConcat,
    #[error("gates shape {gates:?} does not match input {input:?} (expected N x C x 1 x 1)")]
    BadGates {
        gates: [usize; 4],
        input: [usize; 4],
    },
}

/// Dense rank-4 tensor, shape `(N, C, H, W)`, data row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    /// Zero-filled tensor of the given shape.
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            shape: [n, c, h, w],
            data: vec![0.0; n * c * h * w],
        }
    }

    /// Constant-filled tensor.
    pub fn filled(n: usize, c: usize, h: usize, w: usize, v: f64) -> Self {
        Tensor {
            shape: [n, c, h, w],
            data: vec![v; n * c * h * w],
        }
    }

    /// Build from a flat NCHW vector. Panics if the length disagrees with
    /// the shape; that is a programming error, not an input error.
    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    /// 1x1x1x1 tensor holding a single value.
    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec([1, 1, 1, 1], vec![v])
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single element of a scalar-shaped tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + h) * ws + w] = v;
    }

    /// One `H*W` plane of the tensor.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let [_, cs, hs, ws] = self.shape;
        let start = (n * cs + c) * hs * ws;
        &self.data[start..start + hs * ws]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let [_, cs, hs, ws] = self.shape;
        let start = (n * cs + c) * hs * ws;
        &mut self.data[start..start + hs * ws]
    }

    fn same_shape(&self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }

    /// Elementwise `max(x, slope * x)`.
    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        debug_assert!(slope > 0.0 && slope < 1.0);
        self.map(|x| if x >= 0.0 { x } else { slope * x })
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&self) -> Tensor {
        self.map(|x| x.max(0.0))
    }

    /// Elementwise logistic function.
    pub fn sigmoid(&self) -> Tensor {
        self.map(|x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    /// Split along the channel axis into `[0, first)` and `[first, C)`.
    pub fn channel_split(&self, first: usize) -> Result<(Tensor, Tensor), TensorError> {
        let c = self.channels();
        if first == 0 || first >= c {
            return Err(TensorError::SplitOutOfRange { at: first, channels: c });
        }
        Ok((
            self.narrow_channels(0, first),
            self.narrow_channels(first, c - first),
        ))
    }

    /// Copy of channels `[from, from+len)`.
    pub fn narrow_channels(&self, from: usize, len: usize) -> Tensor {
        let [n, c, h, w] = self.shape;
        assert!(from + len <= c);
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for ni in 0..n {
            let start = (ni * c + from) * plane;
            data.extend_from_slice(&self.data[start..start + len * plane]);
        }
        Tensor {
            shape: [n, len, h, w],
            data,
        }
    }

    /// Concatenate along the channel axis, preserving part order.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyConcat)?;
        let [n, _, h, w] = first.shape;
        let mut c_total = 0;
        for p in parts {
            if p.batch() != n || p.height() != h || p.width() != w {
                return Err(TensorError::ShapeMismatch {
                    left: first.shape,
                    right: p.shape,
                });
            }
            c_total += p.channels();
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c_total * plane);
        for ni in 0..n {
            for p in parts {
                let pc = p.channels();
                let start = ni * pc * plane;
                data.extend_from_slice(&p.data[start..start + pc * plane]);
            }
        }
        Ok(Tensor {
            shape: [n, c_total, h, w],
            data,
        })
    }

    /// Rearrange `(N, C, H, W)` into `(N, C/s^2, sH, sW)`:
    /// `out[n][c][s*h + i][s*w + j] = in[n][c*s^2 + i*s + j][h][w]`.
    pub fn pixel_shuffle(&self, s: usize) -> Result<Tensor, TensorError> {
        let [n, c, h, w] = self.shape;
        if s == 0 || c % (s * s) != 0 {
            return Err(TensorError::ShuffleChannels { channels: c, s });
        }
        let oc = c / (s * s);
        let mut out = Tensor::zeros(n, oc, h * s, w * s);
        for ni in 0..n {
            for co in 0..oc {
                for i in 0..s {
                    for j in 0..s {
                        let src = self.plane(ni, co * s * s + i * s + j);
                        let dst = out.plane_mut(ni, co);
                        for hi in 0..h {
                            let src_row = &src[hi * w..(hi + 1) * w];
                            let orow = (hi * s + i) * (w * s);
                            for (wi, &v) in src_row.iter().enumerate() {
                                dst[orow + wi * s + j] = v;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::pixel_shuffle`]: `(N, C, sH, sW)` back to
    /// `(N, C*s^2, H, W)` with the same index map.
    pub fn space_to_depth(&self, s: usize) -> Result<Tensor, TensorError> {
        let [n, c, h, w] = self.shape;
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(TensorError::ShuffleChannels { channels: c, s });
        }
        let (oh, ow) = (h / s, w / s);
        let mut out = Tensor::zeros(n, c * s * s, oh, ow);
        for ni in 0..n {
            for ci in 0..c {
                let src = self.plane(ni, ci);
                for i in 0..s {
                    for j in 0..s {
                        let dst = out.plane_mut(ni, ci * s * s + i * s + j);
                        for hi in 0..oh {
                            let srow = (hi * s + i) * w;
                            for wi in 0..ow {
                                dst[hi * ow + wi] = src[srow + wi * s + j];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Per-channel population standard deviation plus mean, shape `(N, C, 1, 1)`.
    ///
    /// Uses a corrected two-pass mean so that a constant channel pools to
    /// exactly its value (zero deviation, no summation round-off).
    pub fn global_contrast_pool(&self) -> Tensor {
        let [n, c, h, w] = self.shape;
        let area = (h * w) as f64;
        let mut out = Tensor::zeros(n, c, 1, 1);
        for ni in 0..n {
            for ci in 0..c {
                let plane = self.plane(ni, ci);
                let first = plane.iter().sum::<f64>() / area;
                let residue = plane.iter().map(|&x| x - first).sum::<f64>() / area;
                let mean = first + residue;
                let var = plane.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / area;
                out.set(ni, ci, 0, 0, var.sqrt() + mean);
            }
        }
        out
    }

    /// Multiply each channel by its gate; `gates` must be `(N, C, 1, 1)`.
    pub fn channel_scale(&self, gates: &Tensor) -> Result<Tensor, TensorError> {
        let [n, c, _, _] = self.shape;
        if gates.shape != [n, c, 1, 1] {
            return Err(TensorError::BadGates {
                gates: gates.shape,
                input: self.shape,
            });
        }
        let mut out = self.clone();
        for ni in 0..n {
            for ci in 0..c {
                let g = gates.at(ni, ci, 0, 0);
                for v in out.plane_mut(ni, ci) {
                    *v *= g;
                }
            }
        }
        Ok(out)
    }

    /// Spatial crop: rows `[r0, r0+h)`, cols `[c0, c0+w)` of every channel.
    pub fn crop_spatial(&self, r0: usize, c0: usize, h: usize, w: usize) -> Tensor {
        let [n, c, sh, sw] = self.shape;
        assert!(r0 + h <= sh && c0 + w <= sw, "crop out of bounds");
        let mut out = Tensor::zeros(n, c, h, w);
        for ni in 0..n {
            for ci in 0..c {
                let src = self.plane(ni, ci);
                let dst = out.plane_mut(ni, ci);
                for hi in 0..h {
                    let srow = (r0 + hi) * sw + c0;
                    dst[hi * w..(hi + 1) * w].copy_from_slice(&src[srow..srow + w]);
                }
            }
        }
        out
    }

    /// Transpose H and W (a 90 degree rotation composed with a flip is built
    /// from this and `flip_horizontal`).
    pub fn rotate90(&self) -> Tensor {
        let [n, c, h, w] = self.shape;
        let mut out = Tensor::zeros(n, c, w, h);
        for ni in 0..n {
            for ci in 0..c {
                let src = self.plane(ni, ci);
                let dst = out.plane_mut(ni, ci);
                // (r, c) -> (c, h - 1 - r)
                for r in 0..h {
                    for cc in 0..w {
                        dst[cc * h + (h - 1 - r)] = src[r * w + cc];
                    }
                }
            }
        }
        out
    }

    /// Mirror along the horizontal axis (columns reversed).
    pub fn flip_horizontal(&self) -> Tensor {
        let [n, c, h, w] = self.shape;
        let mut out = self.clone();
        for ni in 0..n {
            for ci in 0..c {
                let dst = out.plane_mut(ni, ci);
                for r in 0..h {
                    dst[r * w..(r + 1) * w].reverse();
                }
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Learnable 2-D convolution parameters.
///
/// Weights are `(out_channels, in_channels, k, k)`; zero padding is
/// symmetric. Kernels are square.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    /// Zero-initialized layer.
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, stride: usize, padding: usize) -> Self {
        ConvLayer {
            weights: Tensor::zeros(out_ch, in_ch, k, k),
            bias: vec![0.0; out_ch],
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    /// `out * in * k^2` weights plus `out` biases.
    pub fn param_count(&self) -> usize {
        self.weights.numel() + self.bias.len()
    }

    /// Output spatial extent for one input dimension, or `None` when empty.
    pub fn out_dim(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel() {
            return None;
        }
        Some((padded - self.kernel()) / self.stride + 1)
    }
}

/// Biased cross-correlation of `input` with `layer`, zero padding.
///
/// Output shape is `(N, out_channels, H', W')` with
/// `H' = floor((H + 2p - k) / stride) + 1`. Parallel over `(batch, out
/// channel)` planes; each output element has a fixed accumulation order, so
/// the result does not depend on the thread count.
pub fn conv2d(input: &Tensor, layer: &ConvLayer) -> Result<Tensor, TensorError> {
    let [n, c, h, w] = input.shape();
    if c != layer.in_channels() {
        return Err(TensorError::ChannelMismatch {
            input: c,
            expected: layer.in_channels(),
        });
    }
    let (oh, ow) = match (layer.out_dim(h), layer.out_dim(w)) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(TensorError::EmptyOutput {
                h,
                w,
                k: layer.kernel(),
                stride: layer.stride,
                padding: layer.padding,
            })
        }
    };

    let k = layer.kernel();
    let stride = layer.stride;
    let pad = layer.padding;
    let mut out = Tensor::zeros(n, layer.out_channels(), oh, ow);
    let oc_total = layer.out_channels();

    for_each_chunk_mut(out.data_mut(), oh * ow, |idx, plane_out| {
        let ni = idx / oc_total;
        let oc = idx % oc_total;
        let bias = layer.bias[oc];
        plane_out.iter_mut().for_each(|v| *v = bias);
        for ic in 0..c {
            let src = input.plane(ni, ic);
            for kh in 0..k {
                for kw in 0..k {
                    let wv = layer.weights.at(oc, ic, kh, kw);
                    if wv == 0.0 {
                        continue;
                    }
                    // Valid output rows for this kernel tap: require
                    // 0 <= oh*stride + kh - pad < h.
                    let (oh_lo, oh_hi) = valid_range(oh, h, stride, kh, pad);
                    let (ow_lo, ow_hi) = valid_range(ow, w, stride, kw, pad);
                    for ohi in oh_lo..oh_hi {
                        let ih = ohi * stride + kh - pad;
                        let srow = ih * w;
                        let orow = ohi * ow;
                        if stride == 1 {
                            let iw0 = ow_lo + kw - pad;
                            let len = ow_hi - ow_lo;
                            let srow = &src[srow + iw0..srow + iw0 + len];
                            let orow = &mut plane_out[orow + ow_lo..orow + ow_lo + len];
                            for (o, &s) in orow.iter_mut().zip(srow) {
                                *o += wv * s;
                            }
                        } else {
                            for owi in ow_lo..ow_hi {
                                let iw = owi * stride + kw - pad;
                                plane_out[orow + owi] += wv * src[srow + iw];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Range of output positions `o` with `0 <= o*stride + tap - pad < input`.
#[inline]
fn valid_range(out: usize, input: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    // o >= (pad - tap) / stride, rounded up
    let lo = pad.saturating_sub(tap).div_ceil(stride);
    // o <= (input - 1 + pad - tap) / stride
    let hi = if input + pad > tap {
        ((input + pad - tap - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Gradient of [`conv2d`] with respect to its input.
///
/// Gather form: every input element sums the contributions of the output
/// positions whose receptive field covers it, so planes can be filled in
/// parallel without write conflicts.
pub fn conv2d_grad_input(grad_out: &Tensor, input_shape: [usize; 4], layer: &ConvLayer) -> Tensor {
    let [n, c, h, w] = input_shape;
    let [_, _, oh, ow] = grad_out.shape();
    let k = layer.kernel();
    let stride = layer.stride;
    let pad = layer.padding;
    let oc_total = layer.out_channels();

    let mut grad_in = Tensor::zeros(n, c, h, w);
    for_each_chunk_mut(grad_in.data_mut(), h * w, |idx, plane| {
        let ni = idx / c;
        let ic = idx % c;
        for oc in 0..oc_total {
            let go = grad_out.plane(ni, oc);
            for kh in 0..k {
                for kw in 0..k {
                    let wv = layer.weights.at(oc, ic, kh, kw);
                    if wv == 0.0 {
                        continue;
                    }
                    let (oh_lo, oh_hi) = valid_range(oh, h, stride, kh, pad);
                    let (ow_lo, ow_hi) = valid_range(ow, w, stride, kw, pad);
                    for ohi in oh_lo..oh_hi {
                        let ih = ohi * stride + kh - pad;
                        let irow = ih * w;
                        let grow = ohi * ow;
                        for owi in ow_lo..ow_hi {
                            let iw = owi * stride + kw - pad;
                            plane[irow + iw] += wv * go[grow + owi];
                        }
                    }
                }
            }
        }
    });
    grad_in
}

/// Gradients of [`conv2d`] with respect to the layer weights and bias.
pub fn conv2d_grad_params(
    grad_out: &Tensor,
    input: &Tensor,
    layer: &ConvLayer,
) -> (Tensor, Vec<f64>) {
    let [n, c, h, w] = input.shape();
    let [_, _, oh, ow] = grad_out.shape();
    let k = layer.kernel();
    let stride = layer.stride;
    let pad = layer.padding;
    let oc_total = layer.out_channels();

    let mut grad_w = Tensor::zeros(oc_total, c, k, k);
    for_each_chunk_mut(grad_w.data_mut(), c * k * k, |oc, wchunk| {
        for ni in 0..n {
            let go = grad_out.plane(ni, oc);
            for ic in 0..c {
                let src = input.plane(ni, ic);
                for kh in 0..k {
                    for kw in 0..k {
                        let (oh_lo, oh_hi) = valid_range(oh, h, stride, kh, pad);
                        let (ow_lo, ow_hi) = valid_range(ow, w, stride, kw, pad);
                        let mut acc = 0.0;
                        for ohi in oh_lo..oh_hi {
                            let ih = ohi * stride + kh - pad;
                            let srow = ih * w;
                            let grow = ohi * ow;
                            for owi in ow_lo..ow_hi {
                                let iw = owi * stride + kw - pad;
                                acc += go[grow + owi] * src[srow + iw];
                            }
                        }
                        wchunk[(ic * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    });

    let grad_b = (0..oc_total)
        .map(|oc| (0..n).map(|ni| grad_out.plane(ni, oc).iter().sum::<f64>()).sum())
        .collect();
    (grad_w, grad_b)
}
