//! Dense row-major N-dimensional arrays and the numeric kernels built on them.
//!
//! All values are `f64`. Shapes are plain `Vec<usize>`; axis order follows the
//! signal convention used throughout the crate: spatial x, spatial y, temporal
//! t, feature channel f, with x the slowest-varying axis.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{FstcnError, Result};

/// Dense N-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(FstcnError::Invalid(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(FstcnError::shape(
                "Tensor::new",
                format!("{n} values for shape {shape:?}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Gaussian-initialized tensor with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Tensor::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for i in 0..t.data.len() {
            t.data[i] = f(&idx);
            // advance the multi-index
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        t
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

    #[inline]
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {ix} out of range {ext} at axis {i}");
            off = off * ext + ix;
        }
        off
    }

    #[inline]
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    #[inline]
    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(FstcnError::shape(
                "elementwise op",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn abs(&self) -> Tensor {
        self.map(f64::abs)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry; first index wins on exact ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(FstcnError::shape(
                "reshape",
                format!("{} values", self.data.len()),
                format!("shape {shape:?} ({n} values)"),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Reorder axes; `axes[i]` names the source axis placed at position `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        if axes.len() != self.shape.len() {
            return Err(FstcnError::Invalid(format!(
                "permute axes {axes:?} do not match rank {}",
                self.shape.len()
            )));
        }
        let mut seen = vec![false; axes.len()];
        for &a in axes {
            if a >= axes.len() || seen[a] {
                return Err(FstcnError::Invalid(format!("invalid permutation {axes:?}")));
            }
            seen[a] = true;
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let mut out = Tensor::zeros(&new_shape);
        let mut src_idx = vec![0usize; axes.len()];
        let mut dst_idx = vec![0usize; axes.len()];
        loop {
            for (i, &a) in axes.iter().enumerate() {
                dst_idx[i] = src_idx[a];
            }
            out.set(&dst_idx, self.at(&src_idx));
            let mut done = true;
            for ax in (0..src_idx.len()).rev() {
                src_idx[ax] += 1;
                if src_idx[ax] < self.shape[ax] {
                    done = false;
                    break;
                }
                src_idx[ax] = 0;
            }
            if done {
                break;
            }
        }
        Ok(out)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(FstcnError::Invalid("concat of zero tensors".into()));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(FstcnError::Invalid(format!("concat axis {axis} out of rank {rank}")));
        }
        let mut out_shape = parts[0].shape.clone();
        out_shape[axis] = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(FstcnError::shape("concat", format!("rank {rank}"), format!("rank {}", p.rank())));
            }
            for ax in 0..rank {
                if ax != axis && p.shape[ax] != parts[0].shape[ax] {
                    return Err(FstcnError::shape(
                        "concat",
                        format!("{:?}", parts[0].shape),
                        format!("{:?}", p.shape),
                    ));
                }
            }
            out_shape[axis] += p.shape[axis];
        }
        let mut out = Tensor::zeros(&out_shape);
        let mut base = 0usize;
        for p in parts {
            let mut idx = vec![0usize; rank];
            let mut dst = vec![0usize; rank];
            loop {
                dst.copy_from_slice(&idx);
                dst[axis] += base;
                out.set(&dst, p.at(&idx));
                let mut done = true;
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    if idx[ax] < p.shape[ax] {
                        done = false;
                        break;
                    }
                    idx[ax] = 0;
                }
                if done {
                    break;
                }
            }
            base += p.shape[axis];
        }
        Ok(out)
    }
}

/// Zero-padding policy for the sliding axes of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    /// No padding; the kernel must fit inside the input.
    Valid,
    /// Zero-pad so a stride-1 convolution preserves extent. Total padding is
    /// `k - 1`, split as `(k-1)/2` before and the remainder after.
    Same,
    /// Symmetric zero padding of the given width on both sides of each
    /// sliding axis.
    Explicit(usize),
}

impl Padding {
    /// (before, after) padding for a sliding axis with kernel extent `k`.
    pub fn resolve(self, k: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let before = (k - 1) / 2;
                (before, k - 1 - before)
            }
            Padding::Explicit(p) => (p, p),
        }
    }
}

fn out_extent(in_extent: usize, k: usize, stride: usize, pad: (usize, usize)) -> Result<usize> {
    let padded = in_extent + pad.0 + pad.1;
    if k > padded {
        return Err(FstcnError::Invalid(format!(
            "kernel extent {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Cross-correlation of `input` `[h, w, c_in]` with `kernels`
/// `[kh, kw, c_in, c_out]`, summed over input channels. No kernel flip.
pub fn conv_general(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (h, w, c_in) = expect3(input, "conv input")?;
    let ks = kernels.shape();
    if ks.len() != 4 {
        return Err(FstcnError::shape("conv kernels", "[kh, kw, c_in, c_out]", format!("{ks:?}")));
    }
    let (kh, kw, kci, c_out) = (ks[0], ks[1], ks[2], ks[3]);
    if kci != c_in {
        return Err(FstcnError::shape(
            "conv channels",
            format!("kernel c_in {kci}"),
            format!("input channels {c_in}"),
        ));
    }
    if stride == 0 {
        return Err(FstcnError::Invalid("stride must be >= 1".into()));
    }
    let ph = padding.resolve(kh);
    let pw = padding.resolve(kw);
    let oh = out_extent(h, kh, stride, ph)?;
    let ow = out_extent(w, kw, stride, pw)?;
    let mut out = Tensor::zeros(&[oh, ow, c_out]);
    let id = input.data();
    let kd = kernels.data();
    let od = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - ph.0 as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pw.0 as isize;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let in_base = ((iy as usize) * w + ix as usize) * c_in;
                    let k_base = (ky * kw + kx) * c_in * c_out;
                    let out_base = (oy * ow + ox) * c_out;
                    for ci in 0..c_in {
                        let v = id[in_base + ci];
                        let kb = k_base + ci * c_out;
                        for co in 0..c_out {
                            od[out_base + co] += v * kd[kb + co];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv_general`] with respect to input and kernels, given the
/// upstream gradient of the output.
pub fn conv_general_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor, Tensor)> {
    let (h, w, c_in) = expect3(input, "conv input")?;
    let ks = kernels.shape();
    let (kh, kw, _, c_out) = (ks[0], ks[1], ks[2], ks[3]);
    let ph = padding.resolve(kh);
    let pw = padding.resolve(kw);
    let os = grad_out.shape();
    let (oh, ow) = (os[0], os[1]);
    let mut grad_in = Tensor::zeros(&[h, w, c_in]);
    let mut grad_k = Tensor::zeros(ks);
    let id = input.data();
    let kd = kernels.data();
    let gd = grad_out.data();
    let gid = grad_in.data_mut();
    let gkd = grad_k.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - ph.0 as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pw.0 as isize;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let in_base = ((iy as usize) * w + ix as usize) * c_in;
                    let k_base = (ky * kw + kx) * c_in * c_out;
                    let out_base = (oy * ow + ox) * c_out;
                    for ci in 0..c_in {
                        let kb = k_base + ci * c_out;
                        let mut acc = 0.0;
                        for co in 0..c_out {
                            let g = gd[out_base + co];
                            acc += g * kd[kb + co];
                            gkd[kb + co] += g * id[in_base + ci];
                        }
                        gid[in_base + ci] += acc;
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_k))
}

/// 2D spatial convolution: input `[x, y, f_in]`, kernels `[k, k, f_in, f_out]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let ks = kernels.shape();
    if ks.len() != 4 || ks[0] != ks[1] {
        return Err(FstcnError::shape("conv2d kernels", "[k, k, f_in, f_out]", format!("{ks:?}")));
    }
    conv_general(input, kernels, stride, padding)
}

/// Temporal-feature convolution: input `[t, f]`, kernels `[k_t, k_f, n_out]`.
/// Slides over the temporal and feature-channel axes.
pub fn conv1d_tf(input: &Tensor, kernels: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let is = input.shape();
    if is.len() != 2 {
        return Err(FstcnError::shape("conv1d_tf input", "[t, f]", format!("{is:?}")));
    }
    let ks = kernels.shape();
    if ks.len() != 3 {
        return Err(FstcnError::shape("conv1d_tf kernels", "[k_t, k_f, n_out]", format!("{ks:?}")));
    }
    let input3 = input.reshape(&[is[0], is[1], 1])?;
    let kernels4 = kernels.reshape(&[ks[0], ks[1], 1, ks[2]])?;
    conv_general(&input3, &kernels4, stride, padding)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient of ReLU; zero at the origin.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor { shape: input.shape.clone(), data }
}

/// Spatial max-pooling over `[x, y, f]` with a square window. No padding; the
/// window must fit inside the input.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (out, _) = maxpool2d_with_argmax(input, window, stride)?;
    Ok(out)
}

/// Max-pooling that also records the flat input offset of each window maximum
/// (first maximum wins), for gradient routing.
pub fn maxpool2d_with_argmax(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = expect3(input, "maxpool input")?;
    if window == 0 || stride == 0 {
        return Err(FstcnError::Invalid("pool window and stride must be >= 1".into()));
    }
    if window > h || window > w {
        return Err(FstcnError::Invalid(format!(
            "pool window {window} larger than input {h}x{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let mut argmax = vec![0usize; oh * ow * c];
    let id = input.data();
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_off = 0;
                for ky in 0..window {
                    for kx in 0..window {
                        let off = ((oy * stride + ky) * w + ox * stride + kx) * c + ch;
                        if id[off] > best {
                            best = id[off];
                            best_off = off;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out.data[o] = best;
                argmax[o] = best_off;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut grad_in = Tensor::zeros(input_shape);
    for (o, &src) in argmax.iter().enumerate() {
        grad_in.data[src] += grad_out.data[o];
    }
    grad_in
}

/// Local response normalization constants (cross-channel).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrnParams {
    pub k: f64,
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams { k: 2.0, n: 5, alpha: 5e-4, beta: 0.75 }
    }
}

/// Cross-channel LRN on `[x, y, f]`:
/// `b_c = a_c / (k + (alpha/n) * sum_{c' in window(c)} a_{c'}^2)^beta`,
/// with the window of `n` channels centred on `c` and clipped at the ends.
pub fn lrn(input: &Tensor, p: LrnParams) -> Result<Tensor> {
    let (h, w, c) = expect3(input, "lrn input")?;
    let half = p.n / 2;
    let coeff = p.alpha / p.n as f64;
    let mut out = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let lo = ch.saturating_sub(half);
                let hi = (ch + half).min(c - 1);
                let mut s = 0.0;
                for j in lo..=hi {
                    let v = input.at(&[y, x, j]);
                    s += v * v;
                }
                let denom = (p.k + coeff * s).powf(p.beta);
                out.set(&[y, x, ch], input.at(&[y, x, ch]) / denom);
            }
        }
    }
    Ok(out)
}

pub fn lrn_backward(input: &Tensor, p: LrnParams, grad_out: &Tensor) -> Result<Tensor> {
    let (h, w, c) = expect3(input, "lrn input")?;
    let half = p.n / 2;
    let coeff = p.alpha / p.n as f64;
    let mut grad_in = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            // scale factors per channel
            let mut scale = vec![0.0; c];
            for ch in 0..c {
                let lo = ch.saturating_sub(half);
                let hi = (ch + half).min(c - 1);
                let mut s = 0.0;
                for j in lo..=hi {
                    let v = input.at(&[y, x, j]);
                    s += v * v;
                }
                scale[ch] = p.k + coeff * s;
            }
            for ch in 0..c {
                // direct term
                let mut g = grad_out.at(&[y, x, ch]) * scale[ch].powf(-p.beta);
                // cross terms from every output whose window contains ch
                let a_j = input.at(&[y, x, ch]);
                let lo = ch.saturating_sub(half);
                let hi = (ch + half).min(c - 1);
                for i in lo..=hi {
                    // output i has ch in its window iff |i - ch| <= half, which
                    // the loop bounds already guarantee; respect i's own clip.
                    let a_i = input.at(&[y, x, i]);
                    g -= 2.0 * p.beta * coeff * a_j * a_i
                        * grad_out.at(&[y, x, i])
                        * scale[i].powf(-p.beta - 1.0);
                }
                grad_in.set(&[y, x, ch], g);
            }
        }
    }
    Ok(grad_in)
}

/// Numerically stable softmax over a vector.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 1 {
        return Err(FstcnError::shape("softmax", "[n]", format!("{:?}", input.shape())));
    }
    if !input.all_finite() {
        return Err(FstcnError::NonFinite("softmax input".into()));
    }
    let m = input.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = input.data.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(Tensor { shape: input.shape.clone(), data: exps.iter().map(|&e| e / z).collect() })
}

pub fn softmax_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    // grad_in_j = p_j * (g_j - sum_i g_i p_i)
    let dot: f64 = output.data.iter().zip(grad_out.data()).map(|(&p, &g)| p * g).sum();
    let data = output
        .data
        .iter()
        .zip(grad_out.data())
        .map(|(&p, &g)| p * (g - dot))
        .collect();
    Tensor { shape: output.shape.clone(), data }
}

/// Dropout mask with inverted scaling: kept entries carry `1/(1-prob)`,
/// dropped entries are zero. At inference dropout is the identity; callers
/// simply skip the op.
pub fn dropout_mask(shape: &[usize], prob: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&prob) {
        return Err(FstcnError::Invalid(format!("dropout prob {prob} outside [0,1)")));
    }
    let keep = 1.0 - prob;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < prob { 0.0 } else { 1.0 / keep })
        .collect();
    Ok(Tensor { shape: shape.to_vec(), data })
}

fn expect3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(FstcnError::shape(what, "rank-3 tensor", format!("{s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// Matrix-vector product `w [out, d] * x [d] -> [out]`.
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let ws = w.shape();
    if ws.len() != 2 || x.rank() != 1 || ws[1] != x.len() {
        return Err(FstcnError::shape(
            "matvec",
            format!("[out, {}] x [{}]", x.len(), x.len()),
            format!("{ws:?} x {:?}", x.shape()),
        ));
    }
    let (out, d) = (ws[0], ws[1]);
    let mut y = Tensor::zeros(&[out]);
    for o in 0..out {
        let mut acc = 0.0;
        let row = &w.data[o * d..(o + 1) * d];
        for (wv, xv) in row.iter().zip(x.data()) {
            acc += wv * xv;
        }
        y.data[o] = acc;
    }
    Ok(y)
}

pub fn matvec_backward(w: &Tensor, x: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let (out, d) = (w.shape[0], w.shape[1]);
    let mut grad_w = Tensor::zeros(&[out, d]);
    let mut grad_x = Tensor::zeros(&[d]);
    for o in 0..out {
        let g = grad_out.data[o];
        for i in 0..d {
            grad_w.data[o * d + i] += g * x.data[i];
            grad_x.data[i] += g * w.data[o * d + i];
        }
    }
    (grad_w, grad_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv2d_hand_example() {
        // [[1,2],[3,4]] * [[1,0],[0,1]] -> [[5]]
        let input = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let kernel = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = conv2d(&input, &kernel, 1, Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = Tensor::randn(&[4, 5, 3], 1.0, &mut rng);
        // 1x1 kernel mapping each channel to itself
        let kernel = Tensor::from_fn(&[1, 1, 3, 3], |i| if i[2] == i[3] { 1.0 } else { 0.0 });
        let out = conv2d(&input, &kernel, 1, Padding::Valid).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv2d_zero_input() {
        let input = Tensor::zeros(&[6, 6, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kernel = Tensor::randn(&[3, 3, 2, 4], 1.0, &mut rng);
        let out = conv2d(&input, &kernel, 1, Padding::Same).unwrap();
        assert_eq!(out.shape(), &[6, 6, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let input = Tensor::zeros(&[4, 4, 2]);
        let kernel = Tensor::zeros(&[3, 3, 3, 1]);
        let err = conv2d(&input, &kernel, 1, Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn conv1d_tf_hand_example() {
        // column [1,2,3], kernel [1,1] along t -> [3,5]
        let input = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let kernel = Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap();
        let out = conv1d_tf(&input, &kernel, 1, Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[2, 1, 1]);
        assert_eq!(out.data(), &[3.0, 5.0]);
    }

    #[test]
    fn conv1d_tf_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let kernel = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let out = conv1d_tf(&input, &kernel, 1, Padding::Valid).unwrap();
        assert_eq!(out.data(), input.data());

        let zeros = Tensor::zeros(&[5, 4]);
        let k = Tensor::randn(&[3, 3, 2], 1.0, &mut rng);
        let out = conv1d_tf(&zeros, &k, 1, Padding::Same).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_and_maxpool_examples() {
        let x = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);

        let input = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = maxpool2d(&input, 2, 2).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        let input = Tensor::zeros(&[2, 2, 1]);
        assert!(maxpool2d(&input, 3, 1).is_err());
    }

    #[test]
    fn softmax_symmetry_and_sum() {
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let p = softmax(&x).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x = Tensor::randn(&[7], 3.0, &mut rng);
            let p = softmax(&x).unwrap();
            assert!((p.sum() - 1.0).abs() < 1e-9);
            assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn lrn_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::randn(&[2, 2, 6], 1.0, &mut rng);
        let p = LrnParams::default();
        let out = lrn(&input, p).unwrap();
        // spot-check one entry against an independent evaluation
        let ch = 3usize;
        let window: Vec<f64> = (1..=5).map(|j| input.at(&[1, 0, j])).collect();
        let s: f64 = window.iter().map(|v| v * v).sum();
        let expected = input.at(&[1, 0, ch]) / (2.0 + (5e-4 / 5.0) * s).powf(0.75);
        assert!((out.at(&[1, 0, ch]) - expected).abs() < 1e-14);
    }

    #[test]
    fn dropout_mask_inverted_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mask = dropout_mask(&[10_000], 0.5, &mut rng).unwrap();
        let kept = mask.data().iter().filter(|&&v| v != 0.0).count();
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!((kept as f64 / 10_000.0 - 0.5).abs() < 0.05);
        assert!(dropout_mask(&[4], 1.0, &mut rng).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        // conv(aU + bV, K) == a conv(U,K) + b conv(V,K) within 1e-10
        #[test]
        fn conv_linearity(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = Tensor::randn(&[6, 6, 2], 1.0, &mut rng);
            let v = Tensor::randn(&[6, 6, 2], 1.0, &mut rng);
            let k = Tensor::randn(&[3, 3, 2, 2], 1.0, &mut rng);
            let lhs = conv2d(&u.scale(a).add(&v.scale(b)).unwrap(), &k, 1, Padding::Same).unwrap();
            let rhs = conv2d(&u, &k, 1, Padding::Same).unwrap().scale(a)
                .add(&conv2d(&v, &k, 1, Padding::Same).unwrap().scale(b)).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-10);
        }
    }
}
