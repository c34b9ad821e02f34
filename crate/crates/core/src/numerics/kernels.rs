//! Forward kernels and their vector-Jacobian products.
//!
//! All image kernels work on a single `[C, H, W]` sample. Convolution is
//! lowered to one GEMM through an im2col buffer.

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Output length of a strided, padded window sweep. Errors unless the sweep
/// lands exactly on the far edge.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("stride must be at least 1"));
    }
    let span = input + 2 * padding;
    if span < kernel || !(span - kernel).is_multiple_of(stride) {
        return Err(Error::shape(format!(
            "window {kernel} with stride {stride} and padding {padding} does not tile length {input}"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<(Self, usize)> {
        let (c_in, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape(format!("conv2d input must be [C,H,W], got {input:?}"))),
        };
        let (c_out, wc, kh, kw) = match *weight {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d weight must be [C_out,C_in,kh,kw], got {weight:?}"
                )))
            }
        };
        if wc != c_in {
            return Err(Error::shape(format!(
                "conv2d weight expects {wc} input channels, input has {c_in}"
            )));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape(format!(
                "conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}"
            )));
        }
        let h_out = conv_output_size(h, kh, stride, padding)?;
        let w_out = conv_output_size(w, kw, stride, padding)?;
        Ok((
            Self {
                c_in,
                h,
                w,
                kh,
                kw,
                h_out,
                w_out,
                stride,
                padding,
            },
            c_out,
        ))
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.stride == 1 && self.padding == 0
    }

    /// Source column for output column `ox` at kernel tap `kj`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let out_len = self.out_len();
        let mut cols = vec![T::zero(); self.patch_len() * out_len];
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * out_len..(row + 1) * out_len];
                    for oy in 0..self.h_out {
                        let Some(iy) = self.src(oy, ki, self.h) else { continue };
                        let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                        let dst_row = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            if let Some(ix) = self.src(ox, kj, self.w) {
                                *d = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let out_len = self.out_len();
        let mut x = vec![T::zero(); self.c_in * self.h * self.w];
        for c in 0..self.c_in {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * out_len..(row + 1) * out_len];
                    for oy in 0..self.h_out {
                        let Some(iy) = self.src(oy, ki, self.h) else { continue };
                        let src_row = &src[oy * self.w_out..(oy + 1) * self.w_out];
                        for (ox, &g) in src_row.iter().enumerate() {
                            if let Some(ix) = self.src(ox, kj, self.w) {
                                plane[iy * self.w + ix] += g;
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// 2-D cross-correlation of one `[C_in, H, W]` sample.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (geo, c_out) = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv2d bias must be [{c_out}], got {:?}",
            bias.shape()
        )));
    }
    let out_len = geo.out_len();
    let mut out = vec![T::zero(); c_out * out_len];
    for (row, &b) in out.chunks_mut(out_len).zip(bias.data()) {
        row.fill(b);
    }
    let cols;
    let rhs = if geo.is_pointwise() {
        input.data()
    } else {
        cols = geo.im2col(input.data());
        &cols
    };
    T::gemm(
        c_out,
        geo.patch_len(),
        out_len,
        weight.data(),
        false,
        rhs,
        false,
        T::one(),
        &mut out,
    );
    Tensor::new(vec![c_out, geo.h_out, geo.w_out], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (geo, c_out) = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let out_len = geo.out_len();
    let g = grad_out.data();

    let bias: Vec<T> = g.chunks(out_len).map(|row| row.iter().copied().sum()).collect();

    let cols;
    let patches = if geo.is_pointwise() {
        input.data()
    } else {
        cols = geo.im2col(input.data());
        &cols
    };
    let mut dw = vec![T::zero(); c_out * geo.patch_len()];
    // dW = dY · colsᵀ
    T::gemm(
        c_out,
        out_len,
        geo.patch_len(),
        g,
        false,
        patches,
        true,
        T::zero(),
        &mut dw,
    );

    let input_grad = if need_input_grad {
        let mut dcols = vec![T::zero(); geo.patch_len() * out_len];
        // dcols = Wᵀ · dY
        T::gemm(
            geo.patch_len(),
            c_out,
            out_len,
            weight.data(),
            true,
            g,
            false,
            T::zero(),
            &mut dcols,
        );
        let dx = if geo.is_pointwise() { dcols } else { geo.col2im(&dcols) };
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: input_grad,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![c_out], bias)?,
    })
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of relu given its output. The subgradient at 0 is 0.
pub(crate) fn relu_backward<T: Real>(output: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(output.shape().to_vec(), data).expect("same shape")
}

/// Windowed maximum. Also returns, per output cell, the flat input index that
/// won (lowest index on ties), which is where the gradient is routed.
pub(crate) fn maxpool2d_with_argmax<T: Real>(
    input: &Tensor<T>,
    size: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.dims3()?;
    if size == 0 || stride == 0 || h % stride != 0 || w % stride != 0 || size > h || size > w {
        return Err(Error::shape(format!(
            "maxpool {size}/{stride} cannot tile a {h}x{w} map"
        )));
    }
    let h_out = (h - size) / stride + 1;
    let w_out = (w - size) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * h_out * w_out);
    let mut argmax = Vec::with_capacity(c * h_out * w_out);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, h_out, w_out], out)?, argmax))
}

pub fn maxpool2d<T: Real>(input: &Tensor<T>, size: usize, stride: usize) -> Result<Tensor<T>> {
    maxpool2d_with_argmax(input, size, stride).map(|(t, _)| t)
}

pub(crate) fn maxpool2d_backward<T: Real>(input_shape: &[usize], argmax: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad.data()) {
        d[idx] += g;
    }
    dx
}

/// Interpolation taps along one axis for half-pixel (align-corners=false)
/// sampling: `(lo, hi, weight_of_hi)`.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of a `[C, H, W]` map with align-corners=false.
pub fn bilinear_resize<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear output size must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            let ly = T::of(ly);
            let hy = T::one() - ly;
            for &(x0, x1, lx) in &tx {
                let lx = T::of(lx);
                let hx = T::one() - lx;
                let top = hx * plane[y0 * w + x0] + lx * plane[y0 * w + x1];
                let bottom = hx * plane[y1 * w + x0] + lx * plane[y1 * w + x1];
                out.push(hy * top + ly * bottom);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub(crate) fn bilinear_resize_backward<T: Real>(grad: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (c, out_h, out_w) = grad.dims3()?;
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(grad.clone());
    }
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let g = grad.data();
    let mut dx = vec![T::zero(); c * in_h * in_w];
    for ch in 0..c {
        let plane = &mut dx[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        let gplane = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            let hy = T::one() - ly;
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let hx = T::one() - lx;
                let v = gplane[oy * out_w + ox];
                plane[y0 * in_w + x0] += hy * hx * v;
                plane[y0 * in_w + x1] += hy * lx * v;
                plane[y1 * in_w + x0] += ly * hx * v;
                plane[y1 * in_w + x1] += ly * lx * v;
            }
        }
    }
    Tensor::new(vec![c, in_h, in_w], dx)
}

/// Per-pixel softmax across the leading (class) axis of a `[J, H, W]` map.
pub fn softmax_over_classes<T: Real>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    let (j, h, w) = scores.dims3()?;
    if j < 2 {
        return Err(Error::shape(format!("softmax needs at least 2 classes, got {j}")));
    }
    let plane = h * w;
    let s = scores.data();
    let mut out = vec![T::zero(); s.len()];
    for p in 0..plane {
        let max = (0..j).map(|c| s[c * plane + p]).fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for c in 0..j {
            let e = (s[c * plane + p] - max).exp();
            out[c * plane + p] = e;
            total += e;
        }
        for c in 0..j {
            out[c * plane + p] /= total;
        }
    }
    Tensor::new(scores.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<T: Real>(probs: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (j, h, w) = probs.dims3()?;
    let plane = h * w;
    let p = probs.data();
    let g = grad.data();
    let mut dx = vec![T::zero(); p.len()];
    for px in 0..plane {
        let dot: T = (0..j).map(|c| p[c * plane + px] * g[c * plane + px]).sum();
        for c in 0..j {
            let i = c * plane + px;
            dx[i] = p[i] * (g[i] - dot);
        }
    }
    Tensor::new(probs.shape().to_vec(), dx)
}

/// Source index picked by nearest-neighbour resampling from `in_len` to
/// `out_len` samples: the source pixel containing the destination pixel's
/// centre.
pub fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    let src = ((2 * dst + 1) * in_len) / (2 * out_len);
    src.min(in_len - 1)
}

/// Scaled cosine similarity between every feature cell of `features: [D, H, W]`
/// and each prototype `[D]`, giving `[J, H, W]` scores. `eps` is added to
/// each norm.
pub(crate) fn cosine_scores<T: Real>(
    features: &Tensor<T>,
    prototypes: &[&Tensor<T>],
    alpha: T,
    eps: T,
) -> Result<Tensor<T>> {
    let (d, h, w) = features.dims3()?;
    let protos = stack_prototypes(prototypes, d)?;
    let j = prototypes.len();
    let plane = h * w;
    let mut dots = vec![T::zero(); j * plane];
    T::gemm(
        j,
        d,
        plane,
        &protos,
        false,
        features.data(),
        false,
        T::zero(),
        &mut dots,
    );
    let fnorm = cell_norms(features.data(), d, plane);
    let pnorm: Vec<T> = protos.chunks(d).map(norm).collect();
    for (jj, row) in dots.chunks_mut(plane).enumerate() {
        for (p, v) in row.iter_mut().enumerate() {
            *v = alpha * *v / ((fnorm[p] + eps) * (pnorm[jj] + eps));
        }
    }
    Tensor::new(vec![j, h, w], dots)
}

pub(crate) fn cosine_scores_backward<T: Real>(
    features: &Tensor<T>,
    prototypes: &[&Tensor<T>],
    alpha: T,
    eps: T,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let (d, h, w) = features.dims3()?;
    let protos = stack_prototypes(prototypes, d)?;
    let j = prototypes.len();
    let plane = h * w;
    let f = features.data();
    let mut dots = vec![T::zero(); j * plane];
    T::gemm(j, d, plane, &protos, false, f, false, T::zero(), &mut dots);
    let fnorm = cell_norms(f, d, plane);
    let pnorm: Vec<T> = protos.chunks(d).map(norm).collect();

    // coef[j,p] = alpha * g[j,p] / ((|f_p|+eps)(|P_j|+eps))
    let g = grad.data();
    let mut coef = vec![T::zero(); j * plane];
    for jj in 0..j {
        for p in 0..plane {
            coef[jj * plane + p] = alpha * g[jj * plane + p] / ((fnorm[p] + eps) * (pnorm[jj] + eps));
        }
    }

    let mut df = vec![T::zero(); d * plane];
    T::gemm(d, j, plane, &protos, true, &coef, false, T::zero(), &mut df);
    for p in 0..plane {
        if fnorm[p] == T::zero() {
            continue;
        }
        let r: T =
            (0..j).map(|jj| coef[jj * plane + p] * dots[jj * plane + p]).sum::<T>() / ((fnorm[p] + eps) * fnorm[p]);
        for dd in 0..d {
            df[dd * plane + p] -= r * f[dd * plane + p];
        }
    }

    let mut dp = vec![T::zero(); j * d];
    T::gemm(j, plane, d, &coef, false, f, true, T::zero(), &mut dp);
    for jj in 0..j {
        if pnorm[jj] == T::zero() {
            continue;
        }
        let q: T = (0..plane)
            .map(|p| coef[jj * plane + p] * dots[jj * plane + p])
            .sum::<T>()
            / ((pnorm[jj] + eps) * pnorm[jj]);
        for dd in 0..d {
            dp[jj * d + dd] -= q * protos[jj * d + dd];
        }
    }
    let dprotos = dp
        .chunks(d)
        .map(|c| Tensor::new(vec![d], c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::new(vec![d, h, w], df)?, dprotos))
}

fn stack_prototypes<T: Real>(prototypes: &[&Tensor<T>], d: usize) -> Result<Vec<T>> {
    if prototypes.is_empty() {
        return Err(Error::shape("at least one prototype is required"));
    }
    let mut out = Vec::with_capacity(prototypes.len() * d);
    for p in prototypes {
        if p.len() != d {
            return Err(Error::shape(format!(
                "prototype has {} dims, feature map has {d} channels",
                p.len()
            )));
        }
        out.extend_from_slice(p.data());
    }
    Ok(out)
}

fn cell_norms<T: Real>(f: &[T], d: usize, plane: usize) -> Vec<T> {
    let mut sq = vec![T::zero(); plane];
    for row in f.chunks(plane).take(d) {
        for (s, &v) in sq.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    sq.into_iter().map(T::sqrt).collect()
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}
