//! Differentiable tensor operations. Each forward op has a matching
//! `*_backward` that maps the upstream gradient to input (and parameter)
//! gradients; composition is explicit in the callers. [`Op`] wraps the same
//! functions with recorded inputs for op-at-a-time use.

use super::Tensor;
use crate::error::{HoiError, Result};
use crate::par;
use crate::scalar::Scalar;

/// Convolution parameters: `kernel` is `[kh, kw, c_in, c_out]`, `bias` is
/// `[c_out]`. A fully-connected layer is the `1 x 1` case.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        kernel.expect_rank("ConvWeights", 4)?;
        let d = kernel.dims();
        if d[0] % 2 == 0 || d[1] % 2 == 0 {
            return Err(HoiError::InvalidArgument(format!(
                "kernel extents must be odd for same padding, got {}x{}",
                d[0], d[1]
            )));
        }
        if bias.dims() != [d[3]] {
            return Err(HoiError::shape("ConvWeights bias", bias.dims(), &d[3..]));
        }
        Ok(ConvWeights { kernel, bias })
    }

    pub fn zeros(kh: usize, kw: usize, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(Tensor::zeros([kh, kw, c_in, c_out])?, Tensor::zeros([c_out])?)
    }

    /// `(kh, kw, c_in, c_out)`
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let d = self.kernel.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn c_in(&self) -> usize {
        self.kernel.dims()[2]
    }

    pub fn c_out(&self) -> usize {
        self.kernel.dims()[3]
    }

    pub fn zeros_like(&self) -> Self {
        ConvWeights {
            kernel: self.kernel.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

/// Same-padded stride-1 cross-correlation plus bias.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    conv2d_strided(input, w, 1)
}

/// Output extent of a same-padded convolution with `stride`.
pub fn strided_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Same-padded cross-correlation; output cell `(oy, ox)` is centered on input
/// cell `(oy * stride, ox * stride)`.
pub fn conv2d_strided<T: Scalar>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (h, wd, ci) = input.hwc("conv2d")?;
    let (kh, kw, kci, co) = w.shape();
    if kci != ci {
        return Err(HoiError::shape("conv2d", input.dims(), w.kernel.dims()));
    }
    if stride == 0 {
        return Err(HoiError::InvalidArgument("conv2d: stride 0".into()));
    }
    let (oh, ow) = (strided_extent(h, stride), strided_extent(wd, stride));
    let (ph, pw) = (kh / 2, kw / 2);
    let x = input.data();
    let k = w.kernel.data();
    let b = w.bias.data();
    let mut out = vec![T::zero(); oh * ow * co];
    par::for_each_chunk(&mut out, ow * co, |oy, row| {
        for ox in 0..ow {
            let acc = &mut row[ox * co..(ox + 1) * co];
            acc.copy_from_slice(b);
            for dy in 0..kh {
                let iy = (oy * stride + dy) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let ix = (ox * stride + dx) as isize - pw as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let px = &x[(iy as usize * wd + ix as usize) * ci..][..ci];
                    let kbase = &k[(dy * kw + dx) * ci * co..][..ci * co];
                    for (c, &xv) in px.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let krow = &kbase[c * co..(c + 1) * co];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a = *a + xv * kv;
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts_unchecked(vec![oh, ow, co], out))
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvWeights<T>)> {
    let (h, wd, ci) = input.hwc("conv2d_backward")?;
    let (kh, kw, kci, co) = w.shape();
    if kci != ci {
        return Err(HoiError::shape(
            "conv2d_backward",
            input.dims(),
            w.kernel.dims(),
        ));
    }
    let (oh, ow) = (strided_extent(h, stride), strided_extent(wd, stride));
    if grad_out.dims() != [oh, ow, co] {
        return Err(HoiError::shape(
            "conv2d_backward grad",
            grad_out.dims(),
            &[oh, ow, co],
        ));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let x = input.data();
    let k = w.kernel.data();
    let g = grad_out.data();

    let mut gb = vec![T::zero(); co];
    for px in g.chunks_exact(co) {
        for (a, &v) in gb.iter_mut().zip(px) {
            *a = *a + v;
        }
    }

    let mut gk = vec![T::zero(); kh * kw * ci * co];
    par::for_each_chunk(&mut gk, ci * co, |tap, chunk| {
        let (dy, dx) = (tap / kw, tap % kw);
        for oy in 0..oh {
            let iy = (oy * stride + dy) as isize - ph as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ox in 0..ow {
                let ix = (ox * stride + dx) as isize - pw as isize;
                if ix < 0 || ix >= wd as isize {
                    continue;
                }
                let px = &x[(iy as usize * wd + ix as usize) * ci..][..ci];
                let gpx = &g[(oy * ow + ox) * co..][..co];
                for (c, &xv) in px.iter().enumerate() {
                    if xv == T::zero() {
                        continue;
                    }
                    let row = &mut chunk[c * co..(c + 1) * co];
                    for (a, &gv) in row.iter_mut().zip(gpx) {
                        *a = *a + xv * gv;
                    }
                }
            }
        }
    });

    let mut gx = vec![T::zero(); h * wd * ci];
    par::for_each_chunk(&mut gx, wd * ci, |iy, row| {
        for dy in 0..kh {
            let num = iy as isize + ph as isize - dy as isize;
            if num < 0 || num % stride as isize != 0 {
                continue;
            }
            let oy = (num / stride as isize) as usize;
            if oy >= oh {
                continue;
            }
            for ix in 0..wd {
                let out_px = &mut row[ix * ci..(ix + 1) * ci];
                for dx in 0..kw {
                    let num = ix as isize + pw as isize - dx as isize;
                    if num < 0 || num % stride as isize != 0 {
                        continue;
                    }
                    let ox = (num / stride as isize) as usize;
                    if ox >= ow {
                        continue;
                    }
                    let gpx = &g[(oy * ow + ox) * co..][..co];
                    let kbase = &k[(dy * kw + dx) * ci * co..][..ci * co];
                    for (c, a) in out_px.iter_mut().enumerate() {
                        let krow = &kbase[c * co..(c + 1) * co];
                        let mut s = T::zero();
                        for (&kv, &gv) in krow.iter().zip(gpx) {
                            s = s + kv * gv;
                        }
                        *a = *a + s;
                    }
                }
            }
        }
    });

    Ok((
        Tensor::from_parts_unchecked(input.dims().to_vec(), gx),
        ConvWeights {
            kernel: Tensor::from_parts_unchecked(w.kernel.dims().to_vec(), gk),
            bias: Tensor::from_parts_unchecked(vec![co], gb),
        },
    ))
}

/// Affine map of the flattened input through `[1, 1, n, m]` weights.
pub fn fully_connected<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    let (kh, kw, n, m) = w.shape();
    if kh != 1 || kw != 1 || input.len() != n {
        return Err(HoiError::shape(
            "fully_connected",
            input.dims(),
            w.kernel.dims(),
        ));
    }
    let k = w.kernel.data();
    let mut out = w.bias.data().to_vec();
    for (i, &xv) in input.data().iter().enumerate() {
        if xv == T::zero() {
            continue;
        }
        for (a, &kv) in out.iter_mut().zip(&k[i * m..(i + 1) * m]) {
            *a = *a + xv * kv;
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![m], out))
}

pub fn fully_connected_backward<T: Scalar>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvWeights<T>)> {
    let (_, _, n, m) = w.shape();
    if input.len() != n || grad_out.len() != m {
        return Err(HoiError::shape(
            "fully_connected_backward",
            input.dims(),
            w.kernel.dims(),
        ));
    }
    let k = w.kernel.data();
    let g = grad_out.data();
    let x = input.data();
    let gx: Vec<T> = (0..n)
        .map(|i| {
            k[i * m..(i + 1) * m]
                .iter()
                .zip(g)
                .fold(T::zero(), |s, (&kv, &gv)| s + kv * gv)
        })
        .collect();
    let mut gk = vec![T::zero(); n * m];
    par::for_each_chunk(&mut gk, m, |i, row| {
        let xv = x[i];
        for (a, &gv) in row.iter_mut().zip(g) {
            *a = xv * gv;
        }
    });
    Ok((
        Tensor::from_parts_unchecked(input.dims().to_vec(), gx),
        ConvWeights {
            kernel: Tensor::from_parts_unchecked(w.kernel.dims().to_vec(), gk),
            bias: Tensor::from_parts_unchecked(vec![m], g.to_vec()),
        },
    ))
}

/// Element offsets for iterating the axes in `axes` (inner) and the
/// remaining axes (outer).
fn axis_offsets(dims: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if axes.is_empty() {
        return Err(HoiError::InvalidArgument("softmax: empty axis set".into()));
    }
    let mut in_set = vec![false; dims.len()];
    for &a in axes {
        if a >= dims.len() || in_set[a] {
            return Err(HoiError::InvalidArgument(format!(
                "softmax: bad axis {a} for dims {dims:?}"
            )));
        }
        in_set[a] = true;
    }
    let mut strides = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let offsets = |select: bool| {
        let mut offs = vec![0usize];
        for (ax, &d) in dims.iter().enumerate() {
            if in_set[ax] != select {
                continue;
            }
            offs = offs
                .iter()
                .flat_map(|&o| {
                    let step = strides[ax];
                    (0..d).map(move |i| o + i * step)
                })
                .collect();
        }
        offs
    };
    Ok((offsets(true), offsets(false)))
}

/// Max-subtracted softmax over the joint extent of `axes`.
pub fn softmax<T: Scalar>(input: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let (inner, outer) = axis_offsets(input.dims(), axes)?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for &base in &outer {
        let max = inner
            .iter()
            .map(|&o| x[base + o])
            .fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &o in &inner {
            let e = (x[base + o] - max).exp();
            out[base + o] = e;
            sum = sum + e;
        }
        for &o in &inner {
            out[base + o] = out[base + o] / sum;
        }
    }
    Ok(Tensor::from_parts_unchecked(input.dims().to_vec(), out))
}

/// Gradient of softmax given its output `y`: `y * (g - sum(g * y))`.
pub fn softmax_backward<T: Scalar>(
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
    axes: &[usize],
) -> Result<Tensor<T>> {
    output.expect_same_dims("softmax_backward", grad_out)?;
    let (inner, outer) = axis_offsets(output.dims(), axes)?;
    let y = output.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); y.len()];
    for &base in &outer {
        let dot = inner
            .iter()
            .fold(T::zero(), |s, &o| s + y[base + o] * g[base + o]);
        for &o in &inner {
            gx[base + o] = y[base + o] * (g[base + o] - dot);
        }
    }
    Ok(Tensor::from_parts_unchecked(output.dims().to_vec(), gx))
}

/// NaN inputs stay NaN so numeric failures surface downstream.
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v < T::zero() { T::zero() } else { v })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.expect_same_dims("relu_backward", grad_out)?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts_unchecked(input.dims().to_vec(), data))
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Gradient of sigmoid given its output `y`: `g * y * (1 - y)`.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.expect_same_dims("sigmoid_backward", grad_out)?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    Ok(Tensor::from_parts_unchecked(output.dims().to_vec(), data))
}

/// `[h, w, c] -> [c]`, the spatial mean per channel.
pub fn global_average_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = input.hwc("global_average_pool")?;
    let mut acc = vec![T::zero(); c];
    for px in input.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a = *a + v;
        }
    }
    let n = T::from_f64((h * w) as f64);
    Ok(Tensor::from_parts_unchecked(
        vec![c],
        acc.into_iter().map(|v| v / n).collect(),
    ))
}

pub fn global_average_pool_backward<T: Scalar>(
    input_dims: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if input_dims.len() != 3 || grad_out.dims() != [input_dims[2]] {
        return Err(HoiError::shape(
            "global_average_pool_backward",
            input_dims,
            grad_out.dims(),
        ));
    }
    let n = T::from_f64((input_dims[0] * input_dims[1]) as f64);
    let per: Vec<T> = grad_out.data().iter().map(|&g| g / n).collect();
    let data = per
        .iter()
        .copied()
        .cycle()
        .take(input_dims.iter().product())
        .collect();
    Ok(Tensor::from_parts_unchecked(input_dims.to_vec(), data))
}

pub fn elementwise_mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_same_dims("elementwise_mul", b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_parts_unchecked(a.dims().to_vec(), data))
}

pub fn elementwise_mul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    a.expect_same_dims("elementwise_mul_backward", grad_out)?;
    Ok((elementwise_mul(grad_out, b)?, elementwise_mul(grad_out, a)?))
}

/// How a broadcast factor lines up with an `[h, w, c]` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    /// `[h, w]` (or `[h, w, 1]`): one scalar per spatial position.
    Spatial,
    /// `[c]`: one scalar per channel.
    Channel,
}

fn broadcast_kind(scale: &[usize], t: &[usize]) -> Result<Broadcast> {
    if t.len() == 3 {
        if scale == [t[0], t[1]] || scale == [t[0], t[1], 1] {
            return Ok(Broadcast::Spatial);
        }
        if scale == [t[2]] {
            return Ok(Broadcast::Channel);
        }
    }
    Err(HoiError::shape("broadcast_mul", scale, t))
}

/// Multiply an `[h, w, c]` tensor by an `[h, w]` map (per position) or a `[c]`
/// vector (per channel).
pub fn broadcast_mul<T: Scalar>(scale: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
    let kind = broadcast_kind(scale.dims(), t.dims())?;
    let c = t.dims()[2];
    let s = scale.data();
    let data = t
        .data()
        .chunks_exact(c)
        .enumerate()
        .flat_map(|(p, px)| {
            px.iter().enumerate().map(move |(ch, &v)| match kind {
                Broadcast::Spatial => v * s[p],
                Broadcast::Channel => v * s[ch],
            })
        })
        .collect();
    Ok(Tensor::from_parts_unchecked(t.dims().to_vec(), data))
}

/// Returns `(grad_scale, grad_t)`.
pub fn broadcast_mul_backward<T: Scalar>(
    scale: &Tensor<T>,
    t: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let kind = broadcast_kind(scale.dims(), t.dims())?;
    t.expect_same_dims("broadcast_mul_backward", grad_out)?;
    let gt = broadcast_mul(scale, grad_out)?;
    let c = t.dims()[2];
    let mut gs = vec![T::zero(); scale.len()];
    for (p, (px, gpx)) in t
        .data()
        .chunks_exact(c)
        .zip(grad_out.data().chunks_exact(c))
        .enumerate()
    {
        for (ch, (&v, &g)) in px.iter().zip(gpx).enumerate() {
            match kind {
                Broadcast::Spatial => gs[p] = gs[p] + v * g,
                Broadcast::Channel => gs[ch] = gs[ch] + v * g,
            }
        }
    }
    Ok((
        Tensor::from_parts_unchecked(scale.dims().to_vec(), gs),
        gt,
    ))
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| HoiError::InvalidArgument("concat: no inputs".into()))?;
    if axis >= first.rank() {
        return Err(HoiError::InvalidArgument(format!(
            "concat: axis {axis} out of range for rank {}",
            first.rank()
        )));
    }
    for p in parts {
        let same = p.rank() == first.rank()
            && p.dims()
                .iter()
                .zip(first.dims())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(HoiError::shape("concat", first.dims(), p.dims()));
        }
    }
    let outer: usize = first.dims()[..axis].iter().product();
    let inner: usize = first.dims()[axis + 1..].iter().product();
    let mut dims = first.dims().to_vec();
    dims[axis] = parts.iter().map(|p| p.dims()[axis]).sum();
    let mut data = Vec::with_capacity(dims.iter().product());
    for o in 0..outer {
        for p in parts {
            let span = p.dims()[axis] * inner;
            data.extend_from_slice(&p.data()[o * span..(o + 1) * span]);
        }
    }
    Ok(Tensor::from_parts_unchecked(dims, data))
}

/// Split the gradient of a concat back into pieces with extents `sizes` on `axis`.
pub fn concat_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    sizes: &[usize],
    axis: usize,
) -> Result<Vec<Tensor<T>>> {
    if axis >= grad_out.rank() || sizes.iter().sum::<usize>() != grad_out.dims()[axis] {
        return Err(HoiError::shape("concat_backward", grad_out.dims(), sizes));
    }
    let outer: usize = grad_out.dims()[..axis].iter().product();
    let inner: usize = grad_out.dims()[axis + 1..].iter().product();
    let total = grad_out.dims()[axis] * inner;
    let mut start = 0;
    let mut out = Vec::with_capacity(sizes.len());
    for &s in sizes {
        let span = s * inner;
        let mut data = Vec::with_capacity(outer * span);
        for o in 0..outer {
            data.extend_from_slice(&grad_out.data()[o * total + start..o * total + start + span]);
        }
        let mut dims = grad_out.dims().to_vec();
        dims[axis] = s;
        out.push(Tensor::new(dims, data)?);
        start += span;
    }
    Ok(out)
}

/// Spatial max pooling over `[h, w, c]`, windows clipped at the border.
/// Returns the pooled tensor and, per output element, the flat input index of
/// the first maximal element in scan order.
pub fn max_pool<T: Scalar>(
    input: &Tensor<T>,
    size: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (h, w, c) = input.hwc("max_pool")?;
    if size == 0 || stride == 0 {
        return Err(HoiError::InvalidArgument("max_pool: zero size/stride".into()));
    }
    let (oh, ow) = (strided_extent(h, stride), strided_extent(w, stride));
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut arg = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for iy in oy * stride..(oy * stride + size).min(h) {
                    for ix in ox * stride..(ox * stride + size).min(w) {
                        let idx = (iy * w + ix) * c + ch;
                        if x[idx] > best || best_idx == usize::MAX {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts_unchecked(vec![oh, ow, c], out), arg))
}

pub fn max_pool_backward<T: Scalar>(
    input_dims: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(HoiError::shape(
            "max_pool_backward",
            &[argmax.len()],
            grad_out.dims(),
        ));
    }
    let mut gx = Tensor::zeros(input_dims.to_vec())?;
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    Ok(gx)
}

/// Operation selector for [`Op`].
#[derive(Debug, Clone)]
pub enum OpKind<T> {
    Conv2d { weights: ConvWeights<T>, stride: usize },
    FullyConnected(ConvWeights<T>),
    Softmax(Vec<usize>),
    Relu,
    Sigmoid,
    GlobalAveragePool,
    ElementwiseMul,
    /// Inputs: `(scale, tensor)`.
    BroadcastMul,
    Concat(usize),
    MaxPool { size: usize, stride: usize },
}

impl<T> OpKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::FullyConnected(_) => "fully_connected",
            OpKind::Softmax(_) => "softmax",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::GlobalAveragePool => "global_average_pool",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::BroadcastMul => "broadcast_mul",
            OpKind::Concat(_) => "concat",
            OpKind::MaxPool { .. } => "max_pool",
        }
    }
}

/// Gradients returned by [`Op::backward`].
#[derive(Debug, Clone)]
pub struct OpGrads<T> {
    /// One gradient per forward input, in input order.
    pub inputs: Vec<Tensor<T>>,
    /// Parameter gradient for conv / fully-connected ops.
    pub params: Option<ConvWeights<T>>,
}

#[derive(Debug, Clone)]
struct Saved<T> {
    inputs: Vec<Tensor<T>>,
    output: Tensor<T>,
    argmax: Vec<usize>,
}

/// A single operation that records its forward inputs so `backward` can be
/// called afterwards.
#[derive(Debug, Clone)]
pub struct Op<T> {
    kind: OpKind<T>,
    saved: Option<Saved<T>>,
}

impl<T: Scalar> Op<T> {
    pub fn new(kind: OpKind<T>) -> Self {
        Op { kind, saved: None }
    }

    pub fn kind(&self) -> &OpKind<T> {
        &self.kind
    }

    pub fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let arity = match self.kind {
            OpKind::ElementwiseMul | OpKind::BroadcastMul => 2,
            OpKind::Concat(_) => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(HoiError::InvalidArgument(format!(
                "{} expects {arity} inputs, got {}",
                self.kind.name(),
                inputs.len()
            )));
        }
        let mut argmax = Vec::new();
        let output = match &self.kind {
            OpKind::Conv2d { weights, stride } => conv2d_strided(inputs[0], weights, *stride)?,
            OpKind::FullyConnected(w) => fully_connected(inputs[0], w)?,
            OpKind::Softmax(axes) => softmax(inputs[0], axes)?,
            OpKind::Relu => relu(inputs[0]),
            OpKind::Sigmoid => sigmoid(inputs[0]),
            OpKind::GlobalAveragePool => global_average_pool(inputs[0])?,
            OpKind::ElementwiseMul => elementwise_mul(inputs[0], inputs[1])?,
            OpKind::BroadcastMul => broadcast_mul(inputs[0], inputs[1])?,
            OpKind::Concat(axis) => concat(inputs, *axis)?,
            OpKind::MaxPool { size, stride } => {
                let (out, arg) = max_pool(inputs[0], *size, *stride)?;
                argmax = arg;
                out
            }
        };
        self.saved = Some(Saved {
            inputs: inputs.iter().map(|&t| t.clone()).collect(),
            output: output.clone(),
            argmax,
        });
        Ok(output)
    }

    pub fn backward(&self, upstream: &Tensor<T>) -> Result<OpGrads<T>> {
        let saved = self
            .saved
            .as_ref()
            .ok_or(HoiError::BackwardBeforeForward(self.kind.name()))?;
        saved.output.expect_same_dims("Op::backward", upstream)?;
        let x = &saved.inputs;
        let only = |g: Tensor<T>| OpGrads {
            inputs: vec![g],
            params: None,
        };
        Ok(match &self.kind {
            OpKind::Conv2d { weights, stride } => {
                let (gx, gw) = conv2d_backward(&x[0], weights, *stride, upstream)?;
                OpGrads {
                    inputs: vec![gx],
                    params: Some(gw),
                }
            }
            OpKind::FullyConnected(w) => {
                let (gx, gw) = fully_connected_backward(&x[0], w, upstream)?;
                OpGrads {
                    inputs: vec![gx],
                    params: Some(gw),
                }
            }
            OpKind::Softmax(axes) => only(softmax_backward(&saved.output, upstream, axes)?),
            OpKind::Relu => only(relu_backward(&x[0], upstream)?),
            OpKind::Sigmoid => only(sigmoid_backward(&saved.output, upstream)?),
            OpKind::GlobalAveragePool => {
                only(global_average_pool_backward(x[0].dims(), upstream)?)
            }
            OpKind::ElementwiseMul => {
                let (ga, gb) = elementwise_mul_backward(&x[0], &x[1], upstream)?;
                OpGrads {
                    inputs: vec![ga, gb],
                    params: None,
                }
            }
            OpKind::BroadcastMul => {
                let (gs, gt) = broadcast_mul_backward(&x[0], &x[1], upstream)?;
                OpGrads {
                    inputs: vec![gs, gt],
                    params: None,
                }
            }
            OpKind::Concat(axis) => {
                let sizes: Vec<usize> = x.iter().map(|t| t.dims()[*axis]).collect();
                OpGrads {
                    inputs: concat_backward(upstream, &sizes, *axis)?,
                    params: None,
                }
            }
            OpKind::MaxPool { .. } => {
                only(max_pool_backward(x[0].dims(), &saved.argmax, upstream)?)
            }
        })
    }
}
