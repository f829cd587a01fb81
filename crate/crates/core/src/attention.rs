//! Instance-conditioned contextual attention and its refinement.
//!
//! For one box with appearance vector `f_app` and the projected global map
//! `A` (`[h, w, D]`):
//!
//! * modulation: `attn = softmax_space(<f_app, A[p]>)`, `F_m[p] = attn[p] * A[p]`
//! * spatial refinement: `H = conv1x1(F_m)`, `S_att[p] = softmax_space(H)[p] * F_m[p]`
//! * channel refinement: `C_att = sigmoid(W_expand relu(W_reduce GAP(F_m)))`
//! * `F_r = S_att * C_att` (per channel), `f_r = GAP(F_r)`
//! * head: `sigmoid(FC2(relu(FC1([f_app, f_r]))))`

use crate::error::{HoiError, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::{self, ConvWeights};
use crate::tensor::Tensor;

const SPATIAL: [usize; 2] = [0, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    /// `1 x 1`, `D -> 1`.
    pub heatmap_conv: ConvWeights<T>,
    /// `D -> D/r`.
    pub se_reduce: ConvWeights<T>,
    /// `D/r -> D`.
    pub se_expand: ConvWeights<T>,
    /// `2D -> D_h`.
    pub head_fc1: ConvWeights<T>,
    /// `D_h -> n_actions`.
    pub head_fc2: ConvWeights<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn zeros(dim: usize, reduction: usize, hidden: usize, n_actions: usize) -> Result<Self> {
        if reduction == 0 || dim / reduction < 1 {
            return Err(HoiError::Config(format!(
                "SE reduction {reduction} leaves no channels for width {dim}"
            )));
        }
        let squeezed = dim / reduction;
        Ok(AttentionWeights {
            heatmap_conv: ConvWeights::zeros(1, 1, dim, 1)?,
            se_reduce: ConvWeights::zeros(1, 1, dim, squeezed)?,
            se_expand: ConvWeights::zeros(1, 1, squeezed, dim)?,
            head_fc1: ConvWeights::zeros(1, 1, 2 * dim, hidden)?,
            head_fc2: ConvWeights::zeros(1, 1, hidden, n_actions)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.heatmap_conv.c_in()
    }

    pub fn n_actions(&self) -> usize {
        self.head_fc2.c_out()
    }
}

/// Every intermediate of one attention pass, for inspection and export.
#[derive(Debug, Clone)]
pub struct AttentionTrace<T> {
    pub a: Tensor<T>,
    /// Spatial attention map `[h, w]` after softmax.
    pub attn_map: Tensor<T>,
    pub f_m: Tensor<T>,
    /// Normalized refinement heatmap `[h, w]`.
    pub h_norm: Tensor<T>,
    pub s_att: Tensor<T>,
    pub c_att: Tensor<T>,
    pub f_r: Tensor<T>,
    pub f_r_vec: Tensor<T>,
}

/// Project backbone features onto the attention width: `A = conv1x1(f)`.
pub fn project<T: Scalar>(features: &Tensor<T>, projection: &ConvWeights<T>) -> Result<Tensor<T>> {
    let (kh, kw, _, _) = projection.shape();
    if (kh, kw) != (1, 1) {
        return Err(HoiError::Config("projection must be a 1x1 convolution".into()));
    }
    ops::conv2d(features, projection)
}

/// Returns `(attn_map [h, w], F_m [h, w, D])`.
pub fn modulate<T: Scalar>(f_app: &Tensor<T>, a: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, d) = a.hwc("modulate")?;
    if f_app.dims() != [d] {
        return Err(HoiError::shape("modulate", f_app.dims(), a.dims()));
    }
    let v = f_app.data();
    let logits: Vec<T> = a
        .data()
        .chunks_exact(d)
        .map(|px| px.iter().zip(v).fold(T::zero(), |s, (&x, &y)| s + x * y))
        .collect();
    let logits = Tensor::from_parts_unchecked(vec![h, w], logits);
    let attn = ops::softmax(&logits, &SPATIAL)?;
    let f_m = ops::broadcast_mul(&attn, a)?;
    Ok((attn, f_m))
}

/// Returns `(grad f_app, grad A)`.
pub fn modulate_backward<T: Scalar>(
    f_app: &Tensor<T>,
    a: &Tensor<T>,
    attn: &Tensor<T>,
    grad_f_m: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = a.dims()[2];
    let (g_attn, mut g_a) = ops::broadcast_mul_backward(attn, a, grad_f_m)?;
    let g_logit = ops::softmax_backward(attn, &g_attn, &SPATIAL)?;
    let v = f_app.data();
    let mut g_v = vec![T::zero(); d];
    for ((px, gpx), &gl) in a
        .data()
        .chunks_exact(d)
        .zip(g_a.data_mut().chunks_exact_mut(d))
        .zip(g_logit.data())
    {
        for c in 0..d {
            gpx[c] = gpx[c] + gl * v[c];
            g_v[c] = g_v[c] + gl * px[c];
        }
    }
    Ok((Tensor::from_parts_unchecked(vec![d], g_v), g_a))
}

/// Returns `(H_norm [h, w], S_att [h, w, D])`.
pub fn spatial_refine<T: Scalar>(
    f_m: &Tensor<T>,
    heatmap_conv: &ConvWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, _) = f_m.hwc("spatial_refine")?;
    if heatmap_conv.c_out() != 1 || heatmap_conv.shape().0 != 1 || heatmap_conv.shape().1 != 1 {
        return Err(HoiError::Config("heatmap conv must be 1x1 with one output".into()));
    }
    let heat = ops::conv2d(f_m, heatmap_conv)?.reshape(vec![h, w])?;
    let h_norm = ops::softmax(&heat, &SPATIAL)?;
    let s_att = ops::broadcast_mul(&h_norm, f_m)?;
    Ok((h_norm, s_att))
}

/// Returns `(grad F_m, grad heatmap conv)`.
pub fn spatial_refine_backward<T: Scalar>(
    f_m: &Tensor<T>,
    heatmap_conv: &ConvWeights<T>,
    h_norm: &Tensor<T>,
    grad_s_att: &Tensor<T>,
) -> Result<(Tensor<T>, ConvWeights<T>)> {
    let (h, w, _) = f_m.hwc("spatial_refine_backward")?;
    let (g_hn, mut g_fm) = ops::broadcast_mul_backward(h_norm, f_m, grad_s_att)?;
    let g_heat = ops::softmax_backward(h_norm, &g_hn, &SPATIAL)?.reshape(vec![h, w, 1])?;
    let (g_fm2, g_conv) = ops::conv2d_backward(f_m, heatmap_conv, 1, &g_heat)?;
    g_fm.axpy(T::one(), &g_fm2)?;
    Ok((g_fm, g_conv))
}

#[derive(Debug, Clone)]
pub struct ChannelCache<T> {
    z: Tensor<T>,
    pub squeeze_pre: Tensor<T>,
    squeezed: Tensor<T>,
}

pub fn channel_refine<T: Scalar>(
    f_m: &Tensor<T>,
    se_reduce: &ConvWeights<T>,
    se_expand: &ConvWeights<T>,
) -> Result<(Tensor<T>, ChannelCache<T>)> {
    let z = ops::global_average_pool(f_m)?;
    let squeeze_pre = ops::fully_connected(&z, se_reduce)?;
    let squeezed = ops::relu(&squeeze_pre);
    let c_att = ops::sigmoid(&ops::fully_connected(&squeezed, se_expand)?);
    Ok((
        c_att,
        ChannelCache {
            z,
            squeeze_pre,
            squeezed,
        },
    ))
}

/// Returns `(grad F_m, grad se_reduce, grad se_expand)`.
pub fn channel_refine_backward<T: Scalar>(
    f_m_dims: &[usize],
    se_reduce: &ConvWeights<T>,
    se_expand: &ConvWeights<T>,
    c_att: &Tensor<T>,
    cache: &ChannelCache<T>,
    grad_c_att: &Tensor<T>,
) -> Result<(Tensor<T>, ConvWeights<T>, ConvWeights<T>)> {
    let g_pre = ops::sigmoid_backward(c_att, grad_c_att)?;
    let (g_sq, g_expand) = ops::fully_connected_backward(&cache.squeezed, se_expand, &g_pre)?;
    let g_sq_pre = ops::relu_backward(&cache.squeeze_pre, &g_sq)?;
    let (g_z, g_reduce) = ops::fully_connected_backward(&cache.z, se_reduce, &g_sq_pre)?;
    let g_fm = ops::global_average_pool_backward(f_m_dims, &g_z)?;
    Ok((g_fm, g_reduce, g_expand))
}

#[derive(Debug, Clone)]
pub struct RefineCache<T> {
    pub channel: ChannelCache<T>,
}

/// Spatial and channel refinement of `F_m`: `F_r = S_att * C_att` and its
/// pooled vector `f_r`.
pub fn refine<T: Scalar>(
    f_m: &Tensor<T>,
    w: &AttentionWeights<T>,
) -> Result<(Refined<T>, RefineCache<T>)> {
    let (h_norm, s_att) = spatial_refine(f_m, &w.heatmap_conv)?;
    let (c_att, channel) = channel_refine(f_m, &w.se_reduce, &w.se_expand)?;
    let f_r = ops::broadcast_mul(&c_att, &s_att)?;
    let f_r_vec = ops::global_average_pool(&f_r)?;
    Ok((
        Refined {
            h_norm,
            s_att,
            c_att,
            f_r,
            f_r_vec,
        },
        RefineCache { channel },
    ))
}

#[derive(Debug, Clone)]
pub struct Refined<T> {
    pub h_norm: Tensor<T>,
    pub s_att: Tensor<T>,
    pub c_att: Tensor<T>,
    pub f_r: Tensor<T>,
    pub f_r_vec: Tensor<T>,
}

/// Backprop `grad f_r` (the pooled vector) to `grad F_m`, accumulating weight
/// gradients into `grads`.
pub fn refine_backward<T: Scalar>(
    f_m: &Tensor<T>,
    w: &AttentionWeights<T>,
    refined: &Refined<T>,
    cache: &RefineCache<T>,
    grad_f_r_vec: &Tensor<T>,
    grads: &mut AttentionWeights<T>,
) -> Result<Tensor<T>> {
    let g_fr = ops::global_average_pool_backward(refined.f_r.dims(), grad_f_r_vec)?;
    let (g_c, g_s) = ops::broadcast_mul_backward(&refined.c_att, &refined.s_att, &g_fr)?;
    let (mut g_fm, g_heat) =
        spatial_refine_backward(f_m, &w.heatmap_conv, &refined.h_norm, &g_s)?;
    let (g_fm2, g_reduce, g_expand) = channel_refine_backward(
        f_m.dims(),
        &w.se_reduce,
        &w.se_expand,
        &refined.c_att,
        &cache.channel,
        &g_c,
    )?;
    g_fm.axpy(T::one(), &g_fm2)?;
    add_conv(&mut grads.heatmap_conv, &g_heat)?;
    add_conv(&mut grads.se_reduce, &g_reduce)?;
    add_conv(&mut grads.se_expand, &g_expand)?;
    Ok(g_fm)
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    x: Tensor<T>,
    pub hidden_pre: Tensor<T>,
    hidden: Tensor<T>,
}

/// Independent per-action probabilities from `[f_app, f_r]`.
pub fn action_head<T: Scalar>(
    f_app: &Tensor<T>,
    f_r: &Tensor<T>,
    w: &AttentionWeights<T>,
) -> Result<(Tensor<T>, HeadCache<T>)> {
    let x = ops::concat(&[f_app, f_r], 0)?;
    let hidden_pre = ops::fully_connected(&x, &w.head_fc1)?;
    let hidden = ops::relu(&hidden_pre);
    let scores = ops::sigmoid(&ops::fully_connected(&hidden, &w.head_fc2)?);
    Ok((scores, HeadCache { x, hidden_pre, hidden }))
}

/// Returns `(grad f_app, grad f_r)`; weight gradients accumulate into `grads`.
pub fn action_head_backward<T: Scalar>(
    w: &AttentionWeights<T>,
    scores: &Tensor<T>,
    cache: &HeadCache<T>,
    grad_scores: &Tensor<T>,
    grads: &mut AttentionWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g_out = ops::sigmoid_backward(scores, grad_scores)?;
    let (g_hidden, g_fc2) = ops::fully_connected_backward(&cache.hidden, &w.head_fc2, &g_out)?;
    let g_pre = ops::relu_backward(&cache.hidden_pre, &g_hidden)?;
    let (g_x, g_fc1) = ops::fully_connected_backward(&cache.x, &w.head_fc1, &g_pre)?;
    add_conv(&mut grads.head_fc1, &g_fc1)?;
    add_conv(&mut grads.head_fc2, &g_fc2)?;
    let d = cache.x.len() / 2;
    let mut parts = ops::concat_backward(&g_x, &[d, d], 0)?;
    let g_fr = parts.pop().expect("two parts");
    let g_fapp = parts.pop().expect("two parts");
    Ok((g_fapp, g_fr))
}

/// Caches for the whole attention chain of one box.
#[derive(Debug, Clone)]
pub struct AttendCache<T> {
    pub refine: RefineCache<T>,
    pub head: HeadCache<T>,
}

/// Full chain from `(f_app, A)` to action scores.
pub fn attend<T: Scalar>(
    f_app: &Tensor<T>,
    a: &Tensor<T>,
    w: &AttentionWeights<T>,
) -> Result<(Tensor<T>, AttentionTrace<T>, AttendCache<T>)> {
    let (attn_map, f_m) = modulate(f_app, a)?;
    let (refined, refine_cache) = refine(&f_m, w)?;
    let (scores, head) = action_head(f_app, &refined.f_r_vec, w)?;
    let trace = AttentionTrace {
        a: a.clone(),
        attn_map,
        f_m,
        h_norm: refined.h_norm,
        s_att: refined.s_att,
        c_att: refined.c_att,
        f_r: refined.f_r,
        f_r_vec: refined.f_r_vec,
    };
    Ok((
        scores,
        trace,
        AttendCache {
            refine: refine_cache,
            head,
        },
    ))
}

/// Returns `(grad f_app, grad A)`; weight gradients accumulate into `grads`.
pub fn attend_backward<T: Scalar>(
    f_app: &Tensor<T>,
    w: &AttentionWeights<T>,
    scores: &Tensor<T>,
    trace: &AttentionTrace<T>,
    cache: &AttendCache<T>,
    grad_scores: &Tensor<T>,
    grads: &mut AttentionWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (mut g_fapp, g_frv) = action_head_backward(w, scores, &cache.head, grad_scores, grads)?;
    let refined = Refined {
        h_norm: trace.h_norm.clone(),
        s_att: trace.s_att.clone(),
        c_att: trace.c_att.clone(),
        f_r: trace.f_r.clone(),
        f_r_vec: trace.f_r_vec.clone(),
    };
    let g_fm = refine_backward(&trace.f_m, w, &refined, &cache.refine, &g_frv, grads)?;
    let (g_fapp2, g_a) = modulate_backward(f_app, &trace.a, &trace.attn_map, &g_fm)?;
    g_fapp.axpy(T::one(), &g_fapp2)?;
    Ok((g_fapp, g_a))
}

pub(crate) fn add_conv<T: Scalar>(into: &mut ConvWeights<T>, g: &ConvWeights<T>) -> Result<()> {
    into.kernel.axpy(T::one(), &g.kernel)?;
    into.bias.axpy(T::one(), &g.bias)
}
