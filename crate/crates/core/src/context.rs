//! Context-aware appearance features: a factorized large-kernel context
//! aggregation block followed by position-sensitive ROI align with max
//! pooling and a fully-connected projection.

use crate::error::{HoiError, Result};
use crate::features::{BBox, InstanceKind};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::ops::{self, ConvWeights};
use crate::tensor::Tensor;

/// Two factorized branches approximating a `k x k` kernel:
/// branch A is `[k, 1]` then `[1, k]`, branch B is `[1, k]` then `[k, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextAggWeights<T> {
    pub a_vertical: ConvWeights<T>,
    pub a_horizontal: ConvWeights<T>,
    pub b_horizontal: ConvWeights<T>,
    pub b_vertical: ConvWeights<T>,
}

impl<T: Scalar> ContextAggWeights<T> {
    pub fn zeros(k: usize, c_in: usize, c_mid: usize, c_out: usize) -> Result<Self> {
        Ok(ContextAggWeights {
            a_vertical: ConvWeights::zeros(k, 1, c_in, c_mid)?,
            a_horizontal: ConvWeights::zeros(1, k, c_mid, c_out)?,
            b_horizontal: ConvWeights::zeros(1, k, c_in, c_mid)?,
            b_vertical: ConvWeights::zeros(k, 1, c_mid, c_out)?,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.a_vertical.shape().0
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kernel_size();
        let (av, ah, bh, bv) = (
            self.a_vertical.shape(),
            self.a_horizontal.shape(),
            self.b_horizontal.shape(),
            self.b_vertical.shape(),
        );
        let ok = (av.0, av.1) == (k, 1)
            && (ah.0, ah.1) == (1, k)
            && (bh.0, bh.1) == (1, k)
            && (bv.0, bv.1) == (k, 1)
            && av.3 == ah.2
            && bh.3 == bv.2
            && av.2 == bh.2
            && ah.3 == bv.3;
        if !ok {
            return Err(HoiError::Config(format!(
                "context aggregation branches disagree: {av:?} {ah:?} {bh:?} {bv:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContextAggCache<T> {
    a_mid: Tensor<T>,
    b_mid: Tensor<T>,
}

pub fn context_aggregate<T: Scalar>(
    features: &Tensor<T>,
    w: &ContextAggWeights<T>,
) -> Result<Tensor<T>> {
    Ok(context_aggregate_cached(features, w)?.0)
}

/// Sum of both factorized branches; linear, no activation inside the block.
pub fn context_aggregate_cached<T: Scalar>(
    features: &Tensor<T>,
    w: &ContextAggWeights<T>,
) -> Result<(Tensor<T>, ContextAggCache<T>)> {
    w.validate()?;
    let a_mid = ops::conv2d(features, &w.a_vertical)?;
    let mut out = ops::conv2d(&a_mid, &w.a_horizontal)?;
    let b_mid = ops::conv2d(features, &w.b_horizontal)?;
    out.axpy(T::one(), &ops::conv2d(&b_mid, &w.b_vertical)?)?;
    Ok((out, ContextAggCache { a_mid, b_mid }))
}

pub fn context_aggregate_backward<T: Scalar>(
    features: &Tensor<T>,
    w: &ContextAggWeights<T>,
    cache: &ContextAggCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ContextAggWeights<T>)> {
    let (g_amid, g_ah) = ops::conv2d_backward(&cache.a_mid, &w.a_horizontal, 1, grad_out)?;
    let (mut g_x, g_av) = ops::conv2d_backward(features, &w.a_vertical, 1, &g_amid)?;
    let (g_bmid, g_bv) = ops::conv2d_backward(&cache.b_mid, &w.b_vertical, 1, grad_out)?;
    let (g_xb, g_bh) = ops::conv2d_backward(features, &w.b_horizontal, 1, &g_bmid)?;
    g_x.axpy(T::one(), &g_xb)?;
    Ok((
        g_x,
        ContextAggWeights {
            a_vertical: g_av,
            a_horizontal: g_ah,
            b_horizontal: g_bh,
            b_vertical: g_bv,
        },
    ))
}

/// Grid layout for position-sensitive ROI align.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiGrid {
    /// Cells per side.
    pub grid: usize,
    /// Bilinear sample points per axis inside each cell.
    pub samples: usize,
}

/// Four bilinear taps `(flat index, weight)` of the winning sample.
type Taps<T> = [(usize, T); 4];

#[derive(Debug, Clone)]
pub struct PsRoiCache<T> {
    input_dims: Vec<usize>,
    taps: Vec<Taps<T>>,
    /// Winning sample index per output element.
    pub argmax: Vec<usize>,
}

/// Clamp a feature-space box to `[0, w] x [0, h]`; boxes covering less than
/// one feature cell afterwards are rejected.
pub fn clamp_roi(roi: &BBox, h: usize, w: usize) -> Result<BBox> {
    let (hf, wf) = (h as f64, w as f64);
    let c = BBox {
        x1: roi.x1.clamp(0.0, wf),
        y1: roi.y1.clamp(0.0, hf),
        x2: roi.x2.clamp(0.0, wf),
        y2: roi.y2.clamp(0.0, hf),
    };
    let (bw, bh) = (c.x2 - c.x1, c.y2 - c.y1);
    if !(bw > 0.0 && bh > 0.0) || bw * bh < 1.0 {
        return Err(HoiError::DegenerateRoi {
            x1: c.x1,
            y1: c.y1,
            x2: c.x2,
            y2: c.y2,
        });
    }
    Ok(c)
}

/// Bilinear taps at continuous position `(y, x)`, where cell `(i, j)` spans
/// `[i, i+1) x [j, j+1)` and its value sits at the cell center. Positions
/// within half a cell of the border replicate the edge.
fn bilinear_taps<T: Scalar>(y: f64, x: f64, h: usize, w: usize) -> [(usize, usize, T); 4] {
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = (fy - y0 as f64, fx - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    [
        (y0, x0, T::from_f64(hy * hx)),
        (y0, x1, T::from_f64(hy * lx)),
        (y1, x0, T::from_f64(ly * hx)),
        (y1, x1, T::from_f64(ly * lx)),
    ]
}

/// Position-sensitive ROI align with max pooling.
///
/// `score_maps` is `[h, w, G*G*E]`, `roi` is in feature coordinates. Grid cell
/// `(i, j)` reads only channels `(i*G + j)*E .. (i*G + j + 1)*E` and outputs the
/// max over `S x S` bilinear samples. Output is `[G, G, E]`.
pub fn ps_roi_align<T: Scalar>(
    score_maps: &Tensor<T>,
    roi: &BBox,
    grid: RoiGrid,
) -> Result<(Tensor<T>, PsRoiCache<T>)> {
    let (h, w, c) = score_maps.hwc("ps_roi_align")?;
    let g = grid.grid;
    if g == 0 || grid.samples == 0 {
        return Err(HoiError::InvalidArgument(
            "ps_roi_align: grid and samples must be >= 1".into(),
        ));
    }
    if c % (g * g) != 0 {
        return Err(HoiError::shape("ps_roi_align", &[c], &[g * g]));
    }
    let e = c / (g * g);
    let roi = clamp_roi(roi, h, w)?;
    let s = grid.samples;
    let (cell_h, cell_w) = (roi.height() / g as f64, roi.width() / g as f64);
    let x = score_maps.data();

    let cells: Vec<(Vec<T>, Vec<Taps<T>>, Vec<usize>)> = par::map_range(g * g, |cell| {
        let (gi, gj) = (cell / g, cell % g);
        let mut best = vec![T::neg_infinity(); e];
        let mut taps = vec![[(0usize, T::zero()); 4]; e];
        let mut arg = vec![usize::MAX; e];
        for sy in 0..s {
            let y = roi.y1 + gi as f64 * cell_h + (sy as f64 + 0.5) * cell_h / s as f64;
            for sx in 0..s {
                let xx = roi.x1 + gj as f64 * cell_w + (sx as f64 + 0.5) * cell_w / s as f64;
                let t = bilinear_taps::<T>(y, xx, h, w);
                let flat = t.map(|(ty, tx, wt)| ((ty * w + tx) * c + cell * e, wt));
                for ch in 0..e {
                    let v = flat
                        .iter()
                        .fold(T::zero(), |acc, &(i, wt)| acc + wt * x[i + ch]);
                    if arg[ch] == usize::MAX || v > best[ch] {
                        best[ch] = v;
                        arg[ch] = sy * s + sx;
                        taps[ch] = flat.map(|(i, wt)| (i + ch, wt));
                    }
                }
            }
        }
        (best, taps, arg)
    });

    let mut out = Vec::with_capacity(g * g * e);
    let mut taps = Vec::with_capacity(g * g * e);
    let mut argmax = Vec::with_capacity(g * g * e);
    for (v, t, a) in cells {
        out.extend(v);
        taps.extend(t);
        argmax.extend(a);
    }
    Ok((
        Tensor::from_parts_unchecked(vec![g, g, e], out),
        PsRoiCache {
            input_dims: score_maps.dims().to_vec(),
            taps,
            argmax,
        },
    ))
}

/// Gradient w.r.t. the score maps; only the winning sample's bilinear taps
/// receive gradient.
pub fn ps_roi_align_backward<T: Scalar>(
    cache: &PsRoiCache<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Tensor::zeros(cache.input_dims.clone())?;
    ps_roi_align_accumulate(cache, grad_out, &mut g)?;
    Ok(g)
}

/// Add this ROI's gradient into an existing score-map gradient.
pub fn ps_roi_align_accumulate<T: Scalar>(
    cache: &PsRoiCache<T>,
    grad_out: &Tensor<T>,
    into: &mut Tensor<T>,
) -> Result<()> {
    if grad_out.len() != cache.taps.len() || into.dims() != cache.input_dims.as_slice() {
        return Err(HoiError::shape(
            "ps_roi_align_backward",
            grad_out.dims(),
            &cache.input_dims,
        ));
    }
    let d = into.data_mut();
    for (taps, &gv) in cache.taps.iter().zip(grad_out.data()) {
        for &(i, wt) in taps {
            d[i] = d[i] + wt * gv;
        }
    }
    Ok(())
}

/// Score-map convolution and the projection to the appearance width.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEncodingWeights<T> {
    /// `1 x 1`, `c_out -> G*G*E`.
    pub score_conv: ConvWeights<T>,
    /// `[1, 1, G*G*E, D]`.
    pub projection: ConvWeights<T>,
}

impl<T: Scalar> LocalEncodingWeights<T> {
    pub fn zeros(c_ctx: usize, grid: usize, embed: usize, dim: usize) -> Result<Self> {
        let n = grid * grid * embed;
        Ok(LocalEncodingWeights {
            score_conv: ConvWeights::zeros(1, 1, c_ctx, n)?,
            projection: ConvWeights::zeros(1, 1, n, dim)?,
        })
    }
}

/// Contextual appearance vector of one box.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceFeature<T> {
    pub f_app: Tensor<T>,
    pub source_box: BBox,
    pub source_kind: InstanceKind,
}

/// Position-sensitive score maps, computed once per image and shared by every
/// box of a stream.
pub fn score_maps<T: Scalar>(
    features_ctx: &Tensor<T>,
    w: &LocalEncodingWeights<T>,
) -> Result<Tensor<T>> {
    ops::conv2d(features_ctx, &w.score_conv)
}

#[derive(Debug, Clone)]
pub struct AppearanceCache<T> {
    pub roi: PsRoiCache<T>,
    pooled: Tensor<T>,
    pre: Tensor<T>,
}

/// `relu(FC(flatten(ps_roi_align(score_maps, roi))))`.
pub fn appearance_from_scores<T: Scalar>(
    scores: &Tensor<T>,
    roi: &BBox,
    w: &LocalEncodingWeights<T>,
    grid: RoiGrid,
) -> Result<(Tensor<T>, AppearanceCache<T>)> {
    let (pooled, roi_cache) = ps_roi_align(scores, roi, grid)?;
    let pre = ops::fully_connected(&pooled, &w.projection)?;
    let f_app = ops::relu(&pre);
    Ok((
        f_app,
        AppearanceCache {
            roi: roi_cache,
            pooled,
            pre,
        },
    ))
}

/// Backprop from `grad f_app`. The score-map gradient is accumulated into
/// `grad_scores`; returns the projection gradient.
pub fn appearance_backward<T: Scalar>(
    w: &LocalEncodingWeights<T>,
    cache: &AppearanceCache<T>,
    grad_f_app: &Tensor<T>,
    grad_scores: &mut Tensor<T>,
) -> Result<ConvWeights<T>> {
    let g_pre = ops::relu_backward(&cache.pre, grad_f_app)?;
    let (g_pooled, g_proj) = ops::fully_connected_backward(&cache.pooled, &w.projection, &g_pre)?;
    ps_roi_align_accumulate(&cache.roi, &g_pooled, grad_scores)?;
    Ok(g_proj)
}

/// Full local encoding of one box from context-aggregated features. `roi` is
/// in feature coordinates.
pub fn extract_appearance<T: Scalar>(
    features_ctx: &Tensor<T>,
    roi: &BBox,
    kind: InstanceKind,
    w: &LocalEncodingWeights<T>,
    grid: RoiGrid,
) -> Result<AppearanceFeature<T>> {
    let scores = score_maps(features_ctx, w)?;
    let (f_app, _) = appearance_from_scores(&scores, roi, w, grid)?;
    Ok(AppearanceFeature {
        f_app,
        source_box: *roi,
        source_kind: kind,
    })
}

/// Pre-activation of the appearance projection, for gradient-check signatures.
pub fn appearance_pre_activation<T: Scalar>(cache: &AppearanceCache<T>) -> &Tensor<T> {
    &cache.pre
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roi(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox { x1, y1, x2, y2 }
    }

    #[test]
    fn constant_map_gives_constant_output() {
        let maps = Tensor::<f64>::full(vec![6, 9, 3 * 3 * 2], 1.75).unwrap();
        let (out, _) = ps_roi_align(&maps, &roi(0.3, 1.1, 7.9, 5.2), RoiGrid { grid: 3, samples: 2 })
            .unwrap();
        assert_eq!(out.dims(), &[3, 3, 2]);
        assert!(out.data().iter().all(|&v| (v - 1.75).abs() < 1e-12));
    }

    #[test]
    fn aligned_box_hits_cell_centers() {
        // G=1, E=1, box [1,1]-[4,3], S=3 by 2 cells: samples land on centers.
        let maps = Tensor::<f64>::from_fn(vec![5, 6, 1], |i| ((i * 37) % 11) as f64).unwrap();
        let (out, _) =
            ps_roi_align(&maps, &roi(1.0, 1.0, 4.0, 4.0), RoiGrid { grid: 1, samples: 3 }).unwrap();
        let mut best = f64::NEG_INFINITY;
        for y in 1..4 {
            for x in 1..4 {
                best = best.max(maps.data()[y * 6 + x]);
            }
        }
        assert_eq!(out.data()[0], best);
    }

    #[test]
    fn degenerate_roi_is_an_error() {
        let maps = Tensor::<f64>::zeros(vec![4, 4, 1]).unwrap();
        let grid = RoiGrid { grid: 1, samples: 2 };
        let err = ps_roi_align(&maps, &roi(1.0, 1.0, 1.5, 1.5), grid).unwrap_err();
        assert!(matches!(err, HoiError::DegenerateRoi { .. }));
        // Fully outside the map clamps to an empty box.
        assert!(ps_roi_align(&maps, &roi(10.0, 10.0, 12.0, 12.0), grid).is_err());
    }

    #[test]
    fn channel_groups_must_divide() {
        let maps = Tensor::<f64>::zeros(vec![4, 4, 10]).unwrap();
        assert!(ps_roi_align(&maps, &roi(0.0, 0.0, 4.0, 4.0), RoiGrid { grid: 3, samples: 1 }).is_err());
    }

    #[test]
    fn zero_weights_give_zero_appearance() {
        let feats = Tensor::<f32>::full(vec![8, 8, 6], 0.7).unwrap();
        let w = LocalEncodingWeights::<f32>::zeros(6, 3, 2, 16).unwrap();
        let a = extract_appearance(
            &feats,
            &roi(1.0, 1.0, 6.0, 7.0),
            InstanceKind::Human,
            &w,
            RoiGrid { grid: 3, samples: 2 },
        )
        .unwrap();
        assert_eq!(a.f_app.dims(), &[16]);
        assert!(a.f_app.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_identity_branch() {
        let c = 3;
        let mut w = ContextAggWeights::<f64>::zeros(1, c, c, c).unwrap();
        for i in 0..c {
            w.a_vertical.kernel.data_mut()[i * c + i] = 1.0;
            w.a_horizontal.kernel.data_mut()[i * c + i] = 1.0;
        }
        let x = Tensor::from_fn(vec![4, 5, c], |i| (i as f64).sin()).unwrap();
        let y = context_aggregate(&x, &w).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn mismatched_branches_rejected() {
        let mut w = ContextAggWeights::<f64>::zeros(3, 2, 4, 5).unwrap();
        w.b_vertical = ConvWeights::zeros(3, 1, 4, 6).unwrap();
        let x = Tensor::zeros(vec![4, 4, 2]).unwrap();
        assert!(matches!(context_aggregate(&x, &w), Err(HoiError::Config(_))));
    }
}
