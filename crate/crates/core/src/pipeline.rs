//! The three-stream interaction pipeline: human and object appearance streams
//! with contextual attention, the pairwise spatial stream, score fusion and
//! triplet emission.

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttendCache, AttentionTrace};
use crate::context::{self, AppearanceCache, ContextAggCache, RoiGrid};
use crate::error::{HoiError, Result};
use crate::features::{BBox, ImageFeatures, InstanceDetection, InstanceKind};
use crate::model::{ModelConfig, ModelWeights, PairwiseWeights, StreamWeights, PATTERN_SIZE};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::ops;
use crate::tensor::Tensor;

/// A scored `<human, action, object>` prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiTriplet {
    pub image_id: String,
    pub human_box: BBox,
    pub object_box: Option<BBox>,
    pub action_id: u32,
    pub role_id: u32,
    pub score: f64,
}

/// Detections JSON document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub triplets: Vec<HoiTriplet>,
}

/// Two-channel binary map of the pair in its union-box frame, rescaled to
/// `64 x 64`. Channel 0 marks the human box, channel 1 the object box; a cell
/// is set when its center falls inside the box.
pub fn interaction_pattern<T: Scalar>(human: &BBox, object: &BBox) -> Tensor<T> {
    let n = PATTERN_SIZE;
    let u = human.union(object);
    let (sx, sy) = (u.width() / n as f64, u.height() / n as f64);
    let inside = |b: &BBox, x: f64, y: f64| x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
    let mut data = Vec::with_capacity(n * n * 2);
    for i in 0..n {
        let y = u.y1 + (i as f64 + 0.5) * sy;
        for j in 0..n {
            let x = u.x1 + (j as f64 + 0.5) * sx;
            for b in [human, object] {
                data.push(if inside(b, x, y) { T::one() } else { T::zero() });
            }
        }
    }
    Tensor::from_parts_unchecked(vec![n, n, 2], data)
}

#[derive(Debug, Clone)]
pub struct PairwiseCache<T> {
    pattern: Tensor<T>,
    pub pre1: Tensor<T>,
    act1: Tensor<T>,
    pool1: Tensor<T>,
    pub arg1: Vec<usize>,
    pub pre2: Tensor<T>,
    act2: Tensor<T>,
    pool2: Tensor<T>,
    pub arg2: Vec<usize>,
}

/// conv-relu-maxpool twice, flatten, FC, sigmoid.
pub fn pairwise_stream<T: Scalar>(
    pattern: &Tensor<T>,
    w: &PairwiseWeights<T>,
) -> Result<(Tensor<T>, PairwiseCache<T>)> {
    let pre1 = ops::conv2d(pattern, &w.conv1)?;
    let act1 = ops::relu(&pre1);
    let (pool1, arg1) = ops::max_pool(&act1, 2, 2)?;
    let pre2 = ops::conv2d(&pool1, &w.conv2)?;
    let act2 = ops::relu(&pre2);
    let (pool2, arg2) = ops::max_pool(&act2, 2, 2)?;
    let scores = ops::sigmoid(&ops::fully_connected(&pool2, &w.fc)?);
    Ok((
        scores,
        PairwiseCache {
            pattern: pattern.clone(),
            pre1,
            act1,
            pool1,
            arg1,
            pre2,
            act2,
            pool2,
            arg2,
        },
    ))
}

/// Returns `(grad pattern, grad weights)`.
pub fn pairwise_backward<T: Scalar>(
    w: &PairwiseWeights<T>,
    scores: &Tensor<T>,
    cache: &PairwiseCache<T>,
    grad_scores: &Tensor<T>,
) -> Result<(Tensor<T>, PairwiseWeights<T>)> {
    let g = ops::sigmoid_backward(scores, grad_scores)?;
    let (g_pool2, g_fc) = ops::fully_connected_backward(&cache.pool2, &w.fc, &g)?;
    let g_act2 = ops::max_pool_backward(cache.act2.dims(), &cache.arg2, &g_pool2)?;
    let g_pre2 = ops::relu_backward(&cache.pre2, &g_act2)?;
    let (g_pool1, g_conv2) = ops::conv2d_backward(&cache.pool1, &w.conv2, 1, &g_pre2)?;
    let g_act1 = ops::max_pool_backward(cache.act1.dims(), &cache.arg1, &g_pool1)?;
    let g_pre1 = ops::relu_backward(&cache.pre1, &g_act1)?;
    let (g_pattern, g_conv1) = ops::conv2d_backward(&cache.pattern, &w.conv1, 1, &g_pre1)?;
    Ok((
        g_pattern,
        PairwiseWeights {
            conv1: g_conv1,
            conv2: g_conv2,
            fc: g_fc,
        },
    ))
}

/// Clamp to `[0, 1]`, letting NaN through.
fn clamp_unit<T: Scalar>(v: T) -> T {
    if v < T::zero() {
        T::zero()
    } else if v > T::one() {
        T::one()
    } else {
        v
    }
}

/// `((s_h + s_o) / 2) * s_p`, clamped to `[0, 1]`.
pub fn fuse<T: Scalar>(s_h: &Tensor<T>, s_o: &Tensor<T>, s_p: &Tensor<T>) -> Result<Tensor<T>> {
    s_h.expect_same_dims("fuse", s_o)?;
    s_h.expect_same_dims("fuse", s_p)?;
    let half = T::from_f64(0.5);
    let data = s_h
        .data()
        .iter()
        .zip(s_o.data())
        .zip(s_p.data())
        .map(|((&h, &o), &p)| clamp_unit((h + o) * half * p))
        .collect();
    Ok(Tensor::from_parts_unchecked(s_h.dims().to_vec(), data))
}

/// Gradients of [`fuse`] inside the unclamped region; returns
/// `(grad s_h, grad s_o, grad s_p)`.
pub fn fuse_backward<T: Scalar>(
    s_h: &Tensor<T>,
    s_o: &Tensor<T>,
    s_p: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    s_h.expect_same_dims("fuse_backward", grad_out)?;
    let half = T::from_f64(0.5);
    let g_ho = elementwise(s_p, grad_out, |p, g| p * half * g)?;
    let g_p = Tensor::from_parts_unchecked(
        s_h.dims().to_vec(),
        s_h.data()
            .iter()
            .zip(s_o.data())
            .zip(grad_out.data())
            .map(|((&h, &o), &g)| (h + o) * half * g)
            .collect(),
    );
    Ok((g_ho.clone(), g_ho, g_p))
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    a.expect_same_dims("elementwise", b)?;
    Ok(Tensor::from_parts_unchecked(
        a.dims().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    ))
}

/// Per-image maps of one appearance stream.
#[derive(Debug, Clone)]
pub struct StreamMaps<T> {
    pub context: Tensor<T>,
    pub scores: Tensor<T>,
    context_cache: ContextAggCache<T>,
}

/// Everything computed once per image: the shared projection `A` and each
/// stream's context-aggregated features and position-sensitive score maps.
#[derive(Debug, Clone)]
pub struct ImagePass<T> {
    pub a: Tensor<T>,
    pub human: StreamMaps<T>,
    pub object: StreamMaps<T>,
}

fn stream_maps<T: Scalar>(features: &Tensor<T>, w: &StreamWeights<T>) -> Result<StreamMaps<T>> {
    let (context, context_cache) = context::context_aggregate_cached(features, &w.context)?;
    let scores = context::score_maps(&context, &w.local)?;
    Ok(StreamMaps {
        context,
        scores,
        context_cache,
    })
}

pub fn prepare_image<T: Scalar>(features: &Tensor<T>, w: &ModelWeights<T>) -> Result<ImagePass<T>> {
    let (_, _, c) = features.hwc("prepare_image")?;
    if c != w.projection.c_in() {
        return Err(HoiError::Config(format!(
            "feature map has {c} channels, weights expect {}",
            w.projection.c_in()
        )));
    }
    Ok(ImagePass {
        a: attention::project(features, &w.projection)?,
        human: stream_maps(features, &w.human)?,
        object: stream_maps(features, &w.object)?,
    })
}

/// One box through an appearance stream.
#[derive(Debug, Clone)]
pub struct BoxPass<T> {
    pub scores: Tensor<T>,
    pub f_app: Tensor<T>,
    pub trace: AttentionTrace<T>,
    pub appearance: AppearanceCache<T>,
    pub attend: AttendCache<T>,
}

/// `roi` is in feature coordinates.
pub fn stream_forward<T: Scalar>(
    w: &StreamWeights<T>,
    maps: &StreamMaps<T>,
    a: &Tensor<T>,
    roi: &BBox,
    grid: RoiGrid,
) -> Result<BoxPass<T>> {
    let (f_app, appearance) = context::appearance_from_scores(&maps.scores, roi, &w.local, grid)?;
    let (scores, trace, attend) = attention::attend(&f_app, a, &w.attention)?;
    Ok(BoxPass {
        scores,
        f_app,
        trace,
        appearance,
        attend,
    })
}

/// Backprop one box. Weight gradients accumulate into `grads`, the `A`
/// gradient into `grad_a`, and the score-map gradient into `grad_scores_map`.
pub fn stream_backward<T: Scalar>(
    w: &StreamWeights<T>,
    pass: &BoxPass<T>,
    grad_scores: &Tensor<T>,
    grads: &mut StreamWeights<T>,
    grad_a: &mut Tensor<T>,
    grad_scores_map: &mut Tensor<T>,
) -> Result<()> {
    let (g_fapp, g_a) = attention::attend_backward(
        &pass.f_app,
        &w.attention,
        &pass.scores,
        &pass.trace,
        &pass.attend,
        grad_scores,
        &mut grads.attention,
    )?;
    grad_a.axpy(T::one(), &g_a)?;
    let g_proj = context::appearance_backward(&w.local, &pass.appearance, &g_fapp, grad_scores_map)?;
    attention::add_conv(&mut grads.local.projection, &g_proj)
}

/// Backprop accumulated per-image gradients (`A` and both streams' score
/// maps) into the shared projection and the per-stream convolutions.
/// Returns the gradient w.r.t. the backbone features.
pub fn image_backward<T: Scalar>(
    features: &Tensor<T>,
    w: &ModelWeights<T>,
    pass: &ImagePass<T>,
    grad_a: &Tensor<T>,
    grad_scores_human: &Tensor<T>,
    grad_scores_object: &Tensor<T>,
    grads: &mut ModelWeights<T>,
) -> Result<Tensor<T>> {
    let (mut g_feat, g_proj) = ops::conv2d_backward(features, &w.projection, 1, grad_a)?;
    attention::add_conv(&mut grads.projection, &g_proj)?;
    for (sw, maps, g_scores, sg) in [
        (&w.human, &pass.human, grad_scores_human, &mut grads.human),
        (&w.object, &pass.object, grad_scores_object, &mut grads.object),
    ] {
        let (g_ctx, g_score_conv) = ops::conv2d_backward(&maps.context, &sw.local.score_conv, 1, g_scores)?;
        attention::add_conv(&mut sg.local.score_conv, &g_score_conv)?;
        let (g_f, g_context) =
            context::context_aggregate_backward(features, &sw.context, &maps.context_cache, &g_ctx)?;
        for (dst, src) in [
            (&mut sg.context.a_vertical, &g_context.a_vertical),
            (&mut sg.context.a_horizontal, &g_context.a_horizontal),
            (&mut sg.context.b_horizontal, &g_context.b_horizontal),
            (&mut sg.context.b_vertical, &g_context.b_vertical),
        ] {
            attention::add_conv(dst, src)?;
        }
        g_feat.axpy(T::one(), &g_f)?;
    }
    Ok(g_feat)
}

/// Attention maps of one box, kept for export.
#[derive(Debug, Clone)]
pub struct BoxAttention<T> {
    pub kind: InstanceKind,
    /// Index of the box among the image's humans (or objects).
    pub index: usize,
    pub bbox: BBox,
    pub attn_map: Tensor<T>,
    pub h_norm: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DetectOutput<T> {
    pub triplets: Vec<HoiTriplet>,
    pub attention: Vec<BoxAttention<T>>,
}

/// Score every human-object pair of one image.
///
/// Triplets are emitted per human in input order: first every
/// `(object, paired slot)` combination (objects in input order, slots in role
/// table order), then the human's agent-only slots. Detector confidences are
/// not part of the score; `detections` should already be threshold-filtered.
pub fn detect<T: Scalar>(
    image_id: &str,
    features: &ImageFeatures<T>,
    detections: &[InstanceDetection],
    weights: &ModelWeights<T>,
    config: &ModelConfig,
) -> Result<Vec<HoiTriplet>> {
    Ok(detect_with_attention(image_id, features, detections, weights, config)?.triplets)
}

pub fn detect_with_attention<T: Scalar>(
    image_id: &str,
    features: &ImageFeatures<T>,
    detections: &[InstanceDetection],
    weights: &ModelWeights<T>,
    config: &ModelConfig,
) -> Result<DetectOutput<T>> {
    config.validate()?;
    weights.validate(config)?;
    let humans: Vec<&InstanceDetection> = detections
        .iter()
        .filter(|d| d.kind == InstanceKind::Human)
        .collect();
    let objects: Vec<&InstanceDetection> = detections
        .iter()
        .filter(|d| d.kind == InstanceKind::Object)
        .collect();
    if humans.is_empty() {
        return Ok(DetectOutput {
            triplets: Vec::new(),
            attention: Vec::new(),
        });
    }
    let pass = prepare_image(&features.feature_map, weights)?;
    let stride = features.spatial_stride as f64;
    let grid = config.roi_grid();

    let run_stream = |dets: &[&InstanceDetection], sw: &StreamWeights<T>, maps: &StreamMaps<T>| {
        par::map(dets, |d| {
            stream_forward(sw, maps, &pass.a, &d.bbox.to_feature(stride), grid)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()
    };
    let human_passes = run_stream(&humans, &weights.human, &pass.human)?;
    let object_passes = run_stream(&objects, &weights.object, &pass.object)?;

    let pairs: Vec<(usize, usize)> = (0..humans.len())
        .flat_map(|h| (0..objects.len()).map(move |o| (h, o)))
        .collect();
    let pair_scores = par::map(&pairs, |&(h, o)| {
        let pattern = interaction_pattern::<T>(&humans[h].bbox, &objects[o].bbox);
        let (s_p, _) = pairwise_stream(&pattern, &weights.pairwise)?;
        fuse(&human_passes[h].scores, &object_passes[o].scores, &s_p)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut triplets = Vec::new();
    for (h, human) in humans.iter().enumerate() {
        for (o, object) in objects.iter().enumerate() {
            let fused = &pair_scores[h * objects.len() + o];
            for slot in config.paired_slots() {
                triplets.push(HoiTriplet {
                    image_id: image_id.to_string(),
                    human_box: human.bbox,
                    object_box: Some(object.bbox),
                    action_id: slot.action_id,
                    role_id: slot.role_id,
                    score: fused.data()[slot.action_id as usize].as_f64(),
                });
            }
        }
        for slot in config.agent_only_slots() {
            triplets.push(HoiTriplet {
                image_id: image_id.to_string(),
                human_box: human.bbox,
                object_box: None,
                action_id: slot.action_id,
                role_id: slot.role_id,
                score: human_passes[h].scores.data()[slot.action_id as usize].as_f64(),
            });
        }
    }
    if let Some(t) = triplets.iter().find(|t| !t.score.is_finite()) {
        return Err(HoiError::NonFinite(format!(
            "detect: image {} action {}",
            t.image_id, t.action_id
        )));
    }

    let attention = humans
        .iter()
        .zip(&human_passes)
        .enumerate()
        .map(|(i, (d, p))| (InstanceKind::Human, i, d, p))
        .chain(
            objects
                .iter()
                .zip(&object_passes)
                .enumerate()
                .map(|(i, (d, p))| (InstanceKind::Object, i, d, p)),
        )
        .map(|(kind, index, d, p)| BoxAttention {
            kind,
            index,
            bbox: d.bbox,
            attn_map: p.trace.attn_map.clone(),
            h_norm: p.trace.h_norm.clone(),
        })
        .collect();
    Ok(DetectOutput {
        triplets,
        attention,
    })
}
