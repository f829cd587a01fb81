//! Toy-scale training on synthetic interaction scenes, plus the block-wise
//! finite-difference gradient harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{self, ContextAggWeights, LocalEncodingWeights, RoiGrid};
use crate::attention::{self, AttentionWeights};
use crate::error::{HoiError, Result};
use crate::features::{
    self, BBox, BackboneWeights, ImageFeatures, InstanceDetection, InstanceKind, PERSON_CLASS,
};
use crate::gradcheck::{self, CheckStats, Probe, GRAD_TOL};
use crate::model::{self, ModelConfig, ModelWeights, PairwiseWeights, RoleSlot, ROLE_DIRECT_OBJECT};
use crate::pipeline::{self, HoiTriplet};
use crate::scalar::Scalar;
use crate::tensor::ops::{self, ConvWeights};
use crate::tensor::Tensor;

/// Probability clamp inside the BCE logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy of `scores` against multi-hot `labels`.
pub fn bce_loss<T: Scalar>(scores: &Tensor<T>, labels: &[f64]) -> Result<f64> {
    Ok(bce_with_grad(scores, labels)?.0)
}

/// Loss and its gradient w.r.t. `scores` (zero where the clamp is active).
pub fn bce_with_grad<T: Scalar>(scores: &Tensor<T>, labels: &[f64]) -> Result<(f64, Tensor<T>)> {
    if scores.len() != labels.len() || labels.is_empty() {
        return Err(HoiError::shape("bce_loss", scores.dims(), &[labels.len()]));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(labels.len());
    for (&s, &y) in scores.data().iter().zip(labels) {
        let raw = s.as_f64();
        let p = raw.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        let g = if raw == p { (p - y) / (p * (1.0 - p)) / n } else { 0.0 };
        grad.push(T::from_f64(g));
    }
    Ok((loss / n, Tensor::new(scores.dims().to_vec(), grad)?))
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(HoiError::Config(format!("learning rate {learning_rate} must be > 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(HoiError::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if weight_decay < 0.0 {
            return Err(HoiError::Config(format!("weight decay {weight_decay} < 0")));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}

/// `v <- m v - lr (g + wd p)`, `p <- p + v` for each parameter tensor.
pub fn sgd_step<T: Scalar>(
    params: Vec<&mut Tensor<T>>,
    grads: Vec<&Tensor<T>>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(HoiError::InvalidArgument(format!(
            "sgd_step: {} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| p.zeros_like()).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(HoiError::InvalidArgument("sgd_step: parameter count changed".into()));
    }
    let (lr, m, wd) = (
        T::from_f64(state.learning_rate),
        T::from_f64(state.momentum),
        T::from_f64(state.weight_decay),
    );
    for ((p, g), v) in params.into_iter().zip(grads).zip(&mut state.velocity) {
        p.expect_same_dims("sgd_step", g)?;
        p.expect_same_dims("sgd_step", v)?;
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv - lr * (gv + wd * *pv);
            *pv = *pv + *vv;
        }
    }
    Ok(())
}

pub fn sgd_step_model<T: Scalar>(
    params: &mut ModelWeights<T>,
    grads: &ModelWeights<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let g: Vec<&Tensor<T>> = grads.tensors().into_iter().map(|(_, t)| t).collect();
    sgd_step(params.tensors_mut(), g, state)
}

/// One human with several candidate objects and per-pair multi-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub human: BBox,
    pub objects: Vec<BBox>,
    /// `labels[i]` is the multi-hot action vector of `(human, objects[i])`.
    pub labels: Vec<Vec<f64>>,
}

/// Synthetic image with planted human/object blobs.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: Tensor<f32>,
    pub layout: SceneLayout,
    /// Index into `layout.objects` of the interacting object.
    pub planted: usize,
    /// Action of the planted pair.
    pub planted_action: usize,
}

impl SyntheticSample {
    pub fn detections(&self) -> Vec<InstanceDetection> {
        std::iter::once(InstanceDetection {
            bbox: self.layout.human,
            class_id: PERSON_CLASS,
            score: 1.0,
            kind: InstanceKind::Human,
        })
        .chain(self.layout.objects.iter().map(|&b| InstanceDetection {
            bbox: b,
            class_id: TOY_OBJECT_CLASS,
            score: 1.0,
            kind: InstanceKind::Object,
        }))
        .collect()
    }
}

pub const ACTION_ADJACENT: usize = 0;
pub const ACTION_OVERLAPPING: usize = 1;
pub const TOY_OBJECT_CLASS: u32 = 1;

/// Settings of the synthetic task and optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub model: ModelConfig,
    pub image_size: usize,
    pub backbone_mid: usize,
    pub distractors: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let n_actions = 4;
        ToyConfig {
            model: ModelConfig {
                n_actions,
                input_channels: 8,
                context_channels: 8,
                dim: 16,
                kernel_size: 5,
                grid: 3,
                embed: 2,
                samples: 2,
                reduction: 4,
                head_hidden: 16,
                human_thresh: 0.8,
                object_thresh: 0.4,
                roles: (0..n_actions as u32)
                    .map(|a| RoleSlot {
                        action_id: a,
                        role_id: ROLE_DIRECT_OBJECT,
                    })
                    .collect(),
            },
            image_size: 64,
            backbone_mid: 8,
            distractors: 2,
            batch: 4,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
        }
    }
}

fn gap(a: &BBox, b: &BBox) -> f64 {
    let dx = (b.x1 - a.x2).max(a.x1 - b.x2).max(0.0);
    let dy = (b.y1 - a.y2).max(a.y1 - b.y2).max(0.0);
    dx.max(dy)
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

fn int_box(x: i64, y: i64, w: i64, h: i64) -> BBox {
    BBox {
        x1: x as f64,
        y1: y as f64,
        x2: (x + w) as f64,
        y2: (y + h) as f64,
    }
}

/// Draw one scene: a human blob, one object adjacent to (action 0) or
/// overlapping (action 1) it, and distractor objects at least 6 px away.
/// Actions 2 and above are always negative.
pub fn synthetic_scene(cfg: &ToyConfig, rng: &mut impl Rng) -> Result<SyntheticSample> {
    let size = cfg.image_size as i64;
    if size < 40 || cfg.model.n_actions < 2 {
        return Err(HoiError::Config(
            "synthetic scenes need image_size >= 40 and at least 2 actions".into(),
        ));
    }
    let inside = |b: &BBox| b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= size as f64 && b.y2 <= size as f64;
    for _ in 0..1000 {
        let (hw, hh) = (rng.gen_range(10..=16), rng.gen_range(12..=20));
        let human = int_box(rng.gen_range(0..=size - hw), rng.gen_range(0..=size - hh), hw, hh);
        let (ow, oh) = (rng.gen_range(6..=12), rng.gen_range(6..=12));
        let action = rng.gen_range(0..2usize);
        let (hx1, hy1, hx2, hy2) = (human.x1 as i64, human.y1 as i64, human.x2 as i64, human.y2 as i64);
        let target = if action == ACTION_ADJACENT {
            let slack = rng.gen_range(0..=1);
            let along_x = rng.gen_range(hx1 - ow + 3..=hx2 - 3);
            let along_y = rng.gen_range(hy1 - oh + 3..=hy2 - 3);
            match rng.gen_range(0..4) {
                0 => int_box(hx2 + slack, along_y, ow, oh),
                1 => int_box(hx1 - ow - slack, along_y, ow, oh),
                2 => int_box(along_x, hy2 + slack, ow, oh),
                _ => int_box(along_x, hy1 - oh - slack, ow, oh),
            }
        } else {
            let cx = rng.gen_range(hx1 + 2..=hx2 - 2);
            let cy = rng.gen_range(hy1 + 2..=hy2 - 2);
            int_box(cx - ow / 2, cy - oh / 2, ow, oh)
        };
        if !inside(&target) {
            continue;
        }
        let mut objects = vec![target];
        let mut ok = true;
        for _ in 0..cfg.distractors {
            let mut placed = false;
            for _ in 0..200 {
                let (dw, dh) = (rng.gen_range(6..=12), rng.gen_range(6..=12));
                let d = int_box(rng.gen_range(0..=size - dw), rng.gen_range(0..=size - dh), dw, dh);
                if gap(&d, &human) >= 6.0 && objects.iter().all(|o| gap(&d, o) >= 2.0) {
                    objects.push(d);
                    placed = true;
                    break;
                }
            }
            ok &= placed;
        }
        if !ok {
            continue;
        }
        // Shuffle so the planted object is not always first.
        let planted_pos = rng.gen_range(0..objects.len());
        objects.swap(0, planted_pos);
        let labels = objects
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let mut y = vec![0.0; cfg.model.n_actions];
                if i == planted_pos {
                    y[action] = 1.0;
                }
                y
            })
            .collect();
        debug_assert!(action != ACTION_OVERLAPPING || overlaps(&human, &objects[planted_pos]));
        let image = render(size as usize, &human, &objects)?;
        return Ok(SyntheticSample {
            image,
            layout: SceneLayout {
                human,
                objects,
                labels,
            },
            planted: planted_pos,
            planted_action: action,
        });
    }
    Err(HoiError::Config("could not place a synthetic scene".into()))
}

/// Human pixels light channel 0, object pixels channel 1, every blob channel 2.
fn render(size: usize, human: &BBox, objects: &[BBox]) -> Result<Tensor<f32>> {
    let mut img = Tensor::<f32>::zeros(vec![size, size, 3])?;
    let mut paint = |b: &BBox, ch: usize| {
        for y in b.y1 as usize..b.y2 as usize {
            for x in b.x1 as usize..b.x2 as usize {
                let px = &mut img.data_mut()[(y * size + x) * 3..][..3];
                px[ch] = 1.0;
                px[2] = 0.5;
            }
        }
    };
    paint(human, 0);
    for o in objects {
        paint(o, 1);
    }
    Ok(img)
}

/// Per-pair fused scores of one scene, in `layout.objects` order.
pub fn scene_scores<T: Scalar>(
    weights: &ModelWeights<T>,
    features: &ImageFeatures<T>,
    layout: &SceneLayout,
    grid: RoiGrid,
) -> Result<Vec<Tensor<T>>> {
    let pass = pipeline::prepare_image(&features.feature_map, weights)?;
    let stride = features.spatial_stride as f64;
    let hp = pipeline::stream_forward(&weights.human, &pass.human, &pass.a, &layout.human.to_feature(stride), grid)?;
    layout
        .objects
        .iter()
        .map(|o| {
            let op = pipeline::stream_forward(&weights.object, &pass.object, &pass.a, &o.to_feature(stride), grid)?;
            let pattern = pipeline::interaction_pattern::<T>(&layout.human, o);
            let (s_p, _) = pipeline::pairwise_stream(&pattern, &weights.pairwise)?;
            pipeline::fuse(&hp.scores, &op.scores, &s_p)
        })
        .collect()
}

/// Mean per-pair BCE of the fused scores and its gradient w.r.t. every
/// weight. The backbone features are treated as constants.
pub fn scene_loss<T: Scalar>(
    weights: &ModelWeights<T>,
    features: &ImageFeatures<T>,
    layout: &SceneLayout,
    grid: RoiGrid,
) -> Result<(f64, ModelWeights<T>)> {
    if layout.objects.is_empty() || layout.labels.len() != layout.objects.len() {
        return Err(HoiError::InvalidArgument("scene needs one label row per object".into()));
    }
    let fmap = &features.feature_map;
    let stride = features.spatial_stride as f64;
    let pass = pipeline::prepare_image(fmap, weights)?;
    let hp = pipeline::stream_forward(&weights.human, &pass.human, &pass.a, &layout.human.to_feature(stride), grid)?;

    let mut grads = weights.zeros_like();
    let mut grad_a = pass.a.zeros_like();
    let mut g_scores_h = pass.human.scores.zeros_like();
    let mut g_scores_o = pass.object.scores.zeros_like();
    let mut g_human = hp.scores.zeros_like();
    let n_pairs = T::from_f64(layout.objects.len() as f64);
    let mut loss = 0.0;

    for (o, labels) in layout.objects.iter().zip(&layout.labels) {
        let op = pipeline::stream_forward(&weights.object, &pass.object, &pass.a, &o.to_feature(stride), grid)?;
        let pattern = pipeline::interaction_pattern::<T>(&layout.human, o);
        let (s_p, pc) = pipeline::pairwise_stream(&pattern, &weights.pairwise)?;
        let fused = pipeline::fuse(&hp.scores, &op.scores, &s_p)?;
        let (l, g_fused) = bce_with_grad(&fused, labels)?;
        loss += l;
        let g_fused = g_fused.map(|v| v / n_pairs);
        let (g_h, g_o, g_p) = pipeline::fuse_backward(&hp.scores, &op.scores, &s_p, &g_fused)?;
        g_human.axpy(T::one(), &g_h)?;
        let (_, g_pw) = pipeline::pairwise_backward(&weights.pairwise, &s_p, &pc, &g_p)?;
        for (dst, src) in [
            (&mut grads.pairwise.conv1, &g_pw.conv1),
            (&mut grads.pairwise.conv2, &g_pw.conv2),
            (&mut grads.pairwise.fc, &g_pw.fc),
        ] {
            attention::add_conv(dst, src)?;
        }
        pipeline::stream_backward(&weights.object, &op, &g_o, &mut grads.object, &mut grad_a, &mut g_scores_o)?;
    }
    pipeline::stream_backward(&weights.human, &hp, &g_human, &mut grads.human, &mut grad_a, &mut g_scores_h)?;
    pipeline::image_backward(fmap, weights, &pass, &grad_a, &g_scores_h, &g_scores_o, &mut grads)?;
    Ok((loss / layout.objects.len() as f64, grads))
}

/// Result of [`train_toy`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// `losses[s]` is the batch loss with the weights after `s` updates,
    /// for `s` in `0..=steps`.
    pub losses: Vec<f64>,
    pub weights: ModelWeights<f32>,
    pub initial_weights: ModelWeights<f32>,
    pub backbone: BackboneWeights<f32>,
    pub config: ToyConfig,
}

/// Fixed random backbone and initial model weights for `seed`.
pub fn toy_init(cfg: &ToyConfig, seed: u64) -> Result<(BackboneWeights<f32>, ModelWeights<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = BackboneWeights::zeros(cfg.backbone_mid, cfg.model.input_channels)?;
    model::glorot_fill(&mut backbone.stage1.kernel, &mut rng);
    model::glorot_fill(&mut backbone.stage2.kernel, &mut rng);
    let weights = ModelWeights::init(&cfg.model, &mut rng)?;
    Ok((backbone, weights))
}

/// Independent stream for scene generation, so evaluation scenes never
/// coincide with training batches.
fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

pub fn toy_features(image: &Tensor<f32>, backbone: &BackboneWeights<f32>) -> Result<ImageFeatures<f32>> {
    features::toy_backbone(image, backbone)
}

/// Train every stream on synthetic scenes. Deterministic given `seed`.
pub fn train_toy(cfg: &ToyConfig, seed: u64, steps: usize) -> Result<TrainOutcome> {
    cfg.model.validate()?;
    let (backbone, initial) = toy_init(cfg, seed)?;
    let mut weights = initial.clone();
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
    let mut rng = scene_rng(seed, TRAIN_STREAM);
    let grid = cfg.model.roi_grid();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut batch_loss = 0.0;
        let mut grads = weights.zeros_like();
        for _ in 0..cfg.batch.max(1) {
            let scene = synthetic_scene(cfg, &mut rng)?;
            let feats = toy_features(&scene.image, &backbone)?;
            let (l, g) = scene_loss(&weights, &feats, &scene.layout, grid)?;
            batch_loss += l;
            grads.add_scaled(1.0 / cfg.batch.max(1) as f32, &g)?;
        }
        let batch_loss = batch_loss / cfg.batch.max(1) as f64;
        if !batch_loss.is_finite() {
            return Err(HoiError::NonFinite(format!("training loss at step {step}")));
        }
        losses.push(batch_loss);
        if step < steps {
            sgd_step_model(&mut weights, &grads, &mut opt)?;
        }
    }
    if !weights.is_finite() {
        return Err(HoiError::NonFinite("trained weights".into()));
    }
    Ok(TrainOutcome {
        losses,
        weights,
        initial_weights: initial,
        backbone,
        config: cfg.clone(),
    })
}

/// Held-out synthetic scenes for `seed` (disjoint from the training stream).
pub fn eval_scenes(cfg: &ToyConfig, seed: u64, n: usize) -> Result<Vec<SyntheticSample>> {
    let mut rng = scene_rng(seed, EVAL_STREAM);
    (0..n).map(|_| synthetic_scene(cfg, &mut rng)).collect()
}

/// Fraction of scenes where the planted pair's fused score for its planted
/// action is strictly above every distractor pair's score for that action.
pub fn planted_pair_accuracy(
    weights: &ModelWeights<f32>,
    backbone: &BackboneWeights<f32>,
    cfg: &ToyConfig,
    scenes: &[SyntheticSample],
) -> Result<f64> {
    let grid = cfg.model.roi_grid();
    let mut hits = 0usize;
    for s in scenes {
        let feats = toy_features(&s.image, backbone)?;
        let scores = scene_scores(weights, &feats, &s.layout, grid)?;
        let target = scores[s.planted].data()[s.planted_action];
        let best_other = scores
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != s.planted)
            .map(|(_, t)| t.data()[s.planted_action])
            .fold(f32::NEG_INFINITY, f32::max);
        if target > best_other {
            hits += 1;
        }
    }
    Ok(hits as f64 / scenes.len().max(1) as f64)
}

/// Ground-truth triplets of a synthetic scene (the planted pair only).
pub fn scene_ground_truth(image_id: &str, s: &SyntheticSample) -> crate::evaluation::GroundTruthTriplet {
    crate::evaluation::GroundTruthTriplet {
        image_id: image_id.to_string(),
        human_box: s.layout.human,
        object_box: Some(s.layout.objects[s.planted]),
        action_id: s.planted_action as u32,
        role_id: ROLE_DIRECT_OBJECT,
        object_class: Some(TOY_OBJECT_CLASS),
    }
}

/// Detections of a synthetic scene scored by the model.
pub fn scene_triplets(
    image_id: &str,
    s: &SyntheticSample,
    weights: &ModelWeights<f32>,
    backbone: &BackboneWeights<f32>,
    cfg: &ToyConfig,
) -> Result<Vec<HoiTriplet>> {
    let feats = toy_features(&s.image, backbone)?;
    pipeline::detect(image_id, &feats, &s.detections(), weights, &cfg.model)
}

// ---------------------------------------------------------------------------
// Gradient harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub seed: u64,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
    pub passed: bool,
}

fn rand_tensor(dims: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-scale..scale)).expect("valid dims")
}

fn rand_conv(kh: usize, kw: usize, ci: usize, co: usize, rng: &mut impl Rng) -> ConvWeights<f64> {
    let limit = (6.0 / ((kh * kw * (ci + co)) as f64)).sqrt();
    ConvWeights {
        kernel: rand_tensor(&[kh, kw, ci, co], limit, rng),
        bias: rand_tensor(&[co], 0.1, rng),
    }
}

/// Check the gradient w.r.t. every tensor in `targets`. `eval` rebuilds the
/// objective with tensor `i` replaced by the probe value.
fn check_targets(
    targets: &[(&str, &Tensor<f64>, &Tensor<f64>)],
    max_coords: usize,
    eval: impl Fn(usize, &Tensor<f64>) -> Probe,
) -> CheckStats {
    targets
        .iter()
        .enumerate()
        .map(|(i, (_, at, analytic))| gradcheck::check(at, analytic, max_coords, |x| eval(i, x)))
        .fold(CheckStats::default(), CheckStats::merge)
}

fn report(block: &str, stats: CheckStats) -> BlockReport {
    BlockReport {
        block: block.to_string(),
        max_rel_error: stats.max_rel_error,
        checked: stats.checked,
        skipped: stats.skipped,
        passed: stats.passed(GRAD_TOL),
    }
}

fn conv_sig(w: &ConvWeights<f64>) -> [&Tensor<f64>; 2] {
    [&w.kernel, &w.bias]
}

pub fn check_context_aggregation(rng: &mut impl Rng) -> Result<BlockReport> {
    let x = rand_tensor(&[6, 7, 3], 1.0, rng);
    let k = 3;
    let w = ContextAggWeights {
        a_vertical: rand_conv(k, 1, 3, 4, rng),
        a_horizontal: rand_conv(1, k, 4, 5, rng),
        b_horizontal: rand_conv(1, k, 3, 4, rng),
        b_vertical: rand_conv(k, 1, 4, 5, rng),
    };
    let (y, cache) = context::context_aggregate_cached(&x, &w)?;
    let proj = rand_tensor(y.dims(), 1.0, rng);
    let (gx, gw) = context::context_aggregate_backward(&x, &w, &cache, &proj)?;
    let params = [&w.a_vertical, &w.a_horizontal, &w.b_horizontal, &w.b_vertical];
    let gparams = [&gw.a_vertical, &gw.a_horizontal, &gw.b_horizontal, &gw.b_vertical];
    let mut targets = vec![("x", &x, &gx)];
    for (p, g) in params.iter().zip(&gparams) {
        for (t, gt) in conv_sig(p).into_iter().zip(conv_sig(g)) {
            targets.push(("w", t, gt));
        }
    }
    let stats = check_targets(&targets, 48, |i, v| {
        let mut xx = x.clone();
        let mut ww = w.clone();
        if i == 0 {
            xx = v.clone();
        } else {
            let j = i - 1;
            let conv = match j / 2 {
                0 => &mut ww.a_vertical,
                1 => &mut ww.a_horizontal,
                2 => &mut ww.b_horizontal,
                _ => &mut ww.b_vertical,
            };
            if j % 2 == 0 { conv.kernel = v.clone() } else { conv.bias = v.clone() }
        }
        Probe::smooth(gradcheck::project(&context::context_aggregate(&xx, &ww).unwrap(), &proj))
    });
    Ok(report("context_aggregation", stats))
}

pub fn check_local_encoding(rng: &mut impl Rng) -> Result<BlockReport> {
    let (g, e, d, c) = (2, 2, 5, 4);
    let grid = RoiGrid { grid: g, samples: 2 };
    let ctx = rand_tensor(&[7, 8, c], 1.0, rng);
    let w = LocalEncodingWeights {
        score_conv: rand_conv(1, 1, c, g * g * e, rng),
        projection: rand_conv(1, 1, g * g * e, d, rng),
    };
    let roi = BBox {
        x1: rng.gen_range(0.2..2.0),
        y1: rng.gen_range(0.2..2.0),
        x2: rng.gen_range(4.5..7.8),
        y2: rng.gen_range(4.0..6.8),
    };
    let proj = rand_tensor(&[d], 1.0, rng);
    let forward = |ctx: &Tensor<f64>, w: &LocalEncodingWeights<f64>| {
        let scores = context::score_maps(ctx, w).unwrap();
        let (f, cache) = context::appearance_from_scores(&scores, &roi, w, grid).unwrap();
        let sig: Vec<u64> = cache
            .roi
            .argmax
            .iter()
            .map(|&a| a as u64)
            .chain(gradcheck::relu_signature(context::appearance_pre_activation(&cache)))
            .collect();
        (f, cache, scores, sig)
    };
    let (_, cache, scores, _) = forward(&ctx, &w);
    let mut g_scores = scores.zeros_like();
    let g_proj = context::appearance_backward(&w, &cache, &proj, &mut g_scores)?;
    let (g_ctx, g_score_conv) = ops::conv2d_backward(&ctx, &w.score_conv, 1, &g_scores)?;
    let targets = [
        ("ctx", &ctx, &g_ctx),
        ("score_conv.kernel", &w.score_conv.kernel, &g_score_conv.kernel),
        ("score_conv.bias", &w.score_conv.bias, &g_score_conv.bias),
        ("projection.kernel", &w.projection.kernel, &g_proj.kernel),
        ("projection.bias", &w.projection.bias, &g_proj.bias),
    ];
    let stats = check_targets(&targets, 48, |i, v| {
        let mut cc = ctx.clone();
        let mut ww = w.clone();
        match i {
            0 => cc = v.clone(),
            1 => ww.score_conv.kernel = v.clone(),
            2 => ww.score_conv.bias = v.clone(),
            3 => ww.projection.kernel = v.clone(),
            _ => ww.projection.bias = v.clone(),
        }
        let (f, _, _, sig) = forward(&cc, &ww);
        Probe {
            value: gradcheck::project(&f, &proj),
            signature: sig,
        }
    });
    Ok(report("local_encoding", stats))
}

fn rand_attention(d: usize, r: usize, hidden: usize, n: usize, rng: &mut impl Rng) -> AttentionWeights<f64> {
    AttentionWeights {
        heatmap_conv: rand_conv(1, 1, d, 1, rng),
        se_reduce: rand_conv(1, 1, d, d / r, rng),
        se_expand: rand_conv(1, 1, d / r, d, rng),
        head_fc1: rand_conv(1, 1, 2 * d, hidden, rng),
        head_fc2: rand_conv(1, 1, hidden, n, rng),
    }
}

/// Modulation, spatial and channel refinement and pooling, from
/// `(f_app, A)` to `f_r`.
pub fn check_attention_chain(rng: &mut impl Rng) -> Result<BlockReport> {
    let d = 8;
    let f_app = rand_tensor(&[d], 1.0, rng);
    let a = rand_tensor(&[4, 5, d], 1.0, rng);
    let w = rand_attention(d, 2, 6, 3, rng);
    let proj = rand_tensor(&[d], 1.0, rng);
    let forward = |f: &Tensor<f64>, a: &Tensor<f64>, w: &AttentionWeights<f64>| {
        let (attn, f_m) = attention::modulate(f, a).unwrap();
        let (refined, cache) = attention::refine(&f_m, w).unwrap();
        let sig: Vec<u64> = gradcheck::relu_signature(&cache.channel.squeeze_pre).collect();
        (attn, f_m, refined, cache, sig)
    };
    let (attn, f_m, refined, cache, _) = forward(&f_app, &a, &w);
    let mut gw = w.clone();
    for t in [
        &mut gw.heatmap_conv,
        &mut gw.se_reduce,
        &mut gw.se_expand,
        &mut gw.head_fc1,
        &mut gw.head_fc2,
    ] {
        *t = t.zeros_like();
    }
    let g_fm = attention::refine_backward(&f_m, &w, &refined, &cache, &proj, &mut gw)?;
    let (g_f, g_a) = attention::modulate_backward(&f_app, &a, &attn, &g_fm)?;
    let targets = [
        ("f_app", &f_app, &g_f),
        ("A", &a, &g_a),
        ("heatmap.kernel", &w.heatmap_conv.kernel, &gw.heatmap_conv.kernel),
        ("heatmap.bias", &w.heatmap_conv.bias, &gw.heatmap_conv.bias),
        ("se_reduce.kernel", &w.se_reduce.kernel, &gw.se_reduce.kernel),
        ("se_reduce.bias", &w.se_reduce.bias, &gw.se_reduce.bias),
        ("se_expand.kernel", &w.se_expand.kernel, &gw.se_expand.kernel),
        ("se_expand.bias", &w.se_expand.bias, &gw.se_expand.bias),
    ];
    let stats = check_targets(&targets, 48, |i, v| {
        let (mut ff, mut aa, mut ww) = (f_app.clone(), a.clone(), w.clone());
        match i {
            0 => ff = v.clone(),
            1 => aa = v.clone(),
            2 => ww.heatmap_conv.kernel = v.clone(),
            3 => ww.heatmap_conv.bias = v.clone(),
            4 => ww.se_reduce.kernel = v.clone(),
            5 => ww.se_reduce.bias = v.clone(),
            6 => ww.se_expand.kernel = v.clone(),
            _ => ww.se_expand.bias = v.clone(),
        }
        let (_, _, r, _, sig) = forward(&ff, &aa, &ww);
        Probe {
            value: gradcheck::project(&r.f_r_vec, &proj),
            signature: sig,
        }
    });
    Ok(report("attention_eq1_to_eq4", stats))
}

pub fn check_action_head(name: &str, rng: &mut impl Rng) -> Result<BlockReport> {
    let d = 6;
    let w = rand_attention(d, 2, 7, 4, rng);
    let f_app = rand_tensor(&[d], 1.0, rng);
    let f_r = rand_tensor(&[d], 1.0, rng);
    let proj = rand_tensor(&[4], 1.0, rng);
    let (scores, cache) = attention::action_head(&f_app, &f_r, &w)?;
    let mut gw = w.clone();
    gw.head_fc1 = gw.head_fc1.zeros_like();
    gw.head_fc2 = gw.head_fc2.zeros_like();
    let (g_fapp, g_fr) = attention::action_head_backward(&w, &scores, &cache, &proj, &mut gw)?;
    let targets = [
        ("f_app", &f_app, &g_fapp),
        ("f_r", &f_r, &g_fr),
        ("fc1.kernel", &w.head_fc1.kernel, &gw.head_fc1.kernel),
        ("fc1.bias", &w.head_fc1.bias, &gw.head_fc1.bias),
        ("fc2.kernel", &w.head_fc2.kernel, &gw.head_fc2.kernel),
        ("fc2.bias", &w.head_fc2.bias, &gw.head_fc2.bias),
    ];
    let stats = check_targets(&targets, 48, |i, v| {
        let (mut fa, mut fr, mut ww) = (f_app.clone(), f_r.clone(), w.clone());
        match i {
            0 => fa = v.clone(),
            1 => fr = v.clone(),
            2 => ww.head_fc1.kernel = v.clone(),
            3 => ww.head_fc1.bias = v.clone(),
            4 => ww.head_fc2.kernel = v.clone(),
            _ => ww.head_fc2.bias = v.clone(),
        }
        let (s, c) = attention::action_head(&fa, &fr, &ww).unwrap();
        Probe {
            value: gradcheck::project(&s, &proj),
            signature: gradcheck::relu_signature(&c.hidden_pre).collect(),
        }
    });
    Ok(report(name, stats))
}

pub fn check_pairwise(rng: &mut impl Rng) -> Result<BlockReport> {
    let n = 3;
    let w = PairwiseWeights {
        conv1: rand_conv(5, 5, 2, model::PAIRWISE_C1, rng),
        conv2: rand_conv(5, 5, model::PAIRWISE_C1, model::PAIRWISE_C2, rng),
        fc: rand_conv(
            1,
            1,
            model::PAIRWISE_POOLED * model::PAIRWISE_POOLED * model::PAIRWISE_C2,
            n,
            rng,
        ),
    };
    let human = BBox { x1: 3.0, y1: 2.0, x2: rng.gen_range(20.0..40.0), y2: 50.0 };
    let object = BBox { x1: rng.gen_range(10.0..30.0), y1: 20.0, x2: 60.0, y2: 44.0 };
    // Soften the binary pattern so the input gradient is probed off-lattice.
    let jitter = rand_tensor(&[model::PATTERN_SIZE, model::PATTERN_SIZE, 2], 0.1, rng);
    let mut pattern = pipeline::interaction_pattern::<f64>(&human, &object).map(|v| v * 0.8 + 0.1);
    pattern.axpy(1.0, &jitter)?;
    let proj = rand_tensor(&[n], 1.0, rng);
    let probe = |p: &Tensor<f64>, w: &PairwiseWeights<f64>| {
        let (s, c) = pipeline::pairwise_stream(p, w).unwrap();
        let sig: Vec<u64> = c
            .arg1
            .iter()
            .chain(&c.arg2)
            .map(|&a| a as u64)
            .chain(gradcheck::relu_signature(&c.pre1))
            .chain(gradcheck::relu_signature(&c.pre2))
            .collect();
        (s, c, sig)
    };
    let (s, c, _) = probe(&pattern, &w);
    let (g_p, gw) = pipeline::pairwise_backward(&w, &s, &c, &proj)?;
    let targets = [
        ("pattern", &pattern, &g_p),
        ("conv1.kernel", &w.conv1.kernel, &gw.conv1.kernel),
        ("conv1.bias", &w.conv1.bias, &gw.conv1.bias),
        ("conv2.kernel", &w.conv2.kernel, &gw.conv2.kernel),
        ("conv2.bias", &w.conv2.bias, &gw.conv2.bias),
        ("fc.kernel", &w.fc.kernel, &gw.fc.kernel),
        ("fc.bias", &w.fc.bias, &gw.fc.bias),
    ];
    let stats = check_targets(&targets, 12, |i, v| {
        let (mut pp, mut ww) = (pattern.clone(), w.clone());
        match i {
            0 => pp = v.clone(),
            1 => ww.conv1.kernel = v.clone(),
            2 => ww.conv1.bias = v.clone(),
            3 => ww.conv2.kernel = v.clone(),
            4 => ww.conv2.bias = v.clone(),
            5 => ww.fc.kernel = v.clone(),
            _ => ww.fc.bias = v.clone(),
        }
        let (s, _, sig) = probe(&pp, &ww);
        Probe {
            value: gradcheck::project(&s, &proj),
            signature: sig,
        }
    });
    Ok(report("pairwise_net", stats))
}

pub fn check_backbone(rng: &mut impl Rng) -> Result<BlockReport> {
    let img = rand_tensor(&[11, 13, 3], 1.0, rng);
    let w = BackboneWeights {
        stage1: rand_conv(3, 3, 3, 4, rng),
        stage2: rand_conv(3, 3, 4, 5, rng),
    };
    let probe = |im: &Tensor<f64>, w: &BackboneWeights<f64>| {
        let (f, c) = features::toy_backbone_cached(im, w).unwrap();
        let sig: Vec<u64> = gradcheck::relu_signature(&c.pre1)
            .chain(gradcheck::relu_signature(&c.pre2))
            .collect();
        (f, c, sig)
    };
    let (f, cache, _) = probe(&img, &w);
    let proj = rand_tensor(f.feature_map.dims(), 1.0, rng);
    let (g_img, gw) = features::toy_backbone_backward(&img, &w, &cache, &proj)?;
    let targets = [
        ("image", &img, &g_img),
        ("stage1.kernel", &w.stage1.kernel, &gw.stage1.kernel),
        ("stage1.bias", &w.stage1.bias, &gw.stage1.bias),
        ("stage2.kernel", &w.stage2.kernel, &gw.stage2.kernel),
        ("stage2.bias", &w.stage2.bias, &gw.stage2.bias),
    ];
    let stats = check_targets(&targets, 48, |i, v| {
        let (mut im, mut ww) = (img.clone(), w.clone());
        match i {
            0 => im = v.clone(),
            1 => ww.stage1.kernel = v.clone(),
            2 => ww.stage1.bias = v.clone(),
            3 => ww.stage2.kernel = v.clone(),
            _ => ww.stage2.bias = v.clone(),
        }
        let (f, _, sig) = probe(&im, &ww);
        Probe {
            value: gradcheck::project(&f.feature_map, &proj),
            signature: sig,
        }
    });
    Ok(report("toy_backbone", stats))
}

pub fn check_bce(rng: &mut impl Rng) -> Result<BlockReport> {
    let scores = Tensor::from_fn(vec![6], |_| rng.gen_range(0.05..0.95))?;
    let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    let (_, g) = bce_with_grad(&scores, &labels)?;
    let stats = gradcheck::check(&scores, &g, 6, |s| Probe::smooth(bce_loss(s, &labels).unwrap()));
    Ok(report("bce_loss", stats))
}

/// Whole-scene loss w.r.t. every weight tensor (a few coordinates each).
pub fn check_scene_loss(rng: &mut impl Rng) -> Result<BlockReport> {
    let cfg = ModelConfig {
        n_actions: 2,
        input_channels: 3,
        context_channels: 4,
        dim: 4,
        kernel_size: 3,
        grid: 2,
        embed: 1,
        samples: 2,
        reduction: 2,
        head_hidden: 3,
        human_thresh: 0.0,
        object_thresh: 0.0,
        roles: vec![RoleSlot { action_id: 0, role_id: 0 }, RoleSlot { action_id: 1, role_id: 0 }],
    };
    let mut w = ModelWeights::<f64>::init(&cfg, rng)?;
    for t in w.tensors_mut() {
        if t.rank() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let feats = ImageFeatures::new(rand_tensor(&[6, 6, 3], 1.0, rng).map(f64::abs), 24, 24, 4)?;
    let layout = SceneLayout {
        human: BBox { x1: 2.0, y1: 3.0, x2: 13.0, y2: 21.0 },
        objects: vec![
            BBox { x1: 12.0, y1: 5.0, x2: 20.0, y2: 14.0 },
            BBox { x1: 1.0, y1: 15.0, x2: 9.0, y2: 23.5 },
        ],
        labels: vec![vec![1.0, 0.0], vec![0.0, 0.0]],
    };
    let grid = cfg.roi_grid();
    let (_, grads) = scene_loss(&w, &feats, &layout, grid)?;
    let names: Vec<String> = w.tensors().into_iter().map(|(n, _)| n).collect();
    let params: Vec<Tensor<f64>> = w.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let gts: Vec<Tensor<f64>> = grads.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let targets: Vec<(&str, &Tensor<f64>, &Tensor<f64>)> = names
        .iter()
        .zip(&params)
        .zip(&gts)
        .map(|((n, p), g)| (n.as_str(), p, g))
        .collect();
    let stats = check_targets(&targets, 4, |i, v| {
        let mut ww = w.clone();
        *ww.tensors_mut().into_iter().nth(i).expect("index") = v.clone();
        let (loss, _) = scene_loss(&ww, &feats, &layout, grid).unwrap();
        Probe {
            value: loss,
            signature: scene_signature(&ww, &feats, &layout, grid),
        }
    });
    Ok(report("scene_loss", stats))
}

/// Branch signature of a full scene forward: argmaxes and ReLU masks of every
/// box and pair.
fn scene_signature(w: &ModelWeights<f64>, feats: &ImageFeatures<f64>, layout: &SceneLayout, grid: RoiGrid) -> Vec<u64> {
    let pass = pipeline::prepare_image(&feats.feature_map, w).unwrap();
    let stride = feats.spatial_stride as f64;
    let mut sig = Vec::new();
    let push_box = |sig: &mut Vec<u64>, sw: &model::StreamWeights<f64>, maps: &pipeline::StreamMaps<f64>, b: &BBox| {
        let p = pipeline::stream_forward(sw, maps, &pass.a, &b.to_feature(stride), grid).unwrap();
        sig.extend(p.appearance.roi.argmax.iter().map(|&a| a as u64));
        sig.extend(gradcheck::relu_signature(context::appearance_pre_activation(&p.appearance)));
        sig.extend(gradcheck::relu_signature(&p.attend.refine.channel.squeeze_pre));
        sig.extend(gradcheck::relu_signature(&p.attend.head.hidden_pre));
        sig.push(u64::MAX);
    };
    push_box(&mut sig, &w.human, &pass.human, &layout.human);
    for o in &layout.objects {
        push_box(&mut sig, &w.object, &pass.object, o);
        let pattern = pipeline::interaction_pattern::<f64>(&layout.human, o);
        let (_, c) = pipeline::pairwise_stream(&pattern, &w.pairwise).unwrap();
        sig.extend(c.arg1.iter().chain(&c.arg2).map(|&a| a as u64));
        sig.extend(gradcheck::relu_signature(&c.pre1));
        sig.extend(gradcheck::relu_signature(&c.pre2));
        sig.push(u64::MAX);
    }
    sig
}

/// Run every block's gradient check in 64-bit mode.
pub fn gradcheck_all(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = vec![
        check_context_aggregation(&mut rng)?,
        check_local_encoding(&mut rng)?,
        check_attention_chain(&mut rng)?,
        check_action_head("human_action_head", &mut rng)?,
        check_action_head("object_action_head", &mut rng)?,
        check_pairwise(&mut rng)?,
        check_backbone(&mut rng)?,
        check_bce(&mut rng)?,
        check_scene_loss(&mut rng)?,
    ];
    let passed = blocks.iter().all(|b| b.passed);
    Ok(GradReport {
        seed,
        tolerance: GRAD_TOL,
        blocks,
        passed,
    })
}
