//! Role AP / mAP for HOI triplets: greedy score-ordered matching on the
//! human and object boxes, all-point interpolated AP, IoU-threshold sweeps and
//! the known-object restriction.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HoiError, Result};
use crate::features::BBox;
use crate::model::RoleSlot;
use crate::par;
use crate::pipeline::{DetectionsFile, HoiTriplet};

/// Thresholds of the standard IoU sweep.
pub const SWEEP_THRESHOLDS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTriplet {
    pub image_id: String,
    pub human_box: BBox,
    pub object_box: Option<BBox>,
    pub action_id: u32,
    pub role_id: u32,
    /// Detector category of the object, used by known-object evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_class: Option<u32>,
}

impl GroundTruthTriplet {
    fn slot(&self) -> RoleSlot {
        RoleSlot {
            action_id: self.action_id,
            role_id: self.role_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub action_id: u32,
    pub role_id: u32,
    pub name: String,
    /// Object class required by known-object mode; `None` means every image.
    pub object_class: Option<u32>,
}

impl Category {
    pub fn slot(&self) -> RoleSlot {
        RoleSlot {
            action_id: self.action_id,
            role_id: self.role_id,
        }
    }
}

/// Ground-truth JSON document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub triplets: Vec<GroundTruthTriplet>,
    #[serde(default)]
    pub categories: Vec<Category>,
}

impl GroundTruthFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    /// The declared categories, or one per distinct `(action, role)` in the
    /// triplets when none are declared.
    pub fn categories(&self) -> Vec<Category> {
        if !self.categories.is_empty() {
            return self.categories.clone();
        }
        let slots: BTreeSet<RoleSlot> = self.triplets.iter().map(|g| g.slot()).collect();
        slots
            .into_iter()
            .map(|s| Category {
                action_id: s.action_id,
                role_id: s.role_id,
                name: format!("action{}_role{}", s.action_id, s.role_id),
                object_class: None,
            })
            .collect()
    }
}

impl DetectionsFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file: DetectionsFile = read_json(path)?;
        for t in &file.triplets {
            if !(0.0..=1.0).contains(&t.score) {
                return Err(HoiError::Validation(format!(
                    "{}: triplet score {} outside [0, 1]",
                    path.display(),
                    t.score
                )));
            }
        }
        Ok(file)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| HoiError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HoiError::json(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    #[default]
    Default,
    KnownObject,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub mode: EvalMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: DEFAULT_IOU,
            mode: EvalMode::Default,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(HoiError::Validation(format!(
                "IoU threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub action_id: u32,
    pub role_id: u32,
    pub name: String,
    pub n_gt: usize,
    pub n_det: usize,
    /// `None` when the category has no ground truth (excluded from the mean).
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    /// `(recall, precision)` after each detection in score order.
    pub pr: Vec<[f64; 2]>,
    /// TP flag per detection in score order.
    #[serde(skip)]
    pub matches: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub iou_threshold: f64,
    pub mode: EvalMode,
    pub per_category: Vec<CategoryResult>,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// Overlap criterion of a detection against a ground truth of the same slot:
/// `min(iou_human, iou_object)`, or the human IoU alone when neither has an
/// object. `None` if exactly one of them has an object.
pub fn pair_overlap(det_human: &BBox, det_object: Option<&BBox>, gt: &GroundTruthTriplet) -> Option<f64> {
    let h = iou(det_human, &gt.human_box);
    match (det_object, gt.object_box.as_ref()) {
        (None, None) => Some(h),
        (Some(d), Some(g)) => Some(h.min(iou(d, g))),
        _ => None,
    }
}

/// Whether a detection may match a ground truth at `threshold`.
pub fn feasible(det: &HoiTriplet, gt: &GroundTruthTriplet, threshold: f64) -> bool {
    det.action_id == gt.action_id
        && det.role_id == gt.role_id
        && pair_overlap(&det.human_box, det.object_box.as_ref(), gt).is_some_and(|o| o > threshold)
}

fn check_duplicates<'a>(gts: impl Iterator<Item = &'a GroundTruthTriplet>) -> Result<()> {
    let mut seen = HashSet::new();
    for g in gts {
        let key = (
            g.image_id.as_str(),
            g.action_id,
            g.role_id,
            g.human_box.as_array().map(f64::to_bits),
            g.object_box.map(|b| b.as_array().map(f64::to_bits)),
        );
        if !seen.insert(key) {
            return Err(HoiError::Validation(format!(
                "duplicate ground truth in image {} for action {} role {}",
                g.image_id, g.action_id, g.role_id
            )));
        }
    }
    Ok(())
}

/// Greedy matcher state for one image.
struct Matcher<'a> {
    gts: Vec<&'a GroundTruthTriplet>,
    consumed: Vec<bool>,
}

impl<'a> Matcher<'a> {
    fn new(gts: Vec<&'a GroundTruthTriplet>) -> Self {
        let consumed = vec![false; gts.len()];
        Matcher { gts, consumed }
    }

    /// Consume the unconsumed feasible GT with the highest overlap (lowest
    /// index on ties); returns whether one was found.
    fn take(&mut self, det: &HoiTriplet, threshold: f64) -> bool {
        let mut best: Option<(usize, f64)> = None;
        for (i, g) in self.gts.iter().enumerate() {
            if self.consumed[i] || g.action_id != det.action_id || g.role_id != det.role_id {
                continue;
            }
            let Some(ov) = pair_overlap(&det.human_box, det.object_box.as_ref(), g) else {
                continue;
            };
            if ov > threshold && best.is_none_or(|(_, b)| ov > b) {
                best = Some((i, ov));
            }
        }
        if let Some((i, _)) = best {
            self.consumed[i] = true;
            true
        } else {
            false
        }
    }
}

/// Match one image's detections (already sorted by descending score) against
/// its ground truth. Returns one TP flag per detection.
pub fn match_image(
    dets: &[HoiTriplet],
    gts: &[GroundTruthTriplet],
    config: &EvalConfig,
) -> Result<Vec<bool>> {
    config.validate()?;
    let image = dets
        .first()
        .map(|d| d.image_id.as_str())
        .or_else(|| gts.first().map(|g| g.image_id.as_str()));
    if let Some(id) = image {
        let stray = dets.iter().any(|d| d.image_id != id) || gts.iter().any(|g| g.image_id != id);
        if stray {
            return Err(HoiError::Validation(format!(
                "match_image: entries from more than one image (first is {id})"
            )));
        }
    }
    check_duplicates(gts.iter())?;
    let mut m = Matcher::new(gts.iter().collect());
    Ok(dets
        .iter()
        .map(|d| m.take(d, config.iou_threshold))
        .collect())
}

/// Indices of `scores` in descending order; ties keep input order.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// `(recall, precision)` after each detection of an already score-sorted
/// flag list.
pub fn pr_curve(flags: &[bool], n_gt: usize) -> Vec<[f64; 2]> {
    let (mut tp, mut fp) = (0usize, 0usize);
    flags
        .iter()
        .map(|&f| {
            if f {
                tp += 1;
            } else {
                fp += 1;
            }
            let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
            [recall, tp as f64 / (tp + fp) as f64]
        })
        .collect()
}

/// All-point interpolated AP over an already score-sorted flag list.
fn ap_sorted(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let pr = pr_curve(flags, n_gt);
    let mut envelope: Vec<f64> = pr.iter().map(|p| p[1]).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in pr.iter().zip(envelope) {
        ap += (p[0] - prev_recall) * env;
        prev_recall = p[0];
    }
    ap.clamp(0.0, 1.0)
}

/// AP of `(score, is_tp)` pairs against `n_gt` ground truths. Detections are
/// sorted by descending score (stable). Returns 0 when `n_gt == 0`.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    let scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let flags: Vec<bool> = score_order(&scores).into_iter().map(|i| scored[i].1).collect();
    ap_sorted(&flags, n_gt)
}

fn evaluate_category(
    cat: &Category,
    dets: &[&HoiTriplet],
    gts: &[&GroundTruthTriplet],
    allowed_images: Option<&HashSet<&str>>,
    threshold: f64,
) -> CategoryResult {
    let admit = |id: &str| allowed_images.is_none_or(|s| s.contains(id));
    let slot = cat.slot();
    let dets: Vec<&HoiTriplet> = dets
        .iter()
        .copied()
        .filter(|d| d.action_id == slot.action_id && d.role_id == slot.role_id && admit(&d.image_id))
        .collect();
    let mut per_image: HashMap<&str, Vec<&GroundTruthTriplet>> = HashMap::new();
    let mut n_gt = 0;
    for g in gts.iter().copied() {
        if g.slot() == slot && admit(&g.image_id) {
            per_image.entry(g.image_id.as_str()).or_default().push(g);
            n_gt += 1;
        }
    }
    let mut matchers: HashMap<&str, Matcher> = per_image
        .into_iter()
        .map(|(k, v)| (k, Matcher::new(v)))
        .collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let matches: Vec<bool> = score_order(&scores)
        .into_iter()
        .map(|i| {
            let d = dets[i];
            matchers
                .get_mut(d.image_id.as_str())
                .is_some_and(|m| m.take(d, threshold))
        })
        .collect();
    let tp = matches.iter().filter(|&&m| m).count();
    CategoryResult {
        action_id: cat.action_id,
        role_id: cat.role_id,
        name: cat.name.clone(),
        n_gt,
        n_det: dets.len(),
        ap: (n_gt > 0).then(|| ap_sorted(&matches, n_gt)),
        tp,
        fp: matches.len() - tp,
        pr: pr_curve(&matches, n_gt),
        matches,
    }
}

/// Per-category AP and their unweighted mean over categories that have
/// ground truth (0 when none do).
pub fn evaluate(
    dets: &[HoiTriplet],
    gts: &[GroundTruthTriplet],
    categories: &[Category],
    config: &EvalConfig,
) -> Result<EvalResult> {
    config.validate()?;
    check_duplicates(gts.iter())?;
    let det_refs: Vec<&HoiTriplet> = dets.iter().collect();
    let gt_refs: Vec<&GroundTruthTriplet> = gts.iter().collect();

    let mut images_with_class: HashMap<u32, HashSet<&str>> = HashMap::new();
    if config.mode == EvalMode::KnownObject {
        for g in gts {
            if let Some(c) = g.object_class {
                images_with_class
                    .entry(c)
                    .or_default()
                    .insert(g.image_id.as_str());
            }
        }
    }
    let empty = HashSet::new();
    let per_category = par::map(categories, |cat| {
        let allowed = match (config.mode, cat.object_class) {
            (EvalMode::KnownObject, Some(c)) => Some(images_with_class.get(&c).unwrap_or(&empty)),
            _ => None,
        };
        evaluate_category(cat, &det_refs, &gt_refs, allowed, config.iou_threshold)
    });
    let aps: Vec<f64> = per_category.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(EvalResult {
        map,
        iou_threshold: config.iou_threshold,
        mode: config.mode,
        per_category,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

pub fn threshold_sweep(
    dets: &[HoiTriplet],
    gts: &[GroundTruthTriplet],
    categories: &[Category],
    thresholds: &[f64],
    mode: EvalMode,
) -> Result<Vec<SweepPoint>> {
    thresholds
        .iter()
        .map(|&t| {
            let cfg = EvalConfig {
                iou_threshold: t,
                mode,
            };
            Ok(SweepPoint {
                threshold: t,
                map: evaluate(dets, gts, categories, &cfg)?.map,
            })
        })
        .collect()
}

/// Aligned plain-text table of per-category results.
pub fn format_table(result: &EvalResult) -> String {
    let width = result
        .per_category
        .iter()
        .map(|c| c.name.len())
        .max()
        .unwrap_or(0)
        .max(8);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>6}  {:>4}  {:>6}  {:>6}  {:>8}",
        "category", "action", "role", "n_gt", "n_det", "AP"
    );
    for c in &result.per_category {
        let ap = c.ap.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
        let _ = writeln!(
            s,
            "{:<width$}  {:>6}  {:>4}  {:>6}  {:>6}  {:>8}",
            c.name, c.action_id, c.role_id, c.n_gt, c.n_det, ap
        );
    }
    let _ = writeln!(
        s,
        "mAP@{:.2} ({:?}) = {:.4}",
        result.iou_threshold, result.mode, result.map
    );
    s
}

pub fn format_sweep(points: &[SweepPoint]) -> String {
    let mut s = String::from("IoU thresh  mAP\n");
    for p in points {
        let _ = writeln!(s, "{:>10.2}  {:.4}", p.threshold, p.map);
    }
    s
}
