//! Ingest of precomputed backbone features and detector boxes, plus a small
//! convolutional backbone for self-contained tests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HoiError, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::{self, ConvWeights};
use crate::tensor::Tensor;

/// Category id of "person" in detector output.
pub const PERSON_CLASS: u32 = 0;

/// Axis-aligned box in pixel (or feature-cell) coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x1, self.y1, self.x2, self.y2];
        if c.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(HoiError::Validation(format!(
                "box {c:?} has negative or non-finite coordinates"
            )));
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(HoiError::Validation(format!(
                "box {c:?} must satisfy x2 > x1 and y2 > y1"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    /// Image pixels to feature cells (division by stride, no rounding).
    pub fn to_feature(&self, stride: f64) -> BBox {
        self.scale(1.0 / stride)
    }

    pub fn from_feature(&self, stride: f64) -> BBox {
        self.scale(stride)
    }

    fn scale(&self, s: f64) -> BBox {
        BBox {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = HoiError;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.as_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Human,
    Object,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDetection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: u32,
    pub score: f64,
    pub kind: InstanceKind,
}

impl InstanceDetection {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(HoiError::Validation(format!(
                "detection score {} outside [0, 1]",
                self.score
            )));
        }
        let is_person = self.class_id == PERSON_CLASS;
        if is_person != (self.kind == InstanceKind::Human) {
            return Err(HoiError::Validation(format!(
                "class_id {} inconsistent with kind {:?}",
                self.class_id, self.kind
            )));
        }
        Ok(())
    }
}

/// Keep humans scoring strictly above `human_thresh` and objects strictly above
/// `object_thresh`, preserving order.
pub fn filter_detections(
    dets: &[InstanceDetection],
    human_thresh: f64,
    object_thresh: f64,
) -> Result<Vec<InstanceDetection>> {
    for t in [human_thresh, object_thresh] {
        if !(0.0..=1.0).contains(&t) {
            return Err(HoiError::Validation(format!("threshold {t} outside [0, 1]")));
        }
    }
    Ok(dets
        .iter()
        .filter(|d| match d.kind {
            InstanceKind::Human => d.score > human_thresh,
            InstanceKind::Object => d.score > object_thresh,
        })
        .cloned()
        .collect())
}

/// Backbone feature map of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures<T> {
    pub feature_map: Tensor<T>,
    pub image_width: u32,
    pub image_height: u32,
    /// Image pixels per feature cell.
    pub spatial_stride: u32,
}

impl<T: Scalar> ImageFeatures<T> {
    pub fn new(
        feature_map: Tensor<T>,
        image_width: u32,
        image_height: u32,
        spatial_stride: u32,
    ) -> Result<Self> {
        let f = ImageFeatures {
            feature_map,
            image_width,
            image_height,
            spatial_stride,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, _) = self.feature_map.hwc("ImageFeatures")?;
        if self.spatial_stride == 0 {
            return Err(HoiError::Validation("stride must be >= 1".into()));
        }
        let s = self.spatial_stride;
        let eh = self.image_height.div_ceil(s) as i64;
        let ew = self.image_width.div_ceil(s) as i64;
        if (h as i64 - eh).abs() > 1 || (w as i64 - ew).abs() > 1 {
            return Err(HoiError::Validation(format!(
                "feature map {h}x{w} inconsistent with image {}x{} at stride {s} (expected about {eh}x{ew})",
                self.image_height, self.image_width
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.feature_map.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.feature_map.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.feature_map.dims()[2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    /// Tensor file path, relative to the manifest's directory unless absolute.
    pub features: PathBuf,
    pub stride: u32,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub detections: Vec<InstanceDetection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<ManifestImage>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HoiError::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| HoiError::json(path, e))?;
        for img in &m.images {
            for d in &img.detections {
                d.validate()
                    .map_err(|e| HoiError::Validation(format!("image {}: {e}", img.id)))?;
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| HoiError::json(path, e))?;
        std::fs::write(path, text).map_err(|e| HoiError::io(path, e))
    }
}

/// Load one feature tensor and validate it against its manifest metadata.
pub fn load_features<T: Scalar>(path: impl AsRef<Path>, meta: &ManifestImage) -> Result<ImageFeatures<T>> {
    let map = Tensor::<T>::load(path.as_ref())?;
    ImageFeatures::new(map, meta.width, meta.height, meta.stride)
}

/// Resolve a manifest-relative path.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Two stride-2 `3 x 3` conv + ReLU stages: `H x W x 3` to
/// `ceil(H/4) x ceil(W/4) x c`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights<T> {
    pub stage1: ConvWeights<T>,
    pub stage2: ConvWeights<T>,
}

impl<T: Scalar> BackboneWeights<T> {
    pub fn zeros(c_mid: usize, c_out: usize) -> Result<Self> {
        Ok(BackboneWeights {
            stage1: ConvWeights::zeros(3, 3, 3, c_mid)?,
            stage2: ConvWeights::zeros(3, 3, c_mid, c_out)?,
        })
    }
}

pub const BACKBONE_STRIDE: u32 = 4;

#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    pub pre1: Tensor<T>,
    pub act1: Tensor<T>,
    pub pre2: Tensor<T>,
}

pub fn toy_backbone<T: Scalar>(image: &Tensor<T>, w: &BackboneWeights<T>) -> Result<ImageFeatures<T>> {
    Ok(toy_backbone_cached(image, w)?.0)
}

pub fn toy_backbone_cached<T: Scalar>(
    image: &Tensor<T>,
    w: &BackboneWeights<T>,
) -> Result<(ImageFeatures<T>, BackboneCache<T>)> {
    let (h, wd, c) = image.hwc("toy_backbone")?;
    if c != 3 {
        return Err(HoiError::shape("toy_backbone", image.dims(), &[h, wd, 3]));
    }
    let pre1 = ops::conv2d_strided(image, &w.stage1, 2)?;
    let act1 = ops::relu(&pre1);
    let pre2 = ops::conv2d_strided(&act1, &w.stage2, 2)?;
    let map = ops::relu(&pre2);
    let feats = ImageFeatures::new(map, wd as u32, h as u32, BACKBONE_STRIDE)?;
    Ok((feats, BackboneCache { pre1, act1, pre2 }))
}

/// Returns `(grad_image, grad_weights)` for an upstream gradient on the
/// feature map.
pub fn toy_backbone_backward<T: Scalar>(
    image: &Tensor<T>,
    w: &BackboneWeights<T>,
    cache: &BackboneCache<T>,
    grad_features: &Tensor<T>,
) -> Result<(Tensor<T>, BackboneWeights<T>)> {
    let g_pre2 = ops::relu_backward(&cache.pre2, grad_features)?;
    let (g_act1, g_stage2) = ops::conv2d_backward(&cache.act1, &w.stage2, 2, &g_pre2)?;
    let g_pre1 = ops::relu_backward(&cache.pre1, &g_act1)?;
    let (g_img, g_stage1) = ops::conv2d_backward(image, &w.stage1, 2, &g_pre1)?;
    Ok((
        g_img,
        BackboneWeights {
            stage1: g_stage1,
            stage2: g_stage2,
        },
    ))
}
