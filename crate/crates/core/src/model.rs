//! Model configuration and the full parameter set, with initialization and
//! the weights-directory format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionWeights;
use crate::context::{ContextAggWeights, LocalEncodingWeights, RoiGrid};
use crate::error::{HoiError, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::ConvWeights;
use crate::tensor::Tensor;

pub const ROLE_DIRECT_OBJECT: u32 = 0;
pub const ROLE_INSTRUMENT: u32 = 1;
pub const ROLE_AGENT_ONLY: u32 = 2;

/// Side of the square two-channel interaction pattern.
pub const PATTERN_SIZE: usize = 64;

/// One evaluated `(action, role)` slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RoleSlot {
    pub action_id: u32,
    pub role_id: u32,
}

impl RoleSlot {
    pub fn is_agent_only(&self) -> bool {
        self.role_id == ROLE_AGENT_ONLY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_actions: usize,
    /// Backbone feature channels.
    pub input_channels: usize,
    /// Output channels of the context aggregation block.
    pub context_channels: usize,
    /// Attention / appearance width `D`.
    pub dim: usize,
    /// Large-kernel extent `k`.
    pub kernel_size: usize,
    /// PSRoIAlign grid `G`.
    pub grid: usize,
    /// Per-cell embedding width `E`.
    pub embed: usize,
    /// Bilinear samples per axis per cell.
    pub samples: usize,
    /// SE reduction ratio `r`.
    pub reduction: usize,
    /// Hidden width of the action head.
    pub head_hidden: usize,
    pub human_thresh: f64,
    pub object_thresh: f64,
    pub roles: Vec<RoleSlot>,
}

impl ModelConfig {
    /// V-COCO-sized layout: 26 actions with their direct-object /
    /// instrument / agent-only roles (agent-only for stand, walk, run, smile,
    /// point), backbone width 2048.
    pub fn vcoco() -> Self {
        // (action, roles)
        const TABLE: [(&str, &[u32]); 26] = [
            ("hold", &[ROLE_DIRECT_OBJECT]),
            ("stand", &[ROLE_AGENT_ONLY]),
            ("sit", &[ROLE_INSTRUMENT]),
            ("ride", &[ROLE_INSTRUMENT]),
            ("walk", &[ROLE_AGENT_ONLY]),
            ("look", &[ROLE_DIRECT_OBJECT]),
            ("hit", &[ROLE_INSTRUMENT, ROLE_DIRECT_OBJECT]),
            ("eat", &[ROLE_DIRECT_OBJECT, ROLE_INSTRUMENT]),
            ("jump", &[ROLE_INSTRUMENT]),
            ("lay", &[ROLE_INSTRUMENT]),
            ("talk_on_phone", &[ROLE_INSTRUMENT]),
            ("carry", &[ROLE_DIRECT_OBJECT]),
            ("throw", &[ROLE_DIRECT_OBJECT]),
            ("catch", &[ROLE_DIRECT_OBJECT]),
            ("cut", &[ROLE_INSTRUMENT, ROLE_DIRECT_OBJECT]),
            ("run", &[ROLE_AGENT_ONLY]),
            ("work_on_computer", &[ROLE_INSTRUMENT]),
            ("ski", &[ROLE_INSTRUMENT]),
            ("surf", &[ROLE_INSTRUMENT]),
            ("skateboard", &[ROLE_INSTRUMENT]),
            ("smile", &[ROLE_AGENT_ONLY]),
            ("drink", &[ROLE_INSTRUMENT]),
            ("kick", &[ROLE_DIRECT_OBJECT]),
            ("point", &[ROLE_AGENT_ONLY]),
            ("read", &[ROLE_DIRECT_OBJECT]),
            ("snowboard", &[ROLE_INSTRUMENT]),
        ];
        let roles = TABLE
            .iter()
            .enumerate()
            .flat_map(|(a, (_, rs))| {
                rs.iter().map(move |&r| RoleSlot {
                    action_id: a as u32,
                    role_id: r,
                })
            })
            .collect();
        ModelConfig {
            n_actions: TABLE.len(),
            input_channels: 2048,
            context_channels: 512,
            dim: 512,
            kernel_size: 7,
            grid: 7,
            embed: 8,
            samples: 2,
            reduction: 16,
            head_hidden: 512,
            human_thresh: 0.8,
            object_thresh: 0.4,
            roles,
        }
    }

    pub fn roi_grid(&self) -> RoiGrid {
        RoiGrid {
            grid: self.grid,
            samples: self.samples,
        }
    }

    pub fn paired_slots(&self) -> impl Iterator<Item = &RoleSlot> {
        self.roles.iter().filter(|r| !r.is_agent_only())
    }

    pub fn agent_only_slots(&self) -> impl Iterator<Item = &RoleSlot> {
        self.roles.iter().filter(|r| r.is_agent_only())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_actions", self.n_actions),
            ("input_channels", self.input_channels),
            ("context_channels", self.context_channels),
            ("dim", self.dim),
            ("grid", self.grid),
            ("embed", self.embed),
            ("samples", self.samples),
            ("reduction", self.reduction),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(HoiError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.kernel_size % 2 == 0 {
            return Err(HoiError::Config(format!(
                "kernel_size {} must be odd",
                self.kernel_size
            )));
        }
        if self.dim / self.reduction == 0 {
            return Err(HoiError::Config(format!(
                "dim {} / reduction {} must be >= 1",
                self.dim, self.reduction
            )));
        }
        for t in [self.human_thresh, self.object_thresh] {
            if !(0.0..=1.0).contains(&t) {
                return Err(HoiError::Config(format!("threshold {t} outside [0, 1]")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.roles {
            if r.action_id as usize >= self.n_actions || r.role_id > ROLE_AGENT_ONLY {
                return Err(HoiError::Config(format!("role slot {r:?} out of range")));
            }
            if !seen.insert(*r) {
                return Err(HoiError::Config(format!("duplicate role slot {r:?}")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HoiError::io(path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| HoiError::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| HoiError::json(path, e))?;
        std::fs::write(path, text).map_err(|e| HoiError::io(path, e))
    }
}

/// Parameters of one appearance stream (human or object).
#[derive(Debug, Clone, PartialEq)]
pub struct StreamWeights<T> {
    pub context: ContextAggWeights<T>,
    pub local: LocalEncodingWeights<T>,
    pub attention: AttentionWeights<T>,
}

/// `5x5 2->16`, `5x5 16->32`, then FC over the `16 x 16 x 32` pooled map.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseWeights<T> {
    pub conv1: ConvWeights<T>,
    pub conv2: ConvWeights<T>,
    pub fc: ConvWeights<T>,
}

pub const PAIRWISE_C1: usize = 16;
pub const PAIRWISE_C2: usize = 32;
pub const PAIRWISE_POOLED: usize = PATTERN_SIZE / 4;

impl<T: Scalar> PairwiseWeights<T> {
    pub fn zeros(n_actions: usize) -> Result<Self> {
        Ok(PairwiseWeights {
            conv1: ConvWeights::zeros(5, 5, 2, PAIRWISE_C1)?,
            conv2: ConvWeights::zeros(5, 5, PAIRWISE_C1, PAIRWISE_C2)?,
            fc: ConvWeights::zeros(
                1,
                1,
                PAIRWISE_POOLED * PAIRWISE_POOLED * PAIRWISE_C2,
                n_actions,
            )?,
        })
    }
}

/// All learnable parameters. The `1 x 1` projection producing `A` is shared
/// by both appearance streams.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub projection: ConvWeights<T>,
    pub human: StreamWeights<T>,
    pub object: StreamWeights<T>,
    pub pairwise: PairwiseWeights<T>,
}

impl<T: Scalar> StreamWeights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Ok(StreamWeights {
            context: ContextAggWeights::zeros(
                cfg.kernel_size,
                cfg.input_channels,
                cfg.context_channels,
                cfg.context_channels,
            )?,
            local: LocalEncodingWeights::zeros(cfg.context_channels, cfg.grid, cfg.embed, cfg.dim)?,
            attention: AttentionWeights::zeros(cfg.dim, cfg.reduction, cfg.head_hidden, cfg.n_actions)?,
        })
    }
}

fn conv_tensors<'a, T>(prefix: &str, c: &'a ConvWeights<T>, out: &mut Vec<(String, &'a Tensor<T>)>) {
    out.push((format!("{prefix}.kernel"), &c.kernel));
    out.push((format!("{prefix}.bias"), &c.bias));
}

fn conv_tensors_mut<'a, T>(c: &'a mut ConvWeights<T>, out: &mut Vec<&'a mut Tensor<T>>) {
    out.push(&mut c.kernel);
    out.push(&mut c.bias);
}

impl<T: Scalar> ModelWeights<T> {
    /// Zero-valued parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ModelWeights {
            projection: ConvWeights::zeros(1, 1, cfg.input_channels, cfg.dim)?,
            human: StreamWeights::zeros(cfg)?,
            object: StreamWeights::zeros(cfg)?,
            pairwise: PairwiseWeights::zeros(cfg.n_actions)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Glorot-uniform kernels (`±sqrt(6 / (fan_in + fan_out))`), zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut w = Self::zeros(cfg)?;
        for t in w.tensors_mut() {
            glorot_fill(t, rng);
        }
        Ok(w)
    }

    /// Every parameter tensor with its dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        conv_tensors("projection", &self.projection, &mut out);
        for (name, s) in [("human", &self.human), ("object", &self.object)] {
            let c = &s.context;
            conv_tensors(&format!("{name}.context.a_vertical"), &c.a_vertical, &mut out);
            conv_tensors(&format!("{name}.context.a_horizontal"), &c.a_horizontal, &mut out);
            conv_tensors(&format!("{name}.context.b_horizontal"), &c.b_horizontal, &mut out);
            conv_tensors(&format!("{name}.context.b_vertical"), &c.b_vertical, &mut out);
            conv_tensors(&format!("{name}.local.score_conv"), &s.local.score_conv, &mut out);
            conv_tensors(&format!("{name}.local.projection"), &s.local.projection, &mut out);
            let a = &s.attention;
            conv_tensors(&format!("{name}.attention.heatmap_conv"), &a.heatmap_conv, &mut out);
            conv_tensors(&format!("{name}.attention.se_reduce"), &a.se_reduce, &mut out);
            conv_tensors(&format!("{name}.attention.se_expand"), &a.se_expand, &mut out);
            conv_tensors(&format!("{name}.attention.head_fc1"), &a.head_fc1, &mut out);
            conv_tensors(&format!("{name}.attention.head_fc2"), &a.head_fc2, &mut out);
        }
        conv_tensors("pairwise.conv1", &self.pairwise.conv1, &mut out);
        conv_tensors("pairwise.conv2", &self.pairwise.conv2, &mut out);
        conv_tensors("pairwise.fc", &self.pairwise.fc, &mut out);
        out
    }

    /// Same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        conv_tensors_mut(&mut self.projection, &mut out);
        for s in [&mut self.human, &mut self.object] {
            let c = &mut s.context;
            conv_tensors_mut(&mut c.a_vertical, &mut out);
            conv_tensors_mut(&mut c.a_horizontal, &mut out);
            conv_tensors_mut(&mut c.b_horizontal, &mut out);
            conv_tensors_mut(&mut c.b_vertical, &mut out);
            conv_tensors_mut(&mut s.local.score_conv, &mut out);
            conv_tensors_mut(&mut s.local.projection, &mut out);
            let a = &mut s.attention;
            conv_tensors_mut(&mut a.heatmap_conv, &mut out);
            conv_tensors_mut(&mut a.se_reduce, &mut out);
            conv_tensors_mut(&mut a.se_expand, &mut out);
            conv_tensors_mut(&mut a.head_fc1, &mut out);
            conv_tensors_mut(&mut a.head_fc2, &mut out);
        }
        conv_tensors_mut(&mut self.pairwise.conv1, &mut out);
        conv_tensors_mut(&mut self.pairwise.conv2, &mut out);
        conv_tensors_mut(&mut self.pairwise.fc, &mut out);
        out
    }

    pub fn add_scaled(&mut self, alpha: T, other: &Self) -> Result<()> {
        let src: Vec<Tensor<T>> = other.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(&src) {
            dst.axpy(alpha, s)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self, cfg: &ModelConfig) -> Result<ModelWeights<U>> {
        let mut out = ModelWeights::<U>::zeros(cfg)?;
        let src: Vec<Tensor<U>> = self.tensors().into_iter().map(|(_, t)| t.cast()).collect();
        for (dst, s) in out.tensors_mut().into_iter().zip(src) {
            if dst.dims() != s.dims() {
                return Err(HoiError::shape("ModelWeights::cast", dst.dims(), s.dims()));
            }
            *dst = s;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Check every tensor against the shapes implied by `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ModelWeights::<T>::zeros(cfg)?;
        for ((name, t), (_, e)) in self.tensors().iter().zip(expected.tensors()) {
            if t.dims() != e.dims() {
                return Err(HoiError::Config(format!(
                    "weight {name} has shape {:?}, config expects {:?}",
                    t.dims(),
                    e.dims()
                )));
            }
        }
        Ok(())
    }

    /// Write `weights.json` plus one tensor file per parameter into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| HoiError::io(dir, e))?;
        let mut entries = BTreeMap::new();
        for (name, t) in self.tensors() {
            let file = format!("{name}.hoit");
            t.save(dir.join(&file))?;
            entries.insert(
                name,
                WeightEntry {
                    path: file,
                    shape: t.dims().to_vec(),
                },
            );
        }
        let index = WeightsIndex {
            version: crate::tensor::FORMAT_VERSION,
            tensors: entries,
        };
        let path = dir.join(WEIGHTS_INDEX);
        let text = serde_json::to_string_pretty(&index).map_err(|e| HoiError::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| HoiError::io(&path, e))
    }

    /// Load a weights directory, checking names and shapes against `cfg`.
    pub fn load_dir(dir: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(WEIGHTS_INDEX);
        let text = std::fs::read_to_string(&path).map_err(|e| HoiError::io(&path, e))?;
        let index: WeightsIndex = serde_json::from_str(&text).map_err(|e| HoiError::json(&path, e))?;
        let mut w = ModelWeights::<T>::zeros(cfg)?;
        let names: Vec<String> = w.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, dst) in names.iter().zip(w.tensors_mut()) {
            let entry = index.tensors.get(name).ok_or_else(|| {
                HoiError::Config(format!("{}: missing weight {name}", path.display()))
            })?;
            if entry.shape != dst.dims() {
                return Err(HoiError::Config(format!(
                    "weight {name}: index shape {:?}, config expects {:?}",
                    entry.shape,
                    dst.dims()
                )));
            }
            let t = Tensor::<T>::load(dir.join(&entry.path))?;
            if t.dims() != dst.dims() {
                return Err(HoiError::Config(format!(
                    "{}: shape {:?}, expected {:?}",
                    entry.path,
                    t.dims(),
                    dst.dims()
                )));
            }
            *dst = t;
        }
        Ok(w)
    }
}

pub const WEIGHTS_INDEX: &str = "weights.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightEntry {
    path: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightsIndex {
    version: u8,
    tensors: BTreeMap<String, WeightEntry>,
}

/// Glorot-uniform for rank-4 kernels, zeros for biases.
pub fn glorot_fill<T: Scalar>(t: &mut Tensor<T>, rng: &mut impl Rng) {
    let d = t.dims().to_vec();
    if d.len() != 4 {
        t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let taps = d[0] * d[1];
    let limit = (6.0 / ((taps * d[2] + taps * d[3]) as f64)).sqrt();
    for v in t.data_mut() {
        *v = T::from_f64(rng.gen_range(-limit..limit));
    }
}
