//! Command-line surface. Every subcommand writes machine-readable JSON to
//! stdout and human tables to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::error::{HoiError, Result};
use crate::evaluation::{
    self, EvalConfig, EvalMode, GroundTruthFile, DEFAULT_IOU, SWEEP_THRESHOLDS,
};
use crate::features::{self, InstanceKind, Manifest, ManifestImage};
use crate::model::{ModelConfig, ModelWeights};
use crate::par;
use crate::pipeline::{self, BoxAttention, DetectionsFile, HoiTriplet};
use crate::tensor::Tensor;
use crate::training::{self, ToyConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

fn version_string() -> &'static str {
    concat!(
        env!("CARGO_PKG_VERSION"),
        " (tensor format HOIT v1, weights index v1, detections JSON v1)"
    )
}

#[derive(Debug, Parser)]
#[command(name = "hoi", version = version_string(), about = "Contextual-attention HOI detection toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every human-object pair of every manifest image.
    Infer(InferArgs),
    /// Role mAP of a detections file against ground truth.
    Eval(EvalArgs),
    /// mAP at several IoU thresholds.
    Sweep(SweepArgs),
    /// Train on synthetic scenes and write weights plus a small eval set.
    TrainToy(TrainToyArgs),
    /// Finite-difference check of every differentiable block.
    Gradcheck(GradcheckArgs),
    /// Write per-box attention maps as HOIT tensors and PGM images.
    ExportAttn(ExportAttnArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's human detection threshold.
    #[arg(long)]
    pub human_thresh: Option<f64>,
    /// Overrides the config's object detection threshold.
    #[arg(long)]
    pub object_thresh: Option<f64>,
    /// Worker threads for per-image work (1 = sequential).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub attn_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExportAttnArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dets: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU)]
    pub iou: f64,
    #[arg(long, value_enum, default_value = "default")]
    pub mode: EvalMode,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub dets: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_THRESHOLDS)]
    pub thresholds: Vec<f64>,
    #[arg(long, value_enum, default_value = "default")]
    pub mode: EvalMode,
}

#[derive(Debug, Clone, Args)]
pub struct TrainToyArgs {
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Synthetic evaluation scenes written next to the weights.
    #[arg(long, default_value_t = 10)]
    pub eval_images: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_VALIDATION
            }
        }
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let (value, code) = match cmd {
        Command::Infer(a) => (cmd_infer(&a)?, EXIT_OK),
        Command::ExportAttn(a) => (cmd_export_attn(&a)?, EXIT_OK),
        Command::Eval(a) => {
            let r = cmd_eval(&a)?;
            write_stderr(stderr, &evaluation::format_table(&r))?;
            (serde_json::to_value(&r).expect("serializable"), EXIT_OK)
        }
        Command::Sweep(a) => {
            let pts = cmd_sweep(&a)?;
            write_stderr(stderr, &evaluation::format_sweep(&pts))?;
            (json!({ "sweep": pts }), EXIT_OK)
        }
        Command::TrainToy(a) => (cmd_train_toy(&a)?, EXIT_OK),
        Command::Gradcheck(a) => {
            let r = training::gradcheck_all(a.seed)?;
            for b in &r.blocks {
                let status = if b.passed { "ok" } else { "FAIL" };
                write_stderr(
                    stderr,
                    &format!(
                        "{:<22} {status:<4} max_rel={:.3e} checked={} skipped={}\n",
                        b.block, b.max_rel_error, b.checked, b.skipped
                    ),
                )?;
            }
            let code = if r.passed { EXIT_OK } else { EXIT_NUMERIC };
            (serde_json::to_value(&r).expect("serializable"), code)
        }
    };
    let text = serde_json::to_string_pretty(&value).expect("serializable");
    writeln!(stdout, "{text}").map_err(|e| HoiError::io("<stdout>", e))?;
    Ok(code)
}

fn write_stderr(w: &mut dyn Write, s: &str) -> Result<()> {
    w.write_all(s.as_bytes()).map_err(|e| HoiError::io("<stderr>", e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HoiError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HoiError::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HoiError::io(path, e))
}

struct Loaded {
    manifest: Manifest,
    base: PathBuf,
    config: ModelConfig,
    weights: ModelWeights<f32>,
}

fn load_model(a: &ModelArgs) -> Result<Loaded> {
    let mut config = ModelConfig::load(&a.config)?;
    if let Some(t) = a.human_thresh {
        config.human_thresh = t;
    }
    if let Some(t) = a.object_thresh {
        config.object_thresh = t;
    }
    config.validate()?;
    let weights = ModelWeights::<f32>::load_dir(&a.weights, &config)?;
    let manifest = Manifest::load(&a.manifest)?;
    let base = a
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    Ok(Loaded {
        manifest,
        base,
        config,
        weights,
    })
}

fn infer_image(
    l: &Loaded,
    img: &ManifestImage,
) -> Result<(Vec<HoiTriplet>, Vec<BoxAttention<f32>>)> {
    let feats = features::load_features::<f32>(features::resolve(&l.base, &img.features), img)?;
    let dets = features::filter_detections(
        &img.detections,
        l.config.human_thresh,
        l.config.object_thresh,
    )?;
    let out = pipeline::detect_with_attention(&img.id, &feats, &dets, &l.weights, &l.config)?;
    Ok((out.triplets, out.attention))
}

/// Run the model over every manifest image. Results come back in canonical
/// order: images sorted by id, pairs in emission order.
fn run_manifest(a: &ModelArgs) -> Result<Vec<(String, Vec<HoiTriplet>, Vec<BoxAttention<f32>>)>> {
    let l = load_model(a)?;
    let mut ids: Vec<&str> = l.manifest.images.iter().map(|i| i.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(HoiError::Validation(format!("duplicate image id {}", w[0])));
    }
    let mut images: Vec<&ManifestImage> = l.manifest.images.iter().collect();
    images.sort_by(|x, y| x.id.cmp(&y.id));
    let work = || par::map(&images, |img| infer_image(&l, img));
    let results = match a.jobs {
        Some(j) => par::with_jobs(j, work),
        None => work(),
    };
    images
        .iter()
        .zip(results)
        .map(|(img, r)| r.map(|(t, att)| (img.id.clone(), t, att)))
        .collect()
}

pub fn cmd_infer(a: &InferArgs) -> Result<serde_json::Value> {
    let results = run_manifest(&a.model)?;
    let mut n_maps = 0;
    if let Some(dir) = &a.attn_dir {
        for (id, _, att) in &results {
            n_maps += write_attention(dir, id, att)?;
        }
    }
    let triplets: Vec<HoiTriplet> = results.into_iter().flat_map(|(_, t, _)| t).collect();
    let n = triplets.len();
    write_json(&a.out, &DetectionsFile { triplets })?;
    Ok(json!({
        "out": a.out,
        "triplets": n,
        "attention_maps": n_maps,
    }))
}

pub fn cmd_export_attn(a: &ExportAttnArgs) -> Result<serde_json::Value> {
    let results = run_manifest(&a.model)?;
    let mut n_maps = 0;
    for (id, _, att) in &results {
        n_maps += write_attention(&a.out, id, att)?;
    }
    Ok(json!({ "out": a.out, "attention_maps": n_maps }))
}

/// `<image>_<human|object><index>_{attn,hnorm}.{hoit,pgm}`. Returns the number
/// of maps written.
fn write_attention(dir: &Path, image_id: &str, att: &[BoxAttention<f32>]) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| HoiError::io(dir, e))?;
    let mut n = 0;
    for b in att {
        let kind = match b.kind {
            InstanceKind::Human => "human",
            InstanceKind::Object => "object",
        };
        for (tag, map) in [("attn", &b.attn_map), ("hnorm", &b.h_norm)] {
            let stem = format!("{image_id}_{kind}{}_{tag}", b.index);
            map.save(dir.join(format!("{stem}.hoit")))?;
            let path = dir.join(format!("{stem}.pgm"));
            std::fs::write(&path, pgm_bytes(map)?).map_err(|e| HoiError::io(&path, e))?;
            n += 1;
        }
    }
    Ok(n)
}

/// Binary 8-bit PGM of a `[h, w]` or `[h, w, 1]` map, min-max normalized
/// (a constant map becomes all zeros).
pub fn pgm_bytes(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let d = map.dims();
    let (h, w) = match d {
        [h, w] | [h, w, 1] => (*h, *w),
        _ => return Err(HoiError::shape("pgm_bytes", d, &[0, 0, 1])),
    };
    let lo = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if range > 0.0 {
            ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<evaluation::EvalResult> {
    let dets = DetectionsFile::load(&a.dets)?;
    let gt = GroundTruthFile::load(&a.gt)?;
    let cfg = EvalConfig {
        iou_threshold: a.iou,
        mode: a.mode,
    };
    evaluation::evaluate(&dets.triplets, &gt.triplets, &gt.categories(), &cfg)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<Vec<evaluation::SweepPoint>> {
    let dets = DetectionsFile::load(&a.dets)?;
    let gt = GroundTruthFile::load(&a.gt)?;
    evaluation::threshold_sweep(&dets.triplets, &gt.triplets, &gt.categories(), &a.thresholds, a.mode)
}

/// Writes `weights/`, `config.json`, `toy.json`, `loss.csv` and a synthetic
/// evaluation set (`eval/manifest.json`, feature tensors, `eval/gt.json`).
pub fn cmd_train_toy(a: &TrainToyArgs) -> Result<serde_json::Value> {
    let cfg = ToyConfig::default();
    let out = training::train_toy(&cfg, a.seed, a.steps)?;
    let dir = &a.out;
    std::fs::create_dir_all(dir).map_err(|e| HoiError::io(dir, e))?;
    out.weights.save_dir(dir.join("weights"))?;
    cfg.model.save(dir.join("config.json"))?;
    write_json(&dir.join("toy.json"), &cfg)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    let loss_path = dir.join("loss.csv");
    std::fs::write(&loss_path, csv).map_err(|e| HoiError::io(&loss_path, e))?;

    let scenes = training::eval_scenes(&cfg, a.seed, a.eval_images)?;
    let eval_dir = dir.join("eval");
    let feat_dir = eval_dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| HoiError::io(&feat_dir, e))?;
    let mut manifest = Manifest::default();
    let mut gt = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let id = format!("toy{i:04}");
        let feats = training::toy_features(&s.image, &out.backbone)?;
        let rel = PathBuf::from("features").join(format!("{id}.hoit"));
        feats.feature_map.save(eval_dir.join(&rel))?;
        manifest.images.push(ManifestImage {
            id: id.clone(),
            features: rel,
            stride: feats.spatial_stride,
            width: feats.image_width,
            height: feats.image_height,
            detections: s.detections(),
        });
        gt.push(training::scene_ground_truth(&id, s));
    }
    manifest.save(eval_dir.join("manifest.json"))?;
    write_json(
        &eval_dir.join("gt.json"),
        &GroundTruthFile {
            triplets: gt,
            categories: Vec::new(),
        },
    )?;
    let accuracy = training::planted_pair_accuracy(&out.weights, &out.backbone, &cfg, &scenes)?;
    Ok(json!({
        "seed": a.seed,
        "steps": a.steps,
        "initial_loss": out.losses.first(),
        "final_loss": out.losses.last(),
        "planted_pair_accuracy": accuracy,
        "out": dir,
    }))
}
