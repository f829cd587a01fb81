//! Brute-force oracles and fixtures shared by the integration tests. Nothing
//! here calls into the code under test except for plain data types.
#![allow(dead_code)]

use std::path::Path;

use hoi_core::context::ContextAggWeights;
use hoi_core::evaluation::{Category, GroundTruthFile, GroundTruthTriplet};
use hoi_core::features::{BBox, InstanceDetection, InstanceKind, Manifest, ManifestImage};
use hoi_core::model::{ModelConfig, ModelWeights, RoleSlot};
use hoi_core::pipeline::HoiTriplet;
use hoi_core::tensor::ops::ConvWeights;
use hoi_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(dims: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
}

pub fn rand_conv(kh: usize, kw: usize, ci: usize, co: usize, rng: &mut impl Rng) -> ConvWeights<f64> {
    ConvWeights::new(rand_tensor(&[kh, kw, ci, co], rng), rand_tensor(&[co], rng)).unwrap()
}

/// Nested-loop "same" convolution with zero padding, stride 1.
pub fn dense_conv(x: &Tensor<f64>, w: &ConvWeights<f64>) -> Tensor<f64> {
    let [h, wd, ci] = x.dims().try_into().unwrap();
    let [kh, kw, _, co] = w.kernel.dims().try_into().unwrap();
    let k = w.kernel.data();
    let mut out = vec![0.0; h * wd * co];
    for y in 0..h {
        for xx in 0..wd {
            for o in 0..co {
                let mut acc = w.bias.data()[o];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let iy = y as i64 + dy as i64 - (kh / 2) as i64;
                        let ix = xx as i64 + dx as i64 - (kw / 2) as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                            continue;
                        }
                        for c in 0..ci {
                            acc += x.data()[(iy as usize * wd + ix as usize) * ci + c]
                                * k[((dy * kw + dx) * ci + c) * co + o];
                        }
                    }
                }
                out[(y * wd + xx) * co + o] = acc;
            }
        }
    }
    Tensor::new(vec![h, wd, co], out).unwrap()
}

/// Bilinear value at continuous `(y, x)` as a tent-weighted sum over every
/// pixel. Pixel `p` sits at continuous coordinate `p + 0.5`; sample
/// coordinates are clamped to the outermost pixel centers.
pub fn tent_sample(map: &Tensor<f64>, y: f64, x: f64, ch: usize) -> f64 {
    let [h, w, c] = map.dims().try_into().unwrap();
    let cy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let cx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let mut acc = 0.0;
    for py in 0..h {
        let wy = (1.0 - (cy - py as f64).abs()).max(0.0);
        if wy == 0.0 {
            continue;
        }
        for px in 0..w {
            let wx = (1.0 - (cx - px as f64).abs()).max(0.0);
            acc += wy * wx * map.data()[(py * w + px) * c + ch];
        }
    }
    acc
}

/// Position-sensitive ROI max pooling with `n x n` samples per cell.
pub fn dense_psroi(map: &Tensor<f64>, roi: &BBox, g: usize, n: usize) -> Tensor<f64> {
    let [h, w, c] = map.dims().try_into().unwrap();
    let e = c / (g * g);
    let x1 = roi.x1.clamp(0.0, w as f64);
    let x2 = roi.x2.clamp(0.0, w as f64);
    let y1 = roi.y1.clamp(0.0, h as f64);
    let y2 = roi.y2.clamp(0.0, h as f64);
    let (ch_, cw) = ((y2 - y1) / g as f64, (x2 - x1) / g as f64);
    let mut out = vec![f64::NEG_INFINITY; g * g * e];
    for i in 0..g {
        for j in 0..g {
            for k in 0..e {
                let ch = (i * g + j) * e + k;
                let slot = &mut out[(i * g + j) * e + k];
                for sy in 0..n {
                    for sx in 0..n {
                        let y = y1 + i as f64 * ch_ + (sy as f64 + 0.5) * ch_ / n as f64;
                        let x = x1 + j as f64 * cw + (sx as f64 + 0.5) * cw / n as f64;
                        *slot = slot.max(tent_sample(map, y, x, ch));
                    }
                }
            }
        }
    }
    Tensor::new(vec![g, g, e], out).unwrap()
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if inter <= 0.0 { 0.0 } else { inter / union }
}

/// Reference role-AP computation written from the protocol description.
pub fn oracle_map(dets: &[HoiTriplet], gts: &[GroundTruthTriplet], thr: f64) -> (f64, Vec<(u32, u32, Option<f64>)>) {
    let mut slots: Vec<(u32, u32)> = gts.iter().map(|g| (g.action_id, g.role_id)).collect();
    slots.sort();
    slots.dedup();
    let mut per = Vec::new();
    for &(a, r) in &slots {
        let cat_gt: Vec<&GroundTruthTriplet> = gts.iter().filter(|g| g.action_id == a && g.role_id == r).collect();
        let mut cat_det: Vec<(usize, &HoiTriplet)> = dets
            .iter()
            .enumerate()
            .filter(|(_, d)| d.action_id == a && d.role_id == r)
            .collect();
        // Descending score, input order on ties.
        for i in 1..cat_det.len() {
            let mut j = i;
            while j > 0 && cat_det[j - 1].1.score < cat_det[j].1.score {
                cat_det.swap(j - 1, j);
                j -= 1;
            }
        }
        let mut used = vec![false; cat_gt.len()];
        let mut tp = Vec::new();
        for (_, d) in &cat_det {
            let mut best = None;
            let mut best_ov = thr;
            for (gi, g) in cat_gt.iter().enumerate() {
                if used[gi] || g.image_id != d.image_id {
                    continue;
                }
                let ov = match (&d.object_box, &g.object_box) {
                    (None, None) => box_iou(&d.human_box, &g.human_box),
                    (Some(x), Some(y)) => box_iou(&d.human_box, &g.human_box).min(box_iou(x, y)),
                    _ => continue,
                };
                if ov > best_ov {
                    best_ov = ov;
                    best = Some(gi);
                }
            }
            if let Some(gi) = best {
                used[gi] = true;
            }
            tp.push(best.is_some());
        }
        let n_gt = cat_gt.len() as f64;
        let mut rec = Vec::new();
        let mut prec = Vec::new();
        let mut hits = 0.0;
        for (i, &t) in tp.iter().enumerate() {
            if t {
                hits += 1.0;
            }
            rec.push(hits / n_gt);
            prec.push(hits / (i + 1) as f64);
        }
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for i in 0..rec.len() {
            let p_interp = prec[i..].iter().cloned().fold(0.0, f64::max);
            ap += (rec[i] - prev_r) * p_interp;
            prev_r = rec[i];
        }
        per.push((a, r, Some(ap)));
    }
    let aps: Vec<f64> = per.iter().filter_map(|p| p.2).collect();
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    (map, per)
}

fn rand_box(rng: &mut impl Rng, size: f64) -> BBox {
    let w = rng.gen_range(8.0..40.0);
    let h = rng.gen_range(8.0..40.0);
    let x = rng.gen_range(0.0..size - w);
    let y = rng.gen_range(0.0..size - h);
    BBox { x1: x, y1: y, x2: x + w, y2: y + h }
}

pub fn jitter(b: &BBox, amount: f64, rng: &mut impl Rng) -> BBox {
    let mut j = || rng.gen_range(-amount..amount);
    let x1 = (b.x1 + j()).max(0.0);
    let y1 = (b.y1 + j()).max(0.0);
    let x2 = (b.x2 + j()).max(x1 + 1.0);
    let y2 = (b.y2 + j()).max(y1 + 1.0);
    BBox { x1, y1, x2, y2 }
}

/// Ten images, three actions, two roles. Action 2 is agent-only in role 1
/// slots (no object box). Detections are jittered copies of the ground
/// truth, duplicates and random false positives, with tied scores mixed in.
pub fn eval_fixture(seed: u64) -> (Vec<HoiTriplet>, Vec<GroundTruthTriplet>) {
    let mut rng = rng(seed);
    let slots = [(0u32, 0u32), (1, 0), (1, 1), (2, 1)];
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for img in 0..10 {
        let id = format!("img{img:02}");
        for _ in 0..rng.gen_range(1..=4) {
            let (a, r) = slots[rng.gen_range(0..slots.len())];
            let human = rand_box(&mut rng, 200.0);
            let object = if a == 2 { None } else { Some(rand_box(&mut rng, 200.0)) };
            gts.push(GroundTruthTriplet {
                image_id: id.clone(),
                human_box: human,
                object_box: object,
                action_id: a,
                role_id: r,
                object_class: Some(1 + a % 2),
            });
            for _ in 0..rng.gen_range(0..3) {
                let score = (rng.gen_range(0..20) as f64) / 20.0;
                dets.push(HoiTriplet {
                    image_id: id.clone(),
                    human_box: jitter(&human, 6.0, &mut rng),
                    object_box: object.map(|o| jitter(&o, 6.0, &mut rng)),
                    action_id: a,
                    role_id: r,
                    score,
                });
            }
        }
        for _ in 0..rng.gen_range(0..4) {
            let (a, r) = slots[rng.gen_range(0..slots.len())];
            dets.push(HoiTriplet {
                image_id: id.clone(),
                human_box: rand_box(&mut rng, 200.0),
                object_box: if a == 2 { None } else { Some(rand_box(&mut rng, 200.0)) },
                action_id: a,
                role_id: r,
                score: (rng.gen_range(0..20) as f64) / 20.0,
            });
        }
    }
    (dets, gts)
}

pub fn categories_of(gts: &[GroundTruthTriplet]) -> Vec<Category> {
    GroundTruthFile {
        triplets: gts.to_vec(),
        categories: Vec::new(),
    }
    .categories()
}

/// Small model for end-to-end runs: 3 actions, one of them agent-only.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_actions: 3,
        input_channels: 6,
        context_channels: 8,
        dim: 8,
        kernel_size: 3,
        grid: 2,
        embed: 2,
        samples: 2,
        reduction: 4,
        head_hidden: 6,
        human_thresh: 0.5,
        object_thresh: 0.3,
        roles: vec![
            RoleSlot { action_id: 0, role_id: 0 },
            RoleSlot { action_id: 1, role_id: 1 },
            RoleSlot { action_id: 2, role_id: 2 },
        ],
    }
}

pub fn random_detections(rng: &mut impl Rng, n_h: usize, n_o: usize, size: f64) -> Vec<InstanceDetection> {
    let mut v = Vec::new();
    for i in 0..n_h + n_o {
        let human = i < n_h;
        let b = rand_box(rng, size);
        v.push(InstanceDetection {
            bbox: b,
            class_id: if human { 0 } else { rng.gen_range(1..5) },
            score: rng.gen_range(0.0..1.0),
            kind: if human { InstanceKind::Human } else { InstanceKind::Object },
        });
    }
    v
}

/// Writes `config.json`, `weights/`, `manifest.json` and feature tensors for a
/// fixed-seed fixture. Images are listed out of id order on purpose.
pub fn write_infer_fixture(dir: &Path, seed: u64, n_images: usize) {
    let cfg = tiny_config();
    let mut rng = rng(seed);
    cfg.save(dir.join("config.json")).unwrap();
    let mut weights = ModelWeights::<f32>::init(&cfg, &mut rng).unwrap();
    for t in weights.tensors_mut() {
        if t.rank() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
    weights.save_dir(dir.join("weights")).unwrap();
    std::fs::create_dir_all(dir.join("feats")).unwrap();
    let mut manifest = Manifest::default();
    for i in (0..n_images).rev() {
        let id = format!("im{i:03}");
        let map = Tensor::<f32>::from_fn(vec![8, 8, cfg.input_channels], |_| rng.gen_range(0.0..1.0)).unwrap();
        let rel = Path::new("feats").join(format!("{id}.hoit"));
        map.save(dir.join(&rel)).unwrap();
        let n_h = rng.gen_range(0..3);
        let n_o = rng.gen_range(0..4);
        manifest.images.push(ManifestImage {
            id,
            features: rel,
            stride: 8,
            width: 64,
            height: 64,
            detections: random_detections(&mut rng, n_h, n_o, 64.0),
        });
    }
    manifest.save(dir.join("manifest.json")).unwrap();
}

/// Branch A is `[k,1]` then `[1,k]`, branch B the reverse. With zero biases
/// on the first convs each branch equals one dense conv whose kernel is the
/// sum over middle channels of the outer products of the two factors.
pub fn dense_equivalent(w: &ContextAggWeights<f64>) -> ConvWeights<f64> {
    let k = w.kernel_size();
    let (ci, cm, co) = (w.a_vertical.c_in(), w.a_vertical.c_out(), w.a_horizontal.c_out());
    let mut kernel = Tensor::<f64>::zeros(vec![k, k, ci, co]).unwrap();
    let av = w.a_vertical.kernel.data();
    let ah = w.a_horizontal.kernel.data();
    let bh = w.b_horizontal.kernel.data();
    let bv = w.b_vertical.kernel.data();
    for dy in 0..k {
        for dx in 0..k {
            for c in 0..ci {
                for o in 0..co {
                    let mut s = 0.0;
                    for m in 0..cm {
                        s += av[(dy * ci + c) * cm + m] * ah[(dx * cm + m) * co + o];
                        s += bh[(dx * ci + c) * cm + m] * bv[(dy * cm + m) * co + o];
                    }
                    kernel.data_mut()[((dy * k + dx) * ci + c) * co + o] = s;
                }
            }
        }
    }
    let mut bias = w.a_horizontal.bias.clone();
    bias.axpy(1.0, &w.b_vertical.bias).unwrap();
    ConvWeights::new(kernel, bias).unwrap()
}

pub fn random_factorized(k: usize, ci: usize, cm: usize, co: usize, r: &mut impl Rng) -> ContextAggWeights<f64> {
    let mut w = ContextAggWeights {
        a_vertical: rand_conv(k, 1, ci, cm, r),
        a_horizontal: rand_conv(1, k, cm, co, r),
        b_horizontal: rand_conv(1, k, ci, cm, r),
        b_vertical: rand_conv(k, 1, cm, co, r),
    };
    w.a_vertical.bias = w.a_vertical.bias.zeros_like();
    w.b_horizontal.bias = w.b_horizontal.bias.zeros_like();
    w
}

