//! Training targets for the dense heads and decoding of their outputs.

use stackgrasp_core::geometry::aabb_iou;
use stackgrasp_core::{GraspRect, ObjectBox, SceneAnnotation};

use crate::config::ModelConfig;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Angle bin of `theta` in (-90, 90]; the upper end folds into the last bin.
pub fn angle_bin(theta_deg: f64, n_bins: usize) -> usize {
    let w = 180.0 / n_bins as f64;
    (((theta_deg + 90.0) / w).floor().max(0.0) as usize).min(n_bins - 1)
}

pub fn bin_center(bin: usize, n_bins: usize) -> f64 {
    -90.0 + (bin as f64 + 0.5) * 180.0 / n_bins as f64
}

/// Box size every detector cell regresses against, in strides.
pub const DET_PRIOR_STRIDES: f64 = 8.0;

/// Detector targets over the `H * W` cells of the middle map.
#[derive(Debug, Clone, PartialEq)]
pub struct DetTargets {
    /// Per cell one-hot over [background, classes].
    pub cls: Vec<f64>,
    /// Positive cell indices (row-major).
    pub pos: Vec<usize>,
    /// `(dx, dy, tw, th)` per positive.
    pub reg: Vec<f64>,
}

/// Cells within one step of an object's center cell whose centers fall
/// inside the box become positives; a cell claimed twice goes to the object
/// whose center is nearer.
pub fn detector_targets(cfg: &ModelConfig, scene: &SceneAnnotation) -> DetTargets {
    let s = cfg.scale_strides[1] as f64;
    let (h, w) = cfg.map_hw(1);
    let c = cfg.n_classes;
    let mut owner: Vec<Option<(f64, usize)>> = vec![None; h * w];
    for (k, o) in scene.objects.iter().enumerate() {
        let (cx, cy) = o.center();
        let (col, row) = ((cx / s).floor() as i64, (cy / s).floor() as i64);
        for r in row - 1..=row + 1 {
            for q in col - 1..=col + 1 {
                if r < 0 || q < 0 || r >= h as i64 || q >= w as i64 {
                    continue;
                }
                let (px, py) = ((q as f64 + 0.5) * s, (r as f64 + 0.5) * s);
                if !o.contains_point(px, py) {
                    continue;
                }
                let d = (px - cx).powi(2) + (py - cy).powi(2);
                let cell = &mut owner[r as usize * w + q as usize];
                if cell.map_or(true, |(best, _)| d < best) {
                    *cell = Some((d, k));
                }
            }
        }
    }
    let mut t = DetTargets {
        cls: vec![0.0; h * w * (c + 1)],
        pos: Vec::new(),
        reg: Vec::new(),
    };
    for (cell, own) in owner.iter().enumerate() {
        let label = match own {
            None => 0,
            Some((_, k)) => {
                let o = &scene.objects[*k];
                let (cx, cy) = o.center();
                let (px, py) = (((cell % w) as f64 + 0.5) * s, ((cell / w) as f64 + 0.5) * s);
                let prior = DET_PRIOR_STRIDES * s;
                t.pos.push(cell);
                t.reg
                    .extend([(cx - px) / s, (cy - py) / s, (o.width() / prior).ln(), (o.height() / prior).ln()]);
                o.cls as usize + 1
            }
        };
        t.cls[cell * (c + 1) + label] = 1.0;
    }
    t
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Greedy non-maximum suppression within each class; input sorted by score.
fn nms(sorted: Vec<ObjectBox>, iou: f64) -> Vec<ObjectBox> {
    let mut keep: Vec<ObjectBox> = Vec::new();
    for b in sorted {
        if keep.iter().all(|k| k.cls != b.cls || aabb_iou(k, &b) <= iou) {
            keep.push(b);
        }
    }
    keep
}

/// Boxes from the channels-last detector output `(H * W, 1 + C + 4)`.
/// Ids follow descending score.
pub fn decode_detections(cfg: &ModelConfig, out: &[f64]) -> Vec<ObjectBox> {
    let s = cfg.scale_strides[1] as f64;
    let (h, w) = cfg.map_hw(1);
    let (img_h, img_w) = (cfg.input_hw.0 as f64, cfg.input_hw.1 as f64);
    let c = cfg.n_classes;
    let k = c + 5;
    let mut found = Vec::new();
    for cell in 0..h * w {
        let row = &out[cell * k..(cell + 1) * k];
        let p = softmax(&row[..c + 1]);
        let (cls, score) = p[1..]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        if score < cfg.score_threshold {
            continue;
        }
        let (px, py) = (((cell % w) as f64 + 0.5) * s, ((cell / w) as f64 + 0.5) * s);
        let prior = DET_PRIOR_STRIDES * s;
        let (cx, cy) = (px + row[c + 1] * s, py + row[c + 2] * s);
        let (bw, bh) = (prior * row[c + 3].min(10.0).exp(), prior * row[c + 4].min(10.0).exp());
        let b = ObjectBox::new(
            0,
            cls as u32,
            (cx - bw / 2.0).clamp(0.0, img_w),
            (cy - bh / 2.0).clamp(0.0, img_h),
            (cx + bw / 2.0).clamp(0.0, img_w),
            (cy + bh / 2.0).clamp(0.0, img_h),
        )
        .with_score(score);
        if b.width() >= 1.0 && b.height() >= 1.0 {
            found.push(b);
        }
    }
    found.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept = nms(found, cfg.nms_iou);
    for (i, b) in kept.iter_mut().enumerate() {
        b.id = i as u32;
    }
    kept
}

/// Grasp targets over the `H * W * A` anchor rows of the middle map.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspTargets {
    /// Positive anchor rows, `(row * W + col) * A + anchor`.
    pub pos: Vec<usize>,
    /// Full `4 + 1 + bins + C` target row per positive.
    pub rows: Vec<f64>,
}

/// Anchor whose `(w, h)` box overlaps the grasp's axis-aligned extent best.
pub fn best_anchor(cfg: &ModelConfig, w: f64, h: f64) -> usize {
    let iou = |(aw, ah): (f64, f64)| {
        let inter = w.min(aw) * h.min(ah);
        inter / (w * h + aw * ah - inter)
    };
    (0..cfg.anchors.len()).fold(0, |best, a| if iou(cfg.anchors[a]) > iou(cfg.anchors[best]) { a } else { best })
}

/// Each grasp lands on its center cell and best anchor; an anchor already
/// taken keeps the earlier grasp. Every other anchor is a confidence negative.
pub fn assign_grasp_targets(cfg: &ModelConfig, scene: &SceneAnnotation) -> GraspTargets {
    let s = cfg.scale_strides[1] as f64;
    let (h, w) = cfg.map_hw(1);
    let na = cfg.anchors.len();
    let mut t = GraspTargets {
        pos: Vec::new(),
        rows: Vec::new(),
    };
    for g in scene.grasps.iter().map(|g| &g.rect) {
        let (col, row) = ((g.cx / s).floor(), (g.cy / s).floor());
        if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
            continue;
        }
        let a = best_anchor(cfg, g.w, g.h);
        let idx = (row as usize * w + col as usize) * na + a;
        if t.pos.contains(&idx) {
            continue;
        }
        let (aw, ah) = cfg.anchors[a];
        t.pos.push(idx);
        t.rows.extend([g.cx / s - col, g.cy / s - row, g.w / (g.w + aw), g.h / (g.h + ah), 1.0]);
        let mut onehot = vec![0.0; cfg.n_angle_bins + cfg.n_classes];
        onehot[angle_bin(g.theta_deg, cfg.n_angle_bins)] = 1.0;
        onehot[cfg.n_angle_bins + g.cls as usize] = 1.0;
        t.rows.extend(onehot);
    }
    t
}

fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |b, i| if xs[i] > xs[b] { i } else { b })
}

/// Grasps from the channels-last grasp output `(H * W * A, K)`, by
/// descending confidence.
pub fn decode_grasps(cfg: &ModelConfig, out: &[f64], conf_thresh: f64) -> Vec<GraspRect> {
    let s = cfg.scale_strides[1] as f64;
    let (_, w) = cfg.map_hw(1);
    let na = cfg.anchors.len();
    let k = cfg.grasp_channels();
    let nb = cfg.n_angle_bins;
    let mut found = Vec::new();
    for (r, row) in out.chunks_exact(k).enumerate() {
        let conf = sigmoid(row[4]);
        if conf < conf_thresh {
            continue;
        }
        let (cell, a) = (r / na, r % na);
        let (col, grow) = ((cell % w) as f64, (cell / w) as f64);
        let (aw, ah) = cfg.anchors[a];
        let bin = argmax(&row[5..5 + nb]);
        let cls = argmax(&row[5 + nb..]);
        found.push(
            GraspRect::new(
                (col + sigmoid(row[0])) * s,
                (grow + sigmoid(row[1])) * s,
                aw * row[2].min(10.0).exp(),
                ah * row[3].min(10.0).exp(),
                bin_center(bin, nb),
                cls as u32,
            )
            .with_confidence(conf),
        );
    }
    found.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    found
}
