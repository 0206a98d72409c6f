//! Acceptance criteria 1-11, run in order with one PASS/FAIL line each.
//!
//! Lines go straight to the process stdout so they appear in the test log
//! without `--nocapture`. Criterion 8 is reported but never fails the run.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackgrasp_core::metrics::{grasp_match, EvalReport, EvalScene, ScenePrediction};
use stackgrasp_core::planner::full_clearing_order;
use stackgrasp_core::scene_file::{load_scene, parse_scene, parse_scene_unchecked, save_scene, scene_to_json};
use stackgrasp_core::synth::{synth_generate, SynthConfig};
use stackgrasp_core::vmrd::{import_one, parse_grasps};
use stackgrasp_core::{
    box_intersection, detect_cycles, grasp_angle_diff, grasp_order_for_target, jaccard_rotated, rect_to_polygon,
    symmetrize_pair, GraspRect, PlanError, RelationGraph, RelationKind,
};
use stackgrasp_net::infer::{relation_pairs, NO_RELATION};
use stackgrasp_net::train::extract_features;
use stackgrasp_net::{init_params, predict, ModelConfig};
use stackgrasp_tensor::{load_checkpoint, save_checkpoint, ParamStore};

const VMRD_XML: &str = include_str!("../../core/tests/fixtures/vmrd_sample.xml");
const VMRD_GRASPS: &str = include_str!("../../core/tests/fixtures/vmrd_sample.txt");
const README: &str = include_str!("../../../README.md");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(n: u32, soft: bool, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let soft = if soft { " (soft)" } else { "" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2}: {tag}{soft}  {}", o.detail);
    let _ = out.flush();
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("stackgrasp").chain(args.iter().copied());
    let code = stackgrasp::run(argv, &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn criterion_1() -> Outcome {
    let stated = README.contains("not reproducible at desk scale");
    outcome(stated, "README states that the published table numbers are not reproducible at desk scale")
}

// ---- 2: rotated IoU against a stratified Monte Carlo estimate

fn inside(r: &GraspRect, cos: f64, sin: f64, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - r.cx, y - r.cy);
    (dx * cos + dy * sin).abs() <= r.w / 2.0 && (-dx * sin + dy * cos).abs() <= r.h / 2.0
}

/// One uniform sample per cell of a k x k grid over the joint bounding box.
fn stratified_iou(a: &GraspRect, b: &GraspRect, k: usize, rng: &mut ChaCha8Rng) -> f64 {
    let pts: Vec<(f64, f64)> = [a, b]
        .iter()
        .flat_map(|r| rect_to_polygon(r).vertices().to_vec())
        .collect();
    let x0 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x1 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y0 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y1 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (sa, ca) = a.theta_deg.to_radians().sin_cos();
    let (sb, cb) = b.theta_deg.to_radians().sin_cos();
    let (dx, dy) = ((x1 - x0) / k as f64, (y1 - y0) / k as f64);
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..k {
        for j in 0..k {
            let x = x0 + (i as f64 + rng.gen::<f64>()) * dx;
            let y = y0 + (j as f64 + rng.gen::<f64>()) * dy;
            let ia = inside(a, ca, sa, x, y);
            let ib = inside(b, cb, sb, x, y);
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let k = 317; // 317^2 > 10^5 samples per pair
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let rect = |rng: &mut ChaCha8Rng, cx: f64, cy: f64| {
            GraspRect::new(
                cx,
                cy,
                rng.gen_range(2.0..40.0),
                rng.gen_range(1.0..20.0),
                rng.gen_range(-90.0..90.0),
                0,
            )
        };
        let (cx, cy) = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let a = rect(&mut rng, cx, cy);
        let (cx, cy) = (cx + rng.gen_range(-15.0..15.0), cy + rng.gen_range(-15.0..15.0));
        let b = rect(&mut rng, cx, cy);
        let err = (jaccard_rotated(&a, &b) - stratified_iou(&a, &b, k, &mut rng)).abs();
        worst = worst.max(err);
    }
    let t = start.elapsed();
    outcome(
        worst < 2e-3 && t < Duration::from_secs(30),
        format!("1000 pairs, max |IoU - MC| = {worst:.2e} (< 2e-3), {:.1}s (< 30s)", t.as_secs_f64()),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let (code, out, err) = cli(&["grad-check", "--seed", "0", "--seeds", "20", "--draws", "5"]);
    let t = start.elapsed();
    let passed = out.lines().filter(|l| l.ends_with("PASS")).count();
    let failed: Vec<&str> = out.lines().filter(|l| l.ends_with("FAIL")).collect();
    outcome(
        code == 0 && failed.is_empty() && t < Duration::from_secs(300),
        format!(
            "{passed} checks passed (operators x 20 seeds at 1e-3, end-to-end x 5 at 1e-2), {:.1}s (< 300s){}",
            t.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failed: {failed:?} {err}") }
        ),
    )
}

fn criterion_4() -> Outcome {
    // A 4x1 rectangle inside a 4x4 one: intersection 4, union 16.
    let big = GraspRect::new(0.0, 0.0, 4.0, 4.0, 0.0, 0);
    let quarter = GraspRect::new(0.0, 0.0, 4.0, 1.0, 0.0, 0);
    let j = jaccard_rotated(&quarter, &big);
    let reject_at_quarter = j == 0.25 && !grasp_match(&quarter, &[big]);
    let just_above = GraspRect::new(0.0, 0.0, 4.0, 1.01, 0.0, 0);
    let accept_above = grasp_match(&just_above, &[big]);
    let base = GraspRect::new(10.0, 10.0, 20.0, 6.0, 0.0, 0);
    let turned = GraspRect::new(10.0, 10.0, 20.0, 6.0, 30.0, 0);
    let beyond = GraspRect::new(10.0, 10.0, 20.0, 6.0, 30.5, 0);
    let accept_at_30 = grasp_angle_diff(0.0, 30.0) == 30.0 && grasp_match(&turned, &[base]);
    let reject_beyond = !grasp_match(&beyond, &[base]);
    outcome(
        reject_at_quarter && accept_above && accept_at_30 && reject_beyond,
        format!(
            "Jaccard {j} rejected: {reject_at_quarter}, 0.2525 accepted: {accept_above}, \
             30 deg accepted: {accept_at_30}, 30.5 deg rejected: {reject_beyond}"
        ),
    )
}

// ---- 5: planner against brute force over every orientation of every pair

fn permutations(items: &[u32]) -> Vec<Vec<u32>> {
    if items.is_empty() {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// Edge (a, b): a rests on b and goes first.
fn valid_removal(edges: &[(u32, u32)], order: &[u32]) -> bool {
    let pos = |n: u32| order.iter().position(|&x| x == n);
    edges.iter().all(|&(a, b)| match (pos(a), pos(b)) {
        (Some(pa), Some(pb)) => pa < pb,
        (None, Some(_)) => false,
        _ => true,
    })
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let (mut graphs, mut violations) = (0usize, 0usize);
    for n in 1..=5u32 {
        let nodes: Vec<u32> = (0..n).collect();
        let perms = permutations(&nodes);
        let pairs: Vec<(u32, u32)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        for mut code in 0..3usize.pow(pairs.len() as u32) {
            let mut edges = Vec::new();
            for &(a, b) in &pairs {
                match code % 3 {
                    1 => edges.push((a, b)),
                    2 => edges.push((b, a)),
                    _ => {}
                }
                code /= 3;
            }
            graphs += 1;
            let mut g = RelationGraph::with_nodes(nodes.iter().copied());
            for &(a, b) in &edges {
                g.add_edge(a, b, 1.0);
            }
            let valid: Vec<&Vec<u32>> = perms.iter().filter(|p| valid_removal(&edges, p)).collect();
            let ok = match (full_clearing_order(&g), valid.first()) {
                (Ok(order), Some(&first)) => {
                    order == *first
                        && (0..n).all(|t| {
                            let shortest = valid
                                .iter()
                                .map(|p| p[..=p.iter().position(|&x| x == t).unwrap()].to_vec())
                                .min_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
                            grasp_order_for_target(&g, t).ok() == shortest
                        })
                }
                (Err(PlanError::Cycle(c)), None) => !c.is_empty() && !detect_cycles(&g).is_empty(),
                _ => false,
            };
            violations += usize::from(!ok);
        }
    }
    let t = start.elapsed();
    outcome(
        violations == 0 && t < Duration::from_secs(60),
        format!("{graphs} graphs on <= 5 nodes, {violations} violations, {:.1}s (< 60s)", t.as_secs_f64()),
    )
}

fn criterion_6() -> Outcome {
    let scenes: Vec<_> = (0..20)
        .map(|seed| synth_generate(&SynthConfig { seed, ..Default::default() }).unwrap().1)
        .collect();
    let preds: Vec<_> = scenes.iter().map(ScenePrediction::from_ground_truth).collect();
    let eval: Vec<_> = scenes.iter().zip(&preds).map(|(gt, pred)| EvalScene { gt, pred }).collect();
    let r = EvalReport::compute(&eval);
    let all = [r.map, r.or_recall, r.op_precision, r.ia_accuracy, r.grasp_accuracy];
    outcome(
        all.iter().all(|&v| v == 1.0),
        format!("20 scenes, ground truth as prediction: mAP/OR/OP/IA/grasp = {all:?}"),
    )
}

fn csv_totals(path: &Path) -> Vec<(f64, f64)> {
    // (L_O, total) per row
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<f64> = l.split(',').filter_map(|v| v.parse().ok()).collect();
            (f.len() == 6).then(|| (f[2], f[5]))
        })
        .collect()
}

/// Synthesizes, trains both stages and evaluates through the CLI.
/// Returns the stage-1 log, stage-2 log, evaluation report and the checkpoint.
fn train_and_eval(
    dir: &Path,
    train: (usize, u64),
    test: (usize, u64),
    sets: &[&str],
) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>, serde_json::Value), String> {
    let (train_dir, test_dir) = (dir.join("train"), dir.join("test"));
    for (d, (count, seed)) in [(&train_dir, train), (&test_dir, test)] {
        let (count, seed) = (count.to_string(), seed.to_string());
        let (code, _, err) = cli(&["synth", "--out", s(d), "--count", &count, "--seed", &seed]);
        if code != 0 {
            return Err(err);
        }
    }
    let (c1, c2) = (dir.join("stage1.ckpt"), dir.join("stage2.ckpt"));
    let mut overrides = Vec::new();
    for kv in sets {
        overrides.extend(["--set", kv]);
    }
    let mut a1 = vec!["train", "--stage", "1", "--data", s(&train_dir), "--out", s(&c1)];
    a1.extend(&overrides);
    let mut a2 = vec!["train", "--stage", "2", "--data", s(&train_dir), "--init", s(&c1), "--out", s(&c2)];
    a2.extend(&overrides);
    for args in [a1, a2] {
        let (code, _, err) = cli(&args);
        if code != 0 {
            return Err(err);
        }
    }
    let report = dir.join("report.json");
    let mut ae = vec!["eval", "--data", s(&test_dir), "--ckpt", s(&c2), "--report", s(&report)];
    ae.extend(&overrides);
    let (code, _, err) = cli(&ae);
    if code != 0 {
        return Err(err);
    }
    let json = serde_json::from_str(&fs::read_to_string(&report).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    Ok((csv_totals(&c1.with_extension("csv")), csv_totals(&c2.with_extension("csv")), json))
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    // The 8 training scenes double as the evaluation set.
    let run = train_and_eval(dir.path(), (8, 100), (8, 100), &["iterations=500", "augment=false"]);
    let t = start.elapsed();
    let (log1, log2, r) = match run {
        Ok(v) => v,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let (Some(first), Some(first_s2), Some(last)) = (log1.first(), log1.last(), log2.last()) else {
        return outcome(false, "empty loss log");
    };
    let ratio = last.1 / first.1;
    let lo_ratio = first_s2.0 / first.0;
    let or = r["or_recall"].as_f64().unwrap_or(0.0);
    let grasp = r["grasp_accuracy"].as_f64().unwrap_or(0.0);
    outcome(
        ratio < 0.1 && lo_ratio < 0.1 && or >= 0.95 && grasp >= 0.9 && t < Duration::from_secs(900),
        format!(
            "total {:.2} -> {:.2} ({:.1}%), L_O {:.3} -> {:.3} ({:.1}%), relation {:.1}%, grasp {:.1}%, {:.0}s",
            first.1,
            last.1,
            100.0 * ratio,
            first.0,
            first_s2.0,
            100.0 * lo_ratio,
            100.0 * or,
            100.0 * grasp,
            t.as_secs_f64()
        ),
    )
}

/// Returns the outcome and the trained checkpoint for criterion 10.
fn criterion_8(dir: &Path) -> (Outcome, Option<std::path::PathBuf>) {
    let start = Instant::now();
    match train_and_eval(dir, (200, 1000), (50, 5000), &[]) {
        Ok((_, _, r)) => {
            let f = |k: &str| 100.0 * r[k].as_f64().unwrap_or(0.0);
            let ia = r["ia_accuracy"].as_f64().unwrap_or(0.0);
            let o = outcome(
                ia >= 0.60,
                format!(
                    "200 train / 50 held out: mAP {:.1} OR {:.1} OP {:.1} IA {:.1} (>= 60) grasp {:.1}, {:.0}s",
                    f("map"),
                    f("or_recall"),
                    f("op_precision"),
                    f("ia_accuracy"),
                    f("grasp_accuracy"),
                    start.elapsed().as_secs_f64()
                ),
            );
            (o, Some(dir.join("stage2.ckpt")))
        }
        Err(e) => (outcome(false, format!("training failed: {e}")), None),
    }
}

fn criterion_9() -> Outcome {
    let on = ModelConfig::default();
    let off = ModelConfig { msfa: false, ..on.clone() };
    let f = on.fusion_channels;
    let laterals: usize = on.channels.iter().map(|c| c * f).sum();
    let fusion = on.msfa_rounds * on.scale_strides.len() * 9 * f * f;
    let count = |c: &ModelConfig| init_params::<f32>(c, 0).count(true);
    let diff = count(&on) - count(&off);
    let (_, _, err) = cli(&["train", "--stage", "1", "--data", "/nonexistent", "--out", "/nonexistent/x"]);
    let echoed = err.lines().any(|l| l == "alpha = 5") && err.lines().any(|l| l == "beta = 5");
    outcome(
        diff == laterals + fusion && echoed,
        format!(
            "trainable {} vs {} without aggregation: difference {diff} = laterals {laterals} + fusion {fusion}; \
             alpha = beta = 5 echoed: {echoed}",
            count(&on),
            count(&off)
        ),
    )
}

fn criterion_10(ckpt: Option<&Path>) -> Outcome {
    let cfg = ModelConfig::default();
    let mut params: ParamStore<f32> = init_params(&cfg, cfg.seed);
    let trained = match ckpt {
        Some(p) => load_checkpoint(p, &mut params).is_ok(),
        None => false,
    };
    let (mut disjoint, mut wrong) = (0usize, 0usize);
    for seed in 5000..5050 {
        let (img, scene) = synth_generate(&SynthConfig { seed, ..Default::default() }).unwrap();
        let pred = predict(&cfg, &params, &img).unwrap();
        // Predicted boxes, and the ground-truth boxes through the same relation head.
        let map = &extract_features(&cfg, &params, &img).unwrap()[0];
        let gt_pairs = relation_pairs(&cfg, &params, map, &scene.objects).unwrap();
        let sets = [(&pred.objects, &pred.pairs), (&scene.objects, &gt_pairs)];
        for (objects, pairs) in sets {
            for p in pairs {
                let a = objects.iter().find(|o| o.id == p.pair.0).unwrap();
                let b = objects.iter().find(|o| o.id == p.pair.1).unwrap();
                if box_intersection(a, b).is_none() {
                    disjoint += 1;
                    let exact = p.probs_ij == NO_RELATION && p.probs_ji == NO_RELATION;
                    wrong += usize::from(!exact || symmetrize_pair(p).kind != RelationKind::NoRel);
                }
            }
        }
    }
    outcome(
        trained && disjoint > 0 && wrong == 0,
        format!("50 scenes, {disjoint} disjoint pairs (predicted and annotated boxes), {wrong} not NoRel"),
    )
}

fn mutate(bytes: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut b = bytes.to_vec();
    for _ in 0..rng.gen_range(1..8) {
        let n = b.len();
        match rng.gen_range(0..4) {
            0 if n > 0 => b[rng.gen_range(0..n)] = rng.gen(),
            1 if n > 0 => {
                b.remove(rng.gen_range(0..n));
            }
            2 => {
                let tok: &[u8] = [&b"{"[..], b"]", b"\"", b"-1e999", b"NaN", b"</", b"1e308", b","]
                    .choose(rng)
                    .unwrap();
                let i = rng.gen_range(0..=n);
                b.splice(i..i, tok.iter().copied());
            }
            _ if n > 0 => b.truncate(rng.gen_range(0..n)),
            _ => {}
        }
    }
    b
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut scenes: Vec<_> = (0..50)
        .map(|seed| synth_generate(&SynthConfig { seed, ..Default::default() }).unwrap().1)
        .collect();
    let vmrd = import_one(VMRD_XML.as_bytes(), VMRD_GRASPS.as_bytes());
    let vmrd_ok = vmrd.is_ok();
    scenes.extend(vmrd);
    let mut scene_ok = 0;
    for (i, scene) in scenes.iter().enumerate() {
        let text = scene_to_json(scene);
        let path = dir.path().join(format!("{i}.json"));
        save_scene(&path, scene).unwrap();
        let reloaded = load_scene(&path).unwrap();
        let again = dir.path().join(format!("{i}b.json"));
        save_scene(&again, &reloaded).unwrap();
        let same = parse_scene(&text).map(|s| scene_to_json(&s) == text).unwrap_or(false)
            && fs::read(&path).unwrap() == fs::read(&again).unwrap();
        scene_ok += usize::from(same);
    }

    let cfg = ModelConfig::default();
    let params = init_params::<f32>(&cfg, 3);
    let (c1, c2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&c1, &params).unwrap();
    let mut other = init_params::<f32>(&cfg, 4);
    load_checkpoint(&c1, &mut other).unwrap();
    save_checkpoint(&c2, &other).unwrap();
    let ckpt_ok = fs::read(&c1).unwrap() == fs::read(&c2).unwrap();

    let json = scene_to_json(&scenes[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut panics = 0;
    for _ in 0..10_000 {
        let j = mutate(json.as_bytes(), &mut rng);
        let x = mutate(VMRD_XML.as_bytes(), &mut rng);
        let g = mutate(VMRD_GRASPS.as_bytes(), &mut rng);
        let r = catch_unwind(AssertUnwindSafe(|| {
            let text = String::from_utf8_lossy(&j);
            let _ = parse_scene(&text);
            let _ = parse_scene_unchecked(&text);
            let _ = import_one(&x, &g);
            let _ = parse_grasps(&g);
        }));
        panics += usize::from(r.is_err());
    }
    std::panic::set_hook(hook);
    outcome(
        vmrd_ok && scene_ok == scenes.len() && ckpt_ok && panics == 0,
        format!(
            "{scene_ok}/{} scene files byte-identical (incl. imported VMRD sample: {vmrd_ok}), \
             checkpoint byte-identical: {ckpt_ok}, 10000 mutations: {panics} panics",
            scenes.len()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut hard_failures = BTreeSet::new();
    let mut check = |n: u32, o: Outcome| {
        report(n, false, &o);
        if !o.pass {
            hard_failures.insert(n);
        }
    };
    check(1, criterion_1());
    check(2, criterion_2());
    check(3, criterion_3());
    check(4, criterion_4());
    check(5, criterion_5());
    check(6, criterion_6());
    check(7, criterion_7());
    let dir = tempfile::tempdir().unwrap();
    let (o8, ckpt) = criterion_8(dir.path());
    report(8, true, &o8);
    check(9, criterion_9());
    check(10, criterion_10(ckpt.as_deref()));
    check(11, criterion_11());
    assert!(hard_failures.is_empty(), "failed criteria: {hard_failures:?}");
}
