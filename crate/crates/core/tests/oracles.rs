//! Independent oracles: Monte Carlo areas, exhaustive plan search over small
//! graphs, and a numerically integrated precision/recall curve.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackgrasp_core::metrics::average_precision;
use stackgrasp_core::planner::full_clearing_order;
use stackgrasp_core::{
    convex_intersection_area, detect_cycles, grasp_order_for_target, jaccard_rotated, rect_to_polygon, GraspRect,
    PlanError, RelationGraph,
};

fn inside(r: &GraspRect, x: f64, y: f64) -> bool {
    let t = r.theta_deg.to_radians();
    let (dx, dy) = (x - r.cx, y - r.cy);
    let u = dx * t.cos() + dy * t.sin();
    let v = -dx * t.sin() + dy * t.cos();
    u.abs() <= r.w / 2.0 && v.abs() <= r.h / 2.0
}

fn monte_carlo_iou(a: &GraspRect, b: &GraspRect, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let ra = 0.5 * a.w.hypot(a.h);
    let rb = 0.5 * b.w.hypot(b.h);
    let x0 = (a.cx - ra).min(b.cx - rb);
    let x1 = (a.cx + ra).max(b.cx + rb);
    let y0 = (a.cy - ra).min(b.cy - rb);
    let y1 = (a.cy + ra).max(b.cy + rb);
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..n {
        let x = rng.gen_range(x0..x1);
        let y = rng.gen_range(y0..y1);
        let (ia, ib) = (inside(a, x, y), inside(b, x, y));
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn rotated_jaccard_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..40 {
        let a = GraspRect::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(2.0..10.0),
            rng.gen_range(1.0..6.0),
            rng.gen_range(-90.0..90.0),
            0,
        );
        let b = GraspRect::new(
            a.cx + rng.gen_range(-4.0..4.0),
            a.cy + rng.gen_range(-4.0..4.0),
            rng.gen_range(2.0..10.0),
            rng.gen_range(1.0..6.0),
            rng.gen_range(-90.0..90.0),
            0,
        );
        let mc = monte_carlo_iou(&a, &b, 200_000, &mut rng);
        let exact = jaccard_rotated(&a, &b);
        assert!((mc - exact).abs() < 0.01, "{a:?} {b:?}: mc {mc} exact {exact}");
    }
}

#[test]
fn frozen_monte_carlo_values() {
    // Estimated with 10^7 samples and frozen here.
    let cases = [
        (GraspRect::new(0.0, 0.0, 4.0, 2.0, 0.0, 0), GraspRect::new(0.0, 0.0, 4.0, 2.0, 45.0, 0), 0.5183),
        (GraspRect::new(0.0, 0.0, 6.0, 3.0, 10.0, 0), GraspRect::new(1.0, 0.5, 5.0, 2.0, -20.0, 0), 0.4195),
    ];
    for (a, b, want) in cases {
        let got = jaccard_rotated(&a, &b);
        assert!((got - want).abs() < 2e-3, "got {got} want {want}");
    }
}

#[test]
fn intersection_area_is_bounded_and_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let mk = |rng: &mut ChaCha8Rng| {
            GraspRect::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.5..6.0),
                rng.gen_range(0.5..6.0),
                rng.gen_range(-90.0..90.0),
                0,
            )
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let (pa, pb) = (rect_to_polygon(&a), rect_to_polygon(&b));
        let ab = convex_intersection_area(&pa, &pb);
        let ba = convex_intersection_area(&pb, &pa);
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab >= -1e-12 && ab <= pa.area().min(pb.area()) + 1e-9);
    }
}

/// Edge (a, b) means a rests on b; a must be removed before b.
fn valid_removal(edges: &[(u32, u32)], order: &[u32]) -> bool {
    let pos = |n: u32| order.iter().position(|&x| x == n);
    edges.iter().all(|&(a, b)| match (pos(a), pos(b)) {
        (Some(pa), Some(pb)) => pa < pb,
        (None, Some(_)) => false,
        _ => true,
    })
}

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

/// Every orientation of every pair among `n` nodes: none, forward or backward.
fn all_graphs(n: u32) -> impl Iterator<Item = Vec<(u32, u32)>> {
    let pairs: Vec<(u32, u32)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let total = 3usize.pow(pairs.len() as u32);
    (0..total).map(move |mut code| {
        let mut edges = Vec::new();
        for &(a, b) in &pairs {
            match code % 3 {
                1 => edges.push((a, b)),
                2 => edges.push((b, a)),
                _ => {}
            }
            code /= 3;
        }
        edges
    })
}

fn brute_cycles(n: u32, edges: &[(u32, u32)]) -> BTreeSet<Vec<u32>> {
    let has = |a: u32, b: u32| edges.contains(&(a, b));
    let mut out = BTreeSet::new();
    for mask in 1u32..(1 << n) {
        let nodes: Vec<u32> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if nodes.len() < 2 {
            continue;
        }
        for p in permutations(&nodes[1..]) {
            let mut cyc = vec![nodes[0]];
            cyc.extend(p);
            if (0..cyc.len()).all(|i| has(cyc[i], cyc[(i + 1) % cyc.len()])) {
                out.insert(cyc);
            }
        }
    }
    out
}

#[test]
fn planner_matches_exhaustive_search_up_to_five_objects() {
    for n in 1..=5u32 {
        let nodes: Vec<u32> = (0..n).collect();
        let perms = permutations(&nodes);
        for edges in all_graphs(n) {
            let mut g = RelationGraph::with_nodes(nodes.iter().copied());
            for &(a, b) in &edges {
                g.add_edge(a, b, 1.0);
            }
            // permutations() yields lexicographic order, so the first valid one is the oracle.
            let oracle = perms.iter().find(|p| valid_removal(&edges, p));
            let cycles = brute_cycles(n, &edges);
            match (full_clearing_order(&g), oracle) {
                (Ok(order), Some(want)) => {
                    assert_eq!(&order, want, "edges {edges:?}");
                    assert!(cycles.is_empty());
                    for target in 0..n {
                        let plan = grasp_order_for_target(&g, target).unwrap();
                        // Oracle: the shortest valid prefix of any full removal that reaches target.
                        let shortest = perms
                            .iter()
                            .filter(|p| valid_removal(&edges, p))
                            .map(|p| {
                                let k = p.iter().position(|&x| x == target).unwrap();
                                p[..=k].to_vec()
                            })
                            .min_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)))
                            .unwrap();
                        assert_eq!(plan, shortest, "edges {edges:?} target {target}");
                    }
                }
                (Err(PlanError::Cycle(found)), None) => {
                    let found: BTreeSet<Vec<u32>> = found.into_iter().collect();
                    assert_eq!(found, cycles, "edges {edges:?}");
                    assert_eq!(detect_cycles(&g).len(), cycles.len());
                }
                (got, want) => panic!("edges {edges:?}: got {got:?}, oracle {want:?}"),
            }
        }
    }
}

/// Area under the interpolated precision/recall curve by midpoint integration.
fn integrated_ap(ranked: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut sorted = ranked.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, &(_, hit)) in sorted.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let steps = 200_000;
    let mut area = 0.0;
    for i in 0..steps {
        let r = (i as f64 + 0.5) / steps as f64;
        let p = points.iter().filter(|(rc, _)| *rc >= r).map(|(_, p)| *p).fold(0.0, f64::max);
        area += p / steps as f64;
    }
    area
}

#[test]
fn average_precision_matches_integrated_curve() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..30 {
        let n_pred = rng.gen_range(1..12);
        let mut ranked: Vec<(f64, bool)> = (0..n_pred).map(|i| (i as f64 + rng.gen::<f64>() * 0.5, rng.gen())).collect();
        let hits = ranked.iter().filter(|r| r.1).count();
        let n_gt = hits + rng.gen_range(0..3);
        if n_gt == 0 {
            continue;
        }
        let want = integrated_ap(&ranked, n_gt);
        let got = average_precision(&mut ranked, n_gt);
        assert!((got - want).abs() < 1e-4, "got {got} want {want}");
    }
}
