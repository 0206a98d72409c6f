//! Static SVG overlay of a scene: boxes, rotated grasps and the relation tree.
//!
//! Output depends only on the input scenes, so repeated runs give the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use stackgrasp_core::{rect_to_polygon, ObjectId, RelationGraph, SceneAnnotation};

use crate::plan::loose_graph;

const PALETTE: [&str; 10] = [
    "#d62728", "#2ca02c", "#1f77b4", "#e6b400", "#9467bd", "#17becf", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
];
const NODE_GAP: f64 = 36.0;
const INSET_MARGIN: f64 = 16.0;

fn color(cls: u32) -> &'static str {
    PALETTE[cls as usize % PALETTE.len()]
}

/// Depth of every node: objects with nothing on them are level 0, anything
/// under a level-k object is at least level k+1. Cycles are cut off after
/// as many passes as there are nodes.
fn levels(g: &RelationGraph) -> BTreeMap<ObjectId, usize> {
    let mut level: BTreeMap<ObjectId, usize> = g.nodes().iter().map(|&n| (n, 0)).collect();
    for _ in 0..g.nodes().len() {
        let mut changed = false;
        for &(top, below) in g.edges() {
            let want = level[&top] + 1;
            if want > level[&below] && want < g.nodes().len() {
                level.insert(below, want);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    level
}

fn layer(s: &mut String, scene: &SceneAnnotation, id: &str, dashed: bool) {
    let dash = if dashed { " stroke-dasharray=\"4 3\"" } else { "" };
    let _ = writeln!(s, "<g id=\"{id}\" fill=\"none\" stroke-width=\"1.5\"{dash}>");
    for o in &scene.objects {
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" stroke=\"{}\"/>",
            o.x1,
            o.y1,
            o.width(),
            o.height(),
            color(o.cls)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"8\" fill=\"{}\" stroke=\"none\">{}</text>",
            o.x1 + 1.0,
            o.y1 + 8.0,
            color(o.cls),
            o.id
        );
    }
    for g in &scene.grasps {
        let pts: Vec<String> = rect_to_polygon(&g.rect)
            .vertices()
            .iter()
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect();
        let _ = writeln!(s, "<polygon points=\"{}\" stroke=\"{}\"/>", pts.join(" "), color(g.rect.cls));
    }
    s.push_str("</g>\n");
}

/// Draws the tree at horizontal offset `x0`; returns its width and height.
fn tree_inset(s: &mut String, scene: &SceneAnnotation, x0: f64) -> (f64, f64) {
    let g = loose_graph(&scene.objects, scene.relations.iter().map(|&r| (r, 1.0))).unwrap_or_default();
    let level = levels(&g);
    let mut rows: BTreeMap<usize, Vec<ObjectId>> = BTreeMap::new();
    for (&n, &l) in &level {
        rows.entry(l).or_default().push(n);
    }
    let mut pos = BTreeMap::new();
    for (&l, ids) in &rows {
        for (k, &n) in ids.iter().enumerate() {
            pos.insert(n, (x0 + NODE_GAP * (k as f64 + 0.5), NODE_GAP * (l as f64 + 0.5)));
        }
    }
    let cls: BTreeMap<ObjectId, u32> = scene.objects.iter().map(|o| (o.id, o.cls)).collect();
    let _ = writeln!(s, "<g id=\"tree\" font-size=\"10\" text-anchor=\"middle\">");
    for &(top, below) in g.edges() {
        let (a, b) = (pos[&top], pos[&below]);
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#444\"/>",
            a.0, a.1, b.0, b.1
        );
    }
    for (n, (x, y)) in &pos {
        let _ = writeln!(
            s,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"10\" fill=\"white\" stroke=\"{}\"/>",
            color(cls.get(n).copied().unwrap_or(0))
        );
        let _ = writeln!(s, "<text x=\"{x:.2}\" y=\"{:.2}\">{n}</text>", y + 3.5);
    }
    s.push_str("</g>\n");
    let widest = rows.values().map(Vec::len).max().unwrap_or(0) as f64;
    (NODE_GAP * widest.max(1.0), NODE_GAP * rows.len().max(1) as f64)
}

/// SVG for `gt` (solid) and optionally `pred` (dashed), with the relation
/// tree of `gt` drawn to the right of the image area.
pub fn render_svg(gt: &SceneAnnotation, pred: Option<&SceneAnnotation>) -> String {
    let (w, h) = (gt.width as f64, gt.height as f64);
    let mut body = String::new();
    layer(&mut body, gt, "gt", false);
    if let Some(p) = pred {
        layer(&mut body, p, "pred", true);
    }
    let x0 = w + INSET_MARGIN;
    let (tw, th) = tree_inset(&mut body, gt, x0);
    let total_w = x0 + tw;
    let total_h = h.max(th);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w:.0}\" height=\"{total_h:.0}\" viewBox=\"0 0 {total_w:.0} {total_h:.0}\">"
    );
    let _ = writeln!(s, "<path d=\"M0 0H{w:.0}V{h:.0}H0Z\" fill=\"#f4f4f4\"/>");
    s.push_str(&body);
    s.push_str("</svg>\n");
    s
}
