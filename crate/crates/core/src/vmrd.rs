//! Best-effort importer for VMRD-style annotation directories.
//!
//! Expected layout (missing pieces produce warnings, never a global abort):
//!
//! ```text
//! <dir>/Annotations/<stem>.xml   VOC-style objects with <index>, <father>, <children>
//! <dir>/Grasps/<stem>.txt        one grasp per line: x1 y1 x2 y2 x3 y3 x4 y4 <object index> [tag]
//! <dir>/JPEGImages/<filename>    referenced by <filename>
//! ```
//!
//! An object's `<father>` entries are read as the objects it rests on, and
//! its `<children>` entries as the objects resting on it. Class ids are
//! assigned in sorted order of all class names seen in the directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use crate::scene::{validate_scene, GraspRect, ImageRef, ObjectBox, OwnedGrasp, Relation, RelationKind, SceneAnnotation};

#[derive(Debug, Clone, PartialEq)]
pub struct RawObject {
    pub index: u32,
    pub name: String,
    pub bbox: [f64; 4],
    pub fathers: Vec<u32>,
    pub children: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawAnnotation {
    pub filename: Option<String>,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<RawObject>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawGrasp {
    pub corners: [(f64, f64); 4],
    pub owner: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImportReport {
    pub files_seen: usize,
    pub scenes_parsed: usize,
    pub scenes_skipped: usize,
    pub grasps_parsed: usize,
    pub grasps_skipped: usize,
    pub classes: Vec<String>,
    pub warnings: Vec<String>,
}

impl fmt::Display for ImportReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.files_seen == 0 {
            writeln!(f, "no annotation files found")?;
        }
        writeln!(f, "annotation files: {}", self.files_seen)?;
        writeln!(f, "scenes parsed: {}", self.scenes_parsed)?;
        writeln!(f, "scenes skipped: {}", self.scenes_skipped)?;
        writeln!(f, "grasps parsed: {}", self.grasps_parsed)?;
        writeln!(f, "grasps skipped: {}", self.grasps_skipped)?;
        writeln!(f, "classes: {}", self.classes.join(", "))?;
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, tag: &str) -> Option<&'a str> {
    node.children()
        .find(|c| c.has_tag_name(tag))
        .and_then(|c| c.text())
        .map(str::trim)
}

fn parse_num(node: roxmltree::Node<'_, '_>, tag: &str) -> Result<f64, String> {
    let t = child_text(node, tag).ok_or_else(|| format!("missing <{tag}>"))?;
    let v: f64 = t.parse().map_err(|_| format!("<{tag}> not a number: {t:?}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("<{tag}> not finite"))
    }
}

/// Index lists may be nested `<num>` elements or whitespace-separated text.
fn parse_index_list(node: Option<roxmltree::Node<'_, '_>>) -> Result<Vec<u32>, String> {
    let Some(node) = node else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for d in node.descendants().filter(|d| d.is_text()) {
        for tok in d.text().unwrap_or("").split(|c: char| c.is_whitespace() || c == ',') {
            if tok.is_empty() {
                continue;
            }
            out.push(tok.parse::<u32>().map_err(|_| format!("bad relation index {tok:?}"))?);
        }
    }
    Ok(out)
}

pub fn parse_annotation(bytes: &[u8]) -> Result<RawAnnotation, String> {
    let text = std::str::from_utf8(bytes).map_err(|e| format!("not UTF-8: {e}"))?;
    let doc = roxmltree::Document::parse(text).map_err(|e| format!("xml: {e}"))?;
    let root = doc.root_element();
    let size = root.children().find(|c| c.has_tag_name("size"));
    let dim = |tag: &str| -> Result<u32, String> {
        let s = size.ok_or("missing <size>")?;
        let v = parse_num(s, tag)?;
        if v >= 1.0 && v <= u32::MAX as f64 {
            Ok(v as u32)
        } else {
            Err(format!("<{tag}> out of range"))
        }
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let mut objects = Vec::new();
    for (k, o) in root.children().filter(|c| c.has_tag_name("object")).enumerate() {
        let name = child_text(o, "name").ok_or(format!("object {k}: missing <name>"))?.to_string();
        let bb = o
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or(format!("object {k}: missing <bndbox>"))?;
        let bbox = [
            parse_num(bb, "xmin")?,
            parse_num(bb, "ymin")?,
            parse_num(bb, "xmax")?,
            parse_num(bb, "ymax")?,
        ];
        let index = match child_text(o, "index") {
            Some(t) => t.parse::<u32>().map_err(|_| format!("object {k}: bad <index> {t:?}"))?,
            None => k as u32,
        };
        objects.push(RawObject {
            index,
            name,
            bbox,
            fathers: parse_index_list(o.children().find(|c| c.has_tag_name("father")))?,
            children: parse_index_list(o.children().find(|c| c.has_tag_name("children")))?,
        });
    }
    Ok(RawAnnotation {
        filename: child_text(root, "filename").map(str::to_string),
        width,
        height,
        objects,
    })
}

/// Parses grasp lines, returning good grasps plus one warning per bad line.
pub fn parse_grasps(bytes: &[u8]) -> (Vec<RawGrasp>, Vec<String>) {
    let text = String::from_utf8_lossy(bytes);
    let mut grasps = Vec::new();
    let mut warnings = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let parsed = (|| {
            if toks.len() < 9 {
                return None;
            }
            let mut v = [0.0f64; 8];
            for (slot, t) in v.iter_mut().zip(&toks[..8]) {
                *slot = t.parse().ok().filter(|x: &f64| x.is_finite())?;
            }
            let owner = toks[8].parse::<u32>().ok()?;
            Some(RawGrasp {
                corners: [(v[0], v[1]), (v[2], v[3]), (v[4], v[5]), (v[6], v[7])],
                owner,
            })
        })();
        match parsed {
            Some(g) => grasps.push(g),
            None => warnings.push(format!("line {}: malformed grasp {:?}", ln + 1, line.trim())),
        }
    }
    (grasps, warnings)
}

/// Oriented rectangle from four corners; the first edge is the opening axis.
pub fn grasp_from_corners(c: &[(f64, f64); 4], cls: u32) -> Option<GraspRect> {
    let cx = c.iter().map(|p| p.0).sum::<f64>() / 4.0;
    let cy = c.iter().map(|p| p.1).sum::<f64>() / 4.0;
    let w = (c[1].0 - c[0].0).hypot(c[1].1 - c[0].1);
    let h = (c[2].0 - c[1].0).hypot(c[2].1 - c[1].1);
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return None;
    }
    let theta = (c[1].1 - c[0].1).atan2(c[1].0 - c[0].0).to_degrees();
    Some(GraspRect::new(cx, cy, w, h, theta, cls))
}

/// Turns one parsed annotation (plus grasps) into a validated scene.
pub fn assemble_scene(
    raw: &RawAnnotation,
    grasps: &[RawGrasp],
    classes: &BTreeMap<String, u32>,
    image: ImageRef,
    warnings: &mut Vec<String>,
) -> Result<(SceneAnnotation, usize, usize), String> {
    let mut objects = Vec::new();
    for o in &raw.objects {
        let cls = *classes.get(&o.name).ok_or_else(|| format!("unknown class {:?}", o.name))?;
        let [x1, y1, x2, y2] = o.bbox;
        objects.push(ObjectBox::new(o.index, cls, x1, y1, x2, y2));
    }
    objects.sort_by_key(|o| o.id);

    let mut on_top_of: BTreeSet<(u32, u32)> = BTreeSet::new();
    for o in &raw.objects {
        for &f in &o.fathers {
            on_top_of.insert((o.index, f));
        }
        for &c in &o.children {
            on_top_of.insert((c, o.index));
        }
    }
    let mut relations = Vec::new();
    for (i, a) in objects.iter().enumerate() {
        for b in &objects[i + 1..] {
            let ab = on_top_of.contains(&(a.id, b.id));
            let ba = on_top_of.contains(&(b.id, a.id));
            let kind = match (ab, ba) {
                (true, true) => return Err(format!("objects {} and {} are each on the other", a.id, b.id)),
                (true, false) => RelationKind::On,
                (false, true) => RelationKind::Under,
                (false, false) => RelationKind::NoRel,
            };
            relations.push(Relation::new(a.id, b.id, kind));
        }
    }

    let mut owned = Vec::new();
    let mut skipped = 0;
    for g in grasps {
        let Some(obj) = objects.iter().find(|o| o.id == g.owner) else {
            warnings.push(format!("grasp owner {} has no object", g.owner));
            skipped += 1;
            continue;
        };
        match grasp_from_corners(&g.corners, obj.cls) {
            Some(rect) => owned.push(OwnedGrasp { owner: g.owner, rect }),
            None => {
                warnings.push(format!("degenerate grasp for object {}", g.owner));
                skipped += 1;
            }
        }
    }

    let scene = SceneAnnotation {
        image,
        width: raw.width,
        height: raw.height,
        objects,
        grasps: owned,
        relations,
    };
    let v = validate_scene(&scene);
    if !v.is_empty() {
        return Err(v.join("; "));
    }
    let n = scene.grasps.len();
    Ok((scene, n, skipped))
}

/// Imports every scene under `dir`; problems are collected in the report.
pub fn import_vmrd(dir: &Path) -> (Vec<SceneAnnotation>, ImportReport) {
    let mut report = ImportReport::default();
    let ann_dir = dir.join("Annotations");
    let mut files: Vec<_> = match fs::read_dir(&ann_dir) {
        Ok(rd) => rd
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "xml"))
            .collect(),
        Err(e) => {
            report.warnings.push(format!("{}: {e}", ann_dir.display()));
            Vec::new()
        }
    };
    files.sort();
    report.files_seen = files.len();

    let mut parsed = Vec::new();
    for path in &files {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let raw = match fs::read(path).map_err(|e| e.to_string()).and_then(|b| parse_annotation(&b)) {
            Ok(r) => r,
            Err(e) => {
                report.warnings.push(format!("{}: {e}", path.display()));
                report.scenes_skipped += 1;
                continue;
            }
        };
        let grasp_path = dir.join("Grasps").join(format!("{stem}.txt"));
        let (grasps, gw) = match fs::read(&grasp_path) {
            Ok(b) => parse_grasps(&b),
            Err(_) => (Vec::new(), vec![format!("{}: no grasp file", grasp_path.display())]),
        };
        report.grasps_skipped += gw.len();
        report.warnings.extend(gw.into_iter().map(|w| format!("{stem}: {w}")));
        parsed.push((stem, raw, grasps));
    }

    let names: BTreeSet<String> = parsed
        .iter()
        .flat_map(|(_, r, _)| r.objects.iter().map(|o| o.name.clone()))
        .collect();
    let classes: BTreeMap<String, u32> = names.iter().cloned().zip(0..).collect();
    report.classes = names.into_iter().collect();

    let mut scenes = Vec::new();
    for (stem, raw, grasps) in parsed {
        let image = ImageRef::Path(match &raw.filename {
            Some(f) => format!("JPEGImages/{f}"),
            None => format!("JPEGImages/{stem}.jpg"),
        });
        let mut warnings = Vec::new();
        match assemble_scene(&raw, &grasps, &classes, image, &mut warnings) {
            Ok((scene, ok, skipped)) => {
                report.grasps_parsed += ok;
                report.grasps_skipped += skipped;
                report.scenes_parsed += 1;
                scenes.push(scene);
            }
            Err(e) => {
                report.scenes_skipped += 1;
                report.warnings.push(format!("{stem}: skipped: {e}"));
            }
        }
        report.warnings.extend(warnings.into_iter().map(|w| format!("{stem}: {w}")));
    }
    (scenes, report)
}

/// In-memory import of one annotation/grasp pair, as used by the file importer.
pub fn import_one(xml: &[u8], grasps: &[u8]) -> Result<SceneAnnotation, String> {
    let raw = parse_annotation(xml)?;
    let (g, mut warnings) = parse_grasps(grasps);
    let classes: BTreeMap<String, u32> = raw
        .objects
        .iter()
        .map(|o| o.name.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .zip(0..)
        .collect();
    assemble_scene(&raw, &g, &classes, ImageRef::Path("image.jpg".into()), &mut warnings).map(|(s, _, _)| s)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn fixture_imports_to_one_valid_scene() {
        let s = import_one(XML.as_bytes(), GRASPS.as_bytes()).unwrap();
        assert_eq!(s.objects.len(), 2);
        assert_eq!(s.relations, vec![Relation::new(1, 2, RelationKind::On)]);
        assert_eq!(s.grasps.len(), 2);
        let g = s.grasps[0].rect;
        assert_eq!((g.cx, g.cy, g.w, g.h, g.theta_deg), (80.0, 85.0, 40.0, 10.0, 0.0));
        assert_eq!(s.grasps[1].rect.theta_deg, 90.0);
    }

    #[test]
    fn malformed_grasp_line_is_skipped_with_warning() {
        let (g, w) = parse_grasps(b"1 2 3\n60 80 100 80 100 90 60 90 1\n");
        assert_eq!(g.len(), 1);
        assert_eq!(w.len(), 1);
        assert!(w[0].starts_with("line 1"));
    }

    #[test]
    fn empty_directory_reports_zero() {
        let dir = tempfile::tempdir().unwrap();
        let (scenes, report) = import_vmrd(dir.path());
        assert!(scenes.is_empty());
        assert_eq!(report.scenes_parsed, 0);
        assert!(report.to_string().contains("no annotation files found"));
    }

    #[test]
    fn directory_import_keeps_scene_and_skips_bad_grasp() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("Annotations")).unwrap();
        fs::create_dir_all(dir.path().join("Grasps")).unwrap();
        fs::write(dir.path().join("Annotations/000001.xml"), XML).unwrap();
        fs::write(
            dir.path().join("Grasps/000001.txt"),
            format!("{GRASPS}not a grasp line at all\n"),
        )
        .unwrap();
        fs::write(dir.path().join("Annotations/000002.xml"), "<annotation>").unwrap();
        let (scenes, report) = import_vmrd(dir.path());
        assert_eq!(scenes.len(), 1);
        assert_eq!(report.scenes_parsed, 1);
        assert_eq!(report.scenes_skipped, 1);
        assert_eq!(report.grasps_parsed, 2);
        assert_eq!(report.grasps_skipped, 1);
        assert_eq!(report.classes, vec!["box".to_string(), "tape".to_string()]);
        assert_eq!(scenes[0].image, ImageRef::Path("JPEGImages/000001.jpg".into()));
    }

    #[test]
    fn contradictory_relations_skip_the_scene() {
        let xml = XML.replace("<father></father>", "<father>1</father>");
        assert!(import_one(xml.as_bytes(), b"").unwrap_err().contains("each on the other"));
    }
}
