//! Scene JSON files and PNG images.
//!
//! The writer is hand-rolled so the output is byte-stable: keys always come
//! out in the same order and every coordinate is printed with six decimals.
//! The reader is tolerant of unknown keys, which are dropped on save.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::scene::{
    normalize_angle_deg, validate_scene, GraspRect, ImageRef, ObjectBox, OwnedGrasp, Relation, RelationKind, RgbImage,
    SceneAnnotation,
};
use crate::DataError;

pub const EMBEDDED_IMAGE: &str = "embedded";

fn f6(out: &mut String, v: f64) {
    // Avoid printing "-0.000000".
    let v = if v == 0.0 { 0.0 } else { v };
    let _ = write!(out, "{v:.6}");
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

/// Canonical JSON text for `scene`.
pub fn scene_to_json(scene: &SceneAnnotation) -> String {
    let mut s = String::new();
    let image = match &scene.image {
        ImageRef::Path(p) => p.as_str(),
        ImageRef::Embedded(_) => EMBEDDED_IMAGE,
    };
    let _ = write!(
        s,
        "{{\"image\":{},\"width\":{},\"height\":{},\"objects\":[",
        json_string(image),
        scene.width,
        scene.height
    );
    for (i, o) in scene.objects.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{{\"id\":{},\"cls\":{},\"bbox\":[", o.id, o.cls);
        for (k, v) in [o.x1, o.y1, o.x2, o.y2].into_iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            f6(&mut s, v);
        }
        s.push_str("]}");
    }
    s.push_str("],\"grasps\":[");
    for (i, g) in scene.grasps.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let r = &g.rect;
        let _ = write!(s, "{{\"owner\":{},\"cx\":", g.owner);
        f6(&mut s, r.cx);
        s.push_str(",\"cy\":");
        f6(&mut s, r.cy);
        s.push_str(",\"w\":");
        f6(&mut s, r.w);
        s.push_str(",\"h\":");
        f6(&mut s, r.h);
        s.push_str(",\"theta\":");
        f6(&mut s, r.theta_deg);
        s.push('}');
    }
    s.push_str("],\"relations\":[");
    for (i, r) in scene.relations.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(
            s,
            "{{\"from\":{},\"to\":{},\"kind\":\"{}\"}}",
            r.from_id,
            r.to_id,
            r.kind.as_str()
        );
    }
    s.push_str("]}\n");
    s
}

fn parse_err(context: impl Into<String>, message: impl Into<String>) -> DataError {
    DataError::Parse {
        context: context.into(),
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, ctx: &str) -> Result<&'a Value, DataError> {
    obj.get(key).ok_or_else(|| parse_err(ctx, format!("missing \"{key}\"")))
}

fn as_f64(v: &Value, ctx: &str) -> Result<f64, DataError> {
    v.as_f64().ok_or_else(|| parse_err(ctx, "expected a number"))
}

fn as_u32(v: &Value, ctx: &str) -> Result<u32, DataError> {
    v.as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| parse_err(ctx, "expected a non-negative integer"))
}

fn as_array<'a>(v: &'a Value, ctx: &str) -> Result<&'a Vec<Value>, DataError> {
    v.as_array().ok_or_else(|| parse_err(ctx, "expected an array"))
}

fn as_object<'a>(v: &'a Value, ctx: &str) -> Result<&'a Map<String, Value>, DataError> {
    v.as_object().ok_or_else(|| parse_err(ctx, "expected an object"))
}

/// Parses scene JSON without validating invariants.
pub fn parse_scene_unchecked(text: &str) -> Result<SceneAnnotation, DataError> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| parse_err(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    let root = as_object(&root, "document")?;

    let image = match field(root, "image", "document")? {
        Value::String(s) if s == EMBEDDED_IMAGE => ImageRef::Embedded(RgbImage::new(0, 0)),
        Value::String(s) => ImageRef::Path(s.clone()),
        _ => return Err(parse_err("image", "expected a string")),
    };
    let width = as_u32(field(root, "width", "document")?, "width")?;
    let height = as_u32(field(root, "height", "document")?, "height")?;
    if let ImageRef::Embedded(img) = &image {
        debug_assert!(img.data.is_empty());
    }

    let mut objects = Vec::new();
    for (i, v) in as_array(field(root, "objects", "document")?, "objects")?.iter().enumerate() {
        let ctx = format!("objects[{i}]");
        let o = as_object(v, &ctx)?;
        let id = as_u32(field(o, "id", &ctx)?, &format!("{ctx}.id"))?;
        let cls = as_u32(field(o, "cls", &ctx)?, &format!("{ctx}.cls"))?;
        let bbox = as_array(field(o, "bbox", &ctx)?, &format!("{ctx}.bbox"))?;
        if bbox.len() != 4 {
            return Err(parse_err(format!("{ctx}.bbox"), "expected 4 numbers"));
        }
        let c: Vec<f64> = bbox
            .iter()
            .map(|v| as_f64(v, &format!("{ctx}.bbox")))
            .collect::<Result<_, _>>()?;
        objects.push(ObjectBox::new(id, cls, c[0], c[1], c[2], c[3]));
    }

    let mut grasps = Vec::new();
    for (i, v) in as_array(field(root, "grasps", "document")?, "grasps")?.iter().enumerate() {
        let ctx = format!("grasps[{i}]");
        let g = as_object(v, &ctx)?;
        let num = |k: &str| as_f64(field(g, k, &ctx)?, &format!("{ctx}.{k}"));
        let owner = as_u32(field(g, "owner", &ctx)?, &format!("{ctx}.owner"))?;
        let cls = objects.iter().find(|o| o.id == owner).map_or(0, |o| o.cls);
        grasps.push(OwnedGrasp {
            owner,
            rect: GraspRect {
                cx: num("cx")?,
                cy: num("cy")?,
                w: num("w")?,
                h: num("h")?,
                theta_deg: normalize_angle_deg(num("theta")?),
                cls,
                confidence: 1.0,
            },
        });
    }

    let mut relations = Vec::new();
    for (i, v) in as_array(field(root, "relations", "document")?, "relations")?.iter().enumerate() {
        let ctx = format!("relations[{i}]");
        let r = as_object(v, &ctx)?;
        let from = as_u32(field(r, "from", &ctx)?, &format!("{ctx}.from"))?;
        let to = as_u32(field(r, "to", &ctx)?, &format!("{ctx}.to"))?;
        let kind = field(r, "kind", &ctx)?
            .as_str()
            .and_then(RelationKind::parse)
            .ok_or_else(|| parse_err(format!("{ctx}.kind"), "expected \"on\", \"under\" or \"no_rel\""))?;
        relations.push(Relation::new(from, to, kind));
    }

    Ok(SceneAnnotation {
        image,
        width,
        height,
        objects,
        grasps,
        relations,
    })
}

/// Parses and validates scene JSON.
pub fn parse_scene(text: &str) -> Result<SceneAnnotation, DataError> {
    let scene = parse_scene_unchecked(text)?;
    let violations = validate_scene(&scene);
    if violations.is_empty() {
        Ok(scene)
    } else {
        Err(DataError::Validation(violations))
    }
}

pub fn load_scene(path: &Path) -> Result<SceneAnnotation, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_scene(&text).map_err(|e| e.in_file(path))
}

pub fn save_scene(path: &Path, scene: &SceneAnnotation) -> Result<(), DataError> {
    fs::write(path, scene_to_json(scene)).map_err(|e| DataError::io(path, e))
}

/// Resolves the scene's pixel buffer, reading PNG paths relative to `base_dir`.
pub fn scene_image(scene: &SceneAnnotation, base_dir: &Path) -> Result<RgbImage, DataError> {
    match &scene.image {
        ImageRef::Embedded(img) if !img.data.is_empty() => Ok(img.clone()),
        ImageRef::Embedded(_) => Err(parse_err("image", "scene has no embedded pixels")),
        ImageRef::Path(p) => read_png(&resolve(base_dir, p)),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_png(path: &Path) -> Result<RgbImage, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    Ok(RgbImage {
        width: img.width(),
        height: img.height(),
        data: img.into_raw(),
    })
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<(), DataError> {
    let buf = image::RgbImage::from_raw(img.width, img.height, img.data.clone())
        .ok_or_else(|| parse_err("image", "pixel buffer size does not match dimensions"))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = concat!(
        "{\"image\":\"scene.png\",\"width\":64,\"height\":48,\"objects\":[",
        "{\"id\":0,\"cls\":1,\"bbox\":[10.000000,10.000000,30.000000,30.000000]},",
        "{\"id\":1,\"cls\":2,\"bbox\":[20.500000,20.000000,50.000000,40.250000]}],",
        "\"grasps\":[{\"owner\":0,\"cx\":20.000000,\"cy\":20.000000,\"w\":24.000000,\"h\":6.000000,\"theta\":-45.500000}],",
        "\"relations\":[{\"from\":0,\"to\":1,\"kind\":\"on\"}]}\n"
    );

    #[test]
    fn canonical_fixture_round_trips_bytes() {
        let scene = parse_scene(FIXTURE).unwrap();
        assert_eq!(scene_to_json(&scene), FIXTURE);
        assert_eq!(scene.grasps[0].rect.cls, 1);
    }

    #[test]
    fn missing_relations_key_is_a_parse_error() {
        let text = FIXTURE.replace(",\"relations\":[{\"from\":0,\"to\":1,\"kind\":\"on\"}]", "");
        match parse_scene(&text) {
            Err(DataError::Parse { message, .. }) => assert!(message.contains("relations")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse_scene("{\"image\": }") {
            Err(DataError::Parse { context, .. }) => assert!(context.starts_with("line 1 column")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_dropped() {
        let text = FIXTURE.replacen("{\"image\"", "{\"note\":\"hi\",\"image\"", 1);
        let scene = parse_scene(&text).unwrap();
        assert_eq!(scene_to_json(&scene), FIXTURE);
    }

    #[test]
    fn invalid_scene_reports_violations() {
        let text = FIXTURE.replace("\"owner\":0", "\"owner\":7");
        match parse_scene(&text) {
            Err(DataError::Validation(v)) => assert_eq!(v, vec!["grasp owner 7 missing".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn angles_are_normalized_on_ingest() {
        let text = FIXTURE.replace("-45.500000", "-90.000000");
        let scene = parse_scene(&text).unwrap();
        assert_eq!(scene.grasps[0].rect.theta_deg, 90.0);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::filled(5, 4, [10, 20, 30]);
        img.put(2, 3, [255, 0, 7]);
        let p = dir.path().join("x.png");
        write_png(&p, &img).unwrap();
        assert_eq!(read_png(&p).unwrap(), img);
    }
}
