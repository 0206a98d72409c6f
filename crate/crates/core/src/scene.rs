//! Canonical domain types shared across the workbench.
//!
//! Everything here is plain value data: grasp rectangles, object boxes,
//! pairwise manipulation relations and the scene annotation that ties them
//! together. [`validate_scene`] reports invariant violations as data rather
//! than failing, so importers can decide what to keep.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub type ObjectId = u32;
pub type ClassId = u32;

/// Folds any angle in degrees onto the half-open interval (-90, 90].
///
/// Grasp rectangles are symmetric under a half turn, so `θ` and `θ + 180k`
/// describe the same gripper pose.
pub fn normalize_angle_deg(theta: f64) -> f64 {
    let mut t = theta % 180.0;
    if t > 90.0 {
        t -= 180.0;
    } else if t <= -90.0 {
        t += 180.0;
    }
    t
}

/// Oriented grasp rectangle `{x, y, w, h, θ, cls}`.
///
/// `w` runs along the gripper opening direction `(cos θ, sin θ)` in image
/// coordinates, `h` along the finger width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspRect {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta_deg: f64,
    pub cls: ClassId,
    pub confidence: f64,
}

impl GraspRect {
    /// Builds a ground-truth grasp; the angle is normalized on the way in.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta_deg: f64, cls: ClassId) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            theta_deg: normalize_angle_deg(theta_deg),
            cls,
            confidence: 1.0,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.w > 0.0 && self.w.is_finite()) {
            out.push(format!("grasp w {} not positive", self.w));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            out.push(format!("grasp h {} not positive", self.h));
        }
        if !(self.theta_deg > -90.0 && self.theta_deg <= 90.0) {
            out.push(format!("grasp theta {} outside (-90, 90]", self.theta_deg));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            out.push(format!("grasp confidence {} outside [0, 1]", self.confidence));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            out.push("grasp center not finite".to_string());
        }
        out
    }
}

/// Axis-aligned object box in corner form, pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub id: ObjectId,
    pub cls: ClassId,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl ObjectBox {
    pub fn new(id: ObjectId, cls: ClassId, x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            id,
            cls,
            x1,
            y1,
            x2,
            y2,
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

/// Pairwise manipulation relation between an ordered object pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationKind {
    /// `from` rests on top of `to`.
    On,
    /// `from` lies underneath `to`.
    Under,
    NoRel,
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] = [RelationKind::On, RelationKind::Under, RelationKind::NoRel];

    /// Index into `{On, Under, NoRel}` probability vectors.
    pub fn index(self) -> usize {
        match self {
            RelationKind::On => 0,
            RelationKind::Under => 1,
            RelationKind::NoRel => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::On => "on",
            RelationKind::Under => "under",
            RelationKind::NoRel => "no_rel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "on" => Some(RelationKind::On),
            "under" => Some(RelationKind::Under),
            "no_rel" => Some(RelationKind::NoRel),
            _ => None,
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Relation seen from the other object of the pair.
pub fn relation_inverse(kind: RelationKind) -> RelationKind {
    match kind {
        RelationKind::On => RelationKind::Under,
        RelationKind::Under => RelationKind::On,
        RelationKind::NoRel => RelationKind::NoRel,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub from_id: ObjectId,
    pub to_id: ObjectId,
    pub kind: RelationKind,
}

impl Relation {
    pub fn new(from_id: ObjectId, to_id: ObjectId, kind: RelationKind) -> Self {
        Self { from_id, to_id, kind }
    }

    /// Same fact stated from the other end of the pair.
    pub fn flipped(self) -> Self {
        Self {
            from_id: self.to_id,
            to_id: self.from_id,
            kind: relation_inverse(self.kind),
        }
    }

    /// Rewrites the relation in min-id → max-id direction.
    pub fn canonical(self) -> Self {
        if self.from_id <= self.to_id {
            self
        } else {
            self.flipped()
        }
    }

    /// Relation as seen from `from` towards `to`, if this relation covers that pair.
    pub fn oriented(self, from: ObjectId, to: ObjectId) -> Option<RelationKind> {
        if self.from_id == from && self.to_id == to {
            Some(self.kind)
        } else if self.from_id == to && self.to_id == from {
            Some(relation_inverse(self.kind))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OwnedGrasp {
    pub owner: ObjectId,
    pub rect: GraspRect,
}

/// 8-bit RGB pixel buffer, row-major, 3 bytes per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; (width * height * 3) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

impl fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RgbImage({}x{})", self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageRef {
    Path(String),
    Embedded(RgbImage),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    pub image: ImageRef,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectBox>,
    pub grasps: Vec<OwnedGrasp>,
    pub relations: Vec<Relation>,
}

impl SceneAnnotation {
    pub fn object(&self, id: ObjectId) -> Option<&ObjectBox> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn grasps_of(&self, id: ObjectId) -> impl Iterator<Item = &GraspRect> + '_ {
        self.grasps.iter().filter(move |g| g.owner == id).map(|g| &g.rect)
    }

    /// Relation between `a` and `b` oriented as `a → b`.
    pub fn relation_between(&self, a: ObjectId, b: ObjectId) -> Option<RelationKind> {
        self.relations.iter().find_map(|r| r.oriented(a, b))
    }

    /// Ids in ascending order.
    pub fn object_ids(&self) -> Vec<ObjectId> {
        let mut ids: Vec<_> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        ids
    }

    /// Every unordered pair `(i, j)` with `i < j`.
    pub fn canonical_pairs(&self) -> Vec<(ObjectId, ObjectId)> {
        let ids = self.object_ids();
        let mut out = Vec::with_capacity(ids.len() * ids.len().saturating_sub(1) / 2);
        for (k, &a) in ids.iter().enumerate() {
            for &b in &ids[k + 1..] {
                out.push((a, b));
            }
        }
        out
    }

    /// Re-derives grasp classes from their owners and normalizes all angles.
    pub fn normalize(&mut self) {
        let classes: BTreeMap<_, _> = self.objects.iter().map(|o| (o.id, o.cls)).collect();
        for g in &mut self.grasps {
            if let Some(&cls) = classes.get(&g.owner) {
                g.rect.cls = cls;
            }
            g.rect.theta_deg = normalize_angle_deg(g.rect.theta_deg);
        }
    }
}

/// Lists every broken invariant of `scene`; empty means the scene is valid.
pub fn validate_scene(scene: &SceneAnnotation) -> Vec<String> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for o in &scene.objects {
        if !ids.insert(o.id) {
            out.push(format!("object {} duplicate id", o.id));
        }
        if !(o.x1 < o.x2) {
            out.push(format!("object {} x1 {} >= x2 {}", o.id, o.x1, o.x2));
        }
        if !(o.y1 < o.y2) {
            out.push(format!("object {} y1 {} >= y2 {}", o.id, o.y1, o.y2));
        }
        if !(0.0..=1.0).contains(&o.score) {
            out.push(format!("object {} score {} outside [0, 1]", o.id, o.score));
        }
    }

    for g in &scene.grasps {
        match scene.object(g.owner) {
            None => out.push(format!("grasp owner {} missing", g.owner)),
            Some(o) if o.cls != g.rect.cls => out.push(format!(
                "grasp owner {} cls {} != object cls {}",
                g.owner, g.rect.cls, o.cls
            )),
            Some(_) => {}
        }
        for v in g.rect.violations() {
            out.push(format!("{v} (owner {})", g.owner));
        }
    }

    let n = ids.len();
    let expected = n * n.saturating_sub(1) / 2;
    if scene.relations.len() != expected {
        out.push(format!("relation coverage {} != {}", scene.relations.len(), expected));
    }
    let mut seen = BTreeSet::new();
    for r in &scene.relations {
        if r.from_id == r.to_id {
            out.push(format!("relation self-loop on object {}", r.from_id));
            continue;
        }
        for id in [r.from_id, r.to_id] {
            if !ids.contains(&id) {
                out.push(format!("relation object {id} missing"));
            }
        }
        if r.from_id > r.to_id {
            out.push(format!(
                "relation {}->{} not in canonical min->max direction",
                r.from_id, r.to_id
            ));
        }
        let key = (r.from_id.min(r.to_id), r.from_id.max(r.to_id));
        if !seen.insert(key) {
            out.push(format!("relation pair {}-{} duplicated", key.0, key.1));
        }
    }
    out
}
