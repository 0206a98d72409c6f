//! Synthetic stacked-block scenes with exact ground truth.
//!
//! Blocks are flat-colored axis-aligned rectangles, one class per color.
//! They are painted back to front in a random z-order, so a block painted
//! later occludes and rests on the blocks it overlaps. Object ids are
//! assigned independently of the z-order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::box_intersection;
use crate::scene::{GraspRect, ImageRef, ObjectBox, OwnedGrasp, Relation, RelationKind, RgbImage, SceneAnnotation};
use crate::DataError;

/// Intersection over the smaller box above which two blocks count as stacked.
pub const STACK_OVERLAP_THRESHOLD: f64 = 0.1;
/// Overlaps in `(0, REJECT_BAND]` are not generated, keeping labels away from the threshold.
pub const REJECT_BAND: f64 = 0.2;
/// Share of a block that must stay visible after everything above it is painted.
pub const MIN_VISIBLE_FRACTION: f64 = 0.4;
pub const MAX_ATTEMPTS: usize = 100;

pub const BACKGROUND: [u8; 3] = [128, 128, 128];

/// One color per class; all far from the gray background and from each other.
pub const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 180, 60],
    [40, 70, 220],
    [235, 200, 30],
    [200, 60, 200],
    [30, 200, 210],
    [250, 140, 20],
    [20, 20, 20],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapPolicy {
    /// Free placement; blocks overlap when they happen to.
    Random,
    /// A staircase in which each block rests on the previous one only.
    Chain,
    /// No two blocks touch.
    Disjoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub image_size: u32,
    pub min_side: u32,
    pub max_side: u32,
    pub n_classes: u32,
    pub policy: OverlapPolicy,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            min_objects: 2,
            max_objects: 5,
            image_size: 96,
            min_side: 16,
            max_side: 36,
            n_classes: 6,
            policy: OverlapPolicy::Random,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if !(2..=5).contains(&self.min_objects) || !(2..=5).contains(&self.max_objects) {
            return bad(format!(
                "object count range [{}, {}] must lie within [2, 5]",
                self.min_objects, self.max_objects
            ));
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects".into());
        }
        if self.n_classes as usize > PALETTE.len() || (self.n_classes as usize) < self.max_objects {
            return bad(format!(
                "n_classes {} must be between max_objects and {}",
                self.n_classes,
                PALETTE.len()
            ));
        }
        if self.min_side < 4 || self.min_side > self.max_side || self.max_side + 4 > self.image_size {
            return bad("block side range does not fit the image".into());
        }
        Ok(())
    }
}

/// A placed block before ids are assigned.
#[derive(Debug, Clone, Copy)]
struct Block {
    x1: u32,
    y1: u32,
    x2: u32,
    y2: u32,
}

impl Block {
    fn as_box(&self) -> ObjectBox {
        ObjectBox::new(0, 0, self.x1 as f64, self.y1 as f64, self.x2 as f64, self.y2 as f64)
    }

    fn area(&self) -> u32 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    fn center_px(&self) -> (u32, u32) {
        ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)
    }

    fn covers(&self, x: u32, y: u32) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }
}

/// Intersection area over the smaller of the two areas.
pub fn overlap_ratio(a: &ObjectBox, b: &ObjectBox) -> f64 {
    match box_intersection(a, b) {
        Some(i) => i.area() / a.area().min(b.area()),
        None => 0.0,
    }
}

fn visible_fraction(blocks: &[Block], k: usize) -> f64 {
    let b = blocks[k];
    let above = &blocks[k + 1..];
    let mut visible = 0u32;
    for y in b.y1..b.y2 {
        for x in b.x1..b.x2 {
            if !above.iter().any(|a| a.covers(x, y)) {
                visible += 1;
            }
        }
    }
    visible as f64 / b.area() as f64
}

/// Checks every constraint for a z-ordered (bottom first) block list.
fn acceptable(blocks: &[Block], policy: OverlapPolicy) -> bool {
    for (i, a) in blocks.iter().enumerate() {
        for b in &blocks[i + 1..] {
            let r = overlap_ratio(&a.as_box(), &b.as_box());
            let touching = !(a.x2 < b.x1 || b.x2 < a.x1 || a.y2 < b.y1 || b.y2 < a.y1);
            match policy {
                OverlapPolicy::Disjoint if touching => return false,
                _ if r > 0.0 && r <= REJECT_BAND => return false,
                _ => {}
            }
        }
    }
    for k in 0..blocks.len() {
        let (cx, cy) = blocks[k].center_px();
        if blocks[k + 1..].iter().any(|a| a.covers(cx, cy)) {
            return false;
        }
        if visible_fraction(blocks, k) < MIN_VISIBLE_FRACTION {
            return false;
        }
    }
    true
}

fn random_block(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Block {
    let w = rng.gen_range(cfg.min_side..=cfg.max_side);
    let h = rng.gen_range(cfg.min_side..=cfg.max_side);
    let x1 = rng.gen_range(2..=cfg.image_size - 2 - w);
    let y1 = rng.gen_range(2..=cfg.image_size - 2 - h);
    Block {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

/// Staircase: each block shifted diagonally so it overlaps its predecessor only.
fn chain_blocks(rng: &mut ChaCha8Rng, cfg: &SynthConfig, n: usize) -> Option<Vec<Block>> {
    let side = cfg.min_side.max(cfg.image_size / (n as u32 + 1)).min(cfg.max_side);
    // Horizontal step beyond half a side keeps each center uncovered; the
    // small vertical step keeps the overlap with the predecessor above the band.
    let step_x = (side * 3).div_ceil(5);
    let step_y = side / 4;
    let span_x = step_x * (n as u32 - 1) + side;
    let span_y = step_y * (n as u32 - 1) + side;
    if span_x + 4 > cfg.image_size || span_y + 4 > cfg.image_size {
        return None;
    }
    let ox = rng.gen_range(2..=cfg.image_size - 2 - span_x);
    let oy = rng.gen_range(2..=cfg.image_size - 2 - span_y);
    let flip = rng.gen_bool(0.5);
    Some(
        (0..n as u32)
            .map(|k| {
                let x1 = if flip { ox + span_x - side - k * step_x } else { ox + k * step_x };
                let y1 = oy + k * step_y;
                Block {
                    x1,
                    y1,
                    x2: x1 + side,
                    y2: y1 + side,
                }
            })
            .collect(),
    )
}

fn place_blocks(rng: &mut ChaCha8Rng, cfg: &SynthConfig, n: usize) -> Result<Vec<Block>, DataError> {
    match cfg.policy {
        OverlapPolicy::Chain => {
            for _ in 0..MAX_ATTEMPTS {
                if let Some(blocks) = chain_blocks(rng, cfg, n) {
                    if acceptable(&blocks, cfg.policy) {
                        return Ok(blocks);
                    }
                }
            }
        }
        OverlapPolicy::Random | OverlapPolicy::Disjoint => {
            // Blocks are added bottom-up; each one gets MAX_ATTEMPTS tries.
            let mut blocks: Vec<Block> = Vec::with_capacity(n);
            while blocks.len() < n {
                let mut placed = false;
                for _ in 0..MAX_ATTEMPTS {
                    blocks.push(random_block(rng, cfg));
                    if acceptable(&blocks, cfg.policy) {
                        placed = true;
                        break;
                    }
                    blocks.pop();
                }
                if !placed {
                    return Err(DataError::RetryExhausted {
                        objects: n,
                        attempts: MAX_ATTEMPTS,
                    });
                }
            }
            return Ok(blocks);
        }
    }
    Err(DataError::RetryExhausted {
        objects: n,
        attempts: MAX_ATTEMPTS,
    })
}

/// The two axis-aligned grasps of a block: one closing across its width,
/// one closing across its height.
pub fn block_grasps(b: &ObjectBox) -> [GraspRect; 2] {
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    [
        GraspRect::new(cx, cy, w + 4.0, (0.3 * h).round().max(4.0), 0.0, b.cls),
        GraspRect::new(cx, cy, h + 4.0, (0.3 * w).round().max(4.0), 90.0, b.cls),
    ]
}

pub fn render(width: u32, height: u32, boxes_bottom_first: &[ObjectBox]) -> RgbImage {
    let mut img = RgbImage::filled(width, height, BACKGROUND);
    for b in boxes_bottom_first {
        let color = PALETTE[b.cls as usize % PALETTE.len()];
        let edge = color.map(|c| (c as u32 * 3 / 4) as u8);
        let (x1, y1, x2, y2) = (b.x1 as u32, b.y1 as u32, b.x2 as u32, b.y2 as u32);
        for y in y1..y2.min(height) {
            for x in x1..x2.min(width) {
                let border = x == x1 || y == y1 || x + 1 == x2 || y + 1 == y2;
                img.put(x, y, if border { edge } else { color });
            }
        }
    }
    img
}

/// Generates one scene; the result is a pure function of `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(RgbImage, SceneAnnotation), DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let blocks = place_blocks(&mut rng, cfg, n)?;

    let mut classes: Vec<u32> = (0..cfg.n_classes).collect();
    classes.shuffle(&mut rng);
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.shuffle(&mut rng);

    // z-position k holds object ids[k].
    let boxes_bottom_first: Vec<ObjectBox> = blocks
        .iter()
        .enumerate()
        .map(|(k, b)| ObjectBox {
            id: ids[k],
            cls: classes[k],
            ..b.as_box()
        })
        .collect();
    let image = render(cfg.image_size, cfg.image_size, &boxes_bottom_first);

    let mut objects = boxes_bottom_first.clone();
    objects.sort_by_key(|o| o.id);
    let z_of = |id: u32| ids.iter().position(|&x| x == id).unwrap();

    let mut grasps = Vec::with_capacity(2 * n);
    for o in &objects {
        for rect in block_grasps(o) {
            grasps.push(OwnedGrasp { owner: o.id, rect });
        }
    }

    let mut relations = Vec::new();
    for (i, a) in objects.iter().enumerate() {
        for b in &objects[i + 1..] {
            let kind = if overlap_ratio(a, b) > STACK_OVERLAP_THRESHOLD {
                if z_of(a.id) > z_of(b.id) {
                    RelationKind::On
                } else {
                    RelationKind::Under
                }
            } else {
                RelationKind::NoRel
            };
            relations.push(Relation::new(a.id, b.id, kind));
        }
    }

    let scene = SceneAnnotation {
        image: ImageRef::Embedded(image.clone()),
        width: cfg.image_size,
        height: cfg.image_size,
        objects,
        grasps,
        relations,
    };
    Ok((image, scene))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{build_graph, detect_cycles};
    use crate::scene::validate_scene;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            seed: 42,
            ..Default::default()
        };
        let (a_img, a) = synth_generate(&cfg).unwrap();
        let (b_img, b) = synth_generate(&cfg).unwrap();
        assert_eq!(a_img, b_img);
        assert_eq!(a, b);
    }

    #[test]
    fn generated_scenes_are_valid_and_acyclic() {
        for seed in 0..200 {
            let cfg = SynthConfig {
                seed,
                ..Default::default()
            };
            let (_, s) = synth_generate(&cfg).unwrap();
            assert!(validate_scene(&s).is_empty(), "seed {seed}: {:?}", validate_scene(&s));
            assert!((2..=5).contains(&s.objects.len()));
            let g = build_graph(&s.objects, &s.relations).unwrap();
            assert!(detect_cycles(&g).is_empty());
            let mut cls: Vec<_> = s.objects.iter().map(|o| o.cls).collect();
            cls.sort_unstable();
            cls.dedup();
            assert_eq!(cls.len(), s.objects.len(), "classes distinct within a scene");
        }
    }

    #[test]
    fn disjoint_policy_gives_no_relations() {
        for seed in 0..20 {
            let cfg = SynthConfig {
                seed,
                min_objects: 2,
                max_objects: 2,
                policy: OverlapPolicy::Disjoint,
                ..Default::default()
            };
            let (_, s) = synth_generate(&cfg).unwrap();
            assert!(s.relations.iter().all(|r| r.kind == RelationKind::NoRel));
        }
    }

    #[test]
    fn chain_of_three_is_a_path() {
        for seed in 0..20 {
            let cfg = SynthConfig {
                seed,
                min_objects: 3,
                max_objects: 3,
                policy: OverlapPolicy::Chain,
                ..Default::default()
            };
            let (_, s) = synth_generate(&cfg).unwrap();
            let g = build_graph(&s.objects, &s.relations).unwrap();
            assert_eq!(g.edges().len(), 2);
            // Path: one source, one sink, and a middle node with in = out = 1.
            let indeg = |n: u32| g.edges().iter().filter(|e| e.1 == n).count();
            let outdeg = |n: u32| g.edges().iter().filter(|e| e.0 == n).count();
            let mut profile: Vec<_> = (0..3).map(|n| (indeg(n), outdeg(n))).collect();
            profile.sort();
            assert_eq!(profile, vec![(0, 1), (1, 0), (1, 1)]);
        }
    }

    #[test]
    fn pixels_show_top_block_over_bottom() {
        let cfg = SynthConfig {
            seed: 3,
            min_objects: 2,
            max_objects: 2,
            policy: OverlapPolicy::Chain,
            ..Default::default()
        };
        let (img, s) = synth_generate(&cfg).unwrap();
        let top = s
            .relations
            .iter()
            .map(|r| if r.kind == RelationKind::On { r.from_id } else { r.to_id })
            .next()
            .unwrap();
        let t = s.object(top).unwrap();
        let (cx, cy) = t.center();
        assert_eq!(img.get(cx as u32, cy as u32), PALETTE[t.cls as usize]);
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = SynthConfig {
            max_objects: 6,
            ..Default::default()
        };
        assert!(matches!(synth_generate(&cfg), Err(DataError::Config(_))));
    }

    #[test]
    fn impossible_placement_exhausts_retries() {
        let cfg = SynthConfig {
            min_objects: 5,
            max_objects: 5,
            image_size: 40,
            min_side: 34,
            max_side: 36,
            policy: OverlapPolicy::Disjoint,
            ..Default::default()
        };
        assert!(matches!(synth_generate(&cfg), Err(DataError::RetryExhausted { .. })));
    }
}
