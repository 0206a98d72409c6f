//! Online augmentation: horizontal flip, isotropic scaling with center
//! crop/pad, and HSV color jitter.
//!
//! Labels go through exactly the same affine map as the pixels:
//! `x' = s·(flip ? W − x : x) + (out_w − s·W)/2`, `y' = s·y + (out_h − s·H)/2`,
//! and a flip negates grasp angles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene::{normalize_angle_deg, ImageRef, ObjectBox, OwnedGrasp, RgbImage, SceneAnnotation};

pub const PAD_VALUE: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    pub hue_shift_deg: f64,
    pub sat_factor: f64,
    pub val_factor: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        scale: 1.0,
        hue_shift_deg: 0.0,
        sat_factor: 1.0,
        val_factor: 1.0,
    };

    /// Draws flip (p = 0.5), scale in [0.8, 1.25], hue ±10°, saturation and value ×[0.8, 1.2].
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            flip: rng.gen_bool(0.5),
            scale: rng.gen_range(0.8..=1.25),
            hue_shift_deg: rng.gen_range(-10.0..=10.0),
            sat_factor: rng.gen_range(0.8..=1.2),
            val_factor: rng.gen_range(0.8..=1.2),
        }
    }

    fn has_color_jitter(&self) -> bool {
        self.hue_shift_deg != 0.0 || self.sat_factor != 1.0 || self.val_factor != 1.0
    }
}

/// Affine map shared by pixels and labels.
#[derive(Debug, Clone, Copy)]
pub struct LabelTransform {
    flip: bool,
    scale: f64,
    src_w: f64,
    off_x: f64,
    off_y: f64,
}

impl LabelTransform {
    pub fn new(params: &AugmentParams, src: (u32, u32), out: (u32, u32)) -> Self {
        let s = params.scale;
        Self {
            flip: params.flip,
            scale: s,
            src_w: src.0 as f64,
            off_x: (out.0 as f64 - s * src.0 as f64) / 2.0,
            off_y: (out.1 as f64 - s * src.1 as f64) / 2.0,
        }
    }

    pub fn point(&self, x: f64, y: f64) -> (f64, f64) {
        let x = if self.flip { self.src_w - x } else { x };
        (self.scale * x + self.off_x, self.scale * y + self.off_y)
    }

    /// Inverse of [`LabelTransform::point`].
    pub fn source_point(&self, x: f64, y: f64) -> (f64, f64) {
        let sx = (x - self.off_x) / self.scale;
        let sy = (y - self.off_y) / self.scale;
        (if self.flip { self.src_w - sx } else { sx }, sy)
    }

    pub fn grasp(&self, g: &crate::scene::GraspRect) -> crate::scene::GraspRect {
        let (cx, cy) = self.point(g.cx, g.cy);
        crate::scene::GraspRect {
            cx,
            cy,
            w: g.w * self.scale,
            h: g.h * self.scale,
            theta_deg: if self.flip {
                normalize_angle_deg(-g.theta_deg)
            } else {
                g.theta_deg
            },
            ..*g
        }
    }

    pub fn object_box(&self, b: &ObjectBox) -> ObjectBox {
        let (ax, ay) = self.point(b.x1, b.y1);
        let (bx, by) = self.point(b.x2, b.y2);
        ObjectBox {
            x1: ax.min(bx),
            y1: ay.min(by),
            x2: ax.max(bx),
            y2: ay.max(by),
            ..*b
        }
    }
}

fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> [u8; 3] {
    // Pixel i covers [i, i + 1); its center is at i + 0.5.
    let fx = x - 0.5;
    let fy = y - 0.5;
    if fx < -0.5 || fy < -0.5 || fx > img.width as f64 - 0.5 || fy > img.height as f64 - 0.5 {
        return PAD_VALUE;
    }
    let x0 = fx.floor().clamp(0.0, (img.width - 1) as f64);
    let y0 = fy.floor().clamp(0.0, (img.height - 1) as f64);
    let x1 = (x0 + 1.0).min((img.width - 1) as f64);
    let y1 = (y0 + 1.0).min((img.height - 1) as f64);
    let tx = (fx - x0).clamp(0.0, 1.0);
    let ty = (fy - y0).clamp(0.0, 1.0);
    let p00 = img.get(x0 as u32, y0 as u32);
    let p10 = img.get(x1 as u32, y0 as u32);
    let p01 = img.get(x0 as u32, y1 as u32);
    let p11 = img.get(x1 as u32, y1 as u32);
    let mut out = [0u8; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
        let bot = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
        out[c] = (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8;
    }
    out
}

pub fn rgb_to_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

fn jitter(img: &mut RgbImage, p: &AugmentParams) {
    for px in img.data.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
        let out = hsv_to_rgb(
            h + p.hue_shift_deg,
            (s * p.sat_factor).clamp(0.0, 1.0),
            (v * p.val_factor).clamp(0.0, 1.0),
        );
        px.copy_from_slice(&out);
    }
}

/// Applies `params` to labels and pixels, producing an `out_w × out_h` sample.
///
/// Boxes are clipped to the output frame. Objects that leave the frame are
/// dropped together with their grasps and relations, and so are grasps whose
/// center leaves the frame.
pub fn apply_augment(
    scene: &SceneAnnotation,
    image: &RgbImage,
    params: &AugmentParams,
    out: (u32, u32),
) -> (SceneAnnotation, RgbImage) {
    let t = LabelTransform::new(params, (scene.width, scene.height), out);
    let (ow, oh) = (out.0 as f64, out.1 as f64);

    let mut objects = Vec::with_capacity(scene.objects.len());
    for o in &scene.objects {
        let mut b = t.object_box(o);
        b.x1 = b.x1.clamp(0.0, ow);
        b.x2 = b.x2.clamp(0.0, ow);
        b.y1 = b.y1.clamp(0.0, oh);
        b.y2 = b.y2.clamp(0.0, oh);
        if b.x2 - b.x1 >= 1.0 && b.y2 - b.y1 >= 1.0 {
            objects.push(b);
        }
    }
    let kept = |id: u32| objects.iter().any(|o| o.id == id);
    let grasps: Vec<OwnedGrasp> = scene
        .grasps
        .iter()
        .filter(|g| kept(g.owner))
        .map(|g| OwnedGrasp {
            owner: g.owner,
            rect: t.grasp(&g.rect),
        })
        .filter(|g| (0.0..=ow).contains(&g.rect.cx) && (0.0..=oh).contains(&g.rect.cy))
        .collect();
    let relations = scene
        .relations
        .iter()
        .filter(|r| kept(r.from_id) && kept(r.to_id))
        .copied()
        .collect();

    let mut img = RgbImage::new(out.0, out.1);
    for v in 0..out.1 {
        for u in 0..out.0 {
            let (sx, sy) = t.source_point(u as f64 + 0.5, v as f64 + 0.5);
            img.put(u, v, sample_bilinear(image, sx, sy));
        }
    }
    if params.has_color_jitter() {
        jitter(&mut img, params);
    }

    let new_scene = SceneAnnotation {
        image: ImageRef::Embedded(img.clone()),
        width: out.0,
        height: out.1,
        objects,
        grasps,
        relations,
    };
    (new_scene, img)
}

/// Seeded online augmentation.
pub fn augment(scene: &SceneAnnotation, image: &RgbImage, seed: u64, out: (u32, u32)) -> (SceneAnnotation, RgbImage) {
    apply_augment(scene, image, &AugmentParams::sample(seed), out)
}

/// Test-time preprocessing: plain resize to the network input.
pub fn resize_only(scene: &SceneAnnotation, image: &RgbImage, out: (u32, u32)) -> (SceneAnnotation, RgbImage) {
    if (scene.width, scene.height) == out {
        return apply_augment(scene, image, &AugmentParams::IDENTITY, out);
    }
    // Anisotropic resize is a scale per axis; do it directly rather than via the crop path.
    let sx = out.0 as f64 / scene.width as f64;
    let sy = out.1 as f64 / scene.height as f64;
    let mut s = scene.clone();
    for o in &mut s.objects {
        o.x1 *= sx;
        o.x2 *= sx;
        o.y1 *= sy;
        o.y2 *= sy;
    }
    for g in &mut s.grasps {
        let r = &mut g.rect;
        r.cx *= sx;
        r.cy *= sy;
        let (sn, cs) = r.theta_deg.to_radians().sin_cos();
        let dir = (cs * sx, sn * sy);
        let normal = (-sn * sx, cs * sy);
        r.w *= (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
        r.h *= (normal.0 * normal.0 + normal.1 * normal.1).sqrt();
        r.theta_deg = normalize_angle_deg(dir.1.atan2(dir.0).to_degrees());
    }
    s.width = out.0;
    s.height = out.1;
    let mut img = RgbImage::new(out.0, out.1);
    for v in 0..out.1 {
        for u in 0..out.0 {
            let px = (u as f64 + 0.5) / sx;
            let py = (v as f64 + 0.5) / sy;
            img.put(u, v, sample_bilinear(image, px, py));
        }
    }
    s.image = ImageRef::Embedded(img.clone());
    (s, img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::jaccard_rotated;
    use crate::synth::{synth_generate, SynthConfig};

    fn sample() -> (SceneAnnotation, RgbImage) {
        let (img, s) = synth_generate(&SynthConfig {
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        (s, img)
    }

    #[test]
    fn identity_params_change_nothing() {
        let (s, img) = sample();
        let (s2, img2) = apply_augment(&s, &img, &AugmentParams::IDENTITY, (96, 96));
        assert_eq!(img2, img);
        assert_eq!(s2.objects, s.objects);
        assert_eq!(s2.grasps, s.grasps);
        assert_eq!(s2.relations, s.relations);
    }

    #[test]
    fn flip_negates_angle_and_is_an_involution() {
        let (s, img) = sample();
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let (once, img1) = apply_augment(&s, &img, &flip, (96, 96));
        let g = s.grasps.iter().find(|g| g.rect.theta_deg == 0.0).unwrap();
        let t = LabelTransform::new(&flip, (96, 96), (96, 96));
        let thirty = crate::scene::GraspRect {
            theta_deg: 30.0,
            ..g.rect
        };
        assert_eq!(t.grasp(&thirty).theta_deg, -30.0);
        let (twice, img2) = apply_augment(&once, &img1, &flip, (96, 96));
        assert_eq!(img2, img);
        for (a, b) in twice.objects.iter().zip(&s.objects) {
            assert!((a.x1 - b.x1).abs() < 1e-6 && (a.x2 - b.x2).abs() < 1e-6);
            assert!((a.y1 - b.y1).abs() < 1e-6 && (a.y2 - b.y2).abs() < 1e-6);
        }
        for (a, b) in twice.grasps.iter().zip(&s.grasps) {
            assert!((a.rect.cx - b.rect.cx).abs() < 1e-6);
            assert!((a.rect.theta_deg - b.rect.theta_deg).abs() < 1e-6);
        }
        assert_eq!(twice.relations, s.relations);
    }

    #[test]
    fn labels_follow_pixels_geometrically() {
        // Transforming a grasp equals transforming its polygon corners.
        let (s, _) = sample();
        for seed in 0..50 {
            let p = AugmentParams::sample(seed);
            let t = LabelTransform::new(&p, (96, 96), (96, 96));
            for g in &s.grasps {
                let moved = t.grasp(&g.rect);
                let corners = crate::geometry::rect_to_polygon(&g.rect);
                let mapped: Vec<_> = corners.vertices().iter().map(|&(x, y)| t.point(x, y)).collect();
                let cx = mapped.iter().map(|p| p.0).sum::<f64>() / 4.0;
                let cy = mapped.iter().map(|p| p.1).sum::<f64>() / 4.0;
                let e = (mapped[1].0 - mapped[0].0, mapped[1].1 - mapped[0].1);
                let f = (mapped[2].0 - mapped[1].0, mapped[2].1 - mapped[1].1);
                let rebuilt = crate::scene::GraspRect::new(
                    cx,
                    cy,
                    e.0.hypot(e.1),
                    f.0.hypot(f.1),
                    e.1.atan2(e.0).to_degrees(),
                    g.rect.cls,
                );
                assert!((jaccard_rotated(&moved, &rebuilt) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sampled_params_stay_in_range() {
        for seed in 0..200 {
            let p = AugmentParams::sample(seed);
            assert!((0.8..=1.25).contains(&p.scale));
            assert!(p.hue_shift_deg.abs() <= 10.0);
            assert!((0.8..=1.2).contains(&p.sat_factor) && (0.8..=1.2).contains(&p.val_factor));
        }
        assert_eq!(AugmentParams::sample(5), AugmentParams::sample(5));
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [[220, 40, 40], [40, 180, 60], [128, 128, 128], [0, 0, 0], [250, 140, 20]] {
            let (h, s, v) = rgb_to_hsv(rgb);
            assert_eq!(hsv_to_rgb(h, s, v), rgb);
        }
    }

    #[test]
    fn upscaling_drops_objects_that_leave_the_frame() {
        let (s, img) = sample();
        let p = AugmentParams {
            scale: 1.25,
            ..AugmentParams::IDENTITY
        };
        let (a, _) = apply_augment(&s, &img, &p, (96, 96));
        for o in &a.objects {
            assert!(o.x1 >= 0.0 && o.x2 <= 96.0 && o.y1 >= 0.0 && o.y2 <= 96.0);
        }
        assert!(crate::scene::validate_scene(&a).is_empty());
    }

    #[test]
    fn resize_only_scales_labels() {
        let (s, img) = sample();
        let (r, rimg) = resize_only(&s, &img, (48, 48));
        assert_eq!((rimg.width, rimg.height), (48, 48));
        assert!((r.objects[0].x1 - s.objects[0].x1 * 0.5).abs() < 1e-12);
        assert!((r.grasps[0].rect.w - s.grasps[0].rect.w * 0.5).abs() < 1e-9);
    }
}
