//! Per-scene targets and the composite loss `L_O + alpha L_G + beta L_R`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackgrasp_core::{box_intersection, ObjectBox, RelationKind, SceneAnnotation};
use stackgrasp_tensor::{Scalar, Tensor, TensorError, Var};

use crate::config::ModelConfig;
use crate::model::{relation_scale, Graph};
use crate::targets::{assign_grasp_targets, detector_targets, DetTargets, GraspTargets};
use crate::NetError;

type R<T> = Result<T, TensorError>;

/// Everything the losses need from one annotated scene.
#[derive(Debug, Clone)]
pub struct SceneTargets {
    pub det: DetTargets,
    pub grasp: GraspTargets,
    /// Ordered ground-truth box pairs fed to the relation head.
    pub pairs: Vec<(ObjectBox, ObjectBox)>,
    /// Relation label index per pair.
    pub labels: Vec<usize>,
}

/// Rejects scenes the heads cannot represent.
pub fn check_scene(cfg: &ModelConfig, scene: &SceneAnnotation) -> Result<(), NetError> {
    if (scene.height as usize, scene.width as usize) != cfg.input_hw {
        return Err(NetError::Data(format!(
            "scene is {}x{} but the model expects {}x{}",
            scene.height, scene.width, cfg.input_hw.0, cfg.input_hw.1
        )));
    }
    let problems = stackgrasp_core::validate_scene(scene);
    if let Some(p) = problems.first() {
        return Err(NetError::Data(p.clone()));
    }
    let bad = scene
        .objects
        .iter()
        .map(|o| o.cls)
        .chain(scene.grasps.iter().map(|g| g.rect.cls))
        .find(|&c| c as usize >= cfg.n_classes);
    if let Some(c) = bad {
        return Err(NetError::Data(format!("class {c} outside 0..{}", cfg.n_classes)));
    }
    Ok(())
}

/// Ordered relation-training pairs with labels. With `jitter_seed` every
/// box edge moves by up to `box_jitter` pixels first. Pairs whose boxes do
/// not overlap are left out when short-circuiting, since the head never sees
/// them at inference either.
pub fn relation_pairs(
    cfg: &ModelConfig,
    scene: &SceneAnnotation,
    jitter_seed: Option<u64>,
) -> (Vec<(ObjectBox, ObjectBox)>, Vec<usize>) {
    let mut boxes = scene.objects.clone();
    if let Some(seed) = jitter_seed.filter(|_| cfg.box_jitter > 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = cfg.box_jitter;
        for b in &mut boxes {
            let mut d = [0.0; 4];
            d.iter_mut().for_each(|v| *v = rng.gen_range(-j..=j));
            let (x1, y1, x2, y2) = (b.x1 + d[0], b.y1 + d[1], b.x2 + d[2], b.y2 + d[3]);
            // keep at least a pixel of extent
            if x2 - x1 >= 1.0 && y2 - y1 >= 1.0 {
                (b.x1, b.y1, b.x2, b.y2) = (x1, y1, x2, y2);
            }
        }
    }
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for a in &boxes {
        for b in &boxes {
            if a.id == b.id || (cfg.short_circuit && box_intersection(a, b).is_none()) {
                continue;
            }
            pairs.push((*a, *b));
            labels.push(scene.relation_between(a.id, b.id).unwrap_or(RelationKind::NoRel).index());
        }
    }
    (pairs, labels)
}

/// Targets with unjittered relation pairs.
pub fn scene_targets(cfg: &ModelConfig, scene: &SceneAnnotation) -> Result<SceneTargets, NetError> {
    check_scene(cfg, scene)?;
    let (pairs, labels) = relation_pairs(cfg, scene, None);
    Ok(SceneTargets {
        det: detector_targets(cfg, scene),
        grasp: assign_grasp_targets(cfg, scene),
        pairs,
        labels,
    })
}

/// The three loss terms of one scene as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_o: Var,
    pub l_g: Var,
    pub l_r: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub l_o: f64,
    pub l_g: f64,
    pub l_r: f64,
    pub total: f64,
}

impl LossValues {
    pub fn new(cfg: &ModelConfig, l_o: f64, l_g: f64, l_r: f64) -> Self {
        Self {
            l_o,
            l_g,
            l_r,
            total: l_o + cfg.alpha * l_g + cfg.beta * l_r,
        }
    }
}

fn tensor<T: Scalar>(shape: &[usize], data: &[f64]) -> Tensor<T> {
    Tensor::from_f64(shape, data).expect("target shape")
}

impl<T: Scalar> Graph<'_, T> {
    /// Backbone plus aggregation on a `(1, 3, H, W)` image.
    pub fn features(&mut self, image: Var) -> R<[Var; 3]> {
        let maps = self.backbone(image)?;
        self.msfa(maps)
    }

    /// Cross-entropy over all cells divided by the positive count, plus
    /// smooth L1 over positive offsets.
    pub fn detection_loss(&mut self, mid: Var, t: &DetTargets) -> R<Var> {
        let c = self.cfg.n_classes;
        let out = self.detector(mid)?;
        let cl = self.tape.channels_last(out)?;
        let cells = self.tape.shape(cl)[0];
        let logits = self.tape.slice(cl, 1, 0, c + 1)?;
        let ce = self.tape.cross_entropy(&tensor(&[cells, c + 1], &t.cls), logits)?;
        let ce = self.tape.scale(ce, 1.0 / t.pos.len().max(1) as f64);
        if t.pos.is_empty() {
            return Ok(ce);
        }
        let idx = t
            .pos
            .iter()
            .flat_map(|&p| (0..4).map(move |j| (p * (c + 5) + c + 1 + j) as u32))
            .collect();
        let reg = self.tape.gather(cl, vec![t.pos.len(), 4], idx)?;
        let sl = self.tape.smooth_l1(&tensor(&[t.pos.len(), 4], &t.reg), reg)?;
        self.tape.add(ce, sl)
    }

    /// Binary cross-entropy on logits: full target rows at positives,
    /// confidence 0 at every other anchor.
    pub fn grasp_loss(&mut self, mid: Var, t: &GraspTargets) -> R<Var> {
        let k = self.cfg.grasp_channels();
        let out = self.grasp_head(mid)?;
        let cl = self.tape.channels_last(out)?;
        let rows = self.tape.value(cl).len() / k;
        let mut is_pos = vec![false; rows];
        for &p in &t.pos {
            is_pos[p] = true;
        }
        let neg: Vec<u32> = (0..rows).filter(|&r| !is_pos[r]).map(|r| (r * k + 4) as u32).collect();
        let n_neg = neg.len();
        let zn = self.tape.gather(cl, vec![n_neg], neg)?;
        let mut loss = self.tape.bce_logits(&Tensor::zeros(&[n_neg]), zn, false)?;
        if !t.pos.is_empty() {
            let idx = t.pos.iter().flat_map(|&p| (0..k).map(move |j| (p * k + j) as u32)).collect();
            let zp = self.tape.gather(cl, vec![t.pos.len(), k], idx)?;
            let lp = self.tape.bce_logits(&tensor(&[t.pos.len(), k], &t.rows), zp, false)?;
            loss = self.tape.add(loss, lp)?;
        }
        if self.cfg.bce_mean {
            loss = self.tape.scale(loss, 1.0 / (n_neg + t.pos.len() * k) as f64);
        }
        Ok(loss)
    }

    /// Summed negative log-likelihood of the labelled relation per pair.
    pub fn relation_loss(&mut self, map: Var, t: &SceneTargets) -> R<Var> {
        if t.pairs.is_empty() {
            return Ok(self.tape.constant(Tensor::scalar(T::zero())));
        }
        let stride = self.cfg.scale_strides[relation_scale(self.cfg)] as f64;
        let probs = self.relation(map, stride, &t.pairs)?;
        self.tape.nll_relation(probs, &t.labels)
    }

    /// All three loss terms from fused maps.
    pub fn losses(&mut self, fused: [Var; 3], t: &SceneTargets) -> R<LossVars> {
        Ok(LossVars {
            l_o: self.detection_loss(fused[1], &t.det)?,
            l_g: self.grasp_loss(fused[1], &t.grasp)?,
            l_r: self.relation_loss(fused[relation_scale(self.cfg)], t)?,
        })
    }

    /// `w_o L_O + w_g L_G + w_r L_R`.
    pub fn weighted(&mut self, l: &LossVars, w: [f64; 3]) -> R<Var> {
        let terms = [(l.l_o, w[0]), (l.l_g, w[1]), (l.l_r, w[2])];
        let scaled: Vec<Var> = terms
            .iter()
            .filter(|(_, c)| *c != 0.0)
            .map(|&(v, c)| if c == 1.0 { v } else { self.tape.scale(v, c) })
            .collect();
        match scaled.as_slice() {
            [] => Ok(self.tape.constant(Tensor::scalar(T::zero()))),
            [one] => Ok(*one),
            many => self.tape.add_all(many),
        }
    }

    /// `L_O + alpha L_G + beta L_R`.
    pub fn total_loss(&mut self, l: &LossVars) -> R<Var> {
        let w = [1.0, self.cfg.alpha, self.cfg.beta];
        self.weighted(l, w)
    }

    pub fn values(&self, l: &LossVars) -> LossValues {
        let v = |x: Var| self.tape.value(x).item().f64();
        LossValues::new(self.cfg, v(l.l_o), v(l.l_g), v(l.l_r))
    }
}
