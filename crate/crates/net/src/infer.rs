//! Inference: detections, grasps, pairwise relations and the clearing order.

use stackgrasp_core::metrics::ScenePrediction;
use stackgrasp_core::planner::TreeDocument;
use stackgrasp_core::{
    box_intersection, build_graph, full_clearing_order, symmetrize_pair, GraspRect, ImageRef, ObjectBox, ObjectId,
    OwnedGrasp, PairPrediction, PlanError, Relation, RelationGraph, RgbImage, SceneAnnotation,
};
use stackgrasp_tensor::{ParamStore, Tape};

use crate::config::ModelConfig;
use crate::model::{image_tensor, relation_scale, Graph};
use crate::targets::{decode_detections, decode_grasps};
use crate::NetError;

/// Exact output for a pair whose boxes do not overlap.
pub const NO_RELATION: [f64; 3] = [0.0, 0.0, 1.0];

/// Network outputs for one image, before planning.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub objects: Vec<ObjectBox>,
    /// Decoded grasps above the confidence threshold, plus the best candidate
    /// of each detected object that has none, by descending confidence.
    pub grasps: Vec<GraspRect>,
    /// Grasps matched to a detected object of the same class containing their center.
    pub owned: Vec<OwnedGrasp>,
    pub pairs: Vec<PairPrediction>,
    pub relations: Vec<Relation>,
}

impl Prediction {
    pub fn for_metrics(&self) -> ScenePrediction {
        ScenePrediction {
            objects: self.objects.clone(),
            grasps: self.grasps.clone(),
            relations: self.relations.clone(),
        }
    }

    /// The prediction in scene-file form.
    pub fn to_scene(&self, image: ImageRef, width: u32, height: u32) -> SceneAnnotation {
        SceneAnnotation {
            image,
            width,
            height,
            objects: self.objects.clone(),
            grasps: self.owned.clone(),
            relations: self.relations.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub prediction: Prediction,
    pub graph: RelationGraph,
    pub order: Vec<ObjectId>,
}

impl Inference {
    pub fn tree(&self) -> TreeDocument {
        TreeDocument::new(&self.graph, self.order.clone())
    }
}

/// Highest-scoring detection of the grasp's class that contains its center.
fn owner_of(objects: &[ObjectBox], g: &GraspRect) -> Option<ObjectId> {
    objects
        .iter()
        .filter(|o| o.cls == g.cls && o.contains_point(g.cx, g.cy))
        .max_by(|a, b| a.score.total_cmp(&b.score).then(b.id.cmp(&a.id)))
        .map(|o| o.id)
}

/// Candidates at or above `thresh`, plus the best candidate of any detected
/// object left without one so every object gets a top-1 grasp.
/// `candidates` must be sorted by descending confidence.
fn with_object_fallback(candidates: &[GraspRect], objects: &[ObjectBox], thresh: f64) -> Vec<GraspRect> {
    let split = candidates.partition_point(|g| g.confidence >= thresh);
    let mut out = candidates[..split].to_vec();
    for o in objects {
        let covered = out.iter().any(|g| owner_of(objects, g) == Some(o.id));
        if covered {
            continue;
        }
        let best = candidates[split..].iter().find(|g| owner_of(objects, g) == Some(o.id));
        out.extend(best);
    }
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out
}

/// Relation distributions for both orders of every detected pair.
pub fn relation_pairs(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    map: &stackgrasp_tensor::Tensor<f32>,
    objects: &[ObjectBox],
) -> Result<Vec<PairPrediction>, NetError> {
    let mut sorted = objects.to_vec();
    sorted.sort_by_key(|o| o.id);
    let mut pairs = Vec::new();
    let mut queries = Vec::new();
    for (k, a) in sorted.iter().enumerate() {
        for b in &sorted[k + 1..] {
            pairs.push(PairPrediction {
                pair: (a.id, b.id),
                probs_ij: NO_RELATION,
                probs_ji: NO_RELATION,
            });
            if !(cfg.short_circuit && box_intersection(a, b).is_none()) {
                queries.push((pairs.len() - 1, *a, *b));
            }
        }
    }
    if queries.is_empty() {
        return Ok(pairs);
    }
    let mut g = Graph::new(cfg, params, Tape::new());
    let m = g.tape.constant(map.clone());
    let boxes: Vec<_> = queries.iter().flat_map(|&(_, a, b)| [(a, b), (b, a)]).collect();
    let stride = cfg.scale_strides[relation_scale(cfg)] as f64;
    let probs = g.relation(m, stride, &boxes)?;
    let p = g.tape.data(probs);
    let row = |r: usize| [p[3 * r] as f64, p[3 * r + 1] as f64, p[3 * r + 2] as f64];
    for (q, &(k, _, _)) in queries.iter().enumerate() {
        pairs[k].probs_ij = row(2 * q);
        pairs[k].probs_ji = row(2 * q + 1);
    }
    Ok(pairs)
}

/// Runs every head on an image of the configured input size.
pub fn predict(cfg: &ModelConfig, params: &ParamStore<f32>, image: &RgbImage) -> Result<Prediction, NetError> {
    if (image.height as usize, image.width as usize) != cfg.input_hw {
        return Err(NetError::Data(format!(
            "image is {}x{} but the model expects {}x{}",
            image.height, image.width, cfg.input_hw.0, cfg.input_hw.1
        )));
    }
    let mut g = Graph::new(cfg, params, Tape::new());
    let x = g.tape.constant(image_tensor(image));
    let fused = g.features(x)?;
    let det = g.detector(fused[1])?;
    let det = g.tape.channels_last(det)?;
    let gr = g.grasp_head(fused[1])?;
    let gr = g.tape.channels_last(gr)?;
    let as64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let objects = decode_detections(cfg, &as64(g.tape.data(det)));
    let candidates = decode_grasps(cfg, &as64(g.tape.data(gr)), 0.0);
    let grasps = with_object_fallback(&candidates, &objects, cfg.grasp_threshold);
    let owned = grasps
        .iter()
        .filter_map(|r| owner_of(&objects, r).map(|owner| OwnedGrasp { owner, rect: *r }))
        .collect();
    let map = g.tape.value(fused[relation_scale(cfg)]).clone();
    drop(g);
    let pairs = relation_pairs(cfg, params, &map, &objects)?;
    let relations = pairs.iter().map(symmetrize_pair).collect();
    Ok(Prediction {
        objects,
        grasps,
        owned,
        pairs,
        relations,
    })
}

/// Prediction plus the manipulation graph and a full clearing order.
/// Contradictory or cyclic relations are reported as errors.
pub fn infer_scene(cfg: &ModelConfig, params: &ParamStore<f32>, image: &RgbImage) -> Result<Inference, NetError> {
    let prediction = predict(cfg, params, image)?;
    let graph = build_graph(&prediction.objects, &prediction.relations)?;
    let order = full_clearing_order(&graph)?;
    Ok(Inference {
        prediction,
        graph,
        order,
    })
}

/// Like [`infer_scene`] but keeps the prediction when planning fails.
pub fn infer_scene_lenient(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    image: &RgbImage,
) -> Result<(Prediction, Result<(RelationGraph, Vec<ObjectId>), PlanError>), NetError> {
    let prediction = predict(cfg, params, image)?;
    let plan = build_graph(&prediction.objects, &prediction.relations)
        .and_then(|g| full_clearing_order(&g).map(|o| (g, o)));
    Ok((prediction, plan))
}
