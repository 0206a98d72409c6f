//! Two-stage training: feature extractor and detector first, then the grasp
//! and relation heads on frozen features.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use stackgrasp_core::augment::{augment, resize_only};
use stackgrasp_core::{RgbImage, SceneAnnotation};
use stackgrasp_tensor::{lr_at, sgd_step, Adam, ParamStore, Tape, Tensor};

use crate::config::{ModelConfig, Optimizer};
use crate::loss::{relation_pairs, scene_targets, LossValues, SceneTargets};
use crate::model::{image_tensor, init_params, Graph, BACKBONE, DETECTOR, GRASP, MSFA, RELATION};
use crate::NetError;

/// A scene with its pixels, already at the network input size.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: SceneAnnotation,
    pub image: RgbImage,
}

impl Sample {
    /// Resizes to the network input when needed and checks the labels.
    pub fn prepare(cfg: &ModelConfig, scene: &SceneAnnotation, image: &RgbImage) -> Result<Self, NetError> {
        let out = (cfg.input_hw.1 as u32, cfg.input_hw.0 as u32);
        let (scene, image) = if (scene.width, scene.height) == out && (image.width, image.height) == out {
            (scene.clone(), image.clone())
        } else {
            resize_only(scene, image, out)
        };
        scene_targets(cfg, &scene)?;
        Ok(Self { scene, image })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Backbone, aggregation and detector on `L_O`.
    One,
    /// Grasp and relation heads on `alpha L_G + beta L_R`.
    Two,
}

impl Stage {
    fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::One => &[BACKBONE, MSFA, DETECTOR],
            Stage::Two => &[GRASP, RELATION],
        }
    }

    fn weights(self, cfg: &ModelConfig) -> [f64; 3] {
        match self {
            Stage::One => [1.0, 0.0, 0.0],
            Stage::Two => [0.0, cfg.alpha, cfg.beta],
        }
    }
}

/// Marks exactly the parameters `stage` updates as trainable.
pub fn freeze_for(store: &mut ParamStore<f32>, stage: Stage) {
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        let on = stage.trainable_prefixes().iter().any(|p| n.starts_with(p));
        store.set_trainable(&n, on);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossValues,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iteration,lr,L_O,L_G,L_R,total";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let l = &r.loss;
            writeln!(s, "{},{},{},{},{},{}", r.iteration, r.lr, l.l_o, l.l_g, l.l_r, l.total).unwrap();
        }
        s
    }

    pub fn first(&self) -> Option<&LossValues> {
        self.rows.first().map(|r| &r.loss)
    }

    pub fn last(&self) -> Option<&LossValues> {
        self.rows.last().map(|r| &r.loss)
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix-style mixing so nearby iterations get unrelated streams
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample indices of one batch: a fresh seeded permutation per epoch.
fn batch_indices(n: usize, batch: usize, iteration: usize, seed: u64, perms: &mut Vec<Vec<usize>>) -> Vec<usize> {
    (0..batch)
        .map(|j| {
            let pos = iteration * batch + j;
            let epoch = pos / n;
            while perms.len() <= epoch {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, perms.len() as u64, 1)));
                perms.push(p);
            }
            perms[epoch][pos % n]
        })
        .collect()
}

/// Fused maps of `image` with no gradient tracking.
pub fn extract_features(cfg: &ModelConfig, params: &ParamStore<f32>, image: &RgbImage) -> Result<[Tensor<f32>; 3], NetError> {
    let mut g = Graph::new(cfg, params, Tape::new());
    let x = g.tape.constant(image_tensor(image));
    let maps = g.features(x)?;
    Ok(maps.map(|m| g.tape.value(m).clone()))
}

enum Input<'a> {
    Image(&'a RgbImage),
    Cached(&'a [Tensor<f32>; 3]),
}

/// Loss and parameter gradients of one scene.
fn scene_step(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    input: Input<'_>,
    targets: &SceneTargets,
    stage: Stage,
) -> Result<(LossValues, Vec<(String, Vec<f32>)>), NetError> {
    let mut g = Graph::new(cfg, params, Tape::new());
    let fused = match input {
        Input::Image(img) => {
            let x = g.tape.constant(image_tensor(img));
            g.features(x)?
        }
        Input::Cached(maps) => maps.clone().map(|m| g.tape.constant(m)),
    };
    let l = g.losses(fused, targets)?;
    let objective = g.weighted(&l, stage.weights(cfg))?;
    if g.tape.requires_grad(objective) {
        g.tape.backward(objective)?;
    }
    Ok((g.values(&l), g.tape.param_grads()))
}

/// Runs `cfg.iterations` updates of `stage` on `params`, calling `progress`
/// after every logged row.
pub fn train_stage(
    cfg: &ModelConfig,
    params: &mut ParamStore<f32>,
    data: &[Sample],
    stage: Stage,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainLog, NetError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NetError::Data("training set is empty".into()));
    }
    freeze_for(params, stage);
    let fixed: Vec<SceneTargets> = if cfg.augment {
        Vec::new()
    } else {
        data.iter().map(|s| scene_targets(cfg, &s.scene)).collect::<Result<_, _>>()?
    };
    // Stage two never changes the feature extractor, so without augmentation
    // the fused maps are computed once.
    let cache: Vec<[Tensor<f32>; 3]> = if stage == Stage::Two && !cfg.augment {
        data.par_iter()
            .map(|s| extract_features(cfg, params, &s.image))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let seed = mix(cfg.seed, stage as u64 + 1, 0);
    let mut perms = Vec::new();
    let mut adam = Adam::new();
    let mut log = TrainLog::default();
    let out_wh = (cfg.input_hw.1 as u32, cfg.input_hw.0 as u32);
    for it in 0..cfg.iterations {
        let idx = batch_indices(data.len(), cfg.batch, it, seed, &mut perms);
        let results: Vec<_> = idx
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let s = mix(seed, it as u64 + 1, j as u64 + 1);
                if cfg.augment {
                    let (scene, image) = augment(&data[i].scene, &data[i].image, s, out_wh);
                    let mut t = scene_targets(cfg, &scene)?;
                    (t.pairs, t.labels) = relation_pairs(cfg, &scene, Some(s ^ 1));
                    return scene_step(cfg, params, Input::Image(&image), &t, stage);
                }
                let mut t = fixed[i].clone();
                (t.pairs, t.labels) = relation_pairs(cfg, &data[i].scene, Some(s ^ 1));
                if cache.is_empty() {
                    scene_step(cfg, params, Input::Image(&data[i].image), &t, stage)
                } else {
                    scene_step(cfg, params, Input::Cached(&cache[i]), &t, stage)
                }
            })
            .collect();
        let mut sum = [0.0; 3];
        for r in results {
            let (v, grads) = r?;
            sum[0] += v.l_o;
            sum[1] += v.l_g;
            sum[2] += v.l_r;
            for (name, g) in grads {
                params.accumulate(&name, &g)?;
            }
        }
        let b = idx.len() as f64;
        params.scale_grads(1.0 / b);
        let lr = lr_at(it, cfg.lr, cfg.decay_every);
        let row = LogRow {
            iteration: it,
            lr,
            loss: LossValues::new(cfg, sum[0] / b, sum[1] / b, sum[2] / b),
        };
        progress(&row);
        log.rows.push(row);
        match cfg.optimizer {
            Optimizer::Adam => adam.step(params, lr),
            Optimizer::Sgd => sgd_step(params, lr),
        }
    }
    Ok(log)
}

/// Fresh parameters seeded by `cfg.seed`, trained with `L_O`.
pub fn train_stage1(cfg: &ModelConfig, data: &[Sample]) -> Result<(ParamStore<f32>, TrainLog), NetError> {
    let mut params = init_params::<f32>(cfg, cfg.seed);
    let log = train_stage(cfg, &mut params, data, Stage::One, |_| {})?;
    Ok((params, log))
}

/// Continues from stage-one parameters with the extractor and detector frozen.
pub fn train_stage2(
    cfg: &ModelConfig,
    data: &[Sample],
    mut params: ParamStore<f32>,
) -> Result<(ParamStore<f32>, TrainLog), NetError> {
    let log = train_stage(cfg, &mut params, data, Stage::Two, |_| {})?;
    Ok((params, log))
}
