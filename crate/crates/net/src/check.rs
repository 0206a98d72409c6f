//! Finite-difference check of the whole loss on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackgrasp_core::synth::render;
use stackgrasp_core::{GraspRect, ImageRef, ObjectBox, OwnedGrasp, Relation, RelationKind, SceneAnnotation};
use stackgrasp_tensor::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Tensor};

use crate::config::ModelConfig;
use crate::loss::scene_targets;
use crate::model::{image_tensor, init_params, Graph};

/// 48x48 input, two classes and narrow layers: small enough to difference
/// every parameter tensor, large enough to exercise every head.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        input_hw: (48, 48),
        stem_channels: 3,
        channels: [4, 6, 8],
        fusion_channels: 6,
        n_classes: 2,
        anchors: [(8.0, 4.0), (14.0, 6.0), (22.0, 8.0)],
        roi_size: 3,
        relation_channels: 3,
        relation_hidden: 5,
        ..ModelConfig::default()
    }
}

/// Two overlapping blocks, the second resting on the first.
pub fn micro_scene() -> SceneAnnotation {
    let a = ObjectBox::new(0, 0, 6.0, 8.0, 30.0, 30.0);
    let b = ObjectBox::new(1, 1, 18.0, 20.0, 42.0, 40.0);
    let grasps = vec![
        OwnedGrasp {
            owner: 0,
            rect: GraspRect::new(14.0, 14.0, 20.0, 6.0, 0.0, 0),
        },
        OwnedGrasp {
            owner: 1,
            rect: GraspRect::new(30.0, 30.0, 18.0, 6.0, 75.0, 1),
        },
    ];
    SceneAnnotation {
        image: ImageRef::Embedded(render(48, 48, &[a, b])),
        width: 48,
        height: 48,
        objects: vec![a, b],
        grasps,
        relations: vec![Relation::new(0, 1, RelationKind::Under)],
    }
}

/// Checks `L_O + alpha L_G + beta L_R` with respect to every parameter for
/// `draws` independent initializations.
pub fn end_to_end_check(draws: u64, opts: &GradCheckOptions) -> Vec<GradCheckReport> {
    let cfg = micro_config();
    let scene = micro_scene();
    let ImageRef::Embedded(img) = &scene.image else {
        unreachable!()
    };
    let targets = scene_targets(&cfg, &scene).expect("micro scene is valid");
    // Flat regions give exactly tied pooling windows, which are kinks at the
    // evaluation point itself; a little fixed noise separates them.
    let mut image = image_tensor::<f64>(img);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    image.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    (0..draws)
        .map(|d| {
            let store: ParamStore<f64> = init_params(&cfg, opts.seed.wrapping_add(d));
            let names: Vec<String> = store.names().map(String::from).collect();
            let inputs: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().value.clone()).collect();
            let graph = |tape: &mut stackgrasp_tensor::Tape<f64>, vars: &[stackgrasp_tensor::Var]| {
                let mut g = Graph::new(&cfg, &store, std::mem::take(tape));
                for (n, &v) in names.iter().zip(vars) {
                    g.bind(n, v);
                }
                let x = g.tape.constant(image.clone());
                let result = g
                    .features(x)
                    .and_then(|fused| g.losses(fused, &targets))
                    .and_then(|l| g.total_loss(&l));
                *tape = g.tape;
                result
            };
            let o = GradCheckOptions {
                seed: opts.seed.wrapping_add(d),
                ..*opts
            };
            grad_check(&format!("total_loss draw {d}"), &inputs, graph, &o)
        })
        .collect()
}

/// Options used for the end-to-end check. One parameter feeds thousands of
/// relus and pooling windows, so a step of 1e-3 routinely crosses a kink
/// somewhere; float64 leaves room for a much smaller step.
pub fn end_to_end_options() -> GradCheckOptions {
    GradCheckOptions {
        h: 1e-6,
        tol: 1e-2,
        max_coords: 8,
        ..GradCheckOptions::default()
    }
}
