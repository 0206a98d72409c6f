//! Core of the stacked-object grasping workbench.
//!
//! Geometry, manipulation planning, evaluation and data handling: the parts
//! of the pipeline that do not involve the neural network.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod augment;
pub mod geometry;
pub mod metrics;
pub mod planner;
pub mod scene;
pub mod scene_file;
pub mod synth;
pub mod vmrd;

pub use geometry::{
    aabb_iou, box_intersection, box_union, convex_intersection_area, grasp_angle_diff, jaccard_rotated,
    rect_to_polygon, ConvexPolygon,
};
pub use planner::{
    build_graph, detect_cycles, full_clearing_order, grasp_order_for_target, graspable_set, symmetrize_pair,
    PairPrediction, PlanError, RelationGraph,
};
pub use scene::{
    relation_inverse, validate_scene, GraspRect, ImageRef, ObjectBox, ObjectId, OwnedGrasp, Relation, RelationKind,
    RgbImage, SceneAnnotation,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {context}: {message}")]
    Parse { context: String, message: String },
    #[error("invalid scene: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("{path}: image error: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}: {inner}")]
    InFile { path: PathBuf, inner: Box<DataError> },
    #[error("could not place {objects} objects after {attempts} attempts")]
    RetryExhausted { objects: usize, attempts: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn in_file(self, path: &Path) -> Self {
        DataError::InFile {
            path: path.to_path_buf(),
            inner: Box::new(self),
        }
    }
}
