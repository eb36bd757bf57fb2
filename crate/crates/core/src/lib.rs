//! Food volume estimation from posed RGB frames, silhouette masks and a
//! sparse point cloud.
//!
//! The pipeline isolates the object in the cloud by multi-view mask
//! consistency, carves a voxel hull from the masks, extracts a watertight
//! surface, optionally refines it and integrates its volume. Reports are
//! in millilitres.

pub mod alignment;
pub mod error;
pub mod frame_selection;
pub mod geometry;
pub mod ingestion;
pub mod masking;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod reconstruction;
pub mod refinement;
pub mod spatial;

#[cfg(test)]
mod testutil;

pub use alignment::{
    apply_similarity, apply_similarity_to_mesh, apply_similarity_to_views, estimate_similarity, AlignmentFit,
    CorrespondenceSet, SimilarityTransform,
};
pub use error::{Error, Result};
pub use frame_selection::{dhash, frame_skip, hamming, select_frames, FrameHash};
pub use geometry::{Aabb, CameraView, Intrinsics, Mask, Mat3, PointCloud, Pose, Vec3};
pub use ingestion::{
    load_manifest, load_mesh, load_point_cloud, save_mesh, save_point_cloud, synthesize_scene, SceneManifest,
    SyntheticSolid,
};
pub use masking::{mask_point_cloud, MaskingConfig};
pub use mesh::TriangleMesh;
pub use metrics::{
    aggregate_report, chamfer_distance, error_percentage, mape, mesh_volume, EvaluationReport, VolumeMethod,
    VolumeResult,
};
pub use pipeline::{run_scene, PipelineConfig, PipelineOutput, RunReport};
pub use reconstruction::{carve_occupancy, marching_cubes, reconstruct, OccupancyGrid, Reconstruction};
pub use refinement::{refine, RefinementConfig};
