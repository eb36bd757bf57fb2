//! End-to-end composition: metric alignment, masking, carving, surface
//! extraction, refinement and volume integration.

use serde::Serialize;

use crate::alignment::{
    apply_similarity, apply_similarity_to_views, estimate_similarity_with, AlignmentFit, AlignmentOptions,
    CorrespondenceSet,
};
use crate::error::{Error, Result};
use crate::geometry::{CameraView, PointCloud};
use crate::ingestion::SceneManifest;
use crate::masking::{mask_point_cloud, MaskingConfig};
use crate::mesh::TriangleMesh;
use crate::metrics::{error_percentage, mesh_volume, voxel_volume, VolumeResult, DEFAULT_CHAMFER_SAMPLES};
use crate::reconstruction::{reconstruct, OccupancyGrid, DEFAULT_RESOLUTION};
use crate::refinement::{refine, RefinementConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub resolution: usize,
    pub masking: MaskingConfig,
    pub refinement: RefinementConfig,
    pub alignment: AlignmentOptions,
    /// Surface samples per mesh for Chamfer evaluation.
    pub chamfer_samples: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            resolution: DEFAULT_RESOLUTION,
            masking: MaskingConfig::default(),
            refinement: RefinementConfig::default(),
            alignment: AlignmentOptions::default(),
            chamfer_samples: DEFAULT_CHAMFER_SAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Present when the scene carried AR centers.
    pub alignment: Option<AlignmentFit>,
    pub views: Vec<CameraView>,
    pub masked_cloud: PointCloud,
    pub grid: OccupancyGrid,
    pub raw_mesh: TriangleMesh,
    pub mesh: TriangleMesh,
    pub volume: VolumeResult,
    pub voxel_volume: VolumeResult,
}

/// Reconstruction-to-metric similarity from the views' camera centers and
/// the AR centers, applied to views and cloud. Scenes without AR centers
/// are taken as metric already.
pub fn align_scene(
    scene: &SceneManifest,
    opts: AlignmentOptions,
) -> Result<(Option<AlignmentFit>, Vec<CameraView>, Option<PointCloud>)> {
    let pairs: Vec<_> = scene
        .views
        .iter()
        .zip(&scene.ar_centers)
        .filter_map(|(v, ar)| ar.map(|c| (v.camera_center(), c)))
        .collect();
    if pairs.is_empty() {
        return Ok((None, scene.views.clone(), scene.point_cloud.clone()));
    }
    let fit = estimate_similarity_with(&CorrespondenceSet::new(pairs), opts)?;
    log::info!(
        "alignment: scale {:.6}, rms {:.3e} m over {} pairs",
        fit.transform.scale,
        fit.rms,
        fit.pairs_used
    );
    let views = apply_similarity_to_views(&fit.transform, &scene.views);
    let cloud = scene.point_cloud.as_ref().map(|c| apply_similarity(&fit.transform, c));
    Ok((Some(fit), views, cloud))
}

pub fn run_scene(scene: &SceneManifest, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.masking.validate()?;
    cfg.refinement.validate()?;
    let (alignment, views, cloud) = align_scene(scene, cfg.alignment)?;
    let cloud = cloud.ok_or(Error::MissingExtent)?;
    let masked_cloud = mask_point_cloud(&cloud, &views, &cfg.masking)?;
    log::info!("masking kept {} of {} points", masked_cloud.len(), cloud.len());
    if masked_cloud.is_empty() {
        return Err(Error::DegenerateGeometry("masking removed every point".into()));
    }
    let rec = reconstruct(&views, Some(&masked_cloud), None, cfg.resolution, &cfg.masking)?;
    let mesh = refine(&rec.mesh, &cfg.refinement)?;
    let volume = mesh_volume(&mesh)?;
    let voxel_volume = voxel_volume(&rec.grid);
    Ok(PipelineOutput {
        alignment,
        views,
        masked_cloud,
        grid: rec.grid,
        raw_mesh: rec.mesh,
        mesh,
        volume,
        voxel_volume,
    })
}

/// Machine-readable summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scene_name: String,
    pub volume_ml: f64,
    pub voxel_volume_ml: f64,
    pub reliable: bool,
    pub watertight: bool,
    pub euler_characteristic: i64,
    pub vertices: usize,
    pub triangles: usize,
    pub masked_points: usize,
    pub grid_dims: [usize; 3],
    pub voxel_spacing_m: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment_rms_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_volume_ml: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_pct: Option<f64>,
}

impl RunReport {
    pub fn new(scene: &SceneManifest, out: &PipelineOutput) -> Result<Self> {
        let gt = scene.gt.map(|g| g.volume_ml);
        Ok(RunReport {
            scene_name: scene.scene_name.clone(),
            volume_ml: out.volume.volume_ml,
            voxel_volume_ml: out.voxel_volume.volume_ml,
            reliable: out.volume.reliable,
            watertight: out.mesh.is_watertight(),
            euler_characteristic: out.mesh.euler_characteristic(),
            vertices: out.mesh.vertices.len(),
            triangles: out.mesh.triangles.len(),
            masked_points: out.masked_cloud.len(),
            grid_dims: out.grid.dims,
            voxel_spacing_m: out.grid.spacing,
            alignment_scale: out.alignment.map(|a| a.transform.scale),
            alignment_rms_m: out.alignment.map(|a| a.rms),
            gt_volume_ml: gt,
            error_pct: gt.map(|g| error_percentage(out.volume.volume_ml, g)).transpose()?,
        })
    }

    pub fn to_table(&self) -> String {
        let mut rows = vec![
            ("scene", self.scene_name.clone()),
            ("volume (ml)", format!("{:.3}", self.volume_ml)),
            ("voxel volume (ml)", format!("{:.3}", self.voxel_volume_ml)),
            ("watertight", self.watertight.to_string()),
            ("euler characteristic", self.euler_characteristic.to_string()),
            (
                "vertices / triangles",
                format!("{} / {}", self.vertices, self.triangles),
            ),
            ("masked points", self.masked_points.to_string()),
            (
                "grid",
                format!(
                    "{}x{}x{} @ {:.3} mm",
                    self.grid_dims[0],
                    self.grid_dims[1],
                    self.grid_dims[2],
                    self.voxel_spacing_m * 1e3
                ),
            ),
        ];
        if let (Some(s), Some(r)) = (self.alignment_scale, self.alignment_rms_m) {
            rows.push(("alignment", format!("scale {s:.6}, rms {r:.3e} m")));
        }
        if let (Some(g), Some(e)) = (self.gt_volume_ml, self.error_pct) {
            rows.push(("ground truth (ml)", format!("{g:.3}")));
            rows.push(("error (%)", format!("{e:.2}")));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
    }
}
