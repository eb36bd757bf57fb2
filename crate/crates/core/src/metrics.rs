//! Volume measurement and the evaluation protocol (percentage error, MAPE,
//! Chamfer distance) with table-level aggregation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::mesh::TriangleMesh;
use crate::reconstruction::OccupancyGrid;
use crate::spatial::{dist2, KdTree};

/// Cubic meters to milliliters (cm³).
pub const M3_TO_ML: f64 = 1e6;

pub const DEFAULT_CHAMFER_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeMethod {
    Divergence,
    VoxelCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeResult {
    pub volume_ml: f64,
    pub method: VolumeMethod,
    /// False when the mesh is not watertight or its signed volume is not
    /// positive (inward orientation).
    pub reliable: bool,
}

/// `(1/6) Σ (v₁−o)·((v₂−o)×(v₃−o))` for an arbitrary reference point `o`.
/// For closed meshes the value does not depend on `o`.
pub fn signed_volume_about(mesh: &TriangleMesh, origin: &Vec3) -> f64 {
    let sum: f64 = mesh
        .triangles
        .iter()
        .map(|&[a, b, c]| {
            let v1 = mesh.vertices[a as usize] - origin;
            let v2 = mesh.vertices[b as usize] - origin;
            let v3 = mesh.vertices[c as usize] - origin;
            v1.dot(&v2.cross(&v3))
        })
        .sum();
    sum / 6.0
}

/// Signed volume in cubic meters. The tetrahedra fan out from the vertex
/// centroid rather than the world origin so large offsets do not cancel
/// catastrophically.
pub fn signed_volume_m3(mesh: &TriangleMesh) -> f64 {
    if mesh.vertices.is_empty() {
        return 0.0;
    }
    let centroid = mesh.vertices.iter().fold(Vec3::zeros(), |acc, v| acc + v) / mesh.vertices.len() as f64;
    signed_volume_about(mesh, &centroid)
}

pub fn mesh_volume(mesh: &TriangleMesh) -> Result<VolumeResult> {
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let volume_ml = signed_volume_m3(mesh) * M3_TO_ML;
    let watertight = mesh.is_watertight();
    if !watertight {
        log::warn!("mesh is not watertight; volume is unreliable");
    }
    Ok(VolumeResult {
        volume_ml,
        method: VolumeMethod::Divergence,
        reliable: watertight && volume_ml > 0.0,
    })
}

/// Occupied voxel count × spacing³.
pub fn voxel_volume(grid: &OccupancyGrid) -> VolumeResult {
    VolumeResult {
        volume_ml: grid.occupied_count() as f64 * grid.spacing.powi(3) * M3_TO_ML,
        method: VolumeMethod::VoxelCount,
        reliable: true,
    }
}

/// Absolute percentage error `100·|pred − gt| / gt`.
pub fn error_percentage(predicted_ml: f64, gt_ml: f64) -> Result<f64> {
    if gt_ml.is_nan() || gt_ml <= 0.0 {
        return Err(Error::NonPositiveGroundTruth(gt_ml));
    }
    Ok(100.0 * (predicted_ml - gt_ml).abs() / gt_ml)
}

/// `100 − error_percentage`
pub fn accuracy(predicted_ml: f64, gt_ml: f64) -> Result<f64> {
    Ok(100.0 - error_percentage(predicted_ml, gt_ml)?)
}

/// Mean and sample standard deviation (÷(n−1); 0 for a single value).
pub fn mape(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::EmptyList);
    }
    // sort so the result is independent of input order
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    if sorted.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = sorted.iter().map(|e| (e - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// `(Σ, mean)` of per-item Chamfer distances.
pub fn chamfer_aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyList);
    }
    let sum: f64 = values.iter().sum();
    Ok((sum, sum / values.len() as f64))
}

/// Geometry accepted by [`chamfer_distance`].
#[derive(Debug, Clone, Copy)]
pub enum Shape<'a> {
    Mesh(&'a TriangleMesh),
    Cloud(&'a PointCloud),
}

impl<'a> From<&'a TriangleMesh> for Shape<'a> {
    fn from(m: &'a TriangleMesh) -> Self {
        Shape::Mesh(m)
    }
}

impl<'a> From<&'a PointCloud> for Shape<'a> {
    fn from(c: &'a PointCloud) -> Self {
        Shape::Cloud(c)
    }
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_surface(mesh: &TriangleMesh, samples: usize, seed: u64) -> Vec<Vec3> {
    if mesh.triangles.is_empty() || samples == 0 {
        return Vec::new();
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for i in 0..mesh.triangles.len() {
        total += mesh.triangle_area(i);
        cumulative.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let target = rng.random::<f64>() * total;
            let idx = cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1);
            let [a, b, c] = mesh.triangle(idx);
            let r1: f64 = rng.random::<f64>().sqrt();
            let r2: f64 = rng.random();
            a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2)
        })
        .collect()
}

fn shape_points(shape: Shape<'_>, samples: usize, seed: u64) -> Result<Vec<Vec3>> {
    match shape {
        Shape::Cloud(c) => Ok(c.points.clone()),
        Shape::Mesh(m) => {
            if samples < 100 {
                return Err(Error::InvalidConfig(format!(
                    "chamfer needs at least 100 surface samples, got {samples}"
                )));
            }
            Ok(sample_surface(m, samples, seed))
        }
    }
}

/// Mean distance from each point of `from` to its nearest neighbour in `to`.
fn mean_nearest(from: &[Vec3], to: &KdTree) -> f64 {
    let d: Vec<f64> = from
        .par_iter()
        .map(|p| to.nearest_dist2(p).expect("non-empty tree").sqrt())
        .collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// Symmetric Chamfer distance `½[mean_a min_b ‖a−b‖ + mean_b min_a ‖a−b‖]`.
/// Meshes are sampled with the same seed on both sides, so the value is
/// symmetric in its arguments.
pub fn chamfer_distance(a: Shape<'_>, b: Shape<'_>, samples: usize, seed: u64) -> Result<f64> {
    let pa = shape_points(a, samples, seed)?;
    let pb = shape_points(b, samples, seed)?;
    chamfer_points(&pa, &pb)
}

pub fn chamfer_points(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput);
    }
    let ta = KdTree::build(a);
    let tb = KdTree::build(b);
    let ab = mean_nearest(a, &tb);
    let ba = mean_nearest(b, &ta);
    Ok(0.5 * (ab + ba))
}

/// Quadratic reference used to cross-check the tree.
pub fn chamfer_points_brute(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput);
    }
    let one_way = |from: &[Vec3], to: &[Vec3]| {
        let d: Vec<f64> = from
            .iter()
            .map(|p| to.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min).sqrt())
            .collect();
        d.iter().sum::<f64>() / d.len() as f64
    };
    Ok(0.5 * (one_way(a, b) + one_way(b, a)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemInput {
    pub name: String,
    pub predicted_ml: f64,
    pub gt_ml: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chamfer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub name: String,
    pub predicted_ml: f64,
    pub gt_ml: f64,
    pub error_pct: f64,
    pub accuracy_pct: f64,
    pub chamfer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_item: Vec<ItemReport>,
    pub mape_pct: f64,
    pub error_std_pct: f64,
    /// Sum and mean over the items that carry a Chamfer value.
    pub cd_sum: Option<f64>,
    pub cd_mean: Option<f64>,
}

pub fn aggregate_report(items: &[ItemInput]) -> Result<EvaluationReport> {
    if items.is_empty() {
        return Err(Error::EmptyList);
    }
    let per_item = items
        .iter()
        .map(|it| {
            let error_pct = error_percentage(it.predicted_ml, it.gt_ml)?;
            Ok(ItemReport {
                name: it.name.clone(),
                predicted_ml: it.predicted_ml,
                gt_ml: it.gt_ml,
                error_pct,
                accuracy_pct: 100.0 - error_pct,
                chamfer: it.chamfer,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<f64> = per_item.iter().map(|r| r.error_pct).collect();
    let (mape_pct, error_std_pct) = mape(&errors)?;
    let cds: Vec<f64> = per_item.iter().filter_map(|r| r.chamfer).collect();
    let (cd_sum, cd_mean) = match chamfer_aggregate(&cds) {
        Ok((s, m)) => (Some(s), Some(m)),
        Err(_) => (None, None),
    };
    Ok(EvaluationReport {
        per_item,
        mape_pct,
        error_std_pct,
        cd_sum,
        cd_mean,
    })
}

impl EvaluationReport {
    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>12} {:>12} {:>9} {:>9} {:>10}\n",
            "item", "predicted", "gt", "error%", "acc%", "chamfer"
        ));
        for r in &self.per_item {
            let cd = r.chamfer.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<24} {:>12.2} {:>12.2} {:>9.2} {:>9.2} {:>10}\n",
                r.name, r.predicted_ml, r.gt_ml, r.error_pct, r.accuracy_pct, cd
            ));
        }
        out.push_str(&format!("MAPE {:.2}  S.D. {:.2}\n", self.mape_pct, self.error_std_pct));
        if let (Some(s), Some(m)) = (self.cd_sum, self.cd_mean) {
            out.push_str(&format!("CD sum {s:.4}  CD mean {m:.4}\n"));
        }
        out
    }
}
