//! Metric similarity alignment of an up-to-scale reconstruction.
//!
//! Structure-from-motion output lives in an arbitrary gauge: any rotation,
//! translation and isotropic scale of it explains the images equally well.
//! Pairing each reconstructed camera center with the metric center reported
//! by the AR tracker pins that gauge down. The fit is the closed-form
//! least-squares similarity (Umeyama's method).

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geometry::{reorthonormalize, CameraView, Mat3, PointCloud, Pose, Vec3};
use crate::mesh::TriangleMesh;

/// `x ↦ s·R·x + t`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::NumericalFailure(format!("scale {scale} is not positive")));
        }
        // reuse pose validation for the rotation
        let pose = Pose::new(rotation, translation)?;
        Ok(SimilarityTransform {
            scale,
            rotation: *pose.rotation(),
            translation,
        })
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        SimilarityTransform {
            scale: inv_s,
            rotation: rt,
            translation: -(rt * self.translation) * inv_s,
        }
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
        }
    }
}

/// Source (reconstruction frame) to target (metric frame) point pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(Vec3, Vec3)>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(Vec3, Vec3)>) -> Self {
        CorrespondenceSet { pairs }
    }

    pub fn from_slices(source: &[Vec3], target: &[Vec3]) -> Self {
        CorrespondenceSet {
            pairs: source.iter().copied().zip(target.iter().copied()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AlignmentOptions {
    /// Re-fit after dropping the worst tenth of the pairs by residual.
    pub trimmed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentFit {
    pub transform: SimilarityTransform,
    /// Root-mean-square residual over the pairs used by the final fit.
    pub rms: f64,
    pub pairs_used: usize,
}

/// Least-squares similarity minimizing `Σ‖s·R·x + t − y‖²`.
pub fn estimate_similarity(corr: &CorrespondenceSet) -> Result<AlignmentFit> {
    estimate_similarity_with(corr, AlignmentOptions::default())
}

pub fn estimate_similarity_with(corr: &CorrespondenceSet, opts: AlignmentOptions) -> Result<AlignmentFit> {
    let fit = fit_umeyama(&corr.pairs)?;
    if !opts.trimmed {
        return Ok(fit);
    }
    let drop = corr.len() / 10;
    if drop == 0 || corr.len() - drop < 3 {
        return Ok(fit);
    }
    let mut ranked: Vec<(f64, usize)> = corr
        .pairs
        .iter()
        .enumerate()
        .map(|(i, (x, y))| ((fit.transform.apply(x) - y).norm_squared(), i))
        .collect();
    // ties broken by index so the kept set does not depend on input order quirks
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = ranked[..corr.len() - drop].iter().map(|&(_, i)| i).collect();
    keep.sort_unstable();
    let kept: Vec<(Vec3, Vec3)> = keep.into_iter().map(|i| corr.pairs[i]).collect();
    fit_umeyama(&kept)
}

fn fit_umeyama(pairs: &[(Vec3, Vec3)]) -> Result<AlignmentFit> {
    let n = pairs.len();
    if n < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{n} correspondences, need at least 3"
        )));
    }
    if pairs
        .iter()
        .any(|(x, y)| !x.iter().chain(y.iter()).all(|v| v.is_finite()))
    {
        return Err(Error::NumericalFailure("non-finite correspondence".into()));
    }
    // canonical order makes the floating-point sums independent of input order
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| {
        a.0.iter()
            .chain(a.1.iter())
            .zip(b.0.iter().chain(b.1.iter()))
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let pairs = &sorted[..];
    let inv_n = 1.0 / n as f64;
    let mu_x = pairs.iter().fold(Vec3::zeros(), |acc, (x, _)| acc + x) * inv_n;
    let mu_y = pairs.iter().fold(Vec3::zeros(), |acc, (_, y)| acc + y) * inv_n;

    let mut sigma_xy = Matrix3::zeros();
    let mut cov_x = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in pairs {
        let dx = x - mu_x;
        let dy = y - mu_y;
        sigma_xy += dy * dx.transpose();
        cov_x += dx * dx.transpose();
        var_x += dx.norm_squared();
    }
    sigma_xy *= inv_n;
    cov_x *= inv_n;
    var_x *= inv_n;

    // source rank ≥ 2 (not collinear)
    let sv = cov_x.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().map(|v| v.abs()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= sv[0] * 1e-12 {
        return Err(Error::DegenerateGeometry(
            "source points are collinear or coincident".into(),
        ));
    }

    let svd = sigma_xy.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::NumericalFailure("svd failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::NumericalFailure("svd failed".into()))?;
    let d = svd.singular_values;
    let mut sign = Mat3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let mut rotation = u * sign * v_t;
    if (rotation.transpose() * rotation - Mat3::identity()).abs().max() > 1e-12 {
        rotation = reorthonormalize(&rotation);
    }
    let trace_ds = d[0] * sign[(0, 0)] + d[1] * sign[(1, 1)] + d[2] * sign[(2, 2)];
    let scale = trace_ds / var_x;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::NumericalFailure(format!(
            "scale estimate {scale} is not positive"
        )));
    }
    let translation = mu_y - rotation * mu_x * scale;
    let transform = SimilarityTransform {
        scale,
        rotation,
        translation,
    };
    let sse: f64 = pairs.iter().map(|(x, y)| (transform.apply(x) - y).norm_squared()).sum();
    Ok(AlignmentFit {
        transform,
        rms: (sse * inv_n).sqrt(),
        pairs_used: n,
    })
}

pub fn apply_similarity(xf: &SimilarityTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| xf.apply(p)).collect(),
        frame_label: "metric".into(),
        metric: true,
    }
}

pub fn apply_similarity_to_mesh(xf: &SimilarityTransform, mesh: &TriangleMesh) -> TriangleMesh {
    TriangleMesh {
        vertices: mesh.vertices.iter().map(|p| xf.apply(p)).collect(),
        triangles: mesh.triangles.clone(),
    }
}

/// Moves cameras along with the scene. For a world-to-camera pose `[R|t]`
/// and `y = s·Q·x + τ`, the new pose is `[R·Qᵀ | s·t − R·Qᵀ·τ]`; camera
/// coordinates scale uniformly by `s`, so pixel projections are unchanged.
pub fn apply_similarity_to_pose(xf: &SimilarityTransform, pose: &Pose) -> Pose {
    let rot = pose.rotation() * xf.rotation.transpose();
    let trans = pose.translation() * xf.scale - rot * xf.translation;
    Pose::from_parts_unchecked(rot, trans)
}

pub fn apply_similarity_to_views(xf: &SimilarityTransform, views: &[CameraView]) -> Vec<CameraView> {
    views
        .iter()
        .map(|v| CameraView {
            pose: apply_similarity_to_pose(xf, &v.pose),
            ..v.clone()
        })
        .collect()
}
