//! Object isolation by multi-view silhouette consistency.
//!
//! A point survives when it projects in front of the camera and onto mask
//! foreground in enough of the masked views. With the default quota of 1.0
//! that is the intersection of the per-view valid sets.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{project, Aabb, CameraView, PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    /// Fraction of masked views a point must satisfy, in (0, 1].
    pub quota: f64,
    /// Points at depth ≤ this fail the view.
    pub min_depth: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            quota: 1.0,
            min_depth: 1e-6,
        }
    }
}

impl MaskingConfig {
    pub fn with_quota(quota: f64) -> Self {
        MaskingConfig {
            quota,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.quota > 0.0 && self.quota <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "quota must be in (0, 1], got {}",
                self.quota
            )));
        }
        if !self.min_depth.is_finite() {
            return Err(Error::InvalidConfig("min_depth must be finite".into()));
        }
        Ok(())
    }

    /// Views a point must pass out of `masked_views`.
    pub fn required_views(&self, masked_views: usize) -> usize {
        // the epsilon keeps e.g. 0.5·10 from rounding up to 6
        let need = (self.quota * masked_views as f64 - 1e-9).ceil() as usize;
        need.clamp(1, masked_views.max(1))
    }
}

/// Per-view predicate: in front of the camera and on mask foreground.
/// Views without a mask answer `false`; callers skip them.
#[inline]
pub fn view_accepts(view: &CameraView, p: &Vec3, min_depth: f64) -> bool {
    let Some(mask) = view.mask.as_ref() else {
        return false;
    };
    match project(view, p) {
        Some(pr) if pr.depth > min_depth => mask.contains(pr.u, pr.v),
        _ => false,
    }
}

/// Masked views only, in input order.
pub(crate) fn masked_views(views: &[CameraView]) -> Vec<&CameraView> {
    views.iter().filter(|v| v.mask.is_some()).collect()
}

/// Point-level predicate shared by masking and carving. Stops early once
/// the quota is met or can no longer be met.
#[inline]
pub(crate) fn passes_quota(views: &[&CameraView], p: &Vec3, required: usize, min_depth: f64) -> bool {
    let total = views.len();
    let mut hits = 0usize;
    for (i, v) in views.iter().enumerate() {
        if view_accepts(v, p, min_depth) {
            hits += 1;
            if hits >= required {
                return true;
            }
        } else if hits + (total - i - 1) < required {
            return false;
        }
    }
    hits >= required
}

pub fn mask_point_cloud(cloud: &PointCloud, views: &[CameraView], cfg: &MaskingConfig) -> Result<PointCloud> {
    cfg.validate()?;
    cloud.validate()?;
    let masked = masked_views(views);
    if masked.is_empty() {
        return Err(Error::NoMaskedViews);
    }
    let required = cfg.required_views(masked.len());
    let keep: Vec<bool> = cloud
        .points
        .par_iter()
        .map(|p| passes_quota(&masked, p, required, cfg.min_depth))
        .collect();
    let points = cloud
        .points
        .iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(*p))
        .collect();
    Ok(PointCloud {
        points,
        frame_label: cloud.frame_label.clone(),
        metric: cloud.metric,
    })
}

/// Bounding box of the cloud grown by `pad_fraction` of each extent on
/// every side.
pub fn masked_bounding_box(cloud: &PointCloud, pad_fraction: f64) -> Result<Aabb> {
    let bb = Aabb::from_points(&cloud.points).ok_or(Error::EmptyCloud)?;
    let pad = bb.extent() * pad_fraction;
    Ok(Aabb::new(bb.min - pad, bb.max + pad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Mask, Pose};
    use crate::testutil::random_vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn view_with(mask: Mask, eye: Vec3) -> CameraView {
        let k = Intrinsics::new(40.0, 40.0, 15.5, 15.5, mask.width(), mask.height()).unwrap();
        let pose = Pose::look_at(eye, Vec3::zeros(), Vec3::z()).unwrap();
        CameraView::new(k, pose, Some(mask), "").unwrap()
    }

    fn ring_views(n: usize, f: impl Fn(usize) -> Mask) -> Vec<CameraView> {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                view_with(f(i), Vec3::new(3.0 * a.cos(), 3.0 * a.sin(), 1.0))
            })
            .collect()
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| random_vec(rng, 1.0)).collect(), "world", true)
    }

    #[test]
    fn all_foreground_keeps_everything_in_front() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // cameras at distance ~3.2; cloud well inside their frusta
        let cloud = PointCloud::new((0..200).map(|_| random_vec(&mut rng, 0.2)).collect(), "w", true);
        let views = ring_views(6, |_| Mask::filled(32, 32, true));
        let out = mask_point_cloud(&cloud, &views, &MaskingConfig::default()).unwrap();
        assert_eq!(out, cloud);
    }

    #[test]
    fn one_empty_mask_empties_the_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 100);
        let views = ring_views(5, |i| Mask::filled(32, 32, i != 2));
        let out = mask_point_cloud(&cloud, &views, &MaskingConfig::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn unmasked_views_do_not_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = PointCloud::new((0..50).map(|_| random_vec(&mut rng, 0.2)).collect(), "w", true);
        let mut views = ring_views(4, |_| Mask::filled(32, 32, true));
        views[1].mask = None;
        let out = mask_point_cloud(&cloud, &views, &MaskingConfig::default()).unwrap();
        assert_eq!(out.len(), 50);
        for v in &mut views {
            v.mask = None;
        }
        assert!(matches!(
            mask_point_cloud(&cloud, &views, &MaskingConfig::default()),
            Err(Error::NoMaskedViews)
        ));
    }

    #[test]
    fn behind_camera_fails() {
        let views = ring_views(1, |_| Mask::filled(32, 32, true));
        let eye = views[0].camera_center();
        // a point behind the camera along the optical axis
        let behind = eye * 2.0;
        let cloud = PointCloud::new(vec![Vec3::zeros(), behind], "w", true);
        let out = mask_point_cloud(&cloud, &views, &MaskingConfig::default()).unwrap();
        assert_eq!(out.points, vec![Vec3::zeros()]);
    }

    #[test]
    fn quota_rounding() {
        let c = MaskingConfig::with_quota(0.5);
        assert_eq!(c.required_views(10), 5);
        assert_eq!(c.required_views(3), 2);
        assert_eq!(MaskingConfig::default().required_views(7), 7);
        assert_eq!(MaskingConfig::with_quota(0.01).required_views(7), 1);
        assert!(MaskingConfig::with_quota(0.0).validate().is_err());
        assert!(MaskingConfig::with_quota(1.5).validate().is_err());
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let views = ring_views(2, |_| Mask::filled(32, 32, true));
        assert!(matches!(
            mask_point_cloud(&PointCloud::default(), &views, &MaskingConfig::default()),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn bounding_box_examples() {
        let single = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0)], "", true);
        let bb = masked_bounding_box(&single, 0.0).unwrap();
        assert_eq!(bb.min, bb.max);
        let corners: Vec<Vec3> = (0..8)
            .map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        let bb = masked_bounding_box(&PointCloud::new(corners, "", true), 0.05).unwrap();
        assert!((bb.min - Vec3::repeat(-0.05)).norm() < 1e-15);
        assert!((bb.max - Vec3::repeat(1.05)).norm() < 1e-15);
        assert!(matches!(
            masked_bounding_box(&PointCloud::default(), 0.1),
            Err(Error::EmptyCloud)
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = random_cloud(&mut rng, 300);
        let bb = masked_bounding_box(&cloud, 0.0).unwrap();
        assert!(cloud.points.iter().all(|p| bb.contains(p)));
    }

    /// Straight double loop over points and views, following the pinhole
    /// equation by hand.
    fn naive_mask(cloud: &[Vec3], views: &[CameraView], cfg: &MaskingConfig) -> Vec<Vec3> {
        let masked: Vec<&CameraView> = views.iter().filter(|v| v.mask.is_some()).collect();
        let need = ((cfg.quota * masked.len() as f64) - 1e-9).ceil().max(1.0) as usize;
        let mut out = Vec::new();
        for p in cloud {
            let mut hits = 0;
            for v in &masked {
                let pc = v.pose.rotation() * p + v.pose.translation();
                if pc.z <= cfg.min_depth {
                    continue;
                }
                let u = v.intrinsics.fx * pc.x / pc.z + v.intrinsics.cx;
                let w = v.intrinsics.fy * pc.y / pc.z + v.intrinsics.cy;
                let (x, y) = ((u + 0.5).floor(), (w + 0.5).floor());
                let m = v.mask.as_ref().unwrap();
                if x >= 0.0 && y >= 0.0 && x < m.width() as f64 && y < m.height() as f64 && m.get(x as u32, y as u32) {
                    hits += 1;
                }
            }
            if hits >= need {
                out.push(*p);
            }
        }
        out
    }

    fn random_scene(seed: u64) -> (PointCloud, Vec<CameraView>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_views = rng.random_range(1..=20);
        let n_points = rng.random_range(1..=1000);
        let views = (0..n_views)
            .map(|i| {
                let dir = random_vec(&mut rng, 1.0).normalize();
                let eye = dir * rng.random_range(1.5..4.0);
                let up = if dir.z.abs() > 0.9 { Vec3::x() } else { Vec3::z() };
                let pose = Pose::look_at(eye, random_vec(&mut rng, 0.2), up).unwrap();
                let (w, h) = (rng.random_range(8..48), rng.random_range(8..48));
                let k = Intrinsics::new(
                    rng.random_range(10.0..60.0),
                    rng.random_range(10.0..60.0),
                    w as f64 / 2.0,
                    h as f64 / 2.0,
                    w,
                    h,
                )
                .unwrap();
                let has_mask = i == 0 || rng.random::<f64>() < 0.9;
                let mask = has_mask.then(|| mask_for(&mut rng, w, h));
                CameraView::new(k, pose, mask, "").unwrap()
            })
            .collect();
        let points = (0..n_points).map(|_| random_vec(&mut rng, 1.2)).collect();
        (PointCloud::new(points, "w", true), views)
    }

    fn mask_for(rng: &mut impl Rng, w: u32, h: u32) -> Mask {
        let density = rng.random_range(0.3..1.0);
        Mask::from_fn(w, h, |_, _| rng.random::<f64>() < density)
    }

    #[test]
    fn sphere_scene_keeps_exactly_the_surface() {
        use crate::ingestion::{synthesize_scene, SyntheticSolid};
        let scene = synthesize_scene(&SyntheticSolid::sphere(0.05), 12, (256, 256), 4).unwrap();
        let views = &scene.manifest.views;
        let surface: Vec<Vec3> = scene.manifest.point_cloud.as_ref().unwrap().points[..500].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut outside = Vec::new();
        while outside.len() < 500 {
            let p = random_vec(&mut rng, 0.3);
            // background in every view, per the hand-written projection
            let any = views
                .iter()
                .any(|v| !naive_mask(&[p], std::slice::from_ref(v), &MaskingConfig::default()).is_empty());
            if !any {
                outside.push(p);
            }
        }
        let mut points = Vec::new();
        for (a, b) in surface.iter().zip(&outside) {
            points.push(*b);
            points.push(*a);
        }
        let cloud = PointCloud::new(points, "w", true);
        let out = mask_point_cloud(&cloud, views, &MaskingConfig::default()).unwrap();
        assert_eq!(out.points, surface);
    }

    #[test]
    fn matches_naive_oracle_on_random_scenes() {
        for seed in 0..40 {
            let (cloud, views) = random_scene(seed);
            for q in [1.0, 0.5, 0.2] {
                let cfg = MaskingConfig::with_quota(q);
                let out = mask_point_cloud(&cloud, &views, &cfg).unwrap();
                assert_eq!(
                    out.points,
                    naive_mask(&cloud.points, &views, &cfg),
                    "seed {seed} quota {q}"
                );
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn quota_monotone_idempotent_order_free(seed in 0u64..1_000_000, q1 in 0.05f64..=1.0, q2 in 0.05f64..=1.0) {
            let (cloud, views) = random_scene(seed);
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let loose = mask_point_cloud(&cloud, &views, &MaskingConfig::with_quota(lo)).unwrap();
            let strict = mask_point_cloud(&cloud, &views, &MaskingConfig::with_quota(hi)).unwrap();
            proptest::prop_assert!(strict.points.iter().all(|p| loose.points.contains(p)));

            let cfg = MaskingConfig::default();
            let once = mask_point_cloud(&cloud, &views, &cfg).unwrap();
            if !once.is_empty() {
                let twice = mask_point_cloud(&once, &views, &cfg).unwrap();
                proptest::prop_assert_eq!(&twice, &once);
            }

            let mut rev = views.clone();
            rev.reverse();
            rev.rotate_left(seed as usize % views.len());
            let permuted = mask_point_cloud(&cloud, &rev, &MaskingConfig::with_quota(lo)).unwrap();
            proptest::prop_assert_eq!(permuted, loose);
        }
    }
}
