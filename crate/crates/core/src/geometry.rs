//! Camera model and the basic geometric containers.
//!
//! Poses are world-to-camera: a world point `p` has camera coordinates
//! `R p + t`, and projects to `K (R p + t)` followed by division by depth.
//! There is no skew and no lens distortion.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Deviation from orthonormality above which a rotation is re-projected
/// onto SO(3) after composition.
pub const ORTHO_DRIFT_TOL: f64 = 1e-7;
/// Deviation accepted from external input before it is rejected outright.
pub const ORTHO_INPUT_TOL: f64 = 1e-6;

/// `max |(RᵀR − I)_ij|`
pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).abs().max()
}

/// Closest rotation in the Frobenius sense (polar factor), with the sign
/// of the smallest singular direction fixed so the result is proper.
pub fn reorthonormalize(r: &Mat3) -> Mat3 {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(Error::validation("intrinsics.fx/fy", "focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::validation("intrinsics.cx", "principal point outside image"));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::validation("intrinsics.cy", "principal point outside image"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Pose {
    /// Validates `rotation` as a proper rotation. Inputs off by more than
    /// [`ORTHO_INPUT_TOL`] are rejected; smaller deviations are projected
    /// back onto SO(3) so downstream code sees an orthonormal matrix.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::validation("pose", "non-finite entry"));
        }
        let err = orthonormality_error(&rotation);
        if err > ORTHO_INPUT_TOL {
            return Err(Error::validation(
                "pose.rotation",
                format!("not orthonormal (deviation {err:.3e})"),
            ));
        }
        if rotation.determinant() <= 0.0 {
            return Err(Error::validation("pose.rotation", "determinant is not +1"));
        }
        let rotation = if err > 1e-12 {
            reorthonormalize(&rotation)
        } else {
            rotation
        };
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds the pose from a camera-to-world transform.
    pub fn from_camera_to_world(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let c2w = Pose::new(rotation, translation)?;
        Ok(c2w.inverse())
    }

    /// Camera at `eye` with its optical (+z) axis toward `target`. Image
    /// rows (+y) point roughly along `-up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() == 0.0 {
            return Err(Error::DegenerateGeometry("eye coincides with target".into()));
        }
        let z = forward.normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            // up parallel to the view direction: pick any perpendicular axis
            let alt = if z.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            x = z.cross(&alt);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Pose::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Optical center in world coordinates, `−Rᵀt`.
    pub fn camera_center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        if orthonormality_error(&rotation) > ORTHO_DRIFT_TOL {
            rotation = reorthonormalize(&rotation);
        }
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub(crate) fn from_parts_unchecked(rotation: Mat3, translation: Vec3) -> Pose {
        Pose { rotation, translation }
    }
}

/// Free function form of [`Pose::camera_center`].
pub fn camera_center(pose: &Pose) -> Vec3 {
    pose.camera_center()
}

/// Binary segmentation raster, row-major, `true` = foreground.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::validation(
                "mask",
                format!("{} values for a {width}x{height} raster", data.len()),
            ));
        }
        Ok(Mask { width, height, data })
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.data[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Nearest-pixel lookup with half-up rounding; false outside the raster.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let x = (u + 0.5).floor();
        let y = (v + 0.5).floor();
        if !(x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64) {
            return false;
        }
        self.get(x as u32, y as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub mask: Option<Mask>,
    pub image_path: String,
}

impl CameraView {
    pub fn new(intrinsics: Intrinsics, pose: Pose, mask: Option<Mask>, image_path: impl Into<String>) -> Result<Self> {
        intrinsics.validate()?;
        if let Some(m) = &mask {
            if m.width() != intrinsics.width || m.height() != intrinsics.height {
                return Err(Error::validation(
                    "mask",
                    format!(
                        "mask is {}x{} but intrinsics are {}x{}",
                        m.width(),
                        m.height(),
                        intrinsics.width,
                        intrinsics.height
                    ),
                ));
            }
        }
        Ok(CameraView {
            intrinsics,
            pose,
            mask,
            image_path: image_path.into(),
        })
    }

    pub fn camera_center(&self) -> Vec3 {
        self.pose.camera_center()
    }

    pub fn project(&self, p: &Vec3) -> Option<Projection> {
        project(self, p)
    }
}

/// Pinhole projection. `None` when the point is at or behind the camera.
pub fn project(view: &CameraView, p: &Vec3) -> Option<Projection> {
    let c = view.pose.transform_point(p);
    let w = c.z;
    if w <= 0.0 {
        return None;
    }
    let k = &view.intrinsics;
    let u = k.fx * c.x + k.cx * w;
    let v = k.fy * c.y + k.cy * w;
    Some(Projection {
        u: u / w,
        v: v / w,
        depth: w,
    })
}

/// Whether pixel `(u, v)` lands on foreground in the view's mask.
pub fn in_mask(view: &CameraView, u: f64, v: f64) -> Result<bool> {
    let mask = view.mask.as_ref().ok_or(Error::MaskMissing)?;
    Ok(mask.contains(u, v))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub frame_label: String,
    /// Set once coordinates are in meters.
    pub metric: bool,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, frame_label: impl Into<String>, metric: bool) -> Self {
        PointCloud {
            points,
            frame_label: frame_label.into(),
            metric,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::validation(format!("points[{i}]"), "non-finite coordinate"));
        }
        Ok(())
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        Some(Aabb { min, max })
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_view() -> CameraView {
        let k = Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 1,
            height: 1,
        };
        CameraView::new(k, Pose::identity(), None, "unit").unwrap()
    }

    #[test]
    fn projection_identity_camera() {
        let view = unit_view();
        let p = project(&view, &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (0.0, 0.0, 1.0));
        let p = project(&view, &Vec3::new(2.0, 3.0, 2.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (1.0, 1.5, 2.0));
        assert!(project(&view, &Vec3::new(0.0, 0.0, -1.0)).is_none());
        assert!(project(&view, &Vec3::new(1.0, 1.0, 0.0)).is_none());
    }

    #[test]
    fn camera_center_examples() {
        assert_eq!(Pose::identity().camera_center(), Vec3::zeros());
        let pose = Pose::new(Mat3::identity(), Vec3::new(0.0, 0.0, -5.0)).unwrap();
        assert_eq!(pose.camera_center(), Vec3::new(0.0, 0.0, 5.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let t = Vec3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            );
            let pose = Pose::new(r, t).unwrap();
            let c = pose.camera_center();
            assert!((pose.rotation() * c + pose.translation()).norm() < 1e-12);
        }
    }

    #[test]
    fn depth_is_camera_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = Intrinsics::new(500.0, 510.0, 320.0, 240.0, 640, 480).unwrap();
        for _ in 0..100 {
            let pose = Pose::new(random_rotation(&mut rng), Vec3::new(0.1, -0.2, 0.3)).unwrap();
            let view = CameraView::new(k, pose, None, "").unwrap();
            let p = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let z = pose.transform_point(&p).z;
            match project(&view, &p) {
                Some(pr) => assert_eq!(pr.depth, z),
                None => assert!(z <= 0.0),
            }
        }
    }

    #[test]
    fn look_at_round_trips_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let eye = Vec3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let pose = Pose::look_at(eye, Vec3::zeros(), Vec3::z()).unwrap();
            assert!((pose.camera_center() - eye).norm() < 1e-12);
            // the target lies on the optical axis
            let c = pose.transform_point(&Vec3::zeros());
            assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && c.z > 0.0);
        }
    }

    #[test]
    fn composition_chain_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut acc = Pose::identity();
        for _ in 0..100 {
            let step = Pose::new(random_rotation(&mut rng), Vec3::new(0.01, 0.0, 0.0)).unwrap();
            acc = acc.compose(&step);
            assert!(orthonormality_error(acc.rotation()) <= ORTHO_DRIFT_TOL);
            assert!((acc.rotation().determinant() - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn reorthonormalize_fixes_drift() {
        let mut r = Mat3::identity();
        r[(0, 1)] = 1e-4;
        let fixed = reorthonormalize(&r);
        assert!(orthonormality_error(&fixed) < 1e-12);
        assert!(Pose::new(r, Vec3::zeros()).is_err());
        r[(0, 1)] = 1e-8;
        let pose = Pose::new(r, Vec3::zeros()).unwrap();
        assert!(orthonormality_error(pose.rotation()) < 1e-12);
    }

    #[test]
    fn rejects_reflections() {
        let r = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(r, Vec3::zeros()).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0, 2, 2).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 2.0, 0.0, 2, 2).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 1.9, 1.9, 2, 2).is_ok());
    }

    fn masked_view(mask: Mask) -> CameraView {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0, mask.width(), mask.height()).unwrap();
        CameraView::new(k, Pose::identity(), Some(mask), "").unwrap()
    }

    #[test]
    fn in_mask_all_true_and_bounds() {
        let view = masked_view(Mask::filled(20, 10, true));
        assert!(in_mask(&view, 10.2, 5.7).unwrap());
        for (u, v) in [(-0.6, 0.0), (19.6, 0.0), (0.0, -0.51), (0.0, 9.5), (25.0, 3.0)] {
            assert!(!in_mask(&view, u, v).unwrap(), "({u}, {v})");
        }
        assert!(in_mask(&view, -0.5, -0.5).unwrap());
        assert!(in_mask(&view, 19.49, 9.49).unwrap());
    }

    #[test]
    fn in_mask_requires_mask() {
        assert!(matches!(in_mask(&unit_view(), 0.0, 0.0), Err(Error::MaskMissing)));
    }

    #[test]
    fn in_mask_single_pixel_nearest_rounding_exhaustive() {
        let mut mask = Mask::filled(8, 8, false);
        mask.set(3, 4, true);
        let view = masked_view(mask);
        assert!(in_mask(&view, 3.4, 4.4).unwrap());
        assert!(!in_mask(&view, 3.6, 4.4).unwrap());
        // oracle: foreground iff |u-3| and |v-4| fall in the half-open pixel cell
        for i in -20..=100 {
            for j in -20..=100 {
                let (u, v) = (i as f64 * 0.1, j as f64 * 0.1);
                let du = u - 3.0;
                let dv = v - 4.0;
                let expect = (-0.5..0.5).contains(&du) && (-0.5..0.5).contains(&dv);
                // skip grid values that sit within rounding noise of a cell edge
                if ((du.abs() - 0.5).abs() < 1e-9) || ((dv.abs() - 0.5).abs() < 1e-9) {
                    continue;
                }
                assert_eq!(in_mask(&view, u, v).unwrap(), expect, "({u}, {v})");
            }
        }
        // half-up on exact boundaries
        assert!(in_mask(&view, 2.5, 3.5).unwrap());
        assert!(!in_mask(&view, 3.5, 4.0).unwrap());
    }

    #[test]
    fn mask_size_must_match_intrinsics() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).unwrap();
        let err = CameraView::new(k, Pose::identity(), Some(Mask::filled(4, 5, true)), "");
        assert!(matches!(err, Err(Error::Validation { .. })));
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn projection_is_invariant_along_ray(
            seed in 0u64..10_000,
            dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in 0.2f64..1.0,
            s1 in 0.01f64..100.0, s2 in 0.01f64..100.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_rotation(&mut rng);
            let t = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let pose = Pose::new(r, t).unwrap();
            let k = Intrinsics::new(800.0, 780.0, 320.0, 240.0, 640, 480).unwrap();
            let view = CameraView::new(k, pose, None, "").unwrap();
            let c = pose.camera_center();
            // direction expressed in camera coordinates and mapped to world
            let d = pose.rotation().transpose() * Vec3::new(dx, dy, dz);
            let a = project(&view, &(c + d * s1)).unwrap();
            let b = project(&view, &(c + d * s2)).unwrap();
            prop_assert!((a.u - b.u).abs() < 1e-9 * a.u.abs().max(1.0));
            prop_assert!((a.v - b.v).abs() < 1e-9 * a.v.abs().max(1.0));
        }
    }
}
