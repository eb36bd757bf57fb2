use rand::Rng;

use crate::geometry::{Mat3, Vec3};

pub fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let q = nalgebra::Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    *nalgebra::UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .matrix()
}

pub fn random_vec(rng: &mut impl Rng, half: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-half..half),
        rng.random_range(-half..half),
        rng.random_range(-half..half),
    )
}
