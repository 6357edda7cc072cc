//! Ellipsoidal keep-out zones and workspace bounds.

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{quat_mul, quat_conj, State};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Keep-out ellipsoid `(p - c)' P (p - c) < 1`, inflated by a safety factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidObstacle {
    pub center: Vector3<f64>,
    /// Positive-definite shape matrix (1/m^2).
    pub shape: Matrix3<f64>,
    /// Semi-axes are scaled by this factor (`shape / sf^2`).
    pub safety_factor: f64,
}

impl EllipsoidObstacle {
    pub fn new(center: Vector3<f64>, shape: Matrix3<f64>, safety_factor: f64) -> Result<Self> {
        let obs = Self {
            center,
            shape,
            safety_factor,
        };
        obs.validate()?;
        Ok(obs)
    }

    /// Ellipsoid with semi-axes `semi_axes` along the body axes of the
    /// scalar-last unit quaternion `q`.
    pub fn from_semi_axes(
        center: Vector3<f64>,
        semi_axes: Vector3<f64>,
        q: Vector4<f64>,
        safety_factor: f64,
    ) -> Result<Self> {
        if semi_axes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "semi-axes must be positive, got {:?}",
                semi_axes.as_slice()
            )));
        }
        let n = q.norm();
        if !(n.is_finite() && (n - 1.0).abs() < 1e-6) {
            return Err(Error::InvalidArgument("obstacle orientation must be a unit quaternion".into()));
        }
        let rot = rotation_matrix(&(q / n));
        let d = Matrix3::from_diagonal(&semi_axes.map(|a| 1.0 / (a * a)));
        let shape = rot * d * rot.transpose();
        Self::new(center, 0.5 * (shape + shape.transpose()), safety_factor)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite obstacle center".into()));
        }
        if (self.shape - self.shape.transpose()).amax() > 1e-10 * self.shape.amax().max(1.0)
            || self.shape.cholesky().is_none()
        {
            return Err(Error::InvalidArgument("obstacle shape must be symmetric positive definite".into()));
        }
        if !(self.safety_factor.is_finite() && self.safety_factor >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "safety factor must be at least 1, got {}",
                self.safety_factor
            )));
        }
        Ok(())
    }

    pub fn effective_shape(&self) -> Matrix3<f64> {
        self.shape / (self.safety_factor * self.safety_factor)
    }

    /// Quadratic form value; below one means inside.
    pub fn level(&self, pos: &Vector3<f64>) -> f64 {
        let d = pos - self.center;
        d.dot(&(self.effective_shape() * d))
    }

    /// Smallest semi-axis of the inflated ellipsoid.
    pub fn min_semi_axis(&self) -> f64 {
        let max_eig = self.effective_shape().symmetric_eigenvalues().max();
        1.0 / max_eig.sqrt()
    }

    pub fn with_safety_factor(&self, safety_factor: f64) -> Self {
        Self {
            safety_factor,
            ..self.clone()
        }
    }
}

fn rotation_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for i in 0..3 {
        let mut e = Vector4::zeros();
        e[i] = 1.0;
        let rotated = quat_mul(&quat_mul(q, &e), &quat_conj(q));
        m.set_column(i, &Vector3::new(rotated[0], rotated[1], rotated[2]));
    }
    m
}

/// Closed axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        if (0..3).any(|i| !(min[i].is_finite() && max[i].is_finite() && min[i] < max[i])) {
            return Err(Error::InvalidArgument(format!(
                "box bounds need min < max per axis, got {:?} / {:?}",
                min.as_slice(),
                max.as_slice()
            )));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn center(&self) -> Vector3<f64> {
        0.5 * (self.min + self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub obstacles: Vec<EllipsoidObstacle>,
    pub bounds: Aabb,
}

impl World {
    pub fn new(obstacles: Vec<EllipsoidObstacle>, bounds: Aabb) -> Result<Self> {
        for o in &obstacles {
            o.validate()?;
        }
        Ok(Self { obstacles, bounds })
    }

    pub fn empty(bounds: Aabb) -> Self {
        Self {
            obstacles: Vec::new(),
            bounds,
        }
    }

    /// Copy with every obstacle's safety factor replaced.
    pub fn with_safety_factor(&self, safety_factor: f64) -> Self {
        Self {
            obstacles: self
                .obstacles
                .iter()
                .map(|o| o.with_safety_factor(safety_factor))
                .collect(),
            bounds: self.bounds,
        }
    }

    pub fn position_clear(&self, pos: &Vector3<f64>) -> bool {
        self.obstacles.iter().all(|o| point_clear(pos, o))
    }

    /// True if the position is inside the box and outside every obstacle.
    pub fn position_free(&self, pos: &Vector3<f64>) -> bool {
        self.bounds.contains(pos) && self.position_clear(pos)
    }
}

pub fn point_clear(pos: &Vector3<f64>, obs: &EllipsoidObstacle) -> bool {
    obs.level(pos) >= 1.0
}

pub fn state_in_bounds(x: &State, world: &World) -> bool {
    world.bounds.contains(&x.r)
}

/// A quarter of the thinnest inflated obstacle.
pub fn default_resolution(world: &World) -> f64 {
    world
        .obstacles
        .iter()
        .map(|o| 0.25 * o.min_semi_axis())
        .reduce(f64::min)
        .unwrap_or(0.05)
}

/// Earliest blocked interpolation sample of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    /// Segment start state index.
    pub state_index: usize,
    /// Sample index within the segment (0 is the start state itself).
    pub sample_index: usize,
    pub obstacle: usize,
    pub position: Vector3<f64>,
}

/// Check a trajectory's positions, linearly interpolated so consecutive test
/// points are at most `resolution` apart.
///
/// Each segment is split into a power-of-two number of pieces, so the samples
/// at a finer resolution always include those at a coarser one.
pub fn segment_clear(traj: &Trajectory, world: &World, resolution: f64) -> Result<Option<Violation>> {
    if traj.states.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidArgument(format!("resolution must be positive, got {resolution}")));
    }
    let positions: Vec<Vector3<f64>> = traj.states.iter().map(|s| s.r).collect();
    Ok(path_violation(&positions, world, resolution))
}

pub(crate) fn path_violation(
    positions: &[Vector3<f64>],
    world: &World,
    resolution: f64,
) -> Option<Violation> {
    let check = |p: &Vector3<f64>| world.obstacles.iter().position(|o| !point_clear(p, o));
    if let Some(obstacle) = check(&positions[0]) {
        return Some(Violation {
            state_index: 0,
            sample_index: 0,
            obstacle,
            position: positions[0],
        });
    }
    for (k, pair) in positions.windows(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        let ratio = (b - a).norm() / resolution;
        let mut samples = 1usize;
        while (samples as f64) < ratio {
            samples *= 2;
        }
        for j in 1..=samples {
            let p = a + (b - a) * (j as f64 / samples as f64);
            if let Some(obstacle) = check(&p) {
                return Some(Violation {
                    state_index: k,
                    sample_index: j,
                    obstacle,
                    position: p,
                });
            }
        }
    }
    None
}

/// True when every state is in bounds and the interpolated path misses all obstacles.
pub fn trajectory_free(traj: &Trajectory, world: &World, resolution: f64) -> bool {
    traj.states.iter().all(|s| state_in_bounds(s, world))
        && matches!(segment_clear(traj, world, resolution), Ok(None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::identity_quaternion;
    use proptest::prelude::*;

    fn sphere(center: Vector3<f64>, radius: f64) -> EllipsoidObstacle {
        EllipsoidObstacle::from_semi_axes(center, Vector3::repeat(radius), identity_quaternion(), 1.0).unwrap()
    }

    fn line(a: Vector3<f64>, b: Vector3<f64>) -> Trajectory {
        Trajectory::new(0.0, 1.0, vec![State::at_rest(a, identity_quaternion()), State::at_rest(b, identity_quaternion())], vec![Default::default()]).unwrap()
    }

    fn unit_world(obstacles: Vec<EllipsoidObstacle>) -> World {
        World::new(obstacles, Aabb::new(Vector3::repeat(-5.0), Vector3::repeat(5.0)).unwrap()).unwrap()
    }

    #[test]
    fn point_cases() {
        let c = Vector3::new(1.0, 2.0, 3.0);
        let o = EllipsoidObstacle::new(c, Matrix3::identity(), 1.0).unwrap();
        assert!(!point_clear(&c, &o));
        assert!(point_clear(&(c + Vector3::new(1.0, 0.0, 0.0)), &o));
        let (a, b, cc) = (0.3, 0.5, 0.7);
        let o = EllipsoidObstacle::new(c, Matrix3::from_diagonal(&Vector3::new(1.0 / (a * a), 1.0 / (b * b), 1.0 / (cc * cc))), 1.0).unwrap();
        assert!(point_clear(&(c + Vector3::new(a + 1e-9, 0.0, 0.0)), &o));
        assert!(!point_clear(&(c + Vector3::new(a - 1e-9, 0.0, 0.0)), &o));
    }

    #[test]
    fn rejects_bad_obstacles() {
        assert!(EllipsoidObstacle::new(Vector3::zeros(), Matrix3::identity(), 0.5).is_err());
        assert!(EllipsoidObstacle::new(Vector3::zeros(), -Matrix3::identity(), 1.0).is_err());
        assert!(Aabb::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn rotated_semi_axes() {
        // 90 degrees about z maps the body x semi-axis onto world y.
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let o = EllipsoidObstacle::from_semi_axes(Vector3::zeros(), Vector3::new(2.0, 0.5, 0.5), Vector4::new(0.0, 0.0, h, h), 1.0).unwrap();
        assert!(!point_clear(&Vector3::new(0.0, 1.9, 0.0), &o));
        assert!(point_clear(&Vector3::new(1.9, 0.0, 0.0), &o));
        assert!((o.min_semi_axis() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn interpolation_catches_tunneling() {
        let world = unit_world(vec![sphere(Vector3::zeros(), 0.1)]);
        let traj = line(Vector3::new(-1.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0));
        // Waypoints alone are clear.
        assert!(traj.states.iter().all(|s| world.position_clear(&s.r)));
        let v = segment_clear(&traj, &world, default_resolution(&world)).unwrap().unwrap();
        assert_eq!(v.state_index, 0);
        assert!(v.position.norm() < 0.1);
        // Resolution wider than the obstacle still samples the midpoint here,
        // so shift the line so that sparse samples straddle it.
        let traj = line(Vector3::new(-1.0, 0.0, 0.0), Vector3::new(1.2, 0.0, 0.0));
        assert!(segment_clear(&traj, &world, 2.2).unwrap().is_none());
        assert!(segment_clear(&traj, &world, 0.025).unwrap().is_some());
    }

    #[test]
    fn bounds_are_closed() {
        let world = unit_world(vec![]);
        let at = |p: Vector3<f64>| State::at_rest(p, identity_quaternion());
        assert!(state_in_bounds(&at(Vector3::zeros()), &world));
        assert!(state_in_bounds(&at(Vector3::new(5.0, 0.0, -5.0)), &world));
        assert!(!state_in_bounds(&at(Vector3::new(0.0, 5.0001, 0.0)), &world));
    }

    #[test]
    fn empty_trajectory_rejected() {
        let traj = Trajectory {
            t0: 0.0,
            dt: 1.0,
            states: vec![],
            inputs: vec![],
        };
        assert!(segment_clear(&traj, &unit_world(vec![]), 0.1).is_err());
        assert!(segment_clear(&line(Vector3::zeros(), Vector3::zeros()), &unit_world(vec![]), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn translation_invariance(px in -2.0..2.0f64, py in -2.0..2.0f64, pz in -2.0..2.0f64,
                                  tx in -3.0..3.0f64, ty in -3.0..3.0f64, tz in -3.0..3.0f64) {
            let o = EllipsoidObstacle::from_semi_axes(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.4, 0.9, 0.6), Vector4::new(0.1, 0.2, 0.3, 0.9).normalize(), 1.2).unwrap();
            let p = Vector3::new(px, py, pz);
            let t = Vector3::new(tx, ty, tz);
            let moved = EllipsoidObstacle { center: o.center + t, ..o.clone() };
            prop_assert!((o.level(&p) - moved.level(&(p + t))).abs() < 1e-9);
        }

        #[test]
        fn safety_factor_monotone(px in -2.0..2.0f64, py in -2.0..2.0f64, pz in -2.0..2.0f64, sf in 1.0..3.0f64, extra in 0.0..2.0f64) {
            let o = EllipsoidObstacle::from_semi_axes(Vector3::zeros(), Vector3::new(0.4, 0.9, 0.6), identity_quaternion(), sf).unwrap();
            let p = Vector3::new(px, py, pz);
            if !point_clear(&p, &o) {
                prop_assert!(!point_clear(&p, &o.with_safety_factor(sf + extra)));
            }
        }

        #[test]
        fn finer_resolution_is_stricter(ax in -2.0..2.0f64, ay in -2.0..2.0f64, bx in -2.0..2.0f64, by in -2.0..2.0f64, r in 0.01..0.5f64) {
            let world = unit_world(vec![sphere(Vector3::new(0.3, 0.1, 0.0), 0.35)]);
            let traj = line(Vector3::new(ax, ay, 0.0), Vector3::new(bx, by, 0.0));
            let fine = segment_clear(&traj, &world, r / 3.0).unwrap();
            let coarse = segment_clear(&traj, &world, r).unwrap();
            // Nested sampling: every coarse sample is also a fine sample.
            if fine.is_none() {
                prop_assert!(coarse.is_none());
            }
        }
    }
}
