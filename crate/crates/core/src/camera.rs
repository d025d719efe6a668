//! Camera poses on a sphere around the origin, pose distributions and ray
//! bundles.
//!
//! Image-plane coordinates are normalized to `[-1, 1]` for every resolution.
//! Column `x` of an `N`-pixel grid sits at `u = -1 + offset + 2x/N`; the
//! standard grid uses pixel centers (`offset = 1/N`). Higher-resolution grids
//! that must line up with a lower one reuse the lower grid's offset, so that
//! every `f`-th sample coincides with a low-resolution pixel center.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn point_on_ray(o: Vec3, d: Vec3, t: f64) -> Vec3 {
    [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
}

/// Yaw is wrapped into `[-π, π)` and snapped to a `2^-40` grid so that poses
/// differing by whole turns produce bit-identical rays.
pub fn canonical_yaw(phi: f64) -> f64 {
    const Q: f64 = 1_099_511_627_776.0; // 2^40
    let wrapped = (phi + PI).rem_euclid(2.0 * PI) - PI;
    (wrapped * Q).round() / Q
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Pitch in radians; positive looks down from above.
    pub theta: f64,
    /// Yaw in radians.
    pub phi: f64,
    pub radius: f64,
    /// Field of view in degrees.
    pub fov: f64,
}

impl CameraPose {
    pub fn new(theta: f64, phi: f64, radius: f64, fov: f64) -> Result<Self> {
        let pose = Self {
            theta,
            phi,
            radius,
            fov,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(arg(format!("camera radius must be positive, got {}", self.radius)));
        }
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(arg(format!("fov must lie in (0, 180) degrees, got {}", self.fov)));
        }
        if !(self.theta.is_finite() && self.theta.abs() < PI / 2.0) {
            return Err(arg(format!("pitch must lie in (-π/2, π/2), got {}", self.theta)));
        }
        if !self.phi.is_finite() {
            return Err(arg("yaw must be finite"));
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        let phi = canonical_yaw(self.phi);
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        [
            self.radius * ct * sp,
            self.radius * st,
            self.radius * ct * cp,
        ]
    }

    pub fn frame(&self) -> CameraFrame {
        let origin = self.position();
        let forward = normalize(scale(origin, -1.0));
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        CameraFrame {
            origin,
            forward,
            right,
            up,
            tan_half: (self.fov.to_radians() / 2.0).tan(),
        }
    }
}

/// Orthonormal look-at frame of a pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraFrame {
    pub origin: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub tan_half: f64,
}

impl CameraFrame {
    /// Unit direction through normalized image-plane point `(u, v)`, `v` up.
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        let a = u * self.tan_half;
        let b = v * self.tan_half;
        normalize([
            self.forward[0] + a * self.right[0] + b * self.up[0],
            self.forward[1] + a * self.right[1] + b * self.up[1],
            self.forward[2] + a * self.right[2] + b * self.up[2],
        ])
    }

    /// Image-plane coordinates and camera-space depth of a world point, if it
    /// lies in front of the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let rel = [p[0] - self.origin[0], p[1] - self.origin[1], p[2] - self.origin[2]];
        let z = dot(rel, self.forward);
        if z <= 1e-9 {
            return None;
        }
        let u = dot(rel, self.right) / (z * self.tan_half);
        let v = dot(rel, self.up) / (z * self.tan_half);
        Some((u, v, z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistKind {
    Gaussian,
    Uniform,
}

/// Pitch/yaw distribution; each pair is `(mean, std)` for gaussian or
/// `(low, high)` for uniform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDistribution {
    pub kind: DistKind,
    pub pitch: (f64, f64),
    pub yaw: (f64, f64),
}

impl Default for PoseDistribution {
    fn default() -> Self {
        Self {
            kind: DistKind::Gaussian,
            pitch: (0.0, 0.15),
            yaw: (0.0, 0.3),
        }
    }
}

impl PoseDistribution {
    pub fn validate(&self) -> Result<()> {
        for (name, (a, b)) in [("pitch", self.pitch), ("yaw", self.yaw)] {
            match self.kind {
                DistKind::Gaussian if b < 0.0 => {
                    return Err(arg(format!("{name} std must be nonnegative")))
                }
                DistKind::Uniform if a > b => {
                    return Err(arg(format!("{name} uniform low exceeds high")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, (a, b): (f64, f64), rng: &mut R) -> f64 {
        match self.kind {
            DistKind::Gaussian => {
                let z: f64 = rng.sample(StandardNormal);
                a + b * z
            }
            DistKind::Uniform => {
                let u: f64 = rng.random();
                a + (b - a) * u
            }
        }
    }

    /// Returns `(pitch, yaw)`.
    pub fn sample_angles<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let pitch = self.draw(self.pitch, rng);
        let yaw = self.draw(self.yaw, rng);
        (pitch, yaw)
    }

    /// Closed interval holding (essentially) all mass for each angle.
    pub fn support(&self) -> ((f64, f64), (f64, f64)) {
        let span = |(a, b): (f64, f64)| match self.kind {
            DistKind::Gaussian => (a - 3.0 * b, a + 3.0 * b),
            DistKind::Uniform => (a, b),
        };
        (span(self.pitch), span(self.yaw))
    }

    pub fn mean(&self) -> (f64, f64) {
        match self.kind {
            DistKind::Gaussian => (self.pitch.0, self.yaw.0),
            DistKind::Uniform => (
                0.5 * (self.pitch.0 + self.pitch.1),
                0.5 * (self.yaw.0 + self.yaw.1),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub fov: f64,
    pub radius: f64,
    pub bounding_radius: f64,
    pub near_eps: f64,
    pub distribution: PoseDistribution,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            fov: 12.0,
            radius: 1.0,
            bounding_radius: 1.0,
            near_eps: 1e-3,
            distribution: PoseDistribution::default(),
        }
    }
}

impl CameraConfig {
    pub fn pose(&self, theta: f64, phi: f64) -> CameraPose {
        CameraPose {
            theta,
            phi,
            radius: self.radius,
            fov: self.fov,
        }
    }

    pub fn mean_pose(&self) -> CameraPose {
        let (t, p) = self.distribution.mean();
        self.pose(t, p)
    }
}

pub fn sample_pose<R: Rng + ?Sized>(cfg: &CameraConfig, rng: &mut R) -> CameraPose {
    let (theta, phi) = cfg.distribution.sample_angles(rng);
    let limit = PI / 2.0 - 1e-3;
    cfg.pose(theta.clamp(-limit, limit), phi)
}

/// Rays for an `N×N` pixel grid in row-major order (row 0 at the top).
#[derive(Clone, Debug, PartialEq)]
pub struct RayBundle {
    pub resolution: usize,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub near: Vec<f64>,
    pub far: Vec<f64>,
    /// `false` for rays that miss the foreground sphere.
    pub hits: Vec<bool>,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Sub-bundle with the listed rays, in order.
    pub fn select(&self, idx: &[usize]) -> RayBundle {
        RayBundle {
            resolution: 0,
            origins: idx.iter().map(|&i| self.origins[i]).collect(),
            directions: idx.iter().map(|&i| self.directions[i]).collect(),
            near: idx.iter().map(|&i| self.near[i]).collect(),
            far: idx.iter().map(|&i| self.far[i]).collect(),
            hits: idx.iter().map(|&i| self.hits[i]).collect(),
        }
    }
}

/// Entry and exit distances of `o + t·d` through a sphere at the origin.
pub fn sphere_interval(o: Vec3, d: Vec3, radius: f64) -> Option<(f64, f64)> {
    let b = dot(o, d);
    let c = dot(o, o) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some((-b - s, -b + s))
}

/// Grid coordinate of column/row `k` on an `n`-sample axis.
pub fn grid_coord(k: usize, n: usize, offset: f64) -> f64 {
    -1.0 + offset + 2.0 * k as f64 / n as f64
}

pub fn generate_rays(pose: &CameraPose, resolution: usize, cfg: &CameraConfig) -> Result<RayBundle> {
    if resolution == 0 {
        return Err(arg("resolution must be at least 1"));
    }
    generate_rays_with_offset(pose, resolution, 1.0 / resolution as f64, cfg)
}

pub fn generate_rays_with_offset(
    pose: &CameraPose,
    resolution: usize,
    offset: f64,
    cfg: &CameraConfig,
) -> Result<RayBundle> {
    pose.validate()?;
    let frame = pose.frame();
    let n = resolution;
    let mut bundle = RayBundle {
        resolution: n,
        origins: Vec::with_capacity(n * n),
        directions: Vec::with_capacity(n * n),
        near: Vec::with_capacity(n * n),
        far: Vec::with_capacity(n * n),
        hits: Vec::with_capacity(n * n),
    };
    for y in 0..n {
        let v = -grid_coord(y, n, offset);
        for x in 0..n {
            let u = grid_coord(x, n, offset);
            let d = frame.direction(u, v);
            let o = frame.origin;
            let (near, far, hit) = match sphere_interval(o, d, cfg.bounding_radius) {
                Some((t0, t1)) if t1 > cfg.near_eps => (t0.max(cfg.near_eps), t1, true),
                _ => {
                    // Closest approach stands in for a zero-length segment.
                    let t = (-dot(o, d)).max(cfg.near_eps);
                    (t, t + cfg.near_eps, false)
                }
            };
            bundle.origins.push(o);
            bundle.directions.push(d);
            bundle.near.push(near);
            bundle.far.push(far);
            bundle.hits.push(hit);
        }
    }
    Ok(bundle)
}

/// Low- and high-resolution bundles whose aligned pixels share rays.
///
/// `index_map[i]` is the high-resolution pixel that sees the same ray as
/// low-resolution pixel `i`.
pub fn corresponding_rays(
    pose: &CameraPose,
    low: usize,
    high: usize,
    cfg: &CameraConfig,
) -> Result<(RayBundle, RayBundle, Vec<usize>)> {
    let factor = upsample_factor(low, high)?;
    let offset = 1.0 / low as f64;
    let lo = generate_rays_with_offset(pose, low, offset, cfg)?;
    let hi = generate_rays_with_offset(pose, high, offset, cfg)?;
    Ok((lo, hi, aligned_index_map(low, high, factor)))
}

pub fn aligned_index_map(low: usize, high: usize, factor: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(low * low);
    for y in 0..low {
        for x in 0..low {
            map.push((factor * y) * high + factor * x);
        }
    }
    map
}

/// `high / low` when it is a power of two, else an argument error.
pub fn upsample_factor(low: usize, high: usize) -> Result<usize> {
    if low == 0 || high < low || high % low != 0 || !(high / low).is_power_of_two() {
        return Err(arg(format!(
            "{high} is not a power-of-two multiple of {low}"
        )));
    }
    Ok(high / low)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_distributions_return_their_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = CameraConfig::default();
        cfg.distribution = PoseDistribution {
            kind: DistKind::Uniform,
            pitch: (0.3, 0.3),
            yaw: (0.3, 0.3),
        };
        let p = sample_pose(&cfg, &mut rng);
        assert_eq!((p.theta, p.phi), (0.3, 0.3));
        cfg.distribution = PoseDistribution {
            kind: DistKind::Gaussian,
            pitch: (0.0, 0.0),
            yaw: (0.0, 0.0),
        };
        let p = sample_pose(&cfg, &mut rng);
        assert_eq!((p.theta, p.phi), (0.0, 0.0));
    }

    #[test]
    fn invalid_distributions_are_rejected() {
        let d = PoseDistribution {
            kind: DistKind::Uniform,
            pitch: (1.0, 0.0),
            yaw: (0.0, 1.0),
        };
        assert!(d.validate().is_err());
        let d = PoseDistribution {
            kind: DistKind::Gaussian,
            pitch: (0.0, -1.0),
            yaw: (0.0, 1.0),
        };
        assert!(d.validate().is_err());
    }

    #[test]
    fn single_ray_looks_at_origin() {
        let cfg = CameraConfig::default();
        let pose = CameraPose::new(0.4, -1.1, 1.0, 12.0).unwrap();
        let b = generate_rays(&pose, 1, &cfg).unwrap();
        let want = normalize(scale(pose.position(), -1.0));
        for k in 0..3 {
            assert!((b.directions[0][k] - want[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn opposite_yaws_give_negated_center_rays() {
        let cfg = CameraConfig::default();
        let a = generate_rays(&cfg.pose(0.0, 0.0), 1, &cfg).unwrap();
        let b = generate_rays(&cfg.pose(0.0, PI), 1, &cfg).unwrap();
        for k in 0..3 {
            assert!((a.directions[0][k] + b.directions[0][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn center_ray_interval_matches_sphere_quadratic() {
        let cfg = CameraConfig::default();
        let b = generate_rays(&cfg.pose(0.2, 0.7), 1, &cfg).unwrap();
        assert!((b.near[0] - 1e-3).abs() < 1e-12);
        assert!((b.far[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_resolution_is_rejected() {
        let cfg = CameraConfig::default();
        assert!(generate_rays(&cfg.pose(0.0, 0.0), 0, &cfg).is_err());
    }

    #[test]
    fn distant_camera_marks_missing_rays() {
        let cfg = CameraConfig {
            radius: 4.0,
            fov: 90.0,
            ..Default::default()
        };
        let b = generate_rays(&cfg.pose(0.0, 0.0), 8, &cfg).unwrap();
        assert!(b.hits.iter().any(|h| !h));
        assert!(b.hits.iter().any(|h| *h));
        for i in 0..b.len() {
            assert!(b.near[i] > 0.0 && b.near[i] < b.far[i]);
        }
    }

    #[test]
    fn correspondence_maps_small_grids() {
        let cfg = CameraConfig::default();
        let pose = cfg.pose(0.1, 0.2);
        let (_, _, map) = corresponding_rays(&pose, 2, 4, &cfg).unwrap();
        assert_eq!(map, vec![0, 2, 8, 10]);
        let (lo, hi, map) = corresponding_rays(&pose, 4, 4, &cfg).unwrap();
        assert_eq!(map, (0..16).collect::<Vec<_>>());
        assert_eq!(lo, hi);
        assert!(corresponding_rays(&pose, 3, 4, &cfg).is_err());
        assert!(corresponding_rays(&pose, 2, 6, &cfg).is_err());
    }

    #[test]
    fn full_turn_of_yaw_is_bit_identical() {
        let cfg = CameraConfig::default();
        for phi in [0.3, -2.0, 1.0e-3, 3.0] {
            let a = generate_rays(&cfg.pose(0.1, phi), 4, &cfg).unwrap();
            let b = generate_rays(&cfg.pose(0.1, phi + 2.0 * PI), 4, &cfg).unwrap();
            assert_eq!(a, b, "phi = {phi}");
        }
    }

    #[test]
    fn fov_changes_extent_not_center() {
        let cfg = CameraConfig::default();
        let narrow = generate_rays(&CameraPose::new(0.1, 0.5, 1.0, 10.0).unwrap(), 3, &cfg).unwrap();
        let wide = generate_rays(&CameraPose::new(0.1, 0.5, 1.0, 40.0).unwrap(), 3, &cfg).unwrap();
        for k in 0..3 {
            assert!((narrow.directions[4][k] - wide.directions[4][k]).abs() < 1e-12);
        }
        let f = normalize(scale(CameraPose::new(0.1, 0.5, 1.0, 10.0).unwrap().position(), -1.0));
        assert!(dot(narrow.directions[0], f) > dot(wide.directions[0], f));
    }

    #[test]
    fn projection_inverts_ray_generation() {
        let pose = CameraPose::new(0.3, -0.4, 1.5, 30.0).unwrap();
        let frame = pose.frame();
        let d = frame.direction(0.25, -0.5);
        let p = point_on_ray(frame.origin, d, 1.2);
        let (u, v, _) = frame.project(p).unwrap();
        assert!((u - 0.25).abs() < 1e-12 && (v + 0.5).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn directions_are_unit_and_regeneration_is_identical(
                theta in -1.4f64..1.4, phi in -10.0f64..10.0, res in 1usize..9
            ) {
                let cfg = CameraConfig::default();
                let pose = cfg.pose(theta, phi);
                let a = generate_rays(&pose, res, &cfg).unwrap();
                let b = generate_rays(&pose, res, &cfg).unwrap();
                prop_assert_eq!(&a, &b);
                for d in &a.directions {
                    prop_assert!((norm(*d) - 1.0).abs() < 1e-6);
                }
                for i in 0..a.len() {
                    prop_assert!(a.near[i] > 0.0 && a.near[i] < a.far[i]);
                }
            }
        }
    }
}
