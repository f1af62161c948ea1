//! Procedural agricultural scenes, drone trajectories and LiDAR ground truth.
//!
//! A scene is a bag of point scatterers: a jittered ground lattice,
//! ellipsoidal tree crowns on trunks, vertical poles on a line and sagging
//! wires strung between consecutive pole tops. Everything is a pure
//! function of `(config, seed)`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ClassLabel, FovConfig, Point3, PoseSE3, SemanticPointCloud};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub position: Point3,
    /// Radar cross-section, linear power units.
    pub rcs: f64,
    pub class: ClassLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scatterers: Vec<Scatterer>,
    pub extent_min: Point3,
    pub extent_max: Point3,
}

impl Scene {
    pub fn new(scatterers: Vec<Scatterer>, extent_min: Point3, extent_max: Point3) -> Self {
        Scene {
            scatterers,
            extent_min,
            extent_max,
        }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.extent_min[i] && p[i] <= self.extent_max[i])
    }

    pub fn count(&self, class: ClassLabel) -> usize {
        self.scatterers.iter().filter(|s| s.class == class).count()
    }

    /// Pole top positions, i.e. the highest scatterer of each pole column.
    pub fn pole_tops(&self) -> Vec<Point3> {
        let mut tops: Vec<Point3> = Vec::new();
        for s in self.scatterers.iter().filter(|s| s.class == ClassLabel::Pole) {
            match tops
                .iter_mut()
                .find(|t| (t.x - s.position.x).abs() < 1e-9 && (t.y - s.position.y).abs() < 1e-9)
            {
                Some(t) if t.z < s.position.z => *t = s.position,
                Some(_) => {}
                None => tops.push(s.position),
            }
        }
        tops
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RcsConfig {
    pub ground: f64,
    pub tree: f64,
    pub pole: f64,
    pub wire: f64,
}

impl Default for RcsConfig {
    fn default() -> Self {
        RcsConfig {
            ground: 1.0,
            tree: 0.5,
            pole: 0.3,
            wire: 0.05,
        }
    }
}

impl RcsConfig {
    pub fn of(&self, class: ClassLabel) -> f64 {
        match class {
            ClassLabel::Ground => self.ground,
            ClassLabel::Tree => self.tree,
            ClassLabel::Pole => self.pole,
            ClassLabel::Wire => self.wire,
            ClassLabel::Free => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub extent_min: [f64; 3],
    pub extent_max: [f64; 3],
    pub ground: bool,
    pub ground_spacing: f64,
    pub ground_roughness: f64,
    pub tree_count: usize,
    /// Horizontal semi-axis of a crown.
    pub tree_radius: f64,
    /// Vertical semi-axis of a crown.
    pub crown_half_height: f64,
    /// Height of the crown center above ground.
    pub crown_center_height: f64,
    pub tree_scatterers: usize,
    pub pole_count: usize,
    pub pole_height: f64,
    pub pole_spacing: f64,
    pub pole_point_spacing: f64,
    /// Number of wire spans; each joins two consecutive poles.
    pub wire_count: usize,
    pub wire_sag: f64,
    pub wire_point_spacing: f64,
    pub rcs: RcsConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            extent_min: [-10.0, -30.0, -1.0],
            extent_max: [90.0, 30.0, 15.0],
            ground: true,
            ground_spacing: 0.5,
            ground_roughness: 0.05,
            tree_count: 12,
            tree_radius: 1.5,
            crown_half_height: 1.5,
            crown_center_height: 3.5,
            tree_scatterers: 120,
            pole_count: 6,
            pole_height: 8.0,
            pole_spacing: 12.0,
            pole_point_spacing: 0.25,
            wire_count: 5,
            wire_sag: 0.4,
            wire_point_spacing: 0.25,
            rcs: RcsConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let span: Vec<f64> = (0..3).map(|i| self.extent_max[i] - self.extent_min[i]).collect();
        if span.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("scene extent must be positive on every axis"));
        }
        if self.extent_min[2] > 0.0 || self.extent_max[2] < 0.0 {
            return Err(Error::config("scene extent must contain ground level z = 0"));
        }
        let rcs = &self.rcs;
        if [rcs.ground, rcs.tree, rcs.pole, rcs.wire].iter().any(|&v| !(v > 0.0)) {
            return Err(Error::config("rcs values must be positive"));
        }
        if self.ground && !(self.ground_spacing > 0.0 && self.ground_roughness >= 0.0) {
            return Err(Error::config("ground spacing must be positive, roughness >= 0"));
        }
        if self.tree_count > 0 {
            if !(self.tree_radius > 0.0 && self.crown_half_height > 0.0) {
                return Err(Error::config("tree dimensions must be positive"));
            }
            if 2.0 * self.tree_radius > span[0].min(span[1])
                || self.crown_center_height + self.crown_half_height > self.extent_max[2]
                || self.crown_center_height < self.crown_half_height
            {
                return Err(Error::config("scene extent cannot contain a tree"));
            }
        }
        if self.pole_count > 0 {
            if !(self.pole_height > 0.0 && self.pole_point_spacing > 0.0) {
                return Err(Error::config("pole dimensions must be positive"));
            }
            if self.pole_height > self.extent_max[2] {
                return Err(Error::config("scene extent cannot contain a pole"));
            }
            if self.pole_count > 1
                && (!(self.pole_spacing > 0.0)
                    || (self.pole_count - 1) as f64 * self.pole_spacing > span[0])
            {
                return Err(Error::config("scene extent cannot contain the pole line"));
            }
        }
        if self.wire_count > 0 {
            if self.pole_count < self.wire_count + 1 {
                return Err(Error::config(format!(
                    "{} wire spans need at least {} poles",
                    self.wire_count,
                    self.wire_count + 1
                )));
            }
            if !(self.wire_point_spacing > 0.0 && self.wire_sag >= 0.0) {
                return Err(Error::config("wire spacing must be positive, sag >= 0"));
            }
            if self.pole_height - self.wire_sag < self.extent_min[2] {
                return Err(Error::config("wire sag leaves the scene extent"));
            }
        }
        Ok(())
    }
}

pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = Vector3::from(config.extent_min);
    let hi = Vector3::from(config.extent_max);
    let clamp = |p: Point3| -> Point3 {
        Vector3::new(
            p.x.clamp(lo.x, hi.x),
            p.y.clamp(lo.y, hi.y),
            p.z.clamp(lo.z, hi.z),
        )
    };
    let mut out = Vec::new();
    let rcs = config.rcs;

    if config.ground {
        let step = config.ground_spacing;
        let nx = ((hi.x - lo.x) / step).floor() as usize + 1;
        let ny = ((hi.y - lo.y) / step).floor() as usize + 1;
        for i in 0..nx {
            for j in 0..ny {
                let jx: f64 = rng.random_range(-0.25..0.25) * step;
                let jy: f64 = rng.random_range(-0.25..0.25) * step;
                let jz: f64 = rng.sample::<f64, _>(StandardNormal) * config.ground_roughness;
                let p = Vector3::new(lo.x + i as f64 * step + jx, lo.y + j as f64 * step + jy, jz);
                out.push(Scatterer {
                    position: clamp(p),
                    rcs: rcs.ground,
                    class: ClassLabel::Ground,
                });
            }
        }
    }

    for _ in 0..config.tree_count {
        let r = config.tree_radius;
        let cx = rng.random_range(lo.x + r..=hi.x - r);
        let cy = rng.random_range(lo.y + r..=hi.y - r);
        let cz = config.crown_center_height;
        let hz = config.crown_half_height;
        let crown = config.tree_scatterers.saturating_sub(config.tree_scatterers / 6);
        let mut placed = 0;
        while placed < crown {
            let u: [f64; 3] = [
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            ];
            if u[0] * u[0] + u[1] * u[1] + u[2] * u[2] > 1.0 {
                continue;
            }
            let p = Vector3::new(cx + u[0] * r, cy + u[1] * r, cz + u[2] * hz);
            out.push(Scatterer {
                position: clamp(p),
                rcs: rcs.tree,
                class: ClassLabel::Tree,
            });
            placed += 1;
        }
        let trunk = config.tree_scatterers - crown;
        let trunk_top = cz - hz;
        for k in 0..trunk {
            let z = trunk_top * (k as f64 + 0.5) / trunk as f64;
            out.push(Scatterer {
                position: clamp(Vector3::new(cx, cy, z)),
                rcs: rcs.tree,
                class: ClassLabel::Tree,
            });
        }
    }

    if config.pole_count > 0 {
        let line_len = (config.pole_count - 1) as f64 * config.pole_spacing;
        let x0 = if hi.x - lo.x > line_len {
            rng.random_range(lo.x..=hi.x - line_len)
        } else {
            lo.x
        };
        // Keep the line near the sensor's boresight so it is actually seen.
        let y_half = (hi.y - lo.y) / 2.0;
        let y_mid = (hi.y + lo.y) / 2.0;
        let y = y_mid + rng.random_range(-0.25..=0.25) * y_half;
        let n_pts = (config.pole_height / config.pole_point_spacing).floor() as usize + 1;
        let mut tops = Vec::with_capacity(config.pole_count);
        for k in 0..config.pole_count {
            let x = x0 + k as f64 * config.pole_spacing;
            for m in 0..n_pts {
                let z = (m as f64 * config.pole_point_spacing).min(config.pole_height);
                out.push(Scatterer {
                    position: clamp(Vector3::new(x, y, z)),
                    rcs: rcs.pole,
                    class: ClassLabel::Pole,
                });
            }
            if (n_pts - 1) as f64 * config.pole_point_spacing < config.pole_height {
                out.push(Scatterer {
                    position: clamp(Vector3::new(x, y, config.pole_height)),
                    rcs: rcs.pole,
                    class: ClassLabel::Pole,
                });
            }
            tops.push(Vector3::new(x, y, config.pole_height));
        }
        for span in 0..config.wire_count {
            let a = tops[span];
            let b = tops[span + 1];
            let len = (b - a).norm();
            // interior points only; the endpoints coincide with pole tops
            let n = ((len / config.wire_point_spacing).ceil() as usize).max(2);
            for m in 1..n {
                let t = m as f64 / n as f64;
                let mut p = a + (b - a) * t;
                p.z -= 4.0 * config.wire_sag * t * (1.0 - t);
                out.push(Scatterer {
                    position: clamp(p),
                    rcs: rcs.wire,
                    class: ClassLabel::Wire,
                });
            }
        }
    }

    Ok(Scene::new(out, lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub start: [f64; 3],
    pub start_yaw: f64,
    /// Forward speed, m/s.
    pub speed: f64,
    /// Seconds between frames (5 Hz by default).
    pub frame_period: f64,
    pub frame_count: usize,
    /// Bound on |yaw rate|, rad/s.
    pub max_yaw_rate: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            start: [0.0, 0.0, 6.0],
            start_yaw: 0.0,
            speed: 5.0,
            frame_period: 0.2,
            frame_count: 5,
            max_yaw_rate: 0.1,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count == 0 {
            return Err(Error::config("frame_count must be >= 1"));
        }
        if !(self.frame_period > 0.0) || !(self.speed >= 0.0) || !(self.max_yaw_rate >= 0.0) {
            return Err(Error::config("trajectory period must be > 0, speed and yaw rate >= 0"));
        }
        Ok(())
    }
}

/// Level flight at constant speed; the yaw rate is a seeded sinusoid bounded
/// by `max_yaw_rate`, so consecutive positions are exactly `speed * period` apart.
pub fn generate_trajectory(config: &TrajectoryConfig, seed: u64) -> Result<Vec<PoseSE3>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let omega: f64 = rng.random_range(0.3..0.8);
    let dt = config.frame_period;
    let step = config.speed * dt;
    let mut pos = Vector3::from(config.start);
    let mut yaw = config.start_yaw;
    let mut poses = Vec::with_capacity(config.frame_count);
    for k in 0..config.frame_count {
        let t = k as f64 * dt;
        poses.push(PoseSE3::from_yaw(yaw, pos, t));
        pos += Vector3::new(yaw.cos(), yaw.sin(), 0.0) * step;
        yaw += config.max_yaw_rate * (omega * t + phase).sin() * dt;
    }
    Ok(poses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub fov: FovConfig,
    /// Standard deviation of the per-axis position jitter, meters. Zero disables it.
    pub jitter_sigma: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            fov: FovConfig::default(),
            jitter_sigma: 0.02,
        }
    }
}

/// Samples the scene in the sensor frame of `pose`, keeping only points
/// (after jitter) inside the field of view.
pub fn render_lidar(
    scene: &Scene,
    pose: &PoseSE3,
    config: &LidarConfig,
    seed: u64,
) -> SemanticPointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for s in &scene.scatterers {
        let mut p = pose.to_local(&s.position);
        if config.jitter_sigma > 0.0 {
            for v in p.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += z * config.jitter_sigma;
            }
        }
        if config.fov.contains(&p) {
            points.push(p);
            labels.push(s.class);
        }
    }
    SemanticPointCloud { points, labels }
}
