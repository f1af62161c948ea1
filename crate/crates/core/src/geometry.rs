//! Shared geometric types: semantic labels, SE(3) poses, labeled point
//! clouds, spherical coordinates and the sensor field of view.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Number of semantic classes, including `Free`.
pub const NUM_CLASSES: usize = 5;

/// Semantic class. Codes are stable on disk and ordered by rarity so that
/// "larger code wins" is the dilation precedence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum ClassLabel {
    Free = 0,
    Ground = 1,
    Tree = 2,
    Pole = 3,
    Wire = 4,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Free,
        ClassLabel::Ground,
        ClassLabel::Tree,
        ClassLabel::Pole,
        ClassLabel::Wire,
    ];

    /// Classes that take part in evaluation.
    pub const EVALUATED: [ClassLabel; 4] = [
        ClassLabel::Ground,
        ClassLabel::Tree,
        ClassLabel::Pole,
        ClassLabel::Wire,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Free => "free",
            ClassLabel::Ground => "ground",
            ClassLabel::Tree => "tree",
            ClassLabel::Pole => "pole",
            ClassLabel::Wire => "wire",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(code) = s.parse::<u8>() {
            return Self::from_code(code).ok_or_else(|| Error::input(format!("class code {code}")));
        }
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::input(format!("unknown class {s:?}")))
    }
}

/// Rigid transform from the sensor frame to the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub timestamp: f64,
}

const ORTHO_TOL: f64 = 1e-9;

impl PoseSE3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, timestamp: f64) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(err <= ORTHO_TOL) {
            return Err(Error::input(format!("rotation not orthonormal (err {err:e})")));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::input(format!("rotation determinant {det}")));
        }
        if !translation.iter().all(|v| v.is_finite()) || !timestamp.is_finite() {
            return Err(Error::input("non-finite pose"));
        }
        Ok(PoseSE3 {
            rotation,
            translation,
            timestamp,
        })
    }

    pub fn identity() -> Self {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            timestamp: 0.0,
        }
    }

    /// Level pose rotated by `yaw` radians about +z.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>, timestamp: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        PoseSE3 {
            rotation,
            translation,
            timestamp,
        }
    }

    pub fn to_world(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn to_local(&self, p: &Point3) -> Point3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Maps a point expressed in the `from` sensor frame into the `to`
    /// sensor frame, i.e. applies `to⁻¹ ∘ from`.
    pub fn relative(from: &PoseSE3, to: &PoseSE3, p: &Point3) -> Point3 {
        to.to_local(&from.to_world(p))
    }
}

/// Writes one pose per line: `timestamp tx ty tz r00 r01 ... r22`.
pub fn write_poses<W: Write>(mut w: W, poses: &[PoseSE3]) -> Result<()> {
    writeln!(w, "# timestamp tx ty tz r00 r01 r02 r10 r11 r12 r20 r21 r22")?;
    for p in poses {
        write!(w, "{}", p.timestamp)?;
        for v in p.translation.iter() {
            write!(w, " {v}")?;
        }
        for r in 0..3 {
            for c in 0..3 {
                write!(w, " {}", p.rotation[(r, c)])?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_poses<R: BufRead>(r: R) -> Result<Vec<PoseSE3>> {
    let mut poses = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(format!("pose line {}: {e}", lineno + 1)))?;
        if vals.len() != 13 {
            return Err(Error::format(format!(
                "pose line {}: expected 13 values, got {}",
                lineno + 1,
                vals.len()
            )));
        }
        let t = Vector3::new(vals[1], vals[2], vals[3]);
        let rot = Matrix3::from_row_slice(&vals[4..13]);
        poses.push(PoseSE3::new(rot, t, vals[0])?);
    }
    Ok(poses)
}

/// Cartesian coordinates of a spherical point: `x = r cos(el) cos(az)`,
/// `y = r cos(el) sin(az)`, `z = r sin(el)`. Angles in radians.
pub fn spherical_to_cartesian(range: f64, elevation: f64, azimuth: f64) -> Point3 {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Vector3::new(range * ce * ca, range * ce * sa, range * se)
}

/// Inverse of [`spherical_to_cartesian`]: returns `(range, elevation, azimuth)`.
pub fn cartesian_to_spherical(p: &Point3) -> (f64, f64, f64) {
    let r = p.norm();
    if r == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let el = (p.z / r).clamp(-1.0, 1.0).asin();
    let az = p.y.atan2(p.x);
    (r, el, az)
}

/// Sensor frustum in spherical coordinates. Angles are half-widths in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FovConfig {
    pub range_min: f64,
    pub range_max: f64,
    pub elevation_max_deg: f64,
    pub azimuth_max_deg: f64,
}

impl Default for FovConfig {
    fn default() -> Self {
        FovConfig {
            range_min: 4.0,
            range_max: 40.0,
            elevation_max_deg: 45.0,
            azimuth_max_deg: 25.0,
        }
    }
}

impl FovConfig {
    pub fn contains(&self, p: &Point3) -> bool {
        let (r, el, az) = cartesian_to_spherical(p);
        r >= self.range_min
            && r <= self.range_max
            && el.abs() <= self.elevation_max_deg.to_radians()
            && az.abs() <= self.azimuth_max_deg.to_radians()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range_min >= 0.0 && self.range_max > self.range_min) {
            return Err(Error::config("fov range must satisfy 0 <= min < max"));
        }
        if !(self.elevation_max_deg > 0.0 && self.elevation_max_deg <= 90.0) {
            return Err(Error::config("fov elevation half-width must be in (0, 90]"));
        }
        if !(self.azimuth_max_deg > 0.0 && self.azimuth_max_deg <= 180.0) {
            return Err(Error::config("fov azimuth half-width must be in (0, 180]"));
        }
        Ok(())
    }
}

/// Labeled point cloud; labels never contain NaN-positioned points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SemanticPointCloud {
    pub points: Vec<Point3>,
    pub labels: Vec<ClassLabel>,
}

impl SemanticPointCloud {
    pub fn new(points: Vec<Point3>, labels: Vec<ClassLabel>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        if points.iter().any(|p| p.iter().any(|v| v.is_nan())) {
            return Err(Error::input("NaN coordinate in point cloud"));
        }
        Ok(SemanticPointCloud { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points carrying `label`.
    pub fn points_of(&self, label: ClassLabel) -> Vec<Point3> {
        self.points
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == label)
            .map(|(p, _)| *p)
            .collect()
    }

    /// Text format: a `# x y z label` header, then one `x y z code` line per point.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# x y z label")?;
        for (p, l) in self.points.iter().zip(&self.labels) {
            writeln!(w, "{} {} {} {}", p.x, p.y, p.z, l.code())?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 4 {
                return Err(Error::format(format!(
                    "cloud line {}: expected `x y z label`",
                    lineno + 1
                )));
            }
            let mut xyz = [0.0; 3];
            for (v, t) in xyz.iter_mut().zip(&toks[..3]) {
                *v = t
                    .parse()
                    .map_err(|e| Error::format(format!("cloud line {}: {e}", lineno + 1)))?;
            }
            points.push(Vector3::from(xyz));
            labels.push(toks[3].parse()?);
        }
        SemanticPointCloud::new(points, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    #[test]
    fn class_codes_are_stable() {
        let codes: Vec<u8> = ClassLabel::ALL.iter().map(|c| c.code()).collect();
        assert_eq!(codes, vec![0, 1, 2, 3, 4]);
        assert_eq!("wire".parse::<ClassLabel>().unwrap(), ClassLabel::Wire);
        assert_eq!("2".parse::<ClassLabel>().unwrap(), ClassLabel::Tree);
        assert!("7".parse::<ClassLabel>().is_err());
    }

    #[test]
    fn pose_validation() {
        let bad = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(PoseSE3::new(bad, Vector3::zeros(), 0.0).is_err());
        let reflect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(PoseSE3::new(reflect, Vector3::zeros(), 0.0).is_err());
        let p = PoseSE3::from_yaw(0.3, Vector3::new(1.0, 2.0, 3.0), 0.2);
        assert!(PoseSE3::new(p.rotation, p.translation, p.timestamp).is_ok());
    }

    #[test]
    fn spherical_axis_cases() {
        let p = spherical_to_cartesian(10.0, 0.0, 0.0);
        assert!((p - Vector3::new(10.0, 0.0, 0.0)).norm() < 1e-12);
        let p = spherical_to_cartesian(10.0, std::f64::consts::FRAC_PI_2, 0.0);
        assert!((p - Vector3::new(0.0, 0.0, 10.0)).norm() < 1e-12);
        let p = spherical_to_cartesian(10.0, 30f64.to_radians(), FRAC_PI_4);
        assert!((p.x - 6.123724356957945).abs() < 1e-9);
        assert!((p.y - 6.123724356957945).abs() < 1e-9);
        assert!((p.z - 5.0).abs() < 1e-9);
        let (r, el, az) = cartesian_to_spherical(&p);
        assert!((r - 10.0).abs() < 1e-12);
        assert!((el - 30f64.to_radians()).abs() < 1e-12);
        assert!((az - FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn pose_file_round_trip() {
        let poses = vec![
            PoseSE3::from_yaw(0.1, Vector3::new(1.0, -2.0, 6.0), 0.0),
            PoseSE3::from_yaw(-0.7, Vector3::new(1.5, -2.25, 6.0), 0.2),
        ];
        let mut buf = Vec::new();
        write_poses(&mut buf, &poses).unwrap();
        let back = read_poses(&buf[..]).unwrap();
        assert_eq!(back, poses);
    }

    #[test]
    fn cloud_text_round_trip_and_errors() {
        let cloud = SemanticPointCloud::new(
            vec![Vector3::new(1.0, 2.5, -0.125), Vector3::new(0.1, 0.2, 0.3)],
            vec![ClassLabel::Ground, ClassLabel::Wire],
        )
        .unwrap();
        let mut buf = Vec::new();
        cloud.write_text(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("# x y z label\n"));
        assert_eq!(SemanticPointCloud::read_text(&buf[..]).unwrap(), cloud);
        assert!(SemanticPointCloud::read_text(&b"1 2 3\n"[..]).is_err());
        assert!(SemanticPointCloud::new(vec![Vector3::zeros()], vec![]).is_err());
        assert!(
            SemanticPointCloud::new(vec![Vector3::new(f64::NAN, 0.0, 0.0)], vec![ClassLabel::Tree])
                .is_err()
        );
    }

    #[test]
    fn fov_membership() {
        let fov = FovConfig::default();
        assert!(fov.contains(&Vector3::new(10.0, 0.0, 0.0)));
        assert!(!fov.contains(&Vector3::new(50.0, 0.0, 0.0)));
        assert!(!fov.contains(&Vector3::new(3.0, 0.0, 0.0)));
        assert!(!fov.contains(&Vector3::new(10.0, 10.0, 0.0)));
        assert!(!fov.contains(&Vector3::new(10.0, 0.0, 10.5)));
    }
}
