//! Radar front end: resolution formulas, spherical cube synthesis, CA-CFAR
//! and bin-center geometry.
//!
//! Cube synthesis works in the spectral domain. Every in-FOV scatterer adds
//! a separable response `gain * rcs / r^4 * sinc^2(range) * D_el^2 * D_az^2`
//! where `D` is the normalized Dirichlet kernel of the virtual array
//! (`sin(N psi / 2) / (N sin(psi / 2))`, `psi = 2 pi d / lambda * (sin t - sin t0)`).
//! Responses are truncated to `kernel_extent` mainlobe widths per axis
//! (range: `c / 2B`, angle: `lambda / (N d)` in sine space), so sidelobes
//! beyond that distance are dropped. Each bin then receives i.i.d.
//! exponential noise with mean `noise_floor`.
//!
//! Synthesis is a gather over range slices: each slice sums the
//! contributions of scatterers in a canonical order, then draws its noise
//! from its own ChaCha stream. The cube is therefore bit-identical for any
//! thread count and any scatterer insertion order.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{cartesian_to_spherical, spherical_to_cartesian, Point3, PoseSE3};
use crate::par;
use crate::scene::Scene;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const CUBE_MAGIC: &[u8; 4] = b"SCUB";
const CUBE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadarConfig {
    /// Chirp bandwidth B, Hz.
    pub bandwidth: f64,
    /// Chirp duration T_c, s.
    pub chirp_duration: f64,
    /// Carrier frequency f_0, Hz.
    pub carrier_frequency: f64,
    /// Virtual array size along azimuth.
    pub array_azimuth: usize,
    /// Virtual array size along elevation.
    pub array_elevation: usize,
    /// Element spacing d, meters.
    pub element_spacing: f64,
    /// Mean of the exponential noise power per bin.
    pub noise_floor: f64,
    /// Scale applied to `rcs / r^4`.
    pub gain: f64,
    /// Cube shape (range, elevation, azimuth).
    pub dims: [usize; 3],
    pub range_min: f64,
    pub range_max: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_min_deg: f64,
    pub azimuth_max_deg: f64,
    /// Response truncation radius in mainlobe widths.
    pub kernel_extent: f64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        let carrier = 77e9;
        RadarConfig {
            // c / 2B matches the 36 m / 166 bin range spacing
            bandwidth: 6.912e8,
            chirp_duration: 50e-6,
            carrier_frequency: carrier,
            array_azimuth: 128,
            array_elevation: 64,
            element_spacing: SPEED_OF_LIGHT / carrier / 2.0,
            noise_floor: 1e-3,
            gain: 1e4,
            dims: [166, 94, 177],
            range_min: 4.0,
            range_max: 40.0,
            elevation_min_deg: -45.0,
            elevation_max_deg: 45.0,
            azimuth_min_deg: -25.0,
            azimuth_max_deg: 25.0,
            kernel_extent: 4.0,
        }
    }
}

impl RadarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) {
            return Err(Error::config("bandwidth must be positive"));
        }
        if !(self.carrier_frequency > 0.0) || !(self.element_spacing > 0.0) {
            return Err(Error::config("carrier frequency and element spacing must be positive"));
        }
        if self.array_azimuth == 0 || self.array_elevation == 0 {
            return Err(Error::config("virtual array sizes must be >= 1"));
        }
        if self.dims.contains(&0) {
            return Err(Error::config("cube dims must be non-zero"));
        }
        if !(self.noise_floor >= 0.0) || !(self.gain > 0.0) || !(self.kernel_extent > 0.0) {
            return Err(Error::config("noise floor >= 0, gain and kernel extent > 0"));
        }
        if !(self.range_max > self.range_min && self.range_min >= 0.0)
            || !(self.elevation_max_deg > self.elevation_min_deg)
            || !(self.azimuth_max_deg > self.azimuth_min_deg)
            || self.elevation_min_deg < -90.0
            || self.elevation_max_deg > 90.0
        {
            return Err(Error::config("invalid cube extents"));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    pub fn geometry(&self) -> CubeGeometry {
        CubeGeometry {
            dims: self.dims,
            range: (self.range_min, self.range_max),
            elevation: (
                self.elevation_min_deg.to_radians(),
                self.elevation_max_deg.to_radians(),
            ),
            azimuth: (
                self.azimuth_min_deg.to_radians(),
                self.azimuth_max_deg.to_radians(),
            ),
        }
    }

    /// First 8 bytes of the SHA-256 of the JSON encoding.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("radar config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Range resolution `c / (2B)`.
pub fn range_resolution(config: &RadarConfig) -> Result<f64> {
    if !(config.bandwidth > 0.0) {
        return Err(Error::config("bandwidth must be positive"));
    }
    Ok(SPEED_OF_LIGHT / (2.0 * config.bandwidth))
}

/// Angular resolution `lambda / (N_a d)` of a uniform linear array.
pub fn angular_resolution(wavelength: f64, n_elements: usize, spacing: f64) -> Result<f64> {
    if n_elements == 0 {
        return Err(Error::config("array size must be >= 1"));
    }
    if !(spacing > 0.0) || !(wavelength > 0.0) {
        return Err(Error::config("wavelength and spacing must be positive"));
    }
    Ok(wavelength / (n_elements as f64 * spacing))
}

pub fn azimuth_resolution(config: &RadarConfig) -> Result<f64> {
    angular_resolution(config.wavelength(), config.array_azimuth, config.element_spacing)
}

pub fn elevation_resolution(config: &RadarConfig) -> Result<f64> {
    angular_resolution(config.wavelength(), config.array_elevation, config.element_spacing)
}

/// Shape and extents of a spherical cube. Angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubeGeometry {
    pub dims: [usize; 3],
    pub range: (f64, f64),
    pub elevation: (f64, f64),
    pub azimuth: (f64, f64),
}

impl CubeGeometry {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> [f64; 3] {
        [
            (self.range.1 - self.range.0) / self.dims[0] as f64,
            (self.elevation.1 - self.elevation.0) / self.dims[1] as f64,
            (self.azimuth.1 - self.azimuth.0) / self.dims[2] as f64,
        ]
    }

    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn unravel(&self, lin: usize) -> [usize; 3] {
        let a = lin % self.dims[2];
        let e = (lin / self.dims[2]) % self.dims[1];
        let r = lin / (self.dims[1] * self.dims[2]);
        [r, e, a]
    }

    /// `(range, elevation, azimuth)` of a bin center.
    pub fn bin_center(&self, idx: [usize; 3]) -> (f64, f64, f64) {
        let s = self.spacing();
        (
            self.range.0 + (idx[0] as f64 + 0.5) * s[0],
            self.elevation.0 + (idx[1] as f64 + 0.5) * s[1],
            self.azimuth.0 + (idx[2] as f64 + 0.5) * s[2],
        )
    }

    /// Bin containing a spherical coordinate, if inside the cube.
    pub fn bin_of(&self, range: f64, elevation: f64, azimuth: f64) -> Option<[usize; 3]> {
        let s = self.spacing();
        let axis = |v: f64, lo: f64, step: f64, n: usize| -> Option<usize> {
            let f = ((v - lo) / step).floor();
            (f >= 0.0 && (f as usize) < n).then_some(f as usize)
        };
        Some([
            axis(range, self.range.0, s[0], self.dims[0])?,
            axis(elevation, self.elevation.0, s[1], self.dims[1])?,
            axis(azimuth, self.azimuth.0, s[2], self.dims[2])?,
        ])
    }

    pub fn contains(&self, range: f64, elevation: f64, azimuth: f64) -> bool {
        range >= self.range.0
            && range <= self.range.1
            && elevation >= self.elevation.0
            && elevation <= self.elevation.1
            && azimuth >= self.azimuth.0
            && azimuth <= self.azimuth.1
    }
}

/// One frame of echo power on the range x elevation x azimuth grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalCube {
    pub geometry: CubeGeometry,
    pub frame: u32,
    pub config_hash: u64,
    /// Row-major `[range][elevation][azimuth]`.
    pub power: Vec<f32>,
}

impl SphericalCube {
    pub fn zeros(geometry: CubeGeometry) -> Self {
        SphericalCube {
            geometry,
            frame: 0,
            config_hash: 0,
            power: vec![0.0; geometry.len()],
        }
    }

    pub fn get(&self, idx: [usize; 3]) -> f32 {
        self.power[self.geometry.linear(idx)]
    }

    pub fn set(&mut self, idx: [usize; 3], value: f32) {
        let i = self.geometry.linear(idx);
        self.power[i] = value;
    }

    pub fn argmax(&self) -> [usize; 3] {
        let mut best = 0;
        for (i, &p) in self.power.iter().enumerate() {
            if p > self.power[best] {
                best = i;
            }
        }
        self.geometry.unravel(best)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let g = &self.geometry;
        w.write_all(CUBE_MAGIC)?;
        w.write_u32::<LittleEndian>(CUBE_VERSION)?;
        for &d in &g.dims {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for v in [
            g.range.0,
            g.range.1,
            g.elevation.0,
            g.elevation.1,
            g.azimuth.0,
            g.azimuth.1,
        ] {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_u64::<LittleEndian>(self.config_hash)?;
        w.write_u32::<LittleEndian>(self.frame)?;
        let mut buf = Vec::with_capacity(self.power.len() * 4);
        for &p in &self.power {
            buf.write_f32::<LittleEndian>(p)?;
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CUBE_MAGIC {
            return Err(Error::format("not a spherical cube file"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CUBE_VERSION {
            return Err(Error::format(format!("unsupported cube version {version}")));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let mut ext = [0f64; 6];
        for e in &mut ext {
            *e = r.read_f64::<LittleEndian>()?;
        }
        let config_hash = r.read_u64::<LittleEndian>()?;
        let frame = r.read_u32::<LittleEndian>()?;
        let geometry = CubeGeometry {
            dims,
            range: (ext[0], ext[1]),
            elevation: (ext[2], ext[3]),
            azimuth: (ext[4], ext[5]),
        };
        let n = geometry.len();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let mut power = vec![0f32; n];
        (&bytes[..]).read_f32_into::<LittleEndian>(&mut power)?;
        if power.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::format("cube contains negative or non-finite power"));
        }
        Ok(SphericalCube {
            geometry,
            frame,
            config_hash,
            power,
        })
    }
}

/// Normalized Dirichlet kernel `sin(N psi/2) / (N sin(psi/2))`.
pub fn dirichlet(n: usize, psi: f64) -> f64 {
    let half = 0.5 * psi;
    let den = n as f64 * half.sin();
    if den.abs() < 1e-12 {
        // psi at a multiple of 2 pi: the kernel equals +-1 there
        let m = (psi / std::f64::consts::TAU).round() as i64;
        return if (n as i64 - 1) * m % 2 == 0 { 1.0 } else { -1.0 };
    }
    (n as f64 * half).sin() / den
}

/// Normalized `sin(pi x) / (pi x)`.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

struct AxisWindow {
    start: usize,
    weights: Vec<f64>,
}

struct Contribution {
    amplitude: f64,
    range: AxisWindow,
    elevation: AxisWindow,
    azimuth: AxisWindow,
}

fn window_from(weights: impl Iterator<Item = Option<f64>>) -> AxisWindow {
    let mut start = usize::MAX;
    let mut out = Vec::new();
    for (i, w) in weights.enumerate() {
        if let Some(w) = w {
            if start == usize::MAX {
                start = i;
            }
            // gaps cannot occur: the support is an interval on each axis
            out.push(w);
        }
    }
    AxisWindow {
        start: if start == usize::MAX { 0 } else { start },
        weights: out,
    }
}

#[allow(clippy::too_many_arguments)]
fn angle_window(n_bins: usize, lo: f64, step: f64, n_el: usize, spacing: f64, wavelength: f64, theta0: f64, extent: f64) -> AxisWindow {
    let width_u = wavelength / (n_el as f64 * spacing);
    let k = std::f64::consts::TAU * spacing / wavelength;
    let u0 = theta0.sin();
    window_from((0..n_bins).map(|i| {
        let theta = lo + (i as f64 + 0.5) * step;
        let du = theta.sin() - u0;
        if du.abs() <= extent * width_u {
            let d = dirichlet(n_el, k * du);
            Some(d * d)
        } else {
            None
        }
    }))
}

/// Synthesizes the echo power cube seen from `pose`.
pub fn synthesize_spherical_cube(
    scene: &Scene,
    pose: &PoseSE3,
    config: &RadarConfig,
    seed: u64,
) -> Result<SphericalCube> {
    config.validate()?;
    let geom = config.geometry();
    let s = geom.spacing();
    let wavelength = config.wavelength();
    let res = range_resolution(config)?;
    let extent = config.kernel_extent;

    let mut targets: Vec<(f64, f64, f64, f64)> = scene
        .scatterers
        .iter()
        .filter_map(|sc| {
            let (r, el, az) = cartesian_to_spherical(&pose.to_local(&sc.position));
            geom.contains(r, el, az).then_some((r, el, az, sc.rcs))
        })
        .collect();
    targets.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
            .then(a.3.total_cmp(&b.3))
    });

    let contributions: Vec<Contribution> = par::map_slice(&targets, |&(r, el, az, rcs)| {
        let range = window_from((0..geom.dims[0]).map(|i| {
            let rb = geom.range.0 + (i as f64 + 0.5) * s[0];
            let x = (rb - r) / res;
            (x.abs() <= extent).then(|| {
                let v = sinc(x);
                v * v
            })
        }));
        Contribution {
            amplitude: config.gain * rcs / r.powi(4),
            range,
            elevation: angle_window(
                geom.dims[1],
                geom.elevation.0,
                s[1],
                config.array_elevation,
                config.element_spacing,
                wavelength,
                el,
                extent,
            ),
            azimuth: angle_window(
                geom.dims[2],
                geom.azimuth.0,
                s[2],
                config.array_azimuth,
                config.element_spacing,
                wavelength,
                az,
                extent,
            ),
        }
    });

    // Bucket contributions by the range slices they touch, keeping canonical order.
    let mut by_slice: Vec<Vec<usize>> = vec![Vec::new(); geom.dims[0]];
    for (ci, c) in contributions.iter().enumerate() {
        for k in 0..c.range.weights.len() {
            by_slice[c.range.start + k].push(ci);
        }
    }

    let plane = geom.dims[1] * geom.dims[2];
    let mut power = vec![0f32; geom.len()];
    let noise_floor = config.noise_floor;
    par::for_each_chunk_mut(&mut power, plane, |ri, out| {
        let mut acc = vec![0f64; plane];
        for &ci in &by_slice[ri] {
            let c = &contributions[ci];
            let wr = c.amplitude * c.range.weights[ri - c.range.start];
            for (ei, we) in c.elevation.weights.iter().enumerate() {
                let row = (c.elevation.start + ei) * geom.dims[2] + c.azimuth.start;
                let scale = wr * we;
                for (ai, wa) in c.azimuth.weights.iter().enumerate() {
                    acc[row + ai] += scale * wa;
                }
            }
        }
        if noise_floor > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ri as u64);
            for v in acc.iter_mut() {
                let e: f64 = Exp1.sample(&mut rng);
                *v += noise_floor * e;
            }
        }
        for (o, v) in out.iter_mut().zip(&acc) {
            *o = *v as f32;
        }
    });

    Ok(SphericalCube {
        geometry: geom,
        frame: 0,
        config_hash: config.hash(),
        power,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfarConfig {
    /// Guard cells per side, per axis (range, elevation, azimuth).
    pub guard: [usize; 3],
    /// Training cells per side beyond the guard band, per axis.
    pub training: [usize; 3],
    /// Target probability of false alarm.
    pub pfa: f64,
}

impl Default for CfarConfig {
    fn default() -> Self {
        CfarConfig {
            guard: [2, 3, 5],
            training: [4, 4, 6],
            pfa: 1e-3,
        }
    }
}

impl CfarConfig {
    pub fn uniform(guard: usize, training: usize, pfa: f64) -> Self {
        CfarConfig {
            guard: [guard; 3],
            training: [training; 3],
            pfa,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub index: [usize; 3],
    pub power: f32,
}

/// CA-CFAR threshold multiplier for `n` training cells:
/// `n * (pfa^(-1/n) - 1)`.
pub fn cfar_alpha(n: usize, pfa: f64) -> f64 {
    let n = n as f64;
    n * (pfa.powf(-1.0 / n) - 1.0)
}

/// Cell-averaging CFAR over a 3D cube. The training ring is the window of
/// half-size `guard + training` minus the guard window of half-size
/// `guard`, both clamped at the cube boundary; the multiplier is computed
/// from the clamped training-cell count. Detections come out in
/// lexicographic bin order.
pub fn ca_cfar(cube: &SphericalCube, cfar: &CfarConfig) -> Result<Vec<Detection>> {
    let g = &cube.geometry;
    let dims = g.dims;
    if !(cfar.pfa > 0.0 && cfar.pfa < 1.0) {
        return Err(Error::config("CFAR pfa must lie in (0, 1)"));
    }
    for ax in 0..3 {
        let w = 2 * (cfar.guard[ax] + cfar.training[ax]) + 1;
        if w > dims[ax] {
            return Err(Error::config(format!(
                "CFAR window {w} exceeds cube dimension {} on axis {ax}",
                dims[ax]
            )));
        }
    }
    if cfar.training == [0; 3] {
        return Err(Error::config("CFAR needs at least one training cell"));
    }

    let (sr, se, sa) = (dims[0] + 1, dims[1] + 1, dims[2] + 1);
    let mut prefix = vec![0f64; sr * se * sa];
    let at = |r: usize, e: usize, a: usize| (r * se + e) * sa + a;
    for r in 1..sr {
        for e in 1..se {
            let mut row = 0f64;
            for a in 1..sa {
                row += cube.power[g.linear([r - 1, e - 1, a - 1])] as f64;
                prefix[at(r, e, a)] = row + prefix[at(r - 1, e, a)] + prefix[at(r, e - 1, a)]
                    - prefix[at(r - 1, e - 1, a)];
            }
        }
    }
    let box_sum = |lo: [usize; 3], hi: [usize; 3]| -> f64 {
        // inclusive lo, exclusive hi
        prefix[at(hi[0], hi[1], hi[2])] - prefix[at(lo[0], hi[1], hi[2])]
            - prefix[at(hi[0], lo[1], hi[2])]
            - prefix[at(hi[0], hi[1], lo[2])]
            + prefix[at(lo[0], lo[1], hi[2])]
            + prefix[at(lo[0], hi[1], lo[2])]
            + prefix[at(hi[0], lo[1], lo[2])]
            - prefix[at(lo[0], lo[1], lo[2])]
    };
    let clamp_box = |idx: [usize; 3], half: [usize; 3]| -> ([usize; 3], [usize; 3], usize) {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        let mut count = 1;
        for ax in 0..3 {
            lo[ax] = idx[ax].saturating_sub(half[ax]);
            hi[ax] = (idx[ax] + half[ax] + 1).min(dims[ax]);
            count *= hi[ax] - lo[ax];
        }
        (lo, hi, count)
    };
    let outer_half = [
        cfar.guard[0] + cfar.training[0],
        cfar.guard[1] + cfar.training[1],
        cfar.guard[2] + cfar.training[2],
    ];

    let slices: Vec<Vec<Detection>> = par::map_range(dims[0], |r| {
        let mut found = Vec::new();
        for e in 0..dims[1] {
            for a in 0..dims[2] {
                let idx = [r, e, a];
                let (olo, ohi, ocount) = clamp_box(idx, outer_half);
                let (ilo, ihi, icount) = clamp_box(idx, cfar.guard);
                let n = ocount - icount;
                if n == 0 {
                    continue;
                }
                let ring = box_sum(olo, ohi) - box_sum(ilo, ihi);
                let p = cube.power[g.linear(idx)];
                let threshold = (cfar.pfa.powf(-1.0 / n as f64) - 1.0) * ring;
                if p as f64 > threshold {
                    found.push(Detection { index: idx, power: p });
                }
            }
        }
        found
    });
    Ok(slices.into_iter().flatten().collect())
}

/// Cartesian positions of bin centers.
pub fn spherical_bins_to_points(bins: &[[usize; 3]], geometry: &CubeGeometry) -> Result<Vec<Point3>> {
    bins.iter()
        .map(|&b| {
            if (0..3).any(|ax| b[ax] >= geometry.dims[ax]) {
                return Err(Error::input(format!("bin {b:?} outside cube {:?}", geometry.dims)));
            }
            let (r, el, az) = geometry.bin_center(b);
            Ok(spherical_to_cartesian(r, el, az))
        })
        .collect()
}
