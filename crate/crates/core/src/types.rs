//! Domain types shared across the crate.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Edge length, in voxels, of the cubes the diffusion prior works on.
pub const PATCH_DIM: usize = 32;
pub const PATCH_VOXELS: usize = PATCH_DIM * PATCH_DIM * PATCH_DIM;

/// A position (or direction) in scene units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Point3 {
        self * (1.0 / self.norm())
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }

    pub fn max_abs_diff(self, o: Point3) -> f64 {
        (self.x - o.x)
            .abs()
            .max((self.y - o.y).abs())
            .max((self.z - o.z).abs())
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// The five acoustic parameters the field emits at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ParameterSample<T = f64> {
    /// Attenuation per unit length, `>= 0`.
    pub attenuation: T,
    /// Reflection coefficient in `[0, 1]`.
    pub reflectance: T,
    /// Probability that the point lies on a tissue border, in `[0, 1]`.
    pub border_probability: T,
    /// Density of sub-resolution scatterers, in `[0, 1]`.
    pub scattering_density: T,
    /// Brightness of the scatterers, in `[0, 1]`.
    pub scattering_intensity: T,
}

impl<T: Real> ParameterSample<T> {
    pub fn zero() -> Self {
        Self::from_array([T::zero(); 5])
    }

    pub fn to_array(&self) -> [T; 5] {
        [
            self.attenuation,
            self.reflectance,
            self.border_probability,
            self.scattering_density,
            self.scattering_intensity,
        ]
    }

    pub fn from_array(a: [T; 5]) -> Self {
        ParameterSample {
            attenuation: a[0],
            reflectance: a[1],
            border_probability: a[2],
            scattering_density: a[3],
            scattering_intensity: a[4],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::validation(format!("non-finite parameter sample {self:?}")));
        }
        if self.attenuation < T::zero() {
            return Err(Error::validation("attenuation must be non-negative"));
        }
        for (name, v) in [
            ("reflectance", self.reflectance),
            ("border_probability", self.border_probability),
            ("scattering_density", self.scattering_density),
            ("scattering_intensity", self.scattering_intensity),
        ] {
            if v < T::zero() || v > T::one() {
                return Err(Error::validation(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParameterSample<U> {
        ParameterSample::from_array(self.to_array().map(|v| U::of(v.f64())))
    }
}

/// One scan line: `r(t) = o + t d` sampled at uniformly spaced depths.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanRay {
    pub origin: Point3,
    pub direction: Point3,
    pub depths: Vec<f64>,
    pub dt: f64,
}

impl ScanRay {
    pub fn point_at(&self, i: usize) -> Point3 {
        self.origin + self.direction * self.depths[i]
    }

    pub fn points(&self) -> impl Iterator<Item = Point3> + '_ {
        self.depths.iter().map(|&t| self.origin + self.direction * t)
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeGeometry {
    #[default]
    Linear,
    Fan,
}

fn default_frequency() -> f64 {
    1.0
}

fn default_intensity() -> f64 {
    1.0
}

/// Transducer description; serialised as `probe.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub n_scanlines: usize,
    pub n_samples: usize,
    pub depth_extent: f64,
    #[serde(default = "default_frequency")]
    pub frequency: f64,
    #[serde(default)]
    pub geometry: ProbeGeometry,
    #[serde(default)]
    pub fan_aperture: f64,
    #[serde(default = "default_intensity")]
    pub initial_intensity: f64,
    /// Lateral width of the transducer face; defaults to `depth_extent`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_width: Option<f64>,
}

impl ProbeConfig {
    pub fn linear(n_scanlines: usize, n_samples: usize, depth_extent: f64, face_width: f64) -> Self {
        ProbeConfig {
            n_scanlines,
            n_samples,
            depth_extent,
            frequency: 1.0,
            geometry: ProbeGeometry::Linear,
            fan_aperture: 0.0,
            initial_intensity: 1.0,
            face_width: Some(face_width),
        }
    }

    /// Spacing between consecutive samples along a scan line.
    pub fn dt(&self) -> f64 {
        self.depth_extent / self.n_samples as f64
    }

    pub fn face_width(&self) -> f64 {
        self.face_width.unwrap_or(self.depth_extent)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scanlines == 0 || self.n_samples == 0 {
            return Err(Error::validation("probe counts must be >= 1"));
        }
        if !(self.depth_extent > 0.0 && self.depth_extent.is_finite()) {
            return Err(Error::validation("probe depth_extent must be > 0"));
        }
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return Err(Error::validation("probe frequency must be > 0"));
        }
        if !(self.initial_intensity > 0.0 && self.initial_intensity.is_finite()) {
            return Err(Error::validation("probe initial_intensity must be > 0"));
        }
        if !(self.face_width() >= 0.0 && self.face_width().is_finite()) {
            return Err(Error::validation("probe face_width must be >= 0"));
        }
        if !(self.fan_aperture >= 0.0 && self.fan_aperture < std::f64::consts::PI) {
            return Err(Error::validation("probe fan_aperture must be in [0, pi)"));
        }
        Ok(())
    }
}

/// Rigid probe-to-world transform, row-major 4x4.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub matrix: [f64; 16],
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub const ORTHO_TOL: f64 = 1e-5;

    pub fn identity() -> Self {
        let mut m = [0.0; 16];
        m[0] = 1.0;
        m[5] = 1.0;
        m[10] = 1.0;
        m[15] = 1.0;
        Pose { matrix: m }
    }

    pub fn from_rotation_translation(r: [[f64; 3]; 3], t: Point3) -> Self {
        let mut m = [0.0; 16];
        for (i, row) in r.iter().enumerate() {
            m[i * 4..i * 4 + 3].copy_from_slice(row);
        }
        m[3] = t.x;
        m[7] = t.y;
        m[11] = t.z;
        m[15] = 1.0;
        Pose { matrix: m }
    }

    pub fn from_translation(t: Point3) -> Self {
        Self::from_rotation_translation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t)
    }

    /// Rotation of `angle` radians about a unit `axis` (Rodrigues), then translation.
    pub fn from_axis_angle(axis: Point3, angle: f64, t: Point3) -> Self {
        Self::from_rotation_translation(axis_angle_matrix(axis, angle), t)
    }

    pub fn from_matrix(matrix: [f64; 16]) -> Result<Self> {
        let p = Pose { matrix };
        p.validate()?;
        Ok(p)
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.matrix;
        [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]
    }

    pub fn translation(&self) -> Point3 {
        Point3::new(self.matrix[3], self.matrix[7], self.matrix[11])
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.matrix;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("pose contains non-finite entries"));
        }
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::validation("pose last row must be (0, 0, 0, 1)"));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > Self::ORTHO_TOL {
                    return Err(Error::validation(format!(
                        "pose rotation is not orthonormal (R^T R [{i}][{j}] = {dot})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn transform_point(&self, p: Point3) -> Point3 {
        self.transform_dir(p) + self.translation()
    }

    pub fn transform_dir(&self, d: Point3) -> Point3 {
        let m = &self.matrix;
        Point3::new(
            m[0] * d.x + m[1] * d.y + m[2] * d.z,
            m[4] * d.x + m[5] * d.y + m[6] * d.z,
            m[8] * d.x + m[9] * d.y + m[10] * d.z,
        )
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let a = &self.matrix;
        let b = &other.matrix;
        let mut m = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                m[i * 4 + j] = (0..4).map(|k| a[i * 4 + k] * b[k * 4 + j]).sum();
            }
        }
        Pose { matrix: m }
    }

    /// Interpolates translation linearly and rotation along the geodesic.
    pub fn interpolate(&self, other: &Pose, s: f64) -> Pose {
        let qa = quat_from_matrix(self.rotation());
        let mut qb = quat_from_matrix(other.rotation());
        let mut dot: f64 = qa.iter().zip(&qb).map(|(a, b)| a * b).sum();
        if dot < 0.0 {
            qb = qb.map(|v| -v);
            dot = -dot;
        }
        let q = if dot > 0.9995 {
            let q: Vec<f64> = qa.iter().zip(&qb).map(|(a, b)| a + s * (b - a)).collect();
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
        } else {
            let theta = dot.acos();
            let wa = ((1.0 - s) * theta).sin() / theta.sin();
            let wb = (s * theta).sin() / theta.sin();
            [
                wa * qa[0] + wb * qb[0],
                wa * qa[1] + wb * qb[1],
                wa * qa[2] + wb * qb[2],
                wa * qa[3] + wb * qb[3],
            ]
        };
        let t = self.translation() * (1.0 - s) + other.translation() * s;
        Pose::from_rotation_translation(quat_to_matrix(q), t)
    }
}

pub fn axis_angle_matrix(axis: Point3, angle: f64) -> [[f64; 3]; 3] {
    let a = axis.normalized();
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * a.x * a.x + c, t * a.x * a.y - s * a.z, t * a.x * a.z + s * a.y],
        [t * a.x * a.y + s * a.z, t * a.y * a.y + c, t * a.y * a.z - s * a.x],
        [t * a.x * a.z - s * a.y, t * a.y * a.z + s * a.x, t * a.z * a.z + c],
    ]
}

// (w, x, y, z)
fn quat_from_matrix(r: [[f64; 3]; 3]) -> [f64; 4] {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        [(r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s]
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        [(r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s]
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        [(r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

fn quat_to_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Row-major single-channel image with values in `[0, 1]`.
///
/// Rows run along depth (one per sample), columns across scan lines.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        GrayImage { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "image buffer of {} values for {height}x{width}",
                data.len()
            )));
        }
        Ok(GrayImage { height, width, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    pub fn column(&self, col: usize) -> Vec<f32> {
        (0..self.height).map(|r| self.get(r, col)).collect()
    }

    pub fn set_column(&mut self, col: usize, values: &[f32]) {
        for (r, &v) in values.iter().enumerate() {
            self.set(r, col, v);
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// One posed B-mode frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFrame {
    pub image: GrayImage,
    pub pose: Pose,
    pub frame_index: usize,
}

/// Train/test partition of frame indices.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub const TEST_STRIDE: usize = 8;

    /// Every eighth frame, starting at index 0, is held out for testing.
    pub fn every_eighth(n_frames: usize) -> Split {
        let (test, train) = (0..n_frames).partition(|i| i % Self::TEST_STRIDE == 0);
        Split { train, test }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepDataset {
    pub frames: Vec<ProbeFrame>,
    pub probe: ProbeConfig,
    pub split: Split,
}

impl SweepDataset {
    pub fn new(probe: ProbeConfig, mut frames: Vec<ProbeFrame>) -> Result<Self> {
        probe.validate()?;
        frames.sort_by_key(|f| f.frame_index);
        for (i, f) in frames.iter().enumerate() {
            if f.frame_index != i {
                return Err(Error::validation(format!(
                    "frame indices must be contiguous from 0, found {} at position {i}",
                    f.frame_index
                )));
            }
            if f.image.height != probe.n_samples || f.image.width != probe.n_scanlines {
                return Err(Error::validation(format!(
                    "frame {} is {}x{} but probe expects {}x{} (n_samples x n_scanlines)",
                    i, f.image.height, f.image.width, probe.n_samples, probe.n_scanlines
                )));
            }
            if !f.image.in_unit_range() {
                return Err(Error::validation(format!("frame {i} has pixels outside [0, 1]")));
            }
            f.pose.validate()?;
        }
        let split = Split::every_eighth(frames.len());
        if split.train.is_empty() {
            log::warn!("dataset has {} frame(s): no training frames remain after the test split", frames.len());
        }
        Ok(SweepDataset { frames, probe, split })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Copy with every `every`-th training frame (1-based) removed from
    /// the training split; the test split is unchanged.
    pub fn sparse_view(&self, every: usize) -> Result<Self> {
        if every < 2 {
            return Err(Error::validation("sparse-view stride must be >= 2"));
        }
        let mut out = self.clone();
        out.split.train =
            self.split.train.iter().enumerate().filter(|(k, _)| (k + 1) % every != 0).map(|(_, &i)| i).collect();
        Ok(out)
    }

    pub fn train_frames(&self) -> impl Iterator<Item = &ProbeFrame> {
        self.split.train.iter().map(|&i| &self.frames[i])
    }

    pub fn test_frames(&self) -> impl Iterator<Item = &ProbeFrame> {
        self.split.test.iter().map(|&i| &self.frames[i])
    }
}

/// An unconstrained 32³ scalar grid (noisy diffusion states live here).
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid(pub Vec<f32>);

impl VoxelGrid {
    pub fn zeros() -> Self {
        VoxelGrid(vec![0.0; PATCH_VOXELS])
    }

    pub fn filled(v: f32) -> Self {
        VoxelGrid(vec![v; PATCH_VOXELS])
    }

    pub fn from_vec(v: Vec<f32>) -> Result<Self> {
        if v.len() != PATCH_VOXELS {
            return Err(Error::Shape(format!("voxel grid needs {PATCH_VOXELS} values, got {}", v.len())));
        }
        Ok(VoxelGrid(v))
    }

    #[inline]
    pub fn index(x: usize, y: usize, z: usize) -> usize {
        (z * PATCH_DIM + y) * PATCH_DIM + x
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// A 32³ grid of values in `[0, 1]` placed in the scene.
///
/// Layout is `z`-major: `index = (z * 32 + y) * 32 + x`, with `z` growing
/// away from the skin plane.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelPatch {
    pub grid: Vec<f32>,
    pub world_origin: Point3,
    pub edge_length: f64,
}

impl VoxelPatch {
    pub fn new(grid: Vec<f32>, world_origin: Point3, edge_length: f64) -> Result<Self> {
        let p = VoxelPatch { grid, world_origin, edge_length };
        p.validate()?;
        Ok(p)
    }

    /// A unit patch at the origin, handy for prior-only work.
    pub fn unplaced(grid: Vec<f32>) -> Result<Self> {
        Self::new(grid, Point3::ZERO, 1.0)
    }

    pub fn filled(v: f32) -> Self {
        VoxelPatch { grid: vec![v; PATCH_VOXELS], world_origin: Point3::ZERO, edge_length: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.len() != PATCH_VOXELS {
            return Err(Error::Shape(format!(
                "voxel patch needs {PATCH_VOXELS} values, got {}",
                self.grid.len()
            )));
        }
        if !(self.edge_length > 0.0) {
            return Err(Error::validation("patch edge_length must be > 0"));
        }
        if self.grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("patch values must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn as_grid(&self) -> VoxelGrid {
        VoxelGrid(self.grid.clone())
    }

    /// World position of the centre of voxel `(x, y, z)`.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Point3 {
        let h = self.edge_length / PATCH_DIM as f64;
        self.world_origin
            + Point3::new((x as f64 + 0.5) * h, (y as f64 + 0.5) * h, (z as f64 + 0.5) * h)
    }

    /// All voxel centres in grid order.
    pub fn lattice(world_origin: Point3, edge_length: f64) -> Vec<Point3> {
        let h = edge_length / PATCH_DIM as f64;
        let mut pts = Vec::with_capacity(PATCH_VOXELS);
        for z in 0..PATCH_DIM {
            for y in 0..PATCH_DIM {
                for x in 0..PATCH_DIM {
                    pts.push(
                        world_origin
                            + Point3::new((x as f64 + 0.5) * h, (y as f64 + 0.5) * h, (z as f64 + 0.5) * h),
                    );
                }
            }
        }
        pts
    }
}
