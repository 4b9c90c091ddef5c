//! Procedural layered phantoms, skin-anchored patch extraction and sweep
//! simulation.
//!
//! Volumes live in an axis-aligned box whose `z = min.z` face is the skin.
//! Continuous positions read the voxel grids by trilinear interpolation
//! between voxel centres; anything outside the box is transparent (all-zero
//! parameters).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ParameterField;
use crate::geometry::frame_rays;
use crate::real::Real;
use crate::render::{PsfConfig, RayDraws, RenderConfig, SamplingMode};
use crate::rng;
use crate::types::{
    GrayImage, ParameterSample, Point3, Pose, ProbeConfig, ProbeFrame, SweepDataset, VoxelPatch, PATCH_DIM,
    PATCH_VOXELS,
};

/// Shape and placement of a regular grid. Values sit at cell centres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    pub min: Point3,
    pub max: Point3,
}

impl GridGeometry {
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn extent(&self) -> Point3 {
        self.max - self.min
    }

    pub fn cell_size(&self) -> Point3 {
        let e = self.extent();
        Point3::new(e.x / self.dims[0] as f64, e.y / self.dims[1] as f64, e.z / self.dims[2] as f64)
    }

    pub fn center(&self, x: usize, y: usize, z: usize) -> Point3 {
        let h = self.cell_size();
        self.min + Point3::new((x as f64 + 0.5) * h.x, (y as f64 + 0.5) * h.y, (z as f64 + 0.5) * h.z)
    }

    pub fn contains(&self, p: Point3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// Eight `(index, weight)` pairs for trilinear interpolation, or `None`
    /// outside the box. Near the faces the nearest centres are used.
    pub fn trilinear(&self, p: Point3) -> Option<[(usize, f64); 8]> {
        if !self.contains(p) {
            return None;
        }
        let h = self.cell_size();
        let rel = [(p.x - self.min.x) / h.x - 0.5, (p.y - self.min.y) / h.y - 0.5, (p.z - self.min.z) / h.z - 0.5];
        let mut lo = [0usize; 3];
        let mut fr = [0.0f64; 3];
        for k in 0..3 {
            let n = self.dims[k];
            let u = rel[k].clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n.saturating_sub(2));
            lo[k] = i;
            fr[k] = if n == 1 { 0.0 } else { u - i as f64 };
        }
        let mut out = [(0usize, 0.0f64); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let x = (lo[0] + dx).min(self.dims[0] - 1);
            let y = (lo[1] + dy).min(self.dims[1] - 1);
            let z = (lo[2] + dz).min(self.dims[2] - 1);
            let w = (if dx == 1 { fr[0] } else { 1.0 - fr[0] })
                * (if dy == 1 { fr[1] } else { 1.0 - fr[1] })
                * (if dz == 1 { fr[2] } else { 1.0 - fr[2] });
            *slot = (self.index(x, y, z), w);
        }
        Some(out)
    }
}

/// One scalar channel on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    pub geometry: GridGeometry,
    pub data: Vec<f64>,
}

impl ScalarVolume {
    pub fn filled(geometry: GridGeometry, v: f64) -> Self {
        ScalarVolume { geometry, data: vec![v; geometry.len()] }
    }

    pub fn sample(&self, p: Point3) -> f64 {
        match self.geometry.trilinear(p) {
            Some(w) => w.iter().map(|&(i, a)| a * self.data[i]).sum(),
            None => 0.0,
        }
    }
}

/// Five co-registered parameter grids.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVolume {
    pub geometry: GridGeometry,
    /// `[α, β, ρ_b, ρ_s, φ]`, each in grid order.
    pub channels: [Vec<f64>; 5],
}

pub const CH_ATTENUATION: usize = 0;
pub const CH_REFLECTANCE: usize = 1;
pub const CH_BORDER: usize = 2;
pub const CH_SCATTER_DENSITY: usize = 3;
pub const CH_SCATTER_INTENSITY: usize = 4;

impl ParameterVolume {
    pub fn empty(geometry: GridGeometry) -> Self {
        let z = vec![0.0; geometry.len()];
        ParameterVolume { geometry, channels: [z.clone(), z.clone(), z.clone(), z.clone(), z] }
    }

    pub fn sample(&self, p: Point3) -> ParameterSample<f64> {
        match self.geometry.trilinear(p) {
            Some(w) => {
                let mut v = [0.0; 5];
                for (k, ch) in self.channels.iter().enumerate() {
                    v[k] = w.iter().map(|&(i, a)| a * ch[i]).sum();
                }
                ParameterSample::from_array(v)
            }
            None => ParameterSample::zero(),
        }
    }

    pub fn channel(&self, k: usize) -> ScalarVolume {
        ScalarVolume { geometry: self.geometry, data: self.channels[k].clone() }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, ch) in self.channels.iter().enumerate() {
            if ch.len() != self.geometry.len() {
                return Err(Error::Shape(format!("channel {k} has {} voxels", ch.len())));
            }
            let ok = if k == CH_ATTENUATION {
                ch.iter().all(|v| v.is_finite() && *v >= 0.0)
            } else {
                ch.iter().all(|v| (0.0..=1.0).contains(v))
            };
            if !ok {
                return Err(Error::validation(format!("channel {k} out of range")));
            }
        }
        Ok(())
    }
}

impl<T: Real> ParameterField<T> for ParameterVolume {
    fn sample_points(&self, points: &[Point3]) -> Result<Vec<ParameterSample<T>>> {
        Ok(points.iter().map(|&p| self.sample(p).cast()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    /// `[top, bottom)` measured from the skin.
    pub depth: [f64; 2],
    pub attenuation: f64,
    pub scattering_density: f64,
    pub scattering_intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interface {
    pub depth: f64,
    pub reflectance: f64,
    pub border_probability: f64,
}

/// Ellipsoid whose voxels take the given parameters; unset ones are kept.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inclusion {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    #[serde(default)]
    pub attenuation: Option<f64>,
    #[serde(default)]
    pub reflectance: Option<f64>,
    #[serde(default)]
    pub border_probability: Option<f64>,
    #[serde(default)]
    pub scattering_density: Option<f64>,
    #[serde(default)]
    pub scattering_intensity: Option<f64>,
}

impl Inclusion {
    fn overrides(&self) -> [Option<f64>; 5] {
        [
            self.attenuation,
            self.reflectance,
            self.border_probability,
            self.scattering_density,
            self.scattering_intensity,
        ]
    }

    fn contains(&self, p: Point3) -> bool {
        let d = [p.x - self.center[0], p.y - self.center[1], p.z - self.center[2]];
        (0..3).map(|k| (d[k] / self.radii[k]).powi(2)).sum::<f64>() <= 1.0
    }
}

fn default_resolution() -> usize {
    64
}
fn default_min() -> [f64; 3] {
    [-1.0, -1.0, 0.0]
}
fn default_max() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

/// JSON-serialisable description of a layered phantom.
///
/// ```json
/// {
///   "resolution": 64,
///   "bounds_min": [-1, -1, 0], "bounds_max": [1, 1, 1],
///   "layers": [{"depth": [0, 0.3], "attenuation": 0.4,
///               "scattering_density": 0.6, "scattering_intensity": 0.5}],
///   "interfaces": [{"depth": 0.3, "reflectance": 0.5, "border_probability": 0.8}],
///   "inclusions": [{"center": [0, 0, 0.5], "radii": [0.2, 0.3, 0.1], "attenuation": 0.05}],
///   "speckle": 0.0,
///   "seed": 0
/// }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_min")]
    pub bounds_min: [f64; 3],
    #[serde(default = "default_max")]
    pub bounds_max: [f64; 3],
    #[serde(default)]
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub interfaces: Vec<Interface>,
    #[serde(default)]
    pub inclusions: Vec<Inclusion>,
    /// Relative per-voxel jitter of `φ`, uniform in `±speckle`.
    #[serde(default)]
    pub speckle: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            resolution: default_resolution(),
            bounds_min: default_min(),
            bounds_max: default_max(),
            layers: Vec::new(),
            interfaces: Vec::new(),
            inclusions: Vec::new(),
            speckle: 0.0,
            seed: 0,
        }
    }
}

fn unit(what: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::validation(format!("{what} must lie in [0, 1], got {v}")))
    }
}

fn nonneg(what: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("{what} must be finite and >= 0, got {v}")))
    }
}

impl PhantomSpec {
    /// The layered fixture used by the test suite and the CLI default.
    pub fn desk(seed: u64) -> Self {
        let layer = |a: f64, b: f64, att: f64, rs: f64, phi: f64| Layer {
            depth: [a, b],
            attenuation: att,
            scattering_density: rs,
            scattering_intensity: phi,
        };
        PhantomSpec {
            layers: vec![
                layer(0.0, 0.2, 0.2, 0.9, 0.8),
                layer(0.2, 0.6, 0.3, 0.8, 0.7),
                layer(0.6, 1.0, 0.6, 0.9, 0.9),
            ],
            interfaces: vec![
                Interface { depth: 0.2, reflectance: 0.1, border_probability: 0.2 },
                Interface { depth: 0.6, reflectance: 0.1, border_probability: 0.2 },
            ],
            inclusions: vec![
                Inclusion {
                    center: [0.25, 0.0, 0.4],
                    radii: [0.3, 0.6, 0.1],
                    attenuation: Some(0.02),
                    scattering_density: Some(0.05),
                    scattering_intensity: Some(0.1),
                    ..Default::default()
                },
                Inclusion {
                    center: [-0.4, 0.2, 0.75],
                    radii: [0.22, 0.4, 0.06],
                    reflectance: Some(0.5),
                    border_probability: Some(0.6),
                    scattering_intensity: Some(1.0),
                    ..Default::default()
                },
            ],
            speckle: 0.0,
            seed,
            ..Default::default()
        }
    }

    pub fn geometry(&self) -> GridGeometry {
        let r = self.resolution;
        GridGeometry {
            dims: [r, r, r],
            min: Point3::from_array(self.bounds_min),
            max: Point3::from_array(self.bounds_max),
        }
    }

    pub fn depth_range(&self) -> f64 {
        self.bounds_max[2] - self.bounds_min[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::validation("resolution must be >= 2"));
        }
        for k in 0..3 {
            if !(self.bounds_max[k] > self.bounds_min[k]) {
                return Err(Error::validation("bounds_max must exceed bounds_min on every axis"));
            }
        }
        let depth = self.depth_range();
        for (i, l) in self.layers.iter().enumerate() {
            if !(l.depth[0] >= 0.0 && l.depth[1] > l.depth[0] && l.depth[1] <= depth + 1e-12) {
                return Err(Error::validation(format!("layers[{i}].depth outside the volume")));
            }
            nonneg(&format!("layers[{i}].attenuation"), l.attenuation)?;
            unit(&format!("layers[{i}].scattering_density"), l.scattering_density)?;
            unit(&format!("layers[{i}].scattering_intensity"), l.scattering_intensity)?;
        }
        let h = depth / self.resolution as f64;
        let mut slabs: Vec<usize> = Vec::new();
        for (i, f) in self.interfaces.iter().enumerate() {
            if !(f.depth >= 0.0 && f.depth <= depth) {
                return Err(Error::validation(format!("interfaces[{i}].depth outside the volume")));
            }
            unit(&format!("interfaces[{i}].reflectance"), f.reflectance)?;
            unit(&format!("interfaces[{i}].border_probability"), f.border_probability)?;
            let s = self.interface_slab(f.depth, h);
            if slabs.contains(&s) {
                return Err(Error::validation(format!("interfaces[{i}] overlaps another interface")));
            }
            slabs.push(s);
        }
        for (i, inc) in self.inclusions.iter().enumerate() {
            if inc.radii.iter().any(|r| !(*r > 0.0)) {
                return Err(Error::validation(format!("inclusions[{i}].radii must be > 0")));
            }
            let o = inc.overrides();
            if let Some(a) = o[0] {
                nonneg(&format!("inclusions[{i}].attenuation"), a)?;
            }
            for (k, name) in [(1, "reflectance"), (2, "border_probability"), (3, "scattering_density"), (4, "scattering_intensity")] {
                if let Some(v) = o[k] {
                    unit(&format!("inclusions[{i}].{name}"), v)?;
                }
            }
        }
        if !(0.0..=1.0).contains(&self.speckle) {
            return Err(Error::validation("speckle must lie in [0, 1]"));
        }
        Ok(())
    }

    fn interface_slab(&self, depth: f64, h: f64) -> usize {
        ((depth / h).floor() as usize).min(self.resolution - 1)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: PhantomSpec = serde_json::from_str(text).map_err(|e| Error::validation(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile { path: path.to_path_buf() });
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Voxelises a phantom description.
pub fn build_phantom(spec: &PhantomSpec) -> Result<ParameterVolume> {
    spec.validate()?;
    let g = spec.geometry();
    let r = spec.resolution;
    let mut vol = ParameterVolume::empty(g);
    let h = g.cell_size();
    for z in 0..r {
        let depth = (z as f64 + 0.5) * h.z;
        // Later layers win where ranges overlap, so fill in order.
        let mut params: Option<[f64; 3]> = None;
        for l in &spec.layers {
            if depth >= l.depth[0] && depth < l.depth[1] {
                params = Some([l.attenuation, l.scattering_density, l.scattering_intensity]);
            }
        }
        if let Some([a, rs, phi]) = params {
            for y in 0..r {
                for x in 0..r {
                    let i = g.index(x, y, z);
                    vol.channels[CH_ATTENUATION][i] = a;
                    vol.channels[CH_SCATTER_DENSITY][i] = rs;
                    vol.channels[CH_SCATTER_INTENSITY][i] = phi;
                }
            }
        }
    }
    for f in &spec.interfaces {
        let z = spec.interface_slab(f.depth, h.z);
        for y in 0..r {
            for x in 0..r {
                let i = g.index(x, y, z);
                vol.channels[CH_REFLECTANCE][i] = f.reflectance;
                vol.channels[CH_BORDER][i] = f.border_probability;
            }
        }
    }
    for inc in &spec.inclusions {
        let o = inc.overrides();
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    if inc.contains(g.center(x, y, z)) {
                        let i = g.index(x, y, z);
                        for (k, v) in o.iter().enumerate() {
                            if let Some(v) = v {
                                vol.channels[k][i] = *v;
                            }
                        }
                    }
                }
            }
        }
    }
    if spec.speckle > 0.0 {
        let mut rng = rng::stream(spec.seed, "speckle", &[]);
        for v in vol.channels[CH_SCATTER_INTENSITY].iter_mut() {
            let u: f64 = rng.random_range(-1.0..1.0);
            *v = (*v * (1.0 + spec.speckle * u)).clamp(0.0, 1.0);
        }
    }
    vol.validate()?;
    Ok(vol)
}

/// Closed triangle mesh used as an occupancy source.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for (k, c) in v.to_array().into_iter().enumerate() {
                lo[k] = lo[k].min(c);
                hi[k] = hi[k].max(c);
            }
        }
        (Point3::from_array(lo), Point3::from_array(hi))
    }

    /// Axis-aligned box with outward-facing triangles.
    pub fn cuboid(min: Point3, max: Point3) -> Self {
        let v = |i: usize| {
            Point3::new(
                if i & 1 == 0 { min.x } else { max.x },
                if i & 2 == 0 { min.y } else { max.y },
                if i & 4 == 0 { min.z } else { max.z },
            )
        };
        let vertices = (0..8).map(v).collect();
        let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
        let triangles = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
        TriangleMesh { vertices, triangles }
    }

    /// Inside/outside occupancy over the mesh bounds by parity of crossings
    /// along `z` through each column of cell centres.
    pub fn voxelize(&self, resolution: usize) -> Result<ScalarVolume> {
        if self.triangles.is_empty() {
            return Err(Error::validation("mesh has no triangles"));
        }
        if self.triangles.iter().flatten().any(|&i| i >= self.vertices.len()) {
            return Err(Error::validation("mesh triangle references a missing vertex"));
        }
        let (lo, hi) = self.bounds();
        let geometry = GridGeometry { dims: [resolution; 3], min: lo, max: hi };
        let mut out = ScalarVolume::filled(geometry, 0.0);
        for y in 0..resolution {
            for x in 0..resolution {
                let c = geometry.center(x, y, 0);
                let mut hits: Vec<f64> = self
                    .triangles
                    .iter()
                    .filter_map(|t| {
                        vertical_hit(self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]], c.x, c.y)
                    })
                    .collect();
                hits.sort_by(|a, b| a.total_cmp(b));
                hits.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
                for z in 0..resolution {
                    let pz = geometry.center(x, y, z).z;
                    let crossings = hits.iter().filter(|&&h| h < pz).count();
                    if crossings % 2 == 1 {
                        out.data[geometry.index(x, y, z)] = 1.0;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `z` where the vertical line through `(x, y)` meets triangle `abc`.
fn vertical_hit(a: Point3, b: Point3, c: Point3, x: f64, y: f64) -> Option<f64> {
    let d = (b.y - c.y) * (a.x - c.x) + (c.x - b.x) * (a.y - c.y);
    if d.abs() < 1e-15 {
        return None;
    }
    let l1 = ((b.y - c.y) * (x - c.x) + (c.x - b.x) * (y - c.y)) / d;
    let l2 = ((c.y - a.y) * (x - c.x) + (a.x - c.x) * (y - c.y)) / d;
    let l3 = 1.0 - l1 - l2;
    if l1 >= 0.0 && l2 >= 0.0 && l3 >= 0.0 {
        Some(l1 * a.z + l2 * b.z + l3 * c.z)
    } else {
        None
    }
}

/// Where patches come from.
pub enum PatchSource<'a> {
    Volume(&'a ScalarVolume),
    Mesh { mesh: &'a TriangleMesh, resolution: usize },
}

/// Cube placement: `origin` is the minimum corner, its `z` on the skin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub origin: Point3,
    pub edge: f64,
}

/// Draws a skin-anchored cube inside `[lo, hi]` laterally with edge in
/// `size_fraction x reference`.
pub fn random_placement(
    rng: &mut impl Rng,
    lo: Point3,
    hi: Point3,
    skin_z: f64,
    reference: f64,
    size_fraction: (f64, f64),
) -> Result<Placement> {
    const MAX_TRIES: usize = 1000;
    for _ in 0..MAX_TRIES {
        let f = if size_fraction.1 > size_fraction.0 {
            rng.random_range(size_fraction.0..=size_fraction.1)
        } else {
            size_fraction.0
        };
        let edge = f * reference;
        let sx = hi.x - lo.x - edge;
        let sy = hi.y - lo.y - edge;
        let tol = 1e-12 * (1.0 + reference);
        if sx < -tol || sy < -tol {
            continue;
        }
        let ox = lo.x + if sx > 0.0 { rng.random_range(0.0..=sx) } else { 0.0 };
        let oy = lo.y + if sy > 0.0 { rng.random_range(0.0..=sy) } else { 0.0 };
        return Ok(Placement { origin: Point3::new(ox, oy, skin_z), edge });
    }
    Err(Error::validation("no patch placement fits laterally after 1000 tries"))
}

/// Resamples `volume` over the cube of `placement` onto a 32³ patch.
pub fn resample_patch(volume: &ScalarVolume, placement: Placement) -> VoxelPatch {
    let grid = VoxelPatch::lattice(placement.origin, placement.edge)
        .into_iter()
        .map(|p| volume.sample(p).clamp(0.0, 1.0) as f32)
        .collect();
    VoxelPatch { grid, world_origin: placement.origin, edge_length: placement.edge }
}

/// Skin-anchored cubic patches with edge lengths uniform over
/// `size_fraction` times the smaller lateral extent of the source.
pub fn extract_patches(
    source: PatchSource<'_>,
    count: usize,
    size_fraction: (f64, f64),
    seed: u64,
) -> Result<Vec<VoxelPatch>> {
    if count == 0 {
        return Err(Error::validation("patch count must be >= 1"));
    }
    let (lo_f, hi_f) = size_fraction;
    if !(lo_f > 0.0 && hi_f <= 1.0 && lo_f <= hi_f) {
        return Err(Error::validation("size_fraction must be a sub-range of (0, 1]"));
    }
    let owned;
    let volume = match source {
        PatchSource::Volume(v) => v,
        PatchSource::Mesh { mesh, resolution } => {
            owned = mesh.voxelize(resolution)?;
            &owned
        }
    };
    let g = volume.geometry;
    let e = g.extent();
    let reference = e.x.min(e.y);
    let mut rng = rng::stream(seed, "patches", &[]);
    (0..count)
        .map(|_| {
            let p = random_placement(&mut rng, g.min, g.max, g.min.z, reference, size_fraction)?;
            Ok(resample_patch(volume, p))
        })
        .collect()
}

/// Seed used for the stochastic parts of frame `index`.
pub fn frame_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, "frame", &[index as u64])
}

/// Reference B-mode renderer written directly from the closed form,
/// independent of [`crate::render`].
fn reference_frame(volume: &ParameterVolume, pose: &Pose, probe: &ProbeConfig, cfg: &RenderConfig, seed: u64) -> GrayImage {
    let (h, w) = (probe.n_samples, probe.n_scanlines);
    let dt = probe.dt();
    let mut reflect = vec![0.0f64; h * w];
    let mut scatter = vec![0.0f64; h * w];
    for (j, ray) in frame_rays(probe, pose).iter().enumerate() {
        let s: Vec<ParameterSample<f64>> = ray.points().map(|p| volume.sample(p)).collect();
        let draws = cfg.is_stochastic().then(|| RayDraws::for_ray(seed, 0, j, h));
        let mask = |mode: SamplingMode, p: f64, u: Option<f64>| match mode {
            SamplingMode::Expected => p,
            SamplingMode::BernoulliStraightThrough => (u.unwrap() < p) as u8 as f64,
        };
        let gb: Vec<f64> = (0..h)
            .map(|t| mask(cfg.boundary_mode, s[t].border_probability, draws.as_ref().map(|d| d.boundary[t])))
            .collect();
        let gs: Vec<f64> = (0..h)
            .map(|t| mask(cfg.scatter_mode, s[t].scattering_density, draws.as_ref().map(|d| d.scatter[t])))
            .collect();
        let mut alpha_sum = 0.0;
        let mut product = 1.0;
        for t in 0..h {
            let i = probe.initial_intensity * product * (-alpha_sum * probe.frequency * dt).exp();
            reflect[t * w + j] = cfg.w_reflect * i * s[t].reflectance * gb[t];
            scatter[t * w + j] = cfg.w_scatter * i * gs[t] * s[t].scattering_intensity;
            alpha_sum += s[t].attenuation;
            product *= (1.0 - s[t].reflectance) * (1.0 - gb[t]);
        }
    }
    if let Some(psf) = cfg.psf {
        scatter = gaussian_blur(&scatter, h, w, &psf);
    }
    let data = reflect.iter().zip(&scatter).map(|(a, b)| (a + b).clamp(0.0, 1.0) as f32).collect();
    GrayImage { height: h, width: w, data }
}

fn gaussian_blur(img: &[f64], h: usize, w: usize, psf: &PsfConfig) -> Vec<f64> {
    let r = psf.size as isize / 2;
    let weight = |dy: isize, dx: isize| {
        (-0.5 * ((dy * dy) as f64 / psf.sigma_axial.powi(2) + (dx * dx) as f64 / psf.sigma_lateral.powi(2))).exp()
    };
    let mut norm = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            norm += weight(dy, dx);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = (y - dy, x - dx);
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        acc += weight(dy, dx) * img[sy as usize * w + sx as usize];
                    }
                }
            }
            out[y as usize * w + x as usize] = acc / norm;
        }
    }
    out
}

/// Renders one frame per pose with the reference path.
pub fn simulate_sweep(
    volume: &ParameterVolume,
    trajectory: &[Pose],
    probe: &ProbeConfig,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<SweepDataset> {
    if trajectory.is_empty() {
        return Err(Error::validation("trajectory must contain at least one pose"));
    }
    probe.validate()?;
    cfg.validate()?;
    let frames = trajectory
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            pose.validate()?;
            Ok(ProbeFrame { image: reference_frame(volume, pose, probe, cfg, frame_seed(seed, i)), pose: *pose, frame_index: i })
        })
        .collect::<Result<Vec<_>>>()?;
    SweepDataset::new(probe.clone(), frames)
}

/// Straight sweep along `y` over the skin with gentle in-plane rocking and
/// elevational tilt, so neighbouring frames see tissue from different angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub frames: usize,
    pub start: [f64; 3],
    pub end: [f64; 3],
    /// Peak rotation about the probe's elevational axis, radians.
    #[serde(default)]
    pub rock: f64,
    /// Peak rotation about the sweep's lateral axis, radians.
    #[serde(default)]
    pub tilt: f64,
}

impl TrajectorySpec {
    pub fn desk(frames: usize) -> Self {
        TrajectorySpec { frames, start: [0.0, -0.6, 0.0], end: [0.0, 0.6, 0.0], rock: 0.25, tilt: 0.1 }
    }

    pub fn poses(&self) -> Result<Vec<Pose>> {
        if self.frames == 0 {
            return Err(Error::validation("trajectory needs at least one frame"));
        }
        let a = Point3::from_array(self.start);
        let b = Point3::from_array(self.end);
        Ok((0..self.frames)
            .map(|i| {
                let s = if self.frames == 1 { 0.0 } else { i as f64 / (self.frames - 1) as f64 };
                let phase = 2.0 * std::f64::consts::PI * s;
                let rock = Pose::from_axis_angle(Point3::new(0.0, 1.0, 0.0), self.rock * phase.sin(), Point3::ZERO);
                let tilt = Pose::from_axis_angle(Point3::new(1.0, 0.0, 0.0), self.tilt * (2.0 * phase).cos(), a + (b - a) * s);
                tilt.compose(&rock)
            })
            .collect())
    }
}

/// `n` procedural occupancy patches (spheres, boxes, skin slabs, layered
/// composites) for base prior training.
pub fn procedural_shapes(n: usize, seed: u64) -> Vec<VoxelPatch> {
    (0..n).map(|i| procedural_shape(i % 4, rng::derive_seed(seed, "shape", &[i as u64]))).collect()
}

/// One procedural shape of the given kind: 0 sphere, 1 box, 2 skin slab,
/// 3 layered composite.
pub fn procedural_shape(kind: usize, seed: u64) -> VoxelPatch {
    let mut r = rng::stream(seed, "shape", &[kind as u64]);
    let n = PATCH_DIM as f64;
    let mut grid = vec![0.0f32; PATCH_VOXELS];
    let c = |v: usize| (v as f64 + 0.5) / n;
    match kind {
        0 => {
            let ctr = [r.random_range(0.3..0.7), r.random_range(0.3..0.7), r.random_range(0.3..0.7)];
            let rad: f64 = r.random_range(0.12..0.3);
            fill(&mut grid, |x, y, z| {
                let d = ((c(x) - ctr[0]).powi(2) + (c(y) - ctr[1]).powi(2) + (c(z) - ctr[2]).powi(2)).sqrt();
                smooth_step((rad - d) * n)
            });
        }
        1 => {
            let lo: [f64; 3] = [r.random_range(0.1..0.4), r.random_range(0.1..0.4), r.random_range(0.1..0.4)];
            let hi: [f64; 3] = [r.random_range(0.6..0.9), r.random_range(0.6..0.9), r.random_range(0.6..0.9)];
            fill(&mut grid, |x, y, z| {
                let p = [c(x), c(y), c(z)];
                let inside = (0..3).map(|k| (p[k] - lo[k]).min(hi[k] - p[k])).fold(f64::INFINITY, f64::min);
                smooth_step(inside * n)
            });
        }
        2 => {
            let depth: f64 = r.random_range(0.15..0.6);
            let slope: [f64; 2] = [r.random_range(-0.2..0.2), r.random_range(-0.2..0.2)];
            fill(&mut grid, |x, y, z| {
                let surface = depth + slope[0] * (c(x) - 0.5) + slope[1] * (c(y) - 0.5);
                smooth_step((surface - c(z)) * n)
            });
        }
        _ => {
            let bands: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    let a = r.random_range(0.05..0.8);
                    (a, a + r.random_range(0.05..0.2), r.random_range(0.3..1.0))
                })
                .collect();
            fill(&mut grid, |_, _, z| {
                bands
                    .iter()
                    .map(|&(a, b, v)| v * smooth_step((c(z) - a) * n).min(smooth_step((b - c(z)) * n)))
                    .fold(0.0, f64::max)
            });
        }
    }
    VoxelPatch { grid, world_origin: Point3::ZERO, edge_length: 1.0 }
}

fn smooth_step(v: f64) -> f64 {
    (0.5 + 0.5 * v).clamp(0.0, 1.0)
}

fn fill(grid: &mut [f32], f: impl Fn(usize, usize, usize) -> f64) {
    for z in 0..PATCH_DIM {
        for y in 0..PATCH_DIM {
            for x in 0..PATCH_DIM {
                grid[(z * PATCH_DIM + y) * PATCH_DIM + x] = f(x, y, z).clamp(0.0, 1.0) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer(att: f64) -> PhantomSpec {
        PhantomSpec {
            resolution: 16,
            layers: vec![Layer { depth: [0.0, 1.0], attenuation: att, scattering_density: 0.5, scattering_intensity: 0.5 }],
            ..Default::default()
        }
    }

    #[test]
    fn single_layer_fill() {
        let v = build_phantom(&single_layer(0.5)).unwrap();
        assert!(v.channels[CH_ATTENUATION].iter().all(|&a| a == 0.5));
        assert!(v.channels[CH_REFLECTANCE].iter().all(|&a| a == 0.0));
        assert!(v.channels[CH_BORDER].iter().all(|&a| a == 0.0));
    }

    #[test]
    fn interface_is_one_slab() {
        let mut spec = single_layer(0.1);
        spec.interfaces.push(Interface { depth: 0.5, reflectance: 0.8, border_probability: 0.5 });
        let v = build_phantom(&spec).unwrap();
        let g = v.geometry;
        let slabs: Vec<usize> = (0..16)
            .filter(|&z| v.channels[CH_REFLECTANCE][g.index(3, 4, z)] == 0.8)
            .collect();
        assert_eq!(slabs, vec![8]);
        let count = v.channels[CH_REFLECTANCE].iter().filter(|&&b| b == 0.8).count();
        assert_eq!(count, 16 * 16);
    }

    #[test]
    fn overlapping_interfaces_rejected() {
        let mut spec = single_layer(0.1);
        spec.interfaces.push(Interface { depth: 0.5, reflectance: 0.8, border_probability: 0.5 });
        spec.interfaces.push(Interface { depth: 0.51, reflectance: 0.8, border_probability: 0.5 });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = PhantomSpec::from_json(r#"{"layers": [], "wobble": 1}"#).unwrap_err();
        assert!(err.to_string().contains("wobble"), "{err}");
    }

    #[test]
    fn trilinear_reproduces_constants_and_exterior() {
        let v = build_phantom(&single_layer(0.5)).unwrap();
        let s = v.sample(Point3::new(0.33, -0.71, 0.02));
        assert!((s.attenuation - 0.5).abs() < 1e-12);
        assert_eq!(v.sample(Point3::new(0.0, 0.0, -0.01)), ParameterSample::zero());
        assert_eq!(v.sample(Point3::new(1.5, 0.0, 0.5)), ParameterSample::zero());
    }

    #[test]
    fn cuboid_mesh_voxelizes_full() {
        let m = TriangleMesh::cuboid(Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 2.0, 0.5));
        let v = m.voxelize(8).unwrap();
        assert!(v.data.iter().all(|&o| o == 1.0));
    }

    #[test]
    fn procedural_shapes_in_range() {
        for p in procedural_shapes(8, 3) {
            p.validate().unwrap();
            let mean: f32 = p.grid.iter().sum::<f32>() / PATCH_VOXELS as f32;
            assert!(mean > 0.0 && mean < 1.0, "{mean}");
        }
    }

    #[test]
    fn trajectory_poses_valid() {
        let poses = TrajectorySpec::desk(20).poses().unwrap();
        assert_eq!(poses.len(), 20);
        for p in &poses {
            p.validate().unwrap();
        }
    }
}
