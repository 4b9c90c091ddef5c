//! Scan-line generation for linear and fan (convex) transducers.
//!
//! In probe coordinates the face lies along `+x`, the beam travels along
//! `+z` and `y` is the elevational axis. A fan probe is modelled as a convex
//! array: scan-line origins sit on an arc whose chord is the face width and
//! whose directions fan out from a common virtual apex behind the face. With
//! zero aperture the fan reduces exactly to the linear layout; with zero face
//! width every line starts at the apex.

use crate::error::{Error, Result};
use crate::types::{Point3, Pose, ProbeConfig, ProbeGeometry, ScanRay, SweepDataset};

/// Lateral position of scan line `j` as a fraction of the face, in `(-0.5, 0.5)`.
fn lateral_fraction(j: usize, n: usize) -> f64 {
    (j as f64 + 0.5) / n as f64 - 0.5
}

/// Scan-line origin and direction in probe coordinates.
pub fn local_scanline(probe: &ProbeConfig, j: usize) -> (Point3, Point3) {
    let u = lateral_fraction(j, probe.n_scanlines);
    let w = probe.face_width();
    match probe.geometry {
        ProbeGeometry::Fan if probe.fan_aperture > 0.0 => {
            let a = probe.fan_aperture;
            let theta = a * u;
            let radius = 0.5 * w / (0.5 * a).sin();
            let (s, c) = theta.sin_cos();
            (Point3::new(radius * s, 0.0, radius * c - radius), Point3::new(s, 0.0, c))
        }
        _ => (Point3::new(w * u, 0.0, 0.0), Point3::new(0.0, 0.0, 1.0)),
    }
}

/// Builds scan line `scanline` of a frame taken at `pose`, with `depth_count`
/// samples spaced uniformly over `(0, depth_extent]`.
pub fn ray_for_pixel(
    probe: &ProbeConfig,
    pose: &Pose,
    scanline: usize,
    depth_count: usize,
) -> Result<ScanRay> {
    if scanline >= probe.n_scanlines {
        return Err(Error::OutOfRange { what: "scanline", index: scanline, limit: probe.n_scanlines });
    }
    if depth_count == 0 {
        return Err(Error::validation("depth_count must be >= 1"));
    }
    let (o, d) = local_scanline(probe, scanline);
    let dt = probe.depth_extent / depth_count as f64;
    let depths = (1..=depth_count).map(|i| i as f64 * dt).collect();
    Ok(ScanRay {
        origin: pose.transform_point(o),
        direction: pose.transform_dir(d).normalized(),
        depths,
        dt,
    })
}

/// All scan lines of one frame, left to right.
pub fn frame_rays(probe: &ProbeConfig, pose: &Pose) -> Vec<ScanRay> {
    (0..probe.n_scanlines)
        .map(|j| ray_for_pixel(probe, pose, j, probe.n_samples).expect("index in range"))
        .collect()
}

/// Uniform scaling plus offset that maps a sweep into the unit cube.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneTransform {
    pub scale: f64,
    pub offset: Point3,
}

impl Default for SceneTransform {
    fn default() -> Self {
        SceneTransform { scale: 1.0, offset: Point3::ZERO }
    }
}

impl SceneTransform {
    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.offset == Point3::ZERO
    }

    /// Identity when every probe position already lies in `[-1, 1]³`;
    /// otherwise centres the positions and scales the largest to the cube.
    pub fn fit(dataset: &SweepDataset) -> SceneTransform {
        let ts: Vec<Point3> = dataset.frames.iter().map(|f| f.pose.translation()).collect();
        if ts.iter().all(|t| t.to_array().iter().all(|v| v.abs() <= 1.0)) {
            return SceneTransform::default();
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for t in &ts {
            for (k, v) in t.to_array().into_iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        let center = Point3::new(0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2]));
        let half = (0..3).map(|k| 0.5 * (hi[k] - lo[k])).fold(0.0, f64::max).max(1e-12);
        let scale = 1.0 / half;
        SceneTransform { scale, offset: -(center * scale) }
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        let t = pose.translation() * self.scale + self.offset;
        Pose::from_rotation_translation(pose.rotation(), t)
    }

    pub fn apply_probe(&self, probe: &ProbeConfig) -> ProbeConfig {
        let mut p = probe.clone();
        p.depth_extent *= self.scale;
        p.face_width = Some(probe.face_width() * self.scale);
        // Attenuation is per unit length; keep the per-sample loss unchanged.
        p.frequency /= self.scale;
        p
    }

    pub fn apply_dataset(&self, dataset: &SweepDataset) -> SweepDataset {
        if self.is_identity() {
            return dataset.clone();
        }
        let mut out = dataset.clone();
        out.probe = self.apply_probe(&dataset.probe);
        for f in &mut out.frames {
            f.pose = self.apply_pose(&f.pose);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ProbeGeometry;

    fn probe(n: usize) -> ProbeConfig {
        ProbeConfig::linear(n, 16, 1.0, 0.8)
    }

    #[test]
    fn center_scanline_on_axis() {
        let r = ray_for_pixel(&probe(5), &Pose::identity(), 2, 16).unwrap();
        assert!(r.origin.max_abs_diff(Point3::ZERO) < 1e-15);
        assert!(r.direction.max_abs_diff(Point3::new(0.0, 0.0, 1.0)) < 1e-15);
        assert!((r.depths[0] - 1.0 / 16.0).abs() < 1e-15);
        assert!((r.depths[15] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_scanline() {
        assert!(matches!(
            ray_for_pixel(&probe(4), &Pose::identity(), 4, 16),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn zero_aperture_fan_is_linear() {
        let lin = probe(7);
        let mut fan = lin.clone();
        fan.geometry = ProbeGeometry::Fan;
        fan.fan_aperture = 0.0;
        let pose = Pose::from_axis_angle(Point3::new(0.3, 1.0, 0.2), 0.4, Point3::new(0.1, 0.2, 0.3));
        for j in 0..7 {
            assert_eq!(
                ray_for_pixel(&lin, &pose, j, 16).unwrap(),
                ray_for_pixel(&fan, &pose, j, 16).unwrap()
            );
        }
    }

    #[test]
    fn small_aperture_fan_approaches_linear() {
        let lin = probe(7);
        let mut fan = lin.clone();
        fan.geometry = ProbeGeometry::Fan;
        fan.fan_aperture = 1e-6;
        for j in 0..7 {
            let a = ray_for_pixel(&lin, &Pose::identity(), j, 16).unwrap();
            let b = ray_for_pixel(&fan, &Pose::identity(), j, 16).unwrap();
            assert!(a.origin.max_abs_diff(b.origin) < 1e-6);
            assert!(a.direction.max_abs_diff(b.direction) < 1e-6);
        }
    }

    #[test]
    fn fan_rays_share_apex_when_face_is_a_point() {
        let mut fan = probe(9);
        fan.geometry = ProbeGeometry::Fan;
        fan.fan_aperture = 1.0;
        fan.face_width = Some(0.0);
        let rays = frame_rays(&fan, &Pose::identity());
        for r in &rays {
            assert!(r.origin.norm() < 1e-12);
        }
        let first = rays[0].direction;
        let last = rays[8].direction;
        let spread = first.dot(last).acos();
        assert!((spread - 1.0 * 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn translation_equivariance() {
        let p = probe(4);
        let shift = Pose::from_translation(Point3::new(0.0, 0.0, 1.0));
        for j in 0..4 {
            let a = ray_for_pixel(&p, &Pose::identity(), j, 16).unwrap();
            let b = ray_for_pixel(&p, &shift, j, 16).unwrap();
            assert!((b.origin - a.origin).max_abs_diff(Point3::new(0.0, 0.0, 1.0)) < 1e-15);
            assert_eq!(a.direction, b.direction);
        }
    }

    #[test]
    fn scene_transform_identity_inside_cube() {
        let probe = probe(2);
        let frames = (0..3)
            .map(|i| crate::types::ProbeFrame {
                image: crate::types::GrayImage::zeros(16, 2),
                pose: Pose::from_translation(Point3::new(0.0, i as f64 * 0.5 - 0.5, 0.0)),
                frame_index: i,
            })
            .collect();
        let ds = SweepDataset::new(probe, frames).unwrap();
        assert!(SceneTransform::fit(&ds).is_identity());
    }

    #[test]
    fn scene_transform_fits_large_sweeps() {
        let probe = probe(2);
        let frames = (0..3)
            .map(|i| crate::types::ProbeFrame {
                image: crate::types::GrayImage::zeros(16, 2),
                pose: Pose::from_translation(Point3::new(10.0, i as f64 * 5.0, 3.0)),
                frame_index: i,
            })
            .collect();
        let ds = SweepDataset::new(probe, frames).unwrap();
        let tf = SceneTransform::fit(&ds);
        let out = tf.apply_dataset(&ds);
        for f in &out.frames {
            assert!(f.pose.translation().to_array().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        }
        assert!((out.probe.depth_extent - 0.2).abs() < 1e-12);
    }
}
