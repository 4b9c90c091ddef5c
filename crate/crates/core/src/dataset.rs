//! Sweep dataset directory I/O.
//!
//! ```text
//! <dir>/probe.json      ProbeConfig
//! <dir>/poses.json      [{"frame": 0, "matrix": [16 floats, row-major]}, ...]
//! <dir>/frames/00000.png  8-bit grayscale, n_samples rows x n_scanlines columns
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{GrayImage, Pose, ProbeConfig, ProbeFrame, SweepDataset};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseEntry {
    frame: usize,
    matrix: Vec<f64>,
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:05}.png")
}

fn read_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    Ok(fs::read_to_string(path)?)
}

pub fn read_probe(path: &Path) -> Result<ProbeConfig> {
    let text = read_file(path)?;
    let probe: ProbeConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
    probe.validate()?;
    Ok(probe)
}

pub fn read_poses(path: &Path) -> Result<Vec<(usize, Pose)>> {
    let text = read_file(path)?;
    let entries: Vec<PoseEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
    entries
        .into_iter()
        .map(|e| {
            let m: [f64; 16] = e.matrix.as_slice().try_into().map_err(|_| {
                Error::validation(format!("pose for frame {} has {} entries, expected 16", e.frame, e.matrix.len()))
            })?;
            let pose = Pose::from_matrix(m)
                .map_err(|err| Error::validation(format!("frame {}: {err}", e.frame)))?;
            Ok((e.frame, pose))
        })
        .collect()
}

pub fn write_poses(path: &Path, poses: &[(usize, Pose)]) -> Result<()> {
    let entries: Vec<PoseEntry> = poses
        .iter()
        .map(|(frame, p)| PoseEntry { frame: *frame, matrix: p.matrix.to_vec() })
        .collect();
    let text = serde_json::to_string_pretty(&entries).expect("poses serialise");
    fs::write(path, text)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let img = image::open(path)
        .map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    GrayImage::from_vec(h as usize, w as usize, data)
}

/// Quantises to 8 bits; values are clamped to `[0, 1]` first.
pub fn write_png(path: &Path, img: &GrayImage) -> Result<()> {
    let raw: Vec<u8> = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| Error::Shape("image buffer does not match dimensions".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(())
}

/// Raw little-endian `f32` dump, row-major.
pub fn write_f32(path: &Path, img: &GrayImage) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32(path: &Path, height: usize, width: usize) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let bytes = fs::read(path)?;
    if bytes.len() != height * width * 4 {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes, found {}", height * width * 4, bytes.len()),
        });
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    GrayImage::from_vec(height, width, data)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<SweepDataset> {
    let dir = dir.as_ref();
    let probe = read_probe(&dir.join("probe.json"))?;
    let poses = read_poses(&dir.join("poses.json"))?;
    let frames_dir = dir.join("frames");
    if !frames_dir.is_dir() {
        return Err(Error::MissingFile { path: frames_dir });
    }
    let mut frames = Vec::with_capacity(poses.len());
    for (index, pose) in poses {
        let image = read_png(&frames_dir.join(frame_file_name(index)))?;
        frames.push(ProbeFrame { image, pose, frame_index: index });
    }
    SweepDataset::new(probe, frames)
}

/// Writes `dataset` in the directory layout read by [`load_dataset`].
pub fn write_dataset(dataset: &SweepDataset, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    let probe_path = dir.join("probe.json");
    fs::write(&probe_path, serde_json::to_string_pretty(&dataset.probe).expect("probe serialises"))?;
    let poses_path = dir.join("poses.json");
    let poses: Vec<(usize, Pose)> = dataset.frames.iter().map(|f| (f.frame_index, f.pose)).collect();
    write_poses(&poses_path, &poses)?;
    let mut written = vec![probe_path, poses_path];
    for f in &dataset.frames {
        let p = frames_dir.join(frame_file_name(f.frame_index));
        write_png(&p, &f.image)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Point3;

    fn tiny(n: usize, h: usize, w: usize) -> SweepDataset {
        let probe = ProbeConfig::linear(w, h, 1.0, 1.0);
        let frames = (0..n)
            .map(|i| {
                let data = (0..h * w).map(|k| ((k * 7 + i * 13) % 256) as f32 / 255.0).collect();
                ProbeFrame {
                    image: GrayImage::from_vec(h, w, data).unwrap(),
                    pose: Pose::from_axis_angle(Point3::new(1.0, 0.0, 0.0), 0.01 * i as f64, Point3::new(0.0, 0.05 * i as f64, 0.0)),
                    frame_index: i,
                }
            })
            .collect();
        SweepDataset::new(probe, frames).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(10, 128, 64);
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.split.test, vec![0, 8]);
    }

    #[test]
    fn missing_probe_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(2, 4, 3);
        write_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("probe.json")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::MissingFile { path }) => assert!(path.ends_with("probe.json")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(2, 4, 3);
        write_dataset(&ds, dir.path()).unwrap();
        let mut probe = ds.probe.clone();
        probe.n_samples = 5;
        fs::write(dir.path().join("probe.json"), serde_json::to_string(&probe).unwrap()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn skewed_pose_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(2, 4, 3);
        write_dataset(&ds, dir.path()).unwrap();
        let mut m = Pose::identity().matrix.to_vec();
        m[0] = 1.1;
        let text = serde_json::json!([{"frame": 0, "matrix": m}, {"frame": 1, "matrix": Pose::identity().matrix.to_vec()}]);
        fs::write(dir.path().join("poses.json"), text.to_string()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn float_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_vec(2, 3, vec![0.0, 0.1, 0.25, 0.5, 0.75, 1.0]).unwrap();
        let p = dir.path().join("x.f32");
        write_f32(&p, &img).unwrap();
        assert_eq!(read_f32(&p, 2, 3).unwrap(), img);
    }
}
