//! On-disk formats: pose JSON, the packed Gaussian model, full-precision
//! stage checkpoints, and PNG image IO. All writes are atomic
//! (temp-file-then-rename) so interrupted runs never leave partial artifacts.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sparsesplat_core::grid::{BinaryMask, ColorImage, ScalarMap};
use sparsesplat_core::pose::Pose;
use sparsesplat_core::splat::GaussianCloud;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: String, message: String },
}

fn io_err(path: &Path, source: io::Error) -> FormatError {
    FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn malformed(path: &Path, message: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Writes through a temp file in the same directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Poses: JSON, 4x4 row-major world-to-camera matrices.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PoseFile {
    /// Row-major 4x4 world-to-camera matrices.
    poses: Vec<[[f64; 4]; 4]>,
}

fn pose_to_matrix(pose: &Pose) -> [[f64; 4]; 4] {
    let r = &pose.rotation;
    let t = &pose.translation;
    [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn matrix_to_pose(path: &Path, m: &[[f64; 4]; 4]) -> Result<Pose, FormatError> {
    if m[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(malformed(path, "bottom row of a rigid transform must be [0, 0, 0, 1]"));
    }
    let rotation = Matrix3::new(
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
    );
    let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
    Ok(Pose::new(rotation, translation))
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<(), FormatError> {
    let file = PoseFile {
        poses: poses.iter().map(pose_to_matrix).collect(),
    };
    let json = serde_json::to_vec_pretty(&file).expect("pose serialization");
    atomic_write(path, &json).map_err(|e| io_err(path, e))
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>, FormatError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let file: PoseFile =
        serde_json::from_slice(&bytes).map_err(|e| malformed(path, e.to_string()))?;
    file.poses.iter().map(|m| matrix_to_pose(path, m)).collect()
}

// ---------------------------------------------------------------------------
// model.bin: little-endian f32 records, one Gaussian each:
// position x3, log_scale x3, quaternion [w,x,y,z], opacity logit, color x3.
// ---------------------------------------------------------------------------

pub const MODEL_RECORD_BYTES: usize = 14 * 4;

pub fn write_model(path: &Path, cloud: &GaussianCloud) -> Result<(), FormatError> {
    let mut bytes = Vec::with_capacity(cloud.len() * MODEL_RECORD_BYTES);
    let mut push = |v: f64| bytes.extend_from_slice(&(v as f32).to_le_bytes());
    for i in 0..cloud.len() {
        for c in 0..3 {
            push(cloud.positions[i][c]);
        }
        for c in 0..3 {
            push(cloud.log_scales[i][c]);
        }
        for c in 0..4 {
            push(cloud.orientations[i][c]);
        }
        push(cloud.opacity_logits[i]);
        for c in 0..3 {
            push(cloud.colors[i][c]);
        }
    }
    atomic_write(path, &bytes).map_err(|e| io_err(path, e))
}

pub fn read_model(path: &Path) -> Result<GaussianCloud, FormatError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() % MODEL_RECORD_BYTES != 0 {
        return Err(malformed(
            path,
            format!("size {} is not a multiple of the {MODEL_RECORD_BYTES}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / MODEL_RECORD_BYTES;
    let mut cloud = GaussianCloud {
        positions: Vec::with_capacity(n),
        log_scales: Vec::with_capacity(n),
        orientations: Vec::with_capacity(n),
        opacity_logits: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
    };
    let mut offset = 0usize;
    let next = |bytes: &[u8], offset: &mut usize| -> f64 {
        let raw: [u8; 4] = bytes[*offset..*offset + 4].try_into().expect("length checked");
        *offset += 4;
        f32::from_le_bytes(raw) as f64
    };
    for _ in 0..n {
        cloud.positions.push(Vector3::new(
            next(&bytes, &mut offset),
            next(&bytes, &mut offset),
            next(&bytes, &mut offset),
        ));
        cloud.log_scales.push(Vector3::new(
            next(&bytes, &mut offset),
            next(&bytes, &mut offset),
            next(&bytes, &mut offset),
        ));
        cloud.orientations.push([
            next(&bytes, &mut offset),
            next(&bytes, &mut offset),
            next(&bytes, &mut offset),
            next(&bytes, &mut offset),
        ]);
        cloud.opacity_logits.push(next(&bytes, &mut offset));
        cloud.colors.push([
            next(&bytes, &mut offset),
            next(&bytes, &mut offset),
            next(&bytes, &mut offset),
        ]);
    }
    Ok(cloud)
}

// ---------------------------------------------------------------------------
// Full-precision checkpoints used between stages; f64 so resuming a run
// replays the exact same numbers the full run saw.
// ---------------------------------------------------------------------------

const GRID_MAGIC: &[u8; 4] = b"SSG8";
const CLOUD_MAGIC: &[u8; 4] = b"SSC8";

pub fn write_grid_f64(path: &Path, map: &ScalarMap) -> Result<(), FormatError> {
    let mut bytes = Vec::with_capacity(12 + map.len() * 8);
    bytes.extend_from_slice(GRID_MAGIC);
    bytes.extend_from_slice(&(map.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.height() as u32).to_le_bytes());
    for &v in map.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &bytes).map_err(|e| io_err(path, e))
}

pub fn read_grid_f64(path: &Path) -> Result<ScalarMap, FormatError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != GRID_MAGIC {
        return Err(malformed(path, "not a full-precision grid checkpoint"));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + width * height * 8 {
        return Err(malformed(path, "grid checkpoint size mismatch"));
    }
    let values = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ScalarMap::from_values(width, height, values).map_err(|e| malformed(path, e.to_string()))
}

pub fn write_cloud_f64(path: &Path, cloud: &GaussianCloud) -> Result<(), FormatError> {
    let mut bytes = Vec::with_capacity(8 + cloud.len() * 14 * 8);
    bytes.extend_from_slice(CLOUD_MAGIC);
    bytes.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    let mut push = |v: f64| bytes.extend_from_slice(&v.to_le_bytes());
    for i in 0..cloud.len() {
        for c in 0..3 {
            push(cloud.positions[i][c]);
        }
        for c in 0..3 {
            push(cloud.log_scales[i][c]);
        }
        for c in 0..4 {
            push(cloud.orientations[i][c]);
        }
        push(cloud.opacity_logits[i]);
        for c in 0..3 {
            push(cloud.colors[i][c]);
        }
    }
    atomic_write(path, &bytes).map_err(|e| io_err(path, e))
}

pub fn read_cloud_f64(path: &Path) -> Result<GaussianCloud, FormatError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 8 || &bytes[0..4] != CLOUD_MAGIC {
        return Err(malformed(path, "not a full-precision cloud checkpoint"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + n * 14 * 8 {
        return Err(malformed(path, "cloud checkpoint size mismatch"));
    }
    let mut offset = 8usize;
    let next = |offset: &mut usize| -> f64 {
        let v = f64::from_le_bytes(bytes[*offset..*offset + 8].try_into().unwrap());
        *offset += 8;
        v
    };
    let mut cloud = GaussianCloud {
        positions: Vec::with_capacity(n),
        log_scales: Vec::with_capacity(n),
        orientations: Vec::with_capacity(n),
        opacity_logits: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
    };
    for _ in 0..n {
        cloud
            .positions
            .push(Vector3::new(next(&mut offset), next(&mut offset), next(&mut offset)));
        cloud
            .log_scales
            .push(Vector3::new(next(&mut offset), next(&mut offset), next(&mut offset)));
        cloud.orientations.push([
            next(&mut offset),
            next(&mut offset),
            next(&mut offset),
            next(&mut offset),
        ]);
        cloud.opacity_logits.push(next(&mut offset));
        cloud
            .colors
            .push([next(&mut offset), next(&mut offset), next(&mut offset)]);
    }
    Ok(cloud)
}

// ---------------------------------------------------------------------------
// Images: 8-bit PNG (PPM accepted on read).
// ---------------------------------------------------------------------------

pub fn write_png(path: &Path, image: &ColorImage) -> Result<(), FormatError> {
    let mut buf = image::RgbImage::new(image.width() as u32, image.height() as u32);
    for y in 0..image.height() {
        for x in 0..image.width() {
            let px = image.at(x, y).map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut bytes = Vec::new();
    buf.write_to(&mut io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| malformed(path, e.to_string()))?;
    atomic_write(path, &bytes).map_err(|e| io_err(path, e))
}

pub fn read_image(path: &Path) -> Result<ColorImage, FormatError> {
    let img = image::open(path)
        .map_err(|e| malformed(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    ColorImage::from_data(w, h, data).map_err(|e| malformed(path, e.to_string()))
}

/// Masks as 8-bit grayscale PNG: 255 marks set (valid) pixels.
pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<(), FormatError> {
    let mut buf = image::GrayImage::new(mask.width() as u32, mask.height() as u32);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            buf.put_pixel(x as u32, y as u32, image::Luma([if mask.at(x, y) { 255 } else { 0 }]));
        }
    }
    let mut bytes = Vec::new();
    buf.write_to(&mut io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| malformed(path, e.to_string()))?;
    atomic_write(path, &bytes).map_err(|e| io_err(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<BinaryMask, FormatError> {
    let img = image::open(path)
        .map_err(|e| malformed(path, e.to_string()))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(BinaryMask::from_fn(w, h, |x, y| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparsesplat_core::pose::Twist;

    #[test]
    fn pose_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.json");
        let poses: Vec<Pose> = (0..3)
            .map(|i| Twist::from_array([0.1 * i as f64, -0.2, 0.3, 1.0, 0.0, 2.0]).exp())
            .collect();
        write_poses(&path, &poses).unwrap();
        let back = read_poses(&path).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert!((a.rotation - b.rotation).norm() < 1e-15);
            assert!((a.translation - b.translation).norm() < 1e-15);
        }
    }

    #[test]
    fn model_record_layout_is_56_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let cloud = GaussianCloud {
            positions: vec![Vector3::new(1.0, 2.0, 3.0); 5],
            log_scales: vec![Vector3::new(-1.0, -2.0, -3.0); 5],
            orientations: vec![[1.0, 0.0, 0.0, 0.0]; 5],
            opacity_logits: vec![0.25; 5],
            colors: vec![[0.5, 0.25, 0.75]; 5],
        };
        write_model(&path, &cloud).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 5 * 56);
        // First record starts with the position as little-endian f32.
        assert_eq!(f32::from_le_bytes(bytes[0..4].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2.0);

        let back = read_model(&path).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.colors[0], [0.5, 0.25, 0.75]);
    }

    #[test]
    fn f64_checkpoints_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let grid_path = dir.path().join("depth.g8");
        let map = ScalarMap::from_fn(9, 4, |x, y| (x as f64 + 0.1) / (y as f64 + 3.7));
        write_grid_f64(&grid_path, &map).unwrap();
        let back = read_grid_f64(&grid_path).unwrap();
        for (a, b) in map.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let cloud_path = dir.path().join("cloud.g8c");
        let cloud = GaussianCloud {
            positions: vec![Vector3::new(0.1, 0.2, 0.3_f64.sqrt())],
            log_scales: vec![Vector3::new(-1.1, -1.2, -1.3)],
            orientations: vec![[0.5, 0.5, 0.5, 0.5]],
            opacity_logits: vec![2.0_f64.ln()],
            colors: vec![[0.9, 0.8, 0.7]],
        };
        write_cloud_f64(&cloud_path, &cloud).unwrap();
        let back = read_cloud_f64(&cloud_path).unwrap();
        assert_eq!(back.positions[0][2].to_bits(), cloud.positions[0][2].to_bits());
        assert_eq!(back.opacity_logits[0].to_bits(), cloud.opacity_logits[0].to_bits());
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = ColorImage::from_fn(16, 12, |x, y| {
            [x as f64 / 15.0, y as f64 / 11.0, 0.5]
        });
        write_png(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-9);
            }
        }
    }
}
