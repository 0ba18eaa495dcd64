//! On-disk formats for clouds, poses and intrinsics.
//!
//! - Point cloud: magic `CIPC`, `u32` LE count, then `count * 3` LE `f32` xyz.
//! - Pose: 12 whitespace-separated decimals, row-major `[R|t]`.
//! - Intrinsics: 4 decimals `fx fy cx cy`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use super::{GeometryError, Intrinsics, PointCloud, RigidTransform};

pub const CLOUD_MAGIC: &[u8; 4] = b"CIPC";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl FormatError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io { path: path.display().to_string(), source }
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    let write = || -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| FormatError::io(path, e))
}

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 12);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for v in p.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud, FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated { expected: 8, found: bytes.len() });
    }
    if &bytes[..4] != CLOUD_MAGIC {
        return Err(FormatError::BadMagic { expected: "CIPC" });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + n * 12;
    if bytes.len() != expected {
        return Err(FormatError::Truncated { expected, found: bytes.len() });
    }
    let points = bytes[8..]
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes(c[o..o + 4].try_into().unwrap()) as f64;
            Vector3::new(f(0), f(4), f(8))
        })
        .collect();
    Ok(PointCloud::new(points)?)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<(), FormatError> {
    write_atomic(path, &encode_cloud(cloud))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud, FormatError> {
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode_cloud(&bytes)
}

fn parse_decimals(text: &str, count: usize, what: &str) -> Result<Vec<f64>, FormatError> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| FormatError::Parse(format!("{what}: not a number: {tok:?}")))
        })
        .collect::<Result<_, _>>()?;
    if values.len() != count {
        return Err(FormatError::Parse(format!(
            "{what}: expected {count} values, found {}",
            values.len()
        )));
    }
    Ok(values)
}

pub fn format_pose(pose: &RigidTransform) -> String {
    let m = pose.to_row_major();
    let mut out = String::new();
    for r in 0..3 {
        let row: Vec<String> = m[r * 4..r * 4 + 4].iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Parses a pose; the rotation block is projected onto SO(3) after checking it
/// is already a rotation to within the file's printed precision.
pub fn parse_pose(text: &str) -> Result<RigidTransform, FormatError> {
    let v = parse_decimals(text, 12, "pose")?;
    let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let t = Vector3::new(v[3], v[7], v[11]);
    match RigidTransform::new(r, t) {
        Ok(p) => Ok(p),
        Err(e) => {
            let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
            if dev < 1e-4 && r.determinant() > 0.0 && t.iter().all(|x| x.is_finite()) {
                Ok(RigidTransform::from_approximate(&r, t))
            } else {
                Err(e.into())
            }
        }
    }
}

pub fn write_pose(path: &Path, pose: &RigidTransform) -> Result<(), FormatError> {
    write_atomic(path, format_pose(pose).as_bytes())
}

pub fn read_pose(path: &Path) -> Result<RigidTransform, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    parse_pose(&text)
}

pub fn format_intrinsics(k: &Intrinsics) -> String {
    format!("{} {} {} {}\n", k.fx, k.fy, k.cx, k.cy)
}

pub fn parse_intrinsics(text: &str) -> Result<Intrinsics, FormatError> {
    let v = parse_decimals(text, 4, "intrinsics")?;
    Ok(Intrinsics::new(v[0], v[1], v[2], v[3])?)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<(), FormatError> {
    write_atomic(path, format_intrinsics(k).as_bytes())
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    parse_intrinsics(&text)
}
