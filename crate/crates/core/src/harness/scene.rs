//! Synthetic image/cloud pairs and their on-disk layout.
//!
//! A scene directory holds `cloud.bin`, `pose.txt` (ground truth),
//! `intrinsics.txt`, `image.ppm` and `scene.txt` (seed and sizes). Values
//! are rounded at generation time to what the files can hold, so a scene
//! read back from disk equals the one generated.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{cell_of, Image};
use crate::geometry::io::{
    read_cloud, read_intrinsics, read_pose, write_atomic, write_cloud, write_intrinsics, write_pose, FormatError,
};
use crate::geometry::{
    in_frustum, label_overlap, project_point, sample_random_pose, ImageSpec, Intrinsics, OverlapLabels, PointCloud,
    RigidTransform,
};
use crate::kv::KvMap;

use super::config::SceneConfig;
use super::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    pub spec: ImageSpec,
    pub intrinsics: Intrinsics,
    pub pose: RigidTransform,
    pub image: Image,
    pub seed: u64,
}

/// Pinhole camera used for every synthetic scene: focal length half the
/// image width, principal point at the centre.
pub fn default_intrinsics(spec: &ImageSpec) -> Intrinsics {
    let f = spec.width as f64 / 2.0;
    Intrinsics::new(f, f, spec.width as f64 / 2.0, spec.height as f64 / 2.0).expect("positive focal length")
}

/// Smooth colour code of a world position, each channel in `[0, 1]`.
pub fn world_colour(p: &Vector3<f64>) -> [f64; 3] {
    let c = |phase: f64| 0.5 + 0.5 * phase.sin();
    [
        c(0.15 * p.x + 0.07 * p.z),
        c(0.13 * p.z - 0.05 * p.x + 1.0),
        c(0.4 * p.y + 0.05 * p.x + 0.03 * p.z + 2.0),
    ]
}

fn quantize_colour(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

/// Z-buffered splat rendering of the cloud's world colours.
pub fn render(cloud: &PointCloud, k: &Intrinsics, pose: &RigidTransform, spec: &ImageSpec, radius: usize) -> Image {
    let (w, h) = (spec.width, spec.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut image = Image::zeros(w, h);
    let r = radius as isize;
    for p in cloud.points() {
        if !in_frustum(k, pose, p, spec) {
            continue;
        }
        let z = pose.apply(p).z;
        let uv = project_point(k, pose, p).expect("in frustum");
        let colour = world_colour(p).map(quantize_colour);
        let (u0, v0) = (uv.x.floor() as isize, uv.y.floor() as isize);
        for dv in -r..=r {
            for du in -r..=r {
                let (u, v) = (u0 + du, v0 + dv);
                if u < 0 || v < 0 || u >= w as isize || v >= h as isize {
                    continue;
                }
                let idx = v as usize * w + u as usize;
                if z < depth[idx] {
                    depth[idx] = z;
                    image.pixel_mut(u as usize, v as usize).copy_from_slice(&colour);
                }
            }
        }
    }
    image
}

/// Points inside and around the frustum of a random ground pose.
pub fn generate_scene(spec: &ImageSpec, cfg: &SceneConfig, seed: u64) -> SyntheticScene {
    let k = default_intrinsics(spec);
    let pose = sample_random_pose(cfg.max_translation, seed);
    let to_world = pose.inverse();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let inside = ((cfg.frustum_fraction * cfg.points as f64).ceil() as usize).min(cfg.points);
    let mut points = Vec::with_capacity(cfg.points);
    let f32_point = |p: Vector3<f64>| p.map(|v| v as f32 as f64);
    while points.len() < inside {
        let u = rng.random_range(0.0..spec.width as f64);
        let v = rng.random_range(0.0..spec.height as f64);
        let d = rng.random_range(cfg.min_depth..cfg.max_depth);
        let n = k.normalize(&Vector2::new(u, v));
        let p = f32_point(to_world.apply(&Vector3::new(n.x * d, n.y * d, d)));
        if in_frustum(&k, &pose, &p, spec) {
            points.push(p);
        }
    }
    let half = cfg.max_translation + cfg.max_depth;
    let vertical = cfg.max_depth * (spec.height as f64 / 2.0) / k.fy + 2.0;
    while points.len() < cfg.points {
        points.push(f32_point(Vector3::new(
            rng.random_range(-half..half),
            rng.random_range(-vertical..vertical),
            rng.random_range(-half..half),
        )));
    }
    let cloud = PointCloud::new(points).expect("finite non-empty cloud");
    let image = render(&cloud, &k, &pose, spec, cfg.splat_radius);
    SyntheticScene { cloud, spec: *spec, intrinsics: k, pose, image, seed }
}

/// Ground truth at 1/4 scale: which cells see a point, and the front-most
/// point of every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTruth {
    pub labels: OverlapLabels,
    /// OR-pooled pixel mask on the 1/4-scale grid.
    pub cell_mask: Vec<bool>,
    /// Front-most point index per cell.
    pub front: Vec<Option<usize>>,
    pub cols: usize,
}

impl CellTruth {
    pub fn new(scene: &SyntheticScene) -> Self {
        let (k, pose, spec) = (&scene.intrinsics, &scene.pose, &scene.spec);
        let labels = label_overlap(k, pose, &scene.cloud, spec);
        let cell_mask = labels.pooled_pixel_mask(spec, 4);
        let cols = spec.width / 4;
        let mut front: Vec<Option<usize>> = vec![None; cell_mask.len()];
        let mut depth = vec![f64::INFINITY; cell_mask.len()];
        for (i, p) in scene.cloud.points().iter().enumerate() {
            if !labels.point_mask[i] {
                continue;
            }
            let uv = project_point(k, pose, p).expect("in frustum");
            let cell = cell_of(&uv, cols);
            let z = pose.apply(p).z;
            if z < depth[cell] {
                depth[cell] = z;
                front[cell] = Some(i);
            }
        }
        Self { labels, cell_mask, front, cols }
    }

    /// `(cell, point)` for every visible cell, in cell order.
    pub fn visible_pairs(&self) -> Vec<(usize, usize)> {
        self.front.iter().enumerate().filter_map(|(c, p)| p.map(|p| (c, p))).collect()
    }
}

pub fn frustum_fraction(scene: &SyntheticScene) -> f64 {
    let inside = scene
        .cloud
        .points()
        .iter()
        .filter(|p| in_frustum(&scene.intrinsics, &scene.pose, p, &scene.spec))
        .count();
    inside as f64 / scene.cloud.len() as f64
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, FormatError> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::Truncated { expected: pos + 1, found: bytes.len() });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(FormatError::BadMagic { expected: "P6" });
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| FormatError::Parse(format!("bad PPM header field {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(FormatError::Parse(format!("unsupported PPM max value {max}")));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h * 3 {
        return Err(FormatError::Truncated { expected: pos + 1 + w * h * 3, found: bytes.len() });
    }
    let data = body.iter().map(|b| *b as f64 / 255.0).collect();
    Image::new(w, h, data).map_err(|e| FormatError::Parse(e.to_string()))
}

pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    write_cloud(&dir.join("cloud.bin"), &scene.cloud)?;
    write_pose(&dir.join("pose.txt"), &scene.pose)?;
    write_intrinsics(&dir.join("intrinsics.txt"), &scene.intrinsics)?;
    write_atomic(&dir.join("image.ppm"), &encode_ppm(&scene.image))?;
    let mut meta = String::new();
    let _ = writeln!(meta, "seed={}", scene.seed);
    let _ = writeln!(meta, "width={}", scene.spec.width);
    let _ = writeln!(meta, "height={}", scene.spec.height);
    let _ = writeln!(meta, "points={}", scene.cloud.len());
    write_atomic(&dir.join("scene.txt"), meta.as_bytes())?;
    Ok(())
}

pub fn read_scene(dir: &Path) -> Result<SyntheticScene, HarnessError> {
    let meta_path = dir.join("scene.txt");
    let meta = fs::read_to_string(&meta_path).map_err(|e| FormatError::io(&meta_path, e))?;
    let data_err = |e: crate::kv::KvError| HarnessError::Data(format!("{}: {e}", meta_path.display()));
    let mut kv = KvMap::parse(&meta).map_err(data_err)?;
    let seed = kv.take::<u64>("seed").map_err(data_err)?.unwrap_or(0);
    let width = kv.take::<usize>("width").map_err(data_err)?;
    let height = kv.take::<usize>("height").map_err(data_err)?;
    let _ = kv.take::<usize>("points").map_err(data_err)?;
    kv.finish().map_err(data_err)?;
    let cloud = read_cloud(&dir.join("cloud.bin"))?;
    let pose = read_pose(&dir.join("pose.txt"))?;
    let intrinsics = read_intrinsics(&dir.join("intrinsics.txt"))?;
    let image_path = dir.join("image.ppm");
    let bytes = fs::read(&image_path).map_err(|e| FormatError::io(&image_path, e))?;
    let image = decode_ppm(&bytes)?;
    if Some(image.width) != width || Some(image.height) != height {
        return Err(HarnessError::Data(format!(
            "{}: image is {}x{}, scene.txt says {:?}x{:?}",
            dir.display(),
            image.width,
            image.height,
            width,
            height
        )));
    }
    let spec = ImageSpec::new(image.width, image.height)?;
    Ok(SyntheticScene { cloud, spec, intrinsics, pose, image, seed })
}
