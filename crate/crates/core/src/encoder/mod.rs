//! Toy-scale two-branch encoder with cross-attention fusion.
//!
//! Image branch: two patch stages at 1/16 and 1/32 scale. Point branch:
//! two farthest-point-sampling stages with k-NN grouping and max pooling.
//! Both levels are fused in both directions, decoded back to 1/4-scale
//! pixels and to every input point, and turned into overlap scores and
//! descriptors. Everything runs on a small reverse-mode [`tape::Tape`] so the
//! same forward pass serves inference and training.

pub mod decoder;
pub mod fusion;
pub mod image;
pub mod params;
pub mod points;
pub mod tape;

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::geometry::PointCloud;
use decoder::{decode_image, decode_points, HeadVars};
use fusion::{fuse_on, Direction};
pub use image::{embed_image, Image, ImageInputs};
pub use params::{ArchConfig, EncoderParams};
pub use points::{embed_points, PointHierarchy};
use tape::{Gradients, Mat, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cloud has {points} points, need at least {needed}")]
    TooFewPoints { points: usize, needed: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("overlap threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
}

/// Parameters bound as tape leaves, looked up by tensor name.
#[derive(Debug, Clone)]
pub struct Layers {
    order: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl Layers {
    pub fn bind(tape: &mut Tape, params: &EncoderParams) -> Self {
        let mut order = Vec::with_capacity(params.len());
        let mut by_name = HashMap::with_capacity(params.len());
        for t in params.tensors() {
            let v = tape.leaf(t.as_mat());
            order.push(v);
            by_name.insert(t.name.clone(), v);
        }
        Self { order, by_name }
    }

    pub fn var(&self, name: &str) -> Var {
        match self.by_name.get(name) {
            Some(v) => *v,
            None => panic!("no tensor named {name}"),
        }
    }

    /// `x W + b` using `<name>.w` and `<name>.b`.
    pub fn dense(&self, tape: &mut Tape, x: Var, name: &str) -> Var {
        tape.linear(x, self.var(&format!("{name}.w")), self.var(&format!("{name}.b")))
    }

    /// Two tanh layers, `<prefix>.l1` then `<prefix>.l2`.
    pub fn mlp2(&self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        let h = self.dense(tape, x, &format!("{prefix}.l1"));
        let h = tape.tanh(h);
        let h = self.dense(tape, h, &format!("{prefix}.l2"));
        tape.tanh(h)
    }

    /// Flattened gradient of every tensor, in parameter order (zeros for
    /// tensors the output does not depend on).
    pub fn param_grads(&self, grads: &Gradients, params: &EncoderParams) -> Vec<Vec<f64>> {
        self.order
            .iter()
            .zip(params.tensors())
            .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.data.len()], |g| g.data.clone()))
            .collect()
    }
}

/// Handles to the interesting nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub image: HeadVars,
    pub points: HeadVars,
    /// Attention matrices: image-to-point level 1 and 2, then
    /// point-to-image level 1 and 2.
    pub attention: [Var; 4],
}

pub fn forward_on(
    tape: &mut Tape,
    layers: &Layers,
    inputs: &ImageInputs,
    hierarchy: &PointHierarchy,
) -> ForwardVars {
    let img = image::embed_image_on(tape, layers, inputs);
    let pts = points::embed_points_on(tape, layers, hierarchy);
    let i2p1 = fuse_on(tape, layers, Direction::ImageToPoint, 1, img.global, pts.f1, img.f1);
    let i2p2 = fuse_on(tape, layers, Direction::ImageToPoint, 2, img.global, pts.f2, img.f2);
    let p2i1 = fuse_on(tape, layers, Direction::PointToImage, 1, pts.global, img.f1, pts.f1);
    let p2i2 = fuse_on(tape, layers, Direction::PointToImage, 2, pts.global, img.f2, pts.f2);
    let image = decode_image(tape, layers, inputs, img.f1, img.f2, p2i1.fused, p2i2.fused);
    let points = decode_points(tape, layers, hierarchy, pts.f1, pts.f2, i2p1.fused, i2p2.fused);
    ForwardVars {
        image,
        points,
        attention: [i2p1.weights, i2p2.weights, p2i1.weights, p2i2.weights],
    }
}

/// Per-cell outputs on the 1/4-scale grid, raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
    pub desc: Mat,
}

/// Per-point outputs, in cloud order.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    pub scores: Vec<f64>,
    pub desc: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub image: ImageFeatures,
    pub points: PointFeatures,
}

/// Full forward pass with the configured neighbourhood size.
pub fn run(
    image: &Image,
    cloud: &PointCloud,
    params: &EncoderParams,
    cfg: &ArchConfig,
) -> Result<EncoderOutput, EncoderError> {
    run_with_k(image, cloud, params, cfg, cfg.k)
}

/// Forward pass with an overridden k-NN size (used by density sweeps).
pub fn run_with_k(
    image: &Image,
    cloud: &PointCloud,
    params: &EncoderParams,
    cfg: &ArchConfig,
    k: usize,
) -> Result<EncoderOutput, EncoderError> {
    cfg.validate()?;
    params.check_shapes(cfg)?;
    let inputs = ImageInputs::new(image, cfg)?;
    let hierarchy = PointHierarchy::build(cloud, cfg, k)?;
    let mut tape = Tape::new();
    let layers = Layers::bind(&mut tape, params);
    let vars = forward_on(&mut tape, &layers, &inputs, &hierarchy);
    Ok(collect_outputs(&tape, &vars, cfg))
}

pub fn collect_outputs(tape: &Tape, vars: &ForwardVars, cfg: &ArchConfig) -> EncoderOutput {
    let (rows, cols) = cfg.grids()[2];
    EncoderOutput {
        image: ImageFeatures {
            rows,
            cols,
            scores: tape.value(vars.image.score).data.clone(),
            desc: tape.value(vars.image.desc).clone(),
        },
        points: PointFeatures {
            scores: tape.value(vars.points.score).data.clone(),
            desc: tape.value(vars.points.desc).clone(),
        },
    }
}

/// Pixel centre of 1/4-scale cell `index` on a grid `cols` wide.
pub fn cell_centre(index: usize, cols: usize) -> Vector2<f64> {
    let (i, j) = (index / cols, index % cols);
    Vector2::new(4.0 * j as f64 + 2.0, 4.0 * i as f64 + 2.0)
}

/// Inverse of [`cell_centre`] for any pixel position inside the image.
pub fn cell_of(uv: &Vector2<f64>, cols: usize) -> usize {
    (uv.y / 4.0).floor() as usize * cols + (uv.x / 4.0).floor() as usize
}

/// Pixels and points predicted to be in the overlap region.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OverlapSet {
    pub image_coords: Vec<Vector2<f64>>,
    pub image_desc: Vec<Vec<f64>>,
    pub point_coords: Vec<Vector3<f64>>,
    pub point_desc: Vec<Vec<f64>>,
    /// Index of each selected point in the cloud.
    pub point_indices: Vec<usize>,
}

/// Keeps cells and points whose score strictly exceeds `threshold`.
pub fn detect_overlap(
    image: &ImageFeatures,
    points: &PointFeatures,
    cloud: &PointCloud,
    threshold: f64,
) -> Result<OverlapSet, EncoderError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(EncoderError::InvalidThreshold(threshold));
    }
    if points.scores.len() != cloud.len() || points.desc.rows != cloud.len() {
        return Err(EncoderError::ShapeMismatch(format!(
            "{} point scores for {} points",
            points.scores.len(),
            cloud.len()
        )));
    }
    let mut out = OverlapSet::default();
    for (idx, s) in image.scores.iter().enumerate() {
        if *s > threshold {
            out.image_coords.push(cell_centre(idx, image.cols));
            out.image_desc.push(image.desc.row(idx).to_vec());
        }
    }
    for (idx, s) in points.scores.iter().enumerate() {
        if *s > threshold {
            out.point_coords.push(cloud.points()[idx]);
            out.point_desc.push(points.desc.row(idx).to_vec());
            out.point_indices.push(idx);
        }
    }
    Ok(out)
}
