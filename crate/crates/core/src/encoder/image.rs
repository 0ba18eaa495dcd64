//! Image side: input image type, the two-stage patch encoder and pixel
//! shuffling.
//!
//! Stage 1 averages 4x4 pixel blocks, gathers 4x4 of those into one
//! 48-channel patch per 1/16-scale cell and runs a shared two-layer network.
//! Stage 2 concatenates 2x2 stage-1 cells and runs a second shared network.
//! Patches never overlap, so a cyclic shift of the input by 32 pixels is an
//! exact column rotation of the stage-2 grid.

use super::params::{ArchConfig, EncoderParams};
use super::tape::{Mat, Tape, Var};
use super::{EncoderError, Layers};

/// Row-major `H x W x 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, EncoderError> {
        if data.len() != width * height * 3 {
            return Err(EncoderError::ShapeMismatch(format!(
                "image data has {} values, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * 3;
        &self.data[i..i + 3]
    }

    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let i = (v * self.width + u) * 3;
        &mut self.data[i..i + 3]
    }

    /// Cyclic shift to the right by `du` columns.
    pub fn shifted_columns(&self, du: usize) -> Image {
        let mut out = Image::zeros(self.width, self.height);
        for v in 0..self.height {
            for u in 0..self.width {
                out.pixel_mut((u + du) % self.width, v).copy_from_slice(self.pixel(u, v));
            }
        }
        out
    }
}

/// Parameter-free tensors derived from the image.
#[derive(Debug, Clone)]
pub struct ImageInputs {
    /// 1/4-scale block means, `(H/4 * W/4) x 3`.
    pub pooled: Mat,
    /// Stage-1 patches, `(H/16 * W/16) x 48`.
    pub patches: Mat,
    pub grids: [(usize, usize); 3],
}

impl ImageInputs {
    pub fn new(img: &Image, cfg: &ArchConfig) -> Result<Self, EncoderError> {
        if img.width != cfg.width || img.height != cfg.height {
            return Err(EncoderError::ShapeMismatch(format!(
                "image is {}x{}, network expects {}x{}",
                img.width, img.height, cfg.width, cfg.height
            )));
        }
        let grids = cfg.grids();
        let (h4, w4) = grids[2];
        let mut pooled = Mat::zeros(h4 * w4, 3);
        for v in 0..img.height {
            for u in 0..img.width {
                let row = pooled.row_mut((v / 4) * w4 + u / 4);
                for (o, p) in row.iter_mut().zip(img.pixel(u, v)) {
                    *o += p / 16.0;
                }
            }
        }
        let (h1, w1) = grids[0];
        let mut patches = Mat::zeros(h1 * w1, 48);
        for i in 0..h1 {
            for j in 0..w1 {
                let row = patches.row_mut(i * w1 + j);
                for a in 0..4 {
                    for b in 0..4 {
                        let src = pooled.row((4 * i + a) * w4 + 4 * j + b);
                        row[(a * 4 + b) * 3..(a * 4 + b) * 3 + 3].copy_from_slice(src);
                    }
                }
            }
        }
        Ok(Self { pooled, patches, grids })
    }
}

/// Source row (in the `4 * h * w` reshaped layout) of every output cell of a
/// 2x pixel shuffle from an `h x w` grid to `2h x 2w`, raster order.
pub fn shuffle_index(h: usize, w: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(4 * h * w);
    for i in 0..2 * h {
        for j in 0..2 * w {
            index.push(((i / 2) * w + j / 2) * 4 + (i % 2) * 2 + j % 2);
        }
    }
    index
}

/// 2x pixel shuffle of an `(h*w) x (4*d)` map into `(2h*2w) x d`.
pub fn pixel_shuffle(tape: &mut Tape, x: Var, h: usize, w: usize) -> Var {
    let cols = tape.value(x).cols / 4;
    let flat = tape.reshape(x, h * w * 4, cols);
    tape.gather(flat, shuffle_index(h, w), 1)
}

fn stage2_index(grids: &[(usize, usize); 3]) -> Vec<usize> {
    let ((_, w1), (h2, w2)) = (grids[0], grids[1]);
    let mut index = Vec::with_capacity(h2 * w2 * 4);
    for i in 0..h2 {
        for j in 0..w2 {
            for a in 0..2 {
                for b in 0..2 {
                    index.push((2 * i + a) * w1 + 2 * j + b);
                }
            }
        }
    }
    index
}

#[derive(Debug, Clone, Copy)]
pub struct ImageEmbeddingVars {
    pub f1: Var,
    pub f2: Var,
    pub global: Var,
}

pub fn embed_image_on(tape: &mut Tape, layers: &Layers, inputs: &ImageInputs) -> ImageEmbeddingVars {
    let x = tape.leaf(inputs.patches.clone());
    let f1 = layers.mlp2(tape, x, "img.s1");
    let grouped = tape.gather(f1, stage2_index(&inputs.grids), 4);
    let f2 = layers.mlp2(tape, grouped, "img.s2");
    let rows = tape.value(f2).rows;
    let global = tape.max_pool(f2, rows);
    ImageEmbeddingVars { f1, f2, global }
}

/// Hierarchical image embedding: `f1` at 1/16 scale, `f2` at 1/32 scale
/// (rows in raster order) and the global max-pooled feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub f1: Mat,
    pub f2: Mat,
    pub global: Vec<f64>,
}

pub fn embed_image(
    img: &Image,
    params: &EncoderParams,
    cfg: &ArchConfig,
) -> Result<ImageEmbedding, EncoderError> {
    params.check_shapes(cfg)?;
    let inputs = ImageInputs::new(img, cfg)?;
    let mut tape = Tape::new();
    let layers = Layers::bind(&mut tape, params);
    let vars = embed_image_on(&mut tape, &layers, &inputs);
    Ok(ImageEmbedding {
        f1: tape.value(vars.f1).clone(),
        f2: tape.value(vars.f2).clone(),
        global: tape.value(vars.global).data.clone(),
    })
}
