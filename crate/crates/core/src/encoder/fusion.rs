//! Cross-attention fusion between the two modalities.
//!
//! Image-to-point fusion predicts, for every point node, a distribution over
//! the image cells of the same level from the node feature and the global
//! image feature, and returns the attention-weighted image features. The
//! point-to-image direction is symmetric with the roles swapped.

use super::params::{ArchConfig, EncoderParams};
use super::tape::{Mat, Tape, Var};
use super::{EncoderError, Layers};

/// Which way information flows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Image features gathered onto point nodes.
    ImageToPoint,
    /// Point features gathered onto image cells.
    PointToImage,
}

impl Direction {
    fn prefix(self, level: usize) -> String {
        match self {
            Direction::ImageToPoint => format!("i2p.{level}"),
            Direction::PointToImage => format!("p2i.{level}"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    /// Row-stochastic attention, `queries x values`.
    pub weights: Var,
    /// `weights * values`.
    pub fused: Var,
}

/// `queries` are features of the receiving modality, `values` those of the
/// other one, `global` the other modality's global feature (one row).
pub fn fuse_on(
    tape: &mut Tape,
    layers: &Layers,
    direction: Direction,
    level: usize,
    global: Var,
    queries: Var,
    values: Var,
) -> FusionVars {
    let prefix = direction.prefix(level);
    let rows = tape.value(queries).rows;
    let g = tape.broadcast(global, rows);
    let x = tape.concat(&[g, queries]);
    let h = layers.dense(tape, x, &format!("{prefix}.l1"));
    let h = tape.tanh(h);
    let logits = layers.dense(tape, h, &format!("{prefix}.l2"));
    let weights = tape.softmax_rows(logits);
    let fused = tape.matmul(weights, values);
    FusionVars { weights, fused }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub weights: Mat,
    pub fused: Mat,
}

/// Stand-alone evaluation of one fusion block.
pub fn fuse(
    params: &EncoderParams,
    cfg: &ArchConfig,
    direction: Direction,
    level: usize,
    global: &[f64],
    queries: &Mat,
    values: &Mat,
) -> Result<FusionOutput, EncoderError> {
    params.check_shapes(cfg)?;
    if !(1..=2).contains(&level) {
        return Err(EncoderError::Config(format!("fusion level must be 1 or 2, got {level}")));
    }
    let w = cfg.widths();
    let width = if level == 1 { w.d1 } else { w.d2 };
    let [(h1, w1), (h2, w2), _] = cfg.grids();
    let (query_rows, value_rows) = match (direction, level) {
        (Direction::ImageToPoint, 1) => (cfg.n1, h1 * w1),
        (Direction::ImageToPoint, _) => (cfg.n2, h2 * w2),
        (Direction::PointToImage, 1) => (h1 * w1, cfg.n1),
        (Direction::PointToImage, _) => (h2 * w2, cfg.n2),
    };
    if global.len() != w.d2
        || queries.cols != width
        || values.cols != width
        || queries.rows != query_rows
        || values.rows != value_rows
    {
        return Err(EncoderError::ShapeMismatch(format!(
            "fusion level {level}: global {} queries {}x{} values {}x{}, expected {} / {query_rows}x{width} / {value_rows}x{width}",
            global.len(),
            queries.rows,
            queries.cols,
            values.rows,
            values.cols,
            w.d2
        )));
    }
    let mut tape = Tape::new();
    let layers = Layers::bind(&mut tape, params);
    let g = tape.leaf(Mat::from_vec(1, global.len(), global.to_vec()));
    let q = tape.leaf(queries.clone());
    let v = tape.leaf(values.clone());
    let out = fuse_on(&mut tape, &layers, direction, level, g, q, v);
    Ok(FusionOutput { weights: tape.value(out.weights).clone(), fused: tape.value(out.fused).clone() })
}
