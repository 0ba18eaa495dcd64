//! Oracle descriptors: features computed from ground truth instead of a
//! network, so matching, pose estimation and evaluation can be exercised
//! without training.
//!
//! Every point gets a pseudo-random unit vector derived from its
//! coordinates. Each 1/4-scale cell takes the vector of the front-most point
//! projecting into it plus Gaussian noise; occluded points therefore have no
//! matching cell. True overlap members score 0.99, everything else 0.01, and
//! each true member is independently demoted to 0.01 with the corruption
//! probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::tape::Mat;
use crate::encoder::{ImageFeatures, PointFeatures};
use crate::matcher::normalized;

use super::config::OracleConfig;
use super::scene::{CellTruth, SyntheticScene};

pub const HIGH_SCORE: f64 = 0.99;
pub const LOW_SCORE: f64 = 0.01;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Unit vector of length `dim` determined by the bit pattern of `p`.
pub fn position_code(p: &nalgebra::Vector3<f64>, dim: usize) -> Vec<f64> {
    let h = [p.x, p.y, p.z].iter().fold(0u64, |acc, v| splitmix64(acc ^ v.to_bits()));
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalized(&raw)
}

pub fn oracle_descriptors(
    scene: &SyntheticScene,
    truth: &CellTruth,
    cfg: &OracleConfig,
    seed: u64,
) -> (ImageFeatures, PointFeatures) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = scene.cloud.len();
    let mut point_desc = Mat::zeros(n, cfg.dim);
    for (i, p) in scene.cloud.points().iter().enumerate() {
        point_desc.row_mut(i).copy_from_slice(&position_code(p, cfg.dim));
    }
    let mut point_scores = Vec::with_capacity(n);
    for &inside in &truth.labels.point_mask {
        let corrupt = rng.random::<f64>() < cfg.corruption;
        point_scores.push(if inside && !corrupt { HIGH_SCORE } else { LOW_SCORE });
    }

    let cells = truth.cell_mask.len();
    let mut image_desc = Mat::zeros(cells, cfg.dim);
    let mut image_scores = Vec::with_capacity(cells);
    for cell in 0..cells {
        let corrupt = rng.random::<f64>() < cfg.corruption;
        image_scores.push(if truth.cell_mask[cell] && !corrupt { HIGH_SCORE } else { LOW_SCORE });
        if let Some(p) = truth.front[cell] {
            let row = image_desc.row_mut(cell);
            row.copy_from_slice(point_desc.row(p));
            if cfg.noise_sigma > 0.0 {
                for v in row.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += cfg.noise_sigma * e;
                }
            }
        }
    }
    let rows = truth.cell_mask.len() / truth.cols;
    (
        ImageFeatures { rows, cols: truth.cols, scores: image_scores, desc: image_desc },
        PointFeatures { scores: point_scores, desc: point_desc },
    )
}
