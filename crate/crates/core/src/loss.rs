//! Training objective: cosine feature distance, a two-margin descriptor loss
//! with safe-radius hard-negative mining, the detector score loss and their
//! weighted sum. Every loss returns analytic gradients.

use std::fmt::Write as _;

use nalgebra::Vector2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::GroundTruthCorrespondences;
use crate::kv::{KvError, KvMap};

const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("feature vector has zero norm")]
    ZeroVector,
    #[error("need at least {needed} pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error("{category}: {available} available, {requested} requested")]
    InsufficientSamples { category: &'static str, available: usize, requested: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Pixels; candidates closer than this are never negatives.
    pub safe_radius: f64,
    pub pos_margin: f64,
    pub neg_margin: f64,
    pub lambda: f64,
    pub sample_pairs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { safe_radius: 1.0, pos_margin: 0.2, neg_margin: 1.8, lambda: 0.5, sample_pairs: 512 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let ok = self.safe_radius >= 0.0
            && 0.0 <= self.pos_margin
            && self.pos_margin < self.neg_margin
            && self.neg_margin <= 2.0
            && self.lambda >= 0.0
            && self.sample_pairs >= 1;
        if ok {
            Ok(())
        } else {
            Err(LossError::InvalidConfig(format!("{self:?}")))
        }
    }

    pub fn read_from(&mut self, kv: &mut KvMap) -> Result<(), KvError> {
        kv.take_into("safe_radius", &mut self.safe_radius)?;
        kv.take_into("pos_margin", &mut self.pos_margin)?;
        kv.take_into("neg_margin", &mut self.neg_margin)?;
        kv.take_into("lambda", &mut self.lambda)?;
        kv.take_into("sample_pairs", &mut self.sample_pairs)?;
        Ok(())
    }

    pub fn write_to(&self, out: &mut String) {
        let _ = writeln!(out, "safe_radius={}", self.safe_radius);
        let _ = writeln!(out, "pos_margin={}", self.pos_margin);
        let _ = writeln!(out, "neg_margin={}", self.neg_margin);
        let _ = writeln!(out, "lambda={}", self.lambda);
        let _ = writeln!(out, "sample_pairs={}", self.sample_pairs);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - <a, b> / (|a| |b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    if a.len() != b.len() {
        return Err(LossError::LengthMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(LossError::ZeroVector);
    }
    Ok((1.0 - dot(a, b) / (na * nb)).clamp(0.0, 2.0))
}

/// Adds `scale * ∂d(a, b)/∂a` to `ga` and `scale * ∂d(a, b)/∂b` to `gb`.
fn cosine_distance_grad(a: &[f64], b: &[f64], scale: f64, ga: &mut [f64], gb: &mut [f64]) {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    let cos = dot(a, b) / (na * nb);
    for k in 0..a.len() {
        ga[k] -= scale * (b[k] / (na * nb) - cos * a[k] / (na * na));
        gb[k] -= scale * (a[k] / (na * nb) - cos * b[k] / (nb * nb));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorLoss {
    pub loss: f64,
    pub d_pos: Vec<f64>,
    /// `None` where no pixel lies beyond the safe radius.
    pub d_neg: Vec<Option<f64>>,
    /// Pixel index chosen as hard negative for each point.
    pub hard_negatives: Vec<Option<usize>>,
    /// Pairs without an admissible negative; their negative term is 0.
    pub no_valid_negative: Vec<usize>,
    pub grad_image: Vec<Vec<f64>>,
    pub grad_points: Vec<Vec<f64>>,
}

/// Pair `i` is image feature `image[i]` at pixel `pixels[i]` and point
/// feature `points[i]`. The hard negative of `i` is the pixel feature `j`
/// with `|pixels[j] - pixels[i]| > R` closest to `points[i]`.
pub fn descriptor_loss(
    image: &[Vec<f64>],
    points: &[Vec<f64>],
    pixels: &[Vector2<f64>],
    cfg: &LossConfig,
) -> Result<DescriptorLoss, LossError> {
    cfg.validate()?;
    let n = image.len();
    if points.len() != n || pixels.len() != n {
        return Err(LossError::LengthMismatch(format!(
            "{n} image features, {} point features, {} pixels",
            points.len(),
            pixels.len()
        )));
    }
    if n < 2 {
        return Err(LossError::TooFewPairs { needed: 2, got: n });
    }
    let c = image[0].len();
    if image.iter().chain(points).any(|f| f.len() != c) {
        return Err(LossError::LengthMismatch("feature widths differ".into()));
    }

    let mut d_pos = Vec::with_capacity(n);
    let mut d_neg = Vec::with_capacity(n);
    let mut hard_negatives = Vec::with_capacity(n);
    let mut no_valid_negative = Vec::new();
    for i in 0..n {
        d_pos.push(cosine_distance(&image[i], &points[i])?);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if (pixels[j] - pixels[i]).norm() <= cfg.safe_radius {
                continue;
            }
            let d = cosine_distance(&image[j], &points[i])?;
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if best.is_none() {
            no_valid_negative.push(i);
        }
        hard_negatives.push(best.map(|b| b.0));
        d_neg.push(best.map(|b| b.1));
    }

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad_image = vec![vec![0.0; c]; n];
    let mut grad_points = vec![vec![0.0; c]; n];
    for i in 0..n {
        let pos = d_pos[i] - cfg.pos_margin;
        if pos > 0.0 {
            loss += pos;
            let (gi, gp) = (&mut grad_image[i], &mut grad_points[i]);
            cosine_distance_grad(&image[i], &points[i], inv_n, gi, gp);
        }
        if let (Some(j), Some(dn)) = (hard_negatives[i], d_neg[i]) {
            let neg = cfg.neg_margin - dn;
            if neg > 0.0 {
                loss += neg;
                let mut gi = vec![0.0; c];
                cosine_distance_grad(&image[j], &points[i], -inv_n, &mut gi, &mut grad_points[i]);
                grad_image[j].iter_mut().zip(&gi).for_each(|(g, v)| *g += v);
            }
        }
    }
    Ok(DescriptorLoss {
        loss: loss * inv_n,
        d_pos,
        d_neg,
        hard_negatives,
        no_valid_negative,
        grad_image,
        grad_points,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorLoss {
    pub loss: f64,
    /// Gradients in argument order: overlap image, overlap points,
    /// non-overlap image, non-overlap points.
    pub grads: [Vec<f64>; 4],
}

/// Mean negative score on overlap members plus mean score on non-overlap
/// members, for both modalities.
pub fn detector_loss(
    overlap_image: &[f64],
    overlap_points: &[f64],
    non_overlap_image: &[f64],
    non_overlap_points: &[f64],
) -> Result<DetectorLoss, LossError> {
    let n = overlap_image.len();
    if [overlap_points.len(), non_overlap_image.len(), non_overlap_points.len()].iter().any(|l| *l != n) {
        return Err(LossError::LengthMismatch(format!(
            "score lists of length {n}, {}, {}, {}",
            overlap_points.len(),
            non_overlap_image.len(),
            non_overlap_points.len()
        )));
    }
    if n == 0 {
        return Err(LossError::TooFewPairs { needed: 1, got: 0 });
    }
    let inv_n = 1.0 / n as f64;
    let sum = |s: &[f64]| s.iter().sum::<f64>();
    let loss = inv_n
        * (-sum(overlap_image) - sum(overlap_points) + sum(non_overlap_image) + sum(non_overlap_points));
    Ok(DetectorLoss {
        loss,
        grads: [vec![-inv_n; n], vec![-inv_n; n], vec![inv_n; n], vec![inv_n; n]],
    })
}

pub fn total_loss(desc: f64, det: f64, lambda: f64) -> f64 {
    desc + lambda * det
}

/// Indices drawn for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    /// Indices into the ground-truth pairs.
    pub pairs: Vec<usize>,
    /// Indices into the pixel mask.
    pub overlap_pixels: Vec<usize>,
    pub non_overlap_pixels: Vec<usize>,
    /// Indices into the point mask.
    pub overlap_points: Vec<usize>,
    pub non_overlap_points: Vec<usize>,
}

fn draw(
    rng: &mut ChaCha8Rng,
    members: &[usize],
    n: usize,
    category: &'static str,
) -> Result<Vec<usize>, LossError> {
    if members.len() < n {
        return Err(LossError::InsufficientSamples { category, available: members.len(), requested: n });
    }
    Ok(index::sample(rng, members.len(), n).iter().map(|k| members[k]).collect())
}

fn members(mask: &[bool], value: bool) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, m)| **m == value).map(|(i, _)| i).collect()
}

/// Uniform sampling without replacement of `n` members per category.
pub fn sample_training_batch(
    gt: &GroundTruthCorrespondences,
    pixel_mask: &[bool],
    point_mask: &[bool],
    n: usize,
    seed: u64,
) -> Result<TrainingBatch, LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all_pairs: Vec<usize> = (0..gt.pairs.len()).collect();
    Ok(TrainingBatch {
        pairs: draw(&mut rng, &all_pairs, n, "positive pairs")?,
        overlap_pixels: draw(&mut rng, &members(pixel_mask, true), n, "overlap pixels")?,
        non_overlap_pixels: draw(&mut rng, &members(pixel_mask, false), n, "non-overlap pixels")?,
        overlap_points: draw(&mut rng, &members(point_mask, true), n, "overlap points")?,
        non_overlap_points: draw(&mut rng, &members(point_mask, false), n, "non-overlap points")?,
    })
}
