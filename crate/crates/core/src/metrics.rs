//! Evaluation: pose errors, success-filtered statistics, recall curves,
//! feature-matching recall, overlap precision/recall/F2 and histograms.

use log::warn;
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{Intrinsics, RigidTransform};
use crate::matcher::{match_statistics, CorrespondenceSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mask shapes differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalThresholds {
    /// Meters.
    pub rte_max: f64,
    /// Degrees.
    pub rre_max: f64,
    /// Inlier distance in pixels.
    pub tau1: f64,
    /// Inlier ratio.
    pub tau2: f64,
    pub rte_grid: Vec<f64>,
    pub rre_grid: Vec<f64>,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self {
            rte_max: 5.0,
            rre_max: 10.0,
            tau1: 2.0,
            tau2: 0.05,
            rte_grid: (1..=20).map(|i| 0.5 * i as f64).collect(),
            rre_grid: (1..=20).map(|i| i as f64).collect(),
        }
    }
}

impl EvalThresholds {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let increasing = |g: &[f64]| g.windows(2).all(|w| w[0] < w[1]) && g.iter().all(|v| *v > 0.0);
        if !(self.rte_max > 0.0 && self.rre_max > 0.0 && self.tau1 > 0.0 && self.tau2 > 0.0) {
            return Err(MetricsError::InvalidThresholds("thresholds must be positive".into()));
        }
        if !increasing(&self.rte_grid) || !increasing(&self.rre_grid) {
            return Err(MetricsError::InvalidThresholds("grids must be positive and strictly increasing".into()));
        }
        Ok(())
    }
}

/// Intrinsic XYZ Euler angles `(a, b, c)` in radians with `R = Rx(a) Ry(b) Rz(c)`.
pub fn euler_xyz(r: &Matrix3<f64>) -> Vector3<f64> {
    let b = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
    Vector3::new(a, b, c)
}

/// Sum of absolute Euler angles of `R_gt^-1 R_e`, in degrees.
pub fn rre(r_gt: &Matrix3<f64>, r_e: &Matrix3<f64>) -> f64 {
    let g = euler_xyz(&(r_gt.transpose() * r_e));
    g.iter().map(|v| v.abs()).sum::<f64>().to_degrees()
}

pub fn rte(t_gt: &Vector3<f64>, t_e: &Vector3<f64>) -> f64 {
    (t_gt - t_e).norm()
}

/// `(rte, rre)` between two poses.
pub fn pose_errors(gt: &RigidTransform, est: &RigidTransform) -> (f64, f64) {
    (rte(gt.translation(), est.translation()), rre(gt.rotation(), est.rotation()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessStats {
    /// `None` when nothing succeeded.
    pub rte: Option<MeanStd>,
    pub rre: Option<MeanStd>,
    pub successes: usize,
    pub total: usize,
    pub success_rate: f64,
}

pub fn is_success(rte: f64, rre: f64, t: &EvalThresholds) -> bool {
    rte < t.rte_max && rre < t.rre_max
}

/// Statistics over the pairs with `rte < rte_max` and `rre < rre_max`.
pub fn success_filtered_stats(errors: &[(f64, f64)], t: &EvalThresholds) -> SuccessStats {
    let ok: Vec<(f64, f64)> = errors.iter().copied().filter(|(a, b)| is_success(*a, *b, t)).collect();
    let rtes: Vec<f64> = ok.iter().map(|e| e.0).collect();
    let rres: Vec<f64> = ok.iter().map(|e| e.1).collect();
    SuccessStats {
        rte: MeanStd::of(&rtes),
        rre: MeanStd::of(&rres),
        successes: ok.len(),
        total: errors.len(),
        success_rate: if errors.is_empty() { 0.0 } else { ok.len() as f64 / errors.len() as f64 },
    }
}

/// `curve[a][b]` is the fraction of pairs with `rte <= rte_grid[a]` and
/// `rre <= rre_grid[b]`.
pub fn registration_recall_curve(errors: &[(f64, f64)], rte_grid: &[f64], rre_grid: &[f64]) -> Vec<Vec<f64>> {
    let n = errors.len().max(1) as f64;
    rte_grid
        .iter()
        .map(|&a| {
            rre_grid
                .iter()
                .map(|&b| errors.iter().filter(|(t, r)| *t <= a && *r <= b).count() as f64 / n)
                .collect()
        })
        .collect()
}

/// Correspondences of one image/cloud pair with the ground truth needed to
/// score them.
#[derive(Debug, Clone, Copy)]
pub struct Fragment<'a> {
    pub correspondences: &'a CorrespondenceSet,
    pub pose: &'a RigidTransform,
    pub intrinsics: &'a Intrinsics,
}

/// Fraction of matches whose pixel lies strictly within `tau1` of the
/// ground-truth projection. `None` for an empty fragment.
pub fn inlier_ratio(f: &Fragment, tau1: f64) -> Option<f64> {
    if f.correspondences.is_empty() {
        return None;
    }
    let residuals = match_statistics(f.correspondences, f.intrinsics, f.pose);
    let inliers = residuals.iter().filter(|r| r.is_some_and(|d| d < tau1)).count();
    Some(inliers as f64 / residuals.len() as f64)
}

fn ratios(fragments: &[Fragment], tau1: f64) -> Vec<f64> {
    fragments
        .iter()
        .enumerate()
        .filter_map(|(i, f)| {
            let r = inlier_ratio(f, tau1);
            if r.is_none() {
                warn!("fragment {i} has no correspondences; excluded");
            }
            r
        })
        .collect()
}

/// Mean per-fragment inlier ratio (empty fragments excluded).
pub fn pair_recall(fragments: &[Fragment], tau1: f64) -> f64 {
    let r = ratios(fragments, tau1);
    if r.is_empty() {
        0.0
    } else {
        r.iter().sum::<f64>() / r.len() as f64
    }
}

/// Fraction of fragments whose inlier ratio is strictly above `tau2`.
pub fn fragment_recall(fragments: &[Fragment], tau1: f64, tau2: f64) -> f64 {
    let r = ratios(fragments, tau1);
    if r.is_empty() {
        0.0
    } else {
        r.iter().filter(|v| **v > tau2).count() as f64 / r.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
}

/// `5PR / (4P + R)`, 0 when both are 0.
pub fn f2_score(precision: f64, recall: f64) -> f64 {
    let den = 4.0 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        5.0 * precision * recall / den
    }
}

pub fn overlap_prf(predicted: &[bool], truth: &[bool]) -> Result<Prf, MetricsError> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::ShapeMismatch(predicted.len(), truth.len()));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let (precision, recall) = (ratio(tp, fp), ratio(tp, fneg));
    Ok(Prf { precision, recall, f2: f2_score(precision, recall) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    /// `counts[i]` covers `[i w, (i+1) w)`; the last bin also takes
    /// everything beyond.
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bin_width: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let mut counts = vec![0; bins];
        for v in values {
            let b = ((v / bin_width).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self { bin_width, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn percentages(&self) -> Vec<f64> {
        let total = self.total();
        self.counts
            .iter()
            .map(|c| if total == 0 { 0.0 } else { 100.0 * *c as f64 / total as f64 })
            .collect()
    }

    /// `lower,upper,count,percent` rows; the overflow bin has upper `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower,upper,count,percent\n");
        let last = self.counts.len() - 1;
        for (i, (c, p)) in self.counts.iter().zip(self.percentages()).enumerate() {
            let lo = i as f64 * self.bin_width;
            let hi = if i == last { "inf".to_string() } else { format!("{}", (i + 1) as f64 * self.bin_width) };
            out.push_str(&format!("{lo},{hi},{c},{p:.4}\n"));
        }
        out
    }
}

/// RTE and RRE histograms.
pub fn error_histograms(errors: &[(f64, f64)], rte_bin: f64, rre_bin: f64, bins: usize) -> (Histogram, Histogram) {
    let rtes: Vec<f64> = errors.iter().map(|e| e.0).collect();
    let rres: Vec<f64> = errors.iter().map(|e| e.1).collect();
    (Histogram::new(&rtes, rte_bin, bins), Histogram::new(&rres, rre_bin, bins))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::Correspondence;
    use nalgebra::{Rotation3, Vector2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_axis_rotations() {
        for axis in [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()] {
            let r = Rotation3::from_axis_angle(&axis, 10f64.to_radians());
            assert!((rre(&Matrix3::identity(), r.matrix()) - 10.0).abs() < 1e-9);
        }
        let r = Rotation3::from_euler_angles(0.3, -0.2, 1.0);
        assert_eq!(rre(r.matrix(), r.matrix()), 0.0);
    }

    #[test]
    fn euler_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (a, b, c) = (rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0));
            let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), a);
            let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), b);
            let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), c);
            let r = (rx * ry * rz).into_inner();
            let e = euler_xyz(&r);
            assert!((e - Vector3::new(a, b, c)).norm() < 1e-9);
            let expected = (a.abs() + b.abs() + c.abs()).to_degrees();
            assert!((rre(&Matrix3::identity(), &r) - expected).abs() < 1e-7);
        }
    }

    #[test]
    fn rte_cases() {
        assert_eq!(rte(&Vector3::zeros(), &Vector3::new(3.0, 4.0, 0.0)), 5.0);
        assert_eq!(rte(&Vector3::new(1.0, 2.0, 3.0), &Vector3::new(1.0, 2.0, 3.0)), 0.0);
    }

    proptest! {
        #[test]
        fn rte_is_a_metric(a in proptest::array::uniform3(-50.0f64..50.0),
                           b in proptest::array::uniform3(-50.0f64..50.0),
                           c in proptest::array::uniform3(-50.0f64..50.0)) {
            let (a, b, c) = (Vector3::from(a), Vector3::from(b), Vector3::from(c));
            prop_assert_eq!(rte(&a, &b), rte(&b, &a));
            prop_assert!(rte(&a, &c) <= rte(&a, &b) + rte(&b, &c) + 1e-12);
        }

        #[test]
        fn rre_nonnegative(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
            let r = Rotation3::from_scaled_axis(Vector3::new(x, y, z));
            prop_assert!(rre(&Matrix3::identity(), r.matrix()) >= 0.0);
        }

        #[test]
        fn recall_curve_monotone(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let errs: Vec<(f64, f64)> = (0..30).map(|_| (rng.random_range(0.0..12.0), rng.random_range(0.0..25.0))).collect();
            let t = EvalThresholds::default();
            let curve = registration_recall_curve(&errs, &t.rte_grid, &t.rre_grid);
            for a in 0..curve.len() {
                for b in 0..curve[a].len() {
                    if a > 0 { prop_assert!(curve[a][b] >= curve[a - 1][b]); }
                    if b > 0 { prop_assert!(curve[a][b] >= curve[a][b - 1]); }
                }
            }
        }

        #[test]
        fn f2_equals_p_when_p_equals_r(p in 0.0f64..1.0) {
            prop_assert!((f2_score(p, p) - p).abs() < 1e-15);
        }
    }

    #[test]
    fn success_stats() {
        let t = EvalThresholds::default();
        let s = success_filtered_stats(&[(1.0, 2.0), (3.0, 4.0)], &t);
        assert_eq!(s.rte, Some(MeanStd { mean: 2.0, std: 1.0 }));
        assert_eq!(s.success_rate, 1.0);
        let s = success_filtered_stats(&[(1.0, 2.0), (5.0, 1.0), (1.0, 10.0)], &t);
        assert_eq!(s.successes, 1);
        assert_eq!(s.rre.unwrap().std, 0.0);
        let s = success_filtered_stats(&[(9.0, 2.0)], &t);
        assert_eq!((s.rte, s.success_rate), (None, 0.0));
    }

    #[test]
    fn recall_curve_extremes() {
        let errs = [(1.0, 1.0), (2.0, 3.0)];
        assert_eq!(registration_recall_curve(&errs, &[f64::INFINITY], &[f64::INFINITY]), vec![vec![1.0]]);
        assert_eq!(registration_recall_curve(&errs, &[0.0], &[0.0]), vec![vec![0.0]]);
    }

    fn fragment_set(displacements: &[f64]) -> CorrespondenceSet {
        CorrespondenceSet {
            pairs: displacements
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let xyz = Vector3::new(i as f64 * 0.1, 0.0, 5.0);
                    let uv = Vector2::new(100.0 * xyz.x / 5.0 + 50.0 + d, 50.0);
                    Correspondence { uv, xyz, point_index: i, feature_distance: 0.0 }
                })
                .collect(),
        }
    }

    #[test]
    fn feature_matching_recall() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap();
        let pose = RigidTransform::identity();
        let exact = fragment_set(&[0.0; 4]);
        let off = fragment_set(&[4.0; 4]);
        let half = fragment_set(&[0.0, 0.0, 4.0, 4.0]);
        let frag = |c| Fragment { correspondences: c, pose: &pose, intrinsics: &k };
        assert_eq!(pair_recall(&[frag(&exact)], 2.0), 1.0);
        assert_eq!(pair_recall(&[frag(&off)], 2.0), 0.0);
        assert_eq!(pair_recall(&[frag(&exact), frag(&half)], 2.0), 0.75);
        assert_eq!(fragment_recall(&[frag(&exact)], 2.0, 0.99), 1.0);
        assert_eq!(fragment_recall(&[frag(&exact)], 2.0, 1.0), 0.0);
        assert_eq!(fragment_recall(&[frag(&half), frag(&off)], 2.0, 0.05), 0.5);
        let empty = CorrespondenceSet::default();
        assert_eq!(pair_recall(&[frag(&empty), frag(&exact)], 2.0), 1.0);
    }

    #[test]
    fn prf_cases() {
        let p = overlap_prf(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!(p, Prf { precision: 1.0, recall: 1.0, f2: 1.0 });
        let p = overlap_prf(&[true, true, false], &[true, false, true]).unwrap();
        assert_eq!((p.precision, p.recall, p.f2), (0.5, 0.5, 0.5));
        assert_eq!(overlap_prf(&[false], &[false]).unwrap().f2, 0.0);
        assert!(overlap_prf(&[true], &[true, false]).is_err());
        assert!((f2_score(0.946, 0.935) - 0.938).abs() < 0.002);
    }

    #[test]
    fn histograms() {
        let (a, b) = error_histograms(&[(0.3, 12.0)], 1.0, 2.0, 10);
        assert_eq!(a.counts.iter().filter(|c| **c > 0).count(), 1);
        assert_eq!(b.counts[6], 1);
        let (a, _) = error_histograms(&[], 1.0, 1.0, 5);
        assert!(a.counts.iter().all(|c| *c == 0));
        assert!(a.percentages().iter().all(|p| *p == 0.0));
        let (a, _) = error_histograms(&[(100.0, 0.0), (2.5, 0.0)], 1.0, 1.0, 5);
        assert_eq!(a.counts, vec![0, 0, 1, 0, 1]);
        assert_eq!(a.total(), 2);
    }
}
