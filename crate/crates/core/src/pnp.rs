//! Camera pose from 2D-3D correspondences: EPnP and a RANSAC wrapper.
//!
//! The EPnP solver expresses every world point as a barycentric combination
//! of control points (centroid plus principal directions scaled by the
//! spread of the data), solves for the camera-frame control points in the
//! null space of the projection constraints, and aligns the two control
//! point sets with orthogonal Procrustes. Planar inputs use three control
//! points. Null-space dimensions 1, 2 and 3 are tried; each candidate is
//! polished with 10 Gauss-Newton steps on the control-point distances.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{nearest_rotation, Intrinsics, RigidTransform, MIN_DEPTH};

/// Smallest-to-largest principal spread ratio below which the point set is
/// treated as planar.
const PLANAR_RATIO: f64 = 1e-5;
/// Below this ratio the second direction is missing too: collinear input.
const COLLINEAR_RATIO: f64 = 1e-9;
const GAUSS_NEWTON_STEPS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no candidate pose places at least half of the points in front of the camera")]
    CheiralityFailure,
    #[error("every sampled minimal set was degenerate")]
    NoHypothesis,
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("invalid RANSAC configuration: {0}")]
    InvalidConfig(String),
}

/// A pixel and the cloud point it observes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpPair {
    pub uv: Vector2<f64>,
    pub xyz: Vector3<f64>,
}

/// Reprojection distance in pixels; `+∞` when the point is behind the camera.
pub fn reprojection_error(pose: &RigidTransform, k: &Intrinsics, pair: &PnpPair) -> f64 {
    match k.project_camera(&pose.apply(&pair.xyz)) {
        Ok(uv) => (uv - pair.uv).norm(),
        Err(_) => f64::INFINITY,
    }
}

struct ControlFrame {
    world: Vec<Vector3<f64>>,
    alphas: Vec<Vec<f64>>,
}

fn control_frame(points: &[Vector3<f64>]) -> Result<ControlFrame, PnpError> {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let spread: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()).collect();
    let axes: Vec<Vector3<f64>> = order.iter().map(|&i| eig.eigenvectors.column(i).into()).collect();

    let scale = points.iter().map(|p| p.norm()).fold(1.0, f64::max);
    if spread[0] <= 1e-12 * scale {
        return Err(PnpError::DegenerateConfiguration("coincident points".into()));
    }
    if spread[1] <= COLLINEAR_RATIO * spread[0] {
        return Err(PnpError::DegenerateConfiguration("collinear points".into()));
    }
    let dims = if spread[2] <= PLANAR_RATIO * spread[0] { 2 } else { 3 };

    let mut world = vec![centroid];
    for d in 0..dims {
        world.push(centroid + axes[d] * spread[d]);
    }
    // Barycentric coordinates; the control directions are orthogonal so the
    // linear solve reduces to projections.
    let alphas = points
        .iter()
        .map(|p| {
            let d = p - centroid;
            let mut a = vec![0.0; dims + 1];
            let mut rest = 1.0;
            for j in 0..dims {
                a[j + 1] = axes[j].dot(&d) / spread[j];
                rest -= a[j + 1];
            }
            a[0] = rest;
            a
        })
        .collect();
    Ok(ControlFrame { world, alphas })
}

fn control_block(v: &DVector<f64>, j: usize) -> Vector3<f64> {
    Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2])
}

fn pair_list(m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            out.push((a, b));
        }
    }
    out
}

/// Rigid `R, t` minimizing `Σ |R a_i + t - b_i|²`.
fn procrustes(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> RigidTransform {
    let n = src.len() as f64;
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let r = nearest_rotation(&h);
    RigidTransform::from_approximate(&r, cd - r * cs)
}

fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1e-300);
    svd.solve(b, tol).ok()
}

/// Initial betas for a null space of dimension `dim` via the linearized
/// distance constraints.
fn initial_betas(
    basis: &[DVector<f64>],
    dim: usize,
    pairs: &[(usize, usize)],
    dist2: &[f64],
) -> Option<Vec<f64>> {
    let diffs: Vec<Vec<Vector3<f64>>> = pairs
        .iter()
        .map(|&(a, b)| basis[..dim].iter().map(|v| control_block(v, a) - control_block(v, b)).collect())
        .collect();
    match dim {
        1 => {
            let (mut num, mut den) = (0.0, 0.0);
            for (d, &target) in diffs.iter().zip(dist2) {
                let len = d[0].norm();
                num += len * target.sqrt();
                den += len * len;
            }
            (den > 0.0).then(|| vec![num / den])
        }
        _ => {
            // Unknowns are the products beta_a * beta_b, a <= b.
            let mut products = Vec::new();
            for a in 0..dim {
                for b in a..dim {
                    products.push((a, b));
                }
            }
            let mut l = DMatrix::zeros(pairs.len(), products.len());
            for (row, d) in diffs.iter().enumerate() {
                for (col, &(a, b)) in products.iter().enumerate() {
                    let f = if a == b { 1.0 } else { 2.0 };
                    l[(row, col)] = f * d[a].dot(&d[b]);
                }
            }
            let rhs = DVector::from_column_slice(dist2);
            let mut sol = least_squares(&l, &rhs)?;
            let diag = |s: &DVector<f64>, a: usize| {
                s[products.iter().position(|&p| p == (a, a)).unwrap()]
            };
            if diag(&sol, 0) < 0.0 {
                sol = -sol;
            }
            let mut betas = vec![diag(&sol, 0).max(0.0).sqrt()];
            for a in 1..dim {
                let cross = sol[products.iter().position(|&p| p == (0, a)).unwrap()];
                betas.push(diag(&sol, a).abs().sqrt() * cross.signum());
            }
            Some(betas)
        }
    }
}

fn gauss_newton(
    basis: &[DVector<f64>],
    betas: &mut [f64],
    pairs: &[(usize, usize)],
    dist2: &[f64],
) {
    let dim = betas.len();
    let diffs: Vec<Vec<Vector3<f64>>> = pairs
        .iter()
        .map(|&(a, b)| basis[..dim].iter().map(|v| control_block(v, a) - control_block(v, b)).collect())
        .collect();
    for _ in 0..GAUSS_NEWTON_STEPS {
        let mut jac = DMatrix::zeros(pairs.len(), dim);
        let mut res = DVector::zeros(pairs.len());
        for (row, d) in diffs.iter().enumerate() {
            let cur: Vector3<f64> = d.iter().zip(betas.iter()).map(|(v, b)| v * *b).sum();
            res[row] = cur.norm_squared() - dist2[row];
            for k in 0..dim {
                jac[(row, k)] = 2.0 * cur.dot(&d[k]);
            }
        }
        match least_squares(&jac, &(-res)) {
            Some(step) => {
                for k in 0..dim {
                    betas[k] += step[k];
                }
            }
            None => break,
        }
    }
}

fn total_reprojection(pose: &RigidTransform, k: &Intrinsics, pairs: &[PnpPair]) -> (f64, usize) {
    let mut total = 0.0;
    let mut in_front = 0;
    for p in pairs {
        let cam = pose.apply(&p.xyz);
        if cam.z > MIN_DEPTH {
            in_front += 1;
        }
        total += reprojection_error(pose, k, p);
    }
    (total, in_front)
}

/// EPnP on `>= 4` correspondences.
pub fn epnp(pairs: &[PnpPair], k: &Intrinsics) -> Result<RigidTransform, PnpError> {
    if pairs.len() < 4 {
        return Err(PnpError::DegenerateConfiguration(format!(
            "EPnP needs at least 4 correspondences, got {}",
            pairs.len()
        )));
    }
    let world_pts: Vec<Vector3<f64>> = pairs.iter().map(|p| p.xyz).collect();
    let frame = control_frame(&world_pts)?;
    let m = frame.world.len();
    let cols = 3 * m;

    let mut mtm = DMatrix::<f64>::zeros(cols, cols);
    let mut row_x = vec![0.0; cols];
    let mut row_y = vec![0.0; cols];
    for (pair, alpha) in pairs.iter().zip(&frame.alphas) {
        let xn = k.normalize(&pair.uv);
        for j in 0..m {
            row_x[3 * j] = alpha[j];
            row_x[3 * j + 1] = 0.0;
            row_x[3 * j + 2] = -alpha[j] * xn.x;
            row_y[3 * j] = 0.0;
            row_y[3 * j + 1] = alpha[j];
            row_y[3 * j + 2] = -alpha[j] * xn.y;
        }
        for a in 0..cols {
            for b in a..cols {
                let v = row_x[a] * row_x[b] + row_y[a] * row_y[b];
                mtm[(a, b)] += v;
            }
        }
    }
    for a in 0..cols {
        for b in 0..a {
            mtm[(a, b)] = mtm[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let basis: Vec<DVector<f64>> =
        order.iter().take(m).map(|&i| eig.eigenvectors.column(i).into_owned()).collect();

    let cpairs = pair_list(m);
    let dist2: Vec<f64> = cpairs
        .iter()
        .map(|&(a, b)| (frame.world[a] - frame.world[b]).norm_squared())
        .collect();

    // Each approximation is refined both in its own subspace and over the full kernel.
    let max_dim = if m == 4 { 3 } else { 2 };
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    for dim in 1..=max_dim {
        if let Some(init) = initial_betas(&basis, dim, &cpairs, &dist2) {
            let mut local = init.clone();
            gauss_newton(&basis, &mut local, &cpairs, &dist2);
            candidates.push(local);
            if dim < m {
                let mut padded = init;
                padded.resize(m, 0.0);
                gauss_newton(&basis, &mut padded, &cpairs, &dist2);
                candidates.push(padded);
            }
        }
    }

    let mut best: Option<(f64, RigidTransform)> = None;
    for betas in candidates {
        let dim = betas.len();
        let mut cam: Vec<Vector3<f64>> = (0..m)
            .map(|j| basis[..dim].iter().zip(&betas).map(|(v, b)| control_block(v, j) * *b).sum())
            .collect();
        let depth_positive = frame
            .alphas
            .iter()
            .filter(|a| a.iter().zip(&cam).map(|(w, c)| w * c.z).sum::<f64>() > 0.0)
            .count();
        if 2 * depth_positive < pairs.len() {
            for c in cam.iter_mut() {
                *c = -*c;
            }
        }
        if !cam.iter().all(|c| c.iter().all(|v| v.is_finite())) {
            continue;
        }
        let pose = procrustes(&frame.world, &cam);
        let (err, in_front) = total_reprojection(&pose, k, pairs);
        if 2 * in_front < pairs.len() {
            continue;
        }
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p).ok_or(PnpError::CheiralityFailure)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub min_sample: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 500, inlier_threshold: 1.0, min_sample: 4, seed: 0 }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), PnpError> {
        if self.iterations < 1 {
            return Err(PnpError::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(PnpError::InvalidConfig("inlier threshold must be > 0".into()));
        }
        if self.min_sample < 4 {
            return Err(PnpError::InvalidConfig("minimal sample must be >= 4".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: RigidTransform,
    pub inlier_indices: Vec<usize>,
    /// Mean reprojection error over the inliers; `+∞` when there are none.
    pub mean_reproj_error: f64,
    pub iterations_run: usize,
}

impl PoseEstimate {
    /// `inliers=..`, `mean_error=..`, `iterations=..` lines.
    pub fn report(&self) -> String {
        format!(
            "inliers={}\nmean_error={}\niterations={}\n",
            self.inlier_indices.len(),
            self.mean_reproj_error,
            self.iterations_run
        )
    }
}

fn score(
    pose: &RigidTransform,
    k: &Intrinsics,
    pairs: &[PnpPair],
    threshold: f64,
) -> (Vec<usize>, f64) {
    let mut inliers = Vec::new();
    let mut sum = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let e = reprojection_error(pose, k, p);
        if e < threshold {
            inliers.push(i);
            sum += e;
        }
    }
    let mean = if inliers.is_empty() { f64::INFINITY } else { sum / inliers.len() as f64 };
    (inliers, mean)
}

/// Per-iteration RNG stream derived from `(seed, iteration)`.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

struct Hypothesis {
    pose: RigidTransform,
    inliers: Vec<usize>,
    mean: f64,
    iteration: usize,
}

impl Hypothesis {
    /// Total order: more inliers, then lower mean error, then earlier iteration.
    fn beats(&self, other: &Hypothesis) -> bool {
        (other.inliers.len(), self.mean, self.iteration)
            .partial_cmp(&(self.inliers.len(), other.mean, other.iteration))
            .is_some_and(|o| o.is_lt())
    }
}

/// EPnP inside RANSAC with a final refit on the best inlier set.
pub fn ransac_epnp(
    pairs: &[PnpPair],
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate, PnpError> {
    cfg.validate()?;
    if pairs.len() < cfg.min_sample {
        return Err(PnpError::TooFewPairs { needed: cfg.min_sample, got: pairs.len() });
    }
    let mut best: Option<Hypothesis> = None;
    let mut sample = Vec::with_capacity(cfg.min_sample);
    for iteration in 0..cfg.iterations {
        let mut rng = iteration_rng(cfg.seed, iteration);
        sample.clear();
        sample.extend(index::sample(&mut rng, pairs.len(), cfg.min_sample).iter().map(|i| pairs[i]));
        let Ok(pose) = epnp(&sample, k) else {
            continue;
        };
        let (inliers, mean) = score(&pose, k, pairs, cfg.inlier_threshold);
        let hyp = Hypothesis { pose, inliers, mean, iteration };
        if best.as_ref().is_none_or(|b| hyp.beats(b)) {
            best = Some(hyp);
        }
    }
    let best = best.ok_or(PnpError::NoHypothesis)?;

    let mut pose = best.pose;
    let mut inliers = best.inliers;
    let mut mean = best.mean;
    if inliers.len() >= 4 {
        let subset: Vec<PnpPair> = inliers.iter().map(|&i| pairs[i]).collect();
        if let Ok(refit) = epnp(&subset, k) {
            let (refit_inliers, refit_mean) = score(&refit, k, pairs, cfg.inlier_threshold);
            if refit_inliers.len() >= inliers.len() {
                pose = refit;
                inliers = refit_inliers;
                mean = refit_mean;
            } else {
                log::debug!(
                    "refit lost inliers ({} < {}), keeping the minimal hypothesis",
                    refit_inliers.len(),
                    inliers.len()
                );
            }
        }
    }
    Ok(PoseEstimate {
        pose,
        inlier_indices: inliers,
        mean_reproj_error: mean,
        iterations_run: cfg.iterations,
    })
}
