//! Full-batch gradient descent on the joint loss over a small fixed set of
//! synthetic scenes.
//!
//! Each scene contributes one fixed batch, drawn once from its ground truth:
//! `n` visible cell/point pairs for the descriptor loss and `n` members of
//! each overlap/non-overlap category for the detector loss. An epoch is one
//! step along the mean gradient over all scenes.

use log::{debug, info};
use nalgebra::Vector2;

use crate::encoder::tape::{Mat, Tape};
use crate::encoder::{
    cell_centre, collect_outputs, forward_on, ArchConfig, EncoderOutput, EncoderParams, ImageInputs, Layers,
    OverlapSet, PointHierarchy,
};
use crate::geometry::{GroundTruthCorrespondences, GtPair};
use crate::loss::{descriptor_loss, detector_loss, sample_training_batch, total_loss, LossConfig, TrainingBatch};
use crate::matcher::match_overlap;
use crate::metrics::{inlier_ratio, Fragment};

use super::config::RunConfig;
use super::scene::{generate_scene, CellTruth, SyntheticScene};
use super::HarnessError;

/// A scene with everything the loss needs precomputed.
#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub scene: SyntheticScene,
    pub truth: CellTruth,
    pub inputs: ImageInputs,
    pub hierarchy: PointHierarchy,
    pub batch: TrainingBatch,
    /// Cell and point of each sampled positive pair.
    pub pair_cells: Vec<usize>,
    pub pair_points: Vec<usize>,
    pub pixels: Vec<Vector2<f64>>,
}

impl TrainingScene {
    pub fn new(scene: SyntheticScene, cfg: &RunConfig, batch_seed: u64) -> Result<Self, HarnessError> {
        let truth = CellTruth::new(&scene);
        let inputs = ImageInputs::new(&scene.image, &cfg.arch)?;
        let hierarchy = PointHierarchy::build(&scene.cloud, &cfg.arch, cfg.arch.k)?;
        let visible = truth.visible_pairs();
        let gt = GroundTruthCorrespondences {
            pairs: visible
                .iter()
                .map(|&(cell, p)| GtPair { uv: cell_centre(cell, truth.cols), point_index: p })
                .collect(),
            pose: scene.pose,
        };
        let batch = sample_training_batch(
            &gt,
            &truth.cell_mask,
            &truth.labels.point_mask,
            cfg.loss.sample_pairs,
            batch_seed,
        )?;
        let pair_cells: Vec<usize> = batch.pairs.iter().map(|&i| visible[i].0).collect();
        let pair_points = batch.pairs.iter().map(|&i| visible[i].1).collect();
        let pixels = pair_cells.iter().map(|&c| cell_centre(c, truth.cols)).collect();
        Ok(Self { scene, truth, inputs, hierarchy, batch, pair_cells, pair_points, pixels })
    }
}

/// The fixed training set described by `cfg.train`.
pub fn training_scenes(cfg: &RunConfig) -> Result<Vec<TrainingScene>, HarnessError> {
    let spec = cfg.arch.image_spec()?;
    (0..cfg.train.scenes)
        .map(|i| {
            let seed = cfg.train.scene_seed + i as u64;
            TrainingScene::new(generate_scene(&spec, &cfg.scene, seed), cfg, seed)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub desc: f64,
    pub det: f64,
    pub total: f64,
}

/// Loss of one scene and, optionally, its parameter gradient.
#[derive(Debug, Clone)]
pub struct SceneLoss {
    pub desc: f64,
    pub det: f64,
    pub total: f64,
    pub grads: Option<Vec<Vec<f64>>>,
    /// Per pair: positive hinge active, negative hinge active, hard negative.
    pub active: Vec<(bool, bool, Option<usize>)>,
    /// Max-pool winners of the forward pass.
    pub routing: Vec<usize>,
}

fn rows(m: &Mat, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| m.row(i).to_vec()).collect()
}

fn pick(values: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| values[i]).collect()
}

pub fn scene_loss(
    params: &EncoderParams,
    ts: &TrainingScene,
    loss_cfg: &LossConfig,
    with_grads: bool,
) -> Result<SceneLoss, HarnessError> {
    let mut tape = Tape::new();
    let layers = Layers::bind(&mut tape, params);
    let vars = forward_on(&mut tape, &layers, &ts.inputs, &ts.hierarchy);
    let img_desc = tape.value(vars.image.desc);
    let pt_desc = tape.value(vars.points.desc);
    let img_score = &tape.value(vars.image.score).data;
    let pt_score = &tape.value(vars.points.score).data;

    let desc = descriptor_loss(&rows(img_desc, &ts.pair_cells), &rows(pt_desc, &ts.pair_points), &ts.pixels, loss_cfg)?;
    let b = &ts.batch;
    let det = detector_loss(
        &pick(img_score, &b.overlap_pixels),
        &pick(pt_score, &b.overlap_points),
        &pick(img_score, &b.non_overlap_pixels),
        &pick(pt_score, &b.non_overlap_points),
    )?;
    let total = total_loss(desc.loss, det.loss, loss_cfg.lambda);
    let active = (0..desc.d_pos.len())
        .map(|i| {
            (
                desc.d_pos[i] > loss_cfg.pos_margin,
                desc.d_neg[i].is_some_and(|d| d < loss_cfg.neg_margin),
                desc.hard_negatives[i],
            )
        })
        .collect();
    let routing = tape.pool_routing();
    if !with_grads {
        return Ok(SceneLoss { desc: desc.loss, det: det.loss, total, grads: None, active, routing });
    }

    let mut g_img_desc = Mat::zeros(img_desc.rows, img_desc.cols);
    let mut g_pt_desc = Mat::zeros(pt_desc.rows, pt_desc.cols);
    for (k, &cell) in ts.pair_cells.iter().enumerate() {
        g_img_desc.row_mut(cell).iter_mut().zip(&desc.grad_image[k]).for_each(|(a, b)| *a += b);
    }
    for (k, &p) in ts.pair_points.iter().enumerate() {
        g_pt_desc.row_mut(p).iter_mut().zip(&desc.grad_points[k]).for_each(|(a, b)| *a += b);
    }
    let mut g_img_score = Mat::zeros(img_score.len(), 1);
    let mut g_pt_score = Mat::zeros(pt_score.len(), 1);
    let lambda = loss_cfg.lambda;
    let scatter = |m: &mut Mat, idx: &[usize], g: &[f64]| {
        for (&i, v) in idx.iter().zip(g) {
            m.data[i] += lambda * v;
        }
    };
    scatter(&mut g_img_score, &b.overlap_pixels, &det.grads[0]);
    scatter(&mut g_pt_score, &b.overlap_points, &det.grads[1]);
    scatter(&mut g_img_score, &b.non_overlap_pixels, &det.grads[2]);
    scatter(&mut g_pt_score, &b.non_overlap_points, &det.grads[3]);

    let grads = tape.backward(&[
        (vars.image.desc, g_img_desc),
        (vars.points.desc, g_pt_desc),
        (vars.image.score, g_img_score),
        (vars.points.score, g_pt_score),
    ]);
    Ok(SceneLoss {
        desc: desc.loss,
        det: det.loss,
        total,
        grads: Some(layers.param_grads(&grads, params)),
        active,
        routing,
    })
}

/// Mean loss (and gradient) over the training set.
pub fn dataset_loss(
    params: &EncoderParams,
    scenes: &[TrainingScene],
    loss_cfg: &LossConfig,
    with_grads: bool,
) -> Result<SceneLoss, HarnessError> {
    let n = scenes.len() as f64;
    let mut acc = SceneLoss { desc: 0.0, det: 0.0, total: 0.0, grads: None, active: Vec::new(), routing: Vec::new() };
    for (i, ts) in scenes.iter().enumerate() {
        let l = scene_loss(params, ts, loss_cfg, with_grads)?;
        if !(l.desc.is_finite() && l.det.is_finite()) {
            return Err(HarnessError::NonFiniteLoss { step: usize::MAX, scene: i, desc: l.desc, det: l.det });
        }
        acc.desc += l.desc / n;
        acc.det += l.det / n;
        acc.total += l.total / n;
        acc.active.extend(l.active);
        acc.routing.extend(l.routing);
        if let Some(g) = l.grads {
            let sum = acc.grads.get_or_insert_with(|| g.iter().map(|t| vec![0.0; t.len()]).collect());
            for (s, t) in sum.iter_mut().zip(&g) {
                s.iter_mut().zip(t).for_each(|(a, b)| *a += b / n);
            }
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// f32-representable trained weights.
    pub params: EncoderParams,
    /// One record per epoch (loss before that epoch's step) plus a final
    /// record for the returned weights.
    pub history: Vec<LossRecord>,
}

pub fn train_toy(
    scenes: &[TrainingScene],
    init: &EncoderParams,
    cfg: &RunConfig,
) -> Result<TrainOutcome, HarnessError> {
    if scenes.is_empty() {
        return Err(HarnessError::Config("training needs at least one scene".into()));
    }
    init.check_shapes(&cfg.arch)?;
    let mut params = init.clone();
    let mut history = Vec::with_capacity(cfg.train.epochs + 1);
    let with_step = |e: HarnessError, step: usize| match e {
        HarnessError::NonFiniteLoss { scene, desc, det, .. } => {
            HarnessError::NonFiniteLoss { step, scene, desc, det }
        }
        other => other,
    };
    for epoch in 0..cfg.train.epochs {
        let l = dataset_loss(&params, scenes, &cfg.loss, true).map_err(|e| with_step(e, epoch))?;
        history.push(LossRecord { step: epoch, desc: l.desc, det: l.det, total: l.total });
        let lr = cfg.train.learning_rate_at(epoch);
        debug!("epoch {epoch}: lr={lr} desc={} det={} total={}", l.desc, l.det, l.total);
        let grads = l.grads.expect("gradients requested");
        for (t, g) in params.tensors_mut().iter_mut().zip(&grads) {
            t.data.iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
        }
        if !params.all_finite() {
            return Err(HarnessError::NonFiniteLoss { step: epoch, scene: 0, desc: f64::NAN, det: f64::NAN });
        }
    }
    params.quantize();
    let epochs = cfg.train.epochs;
    let l = dataset_loss(&params, scenes, &cfg.loss, false).map_err(|e| with_step(e, epochs))?;
    history.push(LossRecord { step: epochs, desc: l.desc, det: l.det, total: l.total });
    info!(
        "trained {epochs} epochs: desc {} -> {}",
        history[0].desc,
        history.last().map_or(f64::NAN, |r| r.desc)
    );
    Ok(TrainOutcome { params, history })
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,desc,det,total\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.desc, r.det, r.total));
    }
    out
}

pub fn run_network(
    ts: &TrainingScene,
    params: &EncoderParams,
    cfg: &ArchConfig,
) -> EncoderOutput {
    let mut tape = Tape::new();
    let layers = Layers::bind(&mut tape, params);
    let vars = forward_on(&mut tape, &layers, &ts.inputs, &ts.hierarchy);
    collect_outputs(&tape, &vars, cfg)
}

/// Overlap set built from the true overlap (all occupied cells, all
/// in-frustum points) with the given descriptors.
pub fn ground_truth_overlap(ts: &TrainingScene, out: &EncoderOutput) -> OverlapSet {
    let mut set = OverlapSet::default();
    for (cell, &m) in ts.truth.cell_mask.iter().enumerate() {
        if m {
            set.image_coords.push(cell_centre(cell, ts.truth.cols));
            set.image_desc.push(out.image.desc.row(cell).to_vec());
        }
    }
    for (i, &m) in ts.truth.labels.point_mask.iter().enumerate() {
        if m {
            set.point_coords.push(ts.scene.cloud.points()[i]);
            set.point_desc.push(out.points.desc.row(i).to_vec());
            set.point_indices.push(i);
        }
    }
    set
}

/// Mean inlier ratio of descriptor matching on the true overlap.
pub fn ground_truth_pair_recall(
    scenes: &[TrainingScene],
    params: &EncoderParams,
    cfg: &ArchConfig,
    tau1: f64,
) -> Result<f64, HarnessError> {
    let mut sum = 0.0;
    for ts in scenes {
        let out = run_network(ts, params, cfg);
        let corr = match_overlap(&ground_truth_overlap(ts, &out))?;
        let frag = Fragment { correspondences: &corr, pose: &ts.scene.pose, intrinsics: &ts.scene.intrinsics };
        sum += inlier_ratio(&frag, tau1).unwrap_or(0.0);
    }
    Ok(sum / scenes.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub directions: usize,
    /// Directions discarded because the step crossed a hinge, changed a hard
    /// negative or switched a max-pool winner.
    pub skipped: usize,
    pub max_rel_error: f64,
}

/// Directional finite-difference check of the full training gradient on a
/// tiny random scene. Directions whose central difference straddles a kink
/// of the loss are redrawn.
pub fn gradient_check(seed: u64) -> Result<GradCheckReport, HarnessError> {
    use rand::{Rng, SeedableRng};
    let mut cfg = RunConfig::default();
    cfg.arch = ArchConfig { width: 64, height: 32, n1: 16, n2: 8, k: 4, channel_scale: 32, seed, ..cfg.arch };
    cfg.scene.points = 200;
    cfg.scene.frustum_fraction = 0.5;
    cfg.loss.sample_pairs = 8;
    let spec = cfg.arch.image_spec()?;
    let ts = TrainingScene::new(generate_scene(&spec, &cfg.scene, seed), &cfg, seed)?;
    let params = EncoderParams::init(&cfg.arch, seed);
    let base = scene_loss(&params, &ts, &cfg.loss, true)?;
    let grads = base.grads.expect("gradients requested");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    let directions = 4;
    let mut checked = 0;
    let mut skipped = 0;
    while checked < directions {
        if skipped >= 8 * directions {
            return Err(HarnessError::GradCheck(format!("{skipped} directions crossed a kink of the loss")));
        }
        let dir: Vec<Vec<f64>> =
            params.tensors().iter().map(|t| t.data.iter().map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let analytic: f64 =
            grads.iter().zip(&dir).map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>()).sum();
        let at = |sign: f64| -> Result<SceneLoss, HarnessError> {
            let mut p = params.clone();
            for (t, d) in p.tensors_mut().iter_mut().zip(&dir) {
                t.data.iter_mut().zip(d).for_each(|(v, dv)| *v += sign * eps * dv);
            }
            scene_loss(&p, &ts, &cfg.loss, false)
        };
        let (plus, minus) = (at(1.0)?, at(-1.0)?);
        let same = |l: &SceneLoss| l.active == base.active && l.routing == base.routing;
        if !(same(&plus) && same(&minus)) {
            skipped += 1;
            continue;
        }
        let numeric = (plus.total - minus.total) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        checked += 1;
    }
    Ok(GradCheckReport { directions, skipped, max_rel_error: worst })
}
