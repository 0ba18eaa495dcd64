//! Registration of one scene, dataset evaluation and the density sweep,
//! with their report files.
//!
//! A registration report directory holds `result.csv` (one row),
//! `correspondences.csv`, `estimate.txt`, `gt_pose.txt`, `intrinsics.txt` and
//! `ransac.txt`. Evaluation reads one such directory or a directory of them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{detect_overlap, run_with_k, ArchConfig, EncoderParams};
use crate::geometry::io::{
    format_pose, read_intrinsics, read_pose, write_atomic, write_intrinsics, write_pose, FormatError,
};
use crate::geometry::{Intrinsics, RigidTransform};
use crate::matcher::{match_overlap, CorrespondenceSet};
use crate::metrics::{
    error_histograms, fragment_recall, inlier_ratio, is_success, overlap_prf, pair_recall, pose_errors,
    registration_recall_curve, success_filtered_stats, EvalThresholds, Fragment, Histogram, Prf, SuccessStats,
};
use crate::pnp::{ransac_epnp, PoseEstimate};

use super::config::RunConfig;
use super::oracle::oracle_descriptors;
use super::scene::{CellTruth, SyntheticScene};
use super::HarnessError;

/// Where descriptors and scores come from.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'a> {
    Oracle,
    Network { params: &'a EncoderParams, arch: &'a ArchConfig },
}

/// Per-pair evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub name: String,
    pub rte: f64,
    pub rre: f64,
    pub success: bool,
    pub inliers: usize,
    pub correspondences: usize,
    pub mean_reproj_error: f64,
    pub inlier_ratio: f64,
    pub image: Prf,
    pub points: Prf,
}

pub const RESULT_HEADER: &str = "scene,rte,rre,success,inliers,correspondences,mean_reproj_error,inlier_ratio,\
image_precision,image_recall,image_f2,point_precision,point_recall,point_f2";

impl PairRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.name,
            self.rte,
            self.rre,
            u8::from(self.success),
            self.inliers,
            self.correspondences,
            self.mean_reproj_error,
            self.inlier_ratio,
            self.image.precision,
            self.image.recall,
            self.image.f2,
            self.points.precision,
            self.points.recall,
            self.points.f2
        )
    }

    pub fn parse_row(line: &str) -> Result<Self, HarnessError> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(HarnessError::Data(format!("result row has {} fields, expected 14", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| HarnessError::Data(format!("bad number {s:?}")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| HarnessError::Data(format!("bad count {s:?}")));
        Ok(Self {
            name: f[0].to_string(),
            rte: num(f[1])?,
            rre: num(f[2])?,
            success: f[3] == "1",
            inliers: int(f[4])?,
            correspondences: int(f[5])?,
            mean_reproj_error: num(f[6])?,
            inlier_ratio: num(f[7])?,
            image: Prf { precision: num(f[8])?, recall: num(f[9])?, f2: num(f[10])? },
            points: Prf { precision: num(f[11])?, recall: num(f[12])?, f2: num(f[13])? },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub estimate: PoseEstimate,
    pub correspondences: CorrespondenceSet,
    pub record: PairRecord,
}

fn threshold_mask(scores: &[f64], tau: f64) -> Vec<bool> {
    scores.iter().map(|s| *s > tau).collect()
}

/// Overlap detection, matching, RANSAC-EPnP and scoring against the
/// scene's ground truth. `k` overrides the network's neighbourhood size.
pub fn register(
    scene: &SyntheticScene,
    name: &str,
    source: FeatureSource,
    cfg: &RunConfig,
    k: Option<usize>,
) -> Result<Registration, HarnessError> {
    let truth = CellTruth::new(scene);
    let (img, pts) = match source {
        FeatureSource::Oracle => {
            oracle_descriptors(scene, &truth, &cfg.oracle, cfg.seed.wrapping_add(scene.seed))
        }
        FeatureSource::Network { params, arch } => {
            let out = run_with_k(&scene.image, &scene.cloud, params, arch, k.unwrap_or(arch.k))?;
            (out.image, out.points)
        }
    };
    if img.scores.len() != truth.cell_mask.len() {
        return Err(HarnessError::Data(format!(
            "feature grid has {} cells, scene has {}",
            img.scores.len(),
            truth.cell_mask.len()
        )));
    }
    let overlap = detect_overlap(&img, &pts, &scene.cloud, cfg.tau).map_err(HarnessError::Overlap)?;
    let correspondences = match_overlap(&overlap)?;
    let estimate = ransac_epnp(&correspondences.pnp_pairs(), &scene.intrinsics, &cfg.ransac)?;
    let (rte, rre) = pose_errors(&scene.pose, &estimate.pose);
    let frag = Fragment { correspondences: &correspondences, pose: &scene.pose, intrinsics: &scene.intrinsics };
    let record = PairRecord {
        name: name.to_string(),
        rte,
        rre,
        success: is_success(rte, rre, &cfg.eval),
        inliers: estimate.inlier_indices.len(),
        correspondences: correspondences.len(),
        mean_reproj_error: estimate.mean_reproj_error,
        inlier_ratio: inlier_ratio(&frag, cfg.eval.tau1).unwrap_or(0.0),
        image: overlap_prf(&threshold_mask(&img.scores, cfg.tau), &truth.cell_mask)
            .map_err(|e| HarnessError::Data(e.to_string()))?,
        points: overlap_prf(&threshold_mask(&pts.scores, cfg.tau), &truth.labels.point_mask)
            .map_err(|e| HarnessError::Data(e.to_string()))?,
    };
    info!("{name}: rte={rte:.4} rre={rre:.4} inliers={}/{}", record.inliers, record.correspondences);
    Ok(Registration { estimate, correspondences, record })
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn read_text(path: &Path) -> Result<String, HarnessError> {
    Ok(fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?)
}

pub fn write_registration(dir: &Path, reg: &Registration, scene: &SyntheticScene) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    write_text(&dir.join("result.csv"), &format!("{RESULT_HEADER}\n{}\n", reg.record.csv_row()))?;
    write_text(&dir.join("correspondences.csv"), &reg.correspondences.to_csv())?;
    write_pose(&dir.join("estimate.txt"), &reg.estimate.pose)?;
    write_pose(&dir.join("gt_pose.txt"), &scene.pose)?;
    write_intrinsics(&dir.join("intrinsics.txt"), &scene.intrinsics)?;
    write_text(&dir.join("ransac.txt"), &reg.estimate.report())?;
    Ok(())
}

/// Everything evaluation needs about one registered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInput {
    pub record: PairRecord,
    pub correspondences: CorrespondenceSet,
    pub gt_pose: RigidTransform,
    pub intrinsics: Intrinsics,
}

pub fn read_registration(dir: &Path) -> Result<EvalInput, HarnessError> {
    let text = read_text(&dir.join("result.csv"))?;
    let mut lines = text.lines();
    if lines.next() != Some(RESULT_HEADER) {
        return Err(HarnessError::Data(format!("{}: unexpected result.csv header", dir.display())));
    }
    let row = lines
        .next()
        .ok_or_else(|| HarnessError::Data(format!("{}: result.csv has no data row", dir.display())))?;
    let record = PairRecord::parse_row(row)?;
    let correspondences = CorrespondenceSet::from_csv(&read_text(&dir.join("correspondences.csv"))?)?;
    Ok(EvalInput {
        record,
        correspondences,
        gt_pose: read_pose(&dir.join("gt_pose.txt"))?,
        intrinsics: read_intrinsics(&dir.join("intrinsics.txt"))?,
    })
}

/// `dir` itself if it is a report, otherwise its report subdirectories in
/// name order.
pub fn report_dirs(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if dir.join("result.csv").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| FormatError::io(dir, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| FormatError::io(dir, e))?.path();
        if path.join("result.csv").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pairs: Vec<PairRecord>,
    pub stats: SuccessStats,
    pub curve: Vec<Vec<f64>>,
    pub pair_recall: f64,
    pub fragment_recall: f64,
    /// Means over pairs.
    pub image: Prf,
    pub points: Prf,
    pub rte_hist: Histogram,
    pub rre_hist: Histogram,
}

pub const RTE_BIN: f64 = 0.5;
pub const RRE_BIN: f64 = 1.0;
pub const HIST_BINS: usize = 20;

fn mean_prf(prfs: impl Iterator<Item = Prf>) -> Prf {
    let v: Vec<Prf> = prfs.collect();
    let n = v.len().max(1) as f64;
    Prf {
        precision: v.iter().map(|p| p.precision).sum::<f64>() / n,
        recall: v.iter().map(|p| p.recall).sum::<f64>() / n,
        f2: v.iter().map(|p| p.f2).sum::<f64>() / n,
    }
}

pub fn eval_dataset(inputs: &[EvalInput], t: &EvalThresholds) -> Result<EvalReport, HarnessError> {
    if inputs.is_empty() {
        return Err(HarnessError::Data("nothing to evaluate".into()));
    }
    t.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    let errors: Vec<(f64, f64)> = inputs.iter().map(|i| (i.record.rte, i.record.rre)).collect();
    let fragments: Vec<Fragment> = inputs
        .iter()
        .map(|i| Fragment { correspondences: &i.correspondences, pose: &i.gt_pose, intrinsics: &i.intrinsics })
        .collect();
    let (rte_hist, rre_hist) = error_histograms(&errors, RTE_BIN, RRE_BIN, HIST_BINS);
    Ok(EvalReport {
        pairs: inputs
            .iter()
            .map(|i| PairRecord { success: is_success(i.record.rte, i.record.rre, t), ..i.record.clone() })
            .collect(),
        stats: success_filtered_stats(&errors, t),
        curve: registration_recall_curve(&errors, &t.rte_grid, &t.rre_grid),
        pair_recall: pair_recall(&fragments, t.tau1),
        fragment_recall: fragment_recall(&fragments, t.tau1, t.tau2),
        image: mean_prf(inputs.iter().map(|i| i.record.image)),
        points: mean_prf(inputs.iter().map(|i| i.record.points)),
        rte_hist,
        rre_hist,
    })
}

fn mean_std_text(m: Option<crate::metrics::MeanStd>) -> String {
    m.map_or_else(|| "n/a".to_string(), |m| format!("{:.2} ± {:.2}", m.mean, m.std))
}

pub fn summary_table(report: &EvalReport, t: &EvalThresholds) -> String {
    let s = &report.stats;
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} | {:<16} | {:<16} | {:>8}", "Method", "RTE (m)", "RRE (deg)", "Success");
    let _ = writeln!(out, "{}", "-".repeat(62));
    let _ = writeln!(
        out,
        "{:<12} | {:<16} | {:<16} | {:>7.2}%",
        "Ours",
        mean_std_text(s.rte),
        mean_std_text(s.rre),
        100.0 * s.success_rate
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "pairs: {} (successful: {})", s.total, s.successes);
    let _ = writeln!(out, "success: RTE < {} m and RRE < {} deg", t.rte_max, t.rre_max);
    let _ = writeln!(out, "pair recall (tau1={} px): {:.4}", t.tau1, report.pair_recall);
    let _ = writeln!(out, "fragment recall (tau2={}): {:.4}", t.tau2, report.fragment_recall);
    let _ = writeln!(
        out,
        "image overlap P/R/F2: {:.3} / {:.3} / {:.3}",
        report.image.precision, report.image.recall, report.image.f2
    );
    let _ = writeln!(
        out,
        "cloud overlap P/R/F2: {:.3} / {:.3} / {:.3}",
        report.points.precision, report.points.recall, report.points.f2
    );
    out
}

pub fn write_eval_report(dir: &Path, report: &EvalReport, t: &EvalThresholds) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    let mut pairs = format!("{RESULT_HEADER}\n");
    for r in &report.pairs {
        pairs.push_str(&r.csv_row());
        pairs.push('\n');
    }
    write_text(&dir.join("per_pair.csv"), &pairs)?;

    let mut curve = String::from("rte_threshold,rre_threshold,recall\n");
    for (a, row) in t.rte_grid.iter().zip(&report.curve) {
        for (b, r) in t.rre_grid.iter().zip(row) {
            let _ = writeln!(curve, "{a},{b},{r}");
        }
    }
    write_text(&dir.join("recall_curve.csv"), &curve)?;

    let feature = format!(
        "tau1,tau2,pair_recall,fragment_recall\n{},{},{},{}\n",
        t.tau1, t.tau2, report.pair_recall, report.fragment_recall
    );
    write_text(&dir.join("feature_recall.csv"), &feature)?;
    let s = &report.stats;
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
    let stats = format!(
        "pairs,successes,success_rate,rte_mean,rte_std,rre_mean,rre_std\n{},{},{},{},{},{},{}\n",
        s.total,
        s.successes,
        s.success_rate,
        opt(s.rte.map(|m| m.mean)),
        opt(s.rte.map(|m| m.std)),
        opt(s.rre.map(|m| m.mean)),
        opt(s.rre.map(|m| m.std)),
    );
    write_text(&dir.join("stats.csv"), &stats)?;
    write_text(&dir.join("rte_histogram.csv"), &report.rte_hist.to_csv())?;
    write_text(&dir.join("rre_histogram.csv"), &report.rre_hist.to_csv())?;
    write_text(&dir.join("summary.txt"), &summary_table(report, t))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityRow {
    pub points: usize,
    pub k: usize,
    pub rte: f64,
    pub rre: f64,
    pub success: bool,
}

/// Neighbourhood size for the `level`-th halving of the point count.
pub fn scaled_k(base: usize, level: usize) -> usize {
    (base >> level.min(63)).max(base.min(8))
}

/// Registers the scene at successively halved point counts. Each level
/// keeps a seeded random half of the previous level's points; a count equal
/// to the cloud size keeps the cloud unchanged.
pub fn density_ablation(
    scene: &SyntheticScene,
    name: &str,
    counts: &[usize],
    source: FeatureSource,
    cfg: &RunConfig,
) -> Result<Vec<DensityRow>, HarnessError> {
    if counts.is_empty() {
        return Err(HarnessError::Config("no point counts given".into()));
    }
    if counts[0] > scene.cloud.len() {
        return Err(HarnessError::Config(format!(
            "count {} exceeds the cloud size {}",
            counts[0],
            scene.cloud.len()
        )));
    }
    if let Some(w) = counts.windows(2).find(|w| w[1] != w[0] / 2 || w[1] == 0) {
        return Err(HarnessError::Config(format!("counts must halve: {} then {}", w[0], w[1])));
    }
    let base_k = match source {
        FeatureSource::Oracle => cfg.arch.k,
        FeatureSource::Network { arch, .. } => arch.k,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut kept: Vec<usize> = (0..scene.cloud.len()).collect();
    let mut rows = Vec::with_capacity(counts.len());
    for (level, &count) in counts.iter().enumerate() {
        if count < kept.len() {
            let mut pick: Vec<usize> = index::sample(&mut rng, kept.len(), count).into_vec();
            pick.sort_unstable();
            kept = pick.into_iter().map(|i| kept[i]).collect();
        }
        let sub = SyntheticScene { cloud: scene.cloud.select(&kept)?, ..scene.clone() };
        let k = scaled_k(base_k, level);
        let reg = register(&sub, name, source, cfg, Some(k))?;
        rows.push(DensityRow {
            points: count,
            k,
            rte: reg.record.rte,
            rre: reg.record.rre,
            success: reg.record.success,
        });
    }
    Ok(rows)
}

pub fn density_csv(rows: &[DensityRow]) -> String {
    let mut out = String::from("points,k,rte,rre,success\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.points, r.k, r.rte, r.rre, u8::from(r.success));
    }
    out
}

pub fn density_table(rows: &[DensityRow]) -> String {
    let mut out = format!("{:>8} | {:>4} | {:>10} | {:>10}\n", "Points", "k", "RTE (m)", "RRE (deg)");
    out.push_str(&"-".repeat(42));
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{:>8} | {:>4} | {:>10.3} | {:>10.3}", r.points, r.k, r.rte, r.rre);
    }
    out
}

/// Pose text as stored in report files.
pub fn pose_text(pose: &RigidTransform) -> String {
    format_pose(pose)
}
