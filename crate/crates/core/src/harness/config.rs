//! The `key=value` run configuration shared by every CLI command.

use std::fmt::Write as _;

use crate::encoder::ArchConfig;
use crate::kv::{KvError, KvMap};
use crate::loss::LossConfig;
use crate::metrics::EvalThresholds;
use crate::pnp::RansacConfig;

use super::HarnessError;

/// Synthetic scene generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub points: usize,
    /// Fraction of points placed inside the ground-truth frustum by
    /// construction; more may land there by chance.
    pub frustum_fraction: f64,
    /// Meters.
    pub max_translation: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Half-size in pixels of the square drawn for each point.
    pub splat_radius: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            points: 4096,
            frustum_fraction: 0.3,
            max_translation: 10.0,
            min_depth: 2.0,
            max_depth: 40.0,
            splat_radius: 1,
        }
    }
}

/// Oracle-descriptor settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub dim: usize,
    pub noise_sigma: f64,
    /// Probability that a true overlap member gets a low score.
    pub corruption: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { dim: 32, noise_sigma: 0.0, corruption: 0.0 }
    }
}

/// Gradient-descent settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied every `lr_decay_epochs` epochs.
    pub lr_decay: f64,
    pub lr_decay_epochs: usize,
    pub lr_min: f64,
    pub epochs: usize,
    pub scenes: usize,
    /// Seed of the first training scene; scene `i` uses `scene_seed + i`.
    pub scene_seed: u64,
    pub init_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            lr_decay: 0.25,
            lr_decay_epochs: 5,
            lr_min: 1e-5,
            epochs: 25,
            scenes: 4,
            scene_seed: 0,
            init_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Step size for `epoch` (0-based). A zero base rate stays zero.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = epoch / self.lr_decay_epochs.max(1);
        let lr = self.learning_rate * self.lr_decay.powi(steps as i32);
        lr.max(self.lr_min.min(self.learning_rate))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub ransac: RansacConfig,
    pub eval: EvalThresholds,
    pub scene: SceneConfig,
    pub oracle: OracleConfig,
    pub train: TrainConfig,
    /// Overlap score threshold.
    pub tau: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            loss: LossConfig::default(),
            ransac: RansacConfig::default(),
            eval: EvalThresholds::default(),
            scene: SceneConfig::default(),
            oracle: OracleConfig::default(),
            train: TrainConfig::default(),
            tau: 0.9,
            seed: 0,
        }
    }
}

fn parse_grid(kv: &mut KvMap, key: &str, slot: &mut Vec<f64>) -> Result<(), KvError> {
    let line = kv.line_of(key).unwrap_or(0);
    if let Some(text) = kv.take::<String>(key)? {
        *slot = text
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| KvError { line, msg: format!("invalid list {text:?} for {key}") })?;
    }
    Ok(())
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Small setting used for toy training: 64x32 images, 500 points, six
    /// pairs per scene and 1500 full-batch epochs.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.arch = ArchConfig { width: 64, height: 32, n1: 32, n2: 16, k: 8, ..cfg.arch };
        cfg.scene.points = 500;
        cfg.scene.frustum_fraction = 0.5;
        cfg.loss.sample_pairs = 6;
        cfg.train = TrainConfig {
            learning_rate: 0.5,
            lr_decay: 0.5,
            lr_decay_epochs: 500,
            lr_min: 1e-4,
            epochs: 1500,
            ..cfg.train
        };
        cfg
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut kv = KvMap::parse(text)?;
        let mut cfg = Self::default();
        cfg.read(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn read(&mut self, kv: &mut KvMap) -> Result<(), KvError> {
        self.arch.read_from(kv)?;
        self.loss.read_from(kv)?;
        kv.take_into("tau", &mut self.tau)?;
        kv.take_into("seed", &mut self.seed)?;
        kv.take_into("ransac_iterations", &mut self.ransac.iterations)?;
        kv.take_into("inlier_threshold", &mut self.ransac.inlier_threshold)?;
        kv.take_into("ransac_seed", &mut self.ransac.seed)?;
        kv.take_into("rte_max", &mut self.eval.rte_max)?;
        kv.take_into("rre_max", &mut self.eval.rre_max)?;
        kv.take_into("tau1", &mut self.eval.tau1)?;
        kv.take_into("tau2", &mut self.eval.tau2)?;
        parse_grid(kv, "rte_grid", &mut self.eval.rte_grid)?;
        parse_grid(kv, "rre_grid", &mut self.eval.rre_grid)?;
        kv.take_into("points", &mut self.scene.points)?;
        kv.take_into("frustum_fraction", &mut self.scene.frustum_fraction)?;
        kv.take_into("max_translation", &mut self.scene.max_translation)?;
        kv.take_into("min_depth", &mut self.scene.min_depth)?;
        kv.take_into("max_depth", &mut self.scene.max_depth)?;
        kv.take_into("splat_radius", &mut self.scene.splat_radius)?;
        kv.take_into("oracle_dim", &mut self.oracle.dim)?;
        kv.take_into("noise_sigma", &mut self.oracle.noise_sigma)?;
        kv.take_into("corruption", &mut self.oracle.corruption)?;
        kv.take_into("learning_rate", &mut self.train.learning_rate)?;
        kv.take_into("lr_decay", &mut self.train.lr_decay)?;
        kv.take_into("lr_decay_epochs", &mut self.train.lr_decay_epochs)?;
        kv.take_into("lr_min", &mut self.train.lr_min)?;
        kv.take_into("epochs", &mut self.train.epochs)?;
        kv.take_into("train_scenes", &mut self.train.scenes)?;
        kv.take_into("train_scene_seed", &mut self.train.scene_seed)?;
        kv.take_into("init_seed", &mut self.train.init_seed)?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.arch.write_to(&mut s);
        self.loss.write_to(&mut s);
        let _ = writeln!(s, "tau={}", self.tau);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "ransac_iterations={}", self.ransac.iterations);
        let _ = writeln!(s, "inlier_threshold={}", self.ransac.inlier_threshold);
        let _ = writeln!(s, "ransac_seed={}", self.ransac.seed);
        let _ = writeln!(s, "rte_max={}", self.eval.rte_max);
        let _ = writeln!(s, "rre_max={}", self.eval.rre_max);
        let _ = writeln!(s, "tau1={}", self.eval.tau1);
        let _ = writeln!(s, "tau2={}", self.eval.tau2);
        let _ = writeln!(s, "rte_grid={}", join(&self.eval.rte_grid));
        let _ = writeln!(s, "rre_grid={}", join(&self.eval.rre_grid));
        let _ = writeln!(s, "points={}", self.scene.points);
        let _ = writeln!(s, "frustum_fraction={}", self.scene.frustum_fraction);
        let _ = writeln!(s, "max_translation={}", self.scene.max_translation);
        let _ = writeln!(s, "min_depth={}", self.scene.min_depth);
        let _ = writeln!(s, "max_depth={}", self.scene.max_depth);
        let _ = writeln!(s, "splat_radius={}", self.scene.splat_radius);
        let _ = writeln!(s, "oracle_dim={}", self.oracle.dim);
        let _ = writeln!(s, "noise_sigma={}", self.oracle.noise_sigma);
        let _ = writeln!(s, "corruption={}", self.oracle.corruption);
        let _ = writeln!(s, "learning_rate={}", self.train.learning_rate);
        let _ = writeln!(s, "lr_decay={}", self.train.lr_decay);
        let _ = writeln!(s, "lr_decay_epochs={}", self.train.lr_decay_epochs);
        let _ = writeln!(s, "lr_min={}", self.train.lr_min);
        let _ = writeln!(s, "epochs={}", self.train.epochs);
        let _ = writeln!(s, "train_scenes={}", self.train.scenes);
        let _ = writeln!(s, "train_scene_seed={}", self.train.scene_seed);
        let _ = writeln!(s, "init_seed={}", self.train.init_seed);
        s
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        self.arch.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.loss.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.ransac.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.eval.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must be in (0, 1), got {}", self.tau));
        }
        let s = &self.scene;
        if s.points < self.arch.n1 {
            return bad(format!("points = {} is below n1 = {}", s.points, self.arch.n1));
        }
        if !(s.frustum_fraction > 0.0 && s.frustum_fraction <= 1.0) {
            return bad(format!("frustum_fraction must be in (0, 1], got {}", s.frustum_fraction));
        }
        if !(s.max_translation >= 0.0 && s.min_depth > 0.0 && s.max_depth > s.min_depth) {
            return bad("need max_translation >= 0 and 0 < min_depth < max_depth".into());
        }
        let o = &self.oracle;
        if o.dim == 0 || !(o.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&o.corruption) {
            return bad("need oracle_dim > 0, noise_sigma >= 0, corruption in [0, 1]".into());
        }
        let t = &self.train;
        if !(t.learning_rate >= 0.0 && t.lr_decay > 0.0 && t.lr_min >= 0.0) || t.lr_decay_epochs == 0 {
            return bad("need learning_rate >= 0, lr_decay > 0, lr_min >= 0, lr_decay_epochs > 0".into());
        }
        if t.scenes == 0 {
            return bad("train_scenes must be positive".into());
        }
        Ok(())
    }
}
