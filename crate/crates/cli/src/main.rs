//! Command-line front end: synthetic data, toy training, registration,
//! evaluation, gradient checking and the density ablation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use i2preg::encoder::{ArchConfig, EncoderParams};
use i2preg::geometry::io::{write_atomic, FormatError};
use i2preg::harness::pipeline::{
    density_ablation, density_csv, density_table, eval_dataset, read_registration, register, report_dirs,
    summary_table, write_eval_report, write_registration, FeatureSource,
};
use i2preg::harness::train::{gradient_check, history_csv, train_toy, training_scenes};
use i2preg::harness::{generate_scene, read_scene, write_scene, HarnessError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "i2preg", version, about = "Image-to-point-cloud registration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic scenes to DIR/scene_000, DIR/scene_001, ...
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the toy network and write CKPT, CKPT.arch and CKPT.loss.csv.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register one scene and write a report directory.
    Register {
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Aggregate report directories into dataset metrics.
    Eval {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of the training gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Register a scene at successively halved point counts.
    AblateDensity {
        #[arg(long)]
        scene: PathBuf,
        /// Comma-separated, each half the previous, e.g. 4096,2048,1024.
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct SourceArgs {
    /// Use ground-truth oracle descriptors.
    #[arg(long)]
    oracle: bool,
    /// Use a trained checkpoint (its `.arch` file must sit next to it).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, HarnessError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| match e {
        HarnessError::Kv(kv) => HarnessError::Config(format!("{}: {kv}", path.display())),
        other => other,
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_checkpoint(path: &Path) -> Result<(EncoderParams, ArchConfig), HarnessError> {
    let arch_path = with_suffix(path, ".arch");
    let text = fs::read_to_string(&arch_path).map_err(|e| FormatError::io(&arch_path, e))?;
    let arch = ArchConfig::parse(&text)?;
    let params = EncoderParams::load(path)?;
    params.check_shapes(&arch)?;
    Ok((params, arch))
}

fn scene_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| "scene".to_string(), |n| n.to_string_lossy().into_owned())
}

fn ensure_parent(path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| FormatError::io(parent, e))?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    ensure_parent(path)?;
    Ok(write_atomic(path, text.as_bytes())?)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Synth { out, scenes, seed, config } => {
            let cfg = load_config(config.as_deref())?;
            let spec = cfg.arch.image_spec()?;
            for i in 0..scenes {
                let dir = out.join(format!("scene_{i:03}"));
                write_scene(&dir, &generate_scene(&spec, &cfg.scene, seed + i as u64))?;
                info!("wrote {}", dir.display());
            }
            println!("wrote {scenes} scene(s) to {}", out.display());
        }
        Command::TrainToy { config, out } => {
            let cfg = load_config(Some(&config))?;
            let scenes = training_scenes(&cfg)?;
            let init = EncoderParams::init(&cfg.arch, cfg.train.init_seed);
            let outcome = train_toy(&scenes, &init, &cfg)?;
            ensure_parent(&out)?;
            outcome.params.save(&out)?;
            write_file(&with_suffix(&out, ".arch"), &cfg.arch.to_text())?;
            write_file(&with_suffix(&out, ".loss.csv"), &history_csv(&outcome.history))?;
            let (first, last) = (outcome.history[0], outcome.history[outcome.history.len() - 1]);
            println!("descriptor loss {:.6} -> {:.6}", first.desc, last.desc);
            println!("detector loss {:.6} -> {:.6}", first.det, last.det);
            println!("checkpoint written to {}", out.display());
        }
        Command::Register { scene, source, report, config } => {
            let cfg = load_config(config.as_deref())?;
            let data = read_scene(&scene)?;
            let checkpoint = source.checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let features = match &checkpoint {
                Some((params, arch)) => FeatureSource::Network { params, arch },
                None => FeatureSource::Oracle,
            };
            let reg = register(&data, &scene_name(&scene), features, &cfg, None)?;
            write_registration(&report, &reg, &data)?;
            let r = &reg.record;
            println!(
                "{}: rte={:.4} m rre={:.4} deg success={} inliers={}/{}",
                r.name, r.rte, r.rre, r.success, r.inliers, r.correspondences
            );
        }
        Command::Eval { reports, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let inputs = report_dirs(&reports)?
                .iter()
                .map(|d| read_registration(d))
                .collect::<Result<Vec<_>, _>>()?;
            let report = eval_dataset(&inputs, &cfg.eval)?;
            write_eval_report(&out, &report, &cfg.eval)?;
            print!("{}", summary_table(&report, &cfg.eval));
        }
        Command::Gradcheck { seed } => {
            let r = gradient_check(seed)?;
            println!("directions={} skipped={} max_rel_error={:e}", r.directions, r.skipped, r.max_rel_error);
            if !(r.max_rel_error < 1e-3) {
                return Err(HarnessError::GradCheck(format!(
                    "max relative error {:e} exceeds 1e-3",
                    r.max_rel_error
                )));
            }
        }
        Command::AblateDensity { scene, counts, source, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let data = read_scene(&scene)?;
            let checkpoint = source.checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let features = match &checkpoint {
                Some((params, arch)) => FeatureSource::Network { params, arch },
                None => FeatureSource::Oracle,
            };
            let rows = density_ablation(&data, &scene_name(&scene), &counts, features, &cfg)?;
            print!("{}", density_table(&rows));
            if let Some(out) = out {
                write_file(&out, &density_csv(&rows))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
