//! Command-line front end.

pub mod benchmark;
pub mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, ExperimentConfig};
use crate::datasets::{
    compose_sample, generate_toy_world, load_backgrounds, load_manifest, load_matte_samples, write_composite_dataset, SampleKind,
};
use crate::error::{Error, Result};
use crate::metrics::evaluate_dataset;
use crate::network::{load_checkpoint, Network};
use crate::pipeline::{eval_manifests, run_pipeline, run_sweep, Resume, StageSelection, SWEEP_CSV};
use crate::trainer::StageKind;

#[derive(Debug, Parser)]
#[command(name = "wsshm", version, about = "Weakly semi-supervised human matting experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set stages.student_mlb.iterations=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root (defaults to $WSSHM_OUTPUT_ROOT, then `runs`).
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageArg {
    All,
    One(StageKind),
}

fn parse_stage(s: &str) -> std::result::Result<StageArg, String> {
    if s == "all" {
        return Ok(StageArg::All);
    }
    StageKind::parse(s).map(StageArg::One).ok_or_else(|| {
        let names: Vec<&str> = StageKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown stage `{s}` (expected all, {})", names.join(", "))
    })
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural two-domain toy world.
    MakeToyData {
        /// Destination (defaults to the configured data root).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing toy world.
        #[arg(long)]
        overwrite: bool,
    },
    /// Composite foreground mattes onto backgrounds into a dataset directory.
    Compose {
        /// Directory of foregrounds with mattes (images/ + labels/).
        #[arg(long)]
        fg: PathBuf,
        #[arg(long)]
        backgrounds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all stages or a single one.
    Train {
        #[arg(long, default_value = "all", value_parser = parse_stage)]
        stage: StageArg,
        /// Continue from the newest checkpoints, or from the given one.
        #[arg(long, num_args = 0..=1, value_name = "CKPT")]
        resume: Option<Option<PathBuf>>,
        /// Run directory (defaults to <output>/train).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Train every (seg, mat) cell of a grid; finished cells are skipped.
    Sweep {
        /// Comma-separated, e.g. `0,64,256` (defaults to the config).
        #[arg(long, value_delimiter = ',')]
        seg_counts: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        mat_counts: Vec<usize>,
        /// Sweep directory (defaults to <output>/sweep).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured eval sets.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where to write the JSON report (defaults to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time forward passes at a square input size.
    Benchmark {
        #[arg(long, conflicts_with = "preset")]
        checkpoint: Option<PathBuf>,
        /// r101, r18 or r18_half with random weights.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        edge: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        /// Hardware descriptor echoed into the report.
        #[arg(long)]
        hardware: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw sweep charts as SVG files.
    Plot {
        /// Sweep table (defaults to <output>/sweep/sweep.csv).
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Chart directory (defaults to a `plots` folder beside the table).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Loads the configuration and applies the global flags.
pub fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = load_config(common.config.as_deref(), &common.set)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.toy.seed = seed;
    }
    if let Some(out) = &common.output {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_net(path: &Path) -> Result<Network<f32>> {
    Ok(load_checkpoint::<f32>(path)?.0)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::MakeToyData { out, overwrite } => {
            let root = out.clone().unwrap_or_else(|| cfg.data_root());
            let world = generate_toy_world(&root, &cfg.toy, *overwrite)?;
            println!("matte foregrounds: {} -> {}", cfg.toy.n_matte, world.matte_dir.display());
            println!("backgrounds:       {} -> {}", cfg.toy.n_backgrounds, world.backgrounds_dir.display());
            println!("natural (seg):     {} -> {}", cfg.toy.n_seg, world.natural_dir.display());
            for (name, dir) in &world.eval_dirs {
                println!("eval {name}: {} -> {}", cfg.toy.n_eval, dir.display());
            }
        }
        Command::Compose { fg, backgrounds, out } => {
            let samples = load_matte_samples(&load_manifest(fg, SampleKind::MatteFg)?)?;
            let bgs = load_backgrounds(backgrounds)?;
            let items = samples
                .iter()
                .enumerate()
                .map(|(i, s)| compose_sample(s, &bgs, cfg.seed, i as u64).map(|(img, m)| (s.source_id.clone(), img, m)))
                .collect::<Result<Vec<_>>>()?;
            write_composite_dataset(out, &items)?;
            println!("wrote {} composites to {}", items.len(), out.display());
        }
        Command::Train { stage, resume, run_dir } => {
            let dir = run_dir.clone().unwrap_or_else(|| cfg.output_root().join("train"));
            let resume = match resume {
                None => Resume::Fresh,
                Some(None) => Resume::Latest,
                Some(Some(p)) => Resume::From(p.clone()),
            };
            let selection = match stage {
                StageArg::All => StageSelection::All,
                StageArg::One(s) => StageSelection::Only(*s),
            };
            let outcome = run_pipeline(&cfg, &dir, &resume, selection)?;
            match outcome.report {
                Some(report) => {
                    for r in &report.eval {
                        println!(
                            "{}: mse_whole {:.3} sad_whole {:.3} mse_boundary {} ({} images)",
                            r.dataset_id,
                            r.mse_whole,
                            r.sad_whole,
                            r.mse_boundary.map_or("n/a".into(), |v| format!("{v:.3}")),
                            r.n_images
                        );
                    }
                    println!("report written to {}", dir.display());
                }
                None => println!("stage finished; checkpoints in {}", dir.join("checkpoints").display()),
            }
        }
        Command::Sweep { seg_counts, mat_counts, dir } => {
            let mut cfg = cfg.clone();
            if !seg_counts.is_empty() {
                cfg.sweep.seg_counts = seg_counts.clone();
            }
            if !mat_counts.is_empty() {
                cfg.sweep.mat_counts = mat_counts.clone();
            }
            let dir = dir.clone().unwrap_or_else(|| cfg.output_root().join("sweep"));
            let summary = run_sweep(&cfg, &dir)?;
            println!(
                "executed {} cells, reused {}, failed {}; table at {}",
                summary.executed.len(),
                summary.reused.len(),
                summary.failed.len(),
                dir.join(SWEEP_CSV).display()
            );
            if let Some(((s, m), e)) = summary.failed.into_iter().next() {
                return Err(Error::invalid(format!("sweep cell seg={s} mat={m} failed: {e}")));
            }
        }
        Command::Evaluate { checkpoint, out } => {
            let net = load_net(checkpoint)?;
            let reports = eval_manifests(&cfg)?
                .iter()
                .map(|(name, m)| evaluate_dataset(&net, m, &cfg.eval, name))
                .collect::<Result<Vec<_>>>()?;
            if let Some(out) = out {
                std::fs::write(out, serde_json::to_vec_pretty(&reports)?)?;
            }
            for r in &reports {
                println!(
                    "{}: mse_whole {:.3} sad_whole {:.3} mse_boundary {} sad_boundary {} ({} images, {} without boundary)",
                    r.dataset_id,
                    r.mse_whole,
                    r.sad_whole,
                    r.mse_boundary.map_or("n/a".into(), |v| format!("{v:.3}")),
                    r.sad_boundary.map_or("n/a".into(), |v| format!("{v:.3}")),
                    r.n_images,
                    r.n_boundary_skipped
                );
            }
        }
        Command::Benchmark {
            checkpoint,
            preset,
            edge,
            iters,
            warmup,
            hardware,
            out,
        } => {
            let (net, model) = match (checkpoint, preset) {
                (Some(p), _) => (load_net(p)?, p.display().to_string()),
                (None, Some(name)) => {
                    let ncfg = benchmark::preset(name)
                        .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}` (r101, r18, r18_half)")))?;
                    (Network::<f32>::build(&ncfg, cfg.seed)?, name.clone())
                }
                (None, None) => (Network::<f32>::build(&cfg.network, cfg.seed)?, "configured network".to_string()),
            };
            let hw = hardware.clone().unwrap_or_else(benchmark::host_descriptor);
            let report = benchmark::run_benchmark(
                &net,
                &model,
                edge.unwrap_or(cfg.benchmark.edge),
                iters.unwrap_or(cfg.benchmark.iters),
                warmup.unwrap_or(cfg.benchmark.warmup),
                &hw,
            )?;
            if let Some(out) = out {
                std::fs::write(out, serde_json::to_vec_pretty(&report)?)?;
            }
            print_json(&report)?;
        }
        Command::Plot { csv, out } => {
            let csv = csv.clone().unwrap_or_else(|| cfg.output_root().join("sweep").join(SWEEP_CSV));
            let rows = plot::read_sweep_csv(&csv)?;
            let out = out
                .clone()
                .unwrap_or_else(|| csv.parent().unwrap_or(Path::new(".")).join("plots"));
            for f in plot::plot_sweep(&rows, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

/// Entry point used by the binary.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                msg.push_str(&format!("\n  caused by: {s}"));
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn stage_and_count_arguments() {
        assert_eq!(parse_stage("all"), Ok(StageArg::All));
        assert_eq!(parse_stage("teacher_finetune"), Ok(StageArg::One(StageKind::TeacherFinetune)));
        assert!(parse_stage("warmup").is_err());
        let cli = Cli::try_parse_from(["wsshm", "sweep", "--seg-counts", "0,8,16"]).unwrap();
        match cli.command {
            Command::Sweep { seg_counts, mat_counts, .. } => {
                assert_eq!(seg_counts, vec![0, 8, 16]);
                assert!(mat_counts.is_empty());
            }
            _ => unreachable!(),
        }
        assert!(Cli::try_parse_from(["wsshm", "sweep", "--seg-counts", "1,x"]).is_err());
    }

    #[test]
    fn global_flags_work_after_the_subcommand() {
        let cli = Cli::try_parse_from(["wsshm", "plot", "--set", "seed=3", "--seed", "5"]).unwrap();
        assert_eq!(cli.common.set, vec!["seed=3".to_string()]);
        let cfg = resolve_config(&cli.common).unwrap();
        assert_eq!(cfg.seed, 5);
    }
}
