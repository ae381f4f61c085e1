//! End-to-end runs: data resolution, the stage chain with its degenerate
//! paths, resume, evaluation and reports. Also the seg x mat sweep.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::datasets::{
    generate_toy_world, load_backgrounds, load_manifest, load_matte_samples, load_seg_samples, sample_subset, DatasetManifest,
    SampleKind, ToyWorld,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, MetricReport};
use crate::network::{load_checkpoint, Network};
use crate::trainer::{checkpoint_name, run_stage, StageData, StageKind, TrainContext, TrainState};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const SWEEP_CSV: &str = "sweep.csv";

/// Where a run picks up from.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Resume {
    /// Start every stage from scratch.
    #[default]
    Fresh,
    /// Reuse finished stages and continue from the newest checkpoint of each.
    Latest,
    /// Continue the stage recorded in this checkpoint; other stages as `Latest`.
    From(PathBuf),
}

/// Which stages a run executes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StageSelection {
    #[default]
    All,
    /// Run one stage; earlier stages must already be finished in the run directory.
    Only(StageKind),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub seg_n: usize,
    pub mat_n: usize,
    /// Stage whose network is reported.
    pub final_stage: String,
    pub final_checkpoint: Option<PathBuf>,
    pub eval: Vec<MetricReport>,
}

/// One CSV line per eval set; shared by run reports and the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seg_n: usize,
    pub mat_n: usize,
    pub eval_set: String,
    pub mse_whole: f64,
    pub sad_whole: f64,
    pub mse_boundary: Option<f64>,
    pub sad_boundary: Option<f64>,
    pub n_images: usize,
    pub n_boundary_skipped: usize,
}

impl RunReport {
    pub fn rows(&self) -> Vec<ResultRow> {
        self.eval
            .iter()
            .map(|r| ResultRow {
                seg_n: self.seg_n,
                mat_n: self.mat_n,
                eval_set: r.dataset_id.clone(),
                mse_whole: r.mse_whole,
                sad_whole: r.sad_whole,
                mse_boundary: r.mse_boundary,
                sad_boundary: r.sad_boundary,
                n_images: r.n_images,
                n_boundary_skipped: r.n_boundary_skipped,
            })
            .collect()
    }

    pub fn eval_set(&self, name: &str) -> Option<&MetricReport> {
        self.eval.iter().find(|r| r.dataset_id == name)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))
}

/// Generates the toy world when the configuration relies on it and it is missing.
pub fn ensure_toy_data(cfg: &ExperimentConfig) -> Result<()> {
    let d = &cfg.data;
    let uses_toy = d.seg_dir.is_none() || d.matte_dir.is_none() || d.backgrounds_dir.is_none() || d.eval.is_empty();
    let root = cfg.data_root();
    let world = ToyWorld::at(&root);
    let present = world.eval_dirs.iter().all(|(_, dir)| dir.exists()) && world.natural_dir.exists();
    if uses_toy && !present {
        log::info!("generating toy data under {}", root.display());
        generate_toy_world(&root, &cfg.toy, false)?;
    }
    Ok(())
}

fn subset(manifest: DatasetManifest, n: Option<usize>, seed: u64) -> Result<DatasetManifest> {
    match n {
        Some(n) if n != manifest.len() => sample_subset(&manifest, n, seed),
        _ => Ok(manifest),
    }
}

/// Loads the eval manifests named in the configuration.
pub fn eval_manifests(cfg: &ExperimentConfig) -> Result<Vec<(String, DatasetManifest)>> {
    cfg.eval_sets()
        .into_iter()
        .map(|s| Ok((s.name, load_manifest(&s.dir, SampleKind::Composite)?)))
        .collect()
}

pub fn evaluate_all(net: &Network<f32>, cfg: &ExperimentConfig) -> Result<Vec<MetricReport>> {
    eval_manifests(cfg)?
        .iter()
        .map(|(name, m)| evaluate_dataset(net, m, &cfg.eval, name))
        .collect()
}

/// Checkpoints of `stage` in `dir`, oldest first.
fn stage_checkpoints(dir: &Path, stage: &str) -> Vec<(usize, PathBuf)> {
    let Ok(rd) = fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut found: Vec<(usize, PathBuf)> = rd
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let (prefix, step) = name.strip_suffix(".ckpt")?.rsplit_once('_')?;
            (prefix == stage).then(|| step.parse().ok().map(|s| (s, e.path())))?
        })
        .collect();
    found.sort();
    found
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    ctx: TrainContext,
    ckpt_dir: PathBuf,
    resume: &'a Resume,
}

impl Runner<'_> {
    fn load(&self, path: &Path) -> Result<(Network<f32>, usize)> {
        let (net, meta) = load_checkpoint::<f32>(path)?;
        if net.config() != &self.cfg.network {
            return Err(Error::config(
                "network",
                format!("checkpoint {} was written for a different network configuration", path.display()),
            ));
        }
        Ok((net, meta.step))
    }

    fn finished(&self, stage: StageKind) -> Option<PathBuf> {
        if *self.resume == Resume::Fresh {
            return None;
        }
        let path = self.ckpt_dir.join(checkpoint_name(stage.name(), self.cfg.stages.get(stage).iterations));
        path.exists().then_some(path)
    }

    /// Checkpoint to continue `stage` from, if any.
    fn partial(&self, stage: StageKind) -> Result<Option<PathBuf>> {
        match self.resume {
            Resume::Fresh => Ok(None),
            Resume::From(path) => {
                let (_, meta) = load_checkpoint::<f32>(path)?;
                let recorded = StageKind::parse(&meta.stage)
                    .ok_or_else(|| Error::Checkpoint(format!("{}: `{}` is not a resumable stage", path.display(), meta.stage)))?;
                if recorded == stage {
                    return Ok(Some(path.clone()));
                }
                Ok(stage_checkpoints(&self.ckpt_dir, stage.name()).pop().map(|(_, p)| p))
            }
            Resume::Latest => Ok(stage_checkpoints(&self.ckpt_dir, stage.name()).pop().map(|(_, p)| p)),
        }
    }

    /// Runs or restores one stage; returns the trained net and (for the student) the final teacher.
    fn stage(
        &self,
        stage: StageKind,
        start: Network<f32>,
        teacher: Option<Network<f32>>,
        data: StageData<'_>,
    ) -> Result<(Network<f32>, Option<Network<f32>>)> {
        let wrap = |e: Error| e.in_stage(stage.name());
        if let Some(path) = self.finished(stage) {
            log::info!("{}: reusing {}", stage.name(), path.display());
            let (net, _) = self.load(&path).map_err(wrap)?;
            return Ok((net, teacher));
        }
        let scfg = self.cfg.stages.get(stage);
        let state = match self.partial(stage).map_err(wrap)? {
            Some(path) => {
                let (net, step) = self.load(&path).map_err(wrap)?;
                log::info!("{}: resuming at step {step} from {}", stage.name(), path.display());
                let teacher = match teacher {
                    Some(t) if stage == StageKind::StudentMlb && scfg.use_ema => {
                        let tname = format!("{}_teacher", stage.name());
                        let tpath = path.with_file_name(checkpoint_name(&tname, step));
                        if !tpath.exists() {
                            return Err(wrap(Error::Checkpoint(format!(
                                "EMA teacher checkpoint {} is missing",
                                tpath.display()
                            ))));
                        }
                        drop(t);
                        Some(self.load(&tpath).map_err(wrap)?.0)
                    }
                    t => t,
                };
                TrainState::resumed(stage, net, teacher, self.ctx.seed, step)
            }
            None => TrainState::new(stage, start, teacher, self.ctx.seed),
        };
        run_stage(state, data, scfg, &self.ctx)
            .map(|s| (s.net, s.teacher))
            .map_err(wrap)
    }
}

/// Result of [`run_pipeline`].
pub struct PipelineOutcome {
    pub final_net: Network<f32>,
    /// `None` when a single non-final stage was run.
    pub report: Option<RunReport>,
}

/// Runs seg pretraining, teacher fine-tuning and student training into `out_dir`.
///
/// `seg_n = 0` skips pretraining and the student (the teacher is final);
/// `mat_n = 0` skips the teacher and trains the student on raw seg labels.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: &Path, resume: &Resume, selection: StageSelection) -> Result<PipelineOutcome> {
    cfg.validate()?;
    ensure_toy_data(cfg)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_SNAPSHOT), cfg.to_toml()?)?;
    let ctx = cfg.train_context(Some(out_dir));
    if *resume == Resume::Fresh {
        if let Some(log) = ctx.output.log_path() {
            if log.exists() {
                fs::remove_file(log)?;
            }
        }
    }
    let ckpt_dir = ctx.output.checkpoint_dir().expect("output dir is set");
    // a single stage always picks up the finished stages before it
    let resume = match (selection, resume) {
        (StageSelection::Only(_), Resume::Fresh) => &Resume::Latest,
        _ => resume,
    };
    let runner = Runner {
        cfg,
        ctx,
        ckpt_dir,
        resume,
    };

    let seg_manifest = match cfg.data.seg_n {
        Some(0) => None,
        n => Some(subset(load_manifest(&cfg.seg_dir(), SampleKind::Seg)?, n, cfg.seed)?),
    };
    let mat_manifest = match cfg.data.mat_n {
        Some(0) => None,
        n => Some(subset(load_manifest(&cfg.matte_dir(), SampleKind::MatteFg)?, n, cfg.seed)?),
    };
    let seg_n = seg_manifest.as_ref().map_or(0, |m| m.len());
    let mat_n = mat_manifest.as_ref().map_or(0, |m| m.len());
    if seg_n == 0 && mat_n == 0 {
        return Err(Error::config("data", "no training data: both subsets are empty"));
    }

    let plan: Vec<StageKind> = StageKind::ALL
        .into_iter()
        .filter(|s| match s {
            StageKind::SegPretrain | StageKind::StudentMlb => seg_n > 0,
            StageKind::TeacherFinetune => mat_n > 0,
        })
        .collect();
    let last = *plan.last().expect("at least one stage");
    let stop = match selection {
        StageSelection::All => last,
        StageSelection::Only(s) => {
            if !plan.contains(&s) {
                return Err(Error::config("stage", format!("stage {s} is skipped for seg_n={seg_n}, mat_n={mat_n}")));
            }
            s
        }
    };

    let seg = seg_manifest.as_ref().map(load_seg_samples).transpose()?;
    let mat = mat_manifest.as_ref().map(load_matte_samples).transpose()?;
    let bgs = if mat.is_some() { load_backgrounds(&cfg.backgrounds_dir())? } else { Vec::new() };

    let init = Network::<f32>::build(&cfg.network, cfg.seed)?;
    let mut net = init;
    let mut pretrained = None;
    let mut teacher = None;
    for stage in plan {
        if let StageSelection::Only(only) = selection {
            if stage != only && runner.finished(stage).is_none() {
                return Err(Error::config(
                    "stage",
                    format!("stage {only} needs a finished {stage} checkpoint in {}", runner.ckpt_dir.display()),
                ));
            }
        }
        match stage {
            StageKind::SegPretrain => {
                let (n, _) = runner.stage(stage, net.clone(), None, StageData::Seg(seg.as_deref().unwrap()))?;
                pretrained = Some(n.clone());
                net = n;
            }
            StageKind::TeacherFinetune => {
                let data = StageData::Matte {
                    samples: mat.as_deref().unwrap(),
                    backgrounds: &bgs,
                };
                let (t, _) = runner.stage(stage, net.clone(), None, data)?;
                teacher = Some(t.clone());
                net = t;
            }
            StageKind::StudentMlb => {
                let start = pretrained.clone().expect("pretraining precedes the student");
                let (s, _) = runner.stage(stage, start, teacher.take(), StageData::Seg(seg.as_deref().unwrap()))?;
                net = s;
            }
        }
        if stage == stop {
            break;
        }
    }

    if stop != last {
        return Ok(PipelineOutcome {
            final_net: net,
            report: None,
        });
    }
    let final_checkpoint = runner.ckpt_dir.join(checkpoint_name(last.name(), cfg.stages.get(last).iterations));
    let report = RunReport {
        seed: cfg.seed,
        seg_n,
        mat_n,
        final_stage: last.name().to_string(),
        final_checkpoint: final_checkpoint.exists().then_some(final_checkpoint),
        eval: evaluate_all(&net, cfg)?,
    };
    fs::write(out_dir.join(REPORT_JSON), serde_json::to_vec_pretty(&report)?)?;
    write_rows(&out_dir.join(REPORT_CSV), &report.rows())?;
    Ok(PipelineOutcome {
        final_net: net,
        report: Some(report),
    })
}

/// Directory name of a sweep cell.
pub fn cell_dir_name(seg_n: usize, mat_n: usize) -> String {
    format!("seg{seg_n}_mat{mat_n}")
}

/// Outcome of [`run_sweep`].
#[derive(Debug, Default)]
pub struct SweepSummary {
    pub executed: Vec<(usize, usize)>,
    pub reused: Vec<(usize, usize)>,
    /// Cells whose run failed; the others still complete.
    pub failed: Vec<((usize, usize), Error)>,
    pub rows: Vec<ResultRow>,
}

/// Grid cells of a sweep: every (seg, mat) pair except (0, 0).
pub fn sweep_cells(seg_counts: &[usize], mat_counts: &[usize]) -> Vec<(usize, usize)> {
    seg_counts
        .iter()
        .flat_map(|&s| mat_counts.iter().map(move |&m| (s, m)))
        .filter(|&c| c != (0, 0))
        .collect()
}

/// Runs every cell under `out_dir`, skipping cells that already have a report,
/// and writes the combined table.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SweepSummary> {
    let cells = sweep_cells(&cfg.sweep.seg_counts, &cfg.sweep.mat_counts);
    if cells.is_empty() {
        return Err(Error::config("sweep", "no cells to run"));
    }
    ensure_toy_data(cfg)?;
    fs::create_dir_all(out_dir)?;
    let run_cell = |&(s, m): &(usize, usize)| -> Result<(bool, RunReport)> {
        let dir = out_dir.join(cell_dir_name(s, m));
        let report_path = dir.join(REPORT_JSON);
        if report_path.exists() {
            return Ok((false, RunReport::read(&report_path)?));
        }
        let mut cell = cfg.clone();
        cell.data.seg_n = Some(s);
        cell.data.mat_n = Some(m);
        log::info!("sweep cell seg={s} mat={m}");
        let out = run_pipeline(&cell, &dir, &Resume::Latest, StageSelection::All)?;
        Ok((true, out.report.expect("full pipeline reports")))
    };
    let results: Vec<Result<(bool, RunReport)>> = if cfg.sweep.parallel_cells {
        cells.par_iter().map(run_cell).collect()
    } else {
        cells.iter().map(run_cell).collect()
    };
    let mut summary = SweepSummary::default();
    for (&cell, result) in cells.iter().zip(results) {
        match result {
            Ok((ran, report)) => {
                if ran {
                    summary.executed.push(cell);
                } else {
                    summary.reused.push(cell);
                }
                // rows carry the requested counts so the table lines up with the grid
                summary.rows.extend(report.rows().into_iter().map(|r| ResultRow {
                    seg_n: cell.0,
                    mat_n: cell.1,
                    ..r
                }));
            }
            Err(e) => {
                log::error!("sweep cell seg={} mat={} failed: {e}", cell.0, cell.1);
                summary.failed.push((cell, e));
            }
        }
    }
    write_rows(&out_dir.join(SWEEP_CSV), &summary.rows)?;
    Ok(summary)
}
