//! Segmentation pretraining, teacher fine-tuning on composites and student
//! training with matte label blending, plus Adam, the cosine schedule and EMA.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_geo, apply_photo, sample_geo, sample_jitter, AugmentConfig, LabelMap};
use crate::datasets::{compose_sample, MatteSample, SegSample};
use crate::error::{Error, Result};
use crate::labels::{binarize_boundary, blend_matte, extract_boundary, AlphaMatte, BoundaryMask, Grid, RgbImage, SegMask};
use crate::losses::{loss_matte, loss_mse, loss_total, LossConfig, LossTerms};
use crate::network::{save_checkpoint, Gradients, Mode, Network, ParamKind, ParamStore};
use crate::seeding::{derive_seed, rng_for, tag};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    SegPretrain,
    TeacherFinetune,
    StudentMlb,
}

impl StageKind {
    pub const ALL: [StageKind; 3] = [StageKind::SegPretrain, StageKind::TeacherFinetune, StageKind::StudentMlb];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::SegPretrain => "seg_pretrain",
            StageKind::TeacherFinetune => "teacher_finetune",
            StageKind::StudentMlb => "student_mlb",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    #[serde(default = "default_ema_momentum")]
    pub ema_momentum: f64,
    #[serde(default = "default_true")]
    pub use_ema: bool,
    #[serde(default = "default_true")]
    pub use_weak_strong: bool,
}

fn default_ema_momentum() -> f64 {
    0.999
}

fn default_true() -> bool {
    true
}

impl StageConfig {
    pub fn new(lr: f64, iterations: usize, batch_size: usize) -> Self {
        Self {
            lr,
            iterations,
            batch_size,
            ema_momentum: default_ema_momentum(),
            use_ema: true,
            use_weak_strong: true,
        }
    }

    pub fn validate(&self, stage: StageKind) -> Result<()> {
        let key = |f: &str| format!("stages.{}.{f}", stage.name());
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(key("lr"), "must be a positive finite number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(key("batch_size"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::config(key("ema_momentum"), "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagesConfig {
    pub seg_pretrain: StageConfig,
    pub teacher_finetune: StageConfig,
    pub student_mlb: StageConfig,
}

impl StagesConfig {
    pub fn paper() -> Self {
        Self {
            seg_pretrain: StageConfig::new(1e-4, 200_000, 16),
            teacher_finetune: StageConfig::new(5e-5, 10_000, 16),
            student_mlb: StageConfig::new(5e-5, 20_000, 16),
        }
    }

    /// A few hundred steps per stage with raised learning rates, sized for the
    /// toy world on a CPU.
    pub fn toy() -> Self {
        Self {
            seg_pretrain: StageConfig::new(2e-3, 300, 8),
            teacher_finetune: StageConfig::new(1e-3, 600, 8),
            // a short student run needs a slower teacher average or the
            // untrained student boundary head leaks into the teacher
            student_mlb: StageConfig {
                ema_momentum: 0.9999,
                ..StageConfig::new(1e-3, 500, 8)
            },
        }
    }

    pub fn get(&self, stage: StageKind) -> &StageConfig {
        match stage {
            StageKind::SegPretrain => &self.seg_pretrain,
            StageKind::TeacherFinetune => &self.teacher_finetune,
            StageKind::StudentMlb => &self.student_mlb,
        }
    }

    pub fn get_mut(&mut self, stage: StageKind) -> &mut StageConfig {
        match stage {
            StageKind::SegPretrain => &mut self.seg_pretrain,
            StageKind::TeacherFinetune => &mut self.teacher_finetune,
            StageKind::StudentMlb => &mut self.student_mlb,
        }
    }
}

/// `base * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam over the trainable entries of one parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros = |e: &crate::network::ParamEntry<f32>| match e.kind {
            ParamKind::Weight => vec![0.0; e.values.len()],
            ParamKind::Buffer => Vec::new(),
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Number of parameter values that carry moment estimates.
    pub fn state_len(&self) -> usize {
        self.m.iter().map(Vec::len).sum()
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(self.steps as f64);
        let c2 = 1.0 - b2.powf(self.steps as f64);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let (b1f, b2f, eps) = (b1 as f32, b2 as f32, self.eps as f32);
        for (idx, entry) in store.entries_mut().iter_mut().enumerate() {
            if entry.kind != ParamKind::Weight {
                continue;
            }
            let g = grads.get(idx);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..entry.values.len() {
                m[i] = b1f * m[i] + (1.0 - b1f) * g[i];
                v[i] = b2f * v[i] + (1.0 - b2f) * g[i] * g[i];
                entry.values[i] -= step_size * m[i] / (v[i].sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// Where a stage writes its JSON-lines log and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Checkpoint every this many steps (the final step is always written); 0 = final only.
    pub checkpoint_every: usize,
    /// Log every this many steps (the final step is always logged).
    pub log_every: usize,
}

impl RunOutput {
    pub fn at(dir: &Path) -> Self {
        Self {
            dir: Some(dir.to_path_buf()),
            checkpoint_every: 0,
            log_every: 1,
        }
    }

    pub fn log_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("train_log.jsonl"))
    }

    pub fn checkpoint_dir(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("checkpoints"))
    }

    pub fn checkpoint_path(&self, name: &str, step: usize) -> Option<PathBuf> {
        self.checkpoint_dir().map(|d| d.join(checkpoint_name(name, step)))
    }
}

pub fn checkpoint_name(stage: &str, step: usize) -> String {
    format!("{stage}_{step}.ckpt")
}

/// Everything a stage needs besides its data and network.
#[derive(Clone, Debug)]
pub struct TrainContext {
    pub seed: u64,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    /// Draw a fresh background for every composite (otherwise the pairing is fixed per sample).
    pub recomposite: bool,
    pub output: RunOutput,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub l_mse: f64,
    pub l_grad: f64,
    pub l_boundary: f64,
    pub total: f64,
}

/// Mutable training state of one stage.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: StageKind,
    /// Optimizer steps completed in this stage.
    pub step: usize,
    pub net: Network<f32>,
    pub optimizer: Adam,
    /// Frozen pseudo-labelling network (student stage only); never receives gradients.
    pub teacher: Option<Network<f32>>,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(stage: StageKind, net: Network<f32>, teacher: Option<Network<f32>>, rng_seed: u64) -> Self {
        let optimizer = Adam::new(net.params());
        Self {
            stage,
            step: 0,
            net,
            optimizer,
            teacher,
            rng_seed,
        }
    }

    /// Continues at `step`; optimizer moments start from zero.
    pub fn resumed(stage: StageKind, net: Network<f32>, teacher: Option<Network<f32>>, rng_seed: u64, step: usize) -> Self {
        let mut s = Self::new(stage, net, teacher, rng_seed);
        s.step = step;
        s
    }

    fn step_rng_path(&self, extra: &[u64]) -> Vec<u64> {
        let mut p = vec![tag(self.stage.name()), self.step as u64];
        p.extend_from_slice(extra);
        p
    }
}

fn to_tensor(images: &[RgbImage]) -> Tensor<f32> {
    let (h, w) = images[0].dims();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend(img.values().iter().map(|&v| v as f32));
    }
    Tensor::from_vec([images.len(), 3, h, w], data)
}

fn maps_to_tensor(maps: &[Grid<f64>]) -> Tensor<f32> {
    let (h, w) = maps[0].dims();
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        data.extend(m.values().iter().map(|&v| v as f32));
    }
    Tensor::from_vec([maps.len(), 1, h, w], data)
}

fn seg_grid(s: &SegMask) -> Grid<f64> {
    s.grid().map(f64::from)
}

fn batch_side(state: &TrainState, aug: &AugmentConfig) -> usize {
    rng_for(state.rng_seed, &state.step_rng_path(&[tag("side")])).gen_range(aug.crop_min..=aug.crop_max)
}

/// Weak views of a batch of segmentation samples: geo-transformed image and label.
fn seg_weak_batch(state: &TrainState, data: &[SegSample], batch: usize, aug: &AugmentConfig) -> Result<Vec<(RgbImage, SegMask)>> {
    let side = batch_side(state, aug);
    (0..batch)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(state.rng_seed, &state.step_rng_path(&[i as u64]));
            let s = &data[rng.gen_range(0..data.len())];
            let t = sample_geo(&mut rng, s.image.dims(), (side, side), (aug.scale_min, aug.scale_max), aug.hflip_prob);
            let (img, labels) = apply_geo(&t, &s.image, &[LabelMap::Seg(s.seg.clone())])?;
            match labels.into_iter().next() {
                Some(LabelMap::Seg(seg)) => Ok((img, seg)),
                _ => unreachable!("one segmentation label in, one out"),
            }
        })
        .collect()
}

fn check_finite(state: &TrainState, terms: &LossTerms, grads: &Gradients<f32>) -> Result<()> {
    if !terms.total.is_finite() {
        return Err(Error::NonFinite {
            stage: state.stage.name().into(),
            step: state.step,
            detail: format!("loss is {} ({terms:?})", terms.total),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            stage: state.stage.name().into(),
            step: state.step,
            detail: "non-finite parameter gradient".into(),
        });
    }
    Ok(())
}

fn finish_step(state: &mut TrainState, cfg: &StageConfig, terms: LossTerms, grads: &Gradients<f32>) -> Result<(LossTerms, f64)> {
    check_finite(state, &terms, grads)?;
    let lr = cosine_lr(cfg.lr, state.step, cfg.iterations);
    state.optimizer.step(state.net.params_mut(), grads, lr);
    state.step += 1;
    Ok((terms, lr))
}

/// One segmentation-pretraining step: MSE against the mask as a hard matte.
pub fn seg_step(state: &mut TrainState, data: &[SegSample], cfg: &StageConfig, ctx: &TrainContext) -> Result<(LossTerms, f64)> {
    let batch = seg_weak_batch(state, data, cfg.batch_size, &ctx.augment)?;
    let images: Vec<RgbImage> = batch.iter().map(|(i, _)| i.clone()).collect();
    let targets: Vec<Grid<f64>> = batch.iter().map(|(_, s)| seg_grid(s)).collect();
    let x = to_tensor(&images);
    let target = maps_to_tensor(&targets);
    let pass = state.net.forward_train(&x)?;
    let mse = loss_mse(&pass.prediction.matte, &target)?;
    let grads = state.net.backward(&pass, &mse.grad, None)?;
    let terms = LossTerms {
        l_mse: mse.value,
        total: mse.value,
        ..Default::default()
    };
    finish_step(state, cfg, terms, &grads)
}

/// One teacher step on freshly composited, weakly augmented matte samples.
pub fn teacher_step(
    state: &mut TrainState,
    data: &[MatteSample],
    backgrounds: &[RgbImage],
    cfg: &StageConfig,
    ctx: &TrainContext,
) -> Result<(LossTerms, f64)> {
    let aug = &ctx.augment;
    let side = batch_side(state, aug);
    let compose_seed = if ctx.recomposite {
        derive_seed(state.rng_seed, &state.step_rng_path(&[tag("compose")]))
    } else {
        derive_seed(state.rng_seed, &[tag("compose")])
    };
    let batch: Vec<(RgbImage, AlphaMatte)> = (0..cfg.batch_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(state.rng_seed, &state.step_rng_path(&[i as u64]));
            let k = rng.gen_range(0..data.len());
            let index = if ctx.recomposite { i as u64 } else { k as u64 };
            let (img, matte) = compose_sample(&data[k], backgrounds, compose_seed, index)?;
            let t = sample_geo(&mut rng, img.dims(), (side, side), (aug.scale_min, aug.scale_max), aug.hflip_prob);
            let (img, labels) = apply_geo(&t, &img, &[LabelMap::Matte(matte)])?;
            match labels.into_iter().next() {
                Some(LabelMap::Matte(m)) => Ok((img, m)),
                _ => unreachable!("one matte in, one out"),
            }
        })
        .collect::<Result<_>>()?;
    let images: Vec<RgbImage> = batch.iter().map(|(i, _)| i.clone()).collect();
    let mattes: Vec<Grid<f64>> = batch.iter().map(|(_, m)| m.grid().clone()).collect();
    let bounds: Vec<Grid<f64>> = batch
        .iter()
        .map(|(_, m)| extract_boundary(m).grid().map(f64::from))
        .collect();
    let x = to_tensor(&images);
    let pass = state.net.forward_train(&x)?;
    let total = loss_total(
        &pass.prediction.matte,
        &maps_to_tensor(&mattes),
        &pass.prediction.boundary,
        &maps_to_tensor(&bounds),
        &ctx.loss,
    )?;
    let grads = state.net.backward(&pass, &total.d_matte, Some(&total.d_boundary))?;
    finish_step(state, cfg, total.terms, &grads)
}

fn plane_grid(t: &Tensor<f32>, n: usize) -> Grid<f64> {
    Grid::new(t.height(), t.width(), t.plane(n, 0).iter().map(|&v| f64::from(v)).collect()).expect("non-empty plane")
}

/// Pseudo matte and binarized pseudo boundary for a batch of weak views.
pub fn generate_pseudo_labels(teacher: &Network<f32>, weak: &Tensor<f32>) -> Result<(Vec<AlphaMatte>, Vec<BoundaryMask>)> {
    let pred = teacher.forward_with_mode(weak, Mode::Eval)?;
    let mut mattes = Vec::with_capacity(weak.batch());
    let mut bounds = Vec::with_capacity(weak.batch());
    for n in 0..weak.batch() {
        mattes.push(AlphaMatte::from_grid(plane_grid(&pred.matte, n))?);
        bounds.push(binarize_boundary(&plane_grid(&pred.boundary, n))?);
    }
    Ok((mattes, bounds))
}

/// One student step: weak view, pseudo labels, blended target, strong view,
/// `L_matte` update and (optionally) EMA into the teacher. Without a teacher the
/// target is the segmentation label itself.
pub fn student_step(state: &mut TrainState, data: &[SegSample], cfg: &StageConfig, ctx: &TrainContext) -> Result<(LossTerms, f64)> {
    let weak = seg_weak_batch(state, data, cfg.batch_size, &ctx.augment)?;
    let weak_images: Vec<RgbImage> = weak.iter().map(|(i, _)| i.clone()).collect();
    let targets: Vec<Grid<f64>> = match &state.teacher {
        Some(teacher) => {
            let (mattes, bounds) = generate_pseudo_labels(teacher, &to_tensor(&weak_images))?;
            weak.iter()
                .zip(mattes.iter().zip(&bounds))
                .map(|((_, seg), (m, b))| Ok(blend_matte(m, b, seg)?.grid().clone()))
                .collect::<Result<_>>()?
        }
        None => weak.iter().map(|(_, s)| seg_grid(s)).collect(),
    };
    let strong: Vec<RgbImage> = if cfg.use_weak_strong {
        let bounds = ctx.augment.jitter_bounds();
        weak_images
            .par_iter()
            .enumerate()
            .map(|(i, img)| {
                let mut rng = rng_for(state.rng_seed, &state.step_rng_path(&[tag("jitter"), i as u64]));
                apply_photo(&sample_jitter(&mut rng, &bounds), img)
            })
            .collect()
    } else {
        weak_images
    };
    let x = to_tensor(&strong);
    let pass = state.net.forward_train(&x)?;
    let (terms, d_matte) = loss_matte(&pass.prediction.matte, &maps_to_tensor(&targets), &ctx.loss)?;
    let grads = state.net.backward(&pass, &d_matte, None)?;
    let out = finish_step(state, cfg, terms, &grads)?;
    if cfg.use_ema {
        if let Some(teacher) = state.teacher.as_mut() {
            teacher.ema_update(&state.net, cfg.ema_momentum)?;
        }
    }
    Ok(out)
}

/// Data consumed by a stage.
#[derive(Clone, Copy)]
pub enum StageData<'a> {
    Seg(&'a [SegSample]),
    Matte { samples: &'a [MatteSample], backgrounds: &'a [RgbImage] },
}

fn append_log(path: &Path, rec: &LogRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(rec)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    Ok(())
}

fn write_checkpoints(state: &TrainState, out: &RunOutput) -> Result<()> {
    let Some(dir) = out.checkpoint_dir() else {
        return Ok(());
    };
    fs::create_dir_all(&dir)?;
    let name = state.stage.name();
    save_checkpoint(&dir.join(checkpoint_name(name, state.step)), &state.net, name, state.step)?;
    if let Some(teacher) = &state.teacher {
        let tname = format!("{name}_teacher");
        save_checkpoint(&dir.join(checkpoint_name(&tname, state.step)), teacher, &tname, state.step)?;
    }
    Ok(())
}

/// Runs the remaining steps of a stage, logging and checkpointing along the way.
pub fn run_stage(mut state: TrainState, data: StageData<'_>, cfg: &StageConfig, ctx: &TrainContext) -> Result<TrainState> {
    cfg.validate(state.stage)?;
    match (state.stage, data) {
        (StageKind::SegPretrain | StageKind::StudentMlb, StageData::Seg(d)) if d.is_empty() => {
            return Err(Error::invalid("segmentation dataset is empty"));
        }
        (StageKind::TeacherFinetune, StageData::Matte { samples, backgrounds }) => {
            if samples.is_empty() {
                return Err(Error::invalid("matte dataset is empty"));
            }
            if backgrounds.is_empty() {
                return Err(Error::invalid("background pool is empty"));
            }
        }
        (StageKind::SegPretrain | StageKind::StudentMlb, StageData::Seg(_)) => {}
        (stage, _) => return Err(Error::invalid(format!("wrong data kind for stage {stage}"))),
    }
    if state.stage == StageKind::StudentMlb && cfg.use_ema {
        if let Some(t) = &state.teacher {
            if t.config() != state.net.config() {
                return Err(Error::config(
                    "stages.student_mlb.use_ema",
                    "EMA needs teacher and student to share one network configuration; disable use_ema",
                ));
            }
        }
    }
    if let Some(t) = state.teacher.as_mut() {
        t.set_mode(Mode::Eval);
    }
    state.net.set_mode(Mode::Train);
    let log_path = ctx.output.log_path();
    if let Some(dir) = &ctx.output.dir {
        fs::create_dir_all(dir)?;
    }
    let log_every = ctx.output.log_every.max(1);
    while state.step < cfg.iterations {
        let (terms, lr) = match data {
            StageData::Seg(d) if state.stage == StageKind::SegPretrain => seg_step(&mut state, d, cfg, ctx)?,
            StageData::Seg(d) => student_step(&mut state, d, cfg, ctx)?,
            StageData::Matte { samples, backgrounds } => teacher_step(&mut state, samples, backgrounds, cfg, ctx)?,
        };
        let done = state.step == cfg.iterations;
        if let Some(path) = &log_path {
            if state.step % log_every == 0 || done || state.step == 1 {
                append_log(
                    path,
                    &LogRecord {
                        stage: state.stage.name().into(),
                        step: state.step,
                        lr,
                        l_mse: terms.l_mse,
                        l_grad: terms.l_grad,
                        l_boundary: terms.l_boundary,
                        total: terms.total,
                    },
                )?;
            }
        }
        let every = ctx.output.checkpoint_every;
        if !done && every > 0 && state.step % every == 0 {
            write_checkpoints(&state, &ctx.output)?;
        }
    }
    write_checkpoints(&state, &ctx.output)?;
    state.net.set_mode(Mode::Eval);
    Ok(state)
}

/// Segmentation pretraining from `net` for `cfg.iterations` steps.
pub fn pretrain_seg(net: Network<f32>, data: &[SegSample], cfg: &StageConfig, ctx: &TrainContext) -> Result<Network<f32>> {
    let state = TrainState::new(StageKind::SegPretrain, net, None, ctx.seed);
    run_stage(state, StageData::Seg(data), cfg, ctx)
        .map(|s| s.net)
        .map_err(|e| e.in_stage(StageKind::SegPretrain.name()))
}

/// Teacher fine-tuning on composites of `data` over `backgrounds`.
pub fn train_teacher(net: Network<f32>, data: &[MatteSample], backgrounds: &[RgbImage], cfg: &StageConfig, ctx: &TrainContext) -> Result<Network<f32>> {
    let state = TrainState::new(StageKind::TeacherFinetune, net, None, ctx.seed);
    run_stage(state, StageData::Matte { samples: data, backgrounds }, cfg, ctx)
        .map(|s| s.net)
        .map_err(|e| e.in_stage(StageKind::TeacherFinetune.name()))
}

/// Student training; returns `(student, teacher after EMA)`.
pub fn train_student(
    student: Network<f32>,
    teacher: Option<Network<f32>>,
    data: &[SegSample],
    cfg: &StageConfig,
    ctx: &TrainContext,
) -> Result<(Network<f32>, Option<Network<f32>>)> {
    let state = TrainState::new(StageKind::StudentMlb, student, teacher, ctx.seed);
    run_stage(state, StageData::Seg(data), cfg, ctx)
        .map(|s| (s.net, s.teacher))
        .map_err(|e| e.in_stage(StageKind::StudentMlb.name()))
}
