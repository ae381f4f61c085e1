//! Property and oracle checks shared by the per-area tests and the acceptance run.
//! Each check returns a one-line summary on success and the failure reason otherwise.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use wsshm::config::{ExperimentConfig, Profile};
use wsshm::datasets::{generate_toy_world, ToyConfig};
use wsshm::datasets::{load_backgrounds, load_manifest, load_matte_samples, load_seg_samples, SampleKind, SegSample};
use wsshm::labels::{binarize_boundary, blend_matte, blend_matte_soft, composite, extract_boundary, AlphaMatte, BoundaryMask, Grid, RgbImage, SegMask};
use wsshm::losses::{loss_boundary, loss_grad, loss_mse, loss_total, GradientOperator, LossConfig};
use wsshm::metrics::{image_metrics, ImageMetrics, MetricReport, PerImageMetrics};
use wsshm::network::{load_checkpoint, save_checkpoint, Mode, Network, NetworkConfig, ParamKind};
use wsshm::pipeline::{run_pipeline, Resume, RunReport, StageSelection};
use wsshm::tensor::Tensor;
use wsshm::trainer::{cosine_lr, pretrain_seg, student_step, train_student, train_teacher, StageConfig, StageKind, TrainState};

pub type Check = std::result::Result<String, String>;

fn fail(msg: impl Into<String>) -> String {
    msg.into()
}

/// Proptest settings for integration tests, which have no source-relative
/// regression directory.
pub fn proptest_config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(proptest_config(cases), TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

// ---------------------------------------------------------------- labels

#[derive(Clone, Debug)]
pub struct LabelCase {
    pub h: usize,
    pub w: usize,
    pub fg: Vec<f64>,
    pub bg: Vec<f64>,
    pub matte: Vec<f64>,
    pub pseudo: Vec<f64>,
    pub alpha: Vec<bool>,
    pub seg: Vec<bool>,
    pub soft: Vec<f64>,
}

/// Matte values with the band thresholds and the binary extremes over-represented.
pub fn matte_value() -> impl Strategy<Value = f64> {
    prop_oneof![
        1 => Just(0.0),
        1 => Just(1.0),
        1 => Just(0.05),
        1 => Just(0.95),
        6 => 0.0..=1.0f64,
    ]
}

pub fn label_case(max_side: usize) -> impl Strategy<Value = LabelCase> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        let n = h * w;
        (
            vec(0.0..=1.0f64, 3 * n),
            vec(0.0..=1.0f64, 3 * n),
            vec(matte_value(), n),
            vec(matte_value(), n),
            vec(any::<bool>(), n),
            vec(any::<bool>(), n),
            vec(0.0..=1.0f64, n),
        )
            .prop_map(move |(fg, bg, matte, pseudo, alpha, seg, soft)| LabelCase {
                h,
                w,
                fg,
                bg,
                matte,
                pseudo,
                alpha,
                seg,
                soft,
            })
    })
}

fn mask<M>(h: usize, w: usize, bits: &[bool], make: impl Fn(usize, usize, Vec<u8>) -> wsshm::Result<M>) -> M {
    make(h, w, bits.iter().map(|&b| u8::from(b)).collect()).unwrap()
}

/// Every label identity on one instance, against pointwise oracles.
pub fn check_label_case(c: &LabelCase) -> std::result::Result<(), TestCaseError> {
    let (h, w, n) = (c.h, c.w, c.h * c.w);
    let fg = RgbImage::new(h, w, c.fg.clone()).unwrap();
    let bg = RgbImage::new(h, w, c.bg.clone()).unwrap();
    let matte = AlphaMatte::new(h, w, c.matte.clone()).unwrap();
    let pseudo = AlphaMatte::new(h, w, c.pseudo.clone()).unwrap();
    let alpha: BoundaryMask = mask(h, w, &c.alpha, BoundaryMask::new);
    let seg: SegMask = mask(h, w, &c.seg, SegMask::new);

    // compositing: pointwise oracle and exact extremes
    let out = composite(&fg, &bg, &matte).unwrap();
    for ch in 0..3 {
        for i in 0..n {
            let m = c.matte[i];
            let want = m * c.fg[ch * n + i] + (1.0 - m) * c.bg[ch * n + i];
            let got = out.values()[ch * n + i];
            prop_assert!((got - want).abs() <= 1e-12, "composite {got} vs {want}");
            prop_assert!((0.0..=1.0).contains(&got));
        }
    }
    prop_assert_eq!(composite(&fg, &bg, &AlphaMatte::filled(h, w, 1.0)).unwrap(), fg.clone());
    prop_assert_eq!(composite(&fg, &bg, &AlphaMatte::filled(h, w, 0.0)).unwrap(), bg.clone());

    // boundary extraction and binarization are exact
    let band = extract_boundary(&matte);
    for i in 0..n {
        let m = c.matte[i];
        prop_assert_eq!(band.values()[i] == 1, m > 0.05 && m < 0.95, "band at {}", m);
    }
    let seg_as_matte = AlphaMatte::from(&seg);
    prop_assert_eq!(extract_boundary(&seg_as_matte).count_ones(), 0);
    let raw = Grid::new(h, w, c.soft.clone()).unwrap();
    let bin = binarize_boundary(&raw).unwrap();
    for i in 0..n {
        prop_assert_eq!(bin.values()[i] == 1, c.soft[i] >= 0.5);
    }

    // blending: oracle, exact collapse, convexity, validity
    let blended = blend_matte(&pseudo, &alpha, &seg).unwrap();
    for i in 0..n {
        let (a, m, s) = (f64::from(u8::from(c.alpha[i])), c.pseudo[i], f64::from(u8::from(c.seg[i])));
        let got = blended.values()[i];
        if c.alpha[i] {
            prop_assert_eq!(got, m);
        } else {
            prop_assert_eq!(got, s);
        }
        prop_assert!((got - (a * m + (1.0 - a) * s)).abs() <= 1e-12);
        prop_assert!(m.min(s) <= got && got <= m.max(s));
    }
    let none: BoundaryMask = BoundaryMask::from_fn(h, w, |_, _| false);
    let all: BoundaryMask = BoundaryMask::from_fn(h, w, |_, _| true);
    prop_assert_eq!(blend_matte(&pseudo, &none, &seg).unwrap(), seg_as_matte);
    prop_assert_eq!(blend_matte(&pseudo, &all, &seg).unwrap(), pseudo.clone());

    // boundary of the blend agrees with the pseudo boundary where alpha' = 1
    let b_blend = extract_boundary(&blended);
    let b_pseudo = extract_boundary(&pseudo);
    for i in 0..n {
        if c.alpha[i] {
            prop_assert_eq!(b_blend.values()[i], b_pseudo.values()[i]);
        }
    }

    // soft weights keep the convex bound and the formula
    let weights = Grid::new(h, w, c.soft.clone()).unwrap();
    let soft = blend_matte_soft(&pseudo, &weights, &seg).unwrap();
    for i in 0..n {
        let (a, m, s) = (c.soft[i], c.pseudo[i], f64::from(u8::from(c.seg[i])));
        let got = soft.values()[i];
        prop_assert!((got - (a * m + (1.0 - a) * s)).abs() <= 1e-12);
        prop_assert!(m.min(s) - 1e-12 <= got && got <= m.max(s) + 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }
    Ok(())
}

pub fn check_label_algebra(cases: u32) -> Check {
    let mut r = runner(cases);
    r.run(&label_case(64), |c| check_label_case(&c)).map_err(|e| e.to_string())?;
    Ok(format!("{cases} randomized instances up to 64x64"))
}

// ---------------------------------------------------------------- losses

#[derive(Debug, Deserialize)]
pub struct GoldenLoss {
    pub name: String,
    pub loss: String,
    pub h: usize,
    pub w: usize,
    pub pred: Vec<f64>,
    pub target: Vec<f64>,
    #[serde(default)]
    pub pred_boundary: Vec<f64>,
    #[serde(default)]
    pub target_boundary: Vec<f64>,
    #[serde(default)]
    pub lambda: f64,
    pub expected: f64,
}

pub fn golden_losses() -> Vec<GoldenLoss> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/loss_golden.json");
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn map1(h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec([1, 1, h, w], v.to_vec())
}

pub fn check_loss_goldens() -> Check {
    let cases = golden_losses();
    for g in &cases {
        let (p, t) = (map1(g.h, g.w, &g.pred), map1(g.h, g.w, &g.target));
        let got = match g.loss.as_str() {
            "mse" => loss_mse(&p, &t).map(|l| l.value),
            "grad" => loss_grad(&p, &t, GradientOperator::Forward).map(|l| l.value),
            "boundary" => loss_boundary(&p, &t).map(|l| l.value),
            "total" => {
                let cfg = LossConfig {
                    lambda_boundary: g.lambda,
                    ..LossConfig::default()
                };
                let (pb, tb) = (map1(g.h, g.w, &g.pred_boundary), map1(g.h, g.w, &g.target_boundary));
                loss_total(&p, &t, &pb, &tb, &cfg).map(|l| l.terms.total)
            }
            other => return Err(fail(format!("unknown loss kind {other}"))),
        }
        .map_err(|e| format!("{}: {e}", g.name))?;
        if (got - g.expected).abs() > 1e-9 {
            return Err(format!("{}: got {got}, expected {}", g.name, g.expected));
        }
    }
    Ok(format!("{} golden instances", cases.len()))
}

/// Central differences of `loss_total` against its analytic gradients on random
/// 8x8 maps. Coordinates whose stencil straddles an `|.|` kink are skipped; a
/// kink shows up as a jump in the analytic gradient across the stencil.
pub fn check_loss_finite_differences(instances: usize, op: GradientOperator) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, h, w) = (2, 8, 8);
    let eps = 1e-6;
    let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    for _ in 0..instances {
        let mut rand_map = |binary: bool| -> Tensor<f64> {
            let v = (0..n * h * w)
                .map(|_| if binary { f64::from(u8::from(rng.gen_bool(0.5))) } else { rng.gen_range(0.01..0.99) })
                .collect();
            Tensor::from_vec([n, 1, h, w], v)
        };
        let (pm, tm, pb, tb) = (rand_map(false), rand_map(false), rand_map(false), rand_map(true));
        let cfg = LossConfig {
            lambda_boundary: rng.gen_range(0.01..1.0),
            gradient_operator: op,
        };
        let total = |pm: &Tensor<f64>, pb: &Tensor<f64>| loss_total(pm, &tm, pb, &tb, &cfg).unwrap();
        let base = total(&pm, &pb);
        for head in 0..2 {
            for i in 0..n * h * w {
                let (analytic, value_at) = if head == 0 {
                    (base.d_matte.data()[i], Box::new(|d: f64| {
                        let mut p = pm.clone();
                        p.data_mut()[i] += d;
                        total(&p, &pb)
                    }) as Box<dyn Fn(f64) -> _>)
                } else {
                    (base.d_boundary.data()[i], Box::new(|d: f64| {
                        let mut p = pb.clone();
                        p.data_mut()[i] += d;
                        total(&pm, &p)
                    }) as Box<dyn Fn(f64) -> _>)
                };
                let (plus, minus) = (value_at(eps), value_at(-eps));
                let slope = |l: &wsshm::losses::TotalLoss<f64>| if head == 0 { l.d_matte.data()[i] } else { l.d_boundary.data()[i] };
                if (slope(&plus) - slope(&minus)).abs() > 1e-6 {
                    skipped += 1;
                    continue;
                }
                let numeric = (plus.terms.total - minus.terms.total) / (2.0 * eps);
                let scale = analytic.abs().max(numeric.abs());
                let rel = if scale < 1e-10 { 0.0 } else { (analytic - numeric).abs() / scale };
                worst = worst.max(rel);
                if rel > 1e-3 {
                    return Err(format!("head {head} index {i}: analytic {analytic}, numeric {numeric}"));
                }
                checked += 1;
            }
        }
    }
    if checked == 0 {
        return Err("every coordinate sat on a kink".into());
    }
    Ok(format!("{checked} coordinates, {skipped} kink-adjacent skipped, max rel err {worst:.2e}"))
}

pub fn check_losses() -> Check {
    let golden = check_loss_goldens()?;
    let fwd = check_loss_finite_differences(4, GradientOperator::Forward)?;
    Ok(format!("{golden}; finite differences: {fwd}"))
}

// ---------------------------------------------------------------- network

pub fn tiny_network() -> NetworkConfig {
    NetworkConfig::r18().with_base_width(4)
}

fn random_input<T: wsshm::tensor::Real>(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<T> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| T::lit(rng.gen::<f64>())).collect())
}

/// Both heads stay in `[0, 1]` at the input resolution, at init and after the
/// weights are replaced by arbitrary values (with running statistics re-estimated).
pub fn check_output_contract() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = Network::<f32>::build(&tiny_network(), 5).map_err(|e| e.to_string())?;
    let shapes = [[1, 3, 16, 16], [2, 3, 32, 48], [1, 3, 37, 21], [1, 3, 5, 70]];
    for round in 0..2 {
        if round == 1 {
            for idx in 0..net.params().len() {
                if net.params().entries()[idx].kind == ParamKind::Weight {
                    for v in net.params_mut().values_mut(idx) {
                        *v = rng.gen_range(-3.0..3.0);
                    }
                }
            }
            let x: Tensor<f32> = random_input(&mut rng, [4, 3, 32, 32]);
            for _ in 0..20 {
                net.forward_train(&x).map_err(|e| e.to_string())?;
            }
        }
        for shape in shapes {
            let x: Tensor<f32> = random_input(&mut rng, shape);
            for mode in [Mode::Eval, Mode::Train] {
                let p = net.forward_with_mode(&x, mode).map_err(|e| e.to_string())?;
                let want = [shape[0], 1, shape[2], shape[3]];
                if p.matte.shape() != want || p.boundary.shape() != want {
                    return Err(format!("input {shape:?} gave {:?}", p.matte.shape()));
                }
                if let Some(v) = p.matte.data().iter().chain(p.boundary.data()).find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(format!("output {v} outside [0, 1] for input {shape:?} in {mode:?} mode (round {round})"));
                }
            }
        }
    }
    Ok(format!("{} shapes, initial and arbitrary weights", shapes.len()))
}

pub fn check_capacity_ordering() -> Check {
    let count = |c: NetworkConfig| Network::<f32>::build(&c, 0).map(|n| n.parameter_count()).map_err(|e| e.to_string());
    let (big, mid, small) = (count(NetworkConfig::r101())?, count(NetworkConfig::r18())?, count(NetworkConfig::r18_half())?);
    if !(big > mid && mid > small) {
        return Err(format!("parameter counts r101 {big}, r18 {mid}, r18_half {small}"));
    }
    Ok(format!("r101 {big} > r18 {mid} > r18_half {small}"))
}

pub fn check_checkpoint_round_trip(dir: &Path) -> Check {
    let mut net = Network::<f32>::build(&tiny_network(), 9).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Tensor<f32> = random_input(&mut rng, [2, 3, 32, 32]);
    // move the BN buffers off their initial values first
    net.forward_train(&x).map_err(|e| e.to_string())?;
    let path = dir.join("roundtrip_7.ckpt");
    save_checkpoint(&path, &net, "teacher_finetune", 7).map_err(|e| e.to_string())?;
    let (back, meta) = load_checkpoint::<f32>(&path).map_err(|e| e.to_string())?;
    if (meta.stage.as_str(), meta.step) != ("teacher_finetune", 7) {
        return Err(format!("metadata came back as {meta:?}"));
    }
    for (a, b) in net.params().entries().iter().zip(back.params().entries()) {
        let same = a.name == b.name && a.shape == b.shape && a.kind == b.kind && a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same || a.values.len() != b.values.len() {
            return Err(format!("entry {} differs after reload", a.name));
        }
    }
    let (pa, pb) = (net.forward_with_mode(&x, Mode::Eval).unwrap(), back.forward_with_mode(&x, Mode::Eval).unwrap());
    if pa.matte.data().iter().zip(pb.matte.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err("reloaded network predicts differently".into());
    }
    Ok(format!("{} entries bitwise equal", net.params().len()))
}

/// Parameter gradients of `sum(w_m * matte) + sum(w_b * boundary)` against
/// central differences on a 32x32 batch, in f64.
pub fn check_network_gradients(samples_per_entry: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut net = Network::<f64>::build(&tiny_network(), 2).map_err(|e| e.to_string())?;
    let x: Tensor<f64> = random_input(&mut rng, [2, 3, 32, 32]);
    let weights = |rng: &mut ChaCha8Rng| Tensor::from_vec([2, 1, 32, 32], (0..2048).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let (wm, wb) = (weights(&mut rng), weights(&mut rng));
    let objective = |n: &Network<f64>| {
        let p = n.forward_with_mode(&x, Mode::Train).unwrap();
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>();
        dot(&p.matte, &wm) + dot(&p.boundary, &wb)
    };
    let grads = {
        let mut probe = net.clone();
        let pass = probe.forward_train(&x).map_err(|e| e.to_string())?;
        probe.backward(&pass, &wm, Some(&wb)).map_err(|e| e.to_string())?
    };
    let eps = 1e-5;
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for idx in 0..net.params().len() {
        let entry = &net.params().entries()[idx];
        if entry.kind != ParamKind::Weight {
            continue;
        }
        let name = entry.name.clone();
        let len = entry.values.len();
        for _ in 0..samples_per_entry.min(len) {
            let k = rng.gen_range(0..len);
            let orig = net.params().entries()[idx].values[k];
            net.params_mut().values_mut(idx)[k] = orig + eps;
            let plus = objective(&net);
            net.params_mut().values_mut(idx)[k] = orig - eps;
            let minus = objective(&net);
            net.params_mut().values_mut(idx)[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(idx)[k];
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale < 1e-8 { 0.0 } else { (analytic - numeric).abs() / scale };
            worst = worst.max(rel);
            if rel > 1e-3 {
                return Err(format!("{name}[{k}]: analytic {analytic}, numeric {numeric}"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} sampled parameters, max rel err {worst:.2e}"))
}

pub fn check_network_contracts(scratch: &Path) -> Check {
    let a = check_output_contract()?;
    let b = check_capacity_ordering()?;
    let c = check_checkpoint_round_trip(scratch)?;
    let d = check_network_gradients(2)?;
    Ok(format!("range/shape: {a}; {b}; checkpoint: {c}; gradients: {d}"))
}

// ---------------------------------------------------------------- pipeline

/// A small but complete toy configuration rooted at `data_root`.
pub fn tiny_config(data_root: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_profile(Profile::Toy);
    cfg.seed = seed;
    cfg.toy = ToyConfig {
        n_matte: 6,
        n_seg: 12,
        n_eval: 3,
        n_backgrounds: 4,
        image_size: 64,
        seed,
        ..ToyConfig::default()
    };
    cfg.data.root = Some(data_root.to_path_buf());
    cfg.network = tiny_network();
    cfg.augment.crop_min = 32;
    cfg.augment.crop_max = 32;
    cfg.eval.edge = 64;
    cfg.run.log_every = 1;
    for s in [&mut cfg.stages.seg_pretrain, &mut cfg.stages.teacher_finetune, &mut cfg.stages.student_mlb] {
        s.iterations = 3;
        s.batch_size = 2;
    }
    cfg
}

pub fn tiny_world(cfg: &ExperimentConfig) -> wsshm::Result<()> {
    generate_toy_world(&cfg.data_root(), &cfg.toy, false).map(|_| ())
}

fn seg_samples(cfg: &ExperimentConfig) -> Vec<SegSample> {
    load_seg_samples(&load_manifest(&cfg.seg_dir(), SampleKind::Seg).unwrap()).unwrap()
}

fn bitwise_eq(a: &Network<f32>, b: &Network<f32>) -> bool {
    a.params().entries().len() == b.params().entries().len()
        && a.params()
            .entries()
            .iter()
            .zip(b.params().entries())
            .all(|(x, y)| x.values.len() == y.values.len() && x.values.iter().zip(&y.values).all(|(u, v)| u.to_bits() == v.to_bits()))
}

fn to_f64(net: &Network<f32>) -> Network<f64> {
    let mut out = Network::<f64>::build(net.config(), 0).unwrap();
    for (idx, e) in net.params().entries().iter().enumerate() {
        for (d, &s) in out.params_mut().values_mut(idx).iter_mut().zip(&e.values) {
            *d = f64::from(s);
        }
    }
    out
}

fn student_cfg(use_ema: bool, momentum: f64) -> StageConfig {
    StageConfig {
        ema_momentum: momentum,
        use_ema,
        ..StageConfig::new(1e-3, 3, 2)
    }
}

pub fn check_teacher_freeze(cfg: &ExperimentConfig) -> Check {
    let data = seg_samples(cfg);
    let ctx = cfg.train_context(None);
    let teacher = Network::<f32>::build(&cfg.network, 1).unwrap();
    let frozen = teacher.clone();
    let scfg = student_cfg(false, 0.9);
    let mut state = TrainState::new(StageKind::StudentMlb, Network::build(&cfg.network, 2).unwrap(), Some(teacher), cfg.seed);
    let start = state.net.clone();
    for _ in 0..3 {
        student_step(&mut state, &data, &scfg, &ctx).map_err(|e| e.to_string())?;
    }
    if bitwise_eq(&state.net, &start) {
        return Err("the student did not move".into());
    }
    if !bitwise_eq(state.teacher.as_ref().unwrap(), &frozen) {
        return Err("teacher changed without EMA".into());
    }
    Ok("teacher bitwise constant over 3 student steps".into())
}

/// The trainer's teacher follows `t <- m t + (1 - m) s` step for step, and that
/// recurrence equals `m^3 t0 + (1 - m)(m^2 s1 + m s2 + s3)`.
pub fn check_ema_recurrence(cfg: &ExperimentConfig) -> Check {
    let data = seg_samples(cfg);
    let ctx = cfg.train_context(None);
    let m = 0.9;
    let scfg = student_cfg(true, m);
    let t0 = Network::<f32>::build(&cfg.network, 1).unwrap();
    let mut state = TrainState::new(StageKind::StudentMlb, Network::build(&cfg.network, 2).unwrap(), Some(t0.clone()), cfg.seed);
    let mut replay = t0.clone();
    let mut students = Vec::new();
    for step in 1..=3 {
        student_step(&mut state, &data, &scfg, &ctx).map_err(|e| e.to_string())?;
        replay.ema_update(&state.net, m).map_err(|e| e.to_string())?;
        if !bitwise_eq(state.teacher.as_ref().unwrap(), &replay) {
            return Err(format!("teacher after step {step} is not one EMA update of the student"));
        }
        students.push(state.net.clone());
    }
    let mut rec = to_f64(&t0);
    let s64: Vec<Network<f64>> = students.iter().map(to_f64).collect();
    for s in &s64 {
        rec.ema_update(s, m).unwrap();
    }
    let t064 = to_f64(&t0);
    let mut worst = 0.0f64;
    for idx in 0..rec.params().len() {
        let vals = |n: &Network<f64>| n.params().entries()[idx].values.clone();
        let (t, s1, s2, s3) = (vals(&t064), vals(&s64[0]), vals(&s64[1]), vals(&s64[2]));
        for (k, &r) in vals(&rec).iter().enumerate() {
            let closed = m.powi(3) * t[k] + (1.0 - m) * (m * m * s1[k] + m * s2[k] + s3[k]);
            worst = worst.max((r - closed).abs());
        }
    }
    if worst > 1e-10 {
        return Err(format!("EMA recurrence deviates from the closed form by {worst:e}"));
    }
    Ok(format!("trainer matches the recurrence bitwise; closed form within {worst:.1e}"))
}

pub fn check_cosine_schedule() -> Check {
    let base = 3e-3;
    let total = 1000;
    if cosine_lr(base, 0, total) != base {
        return Err("first step is not at the base rate".into());
    }
    if cosine_lr(base, total, total) != 0.0 {
        return Err(format!("final rate is {}", cosine_lr(base, total, total)));
    }
    if (cosine_lr(base, total / 2, total) - base / 2.0).abs() > 1e-15 {
        return Err("midpoint is not half the base rate".into());
    }
    if (1..=total).any(|s| cosine_lr(base, s, total) > cosine_lr(base, s - 1, total)) {
        return Err("schedule is not monotone".into());
    }
    Ok("lr(0) = base, lr(T/2) = base/2, lr(T) = 0, monotone".into())
}

fn ckpt_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir.join("checkpoints"))
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

/// seg=0 trains only a fresh teacher; mat=0 trains the pretrained net on raw seg
/// labels; a teacher with an empty boundary leaves the segmentation label as target.
pub fn check_degenerate_paths(cfg: &ExperimentConfig, scratch: &Path) -> Check {
    let ctx = cfg.train_context(None);

    let mut only_mat = cfg.clone();
    only_mat.data.seg_n = Some(0);
    let dir = scratch.join("seg0");
    let out = run_pipeline(&only_mat, &dir, &Resume::Fresh, StageSelection::All).map_err(|e| e.to_string())?;
    let report = out.report.ok_or("seg=0 produced no report")?;
    if report.final_stage != "teacher_finetune" || ckpt_names(&dir) != ["teacher_finetune_3.ckpt"] {
        return Err(format!("seg=0 ran {} with checkpoints {:?}", report.final_stage, ckpt_names(&dir)));
    }
    let mats = load_matte_samples(&load_manifest(&cfg.matte_dir(), SampleKind::MatteFg).unwrap()).unwrap();
    let bgs = load_backgrounds(&cfg.backgrounds_dir()).unwrap();
    let fresh = Network::<f32>::build(&cfg.network, cfg.seed).unwrap();
    let direct = train_teacher(fresh, &mats, &bgs, &cfg.stages.teacher_finetune, &ctx).map_err(|e| e.to_string())?;
    if !bitwise_eq(&out.final_net, &direct) {
        return Err("seg=0 teacher is not the fresh-init teacher".into());
    }

    let mut only_seg = cfg.clone();
    only_seg.data.mat_n = Some(0);
    let dir = scratch.join("mat0");
    let out = run_pipeline(&only_seg, &dir, &Resume::Fresh, StageSelection::All).map_err(|e| e.to_string())?;
    let report = out.report.ok_or("mat=0 produced no report")?;
    if report.final_stage != "student_mlb" || ckpt_names(&dir) != ["seg_pretrain_3.ckpt", "student_mlb_3.ckpt"] {
        return Err(format!("mat=0 ran {} with checkpoints {:?}", report.final_stage, ckpt_names(&dir)));
    }
    let segs = seg_samples(cfg);
    let pre = pretrain_seg(Network::build(&cfg.network, cfg.seed).unwrap(), &segs, &cfg.stages.seg_pretrain, &ctx).map_err(|e| e.to_string())?;
    let (direct, _) = train_student(pre, None, &segs, &cfg.stages.student_mlb, &ctx).map_err(|e| e.to_string())?;
    if !bitwise_eq(&out.final_net, &direct) {
        return Err("mat=0 student is not the pretrained net trained on raw labels".into());
    }

    // a teacher whose boundary head never fires: the blended target is S
    let mut blind = Network::<f32>::build(&cfg.network, 1).unwrap();
    let bias = blind.params().find("head.boundary.bias").ok_or("no boundary bias")?;
    blind.params_mut().values_mut(bias).iter_mut().for_each(|v| *v = -1e4);
    let scfg = student_cfg(false, 0.9);
    let start = Network::<f32>::build(&cfg.network, 2).unwrap();
    let mut with = TrainState::new(StageKind::StudentMlb, start.clone(), Some(blind), cfg.seed);
    let mut without = TrainState::new(StageKind::StudentMlb, start, None, cfg.seed);
    student_step(&mut with, &segs, &scfg, &ctx).map_err(|e| e.to_string())?;
    student_step(&mut without, &segs, &scfg, &ctx).map_err(|e| e.to_string())?;
    if !bitwise_eq(&with.net, &without.net) {
        return Err("empty pseudo boundary did not reduce the target to S".into());
    }
    Ok("seg=0 -> fresh teacher only; mat=0 -> student on raw S; empty alpha' -> target S".into())
}

fn run_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<PathBuf> = ckpt_names(dir).iter().map(|n| dir.join("checkpoints").join(n)).collect();
    files.push(dir.join("train_log.jsonl"));
    files
        .into_iter()
        .map(|p| {
            let bytes = fs::read(&p).unwrap_or_default();
            (p.strip_prefix(dir).unwrap().to_path_buf(), bytes)
        })
        .collect()
}

pub fn check_reproducible(cfg: &ExperimentConfig, scratch: &Path) -> Check {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let run = |name: &str| -> std::result::Result<(Vec<(PathBuf, Vec<u8>)>, RunReport), String> {
        let dir = scratch.join(name);
        let out = pool
            .install(|| run_pipeline(cfg, &dir, &Resume::Fresh, StageSelection::All))
            .map_err(|e| e.to_string())?;
        Ok((run_files(&dir), out.report.ok_or("no report")?))
    };
    let (fa, ra) = run("repro_a")?;
    let (fb, rb) = run("repro_b")?;
    if fa.len() < 4 {
        return Err(format!("expected three stage checkpoints and a log, found {}", fa.len()));
    }
    if fa != fb {
        let first = fa.iter().zip(&fb).find(|(a, b)| a != b).map(|(a, _)| a.0.display().to_string());
        return Err(format!("runs differ in {}", first.unwrap_or_else(|| "file list".into())));
    }
    if ra.eval != rb.eval {
        return Err("evaluation reports differ".into());
    }
    Ok(format!("{} artefacts byte-identical across two runs", fa.len()))
}

pub fn check_pipeline_invariants(scratch: &Path) -> Check {
    let cfg = tiny_config(&scratch.join("toy"), 0);
    tiny_world(&cfg).map_err(|e| e.to_string())?;
    let a = check_teacher_freeze(&cfg)?;
    let b = check_ema_recurrence(&cfg)?;
    let c = check_cosine_schedule()?;
    let d = check_degenerate_paths(&cfg, scratch)?;
    let e = check_reproducible(&cfg, scratch)?;
    Ok(format!("{a}; {b}; {c}; {d}; {e}"))
}

// ---------------------------------------------------------------- metrics

/// Scalar per-pixel reference for the four image metrics.
pub fn metric_oracle(pred: &[f64], gt: &[f64]) -> (f64, f64, Option<f64>, Option<f64>) {
    let (mut sq, mut abs) = (0.0, 0.0);
    let (mut sq_b, mut abs_b, mut n_b) = (0.0, 0.0, 0usize);
    for i in 0..pred.len() {
        let d = pred[i] - gt[i];
        sq += d * d;
        abs += d.abs();
        if gt[i] > 0.05 && gt[i] < 0.95 {
            sq_b += d * d;
            abs_b += d.abs();
            n_b += 1;
        }
    }
    let n = pred.len() as f64;
    let mse_b = if n_b == 0 { None } else { Some(sq_b / n_b as f64 * 1000.0) };
    let sad_b = if n_b == 0 { None } else { Some(abs_b / 1000.0) };
    (sq / n * 1000.0, abs / 1000.0, mse_b, sad_b)
}

fn close_opt(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

fn fields(m: &ImageMetrics) -> [Option<f64>; 4] {
    [Some(m.mse_whole), Some(m.sad_whole), m.mse_boundary, m.sad_boundary]
}

pub fn check_metric_oracle(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (16, 16);
    let value = |rng: &mut ChaCha8Rng| match rng.gen_range(0..6) {
        0 => 0.0,
        1 => 1.0,
        2 => 0.05,
        3 => 0.95,
        _ => rng.gen::<f64>(),
    };
    let mut with_band = 0;
    for k in 0..instances {
        let gt: Vec<f64> = (0..h * w).map(|_| value(&mut rng)).collect();
        let pred: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        let m = image_metrics(&AlphaMatte::new(h, w, pred.clone()).unwrap(), &AlphaMatte::new(h, w, gt.clone()).unwrap()).map_err(|e| e.to_string())?;
        let (a, b, c, d) = metric_oracle(&pred, &gt);
        if (m.mse_whole - a).abs() > 1e-9 || (m.sad_whole - b).abs() > 1e-9 || !close_opt(m.mse_boundary, c, 1e-9) || !close_opt(m.sad_boundary, d, 1e-9) {
            return Err(format!("instance {k}: {m:?} vs oracle {:?}", (a, b, c, d)));
        }
        with_band += usize::from(c.is_some());
    }
    Ok(format!("{instances} random 16x16 instances ({with_band} with a boundary band)"))
}

pub fn check_whole_equals_boundary(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for k in 0..instances {
        let gt: Vec<f64> = (0..256).map(|_| rng.gen_range(0.051..0.949)).collect();
        let pred: Vec<f64> = (0..256).map(|_| rng.gen::<f64>()).collect();
        let m = image_metrics(&AlphaMatte::new(16, 16, pred).unwrap(), &AlphaMatte::new(16, 16, gt).unwrap()).unwrap();
        if m.mse_boundary != Some(m.mse_whole) || m.sad_boundary != Some(m.sad_whole) {
            return Err(format!("instance {k}: {m:?}"));
        }
    }
    Ok(format!("{instances} all-band instances"))
}

/// Shrinking every error toward zero never increases any metric, per image or aggregated.
pub fn check_metric_monotonicity(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut small, mut large) = (Vec::new(), Vec::new());
    for k in 0..instances {
        let gt: Vec<f64> = (0..256).map(|_| if rng.gen_bool(0.3) { f64::from(u8::from(rng.gen_bool(0.5))) } else { rng.gen() }).collect();
        let p2: Vec<f64> = (0..256).map(|_| rng.gen::<f64>()).collect();
        let p1: Vec<f64> = gt.iter().zip(&p2).map(|(&g, &p)| g + rng.gen::<f64>() * (p - g)).collect();
        let gtm = AlphaMatte::new(16, 16, gt).unwrap();
        let m1 = image_metrics(&AlphaMatte::new(16, 16, p1).unwrap(), &gtm).unwrap();
        let m2 = image_metrics(&AlphaMatte::new(16, 16, p2).unwrap(), &gtm).unwrap();
        for (a, b) in fields(&m1).into_iter().zip(fields(&m2)) {
            if let (Some(a), Some(b)) = (a, b) {
                if a > b {
                    return Err(format!("instance {k}: dominated error scored {a} > {b}"));
                }
            }
        }
        small.push(PerImageMetrics { id: k.to_string(), metrics: m1 });
        large.push(PerImageMetrics { id: k.to_string(), metrics: m2 });
    }
    let (r1, r2) = (MetricReport::aggregate("a", small, 0), MetricReport::aggregate("a", large, 0));
    let agg = |r: &MetricReport| [Some(r.mse_whole), Some(r.sad_whole), r.mse_boundary, r.sad_boundary];
    if agg(&r1).into_iter().zip(agg(&r2)).any(|(a, b)| matches!((a, b), (Some(a), Some(b)) if a > b)) {
        return Err("aggregated report is not monotone".into());
    }
    Ok(format!("{instances} dominated pairs, per image and aggregated"))
}

pub fn check_metrics() -> Check {
    let a = check_metric_oracle(100)?;
    let b = check_whole_equals_boundary(20)?;
    let c = check_metric_monotonicity(50)?;
    Ok(format!("{a}; {b}; {c}"))
}
