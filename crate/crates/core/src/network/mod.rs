//! U-Net style matting network: residual encoder without a stem max-pool,
//! a dilated spatial pyramid at the bottleneck, a bilinear-upsampling decoder
//! with skip concatenation and two sigmoid heads (matte, boundary).

mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_FORMAT_VERSION};
pub use layers::{Gradients, ParamEntry, ParamKind, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use layers::{
    relu_backward, relu_inplace, sigmoid, sigmoid_backward, upsample_bilinear, upsample_bilinear_backward,
    BatchNorm, BnCache, Conv2d,
};

/// Total spatial reduction between input and bottleneck.
pub const DOWNSAMPLE_FACTOR: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderDepth {
    /// Bottleneck blocks in a 3-4-23-3 layout (ResNet-101 shape).
    Large,
    /// Basic blocks in a 2-2-2-2 layout (ResNet-18 shape).
    Small,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub encoder_depth: EncoderDepth,
    /// 1.0 or 0.5.
    pub width_multiplier: f64,
    /// Channel count of the first encoder stage before the multiplier (64 for the ResNet presets).
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_dilations")]
    pub aspp_dilations: Vec<usize>,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_base_width() -> usize {
    64
}

fn default_dilations() -> Vec<usize> {
    vec![1, 3, 6, 9]
}

fn default_in_channels() -> usize {
    3
}

impl NetworkConfig {
    pub fn r101() -> Self {
        Self::preset(EncoderDepth::Large, 1.0)
    }

    pub fn r18() -> Self {
        Self::preset(EncoderDepth::Small, 1.0)
    }

    pub fn r18_half() -> Self {
        Self::preset(EncoderDepth::Small, 0.5)
    }

    pub fn preset(encoder_depth: EncoderDepth, width_multiplier: f64) -> Self {
        Self {
            encoder_depth,
            width_multiplier,
            base_width: default_base_width(),
            aspp_dilations: default_dilations(),
            in_channels: default_in_channels(),
        }
    }

    pub fn with_base_width(mut self, base_width: usize) -> Self {
        self.base_width = base_width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_multiplier != 1.0 && self.width_multiplier != 0.5 {
            return Err(Error::config(
                "network.width_multiplier",
                format!("unsupported preset multiplier {} (expected 1.0 or 0.5)", self.width_multiplier),
            ));
        }
        if self.encoder_depth == EncoderDepth::Large && self.width_multiplier != 1.0 {
            return Err(Error::config(
                "network.width_multiplier",
                "the large encoder preset only exists at width 1.0",
            ));
        }
        if self.in_channels != 3 {
            return Err(Error::config("network.in_channels", "only RGB input (3 channels) is supported"));
        }
        if self.base_width < 2 {
            return Err(Error::config("network.base_width", "must be at least 2"));
        }
        if self.aspp_dilations.is_empty() || self.aspp_dilations.contains(&0) {
            return Err(Error::config("network.aspp_dilations", "need at least one positive dilation"));
        }
        Ok(())
    }

    fn width(&self, factor: usize) -> usize {
        ((self.base_width * factor) as f64 * self.width_multiplier).round().max(1.0) as usize
    }

    fn blocks_per_stage(&self) -> [usize; 4] {
        match self.encoder_depth {
            EncoderDepth::Large => [3, 4, 23, 3],
            EncoderDepth::Small => [2, 2, 2, 2],
        }
    }

    fn expansion(&self) -> usize {
        match self.encoder_depth {
            EncoderDepth::Large => 4,
            EncoderDepth::Small => 1,
        }
    }

    /// Output channels of the four decoder stages, coarse to fine.
    pub fn decoder_widths(&self) -> [usize; 4] {
        [self.width(4), self.width(2), self.width(1), self.width(1)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, dilation: usize, bias: bool) -> Conv2d {
        let fan_in = (cin * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = cout * cin * kernel * kernel;
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::lit(z * std)
            })
            .collect();
        let weight = self.store.push(
            format!("{name}.weight"),
            vec![cout, cin, kernel, kernel],
            ParamKind::Weight,
            values,
        );
        let bias = bias.then(|| {
            self.store
                .push(format!("{name}.bias"), vec![cout], ParamKind::Weight, vec![T::zero(); cout])
        });
        Conv2d {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BatchNorm {
        let mut push = |suffix: &str, kind, v: f64| {
            self.store
                .push(format!("{name}.{suffix}"), vec![c], kind, vec![T::lit(v); c])
        };
        BatchNorm {
            gamma: push("gamma", ParamKind::Weight, 1.0),
            beta: push("beta", ParamKind::Weight, 0.0),
            running_mean: push("running_mean", ParamKind::Buffer, 0.0),
            running_var: push("running_var", ParamKind::Buffer, 1.0),
            channels: c,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, dilation: usize, relu: bool) -> ConvBn {
        ConvBn {
            conv: self.conv(&format!("{name}.conv"), cin, cout, kernel, stride, dilation, false),
            bn: self.bn(&format!("{name}.bn"), cout),
            relu,
        }
    }
}

enum Ctx<'a, T> {
    Train(&'a mut ParamStore<T>),
    Eval(&'a ParamStore<T>),
    BatchStats(&'a ParamStore<T>),
}

impl<T: Real> Ctx<'_, T> {
    fn store(&self) -> &ParamStore<T> {
        match self {
            Ctx::Train(s) => s,
            Ctx::Eval(s) | Ctx::BatchStats(s) => s,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
    relu: bool,
}

struct ConvBnTape<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    output: Option<Tensor<T>>,
}

impl ConvBn {
    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> (Tensor<T>, Option<ConvBnTape<T>>) {
        let z = self.conv.forward(ctx.store(), x);
        let (mut y, cache) = match ctx {
            Ctx::Train(store) => {
                let (y, c) = self.bn.forward_train(store, &z);
                (y, Some(c))
            }
            Ctx::Eval(store) => (self.bn.forward_eval(store, &z), None),
            Ctx::BatchStats(store) => (self.bn.forward_batch_stats(store, &z), None),
        };
        if self.relu {
            relu_inplace(&mut y);
        }
        let tape = cache.map(|bn| ConvBnTape {
            input: x.clone(),
            bn,
            output: self.relu.then(|| y.clone()),
        });
        (y, tape)
    }

    fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &ConvBnTape<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let dz = match &tape.output {
            Some(out) => relu_backward(out, dy),
            None => dy.clone(),
        };
        let dconv = self.bn.backward(store, &tape.bn, &dz, grads);
        self.conv.backward(store, &tape.input, &dconv, grads, need_dx)
    }
}

/// Residual block: `relu(body(x) + shortcut(x))`. The last body unit has no ReLU.
#[derive(Clone, Debug)]
struct ResBlock {
    body: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

struct ResBlockTape<T> {
    body: Vec<ConvBnTape<T>>,
    shortcut: Option<ConvBnTape<T>>,
    output: Tensor<T>,
}

impl ResBlock {
    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> (Tensor<T>, Option<ResBlockTape<T>>) {
        let mut tapes = Vec::new();
        let mut h = x.clone();
        for unit in &self.body {
            let (next, t) = unit.forward(ctx, &h);
            tapes.extend(t);
            h = next;
        }
        let (short, short_tape) = match &self.shortcut {
            Some(unit) => unit.forward(ctx, x),
            None => (x.clone(), None),
        };
        h.add_assign(&short);
        relu_inplace(&mut h);
        let tape = (!tapes.is_empty()).then(|| ResBlockTape {
            body: tapes,
            shortcut: short_tape,
            output: h.clone(),
        });
        (h, tape)
    }

    fn backward<T: Real>(&self, store: &ParamStore<T>, tape: &ResBlockTape<T>, dy: &Tensor<T>, grads: &mut Gradients<T>) -> Tensor<T> {
        let d = relu_backward(&tape.output, dy);
        let mut dh = d.clone();
        for (unit, t) in self.body.iter().zip(&tape.body).rev() {
            dh = unit.backward(store, t, &dh, grads, true).expect("dx requested");
        }
        let dshort = match (&self.shortcut, &tape.shortcut) {
            (Some(unit), Some(t)) => unit.backward(store, t, &d, grads, true).expect("dx requested"),
            _ => d,
        };
        dh.add_assign(&dshort);
        dh
    }
}

#[derive(Clone, Debug)]
struct Aspp {
    branches: Vec<ConvBn>,
    fuse: ConvBn,
}

struct AsppTape<T> {
    branches: Vec<ConvBnTape<T>>,
    fuse: ConvBnTape<T>,
    branch_channels: Vec<usize>,
}

impl Aspp {
    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> (Tensor<T>, Option<AsppTape<T>>) {
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut tapes = Vec::new();
        for b in &self.branches {
            let (y, t) = b.forward(ctx, x);
            outs.push(y);
            tapes.extend(t);
        }
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        let cat = Tensor::concat_channels(&refs);
        let (y, fuse_tape) = self.fuse.forward(ctx, &cat);
        let tape = fuse_tape.map(|fuse| AsppTape {
            branches: tapes,
            fuse,
            branch_channels: outs.iter().map(|o| o.channels()).collect(),
        });
        (y, tape)
    }

    fn backward<T: Real>(&self, store: &ParamStore<T>, tape: &AsppTape<T>, dy: &Tensor<T>, grads: &mut Gradients<T>) -> Tensor<T> {
        let dcat = self.fuse.backward(store, &tape.fuse, dy, grads, true).expect("dx requested");
        let parts = dcat.split_channels(&tape.branch_channels);
        let mut dx: Option<Tensor<T>> = None;
        for ((b, t), dp) in self.branches.iter().zip(&tape.branches).zip(&parts) {
            let g = b.backward(store, t, dp, grads, true).expect("dx requested");
            match &mut dx {
                Some(acc) => acc.add_assign(&g),
                None => dx = Some(g),
            }
        }
        dx.expect("at least one branch")
    }
}

/// Upsample x2, concatenate the skip, then two conv units.
#[derive(Clone, Debug)]
struct DecoderStage {
    first: ConvBn,
    second: ConvBn,
}

struct DecoderTape<T> {
    first: ConvBnTape<T>,
    second: ConvBnTape<T>,
    prev_shape: [usize; 4],
    skip_channels: usize,
}

impl DecoderStage {
    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, prev: &Tensor<T>, skip: &Tensor<T>) -> (Tensor<T>, Option<DecoderTape<T>>) {
        let up = upsample_bilinear(prev, skip.height(), skip.width());
        let cat = Tensor::concat_channels(&[&up, skip]);
        let (h, t1) = self.first.forward(ctx, &cat);
        let (y, t2) = self.second.forward(ctx, &h);
        let tape = t1.zip(t2).map(|(first, second)| DecoderTape {
            first,
            second,
            prev_shape: prev.shape(),
            skip_channels: skip.channels(),
        });
        (y, tape)
    }

    /// Returns gradients for (previous decoder output, skip input).
    fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &DecoderTape<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let dh = self.second.backward(store, &tape.second, dy, grads, true).expect("dx requested");
        let dcat = self.first.backward(store, &tape.first, &dh, grads, true).expect("dx requested");
        let [_, pc, ph, pw] = tape.prev_shape;
        let mut parts = dcat.split_channels(&[pc, tape.skip_channels]);
        let dskip = parts.pop().expect("two parts");
        let dup = parts.pop().expect("two parts");
        (upsample_bilinear_backward(&dup, ph, pw), dskip)
    }
}

#[derive(Clone, Debug)]
struct Arch {
    stem: ConvBn,
    stages: Vec<Vec<ResBlock>>,
    aspp: Aspp,
    decoder: Vec<DecoderStage>,
    matte_head: Conv2d,
    boundary_head: Conv2d,
}

impl Arch {
    fn build<T: Real>(cfg: &NetworkConfig, b: &mut Builder<'_, T>) -> Self {
        let stem_c = cfg.width(1);
        let stem = b.conv_bn("stem", cfg.in_channels, stem_c, 7, 2, 1, true);
        let mut stages = Vec::new();
        let mut cin = stem_c;
        let exp = cfg.expansion();
        let mut stage_out = Vec::new();
        for (si, &nblocks) in cfg.blocks_per_stage().iter().enumerate() {
            let mid = cfg.width(1 << si);
            let cout = mid * exp;
            let mut blocks = Vec::new();
            for bi in 0..nblocks {
                let stride = if bi == 0 && si > 0 { 2 } else { 1 };
                let name = format!("encoder.stage{}.block{bi}", si + 1);
                let body = match cfg.encoder_depth {
                    EncoderDepth::Small => vec![
                        b.conv_bn(&format!("{name}.conv1"), cin, mid, 3, stride, 1, true),
                        b.conv_bn(&format!("{name}.conv2"), mid, cout, 3, 1, 1, false),
                    ],
                    EncoderDepth::Large => vec![
                        b.conv_bn(&format!("{name}.conv1"), cin, mid, 1, 1, 1, true),
                        b.conv_bn(&format!("{name}.conv2"), mid, mid, 3, stride, 1, true),
                        b.conv_bn(&format!("{name}.conv3"), mid, cout, 1, 1, 1, false),
                    ],
                };
                let shortcut = (stride != 1 || cin != cout)
                    .then(|| b.conv_bn(&format!("{name}.downsample"), cin, cout, 1, stride, 1, false));
                blocks.push(ResBlock { body, shortcut });
                cin = cout;
            }
            stages.push(blocks);
            stage_out.push(cout);
        }
        let aspp_c = cfg.width(4);
        let branches = cfg
            .aspp_dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| b.conv_bn(&format!("aspp.branch{i}"), cin, aspp_c, 3, 1, d, true))
            .collect::<Vec<_>>();
        let fuse = b.conv_bn("aspp.fuse", aspp_c * branches.len(), aspp_c, 1, 1, 1, true);
        let aspp = Aspp { branches, fuse };

        let skips = [stage_out[2], stage_out[1], stage_out[0], cfg.in_channels];
        let mut prev = aspp_c;
        let mut decoder = Vec::new();
        for (i, (&skip_c, &out_c)) in skips.iter().zip(cfg.decoder_widths().iter()).enumerate() {
            let name = format!("decoder.up{}", 4 - i);
            decoder.push(DecoderStage {
                first: b.conv_bn(&format!("{name}.conv1"), prev + skip_c, out_c, 3, 1, 1, true),
                second: b.conv_bn(&format!("{name}.conv2"), out_c, out_c, 3, 1, 1, true),
            });
            prev = out_c;
        }
        let matte_head = b.conv("head.matte", prev, 1, 3, 1, 1, true);
        let boundary_head = b.conv("head.boundary", prev, 1, 3, 1, 1, true);
        Arch {
            stem,
            stages,
            aspp,
            decoder,
            matte_head,
            boundary_head,
        }
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Option<Tape<T>>) {
        let (mut h, stem_tape) = self.stem.forward(ctx, x);
        let mut stage_tapes = Vec::new();
        let mut skips = Vec::new();
        for stage in &self.stages {
            let mut tapes = Vec::new();
            for block in stage {
                let (next, t) = block.forward(ctx, &h);
                tapes.extend(t);
                h = next;
            }
            stage_tapes.push(tapes);
            skips.push(h.clone());
        }
        let (mut d, aspp_tape) = self.aspp.forward(ctx, &h);
        let skip_inputs = [&skips[2], &skips[1], &skips[0], x];
        let mut dec_tapes = Vec::new();
        for (stage, skip) in self.decoder.iter().zip(skip_inputs) {
            let (next, t) = stage.forward(ctx, &d, skip);
            dec_tapes.extend(t);
            d = next;
        }
        let matte = sigmoid(&self.matte_head.forward(ctx.store(), &d));
        let boundary = sigmoid(&self.boundary_head.forward(ctx.store(), &d));
        let tape = match (stem_tape, aspp_tape) {
            (Some(stem), Some(aspp)) => Some(Tape {
                stem,
                stages: stage_tapes,
                aspp,
                decoder: dec_tapes,
                head_input: d,
                matte: matte.clone(),
                boundary: boundary.clone(),
            }),
            _ => None,
        };
        (matte, boundary, tape)
    }

    fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &Tape<T>,
        d_matte: &Tensor<T>,
        d_boundary: Option<&Tensor<T>>,
        grads: &mut Gradients<T>,
    ) {
        let dl = sigmoid_backward(&tape.matte, d_matte);
        let mut dd = self
            .matte_head
            .backward(store, &tape.head_input, &dl, grads, true)
            .expect("dx requested");
        if let Some(db) = d_boundary {
            let dl = sigmoid_backward(&tape.boundary, db);
            let g = self
                .boundary_head
                .backward(store, &tape.head_input, &dl, grads, true)
                .expect("dx requested");
            dd.add_assign(&g);
        }
        // decoder, finest stage first; its skip is the raw input and needs no gradient
        let mut skip_grads = Vec::new();
        for (stage, t) in self.decoder.iter().zip(&tape.decoder).rev() {
            let (dprev, dskip) = stage.backward(store, t, &dd, grads);
            skip_grads.push(dskip);
            dd = dprev;
        }
        // skip_grads: [input, stage1, stage2, stage3]
        let mut dh = self.aspp.backward(store, &tape.aspp, &dd, grads);
        for (si, (stage, tapes)) in self.stages.iter().zip(&tape.stages).enumerate().rev() {
            if si < 3 {
                dh.add_assign(&skip_grads[si + 1]);
            }
            for (block, t) in stage.iter().zip(tapes).rev() {
                dh = block.backward(store, t, &dh, grads);
            }
        }
        self.stem.backward(store, &tape.stem, &dh, grads, false);
    }
}

/// Activations recorded by a train-mode forward pass.
pub struct Tape<T> {
    stem: ConvBnTape<T>,
    stages: Vec<Vec<ResBlockTape<T>>>,
    aspp: AsppTape<T>,
    decoder: Vec<DecoderTape<T>>,
    head_input: Tensor<T>,
    matte: Tensor<T>,
    boundary: Tensor<T>,
}

/// Outputs of both heads, each `[n, 1, h, w]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub matte: Tensor<T>,
    pub boundary: Tensor<T>,
}

/// A train-mode forward pass whose tape can be replayed backwards.
pub struct TrainPass<T> {
    pub prediction: Prediction<T>,
    tape: Tape<T>,
    input_hw: (usize, usize),
}

/// Network parameters (flat, named, ordered), their configuration and the BN mode.
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    params: ParamStore<T>,
    mode: Mode,
    arch: Arch,
}

impl<T: Real> Network<T> {
    pub fn build(config: &NetworkConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let arch = {
            let mut b = Builder {
                store: &mut params,
                rng: ChaCha8Rng::seed_from_u64(init_seed),
            };
            Arch::build(config, &mut b)
        };
        Ok(Self {
            config: config.clone(),
            params,
            mode: Mode::Train,
            arch,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn parameter_names(&self) -> Vec<&str> {
        self.params.entries().iter().map(|e| e.name.as_str()).collect()
    }

    /// Deep copy of parameters, buffers, configuration and mode.
    pub fn clone_parameters(&self) -> Self {
        self.clone()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        if x.channels() != self.config.in_channels {
            return Err(Error::invalid(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels,
                x.channels()
            )));
        }
        if x.batch() == 0 || x.height() == 0 || x.width() == 0 {
            return Err(Error::invalid("empty input batch"));
        }
        let pad = |v: usize| v.div_ceil(DOWNSAMPLE_FACTOR) * DOWNSAMPLE_FACTOR;
        Ok((pad(x.height()), pad(x.width())))
    }

    /// Inference according to the current mode. Train mode uses batch statistics
    /// but leaves running buffers untouched.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Prediction<T>> {
        self.forward_with_mode(x, self.mode)
    }

    /// Like [`Network::forward`] but with an explicit BN mode.
    pub fn forward_with_mode(&self, x: &Tensor<T>, mode: Mode) -> Result<Prediction<T>> {
        let (ph, pw) = self.check_input(x)?;
        let padded = x.reflect_pad(ph, pw);
        let mut ctx = match mode {
            Mode::Eval => Ctx::Eval(&self.params),
            Mode::Train => Ctx::BatchStats(&self.params),
        };
        let (matte, boundary, _) = self.arch.forward(&mut ctx, &padded);
        Ok(Prediction {
            matte: matte.crop(x.height(), x.width()),
            boundary: boundary.crop(x.height(), x.width()),
        })
    }

    /// Train-mode forward pass that records a tape and updates BN running statistics.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<TrainPass<T>> {
        let (ph, pw) = self.check_input(x)?;
        let padded = x.reflect_pad(ph, pw);
        let mut ctx = Ctx::Train(&mut self.params);
        let (matte, boundary, tape) = self.arch.forward(&mut ctx, &padded);
        let tape = tape.expect("train context records a tape");
        Ok(TrainPass {
            prediction: Prediction {
                matte: matte.crop(x.height(), x.width()),
                boundary: boundary.crop(x.height(), x.width()),
            },
            tape,
            input_hw: (x.height(), x.width()),
        })
    }

    /// Parameter gradients given upstream gradients for the head outputs.
    /// `d_boundary = None` leaves the boundary head out of the graph.
    pub fn backward(&self, pass: &TrainPass<T>, d_matte: &Tensor<T>, d_boundary: Option<&Tensor<T>>) -> Result<Gradients<T>> {
        let expect = pass.prediction.matte.shape();
        if d_matte.shape() != expect || d_boundary.is_some_and(|d| d.shape() != expect) {
            return Err(Error::invalid("output gradient shape does not match the forward pass"));
        }
        let (ph, pw) = (pass.tape.matte.height(), pass.tape.matte.width());
        debug_assert_eq!(pass.input_hw, (d_matte.height(), d_matte.width()));
        let dm = d_matte.zero_extend(ph, pw);
        let db = d_boundary.map(|d| d.zero_extend(ph, pw));
        let mut grads = Gradients::zeros_like(&self.params);
        self.arch
            .backward(&self.params, &pass.tape, &dm, db.as_ref(), &mut grads);
        Ok(grads)
    }

    /// `self <- momentum * self + (1 - momentum) * other` over weights and running buffers.
    pub fn ema_update(&mut self, other: &Self, momentum: f64) -> Result<()> {
        if self.config != other.config {
            return Err(Error::config(
                "trainer.use_ema",
                "EMA requires teacher and student to share one network configuration",
            ));
        }
        let m = T::lit(momentum);
        let rest = T::one() - m;
        for (dst, src) in self.params.entries_mut().iter_mut().zip(other.params.entries()) {
            for (d, &s) in dst.values.iter_mut().zip(&src.values) {
                *d = m * *d + rest * s;
            }
        }
        Ok(())
    }

    /// Copies entries with a matching name prefix from externally supplied weights
    /// (e.g. a pretrained encoder). Returns how many entries were copied.
    pub fn import_parameters<'a>(
        &mut self,
        source: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [T])>,
        prefixes: &[&str],
    ) -> Result<usize> {
        let mut copied = 0;
        for (name, shape, values) in source {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let Some(idx) = self.params.find(name) else {
                continue;
            };
            let entry = &mut self.params.entries_mut()[idx];
            if entry.shape != shape {
                return Err(Error::invalid(format!(
                    "shape mismatch importing {name}: {:?} vs {:?}",
                    entry.shape, shape
                )));
            }
            entry.values.copy_from_slice(values);
            copied += 1;
        }
        Ok(copied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig::r18_half().with_base_width(4)
    }

    #[test]
    fn forward_shapes_and_range() {
        let net = Network::<f32>::build(&tiny(), 1).unwrap();
        let x = Tensor::from_vec([2, 3, 20, 36], (0..2 * 3 * 20 * 36).map(|i| (i % 17) as f32 / 16.0).collect());
        let p = net.forward(&x).unwrap();
        assert_eq!(p.matte.shape(), [2, 1, 20, 36]);
        assert_eq!(p.boundary.shape(), [2, 1, 20, 36]);
        assert!(p.matte.data().iter().chain(p.boundary.data()).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let net = Network::<f32>::build(&tiny(), 1).unwrap();
        assert!(net.forward(&Tensor::zeros([1, 1, 16, 16])).is_err());
    }

    #[test]
    fn unsupported_presets_rejected() {
        let mut cfg = tiny();
        cfg.width_multiplier = 0.75;
        assert!(Network::<f32>::build(&cfg, 0).is_err());
        let mut cfg = NetworkConfig::r101();
        cfg.width_multiplier = 0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ema_requires_same_config() {
        let mut a = Network::<f32>::build(&tiny(), 1).unwrap();
        let b = Network::<f32>::build(&tiny().with_base_width(8), 1).unwrap();
        assert!(a.ema_update(&b, 0.9).is_err());
    }

    #[test]
    fn clone_is_deep() {
        let src = Network::<f32>::build(&tiny(), 3).unwrap();
        let snapshot = src.clone_parameters();
        let mut src2 = src.clone_parameters();
        src2.params_mut().values_mut(0)[0] += 1.0;
        assert_eq!(snapshot.params(), src.params());
        assert_ne!(snapshot.params(), src2.params());
    }

    #[test]
    fn stem_has_no_pooling_and_factor_is_16() {
        let net = Network::<f32>::build(&tiny(), 0).unwrap();
        assert_eq!(net.arch.stem.conv.stride, 2);
        let strides: Vec<usize> = net
            .arch
            .stages
            .iter()
            .map(|s| s[0].body.iter().map(|u| u.conv.stride).product())
            .collect();
        assert_eq!(strides, vec![1, 2, 2, 2]);
        let dil: Vec<usize> = net.arch.aspp.branches.iter().map(|b| b.conv.dilation).collect();
        assert_eq!(dil, vec![1, 3, 6, 9]);
    }

    #[test]
    fn import_copies_matching_prefix() {
        let src = Network::<f32>::build(&tiny(), 1).unwrap();
        let mut dst = Network::<f32>::build(&tiny(), 2).unwrap();
        let entries = src.params().entries();
        let n = dst
            .import_parameters(
                entries.iter().map(|e| (e.name.as_str(), e.shape.as_slice(), e.values.as_slice())),
                &["stem.", "encoder."],
            )
            .unwrap();
        assert!(n > 0);
        let i = dst.params().find("stem.conv.weight").unwrap();
        assert_eq!(dst.params().values(i), src.params().values(i));
        let j = dst.params().find("head.matte.weight").unwrap();
        assert_ne!(dst.params().values(j), src.params().values(j));
    }
}
