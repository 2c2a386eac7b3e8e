//! U-Net and mU-Net layer graphs.
//!
//! Both variants share the encoder, decoder and head. Each encoder stage is
//! a residual double convolution (conv → batch norm → PReLU → dropout,
//! twice, plus an identity or 1×1 projection shortcut). Every stage but the
//! deepest is pooled and feeds the decoder through a skip connection:
//!
//! * `unet`: the encoder features are concatenated at the decoder as is.
//! * `munet`: the pooled features go through a residual path, a 3×3
//!   stride-2 transposed convolution followed by PReLU, giving `c_u` at
//!   encoder resolution. The skip carries `c − c_u` through one extra 3×3
//!   convolution unit that keeps the channel count, and that output is what
//!   the decoder concatenates.

mod config;
mod manifest;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

pub use config::{NetworkConfig, Variant, WidthMultiplier};
pub use manifest::{LayerInfo, Manifest};

use crate::autodiff::{BnMode, BnState, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::params::{ParamId, ParamStore, Role};
use crate::tensor::Tensor;

pub const INIT_ALPHA: f64 = 0.25;

/// How a forward pass treats batch norm and dropout.
pub enum Mode<'r> {
    Eval,
    Train { dropout_keep: f64, bn_decay: f64, rng: &'r mut ChaCha8Rng },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

#[derive(Clone, Copy, Debug)]
struct BnSlot {
    scale: ParamId,
    shift: ParamId,
    state: usize,
}

/// 3×3 same conv → batch norm → PReLU → dropout.
#[derive(Clone, Copy, Debug)]
struct ConvUnit {
    kernel: ParamId,
    bias: ParamId,
    bn: BnSlot,
    alpha: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct DoubleConv {
    first: ConvUnit,
    second: ConvUnit,
    projection: Option<(ParamId, ParamId)>,
}

/// Object-dependent up-sampling: stride-2 transposed conv + PReLU.
#[derive(Clone, Copy, Debug)]
pub struct ResidualPath {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub alpha: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct SkipStage {
    residual: ResidualPath,
    conv: ConvUnit,
}

#[derive(Clone, Copy, Debug)]
struct DecoderStage {
    up_kernel: ParamId,
    up_bias: ParamId,
    block: DoubleConv,
}

/// Result of a forward pass: the class score maps plus every named
/// intermediate activation.
pub struct ForwardOutput {
    pub output: Var,
    pub taps: BTreeMap<String, Var>,
}

#[derive(Clone, Debug)]
pub struct NetworkGraph {
    cfg: NetworkConfig,
    params: ParamStore,
    bn: Vec<BnState>,
    encoders: Vec<DoubleConv>,
    skips: Vec<Option<SkipStage>>,
    decoders: Vec<DecoderStage>,
    head: (ParamId, ParamId),
    layers: Vec<LayerInfo>,
    bypass_residual: bool,
}

struct Builder {
    params: ParamStore,
    bn: Vec<BnState>,
    layers: Vec<LayerInfo>,
}

impl Builder {
    fn param(&mut self, name: String, role: Role, shape: &[usize]) -> ParamId {
        let value = match role {
            Role::PreluAlpha => Tensor::full(shape, INIT_ALPHA),
            Role::BnScale => Tensor::ones(shape),
            _ => Tensor::zeros(shape),
        };
        self.params.add(name, role, value)
    }

    fn layer(&mut self, name: &str, kind: &'static str, kernel: Vec<usize>, stride: usize, out: [usize; 3], ids: &[ParamId]) {
        let params = ids.iter().map(|&id| self.params.value(id).len()).sum();
        self.layers.push(LayerInfo { name: name.to_string(), kind, kernel, stride, out, params });
    }

    fn conv_unit(&mut self, name: &str, cin: usize, cout: usize, extent: usize) -> ConvUnit {
        let kernel = self.param(format!("{name}.kernel"), Role::ConvKernel, &[cout, cin, 3, 3]);
        let bias = self.param(format!("{name}.bias"), Role::Bias, &[cout]);
        let scale = self.param(format!("{name}.bn.scale"), Role::BnScale, &[cout]);
        let shift = self.param(format!("{name}.bn.shift"), Role::BnShift, &[cout]);
        let alpha = self.param(format!("{name}.alpha"), Role::PreluAlpha, &[cout]);
        self.bn.push(BnState::new(cout));
        let out = [cout, extent, extent];
        self.layer(name, "conv2d", vec![cout, cin, 3, 3], 1, out, &[kernel, bias]);
        self.layer(&format!("{name}.bn"), "batchnorm", vec![], 0, out, &[scale, shift]);
        self.layer(&format!("{name}.act"), "prelu", vec![], 0, out, &[alpha]);
        ConvUnit { kernel, bias, bn: BnSlot { scale, shift, state: self.bn.len() - 1 }, alpha }
    }

    fn double_conv(&mut self, name: &str, cin: usize, cout: usize, extent: usize) -> DoubleConv {
        let first = self.conv_unit(&format!("{name}.conv1"), cin, cout, extent);
        let second = self.conv_unit(&format!("{name}.conv2"), cout, cout, extent);
        let projection = (cin != cout).then(|| {
            let k = self.param(format!("{name}.proj.kernel"), Role::ConvKernel, &[cout, cin, 1, 1]);
            let b = self.param(format!("{name}.proj.bias"), Role::Bias, &[cout]);
            self.layer(&format!("{name}.proj"), "conv2d", vec![cout, cin, 1, 1], 1, [cout, extent, extent], &[k, b]);
            (k, b)
        });
        self.layer(&format!("{name}.residual_add"), "add", vec![], 0, [cout, extent, extent], &[]);
        DoubleConv { first, second, projection }
    }
}

impl NetworkGraph {
    /// Baseline U-Net: skip connections are plain concatenations.
    pub fn build_unet(cfg: &NetworkConfig) -> Result<Self> {
        Self::build(NetworkConfig { variant: Variant::Unet, ..cfg.clone() })
    }

    /// mU-Net: residual path and skip convolution at every pooled stage.
    pub fn build_munet(cfg: &NetworkConfig) -> Result<Self> {
        Self::build(NetworkConfig { variant: Variant::Munet, ..cfg.clone() })
    }

    pub fn build(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { params: ParamStore::new(), bn: Vec::new(), layers: Vec::new() };
        let stages = cfg.stages;
        let mut encoders = Vec::with_capacity(stages);
        let mut skips = Vec::with_capacity(stages - 1);
        let mut cin = cfg.in_channels;
        for s in 1..=stages {
            let f = cfg.features(s);
            let e = cfg.extent(s);
            encoders.push(b.double_conv(&format!("enc{s}"), cin, f, e));
            if s < stages {
                b.layer(&format!("enc{s}.pool"), "maxpool2x2", vec![2, 2], 2, [f, e / 2, e / 2], &[]);
                skips.push(match cfg.variant {
                    Variant::Unet => None,
                    Variant::Munet => {
                        let name = format!("skip{s}.residual");
                        let kernel = b.param(format!("{name}.kernel"), Role::ConvKernel, &[f, f, 3, 3]);
                        let bias = b.param(format!("{name}.bias"), Role::Bias, &[f]);
                        let alpha = b.param(format!("{name}.alpha"), Role::PreluAlpha, &[f]);
                        b.layer(&name, "tconv2d", vec![f, f, 3, 3], 2, [f, e, e], &[kernel, bias]);
                        b.layer(&format!("{name}.act"), "prelu", vec![], 0, [f, e, e], &[alpha]);
                        b.layer(&format!("skip{s}.subtract"), "sub", vec![], 0, [f, e, e], &[]);
                        let conv = b.conv_unit(&format!("skip{s}.conv"), f, f, e);
                        Some(SkipStage { residual: ResidualPath { kernel, bias, alpha }, conv })
                    }
                });
            }
            cin = f;
        }
        let mut decoders = Vec::with_capacity(stages - 1);
        for s in (1..stages).rev() {
            let f = cfg.features(s);
            let e = cfg.extent(s);
            let name = format!("dec{s}");
            let up_kernel = b.param(format!("{name}.up.kernel"), Role::ConvKernel, &[cfg.features(s + 1), f, 2, 2]);
            let up_bias = b.param(format!("{name}.up.bias"), Role::Bias, &[f]);
            b.layer(&format!("{name}.up"), "tconv2d", vec![cfg.features(s + 1), f, 2, 2], 2, [f, e, e], &[up_kernel, up_bias]);
            b.layer(&format!("{name}.concat"), "concat", vec![], 0, [2 * f, e, e], &[]);
            let block = b.double_conv(&name, 2 * f, f, e);
            decoders.push(DecoderStage { up_kernel, up_bias, block });
        }
        decoders.reverse();
        let f1 = cfg.features(1);
        let hk = b.param("head.kernel".into(), Role::ConvKernel, &[cfg.out_classes, f1, 1, 1]);
        let hb = b.param("head.bias".into(), Role::Bias, &[cfg.out_classes]);
        b.layer("head", "conv2d", vec![cfg.out_classes, f1, 1, 1], 1, [cfg.out_classes, cfg.input_extent, cfg.input_extent], &[hk, hb]);
        Ok(NetworkGraph {
            cfg,
            params: b.params,
            bn: b.bn,
            encoders,
            skips,
            decoders,
            head: (hk, hb),
            layers: b.layers,
            bypass_residual: false,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BnState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState] {
        &mut self.bn
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::new(&self.cfg, &self.layers)
    }

    pub fn topology_hash(&self) -> u64 {
        self.manifest().topology_hash()
    }

    /// Residual-path parameters of stage `s`, if this is an mU-Net and `s`
    /// is a pooled stage.
    pub fn residual_path(&self, stage: usize) -> Option<ResidualPath> {
        self.skips.get(stage.checked_sub(1)?).copied().flatten().map(|s| s.residual)
    }

    /// Run the skip connection as if `c_u` were zero everywhere. With the
    /// residual path bypassed an mU-Net computes a U-Net whose skips carry
    /// one extra convolution.
    pub fn set_residual_bypass(&mut self, bypass: bool) {
        self.bypass_residual = bypass;
    }

    /// Zero every residual-path kernel and bias so that `c_u = PReLU(0) = 0`.
    pub fn zero_residual_paths(&mut self) {
        for s in 1..self.cfg.stages {
            if let Some(rp) = self.residual_path(s) {
                for id in [rp.kernel, rp.bias] {
                    self.params.get_mut(id).value.data_mut().fill(0.0);
                }
            }
        }
    }

    /// Configure the residual path of `stage` as exact nearest-neighbour
    /// up-sampling of the pooled features (zero bias).
    pub fn set_residual_nearest_neighbor(&mut self, stage: usize) -> Result<()> {
        let rp = self
            .residual_path(stage)
            .ok_or_else(|| Error::InvalidArgument(format!("stage {stage} has no residual path")))?;
        let kernel = nearest_neighbor_kernel(self.cfg.features(stage));
        self.params.set_value(rp.kernel, kernel)?;
        self.params.get_mut(rp.bias).value.data_mut().fill(0.0);
        Ok(())
    }

    /// `c − PReLU(tconv(maxpool(c)))` using the residual path of `stage`:
    /// the tensor entering the skip convolution.
    pub fn residual_filter(&self, tape: &mut Tape, stage: usize, c: Var) -> Result<Var> {
        let rp = self
            .residual_path(stage)
            .ok_or_else(|| Error::InvalidArgument(format!("stage {stage} has no residual path")))?;
        let pooled = tape.maxpool2x2(c)?;
        let cu = self.apply_residual(tape, rp, pooled)?;
        tape.sub(c, cu)
    }

    fn apply_residual(&self, tape: &mut Tape, rp: ResidualPath, pooled: Var) -> Result<Var> {
        let k = tape.param(&self.params, rp.kernel);
        let b = tape.param(&self.params, rp.bias);
        let a = tape.param(&self.params, rp.alpha);
        let up = tape.tconv2d(pooled, k, b, 2)?;
        tape.prelu(up, a)
    }

    fn apply_unit(&mut self, tape: &mut Tape, u: ConvUnit, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let k = tape.param(&self.params, u.kernel);
        let b = tape.param(&self.params, u.bias);
        let y = tape.conv2d(x, k, b, 1, Padding::Same)?;
        let scale = tape.param(&self.params, u.bn.scale);
        let shift = tape.param(&self.params, u.bn.shift);
        let state = &mut self.bn[u.bn.state];
        let y = match mode {
            Mode::Eval => tape.batch_norm(y, scale, shift, BnMode::Eval(state))?,
            Mode::Train { bn_decay, .. } => {
                tape.batch_norm(y, scale, shift, BnMode::Train { state, decay: *bn_decay })?
            }
        };
        let a = tape.param(&self.params, u.alpha);
        let y = tape.prelu(y, a)?;
        match mode {
            Mode::Eval => Ok(y),
            Mode::Train { dropout_keep, rng, .. } => tape.dropout(y, *dropout_keep, &mut **rng),
        }
    }

    fn apply_double(&mut self, tape: &mut Tape, d: DoubleConv, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let y = self.apply_unit(tape, d.first, x, mode)?;
        let y = self.apply_unit(tape, d.second, y, mode)?;
        let shortcut = match d.projection {
            Some((k, b)) => {
                let k = tape.param(&self.params, k);
                let b = tape.param(&self.params, b);
                tape.conv2d(x, k, b, 1, Padding::Same)?
            }
            None => x,
        };
        tape.add(y, shortcut)
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let e = self.cfg.input_extent;
        if c != self.cfg.in_channels || h != e || w != e {
            return Err(Error::Shape(format!(
                "network expects (N, {}, {e}, {e}) input, got {:?}",
                self.cfg.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Record a full forward pass on `tape`. Training mode updates the
    /// batch-norm running moments.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: &mut Mode<'_>) -> Result<ForwardOutput> {
        self.check_input(tape.value(x))?;
        let stages = self.cfg.stages;
        let mut taps = BTreeMap::new();
        let mut skip_out = Vec::with_capacity(stages - 1);
        let mut h = x;
        for s in 1..=stages {
            let enc = self.encoders[s - 1];
            let c = self.apply_double(tape, enc, h, mode)?;
            taps.insert(format!("stage{s}.encoder"), c);
            if s == stages {
                h = c;
                break;
            }
            taps.insert(format!("stage{s}.fm_b"), c);
            let pooled = tape.maxpool2x2(c)?;
            taps.insert(format!("stage{s}.pooled"), pooled);
            let skip = match self.skips[s - 1] {
                None => {
                    taps.insert(format!("stage{s}.fm_a"), c);
                    c
                }
                Some(sk) => {
                    let fm_a = if self.bypass_residual {
                        c
                    } else {
                        let cu = self.apply_residual(tape, sk.residual, pooled)?;
                        taps.insert(format!("stage{s}.residual"), cu);
                        tape.sub(c, cu)?
                    };
                    taps.insert(format!("stage{s}.fm_a"), fm_a);
                    self.apply_unit(tape, sk.conv, fm_a, mode)?
                }
            };
            taps.insert(format!("stage{s}.skip"), skip);
            skip_out.push(skip);
            h = pooled;
        }
        for s in (1..stages).rev() {
            let dec = self.decoders[s - 1];
            let k = tape.param(&self.params, dec.up_kernel);
            let b = tape.param(&self.params, dec.up_bias);
            let up = tape.tconv2d(h, k, b, 2)?;
            let merged = tape.concat_channels(skip_out[s - 1], up)?;
            let r = 2 * stages - s;
            taps.insert(format!("decoder{r}.merge"), merged);
            h = self.apply_double(tape, dec.block, merged, mode)?;
            taps.insert(format!("decoder{r}.out"), h);
        }
        let k = tape.param(&self.params, self.head.0);
        let b = tape.param(&self.params, self.head.1);
        let output = tape.conv2d(h, k, b, 1, Padding::Same)?;
        taps.insert("output".into(), output);
        Ok(ForwardOutput { output, taps })
    }

    /// Evaluation-mode class score maps for `x`.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = self.forward(&mut tape, xv, &mut Mode::Eval)?;
        Ok(tape.value(out.output).clone())
    }

    /// Detached copies of the named intermediate activations of an
    /// evaluation-mode pass.
    pub fn tap_feature_maps(&mut self, x: &Tensor, names: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = self.forward(&mut tape, xv, &mut Mode::Eval)?;
        names
            .iter()
            .map(|&n| {
                let v = out.taps.get(n).ok_or_else(|| Error::UnknownTap(n.to_string()))?;
                Ok((n.to_string(), tape.value(*v).clone()))
            })
            .collect()
    }

    /// Names of every tap point produced by [`NetworkGraph::forward`].
    pub fn tap_names(&self) -> Vec<String> {
        let stages = self.cfg.stages;
        let mut names = vec!["output".to_string()];
        for s in 1..=stages {
            names.push(format!("stage{s}.encoder"));
            if s < stages {
                for t in ["fm_b", "fm_a", "pooled", "skip"] {
                    names.push(format!("stage{s}.{t}"));
                }
                if self.skips[s - 1].is_some() && !self.bypass_residual {
                    names.push(format!("stage{s}.residual"));
                }
                let r = 2 * stages - s;
                names.push(format!("decoder{r}.merge"));
                names.push(format!("decoder{r}.out"));
            }
        }
        names.sort();
        names
    }
}

/// `(c, c, 3, 3)` kernel whose stride-2 transposed convolution repeats each
/// input pixel over the 2×2 block it came from.
pub fn nearest_neighbor_kernel(channels: usize) -> Tensor {
    // With same padding at stride 2 the transposed conv writes output 2i
    // from tap 0 (and tap 2 of input i−1) and output 2i+1 from tap 1, so
    // taps {0, 1} along each axis reproduce the input.
    const TAP: [f64; 3] = [1.0, 1.0, 0.0];
    let mut k = Tensor::zeros(&[channels, channels, 3, 3]);
    for c in 0..channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let i = ((c * channels + c) * 3 + ky) * 3 + kx;
                k.data_mut()[i] = TAP[ky] * TAP[kx];
            }
        }
    }
    k
}
