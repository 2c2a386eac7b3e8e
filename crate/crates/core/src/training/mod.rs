//! Initialization, optimization and the epoch loop.

mod adam;
mod checkpoint;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, OptimizerState};
pub use checkpoint::{Checkpoint, ConfigSnapshot, ParamBlock, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autodiff::{BnState, Tape};
use crate::error::{Error, Result};
use crate::network::{Mode, NetworkGraph};
use crate::params::Role;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_interval: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub dropout_keep: f64,
    pub bn_decay: f64,
    pub init_std: f64,
    pub init_bias: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub max_epochs: u64,
    /// Emit a checkpoint every this many epochs; 0 emits only the final one.
    pub checkpoint_every: u64,
    /// Re-estimate batch-norm running moments without dropout before every
    /// emitted checkpoint.
    pub bn_recalibrate: bool,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            lr_decay: 0.9,
            lr_interval: 5000,
            batch_size: 4,
            weight_decay: 0.003,
            dropout_keep: 0.8,
            bn_decay: 0.9,
            init_std: 0.05,
            init_bias: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            max_epochs: 500,
            checkpoint_every: 0,
            bn_recalibrate: true,
            loss: Loss::Mse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1), got {}", self.lr_decay)));
        }
        if self.lr_interval == 0 {
            return Err(Error::Config("lr_interval must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!("dropout_keep must lie in (0, 1], got {}", self.dropout_keep)));
        }
        if !(0.0..1.0).contains(&self.bn_decay) {
            return Err(Error::Config(format!("bn_decay must lie in [0, 1), got {}", self.bn_decay)));
        }
        if self.weight_decay < 0.0 || self.init_std <= 0.0 {
            return Err(Error::Config("weight_decay must be ≥ 0 and init_std > 0".into()));
        }
        Ok(())
    }
}

/// Step schedule: `lr0 · lr_decay^⌊epoch / lr_interval⌋`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: u64) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_interval) as i32)
}

/// Kernels from a zero-mean normal truncated at ±2σ (resampled), biases
/// constant, PReLU slopes 0.25, batch-norm scale 1 and shift 0, running
/// moments reset.
pub fn init_params_with(net: &mut NetworkGraph, seed: u64, std: f64, bias: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.params_mut().iter_mut() {
        match p.role {
            Role::ConvKernel => p.value.data_mut().iter_mut().for_each(|v| *v = truncated_normal(&mut rng, std)),
            Role::Bias => p.value.data_mut().fill(bias),
            Role::PreluAlpha => p.value.data_mut().fill(crate::network::INIT_ALPHA),
            Role::BnScale => p.value.data_mut().fill(1.0),
            Role::BnShift | Role::Input => p.value.data_mut().fill(0.0),
        }
        p.grad.data_mut().fill(0.0);
    }
    for s in net.bn_states_mut() {
        *s = BnState::new(s.channels());
    }
}

pub fn init_params(net: &mut NetworkGraph, seed: u64) {
    let d = TrainConfig::default();
    init_params_with(net, seed, d.init_std, d.init_bias);
}

fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// One training pair: a `C × H × W` image and a `K × H × W` one-hot target.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub target: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn check_against(&self, net: &NetworkGraph) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let cfg = net.config();
        let e = cfg.input_extent;
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.shape() != [cfg.in_channels, e, e] || s.target.shape() != [cfg.out_classes, e, e] {
                return Err(Error::Shape(format!(
                    "sample {i}: image {:?} / target {:?}, network expects [{}, {e}, {e}] / [{}, {e}, {e}]",
                    s.image.shape(),
                    s.target.shape(),
                    cfg.in_channels,
                    cfg.out_classes
                )));
            }
        }
        Ok(())
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let images: Vec<&Tensor> = idx.iter().map(|&i| &self.samples[i].image).collect();
        let targets: Vec<&Tensor> = idx.iter().map(|&i| &self.samples[i].target).collect();
        Ok((Tensor::stack(&images)?, Tensor::stack(&targets)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch record serializes")
    }
}

/// Owns a network together with its optimizer and random state.
pub struct Trainer {
    net: NetworkGraph,
    opt: OptimizerState,
    rng: ChaCha8Rng,
    epoch: u64,
    cfg: TrainConfig,
}

impl Trainer {
    /// Start training an already initialized network. Shuffling and dropout
    /// draw from one generator seeded by `cfg.seed` on its own stream.
    pub fn new(net: NetworkGraph, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = OptimizerState::new(net.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer { net, opt, rng, epoch: 0, cfg })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`], with
    /// the training configuration it was written under.
    pub fn resume(mut net: NetworkGraph, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.restore_into(&mut net)?;
        let snapshot = ckpt.config_snapshot()?;
        let opt = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| Error::corrupt("checkpoint carries no optimizer state", None))?;
        Ok(Trainer { net, opt, rng: ckpt.rng.to_rng(), epoch: ckpt.epoch, cfg: snapshot.train })
    }

    pub fn network(&self) -> &NetworkGraph {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut NetworkGraph {
        &mut self.net
    }

    pub fn into_network(self) -> NetworkGraph {
        self.net
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Change the epoch budget, e.g. to extend a resumed run.
    pub fn set_max_epochs(&mut self, max_epochs: u64) {
        self.cfg.max_epochs = max_epochs;
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.net, Some(&self.opt), &self.rng, self.epoch, &self.cfg)
    }

    /// One pass over `data` in a freshly shuffled order.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        let start = Instant::now();
        let lr = lr_at_epoch(&self.cfg, self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for idx in order.chunks(self.cfg.batch_size) {
            let (x, y) = data.batch(idx)?;
            let mut tape = Tape::new();
            let xv = tape.input(x);
            let yv = tape.input(y);
            let mut mode = Mode::Train {
                dropout_keep: self.cfg.dropout_keep,
                bn_decay: self.cfg.bn_decay,
                rng: &mut self.rng,
            };
            let out = self.net.forward(&mut tape, xv, &mut mode)?;
            let loss = tape.mse_loss(out.output, yv)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {}", self.epoch)));
            }
            total += lv * idx.len() as f64;
            let grads = tape.backward(loss)?;
            let params = self.net.params_mut();
            params.zero_grad();
            tape.accumulate_param_grads(&grads, params)?;
            adam_step(params, &mut self.opt, lr, self.cfg.weight_decay)?;
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch - 1,
            lr,
            loss: total / data.len() as f64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Replace the batch-norm running moments by the plain average of the
/// batch moments over `data`, visited in order with dropout disabled.
///
/// During training the moments are tracked on dropped-out activations,
/// whose variance differs from what the network sees at evaluation time.
/// Parameters are untouched and no random numbers are drawn.
pub fn recalibrate_batch_norm(net: &mut NetworkGraph, data: &Dataset, batch_size: usize) -> Result<()> {
    data.check_against(net)?;
    let order: Vec<usize> = (0..data.len()).collect();
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for (k, idx) in order.chunks(batch_size.max(1)).enumerate() {
        let (x, _) = data.batch(idx)?;
        let mut tape = Tape::new();
        let xv = tape.input(x);
        // Running average: decay k/(k+1) weights every batch equally.
        let mut mode = Mode::Train { dropout_keep: 1.0, bn_decay: k as f64 / (k + 1) as f64, rng: &mut unused };
        net.forward(&mut tape, xv, &mut mode)?;
    }
    Ok(())
}

/// Failure during [`train_with`]: the error plus the state just before the
/// failing step, which is still finite because updates are only applied
/// after a successful forward and backward pass.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Box<Checkpoint>>,
}

pub struct TrainOutcome {
    pub network: NetworkGraph,
    pub log: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

/// Run `trainer` until `max_epochs`, calling `on_epoch` after every epoch
/// and `on_checkpoint` at the configured cadence and at the end.
pub fn train_with(
    trainer: &mut Trainer,
    data: &Dataset,
    mut on_epoch: impl FnMut(&mut Trainer, &EpochRecord) -> Result<()>,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> std::result::Result<Vec<EpochRecord>, TrainFailure> {
    let fail = |t: &Trainer, error| TrainFailure { error, last_good: Some(Box::new(t.checkpoint())) };
    if let Err(e) = data.check_against(trainer.network()) {
        return Err(fail(trainer, e));
    }
    let mut log = Vec::new();
    while trainer.epoch() < trainer.config().max_epochs {
        let rec = match trainer.run_epoch(data) {
            Ok(r) => r,
            Err(e) => return Err(fail(trainer, e)),
        };
        if let Err(e) = on_epoch(trainer, &rec) {
            return Err(fail(trainer, e));
        }
        log.push(rec);
        let every = trainer.config().checkpoint_every;
        let done = trainer.epoch() >= trainer.config().max_epochs;
        if done || (every > 0 && trainer.epoch() % every == 0) {
            if trainer.config().bn_recalibrate {
                let bs = trainer.config().batch_size;
                if let Err(e) = recalibrate_batch_norm(trainer.network_mut(), data, bs) {
                    return Err(fail(trainer, e));
                }
            }
            if let Err(e) = on_checkpoint(&trainer.checkpoint()) {
                return Err(fail(trainer, e));
            }
        }
    }
    Ok(log)
}

/// Train an initialized network for `cfg.max_epochs` epochs.
pub fn train(net: NetworkGraph, data: &Dataset, cfg: &TrainConfig) -> std::result::Result<TrainOutcome, TrainFailure> {
    let mut trainer = match Trainer::new(net, cfg.clone()) {
        Ok(t) => t,
        Err(error) => return Err(TrainFailure { error, last_good: None }),
    };
    let log = train_with(&mut trainer, data, |_, _| Ok(()), |_| Ok(()))?;
    let checkpoint = trainer.checkpoint();
    Ok(TrainOutcome { network: trainer.into_network(), log, checkpoint })
}
