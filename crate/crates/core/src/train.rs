//! Training configuration, epochs and evaluation.

use std::fmt::Write as _;

use crate::data::{augment_flip_crop, Dataset};
use crate::error::{Error, Result};
use crate::hoyer::ExtremumMode;
use crate::network::{total_loss, ArchDescriptor, Layer, ModelOptions, NetworkModel, SpikeTally};
use crate::ops::batchnorm::Phase;
use crate::optim::{lr_at_epoch, OptimizerKind, OptimizerState};
use crate::quant::QuantConfig;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::spike::{SpikeKind, DEFAULT_EMA_MOMENTUM, DEFAULT_SURROGATE_SCALE};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA_H: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub lambda_h: f64,
    pub surrogate_scale: f64,
    pub ema_momentum: f64,
    pub extremum_mode: ExtremumMode,
    pub spike_kind: SpikeKind,
    pub dropout: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// 0 = full precision.
    pub quant_bits: u8,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 1e-4,
            optimizer: OptimizerKind::adam(),
            lambda_h: DEFAULT_LAMBDA_H,
            surrogate_scale: DEFAULT_SURROGATE_SCALE,
            ema_momentum: DEFAULT_EMA_MOMENTUM,
            extremum_mode: ExtremumMode::ChannelWise,
            spike_kind: SpikeKind::Hoyer,
            dropout: 0.1,
            weight_decay: 5e-6,
            seed: 0,
            quant_bits: 0,
            augment: false,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 16] = [
        "epochs",
        "batch_size",
        "lr",
        "optimizer",
        "momentum",
        "lambda_h",
        "surrogate_scale",
        "ema_momentum",
        "extremum_mode",
        "spike_kind",
        "dropout",
        "weight_decay",
        "seed",
        "quant_bits",
        "augment",
        "adam_eps",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.lambda_h >= 0.0 && self.lambda_h.is_finite()) {
            return Err(Error::Config(format!("lambda_h must be >= 0, got {}", self.lambda_h)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.quant_bits != 0 {
            QuantConfig::new(self.quant_bits).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.model_options().validate()
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            mode: self.extremum_mode,
            kind: self.spike_kind,
            ema_momentum: self.ema_momentum,
            surrogate_scale: self.surrogate_scale,
            dropout: self.dropout,
        }
    }

    pub fn quant(&self) -> Option<QuantConfig> {
        (self.quant_bits != 0).then_some(QuantConfig { bits: self.quant_bits })
    }

    /// Sets one field from its `key = value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "optimizer" => {
                let kind: OptimizerKind = value.parse()?;
                // keep hyperparameters already set for the same family
                if kind.name() != self.optimizer.name() {
                    self.optimizer = kind;
                }
            }
            "momentum" => match &mut self.optimizer {
                OptimizerKind::Sgd { momentum } => *momentum = parse(key, value)?,
                OptimizerKind::Adam { beta1, .. } => *beta1 = parse(key, value)?,
            },
            "adam_eps" => {
                if let OptimizerKind::Adam { eps, .. } = &mut self.optimizer {
                    *eps = parse(key, value)?;
                }
            }
            "lambda_h" => self.lambda_h = parse(key, value)?,
            "surrogate_scale" => self.surrogate_scale = parse(key, value)?,
            "ema_momentum" => self.ema_momentum = parse(key, value)?,
            "extremum_mode" => self.extremum_mode = value.parse()?,
            "spike_kind" => self.spike_kind = value.parse()?,
            "dropout" => self.dropout = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "quant_bits" => self.quant_bits = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical `key = value` text, one field per line.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        let (momentum, eps) = match self.optimizer {
            OptimizerKind::Sgd { momentum } => (momentum, None),
            OptimizerKind::Adam { beta1, eps, .. } => (beta1, Some(eps)),
        };
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "optimizer = {}", self.optimizer);
        let _ = writeln!(s, "momentum = {momentum}");
        if let Some(eps) = eps {
            let _ = writeln!(s, "adam_eps = {eps}");
        }
        let _ = writeln!(s, "lambda_h = {}", self.lambda_h);
        let _ = writeln!(s, "surrogate_scale = {}", self.surrogate_scale);
        let _ = writeln!(s, "ema_momentum = {}", self.ema_momentum);
        let _ = writeln!(s, "extremum_mode = {}", self.extremum_mode);
        let _ = writeln!(s, "spike_kind = {}", self.spike_kind);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "quant_bits = {}", self.quant_bits);
        let _ = writeln!(s, "augment = {}", self.augment);
        s
    }

    /// Parses a record produced by [`to_record`](Self::to_record).
    pub fn from_record(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (key, value) in parse_key_values(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

/// Builds a model for `desc` with the config's spike settings and quantization.
pub fn build_model<T: Scalar>(desc: &ArchDescriptor, cfg: &TrainConfig) -> Result<NetworkModel<T>> {
    let mut rng = Rng::new(cfg.seed);
    let mut model = desc.build(&cfg.model_options(), &mut rng)?;
    model.set_quantization(cfg.quant());
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted means over the epoch's batches.
    pub loss: f64,
    pub ce: f64,
    pub hoyer: f64,
    /// Training-phase accuracy.
    pub accuracy: f64,
    pub activity: SpikeTally,
    /// Averaged extremum per spike layer after the epoch.
    pub extremums: Vec<Vec<f64>>,
}

fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(&logits.data()[r * k..(r + 1) * k]) == y)
        .count()
}

/// First index of the maximum.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn extremums<T: Scalar>(model: &NetworkModel<T>) -> Vec<Vec<f64>> {
    model
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Spike(s) => Some(s.ema_ext.as_ref().map_or_else(Vec::new, |e| e.iter().map(|v| v.as_f64()).collect())),
            _ => None,
        })
        .collect()
}

/// One shuffled pass: forward (train) → loss → backward → optimizer step.
pub fn train_epoch<T: Scalar>(
    model: &mut NetworkModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    opt: &mut OptimizerState<T>,
    rng: &mut Rng,
    epoch: usize,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    opt.lr = lr_at_epoch(cfg.lr, epoch, cfg.epochs);
    let lambda = T::lit(cfg.lambda_h);
    let order_seed = rng.next_u64();
    let (mut loss, mut ce, mut hoyer) = (0.0, 0.0, 0.0);
    let mut hits = 0;
    let mut tally = SpikeTally::default();
    for mut batch in data.batches(cfg.batch_size, true, order_seed)? {
        if cfg.augment {
            augment_flip_crop(&mut batch.images, rng);
        }
        let (logits, trace) = model.forward(&batch.images, Phase::Train, Some(rng))?;
        let l = total_loss(&logits, &batch.labels, &trace, cfg.lambda_h)?;
        let n = batch.labels.len() as f64;
        loss += l.total * n;
        ce += l.ce * n;
        hoyer += l.hoyer * n;
        hits += correct(&logits, &batch.labels);
        tally.add(&trace);
        let grads = model.backward(&trace, &batch.labels, lambda)?;
        drop(trace);
        opt.step_model(model, &grads)?;
    }
    let n = data.len() as f64;
    Ok(EpochMetrics {
        epoch,
        lr: opt.lr,
        loss: loss / n,
        ce: ce / n,
        hoyer: hoyer / n,
        accuracy: hits as f64 / n,
        activity: tally,
        extremums: extremums(model),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub correct: usize,
    pub total: usize,
    pub activity: SpikeTally,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Inference-phase accuracy and spiking activity.
pub fn evaluate<T: Scalar>(model: &NetworkModel<T>, data: &Dataset<T>, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut hits = 0;
    let mut tally = SpikeTally::default();
    for batch in data.batches(batch_size, false, 0)? {
        let (logits, trace) = model.infer(&batch.images)?;
        hits += correct(&logits, &batch.labels);
        tally.add(&trace);
    }
    Ok(EvalResult {
        correct: hits,
        total: data.len(),
        activity: tally,
    })
}

/// Per-spike-layer firing fractions over `data` in the inference phase.
pub fn measure_spiking_activity<T: Scalar>(model: &NetworkModel<T>, data: &Dataset<T>, batch_size: usize) -> Result<SpikeTally> {
    Ok(evaluate(model, data, batch_size)?.activity)
}

/// Full training run; `on_epoch` sees each epoch's metrics.
pub fn fit<T: Scalar>(
    model: &mut NetworkModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &NetworkModel<T>) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr, cfg.weight_decay);
    let mut rng = Rng::new(cfg.seed).fork(7);
    let mut all = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let m = train_epoch(model, data, cfg, &mut opt, &mut rng, epoch)?;
        on_epoch(&m, model)?;
        all.push(m);
    }
    Ok(all)
}
