use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::{loss_and_grad_impl, predict, Example};
use super::{ModelSpec, Parameters, TrainConfig};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
}

/// Moves the last `fraction` of `examples` (at least one) into a validation set.
pub fn split_holdout(mut examples: Vec<Example>, fraction: f64) -> Result<TrainData> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("validation fraction must lie in [0, 1)"));
    }
    let n_val = ((examples.len() as f64 * fraction).round() as usize).max(1);
    if n_val >= examples.len() {
        return Err(Error::invalid("not enough examples for a train/validation split"));
    }
    let validation = examples.split_off(examples.len() - n_val);
    Ok(TrainData { train: examples, validation })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub values: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_t: u64,
    pub best_values: Vec<f64>,
    pub best_val_top1: f64,
    pub stale_epochs: usize,
    pub stopped_early: bool,
    pub log: Vec<EpochLog>,
    /// Layers held fixed by the optimizer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frozen_layers: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub log: Vec<EpochLog>,
    pub state: TrainState,
}

pub struct Trainer {
    spec: ModelSpec,
    cfg: TrainConfig,
    params: Parameters,
    state: TrainState,
    dropout: bool,
    frozen: Vec<bool>,
}

impl Trainer {
    pub fn new(spec: &ModelSpec, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = Parameters::init(spec, cfg.rng_seed)?;
        Self::warm_start(spec, cfg, params, &[])
    }

    /// Starts from given parameters; layers named in `frozen_layers` are
    /// never updated.
    pub fn warm_start(spec: &ModelSpec, cfg: &TrainConfig, params: Parameters, frozen_layers: &[String]) -> Result<Self> {
        cfg.validate()?;
        let params = Parameters::from_values(spec, params.values)?;
        for name in frozen_layers {
            if !params.layout.iter().any(|l| &l.name == name) {
                return Err(Error::invalid(format!("no layer named `{name}` to freeze")));
            }
        }
        let n = params.len();
        let state = TrainState {
            epochs_done: 0,
            values: params.values.clone(),
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            adam_t: 0,
            best_values: params.values.clone(),
            best_val_top1: f64::NEG_INFINITY,
            stale_epochs: 0,
            stopped_early: false,
            log: Vec::new(),
            frozen_layers: frozen_layers.to_vec(),
        };
        Ok(Self::assemble(spec, cfg, params, state))
    }

    pub fn resume(spec: &ModelSpec, cfg: &TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        let params = Parameters::from_values(spec, state.values.clone())?;
        let n = params.len();
        if state.adam_m.len() != n || state.adam_v.len() != n || state.best_values.len() != n {
            return Err(Error::invalid("training state does not match the model spec"));
        }
        if state.frozen_layers.iter().any(|f| !params.layout.iter().any(|l| &l.name == f)) {
            return Err(Error::invalid("training state freezes an unknown layer"));
        }
        Ok(Self::assemble(spec, cfg, params, state))
    }

    fn assemble(spec: &ModelSpec, cfg: &TrainConfig, params: Parameters, state: TrainState) -> Self {
        let dropout = params.layout.iter().any(|l| l.dropout > 0.0);
        let mut frozen = vec![false; params.len()];
        for l in params.layout.iter().filter(|l| state.frozen_layers.contains(&l.name)) {
            frozen[l.weights.clone()].fill(true);
            frozen[l.biases.clone()].fill(true);
        }
        Trainer { spec: spec.clone(), cfg: cfg.clone(), params, state, dropout, frozen }
    }

    /// Counts the current parameters as a validation candidate before any
    /// epoch runs, so a warm start is never lost to early stopping.
    pub fn score_start(&mut self, data: &TrainData) -> Result<f64> {
        let v = top1(&self.params, &self.spec, &data.validation)?;
        if self.state.epochs_done == 0 && v > self.state.best_val_top1 {
            self.state.best_val_top1 = v;
            self.state.best_values.clone_from(&self.params.values);
        }
        Ok(v)
    }

    pub fn finished(&self) -> bool {
        self.state.stopped_early || self.state.epochs_done >= self.cfg.max_epochs
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn best_params(&self) -> Parameters {
        Parameters { values: self.state.best_values.clone(), layout: self.params.layout.clone() }
    }

    fn adam_step(&mut self, grad: &[f64]) {
        let (b1, b2) = self.cfg.adam_betas;
        let lr = self.cfg.learning_rate;
        let eps = self.cfg.adam_epsilon;
        self.state.adam_t += 1;
        let t = self.state.adam_t as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let s = &mut self.state;
        let moving = self.params.values.iter_mut().zip(grad).zip(&mut s.adam_m).zip(&mut s.adam_v).zip(&self.frozen);
        for ((((p, g), m), v), _) in moving.filter(|(_, f)| !**f) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }

    /// Runs one epoch: shuffled mini-batches, then validation top-1.
    pub fn epoch(&mut self, data: &TrainData) -> Result<EpochLog> {
        if data.train.is_empty() || data.validation.is_empty() {
            return Err(Error::invalid("train and validation splits must be nonempty"));
        }
        let epoch = self.state.epochs_done;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng::stream(self.cfg.rng_seed, Purpose::Shuffle, epoch as u64));

        let mut loss_sum = 0.0;
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data.train[i].clone()));
            let dropout = self
                .dropout
                .then(|| (self.cfg.rng_seed, ((epoch as u64) << 32) | (bi * self.cfg.batch_size) as u64));
            let (loss, grad) = loss_and_grad_impl(&self.params, &self.spec, &batch, &self.cfg, dropout)?;
            loss_sum += loss * chunk.len() as f64;
            self.adam_step(&grad);
        }
        let train_loss = loss_sum / data.train.len() as f64;
        let val_top1 = top1(&self.params, &self.spec, &data.validation)?;

        let s = &mut self.state;
        s.values.clone_from(&self.params.values);
        s.epochs_done += 1;
        if val_top1 > s.best_val_top1 {
            s.best_val_top1 = val_top1;
            s.best_values.clone_from(&self.params.values);
            s.stale_epochs = 0;
        } else {
            s.stale_epochs += 1;
            if s.stale_epochs >= self.cfg.early_stop_patience {
                s.stopped_early = true;
            }
        }
        let log = EpochLog { epoch: s.epochs_done, train_loss, val_top1 };
        s.log.push(log.clone());
        Ok(log)
    }

    pub fn run(mut self, data: &TrainData) -> Result<TrainOutcome> {
        while !self.finished() {
            self.epoch(data)?;
        }
        Ok(TrainOutcome { params: self.best_params(), log: self.state.log.clone(), state: self.state })
    }
}

/// Fraction of examples whose argmax score is the label.
pub fn top1(params: &Parameters, spec: &ModelSpec, examples: &[Example]) -> Result<f64> {
    use rayon::prelude::*;
    let hits = examples
        .par_iter()
        .map(|ex| predict(params, spec, &ex.inputs).map(|s| (s.argmax() == ex.label) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / examples.len() as f64)
}

/// Adam with early stopping on validation top-1; returns the best-validation
/// parameters.
pub fn train(data: &TrainData, spec: &ModelSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::invalid("train and validation splits must be nonempty"));
    }
    Trainer::new(spec, cfg)?.run(data)
}
