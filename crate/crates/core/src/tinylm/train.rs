use serde::{Deserialize, Serialize};

use super::backward::loss_and_grads;
use super::forward::forward;
use super::{Model, Params};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::{SplitMix64, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
    /// Stops after this many optimizer steps even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainHyper {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    /// Learning rate sized for the miniature model.
    pub fn desk() -> Self {
        Self {
            learning_rate: 3e-3,
            warmup_ratio: 0.1,
            batch_size: 8,
            epochs: 1,
            shuffle_seed: 42,
            max_steps: None,
        }
    }

    /// The billion-parameter fine-tuning setting (lr 3e-5).
    pub fn full_scale() -> Self {
        Self {
            learning_rate: 3e-5,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(n);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    /// Linear warmup over the first `warmup_ratio` of steps, then constant.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = (self.warmup_ratio * total_steps as f64).ceil() as usize;
        if warmup == 0 || step >= warmup {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / warmup as f64
        }
    }
}

/// Adam with bias correction and fixed betas.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Params,
    v: Params,
    t: u64,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        Self {
            m: Params::zeros(&model.config),
            v: Params::zeros(&model.config),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - TrainHyper::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - TrainHyper::BETA2.powi(self.t as i32);
        let grads: Vec<&Vec<f64>> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
        for (((p, m), v), g) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads)
        {
            for i in 0..p.len() {
                m[i] = TrainHyper::BETA1 * m[i] + (1.0 - TrainHyper::BETA1) * g[i];
                v[i] = TrainHyper::BETA2 * v[i] + (1.0 - TrainHyper::BETA2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + TrainHyper::EPS);
            }
        }
    }
}

/// Per-token gradients of one instance, as captured during extraction.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub instance_id: String,
    /// Position of the instance in the dataset passed to extraction.
    pub index: usize,
    /// Optimizer step at which the instance was consumed; -1 when frozen.
    pub step_index: i64,
    pub loss: f64,
    pub g_emb: Vec<Vec<f64>>,
    pub g_lm: Vec<Option<Vec<f64>>>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractMode {
    /// One epoch of real training; each bundle is measured at its step.
    Online,
    /// Pure measurement with fixed parameters.
    Frozen,
}

fn with_id(seq: &TokenSequence, e: Error) -> Error {
    Error::Instance {
        id: seq.instance_id.clone(),
        msg: e.to_string(),
    }
}

fn capture(model: &Model, seq: &TokenSequence, index: usize, step_index: i64) -> Result<(GradientBundle, Params)> {
    let trace = forward(model, seq).map_err(|e| with_id(seq, e))?;
    let res = loss_and_grads(model, seq, &trace).map_err(|e| with_id(seq, e))?;
    let bundle = GradientBundle {
        instance_id: seq.instance_id.clone(),
        index,
        step_index,
        loss: res.loss,
        g_emb: res.g_emb,
        g_lm: res.g_lm,
        weights: res.weights,
    };
    Ok((bundle, res.param_grads))
}

/// Measures every instance against fixed parameters.
pub fn extract_frozen(model: &Model, seqs: &[TokenSequence]) -> Result<Vec<GradientBundle>> {
    seqs.iter()
        .enumerate()
        .map(|(i, s)| capture(model, s, i, -1).map(|(b, _)| b))
        .collect()
}

/// Single pass over the data. `Online` trains for exactly one epoch and
/// records each instance's gradients at the step that consumes it; `Frozen`
/// leaves the model untouched. Bundles are returned in dataset order.
pub fn extract_epoch(
    model: &Model,
    seqs: &[TokenSequence],
    hyper: &TrainHyper,
    mode: ExtractMode,
) -> Result<(Model, Vec<GradientBundle>)> {
    if seqs.is_empty() {
        return Err(Error::Invalid("cannot extract gradients from an empty dataset".into()));
    }
    hyper.validate()?;
    match mode {
        ExtractMode::Frozen => Ok((model.clone(), extract_frozen(model, seqs)?)),
        ExtractMode::Online => {
            let mut model = model.clone();
            let mut adam = Adam::new(&model);
            let mut order: Vec<usize> = (0..seqs.len()).collect();
            SplitMix64::substream(hyper.shuffle_seed, Stream::Shuffle).shuffle(&mut order);
            let total = hyper.steps_per_epoch(seqs.len());
            let mut slots: Vec<Option<GradientBundle>> = vec![None; seqs.len()];
            for (step, batch) in order.chunks(hyper.batch_size).enumerate() {
                let mut acc = Params::zeros(&model.config);
                for &i in batch {
                    let (bundle, grads) = capture(&model, &seqs[i], i, step as i64)?;
                    if !bundle.loss.is_finite() {
                        return Err(Error::NonFinite { step });
                    }
                    acc.add_scaled(&grads, 1.0 / batch.len() as f64);
                    slots[i] = Some(bundle);
                }
                adam.step(&mut model.params, &acc, hyper.lr_at(step, total));
            }
            let bundles = slots.into_iter().map(|b| b.expect("every instance consumed once")).collect();
            Ok((model, bundles))
        }
    }
}

/// Mean response cross-entropy without computing gradients.
pub fn sequence_loss(model: &Model, seq: &TokenSequence) -> Result<f64> {
    let trace = forward(model, seq)?;
    let mask = seq.loss_mask(model.config.loss_on_eos);
    let mut total = 0.0;
    let mut n = 0usize;
    for t in 0..seq.len().saturating_sub(1) {
        if mask[t] {
            total -= trace.probs_row(t)[seq.tokens[t + 1]].ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyResponse);
    }
    Ok(total / n as f64)
}

pub fn perplexity(model: &Model, seq: &TokenSequence) -> Result<f64> {
    sequence_loss(model, seq).map(f64::exp)
}

pub fn train(model: &Model, seqs: &[TokenSequence], hyper: &TrainHyper) -> Result<Model> {
    train_with_callback(model, seqs, hyper, |_, _, _| Ok(())).map(|(m, _)| m)
}

/// Adam training loop. `on_epoch(epoch, model, mean_loss)` runs after every
/// completed epoch. Returns the trained model and per-epoch mean losses.
pub fn train_with_callback<F>(
    model: &Model,
    seqs: &[TokenSequence],
    hyper: &TrainHyper,
    mut on_epoch: F,
) -> Result<(Model, Vec<f64>)>
where
    F: FnMut(usize, &Model, f64) -> Result<()>,
{
    hyper.validate()?;
    let mut model = model.clone();
    if hyper.epochs == 0 || seqs.is_empty() {
        return Ok((model, Vec::new()));
    }
    let mut adam = Adam::new(&model);
    let mut rng = SplitMix64::substream(hyper.shuffle_seed, Stream::Shuffle);
    let total = hyper.total_steps(seqs.len());
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    'epochs: for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(hyper.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let mut acc = Params::zeros(&model.config);
            for &i in batch {
                let trace = forward(&model, &seqs[i]).map_err(|e| with_id(&seqs[i], e))?;
                let res = loss_and_grads(&model, &seqs[i], &trace).map_err(|e| with_id(&seqs[i], e))?;
                if !res.loss.is_finite() {
                    return Err(Error::NonFinite { step });
                }
                loss_sum += res.loss;
                seen += 1;
                acc.add_scaled(&res.param_grads, 1.0 / batch.len() as f64);
            }
            adam.step(&mut model.params, &acc, hyper.lr_at(step, total));
            if !model.params.is_finite() {
                return Err(Error::NonFinite { step });
            }
            step += 1;
        }
        let mean = loss_sum / seen.max(1) as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, &model, mean)?;
    }
    Ok((model, epoch_losses))
}
