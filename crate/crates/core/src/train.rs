//! Optimiser, training loops and evaluation.

use egmf_tensor::{ParamStore, RngState, Tape};
use serde::{Deserialize, Serialize};

use crate::config::{EgmfConfig, Task};
use crate::data::UtteranceFeatures;
use crate::error::{EgmfError, Result};
use crate::lm::ToyLm;
use crate::metrics::MetricReport;
use crate::model::{EgmfModel, Prediction, LM_PREFIX};
use crate::synthetic::PretrainCorpus;

/// Adam with bias correction. Frozen parameters and parameters without a
/// gradient are left untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let Some(g) = p.grad.take() else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let w = p.value_mut().data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                w[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: usize,
    /// Mean training loss of each optimiser step.
    pub step_losses: Vec<f64>,
}

/// Mini-batch training of every non-frozen parameter of `model`.
///
/// Runs `max_epochs` passes over `data` (stopping early once `max_steps`
/// optimiser steps have been taken, when set). Samples are shuffled each
/// epoch from a stream derived from the training seed.
pub fn train(model: &mut EgmfModel, data: &[UtteranceFeatures]) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(EgmfError::Data("training split is empty".into()));
    }
    let tc = model.cfg.train.clone();
    let mut opt = Adam::new(tc.lr);
    let mut rng = RngState::derive(tc.seed, "shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    'epochs: for _ in 0..tc.max_epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(tc.batch_size) {
            if tc.max_steps.is_some_and(|m| log.steps >= m) {
                break 'epochs;
            }
            model.store.zero_grad();
            let mut total = 0.0;
            for &i in batch {
                let mut tape = Tape::new();
                let loss = model.loss(&mut tape, &data[i])?;
                total += tape.value(loss).item();
                let scaled = tape.scale(loss, 1.0 / batch.len() as f64)?;
                tape.backward(scaled, &mut model.store)?;
            }
            opt.step(&mut model.store);
            log.steps += 1;
            log.step_losses.push(total / batch.len() as f64);
        }
    }
    Ok(log)
}

/// Predictions for every sample.
pub fn predict_all(model: &EgmfModel, data: &[UtteranceFeatures]) -> Result<Vec<Prediction>> {
    data.iter().map(|u| model.predict(u)).collect()
}

pub fn evaluate(model: &EgmfModel, data: &[UtteranceFeatures]) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(EgmfError::Data("evaluation split is empty".into()));
    }
    let preds = predict_all(model, data)?;
    match model.prompt.task {
        Task::Classification => {
            let golds = data
                .iter()
                .map(|u| u.target.label().ok_or_else(|| EgmfError::Data("missing label".into())))
                .collect::<Result<Vec<_>>>()?;
            let p: Vec<usize> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Label(c) => *c,
                    Prediction::Score { .. } => unreachable!("classification model predicts labels"),
                })
                .collect();
            MetricReport::classification(&p, &golds, model.prompt.labels.len())
        }
        Task::Regression => {
            let fmt = model.prompt.score.as_ref().expect("regression prompt has a score format");
            let golds: Vec<f64> = data.iter().map(|u| u.target.score().unwrap_or(0.0)).collect();
            let (mut failures, mut clamped) = (0, 0);
            let p: Vec<f64> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Score { parsed, .. } => {
                        failures += usize::from(parsed.parse_failure);
                        clamped += usize::from(parsed.clamped);
                        parsed.value
                    }
                    Prediction::Label(_) => unreachable!("regression model predicts scores"),
                })
                .collect();
            MetricReport::regression(&p, &golds, [fmt.lo, fmt.hi], failures, clamped)
        }
    }
}

/// Next-token training of a fresh toy LM on the pretraining corpus.
/// Returns the LM, its (unfrozen) weights and the per-step losses.
pub fn pretrain_lm(cfg: &EgmfConfig, corpus: &PretrainCorpus<'_>) -> Result<(ToyLm, ParamStore, Vec<f64>)> {
    let mut store = ParamStore::new();
    let mut init = RngState::derive(cfg.train.seed, "lm-init");
    let lm = ToyLm::new(&mut store, LM_PREFIX, &cfg.lm, &mut init)?;
    let mut rng = RngState::derive(cfg.train.seed, "lm-corpus");
    let mut opt = Adam::new(cfg.pretrain.lr);
    let mut losses = Vec::with_capacity(cfg.pretrain.steps);
    let batch = cfg.pretrain.batch_size.max(1);
    for _ in 0..cfg.pretrain.steps {
        store.zero_grad();
        let mut total = 0.0;
        for _ in 0..batch {
            let seq = corpus.sequence(&mut rng)?;
            let mut tape = Tape::new();
            let x = lm.embed_ids(&mut tape, &store, &seq[..seq.len() - 1])?;
            let (logits, _) = lm.forward(&mut tape, &store, x, false, None)?;
            let loss = tape.cross_entropy(logits, &seq[1..])?;
            total += tape.value(loss).item();
            let scaled = tape.scale(loss, 1.0 / batch as f64)?;
            tape.backward(scaled, &mut store)?;
        }
        opt.step(&mut store);
        losses.push(total / batch as f64);
    }
    Ok((lm, store, losses))
}
