//! AdamW over `(μ, ε)` with per-step cosine annealing.

use std::f64::consts::PI;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    total_loss_and_grads, ClassifierError, FplParams, HyperParams, LabeledQuery, EPSILON_FLOOR,
};
use crate::dataio::{FeaturePack, PackError, Split};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("class {0} has no support maps")]
    EmptyClass(usize),
    #[error("class {0} has no training queries")]
    NoTrainingQueries(usize),
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

/// `base · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64, TrainError> {
    if step >= total_steps {
        return Err(TrainError::StepOutOfRange { step, total: total_steps });
    }
    let t = step as f64 / total_steps as f64;
    Ok((base_lr * 0.5 * (1.0 + (PI * t).cos())).max(0.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Drop the orthogonality penalty (`γ = 0`).
    pub po_off: bool,
    /// Keep `μ = 0`, i.e. `δ = 1`.
    pub freeze_mu: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: [f64; FplParams::TRAINABLE],
    pub v: [f64; FplParams::TRAINABLE],
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    /// Mean loss over the epoch's queries, at pre-step parameters.
    pub loss: f64,
    pub accuracy: f64,
    pub mu: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    #[serde(flatten)]
    pub params: FplParams,
    pub step: usize,
    pub adam: AdamMoments,
    pub base_lr: f64,
    pub total_steps: usize,
    pub rng_seed: u64,
    pub hyperparams: HyperParams,
    pub ablation: Ablation,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    /// Untrained state: `μ = 0`, `ε = 1`.
    pub fn initial(hp: &HyperParams) -> Self {
        TrainState {
            params: FplParams::default(),
            step: 0,
            adam: AdamMoments::default(),
            base_lr: hp.lr,
            total_steps: 0,
            rng_seed: hp.seed,
            hyperparams: hp.clone(),
            ablation: Ablation::default(),
            history: Vec::new(),
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_parameter_count(&self) -> usize {
        self.params.to_array().len()
    }

    /// Training log as JSON lines.
    pub fn history_jsonl(&self) -> String {
        self.history
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }
}

fn validate(hp: &HyperParams) -> Result<(), TrainError> {
    let bad = |m: String| Err(TrainError::InvalidHyperParams(m));
    if hp.batch_size == 0 {
        return bad("batch_size must be at least 1".into());
    }
    if !(hp.lr >= 0.0) || !hp.lr.is_finite() {
        return bad(format!("lr must be >= 0, got {}", hp.lr));
    }
    if !(hp.weight_decay >= 0.0) || !hp.weight_decay.is_finite() {
        return bad(format!("weight_decay must be >= 0, got {}", hp.weight_decay));
    }
    if !hp.gamma.is_finite() {
        return bad("gamma must be finite".into());
    }
    if !(hp.eta >= 0.0) || !hp.eta.is_finite() {
        return bad(format!("eta must be >= 0, got {}", hp.eta));
    }
    Ok(())
}

pub fn train(pack: &FeaturePack, hp: &HyperParams, ablation: Ablation) -> Result<TrainState, TrainError> {
    train_with(pack, hp, ablation, |_| ControlFlow::Continue(()))
}

/// Trains on the pack's `train` queries. `observer` sees every epoch record
/// and may stop training early; the partial state is returned.
pub fn train_with(
    pack: &FeaturePack,
    hp: &HyperParams,
    ablation: Ablation,
    mut observer: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainState, TrainError> {
    validate(hp)?;
    if let Some(c) = pack.support.iter().position(|s| s.is_empty()) {
        return Err(TrainError::EmptyClass(c));
    }
    let episode = pack.episode()?;

    let train: Vec<LabeledQuery<'_>> = episode
        .queries
        .iter()
        .filter(|q| q.split == Split::Train)
        .map(|q| LabeledQuery {
            map: &q.map,
            image_feature: &q.global,
            label: q.label,
            // a train query that is one of its class's support maps
            support_shot: episode.support[q.label].iter().position(|m| *m == q.map),
        })
        .collect();
    if let Some(c) = (0..pack.classes()).find(|&c| !train.iter().any(|q| q.label == c)) {
        return Err(TrainError::NoTrainingQueries(c));
    }

    let mut hp_eff = hp.clone();
    if ablation.po_off {
        hp_eff.gamma = 0.0;
    }
    let steps_per_epoch = train.len().div_ceil(hp.batch_size);
    let mut state = TrainState::initial(hp);
    state.ablation = ablation;
    state.total_steps = hp.epochs * steps_per_epoch;

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch = Vec::with_capacity(hp.batch_size);

    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let epoch_lr = cosine_lr(state.step, state.total_steps, hp.lr)?;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(hp.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i]));
            let out = total_loss_and_grads(&batch, &episode.pools, &episode.bank, &state.params, &hp_eff)?;
            loss_sum += out.loss * batch.len() as f64;
            correct += out.correct;

            let lr = cosine_lr(state.step, state.total_steps, hp.lr)?;
            let grads = [if ablation.freeze_mu { 0.0 } else { out.dmu }, out.deps];
            adamw_step(&mut state, grads, lr, hp.weight_decay, ablation.freeze_mu);
        }
        let record = EpochRecord {
            epoch,
            lr: epoch_lr,
            loss: loss_sum / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
            mu: state.params.mu,
            epsilon: state.params.epsilon,
        };
        state.history.push(record);
        if observer(&record).is_break() {
            break;
        }
    }
    Ok(state)
}

fn adamw_step(state: &mut TrainState, grads: [f64; FplParams::TRAINABLE], lr: f64, weight_decay: f64, freeze_mu: bool) {
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    let mut p = state.params.to_array();
    for i in 0..p.len() {
        if i == 0 && freeze_mu {
            continue;
        }
        let g = grads[i];
        let m = &mut state.adam.m[i];
        let v = &mut state.adam.v[i];
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        p[i] -= lr * (update + weight_decay * p[i]);
    }
    let mut params = FplParams::from_array(p);
    params.epsilon = params.epsilon.max(EPSILON_FLOOR);
    state.params = params;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, SynthSpec};

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-3).unwrap(), 1e-3);
        assert!((cosine_lr(50, 100, 1e-3).unwrap() - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(999_999, 1_000_000, 1.0).unwrap() < 1e-10);
        assert!(matches!(cosine_lr(10, 10, 1.0), Err(TrainError::StepOutOfRange { step: 10, total: 10 })));
        assert!(cosine_lr(0, 0, 1.0).is_err());
    }

    #[test]
    fn schedule_is_monotone() {
        let lrs: Vec<f64> = (0..200).map(|s| cosine_lr(s, 200, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn tiny_pack() -> FeaturePack {
        gen_synthetic(&SynthSpec { classes: 3, shots: 3, channels: 8, text_channels: 6, queries_per_class: 2, seed: 4, ..SynthSpec::default() })
            .unwrap()
    }

    #[test]
    fn zero_lr_keeps_params() {
        let hp = HyperParams { lr: 0.0, epochs: 4, ..HyperParams::default() };
        let state = train(&tiny_pack(), &hp, Ablation::default()).unwrap();
        assert_eq!(state.params, FplParams::default());
        assert_eq!(state.history.len(), 4);
        assert_eq!(state.step, 4);
    }

    #[test]
    fn freeze_mu_keeps_mu_zero() {
        let hp = HyperParams { lr: 0.05, epochs: 3, ..HyperParams::default() };
        let state = train(&tiny_pack(), &hp, Ablation { freeze_mu: true, po_off: false }).unwrap();
        assert_eq!(state.params.mu, 0.0);
        assert_ne!(state.params.epsilon, 1.0);
    }

    #[test]
    fn step_count_and_history() {
        // 9 train queries, batch 4 → 3 steps per epoch
        let hp = HyperParams { batch_size: 4, epochs: 5, ..HyperParams::default() };
        let state = train(&tiny_pack(), &hp, Ablation::default()).unwrap();
        assert_eq!(state.total_steps, 15);
        assert_eq!(state.step, 15);
        let epochs: Vec<usize> = state.history.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3, 4]);
        assert_eq!(state.trainable_parameter_count(), 2);
        assert_eq!(state.history_jsonl().lines().count(), 5);
    }

    #[test]
    fn observer_can_stop() {
        let hp = HyperParams { epochs: 10, ..HyperParams::default() };
        let state = train_with(&tiny_pack(), &hp, Ablation::default(), |r| {
            if r.epoch == 1 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) }
        })
        .unwrap();
        assert_eq!(state.history.len(), 2);
    }

    #[test]
    fn empty_class_rejected() {
        let mut pack = tiny_pack();
        pack.support[2].clear();
        assert!(matches!(train(&pack, &HyperParams::default(), Ablation::default()), Err(TrainError::EmptyClass(2))));
    }

    #[test]
    fn bad_batch_size_rejected() {
        let hp = HyperParams { batch_size: 0, ..HyperParams::default() };
        assert!(matches!(train(&tiny_pack(), &hp, Ablation::default()), Err(TrainError::InvalidHyperParams(_))));
    }

    #[test]
    fn state_json_round_trip() {
        let state = train(&tiny_pack(), &HyperParams { epochs: 2, ..HyperParams::default() }, Ablation::default()).unwrap();
        let json = serde_json::to_string(&state).unwrap();
        assert_eq!(serde_json::from_str::<TrainState>(&json).unwrap(), state);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["mu"].as_f64(), Some(state.params.mu));
        assert_eq!(v["epsilon"].as_f64(), Some(state.params.epsilon));
        assert_eq!(v["history"].as_array().unwrap().len(), 2);
    }
}
