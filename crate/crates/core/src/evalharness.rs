//! Accuracy reports for the fused classifier, two baselines and shift sweeps.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{self, argmax, ClassifierError, HyperParams};
use crate::dataio::{domain_shift, Episode, FeaturePack, PackError, ShiftSpec, Split};
use crate::tensorcore::{self, TensorError};
use crate::trainer::TrainState;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pack has no {0:?} queries")]
    NoTestSplit(Split),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fpl,
    ClipZeroShot,
    NearestClassMean,
}

/// Position of a report inside a shift sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportRole {
    #[default]
    Single,
    Source,
    Target,
    TargetAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Where the pack was read from; set by callers that know it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pack_path: Option<String>,
    pub pack_hash: String,
    pub method: Method,
    /// `null` when classes have different shot counts.
    pub shots: Option<usize>,
    pub eta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub overall_accuracy: f64,
    /// `null` for classes without queries in the split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub split: Split,
    pub shift: Option<ShiftSpec>,
    pub wall_seconds: f64,
    pub correct: usize,
    pub total: usize,
    #[serde(default)]
    pub role: ReportRole,
    /// Predicted class per evaluated query, in pack order.
    #[serde(skip)]
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }
}

struct Scored {
    correct: usize,
    total: usize,
    overall: f64,
    per_class: Vec<Option<f64>>,
}

fn score(predictions: &[usize], labels: &[usize], classes: usize) -> Scored {
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        counts[y] += 1;
        hits[y] += (p == y) as usize;
    }
    let correct: usize = hits.iter().sum();
    let total = labels.len();
    Scored {
        correct,
        total,
        overall: correct as f64 / total as f64,
        per_class: hits.iter().zip(&counts).map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64)).collect(),
    }
}

/// Shared context for one evaluation run.
struct Run<'a> {
    pack: &'a FeaturePack,
    episode: Episode,
    split: Split,
    started: Instant,
}

impl<'a> Run<'a> {
    fn new(pack: &'a FeaturePack, split: Split) -> Result<Self, EvalError> {
        let started = Instant::now();
        if pack.classes() < 2 {
            return Err(EvalError::TooFewClasses(pack.classes()));
        }
        if pack.count_split(split) == 0 {
            return Err(EvalError::NoTestSplit(split));
        }
        Ok(Run { pack, episode: pack.episode()?, split, started })
    }

    fn queries(&self) -> Vec<&crate::dataio::Query> {
        self.episode.queries.iter().filter(|q| q.split == self.split).collect()
    }

    fn report(&self, method: Method, predictions: Vec<usize>, hp: &HyperParams, params: (f64, f64)) -> Result<EvalReport, EvalError> {
        let labels: Vec<usize> = self.queries().iter().map(|q| q.label).collect();
        let s = score(&predictions, &labels, self.pack.classes());
        let (mu, epsilon) = params;
        Ok(EvalReport {
            pack_path: None,
            pack_hash: self.pack.content_hash()?,
            method,
            shots: self.pack.shots(),
            eta: hp.eta,
            gamma: hp.gamma,
            mu,
            epsilon,
            delta: mu.exp(),
            overall_accuracy: s.overall,
            per_class_accuracy: s.per_class,
            split: self.split,
            shift: None,
            wall_seconds: self.started.elapsed().as_secs_f64(),
            correct: s.correct,
            total: s.total,
            role: ReportRole::Single,
            predictions,
        })
    }
}

/// Fused predictions on the test split with the full support pools.
pub fn evaluate(pack: &FeaturePack, state: &TrainState, hp: &HyperParams) -> Result<EvalReport, EvalError> {
    evaluate_split(pack, state, hp, Split::Test)
}

pub fn evaluate_split(pack: &FeaturePack, state: &TrainState, hp: &HyperParams, split: Split) -> Result<EvalReport, EvalError> {
    let run = Run::new(pack, split)?;
    let params = state.params;
    let projectors = if hp.eta == 0.0 {
        Vec::new()
    } else {
        classifier::prepare_projectors(&run.episode.pools, params.delta())?
    };
    let bank = &run.episode.bank;
    let predictions = run
        .queries()
        .par_iter()
        .map(|q| classifier::predict(&q.map, &q.global, &projectors, bank, &params, hp.eta).map(|p| p.argmax))
        .collect::<Result<Vec<_>, _>>()?;
    run.report(Method::Fpl, predictions, hp, (params.mu, params.epsilon))
}

/// Zero-shot prediction from global image and text features only.
pub fn baseline_clip_zero_shot(pack: &FeaturePack) -> Result<EvalReport, EvalError> {
    let run = Run::new(pack, Split::Test)?;
    let bank = &run.episode.bank;
    let predictions = run
        .queries()
        .par_iter()
        .map(|q| classifier::clip_scores(&q.global, bank).map(|p| argmax(&p)))
        .collect::<Result<Vec<_>, _>>()?;
    let hp = HyperParams { eta: 0.0, gamma: 0.0, ..HyperParams::default() };
    run.report(Method::ClipZeroShot, predictions, &hp, (0.0, 1.0))
}

/// Cosine between a query's mean-pooled map and each class's mean
/// mean-pooled support map.
pub fn baseline_nearest_class_mean(pack: &FeaturePack) -> Result<EvalReport, EvalError> {
    let run = Run::new(pack, Split::Test)?;
    let means: Vec<Vec<f64>> = run
        .episode
        .support
        .iter()
        .map(|maps| {
            let mut mean = vec![0.0; pack.dims.channels];
            for m in maps {
                mean.iter_mut().zip(m.mean_pool()).for_each(|(a, b)| *a += b);
            }
            mean.iter_mut().for_each(|a| *a /= maps.len() as f64);
            mean
        })
        .collect();
    let predictions = run
        .queries()
        .par_iter()
        .map(|q| {
            let f = q.map.mean_pool();
            let sims = means.iter().map(|m| tensorcore::cosine_sim(&f, m)).collect::<Result<Vec<_>, _>>()?;
            Ok(argmax(&sims))
        })
        .collect::<Result<Vec<_>, TensorError>>()?;
    let hp = HyperParams { eta: 0.0, gamma: 0.0, ..HyperParams::default() };
    run.report(Method::NearestClassMean, predictions, &hp, (0.0, 1.0))
}

/// Source report, one report per shift, then the mean over shifted targets
/// (omitted when `shifts` is empty).
pub fn shift_sweep(
    pack: &FeaturePack,
    state: &TrainState,
    shifts: &[ShiftSpec],
    hp: &HyperParams,
) -> Result<Vec<EvalReport>, EvalError> {
    let mut source = evaluate(pack, state, hp)?;
    source.role = ReportRole::Source;
    let mut reports = vec![source];
    for shift in shifts {
        let shifted = domain_shift(pack, shift)?;
        let mut r = evaluate(&shifted, state, hp)?;
        r.pack_hash = reports[0].pack_hash.clone();
        r.shift = Some(*shift);
        r.role = ReportRole::Target;
        reports.push(r);
    }
    if !shifts.is_empty() {
        let targets = &reports[1..];
        let n = targets.len() as f64;
        let mut avg = targets[0].clone();
        avg.overall_accuracy = targets.iter().map(|r| r.overall_accuracy).sum::<f64>() / n;
        avg.per_class_accuracy = (0..pack.classes())
            .map(|c| {
                let vals: Vec<f64> = targets.iter().filter_map(|r| r.per_class_accuracy[c]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        avg.correct = targets.iter().map(|r| r.correct).sum();
        avg.total = targets.iter().map(|r| r.total).sum();
        avg.wall_seconds = targets.iter().map(|r| r.wall_seconds).sum();
        avg.shift = None;
        avg.role = ReportRole::TargetAverage;
        avg.predictions.clear();
        reports.push(avg);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, SynthSpec};

    fn pack(noise: f64) -> FeaturePack {
        gen_synthetic(&SynthSpec { classes: 4, shots: 2, channels: 8, text_channels: 8, noise_sigma: noise, queries_per_class: 5, seed: 11, ..SynthSpec::default() })
            .unwrap()
    }

    fn untrained() -> TrainState {
        TrainState::initial(&HyperParams::default())
    }

    #[test]
    fn eta_zero_matches_clip_baseline() {
        let p = pack(0.5);
        let hp = HyperParams { eta: 0.0, ..HyperParams::default() };
        let a = evaluate(&p, &untrained(), &hp).unwrap();
        let b = baseline_clip_zero_shot(&p).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.overall_accuracy, b.overall_accuracy);
    }

    #[test]
    fn zero_noise_is_perfect() {
        let p = pack(0.0);
        assert_eq!(evaluate(&p, &untrained(), &HyperParams::default()).unwrap().overall_accuracy, 1.0);
        assert_eq!(baseline_nearest_class_mean(&p).unwrap().overall_accuracy, 1.0);
    }

    #[test]
    fn per_class_weighted_mean_is_overall() {
        let p = pack(0.8);
        let r = evaluate(&p, &untrained(), &HyperParams::default()).unwrap();
        let counts = [5.0; 4];
        let weighted: f64 = r.per_class_accuracy.iter().zip(counts).map(|(a, n)| a.unwrap() * n).sum::<f64>() / 20.0;
        assert!((weighted - r.overall_accuracy).abs() < 1e-12);
        assert_eq!(r.overall_accuracy, r.correct as f64 / r.total as f64);
    }

    #[test]
    fn query_order_does_not_change_accuracy() {
        let p = pack(0.8);
        let mut q = p.clone();
        q.queries.reverse();
        let a = evaluate(&p, &untrained(), &HyperParams::default()).unwrap();
        let b = evaluate(&q, &untrained(), &HyperParams::default()).unwrap();
        assert_eq!(a.overall_accuracy, b.overall_accuracy);
        assert_eq!(a.per_class_accuracy, b.per_class_accuracy);
    }

    #[test]
    fn errors() {
        let mut p = pack(0.1);
        p.queries.retain(|q| q.split == Split::Train);
        assert!(matches!(evaluate(&p, &untrained(), &HyperParams::default()), Err(EvalError::NoTestSplit(Split::Test))));
        let one = gen_synthetic(&SynthSpec { classes: 1, ..SynthSpec::default() }).unwrap();
        assert!(matches!(baseline_nearest_class_mean(&one), Err(EvalError::TooFewClasses(1))));
    }

    #[test]
    fn sweep_structure() {
        let p = pack(0.5);
        let hp = HyperParams::default();
        let only = shift_sweep(&p, &untrained(), &[], &hp).unwrap();
        assert_eq!(only.len(), 1);
        assert_eq!(only[0].role, ReportRole::Source);
        let reports = shift_sweep(&p, &untrained(), &[ShiftSpec::identity(), ShiftSpec { rotation_strength: 0.3, noise_add: 0.1, seed: 2 }], &hp).unwrap();
        assert_eq!(reports.len(), 4);
        assert_eq!(reports[1].predictions, reports[0].predictions);
        assert_eq!(reports[1].overall_accuracy, reports[0].overall_accuracy);
        let mean = (reports[1].overall_accuracy + reports[2].overall_accuracy) / 2.0;
        assert_eq!(reports[3].overall_accuracy, mean);
        assert_eq!(reports[3].role, ReportRole::TargetAverage);
    }

    #[test]
    fn report_json_fields() {
        let r = evaluate(&pack(0.5), &untrained(), &HyperParams::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["pack_hash", "method", "shots", "eta", "gamma", "mu", "epsilon", "delta", "overall_accuracy", "per_class_accuracy", "split", "shift", "wall_seconds"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["method"], "fpl");
        assert_eq!(v["split"], "test");
        assert!(v["shift"].is_null());
        assert_eq!(v["pack_hash"].as_str().unwrap().len(), 64);
    }
}
