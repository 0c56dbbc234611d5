//! Class probabilities, fusion with zero-shot scores, and the training loss.
//!
//! The projection branch turns reconstruction distances into probabilities
//! with `softmax(−ε · distance)`. The zero-shot branch is a softmax over
//! image/text cosine similarities divided by `τ`. The two are mixed as
//! `(p_clip + η p_r) / (1 + η)`.
//!
//! The training loss is mean cross-entropy of the fused prediction plus
//! `γ` times the projection-orthogonality penalty (mean absolute cosine
//! between different classes' reconstructions). Its partial derivatives
//! with respect to `μ` and `ε` are computed analytically in
//! [`total_loss_and_grads`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::projection::{
    distance_terms, ClassPrototypePool, FeatureMap, ProjectionError, Projector, Reconstruction,
};
use crate::tensorcore::{self, gemm_into, MatRef, Matrix, TensorError, ZERO_NORM};

/// Lower bound applied to `ε` after every optimizer step.
pub const EPSILON_FLOOR: f64 = 1e-6;

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("fusion weight must be non-negative, got {0}")]
    NegativeEta(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("classification needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("reconstruction for class {0} is numerically zero")]
    DegenerateReconstruction(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The two learned scalars. `δ = e^μ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FplParams {
    pub mu: f64,
    pub epsilon: f64,
}

impl Default for FplParams {
    fn default() -> Self {
        FplParams { mu: 0.0, epsilon: 1.0 }
    }
}

impl FplParams {
    /// Number of trainable scalars in the model.
    pub const TRAINABLE: usize = 2;

    pub fn delta(&self) -> f64 {
        self.mu.exp()
    }

    pub fn to_array(self) -> [f64; Self::TRAINABLE] {
        [self.mu, self.epsilon]
    }

    pub fn from_array([mu, epsilon]: [f64; Self::TRAINABLE]) -> Self {
        FplParams { mu, epsilon }
    }
}

/// L2-normalised text features, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureBank {
    class_names: Vec<String>,
    prompt_template: String,
    features: Matrix,
    tau: f64,
}

impl TextFeatureBank {
    /// Rows of `features` are normalised on construction.
    pub fn new(
        class_names: Vec<String>,
        prompt_template: impl Into<String>,
        mut features: Matrix,
        tau: f64,
    ) -> Result<Self, ClassifierError> {
        if class_names.len() != features.rows() {
            return Err(ClassifierError::ShapeMismatch(format!(
                "{} class names for {} text features",
                class_names.len(),
                features.rows()
            )));
        }
        if class_names.len() < 2 {
            return Err(ClassifierError::TooFewClasses(class_names.len()));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(ClassifierError::ShapeMismatch(format!("temperature must be positive, got {tau}")));
        }
        for r in 0..features.rows() {
            tensorcore::normalize_in_place(features.row_mut(r))?;
        }
        Ok(TextFeatureBank { class_names, prompt_template: prompt_template.into(), features, tau })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn prompt_template(&self) -> &str {
        &self.prompt_template
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// How the pairwise sum in the orthogonality penalty is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoNorm {
    /// `1/(D(D−1))` times the sum over `i < j`; at most 0.5.
    #[default]
    Literal,
    /// `2/(D(D−1))` times the sum over `i < j`, i.e. a true pair mean.
    PairMean,
}

impl PoNorm {
    fn factor(self, classes: usize) -> f64 {
        let pairs = (classes * (classes - 1)) as f64;
        match self {
            PoNorm::Literal => 1.0 / pairs,
            PoNorm::PairMean => 2.0 / pairs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Fusion weight `η`.
    pub eta: f64,
    /// Orthogonality penalty weight `γ`.
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub po_norm: PoNorm,
    /// Drop a training query's own rows from its class pool.
    pub leave_self_out: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            eta: 1.0,
            gamma: 0.1,
            lr: 1e-3,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            weight_decay: 0.0,
            po_norm: PoNorm::Literal,
            leave_self_out: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub p_clip: Vec<f64>,
    pub p_r: Vec<f64>,
    pub p_total: Vec<f64>,
    pub argmax: usize,
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// `softmax(−ε · distance)`.
pub fn scores_from_distances(distances: &[f64], epsilon: f64) -> Vec<f64> {
    let logits: Vec<f64> = distances.iter().map(|d| -epsilon * d).collect();
    softmax(&logits)
}

pub fn projection_scores(reconstructions: &[Reconstruction], epsilon: f64) -> Vec<f64> {
    let d: Vec<f64> = reconstructions.iter().map(|r| r.distance).collect();
    scores_from_distances(&d, epsilon)
}

/// Zero-shot probabilities from cosine similarity to each class's text feature.
pub fn clip_scores(image_feature: &[f64], bank: &TextFeatureBank) -> Result<Vec<f64>, ClassifierError> {
    let f = &bank.features;
    if image_feature.len() != f.cols() {
        return Err(ClassifierError::ShapeMismatch(format!(
            "image feature has {} dims, text features {}",
            image_feature.len(),
            f.cols()
        )));
    }
    let n = tensorcore::norm(image_feature);
    if n < ZERO_NORM {
        return Err(TensorError::ZeroVector.into());
    }
    // text rows are unit norm
    let logits: Vec<f64> =
        (0..f.rows()).map(|d| tensorcore::dot(f.row(d), image_feature) / n / bank.tau).collect();
    Ok(softmax(&logits))
}

/// `(p_clip + η p_r) / (1 + η)`.
pub fn fuse(p_clip: &[f64], p_r: &[f64], eta: f64) -> Result<Vec<f64>, ClassifierError> {
    if eta < 0.0 || eta.is_nan() {
        return Err(ClassifierError::NegativeEta(eta));
    }
    if p_clip.len() != p_r.len() {
        return Err(ClassifierError::ShapeMismatch(format!(
            "fusing {} and {} probabilities",
            p_clip.len(),
            p_r.len()
        )));
    }
    if eta == 0.0 {
        return Ok(p_clip.to_vec());
    }
    let z = 1.0 + eta;
    Ok(p_clip.iter().zip(p_r).map(|(c, r)| (c + eta * r) / z).collect())
}

pub fn ce_loss(p_total: &[f64], label: usize) -> Result<f64, ClassifierError> {
    let p = p_total
        .get(label)
        .ok_or(ClassifierError::LabelOutOfRange { label, classes: p_total.len() })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

pub fn po_loss(reconstructions: &[Reconstruction]) -> Result<f64, ClassifierError> {
    po_loss_with(reconstructions, PoNorm::Literal)
}

pub fn po_loss_with(reconstructions: &[Reconstruction], norm: PoNorm) -> Result<f64, ClassifierError> {
    let d = reconstructions.len();
    if d < 2 {
        return Err(ClassifierError::TooFewClasses(d));
    }
    let flat: Vec<&[f64]> = reconstructions.iter().map(|r| r.reconstructed.as_slice()).collect();
    let norms: Vec<f64> = flat.iter().map(|v| tensorcore::norm(v)).collect();
    if let Some(i) = norms.iter().position(|n| *n < ZERO_NORM) {
        return Err(ClassifierError::DegenerateReconstruction(i));
    }
    let mut sum = 0.0;
    for i in 0..d {
        for j in (i + 1)..d {
            if flat[i].len() != flat[j].len() {
                return Err(ClassifierError::ShapeMismatch("reconstructions differ in size".into()));
            }
            sum += (tensorcore::dot(flat[i], flat[j]) / (norms[i] * norms[j])).abs();
        }
    }
    Ok(norm.factor(d) * sum)
}

/// One training example. `support_shot` marks a query that is itself
/// support map number `k` of its class, for leave-self-out pooling.
#[derive(Debug, Clone, Copy)]
pub struct LabeledQuery<'a> {
    pub map: &'a FeatureMap,
    pub image_feature: &'a [f64],
    pub label: usize,
    pub support_shot: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrads {
    pub loss: f64,
    pub dmu: f64,
    pub deps: f64,
    pub mean_ce: f64,
    /// `None` when `γ = 0` and the penalty was not evaluated.
    pub mean_po: Option<f64>,
    /// Queries whose fused argmax equals the label.
    pub correct: usize,
}

/// Per-query loss terms; derivatives are with respect to `δ` and `ε`.
#[derive(Debug, Clone, Copy)]
struct QueryTerms {
    ce: f64,
    po: f64,
    dce_ddelta: f64,
    dce_deps: f64,
    dpo_ddelta: f64,
    correct: bool,
}

/// Projectors for every class at `δ = e^μ`.
pub fn prepare_projectors(pools: &[ClassPrototypePool], delta: f64) -> Result<Vec<Projector>, ClassifierError> {
    Ok(pools.par_iter().map(|p| Projector::prepare(p, delta)).collect::<Result<Vec<_>, _>>()?)
}

/// Fused prediction for one query given prepared projectors.
pub fn predict(
    map: &FeatureMap,
    image_feature: &[f64],
    projectors: &[Projector],
    bank: &TextFeatureBank,
    params: &FplParams,
    eta: f64,
) -> Result<Prediction, ClassifierError> {
    let p_clip = clip_scores(image_feature, bank)?;
    let (p_r, p_total) = if eta == 0.0 {
        (vec![1.0 / projectors.len() as f64; projectors.len()], p_clip.clone())
    } else {
        let (p, c) = map.values().shape();
        let mut recon = vec![0.0; p * c];
        let mut dist = Vec::with_capacity(projectors.len());
        for proj in projectors {
            proj.apply_into(map.values(), &mut recon, None)?;
            let sq: f64 = map.values().as_slice().iter().zip(&recon).map(|(m, r)| (m - r) * (m - r)).sum();
            dist.push(sq / p as f64);
        }
        let p_r = scores_from_distances(&dist, params.epsilon);
        let p_total = fuse(&p_clip, &p_r, eta)?;
        (p_r, p_total)
    };
    let argmax = argmax(&p_total);
    Ok(Prediction { p_clip, p_r, p_total, argmax })
}

/// Mean loss over the batch and its analytic partial derivatives.
///
/// `loss = mean(CE) + γ · mean(PO)`; the penalty depends on `μ` only.
pub fn total_loss_and_grads(
    batch: &[LabeledQuery<'_>],
    pools: &[ClassPrototypePool],
    bank: &TextFeatureBank,
    params: &FplParams,
    hp: &HyperParams,
) -> Result<LossAndGrads, ClassifierError> {
    if batch.is_empty() {
        return Err(ClassifierError::EmptyBatch);
    }
    if pools.len() != bank.classes() {
        return Err(ClassifierError::ShapeMismatch(format!(
            "{} pools for {} classes",
            pools.len(),
            bank.classes()
        )));
    }
    if hp.eta < 0.0 || hp.eta.is_nan() {
        return Err(ClassifierError::NegativeEta(hp.eta));
    }
    let delta = params.delta();
    let needs_projection = hp.eta > 0.0 || hp.gamma != 0.0;
    let projectors = if needs_projection { prepare_projectors(pools, delta)? } else { Vec::new() };

    let terms: Vec<QueryTerms> = batch
        .par_iter()
        .map(|q| query_terms(q, pools, &projectors, bank, params, hp))
        .collect::<Result<_, _>>()?;

    // fixed-order reduction
    let n = terms.len() as f64;
    let mut acc = [0.0f64; 5];
    let mut correct = 0;
    for t in &terms {
        acc[0] += t.ce;
        acc[1] += t.po;
        acc[2] += t.dce_ddelta;
        acc[3] += t.dce_deps;
        acc[4] += t.dpo_ddelta;
        correct += t.correct as usize;
    }
    let mean_ce = acc[0] / n;
    let mean_po = acc[1] / n;
    let gamma = hp.gamma;
    let ddelta = (acc[2] + gamma * acc[4]) / n;
    Ok(LossAndGrads {
        loss: mean_ce + gamma * mean_po,
        dmu: delta * ddelta,
        deps: acc[3] / n,
        mean_ce,
        mean_po: (gamma != 0.0).then_some(mean_po),
        correct,
    })
}

fn query_terms(
    q: &LabeledQuery<'_>,
    pools: &[ClassPrototypePool],
    projectors: &[Projector],
    bank: &TextFeatureBank,
    params: &FplParams,
    hp: &HyperParams,
) -> Result<QueryTerms, ClassifierError> {
    let classes = bank.classes();
    if q.label >= classes {
        return Err(ClassifierError::LabelOutOfRange { label: q.label, classes });
    }
    let p_clip = clip_scores(q.image_feature, bank)?;
    if projectors.is_empty() {
        let ce = ce_loss(&p_clip, q.label)?;
        return Ok(QueryTerms {
            ce,
            po: 0.0,
            dce_ddelta: 0.0,
            dce_deps: 0.0,
            dpo_ddelta: 0.0,
            correct: argmax(&p_clip) == q.label,
        });
    }

    let m = q.map.values();
    let (p, c) = m.shape();
    let len = p * c;
    let own = match q.support_shot {
        Some(k) if hp.leave_self_out && pools[q.label].shots() > 1 => {
            Some(Projector::prepare(&pools[q.label].without_shot(k)?, params.delta())?)
        }
        _ => None,
    };

    let mut recon = vec![0.0; classes * len];
    let mut drecon = vec![0.0; classes * len];
    let mut dist = vec![0.0; classes];
    let mut ddist = vec![0.0; classes];
    for d in 0..classes {
        let proj = match (&own, d == q.label) {
            (Some(o), true) => o,
            _ => &projectors[d],
        };
        let r = &mut recon[d * len..(d + 1) * len];
        let dr = &mut drecon[d * len..(d + 1) * len];
        proj.apply_into(m, r, Some(dr))?;
        (dist[d], ddist[d]) = distance_terms(m.as_slice(), r, dr, p);
    }

    let eps = params.epsilon;
    let p_r = scores_from_distances(&dist, eps);
    let p_total = fuse(&p_clip, &p_r, hp.eta)?;
    let y = q.label;
    let ce = ce_loss(&p_total, y)?;

    // ∂CE/∂ℓ_d = −(η/(1+η)) (p_r[y]/p_tot[y]) (1[d=y] − p_r[d]), with ℓ_d = −ε dist_d
    let (dce_ddelta, dce_deps) = if p_total[y] > PROB_FLOOR && hp.eta > 0.0 {
        let g = -(hp.eta / (1.0 + hp.eta)) * p_r[y] / p_total[y];
        let mean_dist: f64 = p_r.iter().zip(&dist).map(|(pr, x)| pr * x).sum();
        let mean_ddist: f64 = p_r.iter().zip(&ddist).map(|(pr, x)| pr * x).sum();
        (g * eps * (mean_ddist - ddist[y]), g * (mean_dist - dist[y]))
    } else {
        (0.0, 0.0)
    };

    let (po, dpo_ddelta) = if hp.gamma != 0.0 {
        orthogonality_terms(&recon, &drecon, classes, len, hp.po_norm)?
    } else {
        (0.0, 0.0)
    };

    Ok(QueryTerms { ce, po, dce_ddelta, dce_deps, dpo_ddelta, correct: argmax(&p_total) == y })
}

/// Penalty value and its `δ`-derivative from stacked reconstructions
/// (`classes × len`) and their `δ`-derivatives.
fn orthogonality_terms(
    recon: &[f64],
    drecon: &[f64],
    classes: usize,
    len: usize,
    norm: PoNorm,
) -> Result<(f64, f64), ClassifierError> {
    let r = MatRef::from_slice(recon, classes, len);
    let dr = MatRef::from_slice(drecon, classes, len);
    let mut gram = vec![0.0; classes * classes];
    gemm_into(1.0, r, r.t(), 0.0, &mut gram, classes, classes);
    // cross[i][j] = ⟨∂R_i/∂δ, R_j⟩
    let mut cross = vec![0.0; classes * classes];
    gemm_into(1.0, dr, r.t(), 0.0, &mut cross, classes, classes);

    let norms: Vec<f64> = (0..classes).map(|i| gram[i * classes + i].max(0.0).sqrt()).collect();
    if let Some(i) = norms.iter().position(|n| *n < ZERO_NORM) {
        return Err(ClassifierError::DegenerateReconstruction(i));
    }
    // relative rate of change of each norm
    let dlog: Vec<f64> = (0..classes).map(|i| cross[i * classes + i] / (norms[i] * norms[i])).collect();
    let mut value = 0.0;
    let mut deriv = 0.0;
    for i in 0..classes {
        for j in (i + 1)..classes {
            let nn = norms[i] * norms[j];
            let cos = gram[i * classes + j] / nn;
            value += cos.abs();
            let dcos = (cross[i * classes + j] + cross[j * classes + i]) / nn - cos * (dlog[i] + dlog[j]);
            deriv += sign(cos) * dcos;
        }
    }
    let f = norm.factor(classes);
    Ok((f * value, f * deriv))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
