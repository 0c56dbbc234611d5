//! Independent oracles and helpers shared by the integration tests.
#![allow(dead_code)]

use fpl_core::classifier::{total_loss_and_grads, LabeledQuery, LossAndGrads, PoNorm};
use fpl_core::{build_pool, ClassPrototypePool, FeatureMap, FplParams, HyperParams, Matrix, TextFeatureBank};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, gaussian(rng, rows * cols)).unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, normalize: bool) -> FeatureMap {
    let mut m = FeatureMap::new(h, w, random_matrix(rng, h * w, c)).unwrap();
    if normalize {
        m.normalize_locations().unwrap();
    }
    m
}

/// Gaussian elimination with partial pivoting on a dense square system.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Minimiser of `‖M − θF‖² + δ‖θ‖²` over `θ` (P×R), returned as `θF`.
///
/// Assembles the stacked least-squares design matrix for `vec(θ)` entry by
/// entry, forms `AᵀA x = Aᵀb` and solves it by elimination.
pub fn brute_force_reconstruction(m: &Matrix, f: &Matrix, delta: f64) -> Matrix {
    let (p, c) = m.shape();
    let r = f.rows();
    let unknowns = p * r;
    let idx = |row: usize, k: usize| row * r + k;
    let mut design: Vec<(Vec<f64>, f64)> = Vec::new();
    // data-fit rows: M[i][j] ≈ Σ_k θ[i][k] F[k][j]
    for i in 0..p {
        for j in 0..c {
            let mut row = vec![0.0; unknowns];
            for k in 0..r {
                row[idx(i, k)] = f[(k, j)];
            }
            design.push((row, m[(i, j)]));
        }
    }
    // ridge rows: √δ θ[i][k] ≈ 0
    for i in 0..p {
        for k in 0..r {
            let mut row = vec![0.0; unknowns];
            row[idx(i, k)] = delta.sqrt();
            design.push((row, 0.0));
        }
    }
    let mut ata = vec![vec![0.0; unknowns]; unknowns];
    let mut atb = vec![0.0; unknowns];
    for (row, target) in &design {
        for a in 0..unknowns {
            if row[a] == 0.0 {
                continue;
            }
            atb[a] += row[a] * target;
            for b in 0..unknowns {
                ata[a][b] += row[a] * row[b];
            }
        }
    }
    let theta = gauss_solve(ata, atb);
    let mut out = vec![0.0; p * c];
    for i in 0..p {
        for j in 0..c {
            out[i * c + j] = (0..r).map(|k| theta[idx(i, k)] * f[(k, j)]).sum();
        }
    }
    Matrix::from_vec(p, c, out).unwrap()
}

pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    let base: f64 = b.as_slice().iter().map(|y| y * y).sum();
    (diff / base.max(f64::MIN_POSITIVE)).sqrt()
}

/// `|a − b| ≤ tol · max(|a|, |b|)`, with an absolute floor for values at
/// the level of finite-difference round-off.
pub fn close_rel(a: f64, b: f64, tol: f64, floor: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()) + floor
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard error of the mean.
pub fn std_err(v: &[f64]) -> f64 {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0);
    (var / v.len() as f64).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

/// A random episode: pools, text bank, and owned query data.
pub struct Setup {
    pub pools: Vec<ClassPrototypePool>,
    pub support: Vec<Vec<FeatureMap>>,
    pub bank: TextFeatureBank,
    pub queries: Vec<(FeatureMap, Vec<f64>, usize, Option<usize>)>,
}

impl Setup {
    pub fn new(seed: u64, classes: usize, shots: usize, with_support_queries: bool) -> Self {
        let (h, w, c, ct) = (2, 2, 8, 6);
        let mut r = rng(seed);
        let support: Vec<Vec<FeatureMap>> =
            (0..classes).map(|_| (0..shots).map(|_| random_map(&mut r, h, w, c, true)).collect()).collect();
        let pools = support.iter().enumerate().map(|(d, s)| build_pool(d, s).unwrap()).collect();
        let text = random_matrix(&mut r, classes, ct);
        let bank = TextFeatureBank::new((0..classes).map(|d| format!("c{d}")).collect(), "a photo of a {}.", text, 0.5)
            .unwrap();
        let mut queries = Vec::new();
        for i in 0..3 {
            queries.push((random_map(&mut r, h, w, c, true), gaussian(&mut r, ct), i % classes, None));
        }
        if with_support_queries {
            for d in 0..classes {
                let k = d % shots;
                queries.push((support[d][k].clone(), gaussian(&mut r, ct), d, Some(k)));
            }
        }
        Setup { pools, support, bank, queries }
    }

    pub fn batch(&self) -> Vec<LabeledQuery<'_>> {
        self.queries
            .iter()
            .map(|(m, g, y, k)| LabeledQuery { map: m, image_feature: g, label: *y, support_shot: *k })
            .collect()
    }

    pub fn eval(&self, params: &FplParams, hp: &HyperParams) -> LossAndGrads {
        total_loss_and_grads(&self.batch(), &self.pools, &self.bank, params, hp).unwrap()
    }
}

/// Central differences of the loss in μ and ε.
pub fn finite_differences(s: &Setup, params: FplParams, hp: &HyperParams, h: f64) -> (f64, f64) {
    let loss = |mu: f64, epsilon: f64| s.eval(&FplParams { mu, epsilon }, hp).loss;
    let dmu = (loss(params.mu + h, params.epsilon) - loss(params.mu - h, params.epsilon)) / (2.0 * h);
    let deps = (loss(params.mu, params.epsilon + h) - loss(params.mu, params.epsilon - h)) / (2.0 * h);
    (dmu, deps)
}

pub fn check_gradients(seed: u64, classes: usize, shots: usize, gamma: f64, eta: f64, params: FplParams, norm: PoNorm) -> Result<(), String> {
    let s = Setup::new(seed, classes, shots, true);
    let hp = HyperParams { gamma, eta, po_norm: norm, ..HyperParams::default() };
    let out = s.eval(&params, &hp);
    let (fd_mu, fd_eps) = finite_differences(&s, params, &hp, 1e-5);
    let ok_mu = close_rel(out.dmu, fd_mu, 1e-4, 1e-9);
    let ok_eps = close_rel(out.deps, fd_eps, 1e-4, 1e-9);
    if ok_mu && ok_eps {
        Ok(())
    } else {
        Err(format!(
            "seed {seed} D {classes} N {shots} γ {gamma} η {eta} {params:?}: dμ {} vs {fd_mu}, dε {} vs {fd_eps}",
            out.dmu, out.deps
        ))
    }
}

/// Re-encodes an `FPK1` file without class `class`'s support blob, keeping
/// the manifest's class list intact.
pub fn drop_support_blob(bytes: &[u8], class: usize) -> Vec<u8> {
    let mut m = fpl_core::dataio::read_manifest(bytes).unwrap();
    let old_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut body = bytes[16 + old_len..].to_vec();
    let idx = m.blobs.iter().position(|b| b.class_id == Some(class)).unwrap();
    let gone = m.blobs.remove(idx);
    let rel = gone.offset as usize - 16 - old_len;
    body.drain(rel..rel + gone.byte_len as usize);
    let mut json_len = 0;
    let json = loop {
        let mut cursor = (16 + json_len) as u64;
        for b in &mut m.blobs {
            b.offset = cursor;
            cursor += b.byte_len;
        }
        let json = serde_json::to_vec(&m).unwrap();
        if json.len() == json_len {
            break json;
        }
        json_len = json.len();
    };
    let mut file = b"FPK1".to_vec();
    file.extend_from_slice(&1u32.to_le_bytes());
    file.extend_from_slice(&(json.len() as u64).to_le_bytes());
    file.extend_from_slice(&json);
    file.extend_from_slice(&body);
    file
}
