//! Ridge-regression reconstruction of a query feature map from a class's
//! pooled support features.
//!
//! For a query map `M` (`HW × C`) and a class pool `F` (`NHW × C`) the
//! reconstruction is `M Fᵀ (F Fᵀ + δI)⁻¹ F`. By the push-through identity
//! this equals `M (FᵀF + δI)⁻¹ FᵀF`, which only needs a `C × C` solve. The
//! cheaper of the two is chosen per pool ([`GramForm::auto`]).
//!
//! The reconstruction distance is `‖M − M̄‖² / HW`, and since `δ = e^μ` is
//! learned its derivative with respect to `μ` is returned alongside it.

use rayon::prelude::*;
use thiserror::Error;

use crate::tensorcore::{self, gemm_into, Cholesky, MatRef, Matrix, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class {0} has no support feature maps")]
    EmptyPool(usize),
    #[error("ridge penalty must be positive and finite, got {0}")]
    BadDelta(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// An `H × W × C` feature grid stored as an `HW × C` matrix whose rows are
/// locations in row-major `(h, w)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    values: Matrix,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, values: Matrix) -> Result<Self, ProjectionError> {
        if height == 0 || width == 0 || values.cols() == 0 {
            return Err(ProjectionError::ShapeMismatch(format!(
                "feature map dims must be positive, got {height}x{width}x{}",
                values.cols()
            )));
        }
        if values.rows() != height * width {
            return Err(ProjectionError::ShapeMismatch(format!(
                "{height}x{width} map needs {} rows, got {}",
                height * width,
                values.rows()
            )));
        }
        Ok(FeatureMap { height, width, values })
    }

    /// A `1 × 1` map holding a single feature vector.
    pub fn from_vector(v: &[f64]) -> Result<Self, ProjectionError> {
        FeatureMap::new(1, 1, Matrix::from_vec(1, v.len(), v.to_vec())?)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels())
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    /// L2-normalises every location vector. Fails on an all-zero location.
    pub fn normalize_locations(&mut self) -> Result<(), ProjectionError> {
        for r in 0..self.values.rows() {
            tensorcore::normalize_in_place(self.values.row_mut(r))?;
        }
        Ok(())
    }

    /// Mean over locations, a `C`-vector.
    pub fn mean_pool(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.channels()];
        for r in 0..self.values.rows() {
            for (o, v) in out.iter_mut().zip(self.values.row(r)) {
                *o += v;
            }
        }
        let n = self.locations() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// The stacked support features `F_d` of one class with a cached `F_dᵀF_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypePool {
    class_id: usize,
    shots: usize,
    locations: usize,
    pool: Matrix,
    gram: Matrix,
}

/// Concatenates all locations of all support maps (support order, then
/// location order) into one pool.
pub fn build_pool(class_id: usize, support: &[FeatureMap]) -> Result<ClassPrototypePool, ProjectionError> {
    let first = support.first().ok_or(ProjectionError::EmptyPool(class_id))?;
    let dims = first.dims();
    if let Some(bad) = support.iter().find(|m| m.dims() != dims) {
        return Err(ProjectionError::ShapeMismatch(format!(
            "class {class_id}: support map {:?} disagrees with {:?}",
            bad.dims(),
            dims
        )));
    }
    let pool = Matrix::vstack(dims.2, support.iter().map(|m| &m.values))?;
    let gram = pool.gram();
    Ok(ClassPrototypePool { class_id, shots: support.len(), locations: first.locations(), pool, gram })
}

impl ClassPrototypePool {
    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn channels(&self) -> usize {
        self.pool.cols()
    }

    pub fn pool(&self) -> &Matrix {
        &self.pool
    }

    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    /// The pool with one support map's rows removed. The Gram matrix is
    /// downdated rather than rebuilt.
    pub fn without_shot(&self, shot: usize) -> Result<ClassPrototypePool, ProjectionError> {
        if shot >= self.shots {
            return Err(ProjectionError::ShapeMismatch(format!(
                "class {} has {} shots, cannot drop shot {shot}",
                self.class_id, self.shots
            )));
        }
        if self.shots == 1 {
            return Err(ProjectionError::EmptyPool(self.class_id));
        }
        let (start, end) = (shot * self.locations, (shot + 1) * self.locations);
        let dropped = self.pool.row_block(start, end);
        let mut gram = self.gram.clone();
        gram.axpy(-1.0, &dropped.gram())?;
        gram.symmetrize();
        let head = self.pool.row_block(0, start);
        let tail = self.pool.row_block(end, self.pool.rows());
        let pool = Matrix::vstack(self.channels(), [&head, &tail])?;
        Ok(ClassPrototypePool {
            class_id: self.class_id,
            shots: self.shots - 1,
            locations: self.locations,
            pool,
            gram,
        })
    }
}

/// Which Gram matrix the ridge solve is carried out with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramForm {
    /// `(FᵀF + δI)⁻¹ FᵀF`, a `C × C` system.
    Channel,
    /// `Fᵀ (FFᵀ + δI)⁻¹ F`, an `NHW × NHW` system.
    Sample,
}

impl GramForm {
    pub fn auto(channels: usize, pool_rows: usize) -> Self {
        if channels <= pool_rows {
            GramForm::Channel
        } else {
            GramForm::Sample
        }
    }
}

/// Query-independent part of the reconstruction for one pool at one `δ`.
///
/// Writing `A(δ)` for the `C × C` operator with `M̄ = M A`, the projector
/// also holds what is needed for `∂M̄/∂δ = −M (FᵀF + δI)⁻¹ A`.
#[derive(Debug, Clone)]
pub struct Projector {
    delta: f64,
    kind: ProjectorKind,
}

#[derive(Debug, Clone)]
enum ProjectorKind {
    Channel {
        /// `(G + δI)⁻¹ G`
        op: Matrix,
        /// `(G + δI)⁻¹ op`
        dop: Matrix,
    },
    Sample {
        pool: Matrix,
        /// `(FFᵀ + δI)⁻¹ F`
        coef: Matrix,
        /// `(FFᵀ + δI)⁻¹ coef`
        dcoef: Matrix,
    },
}

impl Projector {
    pub fn prepare(pool: &ClassPrototypePool, delta: f64) -> Result<Self, ProjectionError> {
        Projector::prepare_with(pool, delta, GramForm::auto(pool.channels(), pool.pool.rows()))
    }

    pub fn prepare_with(pool: &ClassPrototypePool, delta: f64, form: GramForm) -> Result<Self, ProjectionError> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(ProjectionError::BadDelta(delta));
        }
        let kind = match form {
            GramForm::Channel => {
                let mut k = pool.gram.clone();
                k.add_diag(delta);
                let chol = Cholesky::factor(&k)?;
                let op = chol.solve(&pool.gram)?;
                let dop = chol.solve(&op)?;
                ProjectorKind::Channel { op, dop }
            }
            GramForm::Sample => {
                let mut k = pool.pool.outer_gram();
                k.add_diag(delta);
                let chol = Cholesky::factor(&k)?;
                let coef = chol.solve(&pool.pool)?;
                let dcoef = chol.solve(&coef)?;
                ProjectorKind::Sample { pool: pool.pool.clone(), coef, dcoef }
            }
        };
        Ok(Projector { delta, kind })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn channels(&self) -> usize {
        match &self.kind {
            ProjectorKind::Channel { op, .. } => op.cols(),
            ProjectorKind::Sample { pool, .. } => pool.cols(),
        }
    }

    pub fn form(&self) -> GramForm {
        match self.kind {
            ProjectorKind::Channel { .. } => GramForm::Channel,
            ProjectorKind::Sample { .. } => GramForm::Sample,
        }
    }

    /// Writes `M̄` into `recon` and, when given, `∂M̄/∂δ` into `drecon`.
    /// Both buffers are row-major `HW × C`.
    pub fn apply_into(
        &self,
        query: &Matrix,
        recon: &mut [f64],
        drecon: Option<&mut [f64]>,
    ) -> Result<(), ProjectionError> {
        let c = self.channels();
        if query.cols() != c {
            return Err(ProjectionError::ShapeMismatch(format!(
                "query has {} channels, pool has {c}",
                query.cols()
            )));
        }
        let p = query.rows();
        match &self.kind {
            ProjectorKind::Channel { op, dop } => {
                gemm_into(1.0, MatRef::new(query), MatRef::new(op), 0.0, recon, p, c);
                if let Some(d) = drecon {
                    gemm_into(-1.0, MatRef::new(query), MatRef::new(dop), 0.0, d, p, c);
                }
            }
            ProjectorKind::Sample { pool, coef, dcoef } => {
                let cross = query.matmul_t(pool)?;
                gemm_into(1.0, MatRef::new(&cross), MatRef::new(coef), 0.0, recon, p, c);
                if let Some(d) = drecon {
                    gemm_into(-1.0, MatRef::new(&cross), MatRef::new(dcoef), 0.0, d, p, c);
                }
            }
        }
        Ok(())
    }
}

/// Distance `‖M − M̄‖²/HW` and its `δ`-derivative from a reconstruction and
/// its `δ`-derivative (flat row-major buffers).
pub(crate) fn distance_terms(query: &[f64], recon: &[f64], drecon: &[f64], locations: usize) -> (f64, f64) {
    let mut sq = 0.0;
    let mut cross = 0.0;
    for ((m, r), d) in query.iter().zip(recon).zip(drecon) {
        let diff = m - r;
        sq += diff * diff;
        cross += diff * d;
    }
    let hw = locations as f64;
    (sq / hw, -2.0 * cross / hw)
}

/// Closed-form reconstruction of one query by one class.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub reconstructed: Matrix,
    /// `‖M − M̄‖² / HW`
    pub distance: f64,
    /// `∂distance/∂μ` with `δ = e^μ`.
    pub ddistance_dmu: f64,
}

pub fn reconstruct(query: &FeatureMap, pool: &ClassPrototypePool, delta: f64) -> Result<Reconstruction, ProjectionError> {
    reconstruct_with(query, &Projector::prepare(pool, delta)?)
}

pub fn reconstruct_with_form(
    query: &FeatureMap,
    pool: &ClassPrototypePool,
    delta: f64,
    form: GramForm,
) -> Result<Reconstruction, ProjectionError> {
    reconstruct_with(query, &Projector::prepare_with(pool, delta, form)?)
}

pub fn reconstruct_with(query: &FeatureMap, projector: &Projector) -> Result<Reconstruction, ProjectionError> {
    let (p, c) = query.values.shape();
    let mut recon = Matrix::zeros(p, c);
    let mut drecon = vec![0.0; p * c];
    projector.apply_into(&query.values, recon.as_mut_slice(), Some(&mut drecon))?;
    let (distance, dddelta) = distance_terms(query.values.as_slice(), recon.as_slice(), &drecon, p);
    Ok(Reconstruction { reconstructed: recon, distance, ddistance_dmu: projector.delta * dddelta })
}

/// Reconstructs the query with every class pool, in class order.
pub fn reconstruct_all(
    query: &FeatureMap,
    pools: &[ClassPrototypePool],
    delta: f64,
) -> Result<Vec<Reconstruction>, ProjectionError> {
    pools.par_iter().map(|pool| reconstruct(query, pool, delta)).collect()
}
