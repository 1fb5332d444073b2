//! Ridge-regularized self-distillation rounds in the linear model.
//!
//! Round `t` minimizes `(1/n) Σ ‖f(x_i, w) − f(x_i, w_{t−1,0})‖² + λ‖w‖²`.
//! [`closed_form_distill`] evaluates the spectral solution directly;
//! [`ridge_distill_step`] solves the normal equations from the raw design
//! matrix and serves as the iterative oracle.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::spectral::{
    check_len, kron, DesignMatrix, FeatureMap, SpectralDecomposition, SyntheticTask,
};

/// Largest `dp` for which the oracle materializes `[I_p ⊗ Φ]` densely.
pub const DENSE_ORACLE_MAX_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub lambda: f64,
    pub rounds: usize,
    pub n: usize,
}

impl DistillConfig {
    pub fn new(lambda: f64, rounds: usize, n: usize) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Domain(format!(
                "ridge coefficient must be > 0, got {lambda}"
            )));
        }
        if n == 0 {
            return Err(Error::Domain("sample count must be >= 1".into()));
        }
        Ok(Self { lambda, rounds, n })
    }

    pub fn with_rounds(self, rounds: usize) -> Self {
        Self { rounds, ..self }
    }

    fn n_lambda(&self) -> f64 {
        self.n as f64 * self.lambda
    }

    /// Per-round shrinkage `σ² / (σ² + nλ)` of the teacher signal.
    pub fn decay(&self, sigma: f64) -> f64 {
        let s2 = sigma * sigma;
        s2 / (s2 + self.n_lambda())
    }
}

/// `α_{i,t} = (1/σ) (1 / (1 + nλ/σ²))^t`.
pub fn alpha_coefficient(sigma: f64, n: usize, lambda: f64, t: usize) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!(
            "singular value must be > 0, got {sigma}"
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!(
            "ridge coefficient must be > 0, got {lambda}"
        )));
    }
    let ratio = 1.0 / (1.0 + n as f64 * lambda / (sigma * sigma));
    Ok(ratio.powi(t as i32) / sigma)
}

/// Weight after `t` distillation rounds, split along the left singular basis.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub t: usize,
    /// `w_{t,0} ∈ R^{dp}`.
    pub w: DVector<f64>,
    /// `u_iᵀ w_{t,0} = α_{i,t} ỹ_i` for `i < np`.
    pub coeffs: DVector<f64>,
    /// `ỹ = Vᵀ vec[f_0]`.
    pub teacher_signal: DVector<f64>,
    /// `P_r w_{0,0}` when `t = 0`, zero afterwards.
    pub null_part: DVector<f64>,
    /// `P_r w_{0,0}` regardless of `t`.
    pub initial_null: DVector<f64>,
    /// `vec[f_t] = [I_p ⊗ Φ]ᵀ w_{t,0}`.
    pub teacher_outputs: DVector<f64>,
    pub config: DistillConfig,
}

impl DistillState {
    /// `ℬ = ‖P_r w_{0,0}‖²`.
    pub fn null_energy(&self) -> f64 {
        self.initial_null.norm_squared()
    }
}

pub fn closed_form_distill(
    spec: &SpectralDecomposition,
    w00: &DVector<f64>,
    config: &DistillConfig,
) -> Result<DistillState> {
    check_len("initial weight", spec.weight_dim(), w00.len())?;
    check_len("sample count", spec.n(), config.n)?;
    if w00.norm() == 0.0 {
        return Err(Error::ZeroInitialWeight);
    }
    let t = config.rounds;
    let sigma = spec.sigma();
    let initial_span = spec.span_coefficients(w00)?;
    // ỹ_i = (Vᵀ [I_p⊗Φ]ᵀ w00)_i = σ_i u_iᵀ w00
    let teacher_signal = initial_span.component_mul(sigma);

    let coeffs = if t == 0 {
        initial_span
    } else {
        let mut c = DVector::zeros(spec.span_dim());
        for i in 0..spec.span_dim() {
            if sigma[i] > 0.0 {
                c[i] = alpha_coefficient(sigma[i], config.n, config.lambda, t)? * teacher_signal[i];
            }
        }
        c
    };

    let initial_null = spec.null_projection(w00)?;
    let null_part = if t == 0 {
        initial_null.clone()
    } else {
        DVector::zeros(spec.weight_dim())
    };
    let w = spec.from_span_coefficients(&coeffs)? + &null_part;
    let teacher_outputs = spec.from_right_coefficients(&coeffs.component_mul(sigma))?;
    Ok(DistillState {
        t,
        w,
        coeffs,
        teacher_signal,
        null_part,
        initial_null,
        teacher_outputs,
        config: *config,
    })
}

/// `vec[f_t] = V Aᵗ Vᵀ vec[f_0]` with `A_ii = σ_i² / (σ_i² + nλ)`.
pub fn propagate_teacher(
    spec: &SpectralDecomposition,
    f0: &DVector<f64>,
    t: usize,
    config: &DistillConfig,
) -> Result<DVector<f64>> {
    check_len("sample count", spec.n(), config.n)?;
    let mut c = spec.right_coefficients(f0)?;
    if t == 0 {
        return Ok(f0.clone());
    }
    for (ci, &s) in c.iter_mut().zip(spec.sigma().iter()) {
        *ci *= config.decay(s).powi(t as i32);
    }
    spec.from_right_coefficients(&c)
}

/// One ridge round: the minimizer `([I_p⊗Φ][I_p⊗Φ]ᵀ + nλI)⁻¹ [I_p⊗Φ] vec[f]`.
///
/// Solved from the raw design matrix, never from its SVD. For `dp` up to
/// [`DENSE_ORACLE_MAX_DIM`] the lifted matrix is materialized and the
/// `dp×dp` system factored directly; above that each output block is solved
/// through `Φ (ΦᵀΦ + nλI)⁻¹ f_k`.
pub fn ridge_distill_step(
    design: &DesignMatrix,
    p: usize,
    teacher_outputs: &DVector<f64>,
    config: &DistillConfig,
) -> Result<DVector<f64>> {
    let (d, n) = (design.d(), design.n());
    check_len("teacher outputs", n * p, teacher_outputs.len())?;
    check_len("sample count", n, config.n)?;
    let nl = n as f64 * config.lambda;
    if d * p <= DENSE_ORACLE_MAX_DIM {
        let lifted = kron(&DMatrix::identity(p, p), design.phi());
        let system = &lifted * lifted.transpose() + DMatrix::identity(d * p, d * p) * nl;
        let rhs = &lifted * teacher_outputs;
        system
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or(Error::SingularSystem)
    } else {
        let phi = design.phi();
        let gram = phi.tr_mul(phi) + DMatrix::identity(n, n) * nl;
        let chol = gram.cholesky().ok_or(Error::SingularSystem)?;
        let mut w = DVector::zeros(d * p);
        for k in 0..p {
            let alpha = chol.solve(&teacher_outputs.rows(k * n, n).into_owned());
            w.rows_mut(k * d, d).copy_from(&(phi * alpha));
        }
        Ok(w)
    }
}

/// `‖(ZᵀZ + nλI) w − Zᵀ f‖` where `Zᵀ = [I_p ⊗ Φ]`, relative to `‖Zᵀ f‖`.
pub fn normal_equation_residual(
    design: &DesignMatrix,
    p: usize,
    teacher_outputs: &DVector<f64>,
    w: &DVector<f64>,
    config: &DistillConfig,
) -> Result<f64> {
    let nl = design.n() as f64 * config.lambda;
    let lhs = design.lift(&design.outputs(w, p)?, p)? + w * nl;
    let rhs = design.lift(teacher_outputs, p)?;
    let scale = rhs.norm().max(f64::MIN_POSITIVE);
    Ok((lhs - &rhs).norm() / scale)
}

/// Iterates [`ridge_distill_step`] from `f_0 = [I_p⊗Φ]ᵀ w00`, returning
/// `w_{0,0}, w_{1,0}, …, w_{rounds,0}`.
pub fn iterate_distill(
    design: &DesignMatrix,
    p: usize,
    w00: &DVector<f64>,
    config: &DistillConfig,
) -> Result<Vec<DVector<f64>>> {
    let mut weights = vec![w00.clone()];
    for _ in 0..config.rounds {
        let f = design.outputs(weights.last().expect("non-empty"), p)?;
        weights.push(ridge_distill_step(design, p, &f, config)?);
    }
    Ok(weights)
}

/// Standard-normal `w_{0,0} ∈ R^{dim}`.
pub fn gaussian_initial_weight(dim: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng))
}

/// `w_{0,0}` as a ridge fit on the general-domain pool of `task`, with labels
/// produced by a random linear head on the pool's features.
pub fn pretrained_initial_weight(
    task: &SyntheticTask,
    fmap: &FeatureMap,
    lambda: f64,
    seed: u64,
) -> Result<DVector<f64>> {
    if task.pretrain_inputs.is_empty() {
        return Err(Error::Domain("task has no pre-training inputs".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!(
            "ridge coefficient must be > 0, got {lambda}"
        )));
    }
    let p = task.p();
    let feats = fmap.features(&task.pretrain_inputs)?;
    let (d, m) = feats.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = DMatrix::<f64>::from_fn(p, d, |_, _| StandardNormal.sample(&mut rng));
    let targets = &head * &feats; // p×m
    let system = &feats * feats.transpose() + DMatrix::identity(d, d) * (m as f64 * lambda);
    let chol = system.cholesky().ok_or(Error::SingularSystem)?;
    let mut w = DVector::zeros(d * p);
    for k in 0..p {
        let rhs = &feats * targets.row(k).transpose();
        w.rows_mut(k * d, d).copy_from(&chol.solve(&rhs));
    }
    Ok(w)
}
