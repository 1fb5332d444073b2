//! Gradient-flow fine-tuning of a distilled weight on `L(w) = ½‖Zw − Y‖²`
//! with `Zᵀ = [I_p ⊗ Φ]`.
//!
//! In the left singular basis every span coordinate relaxes exponentially
//! towards the minimum-norm interpolant at rate `σ_i²`, and every null-space
//! coordinate stays where distillation left it.

use nalgebra::{DVector, SymmetricEigen};

use crate::distill::DistillState;
use crate::error::{Error, Result};
use crate::spectral::{check_len, DesignMatrix, SpectralDecomposition};

/// Default fine-tuning horizon `T`.
pub const DEFAULT_HORIZON: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub horizon: f64,
    pub euler_step: f64,
}

impl FlowConfig {
    pub fn new(horizon: f64, euler_step: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Domain(format!(
                "horizon T must be finite and > 0, got {horizon}"
            )));
        }
        if !(euler_step > 0.0 && euler_step.is_finite()) {
            return Err(Error::Domain(format!(
                "euler step must be > 0, got {euler_step}"
            )));
        }
        Ok(Self {
            horizon,
            euler_step,
        })
    }

    /// Horizon `T` with the oracle step `1e-3 / σ₁²`.
    pub fn for_spectrum(horizon: f64, spec: &SpectralDecomposition) -> Result<Self> {
        let top = spec.sigma()[0];
        Self::new(horizon, 1e-3 / (top * top))
    }
}

#[derive(Debug, Clone)]
pub struct FineTuneTrajectory {
    /// Target coefficients `q_i`, `i < np` (`q_i = 0` beyond).
    pub q: DVector<f64>,
    /// `c_i^{(t,0)}` for all `dp` coordinates, span part first.
    pub c0: DVector<f64>,
    /// `c_i^{(t,T)}`, same layout as `c0`.
    pub c_final: DVector<f64>,
    /// `w_{t,T}`.
    pub w_final: DVector<f64>,
}

/// Coefficients `q` of the minimum-norm `v` with `Zv = Y`.
pub fn min_norm_targets(
    spec: &SpectralDecomposition,
    labels: &DVector<f64>,
) -> Result<DVector<f64>> {
    let proj = spec.right_coefficients(labels)?;
    let sigma = spec.sigma();
    let tol = crate::spectral::RANK_TOL * sigma[0];
    let rank = sigma.iter().filter(|&&s| s > tol).count();
    if rank < spec.span_dim() {
        return Err(Error::RankDeficient {
            rank,
            expected: spec.span_dim(),
        });
    }
    Ok(proj.component_div(sigma))
}

/// `c(τ) = q (1 − e^{−σ²τ}) + c₀ e^{−σ²τ}`.
pub fn flow_coefficient(q: f64, c0: f64, sigma: f64, tau: f64) -> f64 {
    let decay = (-sigma * sigma * tau).exp();
    q * (1.0 - decay) + c0 * decay
}

pub fn finetune_closed_form(
    spec: &SpectralDecomposition,
    state: &DistillState,
    labels: &DVector<f64>,
    config: &FlowConfig,
) -> Result<FineTuneTrajectory> {
    finetune_until(spec, &state.w, labels, config.horizon)
}

/// Closed-form flow from an arbitrary start `w_{t,0}` up to time `tau`.
pub fn finetune_until(
    spec: &SpectralDecomposition,
    w_start: &DVector<f64>,
    labels: &DVector<f64>,
    tau: f64,
) -> Result<FineTuneTrajectory> {
    let q = min_norm_targets(spec, labels)?;
    let c0 = spec.left_coefficients(w_start)?;
    let mut c_final = c0.clone();
    for (i, &s) in spec.sigma().iter().enumerate() {
        c_final[i] = flow_coefficient(q[i], c0[i], s, tau);
    }
    let w_final = spec.from_left_coefficients(&c_final)?;
    Ok(FineTuneTrajectory {
        q,
        c0,
        c_final,
        w_final,
    })
}

/// `½‖[I_p⊗Φ]ᵀ w − Y‖²`.
pub fn training_loss(
    design: &DesignMatrix,
    p: usize,
    w: &DVector<f64>,
    labels: &DVector<f64>,
) -> Result<f64> {
    check_len("labels", design.n() * p, labels.len())?;
    Ok(0.5 * (design.outputs(w, p)? - labels).norm_squared())
}

/// Largest eigenvalue of `ΦᵀΦ`, i.e. `σ₁²`, from a symmetric eigensolve.
pub fn top_curvature(design: &DesignMatrix) -> f64 {
    let gram = design.phi().tr_mul(design.phi());
    SymmetricEigen::new(gram).eigenvalues.max()
}

#[derive(Debug, Clone)]
pub struct EulerRun {
    pub w: DVector<f64>,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Forward-Euler integration of `dw/dτ = −Z(Zᵀw − Y)` for time `T`.
///
/// The step is shrunk so that an integer number of steps lands on `T`.
/// Fails if the requested step exceeds `1/σ₁²` or if the loss ever rises.
pub fn euler_oracle(
    design: &DesignMatrix,
    p: usize,
    labels: &DVector<f64>,
    w_start: &DVector<f64>,
    config: &FlowConfig,
) -> Result<EulerRun> {
    check_len("start weight", design.d() * p, w_start.len())?;
    let bound = 1.0 / top_curvature(design);
    if config.euler_step > bound {
        return Err(Error::UnstableStep {
            step: config.euler_step,
            bound,
        });
    }
    let steps = (config.horizon / config.euler_step).ceil().max(1.0) as usize;
    let h = config.horizon / steps as f64;

    let mut w = w_start.clone();
    let mut residual = design.outputs(&w, p)? - labels;
    let initial_loss = 0.5 * residual.norm_squared();
    let mut loss = initial_loss;
    let slack = 1e-13 * initial_loss.max(f64::MIN_POSITIVE);
    for step in 0..steps {
        let grad = design.lift(&residual, p)?;
        w.axpy(-h, &grad, 1.0);
        residual = design.outputs(&w, p)? - labels;
        let next = 0.5 * residual.norm_squared();
        if next > loss + slack {
            return Err(Error::LossIncreased {
                step,
                before: loss,
                after: next,
            });
        }
        loss = next;
    }
    Ok(EulerRun {
        w,
        steps,
        initial_loss,
        final_loss: loss,
    })
}
