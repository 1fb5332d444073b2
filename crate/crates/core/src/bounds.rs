//! Weight-norm and distance bounds for the distilled-then-fine-tuned weight.
//!
//! `ζ_t(s)` bounds `‖w_{t,T}‖` and enters the generalization bound through
//! [`generalization_remainder`]. `ψ(t)` bounds `‖w_init − w_{t,T}‖` over all
//! `w_init` of a given norm and is attained by [`tightness_witness`].

use nalgebra::DVector;

use crate::distill::{alpha_coefficient, DistillState};
use crate::error::{Error, Result};
use crate::finetune::{finetune_closed_form, min_norm_targets, FlowConfig};
use crate::spectral::{DesignMatrix, SpectralDecomposition};

/// Margins at or below this fraction of the larger value count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    /// `R` with `E‖φ(x)‖ ≤ R`.
    pub feature_bound: f64,
    /// `M` with `ℓ ≤ M`.
    pub loss_bound: f64,
    pub delta: f64,
    /// The Rademacher comparison constant `c`. Only its existence is known;
    /// results are reported up to this constant.
    pub rademacher_constant: f64,
}

impl BoundInputs {
    pub fn new(
        feature_bound: f64,
        loss_bound: f64,
        delta: f64,
        rademacher_constant: f64,
    ) -> Result<Self> {
        if !(feature_bound > 0.0) || !(loss_bound > 0.0) || !(rademacher_constant > 0.0) {
            return Err(Error::Domain("R, M and c must all be > 0".into()));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Domain(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        Ok(Self {
            feature_bound,
            loss_bound,
            delta,
            rademacher_constant,
        })
    }

    /// `R` as the mean feature norm over the design columns and `M` as the
    /// largest per-sample loss `‖f(x_i, w) − y_i‖²` over the given weights.
    pub fn empirical(
        design: &DesignMatrix,
        p: usize,
        labels: &DVector<f64>,
        weights: &[DVector<f64>],
        delta: f64,
        rademacher_constant: f64,
    ) -> Result<Self> {
        let n = design.n();
        let r = design.phi().column_iter().map(|c| c.norm()).sum::<f64>() / n as f64;
        let mut m = 0.0f64;
        for w in weights {
            let residual = design.outputs(w, p)? - labels;
            for i in 0..n {
                let loss: f64 = (0..p).map(|k| residual[k * n + i].powi(2)).sum();
                m = m.max(loss);
            }
        }
        Self::new(r, m.max(f64::MIN_POSITIVE), delta, rademacher_constant)
    }
}

/// `ζ(t)·√(4c²R²p/n) + M·√(ln(2/δ)/(2n))`.
pub fn generalization_remainder(zeta_t: f64, inputs: &BoundInputs, p: usize, n: usize) -> f64 {
    let (n, p) = (n as f64, p as f64);
    let c = inputs.rademacher_constant;
    let r = inputs.feature_bound;
    zeta_t * (4.0 * c * c * r * r * p / n).sqrt()
        + inputs.loss_bound * ((2.0 / inputs.delta).ln() / (2.0 * n)).sqrt()
}

/// `ζ_t(s)` for the dataset held by `spec`, from the fine-tuning coefficients.
pub fn zeta(
    spec: &SpectralDecomposition,
    state: &DistillState,
    labels: &DVector<f64>,
    flow: &FlowConfig,
) -> Result<f64> {
    let traj = finetune_closed_form(spec, state, labels, flow)?;
    let np = spec.span_dim();
    let horizon = flow.horizon;
    let mut total = 0.0;
    for (i, &s) in spec.sigma().iter().enumerate() {
        let decay = (-s * s * horizon).exp();
        total += (traj.q[i] * (1.0 - decay)).powi(2) + traj.c0[i].powi(2) * decay * decay;
    }
    total += traj.c0.rows(np, spec.weight_dim() - np).norm_squared();
    Ok(total.sqrt())
}

/// `ψ(t) = √(G₁ + ψ₁(t) + 𝟙{t=0}ℬ) + G₂` and its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiParts {
    pub g1: f64,
    pub psi1: f64,
    pub null_energy: f64,
    pub g2: f64,
    pub psi: f64,
}

/// Evaluates `ψ(t)` from the teacher signal `ỹ` and the decay law, not from
/// the fine-tuned weight.
pub fn psi(
    spec: &SpectralDecomposition,
    state: &DistillState,
    labels: &DVector<f64>,
    flow: &FlowConfig,
    w_init_norm: f64,
) -> Result<PsiParts> {
    if !(w_init_norm >= 0.0) {
        return Err(Error::Domain(format!(
            "w_init norm must be >= 0, got {w_init_norm}"
        )));
    }
    let q = min_norm_targets(spec, labels)?;
    let config = &state.config;
    let horizon = flow.horizon;
    let mut g1 = 0.0;
    let mut psi1 = 0.0;
    for (i, &s) in spec.sigma().iter().enumerate() {
        let decay = (-s * s * horizon).exp();
        g1 += (q[i] * (1.0 - decay)).powi(2);
        let alpha = alpha_coefficient(s, config.n, config.lambda, state.t)?;
        psi1 += (alpha * state.teacher_signal[i]).powi(2) * decay * decay;
    }
    let null_energy = state.null_energy();
    let active_null = if state.t == 0 { null_energy } else { 0.0 };
    Ok(PsiParts {
        g1,
        psi1,
        null_energy,
        g2: w_init_norm,
        psi: (g1 + psi1 + active_null).sqrt() + w_init_norm,
    })
}

/// `w_init = −α w_{t,T}`, the point at which `‖w_init − w_{t,T}‖ = ψ(t)`.
pub fn tightness_witness(
    spec: &SpectralDecomposition,
    state: &DistillState,
    labels: &DVector<f64>,
    flow: &FlowConfig,
    alpha: f64,
) -> Result<DVector<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be > 0, got {alpha}")));
    }
    let traj = finetune_closed_form(spec, state, labels, flow)?;
    Ok(traj.w_final * -alpha)
}

/// `2 Σ q_i(1 − e^{−σ_i²T}) c_i e^{−σ_i²T}`, the gap `‖w_{t,T}‖² − ζ_t(s)²`.
/// `ψ(t)` is attained by [`tightness_witness`] exactly when this vanishes.
pub fn cross_term(
    spec: &SpectralDecomposition,
    state: &DistillState,
    labels: &DVector<f64>,
    flow: &FlowConfig,
) -> Result<f64> {
    let traj = finetune_closed_form(spec, state, labels, flow)?;
    Ok(spec
        .sigma()
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let decay = (-s * s * flow.horizon).exp();
            2.0 * traj.q[i] * (1.0 - decay) * traj.c0[i] * decay
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub t: usize,
    pub zeta: f64,
    pub psi: f64,
    pub g1: f64,
    pub psi1: f64,
    pub null_energy: f64,
    pub g2: f64,
    pub bound_rhs: f64,
}

pub fn bound_report(
    spec: &SpectralDecomposition,
    state: &DistillState,
    labels: &DVector<f64>,
    flow: &FlowConfig,
    w_init_norm: f64,
    inputs: &BoundInputs,
) -> Result<BoundReport> {
    let z = zeta(spec, state, labels, flow)?;
    let parts = psi(spec, state, labels, flow, w_init_norm)?;
    Ok(BoundReport {
        t: state.t,
        zeta: z,
        psi: parts.psi,
        g1: parts.g1,
        psi1: parts.psi1,
        null_energy: parts.null_energy,
        g2: parts.g2,
        bound_rhs: generalization_remainder(z, inputs, spec.p(), spec.n()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    StrictlyDecreasing,
    Tie,
    Violation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairVerdict {
    pub from: usize,
    pub to: usize,
    /// `value(from) − value(to)`.
    pub margin: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub zeta: Vec<PairVerdict>,
    pub psi: Vec<PairVerdict>,
    /// `(ψ(0)−G₂)² − (ψ(1)−G₂)² − (ψ₁(0)−ψ₁(1))`, which equals `ℬ`; present
    /// when the first two reports are rounds 0 and 1.
    pub first_round_null_drop: Option<f64>,
}

impl MonotonicityReport {
    pub fn all_strictly_decreasing(&self) -> bool {
        self.zeta
            .iter()
            .chain(self.psi.iter())
            .all(|v| v.verdict == Verdict::StrictlyDecreasing)
    }
}

fn classify(from: usize, to: usize, margin: f64, drop_sq: f64, scale: f64) -> PairVerdict {
    let verdict = if drop_sq.abs() <= TIE_TOLERANCE * scale {
        Verdict::Tie
    } else if drop_sq > 0.0 {
        Verdict::StrictlyDecreasing
    } else {
        Verdict::Violation
    };
    PairVerdict {
        from,
        to,
        margin,
        verdict,
    }
}

/// `ψ₁(t) + 𝟙{t=0}ℬ`, the only part of `ζ(t)²` that depends on `t`.
fn round_dependent(r: &BoundReport) -> f64 {
    r.psi1 + if r.t == 0 { r.null_energy } else { 0.0 }
}

/// Verdicts come from the drop in the round-dependent part of the squared
/// bound. Subtracting `ζ` values directly would lose late-round drops to
/// rounding against the constant `G₁`.
pub fn monotonicity_report(reports: &[BoundReport]) -> Result<MonotonicityReport> {
    if reports.len() < 2 {
        return Err(Error::InsufficientRounds(reports.len()));
    }
    let mut zeta = Vec::with_capacity(reports.len() - 1);
    let mut psi = Vec::with_capacity(reports.len() - 1);
    for w in reports.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (ra, rb) = (round_dependent(a), round_dependent(b));
        let drop_sq = ra - rb;
        let scale = ra.abs().max(rb.abs());
        let zeta_margin = drop_sq / (a.zeta + b.zeta).max(f64::MIN_POSITIVE);
        zeta.push(classify(a.t, b.t, zeta_margin, drop_sq, scale));
        if a.g2 == b.g2 {
            let root_sum = (a.psi - a.g2) + (b.psi - b.g2);
            let psi_margin = drop_sq / root_sum.max(f64::MIN_POSITIVE);
            psi.push(classify(a.t, b.t, psi_margin, drop_sq, scale));
        } else {
            let margin = a.psi - b.psi;
            psi.push(classify(
                a.t,
                b.t,
                margin,
                margin,
                a.psi.abs().max(b.psi.abs()),
            ));
        }
    }
    let first_round_null_drop = match (&reports[0], &reports[1]) {
        (a, b) if a.t == 0 && b.t == 1 => {
            Some((a.psi - a.g2).powi(2) - (b.psi - b.g2).powi(2) - (a.psi1 - b.psi1))
        }
        _ => None,
    };
    Ok(MonotonicityReport {
        zeta,
        psi,
        first_round_null_drop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{closed_form_distill, gaussian_initial_weight, DistillConfig};
    use crate::finetune::finetune_closed_form;
    use crate::spectral::decompose;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn scalar_spec() -> SpectralDecomposition {
        decompose(
            &DesignMatrix::from_matrix(DMatrix::from_element(1, 1, 1.0)).unwrap(),
            1,
        )
        .unwrap()
    }

    fn inputs() -> BoundInputs {
        BoundInputs::new(1.0, 1.0, 0.1, 1.0).unwrap()
    }

    #[test]
    fn remainder_hand_values() {
        let delta = 2.0 * (-2.0f64).exp();
        let inputs = BoundInputs::new(1.0, 1.0, delta, 1.0).unwrap();
        assert!((generalization_remainder(1.0, &inputs, 1, 4) - 1.5).abs() < 1e-12);
        assert_relative_eq!(
            generalization_remainder(0.0, &inputs, 1, 4),
            (2.0f64 / 8.0).sqrt(),
            epsilon = 1e-15
        );
        let a = generalization_remainder(0.7, &inputs, 2, 10);
        let b = generalization_remainder(0.7, &inputs, 2, 20);
        assert_relative_eq!(b, a / 2f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn bound_inputs_validation() {
        assert!(BoundInputs::new(0.0, 1.0, 0.1, 1.0).is_err());
        assert!(BoundInputs::new(1.0, 1.0, 1.0, 1.0).is_err());
        assert!(BoundInputs::new(1.0, 1.0, 0.5, -1.0).is_err());
    }

    #[test]
    fn scalar_zeta_by_hand() {
        // σ = 1, nλ = 1, q = 1, c^{(0,0)} = 2, T = 1.
        let spec = scalar_spec();
        let flow = FlowConfig::new(1.0, 1e-3).unwrap();
        let y = DVector::from_element(1, 1.0);
        let w00 = DVector::from_element(1, 2.0);
        let e = (-1.0f64).exp();
        let expected = [
            ((1.0 - e).powi(2) + 4.0 * e * e).sqrt(),
            ((1.0 - e).powi(2) + e * e).sqrt(),
            ((1.0 - e).powi(2) + 0.25 * e * e).sqrt(),
        ];
        for (t, want) in expected.iter().enumerate() {
            let state =
                closed_form_distill(&spec, &w00, &DistillConfig::new(1.0, t, 1).unwrap()).unwrap();
            assert_relative_eq!(
                zeta(&spec, &state, &y, &flow).unwrap(),
                *want,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn zeta_large_horizon_limit() {
        let design = DesignMatrix::from_matrix(DMatrix::from_column_slice(
            3,
            2,
            &[1.0, 0.2, 0.0, -0.3, 0.9, 0.1],
        ))
        .unwrap();
        let spec = decompose(&design, 1).unwrap();
        let state = closed_form_distill(
            &spec,
            &DVector::from_vec(vec![0.5, 1.0, -2.0]),
            &DistillConfig::new(0.1, 2, 2).unwrap(),
        )
        .unwrap();
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let q = min_norm_targets(&spec, &y).unwrap();
        let z = zeta(&spec, &state, &y, &FlowConfig::new(1e4, 1.0).unwrap()).unwrap();
        assert_relative_eq!(z, q.norm(), epsilon = 1e-12);
    }

    #[test]
    fn null_only_initial_weight() {
        let design =
            DesignMatrix::from_matrix(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let spec = decompose(&design, 1).unwrap();
        let w00 = DVector::from_vec(vec![0.0, 3.0]);
        let y = DVector::from_element(1, 1.0);
        let flow = FlowConfig::new(2.0, 1e-3).unwrap();
        let state =
            closed_form_distill(&spec, &w00, &DistillConfig::new(1.0, 0, 1).unwrap()).unwrap();
        let z = zeta(&spec, &state, &y, &flow).unwrap();
        let g1 = (1.0 - (-2.0f64).exp()).powi(2);
        assert_relative_eq!(z * z - g1, 9.0, epsilon = 1e-12);
    }

    #[test]
    fn psi_equals_zeta_without_init_norm() {
        let design = DesignMatrix::from_matrix(DMatrix::from_column_slice(
            4,
            2,
            &[1.0, 0.5, 0.0, 0.3, -0.2, 1.1, 0.4, 0.0],
        ))
        .unwrap();
        let spec = decompose(&design, 2).unwrap();
        let w00 = gaussian_initial_weight(8, 2);
        let y = gaussian_initial_weight(4, 3);
        let flow = FlowConfig::new(5.0, 1e-3).unwrap();
        for t in 1..4 {
            let state =
                closed_form_distill(&spec, &w00, &DistillConfig::new(0.2, t, 2).unwrap()).unwrap();
            let parts = psi(&spec, &state, &y, &flow, 0.0).unwrap();
            assert_relative_eq!(
                parts.psi,
                zeta(&spec, &state, &y, &flow).unwrap(),
                epsilon = 1e-12
            );
            assert_relative_eq!(
                parts.psi,
                (parts.g1 + parts.psi1).sqrt() + parts.g2,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn null_energy_of_column_example() {
        let design =
            DesignMatrix::from_matrix(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let spec = decompose(&design, 1).unwrap();
        let b = -1.3;
        let state = closed_form_distill(
            &spec,
            &DVector::from_vec(vec![0.4, b]),
            &DistillConfig::new(1.0, 0, 1).unwrap(),
        )
        .unwrap();
        let parts = psi(
            &spec,
            &state,
            &DVector::from_element(1, 1.0),
            &FlowConfig::new(1.0, 1e-3).unwrap(),
            0.0,
        )
        .unwrap();
        assert_relative_eq!(parts.null_energy, b * b, epsilon = 1e-15);
    }

    #[test]
    fn witness_attains_psi() {
        let design = DesignMatrix::from_matrix(DMatrix::from_column_slice(
            3,
            2,
            &[0.6, 0.2, -0.5, 0.1, 0.8, 0.3],
        ))
        .unwrap();
        let spec = decompose(&design, 2).unwrap();
        let w00 = gaussian_initial_weight(6, 11);
        let flow = FlowConfig::new(5.0, 1e-3).unwrap();
        let state =
            closed_form_distill(&spec, &w00, &DistillConfig::new(0.1, 1, 2).unwrap()).unwrap();
        // Zero labels make q = 0, so the cross term vanishes and ψ is attained.
        let y = DVector::zeros(4);
        let w_final = finetune_closed_form(&spec, &state, &y, &flow)
            .unwrap()
            .w_final;
        assert_eq!(cross_term(&spec, &state, &y, &flow).unwrap(), 0.0);
        for alpha in [1.0, 1e-8, 2.5] {
            let w_init = tightness_witness(&spec, &state, &y, &flow, alpha).unwrap();
            let distance = (&w_init - &w_final).norm();
            let bound = psi(&spec, &state, &y, &flow, w_init.norm()).unwrap().psi;
            assert!(
                (distance - bound).abs() <= 1e-10 * bound.max(1.0),
                "{distance} vs {bound}"
            );
        }
        let w_init = tightness_witness(&spec, &state, &y, &flow, 1.0).unwrap();
        assert_relative_eq!(
            (&w_init - &w_final).norm(),
            2.0 * w_final.norm(),
            epsilon = 1e-12
        );
        assert!(tightness_witness(&spec, &state, &y, &flow, 0.0).is_err());
    }

    #[test]
    fn cross_term_is_the_witness_gap() {
        let design = DesignMatrix::from_matrix(DMatrix::from_column_slice(
            3,
            2,
            &[0.6, 0.2, -0.5, 0.1, 0.8, 0.3],
        ))
        .unwrap();
        let spec = decompose(&design, 2).unwrap();
        let w00 = gaussian_initial_weight(6, 11);
        let y = gaussian_initial_weight(4, 12);
        let flow = FlowConfig::new(5.0, 1e-3).unwrap();
        for t in 0..3 {
            let state =
                closed_form_distill(&spec, &w00, &DistillConfig::new(0.1, t, 2).unwrap()).unwrap();
            let w_final = finetune_closed_form(&spec, &state, &y, &flow)
                .unwrap()
                .w_final;
            let z = zeta(&spec, &state, &y, &flow).unwrap();
            let cross = cross_term(&spec, &state, &y, &flow).unwrap();
            assert_relative_eq!(w_final.norm_squared(), z * z + cross, max_relative = 1e-12);
        }
    }

    #[test]
    fn scalar_monotonicity_margins() {
        let spec = scalar_spec();
        let flow = FlowConfig::new(1.0, 1e-3).unwrap();
        let y = DVector::from_element(1, 1.0);
        let w00 = DVector::from_element(1, 2.0);
        let reports: Vec<_> = (0..3)
            .map(|t| {
                let state =
                    closed_form_distill(&spec, &w00, &DistillConfig::new(1.0, t, 1).unwrap())
                        .unwrap();
                bound_report(&spec, &state, &y, &flow, 0.0, &inputs()).unwrap()
            })
            .collect();
        let report = monotonicity_report(&reports).unwrap();
        assert!(report.all_strictly_decreasing());
        let e = (-1.0f64).exp();
        let z = |c: f64| ((1.0 - e).powi(2) + c * c * e * e).sqrt();
        assert_relative_eq!(report.zeta[0].margin, z(2.0) - z(1.0), epsilon = 1e-14);
        assert_relative_eq!(report.zeta[1].margin, z(1.0) - z(0.5), epsilon = 1e-14);
        assert_eq!(
            report.first_round_null_drop.map(|v| v.abs() < 1e-14),
            Some(true)
        );
    }

    #[test]
    fn drops_below_rounding_of_zeta_are_still_detected() {
        let spec = scalar_spec();
        let flow = FlowConfig::new(20.0, 1e-3).unwrap();
        let y = DVector::from_element(1, 1.0);
        let w00 = DVector::from_element(1, 2.0);
        let reports: Vec<_> = (0..4)
            .map(|t| {
                let state =
                    closed_form_distill(&spec, &w00, &DistillConfig::new(1.0, t, 1).unwrap())
                        .unwrap();
                bound_report(&spec, &state, &y, &flow, 0.0, &inputs()).unwrap()
            })
            .collect();
        assert_eq!(reports[2].zeta, reports[3].zeta);
        let report = monotonicity_report(&reports).unwrap();
        assert!(report.all_strictly_decreasing());
        assert!(report.zeta[2].margin > 0.0);
    }

    #[test]
    fn degenerate_teacher_signal_gives_ties() {
        let design =
            DesignMatrix::from_matrix(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let spec = decompose(&design, 1).unwrap();
        let w00 = DVector::from_vec(vec![0.0, 2.0]);
        let y = DVector::from_element(1, 1.0);
        let flow = FlowConfig::new(1.0, 1e-3).unwrap();
        let reports: Vec<_> = (1..6)
            .map(|t| {
                let state =
                    closed_form_distill(&spec, &w00, &DistillConfig::new(1.0, t, 1).unwrap())
                        .unwrap();
                bound_report(&spec, &state, &y, &flow, 0.0, &inputs()).unwrap()
            })
            .collect();
        let report = monotonicity_report(&reports).unwrap();
        assert!(report.zeta.iter().all(|v| v.verdict == Verdict::Tie));
        assert!(report.first_round_null_drop.is_none());
    }

    #[test]
    fn too_few_reports() {
        assert_eq!(
            monotonicity_report(&[]).unwrap_err(),
            Error::InsufficientRounds(0)
        );
    }
}
