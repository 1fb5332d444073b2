//! The invariant suite run by `distill-lab verify`.
//!
//! Every check yields one row with a measured value, a tolerance and a
//! margin `tolerance − value`. A check passes when its margin is
//! non-negative.

use distill_lab::bounds::{bound_report, generalization_remainder};
use distill_lab::bounds::{monotonicity_report, psi, tightness_witness, BoundInputs, Verdict};
use distill_lab::distill::{
    closed_form_distill, gaussian_initial_weight, iterate_distill, propagate_teacher, DistillConfig,
};
use distill_lab::finetune::{euler_oracle, finetune_closed_form, FlowConfig};
use distill_lab::mae::gradcheck::grad_check;
use distill_lab::mae::train::distill_step;
use distill_lab::mae::{
    checkpoint, distill_loss, distill_loss_grad, mae_loss, mae_loss_grad, mars_kink_margin,
    sample_mask, self_distill, MaskedBatch, ModelDims, Sequence, ToyModelParams, TrainConfig,
    Variant,
};
use distill_lab::spectral::{decompose, DesignMatrix, SpectralDecomposition};
use distill_lab::Result;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::output::{Cell, Table};
use crate::run::Fault;

pub const HEADER: &[&str] = &["check", "status", "value", "tolerance", "margin"];

/// Names of every check, in report order. The report has exactly one row per
/// entry.
pub const CHECKS: [&str; 16] = [
    "distill_closed_form_vs_ridge",
    "flow_closed_form_vs_euler",
    "zeta_strictly_decreasing",
    "psi_strictly_decreasing",
    "degenerate_ties_and_null_drop",
    "random_init_within_psi",
    "null_space_removed_after_round_0",
    "null_space_frozen_by_flow",
    "teacher_propagation",
    "remainder_hand_value",
    "mae_gradient",
    "distill_gradient_and_stop_gradient",
    "decoder_untouched_by_distillation",
    "rounds_restart_at_init",
    "checkpoint_round_trip",
    "mask_never_empty",
];

/// Closed form is perturbed by this relative amount under `Fault::ClosedForm`.
pub const FAULT_SIZE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    fn at_most(name: &'static str, value: f64, tolerance: f64) -> Self {
        Self {
            name,
            value,
            tolerance,
        }
    }

    pub fn margin(&self) -> f64 {
        self.tolerance - self.value
    }

    /// NaN values fail.
    pub fn passed(&self) -> bool {
        self.margin() >= 0.0
    }
}

/// A random full-rank linear instance with `n ≤ 8`, `d ≤ 32`, `p ≤ 4`.
pub struct LinearInstance {
    pub design: DesignMatrix,
    pub spec: SpectralDecomposition,
    pub p: usize,
    pub labels: DVector<f64>,
    pub w00: DVector<f64>,
}

pub fn random_instance(seed: u64) -> Result<LinearInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=8usize);
    let d = rng.random_range(n.max(2)..=32usize);
    let p = rng.random_range(1..=4usize);
    let phi = DMatrix::from_fn(d, n, |_, _| rng.random::<f64>() * 2.0 - 1.0) / (d as f64).sqrt();
    let design = DesignMatrix::from_matrix(phi)?;
    let spec = decompose(&design, p)?;
    Ok(LinearInstance {
        labels: gaussian_initial_weight(n * p, seed.wrapping_add(1)),
        w00: gaussian_initial_weight(d * p, seed.wrapping_add(2)),
        design,
        spec,
        p,
    })
}

fn relative(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Largest relative error of the closed form against `t`-fold ridge
/// regression, over `t = 0..=rounds`.
pub fn distill_residual(
    inst: &LinearInstance,
    lambda: f64,
    rounds: usize,
    fault: Option<Fault>,
) -> Result<f64> {
    let config = DistillConfig::new(lambda, rounds, inst.design.n())?;
    let iterated = iterate_distill(&inst.design, inst.p, &inst.w00, &config)?;
    let mut worst = 0.0f64;
    for (t, w_iter) in iterated.iter().enumerate() {
        let mut w = closed_form_distill(&inst.spec, &inst.w00, &config.with_rounds(t))?.w;
        if fault == Some(Fault::ClosedForm) {
            w *= 1.0 + FAULT_SIZE;
        }
        worst = worst.max(relative(&w, w_iter));
    }
    Ok(worst)
}

/// Relative error of the closed-form flow against forward Euler with step
/// `1e-3/σ₁²`, started from `w_{t,0}`.
pub fn flow_residual(
    inst: &LinearInstance,
    lambda: f64,
    t: usize,
    horizon: f64,
    fault: Option<Fault>,
) -> Result<f64> {
    let config = DistillConfig::new(lambda, t, inst.design.n())?;
    let state = closed_form_distill(&inst.spec, &inst.w00, &config)?;
    let flow = FlowConfig::for_spectrum(horizon, &inst.spec)?;
    let closed = finetune_closed_form(&inst.spec, &state, &inst.labels, &flow)?.w_final;
    let mut euler = euler_oracle(&inst.design, inst.p, &inst.labels, &state.w, &flow)?.w;
    if fault == Some(Fault::Flow) {
        euler *= 1.0 + 10.0 * FAULT_SIZE;
    }
    Ok(relative(&closed, &euler))
}

/// Bound reports for `t = 0..=rounds` with the given `‖w_init‖`.
pub fn reports(
    inst: &LinearInstance,
    lambda: f64,
    rounds: usize,
    horizon: f64,
    w_init_norm: f64,
) -> Result<Vec<distill_lab::bounds::BoundReport>> {
    let inputs = BoundInputs::new(1.0, 1.0, 0.05, 1.0)?;
    let flow = FlowConfig::for_spectrum(horizon, &inst.spec)?;
    (0..=rounds)
        .map(|t| {
            let config = DistillConfig::new(lambda, t, inst.design.n())?;
            let state = closed_form_distill(&inst.spec, &inst.w00, &config)?;
            bound_report(
                &inst.spec,
                &state,
                &inst.labels,
                &flow,
                w_init_norm,
                &inputs,
            )
        })
        .collect()
}

/// Fraction of pairs that are not strict decreases (zero when all are).
fn non_strict_fraction(verdicts: &[distill_lab::bounds::PairVerdict]) -> f64 {
    let bad = verdicts
        .iter()
        .filter(|v| v.verdict != Verdict::StrictlyDecreasing)
        .count();
    bad as f64 / verdicts.len().max(1) as f64
}

fn random_sequences(dims: &ModelDims, count: usize, rng: &mut ChaCha8Rng) -> Vec<Sequence> {
    use distill_lab::mae::Mode;
    (0..count)
        .map(|_| match dims.mode {
            Mode::Token => Sequence::Tokens(
                (0..dims.seq_len)
                    .map(|_| rng.random_range(0..dims.vocab))
                    .collect(),
            ),
            Mode::Patch => {
                Sequence::Patches(DMatrix::from_fn(dims.seq_len, dims.patch_dim, |_, _| {
                    rng.random::<f64>() * 2.0 - 1.0
                }))
            }
        })
        .collect()
}

struct Settings {
    instances: usize,
    seed: u64,
    lambda: f64,
    horizon: f64,
}

fn linear_checks(s: &Settings, fault: Option<Fault>) -> Result<Vec<Check>> {
    const ROUNDS: usize = 10;
    let mut distill = 0.0f64;
    let mut flow = 0.0f64;
    let mut zeta_bad = 0.0f64;
    let mut psi_bad = 0.0f64;
    let mut within = f64::NEG_INFINITY;
    let mut null_removed = 0.0f64;
    let mut null_frozen = 0.0f64;
    let mut propagation = 0.0f64;
    for k in 0..s.instances {
        let seed = s.seed.wrapping_mul(7919).wrapping_add(k as u64);
        let inst = random_instance(seed)?;
        distill = distill.max(distill_residual(&inst, s.lambda, ROUNDS, fault)?);
        for t in [0, 1] {
            flow = flow.max(flow_residual(&inst, s.lambda, t, s.horizon, fault)?);
        }
        let w_init = gaussian_initial_weight(inst.w00.len(), seed.wrapping_add(3));
        let series = reports(&inst, s.lambda, ROUNDS, s.horizon, w_init.norm())?;
        let verdicts = monotonicity_report(&series)?;
        zeta_bad = zeta_bad.max(non_strict_fraction(&verdicts.zeta));
        psi_bad = psi_bad.max(non_strict_fraction(&verdicts.psi));

        let flow_cfg = FlowConfig::for_spectrum(s.horizon, &inst.spec)?;
        let np = inst.spec.span_dim();
        let f0 = inst.design.outputs(&inst.w00, inst.p)?;
        for t in 0..=3 {
            let config = DistillConfig::new(s.lambda, t, inst.design.n())?;
            let state = closed_form_distill(&inst.spec, &inst.w00, &config)?;
            let w_final =
                finetune_closed_form(&inst.spec, &state, &inst.labels, &flow_cfg)?.w_final;
            let bound = psi(&inst.spec, &state, &inst.labels, &flow_cfg, w_init.norm())?.psi;
            within = within.max(((&w_init - &w_final).norm() - bound) / bound);

            let c0 = inst.spec.left_coefficients(&state.w)?;
            let c_final = inst.spec.left_coefficients(&w_final)?;
            let null0 = c0.rows(np, c0.len() - np);
            let null_t = c_final.rows(np, c0.len() - np);
            if t >= 1 {
                null_removed = null_removed.max(null0.amax());
            }
            null_frozen = null_frozen.max((null_t - null0).amax());

            let direct = inst.design.outputs(&state.w, inst.p)?;
            let propagated = propagate_teacher(&inst.spec, &f0, t, &config)?;
            propagation = propagation.max((direct - propagated).amax());
        }
    }
    Ok(vec![
        Check::at_most(CHECKS[0], distill, 1e-8),
        Check::at_most(CHECKS[1], flow, 1e-3),
        Check::at_most(CHECKS[2], zeta_bad, 0.0),
        Check::at_most(CHECKS[3], psi_bad, 0.0),
        degenerate_check(s)?,
        Check::at_most(CHECKS[5], within, 0.0),
        Check::at_most(CHECKS[6], null_removed, 1e-10),
        Check::at_most(CHECKS[7], null_frozen, 1e-9),
        Check::at_most(CHECKS[8], propagation, 1e-9),
    ])
}

/// `w00` orthogonal to the span: ties for `t ≥ 1` and a first drop of `ℬ`.
/// Φ has zero rows and `w00` lives only there, so the teacher signal is
/// exactly zero rather than zero up to rounding.
fn degenerate_check(s: &Settings) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0xdead);
    let (n, d, p) = (3, 7, 2);
    let phi = DMatrix::from_fn(d, n, |i, _| {
        if i < n + 1 {
            rng.random::<f64>() * 2.0 - 1.0
        } else {
            0.0
        }
    });
    let design = DesignMatrix::from_matrix(phi)?;
    let spec = decompose(&design, p)?;
    let w00 = DVector::from_fn(d * p, |i, _| if i % d > n { 1.0 + i as f64 } else { 0.0 });
    let degenerate = LinearInstance {
        labels: gaussian_initial_weight(n * p, s.seed),
        w00,
        design,
        spec,
        p,
    };
    let series = reports(&degenerate, s.lambda, 5, s.horizon, 0.0)?;
    let verdicts = monotonicity_report(&series)?;
    let mut worst = 0.0f64;
    if verdicts.zeta[1..].iter().any(|v| v.verdict != Verdict::Tie) {
        worst = f64::INFINITY;
    }
    let b = series[0].null_energy;
    let drop = verdicts.first_round_null_drop.unwrap_or(f64::NAN);
    worst = worst.max((drop - b).abs() / b.max(1.0));
    // The null energy alone must account for ζ(0)² − ζ(1)².
    let direct = series[0].zeta.powi(2) - series[1].zeta.powi(2);
    worst = worst.max((direct - b).abs() / b.max(1.0));
    Ok(Check::at_most(CHECKS[4], worst, 1e-10))
}

fn remainder_check() -> Result<Check> {
    let delta = 2.0 * (-2.0f64).exp();
    let inputs = BoundInputs::new(1.0, 1.0, delta, 1.0)?;
    let value = generalization_remainder(1.0, &inputs, 1, 4);
    Ok(Check::at_most(CHECKS[9], (value - 1.5).abs(), 1e-12))
}

/// Finite-difference step for every gradient check.
pub const GRAD_EPSILON: f64 = 1e-4;

/// Draws students until the weight-MARS loss is differentiable on the whole
/// five-point stencil, which reaches `2 · GRAD_EPSILON`. Every entry is
/// jittered because freshly drawn biases are zero in both models.
pub fn differentiable_student<R: Rng>(
    dims: ModelDims,
    teacher: &ToyModelParams,
    rng: &mut R,
) -> Result<ToyModelParams> {
    loop {
        let mut student = ToyModelParams::random(dims, rng);
        for i in 0..student.num_params() {
            *student.entry_mut(i).expect("index in range") += rng.random_range(-0.2..0.2);
        }
        if mars_kink_margin(&student, teacher)? > 10.0 * GRAD_EPSILON {
            return Ok(student);
        }
    }
}

fn mae_checks(seed: u64, fault: Option<Fault>) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667);
    let mut grad_err = 0.0f64;
    let mut distill_err = 0.0f64;
    let mut decoder_diff = 0.0f64;
    for dims in [ModelDims::token(2), ModelDims::patch(2)] {
        let teacher = ToyModelParams::random(dims, &mut rng);
        let student = differentiable_student(dims, &teacher, &mut rng)?;
        let batch = MaskedBatch::sample(random_sequences(&dims, 3, &mut rng), 0.4, &mut rng);

        let (_, mut grad) = mae_loss_grad(&student, &batch)?;
        if fault == Some(Fault::Gradient) {
            let scaled = grad.clone();
            grad.axpy(FAULT_SIZE * 10.0, &scaled)?;
        }
        grad_err = grad_err.max(grad_check(
            &student,
            &grad,
            |p| mae_loss(p, &batch),
            GRAD_EPSILON,
            &mut rng,
        )?);

        for variant in Variant::ALL.into_iter().filter(|v| v.uses_distill()) {
            let (_, g) = distill_loss_grad(&student, &teacher, &batch, variant)?;
            let err = grad_check(
                &student,
                &g.student,
                |p| distill_loss(p, &teacher, &batch, variant),
                GRAD_EPSILON,
                &mut rng,
            )?;
            distill_err = distill_err.max(err);
            if g.teacher.flatten().iter().any(|&v| v != 0.0) {
                distill_err = f64::INFINITY;
            }

            // One step with L₂ must move the decoder exactly as L₁ alone does,
            // and must leave the teacher untouched.
            let cfg = TrainConfig {
                variant,
                ..TrainConfig::new(seed)
            };
            let plain = TrainConfig {
                variant: if variant.uses_mae() {
                    Variant::None
                } else {
                    variant
                },
                ..cfg
            };
            let teacher_before = teacher.clone();
            let mut with_l2 = student.clone();
            distill_step(&mut with_l2, &teacher, &batch, &cfg)?;
            let reference_decoder = if variant.uses_mae() {
                let mut without = student.clone();
                distill_step(&mut without, &teacher, &batch, &plain)?;
                without.decoder
            } else {
                student.decoder.clone()
            };
            if with_l2.decoder != reference_decoder || teacher != teacher_before {
                decoder_diff = f64::INFINITY;
            }
        }
    }
    Ok(vec![
        Check::at_most(CHECKS[10], grad_err, 1e-4),
        Check::at_most(CHECKS[11], distill_err, 1e-4),
        Check::at_most(CHECKS[12], decoder_diff, 0.0),
    ])
}

fn structural_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbb67_ae85);
    let dims = ModelDims::token(2);
    let init = ToyModelParams::random(dims, &mut rng);
    let data = random_sequences(&dims, 12, &mut rng);
    let cfg = TrainConfig {
        steps_pretrain: 4,
        batch: 4,
        rounds: 3,
        ..TrainConfig::new(seed)
    };
    let run = self_distill(&init, &data, &cfg)?;
    let restarts = run
        .start_checksums
        .iter()
        .filter(|&&c| c != init.checksum())
        .count();

    let mut round_trip = 0.0f64;
    for params in [&init, run.last()] {
        if checkpoint::load(&checkpoint::save(params))? != *params {
            round_trip = f64::INFINITY;
        }
    }
    if checkpoint::load(&checkpoint::save(&init.encoder_only()))? != init.encoder_only() {
        round_trip = f64::INFINITY;
    }

    let mut empty = 0usize;
    for len in [1, 2, 8] {
        for gamma in [0.01, 0.3, 0.999] {
            for _ in 0..200 {
                if !sample_mask(len, gamma, &mut rng).iter().any(|&m| m) {
                    empty += 1;
                }
            }
        }
    }
    Ok(vec![
        Check::at_most(CHECKS[13], restarts as f64, 0.0),
        Check::at_most(CHECKS[14], round_trip, 0.0),
        Check::at_most(CHECKS[15], empty as f64, 0.0),
    ])
}

/// Runs every check. Errors inside a group are reported as failing rows,
/// never as an abort.
pub fn run_checks(
    instances: usize,
    seed: u64,
    lambda: f64,
    horizon: f64,
    fault: Option<Fault>,
) -> Vec<Check> {
    let settings = Settings {
        instances,
        seed,
        lambda,
        horizon,
    };
    let failed = |names: &[&'static str]| -> Vec<Check> {
        names
            .iter()
            .map(|&n| Check::at_most(n, f64::NAN, 0.0))
            .collect()
    };
    let mut checks = Vec::with_capacity(CHECKS.len());
    checks.extend(linear_checks(&settings, fault).unwrap_or_else(|_| failed(&CHECKS[0..9])));
    checks.push(remainder_check().unwrap_or_else(|_| Check::at_most(CHECKS[9], f64::NAN, 1e-12)));
    checks.extend(mae_checks(seed, fault).unwrap_or_else(|_| failed(&CHECKS[10..13])));
    checks.extend(structural_checks(seed).unwrap_or_else(|_| failed(&CHECKS[13..16])));
    debug_assert_eq!(checks.len(), CHECKS.len());
    checks
}

pub fn table(checks: &[Check]) -> Table {
    let mut table = Table::new(HEADER);
    for c in checks {
        table.push(vec![
            c.name.into(),
            Cell::from(if c.passed() { "pass" } else { "fail" }),
            c.value.into(),
            c.tolerance.into(),
            c.margin().into(),
        ]);
    }
    table
}

/// Distance reached by the witness `−α w_{t,T}` minus `ψ(t)`, relative.
pub fn witness_gap(
    inst: &LinearInstance,
    lambda: f64,
    t: usize,
    horizon: f64,
    alpha: f64,
) -> Result<f64> {
    let config = DistillConfig::new(lambda, t, inst.design.n())?;
    let state = closed_form_distill(&inst.spec, &inst.w00, &config)?;
    let flow = FlowConfig::for_spectrum(horizon, &inst.spec)?;
    let w_final = finetune_closed_form(&inst.spec, &state, &inst.labels, &flow)?.w_final;
    let w_init = tightness_witness(&inst.spec, &state, &inst.labels, &flow, alpha)?;
    let bound = psi(&inst.spec, &state, &inst.labels, &flow, w_init.norm())?.psi;
    Ok(((&w_init - &w_final).norm() - bound) / bound)
}
