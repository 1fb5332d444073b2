//! Linear-theory sweep: bounds, actual distances and oracle residuals per round.

use distill_lab::bounds::{bound_report, BoundInputs};
use distill_lab::distill::{
    closed_form_distill, gaussian_initial_weight, iterate_distill, pretrained_initial_weight,
    DistillConfig,
};
use distill_lab::finetune::{euler_oracle, finetune_closed_form, FlowConfig};
use distill_lab::spectral::{
    build_design_matrix, decompose, DesignMatrix, FeatureKind, FeatureMap, SpectralDecomposition,
    SyntheticTask,
};
use distill_lab::Result;
use nalgebra::DVector;

use crate::config::{ExperimentConfig, InitialWeight};
use crate::output::{Cell, Table};
use crate::run::Fault;

pub const HEADER: &[&str] = &[
    "mode",
    "seed",
    "t",
    "zeta",
    "psi",
    "g1",
    "psi1",
    "null_energy",
    "g2",
    "distance",
    "bound_rhs",
    "zeta_drop",
    "psi_drop",
    "distill_residual",
    "flow_residual",
];

/// Perturbation applied to the closed form under `Fault::ClosedForm`.
pub const FAULT_SIZE: f64 = 1e-3;

pub struct Instance {
    pub design: DesignMatrix,
    pub spec: SpectralDecomposition,
    pub labels: DVector<f64>,
    pub w00: DVector<f64>,
    pub w_init: DVector<f64>,
}

pub fn feature_map(kind: FeatureKind, input_dim: usize, d: usize, seed: u64) -> FeatureMap {
    match kind {
        FeatureKind::Identity => FeatureMap::identity(d),
        FeatureKind::RandomTanh => FeatureMap::random_tanh(input_dim, d, seed),
        FeatureKind::RandomFourier => FeatureMap::random_fourier(input_dim, d, seed),
    }
}

pub fn build_instance(cfg: &ExperimentConfig, seed: u64) -> Result<Instance> {
    let task = SyntheticTask::random(cfg.n, cfg.p, cfg.input_dim, cfg.n_pretrain, cfg.shift, seed)?;
    let fmap = feature_map(cfg.feature, cfg.input_dim, cfg.d, seed.wrapping_add(17));
    let design = build_design_matrix(&task, &fmap)?;
    let spec = decompose(&design, cfg.p)?;
    let dim = spec.weight_dim();
    let w00 = match cfg.w00 {
        InitialWeight::Gaussian => gaussian_initial_weight(dim, seed.wrapping_add(1)),
        InitialWeight::Pretrained => {
            pretrained_initial_weight(&task, &fmap, cfg.lambda, seed.wrapping_add(1))?
        }
    };
    let w_init = gaussian_initial_weight(dim, seed.wrapping_add(2));
    Ok(Instance {
        design,
        spec,
        labels: task.label_vector(),
        w00,
        w_init,
    })
}

fn relative(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Rows `t = 0..=rounds` for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, fault: Option<Fault>) -> Result<Vec<Vec<Cell>>> {
    let inst = build_instance(cfg, seed)?;
    let (n, p) = (cfg.n, cfg.p);
    let base = DistillConfig::new(cfg.lambda, cfg.rounds, n)?;
    let flow = FlowConfig::for_spectrum(cfg.horizon, &inst.spec)?;
    let iterated = iterate_distill(&inst.design, p, &inst.w00, &base)?;

    let mut states = Vec::with_capacity(cfg.rounds + 1);
    let mut finals = Vec::with_capacity(cfg.rounds + 1);
    for t in 0..=cfg.rounds {
        let mut state = closed_form_distill(&inst.spec, &inst.w00, &base.with_rounds(t))?;
        if fault == Some(Fault::ClosedForm) {
            state.w *= 1.0 + FAULT_SIZE;
        }
        let w_final = finetune_closed_form(&inst.spec, &state, &inst.labels, &flow)?.w_final;
        states.push(state);
        finals.push(w_final);
    }
    let inputs = BoundInputs::empirical(
        &inst.design,
        p,
        &inst.labels,
        &finals,
        cfg.delta,
        cfg.rademacher_c,
    )?;

    let mut rows = Vec::with_capacity(states.len());
    let mut previous: Option<(f64, f64)> = None;
    for (t, (state, w_final)) in states.iter().zip(&finals).enumerate() {
        let report = bound_report(
            &inst.spec,
            state,
            &inst.labels,
            &flow,
            inst.w_init.norm(),
            &inputs,
        )?;
        let distance = (&inst.w_init - w_final).norm();
        let distill_residual = relative(&state.w, &iterated[t]);
        let mut euler = euler_oracle(&inst.design, p, &inst.labels, &state.w, &flow)?.w;
        if fault == Some(Fault::Flow) {
            euler *= 1.0 + FAULT_SIZE * 10.0;
        }
        let flow_residual = relative(w_final, &euler);
        let drops: [Cell; 2] = match previous {
            Some((z, s)) => [(z - report.zeta).into(), (s - report.psi).into()],
            None => ["".into(), "".into()],
        };
        previous = Some((report.zeta, report.psi));
        let [zeta_drop, psi_drop] = drops;
        rows.push(vec![
            "theory".into(),
            seed.into(),
            t.into(),
            report.zeta.into(),
            report.psi.into(),
            report.g1.into(),
            report.psi1.into(),
            report.null_energy.into(),
            report.g2.into(),
            distance.into(),
            report.bound_rhs.into(),
            zeta_drop,
            psi_drop,
            distill_residual.into(),
            flow_residual.into(),
        ]);
    }
    Ok(rows)
}

pub fn empty_table() -> Table {
    Table::new(HEADER)
}
