//! Masking, the masked auto-encoding loss and the distillation losses.

use nalgebra::DMatrix;
use rand::Rng;

use super::data::Sequence;
use super::model::{
    decode, decode_backward, encode, encode_backward, log_softmax_rows, softmax_rows,
};
use super::params::{check_same_shapes, mars_norm, Mode, ToyModelParams};
use crate::error::{Error, Result};

/// Independent Bernoulli(`gamma`) mask over `len` positions, redrawn until at
/// least one position is masked.
pub fn sample_mask<R: Rng + ?Sized>(len: usize, gamma: f64, rng: &mut R) -> Vec<bool> {
    assert!(
        gamma > 0.0 && gamma < 1.0,
        "masking probability must lie in (0, 1)"
    );
    assert!(len > 0, "cannot mask an empty sequence");
    loop {
        let mask: Vec<bool> = (0..len).map(|_| rng.random_bool(gamma)).collect();
        if mask.iter().any(|&m| m) {
            return mask;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub original: Vec<Sequence>,
    pub masks: Vec<Vec<bool>>,
    /// `Z⁽ʲ⁾`, the number of masked positions of item `j`.
    pub counts: Vec<usize>,
}

impl MaskedBatch {
    pub fn new(original: Vec<Sequence>, masks: Vec<Vec<bool>>) -> Result<Self> {
        if original.len() != masks.len() {
            return Err(Error::DimensionMismatch {
                what: "masks",
                expected: original.len(),
                found: masks.len(),
            });
        }
        let mut counts = Vec::with_capacity(masks.len());
        for (seq, mask) in original.iter().zip(&masks) {
            if mask.len() != seq.len() {
                return Err(Error::DimensionMismatch {
                    what: "mask length",
                    expected: seq.len(),
                    found: mask.len(),
                });
            }
            let z = mask.iter().filter(|&&m| m).count();
            if z == 0 {
                return Err(Error::Domain(
                    "every item needs at least one masked position".into(),
                ));
            }
            counts.push(z);
        }
        Ok(Self {
            original,
            masks,
            counts,
        })
    }

    pub fn sample<R: Rng + ?Sized>(original: Vec<Sequence>, gamma: f64, rng: &mut R) -> Self {
        let masks = original
            .iter()
            .map(|s| sample_mask(s.len(), gamma, rng))
            .collect();
        Self::new(original, masks).expect("sampled masks are valid")
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    /// Token ids of item `j` with masked positions set to `mask_token`.
    pub fn masked_tokens(&self, j: usize, mask_token: usize) -> Option<Vec<usize>> {
        match &self.original[j] {
            Sequence::Tokens(t) => Some(
                t.iter()
                    .zip(&self.masks[j])
                    .map(|(&tok, &m)| if m { mask_token } else { tok })
                    .collect(),
            ),
            Sequence::Patches(_) => None,
        }
    }
}

fn check_mode(params: &ToyModelParams, batch: &MaskedBatch) -> Result<()> {
    if batch.original.iter().any(|s| s.mode() != params.dims.mode) {
        return Err(Error::ModeMismatch);
    }
    Ok(())
}

/// Per-item reconstruction loss and its gradient w.r.t. the decoder output.
fn reconstruction(
    seq: &Sequence,
    mask: &[bool],
    count: usize,
    out: &DMatrix<f64>,
) -> (f64, DMatrix<f64>) {
    let z = count as f64;
    let mut d_out = DMatrix::zeros(out.nrows(), out.ncols());
    let mut loss = 0.0;
    match seq {
        Sequence::Tokens(tokens) => {
            let logp = log_softmax_rows(out);
            for (k, &tok) in tokens.iter().enumerate() {
                if !mask[k] {
                    continue;
                }
                loss -= logp[(k, tok)] / z;
                for c in 0..out.ncols() {
                    let target = if c == tok { 1.0 } else { 0.0 };
                    d_out[(k, c)] = (logp[(k, c)].exp() - target) / z;
                }
            }
        }
        Sequence::Patches(patches) => {
            for k in 0..out.nrows() {
                if !mask[k] {
                    continue;
                }
                for c in 0..out.ncols() {
                    let diff = out[(k, c)] - patches[(k, c)];
                    loss += diff * diff / z;
                    d_out[(k, c)] = 2.0 * diff / z;
                }
            }
        }
    }
    (loss, d_out)
}

/// `L_MAE`: mean over items of `Σ_k (z_k/Z) · nll(x_k | x̂)`, where the
/// negative log-likelihood is cross-entropy (tokens) or `‖x_k − μ_k‖²`
/// (patches).
pub fn mae_loss(params: &ToyModelParams, batch: &MaskedBatch) -> Result<f64> {
    mae_loss_impl(params, batch, None)
}

/// `L_MAE` and its gradient w.r.t. encoder and decoder.
pub fn mae_loss_grad(
    params: &ToyModelParams,
    batch: &MaskedBatch,
) -> Result<(f64, ToyModelParams)> {
    let mut grad = params.zeros_like();
    let loss = mae_loss_impl(params, batch, Some(&mut grad))?;
    Ok((loss, grad))
}

fn mae_loss_impl(
    params: &ToyModelParams,
    batch: &MaskedBatch,
    mut grad: Option<&mut ToyModelParams>,
) -> Result<f64> {
    check_mode(params, batch)?;
    let decoder = params
        .decoder
        .as_ref()
        .ok_or_else(|| Error::ShapeMismatch("masked auto-encoding needs a decoder".into()))?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for j in 0..batch.len() {
        let trace = encode(
            &params.encoder,
            &params.dims,
            &batch.original[j],
            Some(&batch.masks[j]),
        )?;
        let out = decode(decoder, &trace.out);
        let (loss, d_out) =
            reconstruction(&batch.original[j], &batch.masks[j], batch.counts[j], &out);
        total += loss * scale;
        if let Some(g) = grad.as_deref_mut() {
            let d_out = d_out * scale;
            let d_hidden = decode_backward(decoder, &trace.out, &d_out, g.decoder.as_mut());
            encode_backward(
                &params.encoder,
                &params.dims,
                &trace,
                &d_hidden,
                &mut g.encoder,
            );
        }
    }
    Ok(total)
}

/// What the student is matched against during self-distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// `‖f_θ(x) − StopGrad(f_θ₀(x))‖²` on the unmasked input, plus `L_MAE`.
    Representation,
    /// Teacher reconstructions of the masked input, plus `L_MAE`.
    Prediction,
    /// Squared entrywise distance between encoder weights, plus `L_MAE`.
    WeightL2,
    /// Summed max-absolute-row-sum distance between encoder weights, plus `L_MAE`.
    WeightMars,
    /// `L_MAE` only (no distillation term).
    None,
    /// Representation matching only (no `L_MAE`).
    DistillOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Representation,
        Variant::DistillOnly,
        Variant::None,
        Variant::Prediction,
        Variant::WeightL2,
        Variant::WeightMars,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Representation => "full",
            Variant::Prediction => "prediction",
            Variant::WeightL2 => "weight-l2",
            Variant::WeightMars => "weight-mars",
            Variant::None => "none",
            Variant::DistillOnly => "distill-only",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "full" | "representation" => Some(Variant::Representation),
            "prediction" => Some(Variant::Prediction),
            "weight-l2" => Some(Variant::WeightL2),
            "weight-mars" => Some(Variant::WeightMars),
            "none" => Some(Variant::None),
            "distill-only" => Some(Variant::DistillOnly),
            _ => None,
        }
    }

    pub fn uses_mae(&self) -> bool {
        !matches!(self, Variant::DistillOnly)
    }

    pub fn uses_distill(&self) -> bool {
        !matches!(self, Variant::None)
    }
}

/// Gradients of a distillation loss. The teacher is behind a stop gradient,
/// so `teacher` is identically zero.
#[derive(Debug, Clone)]
pub struct DistillGradients {
    pub student: ToyModelParams,
    pub teacher: ToyModelParams,
}

pub fn distill_loss(
    student: &ToyModelParams,
    teacher: &ToyModelParams,
    batch: &MaskedBatch,
    variant: Variant,
) -> Result<f64> {
    distill_impl(student, teacher, batch, variant, None)
}

pub fn distill_loss_grad(
    student: &ToyModelParams,
    teacher: &ToyModelParams,
    batch: &MaskedBatch,
    variant: Variant,
) -> Result<(f64, DistillGradients)> {
    let mut grad = student.zeros_like();
    let loss = distill_impl(student, teacher, batch, variant, Some(&mut grad))?;
    Ok((
        loss,
        DistillGradients {
            student: grad,
            teacher: teacher.zeros_like(),
        },
    ))
}

fn distill_impl(
    student: &ToyModelParams,
    teacher: &ToyModelParams,
    batch: &MaskedBatch,
    variant: Variant,
    mut grad: Option<&mut ToyModelParams>,
) -> Result<f64> {
    if student.dims != teacher.dims {
        return Err(Error::ShapeMismatch(
            "student and teacher dimensions differ".into(),
        ));
    }
    check_mode(student, batch)?;
    let dims = &student.dims;
    let scale = 1.0 / batch.len().max(1) as f64;
    match variant {
        Variant::None => Err(Error::Domain(
            "variant `none` has no distillation loss".into(),
        )),
        Variant::Representation | Variant::DistillOnly => {
            let mut total = 0.0;
            for seq in &batch.original {
                let target = encode(&teacher.encoder, dims, seq, None)?.out;
                let trace = encode(&student.encoder, dims, seq, None)?;
                let diff = &trace.out - &target;
                total += diff.norm_squared() * scale;
                if let Some(g) = grad.as_deref_mut() {
                    encode_backward(
                        &student.encoder,
                        dims,
                        &trace,
                        &(diff * (2.0 * scale)),
                        &mut g.encoder,
                    );
                }
            }
            Ok(total)
        }
        Variant::Prediction => {
            let (s_dec, t_dec) = match (&student.decoder, &teacher.decoder) {
                (Some(s), Some(t)) => (s, t),
                _ => {
                    return Err(Error::ShapeMismatch(
                        "prediction matching needs both decoders".into(),
                    ))
                }
            };
            let mut total = 0.0;
            for (seq, mask) in batch.original.iter().zip(&batch.masks) {
                let t_out = decode(t_dec, &encode(&teacher.encoder, dims, seq, Some(mask))?.out);
                let trace = encode(&student.encoder, dims, seq, Some(mask))?;
                let s_out = decode(s_dec, &trace.out);
                let (loss, d_out) = match dims.mode {
                    Mode::Patch => {
                        let diff = &s_out - &t_out;
                        (diff.norm_squared(), diff * 2.0)
                    }
                    Mode::Token => {
                        // Σ_k KL(p_teacher ‖ p_student)
                        let t_logp = log_softmax_rows(&t_out);
                        let s_logp = log_softmax_rows(&s_out);
                        let t_p = t_logp.map(f64::exp);
                        let kl = t_p.component_mul(&(&t_logp - &s_logp)).sum();
                        (kl, softmax_rows(&s_out) - t_p)
                    }
                };
                total += loss * scale;
                if let Some(g) = grad.as_deref_mut() {
                    let d_hidden =
                        decode_backward(s_dec, &trace.out, &(d_out * scale), g.decoder.as_mut());
                    encode_backward(&student.encoder, dims, &trace, &d_hidden, &mut g.encoder);
                }
            }
            Ok(total)
        }
        Variant::WeightL2 | Variant::WeightMars => {
            let s = student.encoder_only();
            let t = teacher.encoder_only();
            check_same_shapes(&s, &t)?;
            let mut total = 0.0;
            let mut grads = grad.as_mut().map(|g| g.encoder.tensors_mut());
            for (idx, ((_, a), (_, b))) in s
                .encoder
                .tensors()
                .into_iter()
                .zip(t.encoder.tensors())
                .enumerate()
            {
                let diff = a - b;
                if variant == Variant::WeightL2 {
                    total += diff.norm_squared();
                    if let Some(gs) = grads.as_mut() {
                        *gs[idx].1 += &diff * 2.0;
                    }
                } else {
                    total += mars_norm(&diff);
                    if let Some(gs) = grads.as_mut() {
                        let row = (0..diff.nrows())
                            .max_by(|&x, &y| {
                                let sx: f64 = diff.row(x).iter().map(|v| v.abs()).sum();
                                let sy: f64 = diff.row(y).iter().map(|v| v.abs()).sum();
                                sx.total_cmp(&sy)
                            })
                            .expect("non-empty tensor");
                        for c in 0..diff.ncols() {
                            gs[idx].1[(row, c)] +=
                                diff[(row, c)].signum() * (diff[(row, c)] != 0.0) as u8 as f64;
                        }
                    }
                }
            }
            Ok(total)
        }
    }
}

/// Distance from the student to the nearest point where the weight-MARS
/// distillation loss is not differentiable: an entry of a maximal row
/// crossing zero, or a second row reaching the maximal row sum. Finite
/// differences are only meaningful when the stencil stays inside this margin.
pub fn mars_kink_margin(student: &ToyModelParams, teacher: &ToyModelParams) -> Result<f64> {
    let s = student.encoder_only();
    let t = teacher.encoder_only();
    check_same_shapes(&s, &t)?;
    let mut margin = f64::INFINITY;
    for ((_, a), (_, b)) in s.encoder.tensors().into_iter().zip(t.encoder.tensors()) {
        let diff = a - b;
        let sums: Vec<f64> = diff
            .row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum())
            .collect();
        let top = (0..sums.len())
            .max_by(|&x, &y| sums[x].total_cmp(&sums[y]))
            .expect("non-empty tensor");
        for (j, &sj) in sums.iter().enumerate() {
            if j != top {
                // A unit move shifts two row sums by at most two together.
                margin = margin.min((sums[top] - sj) / 2.0);
            }
        }
        for v in diff.row(top).iter() {
            margin = margin.min(v.abs());
        }
    }
    Ok(margin)
}
