//! Forward passes with cached activations, and their hand-derived backward
//! passes. Each backward accumulates into a gradient container shaped like
//! the parameters, so several losses can share one container.

use nalgebra::DMatrix;

use super::data::Sequence;
use super::params::{Decoder, Encoder, Head, InputEmbedding, ModelDims};
use crate::error::{Error, Result};

fn add_row_bias(m: &mut DMatrix<f64>, bias: &DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        row += bias.row(0);
    }
}

fn column_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Row-wise `log softmax`.
pub fn log_softmax_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.apply(|v| *v -= lse);
    }
    out
}

enum EmbeddedInput {
    Tokens(Vec<usize>),
    Patches {
        patches: DMatrix<f64>,
        masked: Vec<bool>,
    },
}

/// Activations of one encoder pass over one sequence.
pub struct EncoderTrace {
    input: EmbeddedInput,
    x0: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    attn: DMatrix<f64>,
    ctx: DMatrix<f64>,
    x1: DMatrix<f64>,
    act: DMatrix<f64>,
    /// `K×h` per-position representation `f_θ(x)`.
    pub out: DMatrix<f64>,
}

/// `f_θ(x̂)`, where positions with `mask[k] = true` see the mask embedding.
pub fn encode(
    enc: &Encoder,
    dims: &ModelDims,
    seq: &Sequence,
    mask: Option<&[bool]>,
) -> Result<EncoderTrace> {
    let len = seq.len();
    if len != dims.seq_len {
        return Err(Error::DimensionMismatch {
            what: "sequence length",
            expected: dims.seq_len,
            found: len,
        });
    }
    if let Some(m) = mask {
        if m.len() != len {
            return Err(Error::DimensionMismatch {
                what: "mask length",
                expected: len,
                found: m.len(),
            });
        }
    }
    let is_masked = |k: usize| mask.is_some_and(|m| m[k]);
    let (input, mut x0) = match (&enc.embed, seq) {
        (InputEmbedding::Token { table }, Sequence::Tokens(tokens)) => {
            let ids: Vec<usize> = tokens
                .iter()
                .enumerate()
                .map(|(k, &t)| if is_masked(k) { dims.mask_token() } else { t })
                .collect();
            let x0 = DMatrix::from_fn(len, dims.hidden, |k, j| table[(ids[k], j)]);
            (EmbeddedInput::Tokens(ids), x0)
        }
        (
            InputEmbedding::Patch {
                proj,
                bias,
                mask: mask_emb,
            },
            Sequence::Patches(patches),
        ) => {
            let mut x0 = patches * proj;
            add_row_bias(&mut x0, bias);
            let masked: Vec<bool> = (0..len).map(is_masked).collect();
            for (k, &m) in masked.iter().enumerate() {
                if m {
                    x0.row_mut(k).copy_from(&mask_emb.row(0));
                }
            }
            (
                EmbeddedInput::Patches {
                    patches: patches.clone(),
                    masked,
                },
                x0,
            )
        }
        _ => return Err(Error::ModeMismatch),
    };
    x0 += &enc.pos;

    let scale = 1.0 / (dims.hidden as f64).sqrt();
    let q = &x0 * &enc.wq;
    let k = &x0 * &enc.wk;
    let v = &x0 * &enc.wv;
    let attn = softmax_rows(&((&q * k.transpose()) * scale));
    let ctx = &attn * &v;
    let x1 = &x0 + &ctx * &enc.wo;
    let mut pre = &x1 * &enc.w1;
    add_row_bias(&mut pre, &enc.b1);
    let act = pre.map(f64::tanh);
    let mut out = &x1 + &act * &enc.w2;
    add_row_bias(&mut out, &enc.b2);
    Ok(EncoderTrace {
        input,
        x0,
        q,
        k,
        v,
        attn,
        ctx,
        x1,
        act,
        out,
    })
}

/// Accumulates `∂/∂θ` given `d_out = ∂loss/∂f_θ(x̂)`.
pub fn encode_backward(
    enc: &Encoder,
    dims: &ModelDims,
    trace: &EncoderTrace,
    d_out: &DMatrix<f64>,
    grad: &mut Encoder,
) {
    // feed-forward block
    grad.w2 += trace.act.transpose() * d_out;
    grad.b2 += column_sums(d_out);
    let d_act = d_out * enc.w2.transpose();
    let d_pre = d_act.zip_map(&trace.act, |g, a| g * (1.0 - a * a));
    grad.w1 += trace.x1.transpose() * &d_pre;
    grad.b1 += column_sums(&d_pre);
    let d_x1 = d_out + &d_pre * enc.w1.transpose();

    // attention block
    grad.wo += trace.ctx.transpose() * &d_x1;
    let d_ctx = &d_x1 * enc.wo.transpose();
    let d_attn = &d_ctx * trace.v.transpose();
    let d_v = trace.attn.transpose() * &d_ctx;
    let mut d_scores = trace.attn.component_mul(&d_attn);
    for (r, mut row) in d_scores.row_iter_mut().enumerate() {
        let dot: f64 = row.sum();
        for (c, entry) in row.iter_mut().enumerate() {
            *entry -= trace.attn[(r, c)] * dot;
        }
    }
    d_scores *= 1.0 / (dims.hidden as f64).sqrt();
    let d_q = &d_scores * &trace.k;
    let d_k = d_scores.transpose() * &trace.q;
    grad.wq += trace.x0.transpose() * &d_q;
    grad.wk += trace.x0.transpose() * &d_k;
    grad.wv += trace.x0.transpose() * &d_v;
    let d_x0 =
        &d_x1 + &d_q * enc.wq.transpose() + &d_k * enc.wk.transpose() + &d_v * enc.wv.transpose();

    // embeddings
    grad.pos += &d_x0;
    match (&mut grad.embed, &trace.input) {
        (InputEmbedding::Token { table }, EmbeddedInput::Tokens(ids)) => {
            for (k, &id) in ids.iter().enumerate() {
                let mut row = table.row_mut(id);
                row += d_x0.row(k);
            }
        }
        (
            InputEmbedding::Patch { proj, bias, mask },
            EmbeddedInput::Patches { patches, masked },
        ) => {
            for (k, &m) in masked.iter().enumerate() {
                if m {
                    let mut row = mask.row_mut(0);
                    row += d_x0.row(k);
                } else {
                    *proj += patches.row(k).transpose() * d_x0.row(k);
                    let mut row = bias.row_mut(0);
                    row += d_x0.row(k);
                }
            }
        }
        _ => unreachable!("gradient container built from the same encoder"),
    }
}

/// `g_φ(h)`: per-position logits or patch means, `K×out`.
pub fn decode(dec: &Decoder, hidden: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = hidden * &dec.w;
    add_row_bias(&mut out, &dec.b);
    out
}

/// Accumulates decoder gradients and returns `∂loss/∂hidden`.
pub fn decode_backward(
    dec: &Decoder,
    hidden: &DMatrix<f64>,
    d_out: &DMatrix<f64>,
    grad: Option<&mut Decoder>,
) -> DMatrix<f64> {
    if let Some(g) = grad {
        g.w += hidden.transpose() * d_out;
        g.b += column_sums(d_out);
    }
    d_out * dec.w.transpose()
}

/// Class logits `1×C` from the mean-pooled representation.
pub fn classify(head: &Head, hidden: &DMatrix<f64>) -> DMatrix<f64> {
    let pooled = column_sums(hidden) / hidden.nrows() as f64;
    let mut logits = pooled * &head.w;
    add_row_bias(&mut logits, &head.b);
    logits
}

/// Accumulates head gradients and returns `∂loss/∂hidden`.
pub fn classify_backward(
    head: &Head,
    hidden: &DMatrix<f64>,
    d_logits: &DMatrix<f64>,
    grad: &mut Head,
) -> DMatrix<f64> {
    let rows = hidden.nrows();
    let pooled = column_sums(hidden) / rows as f64;
    grad.w += pooled.transpose() * d_logits;
    grad.b += d_logits;
    let d_pooled = d_logits * head.w.transpose() / rows as f64;
    DMatrix::from_fn(rows, hidden.ncols(), |_, j| d_pooled[(0, j)])
}
