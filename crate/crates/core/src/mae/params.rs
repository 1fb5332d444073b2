//! Parameter tensors of the toy masked autoencoder.
//!
//! Every tensor is a `DMatrix<f64>`; biases are `1×k` rows. Matrices act on
//! row vectors (`x W`), so a weight of shape `in×out` maps `R^in → R^out`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Discrete tokens in `0..vocab`, reconstructed with cross-entropy.
    Token,
    /// Continuous patches in `R^patch_dim`, reconstructed with squared error.
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub mode: Mode,
    pub seq_len: usize,
    pub vocab: usize,
    pub patch_dim: usize,
    pub hidden: usize,
    pub ff: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn token(classes: usize) -> Self {
        Self {
            mode: Mode::Token,
            seq_len: 8,
            vocab: 32,
            patch_dim: 4,
            hidden: 16,
            ff: 32,
            classes,
        }
    }

    pub fn patch(classes: usize) -> Self {
        Self {
            mode: Mode::Patch,
            ..Self::token(classes)
        }
    }

    /// Width of one decoder output row: vocabulary logits or a patch mean.
    pub fn output_dim(&self) -> usize {
        match self.mode {
            Mode::Token => self.vocab,
            Mode::Patch => self.patch_dim,
        }
    }

    /// Token id of the mask symbol in token mode.
    pub fn mask_token(&self) -> usize {
        self.vocab
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputEmbedding {
    /// `(vocab + 1)×h`; the last row embeds the mask token.
    Token { table: DMatrix<f64> },
    Patch {
        proj: DMatrix<f64>,
        bias: DMatrix<f64>,
        mask: DMatrix<f64>,
    },
}

/// `f_θ`: embedding, one single-head self-attention block and a tanh
/// feed-forward block, both residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub embed: InputEmbedding,
    pub pos: DMatrix<f64>,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
}

/// `g_φ`: per-position linear read-out.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub w: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// `h_ω`: linear classifier on the mean-pooled representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams {
    pub dims: ModelDims,
    pub encoder: Encoder,
    pub decoder: Option<Decoder>,
    pub head: Option<Head>,
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl Encoder {
    pub fn random<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Self {
        let h = dims.hidden;
        let embed = match dims.mode {
            Mode::Token => InputEmbedding::Token {
                table: gaussian(dims.vocab + 1, h, 0.5, rng),
            },
            Mode::Patch => InputEmbedding::Patch {
                proj: gaussian(dims.patch_dim, h, 1.0 / (dims.patch_dim as f64).sqrt(), rng),
                bias: DMatrix::zeros(1, h),
                mask: gaussian(1, h, 1.0, rng),
            },
        };
        let s = 1.0 / (h as f64).sqrt();
        Self {
            embed,
            pos: gaussian(dims.seq_len, h, 0.25, rng),
            wq: gaussian(h, h, s, rng),
            wk: gaussian(h, h, s, rng),
            wv: gaussian(h, h, s, rng),
            wo: gaussian(h, h, s, rng),
            w1: gaussian(h, dims.ff, s, rng),
            b1: DMatrix::zeros(1, dims.ff),
            w2: gaussian(dims.ff, h, 1.0 / (dims.ff as f64).sqrt(), rng),
            b2: DMatrix::zeros(1, h),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &DMatrix<f64>)> {
        let mut out = match &self.embed {
            InputEmbedding::Token { table } => vec![("encoder.embed.table", table)],
            InputEmbedding::Patch { proj, bias, mask } => vec![
                ("encoder.embed.proj", proj),
                ("encoder.embed.bias", bias),
                ("encoder.embed.mask", mask),
            ],
        };
        out.extend([
            ("encoder.pos", &self.pos),
            ("encoder.wq", &self.wq),
            ("encoder.wk", &self.wk),
            ("encoder.wv", &self.wv),
            ("encoder.wo", &self.wo),
            ("encoder.w1", &self.w1),
            ("encoder.b1", &self.b1),
            ("encoder.w2", &self.w2),
            ("encoder.b2", &self.b2),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut DMatrix<f64>)> {
        let mut out = match &mut self.embed {
            InputEmbedding::Token { table } => vec![("encoder.embed.table", table)],
            InputEmbedding::Patch { proj, bias, mask } => vec![
                ("encoder.embed.proj", proj),
                ("encoder.embed.bias", bias),
                ("encoder.embed.mask", mask),
            ],
        };
        out.extend([
            ("encoder.pos", &mut self.pos),
            ("encoder.wq", &mut self.wq),
            ("encoder.wk", &mut self.wk),
            ("encoder.wv", &mut self.wv),
            ("encoder.wo", &mut self.wo),
            ("encoder.w1", &mut self.w1),
            ("encoder.b1", &mut self.b1),
            ("encoder.w2", &mut self.w2),
            ("encoder.b2", &mut self.b2),
        ]);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }
}

impl Decoder {
    pub fn random<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Self {
        Self {
            w: gaussian(
                dims.hidden,
                dims.output_dim(),
                1.0 / (dims.hidden as f64).sqrt(),
                rng,
            ),
            b: DMatrix::zeros(1, dims.output_dim()),
        }
    }
}

impl Head {
    /// Small random head; `std` is the entry scale of `w`.
    pub fn random<R: Rng + ?Sized>(dims: &ModelDims, std: f64, rng: &mut R) -> Self {
        Self {
            w: gaussian(dims.hidden, dims.classes, std, rng),
            b: DMatrix::zeros(1, dims.classes),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightNorm {
    L2,
    /// Sum over tensors of the maximum absolute row sum.
    Mars,
}

impl ToyModelParams {
    /// Encoder and decoder, no task head.
    pub fn random<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let encoder = Encoder::random(&dims, rng);
        let decoder = Decoder::random(&dims, rng);
        Self {
            dims,
            encoder,
            decoder: Some(decoder),
            head: None,
        }
    }

    /// The same model with decoder and head dropped.
    pub fn encoder_only(&self) -> Self {
        Self {
            dims: self.dims,
            encoder: self.encoder.clone(),
            decoder: None,
            head: None,
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &DMatrix<f64>)> {
        let mut out = self.encoder.tensors();
        if let Some(dec) = &self.decoder {
            out.push(("decoder.w", &dec.w));
            out.push(("decoder.b", &dec.b));
        }
        if let Some(head) = &self.head {
            out.push(("head.w", &head.w));
            out.push(("head.b", &head.b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut DMatrix<f64>)> {
        let mut out = self.encoder.tensors_mut();
        if let Some(dec) = &mut self.decoder {
            out.push(("decoder.w", &mut dec.w));
            out.push(("decoder.b", &mut dec.b));
        }
        if let Some(head) = &mut self.head {
            out.push(("head.w", &mut head.w));
            out.push(("head.b", &mut head.b));
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        check_same_shapes(self, other)?;
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b * alpha;
        }
        Ok(())
    }

    /// All entries concatenated in tensor order, row-major within a tensor.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.tensors() {
            for r in 0..t.nrows() {
                out.extend(t.row(r).iter());
            }
        }
        out
    }

    /// Mutable access to the `index`-th entry of [`Self::flatten`].
    pub fn entry_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for (_, t) in self.tensors_mut() {
            if index < t.len() {
                let cols = t.ncols();
                return Some(&mut t[(index / cols, index % cols)]);
            }
            index -= t.len();
        }
        None
    }

    /// FNV-1a over the bit patterns of every entry; equal iff bitwise equal
    /// (up to hash collisions).
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.flatten() {
            for byte in v.to_bits().to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        hash
    }
}

pub(crate) fn check_same_shapes(a: &ToyModelParams, b: &ToyModelParams) -> Result<()> {
    let ta = a.tensors();
    let tb = b.tensors();
    if ta.len() != tb.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} tensors vs {} tensors",
            ta.len(),
            tb.len()
        )));
    }
    for ((na, x), (nb, y)) in ta.iter().zip(tb.iter()) {
        if na != nb || x.shape() != y.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{na} {:?} vs {nb} {:?}",
                x.shape(),
                y.shape()
            )));
        }
    }
    Ok(())
}

/// Maximum absolute row sum `max_j Σ_i |M_{j,i}|`.
pub fn mars_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn weight_distance(a: &ToyModelParams, b: &ToyModelParams, norm: WeightNorm) -> Result<f64> {
    check_same_shapes(a, b)?;
    let diffs = a
        .tensors()
        .into_iter()
        .zip(b.tensors())
        .map(|((_, x), (_, y))| x - y);
    Ok(match norm {
        WeightNorm::L2 => diffs.map(|d| d.norm_squared()).sum::<f64>().sqrt(),
        WeightNorm::Mars => diffs.map(|d| mars_norm(&d)).sum(),
    })
}
