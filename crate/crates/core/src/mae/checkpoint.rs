//! Versioned text checkpoints.
//!
//! ```text
//! distill-lab-checkpoint 1
//! dims <token|patch> <seq_len> <vocab> <patch_dim> <hidden> <ff> <classes>
//! parts <decoder 0|1> <head 0|1>
//! tensor <name> <rows> <cols>
//! <row-major values, one per line>
//! ```
//!
//! Values are written as the IEEE-754 bit pattern in hex, so `load(save(p))`
//! equals `p` bitwise, including signed zeros.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Decoder, Head, Mode, ModelDims, ToyModelParams};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "distill-lab-checkpoint";

pub fn save(params: &ToyModelParams) -> String {
    let d = &params.dims;
    let mode = match d.mode {
        Mode::Token => "token",
        Mode::Patch => "patch",
    };
    let mut out = String::new();
    writeln!(out, "{MAGIC} {FORMAT_VERSION}").unwrap();
    writeln!(
        out,
        "dims {mode} {} {} {} {} {} {}",
        d.seq_len, d.vocab, d.patch_dim, d.hidden, d.ff, d.classes
    )
    .unwrap();
    writeln!(
        out,
        "parts {} {}",
        params.decoder.is_some() as u8,
        params.head.is_some() as u8
    )
    .unwrap();
    for (name, t) in params.tensors() {
        writeln!(out, "tensor {name} {} {}", t.nrows(), t.ncols()).unwrap();
        for r in 0..t.nrows() {
            for c in 0..t.ncols() {
                writeln!(out, "{:016x}", t[(r, c)].to_bits()).unwrap();
            }
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn fields<'a>(line: Option<&'a str>, tag: &str, count: usize) -> Result<Vec<&'a str>> {
    let line = line.ok_or_else(|| bad(format!("missing `{tag}` line")))?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.first() != Some(&tag) || parts.len() != count + 1 {
        return Err(bad(format!("malformed `{tag}` line: {line}")));
    }
    Ok(parts[1..].to_vec())
}

fn number(s: &str) -> Result<usize> {
    s.parse().map_err(|_| bad(format!("not a count: {s}")))
}

pub fn load(text: &str) -> Result<ToyModelParams> {
    let mut lines = text.lines();
    let version = fields(lines.next(), MAGIC, 1)?;
    if number(version[0])? != FORMAT_VERSION as usize {
        return Err(bad(format!("unsupported version {}", version[0])));
    }
    let d = fields(lines.next(), "dims", 7)?;
    let mode = match d[0] {
        "token" => Mode::Token,
        "patch" => Mode::Patch,
        other => return Err(bad(format!("unknown mode {other}"))),
    };
    let dims = ModelDims {
        mode,
        seq_len: number(d[1])?,
        vocab: number(d[2])?,
        patch_dim: number(d[3])?,
        hidden: number(d[4])?,
        ff: number(d[5])?,
        classes: number(d[6])?,
    };
    let parts = fields(lines.next(), "parts", 2)?;
    // Build a skeleton of the right shape, then overwrite every entry.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ToyModelParams::random(dims, &mut rng);
    if parts[0] == "0" {
        params.decoder = None;
    } else {
        params.decoder = Some(Decoder::random(&dims, &mut rng));
    }
    if parts[1] == "1" {
        params.head = Some(Head::random(&dims, 1.0, &mut rng));
    }
    for (name, tensor) in params.tensors_mut() {
        let header = fields(lines.next(), "tensor", 3)?;
        if header[0] != name {
            return Err(bad(format!("expected tensor {name}, found {}", header[0])));
        }
        let (rows, cols) = (number(header[1])?, number(header[2])?);
        if (rows, cols) != tensor.shape() {
            return Err(bad(format!(
                "tensor {name}: shape {rows}x{cols}, expected {}x{}",
                tensor.nrows(),
                tensor.ncols()
            )));
        }
        for r in 0..rows {
            for c in 0..cols {
                let line = lines
                    .next()
                    .ok_or_else(|| bad(format!("tensor {name} is truncated")))?;
                let bits = u64::from_str_radix(line.trim(), 16)
                    .map_err(|_| bad(format!("bad value `{line}`")))?;
                tensor[(r, c)] = f64::from_bits(bits);
            }
        }
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(bad("trailing data after last tensor"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        for dims in [ModelDims::token(3), ModelDims::patch(2)] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut params = ToyModelParams::random(dims, &mut rng);
            params.encoder.wq[(0, 0)] = -0.0;
            params.head = Some(Head::random(&dims, 0.1, &mut rng));
            let loaded = load(&save(&params)).unwrap();
            assert_eq!(loaded.checksum(), params.checksum());
            assert_eq!(loaded, params);
            let bare = params.encoder_only();
            assert_eq!(load(&save(&bare)).unwrap(), bare);
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let text = save(&ToyModelParams::random(ModelDims::token(2), &mut rng));
        assert!(load(&text.replace("checkpoint 1", "checkpoint 9")).is_err());
        let truncated: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        assert!(matches!(load(&truncated), Err(Error::Checkpoint(_))));
        assert!(load(&format!("{text}extra\n")).is_err());
    }
}
