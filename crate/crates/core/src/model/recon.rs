//! Reconstructs the attended context from the decoder's word logits.

use crate::error::{Error, Result};
use crate::model::Bound;
use crate::tape::{Tape, Var};

/// Runs a GRU over `[d_t; d̄]` and averages its states.
pub fn reconstruct(tape: &mut Tape, p: &Bound, logits: &[Var]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::Empty("reconstructor input"));
    }
    let n = logits.len() as f64;
    let total = tape.add_all(logits);
    let mean = tape.scale(total, 1.0 / n);
    let mut c = tape.zeros(p.config.repr_dim());
    let mut states = Vec::with_capacity(logits.len());
    for &d in logits {
        let x = tape.concat(&[d, mean]);
        c = p.recon.step(tape, x, c)?;
        states.push(c);
    }
    let sum = tape.add_all(&states);
    Ok(tape.scale(sum, 1.0 / n))
}
