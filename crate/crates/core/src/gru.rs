//! Gated recurrent unit.
//!
//! Gate layout along the 3H axis is `[z | r | n]`:
//!
//! ```text
//! z  = σ(Wx_z x + Wh_z h + b_z)
//! r  = σ(Wx_r x + Wh_r h + b_r)
//! n  = tanh(Wx_n x + Wh_n (r ⊙ h) + b_n)
//! h' = (1 − z) ⊙ h + z ⊙ n
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::NumArray;

/// Names and sizes of one GRU's parameters inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GruWeights {
    pub input_to_gates: String,
    pub hidden_to_gates: String,
    pub bias: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruWeights {
    pub fn named(prefix: &str, input: usize, hidden: usize) -> Self {
        Self {
            input_to_gates: format!("{prefix}.wx"),
            hidden_to_gates: format!("{prefix}.wh"),
            bias: format!("{prefix}.b"),
            input,
            hidden,
        }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, group: &str, rng: &mut R) {
        let h3 = 3 * self.hidden;
        store.insert(group, &self.input_to_gates, ParamStore::glorot(rng, &[h3, self.input]));
        store.insert(group, &self.hidden_to_gates, ParamStore::glorot(rng, &[h3, self.hidden]));
        store.insert(group, &self.bias, NumArray::zeros(&[h3]));
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        let h3 = 3 * self.hidden;
        for (name, expected) in [
            (&self.input_to_gates, vec![h3, self.input]),
            (&self.hidden_to_gates, vec![h3, self.hidden]),
            (&self.bias, vec![h3]),
        ] {
            let p = store
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if p.shape() != expected.as_slice() {
                return Err(Error::dim(name.clone(), &expected, p.shape()));
            }
        }
        Ok(())
    }

    /// Binds the weights to tape leaves.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<GruCell> {
        self.check(store)?;
        Ok(GruCell {
            wx: tape.param(store, &self.input_to_gates)?,
            wh: tape.param(store, &self.hidden_to_gates)?,
            b: tape.param(store, &self.bias)?,
            input: self.input,
            hidden: self.hidden,
        })
    }
}

/// A GRU whose weights live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    wx: Var,
    wh: Var,
    b: Var,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn step(&self, tape: &mut Tape, x: Var, h_prev: Var) -> Result<Var> {
        if tape.size(x) != self.input {
            return Err(Error::dim("gru input", &[self.input], tape.shape(x)));
        }
        if tape.size(h_prev) != self.hidden {
            return Err(Error::dim("gru hidden state", &[self.hidden], tape.shape(h_prev)));
        }
        let h = self.hidden;
        let wx = tape.matvec(self.wx, x);
        let gx = tape.add(wx, self.b);
        let gh = tape.matvec_rows(self.wh, h_prev, 0, 2 * h);

        let gx_z = tape.slice(gx, 0, h);
        let gh_z = tape.slice(gh, 0, h);
        let z_pre = tape.add(gx_z, gh_z);
        let z = tape.sigmoid(z_pre);

        let gx_r = tape.slice(gx, h, h);
        let gh_r = tape.slice(gh, h, h);
        let r_pre = tape.add(gx_r, gh_r);
        let r = tape.sigmoid(r_pre);

        let rh = tape.mul(r, h_prev);
        let gh_n = tape.matvec_rows(self.wh, rh, 2 * h, h);
        let gx_n = tape.slice(gx, 2 * h, h);
        let n_pre = tape.add(gx_n, gh_n);
        let n = tape.tanh(n_pre);

        let keep = tape.one_minus(z);
        let kept = tape.mul(keep, h_prev);
        let fresh = tape.mul(z, n);
        Ok(tape.add(kept, fresh))
    }
}

/// One GRU step on plain arrays.
pub fn gru_cell(x: &NumArray, h_prev: &NumArray, w: &GruWeights, store: &ParamStore) -> Result<NumArray> {
    let mut tape = Tape::new();
    let cell = w.bind(&mut tape, store)?;
    let xv = tape.constant(x);
    let hv = tape.constant(h_prev);
    let out = cell.step(&mut tape, xv, hv)?;
    Ok(tape.to_array(out))
}
