//! Bidirectional GRU photo encoder with a linear skip from the raw features.

use crate::error::{Error, Result};
use crate::model::Bound;
use crate::tape::{Tape, Var};
use crate::tensor::NumArray;

#[derive(Debug, Clone)]
pub struct PhotoEncoding {
    /// `v_i = ReLU([→h_i; ←h_i] + W_f f_i)`, one per photo.
    pub v: Vec<Var>,
    pub fwd: Vec<Var>,
    /// `bwd[i]` is the backward state after reading photos m..i.
    pub bwd: Vec<Var>,
}

impl PhotoEncoding {
    /// Forward state after the last photo.
    pub fn fwd_final(&self) -> Var {
        *self.fwd.last().expect("non-empty album")
    }

    /// Backward state after reading back to the first photo.
    pub fn bwd_final(&self) -> Var {
        self.bwd[0]
    }

    /// V as an `[m × D_v]` array.
    pub fn matrix(&self, tape: &Tape) -> NumArray {
        let width = tape.size(self.v[0]);
        let data = self.v.iter().flat_map(|v| tape.value(*v).to_vec()).collect();
        NumArray::new(vec![self.v.len(), width], data).expect("photo matrix")
    }
}

pub fn encode_photos(tape: &mut Tape, p: &Bound, features: &[Var]) -> Result<PhotoEncoding> {
    if features.is_empty() {
        return Err(Error::Empty("album has no photos"));
    }
    let f_dim = p.config.feature_dim;
    for f in features {
        if tape.size(*f) != f_dim {
            return Err(Error::dim("photo features", &[f_dim], tape.shape(*f)));
        }
    }
    let m = features.len();
    let hidden = p.config.photo_hidden;

    let mut fwd = Vec::with_capacity(m);
    let mut h = tape.zeros(hidden);
    for f in features {
        h = p.photo_fwd.step(tape, *f, h)?;
        fwd.push(h);
    }

    let mut bwd = vec![h; m];
    let mut h = tape.zeros(hidden);
    for i in (0..m).rev() {
        h = p.photo_bwd.step(tape, features[i], h)?;
        bwd[i] = h;
    }

    let v = (0..m)
        .map(|i| {
            let both = tape.concat(&[fwd[i], bwd[i]]);
            let skip = tape.matvec(p.skip, features[i]);
            let pre = tape.add(both, skip);
            tape.relu(pre)
        })
        .collect();
    Ok(PhotoEncoding { v, fwd, bwd })
}
