//! Scene boundary detection and resettable scene GRU.
//!
//! For each photo i the detector scores `σ(w_svᵀ v_i + w_shᵀ h + b_s)`
//! against the scene state h. When the flag fires (i > 1), h is emitted as
//! a scene representation and cleared to zero; otherwise the slot holds a
//! masked-out zero row. The GRU then reads v_i. After the last photo the
//! final state closes the last scene.

use crate::error::{Error, Result};
use crate::model::Bound;
use crate::tape::{Tape, Var};

/// How boundary flags enter the graph.
#[derive(Debug, Clone, PartialEq)]
pub enum FlagMode {
    /// Hard threshold with a straight-through backward pass.
    Detect,
    /// `soft + (hard − soft)` with the difference held constant: the same
    /// forward values as `Detect`, differentiated through ordinary ops.
    Relaxed,
    /// Externally supplied flags; the detector is off the loss path.
    /// The first entry is ignored.
    Fixed(Vec<bool>),
}

#[derive(Debug, Clone)]
pub struct SceneSegmentation {
    /// Boundary flag per photo; the first photo never opens a boundary.
    pub flags: Vec<bool>,
    /// Detector probability per photo.
    pub soft: Vec<f64>,
    pub soft_vars: Vec<Var>,
    /// One slot per photo position plus the closing slot; `None` marks a
    /// false scene (an exact zero row).
    pub rows: Vec<Option<Var>>,
    pub mask: Vec<bool>,
    /// Number of true scenes.
    pub u: usize,
    /// Scene state entering step i after any reset, before reading v_i.
    pub entering: Vec<Var>,
}

impl SceneSegmentation {
    /// 0-based scene index of every photo.
    pub fn scene_index(&self) -> Vec<usize> {
        let mut scene = 0;
        self.flags
            .iter()
            .map(|&k| {
                if k {
                    scene += 1;
                }
                scene
            })
            .collect()
    }
}

/// Detector probability for photo representation `v` against scene state `h_prev`.
pub fn detect_boundary(tape: &mut Tape, p: &Bound, v: Var, h_prev: Var) -> Var {
    let a = tape.dot(p.det_v, v);
    let b = tape.dot(p.det_h, h_prev);
    let s = tape.add(a, b);
    let pre = tape.add(s, p.det_b);
    tape.sigmoid(pre)
}

pub fn encode_scenes(tape: &mut Tape, p: &Bound, v: &[Var], mode: &FlagMode) -> Result<SceneSegmentation> {
    let m = v.len();
    if m == 0 {
        return Err(Error::Empty("album has no photos"));
    }
    if let FlagMode::Fixed(flags) = mode {
        if flags.len() != m {
            return Err(Error::dim("fixed flags", &[m], &[flags.len()]));
        }
    }
    let d = p.config.repr_dim();
    let mut h = tape.zeros(d);
    let mut seg = SceneSegmentation {
        flags: Vec::with_capacity(m),
        soft: Vec::with_capacity(m),
        soft_vars: Vec::with_capacity(m),
        rows: Vec::with_capacity(m + 1),
        mask: Vec::with_capacity(m + 1),
        u: 0,
        entering: Vec::with_capacity(m),
    };

    for (i, &vi) in v.iter().enumerate() {
        let soft = detect_boundary(tape, p, vi, h);
        let soft_value = tape.scalar(soft);
        seg.soft.push(soft_value);
        seg.soft_vars.push(soft);

        if i == 0 {
            seg.flags.push(false);
            seg.rows.push(None);
            seg.mask.push(false);
        } else {
            let k = match mode {
                FlagMode::Detect => tape.straight_through(soft),
                FlagMode::Relaxed => {
                    let hard = if soft_value > 0.5 { 1.0 } else { 0.0 };
                    let gap = tape.constant_vec(vec![hard - soft_value]);
                    tape.add(soft, gap)
                }
                FlagMode::Fixed(flags) => tape.constant_vec(vec![if flags[i] { 1.0 } else { 0.0 }]),
            };
            let fired = tape.scalar(k) > 0.5;
            seg.flags.push(fired);
            if fired {
                let emitted = tape.scale_by(k, h);
                seg.rows.push(Some(emitted));
                seg.mask.push(true);
                seg.u += 1;
            } else {
                seg.rows.push(None);
                seg.mask.push(false);
            }
            let keep = tape.one_minus(k);
            h = tape.scale_by(keep, h);
        }
        seg.entering.push(h);
        h = p.scene.step(tape, vi, h)?;
    }

    seg.rows.push(Some(h));
    seg.mask.push(true);
    seg.u += 1;
    Ok(seg)
}
