//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape once in reverse, so a node's gradient is complete before
//! it is propagated to its operands. Operand shape checks are assertions:
//! they guard internal wiring, while user-facing shape errors are reported
//! by the model layers that build on the tape.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::NumArray;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatVec { w: usize, x: usize, row_start: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    OneMinus(usize),
    ScaleBy { s: usize, v: usize },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
    Row { m: usize, row: usize },
    Stack(Vec<usize>),
    VecMat { a: usize, m: usize },
    Dot(usize, usize),
    Sum(usize),
    Pick { src: usize, index: usize },
    Scatter { src: usize, positions: Vec<usize> },
    MaskedSoftmax { src: usize, mask: Vec<bool> },
    LogSoftmax(usize),
    StraightThrough(usize),
}

/// Node shape of rank 1 or 2, stored inline.
#[derive(Debug, Clone, Copy)]
struct Dims {
    d: [usize; 2],
    rank: usize,
}

impl Dims {
    fn new(shape: &[usize]) -> Self {
        match *shape {
            [n] => Self { d: [n, 0], rank: 1 },
            [r, c] => Self { d: [r, c], rank: 2 },
            _ => panic!("tape nodes have rank 1 or 2, got {shape:?}"),
        }
    }

    fn as_slice(&self) -> &[usize] {
        &self.d[..self.rank]
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Dims,
    value: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    param_index: HashMap<String, usize>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: &[usize], value: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let shape = Dims::new(shape);
        self.nodes.push(Node { op, shape, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].shape.as_slice()
    }

    pub fn size(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "node is not a scalar");
        value[0]
    }

    pub fn to_array(&self, v: Var) -> NumArray {
        let node = &self.nodes[v.0];
        NumArray::new(node.shape.as_slice().to_vec(), node.value.clone()).expect("tape node shape")
    }

    pub fn constant(&mut self, array: &NumArray) -> Var {
        self.push(Op::Leaf, array.shape(), array.data().to_vec())
    }

    pub fn constant_vec(&mut self, values: Vec<f64>) -> Var {
        let len = values.len();
        self.push(Op::Leaf, &[len], values)
    }

    pub fn zeros(&mut self, len: usize) -> Var {
        self.constant_vec(vec![0.0; len])
    }

    /// Leaf for a named parameter. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&idx) = self.param_index.get(name) {
            return Ok(Var(idx));
        }
        let array = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let v = self.constant(array);
        self.param_index.insert(name.to_string(), v.0);
        self.params.push((name.to_string(), v.0));
        Ok(v)
    }

    /// `w[row_start..row_start+rows] · x` for a row-major matrix `w`.
    pub fn matvec_rows(&mut self, w: Var, x: Var, row_start: usize, rows: usize) -> Var {
        let (wr, wc) = self.matrix_dims(w);
        assert!(row_start + rows <= wr, "row block out of range");
        assert_eq!(self.size(x), wc, "matvec operand width");
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = (row_start..row_start + rows)
            .map(|r| {
                wv[r * wc..(r + 1) * wc]
                    .iter()
                    .zip(xv)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        self.push(
            Op::MatVec {
                w: w.0,
                x: x.0,
                row_start,
            }, &[rows],
            out,
        )
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (rows, _) = self.matrix_dims(w);
        self.matvec_rows(w, x, 0, rows)
    }

    fn matrix_dims(&self, w: Var) -> (usize, usize) {
        let shape = self.shape(w);
        match shape {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            _ => panic!("matvec expects a matrix, got shape {shape:?}"),
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        assert_eq!(self.size(a), self.size(b), "elementwise operand sizes");
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.nodes[a.0].shape;
        self.push(op, shape.as_slice(), out)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let shape = self.nodes[a.0].shape;
        self.push(op, shape.as_slice(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a.0, s), |x| x * s)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map(a, Op::OneMinus(a.0), |x| 1.0 - x)
    }

    /// Scalar node `s` times every element of `v`.
    pub fn scale_by(&mut self, s: Var, v: Var) -> Var {
        let factor = self.scalar(s);
        let out = self.nodes[v.0].value.iter().map(|x| factor * x).collect();
        let shape = self.nodes[v.0].shape;
        self.push(Op::ScaleBy { s: s.0, v: v.0 }, shape.as_slice(), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a.0), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::with_capacity(parts.iter().map(|p| self.size(*p)).sum());
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let len = out.len();
        self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), &[len], out)
    }

    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Var {
        let out = self.nodes[src.0].value[start..start + len].to_vec();
        self.push(Op::Slice { src: src.0, start }, &[len], out)
    }

    /// Row `row` of matrix `m`, as a vector.
    pub fn row(&mut self, m: Var, row: usize) -> Var {
        let (rows, cols) = self.matrix_dims(m);
        assert!(row < rows, "row {row} out of range {rows}");
        let out = self.nodes[m.0].value[row * cols..(row + 1) * cols].to_vec();
        self.push(Op::Row { m: m.0, row }, &[cols], out)
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack of nothing");
        let width = self.size(rows[0]);
        let mut out = Vec::with_capacity(width * rows.len());
        for r in rows {
            assert_eq!(self.size(*r), width, "stacked rows differ in length");
            out.extend_from_slice(&self.nodes[r.0].value);
        }
        self.push(
            Op::Stack(rows.iter().map(|r| r.0).collect()), &[rows.len(), width],
            out,
        )
    }

    /// `aᵀ M`: the `a`-weighted sum of the rows of `m`.
    pub fn vecmat(&mut self, a: Var, m: Var) -> Var {
        let (rows, cols) = self.matrix_dims(m);
        assert_eq!(self.size(a), rows, "vecmat weight length");
        let av = &self.nodes[a.0].value;
        let mv = &self.nodes[m.0].value;
        let mut out = vec![0.0; cols];
        for (l, w) in av.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(&mv[l * cols..(l + 1) * cols]) {
                *o += w * x;
            }
        }
        self.push(Op::VecMat { a: a.0, m: m.0 }, &[cols], out)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.size(a), self.size(b), "dot operand sizes");
        let s = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        self.push(Op::Dot(a.0, b.0), &[1], vec![s])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(Op::Sum(a.0), &[1], vec![s])
    }

    /// Sum of several nodes of equal shape.
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let (first, rest) = parts.split_first().expect("add_all of nothing");
        rest.iter().fold(*first, |acc, p| self.add(acc, *p))
    }

    pub fn pick(&mut self, src: Var, index: usize) -> Var {
        let v = self.nodes[src.0].value[index];
        self.push(Op::Pick { src: src.0, index }, &[1], vec![v])
    }

    /// Places the elements of `src` at `positions` in a zero vector of length `len`.
    pub fn scatter(&mut self, src: Var, positions: &[usize], len: usize) -> Var {
        assert_eq!(self.size(src), positions.len(), "scatter positions");
        let mut out = vec![0.0; len];
        for (p, x) in positions.iter().zip(&self.nodes[src.0].value) {
            out[*p] = *x;
        }
        self.push(
            Op::Scatter {
                src: src.0,
                positions: positions.to_vec(),
            }, &[len],
            out,
        )
    }

    /// Softmax over the positions where `mask` is true; exactly zero elsewhere.
    pub fn masked_softmax(&mut self, src: Var, mask: &[bool]) -> Result<Var> {
        let values = &self.nodes[src.0].value;
        if mask.len() != values.len() {
            return Err(Error::dim("mask", &[values.len()], &[mask.len()]));
        }
        let out = masked_softmax_values(values, mask)?;
        Ok(self.push(
            Op::MaskedSoftmax {
                src: src.0,
                mask: mask.to_vec(),
            }, &[mask.len()],
            out,
        ))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let values = &self.nodes[a.0].value;
        let lse = log_sum_exp(values);
        let out = values.iter().map(|x| x - lse).collect();
        self.push(Op::LogSoftmax(a.0), &[values.len()], out)
    }

    /// Hard threshold at 0.5 in the forward pass, identity in the backward pass.
    pub fn straight_through(&mut self, a: Var) -> Var {
        self.map(a, Op::StraightThrough(a.0), |x| if x > 0.5 { 1.0 } else { 0.0 })
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.size(root), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| -> &[f64] { &self.nodes[i].value };
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[i].get_or_insert_with(|| vec![0.0; self.nodes[i].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatVec { w, x, row_start } => {
                let cols = self.nodes[*x].value.len();
                let wv = val(*w);
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for (i, gi) in g.iter().enumerate() {
                        let r = row_start + i;
                        for (gxj, wj) in gx.iter_mut().zip(&wv[r * cols..(r + 1) * cols]) {
                            *gxj += gi * wj;
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for (i, gi) in g.iter().enumerate() {
                        let r = row_start + i;
                        for (gwj, xj) in gw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                            *gwj += gi * xj;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                for (o, gi) in ga.iter_mut().zip(g) {
                    *o += gi * s;
                }
            }),
            Op::OneMinus(a) => acc(*a, &mut |ga| {
                for (o, gi) in ga.iter_mut().zip(g) {
                    *o -= gi;
                }
            }),
            Op::ScaleBy { s, v } => {
                let factor = val(*s)[0];
                let vv = val(*v);
                let gs: f64 = g.iter().zip(vv).map(|(gi, x)| gi * x).sum();
                acc(*s, &mut |o| o[0] += gs);
                acc(*v, &mut |gv| {
                    for (o, gi) in gv.iter_mut().zip(g) {
                        *o += gi * factor;
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((o, gi), y) in ga.iter_mut().zip(g).zip(&node.value) {
                    *o += gi * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((o, gi), y) in ga.iter_mut().zip(g).zip(&node.value) {
                    *o += gi * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[*p].value.len();
                    acc(*p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Slice { src, start } => acc(*src, &mut |gs| {
                add_into(&mut gs[*start..*start + g.len()], g);
            }),
            Op::Row { m, row } => acc(*m, &mut |gm| {
                let cols = g.len();
                add_into(&mut gm[row * cols..(row + 1) * cols], g);
            }),
            Op::Stack(rows) => {
                let width = node.shape.d[1];
                for (l, r) in rows.iter().enumerate() {
                    acc(*r, &mut |gr| add_into(gr, &g[l * width..(l + 1) * width]));
                }
            }
            Op::VecMat { a, m } => {
                let cols = g.len();
                let (av, mv) = (val(*a), val(*m));
                acc(*a, &mut |ga| {
                    for (l, o) in ga.iter_mut().enumerate() {
                        *o += mv[l * cols..(l + 1) * cols]
                            .iter()
                            .zip(g)
                            .map(|(x, gi)| x * gi)
                            .sum::<f64>();
                    }
                });
                acc(*m, &mut |gm| {
                    for (l, w) in av.iter().enumerate() {
                        for (o, gi) in gm[l * cols..(l + 1) * cols].iter_mut().zip(g) {
                            *o += w * gi;
                        }
                    }
                });
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for (o, y) in ga.iter_mut().zip(bv) {
                        *o += g[0] * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for (o, x) in gb.iter_mut().zip(av) {
                        *o += g[0] * x;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Pick { src, index } => acc(*src, &mut |gs| gs[*index] += g[0]),
            Op::Scatter { src, positions } => acc(*src, &mut |gs| {
                for (o, p) in gs.iter_mut().zip(positions) {
                    *o += g[*p];
                }
            }),
            Op::MaskedSoftmax { src, mask } => {
                let p = &node.value;
                let inner: f64 = p.iter().zip(g).map(|(pi, gi)| pi * gi).sum();
                acc(*src, &mut |gs| {
                    for (i, o) in gs.iter_mut().enumerate() {
                        if mask[i] {
                            *o += p[i] * (g[i] - inner);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let total: f64 = g.iter().sum();
                acc(*a, &mut |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += gi - y.exp() * total;
                    }
                });
            }
            Op::StraightThrough(a) => acc(*a, &mut |ga| add_into(ga, g)),
        }
    }

    /// Runs the reverse sweep and adds the gradient of every trainable
    /// parameter leaf into its grad slot in `store`.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(root);
        for (name, idx) in &self.params {
            if store.is_frozen(name) {
                continue;
            }
            if let Some(g) = grads.grads.get(*idx).and_then(|g| g.as_deref()) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(grads)
    }

    /// Parameter gradients by name, ignoring freeze flags.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .map(|(name, idx)| {
                let g = grads
                    .grads
                    .get(*idx)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; self.nodes[*idx].value.len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

/// Normalized exponentials over the masked-in positions of `logits`.
pub fn masked_softmax_values(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidMask);
    }
    let exps: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(x, m)| if *m { (x - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
