//! Reverse-mode tape. Every operation records its inputs and the forward
//! value; [`Tape::backward`] walks the records in reverse creation order.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

/// Flat per-query key index lists for [`Var::segment_attention`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyLists {
    offsets: Vec<usize>,
    keys: Vec<usize>,
}

impl KeyLists {
    pub fn new() -> Self {
        KeyLists {
            offsets: vec![0],
            keys: Vec::new(),
        }
    }

    pub fn push<I: IntoIterator<Item = usize>>(&mut self, keys: I) {
        self.keys.extend(keys);
        self.offsets.push(self.keys.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, q: usize) -> &[usize] {
        &self.keys[self.offsets[q]..self.offsets[q + 1]]
    }

    fn range(&self, q: usize) -> std::ops::Range<usize> {
        self.offsets[q]..self.offsets[q + 1]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Transpose(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    GroupMean(usize, Rc<Vec<Vec<usize>>>),
    MeanRows(usize),
    SoftmaxRows(usize),
    SegmentAttention {
        q: usize,
        k: usize,
        v: usize,
        keys: Rc<KeyLists>,
        probs: Vec<f64>,
    },
    Huber {
        pred: usize,
        target: Rc<Vec<f64>>,
        delta: f64,
    },
    CrossEntropy {
        logits: usize,
        targets: Rc<Vec<usize>>,
        probs: Vec<f64>,
    },
    Sum(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

/// Gradients indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        let shape = &self.shapes[v.id];
        match &self.grads[v.id] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(ga) = acc(grads, nodes, *a) {
                matmul_bt_acc(g, bv.data(), ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                matmul_at_acc(av.data(), g, gb, m, k, n);
            }
        }
        Op::Add(a, b) => {
            for x in [*a, *b] {
                if let Some(gx) = acc(grads, nodes, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            let n = out.cols();
            if let Some(gb) = acc(grads, nodes, *b) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
        }
        Op::Relu(x) => {
            let xv = Rc::clone(&nodes[*x].value);
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, s), v) in gx.iter_mut().zip(g).zip(xv.data()) {
                    if *v > 0.0 {
                        *d += s;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(gp) = acc(grads, nodes, p) {
                    for (r, dst) in gp.chunks_mut(w).enumerate() {
                        let src = &g[r * total + offset..r * total + offset + w];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += w;
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (out.rows(), out.cols());
            if let Some(gx) = acc(grads, nodes, *x) {
                // out is r×c, x is c×r
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::GatherRows(x, idx) => {
            let c = out.cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut gx[src * c..(src + 1) * c];
                    dst.iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::GroupMean(x, groups) => {
            let c = out.cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, members) in groups.iter().enumerate() {
                    let inv = 1.0 / members.len() as f64;
                    let src = &g[r * c..(r + 1) * c];
                    for &m in members {
                        let dst = &mut gx[m * c..(m + 1) * c];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += inv * s);
                    }
                }
            }
        }
        Op::MeanRows(x) => {
            let rows = nodes[*x].value.rows();
            let inv = 1.0 / rows as f64;
            if let Some(gx) = acc(grads, nodes, *x) {
                for row in gx.chunks_mut(g.len()) {
                    row.iter_mut().zip(g).for_each(|(d, s)| *d += inv * s);
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let c = out.cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, p) in out.data().chunks(c).enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let inner = dot(p, gr);
                    for j in 0..c {
                        gx[r * c + j] += p[j] * (gr[j] - inner);
                    }
                }
            }
        }
        Op::SegmentAttention {
            q,
            k,
            v,
            keys,
            probs,
        } => {
            let (qv, kv, vv) = (
                Rc::clone(&nodes[*q].value),
                Rc::clone(&nodes[*k].value),
                Rc::clone(&nodes[*v].value),
            );
            let dk = kv.cols();
            let dv = vv.cols();
            let scale = 1.0 / (dk as f64).sqrt();
            let mut gq = vec![0.0; qv.len()];
            let mut gk = vec![0.0; kv.len()];
            let mut gvv = vec![0.0; vv.len()];
            let mut dp = Vec::new();
            for r in 0..keys.len() {
                let gout = &g[r * dv..(r + 1) * dv];
                let range = keys.range(r);
                let ks = keys.get(r);
                let ps = &probs[range];
                dp.clear();
                dp.extend(ks.iter().map(|&t| dot(gout, vv.row_slice(t))));
                let inner = dot(ps, &dp);
                let qrow = qv.row_slice(r);
                for ((&t, &p), &dpt) in ks.iter().zip(ps).zip(&dp) {
                    let gv_row = &mut gvv[t * dv..(t + 1) * dv];
                    gv_row.iter_mut().zip(gout).for_each(|(d, s)| *d += p * s);
                    let ds = p * (dpt - inner) * scale;
                    if ds != 0.0 {
                        let krow = kv.row_slice(t);
                        let gq_row = &mut gq[r * dk..(r + 1) * dk];
                        gq_row.iter_mut().zip(krow).for_each(|(d, s)| *d += ds * s);
                        let gk_row = &mut gk[t * dk..(t + 1) * dk];
                        gk_row.iter_mut().zip(qrow).for_each(|(d, s)| *d += ds * s);
                    }
                }
            }
            for (x, local) in [(*q, gq), (*k, gk), (*v, gvv)] {
                if let Some(gx) = acc(grads, nodes, x) {
                    gx.iter_mut().zip(&local).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Huber {
            pred,
            target,
            delta,
        } => {
            let pv = Rc::clone(&nodes[*pred].value);
            if let Some(gp) = acc(grads, nodes, *pred) {
                for (((d, s), p), t) in gp.iter_mut().zip(g).zip(pv.data()).zip(target.iter()) {
                    let e = p - t;
                    let de = if e.abs() <= *delta { e } else { delta * e.signum() };
                    *d += s * de;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let c = nodes[*logits].value.cols();
            if let Some(gl) = acc(grads, nodes, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    let s = g[r];
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * c + j] += s * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Numerically stable row softmax over a plain slice.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    fn needs(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(&self, w: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(w);
        let (a, b) = (self.value(), w.value());
        if a.cols() != b.rows() {
            return Err(Error::Shape(format!(
                "matmul {:?} · {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut c = vec![0.0; m * n];
        matmul_acc(a.data(), b.data(), &mut c, m, k, n);
        Ok(self.tape.push(
            Tensor::matrix(m, n, c)?,
            Op::MatMul(self.id, w.id),
            self.needs() || w.needs(),
        ))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self.tape.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Add(self.id, other.id),
            self.needs() || other.needs(),
        ))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let (x, bv) = (self.value(), b.value());
        let n = x.cols();
        if bv.len() != n {
            return Err(Error::Shape(format!("bias of {} for {} columns", bv.len(), n)));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(d, s)| *d += s);
        }
        Ok(self.tape.push(
            Tensor::matrix(x.rows(), n, data)?,
            Op::AddBias(self.id, b.id),
            self.needs() || b.needs(),
        ))
    }

    /// `x · w + b`.
    pub fn linear(&self, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        self.matmul(w)?.add_bias(b)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|v| v * c).collect();
        self.tape.push(
            Tensor::new(x.shape().to_vec(), data).expect("same shape"),
            Op::Scale(self.id, c),
            self.needs(),
        )
    }

    pub fn relu(&self) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|v| v.max(0.0)).collect();
        self.tape.push(
            Tensor::new(x.shape().to_vec(), data).expect("same shape"),
            Op::Relu(self.id),
            self.needs(),
        )
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let rows = values[0].rows();
        if values.iter().any(|v| v.rows() != rows) {
            return Err(Error::Shape("concat parts differ in row count".into()));
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row_slice(r));
            }
        }
        Ok(first.tape.push(
            Tensor::matrix(rows, total, data)?,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            parts.iter().any(Var::needs),
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let t = self.value().reshaped(shape)?;
        Ok(self.tape.push(t, Op::Reshape(self.id), self.needs()))
    }

    pub fn transpose(&self) -> Var<'t> {
        let x = self.value();
        let (r, c) = (x.rows(), x.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        self.tape.push(
            Tensor::matrix(c, r, data).expect("transpose shape"),
            Op::Transpose(self.id),
            self.needs(),
        )
    }

    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx.iter() {
            if r >= x.rows() {
                return Err(Error::Bounds {
                    index: r,
                    limit: x.rows(),
                });
            }
            data.extend_from_slice(x.row_slice(r));
        }
        Ok(self.tape.push(
            Tensor::matrix(idx.len(), c, data)?,
            Op::GatherRows(self.id, idx),
            self.needs(),
        ))
    }

    /// Row `g` of the output is the mean of the rows listed in `groups[g]`.
    pub fn group_mean(&self, groups: Rc<Vec<Vec<usize>>>) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.cols();
        let mut data = vec![0.0; groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Shape(format!("group {g} is empty")));
            }
            let dst = &mut data[g * c..(g + 1) * c];
            for &m in members {
                if m >= x.rows() {
                    return Err(Error::Bounds {
                        index: m,
                        limit: x.rows(),
                    });
                }
                dst.iter_mut().zip(x.row_slice(m)).for_each(|(d, s)| *d += s);
            }
            let inv = 1.0 / members.len() as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        Ok(self.tape.push(
            Tensor::matrix(groups.len(), c, data)?,
            Op::GroupMean(self.id, groups),
            self.needs(),
        ))
    }

    /// Column-wise mean over rows, giving `1 × cols`.
    pub fn mean_rows(&self) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let mut data = vec![0.0; c];
        for row in x.data().chunks(c) {
            data.iter_mut().zip(row).for_each(|(d, s)| *d += s);
        }
        let inv = 1.0 / x.rows() as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        self.tape.push(Tensor::row(data), Op::MeanRows(self.id), self.needs())
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.tape.push(
            Tensor::matrix(x.rows(), c, data).expect("same shape"),
            Op::SoftmaxRows(self.id),
            self.needs(),
        )
    }

    /// Scaled dot-product attention where query row `r` attends only to the
    /// key/value rows listed in `keys.get(r)`:
    /// `out_r = Σ_t softmax_t(q_r·k_t / √d_k) v_t`.
    pub fn segment_attention(&self, k: &Var<'t>, v: &Var<'t>, keys: Rc<KeyLists>) -> Result<Var<'t>> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        if qv.cols() != kv.cols() || kv.rows() != vv.rows() || keys.len() != qv.rows() {
            return Err(Error::Shape(format!(
                "attention Q {:?}, K {:?}, V {:?}, {} key lists",
                qv.shape(),
                kv.shape(),
                vv.shape(),
                keys.len()
            )));
        }
        let dk = kv.cols();
        let dv = vv.cols();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut probs = Vec::with_capacity(keys.keys.len());
        let mut out = vec![0.0; keys.len() * dv];
        for r in 0..keys.len() {
            let ks = keys.get(r);
            if ks.is_empty() {
                return Err(Error::Shape(format!("query {r} has no keys")));
            }
            if let Some(&bad) = ks.iter().find(|&&t| t >= kv.rows()) {
                return Err(Error::Bounds {
                    index: bad,
                    limit: kv.rows(),
                });
            }
            let qrow = qv.row_slice(r);
            let start = probs.len();
            probs.extend(ks.iter().map(|&t| dot(qrow, kv.row_slice(t)) * scale));
            softmax_in_place(&mut probs[start..]);
            let orow = &mut out[r * dv..(r + 1) * dv];
            for (&t, &p) in ks.iter().zip(&probs[start..]) {
                orow.iter_mut().zip(vv.row_slice(t)).for_each(|(d, s)| *d += p * s);
            }
        }
        Ok(self.tape.push(
            Tensor::matrix(keys.len(), dv, out)?,
            Op::SegmentAttention {
                q: self.id,
                k: k.id,
                v: v.id,
                keys,
                probs,
            },
            self.needs() || k.needs() || v.needs(),
        ))
    }

    /// Element-wise Huber loss against constant targets.
    pub fn huber(&self, target: Rc<Vec<f64>>, delta: f64) -> Result<Var<'t>> {
        let p = self.value();
        if p.len() != target.len() {
            return Err(Error::Shape(format!(
                "huber over {} predictions and {} targets",
                p.len(),
                target.len()
            )));
        }
        let data = p
            .data()
            .iter()
            .zip(target.iter())
            .map(|(x, t)| huber_value(x - t, delta))
            .collect();
        Ok(self.tape.push(
            Tensor::new(p.shape().to_vec(), data)?,
            Op::Huber {
                pred: self.id,
                target,
                delta,
            },
            self.needs(),
        ))
    }

    /// Per-row negative log-likelihood of `targets` under row-softmax of the
    /// logits, giving `rows × 1`.
    pub fn cross_entropy(&self, targets: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let l = self.value();
        let c = l.cols();
        if targets.len() != l.rows() {
            return Err(Error::Contract(format!(
                "{} targets for {} logit rows",
                targets.len(),
                l.rows()
            )));
        }
        let mut probs = l.data().to_vec();
        let mut nll = Vec::with_capacity(targets.len());
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let t = targets[r];
            if t >= c {
                return Err(Error::Bounds { index: t, limit: c });
            }
            let logits = l.row_slice(r);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll.push(lse - logits[t]);
            softmax_in_place(row);
        }
        Ok(self.tape.push(
            Tensor::matrix(targets.len(), 1, nll)?,
            Op::CrossEntropy {
                logits: self.id,
                targets,
                probs,
            },
            self.needs(),
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(total), Op::Sum(self.id), self.needs())
    }

    /// Plain scaled dot-product attention with a trailing learned weight:
    /// `softmax(Q Kᵀ / √d_k) V W`, built from primitive ops. With `causal`,
    /// query `p` sees keys `0..=p + (keys - queries)`.
    pub fn attention(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>, w: &Var<'t>, causal: bool) -> Result<Var<'t>> {
        let (nq, nk, dk) = (q.value().rows(), k.value().rows(), k.value().cols());
        if q.value().cols() != dk {
            return Err(Error::Shape("query and key widths differ".into()));
        }
        let scores = q.matmul(&k.transpose())?.scale(1.0 / (dk as f64).sqrt());
        let scores = if causal {
            let offset = nk.saturating_sub(nq);
            let mut m = vec![0.0; nq * nk];
            for r in 0..nq {
                for c in (r + offset + 1)..nk {
                    m[r * nk + c] = f64::NEG_INFINITY;
                }
            }
            scores.add(&q.tape.constant(Tensor::matrix(nq, nk, m)?))?
        } else {
            scores
        };
        scores.softmax_rows().matmul(v)?.matmul(w)
    }
}

pub fn huber_value(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * e.abs() - 0.5 * delta * delta
    }
}
