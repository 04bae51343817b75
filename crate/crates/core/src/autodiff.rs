//! Minimal vector-valued reverse-mode differentiation.
//!
//! A [`Tape`] records each operation of a forward pass as a node holding its
//! value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! parameter gradients into a [`Grads`] buffer shaped like the
//! [`ParamStore`]. Every operation the model needs is a dedicated node type,
//! which keeps the tape short: one node per layer rather than per scalar.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Dense row-major matrix (a column vector when `cols == 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| vec![0.0; t.len()]).collect())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    /// `self += other * scale`, tensor by tensor in index order.
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y * scale;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Sparse feature vector: `(index, value)` pairs.
pub type SparseInput = Arc<Vec<(usize, f64)>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    /// `W x + b` for a sparse `x`; gradients go straight to the store.
    SparseAffine {
        weight: ParamId,
        bias: ParamId,
        input: SparseInput,
        cols: usize,
    },
    MatVec {
        w: Var,
        x: Var,
        cols: usize,
    },
    Row {
        m: Var,
        cols: usize,
        row: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `c - x`
    ConstMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogFloor(Var, f64),
    Concat(Vec<Var>),
    Index(Var, usize),
    Sum(Var),
    Dot(Var, Var),
    ScaleBy(Var, Var),
    /// Forward value is fixed; the gradient flows unchanged into `surrogate`.
    StraightThrough(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).data.clone(), Op::Param(id))
    }

    pub fn sparse_affine(
        &mut self,
        store: &ParamStore,
        weight: ParamId,
        bias: ParamId,
        input: SparseInput,
    ) -> Var {
        let w = store.get(weight);
        let mut out = store.get(bias).data.clone();
        debug_assert_eq!(out.len(), w.rows);
        for &(j, x) in input.iter() {
            for (r, o) in out.iter_mut().enumerate() {
                *o += w.data[r * w.cols + j] * x;
            }
        }
        let cols = w.cols;
        self.push(
            out,
            Op::SparseAffine {
                weight,
                bias,
                input,
                cols,
            },
        )
    }

    /// `w` holds a row-major `rows × cols` matrix with `cols == len(x)`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let cols = self.value(x).len();
        let wv = self.value(w);
        assert_eq!(wv.len() % cols, 0, "matvec shape mismatch");
        let xv = self.value(x);
        let out = wv.chunks(cols).map(|row| dot(row, xv)).collect();
        self.push(out, Op::MatVec { w, x, cols })
    }

    pub fn row(&mut self, m: Var, cols: usize, row: usize) -> Var {
        let v = self.value(m)[row * cols..(row + 1) * cols].to_vec();
        self.push(v, Op::Row { m, cols, row })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * c).collect();
        self.push(v, Op::Scale(a, c))
    }

    pub fn const_minus(&mut self, c: f64, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| c - x).collect();
        self.push(v, Op::ConstMinus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).iter().map(|x| x.max(floor).ln()).collect();
        self.push(v, Op::LogFloor(a, floor))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let v = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let v = vec![self.value(a)[i]];
        self.push(v, Op::Index(a, i))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = vec![self.value(a).iter().sum()];
        self.push(v, Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = vec![dot(self.value(a), self.value(b))];
        self.push(v, Op::Dot(a, b))
    }

    /// Vector `a` times scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let v = self.value(a).iter().map(|x| x * c).collect();
        self.push(v, Op::ScaleBy(a, s))
    }

    /// Presents `forward` to downstream ops while routing gradients into
    /// `surrogate` as if it had been used instead.
    pub fn straight_through(&mut self, forward: Vec<f64>, surrogate: Var) -> Var {
        assert_eq!(forward.len(), self.value(surrogate).len());
        self.push(forward, Op::StraightThrough(surrogate))
    }

    /// Reverse sweep from scalar `loss`, adding `d loss / d param` into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Grads) {
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        adj[loss.0][0] = 1.0;
        for idx in (0..=loss.0).rev() {
            let g = std::mem::take(&mut adj[idx]);
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => add_into(&mut grads.0[id.0], &g),
                Op::SparseAffine {
                    weight,
                    bias,
                    input,
                    cols,
                } => {
                    add_into(&mut grads.0[bias.0], &g);
                    let gw = &mut grads.0[weight.0];
                    for &(j, x) in input.iter() {
                        for (r, gr) in g.iter().enumerate() {
                            gw[r * cols + j] += gr * x;
                        }
                    }
                }
                Op::MatVec { w, x, cols } => {
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        for c in 0..*cols {
                            adj[w.0][r * cols + c] += gr * xv[c];
                            adj[x.0][c] += gr * wv[r * cols + c];
                        }
                    }
                }
                Op::Row { m, cols, row } => {
                    for (c, gv) in g.iter().enumerate() {
                        adj[m.0][row * cols + c] += gv;
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut adj[a.0], &g);
                    add_into(&mut adj[b.0], &g);
                }
                Op::Sub(a, b) => {
                    add_into(&mut adj[a.0], &g);
                    for (t, gv) in adj[b.0].iter_mut().zip(&g) {
                        *t -= gv;
                    }
                }
                Op::Mul(a, b) => {
                    for i in 0..g.len() {
                        let (av, bv) = (self.nodes[a.0].value[i], self.nodes[b.0].value[i]);
                        adj[a.0][i] += g[i] * bv;
                        adj[b.0][i] += g[i] * av;
                    }
                }
                Op::Scale(a, c) => {
                    for (t, gv) in adj[a.0].iter_mut().zip(&g) {
                        *t += gv * c;
                    }
                }
                Op::ConstMinus(a) => {
                    for (t, gv) in adj[a.0].iter_mut().zip(&g) {
                        *t -= gv;
                    }
                }
                Op::Tanh(a) => {
                    for (i, gv) in g.iter().enumerate() {
                        let y = node.value[i];
                        adj[a.0][i] += gv * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    for (i, gv) in g.iter().enumerate() {
                        let y = node.value[i];
                        adj[a.0][i] += gv * y * (1.0 - y);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy = dot(&g, y);
                    for i in 0..y.len() {
                        adj[a.0][i] += y[i] * (g[i] - gy);
                    }
                }
                Op::LogFloor(a, floor) => {
                    for (i, gv) in g.iter().enumerate() {
                        let x = self.nodes[a.0].value[i];
                        if x > *floor {
                            adj[a.0][i] += gv / x;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        add_into(&mut adj[p.0], &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Index(a, i) => adj[a.0][*i] += g[0],
                Op::Sum(a) => {
                    for t in adj[a.0].iter_mut() {
                        *t += g[0];
                    }
                }
                Op::Dot(a, b) => {
                    // `a` and `b` may be the same node.
                    #[allow(clippy::needless_range_loop)]
                    for i in 0..self.nodes[a.0].value.len() {
                        let (av, bv) = (self.nodes[a.0].value[i], self.nodes[b.0].value[i]);
                        adj[a.0][i] += g[0] * bv;
                        adj[b.0][i] += g[0] * av;
                    }
                }
                Op::ScaleBy(a, s) => {
                    let c = self.nodes[s.0].value[0];
                    let av = &self.nodes[a.0].value;
                    let mut gs = 0.0;
                    for i in 0..g.len() {
                        gs += g[i] * av[i];
                    }
                    for (t, gv) in adj[a.0].iter_mut().zip(&g) {
                        *t += gv * c;
                    }
                    adj[s.0][0] += gs;
                }
                Op::StraightThrough(s) => add_into(&mut adj[s.0], &g),
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "elementwise shape mismatch");
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Builds a scalar function of every op, then compares the tape gradient
    /// against central differences on each parameter entry.
    fn check(build: impl Fn(&mut Tape, &ParamStore) -> Var, store: &ParamStore) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        let mut grads = store.zero_grads();
        tape.backward(loss, &mut grads);
        let h = 1e-5;
        for (ti, t) in store.tensors.iter().enumerate() {
            for k in 0..t.len() {
                let mut plus = store.clone();
                plus.tensors[ti].data[k] += h;
                let mut minus = store.clone();
                minus.tensors[ti].data[k] -= h;
                let f = |s: &ParamStore| {
                    let mut tp = Tape::new();
                    let l = build(&mut tp, s);
                    tp.scalar(l)
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = grads.0[ti][k];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-6, "{}[{k}]: analytic {an} vs fd {fd}", store.names[ti]);
            }
        }
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let fill = |n: usize, seed: f64| (0..n).map(|i| ((i as f64 + seed) * 0.7).sin() * 0.8).collect();
        s.add("w", Tensor { rows: 3, cols: 4, data: fill(12, 1.0) });
        s.add("x", Tensor { rows: 4, cols: 1, data: fill(4, 5.0) });
        s.add("sw", Tensor { rows: 3, cols: 6, data: fill(18, 2.0) });
        s.add("sb", Tensor { rows: 3, cols: 1, data: fill(3, 9.0) });
        s
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let s = store();
        let sparse: SparseInput = Arc::new(vec![(0, 1.0), (3, 0.5), (5, -2.0)]);
        check(
            |t, s| {
                let w = t.param(s, ParamId(0));
                let x = t.param(s, ParamId(1));
                let h = t.matvec(w, x);
                let a = t.tanh(h);
                let sp = t.sparse_affine(s, ParamId(2), ParamId(3), sparse.clone());
                let g = t.sigmoid(sp);
                let m = t.mul(a, g);
                let sm = t.softmax(m);
                let lg = t.log_floor(sm, 1e-8);
                let r = t.row(w, 4, 2);
                let d = t.dot(r, x);
                let sc = t.scale_by(lg, d);
                let c = t.concat(&[sc, a]);
                let e0 = t.index(c, 4);
                let om = t.const_minus(1.0, g);
                let sub = t.sub(om, sm);
                let ad = t.add(sub, a);
                let sc2 = t.scale(ad, 0.3);
                let s1 = t.sum(sc2);
                let s2 = t.sum(c);
                let tot = t.add(s1, s2);
                t.add(tot, e0)
            },
            &s,
        );
    }

    #[test]
    fn straight_through_routes_gradient_to_surrogate() {
        let s = store();
        let grads = |st: bool| {
            let mut t = Tape::new();
            let x = t.param(&s, ParamId(1));
            let y = t.tanh(x);
            let z = if st { t.straight_through(vec![1.0, 0.0, 0.0, 0.0], y) } else { y };
            let w = t.constant(vec![0.5, -1.0, 2.0, 0.25]);
            let l = t.dot(z, w);
            let mut g = s.zero_grads();
            t.backward(l, &mut g);
            (t.value(z).to_vec(), g.get(ParamId(1)).to_vec())
        };
        let (fwd, g_st) = grads(true);
        let (_, g_plain) = grads(false);
        assert_eq!(fwd, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(g_st, g_plain);
    }

    #[test]
    fn log_floor_blocks_gradient() {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor { rows: 2, cols: 1, data: vec![1e-12, 0.5] });
        let mut t = Tape::new();
        let p = t.param(&s, id);
        let l = t.log_floor(p, 1e-8);
        let total = t.sum(l);
        let mut g = s.zero_grads();
        t.backward(total, &mut g);
        assert_eq!(g.get(id), &[0.0, 2.0]);
        assert!((t.scalar(total) - (1e-8f64.ln() + 0.5f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_stable() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-12 && p[2] == 0.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300 && sigmoid(800.0) == 1.0);
    }
}
