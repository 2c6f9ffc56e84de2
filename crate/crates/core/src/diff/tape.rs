//! Vector-valued reverse-mode tape.
//!
//! Every node holds a dense `Vec<f64>`; scalars are length-1 vectors. A tape is
//! built per forward pass against a read-only [`ParamSet`], and
//! [`Tape::backward`] returns gradients for every parameter tensor that was
//! touched. Nodes are appended in topological order, so the reverse sweep is a
//! single pass over the node list.

use super::params::{Gradients, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    /// `w` is `rows x cols`, row-major.
    MatVec { w: Var, x: Var, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    LogSigmoid(Var),
    /// Subgradient 0 at the kink.
    Abs(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    Dot(Var, Var),
    Sum(Var),
    AddMany(Vec<Var>),
    KlDiag { mq: Var, sq: Var, mp: Var, sp: Var },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(sigmoid(x))`, stable for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
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
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// A constant leaf; no gradient is reported for it.
    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.input(vec![value])
    }

    /// The leaf for a parameter tensor; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let value = self.params.values(id).to_vec();
        let v = self.push(value, Op::Param(id));
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let cols = self.dim(x);
        let wv = &self.nodes[w.0].value;
        assert!(cols > 0 && wv.len() % cols == 0, "matvec shape mismatch");
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = wv
            .chunks_exact(cols)
            .map(|row| row.iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        self.push(out, Op::MatVec { w, x, cols })
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.len(), bv.len(), "elementwise length mismatch");
        av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes[a.0].value.iter().map(|x| f(*x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.map(a, softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::with_capacity(parts.iter().map(|p| self.dim(*p)).sum());
        for p in parts {
            v.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[src.0].value[start..start + len].to_vec();
        self.push(v, Op::Slice { src, start })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let s = self.zip_map(a, b, |x, y| x * y).iter().sum();
        self.push(vec![s], Op::Dot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    /// Elementwise sum of equally sized nodes.
    pub fn add_many(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_many of nothing");
        let mut v = self.nodes[parts[0].0].value.clone();
        for p in &parts[1..] {
            for (acc, x) in v.iter_mut().zip(&self.nodes[p.0].value) {
                *acc += x;
            }
        }
        self.push(v, Op::AddMany(parts.to_vec()))
    }

    /// Closed-form `KL(N(mq, sq^2) || N(mp, sp^2))` summed over coordinates.
    pub fn kl_diag(&mut self, mq: Var, sq: Var, mp: Var, sp: Var) -> Var {
        let n = self.dim(mq);
        assert!(self.dim(sq) == n && self.dim(mp) == n && self.dim(sp) == n, "kl_diag length mismatch");
        let (a, b, c, d) = (
            &self.nodes[mq.0].value,
            &self.nodes[sq.0].value,
            &self.nodes[mp.0].value,
            &self.nodes[sp.0].value,
        );
        let s = super::gaussian::kl_diag_values(a, b, c, d);
        self.push(vec![s], Op::KlDiag { mq, sq, mp, sp })
    }

    /// Reverse sweep from the scalar `root`; returns gradients for every parameter tensor.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads = self.params.zeros_like_grads();
        self.backward_into(root, &mut grads);
        grads
    }

    /// As [`Tape::backward`] but accumulates into existing buffers.
    pub fn backward_into(&self, root: Var, out: &mut Gradients) {
        self.sweep(root, false, Some(out));
    }

    /// Gradient of `root` with respect to a constant input leaf.
    pub fn input_gradient(&self, root: Var, leaf: Var) -> Vec<f64> {
        let mut g = self.sweep(root, true, None);
        let out = std::mem::take(&mut g[leaf.0]);
        if out.is_empty() {
            vec![0.0; self.dim(leaf)]
        } else {
            out
        }
    }

    fn sweep(&self, root: Var, want_inputs: bool, mut out: Option<&mut Gradients>) -> Vec<Vec<f64>> {
        assert_eq!(self.dim(root), 1, "backward root must be scalar");
        let mut g: Vec<Vec<f64>> = Vec::with_capacity(root.0 + 1);
        g.resize_with(root.0 + 1, Vec::new);
        g[root.0] = vec![1.0];

        for i in (0..=root.0).rev() {
            if g[i].is_empty() {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input) {
                continue;
            }
            let gi = std::mem::take(&mut g[i]);
            // Children always precede their parent on the tape.
            let lower = &mut g[..i];
            let nodes = &self.nodes;
            fn slot<'a>(nodes: &[Node], lower: &'a mut [Vec<f64>], v: Var) -> &'a mut [f64] {
                let s = &mut lower[v.0];
                if s.is_empty() {
                    *s = vec![0.0; nodes[v.0].value.len()];
                }
                s.as_mut_slice()
            }
            let add_into = |dst: &mut [f64], src: &[f64]| {
                for (o, x) in dst.iter_mut().zip(src) {
                    *o += x;
                }
            };
            match &node.op {
                Op::Input => unreachable!(),
                Op::Param(id) => {
                    if let Some(out) = out.as_deref_mut() {
                        add_into(&mut out.0[id.index()], &gi);
                    }
                }
                Op::MatVec { w, x, cols } => {
                    let cols = *cols;
                    let wv = &nodes[w.0].value;
                    let xv = &nodes[x.0].value;
                    let gw = slot(nodes, lower, *w);
                    for (r, gr) in gi.iter().enumerate() {
                        if *gr != 0.0 {
                            for (o, xj) in gw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                *o += gr * xj;
                            }
                        }
                    }
                    if want_inputs || !matches!(nodes[x.0].op, Op::Input) {
                        let gx = slot(nodes, lower, *x);
                        for (r, gr) in gi.iter().enumerate() {
                            if *gr != 0.0 {
                                for (o, wj) in gx.iter_mut().zip(&wv[r * cols..(r + 1) * cols]) {
                                    *o += gr * wj;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(nodes, lower, *a), &gi);
                    add_into(slot(nodes, lower, *b), &gi);
                }
                Op::Sub(a, b) => {
                    add_into(slot(nodes, lower, *a), &gi);
                    for (o, x) in slot(nodes, lower, *b).iter_mut().zip(&gi) {
                        *o -= x;
                    }
                }
                Op::Mul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    for ((o, x), y) in slot(nodes, lower, *a).iter_mut().zip(&gi).zip(bv) {
                        *o += x * y;
                    }
                    for ((o, x), y) in slot(nodes, lower, *b).iter_mut().zip(&gi).zip(av) {
                        *o += x * y;
                    }
                }
                Op::Scale(a, s) => {
                    for (o, x) in slot(nodes, lower, *a).iter_mut().zip(&gi) {
                        *o += x * s;
                    }
                }
                Op::AddConst(a) => add_into(slot(nodes, lower, *a), &gi),
                Op::Tanh(a) => {
                    for ((o, x), y) in slot(nodes, lower, *a).iter_mut().zip(&gi).zip(&node.value) {
                        *o += x * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    for ((o, x), y) in slot(nodes, lower, *a).iter_mut().zip(&gi).zip(&node.value) {
                        *o += x * y * (1.0 - y);
                    }
                }
                Op::Softplus(a) => {
                    let av = &nodes[a.0].value;
                    for ((o, x), z) in slot(nodes, lower, *a).iter_mut().zip(&gi).zip(av) {
                        *o += x * sigmoid(*z);
                    }
                }
                Op::LogSigmoid(a) => {
                    let av = &nodes[a.0].value;
                    for ((o, x), z) in slot(nodes, lower, *a).iter_mut().zip(&gi).zip(av) {
                        *o += x * sigmoid(-*z);
                    }
                }
                Op::Abs(a) => {
                    let av = &nodes[a.0].value;
                    for ((o, x), z) in slot(nodes, lower, *a).iter_mut().zip(&gi).zip(av) {
                        if *z > 0.0 {
                            *o += x;
                        } else if *z < 0.0 {
                            *o -= x;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = nodes[p.0].value.len();
                        add_into(slot(nodes, lower, *p), &gi[off..off + n]);
                        off += n;
                    }
                }
                Op::Slice { src, start } => {
                    let n = gi.len();
                    add_into(&mut slot(nodes, lower, *src)[*start..*start + n], &gi);
                }
                Op::Dot(a, b) => {
                    let s = gi[0];
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    for (o, y) in slot(nodes, lower, *a).iter_mut().zip(bv) {
                        *o += s * y;
                    }
                    for (o, y) in slot(nodes, lower, *b).iter_mut().zip(av) {
                        *o += s * y;
                    }
                }
                Op::Sum(a) => {
                    let s = gi[0];
                    slot(nodes, lower, *a).iter_mut().for_each(|o| *o += s);
                }
                Op::AddMany(parts) => {
                    for p in parts {
                        add_into(slot(nodes, lower, *p), &gi);
                    }
                }
                Op::KlDiag { mq, sq, mp, sp } => {
                    let s = gi[0];
                    let (a, b, c, d) = (
                        &nodes[mq.0].value,
                        &nodes[sq.0].value,
                        &nodes[mp.0].value,
                        &nodes[sp.0].value,
                    );
                    let n = a.len();
                    let mut dmq = vec![0.0; n];
                    let mut dsq = vec![0.0; n];
                    let mut dsp = vec![0.0; n];
                    for k in 0..n {
                        let diff = a[k] - c[k];
                        let vp = d[k] * d[k];
                        dmq[k] = s * diff / vp;
                        dsq[k] = s * (b[k] / vp - 1.0 / b[k]);
                        dsp[k] = s * (1.0 / d[k] - (b[k] * b[k] + diff * diff) / (vp * d[k]));
                    }
                    add_into(slot(nodes, lower, *mq), &dmq);
                    for (o, x) in slot(nodes, lower, *mp).iter_mut().zip(&dmq) {
                        *o -= x;
                    }
                    add_into(slot(nodes, lower, *sq), &dsq);
                    add_into(slot(nodes, lower, *sp), &dsp);
                }
            }
        }
        g
    }
}
