//! Tape-based reverse-mode differentiation over `f64` arrays.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! through [`Graph::param`]; after [`Graph::backward`] their gradients are
//! returned keyed by [`ParamId`]. Nodes that cannot reach a parameter carry no
//! gradient and are skipped during the backward sweep.

use ndarray::{s, Array2, Array3, ArrayD, Axis, Ix2, Ix3, IxDyn};

use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Reshape(Var),
    /// `x [B, C, L] + e [B, C]` broadcast over `L`.
    AddChannel(Var, Var),
    /// Concatenation along axis 1 of two rank-3 arrays.
    Concat(Var, Var),
    /// Nearest-neighbour resampling of the last axis; `src[j]` is the input
    /// position feeding output position `j`.
    Upsample(Var, Vec<usize>),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    Gather(Var, Vec<usize>),
    /// Forward value of another node, gradient routed to this one.
    StraightThrough(Var),
    SumSq(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
}

/// Parameter gradients produced by one backward sweep.
pub struct Grads {
    pub(crate) by_param: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }
}

fn to2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 array")
}

fn to3(a: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("rank-3 array")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Output length of a 1-D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

fn im2col(x: ndarray::ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (b, c, l) = x.dim();
    let lo = conv_out_len(l, k, stride, pad);
    let mut cols = Array2::zeros((c * k, b * lo));
    for bi in 0..b {
        for ci in 0..c {
            let row = x.slice(s![bi, ci, ..]);
            for ki in 0..k {
                let mut dst = cols.row_mut(ci * k + ki);
                for o in 0..lo {
                    let p = (o * stride + ki) as isize - pad as isize;
                    if p >= 0 && (p as usize) < l {
                        dst[bi * lo + o] = row[p as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, shape: (usize, usize, usize), k: usize, stride: usize, pad: usize) -> Array3<f64> {
    let (b, c, l) = shape;
    let lo = conv_out_len(l, k, stride, pad);
    let mut x = Array3::zeros(shape);
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                let src = cols.row(ci * k + ki);
                for o in 0..lo {
                    let p = (o * stride + ki) as isize - pad as isize;
                    if p >= 0 && (p as usize) < l {
                        x[[bi, ci, p as usize]] += src[bi * lo + o];
                    }
                }
            }
        }
    }
    x
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// Graph whose parameters carry no gradient; nothing is retained for a
    /// backward sweep.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            track: false,
        }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a rank-0 or single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1);
        a.iter().next().copied().unwrap_or(f64::NAN)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = self.track && store.is_trainable(id);
        self.push(store.value(id).clone(), Op::Param(id), trainable)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let g = self.g(a);
        self.push(v, Op::Scale(a, k), g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        let g = self.g(a);
        self.push(v, Op::Silu(a), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        let g = self.g(a);
        self.push(v, Op::Reshape(a), g)
    }

    pub fn add_channel(&mut self, x: Var, e: Var) -> Var {
        let ev = to2(self.value(e)).insert_axis(Axis(2)).to_owned();
        let v = &to3(self.value(x)) + &ev;
        let g = self.g(x) || self.g(e);
        self.push(v.into_dyn(), Op::AddChannel(x, e), g)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat shapes agree");
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Concat(a, b), g)
    }

    /// Nearest-neighbour resize of the last axis of a rank-3 node.
    pub fn upsample(&mut self, a: Var, len: usize) -> Var {
        let x = to3(self.value(a));
        let (b, c, l) = x.dim();
        let src: Vec<usize> = (0..len).map(|j| (j * l / len).min(l - 1)).collect();
        let mut out = Array3::zeros((b, c, len));
        for (j, &i) in src.iter().enumerate() {
            out.slice_mut(s![.., .., j]).assign(&x.slice(s![.., .., i]));
        }
        let g = self.g(a);
        self.push(out.into_dyn(), Op::Upsample(a, src), g)
    }

    /// `x [B, in] · wᵀ + b` with `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let v = to2(self.value(x)).dot(&to2(self.value(w)).t()) + self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let g = self.g(x) || self.g(w) || self.g(b);
        self.push(v.into_dyn(), Op::Linear { x, w, b }, g)
    }

    /// `x [B, Cin, L]`, `w [Cout, Cin, K]`, `b [Cout]`, zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = to3(self.value(x));
        let (bn, _, l) = xv.dim();
        let wv = to3(self.value(w));
        let (co, ci, k) = wv.dim();
        let lo = conv_out_len(l, k, stride, pad);
        let cols = im2col(xv, k, stride, pad);
        let w2 = wv.to_shape((co, ci * k)).unwrap();
        let out2 = w2.dot(&cols);
        let bias = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = Array3::zeros((bn, co, lo));
        for bi in 0..bn {
            let mut dst = out.slice_mut(s![bi, .., ..]);
            dst.assign(&out2.slice(s![.., bi * lo..(bi + 1) * lo]));
            dst += &bias.view().insert_axis(Axis(1));
        }
        let g = self.g(x) || self.g(w) || self.g(b);
        let cols = if g { cols } else { Array2::zeros((0, 0)) };
        self.push(
            out.into_dyn(),
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            g,
        )
    }

    /// Rows of a rank-2 table.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = to2(self.value(table));
        let v = t.select(Axis(0), idx);
        let g = self.g(table);
        self.push(v.into_dyn(), Op::Gather(table, idx.to_vec()), g)
    }

    pub fn straight_through(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(b).clone();
        let g = self.g(a);
        self.push(v, Op::StraightThrough(a), g)
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x * x).sum::<f64>();
        let g = self.g(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::SumSq(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.sum() / x.len() as f64;
        let g = self.g(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::Mean(a), g)
    }

    /// Mean natural-log cross-entropy of `logits [B, C]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let probs = softmax_rows(to2(self.value(logits)));
        let b = labels.len();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| -probs[[i, c]].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / b as f64;
        let g = self.g(logits);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            g,
        )
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per
    /// parameter of `store`.
    pub fn backward(&self, root: Var, store: &ParamStore) -> Grads {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Grads {
            by_param: (0..store.len()).map(|_| None).collect(),
        };
        if !self.g(root) {
            return out;
        }
        grads[root.0] = Some(ArrayD::ones(self.value(root).raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let acc = |v: Var, d: ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>| {
                if !self.nodes[v.0].grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match &mut out.by_param[id.0] {
                    Some(existing) => *existing += &gy,
                    slot => *slot = Some(gy),
                },
                Op::Add(a, b) => {
                    acc(*a, gy.clone(), &mut grads);
                    acc(*b, gy, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&gy, &mut grads);
                    acc(*a, gy, &mut grads);
                }
                Op::Mul(a, b) => {
                    let da = &gy * self.value(*b);
                    let db = &gy * self.value(*a);
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::Scale(a, k) => acc(*a, gy * *k, &mut grads),
                Op::Silu(a) => {
                    let mut d = self.value(*a).mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    d *= &gy;
                    acc(*a, d, &mut grads);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).raw_dim();
                    let d = gy.as_standard_layout().into_owned().into_shape_with_order(shape).unwrap();
                    acc(*a, d, &mut grads);
                }
                Op::AddChannel(x, e) => {
                    let de = to3(&gy).sum_axis(Axis(2)).into_dyn();
                    acc(*e, de, &mut grads);
                    acc(*x, gy, &mut grads);
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).shape()[1];
                    let da = gy.slice_axis(Axis(1), (..ca).into()).to_owned();
                    let db = gy.slice_axis(Axis(1), (ca..).into()).to_owned();
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::Upsample(a, src) => {
                    let mut d = Array3::zeros(to3(self.value(*a)).raw_dim());
                    let gy3 = to3(&gy);
                    for (j, &k) in src.iter().enumerate() {
                        let mut dst = d.slice_mut(s![.., .., k]);
                        dst += &gy3.slice(s![.., .., j]);
                    }
                    acc(*a, d.into_dyn(), &mut grads);
                }
                Op::Linear { x, w, b } => {
                    let g2 = to2(&gy);
                    if self.g(*b) {
                        acc(*b, g2.sum_axis(Axis(0)).into_dyn(), &mut grads);
                    }
                    if self.g(*w) {
                        acc(*w, g2.t().dot(&to2(self.value(*x))).into_dyn(), &mut grads);
                    }
                    if self.g(*x) {
                        acc(*x, g2.dot(&to2(self.value(*w))).into_dyn(), &mut grads);
                    }
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let gy3 = to3(&gy);
                    let (bn, co, lo) = gy3.dim();
                    let mut g2 = Array2::zeros((co, bn * lo));
                    for bi in 0..bn {
                        g2.slice_mut(s![.., bi * lo..(bi + 1) * lo]).assign(&gy3.slice(s![bi, .., ..]));
                    }
                    let wv = to3(self.value(*w));
                    let (_, ci, k) = wv.dim();
                    if self.g(*b) {
                        acc(*b, g2.sum_axis(Axis(1)).into_dyn(), &mut grads);
                    }
                    if self.g(*w) {
                        let dw = g2.dot(&cols.t()).into_shape_with_order((co, ci, k)).unwrap();
                        acc(*w, dw.into_dyn(), &mut grads);
                    }
                    if self.g(*x) {
                        let w2 = wv.to_shape((co, ci * k)).unwrap();
                        let dcols = w2.t().dot(&g2);
                        let xs = to3(self.value(*x)).dim();
                        acc(*x, col2im(&dcols, xs, k, *stride, *pad).into_dyn(), &mut grads);
                    }
                }
                Op::Gather(t, idx) => {
                    let mut d = Array2::zeros(to2(self.value(*t)).raw_dim());
                    let g2 = to2(&gy);
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g2.row(r);
                    }
                    acc(*t, d.into_dyn(), &mut grads);
                }
                Op::StraightThrough(a) => acc(*a, gy, &mut grads),
                Op::SumSq(a) => {
                    let k = 2.0 * gy.iter().next().copied().unwrap();
                    acc(*a, self.value(*a) * k, &mut grads);
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let k = gy.iter().next().copied().unwrap() / x.len() as f64;
                    acc(*a, ArrayD::from_elem(x.raw_dim(), k), &mut grads);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let k = gy.iter().next().copied().unwrap() / labels.len() as f64;
                    let mut d = probs.clone();
                    for (i, &c) in labels.iter().enumerate() {
                        d[[i, c]] -= 1.0;
                    }
                    acc(*logits, (d * k).into_dyn(), &mut grads);
                }
            }
        }
        out
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: ndarray::ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, ArrayD};
    use rand::Rng as _;

    fn rand_array(rng: &mut crate::rng::Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of every parameter gradient of `f`.
    fn check_grads(store: &mut ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Var) {
        let mut g = Graph::new();
        let root = f(&mut g, store);
        let grads = g.backward(root, store);
        let h = 1e-6;
        for id in store.ids() {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| ArrayD::zeros(store.value(id).raw_dim()));
            for j in 0..store.value(id).len() {
                let orig = store.value(id).as_slice().unwrap()[j];
                store.value_mut(id).as_slice_mut().unwrap()[j] = orig + h;
                let mut gp = Graph::new();
                let rp = f(&mut gp, store);
                let up = gp.scalar(rp);
                store.value_mut(id).as_slice_mut().unwrap()[j] = orig - h;
                let mut gm = Graph::new();
                let rm = f(&mut gm, store);
                let dn = gm.scalar(rm);
                store.value_mut(id).as_slice_mut().unwrap()[j] = orig;
                let numeric = (up - dn) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[j];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "param {} elem {j}: analytic {a} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = crate::rng::seeded(1, "t");
        let x = rand_array(&mut rng, &[2, 3, 7]);
        let w = rand_array(&mut rng, &[4, 3, 3]);
        let b = rand_array(&mut rng, &[4]);
        let mut store = ParamStore::new();
        let wi = store.add("w", w.clone());
        let bi = store.add("b", b.clone());
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let (wv, bv) = (g.param(&store, wi), g.param(&store, bi));
        let y = g.conv1d(xv, wv, bv, 2, 1);
        let y = g.value(y).clone();
        assert_eq!(y.shape(), &[2, 4, 4]);
        for bn in 0..2 {
            for o in 0..4 {
                for j in 0..4 {
                    let mut acc = b[[o]];
                    for c in 0..3 {
                        for k in 0..3 {
                            let p = (j * 2 + k) as isize - 1;
                            if (0..7).contains(&p) {
                                acc += w[[o, c, k]] * x[[bn, c, p as usize]];
                            }
                        }
                    }
                    assert!((y[[bn, o, j]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::seeded(2, "t");
        let mut store = ParamStore::new();
        let cw = store.add("cw", rand_array(&mut rng, &[3, 2, 3]));
        let cb = store.add("cb", rand_array(&mut rng, &[3]));
        let lw = store.add("lw", rand_array(&mut rng, &[4, 15]));
        let lb = store.add("lb", rand_array(&mut rng, &[4]));
        let emb = store.add("emb", rand_array(&mut rng, &[5, 3]));
        let x = rand_array(&mut rng, &[2, 2, 5]);
        let target = rand_array(&mut rng, &[2, 4]);
        check_grads(&mut store, |g, st| {
            let xv = g.leaf(x.clone());
            let (w, b) = (g.param(st, cw), g.param(st, cb));
            let h = g.conv1d(xv, w, b, 2, 1);
            let h = g.silu(h);
            let e = g.param(st, emb);
            let e = g.gather(e, &[4, 1]);
            let h = g.add_channel(h, e);
            let skip = g.upsample(h, 5);
            let h2 = g.concat(skip, xv);
            let h2 = g.scale(h2, 0.5);
            let h = g.mean(h2);
            let flat = g.reshape(skip, &[2, 15]);
            let m = g.mul(flat, flat);
            let (w, b) = (g.param(st, lw), g.param(st, lb));
            let y = g.linear(m, w, b);
            let t = g.leaf(target.clone());
            let d = g.sub(y, t);
            let l1 = g.sum_sq(d);
            let ce = g.cross_entropy(y, &[1, 3]);
            let l = g.add(l1, ce);
            let hs = g.mul(h, l);
            g.add(l, hs)
        });
    }

    #[test]
    fn flat_path_gradients() {
        let mut rng = crate::rng::seeded(3, "t");
        let mut store = ParamStore::new();
        let cw = store.add("cw", rand_array(&mut rng, &[3, 2, 3]));
        let cb = store.add("cb", rand_array(&mut rng, &[3]));
        let x = rand_array(&mut rng, &[2, 2, 6]);
        check_grads(&mut store, |g, st| {
            let xv = g.leaf(x.clone());
            let (w, b) = (g.param(st, cw), g.param(st, cb));
            let h = g.conv1d(xv, w, b, 1, 1);
            let h = g.reshape(h, &[2, 18]);
            g.sum_sq(h)
        });
    }

    #[test]
    fn detach_and_straight_through_route_gradients() {
        let mut store = ParamStore::new();
        let a = store.add("a", Array1::from(vec![1.0, 2.0]).into_dyn());
        let b = store.add("b", Array1::from(vec![5.0, -1.0]).into_dyn());
        let mut g = Graph::new();
        let (av, bv) = (g.param(&store, a), g.param(&store, b));
        let st = g.straight_through(av, bv);
        assert_eq!(g.value(st), store.value(b));
        let l = g.sum_sq(st);
        let grads = g.backward(l, &store);
        assert_eq!(grads.get(a).unwrap().as_slice().unwrap(), &[10.0, -2.0]);
        assert!(grads.get(b).is_none());

        let mut g = Graph::new();
        let (av, bv) = (g.param(&store, a), g.param(&store, b));
        let ad = g.detach(av);
        let d = g.sub(ad, bv);
        let l = g.sum_sq(d);
        let grads = g.backward(l, &store);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().as_slice().unwrap(), &[8.0, -6.0]);
    }

    #[test]
    fn softmax_is_stable_and_normalized() {
        let x = ndarray::arr2(&[[1000.0, 1000.0, -1000.0], [2f64.ln(), 0.0, 0.0]]);
        let p = softmax_rows(x.view());
        assert!((p[[0, 0]] - 0.5).abs() < 1e-15 && p[[0, 2]] == 0.0);
        assert!((p[[1, 0]] - 0.5).abs() < 1e-15 && (p[[1, 1]] - 0.25).abs() < 1e-15);
    }
}
