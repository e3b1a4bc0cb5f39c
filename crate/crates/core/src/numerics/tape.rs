//! Reverse-mode tape over the fixed operation set used by the models.
//!
//! Every node stores its forward value; [`Tape::backward`] walks the nodes in
//! reverse and accumulates gradients. Tensors on the tape are rank 2.
//! Shape mismatches between tape operands are programming errors and panic;
//! the public model entry points validate their inputs before recording.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scalar::{matmul_into, MatRef};
use super::{ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Const,
    Param { name: String, trainable: bool },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    AddCycled { x: Var, table: Var },
    Scale { a: Var, c: T },
    Relu(Var),
    /// Keeps `tanh(c (x + k x^3))` from the forward pass.
    Gelu { a: Var, tanh: Vec<T> },
    Dropout { a: Var, mask: Vec<T> },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, block: usize, probs: Vec<T> },
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    MeanBlocks { a: Var, block: usize },
    Reshape(Var),
    OffDiagRowSum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T>, denom: T },
    DotConst { a: Var, r: Vec<T> },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: BTreeMap<String, Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    t.dims2()
}

impl<T: Scalar> Tape<T> {
    /// Evaluation tape: dropout is the identity.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bound: BTreeMap::new(), dropout: None }
    }

    /// Training tape with inverted dropout at `rate`, masks drawn from `seed`.
    pub fn with_dropout(rate: f64, seed: u64) -> Self {
        let dropout = (rate > 0.0).then(|| (rate, ChaCha8Rng::seed_from_u64(seed)));
        Tape { nodes: Vec::new(), bound: BTreeMap::new(), dropout }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn mat(shape: (usize, usize), data: Vec<T>) -> Tensor<T> {
        Tensor::new(vec![shape.0, shape.1], data).expect("tape shapes are positive")
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let (r, c) = rows_cols(&t);
        let t = t.reshape(&[r, c]).expect("same size");
        self.push(t, Op::Const)
    }

    /// Binds a stored parameter; repeated calls with the same name share one leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"))
            .clone();
        let (r, c) = rows_cols(&t);
        let t = t.reshape(&[r, c]).expect("same size");
        let trainable = !store.is_frozen(name);
        let v = self.push(t, Op::Param { name: name.to_string(), trainable });
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ar, ac) = rows_cols(self.value(a));
        let (br, bc) = rows_cols(self.value(b));
        let ma = MatRef { data: self.value(a).data(), rows: ar, cols: ac, trans: ta };
        let mb = MatRef { data: self.value(b).data(), rows: br, cols: bc, trans: tb };
        let m = if ta { ac } else { ar };
        let n = if tb { br } else { bc };
        let mut out = vec![T::zero(); m * n];
        matmul_into(ma, mb, T::zero(), &mut out);
        self.push(Self::mat((m, n), out), Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "add operands differ in shape");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let shape = rows_cols(va);
        self.push(Self::mat(shape, data), Op::Add(a, b))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (r, c) = rows_cols(self.value(x));
        assert_eq!(self.value(bias).len(), c, "bias width");
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v = *v + bb;
            }
        }
        self.push(Self::mat((r, c), data), Op::AddRow { x, bias })
    }

    /// Adds row `i % table_rows` of `table` to row `i` of `x`.
    pub fn add_cycled(&mut self, x: Var, table: Var) -> Var {
        let (r, c) = rows_cols(self.value(x));
        let (tr, tc) = rows_cols(self.value(table));
        assert_eq!(tc, c, "table width");
        assert_eq!(r % tr, 0, "rows must be a multiple of the table length");
        let t = self.value(table).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, row) in data.chunks_exact_mut(c).enumerate() {
            let tr_row = &t[(i % tr) * c..(i % tr + 1) * c];
            for (v, &bb) in row.iter_mut().zip(tr_row) {
                *v = *v + bb;
            }
        }
        self.push(Self::mat((r, c), data), Op::AddCycled { x, table })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let shape = rows_cols(self.value(a));
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        self.push(Self::mat(shape, data), Op::Scale { a, c })
    }

    /// `x * w + b` with `w` stored `in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let shape = rows_cols(self.value(a));
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        self.push(Self::mat(shape, data), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let shape = rows_cols(self.value(a));
        let x = self.value(a).data();
        let tanh: Vec<T> = x.iter().map(|&v| gelu_tanh(v)).collect();
        let half = T::from_f64(0.5);
        let data = x.iter().zip(&tanh).map(|(&v, &t)| half * v * (T::one() + t)).collect();
        self.push(Self::mat(shape, data), Op::Gelu { a, tanh })
    }

    pub fn dropout(&mut self, a: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return a;
        };
        let rate = *rate;
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let n = self.nodes[a.0].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() >= rate { keep } else { T::zero() })
            .collect();
        let shape = rows_cols(self.value(a));
        let data = self.value(a).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        self.push(Self::mat(shape, data), Op::Dropout { a, mask })
    }

    /// Row-wise layer normalisation with epsilon 1e-5.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (r, c) = rows_cols(self.value(x));
        assert_eq!(self.value(g).len(), c);
        assert_eq!(self.value(b).len(), c);
        let eps = T::from_f64(1e-5);
        let n = T::from_f64(c as f64);
        let gv = self.value(g).data().to_vec();
        let bv = self.value(b).data().to_vec();
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = self.value(x).row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        self.push(Self::mat((r, c), out), Op::LayerNorm { x, g, b, xhat, rstd })
    }

    /// Multi-head scaled dot-product attention applied independently to each
    /// consecutive block of `block` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, block: usize, causal: bool) -> Var {
        let (r, d) = rows_cols(self.value(q));
        assert_eq!(rows_cols(self.value(k)), (r, d));
        assert_eq!(rows_cols(self.value(v)), (r, d));
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        assert!(block > 0 && r % block == 0, "rows {r} not a multiple of block {block}");
        let hd = d / heads;
        let nb = r / block;
        let l = block;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut probs = vec![T::zero(); nb * heads * l * l];
        let mut out = vec![T::zero(); r * d];
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        for blk in 0..nb {
            for h in 0..heads {
                let off = blk * l * d + h * hd;
                let p = &mut probs[(blk * heads + h) * l * l..(blk * heads + h + 1) * l * l];
                // SAFETY: the block/head window lies inside each r x d buffer.
                unsafe {
                    T::gemm(
                        l, hd, l, scale,
                        qd[off..].as_ptr(), d as isize, 1,
                        kd[off..].as_ptr(), 1, d as isize,
                        T::zero(), p.as_mut_ptr(), l as isize, 1,
                    );
                }
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    let valid = if causal { i + 1 } else { l };
                    let mx = row[..valid].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut s = T::zero();
                    for x in row[..valid].iter_mut() {
                        *x = (*x - mx).exp();
                        s = s + *x;
                    }
                    for x in row[..valid].iter_mut() {
                        *x = *x / s;
                    }
                    for x in row[valid..].iter_mut() {
                        *x = T::zero();
                    }
                }
                unsafe {
                    T::gemm(
                        l, l, hd, T::one(),
                        p.as_ptr(), l as isize, 1,
                        vd[off..].as_ptr(), d as isize, 1,
                        T::zero(), out[off..].as_mut_ptr(), d as isize, 1,
                    );
                }
            }
        }
        self.push(
            Self::mat((r, d), out),
            Op::Attention { q, k, v, heads, block, probs },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = rows_cols(self.value(a));
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        self.push(Self::mat((r, c), data), Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = rows_cols(self.value(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = rows_cols(self.value(p));
                assert_eq!(pr, r, "concat_cols row mismatch");
                pc
            })
            .collect();
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Self::mat((r, c), data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = rows_cols(self.value(parts[0])).1;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(rows_cols(self.value(p)).1, c, "concat_rows column mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let r = data.len() / c;
        self.push(Self::mat((r, c), data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = rows_cols(self.value(a));
        assert!(start + len <= r && len > 0, "row slice out of range");
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        self.push(Self::mat((len, c), data), Op::SliceRows { a, start })
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (r, c) = rows_cols(self.value(a));
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather index {i} out of {r} rows");
            data.extend_from_slice(self.value(a).row(i));
        }
        self.push(Self::mat((idx.len(), c), data), Op::GatherRows { a, idx: idx.to_vec() })
    }

    /// Mean over each consecutive block of `block` rows.
    pub fn mean_blocks(&mut self, a: Var, block: usize) -> Var {
        let (r, c) = rows_cols(self.value(a));
        assert!(block > 0 && r % block == 0);
        let nb = r / block;
        let inv = T::from_f64(1.0 / block as f64);
        let mut data = vec![T::zero(); nb * c];
        for i in 0..r {
            let dst = &mut data[(i / block) * c..(i / block + 1) * c];
            for (d, &s) in dst.iter_mut().zip(self.nodes[a.0].value.row(i)) {
                *d = *d + s;
            }
        }
        for v in data.iter_mut() {
            *v = *v * inv;
        }
        self.push(Self::mat((nb, c), data), Op::MeanBlocks { a, block })
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a).clone().reshape(&[rows, cols]).expect("reshape size");
        self.push(t, Op::Reshape(a))
    }

    /// For a square `n x n` matrix, the `1 x n` row of off-diagonal row sums.
    pub fn off_diag_row_sum(&mut self, a: Var) -> Var {
        let (r, c) = rows_cols(self.value(a));
        assert_eq!(r, c, "off_diag_row_sum needs a square matrix");
        let data = (0..r)
            .map(|i| {
                let row = self.value(a).row(i);
                row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).sum()
            })
            .collect();
        self.push(Self::mat((1, r), data), Op::OffDiagRowSum(a))
    }

    /// Weighted mean cross-entropy; rows with weight 0 contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Var {
        let (r, c) = rows_cols(self.value(logits));
        assert_eq!(targets.len(), r);
        assert_eq!(weights.len(), r);
        let total: T = weights.iter().copied().sum();
        let denom = if total > T::one() { total } else { T::one() };
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_exact_mut(c).enumerate() {
            if weights[i] == T::zero() {
                row.iter_mut().for_each(|x| *x = T::zero());
                continue;
            }
            assert!(targets[i] < c, "target out of range");
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
            loss = loss + weights[i] * (lse - row[targets[i]]);
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let value = Self::mat((1, 1), vec![loss / denom]);
        self.push(
            value,
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs, denom },
        )
    }

    /// Scalar `sum(a .* r)` for a constant `r`; used to build test objectives.
    pub fn dot_const(&mut self, a: Var, r: &[T]) -> Var {
        assert_eq!(self.value(a).len(), r.len());
        let s = self.value(a).data().iter().zip(r).map(|(&x, &y)| x * y).sum();
        self.push(Self::mat((1, 1), vec![s]), Op::DotConst { a, r: r.to_vec() })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Self::mat((1, 1), vec![s]), Op::Sum(a))
    }

    /// True when every recorded value is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.all_finite())
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    /// Gradients of trainable parameters, keyed by name.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { name, trainable: true } = &node.op {
                let g = grads.grads[i]
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                out.insert(name.clone(), Tensor::new(node.value.shape().to_vec(), g).unwrap());
            }
        }
        out
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let (r, c) = rows_cols(&node.value);
        match &node.op {
            Op::Const | Op::Param { .. } => {}
            Op::MatMul { a, b, ta, tb } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (ar, ac) = rows_cols(va);
                let (br, bc) = rows_cols(vb);
                let gm = MatRef::new(g, r, c);
                let ma = MatRef { data: va.data(), rows: ar, cols: ac, trans: false };
                let mb = MatRef { data: vb.data(), rows: br, cols: bc, trans: false };
                // C = op(A) op(B)
                let ga = acc_buf(grads, *a, ar * ac);
                match (ta, tb) {
                    (false, false) => matmul_into(gm, mb.t(), T::one(), ga),
                    (false, true) => matmul_into(gm, mb, T::one(), ga),
                    (true, false) => matmul_into(mb, gm.t(), T::one(), ga),
                    (true, true) => matmul_into(mb.t(), gm.t(), T::one(), ga),
                }
                let gb = acc_buf(grads, *b, br * bc);
                match (ta, tb) {
                    (false, false) => matmul_into(ma.t(), gm, T::one(), gb),
                    (false, true) => matmul_into(gm.t(), ma, T::one(), gb),
                    (true, false) => matmul_into(ma, gm, T::one(), gb),
                    (true, true) => matmul_into(gm.t(), ma.t(), T::one(), gb),
                }
            }
            Op::Add(a, b) => {
                add_into(acc_buf(grads, *a, g.len()), g);
                add_into(acc_buf(grads, *b, g.len()), g);
            }
            Op::AddRow { x, bias } => {
                add_into(acc_buf(grads, *x, g.len()), g);
                let gb = acc_buf(grads, *bias, c);
                for row in g.chunks_exact(c) {
                    add_into(gb, row);
                }
            }
            Op::AddCycled { x, table } => {
                add_into(acc_buf(grads, *x, g.len()), g);
                let tl = self.value(*table).len();
                let gt = acc_buf(grads, *table, tl);
                let tr = tl / c;
                for (i, row) in g.chunks_exact(c).enumerate() {
                    add_into(&mut gt[(i % tr) * c..(i % tr + 1) * c], row);
                }
            }
            Op::Scale { a, c: k } => {
                let ga = acc_buf(grads, *a, g.len());
                for (d, &s) in ga.iter_mut().zip(g) {
                    *d = *d + s * *k;
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let ga = acc_buf(grads, *a, g.len());
                for ((d, &s), &x) in ga.iter_mut().zip(g).zip(va) {
                    if x > T::zero() {
                        *d = *d + s;
                    }
                }
            }
            Op::Gelu { a, tanh } => {
                let va = self.value(*a).data();
                let ga = acc_buf(grads, *a, g.len());
                for (((d, &s), &x), &t) in ga.iter_mut().zip(g).zip(va).zip(tanh) {
                    *d = *d + s * gelu_grad(x, t);
                }
            }
            Op::Dropout { a, mask } => {
                let ga = acc_buf(grads, *a, g.len());
                for ((d, &s), &m) in ga.iter_mut().zip(g).zip(mask) {
                    *d = *d + s * m;
                }
            }
            Op::LayerNorm { x, g: gv, b, xhat, rstd } => {
                let gamma = self.value(*gv).data().to_vec();
                {
                    let gg = acc_buf(grads, *gv, c);
                    for (row_g, row_h) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + row_g[j] * row_h[j];
                        }
                    }
                }
                {
                    let gb = acc_buf(grads, *b, c);
                    for row in g.chunks_exact(c) {
                        add_into(gb, row);
                    }
                }
                let n = T::from_f64(c as f64);
                let gx = acc_buf(grads, *x, r * c);
                let mut dxh = vec![T::zero(); c];
                for i in 0..r {
                    let row_g = &g[i * c..(i + 1) * c];
                    let row_h = &xhat[i * c..(i + 1) * c];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        dxh[j] = row_g[j] * gamma[j];
                        m1 = m1 + dxh[j];
                        m2 = m2 + dxh[j] * row_h[j];
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    for j in 0..c {
                        let d = &mut gx[i * c + j];
                        *d = *d + rstd[i] * (dxh[j] - m1 - row_h[j] * m2);
                    }
                }
            }
            Op::Attention { q, k, v, heads, block, probs, .. } => {
                self.attention_backward(g, (*q, *k, *v), *heads, *block, probs, grads);
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let ga = acc_buf(grads, *a, g.len());
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        ga[i * c + j] = ga[i * c + j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let pc = rows_cols(self.value(p)).1;
                    let gp = acc_buf(grads, p, r * pc);
                    for i in 0..r {
                        add_into(&mut gp[i * pc..(i + 1) * pc], &g[i * c + col..i * c + col + pc]);
                    }
                    col += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    add_into(acc_buf(grads, p, n), &g[off..off + n]);
                    off += n;
                }
            }
            Op::SliceRows { a, start } => {
                let n = self.value(*a).len();
                let ga = acc_buf(grads, *a, n);
                add_into(&mut ga[start * c..start * c + g.len()], g);
            }
            Op::GatherRows { a, idx } => {
                let n = self.value(*a).len();
                let ga = acc_buf(grads, *a, n);
                for (k, &i) in idx.iter().enumerate() {
                    add_into(&mut ga[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }
            Op::MeanBlocks { a, block } => {
                let n = self.value(*a).len();
                let inv = T::from_f64(1.0 / *block as f64);
                let ga = acc_buf(grads, *a, n);
                for (i, row) in ga.chunks_exact_mut(c).enumerate() {
                    let src = &g[(i / block) * c..(i / block + 1) * c];
                    for (d, &s) in row.iter_mut().zip(src) {
                        *d = *d + s * inv;
                    }
                }
            }
            Op::Reshape(a) => add_into(acc_buf(grads, *a, g.len()), g),
            Op::OffDiagRowSum(a) => {
                let n = c;
                let ga = acc_buf(grads, *a, n * n);
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            ga[i * n + j] = ga[i * n + j] + g[i];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs, denom } => {
                let lc = rows_cols(self.value(*logits)).1;
                let n = self.value(*logits).len();
                let scale = g[0] / *denom;
                let gl = acc_buf(grads, *logits, n);
                for (i, row) in gl.chunks_exact_mut(lc).enumerate() {
                    let w = weights[i];
                    if w == T::zero() {
                        continue;
                    }
                    for j in 0..lc {
                        let onehot = if j == targets[i] { T::one() } else { T::zero() };
                        row[j] = row[j] + scale * w * (probs[i * lc + j] - onehot);
                    }
                }
            }
            Op::DotConst { a, r: rv } => {
                let ga = acc_buf(grads, *a, rv.len());
                for (d, &s) in ga.iter_mut().zip(rv) {
                    *d = *d + g[0] * s;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let ga = acc_buf(grads, *a, n);
                for d in ga.iter_mut() {
                    *d = *d + g[0];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        block: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (r, d) = rows_cols(self.value(q));
        let hd = d / heads;
        let l = block;
        let nb = r / l;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut gq = vec![T::zero(); r * d];
        let mut gk = vec![T::zero(); r * d];
        let mut gv = vec![T::zero(); r * d];
        let mut dp = vec![T::zero(); l * l];
        for blk in 0..nb {
            for h in 0..heads {
                let off = blk * l * d + h * hd;
                let p = &probs[(blk * heads + h) * l * l..(blk * heads + h + 1) * l * l];
                // SAFETY: every window is inside its r x d (or l x l) buffer.
                unsafe {
                    // dV += P^T dO
                    T::gemm(
                        l, l, hd, T::one(),
                        p.as_ptr(), 1, l as isize,
                        g[off..].as_ptr(), d as isize, 1,
                        T::one(), gv[off..].as_mut_ptr(), d as isize, 1,
                    );
                    // dP = dO V^T
                    T::gemm(
                        l, hd, l, T::one(),
                        g[off..].as_ptr(), d as isize, 1,
                        vd[off..].as_ptr(), 1, d as isize,
                        T::zero(), dp.as_mut_ptr(), l as isize, 1,
                    );
                }
                for i in 0..l {
                    let pr = &p[i * l..(i + 1) * l];
                    let dr = &mut dp[i * l..(i + 1) * l];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..l {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                unsafe {
                    // dQ += dS K
                    T::gemm(
                        l, l, hd, T::one(),
                        dp.as_ptr(), l as isize, 1,
                        kd[off..].as_ptr(), d as isize, 1,
                        T::one(), gq[off..].as_mut_ptr(), d as isize, 1,
                    );
                    // dK += dS^T Q
                    T::gemm(
                        l, l, hd, T::one(),
                        dp.as_ptr(), 1, l as isize,
                        qd[off..].as_ptr(), d as isize, 1,
                        T::one(), gk[off..].as_mut_ptr(), d as isize, 1,
                    );
                }
            }
        }
        add_into(acc_buf(grads, q, r * d), &gq);
        add_into(acc_buf(grads, k, r * d), &gk);
        add_into(acc_buf(grads, v, r * d), &gv);
    }
}

fn acc_buf<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(vec![T::zero(); n]);
    }
    slot.as_mut().unwrap().as_mut_slice()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh(c (x + k x^3))` written through `exp`, which is much cheaper than libm's tanh.
fn gelu_tanh<T: Scalar>(x: T) -> T {
    let u = T::from_f64(GELU_C) * (x + T::from_f64(0.044715) * x * x * x);
    let two = T::from_f64(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

#[cfg(test)]
fn gelu<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * x * (T::one() + gelu_tanh(x))
}

fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * k * x * x)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        s = s + *x;
    }
    for x in row.iter_mut() {
        *x = *x / s;
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::numerics::{grad_check, Init};

    fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut s = ParamStore::new();
        for &(n, r, c) in shapes {
            s.insert(n, init.normal(&[r, c], 1.0)).unwrap();
        }
        s
    }

    fn probe(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn check(store: &ParamStore<f64>, f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var) {
        let rep = grad_check(|t, s| Ok(f(t, s)), store, 1e-5, 64, 1).unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
    }

    #[test]
    fn gelu_matches_tanh_form() {
        for &x in &[-6.0f64, -1.3, -1e-4, 0.0, 0.5, 1.0, 2.7, 40.0] {
            let want = 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh());
            assert!((gelu(x) - want).abs() < 1e-14, "{x}");
        }
        assert!((gelu(1.0f32) - 0.841_192).abs() < 1e-6);
    }

    #[test]
    fn matmul_variants() {
        let s = store_with(&[("a", 3, 4), ("b", 4, 5), ("c", 5, 4), ("d", 3, 5)], 1);
        check(&s, |t, s| {
            let a = t.param(s, "a");
            let b = t.param(s, "b");
            let c = t.param(s, "c");
            let d = t.param(s, "d");
            let x = t.matmul(a, b); // 3x5
            let y = t.matmul_t(a, false, c, true); // 3x5
            let z = t.matmul_t(d, true, a, false); // 5x4
            let w = t.matmul_t(b, true, c, true); // 5x5
            let xy = t.add(x, y);
            let p = t.matmul(xy, z); // 3x4
            let q = t.matmul(w, c); // 5x4
            let r1 = probe(12, 2);
            let r2 = probe(20, 3);
            let l1 = t.dot_const(p, &r1);
            let l2 = t.dot_const(q, &r2);
            let l = t.concat_rows(&[l1, l2]);
            t.sum(l)
        });
    }

    #[test]
    fn elementwise_and_norm() {
        let s = store_with(&[("x", 4, 6), ("g", 1, 6), ("b", 1, 6), ("t", 2, 6)], 4);
        check(&s, |t, s| {
            let x = t.param(s, "x");
            let g = t.param(s, "g");
            let b = t.param(s, "b");
            let tab = t.param(s, "t");
            let y = t.layer_norm(x, g, b);
            let y = t.gelu(y);
            let z = t.add_cycled(x, tab);
            let z = t.relu(z);
            let z = t.scale(z, 0.7);
            let u = t.add_row(y, b);
            let v = t.add(u, z);
            let v = t.softmax_rows(v);
            let r = probe(24, 5);
            t.dot_const(v, &r)
        });
    }

    #[test]
    fn structural_ops() {
        let s = store_with(&[("x", 6, 3), ("y", 6, 2), ("c", 4, 5)], 6);
        check(&s, |t, s| {
            let x = t.param(s, "x");
            let y = t.param(s, "y");
            let xy = t.concat_cols(&[x, y]); // 6x5
            let sl = t.slice_rows(xy, 1, 4); // 4x5
            let gth = t.gather_rows(xy, &[5, 0, 0, 3]); // 4x5
            let m = t.mean_blocks(xy, 3); // 2x5
            let c = t.param(s, "c");
            let cc = t.matmul_t(c, false, c, true); // 4x4
            let od = t.off_diag_row_sum(cc); // 1x4
            let odr = t.reshape(od, 2, 2);
            let a = t.add(sl, gth);
            let r1 = probe(20, 7);
            let r2 = probe(10, 8);
            let r3 = probe(4, 9);
            let l1 = t.dot_const(a, &r1);
            let l2 = t.dot_const(m, &r2);
            let l3 = t.dot_const(odr, &r3);
            let l = t.concat_cols(&[l1, l2, l3]);
            t.sum(l)
        });
    }

    #[test]
    fn attention_causal_and_full() {
        let s = store_with(&[("q", 8, 6), ("k", 8, 6), ("v", 8, 6)], 10);
        for causal in [false, true] {
            check(&s, |t, s| {
                let q = t.param(s, "q");
                let k = t.param(s, "k");
                let v = t.param(s, "v");
                let o = t.attention(q, k, v, 2, 4, causal);
                let r = probe(48, 11);
                t.dot_const(o, &r)
            });
        }
    }

    #[test]
    fn masked_cross_entropy_ignores_padding() {
        let s = store_with(&[("z", 4, 5)], 12);
        check(&s, |t, s| {
            let z = t.param(s, "z");
            t.cross_entropy(z, &[1, 0, 4, 2], &[1.0, 0.0, 1.0, 1.0])
        });
        let mut t = Tape::new();
        let z = t.param(&s, "z");
        let l = t.cross_entropy(z, &[1, 0, 4, 2], &[1.0, 0.0, 1.0, 1.0]);
        let g = t.backward(l);
        assert!(g.get(z).unwrap()[5..10].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_only_in_training_tapes() {
        let s = store_with(&[("x", 10, 10)], 13);
        let mut eval = Tape::new();
        let x = eval.param(&s, "x");
        assert_eq!(eval.dropout(x), x);
        let mut train = Tape::<f64>::with_dropout(0.5, 1);
        let x = train.param(&s, "x");
        let y = train.dropout(x);
        let zeros = train.value(y).data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 20 && zeros < 80);
    }

    proptest! {
        #[test]
        fn softmax_permutation_equivariant(v in proptest::collection::vec(-20.0f64..20.0, 2..12), seed in 0u64..1000) {
            let p = crate::numerics::softmax(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mut perm: Vec<usize> = (0..v.len()).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pv: Vec<f64> = perm.iter().map(|&i| v[i]).collect();
            let pp = crate::numerics::softmax(&pv).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((pp[k] - p[i]).abs() <= 1e-12);
            }
        }
    }
}
