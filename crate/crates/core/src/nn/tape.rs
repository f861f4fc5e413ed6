//! Reverse-mode differentiation over a recorded graph of 2-D arrays.
//!
//! Every value is a row-major `rows × cols` matrix; rows are batch entries.
//! Ops append a node holding the forward value, and [`Tape::backward`] walks
//! the nodes in reverse, accumulating adjoints and pushing parameter
//! gradients into the owning [`ParameterStore`].

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;

use super::params::{Mat, ParamId, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    /// Cached activated gates `[i f g o]` and `tanh(c)`.
    LstmCell {
        gates: Var,
        c_prev: Var,
        act: Mat,
        tanh_c: Mat,
    },
    WeightedSum(Var, Mat),
    LogMeanExp(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

fn same_shape(a: &Mat, b: &Mat, what: &str) {
    assert_eq!(a.dim(), b.dim(), "shape mismatch in {what}: {:?} vs {:?}", a.dim(), b.dim());
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_log_softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a {:?} node", m.dim());
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    /// Column vector from a slice.
    pub fn column(&mut self, values: &[f64]) -> Var {
        self.constant(Mat::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape"))
    }

    /// Parameter leaf. Repeated calls for the same parameter share one node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "shape mismatch in matmul: {:?} x {:?}", va.dim(), vb.dim());
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b))
    }

    /// `x · w + b` with `b` a single row broadcast over the batch.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(vx.ncols(), vw.nrows(), "shape mismatch in affine: {:?} x {:?}", vx.dim(), vw.dim());
        assert_eq!(vb.dim(), (1, vw.ncols()), "shape mismatch in affine bias: {:?}", vb.dim());
        let mut out = vx.dot(vw);
        out += vb;
        self.push(out, Op::Affine(x, w, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "add");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.dim(), (1, va.ncols()), "shape mismatch in add_row: {:?} + {:?}", va.dim(), vr.dim());
        let out = va + vr;
        self.push(out, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "sub");
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "mul");
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * v);
        self.push(out, Op::Square(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = row_log_softmax(self.value(a)).mapv(f64::exp);
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = row_log_softmax(self.value(a));
        self.push(out, Op::LogSoftmax(a))
    }

    /// Row lookup: output row `i` is `table[rows[i]]`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            assert!(r < t.nrows(), "gather index {r} out of range for {} rows", t.nrows());
            out.row_mut(i).assign(&t.row(r));
        }
        self.push(out, Op::Gather(table, rows.to_vec()))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut out = Mat::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), rows, "shape mismatch in concat: {} vs {rows} rows", v.nrows());
            out.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a);
        assert!(start < end && end <= v.ncols(), "slice {start}..{end} of {} columns", v.ncols());
        let out = v.slice(s![.., start..end]).to_owned();
        self.push(out, Op::Slice(a, start, end))
    }

    /// Long short-term memory update from pre-activation gates `[i f g o]`
    /// (`B × 4S`) and the previous memory (`B × S`). Returns `[h c]` (`B × 2S`).
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let (g, c0) = (self.value(gates), self.value(c_prev));
        let size = c0.ncols();
        assert_eq!(g.dim(), (c0.nrows(), 4 * size), "shape mismatch in lstm_cell: {:?} vs {:?}", g.dim(), c0.dim());
        let mut act = g.clone();
        act.slice_mut(s![.., ..2 * size]).mapv_inplace(sigmoid);
        act.slice_mut(s![.., 2 * size..3 * size]).mapv_inplace(f64::tanh);
        act.slice_mut(s![.., 3 * size..]).mapv_inplace(sigmoid);
        let i = act.slice(s![.., ..size]);
        let f = act.slice(s![.., size..2 * size]);
        let gg = act.slice(s![.., 2 * size..3 * size]);
        let o = act.slice(s![.., 3 * size..]);
        let c = &f * c0 + &i * &gg;
        let tanh_c = c.mapv(f64::tanh);
        let h = &o * &tanh_c;
        let mut out = Mat::zeros((c0.nrows(), 2 * size));
        out.slice_mut(s![.., ..size]).assign(&h);
        out.slice_mut(s![.., size..]).assign(&c);
        self.push(
            out,
            Op::LstmCell {
                gates,
                c_prev,
                act,
                tanh_c,
            },
        )
    }

    /// `Σ x ⊙ weights` as a `1 × 1` node.
    pub fn weighted_sum(&mut self, a: Var, weights: Mat) -> Var {
        same_shape(self.value(a), &weights, "weighted_sum");
        let total = Zip::from(self.value(a)).and(&weights).fold(0.0, |acc, &x, &w| acc + x * w);
        self.push(Mat::from_elem((1, 1), total), Op::WeightedSum(a, weights))
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let w = Mat::ones(self.value(a).raw_dim());
        self.weighted_sum(a, w)
    }

    /// Mean of all entries as a `1 × 1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let w = Mat::from_elem(self.value(a).raw_dim(), 1.0 / n);
        self.weighted_sum(a, w)
    }

    /// `log(mean(exp(x)))` over all entries, computed with the max shift.
    pub fn log_mean_exp(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mean = v.iter().map(|x| (x - max).exp()).sum::<f64>() / v.len() as f64;
        self.push(Mat::from_elem((1, 1), max + mean.ln()), Op::LogMeanExp(a))
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask = Mat::from_shape_simple_fn(self.value(a).raw_dim(), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Back-propagates from the `1 × 1` node `loss` and adds parameter
    /// gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from a non-scalar node");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Const => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&val(*b).t());
                    let gb = val(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Affine(x, w, b) => {
                    let gx = g.dot(&val(*w).t());
                    let gw = val(*x).t().dot(&g);
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, r) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *r, gr);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * val(*b);
                    let gb = &g * val(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Square(a) => acc(&mut grads, *a, g * val(*a) * 2.0),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(g - &dot);
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let soft = node.value.mapv(f64::exp);
                    let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = g - &(soft * &total);
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(table, rows) => {
                    let mut gt = Mat::zeros(val(*table).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gt.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let mut ga = Mat::zeros(val(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::LstmCell {
                    gates,
                    c_prev,
                    act,
                    tanh_c,
                } => {
                    let size = tanh_c.ncols();
                    let c0 = val(*c_prev);
                    let dh = g.slice(s![.., ..size]);
                    let dc_out = g.slice(s![.., size..]);
                    let mut dgates = Mat::zeros(act.raw_dim());
                    let mut dc_prev = Mat::zeros(c0.raw_dim());
                    for r in 0..c0.nrows() {
                        let a = act.row(r);
                        for k in 0..size {
                            let (i, f, gg, o) = (a[k], a[size + k], a[2 * size + k], a[3 * size + k]);
                            let tc = tanh_c[[r, k]];
                            let dhk = dh[[r, k]];
                            let dc = dc_out[[r, k]] + dhk * o * (1.0 - tc * tc);
                            dgates[[r, k]] = dc * gg * i * (1.0 - i);
                            dgates[[r, size + k]] = dc * c0[[r, k]] * f * (1.0 - f);
                            dgates[[r, 2 * size + k]] = dc * i * (1.0 - gg * gg);
                            dgates[[r, 3 * size + k]] = dhk * tc * o * (1.0 - o);
                            dc_prev[[r, k]] = dc * f;
                        }
                    }
                    acc(&mut grads, *gates, dgates);
                    acc(&mut grads, *c_prev, dc_prev);
                }
                Op::WeightedSum(a, w) => acc(&mut grads, *a, w * g[[0, 0]]),
                Op::LogMeanExp(a) => {
                    let x = val(*a);
                    let lme = node.value[[0, 0]];
                    let n = x.len() as f64;
                    let ga = x.mapv(|v| (v - lme).exp() / n) * g[[0, 0]];
                    acc(&mut grads, *a, ga);
                }
            }
        }
    }
}

/// `rows × cols` matrix from row-major values.
pub fn mat(rows: usize, cols: usize, values: Vec<f64>) -> Mat {
    Array2::from_shape_vec((rows, cols), values).expect("matrix shape")
}
