//! Reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! A [`Tape`] records operations eagerly; [`Tape::backward`] replays the
//! graph in reverse and produces gradients for every node. All arithmetic is
//! f64 so analytic gradients can be checked against central finite
//! differences at tight tolerances.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use ndarray::{Array1, Array2, Axis};

/// Cached forward state for the fused LSTM op; all matrices are `T x H`.
struct LstmCache {
    gi: Array2<f64>,
    gf: Array2<f64>,
    gg: Array2<f64>,
    go: Array2<f64>,
    c: Array2<f64>,
    tc: Array2<f64>,
}

enum Op {
    Leaf,
    Add(usize, usize),
    /// `(n x m) + (1 x m)` broadcast over rows.
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    SumAll(usize),
    MeanAll(usize),
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    /// Row gather from a table: `(K x D)[ids] -> n x D`.
    GatherRows(usize, Rc<Vec<usize>>),
    /// im2col unfold: `(n x c) -> n_out x (k * c)` with stride and zero padding.
    Unfold {
        x: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Insert a zero row after every input row: `n -> 2n - 1` rows.
    ZeroStuff(usize),
    /// Repeat every row `factor` times.
    RepeatRows(usize, usize),
    Softmax(usize),
    /// Row softmax restricted to `mask == true` entries; others output 0.
    MaskedSoftmax(usize, Rc<Array2<bool>>),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        /// Per-row (mean, 1/std) cached at forward time.
        stats: Vec<(f64, f64)>,
    },
    /// Mean cross-entropy straight from logits.
    CrossEntropy {
        logits: usize,
        targets: Rc<Vec<usize>>,
        /// Row softmax cached at forward time.
        probs: Array2<f64>,
    },
    Lstm {
        x: usize,
        wx: usize,
        wh: usize,
        b: usize,
        reverse: bool,
        cache: Box<LstmCache>,
    },
    Detach,
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a computation graph of matrix operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Insert a leaf node (parameter or constant input).
    pub fn leaf(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn value_ref(&self, idx: usize) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |nodes| &nodes[idx].value)
    }

    /// Run the backward pass from a scalar (1x1) loss node.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.idx].value.dim(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.idx).rev() {
            let g = match grads[idx].as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf | Op::Detach => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddBias(a, b) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, db);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    accumulate(&mut grads, *a, &g * vb);
                    accumulate(&mut grads, *b, &g * va);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.mapv(|v| v * c));
                }
                Op::MatMul(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    accumulate(&mut grads, *a, g.dot(&vb.t()));
                    accumulate(&mut grads, *b, va.t().dot(&g));
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.t().to_owned());
                }
                Op::Relu(a) => {
                    let va = &nodes[*a].value;
                    let mut da = g;
                    da.zip_mut_with(va, |d, &v| {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let mut da = g;
                    da.zip_mut_with(y, |d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut da = g;
                    da.zip_mut_with(y, |d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, &g * y);
                }
                Op::SumAll(a) => {
                    let shape = nodes[*a].value.raw_dim();
                    accumulate(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::MeanAll(a) => {
                    let shape = nodes[*a].value.raw_dim();
                    let numel = (shape[0] * shape[1]) as f64;
                    accumulate(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]] / numel));
                }
                Op::SliceCols(a, start, end) => {
                    let (rows, cols) = nodes[*a].value.dim();
                    let mut da = Array2::zeros((rows, cols));
                    da.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.ncols();
                        let dp = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, p, dp);
                        offset += w;
                    }
                }
                Op::GatherRows(table, ids) => {
                    let (k, d) = nodes[*table].value.dim();
                    let mut dt = Array2::zeros((k, d));
                    for (row, &id) in ids.iter().enumerate() {
                        let mut slot = dt.row_mut(id);
                        slot += &g.row(row);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Unfold {
                    x,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (n, c) = nodes[*x].value.dim();
                    let mut dx = Array2::zeros((n, c));
                    for j in 0..node.value.nrows() {
                        for q in 0..*kernel {
                            let src = (j * stride + q) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < n {
                                let mut row = dx.row_mut(src as usize);
                                let gs = g.slice(ndarray::s![j, q * c..(q + 1) * c]);
                                row += &gs;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ZeroStuff(a) => {
                    let (n, c) = nodes[*a].value.dim();
                    let mut da = Array2::zeros((n, c));
                    for i in 0..n {
                        da.row_mut(i).assign(&g.row(2 * i));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RepeatRows(a, factor) => {
                    let (n, c) = nodes[*a].value.dim();
                    let mut da = Array2::zeros((n, c));
                    for i in 0..n {
                        for r in 0..*factor {
                            let mut row = da.row_mut(i);
                            row += &g.row(i * factor + r);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut da = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                        for c in 0..y.ncols() {
                            da[[r, c]] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MaskedSoftmax(a, _mask) => {
                    // Off-mask outputs are exactly zero, so the plain softmax
                    // Jacobian already routes no gradient through them.
                    let y = &node.value;
                    let mut da = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                        for c in 0..y.ncols() {
                            da[[r, c]] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let vx = &nodes[*x].value;
                    let vgamma = &nodes[*gamma].value;
                    let (n, m) = vx.dim();
                    let mut dx = Array2::zeros((n, m));
                    let mut dgamma = Array2::zeros((1, m));
                    let mut dbeta = Array2::zeros((1, m));
                    for r in 0..n {
                        let (mean, rstd) = stats[r];
                        let gr = g.row(r);
                        let xr = vx.row(r);
                        let mut dxhat = Array1::zeros(m);
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..m {
                            let xhat = (xr[c] - mean) * rstd;
                            dgamma[[0, c]] += gr[c] * xhat;
                            dbeta[[0, c]] += gr[c];
                            let d = gr[c] * vgamma[[0, c]];
                            dxhat[c] = d;
                            mean_dxhat += d;
                            mean_dxhat_xhat += d * xhat;
                        }
                        mean_dxhat /= m as f64;
                        mean_dxhat_xhat /= m as f64;
                        for c in 0..m {
                            let xhat = (xr[c] - mean) * rstd;
                            dx[[r, c]] = rstd * (dxhat[c] - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = targets.len() as f64;
                    let scale = g[[0, 0]] / n;
                    let mut dl = probs.clone();
                    for (row, &t) in targets.iter().enumerate() {
                        dl[[row, t]] -= 1.0;
                    }
                    dl.mapv_inplace(|v| v * scale);
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Lstm {
                    x,
                    wx,
                    wh,
                    b,
                    reverse,
                    cache,
                } => {
                    let vx = &nodes[*x].value;
                    let vwx = &nodes[*wx].value;
                    let vwh = &nodes[*wh].value;
                    let h_all = &node.value;
                    let t_len = vx.nrows();
                    let in_dim = vx.ncols();
                    let hidden = vwh.nrows();

                    let order: Vec<usize> = if *reverse {
                        (0..t_len).rev().collect()
                    } else {
                        (0..t_len).collect()
                    };

                    let mut dx = Array2::zeros((t_len, in_dim));
                    let mut dwx = Array2::zeros((in_dim, 4 * hidden));
                    let mut dwh = Array2::zeros((hidden, 4 * hidden));
                    let mut db = Array2::zeros((1, 4 * hidden));
                    let mut dh_carry = Array1::<f64>::zeros(hidden);
                    let mut dc_carry = Array1::<f64>::zeros(hidden);

                    for p in (0..t_len).rev() {
                        let t = order[p];
                        let (h_prev, c_prev): (Array1<f64>, Array1<f64>) = if p > 0 {
                            let tp = order[p - 1];
                            (h_all.row(tp).to_owned(), cache.c.row(tp).to_owned())
                        } else {
                            (Array1::zeros(hidden), Array1::zeros(hidden))
                        };

                        let gi = cache.gi.row(t);
                        let gf = cache.gf.row(t);
                        let gg = cache.gg.row(t);
                        let go = cache.go.row(t);
                        let tc = cache.tc.row(t);

                        let dh = &g.row(t) + &dh_carry;
                        let mut dz = Array1::<f64>::zeros(4 * hidden);
                        for j in 0..hidden {
                            let do_ = dh[j] * tc[j];
                            let dc = dc_carry[j] + dh[j] * go[j] * (1.0 - tc[j] * tc[j]);
                            let di = dc * gg[j];
                            let dg = dc * gi[j];
                            let df = dc * c_prev[j];
                            dc_carry[j] = dc * gf[j];
                            dz[j] = di * gi[j] * (1.0 - gi[j]);
                            dz[hidden + j] = df * gf[j] * (1.0 - gf[j]);
                            dz[2 * hidden + j] = dg * (1.0 - gg[j] * gg[j]);
                            dz[3 * hidden + j] = do_ * go[j] * (1.0 - go[j]);
                        }

                        for i in 0..in_dim {
                            let xi = vx[[t, i]];
                            for j in 0..4 * hidden {
                                dwx[[i, j]] += xi * dz[j];
                            }
                        }
                        for i in 0..hidden {
                            let hi = h_prev[i];
                            for j in 0..4 * hidden {
                                dwh[[i, j]] += hi * dz[j];
                            }
                        }
                        for j in 0..4 * hidden {
                            db[[0, j]] += dz[j];
                        }
                        dx.row_mut(t).assign(&dz.dot(&vwx.t()));
                        dh_carry = dz.dot(&vwh.t());
                    }

                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *wx, dwx);
                    accumulate(&mut grads, *wh, dwh);
                    accumulate(&mut grads, *b, db);
                }
            }
        }
        Grads { by_node: grads }
    }
}

/// Gradients produced by a backward pass, keyed by tape node.
pub struct Grads {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to `var`, if it received any.
    pub fn of(&self, var: Var<'_>) -> Option<&Array2<f64>> {
        self.by_node.get(var.idx).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, treating "never reached" as zero.
    pub fn of_or_zero(&self, var: Var<'_>, shape: (usize, usize)) -> Array2<f64> {
        self.of(var).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
    match &mut grads[idx] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.idx
    }

    /// Clone of this node's value.
    pub fn value(&self) -> Array2<f64> {
        self.tape.value_ref(self.idx).clone()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.tape.value_ref(self.idx).dim()
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let v = {
            let a = self.tape.value_ref(self.idx);
            let b = self.tape.value_ref(rhs.idx);
            assert_eq!(a.dim(), b.dim(), "add: shape mismatch");
            &*a + &*b
        };
        self.tape.push(v, Op::Add(self.idx, rhs.idx))
    }

    /// Add a `1 x m` bias row to every row of an `n x m` matrix.
    pub fn add_bias(self, bias: Var<'t>) -> Var<'t> {
        let v = {
            let a = self.tape.value_ref(self.idx);
            let b = self.tape.value_ref(bias.idx);
            assert_eq!(b.nrows(), 1, "add_bias: bias must be a single row");
            assert_eq!(a.ncols(), b.ncols(), "add_bias: width mismatch");
            &*a + &b.row(0)
        };
        self.tape.push(v, Op::AddBias(self.idx, bias.idx))
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let v = {
            let a = self.tape.value_ref(self.idx);
            let b = self.tape.value_ref(rhs.idx);
            assert_eq!(a.dim(), b.dim(), "sub: shape mismatch");
            &*a - &*b
        };
        self.tape.push(v, Op::Sub(self.idx, rhs.idx))
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let v = {
            let a = self.tape.value_ref(self.idx);
            let b = self.tape.value_ref(rhs.idx);
            assert_eq!(a.dim(), b.dim(), "mul: shape mismatch");
            &*a * &*b
        };
        self.tape.push(v, Op::Mul(self.idx, rhs.idx))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).mapv(|x| x * c);
        self.tape.push(v, Op::Scale(self.idx, c))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let v = {
            let a = self.tape.value_ref(self.idx);
            let b = self.tape.value_ref(rhs.idx);
            assert_eq!(a.ncols(), b.nrows(), "matmul: inner dim mismatch");
            a.dot(&*b)
        };
        self.tape.push(v, Op::MatMul(self.idx, rhs.idx))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).t().to_owned();
        self.tape.push(v, Op::Transpose(self.idx))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).mapv(|x| x.max(0.0));
        self.tape.push(v, Op::Relu(self.idx))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).mapv(f64::tanh);
        self.tape.push(v, Op::Tanh(self.idx))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).mapv(sigmoid);
        self.tape.push(v, Op::Sigmoid(self.idx))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).mapv(f64::exp);
        self.tape.push(v, Op::Exp(self.idx))
    }

    pub fn sum_all(self) -> Var<'t> {
        let s = self.tape.value_ref(self.idx).sum();
        self.tape
            .push(Array2::from_elem((1, 1), s), Op::SumAll(self.idx))
    }

    pub fn mean_all(self) -> Var<'t> {
        let v = self.tape.value_ref(self.idx);
        let numel = (v.nrows() * v.ncols()) as f64;
        let s = v.sum() / numel;
        drop(v);
        self.tape
            .push(Array2::from_elem((1, 1), s), Op::MeanAll(self.idx))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let v = self
            .tape
            .value_ref(self.idx)
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.tape.push(v, Op::SliceCols(self.idx, start, end))
    }

    /// Gather rows of this table node by index: `(K x D)[ids] -> n x D`.
    pub fn gather_rows(self, ids: Rc<Vec<usize>>) -> Var<'t> {
        let v = {
            let table = self.tape.value_ref(self.idx);
            let mut out = Array2::zeros((ids.len(), table.ncols()));
            for (row, &id) in ids.iter().enumerate() {
                assert!(id < table.nrows(), "gather_rows: id {id} out of range");
                out.row_mut(row).assign(&table.row(id));
            }
            out
        };
        self.tape.push(v, Op::GatherRows(self.idx, ids))
    }

    /// Unfold for 1-D convolution along rows (time), zero padded:
    /// output row `j`, columns `[q*c, (q+1)*c)` hold input row `j*stride + q - pad`.
    pub fn unfold(self, kernel: usize, stride: usize, pad: usize) -> Var<'t> {
        let v = {
            let x = self.tape.value_ref(self.idx);
            let (n, c) = x.dim();
            assert!(n + 2 * pad >= kernel, "unfold: input shorter than kernel");
            let n_out = (n + 2 * pad - kernel) / stride + 1;
            let mut out = Array2::zeros((n_out, kernel * c));
            for j in 0..n_out {
                for q in 0..kernel {
                    let src = (j * stride + q) as isize - pad as isize;
                    if src >= 0 && (src as usize) < n {
                        out.slice_mut(ndarray::s![j, q * c..(q + 1) * c])
                            .assign(&x.row(src as usize));
                    }
                }
            }
            out
        };
        self.tape.push(
            v,
            Op::Unfold {
                x: self.idx,
                kernel,
                stride,
                pad,
            },
        )
    }

    /// Zero-stuff rows for transposed convolution: `n -> 2n - 1` rows with
    /// input row `i` at output row `2i`.
    pub fn zero_stuff(self) -> Var<'t> {
        let v = {
            let x = self.tape.value_ref(self.idx);
            let (n, c) = x.dim();
            let mut out = Array2::zeros((2 * n - 1, c));
            for i in 0..n {
                out.row_mut(2 * i).assign(&x.row(i));
            }
            out
        };
        self.tape.push(v, Op::ZeroStuff(self.idx))
    }

    pub fn repeat_rows(self, factor: usize) -> Var<'t> {
        let v = {
            let x = self.tape.value_ref(self.idx);
            let (n, c) = x.dim();
            let mut out = Array2::zeros((n * factor, c));
            for i in 0..n {
                for r in 0..factor {
                    out.row_mut(i * factor + r).assign(&x.row(i));
                }
            }
            out
        };
        self.tape.push(v, Op::RepeatRows(self.idx, factor))
    }

    pub fn softmax(self) -> Var<'t> {
        let v = {
            let x = self.tape.value_ref(self.idx);
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            out
        };
        self.tape.push(v, Op::Softmax(self.idx))
    }

    /// Row softmax over `mask == true` entries; masked-out entries output 0.
    pub fn masked_softmax(self, mask: Rc<Array2<bool>>) -> Var<'t> {
        let v = {
            let x = self.tape.value_ref(self.idx);
            assert_eq!(x.dim(), mask.dim(), "masked_softmax: mask shape mismatch");
            let mut out = Array2::zeros(x.raw_dim());
            for r in 0..x.nrows() {
                let mut max = f64::NEG_INFINITY;
                for c in 0..x.ncols() {
                    if mask[[r, c]] {
                        max = max.max(x[[r, c]]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue; // fully masked row stays zero
                }
                let mut sum = 0.0;
                for c in 0..x.ncols() {
                    if mask[[r, c]] {
                        let e = (x[[r, c]] - max).exp();
                        out[[r, c]] = e;
                        sum += e;
                    }
                }
                for c in 0..x.ncols() {
                    out[[r, c]] /= sum;
                }
            }
            out
        };
        self.tape.push(v, Op::MaskedSoftmax(self.idx, mask))
    }

    /// Per-row layer normalization with learned scale and shift (both `1 x m`).
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Var<'t> {
        let (v, stats) = {
            let x = self.tape.value_ref(self.idx);
            let gv = self.tape.value_ref(gamma.idx);
            let bv = self.tape.value_ref(beta.idx);
            let (n, m) = x.dim();
            assert_eq!(gv.dim(), (1, m), "layer_norm: gamma shape");
            assert_eq!(bv.dim(), (1, m), "layer_norm: beta shape");
            let mut out = Array2::zeros((n, m));
            let mut stats = Vec::with_capacity(n);
            for r in 0..n {
                let row = x.row(r);
                let mean = row.sum() / m as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let rstd = 1.0 / (var + LN_EPS).sqrt();
                stats.push((mean, rstd));
                for c in 0..m {
                    out[[r, c]] = (row[c] - mean) * rstd * gv[[0, c]] + bv[[0, c]];
                }
            }
            (out, stats)
        };
        self.tape.push(
            v,
            Op::LayerNorm {
                x: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                stats,
            },
        )
    }

    /// Mean cross-entropy of integer targets against these logits (`n x V`).
    pub fn cross_entropy(self, targets: Rc<Vec<usize>>) -> Var<'t> {
        let (loss, probs) = {
            let logits = self.tape.value_ref(self.idx);
            assert_eq!(logits.nrows(), targets.len(), "cross_entropy: row count");
            let mut probs = logits.clone();
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                assert!(t < logits.ncols(), "cross_entropy: target out of range");
                let mut row = probs.row_mut(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
                total += -(probs[[r, t]].max(f64::MIN_POSITIVE)).ln();
            }
            (total / targets.len() as f64, probs)
        };
        self.tape.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits: self.idx,
                targets,
                probs,
            },
        )
    }

    /// Fused single-direction LSTM over rows.
    ///
    /// `x` is `T x in`, `wx` is `in x 4H`, `wh` is `H x 4H`, `b` is `1 x 4H`
    /// with gate order `[input, forget, cell, output]`. Returns the hidden
    /// states as `T x H`; row `t` always corresponds to input row `t`, with
    /// `reverse` controlling the direction state flows in.
    pub fn lstm(self, wx: Var<'t>, wh: Var<'t>, b: Var<'t>, reverse: bool) -> Var<'t> {
        let (h_all, cache) = {
            let x = self.tape.value_ref(self.idx);
            let vwx = self.tape.value_ref(wx.idx);
            let vwh = self.tape.value_ref(wh.idx);
            let vb = self.tape.value_ref(b.idx);
            let t_len = x.nrows();
            let hidden = vwh.nrows();
            assert_eq!(vwx.ncols(), 4 * hidden, "lstm: wx width");
            assert_eq!(vwh.ncols(), 4 * hidden, "lstm: wh width");
            assert_eq!(vb.dim(), (1, 4 * hidden), "lstm: bias shape");
            assert_eq!(vwx.nrows(), x.ncols(), "lstm: wx height");

            let order: Vec<usize> = if reverse {
                (0..t_len).rev().collect()
            } else {
                (0..t_len).collect()
            };

            let mut h_all = Array2::zeros((t_len, hidden));
            let mut cache = LstmCache {
                gi: Array2::zeros((t_len, hidden)),
                gf: Array2::zeros((t_len, hidden)),
                gg: Array2::zeros((t_len, hidden)),
                go: Array2::zeros((t_len, hidden)),
                c: Array2::zeros((t_len, hidden)),
                tc: Array2::zeros((t_len, hidden)),
            };
            let mut h_prev = Array1::<f64>::zeros(hidden);
            let mut c_prev = Array1::<f64>::zeros(hidden);
            for &t in &order {
                let z = &x.row(t).dot(&*vwx) + &h_prev.dot(&*vwh) + &vb.row(0);
                for j in 0..hidden {
                    let gi = sigmoid(z[j]);
                    let gf = sigmoid(z[hidden + j]);
                    let gg = z[2 * hidden + j].tanh();
                    let go = sigmoid(z[3 * hidden + j]);
                    let c = gf * c_prev[j] + gi * gg;
                    let tc = c.tanh();
                    cache.gi[[t, j]] = gi;
                    cache.gf[[t, j]] = gf;
                    cache.gg[[t, j]] = gg;
                    cache.go[[t, j]] = go;
                    cache.c[[t, j]] = c;
                    cache.tc[[t, j]] = tc;
                    h_all[[t, j]] = go * tc;
                }
                h_prev.assign(&h_all.row(t));
                c_prev.assign(&cache.c.row(t));
            }
            (h_all, cache)
        };
        self.tape.push(
            h_all,
            Op::Lstm {
                x: self.idx,
                wx: wx.idx,
                wh: wh.idx,
                b: b.idx,
                reverse,
                cache: Box::new(cache),
            },
        )
    }

    /// Cut the gradient: forward is the identity, backward propagates nothing.
    pub fn detach(self) -> Var<'t> {
        let v = self.tape.value_ref(self.idx).clone();
        self.tape.push(v, Op::Detach)
    }

    /// Concatenate columns of several nodes on the same tape.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let v = {
            let rows = tape.value_ref(parts[0].idx).nrows();
            let total: usize = parts.iter().map(|p| tape.value_ref(p.idx).ncols()).sum();
            let mut out = Array2::zeros((rows, total));
            let mut offset = 0;
            for p in parts {
                let vp = tape.value_ref(p.idx);
                assert_eq!(vp.nrows(), rows, "concat_cols: row count mismatch");
                out.slice_mut(ndarray::s![.., offset..offset + vp.ncols()])
                    .assign(&vp);
                offset += vp.ncols();
            }
            out
        };
        tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
