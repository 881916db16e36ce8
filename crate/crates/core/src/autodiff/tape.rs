use super::params::{ParamId, ParamSet};
use super::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    MaxScalar(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SumAll(Var),
    SumCols(Var),
    BceWithLogits(Var, Var),
}

struct Node {
    op: Op,
    // param leaves borrow their value from the parameter set
    value: Option<Tensor>,
}

/// Records a computation over dense tensors for reverse-mode differentiation.
///
/// Parameters are referenced, not copied: a tape borrows the [`ParamSet`] it was
/// built against and gradients come back keyed by [`ParamId`].
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a parameter; zeros if it did not influence the output.
    pub fn param(&self, id: ParamId, set: &ParamSet) -> Tensor {
        match &self.params[id.index()] {
            Some(g) => g.clone(),
            None => {
                let p = set.get(id);
                Tensor::zeros(p.rows, p.cols)
            }
        }
    }

    pub fn param_opt(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to any recorded value (typically a constant input).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Flattened gradient aligned with [`ParamSet::flatten`].
    pub fn flatten(&self, set: &ParamSet) -> Vec<f64> {
        let mut out = Vec::with_capacity(set.num_scalars());
        for id in set.ids() {
            match &self.params[id.index()] {
                Some(g) => out.extend_from_slice(&g.data),
                None => out.extend(std::iter::repeat_n(0.0, set.get(id).len())),
            }
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-param node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data[0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Const, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false, 0.0, &mut out);
        self.push(Op::MatMul(a, b), Tensor::from_vec(m, n, out))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!(rv.rows, 1);
        assert_eq!(xv.cols, rv.cols, "add_row width mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(Op::AddRow(x, row), out)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(op, out)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Scales each row of `x` by the matching entry of the `rows x 1` column `w`.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.shape(), (xv.rows, 1), "mul_col expects a column");
        let mut out = xv.clone();
        for r in 0..out.rows {
            let s = wv.data[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        self.push(Op::MulCol(x, w), out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// Elementwise `max(a, c)`; the gradient flows only where `a > c`.
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x.max(c), Op::MaxScalar(a, c))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "concat_cols row mismatch");
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols);
        let width = end - start;
        let mut out = Tensor::zeros(av.rows, width);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_vec(rows, cols, data))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).rows_range(start, end);
        self.push(Op::SliceRows(a, start), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::SumAll(a), Tensor::from_vec(1, 1, vec![s]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, giving a `rows x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows).map(|r| av.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(av.rows, 1, data);
        self.push(Op::SumCols(a), out)
    }

    /// Elementwise Bernoulli negative log-likelihood of `target` under `sigmoid(logits)`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Var {
        self.zip_with(
            logits,
            target,
            |x, t| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p(),
            Op::BceWithLogits(logits, target),
        )
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        grads[output.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(id) => accumulate_into(&mut param_grads[id.index()], &g),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = av.shape();
                    let n = bv.cols;
                    // dA = G * B^T, dB = A^T * G
                    let ga = slot(&mut grads, *a, m, k);
                    gemm(m, n, k, &g.data, false, &bv.data, true, 1.0, &mut ga.data);
                    let gb = slot(&mut grads, *b, k, n);
                    gemm(k, m, n, &av.data, true, &g.data, false, 1.0, &mut gb.data);
                }
                Op::AddRow(x, row) => {
                    accumulate(&mut grads, *x, &g);
                    let mut rg = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in rg.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *row, &rg);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = elementwise(&g, bv, |gi, y| gi * y);
                    let gb = elementwise(&g, av, |gi, x| gi * x);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Div(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = elementwise(&g, bv, |gi, y| gi / y);
                    let mut gb = g.clone();
                    for ((o, &x), &y) in gb.data.iter_mut().zip(&av.data).zip(&bv.data) {
                        *o = -*o * x / (y * y);
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::MulCol(x, w) => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut gx = g.clone();
                    let mut gw = Tensor::zeros(wv.rows, 1);
                    for r in 0..g.rows {
                        let s = wv.data[r];
                        gx.row_mut(r).iter_mut().for_each(|v| *v *= s);
                        gw.data[r] = g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *w, &gw);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g.map(|v| v * c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, &g),
                Op::Tanh(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    accumulate(&mut grads, *a, &elementwise(&g, y, |gi, y| gi * (1.0 - y * y)));
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    accumulate(&mut grads, *a, &elementwise(&g, y, |gi, y| gi * y * (1.0 - y)));
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, &elementwise(&g, x, |gi, x| gi * sigmoid(x)));
                }
                Op::Exp(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    accumulate(&mut grads, *a, &elementwise(&g, y, |gi, y| gi * y));
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, &elementwise(&g, x, |gi, x| gi / x));
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, &elementwise(&g, x, |gi, x| 2.0 * gi * x));
                }
                Op::MaxScalar(a, c) => {
                    let x = self.value(*a);
                    let c = *c;
                    accumulate(
                        &mut grads,
                        *a,
                        &elementwise(&g, x, |gi, x| if x > c { gi } else { 0.0 }),
                    );
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let width = self.shape(p).1;
                        let mut gp = Tensor::zeros(g.rows, width);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + width]);
                        }
                        accumulate(&mut grads, p, &gp);
                        off += width;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let ga = slot(&mut grads, *a, rows, cols);
                    for r in 0..rows {
                        for (j, v) in g.row(r).iter().enumerate() {
                            ga.data[r * cols + start + j] += v;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        accumulate(&mut grads, p, &g.rows_range(off, off + rows));
                        off += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let ga = slot(&mut grads, *a, rows, cols);
                    let base = start * cols;
                    for (o, v) in ga.data[base..base + g.len()].iter_mut().zip(&g.data) {
                        *o += v;
                    }
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads, *a, &Tensor::filled(rows, cols, g.data[0]));
                }
                Op::SumCols(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r).iter_mut().for_each(|v| *v = g.data[r]);
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::BceWithLogits(logits, target) => {
                    let x = self.value(*logits);
                    let t = self.value(*target);
                    let mut gl = g.clone();
                    let mut gt = g.clone();
                    for (((a, b), &x), &t) in
                        gl.data.iter_mut().zip(gt.data.iter_mut()).zip(&x.data).zip(&t.data)
                    {
                        *b *= -x;
                        *a *= sigmoid(x) - t;
                    }
                    accumulate(&mut grads, *logits, &gl);
                    accumulate(&mut grads, *target, &gt);
                }
            }
            grads[i] = Some(g);
        }
        Gradients {
            params: param_grads,
            nodes: grads,
        }
    }
}

fn elementwise(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_vec(g.rows, g.cols, data)
}

fn slot(grads: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    accumulate_into(&mut grads[v.0], g);
}

fn accumulate_into(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        None => *slot = Some(g.clone()),
    }
}
