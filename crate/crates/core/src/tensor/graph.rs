use rand::Rng;

use super::{matmul_acc, matmul_nt_acc, matmul_tn_acc, shape_err, Real, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
    /// Scalar output whose derivative with respect to `input` was computed
    /// during the forward pass.
    Linearized {
        input: Var,
        jacobian: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// A single-use computation record. Build one per forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every tracked node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Leaf whose gradient is wanted (weights, or inputs under gradcheck).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(shape_err(
                "matmul",
                format!("expected matrices, got {:?} and {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, k2, p) = (av.shape()[0], av.shape()[1], bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{m}x{k} · {k2}x{p}: inner extents differ"),
            ));
        }
        let mut out = vec![T::zero(); m * p];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, p);
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, p], out)?, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let n = xv.cols();
        if bv.len() != n {
            return Err(shape_err(
                "add_row",
                format!("bias of {} entries for {} columns", bv.len(), n),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let tracked = self.any_tracked(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), tracked))
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        if xv.shape() != c.shape() {
            return Err(shape_err(
                "add_const",
                format!("{:?} vs {:?}", xv.shape(), c.shape()),
            ));
        }
        let mut out = xv.clone();
        out.add_assign(c);
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(out, Op::AddConst(x), tracked))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.nodes[x.0].value.map(|v| v * s);
        let tracked = self.any_tracked(&[x]);
        self.push(out, Op::Scale(x, s), tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let tracked = self.any_tracked(&[x]);
        self.push(out, Op::Relu(x), tracked)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        if !xv.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let n = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(out, Op::Softmax(x), tracked))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let d = xv.cols();
        if d < 2 {
            return Err(shape_err("layer_norm", "need at least 2 features"));
        }
        let (gv, bv) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        if gv.len() != d || bv.len() != d {
            return Err(shape_err(
                "layer_norm",
                format!("gain/bias {}/{} for width {d}", gv.len(), bv.len()),
            ));
        }
        let rows = xv.rows();
        let dn = T::of(d as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let shape = xv.shape().to_vec();
        let tracked = self.any_tracked(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let cols = self.nodes[first.0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("{} columns vs {cols}", v.cols()),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let tracked = self.any_tracked(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            tracked,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let rows = self.nodes[first.0].value.rows();
        if parts.iter().any(|p| self.nodes[p.0].value.rows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let tracked = self.any_tracked(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            tracked,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = (xv.rows(), xv.cols());
        if len == 0 || start + len > cols {
            return Err(shape_err(
                "slice_cols",
                format!("[{start}, {}) of {cols} columns", start + len),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, len], data)?,
            Op::SliceCols { x, start },
            tracked,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = xv.data()[r * cols + c];
            }
        }
        let tracked = self.any_tracked(&[x]);
        let t = Tensor::new(vec![cols, rows], data).expect("transpose preserves size");
        self.push(t, Op::Transpose(x), tracked)
    }

    /// Inverted dropout. Identity in [`Mode::Eval`].
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        mode: Mode,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Argument {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let xv = &self.nodes[x.0].value;
        let mask: Vec<T> = (0..xv.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = xv.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o = *o * m;
        }
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, tracked))
    }

    /// Scalar `Σ x ⊙ w`.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        if xv.len() != weights.len() {
            return Err(shape_err(
                "weighted_sum",
                format!("{} values, {} weights", xv.len(), weights.len()),
            ));
        }
        let s = xv
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, tracked))
    }

    /// Records a scalar `value = f(input)` together with `∂f/∂input`.
    pub fn linearized(&mut self, input: Var, value: T, jacobian: Tensor<T>) -> Result<Var, TensorError> {
        if self.nodes[input.0].value.shape() != jacobian.shape() {
            return Err(shape_err(
                "linearized",
                format!(
                    "jacobian {:?} for input {:?}",
                    jacobian.shape(),
                    self.nodes[input.0].value.shape()
                ),
            ));
        }
        let tracked = self.any_tracked(&[input]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Linearized { input, jacobian },
            tracked,
        ))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>, TensorError> {
        let ov = &self.nodes[out.0].value;
        if ov.len() != 1 {
            return Err(TensorError::NotScalar(ov.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::filled(ov.shape(), T::one()));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.tracked {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, p) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    matmul_nt_acc(g.data(), bv.data(), da.data_mut(), m, k, p);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(&[k, p]);
                    matmul_tn_acc(av.data(), g.data(), db.data_mut(), m, k, p);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let bshape = self.nodes[bias.0].value.shape().to_vec();
                    let n = g.cols();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor { shape: bshape, data: db });
                }
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone()),
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                let mut d = g.clone();
                for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::zero() {
                        *dv = T::zero();
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot = drow
                        .iter()
                        .zip(yrow)
                        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = g.cols();
                let gv = &self.nodes[gain.0].value;
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (grow, hrow) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + grow[j] * hrow[j];
                            db[j] = db[j] + grow[j];
                        }
                    }
                    let gs = gv.shape().to_vec();
                    let bs = self.nodes[bias.0].value.shape().to_vec();
                    self.accumulate(grads, *gain, Tensor { shape: gs, data: dg });
                    self.accumulate(grads, *bias, Tensor { shape: bs, data: db });
                }
                if self.wants(*x) {
                    let dn = T::of(d as f64);
                    let mut dx = g.clone();
                    for ((dxrow, hrow), &inv) in dx
                        .data_mut()
                        .chunks_mut(d)
                        .zip(xhat.chunks(d))
                        .zip(inv_std)
                    {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = dxrow[j] * gv.data()[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hrow[j];
                        }
                        for j in 0..d {
                            let dh = dxrow[j] * gv.data()[j];
                            dxrow[j] = inv / dn * (dn * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = &self.nodes[p.0].value;
                    let n = pv.len();
                    if self.wants(*p) {
                        let slice = g.data()[offset..offset + n].to_vec();
                        self.accumulate(
                            grads,
                            *p,
                            Tensor {
                                shape: pv.shape().to_vec(),
                                data: slice,
                            },
                        );
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut col = 0;
                for p in parts {
                    let pv = &self.nodes[p.0].value;
                    let w = pv.cols();
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[col..col + w]);
                        }
                        self.accumulate(
                            grads,
                            *p,
                            Tensor {
                                shape: pv.shape().to_vec(),
                                data,
                            },
                        );
                    }
                    col += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = &self.nodes[x.0].value;
                let (rows, cols, w) = (xv.rows(), xv.cols(), g.cols());
                let mut d = Tensor::zeros(xv.shape());
                for r in 0..rows {
                    d.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, d);
            }
            Op::Transpose(x) => {
                let (rows, cols) = (g.rows(), g.cols());
                let mut data = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        data[c * rows + r] = g.data()[r * cols + c];
                    }
                }
                let shape = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(grads, *x, Tensor { shape, data });
            }
            Op::Dropout { x, mask } => {
                let mut d = g.clone();
                for (dv, &m) in d.data_mut().iter_mut().zip(mask) {
                    *dv = *dv * m;
                }
                self.accumulate(grads, *x, d);
            }
            Op::WeightedSum { x, weights } => {
                let s = g.data()[0];
                self.accumulate(grads, *x, weights.map(|w| w * s));
            }
            Op::Linearized { input, jacobian } => {
                let s = g.data()[0];
                self.accumulate(grads, *input, jacobian.map(|w| w * s));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let a = g.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let r = g.matmul(i, a).unwrap();
        assert_eq!(g.value(r), g.value(a));
        let b = g.constant(m(2, 1, &[0.0, 1.0]));
        let r = g.matmul(a, b).unwrap();
        assert_eq!(g.value(r).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("2x3 · 2x3"), "{err}");
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&[3, 4], &mut rng);
        let b = random_tensor(&[4, 2], &mut rng);
        let report = gradcheck(&[a, b], 1e-6, 11, |g, v| g.matmul(v[0], v[1])).unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(m(1, 4, &[0.7; 4]));
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = g.constant(m(1, 2, &[0.0, 3f64.ln()]));
        let y = g.softmax_rows(x).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(m(1, 2, &[0.0, f64::NAN]));
        assert_eq!(
            g.softmax_rows(x).unwrap_err(),
            TensorError::NonFinite { op: "softmax_rows" }
        );
    }

    #[test]
    fn softmax_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&[4, 4], &mut rng);
        let report = gradcheck(&[x], 1e-6, 12, |g, v| g.softmax_rows(v[0])).unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::filled(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(m(1, 4, &[3.0; 4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let gain = g.constant(Tensor::filled(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(m(1, 2, &[1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] - expect).abs() < 1e-15);
        assert!((g.value(y).data()[1] + expect).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&[3, 8], &mut rng);
        let gain = random_tensor(&[8], &mut rng);
        let bias = random_tensor(&[8], &mut rng);
        let report = gradcheck(&[x, gain, bias], 1e-6, 13, |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn structural_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_tensor(&[3, 4], &mut rng);
        let b = random_tensor(&[2, 4], &mut rng);
        let c = random_tensor(&[4], &mut rng);
        let report = gradcheck(&[a, b, c], 1e-6, 14, |g, v| {
            let rows = g.concat_rows(&[v[0], v[1]])?;
            let rows = g.add_row(rows, v[2])?;
            let t = g.transpose(rows);
            let left = g.slice_cols(t, 0, 2)?;
            let right = g.slice_cols(t, 2, 3)?;
            let joined = g.concat_cols(&[right, left])?;
            let r = g.relu(joined);
            let s = g.scale(r, 0.5);
            g.add(s, joined)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    #[test]
    fn dropout_identity_cases_and_rate_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.param(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = g.dropout(x, 0.2, &mut rng, Mode::Eval).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let y = g.dropout(x, 0.0, &mut rng, Mode::Train).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(g.dropout(x, 1.0, &mut rng, Mode::Train).is_err());
        assert!(g.dropout(x, -0.1, &mut rng, Mode::Train).is_err());
    }

    #[test]
    fn dropout_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 8;
        let trials = 100_000;
        let mut acc = vec![0.0; n];
        for _ in 0..trials {
            let mut g = Graph::new();
            let x = g.constant(Tensor::filled(&[1, n], 1.0));
            let y = g.dropout(x, 0.2, &mut rng, Mode::Train).unwrap();
            for (a, v) in acc.iter_mut().zip(g.value(y).data()) {
                *a += v;
            }
        }
        for a in acc {
            assert!((a / trials as f64 - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn dropout_masks_follow_seed() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.param(Tensor::filled(&[4, 4], 1.0f32));
            let y = g.dropout(x, 0.5, &mut rng, Mode::Train).unwrap();
            let loss = g.weighted_sum(y, Tensor::filled(&[4, 4], 1.0)).unwrap();
            let grads = g.backward(loss).unwrap();
            (g.value(y).clone(), grads.get(x).unwrap().clone())
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn backward_is_repeatable_and_tracking_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(&[3, 3], &mut rng);
        let b = random_tensor(&[3, 3], &mut rng);
        let mut g = Graph::new();
        let av = g.param(a.clone());
        let bv = g.param(b.clone());
        let p = g.matmul(av, bv).unwrap();
        let s = g.softmax_rows(p).unwrap();
        let l = g.weighted_sum(s, Tensor::filled(&[3, 3], 0.3)).unwrap();
        let g1 = g.backward(l).unwrap().get(av).unwrap().clone();
        let g2 = g.backward(l).unwrap().get(av).unwrap().clone();
        assert_eq!(g1.data(), g2.data());

        let mut h = Graph::new();
        let av = h.constant(a);
        let bv = h.constant(b);
        let p2 = h.matmul(av, bv).unwrap();
        let s2 = h.softmax_rows(p2).unwrap();
        assert_eq!(h.value(s2), g.value(s));
        assert!(!h.is_tracked(s2));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }
}
