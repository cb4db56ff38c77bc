//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as a node whose inputs were created
//! before it, so creation order is a topological order and the backward pass
//! walks the nodes once in reverse.

use crate::error::{Error, Result};
use crate::matrix::{axpy, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine batch-normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(features: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// `r <- (1 - momentum) r + momentum * batch_stat` for mean and variance.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Per-feature batch mean and biased variance from a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, x_hat: Matrix, inv_std: Vec<f64>, coupled: bool },
    LeakyRelu { x: Var, slope: f64 },
    NormalizeRows { x: Var, norms: Vec<f64> },
    RowSqDist { a: Var, b: Var },
    Minimum { a: Var, b: Var },
    Hinge { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    AddScalar { x: Var },
    Scale { x: Var, factor: f64 },
    Mean { x: Var },
    SliceRows { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(a.len(), b.len()));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in execution order.
    pub fn op_trace(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|n| match n.op {
                Op::Leaf => "leaf",
                Op::Linear { .. } => "linear",
                Op::BatchNorm { .. } => "batch_norm",
                Op::LeakyRelu { .. } => "leaky_relu",
                Op::NormalizeRows { .. } => "normalize_rows",
                Op::RowSqDist { .. } => "row_sq_dist",
                Op::Minimum { .. } => "minimum",
                Op::Hinge { .. } => "hinge",
                Op::Add { .. } => "add",
                Op::Sub { .. } => "sub",
                Op::AddScalar { .. } => "add_scalar",
                Op::Scale { .. } => "scale",
                Op::Mean { .. } => "mean",
                Op::SliceRows { .. } => "slice_rows",
                Op::ConcatRows { .. } => "concat_rows",
            })
            .collect()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// `Y = X W^T + b` with `W: out x in`, `b: 1 x out`, `X: batch x in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.cols() {
            return Err(Error::dims(wv.cols(), xv.cols()));
        }
        if bv.shape() != (1, wv.rows()) {
            return Err(Error::dims(wv.rows(), bv.len()));
        }
        let mut y = xv.matmul_transposed(wv)?;
        let bias = bv.data().to_vec();
        for r in 0..y.rows() {
            axpy(1.0, &bias, y.row_mut(r));
        }
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    /// Batch normalization with `gamma`/`beta` as `1 x features` nodes.
    ///
    /// Train mode normalizes with the batch mean and biased variance and
    /// returns those statistics; the caller decides whether to fold them into
    /// `state`. Eval mode uses the running statistics and returns `None`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let (n, f) = xv.shape();
        if f != state.features() {
            return Err(Error::dims(state.features(), f));
        }
        let (gv, bv) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        if gv.len() != f || bv.len() != f {
            return Err(Error::dims(f, gv.len().min(bv.len())));
        }
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let mut mean = xv.column_sums();
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; f];
                for row in xv.row_iter() {
                    for j in 0..f {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let stats = BatchStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(stats))
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
        let mut x_hat = Matrix::zeros(n, f);
        let mut y = Matrix::zeros(n, f);
        for r in 0..n {
            let xr = xv.row(r);
            let hr = x_hat.row_mut(r);
            for j in 0..f {
                hr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            let yr = y.row_mut(r);
            let hr = x_hat.row(r);
            for j in 0..f {
                yr[j] = gv[j] * hr[j] + bv[j];
            }
        }
        let coupled = mode == Mode::Train;
        let out = self.push(y, Op::BatchNorm { x, gamma, beta, x_hat, inv_std, coupled });
        Ok((out, stats))
    }

    /// Elementwise `x` if `x >= 0`, else `slope * x`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(y, Op::LeakyRelu { x, slope })
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut y = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = crate::embedding::l2_norm(xv.row(r));
            if !(n >= 1e-12) {
                return Err(Error::ZeroVector);
            }
            y.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(y, Op::NormalizeRows { x, norms }))
    }

    /// Row-wise squared distance, `n x 1`.
    pub fn row_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv)?;
        let d: Vec<f64> = av
            .row_iter()
            .zip(bv.row_iter())
            .map(|(x, y)| crate::embedding::sq_dist_unchecked(x, y))
            .collect();
        let n = d.len();
        Ok(self.push(Matrix::from_vec(n, 1, d)?, Op::RowSqDist { a, b }))
    }

    /// Elementwise minimum; ties take `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv)?;
        let mut y = av.clone();
        for (yv, &bb) in y.data_mut().iter_mut().zip(bv.data()) {
            if bb < *yv {
                *yv = bb;
            }
        }
        Ok(self.push(y, Op::Minimum { a, b }))
    }

    /// `max(x, 0)` with gradient 1 at `x = 0`.
    pub fn hinge(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Hinge { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv)?;
        let mut y = av.clone();
        y.add_assign(bv);
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv)?;
        let mut y = av.clone();
        for (yv, &bb) in y.data_mut().iter_mut().zip(bv.data()) {
            *yv -= bb;
        }
        Ok(self.push(y, Op::Sub { a, b }))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v + c);
        self.push(y, Op::AddScalar { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor })
    }

    /// Mean of all entries, `1 x 1`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let m = xv.sum() / xv.len() as f64;
        Ok(self.push(Matrix::scalar(m), Op::Mean { x }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(Error::dims(xv.rows(), start + len));
        }
        let y = xv.slice_rows(start, len);
        Ok(self.push(y, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::dims(cols, v.cols()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let y = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(y, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Gradients of the `1 x 1` node `output` with respect to all nodes.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::dims(1, out.len()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, g.matmul(wv)?);
                    accumulate(&mut grads, *w, g.transposed_matmul(xv)?);
                    accumulate(&mut grads, *b, Matrix::row_vector(g.column_sums()));
                }
                Op::BatchNorm { x, gamma, beta, x_hat, inv_std, coupled } => {
                    let gv = self.value(*gamma).data();
                    let (n, f) = g.shape();
                    let mut dgamma = vec![0.0; f];
                    let mut dbeta = vec![0.0; f];
                    for r in 0..n {
                        let gr = g.row(r);
                        let hr = x_hat.row(r);
                        for j in 0..f {
                            dgamma[j] += gr[j] * hr[j];
                            dbeta[j] += gr[j];
                        }
                    }
                    let mut dx = Matrix::zeros(n, f);
                    if *coupled {
                        let nf = n as f64;
                        for r in 0..n {
                            let gr = g.row(r);
                            let hr = x_hat.row(r);
                            let dr = dx.row_mut(r);
                            for j in 0..f {
                                dr[j] = gv[j] * inv_std[j] / nf
                                    * (nf * gr[j] - dbeta[j] - hr[j] * dgamma[j]);
                            }
                        }
                    } else {
                        for r in 0..n {
                            let gr = g.row(r);
                            let dr = dx.row_mut(r);
                            for j in 0..f {
                                dr[j] = gv[j] * inv_std[j] * gr[j];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, Matrix::row_vector(dgamma));
                    accumulate(&mut grads, *beta, Matrix::row_vector(dbeta));
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let mut dx = g.clone();
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v < 0.0 {
                            *d *= slope;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let proj = crate::matrix::dot(yr, dx.row(r));
                        let dr = dx.row_mut(r);
                        for (d, &yy) in dr.iter_mut().zip(yr) {
                            *d = (*d - yy * proj) / n;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::RowSqDist { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let s = 2.0 * g.get(r, 0);
                        let (ar, br) = (av.row(r), bv.row(r));
                        for (d, (x, y)) in da.row_mut(r).iter_mut().zip(ar.iter().zip(br)) {
                            *d = s * (x - y);
                        }
                    }
                    let db = da.map(|v| -v);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Minimum { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = g.clone();
                    let mut db = g.clone();
                    for ((ga, gb), (&x, &y)) in da
                        .data_mut()
                        .iter_mut()
                        .zip(db.data_mut().iter_mut())
                        .zip(av.data().iter().zip(bv.data()))
                    {
                        if y < x {
                            *ga = 0.0;
                        } else {
                            *gb = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Hinge { x } => {
                    let xv = self.value(*x);
                    let mut dx = g.clone();
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v < 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub { a, b } => {
                    let neg = g.map(|v| -v);
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, neg);
                }
                Op::AddScalar { x } => accumulate(&mut grads, *x, g.clone()),
                Op::Scale { x, factor } => {
                    let f = *factor;
                    accumulate(&mut grads, *x, g.map(|v| v * f));
                }
                Op::Mean { x } => {
                    let xv = self.value(*x);
                    let s = g.item() / xv.len() as f64;
                    accumulate(&mut grads, *x, Matrix::filled(xv.rows(), xv.cols(), s));
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let cols = xv.cols();
                    dx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        accumulate(&mut grads, p, g.slice_rows(offset, rows));
                        offset += rows;
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Compares tape gradients of `f` against central finite differences.
///
/// `f` builds a scalar program from leaves holding `params` and must be a
/// pure function of them. Returns the largest relative error
/// `|g_tape - g_fd| / max(1e-5, |g_tape| + |g_fd|)` over all entries.
pub fn grad_check<F>(f: F, params: &[Matrix], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Matrix> = params.to_vec();
    for (p, g_tape) in analytic.iter().enumerate() {
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let (t_plus, _, o_plus) = eval(&work)?;
            work[p].data_mut()[i] = orig - step;
            let (t_minus, _, o_minus) = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let fd = (t_plus.value(o_plus).item() - t_minus.value(o_minus).item()) / (2.0 * step);
            let an = g_tape.data()[i];
            if !fd.is_finite() || !an.is_finite() {
                return Err(Error::NonFiniteGradient(format!("parameter {p}, entry {i}")));
            }
            let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-5);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn quadratic_grad_check() {
        let err = grad_check(
            |t, v| {
                let sq = t.row_sq_dist(v[0], v[1])?;
                t.mean(sq)
            },
            &[Matrix::scalar(3.0), Matrix::scalar(0.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let z = t.leaf(Matrix::scalar(0.0));
        let d = t.row_sq_dist(x, z).unwrap();
        let m = t.mean(d).unwrap();
        assert_eq!(t.backward(m).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0]]).unwrap());
        let w = t.leaf(Matrix::identity(2));
        let b = t.leaf(Matrix::row_vector(vec![0.0, 0.0]));
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let w0 = t.leaf(Matrix::zeros(2, 2));
        let ones = t.leaf(Matrix::row_vector(vec![1.0, 1.0]));
        let y = t.linear(x, w0, ones).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 1.0, 1.0, 1.0]);
        let bad = t.leaf(Matrix::zeros(2, 3));
        assert!(t.linear(x, bad, ones).is_err());
    }

    #[test]
    fn linear_weight_gradient_is_column_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xm = random(2, 4, &mut rng);
        let wm = random(3, 4, &mut rng);
        let mut t = Tape::new();
        let x = t.leaf(xm.clone());
        let w = t.leaf(wm.clone());
        let b = t.leaf(Matrix::row_vector(vec![0.0; 3]));
        let y = t.linear(x, w, b).unwrap();
        let m = t.mean(y).unwrap();
        let s = t.scale(m, 6.0);
        let g = t.backward(s).unwrap().wrt(w);
        let cs = xm.column_sums();
        for r in 0..3 {
            for c in 0..4 {
                assert!((g.get(r, c) - cs[c]).abs() < 1e-12);
            }
        }
        let err = grad_check(
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                let m = t.mean(y)?;
                Ok(t.scale(m, 6.0))
            },
            &[xm, wm, Matrix::row_vector(vec![0.1, -0.2, 0.3])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn batch_norm_examples() {
        let state = BatchNormState::new(1);
        let mut t = Tape::new();
        let g = t.leaf(Matrix::row_vector(vec![1.0]));
        let b = t.leaf(Matrix::row_vector(vec![0.5]));
        let x = t.leaf(Matrix::from_vec(3, 1, vec![2.0, 2.0, 2.0]).unwrap());
        let (y, _) = t.batch_norm(x, g, b, &state, Mode::Train).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5, 0.5]);

        let b0 = t.leaf(Matrix::row_vector(vec![0.0]));
        let x = t.leaf(Matrix::from_vec(2, 1, vec![-1.0, 1.0]).unwrap());
        let (y, stats) = t.batch_norm(x, g, b0, &state, Mode::Train).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((t.value(y).get(0, 0) + expected).abs() < 1e-15);
        assert!((t.value(y).get(1, 0) - expected).abs() < 1e-15);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![0.0]);
        assert_eq!(stats.var, vec![1.0]);

        let single = t.leaf(Matrix::from_vec(1, 1, vec![1.0]).unwrap());
        assert!(matches!(
            t.batch_norm(single, g, b0, &state, Mode::Train),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn batch_norm_eval_is_pure() {
        let mut state = BatchNormState::new(2);
        state.update_running(&BatchStats { mean: vec![1.0, -1.0], var: vec![4.0, 0.25] });
        let before = state.clone();
        let xm = Matrix::from_rows(&[vec![0.3, 0.1], vec![-2.0, 5.0]]).unwrap();
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(xm.clone());
            let g = t.leaf(Matrix::row_vector(state.gamma.clone()));
            let b = t.leaf(Matrix::row_vector(state.beta.clone()));
            let (y, stats) = t.batch_norm(x, g, b, &state, Mode::Eval).unwrap();
            assert!(stats.is_none());
            t.value(y).clone()
        };
        assert_eq!(run(), run());
        assert_eq!(state, before);
        assert!((state.running_mean[0] - 0.1).abs() < 1e-15);
        assert!((state.running_var[1] - 0.925).abs() < 1e-15);
    }

    #[test]
    fn leaky_relu_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(vec![2.0, -1.0, 0.0]));
        let y = t.leaky_relu(x, 0.01);
        assert_eq!(t.value(y).data(), &[2.0, -0.01, 0.0]);
        let m = t.mean(y).unwrap();
        let s = t.scale(m, 3.0);
        let g = t.backward(s).unwrap().wrt(x);
        assert_eq!(g.data(), &[1.0, 0.01, 1.0]);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let n = 3 + trial;
            let f = 2 + trial % 3;
            let params = vec![
                random(n, f, &mut rng),
                random(f, f, &mut rng),
                random(1, f, &mut rng),
                random(1, f, &mut rng).map(|v| 1.0 + 0.5 * v),
                random(1, f, &mut rng),
                random(n, f, &mut rng),
            ];
            let state = BatchNormState::new(f);
            let err = grad_check(
                |t, v| {
                    let h = t.linear(v[0], v[1], v[2])?;
                    let (h, _) = t.batch_norm(h, v[3], v[4], &state, Mode::Train)?;
                    let h = t.leaky_relu(h, 0.01);
                    let (e, _) = t.batch_norm(h, v[3], v[4], &state, Mode::Eval)?;
                    let un = t.normalize_rows(e)?;
                    let other = t.normalize_rows(v[5])?;
                    let d1 = t.row_sq_dist(un, other)?;
                    let top = t.slice_rows(un, 0, 1)?;
                    let rest = t.slice_rows(un, 1, n - 1)?;
                    let cat = t.concat_rows(&[rest, top])?;
                    let d2 = t.row_sq_dist(cat, other)?;
                    let m = t.minimum(d1, d2)?;
                    let shifted = t.add_scalar(m, -1.0);
                    let diff = t.sub(shifted, d1)?;
                    let diff = t.add(diff, d2)?;
                    let hinged = t.hinge(diff);
                    let s = t.scale(hinged, 0.7);
                    t.mean(s)
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn normalized_batch_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xm = random(50, 4, &mut rng).map(|v| 3.0 * v + 1.0);
        let state = BatchNormState::new(4);
        let mut t = Tape::new();
        let x = t.leaf(xm);
        let g = t.leaf(Matrix::row_vector(vec![1.0; 4]));
        let b = t.leaf(Matrix::row_vector(vec![0.0; 4]));
        let (y, stats) = t.batch_norm(x, g, b, &state, Mode::Train).unwrap();
        let stats = stats.unwrap();
        let yv = t.value(y);
        for j in 0..4 {
            let col: Vec<f64> = (0..50).map(|r| yv.get(r, j)).collect();
            let mu = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 50.0;
            assert!(mu.abs() < 1e-9);
            let s2 = stats.var[j];
            assert!((var - s2 / (s2 + 1e-5)).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xm = random(6, 3, &mut rng);
        let wm = random(3, 3, &mut rng);
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(xm.clone());
            let w = t.leaf(wm.clone());
            let b = t.leaf(Matrix::row_vector(vec![0.0; 3]));
            let y = t.linear(x, w, b).unwrap();
            let y = t.leaky_relu(y, 0.01);
            let m = t.mean(y).unwrap();
            t.backward(m).unwrap().wrt(w)
        };
        let (a, b) = (run(), run());
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
