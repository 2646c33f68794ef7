//! Minimal reverse-mode differentiation over 2-D arrays.
//!
//! The training path records transformer forward passes on a [`Tape`] and
//! backpropagates a seed gradient from the feature node into the trainable
//! leaves (prompt tokens). Frozen parameters enter as constant leaves, so no
//! gradient is ever produced for them.
//!
//! Every op's forward math lives in a free function that the no-grad forward
//! path reuses, which keeps recorded and unrecorded passes bit-identical.

use ndarray::{Array2, Axis, s};

pub type NodeId = usize;

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// tanh-form gaussian error linear unit, applied elementwise.
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| {
        let inner = SQRT_2_OVER_PI * (v + GELU_COEF * v * v * v);
        0.5 * v * (1.0 + inner.tanh())
    })
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise layer normalization with affine gain/bias.
pub fn layer_norm_rows(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>, eps: f64) -> Array2<f64> {
    let n = x.ncols() as f64;
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = (v - mean) * rstd * gain[[0, j]] + bias[[0, j]];
        }
    }
    out
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Broadcast-add a `[1 x n]` row to every row of the first operand.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Softmax(NodeId),
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Gelu(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows {
        input: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        input: NodeId,
        start: usize,
        len: usize,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// A Wengert list: values are recorded during the forward pass, gradients are
/// produced by a single reverse sweep from a seeded node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Ids of all leaf nodes (inputs and parameters).
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, _)| i)
            .collect()
    }

    /// Whether `id` is a leaf that can receive gradients.
    pub fn is_trainable_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Constant input: gradients never accumulate here.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input: `backward` reports a gradient for it.
    pub fn variable(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.dot(&self.nodes[b].value);
        let req = self.requires(a) || self.requires(b);
        self.push(value, Op::MatMul(a, b), req)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.t().to_owned();
        let req = self.requires(a);
        self.push(value, Op::Transpose(a), req)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let req = self.requires(a) || self.requires(b);
        self.push(value, Op::Add(a, b), req)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        let value = &self.nodes[a].value + &self.nodes[row].value;
        let req = self.requires(a) || self.requires(row);
        self.push(value, Op::AddRow(a, row), req)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[a].value.mapv(|v| v * factor);
        let req = self.requires(a);
        self.push(value, Op::Scale(a, factor), req)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows(&self.nodes[a].value);
        let req = self.requires(a);
        self.push(value, Op::Softmax(a), req)
    }

    pub fn layer_norm(&mut self, input: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let value = layer_norm_rows(
            &self.nodes[input].value,
            &self.nodes[gain].value,
            &self.nodes[bias].value,
            eps,
        );
        let req = self.requires(input) || self.requires(gain) || self.requires(bias);
        self.push(
            value,
            Op::LayerNorm {
                input,
                gain,
                bias,
                eps,
            },
            req,
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = gelu(&self.nodes[a].value);
        let req = self.requires(a);
        self.push(value, Op::Gelu(a), req)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("row concat shape mismatch");
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), req)
    }

    pub fn slice_rows(&mut self, input: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.nodes[input]
            .value
            .slice(s![start..start + len, ..])
            .to_owned();
        let req = self.requires(input);
        self.push(value, Op::SliceRows { input, start, len }, req)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("col concat shape mismatch");
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), req)
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.nodes[input]
            .value
            .slice(s![.., start..start + len])
            .to_owned();
        let req = self.requires(input);
        self.push(value, Op::SliceCols { input, start, len }, req)
    }

    /// Reverse sweep from `root`, seeded with `seed` (same shape as the root
    /// value). Returns per-node gradients; entries are `None` for nodes that
    /// do not require gradients or that the root does not depend on.
    pub fn backward(&self, root: NodeId, seed: Array2<f64>) -> Gradients {
        assert_eq!(
            seed.raw_dim(),
            self.nodes[root].value.raw_dim(),
            "seed gradient shape must match the root value"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root].requires_grad {
            grads[root] = Some(seed);
        }
        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Array2<f64>>],
        target: NodeId,
        contribution: Array2<f64>,
    ) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => *existing += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, id: NodeId, grad: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let da = grad.dot(&self.nodes[b].value.t());
                    self.accumulate(grads, a, da);
                }
                if self.requires(b) {
                    let db = self.nodes[a].value.t().dot(grad);
                    self.accumulate(grads, b, db);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, grad.t().to_owned());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, grad.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, grad.clone());
                if self.requires(*row) {
                    let summed = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, summed);
                }
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, grad.mapv(|v| v * factor));
            }
            Op::Softmax(a) => {
                let y = &self.nodes[id].value;
                let mut dx = Array2::zeros(grad.raw_dim());
                for i in 0..grad.nrows() {
                    let dot: f64 = grad
                        .row(i)
                        .iter()
                        .zip(y.row(i).iter())
                        .map(|(g, v)| g * v)
                        .sum();
                    for j in 0..grad.ncols() {
                        dx[[i, j]] = y[[i, j]] * (grad[[i, j]] - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                eps,
            } => {
                let x = &self.nodes[*input].value;
                let g = &self.nodes[*gain].value;
                let n = x.ncols() as f64;
                if self.requires(*input) {
                    let mut dx = Array2::zeros(x.raw_dim());
                    for i in 0..x.nrows() {
                        let row = x.row(i);
                        let mean = row.sum() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let rstd = 1.0 / (var + eps).sqrt();
                        // dxhat_j = grad_j * gain_j; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                        let dxhat: Vec<f64> = (0..x.ncols())
                            .map(|j| grad[[i, j]] * g[[0, j]])
                            .collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..x.ncols() {
                            dx[[i, j]] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                if self.requires(*gain) {
                    let mut dg = Array2::zeros((1, x.ncols()));
                    for i in 0..x.nrows() {
                        let row = x.row(i);
                        let mean = row.sum() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let rstd = 1.0 / (var + eps).sqrt();
                        for j in 0..x.ncols() {
                            dg[[0, j]] += grad[[i, j]] * (x[[i, j]] - mean) * rstd;
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.requires(*bias) {
                    let db = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Gelu(a) => {
                let x = &self.nodes[*a].value;
                let dx = ndarray::Zip::from(grad)
                    .and(x)
                    .map_collect(|&g, &v| g * gelu_derivative(v));
                self.accumulate(grads, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.nrows();
                    if self.requires(p) {
                        let slice = grad.slice(s![offset..offset + rows, ..]).to_owned();
                        self.accumulate(grads, p, slice);
                    }
                    offset += rows;
                }
            }
            Op::SliceRows { input, start, len } => {
                if self.requires(*input) {
                    let mut dx = Array2::zeros(self.nodes[*input].value.raw_dim());
                    dx.slice_mut(s![*start..*start + *len, ..]).assign(grad);
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.ncols();
                    if self.requires(p) {
                        let slice = grad.slice(s![.., offset..offset + cols]).to_owned();
                        self.accumulate(grads, p, slice);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols { input, start, len } => {
                if self.requires(*input) {
                    let mut dx = Array2::zeros(self.nodes[*input].value.raw_dim());
                    dx.slice_mut(s![.., *start..*start + *len]).assign(grad);
                    self.accumulate(grads, *input, dx);
                }
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient at `id`, or `None` if the node is constant or unused.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` at `x`, one entry at a time.
    fn finite_diff<F: FnMut(&Array2<f64>) -> f64>(
        x: &Array2<f64>,
        step: f64,
        mut f: F,
    ) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        let mut probe = x.clone();
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let orig = probe[[r, c]];
            probe[[r, c]] = orig + step;
            let plus = f(&probe);
            probe[[r, c]] = orig - step;
            let minus = f(&probe);
            probe[[r, c]] = orig;
            out[[r, c]] = (plus - minus) / (2.0 * step);
        }
        out
    }

    fn max_rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    /// Checks d(sum(w ⊙ out))/d(input) for a unary graph builder.
    fn check_unary<F>(build: F, input: Array2<f64>, tol: f64)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let x = tape.variable(input.clone());
        let out = build(&mut tape, x);
        let weights = random_matrix(&mut rng, tape.value(out).nrows(), tape.value(out).ncols());
        let grads = tape.backward(out, weights.clone());
        let analytic = grads.get(x).expect("input gradient");

        let numeric = finite_diff(&input, 1e-5, |probe| {
            let mut t = Tape::new();
            let x = t.variable(probe.clone());
            let out = build(&mut t, x);
            (t.value(out) * &weights).sum()
        });
        let err = max_rel_err(analytic, &numeric);
        assert!(err < tol, "max relative error {err:.3e} >= {tol:.1e}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a0 = random_matrix(&mut rng, 3, 4);
        let b0 = random_matrix(&mut rng, 4, 2);
        let w = random_matrix(&mut rng, 3, 2);

        let mut tape = Tape::new();
        let a = tape.variable(a0.clone());
        let b = tape.variable(b0.clone());
        let out = tape.matmul(a, b);
        let grads = tape.backward(out, w.clone());

        let num_a = finite_diff(&a0, 1e-5, |probe| (probe.dot(&b0) * &w).sum());
        let num_b = finite_diff(&b0, 1e-5, |probe| (a0.dot(probe) * &w).sum());
        assert!(max_rel_err(grads.get(a).unwrap(), &num_a) < 1e-6);
        assert!(max_rel_err(grads.get(b).unwrap(), &num_b) < 1e-6);
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 3, 5);
        check_unary(|t, x| t.softmax(x), x, 1e-6);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 4, 6);
        let gain = random_matrix(&mut rng, 1, 6);
        let bias = random_matrix(&mut rng, 1, 6);
        check_unary(
            move |t, x| {
                let g = t.constant(gain.clone());
                let b = t.constant(bias.clone());
                t.layer_norm(x, g, b, 1e-6)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn gelu_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 3, 7);
        check_unary(|t, x| t.gelu(x), x, 1e-6);
    }

    #[test]
    fn slicing_and_concat_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 6, 4);
        check_unary(
            |t, x| {
                let top = t.slice_rows(x, 0, 2);
                let rest = t.slice_rows(x, 2, 4);
                let glued = t.concat_rows(&[rest, top]);
                let left = t.slice_cols(glued, 0, 2);
                let right = t.slice_cols(glued, 2, 2);
                t.concat_cols(&[right, left])
            },
            x,
            1e-7,
        );
    }

    #[test]
    fn add_row_broadcast_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x0 = random_matrix(&mut rng, 5, 3);
        let row0 = random_matrix(&mut rng, 1, 3);
        let w = random_matrix(&mut rng, 5, 3);

        let mut tape = Tape::new();
        let x = tape.variable(x0.clone());
        let row = tape.variable(row0.clone());
        let out = tape.add_row(x, row);
        let grads = tape.backward(out, w.clone());

        let num_row = finite_diff(&row0, 1e-5, |probe| ((&x0 + probe) * &w).sum());
        assert!(max_rel_err(grads.get(row).unwrap(), &num_row) < 1e-7);
        assert!(max_rel_err(grads.get(x).unwrap(), &w) < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.variable(array![[0.5, 0.5], [0.5, 0.5]]);
        let out = tape.matmul(a, b);
        let grads = tape.backward(out, Array2::ones((2, 2)));
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn gradient_accumulates_over_shared_subexpressions() {
        // out = x + x ⇒ d(sum)/dx = 2.
        let mut tape = Tape::new();
        let x = tape.variable(array![[1.0, -2.0]]);
        let out = tape.add(x, x);
        let grads = tape.backward(out, Array2::ones((1, 2)));
        assert_eq!(grads.get(x).unwrap(), &array![[2.0, 2.0]]);
    }
}
