//! Minimal reverse-mode differentiation over row-major matrices.
//!
//! Only the handful of operations the encoder needs are provided. Every node
//! keeps its forward value; [`Tape::backward`] seeds output gradients and
//! returns the accumulated gradient of every node.

use std::fmt;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (n×m) · b (m×d)`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a (n×d)`, `b (m×d)`.
fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols);
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` for `a (n×m)`, `b (n×d)`.
fn matmul_at(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows);
    let mut out = Mat::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let br = b.row(r);
        for (k, &ark) in a.row(r).iter().enumerate() {
            if ark == 0.0 {
                continue;
            }
            let orow = &mut out.data[k * b.cols..(k + 1) * b.cols];
            for (o, &v) in orow.iter_mut().zip(br) {
                *o += ark * v;
            }
        }
    }
    out
}

pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Concat(Vec<Var>),
    Broadcast(Var),
    Gather { x: Var, index: Vec<usize>, group: usize },
    Reshape(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Interp { x: Var, index: Vec<[usize; 3]>, weights: Vec<[f64; 3]> },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Winning rows of every max-pool on the tape, in recording order.
    pub fn pool_routing(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::MaxPool { argmax, .. } => Some(argmax.as_slice()),
                _ => None,
            })
            .flatten()
            .copied()
            .collect()
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `x · w + b`, with `w` of shape `in×out` and `b` of shape `1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(bv.cols, wv.cols, "bias width");
        let mut out = matmul(xv, wv);
        for r in 0..out.rows {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += bb;
            }
        }
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul { a, b })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.tanh());
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            softmax_row(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "concat row count");
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast(&mut self, x: Var, rows: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, 1, "broadcast source must be a row");
        let data = (0..rows).flat_map(|_| xv.data.iter().copied()).collect();
        let out = Mat::from_vec(rows, xv.cols, data);
        self.push(out, Op::Broadcast(x))
    }

    /// Output row `r` concatenates source rows `index[r*group .. (r+1)*group]`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, group: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(index.len() % group, 0, "gather index length");
        let rows = index.len() / group;
        let mut data = Vec::with_capacity(index.len() * xv.cols);
        for &i in &index {
            data.extend_from_slice(xv.row(i));
        }
        let out = Mat::from_vec(rows, group * xv.cols, data);
        self.push(out, Op::Gather { x, index, group })
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows * xv.cols, rows * cols, "reshape size");
        let out = Mat::from_vec(rows, cols, xv.data.clone());
        self.push(out, Op::Reshape(x))
    }

    /// Max over consecutive groups of `group` rows, per column. Ties route
    /// the gradient to the first row.
    pub fn max_pool(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        assert!(group > 0 && xv.rows % group == 0, "max_pool group size");
        let groups = xv.rows / group;
        let mut out = Mat::zeros(groups, xv.cols);
        let mut argmax = vec![0; groups * xv.cols];
        for g in 0..groups {
            for c in 0..xv.cols {
                let mut best = g * group;
                for r in g * group + 1..(g + 1) * group {
                    if xv.at(r, c) > xv.at(best, c) {
                        best = r;
                    }
                }
                argmax[g * xv.cols + c] = best;
                out.data[g * xv.cols + c] = xv.at(best, c);
            }
        }
        self.push(out, Op::MaxPool { x, argmax })
    }

    /// Row `i` of the output is `Σ_k weights[i][k] · x[index[i][k]]`.
    pub fn interp(&mut self, x: Var, index: Vec<[usize; 3]>, weights: Vec<[f64; 3]>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(index.len(), xv.cols);
        for (i, (idx, w)) in index.iter().zip(&weights).enumerate() {
            let orow = &mut out.data[i * xv.cols..(i + 1) * xv.cols];
            for k in 0..3 {
                for (o, &v) in orow.iter_mut().zip(xv.row(idx[k])) {
                    *o += w[k] * v;
                }
            }
        }
        self.push(out, Op::Interp { x, index, weights })
    }

    /// Reverse pass from the given output gradients.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            let node = &self.nodes[v.0].value;
            assert_eq!((g.rows, g.cols), (node.rows, node.cols), "seed gradient shape");
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let wv = self.value(*w);
                    accumulate(&mut grads, *x, matmul_bt(&gy, wv));
                    accumulate(&mut grads, *w, matmul_at(self.value(*x), &gy));
                    let mut gb = Mat::zeros(1, gy.cols);
                    for r in 0..gy.rows {
                        for (o, v) in gb.data.iter_mut().zip(gy.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMul { a, b } => {
                    accumulate(&mut grads, *a, matmul_bt(&gy, self.value(*b)));
                    accumulate(&mut grads, *b, matmul_at(self.value(*a), &gy));
                }
                Op::Tanh(x) => {
                    let mut gx = gy.clone();
                    for (g, y) in gx.data.iter_mut().zip(&node.value.data) {
                        *g *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = gy.clone();
                    for (g, y) in gx.data.iter_mut().zip(&node.value.data) {
                        *g *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), gy.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut gp = Mat::zeros(gy.rows, cols);
                        for r in 0..gy.rows {
                            gp.row_mut(r).copy_from_slice(&gy.row(r)[off..off + cols]);
                        }
                        accumulate(&mut grads, p, gp);
                        off += cols;
                    }
                }
                Op::Broadcast(x) => {
                    let mut gx = Mat::zeros(1, gy.cols);
                    for r in 0..gy.rows {
                        for (o, v) in gx.data.iter_mut().zip(gy.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gather { x, index, group } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    for (pos, &src) in index.iter().enumerate() {
                        let (r, k) = (pos / group, pos % group);
                        let part = &gy.row(r)[k * xv.cols..(k + 1) * xv.cols];
                        for (o, v) in gx.row_mut(src).iter_mut().zip(part) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, Mat::from_vec(xv.rows, xv.cols, gy.data.clone()));
                }
                Op::MaxPool { x, argmax } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    for (pos, &src) in argmax.iter().enumerate() {
                        let c = pos % xv.cols;
                        gx.data[src * xv.cols + c] += gy.data[pos];
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Interp { x, index, weights } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    for (i, (idx, w)) in index.iter().zip(weights).enumerate() {
                        for k in 0..3 {
                            for (o, v) in gx.row_mut(idx[k]).iter_mut().zip(gy.row(i)) {
                                *o += w[k] * v;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d/dε of `Σ w ⊙ f(x + ε dir)` against the tape gradient, for one
    /// chosen input.
    fn check<F>(inputs: Vec<Mat>, which: usize, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99 + which as u64);
        let eval = |inp: &[Mat]| -> (Tape, Vec<Var>, Var) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inp.iter().map(|m| tape.leaf(m.clone())).collect();
            let out = build(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape, vars, out) = eval(&inputs);
        let ov = tape.value(out).clone();
        let weights = rand_mat(&mut rng, ov.rows, ov.cols);
        let grads = tape.backward(&[(out, weights.clone())]);
        let dir = rand_mat(&mut rng, inputs[which].rows, inputs[which].cols);
        let analytic: f64 = grads
            .get(vars[which])
            .map(|g| g.data.iter().zip(&dir.data).map(|(a, b)| a * b).sum())
            .unwrap_or(0.0);
        let eps = 1e-5;
        let objective = |sign: f64| {
            let mut inp = inputs.clone();
            for (v, d) in inp[which].data.iter_mut().zip(&dir.data) {
                *v += sign * eps * d;
            }
            let (t, _, o) = eval(&inp);
            t.value(o).data.iter().zip(&weights.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = (objective(1.0) - objective(-1.0)) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-6, "analytic {analytic} numeric {numeric}");
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 5, 4);
        let w = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 1, 3);
        for which in 0..3 {
            check(vec![x.clone(), w.clone(), b.clone()], which, |t, v| t.linear(v[0], v[1], v[2]));
        }
        let a = rand_mat(&mut rng, 3, 5);
        check(vec![a.clone(), x.clone()], 0, |t, v| t.matmul(v[0], v[1]));
        check(vec![a.clone(), x.clone()], 1, |t, v| t.matmul(v[0], v[1]));
        check(vec![x.clone()], 0, |t, v| t.tanh(v[0]));
        check(vec![x.clone()], 0, |t, v| t.sigmoid(v[0]));
        check(vec![x.clone()], 0, |t, v| t.softmax_rows(v[0]));
        let y = rand_mat(&mut rng, 5, 2);
        check(vec![x.clone(), y.clone()], 1, |t, v| t.concat(&[v[0], v[1]]));
        check(vec![b.clone()], 0, |t, v| t.broadcast(v[0], 4));
        check(vec![x.clone()], 0, |t, v| t.gather(v[0], vec![4, 0, 0, 2, 3, 1], 2));
        check(vec![x.clone()], 0, |t, v| t.reshape(v[0], 10, 2));
        let tall = rand_mat(&mut rng, 6, 3);
        check(vec![tall.clone()], 0, |t, v| t.max_pool(v[0], 3));
        check(vec![x.clone()], 0, |t, v| {
            t.interp(v[0], vec![[0, 1, 2], [4, 4, 3]], vec![[0.2, 0.3, 0.5], [0.1, 0.6, 0.3]])
        });
        // A small composite graph with fan-out.
        check(vec![x.clone(), w.clone(), b.clone()], 1, |t, v| {
            let h = t.linear(v[0], v[1], v[2]);
            let h = t.tanh(h);
            let s = t.softmax_rows(h);
            t.concat(&[s, h])
        });
    }

    #[test]
    fn max_pool_routes_ties_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::from_vec(2, 1, vec![1.0, 1.0]));
        let y = tape.max_pool(x, 2);
        let g = tape.backward(&[(y, Mat::from_vec(1, 1, vec![1.0]))]);
        assert_eq!(g.get(x).unwrap().data, vec![1.0, 0.0]);
    }

    #[test]
    fn pool_routing_lists_winners() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::from_vec(4, 2, vec![1.0, 5.0, 3.0, 2.0, 0.0, 0.0, -1.0, 4.0]));
        let y = tape.max_pool(x, 2);
        tape.max_pool(y, 2);
        assert_eq!(tape.pool_routing().len(), 6);
        assert_eq!(tape.value(y).data, vec![3.0, 5.0, 0.0, 4.0]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut row = vec![1000.0, 0.0, -1000.0];
        softmax_row(&mut row);
        assert!((row[0] - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|v| v.is_finite()));
    }
}
