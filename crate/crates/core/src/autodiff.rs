//! Minimal reverse-mode automatic differentiation over `Array2<f64>`.
//!
//! A [`Tape`] records a DAG of matrix operations; [`Tape::backward`] walks it
//! once in reverse and accumulates gradients for every node, including leaves.
//! Scalars are 1x1 matrices and row vectors are 1xd, so the whole engine
//! works on a single value type.
//!
//! The op set is exactly what the models and losses in this crate need; shape
//! mismatches are programming errors and panic with the offending dimensions.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Square(NodeId),
    AddRow(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    MeanRows(NodeId),
    SumCols(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Im2ColSame { x: NodeId, width: usize },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to `id`, if the node influenced it.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, or zeros of the given shape when it had no influence.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        match self.grads[id.0] {
            Some(ref g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
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
        &self.nodes[id.0].value
    }

    pub fn dim(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert an input node (parameter or constant).
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Insert a 1x1 scalar leaf.
    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "add: {:?} vs {:?}", va.dim(), vb.dim());
        let v = va + vb;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "sub: {:?} vs {:?}", va.dim(), vb.dim());
        let v = va - vb;
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "mul: {:?} vs {:?}", va.dim(), vb.dim());
        let v = va * vb;
        self.push(v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul: {:?} . {:?}",
            va.dim(),
            vb.dim()
        );
        let v = va.dot(vb);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// `x + row` with `row` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (vx, vr) = (self.value(x), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row: row operand must be 1xd");
        assert_eq!(
            vx.ncols(),
            vr.ncols(),
            "add_row: {:?} vs {:?}",
            vx.dim(),
            vr.dim()
        );
        let v = vx + vr;
        self.push(v, Op::AddRow(x, row))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).mean().unwrap());
        self.push(v, Op::MeanAll(a))
    }

    /// Column means: (n, d) -> (1, d).
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = va
            .mean_axis(Axis(0))
            .unwrap()
            .insert_axis(Axis(0))
            .to_owned();
        self.push(v, Op::MeanRows(a))
    }

    /// Row sums: (n, d) -> (n, 1).
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = va.sum_axis(Axis(1)).insert_axis(Axis(1)).to_owned();
        self.push(v, Op::SumCols(a))
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::Softmax(a))
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Array2::zeros((n, total));
        let mut col = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.nrows(), n, "concat_cols: row count mismatch");
            v.slice_mut(s![.., col..col + vp.ncols()]).assign(vp);
            col += vp.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Array2::zeros((total, d));
        let mut row = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.ncols(), d, "concat_rows: column count mismatch");
            v.slice_mut(s![row..row + vp.nrows(), ..]).assign(vp);
            row += vp.nrows();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Unfold a (n, c) sequence into (n, width*c) windows for a stride-1
    /// same-length convolution; out-of-range rows clamp to the edges.
    pub fn im2col_same(&mut self, x: NodeId, width: usize) -> NodeId {
        assert!(width % 2 == 1, "im2col_same: width must be odd");
        let vx = self.value(x);
        let (n, c) = vx.dim();
        let half = (width / 2) as isize;
        let mut v = Array2::zeros((n, width * c));
        for i in 0..n {
            for (w, dk) in (-half..=half).enumerate() {
                let src = (i as isize + dk).clamp(0, n as isize - 1) as usize;
                for j in 0..c {
                    v[[i, w * c + j]] = vx[[src, j]];
                }
            }
        }
        self.push(v, Op::Im2ColSame { x, width })
    }

    /// Affine map `x.w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(
            self.dim(loss),
            (1, 1),
            "backward: loss must be a 1x1 scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-insert so callers can read gradients of interior nodes too.
            grads[idx] = Some(g.clone());

            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.t().to_owned());
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.mapv(|v| v * c));
                }
                Op::AddScalar(a) => {
                    accumulate(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da = ndarray::Zip::from(&g)
                        .and(y)
                        .map_collect(|&gv, &yv| gv * (1.0 - yv * yv));
                    accumulate(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    let da = &g * &self.nodes[idx].value;
                    accumulate(&mut grads, *a, da);
                }
                Op::Square(a) => {
                    let da = ndarray::Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&gv, &xv| 2.0 * gv * xv);
                    accumulate(&mut grads, *a, da);
                }
                Op::AddRow(x, row) => {
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0)).to_owned();
                    accumulate(&mut grads, *x, g);
                    accumulate(&mut grads, *row, drow);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.dim(*a), g[[0, 0]]);
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanAll(a) => {
                    let dim = self.dim(*a);
                    let da = Array2::from_elem(dim, g[[0, 0]] / (dim.0 * dim.1) as f64);
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanRows(a) => {
                    let (n, d) = self.dim(*a);
                    let mut da = Array2::zeros((n, d));
                    for mut row in da.rows_mut() {
                        for j in 0..d {
                            row[j] = g[[0, j]] / n as f64;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SumCols(a) => {
                    let (n, d) = self.dim(*a);
                    let mut da = Array2::zeros((n, d));
                    for i in 0..n {
                        for j in 0..d {
                            da[[i, j]] = g[[i, 0]];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Softmax(a) => {
                    let y = &self.nodes[idx].value;
                    let mut da = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| g[[i, j]] * y[[i, j]]).sum();
                        for j in 0..y.ncols() {
                            da[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmax(a) => {
                    let y = &self.nodes[idx].value;
                    let mut da = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let gsum: f64 = (0..y.ncols()).map(|j| g[[i, j]]).sum();
                        for j in 0..y.ncols() {
                            da[[i, j]] = g[[i, j]] - y[[i, j]].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.dim(p).1;
                        let dp = g.slice(s![.., col..col + w]).to_owned();
                        accumulate(&mut grads, p, dp);
                        col += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let h = self.dim(p).0;
                        let dp = g.slice(s![row..row + h, ..]).to_owned();
                        accumulate(&mut grads, p, dp);
                        row += h;
                    }
                }
                Op::Im2ColSame { x, width } => {
                    let (n, c) = self.dim(*x);
                    let half = (width / 2) as isize;
                    let mut da = Array2::zeros((n, c));
                    for i in 0..n {
                        for (w, dk) in (-half..=half).enumerate() {
                            let src = (i as isize + dk).clamp(0, n as isize - 1) as usize;
                            for j in 0..c {
                                da[[src, j]] += g[[i, w * c + j]];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, da);
                }
            }
        }

        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
    match grads[id.0] {
        Some(ref mut g) => *g += &delta,
        None => grads[id.0] = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;

    fn random(shape: (usize, usize), rng: &mut crate::rng::Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    /// Finite-difference check of d(loss)/d(leaf) for an arbitrary graph
    /// builder, over every entry of every leaf.
    fn check_grads<F>(leaves: &[Array2<f64>], build: F, tol: f64)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let eval = |vals: &[Array2<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let loss = build(&mut tape, &ids);
            tape.value(loss)[[0, 0]]
        };

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss);

        let step = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads.get_or_zeros(ids[li], leaf.dim());
            for idx in 0..leaf.len() {
                let (r, c) = (idx / leaf.ncols(), idx % leaf.ncols());
                let mut plus = leaves.to_vec();
                plus[li][[r, c]] += step;
                let mut minus = leaves.to_vec();
                minus[li][[r, c]] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let denom = (fd.abs() + g[[r, c]].abs()).max(1e-6);
                assert!(
                    (fd - g[[r, c]]).abs() / denom < tol,
                    "leaf {li} entry ({r},{c}): analytic {} vs fd {fd}",
                    g[[r, c]]
                );
            }
        }
    }

    #[test]
    fn matmul_add_chain_grads() {
        let mut rng = rng_from_seed(1);
        let a = random((3, 4), &mut rng);
        let b = random((4, 2), &mut rng);
        let c = random((3, 2), &mut rng);
        check_grads(
            &[a, b, c],
            |t, ids| {
                let p = t.matmul(ids[0], ids[1]);
                let q = t.add(p, ids[2]);
                let sq = t.square(q);
                t.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn tanh_linear_grads() {
        let mut rng = rng_from_seed(2);
        let x = random((5, 3), &mut rng);
        let w = random((3, 4), &mut rng);
        let b = random((1, 4), &mut rng);
        check_grads(
            &[x, w, b],
            |t, ids| {
                let h = t.linear(ids[0], ids[1], ids[2]);
                let y = t.tanh(h);
                let sq = t.square(y);
                t.sum_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_grads() {
        let mut rng = rng_from_seed(3);
        let x = random((4, 5), &mut rng);
        let w = random((4, 5), &mut rng);
        check_grads(
            &[x, w],
            |t, ids| {
                let sm = t.softmax(ids[0]);
                let prod = t.mul(sm, ids[1]);
                t.sum_all(prod)
            },
            1e-6,
        );
    }

    #[test]
    fn log_softmax_grads() {
        let mut rng = rng_from_seed(4);
        let x = random((3, 4), &mut rng);
        let target = random((3, 4), &mut rng).mapv(f64::abs);
        check_grads(
            &[x, target],
            |t, ids| {
                let lsm = t.log_softmax(ids[0]);
                let prod = t.mul(lsm, ids[1]);
                let s = t.sum_all(prod);
                t.scale(s, -1.0)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = rng_from_seed(12);
        let x = random((6, 9), &mut rng).mapv(|v| v * 30.0);
        let mut tape = Tape::new();
        let id = tape.leaf(x);
        let sm = tape.softmax(id);
        for row in tape.value(sm).rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn exp_scale_grads() {
        let mut rng = rng_from_seed(5);
        let x = random((3, 3), &mut rng);
        check_grads(
            &[x],
            |t, ids| {
                let sc = t.scale(ids[0], -0.7);
                let e = t.exp(sc);
                let shifted = t.add_scalar(e, 0.3);
                t.mean_all(shifted)
            },
            1e-6,
        );
    }

    #[test]
    fn reductions_and_broadcast_grads() {
        let mut rng = rng_from_seed(6);
        let x = random((4, 3), &mut rng);
        let row = random((1, 3), &mut rng);
        check_grads(
            &[x, row],
            |t, ids| {
                let y = t.add_row(ids[0], ids[1]);
                let m = t.mean_rows(y);
                let sq = t.square(m);
                let rowsum = t.sum_cols(sq);
                t.sum_all(rowsum)
            },
            1e-6,
        );
    }

    #[test]
    fn concat_grads() {
        let mut rng = rng_from_seed(7);
        let a = random((3, 2), &mut rng);
        let b = random((3, 4), &mut rng);
        let c = random((2, 6), &mut rng);
        check_grads(
            &[a, b, c],
            |t, ids| {
                let cols = t.concat_cols(&[ids[0], ids[1]]);
                let rows = t.concat_rows(&[cols, ids[2]]);
                let sq = t.square(rows);
                t.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn transpose_pairwise_distance_grads() {
        // The building block used by the kernel losses: squared distances via
        // row norms and a cross Gram matrix.
        let mut rng = rng_from_seed(8);
        let a = random((4, 3), &mut rng);
        let b = random((5, 3), &mut rng);
        check_grads(
            &[a, b],
            |t, ids| {
                let (a, b) = (ids[0], ids[1]);
                let (na, nb) = (t.dim(a).0, t.dim(b).0);
                let sa = t.square(a);
                let ra = t.sum_cols(sa);
                let sb = t.square(b);
                let rb = t.sum_cols(sb);
                let ones_b = t.leaf(Array2::ones((1, nb)));
                let ones_a = t.leaf(Array2::ones((na, 1)));
                let left = t.matmul(ra, ones_b);
                let rbt = t.transpose(rb);
                let right = t.matmul(ones_a, rbt);
                let bt = t.transpose(b);
                let cross = t.matmul(a, bt);
                let cross2 = t.scale(cross, -2.0);
                let s1 = t.add(left, right);
                let d = t.add(s1, cross2);
                let k = t.scale(d, -0.5);
                let e = t.exp(k);
                t.mean_all(e)
            },
            1e-6,
        );
    }

    #[test]
    fn im2col_same_forward_values() {
        let x = Array2::from_shape_vec((3, 2), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(x);
        let col = tape.im2col_same(id, 3);
        assert_eq!(tape.dim(col), (3, 6));
        // Row 0: previous frame clamps to row 0.
        let v = tape.value(col);
        assert_eq!(v.row(0).to_vec(), vec![1., 2., 1., 2., 3., 4.]);
        assert_eq!(v.row(1).to_vec(), vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(v.row(2).to_vec(), vec![3., 4., 5., 6., 5., 6.]);
    }

    #[test]
    fn im2col_grads() {
        let mut rng = rng_from_seed(9);
        let x = random((6, 2), &mut rng);
        let w = random((6, 3), &mut rng);
        check_grads(
            &[x, w],
            |t, ids| {
                let col = t.im2col_same(ids[0], 3);
                let h = t.matmul(col, ids[1]);
                let y = t.tanh(h);
                let sq = t.square(y);
                t.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn im2col_length_one_input() {
        let x = Array2::from_shape_vec((1, 2), vec![7., 8.]).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(x);
        let col = tape.im2col_same(id, 3);
        assert_eq!(tape.value(col).row(0).to_vec(), vec![7., 8., 7., 8., 7., 8.]);
    }

    #[test]
    fn sub_and_reuse_grads() {
        // A node consumed twice must accumulate both contributions.
        let mut rng = rng_from_seed(10);
        let x = random((2, 2), &mut rng);
        check_grads(
            &[x],
            |t, ids| {
                let sq = t.square(ids[0]);
                let d = t.sub(sq, ids[0]);
                let m = t.mul(d, ids[0]);
                t.sum_all(m)
            },
            1e-6,
        );
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn matmul_shape_mismatch_panics() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array2::zeros((2, 3)));
        let b = tape.leaf(Array2::zeros((2, 3)));
        tape.matmul(a, b);
    }
}
