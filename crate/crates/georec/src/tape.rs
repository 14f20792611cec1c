//! Reverse-mode automatic differentiation over flat `f64` vectors.
//!
//! The model forward pass appends nodes to a [`Tape`]; a single backward sweep
//! then yields exact gradients for every leaf. Node values are plain vectors,
//! which is a good fit for the per-node aggregation style of the graph model:
//! embeddings and hidden states are short (D or a small hidden width), and the
//! computation graph is rebuilt for every loss evaluation.
//!
//! Sampling decisions (which neighbors were drawn, which element won a max
//! pool) are part of the forward pass and differentiated as constants: the
//! backward sweep routes gradients through the realized draws only.

/// Index of a node on the tape.
pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    /// Extract row `row` (length `width`) of a matrix-shaped node.
    Row { src: NodeId, row: usize, width: usize },
    /// `w` is row-major `rows x cols`, `x` has length `cols`.
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Concat { a: NodeId, b: NodeId },
    Hadamard { a: NodeId, b: NodeId },
    Dot { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    Relu { x: NodeId },
    LeakyRelu { x: NodeId, slope: f64 },
    Softmax { x: NodeId },
    Softplus { x: NodeId },
    /// Elementwise maximum over equally sized inputs.
    MaxPool { xs: Vec<NodeId> },
    /// `w` has length K, each of the K inputs has the output length.
    WeightedSum { w: NodeId, xs: Vec<NodeId> },
    /// Fixed-coefficient linear combination of equally sized inputs.
    Lincomb { xs: Vec<NodeId>, coeffs: Vec<f64> },
    /// Stack scalar nodes into one vector.
    Stack { xs: Vec<NodeId> },
    SumElems { x: NodeId },
    /// Sum of absolute values; subgradient 0 at 0.
    AbsSum { x: NodeId },
}

/// Append-only computation record. IDs are topologically ordered by
/// construction, so one reverse sweep computes all gradients.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

/// Gradients keyed by node id, produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to node `id`, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads[id].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn val(&self, id: NodeId) -> &[f64] {
        &self.vals[id]
    }

    fn push(&mut self, val: Vec<f64>, op: Op) -> NodeId {
        self.vals.push(val);
        self.ops.push(op);
        self.ops.len() - 1
    }

    pub fn leaf(&mut self, val: Vec<f64>) -> NodeId {
        self.push(val, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(vec![v])
    }

    pub fn row(&mut self, src: NodeId, row: usize, width: usize) -> NodeId {
        let val = self.vals[src][row * width..(row + 1) * width].to_vec();
        self.push(val, Op::Row { src, row, width })
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        debug_assert_eq!(self.vals[w].len(), rows * cols);
        debug_assert_eq!(self.vals[x].len(), cols);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let wrow = &self.vals[w][r * cols..(r + 1) * cols];
            out[r] = wrow.iter().zip(&self.vals[x]).map(|(a, b)| a * b).sum();
        }
        self.push(out, Op::MatVec { w, x, rows, cols })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = zip_with(&self.vals[a], &self.vals[b], |x, y| x + y);
        self.push(val, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = zip_with(&self.vals[a], &self.vals[b], |x, y| x - y);
        self.push(val, Op::Sub { a, b })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut val = self.vals[a].clone();
        val.extend_from_slice(&self.vals[b]);
        self.push(val, Op::Concat { a, b })
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = zip_with(&self.vals[a], &self.vals[b], |x, y| x * y);
        self.push(val, Op::Hadamard { a, b })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a]
            .iter()
            .zip(&self.vals[b])
            .map(|(x, y)| x * y)
            .sum();
        self.push(vec![v], Op::Dot { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let val = self.vals[x].iter().map(|v| v * c).collect();
        self.push(val, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let val = self.vals[x].iter().map(|v| v + c).collect();
        self.push(val, Op::AddScalar { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let val = self.vals[x].iter().map(|v| v.max(0.0)).collect();
        self.push(val, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let val = self.vals[x]
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        self.push(val, Op::LeakyRelu { x, slope })
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xs = &self.vals[x];
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let val = exps.iter().map(|e| e / z).collect();
        self.push(val, Op::Softmax { x })
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let val = self.vals[x]
            .iter()
            .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        self.push(val, Op::Softplus { x })
    }

    pub fn max_pool(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let dim = self.vals[xs[0]].len();
        let mut val = self.vals[xs[0]].clone();
        for &x in &xs[1..] {
            debug_assert_eq!(self.vals[x].len(), dim);
            for (o, v) in val.iter_mut().zip(&self.vals[x]) {
                if *v > *o {
                    *o = *v;
                }
            }
        }
        self.push(val, Op::MaxPool { xs: xs.to_vec() })
    }

    pub fn weighted_sum(&mut self, w: NodeId, xs: &[NodeId]) -> NodeId {
        assert_eq!(self.vals[w].len(), xs.len());
        let dim = self.vals[xs[0]].len();
        let mut val = vec![0.0; dim];
        for (k, &x) in xs.iter().enumerate() {
            let wk = self.vals[w][k];
            for (o, v) in val.iter_mut().zip(&self.vals[x]) {
                *o += wk * v;
            }
        }
        self.push(val, Op::WeightedSum { w, xs: xs.to_vec() })
    }

    pub fn lincomb(&mut self, xs: &[NodeId], coeffs: &[f64]) -> NodeId {
        assert_eq!(xs.len(), coeffs.len());
        let dim = self.vals[xs[0]].len();
        let mut val = vec![0.0; dim];
        for (&x, &c) in xs.iter().zip(coeffs) {
            for (o, v) in val.iter_mut().zip(&self.vals[x]) {
                *o += c * v;
            }
        }
        self.push(
            val,
            Op::Lincomb {
                xs: xs.to_vec(),
                coeffs: coeffs.to_vec(),
            },
        )
    }

    pub fn mean(&mut self, xs: &[NodeId]) -> NodeId {
        let c = 1.0 / xs.len() as f64;
        let coeffs = vec![c; xs.len()];
        self.lincomb(xs, &coeffs)
    }

    pub fn stack(&mut self, xs: &[NodeId]) -> NodeId {
        let val = xs.iter().map(|&x| self.vals[x][0]).collect();
        self.push(val, Op::Stack { xs: xs.to_vec() })
    }

    pub fn sum_elems(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x].iter().sum();
        self.push(vec![v], Op::SumElems { x })
    }

    pub fn abs_sum(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x].iter().map(|v| v.abs()).sum();
        self.push(vec![v], Op::AbsSum { x })
    }

    /// Sum a list of scalar nodes into one scalar node.
    pub fn sum_scalars(&mut self, xs: &[NodeId]) -> NodeId {
        let stacked = self.stack(xs);
        self.sum_elems(stacked)
    }

    /// Backpropagate from scalar node `loss`, returning gradients for every
    /// node reached by the sweep.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.vals[loss].len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.ops.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            // Leaf gradients stay in the map for the caller to read.
            if matches!(self.ops[id], Op::Leaf) {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.ops[id] {
                Op::Leaf => {}
                Op::Row { src, row, width } => {
                    let dst = acc(&mut grads, *src, self.vals[*src].len());
                    for (d, gv) in dst[row * width..(row + 1) * width].iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::MatVec { w, x, rows, cols } => {
                    let xv = self.vals[*x].clone();
                    let wv = &self.vals[*w];
                    {
                        let dw = acc(&mut grads, *w, rows * cols);
                        for r in 0..*rows {
                            for c in 0..*cols {
                                dw[r * cols + c] += g[r] * xv[c];
                            }
                        }
                    }
                    let mut dx_add = vec![0.0; *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dx_add[c] += g[r] * wv[r * cols + c];
                        }
                    }
                    let dx = acc(&mut grads, *x, *cols);
                    for (d, v) in dx.iter_mut().zip(&dx_add) {
                        *d += v;
                    }
                }
                Op::Add { a, b } => {
                    add_grad(&mut grads, *a, &g);
                    add_grad(&mut grads, *b, &g);
                }
                Op::Sub { a, b } => {
                    add_grad(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_grad(&mut grads, *b, &neg);
                }
                Op::Concat { a, b } => {
                    let na = self.vals[*a].len();
                    add_grad(&mut grads, *a, &g[..na]);
                    add_grad(&mut grads, *b, &g[na..]);
                }
                Op::Hadamard { a, b } => {
                    let da: Vec<f64> = g.iter().zip(&self.vals[*b]).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> = g.iter().zip(&self.vals[*a]).map(|(g, v)| g * v).collect();
                    add_grad(&mut grads, *a, &da);
                    add_grad(&mut grads, *b, &db);
                }
                Op::Dot { a, b } => {
                    let da: Vec<f64> = self.vals[*b].iter().map(|v| g[0] * v).collect();
                    let db: Vec<f64> = self.vals[*a].iter().map(|v| g[0] * v).collect();
                    add_grad(&mut grads, *a, &da);
                    add_grad(&mut grads, *b, &db);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    add_grad(&mut grads, *x, &dx);
                }
                Op::AddScalar { x } => add_grad(&mut grads, *x, &g),
                Op::Relu { x } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.vals[*x])
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    add_grad(&mut grads, *x, &dx);
                }
                Op::LeakyRelu { x, slope } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.vals[*x])
                        .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                        .collect();
                    add_grad(&mut grads, *x, &dx);
                }
                Op::Softmax { x } => {
                    let y = &self.vals[id];
                    let gy: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                    let dx: Vec<f64> = g.iter().zip(y).map(|(g, y)| y * (g - gy)).collect();
                    add_grad(&mut grads, *x, &dx);
                }
                Op::Softplus { x } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.vals[*x])
                        .map(|(g, &v)| g / (1.0 + (-v).exp()))
                        .collect();
                    add_grad(&mut grads, *x, &dx);
                }
                Op::MaxPool { xs } => {
                    let dim = g.len();
                    for d in 0..dim {
                        let mut best = 0usize;
                        let mut best_v = self.vals[xs[0]][d];
                        for (k, &x) in xs.iter().enumerate().skip(1) {
                            if self.vals[x][d] > best_v {
                                best_v = self.vals[x][d];
                                best = k;
                            }
                        }
                        let dst = acc(&mut grads, xs[best], dim);
                        dst[d] += g[d];
                    }
                }
                Op::WeightedSum { w, xs } => {
                    let mut dw = vec![0.0; xs.len()];
                    for (k, &x) in xs.iter().enumerate() {
                        dw[k] = g.iter().zip(&self.vals[x]).map(|(g, v)| g * v).sum();
                        let wk = self.vals[*w][k];
                        let dx: Vec<f64> = g.iter().map(|v| wk * v).collect();
                        add_grad(&mut grads, x, &dx);
                    }
                    add_grad(&mut grads, *w, &dw);
                }
                Op::Lincomb { xs, coeffs } => {
                    for (&x, &c) in xs.iter().zip(coeffs) {
                        let dx: Vec<f64> = g.iter().map(|v| c * v).collect();
                        add_grad(&mut grads, x, &dx);
                    }
                }
                Op::Stack { xs } => {
                    for (k, &x) in xs.iter().enumerate() {
                        add_grad(&mut grads, x, &[g[k]]);
                    }
                }
                Op::SumElems { x } => {
                    let n = self.vals[*x].len();
                    let dx = vec![g[0]; n];
                    add_grad(&mut grads, *x, &dx);
                }
                Op::AbsSum { x } => {
                    let dx: Vec<f64> = self.vals[*x]
                        .iter()
                        .map(|&v| {
                            if v > 0.0 {
                                g[0]
                            } else if v < 0.0 {
                                -g[0]
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    add_grad(&mut grads, *x, &dx);
                }
            }
        }
        Grads { grads }
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_grad(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    let dst = acc(grads, id, g.len());
    for (d, v) in dst.iter_mut().zip(g) {
        *d += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences over the parameter vector of `f`, used as a
    /// reference for every tape op below.
    fn fd_grad(params: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        let mut g = vec![0.0; params.len()];
        let mut p = params.to_vec();
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let dn = f(&p);
            p[i] = orig;
            g[i] = (up - dn) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let denom = (x.abs() + y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom < tol,
                "coord {i}: {x} vs {y}"
            );
        }
    }

    /// A composite expression exercising most ops at once:
    /// softmax attention over two messages, max pool, MLP-ish matvec,
    /// hadamard, dot, softplus, abs regularizer.
    fn composite(params: &[f64]) -> f64 {
        let mut t = Tape::new();
        let w = t.leaf(params[0..6].to_vec()); // 2x3
        let x = t.leaf(params[6..9].to_vec());
        let y = t.leaf(params[9..12].to_vec());
        let g_attn = t.leaf(params[12..18].to_vec()); // 2*3

        let m1 = t.matvec(w, x, 2, 3);
        let m1 = t.relu(m1);
        let m2 = t.matvec(w, y, 2, 3);
        let cat1 = t.concat(x, y);
        let cat2 = t.concat(y, x);
        let l1 = t.dot(g_attn, cat1);
        let l1 = t.leaky_relu(l1, 0.2);
        let l2 = t.dot(g_attn, cat2);
        let l2 = t.leaky_relu(l2, 0.2);
        let logits = t.stack(&[l1, l2]);
        let alpha = t.softmax(logits);
        let agg = t.weighted_sum(alpha, &[m1, m2]);
        let pooled = t.max_pool(&[agg, m2]);
        let had = t.hadamard(pooled, m1);
        let s = t.sum_elems(had);
        let sp = t.softplus(s);
        let reg = t.abs_sum(w);
        let reg = t.scale(reg, 0.01);
        let lc = t.lincomb(&[sp, reg], &[1.0, 1.0]);
        let total = t.sum_elems(lc);
        t.val(total)[0]
    }

    #[test]
    fn composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let params: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fd = fd_grad(&params, &composite);

            let mut t = Tape::new();
            let w = t.leaf(params[0..6].to_vec());
            let x = t.leaf(params[6..9].to_vec());
            let y = t.leaf(params[9..12].to_vec());
            let g_attn = t.leaf(params[12..18].to_vec());
            let m1 = t.matvec(w, x, 2, 3);
            let m1 = t.relu(m1);
            let m2 = t.matvec(w, y, 2, 3);
            let cat1 = t.concat(x, y);
            let cat2 = t.concat(y, x);
            let l1 = t.dot(g_attn, cat1);
            let l1 = t.leaky_relu(l1, 0.2);
            let l2 = t.dot(g_attn, cat2);
            let l2 = t.leaky_relu(l2, 0.2);
            let logits = t.stack(&[l1, l2]);
            let alpha = t.softmax(logits);
            let agg = t.weighted_sum(alpha, &[m1, m2]);
            let pooled = t.max_pool(&[agg, m2]);
            let had = t.hadamard(pooled, m1);
            let s = t.sum_elems(had);
            let sp = t.softplus(s);
            let reg = t.abs_sum(w);
            let reg = t.scale(reg, 0.01);
            let lc = t.lincomb(&[sp, reg], &[1.0, 1.0]);
            let total = t.sum_elems(lc);

            let mut grads = t.backward(total);
            let mut analytic = Vec::new();
            // A leaf can drop out of the active path (e.g. when max_pool
            // picks the other branch everywhere); that is a zero gradient.
            for id in [w, x, y, g_attn] {
                let n = t.val(id).len();
                analytic.extend(grads.take(id).unwrap_or_else(|| vec![0.0; n]));
            }
            assert_close(&analytic, &fd, 1e-5);
        }
    }

    #[test]
    fn row_scatter_accumulates() {
        let mut t = Tape::new();
        let table = t.leaf(vec![1.0, 2.0, 3.0, 4.0]); // 2x2
        let r0 = t.row(table, 0, 2);
        let r1 = t.row(table, 1, 2);
        let r0b = t.row(table, 0, 2);
        let s1 = t.add(r0, r1);
        let s2 = t.add(s1, r0b);
        let loss = t.sum_elems(s2);
        let grads = t.backward(loss);
        assert_eq!(grads.get(table).unwrap(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..8);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let mut t = Tape::new();
            let x = t.leaf(logits);
            let y = t.softmax(x);
            let s: f64 = t.val(y).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(t.val(y).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn sub_and_dot_give_squared_error_gradient() {
        // L = (a - b)^2, dL/da = 2(a-b)
        let mut t = Tape::new();
        let a = t.scalar(3.0);
        let b = t.scalar(1.0);
        let d = t.sub(a, b);
        let loss = t.dot(d, d);
        let grads = t.backward(loss);
        assert_eq!(grads.get(a).unwrap(), &[4.0]);
        assert_eq!(grads.get(b).unwrap(), &[-4.0]);
    }
}
