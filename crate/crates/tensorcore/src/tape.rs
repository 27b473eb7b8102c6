use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Additive mask value standing in for -inf; finite so masked softmax rows
/// never produce NaN on finite inputs.
pub const MASK_NEG: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    /// C[i] = A[i] * B[i] (or A[i] * B[i]^T when `trans_b`), batched over axis 0.
    BatchMatmul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    AddConst { a: Var },
    Scale { a: Var, c: S },
    Mul { a: Var, b: Var },
    Relu { a: Var },
    SoftmaxLast { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<S>, rstd: Vec<S> },
    Embedding { table: Var, ids: Vec<u32> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    SelectIndex { a: Var, axis: usize, index: usize },
    SelectRows { a: Var, rows: Vec<u32> },
    Dropout { a: Var, mask: Vec<S> },
    SumAll { a: Var },
    MeanAll { a: Var },
    BceWithLogits { logits: Var, targets: Vec<S> },
    CrossEntropy { logits: Var, targets: Vec<i64>, probs: Vec<S> },
    WeightedSum { a: Var, weights: Vec<S> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: Op<S>,
}

/// Records operations in creation order. Creation order is topological —
/// every input of a node exists before the node — and `backward` visits
/// nodes in exact reverse creation order.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true }
    }

    /// Tape that records values only; `backward` on it is an error.
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`. Zero-filled for
    /// tensors the loss does not reach.
    pub fn grad(&self, v: Var) -> &[S] {
        self.nodes[v.0]
            .grad
            .as_ref()
            .map(|g| g.as_slice())
            .expect("grad requested before backward, or for a non-grad node")
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        let needs = requires_grad && self.grad_enabled;
        self.push(value, needs, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor<S>, needs_grad: bool, op: Op<S>) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced on tape");
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- ops ------------------------------------------------------------

    /// Standard matrix product, [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-d, got {sa:?}");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-d, got {sb:?}");
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        assert_eq!(k, k2, "matmul inner dimensions disagree: {sa:?} x {sb:?}");
        let mut out = Tensor::zeros(&[m, n]);
        unsafe {
            S::gemm(
                m,
                k,
                n,
                S::ONE,
                self.value(a).data().as_ptr(),
                k as isize,
                1,
                self.value(b).data().as_ptr(),
                n as isize,
                1,
                S::ZERO,
                out.data_mut().as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, Op::Matmul { a, b })
    }

    /// Batched matrix product over axis 0. With `trans_b`, computes
    /// A[i] * B[i]^T where B is [B, n, k].
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa.len(), 3, "batch_matmul lhs must be 3-d");
        assert_eq!(sb.len(), 3, "batch_matmul rhs must be 3-d");
        assert_eq!(sa[0], sb[0], "batch sizes disagree");
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, kb, "batch_matmul inner dimensions disagree");
        let mut out = Tensor::zeros(&[bs, m, n]);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let (rsb, csb) = if trans_b { (1isize, k as isize) } else { (n as isize, 1) };
            let chunks: Vec<(usize, &mut [S])> =
                out.data_mut().chunks_mut(m * n).enumerate().collect();
            chunks.into_par_iter().for_each(|(i, c)| unsafe {
                S::gemm(
                    m,
                    k,
                    n,
                    S::ONE,
                    ad.as_ptr().add(i * m * k),
                    k as isize,
                    1,
                    bd.as_ptr().add(i * k * n),
                    rsb,
                    csb,
                    S::ZERO,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            });
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, Op::BatchMatmul { a, b, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let out = Tensor::new(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, Op::Add { a, b })
    }

    /// Adds a [d] bias to every row of an [..., d] tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let d = *self.value(a).shape().last().expect("add_bias on 0-d tensor");
        assert_eq!(self.value(bias).shape(), &[d], "bias must be [last dim]");
        let bd = self.value(bias).data().to_vec();
        let out = Tensor::new(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bd[i % d])
                .collect(),
        );
        let needs = self.needs(a) || self.needs(bias);
        self.push(out, needs, Op::AddBias { a, bias })
    }

    /// Adds a constant tensor (e.g. an attention mask); no gradient flows
    /// into the constant.
    pub fn add_const(&mut self, a: Var, c: &Tensor<S>) -> Var {
        assert_eq!(self.value(a).shape(), c.shape(), "add_const shape mismatch");
        let out = Tensor::new(
            c.shape(),
            self.value(a).data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect(),
        );
        let needs = self.needs(a);
        self.push(out, needs, Op::AddConst { a })
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        let needs = self.needs(a);
        self.push(out, needs, Op::Scale { a, c })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let out = Tensor::new(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, Op::Mul { a, b })
    }

    /// Clamps negatives to zero; subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.maximum(S::ZERO));
        let needs = self.needs(a);
        self.push(out, needs, Op::Relu { a })
    }

    /// Softmax over the last axis, with max subtraction so the result is
    /// invariant to adding a constant.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let d = *shape.last().expect("softmax on 0-d tensor");
        assert!(d > 0, "softmax over empty axis");
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(d) {
            let mut m = row[0];
            for &x in row.iter() {
                m = m.maximum(x);
            }
            let mut sum = S::ZERO;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        let out = Tensor::new(&shape, data);
        let needs = self.needs(a);
        self.push(out, needs, Op::SoftmaxLast { a })
    }

    /// Per-row normalization over the last axis followed by the affine map
    /// `gain * x_hat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().expect("layer_norm on 0-d tensor");
        assert!(d > 0, "layer_norm over empty axis");
        assert_eq!(self.value(gain).shape(), &[d]);
        assert_eq!(self.value(bias).shape(), &[d]);
        let rows = self.value(x).numel() / d;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut data = vec![S::ZERO; rows * d];
        {
            let xd = self.value(x).data();
            let gd = self.value(gain).data();
            let bd = self.value(bias).data();
            let inv_d = S::from_f64(1.0 / d as f64);
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mut mu = S::ZERO;
                for &v in row {
                    mu += v;
                }
                mu = mu * inv_d;
                let mut var = S::ZERO;
                for &v in row {
                    var += (v - mu) * (v - mu);
                }
                var = var * inv_d;
                let rs = S::ONE / (var + S::from_f64(eps)).sqrt();
                mean.push(mu);
                rstd.push(rs);
                for i in 0..d {
                    data[r * d + i] = (row[i] - mu) * rs * gd[i] + bd[i];
                }
            }
        }
        let out = Tensor::new(&shape, data);
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(out, needs, Op::LayerNorm { x, gain, bias, mean, rstd })
    }

    /// Gathers rows of a [V, d] table; gradients scatter-add back into the
    /// table, so repeated ids accumulate.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Var {
        let ts = self.value(table).shape();
        assert_eq!(ts.len(), 2, "embedding table must be [V, d]");
        let (v, d) = (ts[0], ts[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!((id as usize) < v, "token id {id} out of range ({v})");
            data.extend_from_slice(&self.value(table).data()[id as usize * d..(id as usize + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data);
        let needs = self.needs(table);
        self.push(out, needs, Op::Embedding { table, ids: ids.to_vec() })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).reshaped(shape);
        let needs = self.needs(a);
        self.push(out, needs, Op::Reshape { a })
    }

    /// Permutes axes; backward applies the inverse permutation.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let out = permute_tensor(self.value(a), perm);
        let needs = self.needs(a);
        self.push(out, needs, Op::Permute { a, perm: perm.to_vec() })
    }

    /// Slices one index along `axis` and squeezes that axis.
    pub fn select_index(&mut self, a: Var, axis: usize, index: usize) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert!(axis < shape.len());
        assert!(index < shape[axis], "select_index out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        let src = self.value(a).data();
        for o in 0..outer {
            let base = o * shape[axis] * inner + index * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, data);
        let needs = self.needs(a);
        self.push(out, needs, Op::SelectIndex { a, axis, index })
    }

    /// Gathers rows along axis 0. Rows not selected receive no gradient at
    /// all — their accumulator stays exactly zero.
    pub fn select_rows(&mut self, a: Var, rows: &[u32]) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert!(!shape.is_empty());
        let inner: usize = shape[1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            let r = r as usize;
            assert!(r < shape[0], "select_rows index out of range");
            data.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = rows.len();
        let out = Tensor::new(&out_shape, data);
        let needs = self.needs(a);
        self.push(out, needs, Op::SelectRows { a, rows: rows.to_vec() })
    }

    /// Inverted-scaling dropout: kept entries are scaled by 1/keep so the
    /// expectation is unchanged. Only used in training mode.
    pub fn dropout(&mut self, a: Var, drop_prob: f64, rng: &mut SplitMix64) -> Var {
        assert!((0.0..1.0).contains(&drop_prob), "drop_prob must be in [0,1)");
        if drop_prob == 0.0 {
            return a;
        }
        let keep = 1.0 - drop_prob;
        let inv = S::from_f64(1.0 / keep);
        let mask: Vec<S> = (0..self.value(a).numel())
            .map(|_| if rng.next_f64() < keep { inv } else { S::ZERO })
            .collect();
        let out = Tensor::new(
            self.value(a).shape(),
            self.value(a).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        );
        let needs = self.needs(a);
        self.push(out, needs, Op::Dropout { a, mask })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = S::ZERO;
        for &x in self.value(a).data() {
            s += x;
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), needs, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        assert!(n > 0, "mean of empty tensor");
        let mut s = S::ZERO;
        for &x in self.value(a).data() {
            s += x;
        }
        let out = Tensor::scalar(s / S::from_f64(n as f64));
        let needs = self.needs(a);
        self.push(out, needs, Op::MeanAll { a })
    }

    /// Element-wise binary cross-entropy from logits, in the numerically
    /// stable form max(x,0) - x*t + ln(1 + exp(-|x|)).
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[S]) -> Var {
        assert_eq!(self.value(logits).numel(), targets.len(), "bce target length mismatch");
        debug_assert!(targets.iter().all(|t| t.to_f64() == 0.0 || t.to_f64() == 1.0));
        let out = Tensor::new(
            self.value(logits).shape(),
            self.value(logits)
                .data()
                .iter()
                .zip(targets)
                .map(|(&x, &t)| {
                    x.maximum(S::ZERO) - x * t + (S::ONE + (-x.abs()).exp()).ln()
                })
                .collect(),
        );
        let needs = self.needs(logits);
        self.push(out, needs, Op::BceWithLogits { logits, targets: targets.to_vec() })
    }

    /// Per-row cross-entropy of [n, V] logits against target ids; rows with
    /// target -1 are ignored (zero loss, zero gradient).
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[i64]) -> Var {
        let shape = self.value(logits).shape().to_vec();
        assert_eq!(shape.len(), 2, "cross_entropy expects [n, V]");
        let (n, v) = (shape[0], shape[1]);
        assert_eq!(targets.len(), n);
        let mut probs = vec![S::ZERO; n * v];
        let mut losses = vec![S::ZERO; n];
        let xd = self.value(logits).data();
        for r in 0..n {
            let row = &xd[r * v..(r + 1) * v];
            let mut m = row[0];
            for &x in row {
                m = m.maximum(x);
            }
            let mut sum = S::ZERO;
            for (i, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                probs[r * v + i] = e;
                sum += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / sum;
            }
            let t = targets[r];
            if t >= 0 {
                assert!((t as usize) < v, "cross_entropy target out of range");
                losses[r] = sum.ln() + m - row[t as usize];
            }
        }
        let out = Tensor::new(&[n], losses);
        let needs = self.needs(logits);
        self.push(out, needs, Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Weighted sum reduction to a scalar. Entries with weight exactly zero
    /// are skipped in the backward pass, so they receive a bitwise-zero
    /// gradient.
    pub fn weighted_sum(&mut self, a: Var, weights: &[S]) -> Var {
        assert_eq!(self.value(a).numel(), weights.len(), "weighted_sum length mismatch");
        let mut s = S::ZERO;
        for (&x, &w) in self.value(a).data().iter().zip(weights) {
            if w.to_f64() != 0.0 {
                s += x * w;
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), needs, Op::WeightedSum { a, weights: weights.to_vec() })
    }

    // ---- backward --------------------------------------------------------

    /// Populates gradients of every grad-requiring tensor reachable from
    /// `loss`; unreachable ones hold exact zeros.
    pub fn backward(&mut self, loss: Var) {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "loss must be scalar");
        for node in &mut self.nodes {
            if node.needs_grad {
                node.grad = Some(vec![S::ZERO; node.value.numel()]);
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return; // loss does not depend on any grad-requiring leaf
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = S::ONE;

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match self.nodes[idx].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.step_backward(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
    }

    fn add_grad(&mut self, v: Var, delta: impl FnOnce(&mut [S])) {
        if self.nodes[v.0].needs_grad {
            delta(self.nodes[v.0].grad.as_mut().unwrap());
        }
    }

    fn step_backward(&mut self, idx: usize, g: &[S]) {
        // Pull the op apart first so we can borrow values of other nodes.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(a) {
                    let bd = self.value(b).data().as_ptr();
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    // dA = G * B^T
                    unsafe {
                        S::gemm(
                            m, n, k,
                            S::ONE,
                            g.as_ptr(), n as isize, 1,
                            bd, 1, n as isize,
                            S::ONE,
                            ga.as_mut_ptr(), k as isize, 1,
                        );
                    }
                }
                if self.needs(b) {
                    let ad = self.value(a).data().as_ptr();
                    let gb = self.nodes[b.0].grad.as_mut().unwrap();
                    // dB = A^T * G
                    unsafe {
                        S::gemm(
                            k, m, n,
                            S::ONE,
                            ad, 1, k as isize,
                            g.as_ptr(), n as isize, 1,
                            S::ONE,
                            gb.as_mut_ptr(), n as isize, 1,
                        );
                    }
                }
            }
            Op::BatchMatmul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (m, k) = (sa[1], sa[2]);
                let n = if trans_b { sb[1] } else { sb[2] };
                if self.needs(a) {
                    let bd = self.value(b).data().as_ptr() as usize;
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    let chunks: Vec<(usize, &mut [S])> =
                        ga.chunks_mut(m * k).enumerate().collect();
                    chunks.into_par_iter().for_each(|(i, c)| unsafe {
                        let bd = bd as *const S;
                        if trans_b {
                            // C = A B^T  =>  dA = G * B, with B [n, k]
                            S::gemm(
                                m, n, k,
                                S::ONE,
                                g.as_ptr().add(i * m * n), n as isize, 1,
                                bd.add(i * n * k), k as isize, 1,
                                S::ONE,
                                c.as_mut_ptr(), k as isize, 1,
                            );
                        } else {
                            // dA = G * B^T, with B [k, n]
                            S::gemm(
                                m, n, k,
                                S::ONE,
                                g.as_ptr().add(i * m * n), n as isize, 1,
                                bd.add(i * k * n), 1, n as isize,
                                S::ONE,
                                c.as_mut_ptr(), k as isize, 1,
                            );
                        }
                    });
                }
                if self.needs(b) {
                    let ad = self.value(a).data().as_ptr() as usize;
                    let gb = self.nodes[b.0].grad.as_mut().unwrap();
                    let chunk = if trans_b { n * k } else { k * n };
                    let chunks: Vec<(usize, &mut [S])> =
                        gb.chunks_mut(chunk).enumerate().collect();
                    chunks.into_par_iter().for_each(|(i, c)| unsafe {
                        let ad = ad as *const S;
                        if trans_b {
                            // dB = G^T * A, shape [n, k]
                            S::gemm(
                                n, m, k,
                                S::ONE,
                                g.as_ptr().add(i * m * n), 1, n as isize,
                                ad.add(i * m * k), k as isize, 1,
                                S::ONE,
                                c.as_mut_ptr(), k as isize, 1,
                            );
                        } else {
                            // dB = A^T * G, shape [k, n]
                            S::gemm(
                                k, m, n,
                                S::ONE,
                                ad.add(i * m * k), 1, k as isize,
                                g.as_ptr().add(i * m * n), n as isize, 1,
                                S::ONE,
                                c.as_mut_ptr(), n as isize, 1,
                            );
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, |ga| {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x += d;
                    }
                });
                self.add_grad(b, |gb| {
                    for (x, &d) in gb.iter_mut().zip(g) {
                        *x += d;
                    }
                });
            }
            Op::AddBias { a, bias } => {
                let (a, bias) = (*a, *bias);
                let d = self.value(bias).numel();
                self.add_grad(a, |ga| {
                    for (x, &dg) in ga.iter_mut().zip(g) {
                        *x += dg;
                    }
                });
                self.add_grad(bias, |gb| {
                    for (i, &dg) in g.iter().enumerate() {
                        gb[i % d] += dg;
                    }
                });
            }
            Op::AddConst { a } => {
                let a = *a;
                self.add_grad(a, |ga| {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x += d;
                    }
                });
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                if c.to_f64() != 0.0 {
                    self.add_grad(a, |ga| {
                        for (x, &d) in ga.iter_mut().zip(g) {
                            *x += d * c;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bd: Vec<S> = self.value(b).data().to_vec();
                    self.add_grad(a, |ga| {
                        for ((x, &d), &bv) in ga.iter_mut().zip(g).zip(&bd) {
                            *x += d * bv;
                        }
                    });
                }
                if self.needs(b) {
                    let ad: Vec<S> = self.value(a).data().to_vec();
                    self.add_grad(b, |gb| {
                        for ((x, &d), &av) in gb.iter_mut().zip(g).zip(&ad) {
                            *x += d * av;
                        }
                    });
                }
            }
            Op::Relu { a } => {
                let a = *a;
                let mask: Vec<bool> =
                    self.value(a).data().iter().map(|&x| x.to_f64() > 0.0).collect();
                self.add_grad(a, |ga| {
                    for ((x, &d), &keep) in ga.iter_mut().zip(g).zip(&mask) {
                        if keep {
                            *x += d;
                        }
                    }
                });
            }
            Op::SoftmaxLast { a } => {
                let a = *a;
                let y = self.nodes[idx].value.data().to_vec();
                let d = *self.nodes[idx].value.shape().last().unwrap();
                self.add_grad(a, |ga| {
                    for r in 0..y.len() / d {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut dot = S::ZERO;
                        for i in 0..d {
                            dot += yr[i] * gr[i];
                        }
                        let gar = &mut ga[r * d..(r + 1) * d];
                        for i in 0..d {
                            gar[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let mean = mean.clone();
                let rstd = rstd.clone();
                let d = self.value(gain).numel();
                let xd: Vec<S> = self.value(x).data().to_vec();
                let gd: Vec<S> = self.value(gain).data().to_vec();
                let rows = xd.len() / d;
                self.add_grad(bias, |gb| {
                    for r in 0..rows {
                        for i in 0..d {
                            gb[i] += g[r * d + i];
                        }
                    }
                });
                self.add_grad(gain, |gg| {
                    for r in 0..rows {
                        for i in 0..d {
                            let xhat = (xd[r * d + i] - mean[r]) * rstd[r];
                            gg[i] += g[r * d + i] * xhat;
                        }
                    }
                });
                if self.needs(x) {
                    let inv_d = S::from_f64(1.0 / d as f64);
                    self.add_grad(x, |gx| {
                        for r in 0..rows {
                            let mut sum_gg = S::ZERO;
                            let mut sum_gg_xhat = S::ZERO;
                            for i in 0..d {
                                let xhat = (xd[r * d + i] - mean[r]) * rstd[r];
                                let ggi = g[r * d + i] * gd[i];
                                sum_gg += ggi;
                                sum_gg_xhat += ggi * xhat;
                            }
                            let m1 = sum_gg * inv_d;
                            let m2 = sum_gg_xhat * inv_d;
                            for i in 0..d {
                                let xhat = (xd[r * d + i] - mean[r]) * rstd[r];
                                let ggi = g[r * d + i] * gd[i];
                                gx[r * d + i] += rstd[r] * (ggi - m1 - xhat * m2);
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.value(table).shape()[1];
                self.add_grad(table, |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        let src = &g[row * d..(row + 1) * d];
                        for i in 0..d {
                            dst[i] += src[i];
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                let a = *a;
                self.add_grad(a, |ga| {
                    for (x, &dg) in ga.iter_mut().zip(g) {
                        *x += dg;
                    }
                });
            }
            Op::Permute { a, perm } => {
                let (a, perm) = (*a, perm.clone());
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                // Permuting the gradient by the inverse permutation maps it
                // back onto the input layout.
                let g_tensor = Tensor::new(&out_shape, g.to_vec());
                let g_back = permute_tensor(&g_tensor, &inv);
                self.add_grad(a, |ga| {
                    for (x, &dg) in ga.iter_mut().zip(g_back.data()) {
                        *x += dg;
                    }
                });
            }
            Op::SelectIndex { a, axis, index } => {
                let (a, axis, index) = (*a, *axis, *index);
                let shape = self.value(a).shape().to_vec();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                self.add_grad(a, |ga| {
                    for o in 0..outer {
                        let base = o * shape[axis] * inner + index * inner;
                        for i in 0..inner {
                            ga[base + i] += g[o * inner + i];
                        }
                    }
                });
            }
            Op::SelectRows { a, rows } => {
                let (a, rows) = (*a, rows.clone());
                let inner = self.value(a).numel() / self.value(a).shape()[0];
                self.add_grad(a, |ga| {
                    for (out_row, &r) in rows.iter().enumerate() {
                        let dst = &mut ga[r as usize * inner..(r as usize + 1) * inner];
                        let src = &g[out_row * inner..(out_row + 1) * inner];
                        for i in 0..inner {
                            dst[i] += src[i];
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                let (a, mask) = (*a, mask.clone());
                self.add_grad(a, |ga| {
                    for ((x, &dg), &m) in ga.iter_mut().zip(g).zip(&mask) {
                        if m.to_f64() != 0.0 {
                            *x += dg * m;
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let a = *a;
                let dg = g[0];
                self.add_grad(a, |ga| {
                    for x in ga.iter_mut() {
                        *x += dg;
                    }
                });
            }
            Op::MeanAll { a } => {
                let a = *a;
                let n = self.value(a).numel();
                let dg = g[0] * S::from_f64(1.0 / n as f64);
                self.add_grad(a, |ga| {
                    for x in ga.iter_mut() {
                        *x += dg;
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let (logits, targets) = (*logits, targets.clone());
                let xd: Vec<S> = self.value(logits).data().to_vec();
                self.add_grad(logits, |gl| {
                    for i in 0..xd.len() {
                        // d/dx [stable BCE] = sigmoid(x) - t
                        let sig = S::ONE / (S::ONE + (-xd[i]).exp());
                        gl[i] += g[i] * (sig - targets[i]);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (logits, targets, probs) = (*logits, targets.clone(), probs.clone());
                let v = self.value(logits).shape()[1];
                self.add_grad(logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t < 0 {
                            continue;
                        }
                        let dg = g[r];
                        if dg.to_f64() == 0.0 {
                            continue;
                        }
                        for i in 0..v {
                            let indicator = if i as i64 == t { S::ONE } else { S::ZERO };
                            gl[r * v + i] += dg * (probs[r * v + i] - indicator);
                        }
                    }
                });
            }
            Op::WeightedSum { a, weights } => {
                let (a, weights) = (*a, weights.clone());
                let dg = g[0];
                self.add_grad(a, |ga| {
                    for (x, &w) in ga.iter_mut().zip(&weights) {
                        if w.to_f64() != 0.0 {
                            *x += dg * w;
                        }
                    }
                });
            }
        }
    }
}

fn permute_tensor<S: Scalar>(t: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len(), "permutation rank mismatch");
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides_for_out: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    let src = t.data();
    let mut idx = vec![0usize; nd];
    for _ in 0..n {
        let mut off = 0;
        for i in 0..nd {
            off += idx[i] * strides_for_out[i];
        }
        data.push(src[off]);
        for i in (0..nd).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    Tensor::new(&out_shape, data)
}
