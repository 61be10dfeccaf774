//! Reverse-mode autodiff over coarse primitives.
//!
//! The tape records exactly the operations the transformer and its losses
//! need: matmul, bias add, residual add, GELU, layer norm, embedding gather,
//! causal attention, row softmax, and the two masked scalar losses. Values
//! are computed eagerly on record, so node order is already topological and
//! the backward pass is a single reverse sweep.
//!
//! Shape agreement between operands is a programming error and panics;
//! recoverable errors (asking for the gradient of an untracked node,
//! differentiating a non-scalar) come back as `NumError`.

use super::kernels;
use super::{DenseArray, NumError};

/// Handle to a node on one tape. Valid only for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf {
        tracked: bool,
    },
    /// [m x k] @ [k x n]
    MatMul { a: NodeId, b: NodeId },
    /// [m x n] + [n] broadcast over rows
    BiasAdd { a: NodeId, bias: NodeId },
    /// elementwise, same shape
    Add { a: NodeId, b: NodeId },
    /// a + c * b, elementwise
    AddScaled { a: NodeId, b: NodeId, c: f64 },
    Scale { a: NodeId, c: f64 },
    Gelu { a: NodeId },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId, saved: Vec<(f64, f64)> },
    /// out row i = table row ids[i]
    Gather { table: NodeId, ids: Vec<usize> },
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, heads: usize, weights: Vec<f64> },
    SoftmaxRows { a: NodeId },
    /// mean over unmasked rows of (logsumexp(row) - row[target])
    MaskedCrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<bool> },
    /// mean over unmasked rows of KL(teacher_row || softmax(logits row));
    /// the teacher rows are plain data, never differentiated through
    MaskedKlFromRows { teacher: DenseArray, logits: NodeId, mask: Vec<bool> },
}

struct Node {
    op: Op,
    value: DenseArray,
}

/// Gradient arrays produced by [`Tape::backward`], one per tracked leaf.
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
    tracked: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss with respect to a tracked leaf. Leaves the loss
    /// never touched get a zero array of the right shape.
    pub fn get(&self, id: NodeId) -> Result<&DenseArray, NumError> {
        if !self.tracked.get(id.0).copied().unwrap_or(false) {
            return Err(NumError::InvalidArgument(format!(
                "node {} is not a tracked input",
                id.0
            )));
        }
        Ok(self.grads[id.0].as_ref().expect("tracked leaves are materialized"))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: DenseArray) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    /// Tracked leaf: gradients are produced for it by `backward`.
    pub fn param(&mut self, value: &DenseArray) -> NodeId {
        self.push(Op::Leaf { tracked: true }, value.clone())
    }

    /// Untracked leaf: participates in the forward value only.
    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        self.push(Op::Leaf { tracked: false }, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = mat_dims(self.value(a));
        let (k2, n) = mat_dims(self.value(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = DenseArray::zeros(vec![m, n]);
        kernels::matmul_into(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        self.push(Op::MatMul { a, b }, out)
    }

    pub fn bias_add(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = mat_dims(self.value(a));
        assert_eq!(self.value(bias).len(), n, "bias length");
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push(Op::BiasAdd { a, bias }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut out = self.value(a).clone();
        let bd = self.value(b).data().to_vec();
        for (o, &bv) in out.data_mut().iter_mut().zip(&bd) {
            *o += bv;
        }
        self.push(Op::Add { a, b }, out)
    }

    /// a + c * b.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add_scaled shapes");
        let mut out = self.value(a).clone();
        let bd = self.value(b).data().to_vec();
        for (o, &bv) in out.data_mut().iter_mut().zip(&bd) {
            *o += c * bv;
        }
        self.push(Op::AddScaled { a, b, c }, out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= c;
        }
        self.push(Op::Scale { a, c }, out)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = kernels::gelu(*o);
        }
        self.push(Op::Gelu { a }, out)
    }

    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = mat_dims(self.value(a));
        assert_eq!(self.value(gain).len(), n, "layer norm gain length");
        assert_eq!(self.value(bias).len(), n, "layer norm bias length");
        let mut out = DenseArray::zeros(vec![m, n]);
        let saved = kernels::layer_norm_rows(
            self.value(a).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            out.data_mut(),
            m,
            n,
        );
        self.push(Op::LayerNorm { a, gain, bias, saved }, out)
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (rows, cols) = mat_dims(self.value(table));
        assert!(ids.iter().all(|&i| i < rows), "gather index out of range");
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(self.value(table).row(i));
        }
        let out = DenseArray::new(vec![ids.len(), cols], data).expect("gather shape");
        self.push(Op::Gather { table, ids: ids.to_vec() }, out)
    }

    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let (t, d) = mat_dims(self.value(q));
        assert_eq!(self.value(k).shape(), self.value(q).shape(), "attention k shape");
        assert_eq!(self.value(v).shape(), self.value(q).shape(), "attention v shape");
        assert_eq!(d % heads, 0, "d_model must divide into heads");
        let mut out = DenseArray::zeros(vec![t, d]);
        let weights = kernels::causal_attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            out.data_mut(),
            t,
            d,
            heads,
        );
        self.push(Op::CausalAttention { q, k, v, heads, weights }, out)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = mat_dims(self.value(a));
        let mut out = self.value(a).clone();
        for i in 0..m {
            kernels::softmax_in_place(&mut out.data_mut()[i * n..(i + 1) * n]);
        }
        self.push(Op::SoftmaxRows { a }, out)
    }

    /// Mean negative log-likelihood over the unmasked rows.
    /// `mask[i] == true` means row i participates.
    pub fn masked_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> NodeId {
        let (m, n) = mat_dims(self.value(logits));
        assert_eq!(targets.len(), m, "one target per row");
        assert_eq!(mask.len(), m, "one mask bit per row");
        let count = mask.iter().filter(|&&b| b).count();
        assert!(count > 0, "mask excludes every row");
        let mut total = 0.0;
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            assert!(targets[i] < n, "target out of vocabulary");
            let row = self.value(logits).row(i);
            total += kernels::logsumexp(row) - row[targets[i]];
        }
        let value = DenseArray::scalar(total / count as f64);
        self.push(
            Op::MaskedCrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec() },
            value,
        )
    }

    /// Mean forward KL from fixed teacher probability rows to the softmax of
    /// the logits rows, over the unmasked rows. Computed in log space, so no
    /// probability floor is needed on the student side.
    pub fn masked_kl_from_rows(
        &mut self,
        teacher: DenseArray,
        logits: NodeId,
        mask: &[bool],
    ) -> NodeId {
        let (m, n) = mat_dims(self.value(logits));
        assert_eq!(teacher.shape(), self.value(logits).shape(), "teacher shape");
        assert_eq!(mask.len(), m, "one mask bit per row");
        let count = mask.iter().filter(|&&b| b).count();
        assert!(count > 0, "mask excludes every row");
        let mut total = 0.0;
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            let p = teacher.row(i);
            let z = self.value(logits).row(i);
            let lse = kernels::logsumexp(z);
            let mut row_kl = 0.0;
            for j in 0..n {
                if p[j] > 0.0 {
                    row_kl += p[j] * (p[j].ln() - (z[j] - lse));
                }
            }
            total += row_kl;
        }
        let value = DenseArray::scalar(total / count as f64);
        self.push(Op::MaskedKlFromRows { teacher, logits, mask: mask.to_vec() }, value)
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per tracked
    /// leaf; untracked leaves and interior nodes are not exposed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumError> {
        if self.value(loss).len() != 1 {
            return Err(NumError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseArray::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut tracked = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { tracked: true } = node.op {
                tracked[i] = true;
                if grads[i].is_none() {
                    grads[i] = Some(DenseArray::zeros(node.value.shape().to_vec()));
                }
            }
        }
        Ok(Gradients { grads, tracked })
    }

    fn accumulate(&self, grads: &mut [Option<DenseArray>], id: NodeId, delta: &[f64]) {
        let slot = grads[id.0]
            .get_or_insert_with(|| DenseArray::zeros(self.value(id).shape().to_vec()));
        for (o, &d) in slot.data_mut().iter_mut().zip(delta) {
            *o += d;
        }
    }

    fn propagate(&self, idx: usize, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (m, k) = mat_dims(self.value(*a));
                let n = self.value(*b).cols();
                let mut da = vec![0.0; m * k];
                kernels::matmul_grad_a(g.data(), self.value(*b).data(), &mut da, m, k, n);
                self.accumulate(grads, *a, &da);
                let mut db = vec![0.0; k * n];
                kernels::matmul_grad_b(self.value(*a).data(), g.data(), &mut db, m, k, n);
                self.accumulate(grads, *b, &db);
            }
            Op::BiasAdd { a, bias } => {
                self.accumulate(grads, *a, g.data());
                let (m, n) = mat_dims(self.value(*a));
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g.data()[i * n + j];
                    }
                }
                self.accumulate(grads, *bias, &db);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.data());
                self.accumulate(grads, *b, g.data());
            }
            Op::AddScaled { a, b, c } => {
                self.accumulate(grads, *a, g.data());
                let scaled: Vec<f64> = g.data().iter().map(|&v| c * v).collect();
                self.accumulate(grads, *b, &scaled);
            }
            Op::Scale { a, c } => {
                let scaled: Vec<f64> = g.data().iter().map(|&v| c * v).collect();
                self.accumulate(grads, *a, &scaled);
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                let da: Vec<f64> =
                    g.data().iter().zip(x).map(|(&gv, &xv)| gv * kernels::gelu_grad(xv)).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::LayerNorm { a, gain, bias, saved } => {
                let (m, n) = mat_dims(self.value(*a));
                let mut da = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                kernels::layer_norm_backward(
                    g.data(),
                    self.value(*a).data(),
                    self.value(*gain).data(),
                    saved,
                    &mut da,
                    &mut dgain,
                    &mut dbias,
                    m,
                    n,
                );
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *gain, &dgain);
                self.accumulate(grads, *bias, &dbias);
            }
            Op::Gather { table, ids } => {
                let cols = self.value(*table).cols();
                let mut dt = vec![0.0; self.value(*table).len()];
                for (i, &id) in ids.iter().enumerate() {
                    let src = &g.data()[i * cols..(i + 1) * cols];
                    let dst = &mut dt[id * cols..(id + 1) * cols];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, &dt);
            }
            Op::CausalAttention { q, k, v, heads, weights } => {
                let (t, d) = mat_dims(self.value(*q));
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                kernels::causal_attention_backward(
                    g.data(),
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    weights,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                    t,
                    d,
                    *heads,
                );
                self.accumulate(grads, *q, &dq);
                self.accumulate(grads, *k, &dk);
                self.accumulate(grads, *v, &dv);
            }
            Op::SoftmaxRows { a } => {
                let (m, n) = mat_dims(self.value(*a));
                let w = self.value(NodeId(idx)).data();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let w_row = &w[i * n..(i + 1) * n];
                    let g_row = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = w_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        da[i * n + j] = w_row[j] * (g_row[j] - dot);
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::MaskedCrossEntropy { logits, targets, mask } => {
                let (m, n) = mat_dims(self.value(*logits));
                let count = mask.iter().filter(|&&b| b).count() as f64;
                let scale = g.item() / count;
                let mut dz = vec![0.0; m * n];
                for i in 0..m {
                    if !mask[i] {
                        continue;
                    }
                    let mut probs = self.value(*logits).row(i).to_vec();
                    kernels::softmax_in_place(&mut probs);
                    let row = &mut dz[i * n..(i + 1) * n];
                    for (j, &p) in probs.iter().enumerate() {
                        row[j] = p * scale;
                    }
                    row[targets[i]] -= scale;
                }
                self.accumulate(grads, *logits, &dz);
            }
            Op::MaskedKlFromRows { teacher, logits, mask } => {
                let (m, n) = mat_dims(self.value(*logits));
                let count = mask.iter().filter(|&&b| b).count() as f64;
                let scale = g.item() / count;
                let mut dz = vec![0.0; m * n];
                for i in 0..m {
                    if !mask[i] {
                        continue;
                    }
                    let mut probs = self.value(*logits).row(i).to_vec();
                    kernels::softmax_in_place(&mut probs);
                    let p = teacher.row(i);
                    let row = &mut dz[i * n..(i + 1) * n];
                    for j in 0..n {
                        row[j] = (probs[j] - p[j]) * scale;
                    }
                }
                self.accumulate(grads, *logits, &dz);
            }
        }
    }
}

fn mat_dims(a: &DenseArray) -> (usize, usize) {
    (a.rows(), a.cols())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_grad, grad_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn product_rule() {
        // loss = x * y at (2, 3) => dx = 3, dy = 2.
        let mut tape = Tape::new();
        let x = tape.param(&DenseArray::matrix(1, 1, vec![2.0]).unwrap());
        let y = tape.param(&DenseArray::matrix(1, 1, vec![3.0]).unwrap());
        let loss = tape.matmul(x, y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
        assert_eq!(grads.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn untracked_gradient_request_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&DenseArray::scalar(2.0));
        let c = tape.constant(DenseArray::scalar(3.0));
        let loss = tape.matmul(x, c);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_err());
        assert!(grads.get(loss).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(&DenseArray::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(NumError::InvalidArgument(_))));
    }

    #[test]
    fn untouched_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&DenseArray::scalar(2.0));
        let unused = tape.param(&DenseArray::vector(vec![1.0, 2.0, 3.0]));
        let loss = tape.matmul(x, x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    fn rand_array(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> DenseArray {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseArray::new(shape, data).unwrap()
    }

    /// softmax-times-onehot loss: gradient equals chain rule through the
    /// softmax, checked against central differences.
    #[test]
    fn softmax_onehot_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let z = rand_array(&mut rng, vec![1, 6]);
            let k = rng.gen_range(0..6);
            let mut onehot = vec![0.0; 6];
            onehot[k] = 1.0;
            let onehot = DenseArray::matrix(6, 1, onehot).unwrap();

            let mut tape = Tape::new();
            let zn = tape.param(&z);
            let sm = tape.softmax_rows(zn);
            let oh = tape.constant(onehot.clone());
            let loss = tape.matmul(sm, oh);
            let grads = tape.backward(loss).unwrap();
            let analytic = grads.get(zn).unwrap().clone();

            let fd = finite_diff_grad(
                |p| {
                    let mut probs = p[0].data().to_vec();
                    kernels::softmax_in_place(&mut probs);
                    probs[k]
                },
                &[z.clone()],
                1e-5,
            )
            .unwrap();
            for (a, b) in analytic.data().iter().zip(fd[0].data()) {
                assert!(grad_rel_err(*a, *b, 1e-3) < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn kl_to_softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = rand_array(&mut rng, vec![1, 5]);
        let p = {
            let mut v: Vec<f64> = (0..5).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            DenseArray::matrix(1, 5, v).unwrap()
        };
        let mut tape = Tape::new();
        let zn = tape.param(&z);
        let loss = tape.masked_kl_from_rows(p.clone(), zn, &[true]);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(zn).unwrap().clone();

        let fd = finite_diff_grad(
            |params| {
                let probs = crate::numkit::softmax_row(params[0].data()).unwrap();
                crate::numkit::kl_forward(p.data(), &probs).unwrap()
            },
            &[z],
            1e-5,
        )
        .unwrap();
        for (a, b) in analytic.data().iter().zip(fd[0].data()) {
            assert!(grad_rel_err(*a, *b, 1e-3) < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let a = rand_array(&mut rng, vec![3, 4]);
            let b = rand_array(&mut rng, vec![4, 2]);
            let mut tape = Tape::new();
            let an = tape.param(&a);
            let bn = tape.param(&b);
            let prod = tape.matmul(an, bn);
            let act = tape.gelu(prod);
            let loss = tape.masked_cross_entropy(act, &[0, 1, 0], &[true, true, true]);
            let grads = tape.backward(loss).unwrap();
            (grads.get(an).unwrap().clone(), grads.get(bn).unwrap().clone())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }

    /// Every primitive the training losses compose, in one graph, checked
    /// against the finite-difference oracle over repeated random draws.
    #[test]
    fn full_composition_gradcheck() {
        let t = 4;
        let d = 4;
        let vocab = 6;
        let heads = 2;
        let ids = [2_usize, 0, 3, 1];
        let targets = [1_usize, 4, 0, 2];
        let mask = [true, true, false, true];

        let loss_value = |p: &[DenseArray]| -> f64 {
            let mut tape = Tape::new();
            let table = tape.param(&p[0]);
            let gain = tape.param(&p[1]);
            let bias = tape.param(&p[2]);
            let wq = tape.param(&p[3]);
            let wk = tape.param(&p[4]);
            let wv = tape.param(&p[5]);
            let w_out = tape.param(&p[6]);
            let b_out = tape.param(&p[7]);
            let teacher = {
                let mut rows = Vec::with_capacity(t * vocab);
                for i in 0..t {
                    let mut row: Vec<f64> =
                        (0..vocab).map(|j| ((i * vocab + j) as f64 * 0.7).sin().abs() + 0.1).collect();
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                    rows.extend(row);
                }
                DenseArray::matrix(t, vocab, rows).unwrap()
            };

            let x = tape.gather(table, &ids);
            let normed = tape.layer_norm(x, gain, bias);
            let q = tape.matmul(normed, wq);
            let k = tape.matmul(normed, wk);
            let v = tape.matmul(normed, wv);
            let attn = tape.causal_attention(q, k, v, heads);
            let res = tape.add(x, attn);
            let act = tape.gelu(res);
            let proj = tape.matmul(act, w_out);
            let logits = tape.bias_add(proj, b_out);
            let ce = tape.masked_cross_entropy(logits, &targets, &mask);
            let kl = tape.masked_kl_from_rows(teacher, logits, &mask);
            let total = tape.add_scaled(ce, kl, 0.7);
            tape.value(total).item()
        };

        let loss_grads = |p: &[DenseArray]| -> Vec<DenseArray> {
            let mut tape = Tape::new();
            let nodes: Vec<NodeId> = p.iter().map(|a| tape.param(a)).collect();
            let teacher = {
                let mut rows = Vec::with_capacity(t * vocab);
                for i in 0..t {
                    let mut row: Vec<f64> =
                        (0..vocab).map(|j| ((i * vocab + j) as f64 * 0.7).sin().abs() + 0.1).collect();
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                    rows.extend(row);
                }
                DenseArray::matrix(t, vocab, rows).unwrap()
            };
            let x = tape.gather(nodes[0], &ids);
            let normed = tape.layer_norm(x, nodes[1], nodes[2]);
            let q = tape.matmul(normed, nodes[3]);
            let k = tape.matmul(normed, nodes[4]);
            let v = tape.matmul(normed, nodes[5]);
            let attn = tape.causal_attention(q, k, v, heads);
            let res = tape.add(x, attn);
            let act = tape.gelu(res);
            let proj = tape.matmul(act, nodes[6]);
            let logits = tape.bias_add(proj, nodes[7]);
            let ce = tape.masked_cross_entropy(logits, &targets, &mask);
            let kl = tape.masked_kl_from_rows(teacher, logits, &mask);
            let total = tape.add_scaled(ce, kl, 0.7);
            let grads = tape.backward(total).unwrap();
            nodes.iter().map(|&n| grads.get(n).unwrap().clone()).collect()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for draw in 0..20 {
            let params = vec![
                rand_array(&mut rng, vec![5, d]),
                rand_array(&mut rng, vec![1, d]),
                rand_array(&mut rng, vec![1, d]),
                rand_array(&mut rng, vec![d, d]),
                rand_array(&mut rng, vec![d, d]),
                rand_array(&mut rng, vec![d, d]),
                rand_array(&mut rng, vec![d, vocab]),
                rand_array(&mut rng, vec![1, vocab]),
            ];
            let analytic = loss_grads(&params);
            let oracle = finite_diff_grad(loss_value, &params, 1e-5).unwrap();
            for (pi, (a, o)) in analytic.iter().zip(&oracle).enumerate() {
                for (j, (&av, &ov)) in a.data().iter().zip(o.data()).enumerate() {
                    let err = grad_rel_err(av, ov, 1e-3);
                    assert!(err < 1e-5, "draw {draw} param {pi}[{j}]: {av} vs {ov} (err {err})");
                }
            }
        }
    }
}
