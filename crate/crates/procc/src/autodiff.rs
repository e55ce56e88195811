//! Reverse-mode autodiff over a flat tape of [`Tensor2`] nodes.
//!
//! The tape covers exactly the operations the network needs: affine layers,
//! relu, row softmax, same-padded 1-d convolution, a clamped log (for
//! multiplicative probability fusion done in log space), stop-gradient, and
//! masked mean cross-entropy. Nodes are appended during the forward pass;
//! `backward` sweeps the tape in reverse and accumulates gradients, which can
//! then be written into a [`ParamStore`].

use crate::params::ParamStore;
use crate::tensor::{
    conv1d_same_unchecked, matmul_unchecked, softmax_rows_unchecked, KernelError, Tensor2,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Matmul(Var, Var),
    /// Broadcast-add a 1xM bias to every row of an NxM input.
    AddBias(Var, Var),
    Add(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    /// `ln(max(x, floor))`; flat below the floor.
    LogClamp(Var, f64),
    /// Same-padded 1-d convolution applied to every row; kernel is 1xK.
    Conv1dRows(Var, Var),
    Detach(Var),
    SumAll(Var),
    CrossEntropyMean {
        probs: Var,
        labels: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Tensor2,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Constant)
    }

    /// Registers a leaf bound to a named store entry. Its gradient lands in
    /// the store after [`Tape::backward_into`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, KernelError> {
        let value = store.value(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(KernelError::ShapeMismatch {
                op: "matmul",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let out = matmul_unchecked(av, bv);
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, KernelError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(KernelError::ShapeMismatch {
                op: "add_bias",
                left: xv.shape(),
                right: bv.shape(),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(KernelError::ShapeMismatch {
                op: "add",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut out = av.clone();
        for (o, v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o += v;
        }
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(KernelError::ShapeMismatch {
                op: "mul_elem",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut out = av.clone();
        for (o, v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= v;
        }
        Ok(self.push(out, Op::MulElem(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| c * v);
        self.push(out, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, KernelError> {
        if !self.value(x).all_finite() {
            return Err(KernelError::NonFinite { op: "softmax" });
        }
        let out = softmax_rows_unchecked(self.value(x));
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    pub fn log_clamp(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, Op::LogClamp(x, floor))
    }

    pub fn conv1d_rows(&mut self, x: Var, kernel: Var) -> Result<Var, KernelError> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        if kv.rows() != 1 {
            return Err(KernelError::ShapeMismatch {
                op: "conv1d_rows",
                left: xv.shape(),
                right: kv.shape(),
            });
        }
        if kv.cols() % 2 == 0 {
            return Err(KernelError::EvenKernel { len: kv.cols() });
        }
        if kv.cols() > xv.cols() {
            return Err(KernelError::KernelTooLong {
                kernel: kv.cols(),
                input: xv.cols(),
            });
        }
        let mut out = Tensor2::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let conv = conv1d_same_unchecked(xv.row(r), kv.row(0));
            out.row_mut(r).copy_from_slice(&conv);
        }
        Ok(self.push(out, Op::Conv1dRows(x, kernel)))
    }

    /// Identity forward, zero backward: gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::Detach(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(
            Tensor2::from_vec_unchecked(1, 1, vec![s]),
            Op::SumAll(x),
        )
    }

    /// Masked mean cross-entropy against a row of class probabilities.
    /// Produces a 1x1 scalar node; an all-false mask yields 0.
    pub fn cross_entropy_mean(
        &mut self,
        probs: Var,
        labels: Vec<usize>,
        mask: Vec<bool>,
    ) -> Result<Var, KernelError> {
        let pv = self.value(probs);
        let loss = crate::tensor::cross_entropy(pv, &labels, &mask)?;
        Ok(self.push(
            Tensor2::from_vec_unchecked(1, 1, vec![loss]),
            Op::CrossEntropyMean { probs, labels, mask },
        ))
    }

    /// Reverse sweep from a scalar loss node; returns one gradient tensor per
    /// tape node.
    pub fn backward(&self, loss: Var) -> Result<Vec<Tensor2>, KernelError> {
        if self.nodes.is_empty() {
            return Err(KernelError::BackwardBeforeForward);
        }
        if loss.0 >= self.nodes.len() {
            return Err(KernelError::BackwardBeforeForward);
        }
        let lshape = self.nodes[loss.0].value.shape();
        if lshape != (1, 1) {
            return Err(KernelError::NonScalarLoss(lshape));
        }
        let mut grads: Vec<Tensor2> = self
            .nodes
            .iter()
            .map(|n| Tensor2::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[loss.0].set(0, 0, 1.0);

        for i in (0..=loss.0).rev() {
            // Split so parent gradients can be mutated while reading g.
            let (before, rest) = grads.split_at_mut(i);
            let g = &rest[0];
            match &self.nodes[i].op {
                Op::Constant | Op::Param(_) => {}
                Op::Detach(_) => {}
                Op::Matmul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = matmul_unchecked(g, &bv.transpose());
                    let db = matmul_unchecked(&av.transpose(), g);
                    accumulate(&mut before[a.0], &da);
                    accumulate(&mut before[b.0], &db);
                }
                Op::AddBias(x, bias) => {
                    accumulate(&mut before[x.0], g);
                    let bgrad = &mut before[bias.0];
                    for r in 0..g.rows() {
                        for (bg, gv) in bgrad.row_mut(0).iter_mut().zip(g.row(r)) {
                            *bg += gv;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut before[a.0], g);
                    accumulate(&mut before[b.0], g);
                }
                Op::MulElem(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da: Vec<f64> = g.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                    let db: Vec<f64> = g.data().iter().zip(av.data()).map(|(g, a)| g * a).collect();
                    accumulate(
                        &mut before[a.0],
                        &Tensor2::from_vec_unchecked(g.rows(), g.cols(), da),
                    );
                    accumulate(
                        &mut before[b.0],
                        &Tensor2::from_vec_unchecked(g.rows(), g.cols(), db),
                    );
                }
                Op::Scale(x, c) => {
                    let dx = g.map(|v| c * v);
                    accumulate(&mut before[x.0], &dx);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let xgrad = &mut before[x.0];
                    for (i, (&xv, &gv)) in xv.data().iter().zip(g.data()).enumerate() {
                        if xv > 0.0 {
                            xgrad.data_mut()[i] += gv;
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[i].value;
                    let xgrad = &mut before[x.0];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (xg, (&yv, &gv)) in
                            xgrad.row_mut(r).iter_mut().zip(yr.iter().zip(gr))
                        {
                            *xg += yv * (gv - dot);
                        }
                    }
                }
                Op::LogClamp(x, floor) => {
                    let xv = &self.nodes[x.0].value;
                    let xgrad = &mut before[x.0];
                    for (i, (&v, &gv)) in xv.data().iter().zip(g.data()).enumerate() {
                        if v >= *floor {
                            xgrad.data_mut()[i] += gv / v;
                        }
                    }
                }
                Op::Conv1dRows(x, kernel) => {
                    let xv = &self.nodes[x.0].value;
                    let kv = &self.nodes[kernel.0].value;
                    let k = kv.cols();
                    let half = (k / 2) as isize;
                    let n = xv.cols() as isize;
                    let (lo, hi) = if x.0 < kernel.0 {
                        let (a, b) = before.split_at_mut(kernel.0);
                        (&mut a[x.0], &mut b[0])
                    } else {
                        let (a, b) = before.split_at_mut(x.0);
                        (&mut b[0], &mut a[kernel.0])
                    };
                    let (xgrad, kgrad) = (lo, hi);
                    for r in 0..xv.rows() {
                        let gr = g.row(r);
                        let xr = xv.row(r);
                        // dL/dx[j] = sum_t g[j - t + half] * k[t]
                        for j in 0..n {
                            let mut acc = 0.0;
                            for (t, &kvv) in kv.row(0).iter().enumerate() {
                                let gi = j - t as isize + half;
                                if gi >= 0 && gi < n {
                                    acc += gr[gi as usize] * kvv;
                                }
                            }
                            xgrad.row_mut(r)[j as usize] += acc;
                        }
                        // dL/dk[t] = sum_i g[i] * x[i + t - half]
                        for t in 0..k {
                            let mut acc = 0.0;
                            for (i2, &gv) in gr.iter().enumerate() {
                                let xi = i2 as isize + t as isize - half;
                                if xi >= 0 && xi < n {
                                    acc += gv * xr[xi as usize];
                                }
                            }
                            kgrad.row_mut(0)[t] += acc;
                        }
                    }
                }
                Op::SumAll(x) => {
                    let gv = g.get(0, 0);
                    let xgrad = &mut before[x.0];
                    for v in xgrad.data_mut() {
                        *v += gv;
                    }
                }
                Op::CrossEntropyMean { probs, labels, mask } => {
                    let gv = g.get(0, 0);
                    let pv = &self.nodes[probs.0].value;
                    let count = mask.iter().filter(|&&m| m).count();
                    if count > 0 {
                        let pgrad = &mut before[probs.0];
                        let scale = gv / count as f64;
                        for r in 0..pv.rows() {
                            if !mask[r] {
                                continue;
                            }
                            let p = pv.get(r, labels[r]);
                            if p >= crate::tensor::PROB_CLAMP {
                                let cur = pgrad.get(r, labels[r]);
                                pgrad.set(r, labels[r], cur - scale / p);
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Runs [`Tape::backward`] and overwrites the store's gradients: each
    /// participating parameter receives its gradient, every other entry zero.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<(), KernelError> {
        let grads = self.backward(loss)?;
        store.zero_grads();
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let Op::Param(name) = &node.op {
                store.accumulate_grad(name, &grad)?;
            }
        }
        Ok(())
    }
}

fn accumulate(dst: &mut Tensor2, src: &Tensor2) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn store_with(name: &str, t: Tensor2) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut store = store_with("w", Tensor2::from_vec(2, 3, vec![1.0; 6]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let loss = tape.sum_all(w);
        tape.backward_into(loss, &mut store).unwrap();
        assert!(store.grad("w").unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn non_participating_param_gets_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2::filled(2, 2, 1.5)).unwrap();
        store.insert("unused", Tensor2::filled(3, 1, 2.0)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let loss = tape.sum_all(w);
        tape.backward_into(loss, &mut store).unwrap();
        assert!(store
            .grad("unused")
            .unwrap()
            .data()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn backward_before_forward_errors() {
        let tape = Tape::new();
        assert!(matches!(
            tape.backward(Var(0)),
            Err(KernelError::BackwardBeforeForward)
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor2::zeros(2, 2));
        assert!(matches!(
            tape.backward(v),
            Err(KernelError::NonScalarLoss((2, 2)))
        ));
    }

    #[test]
    fn detach_stops_gradient() {
        let mut store = store_with("w", Tensor2::filled(1, 4, 0.5));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let d = tape.detach(w);
        let loss = tape.sum_all(d);
        tape.backward_into(loss, &mut store).unwrap();
        assert!(store.grad("w").unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn conv_rows_matches_plain_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let k = tape.constant(Tensor2::from_vec(1, 3, vec![1.0, 1.0, 1.0]).unwrap());
        let y = tape.conv1d_rows(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);
    }
}
