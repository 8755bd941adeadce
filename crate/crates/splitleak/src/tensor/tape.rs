//! Define-by-run tape: forward ops append nodes, `backward` replays them in
//! exact reverse order and accumulates gradients additively (a tensor
//! consumed twice receives the sum of both contributions).

use super::kernels;
use super::{Elem, Tensor, TensorError};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        stride: usize,
    },
    Bilinear {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    Relu {
        x: Var,
    },
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    SumAll {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        softmax: Tensor<T>,
    },
    KlDivergence {
        p: Tensor<T>,
        q_logits: Var,
        softmax_q: Tensor<T>,
    },
    Mse {
        a: Var,
        b: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording tape for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let out = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, TensorError> {
        let out = kernels::conv_transpose2d(self.value(x), self.value(w), stride)?;
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(out, rg, Op::ConvTranspose2d { x, w, stride }))
    }

    pub fn interpolate_bilinear(
        &mut self,
        x: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var, TensorError> {
        let out = kernels::interpolate_bilinear(self.value(x), out_h, out_w)?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::Bilinear { x, out_h, out_w }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        let rg = self.needs(x);
        self.push(out, rg, Op::Relu { x })
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let out = kernels::affine(self.value(x), self.value(w), self.value(b))?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, rg, Op::Affine { x, w, b }))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (out, argmax) = kernels::maxpool2(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::MaxPool2 { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    /// [N,C,H,W] -> [N, C*H*W]
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.reshape(x, vec![n, c * h * w])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "add shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        for (o, v) in out.data_mut().iter_mut().zip(tb.data()) {
            *o += *v;
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = *v * c;
        }
        let rg = self.needs(x);
        self.push(out, rg, Op::Scale { x, c })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.needs(x);
        self.push(Tensor::scalar(acc), rg, Op::SumAll { x })
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, TensorError> {
        let (loss, softmax) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax,
            },
        ))
    }

    /// `p` is a fixed probability table; gradient flows to `q_logits` only.
    pub fn kl_divergence(&mut self, p: Tensor<T>, q_logits: Var) -> Result<Var, TensorError> {
        let (loss, softmax_q) = kernels::kl_divergence(&p, self.value(q_logits))?;
        let rg = self.needs(q_logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::KlDivergence {
                p,
                q_logits,
                softmax_q,
            },
        ))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let loss = kernels::mse(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(loss), rg, Op::Mse { a, b }))
    }

    fn accumulate(&mut self, v: Var, delta: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        let grad = node
            .grad
            .get_or_insert_with(|| vec![T::ZERO; node.value.numel()]);
        debug_assert_eq!(grad.len(), delta.len());
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            // Borrow dance: move the op out while dispatching.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            match &op {
                Op::Leaf => {}
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let (dx, dw, db) = kernels::conv2d_bwd(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &g,
                        *stride,
                        *padding,
                        b.is_some(),
                    );
                    self.accumulate(*x, dx.data());
                    self.accumulate(*w, dw.data());
                    if let (Some(b), Some(db)) = (b, db) {
                        self.accumulate(*b, &db);
                    }
                }
                Op::ConvTranspose2d { x, w, stride } => {
                    let (dx, dw) = kernels::conv_transpose2d_bwd(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &g,
                        *stride,
                    );
                    self.accumulate(*x, dx.data());
                    self.accumulate(*w, dw.data());
                }
                Op::Bilinear { x, out_h, out_w } => {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
                    let dx = kernels::interpolate_bilinear_bwd((n, c, h, w), &g, *out_h, *out_w);
                    self.accumulate(*x, dx.data());
                }
                Op::Relu { x } => {
                    let dx = kernels::relu_bwd(&self.nodes[x.0].value, &g);
                    self.accumulate(*x, dx.data());
                }
                Op::Affine { x, w, b } => {
                    let (dx, dw, db) =
                        kernels::affine_bwd(&self.nodes[x.0].value, &self.nodes[w.0].value, &g);
                    self.accumulate(*x, dx.data());
                    self.accumulate(*w, dw.data());
                    self.accumulate(*b, &db);
                }
                Op::MaxPool2 { x, argmax } => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let dx = kernels::maxpool2_bwd(&shape, argmax, &g);
                    self.accumulate(*x, dx.data());
                }
                Op::Reshape { x } => {
                    self.accumulate(*x, &g);
                }
                Op::Add { a, b } => {
                    self.accumulate(*a, &g);
                    self.accumulate(*b, &g);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<T> = g.iter().map(|&v| v * *c).collect();
                    self.accumulate(*x, &dx);
                }
                Op::SumAll { x } => {
                    let n = self.nodes[x.0].value.numel();
                    self.accumulate(*x, &vec![g[0]; n]);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    softmax,
                } => {
                    let dl = kernels::softmax_cross_entropy_bwd(softmax, labels, g[0]);
                    self.accumulate(*logits, dl.data());
                }
                Op::KlDivergence {
                    p,
                    q_logits,
                    softmax_q,
                } => {
                    let dq = kernels::kl_divergence_bwd(p, softmax_q, g[0]);
                    self.accumulate(*q_logits, dq.data());
                }
                Op::Mse { a, b } => {
                    let (da, db) =
                        kernels::mse_bwd(&self.nodes[a.0].value, &self.nodes[b.0].value, g[0]);
                    self.accumulate(*a, da.data());
                    self.accumulate(*b, db.data());
                }
            }
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

/// Central finite differences against the backward pass, run in binary64.
/// Returns max_i |g_i - fd_i| / max(1e-12, |g_i| + |fd_i|).
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone(), false);
        let y = f(&mut tape, x)?;
        let v = tape.value(y).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    if !tape.value(y).is_all_finite() {
        return Err(TensorError::NonFinite("grad_check objective".into()));
    }
    tape.backward(y)?;
    let grad: Vec<f64> = match tape.grad(x) {
        Some(g) => g.to_vec(),
        None => vec![0.0; point.numel()],
    };

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let err = (grad[i] - fd).abs() / (grad[i].abs() + fd.abs()).max(1e-12);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
