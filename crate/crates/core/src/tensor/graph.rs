//! Reverse-mode tape.
//!
//! A [`Graph`] records every op applied during one forward pass. Values are
//! immutable once pushed. [`Graph::backward`] walks the tape in reverse and
//! returns gradients for the leaves; parameter gradients are then folded
//! into the [`ParamStore`] with [`ParamStore::accumulate_grads`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{CoalaError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A fused op with a hand-written backward pass. The losses are built on this.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input, given the gradient of the output.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, T),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Linear { .. } => "linear",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Dropout { .. } => "dropout",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Batch statistics produced by a training-mode batch norm: per-channel mean,
/// biased variance and the number of elements each was computed over.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Graph<T> {
    /// `seed` drives dropout masks; two graphs with the same seed and op
    /// sequence draw identical masks.
    pub fn new(training: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(CoalaError::NonFinite(format!(
                "{} produced a non-finite value (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// Free leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, None)
    }

    /// Copies a parameter's current value onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let trainable = p.grad.is_some();
        self.leaf(p.value.clone(), trainable, Some(id))
    }

    /// `(parameter, leaf)` pairs recorded on this tape.
    pub fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, &inputs)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let out = kernels::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad }, &inputs)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    /// Per-channel normalization over every axis except axis 1.
    ///
    /// With `running = None` the batch statistics are used (and returned so
    /// the caller can update its running averages); otherwise the given
    /// `(mean, var)` are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.value(x);
        if xs.rank() < 2 {
            return Err(CoalaError::shape("batchnorm", xs.shape(), &[0, 0]));
        }
        let (batch, channels) = (xs.shape()[0], xs.shape()[1]);
        let plane: usize = xs.shape()[2..].iter().product();
        for v in [gamma, beta] {
            if self.value(v).shape() != [channels] {
                return Err(CoalaError::shape("batchnorm", self.value(v).shape(), &[channels]));
            }
        }
        let count = batch * plane;
        let (mean, var, batch_stats) = match running {
            None => {
                if batch < 2 {
                    return Err(CoalaError::Invalid(format!(
                        "batch norm in training mode needs a batch of at least 2, got {batch}"
                    )));
                }
                let mut mean = vec![0f64; channels];
                let mut var = vec![0f64; channels];
                for (c, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let mut s = 0f64;
                    for b in 0..batch {
                        let start = (b * channels + c) * plane;
                        s += xs.data()[start..start + plane]
                            .iter()
                            .map(|x| x.to_f64().unwrap_or(f64::NAN))
                            .sum::<f64>();
                    }
                    *m = s / count as f64;
                    let mut ss = 0f64;
                    for b in 0..batch {
                        let start = (b * channels + c) * plane;
                        ss += xs.data()[start..start + plane]
                            .iter()
                            .map(|x| {
                                let d = x.to_f64().unwrap_or(f64::NAN) - *m;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    *v = ss / count as f64;
                }
                (mean, var, true)
            }
            Some((rm, rv)) => {
                if rm.len() != channels || rv.len() != channels {
                    return Err(CoalaError::shape("batchnorm", &[rm.len()], &[channels]));
                }
                let conv = |s: &[T]| s.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
                (conv(rm), conv(rv), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::c(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::c(m)).collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut xhat = vec![T::zero(); xs.numel()];
        let mut out = vec![T::zero(); xs.numel()];
        for b in 0..batch {
            for c in 0..channels {
                let start = (b * channels + c) * plane;
                for i in start..start + plane {
                    let h = (xs.data()[i] - mean_t[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let out = Tensor::new(xs.shape(), out)?;
        let stats = batch_stats.then(|| BatchStats {
            mean: mean_t.clone(),
            var: var.iter().map(|&v| T::c(v)).collect(),
            count,
        });
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CoalaError::Invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::c(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xs = self.value(x);
        let data = xs.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xs.shape(), data)?;
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Records a fused op whose forward value the caller already computed.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse pass from a scalar. Leaves that did not contribute get no entry,
    /// which [`ParamStore::accumulate_grads`] treats as a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(CoalaError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(CoalaError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &gy,
                        *stride,
                        *pad,
                        needs(*x),
                    )?;
                    self.accumulate(&mut grads, *x, dx)?;
                    self.accumulate(&mut grads, *w, Some(dw))?;
                    if let Some(b) = b {
                        self.accumulate(&mut grads, *b, Some(db))?;
                    }
                }
                Op::ConvTranspose2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = kernels::conv_transpose2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &gy,
                        *stride,
                        *pad,
                        needs(*x),
                    )?;
                    self.accumulate(&mut grads, *x, dx)?;
                    self.accumulate(&mut grads, *w, Some(dw))?;
                    if let Some(b) = b {
                        self.accumulate(&mut grads, *b, Some(db))?;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        kernels::linear_backward(self.value(*x), self.value(*w), &gy, needs(*x))?;
                    self.accumulate(&mut grads, *x, dx)?;
                    self.accumulate(&mut grads, *w, Some(dw))?;
                    if let Some(b) = b {
                        self.accumulate(&mut grads, *b, Some(db))?;
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (dx, dgamma, dbeta) = batch_norm_backward(
                        self.value(*x).shape(),
                        self.value(*gamma).data(),
                        xhat,
                        inv_std,
                        *batch_stats,
                        gy.data(),
                    );
                    let shape = self.value(*x).shape().to_vec();
                    let c = inv_std.len();
                    self.accumulate(&mut grads, *x, Some(Tensor::new(&shape, dx)?))?;
                    self.accumulate(&mut grads, *gamma, Some(Tensor::new(&[c], dgamma)?))?;
                    self.accumulate(&mut grads, *beta, Some(Tensor::new(&[c], dbeta)?))?;
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, *x, Some(Tensor::new(xv.shape(), data)?))?;
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let data = y
                        .data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&s, &g)| g * s * (T::one() - s))
                        .collect();
                    self.accumulate(&mut grads, *x, Some(Tensor::new(y.shape(), data)?))?;
                }
                Op::Dropout { x, mask } => {
                    let data = gy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    self.accumulate(&mut grads, *x, Some(Tensor::new(gy.shape(), data)?))?;
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(&mut grads, *x, Some(gy.reshape(&shape)?))?;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, Some(gy.clone()))?;
                    self.accumulate(&mut grads, *b, Some(gy))?;
                }
                Op::Scale(x, factor) => {
                    let f = *factor;
                    self.accumulate(&mut grads, *x, Some(gy.map(|g| g * f)))?;
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                    let input_grads = op.backward(&values, &node.value, &gy)?;
                    if input_grads.len() != inputs.len() {
                        return Err(CoalaError::Invalid(format!(
                            "{} returned {} gradients for {} inputs",
                            op.name(),
                            input_grads.len(),
                            inputs.len()
                        )));
                    }
                    for (v, g) in inputs.iter().zip(input_grads) {
                        self.accumulate(&mut grads, *v, g)?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        g: Option<Tensor<T>>,
    ) -> Result<()> {
        let Some(g) = g else { return Ok(()) };
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        if g.shape() != self.value(v).shape() {
            return Err(CoalaError::shape("backward", g.shape(), self.value(v).shape()));
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

fn batch_norm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    batch_stats: bool,
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (batch, channels) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let count = (batch * plane) as f64;
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    let mut dx = vec![T::zero(); gy.len()];
    for c in 0..channels {
        let (mut sum_dy, mut sum_dy_xhat) = (0f64, 0f64);
        for b in 0..batch {
            let start = (b * channels + c) * plane;
            for i in start..start + plane {
                let g = gy[i].to_f64().unwrap_or(f64::NAN);
                sum_dy += g;
                sum_dy_xhat += g * xhat[i].to_f64().unwrap_or(f64::NAN);
            }
        }
        dgamma[c] = T::c(sum_dy_xhat);
        dbeta[c] = T::c(sum_dy);
        let scale = gamma[c] * inv_std[c];
        let mean_dy = T::c(sum_dy / count);
        let mean_dy_xhat = T::c(sum_dy_xhat / count);
        for b in 0..batch {
            let start = (b * channels + c) * plane;
            for i in start..start + plane {
                dx[i] = if batch_stats {
                    scale * (gy[i] - mean_dy - xhat[i] * mean_dy_xhat)
                } else {
                    scale * gy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gradient_is_input() {
        let mut g = Graph::<f64>::new(true, 0);
        let x = g.input(Tensor::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let w = g.variable(Tensor::new(&[1, 3], vec![0.3, 0.1, -0.7]).unwrap());
        let y = g.linear(x, w, None).unwrap();
        let loss = g.reshape(y, &[]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, -2.0, 0.5]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new(true, 0);
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn disjoint_graph_gets_no_gradient() {
        let mut g = Graph::<f64>::new(true, 0);
        let a = g.variable(Tensor::full(&[1, 2], 1.0));
        let b = g.variable(Tensor::full(&[1, 2], 2.0));
        let used = g.scale(a, 3.0).unwrap();
        let _unused = g.relu(b).unwrap();
        let loss = g.reshape(used, &[2]).unwrap();
        let w = g.input(Tensor::full(&[1, 2], 1.0));
        let l2 = g.reshape(loss, &[1, 2]).unwrap();
        let s = g.linear(l2, w, None).unwrap();
        let s = g.reshape(s, &[]).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::<f32>::new(false, 0);
        let x = g.input(Tensor::new(&[3], vec![-2.0, 0.0, 3.0]).unwrap());
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        let z = g.input(Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn dropout_is_identity_at_rate_zero_and_in_eval() {
        let mut g = Graph::<f32>::new(true, 1);
        let x = g.input(Tensor::full(&[4, 4], 2.0));
        assert_eq!(g.dropout(x, 0.0).unwrap(), x);
        let mut e = Graph::<f32>::new(false, 1);
        let y = e.input(Tensor::full(&[4, 4], 2.0));
        assert_eq!(e.dropout(y, 0.25).unwrap(), y);
    }

    #[test]
    fn dropout_is_seeded_and_scales_survivors() {
        let run = |seed| {
            let mut g = Graph::<f32>::new(true, seed);
            let x = g.input(Tensor::full(&[64], 1.0));
            let y = g.dropout(x, 0.25).unwrap();
            g.value(y).data().to_vec()
        };
        let a = run(5);
        assert_eq!(a, run(5));
        assert!(a.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-6));
        assert!(a.iter().any(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_cases() {
        // constant channel -> beta
        let mut g = Graph::<f64>::new(true, 0);
        let x = g.input(Tensor::full(&[3, 2], 7.0));
        let gamma = g.input(Tensor::full(&[2], 1.5));
        let beta = g.input(Tensor::new(&[2], vec![0.25, -1.0]).unwrap());
        let (y, _) = g.batch_norm(x, gamma, beta, None, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -1.0, 0.25, -1.0, 0.25, -1.0]);

        // {-1, +1} per channel -> approximately {-1, +1}
        let x = g.input(Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap());
        let one = g.input(Tensor::full(&[1], 1.0));
        let zero = g.input(Tensor::full(&[1], 0.0));
        let (y, stats) = g.batch_norm(x, one, zero, None, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] + expect).abs() < 1e-12);
        assert!((g.value(y).data()[1] - expect).abs() < 1e-12);
        assert_eq!(stats.unwrap().var, vec![1.0]);

        // eval: running mean 0, var 1, gamma 2, beta 3, input 1 -> 5
        let mut e = Graph::<f64>::new(false, 0);
        let x = e.input(Tensor::full(&[1, 1], 1.0));
        let gamma = e.input(Tensor::full(&[1], 2.0));
        let beta = e.input(Tensor::full(&[1], 3.0));
        let (y, _) = e
            .batch_norm(x, gamma, beta, Some((&[0.0], &[1.0])), 1e-5)
            .unwrap();
        assert!((e.value(y).data()[0] - 5.0).abs() < 1e-4);
    }

    #[test]
    fn batch_norm_training_needs_two_samples() {
        let mut g = Graph::<f32>::new(true, 0);
        let x = g.input(Tensor::full(&[1, 3], 1.0));
        let gamma = g.input(Tensor::full(&[3], 1.0));
        let beta = g.input(Tensor::full(&[3], 0.0));
        let err = g.batch_norm(x, gamma, beta, None, 1e-5).unwrap_err();
        assert!(err.to_string().contains("at least 2"));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f32>::new(false, 0);
        let x = g.input(Tensor::full(&[2], f32::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(CoalaError::NonFinite(_))));
    }
}
