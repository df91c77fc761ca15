//! Tape-based reverse-mode differentiation over the tensor primitives.
//!
//! A [`Tape`] is an append-only arena of nodes. Each node owns its value and
//! an optional gradient accumulator of the same shape. Operations push a new
//! node whose expression records the parent ids, so the tape is acyclic by
//! construction (parents always precede children) and reverse insertion
//! order is a reverse topological order.
//!
//! Gradients accumulate: calling [`Tape::backward`] twice without
//! [`Tape::zero_grad`] doubles every accumulator exactly.

use thiserror::Error;

use crate::tensor::{self, ConvLayer, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss([usize; 4]),
    #[error("node {child} lists parent {parent} that does not precede it; graph is not a DAG")]
    CycleDetected { child: usize, parent: usize },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Expr {
    Leaf,
    Conv {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    LeakyRelu { input: NodeId, slope: f64 },
    Relu { input: NodeId },
    Sigmoid { input: NodeId },
    NarrowChannels { input: NodeId, from: usize },
    ConcatChannels { inputs: Vec<NodeId> },
    PixelShuffle { input: NodeId, s: usize },
    GlobalContrastPool { input: NodeId },
    ChannelScale { input: NodeId, gates: NodeId },
    Add { lhs: NodeId, rhs: NodeId },
    Sum { input: NodeId },
    /// Dot product against a fixed (non-node) weighting; scalar output.
    DotSum { input: NodeId, weights: Tensor },
    L1Loss { pred: NodeId, target: NodeId },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    expr: Expr,
}

/// Append-only computation graph.
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

    /// Value computed at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient at `id`, if backward has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Reset all gradient accumulators.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, expr: Expr) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            expr,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Expr::Leaf)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, AutogradError> {
        let layer = self.conv_layer(weights, bias, stride, padding);
        let out = tensor::conv2d(self.value(input), &layer)?;
        Ok(self.push(
            out,
            Expr::Conv {
                input,
                weights,
                bias,
                stride,
                padding,
            },
        ))
    }

    fn conv_layer(&self, weights: NodeId, bias: NodeId, stride: usize, padding: usize) -> ConvLayer {
        ConvLayer {
            weights: self.value(weights).clone(),
            bias: self.value(bias).data().to_vec(),
            stride,
            padding,
        }
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        let out = self.value(input).leaky_relu(slope);
        self.push(out, Expr::LeakyRelu { input, slope })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).relu();
        self.push(out, Expr::Relu { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).sigmoid();
        self.push(out, Expr::Sigmoid { input })
    }

    pub fn channel_split(
        &mut self,
        input: NodeId,
        first: usize,
    ) -> Result<(NodeId, NodeId), AutogradError> {
        let c = self.value(input).channels();
        if first == 0 || first >= c {
            return Err(TensorError::SplitOutOfRange { at: first, channels: c }.into());
        }
        let head = self.value(input).narrow_channels(0, first);
        let tail = self.value(input).narrow_channels(first, c - first);
        let a = self.push(head, Expr::NarrowChannels { input, from: 0 });
        let b = self.push(tail, Expr::NarrowChannels { input, from: first });
        Ok((a, b))
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId, AutogradError> {
        let parts: Vec<&Tensor> = inputs.iter().map(|&id| self.value(id)).collect();
        let out = Tensor::concat_channels(&parts)?;
        Ok(self.push(
            out,
            Expr::ConcatChannels {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn pixel_shuffle(&mut self, input: NodeId, s: usize) -> Result<NodeId, AutogradError> {
        let out = self.value(input).pixel_shuffle(s)?;
        Ok(self.push(out, Expr::PixelShuffle { input, s }))
    }

    pub fn global_contrast_pool(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).global_contrast_pool();
        self.push(out, Expr::GlobalContrastPool { input })
    }

    pub fn channel_scale(&mut self, input: NodeId, gates: NodeId) -> Result<NodeId, AutogradError> {
        let out = self.value(input).channel_scale(self.value(gates))?;
        Ok(self.push(out, Expr::ChannelScale { input, gates }))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, AutogradError> {
        let out = self.value(lhs).add(self.value(rhs))?;
        Ok(self.push(out, Expr::Add { lhs, rhs }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Expr::Sum { input })
    }

    /// `sum(x * weights)` against a fixed weighting tensor, as a scalar node.
    pub fn dot_sum(&mut self, input: NodeId, weights: Tensor) -> Result<NodeId, AutogradError> {
        if self.value(input).shape() != weights.shape() {
            return Err(TensorError::ShapeMismatch {
                left: self.value(input).shape(),
                right: weights.shape(),
            }
            .into());
        }
        let total: f64 = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(total), Expr::DotSum { input, weights }))
    }

    /// Mean absolute error over all elements, as a scalar node.
    ///
    /// The subgradient at zero difference is zero.
    pub fn l1_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, AutogradError> {
        let loss = l1_loss(self.value(pred), self.value(target))?;
        Ok(self.push(Tensor::scalar(loss), Expr::L1Loss { pred, target }))
    }

    /// Propagate gradients from a scalar loss node to every reachable node.
    ///
    /// Each call seeds the loss with 1 and adds one pass worth of gradient
    /// into the persistent accumulators; the traversal itself works on
    /// per-pass buffers that are freed as soon as a node is finished.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutogradError> {
        if self.value(loss).numel() != 1 {
            return Err(AutogradError::NonScalarLoss(self.value(loss).shape()));
        }
        self.validate_dag()?;
        let mut pending: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = pending[i].take() else {
                continue;
            };
            match self.nodes[i].expr.clone() {
                Expr::Leaf => {}
                Expr::Conv {
                    input,
                    weights,
                    bias,
                    stride,
                    padding,
                } => {
                    let layer = self.conv_layer(weights, bias, stride, padding);
                    let gi = tensor::conv2d_grad_input(&grad, self.value(input).shape(), &layer);
                    let (gw, gb) = tensor::conv2d_grad_params(&grad, self.value(input), &layer);
                    acc(&mut pending, input, gi);
                    acc(&mut pending, weights, gw);
                    let bias_shape = self.value(bias).shape();
                    acc(&mut pending, bias, Tensor::from_vec(bias_shape, gb));
                }
                Expr::LeakyRelu { input, slope } => {
                    let gi = zip_map(self.value(input), &grad, |x, g| {
                        if x >= 0.0 {
                            g
                        } else {
                            slope * g
                        }
                    });
                    acc(&mut pending, input, gi);
                }
                Expr::Relu { input } => {
                    let gi =
                        zip_map(self.value(input), &grad, |x, g| if x >= 0.0 { g } else { 0.0 });
                    acc(&mut pending, input, gi);
                }
                Expr::Sigmoid { input } => {
                    let gi = zip_map(&self.nodes[i].value, &grad, |y, g| g * y * (1.0 - y));
                    acc(&mut pending, input, gi);
                }
                Expr::NarrowChannels { input, from } => {
                    let shape = self.value(input).shape();
                    let mut gi = Tensor::zeros(shape[0], shape[1], shape[2], shape[3]);
                    let gc = grad.channels();
                    for n in 0..shape[0] {
                        for c in 0..gc {
                            gi.plane_mut(n, from + c).copy_from_slice(grad.plane(n, c));
                        }
                    }
                    acc(&mut pending, input, gi);
                }
                Expr::ConcatChannels { inputs } => {
                    let mut offset = 0;
                    for id in inputs {
                        let c = self.value(id).channels();
                        let gi = grad.narrow_channels(offset, c);
                        acc(&mut pending, id, gi);
                        offset += c;
                    }
                }
                Expr::PixelShuffle { input, s } => {
                    let gi = grad.space_to_depth(s).expect("shuffle grad shape");
                    acc(&mut pending, input, gi);
                }
                Expr::GlobalContrastPool { input } => {
                    let gi = contrast_pool_grad(self.value(input), &grad);
                    acc(&mut pending, input, gi);
                }
                Expr::ChannelScale { input, gates } => {
                    let x = self.value(input);
                    let g = self.value(gates);
                    let [n, c, _, _] = x.shape();
                    let mut gi = grad.clone();
                    let mut gg = Tensor::zeros(n, c, 1, 1);
                    for ni in 0..n {
                        for ci in 0..c {
                            let gate = g.at(ni, ci, 0, 0);
                            for v in gi.plane_mut(ni, ci) {
                                *v *= gate;
                            }
                            let dot: f64 = grad
                                .plane(ni, ci)
                                .iter()
                                .zip(x.plane(ni, ci))
                                .map(|(gv, xv)| gv * xv)
                                .sum();
                            gg.set(ni, ci, 0, 0, dot);
                        }
                    }
                    acc(&mut pending, input, gi);
                    acc(&mut pending, gates, gg);
                }
                Expr::Add { lhs, rhs } => {
                    acc(&mut pending, lhs, grad.clone());
                    acc(&mut pending, rhs, grad.clone());
                }
                Expr::Sum { input } => {
                    let shape = self.value(input).shape();
                    let gi = Tensor::filled(shape[0], shape[1], shape[2], shape[3], grad.item());
                    acc(&mut pending, input, gi);
                }
                Expr::DotSum { input, weights } => {
                    let g = grad.item();
                    acc(&mut pending, input, weights.map(|w| g * w));
                }
                Expr::L1Loss { pred, target } => {
                    let scale = grad.item() / self.value(pred).numel() as f64;
                    let gi = zip_map(self.value(pred), self.value(target), |p, t| {
                        let d = p - t;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    });
                    acc(&mut pending, target, gi.map(|v| -v));
                    acc(&mut pending, pred, gi);
                }
            }
            self.accumulate(NodeId(i), grad);
        }
        Ok(())
    }

    fn validate_dag(&self) -> Result<(), AutogradError> {
        for (i, node) in self.nodes.iter().enumerate() {
            let check = |p: NodeId| {
                if p.0 >= i {
                    Err(AutogradError::CycleDetected { child: i, parent: p.0 })
                } else {
                    Ok(())
                }
            };
            match &node.expr {
                Expr::Leaf => {}
                Expr::Conv {
                    input,
                    weights,
                    bias,
                    ..
                } => {
                    check(*input)?;
                    check(*weights)?;
                    check(*bias)?;
                }
                Expr::LeakyRelu { input, .. }
                | Expr::Relu { input }
                | Expr::Sigmoid { input }
                | Expr::NarrowChannels { input, .. }
                | Expr::PixelShuffle { input, .. }
                | Expr::GlobalContrastPool { input }
                | Expr::DotSum { input, .. }
                | Expr::Sum { input } => check(*input)?,
                Expr::ConcatChannels { inputs } => {
                    for id in inputs {
                        check(*id)?;
                    }
                }
                Expr::ChannelScale { input, gates } => {
                    check(*input)?;
                    check(*gates)?;
                }
                Expr::Add { lhs, rhs } => {
                    check(*lhs)?;
                    check(*rhs)?;
                }
                Expr::L1Loss { pred, target } => {
                    check(*pred)?;
                    check(*target)?;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(delta),
        }
    }
}

/// Mean over all elements of `|pred - target|`.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            left: pred.shape(),
            right: target.shape(),
        });
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(total / pred.numel() as f64)
}

fn acc(pending: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut pending[id.0] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Gradient of `std + mean` pooling.
///
/// For channel values `x` with mean `mu` and population std `sigma`:
/// `dz/dx_i = (x_i - mu) / (A * sigma) + 1 / A` with `A = H*W`. The
/// deviation term takes its zero subgradient when `sigma = 0`.
fn contrast_pool_grad(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let [n, c, h, w] = input.shape();
    let area = (h * w) as f64;
    let mut gi = Tensor::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let g = grad_out.at(ni, ci, 0, 0);
            let plane = input.plane(ni, ci);
            let first = plane.iter().sum::<f64>() / area;
            let residue = plane.iter().map(|&x| x - first).sum::<f64>() / area;
            let mean = first + residue;
            let var = plane.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / area;
            let sigma = var.sqrt();
            let out = gi.plane_mut(ni, ci);
            for (o, &x) in out.iter_mut().zip(plane) {
                let dev = if sigma > 0.0 {
                    (x - mean) / (area * sigma)
                } else {
                    0.0
                };
                *o = g * (dev + 1.0 / area);
            }
        }
    }
    gi
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn l1_loss_values() {
        let a = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.5);
        assert_eq!(l1_loss(&b, &a).unwrap(), 0.5);
        let t = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 4.0]);
        assert_eq!(l1_loss(&a, &t).unwrap(), 1.5);
        let bad = Tensor::zeros(1, 1, 1, 3);
        assert!(l1_loss(&a, &bad).is_err());
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&mut r, [2, 3, 4, 4]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_l1_on_positive_diff() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(1, 1, 2, 2, 3.0));
        let t = tape.leaf(Tensor::zeros(1, 1, 2, 2));
        let loss = tape.l1_loss(x, t).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 0.25));
        assert!(tape.grad(t).unwrap().data().iter().all(|&v| v == -0.25));
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]));
        let t = tape.leaf(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 0.0]));
        let loss = tape.l1_loss(x, t).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn double_backward_doubles_accumulators() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&mut r, [1, 2, 3, 3]));
        let y = tape.leaky_relu(x, 0.05);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let once: Vec<f64> = tape.grad(x).unwrap().data().to_vec();
        tape.backward(s).unwrap();
        let twice = tape.grad(x).unwrap().data().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(1, 1, 2, 2));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(AutogradError::NonScalarLoss(_))));
    }

    #[test]
    fn zero_grad_clears_accumulators() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(1, 1, 1, 1, 2.0));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_some());
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }
}
