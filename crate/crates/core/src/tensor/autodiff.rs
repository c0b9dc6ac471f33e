//! Reverse-mode tape over the tensor kernels.
//!
//! Every recorded op keeps what its backward needs; [`Tape::backward`] walks the
//! nodes in reverse insertion order, which is a valid topological order
//! because an op can only reference earlier vars.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use super::conv;
use super::ops::{self, BnCache, BnRunning, Mode};
use super::{ConvWeights, Scalar, Shape4, Tensor};
use crate::error::{check_dim, Error, Result};
use crate::hgc::{self, HgcCache, HgcLayerSpec, HgcWeights};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u64,
}

enum Op<S> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        groups: usize,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Hgc {
        x: Var,
        ws: Vec<Var>,
        cache: HgcCache<S>,
    },
    Shuffle {
        x: Var,
        groups: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<S>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Gap {
        x: Var,
    },
    AvgPool2 {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ScaleChannels {
        x: Var,
        scale: Var,
    },
    SoftmaxCe {
        logits: Var,
        dlogits: Tensor<S>,
    },
    Dot {
        x: Var,
        weights: Tensor<S>,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv3x3",
            Op::Hgc { .. } => "hgc",
            Op::Shuffle { .. } => "channel_shuffle",
            Op::Concat { .. } => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Gap { .. } => "global_avg_pool",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::Linear { .. } => "linear",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Dot { .. } => "dot",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<S = f32> {
    id: u64,
    nodes: Vec<Node<S>>,
    /// Scale applied to every conv weight gradient; `1` except in fault-injection tests.
    conv_grad_fault: Option<f64>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Grads<S> {
    tape: u64,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: Shape4) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            conv_grad_fault: None,
        }
    }

    /// Multiply every conv weight gradient by `k`. Only for checking that the
    /// gradient checker catches broken backward passes.
    pub fn inject_conv_grad_fault(&mut self, k: f64) {
        self.conv_grad_fault = Some(k);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        if v.tape != self.id {
            return Err(Error::MissingForward { op: "tape lookup" });
        }
        self.nodes.get(v.idx).ok_or(Error::MissingForward { op: "tape lookup" })
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.node(v).expect("var belongs to this tape").value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<S>> {
        Ok(&self.node(v)?.value)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn conv_weights(&self, w: Var, groups: usize) -> Result<ConvWeights<S>> {
        ConvWeights::new(self.try_value(w)?.clone(), groups)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, groups: usize, stride: usize, pad: usize) -> Result<Var> {
        let cw = self.conv_weights(w, groups)?;
        let y = conv::conv2d(self.try_value(x)?, &cw, stride, pad)?;
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w,
                groups,
                stride,
                pad,
            },
        ))
    }

    pub fn depthwise_conv3x3(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let c = self.try_value(x)?.shape().c;
        let cw = self.conv_weights(w, c)?;
        let y = conv::depthwise_conv3x3(self.try_value(x)?, &cw, stride, pad)?;
        Ok(self.push(y, Op::Depthwise { x, w, stride, pad }))
    }

    /// Hierarchical group convolution with one weight var per group.
    pub fn hgc(&mut self, x: Var, ws: &[Var], spec: HgcLayerSpec) -> Result<Var> {
        let blocks = ws
            .iter()
            .map(|&w| self.conv_weights(w, 1))
            .collect::<Result<Vec<_>>>()?;
        let weights = HgcWeights::new(spec, blocks)?;
        let (y, cache) = hgc::hgc_forward_cached(self.try_value(x)?, &weights, spec)?;
        Ok(self.push(
            y,
            Op::Hgc {
                x,
                ws: ws.to_vec(),
                cache,
            },
        ))
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let y = ops::channel_shuffle(self.try_value(x)?, groups)?;
        Ok(self.push(y, Op::Shuffle { x, groups }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals = parts.iter().map(|&p| self.try_value(p)).collect::<Result<Vec<_>>>()?;
        let y = ops::concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_channels(self.try_value(x)?, start, len)?;
        Ok(self.push(y, Op::Slice { x, start }))
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = self.try_value(x)?.shape().c;
        check_dim("split_channels", "channel sum", c, sizes.iter().sum())?;
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice_channels(x, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// `gamma`/`beta` vars hold `(1, c, 1, 1)` tensors.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, running: &mut BnRunning<S>, mode: Mode) -> Result<Var> {
        let (y, cache) = ops::batchnorm(
            self.try_value(x)?,
            self.try_value(gamma)?.data(),
            self.try_value(beta)?.data(),
            running,
            mode,
        )?;
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, cache }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.try_value(x)?);
        Ok(self.push(y, Op::Relu { x }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = ops::sigmoid(self.try_value(x)?);
        Ok(self.push(y, Op::Sigmoid { x }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.try_value(x)?);
        Ok(self.push(y, Op::Gap { x }))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let y = ops::avg_pool2(self.try_value(x)?)?;
        Ok(self.push(y, Op::AvgPool2 { x }))
    }

    /// `w` is `(k, f, 1, 1)`, `b` is `(1, k, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.try_value(x)?, self.try_value(w)?, self.try_value(b)?.data())?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn scale_channels(&mut self, x: Var, scale: Var) -> Result<Var> {
        let y = ops::scale_channels(self.try_value(x)?, self.try_value(scale)?)?;
        Ok(self.push(y, Op::ScaleChannels { x, scale }))
    }

    /// Scalar mean cross-entropy.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, dlogits) = ops::softmax_cross_entropy(self.try_value(logits)?, labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, dlogits }))
    }

    /// Scalar `sum(x * weights)`; turns any output into a checkable loss.
    pub fn dot(&mut self, x: Var, weights: Tensor<S>) -> Result<Var> {
        let v = self.try_value(x)?;
        super::check_same_shape("dot", v.shape(), weights.shape())?;
        let s = v.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }))
    }

    /// Hash of the sign pattern of every ReLU input. Two evaluations with the
    /// same signature are on the same linear piece of the graph.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for v in self.nodes[x.idx].value.data() {
                    (*v > S::zero()).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Smallest `|x|` over all ReLU inputs (infinity if there are none).
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(&self.nodes[x.idx].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.as_f64().abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        let root = self.node(loss).map_err(|_| Error::MissingForward { op: "backward" })?;
        check_dim("backward", "loss size", 1, root.value.len())?;
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::scalar(S::one()));

        for idx in (0..=loss.idx).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let contributions = self.backward_node(node, &dy).map_err(|e| match e {
                Error::Shape { dim, expected, got, .. } => Error::Shape {
                    op: node.op.name(),
                    dim,
                    expected,
                    got,
                },
                other => other,
            })?;
            grads[idx] = Some(dy);
            for (v, g) in contributions {
                match &mut grads[v.idx] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Grads { tape: self.id, grads })
    }

    fn backward_node(&self, node: &Node<S>, dy: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let val = |v: Var| &self.nodes[v.idx].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            &Op::Conv {
                x,
                w,
                groups,
                stride,
                pad,
            } => {
                let cw = self.conv_weights(w, groups)?;
                let g = conv::conv2d_backward(val(x), &cw, stride, pad, dy)?;
                vec![(x, g.dx), (w, self.fault(g.dw))]
            }
            &Op::Depthwise { x, w, stride, pad } => {
                let cw = self.conv_weights(w, val(x).shape().c)?;
                let g = conv::depthwise_conv3x3_backward(val(x), &cw, stride, pad, dy)?;
                vec![(x, g.dx), (w, self.fault(g.dw))]
            }
            Op::Hgc { x, ws, cache } => {
                let blocks = ws
                    .iter()
                    .map(|&w| self.conv_weights(w, 1))
                    .collect::<Result<Vec<_>>>()?;
                let weights = HgcWeights::new(cache.spec(), blocks)?;
                let g = hgc::hgc_backward(cache, &weights, dy)?;
                let mut out = vec![(*x, g.dx)];
                out.extend(ws.iter().copied().zip(g.dw.into_iter().map(|d| self.fault(d))));
                out
            }
            &Op::Shuffle { x, groups } => vec![(x, ops::channel_shuffle_backward(dy, groups)?)],
            Op::Concat { parts } => {
                let sizes: Vec<usize> = parts.iter().map(|&p| val(p).shape().c).collect();
                let pieces = ops::split_channels(dy, &sizes)?;
                parts.iter().copied().zip(pieces).collect()
            }
            &Op::Slice { x, start } => {
                vec![(x, ops::slice_channels_backward(dy, val(x).shape(), start)?)]
            }
            Op::BatchNorm { x, gamma, beta, cache } => {
                let gshape = val(*gamma).shape();
                let (dx, dg, db) = ops::batchnorm_backward(cache, val(*gamma).data(), dy)?;
                vec![
                    (*x, dx),
                    (*gamma, Tensor::new(gshape, dg)?),
                    (*beta, Tensor::new(gshape, db)?),
                ]
            }
            &Op::Relu { x } => vec![(x, ops::relu_backward(val(x), dy)?)],
            &Op::Sigmoid { x } => vec![(x, ops::sigmoid_backward(&node.value, dy)?)],
            &Op::Gap { x } => vec![(x, ops::global_avg_pool_backward(val(x).shape(), dy)?)],
            &Op::AvgPool2 { x } => vec![(x, ops::avg_pool2_backward(val(x).shape(), dy)?)],
            &Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(val(x), val(w), dy)?;
                let bshape = val(b).shape();
                vec![(x, dx), (w, dw), (b, Tensor::new(bshape, db)?)]
            }
            &Op::ScaleChannels { x, scale } => {
                let (dx, ds) = ops::scale_channels_backward(val(x), val(scale), dy)?;
                vec![(x, dx), (scale, ds)]
            }
            Op::SoftmaxCe { logits, dlogits } => {
                let k = dy.data()[0];
                vec![(*logits, dlogits.scale(k))]
            }
            Op::Dot { x, weights } => {
                let k = dy.data()[0];
                vec![(*x, weights.scale(k))]
            }
        })
    }

    fn fault(&self, g: Tensor<S>) -> Tensor<S> {
        match self.conv_grad_fault {
            Some(k) => g.scale(S::lit(k)),
            None => g,
        }
    }
}
