//! Define-by-run reverse-mode differentiation.
//!
//! Values are computed eagerly as nodes are pushed; [`Graph::backward`] walks
//! the tape in reverse. Gradients of trainable leaves ([`Graph::param`]) are
//! collected in [`ExactVec`] accumulators, one contribution per sample, so the
//! result does not depend on how samples are grouped into batches or workers.

use crate::autodiff::batchnorm::{self, BatchNormState, BnCache};
use crate::autodiff::kernels::{self, Padding};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exact::{ExactSum, ExactVec};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Combines per-worker partial sums into sums over the global batch.
///
/// Called collectively: every worker must issue the same sequence of calls.
pub trait BatchReducer {
    fn reduce(&mut self, partial: &mut ExactVec) -> Result<()>;
}

/// Reducer for a single worker holding the whole batch.
#[derive(Debug, Default, Clone, Copy)]
pub struct LocalReducer;

impl BatchReducer for LocalReducer {
    fn reduce(&mut self, _partial: &mut ExactVec) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv3x3 {
        input: NodeId,
        kernel: NodeId,
        padding: Padding,
    },
    Conv1x1 {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Upsample2x(NodeId),
    BatchNorm(Box<BnCache>),
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Reshape(NodeId),
    CropInterior(NodeId),
    FirstRow(NodeId),
    SampleMeanSquare(NodeId),
    Mse(NodeId, NodeId),
    Sum(NodeId),
    BatchMean {
        input: NodeId,
        global: usize,
        partial: ExactSum,
    },
}

#[derive(Debug)]
struct Node<S> {
    op: Op,
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
}

#[derive(Debug)]
struct ParamSlot {
    node: NodeId,
    len: usize,
    /// Allocated by the first contribution.
    grad: Option<ExactVec>,
}

impl ParamSlot {
    fn grad_mut(&mut self) -> &mut ExactVec {
        let len = self.len;
        self.grad.get_or_insert_with(|| ExactVec::zeros(len))
    }
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: Vec<ParamSlot>,
}

fn check_same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor<S>, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant leaf; its gradient is kept and readable through [`Graph::grad`].
    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            value,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf. Registration order defines the order of [`Graph::param_grads`].
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        let slot = self.params.len();
        let len = value.len();
        let id = self.input(value);
        self.nodes[id.0].op = Op::Param(slot);
        self.params.push(ParamSlot {
            node: id,
            len,
            grad: None,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of a non-parameter node after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn param_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.params.iter().map(|p| p.node)
    }

    /// Local (unreduced) exact gradient accumulators of every parameter,
    /// concatenated in registration order.
    pub fn param_grads(&self) -> ExactVec {
        let mut out = ExactVec::zeros(0);
        for p in &self.params {
            match &p.grad {
                Some(g) => out.extend(g),
                None => out.extend(&ExactVec::zeros(p.len)),
            }
        }
        out
    }

    /// Gradient of one parameter, rounded.
    pub fn param_grad(&self, id: NodeId) -> Option<Vec<f64>> {
        match self.nodes[id.0].op {
            Op::Param(slot) => {
                let p = &self.params[slot];
                Some(p.grad.as_ref().map_or_else(|| vec![0.0; p.len], |g| g.values()))
            }
            _ => None,
        }
    }

    /// Local exact partial behind a [`Graph::batch_mean`] node.
    pub fn batch_partial(&self, id: NodeId) -> Option<&ExactSum> {
        match &self.nodes[id.0].op {
            Op::BatchMean { partial, .. } => Some(partial),
            _ => None,
        }
    }

    // ---- operators -------------------------------------------------------

    /// 3x3 cross-correlation. `input` is `[B,Cin,H,W]`, `kernel` is `[Cout,Cin,3,3]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, padding: Padding) -> Result<NodeId> {
        let x = self.value(input);
        let k = self.value(kernel);
        let (b, cin, h, w) = x.dims4("conv2d")?;
        let (cout, kcin, kh, kw) = k.dims4("conv2d")?;
        if kh != 3 || kw != 3 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel spatial size must be 3x3, got {kh}x{kw}"),
            ));
        }
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels: input has {cin}, kernel expects {kcin}"),
            ));
        }
        if h < 3 || w < 3 {
            return Err(Error::shape(
                "conv2d",
                format!("spatial extent {h}x{w} is smaller than the 3x3 kernel"),
            ));
        }
        let (ho, wo) = padding.output_extent(h, w);
        let out = kernels::conv3x3_forward(x.data(), b, cin, h, w, k.data(), cout, padding);
        let value = Tensor::new(vec![b, cout, ho, wo], out)?;
        self.push(
            Op::Conv3x3 {
                input,
                kernel,
                padding,
            },
            value,
            "conv2d",
        )
    }

    /// Pointwise channel mixing: `weight` is `[Cout,Cin]`, `bias` is `[Cout]`.
    pub fn conv1x1(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let x = self.value(input);
        let wt = self.value(weight);
        let (b, cin, h, w) = x.dims4("conv1x1")?;
        let (cout, wcin) = match wt.shape() {
            &[o, i] => (o, i),
            other => {
                return Err(Error::shape(
                    "conv1x1",
                    format!("weight must be [Cout,Cin], got {other:?}"),
                ))
            }
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv1x1",
                format!("input channels: input has {cin}, weight expects {wcin}"),
            ));
        }
        if let Some(bn) = bias {
            if self.value(bn).shape() != [cout] {
                return Err(Error::shape("conv1x1", "bias must have length Cout"));
            }
        }
        let bias_vals = bias.map(|bn| self.value(bn).data());
        let out = kernels::conv1x1_forward(x.data(), b, cin, h * w, wt.data(), cout, bias_vals);
        let value = Tensor::new(vec![b, cout, h, w], out)?;
        self.push(
            Op::Conv1x1 {
                input,
                weight,
                bias,
            },
            value,
            "conv1x1",
        )
    }

    pub fn upsample2x(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4("upsample2x")?;
        let out = kernels::upsample2x_batch(x.data(), b, c, h, w);
        let value = Tensor::new(vec![b, c, 2 * h, 2 * w], out)?;
        self.push(Op::Upsample2x(input), value, "upsample2x")
    }

    /// Batch normalization over `[B,C,H,W]`. `gamma`/`beta` are nodes of
    /// length `C`; `state` supplies momentum and running statistics and is
    /// updated in train mode. With `sync`, batch statistics are reduced over
    /// all workers through `reducer`; otherwise only the local batch is used.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState<S>,
        mode: Mode,
        sync: bool,
        reducer: &mut dyn BatchReducer,
    ) -> Result<NodeId> {
        let mut local = LocalReducer;
        let red: &mut dyn BatchReducer = if sync { reducer } else { &mut local };
        let (value, cache) = batchnorm::forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            state,
            mode,
            sync,
            red,
            input,
            gamma,
            beta,
        )?;
        self.push(Op::BatchNorm(Box::new(cache)), value, "batchnorm")
    }

    /// `input` is `[B,in]`, `weight` is `[out,in]`, `bias` is `[out]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let x = self.value(input);
        let wt = self.value(weight);
        let (b, fin) = match x.shape() {
            &[b, f] => (b, f),
            other => {
                return Err(Error::shape(
                    "dense",
                    format!("input must be [B,in], got {other:?}"),
                ))
            }
        };
        let (fout, wfin) = match wt.shape() {
            &[o, i] => (o, i),
            other => {
                return Err(Error::shape(
                    "dense",
                    format!("weight must be [out,in], got {other:?}"),
                ))
            }
        };
        if wfin != fin {
            return Err(Error::shape(
                "dense",
                format!("input features: input has {fin}, weight expects {wfin}"),
            ));
        }
        if let Some(bn) = bias {
            if self.value(bn).shape() != [fout] {
                return Err(Error::shape("dense", "bias must have length out"));
            }
        }
        let bias_vals = bias.map(|bn| self.value(bn).data());
        let out = kernels::dense_forward(x.data(), b, fin, wt.data(), fout, bias_vals);
        let value = Tensor::new(vec![b, fout], out)?;
        self.push(
            Op::Dense {
                input,
                weight,
                bias,
            },
            value,
            "dense",
        )
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| kernels::relu(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(Op::Relu(input), value, "relu")
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(Op::Sigmoid(input), value, "sigmoid")
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op,
    ) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        check_same_shape(name, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(op, value, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        let x = self.value(input);
        let f = S::from_f64(factor);
        let data = x.data().iter().map(|&v| v * f).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(Op::Scale(input, factor), value, "scale")
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push(Op::Reshape(input), value, "reshape")
    }

    /// Drops the outermost ring of every `[B,C,H,W]` plane.
    pub fn crop_interior(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4("crop_interior")?;
        if h < 3 || w < 3 {
            return Err(Error::shape("crop_interior", "needs H,W >= 3"));
        }
        let (ho, wo) = (h - 2, w - 2);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for plane in x.data().chunks_exact(h * w) {
            for y in 1..h - 1 {
                out.extend_from_slice(&plane[y * w + 1..y * w + w - 1]);
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        self.push(Op::CropInterior(input), value, "crop_interior")
    }

    /// Row 0 of each `[B,1,H,W]` field, as `[B,W]`.
    pub fn first_row(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4("first_row")?;
        if c != 1 {
            return Err(Error::shape("first_row", format!("expected 1 channel, got {c}")));
        }
        let mut out = Vec::with_capacity(b * w);
        for s in 0..b {
            out.extend_from_slice(&x.data()[s * h * w..s * h * w + w]);
        }
        let value = Tensor::new(vec![b, w], out)?;
        self.push(Op::FirstRow(input), value, "first_row")
    }

    /// Mean of squares over every non-batch axis: `[B,...] -> [B]`.
    pub fn sample_mean_square(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let b = x.batch();
        if x.shape().is_empty() || b == 0 {
            return Err(Error::shape("sample_mean_square", "needs a batch axis"));
        }
        let per = x.len() / b;
        let inv = 1.0 / per as f64;
        let data = x
            .data()
            .chunks_exact(per)
            .map(|row| {
                let mut acc = 0.0f64;
                for &v in row {
                    let v = v.as_f64();
                    acc += v * v;
                }
                S::from_f64(acc * inv)
            })
            .collect();
        let value = Tensor::new(vec![b], data)?;
        self.push(Op::SampleMeanSquare(input), value, "sample_mean_square")
    }

    /// Mean of squared differences over all entries, as a scalar.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        check_same_shape("mse", x, y)?;
        let n = x.len().max(1) as f64;
        let mut acc = 0.0f64;
        for (&p, &q) in x.data().iter().zip(y.data()) {
            let d = p.as_f64() - q.as_f64();
            acc += d * d;
        }
        self.push(Op::Mse(a, b), Tensor::scalar(S::from_f64(acc / n)), "mse")
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let mut acc = 0.0f64;
        for &v in self.value(input).data() {
            acc += v.as_f64();
        }
        self.push(Op::Sum(input), Tensor::scalar(S::from_f64(acc)), "sum")
    }

    /// Mean of per-sample values `[B]` over a global batch of `global`
    /// samples, of which this worker holds `B`. The node's value is this
    /// worker's share; the exact partial is available via
    /// [`Graph::batch_partial`] for reduction across workers.
    pub fn batch_mean(&mut self, input: NodeId, global: usize) -> Result<NodeId> {
        let x = self.value(input);
        if x.shape().len() != 1 {
            return Err(Error::shape("batch_mean", "expects per-sample values [B]"));
        }
        if global == 0 || global < x.len() {
            return Err(Error::InvalidArgument(format!(
                "batch_mean: global batch {global} smaller than local batch {}",
                x.len()
            )));
        }
        let partial: ExactSum = x.data().iter().map(|v| v.as_f64()).collect();
        let value = Tensor::scalar(S::from_f64(partial.value() / global as f64));
        self.push(
            Op::BatchMean {
                input,
                global,
                partial,
            },
            value,
            "batch_mean",
        )
    }

    // ---- reverse pass ----------------------------------------------------

    fn accumulate(&mut self, target: NodeId, offset: usize, contrib: &[S]) {
        if let Op::Param(slot) = self.nodes[target.0].op {
            self.params[slot]
                .grad_mut()
                .add_slice(offset, contrib.iter().map(|v| v.as_f64()));
            return;
        }
        let node = &mut self.nodes[target.0];
        let grad = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        for (g, &c) in grad.data_mut()[offset..].iter_mut().zip(contrib) {
            *g += c;
        }
    }

    fn accumulate_f64(&mut self, target: NodeId, offset: usize, contrib: &[f64]) {
        if let Op::Param(slot) = self.nodes[target.0].op {
            self.params[slot].grad_mut().add_slice(offset, contrib.iter().copied());
            return;
        }
        let c: Vec<S> = contrib.iter().map(|&v| S::from_f64(v)).collect();
        self.accumulate(target, offset, &c);
    }

    /// Back-propagates from the scalar `root`. `reducer` is used by
    /// synchronized batch-norm nodes and must be the same kind of reducer
    /// that was used in the forward pass.
    pub fn backward(&mut self, root: NodeId, reducer: &mut dyn BatchReducer) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got shape {:?}", self.value(root).shape()),
            ));
        }
        let seed = Tensor::filled(self.value(root).shape(), S::one());
        self.nodes[root.0].grad = Some(seed);

        for idx in (0..=root.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Input);
            let res = self.backprop_node(idx, &op, &g, reducer);
            self.nodes[idx].op = op;
            // leaves keep their gradient for inspection
            if matches!(self.nodes[idx].op, Op::Input) {
                self.nodes[idx].grad = Some(g);
            }
            res?;
        }
        Ok(())
    }

    fn backprop_node(
        &mut self,
        idx: usize,
        op: &Op,
        g: &Tensor<S>,
        reducer: &mut dyn BatchReducer,
    ) -> Result<()> {
        match *op {
            Op::Input | Op::Param(_) => {}
            Op::Conv3x3 {
                input,
                kernel,
                padding,
            } => self.conv3x3_backward(input, kernel, padding, g),
            Op::Conv1x1 {
                input,
                weight,
                bias,
            } => self.conv1x1_backward(input, weight, bias, g),
            Op::Upsample2x(input) => {
                let (b, c, h, w) = self.value(input).dims4("upsample2x")?;
                let mut din = vec![S::zero(); b * c * h * w];
                for s in 0..b {
                    kernels::upsample2x_backward(
                        &g.data()[s * c * 4 * h * w..],
                        c,
                        h,
                        w,
                        &mut din[s * c * h * w..],
                    );
                }
                self.accumulate(input, 0, &din);
            }
            Op::BatchNorm(ref cache) => {
                let grads = batchnorm::backward(cache, self.value(cache.input), g, reducer)?;
                let per = grads.per_sample_gamma.len() / grads.batch.max(1);
                for s in 0..grads.batch {
                    self.accumulate_f64(cache.gamma, 0, &grads.per_sample_gamma[s * per..(s + 1) * per]);
                }
                for s in 0..grads.batch {
                    self.accumulate_f64(cache.beta, 0, &grads.per_sample_beta[s * per..(s + 1) * per]);
                }
                self.accumulate(cache.input, 0, &grads.dinput);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => self.dense_backward(input, weight, bias, g),
            Op::Relu(input) => {
                let x = self.value(input);
                let d: Vec<S> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > S::zero() { gv } else { S::zero() })
                    .collect();
                self.accumulate(input, 0, &d);
            }
            Op::Sigmoid(input) => {
                let y = &self.nodes[idx].value;
                let d: Vec<S> = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (S::one() - s))
                    .collect();
                self.accumulate(input, 0, &d);
            }
            Op::Add(a, b) => {
                self.accumulate(a, 0, g.data());
                self.accumulate(b, 0, g.data());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, 0, g.data());
                let neg: Vec<S> = g.data().iter().map(|&v| -v).collect();
                self.accumulate(b, 0, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<S> = self
                    .value(b)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * y)
                    .collect();
                let db: Vec<S> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| gv * x)
                    .collect();
                self.accumulate(a, 0, &da);
                self.accumulate(b, 0, &db);
            }
            Op::Scale(input, factor) => {
                let f = S::from_f64(factor);
                let d: Vec<S> = g.data().iter().map(|&v| v * f).collect();
                self.accumulate(input, 0, &d);
            }
            Op::Reshape(input) => self.accumulate(input, 0, g.data()),
            Op::CropInterior(input) => {
                let (b, c, h, w) = self.value(input).dims4("crop_interior")?;
                let (ho, wo) = (h - 2, w - 2);
                let mut din = vec![S::zero(); b * c * h * w];
                for (p, (dst, src)) in din
                    .chunks_exact_mut(h * w)
                    .zip(g.data().chunks_exact(ho * wo))
                    .enumerate()
                {
                    let _ = p;
                    for y in 0..ho {
                        dst[(y + 1) * w + 1..(y + 1) * w + 1 + wo]
                            .copy_from_slice(&src[y * wo..(y + 1) * wo]);
                    }
                }
                self.accumulate(input, 0, &din);
            }
            Op::FirstRow(input) => {
                let (b, _, h, w) = self.value(input).dims4("first_row")?;
                let mut din = vec![S::zero(); b * h * w];
                for s in 0..b {
                    din[s * h * w..s * h * w + w].copy_from_slice(&g.data()[s * w..(s + 1) * w]);
                }
                self.accumulate(input, 0, &din);
            }
            Op::SampleMeanSquare(input) => {
                let x = self.value(input);
                let b = x.batch();
                let per = x.len() / b;
                let scale = 2.0 / per as f64;
                let mut d = Vec::with_capacity(x.len());
                for (row, &gs) in x.data().chunks_exact(per).zip(g.data()) {
                    let k = S::from_f64(gs.as_f64() * scale);
                    d.extend(row.iter().map(|&v| k * v));
                }
                self.accumulate(input, 0, &d);
            }
            Op::Mse(a, b) => {
                let n = self.value(a).len().max(1) as f64;
                let k = S::from_f64(g.item().as_f64() * 2.0 / n);
                let da: Vec<S> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&p, &q)| k * (p - q))
                    .collect();
                let db: Vec<S> = da.iter().map(|&v| -v).collect();
                self.accumulate(a, 0, &da);
                self.accumulate(b, 0, &db);
            }
            Op::Sum(input) => {
                let d = vec![g.item(); self.value(input).len()];
                self.accumulate(input, 0, &d);
            }
            Op::BatchMean { input, global, .. } => {
                let k = S::from_f64(g.item().as_f64() / global as f64);
                let d = vec![k; self.value(input).len()];
                self.accumulate(input, 0, &d);
            }
        }
        Ok(())
    }

    fn conv3x3_backward(&mut self, input: NodeId, kernel: NodeId, padding: Padding, g: &Tensor<S>) {
        let (b, cin, h, w) = self.value(input).dims4("conv2d").expect("validated in forward");
        let cout = self.value(kernel).shape()[0];
        let (ho, wo) = padding.output_extent(h, w);
        let plane = ho * wo;
        let k9 = cin * 9;
        let mut cols = vec![S::zero(); k9 * plane];
        let mut dcols = vec![S::zero(); k9 * plane];
        let mut dk = vec![S::zero(); cout * k9];
        let mut din = vec![S::zero(); b * cin * h * w];
        // constant stencils need no gradient
        let want_kernel = !matches!(self.nodes[kernel.0].op, Op::Input);
        for s in 0..b {
            let dy = &g.data()[s * cout * plane..(s + 1) * cout * plane];
            if want_kernel {
                kernels::im2col3(
                    &self.value(input).data()[s * cin * h * w..],
                    cin,
                    h,
                    w,
                    padding,
                    &mut cols,
                );
                S::gemm(cout, plane, k9, S::one(), dy, false, &cols, true, S::zero(), &mut dk);
                self.accumulate(kernel, 0, &dk);
            }
            S::gemm(
                k9,
                cout,
                plane,
                S::one(),
                self.value(kernel).data(),
                true,
                dy,
                false,
                S::zero(),
                &mut dcols,
            );
            kernels::col2im3_add(&dcols, cin, h, w, padding, &mut din[s * cin * h * w..]);
        }
        self.accumulate(input, 0, &din);
    }

    fn conv1x1_backward(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>, g: &Tensor<S>) {
        let (b, cin, h, w) = self.value(input).dims4("conv1x1").expect("validated in forward");
        let cout = self.value(weight).shape()[0];
        let plane = h * w;
        let mut dw = vec![S::zero(); cout * cin];
        let mut din = vec![S::zero(); b * cin * plane];
        let mut db = vec![0.0f64; cout];
        for s in 0..b {
            let dy = &g.data()[s * cout * plane..(s + 1) * cout * plane];
            let x = &self.value(input).data()[s * cin * plane..(s + 1) * cin * plane];
            S::gemm(cout, plane, cin, S::one(), dy, false, x, true, S::zero(), &mut dw);
            S::gemm(
                cin,
                cout,
                plane,
                S::one(),
                self.value(weight).data(),
                true,
                dy,
                false,
                S::zero(),
                &mut din[s * cin * plane..(s + 1) * cin * plane],
            );
            self.accumulate(weight, 0, &dw);
            if let Some(bn) = bias {
                for (co, acc) in db.iter_mut().enumerate() {
                    *acc = dy[co * plane..(co + 1) * plane]
                        .iter()
                        .fold(0.0f64, |a, v| a + v.as_f64());
                }
                self.accumulate_f64(bn, 0, &db);
            }
        }
        self.accumulate(input, 0, &din);
    }

    fn dense_backward(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>, g: &Tensor<S>) {
        let (b, fin) = (self.value(input).shape()[0], self.value(input).shape()[1]);
        let fout = self.value(weight).shape()[0];
        let mut din = vec![S::zero(); b * fin];
        let mut dw = vec![S::zero(); fout * fin];
        for s in 0..b {
            let dy = &g.data()[s * fout..(s + 1) * fout];
            let x = &self.value(input).data()[s * fin..(s + 1) * fin];
            S::gemm(
                fin,
                fout,
                1,
                S::one(),
                self.value(weight).data(),
                true,
                dy,
                false,
                S::zero(),
                &mut din[s * fin..(s + 1) * fin],
            );
            for (o, row) in dw.chunks_exact_mut(fin).enumerate() {
                let d = dy[o];
                for (r, &xv) in row.iter_mut().zip(x) {
                    *r = d * xv;
                }
            }
            self.accumulate(weight, 0, &dw);
            if let Some(bn) = bias {
                self.accumulate(bn, 0, dy);
            }
        }
        self.accumulate(input, 0, &din);
    }
}
