//! Reverse-mode AD over a recorded tape.
//!
//! Forward ops append value nodes and an op record; `backward` replays the
//! records in reverse, accumulating vector-Jacobian products. Gradients are
//! only propagated along paths that can reach a `requires_grad` leaf, so
//! frozen subnetworks cost nothing in the backward pass.
//!
//! Every forward op validates shapes and rejects non-finite outputs.

use super::conv::{conv2d_backward, conv2d_forward, out_extent, Dim4};
use super::tensor::{AutogradError, Tensor};

/// Probabilities are clamped to at least this before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Index of a value node on the tape.
pub type ValueId = usize;

/// Batch-norm running statistics, owned by the model and updated by
/// train-mode forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Op {
    Conv2d {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        out: ValueId,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        out: ValueId,
        /// Per-channel mean and 1/sqrt(var+eps) used in the forward pass.
        mean: Vec<f64>,
        invstd: Vec<f64>,
        mode: BnMode,
    },
    Relu {
        input: ValueId,
        out: ValueId,
    },
    Linear {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        out: ValueId,
    },
    Softmax {
        input: ValueId,
        out: ValueId,
        axis: usize,
    },
    Sigmoid {
        input: ValueId,
        out: ValueId,
    },
    /// out[i] = input[indices[i]]. Backs max pooling and ROI pooling too:
    /// their forward passes pick argmax cells and route gradient through
    /// this single rule.
    Gather {
        input: ValueId,
        out: ValueId,
        indices: Vec<usize>,
    },
    Sum {
        input: ValueId,
        out: ValueId,
    },
    Scale {
        input: ValueId,
        out: ValueId,
        factor: f64,
    },
    AddN {
        inputs: Vec<ValueId>,
        out: ValueId,
    },
    Reshape {
        input: ValueId,
        out: ValueId,
    },
    GlobalAvgPool {
        input: ValueId,
        out: ValueId,
    },
    Bce {
        pred: ValueId,
        out: ValueId,
        target: Vec<f64>,
    },
    Cce {
        probs: ValueId,
        out: ValueId,
        classes: Vec<usize>,
    },
    Mse {
        pred: ValueId,
        target: ValueId,
        out: ValueId,
    },
}

/// Recorded computation: value nodes plus the op sequence that produced them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    /// True when a gradient must flow into the node (it requires grad itself
    /// or was computed from something that does).
    needs: Vec<bool>,
    ops: Vec<Op>,
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

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    /// Record a leaf value. Gradient is tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> ValueId {
        let needs = tensor.requires_grad;
        self.push(tensor, needs)
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, tensor: Tensor) -> ValueId {
        self.push(tensor, false)
    }

    pub fn tensor(&self, id: ValueId) -> &Tensor {
        &self.nodes[id]
    }

    pub fn data(&self, id: ValueId) -> &[f64] {
        self.nodes[id].data()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id].shape()
    }

    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, needs: bool) -> ValueId {
        self.nodes.push(tensor);
        self.needs.push(needs);
        self.nodes.len() - 1
    }

    fn push_op(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        needs: bool,
        make: impl FnOnce(ValueId) -> Op,
    ) -> Result<ValueId, AutogradError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutogradError::NonFinite(name));
        }
        let out = self.push(Tensor::new(shape, data)?, needs);
        self.ops.push(make(out));
        Ok(out)
    }

    fn dim4(&self, id: ValueId, what: &str) -> Result<Dim4, AutogradError> {
        Dim4::from_shape(self.shape(id)).ok_or_else(|| {
            AutogradError::Shape(format!("{what} must be 4-d, got {:?}", self.shape(id)))
        })
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId, AutogradError> {
        if stride == 0 {
            return Err(AutogradError::Invalid("conv2d stride must be >= 1".into()));
        }
        let id = self.dim4(input, "conv2d input")?;
        let wd = self.dim4(weight, "conv2d weight")?;
        let (filters, kh, kw) = (wd.n, wd.h, wd.w);
        if wd.c != id.c {
            return Err(AutogradError::Shape(format!(
                "conv2d: input has {} channels, weight expects {}",
                id.c, wd.c
            )));
        }
        if self.shape(bias) != [filters] {
            return Err(AutogradError::Shape(format!(
                "conv2d: bias shape {:?}, want [{filters}]",
                self.shape(bias)
            )));
        }
        let oh = out_extent(id.h, kh, stride, padding);
        let ow = out_extent(id.w, kw, stride, padding);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(AutogradError::Shape(format!(
                    "conv2d: kernel {kh}x{kw} does not fit {}x{} input at padding {padding}",
                    id.h, id.w
                )))
            }
        };
        let od = Dim4 {
            n: id.n,
            c: filters,
            h: oh,
            w: ow,
        };
        let mut out = vec![0.0; od.numel()];
        conv2d_forward(
            self.data(input),
            id,
            self.data(weight),
            filters,
            kh,
            kw,
            self.data(bias),
            stride,
            padding,
            &mut out,
            od,
        );
        let needs = self.needs[input] || self.needs[weight] || self.needs[bias];
        self.push_op(
            "conv2d",
            vec![od.n, od.c, od.h, od.w],
            out,
            needs,
            |out| Op::Conv2d {
                input,
                weight,
                bias,
                out,
                stride,
                padding,
            },
        )
    }

    /// Per-channel normalization over batch and spatial dims. Train mode
    /// normalizes with batch statistics and folds them into `running`;
    /// eval mode normalizes with `running` as-is.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running: &mut RunningStats,
        mode: BnMode,
        momentum: f64,
        epsilon: f64,
    ) -> Result<ValueId, AutogradError> {
        if epsilon <= 0.0 {
            return Err(AutogradError::Invalid(format!(
                "batchnorm epsilon must be positive, got {epsilon}"
            )));
        }
        let id = self.dim4(input, "batchnorm input")?;
        let channels = id.c;
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(AutogradError::Shape(format!(
                "batchnorm: gamma {:?} / beta {:?}, want [{channels}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if running.mean.len() != channels {
            return Err(AutogradError::Shape(format!(
                "batchnorm: running stats track {} channels, input has {channels}",
                running.mean.len()
            )));
        }
        let m = id.n * id.h * id.w;
        if m == 0 {
            return Err(AutogradError::Invalid(
                "batchnorm: zero batch-spatial extent".into(),
            ));
        }

        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut sum = 0.0;
                    for n in 0..id.n {
                        let base = id.row(n, c, 0);
                        sum += self.data(input)[base..base + id.h * id.w]
                            .iter()
                            .sum::<f64>();
                    }
                    mean[c] = sum / m as f64;
                    let mut sq = 0.0;
                    for n in 0..id.n {
                        let base = id.row(n, c, 0);
                        for v in &self.data(input)[base..base + id.h * id.w] {
                            let d = v - mean[c];
                            sq += d * d;
                        }
                    }
                    var[c] = sq / m as f64;
                }
                for c in 0..channels {
                    running.mean[c] = momentum * running.mean[c] + (1.0 - momentum) * mean[c];
                    running.var[c] = momentum * running.var[c] + (1.0 - momentum) * var[c];
                }
                (mean, var)
            }
            BnMode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();

        let mut out = vec![0.0; id.numel()];
        for n in 0..id.n {
            for c in 0..channels {
                let g = self.data(gamma)[c];
                let b = self.data(beta)[c];
                let base = id.row(n, c, 0);
                for (o, v) in out[base..base + id.h * id.w]
                    .iter_mut()
                    .zip(&self.data(input)[base..base + id.h * id.w])
                {
                    *o = g * (v - mean[c]) * invstd[c] + b;
                }
            }
        }

        let needs = self.needs[input] || self.needs[gamma] || self.needs[beta];
        let shape = self.shape(input).to_vec();
        self.push_op("batchnorm", shape, out, needs, |out| Op::BatchNorm {
            input,
            gamma,
            beta,
            out,
            mean,
            invstd,
            mode,
        })
    }

    pub fn relu(&mut self, input: ValueId) -> Result<ValueId, AutogradError> {
        let out: Vec<f64> = self.data(input).iter().map(|v| v.max(0.0)).collect();
        let needs = self.needs[input];
        let shape = self.shape(input).to_vec();
        self.push_op("relu", shape, out, needs, |out| Op::Relu { input, out })
    }

    pub fn sigmoid(&mut self, input: ValueId) -> Result<ValueId, AutogradError> {
        let out: Vec<f64> = self
            .data(input)
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let needs = self.needs[input];
        let shape = self.shape(input).to_vec();
        self.push_op("sigmoid", shape, out, needs, |out| Op::Sigmoid { input, out })
    }

    /// Max pooling with a square window; gradient routes to argmax cells.
    pub fn maxpool2d(
        &mut self,
        input: ValueId,
        window: usize,
        stride: usize,
    ) -> Result<ValueId, AutogradError> {
        if window == 0 || stride == 0 {
            return Err(AutogradError::Invalid(
                "maxpool2d window and stride must be >= 1".into(),
            ));
        }
        let id = self.dim4(input, "maxpool2d input")?;
        let (oh, ow) = match (
            out_extent(id.h, window, stride, 0),
            out_extent(id.w, window, stride, 0),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(AutogradError::Shape(format!(
                    "maxpool2d: window {window} exceeds {}x{} input",
                    id.h, id.w
                )))
            }
        };
        let mut indices = Vec::with_capacity(id.n * id.c * oh * ow);
        let data = self.data(input);
        for n in 0..id.n {
            for c in 0..id.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = id.row(n, c, oy * stride) + ox * stride;
                        for ky in 0..window {
                            for kx in 0..window {
                                let idx = id.row(n, c, oy * stride + ky) + ox * stride + kx;
                                if data[idx] > data[best] {
                                    best = idx;
                                }
                            }
                        }
                        indices.push(best);
                    }
                }
            }
        }
        self.gather(input, indices, vec![id.n, id.c, oh, ow])
    }

    /// `input [N, D] x weight [M, D] + bias [M] -> [N, M]`.
    pub fn linear(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
    ) -> Result<ValueId, AutogradError> {
        let (n, d) = match self.shape(input) {
            [n, d] => (*n, *d),
            s => {
                return Err(AutogradError::Shape(format!(
                    "linear input must be 2-d, got {s:?}"
                )))
            }
        };
        let (m, wd) = match self.shape(weight) {
            [m, wd] => (*m, *wd),
            s => {
                return Err(AutogradError::Shape(format!(
                    "linear weight must be 2-d, got {s:?}"
                )))
            }
        };
        if wd != d || self.shape(bias) != [m] {
            return Err(AutogradError::Shape(format!(
                "linear: input [{n}, {d}] weight [{m}, {wd}] bias {:?}",
                self.shape(bias)
            )));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let x = &self.data(input)[i * d..(i + 1) * d];
            for j in 0..m {
                let w = &self.data(weight)[j * d..(j + 1) * d];
                let mut acc = self.data(bias)[j];
                for (a, b) in x.iter().zip(w) {
                    acc += a * b;
                }
                out[i * m + j] = acc;
            }
        }
        let needs = self.needs[input] || self.needs[weight] || self.needs[bias];
        self.push_op("linear", vec![n, m], out, needs, |out| Op::Linear {
            input,
            weight,
            bias,
            out,
        })
    }

    pub fn softmax(&mut self, input: ValueId, axis: usize) -> Result<ValueId, AutogradError> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(AutogradError::Invalid(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0; self.nodes[input].numel()];
        let data = self.data(input);
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * axis_len * inner + k * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..axis_len {
                    max = max.max(data[at(k)]);
                }
                let mut sum = 0.0;
                for k in 0..axis_len {
                    let e = (data[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..axis_len {
                    out[at(k)] /= sum;
                }
            }
        }
        let needs = self.needs[input];
        self.push_op("softmax", shape, out, needs, |out| Op::Softmax {
            input,
            out,
            axis,
        })
    }

    pub fn gather(
        &mut self,
        input: ValueId,
        indices: Vec<usize>,
        out_shape: Vec<usize>,
    ) -> Result<ValueId, AutogradError> {
        let numel = self.nodes[input].numel();
        if indices.iter().any(|&i| i >= numel) {
            return Err(AutogradError::Invalid("gather index out of range".into()));
        }
        if out_shape.iter().product::<usize>() != indices.len() {
            return Err(AutogradError::Shape(format!(
                "gather: shape {out_shape:?} incompatible with {} indices",
                indices.len()
            )));
        }
        let out: Vec<f64> = indices.iter().map(|&i| self.data(input)[i]).collect();
        let needs = self.needs[input];
        self.push_op("gather", out_shape, out, needs, |out| Op::Gather {
            input,
            out,
            indices,
        })
    }

    pub fn sum(&mut self, input: ValueId) -> Result<ValueId, AutogradError> {
        let total: f64 = self.data(input).iter().sum();
        let needs = self.needs[input];
        self.push_op("sum", vec![1], vec![total], needs, |out| Op::Sum {
            input,
            out,
        })
    }

    pub fn scale(&mut self, input: ValueId, factor: f64) -> Result<ValueId, AutogradError> {
        let out: Vec<f64> = self.data(input).iter().map(|v| v * factor).collect();
        let needs = self.needs[input];
        let shape = self.shape(input).to_vec();
        self.push_op("scale", shape, out, needs, |out| Op::Scale {
            input,
            out,
            factor,
        })
    }

    /// Elementwise sum of same-shape values.
    pub fn add_n(&mut self, inputs: &[ValueId]) -> Result<ValueId, AutogradError> {
        let first = *inputs
            .first()
            .ok_or_else(|| AutogradError::Invalid("add_n of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        for &i in inputs {
            if self.shape(i) != shape {
                return Err(AutogradError::Shape(format!(
                    "add_n: {:?} vs {:?}",
                    self.shape(i),
                    shape
                )));
            }
        }
        let mut out = self.data(first).to_vec();
        for &i in &inputs[1..] {
            for (o, v) in out.iter_mut().zip(self.data(i)) {
                *o += v;
            }
        }
        let needs = inputs.iter().any(|&i| self.needs[i]);
        let inputs = inputs.to_vec();
        self.push_op("add_n", shape, out, needs, |out| Op::AddN { inputs, out })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutogradError> {
        self.add_n(&[a, b])
    }

    pub fn reshape(
        &mut self,
        input: ValueId,
        shape: Vec<usize>,
    ) -> Result<ValueId, AutogradError> {
        if shape.iter().product::<usize>() != self.nodes[input].numel() {
            return Err(AutogradError::Shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(input)
            )));
        }
        let out = self.data(input).to_vec();
        let needs = self.needs[input];
        self.push_op("reshape", shape, out, needs, |out| Op::Reshape { input, out })
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: ValueId) -> Result<ValueId, AutogradError> {
        let id = self.dim4(input, "global_avg_pool input")?;
        let hw = (id.h * id.w) as f64;
        let mut out = vec![0.0; id.n * id.c];
        for n in 0..id.n {
            for c in 0..id.c {
                let base = id.row(n, c, 0);
                out[n * id.c + c] =
                    self.data(input)[base..base + id.h * id.w].iter().sum::<f64>() / hw;
            }
        }
        let needs = self.needs[input];
        self.push_op("global_avg_pool", vec![id.n, id.c], out, needs, |out| {
            Op::GlobalAvgPool { input, out }
        })
    }

    // ── losses ───────────────────────────────────────────────────────

    /// Mean binary cross-entropy of probabilities against {0,1} targets.
    pub fn loss_bce(&mut self, pred: ValueId, target: &[f64]) -> Result<ValueId, AutogradError> {
        if target.len() != self.nodes[pred].numel() {
            return Err(AutogradError::Shape(format!(
                "bce: {} predictions vs {} targets",
                self.nodes[pred].numel(),
                target.len()
            )));
        }
        if target.iter().any(|t| *t != 0.0 && *t != 1.0) {
            return Err(AutogradError::Invalid(
                "bce targets must be exactly 0 or 1".into(),
            ));
        }
        let n = target.len() as f64;
        let mut acc = 0.0;
        for (p, t) in self.data(pred).iter().zip(target) {
            acc -= t * p.max(PROB_FLOOR).ln() + (1.0 - t) * (1.0 - p).max(PROB_FLOOR).ln();
        }
        let needs = self.needs[pred];
        let target = target.to_vec();
        self.push_op("loss_bce", vec![1], vec![acc / n], needs, |out| Op::Bce {
            pred,
            out,
            target,
        })
    }

    /// Mean categorical cross-entropy: `-ln p[class]` averaged over rows of
    /// a `[N, C]` probability tensor.
    pub fn loss_cce(&mut self, probs: ValueId, classes: &[usize]) -> Result<ValueId, AutogradError> {
        let (n, c) = match self.shape(probs) {
            [n, c] => (*n, *c),
            s => {
                return Err(AutogradError::Shape(format!(
                    "cce expects [N, C] probabilities, got {s:?}"
                )))
            }
        };
        if classes.len() != n {
            return Err(AutogradError::Shape(format!(
                "cce: {n} rows vs {} class indices",
                classes.len()
            )));
        }
        if classes.iter().any(|&k| k >= c) {
            return Err(AutogradError::Invalid(format!(
                "cce class index out of range 0..{c}"
            )));
        }
        let mut acc = 0.0;
        for (row, &k) in classes.iter().enumerate() {
            acc -= self.data(probs)[row * c + k].max(PROB_FLOOR).ln();
        }
        let needs = self.needs[probs];
        let classes = classes.to_vec();
        self.push_op(
            "loss_cce",
            vec![1],
            vec![acc / n as f64],
            needs,
            |out| Op::Cce {
                probs,
                out,
                classes,
            },
        )
    }

    /// Mean squared error between two same-shape values.
    pub fn loss_mse(&mut self, pred: ValueId, target: ValueId) -> Result<ValueId, AutogradError> {
        if self.shape(pred) != self.shape(target) {
            return Err(AutogradError::Shape(format!(
                "mse: {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let n = self.nodes[pred].numel() as f64;
        let acc: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let needs = self.needs[pred] || self.needs[target];
        self.push_op("loss_mse", vec![1], vec![acc / n], needs, |out| Op::Mse {
            pred,
            target,
            out,
        })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Propagate gradients from a scalar loss back to every reachable
    /// `requires_grad` node. Repeated calls accumulate into `grad`.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), AutogradError> {
        if self.nodes[loss].numel() != 1 {
            return Err(AutogradError::NotScalar(self.shape(loss).to_vec()));
        }
        // Per-run adjoint buffers; persistent grads only collect at the end,
        // so a second backward call adds exactly one more unit of seed.
        let mut dual: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        dual[loss] = Some(vec![1.0]);

        for op in self.ops.clone().iter().rev() {
            self.backward_op(op, &mut dual);
        }

        for (id, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad {
                match &dual[id] {
                    Some(d) => node.accumulate_grad(d),
                    None => node.accumulate_grad(&vec![0.0; node.numel()]),
                }
            }
        }
        Ok(())
    }

    fn add_dual(dual: &mut [Option<Vec<f64>>], id: ValueId, numel: usize) -> &mut Vec<f64> {
        dual[id].get_or_insert_with(|| vec![0.0; numel])
    }

    fn backward_op(&self, op: &Op, dual: &mut Vec<Option<Vec<f64>>>) {
        let out_id = match op {
            Op::Conv2d { out, .. }
            | Op::BatchNorm { out, .. }
            | Op::Relu { out, .. }
            | Op::Linear { out, .. }
            | Op::Softmax { out, .. }
            | Op::Sigmoid { out, .. }
            | Op::Gather { out, .. }
            | Op::Sum { out, .. }
            | Op::Scale { out, .. }
            | Op::AddN { out, .. }
            | Op::Reshape { out, .. }
            | Op::GlobalAvgPool { out, .. }
            | Op::Bce { out, .. }
            | Op::Cce { out, .. }
            | Op::Mse { out, .. } => *out,
        };
        if !self.needs[out_id] {
            return;
        }
        let d_out = match dual[out_id].take() {
            Some(d) => d,
            None => return,
        };

        match op {
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                ..
            } => {
                let id = Dim4::from_shape(self.shape(*input)).unwrap();
                let wd = Dim4::from_shape(self.shape(*weight)).unwrap();
                let od = Dim4::from_shape(self.shape(out_id)).unwrap();
                let numel_in = id.numel();
                let numel_w = wd.numel();
                let numel_b = wd.n;
                // Split the dual storage into disjoint mutable views.
                let want_in = self.needs[*input];
                let want_w = self.needs[*weight];
                let want_b = self.needs[*bias];
                let mut din = want_in.then(|| vec![0.0; numel_in]);
                let mut dw = want_w.then(|| vec![0.0; numel_w]);
                let mut db = want_b.then(|| vec![0.0; numel_b]);
                conv2d_backward(
                    self.data(*input),
                    id,
                    self.data(*weight),
                    wd.n,
                    wd.h,
                    wd.w,
                    *stride,
                    *padding,
                    &d_out,
                    od,
                    din.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = din {
                    accumulate(Self::add_dual(dual, *input, numel_in), &d);
                }
                if let Some(d) = dw {
                    accumulate(Self::add_dual(dual, *weight, numel_w), &d);
                }
                if let Some(d) = db {
                    accumulate(Self::add_dual(dual, *bias, numel_b), &d);
                }
            }

            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                invstd,
                mode,
                ..
            } => {
                let id = Dim4::from_shape(self.shape(*input)).unwrap();
                let m = (id.n * id.h * id.w) as f64;
                let x = self.data(*input);
                let g = self.data(*gamma);

                let mut d_beta = vec![0.0; id.c];
                let mut d_gamma = vec![0.0; id.c];
                let mut sum_dy = vec![0.0; id.c];
                let mut sum_dy_xhat = vec![0.0; id.c];
                for n in 0..id.n {
                    for c in 0..id.c {
                        let base = id.row(n, c, 0);
                        for i in 0..id.h * id.w {
                            let dy = d_out[base + i];
                            let xhat = (x[base + i] - mean[c]) * invstd[c];
                            sum_dy[c] += dy;
                            sum_dy_xhat[c] += dy * xhat;
                        }
                    }
                }
                for c in 0..id.c {
                    d_beta[c] = sum_dy[c];
                    d_gamma[c] = sum_dy_xhat[c];
                }

                if self.needs[*input] {
                    let mut d_in = vec![0.0; id.numel()];
                    for n in 0..id.n {
                        for c in 0..id.c {
                            let base = id.row(n, c, 0);
                            for i in 0..id.h * id.w {
                                let dy = d_out[base + i];
                                d_in[base + i] = match mode {
                                    // Batch statistics depend on the input.
                                    BnMode::Train => {
                                        let xhat = (x[base + i] - mean[c]) * invstd[c];
                                        g[c] * invstd[c]
                                            * (dy - sum_dy[c] / m - xhat * sum_dy_xhat[c] / m)
                                    }
                                    BnMode::Eval => g[c] * invstd[c] * dy,
                                };
                            }
                        }
                    }
                    accumulate(Self::add_dual(dual, *input, id.numel()), &d_in);
                }
                if self.needs[*gamma] {
                    accumulate(Self::add_dual(dual, *gamma, id.c), &d_gamma);
                }
                if self.needs[*beta] {
                    accumulate(Self::add_dual(dual, *beta, id.c), &d_beta);
                }
            }

            Op::Relu { input, .. } => {
                if self.needs[*input] {
                    let x = self.data(*input);
                    let numel = x.len();
                    let d = Self::add_dual(dual, *input, numel);
                    for i in 0..numel {
                        if x[i] > 0.0 {
                            d[i] += d_out[i];
                        }
                    }
                }
            }

            Op::Sigmoid { input, .. } => {
                if self.needs[*input] {
                    let y = self.data(out_id);
                    let numel = y.len();
                    let d = Self::add_dual(dual, *input, numel);
                    for i in 0..numel {
                        d[i] += d_out[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }

            Op::Linear {
                input,
                weight,
                bias,
                ..
            } => {
                let (n, dlen) = (self.shape(*input)[0], self.shape(*input)[1]);
                let m = self.shape(*weight)[0];
                if self.needs[*input] {
                    let w = self.data(*weight);
                    let mut d_in = vec![0.0; n * dlen];
                    for i in 0..n {
                        for j in 0..m {
                            let dy = d_out[i * m + j];
                            for k in 0..dlen {
                                d_in[i * dlen + k] += dy * w[j * dlen + k];
                            }
                        }
                    }
                    accumulate(Self::add_dual(dual, *input, n * dlen), &d_in);
                }
                if self.needs[*weight] {
                    let x = self.data(*input);
                    let mut d_w = vec![0.0; m * dlen];
                    for i in 0..n {
                        for j in 0..m {
                            let dy = d_out[i * m + j];
                            for k in 0..dlen {
                                d_w[j * dlen + k] += dy * x[i * dlen + k];
                            }
                        }
                    }
                    accumulate(Self::add_dual(dual, *weight, m * dlen), &d_w);
                }
                if self.needs[*bias] {
                    let d_b = Self::add_dual(dual, *bias, m);
                    for i in 0..n {
                        for j in 0..m {
                            d_b[j] += d_out[i * m + j];
                        }
                    }
                }
            }

            Op::Softmax { input, axis, .. } => {
                if self.needs[*input] {
                    let shape = self.shape(out_id);
                    let axis_len = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let y = self.data(out_id);
                    let mut d_in = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * axis_len * inner + k * inner + i;
                            let mut dot = 0.0;
                            for k in 0..axis_len {
                                dot += d_out[at(k)] * y[at(k)];
                            }
                            for k in 0..axis_len {
                                d_in[at(k)] = y[at(k)] * (d_out[at(k)] - dot);
                            }
                        }
                    }
                    accumulate(Self::add_dual(dual, *input, d_in.len()), &d_in);
                }
            }

            Op::Gather { input, indices, .. } => {
                if self.needs[*input] {
                    let numel = self.nodes[*input].numel();
                    let d = Self::add_dual(dual, *input, numel);
                    for (i, &src) in indices.iter().enumerate() {
                        d[src] += d_out[i];
                    }
                }
            }

            Op::Sum { input, .. } => {
                if self.needs[*input] {
                    let numel = self.nodes[*input].numel();
                    let d = Self::add_dual(dual, *input, numel);
                    for v in d.iter_mut() {
                        *v += d_out[0];
                    }
                }
            }

            Op::Scale { input, factor, .. } => {
                if self.needs[*input] {
                    let numel = self.nodes[*input].numel();
                    let d = Self::add_dual(dual, *input, numel);
                    for (v, dy) in d.iter_mut().zip(&d_out) {
                        *v += factor * dy;
                    }
                }
            }

            Op::AddN { inputs, .. } => {
                for &input in inputs {
                    if self.needs[input] {
                        let numel = self.nodes[input].numel();
                        accumulate(Self::add_dual(dual, input, numel), &d_out);
                    }
                }
            }

            Op::Reshape { input, .. } => {
                if self.needs[*input] {
                    let numel = self.nodes[*input].numel();
                    accumulate(Self::add_dual(dual, *input, numel), &d_out);
                }
            }

            Op::GlobalAvgPool { input, .. } => {
                if self.needs[*input] {
                    let id = Dim4::from_shape(self.shape(*input)).unwrap();
                    let hw = (id.h * id.w) as f64;
                    let d = Self::add_dual(dual, *input, id.numel());
                    for n in 0..id.n {
                        for c in 0..id.c {
                            let dy = d_out[n * id.c + c] / hw;
                            let base = id.row(n, c, 0);
                            for v in &mut d[base..base + id.h * id.w] {
                                *v += dy;
                            }
                        }
                    }
                }
            }

            Op::Bce { pred, target, .. } => {
                if self.needs[*pred] {
                    let p = self.data(*pred);
                    let n = target.len() as f64;
                    let d = Self::add_dual(dual, *pred, target.len());
                    for i in 0..target.len() {
                        // The clamp zeroes the gradient where it bites.
                        let mut g = 0.0;
                        if target[i] == 1.0 && p[i] > PROB_FLOOR {
                            g -= 1.0 / p[i];
                        }
                        if target[i] == 0.0 && 1.0 - p[i] > PROB_FLOOR {
                            g += 1.0 / (1.0 - p[i]);
                        }
                        d[i] += d_out[0] * g / n;
                    }
                }
            }

            Op::Cce { probs, classes, .. } => {
                if self.needs[*probs] {
                    let c = self.shape(*probs)[1];
                    let p = self.data(*probs);
                    let n = classes.len() as f64;
                    let numel = self.nodes[*probs].numel();
                    let d = Self::add_dual(dual, *probs, numel);
                    for (row, &k) in classes.iter().enumerate() {
                        let v = p[row * c + k];
                        if v > PROB_FLOOR {
                            d[row * c + k] -= d_out[0] / (v * n);
                        }
                    }
                }
            }

            Op::Mse { pred, target, .. } => {
                let n = self.nodes[*pred].numel() as f64;
                let p = self.data(*pred);
                let t = self.data(*target);
                if self.needs[*pred] {
                    let d = Self::add_dual(dual, *pred, p.len());
                    for i in 0..p.len() {
                        d[i] += d_out[0] * 2.0 * (p[i] - t[i]) / n;
                    }
                }
                if self.needs[*target] {
                    let d = Self::add_dual(dual, *target, t.len());
                    for i in 0..t.len() {
                        d[i] -= d_out[0] * 2.0 * (p[i] - t[i]) / n;
                    }
                }
            }
        }
    }
}

fn accumulate(acc: &mut [f64], delta: &[f64]) {
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += d;
    }
}

/// One SGD update: `p -= lr * g`. Frozen parameters are left untouched.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &[f64],
    learning_rate: f64,
    frozen: bool,
) -> Result<(), AutogradError> {
    if !(learning_rate >= 0.0) {
        return Err(AutogradError::Invalid(format!(
            "learning rate must be non-negative, got {learning_rate}"
        )));
    }
    if frozen {
        return Ok(());
    }
    if grad.len() != param.numel() {
        return Err(AutogradError::Shape(format!(
            "sgd: {} gradient values for {} parameters",
            grad.len(),
            param.numel()
        )));
    }
    if grad.iter().any(|g| g.is_nan()) {
        return Err(AutogradError::NonFinite("sgd gradient"));
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad) {
        *p -= learning_rate * g;
    }
    Ok(())
}
