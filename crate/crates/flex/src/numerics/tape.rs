//! Reverse-mode differentiation over a recorded computation.
//!
//! A [`Tape`] is an arena of nodes in topological order: leaves first, then
//! one node per primitive application. Replaying the record reproduces the
//! forward values bit-identically; walking it backwards accumulates exact
//! gradients for every `requires_grad` leaf.

use std::sync::Arc;

use super::kernels;
use super::{sigmoid, softmax, softplus, Tensor};
use crate::error::{FlexError, Result};

pub const DEGENERATE_WEIGHT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Primitive applications recorded on the tape. Each variant carries the
/// input references and the constants needed to recompute its output.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, stride: usize, padding: usize },
    BiasChannel { input: NodeId, bias: NodeId },
    Affine { input: NodeId, weight: NodeId, bias: NodeId },
    Relu { input: NodeId },
    LeakyRelu { input: NodeId, slope: f64 },
    Softplus { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f64 },
    ConcatChannels { inputs: Vec<NodeId> },
    GlobalAvgPool { input: NodeId },
    Reshape { input: NodeId },
    /// Gather with fixed bilinear taps; `taps[cell]` indexes one spatial plane.
    /// Empty taps emit an all-zero [C, grid, grid] block (off-map ROI).
    RoiPool { input: NodeId, taps: Arc<Vec<[(usize, f64); 4]>>, grid: usize },
    /// Normalized weighted sum of same-shaped features: Σ w_k f_k / Σ w_j.
    WeightedFuse { features: Vec<NodeId>, weights: NodeId },
    /// out = matrix · input with a constant matrix [rows × len(input)].
    LinearMap { input: NodeId, matrix: Arc<Vec<f64>>, rows: usize },
    /// Gaussian kernel over levels 1..=n centered at clamp(base + mu, 1, n).
    GaussianKernel { mu: NodeId, sigma: NodeId, base: f64, n: usize },
    Index { input: NodeId, at: usize },
    Softmax { input: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, target: usize },
    /// Sum of per-component smooth-L1 deviations from a constant target.
    SmoothL1 { pred: NodeId, target: Arc<Vec<f64>> },
    SumScalars { inputs: Vec<NodeId> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf. The data is shared, not copied.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> NodeId {
        self.push(t.shape().to_vec(), t.data_arc(), Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.to_vec())
            .expect("node shape consistent")
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Arc<Vec<f64>>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { shape, data, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn record(&mut self, shape: Vec<usize>, op: Op) -> Result<NodeId> {
        let data = self.compute(&op)?;
        let inputs = op_inputs(&op);
        let rg = self.any_requires(&inputs);
        Ok(self.push(shape, Arc::new(data), op, rg))
    }

    // ── op builders ──────────────────────────────────────────────────

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        if ishape.len() != 3 || kshape.len() != 4 {
            return Err(FlexError::Shape(format!(
                "conv2d expects input [C,H,W] and kernel [Co,Ci,kh,kw], got {ishape:?} and {kshape:?}"
            )));
        }
        if stride == 0 {
            return Err(FlexError::Param("conv2d stride must be positive".into()));
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc != c_in {
            return Err(FlexError::Shape(format!(
                "conv2d kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(FlexError::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = kernels::conv_out_extent(h, kh, stride, padding);
        let ow = kernels::conv_out_extent(w, kw, stride, padding);
        self.record(vec![c_out, oh, ow], Op::Conv2d { input, kernel, stride, padding })
    }

    pub fn bias_channel(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 3 || bshape != [ishape[0]] {
            return Err(FlexError::Shape(format!(
                "bias_channel expects [C,H,W] and [C], got {ishape:?} and {bshape:?}"
            )));
        }
        self.record(ishape, Op::BiasChannel { input, bias })
    }

    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let d_in = self.value(input).len();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        if wshape.len() != 2 || wshape[1] != d_in || bshape != [wshape[0]] {
            return Err(FlexError::Shape(format!(
                "affine dims disagree: input len {d_in}, weight {wshape:?}, bias {bshape:?}"
            )));
        }
        self.record(vec![wshape[0]], Op::Affine { input, weight, bias })
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.record(self.shape(input).to_vec(), Op::Relu { input })
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> Result<NodeId> {
        self.record(self.shape(input).to_vec(), Op::LeakyRelu { input, slope })
    }

    pub fn softplus(&mut self, input: NodeId) -> Result<NodeId> {
        self.record(self.shape(input).to_vec(), Op::Softplus { input })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(FlexError::Shape("add expects identical shapes".into()));
        }
        self.record(self.shape(a).to_vec(), Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(FlexError::Shape("mul expects identical shapes".into()));
        }
        self.record(self.shape(a).to_vec(), Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        self.record(self.shape(input).to_vec(), Op::Scale { input, factor })
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(FlexError::Shape("concat of zero tensors".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if first.len() != 3 {
            return Err(FlexError::Shape("concat_channels expects [C,H,W] inputs".into()));
        }
        let mut channels = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != 3 || s[1] != first[1] || s[2] != first[2] {
                return Err(FlexError::Shape("concat_channels spatial extents differ".into()));
            }
            channels += s[0];
        }
        self.record(vec![channels, first[1], first[2]], Op::ConcatChannels { inputs: inputs.to_vec() })
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 {
            return Err(FlexError::Shape("global_avg_pool expects [C,H,W]".into()));
        }
        self.record(vec![s[0]], Op::GlobalAvgPool { input })
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(input).len() {
            return Err(FlexError::Shape("reshape changes element count".into()));
        }
        self.record(shape, Op::Reshape { input })
    }

    /// Bilinear gather over one feature map. `taps` has one entry per output
    /// cell of an S×S grid, or is empty to emit zeros (ROI off the map).
    pub fn roi_pool(&mut self, input: NodeId, taps: Arc<Vec<[(usize, f64); 4]>>, grid: usize) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 {
            return Err(FlexError::Shape("roi_pool expects [C,H,W]".into()));
        }
        if !taps.is_empty() && taps.len() != grid * grid {
            return Err(FlexError::Shape("roi_pool taps must cover the output grid".into()));
        }
        self.record(vec![s[0], grid, grid], Op::RoiPool { input, taps, grid })
    }

    /// Normalized weighted sum Σ w_k f_k / Σ w_j. Differentiable in both the
    /// features and the weights. Rejects weight sums at or below epsilon.
    pub fn weighted_fuse(&mut self, features: &[NodeId], weights: NodeId) -> Result<NodeId> {
        if features.is_empty() {
            return Err(FlexError::Shape("fuse of zero features".into()));
        }
        let fshape = self.shape(features[0]).to_vec();
        for &f in features {
            if self.shape(f) != fshape {
                return Err(FlexError::Shape("fuse features must share a shape".into()));
            }
        }
        let wlen = self.value(weights).len();
        if wlen != features.len() {
            return Err(FlexError::Shape(format!(
                "fuse got {} features but {} weights",
                features.len(),
                wlen
            )));
        }
        let sum: f64 = self.value(weights).iter().sum();
        if !(sum > DEGENERATE_WEIGHT_EPS) {
            return Err(FlexError::DegenerateWeights { sum, eps: DEGENERATE_WEIGHT_EPS });
        }
        self.record(fshape, Op::WeightedFuse { features: features.to_vec(), weights })
    }

    pub fn linear_map(&mut self, input: NodeId, matrix: Arc<Vec<f64>>, rows: usize) -> Result<NodeId> {
        let cols = self.value(input).len();
        if matrix.len() != rows * cols {
            return Err(FlexError::Shape("linear_map matrix extents disagree".into()));
        }
        self.record(vec![rows], Op::LinearMap { input, matrix, rows })
    }

    pub fn gaussian_kernel(&mut self, mu: NodeId, sigma: NodeId, base: f64, n: usize) -> Result<NodeId> {
        if self.value(mu).len() != 1 || self.value(sigma).len() != 1 {
            return Err(FlexError::Shape("gaussian_kernel takes scalar mu and sigma".into()));
        }
        if !(self.value(sigma)[0] > 0.0) {
            return Err(FlexError::Param("gaussian_kernel sigma must be positive".into()));
        }
        self.record(vec![n], Op::GaussianKernel { mu, sigma, base, n })
    }

    pub fn index(&mut self, input: NodeId, at: usize) -> Result<NodeId> {
        if at >= self.value(input).len() {
            return Err(FlexError::Shape("index out of bounds".into()));
        }
        self.record(vec![], Op::Index { input, at })
    }

    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 1 {
            return Err(FlexError::Shape("softmax expects a vector".into()));
        }
        self.record(s, Op::Softmax { input })
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let k = self.value(logits).len();
        if target >= k {
            return Err(FlexError::Param(format!("target class {target} out of {k}")));
        }
        if !self.value(logits).iter().all(|v| v.is_finite()) {
            return Err(FlexError::Numeric("cross-entropy logits must be finite".into()));
        }
        self.record(vec![], Op::SoftmaxCrossEntropy { logits, target })
    }

    pub fn smooth_l1(&mut self, pred: NodeId, target: Vec<f64>) -> Result<NodeId> {
        if self.value(pred).len() != target.len() {
            return Err(FlexError::Shape("smooth_l1 extents disagree".into()));
        }
        self.record(vec![], Op::SmoothL1 { pred, target: Arc::new(target) })
    }

    pub fn sum_scalars(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        for &id in inputs {
            if self.value(id).len() != 1 {
                return Err(FlexError::Shape("sum_scalars expects scalar nodes".into()));
            }
        }
        self.record(vec![], Op::SumScalars { inputs: inputs.to_vec() })
    }

    // ── forward evaluation ───────────────────────────────────────────

    /// Evaluate one op from the current values of its inputs.
    fn compute(&self, op: &Op) -> Result<Vec<f64>> {
        Ok(match op {
            Op::Leaf => unreachable!("leaves hold their data"),
            Op::Conv2d { input, kernel, stride, padding } => {
                let is = self.shape(*input);
                let ks = self.shape(*kernel);
                kernels::conv2d_forward(
                    self.value(*input),
                    self.value(*kernel),
                    is[0], is[1], is[2],
                    ks[0], ks[2], ks[3],
                    *stride, *padding,
                )
            }
            Op::BiasChannel { input, bias } => {
                let s = self.shape(*input);
                let plane = s[1] * s[2];
                let b = self.value(*bias);
                let mut out = self.value(*input).to_vec();
                for c in 0..s[0] {
                    for v in &mut out[c * plane..(c + 1) * plane] {
                        *v += b[c];
                    }
                }
                out
            }
            Op::Affine { input, weight, bias } => {
                let ws = self.shape(*weight);
                kernels::affine_forward(self.value(*input), self.value(*weight), self.value(*bias), ws[0], ws[1])
            }
            Op::Relu { input } => self.value(*input).iter().map(|&v| v.max(0.0)).collect(),
            Op::LeakyRelu { input, slope } => self
                .value(*input)
                .iter()
                .map(|&v| if v > 0.0 { v } else { v * slope })
                .collect(),
            Op::Softplus { input } => self.value(*input).iter().map(|&v| softplus(v)).collect(),
            Op::Add { a, b } => self
                .value(*a)
                .iter()
                .zip(self.value(*b))
                .map(|(x, y)| x + y)
                .collect(),
            Op::Mul { a, b } => self
                .value(*a)
                .iter()
                .zip(self.value(*b))
                .map(|(x, y)| x * y)
                .collect(),
            Op::Scale { input, factor } => self.value(*input).iter().map(|&v| v * factor).collect(),
            Op::ConcatChannels { inputs } => {
                let mut out = Vec::new();
                for &id in inputs {
                    out.extend_from_slice(self.value(id));
                }
                out
            }
            Op::GlobalAvgPool { input } => {
                let s = self.shape(*input);
                let plane = s[1] * s[2];
                let data = self.value(*input);
                (0..s[0])
                    .map(|c| data[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
                    .collect()
            }
            Op::Reshape { input } => self.value(*input).to_vec(),
            Op::RoiPool { input, taps, grid } => {
                let s = self.shape(*input);
                let plane = s[1] * s[2];
                let data = self.value(*input);
                if taps.is_empty() {
                    return Ok(vec![0.0; s[0] * grid * grid]);
                }
                let mut out = Vec::with_capacity(s[0] * taps.len());
                for c in 0..s[0] {
                    let base = c * plane;
                    for cell in taps.iter() {
                        let mut acc = 0.0;
                        for &(idx, w) in cell {
                            acc += w * data[base + idx];
                        }
                        out.push(acc);
                    }
                }
                out
            }
            Op::WeightedFuse { features, weights } => {
                let w = self.value(*weights);
                let total: f64 = w.iter().sum();
                let n = self.value(features[0]).len();
                let mut out = vec![0.0; n];
                for (k, &f) in features.iter().enumerate() {
                    let wk = w[k] / total;
                    if wk == 0.0 {
                        continue;
                    }
                    for (o, v) in out.iter_mut().zip(self.value(f)) {
                        *o += wk * v;
                    }
                }
                out
            }
            Op::LinearMap { input, matrix, rows } => {
                let x = self.value(*input);
                let cols = x.len();
                (0..*rows)
                    .map(|r| {
                        matrix[r * cols..(r + 1) * cols]
                            .iter()
                            .zip(x)
                            .map(|(m, v)| m * v)
                            .sum()
                    })
                    .collect()
            }
            Op::GaussianKernel { mu, sigma, base, n } => {
                let c = (base + self.value(*mu)[0]).clamp(1.0, *n as f64);
                let s = self.value(*sigma)[0];
                let norm = 1.0 / (s * (2.0 * std::f64::consts::PI).sqrt());
                (1..=*n)
                    .map(|k| {
                        let d = k as f64 - c;
                        norm * (-d * d / (2.0 * s * s)).exp()
                    })
                    .collect()
            }
            Op::Index { input, at } => vec![self.value(*input)[*at]],
            Op::Softmax { input } => softmax(self.value(*input)),
            Op::SoftmaxCrossEntropy { logits, target } => {
                let l = self.value(*logits);
                let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = l.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
                vec![lse - l[*target]]
            }
            Op::SmoothL1 { pred, target } => {
                let total: f64 = self
                    .value(*pred)
                    .iter()
                    .zip(target.iter())
                    .map(|(p, t)| {
                        let e = (p - t).abs();
                        if e < 1.0 {
                            0.5 * e * e
                        } else {
                            e - 0.5
                        }
                    })
                    .sum();
                vec![total]
            }
            Op::SumScalars { inputs } => {
                vec![inputs.iter().map(|&id| self.value(id)[0]).sum()]
            }
        })
    }

    /// Recompute every non-leaf node from its inputs, in record order, and
    /// verify the stored values are reproduced bit-identically.
    pub fn replay_check(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let fresh = self.compute(&node.op)?;
            if fresh.len() != node.data.len()
                || fresh
                    .iter()
                    .zip(node.data.iter())
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Err(FlexError::Numeric(format!("replay diverged at node {i}")));
            }
        }
        Ok(())
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulate reverse-mode gradients from a scalar seed node. Returns a
    /// gradient buffer per node (None where no gradient is required).
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        if self.value(seed).len() != 1 {
            return Err(FlexError::Usage("backward seed must be a scalar node".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(vec![1.0]);

        for idx in (0..=seed.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            if !node.requires_grad && !matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, kernel, stride, padding } => {
                    let is = self.shape(*input).to_vec();
                    let ks = self.shape(*kernel).to_vec();
                    if self.nodes[input.0].requires_grad {
                        let buf = self.grad_buf(&mut grads, *input);
                        kernels::conv2d_backward_input(
                            &g, self.value(*kernel),
                            is[0], is[1], is[2], ks[0], ks[2], ks[3],
                            *stride, *padding, buf,
                        );
                    }
                    if self.nodes[kernel.0].requires_grad {
                        let input_vals = self.value(*input).to_vec();
                        let buf = self.grad_buf(&mut grads, *kernel);
                        kernels::conv2d_backward_kernel(
                            &g, &input_vals,
                            is[0], is[1], is[2], ks[0], ks[2], ks[3],
                            *stride, *padding, buf,
                        );
                    }
                }
                Op::BiasChannel { input, bias } => {
                    let s = self.shape(*input).to_vec();
                    let plane = s[1] * s[2];
                    if self.nodes[input.0].requires_grad {
                        let buf = self.grad_buf(&mut grads, *input);
                        for (b, gv) in buf.iter_mut().zip(&g) {
                            *b += gv;
                        }
                    }
                    if self.nodes[bias.0].requires_grad {
                        let buf = self.grad_buf(&mut grads, *bias);
                        for c in 0..s[0] {
                            buf[c] += g[c * plane..(c + 1) * plane].iter().sum::<f64>();
                        }
                    }
                }
                Op::Affine { input, weight, bias } => {
                    let ws = self.shape(*weight).to_vec();
                    let (d_out, d_in) = (ws[0], ws[1]);
                    if self.nodes[input.0].requires_grad {
                        let wdata = self.value(*weight).to_vec();
                        let buf = self.grad_buf(&mut grads, *input);
                        for r in 0..d_out {
                            let gr = g[r];
                            if gr == 0.0 {
                                continue;
                            }
                            let row = &wdata[r * d_in..(r + 1) * d_in];
                            for (b, wv) in buf.iter_mut().zip(row) {
                                *b += gr * wv;
                            }
                        }
                    }
                    if self.nodes[weight.0].requires_grad {
                        let x = self.value(*input).to_vec();
                        let buf = self.grad_buf(&mut grads, *weight);
                        for r in 0..d_out {
                            let gr = g[r];
                            if gr == 0.0 {
                                continue;
                            }
                            let row = &mut buf[r * d_in..(r + 1) * d_in];
                            for (b, xv) in row.iter_mut().zip(&x) {
                                *b += gr * xv;
                            }
                        }
                    }
                    if self.nodes[bias.0].requires_grad {
                        let buf = self.grad_buf(&mut grads, *bias);
                        for (b, gv) in buf.iter_mut().zip(&g) {
                            *b += gv;
                        }
                    }
                }
                Op::Relu { input } => {
                    if self.nodes[input.0].requires_grad {
                        let x = self.value(*input).to_vec();
                        let buf = self.grad_buf(&mut grads, *input);
                        for ((b, gv), xv) in buf.iter_mut().zip(&g).zip(&x) {
                            if *xv > 0.0 {
                                *b += gv;
                            }
                        }
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    if self.nodes[input.0].requires_grad {
                        let x = self.value(*input).to_vec();
                        let slope = *slope;
                        let buf = self.grad_buf(&mut grads, *input);
                        for ((b, gv), xv) in buf.iter_mut().zip(&g).zip(&x) {
                            *b += gv * if *xv > 0.0 { 1.0 } else { slope };
                        }
                    }
                }
                Op::Softplus { input } => {
                    if self.nodes[input.0].requires_grad {
                        let x = self.value(*input).to_vec();
                        let buf = self.grad_buf(&mut grads, *input);
                        for ((b, gv), xv) in buf.iter_mut().zip(&g).zip(&x) {
                            *b += gv * sigmoid(*xv);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for &side in &[*a, *b] {
                        if self.nodes[side.0].requires_grad {
                            let buf = self.grad_buf(&mut grads, side);
                            for (bf, gv) in buf.iter_mut().zip(&g) {
                                *bf += gv;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        let other = self.value(*b).to_vec();
                        let buf = self.grad_buf(&mut grads, *a);
                        for ((bf, gv), ov) in buf.iter_mut().zip(&g).zip(&other) {
                            *bf += gv * ov;
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let other = self.value(*a).to_vec();
                        let buf = self.grad_buf(&mut grads, *b);
                        for ((bf, gv), ov) in buf.iter_mut().zip(&g).zip(&other) {
                            *bf += gv * ov;
                        }
                    }
                }
                Op::Scale { input, factor } => {
                    if self.nodes[input.0].requires_grad {
                        let f = *factor;
                        let buf = self.grad_buf(&mut grads, *input);
                        for (b, gv) in buf.iter_mut().zip(&g) {
                            *b += gv * f;
                        }
                    }
                }
                Op::ConcatChannels { inputs } => {
                    let mut offset = 0;
                    for &id in inputs {
                        let n = self.value(id).len();
                        if self.nodes[id.0].requires_grad {
                            let buf = self.grad_buf(&mut grads, id);
                            for (b, gv) in buf.iter_mut().zip(&g[offset..offset + n]) {
                                *b += gv;
                            }
                        }
                        offset += n;
                    }
                }
                Op::GlobalAvgPool { input } => {
                    if self.nodes[input.0].requires_grad {
                        let s = self.shape(*input).to_vec();
                        let plane = s[1] * s[2];
                        let buf = self.grad_buf(&mut grads, *input);
                        for c in 0..s[0] {
                            let gv = g[c] / plane as f64;
                            for b in &mut buf[c * plane..(c + 1) * plane] {
                                *b += gv;
                            }
                        }
                    }
                }
                Op::Reshape { input } => {
                    if self.nodes[input.0].requires_grad {
                        let buf = self.grad_buf(&mut grads, *input);
                        for (b, gv) in buf.iter_mut().zip(&g) {
                            *b += gv;
                        }
                    }
                }
                Op::RoiPool { input, taps, .. } => {
                    if self.nodes[input.0].requires_grad && !taps.is_empty() {
                        let s = self.shape(*input).to_vec();
                        let plane = s[1] * s[2];
                        let cells = taps.len();
                        let taps = Arc::clone(taps);
                        let buf = self.grad_buf(&mut grads, *input);
                        for c in 0..s[0] {
                            let base = c * plane;
                            for (cell_idx, cell) in taps.iter().enumerate() {
                                let gv = g[c * cells + cell_idx];
                                if gv == 0.0 {
                                    continue;
                                }
                                for &(idx, w) in cell {
                                    buf[base + idx] += gv * w;
                                }
                            }
                        }
                    }
                }
                Op::WeightedFuse { features, weights } => {
                    let w = self.value(*weights).to_vec();
                    let total: f64 = w.iter().sum();
                    let out = self.value(NodeId(idx)).to_vec();
                    for (k, &f) in features.iter().enumerate() {
                        if self.nodes[f.0].requires_grad {
                            let wk = w[k] / total;
                            let buf = self.grad_buf(&mut grads, f);
                            for (b, gv) in buf.iter_mut().zip(&g) {
                                *b += gv * wk;
                            }
                        }
                    }
                    if self.nodes[weights.0].requires_grad {
                        let mut wgrads = vec![0.0; w.len()];
                        for (k, &f) in features.iter().enumerate() {
                            let fv = self.value(f);
                            let mut acc = 0.0;
                            for ((gv, fvv), ov) in g.iter().zip(fv).zip(&out) {
                                acc += gv * (fvv - ov);
                            }
                            wgrads[k] = acc / total;
                        }
                        let buf = self.grad_buf(&mut grads, *weights);
                        for (b, gv) in buf.iter_mut().zip(&wgrads) {
                            *b += gv;
                        }
                    }
                }
                Op::LinearMap { input, matrix, rows } => {
                    if self.nodes[input.0].requires_grad {
                        let cols = self.value(*input).len();
                        let matrix = Arc::clone(matrix);
                        let rows = *rows;
                        let buf = self.grad_buf(&mut grads, *input);
                        for r in 0..rows {
                            let gr = g[r];
                            if gr == 0.0 {
                                continue;
                            }
                            for (b, m) in buf.iter_mut().zip(&matrix[r * cols..(r + 1) * cols]) {
                                *b += gr * m;
                            }
                        }
                    }
                }
                Op::GaussianKernel { mu, sigma, base, n } => {
                    let muv = self.value(*mu)[0];
                    let sv = self.value(*sigma)[0];
                    let c_raw = base + muv;
                    let c = c_raw.clamp(1.0, *n as f64);
                    let out = self.value(NodeId(idx)).to_vec();
                    if self.nodes[mu.0].requires_grad {
                        // clamp gates the gradient at the boundary
                        let inside = c_raw > 1.0 && c_raw < *n as f64;
                        let mut acc = 0.0;
                        if inside {
                            for (k, (gv, wv)) in g.iter().zip(&out).enumerate() {
                                let d = (k + 1) as f64 - c;
                                acc += gv * wv * d / (sv * sv);
                            }
                        }
                        self.grad_buf(&mut grads, *mu)[0] += acc;
                    }
                    if self.nodes[sigma.0].requires_grad {
                        let mut acc = 0.0;
                        for (k, (gv, wv)) in g.iter().zip(&out).enumerate() {
                            let d = (k + 1) as f64 - c;
                            acc += gv * wv * (d * d / (sv * sv * sv) - 1.0 / sv);
                        }
                        self.grad_buf(&mut grads, *sigma)[0] += acc;
                    }
                }
                Op::Index { input, at } => {
                    if self.nodes[input.0].requires_grad {
                        self.grad_buf(&mut grads, *input)[*at] += g[0];
                    }
                }
                Op::Softmax { input } => {
                    if self.nodes[input.0].requires_grad {
                        let p = self.value(NodeId(idx)).to_vec();
                        let dot: f64 = g.iter().zip(&p).map(|(gv, pv)| gv * pv).sum();
                        let buf = self.grad_buf(&mut grads, *input);
                        for ((b, gv), pv) in buf.iter_mut().zip(&g).zip(&p) {
                            *b += pv * (gv - dot);
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, target } => {
                    if self.nodes[logits.0].requires_grad {
                        let p = softmax(self.value(*logits));
                        let gv = g[0];
                        let buf = self.grad_buf(&mut grads, *logits);
                        for (i, (b, pv)) in buf.iter_mut().zip(&p).enumerate() {
                            let ind = if i == *target { 1.0 } else { 0.0 };
                            *b += gv * (pv - ind);
                        }
                    }
                }
                Op::SmoothL1 { pred, target } => {
                    if self.nodes[pred.0].requires_grad {
                        let p = self.value(*pred).to_vec();
                        let gv = g[0];
                        let target = Arc::clone(target);
                        let buf = self.grad_buf(&mut grads, *pred);
                        for ((b, pv), tv) in buf.iter_mut().zip(&p).zip(target.iter()) {
                            *b += gv * (pv - tv).clamp(-1.0, 1.0);
                        }
                    }
                }
                Op::SumScalars { inputs } => {
                    for &id in inputs {
                        if self.nodes[id.0].requires_grad {
                            self.grad_buf(&mut grads, id)[0] += g[0];
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    #[allow(clippy::mut_from_ref)]
    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> &'a mut Vec<f64> {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].data.len()]);
        }
        slot.as_mut().unwrap()
    }
}

/// Per-node gradient buffers produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a node, or zeros of its length if none was accumulated.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
        Op::BiasChannel { input, bias } => vec![*input, *bias],
        Op::Affine { input, weight, bias } => vec![*input, *weight, *bias],
        Op::Relu { input }
        | Op::LeakyRelu { input, .. }
        | Op::Softplus { input }
        | Op::Scale { input, .. }
        | Op::GlobalAvgPool { input }
        | Op::Reshape { input }
        | Op::RoiPool { input, .. }
        | Op::LinearMap { input, .. }
        | Op::Index { input, .. }
        | Op::Softmax { input } => vec![*input],
        Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::ConcatChannels { inputs } | Op::SumScalars { inputs } => inputs.clone(),
        Op::WeightedFuse { features, weights } => {
            let mut v = features.clone();
            v.push(*weights);
            v
        }
        Op::GaussianKernel { mu, sigma, .. } => vec![*mu, *sigma],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        Op::SmoothL1 { pred, .. } => vec![*pred],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Six-nested-loop cross-correlation used as the convolution oracle.
    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        input: &Tensor,
        kernel: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (co, _, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - padding as isize;
                                let ix = (x * stride + dx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input.data()[(c * h + iy as usize) * w + ix as usize]
                                    * kernel.data()[((o * ci + c) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let input = rand_tensor(&mut rng, vec![2, 4, 5]);
        let kernel = Tensor::new(
            vec![2, 2, 1, 1],
            vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(&input, false);
        let k = tape.leaf(&kernel, false);
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), input.data());
    }

    #[test]
    fn conv_of_zero_input_is_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let input = Tensor::zeros(vec![3, 6, 6]);
        let kernel = rand_tensor(&mut rng, vec![4, 3, 3, 3]);
        let mut tape = Tape::new();
        let x = tape.leaf(&input, false);
        let k = tape.leaf(&kernel, false);
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_six_nested_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let input = rand_tensor(&mut rng, vec![3, 7, 6]);
            let kernel = rand_tensor(&mut rng, vec![2, 3, 3, 3]);
            let mut tape = Tape::new();
            let x = tape.leaf(&input, false);
            let k = tape.leaf(&kernel, false);
            let y = tape.conv2d(x, k, stride, padding).unwrap();
            let want = conv_oracle(&input, &kernel, stride, padding);
            for (a, b) in tape.value(y).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![3, 4, 4]), false);
        let k = tape.leaf(&Tensor::zeros(vec![2, 4, 3, 3]), false);
        assert!(matches!(tape.conv2d(x, k, 1, 1), Err(FlexError::Shape(_))));
    }

    #[test]
    fn affine_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap(), false);
        let eye = tape.leaf(
            &Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            false,
        );
        let zero_b = tape.leaf(&Tensor::zeros(vec![3]), false);
        let y = tape.affine(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y), &[1.5, -2.0, 0.25]);

        let zeros = tape.leaf(&Tensor::zeros(vec![3]), false);
        let w = tape.leaf(&Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(&Tensor::new(vec![2], vec![4.0, -1.0]).unwrap(), false);
        let y = tape.affine(zeros, w, b).unwrap();
        assert_eq!(tape.value(y), &[4.0, -1.0]);
    }

    #[test]
    fn affine_matches_dot_product_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, vec![5]);
        let w = rand_tensor(&mut rng, vec![4, 5]);
        let b = rand_tensor(&mut rng, vec![4]);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x, false);
        let wi = tape.leaf(&w, false);
        let bi = tape.leaf(&b, false);
        let y = tape.affine(xi, wi, bi).unwrap();
        for r in 0..4 {
            let mut want = b.data()[r];
            for c in 0..5 {
                want += w.data()[r * 5 + c] * x.data()[c];
            }
            assert!((tape.value(y)[r] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_frozen_values() {
        // uniform logits over 4 classes
        let mut tape = Tape::new();
        let l = tape.leaf(&Tensor::new(vec![4], vec![0.3, 0.3, 0.3, 0.3]).unwrap(), false);
        let loss = tape.softmax_cross_entropy(l, 1).unwrap();
        assert!((tape.value(loss)[0] - 4f64.ln()).abs() < 1e-12);

        // saturated logit at the target
        let l = tape.leaf(&Tensor::new(vec![3], vec![0.0, 1000.0, 0.0]).unwrap(), false);
        let loss = tape.softmax_cross_entropy(l, 1).unwrap();
        assert!(tape.value(loss)[0].abs() < 1e-9);

        // direct evaluation: ln(1 + e^-1 + e^-2)
        let l = tape.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), false);
        let loss = tape.softmax_cross_entropy(l, 2).unwrap();
        let want = (1.0 + (-1f64).exp() + (-2f64).exp()).ln();
        assert!((tape.value(loss)[0] - want).abs() < 1e-12);
        assert!((want - 0.4076).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_inputs() {
        let mut tape = Tape::new();
        let l = tape.leaf(&Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap(), false);
        assert!(matches!(
            tape.softmax_cross_entropy(l, 0),
            Err(FlexError::Numeric(_))
        ));
        let l = tape.leaf(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), false);
        assert!(matches!(
            tape.softmax_cross_entropy(l, 2),
            Err(FlexError::Param(_))
        ));
    }

    #[test]
    fn backward_through_identity_affine_is_seed() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![0.7, -0.3]).unwrap(), true);
        let eye = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
        let b = tape.leaf(&Tensor::zeros(vec![2]), false);
        let y = tape.affine(x, eye, b).unwrap();
        let y0 = tape.index(y, 0).unwrap();
        let y1 = tape.index(y, 1).unwrap();
        let s = tape.sum_scalars(&[y0, y1]).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn gradient_of_constant_subgraph_is_absent() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1], vec![2.0]).unwrap(), true);
        let c = tape.leaf(&Tensor::new(vec![1], vec![5.0]).unwrap(), false);
        let seed = tape.index(c, 0).unwrap();
        let grads = tape.backward(seed).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get_or_zeros(x, 1), vec![0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![3]), true);
        assert!(matches!(tape.backward(x), Err(FlexError::Usage(_))));
    }

    #[test]
    fn fuse_rejects_degenerate_weights() {
        let mut tape = Tape::new();
        let f0 = tape.leaf(&Tensor::full(vec![2, 1, 1], 1.0), false);
        let f1 = tape.leaf(&Tensor::full(vec![2, 1, 1], 2.0), false);
        let w = tape.leaf(&Tensor::new(vec![2], vec![1e-7, 1e-7]).unwrap(), false);
        assert!(matches!(
            tape.weighted_fuse(&[f0, f1], w),
            Err(FlexError::DegenerateWeights { .. })
        ));
    }

    #[test]
    fn replay_reproduces_forward_bit_identically() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.leaf(&rand_tensor(&mut rng, vec![2, 6, 6]), true);
        let k = tape.leaf(&rand_tensor(&mut rng, vec![3, 2, 3, 3]), true);
        let b = tape.leaf(&rand_tensor(&mut rng, vec![3]), true);
        let c = tape.conv2d(x, k, 2, 1).unwrap();
        let cb = tape.bias_channel(c, b).unwrap();
        let r = tape.relu(cb).unwrap();
        let g = tape.global_avg_pool(r).unwrap();
        let w = tape.leaf(&rand_tensor(&mut rng, vec![4, 3]), true);
        let b2 = tape.leaf(&rand_tensor(&mut rng, vec![4]), true);
        let logits = tape.affine(g, w, b2).unwrap();
        let _sm = tape.softmax(logits).unwrap();
        let _loss = tape.softmax_cross_entropy(logits, 2).unwrap();
        tape.replay_check().unwrap();
    }

    /// Every differentiable primitive passes the finite-difference oracle at
    /// 1e-4 on randomized small shapes across 50 seeds.
    #[test]
    fn primitives_pass_finite_difference_check() {
        for seed in 0..50u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);

            // conv2d + bias + relu + gap, gradient w.r.t. input and kernel
            let input = rand_tensor(&mut rng, vec![2, 5, 5]);
            let kernel = rand_tensor(&mut rng, vec![2, 2, 3, 3]);
            let bias = rand_tensor(&mut rng, vec![2]);
            let run_conv = |flat: &[f64]| -> crate::error::Result<f64> {
                let (i_n, k_n) = (input.len(), kernel.len());
                let it = Tensor::new(input.shape().to_vec(), flat[..i_n].to_vec())?;
                let kt = Tensor::new(kernel.shape().to_vec(), flat[i_n..i_n + k_n].to_vec())?;
                let bt = Tensor::new(vec![2], flat[i_n + k_n..].to_vec())?;
                let mut tape = Tape::new();
                let x = tape.leaf(&it, true);
                let k = tape.leaf(&kt, true);
                let b = tape.leaf(&bt, true);
                let c = tape.conv2d(x, k, 2, 1)?;
                let cb = tape.bias_channel(c, b)?;
                let r = tape.relu(cb)?;
                let g = tape.global_avg_pool(r)?;
                let s0 = tape.index(g, 0)?;
                let s1 = tape.index(g, 1)?;
                let out = tape.sum_scalars(&[s0, s1])?;
                Ok(tape.value(out)[0])
            };
            let mut flat = input.data().to_vec();
            flat.extend_from_slice(kernel.data());
            flat.extend_from_slice(bias.data());
            let analytic = {
                let mut tape = Tape::new();
                let x = tape.leaf(&input, true);
                let k = tape.leaf(&kernel, true);
                let b = tape.leaf(&bias, true);
                let c = tape.conv2d(x, k, 2, 1).unwrap();
                let cb = tape.bias_channel(c, b).unwrap();
                let r = tape.relu(cb).unwrap();
                let g = tape.global_avg_pool(r).unwrap();
                let s0 = tape.index(g, 0).unwrap();
                let s1 = tape.index(g, 1).unwrap();
                let out = tape.sum_scalars(&[s0, s1]).unwrap();
                let grads = tape.backward(out).unwrap();
                let mut a = grads.get_or_zeros(x, input.len());
                a.extend(grads.get_or_zeros(k, kernel.len()));
                a.extend(grads.get_or_zeros(b, bias.len()));
                a
            };
            let errs = finite_diff_check(run_conv, &flat, &analytic, 1e-5).unwrap();
            let max = errs.iter().cloned().fold(0.0, f64::max);
            assert!(max < 1e-4, "conv chain seed {seed}: max rel err {max}");

            // fused softmax / CE / fuse / softplus path with weight gradients
            let feats: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, vec![4])).collect();
            let w = Tensor::new(vec![3], (0..3).map(|_| rng.gen_range(0.2..1.0)).collect()).unwrap();
            let run_fuse = |flat: &[f64]| -> crate::error::Result<f64> {
                let mut tape = Tape::new();
                let mut ids = Vec::new();
                for c in 0..3 {
                    let t = Tensor::new(vec![4], flat[c * 4..(c + 1) * 4].to_vec())?;
                    ids.push(tape.leaf(&t, true));
                }
                let wt = Tensor::new(vec![3], flat[12..15].to_vec())?;
                let wid = tape.leaf(&wt, true);
                let sp = tape.softplus(wid)?;
                let fused = tape.weighted_fuse(&ids, sp)?;
                let sm = tape.softmax(fused)?;
                let picked = tape.index(sm, 1)?;
                let ce = tape.softmax_cross_entropy(fused, 2)?;
                let out = tape.sum_scalars(&[picked, ce])?;
                Ok(tape.value(out)[0])
            };
            let mut flat: Vec<f64> = feats.iter().flat_map(|t| t.data().to_vec()).collect();
            flat.extend_from_slice(w.data());
            let analytic = {
                let mut tape = Tape::new();
                let ids: Vec<NodeId> = feats.iter().map(|t| tape.leaf(t, true)).collect();
                let wid = tape.leaf(&w, true);
                let sp = tape.softplus(wid).unwrap();
                let fused = tape.weighted_fuse(&ids, sp).unwrap();
                let sm = tape.softmax(fused).unwrap();
                let picked = tape.index(sm, 1).unwrap();
                let ce = tape.softmax_cross_entropy(fused, 2).unwrap();
                let out = tape.sum_scalars(&[picked, ce]).unwrap();
                let grads = tape.backward(out).unwrap();
                let mut a: Vec<f64> = ids.iter().flat_map(|&id| grads.get_or_zeros(id, 4)).collect();
                a.extend(grads.get_or_zeros(wid, 3));
                a
            };
            let errs = finite_diff_check(run_fuse, &flat, &analytic, 1e-6).unwrap();
            let max = errs.iter().cloned().fold(0.0, f64::max);
            assert!(max < 1e-4, "fuse chain seed {seed}: max rel err {max}");

            // gaussian kernel w.r.t. mu and sigma, plus smooth-l1 and linear map
            let mu = rng.gen_range(-0.8..0.8);
            let sg = rng.gen_range(0.4..1.5);
            let pred = rand_tensor(&mut rng, vec![4]);
            let target: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let matrix: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let run_tail = |flat: &[f64]| -> crate::error::Result<f64> {
                let mut tape = Tape::new();
                let m = tape.leaf(&Tensor::new(vec![1], vec![flat[0]])?, true);
                let s = tape.leaf(&Tensor::new(vec![1], vec![flat[1]])?, true);
                let p = tape.leaf(&Tensor::new(vec![4], flat[2..6].to_vec())?, true);
                let gk = tape.gaussian_kernel(m, s, 2.3, 5)?;
                let lm = tape.linear_map(gk, Arc::new(matrix.clone()), 2)?;
                let l0 = tape.index(lm, 0)?;
                let l1 = tape.index(lm, 1)?;
                let sl = tape.smooth_l1(p, target.clone())?;
                let out = tape.sum_scalars(&[l0, l1, sl])?;
                Ok(tape.value(out)[0])
            };
            let flat = {
                let mut v = vec![mu, sg];
                v.extend_from_slice(pred.data());
                v
            };
            let analytic = {
                let mut tape = Tape::new();
                let m = tape.leaf(&Tensor::new(vec![1], vec![mu]).unwrap(), true);
                let s = tape.leaf(&Tensor::new(vec![1], vec![sg]).unwrap(), true);
                let p = tape.leaf(&pred, true);
                let gk = tape.gaussian_kernel(m, s, 2.3, 5).unwrap();
                let lm = tape.linear_map(gk, Arc::new(matrix.clone()), 2).unwrap();
                let l0 = tape.index(lm, 0).unwrap();
                let l1 = tape.index(lm, 1).unwrap();
                let sl = tape.smooth_l1(p, target.clone()).unwrap();
                let out = tape.sum_scalars(&[l0, l1, sl]).unwrap();
                let grads = tape.backward(out).unwrap();
                let mut a = grads.get_or_zeros(m, 1);
                a.extend(grads.get_or_zeros(s, 1));
                a.extend(grads.get_or_zeros(p, 4));
                a
            };
            let errs = finite_diff_check(run_tail, &flat, &analytic, 1e-6).unwrap();
            let max = errs.iter().cloned().fold(0.0, f64::max);
            assert!(max < 1e-4, "tail chain seed {seed}: max rel err {max}");
        }
    }
}
