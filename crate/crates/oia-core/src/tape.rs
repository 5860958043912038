//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation appends a node holding its result and enough metadata to
//! replay the chain rule. Nodes are stored in execution order, which is also
//! a topological order, so the backward pass is a single reverse sweep that
//! accumulates (never overwrites) operand gradients. A tape belongs to one
//! forward pass; concurrent passes each own their own tape.

use crate::error::{OiaError, Result};
use crate::tensor::Tensor;

/// Index of a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    Relu {
        input: TensorId,
    },
    Sigmoid {
        input: TensorId,
    },
    Softmax {
        input: TensorId,
    },
    AdaptiveAvgPool2d {
        input: TensorId,
    },
    ConcatChannels {
        a: TensorId,
        b: TensorId,
    },
    SpatialMean {
        input: TensorId,
    },
    ConcatVecs {
        parts: Vec<TensorId>,
    },
    SliceVec {
        input: TensorId,
        start: usize,
    },
    Gather1 {
        input: TensorId,
        index: usize,
    },
    MulScalar {
        input: TensorId,
        scalar: TensorId,
    },
    Scale {
        input: TensorId,
        factor: f64,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sum {
        input: TensorId,
    },
    BceWithLogits {
        logit: TensorId,
        target: f64,
    },
    CrossEntropyLogits {
        logits: TensorId,
        target: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Confined to a single execution context.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum in ascending value order. Makes reductions over an unordered multiset
/// of values independent of the order they arrive in, which keeps score
/// softmaxes bit-identical under proposal permutations.
fn ordered_sum(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in reduction"));
    v.iter().sum()
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

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer for `id`, if backward reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Record an input value. Parameters pass `requires_grad = true`; frozen
    /// features pass `false` and never receive a gradient buffer.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    // ── convolution ────────────────────────────────────────────────────

    /// 2-D cross-correlation (no kernel flip) with zero padding.
    ///
    /// input: C_in x H x W, weight: C_out x C_in x kH x kW, bias: C_out.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        if stride == 0 {
            return Err(OiaError::Invalid("conv2d stride must be >= 1".into()));
        }
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if x.rank() != 3 || w.rank() != 4 || b.rank() != 1 {
            return Err(OiaError::shape(
                "conv2d",
                format!(
                    "expected ranks 3/4/1, got {}/{}/{}",
                    x.rank(),
                    w.rank(),
                    b.rank()
                ),
            ));
        }
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, wc_in, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc_in != c_in {
            return Err(OiaError::shape(
                "conv2d",
                format!("input channels {c_in} != weight input channels {wc_in}"),
            ));
        }
        if b.shape()[0] != c_out {
            return Err(OiaError::shape(
                "conv2d",
                format!("bias length {} != output channels {c_out}", b.shape()[0]),
            ));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(OiaError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * padding, wd + 2 * padding),
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;

        let mut out = vec![0.0; c_out * oh * ow];
        conv2d_forward(
            x.values(),
            w.values(),
            b.values(),
            &mut out,
            ConvDims {
                c_in,
                h,
                w: wd,
                c_out,
                kh,
                kw,
                oh,
                ow,
                stride,
                padding,
            },
        );
        let rg = self.any_requires(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(vec![c_out, oh, ow], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Fully connected layer: out_j = sum_i weight[j,i] * input[i] + bias[j].
    pub fn linear(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if x.rank() != 1 || w.rank() != 2 || b.rank() != 1 {
            return Err(OiaError::shape(
                "linear",
                format!(
                    "expected ranks 1/2/1, got {}/{}/{}",
                    x.rank(),
                    w.rank(),
                    b.rank()
                ),
            ));
        }
        let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
        if x.shape()[0] != d_in {
            return Err(OiaError::shape(
                "linear",
                format!("input length {} != weight columns {d_in}", x.shape()[0]),
            ));
        }
        if b.shape()[0] != d_out {
            return Err(OiaError::shape(
                "linear",
                format!("bias length {} != weight rows {d_out}", b.shape()[0]),
            ));
        }
        let xv = x.values();
        let wv = w.values();
        let mut out = b.values().to_vec();
        for j in 0..d_out {
            let row = &wv[j * d_in..(j + 1) * d_in];
            let mut acc = 0.0;
            for i in 0..d_in {
                acc += row[i] * xv[i];
            }
            out[j] += acc;
        }
        let rg = self.any_requires(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(vec![d_out], out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    // ── elementwise ────────────────────────────────────────────────────

    /// max(0, x); the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let x = self.value(input);
        let out = Tensor::from_fn(x.shape(), |i| x.values()[i].max(0.0));
        let rg = self.nodes[input.0].requires_grad;
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        let x = self.value(input);
        let out = Tensor::from_fn(x.shape(), |i| sigmoid_scalar(x.values()[i]));
        let rg = self.nodes[input.0].requires_grad;
        self.push(out, Op::Sigmoid { input }, rg)
    }

    /// Softmax over a length-N vector with max subtraction. The normalizer is
    /// summed in value order so the result is invariant to input permutation.
    pub fn softmax(&mut self, input: TensorId) -> Result<TensorId> {
        let x = self.value(input);
        if x.rank() != 1 {
            return Err(OiaError::shape(
                "softmax",
                format!("expected a vector, got rank {}", x.rank()),
            ));
        }
        let xv = x.values();
        let m = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.iter().map(|v| (v - m).exp()).collect();
        let denom = ordered_sum(&exps);
        let out: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::Softmax { input },
            rg,
        ))
    }

    // ── pooling and reshaping ──────────────────────────────────────────

    /// Adaptive average pooling of a C x H x W tensor to C x out_h x out_w.
    /// Cell (i, j) averages input rows [floor(i*H/out_h), ceil((i+1)*H/out_h))
    /// and the analogous column window.
    pub fn adaptive_avg_pool2d(
        &mut self,
        input: TensorId,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId> {
        let x = self.value(input);
        if x.rank() != 3 {
            return Err(OiaError::shape(
                "adaptive_avg_pool2d",
                format!("expected rank 3, got {}", x.rank()),
            ));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(OiaError::shape(
                "adaptive_avg_pool2d",
                format!("output {out_h}x{out_w} invalid for input {h}x{w}"),
            ));
        }
        let xv = x.values();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for i in 0..out_h {
                let (r0, r1) = pool_window(i, h, out_h);
                for j in 0..out_w {
                    let (c0, c1) = pool_window(j, w, out_w);
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        let row = &xv[(ch * h + r) * w..(ch * h + r) * w + w];
                        for cc in c0..c1 {
                            acc += row[cc];
                        }
                    }
                    out[(ch * out_h + i) * out_w + j] =
                        acc / ((r1 - r0) as f64 * (c1 - c0) as f64);
                }
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![c, out_h, out_w], out)?,
            Op::AdaptiveAvgPool2d { input },
            rg,
        ))
    }

    /// Stack `a` on top of `b` along the channel axis.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.rank() != 3 || tb.rank() != 3 {
            return Err(OiaError::shape(
                "concat_channels",
                format!("expected rank 3 operands, got {}/{}", ta.rank(), tb.rank()),
            ));
        }
        if ta.shape()[1..] != tb.shape()[1..] {
            return Err(OiaError::shape(
                "concat_channels",
                format!(
                    "spatial dims differ: {:?} vs {:?}",
                    &ta.shape()[1..],
                    &tb.shape()[1..]
                ),
            ));
        }
        let (ca, cb) = (ta.shape()[0], tb.shape()[0]);
        let (h, w) = (ta.shape()[1], ta.shape()[2]);
        let mut out = Vec::with_capacity((ca + cb) * h * w);
        out.extend_from_slice(ta.values());
        out.extend_from_slice(tb.values());
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![ca + cb, h, w], out)?,
            Op::ConcatChannels { a, b },
            rg,
        ))
    }

    /// Mean over the spatial axes: C x H x W -> length-C vector.
    pub fn spatial_mean(&mut self, input: TensorId) -> Result<TensorId> {
        let x = self.value(input);
        if x.rank() != 3 {
            return Err(OiaError::shape(
                "spatial_mean",
                format!("expected rank 3, got {}", x.rank()),
            ));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hw = (h * w) as f64;
        let xv = x.values();
        let out: Vec<f64> = (0..c)
            .map(|ch| xv[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw)
            .collect();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![c], out)?,
            Op::SpatialMean { input },
            rg,
        ))
    }

    /// Concatenate vectors in order.
    pub fn concat_vecs(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(OiaError::Empty("operand list for concat_vecs"));
        }
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(OiaError::shape(
                    "concat_vecs",
                    format!("operand has rank {}", t.rank()),
                ));
            }
            out.extend_from_slice(t.values());
        }
        let rg = self.any_requires(parts);
        let n = out.len();
        Ok(self.push(
            Tensor::new(vec![n], out)?,
            Op::ConcatVecs {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Contiguous sub-vector [start, start + len).
    pub fn slice_vec(&mut self, input: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let x = self.value(input);
        if x.rank() != 1 {
            return Err(OiaError::shape(
                "slice_vec",
                format!("expected a vector, got rank {}", x.rank()),
            ));
        }
        if len == 0 || start + len > x.shape()[0] {
            return Err(OiaError::shape(
                "slice_vec",
                format!("range {start}..{} out of length {}", start + len, x.shape()[0]),
            ));
        }
        let out = x.values()[start..start + len].to_vec();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![len], out)?,
            Op::SliceVec { input, start },
            rg,
        ))
    }

    /// Pick a single element of a vector as a scalar.
    pub fn gather1(&mut self, input: TensorId, index: usize) -> Result<TensorId> {
        let x = self.value(input);
        if x.rank() != 1 || index >= x.shape()[0] {
            return Err(OiaError::shape(
                "gather1",
                format!("index {index} out of vector length {}", x.numel()),
            ));
        }
        let v = x.values()[index];
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(Tensor::scalar(v), Op::Gather1 { input, index }, rg))
    }

    /// Multiply a tensor elementwise by a scalar tensor (used to weight a
    /// selected object block by its score so the selector receives gradient).
    pub fn mul_scalar(&mut self, input: TensorId, scalar: TensorId) -> Result<TensorId> {
        let s = self.value(scalar);
        if s.numel() != 1 {
            return Err(OiaError::shape(
                "mul_scalar",
                format!("scalar operand has {} elements", s.numel()),
            ));
        }
        let sv = s.item();
        let x = self.value(input);
        let out = Tensor::from_fn(x.shape(), |i| x.values()[i] * sv);
        let rg = self.any_requires(&[input, scalar]);
        Ok(self.push(out, Op::MulScalar { input, scalar }, rg))
    }

    /// Multiply by a compile-time constant factor.
    pub fn scale(&mut self, input: TensorId, factor: f64) -> TensorId {
        let x = self.value(input);
        let out = Tensor::from_fn(x.shape(), |i| x.values()[i] * factor);
        let rg = self.nodes[input.0].requires_grad;
        self.push(out, Op::Scale { input, factor }, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() != tb.shape() {
            return Err(OiaError::shape(
                "add",
                format!("shapes differ: {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let tbv = tb.values();
        let out = Tensor::from_fn(ta.shape(), |i| ta.values()[i] + tbv[i]);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let x = self.value(input);
        let total: f64 = x.values().iter().sum();
        let rg = self.nodes[input.0].requires_grad;
        self.push(Tensor::scalar(total), Op::Sum { input }, rg)
    }

    // ── losses ─────────────────────────────────────────────────────────

    /// Binary cross entropy on a logit, in the log-sum-exp stable form:
    /// max(z, 0) - z*t + ln(1 + exp(-|z|)). Finite for every finite logit.
    pub fn bce_with_logits(&mut self, logit: TensorId, target: f64) -> Result<TensorId> {
        if target != 0.0 && target != 1.0 {
            return Err(OiaError::Invalid(format!(
                "bce_with_logits target must be 0 or 1, got {target}"
            )));
        }
        let z = self.value(logit);
        if z.numel() != 1 {
            return Err(OiaError::shape(
                "bce_with_logits",
                format!("logit must be scalar, got {} elements", z.numel()),
            ));
        }
        let zv = z.item();
        let loss = zv.max(0.0) - zv * target + (-zv.abs()).exp().ln_1p();
        let rg = self.nodes[logit.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logit, target },
            rg,
        ))
    }

    /// Negative log likelihood of `target` under softmax(logits), computed as
    /// logsumexp(z) - z[target].
    pub fn cross_entropy_logits(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let z = self.value(logits);
        if z.rank() != 1 || target >= z.shape()[0] {
            return Err(OiaError::Invalid(format!(
                "cross_entropy_logits target {target} out of range for {} logits",
                z.numel()
            )));
        }
        let zv = z.values();
        let m = zv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + zv.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - zv[target];
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyLogits { logits, target },
            rg,
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Seeds d(loss)/d(loss) = 1 and
    /// accumulates gradients into every `requires_grad` ancestor.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(OiaError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Accumulate `f(buf)` into the operand's gradient, skipping operands
        // that do not require grad (frozen features never get a buffer).
        macro_rules! acc {
            ($id:expr, $f:expr) => {{
                let id: TensorId = $id;
                if self.nodes[id.0].requires_grad {
                    let buf = grads[id.0]
                        .get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(buf.as_mut_slice());
                }
            }};
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let out = &self.nodes[i].value;
                let dims = ConvDims {
                    c_in: x.shape()[0],
                    h: x.shape()[1],
                    w: x.shape()[2],
                    c_out: w.shape()[0],
                    kh: w.shape()[2],
                    kw: w.shape()[3],
                    oh: out.shape()[1],
                    ow: out.shape()[2],
                    stride: *stride,
                    padding: *padding,
                };
                acc!(*bias, |db: &mut [f64]| conv2d_backward_bias(g, db, &dims));
                acc!(*weight, |dw: &mut [f64]| conv2d_backward_weight(
                    x.values(),
                    g,
                    dw,
                    &dims
                ));
                acc!(*input, |dx: &mut [f64]| conv2d_backward_input(
                    w.values(),
                    g,
                    dx,
                    &dims
                ));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
                acc!(*bias, |db: &mut [f64]| {
                    for j in 0..d_out {
                        db[j] += g[j];
                    }
                });
                acc!(*weight, |dw: &mut [f64]| {
                    for j in 0..d_out {
                        let gj = g[j];
                        let row = &mut dw[j * d_in..(j + 1) * d_in];
                        for i in 0..d_in {
                            row[i] += gj * x.values()[i];
                        }
                    }
                });
                acc!(*input, |dx: &mut [f64]| {
                    for j in 0..d_out {
                        let gj = g[j];
                        let row = &w.values()[j * d_in..(j + 1) * d_in];
                        for i in 0..d_in {
                            dx[i] += gj * row[i];
                        }
                    }
                });
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                acc!(*input, |dx: &mut [f64]| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        if x.values()[i] > 0.0 {
                            *d += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid { input } => {
                let y = &self.nodes[i].value;
                acc!(*input, |dx: &mut [f64]| {
                    for (j, d) in dx.iter_mut().enumerate() {
                        let s = y.values()[j];
                        *d += g[j] * s * (1.0 - s);
                    }
                });
            }
            Op::Softmax { input } => {
                let p = &self.nodes[i].value;
                let dot: f64 = g
                    .iter()
                    .zip(p.values())
                    .map(|(gi, pi)| gi * pi)
                    .sum();
                acc!(*input, |dx: &mut [f64]| {
                    for (j, d) in dx.iter_mut().enumerate() {
                        *d += p.values()[j] * (g[j] - dot);
                    }
                });
            }
            Op::AdaptiveAvgPool2d { input } => {
                let x = self.value(*input);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let out = &self.nodes[i].value;
                let (oh, ow) = (out.shape()[1], out.shape()[2]);
                acc!(*input, |dx: &mut [f64]| {
                    for ch in 0..c {
                        for oi in 0..oh {
                            let (r0, r1) = pool_window(oi, h, oh);
                            for oj in 0..ow {
                                let (c0, c1) = pool_window(oj, w, ow);
                                let share = g[(ch * oh + oi) * ow + oj]
                                    / ((r1 - r0) as f64 * (c1 - c0) as f64);
                                for r in r0..r1 {
                                    for cc in c0..c1 {
                                        dx[(ch * h + r) * w + cc] += share;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels { a, b } => {
                let na = self.value(*a).numel();
                acc!(*a, |da: &mut [f64]| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i];
                    }
                });
                acc!(*b, |db: &mut [f64]| {
                    for (i, d) in db.iter_mut().enumerate() {
                        *d += g[na + i];
                    }
                });
            }
            Op::SpatialMean { input } => {
                let x = self.value(*input);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let hw = (h * w) as f64;
                acc!(*input, |dx: &mut [f64]| {
                    for ch in 0..c {
                        let share = g[ch] / hw;
                        for d in &mut dx[ch * h * w..(ch + 1) * h * w] {
                            *d += share;
                        }
                    }
                });
            }
            Op::ConcatVecs { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc!(p, |dp: &mut [f64]| {
                        for (i, d) in dp.iter_mut().enumerate() {
                            *d += g[offset + i];
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceVec { input, start } => {
                acc!(*input, |dx: &mut [f64]| {
                    for (i, gi) in g.iter().enumerate() {
                        dx[start + i] += gi;
                    }
                });
            }
            Op::Gather1 { input, index } => {
                acc!(*input, |dx: &mut [f64]| dx[*index] += g[0]);
            }
            Op::MulScalar { input, scalar } => {
                let x = self.value(*input);
                let s = self.value(*scalar).item();
                acc!(*input, |dx: &mut [f64]| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * s;
                    }
                });
                acc!(*scalar, |ds: &mut [f64]| {
                    let mut acc = 0.0;
                    for (i, gi) in g.iter().enumerate() {
                        acc += gi * x.values()[i];
                    }
                    ds[0] += acc;
                });
            }
            Op::Scale { input, factor } => {
                acc!(*input, |dx: &mut [f64]| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * factor;
                    }
                });
            }
            Op::Add { a, b } => {
                acc!(*a, |da: &mut [f64]| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i];
                    }
                });
                acc!(*b, |db: &mut [f64]| {
                    for (i, d) in db.iter_mut().enumerate() {
                        *d += g[i];
                    }
                });
            }
            Op::Sum { input } => {
                acc!(*input, |dx: &mut [f64]| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::BceWithLogits { logit, target } => {
                let z = self.value(*logit).item();
                acc!(*logit, |dz: &mut [f64]| {
                    dz[0] += g[0] * (sigmoid_scalar(z) - target);
                });
            }
            Op::CrossEntropyLogits { logits, target } => {
                let z = self.value(*logits);
                let zv = z.values();
                let m = zv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = zv.iter().map(|v| (v - m).exp()).collect();
                let denom: f64 = exps.iter().sum();
                acc!(*logits, |dz: &mut [f64]| {
                    for (j, d) in dz.iter_mut().enumerate() {
                        let p = exps[j] / denom;
                        let indicator = if j == *target { 1.0 } else { 0.0 };
                        *d += g[0] * (p - indicator);
                    }
                });
            }
        }
    }
}

/// Window [lo, hi) of input cells pooled into output cell `i`.
fn pool_window(i: usize, input_len: usize, output_len: usize) -> (usize, usize) {
    let lo = i * input_len / output_len;
    let hi = ((i + 1) * input_len).div_ceil(output_len);
    (lo, hi)
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvDims {
    /// Valid output positions along one axis for kernel offset `k`:
    /// input index o*stride + k - padding must land in [0, in_len).
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.padding {
            0
        } else {
            (self.padding - k).div_ceil(s)
        };
        let hi_in = in_len + self.padding;
        let hi = if hi_in > k {
            ((hi_in - k - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Output widths below this use the patch-matrix kernels: with only a few
/// output columns per row, the row-sliced loops spend more time on slice
/// setup than on arithmetic.
const NARROW_OUTPUT_LIMIT: usize = 16;

/// Dot product with four independent accumulators so the additions do not
/// form one long dependency chain.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let chunks = a.len() / 4;
    let mut acc = [0.0f64; 4];
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut rest = 0.0;
    for j in chunks * 4..a.len() {
        rest += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

/// Receptive fields of all output cells, one row per cell in (ci, kh, kw)
/// order, zero-filled where the window hangs over the padding.
fn gather_patches(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let k = d.c_in * d.kh * d.kw;
    let mut cols = vec![0.0; d.oh * d.ow * k];
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let row = &mut cols[(oy * d.ow + ox) * k..(oy * d.ow + ox + 1) * k];
            for ci in 0..d.c_in {
                let x_plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                for ky in 0..d.kh {
                    let iy = oy * d.stride + ky;
                    if iy < d.padding || iy >= d.h + d.padding {
                        continue;
                    }
                    let x_row = &x_plane[(iy - d.padding) * d.w..(iy - d.padding + 1) * d.w];
                    for kx in 0..d.kw {
                        let ix = ox * d.stride + kx;
                        if ix >= d.padding && ix < d.w + d.padding {
                            row[(ci * d.kh + ky) * d.kw + kx] = x_row[ix - d.padding];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn conv2d_forward_narrow(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64], d: &ConvDims) {
    let k = d.c_in * d.kh * d.kw;
    let cells = d.oh * d.ow;
    let cols = gather_patches(x, d);
    for co in 0..d.c_out {
        let w_row = &w[co * k..(co + 1) * k];
        let out_plane = &mut out[co * cells..(co + 1) * cells];
        for (cell, o) in out_plane.iter_mut().enumerate() {
            *o = b[co] + dot(w_row, &cols[cell * k..(cell + 1) * k]);
        }
    }
}

fn conv2d_backward_weight_narrow(x: &[f64], g: &[f64], dw: &mut [f64], d: &ConvDims) {
    let k = d.c_in * d.kh * d.kw;
    let cells = d.oh * d.ow;
    let cols = gather_patches(x, d);
    for co in 0..d.c_out {
        let dw_row = &mut dw[co * k..(co + 1) * k];
        let g_plane = &g[co * cells..(co + 1) * cells];
        for (cell, &gv) in g_plane.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            for (dwv, pv) in dw_row.iter_mut().zip(&cols[cell * k..(cell + 1) * k]) {
                *dwv += gv * pv;
            }
        }
    }
}

fn conv2d_backward_input_narrow(w: &[f64], g: &[f64], dx: &mut [f64], d: &ConvDims) {
    let k = d.c_in * d.kh * d.kw;
    let cells = d.oh * d.ow;
    let mut patch = vec![0.0f64; k];
    for cell in 0..cells {
        patch.fill(0.0);
        let mut any = false;
        for co in 0..d.c_out {
            let gv = g[co * cells + cell];
            if gv == 0.0 {
                continue;
            }
            any = true;
            for (pv, wv) in patch.iter_mut().zip(&w[co * k..(co + 1) * k]) {
                *pv += gv * wv;
            }
        }
        if !any {
            continue;
        }
        // Scatter the accumulated patch gradient back to input cells
        // (reverse of gather_patches).
        let oy = cell / d.ow;
        let ox = cell % d.ow;
        for ci in 0..d.c_in {
            let dx_plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..d.kh {
                let iy = oy * d.stride + ky;
                if iy < d.padding || iy >= d.h + d.padding {
                    continue;
                }
                for kx in 0..d.kw {
                    let ix = ox * d.stride + kx;
                    if ix >= d.padding && ix < d.w + d.padding {
                        dx_plane[(iy - d.padding) * d.w + ix - d.padding] +=
                            patch[(ci * d.kh + ky) * d.kw + kx];
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64], d: ConvDims) {
    if d.ow < NARROW_OUTPUT_LIMIT {
        return conv2d_forward_narrow(x, w, b, out, &d);
    }
    for co in 0..d.c_out {
        let out_plane = &mut out[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        out_plane.fill(b[co]);
        for ci in 0..d.c_in {
            let x_plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for kh in 0..d.kh {
                let (oh_lo, oh_hi) = d.valid_range(kh, d.h, d.oh);
                for kw in 0..d.kw {
                    let wv = w[((co * d.c_in + ci) * d.kh + kh) * d.kw + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ow_lo, ow_hi) = d.valid_range(kw, d.w, d.ow);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * d.stride + kh - d.padding;
                        let x_row = &x_plane[ih * d.w..(ih + 1) * d.w];
                        let o_row = &mut out_plane[oh * d.ow + ow_lo..oh * d.ow + ow_hi];
                        let mut iw = ow_lo * d.stride + kw - d.padding;
                        for o in o_row.iter_mut() {
                            *o += wv * x_row[iw];
                            iw += d.stride;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_bias(g: &[f64], db: &mut [f64], d: &ConvDims) {
    for co in 0..d.c_out {
        db[co] += g[co * d.oh * d.ow..(co + 1) * d.oh * d.ow].iter().sum::<f64>();
    }
}

fn conv2d_backward_weight(x: &[f64], g: &[f64], dw: &mut [f64], d: &ConvDims) {
    if d.ow < NARROW_OUTPUT_LIMIT {
        return conv2d_backward_weight_narrow(x, g, dw, d);
    }
    for co in 0..d.c_out {
        let g_plane = &g[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        for ci in 0..d.c_in {
            let x_plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for kh in 0..d.kh {
                let (oh_lo, oh_hi) = d.valid_range(kh, d.h, d.oh);
                for kw in 0..d.kw {
                    let (ow_lo, ow_hi) = d.valid_range(kw, d.w, d.ow);
                    let mut acc = 0.0;
                    for oh in oh_lo..oh_hi {
                        let ih = oh * d.stride + kh - d.padding;
                        let x_row = &x_plane[ih * d.w..(ih + 1) * d.w];
                        let g_row = &g_plane[oh * d.ow + ow_lo..oh * d.ow + ow_hi];
                        let mut iw = ow_lo * d.stride + kw - d.padding;
                        for gv in g_row.iter() {
                            acc += gv * x_row[iw];
                            iw += d.stride;
                        }
                    }
                    dw[((co * d.c_in + ci) * d.kh + kh) * d.kw + kw] += acc;
                }
            }
        }
    }
}

fn conv2d_backward_input(w: &[f64], g: &[f64], dx: &mut [f64], d: &ConvDims) {
    if d.ow < NARROW_OUTPUT_LIMIT {
        return conv2d_backward_input_narrow(w, g, dx, d);
    }
    for co in 0..d.c_out {
        let g_plane = &g[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        for ci in 0..d.c_in {
            let dx_plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for kh in 0..d.kh {
                let (oh_lo, oh_hi) = d.valid_range(kh, d.h, d.oh);
                for kw in 0..d.kw {
                    let wv = w[((co * d.c_in + ci) * d.kh + kh) * d.kw + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ow_lo, ow_hi) = d.valid_range(kw, d.w, d.ow);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * d.stride + kh - d.padding;
                        let dx_row = &mut dx_plane[ih * d.w..(ih + 1) * d.w];
                        let g_row = &g_plane[oh * d.ow + ow_lo..oh * d.ow + ow_hi];
                        let mut iw = ow_lo * d.stride + kw - d.padding;
                        for gv in g_row.iter() {
                            dx_row[iw] += wv * gv;
                            iw += d.stride;
                        }
                    }
                }
            }
        }
    }
}
