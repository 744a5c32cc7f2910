use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeometry};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
///
/// Receives the gradient of the loss w.r.t. the op's output and returns one
/// entry per registered input (in registration order); `None` means "no
/// contribution".
pub trait BackwardRule<F: Real>: Send {
    fn backward(
        &self,
        grad_output: &[F],
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
    ) -> Vec<Option<Vec<F>>>;
}

/// Running statistics owned by a batch-norm layer, updated in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<F = f64> {
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub momentum: f64,
    pub eps: f64,
}

impl<F: Real> BatchNormStats<F> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            momentum,
            eps,
        }
    }

    pub fn cast<G: Real>(&self) -> BatchNormStats<G> {
        let conv = |v: &[F]| v.iter().map(|x| G::of(x.as_f64())).collect();
        BatchNormStats {
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

enum Op<F: Real> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `a * b^T`
    MatMulT {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeometry,
        batch: usize,
        out_channels: usize,
        cols: Vec<F>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// `b` (shape `[C]`) broadcast along dim 1 of `a`.
    AddChannel {
        a: NodeId,
        b: NodeId,
        channels: usize,
        inner: usize,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    ScalarMul {
        a: NodeId,
        c: F,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        training: bool,
        channels: usize,
        spatial: usize,
    },
    AvgPool {
        a: NodeId,
        k: usize,
    },
    Flatten(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Vec<F>,
        labels: Vec<usize>,
    },
    Custom {
        inputs: Vec<NodeId>,
        rule: Box<dyn BackwardRule<F>>,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    grad: Option<Vec<F>>,
}

/// Dynamic tape of tensor operations.
pub struct Graph<F: Real = f64> {
    nodes: Vec<Node<F>>,
    validate: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into<F: Real>(slot: &mut Option<Vec<F>>, g: Vec<F>) {
    match slot {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        None => *slot = Some(g),
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            validate: false,
        }
    }

    /// In validation mode every op checks its output for NaN/Inf.
    pub fn with_validation(mut self, on: bool) -> Self {
        self.validate = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients are tracked iff the tensor has
    /// `requires_grad` set. Any gradient already on the tensor is dropped.
    pub fn leaf(&mut self, mut tensor: Tensor<F>) -> NodeId {
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    /// Records a trainable input.
    pub fn param(&mut self, tensor: Tensor<F>) -> NodeId {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> NodeId {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of the last loss(es) w.r.t. a node; `None` if no
    /// gradient reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient as a dense vector, zero-filled when nothing reached the node.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<F> {
        match self.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![F::zero(); self.value(id).numel()],
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Adds this graph's gradient for `id` into `tensor.grad`.
    pub fn write_grad(&self, id: NodeId, tensor: &mut Tensor<F>) -> Result<()> {
        tensor.accumulate_grad(&self.grad_or_zeros(id))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<F>,
        operands: &[NodeId],
        op: Op<F>,
    ) -> Result<NodeId> {
        if self.validate && data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = operands.iter().any(|&id| self.rg(id));
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        Ok(self.push(value, op))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.record("matmul", vec![m, n], out, &[a, b], Op::MatMul { a, b, m, k, n })
    }

    /// `a[m,k] * b[n,k]^T`, the product used by linear layers with
    /// `[out, in]` weights.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("matmul_t", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![F::zero(); m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.record("matmul_t", vec![m, n], out, &[a, b], Op::MatMulT { a, b, m, k, n })
    }

    /// 2-D convolution of `[B,C,H,W]` input with `[O,C,kh,kw]` kernel.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(mismatch("conv2d", &si, &sk));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        let (batch, channels, height, width) = (si[0], si[1], si[2], si[3]);
        let (out_channels, kh, kw) = (sk[0], sk[2], sk[3]);
        if height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(mismatch("conv2d", &si, &sk));
        }
        let geom = ConvGeometry {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        };
        let (r, p) = (geom.rows(), geom.cols());
        let image_len = channels * height * width;
        let mut cols = vec![F::zero(); batch * r * p];
        let mut out = vec![F::zero(); batch * out_channels * p];
        {
            let x = self.value(input).data();
            let w = self.value(kernel).data();
            for b in 0..batch {
                let cb = &mut cols[b * r * p..(b + 1) * r * p];
                im2col(&geom, &x[b * image_len..(b + 1) * image_len], cb);
                gemm_nn(
                    out_channels,
                    r,
                    p,
                    w,
                    cb,
                    &mut out[b * out_channels * p..(b + 1) * out_channels * p],
                );
            }
        }
        self.record(
            "conv2d",
            vec![batch, out_channels, geom.out_h, geom.out_w],
            out,
            &[input, kernel],
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                out_channels,
                cols,
            },
        )
    }

    /// Elementwise sum. `b` may also be a `[C]` vector broadcast along dim 1
    /// of `a` (bias addition for `[B,C]` and `[B,C,H,W]` activations).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect();
            return self.record("add", sa, data, &[a, b], Op::Add { a, b });
        }
        if sb.len() == 1 && sa.len() >= 2 && sa[1] == sb[0] {
            let channels = sb[0];
            let inner: usize = sa[2..].iter().product();
            let bias = self.value(b).data();
            let data = self
                .value(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bias[(i / inner) % channels])
                .collect();
            return self.record(
                "add",
                sa,
                data,
                &[a, b],
                Op::AddChannel {
                    a,
                    b,
                    channels,
                    inner,
                },
            );
        }
        Err(mismatch("add", &sa, &sb))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("mul", sa, sb));
        }
        let shape = sa.to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.record("mul", shape, data, &[a, b], Op::Mul { a, b })
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: F) -> Result<NodeId> {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * c).collect();
        let shape = v.shape().to_vec();
        self.record("scalar_mul", shape, data, &[a], Op::ScalarMul { a, c })
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: NodeId,
        f: impl Fn(F) -> F,
        op: Op<F>,
    ) -> Result<NodeId> {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        self.record(name, shape, data, &[a], op)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("relu", a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let mut acc = F::zero();
        for &x in self.value(a).data() {
            acc += x;
        }
        self.record("sum", vec![], vec![acc], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let mut acc = F::zero();
        for &x in v.data() {
            acc += x;
        }
        let n = F::of(v.numel() as f64);
        self.record("mean", vec![], vec![acc / n], &[a], Op::Mean(a))
    }

    /// Batch normalization over `[B,C,H,W]` (or `[B,C]`) input.
    ///
    /// Training mode normalizes with batch statistics (biased variance) and
    /// updates `stats` with the unbiased variance; eval mode uses `stats`.
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut BatchNormStats<F>,
        training: bool,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(mismatch("batchnorm2d", &sx, self.shape(gamma)));
        }
        let (batch, channels) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        for id in [gamma, beta] {
            if self.shape(id) != [channels] {
                return Err(mismatch("batchnorm2d", &sx, self.shape(id)));
            }
        }
        if stats.running_mean.len() != channels || stats.running_var.len() != channels {
            return Err(mismatch(
                "batchnorm2d",
                &sx,
                &[stats.running_mean.len()],
            ));
        }
        let count = batch * spatial;
        if training && count < 2 {
            return Err(TensorError::InvalidArgument {
                op: "batchnorm2d",
                reason: "training mode needs more than one value per channel".into(),
            });
        }
        let eps = F::of(stats.eps);
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let idx = |b: usize, c: usize, s: usize| (b * channels + c) * spatial + s;

        let mut inv_std = vec![F::zero(); channels];
        let mut shift = vec![F::zero(); channels];
        if training {
            let n = F::of(count as f64);
            let m = F::of(stats.momentum);
            for c in 0..channels {
                let mut sum = F::zero();
                for b in 0..batch {
                    for s in 0..spatial {
                        sum += xd[idx(b, c, s)];
                    }
                }
                let mu = sum / n;
                let mut sq = F::zero();
                for b in 0..batch {
                    for s in 0..spatial {
                        let d = xd[idx(b, c, s)] - mu;
                        sq += d * d;
                    }
                }
                let var = sq / n;
                shift[c] = mu;
                inv_std[c] = F::one() / (var + eps).sqrt();
                let unbiased = sq / F::of((count - 1) as f64);
                stats.running_mean[c] = (F::one() - m) * stats.running_mean[c] + m * mu;
                stats.running_var[c] = (F::one() - m) * stats.running_var[c] + m * unbiased;
            }
        } else {
            for c in 0..channels {
                shift[c] = stats.running_mean[c];
                inv_std[c] = F::one() / (stats.running_var[c] + eps).sqrt();
            }
        }
        let mut xhat = vec![F::zero(); xd.len()];
        let mut out = vec![F::zero(); xd.len()];
        for b in 0..batch {
            for c in 0..channels {
                for s in 0..spatial {
                    let i = idx(b, c, s);
                    xhat[i] = (xd[i] - shift[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        self.record(
            "batchnorm2d",
            sx,
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
                channels,
                spatial,
            },
        )
    }

    /// Non-overlapping `k×k` average pooling over `[B,C,H,W]`.
    pub fn avgpool2d(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(mismatch("avgpool2d", &s, &[k, k]));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let scale = F::one() / F::of((k * k) as f64);
        let x = self.value(a).data();
        let mut out = vec![F::zero(); bc * oh * ow];
        for p in 0..bc {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = F::zero();
                    for di in 0..k {
                        for dj in 0..k {
                            acc += x[(p * h + i * k + di) * w + j * k + dj];
                        }
                    }
                    out[(p * oh + i) * ow + j] = acc * scale;
                }
            }
        }
        self.record(
            "avgpool2d",
            vec![s[0], s[1], oh, ow],
            out,
            &[a],
            Op::AvgPool { a, k },
        )
    }

    /// Collapses all dims after the first: `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.is_empty() {
            return Err(mismatch("flatten", s, &[]));
        }
        let shape = vec![s[0], s[1..].iter().product()];
        let data = self.value(a).data().to_vec();
        self.record("flatten", shape, data, &[a], Op::Flatten(a))
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(mismatch("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                reason: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![F::zero(); z.len()];
        let mut total = F::zero();
        for b in 0..batch {
            let row = &z[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (p, &v) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            for p in &mut probs[b * classes..(b + 1) * classes] {
                *p = *p / denom;
            }
            total += denom.ln() + max - row[labels[b]];
        }
        let loss = total / F::of(batch as f64);
        self.record(
            "softmax_cross_entropy",
            vec![],
            vec![loss],
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Records an op whose value was computed by the caller and whose gradient
    /// is supplied by `rule`.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[NodeId],
        value: Tensor<F>,
        rule: Box<dyn BackwardRule<F>>,
    ) -> Result<NodeId> {
        let shape = value.shape().to_vec();
        let data = value.into_data();
        self.record(
            name,
            shape,
            data,
            inputs,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients add onto whatever earlier
    /// calls left behind until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].value.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                if node.value.requires_grad {
                    add_into(&mut node.grad, g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let mut send = |id: NodeId, contribution: Vec<F>| {
            if self.rg(id) {
                add_into(&mut grads[id.0], contribution);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm_nt(m, n, k, g, val(b), &mut da);
                    send(a, da);
                }
                if self.rg(b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm_tn(k, m, n, val(a), g, &mut db);
                    send(b, db);
                }
            }
            &Op::MatMulT { a, b, m, k, n } => {
                if self.rg(a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm_nn(m, n, k, g, val(b), &mut da);
                    send(a, da);
                }
                if self.rg(b) {
                    let mut db = vec![F::zero(); n * k];
                    gemm_tn(n, m, k, g, val(a), &mut db);
                    send(b, db);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                out_channels,
                cols,
            } => {
                let (r, p, oc) = (geom.rows(), geom.cols(), *out_channels);
                let image_len = geom.channels * geom.height * geom.width;
                if self.rg(*kernel) {
                    let mut dk = vec![F::zero(); oc * r];
                    for b in 0..*batch {
                        gemm_nt(
                            oc,
                            p,
                            r,
                            &g[b * oc * p..(b + 1) * oc * p],
                            &cols[b * r * p..(b + 1) * r * p],
                            &mut dk,
                        );
                    }
                    send(*kernel, dk);
                }
                if self.rg(*input) {
                    let w = val(*kernel);
                    let mut dx = vec![F::zero(); batch * image_len];
                    let mut dcols = vec![F::zero(); r * p];
                    for b in 0..*batch {
                        dcols.fill(F::zero());
                        gemm_tn(r, oc, p, w, &g[b * oc * p..(b + 1) * oc * p], &mut dcols);
                        col2im(geom, &dcols, &mut dx[b * image_len..(b + 1) * image_len]);
                    }
                    send(*input, dx);
                }
            }
            &Op::Add { a, b } => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            &Op::AddChannel {
                a,
                b,
                channels,
                inner,
            } => {
                send(a, g.to_vec());
                if self.rg(b) {
                    let mut db = vec![F::zero(); channels];
                    for (i, &x) in g.iter().enumerate() {
                        db[(i / inner) % channels] += x;
                    }
                    send(b, db);
                }
            }
            &Op::Mul { a, b } => {
                if self.rg(a) {
                    send(a, g.iter().zip(val(b)).map(|(&d, &y)| d * y).collect());
                }
                if self.rg(b) {
                    send(b, g.iter().zip(val(a)).map(|(&d, &x)| d * x).collect());
                }
            }
            &Op::ScalarMul { a, c } => send(a, g.iter().map(|&d| d * c).collect()),
            &Op::Relu(a) => send(
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(&d, &x)| if x > F::zero() { d } else { F::zero() })
                    .collect(),
            ),
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                send(
                    a,
                    g.iter()
                        .zip(y)
                        .map(|(&d, &s)| d * s * (F::one() - s))
                        .collect(),
                )
            }
            &Op::Square(a) => {
                let two = F::of(2.0);
                send(a, g.iter().zip(val(a)).map(|(&d, &x)| two * x * d).collect())
            }
            &Op::Sum(a) => send(a, vec![g[0]; self.nodes[a.0].value.numel()]),
            &Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                send(a, vec![g[0] / F::of(n as f64); n])
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
                channels,
                spatial,
            } => {
                let (c_n, s_n) = (*channels, *spatial);
                let batch = g.len() / (c_n * s_n);
                let idx = |b: usize, c: usize, s: usize| (b * c_n + c) * s_n + s;
                let mut dgamma = vec![F::zero(); c_n];
                let mut dbeta = vec![F::zero(); c_n];
                for b in 0..batch {
                    for c in 0..c_n {
                        for s in 0..s_n {
                            let i = idx(b, c, s);
                            dbeta[c] += g[i];
                            dgamma[c] += g[i] * xhat[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let gam = val(*gamma);
                    let mut dx = vec![F::zero(); g.len()];
                    let n = F::of((batch * s_n) as f64);
                    for c in 0..c_n {
                        let scale = gam[c] * inv_std[c];
                        let (mean_g, mean_gx) = if *training {
                            (dbeta[c] / n, dgamma[c] / n)
                        } else {
                            (F::zero(), F::zero())
                        };
                        for b in 0..batch {
                            for s in 0..s_n {
                                let i = idx(b, c, s);
                                dx[i] = scale * (g[i] - mean_g - xhat[i] * mean_gx);
                            }
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            &Op::AvgPool { a, k } => {
                let s = self.nodes[a.0].value.shape();
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / k, w / k);
                let scale = F::one() / F::of((k * k) as f64);
                let mut dx = vec![F::zero(); bc * h * w];
                for p in 0..bc {
                    for i in 0..oh {
                        for j in 0..ow {
                            let d = g[(p * oh + i) * ow + j] * scale;
                            for di in 0..k {
                                for dj in 0..k {
                                    dx[(p * h + i * k + di) * w + j * k + dj] += d;
                                }
                            }
                        }
                    }
                }
                send(a, dx);
            }
            &Op::Flatten(a) => send(a, g.to_vec()),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / F::of(batch as f64);
                let mut dz: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (b, &y) in labels.iter().enumerate() {
                    dz[b * classes + y] -= scale;
                }
                send(*logits, dz);
            }
            Op::Custom { inputs, rule } => {
                let operands: Vec<&Tensor<F>> =
                    inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                let out = rule.backward(g, &operands, &node.value);
                for (&id, contribution) in inputs.iter().zip(out) {
                    if let Some(c) = contribution {
                        send(id, c);
                    }
                }
            }
        }
    }
}
