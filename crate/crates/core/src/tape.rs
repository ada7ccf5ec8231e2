//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Tape`] is an append-only arena of nodes. Forward calls record the op,
//! its operand handles, and the computed values; [`Tape::backward`] replays
//! the arena in reverse, accumulating gradients into every node reachable
//! from a tracked leaf. Tapes are cheap and meant to be dropped after each
//! optimization step; nothing persists across steps.
//!
//! All primitives operate on contiguous row-major `f64` buffers. Convolution
//! is lowered to an image-to-column gather plus one dgemm per sample.

use crate::linalg::{gemm, row_major, transposed};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val(usize);

/// Op discriminant, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BnTrain,
    BnEval,
    Linear,
    Relu,
    Sigmoid,
    Concat,
    Gap,
    Add,
    Mul,
    Scale,
    RowScale,
    TakeRows,
    Sum,
    Mean,
    Bce,
}

enum Op {
    Leaf,
    /// `cols` holds the per-sample im2col buffers, kept only when the filter
    /// gradient will be needed.
    Conv2d { x: Val, w: Val, stride: usize, pad: usize, cols: Vec<f64> },
    BnTrain { x: Val, scale: Val, shift: Val, mean: Vec<f64>, var: Vec<f64>, invstd: Vec<f64> },
    BnEval { x: Val, scale: Val, shift: Val, mean: Vec<f64>, invstd: Vec<f64> },
    Linear { x: Val, w: Val, b: Val },
    Relu { x: Val },
    Sigmoid { x: Val },
    Concat { parts: Vec<Val> },
    Gap { x: Val },
    Add { a: Val, b: Val },
    Mul { a: Val, b: Val },
    Scale { x: Val, c: f64 },
    RowScale { x: Val, s: Vec<f64> },
    TakeRows { x: Val, idx: Vec<usize> },
    Sum { x: Val },
    Mean { x: Val },
    Bce { p: Val, target: Vec<f64>, weight: Vec<f64>, eps: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BnTrain { .. } => OpKind::BnTrain,
            Op::BnEval { .. } => OpKind::BnEval,
            Op::Linear { .. } => OpKind::Linear,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Concat { .. } => OpKind::Concat,
            Op::Gap { .. } => OpKind::Gap,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::RowScale { .. } => OpKind::RowScale,
            Op::TakeRows { .. } => OpKind::TakeRows,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Bce { .. } => OpKind::Bce,
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

/// Append-only computation record; one per optimization step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Corrupt the backward rule of every `kind` op on this tape (the input
    /// gradients it produces are scaled by 1.5). Diagnostic hook used to
    /// prove the gradient checker catches broken rules.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn fault_factor(&self, kind: OpKind) -> f64 {
        if self.fault == Some(kind) { 1.5 } else { 1.0 }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Val {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, shape, data, needs_grad });
        self.grads.push(Vec::new());
        Val(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor, needs_grad: bool) -> Val {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), needs_grad)
    }

    pub fn leaf_owned(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Val {
        self.push(Op::Leaf, shape, data, needs_grad)
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// The single value of a scalar node.
    pub fn value(&self, v: Val) -> f64 {
        assert_eq!(self.nodes[v.0].data.len(), 1, "value() on non-scalar node");
        self.nodes[v.0].data[0]
    }

    pub fn needs_grad(&self, v: Val) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient accumulated by the last `backward` call, if any reached `v`.
    pub fn grad(&self, v: Val) -> Option<&[f64]> {
        let g = &self.grads[v.0];
        if g.is_empty() { None } else { Some(g) }
    }

    /// Batch statistics (mean, biased variance) captured by a training-mode
    /// batch-norm node; used by the caller to update running estimates.
    pub fn batch_stats(&self, v: Val) -> (&[f64], &[f64]) {
        match &self.nodes[v.0].op {
            Op::BnTrain { mean, var, .. } => (mean, var),
            _ => panic!("batch_stats() on a non-batchnorm node"),
        }
    }

    fn any_needs_grad(&self, vals: &[Val]) -> bool {
        vals.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---------------------------------------------------------------- ops --

    /// 2-D convolution, no bias. `x`: `[N, Cin, H, W]`, `w`: `[Cout, Cin, Kh, Kw]`.
    pub fn conv2d(&mut self, x: Val, w: Val, stride: usize, pad: usize) -> Val {
        assert!(stride >= 1, "conv2d: stride must be >= 1");
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be 4-d, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d: weight must be 4-d, got {ws:?}");
        assert_eq!(
            xs[1], ws[1],
            "conv2d: input channels {} do not match weight channels {}",
            xs[1], ws[1]
        );
        let (n, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(
            h + 2 * pad >= kh && wdt + 2 * pad >= kw,
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            wdt + 2 * pad
        );
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wdt + 2 * pad - kw) / stride + 1;
        let k = cin * kh * kw;
        let s = oh * ow;

        let mut cols = vec![0.0; n * k * s];
        im2col(self.data(x), n, cin, h, wdt, kh, kw, stride, pad, oh, ow, &mut cols);

        let mut y = vec![0.0; n * cout * s];
        let wdata = self.data(w);
        for i in 0..n {
            gemm(
                cout,
                k,
                s,
                1.0,
                wdata,
                row_major(k),
                &cols[i * k * s..(i + 1) * k * s],
                row_major(s),
                0.0,
                &mut y[i * cout * s..(i + 1) * cout * s],
                row_major(s),
            );
        }

        let needs = self.any_needs_grad(&[x, w]);
        let keep_cols = if self.nodes[w.0].needs_grad { cols } else { Vec::new() };
        self.push(Op::Conv2d { x, w, stride, pad, cols: keep_cols }, vec![n, cout, oh, ow], y, needs)
    }

    /// Batch norm in training mode: normalizes with batch statistics.
    /// `x`: `[N, C, H, W]`; `scale`, `shift`: `[C]`.
    pub fn batchnorm_train(&mut self, x: Val, scale: Val, shift: Val, eps: f64) -> Val {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "batchnorm: input must be 4-d, got {xs:?}");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(self.shape(scale), &[c], "batchnorm: scale must be [{c}]");
        assert_eq!(self.shape(shift), &[c], "batchnorm: shift must be [{c}]");
        let m = (n * h * w) as f64;
        assert!(n * h * w > 1, "batchnorm: needs more than one value per channel");

        let xd = self.data(x);
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * plane;
                for v in &xd[base..base + plane] {
                    sum += v;
                }
            }
            let mu = sum / m;
            let mut sq = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * plane;
                for v in &xd[base..base + plane] {
                    let d = v - mu;
                    sq += d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = sq / m;
        }
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let sc = self.data(scale);
        let sh = self.data(shift);
        let mut y = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let a = sc[ch] * invstd[ch];
                let b = sh[ch] - mean[ch] * a;
                for j in base..base + plane {
                    y[j] = a * xd[j] + b;
                }
            }
        }

        let needs = self.any_needs_grad(&[x, scale, shift]);
        self.push(
            Op::BnTrain { x, scale, shift, mean, var, invstd },
            xs,
            y,
            needs,
        )
    }

    /// Batch norm in eval mode: normalizes with the provided running stats
    /// (treated as constants). Differentiable in `x`, `scale`, `shift`.
    pub fn batchnorm_eval(
        &mut self,
        x: Val,
        scale: Val,
        shift: Val,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Val {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "batchnorm: input must be 4-d, got {xs:?}");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(self.shape(scale), &[c], "batchnorm: scale must be [{c}]");
        assert_eq!(self.shape(shift), &[c], "batchnorm: shift must be [{c}]");
        assert_eq!(running_mean.len(), c, "batchnorm: running mean must be [{c}]");
        assert_eq!(running_var.len(), c, "batchnorm: running var must be [{c}]");
        let invstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let xd = self.data(x);
        let sc = self.data(scale);
        let sh = self.data(shift);
        let plane = h * w;
        let mut y = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let a = sc[ch] * invstd[ch];
                let b = sh[ch] - running_mean[ch] * a;
                for j in base..base + plane {
                    y[j] = a * xd[j] + b;
                }
            }
        }

        let needs = self.any_needs_grad(&[x, scale, shift]);
        self.push(
            Op::BnEval { x, scale, shift, mean: running_mean.to_vec(), invstd },
            xs,
            y,
            needs,
        )
    }

    /// Fully connected layer: `x`: `[N, I]`, `w`: `[O, I]`, `b`: `[O]` → `[N, O]`.
    pub fn linear(&mut self, x: Val, w: Val, b: Val) -> Val {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear: input must be 2-d, got {xs:?}");
        assert_eq!(ws.len(), 2, "linear: weight must be 2-d, got {ws:?}");
        assert_eq!(
            xs[1], ws[1],
            "linear: input width {} does not match weight width {}",
            xs[1], ws[1]
        );
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        assert_eq!(self.shape(b), &[o], "linear: bias must be [{o}]");

        let mut y = vec![0.0; n * o];
        gemm(
            n,
            i,
            o,
            1.0,
            self.data(x),
            row_major(i),
            self.data(w),
            transposed(i),
            0.0,
            &mut y,
            row_major(o),
        );
        let bd = self.data(b);
        for row in y.chunks_exact_mut(o) {
            for (v, bb) in row.iter_mut().zip(bd) {
                *v += bb;
            }
        }

        let needs = self.any_needs_grad(&[x, w, b]);
        self.push(Op::Linear { x, w, b }, vec![n, o], y, needs)
    }

    pub fn relu(&mut self, x: Val) -> Val {
        let y: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let needs = self.nodes[x.0].needs_grad;
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu { x }, shape, y, needs)
    }

    pub fn sigmoid(&mut self, x: Val) -> Val {
        let y: Vec<f64> = self.data(x).iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let needs = self.nodes[x.0].needs_grad;
        let shape = self.shape(x).to_vec();
        self.push(Op::Sigmoid { x }, shape, y, needs)
    }

    /// Concatenate 2-d tensors along the feature axis: `[N, F_i]` → `[N, ΣF]`.
    pub fn concat_cols(&mut self, parts: &[Val]) -> Val {
        assert!(!parts.is_empty(), "concat: no inputs");
        let n = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), 2, "concat: inputs must be 2-d, got {s:?}");
            assert_eq!(s[0], n, "concat: row mismatch {} vs {n}", s[0]);
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut y = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.data(p);
            for r in 0..n {
                y[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let needs = self.any_needs_grad(parts);
        self.push(Op::Concat { parts: parts.to_vec() }, vec![n, total], y, needs)
    }

    /// Global average pool: `[N, C, H, W]` → `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Val) -> Val {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "global_avg_pool: input must be 4-d, got {xs:?}");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let xd = self.data(x);
        let mut y = vec![0.0; n * c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                y[i * c + ch] = xd[base..base + plane].iter().sum::<f64>() / plane as f64;
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::Gap { x }, vec![n, c], y, needs)
    }

    pub fn add(&mut self, a: Val, b: Val) -> Val {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "add: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let y: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, z)| x + z).collect();
        let needs = self.any_needs_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(Op::Add { a, b }, shape, y, needs)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Val {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "mul: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let y: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, z)| x * z).collect();
        let needs = self.any_needs_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul { a, b }, shape, y, needs)
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, x: Val, c: f64) -> Val {
        let y: Vec<f64> = self.data(x).iter().map(|v| c * v).collect();
        let needs = self.nodes[x.0].needs_grad;
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale { x, c }, shape, y, needs)
    }

    /// Scale each row of `[N, F]` by the constant `s[n]`.
    pub fn row_scale(&mut self, x: Val, s: &[f64]) -> Val {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2, "row_scale: input must be 2-d, got {xs:?}");
        assert_eq!(s.len(), xs[0], "row_scale: {} factors for {} rows", s.len(), xs[0]);
        let f = xs[1];
        let xd = self.data(x);
        let mut y = vec![0.0; xd.len()];
        for (r, &sv) in s.iter().enumerate() {
            for j in 0..f {
                y[r * f + j] = sv * xd[r * f + j];
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::RowScale { x, s: s.to_vec() }, xs, y, needs)
    }

    /// Gather rows of `[N, F]` by index (rows may repeat): → `[len(idx), F]`.
    pub fn take_rows(&mut self, x: Val, idx: &[usize]) -> Val {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2, "take_rows: input must be 2-d, got {xs:?}");
        let (n, f) = (xs[0], xs[1]);
        assert!(idx.iter().all(|&i| i < n), "take_rows: index out of range (n={n})");
        let xd = self.data(x);
        let mut y = vec![0.0; idx.len() * f];
        for (r, &i) in idx.iter().enumerate() {
            y[r * f..(r + 1) * f].copy_from_slice(&xd[i * f..(i + 1) * f]);
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::TakeRows { x, idx: idx.to_vec() }, vec![idx.len(), f], y, needs)
    }

    pub fn sum(&mut self, x: Val) -> Val {
        let y = self.data(x).iter().sum::<f64>();
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::Sum { x }, vec![1], vec![y], needs)
    }

    pub fn mean(&mut self, x: Val) -> Val {
        let n = self.data(x).len();
        assert!(n > 0, "mean: empty input");
        let y = self.data(x).iter().sum::<f64>() / n as f64;
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::Mean { x }, vec![1], vec![y], needs)
    }

    /// Weighted binary cross-entropy on probabilities `p`: `[N, B]`.
    /// Probabilities are clipped to `[eps, 1-eps]` before the logs; elements
    /// are weighted by `weight`, summed over columns, and averaged over rows.
    /// Clipped elements contribute zero gradient.
    pub fn bce_weighted(&mut self, p: Val, target: &[f64], weight: &[f64], eps: f64) -> Val {
        let ps = self.shape(p).to_vec();
        assert_eq!(ps.len(), 2, "bce: probabilities must be 2-d, got {ps:?}");
        let numel = ps[0] * ps[1];
        assert_eq!(target.len(), numel, "bce: target length {} != {numel}", target.len());
        assert_eq!(weight.len(), numel, "bce: weight length {} != {numel}", weight.len());
        assert!(eps > 0.0 && eps < 0.5, "bce: eps must be in (0, 0.5)");
        let pd = self.data(p);
        let mut total = 0.0;
        for ((&pv, &t), &w) in pd.iter().zip(target).zip(weight) {
            let pc = pv.clamp(eps, 1.0 - eps);
            total -= w * (t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
        }
        total /= ps[0] as f64;
        let needs = self.nodes[p.0].needs_grad;
        self.push(
            Op::Bce { p, target: target.to_vec(), weight: weight.to_vec(), eps },
            vec![1],
            vec![total],
            needs,
        )
    }

    // ----------------------------------------------------------- backward --

    /// Accumulate gradients of the scalar `loss` into every tracked node.
    pub fn backward(&mut self, loss: Val) {
        assert_eq!(self.nodes[loss.0].data.len(), 1, "backward: loss must be scalar");
        assert!(
            self.nodes[loss.0].needs_grad,
            "backward: loss does not depend on any input marked for gradients"
        );
        if self.grads[loss.0].is_empty() {
            self.grads[loss.0] = vec![1.0];
        } else {
            self.grads[loss.0][0] += 1.0;
        }

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            let fault = self.fault_factor(self.nodes[i].op.kind());
            self.backprop_node(i, &g, fault);
            self.grads[i] = g;
        }
    }

    /// Propagate `g` (gradient at node `i`) into the node's inputs.
    fn backprop_node(&mut self, i: usize, g: &[f64], fault: f64) {
        // Split borrows: node metadata is read-only, gradients are mutated.
        let nodes = &self.nodes;
        let grads = &mut self.grads;

        let ensure = |grads: &mut Vec<Vec<f64>>, v: Val, len: usize| {
            if grads[v.0].is_empty() {
                grads[v.0] = vec![0.0; len];
            }
        };
        let tracked = |v: Val| nodes[v.0].needs_grad;

        match &nodes[i].op {
            Op::Leaf => {}

            Op::Conv2d { x, w, stride, pad, cols } => {
                let xs = &nodes[x.0].shape;
                let ws = &nodes[w.0].shape;
                let (n, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let (oh, ow) = (nodes[i].shape[2], nodes[i].shape[3]);
                let k = cin * kh * kw;
                let s = oh * ow;

                if tracked(*w) {
                    ensure(grads, *w, cout * k);
                    let dw = &mut grads[w.0];
                    for idx in 0..n {
                        gemm(
                            cout,
                            s,
                            k,
                            fault,
                            &g[idx * cout * s..(idx + 1) * cout * s],
                            row_major(s),
                            &cols[idx * k * s..(idx + 1) * k * s],
                            transposed(s),
                            1.0,
                            dw,
                            row_major(k),
                        );
                    }
                }
                if tracked(*x) {
                    let wdata = &nodes[w.0].data;
                    let mut dcols = vec![0.0; n * k * s];
                    for idx in 0..n {
                        gemm(
                            k,
                            cout,
                            s,
                            fault,
                            wdata,
                            transposed(k),
                            &g[idx * cout * s..(idx + 1) * cout * s],
                            row_major(s),
                            0.0,
                            &mut dcols[idx * k * s..(idx + 1) * k * s],
                            row_major(s),
                        );
                    }
                    ensure(grads, *x, n * cin * h * wdt);
                    col2im(&dcols, n, cin, h, wdt, kh, kw, *stride, *pad, oh, ow, &mut grads[x.0]);
                }
            }

            Op::BnTrain { x, scale, shift, mean, invstd, .. } => {
                let xs = &nodes[x.0].shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let m = (n * h * w) as f64;
                let xd = &nodes[x.0].data;
                let sc = &nodes[scale.0].data;

                // Per-channel reductions of the upstream gradient.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for idx in 0..n {
                    for ch in 0..c {
                        let base = (idx * c + ch) * plane;
                        let (mu, is) = (mean[ch], invstd[ch]);
                        let mut a = 0.0;
                        let mut b = 0.0;
                        for j in base..base + plane {
                            let xhat = (xd[j] - mu) * is;
                            a += g[j];
                            b += g[j] * xhat;
                        }
                        sum_g[ch] += a;
                        sum_gx[ch] += b;
                    }
                }

                if tracked(*scale) {
                    ensure(grads, *scale, c);
                    for ch in 0..c {
                        grads[scale.0][ch] += fault * sum_gx[ch];
                    }
                }
                if tracked(*shift) {
                    ensure(grads, *shift, c);
                    for ch in 0..c {
                        grads[shift.0][ch] += fault * sum_g[ch];
                    }
                }
                if tracked(*x) {
                    ensure(grads, *x, xd.len());
                    let dx = &mut grads[x.0];
                    for idx in 0..n {
                        for ch in 0..c {
                            let base = (idx * c + ch) * plane;
                            let (mu, is) = (mean[ch], invstd[ch]);
                            let a = sc[ch] * is * fault;
                            let mg = sum_g[ch] / m;
                            let mgx = sum_gx[ch] / m;
                            for j in base..base + plane {
                                let xhat = (xd[j] - mu) * is;
                                dx[j] += a * (g[j] - mg - xhat * mgx);
                            }
                        }
                    }
                }
            }

            Op::BnEval { x, scale, shift, mean, invstd } => {
                let xs = &nodes[x.0].shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let xd = &nodes[x.0].data;
                let sc = &nodes[scale.0].data;

                if tracked(*x) {
                    ensure(grads, *x, xd.len());
                    let dx = &mut grads[x.0];
                    for idx in 0..n {
                        for ch in 0..c {
                            let base = (idx * c + ch) * plane;
                            let a = sc[ch] * invstd[ch] * fault;
                            for j in base..base + plane {
                                dx[j] += a * g[j];
                            }
                        }
                    }
                }
                if tracked(*scale) {
                    ensure(grads, *scale, c);
                    for idx in 0..n {
                        for ch in 0..c {
                            let base = (idx * c + ch) * plane;
                            let (mu, is) = (mean[ch], invstd[ch]);
                            let mut acc = 0.0;
                            for j in base..base + plane {
                                acc += g[j] * (xd[j] - mu) * is;
                            }
                            grads[scale.0][ch] += fault * acc;
                        }
                    }
                }
                if tracked(*shift) {
                    ensure(grads, *shift, c);
                    for idx in 0..n {
                        for ch in 0..c {
                            let base = (idx * c + ch) * plane;
                            let mut acc = 0.0;
                            for j in base..base + plane {
                                acc += g[j];
                            }
                            grads[shift.0][ch] += fault * acc;
                        }
                    }
                }
            }

            Op::Linear { x, w, b } => {
                let (n, iw) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let o = nodes[w.0].shape[0];

                if tracked(*x) {
                    ensure(grads, *x, n * iw);
                    gemm(
                        n,
                        o,
                        iw,
                        fault,
                        g,
                        row_major(o),
                        &nodes[w.0].data,
                        row_major(iw),
                        1.0,
                        &mut grads[x.0],
                        row_major(iw),
                    );
                }
                if tracked(*w) {
                    ensure(grads, *w, o * iw);
                    gemm(
                        o,
                        n,
                        iw,
                        fault,
                        g,
                        transposed(o),
                        &nodes[x.0].data,
                        row_major(iw),
                        1.0,
                        &mut grads[w.0],
                        row_major(iw),
                    );
                }
                if tracked(*b) {
                    ensure(grads, *b, o);
                    let db = &mut grads[b.0];
                    for row in g.chunks_exact(o) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += fault * gv;
                        }
                    }
                }
            }

            Op::Relu { x } => {
                if tracked(*x) {
                    let xd = &nodes[x.0].data;
                    ensure(grads, *x, xd.len());
                    let dx = &mut grads[x.0];
                    for j in 0..xd.len() {
                        if xd[j] > 0.0 {
                            dx[j] += fault * g[j];
                        }
                    }
                }
            }

            Op::Sigmoid { x } => {
                if tracked(*x) {
                    let yd = &nodes[i].data;
                    ensure(grads, *x, yd.len());
                    let dx = &mut grads[x.0];
                    for j in 0..yd.len() {
                        dx[j] += fault * g[j] * yd[j] * (1.0 - yd[j]);
                    }
                }
            }

            Op::Concat { parts } => {
                let n = nodes[i].shape[0];
                let total = nodes[i].shape[1];
                let mut off = 0;
                for &p in parts.iter() {
                    let w = nodes[p.0].shape[1];
                    if tracked(p) {
                        ensure(grads, p, n * w);
                        let dp = &mut grads[p.0];
                        for r in 0..n {
                            for j in 0..w {
                                dp[r * w + j] += fault * g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }

            Op::Gap { x } => {
                if tracked(*x) {
                    let xs = &nodes[x.0].shape;
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let plane = h * w;
                    ensure(grads, *x, n * c * plane);
                    let dx = &mut grads[x.0];
                    let inv = fault / plane as f64;
                    for idx in 0..n {
                        for ch in 0..c {
                            let base = (idx * c + ch) * plane;
                            let gv = g[idx * c + ch] * inv;
                            for d in &mut dx[base..base + plane] {
                                *d += gv;
                            }
                        }
                    }
                }
            }

            Op::Add { a, b } => {
                for &v in [*a, *b].iter() {
                    if tracked(v) {
                        ensure(grads, v, g.len());
                        for (d, gv) in grads[v.0].iter_mut().zip(g) {
                            *d += fault * gv;
                        }
                    }
                }
            }

            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if tracked(a) {
                    ensure(grads, a, g.len());
                    // Collect to avoid borrowing node data while grads is mut.
                    for j in 0..g.len() {
                        grads[a.0][j] += fault * g[j] * nodes[b.0].data[j];
                    }
                }
                if tracked(b) {
                    ensure(grads, b, g.len());
                    for j in 0..g.len() {
                        grads[b.0][j] += fault * g[j] * nodes[a.0].data[j];
                    }
                }
            }

            Op::Scale { x, c } => {
                if tracked(*x) {
                    ensure(grads, *x, g.len());
                    let k = fault * c;
                    for (d, gv) in grads[x.0].iter_mut().zip(g) {
                        *d += k * gv;
                    }
                }
            }

            Op::RowScale { x, s } => {
                if tracked(*x) {
                    let f = nodes[i].shape[1];
                    ensure(grads, *x, g.len());
                    let dx = &mut grads[x.0];
                    for (r, &sv) in s.iter().enumerate() {
                        for j in 0..f {
                            dx[r * f + j] += fault * sv * g[r * f + j];
                        }
                    }
                }
            }

            Op::TakeRows { x, idx } => {
                if tracked(*x) {
                    let f = nodes[i].shape[1];
                    let n = nodes[x.0].shape[0];
                    ensure(grads, *x, n * f);
                    let dx = &mut grads[x.0];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..f {
                            dx[src * f + j] += fault * g[r * f + j];
                        }
                    }
                }
            }

            Op::Sum { x } => {
                if tracked(*x) {
                    let len = nodes[x.0].data.len();
                    ensure(grads, *x, len);
                    let gv = fault * g[0];
                    for d in grads[x.0].iter_mut() {
                        *d += gv;
                    }
                }
            }

            Op::Mean { x } => {
                if tracked(*x) {
                    let len = nodes[x.0].data.len();
                    ensure(grads, *x, len);
                    let gv = fault * g[0] / len as f64;
                    for d in grads[x.0].iter_mut() {
                        *d += gv;
                    }
                }
            }

            Op::Bce { p, target, weight, eps } => {
                if tracked(*p) {
                    let pd = &nodes[p.0].data;
                    let rows = nodes[p.0].shape[0] as f64;
                    ensure(grads, *p, pd.len());
                    let dp = &mut grads[p.0];
                    let gv = fault * g[0] / rows;
                    for j in 0..pd.len() {
                        let pv = pd[j];
                        if pv > *eps && pv < 1.0 - *eps {
                            dp[j] += gv * weight[j] * (pv - target[j]) / (pv * (1.0 - pv));
                        }
                    }
                }
            }
        }
    }
}

/// Gather padded image patches into columns: output layout is, per sample,
/// a `[Cin*Kh*Kw, Oh*Ow]` row-major block. Out-of-range taps read as zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let k = cin * kh * kw;
    let s = oh * ow;
    for i in 0..n {
        let xoff = i * cin * h * w;
        let coff = i * k * s;
        for c in 0..cin {
            for dy in 0..kh {
                for dx in 0..kw {
                    let krow = (c * kh + dy) * kw + dx;
                    let out = &mut cols[coff + krow * s..coff + (krow + 1) * s];
                    for oy in 0..oh {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xoff + (c * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                out[oy * ow + ox] = x[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into image layout; the adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let k = cin * kh * kw;
    let s = oh * ow;
    for i in 0..n {
        let xoff = i * cin * h * w;
        let coff = i * k * s;
        for c in 0..cin {
            for dy in 0..kh {
                for dxk in 0..kw {
                    let krow = (c * kh + dy) * kw + dxk;
                    let col = &cols[coff + krow * s..coff + (krow + 1) * s];
                    for oy in 0..oh {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xoff + (c * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * stride + dxk) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[xrow + ix as usize] += col[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
