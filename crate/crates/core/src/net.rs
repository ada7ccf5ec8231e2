//! Three-branch gaze regressor: per-patch conv stacks (conv → batch norm →
//! ReLU), global average pooling, per-branch FC to a feature vector, fusion
//! FC over the concatenated branch features, and a single sigmoid head
//! emitting `bins_x + bins_y` ordinal probabilities.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ordinal::{BinCodec, PlaneCodec};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BRANCH_NAMES: [&str; 3] = ["face", "left", "right"];

#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec { out_channels, kernel, stride, pad: kernel / 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub patch: usize,
    pub in_channels: usize,
    pub conv_stack: Vec<ConvSpec>,
    pub feature_dim: usize,
    pub bins_x: usize,
    pub bins_y: usize,
    pub screen_w_cm: f64,
    pub screen_h_cm: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            patch: 64,
            in_channels: 3,
            conv_stack: vec![
                ConvSpec::new(16, 3, 2),
                ConvSpec::new(32, 3, 2),
                ConvSpec::new(64, 3, 2),
                ConvSpec::new(64, 3, 1),
            ],
            feature_dim: 128,
            bins_x: 72,
            bins_y: 98,
            screen_w_cm: 10.0,
            screen_h_cm: 14.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) {
        assert!(self.bins_x >= 2 && self.bins_y >= 2, "net config: bins must be >= 2");
        assert!(!self.conv_stack.is_empty(), "net config: empty conv stack");
        assert!(self.patch >= 4, "net config: patch too small");
        assert!(self.screen_w_cm > 0.0 && self.screen_h_cm > 0.0, "net config: bad screen range");
        let (h, _) = self.spatial_after_convs();
        assert!(h >= 1, "net config: conv stack collapses a {0}x{0} patch", self.patch);
    }

    /// Spatial extent after the conv stack (square inputs → square outputs).
    pub fn spatial_after_convs(&self) -> (usize, usize) {
        let mut s = self.patch;
        for c in &self.conv_stack {
            if s + 2 * c.pad < c.kernel {
                return (0, 0);
            }
            s = (s + 2 * c.pad - c.kernel) / c.stride + 1;
        }
        (s, s)
    }

    pub fn total_bins(&self) -> usize {
        self.bins_x + self.bins_y
    }

    /// Ordinal codecs tiling the screen rectangle.
    pub fn plane_codec(&self) -> PlaneCodec {
        PlaneCodec {
            x: BinCodec::from_range(0.0, self.screen_w_cm, self.bins_x),
            y: BinCodec::from_range(0.0, self.screen_h_cm, self.bins_y),
        }
    }
}

/// One conv layer's parameters, including its batch-norm state.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub w: Tensor,        // [out, in, k, k]
    pub bn_scale: Tensor, // [out]
    pub bn_shift: Tensor, // [out]
    pub bn_mean: Tensor,  // [out], running estimate
    pub bn_var: Tensor,   // [out], running estimate
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub convs: Vec<ConvLayer>,
    pub fc_w: Tensor, // [feature_dim, last_channels]
    pub fc_b: Tensor, // [feature_dim]
}

#[derive(Clone, Debug, PartialEq)]
pub struct GazeNet {
    pub cfg: NetConfig,
    pub branches: [Branch; 3],
    pub fusion_w: Tensor, // [feature_dim, 3 * feature_dim]
    pub fusion_b: Tensor, // [feature_dim]
    pub head_w: Tensor,   // [bins_x + bins_y, feature_dim]
    pub head_b: Tensor,   // [bins_x + bins_y]
}

/// A batch of input patch triples, each `[n, channels, patch, patch]` in [0,1].
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub face: Tensor,
    pub left: Tensor,
    pub right: Tensor,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.face.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tape handles for every differentiable parameter of a bound model.
pub struct BoundConv {
    pub w: Val,
    pub scale: Val,
    pub shift: Val,
}

pub struct BoundBranch {
    pub convs: Vec<BoundConv>,
    pub fc_w: Val,
    pub fc_b: Val,
}

pub struct BoundNet {
    pub branches: [BoundBranch; 3],
    pub fusion_w: Val,
    pub fusion_b: Val,
    pub head_w: Val,
    pub head_b: Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of one forward pass.
pub struct Forward {
    /// Fused feature, `[n, feature_dim]`.
    pub feature: Val,
    /// Sigmoid bin probabilities, `[n, bins_x + bins_y]`.
    pub probs: Val,
    /// Training-mode batch-norm nodes as (branch, layer, node), for
    /// running-statistics updates. Empty in eval mode.
    pub bn_nodes: Vec<(usize, usize, Val)>,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

impl GazeNet {
    /// Fresh network: He-normal conv filters, Xavier-uniform FC layers,
    /// identity batch-norm (scale 1, shift 0, running mean 0 / var 1).
    pub fn init(cfg: NetConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate();
        let branch = |rng: &mut ChaCha8Rng, cfg: &NetConfig| -> Branch {
            let mut convs = Vec::new();
            let mut in_ch = cfg.in_channels;
            for spec in &cfg.conv_stack {
                let fan_in = in_ch * spec.kernel * spec.kernel;
                convs.push(ConvLayer {
                    w: he_normal(rng, &[spec.out_channels, in_ch, spec.kernel, spec.kernel], fan_in),
                    bn_scale: Tensor::full(&[spec.out_channels], 1.0),
                    bn_shift: Tensor::zeros(&[spec.out_channels]),
                    bn_mean: Tensor::zeros(&[spec.out_channels]),
                    bn_var: Tensor::full(&[spec.out_channels], 1.0),
                });
                in_ch = spec.out_channels;
            }
            let fc_w = xavier_uniform(rng, &[cfg.feature_dim, in_ch], in_ch, cfg.feature_dim);
            let fc_b = Tensor::zeros(&[cfg.feature_dim]);
            Branch { convs, fc_w, fc_b }
        };
        let branches = [branch(rng, &cfg), branch(rng, &cfg), branch(rng, &cfg)];
        let fused_in = 3 * cfg.feature_dim;
        let fusion_w = xavier_uniform(rng, &[cfg.feature_dim, fused_in], fused_in, cfg.feature_dim);
        let fusion_b = Tensor::zeros(&[cfg.feature_dim]);
        let total = cfg.total_bins();
        let head_w = xavier_uniform(rng, &[total, cfg.feature_dim], cfg.feature_dim, total);
        let head_b = Tensor::zeros(&[total]);
        GazeNet { cfg, branches, fusion_w, fusion_b, head_w, head_b }
    }

    /// Every tensor, in canonical order, including batch-norm running stats.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (bi, b) in self.branches.iter().enumerate() {
            let bn = BRANCH_NAMES[bi];
            for (li, c) in b.convs.iter().enumerate() {
                out.push((format!("{bn}.conv{li}.w"), &c.w));
                out.push((format!("{bn}.conv{li}.bn_scale"), &c.bn_scale));
                out.push((format!("{bn}.conv{li}.bn_shift"), &c.bn_shift));
                out.push((format!("{bn}.conv{li}.bn_mean"), &c.bn_mean));
                out.push((format!("{bn}.conv{li}.bn_var"), &c.bn_var));
            }
            out.push((format!("{bn}.fc.w"), &b.fc_w));
            out.push((format!("{bn}.fc.b"), &b.fc_b));
        }
        out.push(("fusion.w".into(), &self.fusion_w));
        out.push(("fusion.b".into(), &self.fusion_b));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Every tensor mutably, in the same canonical order as [`GazeNet::named_tensors`].
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (bi, b) in self.branches.iter_mut().enumerate() {
            let bn = BRANCH_NAMES[bi];
            for (li, c) in b.convs.iter_mut().enumerate() {
                out.push((format!("{bn}.conv{li}.w"), &mut c.w));
                out.push((format!("{bn}.conv{li}.bn_scale"), &mut c.bn_scale));
                out.push((format!("{bn}.conv{li}.bn_shift"), &mut c.bn_shift));
                out.push((format!("{bn}.conv{li}.bn_mean"), &mut c.bn_mean));
                out.push((format!("{bn}.conv{li}.bn_var"), &mut c.bn_var));
            }
            out.push((format!("{bn}.fc.w"), &mut b.fc_w));
            out.push((format!("{bn}.fc.b"), &mut b.fc_b));
        }
        out.push(("fusion.w".into(), &mut self.fusion_w));
        out.push(("fusion.b".into(), &mut self.fusion_b));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    /// SGD-updated tensors (running batch-norm stats excluded), canonical order.
    pub fn trainable_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (bi, b) in self.branches.iter_mut().enumerate() {
            let bn = BRANCH_NAMES[bi];
            for (li, c) in b.convs.iter_mut().enumerate() {
                out.push((format!("{bn}.conv{li}.w"), &mut c.w));
                out.push((format!("{bn}.conv{li}.bn_scale"), &mut c.bn_scale));
                out.push((format!("{bn}.conv{li}.bn_shift"), &mut c.bn_shift));
            }
            out.push((format!("{bn}.fc.w"), &mut b.fc_w));
            out.push((format!("{bn}.fc.b"), &mut b.fc_b));
        }
        out.push(("fusion.w".into(), &mut self.fusion_w));
        out.push(("fusion.b".into(), &mut self.fusion_b));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Number of conv layers across all branches.
    pub fn conv_layer_count(&self) -> usize {
        self.branches.iter().map(|b| b.convs.len()).sum()
    }

    /// Human-readable name of a linear conv-layer id (branch-major order).
    pub fn conv_layer_name(&self, id: usize) -> String {
        let per_branch = self.cfg.conv_stack.len();
        format!("{}.conv{}", BRANCH_NAMES[id / per_branch], id % per_branch)
    }

    /// Conv layer by linear id, branch-major order (face layers first).
    pub fn conv_layer(&self, id: usize) -> &ConvLayer {
        let per_branch = self.cfg.conv_stack.len();
        &self.branches[id / per_branch].convs[id % per_branch]
    }

    pub fn conv_layer_mut(&mut self, id: usize) -> &mut ConvLayer {
        let per_branch = self.cfg.conv_stack.len();
        &mut self.branches[id / per_branch].convs[id % per_branch]
    }

    /// Filter counts per conv layer, in linear-id order.
    pub fn conv_layer_sizes(&self) -> Vec<usize> {
        (0..self.conv_layer_count()).map(|i| self.conv_layer(i).w.shape[0]).collect()
    }

    /// Copy parameters onto a tape. `needs_grad` marks the trainable subset
    /// for gradient accumulation; running stats are consumed as constants.
    pub fn bind(&self, tape: &mut Tape, needs_grad: bool) -> BoundNet {
        let bind_branch = |tape: &mut Tape, b: &Branch| BoundBranch {
            convs: b
                .convs
                .iter()
                .map(|c| BoundConv {
                    w: tape.leaf(&c.w, needs_grad),
                    scale: tape.leaf(&c.bn_scale, needs_grad),
                    shift: tape.leaf(&c.bn_shift, needs_grad),
                })
                .collect(),
            fc_w: tape.leaf(&b.fc_w, needs_grad),
            fc_b: tape.leaf(&b.fc_b, needs_grad),
        };
        BoundNet {
            branches: [
                bind_branch(tape, &self.branches[0]),
                bind_branch(tape, &self.branches[1]),
                bind_branch(tape, &self.branches[2]),
            ],
            fusion_w: tape.leaf(&self.fusion_w, needs_grad),
            fusion_b: tape.leaf(&self.fusion_b, needs_grad),
            head_w: tape.leaf(&self.head_w, needs_grad),
            head_b: tape.leaf(&self.head_b, needs_grad),
        }
    }

    fn check_patch(&self, tape: &Tape, v: Val, which: &str) {
        let s = tape.shape(v);
        assert!(
            s.len() == 4 && s[1] == self.cfg.in_channels && s[2] == self.cfg.patch && s[3] == self.cfg.patch,
            "{which} patch: expected [n, {}, {p}, {p}], got {s:?}",
            self.cfg.in_channels,
            p = self.cfg.patch,
        );
    }

    /// Forward pass over already-bound parameters and input leaves.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundNet,
        face: Val,
        left: Val,
        right: Val,
        mode: Mode,
    ) -> Forward {
        self.check_patch(tape, face, "face");
        self.check_patch(tape, left, "left");
        self.check_patch(tape, right, "right");

        let mut bn_nodes = Vec::new();
        let mut feats = Vec::with_capacity(3);
        for (bi, (&x, bb)) in [face, left, right].iter().zip(&bound.branches).enumerate() {
            let mut cur = x;
            for (li, (spec, bc)) in self.cfg.conv_stack.iter().zip(&bb.convs).enumerate() {
                let conv = tape.conv2d(cur, bc.w, spec.stride, spec.pad);
                let normed = match mode {
                    Mode::Train => {
                        let bn = tape.batchnorm_train(conv, bc.scale, bc.shift, BN_EPS);
                        bn_nodes.push((bi, li, bn));
                        bn
                    }
                    Mode::Eval => {
                        let layer = &self.branches[bi].convs[li];
                        tape.batchnorm_eval(
                            conv,
                            bc.scale,
                            bc.shift,
                            &layer.bn_mean.data,
                            &layer.bn_var.data,
                            BN_EPS,
                        )
                    }
                };
                cur = tape.relu(normed);
            }
            let pooled = tape.global_avg_pool(cur);
            let fc = tape.linear(pooled, bb.fc_w, bb.fc_b);
            feats.push(tape.relu(fc));
        }

        let fused_in = tape.concat_cols(&feats);
        let fused = tape.linear(fused_in, bound.fusion_w, bound.fusion_b);
        let feature = tape.relu(fused);
        let probs = self.head(tape, bound, feature);
        Forward { feature, probs, bn_nodes }
    }

    /// Head only: feature `[n, feature_dim]` → sigmoid probabilities.
    /// `forward(x).probs` equals `head(forward(x).feature)` elementwise.
    pub fn head(&self, tape: &mut Tape, bound: &BoundNet, feature: Val) -> Val {
        let logits = tape.linear(feature, bound.head_w, bound.head_b);
        tape.sigmoid(logits)
    }

    /// Fold fresh batch statistics into the running estimates:
    /// `running = momentum * running + (1 - momentum) * batch`, with the
    /// unbiased variance used for the running variance.
    pub fn update_running_stats(&mut self, tape: &Tape, bn_nodes: &[(usize, usize, Val)], momentum: f64) {
        for &(bi, li, node) in bn_nodes {
            let m = {
                let s = tape.shape(node);
                (s[0] * s[2] * s[3]) as f64
            };
            let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let (mean, var) = tape.batch_stats(node);
            let layer = &mut self.branches[bi].convs[li];
            for (r, &b) in layer.bn_mean.data.iter_mut().zip(mean) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, &b) in layer.bn_var.data.iter_mut().zip(var) {
                *r = momentum * *r + (1.0 - momentum) * (b * correction);
            }
        }
    }

    /// Eval-mode bin probabilities for a batch, `[n, bins_x + bins_y]`.
    pub fn probs(&self, batch: &PatchBatch) -> Tensor {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let face = tape.leaf(&batch.face, false);
        let left = tape.leaf(&batch.left, false);
        let right = tape.leaf(&batch.right, false);
        let fw = self.forward(&mut tape, &bound, face, left, right, Mode::Eval);
        Tensor::from_vec(&[batch.len(), self.cfg.total_bins()], tape.data(fw.probs).to_vec())
    }

    /// Eval-mode 2-d predictions in screen units.
    pub fn predict(&self, batch: &PatchBatch) -> Vec<(f64, f64)> {
        let probs = self.probs(batch);
        self.cfg.plane_codec().decode_batch(&probs.data)
    }
}
