//! Projected-gradient-descent attacks driven by center-bin ordinal
//! gradients, and the mean-sequence-deviation (MSD) stability metric.
//!
//! The attack ascends the ordinal loss restricted to the `2k` bins around
//! the model's current prediction on each axis (the mask is recomputed every
//! iteration as the prediction drifts). Gradient steps are `γ·sign(∇)`,
//! clipped to the L∞ ε-ball around the original input and to the valid pixel
//! range. ε and γ are given in `[0, 255]` pixel units and divided by 255
//! internally, matching inputs scaled to `[0, 1]`.
//!
//! MSD: per fixation sequence, the root mean squared distance of the
//! per-frame 2-d predictions from their mean; averaged over sequences. A
//! constant-output model scores exactly 0.

use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::Result;
use crate::invalid;
use crate::net::{GazeNet, Mode, PatchBatch};
use crate::ordinal::PROB_EPS;
use crate::rng::stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PgdConfig {
    /// L∞ budget in `[0, 255]` pixel units.
    pub epsilon: f64,
    /// Step length in `[0, 255]` pixel units.
    pub gamma: f64,
    /// Ascent iterations `T`.
    pub iters: usize,
    /// Center-bin half-width `k`; the mask covers `2k` bins per axis.
    pub half_width: usize,
    /// Percentage of each training batch left clean.
    pub org_percent: f64,
    /// Perturb the face patch too (not only the eye patches).
    pub all_patches: bool,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            epsilon: 3.0,
            gamma: 1.0,
            iters: 1,
            half_width: 4,
            org_percent: 90.0,
            all_patches: true,
        }
    }
}

impl PgdConfig {
    /// Check invariants; returns human-readable warnings for legal but
    /// suspicious settings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.iters < 1 {
            return Err(invalid!("pgd: iterations must be >= 1"));
        }
        if !(0.0..=100.0).contains(&self.org_percent) {
            return Err(invalid!("pgd: org_percent {} outside [0, 100]", self.org_percent));
        }
        if self.epsilon < 0.0 || self.gamma < 0.0 {
            return Err(invalid!("pgd: epsilon and gamma must be >= 0"));
        }
        if self.half_width < 1 {
            return Err(invalid!("pgd: center-bin half-width must be >= 1"));
        }
        let mut warnings = Vec::new();
        if self.gamma > 2.0 * self.epsilon {
            warnings.push(format!(
                "pgd: step length {} exceeds the perturbation-ball diameter {} (every step saturates)",
                self.gamma,
                2.0 * self.epsilon
            ));
        }
        Ok(warnings)
    }

    /// Adversarial sample count for a batch: `floor(n·(1 − org%/100))`.
    pub fn adversarial_count(&self, batch_len: usize) -> usize {
        (batch_len as f64 * (1.0 - self.org_percent / 100.0)).floor() as usize
    }
}

pub struct AttackOutcome {
    pub batch: PatchBatch,
    /// True if a non-finite gradient aborted the attack (clean inputs
    /// returned).
    pub aborted: bool,
}

fn signum_strict(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ascend(adv: &mut Tensor, clean: &Tensor, grad: &[f64], step: f64, eps: f64) {
    for ((a, &x0), &g) in adv.data.iter_mut().zip(clean.data.iter()).zip(grad.iter()) {
        let moved = *a + step * signum_strict(g);
        let mut v = moved.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
        // `x0 ± eps` rounds, so the measured difference can land half an ulp
        // outside the ball; nudge toward the clean pixel until the contract
        // `|v − x0| ≤ eps` holds in float comparison too.
        while v - x0 > eps {
            v = v.next_down();
        }
        while x0 - v > eps {
            v = v.next_up();
        }
        *a = v;
    }
}

/// Run the masked-ordinal PGD attack against a frozen model. Ground truths
/// supply the hard labels the attack ascends against; the center-bin mask is
/// recomputed each iteration from the model's prediction on the current
/// adversarial input.
pub fn pgd_attack(
    model: &GazeNet,
    clean: &PatchBatch,
    gts: &[(f64, f64)],
    cfg: &PgdConfig,
) -> AttackOutcome {
    let n = clean.len();
    assert_eq!(gts.len(), n, "pgd: {} ground truths for a batch of {n}", gts.len());
    let codec = model.cfg.plane_codec();
    let hard = codec.encode_batch(gts);
    let eps = cfg.epsilon / 255.0;
    let step = cfg.gamma / 255.0;
    let mut adv = clean.clone();

    for _ in 0..cfg.iters {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let f = tape.leaf(&adv.face, true);
        let l = tape.leaf(&adv.left, true);
        let r = tape.leaf(&adv.right, true);
        let fwd = model.forward(&mut tape, &bound, f, l, r, Mode::Eval);
        let mask = codec.center_mask_batch(tape.data(fwd.probs), cfg.half_width);
        let loss = tape.bce_weighted(fwd.probs, &hard, &mask, PROB_EPS);
        tape.backward(loss);

        let grads = [tape.grad(f), tape.grad(l), tape.grad(r)];
        let finite = grads
            .iter()
            .all(|g| g.map(|g| g.iter().all(|v| v.is_finite())).unwrap_or(true));
        if !finite {
            return AttackOutcome { batch: clean.clone(), aborted: true };
        }
        let zeros = vec![0.0; adv.face.numel()];
        if cfg.all_patches {
            ascend(&mut adv.face, &clean.face, grads[0].unwrap_or(&zeros), step, eps);
        }
        ascend(&mut adv.left, &clean.left, grads[1].unwrap_or(&zeros), step, eps);
        ascend(&mut adv.right, &clean.right, grads[2].unwrap_or(&zeros), step, eps);
    }
    AttackOutcome { batch: adv, aborted: false }
}

/// Sum after sorting so the result depends only on the multiset of values,
/// not their order; keeps the metric bit-identical under permutation.
fn sorted_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Root mean squared distance of a sequence's predictions from their mean.
/// Invariant under any reordering of the frames, bit for bit.
pub fn sequence_sigma(preds: &[(f64, f64)]) -> f64 {
    assert!(preds.len() >= 2, "sequence sigma: need at least 2 frames, got {}", preds.len());
    let m = preds.len() as f64;
    let mx = sorted_sum(preds.iter().map(|p| p.0).collect()) / m;
    let my = sorted_sum(preds.iter().map(|p| p.1).collect()) / m;
    let ss = sorted_sum(preds.iter().map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2)).collect());
    (ss / m).sqrt()
}

/// MSD over a set of per-sequence prediction lists. Invariant under any
/// reordering of the sequences or of the frames within one, bit for bit.
pub fn msd_from_predictions(seqs: &[Vec<(f64, f64)>]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(invalid!("msd: no sequences"));
    }
    for (i, s) in seqs.iter().enumerate() {
        if s.len() < 2 {
            return Err(invalid!("msd: sequence {i} has {} frames, need at least 2", s.len()));
        }
    }
    Ok(sorted_sum(seqs.iter().map(|s| sequence_sigma(s)).collect()) / seqs.len() as f64)
}

pub struct MsdReport {
    /// (sequence id, per-sequence sigma in cm).
    pub per_sequence: Vec<(usize, f64)>,
    pub msd_cm: f64,
}

/// Evaluate MSD for a model over a dataset's fixation sequences, optionally
/// injecting eval-time Gaussian pixel noise (std in `[0, 255]` units) to
/// probe stability when the stored frames are themselves deterministic.
pub fn msd_model(model: &GazeNet, ds: &Dataset, noise_std: f64, seed: u64) -> Result<MsdReport> {
    if ds.sequences.is_empty() {
        return Err(invalid!("msd: dataset has no fixation sequences"));
    }
    let mut rng = stream(seed, "msd-noise");
    let noise = if noise_std > 0.0 { Some(Normal::new(0.0, noise_std / 255.0).unwrap()) } else { None };
    let mut per_sequence = Vec::with_capacity(ds.sequences.len());
    let mut all = Vec::with_capacity(ds.sequences.len());
    for seq in &ds.sequences {
        let (mut batch, _) = ds.batch(&seq.frames);
        if let Some(dist) = &noise {
            for t in [&mut batch.face, &mut batch.left, &mut batch.right] {
                for v in t.data.iter_mut() {
                    *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
        let preds = model.predict(&batch);
        let sigma = sequence_sigma(&preds);
        per_sequence.push((seq.id, sigma));
        all.push(preds);
    }
    let msd_cm = msd_from_predictions(&all)?;
    Ok(MsdReport { per_sequence, msd_cm })
}
