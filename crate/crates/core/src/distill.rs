//! Teacher pool, teacher-selection strategies, soft-target loss,
//! feature-level mixup, and total-loss composition.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::invalid;
use crate::net::{GazeNet, PatchBatch};
use crate::ordinal;
use crate::tensor::Tensor;

/// How a teacher is chosen from the pool for one supervision period.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherStrategy {
    /// No teacher supervision (fine-tune mode: hard + mix losses only).
    None,
    /// Most recently registered snapshot.
    LastOne,
    /// Element-wise mean of every pooled teacher's bin probabilities.
    Mean,
    /// Lowest validation error (ties: earliest entry).
    Best,
    /// Uniformly sampled snapshot, redrawn per supervision period.
    Random,
}

impl fmt::Display for TeacherStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TeacherStrategy::None => "none",
            TeacherStrategy::LastOne => "last_one",
            TeacherStrategy::Mean => "mean",
            TeacherStrategy::Best => "best",
            TeacherStrategy::Random => "random",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TeacherStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "finetune" => Ok(TeacherStrategy::None),
            "last_one" => Ok(TeacherStrategy::LastOne),
            "mean" => Ok(TeacherStrategy::Mean),
            "best" => Ok(TeacherStrategy::Best),
            "random" => Ok(TeacherStrategy::Random),
            other => Err(invalid!(
                "unknown teacher strategy '{other}' (want none|finetune|last_one|mean|best|random)"
            )),
        }
    }
}

/// When the teacher choice is redrawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResamplePolicy {
    PerEpoch,
    PerMinigen,
}

impl fmt::Display for ResamplePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResamplePolicy::PerEpoch => "per_epoch",
            ResamplePolicy::PerMinigen => "per_minigen",
        })
    }
}

impl std::str::FromStr for ResamplePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_epoch" => Ok(ResamplePolicy::PerEpoch),
            "per_minigen" => Ok(ResamplePolicy::PerMinigen),
            other => Err(invalid!("unknown resample policy '{other}' (want per_epoch|per_minigen)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_hard: f64,
    pub lambda_mix: f64,
    pub lambda_teacher: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_hard: 0.2, lambda_mix: 0.4, lambda_teacher: 0.6 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_hard < 0.0 || self.lambda_mix < 0.0 || self.lambda_teacher < 0.0 {
            return Err(invalid!("loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// Weighted sum of the three loss components.
pub fn total_loss(hard: f64, mix: f64, teacher: f64, w: &LossWeights) -> f64 {
    w.lambda_hard * hard + w.lambda_mix * mix + w.lambda_teacher * teacher
}

/// Soft-target ordinal loss: identical functional form to the hard loss,
/// with teacher probabilities in place of the 0/1 label.
pub fn teacher_loss(student_probs: &[f64], y_prime: &[f64], rows: usize) -> f64 {
    assert_eq!(
        student_probs.len(),
        y_prime.len(),
        "teacher loss: student has {} values, targets {}",
        student_probs.len(),
        y_prime.len()
    );
    ordinal::ordinal_loss(student_probs, y_prime, rows)
}

#[derive(Clone, Debug)]
pub struct TeacherEntry {
    pub model: GazeNet,
    pub val_error_cm: f64,
    pub minigen: usize,
}

/// Append-only pool of frozen teacher snapshots with a quality gate.
///
/// The first admitted entry fixes the absolute threshold at
/// `threshold_factor` times its own validation error; later snapshots whose
/// error exceeds the threshold are skipped.
#[derive(Clone, Debug)]
pub struct TeacherPool {
    entries: Vec<TeacherEntry>,
    pub threshold_factor: f64,
    threshold_cm: Option<f64>,
}

impl TeacherPool {
    pub fn new(threshold_factor: f64) -> TeacherPool {
        assert!(threshold_factor > 0.0, "teacher pool: threshold factor must be > 0");
        TeacherPool { entries: Vec::new(), threshold_factor, threshold_cm: None }
    }

    /// Register a snapshot. Returns whether it was admitted.
    pub fn add(&mut self, model: GazeNet, val_error_cm: f64, minigen: usize) -> bool {
        if let Some(last) = self.entries.last() {
            assert!(
                minigen > last.minigen,
                "teacher pool: entries must arrive in mini-generation order ({minigen} after {})",
                last.minigen
            );
        }
        let threshold = *self.threshold_cm.get_or_insert(self.threshold_factor * val_error_cm);
        if val_error_cm <= threshold {
            self.entries.push(TeacherEntry { model, val_error_cm, minigen });
            true
        } else {
            false
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TeacherEntry] {
        &self.entries
    }

    pub fn threshold_cm(&self) -> Option<f64> {
        self.threshold_cm
    }

    /// Choose the teacher(s) supplying soft targets for one supervision
    /// period. Only `Random` consumes randomness.
    pub fn select(&self, strategy: TeacherStrategy, rng: &mut ChaCha8Rng) -> Result<TeacherChoice> {
        if strategy == TeacherStrategy::None {
            return Ok(TeacherChoice { indices: Vec::new() });
        }
        if self.entries.is_empty() {
            return Err(invalid!("teacher pool is empty; strategy {strategy} needs at least one entry"));
        }
        let indices = match strategy {
            TeacherStrategy::None => unreachable!(),
            TeacherStrategy::LastOne => vec![self.entries.len() - 1],
            TeacherStrategy::Mean => (0..self.entries.len()).collect(),
            TeacherStrategy::Best => {
                let best = self
                    .entries
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        a.val_error_cm.partial_cmp(&b.val_error_cm).expect("finite val errors")
                    })
                    .map(|(i, _)| i)
                    .expect("non-empty pool");
                vec![best]
            }
            TeacherStrategy::Random => {
                let all: Vec<usize> = (0..self.entries.len()).collect();
                vec![*all.choose(rng).expect("non-empty pool")]
            }
        };
        Ok(TeacherChoice { indices })
    }

    /// Soft targets `y'` for a batch: the chosen teacher's bin probabilities,
    /// or their element-wise mean for multi-teacher choices.
    pub fn targets(&self, choice: &TeacherChoice, batch: &PatchBatch) -> Tensor {
        assert!(!choice.indices.is_empty(), "teacher targets: empty choice");
        let mut acc: Option<Tensor> = None;
        for &i in &choice.indices {
            let probs = self.entries[i].model.probs(batch);
            acc = Some(match acc {
                None => probs,
                Some(mut a) => {
                    for (av, pv) in a.data.iter_mut().zip(probs.data.iter()) {
                        *av += pv;
                    }
                    a
                }
            });
        }
        let mut out = acc.expect("at least one teacher");
        let k = choice.indices.len() as f64;
        if k > 1.0 {
            for v in out.data.iter_mut() {
                *v /= k;
            }
        }
        out
    }
}

/// Indices into the pool chosen for one supervision period.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeacherChoice {
    pub indices: Vec<usize>,
}

/// One epoch's mixup randomness: a batch permutation pairing row `i` with
/// row `perm[i]`, and a per-pair convex weight `alpha[i] ~ U(0,1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub perm: Vec<usize>,
    pub alpha: Vec<f64>,
}

pub fn mix_plan(n: usize, rng: &mut ChaCha8Rng) -> MixPlan {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let alpha = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    MixPlan { perm, alpha }
}

/// Convex combination of per-row labels under a mix plan:
/// `out[i] = alpha[i]·labels[i] + (1−alpha[i])·labels[perm[i]]`.
pub fn mix_labels(labels: &[f64], bins: usize, plan: &MixPlan) -> Vec<f64> {
    let n = plan.perm.len();
    assert_eq!(labels.len(), n * bins, "mix labels: {} values for {n} rows of {bins} bins", labels.len());
    assert_eq!(plan.alpha.len(), n, "mix plan: alpha and perm lengths differ");
    let mut out = vec![0.0; labels.len()];
    for i in 0..n {
        let j = plan.perm[i];
        let a = plan.alpha[i];
        for b in 0..bins {
            out[i * bins + b] = a * labels[i * bins + b] + (1.0 - a) * labels[j * bins + b];
        }
    }
    out
}
