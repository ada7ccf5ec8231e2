//! Training loops. One entry point ([`run`]) drives all four schemes:
//!
//! * `plain` — a single generation of standard ordinal training.
//! * `tat` — a warmup epoch plus `k` mini-generations of `l` epochs each;
//!   between mini-generations the weakest convolution filters (by mutual
//!   cosine similarity) are re-initialized onto an aligned orthogonal
//!   basis, and snapshots taken at each boundary supervise later
//!   mini-generations alongside hard labels and feature-level mixup.
//! * `dwo` — a single generation in which part of every batch is replaced
//!   by projected-gradient perturbations aimed at the bins around the
//!   current prediction.
//! * `tat+dwo` — both of the above at once.
//!
//! All schemes share the epoch budget `warmup_epochs + k·l`, an SGD
//! optimizer with momentum, and a learning-rate decay at the start of each
//! generation's final epoch, so that their metric histories are directly
//! comparable. Every random decision is drawn from a named, seeded stream;
//! two runs with the same config produce bit-identical models.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::checkpoint::save_model;
use crate::data::{Dataset, Split};
use crate::distill::{
    mix_labels, mix_plan, LossWeights, ResamplePolicy, TeacherChoice, TeacherPool, TeacherStrategy,
};
use crate::error::{Error, Result};
use crate::invalid;
use crate::net::{BoundNet, GazeNet, Mode, NetConfig, PatchBatch};
use crate::optim::Sgd;
use crate::ordinal::PROB_EPS;
use crate::prune::{score_layers, select_prune_set, PruneSelection};
use crate::reinit::{variant_reinit, ReinitMode};
use crate::robust::{pgd_attack, PgdConfig};
use crate::rng::{stream, stream_indexed};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

/// Rows per forward pass during evaluation (results are row-independent,
/// so the chunk size never changes a metric).
const EVAL_CHUNK: usize = 256;

/// Which training scheme [`run`] executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Plain,
    Tat,
    Dwo,
    TatDwo,
}

impl Scheme {
    /// Mini-generation surgery + snapshot distillation + mixup active?
    pub fn uses_reinit(self) -> bool {
        matches!(self, Scheme::Tat | Scheme::TatDwo)
    }

    /// Adversarial batch mixing active?
    pub fn uses_adversary(self) -> bool {
        matches!(self, Scheme::Dwo | Scheme::TatDwo)
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Scheme::Plain => "plain",
            Scheme::Tat => "tat",
            Scheme::Dwo => "dwo",
            Scheme::TatDwo => "tat+dwo",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Scheme::Plain),
            "tat" => Ok(Scheme::Tat),
            "dwo" => Ok(Scheme::Dwo),
            "tat+dwo" => Ok(Scheme::TatDwo),
            other => Err(invalid!("unknown scheme '{other}' (want plain|tat|dwo|tat+dwo)")),
        }
    }
}

/// Everything [`run`] needs. `k`/`l` size the epoch budget for every
/// scheme; the teacher/prune/reinit knobs only act under `tat`/`tat+dwo`
/// and `pgd` only under `dwo`/`tat+dwo`.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub scheme: Scheme,
    /// Mini-generations.
    pub k: usize,
    /// Epochs per mini-generation.
    pub l: usize,
    /// Extra epochs before the first mini-generation (counted into it).
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied for each generation's final epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Running-statistics momentum for batch norm.
    pub bn_momentum: f64,
    /// Loss-term weights. Single-generation schemes keep `lambda_hard`
    /// and force the mixup/teacher terms to zero.
    pub weights: LossWeights,
    pub strategy: TeacherStrategy,
    pub resample: ResamplePolicy,
    /// Snapshot admission threshold: `factor ×` the first admitted
    /// snapshot's validation error.
    pub teacher_threshold_factor: f64,
    /// Global fraction of conv filters re-initialized per surgery.
    pub prune_p: f64,
    /// Per-layer cap on that fraction.
    pub prune_p_max: f64,
    /// Score filters by |cosine| instead of signed cosine.
    pub abs_scores: bool,
    /// Draw one aligned scalar per filter instead of per layer.
    pub scalar_per_filter: bool,
    pub reinit_mode: ReinitMode,
    pub pgd: PgdConfig,
    /// Cap on the fixed training subset used for the per-epoch train
    /// metric (0 = evaluate on the full training split).
    pub eval_train_cap: usize,
    /// Abort when validation error exceeds this multiple of the first
    /// epoch's validation error.
    pub divergence_factor: f64,
    pub seed: u64,
    /// Where to dump model + history if training diverges.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            scheme: Scheme::Plain,
            k: 5,
            l: 7,
            warmup_epochs: 1,
            batch_size: 128,
            lr: 0.01,
            lr_decay: 0.1,
            momentum: 0.9,
            bn_momentum: 0.9,
            weights: LossWeights::default(),
            strategy: TeacherStrategy::Random,
            resample: ResamplePolicy::PerEpoch,
            teacher_threshold_factor: 1.1,
            prune_p: 0.20,
            prune_p_max: 0.50,
            abs_scores: false,
            scalar_per_filter: false,
            reinit_mode: ReinitMode::Aoi,
            pgd: PgdConfig::default(),
            eval_train_cap: 2048,
            divergence_factor: 10.0,
            seed: 0,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.k * self.l
    }

    /// Loss weights actually applied: single-generation schemes zero the
    /// mixup and teacher terms.
    pub fn effective_weights(&self) -> LossWeights {
        if self.scheme.uses_reinit() {
            self.weights
        } else {
            LossWeights { lambda_hard: self.weights.lambda_hard, lambda_mix: 0.0, lambda_teacher: 0.0 }
        }
    }

    /// Check the config, returning non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.net.validate();
        if self.k < 1 || self.l < 1 {
            return Err(invalid!("train config: k and l must be >= 1 (got k={}, l={})", self.k, self.l));
        }
        if self.batch_size < 1 {
            return Err(invalid!("train config: batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("train config: lr must be positive and finite, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(invalid!("train config: lr_decay must be positive and finite, got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!("train config: momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(invalid!("train config: bn_momentum must be in [0, 1], got {}", self.bn_momentum));
        }
        self.weights.validate()?;
        let eff = self.effective_weights();
        if eff.lambda_hard <= 0.0 && eff.lambda_mix <= 0.0 {
            return Err(invalid!(
                "train config: need lambda_hard > 0 or lambda_mix > 0 (the snapshot pool is empty \
                 in the first mini-generation, so the teacher term alone cannot train)"
            ));
        }
        if !(0.0..=1.0).contains(&self.prune_p) || !(0.0..=1.0).contains(&self.prune_p_max) {
            return Err(invalid!(
                "train config: prune_p and prune_p_max must be in [0, 1] (got {} and {})",
                self.prune_p,
                self.prune_p_max
            ));
        }
        if !(self.teacher_threshold_factor > 0.0) {
            return Err(invalid!(
                "train config: teacher_threshold_factor must be positive, got {}",
                self.teacher_threshold_factor
            ));
        }
        if !(self.divergence_factor > 0.0) {
            return Err(invalid!(
                "train config: divergence_factor must be positive, got {}",
                self.divergence_factor
            ));
        }
        let mut warnings = Vec::new();
        if self.scheme.uses_adversary() {
            warnings.extend(self.pgd.validate()?);
        }
        Ok(warnings)
    }
}

/// One row of the metric history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Global epoch index, 0-based (0 is the warmup epoch when present).
    pub epoch: usize,
    /// Mini-generation, 1-based; warmup counts into mini-generation 1 and
    /// single-generation schemes stay at 1 throughout.
    pub minigen: usize,
    pub train_err_cm: f64,
    pub val_err_cm: f64,
}

/// One between-generation surgery (scoring + selection + re-init).
#[derive(Clone, Debug)]
pub struct SurgeryRecord {
    /// Mini-generation that just ended.
    pub minigen: usize,
    /// Global epoch after which the surgery ran.
    pub after_epoch: usize,
    pub selection: PruneSelection,
}

/// Result of a completed run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: GazeNet,
    pub history: Vec<EpochRecord>,
    /// Snapshot pool (schemes with mini-generations only).
    pub pool: Option<TeacherPool>,
    pub surgeries: Vec<SurgeryRecord>,
    /// Non-fatal anomalies: rejected snapshots, prune-cap shortfalls,
    /// aborted attacks, config warnings.
    pub warnings: Vec<String>,
}

/// Mean Euclidean error in screen units between predictions and targets.
pub fn mean_error(preds: &[(f64, f64)], gts: &[(f64, f64)]) -> f64 {
    assert_eq!(preds.len(), gts.len(), "mean_error: {} predictions for {} targets", preds.len(), gts.len());
    assert!(!preds.is_empty(), "mean_error: empty input");
    let total: f64 =
        preds.iter().zip(gts).map(|(p, g)| ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt()).sum();
    total / preds.len() as f64
}

/// Eval-mode predictions for the given record ids, in id order.
pub fn predictions(model: &GazeNet, ds: &Dataset, ids: &[usize]) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_CHUNK) {
        let (batch, _) = ds.batch(chunk);
        out.extend(model.predict(&batch));
    }
    out
}

/// Mean Euclidean error of the model on the given record ids.
pub fn evaluate(model: &GazeNet, ds: &Dataset, ids: &[usize]) -> f64 {
    let preds = predictions(model, ds, ids);
    let gts: Vec<(f64, f64)> = ids.iter().map(|&i| ds.records[i].gt).collect();
    mean_error(&preds, &gts)
}

/// Deterministic fixed subset of `ids` for the per-epoch train metric:
/// a seeded shuffle truncated to `cap` and re-sorted. `cap` 0 or >= len
/// returns `ids` unchanged.
pub fn eval_subset(ids: &[usize], cap: usize, seed: u64) -> Vec<usize> {
    let mut out = ids.to_vec();
    if cap > 0 && cap < out.len() {
        out.shuffle(&mut stream(seed, "eval-train-subset"));
        out.truncate(cap);
        out.sort_unstable();
    }
    out
}

/// Render the history as CSV. Floats print in shortest-roundtrip form,
/// so parsing the file recovers them exactly.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,mini_generation,train_err_cm,val_err_cm\n");
    for r in history {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.minigen, r.train_err_cm, r.val_err_cm));
    }
    s
}

/// Render per-record predictions as CSV (same float convention).
pub fn predictions_csv(ids: &[usize], preds: &[(f64, f64)], gts: &[(f64, f64)]) -> String {
    assert!(ids.len() == preds.len() && ids.len() == gts.len(), "predictions_csv: ragged inputs");
    let mut s = String::from("id,pred_x_cm,pred_y_cm,gt_x_cm,gt_y_cm,err_cm\n");
    for ((&id, p), g) in ids.iter().zip(preds).zip(gts) {
        let err = ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt();
        s.push_str(&format!("{},{},{},{},{},{}\n", id, p.0, p.1, g.0, g.1, err));
    }
    s
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let n = t.shape[0];
    let per = t.numel() / n;
    let mut shape = t.shape.clone();
    shape[0] = rows.len();
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        assert!(r < n, "gather_rows: row {r} out of range for {n}");
        data.extend_from_slice(&t.data[r * per..(r + 1) * per]);
    }
    Tensor::from_vec(&shape, data)
}

fn scatter_rows(dst: &mut Tensor, rows: &[usize], src: &Tensor) {
    let n = dst.shape[0];
    let per = dst.numel() / n;
    assert_eq!(src.shape[0], rows.len(), "scatter_rows: row count mismatch");
    assert_eq!(src.numel() / rows.len().max(1), per, "scatter_rows: row width mismatch");
    for (i, &r) in rows.iter().enumerate() {
        dst.data[r * per..(r + 1) * per].copy_from_slice(&src.data[i * per..(i + 1) * per]);
    }
}

/// Tape leaves of the trainable tensors, in the canonical order of
/// [`GazeNet::trainable_tensors_mut`].
fn trainable_vals(bound: &BoundNet) -> Vec<Val> {
    let mut vals = Vec::new();
    for bb in &bound.branches {
        for bc in &bb.convs {
            vals.push(bc.w);
            vals.push(bc.scale);
            vals.push(bc.shift);
        }
        vals.push(bb.fc_w);
        vals.push(bb.fc_b);
    }
    vals.push(bound.fusion_w);
    vals.push(bound.fusion_b);
    vals.push(bound.head_w);
    vals.push(bound.head_b);
    vals
}

fn check_dataset(cfg: &TrainConfig, ds: &Dataset) -> Result<()> {
    let h = &ds.header;
    if h.patch != cfg.net.patch {
        return Err(invalid!("dataset patch {} != network patch {}", h.patch, cfg.net.patch));
    }
    if h.channels != cfg.net.in_channels {
        return Err(invalid!("dataset channels {} != network channels {}", h.channels, cfg.net.in_channels));
    }
    if h.screen_w_cm != cfg.net.screen_w_cm || h.screen_h_cm != cfg.net.screen_h_cm {
        return Err(invalid!(
            "dataset screen {}x{} cm != network screen {}x{} cm",
            h.screen_w_cm,
            h.screen_h_cm,
            cfg.net.screen_w_cm,
            cfg.net.screen_h_cm
        ));
    }
    Ok(())
}

/// Best-effort divergence dump; returns the model path on success.
fn dump_state(dir: &Path, cfg: &TrainConfig, model: &GazeNet, history: &[EpochRecord]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let model_path = dir.join("diverged_model.ckpt");
    let meta = vec![
        ("scheme".to_string(), cfg.scheme.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("diverged_at_epoch".to_string(), (history.len() - 1).to_string()),
    ];
    save_model(model, &meta, &model_path)?;
    std::fs::write(dir.join("diverged_history.csv"), history_csv(history))?;
    Ok(model_path)
}

/// Train a model per `cfg` on the train split of `ds`, reporting one
/// [`EpochRecord`] to `progress` per epoch. Returns [`Error::Diverged`]
/// when the validation error explodes past `divergence_factor ×` the
/// first epoch's value (state is dumped to `dump_dir` when set, on a
/// best-effort basis).
pub fn run(cfg: &TrainConfig, ds: &Dataset, mut progress: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let mut warnings = cfg.validate()?;
    check_dataset(cfg, ds)?;
    let train_ids = ds.ids(Split::Train);
    let val_ids = ds.ids(Split::Val);
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(invalid!(
            "dataset must have non-empty train and val splits (got {} train, {} val)",
            train_ids.len(),
            val_ids.len()
        ));
    }

    let codec = cfg.net.plane_codec();
    let effective = cfg.effective_weights();
    let tat_on = cfg.scheme.uses_reinit();
    let dwo_on = cfg.scheme.uses_adversary();
    let eval_train_ids = eval_subset(&train_ids, cfg.eval_train_cap, cfg.seed);

    let mut model = GazeNet::init(cfg.net.clone(), &mut stream(cfg.seed, "init"));
    let param_count = model.param_count();
    let mut sgd = Sgd::new(cfg.momentum);
    let mut pool = tat_on.then(|| TeacherPool::new(cfg.teacher_threshold_factor));
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut surgeries: Vec<SurgeryRecord> = Vec::new();
    let mut choice: Option<TeacherChoice> = None;
    let mut choice_minigen: Option<usize> = None;
    let mut attack_warned = false;

    let total_epochs = cfg.total_epochs();
    for epoch in 0..total_epochs {
        // Position within the generation structure. Warmup epochs belong
        // to mini-generation 1; single-generation schemes are one long
        // generation whose final epoch takes the decayed rate.
        let (minigen, last_of_gen) = if tat_on {
            if epoch < cfg.warmup_epochs {
                (1, false)
            } else {
                let t = epoch - cfg.warmup_epochs;
                (t / cfg.l + 1, t % cfg.l == cfg.l - 1)
            }
        } else {
            (1, epoch + 1 == total_epochs)
        };
        let lr = if last_of_gen { cfg.lr * cfg.lr_decay } else { cfg.lr };

        // Teacher choice for this epoch (empty pool → no teacher term;
        // the pool is always empty throughout mini-generation 1).
        let teacher_on = tat_on
            && effective.lambda_teacher > 0.0
            && cfg.strategy != TeacherStrategy::None
            && pool.as_ref().is_some_and(|p| !p.is_empty());
        if teacher_on {
            let redraw = match cfg.resample {
                ResamplePolicy::PerEpoch => true,
                ResamplePolicy::PerMinigen => choice_minigen != Some(minigen),
            };
            if redraw {
                let mut trng = stream_indexed(cfg.seed, "teacher", epoch as u64);
                choice = Some(pool.as_ref().unwrap().select(cfg.strategy, &mut trng)?);
                choice_minigen = Some(minigen);
            }
        } else {
            choice = None;
            choice_minigen = None;
        }

        let mut shuffled = train_ids.clone();
        shuffled.shuffle(&mut stream_indexed(cfg.seed, "shuffle", epoch as u64));
        let mut mix_rng =
            (effective.lambda_mix > 0.0).then(|| stream_indexed(cfg.seed, "mixup", epoch as u64));
        let mut adv_rng = dwo_on.then(|| stream_indexed(cfg.seed, "dwo-subset", epoch as u64));

        for chunk in shuffled.chunks(cfg.batch_size) {
            let (mut batch, gts, labels) = ds.batch_with_labels(chunk, &codec);
            let n = chunk.len();

            if dwo_on {
                let n_adv = cfg.pgd.adversarial_count(n);
                if n_adv > 0 {
                    let rng = adv_rng.as_mut().unwrap();
                    let mut rows: Vec<usize> = rand::seq::index::sample(rng, n, n_adv).into_vec();
                    rows.sort_unstable();
                    let sub = PatchBatch {
                        face: gather_rows(&batch.face, &rows),
                        left: gather_rows(&batch.left, &rows),
                        right: gather_rows(&batch.right, &rows),
                    };
                    let sub_gts: Vec<(f64, f64)> = rows.iter().map(|&r| gts[r]).collect();
                    let outcome = pgd_attack(&model, &sub, &sub_gts, &cfg.pgd);
                    if outcome.aborted && !attack_warned {
                        warnings.push(format!(
                            "epoch {epoch}: attack hit non-finite gradients; affected rows kept clean"
                        ));
                        attack_warned = true;
                    }
                    scatter_rows(&mut batch.face, &rows, &outcome.batch.face);
                    scatter_rows(&mut batch.left, &rows, &outcome.batch.left);
                    scatter_rows(&mut batch.right, &rows, &outcome.batch.right);
                }
            }

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let tvals = trainable_vals(&bound);
            let face = tape.leaf(&batch.face, false);
            let left = tape.leaf(&batch.left, false);
            let right = tape.leaf(&batch.right, false);
            let fwd = model.forward(&mut tape, &bound, face, left, right, Mode::Train);
            let ones = vec![1.0; n * codec.total_bins()];

            // Zero-weight terms are skipped outright: no tape nodes, no
            // random draws, so disabling a term reproduces the simpler
            // scheme bit for bit.
            let mut terms: Vec<Val> = Vec::with_capacity(3);
            if effective.lambda_hard > 0.0 {
                let lh = tape.bce_weighted(fwd.probs, &labels, &ones, PROB_EPS);
                terms.push(tape.scale(lh, effective.lambda_hard));
            }
            if let Some(rng) = mix_rng.as_mut() {
                let plan = mix_plan(n, rng);
                let permuted = tape.take_rows(fwd.feature, &plan.perm);
                let scaled_own = tape.row_scale(fwd.feature, &plan.alpha);
                let complement: Vec<f64> = plan.alpha.iter().map(|a| 1.0 - a).collect();
                let scaled_other = tape.row_scale(permuted, &complement);
                let feat_mix = tape.add(scaled_own, scaled_other);
                let probs_mix = model.head(&mut tape, &bound, feat_mix);
                let mixed = mix_labels(&labels, codec.total_bins(), &plan);
                let lm = tape.bce_weighted(probs_mix, &mixed, &ones, PROB_EPS);
                terms.push(tape.scale(lm, effective.lambda_mix));
            }
            if let Some(ch) = &choice {
                let targets = pool.as_ref().unwrap().targets(ch, &batch);
                let lt = tape.bce_weighted(fwd.probs, &targets.data, &ones, PROB_EPS);
                terms.push(tape.scale(lt, effective.lambda_teacher));
            }
            let mut iter = terms.into_iter();
            let mut total = iter.next().expect("validated config always has an active loss term");
            for t in iter {
                total = tape.add(total, t);
            }

            tape.backward(total);
            model.update_running_stats(&tape, &fwd.bn_nodes, cfg.bn_momentum);
            let grads: Vec<Option<&[f64]>> = tvals.iter().map(|&v| tape.grad(v)).collect();
            let mut named = model.trainable_tensors_mut();
            debug_assert_eq!(named.len(), grads.len());
            let mut pairs: Vec<(&mut Tensor, Option<&[f64]>)> =
                named.iter_mut().zip(&grads).map(|((_, t), g)| (&mut **t, *g)).collect();
            sgd.step(lr, &mut pairs);
        }

        let train_err = evaluate(&model, ds, &eval_train_ids);
        let val_err = evaluate(&model, ds, &val_ids);
        let rec = EpochRecord { epoch, minigen, train_err_cm: train_err, val_err_cm: val_err };
        progress(&rec);
        history.push(rec);

        let initial = history[0].val_err_cm;
        let exploded = !val_err.is_finite()
            || (epoch > 0 && initial.is_finite() && initial > 0.0 && val_err > cfg.divergence_factor * initial);
        if exploded {
            let state_dump =
                cfg.dump_dir.as_ref().and_then(|d| dump_state(d, cfg, &model, &history).ok());
            return Err(Error::Diverged { val_error_cm: val_err, initial_cm: initial, state_dump });
        }

        if tat_on && last_of_gen {
            // Snapshot first: the pool must hold the trained network, not
            // the re-initialized one.
            let pool = pool.as_mut().unwrap();
            let admitted = pool.add(model.clone(), val_err, minigen);
            if !admitted {
                warnings.push(format!(
                    "snapshot for mini-generation {minigen} rejected: val error {val_err:.4} cm above \
                     pool threshold {:.4} cm",
                    pool.threshold_cm().unwrap_or(f64::NAN)
                ));
            }
            debug_assert!(pool.len() <= cfg.k);

            if minigen < cfg.k {
                let layer_weights: Vec<&Tensor> =
                    (0..model.conv_layer_count()).map(|i| &model.conv_layer(i).w).collect();
                let scores = score_layers(&layer_weights, cfg.abs_scores);
                let selection =
                    select_prune_set(&scores, &model.conv_layer_sizes(), cfg.prune_p, cfg.prune_p_max);
                if selection.shortfall > 0 {
                    warnings.push(format!(
                        "surgery after mini-generation {minigen}: per-layer caps left {} of the quota \
                         of {} unmet",
                        selection.shortfall, selection.quota
                    ));
                }
                let mut rng = stream_indexed(cfg.seed, "reinit", minigen as u64);
                variant_reinit(&mut model, &selection, cfg.reinit_mode, cfg.scalar_per_filter, &mut rng)?;
                debug_assert_eq!(model.param_count(), param_count);
                sgd.reset();
                surgeries.push(SurgeryRecord { minigen, after_epoch: epoch, selection });
            }
        }
    }

    Ok(TrainOutcome { model, history, pool, surgeries, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use crate::net::ConvSpec;
    use tempfile::tempdir;

    fn tiny_synth() -> SynthConfig {
        SynthConfig {
            subjects_train: 2,
            subjects_val: 1,
            subjects_test: 1,
            samples_per_subject: 6,
            patch: 20,
            blob_sigma: 1.2,
            seq_points_per_subject: 1,
            seq_frames: 2,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    fn tiny_net() -> NetConfig {
        NetConfig {
            patch: 20,
            in_channels: 3,
            conv_stack: vec![ConvSpec::new(4, 3, 2), ConvSpec::new(6, 3, 2)],
            feature_dim: 8,
            bins_x: 6,
            bins_y: 7,
            screen_w_cm: 10.0,
            screen_h_cm: 14.0,
        }
    }

    fn tiny_cfg(scheme: Scheme) -> TrainConfig {
        TrainConfig {
            net: tiny_net(),
            scheme,
            k: 1,
            l: 2,
            warmup_epochs: 1,
            batch_size: 8,
            lr: 0.05,
            seed: 42,
            ..TrainConfig::default()
        }
    }

    fn load_tiny(dir: &std::path::Path) -> Dataset {
        generate(&tiny_synth(), dir).unwrap();
        Dataset::load(dir).unwrap()
    }

    #[test]
    fn mean_error_closed_form() {
        let preds = [(1.0, 0.0), (1.0, 0.0)];
        let gts = [(0.0, 0.0), (2.0, 0.0)];
        assert_eq!(mean_error(&preds, &gts), 1.0);
        assert_eq!(mean_error(&[(3.0, 4.0)], &[(0.0, 0.0)]), 5.0);
    }

    #[test]
    fn eval_subset_is_fixed_and_capped() {
        let ids: Vec<usize> = (10..30).collect();
        let a = eval_subset(&ids, 5, 7);
        let b = eval_subset(&ids, 5, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|i| ids.contains(i)));
        assert_ne!(a, eval_subset(&ids, 5, 8));
        assert_eq!(eval_subset(&ids, 0, 7), ids);
        assert_eq!(eval_subset(&ids, 100, 7), ids);
    }

    #[test]
    fn scheme_tokens_roundtrip() {
        for s in [Scheme::Plain, Scheme::Tat, Scheme::Dwo, Scheme::TatDwo] {
            assert_eq!(s.to_string().parse::<Scheme>().unwrap(), s);
        }
        assert!("spicy".parse::<Scheme>().is_err());
    }

    #[test]
    fn plain_run_is_deterministic() {
        let dir = tempdir().unwrap();
        let ds = load_tiny(dir.path());
        let cfg = tiny_cfg(Scheme::Plain);
        let a = run(&cfg, &ds, |_| {}).unwrap();
        let b = run(&cfg, &ds, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.history.len(), 3);
        assert!(a.history.iter().all(|r| r.minigen == 1));
        assert!(a.history.iter().all(|r| r.train_err_cm.is_finite() && r.val_err_cm.is_finite()));
        assert!(a.pool.is_none());
        assert!(a.surgeries.is_empty());

        let c = run(&TrainConfig { seed: 43, ..cfg }, &ds, |_| {}).unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn tat_reduces_to_plain_with_unit_generation() {
        let dir = tempdir().unwrap();
        let ds = load_tiny(dir.path());
        let weights = LossWeights { lambda_hard: 0.7, lambda_mix: 0.0, lambda_teacher: 0.0 };
        let plain = TrainConfig { weights, ..tiny_cfg(Scheme::Plain) };
        let tat = TrainConfig { weights, prune_p: 0.0, ..tiny_cfg(Scheme::Tat) };
        let a = run(&plain, &ds, |_| {}).unwrap();
        let b = run(&tat, &ds, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        // The degenerate-but-real pool still snapshots the final model.
        assert_eq!(b.pool.unwrap().len(), 1);
        assert!(b.surgeries.is_empty());
    }

    #[test]
    fn dwo_with_all_clean_batches_matches_plain() {
        let dir = tempdir().unwrap();
        let ds = load_tiny(dir.path());
        let plain = tiny_cfg(Scheme::Plain);
        let dwo = TrainConfig {
            pgd: PgdConfig { org_percent: 100.0, ..PgdConfig::default() },
            ..tiny_cfg(Scheme::Dwo)
        };
        let a = run(&plain, &ds, |_| {}).unwrap();
        let b = run(&dwo, &ds, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn dwo_adversarial_batches_change_the_trajectory() {
        let dir = tempdir().unwrap();
        let ds = load_tiny(dir.path());
        let plain = tiny_cfg(Scheme::Plain);
        let dwo = TrainConfig {
            pgd: PgdConfig { org_percent: 50.0, half_width: 2, ..PgdConfig::default() },
            ..tiny_cfg(Scheme::Dwo)
        };
        let a = run(&plain, &ds, |_| {}).unwrap();
        let b = run(&dwo, &ds, |_| {}).unwrap();
        assert_ne!(a.model, b.model);
        assert!(b.history.iter().all(|r| r.val_err_cm.is_finite()));
    }

    #[test]
    fn tat_two_generations_smoke() {
        let dir = tempdir().unwrap();
        let ds = load_tiny(dir.path());
        let cfg = TrainConfig { k: 2, ..tiny_cfg(Scheme::Tat) };
        let mut seen = Vec::new();
        let out = run(&cfg, &ds, |r| seen.push(r.epoch)).unwrap();
        assert_eq!(out.history.len(), 5); // warmup + 2 × 2
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        let minigens: Vec<usize> = out.history.iter().map(|r| r.minigen).collect();
        assert_eq!(minigens, vec![1, 1, 1, 2, 2]);
        assert_eq!(out.surgeries.len(), 1);
        assert_eq!(out.surgeries[0].minigen, 1);
        assert_eq!(out.surgeries[0].after_epoch, 2);
        assert!(!out.surgeries[0].selection.selected.is_empty());
        let pool = out.pool.unwrap();
        assert!(pool.len() >= 1 && pool.len() <= 2);

        // Surgery must not disturb tensor shapes.
        let fresh = GazeNet::init(cfg.net.clone(), &mut stream(0, "init"));
        for ((name_a, t_a), (name_b, t_b)) in fresh.named_tensors().iter().zip(out.model.named_tensors())
        {
            assert_eq!(*name_a, name_b);
            assert_eq!(t_a.shape, t_b.shape, "{name_a} shape changed");
        }
    }

    #[test]
    fn snapshot_pool_never_exceeds_generation_count() {
        let dir = tempdir().unwrap();
        let ds = load_tiny(dir.path());
        let cfg = TrainConfig { k: 3, l: 1, ..tiny_cfg(Scheme::Tat) };
        let out = run(&cfg, &ds, |_| {}).unwrap();
        assert_eq!(out.history.len(), 4);
        assert_eq!(out.surgeries.len(), 2);
        let pool = out.pool.unwrap();
        assert!(pool.len() <= 3);
        assert!(pool.len() >= 1); // the first snapshot sets the threshold and always enters
    }

    #[test]
    fn divergence_aborts_with_dump() {
        let dir = tempdir().unwrap();
        let ds = load_tiny(dir.path());
        let dump = tempdir().unwrap();
        let cfg = TrainConfig {
            divergence_factor: 1e-9,
            dump_dir: Some(dump.path().to_path_buf()),
            ..tiny_cfg(Scheme::Plain)
        };
        let err = run(&cfg, &ds, |_| {}).unwrap_err();
        match err {
            Error::Diverged { val_error_cm, initial_cm, state_dump } => {
                assert!(val_error_cm.is_finite() && initial_cm.is_finite());
                let path = state_dump.expect("dump requested");
                assert!(path.exists());
                let (loaded, meta) = crate::checkpoint::load_model(&path).unwrap();
                assert_eq!(loaded.cfg, cfg.net);
                assert!(meta.iter().any(|(k, _)| k == "diverged_at_epoch"));
                assert!(dump.path().join("diverged_history.csv").exists());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let dir = tempdir().unwrap();
        let ds = load_tiny(dir.path());
        let cfg = TrainConfig { net: NetConfig { patch: 24, ..tiny_net() }, ..tiny_cfg(Scheme::Plain) };
        let err = run(&cfg, &ds, |_| {}).unwrap_err();
        assert!(err.to_string().contains("patch"), "unexpected message: {err}");
    }

    #[test]
    fn history_csv_prints_exact_floats() {
        let history = vec![
            EpochRecord { epoch: 0, minigen: 1, train_err_cm: 1.5, val_err_cm: 0.1 + 0.2 },
            EpochRecord { epoch: 1, minigen: 2, train_err_cm: 2.0 / 3.0, val_err_cm: 2.0 },
        ];
        let csv = history_csv(&history);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,mini_generation,train_err_cm,val_err_cm");
        for (line, rec) in lines.zip(&history) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[0].parse::<usize>().unwrap(), rec.epoch);
            assert_eq!(cols[1].parse::<usize>().unwrap(), rec.minigen);
            assert_eq!(cols[2].parse::<f64>().unwrap(), rec.train_err_cm);
            assert_eq!(cols[3].parse::<f64>().unwrap(), rec.val_err_cm);
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let ok = tiny_cfg(Scheme::Plain);
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { k: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { prune_p: 1.5, ..ok.clone() }.validate().is_err());
        let no_loss = TrainConfig {
            weights: LossWeights { lambda_hard: 0.0, lambda_mix: 0.0, lambda_teacher: 1.0 },
            ..ok.clone()
        };
        assert!(no_loss.validate().is_err());
        // The same weights are fine under tat, where the mix term exists.
        let tat_mix_only = TrainConfig {
            scheme: Scheme::Tat,
            weights: LossWeights { lambda_hard: 0.0, lambda_mix: 0.3, lambda_teacher: 0.6 },
            ..ok
        };
        assert!(tat_mix_only.validate().is_ok());
    }
}
