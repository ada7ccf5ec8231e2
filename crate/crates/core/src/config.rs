//! Flat `key = value` run configuration.
//!
//! One [`RunConfig`] carries every dataset, network, training, and attack
//! knob. Files use one `key = value` pair per line with `#` comments; every
//! key has a default, and [`RunConfig::entries`] echoes the fully resolved
//! set back out, so a run manifest is itself a loadable config.

use std::fs;
use std::path::Path;

use crate::data::SynthConfig;
use crate::error::Result;
use crate::invalid;
use crate::net::ConvSpec;
use crate::train::TrainConfig;

/// Resolved configuration for a run: synthesis knobs plus the full training
/// configuration (network, optimizer, schedule, prune/re-init, attack).
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

fn fmt_conv_stack(stack: &[ConvSpec]) -> String {
    stack
        .iter()
        .map(|c| format!("{}k{}s{}", c.out_channels, c.kernel, c.stride))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_conv_stack(v: &str) -> Result<Vec<ConvSpec>> {
    let mut out = Vec::new();
    for tok in v.split(',') {
        let tok = tok.trim();
        let parsed = (|| {
            let (c, rest) = tok.split_once('k')?;
            let (k, s) = rest.split_once('s')?;
            Some(ConvSpec::new(c.parse().ok()?, k.parse().ok()?, s.parse().ok()?))
        })();
        match parsed {
            Some(spec) => out.push(spec),
            None => {
                return Err(invalid!(
                    "config: conv token '{tok}' is not of the form <out>k<kernel>s<stride> \
                     (e.g. 16k3s2)"
                ))
            }
        }
    }
    if out.is_empty() {
        return Err(invalid!("config: conv_stack must list at least one layer"));
    }
    Ok(out)
}

impl RunConfig {
    /// Set one key. Unknown keys and unparsable values are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! set {
            ($field:expr, $ty:ty) => {{
                $field = value
                    .parse::<$ty>()
                    .map_err(|e| invalid!("config: key '{key}' rejects '{value}': {e}"))?;
                return Ok(());
            }};
        }
        match key {
            "data.subjects_train" => set!(self.synth.subjects_train, usize),
            "data.subjects_val" => set!(self.synth.subjects_val, usize),
            "data.subjects_test" => set!(self.synth.subjects_test, usize),
            "data.samples_per_subject" => set!(self.synth.samples_per_subject, usize),
            "data.patch" => set!(self.synth.patch, usize),
            "data.screen_w_cm" => set!(self.synth.screen_w_cm, f64),
            "data.screen_h_cm" => set!(self.synth.screen_h_cm, f64),
            "data.blob_sigma" => set!(self.synth.blob_sigma, f64),
            "data.blob_intensity" => set!(self.synth.blob_intensity, f64),
            "data.sample_noise_std" => set!(self.synth.sample_noise_std, f64),
            "data.noise_std" => set!(self.synth.noise_std, f64),
            "data.seq_points_per_subject" => set!(self.synth.seq_points_per_subject, usize),
            "data.seq_frames" => set!(self.synth.seq_frames, usize),
            "data.seq_translate_px" => set!(self.synth.seq_translate_px, usize),
            "net.conv_stack" => {
                self.train.net.conv_stack = parse_conv_stack(value)?;
                Ok(())
            }
            "net.feature_dim" => set!(self.train.net.feature_dim, usize),
            "net.bins_x" => set!(self.train.net.bins_x, usize),
            "net.bins_y" => set!(self.train.net.bins_y, usize),
            "train.k" => set!(self.train.k, usize),
            "train.l" => set!(self.train.l, usize),
            "train.warmup_epochs" => set!(self.train.warmup_epochs, usize),
            "train.batch_size" => set!(self.train.batch_size, usize),
            "train.lr" => set!(self.train.lr, f64),
            "train.lr_decay" => set!(self.train.lr_decay, f64),
            "train.momentum" => set!(self.train.momentum, f64),
            "train.bn_momentum" => set!(self.train.bn_momentum, f64),
            "train.lambda_hard" => set!(self.train.weights.lambda_hard, f64),
            "train.lambda_mix" => set!(self.train.weights.lambda_mix, f64),
            "train.lambda_teacher" => set!(self.train.weights.lambda_teacher, f64),
            "train.strategy" => set!(self.train.strategy, crate::distill::TeacherStrategy),
            "train.resample" => set!(self.train.resample, crate::distill::ResamplePolicy),
            "train.teacher_threshold_factor" => set!(self.train.teacher_threshold_factor, f64),
            "train.prune_p" => set!(self.train.prune_p, f64),
            "train.prune_p_max" => set!(self.train.prune_p_max, f64),
            "train.abs_scores" => set!(self.train.abs_scores, bool),
            "train.scalar_per_filter" => set!(self.train.scalar_per_filter, bool),
            "train.reinit_mode" => set!(self.train.reinit_mode, crate::reinit::ReinitMode),
            "train.eval_train_cap" => set!(self.train.eval_train_cap, usize),
            "train.divergence_factor" => set!(self.train.divergence_factor, f64),
            "pgd.epsilon" => set!(self.train.pgd.epsilon, f64),
            "pgd.gamma" => set!(self.train.pgd.gamma, f64),
            "pgd.iters" => set!(self.train.pgd.iters, usize),
            "pgd.half_width" => set!(self.train.pgd.half_width, usize),
            "pgd.org_percent" => set!(self.train.pgd.org_percent, f64),
            "pgd.all_patches" => set!(self.train.pgd.all_patches, bool),
            _ => Err(invalid!("config: unknown key '{key}'")),
        }
    }

    /// Every key with its resolved value, in the order they document best.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.synth;
        let t = &self.train;
        vec![
            ("data.subjects_train", d.subjects_train.to_string()),
            ("data.subjects_val", d.subjects_val.to_string()),
            ("data.subjects_test", d.subjects_test.to_string()),
            ("data.samples_per_subject", d.samples_per_subject.to_string()),
            ("data.patch", d.patch.to_string()),
            ("data.screen_w_cm", d.screen_w_cm.to_string()),
            ("data.screen_h_cm", d.screen_h_cm.to_string()),
            ("data.blob_sigma", d.blob_sigma.to_string()),
            ("data.blob_intensity", d.blob_intensity.to_string()),
            ("data.sample_noise_std", d.sample_noise_std.to_string()),
            ("data.noise_std", d.noise_std.to_string()),
            ("data.seq_points_per_subject", d.seq_points_per_subject.to_string()),
            ("data.seq_frames", d.seq_frames.to_string()),
            ("data.seq_translate_px", d.seq_translate_px.to_string()),
            ("net.conv_stack", fmt_conv_stack(&t.net.conv_stack)),
            ("net.feature_dim", t.net.feature_dim.to_string()),
            ("net.bins_x", t.net.bins_x.to_string()),
            ("net.bins_y", t.net.bins_y.to_string()),
            ("train.k", t.k.to_string()),
            ("train.l", t.l.to_string()),
            ("train.warmup_epochs", t.warmup_epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.lr_decay", t.lr_decay.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.bn_momentum", t.bn_momentum.to_string()),
            ("train.lambda_hard", t.weights.lambda_hard.to_string()),
            ("train.lambda_mix", t.weights.lambda_mix.to_string()),
            ("train.lambda_teacher", t.weights.lambda_teacher.to_string()),
            ("train.strategy", t.strategy.to_string()),
            ("train.resample", t.resample.to_string()),
            ("train.teacher_threshold_factor", t.teacher_threshold_factor.to_string()),
            ("train.prune_p", t.prune_p.to_string()),
            ("train.prune_p_max", t.prune_p_max.to_string()),
            ("train.abs_scores", t.abs_scores.to_string()),
            ("train.scalar_per_filter", t.scalar_per_filter.to_string()),
            ("train.reinit_mode", t.reinit_mode.to_string()),
            ("train.eval_train_cap", t.eval_train_cap.to_string()),
            ("train.divergence_factor", t.divergence_factor.to_string()),
            ("pgd.epsilon", t.pgd.epsilon.to_string()),
            ("pgd.gamma", t.pgd.gamma.to_string()),
            ("pgd.iters", t.pgd.iters.to_string()),
            ("pgd.half_width", t.pgd.half_width.to_string()),
            ("pgd.org_percent", t.pgd.org_percent.to_string()),
            ("pgd.all_patches", t.pgd.all_patches.to_string()),
        ]
    }

    /// Apply a whole config text. `#` starts a comment, blank lines are
    /// skipped, anything else must be `key = value`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(invalid!(
                    "{origin}:{}: expected 'key = value', got '{}'",
                    idx + 1,
                    raw.trim()
                ));
            };
            self.apply(k.trim(), v.trim())
                .map_err(|e| invalid!("{origin}:{}: {e}", idx + 1))?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| invalid!("config: cannot read {}: {e}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Render the run manifest: provenance lines as comments (so the file
    /// stays loadable as a config) followed by every resolved key.
    pub fn manifest(&self, provenance: &[(String, String)]) -> String {
        let mut s = String::new();
        for (k, v) in provenance {
            s.push_str(&format!("# {k} = {v}\n"));
        }
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_entry_round_trips_through_apply() {
        let cfg = RunConfig::default();
        for (k, v) in cfg.entries() {
            let mut fresh = RunConfig::default();
            fresh.apply(k, &v).unwrap_or_else(|e| panic!("{k} = {v}: {e}"));
            let echoed =
                fresh.entries().into_iter().find(|(ek, _)| *ek == k).map(|(_, ev)| ev).unwrap();
            assert_eq!(echoed, v, "{k} did not round-trip");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply("data.subjects", "3").is_err());
        assert!(cfg.apply("train.lr", "fast").is_err());
        assert!(cfg.apply("net.conv_stack", "16x3x2").is_err());
        assert!(cfg.apply("pgd.all_patches", "yes").is_err());
    }

    #[test]
    fn text_parsing_handles_comments_and_spacing() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# full-line comment\n\n  train.lr = 0.5   # trailing comment\nnet.bins_x=9\n",
            "inline",
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.net.bins_x, 9);
        let err = cfg.apply_text("train.lr 0.5\n", "inline").unwrap_err();
        assert!(err.to_string().contains("inline:1"));
    }

    #[test]
    fn conv_stack_parses_and_formats() {
        let mut cfg = RunConfig::default();
        cfg.apply("net.conv_stack", "4k3s2, 8k5s1").unwrap();
        assert_eq!(cfg.train.net.conv_stack.len(), 2);
        assert_eq!(cfg.train.net.conv_stack[1].kernel, 5);
        assert_eq!(cfg.train.net.conv_stack[1].pad, 2);
        assert_eq!(fmt_conv_stack(&cfg.train.net.conv_stack), "4k3s2,8k5s1");
    }

    #[test]
    fn manifest_reloads_as_config() {
        let mut cfg = RunConfig::default();
        cfg.apply("train.lr", "0.123").unwrap();
        cfg.apply("data.blob_sigma", "2.25").unwrap();
        let manifest =
            cfg.manifest(&[("seed".to_string(), "7".to_string())]);
        let mut reloaded = RunConfig::default();
        reloaded.apply_text(&manifest, "manifest").unwrap();
        assert_eq!(reloaded.train.lr, 0.123);
        assert_eq!(reloaded.synth.blob_sigma, 2.25);
        assert_eq!(reloaded.entries(), cfg.entries());
    }
}
