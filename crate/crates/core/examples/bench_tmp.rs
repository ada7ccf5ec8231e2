use std::time::Instant;

use regaze::data::{generate, Dataset, SynthConfig};
use regaze::net::{ConvSpec, NetConfig};
use regaze::robust::PgdConfig;
use regaze::train::{run, Scheme, TrainConfig};

fn env_f64(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}
fn env_usize(k: &str, d: usize) -> usize {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let subjects_train = env_usize("SUBJ", 10);
    let per = env_usize("PER", 500);
    let noise = env_f64("NOISE", 2.0);
    let seqn = env_f64("SEQN", 4.0);
    let trans = env_usize("TRANS", 1);
    let subjects_val = env_usize("VSUBJ", 2);
    let subjects_test = env_usize("TSUBJ", 2);
    let blob = env_f64("BLOB", 1.5);
    let dir = std::env::temp_dir().join(format!(
        "regaze-bench-{subjects_train}-{subjects_val}-{subjects_test}-{per}-{noise}-{seqn}-{trans}-{blob}"
    ));
    let synth = SynthConfig {
        subjects_train,
        subjects_val,
        subjects_test,
        samples_per_subject: per,
        patch: 24,
        blob_sigma: blob,
        sample_noise_std: noise,
        noise_std: seqn,
        seq_points_per_subject: 8,
        seq_frames: 16,
        seq_translate_px: trans,
        seed: 5,
        ..SynthConfig::default()
    };
    if !dir.join("header").exists() {
        generate(&synth, &dir).unwrap();
    }
    let ds = Dataset::load(&dir).unwrap();
    println!(
        "dataset: {} train / {} val / {} test",
        ds.ids(regaze::data::Split::Train).len(),
        ds.ids(regaze::data::Split::Val).len(),
        ds.ids(regaze::data::Split::Test).len()
    );

    let scheme: Scheme = std::env::var("SCHEME").unwrap_or("plain".into()).parse().unwrap();
    let convs: Vec<usize> = std::env::var("CONVS")
        .unwrap_or("8,16,32,32".into())
        .split(',')
        .map(|t| t.trim().parse().unwrap())
        .collect();
    let net = NetConfig {
        patch: 24,
        conv_stack: convs
            .iter()
            .enumerate()
            .map(|(i, &c)| ConvSpec::new(c, 3, if i < 3 { 2 } else { 1 }))
            .collect(),
        feature_dim: env_usize("FEAT", 64),
        bins_x: 72,
        bins_y: 98,
        ..NetConfig::default()
    };
    let cfg = TrainConfig {
        net,
        scheme,
        k: env_usize("K", 3),
        l: env_usize("L", 5),
        warmup_epochs: 1,
        lr: env_f64("LR", 0.05),
        batch_size: env_usize("BATCH", 128),
        seed: env_usize("SEED", 1) as u64,
        weights: regaze::distill::LossWeights {
            lambda_hard: env_f64("WH", 0.2),
            lambda_mix: env_f64("WM", 0.4),
            lambda_teacher: env_f64("WT", 0.6),
        },
        strategy: std::env::var("STRAT").unwrap_or("random".into()).parse().unwrap(),
        pgd: PgdConfig {
            org_percent: env_f64("ORG", 90.0),
            epsilon: env_f64("EPS", 3.0),
            gamma: env_f64("GAMMA", 1.0),
            ..PgdConfig::default()
        },
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let out = run(&cfg, &ds, |r| {
        println!(
            "epoch {:2} gen {} train {:.3} val {:.3}  [{:5.1}s]",
            r.epoch,
            r.minigen,
            r.train_err_cm,
            r.val_err_cm,
            t.elapsed().as_secs_f64()
        );
    })
    .unwrap();
    let test_ids = ds.ids(regaze::data::Split::Test);
    let test_err = regaze::train::evaluate(&out.model, &ds, &test_ids);
    let last = out.history.last().unwrap();
    println!(
        "scheme {scheme} seed {}: final train {:.3} val {:.3} test {:.3} gap {:+.3} ({:.1}s total)",
        cfg.seed,
        last.train_err_cm,
        last.val_err_cm,
        test_err,
        last.val_err_cm - last.train_err_cm,
        t.elapsed().as_secs_f64()
    );
    for w in &out.warnings {
        println!("warning: {w}");
    }
    if !ds.sequences.is_empty() {
        let grid = std::env::var("MSDS").unwrap_or_else(|_| "0".into());
        for tok in grid.split(',') {
            let ns: f64 = tok.trim().parse().unwrap();
            let msd = regaze::robust::msd_model(&out.model, &ds, ns, 0).unwrap();
            println!("msd@{ns} {:.4} cm over {} sequences", msd.msd_cm, msd.per_sequence.len());
        }
    }
}
