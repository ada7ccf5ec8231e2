//! Central finite-difference validation of analytic gradients.
//!
//! The checker perturbs every parameter element by ±h, re-evaluates the
//! forward closure, and compares the quotient against the tape's backward
//! result using the guarded relative error `|a-fd| / max(1, |a|, |fd|)`
//! (plain relative error is meaningless where the true derivative is ~0).

use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub finite: bool,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.finite)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.all_finite() && self.max_rel_err() <= tol
    }

    pub fn worst(&self) -> Option<&CheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
    }
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences with step `h`, for every element of every parameter.
///
/// `build` is called with leaves in the same order as `params`; it must be a
/// pure function of those leaves (any internal constants must stay fixed
/// across calls).
pub fn check_gradients<F>(params: &[(String, Tensor)], build: F, h: f64) -> CheckReport
where
    F: Fn(&mut Tape, &[Val]) -> Val,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vals: Vec<Val> = params.iter().map(|(_, t)| tape.leaf(t, true)).collect();
    let loss = build(&mut tape, &vals);
    let loss_value = tape.value(loss);
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .zip(&vals)
        .map(|((_, t), &v)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |trial: &[(String, Tensor)]| -> f64 {
        let mut tape = Tape::new();
        let vals: Vec<Val> = trial.iter().map(|(_, t)| tape.leaf(t, false)).collect();
        let loss = build(&mut tape, &vals);
        tape.value(loss)
    };

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut report = CheckReport::default();
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut max_err = 0.0f64;
        let mut finite = loss_value.is_finite();
        for j in 0..work[pi].1.numel() {
            let orig = work[pi].1.data[j];
            work[pi].1.data[j] = orig + h;
            let up = eval(&work);
            work[pi].1.data[j] = orig - h;
            let down = eval(&work);
            work[pi].1.data[j] = orig;

            let fd = (up - down) / (2.0 * h);
            let a = analytic[pi][j];
            if !a.is_finite() || !fd.is_finite() {
                finite = false;
                max_err = f64::INFINITY;
                continue;
            }
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            max_err = max_err.max(err);
        }
        report.entries.push(CheckEntry { name: name.clone(), max_rel_err: max_err, finite });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tape::OpKind;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-5;
    const H: f64 = 1e-5;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(shape, data)
    }

    /// Random values kept away from zero so ReLU's kink cannot straddle ±h.
    fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) { v } else { -v }
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn linear_layer_passes() {
        let mut rng = stream(11, "gradcheck");
        for _ in 0..5 {
            let params = vec![
                ("x".into(), rand_tensor(&mut rng, &[3, 4], -1.0, 1.0)),
                ("w".into(), rand_tensor(&mut rng, &[2, 4], -1.0, 1.0)),
                ("b".into(), rand_tensor(&mut rng, &[2], -1.0, 1.0)),
            ];
            let report = check_gradients(
                &params,
                |tape, v| {
                    let y = tape.linear(v[0], v[1], v[2]);
                    let s = tape.sigmoid(y);
                    tape.sum(s)
                },
                H,
            );
            assert!(report.passed(TOL), "linear: {:?}", report.worst());
        }
    }

    #[test]
    fn conv_passes_with_stride_and_pad() {
        let mut rng = stream(12, "gradcheck");
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let params = vec![
                ("x".into(), rand_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0)),
                ("w".into(), rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0)),
            ];
            let report = check_gradients(
                &params,
                move |tape, v| {
                    let y = tape.conv2d(v[0], v[1], stride, pad);
                    let s = tape.sigmoid(y);
                    tape.mean(s)
                },
                H,
            );
            assert!(report.passed(TOL), "conv s{stride} p{pad}: {:?}", report.worst());
        }
    }

    #[test]
    fn batchnorm_train_passes() {
        let mut rng = stream(13, "gradcheck");
        let params = vec![
            ("x".into(), rand_tensor(&mut rng, &[4, 3, 2, 2], -2.0, 2.0)),
            ("scale".into(), rand_tensor(&mut rng, &[3], 0.5, 1.5)),
            ("shift".into(), rand_tensor(&mut rng, &[3], -0.5, 0.5)),
        ];
        let report = check_gradients(
            &params,
            |tape, v| {
                let y = tape.batchnorm_train(v[0], v[1], v[2], 1e-5);
                let s = tape.sigmoid(y);
                tape.mean(s)
            },
            H,
        );
        assert!(report.passed(1e-4), "bn train: {:?}", report.worst());
    }

    #[test]
    fn batchnorm_eval_passes() {
        let mut rng = stream(14, "gradcheck");
        let params = vec![
            ("x".into(), rand_tensor(&mut rng, &[2, 3, 2, 2], -2.0, 2.0)),
            ("scale".into(), rand_tensor(&mut rng, &[3], 0.5, 1.5)),
            ("shift".into(), rand_tensor(&mut rng, &[3], -0.5, 0.5)),
        ];
        let rm = [0.1, -0.2, 0.05];
        let rv = [1.1, 0.9, 1.3];
        let report = check_gradients(
            &params,
            move |tape, v| {
                let y = tape.batchnorm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5);
                let s = tape.sigmoid(y);
                tape.mean(s)
            },
            H,
        );
        assert!(report.passed(TOL), "bn eval: {:?}", report.worst());
    }

    #[test]
    fn pointwise_and_reduction_ops_pass() {
        let mut rng = stream(15, "gradcheck");
        let params = vec![
            ("a".into(), rand_tensor_off_zero(&mut rng, &[3, 5])),
            ("b".into(), rand_tensor_off_zero(&mut rng, &[3, 5])),
        ];
        let report = check_gradients(
            &params,
            |tape, v| {
                let r = tape.relu(v[0]);
                let m = tape.mul(r, v[1]);
                let sc = tape.scale(m, 0.7);
                let rs = tape.row_scale(sc, &[0.5, 2.0, -1.0]);
                let tr = tape.take_rows(rs, &[2, 0, 1, 0]);
                let a = tape.add(tr, tr);
                let sg = tape.sigmoid(a);
                let c = tape.concat_cols(&[sg, tr]);
                tape.mean(c)
            },
            H,
        );
        assert!(report.passed(TOL), "pointwise: {:?}", report.worst());
    }

    #[test]
    fn gap_and_bce_pass() {
        let mut rng = stream(16, "gradcheck");
        let b = 6;
        let target: Vec<f64> = (0..2 * b).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let weight: Vec<f64> = (0..2 * b).map(|i| if i % 4 == 0 { 0.0 } else { 1.0 }).collect();
        let params = vec![("x".into(), rand_tensor(&mut rng, &[2, b, 2, 2], -1.5, 1.5))];
        let report = check_gradients(
            &params,
            move |tape, v| {
                let g = tape.global_avg_pool(v[0]);
                let p = tape.sigmoid(g);
                tape.bce_weighted(p, &target, &weight, 1e-7)
            },
            H,
        );
        assert!(report.passed(TOL), "gap+bce: {:?}", report.worst());
    }

    #[test]
    fn two_layer_net_passes() {
        let mut rng = stream(17, "gradcheck");
        let params = vec![
            ("x".into(), rand_tensor(&mut rng, &[2, 1, 6, 6], -1.0, 1.0)),
            ("w1".into(), rand_tensor(&mut rng, &[3, 1, 3, 3], -0.5, 0.5)),
            ("w2".into(), rand_tensor(&mut rng, &[4, 3], -0.5, 0.5)),
            ("b2".into(), rand_tensor(&mut rng, &[4], -0.5, 0.5)),
        ];
        let report = check_gradients(
            &params,
            |tape, v| {
                let c = tape.conv2d(v[0], v[1], 2, 1);
                let r = tape.sigmoid(c);
                let g = tape.global_avg_pool(r);
                let y = tape.linear(g, v[2], v[3]);
                let s = tape.sigmoid(y);
                tape.sum(s)
            },
            H,
        );
        assert!(report.passed(TOL), "2-layer: {:?}", report.worst());
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let mut rng = stream(18, "gradcheck");
        let params = vec![
            ("x".into(), rand_tensor(&mut rng, &[3, 4], -1.0, 1.0)),
            ("w".into(), rand_tensor(&mut rng, &[2, 4], -1.0, 1.0)),
            ("b".into(), rand_tensor(&mut rng, &[2], -1.0, 1.0)),
        ];
        let report = check_gradients(
            &params,
            |tape, v| {
                tape.inject_backward_fault(OpKind::Linear);
                let y = tape.linear(v[0], v[1], v[2]);
                let s = tape.sigmoid(y);
                tape.sum(s)
            },
            H,
        );
        assert!(!report.passed(TOL), "fault injection must be detected");
        assert!(report.max_rel_err() > 0.01);
    }

    #[test]
    fn untouched_parameter_reports_zero_error() {
        let params = vec![
            ("used".into(), Tensor::from_vec(&[1, 2], vec![0.4, -0.3])),
            ("unused".into(), Tensor::from_vec(&[1, 2], vec![1.0, 2.0])),
        ];
        let report = check_gradients(
            &params,
            |tape, v| {
                let s = tape.sigmoid(v[0]);
                tape.sum(s)
            },
            H,
        );
        assert!(report.passed(TOL));
    }
}
