//! Mini-batch SGD with classical momentum.
//!
//! Update rule per parameter: `v ← μ·v + g`, `w ← w − lr·v`. Velocity buffers
//! are created on first use and keyed positionally, so every step must pass
//! the same parameters in the same order.

use crate::tensor::Tensor;

pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Sgd {
        assert!((0.0..1.0).contains(&momentum), "sgd: momentum {momentum} outside [0, 1)");
        Sgd { momentum, velocity: Vec::new() }
    }

    /// Apply one update. `pairs` is (parameter, gradient) in a fixed order;
    /// a `None` gradient (parameter unused by this loss) decays its velocity.
    pub fn step(&mut self, lr: f64, pairs: &mut [(&mut Tensor, Option<&[f64]>)]) {
        if self.velocity.is_empty() {
            self.velocity = pairs.iter().map(|(t, _)| vec![0.0; t.numel()]).collect();
        }
        assert_eq!(
            self.velocity.len(),
            pairs.len(),
            "sgd: step called with {} parameters, velocity tracks {}",
            pairs.len(),
            self.velocity.len()
        );
        for (i, (tensor, grad)) in pairs.iter_mut().enumerate() {
            let v = &mut self.velocity[i];
            assert_eq!(v.len(), tensor.numel(), "sgd: parameter {i} changed size");
            if let Some(g) = grad {
                assert_eq!(g.len(), v.len(), "sgd: gradient {i} has wrong length");
                for (vj, &gj) in v.iter_mut().zip(g.iter()) {
                    *vj = self.momentum * *vj + gj;
                }
            } else {
                for vj in v.iter_mut() {
                    *vj *= self.momentum;
                }
            }
            for (wj, &vj) in tensor.data.iter_mut().zip(v.iter()) {
                *wj -= lr * vj;
            }
        }
    }

    /// Drop all velocity (used when the parameter set is rebuilt).
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_momentum_is_plain_gradient_descent() {
        let mut sgd = Sgd::new(0.0);
        let mut w = Tensor::from_vec(&[2], vec![1.0, -2.0]);
        let g = [0.5, 0.25];
        sgd.step(0.1, &mut [(&mut w, Some(&g))]);
        assert_eq!(w.data, vec![1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut sgd = Sgd::new(0.9);
        let mut w = Tensor::from_vec(&[1], vec![0.0]);
        let g = [1.0];
        sgd.step(1.0, &mut [(&mut w, Some(&g))]);
        assert_eq!(w.data[0], -1.0); // v = 1
        sgd.step(1.0, &mut [(&mut w, Some(&g))]);
        assert_eq!(w.data[0], -1.0 - 1.9); // v = 0.9 + 1
        sgd.step(1.0, &mut [(&mut w, None)]);
        assert!((w.data[0] - (-2.9 - 1.71)).abs() < 1e-12); // v decays to 0.9 * 1.9
    }

    #[test]
    fn matches_reference_recursion_on_random_sequence() {
        use rand::Rng;
        let mut rng = crate::rng::stream(3, "optim-test");
        let mu = 0.9;
        let lr = 0.01;
        let mut sgd = Sgd::new(mu);
        let mut w = Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]);
        let mut w_ref = w.data.clone();
        let mut v_ref = vec![0.0; 3];
        for _ in 0..50 {
            let g: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            sgd.step(lr, &mut [(&mut w, Some(&g))]);
            for j in 0..3 {
                v_ref[j] = mu * v_ref[j] + g[j];
                w_ref[j] -= lr * v_ref[j];
            }
        }
        for j in 0..3 {
            assert!((w.data[j] - w_ref[j]).abs() < 1e-15);
        }
    }

    #[test]
    #[should_panic(expected = "changed size")]
    fn resized_parameter_is_rejected() {
        let mut sgd = Sgd::new(0.5);
        let mut w = Tensor::zeros(&[2]);
        let g = [1.0, 1.0];
        sgd.step(0.1, &mut [(&mut w, Some(&g))]);
        let mut w2 = Tensor::zeros(&[3]);
        let g2 = [1.0, 1.0, 1.0];
        sgd.step(0.1, &mut [(&mut w2, Some(&g2))]);
    }
}
