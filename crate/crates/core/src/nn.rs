//! Minimal feedforward value approximator: one ReLU hidden layer, linear
//! outputs (one per action), squared-error loss on the taken action only,
//! trained by plain SGD. Built by hand so its arithmetic is fully inspectable
//! and checkable against finite differences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Fully-connected net with layout input -> hidden (ReLU) -> output (linear).
/// Weight matrices are row-major: `w1[k * input_dim + j]` connects input `j`
/// to hidden unit `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// One regression sample: predict `target` at `input` for output `action`.
#[derive(Debug, Clone)]
pub struct QSample<'a> {
    pub input: &'a [f64],
    pub action: usize,
    pub target: f64,
}

/// Parameter gradients with the same shapes as [`Network`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Network {
    /// Fresh net with weights drawn uniformly from ±1/sqrt(fan-in) and zero
    /// biases. Deterministic given the rng state.
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize, rng: &mut impl Rng) -> Self {
        let lim1 = 1.0 / (input_dim as f64).sqrt();
        let lim2 = 1.0 / (hidden_dim as f64).sqrt();
        Network {
            input_dim,
            hidden_dim,
            output_dim,
            w1: (0..hidden_dim * input_dim)
                .map(|_| rng.gen_range(-lim1..lim1))
                .collect(),
            b1: vec![0.0; hidden_dim],
            w2: (0..output_dim * hidden_dim)
                .map(|_| rng.gen_range(-lim2..lim2))
                .collect(),
            b2: vec![0.0; output_dim],
        }
    }

    /// All-zero net of the given shape (predicts zero everywhere).
    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Network {
            input_dim,
            hidden_dim,
            output_dim,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; output_dim * hidden_dim],
            b2: vec![0.0; output_dim],
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(SimError::ShapeMismatch(format!(
                "input has {} values, net expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden_dim];
        for k in 0..self.hidden_dim {
            let row = &self.w1[k * self.input_dim..(k + 1) * self.input_dim];
            let z: f64 = self.b1[k] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
            h[k] = z.max(0.0);
        }
        h
    }

    /// Predicted value per action.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let h = self.hidden(x);
        let mut q = vec![0.0; self.output_dim];
        for a in 0..self.output_dim {
            let row = &self.w2[a * self.hidden_dim..(a + 1) * self.hidden_dim];
            q[a] = self.b2[a] + row.iter().zip(&h).map(|(w, hk)| w * hk).sum::<f64>();
        }
        Ok(q)
    }

    /// Mean squared error over the batch (taken actions only) and its
    /// gradient with respect to every parameter.
    pub fn gradients(&self, batch: &[QSample<'_>]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(SimError::Domain("empty training batch".into()));
        }
        let mut g = Gradients {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        };
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for s in batch {
            self.check_input(s.input)?;
            if s.action >= self.output_dim {
                return Err(SimError::ShapeMismatch(format!(
                    "action index {} out of range for {} outputs",
                    s.action, self.output_dim
                )));
            }
            let h = self.hidden(s.input);
            let row2 = &self.w2[s.action * self.hidden_dim..(s.action + 1) * self.hidden_dim];
            let q: f64 = self.b2[s.action] + row2.iter().zip(&h).map(|(w, hk)| w * hk).sum::<f64>();
            let err = q - s.target;
            loss += err * err * scale;
            let dq = 2.0 * err * scale;
            g.b2[s.action] += dq;
            for k in 0..self.hidden_dim {
                g.w2[s.action * self.hidden_dim + k] += dq * h[k];
                if h[k] > 0.0 {
                    let dz = dq * row2[k];
                    g.b1[k] += dz;
                    for (j, xi) in s.input.iter().enumerate() {
                        g.w1[k * self.input_dim + j] += dz * xi;
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(SimError::NumericalDivergence(format!(
                "batch loss is {loss}"
            )));
        }
        Ok((loss, g))
    }

    /// Gradient-descent step with learning rate `lr`; errors if any parameter
    /// leaves the finite range.
    pub fn apply(&mut self, g: &Gradients, lr: f64) -> Result<()> {
        for (w, gw) in self.w1.iter_mut().zip(&g.w1) {
            *w -= lr * gw;
        }
        for (b, gb) in self.b1.iter_mut().zip(&g.b1) {
            *b -= lr * gb;
        }
        for (w, gw) in self.w2.iter_mut().zip(&g.w2) {
            *w -= lr * gw;
        }
        for (b, gb) in self.b2.iter_mut().zip(&g.b2) {
            *b -= lr * gb;
        }
        let finite = self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
            .all(|v| v.is_finite());
        if !finite {
            return Err(SimError::NumericalDivergence(
                "network parameter became non-finite after update".into(),
            ));
        }
        Ok(())
    }

    /// One SGD step on the batch; returns the pre-step batch loss.
    pub fn grad_step(&mut self, batch: &[QSample<'_>], lr: f64) -> Result<f64> {
        let (loss, g) = self.gradients(batch)?;
        self.apply(&g, lr)?;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_of(net: &Network, batch: &[QSample<'_>]) -> f64 {
        let mut l = 0.0;
        for s in batch {
            let q = net.forward(s.input).unwrap()[s.action];
            l += (q - s.target) * (q - s.target);
        }
        l / batch.len() as f64
    }

    #[test]
    fn zero_net_predicts_zero() {
        let net = Network::zeros(3, 8, 5);
        let q = net.forward(&[0.2, -1.0, 4.0]).unwrap();
        assert!(q.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_net_composes_relu_and_linear() {
        let mut net = Network::zeros(1, 1, 1);
        net.w1[0] = 0.5;
        net.w2[0] = 2.0;
        assert_relative_eq!(net.forward(&[3.0]).unwrap()[0], 3.0);
        // negative pre-activation is clipped to zero
        assert_relative_eq!(net.forward(&[-3.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn seeded_init_is_reproducible_and_clone_is_independent() {
        let a = Network::new(4, 16, 7, &mut ChaCha8Rng::seed_from_u64(3));
        let b = Network::new(4, 16, 7, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let mut c = a.clone();
        assert_eq!(a.forward(&[0.1; 4]).unwrap(), c.forward(&[0.1; 4]).unwrap());
        c.b2[0] += 1.0;
        assert_ne!(a.forward(&[0.1; 4]).unwrap(), c.forward(&[0.1; 4]).unwrap());
        assert_eq!(a, b, "mutating a clone must not touch the original");
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let net = Network::new(3, 6, 4, &mut rng);
            let inputs: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let batch: Vec<QSample<'_>> = inputs
                .iter()
                .enumerate()
                .map(|(i, x)| QSample {
                    input: x,
                    action: i % 4,
                    target: rng.gen_range(-2.0..2.0),
                })
                .collect();
            let (_, g) = net.gradients(&batch).unwrap();

            let h = 1e-5;
            let check = |get: &dyn Fn(&Network) -> &Vec<f64>,
                             set: &dyn Fn(&mut Network) -> &mut Vec<f64>,
                             grad: &Vec<f64>| {
                for i in 0..get(&net).len() {
                    let mut plus = net.clone();
                    set(&mut plus)[i] += h;
                    let mut minus = net.clone();
                    set(&mut minus)[i] -= h;
                    let fd = (loss_of(&plus, &batch) - loss_of(&minus, &batch)) / (2.0 * h);
                    let denom = grad[i].abs().max(fd.abs()).max(1e-8);
                    assert!(
                        (grad[i] - fd).abs() / denom < 1e-4,
                        "param {i}: analytic {} vs fd {}",
                        grad[i],
                        fd
                    );
                }
            };
            check(&|n| &n.w1, &|n| &mut n.w1, &g.w1);
            check(&|n| &n.b1, &|n| &mut n.b1, &g.b1);
            check(&|n| &n.w2, &|n| &mut n.w2, &g.w2);
            check(&|n| &n.b2, &|n| &mut n.b2, &g.b2);
        }
    }

    #[test]
    fn exact_fit_has_zero_gradient() {
        let mut net = Network::zeros(2, 4, 3);
        net.b2[1] = 0.75;
        let x = [0.3, 0.9];
        let batch = [QSample {
            input: &x,
            action: 1,
            target: 0.75,
        }];
        let before = net.clone();
        let loss = net.grad_step(&batch, 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(net, before, "zero residual must leave parameters untouched");
    }

    #[test]
    fn sgd_fits_a_single_sample() {
        let mut net = Network::new(2, 8, 3, &mut ChaCha8Rng::seed_from_u64(5));
        let x = [0.4, 0.7];
        let batch = [QSample {
            input: &x,
            action: 2,
            target: 1.5,
        }];
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            loss = net.grad_step(&batch, 0.05).unwrap();
        }
        assert!(loss < 1e-6, "final loss {loss}");
    }

    #[test]
    fn divergence_is_reported() {
        let mut net = Network::zeros(1, 1, 1);
        net.w1[0] = 1.0;
        net.w2[0] = 1e300;
        net.b2[0] = 0.0;
        let x = [1e10];
        let batch = [QSample {
            input: &x,
            action: 0,
            target: 0.0,
        }];
        // q = 1e310 overflows the loss
        assert!(matches!(
            net.grad_step(&batch, 0.01),
            Err(SimError::NumericalDivergence(_))
        ));
    }

    #[test]
    fn shape_errors_are_caught() {
        let net = Network::zeros(2, 4, 3);
        assert!(net.forward(&[1.0]).is_err());
        let x = [0.0, 0.0];
        let bad = [QSample {
            input: &x,
            action: 3,
            target: 0.0,
        }];
        assert!(net.gradients(&bad).is_err());
    }

    #[test]
    fn json_round_trip_preserves_parameters_exactly() {
        let net = Network::new(3, 5, 4, &mut ChaCha8Rng::seed_from_u64(21));
        let s = serde_json::to_string(&net).unwrap();
        let back: Network = serde_json::from_str(&s).unwrap();
        assert_eq!(net, back);
    }
}
