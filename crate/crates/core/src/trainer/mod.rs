//! L1-regularized training, magnitude pruning, dead-neuron elimination and
//! compression accounting.
//!
//! The training objective per batch is
//! `mu * mean_cross_entropy + (1 - mu) * sum_l |theta_l|_1`, with biases
//! included in the L1 sum.

mod gradient;
mod prune;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::nn::{LayerMask, LayerParams, ModelGraph, Real};

pub use gradient::{
    gradient_check, l1_norm, objective_gradient, GradCheckReport, ObjectiveGradient, FD_STEP, REL_FLOOR,
};
pub use prune::{compression_ratio, eliminate_neurons, prune, CompressionReport, PruneConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite objective at epoch {epoch}, batch {batch} (loss {loss}, l1 {l1})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
        l1: f64,
    },
    #[error("threshold {threshold} prunes every parameter")]
    AllPruned { threshold: f64 },
    #[error("compressed model retains no parameters")]
    DivideByZero,
    #[error("models have different architectures")]
    ArchitectureMismatch,
    #[error("model expects {expected} inputs, dataset provides {found}")]
    InputMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mu: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            mu: 0.9999,
            epochs: 5,
            seed: 0,
            optimizer: Optimizer::ADAM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return bad("mu must lie strictly between 0 and 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        Ok(())
    }

    /// Shuffle seed for one epoch.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// `mu * loss + (1 - mu) * l1_term`.
    pub objective: f64,
    /// Mean training cross-entropy over the epoch's batches.
    pub loss: f64,
    /// Sum of absolute retained parameters at the end of the epoch.
    pub l1_term: f64,
}

/// Optimizer state for one model.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    step: u64,
    first: Vec<LayerParams<f64>>,
    second: Vec<LayerParams<f64>>,
}

impl OptimizerState {
    pub fn new<T: Real>(kind: Optimizer, params: &[LayerParams<T>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| LayerParams {
                    weights: vec![0.0; p.weights.len()],
                    bias: vec![0.0; p.bias.len()],
                })
                .collect::<Vec<_>>()
        };
        let adam = matches!(kind, Optimizer::Adam { .. });
        Self {
            kind,
            step: 0,
            first: if adam { zeros() } else { Vec::new() },
            second: if adam { zeros() } else { Vec::new() },
        }
    }

    /// Applies one update to the retained parameters.
    pub fn apply<T: Real>(
        &mut self,
        params: &mut [LayerParams<T>],
        grads: &[LayerParams<f64>],
        masks: &[LayerMask],
        learning_rate: f64,
    ) {
        self.step += 1;
        match self.kind {
            Optimizer::Sgd => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(masks) {
                    let w = p.weights.iter_mut().zip(&g.weights).zip(&m.weights);
                    let b = p.bias.iter_mut().zip(&g.bias).zip(&m.bias);
                    for ((v, &gv), &keep) in w.chain(b) {
                        if keep {
                            *v = T::from_f64(v.as_f64() - learning_rate * gv);
                        }
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for l in 0..params.len() {
                    let (p, g, m) = (&mut params[l], &grads[l], &masks[l]);
                    let (m1, m2) = (&mut self.first[l], &mut self.second[l]);
                    let w = p
                        .weights
                        .iter_mut()
                        .zip(&g.weights)
                        .zip(&m.weights)
                        .zip(m1.weights.iter_mut().zip(m2.weights.iter_mut()));
                    let b = p
                        .bias
                        .iter_mut()
                        .zip(&g.bias)
                        .zip(&m.bias)
                        .zip(m1.bias.iter_mut().zip(m2.bias.iter_mut()));
                    for (((v, &gv), &keep), (a, s)) in w.chain(b) {
                        if !keep {
                            continue;
                        }
                        *a = beta1 * *a + (1.0 - beta1) * gv;
                        *s = beta2 * *s + (1.0 - beta2) * gv * gv;
                        let update = learning_rate * (*a / c1) / ((*s / c2).sqrt() + eps);
                        *v = T::from_f64(v.as_f64() - update);
                    }
                }
            }
        }
    }
}

/// Trains `model` in place and returns one [`EpochStats`] per epoch.
pub fn train(model: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>, TrainError> {
    cfg.validate()?;
    if data.sample_len() != model.input_shape().len() {
        return Err(TrainError::InputMismatch {
            expected: model.input_shape().len(),
            found: data.sample_len(),
        });
    }
    let layers = model.layers().to_vec();
    let masks = model.masks().to_vec();
    let mut state = OptimizerState::new(cfg.optimizer, model.params());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, batch) in data.batches(cfg.batch_size, cfg.epoch_seed(epoch))?.enumerate() {
            let g = objective_gradient(&layers, model.params(), &masks, &batch.inputs, &batch.labels, cfg.mu);
            if !g.objective.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: g.loss,
                    l1: g.l1,
                });
            }
            state.apply(model.params_mut(), &g.grads, &masks, cfg.learning_rate);
            loss_sum += g.loss;
            batches += 1;
        }
        model.apply_masks();
        let loss = loss_sum / batches.max(1) as f64;
        let l1_term = l1_norm(model.params(), model.masks());
        let stats = EpochStats {
            epoch: epoch + 1,
            objective: cfg.mu * loss + (1.0 - cfg.mu) * l1_term,
            loss,
            l1_term,
        };
        log::info!(
            "epoch {}: objective {:.6} loss {:.6} l1 {:.3}",
            stats.epoch,
            stats.objective,
            stats.loss,
            stats.l1_term
        );
        curve.push(stats);
    }
    Ok(curve)
}

/// Fraction of correctly classified samples.
pub fn accuracy(model: &ModelGraph, data: &Dataset) -> Result<f64, TrainError> {
    if data.sample_len() != model.input_shape().len() {
        return Err(TrainError::InputMismatch {
            expected: model.input_shape().len(),
            found: data.sample_len(),
        });
    }
    let mut correct = 0usize;
    for i in 0..data.len() {
        let pred = model.predict(&data.input(i)).expect("input size checked");
        if pred == data.label(i) as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageSet, LabelSet};
    use crate::nn::{Activation, LayerSpec, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_rejects_mu_boundaries() {
        for mu in [0.0, 1.0, 1.5] {
            let cfg = TrainConfig {
                mu,
                ..Default::default()
            };
            assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
        }
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn one_sgd_step_matches_hand_gradient() {
        // Two weights, biases masked out: z = (w1 x, w2 x), label 0.
        let layers = vec![LayerSpec::fc(1, 2, Activation::Softmax)];
        let (w1, w2, x, mu, lr) = (0.3f64, -0.7f64, 1.5f64, 0.9, 0.1);
        let mut params = vec![LayerParams {
            weights: vec![w1, w2],
            bias: vec![0.0, 0.0],
        }];
        let masks = vec![LayerMask {
            weights: vec![true, true],
            bias: vec![false, false],
        }];
        let g = objective_gradient(&layers, &params, &masks, &[x as f32], &[0], mu);
        let mut state = OptimizerState::new(Optimizer::Sgd, &params);
        state.apply(&mut params, &g.grads, &masks, lr);

        let (z1, z2) = (w1 * x, w2 * x);
        let p1 = z1.exp() / (z1.exp() + z2.exp());
        let p2 = 1.0 - p1;
        let g1 = mu * (p1 - 1.0) * x + (1.0 - mu) * 1.0;
        let g2 = mu * p2 * x + -(1.0 - mu);
        assert!((params[0].weights[0] - (w1 - lr * g1)).abs() < 1e-9);
        assert!((params[0].weights[1] - (w2 - lr * g2)).abs() < 1e-9);
        assert_eq!(params[0].bias, vec![0.0, 0.0]);
        let loss = -p1.ln();
        assert!((g.objective - (mu * loss + (1.0 - mu) * (w1.abs() + w2.abs()))).abs() < 1e-12);
    }

    #[test]
    fn l1_subgradient_is_zero_at_zero() {
        let layers = vec![LayerSpec::fc(2, 2, Activation::Softmax)];
        let params = vec![LayerParams::<f64> {
            weights: vec![0.0; 4],
            bias: vec![0.0; 2],
        }];
        let masks = vec![LayerMask::full(&layers[0])];
        // zero input: the loss gradient w.r.t. weights vanishes, only L1 could contribute
        let g = objective_gradient(&layers, &params, &masks, &[0.0, 0.0], &[1], 0.5);
        assert!(g.grads[0].weights.iter().all(|&v| v == 0.0));
    }

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        // 4x4 images: class 0 bright left half, class 1 bright right half.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = (i % 2) as u8;
            for _ in 0..4 {
                for c in 0..4 {
                    let bright = (c < 2) == (label == 0);
                    let base: u8 = if bright { 180 } else { 20 };
                    pixels.push(base.saturating_add(rng.random_range(0..60)));
                }
            }
            labels.push(label);
        }
        Dataset::new(
            ImageSet {
                count: n,
                rows: 4,
                cols: 4,
                pixels,
            },
            LabelSet { labels },
        )
        .unwrap()
    }

    fn toy_model(seed: u64) -> ModelGraph {
        let input = Shape {
            channels: 1,
            rows: 4,
            cols: 4,
        };
        let layers = vec![
            LayerSpec::conv(1, 3, 3, 4, 4),
            LayerSpec::pool(3, 4, 4),
            LayerSpec::fc(12, 8, Activation::Relu),
            LayerSpec::fc(8, 2, Activation::Softmax),
        ];
        ModelGraph::new(input, layers, seed).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = toy_dataset(64, 1);
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 8,
            seed: 3,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let mut a = toy_model(5);
        let mut b = toy_model(5);
        let ca = train(&mut a, &data, &cfg).unwrap();
        let cb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
        assert!(ca.last().unwrap().loss < ca[0].loss);
        assert!(accuracy(&a, &data).unwrap() > 0.9);
        let s = ca[2];
        assert!((s.objective - (cfg.mu * s.loss + (1.0 - cfg.mu) * s.l1_term)).abs() < 1e-12);
    }

    #[test]
    fn sgd_training_also_reduces_loss() {
        let data = toy_dataset(64, 2);
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 8,
            learning_rate: 0.1,
            optimizer: Optimizer::Sgd,
            ..Default::default()
        };
        let mut m = toy_model(9);
        let curve = train(&mut m, &data, &cfg).unwrap();
        assert!(curve.last().unwrap().loss < curve[0].loss);
    }

    #[test]
    fn divergence_is_reported() {
        let data = toy_dataset(16, 3);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e30,
            optimizer: Optimizer::Sgd,
            ..Default::default()
        };
        let mut m = toy_model(1);
        assert!(matches!(
            train(&mut m, &data, &cfg),
            Err(TrainError::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn input_size_mismatch() {
        let data = toy_dataset(4, 3);
        let mut m = crate::nn::build_reference_model(0);
        assert!(matches!(
            train(&mut m, &data, &TrainConfig::default()),
            Err(TrainError::InputMismatch {
                expected: 784,
                found: 16
            })
        ));
    }

    #[test]
    fn masked_parameters_stay_zero_during_training() {
        let data = toy_dataset(32, 4);
        let mut m = toy_model(2);
        m.masks_mut()[2].weights[..40].iter_mut().for_each(|k| *k = false);
        m.apply_masks();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        train(&mut m, &data, &cfg).unwrap();
        assert!(m.params()[2].weights[..40].iter().all(|&w| w == 0.0));
    }
}
