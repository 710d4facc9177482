//! Gradient of `mu * cross_entropy + (1 - mu) * sum |theta|` and its
//! finite-difference check.

use crate::nn::{self, Activation, LayerMask, LayerParams, LayerSpec, ModelGraph, Real};

/// Batch gradient with f64 accumulation.
#[derive(Debug, Clone)]
pub struct ObjectiveGradient {
    pub grads: Vec<LayerParams<f64>>,
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Sum of absolute retained parameters.
    pub l1: f64,
    pub objective: f64,
}

pub(crate) fn zero_grads<T: Real>(layers: &[LayerSpec]) -> Vec<LayerParams<T>> {
    layers.iter().map(LayerParams::zeros).collect()
}

pub fn l1_norm<T: Real>(params: &[LayerParams<T>], masks: &[LayerMask]) -> f64 {
    let mut s = 0.0;
    for (p, m) in params.iter().zip(masks) {
        for (v, &keep) in p.weights.iter().zip(&m.weights).chain(p.bias.iter().zip(&m.bias)) {
            if keep {
                s += v.as_f64().abs();
            }
        }
    }
    s
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Cross-entropy of one sample plus its parameter gradient (written into
/// `scratch`), computed with the `T` kernels.
fn sample_gradient<T: Real>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    input: &[f32],
    label: u8,
    scratch: &mut [LayerParams<T>],
) -> f64 {
    let x: Vec<T> = input.iter().map(|&v| T::from_f32(v)).collect();
    let trace = nn::run_range(layers, params, x, 0, layers.len(), true);
    let probs = trace.outputs.last().expect("non-empty model");
    let label = label as usize;
    let loss = -probs[label].as_f64().max(f64::MIN_POSITIVE).ln();
    let mut grad_logits = probs.clone();
    grad_logits[label] -= T::one();
    nn::backprop(layers, params, &trace, grad_logits, scratch);
    loss
}

/// Full objective gradient over a batch. `inputs` holds `labels.len()`
/// flattened samples. Masked parameters get zero gradient; the L1
/// subgradient at exactly zero is zero.
pub fn objective_gradient<T: Real>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    masks: &[LayerMask],
    inputs: &[f32],
    labels: &[u8],
    mu: f64,
) -> ObjectiveGradient {
    assert_eq!(
        layers.last().map(|s| s.activation),
        Some(Activation::Softmax),
        "objective needs a softmax output"
    );
    let batch = labels.len();
    assert!(batch > 0 && inputs.len().is_multiple_of(batch));
    let sample = inputs.len() / batch;
    let mut scratch = zero_grads::<T>(layers);
    let mut acc = zero_grads::<f64>(layers);
    let mut loss_sum = 0.0;
    for (x, &y) in inputs.chunks(sample).zip(labels) {
        loss_sum += sample_gradient(layers, params, x, y, &mut scratch);
        for (a, g) in acc.iter_mut().zip(&scratch) {
            for (av, gv) in a.weights.iter_mut().zip(&g.weights) {
                *av += gv.as_f64();
            }
            for (av, gv) in a.bias.iter_mut().zip(&g.bias) {
                *av += gv.as_f64();
            }
        }
    }
    let scale = mu / batch as f64;
    let l1_weight = 1.0 - mu;
    for ((a, p), m) in acc.iter_mut().zip(params).zip(masks) {
        let pairs = a
            .weights
            .iter_mut()
            .zip(&p.weights)
            .zip(&m.weights)
            .chain(a.bias.iter_mut().zip(&p.bias).zip(&m.bias));
        for ((g, v), &keep) in pairs {
            *g = if keep {
                scale * *g + l1_weight * sign(v.as_f64())
            } else {
                0.0
            };
        }
    }
    let loss = loss_sum / batch as f64;
    let l1 = l1_norm(params, masks);
    ObjectiveGradient {
        grads: acc,
        loss,
        l1,
        objective: mu * loss + l1_weight * l1,
    }
}

fn objective_value(
    layers: &[LayerSpec],
    params: &[LayerParams<f64>],
    masks: &[LayerMask],
    x: &[f64],
    label: u8,
    mu: f64,
) -> (f64, Vec<u64>) {
    let trace = nn::run_range(layers, params, x.to_vec(), 0, layers.len(), false);
    let p = trace.outputs.last().unwrap()[label as usize];
    // activation pattern fingerprint: relu on/off bits and pool winners
    let mut pattern = Vec::new();
    for (spec, out) in layers.iter().zip(&trace.outputs[1..]) {
        if spec.activation == Activation::Relu {
            pattern.extend(out.iter().map(|&v| (v > 0.0) as u64));
        }
    }
    for (l, spec) in layers.iter().enumerate() {
        if let nn::LayerKind::Pool(g) = spec.kind {
            let (_, arg) = nn::kernels::pool_forward(&g, &trace.outputs[l]);
            pattern.extend(arg.into_iter().map(u64::from));
        }
    }
    (mu * -p.ln() + (1.0 - mu) * l1_norm(params, masks), pattern)
}

fn slot(params: &mut [LayerParams<f64>], layer: usize, is_bias: bool, i: usize) -> &mut f64 {
    if is_bias {
        &mut params[layer].bias[i]
    } else {
        &mut params[layer].weights[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates within `step` of the L1 kink at zero.
    pub skipped_l1_kinks: usize,
    /// Coordinates whose perturbation flips a ReLU or a pooling winner.
    pub skipped_activation_kinks: usize,
}

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor for the relative error, guards near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient (f64 instantiation of the training
/// kernels) against central finite differences with step [`FD_STEP`].
pub fn gradient_check(model: &ModelGraph, input: &[f32], label: u8, mu: f64) -> GradCheckReport {
    let layers = model.layers();
    let masks = model.masks();
    let mut params = model.params_as::<f64>();
    let analytic = objective_gradient(layers, &params, masks, input, &[label], mu);
    let x: Vec<f64> = input.iter().map(|&v| v as f64).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_l1_kinks: 0,
        skipped_activation_kinks: 0,
    };
    for l in 0..layers.len() {
        for is_bias in [false, true] {
            let n = if is_bias {
                params[l].bias.len()
            } else {
                params[l].weights.len()
            };
            for i in 0..n {
                let keep = if is_bias { masks[l].bias[i] } else { masks[l].weights[i] };
                if !keep {
                    continue;
                }
                let original = *slot(&mut params, l, is_bias, i);
                if original.abs() < FD_STEP {
                    report.skipped_l1_kinks += 1;
                    continue;
                }
                *slot(&mut params, l, is_bias, i) = original + FD_STEP;
                let (plus, pat_plus) = objective_value(layers, &params, masks, &x, label, mu);
                *slot(&mut params, l, is_bias, i) = original - FD_STEP;
                let (minus, pat_minus) = objective_value(layers, &params, masks, &x, label, mu);
                *slot(&mut params, l, is_bias, i) = original;
                if pat_plus != pat_minus {
                    report.skipped_activation_kinks += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let a = if is_bias {
                    analytic.grads[l].bias[i]
                } else {
                    analytic.grads[l].weights[i]
                };
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                report.max_rel_error = report.max_rel_error.max(rel);
                report.checked += 1;
            }
        }
    }
    report
}
