use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nn::{Activation, LayerKind, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Absolute-value cutoff; parameters with `|v| < threshold` are removed.
    pub threshold: f64,
}

/// Zeroes and masks out every weight and bias with `|v| < threshold`.
/// Returns the number of parameters newly removed. The model is left
/// untouched when the threshold would remove everything.
pub fn prune(model: &mut ModelGraph, cfg: &PruneConfig) -> Result<usize, TrainError> {
    let t = cfg.threshold;
    if t.is_nan() || t < 0.0 {
        return Err(TrainError::InvalidConfig(format!("threshold {t} must be non-negative")));
    }
    let survivors: usize = model
        .params()
        .iter()
        .zip(model.masks())
        .map(|(p, m)| {
            let w = p.weights.iter().zip(&m.weights);
            let b = p.bias.iter().zip(&m.bias);
            w.chain(b).filter(|(v, &keep)| keep && (v.abs() as f64) >= t).count()
        })
        .sum();
    if survivors == 0 {
        return Err(TrainError::AllPruned { threshold: t });
    }
    let mut removed = 0;
    let masks: Vec<_> = model
        .params()
        .iter()
        .zip(model.masks())
        .map(|(p, m)| {
            let mut m = m.clone();
            let w = m.weights.iter_mut().zip(&p.weights);
            let b = m.bias.iter_mut().zip(&p.bias);
            for (keep, v) in w.chain(b) {
                if *keep && (v.abs() as f64) < t {
                    *keep = false;
                    removed += 1;
                }
            }
            m
        })
        .collect();
    model.masks_mut().clone_from_slice(&masks);
    model.apply_masks();
    Ok(removed)
}

/// Marks neurons (fc units, conv channels) dead when all incoming weights
/// and the bias are zero, then zeroes and masks their outgoing weights,
/// repeating until nothing changes. Softmax units are never marked dead:
/// a zero logit still carries probability mass.
/// Returns the number of dead units per layer.
pub fn eliminate_neurons(model: &mut ModelGraph) -> Vec<usize> {
    let depth = model.depth();
    loop {
        let mut changed = false;
        for l in 0..depth {
            let spec = model.layers()[l];
            if matches!(spec.kind, LayerKind::Pool(_)) {
                let mirrored = if l == 0 {
                    vec![true; spec.units()]
                } else {
                    model.alive()[l - 1].clone()
                };
                if model.alive()[l] != mirrored {
                    model.alive_mut()[l] = mirrored;
                    changed = true;
                }
                continue;
            }
            if spec.activation == Activation::Softmax {
                continue;
            }
            let fan_in = spec.fan_in();
            for u in 0..spec.units() {
                if !model.alive()[l][u] {
                    continue;
                }
                let p = &model.params()[l];
                let silent = p.weights[u * fan_in..(u + 1) * fan_in].iter().all(|&w| w == 0.0) && p.bias[u] == 0.0;
                if silent {
                    kill_unit(model, l, u);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    model.apply_masks();
    model
        .alive()
        .iter()
        .map(|a| a.iter().filter(|&&x| !x).count())
        .collect()
}

fn kill_unit(model: &mut ModelGraph, l: usize, u: usize) {
    let spec = model.layers()[l];
    let fan_in = spec.fan_in();
    model.alive_mut()[l][u] = false;
    let m = &mut model.masks_mut()[l];
    m.weights[u * fan_in..(u + 1) * fan_in]
        .iter_mut()
        .for_each(|k| *k = false);
    m.bias[u] = false;

    // Outgoing weights live in the next parameterized layer; pooling in
    // between keeps channel identity.
    let Some(next) = (l + 1..model.depth()).find(|&n| model.layers()[n].has_params()) else {
        return;
    };
    let plane = model.layers()[next - 1].unit_len();
    let next_spec = model.layers()[next];
    let mask = &mut model.masks_mut()[next].weights;
    match next_spec.kind {
        LayerKind::Conv(g) => {
            let kk = g.kernel * g.kernel;
            let per_out = g.in_channels * kk;
            for co in 0..g.out_channels {
                let start = co * per_out + u * kk;
                mask[start..start + kk].iter_mut().for_each(|k| *k = false);
            }
        }
        LayerKind::Fc { in_size, out_size } => {
            for o in 0..out_size {
                let row = o * in_size;
                mask[row + u * plane..row + (u + 1) * plane]
                    .iter_mut()
                    .for_each(|k| *k = false);
            }
        }
        LayerKind::Pool(_) => unreachable!(),
    }
    model.apply_masks();
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub nonzero_original: usize,
    pub nonzero_compressed: usize,
    /// `nonzero_original / nonzero_compressed`.
    pub ratio: f64,
    pub per_layer_nonzeros: Vec<usize>,
    pub dead_neurons_per_layer: Vec<usize>,
}

/// Compression ratio counting weights and biases with a set mask bit.
pub fn compression_ratio(original: &ModelGraph, compressed: &ModelGraph) -> Result<CompressionReport, TrainError> {
    if original.layers() != compressed.layers() || original.input_shape() != compressed.input_shape() {
        return Err(TrainError::ArchitectureMismatch);
    }
    let nonzero_compressed = compressed.retained_count();
    if nonzero_compressed == 0 {
        return Err(TrainError::DivideByZero);
    }
    let nonzero_original = original.retained_count();
    Ok(CompressionReport {
        nonzero_original,
        nonzero_compressed,
        ratio: nonzero_original as f64 / nonzero_compressed as f64,
        per_layer_nonzeros: compressed.masks().iter().map(|m| m.retained()).collect(),
        dead_neurons_per_layer: compressed
            .alive()
            .iter()
            .map(|a| a.iter().filter(|&&x| !x).count())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_reference_model, LayerSpec, Shape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fc_model(seed: u64) -> ModelGraph {
        let input = Shape {
            channels: 1,
            rows: 1,
            cols: 6,
        };
        let layers = vec![
            LayerSpec::fc(6, 5, Activation::Relu),
            LayerSpec::fc(5, 4, Activation::Relu),
            LayerSpec::fc(4, 3, Activation::Softmax),
        ];
        ModelGraph::new(input, layers, seed).unwrap()
    }

    fn conv_model(seed: u64) -> ModelGraph {
        let input = Shape {
            channels: 1,
            rows: 6,
            cols: 6,
        };
        let layers = vec![
            LayerSpec::conv(1, 3, 3, 6, 6),
            LayerSpec::pool(3, 6, 6),
            LayerSpec::conv(3, 4, 3, 3, 3),
            LayerSpec::pool(4, 3, 3),
            LayerSpec::fc(16, 5, Activation::Relu),
            LayerSpec::fc(5, 3, Activation::Softmax),
        ];
        let mut m = ModelGraph::new(input, layers, seed).unwrap();
        // nonzero biases so units are not trivially bias-free
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in m.params_mut() {
            p.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
        m
    }

    #[test]
    fn threshold_zero_is_identity() {
        let mut m = build_reference_model(1);
        let before = m.clone();
        assert_eq!(prune(&mut m, &PruneConfig { threshold: 0.0 }).unwrap(), 0);
        assert_eq!(m, before);
        assert_eq!(compression_ratio(&before, &m).unwrap().ratio, 1.0);
    }

    #[test]
    fn small_weights_removed() {
        let input = Shape {
            channels: 1,
            rows: 1,
            cols: 3,
        };
        let mut m = ModelGraph::zeros(input, vec![LayerSpec::fc(3, 1, Activation::Softmax)]).unwrap();
        m.params_mut()[0].weights = vec![0.5, -0.01, 0.2];
        m.params_mut()[0].bias = vec![0.3];
        prune(&mut m, &PruneConfig { threshold: 0.05 }).unwrap();
        assert_eq!(m.params()[0].weights, vec![0.5, 0.0, 0.2]);
        assert_eq!(m.masks()[0].weights, vec![true, false, true]);
        assert_eq!(m.masks()[0].bias, vec![true]);
    }

    #[test]
    fn biases_follow_the_same_rule() {
        let mut m = fc_model(2);
        m.params_mut()[0].bias[1] = 0.001;
        prune(&mut m, &PruneConfig { threshold: 0.01 }).unwrap();
        assert!(!m.masks()[0].bias[1]);
        assert_eq!(m.params()[0].bias[1], 0.0);
    }

    #[test]
    fn prune_is_idempotent() {
        let mut once = fc_model(3);
        prune(&mut once, &PruneConfig { threshold: 0.3 }).unwrap();
        let mut twice = once.clone();
        assert_eq!(prune(&mut twice, &PruneConfig { threshold: 0.3 }).unwrap(), 0);
        assert_eq!(once, twice);
    }

    #[test]
    fn everything_pruned_is_an_error() {
        let mut m = fc_model(4);
        let before = m.clone();
        assert!(matches!(
            prune(&mut m, &PruneConfig { threshold: 1e9 }),
            Err(TrainError::AllPruned { .. })
        ));
        assert_eq!(m, before);
        assert!(prune(&mut m, &PruneConfig { threshold: -1.0 }).is_err());
    }

    #[test]
    fn ratio_examples() {
        let input = Shape {
            channels: 1,
            rows: 1,
            cols: 9,
        };
        let layers = vec![LayerSpec::fc(9, 10, Activation::Softmax)];
        let original = ModelGraph::new(input, layers, 0).unwrap();
        assert_eq!(original.retained_count(), 100);
        let mut compressed = original.clone();
        for (i, k) in compressed.masks_mut()[0].weights.iter_mut().enumerate() {
            *k = i < 15;
        }
        compressed.masks_mut()[0].bias = vec![true; 10];
        let r = compression_ratio(&original, &compressed).unwrap();
        assert_eq!((r.nonzero_original, r.nonzero_compressed, r.ratio), (100, 25, 4.0));

        compressed.masks_mut()[0].weights.iter_mut().for_each(|k| *k = false);
        compressed.masks_mut()[0].bias.iter_mut().for_each(|k| *k = false);
        assert!(matches!(
            compression_ratio(&original, &compressed),
            Err(TrainError::DivideByZero)
        ));
        assert!(matches!(
            compression_ratio(&original, &fc_model(0)),
            Err(TrainError::ArchitectureMismatch)
        ));
    }

    #[test]
    fn reference_original_count() {
        let m = build_reference_model(0);
        let r = compression_ratio(&m, &m).unwrap();
        assert_eq!(r.nonzero_original, 433_274);
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn dense_model_has_no_dead_neurons() {
        let mut m = conv_model(5);
        let dead = eliminate_neurons(&mut m);
        assert!(dead.iter().all(|&d| d == 0));
    }

    #[test]
    fn zero_fc1_row_kills_neuron_and_its_outgoing_weights() {
        let mut m = fc_model(6);
        m.params_mut()[0].weights[2 * 6..3 * 6]
            .iter_mut()
            .for_each(|w| *w = 0.0);
        m.params_mut()[0].bias[2] = 0.0;
        let dead = eliminate_neurons(&mut m);
        assert_eq!(dead, vec![1, 0, 0]);
        assert!(!m.alive()[0][2]);
        for o in 0..4 {
            assert!(!m.masks()[1].weights[o * 5 + 2]);
            assert_eq!(m.params()[1].weights[o * 5 + 2], 0.0);
        }
        assert_eq!(m.output_size(1).unwrap(), 4);
    }

    #[test]
    fn elimination_cascades_through_conv_and_pool() {
        let mut m = conv_model(7);
        // conv1 channel 1 silent -> pool1 channel 1 dead -> conv2 loses that input slice
        m.params_mut()[0].weights[9..18].iter_mut().for_each(|w| *w = 0.0);
        m.params_mut()[0].bias[1] = 0.0;
        // conv2 channel 3 only reads from conv1 channel 1 and has no bias
        for ci in [0, 2] {
            let s = 3 * 27 + ci * 9;
            m.params_mut()[2].weights[s..s + 9].iter_mut().for_each(|w| *w = 0.0);
        }
        m.params_mut()[2].bias[3] = 0.0;
        let dead = eliminate_neurons(&mut m);
        assert_eq!(dead, vec![1, 1, 1, 1, 0, 0]);
        assert!(!m.alive()[3][3]);
        // fc1 columns fed by pool2 channel 3 (4 elements each)
        for o in 0..5 {
            assert!((12..16).all(|i| !m.masks()[4].weights[o * 16 + i]));
        }
        assert_eq!(m.output_size(2).unwrap(), 2 * 9);
        assert_eq!(m.output_size(4).unwrap(), 3 * 4);
    }

    #[test]
    fn softmax_units_never_die() {
        let mut m = fc_model(8);
        m.params_mut()[2].weights[..4].iter_mut().for_each(|w| *w = 0.0);
        m.params_mut()[2].bias[0] = 0.0;
        assert_eq!(eliminate_neurons(&mut m)[2], 0);
    }

    fn max_output_diff(a: &ModelGraph, b: &ModelGraph, seed: u64) -> f32 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = a.input_shape().len();
        let mut worst = 0.0f32;
        for _ in 0..100 {
            let x: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let pa = a.forward_full(&x).unwrap().probs;
            let pb = b.forward_full(&x).unwrap().probs;
            for (u, v) in pa.iter().zip(&pb) {
                worst = worst.max((u - v).abs());
            }
        }
        worst
    }

    #[test]
    fn elimination_preserves_outputs() {
        let mut m = conv_model(9);
        // conv1 channel 0 and fc1 unit 2 fall entirely below the threshold
        m.params_mut()[0].weights[..9].iter_mut().for_each(|w| *w *= 0.2);
        m.params_mut()[4].weights[32..48].iter_mut().for_each(|w| *w *= 0.1);
        prune(&mut m, &PruneConfig { threshold: 0.25 }).unwrap();
        let before = m.clone();
        let dead: usize = eliminate_neurons(&mut m).iter().sum();
        assert!(dead > 0, "threshold should create dead units");
        assert!(max_output_diff(&before, &m, 1) <= 1e-7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn pruning_is_monotone(seed in 0u64..1000, t1 in 0.0f64..0.6, dt in 0.0f64..0.6) {
            let t2 = t1 + dt;
            let mut a = conv_model(seed);
            let mut b = a.clone();
            let ra = prune(&mut a, &PruneConfig { threshold: t1 });
            let rb = prune(&mut b, &PruneConfig { threshold: t2 });
            if ra.is_ok() {
                let nb = if rb.is_ok() { b.retained_count() } else { 0 };
                prop_assert!(a.retained_count() >= nb);
            } else {
                prop_assert!(rb.is_err());
            }
        }

        #[test]
        fn elimination_is_function_preserving(seed in 0u64..1000, t in 0.0f64..0.5) {
            let mut m = conv_model(seed);
            if prune(&mut m, &PruneConfig { threshold: t }).is_ok() {
                let before = m.clone();
                eliminate_neurons(&mut m);
                prop_assert!(max_output_diff(&before, &m, seed) <= 1e-7);
                prop_assert!(m.retained_count() <= before.retained_count());
            }
        }
    }
}
