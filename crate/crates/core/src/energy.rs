//! Per-layer operation counts and client-side processing energy.
//!
//! `E_c = e_M * M + e_A * A` for arithmetic and `E_m = ceil(Gamma / 2) * e_m64`
//! for parameter fetches (two 32-bit elements per 64-bit access). Only
//! retained parameters are counted; dead units cost nothing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, LayerKind, LayerMask, LayerSpec, ModelGraph};

pub const PICO: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("energy constant {name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Int8,
    Fp16,
    Int32,
    Fp32,
}

impl Precision {
    /// (addition, multiplication) energy in joules.
    pub fn op_energy(self) -> (f64, f64) {
        let (a, m) = match self {
            Precision::Int8 => (0.03, 0.2),
            Precision::Fp16 => (0.4, 1.1),
            Precision::Int32 => (0.1, 3.1),
            Precision::Fp32 => (0.9, 3.7),
        };
        (a * PICO, m * PICO)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryTier {
    Cache8k,
    Cache32k,
    Cache1m,
    Dram,
}

impl MemoryTier {
    /// Energy of one 64-bit access. DRAM uses the low end of 1.3-2.6 nJ.
    pub fn access_energy(self) -> f64 {
        match self {
            MemoryTier::Cache8k => 10.0 * PICO,
            MemoryTier::Cache32k => 20.0 * PICO,
            MemoryTier::Cache1m => 100.0 * PICO,
            MemoryTier::Dram => 1300.0 * PICO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    /// Joules per addition.
    pub e_add: f64,
    /// Joules per multiplication.
    pub e_mul: f64,
    /// Joules per 64-bit memory access.
    pub e_m64: f64,
    pub precision: Precision,
    /// Charge ReLU and max-pool comparisons as additions.
    pub charge_comparisons: bool,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self::new(Precision::Fp32, MemoryTier::Dram)
    }
}

impl EnergyConstants {
    pub fn new(precision: Precision, tier: MemoryTier) -> Self {
        let (e_add, e_mul) = precision.op_energy();
        Self {
            e_add,
            e_mul,
            e_m64: tier.access_energy(),
            precision,
            charge_comparisons: false,
        }
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        for (name, value) in [("e_add", self.e_add), ("e_mul", self.e_mul), ("e_m64", self.e_m64)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(EnergyError::NonPositive { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// Multiplications.
    pub m: u64,
    /// Additions.
    pub a: u64,
    /// ReLU / max-pool comparisons (free unless charged).
    pub comparisons: u64,
    /// Parameter elements fetched: retained weights and biases.
    pub gamma: u64,
    /// Transmitted output elements.
    pub d_out: u64,
}

/// Operation counts of one layer. `alive` flags its output units.
pub fn layer_op_counts(spec: &LayerSpec, mask: &LayerMask, alive: &[bool]) -> LayerCost {
    let mut cost = LayerCost {
        gamma: mask.retained() as u64,
        d_out: (alive.iter().filter(|&&a| a).count() * spec.unit_len()) as u64,
        ..Default::default()
    };
    let fan_in = spec.fan_in();
    let positions = spec.unit_len() as u64;
    match spec.kind {
        LayerKind::Conv(_) | LayerKind::Fc { .. } => {
            for (u, _) in alive.iter().enumerate().filter(|(_, &a)| a) {
                let w = mask.weights[u * fan_in..(u + 1) * fan_in]
                    .iter()
                    .filter(|&&k| k)
                    .count() as u64;
                let terms = w + mask.bias[u] as u64;
                cost.m += w * positions;
                cost.a += terms.saturating_sub(1) * positions;
            }
        }
        LayerKind::Pool(g) => {
            // ceil mode: border windows may hold fewer than four inputs
            let (oh, ow) = (g.out_rows(), g.out_cols());
            let mut per_channel = 0u64;
            for oy in 0..oh {
                for ox in 0..ow {
                    let h = (g.rows - 2 * oy).min(2);
                    let w = (g.cols - 2 * ox).min(2);
                    per_channel += (h * w - 1) as u64;
                }
            }
            cost.comparisons = per_channel * alive.iter().filter(|&&a| a).count() as u64;
        }
    }
    if spec.activation == Activation::Relu {
        cost.comparisons += cost.d_out;
    }
    cost
}

pub fn computation_energy(cost: &LayerCost, consts: &EnergyConstants) -> f64 {
    let mut adds = cost.a;
    if consts.charge_comparisons {
        adds += cost.comparisons;
    }
    consts.e_mul * cost.m as f64 + consts.e_add * adds as f64
}

pub fn memory_energy(gamma: u64, consts: &EnergyConstants) -> f64 {
    gamma.div_ceil(2) as f64 * consts.e_m64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub name: String,
    pub kind: String,
    pub cost: LayerCost,
    pub e_c: f64,
    pub e_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub per_layer: Vec<LayerEnergy>,
    /// `d[l]`: elements transmitted at cut `l`; `d[0]` is the raw input.
    pub d: Vec<u64>,
    /// `prefix_e_p[l]`: processing energy of the first `l` layers.
    pub prefix_e_p: Vec<f64>,
}

impl CostProfile {
    pub fn depth(&self) -> usize {
        self.per_layer.len()
    }

    /// CSV with columns `layer,kind,M,A,Gamma,d_out,E_c,E_m,E_p_prefix`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,M,A,Gamma,d_out,E_c,E_m,E_p_prefix\n");
        for (i, l) in self.per_layer.iter().enumerate() {
            let c = &l.cost;
            writeln!(
                out,
                "{},{},{},{},{},{},{:.5e},{:.5e},{:.5e}",
                l.name,
                l.kind,
                c.m,
                c.a,
                c.gamma,
                c.d_out,
                l.e_c,
                l.e_m,
                self.prefix_e_p[i + 1]
            )
            .expect("writing to a String");
        }
        out
    }
}

pub fn cost_profile(model: &ModelGraph, consts: &EnergyConstants) -> CostProfile {
    let names = model.layer_names();
    let mut per_layer = Vec::with_capacity(model.depth());
    let mut d = vec![model.input_shape().len() as u64];
    let mut prefix_e_p = vec![0.0];
    for (l, spec) in model.layers().iter().enumerate() {
        let cost = layer_op_counts(spec, &model.masks()[l], &model.alive()[l]);
        let e_c = computation_energy(&cost, consts);
        let e_m = memory_energy(cost.gamma, consts);
        d.push(cost.d_out);
        prefix_e_p.push(prefix_e_p[l] + e_c + e_m);
        per_layer.push(LayerEnergy {
            name: names[l].clone(),
            kind: names[l].trim_end_matches(|c: char| c.is_ascii_digit()).to_string(),
            cost,
            e_c,
            e_m,
        });
    }
    CostProfile {
        per_layer,
        d,
        prefix_e_p,
    }
}
