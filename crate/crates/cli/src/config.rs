//! Run configuration. Every physical quantity is a string carrying its unit,
//! e.g. `W = "5 MHz"`; bare numbers are rejected for those keys.

use std::fmt;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::{self, Deserializer, Visitor};
use serde::Deserialize;
use splitinf_core::{
    CutOptions, EnergyConstants, LinkConfig, MemoryTier, Optimizer, PathLoss, Policy, Precision, PruneConfig,
    SimConfig, TrainConfig, Trajectory, Waypoint,
};

pub trait Unit {
    const WHAT: &'static str;
    const UNITS: &'static [(&'static str, f64)];
}

macro_rules! unit {
    ($name:ident, $what:literal, [$($sym:literal => $scale:expr),+ $(,)?]) => {
        pub enum $name {}
        impl Unit for $name {
            const WHAT: &'static str = $what;
            const UNITS: &'static [(&'static str, f64)] = &[$(($sym, $scale)),+];
        }
    };
}

unit!(Frequency, "frequency", ["Hz" => 1.0, "kHz" => 1e3, "MHz" => 1e6, "GHz" => 1e9]);
unit!(Power, "power", ["W" => 1.0, "mW" => 1e-3, "uW" => 1e-6, "µW" => 1e-6, "nW" => 1e-9]);
unit!(Psd, "noise spectral density", ["W/Hz" => 1.0, "mW/Hz" => 1e-3]);
unit!(Time, "time", ["s" => 1.0, "ms" => 1e-3, "us" => 1e-6, "µs" => 1e-6, "min" => 60.0, "h" => 3600.0]);
unit!(Length, "length", ["m" => 1.0, "cm" => 1e-2, "km" => 1e3]);
unit!(Carbon, "carbon intensity", ["kg/kWh" => 1.0, "g/kWh" => 1e-3]);

/// A value in SI base units, parsed from `"<number> <unit>"`.
pub struct Quantity<U> {
    pub si: f64,
    unit: PhantomData<U>,
}

impl<U> Clone for Quantity<U> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<U> Copy for Quantity<U> {}

impl<U> fmt::Debug for Quantity<U> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:e}", self.si)
    }
}

impl<U: Unit> Quantity<U> {
    pub fn si(si: f64) -> Self {
        Self { si, unit: PhantomData }
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        let units = || U::UNITS.iter().map(|u| u.0).collect::<Vec<_>>().join(", ");
        let mut parts = s.split_whitespace();
        let (Some(num), Some(sym), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format!(
                "{} {s:?}: expected \"<number> <unit>\" with unit one of {}",
                U::WHAT,
                units()
            ));
        };
        let value: f64 = num
            .parse()
            .map_err(|_| format!("{} {s:?}: {num:?} is not a number", U::WHAT))?;
        if !value.is_finite() {
            return Err(format!("{} {s:?} is not finite", U::WHAT));
        }
        match U::UNITS.iter().find(|u| u.0 == sym) {
            Some(&(_, scale)) => Ok(Self::si(value * scale)),
            None => Err(format!(
                "{} {s:?}: unknown unit {sym:?}, expected one of {}",
                U::WHAT,
                units()
            )),
        }
    }
}

impl<'de, U: Unit> Deserialize<'de> for Quantity<U> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V<U>(PhantomData<U>);
        impl<U: Unit> V<U> {
            fn unitless<E: de::Error>(v: impl fmt::Display) -> E {
                E::custom(format!(
                    "{} {v} has no unit; write it as a string such as \"{v} {}\"",
                    U::WHAT,
                    U::UNITS[0].0
                ))
            }
        }
        impl<U: Unit> Visitor<'_> for V<U> {
            type Value = Quantity<U>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a {} string with a unit", U::WHAT)
            }
            fn visit_str<E: de::Error>(self, s: &str) -> Result<Self::Value, E> {
                Quantity::parse(s).map_err(E::custom)
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
                Err(Self::unitless(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
                Err(Self::unitless(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
                Err(Self::unitless(v))
            }
        }
        d.deserialize_any(V(PhantomData))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Use only the first N training images.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let dir = Path::new("data/mnist");
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
            train_limit: Some(10_000),
            test_limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub alpha: f64,
    pub batch: usize,
    pub mu: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            alpha: d.learning_rate,
            batch: d.batch_size,
            mu: d.mu,
            epochs: d.epochs,
            seed: d.seed,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub threshold: f64,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self { threshold: 1.5e-2 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergySection {
    pub precision: Precision,
    pub memory: MemoryTier,
    pub charge_comparisons: bool,
}

impl Default for EnergySection {
    fn default() -> Self {
        Self {
            precision: Precision::Fp32,
            memory: MemoryTier::Dram,
            charge_comparisons: false,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CutSection {
    pub conv_outputs: bool,
    pub input: bool,
    pub label_only: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkSection {
    #[serde(rename = "W")]
    pub bandwidth: Quantity<Frequency>,
    #[serde(rename = "P")]
    pub power: Quantity<Power>,
    #[serde(rename = "N0")]
    pub n0: Quantity<Psd>,
    #[serde(rename = "T_c")]
    pub coherence_time: Quantity<Time>,
    pub bits_per_element: u32,
    pub max_horizon: Quantity<Time>,
}

impl Default for LinkSection {
    fn default() -> Self {
        let d = LinkConfig::default();
        Self {
            bandwidth: Quantity::si(d.bandwidth),
            power: Quantity::si(d.power),
            n0: Quantity::si(d.n0),
            coherence_time: Quantity::si(d.coherence_time),
            bits_per_element: d.bits_per_element,
            max_horizon: Quantity::si(d.max_horizon),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathLossSection {
    pub d0: Quantity<Length>,
    pub eta: f64,
}

impl Default for PathLossSection {
    fn default() -> Self {
        let d = PathLoss::default();
        Self {
            d0: Quantity::si(d.d0),
            eta: d.eta,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointSection {
    pub position: [Quantity<Length>; 2],
    pub inferences: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySection {
    pub server: [Quantity<Length>; 2],
    pub waypoints: Vec<WaypointSection>,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        let t = Trajectory::default_path(1000);
        let q = |p: [f64; 2]| [Quantity::si(p[0]), Quantity::si(p[1])];
        Self {
            server: q(t.server),
            waypoints: t
                .waypoints
                .iter()
                .map(|w| WaypointSection {
                    position: q(w.position),
                    inferences: w.inferences,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub bandwidths: Vec<Quantity<Frequency>>,
    pub thresholds: Vec<f64>,
    /// Inferences per sweep point.
    pub draws: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            bandwidths: vec![Quantity::si(15e3), Quantity::si(15e6)],
            thresholds: vec![0.0, 1e-3, 2e-3, 5e-3, 1e-2, 1.5e-2, 2e-2, 3e-2],
            draws: 1000,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub prune: PruneSection,
    pub energy: EnergySection,
    pub cuts: CutSection,
    pub link: LinkSection,
    pub pathloss: PathLossSection,
    pub trajectory: TrajectorySection,
    pub sweep: SweepSection,
    /// Seed of the channel simulation.
    pub seed: u64,
    #[serde(rename = "CI")]
    pub carbon_intensity: Quantity<Carbon>,
    pub policies: Vec<Policy>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            train: TrainSection::default(),
            prune: PruneSection::default(),
            energy: EnergySection::default(),
            cuts: CutSection::default(),
            link: LinkSection::default(),
            pathloss: PathLossSection::default(),
            trajectory: TrajectorySection::default(),
            sweep: SweepSection::default(),
            seed: 0,
            carbon_intensity: Quantity::si(0.275),
            policies: Policy::ALL.to_vec(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            learning_rate: t.alpha,
            batch_size: t.batch,
            mu: t.mu,
            epochs: t.epochs,
            seed: t.seed,
            optimizer: match t.optimizer {
                OptimizerKind::Sgd => Optimizer::Sgd,
                OptimizerKind::Adam => Optimizer::ADAM,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            threshold: self.prune.threshold,
        }
    }

    pub fn energy_constants(&self) -> EnergyConstants {
        EnergyConstants {
            charge_comparisons: self.energy.charge_comparisons,
            ..EnergyConstants::new(self.energy.precision, self.energy.memory)
        }
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let l = &self.link;
        let cfg = SimConfig {
            seed: self.seed,
            link: LinkConfig {
                bandwidth: l.bandwidth.si,
                power: l.power.si,
                n0: l.n0.si,
                coherence_time: l.coherence_time.si,
                bits_per_element: l.bits_per_element,
                max_horizon: l.max_horizon.si,
            },
            pathloss: PathLoss {
                d0: self.pathloss.d0.si,
                eta: self.pathloss.eta,
            },
            carbon_intensity: self.carbon_intensity.si,
            policies: self.policies.clone(),
            cuts: CutOptions {
                allow_conv_outputs: self.cuts.conv_outputs,
                allow_input: self.cuts.input,
                label_only: self.cuts.label_only,
            },
            energy: self.energy_constants(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        let t = &self.trajectory;
        if t.waypoints.is_empty() {
            bail!("trajectory has no waypoints");
        }
        let traj = Trajectory {
            server: [t.server[0].si, t.server[1].si],
            waypoints: t
                .waypoints
                .iter()
                .map(|w| Waypoint {
                    position: [w.position[0].si, w.position[1].si],
                    inferences: w.inferences,
                })
                .collect(),
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn bandwidths(&self) -> Vec<f64> {
        self.sweep.bandwidths.iter().map(|q| q.si).collect()
    }
}
