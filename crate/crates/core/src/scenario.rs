//! Monte-Carlo experiments: trajectory simulation, bandwidth and compression
//! sweeps, CO2 accounting and report/series formatting.
//!
//! Inference `i` (counted across the whole run) sees the Rayleigh trace from
//! ChaCha8 seeded with the master seed on stream `i`, scaled by the path-loss
//! gain of its waypoint. Every policy is evaluated on that same trace.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelError, ChannelTrace, LinkConfig, PathLoss};
use crate::dataset::Dataset;
use crate::energy::{cost_profile, CostProfile, EnergyConstants, EnergyError};
use crate::nn::ModelGraph;
use crate::splitter::{evaluate_policy, CutDecision, CutOptions, Policy, DECISION_LOG_HEADER};
use crate::trainer::{accuracy, compression_ratio, eliminate_neurons, prune, PruneConfig, TrainError};

/// Joules per kWh.
pub const J_PER_KWH: f64 = 3.6e6;

/// kg CO2e for `energy` joules at carbon intensity `ci` kg/kWh.
pub fn co2(energy: f64, ci: f64) -> f64 {
    energy / J_PER_KWH * ci
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    /// Metres.
    pub position: [f64; 2],
    pub inferences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub server: [f64; 2],
    pub waypoints: Vec<Waypoint>,
}

impl Trajectory {
    /// Four stops 1 m, 5 m, 20 m and 50 m from a server at the origin.
    pub fn default_path(inferences: usize) -> Self {
        let stops = [[1.0, 0.0], [3.0, 4.0], [12.0, 16.0], [30.0, 40.0]];
        Self {
            server: [0.0, 0.0],
            waypoints: stops
                .into_iter()
                .map(|position| Waypoint { position, inferences })
                .collect(),
        }
    }

    /// One stop at `distance` metres.
    pub fn single(distance: f64, inferences: usize) -> Self {
        Self {
            server: [0.0, 0.0],
            waypoints: vec![Waypoint {
                position: [distance, 0.0],
                inferences,
            }],
        }
    }

    pub fn distance(&self, w: &Waypoint) -> f64 {
        (w.position[0] - self.server[0]).hypot(w.position[1] - self.server[1])
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.waypoints.is_empty() {
            return Err(ScenarioError::Invalid("trajectory needs at least one waypoint".into()));
        }
        for (i, w) in self.waypoints.iter().enumerate() {
            if w.inferences == 0 {
                return Err(ScenarioError::Invalid(format!("waypoint {} has no inferences", i + 1)));
            }
            let d = self.distance(w);
            if d.is_nan() || d <= 0.0 {
                return Err(ScenarioError::Invalid(format!("waypoint {} sits on the server", i + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub link: LinkConfig,
    pub pathloss: PathLoss,
    /// kg CO2e per kWh.
    pub carbon_intensity: f64,
    pub policies: Vec<Policy>,
    pub cuts: CutOptions,
    pub energy: EnergyConstants,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            link: LinkConfig::default(),
            pathloss: PathLoss::default(),
            carbon_intensity: 0.275,
            policies: Policy::ALL.to_vec(),
            cuts: CutOptions::default(),
            energy: EnergyConstants::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.link.validate()?;
        self.energy.validate()?;
        if !(self.carbon_intensity > 0.0 && self.carbon_intensity.is_finite()) {
            return Err(ScenarioError::Invalid("carbon intensity must be positive".into()));
        }
        if !(self.pathloss.d0 > 0.0 && self.pathloss.eta >= 0.0) {
            return Err(ScenarioError::Invalid("path loss needs d0 > 0 and eta >= 0".into()));
        }
        if self.policies.is_empty() {
            return Err(ScenarioError::Invalid("no policies selected".into()));
        }
        Ok(())
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let stderr = if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, stderr })
    }
}

#[derive(Debug, Clone, Default)]
struct Samples {
    e: Vec<f64>,
    e_p: Vec<f64>,
    e_tr: Vec<f64>,
    dead: usize,
    cuts: BTreeMap<usize, usize>,
}

impl Samples {
    fn push(&mut self, d: &CutDecision) {
        self.e.push(d.e);
        self.e_p.push(d.e_p);
        self.e_tr.push(d.e_tr);
        *self.cuts.entry(d.cut).or_default() += 1;
    }

    fn merge(&mut self, other: &Samples) {
        self.e.extend(&other.e);
        self.e_p.extend(&other.e_p);
        self.e_tr.extend(&other.e_tr);
        self.dead += other.dead;
        for (c, n) in &other.cuts {
            *self.cuts.entry(*c).or_default() += n;
        }
    }

    fn summarize(&self, policy: Policy, ci: f64) -> PolicySummary {
        let co2s: Vec<f64> = self.e.iter().map(|&e| co2(e, ci)).collect();
        PolicySummary {
            policy,
            completed: self.e.len(),
            dead_links: self.dead,
            e: Stat::of(&self.e),
            e_p: Stat::of(&self.e_p),
            e_tr: Stat::of(&self.e_tr),
            co2: Stat::of(&co2s),
            cut_histogram: self.cuts.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: Policy,
    /// Inferences whose upload finished.
    pub completed: usize,
    /// Inferences whose upload could not finish within the horizon.
    pub dead_links: usize,
    /// Means over completed inferences; `None` when there are none.
    pub e: Option<Stat>,
    pub e_p: Option<Stat>,
    pub e_tr: Option<Stat>,
    /// kg CO2e per inference.
    pub co2: Option<Stat>,
    pub cut_histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointReport {
    pub position: [f64; 2],
    pub distance: f64,
    pub path_gain: f64,
    pub policies: Vec<PolicySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub bandwidth: f64,
    pub carbon_intensity: f64,
    pub inferences: usize,
    pub policies: Vec<PolicySummary>,
    pub waypoints: Vec<WaypointReport>,
}

impl SimReport {
    pub fn policy(&self, p: Policy) -> Option<&PolicySummary> {
        self.policies.iter().find(|s| s.policy == p)
    }

    /// Mean total energy of `p` (panics if the policy was not simulated or
    /// never completed).
    pub fn mean_e(&self, p: Policy) -> Stat {
        self.policy(p)
            .and_then(|s| s.e)
            .expect("policy simulated with completed draws")
    }

    /// Flat CSV rows `W,policy,metric,value,stderr` (no header).
    pub fn write_csv_rows(&self, out: &mut String) {
        for s in &self.policies {
            let metrics = [("E", s.e), ("E_p", s.e_p), ("E_tr", s.e_tr), ("CO2", s.co2)];
            for (name, stat) in metrics {
                match stat {
                    Some(st) => writeln!(
                        out,
                        "{:e},{},{name},{:.5e},{:.5e}",
                        self.bandwidth, s.policy, st.mean, st.stderr
                    ),
                    None => writeln!(out, "{:e},{},{name},NaN,NaN", self.bandwidth, s.policy),
                }
                .expect("writing to a String");
            }
            writeln!(out, "{:e},{},dead_links,{},0", self.bandwidth, s.policy, s.dead_links)
                .expect("writing to a String");
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        self.write_csv_rows(&mut out);
        out
    }

    /// Whitespace-separated series per waypoint: distance, then mean E,
    /// E_p, E_tr for each policy (`nan` where nothing completed).
    pub fn trajectory_series(&self) -> String {
        let mut out = String::from("# distance_m");
        for s in &self.policies {
            write!(out, " E_{0} E_p_{0} E_tr_{0}", s.policy).expect("writing to a String");
        }
        out.push('\n');
        for w in &self.waypoints {
            write!(out, "{}", w.distance).expect("writing to a String");
            for s in &w.policies {
                for st in [s.e, s.e_p, s.e_tr] {
                    match st {
                        Some(st) => write!(out, " {:.5e}", st.mean),
                        None => write!(out, " nan"),
                    }
                    .expect("writing to a String");
                }
            }
            out.push('\n');
        }
        out
    }
}

pub const REPORT_CSV_HEADER: &str = "W,policy,metric,value,stderr";

/// Runs every waypoint's inferences for each configured policy. When `log`
/// is given, one decision row per (inference, policy) is appended to it.
pub fn simulate_profiles(
    compressed: &CostProfile,
    dense: &CostProfile,
    traj: &Trajectory,
    cfg: &SimConfig,
    mut log: Option<&mut String>,
) -> Result<SimReport, ScenarioError> {
    cfg.validate()?;
    traj.validate()?;
    if let Some(log) = log.as_deref_mut() {
        if log.is_empty() {
            log.push_str(DECISION_LOG_HEADER);
            log.push('\n');
        }
    }
    let mut inference = 0usize;
    let mut overall: Vec<Samples> = vec![Samples::default(); cfg.policies.len()];
    let mut waypoints = Vec::with_capacity(traj.waypoints.len());
    for w in &traj.waypoints {
        let distance = traj.distance(w);
        let g = cfg.pathloss.gain(distance);
        let mut local: Vec<Samples> = vec![Samples::default(); cfg.policies.len()];
        for _ in 0..w.inferences {
            let mut trace = ChannelTrace::rayleigh(cfg.seed, inference as u64, g);
            for (k, &p) in cfg.policies.iter().enumerate() {
                match evaluate_policy(p, compressed, dense, &mut trace, &cfg.link, &cfg.cuts) {
                    Ok(d) => {
                        local[k].push(&d);
                        if let Some(log) = log.as_deref_mut() {
                            d.write_csv_row(log, inference, p);
                        }
                    }
                    Err(ChannelError::DeadLink { .. }) => {
                        local[k].dead += 1;
                        if let Some(log) = log.as_deref_mut() {
                            writeln!(log, "{inference},{p},,,inf,,,").expect("writing to a String");
                        }
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            inference += 1;
        }
        for (o, l) in overall.iter_mut().zip(&local) {
            o.merge(l);
        }
        waypoints.push(WaypointReport {
            position: w.position,
            distance,
            path_gain: g,
            policies: cfg
                .policies
                .iter()
                .zip(&local)
                .map(|(&p, s)| s.summarize(p, cfg.carbon_intensity))
                .collect(),
        });
    }
    Ok(SimReport {
        bandwidth: cfg.link.bandwidth,
        carbon_intensity: cfg.carbon_intensity,
        inferences: inference,
        policies: cfg
            .policies
            .iter()
            .zip(&overall)
            .map(|(&p, s)| s.summarize(p, cfg.carbon_intensity))
            .collect(),
        waypoints,
    })
}

/// [`simulate_profiles`] with profiles computed from the models. `dense` is
/// the uncompressed model used by PSNC.
pub fn run_simulation(
    compressed: &ModelGraph,
    dense: &ModelGraph,
    traj: &Trajectory,
    cfg: &SimConfig,
    log: Option<&mut String>,
) -> Result<SimReport, ScenarioError> {
    let pc = cost_profile(compressed, &cfg.energy);
    let pd = cost_profile(dense, &cfg.energy);
    simulate_profiles(&pc, &pd, traj, cfg, log)
}

/// One report per bandwidth, all at the reference distance (path gain 1)
/// with the same per-inference traces.
pub fn sweep_bandwidth(
    compressed: &CostProfile,
    dense: &CostProfile,
    bandwidths: &[f64],
    draws: usize,
    cfg: &SimConfig,
) -> Result<Vec<SimReport>, ScenarioError> {
    if bandwidths.is_empty() {
        return Err(ScenarioError::Invalid("no bandwidth values".into()));
    }
    let traj = Trajectory::single(cfg.pathloss.d0, draws);
    bandwidths
        .iter()
        .map(|&w| {
            let c = SimConfig {
                link: cfg.link.with_bandwidth(w),
                ..cfg.clone()
            };
            simulate_profiles(compressed, dense, &traj, &c, None)
        })
        .collect()
}

pub fn bandwidth_csv(reports: &[SimReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        r.write_csv_rows(&mut out);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionRow {
    pub threshold: f64,
    pub c_r: f64,
    pub test_accuracy: f64,
    /// Mean PS energy at the reference distance.
    pub mean_e: Stat,
}

/// Prunes `dense` at each threshold (plus dead-neuron elimination) and
/// reports compression, test accuracy and mean PS energy on shared traces.
/// Thresholds that would prune everything are skipped.
pub fn sweep_compression(
    dense: &ModelGraph,
    thresholds: &[f64],
    test: &Dataset,
    draws: usize,
    cfg: &SimConfig,
) -> Result<Vec<CompressionRow>, ScenarioError> {
    if thresholds.is_empty() {
        return Err(ScenarioError::Invalid("no thresholds".into()));
    }
    let dense_profile = cost_profile(dense, &cfg.energy);
    let traj = Trajectory::single(cfg.pathloss.d0, draws);
    let ps_only = SimConfig {
        policies: vec![Policy::Ps],
        ..cfg.clone()
    };
    let mut rows = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let mut model = dense.clone();
        match prune(&mut model, &PruneConfig { threshold }) {
            Ok(_) => {}
            Err(TrainError::AllPruned { .. }) => {
                log::warn!("threshold {threshold} prunes every parameter; row skipped");
                continue;
            }
            Err(e) => return Err(e.into()),
        }
        eliminate_neurons(&mut model);
        let report = compression_ratio(dense, &model)?;
        let profile = cost_profile(&model, &cfg.energy);
        let sim = simulate_profiles(&profile, &dense_profile, &traj, &ps_only, None)?;
        rows.push(CompressionRow {
            threshold,
            c_r: report.ratio,
            test_accuracy: accuracy(&model, test)?,
            mean_e: sim.mean_e(Policy::Ps),
        });
    }
    Ok(rows)
}

pub fn compression_csv(rows: &[CompressionRow]) -> String {
    let mut out = String::from("threshold,C_r,test_accuracy,mean_E,stderr_E\n");
    for r in rows {
        writeln!(
            out,
            "{:e},{:.6},{:.4},{:.5e},{:.5e}",
            r.threshold, r.c_r, r.test_accuracy, r.mean_e.mean, r.mean_e.stderr
        )
        .expect("writing to a String");
    }
    out
}

/// Per-layer processing energy and output size, dense vs compressed.
pub fn layer_series(dense: &CostProfile, compressed: &CostProfile) -> String {
    let mut out = String::from("# layer name E_p_dense E_p_compressed d_dense d_compressed\n");
    for (i, (a, b)) in dense.per_layer.iter().zip(&compressed.per_layer).enumerate() {
        writeln!(
            out,
            "{} {} {:.5e} {:.5e} {} {}",
            i + 1,
            a.name,
            a.e_c + a.e_m,
            b.e_c + b.e_m,
            dense.d[i + 1],
            compressed.d[i + 1]
        )
        .expect("writing to a String");
    }
    out
}
