//! Block-fading uplink: Shannon rate, transmission time over a piecewise
//! constant gain trace, and transmission energy `E_tr = P * tau`.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("link cannot deliver {bits} bits within {horizon} s")]
    DeadLink { bits: f64, horizon: f64 },
    #[error("recorded trace ends after {blocks} blocks")]
    TraceExhausted { blocks: usize },
    #[error("invalid link config: {0}")]
    InvalidConfig(String),
    #[error("trace line {line}: {msg}")]
    BadTrace { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    /// Hz.
    pub bandwidth: f64,
    /// Transmit power, W.
    pub power: f64,
    /// Noise power spectral density, W/Hz.
    pub n0: f64,
    /// Coherence block duration, s.
    pub coherence_time: f64,
    pub bits_per_element: u32,
    /// Transmissions that need longer than this are reported as dead links.
    pub max_horizon: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            bandwidth: 5e6,
            power: 1e-3,
            n0: 1e-9,
            coherence_time: 1e-3,
            bits_per_element: 32,
            max_horizon: 3600.0,
        }
    }
}

impl LinkConfig {
    pub fn with_bandwidth(self, bandwidth: f64) -> Self {
        Self { bandwidth, ..self }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let checks = [
            ("bandwidth", self.bandwidth),
            ("power", self.power),
            ("n0", self.n0),
            ("coherence_time", self.coherence_time),
            ("max_horizon", self.max_horizon),
        ];
        for (name, v) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ChannelError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.bits_per_element == 0 {
            return Err(ChannelError::InvalidConfig("bits_per_element must be positive".into()));
        }
        Ok(())
    }

    pub fn bits(&self, d: u64) -> f64 {
        d as f64 * self.bits_per_element as f64
    }
}

/// `W * log2(1 + P * gain / (N0 * W))` in bits/s.
pub fn rate(gain: f64, cfg: &LinkConfig) -> f64 {
    let snr = cfg.power * gain / (cfg.n0 * cfg.bandwidth);
    cfg.bandwidth * snr.ln_1p() / std::f64::consts::LN_2
}

pub fn tx_energy(tau: f64, cfg: &LinkConfig) -> f64 {
    cfg.power * tau
}

/// `|h|^2` for `h ~ CN(0, 1)`: exponential with mean 1.
pub fn sample_fading<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let x: f64 = rng.sample(StandardNormal);
    let y: f64 = rng.sample(StandardNormal);
    (x * x + y * y) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLoss {
    /// Reference distance, m.
    pub d0: f64,
    pub eta: f64,
}

impl Default for PathLoss {
    fn default() -> Self {
        Self { d0: 1.0, eta: 3.0 }
    }
}

impl PathLoss {
    /// `min(1, (d0 / distance)^eta)`.
    pub fn gain(&self, distance: f64) -> f64 {
        (self.d0 / distance).powf(self.eta).min(1.0)
    }
}

#[derive(Debug, Clone)]
enum Source {
    /// Recorded blocks only.
    Fixed,
    Constant(f64),
    Rayleigh {
        rng: Box<ChaCha8Rng>,
        scale: f64,
    },
}

/// Per-block channel power `|h|^2 * g`, extended on demand.
#[derive(Debug, Clone)]
pub struct ChannelTrace {
    gains: Vec<f64>,
    source: Source,
}

impl ChannelTrace {
    /// Same gain in every block.
    pub fn constant(gain: f64) -> Self {
        Self {
            gains: Vec::new(),
            source: Source::Constant(gain),
        }
    }

    /// I.i.d. Rayleigh blocks scaled by path-loss gain `scale`, drawn from
    /// ChaCha8 seeded with `seed` on stream `stream`.
    pub fn rayleigh(seed: u64, stream: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            gains: Vec::new(),
            source: Source::Rayleigh {
                rng: Box::new(rng),
                scale,
            },
        }
    }

    /// Replays exactly these blocks; reading past the end is an error.
    pub fn fixed(gains: Vec<f64>) -> Self {
        Self {
            gains,
            source: Source::Fixed,
        }
    }

    /// Blocks materialized so far.
    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn gain(&mut self, block: usize) -> Result<f64, ChannelError> {
        match &mut self.source {
            Source::Constant(g) => Ok(*g),
            Source::Fixed => self.gains.get(block).copied().ok_or(ChannelError::TraceExhausted {
                blocks: self.gains.len(),
            }),
            Source::Rayleigh { rng, scale } => {
                while self.gains.len() <= block {
                    self.gains.push(sample_fading(rng) * *scale);
                }
                Ok(self.gains[block])
            }
        }
    }

    /// Materializes at least `blocks` blocks (for dumping).
    pub fn extend_to(&mut self, blocks: usize) -> Result<(), ChannelError> {
        if blocks > 0 {
            self.gain(blocks - 1)?;
        }
        Ok(())
    }

    /// CSV `block_index,gain` of the materialized blocks.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block_index,gain\n");
        for (i, g) in self.gains.iter().enumerate() {
            writeln!(out, "{i},{g:e}").expect("writing to a String");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, ChannelError> {
        let mut gains = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| ChannelError::BadTrace {
                line: n + 1,
                msg: msg.into(),
            };
            let (idx, gain) = line.split_once(',').ok_or_else(|| bad("expected two columns"))?;
            let idx: usize = idx.trim().parse().map_err(|_| bad("bad block index"))?;
            if idx != gains.len() {
                return Err(bad("block indices must be consecutive from 0"));
            }
            let gain: f64 = gain.trim().parse().map_err(|_| bad("bad gain"))?;
            if !(gain >= 0.0 && gain.is_finite()) {
                return Err(bad("gain must be finite and non-negative"));
            }
            gains.push(gain);
        }
        Ok(Self::fixed(gains))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ChannelError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TxOutcome {
    /// Seconds.
    pub tau: f64,
    /// Joules.
    pub e_tr: f64,
    pub blocks_used: usize,
}

impl TxOutcome {
    const NONE: TxOutcome = TxOutcome {
        tau: 0.0,
        e_tr: 0.0,
        blocks_used: 0,
    };
}

/// Incremental upload over a trace. Successive [`Uplink::deliver`] calls
/// must ask for non-decreasing bit counts; each resumes where the previous
/// one stopped, so several payload sizes cost one walk.
pub struct Uplink<'a> {
    trace: &'a mut ChannelTrace,
    cfg: &'a LinkConfig,
    /// First block not fully consumed.
    block: usize,
    /// Bits carried by blocks `0..block`.
    acc: f64,
    last_need: f64,
}

impl<'a> Uplink<'a> {
    pub fn new(trace: &'a mut ChannelTrace, cfg: &'a LinkConfig) -> Self {
        Self {
            trace,
            cfg,
            block: 0,
            acc: 0.0,
            last_need: 0.0,
        }
    }

    /// Time already known to be spent by any payload larger than the last
    /// one delivered.
    pub fn elapsed(&self) -> f64 {
        self.block as f64 * self.cfg.coherence_time
    }

    /// Minimal `tau` with `integral_0^tau R(t) dt = bits`, the last block used
    /// fractionally.
    pub fn deliver(&mut self, bits: f64) -> Result<TxOutcome, ChannelError> {
        assert!(bits >= self.last_need, "payloads must be requested in ascending order");
        self.last_need = bits;
        let cfg = self.cfg;
        if bits == 0.0 {
            return Ok(TxOutcome::NONE);
        }
        let dead = ChannelError::DeadLink {
            bits,
            horizon: cfg.max_horizon,
        };
        if let Source::Constant(g) = self.trace.source {
            let r = rate(g, cfg);
            if !(r > 0.0 && bits / r <= cfg.max_horizon) {
                return Err(dead);
            }
            let tau = bits / r;
            return Ok(TxOutcome {
                tau,
                e_tr: tx_energy(tau, cfg),
                blocks_used: (tau / cfg.coherence_time).ceil() as usize,
            });
        }
        let max_blocks = (cfg.max_horizon / cfg.coherence_time).ceil() as usize;
        while self.block < max_blocks {
            let r = rate(self.trace.gain(self.block)?, cfg);
            let b = r * cfg.coherence_time;
            if self.acc + b >= bits {
                let tau = self.elapsed() + (bits - self.acc) / r;
                if tau > cfg.max_horizon {
                    return Err(dead);
                }
                return Ok(TxOutcome {
                    tau,
                    e_tr: tx_energy(tau, cfg),
                    blocks_used: self.block + 1,
                });
            }
            self.acc += b;
            self.block += 1;
        }
        Err(dead)
    }
}

/// Minimal `tau` with `integral_0^tau R(t) dt = bits_per_element * d`.
pub fn tx_time(d: u64, trace: &mut ChannelTrace, cfg: &LinkConfig) -> Result<TxOutcome, ChannelError> {
    Uplink::new(trace, cfg).deliver(cfg.bits(d))
}

/// [`tx_time`] for several element counts in a single walk over the trace.
/// Results are in the order of `ds`.
pub fn tx_times(ds: &[u64], trace: &mut ChannelTrace, cfg: &LinkConfig) -> Vec<Result<TxOutcome, ChannelError>> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| ds[i]);
    let mut out: Vec<Option<Result<TxOutcome, ChannelError>>> = (0..ds.len()).map(|_| None).collect();
    let mut up = Uplink::new(trace, cfg);
    for i in order {
        out[i] = Some(up.deliver(cfg.bits(ds[i])));
    }
    out.into_iter().map(|r| r.expect("every target visited")).collect()
}

/// Bits delivered in `[0, tau)` on `trace` (oracle for tests and reports).
pub fn delivered_bits(tau: f64, trace: &mut ChannelTrace, cfg: &LinkConfig) -> Result<f64, ChannelError> {
    let mut bits = 0.0;
    let mut k = 0usize;
    loop {
        let start = k as f64 * cfg.coherence_time;
        if start >= tau {
            return Ok(bits);
        }
        let dt = (tau - start).min(cfg.coherence_time);
        bits += rate(trace.gain(k)?, cfg) * dt;
        k += 1;
    }
}
