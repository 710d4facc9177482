//! Cut-layer selection: the client runs layers `1..=l`, uploads the cut-`l`
//! representation and pays `E = E_p(l) + E_tr(d_l)`.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelError, ChannelTrace, LinkConfig, Uplink};
use crate::energy::CostProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Policy {
    /// Best cut on the compressed model.
    #[serde(rename = "PS")]
    Ps,
    /// Best cut on the uncompressed model.
    #[serde(rename = "PSNC")]
    Psnc,
    /// Always cut after the first pooling layer.
    #[serde(rename = "pool-1")]
    Pool1,
    /// Run everything locally and upload the output.
    #[serde(rename = "softmax")]
    Softmax,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Pool1, Policy::Softmax, Policy::Ps, Policy::Psnc];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Ps => "PS",
            Policy::Psnc => "PSNC",
            Policy::Pool1 => "pool-1",
            Policy::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Policy> {
        Policy::ALL.into_iter().find(|p| p.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutOptions {
    /// Also allow cutting right after a conv layer (before its pooling).
    pub allow_conv_outputs: bool,
    /// Also allow uploading the raw input (cut 0).
    pub allow_input: bool,
    /// The final cut uploads a single label instead of the output vector.
    pub label_only: bool,
}

impl CutOptions {
    /// Legal cut indices in ascending order.
    pub fn legal_cuts(&self, profile: &CostProfile) -> Vec<usize> {
        let mut cuts = Vec::with_capacity(profile.depth() + 1);
        if self.allow_input {
            cuts.push(0);
        }
        for (i, layer) in profile.per_layer.iter().enumerate() {
            if layer.kind != "conv" || self.allow_conv_outputs {
                cuts.push(i + 1);
            }
        }
        cuts
    }

    /// Elements uploaded at `cut`.
    pub fn elements(&self, profile: &CostProfile, cut: usize) -> u64 {
        if self.label_only && cut == profile.depth() {
            1
        } else {
            profile.d[cut]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutDecision {
    pub cut: usize,
    pub d: u64,
    pub tau: f64,
    pub e_p: f64,
    pub e_tr: f64,
    /// `e_p + e_tr`.
    pub e: f64,
}

pub const DECISION_LOG_HEADER: &str = "inference_id,policy,cut_layer,d,tau,E_p,E_tr,E";

impl CutDecision {
    pub fn write_csv_row(&self, out: &mut String, inference_id: usize, policy: Policy) {
        writeln!(
            out,
            "{inference_id},{policy},{},{},{:.5e},{:.5e},{:.5e},{:.5e}",
            self.cut, self.d, self.tau, self.e_p, self.e_tr, self.e
        )
        .expect("writing to a String");
    }
}

/// Energy of cutting at `cut`.
pub fn total_energy(
    profile: &CostProfile,
    cut: usize,
    trace: &mut ChannelTrace,
    link: &LinkConfig,
    opts: &CutOptions,
) -> Result<CutDecision, ChannelError> {
    assert!(cut <= profile.depth(), "cut {cut} beyond {} layers", profile.depth());
    let d = opts.elements(profile, cut);
    let tx = Uplink::new(trace, link).deliver(link.bits(d))?;
    let e_p = profile.prefix_e_p[cut];
    Ok(CutDecision {
        cut,
        d,
        tau: tx.tau,
        e_p,
        e_tr: tx.e_tr,
        e: e_p + tx.e_tr,
    })
}

/// Minimum-energy legal cut; ties go to the smallest index. Cuts whose
/// upload cannot finish are skipped; if none can, the link is dead.
///
/// Cuts are visited by payload size in one walk over the trace. A cut still
/// uploading at time `t` costs more than `E_p + P * t`, so once that bound
/// reaches the best energy found the cut is dropped without walking further.
pub fn select_cut(
    profile: &CostProfile,
    trace: &mut ChannelTrace,
    link: &LinkConfig,
    opts: &CutOptions,
) -> Result<CutDecision, ChannelError> {
    let mut cuts: Vec<(u64, usize)> = opts
        .legal_cuts(profile)
        .into_iter()
        .map(|c| (opts.elements(profile, c), c))
        .collect();
    assert!(!cuts.is_empty(), "no legal cuts");
    cuts.sort_unstable();
    let mut up = Uplink::new(trace, link);
    let mut best: Option<CutDecision> = None;
    let mut failure = None;
    for (d, cut) in cuts {
        let e_p = profile.prefix_e_p[cut];
        if let Some(b) = best {
            if d > 0 && e_p + link.power * up.elapsed() >= b.e {
                continue;
            }
        }
        let tx = match up.deliver(link.bits(d)) {
            Ok(tx) => tx,
            Err(e) => {
                if failure.is_none() || matches!(e, ChannelError::DeadLink { .. }) {
                    failure = Some(e);
                }
                continue;
            }
        };
        let e = e_p + tx.e_tr;
        if best.is_none_or(|b| e < b.e || (e == b.e && cut < b.cut)) {
            best = Some(CutDecision {
                cut,
                d,
                tau: tx.tau,
                e_p,
                e_tr: tx.e_tr,
                e,
            });
        }
    }
    best.ok_or_else(|| failure.expect("at least one cut was tried"))
}

/// Cut index of the first pooling layer.
pub fn first_pool_cut(profile: &CostProfile) -> Option<usize> {
    profile.per_layer.iter().position(|l| l.kind == "pool").map(|i| i + 1)
}

pub fn evaluate_policy(
    policy: Policy,
    compressed: &CostProfile,
    dense: &CostProfile,
    trace: &mut ChannelTrace,
    link: &LinkConfig,
    opts: &CutOptions,
) -> Result<CutDecision, ChannelError> {
    match policy {
        Policy::Ps => select_cut(compressed, trace, link, opts),
        Policy::Psnc => select_cut(dense, trace, link, opts),
        Policy::Pool1 => {
            let cut = first_pool_cut(compressed).expect("model has a pooling layer");
            total_energy(compressed, cut, trace, link, opts)
        }
        Policy::Softmax => total_energy(compressed, compressed.depth(), trace, link, opts),
    }
}
