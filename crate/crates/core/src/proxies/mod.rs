//! Zero-cost proxy scorers.
//!
//! Every scorer works on a freshly built [`NetworkInstance`] and one
//! [`TokenBatch`]. Scorers that share a forward/backward pass go through a
//! [`ProxySession`], which runs each pass at most once per network.

mod population;
mod session;
mod table;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{LayerKind, NetworkInstance};
use crate::search_space::DEPTH_RANGE;

pub use population::{score_genotype, score_population, PopulationConfig, ScoreRecord};
pub use session::ProxySession;
pub use table::{format_float, read_score_csv, write_score_csv, ScoreTable, ARCH_COLUMNS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxyId {
    Flops,
    GradNorm,
    Snip,
    Grasp,
    Synflow,
    LogSynflow,
    Fisher,
    JacobCov,
    Naswot,
    Dss,
    Croze,
    Tcet,
    Zico,
    ZicoPp,
}

impl ProxyId {
    pub const ALL: [ProxyId; 14] = [
        ProxyId::Flops,
        ProxyId::GradNorm,
        ProxyId::Snip,
        ProxyId::Grasp,
        ProxyId::Synflow,
        ProxyId::LogSynflow,
        ProxyId::Fisher,
        ProxyId::JacobCov,
        ProxyId::Naswot,
        ProxyId::Dss,
        ProxyId::Croze,
        ProxyId::Tcet,
        ProxyId::Zico,
        ProxyId::ZicoPp,
    ];

    /// Proxies with a per-module (MSA / MLP) decomposition.
    pub const SPLITTABLE: [ProxyId; 4] = [ProxyId::Snip, ProxyId::GradNorm, ProxyId::Synflow, ProxyId::Dss];

    pub fn name(self) -> &'static str {
        match self {
            ProxyId::Flops => "flops",
            ProxyId::GradNorm => "gradnorm",
            ProxyId::Snip => "snip",
            ProxyId::Grasp => "grasp",
            ProxyId::Synflow => "synflow",
            ProxyId::LogSynflow => "logsynflow",
            ProxyId::Fisher => "fisher",
            ProxyId::JacobCov => "jacobcov",
            ProxyId::Naswot => "naswot",
            ProxyId::Dss => "dss",
            ProxyId::Croze => "croze",
            ProxyId::Tcet => "tcet",
            ProxyId::Zico => "zico",
            ProxyId::ZicoPp => "zicopp",
        }
    }

    /// Scorers that replace the batch by a single all-ones sample.
    pub fn is_data_agnostic(self) -> bool {
        matches!(self, ProxyId::Synflow | ProxyId::LogSynflow | ProxyId::Dss)
    }

    pub fn is_splittable(self) -> bool {
        Self::SPLITTABLE.contains(&self)
    }
}

impl fmt::Display for ProxyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProxyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['_', '-'], "");
        let key = if key == "zico++" { "zicopp".to_string() } else { key };
        ProxyId::ALL
            .into_iter()
            .find(|p| p.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown proxy {s:?}; valid: all, {}", valid_names())))
    }
}

fn valid_names() -> String {
    ProxyId::ALL.iter().map(|p| p.name()).collect::<Vec<_>>().join(", ")
}

/// Parses a comma-separated proxy list; `all` selects every proxy. Order is
/// normalized to [`ProxyId::ALL`] order and duplicates are dropped.
pub fn parse_proxy_list(s: &str) -> Result<Vec<ProxyId>> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        if part.trim().eq_ignore_ascii_case("all") {
            out.extend(ProxyId::ALL);
        } else {
            out.push(part.parse()?);
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("empty proxy list; valid: all, {}", valid_names())));
    }
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyOptions {
    /// Synflow-family passes keep signed weights instead of absolute values.
    pub sign_removal: bool,
    /// Emit MSA / MLP / origin / logarithm sub-scores for splittable proxies.
    pub module_split: bool,
    /// First decayed layer (1-based) of the ZiCo++ aggregation.
    pub decay_start: usize,
    pub variance_eps: f64,
    pub kernel_jitter: f64,
    pub jacob_k: f64,
    /// Relative step of the finite-difference Hessian-vector product.
    pub grasp_step: f64,
    /// Input noise std as a fraction of the batch std.
    pub croze_noise: f64,
    pub croze_lr: f64,
    pub croze_seed: u64,
}

impl Default for ProxyOptions {
    fn default() -> Self {
        ProxyOptions {
            sign_removal: false,
            module_split: false,
            decay_start: 6,
            variance_eps: 1e-12,
            kernel_jitter: 1e-6,
            jacob_k: 1e-5,
            grasp_step: 1e-4,
            croze_noise: 0.01,
            croze_lr: 1e-3,
            croze_seed: 0,
        }
    }
}

/// Tag describing how T-CET combines its parts.
pub const TCET_COMBINATION: &str = "sum over blocks of naswot_block * ln(1 + snip_mlp_fc1)";

impl ProxyOptions {
    pub fn max_decay_start() -> usize {
        DEPTH_RANGE.start * 4 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.decay_start == 0 || self.decay_start > Self::max_decay_start() {
            return Err(Error::Config(format!(
                "decay start must be in 1..={}, got {}",
                Self::max_decay_start(),
                self.decay_start
            )));
        }
        let positive = [
            ("variance_eps", self.variance_eps),
            ("kernel_jitter", self.kernel_jitter),
            ("jacob_k", self.jacob_k),
            ("grasp_step", self.grasp_step),
            ("croze_noise", self.croze_noise),
            ("croze_lr", self.croze_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyScore {
    pub value: f64,
    pub degenerate: bool,
    /// Per-registry-layer contributions for layer-additive scorers.
    pub layers: Option<Vec<f64>>,
}

impl ProxyScore {
    fn plain(value: f64) -> Self {
        ProxyScore {
            value,
            degenerate: false,
            layers: None,
        }
    }

    fn additive(layers: Vec<f64>) -> Self {
        ProxyScore {
            value: layers.iter().sum(),
            degenerate: false,
            layers: Some(layers),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleSplit {
    pub msa: f64,
    pub mlp: f64,
    pub origin: f64,
    /// `ln(msa * mlp)`; absent when either part is non-positive.
    pub logarithm: Option<f64>,
}

impl ModuleSplit {
    pub fn from_layers(kinds: &[LayerKind], layers: &[f64]) -> Self {
        let sum = |f: fn(LayerKind) -> bool| -> f64 {
            kinds.iter().zip(layers).filter(|(k, _)| f(**k)).map(|(_, v)| v).sum()
        };
        let msa = sum(LayerKind::is_msa);
        let mlp = sum(LayerKind::is_mlp);
        let logarithm = (msa > 0.0 && mlp > 0.0).then(|| {
            let p = msa * mlp;
            if p.is_normal() {
                p.ln()
            } else {
                msa.ln() + mlp.ln()
            }
        });
        ModuleSplit {
            msa,
            mlp,
            origin: msa + mlp,
            logarithm,
        }
    }
}

/// ZiCo++ layer weights for `n_layers` layers and decay start `n` (1-based):
/// 1 before `n`, `1 / (i - n + 1)` from `n` to the penultimate layer, 1 for
/// the last layer.
pub fn decay_weights(n_layers: usize, n: usize) -> Vec<f64> {
    (1..=n_layers)
        .map(|i| {
            if i < n || i == n_layers {
                1.0
            } else {
                1.0 / (i - n + 1) as f64
            }
        })
        .collect()
}

pub fn decay_aggregate(layer_stats: &[f64], n: usize) -> f64 {
    decay_weights(layer_stats.len(), n)
        .iter()
        .zip(layer_stats)
        .map(|(w, s)| w * s)
        .sum()
}

/// Scores one proxy on a fresh session.
pub fn compute_proxy(
    id: ProxyId,
    net: &NetworkInstance,
    batch: &TokenBatch,
    opts: &ProxyOptions,
) -> Result<ProxyScore> {
    ProxySession::new(net, batch, opts)?.score(id)
}

pub fn compute_module_split(
    id: ProxyId,
    net: &NetworkInstance,
    batch: &TokenBatch,
    opts: &ProxyOptions,
) -> Result<ModuleSplit> {
    ProxySession::new(net, batch, opts)?.module_split(id)
}
