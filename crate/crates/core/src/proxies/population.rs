use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ModuleSplit, ProxyId, ProxyOptions, ProxySession};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::model::build;
use crate::search_space::{exact_param_count, flops_estimate, model_size_formula, Genotype, TokenGeometry};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub seed: u64,
    pub proxies: Vec<ProxyId>,
    pub opts: ProxyOptions,
    pub workers: usize,
}

/// One scored genotype. `None` scores failed; see `flags`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub depth: usize,
    pub embed_dim: usize,
    pub mean_heads: f64,
    pub mean_mlp_ratio: f64,
    pub sum_head_dim: usize,
    pub sum_mlp_dim: usize,
    pub formula_ms: u64,
    pub exact_params: u64,
    pub flops: u64,
    pub scores: BTreeMap<ProxyId, Option<f64>>,
    pub splits: BTreeMap<ProxyId, Option<ModuleSplit>>,
    /// Seconds, including the shared passes the proxy relies on.
    pub times: BTreeMap<ProxyId, f64>,
    /// `proxy:degenerate`, `proxy:error`, `proxy:log_omitted`.
    pub flags: Vec<String>,
}

impl ScoreRecord {
    pub fn score(&self, p: ProxyId) -> Option<f64> {
        self.scores.get(&p).copied().flatten()
    }
}

/// Scores one genotype. Scorer failures are recorded as flags, never raised.
pub fn score_genotype(
    g: &Genotype,
    geom: &TokenGeometry,
    batch: &TokenBatch,
    cfg: &PopulationConfig,
) -> ScoreRecord {
    let id = if g.id.is_empty() { g.canonical_id() } else { g.id.clone() };
    let mut rec = ScoreRecord {
        id: id.clone(),
        depth: g.depth,
        embed_dim: g.embed_dim,
        mean_heads: g.mean_heads(),
        mean_mlp_ratio: g.mean_mlp_ratio(),
        sum_head_dim: g.sum_head_dim(),
        sum_mlp_dim: g.sum_mlp_dim(),
        formula_ms: model_size_formula(g, geom.num_classes),
        exact_params: exact_param_count(g, geom),
        flops: flops_estimate(g, geom),
        scores: BTreeMap::new(),
        splits: BTreeMap::new(),
        times: BTreeMap::new(),
        flags: Vec::new(),
    };
    let net = match build(g, geom, derive_seed(cfg.seed, &format!("init:{id}"))) {
        Ok(n) => n,
        Err(_) => return fail_all(rec, &cfg.proxies),
    };
    let mut opts = cfg.opts.clone();
    opts.croze_seed = derive_seed(cfg.seed, &format!("croze:{id}"));
    let mut session = match ProxySession::new(&net, batch, &opts) {
        Ok(s) => s.plan(&cfg.proxies),
        Err(_) => return fail_all(rec, &cfg.proxies),
    };
    for &p in &cfg.proxies {
        let before = session.shared_time(p);
        let t = Instant::now();
        let result = session.score(p);
        // A shared pass that ran inside this call is already in the elapsed
        // time; one that ran earlier is added back.
        rec.times.insert(p, (t.elapsed() + before).as_secs_f64());
        match result {
            Ok(s) => {
                if s.degenerate {
                    rec.flags.push(format!("{p}:degenerate"));
                }
                if opts.module_split && p.is_splittable() {
                    let split = s
                        .layers
                        .as_ref()
                        .map(|l| ModuleSplit::from_layers(&layer_kinds(&net), l));
                    if split.is_some_and(|s| s.logarithm.is_none()) {
                        rec.flags.push(format!("{p}:log_omitted"));
                    }
                    rec.splits.insert(p, split);
                }
                rec.scores.insert(p, Some(s.value));
            }
            Err(_) => {
                rec.scores.insert(p, None);
                if opts.module_split && p.is_splittable() {
                    rec.splits.insert(p, None);
                }
                rec.flags.push(format!("{p}:error"));
            }
        }
    }
    rec
}

fn fail_all(mut rec: ScoreRecord, proxies: &[ProxyId]) -> ScoreRecord {
    for &p in proxies {
        rec.scores.insert(p, None);
        rec.times.insert(p, 0.0);
        rec.flags.push(format!("{p}:error"));
    }
    rec
}

fn layer_kinds(net: &crate::model::NetworkInstance) -> Vec<crate::model::LayerKind> {
    net.layer_registry().iter().map(|e| e.kind).collect()
}

/// Scores every genotype on the same batch. Output order follows input
/// order for any worker count.
pub fn score_population(
    genotypes: &[Genotype],
    geom: &TokenGeometry,
    batch: &TokenBatch,
    cfg: &PopulationConfig,
) -> Result<Vec<ScoreRecord>> {
    if genotypes.is_empty() {
        return Err(Error::Config("empty population".into()));
    }
    if cfg.proxies.is_empty() {
        return Err(Error::Config("no proxies requested".into()));
    }
    cfg.opts.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| {
        genotypes
            .par_iter()
            .map(|g| score_genotype(g, geom, batch, cfg))
            .collect()
    }))
}
