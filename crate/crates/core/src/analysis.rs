//! Rank correlation, ranked tables, model-size buckets, factor correlations,
//! input sensitivity and a small trainer producing toy targets.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Provenance, TokenBatch};
use crate::error::{Error, Result};
use crate::model::{build, NetworkInstance};
use crate::proxies::{score_population, PopulationConfig, ProxyId, ScoreRecord, ScoreTable};
use crate::search_space::{Genotype, TokenGeometry};
use crate::seed::derive_seed;
use crate::tensor::{Reduction, Tensor};

/// Average (fractional) ranks, 1-based; ties share the mean of their ranks.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties. `Ok(None)` marks
/// an undefined value (constant input).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!("spearman: lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Contract("spearman needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Contract("spearman needs finite inputs".into()));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// Spearman over the positions where both sides are present.
pub fn spearman_paired(x: &[Option<f64>], y: &[Option<f64>]) -> Option<f64> {
    let (a, b): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .unzip();
    if a.len() < 2 {
        return None;
    }
    spearman(&a, &b).ok().flatten()
}

/// Index of the highest finite score; ties go to the smallest id.
pub fn argmax_by_score(ids: &[&str], scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some(v) = s.filter(|v| v.is_finite()) else { continue };
        best = match best {
            None => Some(i),
            Some(b) => {
                let bv = scores[b].expect("finite");
                if v > bv || (v == bv && ids[i] < ids[b]) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TargetKind {
    /// Accuracies from the built-in toy trainer.
    Toy,
    /// Values supplied by the user.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyRanking {
    pub proxy: ProxyId,
    pub rho: Option<f64>,
    pub argmax_id: Option<String>,
    pub argmax_ms: Option<u64>,
    /// Target value of the argmax genotype.
    pub proposed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedTable {
    pub target_kind: TargetKind,
    pub rows: usize,
    /// Maximum target over the joined rows.
    pub oracle: Option<f64>,
    pub rankings: Vec<ProxyRanking>,
}

/// Rows of `table` that have a target, paired with it.
fn joined<'a>(rows: &[&'a ScoreRecord], targets: &BTreeMap<String, f64>) -> Vec<(&'a ScoreRecord, f64)> {
    rows.iter()
        .filter_map(|r| targets.get(&r.id).map(|&t| (*r, t)))
        .collect()
}

fn rank_rows(
    proxies: &[ProxyId],
    rows: &[(&ScoreRecord, f64)],
    target_kind: TargetKind,
) -> RankedTable {
    let ids: Vec<&str> = rows.iter().map(|(r, _)| r.id.as_str()).collect();
    let target: Vec<Option<f64>> = rows.iter().map(|(_, t)| Some(*t)).collect();
    let oracle = rows.iter().map(|(_, t)| *t).fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.max(t))));
    let rankings = proxies
        .iter()
        .map(|&p| {
            let scores: Vec<Option<f64>> = rows.iter().map(|(r, _)| r.score(p)).collect();
            let best = argmax_by_score(&ids, &scores);
            ProxyRanking {
                proxy: p,
                rho: spearman_paired(&scores, &target),
                argmax_id: best.map(|i| ids[i].to_string()),
                argmax_ms: best.map(|i| rows[i].0.formula_ms),
                proposed: best.map(|i| rows[i].1),
            }
        })
        .collect();
    RankedTable {
        target_kind,
        rows: rows.len(),
        oracle,
        rankings,
    }
}

pub fn ranked_table(
    table: &ScoreTable,
    targets: &BTreeMap<String, f64>,
    target_kind: TargetKind,
) -> Result<RankedTable> {
    let all: Vec<&ScoreRecord> = table.rows.iter().collect();
    let rows = joined(&all, targets);
    if rows.is_empty() {
        return Err(Error::Data("no score rows have a target value".into()));
    }
    Ok(rank_rows(&table.proxies, &rows, target_kind))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    pub rows: usize,
    /// Fewer than three rows: correlations omitted.
    pub sparse: bool,
    pub table: RankedTable,
}

/// Default bucket edges: 5M-wide model-size bins from 0 covering `max_ms`.
pub fn default_bucket_edges(max_ms: u64) -> Vec<f64> {
    let width = 5_000_000u64;
    let n = max_ms / width + 1;
    (0..=n).map(|i| (i * width) as f64).collect()
}

/// Per-bucket ranked tables over `formula_ms` in half-open `[lo, hi)` bins;
/// the final bin is closed.
pub fn bucket_analysis(
    table: &ScoreTable,
    targets: &BTreeMap<String, f64>,
    target_kind: TargetKind,
    edges: &[f64],
) -> Result<Vec<Bucket>> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("bucket edges must be strictly increasing, at least two".into()));
    }
    let all: Vec<&ScoreRecord> = table.rows.iter().collect();
    let rows = joined(&all, targets);
    if rows.is_empty() {
        return Err(Error::Data("no score rows have a target value".into()));
    }
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    if rows.iter().any(|(r, _)| (r.formula_ms as f64) < lo || (r.formula_ms as f64) > hi) {
        return Err(Error::Config(format!("bucket edges [{lo}, {hi}] do not cover all model sizes")));
    }
    let last = edges.len() - 2;
    Ok(edges
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let inside: Vec<(&ScoreRecord, f64)> = rows
                .iter()
                .filter(|(r, _)| {
                    let ms = r.formula_ms as f64;
                    ms >= w[0] && (ms < w[1] || (k == last && ms == w[1]))
                })
                .copied()
                .collect();
            let sparse = inside.len() < 3;
            let mut t = rank_rows(&table.proxies, &inside, target_kind);
            if sparse {
                t.rankings.iter_mut().for_each(|r| r.rho = None);
            }
            Bucket {
                lo: w[0],
                hi: w[1],
                rows: inside.len(),
                sparse,
                table: t,
            }
        })
        .collect())
}

pub const FACTORS: [&str; 7] = [
    "depth",
    "embed_dim",
    "mean_heads",
    "mean_mlp_ratio",
    "sum_head_dim",
    "sum_mlp_dim",
    "model_size",
];

pub fn factor_values(r: &ScoreRecord) -> [f64; 7] {
    [
        r.depth as f64,
        r.embed_dim as f64,
        r.mean_heads,
        r.mean_mlp_ratio,
        r.sum_head_dim as f64,
        r.sum_mlp_dim as f64,
        r.formula_ms as f64,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorMatrix {
    /// Proxy names, then `target` when a target was joined.
    pub rows: Vec<String>,
    pub factors: Vec<String>,
    /// `values[i][j]` = ρ(row i, factor j); `None` is not-a-value.
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn factor_correlation(table: &ScoreTable, targets: Option<&BTreeMap<String, f64>>) -> Result<FactorMatrix> {
    if table.rows.len() < 10 {
        return Err(Error::Data(format!(
            "factor correlation needs at least 10 rows, got {}",
            table.rows.len()
        )));
    }
    let factors: Vec<Vec<Option<f64>>> = (0..FACTORS.len())
        .map(|j| table.rows.iter().map(|r| Some(factor_values(r)[j])).collect())
        .collect();
    let mut names = Vec::new();
    let mut values = Vec::new();
    let mut push = |name: String, col: Vec<Option<f64>>| {
        values.push(factors.iter().map(|f| spearman_paired(&col, f)).collect());
        names.push(name);
    };
    for &p in &table.proxies {
        push(p.name().to_string(), table.column(p));
    }
    if let Some(t) = targets {
        push("target".into(), table.rows.iter().map(|r| t.get(&r.id).copied()).collect());
    }
    Ok(FactorMatrix {
        rows: names,
        factors: FACTORS.iter().map(|s| s.to_string()).collect(),
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub proxy: ProxyId,
    pub rho: Option<f64>,
    pub argmax_a: Option<String>,
    pub argmax_b: Option<String>,
    pub argmax_agree: bool,
}

/// Per-proxy agreement between two score tables over the same genotypes.
pub fn compare_tables(a: &ScoreTable, b: &ScoreTable) -> Result<Vec<SensitivityRow>> {
    let ids_a: Vec<&str> = a.rows.iter().map(|r| r.id.as_str()).collect();
    let ids_b: Vec<&str> = b.rows.iter().map(|r| r.id.as_str()).collect();
    if ids_a != ids_b {
        return Err(Error::Data("score tables list different genotypes".into()));
    }
    Ok(a.proxies
        .iter()
        .filter(|p| b.proxies.contains(p))
        .map(|&p| {
            let (ca, cb) = (a.column(p), b.column(p));
            let argmax_a = argmax_by_score(&ids_a, &ca).map(|i| ids_a[i].to_string());
            let argmax_b = argmax_by_score(&ids_b, &cb).map(|i| ids_b[i].to_string());
            let rho = if ca == cb && ca.iter().flatten().count() >= 2 {
                // Identical columns correlate perfectly even when constant.
                Some(1.0)
            } else {
                spearman_paired(&ca, &cb)
            };
            SensitivityRow {
                proxy: p,
                rho,
                argmax_agree: argmax_a.is_some() && argmax_a == argmax_b,
                argmax_a,
                argmax_b,
            }
        })
        .collect())
}

/// Scores the population under two batch sources and compares them.
pub fn sensitivity_random_input(
    genotypes: &[Genotype],
    geom: &TokenGeometry,
    batch_a: &TokenBatch,
    batch_b: &TokenBatch,
    cfg: &PopulationConfig,
) -> Result<Vec<SensitivityRow>> {
    let a = ScoreTable::new(cfg.proxies.clone(), score_population(genotypes, geom, batch_a, cfg)?);
    let b = ScoreTable::new(cfg.proxies.clone(), score_population(genotypes, geom, batch_b, cfg)?);
    compare_tables(&a, &b)
}

/// Deterministic labeled token task: each class has a Gaussian prototype
/// added to every token, plus isotropic noise.
#[derive(Clone, Debug)]
pub struct ToyTask {
    pub train: TokenBatch,
    pub test: TokenBatch,
}

impl ToyTask {
    pub fn generate(geom: &TokenGeometry, n_train: usize, n_test: usize, noise: f64, seed: u64) -> Result<Self> {
        if n_train == 0 || n_test == 0 {
            return Err(Error::Config("toy task needs training and test samples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protos: Vec<Vec<f64>> = (0..geom.num_classes)
            .map(|_| (0..geom.token_width).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let mut make = |n: usize| -> Result<TokenBatch> {
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..geom.num_classes)).collect();
            let mut data = Vec::with_capacity(n * geom.tokens * geom.token_width);
            for &l in &labels {
                for _ in 0..geom.tokens {
                    for &p in &protos[l] {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        data.push(p + noise * e);
                    }
                }
            }
            let t = Tensor::new(vec![n, geom.tokens, geom.token_width], data)?;
            TokenBatch::new(t, labels, geom.num_classes, Provenance::Random)
        };
        let train = make(n_train)?;
        let test = make(n_test)?;
        Ok(ToyTask { train, test })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyResult {
    pub accuracy_before: f64,
    pub accuracy: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub steps: usize,
}

fn subset(b: &TokenBatch, idx: &[usize]) -> Result<TokenBatch> {
    let s = b.data().shape();
    let per = s[1] * s[2];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&b.data().data()[i * per..(i + 1) * per]);
    }
    let labels = idx.iter().map(|&i| b.labels()[i]).collect();
    TokenBatch::new(Tensor::new(vec![idx.len(), s[1], s[2]], data)?, labels, b.num_classes(), b.provenance())
}

/// Mean loss and accuracy over `b` in chunks of `chunk`.
pub fn evaluate(net: &NetworkInstance, b: &TokenBatch, chunk: usize) -> Result<(f64, f64)> {
    let n = b.batch_size();
    let (mut loss, mut correct) = (0.0, 0usize);
    let idx: Vec<usize> = (0..n).collect();
    for part in idx.chunks(chunk.max(1)) {
        let sub = subset(b, part)?;
        let mut fp = net.forward(&sub)?;
        let logits = fp.graph.value(fp.logits).clone();
        let l = fp.cross_entropy(sub.labels(), Reduction::Sum)?;
        loss += fp.graph.value(l).item()?;
        let c = logits.shape()[1];
        for (row, &y) in logits.data().chunks(c).zip(sub.labels()) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("non-empty row");
            correct += usize::from(pred == y);
        }
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Plain minibatch SGD on cross-entropy; returns held-out accuracy.
pub fn toy_train(net: &mut NetworkInstance, task: &ToyTask, cfg: &ToyConfig) -> Result<ToyResult> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("toy training needs a positive batch size and learning rate".into()));
    }
    let (loss_before, _) = evaluate(net, &task.train, 256)?;
    let (_, accuracy_before) = evaluate(net, &task.test, 256)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..task.train.batch_size()).collect();
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for part in order.chunks(cfg.batch_size) {
            let sub = subset(&task.train, part)?;
            let mut fp = net.forward(&sub)?;
            let loss = fp.cross_entropy(sub.labels(), Reduction::Mean)?;
            let lv = fp.graph.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: format!("loss {lv}"),
                });
            }
            let mut grads = fp.graph.backward(loss, &[]).map_err(|e| Error::Training {
                epoch,
                detail: e.to_string(),
            })?;
            let grads = fp.param_grads(&mut grads);
            for (p, g) in net.params_mut().iter_mut().zip(&grads) {
                for (w, d) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *w -= cfg.lr * d;
                }
            }
            steps += 1;
        }
    }
    let (loss_after, _) = evaluate(net, &task.train, 256)?;
    if !loss_after.is_finite() {
        return Err(Error::Training {
            epoch: cfg.epochs,
            detail: "final loss is not finite".into(),
        });
    }
    let (_, accuracy) = evaluate(net, &task.test, 256)?;
    Ok(ToyResult {
        accuracy_before,
        accuracy,
        loss_before,
        loss_after,
        steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRecord {
    pub id: String,
    pub result: ToyResult,
}

/// Toy-trains every genotype on one shared task. Initialization and
/// shuffling seeds derive from `seed` and the genotype id, so results do not
/// depend on `workers`.
pub fn toy_targets(
    genotypes: &[Genotype],
    task: &ToyTask,
    cfg: &ToyConfig,
    workers: usize,
) -> Result<Vec<ToyRecord>> {
    let geom = TokenGeometry::new(
        task.train.data().shape()[1],
        task.train.data().shape()[2],
        task.train.num_classes(),
    )?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        genotypes
            .par_iter()
            .map(|g| {
                let mut net = build(g, &geom, derive_seed(cfg.seed, &format!("toy-init:{}", g.id)))?;
                let own = ToyConfig {
                    seed: derive_seed(cfg.seed, &format!("toy-order:{}", g.id)),
                    ..*cfg
                };
                Ok(ToyRecord {
                    id: g.id.clone(),
                    result: toy_train(&mut net, task, &own)?,
                })
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_hand_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap().unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_constant_is_undefined() {
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn argmax_ties_break_on_id() {
        let ids = ["b", "a", "c"];
        assert_eq!(argmax_by_score(&ids, &[Some(2.0), Some(2.0), Some(1.0)]), Some(1));
        assert_eq!(argmax_by_score(&ids, &[None, Some(f64::NAN), Some(1.0)]), Some(2));
        assert_eq!(argmax_by_score(&ids, &[None, None, None]), None);
    }

    #[test]
    fn default_edges_cover_range() {
        assert_eq!(default_bucket_edges(11_098_816), vec![0.0, 5e6, 10e6, 15e6]);
        assert_eq!(default_bucket_edges(190_768), vec![0.0, 5e6]);
    }

    fn toy_geom() -> TokenGeometry {
        TokenGeometry::new(3, 4, 2).unwrap()
    }

    #[test]
    fn zero_epochs_keeps_baseline() {
        let g = Genotype::uniform(4, 32, 3, 1).unwrap();
        let mut net = build(&g, &toy_geom(), 1).unwrap();
        let task = ToyTask::generate(&toy_geom(), 32, 32, 0.5, 2).unwrap();
        let cfg = ToyConfig {
            epochs: 0,
            batch_size: 8,
            lr: 0.1,
            seed: 3,
        };
        let r = toy_train(&mut net, &task, &cfg).unwrap();
        assert_eq!(r.accuracy, r.accuracy_before);
        assert_eq!(r.loss_after, r.loss_before);
        assert_eq!(r.steps, 0);
    }
}
