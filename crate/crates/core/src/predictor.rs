//! Random-forest regressor fusing architecture summaries and proxy scores.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::spearman;
use crate::error::{Error, Result};
use crate::proxies::{ProxyId, ScoreTable};
use crate::seed::derive_seed;

pub const FEATURE_PROXIES: [ProxyId; 6] = [
    ProxyId::Snip,
    ProxyId::GradNorm,
    ProxyId::Synflow,
    ProxyId::Dss,
    ProxyId::Zico,
    ProxyId::Fisher,
];

pub const FEATURE_NAMES: [&str; 10] = [
    "depth",
    "embed_dim",
    "mean_heads",
    "mean_mlp_ratio",
    "snip",
    "gradnorm",
    "synflow",
    "dss",
    "zico",
    "fisher",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub id: String,
    pub features: Vec<f64>,
    pub target: Option<f64>,
}

/// Feature rows in [`FEATURE_NAMES`] order. Rows with a missing proxy score
/// are skipped; the second value counts them.
pub fn feature_rows(
    table: &ScoreTable,
    targets: Option<&BTreeMap<String, f64>>,
) -> Result<(Vec<FeatureRow>, usize)> {
    if let Some(p) = FEATURE_PROXIES.iter().find(|p| !table.proxies.contains(p)) {
        return Err(Error::Data(format!("score table lacks column score_{p}")));
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    for r in &table.rows {
        let scores: Option<Vec<f64>> = FEATURE_PROXIES.iter().map(|&p| r.score(p)).collect();
        let Some(scores) = scores else {
            skipped += 1;
            continue;
        };
        let mut features = vec![r.depth as f64, r.embed_dim as f64, r.mean_heads, r.mean_mlp_ratio];
        features.extend(scores);
        rows.push(FeatureRow {
            id: r.id.clone(),
            features,
            target: targets.and_then(|t| t.get(&r.id).copied()),
        });
    }
    Ok((rows, skipped))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or hit `min_leaf`.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// `None` uses `ceil(features / 3)`.
    pub max_features: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: None,
            min_leaf: 1,
            max_features: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub seed: u64,
    pub root: TreeNode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub params: ForestParams,
    pub n_features: usize,
    pub feature_names: Vec<String>,
    /// The training target was constant.
    pub constant_target: bool,
    pub trees: Vec<Tree>,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: ForestParams,
    mtry: usize,
}

impl Builder<'_> {
    fn grow(&self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> TreeNode {
        let n = idx.len();
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / n as f64;
        let pure = idx.iter().all(|&i| self.y[i] == self.y[idx[0]]);
        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        if pure || n < 2 * self.params.min_leaf || !depth_ok {
            return TreeNode::Leaf { value: mean };
        }
        let p = self.x[0].len();
        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(rng);
        let mut best: Option<(f64, usize, f64)> = None;
        for (tried, &f) in order.iter().enumerate() {
            if tried >= self.mtry && best.is_some() {
                break;
            }
            if let Some((gain, thr)) = self.best_split(idx, f) {
                if best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, thr));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return TreeNode::Leaf { value: mean };
        };
        idx.sort_by(|&a, &b| {
            let (va, vb) = (self.x[a][feature] <= threshold, self.x[b][feature] <= threshold);
            vb.cmp(&va).then(a.cmp(&b))
        });
        let cut = idx.iter().take_while(|&&i| self.x[i][feature] <= threshold).count();
        let (l, r) = idx.split_at_mut(cut);
        TreeNode::Split {
            feature,
            threshold,
            left: Box::new(self.grow(l, depth + 1, rng)),
            right: Box::new(self.grow(r, depth + 1, rng)),
        }
    }

    /// Largest reduction of summed squared error over thresholds of `f`.
    fn best_split(&self, idx: &[usize], f: usize) -> Option<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = idx.iter().map(|&i| (self.x[i][f], self.y[i])).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = pts.len();
        let total: f64 = pts.iter().map(|p| p.1).sum();
        let total_sq: f64 = pts.iter().map(|p| p.1 * p.1).sum();
        let parent = total_sq - total * total / n as f64;
        let (mut ls, mut lsq) = (0.0, 0.0);
        let mut best: Option<(f64, f64)> = None;
        let m = self.params.min_leaf;
        for k in 0..n - 1 {
            ls += pts[k].1;
            lsq += pts[k].1 * pts[k].1;
            let nl = k + 1;
            let nr = n - nl;
            if nl < m || nr < m || pts[k].0 == pts[k + 1].0 {
                continue;
            }
            let rs = total - ls;
            let rsq = total_sq - lsq;
            let sse = (lsq - ls * ls / nl as f64) + (rsq - rs * rs / nr as f64);
            let gain = parent - sse;
            if best.is_none_or(|(g, _)| gain > g) {
                let mut thr = 0.5 * (pts[k].0 + pts[k + 1].0);
                if thr >= pts[k + 1].0 {
                    thr = pts[k].0;
                }
                best = Some((gain, thr));
            }
        }
        best
    }
}

/// Fits a bagged CART regression forest. Tree `t` is reproducible from the
/// training data and its stored seed.
pub fn fit(x: &[Vec<f64>], y: &[f64], params: &ForestParams, seed: u64) -> Result<ForestModel> {
    if x.len() < 5 {
        return Err(Error::Data(format!("forest fit needs at least 5 rows, got {}", x.len())));
    }
    if x.len() != y.len() {
        return Err(Error::Contract(format!("{} feature rows, {} targets", x.len(), y.len())));
    }
    let p = x[0].len();
    if p == 0 || x.iter().any(|r| r.len() != p) {
        return Err(Error::Contract("feature rows must share a non-zero length".into()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Data("features and targets must be finite".into()));
    }
    if params.n_trees == 0 || params.min_leaf == 0 {
        return Err(Error::Config("forest needs at least one tree and min_leaf >= 1".into()));
    }
    let mtry = params.max_features.unwrap_or(p.div_ceil(3)).clamp(1, p);
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..params.n_trees).map(|_| seeder.next_u64()).collect();
    let builder = Builder {
        x,
        y,
        params: *params,
        mtry,
    };
    let trees = seeds
        .par_iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut idx: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
            idx.sort_unstable();
            Tree {
                seed: s,
                root: builder.grow(&mut idx, 0, &mut rng),
            }
        })
        .collect();
    Ok(ForestModel {
        params: *params,
        n_features: p,
        feature_names: Vec::new(),
        constant_target: y.iter().all(|&v| v == y[0]),
        trees,
    })
}

impl ForestModel {
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        x.iter()
            .map(|row| {
                if row.len() != self.n_features {
                    return Err(Error::Contract(format!(
                        "model expects {} features, got {}",
                        self.n_features,
                        row.len()
                    )));
                }
                let sum: f64 = self.trees.iter().map(|t| t.root.predict(row)).sum();
                Ok(sum / self.trees.len() as f64)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    /// One ρ per kept repeat.
    pub rhos: Vec<f64>,
    pub mean: Option<f64>,
    /// Population standard deviation over `rhos`.
    pub std: Option<f64>,
    /// Repeats whose held-out ρ was undefined.
    pub dropped: usize,
}

/// Held-out Spearman of forest predictions for each training size.
pub fn learning_curve(
    rows: &[FeatureRow],
    sizes: &[usize],
    repeats: usize,
    params: &ForestParams,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if repeats == 0 {
        return Err(Error::Config("learning curve needs at least one repeat".into()));
    }
    let targets: Vec<f64> = rows
        .iter()
        .map(|r| r.target.ok_or_else(|| Error::Data(format!("row {} has no target", r.id))))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size + 2 > rows.len() {
            return Err(Error::Config(format!(
                "train size {size} leaves fewer than two held-out rows of {}",
                rows.len()
            )));
        }
        let mut rhos = Vec::with_capacity(repeats);
        let mut dropped = 0;
        for rep in 0..repeats {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("split:{size}:{rep}")));
            let mut idx: Vec<usize> = (0..rows.len()).collect();
            idx.shuffle(&mut rng);
            let (train, test) = idx.split_at(size);
            let x: Vec<Vec<f64>> = train.iter().map(|&i| rows[i].features.clone()).collect();
            let y: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
            let model = fit(&x, &y, params, derive_seed(seed, &format!("forest:{size}:{rep}")))?;
            let xt: Vec<Vec<f64>> = test.iter().map(|&i| rows[i].features.clone()).collect();
            let pred = model.predict(&xt)?;
            let actual: Vec<f64> = test.iter().map(|&i| targets[i]).collect();
            match spearman(&pred, &actual)? {
                Some(r) => rhos.push(r),
                None => dropped += 1,
            }
        }
        let (mean, std) = if rhos.is_empty() {
            (None, None)
        } else {
            let n = rhos.len() as f64;
            let m = rhos.iter().sum::<f64>() / n;
            let v = rhos.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n;
            (Some(m), Some(v.sqrt()))
        };
        out.push(CurvePoint {
            size,
            rhos,
            mean,
            std,
            dropped,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64, (i * 7 % 11) as f64]).collect()
    }

    #[test]
    fn constant_target_predicts_constant() {
        let x = grid(20);
        let y = vec![3.5; 20];
        let m = fit(&x, &y, &ForestParams::default(), 1).unwrap();
        assert!(m.constant_target);
        for p in m.predict(&x).unwrap() {
            assert_eq!(p, 3.5);
        }
    }

    #[test]
    fn averaging_two_trees() {
        let m = ForestModel {
            params: ForestParams::default(),
            n_features: 1,
            feature_names: Vec::new(),
            constant_target: false,
            trees: vec![
                Tree {
                    seed: 0,
                    root: TreeNode::Leaf { value: 0.0 },
                },
                Tree {
                    seed: 1,
                    root: TreeNode::Leaf { value: 1.0 },
                },
            ],
        };
        assert_eq!(m.predict(&[vec![5.0]]).unwrap(), vec![0.5]);
        assert!(matches!(m.predict(&[vec![1.0, 2.0]]), Err(Error::Contract(_))));
    }

    #[test]
    fn extrapolation_is_constant_beyond_last_split() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let params = ForestParams {
            n_trees: 1,
            ..Default::default()
        };
        let m = fit(&x, &y, &params, 4).unwrap();
        let far = m.predict(&[vec![1e9], vec![1e12]]).unwrap();
        assert_eq!(far[0], far[1]);
    }

    #[test]
    fn fit_is_deterministic() {
        let x = grid(40);
        let y: Vec<f64> = x.iter().map(|r| r[0] * 0.5 + r[1]).collect();
        let a = fit(&x, &y, &ForestParams::default(), 9).unwrap();
        let b = fit(&x, &y, &ForestParams::default(), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
    }

    #[test]
    fn too_few_rows_is_rejected() {
        assert!(fit(&grid(4), &[1.0; 4], &ForestParams::default(), 1).is_err());
    }

    #[test]
    fn tree_json_roundtrip() {
        let x = grid(12);
        let y: Vec<f64> = x.iter().map(|r| r[0]).collect();
        let m = fit(&x, &y, &ForestParams { n_trees: 3, ..Default::default() }, 2).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: ForestModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
