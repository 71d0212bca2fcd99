//! Genotype encoding, the population sampler, and closed-form size counters.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Width of every attention head, independent of the embedding dimension.
pub const HEAD_DIM: usize = 64;

/// Inclusive integer range `start, start + step, ..., stop`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub start: usize,
    pub stop: usize,
    pub step: usize,
}

impl IntRange {
    pub const fn new(start: usize, stop: usize, step: usize) -> Self {
        Self { start, stop, step }
    }

    pub fn values(&self) -> Vec<usize> {
        if self.step == 0 || self.stop < self.start {
            return Vec::new();
        }
        (self.start..=self.stop).step_by(self.step).collect()
    }

    pub fn contains(&self, v: usize) -> bool {
        self.step > 0
            && v >= self.start
            && v <= self.stop
            && (v - self.start) % self.step == 0
    }

    fn within(&self, outer: &IntRange) -> bool {
        !self.values().is_empty() && self.values().iter().all(|&v| outer.contains(v))
    }
}

impl std::str::FromStr for IntRange {
    type Err = Error;

    /// Parses `start:stop[:step]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad range component {p:?} in {s:?}")))
        };
        match parts.as_slice() {
            [a, b] => Ok(Self::new(num(a)?, num(b)?, 1)),
            [a, b, c] => Ok(Self::new(num(a)?, num(b)?, num(c)?)),
            _ => Err(Error::Config(format!("range {s:?} is not start:stop[:step]"))),
        }
    }
}

pub const DEPTH_RANGE: IntRange = IntRange::new(4, 10, 1);
pub const EMBED_DIM_RANGE: IntRange = IntRange::new(32, 240, 16);
pub const NUM_HEADS_RANGE: IntRange = IntRange::new(3, 6, 1);
pub const MLP_RATIO_RANGE: IntRange = IntRange::new(1, 6, 1);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpaceConfig {
    pub depth: IntRange,
    pub embed_dim: IntRange,
    pub num_heads: IntRange,
    pub mlp_ratio: IntRange,
    pub sample_count: usize,
    pub seed: u64,
}

impl SearchSpaceConfig {
    pub fn new(sample_count: usize, seed: u64) -> Self {
        Self {
            depth: DEPTH_RANGE,
            embed_dim: EMBED_DIM_RANGE,
            num_heads: NUM_HEADS_RANGE,
            mlp_ratio: MLP_RATIO_RANGE,
            sample_count,
            seed,
        }
    }

    /// Ranges must be nonempty and lie inside the full search space.
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("depth", &self.depth, &DEPTH_RANGE),
            ("embed_dim", &self.embed_dim, &EMBED_DIM_RANGE),
            ("num_heads", &self.num_heads, &NUM_HEADS_RANGE),
            ("mlp_ratio", &self.mlp_ratio, &MLP_RATIO_RANGE),
        ];
        for (name, r, full) in checks {
            if !r.within(full) {
                return Err(Error::Config(format!(
                    "{name} range {}:{}:{} is empty or leaves {}:{}:{}",
                    r.start, r.stop, r.step, full.start, full.stop, full.step
                )));
            }
        }
        if self.sample_count == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    #[serde(default)]
    pub id: String,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: Vec<usize>,
    pub mlp_ratio: Vec<usize>,
}

#[derive(Serialize)]
struct CanonicalGenotype<'a> {
    depth: usize,
    embed_dim: usize,
    num_heads: &'a [usize],
    mlp_ratio: &'a [usize],
}

impl Genotype {
    pub fn new(
        depth: usize,
        embed_dim: usize,
        num_heads: Vec<usize>,
        mlp_ratio: Vec<usize>,
    ) -> Result<Self> {
        let mut g = Self {
            id: String::new(),
            depth,
            embed_dim,
            num_heads,
            mlp_ratio,
        };
        g.validate()?;
        g.id = g.canonical_id();
        Ok(g)
    }

    /// Same heads and ratio in every block.
    pub fn uniform(depth: usize, embed_dim: usize, heads: usize, ratio: usize) -> Result<Self> {
        Self::new(depth, embed_dim, vec![heads; depth], vec![ratio; depth])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(format!("invalid genotype: {what}")));
        if !DEPTH_RANGE.contains(self.depth) {
            return bad(format!("depth {}", self.depth));
        }
        if !EMBED_DIM_RANGE.contains(self.embed_dim) {
            return bad(format!("embed_dim {}", self.embed_dim));
        }
        if self.num_heads.len() != self.depth || self.mlp_ratio.len() != self.depth {
            return bad(format!(
                "depth {} with {} heads entries and {} ratio entries",
                self.depth,
                self.num_heads.len(),
                self.mlp_ratio.len()
            ));
        }
        if let Some(h) = self.num_heads.iter().find(|&&h| !NUM_HEADS_RANGE.contains(h)) {
            return bad(format!("num_heads entry {h}"));
        }
        if let Some(r) = self.mlp_ratio.iter().find(|&&r| !MLP_RATIO_RANGE.contains(r)) {
            return bad(format!("mlp_ratio entry {r}"));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding
    /// (fields in declaration order, no whitespace, id excluded).
    pub fn canonical_id(&self) -> String {
        let canon = CanonicalGenotype {
            depth: self.depth,
            embed_dim: self.embed_dim,
            num_heads: &self.num_heads,
            mlp_ratio: &self.mlp_ratio,
        };
        let json = serde_json::to_vec(&canon).expect("genotype serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn mean_heads(&self) -> f64 {
        self.num_heads.iter().sum::<usize>() as f64 / self.depth as f64
    }

    pub fn mean_mlp_ratio(&self) -> f64 {
        self.mlp_ratio.iter().sum::<usize>() as f64 / self.depth as f64
    }

    pub fn sum_head_dim(&self) -> usize {
        self.num_heads.iter().sum::<usize>() * HEAD_DIM
    }

    pub fn sum_mlp_dim(&self) -> usize {
        self.mlp_ratio.iter().sum::<usize>() * self.embed_dim
    }
}

/// Token geometry shared by every network scored in one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGeometry {
    pub tokens: usize,
    pub token_width: usize,
    pub num_classes: usize,
}

impl TokenGeometry {
    pub fn new(tokens: usize, token_width: usize, num_classes: usize) -> Result<Self> {
        if tokens == 0 || token_width == 0 || num_classes < 2 {
            return Err(Error::Config(format!(
                "token geometry needs tokens > 0, width > 0, classes >= 2; got {tokens}, {token_width}, {num_classes}"
            )));
        }
        Ok(Self {
            tokens,
            token_width,
            num_classes,
        })
    }
}

/// Draws `cfg.sample_count` genotypes, each component uniform and
/// independent. Duplicates are kept.
pub fn sample_population(cfg: &SearchSpaceConfig) -> Result<Vec<Genotype>> {
    cfg.validate()?;
    let depths = cfg.depth.values();
    let dims = cfg.embed_dim.values();
    let heads = cfg.num_heads.values();
    let ratios = cfg.mlp_ratio.values();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pick = |vals: &[usize]| vals[rng.random_range(0..vals.len())];
    let mut out = Vec::with_capacity(cfg.sample_count);
    for _ in 0..cfg.sample_count {
        let depth = pick(&depths);
        let embed_dim = pick(&dims);
        let h: Vec<usize> = (0..depth).map(|_| pick(&heads)).collect();
        let r: Vec<usize> = (0..depth).map(|_| pick(&ratios)).collect();
        out.push(Genotype::new(depth, embed_dim, h, r)?);
    }
    Ok(out)
}

/// Embedding layer, four sub-layers per block, and the classification head.
pub fn layer_count(g: &Genotype) -> usize {
    4 * g.depth + 2
}

fn rounded_mean(xs: &[usize]) -> u64 {
    let n = xs.len() as u64;
    let s: u64 = xs.iter().map(|&x| x as u64).sum();
    (2 * s + n) / (2 * n)
}

/// Closed-form model size with per-block heads and ratios reduced to their
/// rounded means.
pub fn model_size_formula(g: &Genotype, num_classes: usize) -> u64 {
    let b = rounded_mean(&g.mlp_ratio);
    let c = rounded_mean(&g.num_heads);
    model_size_scalar(g.depth as u64, b, c, g.embed_dim as u64, num_classes as u64)
}

/// `MS(a, b, c, d)` with depth `a`, MLP ratio `b`, heads `c`, embedding `d`.
pub fn model_size_scalar(a: u64, b: u64, c: u64, d: u64, num_classes: u64) -> u64 {
    let per_block = 4 * d + 256 * c * d + 192 * c + 5 * d + 7680 + 2 * b * d * d + b * d + d;
    1539 * d + a * per_block + 2 * d + num_classes * (d + 1)
}

/// Learnable scalars of the network built by [`crate::model::build`].
pub fn exact_param_count(g: &Genotype, geom: &TokenGeometry) -> u64 {
    let d = g.embed_dim as u64;
    let t = geom.tokens as u64;
    let din = geom.token_width as u64;
    let classes = geom.num_classes as u64;
    let embed = din * d + d + d + (t + 1) * d;
    let blocks: u64 = g
        .num_heads
        .iter()
        .zip(&g.mlp_ratio)
        .map(|(&c, &r)| {
            let inner = (HEAD_DIM * c) as u64;
            let hidden = r as u64 * d;
            2 * d + d * 3 * inner + 3 * inner + inner * d + d + 2 * d + d * hidden + hidden + hidden * d + d
        })
        .sum();
    embed + blocks + 2 * d + d * classes + classes
}

/// Forward multiply-accumulate count at batch size 1, counted as 2 flops per
/// multiply-add: every linear map contributes `2 * in * out` per token, each
/// head contributes `2 * T'^2 * 64` for scores and again for the value
/// product, with `T' = T + 1` tokens inside blocks (class token included).
/// Normalization, softmax and activations are not counted.
pub fn flops_estimate(g: &Genotype, geom: &TokenGeometry) -> u64 {
    let d = g.embed_dim as u64;
    let t = geom.tokens as u64;
    let tp = t + 1;
    let hd = HEAD_DIM as u64;
    let embed = 2 * t * geom.token_width as u64 * d;
    let blocks: u64 = g
        .num_heads
        .iter()
        .zip(&g.mlp_ratio)
        .map(|(&c, &r)| {
            let c = c as u64;
            let hidden = r as u64 * d;
            let qkv = 2 * tp * d * 3 * hd * c;
            let attn = 2 * 2 * tp * tp * hd * c;
            let proj = 2 * tp * hd * c * d;
            let mlp = 2 * 2 * tp * d * hidden;
            qkv + attn + proj + mlp
        })
        .sum();
    embed + blocks + 2 * d * geom.num_classes as u64
}

pub fn write_genotypes_jsonl(path: &Path, genotypes: &[Genotype]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for g in genotypes {
        serde_json::to_writer(&mut w, g)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a genotype file. Missing ids are filled in; a present id must match
/// the canonical one.
pub fn read_genotypes_jsonl(path: &Path) -> Result<Vec<Genotype>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut g: Genotype = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        g.validate()?;
        let canon = g.canonical_id();
        if g.id.is_empty() {
            g.id = canon;
        } else if g.id != canon {
            return Err(Error::Format(format!(
                "{}:{}: id {} does not match canonical id {canon}",
                path.display(),
                lineno + 1,
                g.id
            )));
        }
        out.push(g);
    }
    Ok(out)
}
