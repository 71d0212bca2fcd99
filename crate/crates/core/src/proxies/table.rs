//! Score table CSV: architecture columns, `score_<proxy>` columns, optional
//! `split_<proxy>_{msa,mlp,origin,logarithm}` columns, `time_<proxy>`
//! columns and a `flags` column (`;`-separated). Missing values are empty
//! cells.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ModuleSplit, ProxyId, ScoreRecord};
use crate::error::{Error, Result};

pub const ARCH_COLUMNS: [&str; 10] = [
    "id",
    "depth",
    "embed_dim",
    "mean_heads",
    "mean_mlp_ratio",
    "sum_head_dim",
    "sum_mlp_dim",
    "formula_ms",
    "exact_params",
    "flops",
];

const SPLIT_PARTS: [&str; 4] = ["msa", "mlp", "origin", "logarithm"];

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub proxies: Vec<ProxyId>,
    pub split_proxies: Vec<ProxyId>,
    pub rows: Vec<ScoreRecord>,
}

/// Shortest round-trip decimal; exponent form outside `[1e-5, 1e16)`.
pub fn format_float(v: f64) -> String {
    if !v.is_finite() {
        return String::new();
    }
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

impl ScoreTable {
    pub fn new(proxies: Vec<ProxyId>, rows: Vec<ScoreRecord>) -> Self {
        let split_proxies = proxies
            .iter()
            .copied()
            .filter(|p| rows.iter().any(|r| r.splits.contains_key(p)))
            .collect();
        ScoreTable {
            proxies,
            split_proxies,
            rows,
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ARCH_COLUMNS.iter().map(|s| s.to_string()).collect();
        h.extend(self.proxies.iter().map(|p| format!("score_{p}")));
        for p in &self.split_proxies {
            h.extend(SPLIT_PARTS.iter().map(|part| format!("split_{p}_{part}")));
        }
        h.extend(self.proxies.iter().map(|p| format!("time_{p}")));
        h.push("flags".into());
        h
    }

    /// Column values of `p` with `None` for failed rows.
    pub fn column(&self, p: ProxyId) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.score(p)).collect()
    }
}

pub fn write_score_csv(path: &Path, table: &ScoreTable) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(table.header()).map_err(csv_err)?;
    for r in &table.rows {
        let mut rec = vec![
            r.id.clone(),
            r.depth.to_string(),
            r.embed_dim.to_string(),
            format_float(r.mean_heads),
            format_float(r.mean_mlp_ratio),
            r.sum_head_dim.to_string(),
            r.sum_mlp_dim.to_string(),
            r.formula_ms.to_string(),
            r.exact_params.to_string(),
            r.flops.to_string(),
        ];
        rec.extend(table.proxies.iter().map(|&p| opt(r.score(p))));
        for p in &table.split_proxies {
            match r.splits.get(p).copied().flatten() {
                Some(s) => rec.extend([
                    format_float(s.msa),
                    format_float(s.mlp),
                    format_float(s.origin),
                    opt(s.logarithm),
                ]),
                None => rec.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        rec.extend(table.proxies.iter().map(|p| opt(r.times.get(p).copied())));
        rec.push(r.flags.join(";"));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn parse_opt(s: &str, col: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Format(format!("column {col}: not a number {s:?}")))
}

fn parse_int<T: std::str::FromStr>(s: &str, col: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("column {col}: not an integer {s:?}")))
}

pub fn read_score_csv(path: &Path) -> Result<ScoreTable> {
    let mut rd = csv::ReaderBuilder::new().from_path(path).map_err(csv_err)?;
    let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header.len() < ARCH_COLUMNS.len() + 1 || header[..ARCH_COLUMNS.len()] != ARCH_COLUMNS {
        return Err(Error::Format(format!(
            "score table must start with columns {}",
            ARCH_COLUMNS.join(",")
        )));
    }
    if header.last().map(String::as_str) != Some("flags") {
        return Err(Error::Format("score table must end with a flags column".into()));
    }
    let mut proxies = Vec::new();
    let mut split_proxies = Vec::new();
    let mut times = Vec::new();
    for (i, col) in header.iter().enumerate().skip(ARCH_COLUMNS.len()) {
        if let Some(p) = col.strip_prefix("score_") {
            proxies.push((i, p.parse::<ProxyId>()?));
        } else if let Some(rest) = col.strip_prefix("split_") {
            if let Some(p) = rest.strip_suffix("_msa") {
                split_proxies.push((i, p.parse::<ProxyId>()?));
            }
        } else if let Some(p) = col.strip_prefix("time_") {
            times.push((i, p.parse::<ProxyId>()?));
        } else if col != "flags" {
            return Err(Error::Format(format!("unexpected column {col:?}")));
        }
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            parse_opt(f(i), &header[i])?
                .ok_or_else(|| Error::Format(format!("column {} is empty", header[i])))
        };
        let mut scores = BTreeMap::new();
        for &(i, p) in &proxies {
            scores.insert(p, parse_opt(f(i), &header[i])?);
        }
        let mut splits = BTreeMap::new();
        for &(i, p) in &split_proxies {
            let parts: Vec<Option<f64>> = (0..4)
                .map(|k| parse_opt(f(i + k), &header[i + k]))
                .collect::<Result<_>>()?;
            let split = match (parts[0], parts[1], parts[2]) {
                (Some(msa), Some(mlp), Some(origin)) => Some(ModuleSplit {
                    msa,
                    mlp,
                    origin,
                    logarithm: parts[3],
                }),
                _ => None,
            };
            splits.insert(p, split);
        }
        let mut tmap = BTreeMap::new();
        for &(i, p) in &times {
            if let Some(t) = parse_opt(f(i), &header[i])? {
                tmap.insert(p, t);
            }
        }
        let flags_cell = f(header.len() - 1);
        rows.push(ScoreRecord {
            id: f(0).to_string(),
            depth: parse_int(f(1), "depth")?,
            embed_dim: parse_int(f(2), "embed_dim")?,
            mean_heads: num(3)?,
            mean_mlp_ratio: num(4)?,
            sum_head_dim: parse_int(f(5), "sum_head_dim")?,
            sum_mlp_dim: parse_int(f(6), "sum_mlp_dim")?,
            formula_ms: parse_int(f(7), "formula_ms")?,
            exact_params: parse_int(f(8), "exact_params")?,
            flops: parse_int(f(9), "flops")?,
            scores,
            splits,
            times: tmap,
            flags: flags_cell
                .split(';')
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
        });
    }
    Ok(ScoreTable {
        proxies: proxies.into_iter().map(|(_, p)| p).collect(),
        split_proxies: split_proxies.into_iter().map(|(_, p)| p).collect(),
        rows,
    })
}
