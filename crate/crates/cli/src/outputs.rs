//! CSV writers for reports and the target file reader.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use hytas_core::analysis::{Bucket, FactorMatrix, RankedTable, SensitivityRow, TargetKind, ToyRecord};
use hytas_core::predictor::CurvePoint;
use hytas_core::proxies::{format_float, ProxyId, ScoreTable};

fn cell(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

fn kind_label(k: TargetKind) -> &'static str {
    match k {
        TargetKind::Toy => "TOY",
        TargetKind::External => "EXTERNAL",
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `id,target[,kind]`. Extra columns are ignored and empty targets are
/// skipped. The kind is TOY only when every row says so.
pub fn read_targets(path: &Path) -> Result<(BTreeMap<String, f64>, TargetKind)> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header = rd.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let id = col("id").ok_or_else(|| anyhow!("{} has no `id` column", path.display()))?;
    let target = col("target").ok_or_else(|| anyhow!("{} has no `target` column", path.display()))?;
    let kind = col("kind");
    let mut out = BTreeMap::new();
    let mut all_toy = true;
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let t = rec.get(target).unwrap_or("");
        if t.is_empty() {
            continue;
        }
        let v: f64 = t
            .parse()
            .map_err(|_| anyhow!("{} row {}: target {t:?} is not a number", path.display(), line + 2))?;
        all_toy &= kind.and_then(|k| rec.get(k)) == Some("TOY");
        out.insert(rec.get(id).unwrap_or("").to_string(), v);
    }
    if out.is_empty() {
        bail!("{} has no target values", path.display());
    }
    let kind = if all_toy { TargetKind::Toy } else { TargetKind::External };
    Ok((out, kind))
}

pub fn write_targets(path: &Path, toy: &[ToyRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = toy
        .iter()
        .map(|t| {
            vec![
                t.id.clone(),
                format_float(t.result.accuracy),
                "TOY".into(),
                format_float(t.result.accuracy_before),
                format_float(t.result.loss_before),
                format_float(t.result.loss_after),
                t.result.steps.to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        &["id", "target", "kind", "accuracy_before", "loss_before", "loss_after", "steps"],
        &rows,
    )
}

const RANKED_HEADER: [&str; 8] = [
    "proxy",
    "rho",
    "argmax_id",
    "argmax_ms",
    "proposed_target",
    "oracle",
    "rows",
    "target_kind",
];

fn ranked_rows(t: &RankedTable) -> Vec<Vec<String>> {
    t.rankings
        .iter()
        .map(|r| {
            vec![
                r.proxy.to_string(),
                cell(r.rho),
                r.argmax_id.clone().unwrap_or_default(),
                r.argmax_ms.map(|m| m.to_string()).unwrap_or_default(),
                cell(r.proposed),
                cell(t.oracle),
                t.rows.to_string(),
                kind_label(t.target_kind).into(),
            ]
        })
        .collect()
}

pub fn write_ranked(path: &Path, t: &RankedTable) -> Result<()> {
    write_csv(path, &RANKED_HEADER, &ranked_rows(t))
}

pub fn write_buckets(path: &Path, buckets: &[Bucket]) -> Result<()> {
    let mut header = vec!["bucket_lo", "bucket_hi", "bucket_rows", "sparse"];
    header.extend(RANKED_HEADER);
    let mut rows = Vec::new();
    for b in buckets {
        for r in ranked_rows(&b.table) {
            let mut row = vec![
                format_float(b.lo),
                format_float(b.hi),
                b.rows.to_string(),
                b.sparse.to_string(),
            ];
            row.extend(r);
            rows.push(row);
        }
    }
    write_csv(path, &header, &rows)
}

pub fn write_factors(path: &Path, m: &FactorMatrix) -> Result<()> {
    let mut header = vec!["row"];
    header.extend(m.factors.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = m
        .rows
        .iter()
        .zip(&m.values)
        .map(|(name, vals)| {
            let mut r = vec![name.clone()];
            r.extend(vals.iter().map(|v| cell(*v)));
            r
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn write_sensitivity(path: &Path, rows: &[SensitivityRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.proxy.to_string(),
                cell(r.rho),
                r.argmax_a.clone().unwrap_or_default(),
                r.argmax_b.clone().unwrap_or_default(),
                r.argmax_agree.to_string(),
            ]
        })
        .collect();
    write_csv(path, &["proxy", "rho", "argmax_a", "argmax_b", "argmax_agree"], &rows)
}

/// ρ of every module-split part against the target.
pub fn module_split_rows(table: &ScoreTable, targets: &BTreeMap<String, f64>) -> Vec<(ProxyId, &'static str, Option<f64>)> {
    type Part = fn(&hytas_core::proxies::ModuleSplit) -> Option<f64>;
    let parts: [(&str, Part); 4] = [
        ("msa", |s| Some(s.msa)),
        ("mlp", |s| Some(s.mlp)),
        ("origin", |s| Some(s.origin)),
        ("logarithm", |s| s.logarithm),
    ];
    let target: Vec<Option<f64>> = table.rows.iter().map(|r| targets.get(&r.id).copied()).collect();
    let mut out = Vec::new();
    for &p in &table.split_proxies {
        for (name, f) in parts {
            let col: Vec<Option<f64>> = table
                .rows
                .iter()
                .map(|r| r.splits.get(&p).copied().flatten().and_then(|s| f(&s)))
                .collect();
            out.push((p, name, hytas_core::analysis::spearman_paired(&col, &target)));
        }
    }
    out
}

pub fn write_module_split(path: &Path, rows: &[(ProxyId, &'static str, Option<f64>)]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|(p, part, rho)| vec![p.to_string(), part.to_string(), cell(*rho)])
        .collect();
    write_csv(path, &["proxy", "part", "rho"], &rows)
}

pub fn write_learning_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|c| {
            vec![
                c.size.to_string(),
                cell(c.mean),
                cell(c.std),
                c.rhos.len().to_string(),
                c.dropped.to_string(),
            ]
        })
        .collect();
    write_csv(path, &["size", "mean_rho", "std_rho", "repeats", "dropped"], &rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchTime {
    pub proxy: ProxyId,
    pub total_seconds: f64,
    pub mean_seconds: f64,
    pub rows: usize,
    pub scored: usize,
}

/// Per-proxy wall time summed over the population.
pub fn search_times(table: &ScoreTable) -> Vec<SearchTime> {
    table
        .proxies
        .iter()
        .map(|&p| {
            let times: Vec<f64> = table.rows.iter().filter_map(|r| r.times.get(&p).copied()).collect();
            let total: f64 = times.iter().sum();
            SearchTime {
                proxy: p,
                total_seconds: total,
                mean_seconds: if times.is_empty() { 0.0 } else { total / times.len() as f64 },
                rows: table.rows.len(),
                scored: table.rows.iter().filter(|r| r.score(p).is_some()).count(),
            }
        })
        .collect()
}

pub fn write_search_times(path: &Path, times: &[SearchTime]) -> Result<()> {
    let rows: Vec<Vec<String>> = times
        .iter()
        .map(|t| {
            vec![
                t.proxy.to_string(),
                format_float(t.total_seconds),
                format_float(t.mean_seconds),
                t.rows.to_string(),
                t.scored.to_string(),
            ]
        })
        .collect();
    write_csv(path, &["proxy", "total_seconds", "mean_seconds", "rows", "scored"], &rows)
}
