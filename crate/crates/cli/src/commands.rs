use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use hytas_core::analysis::{
    bucket_analysis, compare_tables, default_bucket_edges, factor_correlation, ranked_table, toy_targets,
    TargetKind, ToyConfig, ToyTask,
};
use hytas_core::data::InputSource;
use hytas_core::predictor::{feature_rows, fit, learning_curve, ForestParams, FEATURE_NAMES};
use hytas_core::proxies::{
    format_float, read_score_csv, score_population, write_score_csv, PopulationConfig, ProxyOptions, ScoreTable,
    TCET_COMBINATION,
};
use hytas_core::search_space::{read_genotypes_jsonl, sample_population, write_genotypes_jsonl, SearchSpaceConfig};
use hytas_core::seed::derive_seed;
use serde_json::{json, Value};

use crate::manifest::{sidecar, write_json, Manifest};
use crate::outputs::{self, read_targets, search_times};
use crate::{AnalyzeArgs, Failure, InputArgs, PredictArgs, RankArgs, ReportArgs, SampleArgs, ScoreArgs};

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
        }
        _ => Ok(()),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn input_json(a: &InputArgs, source: &InputSource) -> Value {
    json!({
        "input": a.input.to_string(),
        "patch": a.patch,
        "band_group": a.band_group,
        "stride": a.stride,
        "tokens": source.geometry.tokens,
        "token_width": source.geometry.token_width,
        "num_classes": source.geometry.num_classes,
    })
}

fn read_table(path: &Path) -> Result<ScoreTable> {
    read_score_csv(path).with_context(|| format!("reading score table {}", path.display()))
}

pub fn sample(a: &SampleArgs, argv: &[String]) -> Result<(), Failure> {
    let mut cfg = SearchSpaceConfig::new(a.count, a.seed);
    let s = &a.space;
    cfg.depth = s.depth.unwrap_or(cfg.depth);
    cfg.embed_dim = s.embed_dim.unwrap_or(cfg.embed_dim);
    cfg.num_heads = s.num_heads.unwrap_or(cfg.num_heads);
    cfg.mlp_ratio = s.mlp_ratio.unwrap_or(cfg.mlp_ratio);
    cfg.validate()?;
    let pop = sample_population(&cfg)?;
    ensure_parent(&a.out)?;
    write_genotypes_jsonl(&a.out, &pop)?;
    let config = serde_json::to_value(&cfg).context("encoding config")?;
    let mut m = Manifest::new("sample", argv, config);
    m.output(&a.out);
    m.write(&sidecar(&a.out))?;
    Ok(())
}

pub fn score(a: &ScoreArgs, argv: &[String]) -> Result<(), Failure> {
    let opts = ProxyOptions {
        sign_removal: a.sign_removal,
        module_split: a.module_split,
        decay_start: a.decay_start,
        ..ProxyOptions::default()
    };
    opts.validate()?;
    if a.batch_size == 0 {
        return Err(Failure::Usage("batch size must be positive".into()));
    }
    let genotypes = read_genotypes_jsonl(&a.genotypes)
        .with_context(|| format!("reading genotypes {}", a.genotypes.display()))?;
    let source = InputSource::open(&a.input.input, a.input.tokenizer(), a.input.classes)?;
    let batch_seed = derive_seed(a.seed, "batch");
    let batch = source.batch(a.batch_size, batch_seed)?;
    let cfg = PopulationConfig {
        seed: a.seed,
        proxies: a.proxies.0.clone(),
        opts: opts.clone(),
        workers: a.workers,
    };
    let start = Instant::now();
    let rows = score_population(&genotypes, &source.geometry, &batch, &cfg)?;
    let wall = start.elapsed().as_secs_f64();
    let table = ScoreTable::new(cfg.proxies.clone(), rows);
    ensure_parent(&a.out)?;
    write_score_csv(&a.out, &table)?;

    let config = json!({
        "genotypes": a.genotypes.display().to_string(),
        "proxies": cfg.proxies,
        "seed": a.seed,
        "batch_seed": batch_seed,
        "batch_size": a.batch_size,
        "batch_provenance": batch.provenance().to_string(),
        "workers": a.workers,
        "input": input_json(&a.input, &source),
        "options": opts,
        "tcet_combination": TCET_COMBINATION,
    });
    let mut m = Manifest::new("score", argv, config);
    m.input(&a.genotypes)?;
    if let hytas_core::data::InputSpec::Cube(p) = &a.input.input {
        m.input(p)?;
    }
    m.output(&a.out);
    let times: BTreeMap<String, Value> = search_times(&table)
        .into_iter()
        .map(|t| (t.proxy.to_string(), json!(t.total_seconds)))
        .collect();
    m.set("search_times_seconds", json!(times));
    m.set("wall_seconds", json!(wall));
    m.write(&sidecar(&a.out))?;
    Ok(())
}

pub fn rank(a: &RankArgs, argv: &[String]) -> Result<(), Failure> {
    let table = read_table(&a.scores)?;
    ensure_dir(&a.out)?;
    let mut config = json!({ "scores": a.scores.display().to_string() });
    let mut inputs: Vec<PathBuf> = vec![a.scores.clone()];
    let mut produced = Vec::new();
    let (targets, kind) = if a.toy.toy {
        let (Some(gpath), Some(seed)) = (&a.toy.genotypes, a.seed) else {
            return Err(Failure::Usage("--toy needs --genotypes and --seed".into()));
        };
        let all = read_genotypes_jsonl(gpath).with_context(|| format!("reading genotypes {}", gpath.display()))?;
        let by_id: BTreeMap<&str, _> = all.iter().map(|g| (g.id.as_str(), g)).collect();
        let genotypes: Vec<_> = table
            .rows
            .iter()
            .filter_map(|r| by_id.get(r.id.as_str()).map(|g| (*g).clone()))
            .collect();
        if genotypes.is_empty() {
            return Err(Failure::Runtime(anyhow::anyhow!(
                "no genotype in {} matches the score table",
                gpath.display()
            )));
        }
        let source = InputSource::open(&a.toy.input.input, a.toy.input.tokenizer(), a.toy.input.classes)?;
        let task_seed = derive_seed(seed, "toy-task");
        let task = ToyTask::generate(
            &source.geometry,
            a.toy.toy_train_samples,
            a.toy.toy_test_samples,
            a.toy.toy_noise,
            task_seed,
        )?;
        let cfg = ToyConfig {
            epochs: a.toy.toy_epochs,
            batch_size: a.toy.toy_batch_size,
            lr: a.toy.toy_lr,
            seed,
        };
        let records = toy_targets(&genotypes, &task, &cfg, a.workers)?;
        let path = a.out.join("targets.csv");
        outputs::write_targets(&path, &records)?;
        produced.push(path);
        inputs.push(gpath.clone());
        config["toy"] = json!({
            "genotypes": gpath.display().to_string(),
            "seed": seed,
            "task_seed": task_seed,
            "input": input_json(&a.toy.input, &source),
            "train_samples": a.toy.toy_train_samples,
            "test_samples": a.toy.toy_test_samples,
            "noise": a.toy.toy_noise,
            "training": cfg,
            "workers": a.workers,
        });
        let map = records.iter().map(|r| (r.id.clone(), r.result.accuracy)).collect();
        (map, TargetKind::Toy)
    } else {
        let Some(t) = &a.target else {
            return Err(Failure::Usage("rank needs --target <csv> or --toy".into()));
        };
        config["target"] = json!(t.display().to_string());
        inputs.push(t.clone());
        read_targets(t)?
    };
    let ranked = ranked_table(&table, &targets, kind)?;
    let csv_path = a.out.join("ranked.csv");
    outputs::write_ranked(&csv_path, &ranked)?;
    let json_path = a.out.join("ranked.json");
    let mut report = json!({ "ranked": ranked });
    if kind == TargetKind::Toy {
        report["note"] = json!("TOY targets: accuracies of the built-in toy trainer; the oracle is the maximum over toy-trained networks only");
    }
    write_json(&json_path, &report)?;
    produced.extend([csv_path, json_path]);

    let mut m = Manifest::new("rank", argv, config);
    for p in &inputs {
        m.input(p)?;
    }
    for p in &produced {
        m.output(p);
    }
    m.write(&a.out.join("manifest.json"))?;
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs, argv: &[String]) -> Result<(), Failure> {
    let table = read_table(&a.scores)?;
    let targets = match &a.target {
        Some(t) => Some(read_targets(t)?),
        None => None,
    };
    if a.bucket_edges.is_some() && targets.is_none() {
        return Err(Failure::Usage(
            "bucket analysis needs a `target` column; pass --target <csv with id,target>".into(),
        ));
    }
    ensure_dir(&a.out)?;
    let mut produced = Vec::new();
    let mut report = serde_json::Map::new();

    match factor_correlation(&table, targets.as_ref().map(|t| &t.0)) {
        Ok(fm) => {
            let p = a.out.join("factors.csv");
            outputs::write_factors(&p, &fm)?;
            produced.push(p);
            report.insert("factor_correlation".into(), json!(fm));
        }
        Err(hytas_core::Error::Data(msg)) => {
            report.insert("factor_correlation".into(), json!({ "skipped": msg }));
        }
        Err(e) => return Err(e.into()),
    }

    let mut edges_used = None;
    if let Some((t, kind)) = &targets {
        let ranked = ranked_table(&table, t, *kind)?;
        let p = a.out.join("ranked.csv");
        outputs::write_ranked(&p, &ranked)?;
        produced.push(p);
        report.insert("ranked".into(), json!(ranked));

        let max_ms = table.rows.iter().map(|r| r.formula_ms).max().unwrap_or(0);
        let edges = a.bucket_edges.clone().unwrap_or_else(|| default_bucket_edges(max_ms));
        let buckets = bucket_analysis(&table, t, *kind, &edges)?;
        let p = a.out.join("buckets.csv");
        outputs::write_buckets(&p, &buckets)?;
        produced.push(p);
        report.insert("buckets".into(), json!(buckets));
        edges_used = Some(edges);

        if !table.split_proxies.is_empty() {
            let rows = outputs::module_split_rows(&table, t);
            let p = a.out.join("module_split.csv");
            outputs::write_module_split(&p, &rows)?;
            produced.push(p);
            let v: Vec<Value> = rows
                .iter()
                .map(|(proxy, part, rho)| json!({ "proxy": proxy, "part": part, "rho": rho }))
                .collect();
            report.insert("module_split".into(), Value::Array(v));
        }
        if *kind == TargetKind::Toy {
            report.insert(
                "note".into(),
                json!("TOY targets: the oracle is the maximum over toy-trained networks only"),
            );
        }
    }

    if let Some(c) = &a.compare {
        let other = read_table(c)?;
        let rows = compare_tables(&table, &other)?;
        let p = a.out.join("sensitivity.csv");
        outputs::write_sensitivity(&p, &rows)?;
        produced.push(p);
        report.insert("sensitivity".into(), json!(rows));
    }

    let p = a.out.join("analysis.json");
    write_json(&p, &Value::Object(report))?;
    produced.push(p);

    let config = json!({
        "scores": a.scores.display().to_string(),
        "target": a.target.as_ref().map(|t| t.display().to_string()),
        "compare": a.compare.as_ref().map(|t| t.display().to_string()),
        "bucket_edges": edges_used,
    });
    let mut m = Manifest::new("analyze", argv, config);
    m.input(&a.scores)?;
    for p in a.target.iter().chain(&a.compare) {
        m.input(p)?;
    }
    for p in &produced {
        m.output(p);
    }
    m.write(&a.out.join("manifest.json"))?;
    Ok(())
}

pub fn predict(a: &PredictArgs, argv: &[String]) -> Result<(), Failure> {
    let table = read_table(&a.scores)?;
    let (targets, kind) = read_targets(&a.target)?;
    let (rows, skipped) = feature_rows(&table, Some(&targets))?;
    let rows: Vec<_> = rows.into_iter().filter(|r| r.target.is_some()).collect();
    if rows.len() < 2 {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "need at least two rows with all feature scores and a target, got {}",
            rows.len()
        )));
    }
    let params = ForestParams {
        n_trees: a.trees,
        ..ForestParams::default()
    };
    ensure_dir(&a.out)?;
    let x: Vec<Vec<f64>> = rows.iter().map(|r| r.features.clone()).collect();
    let y: Vec<f64> = rows.iter().filter_map(|r| r.target).collect();
    let start = Instant::now();
    let model = fit(&x, &y, &params, derive_seed(a.seed, "forest"))?;
    let fit_seconds = start.elapsed().as_secs_f64();
    let pred = model.predict(&x)?;
    let curve = learning_curve(&rows, &a.sizes, a.repeats, &params, a.seed)?;

    let model_path = a.out.join("model.json");
    write_json(&model_path, &json!(model))?;
    let pred_path = a.out.join("predictions.csv");
    let pred_rows: Vec<Vec<String>> = rows
        .iter()
        .zip(&pred)
        .map(|(r, p)| vec![r.id.clone(), format_float(*p), r.target.map(format_float).unwrap_or_default()])
        .collect();
    outputs::write_csv(&pred_path, &["id", "predicted", "target"], &pred_rows)?;
    let curve_path = a.out.join("learning_curve.csv");
    outputs::write_learning_curve(&curve_path, &curve)?;
    let json_path = a.out.join("predictor.json");
    write_json(
        &json_path,
        &json!({
            "features": FEATURE_NAMES,
            "rows": rows.len(),
            "skipped_missing_scores": skipped,
            "target_kind": kind,
            "learning_curve": curve,
        }),
    )?;

    let config = json!({
        "scores": a.scores.display().to_string(),
        "target": a.target.display().to_string(),
        "seed": a.seed,
        "sizes": a.sizes,
        "repeats": a.repeats,
        "forest": params,
    });
    let mut m = Manifest::new("predict", argv, config);
    m.input(&a.scores)?;
    m.input(&a.target)?;
    for p in [&model_path, &pred_path, &curve_path, &json_path] {
        m.output(p);
    }
    m.set("fit_seconds", json!(fit_seconds));
    m.write(&a.out.join("manifest.json"))?;
    Ok(())
}

/// Manifests found directly inside `dir`.
fn collect_manifests(dir: &Path) -> Result<Vec<Value>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n == "manifest.json" || n.ends_with(".manifest.json"))
        })
        .collect();
    names.sort();
    names
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            Ok(json!({ "path": p.display().to_string(), "manifest": v }))
        })
        .collect()
}

pub fn report(a: &ReportArgs, argv: &[String]) -> Result<(), Failure> {
    let table = read_table(&a.scores)?;
    ensure_dir(&a.out)?;
    let times = search_times(&table);
    let times_path = a.out.join("search_times.csv");
    outputs::write_search_times(&times_path, &times)?;
    let mut runs = Vec::new();
    for dir in &a.runs {
        runs.push(json!({ "dir": dir.display().to_string(), "manifests": collect_manifests(dir)? }));
    }
    let times_json: Vec<Value> = times
        .iter()
        .map(|t| {
            json!({
                "proxy": t.proxy,
                "total_seconds": t.total_seconds,
                "mean_seconds": t.mean_seconds,
                "rows": t.rows,
                "scored": t.scored,
            })
        })
        .collect();
    let report_path = a.out.join("report.json");
    write_json(&report_path, &json!({ "search_times": times_json, "runs": runs }))?;

    let config = json!({
        "scores": a.scores.display().to_string(),
        "runs": a.runs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    let mut m = Manifest::new("report", argv, config);
    m.input(&a.scores)?;
    m.output(&times_path);
    m.output(&report_path);
    m.write(&a.out.join("manifest.json"))?;
    Ok(())
}
