//! Acceptance checks. Runs without the libtest harness and prints one
//! `PASS` or `FAIL` line per criterion; the process fails if any check does.
//!
//! `HYTAS_ACCEPTANCE=1,7,8` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use hytas_core::analysis::{ranked_table, spearman, toy_targets, TargetKind, ToyConfig, ToyTask};
use hytas_core::data::{synth_batch, BatchKind, TokenBatch};
use hytas_core::model::{build, NetworkInstance};
use hytas_core::predictor::{fit, learning_curve, FeatureRow, ForestParams, FEATURE_NAMES};
use hytas_core::proxies::{
    decay_aggregate, score_population, PopulationConfig, ProxyId, ProxyOptions, ProxySession, ScoreTable,
};
use hytas_core::search_space::{
    exact_param_count, layer_count, model_size_formula, model_size_scalar, sample_population, Genotype,
    SearchSpaceConfig, TokenGeometry, DEPTH_RANGE,
};
use hytas_core::tensor::{Reduction, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn default_geom() -> TokenGeometry {
    TokenGeometry::new(20, 10, 16).unwrap()
}

fn population(n: usize, seed: u64, depth: &str, embed: &str) -> Vec<Genotype> {
    let mut cfg = SearchSpaceConfig::new(n, seed);
    cfg.depth = depth.parse().unwrap();
    cfg.embed_dim = embed.parse().unwrap();
    sample_population(&cfg).unwrap()
}

fn mean_ce(net: &NetworkInstance, batch: &TokenBatch) -> Result<f64, String> {
    let mut fp = net.forward(batch).map_err(err)?;
    let l = fp.cross_entropy(batch.labels(), Reduction::Mean).map_err(err)?;
    fp.graph.value(l).item().map_err(err)
}

// Gradient check --------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
/// Relative error denominators never drop below this magnitude.
const REL_FLOOR: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Richardson-extrapolated central difference along one coordinate.
fn fd_coord(net: &mut NetworkInstance, batch: &TokenBatch, p: usize, j: usize) -> Result<f64, String> {
    let orig = net.params()[p].value.data()[j];
    let mut central = |h: f64| -> Result<f64, String> {
        net.params_mut()[p].value.data_mut()[j] = orig + h;
        let up = mean_ce(net, batch)?;
        net.params_mut()[p].value.data_mut()[j] = orig - h;
        let down = mean_ce(net, batch)?;
        net.params_mut()[p].value.data_mut()[j] = orig;
        Ok((up - down) / (2.0 * h))
    };
    let (d1, d2) = (central(FD_STEP)?, central(FD_STEP / 2.0)?);
    Ok((4.0 * d2 - d1) / 3.0)
}

fn ac1() -> Check {
    let geom = TokenGeometry::new(3, 4, 3).unwrap();
    let pop = population(20, 101, "4:5", "32:64:16");
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (k, g) in pop.iter().enumerate() {
        let mut net = build(g, &geom, 1000 + k as u64).map_err(err)?;
        let batch = synth_batch(&geom, BatchKind::Random, 2, k as u64).map_err(err)?;
        let mut fp = net.forward(&batch).map_err(err)?;
        let loss = fp.cross_entropy(batch.labels(), Reduction::Mean).map_err(err)?;
        let mut grads = fp.graph.backward(loss, &[]).map_err(err)?;
        let analytic = fp.param_grads(&mut grads);

        // Whole-vector check along a random direction.
        let dir: Vec<Tensor> = analytic
            .iter()
            .map(|t| Tensor::from_fn(t.shape(), |_| StandardNormal.sample(&mut rng)))
            .collect();
        let along: f64 = analytic.iter().zip(&dir).map(|(a, d)| a.dot(d)).sum();
        let base = net.param_values();
        let shifted = |s: f64| -> Vec<Tensor> {
            base.iter()
                .zip(&dir)
                .map(|(b, d)| Tensor::new(b.shape().to_vec(), b.data().iter().zip(d.data()).map(|(x, y)| x + s * y).collect()).unwrap())
                .collect()
        };
        let eval = |ps: Vec<Tensor>| -> Result<f64, String> {
            let mut fp = net.forward_with(Some(&ps), batch.data(), false).map_err(err)?;
            let l = fp.cross_entropy(batch.labels(), Reduction::Mean).map_err(err)?;
            fp.graph.value(l).item().map_err(err)
        };
        let d1 = (eval(shifted(FD_STEP))? - eval(shifted(-FD_STEP))?) / (2.0 * FD_STEP);
        let d2 = (eval(shifted(FD_STEP / 2.0))? - eval(shifted(-FD_STEP / 2.0))?) / FD_STEP;
        let e = rel_err(along, (4.0 * d2 - d1) / 3.0);
        ensure(e <= GRAD_TOL, || format!("genotype {}: directional rel err {e:.3e}", g.id))?;
        worst = worst.max(e);

        // Per-coordinate checks: every entry of small tensors, a sample of
        // large ones plus their largest-gradient entry.
        for (p, a) in analytic.iter().enumerate() {
            let mut coords: Vec<usize> = if a.len() <= 8 {
                (0..a.len()).collect()
            } else {
                sample_indices(&mut rng, a.len(), 8).into_vec()
            };
            let top = (0..a.len()).max_by(|&i, &j| a.data()[i].abs().total_cmp(&a.data()[j].abs())).unwrap();
            coords.push(top);
            for j in coords {
                let fd = fd_coord(&mut net, &batch, p, j)?;
                let e = rel_err(a.data()[j], fd);
                ensure(e <= GRAD_TOL, || {
                    format!("genotype {} param {} [{j}]: analytic {} fd {fd} rel err {e:.3e}", g.id, net.params()[p].name, a.data()[j])
                })?;
                worst = worst.max(e);
                checked += 1;
            }
        }
    }
    Ok(format!("20 genotypes, {checked} coordinates + 20 directions, max rel err {worst:.2e} (tol {GRAD_TOL:e}, floor {REL_FLOOR:e})"))
}

// Structure -------------------------------------------------------------------

fn ac2() -> Check {
    let geom = TokenGeometry::new(2, 3, 2).unwrap();
    for depth in DEPTH_RANGE.values() {
        let g = Genotype::uniform(depth, 32, 3, 1).map_err(err)?;
        let n = build(&g, &geom, 0).map_err(err)?.layer_registry().len();
        ensure(layer_count(&g) == 4 * depth + 2 && n == 4 * depth + 2, || {
            format!("depth {depth}: layer_count {} registry {n}", layer_count(&g))
        })?;
    }
    Ok("depths 4..=10: layer_count and registry length equal 4*depth+2".into())
}

/// The model-size polynomial expanded term by term in 128-bit integers.
fn ms_oracle(a: i128, b: i128, c: i128, d: i128, classes: i128) -> i128 {
    let embed = 1539 * d;
    let norms = 4 * d + 5 * d + d;
    let attention = 256 * c * d + 192 * c;
    let mlp = 2 * b * d * d + b * d;
    embed + a * (norms + attention + 7680 + mlp) + 2 * d + classes * d + classes
}

/// Parameter count of the built network derived layer by layer.
fn params_oracle(g: &Genotype, geom: &TokenGeometry) -> u64 {
    let d = g.embed_dim as u64;
    let (t, w, k) = (geom.tokens as u64, geom.token_width as u64, geom.num_classes as u64);
    let mut n = w * d + d; // token projection
    n += d; // class token
    n += (t + 1) * d; // positions
    for (&c, &r) in g.num_heads.iter().zip(&g.mlp_ratio) {
        let inner = 64 * c as u64;
        let hidden = r as u64 * d;
        n += 2 * d; // first norm
        n += d * 3 * inner + 3 * inner; // fused q/k/v
        n += inner * d + d; // output projection
        n += 2 * d; // second norm
        n += d * hidden + hidden; // fc1
        n += hidden * d + d; // fc2
    }
    n += 2 * d; // final norm
    n + d * k + k
}

fn ac3() -> Check {
    let small = ms_oracle(4, 1, 3, 32, 16);
    let large = ms_oracle(10, 6, 6, 240, 16);
    ensure(small == 190_768 && large == 11_098_816, || format!("oracle gives {small} and {large}"))?;
    let got = (model_size_scalar(4, 1, 3, 32, 16), model_size_scalar(10, 6, 6, 240, 16));
    ensure(got == (190_768, 11_098_816), || format!("implementation gives {got:?}"))?;
    let uniform = model_size_formula(&Genotype::uniform(4, 32, 3, 1).unwrap(), 16);
    ensure(uniform == 190_768, || format!("genotype path gives {uniform}"))?;
    let geom = TokenGeometry::new(7, 5, 9).unwrap();
    for g in population(10, 303, "4:10", "32:240:16") {
        let expect = params_oracle(&g, &geom);
        let got = exact_param_count(&g, &geom);
        ensure(got == expect, || format!("{}: exact_param_count {got}, closed form {expect}", g.id))?;
        let built = build(&g, &geom, 0).map_err(err)?.num_parameters() as u64;
        ensure(built == expect, || format!("{}: built network has {built}, closed form {expect}", g.id))?;
    }
    Ok("MS = 190768 and 11098816 (oracle and implementation); 10 exact counts match".into())
}

// Proxies ---------------------------------------------------------------------

fn param_bits(net: &NetworkInstance) -> Vec<u64> {
    net.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
}

fn ac4() -> Check {
    let geom = default_geom();
    let pop = population(50, 404, "4:10", "32:240:16");
    let (a, b) = (
        synth_batch(&geom, BatchKind::Random, 64, 1).map_err(err)?,
        synth_batch(&geom, BatchKind::Random, 64, 2).map_err(err)?,
    );
    let opts = ProxyOptions::default();
    let agnostic = [ProxyId::Synflow, ProxyId::LogSynflow, ProxyId::Dss];
    for (k, g) in pop.iter().enumerate() {
        let net = build(g, &geom, k as u64).map_err(err)?;
        let before = param_bits(&net);
        let mut sa = ProxySession::new(&net, &a, &opts).map_err(err)?;
        let mut sb = ProxySession::new(&net, &b, &opts).map_err(err)?;
        for p in agnostic {
            let x = sa.score(p).map_err(err)?.value;
            let y = sb.score(p).map_err(err)?.value;
            ensure(x.to_bits() == y.to_bits(), || format!("{p} on {}: {x} vs {y}", g.id))?;
        }
        drop((sa, sb));
        ensure(param_bits(&net) == before, || format!("parameters of {} changed", g.id))?;
    }
    Ok("50 genotypes: synflow/logsynflow/dss bitwise equal across batches; parameters restored".into())
}

fn ac5() -> Check {
    let geom = default_geom();
    let pop = population(50, 505, "4:10", "32:240:16");
    let (a, b) = (
        synth_batch(&geom, BatchKind::Random, 64, 11).map_err(err)?,
        synth_batch(&geom, BatchKind::Random, 64, 22).map_err(err)?,
    );
    let opts = ProxyOptions::default();
    let mut cols: BTreeMap<ProxyId, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (k, g) in pop.iter().enumerate() {
        let net = build(g, &geom, k as u64).map_err(err)?;
        let mut sa = ProxySession::new(&net, &a, &opts).map_err(err)?;
        let mut sb = ProxySession::new(&net, &b, &opts).map_err(err)?;
        for p in [ProxyId::Snip, ProxyId::GradNorm] {
            let e = cols.entry(p).or_default();
            e.0.push(sa.score(p).map_err(err)?.value);
            e.1.push(sb.score(p).map_err(err)?.value);
        }
    }
    let mut parts = Vec::new();
    let mut pass = true;
    for (p, (x, y)) in &cols {
        let rho = spearman(x, y).map_err(err)?.unwrap_or(f64::NAN);
        pass &= rho >= 0.99;
        parts.push(format!("{p} rho {rho:.4}"));
    }
    let detail = format!("50 genotypes, two RANDOM sources: {} (need >= 0.99)", parts.join(", "));
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ac6() -> Check {
    let start = Instant::now();
    let geom = default_geom();
    let pop = population(100, 606, "4:10", "32:240:16");
    let batch = synth_batch(&geom, BatchKind::Random, 64, 6).map_err(err)?;
    let opts = ProxyOptions::default();
    let mut score = Vec::new();
    for (k, g) in pop.iter().enumerate() {
        let net = build(g, &geom, k as u64).map_err(err)?;
        score.push(ProxySession::new(&net, &batch, &opts).map_err(err)?.score(ProxyId::Synflow).map_err(err)?.value);
    }
    let embed: Vec<f64> = pop.iter().map(|g| g.embed_dim as f64).collect();
    let rho = spearman(&score, &embed).map_err(err)?.unwrap_or(f64::NAN);
    let secs = start.elapsed().as_secs_f64();
    ensure(rho >= 0.9, || format!("rho(synflow, embed_dim) {rho:.4} < 0.9"))?;
    ensure(secs < 600.0, || format!("took {secs:.0}s"))?;
    Ok(format!("100 genotypes: rho(synflow, embed_dim) {rho:.4} in {secs:.1}s"))
}

/// Ranks by counting smaller and equal values, then the textbook Pearson.
fn brute_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let below = v.iter().filter(|b| *b < a).count() as f64;
                let same = v.iter().filter(|b| *b == a).count() as f64;
                below + (same + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut num = 0.0;
    let (mut dx, mut dy) = (0.0, 0.0);
    for i in 0..x.len() {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx).powi(2);
        dy += (ry[i] - my).powi(2);
    }
    (dx > 0.0 && dy > 0.0).then(|| num / (dx * dy).sqrt())
}

fn ac7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut tied = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        let levels = rng.random_range(2..12);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>().round() * rng.random_range(0..5) as f64).collect();
        let got = spearman(&x, &y).map_err(err)?;
        let want = brute_spearman(&x, &y);
        match (got, want) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            other => return Err(format!("definedness differs: {other:?}")),
        }
        tied += usize::from(x.len() > levels);
    }
    ensure(worst <= 1e-12, || format!("max |diff| {worst:e}"))?;
    Ok(format!("1000 pairs ({tied} with forced ties), max |diff| {worst:.1e}"))
}

fn ac8() -> Check {
    // Depth 4: 18 layers, decay from layer 6.
    let stats: Vec<f64> = (1..=18).map(|i| (i as f64).sqrt() * if i % 2 == 0 { 1.5 } else { -0.75 }).collect();
    let weights = [
        1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0 / 2.0, 1.0 / 3.0, 1.0 / 4.0, 1.0 / 5.0, 1.0 / 6.0, 1.0 / 7.0, 1.0 / 8.0,
        1.0 / 9.0, 1.0 / 10.0, 1.0 / 11.0, 1.0 / 12.0, 1.0,
    ];
    let hand: f64 = stats.iter().zip(weights).map(|(s, w)| s * w).sum();
    let got = decay_aggregate(&stats, 6);
    ensure((got - hand).abs() <= 1e-12, || format!("aggregate {got} vs hand {hand}"))?;
    Ok(format!("depth 4, n 6: aggregate {got:.12} equals hand sum"))
}

fn ac9() -> Check {
    let geom = default_geom();
    let pop = population(20, 909, "4:10", "32:240:16");
    let batch = synth_batch(&geom, BatchKind::Random, 64, 9).map_err(err)?;
    let opts = ProxyOptions::default();
    let mut worst = 0.0f64;
    for (k, g) in pop.iter().enumerate() {
        let net = build(g, &geom, k as u64).map_err(err)?;
        let mut session = ProxySession::new(&net, &batch, &opts).map_err(err)?;
        for p in [ProxyId::Snip, ProxyId::Synflow, ProxyId::Dss] {
            let s = session.module_split(p).map_err(err)?;
            ensure(s.origin == s.msa + s.mlp, || format!("{p} on {}: origin != msa + mlp", g.id))?;
            let l = s.logarithm.ok_or_else(|| format!("{p} on {}: logarithm omitted", g.id))?;
            let diff = (l - (s.msa.ln() + s.mlp.ln())).abs();
            ensure(diff <= 1e-12, || format!("{p} on {}: |log diff| {diff:e}", g.id))?;
            worst = worst.max(diff);
        }
    }
    Ok(format!("20 genotypes x snip/synflow/dss: origin exact, max |log diff| {worst:.1e}"))
}

// Predictor -------------------------------------------------------------------

fn ac10() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let snip_col = FEATURE_NAMES.iter().position(|f| *f == "snip").unwrap();
    let mut rows: Vec<FeatureRow> = (0..300)
        .map(|i| {
            let mut features = vec![
                rng.random_range(4..=10) as f64,
                (32 + 16 * rng.random_range(0..14)) as f64,
                rng.random_range(3.0..6.0),
                rng.random_range(1.0..6.0),
            ];
            features.extend((4..FEATURE_NAMES.len()).map(|_| 10f64.powf(rng.random_range(-1.0..3.0))));
            FeatureRow {
                id: format!("s{i:03}"),
                features,
                target: None,
            }
        })
        .collect();
    let clean: Vec<f64> = rows.iter().map(|r| r.features[snip_col].ln()).collect();
    let mean = clean.iter().sum::<f64>() / clean.len() as f64;
    let sd = (clean.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / clean.len() as f64).sqrt();
    for (r, c) in rows.iter_mut().zip(&clean) {
        let e: f64 = StandardNormal.sample(&mut rng);
        r.target = Some(c + 0.1 * sd * e);
    }
    let params = ForestParams::default();
    let x: Vec<Vec<f64>> = rows[..150].iter().map(|r| r.features.clone()).collect();
    let y: Vec<f64> = rows[..150].iter().map(|r| r.target.unwrap()).collect();
    let t = Instant::now();
    fit(&x, &y, &params, 1).map_err(err)?;
    let fit_secs = t.elapsed().as_secs_f64();
    let sizes = [10, 20, 50, 100];
    let curve = learning_curve(&rows, &sizes, 5, &params, 10).map_err(err)?;
    let means: Vec<f64> = curve.iter().map(|c| c.mean.unwrap_or(f64::NAN)).collect();
    let at50 = means[2];
    ensure(at50 >= 0.8, || format!("mean rho at 50 is {at50:.4}"))?;
    ensure(means.windows(2).all(|w| w[1] > w[0]), || format!("curve not increasing: {means:?}"))?;
    ensure(fit_secs < 60.0, || format!("fit took {fit_secs:.1}s"))?;
    let shown: Vec<String> = sizes.iter().zip(&means).map(|(s, m)| format!("{s}:{m:.3}")).collect();
    Ok(format!("mean rho {} ; 150-row fit {fit_secs:.2}s", shown.join(" ")))
}

// End to end ------------------------------------------------------------------

fn hytas(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hytas"))
        .args(args)
        .env_remove("HYTAS_WORKERS")
        .output()
        .map_err(err)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

/// Score table text without the `time_` columns.
fn without_times(path: &Path) -> Result<String, String> {
    let mut rd = csv::Reader::from_path(path).map_err(err)?;
    let header = rd.headers().map_err(err)?.clone();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !header[i].starts_with("time_")).collect();
    let mut out = keep.iter().map(|&i| &header[i]).collect::<Vec<_>>().join(",");
    for rec in rd.records() {
        let rec = rec.map_err(err)?;
        out.push('\n');
        out.push_str(&keep.iter().map(|&i| &rec[i]).collect::<Vec<_>>().join(","));
    }
    Ok(out)
}

fn ac11() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let g = dir.path().join("genotypes.jsonl");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    hytas(&["sample", "--count", "100", "--seed", "11", "--out", &s(&g)])?;
    let mut secs = Vec::new();
    for (run, workers) in [("a", "1"), ("b", "2")] {
        let t = Instant::now();
        let scores = dir.path().join(format!("scores_{run}.csv"));
        hytas(&["score", "--genotypes", &s(&g), "--proxies", "all", "--seed", "11", "--workers", workers, "--out", &s(&scores)])?;
        hytas(&["analyze", "--scores", &s(&scores), "--out", &s(&dir.path().join(format!("analysis_{run}")))])?;
        secs.push(t.elapsed().as_secs_f64());
    }
    let (a, b) = (dir.path().join("scores_a.csv"), dir.path().join("scores_b.csv"));
    ensure(without_times(&a)? == without_times(&b)?, || "score tables differ between runs".into())?;
    for f in ["factors.csv", "analysis.json"] {
        let x = fs::read(dir.path().join("analysis_a").join(f)).map_err(err)?;
        let y = fs::read(dir.path().join("analysis_b").join(f)).map_err(err)?;
        ensure(x == y, || format!("{f} differs between runs"))?;
    }
    let table = hytas_core::proxies::read_score_csv(&a).map_err(err)?;
    ensure(table.proxies.len() == 14, || format!("{} proxy columns", table.proxies.len()))?;
    let mut flagged = 0;
    for r in &table.rows {
        for &p in &table.proxies {
            let finite = r.score(p).is_some_and(f64::is_finite);
            let flag = r.flags.iter().any(|f| f.starts_with(&format!("{p}:")));
            ensure(finite || flag, || format!("{} {p}: missing without a flag", r.id))?;
            flagged += usize::from(flag);
        }
    }
    ensure(secs.iter().all(|&t| t < 1800.0), || format!("pipeline times {secs:?}"))?;
    Ok(format!(
        "100 genotypes x 14 proxies, workers 1 and 2 identical, {flagged} flagged cells, runs {:.0}s / {:.0}s",
        secs[0], secs[1]
    ))
}

fn ac12() -> Check {
    let geom = TokenGeometry::new(4, 6, 4).unwrap();
    let pop = population(30, 1212, "4:5", "32:64:16");
    let batch = synth_batch(&geom, BatchKind::Random, 32, 12).map_err(err)?;
    let cfg = PopulationConfig {
        seed: 12,
        proxies: ProxyId::ALL.to_vec(),
        opts: ProxyOptions::default(),
        workers: 1,
    };
    let table = ScoreTable::new(cfg.proxies.clone(), score_population(&pop, &geom, &batch, &cfg).map_err(err)?);
    let task = ToyTask::generate(&geom, 128, 128, 1.0, 12).map_err(err)?;
    let toy = ToyConfig {
        epochs: 3,
        batch_size: 32,
        lr: 0.05,
        seed: 12,
    };
    let records = toy_targets(&pop, &task, &toy, 1).map_err(err)?;
    let targets: BTreeMap<String, f64> = records.iter().map(|r| (r.id.clone(), r.result.accuracy)).collect();
    let ranked = ranked_table(&table, &targets, TargetKind::Toy).map_err(err)?;
    ensure(ranked.rankings.len() == 14, || "missing proxies in ranked table".into())?;
    ensure(ranked.rankings.iter().all(|r| r.proposed.is_some()), || "a proxy has no proposed target".into())?;
    let accs: Vec<f64> = records.iter().map(|r| r.result.accuracy).collect();
    let (lo, hi) = accs.iter().fold((1.0f64, 0.0f64), |(l, h), &a| (l.min(a), h.max(a)));
    let rhos: Vec<String> = ranked
        .rankings
        .iter()
        .map(|r| format!("{}={}", r.proxy, r.rho.map_or("undef".into(), |v| format!("{v:.2}"))))
        .collect();
    Ok(format!(
        "30 TOY accuracies in [{lo:.3}, {hi:.3}], oracle {:.3}; rho {}",
        ranked.oracle.unwrap_or(f64::NAN),
        rhos.join(" ")
    ))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 12] = [
        (1, "gradient correctness", ac1),
        (2, "layer law", ac2),
        (3, "model-size formula", ac3),
        (4, "data-agnostic proxies", ac4),
        (5, "input insensitivity", ac5),
        (6, "embedding-dimension coupling", ac6),
        (7, "spearman oracle", ac7),
        (8, "zico++ aggregation", ac8),
        (9, "module-split identity", ac9),
        (10, "predictor sanity", ac10),
        (11, "end-to-end smoke", ac11),
        (12, "toy pipeline", ac12),
    ];
    let only: Option<Vec<u32>> = std::env::var("HYTAS_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("AC{n:02} PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("AC{n:02} FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
