use hytas_core::analysis::spearman;
use hytas_core::data::{synth_batch, BatchKind, Provenance, TokenBatch};
use hytas_core::model::{build, LayerKind};
use hytas_core::proxies::{
    compute_module_split, compute_proxy, decay_aggregate, decay_weights, score_population, PopulationConfig,
    ProxyId, ProxyOptions, ProxySession, ScoreRecord,
};
use hytas_core::search_space::{sample_population, Genotype, SearchSpaceConfig, TokenGeometry};
use hytas_core::tensor::Tensor;
use proptest::prelude::*;

fn geom() -> TokenGeometry {
    TokenGeometry::new(4, 6, 3).unwrap()
}

fn small_population(n: usize, seed: u64) -> Vec<Genotype> {
    let mut cfg = SearchSpaceConfig::new(n, seed);
    cfg.depth = "4:5".parse().unwrap();
    cfg.embed_dim = "32:64:16".parse().unwrap();
    sample_population(&cfg).unwrap()
}

fn random_batch(seed: u64) -> TokenBatch {
    synth_batch(&geom(), BatchKind::Random, 8, seed).unwrap()
}

fn bits(ts: &[Tensor]) -> Vec<u64> {
    ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn scoring_leaves_parameters_untouched() {
    let g = Genotype::uniform(4, 32, 3, 2).unwrap();
    let net = build(&g, &geom(), 9).unwrap();
    let before = bits(&net.param_values());
    let batch = random_batch(1);
    let opts = ProxyOptions::default();
    let mut session = ProxySession::new(&net, &batch, &opts).unwrap();
    for p in ProxyId::ALL {
        session.score(p).unwrap();
    }
    assert_eq!(bits(&net.param_values()), before);
}

#[test]
fn data_agnostic_scores_ignore_the_batch() {
    let opts = ProxyOptions::default();
    for g in small_population(6, 3) {
        let net = build(&g, &geom(), 4).unwrap();
        let (a, b) = (random_batch(10), random_batch(20));
        for p in [ProxyId::Synflow, ProxyId::LogSynflow, ProxyId::Dss] {
            let sa = compute_proxy(p, &net, &a, &opts).unwrap().value;
            let sb = compute_proxy(p, &net, &b, &opts).unwrap().value;
            assert_eq!(sa.to_bits(), sb.to_bits(), "{p} on {}", g.id);
        }
    }
}

#[test]
fn synflow_of_zero_weights_is_zero() {
    let g = Genotype::uniform(4, 32, 3, 1).unwrap();
    let mut net = build(&g, &geom(), 2).unwrap();
    for p in net.params_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let s = compute_proxy(ProxyId::Synflow, &net, &random_batch(0), &ProxyOptions::default()).unwrap();
    assert_eq!(s.value, 0.0);
}

#[test]
fn duplicate_samples_make_naswot_degenerate() {
    let g = Genotype::uniform(4, 32, 3, 2).unwrap();
    let net = build(&g, &geom(), 5).unwrap();
    let one = random_batch(7).sample(0);
    let mut data = one.data().data().to_vec();
    data.extend_from_slice(one.data().data());
    let shape = vec![2, geom().tokens, geom().token_width];
    let batch = TokenBatch::new(Tensor::new(shape, data).unwrap(), vec![0, 1], 3, Provenance::Random).unwrap();
    let s = compute_proxy(ProxyId::Naswot, &net, &batch, &ProxyOptions::default()).unwrap();
    assert!(s.value.is_finite());
    assert!(s.degenerate);
}

#[test]
fn zeroed_mlp_outputs_remove_the_mlp_part() {
    let g = Genotype::uniform(4, 32, 3, 2).unwrap();
    let mut net = build(&g, &geom(), 6).unwrap();
    net.zero_block_outputs(false, true);
    let split = compute_module_split(ProxyId::Snip, &net, &random_batch(2), &ProxyOptions::default()).unwrap();
    assert_eq!(split.mlp, 0.0);
    assert!(split.msa > 0.0);
    assert_eq!(split.logarithm, None);
}

#[test]
fn origin_is_the_block_restricted_score() {
    let g = Genotype::uniform(5, 48, 4, 3).unwrap();
    let net = build(&g, &geom(), 8).unwrap();
    let batch = random_batch(3);
    let opts = ProxyOptions::default();
    for p in ProxyId::SPLITTABLE {
        let s = compute_proxy(p, &net, &batch, &opts).unwrap();
        let layers = s.layers.unwrap();
        let blocks: f64 = net
            .layer_registry()
            .iter()
            .zip(&layers)
            .filter(|(e, _)| e.kind.is_block())
            .map(|(_, v)| v)
            .sum();
        let split = compute_module_split(p, &net, &batch, &opts).unwrap();
        assert_eq!(split.origin, split.msa + split.mlp);
        assert!((split.origin - blocks).abs() <= 1e-12 * blocks.abs().max(1.0), "{p}");
        if let Some(l) = split.logarithm {
            assert!((l - (split.msa.ln() + split.mlp.ln())).abs() < 1e-12);
        }
    }
}

#[test]
fn zicopp_layers_carry_the_decay_weights() {
    let g = Genotype::uniform(4, 32, 3, 1).unwrap();
    let net = build(&g, &geom(), 1).unwrap();
    let batch = random_batch(4);
    let opts = ProxyOptions::default();
    let mut session = ProxySession::new(&net, &batch, &opts).unwrap();
    let pp = session.score(ProxyId::ZicoPp).unwrap();
    let layers = pp.layers.unwrap();
    assert_eq!(layers.len(), 18);
    assert!((layers.iter().sum::<f64>() - pp.value).abs() < 1e-12 * pp.value.abs().max(1.0));
    let w = decay_weights(18, opts.decay_start);
    assert_eq!(w.iter().filter(|&&x| x == 1.0).count(), 7);
}

fn table(genotypes: &[Genotype], workers: usize, proxies: &[ProxyId]) -> Vec<ScoreRecord> {
    let cfg = PopulationConfig {
        seed: 17,
        proxies: proxies.to_vec(),
        opts: ProxyOptions {
            module_split: true,
            ..ProxyOptions::default()
        },
        workers,
    };
    score_population(genotypes, &geom(), &random_batch(5), &cfg).unwrap()
}

fn strip_times(mut rows: Vec<ScoreRecord>) -> Vec<ScoreRecord> {
    rows.iter_mut().for_each(|r| r.times.clear());
    rows
}

#[test]
fn worker_count_does_not_change_scores() {
    let pop = small_population(10, 21);
    let proxies = [ProxyId::Snip, ProxyId::Synflow, ProxyId::Naswot, ProxyId::Zico];
    let one = strip_times(table(&pop, 1, &proxies));
    let four = strip_times(table(&pop, 4, &proxies));
    assert_eq!(one, four);
}

#[test]
fn duplicate_genotypes_give_identical_rows() {
    let g = Genotype::uniform(4, 48, 5, 2).unwrap();
    let rows = strip_times(table(&[g.clone(), g], 2, &[ProxyId::GradNorm, ProxyId::Croze]));
    assert_eq!(rows[0], rows[1]);
    assert!(rows[0].formula_ms > 0 && rows[0].exact_params > 0 && rows[0].flops > 0);
}

#[test]
fn naswot_is_stable_across_random_sources() {
    let pop = small_population(50, 8);
    let opts = ProxyOptions::default();
    let (a, b) = (random_batch(100), random_batch(200));
    let (mut sa, mut sb) = (Vec::new(), Vec::new());
    for g in &pop {
        let net = build(g, &geom(), 3).unwrap();
        sa.push(compute_proxy(ProxyId::Naswot, &net, &a, &opts).unwrap().value);
        sb.push(compute_proxy(ProxyId::Naswot, &net, &b, &opts).unwrap().value);
    }
    let rho = spearman(&sa, &sb).unwrap().unwrap();
    assert!(rho >= 0.95, "rho {rho}");
}

#[test]
fn block_kinds_partition_the_registry() {
    let g = Genotype::uniform(5, 32, 3, 1).unwrap();
    let net = build(&g, &geom(), 0).unwrap();
    let kinds: Vec<LayerKind> = net.layer_registry().iter().map(|e| e.kind).collect();
    assert_eq!(kinds.iter().filter(|k| k.is_msa()).count(), 10);
    assert_eq!(kinds.iter().filter(|k| k.is_mlp()).count(), 10);
    assert_eq!(net.layer_registry()[5].block, Some(2));
}

proptest! {
    #[test]
    fn decay_aggregate_is_the_term_by_term_sum(
        stats in prop::collection::vec(-10.0f64..10.0, 18..42),
        n in 1usize..=17,
    ) {
        let big_n = stats.len();
        let mut expected = 0.0;
        for (k, s) in stats.iter().enumerate() {
            let i = k + 1;
            let w = if i < n || i == big_n { 1.0 } else { 1.0 / (i - n + 1) as f64 };
            expected += w * s;
        }
        prop_assert!((decay_aggregate(&stats, n) - expected).abs() <= 1e-12);
    }
}
