use std::collections::BTreeMap;

use ddfm_core::harness::config::{
    CorpusParams, ExperimentConfig, ExpertParams, KmeansMethod, KmeansParams, RouterParams,
};
use ddfm_core::harness::pipeline::partition_corpus;
use ddfm_core::harness::synth::{component_rng, stream, SyntheticWorld};
use ddfm_core::harness::{run_equivalence_suite, run_experiment};

fn config(noise: f64, method: KmeansMethod) -> ExperimentConfig {
    ExperimentConfig {
        seed: 0,
        output_dir: "out".into(),
        vocab_size: 4,
        seq_len: 3,
        prefix_len: 1,
        clusters: 2,
        repetitions: 2,
        router: RouterParams {
            temperature: 10.0,
            top_k: 1,
        },
        kmeans: KmeansParams {
            method,
            k_fine: 16,
            max_iters: 50,
        },
        expert: ExpertParams {
            order: 1,
            alpha: 0.1,
        },
        corpus: CorpusParams {
            samples: 400,
            heldout: 100,
            feature_dim: 8,
            topics: 2,
            blob_separation: 1.0,
            blob_noise: noise,
            text_only_fraction: 0.1,
            concentration: 0.5,
        },
    }
}

/// Fraction of feature-bearing samples whose cluster's majority topic is
/// their own topic, and the best fraction two equal-size clusters can reach
/// given the topic counts.
fn purity(c: &ExperimentConfig, seed: u64) -> (f64, f64) {
    let world = SyntheticWorld::new(c, seed).unwrap();
    let corpus = world
        .sample_corpus(
            c.corpus.samples,
            "s",
            &mut component_rng(seed, stream::TRAIN),
        )
        .unwrap();
    let p = partition_corpus(&corpus, c, seed).unwrap();
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for &i in &p.featured {
        let topic = corpus.samples[i].topic.unwrap();
        *counts.entry((p.assignment[i], topic)).or_default() += 1;
    }
    let majority: usize = (0..c.clusters)
        .map(|k| {
            counts
                .iter()
                .filter(|((ck, _), _)| *ck == k)
                .map(|(_, &n)| n)
                .max()
                .unwrap_or(0)
        })
        .sum();
    let n = p.featured.len();
    let first = p
        .featured
        .iter()
        .filter(|&&i| corpus.samples[i].topic == Some(0))
        .count();
    let best = (n.div_ceil(2) + first.min(n - first)) as f64 / n as f64;
    (majority as f64 / n as f64, best)
}

#[test]
fn orthogonal_noiseless_topics_reach_the_balanced_optimum() {
    let c = config(0.0, KmeansMethod::Balanced);
    for seed in 0..5 {
        let (p, best) = purity(&c, seed);
        assert!(
            (p - best).abs() < 1e-12,
            "seed {seed}: purity {p}, optimum {best}"
        );
    }
}

#[test]
fn moderate_noise_keeps_purity_above_95_percent() {
    let c = config(0.5, KmeansMethod::Balanced);
    for seed in 0..10 {
        let (p, _) = purity(&c, seed);
        assert!(p >= 0.95, "seed {seed}: purity {p}");
    }
    // The coarse stage of the two-stage variant balances only approximately.
    let c = config(0.5, KmeansMethod::TwoStage);
    for seed in 0..10 {
        let (p, _) = purity(&c, seed);
        assert!(p >= 0.9, "two-stage seed {seed}: purity {p}");
    }
}

#[test]
fn equivalence_suite_passes_on_a_small_instance() {
    let report = run_equivalence_suite(&config(0.3, KmeansMethod::Balanced)).unwrap();
    assert!(report.passed(), "{:#?}", report.failed());
    assert!(report.check("decentral_identity").unwrap().value <= 1e-12);
    assert!(report.check("ensemble_dense_identity").unwrap().value <= 1e-12);
}

#[test]
fn experiment_report_is_reproducible() {
    let c = config(0.3, KmeansMethod::TwoStage);
    let a = run_experiment(&c).unwrap();
    assert_eq!(a.to_json(), run_experiment(&c).unwrap().to_json());
    assert_eq!(a.table("metrics").unwrap().rows.len(), 2);
    let mut other = c.clone();
    other.seed = 1;
    assert_ne!(a.to_json(), run_experiment(&other).unwrap().to_json());
}
