//! End-to-end experiment: synthesize, partition, train experts and a dense
//! baseline, route held-out samples and compare.

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, KmeansMethod};
use super::pipeline::{
    partition_corpus, route_corpus, train_experts, ClusterStats, RoutedEnsemble,
};
use super::report::{Check, RunReport, Table};
use super::synth::{component_rng, stream, SyntheticWorld};
use crate::decentral::{softmax_route, RouterConfig};
use crate::error::Result;
use crate::experts::{evaluate, train_dense, Metrics};

/// Allowed held-out log-loss excess of the routed ensemble over dense, nats.
pub const ROUTED_LOSS_MARGIN: f64 = 0.05;

/// Temperature multipliers for the routing sweep.
pub const TAU_SWEEP: [f64; 4] = [0.25, 1.0, 4.0, 16.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauPoint {
    pub temperature: f64,
    /// Held-out samples whose argmax cluster differs from the base temperature.
    pub argmax_changes: usize,
    /// Mean of the largest router weight.
    pub mean_top_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Repetition {
    pub index: usize,
    pub seed: u64,
    pub dense: Metrics,
    pub routed: Metrics,
    pub clusters: Vec<ClusterStats>,
    pub size_spread: usize,
    /// Decreasing steps in the k-means objective trace.
    pub objective_decreases: usize,
    pub tau_sweep: Vec<TauPoint>,
}

impl Repetition {
    pub fn loss_gap(&self) -> f64 {
        self.routed.log_loss - self.dense.log_loss
    }
}

/// One repetition, seeded with `config.seed + index`.
pub fn run_repetition(config: &ExperimentConfig, index: usize) -> Result<Repetition> {
    let seed = config.seed.wrapping_add(index as u64);
    let world = SyntheticWorld::new(config, seed)?;
    let train = world.sample_corpus(
        config.corpus.samples,
        "s",
        &mut component_rng(seed, stream::TRAIN),
    )?;
    let heldout = world.sample_corpus(
        config.corpus.heldout,
        "h",
        &mut component_rng(seed, stream::HELDOUT),
    )?;

    let partition = partition_corpus(&train, config, seed)?;
    let shards = train.shards(&partition.assignment, config.clusters)?;
    let experts = train_experts(&shards, config.expert.order, config.expert.alpha)?;
    let dense = train_dense(&train, config.expert.order, config.expert.alpha)?;

    let router = RouterConfig {
        temperature: config.router.temperature,
        top_k: config.router.top_k,
        centroids: partition.model.centroids.clone(),
    };
    let weights = route_corpus(&heldout, &router, seed)?;
    let truth = |s: &_, prefix: &_| world.truth(s, prefix);
    let dense_metrics = evaluate(&dense, &heldout, Some(&truth))?;
    let routed_metrics = evaluate(
        &RoutedEnsemble {
            experts: &experts,
            weights: &weights,
        },
        &heldout,
        Some(&truth),
    )?;

    let featured: Vec<&Vec<f64>> = heldout
        .samples
        .iter()
        .filter_map(|s| s.features.as_ref())
        .collect();
    let base: Vec<usize> = featured
        .iter()
        .map(|f| softmax_route(f, &router).map(|w| w.argmax()))
        .collect::<Result<_>>()?;
    let tau_sweep = TAU_SWEEP
        .iter()
        .map(|&m| {
            let r = RouterConfig {
                temperature: config.router.temperature * m,
                ..router.clone()
            };
            let mut changes = 0;
            let mut top = 0.0;
            for (f, &b) in featured.iter().zip(&base) {
                let w = softmax_route(f, &r)?;
                changes += usize::from(w.argmax() != b);
                top += w.as_slice()[w.argmax()];
            }
            Ok(TauPoint {
                temperature: r.temperature,
                argmax_changes: changes,
                mean_top_weight: top / featured.len().max(1) as f64,
            })
        })
        .collect::<Result<_>>()?;

    let trace = &partition.model.objective_trace;
    Ok(Repetition {
        index,
        seed,
        dense: dense_metrics,
        routed: routed_metrics,
        clusters: partition.stats(&train),
        size_spread: partition.model.size_spread(),
        objective_decreases: trace.windows(2).filter(|w| w[1] < w[0]).count(),
        tau_sweep,
    })
}

/// All repetitions, merged in index order.
pub fn run_repetitions(config: &ExperimentConfig) -> Result<Vec<Repetition>> {
    config.validate()?;
    let run = |i| run_repetition(config, i);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..config.repetitions).into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..config.repetitions).map(run).collect()
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    let reps = run_repetitions(config)?;
    Ok(experiment_report(config, &reps))
}

pub fn experiment_report(config: &ExperimentConfig, reps: &[Repetition]) -> RunReport {
    let mut report = RunReport::new("experiment", config);
    let mut metrics = Table::new(
        "metrics",
        &[
            "repetition",
            "seed",
            "dense_log_loss",
            "routed_log_loss",
            "log_loss_gap",
            "dense_tv",
            "routed_tv",
            "tokens",
        ],
    );
    let mut clusters = Table::new(
        "clusters",
        &["repetition", "cluster", "items", "pairs", "tokens"],
    );
    let mut sweep = Table::new(
        "tau_sweep",
        &[
            "repetition",
            "temperature",
            "argmax_changes",
            "mean_top_weight",
        ],
    );
    for r in reps {
        metrics.push(vec![
            r.index.into(),
            r.seed.into(),
            r.dense.log_loss.into(),
            r.routed.log_loss.into(),
            r.loss_gap().into(),
            r.dense.total_variation.unwrap_or(f64::NAN).into(),
            r.routed.total_variation.unwrap_or(f64::NAN).into(),
            r.dense.tokens.into(),
        ]);
        for c in &r.clusters {
            clusters.push(vec![
                r.index.into(),
                c.cluster.into(),
                c.items.into(),
                c.pairs.into(),
                c.tokens.into(),
            ]);
        }
        for p in &r.tau_sweep {
            sweep.push(vec![
                r.index.into(),
                p.temperature.into(),
                p.argmax_changes.into(),
                p.mean_top_weight.into(),
            ]);
        }
    }

    let worst_gap = reps
        .iter()
        .map(Repetition::loss_gap)
        .fold(f64::NEG_INFINITY, f64::max);
    let spread = reps.iter().map(|r| r.size_spread).max().unwrap_or(0);
    let balance = Check::at_most("kmeans_balance", spread as f64, 1.0)
        .with_detail("largest cluster size minus smallest");
    let changes: usize = reps
        .iter()
        .flat_map(|r| r.tau_sweep.iter().map(|p| p.argmax_changes))
        .sum();
    let weight_range = reps
        .iter()
        .map(|r| {
            let tops = r.tau_sweep.iter().map(|p| p.mean_top_weight);
            let max = tops.clone().fold(f64::NEG_INFINITY, f64::max);
            let min = tops.fold(f64::INFINITY, f64::min);
            max - min
        })
        .fold(0.0, f64::max);
    report.checks.extend([
        Check::at_most("routed_vs_dense_log_loss", worst_gap, ROUTED_LOSS_MARGIN)
            .with_detail("largest routed minus dense held-out log-loss over repetitions, nats"),
        if config.kmeans.method == KmeansMethod::Balanced {
            balance
        } else {
            balance.soft()
        },
        Check::holds(
            "kmeans_objective_monotone",
            reps.iter().map(|r| r.objective_decreases).sum(),
        ),
        Check::holds("router_argmax_tau_invariance", changes),
        Check::above("router_weights_vary_with_tau", weight_range, 0.0).soft(),
    ]);
    report.tables.extend([metrics, clusters, sweep]);
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::tests::small;

    #[test]
    fn experiment_is_deterministic() {
        let c = small();
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.table("metrics").unwrap().rows.len(), 2);
        assert_eq!(a.table("clusters").unwrap().rows.len(), 4);
        assert!(a.check("kmeans_balance").unwrap().passed);
        assert!(a.check("router_argmax_tau_invariance").unwrap().passed);
    }

    #[test]
    fn seeds_change_results() {
        let c = small();
        let mut d = small();
        d.seed += 100;
        assert_ne!(
            run_repetition(&c, 0).unwrap(),
            run_repetition(&d, 0).unwrap()
        );
    }
}
