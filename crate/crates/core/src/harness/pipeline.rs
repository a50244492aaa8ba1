//! Shared steps of the experiment pipeline: partitioning a corpus, training
//! one expert per shard, and routing samples at inference.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, KmeansMethod};
use super::synth::{component_rng, stream};
use crate::clustering::{balanced_kmeans, two_stage_balanced_kmeans, ClusterModel, FeatureSet};
use crate::decentral::{ensemble_next_token, route, RouterConfig, RouterWeights};
use crate::dfm::Token;
use crate::error::{Error, Result};
use crate::experts::{train_expert, Corpus, ExpertModel, Predictor, Sample};

/// Cluster labels for every sample of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusPartition {
    pub clusters: usize,
    pub assignment: Vec<usize>,
    /// The k-means run over the samples that carry features.
    pub model: ClusterModel,
    /// Indices of the samples that carry features, in corpus order.
    pub featured: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub cluster: usize,
    /// Samples with features (the clustered unit).
    pub items: usize,
    /// All samples, text-only included.
    pub pairs: usize,
    pub tokens: usize,
}

/// Clusters the feature-bearing samples with the configured k-means and
/// spreads text-only samples uniformly at random, in equal shares.
pub fn partition_corpus(
    corpus: &Corpus,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<CorpusPartition> {
    let clusters = config.clusters;
    let (featured, rows): (Vec<usize>, Vec<Vec<f64>>) = corpus
        .samples
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.features.clone().map(|f| (i, f)))
        .unzip();
    let ids = featured
        .iter()
        .map(|&i| corpus.samples[i].id.clone())
        .collect();
    let features = FeatureSet::from_unit_rows(ids, &rows)?;
    let model = cluster_features(&features, config, seed)?;

    let mut assignment = vec![usize::MAX; corpus.len()];
    for (&i, &c) in featured.iter().zip(&model.assignment) {
        assignment[i] = c;
    }
    spread_unassigned(&mut assignment, clusters, seed);
    Ok(CorpusPartition {
        clusters,
        assignment,
        model,
        featured,
    })
}

/// Runs the configured k-means variant with a seed derived from `seed`.
pub fn cluster_features(
    features: &FeatureSet,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<ClusterModel> {
    let kmeans_seed = component_rng(seed, stream::KMEANS).random::<u64>();
    let k = &config.kmeans;
    match k.method {
        KmeansMethod::Balanced => {
            balanced_kmeans(features, config.clusters, k.max_iters, kmeans_seed)
        }
        KmeansMethod::TwoStage => two_stage_balanced_kmeans(
            features,
            config.clusters,
            k.k_fine,
            k.max_iters,
            kmeans_seed,
        ),
    }
}

/// Gives every entry still equal to `usize::MAX` a cluster: the entries are
/// shuffled and then dealt round-robin, so each cluster receives an equal
/// share (within one).
pub fn spread_unassigned(assignment: &mut [usize], clusters: usize, seed: u64) {
    let mut open: Vec<usize> = (0..assignment.len())
        .filter(|&i| assignment[i] == usize::MAX)
        .collect();
    open.shuffle(&mut component_rng(seed, stream::PARTITION));
    for (j, &i) in open.iter().enumerate() {
        assignment[i] = j % clusters;
    }
}

impl CorpusPartition {
    pub fn stats(&self, corpus: &Corpus) -> Vec<ClusterStats> {
        let mut stats: Vec<ClusterStats> = (0..self.clusters)
            .map(|cluster| ClusterStats {
                cluster,
                items: 0,
                pairs: 0,
                tokens: 0,
            })
            .collect();
        for (s, &k) in corpus.samples.iter().zip(&self.assignment) {
            stats[k].items += usize::from(s.features.is_some());
            stats[k].pairs += 1;
            stats[k].tokens += s.tokens.len();
        }
        stats
    }
}

/// Trains one expert per shard. Shards share nothing.
pub fn train_experts(shards: &[Corpus], order: usize, alpha: f64) -> Result<Vec<ExpertModel>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        shards
            .par_iter()
            .map(|s| train_expert(s, order, alpha))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        shards
            .iter()
            .map(|s| train_expert(s, order, alpha))
            .collect()
    }
}

/// Router weights for every sample of `corpus`. Samples with features use
/// the softmax router; text-only samples go to one uniformly random cluster.
pub fn route_corpus(
    corpus: &Corpus,
    router: &RouterConfig,
    seed: u64,
) -> Result<BTreeMap<String, RouterWeights>> {
    let mut rng = component_rng(seed, stream::ROUTING);
    let clusters = router.clusters();
    corpus
        .samples
        .iter()
        .map(|s| {
            let w = match &s.features {
                Some(f) => route(f, router)?,
                None => RouterWeights::one_hot(clusters, rng.random_range(0..clusters)),
            };
            Ok((s.id.clone(), w))
        })
        .collect()
}

/// Experts mixed with precomputed, state-independent per-sample weights.
pub struct RoutedEnsemble<'a> {
    pub experts: &'a [ExpertModel],
    pub weights: &'a BTreeMap<String, RouterWeights>,
}

impl Predictor for RoutedEnsemble<'_> {
    fn predict(&self, sample: &Sample, prefix: &[Token]) -> Result<Vec<f64>> {
        let w = self
            .weights
            .get(&sample.id)
            .ok_or_else(|| Error::InvalidWeights(format!("no route for sample {:?}", sample.id)))?;
        ensemble_next_token(self.experts, w, prefix)
    }
}
