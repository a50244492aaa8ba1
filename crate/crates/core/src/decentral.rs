//! Decentralized decomposition of the generating velocity.
//!
//! Partition the coupling's pairs into disjoint clusters `S_k`. Each cluster
//! defines an expert flow: the marginal velocity of the cluster's own
//! renormalized sub-coupling, which is exactly what an expert trained only on
//! that shard would learn. Weighting the expert flows by the Bayes posterior
//! `p_t(S_k | z) = p_t(z | S_k) π(S_k) / p_t(z)` recovers the centralized
//! marginal velocity.
//!
//! The practical router ignores the state and scores a sample's features
//! against the cluster centroids with a tempered softmax, optionally keeping
//! only the top-k clusters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dfm::{
    marginal_velocity, marginal_velocity_field, ConditionalPath, ConditionalVelocity, Coupling,
    DistTable, TabulatedVelocity, Timestep, Token, TokenSeq, VelocitySlice, INPUT_TOL, ZERO_MASS,
};
use crate::error::{Error, Result};
use crate::experts::ExpertModel;

/// Assignment of coupling pairs to `K` disjoint, non-empty clusters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPartition {
    clusters: usize,
    assignment: Vec<usize>,
}

impl ClusterPartition {
    pub fn new(clusters: usize, assignment: Vec<usize>) -> Result<Self> {
        if clusters == 0 {
            return Err(Error::InvalidPartition("zero clusters".into()));
        }
        let mut sizes = vec![0usize; clusters];
        for &k in &assignment {
            *sizes.get_mut(k).ok_or_else(|| {
                Error::InvalidPartition(format!("cluster id {k} >= {clusters}"))
            })? += 1;
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidPartition(format!("cluster {k} is empty")));
        }
        Ok(Self {
            clusters,
            assignment,
        })
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &k)| k == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    fn check_covers(&self, coupling: &Coupling) -> Result<()> {
        if self.assignment.len() != coupling.len() {
            return Err(Error::DimensionMismatch(format!(
                "partition covers {} pairs, coupling has {}",
                self.assignment.len(),
                coupling.len()
            )));
        }
        Ok(())
    }
}

/// Nonnegative cluster weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RouterWeights(Vec<f64>);

impl RouterWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeights("no clusters".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidWeights(format!("weight {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > INPUT_TOL {
            return Err(Error::InvalidWeights(format!("weights sum to {sum}")));
        }
        Ok(Self(weights))
    }

    pub fn one_hot(clusters: usize, k: usize) -> Self {
        let mut w = vec![0.0; clusters];
        w[k] = 1.0;
        Self(w)
    }

    pub fn uniform(clusters: usize) -> Self {
        Self(vec![1.0 / clusters as f64; clusters])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest weight, lowest id on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &w) in self.0.iter().enumerate() {
            if w > self.0[best] {
                best = k;
            }
        }
        best
    }
}

/// `π(S_k)`: total coupling mass per cluster.
pub fn cluster_priors(partition: &ClusterPartition, coupling: &Coupling) -> Result<Vec<f64>> {
    partition.check_covers(coupling)?;
    let mut priors = vec![0.0; partition.clusters()];
    for (pair, &k) in coupling.pairs().iter().zip(partition.assignment()) {
        priors[k] += pair.weight;
    }
    Ok(priors)
}

/// `p_t(z | S_k)` for every cluster: the within-cluster marginal under the
/// cluster's renormalized coupling.
pub fn cluster_likelihoods(
    partition: &ClusterPartition,
    path: &ConditionalPath,
    coupling: &Coupling,
    t: Timestep,
    z: &TokenSeq,
) -> Result<Vec<f64>> {
    let priors = cluster_priors(partition, coupling)?;
    let mut joint = vec![0.0; partition.clusters()];
    for (pair, &k) in coupling.pairs().iter().zip(partition.assignment()) {
        if pair.weight > 0.0 {
            joint[k] += path.prob(t, z, &pair.source, &pair.target)? * pair.weight;
        }
    }
    Ok(joint
        .into_iter()
        .zip(priors)
        .map(|(j, p)| if p > 0.0 { j / p } else { 0.0 })
        .collect())
}

/// Expert flow `u_t(·, z | S_k)`: the marginal velocity of cluster `k`'s
/// renormalized sub-coupling.
pub fn expert_flow(
    partition: &ClusterPartition,
    cluster: usize,
    path: &ConditionalPath,
    coupling: &Coupling,
    cond_u: &dyn ConditionalVelocity,
    t: Timestep,
    z: &TokenSeq,
) -> Result<VelocitySlice> {
    partition.check_covers(coupling)?;
    let (sub, _) = coupling.restrict(&partition.members(cluster))?;
    marginal_velocity(path, &sub, cond_u, t, z).map_err(|e| match e {
        Error::ZeroMassState { mass } => Error::ZeroClusterMassAtState { cluster, mass },
        e => e,
    })
}

/// All expert flows at `z`; clusters with no mass at `z` get a zero slice
/// (their posterior weight is zero).
pub fn expert_flows_at(
    partition: &ClusterPartition,
    path: &ConditionalPath,
    coupling: &Coupling,
    cond_u: &dyn ConditionalVelocity,
    t: Timestep,
    z: &TokenSeq,
) -> Result<Vec<VelocitySlice>> {
    (0..partition.clusters())
        .map(
            |k| match expert_flow(partition, k, path, coupling, cond_u, t, z) {
                Err(Error::ZeroClusterMassAtState { .. }) => {
                    Ok(VelocitySlice::zeros(z.len(), path.vocab().size()))
                }
                other => other,
            },
        )
        .collect()
}

/// Bayes posterior `p_t(S_k | z) = p_t(z | S_k) π(S_k) / p_t(z)`.
pub fn exact_posterior(
    partition: &ClusterPartition,
    path: &ConditionalPath,
    coupling: &Coupling,
    t: Timestep,
    z: &TokenSeq,
) -> Result<RouterWeights> {
    let likelihoods = cluster_likelihoods(partition, path, coupling, t, z)?;
    let priors = cluster_priors(partition, coupling)?;
    posterior_from(&likelihoods, &priors)
}

fn posterior_from(likelihoods: &[f64], priors: &[f64]) -> Result<RouterWeights> {
    let joint: Vec<f64> = likelihoods.iter().zip(priors).map(|(l, p)| l * p).collect();
    let mass: f64 = joint.iter().sum();
    if mass < ZERO_MASS {
        return Err(Error::ZeroMassState { mass });
    }
    Ok(RouterWeights(joint.into_iter().map(|j| j / mass).collect()))
}

/// `Σ_k w_k u_t(·, z | S_k)`.
pub fn combine_velocity(flows: &[VelocitySlice], weights: &RouterWeights) -> Result<VelocitySlice> {
    if flows.len() != weights.len() || flows.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} expert flows, {} weights",
            flows.len(),
            weights.len()
        )));
    }
    let mut out = VelocitySlice::zeros(flows[0].positions(), flows[0].vocab_size());
    for (flow, &w) in flows.iter().zip(weights.as_slice()) {
        if w != 0.0 {
            out.add_scaled(w, flow)?;
        }
    }
    Ok(out)
}

/// The equal-prior form `(1/K) Σ_k λ_k u_t(·, z | S_k)` where
/// `λ_k = p_t(z | S_k) / p̄_t(z)` is the likelihood ratio against the
/// uniform-prior marginal `p̄_t(z) = (1/K) Σ_k p_t(z | S_k)`.
///
/// Equals [`combine_velocity`] with exact posteriors if and only if the
/// cluster priors are uniform (or the flows coincide where they differ).
pub fn combine_uniform_prior(
    flows: &[VelocitySlice],
    likelihoods: &[f64],
) -> Result<VelocitySlice> {
    if flows.len() != likelihoods.len() || flows.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} expert flows, {} likelihoods",
            flows.len(),
            likelihoods.len()
        )));
    }
    let k = flows.len() as f64;
    let mean: f64 = likelihoods.iter().sum::<f64>() / k;
    if mean < ZERO_MASS {
        return Err(Error::ZeroMassState { mass: mean });
    }
    let mut out = VelocitySlice::zeros(flows[0].positions(), flows[0].vocab_size());
    for (flow, &l) in flows.iter().zip(likelihoods) {
        if l != 0.0 {
            out.add_scaled(l / mean / k, flow)?;
        }
    }
    Ok(out)
}

/// Expert flows, cluster marginals and priors for every state at one
/// timestep, built once per cluster.
pub struct DecentralizedStep {
    priors: Vec<f64>,
    experts: Vec<(TabulatedVelocity, DistTable)>,
    positions: usize,
    vocab_size: usize,
}

impl DecentralizedStep {
    pub fn build(
        partition: &ClusterPartition,
        path: &ConditionalPath,
        coupling: &Coupling,
        cond_u: &dyn ConditionalVelocity,
        t: Timestep,
    ) -> Result<Self> {
        let priors = cluster_priors(partition, coupling)?;
        let experts = (0..partition.clusters())
            .map(|k| {
                let (sub, _) = coupling.restrict(&partition.members(k))?;
                marginal_velocity_field(path, &sub, cond_u, t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            priors,
            experts,
            positions: coupling.seq_len(),
            vocab_size: path.vocab().size(),
        })
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    /// `p_t(z | S_k)` for every cluster.
    pub fn likelihoods(&self, z: &TokenSeq) -> Vec<f64> {
        self.experts.iter().map(|(_, p)| p.mass(z)).collect()
    }

    pub fn posterior(&self, z: &TokenSeq) -> Result<RouterWeights> {
        posterior_from(&self.likelihoods(z), &self.priors)
    }

    pub fn flows(&self, z: &TokenSeq) -> Vec<VelocitySlice> {
        self.experts
            .iter()
            .map(|(field, _)| {
                field
                    .get(z)
                    .cloned()
                    .unwrap_or_else(|| VelocitySlice::zeros(self.positions, self.vocab_size))
            })
            .collect()
    }

    /// Union of all clusters' supports.
    pub fn states(&self) -> Vec<TokenSeq> {
        let mut all = BTreeMap::new();
        for (_, p) in &self.experts {
            for z in p.support() {
                all.insert(z.clone(), ());
            }
        }
        all.into_keys().collect()
    }

    pub fn combined(&self, z: &TokenSeq) -> Result<VelocitySlice> {
        combine_velocity(&self.flows(z), &self.posterior(z)?)
    }

    pub fn combined_uniform_prior(&self, z: &TokenSeq) -> Result<VelocitySlice> {
        combine_uniform_prior(&self.flows(z), &self.likelihoods(z))
    }
}

/// Feature-space router: temperature, top-k, and unit-norm centroids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub centroids: Vec<Vec<f64>>,
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidRouterConfig(msg));
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return bad(format!("temperature {} must be > 0", self.temperature));
        }
        if self.centroids.is_empty() {
            return bad("no centroids".into());
        }
        if self.top_k < 1 || self.top_k > self.centroids.len() {
            return Err(Error::BadK {
                k: self.top_k,
                clusters: self.centroids.len(),
            });
        }
        let dim = self.centroids[0].len();
        for (k, c) in self.centroids.iter().enumerate() {
            if c.len() != dim {
                return bad(format!("centroid {k} has dimension {}", c.len()));
            }
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return bad(format!("centroid {k} has norm {norm}"));
            }
        }
        Ok(())
    }

    pub fn clusters(&self) -> usize {
        self.centroids.len()
    }
}

/// `softmax_k(τ · cos(x, c_k))`, independent of time and sequence state.
pub fn softmax_route(features: &[f64], config: &RouterConfig) -> Result<RouterWeights> {
    config.validate()?;
    let dim = config.centroids[0].len();
    if features.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "feature dimension {} vs centroid dimension {dim}",
            features.len()
        )));
    }
    let norm = features.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroFeatureVector);
    }
    let similarities: Vec<f64> = config
        .centroids
        .iter()
        .map(|c| c.iter().zip(features).map(|(a, b)| a * b).sum::<f64>() / norm)
        .collect();
    Ok(softmax_similarities(&similarities, config.temperature))
}

/// `softmax_k(τ · s_k)` over raw similarity scores.
pub fn softmax_similarities(similarities: &[f64], temperature: f64) -> RouterWeights {
    let logits: Vec<f64> = similarities.iter().map(|s| temperature * s).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    RouterWeights(exps.into_iter().map(|e| e / sum).collect())
}

/// Softmax routing followed by the config's top-k filter.
pub fn route(features: &[f64], config: &RouterConfig) -> Result<RouterWeights> {
    topk_filter(&softmax_route(features, config)?, config.top_k)
}

/// Keeps the `k` largest weights (lowest id wins ties), zeroes the rest and
/// renormalizes.
pub fn topk_filter(weights: &RouterWeights, k: usize) -> Result<RouterWeights> {
    let clusters = weights.len();
    if k < 1 || k > clusters {
        return Err(Error::BadK { k, clusters });
    }
    if k == clusters {
        return Ok(weights.clone());
    }
    let w = weights.as_slice();
    let mut order: Vec<usize> = (0..clusters).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    let mut kept = vec![0.0; clusters];
    for &i in &order[..k] {
        kept[i] = w[i];
    }
    let sum: f64 = kept.iter().sum();
    if sum == 0.0 {
        // All surviving weights are zero: fall back to the first kept id.
        return Ok(RouterWeights::one_hot(clusters, order[0]));
    }
    Ok(RouterWeights(kept.into_iter().map(|v| v / sum).collect()))
}

/// `Σ_k w_k · expert_k.next_token(prefix)`.
///
/// Experts that never saw the prefix's context (with zero smoothing) are
/// skipped and the remaining weights renormalized; if every positive-weight
/// expert is skipped this fails with `EmptyPrefixDistribution`.
pub fn ensemble_next_token(
    experts: &[ExpertModel],
    weights: &RouterWeights,
    prefix: &[Token],
) -> Result<Vec<f64>> {
    if experts.len() != weights.len() || experts.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} experts, {} weights",
            experts.len(),
            weights.len()
        )));
    }
    let d = experts[0].vocab_size();
    if experts.iter().any(|e| e.vocab_size() != d) {
        return Err(Error::DimensionMismatch(
            "experts disagree on vocabulary".into(),
        ));
    }
    let mut out = vec![0.0; d];
    let mut used = 0.0;
    for (expert, &w) in experts.iter().zip(weights.as_slice()) {
        if w == 0.0 {
            continue;
        }
        match expert.next_token(prefix) {
            Ok(pmf) => {
                out.iter_mut().zip(pmf).for_each(|(o, p)| *o += w * p);
                used += w;
            }
            Err(Error::UnseenContext { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0.0 {
        return Err(Error::EmptyPrefixDistribution);
    }
    if used != 1.0 {
        out.iter_mut().for_each(|o| *o /= used);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ar::{ar_path, build_mask_coupling, ArConditionalVelocity};
    use crate::dfm::{marginal_path_eval, Vocab};
    use crate::experts::{train_expert, Corpus, Sample};

    fn seq(tokens: &[Token]) -> TokenSeq {
        TokenSeq::new(tokens.to_vec())
    }

    fn router(centroids: Vec<Vec<f64>>, temperature: f64, top_k: usize) -> RouterConfig {
        RouterConfig {
            temperature,
            top_k,
            centroids,
        }
    }

    #[test]
    fn partition_validation() {
        assert!(ClusterPartition::new(2, vec![0, 0, 1]).is_ok());
        assert!(ClusterPartition::new(2, vec![0, 0, 0]).is_err());
        assert!(ClusterPartition::new(2, vec![0, 2]).is_err());
        assert!(ClusterPartition::new(0, vec![]).is_err());
    }

    #[test]
    fn softmax_of_orthogonal_centroids() {
        let cfg = router(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1.0, 2);
        let w = softmax_route(&[1.0, 0.0], &cfg).unwrap();
        // Direct evaluation: e / (e + 1).
        let e = 1f64.exp();
        assert!((w.as_slice()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((w.as_slice()[0] - 0.73106).abs() < 1e-5);
        assert!((w.as_slice()[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_limits_and_symmetry() {
        let cfg = router(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1e4, 2);
        let w = softmax_route(&[0.8, 0.6], &cfg).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0]);
        let cfg = router(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 3.0, 2);
        let w = softmax_route(&[1.0, 1.0], &cfg).unwrap();
        assert!((w.as_slice()[0] - 0.5).abs() < 1e-15);
        assert!(matches!(
            softmax_route(&[0.0, 0.0], &cfg),
            Err(Error::ZeroFeatureVector)
        ));
        assert!(softmax_route(&[1.0], &cfg).is_err());
    }

    #[test]
    fn router_config_validation() {
        assert!(router(vec![vec![1.0, 0.0]], 0.0, 1).validate().is_err());
        assert!(router(vec![vec![2.0, 0.0]], 1.0, 1).validate().is_err());
        assert!(matches!(
            router(vec![vec![1.0, 0.0]], 1.0, 2).validate(),
            Err(Error::BadK { .. })
        ));
    }

    #[test]
    fn topk_examples() {
        let w = RouterWeights::new(vec![0.6, 0.3, 0.1]).unwrap();
        assert_eq!(topk_filter(&w, 3).unwrap(), w);
        let two = topk_filter(&w, 2).unwrap();
        assert!((two.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((two.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(two.as_slice()[2], 0.0);
        assert_eq!(topk_filter(&w, 1).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        let tied = RouterWeights::new(vec![0.25, 0.375, 0.375]).unwrap();
        assert_eq!(topk_filter(&tied, 1).unwrap().as_slice(), &[0.0, 1.0, 0.0]);
        assert!(matches!(topk_filter(&w, 0), Err(Error::BadK { .. })));
        assert!(matches!(topk_filter(&w, 4), Err(Error::BadK { .. })));
    }

    fn ar_instance() -> (Vocab, Coupling, ConditionalPath, ArConditionalVelocity) {
        let vocab = Vocab::with_trailing_mask(3).unwrap();
        let q = DistTable::new([
            (seq(&[0, 0]), 0.1),
            (seq(&[0, 1]), 0.2),
            (seq(&[1, 0]), 0.3),
            (seq(&[1, 1]), 0.4),
        ])
        .unwrap();
        let coupling = build_mask_coupling(&q, vocab, 0).unwrap();
        (
            vocab,
            coupling,
            ar_path(vocab, 0),
            ArConditionalVelocity::new(vocab, 0),
        )
    }

    #[test]
    fn single_cluster_flow_is_marginal_velocity() {
        let (_, coupling, path, cond) = ar_instance();
        let part = ClusterPartition::new(1, vec![0; coupling.len()]).unwrap();
        let t = Timestep::new(0, 2).unwrap();
        let z = seq(&[2, 2]);
        assert_eq!(
            expert_flow(&part, 0, &path, &coupling, &cond, t, &z).unwrap(),
            marginal_velocity(&path, &coupling, &cond, t, &z).unwrap()
        );
    }

    #[test]
    fn posterior_examples() {
        let (_, coupling, path, cond) = ar_instance();
        // Pairs are ordered (0,0),(0,1),(1,0),(1,1).
        let part = ClusterPartition::new(2, vec![0, 0, 1, 1]).unwrap();
        let t1 = Timestep::new(1, 2).unwrap();
        // (0, m) is reachable only from cluster 0.
        let w = exact_posterior(&part, &path, &coupling, t1, &seq(&[0, 2])).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0]);
        // At the all-mask state the posterior is the prior (0.3, 0.7).
        let t0 = Timestep::new(0, 2).unwrap();
        let w = exact_posterior(&part, &path, &coupling, t0, &seq(&[2, 2])).unwrap();
        assert!((w.as_slice()[0] - 0.3).abs() < 1e-15);
        // Mixed support: clusters {(0,0),(1,1)} and {(0,1),(1,0)} at (1, m).
        let mixed = ClusterPartition::new(2, vec![0, 1, 1, 0]).unwrap();
        let w = exact_posterior(&mixed, &path, &coupling, t1, &seq(&[1, 2])).unwrap();
        // Brute force: p(z, S_0) = 0.4, p(z, S_1) = 0.3.
        assert!((w.as_slice()[0] - 0.4 / 0.7).abs() < 1e-15);
        assert!((w.as_slice()[1] - 0.3 / 0.7).abs() < 1e-15);
        // One-hot weights select a single flow.
        let flows = expert_flows_at(&mixed, &path, &coupling, &cond, t0, &seq(&[2, 2])).unwrap();
        let picked = combine_velocity(&flows, &RouterWeights::one_hot(2, 1)).unwrap();
        assert_eq!(picked, flows[1]);
    }

    #[test]
    fn decentralized_matches_centralized() {
        let (_, coupling, path, cond) = ar_instance();
        let part = ClusterPartition::new(2, vec![1, 0, 0, 1]).unwrap();
        for t in Timestep::all(2).take(2) {
            let p_t = marginal_path_eval(&path, &coupling, t).unwrap();
            let step = DecentralizedStep::build(&part, &path, &coupling, &cond, t).unwrap();
            for z in p_t.support() {
                let central = marginal_velocity(&path, &coupling, &cond, t, z).unwrap();
                let flows = expert_flows_at(&part, &path, &coupling, &cond, t, z).unwrap();
                let w = exact_posterior(&part, &path, &coupling, t, z).unwrap();
                let combined = combine_velocity(&flows, &w).unwrap();
                assert!(combined.linf_distance(&central).unwrap() < 1e-15);
                assert!(step.combined(z).unwrap().linf_distance(&central).unwrap() < 1e-15);
                // Priors are 0.5 / 0.5 here, so the equal-prior form agrees.
                let lik = cluster_likelihoods(&part, &path, &coupling, t, z).unwrap();
                let uniform = combine_uniform_prior(&flows, &lik).unwrap();
                assert!(uniform.linf_distance(&central).unwrap() < 1e-15);
            }
        }
    }

    #[test]
    fn uniform_prior_form_differs_with_unequal_masses() {
        let (_, coupling, path, cond) = ar_instance();
        let part = ClusterPartition::new(2, vec![0, 0, 1, 1]).unwrap();
        let t = Timestep::new(0, 2).unwrap();
        let z = seq(&[2, 2]);
        let step = DecentralizedStep::build(&part, &path, &coupling, &cond, t).unwrap();
        let exact = step.combined(&z).unwrap();
        let uniform = step.combined_uniform_prior(&z).unwrap();
        // Priors 0.3 / 0.7 vs assumed 0.5 / 0.5 at the first reveal: the gap
        // on token 0 is 0.5 - 0.3 = 0.2.
        assert!((exact.linf_distance(&uniform).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ensemble_examples() {
        let vocab = Vocab::with_trailing_mask(4).unwrap();
        let mk = |seqs: &[&[Token]]| {
            let samples = seqs
                .iter()
                .enumerate()
                .map(|(i, s)| Sample {
                    id: i.to_string(),
                    features: None,
                    tokens: TokenSeq::new(s.to_vec()),
                    topic: None,
                })
                .collect();
            train_expert(&Corpus::new(vocab, samples).unwrap(), 1, 0.0).unwrap()
        };
        let e0 = mk(&[&[0, 1], &[0, 2]]);
        let e1 = mk(&[&[1, 1]]);
        let experts = vec![e0.clone(), e1.clone()];
        let p = ensemble_next_token(&experts, &RouterWeights::one_hot(2, 0), &[0]).unwrap();
        assert_eq!(p, e0.next_token(&[0]).unwrap());
        let same = vec![e0.clone(), e0.clone()];
        let w = RouterWeights::new(vec![0.3, 0.7]).unwrap();
        let p = ensemble_next_token(&same, &w, &[0]).unwrap();
        let expected = e0.next_token(&[0]).unwrap();
        for (a, b) in p.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        // Context `0` is unseen by e1: its weight is dropped.
        assert_eq!(ensemble_next_token(&experts, &w, &[0]).unwrap(), expected);
        assert!(matches!(
            ensemble_next_token(&experts, &RouterWeights::one_hot(2, 1), &[0]),
            Err(Error::EmptyPrefixDistribution)
        ));
    }
}
