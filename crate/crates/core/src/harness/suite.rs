//! The equivalence suite: every exact identity the library promises, run on
//! one configuration and recorded as named checks.

use std::collections::BTreeSet;

use super::config::ExperimentConfig;
use super::pipeline::{partition_corpus, train_experts};
use super::report::{Check, RunReport, Table};
use super::synth::{component_rng, random_target, stream, SyntheticWorld};
use crate::ar::{ar_path, horizon, masked_source, verify_ar_generation, ArConditionalVelocity};
use crate::decentral::{
    combine_uniform_prior, combine_velocity, topk_filter, ClusterPartition, DecentralizedStep,
};
use crate::dfm::{
    check_enumeration_bound, marginal_velocity_field, Coupling, CouplingPair, Timestep, Token,
    VelocitySlice, Vocab,
};
use crate::error::{Error, Result};
use crate::experts::{evaluate, train_dense, ContextShareEnsemble, Corpus};

/// Threshold for every exact identity.
pub const EXACT_TOL: f64 = 1e-12;

/// The unequal-mass gap must clear this to count as nonzero.
pub const NONZERO_GAP: f64 = 1e-9;

fn named(check: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |source| Error::CheckFailed {
        check: check.to_owned(),
        source: Box::new(source),
    }
}

/// One pair per sample, `(mask(x1), x1)`, each with weight `1/n`.
pub fn sample_coupling(corpus: &Corpus, prefix_len: usize) -> Result<Coupling> {
    let w = 1.0 / corpus.len() as f64;
    Coupling::new(
        corpus
            .samples
            .iter()
            .map(|s| CouplingPair {
                source: masked_source(&s.tokens, prefix_len, corpus.vocab.mask()),
                target: s.tokens.clone(),
                weight: w,
            })
            .collect(),
    )
}

/// Worst-case distances from the centralized marginal velocity over every
/// step and positive-mass state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecentralGaps {
    /// Exact posterior combination.
    pub exact: f64,
    /// Equal-prior likelihood-ratio combination.
    pub uniform_prior: f64,
    /// Exact posterior after top-k filtering.
    pub top_k: f64,
    pub states: usize,
}

pub fn decentral_gaps(
    partition: &ClusterPartition,
    coupling: &Coupling,
    vocab: Vocab,
    prefix_len: usize,
    top_k: usize,
) -> Result<DecentralGaps> {
    let path = ar_path(vocab, prefix_len);
    let cond = ArConditionalVelocity::new(vocab, prefix_len);
    let n = horizon(coupling.seq_len(), prefix_len)?;
    let mut gaps = DecentralGaps::default();
    for t in 0..n {
        let t = Timestep::new(t, n)?;
        let (central, p_t) = marginal_velocity_field(&path, coupling, &cond, t)?;
        let step = DecentralizedStep::build(partition, &path, coupling, &cond, t)?;
        for z in p_t.support() {
            let reference = central
                .get(z)
                .cloned()
                .unwrap_or_else(|| VelocitySlice::zeros(z.len(), vocab.size()));
            let flows = step.flows(z);
            let posterior = step.posterior(z)?;
            let exact = combine_velocity(&flows, &posterior)?;
            let uniform = combine_uniform_prior(&flows, &step.likelihoods(z))?;
            let filtered = combine_velocity(&flows, &topk_filter(&posterior, top_k)?)?;
            gaps.exact = gaps.exact.max(exact.linf_distance(&reference)?);
            gaps.uniform_prior = gaps.uniform_prior.max(uniform.linf_distance(&reference)?);
            gaps.top_k = gaps.top_k.max(filtered.linf_distance(&reference)?);
            gaps.states += 1;
        }
    }
    Ok(gaps)
}

/// Keeps the first `min size` members of every cluster so all clusters carry
/// the same mass.
fn equal_mass_subset(
    corpus: &Corpus,
    assignment: &[usize],
    clusters: usize,
) -> (Corpus, Vec<usize>) {
    let mut sizes = vec![0usize; clusters];
    assignment.iter().for_each(|&k| sizes[k] += 1);
    let keep = sizes.iter().copied().min().unwrap_or(0);
    let mut taken = vec![0usize; clusters];
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (s, &k) in corpus.samples.iter().zip(assignment) {
        if taken[k] < keep {
            taken[k] += 1;
            samples.push(s.clone());
            labels.push(k);
        }
    }
    (
        Corpus {
            vocab: corpus.vocab,
            samples,
        },
        labels,
    )
}

/// Moves half of the last cluster into cluster 0.
fn unequal_mass_assignment(assignment: &[usize], clusters: usize) -> Vec<usize> {
    let last = clusters - 1;
    let members: Vec<usize> = (0..assignment.len())
        .filter(|&i| assignment[i] == last)
        .collect();
    let mut out = assignment.to_vec();
    for &i in &members[..members.len() / 2] {
        out[i] = 0;
    }
    out
}

/// Runs, in order: AR generation, the decentralization identity, the
/// equal-prior simplification (equal and unequal masses), and the
/// exact-ensemble identity.
pub fn run_equivalence_suite(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    check_enumeration_bound(config.vocab_size, config.seq_len)
        .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    let seed = config.seed;
    let p = config.prefix_len;
    let k = config.clusters;
    let vocab = Vocab::with_trailing_mask(config.vocab_size)?;
    let mut report = RunReport::new("verify", config);

    let q = random_target(
        vocab,
        config.seq_len,
        &mut component_rng(seed, stream::TARGET),
    )?;
    let ar = verify_ar_generation(&q, vocab, p).map_err(named("ar_generation"))?;
    let misplaced = ar
        .sparsity_positions
        .iter()
        .enumerate()
        .filter(|(t, pos)| **pos != Some(p + t + 1))
        .count();
    report.checks.extend([
        Check::at_most("ar_continuity_residual", ar.max_residual(), EXACT_TOL),
        Check::at_most("ar_generation_gap", ar.max_gap(), EXACT_TOL),
        Check::holds("ar_one_sparsity", misplaced)
            .with_detail("steps whose active position is not P+t+1"),
        Check::holds("ar_velocity_validity", ar.velocity_violations),
    ]);
    let mut steps = Table::new(
        "ar_steps",
        &["t", "ce_residual", "push_forward_gap", "active_position"],
    );
    for t in 0..ar.horizon {
        steps.push(vec![
            t.into(),
            ar.ce_residuals[t].into(),
            ar.push_forward_gaps[t].into(),
            ar.sparsity_positions[t].map_or("none".into(), |pos| pos.into()),
        ]);
    }
    report.tables.push(steps);

    let world = SyntheticWorld::new(config, seed)?;
    let corpus = world.sample_corpus(
        config.corpus.samples,
        "s",
        &mut component_rng(seed, stream::TRAIN),
    )?;
    let partition = partition_corpus(&corpus, config, seed)?;
    let coupling = sample_coupling(&corpus, p)?;
    let clusters = ClusterPartition::new(k, partition.assignment.clone())?;
    let mut decentral = Table::new(
        "decentral",
        &[
            "partition",
            "pairs",
            "states",
            "exact_gap",
            "uniform_prior_gap",
            "top_k_gap",
        ],
    );

    let gaps = decentral_gaps(&clusters, &coupling, vocab, p, config.router.top_k)
        .map_err(named("decentral_identity"))?;
    report
        .checks
        .push(Check::at_most("decentral_identity", gaps.exact, EXACT_TOL));
    report.checks.push(if config.router.top_k < k {
        Check::above("top_k_approximation_gap", gaps.top_k, 0.0)
            .soft()
            .with_detail("top-k routing drops posterior mass; a nonzero gap is expected")
    } else {
        Check::at_most("top_k_approximation_gap", gaps.top_k, EXACT_TOL)
    });
    decentral.push(row("balanced", coupling.len(), &gaps));

    let (equal_corpus, equal_labels) = equal_mass_subset(&corpus, &partition.assignment, k);
    let equal_coupling = sample_coupling(&equal_corpus, p)?;
    let equal = ClusterPartition::new(k, equal_labels)?;
    let gaps = decentral_gaps(&equal, &equal_coupling, vocab, p, config.router.top_k)
        .map_err(named("uniform_prior_equal_mass"))?;
    report.checks.push(Check::at_most(
        "uniform_prior_equal_mass",
        gaps.uniform_prior.max(gaps.exact),
        EXACT_TOL,
    ));
    decentral.push(row("equal_mass", equal_coupling.len(), &gaps));

    let unequal_check = if k >= 2 {
        let unequal = ClusterPartition::new(k, unequal_mass_assignment(&partition.assignment, k))?;
        let gaps = decentral_gaps(&unequal, &coupling, vocab, p, config.router.top_k)
            .map_err(named("uniform_prior_unequal_mass_gap"))?;
        decentral.push(row("unequal_mass", coupling.len(), &gaps));
        Check::above(
            "uniform_prior_unequal_mass_gap",
            gaps.uniform_prior,
            NONZERO_GAP,
        )
        .with_detail("equal-prior weights must not match the exact posterior when masses differ")
    } else {
        Check::above("uniform_prior_unequal_mass_gap", 0.0, NONZERO_GAP)
            .soft()
            .with_detail("a single cluster cannot have unequal mass")
    };
    report.checks.push(unequal_check);
    report.tables.push(decentral);

    let (identity, loss_gap) =
        ensemble_identity(&corpus, &partition.assignment, k, config.expert.order)
            .map_err(named("ensemble_dense_identity"))?;
    report.checks.extend([
        Check::at_most("ensemble_dense_identity", identity, EXACT_TOL),
        Check::at_most("ensemble_dense_log_loss", loss_gap, EXACT_TOL),
    ]);
    Ok(report)
}

fn row(name: &str, pairs: usize, gaps: &DecentralGaps) -> Vec<super::report::Cell> {
    vec![
        name.into(),
        pairs.into(),
        gaps.states.into(),
        gaps.exact.into(),
        gaps.uniform_prior.into(),
        gaps.top_k.into(),
    ]
}

/// Largest distance between the dense model and the context-share ensemble
/// over every training prefix, and the difference of their log-losses.
pub fn ensemble_identity(
    corpus: &Corpus,
    assignment: &[usize],
    clusters: usize,
    order: usize,
) -> Result<(f64, f64)> {
    let shards = corpus.shards(assignment, clusters)?;
    let experts = train_experts(&shards, order, 0.0)?;
    let dense = train_dense(corpus, order, 0.0)?;
    let ensemble = ContextShareEnsemble { experts: &experts };
    let prefixes: BTreeSet<&[Token]> = corpus
        .samples
        .iter()
        .flat_map(|s| (0..s.tokens.len()).map(move |p| &s.tokens.tokens()[..p]))
        .collect();
    let mut worst: f64 = 0.0;
    for prefix in prefixes {
        let a = dense.next_token(prefix)?;
        let weights = crate::experts::context_share_weights(&experts, prefix)?;
        let b = crate::decentral::ensemble_next_token(&experts, &weights, prefix)?;
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    let dense_loss = evaluate(&dense, corpus, None)?.log_loss;
    let ensemble_loss = evaluate(&ensemble, corpus, None)?.log_loss;
    Ok((worst, (dense_loss - ensemble_loss).abs()))
}
