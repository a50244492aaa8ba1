//! Synthetic clustered corpora with a known generating distribution.
//!
//! Each latent topic owns a feature blob on the unit sphere and a first-order
//! Markov chain over content tokens. Samples pick a topic uniformly, draw a
//! noisy feature vector around the topic mean (or none, for text-only
//! samples) and a sequence from the topic's chain.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::dfm::{enumerate_sequences, DistTable, Token, TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::experts::{Corpus, Sample};

/// Independent random streams derived from one seed.
pub mod stream {
    pub const TOPICS: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const HELDOUT: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const ROUTING: u64 = 5;
    pub const KMEANS: u64 = 6;
    pub const TARGET: u64 = 7;
}

/// ChaCha8 seeded with `seed`, positioned on its own stream.
pub fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A point on the probability simplex drawn from a symmetric Dirichlet.
pub fn random_simplex(rng: &mut impl Rng, size: usize, concentration: f64) -> Result<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::ConfigInvalid(format!("concentration {concentration}: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..size).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // Tiny concentrations can underflow every draw to zero.
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// A full-support random target over all mask-free sequences of length
/// `len`, uniform on the simplex.
pub fn random_target(vocab: Vocab, len: usize, rng: &mut impl Rng) -> Result<DistTable> {
    let content: Vec<Token> = vocab.content_tokens().collect();
    let seqs = enumerate_sequences(&content, len)?;
    let weights = random_simplex(rng, seqs.len(), 1.0)?;
    DistTable::new(seqs.into_iter().zip(weights))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub mean: Vec<f64>,
    /// PMF of the first token over content tokens.
    pub initial: Vec<f64>,
    /// `transition[a][b]` = P(next = b | previous = a).
    pub transition: Vec<Vec<f64>>,
}

/// The generating process shared by training and held-out corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub vocab: Vocab,
    pub seq_len: usize,
    pub topics: Vec<Topic>,
    pub blob_noise: f64,
    pub text_only_fraction: f64,
}

impl SyntheticWorld {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let vocab = Vocab::with_trailing_mask(config.vocab_size)?;
        let c = &config.corpus;
        let content = config.vocab_size - 1;
        let mut rng = component_rng(seed, stream::TOPICS);
        let shared = 1.0 / (c.feature_dim as f64).sqrt();
        let topics = (0..c.topics)
            .map(|k| {
                let mut mean: Vec<f64> = (0..c.feature_dim)
                    .map(|j| {
                        let axis = if j == k { 1.0 } else { 0.0 };
                        c.blob_separation * axis + (1.0 - c.blob_separation) * shared
                    })
                    .collect();
                normalize(&mut mean);
                let initial = random_simplex(&mut rng, content, c.concentration)?;
                let transition = (0..content)
                    .map(|_| random_simplex(&mut rng, content, c.concentration))
                    .collect::<Result<_>>()?;
                Ok(Topic {
                    mean,
                    initial,
                    transition,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            vocab,
            seq_len: config.seq_len,
            topics,
            blob_noise: c.blob_noise,
            text_only_fraction: c.text_only_fraction,
        })
    }

    /// Draws `n` samples with ids `{id_prefix}{index}`.
    pub fn sample_corpus(&self, n: usize, id_prefix: &str, rng: &mut impl Rng) -> Result<Corpus> {
        let dim = self.topics[0].mean.len();
        let scale = self.blob_noise / (dim as f64).sqrt();
        let samples = (0..n)
            .map(|i| {
                let topic = rng.random_range(0..self.topics.len());
                let t = &self.topics[topic];
                let text_only = rng.random::<f64>() < self.text_only_fraction;
                let features = if text_only {
                    None
                } else {
                    let mut x: Vec<f64> = t
                        .mean
                        .iter()
                        .map(|m| m + scale * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    normalize(&mut x);
                    Some(x)
                };
                let mut tokens = Vec::with_capacity(self.seq_len);
                let mut pmf = &t.initial;
                for _ in 0..self.seq_len {
                    let next = WeightedIndex::new(pmf)
                        .map_err(|e| Error::ConfigInvalid(e.to_string()))?
                        .sample(rng);
                    tokens.push(next as Token);
                    pmf = &t.transition[next];
                }
                Ok(Sample {
                    id: format!("{id_prefix}{i}"),
                    features,
                    tokens: TokenSeq::new(tokens),
                    topic: Some(topic),
                })
            })
            .collect::<Result<_>>()?;
        Corpus::new(self.vocab, samples)
    }

    /// True next-token PMF over the full vocabulary (mask gets zero).
    pub fn truth(&self, sample: &Sample, prefix: &[Token]) -> Vec<f64> {
        let topic = &self.topics[sample.topic.unwrap_or(0)];
        let pmf = match prefix.last() {
            None => &topic.initial,
            Some(&a) => &topic.transition[a as usize],
        };
        let mut out = pmf.clone();
        out.push(0.0);
        out
    }

    /// Exact sequence distribution of one topic.
    pub fn topic_distribution(&self, topic: usize) -> Result<DistTable> {
        let t = &self.topics[topic];
        let content: Vec<Token> = self.vocab.content_tokens().collect();
        let entries = enumerate_sequences(&content, self.seq_len)?
            .into_iter()
            .map(|s| {
                let toks = s.tokens();
                let mut p = t.initial[toks[0] as usize];
                for w in toks.windows(2) {
                    p *= t.transition[w[0] as usize][w[1] as usize];
                }
                (s, p)
            })
            .collect::<Vec<_>>();
        DistTable::new(entries)
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::tests::small;

    #[test]
    fn deterministic_under_seed() {
        let c = small();
        let w1 = SyntheticWorld::new(&c, 5).unwrap();
        let w2 = SyntheticWorld::new(&c, 5).unwrap();
        assert_eq!(w1, w2);
        let a = w1
            .sample_corpus(20, "s", &mut component_rng(5, stream::TRAIN))
            .unwrap();
        let b = w2
            .sample_corpus(20, "s", &mut component_rng(5, stream::TRAIN))
            .unwrap();
        assert_eq!(a, b);
        assert_ne!(w1, SyntheticWorld::new(&c, 6).unwrap());
    }

    #[test]
    fn orthogonal_means_without_noise() {
        let mut c = small();
        c.corpus.blob_noise = 0.0;
        c.corpus.text_only_fraction = 0.0;
        let w = SyntheticWorld::new(&c, 1).unwrap();
        let dot: f64 = w.topics[0]
            .mean
            .iter()
            .zip(&w.topics[1].mean)
            .map(|(a, b)| a * b)
            .sum();
        assert_eq!(dot, 0.0);
        let corpus = w
            .sample_corpus(10, "s", &mut component_rng(1, stream::TRAIN))
            .unwrap();
        for s in &corpus.samples {
            assert_eq!(
                s.features.as_ref().unwrap(),
                &w.topics[s.topic.unwrap()].mean
            );
        }
    }

    #[test]
    fn truth_and_topic_distribution_are_pmfs() {
        let w = SyntheticWorld::new(&small(), 2).unwrap();
        let q = w.topic_distribution(1).unwrap();
        assert!((q.total() - 1.0).abs() < 1e-12);
        let s = Sample {
            id: "x".into(),
            features: None,
            tokens: TokenSeq::new(vec![0, 1, 2]),
            topic: Some(1),
        };
        let p = w.truth(&s, &[2]);
        assert_eq!(p.len(), 4);
        assert_eq!(p[3], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
