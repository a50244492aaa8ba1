use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A full experiment description. Every field must be present in the JSON
/// document; unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Vocabulary size `d`, including the mask token (the last id).
    pub vocab_size: usize,
    /// Sequence length `N`.
    pub seq_len: usize,
    /// Prompt length `P` kept unmasked by the coupling.
    pub prefix_len: usize,
    /// Number of clusters and experts `K`.
    pub clusters: usize,
    /// Independent repetitions of the experiment, seeded `seed, seed+1, …`.
    pub repetitions: usize,
    pub router: RouterParams,
    pub kmeans: KmeansParams,
    pub expert: ExpertParams,
    pub corpus: CorpusParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterParams {
    pub temperature: f64,
    pub top_k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KmeansMethod {
    Balanced,
    TwoStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmeansParams {
    pub method: KmeansMethod,
    /// Fine cluster count for the two-stage method.
    pub k_fine: usize,
    pub max_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertParams {
    /// Context length `c`.
    pub order: usize,
    /// Add-α smoothing used for trained models. The equivalence suite always
    /// trains with `α = 0`.
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusParams {
    /// Training samples.
    pub samples: usize,
    /// Held-out samples.
    pub heldout: usize,
    pub feature_dim: usize,
    /// Latent topics, each with its own feature blob and sequence chain.
    pub topics: usize,
    /// 1 gives orthogonal topic means, 0 makes all means coincide.
    pub blob_separation: f64,
    /// Standard deviation of the feature noise (total, spread over dims).
    pub blob_noise: f64,
    /// Fraction of samples without features.
    pub text_only_fraction: f64,
    /// Dirichlet concentration of each topic's initial and transition PMFs.
    pub concentration: f64,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ConfigInvalid(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(e) => Error::Parse {
                path: path.to_path_buf(),
                reason: e.to_string(),
            },
            e => e,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(invalid(
                "vocab_size must be >= 2 (content tokens plus mask)",
            ));
        }
        if self.seq_len == 0 {
            return Err(invalid("seq_len must be >= 1"));
        }
        if self.prefix_len >= self.seq_len {
            return Err(invalid(format!(
                "prefix_len {} must be < seq_len {}",
                self.prefix_len, self.seq_len
            )));
        }
        if self.clusters == 0 {
            return Err(invalid("clusters must be >= 1"));
        }
        if self.repetitions == 0 {
            return Err(invalid("repetitions must be >= 1"));
        }
        let r = &self.router;
        if !r.temperature.is_finite() || r.temperature <= 0.0 {
            return Err(invalid(format!(
                "router.temperature {} must be > 0",
                r.temperature
            )));
        }
        if r.top_k == 0 || r.top_k > self.clusters {
            return Err(invalid(format!(
                "router.top_k {} must be in [1, {}]",
                r.top_k, self.clusters
            )));
        }
        let k = &self.kmeans;
        if k.max_iters == 0 {
            return Err(invalid("kmeans.max_iters must be >= 1"));
        }
        if k.method == KmeansMethod::TwoStage && k.k_fine < self.clusters {
            return Err(invalid(format!(
                "kmeans.k_fine {} must be >= clusters {}",
                k.k_fine, self.clusters
            )));
        }
        let e = &self.expert;
        if !e.alpha.is_finite() || e.alpha < 0.0 {
            return Err(invalid(format!("expert.alpha {} must be >= 0", e.alpha)));
        }
        let c = &self.corpus;
        if c.samples == 0 || c.heldout == 0 {
            return Err(invalid("corpus.samples and corpus.heldout must be >= 1"));
        }
        if c.topics == 0 || c.feature_dim < c.topics {
            return Err(invalid(format!(
                "corpus.feature_dim {} must be >= topics {} >= 1",
                c.feature_dim, c.topics
            )));
        }
        if !(0.0..=1.0).contains(&c.blob_separation) {
            return Err(invalid("corpus.blob_separation must be in [0, 1]"));
        }
        if !c.blob_noise.is_finite() || c.blob_noise < 0.0 {
            return Err(invalid("corpus.blob_noise must be >= 0"));
        }
        if !(0.0..1.0).contains(&c.text_only_fraction) {
            return Err(invalid("corpus.text_only_fraction must be in [0, 1)"));
        }
        if !c.concentration.is_finite() || c.concentration <= 0.0 {
            return Err(invalid("corpus.concentration must be > 0"));
        }
        let featured = (c.samples as f64 * (1.0 - c.text_only_fraction)).floor() as usize;
        let needed = match k.method {
            KmeansMethod::Balanced => self.clusters,
            KmeansMethod::TwoStage => k.k_fine,
        };
        if featured < needed {
            return Err(invalid(format!(
                "about {featured} samples carry features, clustering needs at least {needed}"
            )));
        }
        Ok(())
    }
}
