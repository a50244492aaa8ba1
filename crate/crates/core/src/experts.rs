//! Count-based autoregressive experts.
//!
//! Each expert is an order-`c` n-gram table trained on one shard; the dense
//! baseline is the same model trained on the union. With zero smoothing,
//! counts are additive across shards, which makes the decentralized ensemble
//! exactly checkable against the dense model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decentral::RouterWeights;
use crate::dfm::{Token, TokenSeq, Vocab};
use crate::error::{Error, Result};

/// Begin-of-sequence marker used to left-pad contexts. Never a vocabulary id.
pub const BOS: Token = Token::MAX;

const FORMAT_HEADER: &str = "ddfm-expert v1";

/// One training or evaluation item: optional image-style features and a
/// token sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Unit-norm feature vector, `None` for text-only samples.
    pub features: Option<Vec<f64>>,
    pub tokens: TokenSeq,
    /// Latent topic, when known (synthetic corpora).
    pub topic: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: Vocab,
    pub samples: Vec<Sample>,
}

impl Corpus {
    /// Validates that sequences are mask-free and in range and that features
    /// are unit-norm.
    pub fn new(vocab: Vocab, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            vocab.check(&s.tokens)?;
            if s.tokens.contains(vocab.mask()) {
                return Err(Error::MaskInTarget);
            }
            if let Some(f) = &s.features {
                let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(Error::ConfigInvalid(format!(
                        "sample {:?} has feature norm {norm}",
                        s.id
                    )));
                }
            }
        }
        Ok(Self { vocab, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits into `clusters` shards by `assignment[i]`.
    pub fn shards(&self, assignment: &[usize], clusters: usize) -> Result<Vec<Corpus>> {
        if assignment.len() != self.samples.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} assignments for {} samples",
                assignment.len(),
                self.samples.len()
            )));
        }
        let mut shards = vec![Vec::new(); clusters];
        for (sample, &k) in self.samples.iter().zip(assignment) {
            let shard = shards
                .get_mut(k)
                .ok_or_else(|| Error::InvalidPartition(format!("cluster id {k} >= {clusters}")))?;
            shard.push(sample.clone());
        }
        Ok(shards
            .into_iter()
            .map(|samples| Corpus {
                vocab: self.vocab,
                samples,
            })
            .collect())
    }

    pub fn union(vocab: Vocab, shards: &[Corpus]) -> Corpus {
        Corpus {
            vocab,
            samples: shards.iter().flat_map(|s| s.samples.clone()).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: Corpus = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        Corpus::new(raw.vocab, raw.samples)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Last `order` tokens of `prefix`, left-padded with [`BOS`].
pub fn context_of(prefix: &[Token], order: usize) -> Vec<Token> {
    let mut ctx = vec![BOS; order.saturating_sub(prefix.len())];
    ctx.extend_from_slice(&prefix[prefix.len().saturating_sub(order)..]);
    ctx
}

/// Order-`c` n-gram model with add-α smoothing over the full vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertModel {
    vocab_size: usize,
    order: usize,
    alpha: f64,
    counts: BTreeMap<Vec<Token>, Vec<u64>>,
}

/// Trains on one shard. Only the shard is read.
pub fn train_expert(shard: &Corpus, order: usize, alpha: f64) -> Result<ExpertModel> {
    if shard.is_empty() {
        return Err(Error::EmptyShard);
    }
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::ConfigInvalid(format!(
            "smoothing {alpha} must be >= 0"
        )));
    }
    let d = shard.vocab.size();
    let mut counts: BTreeMap<Vec<Token>, Vec<u64>> = BTreeMap::new();
    for sample in &shard.samples {
        let tokens = sample.tokens.tokens();
        for (p, &tok) in tokens.iter().enumerate() {
            let row = counts
                .entry(context_of(&tokens[..p], order))
                .or_insert_with(|| vec![0; d]);
            row[tok as usize] += 1;
        }
    }
    Ok(ExpertModel {
        vocab_size: d,
        order,
        alpha,
        counts,
    })
}

/// The centralized baseline: one model over the whole corpus.
pub fn train_dense(corpus: &Corpus, order: usize, alpha: f64) -> Result<ExpertModel> {
    train_expert(corpus, order, alpha)
}

impl ExpertModel {
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn counts(&self) -> &BTreeMap<Vec<Token>, Vec<u64>> {
        &self.counts
    }

    /// Copy with a different smoothing constant.
    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }

    /// Number of training tokens observed after `context`.
    pub fn context_total(&self, context: &[Token]) -> u64 {
        self.counts
            .get(context)
            .map(|row| row.iter().sum())
            .unwrap_or(0)
    }

    /// `(count + α) / (total + α d)` for the context formed by the last
    /// `order` tokens of `prefix`.
    pub fn next_token(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        let context = context_of(prefix, self.order);
        let d = self.vocab_size as f64;
        match self.counts.get(&context) {
            Some(row) => {
                let total: u64 = row.iter().sum();
                let denom = total as f64 + self.alpha * d;
                Ok(row
                    .iter()
                    .map(|&c| (c as f64 + self.alpha) / denom)
                    .collect())
            }
            None if self.alpha > 0.0 => Ok(vec![1.0 / d; self.vocab_size]),
            None => Err(Error::UnseenContext { context }),
        }
    }

    /// Versioned text dump with a trailing SHA-256 checksum. Smoothing is
    /// stored as raw bits so reloading is bit-exact.
    pub fn to_text(&self) -> String {
        let mut body = String::new();
        writeln!(body, "{FORMAT_HEADER}").unwrap();
        writeln!(body, "vocab_size {}", self.vocab_size).unwrap();
        writeln!(body, "order {}", self.order).unwrap();
        writeln!(body, "alpha {:016x}", self.alpha.to_bits()).unwrap();
        writeln!(body, "contexts {}", self.counts.len()).unwrap();
        for (ctx, row) in &self.counts {
            let ctx: Vec<String> = ctx
                .iter()
                .map(|&t| if t == BOS { "^".into() } else { t.to_string() })
                .collect();
            let row: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(body, "{} | {}", ctx.join(" "), row.join(" ")).unwrap();
        }
        let digest = hex::encode(Sha256::digest(body.as_bytes()));
        body.push_str(&format!("checksum {digest}\n"));
        body
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptModel(msg.to_string());
        let split = text
            .rfind("checksum ")
            .ok_or_else(|| corrupt("missing checksum"))?;
        let (body, tail) = text.split_at(split);
        let expected = tail.trim_start_matches("checksum ").trim();
        if hex::encode(Sha256::digest(body.as_bytes())) != expected {
            return Err(corrupt("checksum mismatch"));
        }
        let mut lines = body.lines();
        if lines.next() != Some(FORMAT_HEADER) {
            return Err(corrupt("unknown format header"));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| corrupt("truncated header"))?;
            line.strip_prefix(name)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| corrupt(&format!("expected field {name}")))
        };
        let parse_usize = |s: String| s.parse::<usize>().map_err(|e| corrupt(&e.to_string()));
        let vocab_size = parse_usize(field("vocab_size")?)?;
        let order = parse_usize(field("order")?)?;
        let alpha_bits =
            u64::from_str_radix(&field("alpha")?, 16).map_err(|e| corrupt(&e.to_string()))?;
        let n_contexts = parse_usize(field("contexts")?)?;
        let mut counts = BTreeMap::new();
        for line in lines {
            let (ctx, row) = line
                .split_once(" | ")
                .ok_or_else(|| corrupt("malformed context line"))?;
            let ctx = ctx
                .split_whitespace()
                .map(|t| {
                    if t == "^" {
                        Ok(BOS)
                    } else {
                        t.parse::<Token>().map_err(|e| corrupt(&e.to_string()))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let row = row
                .split_whitespace()
                .map(|c| c.parse::<u64>().map_err(|e| corrupt(&e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if ctx.len() != order || row.len() != vocab_size {
                return Err(corrupt("context or count row has wrong width"));
            }
            counts.insert(ctx, row);
        }
        if counts.len() != n_contexts {
            return Err(corrupt("context count mismatch"));
        }
        Ok(Self {
            vocab_size,
            order,
            alpha: f64::from_bits(alpha_bits),
            counts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Exact router weights for count experts: each shard's share of the
/// training occurrences of the prefix's context.
pub fn context_share_weights(experts: &[ExpertModel], prefix: &[Token]) -> Result<RouterWeights> {
    let Some(first) = experts.first() else {
        return Err(Error::EmptyPrefixDistribution);
    };
    let context = context_of(prefix, first.order);
    let totals: Vec<f64> = experts
        .iter()
        .map(|e| e.context_total(&context) as f64)
        .collect();
    let sum: f64 = totals.iter().sum();
    if sum == 0.0 {
        return Err(Error::EmptyPrefixDistribution);
    }
    RouterWeights::new(totals.into_iter().map(|t| t / sum).collect())
}

/// Anything that produces a next-token PMF for a sample's prefix.
pub trait Predictor {
    fn predict(&self, sample: &Sample, prefix: &[Token]) -> Result<Vec<f64>>;
}

impl Predictor for ExpertModel {
    fn predict(&self, _sample: &Sample, prefix: &[Token]) -> Result<Vec<f64>> {
        self.next_token(prefix)
    }
}

/// Ensemble weighted per prefix by [`context_share_weights`].
pub struct ContextShareEnsemble<'a> {
    pub experts: &'a [ExpertModel],
}

impl Predictor for ContextShareEnsemble<'_> {
    fn predict(&self, _sample: &Sample, prefix: &[Token]) -> Result<Vec<f64>> {
        let weights = context_share_weights(self.experts, prefix)?;
        crate::decentral::ensemble_next_token(self.experts, &weights, prefix)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean negative log-probability per predicted token, in nats.
    pub log_loss: f64,
    /// Mean total-variation distance to the true conditional, when known.
    pub total_variation: Option<f64>,
    pub tokens: usize,
    /// Total negative log-probability of each held-out sample, in corpus order.
    #[serde(skip)]
    pub sample_nll: Vec<f64>,
}

/// True next-token conditional for a sample and prefix.
pub type TruthFn<'a> = dyn Fn(&Sample, &[Token]) -> Vec<f64> + 'a;

/// Scores every next-token prediction in `heldout`.
pub fn evaluate(
    model: &dyn Predictor,
    heldout: &Corpus,
    truth: Option<&TruthFn<'_>>,
) -> Result<Metrics> {
    if heldout.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut nll = 0.0;
    let mut tv = 0.0;
    let mut tokens = 0usize;
    let mut sample_nll = Vec::with_capacity(heldout.len());
    for sample in &heldout.samples {
        let seq = sample.tokens.tokens();
        let mut own = 0.0;
        for (p, &tok) in seq.iter().enumerate() {
            let pmf = model.predict(sample, &seq[..p])?;
            own -= pmf[tok as usize].ln();
            if let Some(truth) = truth {
                let q = truth(sample, &seq[..p]);
                tv += 0.5 * pmf.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
            }
            tokens += 1;
        }
        nll += own;
        sample_nll.push(own);
    }
    if tokens == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(Metrics {
        log_loss: nll / tokens as f64,
        total_variation: truth.map(|_| tv / tokens as f64),
        tokens,
        sample_nll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::with_trailing_mask(4).unwrap()
    }

    fn corpus(seqs: &[&[Token]]) -> Corpus {
        Corpus::new(
            vocab(),
            seqs.iter()
                .enumerate()
                .map(|(i, s)| Sample {
                    id: format!("s{i}"),
                    features: None,
                    tokens: TokenSeq::new(s.to_vec()),
                    topic: None,
                })
                .collect(),
        )
        .unwrap()
    }

    const A: Token = 0;
    const B: Token = 1;
    const C: Token = 2;

    #[test]
    fn bigram_counts() {
        let m = train_expert(&corpus(&[&[A, B], &[A, B], &[A, C]]), 1, 0.0).unwrap();
        let p = m.next_token(&[A]).unwrap();
        assert_eq!(p, vec![0.0, 2.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert_eq!(m.next_token(&[]).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn add_alpha_smoothing() {
        let m = train_expert(&corpus(&[&[A, B], &[A, B], &[A, C]]), 1, 1.0).unwrap();
        let p = m.next_token(&[A]).unwrap();
        let expected = [1.0 / 7.0, 3.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        // Unseen context with smoothing is uniform.
        assert_eq!(m.next_token(&[C]).unwrap(), vec![0.25; 4]);
        // Large smoothing approaches uniform.
        let p = m.with_alpha(1e12).next_token(&[A]).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn unseen_context_without_smoothing_errors() {
        let m = train_expert(&corpus(&[&[A, B]]), 1, 0.0).unwrap();
        assert_eq!(m.next_token(&[A]).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            m.next_token(&[C]),
            Err(Error::UnseenContext { .. })
        ));
    }

    #[test]
    fn single_sequence_is_a_deterministic_chain() {
        let m = train_expert(&corpus(&[&[C, A, B]]), 2, 0.0).unwrap();
        assert_eq!(m.next_token(&[]).unwrap()[C as usize], 1.0);
        assert_eq!(m.next_token(&[C]).unwrap()[A as usize], 1.0);
        assert_eq!(m.next_token(&[C, A]).unwrap()[B as usize], 1.0);
    }

    #[test]
    fn empty_shard_and_bad_alpha() {
        assert!(matches!(
            train_expert(&corpus(&[]), 1, 0.0),
            Err(Error::EmptyShard)
        ));
        assert!(train_expert(&corpus(&[&[A]]), 1, -1.0).is_err());
    }

    #[test]
    fn corpus_rejects_masked_sequences() {
        let r = Corpus::new(
            vocab(),
            vec![Sample {
                id: "x".into(),
                features: None,
                tokens: TokenSeq::new(vec![A, 3]),
                topic: None,
            }],
        );
        assert!(matches!(r, Err(Error::MaskInTarget)));
    }

    #[test]
    fn dense_counts_are_sum_of_shards() {
        let c = corpus(&[&[A, B, C], &[B, B, A], &[A, C, C], &[C, A, B], &[A, B, B]]);
        let shards = c.shards(&[0, 1, 0, 1, 1], 2).unwrap();
        let dense = train_dense(&c, 1, 0.0).unwrap();
        let experts: Vec<_> = shards
            .iter()
            .map(|s| train_expert(s, 1, 0.0).unwrap())
            .collect();
        for (ctx, row) in dense.counts() {
            for (tok, &count) in row.iter().enumerate() {
                let sum: u64 = experts
                    .iter()
                    .map(|e| e.counts().get(ctx).map_or(0, |r| r[tok]))
                    .sum();
                assert_eq!(sum, count);
            }
        }
    }

    #[test]
    fn single_shard_dense_matches_expert() {
        let c = corpus(&[&[A, B], &[C, B]]);
        assert_eq!(
            train_dense(&c, 1, 0.5).unwrap(),
            train_expert(&c, 1, 0.5).unwrap()
        );
    }

    #[test]
    fn text_round_trip_and_tamper_detection() {
        let m = train_expert(&corpus(&[&[A, B, C], &[C, A]]), 2, 0.1).unwrap();
        let text = m.to_text();
        assert_eq!(ExpertModel::from_text(&text).unwrap(), m);
        let tampered = text.replacen("order 2", "order 3", 1);
        assert!(matches!(
            ExpertModel::from_text(&tampered),
            Err(Error::CorruptModel(_))
        ));
    }

    #[test]
    fn evaluate_against_truth() {
        let c = corpus(&[&[A, B], &[B, A]]);
        let uniform = train_expert(&c, 0, 1e15).unwrap();
        let truth = |_: &Sample, _: &[Token]| vec![0.25; 4];
        let m = evaluate(&uniform, &c, Some(&truth)).unwrap();
        assert!((m.log_loss - 4f64.ln()).abs() < 1e-9);
        assert!(m.total_variation.unwrap() < 1e-9);
        assert_eq!(m.tokens, 4);
        assert!(matches!(
            evaluate(&uniform, &corpus(&[]), None),
            Err(Error::EmptyCorpus)
        ));
    }
}
