//! Discrete-time discrete flow matching on enumerable state spaces.
//!
//! States are token sequences `x = (x^1, …, x^N)` over a vocabulary `[d]`.
//! A probability path is a coupling-weighted mixture of factorized
//! conditional paths, and a velocity `u_t^i(a, z)` moves mass at a single
//! position per factor. One sampling step from state `z` draws every
//! position independently from `δ_{z^i}(·) + u_t^i(·, z)`.
//!
//! Everything here is exact enumeration over sparse tables: the continuity
//! equation `p_{t+1}(x) − p_t(x) + div_x(p_t u_t) = 0` and the push-forward
//! of a distribution through one sampling step are computed term by term,
//! never sampled.
//!
//! Positions are 0-based in this module's API; the [`crate::ar`] reports
//! convert to the 1-based convention used in AR reveal positions.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Refuse to enumerate more than this many states.
pub const ENUMERATION_LIMIT: usize = 1_000_000;
/// Tolerance for normalization and scheduler checks on user input.
pub const INPUT_TOL: f64 = 1e-9;
/// Tolerance for internally constructed schedulers.
pub const INTERNAL_TOL: f64 = 1e-12;
/// Tolerance for velocity validity (zero-sum rows, entry ranges).
pub const VELOCITY_TOL: f64 = 1e-9;
/// States with less mass than this are treated as off-path.
pub const ZERO_MASS: f64 = 1e-15;

/// The token alphabet `[d]` with one reserved mask id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    mask: Token,
}

impl Vocab {
    pub fn new(size: usize, mask: Token) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidVocab(format!("size {size} < 2")));
        }
        if mask as usize >= size {
            return Err(Error::InvalidVocab(format!(
                "mask id {mask} outside [0, {size})"
            )));
        }
        Ok(Self { size, mask })
    }

    /// Vocabulary whose last id is the mask.
    pub fn with_trailing_mask(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidVocab(format!("size {size} < 2")));
        }
        Self::new(size, (size - 1) as Token)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask(&self) -> Token {
        self.mask
    }

    /// Tokens other than the mask, in increasing order.
    pub fn content_tokens(&self) -> impl Iterator<Item = Token> + '_ {
        (0..self.size as Token).filter(move |&t| t != self.mask)
    }

    pub fn check(&self, seq: &TokenSeq) -> Result<()> {
        match seq.0.iter().find(|&&t| t as usize >= self.size) {
            Some(&token) => Err(Error::TokenOutOfRange {
                token,
                size: self.size,
            }),
            None => Ok(()),
        }
    }
}

/// A fixed-length token sequence, the state `x ∈ [d]^N`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<Token>);

impl TokenSeq {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn get(&self, position: usize) -> Token {
        self.0[position]
    }

    /// Copy with `position` replaced by `token`.
    pub fn with_token(&self, position: usize, token: Token) -> Self {
        let mut out = self.clone();
        out.0[position] = token;
        out
    }

    pub fn contains(&self, token: Token) -> bool {
        self.0.contains(&token)
    }

    /// True when `self` and `other` agree on every position except possibly
    /// `position`, i.e. `δ_other(self^{ī})`.
    pub fn agrees_except(&self, other: &TokenSeq, position: usize) -> bool {
        self.0
            .iter()
            .zip(&other.0)
            .enumerate()
            .all(|(j, (a, b))| j == position || a == b)
    }
}

impl From<Vec<Token>> for TokenSeq {
    fn from(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }
}

impl<const N: usize> From<[Token; N]> for TokenSeq {
    fn from(tokens: [Token; N]) -> Self {
        Self(tokens.to_vec())
    }
}

impl fmt::Debug for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Fails with `InstanceTooLarge` when `d^N` exceeds the enumeration bound.
pub fn check_enumeration_bound(vocab_size: usize, len: usize) -> Result<()> {
    let states = (vocab_size as f64).powi(len as i32);
    if states > ENUMERATION_LIMIT as f64 {
        return Err(Error::InstanceTooLarge {
            states,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

/// All sequences of length `len` over `alphabet`, in lexicographic order.
pub fn enumerate_sequences(alphabet: &[Token], len: usize) -> Result<Vec<TokenSeq>> {
    check_enumeration_bound(alphabet.len(), len)?;
    let mut out = vec![Vec::with_capacity(len)];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                alphabet.iter().map(move |&a| {
                    let mut next = prefix.clone();
                    next.push(a);
                    next
                })
            })
            .collect();
    }
    Ok(out.into_iter().map(TokenSeq).collect())
}

/// Every state in `[d]^N`.
pub fn enumerate_states(vocab: Vocab, len: usize) -> Result<Vec<TokenSeq>> {
    let alphabet: Vec<Token> = (0..vocab.size() as Token).collect();
    enumerate_sequences(&alphabet, len)
}

/// Exact PMF over token sequences, stored sparsely. Only strictly positive
/// masses are kept.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistTable {
    masses: BTreeMap<TokenSeq, f64>,
}

impl DistTable {
    /// Builds a table from `(state, mass)` entries, merging duplicates.
    /// Masses must be nonnegative and sum to 1 within [`INPUT_TOL`].
    pub fn new(entries: impl IntoIterator<Item = (TokenSeq, f64)>) -> Result<Self> {
        let mut masses = BTreeMap::new();
        for (seq, mass) in entries {
            if !mass.is_finite() || mass < 0.0 {
                return Err(Error::NegativeMass { mass });
            }
            *masses.entry(seq).or_insert(0.0) += mass;
        }
        masses.retain(|_, m| *m > 0.0);
        let table = Self { masses };
        let total = table.total();
        if (total - 1.0).abs() > INPUT_TOL {
            return Err(Error::NotNormalized { total });
        }
        Ok(table)
    }

    /// Normalizes nonnegative weights into a PMF.
    pub fn from_weights(entries: impl IntoIterator<Item = (TokenSeq, f64)>) -> Result<Self> {
        let entries: Vec<_> = entries.into_iter().collect();
        let total: f64 = entries.iter().map(|(_, w)| *w).sum();
        if !total.is_finite() || total <= 0.0 {
            return Err(Error::NotNormalized { total });
        }
        Self::new(entries.into_iter().map(|(s, w)| (s, w / total)))
    }

    pub fn delta(seq: TokenSeq) -> Self {
        let mut masses = BTreeMap::new();
        masses.insert(seq, 1.0);
        Self { masses }
    }

    pub fn uniform(states: impl IntoIterator<Item = TokenSeq>) -> Result<Self> {
        Self::from_weights(states.into_iter().map(|s| (s, 1.0)))
    }

    /// Wraps an accumulator produced by an exact computation; drops
    /// nonpositive entries without renormalizing.
    pub(crate) fn from_accumulator(mut masses: BTreeMap<TokenSeq, f64>) -> Self {
        masses.retain(|_, m| *m > 0.0);
        Self { masses }
    }

    pub fn mass(&self, seq: &TokenSeq) -> f64 {
        self.masses.get(seq).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TokenSeq, f64)> {
        self.masses.iter().map(|(s, &m)| (s, m))
    }

    /// States carrying at least [`ZERO_MASS`].
    pub fn support(&self) -> impl Iterator<Item = &TokenSeq> {
        self.masses
            .iter()
            .filter(|(_, &m)| m >= ZERO_MASS)
            .map(|(s, _)| s)
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.masses.values().sum()
    }

    /// Sequence length of the support, if non-empty.
    pub fn seq_len(&self) -> Option<usize> {
        self.masses.keys().next().map(TokenSeq::len)
    }

    /// `max_x |self(x) − other(x)|` over the union of supports.
    pub fn linf_distance(&self, other: &DistTable) -> f64 {
        let mut gap: f64 = 0.0;
        for (s, m) in &self.masses {
            gap = gap.max((m - other.mass(s)).abs());
        }
        for (s, m) in &other.masses {
            if !self.masses.contains_key(s) {
                gap = gap.max(m.abs());
            }
        }
        gap
    }
}

/// One `(x0, x1)` pair of a coupling with its joint probability.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingPair {
    pub source: TokenSeq,
    pub target: TokenSeq,
    pub weight: f64,
}

/// Joint PMF `π(x0, x1)` as an explicit list of pairs. Duplicated pairs are
/// allowed; they act as one pair with the summed weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pairs: Vec<CouplingPair>,
}

impl Coupling {
    pub fn new(pairs: Vec<CouplingPair>) -> Result<Self> {
        let Some(first) = pairs.first() else {
            return Err(Error::CouplingInvalid { total: 0.0 });
        };
        let len = first.source.len();
        for pair in &pairs {
            if !pair.weight.is_finite() || pair.weight < 0.0 {
                return Err(Error::NegativeMass { mass: pair.weight });
            }
            for seq in [&pair.source, &pair.target] {
                if seq.len() != len {
                    return Err(Error::LengthMismatch {
                        expected: len,
                        got: seq.len(),
                    });
                }
            }
        }
        let total: f64 = pairs.iter().map(|p| p.weight).sum();
        if (total - 1.0).abs() > INPUT_TOL {
            return Err(Error::CouplingInvalid { total });
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[CouplingPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.pairs[0].source.len()
    }

    /// `p(x) = Σ π(x, ·)`.
    pub fn source_marginal(&self) -> DistTable {
        let mut acc = BTreeMap::new();
        for p in &self.pairs {
            *acc.entry(p.source.clone()).or_insert(0.0) += p.weight;
        }
        DistTable::from_accumulator(acc)
    }

    /// `q(x) = Σ π(·, x)`.
    pub fn target_marginal(&self) -> DistTable {
        let mut acc = BTreeMap::new();
        for p in &self.pairs {
            *acc.entry(p.target.clone()).or_insert(0.0) += p.weight;
        }
        DistTable::from_accumulator(acc)
    }

    /// Sub-coupling on the given pair indices, renormalized, together with
    /// the mass it carried in `self`.
    pub fn restrict(&self, indices: &[usize]) -> Result<(Coupling, f64)> {
        let mass: f64 = indices.iter().map(|&i| self.pairs[i].weight).sum();
        if mass.is_nan() || mass <= 0.0 {
            return Err(Error::CouplingInvalid { total: mass });
        }
        let pairs = indices
            .iter()
            .map(|&i| {
                let p = &self.pairs[i];
                CouplingPair {
                    source: p.source.clone(),
                    target: p.target.clone(),
                    weight: p.weight / mass,
                }
            })
            .collect();
        Ok((Coupling { pairs }, mass))
    }
}

/// A discrete timestep `t ∈ {0, …, n}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Timestep {
    t: usize,
    horizon: usize,
}

impl Timestep {
    pub fn new(t: usize, horizon: usize) -> Result<Self> {
        if t > horizon {
            return Err(Error::TimeOutOfRange { t, horizon });
        }
        Ok(Self { t, horizon })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `t / n`, or 1 for a zero horizon.
    pub fn fraction(&self) -> f64 {
        if self.horizon == 0 {
            1.0
        } else {
            self.t as f64 / self.horizon as f64
        }
    }

    pub fn next(&self) -> Option<Timestep> {
        (self.t < self.horizon).then(|| Timestep {
            t: self.t + 1,
            horizon: self.horizon,
        })
    }

    /// Sampling steps exist only for `t < n`.
    pub fn require_step(&self) -> Result<()> {
        if self.t >= self.horizon {
            return Err(Error::TimeOutOfRange {
                t: self.t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    /// `0, 1, …, n`.
    pub fn all(horizon: usize) -> impl Iterator<Item = Timestep> {
        (0..=horizon).map(move |t| Timestep { t, horizon })
    }
}

/// Mixture coefficients `κ_t^{i,j}` of a conditional path.
pub trait Scheduler: Send + Sync {
    fn components(&self) -> usize;
    fn kappa(&self, t: Timestep, position: usize, component: usize) -> f64;

    /// Tolerance applied when validating `Σ_j κ = 1`. User-provided
    /// schedulers get the looser input tolerance.
    fn tolerance(&self) -> f64 {
        INPUT_TOL
    }
}

/// Two components: `κ^0 = t/n` on component 0 and `κ^1 = 1 − t/n` on
/// component 1, identical at every position.
#[derive(Clone, Copy, Debug, Default)]
pub struct LinearScheduler;

impl Scheduler for LinearScheduler {
    fn components(&self) -> usize {
        2
    }

    fn kappa(&self, t: Timestep, _position: usize, component: usize) -> f64 {
        let s = t.fraction();
        if component == 0 {
            s
        } else {
            1.0 - s
        }
    }

    fn tolerance(&self) -> f64 {
        INTERNAL_TOL
    }
}

type KappaFn = dyn Fn(Timestep, usize, usize) -> f64 + Send + Sync;

/// Scheduler backed by a closure `(t, position, component) → κ`.
pub struct FnScheduler {
    components: usize,
    kappa: Box<KappaFn>,
}

impl FnScheduler {
    pub fn new(
        components: usize,
        kappa: impl Fn(Timestep, usize, usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            components,
            kappa: Box::new(kappa),
        }
    }
}

impl Scheduler for FnScheduler {
    fn components(&self) -> usize {
        self.components
    }

    fn kappa(&self, t: Timestep, position: usize, component: usize) -> f64 {
        (self.kappa)(t, position, component)
    }
}

type ComponentFn = dyn Fn(usize, &TokenSeq, &TokenSeq) -> Vec<f64> + Send + Sync;

/// A per-position conditional PMF `w^j(x^i | x0, x1)`.
#[derive(Clone)]
pub enum Component {
    /// `δ_{x0^i}`
    Source,
    /// `δ_{x1^i}`
    Target,
    /// Uniform over the vocabulary.
    Uniform,
    /// Arbitrary dense PMF `(position, x0, x1) → [d]`.
    Custom(Arc<ComponentFn>),
}

impl fmt::Debug for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Source => write!(f, "Source"),
            Component::Target => write!(f, "Target"),
            Component::Uniform => write!(f, "Uniform"),
            Component::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Component {
    fn prob(
        &self,
        vocab: Vocab,
        position: usize,
        token: Token,
        x0: &TokenSeq,
        x1: &TokenSeq,
    ) -> f64 {
        match self {
            Component::Source => indicator(x0.get(position) == token),
            Component::Target => indicator(x1.get(position) == token),
            Component::Uniform => 1.0 / vocab.size() as f64,
            Component::Custom(f) => f(position, x0, x1)
                .get(token as usize)
                .copied()
                .unwrap_or(0.0),
        }
    }

    fn accumulate(
        &self,
        position: usize,
        x0: &TokenSeq,
        x1: &TokenSeq,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        match self {
            Component::Source => out[x0.get(position) as usize] += scale,
            Component::Target => out[x1.get(position) as usize] += scale,
            Component::Uniform => {
                let share = scale / out.len() as f64;
                out.iter_mut().for_each(|v| *v += share);
            }
            Component::Custom(f) => {
                let pmf = f(position, x0, x1);
                let sum: f64 = pmf.iter().sum();
                if pmf.len() != out.len()
                    || (sum - 1.0).abs() > INTERNAL_TOL
                    || pmf.iter().any(|&p| p < 0.0)
                {
                    return Err(Error::ComponentInvalid {
                        component: usize::MAX,
                        position,
                        sum,
                    });
                }
                out.iter_mut().zip(pmf).for_each(|(o, p)| *o += scale * p);
            }
        }
        Ok(())
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Factorized conditional path
/// `p_t(x | x0, x1) = Π_i Σ_j κ_t^{i,j} w^j(x^i | x0, x1)`.
#[derive(Clone)]
pub struct ConditionalPath {
    vocab: Vocab,
    components: Vec<Component>,
    scheduler: Arc<dyn Scheduler>,
}

impl fmt::Debug for ConditionalPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConditionalPath")
            .field("vocab", &self.vocab)
            .field("components", &self.components)
            .finish_non_exhaustive()
    }
}

impl ConditionalPath {
    pub fn new(
        vocab: Vocab,
        components: Vec<Component>,
        scheduler: Arc<dyn Scheduler>,
    ) -> Result<Self> {
        if components.len() != scheduler.components() {
            return Err(Error::DimensionMismatch(format!(
                "{} path components but scheduler has {}",
                components.len(),
                scheduler.components()
            )));
        }
        Ok(Self {
            vocab,
            components,
            scheduler,
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    /// Scheduler coefficients at `(t, position)`, validated.
    fn kappas(&self, t: Timestep, position: usize) -> Result<Vec<f64>> {
        let tol = self.scheduler.tolerance();
        let kappas: Vec<f64> = (0..self.components.len())
            .map(|j| self.scheduler.kappa(t, position, j))
            .collect();
        if let Some(k) = kappas.iter().find(|&&k| k < -INTERNAL_TOL) {
            return Err(Error::SchedulerInvalid {
                t: t.t(),
                position,
                reason: format!("negative coefficient {k}"),
            });
        }
        let sum: f64 = kappas.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::SchedulerInvalid {
                t: t.t(),
                position,
                reason: format!("coefficients sum to {sum}"),
            });
        }
        Ok(kappas)
    }

    /// Dense PMF `p_t(· | x0, x1)` at one position.
    pub fn position_pmf(
        &self,
        t: Timestep,
        position: usize,
        x0: &TokenSeq,
        x1: &TokenSeq,
    ) -> Result<Vec<f64>> {
        let kappas = self.kappas(t, position)?;
        let mut out = vec![0.0; self.vocab.size()];
        for (j, (component, kappa)) in self.components.iter().zip(kappas).enumerate() {
            if kappa != 0.0 {
                component
                    .accumulate(position, x0, x1, kappa, &mut out)
                    .map_err(|e| match e {
                        Error::ComponentInvalid { position, sum, .. } => Error::ComponentInvalid {
                            component: j,
                            position,
                            sum,
                        },
                        e => e,
                    })?;
            }
        }
        Ok(out)
    }

    /// `p_t(z | x0, x1)` at a single state.
    pub fn prob(&self, t: Timestep, z: &TokenSeq, x0: &TokenSeq, x1: &TokenSeq) -> Result<f64> {
        let mut p = 1.0;
        for i in 0..z.len() {
            let kappas = self.kappas(t, i)?;
            let factor: f64 = self
                .components
                .iter()
                .zip(kappas)
                .filter(|(_, k)| *k != 0.0)
                .map(|(c, k)| k * c.prob(self.vocab, i, z.get(i), x0, x1))
                .sum();
            p *= factor;
            if p == 0.0 {
                break;
            }
        }
        Ok(p)
    }
}

/// Product of independent per-position factors, each a sparse list of
/// `(token, mass)`. Refuses outputs larger than the enumeration bound.
fn product_table(factors: &[Vec<(Token, f64)>], scale: f64) -> Result<BTreeMap<TokenSeq, f64>> {
    let states: f64 = factors.iter().map(|f| f.len() as f64).product();
    if states > ENUMERATION_LIMIT as f64 {
        return Err(Error::InstanceTooLarge {
            states,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut partial: Vec<(Vec<Token>, f64)> = vec![(Vec::with_capacity(factors.len()), scale)];
    for factor in factors {
        let mut next = Vec::with_capacity(partial.len() * factor.len());
        for (prefix, mass) in &partial {
            for &(token, m) in factor {
                let mut seq = prefix.clone();
                seq.push(token);
                next.push((seq, mass * m));
            }
        }
        partial = next;
    }
    let mut out = BTreeMap::new();
    for (seq, mass) in partial {
        *out.entry(TokenSeq(seq)).or_insert(0.0) += mass;
    }
    Ok(out)
}

fn sparse(pmf: &[f64]) -> Vec<(Token, f64)> {
    pmf.iter()
        .enumerate()
        .filter(|(_, &m)| m != 0.0)
        .map(|(a, &m)| (a as Token, m))
        .collect()
}

/// Conditional path `p_t(· | x0, x1)` as a full table.
pub fn conditional_path_eval(
    path: &ConditionalPath,
    t: Timestep,
    x0: &TokenSeq,
    x1: &TokenSeq,
) -> Result<DistTable> {
    if x0.len() != x1.len() {
        return Err(Error::LengthMismatch {
            expected: x0.len(),
            got: x1.len(),
        });
    }
    let factors = (0..x0.len())
        .map(|i| path.position_pmf(t, i, x0, x1).map(|pmf| sparse(&pmf)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DistTable::from_accumulator(product_table(&factors, 1.0)?))
}

/// Marginal path `p_t(x) = Σ_{(x0,x1)} p_t(x | x0, x1) π(x0, x1)`.
pub fn marginal_path_eval(
    path: &ConditionalPath,
    coupling: &Coupling,
    t: Timestep,
) -> Result<DistTable> {
    let mut acc = BTreeMap::new();
    for pair in coupling.pairs() {
        if pair.weight == 0.0 {
            continue;
        }
        let cond = conditional_path_eval(path, t, &pair.source, &pair.target)?;
        for (seq, m) in cond.iter() {
            *acc.entry(seq.clone()).or_insert(0.0) += m * pair.weight;
        }
    }
    Ok(DistTable::from_accumulator(acc))
}

/// Rates `u_t^i(a, z)` for all positions `i` and tokens `a` at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocitySlice {
    positions: usize,
    vocab_size: usize,
    rates: Vec<f64>,
}

impl VelocitySlice {
    pub fn zeros(positions: usize, vocab_size: usize) -> Self {
        Self {
            positions,
            vocab_size,
            rates: vec![0.0; positions * vocab_size],
        }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn get(&self, position: usize, token: Token) -> f64 {
        self.rates[position * self.vocab_size + token as usize]
    }

    pub fn set(&mut self, position: usize, token: Token, rate: f64) {
        self.rates[position * self.vocab_size + token as usize] = rate;
    }

    pub fn add(&mut self, position: usize, token: Token, rate: f64) {
        self.rates[position * self.vocab_size + token as usize] += rate;
    }

    pub fn row(&self, position: usize) -> &[f64] {
        &self.rates[position * self.vocab_size..(position + 1) * self.vocab_size]
    }

    fn same_shape(&self, other: &VelocitySlice) -> Result<()> {
        if self.positions != other.positions || self.vocab_size != other.vocab_size {
            return Err(Error::DimensionMismatch(format!(
                "velocity slices {}x{} vs {}x{}",
                self.positions, self.vocab_size, other.positions, other.vocab_size
            )));
        }
        Ok(())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &VelocitySlice) -> Result<()> {
        self.same_shape(other)?;
        self.rates
            .iter_mut()
            .zip(&other.rates)
            .for_each(|(a, b)| *a += scale * b);
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.rates.iter_mut().for_each(|r| *r *= factor);
    }

    pub fn linf_distance(&self, other: &VelocitySlice) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .rates
            .iter()
            .zip(&other.rates)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Positions with some `|rate| > tol`, 0-based.
    pub fn active_positions(&self, tol: f64) -> Vec<usize> {
        (0..self.positions)
            .filter(|&i| self.row(i).iter().any(|r| r.abs() > tol))
            .collect()
    }
}

/// A probability velocity `u_t^i(a, z)` queried one state at a time.
pub trait VelocityField {
    fn slice(&self, t: Timestep, z: &TokenSeq) -> Result<VelocitySlice>;

    fn rate(&self, t: Timestep, position: usize, token: Token, z: &TokenSeq) -> Result<f64> {
        Ok(self.slice(t, z)?.get(position, token))
    }
}

impl<F> VelocityField for F
where
    F: Fn(Timestep, &TokenSeq) -> VelocitySlice,
{
    fn slice(&self, t: Timestep, z: &TokenSeq) -> Result<VelocitySlice> {
        Ok(self(t, z))
    }
}

/// `u ≡ 0`.
#[derive(Clone, Copy, Debug)]
pub struct ZeroVelocity {
    pub positions: usize,
    pub vocab_size: usize,
}

impl VelocityField for ZeroVelocity {
    fn slice(&self, _t: Timestep, _z: &TokenSeq) -> Result<VelocitySlice> {
        Ok(VelocitySlice::zeros(self.positions, self.vocab_size))
    }
}

/// Velocity tabulated on a finite set of states, zero elsewhere.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TabulatedVelocity {
    positions: usize,
    vocab_size: usize,
    slices: BTreeMap<TokenSeq, VelocitySlice>,
}

impl TabulatedVelocity {
    pub fn new(positions: usize, vocab_size: usize) -> Self {
        Self {
            positions,
            vocab_size,
            slices: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, z: TokenSeq, slice: VelocitySlice) {
        self.slices.insert(z, slice);
    }

    pub fn get(&self, z: &TokenSeq) -> Option<&VelocitySlice> {
        self.slices.get(z)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TokenSeq, &VelocitySlice)> {
        self.slices.iter()
    }

    pub fn states(&self) -> impl Iterator<Item = &TokenSeq> {
        self.slices.keys()
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

impl VelocityField for TabulatedVelocity {
    fn slice(&self, _t: Timestep, z: &TokenSeq) -> Result<VelocitySlice> {
        Ok(self
            .slices
            .get(z)
            .cloned()
            .unwrap_or_else(|| VelocitySlice::zeros(self.positions, self.vocab_size)))
    }
}

/// Conditional velocity `u_t^i(a, z | x0, x1)`.
pub trait ConditionalVelocity {
    fn slice(
        &self,
        t: Timestep,
        z: &TokenSeq,
        x0: &TokenSeq,
        x1: &TokenSeq,
    ) -> Result<VelocitySlice>;
}

impl<F> ConditionalVelocity for F
where
    F: Fn(Timestep, &TokenSeq, &TokenSeq, &TokenSeq) -> VelocitySlice,
{
    fn slice(
        &self,
        t: Timestep,
        z: &TokenSeq,
        x0: &TokenSeq,
        x1: &TokenSeq,
    ) -> Result<VelocitySlice> {
        Ok(self(t, z, x0, x1))
    }
}

/// What a velocity got wrong at one `(state, position)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    /// `Σ_a u^i(a, z) ≠ 0`
    RowSum { sum: f64 },
    /// `u^i(z^i, z) ∉ [−1, 0]`
    StayRate { rate: f64 },
    /// `u^i(a, z) ∉ [0, 1]` for `a ≠ z^i`
    JumpRate { token: Token, rate: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub state: TokenSeq,
    pub position: usize,
    pub kind: ViolationKind,
}

/// Checks the per-position conditions that make `δ_{z^i} + u^i(·, z)` a PMF.
/// Returns every violation found; empty means valid.
pub fn check_velocity_valid<'a>(
    u: &dyn VelocityField,
    t: Timestep,
    states: impl IntoIterator<Item = &'a TokenSeq>,
) -> Result<Vec<Violation>> {
    let mut violations = Vec::new();
    for z in states {
        let slice = u.slice(t, z)?;
        for i in 0..z.len() {
            let row = slice.row(i);
            let sum: f64 = row.iter().sum();
            if sum.abs() > VELOCITY_TOL {
                violations.push(Violation {
                    state: z.clone(),
                    position: i,
                    kind: ViolationKind::RowSum { sum },
                });
            }
            for (a, &rate) in row.iter().enumerate() {
                let a = a as Token;
                let (lo, hi) = if a == z.get(i) {
                    (-1.0, 0.0)
                } else {
                    (0.0, 1.0)
                };
                if rate < lo - VELOCITY_TOL || rate > hi + VELOCITY_TOL {
                    let kind = if a == z.get(i) {
                        ViolationKind::StayRate { rate }
                    } else {
                        ViolationKind::JumpRate { token: a, rate }
                    };
                    violations.push(Violation {
                        state: z.clone(),
                        position: i,
                        kind,
                    });
                }
            }
        }
    }
    Ok(violations)
}

fn step_factors(slice: &VelocitySlice, z: &TokenSeq) -> Result<Vec<Vec<(Token, f64)>>> {
    (0..z.len())
        .map(|i| {
            let mut factor = Vec::new();
            for (a, &rate) in slice.row(i).iter().enumerate() {
                let mass = rate + indicator(a as Token == z.get(i));
                if mass < -VELOCITY_TOL {
                    return Err(Error::InvalidVelocity { position: i, mass });
                }
                if mass > 0.0 {
                    factor.push((a as Token, mass));
                }
            }
            Ok(factor)
        })
        .collect()
}

/// Distribution of `X_{t+1}` given `X_t = z`: the product over positions of
/// `δ_{z^i}(·) + u_t^i(·, z)`.
pub fn step_kernel(u: &dyn VelocityField, t: Timestep, z: &TokenSeq) -> Result<DistTable> {
    t.require_step()?;
    let slice = u.slice(t, z)?;
    let factors = step_factors(&slice, z)?;
    Ok(DistTable::from_accumulator(product_table(&factors, 1.0)?))
}

/// `Σ_z p_t(z) · step_kernel(u, t, z)`.
pub fn push_forward(p_t: &DistTable, u: &dyn VelocityField, t: Timestep) -> Result<DistTable> {
    t.require_step()?;
    let mut acc = BTreeMap::new();
    for (z, mass) in p_t.iter() {
        let slice = u.slice(t, z)?;
        let factors = step_factors(&slice, z)?;
        for (x, m) in product_table(&factors, mass)? {
            *acc.entry(x).or_insert(0.0) += m;
        }
    }
    Ok(DistTable::from_accumulator(acc))
}

/// `div_x(p_t u_t) = −Σ_z p_t(z) Σ_i δ_z(x^{ī}) u_t^i(x^i, z)` at one state.
///
/// Only states `z` that differ from `x` in at most one position contribute,
/// so the sum runs over `x` with one position rewritten. The velocity is
/// queried only on states with mass at least [`ZERO_MASS`].
pub fn divergence(
    p_t: &DistTable,
    u: &dyn VelocityField,
    t: Timestep,
    x: &TokenSeq,
) -> Result<f64> {
    let Some(probe) = p_t.support().next() else {
        return Ok(0.0);
    };
    let vocab_size = u.slice(t, probe)?.vocab_size();
    let mut total = 0.0;
    // z = x: every position contributes its stay rate.
    let self_mass = p_t.mass(x);
    if self_mass >= ZERO_MASS {
        let slice = u.slice(t, x)?;
        total += self_mass * (0..x.len()).map(|i| slice.get(i, x.get(i))).sum::<f64>();
    }
    for i in 0..x.len() {
        for b in (0..vocab_size as Token).filter(|&b| b != x.get(i)) {
            let z = x.with_token(i, b);
            let mass = p_t.mass(&z);
            if mass >= ZERO_MASS {
                total += mass * u.rate(t, i, x.get(i), &z)?;
            }
        }
    }
    Ok(-total)
}

/// Divergence at every state where it can be nonzero, computed by
/// scattering each supported state's rates.
pub fn divergence_table(
    p_t: &DistTable,
    u: &dyn VelocityField,
    t: Timestep,
) -> Result<BTreeMap<TokenSeq, f64>> {
    let mut acc: BTreeMap<TokenSeq, f64> = BTreeMap::new();
    for z in p_t.support() {
        let mass = p_t.mass(z);
        let slice = u.slice(t, z)?;
        for i in 0..z.len() {
            for (a, &rate) in slice.row(i).iter().enumerate() {
                if rate == 0.0 {
                    continue;
                }
                let x = if a as Token == z.get(i) {
                    z.clone()
                } else {
                    z.with_token(i, a as Token)
                };
                *acc.entry(x).or_insert(0.0) -= mass * rate;
            }
        }
    }
    Ok(acc)
}

/// `max_x |p_{t+1}(x) − p_t(x) + div_x(p_t u_t)|` over every state where
/// any of the three terms is nonzero.
pub fn continuity_residual(
    p_t: &DistTable,
    p_next: &DistTable,
    u: &dyn VelocityField,
    t: Timestep,
) -> Result<f64> {
    t.require_step()?;
    let mut terms = divergence_table(p_t, u, t)?;
    for (x, m) in p_next.iter() {
        *terms.entry(x.clone()).or_insert(0.0) += m;
    }
    for (x, m) in p_t.iter() {
        *terms.entry(x.clone()).or_insert(0.0) -= m;
    }
    Ok(terms.values().map(|r| r.abs()).fold(0.0, f64::max))
}

/// Marginal generating velocity at `z`:
/// `u_t^i(a, z) = Σ_{(x0,x1)} u_t^i(a, z | x0, x1) p_t(z | x0, x1) π(x0, x1) / p_t(z)`.
pub fn marginal_velocity(
    path: &ConditionalPath,
    coupling: &Coupling,
    cond_u: &dyn ConditionalVelocity,
    t: Timestep,
    z: &TokenSeq,
) -> Result<VelocitySlice> {
    let mut numer = VelocitySlice::zeros(z.len(), path.vocab().size());
    let mut mass = 0.0;
    for pair in coupling.pairs() {
        let w = path.prob(t, z, &pair.source, &pair.target)? * pair.weight;
        if w == 0.0 {
            continue;
        }
        mass += w;
        numer.add_scaled(w, &cond_u.slice(t, z, &pair.source, &pair.target)?)?;
    }
    if mass < ZERO_MASS {
        return Err(Error::ZeroMassState { mass });
    }
    numer.scale(1.0 / mass);
    Ok(numer)
}

/// Marginal velocity tabulated over every state with `p_t(z) ≥ ZERO_MASS`,
/// built in one pass over the coupling. Also returns `p_t`.
pub fn marginal_velocity_field(
    path: &ConditionalPath,
    coupling: &Coupling,
    cond_u: &dyn ConditionalVelocity,
    t: Timestep,
) -> Result<(TabulatedVelocity, DistTable)> {
    let n = coupling.seq_len();
    let d = path.vocab().size();
    let mut numer: BTreeMap<TokenSeq, (f64, VelocitySlice)> = BTreeMap::new();
    for pair in coupling.pairs() {
        if pair.weight == 0.0 {
            continue;
        }
        let cond = conditional_path_eval(path, t, &pair.source, &pair.target)?;
        for (z, m) in cond.iter() {
            let w = m * pair.weight;
            let entry = numer
                .entry(z.clone())
                .or_insert_with(|| (0.0, VelocitySlice::zeros(n, d)));
            entry.0 += w;
            if t.t() < t.horizon() {
                entry
                    .1
                    .add_scaled(w, &cond_u.slice(t, z, &pair.source, &pair.target)?)?;
            }
        }
    }
    let mut field = TabulatedVelocity::new(n, d);
    let mut marginal = BTreeMap::new();
    for (z, (mass, mut slice)) in numer {
        if mass >= ZERO_MASS {
            slice.scale(1.0 / mass);
            field.insert(z.clone(), slice);
        }
        marginal.insert(z, mass);
    }
    Ok((field, DistTable::from_accumulator(marginal)))
}
