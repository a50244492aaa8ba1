//! Autoregressive generation as a discrete-time flow.
//!
//! The source of each pair keeps the first `P` tokens of the target and masks
//! the rest. After step `t` exactly `P + t` tokens are revealed, so every
//! conditional path is a point mass on `x_t` and the conditional velocity at
//! step `t` acts only on the reveal position `P + t + 1` (1-based). Position
//! `i` is revealed at the end of step `t = i − P − 1`, i.e. it is visible from
//! time `t = i − P` on.
//!
//! Reported positions are 1-based.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dfm::{
    check_enumeration_bound, check_velocity_valid, conditional_path_eval, continuity_residual,
    marginal_velocity_field, push_forward, Component, ConditionalPath, ConditionalVelocity,
    Coupling, CouplingPair, DistTable, Scheduler, Timestep, Token, TokenSeq, VelocityField,
    VelocitySlice, Vocab, INTERNAL_TOL,
};
use crate::error::{Error, Result};

/// Threshold below which a rate counts as zero for sparsity checks.
pub const SPARSITY_TOL: f64 = 1e-15;

/// Reveal scheduler: component 0 is `δ_{x1}`, component 1 is `δ_{x0}`, and
/// position `i` (0-based) follows the target once `i < P + t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArScheduler {
    prefix_len: usize,
}

impl ArScheduler {
    pub fn new(prefix_len: usize) -> Self {
        Self { prefix_len }
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn revealed(&self, t: Timestep, position: usize) -> bool {
        position < self.prefix_len + t.t()
    }
}

impl Scheduler for ArScheduler {
    fn components(&self) -> usize {
        2
    }

    fn kappa(&self, t: Timestep, position: usize, component: usize) -> f64 {
        let k = if self.revealed(t, position) { 1.0 } else { 0.0 };
        if component == 0 {
            k
        } else {
            1.0 - k
        }
    }

    fn tolerance(&self) -> f64 {
        INTERNAL_TOL
    }
}

/// Conditional path `κ_t^i δ_{x1}(x^i) + (1 − κ_t^i) δ_{x0}(x^i)` with the
/// reveal scheduler.
pub fn ar_path(vocab: Vocab, prefix_len: usize) -> ConditionalPath {
    ConditionalPath::new(
        vocab,
        vec![Component::Target, Component::Source],
        Arc::new(ArScheduler::new(prefix_len)),
    )
    .expect("two components match the reveal scheduler")
}

/// Number of generation steps `n = N − P`.
pub fn horizon(len: usize, prefix_len: usize) -> Result<usize> {
    len.checked_sub(prefix_len).ok_or(Error::PrefixTooLong {
        prefix: prefix_len,
        len,
    })
}

/// `(x1^1, …, x1^P, m, …, m)`.
pub fn masked_source(x1: &TokenSeq, prefix_len: usize, mask: Token) -> TokenSeq {
    TokenSeq::new(
        x1.tokens()
            .iter()
            .enumerate()
            .map(|(i, &tok)| if i < prefix_len { tok } else { mask })
            .collect(),
    )
}

/// Pairs every target sequence with its masked source, weighted by `q`.
pub fn build_mask_coupling(q: &DistTable, vocab: Vocab, prefix_len: usize) -> Result<Coupling> {
    let len = q.seq_len().ok_or(Error::NotNormalized { total: 0.0 })?;
    horizon(len, prefix_len)?;
    let mut pairs = Vec::with_capacity(q.len());
    for (x1, mass) in q.iter() {
        vocab.check(x1)?;
        if x1.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                got: x1.len(),
            });
        }
        if x1.contains(vocab.mask()) {
            return Err(Error::MaskInTarget);
        }
        pairs.push(CouplingPair {
            source: masked_source(x1, prefix_len, vocab.mask()),
            target: x1.clone(),
            weight: mass,
        });
    }
    Coupling::new(pairs)
}

/// The single state `x_t` of the conditional path: `x0` with the first
/// `P + t` positions taken from `x1`.
pub fn ar_state(x0: &TokenSeq, x1: &TokenSeq, prefix_len: usize, t: usize) -> TokenSeq {
    TokenSeq::new(
        x0.tokens()
            .iter()
            .zip(x1.tokens())
            .enumerate()
            .map(|(i, (&a, &b))| if i < prefix_len + t { b } else { a })
            .collect(),
    )
}

/// `p_t(· | x0, x1) = δ_{x_t}` for `0 ≤ t ≤ N − P`.
pub fn ar_conditional_path(
    x0: &TokenSeq,
    x1: &TokenSeq,
    prefix_len: usize,
    t: usize,
) -> Result<DistTable> {
    let n = horizon(x1.len(), prefix_len)?;
    if t > n {
        return Err(Error::TimeOutOfRange { t, horizon: n });
    }
    Ok(DistTable::delta(ar_state(x0, x1, prefix_len, t)))
}

/// Conditional velocity: `δ_{x_{t+1}}(x^i) − δ_{x_t}(x^i)` when `z = x_t`,
/// zero otherwise. Only the reveal position `P + t + 1` can be nonzero.
#[derive(Clone, Copy, Debug)]
pub struct ArConditionalVelocity {
    vocab: Vocab,
    prefix_len: usize,
}

impl ArConditionalVelocity {
    pub fn new(vocab: Vocab, prefix_len: usize) -> Self {
        Self { vocab, prefix_len }
    }
}

impl ConditionalVelocity for ArConditionalVelocity {
    fn slice(
        &self,
        t: Timestep,
        z: &TokenSeq,
        x0: &TokenSeq,
        x1: &TokenSeq,
    ) -> Result<VelocitySlice> {
        t.require_step()?;
        let mut slice = VelocitySlice::zeros(z.len(), self.vocab.size());
        let current = ar_state(x0, x1, self.prefix_len, t.t());
        if *z != current {
            return Ok(slice);
        }
        let reveal = self.prefix_len + t.t();
        let next = x1.get(reveal);
        if next != current.get(reveal) {
            slice.add(reveal, next, 1.0);
            slice.add(reveal, current.get(reveal), -1.0);
        }
        Ok(slice)
    }
}

/// Pointwise conditional velocity `u_t^i(token, z | x0, x1)` with a 1-based
/// `position`.
#[allow(clippy::too_many_arguments)]
pub fn ar_conditional_velocity(
    vocab: Vocab,
    x0: &TokenSeq,
    x1: &TokenSeq,
    prefix_len: usize,
    t: usize,
    token: Token,
    position: usize,
    z: &TokenSeq,
) -> Result<f64> {
    let n = horizon(x1.len(), prefix_len)?;
    if t >= n {
        return Err(Error::TimeOutOfRange { t, horizon: n });
    }
    let step = Timestep::new(t, n)?;
    let slice = ArConditionalVelocity::new(vocab, prefix_len).slice(step, z, x0, x1)?;
    Ok(slice.get(position - 1, token))
}

/// The unique active position (1-based) of `u_t` over `states`, `None` when
/// `u_t` vanishes there, or `NotOneSparse` when several positions are active.
pub fn check_one_sparse<'a>(
    u: &dyn VelocityField,
    t: Timestep,
    states: impl IntoIterator<Item = &'a TokenSeq>,
) -> Result<Option<usize>> {
    let mut active: Vec<usize> = Vec::new();
    for z in states {
        for i in u.slice(t, z)?.active_positions(SPARSITY_TOL) {
            if !active.contains(&(i + 1)) {
                active.push(i + 1);
            }
        }
    }
    active.sort_unstable();
    match active.len() {
        0 => Ok(None),
        1 => Ok(Some(active[0])),
        _ => Err(Error::NotOneSparse { positions: active }),
    }
}

/// Outcome of verifying that the AR velocity generates its path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArGenerationReport {
    pub prefix_len: usize,
    pub horizon: usize,
    /// Marginal continuity-equation residual per step `t < n`.
    pub ce_residuals: Vec<f64>,
    /// Largest conditional CE residual over all pairs and steps.
    pub conditional_ce_max: f64,
    /// `‖push_forward(p_t) − p_{t+1}‖_∞` per step.
    pub push_forward_gaps: Vec<f64>,
    /// `‖(push_forward ∘ …)(p_0) − q‖_∞` after all steps.
    pub composed_gap: f64,
    /// Active position per step, 1-based.
    pub sparsity_positions: Vec<Option<usize>>,
    /// Total velocity validity violations on positive-mass states.
    pub velocity_violations: usize,
}

impl ArGenerationReport {
    pub fn max_residual(&self) -> f64 {
        self.ce_residuals
            .iter()
            .copied()
            .fold(self.conditional_ce_max, f64::max)
    }

    pub fn max_gap(&self) -> f64 {
        self.push_forward_gaps
            .iter()
            .copied()
            .fold(self.composed_gap, f64::max)
    }

    /// True when every step is active exactly at `P + t + 1`.
    pub fn sparsity_matches_reveal(&self) -> bool {
        self.sparsity_positions
            .iter()
            .enumerate()
            .all(|(t, pos)| *pos == Some(self.prefix_len + t + 1))
    }
}

/// Builds the mask coupling for `q`, its marginal path and marginal velocity,
/// and checks the continuity equation, one-step generation, the composed
/// chain and 1-sparsity at every step.
pub fn verify_ar_generation(
    q: &DistTable,
    vocab: Vocab,
    prefix_len: usize,
) -> Result<ArGenerationReport> {
    let len = q.seq_len().ok_or(Error::NotNormalized { total: 0.0 })?;
    check_enumeration_bound(vocab.size(), len)?;
    let n = horizon(len, prefix_len)?;
    let coupling = build_mask_coupling(q, vocab, prefix_len)?;
    let path = ar_path(vocab, prefix_len);
    let cond_u = ArConditionalVelocity::new(vocab, prefix_len);

    let mut fields = Vec::with_capacity(n + 1);
    for t in Timestep::all(n) {
        fields.push(marginal_velocity_field(&path, &coupling, &cond_u, t)?);
    }

    let mut report = ArGenerationReport {
        prefix_len,
        horizon: n,
        ce_residuals: Vec::with_capacity(n),
        conditional_ce_max: 0.0,
        push_forward_gaps: Vec::with_capacity(n),
        composed_gap: 0.0,
        sparsity_positions: Vec::with_capacity(n),
        velocity_violations: 0,
    };
    for t in Timestep::all(n).take(n) {
        let (field, p_t) = &fields[t.t()];
        let p_next = &fields[t.t() + 1].1;
        report
            .ce_residuals
            .push(continuity_residual(p_t, p_next, field, t)?);
        report
            .push_forward_gaps
            .push(push_forward(p_t, field, t)?.linf_distance(p_next));
        report
            .sparsity_positions
            .push(check_one_sparse(field, t, p_t.support())?);
        report.velocity_violations += check_velocity_valid(field, t, p_t.support())?.len();
    }

    for pair in coupling.pairs() {
        let per_pair = |t: Timestep, z: &TokenSeq| {
            cond_u
                .slice(t, z, &pair.source, &pair.target)
                .expect("t < n inside the step loop")
        };
        for t in Timestep::all(n).take(n) {
            let here = conditional_path_eval(&path, t, &pair.source, &pair.target)?;
            let next =
                conditional_path_eval(&path, t.next().expect("t < n"), &pair.source, &pair.target)?;
            let r = continuity_residual(&here, &next, &per_pair, t)?;
            report.conditional_ce_max = report.conditional_ce_max.max(r);
        }
    }

    let mut current = fields[0].1.clone();
    for t in Timestep::all(n).take(n) {
        current = push_forward(&current, &fields[t.t()].0, t)?;
    }
    report.composed_gap = current.linf_distance(q);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfm::{marginal_path_eval, marginal_velocity, ZeroVelocity};

    const A: Token = 0;
    const B: Token = 1;
    const M: Token = 2;

    fn vocab() -> Vocab {
        Vocab::with_trailing_mask(3).unwrap()
    }

    fn seq(tokens: &[Token]) -> TokenSeq {
        TokenSeq::new(tokens.to_vec())
    }

    #[test]
    fn mask_coupling_examples() {
        let q = DistTable::delta(seq(&[A, B]));
        let c = build_mask_coupling(&q, vocab(), 0).unwrap();
        assert_eq!(c.pairs().len(), 1);
        assert_eq!(c.pairs()[0].source, seq(&[M, M]));
        assert_eq!(c.pairs()[0].target, seq(&[A, B]));
        assert_eq!(c.pairs()[0].weight, 1.0);

        let c = build_mask_coupling(&q, vocab(), 2).unwrap();
        assert_eq!(c.pairs()[0].source, seq(&[A, B]));

        let q = DistTable::uniform([seq(&[A, A]), seq(&[A, B])]).unwrap();
        let c = build_mask_coupling(&q, vocab(), 1).unwrap();
        assert_eq!(c.pairs().len(), 2);
        for p in c.pairs() {
            assert_eq!(p.source, seq(&[A, M]));
            assert_eq!(p.weight, 0.5);
        }

        assert!(matches!(
            build_mask_coupling(&q, vocab(), 3),
            Err(Error::PrefixTooLong { .. })
        ));
        let masked = DistTable::delta(seq(&[A, M]));
        assert!(matches!(
            build_mask_coupling(&masked, vocab(), 0),
            Err(Error::MaskInTarget)
        ));
    }

    #[test]
    fn conditional_path_reveals_one_token_per_step() {
        let (x0, x1) = (seq(&[M, M]), seq(&[A, B]));
        assert_eq!(
            ar_conditional_path(&x0, &x1, 0, 0).unwrap(),
            DistTable::delta(seq(&[M, M]))
        );
        assert_eq!(
            ar_conditional_path(&x0, &x1, 0, 1).unwrap(),
            DistTable::delta(seq(&[A, M]))
        );
        assert_eq!(
            ar_conditional_path(&x0, &x1, 0, 2).unwrap(),
            DistTable::delta(seq(&[A, B]))
        );
        assert!(matches!(
            ar_conditional_path(&x0, &x1, 0, 3),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn scheduler_path_matches_degenerate_path() {
        let path = ar_path(vocab(), 1);
        let (x0, x1) = (seq(&[A, M, M]), seq(&[A, B, A]));
        for t in Timestep::all(2) {
            assert_eq!(
                conditional_path_eval(&path, t, &x0, &x1).unwrap(),
                ar_conditional_path(&x0, &x1, 1, t.t()).unwrap()
            );
        }
    }

    #[test]
    fn conditional_velocity_examples() {
        let (x0, x1) = (seq(&[M, M]), seq(&[A, B]));
        let at = |tok, pos, z: &TokenSeq| {
            ar_conditional_velocity(vocab(), &x0, &x1, 0, 0, tok, pos, z).unwrap()
        };
        let z0 = seq(&[M, M]);
        assert_eq!(at(A, 1, &z0), 1.0);
        assert_eq!(at(M, 1, &z0), -1.0);
        assert_eq!(at(B, 1, &z0), 0.0);
        for tok in [A, B, M] {
            assert_eq!(at(tok, 2, &z0), 0.0);
            assert_eq!(at(tok, 1, &seq(&[A, B])), 0.0);
            assert_eq!(at(tok, 2, &seq(&[A, B])), 0.0);
        }
        assert!(ar_conditional_velocity(vocab(), &x0, &x1, 0, 2, A, 1, &z0).is_err());
    }

    #[test]
    fn one_sparse_detection() {
        let t = Timestep::new(0, 2).unwrap();
        let states = [seq(&[M, M])];
        let zero = ZeroVelocity {
            positions: 2,
            vocab_size: 3,
        };
        assert_eq!(check_one_sparse(&zero, t, &states).unwrap(), None);
        let two = |_t: Timestep, z: &TokenSeq| {
            let mut s = VelocitySlice::zeros(2, 3);
            for i in 0..2 {
                s.set(i, A, 0.5);
                s.set(i, z.get(i), -0.5);
            }
            s
        };
        assert!(matches!(
            check_one_sparse(&two, t, &states),
            Err(Error::NotOneSparse { positions }) if positions == vec![1, 2]
        ));
    }

    #[test]
    fn deterministic_target_generates_exactly() {
        for p in 0..=3 {
            let q = DistTable::delta(seq(&[B, A, B]));
            let report = verify_ar_generation(&q, vocab(), p).unwrap();
            assert_eq!(report.max_residual(), 0.0);
            assert_eq!(report.max_gap(), 0.0);
            assert_eq!(report.horizon, 3 - p);
            assert!(report.sparsity_matches_reveal());
        }
    }

    #[test]
    fn uniform_target_generates_exactly() {
        let v = vocab();
        let support = crate::dfm::enumerate_sequences(&[A, B], 3).unwrap();
        let q = DistTable::uniform(support).unwrap();
        let report = verify_ar_generation(&q, v, 0).unwrap();
        assert!(report.max_residual() <= 1e-12);
        assert!(report.max_gap() <= 1e-12);
        assert_eq!(report.velocity_violations, 0);
        assert_eq!(report.sparsity_positions, vec![Some(1), Some(2), Some(3)]);
    }

    /// Brute-force `q(x^{j} = a | x^{<j} = prefix)`.
    fn next_token_oracle(q: &DistTable, prefix: &[Token], a: Token) -> f64 {
        let matches = |x: &TokenSeq| x.tokens()[..prefix.len()] == *prefix;
        let denom: f64 = q.iter().filter(|(x, _)| matches(x)).map(|(_, m)| m).sum();
        let numer: f64 = q
            .iter()
            .filter(|(x, _)| matches(x) && x.get(prefix.len()) == a)
            .map(|(_, m)| m)
            .sum();
        numer / denom
    }

    #[test]
    fn marginal_velocity_is_classical_next_token_conditional() {
        let v = Vocab::with_trailing_mask(4).unwrap();
        let weights = [3.0, 1.0, 0.0, 2.0, 5.0, 1.0, 1.0, 4.0, 2.0];
        let support = crate::dfm::enumerate_sequences(&[0, 1, 2], 2).unwrap();
        let q = DistTable::from_weights(support.into_iter().zip(weights)).unwrap();
        let coupling = build_mask_coupling(&q, v, 0).unwrap();
        let path = ar_path(v, 0);
        let cond = ArConditionalVelocity::new(v, 0);
        for t in Timestep::all(2).take(2) {
            let p_t = marginal_path_eval(&path, &coupling, t).unwrap();
            for z in p_t.support() {
                let u = marginal_velocity(&path, &coupling, &cond, t, z).unwrap();
                let prefix = &z.tokens()[..t.t()];
                for a in v.content_tokens() {
                    let expected = next_token_oracle(&q, prefix, a);
                    assert!((u.get(t.t(), a) - expected).abs() < 1e-14);
                }
                assert!((u.get(t.t(), v.mask()) + 1.0).abs() < 1e-14);
            }
        }
    }
}
