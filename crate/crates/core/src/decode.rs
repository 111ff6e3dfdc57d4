//! Block drafting and parallel verification for linear speculative decoding.
//!
//! A block of `gamma` tokens is drafted autoregressively from a (possibly
//! ensembled) draft distribution, then checked position by position against
//! the target:
//!
//! - stochastic mode keeps draft token `y` with probability `min(1, p(y)/q(y))`
//!   and on the first rejection resamples from `norm(max(0, p − q))`;
//! - greedy mode keeps the longest prefix agreeing with the target's argmax chain.
//!
//! Either way exactly one extra token follows the accepted prefix: the
//! correction on rejection, or a bonus token drawn from the target after a
//! fully accepted block.

use serde::{Deserialize, Serialize};

use crate::dist::{residual_distribution, sample, weighted_average, Distribution, Rng, WeightVector};
use crate::error::{Error, Result};
use crate::models::{Context, DraftSource, SequenceModel, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Stochastic,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub gamma: usize,
    pub mode: DecodeMode,
    pub max_new_tokens: usize,
    pub eos_token: Option<TokenId>,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            gamma: 5,
            mode: DecodeMode::Greedy,
            max_new_tokens: 128,
            eos_token: None,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::BadParams("gamma must be >= 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::BadParams("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// `gamma` drafted tokens together with every distribution that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftBlock {
    pub tokens: Vec<TokenId>,
    /// `q_t .. q_{t+γ−1}`, the distributions the tokens were drawn from.
    pub ensembled_dists: Vec<Distribution>,
    /// `per_source_dists[source][step]`.
    pub per_source_dists: Vec<Vec<Distribution>>,
    pub weight_used: WeightVector,
}

impl DraftBlock {
    pub fn gamma(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_sources(&self) -> usize {
        self.per_source_dists.len()
    }

    /// Source distributions at one drafted position, in source order.
    pub fn sources_at(&self, step: usize) -> Vec<Distribution> {
        self.per_source_dists.iter().map(|row| row[step].clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationResult {
    pub accepted_count: usize,
    /// Accepted prefix followed by exactly one correction or bonus token.
    pub emitted_tokens: Vec<TokenId>,
    /// Target distributions on the realized trajectory: one per accepted
    /// position plus the first rejected (or bonus) position.
    pub target_dists: Vec<Distribution>,
}

/// Drafts `gamma` tokens from the `w`-mixture of `sources`.
pub(crate) fn draft_mixture(
    sources: &[DraftSource],
    ctx: &Context,
    gamma: usize,
    w: &WeightVector,
    mode: DecodeMode,
    rng: &mut Rng,
) -> Result<DraftBlock> {
    if sources.is_empty() {
        return Err(Error::BadParams("need at least one draft source".into()));
    }
    if w.len() != sources.len() {
        return Err(Error::DimensionMismatch {
            expected: sources.len(),
            got: w.len(),
        });
    }
    let vocab = sources[0].vocab_size();
    if let Some(s) = sources.iter().find(|s| s.vocab_size() != vocab) {
        return Err(Error::DimensionMismatch {
            expected: vocab,
            got: s.vocab_size(),
        });
    }
    let mut work = ctx.clone();
    let mut tokens = Vec::with_capacity(gamma);
    let mut ensembled = Vec::with_capacity(gamma);
    let mut per_source: Vec<Vec<Distribution>> = vec![Vec::with_capacity(gamma); sources.len()];
    for _ in 0..gamma {
        let step: Vec<Distribution> = sources.iter().map(|s| s.next_distribution(&work)).collect();
        let q = weighted_average(&step, w)?;
        let y = match mode {
            DecodeMode::Greedy => q.argmax(),
            DecodeMode::Stochastic => sample(&q, rng),
        };
        for (row, d) in per_source.iter_mut().zip(step) {
            row.push(d);
        }
        tokens.push(y);
        ensembled.push(q);
        work.push(y);
    }
    Ok(DraftBlock {
        tokens,
        ensembled_dists: ensembled,
        per_source_dists: per_source,
        weight_used: w.clone(),
    })
}

/// Single-source drafting.
pub fn draft_block(
    source: &DraftSource,
    ctx: &Context,
    gamma: usize,
    mode: DecodeMode,
    rng: &mut Rng,
) -> DraftBlock {
    draft_mixture(
        std::slice::from_ref(source),
        ctx,
        gamma,
        &WeightVector::uniform(1),
        mode,
        rng,
    )
    .expect("single source with unit weight is always consistent")
}

/// Rejection-sampling verification. Consumes one uniform per checked position
/// plus one for the correction or bonus draw.
pub fn verify_stochastic(
    target: &dyn SequenceModel,
    ctx: &Context,
    block: &DraftBlock,
    rng: &mut Rng,
) -> VerificationResult {
    let mut work = ctx.clone();
    let mut emitted = Vec::with_capacity(block.gamma() + 1);
    let mut target_dists = Vec::with_capacity(block.gamma() + 1);
    for (&y, q) in block.tokens.iter().zip(&block.ensembled_dists) {
        let p = target.next_distribution(&work);
        let u = rng.uniform();
        let (py, qy) = (p.prob(y), q.prob(y));
        if u * qy < py {
            emitted.push(y);
            target_dists.push(p);
            work.push(y);
            continue;
        }
        let fix = match residual_distribution(&p, q) {
            Ok(r) => sample(&r, rng),
            // reachable only through rounding when p and q agree to ~1e-12
            Err(_) => sample(&p, rng),
        };
        let accepted_count = emitted.len();
        emitted.push(fix);
        target_dists.push(p);
        return VerificationResult {
            accepted_count,
            emitted_tokens: emitted,
            target_dists,
        };
    }
    let p = target.next_distribution(&work);
    emitted.push(sample(&p, rng));
    target_dists.push(p);
    VerificationResult {
        accepted_count: block.gamma(),
        emitted_tokens: emitted,
        target_dists,
    }
}

/// Greedy verification: accept while the draft agrees with the target argmax.
pub fn verify_greedy(
    target: &dyn SequenceModel,
    ctx: &Context,
    block: &DraftBlock,
) -> VerificationResult {
    let mut work = ctx.clone();
    let mut emitted = Vec::with_capacity(block.gamma() + 1);
    let mut target_dists = Vec::with_capacity(block.gamma() + 1);
    for &y in &block.tokens {
        let p = target.next_distribution(&work);
        let best = p.argmax();
        target_dists.push(p);
        if best != y {
            let accepted_count = emitted.len();
            emitted.push(best);
            return VerificationResult {
                accepted_count,
                emitted_tokens: emitted,
                target_dists,
            };
        }
        emitted.push(y);
        work.push(y);
    }
    let p = target.next_distribution(&work);
    emitted.push(p.argmax());
    target_dists.push(p);
    VerificationResult {
        accepted_count: block.gamma(),
        emitted_tokens: emitted,
        target_dists,
    }
}

pub fn verify(
    target: &dyn SequenceModel,
    ctx: &Context,
    block: &DraftBlock,
    mode: DecodeMode,
    rng: &mut Rng,
) -> VerificationResult {
    match mode {
        DecodeMode::Greedy => verify_greedy(target, ctx, block),
        DecodeMode::Stochastic => verify_stochastic(target, ctx, block, rng),
    }
}
