//! Brute-force checkers for the decoding engine.
//!
//! Nothing in here calls the engine's verification code paths: the exact law
//! is evaluated directly from `(p, q)`, and the reference decoders are plain
//! autoregressive loops over the target model.

use std::collections::HashMap;
use std::fmt;

use crate::decode::{DecodeConfig, DecodeMode};
use crate::dist::{sample, Distribution, Rng};
use crate::error::{Error, Result};
use crate::models::{Context, DraftSource, SequenceModel, TokenId};
use crate::session::{run_session, Pipeline};
use crate::tabed::{SelectionCriterion, WeightPolicy, Window};

/// Default Monte-Carlo TVD threshold at `n = 100_000`.
pub const MC_TVD_THRESHOLD: f64 = 0.02;
/// Minimum number of Monte-Carlo draws.
pub const MC_MIN_SAMPLES: usize = 10_000;
/// Largest vocabulary the exhaustive greedy check enumerates.
pub const EXHAUSTIVE_MAX_VOCAB: usize = 4;

/// Exact output law of one verification step.
#[derive(Clone, Debug, PartialEq)]
pub struct LawTable {
    pub law: Distribution,
}

/// `law(y) = q(y)·min(1, p(y)/q(y)) + P(reject)·residual(y)`.
pub fn exact_step_law(p: &Distribution, q: &Distribution) -> Result<LawTable> {
    if p.vocab_size() != q.vocab_size() {
        return Err(Error::DimensionMismatch {
            expected: p.vocab_size(),
            got: q.vocab_size(),
        });
    }
    let pv = p.probs();
    let qv = q.probs();
    let keep: Vec<f64> = pv
        .iter()
        .zip(qv)
        .map(|(&py, &qy)| if qy > 0.0 { qy * (py / qy).min(1.0) } else { 0.0 })
        .collect();
    let reject: f64 = pv
        .iter()
        .zip(qv)
        .map(|(&py, &qy)| if qy > 0.0 { qy * (1.0 - (py / qy).min(1.0)) } else { 0.0 })
        .sum();
    let excess: Vec<f64> = pv.iter().zip(qv).map(|(&py, &qy)| (py - qy).max(0.0)).collect();
    let excess_total: f64 = excess.iter().sum();
    let law: Vec<f64> = keep
        .iter()
        .zip(&excess)
        .map(|(&k, &e)| if excess_total > 0.0 { k + reject * e / excess_total } else { k })
        .collect();
    Ok(LawTable {
        law: Distribution::new(law)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct McReport {
    pub n: usize,
    /// Largest per-position empirical TVD.
    pub tvd: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Compares per-position empirical marginals of two samplers.
///
/// Each closure receives the trial index and returns a token sequence; a
/// sequence shorter than another counts as an "absent" outcome at the
/// missing positions.
pub fn mc_equivalence<A, B>(mut sample_a: A, mut sample_b: B, n: usize, threshold: f64) -> Result<McReport>
where
    A: FnMut(usize) -> Vec<TokenId>,
    B: FnMut(usize) -> Vec<TokenId>,
{
    if n < MC_MIN_SAMPLES {
        return Err(Error::BadParams(format!("need at least {MC_MIN_SAMPLES} samples, got {n}")));
    }
    let draws_a: Vec<Vec<TokenId>> = (0..n).map(&mut sample_a).collect();
    let draws_b: Vec<Vec<TokenId>> = (0..n).map(&mut sample_b).collect();
    let width = draws_a.iter().chain(&draws_b).map(Vec::len).max().unwrap_or(0);
    let tally = |draws: &[Vec<TokenId>]| -> Vec<HashMap<Option<TokenId>, usize>> {
        let mut counts = vec![HashMap::new(); width];
        for seq in draws {
            for (pos, slot) in counts.iter_mut().enumerate() {
                *slot.entry(seq.get(pos).copied()).or_default() += 1;
            }
        }
        counts
    };
    let a = tally(&draws_a);
    let b = tally(&draws_b);
    let mut worst: f64 = 0.0;
    for (ca, cb) in a.iter().zip(&b) {
        let mut keys: Vec<&Option<TokenId>> = ca.keys().chain(cb.keys()).collect();
        keys.sort();
        keys.dedup();
        let d: f64 = keys
            .into_iter()
            .map(|k| {
                let fa = *ca.get(k).unwrap_or(&0) as f64 / n as f64;
                let fb = *cb.get(k).unwrap_or(&0) as f64 / n as f64;
                (fa - fb).abs()
            })
            .sum::<f64>()
            * 0.5;
        worst = worst.max(d);
    }
    Ok(McReport {
        n,
        tvd: worst,
        threshold,
        passed: worst < threshold,
    })
}

/// Target-only greedy decoding.
pub fn autoregressive_greedy(
    target: &dyn SequenceModel,
    prompt: &Context,
    max_new_tokens: usize,
    eos: Option<TokenId>,
) -> Vec<TokenId> {
    let mut ctx = prompt.clone();
    let mut out = Vec::with_capacity(max_new_tokens);
    while out.len() < max_new_tokens {
        let t = target.next_distribution(&ctx).argmax();
        out.push(t);
        ctx.push(t);
        if Some(t) == eos {
            break;
        }
    }
    out
}

/// Target-only ancestral sampling.
pub fn autoregressive_sample(
    target: &dyn SequenceModel,
    prompt: &Context,
    max_new_tokens: usize,
    eos: Option<TokenId>,
    rng: &mut Rng,
) -> Vec<TokenId> {
    let mut ctx = prompt.clone();
    let mut out = Vec::with_capacity(max_new_tokens);
    while out.len() < max_new_tokens {
        let t = sample(&target.next_distribution(&ctx), rng);
        out.push(t);
        ctx.push(t);
        if Some(t) == eos {
            break;
        }
    }
    out
}

/// First disagreement found by [`exhaustive_greedy_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct Counterexample {
    pub pipeline: String,
    pub prompt: Vec<TokenId>,
    pub gamma: usize,
    pub expected: Vec<TokenId>,
    pub got: Vec<TokenId>,
}

impl fmt::Display for Counterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: &[TokenId]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        write!(
            f,
            "{} gamma={} prompt=[{}]: expected [{}], got [{}]",
            self.pipeline,
            self.gamma,
            show(&self.prompt),
            show(&self.expected),
            show(&self.got)
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreedyCheckReport {
    pub sessions: usize,
    pub counterexample: Option<Counterexample>,
}

impl GreedyCheckReport {
    pub fn passed(&self) -> bool {
        self.counterexample.is_none()
    }
}

/// Every greedy pipeline over `sources`: each source alone, TABED under every
/// applicable policy and criterion, and all of those again as trees of width
/// `1..=vocab_size`.
pub fn greedy_pipelines(sources: &[DraftSource], vocab_size: usize) -> Vec<(String, Pipeline)> {
    let mut linear: Vec<(String, Pipeline)> = sources
        .iter()
        .map(|s| (format!("single[{}]", s.name), Pipeline::single(s.clone())))
        .collect();
    let mut policies = vec![
        WeightPolicy::SoftmaxInverseError { tau: 1.0 },
        WeightPolicy::Adaboost { c: 1.0 },
    ];
    if sources.len() == 2 {
        policies.insert(0, WeightPolicy::Grid { n: 10 });
    }
    let criteria = [
        SelectionCriterion::soft_kl(),
        SelectionCriterion::SoftTvd,
        SelectionCriterion::HardMatch,
    ];
    for policy in &policies {
        for criterion in criteria {
            linear.push((
                format!("tabed[{policy:?}, {}]", criterion.name()),
                Pipeline::tabed(sources.to_vec(), policy.clone(), criterion, Window::All),
            ));
        }
    }
    let mut all = linear.clone();
    for width in 1..=vocab_size {
        for (name, p) in &linear {
            all.push((format!("tree{width}/{name}"), p.clone().with_tree(width)));
        }
    }
    all
}

/// Enumerates every TEXT prompt of length 0..=2 over the vocabulary and every
/// block length `1..=max_gamma`, checking each greedy pipeline against
/// target-only greedy decoding.
pub fn exhaustive_greedy_check(
    target: &dyn SequenceModel,
    sources: &[DraftSource],
    max_gamma: usize,
    max_len: usize,
) -> Result<GreedyCheckReport> {
    exhaustive_greedy_check_with(target, sources, max_gamma, max_len, |pipeline, prompt, cfg| {
        run_session(target, pipeline, prompt, cfg).map(|o| o.tokens)
    })
}

/// Same as [`exhaustive_greedy_check`] with a caller-supplied decoder.
pub fn exhaustive_greedy_check_with<F>(
    target: &dyn SequenceModel,
    sources: &[DraftSource],
    max_gamma: usize,
    max_len: usize,
    mut decode: F,
) -> Result<GreedyCheckReport>
where
    F: FnMut(&Pipeline, &Context, &DecodeConfig) -> Result<Vec<TokenId>>,
{
    let vocab = target.vocab_size();
    if vocab > EXHAUSTIVE_MAX_VOCAB {
        return Err(Error::BadParams(format!(
            "exhaustive check supports vocab <= {EXHAUSTIVE_MAX_VOCAB}, got {vocab}"
        )));
    }
    if max_gamma == 0 || max_len == 0 || sources.is_empty() {
        return Err(Error::BadParams("need gamma >= 1, max_len >= 1 and at least one source".into()));
    }
    let mut prompts: Vec<Vec<TokenId>> = vec![Vec::new()];
    for a in 0..vocab as u32 {
        prompts.push(vec![TokenId(a)]);
        for b in 0..vocab as u32 {
            prompts.push(vec![TokenId(a), TokenId(b)]);
        }
    }
    let pipelines = greedy_pipelines(sources, vocab);
    let mut sessions = 0;
    for prompt in &prompts {
        let ctx = Context::from_text(prompt.clone());
        let expected = autoregressive_greedy(target, &ctx, max_len, None);
        for gamma in 1..=max_gamma {
            let cfg = DecodeConfig {
                gamma,
                mode: DecodeMode::Greedy,
                max_new_tokens: max_len,
                eos_token: None,
                seed: 0,
            };
            for (name, pipeline) in &pipelines {
                let got = decode(pipeline, &ctx, &cfg)?;
                sessions += 1;
                if got != expected {
                    return Ok(GreedyCheckReport {
                        sessions,
                        counterexample: Some(Counterexample {
                            pipeline: name.clone(),
                            prompt: prompt.clone(),
                            gamma,
                            expected,
                            got,
                        }),
                    });
                }
            }
        }
    }
    Ok(GreedyCheckReport {
        sessions,
        counterexample: None,
    })
}
