//! The distribution-preservation suite behind `tabed selftest`.
//!
//! Each check pits the engine against an [`oracle`](crate::oracle) reference
//! on seeded random instances and reports a measured value next to its bound.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::decode::{draft_block, verify_stochastic, DecodeConfig, DecodeMode};
use crate::dist::{tvd, Distribution, Rng};
use crate::error::Result;
use crate::models::{train_kgram, ConstantModel, Context, DraftSource, SequenceModel, SyntheticOracle, TokenId};
use crate::oracle::{autoregressive_sample, exact_step_law, exhaustive_greedy_check, mc_equivalence, MC_TVD_THRESHOLD};
use crate::session::{run_session, Pipeline};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// The measured statistic (maximum error, TVD, z-score, ...).
    pub value: f64,
    pub bound: f64,
    pub detail: String,
    pub elapsed_ms: u128,
}

/// Dirichlet(1) draw, with roughly a third of the entries zeroed when `sparse`.
pub fn random_distribution(rng: &mut Rng, vocab: usize, sparse: bool) -> Distribution {
    loop {
        let mass: Vec<f64> = (0..vocab)
            .map(|_| {
                if sparse && rng.uniform() < 0.35 {
                    0.0
                } else {
                    -(1.0 - rng.uniform()).ln()
                }
            })
            .collect();
        if let Ok(d) = Distribution::from_mass(mass) {
            return d;
        }
    }
}

/// Largest `|law − p|` over `pairs` random pairs.
pub fn exact_law_sweep(seed: u64, pairs: usize, vocab: usize) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let sparse = i % 3 == 0;
        let p = random_distribution(&mut rng, vocab, sparse);
        let q = random_distribution(&mut rng, vocab, sparse);
        let law = exact_step_law(&p, &q)?.law;
        for (a, b) in law.probs().iter().zip(p.probs()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Engine acceptance rate of single-token blocks against `1 − tvd(p, q)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AcceptanceRate {
    pub empirical: f64,
    pub expected: f64,
    pub std_err: f64,
}

impl AcceptanceRate {
    /// Deviation in binomial standard errors; 0 when the rate is degenerate.
    pub fn z(&self) -> f64 {
        let diff = (self.empirical - self.expected).abs();
        if self.std_err > 0.0 {
            diff / self.std_err
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

pub fn acceptance_rate(p: &Distribution, q: &Distribution, n: usize, seed: u64) -> Result<AcceptanceRate> {
    let target = ConstantModel::new(p.clone());
    let source = DraftSource::identity("q", Arc::new(ConstantModel::new(q.clone())));
    let ctx = Context::from_text(Vec::new());
    let mut rng = Rng::new(seed);
    let mut accepted = 0usize;
    for _ in 0..n {
        let block = draft_block(&source, &ctx, 1, DecodeMode::Stochastic, &mut rng);
        accepted += verify_stochastic(&target, &ctx, &block, &mut rng).accepted_count;
    }
    let expected = 1.0 - tvd(p, q)?;
    Ok(AcceptanceRate {
        empirical: accepted as f64 / n as f64,
        expected,
        std_err: (expected * (1.0 - expected) / n as f64).sqrt(),
    })
}

/// Bigram models over `vocab` tokens trained on random corpora.
pub fn random_bigram(seed: u64, vocab: usize, docs: usize, len: usize) -> Result<crate::models::KgramModel> {
    let mut rng = Rng::new(seed);
    // skewed unigram so the bigram tables differ visibly between seeds
    let skew = random_distribution(&mut rng, vocab, false);
    let corpus: Vec<Vec<TokenId>> = (0..docs)
        .map(|_| (0..len).map(|_| crate::dist::sample(&skew, &mut rng)).collect())
        .collect();
    train_kgram(&corpus, 1, 0.5, vocab)
}

/// Max per-position TVD between speculative sessions and target-only sampling.
pub fn session_equivalence(
    target: &dyn SequenceModel,
    pipeline: &Pipeline,
    prompt: &Context,
    gamma: usize,
    max_new_tokens: usize,
    n: usize,
    seed: u64,
) -> Result<crate::oracle::McReport> {
    let mut failure = None;
    let mut reference = Rng::new(Rng::derive_seed(seed, u64::MAX));
    let report = mc_equivalence(
        |i| {
            let cfg = DecodeConfig {
                gamma,
                mode: DecodeMode::Stochastic,
                max_new_tokens,
                eos_token: None,
                seed: Rng::derive_seed(seed, i as u64),
            };
            match run_session(target, pipeline, prompt, &cfg) {
                Ok(out) => out.tokens,
                Err(e) => {
                    failure.get_or_insert(e);
                    Vec::new()
                }
            }
        },
        |_| autoregressive_sample(target, prompt, max_new_tokens, None, &mut reference),
        n,
        MC_TVD_THRESHOLD,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Sizes for [`run_selftest`]. `full()` uses the documented sample counts.
#[derive(Clone, Copy, Debug)]
pub struct SelftestSize {
    pub law_pairs: usize,
    pub rate_pairs: usize,
    pub rate_samples: usize,
    pub mc_samples: usize,
}

impl SelftestSize {
    pub fn full() -> Self {
        Self {
            law_pairs: 1000,
            rate_pairs: 20,
            rate_samples: 100_000,
            mc_samples: 100_000,
        }
    }
}

fn timed<F: FnOnce() -> Result<(bool, f64, f64, String)>>(name: &str, f: F) -> Result<CheckResult> {
    let start = Instant::now();
    let (passed, value, bound, detail) = f()?;
    Ok(CheckResult {
        name: name.to_string(),
        passed,
        value,
        bound,
        detail,
        elapsed_ms: start.elapsed().as_millis(),
    })
}

pub fn run_selftest(seed: u64, size: SelftestSize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    out.push(timed("exact_step_law", || {
        let worst = exact_law_sweep(seed, size.law_pairs, 16)?;
        Ok((worst < 1e-12, worst, 1e-12, format!("{} pairs, vocab 16", size.law_pairs)))
    })?);

    out.push(timed("acceptance_rate", || {
        let mut rng = Rng::new(Rng::derive_seed(seed, 1));
        let mut worst: f64 = 0.0;
        for i in 0..size.rate_pairs {
            let p = random_distribution(&mut rng, 8, i % 2 == 0);
            let q = random_distribution(&mut rng, 8, i % 2 == 1);
            let r = acceptance_rate(&p, &q, size.rate_samples, Rng::derive_seed(seed, 100 + i as u64))?;
            worst = worst.max(r.z());
        }
        Ok((
            worst <= 4.0,
            worst,
            4.0,
            format!("worst |rate - (1 - tvd)| in standard errors over {} pairs", size.rate_pairs),
        ))
    })?);

    out.push(timed("session_equivalence", || {
        let target = random_bigram(Rng::derive_seed(seed, 2), 8, 40, 60)?;
        let draft = random_bigram(Rng::derive_seed(seed, 3), 8, 40, 60)?;
        let other = random_bigram(Rng::derive_seed(seed, 4), 8, 40, 60)?;
        let prompt = Context::from_text(vec![TokenId(1)]);
        let single = Pipeline::single(DraftSource::identity("draft", Arc::new(draft.clone())));
        let ensemble = Pipeline::tabed(
            vec![
                DraftSource::identity("draft", Arc::new(draft)),
                DraftSource::identity("other", Arc::new(other)),
            ],
            crate::tabed::WeightPolicy::Grid { n: 10 },
            crate::tabed::SelectionCriterion::soft_kl(),
            crate::tabed::Window::All,
        );
        let a = session_equivalence(&target, &single, &prompt, 3, 6, size.mc_samples, seed)?;
        let b = session_equivalence(&target, &ensemble, &prompt, 3, 6, size.mc_samples, seed ^ 1)?;
        let worst = a.tvd.max(b.tvd);
        Ok((
            a.passed && b.passed,
            worst,
            MC_TVD_THRESHOLD,
            format!(
                "single {:.4}, ensemble {:.4}; n = {}, vocab 8 bigram",
                a.tvd, b.tvd, size.mc_samples
            ),
        ))
    })?);

    out.push(timed("exhaustive_greedy", || {
        let target: Arc<dyn SequenceModel> = Arc::new(SyntheticOracle::new(seed, 0.5, 4, Some(2))?);
        let other: Arc<dyn SequenceModel> = Arc::new(SyntheticOracle::new(seed ^ 0xA5, 0.5, 4, Some(1))?);
        let adversary: Arc<dyn SequenceModel> = Arc::new(ConstantModel::point_mass(4, TokenId(3)));
        let sets = [
            vec![
                DraftSource::identity("self", target.clone()),
                DraftSource::identity("adversary", adversary.clone()),
            ],
            vec![
                DraftSource::identity("other", other),
                DraftSource::identity("adversary", adversary),
            ],
        ];
        let mut sessions = 0;
        for set in &sets {
            let r = exhaustive_greedy_check(target.as_ref(), set, 3, 8)?;
            sessions += r.sessions;
            if let Some(cx) = r.counterexample {
                return Ok((false, sessions as f64, 0.0, cx.to_string()));
            }
        }
        Ok((true, sessions as f64, 0.0, format!("{sessions} sessions identical to target greedy")))
    })?);

    Ok(out)
}
