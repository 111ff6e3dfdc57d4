//! Test-time adaptive batched ensemble drafting.
//!
//! Every drafting source sees the same generated prefix through its own
//! context transform. At the start of each block one weight vector is chosen
//! by scoring candidate mixtures against target distributions recorded on the
//! realized trajectory; that weight is then held fixed for the whole block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::decode::{draft_mixture, DecodeMode, DraftBlock, VerificationResult};
use crate::dist::{kl_divergence, tvd, weighted_average, Distribution, Rng, WeightVector, DEFAULT_KL_FLOOR};
use crate::error::{Error, Result};
use crate::models::{Context, DraftSource, TokenId};

/// Error rates are clamped away from zero before inversion.
pub const ERROR_CLAMP: f64 = 1e-12;
/// AdaBoost error rates are clamped into `[EPS_CLAMP, 1 − EPS_CLAMP]`.
pub const EPS_CLAMP: f64 = 1e-6;

/// How many past realized positions feed weight selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Window {
    #[default]
    All,
    Last(usize),
}

impl Window {
    pub fn last(h: usize) -> Result<Self> {
        if h == 0 {
            return Err(Error::BadParams("window length must be >= 1".into()));
        }
        Ok(Window::Last(h))
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::All => f.write_str("all"),
            Window::Last(h) => write!(f, "{h}"),
        }
    }
}

impl FromStr for Window {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Window::All);
        }
        let h: usize = s
            .parse()
            .map_err(|_| Error::BadParams(format!("window must be 'all' or a positive integer, got {s:?}")))?;
        Window::last(h)
    }
}

impl Serialize for Window {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Window::All => s.serialize_str("all"),
            Window::Last(h) => s.serialize_u64(*h as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(h) => Window::last(h as usize).map_err(serde::de::Error::custom),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub position: usize,
    pub target: Distribution,
    pub sources: Vec<Distribution>,
    pub realized: TokenId,
}

/// Target soft labels and per-source draft distributions at realized positions.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryCache {
    num_sources: usize,
    window: Window,
    next_position: usize,
    entries: Vec<HistoryEntry>,
}

impl HistoryCache {
    pub fn new(num_sources: usize, window: Window) -> Self {
        assert!(num_sources > 0, "need at least one source");
        Self {
            num_sources,
            window,
            next_position: 0,
            entries: Vec::new(),
        }
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Generated-sequence index the next block starts at.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    /// Entries visible through the observation window.
    pub fn visible(&self) -> &[HistoryEntry] {
        match self.window {
            Window::All => &self.entries,
            Window::Last(h) => &self.entries[self.entries.len().saturating_sub(h)..],
        }
    }

    /// Appends an entry at `next_position + offset`.
    pub(crate) fn record(
        &mut self,
        offset: usize,
        target: Distribution,
        sources: Vec<Distribution>,
        realized: TokenId,
    ) -> Result<()> {
        if sources.len() != self.num_sources {
            return Err(Error::InconsistentPair(format!(
                "{} source distributions for a cache of {} sources",
                sources.len(),
                self.num_sources
            )));
        }
        self.entries.push(HistoryEntry {
            position: self.next_position + offset,
            target,
            sources,
            realized,
        });
        Ok(())
    }

    pub(crate) fn advance(&mut self, emitted: usize) {
        self.next_position += emitted;
    }
}

/// Weight-candidate generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightPolicy {
    /// `[1 − j/n, j/n]` for `j = 0..=n`; two sources only.
    Grid { n: usize },
    /// `softmax(1/e; tau)` over per-source accumulated errors.
    SoftmaxInverseError { tau: f64 },
    /// Multi-class AdaBoost weights from per-source argmax error rates.
    Adaboost { c: f64 },
    Fixed { weights: WeightVector },
}

impl WeightPolicy {
    pub fn validate(&self, num_sources: usize) -> Result<()> {
        match self {
            WeightPolicy::Grid { n } => {
                if *n == 0 {
                    return Err(Error::BadParams("grid needs n >= 1".into()));
                }
                if num_sources != 2 {
                    return Err(Error::UnsupportedArity {
                        supported: 2,
                        got: num_sources,
                    });
                }
            }
            WeightPolicy::SoftmaxInverseError { tau } => {
                if !(*tau > 0.0 && tau.is_finite()) {
                    return Err(Error::BadParams(format!("temperature must be > 0, got {tau}")));
                }
            }
            WeightPolicy::Adaboost { c } => {
                if !c.is_finite() {
                    return Err(Error::BadParams("adaboost constant must be finite".into()));
                }
            }
            WeightPolicy::Fixed { weights } => {
                if weights.len() != num_sources {
                    return Err(Error::DimensionMismatch {
                        expected: num_sources,
                        got: weights.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Distance used to score a candidate mixture against history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionCriterion {
    SoftKl {
        #[serde(default = "default_floor")]
        floor: f64,
    },
    SoftTvd,
    /// Negated count of positions where the mixture's argmax hit the realized token.
    HardMatch,
}

fn default_floor() -> f64 {
    DEFAULT_KL_FLOOR
}

impl SelectionCriterion {
    pub fn soft_kl() -> Self {
        SelectionCriterion::SoftKl {
            floor: DEFAULT_KL_FLOOR,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectionCriterion::SoftKl { .. } => "soft_kl",
            SelectionCriterion::SoftTvd => "soft_tvd",
            SelectionCriterion::HardMatch => "hard_match",
        }
    }
}

impl Default for SelectionCriterion {
    fn default() -> Self {
        Self::soft_kl()
    }
}

pub fn grid_candidates(num_sources: usize, n: usize) -> Result<Vec<WeightVector>> {
    if num_sources != 2 {
        return Err(Error::UnsupportedArity {
            supported: 2,
            got: num_sources,
        });
    }
    if n == 0 {
        return Err(Error::BadParams("grid needs n >= 1".into()));
    }
    Ok((0..=n)
        .map(|j| {
            let b = j as f64 / n as f64;
            WeightVector::new(vec![1.0 - b, b]).expect("grid point on the simplex")
        })
        .collect())
}

/// `softmax([1/e_1, …, 1/e_m] / tau)` with errors clamped below at [`ERROR_CLAMP`].
pub fn softmax_inverse_error(errors: &[f64], tau: f64) -> Result<WeightVector> {
    if errors.is_empty() {
        return Err(Error::Empty);
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::BadParams(format!("temperature must be > 0, got {tau}")));
    }
    let logits: Vec<f64> = errors
        .iter()
        .map(|&e| {
            let e = if e.is_nan() { f64::INFINITY } else { e };
            (1.0 / e.max(ERROR_CLAMP)) / tau
        })
        .collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - top).exp()).collect();
    WeightVector::from_scores(exps)
}

/// `w_i = ln(1/ε_i − 1) + C·ln(K − 1)`, clamped at zero and normalized.
pub fn adaboost_weights(eps: &[f64], vocab_size: usize, c: f64) -> Result<WeightVector> {
    if eps.is_empty() {
        return Err(Error::Empty);
    }
    if vocab_size < 2 {
        return Err(Error::BadParams(format!("adaboost needs K >= 2, got {vocab_size}")));
    }
    let prior = c * ((vocab_size - 1) as f64).ln();
    let raw = eps
        .iter()
        .map(|&e| {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::EpsOutOfDomain(e));
            }
            Ok(((1.0 / e - 1.0).ln() + prior).max(0.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    WeightVector::from_scores(raw)
}

/// Score of mixture `w` over the visible history; lower is better.
pub fn accumulated_error(
    cache: &HistoryCache,
    w: &WeightVector,
    criterion: SelectionCriterion,
) -> Result<f64> {
    let window = cache.visible();
    if window.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut total = 0.0;
    for entry in window {
        let q = weighted_average(&entry.sources, w)?;
        total += match criterion {
            SelectionCriterion::SoftKl { floor } => kl_divergence(&entry.target, &q, floor)?,
            SelectionCriterion::SoftTvd => tvd(&entry.target, &q)?,
            SelectionCriterion::HardMatch => {
                if q.argmax() == entry.realized {
                    -1.0
                } else {
                    0.0
                }
            }
        };
    }
    Ok(total)
}

/// Per-source error used by the single-candidate policies.
fn per_source_errors(cache: &HistoryCache, criterion: SelectionCriterion) -> Result<Vec<f64>> {
    let m = cache.num_sources();
    (0..m)
        .map(|i| match criterion {
            SelectionCriterion::HardMatch => Ok(mismatch_count(cache, i) as f64),
            soft => accumulated_error(cache, &WeightVector::one_hot(m, i), soft),
        })
        .collect()
}

fn mismatch_count(cache: &HistoryCache, source: usize) -> usize {
    cache
        .visible()
        .iter()
        .filter(|e| e.sources[source].argmax() != e.realized)
        .count()
}

/// Chooses the block weight. Adaptive policies fall back to uniform weights
/// while the history is empty; a fixed policy always returns its weights.
pub fn select_weight(
    cache: &HistoryCache,
    policy: &WeightPolicy,
    criterion: SelectionCriterion,
) -> Result<WeightVector> {
    let m = cache.num_sources();
    policy.validate(m)?;
    if let WeightPolicy::Fixed { weights } = policy {
        return Ok(weights.clone());
    }
    if cache.visible().is_empty() {
        return Ok(WeightVector::uniform(m));
    }
    match policy {
        WeightPolicy::Grid { n } => {
            let mut candidates = grid_candidates(m, *n)?;
            let mut best = 0;
            let mut best_err = f64::INFINITY;
            for (j, w) in candidates.iter().enumerate() {
                let err = accumulated_error(cache, w, criterion)?;
                if err < best_err {
                    best = j;
                    best_err = err;
                }
            }
            Ok(candidates.swap_remove(best))
        }
        WeightPolicy::SoftmaxInverseError { tau } => {
            softmax_inverse_error(&per_source_errors(cache, criterion)?, *tau)
        }
        WeightPolicy::Adaboost { c } => {
            let window = cache.visible();
            let vocab = window[0].target.vocab_size();
            if vocab < 2 {
                return Ok(WeightVector::uniform(m));
            }
            let eps: Vec<f64> = (0..m)
                .map(|i| {
                    let rate = mismatch_count(cache, i) as f64 / window.len() as f64;
                    rate.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP)
                })
                .collect();
            adaboost_weights(&eps, vocab, *c)
        }
        WeightPolicy::Fixed { .. } => unreachable!(),
    }
}

/// One block of ensembled drafting with a weight selected once up front.
#[allow(clippy::too_many_arguments)]
pub fn tabed_draft(
    sources: &[DraftSource],
    ctx: &Context,
    gamma: usize,
    cache: &HistoryCache,
    policy: &WeightPolicy,
    criterion: SelectionCriterion,
    mode: DecodeMode,
    rng: &mut Rng,
) -> Result<DraftBlock> {
    if sources.len() != cache.num_sources() {
        return Err(Error::DimensionMismatch {
            expected: cache.num_sources(),
            got: sources.len(),
        });
    }
    let w = select_weight(cache, policy, criterion)?;
    draft_mixture(sources, ctx, gamma, &w, mode, rng)
}

/// Records every realized-trajectory position of a verified block.
///
/// After full acceptance the bonus position has no draft distributions and
/// is skipped; after a rejection the rejected position is recorded with the
/// corrected token as its label.
pub fn update_history(
    cache: &mut HistoryCache,
    block: &DraftBlock,
    vr: &VerificationResult,
) -> Result<()> {
    let gamma = block.gamma();
    if block.ensembled_dists.len() != gamma
        || block.per_source_dists.iter().any(|row| row.len() != gamma)
    {
        return Err(Error::InconsistentPair("draft block lengths disagree with gamma".into()));
    }
    if block.num_sources() != cache.num_sources() {
        return Err(Error::InconsistentPair(format!(
            "block has {} sources, cache expects {}",
            block.num_sources(),
            cache.num_sources()
        )));
    }
    if vr.accepted_count > gamma
        || vr.emitted_tokens.len() != vr.accepted_count + 1
        || vr.target_dists.len() != vr.accepted_count + 1
    {
        return Err(Error::InconsistentPair(format!(
            "verification of {} accepted tokens emitted {} with {} target distributions",
            vr.accepted_count,
            vr.emitted_tokens.len(),
            vr.target_dists.len()
        )));
    }
    if vr.emitted_tokens[..vr.accepted_count] != block.tokens[..vr.accepted_count] {
        return Err(Error::InconsistentPair("accepted prefix differs from drafted tokens".into()));
    }
    let recorded = (vr.accepted_count + 1).min(gamma);
    for i in 0..recorded {
        cache.record(i, vr.target_dists[i].clone(), block.sources_at(i), vr.emitted_tokens[i])?;
    }
    cache.advance(vr.emitted_tokens.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{tokens, ConstantModel, SequenceModel};
    use std::sync::Arc;

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    fn w(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    fn cache_with(entries: &[(Distribution, Vec<Distribution>, u32)]) -> HistoryCache {
        let m = entries[0].1.len();
        let mut c = HistoryCache::new(m, Window::All);
        for (i, (p, srcs, tok)) in entries.iter().enumerate() {
            c.record(i, p.clone(), srcs.clone(), TokenId(*tok)).unwrap();
        }
        c
    }

    #[test]
    fn grid_examples() {
        let g = grid_candidates(2, 2).unwrap();
        assert_eq!(g, vec![w(&[1.0, 0.0]), w(&[0.5, 0.5]), w(&[0.0, 1.0])]);
        let g = grid_candidates(2, 10).unwrap();
        assert_eq!(g.len(), 11);
        for (j, c) in g.iter().enumerate() {
            assert!((c.as_slice()[1] - j as f64 * 0.1).abs() < 1e-12);
        }
        assert_eq!(grid_candidates(2, 1).unwrap(), vec![w(&[1.0, 0.0]), w(&[0.0, 1.0])]);
        assert!(matches!(
            grid_candidates(3, 4),
            Err(Error::UnsupportedArity { supported: 2, got: 3 })
        ));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_inverse_error(&[0.3, 0.3, 0.3], 0.7).unwrap();
        assert!(u.as_slice().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        let s = softmax_inverse_error(&[1e-12, 1.0, 1.0, 1.0], 1.0).unwrap();
        assert!(s.as_slice()[0] > 0.999999);
        for tau in [0.1, 1.0, 10.0] {
            assert_eq!(softmax_inverse_error(&[1.0, 1.0], tau).unwrap().as_slice(), &[0.5, 0.5]);
        }
        // zero error is clamped rather than dividing by zero
        let z = softmax_inverse_error(&[0.0, 0.5], 1.0).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 0.0]);
        assert!(softmax_inverse_error(&[1.0], 0.0).is_err());
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let errs = [0.5, 1.0, 2.0];
        let tau: f64 = 2.0;
        let raw: Vec<f64> = errs.iter().map(|e| ((1.0 / e) / tau).exp()).collect();
        let z: f64 = raw.iter().sum();
        let got = softmax_inverse_error(&errs, tau).unwrap();
        for (g, r) in got.as_slice().iter().zip(&raw) {
            assert!((g - r / z).abs() < 1e-12);
        }
    }

    #[test]
    fn adaboost_examples() {
        // single method at chance: raw weight 0, normalization falls back to uniform
        assert_eq!(adaboost_weights(&[0.5], 4, 0.0).unwrap().as_slice(), &[1.0]);
        let raw = (1.0f64 / 0.25 - 1.0).ln() + 1.0 * (1.0f64).ln();
        assert!((raw - 3f64.ln()).abs() < 1e-12);
        assert!((raw - 1.0986).abs() < 1e-4);
        // two methods: ln3 vs ln1 = 0 -> all weight on the first
        assert_eq!(adaboost_weights(&[0.25, 0.5], 2, 1.0).unwrap().as_slice(), &[1.0, 0.0]);
        let two = adaboost_weights(&[0.25, 0.4], 2, 0.0).unwrap();
        let (a, b) = (3f64.ln(), (1.5f64).ln());
        assert!((two.as_slice()[0] - a / (a + b)).abs() < 1e-12);
        assert!(matches!(adaboost_weights(&[1.0], 4, 0.0), Err(Error::EpsOutOfDomain(_))));
        assert!(matches!(adaboost_weights(&[0.0, 0.2], 4, 0.0), Err(Error::EpsOutOfDomain(_))));
    }

    #[test]
    fn adaboost_prior_term_uses_vocab() {
        // eps 0.9 gives ln(1/9) < 0; C·ln(K−1) with K=11 lifts it above zero
        let v = adaboost_weights(&[0.9, 0.5], 11, 1.0).unwrap();
        let a = (1.0f64 / 0.9 - 1.0).ln() + 10f64.ln();
        let b = 10f64.ln();
        assert!((v.as_slice()[0] - a / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn accumulated_error_examples() {
        let p = d(&[1.0, 0.0]);
        let uni = Distribution::uniform(2);
        let cache = cache_with(&[(p.clone(), vec![p.clone(), uni.clone()], 0)]);
        let zero = accumulated_error(&cache, &w(&[1.0, 0.0]), SelectionCriterion::SoftKl { floor: 0.0 }).unwrap();
        assert_eq!(zero, 0.0);
        let ln2 = accumulated_error(&cache, &w(&[0.0, 1.0]), SelectionCriterion::SoftKl { floor: 0.0 }).unwrap();
        assert!((ln2 - std::f64::consts::LN_2).abs() < 1e-12);
        let half = accumulated_error(&cache, &w(&[0.0, 1.0]), SelectionCriterion::SoftTvd).unwrap();
        assert!((half - 0.5).abs() < 1e-12);

        let four = cache_with(&[
            (p.clone(), vec![p.clone(), uni.clone()], 0),
            (p.clone(), vec![p.clone(), uni.clone()], 0),
            (p.clone(), vec![p.clone(), uni.clone()], 0),
            (p.clone(), vec![p.clone(), uni.clone()], 0),
        ]);
        assert_eq!(accumulated_error(&four, &w(&[1.0, 0.0]), SelectionCriterion::HardMatch).unwrap(), -4.0);

        let empty = HistoryCache::new(2, Window::All);
        assert!(matches!(
            accumulated_error(&empty, &w(&[1.0, 0.0]), SelectionCriterion::soft_kl()),
            Err(Error::EmptyHistory)
        ));
    }

    #[test]
    fn cold_start_is_uniform() {
        let empty = HistoryCache::new(2, Window::All);
        for policy in [
            WeightPolicy::Grid { n: 10 },
            WeightPolicy::SoftmaxInverseError { tau: 1.0 },
            WeightPolicy::Adaboost { c: 0.0 },
        ] {
            assert_eq!(
                select_weight(&empty, &policy, SelectionCriterion::soft_kl()).unwrap(),
                WeightVector::uniform(2)
            );
        }
        let fixed = WeightPolicy::Fixed { weights: w(&[0.0, 1.0]) };
        assert_eq!(select_weight(&empty, &fixed, SelectionCriterion::soft_kl()).unwrap(), w(&[0.0, 1.0]));
    }

    #[test]
    fn grid_picks_source_matching_target() {
        let targets = [d(&[0.7, 0.2, 0.1]), d(&[0.1, 0.1, 0.8]), d(&[0.3, 0.4, 0.3])];
        let uni = Distribution::uniform(3);
        let entries: Vec<_> = targets.iter().map(|p| (p.clone(), vec![p.clone(), uni.clone()], 0)).collect();
        let cache = cache_with(&entries);
        // enumerate: KL of candidate j grows with j
        let errs: Vec<f64> = grid_candidates(2, 10)
            .unwrap()
            .iter()
            .map(|c| accumulated_error(&cache, c, SelectionCriterion::soft_kl()).unwrap())
            .collect();
        assert!(errs.windows(2).all(|x| x[0] < x[1]));
        let chosen = select_weight(&cache, &WeightPolicy::Grid { n: 10 }, SelectionCriterion::soft_kl()).unwrap();
        assert_eq!(chosen, w(&[1.0, 0.0]));
    }

    #[test]
    fn grid_ties_go_to_lowest_index() {
        let p = d(&[0.5, 0.5]);
        let cache = cache_with(&[(p.clone(), vec![p.clone(), p.clone()], 0)]);
        let chosen = select_weight(&cache, &WeightPolicy::Grid { n: 4 }, SelectionCriterion::soft_kl()).unwrap();
        assert_eq!(chosen, w(&[1.0, 0.0]));
    }

    #[test]
    fn softmax_and_adaboost_prefer_accurate_source() {
        let p = d(&[0.9, 0.1]);
        let bad = d(&[0.1, 0.9]);
        let entries: Vec<_> = (0..6).map(|_| (p.clone(), vec![p.clone(), bad.clone()], 0)).collect();
        let cache = cache_with(&entries);
        for crit in [SelectionCriterion::soft_kl(), SelectionCriterion::SoftTvd, SelectionCriterion::HardMatch] {
            let sw = select_weight(&cache, &WeightPolicy::SoftmaxInverseError { tau: 1.0 }, crit).unwrap();
            assert!(sw.as_slice()[0] > 0.99, "{crit:?}: {sw:?}");
        }
        let ab = select_weight(&cache, &WeightPolicy::Adaboost { c: 0.0 }, SelectionCriterion::soft_kl()).unwrap();
        assert_eq!(ab.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn window_restricts_visible_entries() {
        let a = d(&[1.0, 0.0]);
        let b = d(&[0.0, 1.0]);
        // old history favours source 0, the last two entries favour source 1
        let mut entries: Vec<_> = (0..5).map(|_| (a.clone(), vec![a.clone(), b.clone()], 0)).collect();
        entries.extend((0..2).map(|_| (b.clone(), vec![a.clone(), b.clone()], 1)));
        let mut cache = cache_with(&entries);
        let policy = WeightPolicy::Grid { n: 10 };
        // a mixture hedging toward the 5:2 split wins over the full cache
        let all = select_weight(&cache, &policy, SelectionCriterion::soft_kl()).unwrap();
        assert_eq!(all, w(&[0.7, 0.3]));
        cache.window = Window::Last(2);
        assert_eq!(cache.visible().len(), 2);
        assert_eq!(select_weight(&cache, &policy, SelectionCriterion::soft_kl()).unwrap(), w(&[0.0, 1.0]));
        cache.window = Window::Last(100);
        assert_eq!(cache.visible().len(), 7);
    }

    #[test]
    fn window_parsing() {
        assert_eq!("all".parse::<Window>().unwrap(), Window::All);
        assert_eq!("16".parse::<Window>().unwrap(), Window::Last(16));
        assert!("0".parse::<Window>().is_err());
        let v: Window = serde_json::from_str("4").unwrap();
        assert_eq!(v, Window::Last(4));
        let v: Window = serde_json::from_str("\"ALL\"").unwrap();
        assert_eq!(v, Window::All);
    }

    fn src(dist: Distribution) -> DraftSource {
        DraftSource::identity("s", Arc::new(ConstantModel::new(dist)))
    }

    #[test]
    fn fixed_equal_weights_on_agreeing_point_masses() {
        let pm = Distribution::point_mass(3, TokenId(1));
        let sources = [src(pm.clone()), src(pm)];
        let cache = HistoryCache::new(2, Window::All);
        let block = tabed_draft(
            &sources,
            &Context::from_text(vec![]),
            4,
            &cache,
            &WeightPolicy::Fixed { weights: WeightVector::uniform(2) },
            SelectionCriterion::soft_kl(),
            DecodeMode::Stochastic,
            &mut Rng::new(2),
        )
        .unwrap();
        assert_eq!(block.tokens, tokens(&[1, 1, 1, 1]));
        assert_eq!(block.per_source_dists.len(), 2);
    }

    #[test]
    fn single_source_tabed_equals_plain_draft() {
        let s = src(d(&[0.2, 0.5, 0.3]));
        let ctx = Context::from_text(vec![]);
        let cache = HistoryCache::new(1, Window::All);
        for policy in [WeightPolicy::SoftmaxInverseError { tau: 1.0 }, WeightPolicy::Adaboost { c: 1.0 }] {
            let a = tabed_draft(
                std::slice::from_ref(&s),
                &ctx,
                6,
                &cache,
                &policy,
                SelectionCriterion::soft_kl(),
                DecodeMode::Stochastic,
                &mut Rng::new(8),
            )
            .unwrap();
            let b = crate::decode::draft_block(&s, &ctx, 6, DecodeMode::Stochastic, &mut Rng::new(8));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn update_history_follows_trajectory_rule() {
        let p = d(&[0.5, 0.5]);
        let target = ConstantModel::new(p.clone());
        let s = src(p);
        let ctx = Context::from_text(vec![]);
        let mut cache = HistoryCache::new(1, Window::All);
        let block = crate::decode::draft_block(&s, &ctx, 3, DecodeMode::Greedy, &mut Rng::new(0));
        let vr = crate::decode::verify_greedy(&target, &ctx, &block);
        assert_eq!(vr.accepted_count, 3);
        update_history(&mut cache, &block, &vr).unwrap();
        assert_eq!(cache.len(), 3);
        assert_eq!(cache.next_position(), 4);

        // rejection at the first position records just that position
        let reject_target = ConstantModel::point_mass(2, TokenId(1));
        let ctx2 = ctx.extended(&vr.emitted_tokens);
        let block2 = crate::decode::draft_block(&s, &ctx2, 3, DecodeMode::Greedy, &mut Rng::new(0));
        let vr2 = crate::decode::verify_greedy(&reject_target, &ctx2, &block2);
        assert_eq!(vr2.accepted_count, 0);
        update_history(&mut cache, &block2, &vr2).unwrap();
        assert_eq!(cache.len(), 4);
        assert_eq!(cache.entries()[3].realized, TokenId(1));
        let positions: Vec<usize> = cache.entries().iter().map(|e| e.position).collect();
        assert_eq!(positions, vec![0, 1, 2, 4]);
        assert!(positions.windows(2).all(|x| x[0] < x[1]));
        assert_eq!(reject_target.vocab_size(), 2);
    }

    #[test]
    fn update_history_rejects_mismatched_pairs() {
        let p = d(&[0.5, 0.5]);
        let s = src(p.clone());
        let ctx = Context::from_text(vec![]);
        let block = crate::decode::draft_block(&s, &ctx, 2, DecodeMode::Greedy, &mut Rng::new(0));
        let bad = VerificationResult {
            accepted_count: 2,
            emitted_tokens: tokens(&[0, 0]),
            target_dists: vec![p.clone(); 3],
        };
        let mut cache = HistoryCache::new(1, Window::All);
        assert!(matches!(update_history(&mut cache, &block, &bad), Err(Error::InconsistentPair(_))));
        let mut two = HistoryCache::new(2, Window::All);
        let ok = crate::decode::verify_greedy(&ConstantModel::new(p), &ctx, &block);
        assert!(update_history(&mut two, &block, &ok).is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(WeightPolicy::Grid { n: 10 }.validate(3).is_err());
        assert!(WeightPolicy::Grid { n: 0 }.validate(2).is_err());
        assert!(WeightPolicy::SoftmaxInverseError { tau: -1.0 }.validate(2).is_err());
        assert!(WeightPolicy::Fixed { weights: w(&[1.0]) }.validate(2).is_err());
        let p: WeightPolicy = serde_json::from_str(r#"{"kind":"grid","n":10}"#).unwrap();
        assert_eq!(p, WeightPolicy::Grid { n: 10 });
        let c: SelectionCriterion = serde_json::from_str(r#"{"kind":"soft_kl"}"#).unwrap();
        assert_eq!(c, SelectionCriterion::soft_kl());
    }
}
