//! Probability-vector arithmetic over a finite vocabulary.
//!
//! Everything here is exact `f64` arithmetic with fixed summation order, so
//! results are bit-reproducible for a given input. The only mutable state is
//! [`Rng`], which is owned by a single caller.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::TokenId;

/// Absolute tolerance for "sums to one".
pub const SUM_TOLERANCE: f64 = 1e-9;
/// Largest deviation from one that constructors silently renormalize.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;
/// Default additive uniform floor applied to the second argument of the KL.
pub const DEFAULT_KL_FLOOR: f64 = 1e-8;
/// Upper bound accepted for the KL floor.
pub const MAX_KL_FLOOR: f64 = 1e-3;
/// Residual mass below this is treated as zero.
pub const RESIDUAL_EPS: f64 = 1e-12;

fn validate_simplex(values: Vec<f64>) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty);
    }
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidProbability { index, value });
        }
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() <= SUM_TOLERANCE {
        return Ok(values);
    }
    if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
        return Err(Error::NotNormalized { sum });
    }
    Ok(values.into_iter().map(|v| v / sum).collect())
}

/// A probability vector over `vocab_size` tokens.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Builds a distribution, renormalizing small deviations from one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Ok(Self {
            probs: validate_simplex(probs)?,
        })
    }

    /// Normalizes an arbitrary non-negative mass vector.
    pub fn from_mass(mass: Vec<f64>) -> Result<Self> {
        if mass.is_empty() {
            return Err(Error::Empty);
        }
        for (index, &value) in mass.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidProbability { index, value });
            }
        }
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return Err(Error::NotNormalized { sum: total });
        }
        Ok(Self {
            probs: mass.into_iter().map(|m| m / total).collect(),
        })
    }

    pub fn uniform(vocab_size: usize) -> Self {
        assert!(vocab_size > 0, "vocabulary must be non-empty");
        Self {
            probs: vec![1.0 / vocab_size as f64; vocab_size],
        }
    }

    pub fn point_mass(vocab_size: usize, token: TokenId) -> Self {
        assert!(token.index() < vocab_size, "token outside vocabulary");
        let mut probs = vec![0.0; vocab_size];
        probs[token.index()] = 1.0;
        Self { probs }
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token.index()]
    }

    /// Highest-probability token, lowest index on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }

    fn check_same_vocab(&self, other: &Distribution) -> Result<()> {
        if self.vocab_size() != other.vocab_size() {
            return Err(Error::DimensionMismatch {
                expected: self.vocab_size(),
                got: other.vocab_size(),
            });
        }
        Ok(())
    }
}

impl<'de> Deserialize<'de> for Distribution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let probs = Vec::<f64>::deserialize(d)?;
        Distribution::new(probs).map_err(serde::de::Error::custom)
    }
}

/// Convex mixing weights over `m` drafting sources.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        Ok(Self {
            weights: validate_simplex(weights)?,
        })
    }

    /// Normalizes non-negative raw scores; all-zero input yields uniform weights.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty);
        }
        let total: f64 = scores.iter().sum();
        if total > 0.0 {
            let d = Distribution::from_mass(scores)?;
            Ok(Self { weights: d.probs })
        } else {
            Ok(Self::uniform(scores.len()))
        }
    }

    pub fn uniform(m: usize) -> Self {
        assert!(m > 0, "need at least one source");
        Self {
            weights: vec![1.0 / m as f64; m],
        }
    }

    pub fn one_hot(m: usize, index: usize) -> Self {
        assert!(index < m, "one-hot index out of range");
        let mut weights = vec![0.0; m];
        weights[index] = 1.0;
        Self { weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

impl<'de> Deserialize<'de> for WeightVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let weights = Vec::<f64>::deserialize(d)?;
        WeightVector::new(weights).map_err(serde::de::Error::custom)
    }
}

/// Seeded, bit-reproducible random source.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Derives an independent stream seed from a base seed and a stream index.
    pub fn derive_seed(seed: u64, stream: u64) -> u64 {
        splitmix64(seed ^ splitmix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)))
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `Σ_i w_i · dists_i`.
pub fn weighted_average(dists: &[Distribution], w: &WeightVector) -> Result<Distribution> {
    if dists.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            got: dists.len(),
        });
    }
    let first = dists.first().ok_or(Error::Empty)?;
    let vocab = first.vocab_size();
    let mut out = vec![0.0; vocab];
    for (d, &wi) in dists.iter().zip(w.as_slice()) {
        first.check_same_vocab(d)?;
        if wi == 0.0 {
            continue;
        }
        for (o, &p) in out.iter_mut().zip(d.probs()) {
            *o += wi * p;
        }
    }
    Distribution::new(out)
}

/// `D(p ‖ q')` where `q' = (1 − floor)·q + floor·uniform`.
///
/// Terms with `p(y) = 0` contribute nothing. With `floor = 0` and
/// `q(y) = 0 < p(y)` the result is `+∞`.
pub fn kl_divergence(p: &Distribution, q: &Distribution, floor: f64) -> Result<f64> {
    p.check_same_vocab(q)?;
    if !(0.0..=MAX_KL_FLOOR).contains(&floor) {
        return Err(Error::BadParams(format!(
            "kl floor {floor} outside [0, {MAX_KL_FLOOR}]"
        )));
    }
    let u = 1.0 / p.vocab_size() as f64;
    let mut total = 0.0;
    for (&py, &qy) in p.probs().iter().zip(q.probs()) {
        if py == 0.0 {
            continue;
        }
        let qf = (1.0 - floor) * qy + floor * u;
        if qf == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += py * (py / qf).ln();
    }
    Ok(total.max(0.0))
}

/// Total variation distance `½ Σ |p − q|`.
pub fn tvd(p: &Distribution, q: &Distribution) -> Result<f64> {
    p.check_same_vocab(q)?;
    let s: f64 = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok((0.5 * s).min(1.0))
}

/// `norm(max(0, p − q))`, the law a rejected draft position is resampled from.
pub fn residual_distribution(p: &Distribution, q: &Distribution) -> Result<Distribution> {
    p.check_same_vocab(q)?;
    let mass: Vec<f64> = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| (a - b).max(0.0))
        .collect();
    let total: f64 = mass.iter().sum();
    if total <= RESIDUAL_EPS {
        return Err(Error::NoResidualMass);
    }
    Distribution::from_mass(mass)
}

/// Inverse-CDF sampling in token-index order. Consumes exactly one uniform draw.
pub fn sample(d: &Distribution, rng: &mut Rng) -> TokenId {
    let u = rng.uniform();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in d.probs().iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cum += p;
            if u < cum {
                return TokenId(i as u32);
            }
        }
    }
    // u landed in the rounding gap above the accumulated total
    TokenId(last_positive as u32)
}

/// The `width` most probable tokens, descending, lower index first on ties.
pub fn top_d(d: &Distribution, width: usize) -> Result<Vec<TokenId>> {
    if width == 0 || width > d.vocab_size() {
        return Err(Error::WidthOutOfRange {
            width,
            vocab_size: d.vocab_size(),
        });
    }
    let mut idx: Vec<usize> = (0..d.vocab_size()).collect();
    let probs = d.probs();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    Ok(idx
        .into_iter()
        .take(width)
        .map(|i| TokenId(i as u32))
        .collect())
}


#[cfg(test)]
mod tests {
    use super::testutil::random_dist;
    use super::*;
    use super::Rng;
    use proptest::prelude::*;

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    fn w(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn constructor_renormalizes_small_drift_and_rejects_large() {
        let x = Distribution::new(vec![0.5, 0.5 + 5e-7]).unwrap();
        assert!((x.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            Distribution::new(vec![0.5, 0.6]),
            Err(Error::NotNormalized { .. })
        ));
        assert!(matches!(
            Distribution::new(vec![1.5, -0.5]),
            Err(Error::InvalidProbability { index: 1, .. })
        ));
        assert!(matches!(Distribution::new(vec![]), Err(Error::Empty)));
        assert!(Distribution::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn weighted_average_examples() {
        let p = d(&[0.2, 0.8]);
        let q = d(&[0.6, 0.4]);
        assert_eq!(
            weighted_average(&[p.clone(), q.clone()], &w(&[1.0, 0.0])).unwrap(),
            p
        );
        let mixed = weighted_average(&[d(&[1.0, 0.0]), d(&[0.0, 1.0])], &w(&[0.5, 0.5])).unwrap();
        assert_eq!(mixed.probs(), &[0.5, 0.5]);
        assert!(matches!(
            weighted_average(std::slice::from_ref(&p), &w(&[0.5, 0.5])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(weighted_average(&[p, d(&[1.0, 0.0, 0.0])], &w(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn weighted_average_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dists: Vec<_> = (0..4).map(|_| random_dist(&mut rng, 8, false)).collect();
        let raw: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let weights = WeightVector::new(raw.iter().map(|x| x / total).collect()).unwrap();
        let out = weighted_average(&dists, &weights).unwrap();
        // independent oracle: per-token sum computed column-wise
        for y in 0..8 {
            let expected: f64 = (0..4)
                .map(|i| weights.as_slice()[i] * dists[i].probs()[y])
                .sum();
            assert!((out.probs()[y] - expected).abs() < 1e-12);
        }
        assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let p = d(&[0.3, 0.7]);
        assert_eq!(kl_divergence(&p, &p, 0.0).unwrap(), 0.0);
        let v = kl_divergence(&d(&[1.0, 0.0]), &d(&[0.5, 0.5]), 0.0).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let floored = kl_divergence(&d(&[0.5, 0.5]), &d(&[1.0, 0.0]), 1e-8).unwrap();
        assert!(floored.is_finite() && floored > 0.0);
        let unfloored = kl_divergence(&d(&[0.5, 0.5]), &d(&[1.0, 0.0]), 0.0).unwrap();
        assert!(unfloored.is_infinite());
        assert!(kl_divergence(&p, &p, 0.01).is_err());
        assert!(kl_divergence(&p, &d(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn tvd_examples() {
        let p = d(&[0.7, 0.3]);
        assert_eq!(tvd(&p, &p).unwrap(), 0.0);
        assert_eq!(tvd(&d(&[1.0, 0.0]), &d(&[0.0, 1.0])).unwrap(), 1.0);
        assert!((tvd(&p, &d(&[0.4, 0.6])).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn residual_examples() {
        assert_eq!(
            residual_distribution(&d(&[1.0, 0.0]), &d(&[0.0, 1.0]))
                .unwrap()
                .probs(),
            &[1.0, 0.0]
        );
        assert_eq!(
            residual_distribution(&d(&[0.6, 0.4]), &d(&[0.2, 0.8]))
                .unwrap()
                .probs(),
            &[1.0, 0.0]
        );
        let p = d(&[0.25, 0.75]);
        assert!(matches!(
            residual_distribution(&p, &p),
            Err(Error::NoResidualMass)
        ));
    }

    #[test]
    fn sample_point_masses() {
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            assert_eq!(sample(&d(&[1.0, 0.0, 0.0]), &mut rng), TokenId(0));
            assert_eq!(sample(&d(&[0.0, 0.0, 1.0]), &mut rng), TokenId(2));
        }
    }

    #[test]
    fn sample_fair_coin_frequency() {
        let mut rng = Rng::new(7);
        let coin = d(&[0.5, 0.5]);
        let n = 100_000;
        let zeros = (0..n).filter(|_| sample(&coin, &mut rng) == TokenId(0)).count();
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn top_d_examples() {
        assert_eq!(top_d(&d(&[0.1, 0.7, 0.2]), 1).unwrap(), vec![TokenId(1)]);
        assert_eq!(
            top_d(&d(&[0.5, 0.5]), 2).unwrap(),
            vec![TokenId(0), TokenId(1)]
        );
        assert_eq!(
            top_d(&d(&[0.2, 0.3, 0.5]), 2).unwrap(),
            vec![TokenId(2), TokenId(1)]
        );
        assert!(matches!(
            top_d(&d(&[0.5, 0.5]), 3),
            Err(Error::WidthOutOfRange { .. })
        ));
        assert!(top_d(&d(&[0.5, 0.5]), 0).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(d(&[0.25, 0.25, 0.5, 0.0]).argmax(), TokenId(2));
        assert_eq!(d(&[0.5, 0.5]).argmax(), TokenId(0));
    }

    fn arb_dist(vocab: usize) -> impl Strategy<Value = Distribution> {
        prop::collection::vec(0.0f64..1.0, vocab).prop_filter_map("zero mass", |m| {
            Distribution::from_mass(m).ok()
        })
    }

    proptest! {
        #[test]
        fn mix_is_convex(a in arb_dist(6), b in arb_dist(6), c in arb_dist(6), raw in prop::collection::vec(0.01f64..1.0, 3)) {
            let wv = WeightVector::from_scores(raw).unwrap();
            let srcs = [a, b, c];
            let out = weighted_average(&srcs, &wv).unwrap();
            for y in 0..6 {
                let lo = srcs.iter().map(|s| s.probs()[y]).fold(f64::INFINITY, f64::min);
                let hi = srcs.iter().map(|s| s.probs()[y]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.probs()[y] >= lo - 1e-12 && out.probs()[y] <= hi + 1e-12);
            }
        }

        #[test]
        fn kl_is_nonnegative_and_zero_on_floored_self(p in arb_dist(5), q in arb_dist(5)) {
            prop_assert!(kl_divergence(&p, &q, DEFAULT_KL_FLOOR).unwrap() >= 0.0);
            prop_assert!(kl_divergence(&p, &p, 0.0).unwrap() < 1e-12);
        }

        #[test]
        fn tvd_is_a_metric(p in arb_dist(5), q in arb_dist(5), r in arb_dist(5)) {
            let pq = tvd(&p, &q).unwrap();
            prop_assert!((pq - tvd(&q, &p).unwrap()).abs() < 1e-12);
            prop_assert!(pq <= tvd(&p, &r).unwrap() + tvd(&r, &q).unwrap() + 1e-12);
            prop_assert!((0.0..=1.0).contains(&pq));
        }

        #[test]
        fn residual_zero_where_target_not_above_draft(p in arb_dist(6), q in arb_dist(6)) {
            if let Ok(r) = residual_distribution(&p, &q) {
                for y in 0..6 {
                    if p.probs()[y] <= q.probs()[y] {
                        prop_assert_eq!(r.probs()[y], 0.0);
                    }
                }
            }
        }

        #[test]
        fn sampling_is_reproducible(p in arb_dist(7), seed in any::<u64>()) {
            let mut a = Rng::new(seed);
            let mut b = Rng::new(seed);
            let xs: Vec<_> = (0..32).map(|_| sample(&p, &mut a)).collect();
            let ys: Vec<_> = (0..32).map(|_| sample(&p, &mut b)).collect();
            prop_assert_eq!(xs, ys);
        }
    }
}
