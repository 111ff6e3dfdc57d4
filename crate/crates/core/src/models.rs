//! Next-token distribution providers and the context transforms that turn one
//! shared model into several drafting methods.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Gamma};
use serde::{Deserialize, Serialize};

use crate::dist::{splitmix64, Distribution};
use crate::error::{Error, Result};

/// A vocabulary index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

/// Converts a slice of raw ids.
pub fn tokens(ids: &[u32]) -> Vec<TokenId> {
    ids.iter().copied().map(TokenId).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Text,
    Visual,
    System,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub tokens: Vec<TokenId>,
}

impl Segment {
    pub fn new(kind: SegmentKind, tokens: Vec<TokenId>) -> Self {
        Self { kind, tokens }
    }
}

/// Prompt segments plus the tokens generated so far.
///
/// Segments are shared behind an `Arc`; extending a context only copies the
/// generated suffix.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Context {
    segments: Arc<Vec<Segment>>,
    generated: Vec<TokenId>,
}

impl Context {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self {
            segments: Arc::new(segments),
            generated: Vec::new(),
        }
    }

    /// A context holding a single TEXT segment.
    pub fn from_text(tokens: Vec<TokenId>) -> Self {
        Self::new(vec![Segment::new(SegmentKind::Text, tokens)])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.generated
    }

    pub fn push(&mut self, token: TokenId) {
        self.generated.push(token);
    }

    pub fn extend_generated(&mut self, toks: &[TokenId]) {
        self.generated.extend_from_slice(toks);
    }

    /// A copy of this context with `toks` appended to the generated suffix.
    pub fn extended(&self, toks: &[TokenId]) -> Context {
        let mut generated = Vec::with_capacity(self.generated.len() + toks.len());
        generated.extend_from_slice(&self.generated);
        generated.extend_from_slice(toks);
        Context {
            segments: Arc::clone(&self.segments),
            generated,
        }
    }

    fn with_segments(&self, segments: Vec<Segment>) -> Context {
        Context {
            segments: Arc::new(segments),
            generated: self.generated.clone(),
        }
    }

    /// All tokens in order: segments first, then generated.
    pub fn tokens(&self) -> impl DoubleEndedIterator<Item = TokenId> + '_ {
        self.segments
            .iter()
            .flat_map(|s| s.tokens.iter().copied())
            .chain(self.generated.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.tokens.len()).sum::<usize>() + self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The last `k` tokens, or `None` when the context is shorter than `k`.
    pub fn suffix(&self, k: usize) -> Option<Vec<TokenId>> {
        if self.len() < k {
            return None;
        }
        let mut out: Vec<TokenId> = self.tokens().rev().take(k).collect();
        out.reverse();
        Some(out)
    }
}

/// Anything that maps a context to a next-token distribution.
///
/// Implementations must be deterministic: equal contexts give identical
/// distributions.
pub trait SequenceModel: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn next_distribution(&self, ctx: &Context) -> Distribution;
}

impl<M: SequenceModel + ?Sized> SequenceModel for Arc<M> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn next_distribution(&self, ctx: &Context) -> Distribution {
        (**self).next_distribution(ctx)
    }
}

impl<M: SequenceModel + ?Sized> SequenceModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn next_distribution(&self, ctx: &Context) -> Distribution {
        (**self).next_distribution(ctx)
    }
}

/// Add-λ smoothed k-gram model.
#[derive(Clone, Debug, PartialEq)]
pub struct KgramModel {
    k: usize,
    lambda: f64,
    vocab_size: usize,
    counts: BTreeMap<Vec<TokenId>, Vec<u64>>,
}

/// On-disk snapshot of a [`KgramModel`]. `counts` holds `[context, per-token counts]` pairs.
#[derive(Serialize, Deserialize)]
struct KgramSnapshot {
    k: usize,
    lambda: f64,
    vocab_size: usize,
    counts: Vec<(Vec<u32>, Vec<u64>)>,
}

/// Counts every length-`k+1` window inside each document.
pub fn train_kgram(
    corpus: &[Vec<TokenId>],
    k: usize,
    lambda: f64,
    vocab_size: usize,
) -> Result<KgramModel> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::BadParams(format!("lambda must be > 0, got {lambda}")));
    }
    if vocab_size == 0 {
        return Err(Error::BadParams("vocab_size must be >= 1".into()));
    }
    let mut counts: BTreeMap<Vec<TokenId>, Vec<u64>> = BTreeMap::new();
    for doc in corpus {
        if let Some(&bad) = doc.iter().find(|t| t.index() >= vocab_size) {
            return Err(Error::TokenOutOfVocab {
                token: bad.0,
                vocab_size,
            });
        }
        for window in doc.windows(k + 1) {
            let (ctx, next) = window.split_at(k);
            counts
                .entry(ctx.to_vec())
                .or_insert_with(|| vec![0; vocab_size])[next[0].index()] += 1;
        }
    }
    Ok(KgramModel {
        k,
        lambda,
        vocab_size,
        counts,
    })
}

impl KgramModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn to_json(&self) -> String {
        let snap = KgramSnapshot {
            k: self.k,
            lambda: self.lambda,
            vocab_size: self.vocab_size,
            counts: self
                .counts
                .iter()
                .map(|(c, n)| (c.iter().map(|t| t.0).collect(), n.clone()))
                .collect(),
        };
        serde_json::to_string(&snap).expect("snapshot serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let snap: KgramSnapshot = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if snap.lambda.is_nan() || snap.lambda <= 0.0 || snap.vocab_size == 0 {
            return Err("snapshot has invalid lambda or vocab_size".into());
        }
        let mut counts = BTreeMap::new();
        for (ctx, row) in snap.counts {
            if ctx.len() != snap.k || row.len() != snap.vocab_size {
                return Err(format!(
                    "count row shape ({}, {}) does not match k={} vocab={}",
                    ctx.len(),
                    row.len(),
                    snap.k,
                    snap.vocab_size
                ));
            }
            if ctx.iter().any(|&t| t as usize >= snap.vocab_size) {
                return Err("context token outside vocabulary".into());
            }
            counts.insert(tokens(&ctx), row);
        }
        Ok(Self {
            k: snap.k,
            lambda: snap.lambda,
            vocab_size: snap.vocab_size,
            counts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|m| Error::parse(path, m))
    }
}

impl SequenceModel for KgramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, ctx: &Context) -> Distribution {
        let row = ctx.suffix(self.k).and_then(|s| self.counts.get(&s));
        match row {
            Some(row) => {
                let mass = row.iter().map(|&c| c as f64 + self.lambda).collect();
                Distribution::from_mass(mass).expect("smoothed counts are positive")
            }
            None => Distribution::uniform(self.vocab_size),
        }
    }
}

/// Pseudo-random model: every distinct conditioning context maps to its own
/// Dirichlet(`concentration`) draw, seeded by a hash of `(seed, context)`.
///
/// With `order = Some(k)` only the last `k` tokens condition the draw;
/// `None` conditions on the full flattened context.
pub struct SyntheticOracle {
    seed: u64,
    concentration: f64,
    vocab_size: usize,
    order: Option<usize>,
    memo: Mutex<HashMap<u64, Distribution>>,
}

impl SyntheticOracle {
    pub fn new(seed: u64, concentration: f64, vocab_size: usize, order: Option<usize>) -> Result<Self> {
        if !(concentration > 0.0 && concentration.is_finite()) {
            return Err(Error::BadParams(format!(
                "concentration must be > 0, got {concentration}"
            )));
        }
        if vocab_size == 0 {
            return Err(Error::BadParams("vocab_size must be >= 1".into()));
        }
        Ok(Self {
            seed,
            concentration,
            vocab_size,
            order,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn context_key(&self, ctx: &Context) -> u64 {
        // FNV-1a over the conditioning tokens, then mixed with the seed
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let n = ctx.len();
        let skip = match self.order {
            Some(k) => n.saturating_sub(k),
            None => 0,
        };
        feed((n - skip) as u64);
        for t in ctx.tokens().skip(skip) {
            feed(t.0 as u64);
        }
        splitmix64(h ^ splitmix64(self.seed))
    }

    fn draw(&self, key: u64) -> Distribution {
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let gamma = Gamma::new(self.concentration, 1.0).expect("validated concentration");
        let mass: Vec<f64> = (0..self.vocab_size).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = mass.iter().sum();
        if total > 0.0 && total.is_finite() {
            Distribution::from_mass(mass).expect("positive gamma mass")
        } else {
            // every gamma variate underflowed; fall back to a point mass
            let idx = (key % self.vocab_size as u64) as u32;
            Distribution::point_mass(self.vocab_size, TokenId(idx))
        }
    }
}

impl Clone for SyntheticOracle {
    fn clone(&self) -> Self {
        Self {
            seed: self.seed,
            concentration: self.concentration,
            vocab_size: self.vocab_size,
            order: self.order,
            memo: Mutex::new(HashMap::new()),
        }
    }
}

impl fmt::Debug for SyntheticOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SyntheticOracle")
            .field("seed", &self.seed)
            .field("concentration", &self.concentration)
            .field("vocab_size", &self.vocab_size)
            .field("order", &self.order)
            .finish()
    }
}

impl SequenceModel for SyntheticOracle {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, ctx: &Context) -> Distribution {
        let key = self.context_key(ctx);
        let mut memo = self.memo.lock().expect("memo lock poisoned");
        memo.entry(key).or_insert_with(|| self.draw(key)).clone()
    }
}

/// Ignores its context and always returns the same distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantModel {
    dist: Distribution,
}

impl ConstantModel {
    pub fn new(dist: Distribution) -> Self {
        Self { dist }
    }

    pub fn point_mass(vocab_size: usize, token: TokenId) -> Self {
        Self::new(Distribution::point_mass(vocab_size, token))
    }
}

impl SequenceModel for ConstantModel {
    fn vocab_size(&self) -> usize {
        self.dist.vocab_size()
    }

    fn next_distribution(&self, _ctx: &Context) -> Distribution {
        self.dist.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    DropVisual,
    SummarizeVisual,
    PoolVisual,
}

/// Parameters for [`make_transform`]; only the ones the kind uses are read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformParams {
    pub separator: TokenId,
    pub summary_len: usize,
    pub stride: usize,
}

impl Default for TransformParams {
    fn default() -> Self {
        Self {
            separator: TokenId(b'\n' as u32),
            summary_len: 4,
            stride: 2,
        }
    }
}

/// A pure rewrite of the prompt segments. Generated tokens are never touched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Full context (multimodal drafting).
    Identity,
    /// Each VISUAL segment collapses to one separator token (text-only drafting).
    DropVisual { separator: TokenId },
    /// Each VISUAL segment becomes its most frequent tokens (caption drafting).
    SummarizeVisual { length: usize },
    /// Every `stride`-th VISUAL token is kept (pooled drafting).
    PoolVisual { stride: usize },
}

pub fn make_transform(kind: TransformKind, params: &TransformParams) -> Result<Transform> {
    let t = match kind {
        TransformKind::Identity => Transform::Identity,
        TransformKind::DropVisual => Transform::DropVisual {
            separator: params.separator,
        },
        TransformKind::SummarizeVisual => Transform::SummarizeVisual {
            length: params.summary_len,
        },
        TransformKind::PoolVisual => Transform::PoolVisual {
            stride: params.stride,
        },
    };
    t.validate()?;
    Ok(t)
}

impl Transform {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Transform::PoolVisual { stride } if stride < 2 => Err(Error::BadParams(format!(
                "pool stride must be >= 2, got {stride}"
            ))),
            Transform::SummarizeVisual { length: 0 } => {
                Err(Error::BadParams("summary length must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, ctx: &Context) -> Context {
        if matches!(self, Transform::Identity) {
            return ctx.clone();
        }
        let segments = ctx
            .segments()
            .iter()
            .map(|seg| {
                if seg.kind != SegmentKind::Visual {
                    return seg.clone();
                }
                let tokens = match *self {
                    Transform::Identity => unreachable!(),
                    Transform::DropVisual { separator } => vec![separator],
                    Transform::PoolVisual { stride } => {
                        seg.tokens.iter().copied().step_by(stride).collect()
                    }
                    Transform::SummarizeVisual { length } => summarize(&seg.tokens, length),
                };
                Segment::new(SegmentKind::Visual, tokens)
            })
            .collect();
        ctx.with_segments(segments)
    }
}

/// The `length` most frequent tokens (ties to earlier first occurrence),
/// emitted in first-occurrence order.
fn summarize(seg: &[TokenId], length: usize) -> Vec<TokenId> {
    let mut stats: Vec<(TokenId, usize, usize)> = Vec::new(); // (token, first_pos, count)
    let mut slot: HashMap<TokenId, usize> = HashMap::new();
    for (pos, &t) in seg.iter().enumerate() {
        match slot.get(&t) {
            Some(&i) => stats[i].2 += 1,
            None => {
                slot.insert(t, stats.len());
                stats.push((t, pos, 1));
            }
        }
    }
    let mut ranked = stats.clone();
    ranked.sort_by(|a, b| b.2.cmp(&a.2).then(a.1.cmp(&b.1)));
    ranked.truncate(length);
    ranked.sort_by_key(|s| s.1);
    ranked.into_iter().map(|s| s.0).collect()
}

/// A drafting method: a shared model seen through a context transform.
#[derive(Clone)]
pub struct DraftSource {
    pub name: String,
    pub model: Arc<dyn SequenceModel>,
    pub transform: Transform,
}

impl DraftSource {
    pub fn new(
        name: impl Into<String>,
        model: Arc<dyn SequenceModel>,
        transform: Transform,
    ) -> Result<Self> {
        transform.validate()?;
        if let Transform::DropVisual { separator } = transform {
            if separator.index() >= model.vocab_size() {
                return Err(Error::TokenOutOfVocab {
                    token: separator.0,
                    vocab_size: model.vocab_size(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            model,
            transform,
        })
    }

    /// Untransformed view of `model`.
    pub fn identity(name: impl Into<String>, model: Arc<dyn SequenceModel>) -> Self {
        Self {
            name: name.into(),
            model,
            transform: Transform::Identity,
        }
    }
}

impl fmt::Debug for DraftSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DraftSource")
            .field("name", &self.name)
            .field("vocab_size", &self.model.vocab_size())
            .field("transform", &self.transform)
            .finish()
    }
}

impl SequenceModel for DraftSource {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn next_distribution(&self, ctx: &Context) -> Distribution {
        if matches!(self.transform, Transform::Identity) {
            self.model.next_distribution(ctx)
        } else {
            self.model.next_distribution(&self.transform.apply(ctx))
        }
    }
}

/// Byte-level tokenization of a UTF-8 corpus, one document per non-empty line.
pub fn load_corpus(path: &Path) -> Result<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(tokenize_lines(&text))
}

pub fn tokenize_lines(text: &str) -> Vec<Vec<TokenId>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.bytes().map(|b| TokenId(b as u32)).collect())
        .collect()
}
