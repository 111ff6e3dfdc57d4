//! Config-driven experiments: build models and prompts from a TOML file, run
//! every prompt through each configured method, and write per-method JSON
//! summaries and CSV weight trajectories.
//!
//! A config describes one scenario. Models are declared once under
//! `[models.<name>]` and shared by the target and the draft sources, which
//! differ only by context transform. See `docs/config.md` for the full schema.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::decode::DecodeConfig;
use crate::dist::{Distribution, Rng, WeightVector};
use crate::error::{Error, Result};
use crate::metrics::{expected_speedup, pooled_block_efficiency, BlockRecord, LatencyModel, LatencyPreset, RunRecords};
use crate::models::{
    load_corpus, tokenize_lines, train_kgram, ConstantModel, Context, DraftSource, KgramModel, Segment, SegmentKind,
    SequenceModel, SyntheticOracle, TokenId, Transform,
};
use crate::session::{run_session, Pipeline};
use crate::tabed::{SelectionCriterion, WeightPolicy, Window};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub seed: u64,
    #[serde(default)]
    pub decode: DecodeConfig,
    pub models: BTreeMap<String, ModelSpec>,
    pub target: ViewSpec,
    pub sources: Vec<SourceSpec>,
    pub prompts: PromptSpec,
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub latency: LatencySpec,
    #[serde(default)]
    pub output: OutputSpec,
    /// Directory relative paths are resolved against; set by [`ExperimentConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Trained at load time from a byte-level corpus.
    Kgram {
        corpus: PathBuf,
        k: usize,
        lambda: f64,
        #[serde(default = "byte_vocab")]
        vocab_size: usize,
    },
    /// A saved k-gram snapshot.
    Snapshot { path: PathBuf },
    Synthetic {
        seed: u64,
        concentration: f64,
        vocab_size: usize,
        /// Conditioning length; the full context when absent.
        #[serde(default)]
        order: Option<usize>,
    },
    Constant { probs: Vec<f64> },
}

fn byte_vocab() -> usize {
    256
}

/// A model seen through a context transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub model: String,
    #[serde(default = "identity")]
    pub transform: Transform,
}

fn identity() -> Transform {
    Transform::Identity
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub name: String,
    pub model: String,
    #[serde(default = "identity")]
    pub transform: Transform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PromptSpec {
    /// Random tokens laid out as the given segments.
    Synthetic { count: usize, segments: Vec<SegmentShape> },
    /// The first `prefix_len` bytes of each of the first `count` lines.
    File {
        path: PathBuf,
        count: usize,
        prefix_len: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentShape {
    pub kind: SegmentKind,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    Single {
        #[serde(default)]
        name: Option<String>,
        source: String,
        #[serde(default)]
        tree_width: Option<usize>,
    },
    /// Weighted mixture of every configured source.
    Ensemble {
        #[serde(default)]
        name: Option<String>,
        policy: WeightPolicy,
        #[serde(default)]
        criterion: SelectionCriterion,
        #[serde(default)]
        window: Window,
        #[serde(default)]
        tree_width: Option<usize>,
    },
}

impl MethodSpec {
    /// Label used in reports; derived from the method settings unless given.
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Single {
                name: Some(n), ..
            }
            | MethodSpec::Ensemble {
                name: Some(n), ..
            } => n.clone(),
            MethodSpec::Single {
                source, tree_width, ..
            } => with_width(format!("single-{source}"), *tree_width),
            MethodSpec::Ensemble {
                policy,
                criterion,
                window,
                tree_width,
                ..
            } => {
                let base = match policy {
                    WeightPolicy::Fixed { weights } => {
                        let w: Vec<String> = weights.as_slice().iter().map(|x| format!("{x}")).collect();
                        format!("fixed-{}", w.join("_"))
                    }
                    WeightPolicy::Grid { n } => format!("tabed-grid{n}-{}-h-{window}", criterion.name()),
                    WeightPolicy::SoftmaxInverseError { tau } => {
                        format!("tabed-softmax{tau}-{}-h-{window}", criterion.name())
                    }
                    WeightPolicy::Adaboost { c } => format!("tabed-adaboost{c}-{}-h-{window}", criterion.name()),
                };
                with_width(base, *tree_width)
            }
        }
    }

    pub fn tree_width(&self) -> Option<usize> {
        match self {
            MethodSpec::Single { tree_width, .. } | MethodSpec::Ensemble { tree_width, .. } => *tree_width,
        }
    }
}

fn with_width(base: String, width: Option<usize>) -> String {
    match width {
        Some(d) => format!("{base}-tree{d}"),
        None => base,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatencySpec {
    Preset { preset: LatencyPreset },
    Ratio { ratio: f64 },
}

impl Default for LatencySpec {
    fn default() -> Self {
        LatencySpec::Preset {
            preset: LatencyPreset::Target7bDraft68m,
        }
    }
}

impl LatencySpec {
    pub fn model(&self) -> Result<LatencyModel> {
        match self {
            LatencySpec::Preset { preset } => Ok(LatencyModel::preset(*preset)),
            LatencySpec::Ratio { ratio } => LatencyModel::new(*ratio),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigError(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::ConfigError(m) => Error::ConfigError(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir)
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::ConfigError(m));
        self.decode.validate().map_err(|e| Error::ConfigError(e.to_string()))?;
        if self.scenario.is_empty() {
            return cfg_err("scenario name is empty".into());
        }
        let known = |m: &str| self.models.contains_key(m);
        if !known(&self.target.model) {
            return cfg_err(format!("target refers to unknown model {:?}", self.target.model));
        }
        if self.sources.is_empty() {
            return cfg_err("at least one source is required".into());
        }
        let mut names = HashMap::new();
        for s in &self.sources {
            if !known(&s.model) {
                return cfg_err(format!("source {:?} refers to unknown model {:?}", s.name, s.model));
            }
            if names.insert(s.name.as_str(), ()).is_some() {
                return cfg_err(format!("duplicate source name {:?}", s.name));
            }
        }
        if self.methods.is_empty() {
            return cfg_err("at least one method is required".into());
        }
        let mut labels = HashMap::new();
        for m in &self.methods {
            if let MethodSpec::Single { source, .. } = m {
                if !names.contains_key(source.as_str()) {
                    return cfg_err(format!("method refers to unknown source {source:?}"));
                }
            }
            if let MethodSpec::Ensemble { policy, .. } = m {
                policy
                    .validate(self.sources.len())
                    .map_err(|e| Error::ConfigError(format!("{}: {e}", m.label())))?;
            }
            if m.tree_width() == Some(0) {
                return cfg_err(format!("{}: tree width must be >= 1", m.label()));
            }
            if labels.insert(m.label(), ()).is_some() {
                return cfg_err(format!("duplicate method label {:?}", m.label()));
            }
        }
        let count = match &self.prompts {
            PromptSpec::Synthetic { count, .. } | PromptSpec::File { count, .. } => *count,
        };
        if count == 0 {
            return cfg_err("prompt count must be >= 1".into());
        }
        self.latency.model().map_err(|e| Error::ConfigError(e.to_string()))?;
        Ok(())
    }
}

/// Builds one model from its spec.
pub fn build_model(spec: &ModelSpec, cfg: &ExperimentConfig) -> Result<Arc<dyn SequenceModel>> {
    Ok(match spec {
        ModelSpec::Kgram {
            corpus,
            k,
            lambda,
            vocab_size,
        } => {
            let docs = load_corpus(&cfg.resolve(corpus))?;
            Arc::new(train_kgram(&docs, *k, *lambda, *vocab_size)?)
        }
        ModelSpec::Snapshot { path } => Arc::new(KgramModel::load(&cfg.resolve(path))?),
        ModelSpec::Synthetic {
            seed,
            concentration,
            vocab_size,
            order,
        } => Arc::new(SyntheticOracle::new(*seed, *concentration, *vocab_size, *order)?),
        ModelSpec::Constant { probs } => Arc::new(ConstantModel::new(Distribution::new(probs.clone())?)),
    })
}

/// Everything a run needs, built from a config.
pub struct Workbench {
    pub target: DraftSource,
    pub sources: Vec<DraftSource>,
    pub prompts: Vec<Context>,
}

impl Workbench {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut models: HashMap<&str, Arc<dyn SequenceModel>> = HashMap::new();
        for (name, spec) in &cfg.models {
            models.insert(name, build_model(spec, cfg)?);
        }
        let target = DraftSource::new("target", models[cfg.target.model.as_str()].clone(), cfg.target.transform.clone())?;
        let vocab = target.vocab_size();
        let sources = cfg
            .sources
            .iter()
            .map(|s| DraftSource::new(s.name.clone(), models[s.model.as_str()].clone(), s.transform.clone()))
            .collect::<Result<Vec<_>>>()?;
        if let Some(s) = sources.iter().find(|s| s.vocab_size() != vocab) {
            return Err(Error::ConfigError(format!(
                "source {:?} has vocabulary {} but the target has {vocab}",
                s.name,
                s.vocab_size()
            )));
        }
        let prompts = build_prompts(cfg, vocab)?;
        Ok(Self {
            target,
            sources,
            prompts,
        })
    }

    pub fn pipeline(&self, method: &MethodSpec) -> Pipeline {
        let p = match method {
            MethodSpec::Single { source, .. } => {
                let s = self.sources.iter().find(|s| &s.name == source).expect("validated source name");
                Pipeline::single(s.clone())
            }
            MethodSpec::Ensemble {
                policy,
                criterion,
                window,
                ..
            } => Pipeline::tabed(self.sources.clone(), policy.clone(), *criterion, *window),
        };
        match method.tree_width() {
            Some(d) => p.with_tree(d),
            None => p,
        }
    }
}

/// Stream index reserved for prompt generation.
const PROMPT_STREAM: u64 = u64::MAX;

fn build_prompts(cfg: &ExperimentConfig, vocab: usize) -> Result<Vec<Context>> {
    match &cfg.prompts {
        PromptSpec::Synthetic { count, segments } => {
            let mut rng = Rng::new(Rng::derive_seed(cfg.seed, PROMPT_STREAM));
            Ok((0..*count)
                .map(|_| {
                    let segs = segments
                        .iter()
                        .map(|shape| {
                            let toks = (0..shape.len)
                                .map(|_| TokenId(((rng.uniform() * vocab as f64) as usize).min(vocab - 1) as u32))
                                .collect();
                            Segment::new(shape.kind, toks)
                        })
                        .collect();
                    Context::new(segs)
                })
                .collect())
        }
        PromptSpec::File {
            path,
            count,
            prefix_len,
        } => {
            let path = cfg.resolve(path);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let docs = tokenize_lines(&text);
            if docs.len() < *count {
                return Err(Error::ConfigError(format!(
                    "{} has {} documents, {count} prompts requested",
                    path.display(),
                    docs.len()
                )));
            }
            docs.into_iter()
                .take(*count)
                .map(|mut d| {
                    d.truncate(*prefix_len);
                    if let Some(t) = d.iter().find(|t| t.index() >= vocab) {
                        return Err(Error::TokenOutOfVocab {
                            token: t.0,
                            vocab_size: vocab,
                        });
                    }
                    Ok(Context::from_text(d))
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub index: usize,
    pub seed: u64,
    pub prompt_len: usize,
    pub generated: Vec<TokenId>,
    pub block_efficiency: f64,
    pub blocks: Vec<BlockRecord>,
}

/// JSON summary of one method on one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub mode: crate::decode::DecodeMode,
    pub gamma: usize,
    /// Tree width; `null` for linear drafting.
    pub d: Option<usize>,
    pub sources: Vec<String>,
    pub num_blocks: usize,
    pub total_tokens: usize,
    pub block_efficiency: f64,
    pub latency_ratio: f64,
    pub modeled_speedup: f64,
    pub prompts: Vec<PromptRecord>,
}

impl RunReport {
    /// Block records of every prompt, in prompt order.
    pub fn runs(&self) -> Vec<RunRecords> {
        self.prompts
            .iter()
            .map(|p| RunRecords {
                seed: p.seed,
                gamma: self.gamma,
                blocks: p.blocks.clone(),
            })
            .collect()
    }

    pub fn num_sources(&self) -> usize {
        self.prompts
            .iter()
            .flat_map(|p| p.blocks.first())
            .map(|b| b.weight_used.len())
            .next()
            .unwrap_or(self.sources.len())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let r: RunReport = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(format!("unsupported schema_version {}", r.schema_version));
        }
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|m| Error::parse(path, m))
    }

    /// Weight trajectory as CSV: `block_index, position, w_0.., accepted_count`.
    /// `block_index` runs across prompts; `position` restarts at 0 for each prompt.
    pub fn trajectory_csv(&self) -> String {
        let m = self.num_sources();
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["block_index".to_string(), "position".to_string()];
        header.extend((0..m).map(|i| format!("w_{i}")));
        header.push("accepted_count".into());
        wtr.write_record(&header).expect("in-memory write");
        let blocks = self.prompts.iter().flat_map(|p| &p.blocks);
        for (i, b) in blocks.enumerate() {
            let mut row = vec![i.to_string(), b.position.to_string()];
            row.extend(b.weight_used.iter().map(|w| w.to_string()));
            row.push(b.accepted_count.to_string());
            wtr.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn file_stem(&self) -> String {
        sanitize(&format!("{}__{}", self.scenario, self.method))
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Runs one method over every prompt. Prompts run on scoped threads; results
/// are gathered in prompt order.
pub fn run_method(bench: &Workbench, method: &MethodSpec, cfg: &ExperimentConfig) -> Result<RunReport> {
    let pipeline = bench.pipeline(method);
    let n = bench.prompts.len();
    let workers = thread::available_parallelism().map(|p| p.get()).unwrap_or(1).min(n).max(1);
    let chunk = n.div_ceil(workers);
    let mut outputs: Vec<Result<PromptRecord>> = Vec::with_capacity(n);
    thread::scope(|scope| {
        let handles: Vec<_> = bench
            .prompts
            .chunks(chunk)
            .enumerate()
            .map(|(c, prompts)| {
                let pipeline = &pipeline;
                scope.spawn(move || {
                    prompts
                        .iter()
                        .enumerate()
                        .map(|(j, prompt)| {
                            let index = c * chunk + j;
                            let seed = Rng::derive_seed(cfg.seed, index as u64);
                            let dc = DecodeConfig {
                                seed,
                                ..cfg.decode.clone()
                            };
                            let out = run_session(&bench.target, pipeline, prompt, &dc)?;
                            Ok(PromptRecord {
                                index,
                                seed,
                                prompt_len: prompt.len(),
                                block_efficiency: crate::metrics::block_efficiency(&out.records)?,
                                generated: out.tokens,
                                blocks: out.records.blocks,
                            })
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            outputs.extend(h.join().expect("session thread panicked"));
        }
    });
    let prompts = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let runs: Vec<RunRecords> = prompts
        .iter()
        .map(|p| RunRecords {
            seed: p.seed,
            gamma: cfg.decode.gamma,
            blocks: p.blocks.clone(),
        })
        .collect();
    let tau = pooled_block_efficiency(&runs)?;
    let latency = cfg.latency.model()?;
    let sources = match method {
        MethodSpec::Single { source, .. } => vec![source.clone()],
        MethodSpec::Ensemble { .. } => bench.sources.iter().map(|s| s.name.clone()).collect(),
    };
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        scenario: cfg.scenario.clone(),
        method: method.label(),
        seed: cfg.seed,
        mode: cfg.decode.mode,
        gamma: cfg.decode.gamma,
        d: method.tree_width(),
        sources,
        num_blocks: runs.iter().map(RunRecords::num_blocks).sum(),
        total_tokens: prompts.iter().map(|p| p.generated.len()).sum(),
        block_efficiency: tau,
        latency_ratio: latency.ratio,
        modeled_speedup: expected_speedup(tau, cfg.decode.gamma, &latency)?,
        prompts,
    })
}

/// Runs every method without touching the filesystem beyond model loading.
pub fn run_reports(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    let bench = Workbench::build(cfg)?;
    cfg.methods.iter().map(|m| run_method(&bench, m, cfg)).collect()
}

/// Paths written for one method.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WrittenReport {
    pub summary: PathBuf,
    pub trajectory: PathBuf,
}

/// Runs the experiment and writes `<scenario>__<method>.json` and
/// `<scenario>__<method>.csv` per method into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<(RunReport, WrittenReport)>> {
    let reports = run_reports(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(reports.len());
    for r in reports {
        let stem = r.file_stem();
        let summary = out_dir.join(format!("{stem}.json"));
        let trajectory = out_dir.join(format!("{stem}.csv"));
        fs::write(&summary, r.to_json()).map_err(|e| Error::io(&summary, e))?;
        fs::write(&trajectory, r.trajectory_csv()).map_err(|e| Error::io(&trajectory, e))?;
        written.push((r, WrittenReport { summary, trajectory }));
    }
    Ok(written)
}

/// Trains every corpus-backed k-gram model in the config and saves
/// `<name>.json` snapshots into `out_dir`.
pub fn train_models(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    for (name, spec) in &cfg.models {
        if let ModelSpec::Kgram {
            corpus,
            k,
            lambda,
            vocab_size,
        } = spec
        {
            let docs = load_corpus(&cfg.resolve(corpus))?;
            let model = train_kgram(&docs, *k, *lambda, *vocab_size)?;
            let path = out_dir.join(format!("{}.json", sanitize(name)));
            model.save(&path)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Fixed one-hot weights over `m` sources, as a method spec.
pub fn fixed_method(weights: Vec<f64>, tree_width: Option<usize>) -> Result<MethodSpec> {
    Ok(MethodSpec::Ensemble {
        name: None,
        policy: WeightPolicy::Fixed {
            weights: WeightVector::new(weights)?,
        },
        criterion: SelectionCriterion::default(),
        window: Window::All,
        tree_width,
    })
}
