//! Full decode sessions: repeat draft → verify → append until EOS or the
//! token budget, for linear, ensembled, and tree drafting.

use crate::decode::{draft_mixture, verify, DecodeConfig, DecodeMode};
use crate::dist::{Rng, WeightVector};
use crate::error::{Error, Result};
use crate::metrics::RunRecords;
use crate::models::{Context, DraftSource, SequenceModel, TokenId};
use crate::tabed::{select_weight, update_history, HistoryCache, SelectionCriterion, WeightPolicy, Window};
use crate::tree::{build_tree, mixture_expansion, update_history_tree, verify_tree_greedy};

#[derive(Clone, Debug)]
pub enum Drafter {
    Single(DraftSource),
    Tabed {
        sources: Vec<DraftSource>,
        policy: WeightPolicy,
        criterion: SelectionCriterion,
        window: Window,
    },
}

impl Drafter {
    pub fn sources(&self) -> &[DraftSource] {
        match self {
            Drafter::Single(s) => std::slice::from_ref(s),
            Drafter::Tabed { sources, .. } => sources,
        }
    }
}

/// A drafting method plus an optional tree width (linear when `None`).
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub drafter: Drafter,
    pub tree_width: Option<usize>,
}

impl Pipeline {
    pub fn single(source: DraftSource) -> Self {
        Self {
            drafter: Drafter::Single(source),
            tree_width: None,
        }
    }

    pub fn tabed(
        sources: Vec<DraftSource>,
        policy: WeightPolicy,
        criterion: SelectionCriterion,
        window: Window,
    ) -> Self {
        Self {
            drafter: Drafter::Tabed {
                sources,
                policy,
                criterion,
                window,
            },
            tree_width: None,
        }
    }

    pub fn with_tree(mut self, width: usize) -> Self {
        self.tree_width = Some(width);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionOutput {
    pub tokens: Vec<TokenId>,
    pub records: RunRecords,
}

/// Runs one prompt through `pipeline`. Deterministic given `cfg.seed`.
pub fn run_session(
    target: &dyn SequenceModel,
    pipeline: &Pipeline,
    prompt: &Context,
    cfg: &DecodeConfig,
) -> Result<SessionOutput> {
    cfg.validate()?;
    let sources = pipeline.drafter.sources();
    if sources.is_empty() {
        return Err(Error::BadParams("pipeline has no draft sources".into()));
    }
    let vocab = target.vocab_size();
    if let Some(s) = sources.iter().find(|s| s.vocab_size() != vocab) {
        return Err(Error::DimensionMismatch {
            expected: vocab,
            got: s.vocab_size(),
        });
    }
    if pipeline.tree_width.is_some() && cfg.mode != DecodeMode::Greedy {
        return Err(Error::BadParams("tree verification is greedy-only".into()));
    }
    let (policy, criterion, window) = match &pipeline.drafter {
        Drafter::Single(_) => (
            WeightPolicy::Fixed {
                weights: WeightVector::uniform(1),
            },
            SelectionCriterion::default(),
            Window::All,
        ),
        Drafter::Tabed {
            policy,
            criterion,
            window,
            ..
        } => {
            policy.validate(sources.len())?;
            (policy.clone(), *criterion, *window)
        }
    };
    let adaptive = matches!(pipeline.drafter, Drafter::Tabed { .. });

    let mut rng = Rng::new(cfg.seed);
    let mut cache = HistoryCache::new(sources.len(), window);
    let mut ctx = prompt.clone();
    let mut out: Vec<TokenId> = Vec::new();
    let mut records = RunRecords::new(cfg.seed, cfg.gamma);

    'session: while out.len() < cfg.max_new_tokens {
        let w = select_weight(&cache, &policy, criterion)?;
        let position = out.len();
        let (accepted, emitted) = match pipeline.tree_width {
            None => {
                let block = draft_mixture(sources, &ctx, cfg.gamma, &w, cfg.mode, &mut rng)?;
                let vr = verify(target, &ctx, &block, cfg.mode, &mut rng);
                if adaptive {
                    update_history(&mut cache, &block, &vr)?;
                }
                (vr.accepted_count, vr.emitted_tokens)
            }
            Some(width) => {
                let tree = build_tree(&ctx, width, cfg.gamma, |c| mixture_expansion(sources, &w, c))?;
                let vr = verify_tree_greedy(target, &ctx, &tree);
                if adaptive {
                    update_history_tree(&mut cache, &tree, &vr)?;
                }
                (vr.accepted_count, vr.emitted_tokens())
            }
        };
        records.push(position, accepted, w.as_slice().to_vec());
        for t in emitted {
            out.push(t);
            ctx.push(t);
            if Some(t) == cfg.eos_token || out.len() >= cfg.max_new_tokens {
                break 'session;
            }
        }
    }
    Ok(SessionOutput {
        tokens: out,
        records,
    })
}

/// Linear speculative decoding with a single draft source.
pub fn decode_session(
    target: &dyn SequenceModel,
    source: &DraftSource,
    prompt: &Context,
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenId>, RunRecords)> {
    let out = run_session(target, &Pipeline::single(source.clone()), prompt, cfg)?;
    Ok((out.tokens, out.records))
}
