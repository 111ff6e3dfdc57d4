//! Shared fixtures for the decoding benchmarks.

use std::sync::Arc;

use tabed_core::models::tokens;
use tabed_core::{
    Context, DraftSource, Pipeline, Segment, SegmentKind, SelectionCriterion, SequenceModel, SyntheticOracle,
    Transform, WeightPolicy, Window,
};

pub struct Fixture {
    pub target: Arc<dyn SequenceModel>,
    pub sources: Vec<DraftSource>,
    pub prompt: Context,
}

/// A target with one matching and one text-only source over `vocab` tokens.
pub fn fixture(vocab: usize) -> Fixture {
    let shared: Arc<dyn SequenceModel> = Arc::new(SyntheticOracle::new(41, 0.3, vocab, Some(4)).unwrap());
    let text = DraftSource::new(
        "text",
        shared.clone(),
        Transform::DropVisual {
            separator: tabed_core::TokenId(0),
        },
    )
    .unwrap();
    let prompt = Context::new(vec![
        Segment::new(SegmentKind::System, tokens(&[1, 2, 3])),
        Segment::new(SegmentKind::Visual, tokens(&[4, 5, 6, 7, 4, 5, 6, 7])),
        Segment::new(SegmentKind::Text, tokens(&[2, 3])),
    ]);
    Fixture {
        target: shared.clone(),
        sources: vec![DraftSource::identity("multimodal", shared), text],
        prompt,
    }
}

impl Fixture {
    pub fn single(&self) -> Pipeline {
        Pipeline::single(self.sources[1].clone())
    }

    pub fn tabed(&self) -> Pipeline {
        Pipeline::tabed(
            self.sources.clone(),
            WeightPolicy::Grid { n: 10 },
            SelectionCriterion::soft_kl(),
            Window::All,
        )
    }
}
