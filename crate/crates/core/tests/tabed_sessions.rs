use std::sync::Arc;

use proptest::prelude::*;
use tabed_core::decode::{verify, DecodeConfig, DecodeMode};
use tabed_core::metrics::block_efficiency;
use tabed_core::models::{tokens, ConstantModel};
use tabed_core::oracle::autoregressive_greedy;
use tabed_core::tabed::{accumulated_error, grid_candidates, select_weight, tabed_draft, update_history};
use tabed_core::{
    run_session, Context, DraftSource, HistoryCache, Pipeline, Rng, SelectionCriterion, SequenceModel,
    SyntheticOracle, TokenId, WeightPolicy, WeightVector, Window,
};

fn oracle(seed: u64, vocab: usize, order: Option<usize>) -> Arc<dyn SequenceModel> {
    Arc::new(SyntheticOracle::new(seed, 0.4, vocab, order).unwrap())
}

fn cfg(mode: DecodeMode, gamma: usize, max: usize, seed: u64) -> DecodeConfig {
    DecodeConfig {
        gamma,
        mode,
        max_new_tokens: max,
        eos_token: None,
        seed,
    }
}

#[test]
fn dominant_source_is_recovered() {
    let vocab = 10;
    let target = oracle(77, vocab, Some(3));
    let a = DraftSource::identity("a", target.clone());
    // proposes token 9 whatever the context
    let b = DraftSource::identity("b", Arc::new(ConstantModel::point_mass(vocab, TokenId(9))));
    let prompt = Context::from_text(tokens(&[1, 2, 3]));
    let c = cfg(DecodeMode::Greedy, 5, 200, 4);
    let warm = 5;
    let tail_eff = |p: &Pipeline| {
        let out = run_session(target.as_ref(), p, &prompt, &c).unwrap();
        let mut rec = out.records.clone();
        rec.blocks.drain(..warm);
        block_efficiency(&rec).unwrap()
    };
    let tabed = tail_eff(&Pipeline::tabed(
        vec![a.clone(), b.clone()],
        WeightPolicy::Grid { n: 10 },
        SelectionCriterion::soft_kl(),
        Window::All,
    ));
    let only_a = tail_eff(&Pipeline::single(a));
    let only_b = tail_eff(&Pipeline::single(b));
    assert!(tabed >= 0.95 * only_a, "tabed {tabed} vs a {only_a}");
    assert!(tabed > only_b, "tabed {tabed} vs b {only_b}");
}

#[test]
fn one_hot_fixed_weights_match_single_source() {
    let target = oracle(5, 8, Some(2));
    let sources = vec![
        DraftSource::identity("x", oracle(6, 8, Some(1))),
        DraftSource::identity("y", oracle(7, 8, Some(2))),
    ];
    let prompt = Context::from_text(tokens(&[0, 4]));
    for mode in [DecodeMode::Stochastic, DecodeMode::Greedy] {
        for i in 0..2 {
            let c = cfg(mode, 4, 60, 99);
            let fixed = Pipeline::tabed(
                sources.clone(),
                WeightPolicy::Fixed {
                    weights: WeightVector::one_hot(2, i),
                },
                SelectionCriterion::soft_kl(),
                Window::All,
            );
            let e = run_session(target.as_ref(), &fixed, &prompt, &c).unwrap();
            let s = run_session(target.as_ref(), &Pipeline::single(sources[i].clone()), &prompt, &c).unwrap();
            assert_eq!(e.tokens, s.tokens);
            let acc = |o: &tabed_core::SessionOutput| o.records.blocks.iter().map(|b| b.accepted_count).collect::<Vec<_>>();
            assert_eq!(acc(&e), acc(&s));
        }
    }
}

#[test]
fn window_all_equals_window_longer_than_output() {
    let target = oracle(15, 6, Some(2));
    let sources = vec![
        DraftSource::identity("x", oracle(16, 6, Some(1))),
        DraftSource::identity("y", oracle(17, 6, None)),
    ];
    let prompt = Context::from_text(tokens(&[1]));
    for policy in [
        WeightPolicy::Grid { n: 10 },
        WeightPolicy::SoftmaxInverseError { tau: 0.5 },
        WeightPolicy::Adaboost { c: 1.0 },
    ] {
        for mode in [DecodeMode::Greedy, DecodeMode::Stochastic] {
            let c = cfg(mode, 3, 50, 8);
            let run = |w: Window| {
                let p = Pipeline::tabed(sources.clone(), policy.clone(), SelectionCriterion::SoftTvd, w);
                run_session(target.as_ref(), &p, &prompt, &c).unwrap()
            };
            assert_eq!(run(Window::All), run(Window::Last(50)));
            assert_eq!(run(Window::All), run(Window::Last(10_000)));
        }
    }
}

#[test]
fn grid_choice_is_argmin_every_block() {
    let target = oracle(21, 8, Some(2));
    let sources = vec![
        DraftSource::identity("x", oracle(22, 8, Some(1))),
        DraftSource::identity("y", oracle(23, 8, Some(2))),
    ];
    let policy = WeightPolicy::Grid { n: 10 };
    for criterion in [SelectionCriterion::soft_kl(), SelectionCriterion::SoftTvd, SelectionCriterion::HardMatch] {
        let mut cache = HistoryCache::new(2, Window::Last(12));
        let mut ctx = Context::from_text(tokens(&[3]));
        let mut rng = Rng::new(1);
        for _ in 0..30 {
            let block = tabed_draft(&sources, &ctx, 4, &cache, &policy, criterion, DecodeMode::Stochastic, &mut rng)
                .unwrap();
            if !cache.visible().is_empty() {
                let chosen = accumulated_error(&cache, &block.weight_used, criterion).unwrap();
                for w in grid_candidates(2, 10).unwrap() {
                    assert!(chosen <= accumulated_error(&cache, &w, criterion).unwrap());
                }
                assert_eq!(block.weight_used, select_weight(&cache, &policy, criterion).unwrap());
            }
            let vr = verify(target.as_ref(), &ctx, &block, DecodeMode::Stochastic, &mut rng);
            update_history(&mut cache, &block, &vr).unwrap();
            ctx.extend_generated(&vr.emitted_tokens);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tabed_greedy_is_lossless(
        seed in any::<u64>(),
        vocab in 2usize..7,
        gamma in 1usize..6,
        prompt in proptest::collection::vec(0u32..2, 0..4),
        policy_ix in 0usize..3,
        criterion_ix in 0usize..3,
        h in prop_oneof![Just(Window::All), (1usize..6).prop_map(Window::Last)],
    ) {
        let target = oracle(seed, vocab, Some(2));
        let sources = vec![
            DraftSource::identity("x", oracle(seed ^ 1, vocab, Some(1))),
            DraftSource::identity("y", Arc::new(ConstantModel::point_mass(vocab, TokenId(0)))),
        ];
        let policy = [
            WeightPolicy::Grid { n: 10 },
            WeightPolicy::SoftmaxInverseError { tau: 1.0 },
            WeightPolicy::Adaboost { c: 1.0 },
        ][policy_ix].clone();
        let criterion = [SelectionCriterion::soft_kl(), SelectionCriterion::SoftTvd, SelectionCriterion::HardMatch][criterion_ix];
        let ctx = Context::from_text(tokens(&prompt));
        let out = run_session(
            target.as_ref(),
            &Pipeline::tabed(sources, policy, criterion, h),
            &ctx,
            &cfg(DecodeMode::Greedy, gamma, 24, seed),
        ).unwrap();
        prop_assert_eq!(out.tokens, autoregressive_greedy(target.as_ref(), &ctx, 24, None));
    }
}
