//! Property tests over randomized configurations.

use drnn_core::cells::{
    abdrnn_step, drnn_step, init_parameters, sdrnn_step, srn_step, Activation, CellKind,
    CellState,
};
use drnn_core::corpus::{
    annotate, generate, generate_minimal_pairs, load_grammar, read_corpus_tsv, write_corpus_tsv,
    Lexicon, DEFAULT_GRAMMAR, DEFAULT_LEXICON,
};
use drnn_core::tape::{softmax, Tape};
use drnn_core::tensor::Tensor;
use drnn_core::training::clip_global_norm;
use proptest::prelude::*;

fn shipped() -> (Vec<drnn_core::corpus::GrammarTemplate>, Lexicon) {
    (
        load_grammar(DEFAULT_GRAMMAR).unwrap(),
        Lexicon::from_tsv(DEFAULT_LEXICON).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_sentences_tie_grammaticality_to_the_designated_link(
        seed in any::<u64>(),
        count in 1usize..80,
        ratio in 0.0f64..=1.0,
    ) {
        let (templates, lexicon) = shipped();
        let corpus = generate(&templates, &lexicon, seed, count, ratio).unwrap();
        prop_assert_eq!(corpus.len(), count);
        for s in &corpus {
            prop_assert_eq!(s.grammatical, s.subject_number == s.verb_number);
            prop_assert_eq!(
                s.attractor_count + s.non_attractor_count,
                s.intervening_nouns.len()
            );
            prop_assert_eq!(s.distance, s.verb_index - s.subject_index);
            // Recomputing the annotation reproduces the stored values.
            let re = annotate(&s.tokens, s.subject_index, s.verb_index, &lexicon).unwrap();
            prop_assert_eq!(re.attractor_count, s.attractor_count);
            prop_assert_eq!(re.non_attractor_count, s.non_attractor_count);
            prop_assert_eq!(re.grammatical, s.grammatical);
        }
    }

    #[test]
    fn minimal_pairs_always_differ_in_exactly_one_token(
        seed in any::<u64>(),
        count in 1usize..40,
    ) {
        let (templates, lexicon) = shipped();
        let pairs = generate_minimal_pairs(&templates, &lexicon, seed, count).unwrap();
        for p in &pairs {
            prop_assert!(p.differing_position().is_ok());
        }
    }

    #[test]
    fn corpus_tsv_round_trips_exactly(seed in any::<u64>(), count in 1usize..40) {
        let (templates, lexicon) = shipped();
        let corpus = generate(&templates, &lexicon, seed, count, 0.5).unwrap();
        let text = write_corpus_tsv(&corpus);
        let back = read_corpus_tsv(&text, &lexicon).unwrap();
        prop_assert_eq!(back, corpus);
    }

    #[test]
    fn moving_average_law_holds_for_any_decay_and_drive(
        alpha_logit in -4.0f64..4.0,
        h0 in proptest::collection::vec(-0.9f64..0.9, 3),
        drive in proptest::collection::vec(-0.5f64..0.5, 3),
    ) {
        // f = identity, W = 0, constant input: |h(t) - cbar| decays
        // geometrically with ratio alpha.
        let mut p = init_parameters(CellKind::Drnn, 3, 1, 1);
        p.activation = Activation::Identity;
        p.w = Some(Tensor::zeros(&[3, 3]));
        p.u = Tensor::zeros(&[3, 1]);
        p.b = Tensor::vector(drive.clone()).unwrap();
        p.alpha_logit = Some(Tensor::scalar(alpha_logit).unwrap());
        let alpha = p.alpha_value().unwrap();
        let x = Tensor::vector(vec![0.0]).unwrap();
        let mut state = CellState {
            h: Tensor::vector(h0.clone()).unwrap(),
            c_mem: None,
        };
        for t in 1..=50 {
            state = drnn_step(&p, &state, &x).unwrap();
            for i in 0..3 {
                let expect = drive[i] + alpha.powi(t) * (h0[i] - drive[i]);
                prop_assert!((state.h.at(i) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reduction_chain_holds_on_random_configs(seed in any::<u64>()) {
        let hidden = 4;
        let x = Tensor::vector(vec![0.3, -0.6]).unwrap();
        let h = Tensor::vector(vec![0.2, -0.1, 0.4, 0.05]).unwrap();
        let state = CellState { h, c_mem: None };

        // DRNN = SDRNN on nonnegative weights with all-excitatory signs.
        let mut p = init_parameters(CellKind::Drnn, hidden, 2, seed);
        let w = p.w.as_ref().unwrap().clone();
        let nonneg: Vec<f64> = w.data().iter().map(|v| v.abs()).collect();
        p.w = Some(Tensor::matrix(hidden, hidden, nonneg).unwrap());
        p.dale_signs = Some(vec![1.0; hidden]);
        let a = drnn_step(&p, &state, &x).unwrap();
        let b = sdrnn_step(&p, &state, &x).unwrap();
        for i in 0..hidden {
            prop_assert!((a.h.at(i) - b.h.at(i)).abs() < 1e-12);
        }

        // SDRNN with zero weights = Ab-DRNN.
        let mut pz = init_parameters(CellKind::Sdrnn, hidden, 2, seed ^ 1);
        pz.w = Some(Tensor::zeros(&[hidden, hidden]));
        let a = sdrnn_step(&pz, &state, &x).unwrap();
        let b = abdrnn_step(&pz, &state, &x).unwrap();
        for i in 0..hidden {
            prop_assert!((a.h.at(i) - b.h.at(i)).abs() < 1e-12);
        }

        // SDRNN at alpha -> 0 = SRN.
        let mut p0 = init_parameters(CellKind::Sdrnn, hidden, 2, seed ^ 2);
        p0.alpha_logit = Some(Tensor::scalar(-40.0).unwrap());
        let a = sdrnn_step(&p0, &state, &x).unwrap();
        let b = srn_step(&p0, &state, &x).unwrap();
        for i in 0..hidden {
            prop_assert!((a.h.at(i) - b.h.at(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_cross_entropy_outputs_are_a_distribution(
        logits in proptest::collection::vec(-30.0f64..30.0, 2..12),
        target_raw in any::<usize>(),
    ) {
        let p = softmax(&logits);
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        let target = target_raw % logits.len();
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::vector(logits.clone()).unwrap()).unwrap();
        let loss = tape.softmax_cross_entropy(l, target).unwrap();
        prop_assert!(tape.value(loss).item() >= 0.0);
    }

    #[test]
    fn clipping_never_exceeds_the_bound(
        values in proptest::collection::vec(-100.0f64..100.0, 1..40),
        max_norm in 0.1f64..10.0,
    ) {
        let mut grads = vec![Tensor::vector(values.clone()).unwrap()];
        let pre = clip_global_norm(&mut grads, max_norm);
        let post = grads[0].norm();
        prop_assert!(post <= max_norm + 1e-9);
        if pre <= max_norm {
            prop_assert_eq!(grads[0].data(), &values[..]);
        }
    }

    #[test]
    fn tanh_cells_keep_states_bounded(seed in any::<u64>()) {
        for kind in [CellKind::Drnn, CellKind::Sdrnn, CellKind::AbDrnn, CellKind::Srn] {
            let p = init_parameters(kind, 5, 2, seed);
            let mut s = CellState::zeros(kind, 5);
            let step = |p: &_, s: &_, x: &_| match kind {
                CellKind::Drnn => drnn_step(p, s, x),
                CellKind::Sdrnn => sdrnn_step(p, s, x),
                CellKind::AbDrnn => abdrnn_step(p, s, x),
                _ => srn_step(p, s, x),
            };
            for t in 0..10 {
                let x = Tensor::vector(vec![(t as f64 * 0.7).sin() * 3.0, -1.5]).unwrap();
                s = step(&p, &s, &x).unwrap();
                for v in s.h.data() {
                    prop_assert!(v.abs() < 1.0);
                }
            }
        }
    }
}
