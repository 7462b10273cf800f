use super::*;
use crate::nn::Tensor;
use proptest::prelude::*;

fn example(candidates: Vec<CandidateFeatures>, label: usize) -> LabeledExample {
    LabeledExample { candidates, label }
}

fn candidate(id: &str, features: [f64; FEATURE_DIM]) -> CandidateFeatures {
    CandidateFeatures {
        app_id: id.to_string(),
        features,
    }
}

fn affinity_candidate(id: &str, affinity: f64, popularity: f64) -> CandidateFeatures {
    let mut features = [0.0; FEATURE_DIM];
    features[FEAT_AFFINITY] = affinity;
    features[FEAT_POPULARITY] = popularity;
    candidate(id, features)
}

/// Attention weights zeroed, affinity routed to channel 0 and popularity to
/// channel 1, so scores follow affinity and the epistemic head compares the
/// mean affinity to the mean popularity.
fn selector_params(gain: f64) -> AppSelectionParams {
    let mut p = AppSelectionParams::zeros();
    {
        let input = p.params_mut().get_mut("input_proj").unwrap();
        input.data_mut()[FEAT_AFFINITY * MODEL_DIM] = 1.0;
        input.data_mut()[FEAT_POPULARITY * MODEL_DIM + 1] = 1.0;
    }
    {
        let score = p.params_mut().get_mut("score_head").unwrap();
        score.data_mut()[0] = gain;
    }
    {
        let epi = p.params_mut().get_mut("epistemic_head").unwrap();
        epi.data_mut()[0] = gain;
        epi.data_mut()[1] = -gain;
    }
    p
}

mod featurization {
    use super::*;

    fn raw(id: &str, uses: u32, rank: Option<u32>) -> RawCandidate {
        RawCandidate {
            app_id: id.to_string(),
            use_count: uses,
            recency_rank: rank,
            intent_affinity: 0.5,
            popularity: 0.5,
        }
    }

    #[test]
    fn frequency_is_share_of_window() {
        let record = RawRecord {
            candidates: vec![raw("a", 9, Some(0)), raw("b", 1, Some(1))],
            window_uses: 10,
        };
        let feats = prepare_features(&record).unwrap();
        assert_eq!(feats[0].features[FEAT_FREQUENCY], 0.9);
        assert_eq!(feats[1].features[FEAT_FREQUENCY], 0.1);
        assert_eq!(feats[0].features[FEAT_RECENCY], 1.0);
        assert_eq!(feats[1].features[FEAT_RECENCY], 0.5);
    }

    #[test]
    fn repeat_invocation_is_bit_identical() {
        let record = RawRecord {
            candidates: vec![raw("a", 3, None), raw("b", 7, Some(2))],
            window_uses: 10,
        };
        let a = prepare_features(&record).unwrap();
        let b = prepare_features(&record).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_candidate_is_ineligible() {
        let record = RawRecord {
            candidates: vec![raw("a", 1, None)],
            window_uses: 1,
        };
        assert!(matches!(
            prepare_features(&record),
            Err(ModelError::CandidateCountOutOfRange { got: 1 })
        ));
    }

    #[test]
    fn out_of_range_signals_are_schema_errors() {
        let mut bad = raw("a", 1, None);
        bad.intent_affinity = 1.5;
        let record = RawRecord {
            candidates: vec![bad, raw("b", 1, None)],
            window_uses: 2,
        };
        assert!(matches!(
            prepare_features(&record),
            Err(ModelError::Schema {
                field: "intent_affinity"
            })
        ));
    }
}

mod forward_pass {
    use super::*;
    use crate::nn::Tape;

    #[test]
    fn zero_weights_give_uniform_half_scores() {
        let p = AppSelectionParams::zeros();
        let cands = vec![
            affinity_candidate("a", 0.9, 0.2),
            affinity_candidate("b", 0.1, 0.2),
            affinity_candidate("c", 0.4, 0.2),
        ];
        let out = forward(&p, &cands).unwrap();
        assert!(out.scores.iter().all(|&s| s == 0.5));
        assert_eq!(out.aleatoric_margin, 0.0);
        assert_eq!(out.epistemic_confidence, 0.5);
    }

    #[test]
    fn candidate_count_bounds_enforced() {
        let p = AppSelectionParams::zeros();
        let one = vec![affinity_candidate("a", 0.5, 0.5)];
        assert!(matches!(
            forward(&p, &one),
            Err(ModelError::CandidateCountOutOfRange { got: 1 })
        ));
        let nine: Vec<_> = (0..9)
            .map(|i| affinity_candidate(&format!("a{i}"), 0.5, 0.5))
            .collect();
        assert!(matches!(
            forward(&p, &nine),
            Err(ModelError::CandidateCountOutOfRange { got: 9 })
        ));
    }

    #[test]
    fn selector_weights_rank_the_dominant_candidate_first() {
        let p = selector_params(4.0);
        let cands = vec![
            affinity_candidate("a", 0.3, 0.1),
            affinity_candidate("b", 0.8, 0.1),
            affinity_candidate("c", 0.5, 0.1),
        ];
        let out = forward(&p, &cands).unwrap();
        assert!(out.scores[1] > out.scores[2] && out.scores[2] > out.scores[0]);
    }

    #[test]
    fn margin_is_exactly_top_minus_second() {
        let p = selector_params(4.0);
        let cands = vec![
            affinity_candidate("a", 0.3, 0.1),
            affinity_candidate("b", 0.8, 0.1),
            affinity_candidate("c", 0.5, 0.1),
        ];
        let out = forward(&p, &cands).unwrap();
        let mut sorted = out.scores.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(out.aleatoric_margin, sorted[0] - sorted[1]);
    }

    #[test]
    fn tape_route_matches_inference_route() {
        let p = AppSelectionParams::random_init(11);
        let cands: Vec<_> = (0..5)
            .map(|i| {
                let mut f = [0.0; FEATURE_DIM];
                for (j, v) in f.iter_mut().enumerate() {
                    *v = ((i * 17 + j * 3) % 11) as f64 / 11.0;
                }
                candidate(&format!("a{i}"), f)
            })
            .collect();
        let fast = forward(&p, &cands).unwrap();

        let mut tape = Tape::new();
        let net = stage_network(&mut tape, &p);
        let (scores, epi) = staged_forward(&mut tape, &net, &cands).unwrap();
        let staged_scores = tape.value(scores).data();
        for (a, b) in fast.scores.iter().zip(staged_scores) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
        assert!((fast.epistemic_confidence - tape.value(epi).item()).abs() < 1e-14);
    }

    #[test]
    fn exhaustive_permutation_equivariance_small_n() {
        let p = AppSelectionParams::random_init(5);
        let base: Vec<_> = (0..4)
            .map(|i| {
                let mut f = [0.0; FEATURE_DIM];
                for (j, v) in f.iter_mut().enumerate() {
                    *v = ((i * 13 + j * 7) % 19) as f64 / 19.0;
                }
                candidate(&format!("a{i}"), f)
            })
            .collect();
        let out = forward(&p, &base).unwrap();
        let perms = permutations(4);
        for perm in perms {
            let shuffled: Vec<_> = perm.iter().map(|&i| base[i].clone()).collect();
            let got = forward(&p, &shuffled).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                assert!(
                    (got.scores[k] - out.scores[i]).abs() < 1e-10,
                    "perm {perm:?} position {k}"
                );
            }
            assert!((got.epistemic_confidence - out.epistemic_confidence).abs() < 1e-10);
            assert!((got.aleatoric_margin - out.aleatoric_margin).abs() < 1e-10);
        }
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q: Vec<usize> = p.iter().map(|&v| v + usize::from(v >= pos)).collect();
                q.insert(0, pos);
                // rotate so inserted element cycles through positions
                out.push(q.clone());
                q.rotate_left(1);
            }
        }
        out
    }
}

mod actions {
    use super::*;

    fn output(scores: Vec<f64>, confidence: f64) -> PredictionOutput {
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        PredictionOutput {
            aleatoric_margin: sorted[0] - sorted[1],
            scores,
            epistemic_confidence: confidence,
        }
    }

    #[test]
    fn confident_wide_margin_executes_argmax() {
        let t = Thresholds::new(0.5, 0.2).unwrap();
        let decision = select_action(&output(vec![0.9, 0.2], 0.8), &t);
        assert_eq!(decision, ActionDecision::DirectExecute(0));
    }

    #[test]
    fn low_confidence_always_clarifies() {
        let t = Thresholds::new(0.5, 0.2).unwrap();
        let decision = select_action(&output(vec![0.99, 0.01], 0.3), &t);
        assert_eq!(decision, ActionDecision::Clarify);
    }

    #[test]
    fn narrow_margin_disambiguates_in_score_order() {
        let t = Thresholds::new(0.5, 0.2).unwrap();
        let decision = select_action(&output(vec![0.50, 0.55], 0.8), &t);
        assert_eq!(decision, ActionDecision::Disambiguate(vec![1, 0]));
    }

    #[test]
    fn selection_is_pure() {
        let t = Thresholds::default();
        let o = output(vec![0.7, 0.1, 0.4], 0.9);
        assert_eq!(select_action(&o, &t), select_action(&o, &t));
    }

    #[test]
    fn argmax_ties_break_to_lowest_index() {
        let t = Thresholds::gates_off();
        let decision = select_action(&output(vec![0.4, 0.7, 0.7], 1.0), &t);
        assert_eq!(decision, ActionDecision::DirectExecute(1));
    }

    #[test]
    fn threshold_bounds_validated() {
        assert!(Thresholds::new(-0.1, 0.5).is_err());
        assert!(Thresholds::new(0.5, 1.5).is_err());
        assert!(Thresholds::new(0.0, 1.0).is_ok());
    }
}

mod losses {
    use super::*;

    #[test]
    fn identical_records_average_to_single_record_loss() {
        let p = AppSelectionParams::random_init(3);
        let ex = example(
            vec![
                affinity_candidate("a", 0.8, 0.4),
                affinity_candidate("b", 0.2, 0.4),
            ],
            0,
        );
        let single = mse_loss(&p, vec![&ex]).unwrap();
        let double = mse_loss(&p, vec![&ex, &ex]).unwrap();
        assert!((single - double).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_two_candidate_loss_is_quarter() {
        // all scores 0.5 against a one-hot target: ((0.5)² + (0.5)²)/2
        let p = AppSelectionParams::zeros();
        let ex = example(
            vec![
                affinity_candidate("a", 0.9, 0.1),
                affinity_candidate("b", 0.1, 0.1),
            ],
            0,
        );
        let loss = mse_loss(&p, vec![&ex]).unwrap();
        assert!((loss - 0.25).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let p = AppSelectionParams::zeros();
        let ex = example(
            vec![
                affinity_candidate("a", 0.9, 0.1),
                affinity_candidate("b", 0.1, 0.1),
            ],
            2,
        );
        assert!(matches!(
            mse_loss(&p, vec![&ex]),
            Err(ModelError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn empty_batch_rejected() {
        let p = AppSelectionParams::zeros();
        assert!(matches!(
            mse_loss(&p, Vec::<&LabeledExample>::new()),
            Err(ModelError::EmptyDataset)
        ));
    }
}

mod evaluation {
    use super::*;

    /// Scores track affinity; label placement controls correctness.
    fn affinity_dataset(correct: usize, total: usize) -> Vec<LabeledExample> {
        (0..total)
            .map(|i| {
                example(
                    vec![
                        affinity_candidate("a", 0.9, 0.1),
                        affinity_candidate("b", 0.1, 0.1),
                    ],
                    usize::from(i >= correct),
                )
            })
            .collect()
    }

    #[test]
    fn offline_accuracy_counts_argmax_hits() {
        let p = selector_params(12.0);
        let data = affinity_dataset(3, 4);
        assert_eq!(offline_accuracy(&p, data.iter()).unwrap(), 0.75);
        let all = affinity_dataset(4, 4);
        assert_eq!(offline_accuracy(&p, all.iter()).unwrap(), 1.0);
        let none = affinity_dataset(0, 4);
        assert_eq!(offline_accuracy(&p, none.iter()).unwrap(), 0.0);
    }

    #[test]
    fn empty_dataset_is_a_contract_error() {
        let p = AppSelectionParams::zeros();
        assert!(matches!(
            offline_accuracy(&p, Vec::<&LabeledExample>::new().into_iter()),
            Err(ModelError::EmptyDataset)
        ));
        assert!(matches!(
            online_metrics(&p, &Thresholds::default(), Vec::<&LabeledExample>::new().into_iter()),
            Err(ModelError::EmptyDataset)
        ));
    }

    /// One record per action outcome:
    /// direct-correct, direct-wrong, disambiguate, clarify.
    pub(super) fn four_outcome_fixture() -> (AppSelectionParams, Thresholds, Vec<LabeledExample>) {
        let p = selector_params(12.0);
        let t = Thresholds::new(0.5, 0.2).unwrap();
        let data = vec![
            example(
                vec![
                    affinity_candidate("a", 0.9, 0.1),
                    affinity_candidate("b", 0.1, 0.1),
                ],
                0,
            ),
            example(
                vec![
                    affinity_candidate("a", 0.9, 0.1),
                    affinity_candidate("b", 0.1, 0.1),
                ],
                1,
            ),
            example(
                vec![
                    affinity_candidate("a", 0.5, 0.1),
                    affinity_candidate("b", 0.5, 0.1),
                ],
                0,
            ),
            example(
                vec![
                    affinity_candidate("a", 0.9, 0.9),
                    affinity_candidate("b", 0.1, 0.9),
                ],
                0,
            ),
        ];
        (p, t, data)
    }

    #[test]
    fn four_outcome_fixture_rates() {
        let (p, t, data) = four_outcome_fixture();
        let m = online_metrics(&p, &t, data.iter()).unwrap();
        assert_eq!(m.cder, 0.25);
        assert_eq!(m.disambiguation_rate, 0.25);
        assert_eq!(m.clarify_rate, 0.25);
    }

    #[test]
    fn gates_off_cder_equals_offline_accuracy() {
        let (p, _, data) = four_outcome_fixture();
        let m = online_metrics(&p, &Thresholds::gates_off(), data.iter()).unwrap();
        let acc = offline_accuracy(&p, data.iter()).unwrap();
        assert_eq!(m.cder, acc);
        assert_eq!(m.disambiguation_rate, 0.0);
    }

    #[test]
    fn always_disambiguate_at_tau_one() {
        let (p, _, data) = four_outcome_fixture();
        let t = Thresholds::new(0.0, 1.0).unwrap();
        let m = online_metrics(&p, &t, data.iter()).unwrap();
        assert_eq!(m.disambiguation_rate, 1.0);
        assert_eq!(m.cder, 0.0);
    }

    #[test]
    fn gating_rates_are_monotone_in_thresholds() {
        let (p, _, data) = four_outcome_fixture();
        let mut last_disamb = -1.0;
        for tau_a in [0.0, 0.05, 0.2, 0.5, 0.9] {
            let m =
                online_metrics(&p, &Thresholds::new(0.0, tau_a).unwrap(), data.iter()).unwrap();
            assert!(m.disambiguation_rate >= last_disamb);
            last_disamb = m.disambiguation_rate;
        }
        let mut last_clarify = -1.0;
        for tau_e in [0.0, 0.3, 0.5, 0.8, 1.0] {
            let m =
                online_metrics(&p, &Thresholds::new(tau_e, 0.0).unwrap(), data.iter()).unwrap();
            assert!(m.clarify_rate >= last_clarify);
            last_clarify = m.clarify_rate;
        }
    }
}

mod container {
    use super::*;

    #[test]
    fn top_layer_freeze_covers_exactly_the_two_heads() {
        let mut p = AppSelectionParams::random_init(0);
        p.apply_freeze_policy(FreezePolicy::TopLayerOnly);
        let frozen = p.params().frozen_names();
        assert_eq!(frozen.len(), p.params().len() - 2);
        assert!(!frozen.contains(&"score_head"));
        assert!(!frozen.contains(&"epistemic_head"));
        assert_eq!(p.params().unfrozen_len(), 2 * MODEL_DIM);
    }

    #[test]
    fn all_but_input_freezes_only_the_projection() {
        let mut p = AppSelectionParams::random_init(0);
        p.apply_freeze_policy(FreezePolicy::AllButInput);
        assert_eq!(p.params().frozen_names(), vec!["input_proj"]);
    }

    #[test]
    fn from_params_validates_layout() {
        let good = AppSelectionParams::random_init(1).into_params();
        assert!(AppSelectionParams::from_params(good.clone()).is_ok());

        let mut missing = crate::nn::ModelParams::new();
        missing
            .insert("input_proj", Tensor::zeros(vec![FEATURE_DIM, MODEL_DIM]))
            .unwrap();
        assert!(matches!(
            AppSelectionParams::from_params(missing),
            Err(ModelError::BadParams(_))
        ));

        let mut bad_shape = good;
        *bad_shape.get_mut("score_head").unwrap() = Tensor::zeros(vec![MODEL_DIM, 2]);
        assert!(matches!(
            AppSelectionParams::from_params(bad_shape),
            Err(ModelError::BadParams(_))
        ));
    }

    #[test]
    fn random_init_is_seed_deterministic() {
        let a = AppSelectionParams::random_init(9);
        let b = AppSelectionParams::random_init(9);
        assert_eq!(a, b);
        assert_ne!(a, AppSelectionParams::random_init(10));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_permutations_are_equivariant(
        seed in 0u64..1000,
        n in 2usize..=MAX_CANDIDATES,
        perm_seed in 0u64..1000,
    ) {
        use rand::seq::SliceRandom;
        let p = AppSelectionParams::random_init(seed);
        let mut rng = crate::seed::derive_rng(perm_seed, "perm-test", 0);
        let base: Vec<_> = (0..n).map(|i| {
            let mut f = [0.0; FEATURE_DIM];
            for (j, v) in f.iter_mut().enumerate() {
                *v = (((seed as usize) + i * 13 + j * 7) % 23) as f64 / 23.0;
            }
            candidate(&format!("a{i}"), f)
        }).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);

        let out = forward(&p, &base).unwrap();
        let shuffled: Vec<_> = perm.iter().map(|&i| base[i].clone()).collect();
        let got = forward(&p, &shuffled).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((got.scores[k] - out.scores[i]).abs() < 1e-10);
        }
        prop_assert!((got.epistemic_confidence - out.epistemic_confidence).abs() < 1e-10);
        prop_assert!((got.aleatoric_margin - out.aleatoric_margin).abs() < 1e-10);
    }
}
