use super::*;
use crate::model::FEAT_AFFINITY;
use proptest::prelude::*;

fn small_config() -> SynthConfig {
    SynthConfig {
        num_users: 50,
        num_apps: 8,
        num_intents: 4,
        seed: 7,
        ..SynthConfig::default()
    }
}

#[test]
fn population_is_seed_deterministic() {
    let c = small_config();
    assert_eq!(generate_population(&c).unwrap(), generate_population(&c).unwrap());
    let other = SynthConfig { seed: 8, ..c };
    assert_ne!(generate_population(&small_config()).unwrap(), generate_population(&other).unwrap());
}

#[test]
fn infinite_concentration_gives_uniform_preferences() {
    let c = SynthConfig {
        concentration: f64::INFINITY,
        num_users: 3,
        ..small_config()
    };
    let pop = generate_population(&c).unwrap();
    for user in pop {
        for prefs in user.prefs {
            assert!(prefs.iter().all(|&p| p == 1.0 / 8.0));
        }
    }
}

#[test]
fn skewed_concentration_yields_peaked_habits() {
    // Monte-Carlo check: with concentration 0.5 over 8 apps the mean
    // max-preference mass across 1000 users clears 0.5.
    let c = SynthConfig {
        num_users: 1000,
        ..small_config()
    };
    let pop = generate_population(&c).unwrap();
    let mean_max: f64 = pop
        .iter()
        .map(|u| u.prefs[0].iter().cloned().fold(0.0, f64::max))
        .sum::<f64>()
        / pop.len() as f64;
    assert!(mean_max > 0.5, "mean max preference {mean_max}");
}

#[test]
fn simplices_always_sum_to_one() {
    let c = small_config();
    let pop = generate_population(&c).unwrap();
    let schedule = DriftSchedule::generate(&c, 0.7, 99).unwrap();
    for user in &pop {
        for t in [0.0, 0.3, 1.0] {
            for prefs in preferences_at(user, &schedule, t).unwrap() {
                let sum: f64 = prefs.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn drift_blend_identities() {
    let base = vec![1.0, 0.0];
    let target = vec![0.0, 1.0];
    // λ = 0: base exactly, for any t
    assert_eq!(drifted_simplex(&base, &target, 0.0, 0.8).unwrap(), base);
    // t = 0: base exactly
    assert_eq!(drifted_simplex(&base, &target, 1.0, 0.0).unwrap(), base);
    // λ = 1, t = 1: target exactly
    assert_eq!(drifted_simplex(&base, &target, 1.0, 1.0).unwrap(), target);
    // λ = 0.5, t = 1: even blend
    assert_eq!(
        drifted_simplex(&base, &target, 0.5, 1.0).unwrap(),
        vec![0.5, 0.5]
    );
}

#[test]
fn drift_time_out_of_range_rejected() {
    let base = vec![0.5, 0.5];
    assert!(matches!(
        drifted_simplex(&base, &base, 0.5, 1.5),
        Err(SynthError::TimeOutOfRange(_))
    ));
    assert!(drifted_simplex(&base, &base, 0.5, -0.1).is_err());
}

#[test]
fn record_generation_is_deterministic_and_sized() {
    let c = small_config();
    let pop = generate_population(&c).unwrap();
    let schedule = DriftSchedule::none(&c);
    let popularity = PopularityTable::from_population(&pop);
    let a = generate_records(&pop[0], &schedule, &popularity, 0.2, 5, &c, 42).unwrap();
    let b = generate_records(&pop[0], &schedule, &popularity, 0.2, 5, &c, 42).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
    let empty = generate_records(&pop[0], &schedule, &popularity, 0.2, 0, &c, 42).unwrap();
    assert!(empty.is_empty());
}

#[test]
fn labels_always_index_a_candidate() {
    let c = small_config();
    let pop = generate_population(&c).unwrap();
    let schedule = DriftSchedule::generate(&c, 0.9, 5).unwrap();
    let popularity = PopularityTable::from_population(&pop);
    for user in pop.iter().take(10) {
        for r in generate_records(user, &schedule, &popularity, 0.7, 20, &c, 1).unwrap() {
            assert!(r.example.label < r.example.candidates.len());
            r.example.validate().unwrap();
        }
    }
}

#[test]
fn peaked_noiseless_preferences_dominate_labels() {
    // Binomial bound check: P(label = A) = 0.99 per record, so 100 records
    // produce at least 95 A-labels with overwhelming probability.
    let c = SynthConfig {
        feature_noise_sd: 0.0,
        num_intents: 1,
        num_apps: 2,
        ..small_config()
    };
    let mut profile = UserProfile {
        user_id: 0,
        prefs: vec![vec![0.99, 0.01]],
        engagement: 1.0,
    };
    let schedule = DriftSchedule::none(&c);
    let popularity = PopularityTable::from_population(&[profile.clone()]);
    let records = generate_records(&profile, &schedule, &popularity, 0.0, 100, &c, 11).unwrap();
    let a_labels = records.iter().filter(|r| r.example.label == 0).count();
    assert!(a_labels >= 95, "got {a_labels} of 100");
    // noiseless affinity equals the preference exactly
    profile.prefs[0] = vec![0.99, 0.01];
    assert_eq!(records[0].example.candidates[0].features[FEAT_AFFINITY], 0.99);
}

#[test]
fn split_sizes_match_config_and_rerun_is_identical() {
    let config = DatasetConfig {
        synth: SynthConfig {
            num_users: 100,
            seed: 3,
            ..SynthConfig::default()
        },
        drift_strength: 0.4,
        train_stale_size: 120,
        train_fresh_size: 110,
        valid_fresh_size: 40,
        valid_fixed_size: 30,
    };
    let a = ExperimentDatasets::generate(&config).unwrap();
    assert_eq!(a.train_stale.len(), 120);
    assert_eq!(a.train_fresh.len(), 110);
    assert_eq!(a.valid_fresh.len(), 40);
    assert_eq!(a.valid_fixed.len(), 30);
    let b = ExperimentDatasets::generate(&config).unwrap();
    assert_eq!(dataset_digest(&a.train_stale), dataset_digest(&b.train_stale));
    assert_eq!(dataset_digest(&a.valid_fixed), dataset_digest(&b.valid_fixed));
}

#[test]
fn zero_drift_splits_are_exchangeable() {
    // Two-sample chi-square test on label distributions of the stale and
    // fresh training splits at λ = 0; dof = 7, critical value at α = 0.01
    // is 18.475306906582357 (high-precision reference).
    let config = DatasetConfig {
        synth: SynthConfig {
            num_users: 400,
            seed: 21,
            ..SynthConfig::default()
        },
        drift_strength: 0.0,
        train_stale_size: 4000,
        train_fresh_size: 4000,
        valid_fresh_size: 10,
        valid_fixed_size: 10,
    };
    let data = ExperimentDatasets::generate(&config).unwrap();
    let count = |records: &[TrainingRecord]| {
        let mut c = vec![0.0f64; 8];
        for r in records {
            c[r.example.label] += 1.0;
        }
        c
    };
    let (a, b) = (count(&data.train_stale), count(&data.train_fresh));
    let (na, nb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let mut chi2 = 0.0;
    for k in 0..8 {
        let pooled = (a[k] + b[k]) / (na + nb);
        let (ea, eb) = (pooled * na, pooled * nb);
        chi2 += (a[k] - ea).powi(2) / ea + (b[k] - eb).powi(2) / eb;
    }
    assert!(chi2 < 18.475306906582357, "chi2 = {chi2}");
}

#[test]
fn record_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    let config = DatasetConfig {
        synth: SynthConfig {
            num_users: 20,
            seed: 5,
            ..SynthConfig::default()
        },
        train_stale_size: 25,
        train_fresh_size: 1,
        valid_fresh_size: 1,
        valid_fixed_size: 1,
        ..DatasetConfig::default()
    };
    let data = ExperimentDatasets::generate(&config).unwrap();
    write_records(&path, &data.train_stale).unwrap();
    let back = read_records(&path).unwrap();
    assert_eq!(back, data.train_stale);
    assert_eq!(dataset_digest(&back), dataset_digest(&data.train_stale));

    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with(&format!("{{\"schema\":\"{SCHEMA_VERSION}\"}}")));
}

#[test]
fn malformed_lines_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        format!("{{\"schema\":\"{SCHEMA_VERSION}\"}}\nnot json\n"),
    )
    .unwrap();
    match read_records(&path) {
        Err(DatasetError::Parse { line: 2, .. }) => {}
        other => panic!("expected parse error at line 2, got {other:?}"),
    }

    std::fs::write(&path, "{\"schema\":\"other-v9\"}\n").unwrap();
    assert!(matches!(
        read_records(&path),
        Err(DatasetError::Schema { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn drift_is_lipschitz_in_time(
        seed in 0u64..500,
        strength in 0.0f64..=1.0,
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let c = SynthConfig { num_users: 1, seed, ..SynthConfig::default() };
        let pop = generate_population(&c).unwrap();
        let schedule = DriftSchedule::generate(&c, strength, seed ^ 0x5a).unwrap();
        let base = &pop[0].prefs[0];
        let target = &schedule.targets[0];
        let p1 = drifted_simplex(base, target, strength, t1).unwrap();
        let p2 = drifted_simplex(base, target, strength, t2).unwrap();
        let l1: f64 = p1.iter().zip(&p2).map(|(a, b)| (a - b).abs()).sum();
        let dist: f64 = base.iter().zip(target).map(|(a, b)| (a - b).abs()).sum();
        prop_assert!(l1 <= strength * (t1 - t2).abs() * dist + 1e-9);
    }
}
