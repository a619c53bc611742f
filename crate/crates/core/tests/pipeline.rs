use std::collections::HashSet;

use proptest::prelude::*;

use balgpd::acquisition::{Criterion, SearchBox};
use balgpd::harness::config::{format_config, parse_config};
use balgpd::harness::report::{
    emit_aggregate_csv, emit_run_csv, parse_aggregate_csv, parse_run_csv,
};
use balgpd::harness::{
    rmse_of, run_experiment, run_replications, ExperimentConfig, ExperimentKind, RunOutcome,
    SchemeKind,
};

fn small(kind: ExperimentKind, scheme: SchemeKind, rounds: usize) -> ExperimentConfig {
    ExperimentConfig {
        scheme,
        rounds,
        seed: 5,
        ..ExperimentConfig::defaults(kind)
    }
}

#[test]
fn dataset_grows_by_one_batch_per_round() {
    for kind in [
        ExperimentKind::CardinalSine,
        ExperimentKind::Map,
        ExperimentKind::SafePlant,
    ] {
        for scheme in [SchemeKind::Balgpd, SchemeKind::Random] {
            let cfg = small(kind, scheme, 2);
            let r = run_experiment(&cfg).unwrap();
            for rec in &r.per_round {
                assert_eq!(rec.points_total, cfg.n_initial + rec.round * cfg.batch_size);
                assert!(rec.rmse >= 0.0);
            }
            let rounds: Vec<usize> = r.per_round.iter().map(|x| x.round).collect();
            assert_eq!(rounds, vec![1, 2]);
            assert_eq!(r.final_size, cfg.points_after(2));
            assert_eq!(r.explored.len(), r.final_size);
        }
    }
}

#[test]
fn random_scheme_never_calls_the_optimizer() {
    for kind in [
        ExperimentKind::CardinalSine,
        ExperimentKind::Map,
        ExperimentKind::SafePlant,
    ] {
        let r = run_experiment(&small(kind, SchemeKind::Random, 2)).unwrap();
        assert_eq!(r.acquisition_calls, 0, "{kind}");
        let r = run_experiment(&small(kind, SchemeKind::Balgp, 2)).unwrap();
        assert_eq!(r.acquisition_calls, 2, "{kind}");
    }
}

#[test]
fn safe_plant_batches_feasible_at_proposal() {
    for scheme in [SchemeKind::Balgpd, SchemeKind::Balgp, SchemeKind::Random] {
        let cfg = small(ExperimentKind::SafePlant, scheme, 3);
        let alpha = cfg.alpha.unwrap();
        let r = run_experiment(&cfg).unwrap();
        for rec in &r.per_round {
            assert!(rec.zeta_min.unwrap() > 1.0 - alpha);
        }
    }
}

#[test]
fn unsafe_start_region_is_a_failed_run_not_a_crash() {
    let cfg = ExperimentConfig {
        search_box: SearchBox::new(vec![0.95; 4], vec![1.0; 4]).unwrap(),
        replications: 2,
        ..small(ExperimentKind::SafePlant, SchemeKind::Balgpd, 2)
    };
    let agg = run_replications(&cfg).unwrap();
    assert_eq!(agg.runs.len(), 2);
    for run in &agg.runs {
        match run {
            RunOutcome::Failed { reason, .. } => assert!(reason.contains("feasible"), "{reason}"),
            RunOutcome::Completed(_) => panic!("unsafe start region should fail"),
        }
    }
    assert!(agg.rows.is_empty());
}

#[test]
fn map_selects_without_replacement() {
    let r = run_experiment(&small(ExperimentKind::Map, SchemeKind::Balgpd, 5)).unwrap();
    let seen: HashSet<(u64, u64)> = r
        .explored
        .rows()
        .map(|x| (x[0].to_bits(), x[1].to_bits()))
        .collect();
    assert_eq!(seen.len(), r.explored.len());
}

#[test]
fn sine_queries_stay_in_box() {
    let cfg = small(ExperimentKind::CardinalSine, SchemeKind::Balgpd, 4);
    let r = run_experiment(&cfg).unwrap();
    assert!(r.explored.rows().all(|x| cfg.search_box.contains(x)));
}

#[test]
fn repeated_runs_are_identical() {
    let cfg = ExperimentConfig {
        seed: 42,
        rounds: 5,
        ..ExperimentConfig::defaults(ExperimentKind::CardinalSine)
    };
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.per_round.len(), b.per_round.len());
    for (x, y) in a.per_round.iter().zip(&b.per_round) {
        assert_eq!(x.rmse.to_bits(), y.rmse.to_bits());
        assert_eq!(x.criterion_value.to_bits(), y.criterion_value.to_bits());
    }
    assert_eq!(a.explored, b.explored);
    assert_eq!(a.final_theta, b.final_theta);
}

#[test]
fn csv_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        replications: 2,
        ..small(ExperimentKind::CardinalSine, SchemeKind::Balgp, 3)
    };
    let agg = run_replications(&cfg).unwrap();
    let run = agg.completed().next().unwrap();
    let path = dir.path().join("run.csv");
    emit_run_csv(run, &path, false).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 4);
    let back = parse_run_csv(&text).unwrap();
    for (a, b) in back.iter().zip(&run.per_round) {
        assert_eq!(a.rmse.to_bits(), b.rmse.to_bits());
        assert_eq!(a.criterion_value.to_bits(), b.criterion_value.to_bits());
        assert!(a.wall_ms.is_nan());
    }
    let path = dir.path().join("aggregate.csv");
    emit_aggregate_csv(&agg, &path).unwrap();
    let rows = parse_aggregate_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(rows, agg.rows);
}

#[test]
fn unwritable_path_is_an_io_error() {
    let r = run_experiment(&small(ExperimentKind::CardinalSine, SchemeKind::Random, 1)).unwrap();
    let err = emit_run_csv(&r, std::path::Path::new("/nonexistent/dir/run.csv"), false);
    assert!(matches!(err, Err(balgpd::Error::Io(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rmse_nonnegative_and_permutation_invariant(
        pairs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40),
        seed in any::<u64>(),
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
        let base = rmse_of(&p, &t).unwrap();
        prop_assert!(base >= 0.0);
        let mut idx: Vec<usize> = (0..p.len()).collect();
        let mut s = seed;
        for i in (1..idx.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            idx.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pp: Vec<f64> = idx.iter().map(|i| p[*i]).collect();
        let tt: Vec<f64> = idx.iter().map(|i| t[*i]).collect();
        prop_assert!((rmse_of(&pp, &tt).unwrap() - base).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn config_text_round_trips(
        kind in prop_oneof![Just(ExperimentKind::CardinalSine), Just(ExperimentKind::Map), Just(ExperimentKind::SafePlant)],
        scheme in prop_oneof![Just(SchemeKind::Balgpd), Just(SchemeKind::Balgp), Just(SchemeKind::Random)],
        criterion in prop_oneof![Just(Criterion::D), Just(Criterion::A), Just(Criterion::E)],
        rounds in 1usize..20,
        seed in any::<u64>(),
        noise in 0.0f64..0.5,
    ) {
        let cfg = ExperimentConfig {
            scheme,
            criterion,
            rounds,
            seed,
            noise_point: noise,
            ..ExperimentConfig::defaults(kind)
        };
        prop_assert_eq!(parse_config(&format_config(&cfg)).unwrap(), cfg);
    }
}
