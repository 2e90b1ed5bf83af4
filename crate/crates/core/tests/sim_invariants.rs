use std::collections::BTreeSet;

use ccfed::client::{cc_local, LocalConfig};
use ccfed::metrics;
use ccfed::objectives::{make_quadratic_family, Objective};
use ccfed::rng::Streams;
use ccfed::server::{aggregate, OptimizerKind, ServerHyper};
use ccfed::sim::{
    forced_participation_mask, run, run_observed, sample_delay, sample_from, sample_participants, Participation,
    RoundEvent, SimConfig,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn config(n: usize, m: usize, rounds: usize, tau: usize, seed: u64) -> SimConfig {
    SimConfig {
        n,
        m,
        rounds,
        tau,
        hyper: ServerHyper {
            eta: 0.2,
            beta: 0.9,
            gamma: 0.99,
            eps: 0.01,
            kind: OptimizerKind::Ams,
        },
        local: LocalConfig::default(),
        participation: Participation::ExactM,
        seed,
        fixed_k: false,
        excluded: BTreeSet::new(),
        parallel: false,
        x0: None,
    }
}

#[test]
fn inclusion_frequency_matches_m_over_n() {
    let mut counts = [0usize; 100];
    let rounds = 100_000;
    for t in 0..rounds {
        let mut rng = Streams::new(7).scheduler(t);
        let s = sample_participants(100, 5, Participation::ExactM, &mut rng).unwrap();
        assert_eq!(s.len(), 5);
        for c in s {
            counts[c] += 1;
        }
    }
    for (c, &k) in counts.iter().enumerate() {
        let p = k as f64 / rounds as f64;
        assert!((p - 0.05).abs() <= 0.005, "client {c}: {p}");
    }
}

#[test]
fn bernoulli_inclusion_frequency() {
    let mut counts = [0usize; 20];
    let rounds = 50_000;
    let mut rng = Streams::new(1).scheduler(0);
    for _ in 0..rounds {
        for c in sample_participants(20, 4, Participation::Bernoulli, &mut rng).unwrap() {
            counts[c] += 1;
        }
    }
    // Resampling empty draws inflates inclusion by 1 / (1 − 0.8^20).
    let expect = 0.2 / (1.0 - 0.8f64.powi(20));
    for &k in &counts {
        assert!((k as f64 / rounds as f64 - expect).abs() <= 0.01);
    }
}

#[test]
fn delay_frequencies_are_uniform() {
    let mut rng = Streams::new(3).scheduler(0);
    let draws = 100_000;
    let mut freq = [0usize; 6];
    for _ in 0..draws {
        freq[sample_delay(10, 5, &mut rng)] += 1;
    }
    for (d, &f) in freq.iter().enumerate() {
        let p = f as f64 / draws as f64;
        assert!((p - 1.0 / 6.0).abs() <= 0.01, "delay {d}: {p}");
    }
}

#[test]
fn excluded_clients_never_sampled() {
    let cfg = config(10, 3, 1, 0, 0);
    let excluded = BTreeSet::from([0, 1]);
    let mask = forced_participation_mask(&cfg, &excluded).unwrap();
    let mut rng = Streams::new(11).scheduler(0);
    for _ in 0..10_000 {
        let s = sample_from(&mask, 3, Participation::ExactM, &mut rng).unwrap();
        assert!(s.iter().all(|c| !excluded.contains(c)));
    }
}

#[test]
fn staleness_and_buffer_invariants_hold_in_a_run() {
    let fam = make_quadratic_family(30, 6, 0.5, 0.1, 4).unwrap();
    let cfg = config(30, 7, 120, 4, 9);
    let mut checked = 0;
    run_observed(&cfg, &fam, &mut |e: &RoundEvent<'_>| {
        let t = e.schedule.round;
        assert_eq!(e.updates.len(), 7);
        for (u, &k) in e.updates.iter().zip(&e.schedule.epochs) {
            assert!(u.base_version + 4 >= t && u.base_version <= t);
            assert!((1..=6).contains(&k));
            assert_eq!(u.steps_used, k);
        }
        assert!(e.schedule.delays.iter().all(|&d| d <= t.min(4)));
        checked += 1;
    })
    .unwrap();
    assert_eq!(checked, 120);
}

#[test]
fn same_seed_same_bytes_different_seed_different_bytes() {
    let fam = make_quadratic_family(20, 5, 0.5, 0.1, 0).unwrap();
    let csv = |seed| metrics::to_csv_string(&run(&config(20, 4, 80, 3, seed), &fam).unwrap().rows, &[]);
    assert_eq!(csv(5), csv(5));
    assert_ne!(csv(5), csv(6));
}

#[test]
fn round_trip_through_disk() {
    let fam = make_quadratic_family(20, 5, 0.5, 0.1, 0).unwrap();
    let r = run(&config(20, 4, 50, 3, 1), &fam).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.csv");
    metrics::write_csv(&r.rows, &p).unwrap();
    assert_eq!(metrics::read_csv(&p).unwrap(), r.rows);
}

#[test]
fn bernoulli_runs_use_m_as_normalizer() {
    let fam = make_quadratic_family(10, 3, 0.5, 0.1, 0).unwrap();
    let mut cfg = config(10, 3, 40, 2, 2);
    cfg.participation = Participation::Bernoulli;
    let mut sizes = BTreeSet::new();
    run_observed(&cfg, &fam, &mut |e: &RoundEvent<'_>| {
        sizes.insert(e.updates.len());
    })
    .unwrap();
    assert!(sizes.len() > 1, "buffer size never varied: {sizes:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shuffled_updates_aggregate_identically(seed in any::<u64>(), m in 1usize..10) {
        let fam = make_quadratic_family(12, 4, 0.7, 0.3, 1).unwrap();
        let x = ccfed::linalg::ParamVector::new(vec![0.3, -0.2, 1.0, 0.5]).unwrap();
        let streams = Streams::new(seed);
        let mut updates: Vec<_> = (0..m)
            .map(|c| cc_local(&fam, c, &x, 0, 1 + c % 3, 0.05, 1, &mut streams.client(c, 0)).unwrap())
            .collect();
        let a = aggregate(&updates).unwrap();
        updates.shuffle(&mut streams.named("shuffle", 0));
        prop_assert_eq!(aggregate(&updates).unwrap(), a);
    }

    #[test]
    fn schedule_respects_bounds(seed in any::<u64>(), tau in 0usize..8, m in 1usize..6) {
        let fam = make_quadratic_family(6, 2, 0.5, 0.1, 0).unwrap();
        let cfg = config(6, m, 15, tau, seed);
        run_observed(&cfg, &fam, &mut |e: &RoundEvent<'_>| {
            let t = e.schedule.round;
            assert_eq!(e.schedule.participants.len(), m);
            assert!(e.updates.iter().all(|u| u.base_version + tau >= t));
            assert!(e.schedule.steps.iter().all(|&k| (1..=6 * fam.steps_per_epoch(0, 1)).contains(&k)));
        })
        .unwrap();
    }
}
