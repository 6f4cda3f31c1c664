mod common;

use std::sync::Arc;

use common::{case, subject};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfo_core::cones::{BilateralPairing, ConeTable};
use sfo_core::contour::Looking;
use sfo_core::de::{
    crossover_exp, exp_run, initialize_population, mutate_rand1, optimize, rand1_raw, run,
    DeConfig, DeError, Termination,
};
use sfo_core::fitness::{AprioriIntervals, FitnessConfig, SfoProblem};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn config(pop: usize, gens: usize, seed: u64) -> DeConfig {
    DeConfig {
        population_size: pop,
        max_generations: gens,
        max_seconds: None,
        seed,
        ..DeConfig::default()
    }
}

fn uniform_population(rng: &mut ChaCha8Rng, pop: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..pop)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect()
}

fn sphere(x: &[f64]) -> (f64, ()) {
    (x.iter().map(|v| (v - 0.3) * (v - 0.3)).sum(), ())
}

#[test]
fn run_lengths_follow_truncated_geometric_law() {
    let (n, cr, trials) = (12usize, 0.9, 100_000usize);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut counts = vec![0usize; n + 1];
    let mut starts = vec![0usize; n];
    for _ in 0..trials {
        let (start, len) = exp_run(n, cr, &mut rng);
        counts[len] += 1;
        starts[start] += 1;
    }
    let chi2_p = |observed: &[usize], probs: &[f64]| {
        let stat: f64 = observed
            .iter()
            .zip(probs)
            .map(|(&o, &p)| {
                let e = p * trials as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        1.0 - ChiSquared::new((observed.len() - 1) as f64)
            .unwrap()
            .cdf(stat)
    };
    let probs: Vec<f64> = (1..=n)
        .map(|k| {
            if k < n {
                cr.powi(k as i32 - 1) * (1.0 - cr)
            } else {
                cr.powi(n as i32 - 1)
            }
        })
        .collect();
    let p_len = chi2_p(&counts[1..], &probs);
    let p_start = chi2_p(&starts, &vec![1.0 / n as f64; n]);
    assert!(p_len > 0.01, "run length p = {p_len}");
    assert!(p_start > 0.01, "start p = {p_start}");
}

#[test]
fn crossover_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let target = vec![0.0; 9];
    let donor = vec![1.0; 9];
    for _ in 0..200 {
        assert_eq!(crossover_exp(&target, &donor, 1.0, &mut rng), donor);
        let one = crossover_exp(&target, &donor, 0.0, &mut rng);
        assert_eq!(one.iter().filter(|v| **v == 1.0).count(), 1);
    }
}

proptest! {
    #[test]
    fn crossover_copies_one_wrapping_run(seed in any::<u64>(), n in 1usize..15, cr in 0.0..=1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let donor: Vec<f64> = (0..n).map(|i| -(i as f64) - 1.0).collect();
        let trial = crossover_exp(&target, &donor, cr, &mut rng);
        let from_donor: Vec<bool> = trial.iter().zip(&donor).map(|(t, d)| t == d).collect();
        for (j, t) in trial.iter().enumerate() {
            prop_assert!(*t == target[j] || *t == donor[j]);
        }
        let changes = (0..n).filter(|&j| from_donor[j] != from_donor[(j + 1) % n]).count();
        prop_assert!(from_donor.iter().any(|b| *b));
        prop_assert!(changes == 0 || changes == 2);
    }

    #[test]
    fn donor_is_a_clamped_rand1_combination(seed in any::<u64>(), pop in 4usize..12, f in 0.1..=2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let population = uniform_population(&mut rng, pop, 5);
        let target = rng.random_range(0..pop);
        let donor = mutate_rand1(&population, target, f, &mut rng);
        let mut found = false;
        for a in (0..pop).filter(|&a| a != target) {
            for b in (0..pop).filter(|&b| b != target && b != a) {
                for c in (0..pop).filter(|&c| c != target && c != a && c != b) {
                    let want: Vec<f64> = population[a]
                        .iter()
                        .zip(&population[b])
                        .zip(&population[c])
                        .map(|((x1, x2), x3)| (x1 + f * (x2 - x3)).clamp(0.0, 1.0))
                        .collect();
                    found |= want == donor;
                }
            }
        }
        prop_assert!(found);
        prop_assert_eq!(rand1_raw(&[0.5], &[0.9], &[0.1], f), vec![0.5 + f * (0.9 - 0.1)]);
    }

    #[test]
    fn populations_stay_in_bounds_and_selection_is_greedy(seed in any::<u64>(), gens in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = uniform_population(&mut rng, 10, 6);
        let cfg = config(10, gens, seed);
        let shorter = optimize(init.clone(), sphere, &config(10, gens - 1, seed), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let longer = optimize(init, sphere, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(longer.population.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        for (a, b) in shorter.fitness.iter().zip(&longer.fitness) {
            prop_assert!(b <= a);
        }
        prop_assert!(longer.trace.best_per_generation.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(longer.trace.evaluations, 10 * (gens + 1));
        prop_assert_eq!(longer.trace.termination, Termination::Generations);
        prop_assert_eq!(&longer.trace.best_per_generation[..gens], &shorter.trace.best_per_generation[..]);
    }
}

#[test]
fn constant_fitness_leaves_population_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let init = uniform_population(&mut rng, 12, 4);
    let out = optimize(init.clone(), |_| (1.0, ()), &config(12, 20, 0), &mut rng).unwrap();
    assert_eq!(out.population, init);
    assert!(out.trace.best_per_generation.iter().all(|b| *b == 1.0));
}

#[test]
fn sphere_improves_a_thousandfold() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = uniform_population(&mut rng, 40, 6);
        let out = optimize(init, sphere, &config(40, 100, seed), &mut rng).unwrap();
        let t = &out.trace.best_per_generation;
        assert!(t[100] < 1e-3 * t[0], "seed {seed}: {} vs {}", t[100], t[0]);
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn fixed_seed_is_reproducible() {
    let mut a = ChaCha8Rng::seed_from_u64(44);
    let mut b = ChaCha8Rng::seed_from_u64(44);
    let ia = uniform_population(&mut a, 20, 8);
    let ib = uniform_population(&mut b, 20, 8);
    let oa = optimize(ia, sphere, &config(20, 30, 1), &mut a).unwrap();
    let ob = optimize(ib, sphere, &config(20, 30, 1), &mut b).unwrap();
    assert_eq!(oa.population, ob.population);
    assert_eq!(oa.best, ob.best);
    assert_eq!(oa.trace.best_per_generation, ob.trace.best_per_generation);
}

#[test]
fn initial_population_is_centred() {
    let order: Arc<[String]> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let pairing = BilateralPairing::new(
        vec![("a".into(), "b".into()), ("c".into(), "d".into())],
        0.9,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let pop = initialize_population(10_000, &pairing, &order, &mut rng);
    for k in 0..12 {
        let mean = pop.iter().map(|g| g.values[k]).sum::<f64>() / pop.len() as f64;
        assert!((0.45..=0.55).contains(&mean), "component {k}: {mean}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let init = vec![vec![0.5; 3]; 6];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bad = [
        DeConfig {
            population_size: 3,
            ..config(3, 1, 0)
        },
        DeConfig {
            f_weight: 0.0,
            ..config(6, 1, 0)
        },
        DeConfig {
            cr: 1.5,
            ..config(6, 1, 0)
        },
        DeConfig {
            max_seconds: Some(-1.0),
            ..config(6, 1, 0)
        },
    ];
    for cfg in bad {
        assert!(matches!(
            optimize(init.clone(), sphere, &cfg, &mut rng),
            Err(DeError::InvalidConfig(_))
        ));
    }
    let zero_budget = DeConfig {
        max_seconds: Some(0.0),
        ..config(6, 50, 0)
    };
    let out = optimize(init, sphere, &zero_budget, &mut rng).unwrap();
    assert_eq!(out.trace.termination, Termination::Budget);
    assert_eq!(out.trace.generations(), 0);
}

#[test]
fn infeasible_generation_zero_is_reported() {
    let s = subject(3);
    let fc = FitnessConfig {
        intervals: Some(AprioriIntervals {
            fx_min: 0.0,
            fx_max: 1.0,
            fx_hard_limit: 2.0,
            ..AprioriIntervals::default()
        }),
        ..FitnessConfig::mse_camera()
    };
    let problem = SfoProblem::new(&case(&s, Looking::Frontal, 6), &s, &fc).unwrap();
    let err = run(
        &problem,
        &ConeTable::default_table().pairing().unwrap(),
        &config(8, 3, 0),
    )
    .unwrap_err();
    assert_eq!(err, DeError::AllInfeasible);
}

#[test]
fn noise_free_overlay_reaches_the_ground_truth_floor() {
    let s = subject(4);
    let problem =
        SfoProblem::new(&case(&s, Looking::Frontal, 7), &s, &FitnessConfig::full()).unwrap();
    let pairing = ConeTable::default_table().pairing().unwrap();
    let mut good = 0;
    for seed in 0..5 {
        let b = run(&problem, &pairing, &config(30, 400, seed))
            .unwrap()
            .breakdown;
        if b.mse_pix < 4.0 && b.p_cam == 0.0 && b.p_skof == 0.0 {
            good += 1;
        }
    }
    assert!(good >= 4, "{good} of 5 runs reached the floor");
}

#[test]
fn sfo_runs_are_reproducible() {
    let s = subject(5);
    let problem = SfoProblem::new(&case(&s, Looking::Left, 8), &s, &FitnessConfig::full()).unwrap();
    let pairing = ConeTable::default_table().pairing().unwrap();
    let a = run(&problem, &pairing, &config(12, 20, 3)).unwrap();
    let b = run(&problem, &pairing, &config(12, 20, 3)).unwrap();
    assert_eq!(a.best.values, b.best.values);
    assert_eq!(a.breakdown, b.breakdown);
    assert_eq!(a.trace.best_per_generation, b.trace.best_per_generation);
    assert_eq!(a.trace.evaluations, 12 * 21);
}
