//! Differential evolution, rand/1 mutation with exponential crossover, over
//! vectors in the unit hypercube.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cones::{sample_with_bilateral_coupling, BilateralPairing, ConeError, Genotype};
use crate::fitness::{FitnessBreakdown, SfoProblem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("empty initial population or zero dimension")]
    EmptyPopulation,
    #[error("every individual of the initial population is infeasible")]
    AllInfeasible,
    #[error(transparent)]
    Cone(#[from] ConeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeConfig {
    pub population_size: usize,
    pub f_weight: f64,
    pub cr: f64,
    pub max_generations: usize,
    /// Wall-clock budget; `None` stops on generations alone, which makes runs
    /// reproducible.
    pub max_seconds: Option<f64>,
    pub seed: u64,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            population_size: 50,
            f_weight: 0.7,
            cr: 0.9,
            max_generations: 750,
            max_seconds: Some(500.0),
            seed: 0,
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<(), DeError> {
        if self.population_size < 4 {
            return Err(DeError::InvalidConfig("population size must be at least 4"));
        }
        if !(self.f_weight > 0.0 && self.f_weight <= 2.0) {
            return Err(DeError::InvalidConfig("F must lie in (0, 2]"));
        }
        if !(0.0..=1.0).contains(&self.cr) {
            return Err(DeError::InvalidConfig("CR must lie in [0, 1]"));
        }
        if self.max_seconds.is_some_and(|s| s.is_nan() || s < 0.0) {
            return Err(DeError::InvalidConfig("time budget must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Budget,
    Generations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    /// Best-so-far fitness after generation 0, 1, ...
    pub best_per_generation: Vec<f64>,
    pub evaluations: usize,
    pub elapsed_s: f64,
    pub termination: Termination,
}

impl RunTrace {
    pub fn generations(&self) -> usize {
        self.best_per_generation.len().saturating_sub(1)
    }

    /// CSV with header `generation,best_fitness`; trailing lines carry the
    /// totals as comments.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("generation,best_fitness\n");
        for (g, b) in self.best_per_generation.iter().enumerate() {
            s.push_str(&format!("{g},{b:e}\n"));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct DeOutcome<T> {
    pub best: Vec<f64>,
    pub best_fitness: f64,
    pub best_payload: T,
    pub population: Vec<Vec<f64>>,
    pub fitness: Vec<f64>,
    pub trace: RunTrace,
}

/// `x1 + f (x2 - x3)` without clamping.
pub fn rand1_raw(x1: &[f64], x2: &[f64], x3: &[f64], f_weight: f64) -> Vec<f64> {
    x1.iter()
        .zip(x2)
        .zip(x3)
        .map(|((a, b), c)| a + f_weight * (b - c))
        .collect()
}

/// Three distinct indices, all different from `target`.
fn pick_three<R: Rng + ?Sized>(n: usize, target: usize, rng: &mut R) -> [usize; 3] {
    let mut out = [usize::MAX; 3];
    let mut k = 0;
    while k < 3 {
        let r = rng.random_range(0..n);
        if r != target && !out[..k].contains(&r) {
            out[k] = r;
            k += 1;
        }
    }
    out
}

/// rand/1 donor for `target`, clamped to `[0, 1]`.
pub fn mutate_rand1<R: Rng + ?Sized>(
    population: &[Vec<f64>],
    target: usize,
    f_weight: f64,
    rng: &mut R,
) -> Vec<f64> {
    let [r1, r2, r3] = pick_three(population.len(), target, rng);
    let mut d = rand1_raw(&population[r1], &population[r2], &population[r3], f_weight);
    d.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    d
}

/// Start index and length of an exponential-crossover run over `n`
/// components.
pub fn exp_run<R: Rng + ?Sized>(n: usize, cr: f64, rng: &mut R) -> (usize, usize) {
    let start = rng.random_range(0..n);
    let mut len = 1;
    while len < n && rng.random::<f64>() < cr {
        len += 1;
    }
    (start, len)
}

/// Copies a contiguous (wrapping) run of donor components into the target.
pub fn crossover_exp<R: Rng + ?Sized>(
    target: &[f64],
    donor: &[f64],
    cr: f64,
    rng: &mut R,
) -> Vec<f64> {
    let n = target.len();
    let mut trial = target.to_vec();
    let (start, len) = exp_run(n, cr, rng);
    for k in 0..len {
        let j = (start + k) % n;
        trial[j] = donor[j];
    }
    trial
}

/// Bilateral-coupled uniform population drawn from `rng`.
pub fn initialize_population<R: Rng + ?Sized>(
    population_size: usize,
    pairing: &BilateralPairing,
    landmark_order: &Arc<[String]>,
    rng: &mut R,
) -> Vec<Genotype> {
    (0..population_size)
        .map(|_| sample_with_bilateral_coupling(rng, pairing, landmark_order))
        .collect()
}

/// Minimizes `objective` from `initial`. The objective returns a fitness and
/// a payload kept for the best individual. Trials of one generation are built
/// sequentially from `rng` and evaluated in parallel.
pub fn optimize<T, F>(
    initial: Vec<Vec<f64>>,
    objective: F,
    config: &DeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DeOutcome<T>, DeError>
where
    T: Send + Clone,
    F: Fn(&[f64]) -> (f64, T) + Sync,
{
    config.validate()?;
    if initial.len() < 4 || initial[0].is_empty() {
        return Err(DeError::EmptyPopulation);
    }
    let start = Instant::now();
    let mut population = initial;
    let scored: Vec<(f64, T)> = population.par_iter().map(|x| objective(x)).collect();
    let mut fitness: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let best_idx = argmin(&fitness);
    let mut best = population[best_idx].clone();
    let mut best_fitness = fitness[best_idx];
    let mut best_payload = scored[best_idx].1.clone();
    drop(scored);
    let mut trace = vec![best_fitness];
    let mut evaluations = population.len();

    let mut termination = Termination::Generations;
    for _ in 0..config.max_generations {
        if config
            .max_seconds
            .is_some_and(|s| start.elapsed().as_secs_f64() >= s)
        {
            termination = Termination::Budget;
            break;
        }
        let trials: Vec<Vec<f64>> = (0..population.len())
            .map(|i| {
                let donor = mutate_rand1(&population, i, config.f_weight, rng);
                crossover_exp(&population[i], &donor, config.cr, rng)
            })
            .collect();
        let scored: Vec<(f64, T)> = trials.par_iter().map(|x| objective(x)).collect();
        evaluations += trials.len();
        for (i, (trial, (f, payload))) in trials.into_iter().zip(scored).enumerate() {
            if f < fitness[i] {
                population[i] = trial;
                fitness[i] = f;
                if f < best_fitness {
                    best_fitness = f;
                    best = population[i].clone();
                    best_payload = payload;
                }
            }
        }
        trace.push(best_fitness);
    }
    Ok(DeOutcome {
        best,
        best_fitness,
        best_payload,
        population,
        fitness,
        trace: RunTrace {
            best_per_generation: trace,
            evaluations,
            elapsed_s: start.elapsed().as_secs_f64(),
            termination,
        },
    })
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct SfoRun {
    pub best: Genotype,
    pub breakdown: FitnessBreakdown,
    pub trace: RunTrace,
}

/// Optimizes soft-tissue genotypes for one photograph-skull pair.
pub fn run(
    problem: &SfoProblem,
    pairing: &BilateralPairing,
    config: &DeConfig,
) -> Result<SfoRun, DeError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let initial = initialize_population(
        config.population_size,
        pairing,
        &problem.landmark_order,
        &mut rng,
    );
    let initial: Vec<Vec<f64>> = initial.into_iter().map(|g| g.values).collect();
    let c_inf = problem.intervals().c_infinity;
    let outcome = optimize(
        initial,
        |x| {
            let b = problem.evaluate(x);
            (b.total, b)
        },
        config,
        &mut rng,
    )?;
    if outcome.trace.best_per_generation[0] >= c_inf {
        return Err(DeError::AllInfeasible);
    }
    let best = Genotype::new(outcome.best, problem.landmark_order.clone())?;
    Ok(SfoRun {
        best,
        breakdown: outcome.best_payload,
        trace: outcome.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> (f64, ()) {
        (x.iter().map(|v| (v - 0.3) * (v - 0.3)).sum(), ())
    }

    #[test]
    fn crossover_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = vec![0.0; 9];
        let d = vec![1.0; 9];
        assert_eq!(crossover_exp(&t, &d, 1.0, &mut rng), d);
        for _ in 0..50 {
            let x = crossover_exp(&t, &d, 0.0, &mut rng);
            assert_eq!(x.iter().filter(|v| **v == 1.0).count(), 1);
        }
    }

    #[test]
    fn mutation_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pop = vec![vec![0.4, 0.6]; 5];
        assert_eq!(mutate_rand1(&pop, 0, 0.7, &mut rng), vec![0.4, 0.6]);
    }

    #[test]
    fn sphere_converges_and_trace_is_monotone() {
        let cfg = DeConfig {
            population_size: 40,
            max_generations: 100,
            max_seconds: None,
            seed: 5,
            ..DeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| rng.random()).collect())
            .collect();
        let out = optimize(init, sphere, &cfg, &mut rng).unwrap();
        let t = &out.trace.best_per_generation;
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
        assert!(t[100] < 1e-3 * t[0], "{} {} {}", t[0], t[50], t[100]);
        assert_eq!(out.trace.evaluations, 40 * 101);
        assert_eq!(out.trace.termination, Termination::Generations);
    }

    #[test]
    fn constant_fitness_keeps_population() {
        let cfg = DeConfig {
            population_size: 6,
            max_generations: 10,
            max_seconds: None,
            ..DeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let init: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.random()).collect())
            .collect();
        let out = optimize(init.clone(), |_| (1.0, ()), &cfg, &mut rng).unwrap();
        assert_eq!(out.population, init);
        assert!(out.trace.best_per_generation.iter().all(|b| *b == 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(DeConfig {
            population_size: 3,
            ..DeConfig::default()
        }
        .validate()
        .is_err());
        assert!(DeConfig {
            f_weight: 0.0,
            ..DeConfig::default()
        }
        .validate()
        .is_err());
        assert!(DeConfig {
            cr: 1.5,
            ..DeConfig::default()
        }
        .validate()
        .is_err());
    }
}
