//! Independent no-regret learners playing the repeated control game: each
//! controller keeps exponential weights over a discretized grid of its
//! path splits, samples a split per round, and updates from the full
//! counterfactual cost vector. Average play drifts toward the control-game
//! equilibrium cost.

use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use crate::equilibrium::SolveError;
use crate::game::{validate, GameInstance};
use crate::solver::Compiled;

/// Learner configuration. `resolution` is the number of grid points per
/// path dimension, so a two-route split uses fractions k/(resolution-1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LearnConfig {
    pub resolution: usize,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig { resolution: 11 }
    }
}

#[derive(Debug, Clone)]
pub enum LearnError {
    EmptyActionGrid,
    BadWindow { window: usize, rounds: usize },
    NoRounds,
    Solve(SolveError),
}

impl fmt::Display for LearnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearnError::EmptyActionGrid => write!(f, "action grid is empty"),
            LearnError::BadWindow { window, rounds } => {
                write!(f, "window {window} must lie in 1..={rounds}")
            }
            LearnError::NoRounds => write!(f, "need at least one round"),
            LearnError::Solve(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LearnError {}

/// Exponential-weights state of one learner: probabilities over its action
/// grid, driven by cumulative normalized losses at rate sqrt(ln K / t).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerState {
    pub controller: String,
    pub population: String,
    pub weights: Vec<f64>,
    pub cumulative_loss: Vec<f64>,
    pub rate: f64,
    pub rounds: usize,
}

impl LearnerState {
    fn new(controller: String, population: String, actions: usize) -> LearnerState {
        LearnerState {
            controller,
            population,
            weights: vec![1.0 / actions as f64; actions],
            cumulative_loss: vec![0.0; actions],
            rate: 0.0,
            rounds: 0,
        }
    }

    /// Recomputes the weights from the cumulative losses at the current
    /// round's rate.
    fn refresh(&mut self) {
        let k = self.weights.len() as f64;
        self.rate = (k.ln().max(1e-12) / self.rounds.max(1) as f64).sqrt();
        let best = self
            .cumulative_loss
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        for (w, &loss) in self.weights.iter_mut().zip(&self.cumulative_loss) {
            *w = (-self.rate * (loss - best)).exp();
            total += *w;
        }
        for w in self.weights.iter_mut() {
            *w /= total;
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let draw: f64 = rng.random();
        let mut acc = 0.0;
        for (a, &w) in self.weights.iter().enumerate() {
            acc += w;
            if draw < acc {
                return a;
            }
        }
        self.weights.len() - 1
    }
}

/// Realized play of one round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub splits: Vec<RealizedSplit>,
    pub controller_costs: Vec<ControllerRoundCost>,
    pub social_cost: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RealizedSplit {
    pub controller: String,
    pub population: String,
    /// Chosen action index and the split it encodes.
    pub action: usize,
    pub path_flows: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerRoundCost {
    pub controller: String,
    pub cost: f64,
}

/// Full episode log plus the final learner states and the normalization
/// bound the losses were divided by.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub rounds: Vec<RoundRecord>,
    pub learners: Vec<LearnerState>,
    /// Worst feasible social cost of the instance; loss normalizer.
    pub worst_social_cost: f64,
    pub resolution: usize,
    pub seed: u64,
    /// Mean social cost over the trailing min(200, rounds) rounds.
    pub final_trailing_mean: f64,
}

/// All splits of `demand` over `paths` routes on the grid with the given
/// per-dimension resolution, in lexicographic order.
pub fn simplex_grid(paths: usize, resolution: usize, demand: f64) -> Vec<Vec<f64>> {
    let ticks = resolution.saturating_sub(1);
    if paths == 0 || ticks == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut current = vec![0usize; paths];
    fill_grid(&mut out, &mut current, 0, ticks, ticks, demand);
    out
}

fn fill_grid(
    out: &mut Vec<Vec<f64>>,
    current: &mut Vec<usize>,
    idx: usize,
    remaining: usize,
    ticks: usize,
    demand: f64,
) {
    if idx == current.len() - 1 {
        current[idx] = remaining;
        out.push(
            current
                .iter()
                .map(|&k| k as f64 / ticks as f64 * demand)
                .collect(),
        );
        return;
    }
    for k in 0..=remaining {
        current[idx] = k;
        fill_grid(out, current, idx + 1, remaining - k, ticks, demand);
    }
}

/// Largest social cost over all single-route assignments per controller
/// block; a crude everything-on-every-edge bound when enumeration would
/// be too large.
pub fn worst_feasible_social_cost(instance: &GameInstance) -> f64 {
    let compiled = Compiled::new(instance);
    let mut blocks: Vec<(f64, Vec<usize>)> = Vec::new();
    for ctl in &instance.assignment.controllers {
        for (pop_idx, pop) in instance.populations.iter().enumerate() {
            let share = ctl.share(&pop.id);
            if share > 0.0 {
                let offset = compiled.pop_offset[pop_idx];
                blocks.push((share, (offset..offset + pop.paths.len()).collect()));
            }
        }
    }
    let combos: usize = blocks.iter().map(|(_, ps)| ps.len()).product();
    if combos == 0 || combos > 100_000 {
        let demand = instance.total_demand();
        return instance
            .network
            .edges
            .iter()
            .map(|e| demand * e.cost.value(demand))
            .sum();
    }
    let mut worst: f64 = 0.0;
    let mut choice = vec![0usize; blocks.len()];
    loop {
        let mut loads = vec![0.0; compiled.n_edges];
        for ((demand, paths), &pick) in blocks.iter().zip(&choice) {
            for &e in &compiled.paths[paths[pick]] {
                loads[e] += demand;
            }
        }
        let sc: f64 = compiled
            .polys
            .iter()
            .zip(&loads)
            .map(|(poly, &f)| f * poly.value(f))
            .sum();
        worst = worst.max(sc);

        let mut k = 0;
        loop {
            if k == blocks.len() {
                return worst;
            }
            choice[k] += 1;
            if choice[k] < blocks[k].1.len() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

/// Plays `rounds` rounds of the repeated control game with one exponential-
/// weights learner per (controller, population) block.
pub fn run_episode(
    instance: &GameInstance,
    rounds: usize,
    config: &LearnConfig,
    seed: u64,
) -> Result<EpisodeLog, LearnError> {
    if rounds == 0 {
        return Err(LearnError::NoRounds);
    }
    let report = validate(instance);
    if !report.is_valid() {
        return Err(LearnError::Solve(SolveError::InvalidInstance(report)));
    }
    let compiled = Compiled::new(instance);

    // Action grids and learner states per controlled block.
    struct LearnerSetup {
        actions: Vec<Vec<f64>>,
        paths: Vec<usize>,
    }
    let mut setups = Vec::new();
    let mut learners = Vec::new();
    for ctl in &instance.assignment.controllers {
        for (pop_idx, pop) in instance.populations.iter().enumerate() {
            let share = ctl.share(&pop.id);
            if share <= 0.0 {
                continue;
            }
            let actions = simplex_grid(pop.paths.len(), config.resolution, share);
            if actions.is_empty() {
                return Err(LearnError::EmptyActionGrid);
            }
            let offset = compiled.pop_offset[pop_idx];
            setups.push(LearnerSetup {
                actions,
                paths: (offset..offset + pop.paths.len()).collect(),
            });
            learners.push(LearnerState::new(
                ctl.id.clone(),
                pop.id.clone(),
                setups.last().unwrap().actions.len(),
            ));
        }
    }
    if learners.is_empty() {
        return Err(LearnError::EmptyActionGrid);
    }

    let worst = worst_feasible_social_cost(instance);
    let normalizer = worst.max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(rounds);

    for round in 1..=rounds {
        let picks: Vec<usize> = learners
            .iter()
            .map(|learner| learner.sample(&mut rng))
            .collect();

        let mut loads = vec![0.0; compiled.n_edges];
        for (setup, &pick) in setups.iter().zip(&picks) {
            for (&p, &x) in setup.paths.iter().zip(&setup.actions[pick]) {
                if x != 0.0 {
                    for &e in &compiled.paths[p] {
                        loads[e] += x;
                    }
                }
            }
        }
        let social_cost: f64 = compiled
            .polys
            .iter()
            .zip(&loads)
            .map(|(poly, &f)| f * poly.value(f))
            .sum();

        let block_cost = |setup: &LearnerSetup, action: &[f64], loads: &[f64]| -> f64 {
            setup
                .paths
                .iter()
                .zip(action)
                .map(|(&p, &x)| {
                    if x == 0.0 {
                        0.0
                    } else {
                        x * compiled.paths[p]
                            .iter()
                            .map(|&e| compiled.polys[e].value(loads[e]))
                            .sum::<f64>()
                    }
                })
                .sum()
        };

        let mut splits = Vec::with_capacity(learners.len());
        let mut controller_costs = Vec::with_capacity(learners.len());
        for ((learner, setup), &pick) in learners.iter_mut().zip(&setups).zip(&picks) {
            let realized = block_cost(setup, &setup.actions[pick], &loads);
            splits.push(RealizedSplit {
                controller: learner.controller.clone(),
                population: learner.population.clone(),
                action: pick,
                path_flows: setup.actions[pick].clone(),
            });
            controller_costs.push(ControllerRoundCost {
                controller: learner.controller.clone(),
                cost: realized,
            });

            // Counterfactual full-information feedback: price every action
            // against the other learners' realized loads.
            let mut without = loads.clone();
            for (&p, &x) in setup.paths.iter().zip(&setup.actions[pick]) {
                if x != 0.0 {
                    for &e in &compiled.paths[p] {
                        without[e] -= x;
                    }
                }
            }
            let mut scratch = vec![0.0; compiled.n_edges];
            for (a, action) in setup.actions.iter().enumerate() {
                scratch.copy_from_slice(&without);
                for (&p, &x) in setup.paths.iter().zip(action) {
                    if x != 0.0 {
                        for &e in &compiled.paths[p] {
                            scratch[e] += x;
                        }
                    }
                }
                let cost = block_cost(setup, action, &scratch);
                learner.cumulative_loss[a] += cost / normalizer;
            }
            learner.rounds = round;
            learner.refresh();
        }

        records.push(RoundRecord { splits, controller_costs, social_cost });
    }

    let window = rounds.min(200);
    let final_trailing_mean = records[rounds - window..]
        .iter()
        .map(|r| r.social_cost)
        .sum::<f64>()
        / window as f64;

    Ok(EpisodeLog {
        rounds: records,
        learners,
        worst_social_cost: worst,
        resolution: config.resolution,
        seed,
        final_trailing_mean,
    })
}

/// Trailing-window mean social cost series: one (round, mean) pair per
/// round from `window` onward. The final point is the convergence
/// statistic.
pub fn learning_curve(log: &EpisodeLog, window: usize) -> Result<Vec<(usize, f64)>, LearnError> {
    let rounds = log.rounds.len();
    if window == 0 || window > rounds {
        return Err(LearnError::BadWindow { window, rounds });
    }
    let costs: Vec<f64> = log.rounds.iter().map(|r| r.social_cost).collect();
    let mut out = Vec::with_capacity(rounds - window + 1);
    let mut sum: f64 = costs[..window].iter().sum();
    out.push((window, sum / window as f64));
    for t in window..rounds {
        sum += costs[t] - costs[t - window];
        out.push((t + 1, sum / window as f64));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{solve_nce, NceOptions};
    use crate::equilibrium::solve_so;
    use crate::instances;

    #[test]
    fn simplex_grid_counts() {
        assert_eq!(simplex_grid(2, 11, 1.0).len(), 11);
        assert_eq!(simplex_grid(3, 11, 1.0).len(), 66);
        for action in simplex_grid(3, 11, 0.5) {
            let sum: f64 = action.iter().sum();
            assert!((sum - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn worst_cost_on_the_shortcut_network_is_two() {
        for r in [1usize, 2, 3] {
            let worst = worst_feasible_social_cost(&instances::braess(1, r));
            assert!((worst - 2.0).abs() < 1e-12, "R={r}: {worst}");
        }
    }

    #[test]
    fn single_learner_short_run_approaches_the_optimum() {
        let instance = instances::braess(1, 1);
        let log = run_episode(&instance, 100, &Default::default(), 1).unwrap();
        let so = solve_so(&instance, &Default::default()).unwrap().social_cost;
        let total100: f64 = log.rounds.iter().map(|r| r.social_cost).sum();
        assert!(
            (log.final_trailing_mean - so).abs() / so < 0.05,
            "trailing mean {} vs optimum {so}",
            log.final_trailing_mean
        );
        // Totals over the 100 rounds stay between the optimal and worst bounds.
        assert!(total100 >= 100.0 * so - 1e-6);
        assert!(total100 <= 100.0 * log.worst_social_cost + 1e-6);
    }

    #[test]
    fn per_round_cost_stays_between_the_optimum_and_the_worst_bound() {
        let instance = instances::braess(1, 2);
        let so = solve_so(&instance, &Default::default()).unwrap().social_cost;
        let log = run_episode(&instance, 500, &Default::default(), 7).unwrap();
        for record in &log.rounds {
            assert!(record.social_cost >= so - 1e-9);
            assert!(record.social_cost <= log.worst_social_cost + 1e-9);
        }
    }

    #[test]
    fn learners_converge_to_the_equilibrium_cost() {
        for r in [1usize, 2, 3] {
            let instance = instances::braess(1, r);
            let target = solve_nce(&instance, &NceOptions::with_tol(1e-12))
                .unwrap()
                .social_cost;
            let log = run_episode(&instance, 2000, &Default::default(), 1).unwrap();
            let curve = learning_curve(&log, 200).unwrap();
            let final_mean = curve.last().unwrap().1;
            assert!(
                (final_mean - target).abs() / target < 0.05,
                "R={r}: trailing mean {final_mean} vs equilibrium {target}"
            );
        }
    }

    #[test]
    fn no_regret_bound_holds_with_generous_slack() {
        let instance = instances::braess(1, 2);
        let rounds = 2000;
        let log = run_episode(&instance, rounds, &Default::default(), 3).unwrap();
        let compiled_costs = hindsight_costs(&instance, &log);
        for (j, learner) in log.learners.iter().enumerate() {
            let k = learner.weights.len() as f64;
            let realized: f64 = log
                .rounds
                .iter()
                .map(|r| r.controller_costs[j].cost)
                .sum::<f64>()
                / rounds as f64;
            let best_fixed = compiled_costs[j]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min)
                / rounds as f64;
            let bound = 5.0 * (k.ln() / rounds as f64).sqrt() * log.worst_social_cost;
            assert!(
                realized - best_fixed <= bound,
                "learner {j}: regret {} vs bound {bound}",
                realized - best_fixed
            );
        }
    }

    /// Total hindsight cost per learner per fixed action, replayed from the
    /// logged splits.
    fn hindsight_costs(instance: &GameInstance, log: &EpisodeLog) -> Vec<Vec<f64>> {
        let compiled = crate::solver::Compiled::new(instance);
        let pop_index = |id: &str| {
            instance
                .populations
                .iter()
                .position(|p| p.id == id)
                .unwrap()
        };
        let n = log.learners.len();
        let grids: Vec<Vec<Vec<f64>>> = log
            .learners
            .iter()
            .map(|l| {
                let pop = &instance.populations[pop_index(&l.population)];
                let share = instance
                    .assignment
                    .controller(&l.controller)
                    .unwrap()
                    .share(&l.population);
                simplex_grid(pop.paths.len(), log.resolution, share)
            })
            .collect();
        let mut totals: Vec<Vec<f64>> = grids.iter().map(|g| vec![0.0; g.len()]).collect();
        for record in &log.rounds {
            let mut loads = vec![0.0; compiled.n_edges];
            for split in &record.splits {
                let offset = compiled.pop_offset[pop_index(&split.population)];
                for (s, &x) in split.path_flows.iter().enumerate() {
                    if x != 0.0 {
                        for &e in &compiled.paths[offset + s] {
                            loads[e] += x;
                        }
                    }
                }
            }
            for j in 0..n {
                let split = &record.splits[j];
                let offset = compiled.pop_offset[pop_index(&split.population)];
                let mut without = loads.clone();
                for (s, &x) in split.path_flows.iter().enumerate() {
                    if x != 0.0 {
                        for &e in &compiled.paths[offset + s] {
                            without[e] -= x;
                        }
                    }
                }
                for (a, action) in grids[j].iter().enumerate() {
                    let mut scratch = without.clone();
                    for (s, &x) in action.iter().enumerate() {
                        if x != 0.0 {
                            for &e in &compiled.paths[offset + s] {
                                scratch[e] += x;
                            }
                        }
                    }
                    let cost: f64 = action
                        .iter()
                        .enumerate()
                        .map(|(s, &x)| {
                            x * compiled.paths[offset + s]
                                .iter()
                                .map(|&e| compiled.polys[e].value(scratch[e]))
                                .sum::<f64>()
                        })
                        .sum();
                    totals[j][a] += cost;
                }
            }
        }
        totals
    }

    #[test]
    fn curve_shapes() {
        let instance = instances::braess(1, 1);
        let log = run_episode(&instance, 50, &Default::default(), 2).unwrap();

        // Window 1 returns the raw series.
        let raw = learning_curve(&log, 1).unwrap();
        assert_eq!(raw.len(), 50);
        for (t, mean) in &raw {
            assert_eq!(*mean, log.rounds[t - 1].social_cost);
        }

        // A constant series yields a flat curve.
        let mut flat = log.clone();
        for r in flat.rounds.iter_mut() {
            r.social_cost = 1.75;
        }
        for (_, mean) in learning_curve(&flat, 10).unwrap() {
            assert!((mean - 1.75).abs() < 1e-12);
        }

        assert!(matches!(
            learning_curve(&log, 51),
            Err(LearnError::BadWindow { .. })
        ));
        assert!(matches!(
            learning_curve(&log, 0),
            Err(LearnError::BadWindow { .. })
        ));
    }

    #[test]
    fn episodes_are_reproducible() {
        let instance = instances::braess(1, 2);
        let a = run_episode(&instance, 50, &Default::default(), 9).unwrap();
        let b = run_episode(&instance, 50, &Default::default(), 9).unwrap();
        for (ra, rb) in a.rounds.iter().zip(&b.rounds) {
            assert_eq!(ra.social_cost, rb.social_cost);
        }
        let c = run_episode(&instance, 50, &Default::default(), 10).unwrap();
        assert!(a
            .rounds
            .iter()
            .zip(&c.rounds)
            .any(|(ra, rc)| ra.social_cost != rc.social_cost));
    }
}
