//! The operating-systems game: populations strategically split their demand
//! across controllers, each split inducing a control-game equilibrium whose
//! per-unit costs drive the next reassignment. Mass flows from the dearest
//! controller to the cheapest until control is proportional.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::analytics::with_shares;
use crate::control::{solve_nce_from, NceOptions, NceResult};
use crate::equilibrium::{FlowProfile, SolveError};
use crate::game::{validate, GameInstance};

/// Cost spreads at or below this level count as ties; keeps symmetric
/// profiles from drifting on solver rounding noise.
const SPREAD_EPS: f64 = 1e-9;

/// Share of each population's demand assigned to each controller, in flow
/// units. Feasible when each population's shares sum to its demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsShareProfile {
    pub entries: Vec<OsShare>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsShare {
    pub population: String,
    pub controller: String,
    pub share: f64,
}

impl OsShareProfile {
    /// Reads the profile off an instance's control assignment.
    pub fn from_instance(instance: &GameInstance) -> OsShareProfile {
        let mut entries = Vec::new();
        for pop in &instance.populations {
            for ctl in &instance.assignment.controllers {
                entries.push(OsShare {
                    population: pop.id.clone(),
                    controller: ctl.id.clone(),
                    share: ctl.share(&pop.id),
                });
            }
        }
        OsShareProfile { entries }
    }

    /// Applies the same demand fractions to every population, one per
    /// controller in assignment order.
    pub fn from_fractions(
        instance: &GameInstance,
        fractions: &[f64],
    ) -> Result<OsShareProfile, OsChoiceError> {
        if fractions.len() != instance.assignment.controllers.len() {
            return Err(OsChoiceError::Infeasible(format!(
                "{} fractions for {} controllers",
                fractions.len(),
                instance.assignment.controllers.len()
            )));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
            return Err(OsChoiceError::Infeasible(format!(
                "fractions must be nonnegative and sum to 1, got {fractions:?}"
            )));
        }
        let mut entries = Vec::new();
        for pop in &instance.populations {
            for (ctl, &fraction) in instance.assignment.controllers.iter().zip(fractions) {
                entries.push(OsShare {
                    population: pop.id.clone(),
                    controller: ctl.id.clone(),
                    share: fraction * pop.demand,
                });
            }
        }
        Ok(OsShareProfile { entries })
    }

    pub fn share(&self, population: &str, controller: &str) -> f64 {
        self.entries
            .iter()
            .find(|e| e.population == population && e.controller == controller)
            .map_or(0.0, |e| e.share)
    }

    fn set_share(&mut self, population: &str, controller: &str, share: f64) {
        if let Some(entry) = self
            .entries
            .iter_mut()
            .find(|e| e.population == population && e.controller == controller)
        {
            entry.share = share;
        } else {
            self.entries.push(OsShare {
                population: population.to_string(),
                controller: controller.to_string(),
                share,
            });
        }
    }

    fn check_feasible(&self, instance: &GameInstance) -> Result<(), OsChoiceError> {
        for entry in &self.entries {
            if entry.share < 0.0 || !entry.share.is_finite() {
                return Err(OsChoiceError::Infeasible(format!(
                    "share of population {} under {} is {}",
                    entry.population, entry.controller, entry.share
                )));
            }
        }
        for pop in &instance.populations {
            let total: f64 = self
                .entries
                .iter()
                .filter(|e| e.population == pop.id)
                .map(|e| e.share)
                .sum();
            if (total - pop.demand).abs() > 1e-9 * pop.demand.max(1.0) {
                return Err(OsChoiceError::Infeasible(format!(
                    "population {} shares sum to {total}, demand is {}",
                    pop.id, pop.demand
                )));
            }
        }
        Ok(())
    }

    /// Largest deviation of any control fraction from 1/R.
    pub fn proportionality_deviation(&self, instance: &GameInstance) -> f64 {
        let even = 1.0 / instance.assignment.controllers.len() as f64;
        let mut worst: f64 = 0.0;
        for pop in &instance.populations {
            for ctl in &instance.assignment.controllers {
                let fraction = self.share(&pop.id, &ctl.id) / pop.demand;
                worst = worst.max((fraction - even).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone)]
pub enum OsChoiceError {
    Infeasible(String),
    Solve(SolveError),
    StepOutOfRange(f64),
    UnknownPopulation(String),
}

impl fmt::Display for OsChoiceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OsChoiceError::Infeasible(msg) => write!(f, "infeasible share profile: {msg}"),
            OsChoiceError::Solve(e) => write!(f, "{e}"),
            OsChoiceError::StepOutOfRange(eta) => {
                write!(f, "step size must lie in (0, 1], got {eta}")
            }
            OsChoiceError::UnknownPopulation(id) => write!(f, "unknown population `{id}`"),
        }
    }
}

impl std::error::Error for OsChoiceError {}

/// One recorded step of the dynamics, costed at the induced equilibrium.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OsStep {
    pub step: usize,
    pub shares: OsShareProfile,
    pub costs: Vec<PassengerCost>,
    pub social_cost: f64,
    /// Route-choice potential at the induced equilibrium loads.
    pub potential: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassengerCost {
    pub population: String,
    pub controller: String,
    pub per_unit_cost: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OsChoiceTrace {
    pub steps: Vec<OsStep>,
    pub converged: bool,
    pub final_deviation: f64,
}

/// Average per-unit cost each controller delivers to population `i` at the
/// equilibrium induced by `y`. Controllers holding none of `i` are priced
/// at the cheapest route cost, the marginal cost of joining them.
pub fn passenger_cost(
    instance: &GameInstance,
    y: &OsShareProfile,
    population: &str,
) -> Result<BTreeMap<String, f64>, OsChoiceError> {
    y.check_feasible(instance)?;
    if instance.population(population).is_none() {
        return Err(OsChoiceError::UnknownPopulation(population.to_string()));
    }
    let induced = induced_instance(instance, y);
    let nce = solve_nce_from(&induced, &inner_options(), None).map_err(OsChoiceError::Solve)?;
    Ok(per_unit_costs(&induced, &nce.flows, population))
}

/// Moves `eta * d_i` of every population's mass (clipped to what the source
/// holds) from its highest per-unit-cost controller to its lowest, with ties
/// broken by controller order.
pub fn os_best_response_step(
    instance: &GameInstance,
    y: &OsShareProfile,
    eta: f64,
) -> Result<OsShareProfile, OsChoiceError> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(OsChoiceError::StepOutOfRange(eta));
    }
    y.check_feasible(instance)?;
    let induced = induced_instance(instance, y);
    let nce = solve_nce_from(&induced, &inner_options(), None).map_err(OsChoiceError::Solve)?;
    let mut next = y.clone();
    for pop in &instance.populations {
        let costs = per_unit_costs(&induced, &nce.flows, &pop.id);
        transfer(instance, &mut next, pop.demand * eta, &pop.id, &costs);
    }
    Ok(next)
}

/// Iterates cost-driven reassignment steps until the per-population cost
/// spread or the proportionality deviation falls below `tol`. The step size
/// starts at `eta` and halves whenever a population reverses its previous
/// transfer, so the dynamics settle instead of orbiting the fixed point.
pub fn solve_os_game(
    instance: &GameInstance,
    eta: f64,
    tol: f64,
    max_steps: usize,
) -> Result<OsChoiceTrace, OsChoiceError> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(OsChoiceError::StepOutOfRange(eta));
    }
    let report = validate(instance);
    if !report.is_valid() {
        return Err(OsChoiceError::Solve(SolveError::InvalidInstance(report)));
    }
    let mut y = OsShareProfile::from_instance(instance);
    y.check_feasible(instance)?;

    let mut steps = Vec::new();
    let mut warm: Option<FlowProfile> = None;
    let mut eta_t = eta;
    let mut last_moves: BTreeMap<String, (String, String)> = BTreeMap::new();
    let mut converged = false;

    for step in 0..=max_steps {
        let induced = induced_instance(instance, &y);
        let nce: NceResult = solve_nce_from(&induced, &inner_options(), warm.as_ref())
            .map_err(OsChoiceError::Solve)?;
        let mut costs = Vec::new();
        let mut spread: f64 = 0.0;
        for pop in &instance.populations {
            let per_unit = per_unit_costs(&induced, &nce.flows, &pop.id);
            let lo = per_unit.values().fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = per_unit.values().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            spread = spread.max(hi - lo);
            for ctl in &instance.assignment.controllers {
                costs.push(PassengerCost {
                    population: pop.id.clone(),
                    controller: ctl.id.clone(),
                    per_unit_cost: per_unit[&ctl.id],
                });
            }
        }
        let potential = crate::equilibrium::beckmann_potential(&induced, &nce.flows)
            .map_err(OsChoiceError::Solve)?;
        steps.push(OsStep {
            step,
            shares: y.clone(),
            costs: costs.clone(),
            social_cost: nce.social_cost,
            potential,
        });

        let deviation = y.proportionality_deviation(instance);
        if spread < tol || deviation < tol {
            converged = true;
            break;
        }
        if step == max_steps {
            break;
        }

        for pop in &instance.populations {
            let per_unit: BTreeMap<String, f64> = costs
                .iter()
                .filter(|c| c.population == pop.id)
                .map(|c| (c.controller.clone(), c.per_unit_cost))
                .collect();
            let moved = transfer(instance, &mut y, pop.demand * eta_t, &pop.id, &per_unit);
            if let Some((from, to)) = moved {
                if let Some((prev_from, prev_to)) = last_moves.get(&pop.id) {
                    if *prev_from == to && *prev_to == from {
                        eta_t *= 0.5;
                    }
                }
                last_moves.insert(pop.id.clone(), (from, to));
            }
        }
        warm = Some(nce.flows);
    }

    let final_deviation = y.proportionality_deviation(instance);
    Ok(OsChoiceTrace { steps, converged, final_deviation })
}

fn inner_options() -> NceOptions {
    NceOptions { tol: 1e-13, ..Default::default() }
}

/// The control-game instance induced by a share profile; controllers keep
/// their ids so warm starts stay aligned.
fn induced_instance(instance: &GameInstance, y: &OsShareProfile) -> GameInstance {
    if instance.populations.len() == 1 {
        let shares: Vec<f64> = instance
            .assignment
            .controllers
            .iter()
            .map(|c| y.share(&instance.populations[0].id, &c.id))
            .collect();
        let mut induced = with_shares(instance, &shares);
        for (ctl, original) in induced
            .assignment
            .controllers
            .iter_mut()
            .zip(&instance.assignment.controllers)
        {
            ctl.id = original.id.clone();
        }
        return induced;
    }
    let mut induced = instance.clone();
    for ctl in induced.assignment.controllers.iter_mut() {
        ctl.shares = instance
            .populations
            .iter()
            .map(|pop| (pop.id.clone(), y.share(&pop.id, &ctl.id)))
            .collect();
    }
    induced
}

fn per_unit_costs(
    induced: &GameInstance,
    flows: &FlowProfile,
    population: &str,
) -> BTreeMap<String, f64> {
    let loads: Vec<f64> = induced
        .network
        .edges
        .iter()
        .map(|e| flows.load_of(&e.id))
        .collect();
    let pop = induced.population(population).expect("checked population");
    let path_costs: Vec<f64> = pop
        .paths
        .iter()
        .map(|path| {
            path.edges
                .iter()
                .map(|id| {
                    let e = induced.network.edge_index(id).expect("validated path");
                    induced.network.edges[e].cost.value(loads[e])
                })
                .sum()
        })
        .collect();
    let cheapest = path_costs.iter().copied().fold(f64::INFINITY, f64::min);

    let mut out = BTreeMap::new();
    for ctl in &induced.assignment.controllers {
        let share = ctl.share(population);
        let cost = if share > 0.0 {
            match flows.get(&ctl.id, population) {
                Some(path_flows) => {
                    let total: f64 = path_flows
                        .iter()
                        .zip(&path_costs)
                        .map(|(&x, &c)| x * c)
                        .sum();
                    total / share
                }
                None => cheapest,
            }
        } else {
            cheapest
        };
        out.insert(ctl.id.clone(), cost);
    }
    out
}

/// Applies one mass transfer for `population`; returns the (from, to)
/// controllers when something moved.
fn transfer(
    instance: &GameInstance,
    y: &mut OsShareProfile,
    amount: f64,
    population: &str,
    per_unit: &BTreeMap<String, f64>,
) -> Option<(String, String)> {
    let order: Vec<&str> = instance
        .assignment
        .controllers
        .iter()
        .map(|c| c.id.as_str())
        .collect();
    let mut to = order[0];
    for &ctl in &order {
        if per_unit[ctl] < per_unit[to] {
            to = ctl;
        }
    }
    // Dearest controller that actually holds mass to give away.
    let mut from = order[0];
    let mut found = false;
    for &ctl in &order {
        let holds = y.share(population, ctl) > 0.0;
        if holds && (!found || per_unit[ctl] > per_unit[from]) {
            from = ctl;
            found = true;
        }
    }
    if !found || from == to || per_unit[from] - per_unit[to] <= SPREAD_EPS {
        return None;
    }
    let available = y.share(population, from);
    let moved = amount.min(available);
    if moved <= 0.0 {
        return None;
    }
    y.set_share(population, from, available - moved);
    y.set_share(population, to, y.share(population, to) + moved);
    Some((from.to_string(), to.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{pigou_nce_social_cost, PoaQuery};
    use crate::control::verify_potential_descent;
    use crate::instances;

    #[test]
    fn symmetric_split_prices_both_controllers_equally() {
        let instance = instances::pigou(1, 2);
        let y = OsShareProfile::from_fractions(&instance, &[0.5, 0.5]).unwrap();
        let costs = passenger_cost(&instance, &y, "p1").unwrap();
        assert!((costs["r1"] - 7.0 / 9.0).abs() < 1e-6);
        assert!((costs["r2"] - 7.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn sole_controller_delivers_the_optimum_and_joining_is_cheaper() {
        let instance = instances::pigou(1, 2);
        let y = OsShareProfile::from_fractions(&instance, &[1.0, 0.0]).unwrap();
        let costs = passenger_cost(&instance, &y, "p1").unwrap();
        assert!((costs["r1"] - 0.75).abs() < 1e-6);
        // An empty controller would route at the cheapest-route price.
        assert!((costs["r2"] - 0.5).abs() < 1e-6);
        assert!(costs["r2"] < costs["r1"]);
    }

    #[test]
    fn small_controllers_ride_cheaper() {
        let instance = instances::pigou(1, 2);
        let y = OsShareProfile::from_fractions(&instance, &[0.95, 0.05]).unwrap();
        let costs = passenger_cost(&instance, &y, "p1").unwrap();
        assert!(costs["r2"] < costs["r1"], "{costs:?}");
    }

    #[test]
    fn step_moves_the_requested_mass_toward_the_cheap_controller() {
        let instance = instances::pigou(1, 2);
        let y = OsShareProfile::from_fractions(&instance, &[0.9, 0.1]).unwrap();
        let next = os_best_response_step(&instance, &y, 0.1).unwrap();
        assert!((next.share("p1", "r1") - 0.8).abs() < 1e-12);
        assert!((next.share("p1", "r2") - 0.2).abs() < 1e-12);
    }

    #[test]
    fn proportional_profiles_do_not_move() {
        let instance = instances::pigou(1, 2);
        let y = OsShareProfile::from_fractions(&instance, &[0.5, 0.5]).unwrap();
        let next = os_best_response_step(&instance, &y, 0.1).unwrap();
        assert_eq!(next.share("p1", "r1"), 0.5);
        assert_eq!(next.share("p1", "r2"), 0.5);
    }

    #[test]
    fn full_swing_at_unit_step() {
        let instance = instances::pigou(1, 2);
        let y = OsShareProfile::from_fractions(&instance, &[1.0, 0.0]).unwrap();
        let next = os_best_response_step(&instance, &y, 1.0).unwrap();
        assert_eq!(next.share("p1", "r1"), 0.0);
        assert_eq!(next.share("p1", "r2"), 1.0);
    }

    #[test]
    fn two_controller_dynamics_settle_on_the_even_split() {
        let instance = crate::analytics::with_shares(&instances::pigou(1, 2), &[0.9, 0.1]);
        let trace = solve_os_game(&instance, 0.05, 1e-6, 10_000).unwrap();
        assert!(trace.converged);
        assert!(trace.final_deviation <= 1e-5, "{}", trace.final_deviation);
        let last = trace.steps.last().unwrap();
        assert!((last.shares.share("p1", "r1") - 0.5).abs() <= 1e-5);
        let target = pigou_nce_social_cost(&PoaQuery::new(1.0, 2).unwrap());
        assert!((last.social_cost - target).abs() <= 1e-4);
    }

    #[test]
    fn three_controller_dynamics_settle_on_thirds() {
        let instance = crate::analytics::with_shares(&instances::pigou(1, 3), &[0.6, 0.3, 0.1]);
        let trace = solve_os_game(&instance, 0.05, 1e-6, 10_000).unwrap();
        assert!(trace.converged);
        assert!(trace.final_deviation <= 1e-5, "{}", trace.final_deviation);
        let target = pigou_nce_social_cost(&PoaQuery::new(1.0, 3).unwrap());
        let last = trace.steps.last().unwrap();
        assert!((last.social_cost - target).abs() <= 1e-4);
    }

    #[test]
    fn proportional_start_converges_immediately() {
        let instance = instances::pigou(1, 2);
        let trace = solve_os_game(&instance, 0.05, 1e-6, 10_000).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.steps.len(), 1);
        assert!(trace.final_deviation < 1e-12);
    }

    #[test]
    fn induced_potential_never_rises_along_the_bundled_runs() {
        for fractions in [vec![0.9, 0.1], vec![0.6, 0.3, 0.1]] {
            let instance =
                crate::analytics::with_shares(&instances::pigou(1, fractions.len()), &fractions);
            let trace = solve_os_game(&instance, 0.05, 1e-6, 10_000).unwrap();
            let potentials: Vec<f64> = trace.steps.iter().map(|s| s.potential).collect();
            assert!(
                verify_potential_descent(&potentials),
                "potential rose along {potentials:?}"
            );
        }
    }

    #[test]
    fn every_step_conserves_mass_exactly() {
        let instance = crate::analytics::with_shares(&instances::pigou(1, 3), &[0.6, 0.3, 0.1]);
        let trace = solve_os_game(&instance, 0.05, 1e-6, 10_000).unwrap();
        for step in &trace.steps {
            let total: f64 = step.shares.entries.iter().map(|e| e.share).sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn bad_step_sizes_are_rejected() {
        let instance = instances::pigou(1, 2);
        let y = OsShareProfile::from_instance(&instance);
        assert!(matches!(
            os_best_response_step(&instance, &y, 0.0),
            Err(OsChoiceError::StepOutOfRange(_))
        ));
        assert!(matches!(
            solve_os_game(&instance, 1.5, 1e-6, 100),
            Err(OsChoiceError::StepOutOfRange(_))
        ));
    }
}
