//! Equilibria and optima of the underlying routing game: user equilibria
//! (optionally information-constrained), social optima via the marginal-cost
//! transform, social cost and the route-choice potential.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::game::{
    validate, CostPolynomial, GameInstance, ValidationReport, FLOW_EPS,
};
use crate::solver::{
    self, Block, Compiled, PotentialObjective,
};

/// Tolerance for mass-conservation checks on externally supplied flows.
const FEAS_TOL: f64 = 1e-9;

/// Solver configuration. `seed` 0 means deterministic uniform initialization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Relative duality-gap target; also the used-route cost slack.
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-8, max_iters: 100_000, seed: 0 }
    }
}

impl SolveOptions {
    pub fn with_tol(tol: f64) -> Self {
        SolveOptions { tol, ..Default::default() }
    }

    pub fn with_seed(seed: u64) -> Self {
        SolveOptions { seed, ..Default::default() }
    }
}

/// Errors shared by the solver-facing operations.
#[derive(Debug, Clone)]
pub enum SolveError {
    InvalidInstance(ValidationReport),
    InfeasibleFlows(String),
    NegativeLoad(f64),
    UnknownController(String),
    NoConvergence { iterations: usize, residual: f64 },
}

impl fmt::Display for SolveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolveError::InvalidInstance(report) => {
                write!(f, "instance failed validation:\n{report}")
            }
            SolveError::InfeasibleFlows(msg) => write!(f, "infeasible flows: {msg}"),
            SolveError::NegativeLoad(x) => write!(f, "edge load must be >= 0, got {x}"),
            SolveError::UnknownController(id) => write!(f, "unknown controller `{id}`"),
            SolveError::NoConvergence { iterations, residual } => write!(
                f,
                "no convergence after {iterations} iterations (residual {residual:.3e})"
            ),
        }
    }
}

impl std::error::Error for SolveError {}

/// Path flows of one controller within one population, aligned with the
/// population's path list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerPopulationFlow {
    pub controller: String,
    pub population: String,
    pub path_flows: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeLoad {
    pub edge: String,
    pub load: f64,
}

/// A complete routing: per-controller per-population path flows plus the
/// edge loads they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowProfile {
    pub flows: Vec<ControllerPopulationFlow>,
    pub edge_loads: Vec<EdgeLoad>,
}

impl FlowProfile {
    /// Builds a profile from (controller, population, path flows) entries,
    /// recomputing edge loads from scratch.
    pub fn from_entries(
        instance: &GameInstance,
        flows: Vec<ControllerPopulationFlow>,
    ) -> FlowProfile {
        let loads = profile_loads(instance, &flows);
        FlowProfile {
            flows,
            edge_loads: instance
                .network
                .edges
                .iter()
                .zip(loads)
                .map(|(e, load)| EdgeLoad { edge: e.id.clone(), load })
                .collect(),
        }
    }

    pub fn get(&self, controller: &str, population: &str) -> Option<&[f64]> {
        self.flows
            .iter()
            .find(|f| f.controller == controller && f.population == population)
            .map(|f| f.path_flows.as_slice())
    }

    pub fn load_of(&self, edge: &str) -> f64 {
        self.edge_loads
            .iter()
            .find(|l| l.edge == edge)
            .map_or(0.0, |l| l.load)
    }

    /// Path flows of one population summed over controllers.
    pub fn population_path_flows(&self, instance: &GameInstance, population: &str) -> Vec<f64> {
        let n = instance
            .population(population)
            .map_or(0, |p| p.paths.len());
        let mut total = vec![0.0; n];
        for entry in self.flows.iter().filter(|f| f.population == population) {
            for (t, &x) in total.iter_mut().zip(&entry.path_flows) {
                *t += x;
            }
        }
        total
    }
}

/// Cost outcome of one information type (or of a whole population when no
/// types were declared), with its share of the path flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeOutcome {
    pub population: String,
    /// None when the whole population acts as a single type.
    pub type_id: Option<String>,
    pub demand: f64,
    /// Flow-weighted average route cost experienced by this type.
    pub cost: f64,
    /// This type's path flows, aligned with the population's path list.
    pub path_flows: Vec<f64>,
}

/// Converged (or truncated) solve outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub flows: FlowProfile,
    pub social_cost: f64,
    /// Route-choice potential of the final flows under the original costs.
    pub potential: f64,
    pub types: Vec<TypeOutcome>,
    pub iterations: usize,
    pub relative_gap: f64,
    pub converged: bool,
}

/// Polynomial edge cost at load `f`; errors on negative load.
pub fn edge_cost(poly: &CostPolynomial, f: f64) -> Result<f64, SolveError> {
    if f < 0.0 {
        return Err(SolveError::NegativeLoad(f));
    }
    Ok(poly.value(f))
}

/// Sum over edges of the integral of the edge cost up to its load.
pub fn beckmann_potential(
    instance: &GameInstance,
    flows: &FlowProfile,
) -> Result<f64, SolveError> {
    let loads = checked_loads(instance, flows)?;
    Ok(potential_of_loads(instance, &loads))
}

/// Total travel cost sum_e f_e c_e(f_e) of a feasible profile.
pub fn social_cost(instance: &GameInstance, flows: &FlowProfile) -> Result<f64, SolveError> {
    let loads = checked_loads(instance, flows)?;
    Ok(social_cost_of_loads(instance, &loads))
}

pub(crate) fn social_cost_of_loads(instance: &GameInstance, loads: &[f64]) -> f64 {
    instance
        .network
        .edges
        .iter()
        .zip(loads)
        .map(|(e, &f)| f * e.cost.value(f))
        .sum()
}

pub(crate) fn potential_of_loads(instance: &GameInstance, loads: &[f64]) -> f64 {
    instance
        .network
        .edges
        .iter()
        .zip(loads)
        .map(|(e, &f)| e.cost.integral(f))
        .sum()
}

/// User equilibrium of the underlying routing game by potential
/// minimization. Controller boundaries are ignored (one selfish mass);
/// declared information types only choose among their known routes.
pub fn solve_ue(
    instance: &GameInstance,
    opts: &SolveOptions,
) -> Result<EquilibriumResult, SolveError> {
    solve_routing(instance, opts, false)
}

/// Social optimum: the same potential minimization run under marginal cost
/// polynomials c(z) + z c'(z), reported under the original costs.
pub fn solve_so(
    instance: &GameInstance,
    opts: &SolveOptions,
) -> Result<EquilibriumResult, SolveError> {
    solve_routing(instance, opts, true)
}

/// Largest amount by which a used route of any type exceeds the cheapest
/// route that type knows, at the result's edge loads. Zero (within the
/// solve tolerance) certifies the information-constrained equilibrium.
pub fn icue_residual(
    instance: &GameInstance,
    result: &EquilibriumResult,
) -> Result<f64, SolveError> {
    let compiled = Compiled::new(instance);
    let loads = checked_loads(instance, &result.flows)?;
    let mut worst: f64 = 0.0;
    for outcome in &result.types {
        let pop_idx = instance
            .populations
            .iter()
            .position(|p| p.id == outcome.population)
            .ok_or_else(|| SolveError::InfeasibleFlows(format!(
                "unknown population `{}`",
                outcome.population
            )))?;
        let known = known_path_positions(instance, pop_idx, outcome.type_id.as_deref());
        let offset = compiled.pop_offset[pop_idx];
        let cost_of = |s: usize| -> f64 {
            compiled.paths[offset + s]
                .iter()
                .map(|&e| instance.network.edges[e].cost.value(loads[e]))
                .sum()
        };
        let min_known = known
            .iter()
            .map(|&s| cost_of(s))
            .fold(f64::INFINITY, f64::min);
        for (s, &x) in outcome.path_flows.iter().enumerate() {
            if x > FLOW_EPS {
                worst = worst.max(cost_of(s) - min_known);
            }
        }
    }
    Ok(worst)
}

fn known_path_positions(
    instance: &GameInstance,
    pop_idx: usize,
    type_id: Option<&str>,
) -> Vec<usize> {
    let pop = &instance.populations[pop_idx];
    match type_id {
        Some(id) => instance
            .information_types
            .iter()
            .find(|t| t.id == id && t.population == pop.id)
            .map(|t| t.known_paths.clone())
            .unwrap_or_else(|| (0..pop.paths.len()).collect()),
        None => (0..pop.paths.len()).collect(),
    }
}

fn solve_routing(
    instance: &GameInstance,
    opts: &SolveOptions,
    marginal: bool,
) -> Result<EquilibriumResult, SolveError> {
    let report = validate(instance);
    if !report.is_valid() {
        return Err(SolveError::InvalidInstance(report));
    }
    let compiled = Compiled::new(instance);

    // One block per information type; populations without declared types
    // act as a single block over their full path set.
    let mut blocks = Vec::new();
    let mut block_meta: Vec<(usize, Option<String>, Vec<usize>)> = Vec::new();
    for (pop_idx, pop) in instance.populations.iter().enumerate() {
        let offset = compiled.pop_offset[pop_idx];
        let types = instance.types_of(&pop.id);
        if types.is_empty() {
            blocks.push(Block {
                demand: pop.demand,
                paths: (offset..offset + pop.paths.len()).collect(),
            });
            block_meta.push((pop_idx, None, (0..pop.paths.len()).collect()));
        } else {
            for ty in types {
                if ty.demand <= 0.0 {
                    continue;
                }
                blocks.push(Block {
                    demand: ty.demand,
                    paths: ty.known_paths.iter().map(|&s| offset + s).collect(),
                });
                block_meta.push((pop_idx, Some(ty.id.clone()), ty.known_paths.clone()));
            }
        }
    }

    let polys: Vec<CostPolynomial> = if marginal {
        compiled.polys.iter().map(|p| p.marginal()).collect()
    } else {
        compiled.polys.clone()
    };
    let obj = PotentialObjective { polys: &polys };
    let init = solver::seeded_init(&blocks, opts.seed);
    let mut sol = solver::solve_blocks(
        compiled.n_edges,
        &compiled.paths,
        &blocks,
        &obj,
        init,
        opts.tol,
        opts.max_iters,
    );
    solver::truncate_flows(&mut sol.flows);
    let loads = solver::compute_loads(compiled.n_edges, &compiled.paths, &blocks, &sol.flows);

    // Per-type outcomes under the original costs.
    let mut types = Vec::with_capacity(blocks.len());
    for ((pop_idx, type_id, positions), block_flows) in block_meta.iter().zip(&sol.flows) {
        let pop = &instance.populations[*pop_idx];
        let offset = compiled.pop_offset[*pop_idx];
        let mut path_flows = vec![0.0; pop.paths.len()];
        let mut total_cost = 0.0;
        let mut min_cost = f64::INFINITY;
        for (&s, &x) in positions.iter().zip(block_flows) {
            path_flows[s] = x;
            let cost: f64 = compiled.paths[offset + s]
                .iter()
                .map(|&e| instance.network.edges[e].cost.value(loads[e]))
                .sum();
            total_cost += x * cost;
            min_cost = min_cost.min(cost);
        }
        let demand: f64 = block_flows.iter().sum();
        types.push(TypeOutcome {
            population: pop.id.clone(),
            type_id: type_id.clone(),
            demand,
            cost: if demand > 0.0 { total_cost / demand } else { min_cost },
            path_flows,
        });
    }

    // Split each population's flows across its controllers in proportion
    // to the controlled demand.
    let mut entries = Vec::new();
    for ctl in &instance.assignment.controllers {
        for (pop_id, share) in ctl.controlled_populations() {
            let pop_idx = instance
                .populations
                .iter()
                .position(|p| &p.id == pop_id)
                .expect("validated instance");
            let pop = &instance.populations[pop_idx];
            let ratio = share / pop.demand;
            let mut path_flows = vec![0.0; pop.paths.len()];
            for outcome in types.iter().filter(|t| &t.population == pop_id) {
                for (pf, &x) in path_flows.iter_mut().zip(&outcome.path_flows) {
                    *pf += x * ratio;
                }
            }
            entries.push(ControllerPopulationFlow {
                controller: ctl.id.clone(),
                population: pop_id.clone(),
                path_flows,
            });
        }
    }

    let flows = FlowProfile::from_entries(instance, entries);
    let social_cost = social_cost_of_loads(instance, &loads);
    let potential = potential_of_loads(instance, &loads);
    Ok(EquilibriumResult {
        flows,
        social_cost,
        potential,
        types,
        iterations: sol.iterations,
        relative_gap: sol.relative_gap,
        converged: sol.converged,
    })
}

/// Recomputes edge loads from the profile's path flows, after checking
/// nonnegativity, mass conservation per (controller, population), and
/// agreement with the stored loads.
fn checked_loads(instance: &GameInstance, flows: &FlowProfile) -> Result<Vec<f64>, SolveError> {
    for entry in &flows.flows {
        let pop = instance.population(&entry.population).ok_or_else(|| {
            SolveError::InfeasibleFlows(format!("unknown population `{}`", entry.population))
        })?;
        let ctl = instance
            .assignment
            .controller(&entry.controller)
            .ok_or_else(|| SolveError::UnknownController(entry.controller.clone()))?;
        if entry.path_flows.len() != pop.paths.len() {
            return Err(SolveError::InfeasibleFlows(format!(
                "controller {} population {}: {} flow entries for {} paths",
                entry.controller,
                entry.population,
                entry.path_flows.len(),
                pop.paths.len()
            )));
        }
        if let Some(&bad) = entry.path_flows.iter().find(|&&x| x < 0.0) {
            return Err(SolveError::InfeasibleFlows(format!(
                "controller {} population {}: negative flow {bad}",
                entry.controller, entry.population
            )));
        }
        let sum: f64 = entry.path_flows.iter().sum();
        let share = ctl.share(&entry.population);
        if (sum - share).abs() > FEAS_TOL * share.max(1.0) {
            return Err(SolveError::InfeasibleFlows(format!(
                "controller {} population {}: flows sum to {sum}, controlled demand is {share}",
                entry.controller, entry.population
            )));
        }
    }
    // Populations with a positive share need an entry.
    for ctl in &instance.assignment.controllers {
        for (pop_id, _) in ctl.controlled_populations() {
            if flows.get(&ctl.id, pop_id).is_none() {
                return Err(SolveError::InfeasibleFlows(format!(
                    "missing flows for controller {} population {pop_id}",
                    ctl.id
                )));
            }
        }
    }

    let loads = profile_loads(instance, &flows.flows);
    for stored in &flows.edge_loads {
        let Some(idx) = instance.network.edge_index(&stored.edge) else {
            return Err(SolveError::InfeasibleFlows(format!(
                "unknown edge `{}` in stored loads",
                stored.edge
            )));
        };
        if (stored.load - loads[idx]).abs() > FEAS_TOL * loads[idx].max(1.0) {
            return Err(SolveError::InfeasibleFlows(format!(
                "edge {} stored load {} differs from recomputed {}",
                stored.edge, stored.load, loads[idx]
            )));
        }
    }
    Ok(loads)
}

fn profile_loads(instance: &GameInstance, flows: &[ControllerPopulationFlow]) -> Vec<f64> {
    let mut loads = vec![0.0; instance.network.edges.len()];
    for entry in flows {
        let Some(pop) = instance.population(&entry.population) else { continue };
        for (path, &x) in pop.paths.iter().zip(&entry.path_flows) {
            if x != 0.0 {
                for edge_id in &path.edges {
                    if let Some(idx) = instance.network.edge_index(edge_id) {
                        loads[idx] += x;
                    }
                }
            }
        }
    }
    loads
}
