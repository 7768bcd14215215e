//! The control game: each operating system routes the demand shares it
//! holds so as to minimize its own subpopulation's total travel cost, with
//! the other controllers' edge loads fixed. Round-robin best responses
//! settle on a Nash equilibrium of the control game.

use serde::{Deserialize, Serialize};

use crate::equilibrium::{
    ControllerPopulationFlow, EdgeLoad, FlowProfile, SolveError,
};
use crate::game::{validate, GameInstance, FLOW_EPS};
use crate::solver::{self, Block, Compiled, EdgeObjective, OwnCostObjective};

/// Options for [`solve_nce`]. `tol` bounds the largest per-round cost
/// improvement of any controller; inner best responses run at `tol / 10`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NceOptions {
    pub tol: f64,
    pub max_rounds: usize,
    /// 0 starts every controller from a uniform split; otherwise each
    /// (controller, population) block starts from a seeded random point.
    pub seed: u64,
}

impl Default for NceOptions {
    fn default() -> Self {
        NceOptions { tol: 1e-9, max_rounds: 10_000, seed: 0 }
    }
}

impl NceOptions {
    pub fn with_tol(tol: f64) -> Self {
        NceOptions { tol, ..Default::default() }
    }

    pub fn with_seed(seed: u64) -> Self {
        NceOptions { seed, ..Default::default() }
    }

    fn br_tol(&self) -> f64 {
        (self.tol / 10.0).max(1e-15)
    }
}

/// One controller's realized cost, broken down by population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerCostReport {
    pub controller: String,
    pub cost: f64,
    pub per_population: Vec<PopulationCost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationCost {
    pub population: String,
    pub cost: f64,
}

/// First-order certificate of one best response, per route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktEntry {
    pub controller: String,
    pub population: String,
    pub path: usize,
    /// Multiplier estimate on the route's nonnegativity constraint.
    pub multiplier: f64,
    /// Self-marginal cost excess of a used route over the block minimum.
    pub stationarity: f64,
    /// multiplier * flow; vanishes at an exact best response.
    pub complementary_slackness: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    pub entries: Vec<KktEntry>,
}

impl KktResidual {
    pub fn max_stationarity(&self) -> f64 {
        self.entries.iter().map(|e| e.stationarity).fold(0.0, f64::max)
    }

    pub fn max_complementary_slackness(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.complementary_slackness)
            .fold(0.0, f64::max)
    }
}

/// One controller's optimal routing against fixed opponent loads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestResponse {
    pub flows: Vec<ControllerPopulationFlow>,
    /// The controller's cost at its response, under the joint loads.
    pub cost: f64,
    pub kkt: KktResidual,
    pub iterations: usize,
}

/// Nash equilibrium of the control game, with the route-choice potential
/// recorded after every best-response step for offline descent replay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NceResult {
    pub flows: FlowProfile,
    pub controller_costs: Vec<ControllerCostReport>,
    pub social_cost: f64,
    pub rounds: usize,
    pub potential_trace: Vec<f64>,
    pub converged: bool,
}

/// Cost incurred by controller `r` under a feasible joint profile: its path
/// flows priced at the joint edge loads.
pub fn controller_cost(
    instance: &GameInstance,
    flows: &FlowProfile,
    r: &str,
) -> Result<ControllerCostReport, SolveError> {
    let ctl = instance
        .assignment
        .controller(r)
        .ok_or_else(|| SolveError::UnknownController(r.to_string()))?;
    let loads: Vec<f64> = instance
        .network
        .edges
        .iter()
        .map(|e| flows.load_of(&e.id))
        .collect();
    let mut per_population = Vec::new();
    let mut total = 0.0;
    for (pop_id, _) in ctl.controlled_populations() {
        let pop = instance.population(pop_id).ok_or_else(|| {
            SolveError::InfeasibleFlows(format!("unknown population `{pop_id}`"))
        })?;
        let Some(path_flows) = flows.get(r, pop_id) else {
            return Err(SolveError::InfeasibleFlows(format!(
                "missing flows for controller {r} population {pop_id}"
            )));
        };
        let mut cost = 0.0;
        for (path, &x) in pop.paths.iter().zip(path_flows) {
            if x != 0.0 {
                let path_cost: f64 = path
                    .edges
                    .iter()
                    .map(|id| {
                        let e = instance.network.edge_index(id).expect("validated path");
                        instance.network.edges[e].cost.value(loads[e])
                    })
                    .sum();
                cost += x * path_cost;
            }
        }
        per_population.push(PopulationCost { population: pop_id.clone(), cost });
        total += cost;
    }
    Ok(ControllerCostReport { controller: r.to_string(), cost: total, per_population })
}

/// Joint edge loads minus controller `r`'s own contribution.
pub fn background_loads(
    instance: &GameInstance,
    flows: &FlowProfile,
    r: &str,
) -> Vec<EdgeLoad> {
    let mut loads: Vec<f64> = instance
        .network
        .edges
        .iter()
        .map(|e| flows.load_of(&e.id))
        .collect();
    for entry in flows.flows.iter().filter(|f| f.controller == r) {
        if let Some(pop) = instance.population(&entry.population) {
            for (path, &x) in pop.paths.iter().zip(&entry.path_flows) {
                if x != 0.0 {
                    for id in &path.edges {
                        if let Some(e) = instance.network.edge_index(id) {
                            loads[e] -= x;
                        }
                    }
                }
            }
        }
    }
    instance
        .network
        .edges
        .iter()
        .zip(loads)
        .map(|(e, load)| EdgeLoad { edge: e.id.clone(), load: load.max(0.0) })
        .collect()
}

/// Controller `r`'s exact best response to the fixed loads of everyone
/// else: minimizes sum_e x_e c_e(x_e + g_e) over its own feasible splits,
/// by conditional-gradient steps on the self-marginal prices.
pub fn best_response(
    instance: &GameInstance,
    fixed: &[EdgeLoad],
    r: &str,
    tol: f64,
) -> Result<BestResponse, SolveError> {
    let report = validate(instance);
    if !report.is_valid() {
        return Err(SolveError::InvalidInstance(report));
    }
    let compiled = Compiled::new(instance);
    let background = background_vector(instance, fixed)?;
    let ctl_idx = instance
        .assignment
        .controllers
        .iter()
        .position(|c| c.id == r)
        .ok_or_else(|| SolveError::UnknownController(r.to_string()))?;

    let (blocks, pops) = controller_blocks(instance, &compiled, ctl_idx);
    let init = solver::uniform_init(&blocks);
    solve_best_response(
        instance, &compiled, ctl_idx, &pops, blocks, init, &background, tol, 100_000,
    )
}

#[allow(clippy::too_many_arguments)]
fn solve_best_response(
    instance: &GameInstance,
    compiled: &Compiled,
    ctl_idx: usize,
    pops: &[usize],
    blocks: Vec<Block>,
    init: Vec<Vec<f64>>,
    background: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<BestResponse, SolveError> {
    let ctl = &instance.assignment.controllers[ctl_idx];
    let obj = OwnCostObjective { polys: &compiled.polys, background };
    let mut sol = solver::solve_blocks(
        compiled.n_edges,
        &compiled.paths,
        &blocks,
        &obj,
        init,
        tol,
        max_iters,
    );
    if !sol.converged {
        return Err(SolveError::NoConvergence {
            iterations: sol.iterations,
            residual: sol.max_used_excess,
        });
    }
    solver::truncate_flows(&mut sol.flows);
    let own_loads =
        solver::compute_loads(compiled.n_edges, &compiled.paths, &blocks, &sol.flows);

    let mut flows = Vec::new();
    let mut kkt = KktResidual::default();
    let mut cost = 0.0;
    for ((&pop_idx, block), block_flows) in pops.iter().zip(&blocks).zip(&sol.flows) {
        let pop = &instance.populations[pop_idx];
        // Self-marginal prices certify the response; the realized cost uses
        // the plain edge costs at the joint loads.
        let marginal: Vec<f64> = block
            .paths
            .iter()
            .map(|&p| {
                compiled.paths[p]
                    .iter()
                    .map(|&e| obj.price(e, own_loads[e]))
                    .sum()
            })
            .collect();
        let mu = marginal.iter().copied().fold(f64::INFINITY, f64::min);
        for (s, (&m, &x)) in marginal.iter().zip(block_flows).enumerate() {
            let multiplier = (m - mu).max(0.0);
            kkt.entries.push(KktEntry {
                controller: ctl.id.clone(),
                population: pop.id.clone(),
                path: s,
                multiplier,
                stationarity: if x > FLOW_EPS { m - mu } else { 0.0 },
                complementary_slackness: multiplier * x,
            });
        }
        for (&p, &x) in block.paths.iter().zip(block_flows) {
            if x != 0.0 {
                let path_cost: f64 = compiled.paths[p]
                    .iter()
                    .map(|&e| compiled.polys[e].value(own_loads[e] + background[e]))
                    .sum();
                cost += x * path_cost;
            }
        }
        flows.push(ControllerPopulationFlow {
            controller: ctl.id.clone(),
            population: pop.id.clone(),
            path_flows: block_flows.clone(),
        });
    }

    Ok(BestResponse { flows, cost, kkt, iterations: sol.iterations })
}

/// Sequential round-robin best responses from a seeded feasible start,
/// until no controller improves its cost by `tol` within a full round.
pub fn solve_nce(instance: &GameInstance, opts: &NceOptions) -> Result<NceResult, SolveError> {
    solve_nce_from(instance, opts, None)
}

/// [`solve_nce`] warm-started from a previous profile; per-block flows are
/// rescaled to the instance's controlled demands.
pub fn solve_nce_from(
    instance: &GameInstance,
    opts: &NceOptions,
    warm: Option<&FlowProfile>,
) -> Result<NceResult, SolveError> {
    let report = validate(instance);
    if !report.is_valid() {
        return Err(SolveError::InvalidInstance(report));
    }
    let compiled = Compiled::new(instance);
    let n_controllers = instance.assignment.controllers.len();

    let mut all_blocks: Vec<Vec<Block>> = Vec::with_capacity(n_controllers);
    let mut all_pops: Vec<Vec<usize>> = Vec::with_capacity(n_controllers);
    for ctl_idx in 0..n_controllers {
        let (blocks, pops) = controller_blocks(instance, &compiled, ctl_idx);
        all_blocks.push(blocks);
        all_pops.push(pops);
    }
    let mut state: Vec<Vec<Vec<f64>>> = (0..n_controllers)
        .map(|ctl_idx| match warm {
            Some(profile) => {
                warm_init(instance, &all_blocks[ctl_idx], &all_pops[ctl_idx], ctl_idx, profile)
            }
            None => solver::seeded_init(&all_blocks[ctl_idx], mixed_seed(opts.seed, ctl_idx)),
        })
        .collect();

    let joint_loads = |state: &[Vec<Vec<f64>>]| -> Vec<f64> {
        let mut loads = vec![0.0; compiled.n_edges];
        for (blocks, flows) in all_blocks.iter().zip(state) {
            for (block, block_flows) in blocks.iter().zip(flows) {
                for (&p, &x) in block.paths.iter().zip(block_flows) {
                    if x != 0.0 {
                        for &e in &compiled.paths[p] {
                            loads[e] += x;
                        }
                    }
                }
            }
        }
        loads
    };
    let own_cost = |state: &[Vec<Vec<f64>>], ctl_idx: usize, loads: &[f64]| -> f64 {
        let mut cost = 0.0;
        for (block, block_flows) in all_blocks[ctl_idx].iter().zip(&state[ctl_idx]) {
            for (&p, &x) in block.paths.iter().zip(block_flows) {
                if x != 0.0 {
                    let path_cost: f64 = compiled.paths[p]
                        .iter()
                        .map(|&e| compiled.polys[e].value(loads[e]))
                        .sum();
                    cost += x * path_cost;
                }
            }
        }
        cost
    };
    let potential = |loads: &[f64]| -> f64 {
        compiled
            .polys
            .iter()
            .zip(loads)
            .map(|(poly, &f)| poly.integral(f))
            .sum()
    };

    let mut loads = joint_loads(&state);
    let mut potential_trace = vec![potential(&loads)];
    let mut rounds = 0;
    let mut converged = false;

    while rounds < opts.max_rounds {
        rounds += 1;
        let mut round_improvement: f64 = 0.0;
        for ctl_idx in 0..n_controllers {
            let before = own_cost(&state, ctl_idx, &loads);
            let mut background = loads.clone();
            for (block, block_flows) in all_blocks[ctl_idx].iter().zip(&state[ctl_idx]) {
                for (&p, &x) in block.paths.iter().zip(block_flows) {
                    if x != 0.0 {
                        for &e in &compiled.paths[p] {
                            background[e] -= x;
                        }
                    }
                }
            }
            for g in background.iter_mut() {
                *g = g.max(0.0);
            }
            let response = solve_best_response(
                instance,
                &compiled,
                ctl_idx,
                &all_pops[ctl_idx],
                all_blocks[ctl_idx].clone(),
                state[ctl_idx].clone(),
                &background,
                opts.br_tol(),
                100_000,
            )?;
            state[ctl_idx] = response
                .flows
                .iter()
                .map(|entry| entry.path_flows.clone())
                .collect();
            loads = joint_loads(&state);
            let after = own_cost(&state, ctl_idx, &loads);
            round_improvement = round_improvement.max(before - after);
            potential_trace.push(potential(&loads));
        }
        if round_improvement < opts.tol {
            converged = true;
            break;
        }
    }

    let mut entries = Vec::new();
    for (ctl_idx, ctl) in instance.assignment.controllers.iter().enumerate() {
        for (&pop_idx, block_flows) in all_pops[ctl_idx].iter().zip(&state[ctl_idx]) {
            entries.push(ControllerPopulationFlow {
                controller: ctl.id.clone(),
                population: instance.populations[pop_idx].id.clone(),
                path_flows: block_flows.clone(),
            });
        }
    }
    let flows = FlowProfile::from_entries(instance, entries);
    let controller_costs = instance
        .assignment
        .controllers
        .iter()
        .map(|c| controller_cost(instance, &flows, &c.id))
        .collect::<Result<Vec<_>, _>>()?;
    let social_cost = crate::equilibrium::social_cost(instance, &flows)?;

    Ok(NceResult { flows, controller_costs, social_cost, rounds, potential_trace, converged })
}

/// True iff no step of the trace increases the potential by 1e-9 or more.
pub fn verify_potential_descent(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] <= w[0] + 1e-9)
}

fn mixed_seed(seed: u64, ctl_idx: usize) -> u64 {
    if seed == 0 {
        0
    } else {
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(ctl_idx as u64 + 1)
    }
}

fn background_vector(
    instance: &GameInstance,
    fixed: &[EdgeLoad],
) -> Result<Vec<f64>, SolveError> {
    let mut background = vec![0.0; instance.network.edges.len()];
    for entry in fixed {
        let Some(idx) = instance.network.edge_index(&entry.edge) else {
            return Err(SolveError::InfeasibleFlows(format!(
                "unknown edge `{}` in fixed loads",
                entry.edge
            )));
        };
        if entry.load < 0.0 || !entry.load.is_finite() {
            return Err(SolveError::InfeasibleFlows(format!(
                "fixed load on edge `{}` must be finite and >= 0, got {}",
                entry.edge, entry.load
            )));
        }
        background[idx] = entry.load;
    }
    Ok(background)
}

fn controller_blocks(
    instance: &GameInstance,
    compiled: &Compiled,
    ctl_idx: usize,
) -> (Vec<Block>, Vec<usize>) {
    let ctl = &instance.assignment.controllers[ctl_idx];
    let mut blocks = Vec::new();
    let mut pops = Vec::new();
    for (pop_idx, pop) in instance.populations.iter().enumerate() {
        let share = ctl.share(&pop.id);
        if share > 0.0 {
            let offset = compiled.pop_offset[pop_idx];
            blocks.push(Block {
                demand: share,
                paths: (offset..offset + pop.paths.len()).collect(),
            });
            pops.push(pop_idx);
        }
    }
    (blocks, pops)
}

fn warm_init(
    instance: &GameInstance,
    blocks: &[Block],
    pops: &[usize],
    ctl_idx: usize,
    profile: &FlowProfile,
) -> Vec<Vec<f64>> {
    let ctl = &instance.assignment.controllers[ctl_idx];
    blocks
        .iter()
        .zip(pops)
        .map(|(block, &pop_idx)| {
            let pop = &instance.populations[pop_idx];
            match profile.get(&ctl.id, &pop.id) {
                Some(prev) if prev.len() == block.paths.len() => {
                    let total: f64 = prev.iter().sum();
                    if total > 0.0 {
                        prev.iter().map(|&x| x / total * block.demand).collect()
                    } else {
                        vec![block.demand / block.paths.len() as f64; block.paths.len()]
                    }
                }
                _ => vec![block.demand / block.paths.len() as f64; block.paths.len()],
            }
        })
        .collect()
}
