//! Shared conditional-gradient machinery.
//!
//! Every solver in this crate minimizes a separable convex edge objective
//! over a product of path-flow simplices. The three flavours differ only in
//! the per-edge objective: plain route-choice potential for equilibria, its
//! marginal-cost transform for optima, and an own-cost objective with fixed
//! background load for controller best responses.
//!
//! Steps are pairwise: each block moves mass from its dearest used route to
//! its cheapest route, with an exact 1-D line search (Newton with a
//! bisection safeguard on the convex restriction). Pairwise steps reach
//! corner solutions exactly and avoid the sublinear tail of plain
//! toward-the-vertex iterations.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::game::{CostPolynomial, GameInstance, FLOW_EPS};

/// Per-edge separable objective. `x` is the load the optimizer controls on
/// that edge; any fixed background load is the implementor's business.
pub(crate) trait EdgeObjective {
    /// Objective contribution of the edge at controlled load `x`.
    fn value(&self, e: usize, x: f64) -> f64;
    /// First derivative in `x`: the price used to rank routes.
    fn price(&self, e: usize, x: f64) -> f64;
    /// Second derivative in `x`; nonnegative for valid cost polynomials.
    fn price_slope(&self, e: usize, x: f64) -> f64;
}

/// Route-choice potential: value = integral of the edge cost, price = cost.
/// Minimizing it yields an equilibrium of the given polynomials; feed it
/// marginal polynomials to get a minimum-total-cost flow instead.
pub(crate) struct PotentialObjective<'a> {
    pub polys: &'a [CostPolynomial],
}

impl EdgeObjective for PotentialObjective<'_> {
    fn value(&self, e: usize, x: f64) -> f64 {
        self.polys[e].integral(x)
    }
    fn price(&self, e: usize, x: f64) -> f64 {
        self.polys[e].value(x)
    }
    fn price_slope(&self, e: usize, x: f64) -> f64 {
        self.polys[e].slope(x)
    }
}

/// A single controller's own total cost x * c(x + g) with the other
/// controllers' load g held fixed. Its price is the self-marginal cost
/// c(x + g) + x c'(x + g).
pub(crate) struct OwnCostObjective<'a> {
    pub polys: &'a [CostPolynomial],
    pub background: &'a [f64],
}

impl EdgeObjective for OwnCostObjective<'_> {
    fn value(&self, e: usize, x: f64) -> f64 {
        x * self.polys[e].value(x + self.background[e])
    }
    fn price(&self, e: usize, x: f64) -> f64 {
        let f = x + self.background[e];
        self.polys[e].value(f) + x * self.polys[e].slope(f)
    }
    fn price_slope(&self, e: usize, x: f64) -> f64 {
        let f = x + self.background[e];
        2.0 * self.polys[e].slope(f) + x * self.polys[e].curvature(f)
    }
}

/// One scaled simplex: `demand` units spread over `paths` (path-table indices).
#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub demand: f64,
    pub paths: Vec<usize>,
}

/// Solver outcome in index space.
#[derive(Debug, Clone)]
pub(crate) struct FwSolution {
    /// Per block, aligned with `Block::paths`.
    pub flows: Vec<Vec<f64>>,
    /// Controlled load per edge.
    pub loads: Vec<f64>,
    pub iterations: usize,
    pub relative_gap: f64,
    /// Largest price excess of a used route over its block's cheapest route.
    pub max_used_excess: f64,
    pub converged: bool,
}

/// Indexed view of a validated instance.
pub(crate) struct Compiled {
    /// Edge cost polynomials by edge index.
    pub polys: Vec<CostPolynomial>,
    /// All population paths as edge-index lists; populations occupy
    /// contiguous ranges of this table.
    pub paths: Vec<Vec<usize>>,
    /// Path-table offset of each population.
    pub pop_offset: Vec<usize>,
    pub n_edges: usize,
}

impl Compiled {
    pub fn new(instance: &GameInstance) -> Self {
        let edge_index: BTreeMap<&str, usize> = instance
            .network
            .edges
            .iter()
            .enumerate()
            .map(|(k, e)| (e.id.as_str(), k))
            .collect();
        let mut paths = Vec::new();
        let mut pop_offset = Vec::with_capacity(instance.populations.len());
        for pop in &instance.populations {
            pop_offset.push(paths.len());
            for path in &pop.paths {
                paths.push(path.edges.iter().map(|id| edge_index[id.as_str()]).collect());
            }
        }
        Compiled {
            polys: instance.network.edges.iter().map(|e| e.cost.clone()).collect(),
            paths,
            pop_offset,
            n_edges: instance.network.edges.len(),
        }
    }

    /// Global path-table indices of one population's paths.
    pub fn pop_paths(&self, instance: &GameInstance, pop_idx: usize) -> Vec<usize> {
        let start = self.pop_offset[pop_idx];
        (start..start + instance.populations[pop_idx].paths.len()).collect()
    }
}

/// Demand split uniformly over each block's paths.
pub(crate) fn uniform_init(blocks: &[Block]) -> Vec<Vec<f64>> {
    blocks
        .iter()
        .map(|b| vec![b.demand / b.paths.len() as f64; b.paths.len()])
        .collect()
}

/// Seeded random interior point of each block's simplex; seed 0 falls back
/// to the uniform split so that default runs are deterministic without RNG.
pub(crate) fn seeded_init(blocks: &[Block], seed: u64) -> Vec<Vec<f64>> {
    if seed == 0 {
        return uniform_init(blocks);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    blocks
        .iter()
        .map(|b| {
            let raw: Vec<f64> = (0..b.paths.len())
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|v| v / total * b.demand).collect()
        })
        .collect()
}

pub(crate) fn compute_loads(
    n_edges: usize,
    paths: &[Vec<usize>],
    blocks: &[Block],
    flows: &[Vec<f64>],
) -> Vec<f64> {
    let mut loads = vec![0.0; n_edges];
    for (block, block_flows) in blocks.iter().zip(flows) {
        for (&path, &x) in block.paths.iter().zip(block_flows) {
            if x != 0.0 {
                for &e in &paths[path] {
                    loads[e] += x;
                }
            }
        }
    }
    loads
}

fn path_price(path: &[usize], loads: &[f64], obj: &dyn EdgeObjective) -> f64 {
    path.iter().map(|&e| obj.price(e, loads[e])).sum()
}

/// Minimizes the separable objective over the product of block simplices.
/// Convergence requires both the relative duality gap and the used-route
/// price excess to fall below `tol`.
pub(crate) fn solve_blocks(
    n_edges: usize,
    paths: &[Vec<usize>],
    blocks: &[Block],
    obj: &dyn EdgeObjective,
    init: Vec<Vec<f64>>,
    tol: f64,
    max_iters: usize,
) -> FwSolution {
    let mut flows = init;
    let mut loads = compute_loads(n_edges, paths, blocks, &flows);
    let mut iterations = 0;
    let mut relative_gap = f64::INFINITY;
    let mut max_used_excess = f64::INFINITY;
    let mut converged = false;

    while iterations <= max_iters {
        // Refresh loads from scratch each sweep to keep incremental drift
        // out of the reported profile.
        loads = compute_loads(n_edges, paths, blocks, &flows);

        let mut gap = 0.0;
        let mut scale = 0.0;
        let mut excess: f64 = 0.0;
        for (block, block_flows) in blocks.iter().zip(&flows) {
            let costs: Vec<f64> = block
                .paths
                .iter()
                .map(|&p| path_price(&paths[p], &loads, obj))
                .collect();
            let min_cost = costs.iter().copied().fold(f64::INFINITY, f64::min);
            for (&x, &cost) in block_flows.iter().zip(&costs) {
                gap += x * (cost - min_cost);
                scale += x * cost;
                if x > FLOW_EPS {
                    excess = excess.max(cost - min_cost);
                }
            }
        }
        relative_gap = if scale > 0.0 { gap / scale } else { 0.0 };
        max_used_excess = excess;
        if relative_gap <= tol && max_used_excess <= tol {
            converged = true;
            break;
        }
        if iterations == max_iters {
            break;
        }
        iterations += 1;

        for (block, block_flows) in blocks.iter().zip(flows.iter_mut()) {
            pairwise_step(block, block_flows, paths, &mut loads, obj);
        }
    }

    FwSolution { flows, loads, iterations, relative_gap, max_used_excess, converged }
}

/// Moves mass within one block from its dearest used route to its cheapest
/// route, stopping at the exact 1-D minimizer. Ties go to the lowest index.
fn pairwise_step(
    block: &Block,
    block_flows: &mut [f64],
    paths: &[Vec<usize>],
    loads: &mut [f64],
    obj: &dyn EdgeObjective,
) {
    if block.paths.len() < 2 {
        return;
    }
    let costs: Vec<f64> = block
        .paths
        .iter()
        .map(|&p| path_price(&paths[p], loads, obj))
        .collect();

    let mut to = 0;
    for (s, &c) in costs.iter().enumerate() {
        if c < costs[to] {
            to = s;
        }
    }
    let mut from = None;
    for (s, &c) in costs.iter().enumerate() {
        if block_flows[s] > 0.0 && from.map_or(true, |f| c > costs[f]) {
            from = Some(s);
        }
    }
    let Some(from) = from else { return };
    if from == to || costs[from] - costs[to] <= 0.0 {
        return;
    }

    // Net load change per unit shifted; edges shared by both routes cancel.
    let mut delta: BTreeMap<usize, f64> = BTreeMap::new();
    for &e in &paths[block.paths[from]] {
        *delta.entry(e).or_insert(0.0) -= 1.0;
    }
    for &e in &paths[block.paths[to]] {
        *delta.entry(e).or_insert(0.0) += 1.0;
    }
    delta.retain(|_, d| *d != 0.0);

    let t_max = block_flows[from];
    let t = line_search(&delta, loads, obj, t_max);
    if t <= 0.0 {
        return;
    }
    block_flows[from] -= t;
    block_flows[to] += t;
    if t == t_max {
        block_flows[from] = 0.0;
    }
    for (&e, &d) in &delta {
        loads[e] += d * t;
    }
}

/// Exact minimizer of the convex restriction t -> objective(loads + t*delta)
/// on [0, t_max], via safeguarded Newton on its increasing derivative.
fn line_search(
    delta: &BTreeMap<usize, f64>,
    loads: &[f64],
    obj: &dyn EdgeObjective,
    t_max: f64,
) -> f64 {
    let slope = |t: f64| -> f64 {
        delta
            .iter()
            .map(|(&e, &d)| d * obj.price(e, loads[e] + d * t))
            .sum()
    };
    let slope2 = |t: f64| -> f64 {
        delta
            .iter()
            .map(|(&e, &d)| d * d * obj.price_slope(e, loads[e] + d * t))
            .sum()
    };

    let d0 = slope(0.0);
    if d0 >= 0.0 {
        return 0.0;
    }
    if slope(t_max) <= 0.0 {
        return t_max;
    }

    let (mut lo, mut hi) = (0.0, t_max);
    let mut t = 0.5 * t_max;
    for _ in 0..100 {
        let d = slope(t);
        if d < 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        if d.abs() <= 1e-16 * (1.0 + d0.abs()) || hi - lo <= f64::EPSILON * t_max {
            break;
        }
        let curvature = slope2(t);
        let newton = if curvature > 0.0 { t - d / curvature } else { f64::NAN };
        t = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    t
}

/// Zeroes sub-threshold entries and returns the lost mass to the largest
/// entry, so reported profiles stay exactly feasible.
pub(crate) fn truncate_flows(flows: &mut [Vec<f64>]) {
    for block_flows in flows.iter_mut() {
        let mut lost = 0.0;
        for x in block_flows.iter_mut() {
            if *x != 0.0 && x.abs() < FLOW_EPS {
                lost += *x;
                *x = 0.0;
            }
        }
        if lost != 0.0 {
            if let Some(max) = block_flows
                .iter_mut()
                .max_by(|a, b| a.partial_cmp(b).unwrap())
            {
                *max += lost;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pigou_setup() -> (Vec<CostPolynomial>, Vec<Vec<usize>>, Vec<Block>) {
        // Edge 0: constant 1. Edge 1: cost f.
        let polys = vec![
            CostPolynomial::constant(1.0),
            CostPolynomial::new(vec![0.0, 1.0]),
        ];
        let paths = vec![vec![0], vec![1]];
        let blocks = vec![Block { demand: 1.0, paths: vec![0, 1] }];
        (polys, paths, blocks)
    }

    #[test]
    fn pigou_potential_minimum_is_all_on_the_variable_edge() {
        let (polys, paths, blocks) = pigou_setup();
        let obj = PotentialObjective { polys: &polys };
        let sol = solve_blocks(2, &paths, &blocks, &obj, uniform_init(&blocks), 1e-10, 1000);
        assert!(sol.converged);
        assert!((sol.flows[0][1] - 1.0).abs() < 1e-10);
        assert!(sol.flows[0][0].abs() < 1e-10);
    }

    #[test]
    fn pigou_marginal_potential_minimum_splits_evenly() {
        let (polys, paths, blocks) = pigou_setup();
        let marginal: Vec<_> = polys.iter().map(|p| p.marginal()).collect();
        let obj = PotentialObjective { polys: &marginal };
        let sol = solve_blocks(2, &paths, &blocks, &obj, uniform_init(&blocks), 1e-10, 1000);
        assert!(sol.converged);
        assert!((sol.flows[0][1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn own_cost_interior_stationary_point() {
        // One controller with demand 1/2 against background 1/3 on the
        // variable edge: minimum of x(x + 1/3) + (1/2 - x) sits at x = 1/3.
        let (polys, paths, blocks) = pigou_setup();
        let blocks = vec![Block { demand: 0.5, ..blocks[0].clone() }];
        let background = vec![0.0, 1.0 / 3.0];
        let obj = OwnCostObjective { polys: &polys, background: &background };
        let sol = solve_blocks(2, &paths, &blocks, &obj, uniform_init(&blocks), 1e-12, 1000);
        assert!(sol.converged);
        assert!((sol.flows[0][1] - 1.0 / 3.0).abs() < 1e-10, "{:?}", sol.flows);
    }

    #[test]
    fn seeded_init_is_feasible_and_reproducible() {
        let blocks = vec![
            Block { demand: 0.7, paths: vec![0, 1, 2] },
            Block { demand: 0.3, paths: vec![3, 4] },
        ];
        let a = seeded_init(&blocks, 7);
        let b = seeded_init(&blocks, 7);
        assert_eq!(a, b);
        for (block, flows) in blocks.iter().zip(&a) {
            let sum: f64 = flows.iter().sum();
            assert!((sum - block.demand).abs() < 1e-12);
            assert!(flows.iter().all(|&x| x > 0.0));
        }
        assert_ne!(seeded_init(&blocks, 8), a);
    }
}
