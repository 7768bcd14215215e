//! Closed-form inefficiency results on the two-route benchmark network and
//! empirical sweeps that cross-check them against the solvers: equilibrium
//! flow and cost expressions parameterized by the cost degree p and the
//! controller count, their ratio (the price of anarchy), its many-controller
//! limit, and the worst-case control threshold.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{solve_nce, NceOptions};
use crate::equilibrium::{solve_so, SolveError, SolveOptions};
use crate::game::GameInstance;

/// Query parameters: cost degree `p` (any real > 0; the closed forms are
/// singular at 0) and the number of operating systems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoaQuery {
    pub p: f64,
    pub controllers: u32,
}

#[derive(Debug, Clone)]
pub enum AnalyticsError {
    NonpositiveDegree(f64),
    NoControllers,
    BadStep(f64),
    UnsupportedTemplate(String),
    Solve(SolveError),
}

impl fmt::Display for AnalyticsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalyticsError::NonpositiveDegree(p) => {
                write!(f, "cost degree must be > 0, got {p}")
            }
            AnalyticsError::NoControllers => write!(f, "need at least one controller"),
            AnalyticsError::BadStep(s) => {
                write!(f, "grid step must lie in (0, 1] and divide 1, got {s}")
            }
            AnalyticsError::UnsupportedTemplate(msg) => write!(f, "{msg}"),
            AnalyticsError::Solve(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for AnalyticsError {}

impl PoaQuery {
    pub fn new(p: f64, controllers: u32) -> Result<Self, AnalyticsError> {
        if !(p > 0.0) || !p.is_finite() {
            return Err(AnalyticsError::NonpositiveDegree(p));
        }
        if controllers < 1 {
            return Err(AnalyticsError::NoControllers);
        }
        Ok(PoaQuery { p, controllers })
    }

    fn r(&self) -> f64 {
        self.controllers as f64
    }
}

/// Per-controller equilibrium flow on the congestible route:
/// (p R^{p-1} + R^p)^{-1/p}.
pub fn pigou_nce_flow(q: &PoaQuery) -> f64 {
    let (p, r) = (q.p, q.r());
    (p * r.powf(p - 1.0) + r.powf(p)).powf(-1.0 / p)
}

/// Social cost of the symmetric equilibrium:
/// R^{p+1} (p R^{p-1} + R^p)^{-1-1/p} + 1 - R (p R^{p-1} + R^p)^{-1/p}.
pub fn pigou_nce_social_cost(q: &PoaQuery) -> f64 {
    let (p, r) = (q.p, q.r());
    let base = p * r.powf(p - 1.0) + r.powf(p);
    r.powf(p + 1.0) * base.powf(-1.0 - 1.0 / p) + 1.0 - r * base.powf(-1.0 / p)
}

/// Optimal social cost: (p+1)^{-1-1/p} + 1 - (p+1)^{-1/p}.
pub fn pigou_so_social_cost(p: f64) -> Result<f64, AnalyticsError> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(AnalyticsError::NonpositiveDegree(p));
    }
    Ok((p + 1.0).powf(-1.0 - 1.0 / p) + 1.0 - (p + 1.0).powf(-1.0 / p))
}

/// Worst-case price of anarchy with `controllers` operating systems and
/// polynomial costs of degree at most `p`: the equilibrium/optimum ratio.
pub fn poa_closed_form(q: &PoaQuery) -> f64 {
    pigou_nce_social_cost(q) / pigou_so_social_cost(q.p).expect("validated query")
}

/// The same ratio in its expanded algebraic form; kept as an independent
/// evaluation route for cross-checks.
pub fn poa_closed_form_expanded(q: &PoaQuery) -> f64 {
    let (p, r) = (q.p, q.r());
    let base = r.powf(p - 1.0) * (p + r);
    let numerator = 1.0 - r * base.powf(-1.0 / p) + r.powf(p + 1.0) * base.powf(-(p + 1.0) / p);
    let denominator = 1.0 - (p + 1.0).powf(-1.0 / p) + (p + 1.0).powf(-(p + 1.0) / p);
    numerator / denominator
}

/// Limit of the price of anarchy as the number of controllers grows:
/// (p+1)^{1/p+1} / ((p+1)^{1/p+1} - p).
pub fn poa_limit(p: f64) -> Result<f64, AnalyticsError> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(AnalyticsError::NonpositiveDegree(p));
    }
    let t = (p + 1.0).powf(1.0 / p + 1.0);
    Ok(t / (t - p))
}

/// Control share above which a controller stops routing purely selfishly:
/// (p R^{p-1} + R^p)^{-1/p}, the same expression as the equilibrium flow.
pub fn worst_case_threshold(q: &PoaQuery) -> f64 {
    pigou_nce_flow(q)
}

/// One cell of [`threshold_inequality_scan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCheck {
    pub p: f64,
    pub controllers: u32,
    pub threshold: f64,
    pub uniform_share: f64,
    /// Whether threshold >= 1/R holds at this cell.
    pub exceeds_uniform: bool,
}

/// Checks the direction of the threshold-versus-uniform-share inequality on
/// a (p, R) grid instead of assuming it. On the scanned range the threshold
/// in fact sits at or below 1/R, approaching it from below as R grows.
pub fn threshold_inequality_scan(ps: &[f64], controllers: &[u32]) -> Vec<ThresholdCheck> {
    let mut out = Vec::new();
    for &p in ps {
        for &r in controllers {
            let Ok(q) = PoaQuery::new(p, r) else { continue };
            let threshold = worst_case_threshold(&q);
            let uniform_share = 1.0 / q.r();
            out.push(ThresholdCheck {
                p,
                controllers: r,
                threshold,
                uniform_share,
                exceeds_uniform: threshold >= uniform_share,
            });
        }
    }
    out
}

/// Ratio of the worst equilibrium social cost (max over solver seeds) to
/// the optimal social cost, both computed by the solvers.
pub fn empirical_poa(instance: &GameInstance, tol: f64) -> Result<f64, AnalyticsError> {
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..4 {
        let opts = NceOptions { tol, seed, ..Default::default() };
        let result = solve_nce(instance, &opts).map_err(AnalyticsError::Solve)?;
        if !result.converged {
            return Err(AnalyticsError::Solve(SolveError::NoConvergence {
                iterations: result.rounds,
                residual: tol,
            }));
        }
        worst = worst.max(result.social_cost);
    }
    let so_opts = SolveOptions { tol: tol.min(1e-10), ..Default::default() };
    let optimum = solve_so(instance, &so_opts).map_err(AnalyticsError::Solve)?;
    Ok(worst / optimum.social_cost)
}

/// Axis of a sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// One coordinate per axis; the last controller share is implied.
    pub coords: Vec<f64>,
    pub social_cost: f64,
}

/// Social costs of the control-game equilibrium over a grid of feasible
/// control assignments, in lexicographic grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub axes: Vec<AxisSpec>,
    pub points: Vec<SweepPoint>,
}

/// Sweeps the control assignment of a single-population unit-demand
/// template over a share grid of the given step, solving the control game
/// at every feasible point. Supports 2 or 3 controllers (one or two free
/// share coordinates). Grid cells are evaluated in parallel and emitted in
/// deterministic lexicographic order.
pub fn social_cost_surface(
    template: &GameInstance,
    controllers: usize,
    step: f64,
) -> Result<SweepGrid, AnalyticsError> {
    if !(step > 0.0) || step > 1.0 {
        return Err(AnalyticsError::BadStep(step));
    }
    let n = (1.0 / step).round() as usize;
    if n == 0 || (n as f64 * step - 1.0).abs() > 1e-9 {
        return Err(AnalyticsError::BadStep(step));
    }
    if template.populations.len() != 1 {
        return Err(AnalyticsError::UnsupportedTemplate(
            "surface sweeps need a single-population template".into(),
        ));
    }
    if (template.populations[0].demand - 1.0).abs() > 1e-12 {
        return Err(AnalyticsError::UnsupportedTemplate(format!(
            "surface sweeps need unit total demand, got {}",
            template.populations[0].demand
        )));
    }
    if !(2..=3).contains(&controllers) {
        return Err(AnalyticsError::UnsupportedTemplate(format!(
            "surface sweeps support 2 or 3 controllers, got {controllers}"
        )));
    }

    let mut shares_list: Vec<Vec<f64>> = Vec::new();
    if controllers == 2 {
        for i in 0..=n {
            let d1 = i as f64 * step;
            shares_list.push(vec![d1, (1.0 - d1).max(0.0)]);
        }
    } else {
        for i in 0..=n {
            for j in 0..=(n - i) {
                let d1 = i as f64 * step;
                let d2 = j as f64 * step;
                shares_list.push(vec![d1, d2, (1.0 - d1 - d2).max(0.0)]);
            }
        }
    }

    let points = shares_list
        .par_iter()
        .map(|shares| {
            let instance = with_shares(template, shares);
            let result = solve_nce(&instance, &NceOptions::with_tol(1e-12))
                .map_err(AnalyticsError::Solve)?;
            Ok(SweepPoint {
                coords: shares[..controllers - 1].to_vec(),
                social_cost: result.social_cost,
            })
        })
        .collect::<Result<Vec<_>, AnalyticsError>>()?;

    let axes = (0..controllers - 1)
        .map(|k| AxisSpec { name: format!("d{}", k + 1), min: 0.0, max: 1.0, step })
        .collect();
    Ok(SweepGrid { axes, points })
}

/// Rebuilds the template with the single population's demand split over
/// `shares.len()` controllers named r1, r2, ...
pub fn with_shares(template: &GameInstance, shares: &[f64]) -> GameInstance {
    use crate::game::{ControlAssignment, Controller};
    let pop_id = template.populations[0].id.clone();
    let mut instance = template.clone();
    instance.assignment = ControlAssignment {
        controllers: shares
            .iter()
            .enumerate()
            .map(|(k, &share)| Controller {
                id: format!("r{}", k + 1),
                shares: std::collections::BTreeMap::from([(pop_id.clone(), share)]),
            })
            .collect(),
    };
    instance
}

/// Numeric equilibrium of the two-route benchmark for arbitrary real degree
/// p > 0 (file-based instances only carry integer degrees): round-robin
/// stationarity solves of x (x + g)^p + (d - x) over x in [0, d].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PigouEquilibrium {
    /// Per-controller flow on the congestible route.
    pub bottom_flows: Vec<f64>,
    pub social_cost: f64,
    pub rounds: usize,
    pub converged: bool,
}

pub fn pigou_nce_numeric(
    p: f64,
    shares: &[f64],
    tol: f64,
    max_rounds: usize,
) -> Result<PigouEquilibrium, AnalyticsError> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(AnalyticsError::NonpositiveDegree(p));
    }
    if shares.is_empty() {
        return Err(AnalyticsError::NoControllers);
    }
    let mut x: Vec<f64> = shares.iter().map(|d| d / 2.0).collect();
    let mut rounds = 0;
    let mut converged = false;
    while rounds < max_rounds {
        rounds += 1;
        let mut movement: f64 = 0.0;
        for k in 0..x.len() {
            let g: f64 = x.iter().sum::<f64>() - x[k];
            let new = pigou_best_response(p, g, shares[k]);
            movement = movement.max((new - x[k]).abs());
            x[k] = new;
        }
        if movement < tol {
            converged = true;
            break;
        }
    }
    let f: f64 = x.iter().sum();
    Ok(PigouEquilibrium {
        bottom_flows: x,
        social_cost: f.powf(p + 1.0) + 1.0 - f,
        rounds,
        converged,
    })
}

/// Stationary point of x (x + g)^p + (d - x) on [0, d], clipped to the box.
fn pigou_best_response(p: f64, g: f64, d: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    if g == 0.0 {
        // (1 + p) x^p = 1 exactly.
        return ((1.0 + p).powf(-1.0 / p)).min(d);
    }
    let h = |x: f64| (x + g).powf(p) + p * x * (x + g).powf(p - 1.0) - 1.0;
    if h(0.0) >= 0.0 {
        return 0.0;
    }
    if h(d) <= 0.0 {
        return d;
    }
    let (mut lo, mut hi) = (0.0, d);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * d {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{social_cost, ControllerPopulationFlow, FlowProfile};
    use crate::instances;

    fn q(p: f64, r: u32) -> PoaQuery {
        PoaQuery::new(p, r).unwrap()
    }

    #[test]
    fn equilibrium_flow_examples() {
        assert!((pigou_nce_flow(&q(1.0, 2)) - 1.0 / 3.0).abs() < 1e-15);
        assert!((pigou_nce_flow(&q(1.0, 3)) - 0.25).abs() < 1e-15);
        assert!((pigou_nce_flow(&q(2.0, 2)) - 8.0f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn equilibrium_social_cost_examples() {
        assert!((pigou_nce_social_cost(&q(1.0, 2)) - 7.0 / 9.0).abs() < 1e-15);
        assert!((pigou_nce_social_cost(&q(1.0, 1)) - 0.75).abs() < 1e-15);
        assert!((pigou_nce_social_cost(&q(1.0, 1_000_000)) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn optimal_social_cost_examples() {
        assert!((pigou_so_social_cost(1.0).unwrap() - 0.75).abs() < 1e-15);
        let expected = 3.0f64.powf(-1.5) + 1.0 - 3.0f64.powf(-0.5);
        assert!((pigou_so_social_cost(2.0).unwrap() - expected).abs() < 1e-15);
        assert!(pigou_so_social_cost(0.0).is_err());
        assert!(pigou_so_social_cost(-1.0).is_err());

        // Decreasing in p on the scanned range.
        let mut previous = f64::INFINITY;
        for k in 1..=80 {
            let value = pigou_so_social_cost(k as f64 / 10.0).unwrap();
            assert!(value < previous);
            previous = value;
        }
    }

    #[test]
    fn poa_examples() {
        assert_eq!(poa_closed_form(&q(1.0, 1)), 1.0);
        assert!((poa_closed_form(&q(1.0, 2)) - 28.0 / 27.0).abs() < 1e-12);
        assert!((poa_closed_form(&q(1.0, 3)) - 13.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn both_algebraic_routes_agree() {
        for p in [0.5, 1.0, 2.0, 2.5, 3.0, 4.0] {
            for r in [1, 2, 3, 4, 5, 6, 100] {
                let query = q(p, r);
                let a = poa_closed_form(&query);
                let b = poa_closed_form_expanded(&query);
                assert!((a - b).abs() < 1e-12, "p={p} R={r}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn poa_limit_examples() {
        assert!((poa_limit(1.0).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        let p2 = 3.0 * 3.0f64.sqrt() / (3.0 * 3.0f64.sqrt() - 2.0);
        assert!((poa_limit(2.0).unwrap() - p2).abs() < 1e-12);
        assert!(poa_limit(0.0).is_err());
    }

    #[test]
    fn poa_approaches_its_limit() {
        for p in [1.0, 2.0, 3.0] {
            let closed = poa_closed_form(&q(p, 1_000_000));
            let limit = poa_limit(p).unwrap();
            assert!((closed - limit).abs() <= 1e-4, "p={p}: {closed} vs {limit}");
        }
    }

    #[test]
    fn poa_is_nondecreasing_in_controller_count_and_below_the_limit() {
        for p in [1.0, 2.0, 3.0, 4.0] {
            let limit = poa_limit(p).unwrap();
            let mut previous = 0.0;
            for r in 1..=64 {
                let value = poa_closed_form(&q(p, r));
                assert!(value >= previous - 1e-12, "p={p} R={r}");
                assert!(value <= limit + 1e-12, "p={p} R={r}");
                previous = value;
            }
        }
    }

    #[test]
    fn threshold_examples_and_inequality_direction() {
        assert!((worst_case_threshold(&q(1.0, 2)) - 1.0 / 3.0).abs() < 1e-15);
        assert!((worst_case_threshold(&q(1.0, 3)) - 0.25).abs() < 1e-15);
        let t32 = worst_case_threshold(&q(3.0, 2));
        assert!((t32 - 20.0f64.powf(-1.0 / 3.0)).abs() < 1e-15);
        assert!(t32 < 0.5, "threshold sits below the uniform share");

        // The scan finds the inequality holding in the <= direction over
        // the whole range, approaching equality as R grows.
        let ps: Vec<f64> = (1..=16).map(|k| k as f64 / 4.0).collect();
        let rs: Vec<u32> = (1..=6).collect();
        for c in threshold_inequality_scan(&ps, &rs) {
            assert!(!c.exceeds_uniform || (c.threshold - c.uniform_share).abs() < 1e-15, "{c:?}");
            assert!(c.threshold <= c.uniform_share + 1e-15, "{c:?}");
        }
        let tail = &threshold_inequality_scan(&[2.0], &[1000])[0];
        assert!((tail.threshold - tail.uniform_share).abs() < 1e-5);
    }

    #[test]
    fn formula_matches_the_flow_evaluator_exactly() {
        for p in 1..=4usize {
            for r in 1..=4u32 {
                let query = q(p as f64, r);
                let bottom = query.r() * pigou_nce_flow(&query);
                let instance = instances::pigou(p, 1);
                let flows = FlowProfile::from_entries(
                    &instance,
                    vec![ControllerPopulationFlow {
                        controller: "r1".into(),
                        population: "p1".into(),
                        path_flows: vec![1.0 - bottom, bottom],
                    }],
                );
                let evaluated = social_cost(&instance, &flows).unwrap();
                let formula = pigou_nce_social_cost(&query);
                assert!(
                    (evaluated - formula).abs() < 1e-12,
                    "p={p} R={r}: {evaluated} vs {formula}"
                );
            }
        }
    }

    #[test]
    fn empirical_poa_matches_the_closed_form() {
        for (p, r) in [(1usize, 1u32), (1, 2), (2, 3), (3, 2)] {
            let instance = instances::pigou(p, r as usize);
            let empirical = empirical_poa(&instance, 1e-11).unwrap();
            let closed = poa_closed_form(&q(p as f64, r));
            assert!(
                (empirical - closed).abs() <= 1e-5,
                "p={p} R={r}: {empirical} vs {closed}"
            );
        }
        let single = empirical_poa(&instances::pigou(1, 1), 1e-11).unwrap();
        assert!((single - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn braess_poa_respects_the_two_route_bound() {
        let empirical = empirical_poa(&instances::braess(1, 2), 1e-11).unwrap();
        assert!(empirical <= poa_closed_form(&q(1.0, 2)) + 1e-5);
    }

    #[test]
    fn numeric_pigou_equilibrium_tracks_the_closed_form() {
        for p in [0.5, 1.0, 1.7, 2.0, 3.0] {
            for r in [1usize, 2, 3, 5] {
                let shares = vec![1.0 / r as f64; r];
                let numeric = pigou_nce_numeric(p, &shares, 1e-13, 10_000).unwrap();
                assert!(numeric.converged);
                let formula = pigou_nce_social_cost(&q(p, r as u32));
                assert!(
                    (numeric.social_cost - formula).abs() < 1e-9,
                    "p={p} R={r}: {} vs {formula}",
                    numeric.social_cost
                );
            }
        }
    }

    #[test]
    fn surface_examples() {
        let template = instances::pigou(1, 2);
        let grid = social_cost_surface(&template, 2, 0.05).unwrap();
        assert_eq!(grid.points.len(), 21);

        let at = |d1: f64| -> f64 {
            grid.points
                .iter()
                .find(|pt| (pt.coords[0] - d1).abs() < 1e-12)
                .unwrap()
                .social_cost
        };
        assert!((at(1.0) - 0.75).abs() < 1e-6);
        assert!((at(0.0) - 0.75).abs() < 1e-6);
        assert!((at(0.5) - 7.0 / 9.0).abs() < 1e-6);
        assert!((at(0.2) - 0.76).abs() < 1e-6);

        // The plateau of maximal cost covers exactly the near-even region.
        let max = grid
            .points
            .iter()
            .map(|pt| pt.social_cost)
            .fold(f64::NEG_INFINITY, f64::max);
        for pt in &grid.points {
            let inside = pt.coords[0] >= 1.0 / 3.0 - 0.05 && pt.coords[0] <= 2.0 / 3.0 + 0.05;
            if pt.social_cost > max - 1e-9 {
                assert!(inside, "max at {:?}", pt.coords);
            }
        }
    }

    #[test]
    fn surface_rejects_bad_steps() {
        let template = instances::pigou(1, 2);
        assert!(matches!(
            social_cost_surface(&template, 2, 0.0),
            Err(AnalyticsError::BadStep(_))
        ));
        assert!(matches!(
            social_cost_surface(&template, 2, 0.3),
            Err(AnalyticsError::BadStep(_))
        ));
    }
}
