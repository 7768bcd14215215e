//! Game model: networks with polynomial edge costs, demand populations,
//! information types, and controller assignments.
//!
//! All types here are plain immutable values. Construction is permissive;
//! structural invariants are checked by [`validate`], which reports every
//! violation instead of failing on the first one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Node identifier.
pub type NodeId = String;
/// Edge identifier. Ordering (path enumeration, tie-breaks) uses plain
/// string comparison of these ids.
pub type EdgeId = String;
/// Population identifier.
pub type PopulationId = String;
/// Controller (operating system) identifier.
pub type ControllerId = String;

/// Flow entries below this threshold are reported as exactly zero.
pub const FLOW_EPS: f64 = 1e-12;

/// Tolerance for demand/share conservation checks during validation.
pub const MASS_TOL: f64 = 1e-9;

/// Polynomial edge cost c(f) = a_0 + a_1 f + ... + a_p f^p.
///
/// Coefficients must be nonnegative so that the cost is nondecreasing and
/// convex on f >= 0; [`validate`] reports violations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostPolynomial {
    pub coefficients: Vec<f64>,
}

impl CostPolynomial {
    pub fn new(coefficients: Vec<f64>) -> Self {
        Self { coefficients }
    }

    /// Constant cost polynomial.
    pub fn constant(a0: f64) -> Self {
        Self::new(vec![a0])
    }

    /// Monomial cost f^degree.
    pub fn monomial(degree: usize) -> Self {
        let mut coefficients = vec![0.0; degree + 1];
        coefficients[degree] = 1.0;
        Self::new(coefficients)
    }

    /// Index of the last nonzero coefficient; 0 for the zero polynomial.
    pub fn degree(&self) -> usize {
        self.coefficients
            .iter()
            .rposition(|&a| a != 0.0)
            .unwrap_or(0)
    }

    /// c(f) by Horner evaluation. The caller guarantees f >= 0.
    pub fn value(&self, f: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, &a| acc * f + a)
    }

    /// c'(f).
    pub fn slope(&self, f: f64) -> f64 {
        let mut acc = 0.0;
        for (j, &a) in self.coefficients.iter().enumerate().skip(1).rev() {
            acc = acc * f + a * j as f64;
        }
        acc
    }

    /// c''(f).
    pub fn curvature(&self, f: f64) -> f64 {
        let mut acc = 0.0;
        for (j, &a) in self.coefficients.iter().enumerate().skip(2).rev() {
            acc = acc * f + a * (j * (j - 1)) as f64;
        }
        acc
    }

    /// Integral of c from 0 to f: sum_j a_j f^{j+1} / (j+1).
    pub fn integral(&self, f: f64) -> f64 {
        let mut acc = 0.0;
        for (j, &a) in self.coefficients.iter().enumerate().rev() {
            acc = acc * f + a / (j as f64 + 1.0);
        }
        acc * f
    }

    /// Marginal cost polynomial c(z) + z c'(z), i.e. coefficients (j+1) a_j.
    pub fn marginal(&self) -> CostPolynomial {
        CostPolynomial::new(
            self.coefficients
                .iter()
                .enumerate()
                .map(|(j, &a)| a * (j as f64 + 1.0))
                .collect(),
        )
    }

    pub fn is_valid(&self) -> bool {
        self.coefficients.iter().all(|a| a.is_finite() && *a >= 0.0)
    }
}

/// Directed edge of a [`Network`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: EdgeId,
    pub tail: NodeId,
    pub head: NodeId,
    pub cost: CostPolynomial,
}

/// Directed graph with polynomial edge costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub nodes: Vec<NodeId>,
    pub edges: Vec<Edge>,
}

impl Network {
    pub fn edge(&self, id: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.id == id)
    }

    pub fn edge_index(&self, id: &str) -> Option<usize> {
        self.edges.iter().position(|e| e.id == id)
    }
}

/// A route: an ordered list of edge ids forming a simple tail-to-head chain.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Path {
    pub edges: Vec<EdgeId>,
}

impl Path {
    pub fn new(edges: Vec<EdgeId>) -> Self {
        Self { edges }
    }
}

/// A demand population travelling between one origin-destination pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub id: PopulationId,
    pub origin: NodeId,
    pub destination: NodeId,
    /// Traffic volume, must be > 0.
    pub demand: f64,
    /// Strategy set: the routes available to this population.
    pub paths: Vec<Path>,
}

/// A slice of a population with restricted route knowledge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationType {
    pub id: String,
    pub population: PopulationId,
    /// Indices into the population's path list.
    pub known_paths: Vec<usize>,
    pub demand: f64,
}

/// One operating system and the demand shares it controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub id: ControllerId,
    /// population id -> controlled demand d_i^r, in flow units.
    pub shares: BTreeMap<PopulationId, f64>,
}

impl Controller {
    /// Populations this controller actually touches (positive share).
    pub fn controlled_populations(&self) -> impl Iterator<Item = (&PopulationId, f64)> {
        self.shares.iter().filter(|(_, &d)| d > 0.0).map(|(i, &d)| (i, d))
    }

    pub fn share(&self, population: &str) -> f64 {
        self.shares.get(population).copied().unwrap_or(0.0)
    }
}

/// Assignment of population demand to controllers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlAssignment {
    pub controllers: Vec<Controller>,
}

impl ControlAssignment {
    pub fn controller(&self, id: &str) -> Option<&Controller> {
        self.controllers.iter().find(|c| c.id == id)
    }
}

/// A full game instance: network, populations, controller assignment and
/// optional information types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameInstance {
    pub network: Network,
    pub populations: Vec<Population>,
    pub assignment: ControlAssignment,
    #[serde(default)]
    pub information_types: Vec<InformationType>,
}

impl GameInstance {
    pub fn population(&self, id: &str) -> Option<&Population> {
        self.populations.iter().find(|p| p.id == id)
    }

    pub fn total_demand(&self) -> f64 {
        self.populations.iter().map(|p| p.demand).sum()
    }

    /// Information types of one population, if any were declared.
    pub fn types_of(&self, population: &str) -> Vec<&InformationType> {
        self.information_types
            .iter()
            .filter(|t| t.population == population)
            .collect()
    }
}

/// Errors from game-model operations with hard preconditions.
#[derive(Debug, Clone, PartialEq)]
pub enum GameError {
    UnknownController(ControllerId),
    UnknownNode(NodeId),
    NoPath { origin: NodeId, destination: NodeId },
    TooManyPaths { origin: NodeId, destination: NodeId, max_paths: usize },
    SameEndpoints(NodeId),
}

impl fmt::Display for GameError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GameError::UnknownController(id) => write!(f, "unknown controller `{id}`"),
            GameError::UnknownNode(id) => write!(f, "unknown node `{id}`"),
            GameError::NoPath { origin, destination } => {
                write!(f, "no path from `{origin}` to `{destination}`")
            }
            GameError::TooManyPaths { origin, destination, max_paths } => write!(
                f,
                "more than {max_paths} simple paths from `{origin}` to `{destination}`"
            ),
            GameError::SameEndpoints(n) => {
                write!(f, "origin and destination are both `{n}`")
            }
        }
    }
}

impl std::error::Error for GameError {}

/// One invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Where in the instance the problem sits, e.g. `population p1, path 2`.
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

/// Outcome of structural validation. Violations are collected, not thrown.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            location: location.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            write!(f, "ok")
        } else {
            for v in &self.violations {
                writeln!(f, "{v}")?;
            }
            Ok(())
        }
    }
}

/// Checks every structural invariant of the instance and reports all
/// violations with their locations.
pub fn validate(instance: &GameInstance) -> ValidationReport {
    let mut report = ValidationReport::default();
    let net = &instance.network;

    let node_set: BTreeSet<&str> = net.nodes.iter().map(|n| n.as_str()).collect();
    if node_set.len() != net.nodes.len() {
        report.push("network", "duplicate node ids");
    }

    let mut edge_ids = BTreeSet::new();
    for edge in &net.edges {
        let loc = format!("edge {}", edge.id);
        if !edge_ids.insert(edge.id.as_str()) {
            report.push(&loc, "duplicate edge id");
        }
        if !node_set.contains(edge.tail.as_str()) {
            report.push(&loc, format!("tail references unknown node `{}`", edge.tail));
        }
        if !node_set.contains(edge.head.as_str()) {
            report.push(&loc, format!("head references unknown node `{}`", edge.head));
        }
        if !edge.cost.is_valid() {
            report.push(&loc, "cost coefficients must be finite and nonnegative");
        }
    }

    let mut population_ids = BTreeSet::new();
    for pop in &instance.populations {
        let loc = format!("population {}", pop.id);
        if !population_ids.insert(pop.id.as_str()) {
            report.push(&loc, "duplicate population id");
        }
        if !(pop.demand > 0.0) {
            report.push(&loc, format!("demand must be > 0, got {}", pop.demand));
        }
        if !node_set.contains(pop.origin.as_str()) {
            report.push(&loc, format!("unknown origin node `{}`", pop.origin));
        }
        if !node_set.contains(pop.destination.as_str()) {
            report.push(&loc, format!("unknown destination node `{}`", pop.destination));
        }
        if pop.paths.is_empty() {
            report.push(&loc, "path set is empty");
        }
        let mut seen_paths = BTreeSet::new();
        for (k, path) in pop.paths.iter().enumerate() {
            let ploc = format!("{loc}, path {k}");
            if let Some(msg) = path_defect(net, path, &pop.origin, &pop.destination) {
                report.push(&ploc, msg);
            }
            if !seen_paths.insert(path.edges.clone()) {
                report.push(&ploc, "duplicate of an earlier path");
            }
        }
    }

    // Information types: partition of the population demand over known paths.
    let mut type_mass: BTreeMap<&str, f64> = BTreeMap::new();
    for ty in &instance.information_types {
        let loc = format!("information type {}", ty.id);
        let Some(pop) = instance.population(&ty.population) else {
            report.push(&loc, format!("unknown population `{}`", ty.population));
            continue;
        };
        if ty.demand < 0.0 {
            report.push(&loc, format!("demand must be >= 0, got {}", ty.demand));
        }
        if ty.known_paths.is_empty() {
            report.push(&loc, "known path set is empty");
        }
        for &k in &ty.known_paths {
            if k >= pop.paths.len() {
                report.push(&loc, format!("known path index {k} out of range"));
            }
        }
        *type_mass.entry(ty.population.as_str()).or_insert(0.0) += ty.demand;
    }
    for (pop_id, mass) in &type_mass {
        if let Some(pop) = instance.population(pop_id) {
            if (mass - pop.demand).abs() > MASS_TOL {
                report.push(
                    format!("population {pop_id}"),
                    format!(
                        "information type demands sum to {mass}, expected {}",
                        pop.demand
                    ),
                );
            }
        }
    }

    // Controller assignment: shares nonnegative, population coverage exact.
    let mut controller_ids = BTreeSet::new();
    let mut assigned: BTreeMap<&str, f64> = BTreeMap::new();
    for ctl in &instance.assignment.controllers {
        let loc = format!("controller {}", ctl.id);
        if !controller_ids.insert(ctl.id.as_str()) {
            report.push(&loc, "duplicate controller id");
        }
        for (pop_id, &share) in &ctl.shares {
            if instance.population(pop_id).is_none() {
                report.push(&loc, format!("share references unknown population `{pop_id}`"));
            }
            if !(share >= 0.0) || !share.is_finite() {
                report.push(
                    &loc,
                    format!("share of population `{pop_id}` must be >= 0, got {share}"),
                );
            }
            *assigned.entry(pop_id.as_str()).or_insert(0.0) += share;
        }
    }
    for pop in &instance.populations {
        let total = assigned.get(pop.id.as_str()).copied().unwrap_or(0.0);
        if (total - pop.demand).abs() > MASS_TOL {
            report.push(
                format!("population {}", pop.id),
                format!("controller shares sum to {total}, expected {}", pop.demand),
            );
        }
    }

    report
}

/// Returns a description of what is wrong with `path`, or None if it is a
/// simple origin-to-destination chain of existing edges.
fn path_defect(net: &Network, path: &Path, origin: &str, destination: &str) -> Option<String> {
    if path.edges.is_empty() {
        return Some("path has no edges".into());
    }
    let mut visited: BTreeSet<&str> = BTreeSet::new();
    let mut at = origin;
    visited.insert(origin);
    for edge_id in &path.edges {
        let Some(edge) = net.edge(edge_id) else {
            return Some(format!("unknown edge `{edge_id}`"));
        };
        if edge.tail != at {
            return Some(format!(
                "edge `{edge_id}` starts at `{}`, expected `{at}`",
                edge.tail
            ));
        }
        if !visited.insert(edge.head.as_str()) {
            return Some(format!("node `{}` repeated", edge.head));
        }
        at = edge.head.as_str();
    }
    if at != destination {
        return Some(format!("path ends at `{at}`, expected `{destination}`"));
    }
    None
}

/// Fraction of the total demand routed by controller `r`.
pub fn share_of_control(instance: &GameInstance, r: &str) -> Result<f64, GameError> {
    let ctl = instance
        .assignment
        .controller(r)
        .ok_or_else(|| GameError::UnknownController(r.to_string()))?;
    let controlled: f64 = ctl.shares.values().sum();
    Ok(controlled / instance.total_demand())
}

/// True iff every controller holds a 1/|R| share of every population,
/// within `tol` on the per-population control fraction.
pub fn is_proportional(instance: &GameInstance, tol: f64) -> bool {
    let n_controllers = instance.assignment.controllers.len();
    if n_controllers == 0 {
        return false;
    }
    let even = 1.0 / n_controllers as f64;
    instance.assignment.controllers.iter().all(|ctl| {
        instance.populations.iter().all(|pop| {
            let control = ctl.share(&pop.id) / pop.demand;
            control > 0.0 && (control - even).abs() <= tol
        })
    })
}

/// Enumerates all simple origin-to-destination paths in lexicographic order
/// of their edge-id sequences. Errors if no path exists or if more than
/// `max_paths` simple paths exist.
pub fn enumerate_paths(
    network: &Network,
    origin: &str,
    destination: &str,
    max_paths: usize,
) -> Result<Vec<Path>, GameError> {
    if origin == destination {
        return Err(GameError::SameEndpoints(origin.to_string()));
    }
    for node in [origin, destination] {
        if !network.nodes.iter().any(|n| n == node) {
            return Err(GameError::UnknownNode(node.to_string()));
        }
    }

    // Outgoing edges sorted by id so that depth-first traversal emits paths
    // in lexicographic edge-id order.
    let mut outgoing: BTreeMap<&str, Vec<&Edge>> = BTreeMap::new();
    for edge in &network.edges {
        outgoing.entry(edge.tail.as_str()).or_default().push(edge);
    }
    for edges in outgoing.values_mut() {
        edges.sort_by(|a, b| a.id.cmp(&b.id));
    }

    let mut paths = Vec::new();
    let mut stack: Vec<&Edge> = Vec::new();
    let mut visited: BTreeSet<&str> = BTreeSet::new();
    visited.insert(origin);
    dfs(
        &outgoing,
        origin,
        destination,
        &mut visited,
        &mut stack,
        &mut paths,
        max_paths,
    )
    .map_err(|_| GameError::TooManyPaths {
        origin: origin.to_string(),
        destination: destination.to_string(),
        max_paths,
    })?;

    if paths.is_empty() {
        return Err(GameError::NoPath {
            origin: origin.to_string(),
            destination: destination.to_string(),
        });
    }
    Ok(paths)
}

struct Overflow;

fn dfs<'a>(
    outgoing: &BTreeMap<&str, Vec<&'a Edge>>,
    at: &str,
    destination: &str,
    visited: &mut BTreeSet<&'a str>,
    stack: &mut Vec<&'a Edge>,
    paths: &mut Vec<Path>,
    max_paths: usize,
) -> Result<(), Overflow> {
    if at == destination {
        if paths.len() == max_paths {
            return Err(Overflow);
        }
        paths.push(Path::new(stack.iter().map(|e| e.id.clone()).collect()));
        return Ok(());
    }
    if let Some(edges) = outgoing.get(at) {
        for edge in edges {
            if visited.contains(edge.head.as_str()) {
                continue;
            }
            visited.insert(edge.head.as_str());
            stack.push(edge);
            dfs(outgoing, &edge.head, destination, visited, stack, paths, max_paths)?;
            stack.pop();
            visited.remove(edge.head.as_str());
        }
    }
    Ok(())
}
