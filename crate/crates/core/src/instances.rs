//! Canonical benchmark instances: the two-edge Pigou network and the
//! five-edge Braess network, with configurable cost degree and controller
//! count. Total demand is normalized to 1.

use std::collections::BTreeMap;

use crate::game::{
    ControlAssignment, Controller, CostPolynomial, Edge, GameInstance, InformationType, Network,
    Path, Population,
};

/// Two parallel edges O->D: e1 with constant cost 1, e2 with cost f^p.
pub fn pigou_network(p: usize) -> Network {
    Network {
        nodes: vec!["O".into(), "D".into()],
        edges: vec![
            Edge {
                id: "e1".into(),
                tail: "O".into(),
                head: "D".into(),
                cost: CostPolynomial::constant(1.0),
            },
            Edge {
                id: "e2".into(),
                tail: "O".into(),
                head: "D".into(),
                cost: CostPolynomial::monomial(p),
            },
        ],
    }
}

/// Pigou instance with `controllers` operating systems in proportional control.
pub fn pigou(p: usize, controllers: usize) -> GameInstance {
    let shares = vec![1.0 / controllers as f64; controllers];
    pigou_with_shares(p, &shares)
}

/// Pigou instance with one controller per entry of `shares` (flow units,
/// callers keep them summing to 1).
pub fn pigou_with_shares(p: usize, shares: &[f64]) -> GameInstance {
    GameInstance {
        network: pigou_network(p),
        populations: vec![Population {
            id: "p1".into(),
            origin: "O".into(),
            destination: "D".into(),
            demand: 1.0,
            paths: vec![
                Path::new(vec!["e1".into()]),
                Path::new(vec!["e2".into()]),
            ],
        }],
        assignment: assignment_for(shares, "p1"),
        information_types: vec![],
    }
}

/// Pigou with two information types: `t_top` (demand 0.4) only knows the
/// constant-cost edge, `t_all` (demand 0.6) knows both routes.
pub fn pigou_two_types(p: usize) -> GameInstance {
    let mut instance = pigou(p, 1);
    instance.information_types = vec![
        InformationType {
            id: "t_top".into(),
            population: "p1".into(),
            known_paths: vec![0],
            demand: 0.4,
        },
        InformationType {
            id: "t_all".into(),
            population: "p1".into(),
            known_paths: vec![0, 1],
            demand: 0.6,
        },
    ];
    instance
}

/// Braess network: O -e1-> A -e2-> D on top, O -e3-> B -e4-> D on the bottom,
/// and the free shortcut A -e5-> B. e1 and e4 cost f^p, e2 and e3 cost 1.
pub fn braess_network(p: usize) -> Network {
    let mono = CostPolynomial::monomial(p);
    Network {
        nodes: vec!["O".into(), "A".into(), "B".into(), "D".into()],
        edges: vec![
            Edge { id: "e1".into(), tail: "O".into(), head: "A".into(), cost: mono.clone() },
            Edge { id: "e2".into(), tail: "A".into(), head: "D".into(), cost: CostPolynomial::constant(1.0) },
            Edge { id: "e3".into(), tail: "O".into(), head: "B".into(), cost: CostPolynomial::constant(1.0) },
            Edge { id: "e4".into(), tail: "B".into(), head: "D".into(), cost: mono },
            Edge { id: "e5".into(), tail: "A".into(), head: "B".into(), cost: CostPolynomial::constant(0.0) },
        ],
    }
}

/// Braess instance with proportional control split over `controllers`
/// operating systems. Routes in enumeration order: upper (e1 e2),
/// zig-zag (e1 e5 e4), lower (e3 e4).
pub fn braess(p: usize, controllers: usize) -> GameInstance {
    let shares = vec![1.0 / controllers as f64; controllers];
    GameInstance {
        network: braess_network(p),
        populations: vec![Population {
            id: "p1".into(),
            origin: "O".into(),
            destination: "D".into(),
            demand: 1.0,
            paths: vec![
                Path::new(vec!["e1".into(), "e2".into()]),
                Path::new(vec!["e1".into(), "e5".into(), "e4".into()]),
                Path::new(vec!["e3".into(), "e4".into()]),
            ],
        }],
        assignment: assignment_for(&shares, "p1"),
        information_types: vec![],
    }
}

fn assignment_for(shares: &[f64], population: &str) -> ControlAssignment {
    ControlAssignment {
        controllers: shares
            .iter()
            .enumerate()
            .map(|(k, &share)| Controller {
                id: format!("r{}", k + 1),
                shares: BTreeMap::from([(population.to_string(), share)]),
            })
            .collect(),
    }
}
