//! Expert–component allocation.
//!
//! Given the confidence `p[i][j]` of component `j` under expert `i`, pick a
//! binary assignment `w` maximising `Σ w·p` such that every expert and every
//! component carries at least one edge, expert `i` carries at most
//! `max(1, ⌈m/k⌉)` edges, component `j` at most `max(1, ⌈k/m⌉)`, and exactly
//! `max(k, m)` edges are selected.

mod brute;
pub mod flow;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;

pub use brute::{BruteForceSolver, ENUMERATION_LIMIT};

/// `k × m` confidences; rows are experts, columns the sorted component set.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix {
    k: usize,
    m: usize,
    p: Vec<f64>,
}

impl PredictionMatrix {
    pub fn new(k: usize, m: usize, p: Vec<f64>) -> Result<Self> {
        if k == 0 || m == 0 {
            return Err(Error::contract(format!(
                "allocation needs k ≥ 1 and m ≥ 1, got k={k}, m={m}"
            )));
        }
        if p.len() != k * m {
            return Err(Error::shape("prediction matrix", &[k, m], &[p.len()]));
        }
        if let Some(bad) = p.iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "prediction matrix entries must be finite, found {bad}"
            )));
        }
        Ok(PredictionMatrix { k, m, p })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::contract("prediction matrix rows differ in length"));
        }
        Self::new(k, m, rows.concat())
    }

    pub fn experts(&self) -> usize {
        self.k
    }

    pub fn components(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.m + j]
    }

    pub fn scaled(&self, c: f64) -> Self {
        PredictionMatrix {
            p: self.p.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    pub fn expert_budget(&self) -> usize {
        self.m.div_ceil(self.k).max(1)
    }

    pub fn component_budget(&self) -> usize {
        self.k.div_ceil(self.m).max(1)
    }

    pub fn edge_total(&self) -> usize {
        self.k.max(self.m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub k: usize,
    pub m: usize,
    /// Row-major `k × m` indicator.
    pub w: Vec<bool>,
    /// `Σ w·p`, summed in row-major order.
    pub objective: f64,
}

impl AllocationResult {
    pub fn from_assignment(p: &PredictionMatrix, w: Vec<bool>) -> Self {
        let objective = w
            .iter()
            .zip(&p.p)
            .filter(|(&on, _)| on)
            .map(|(_, &v)| v)
            .fold(0.0, |acc, v| acc + v);
        AllocationResult {
            k: p.k,
            m: p.m,
            w,
            objective,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.w[i * self.m + j]
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.w.chunks(self.m).map(|r| r.iter().filter(|&&b| b).count()).collect()
    }

    pub fn col_sums(&self) -> Vec<usize> {
        (0..self.m)
            .map(|j| (0..self.k).filter(|&i| self.get(i, j)).count())
            .collect()
    }

    pub fn edges(&self) -> usize {
        self.w.iter().filter(|&&b| b).count()
    }

    /// Components assigned to expert `i`, as column indices.
    pub fn assigned(&self, i: usize) -> Vec<usize> {
        (0..self.m).filter(|&j| self.get(i, j)).collect()
    }

    /// Checks coverage, budgets and the edge total; returns the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let row_cap = self.m.div_ceil(self.k).max(1);
        let col_cap = self.k.div_ceil(self.m).max(1);
        for (i, &r) in self.row_sums().iter().enumerate() {
            if r < 1 || r > row_cap {
                return Err(format!("expert {i} carries {r} edges (allowed 1..={row_cap})"));
            }
        }
        for (j, &c) in self.col_sums().iter().enumerate() {
            if c < 1 || c > col_cap {
                return Err(format!("component {j} carries {c} edges (allowed 1..={col_cap})"));
            }
        }
        let total = self.edges();
        if total != self.k.max(self.m) {
            return Err(format!("{total} edges selected, expected {}", self.k.max(self.m)));
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for i in 0..self.k {
            let row: Vec<&str> = (0..self.m)
                .map(|j| if self.get(i, j) { "1" } else { "0" })
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

/// A strategy that solves the allocation problem.
pub trait AllocationSolver: Send + Sync {
    fn name(&self) -> &'static str;

    fn solve(&self, p: &PredictionMatrix) -> Result<AllocationResult>;
}

/// Exact solver: min-cost flow with lower bounds.
///
/// Network: `source → expert_i` with window `[1, ⌈m/k⌉]`, `expert_i →
/// component_j` with window `[0, 1]` and cost `−p_ij`, `component_j → sink`
/// with window `[1, ⌈k/m⌉]`, total flow `max(k, m)`. Arcs are inserted in
/// (expert, component) lexicographic order, so equal-cost ties resolve the
/// same way on every call.
#[derive(Clone, Copy, Debug, Default)]
pub struct FlowSolver;

impl AllocationSolver for FlowSolver {
    fn name(&self) -> &'static str {
        "flow"
    }

    fn solve(&self, p: &PredictionMatrix) -> Result<AllocationResult> {
        use flow::BoundedArc;
        let (k, m) = (p.k, p.m);
        let source = 0;
        let expert = |i: usize| 1 + i;
        let component = |j: usize| 1 + k + j;
        let sink = 1 + k + m;
        let mut arcs = Vec::with_capacity(k + m + k * m);
        for i in 0..k {
            arcs.push(BoundedArc {
                from: source,
                to: expert(i),
                lower: 1,
                upper: p.expert_budget() as i64,
                cost: 0.0,
            });
        }
        let first_edge = arcs.len();
        for i in 0..k {
            for j in 0..m {
                arcs.push(BoundedArc {
                    from: expert(i),
                    to: component(j),
                    lower: 0,
                    upper: 1,
                    cost: -p.get(i, j),
                });
            }
        }
        for j in 0..m {
            arcs.push(BoundedArc {
                from: component(j),
                to: sink,
                lower: 1,
                upper: p.component_budget() as i64,
                cost: 0.0,
            });
        }
        let flows = flow::min_cost_flow_with_bounds(sink + 1, &arcs, source, sink, p.edge_total() as i64)
            .ok_or_else(|| Error::contract(format!("allocation infeasible for k={k}, m={m}")))?;
        let w = flows[first_edge..first_edge + k * m].iter().map(|&f| f == 1).collect();
        Ok(AllocationResult::from_assignment(p, w))
    }
}

pub fn solvers() -> Registry<dyn AllocationSolver> {
    let mut reg: Registry<dyn AllocationSolver> = Registry::new("allocation solver");
    reg.register("flow", Arc::new(FlowSolver));
    reg.register("brute-force", Arc::new(BruteForceSolver));
    reg
}

/// Optimal allocation via [`FlowSolver`].
pub fn solve_allocation(p: &PredictionMatrix) -> Result<AllocationResult> {
    FlowSolver.solve(p)
}

/// Optimal allocation by exhaustive enumeration (`k·m ≤ ENUMERATION_LIMIT`).
pub fn brute_force_allocation(p: &PredictionMatrix) -> Result<AllocationResult> {
    BruteForceSolver.solve(p)
}

/// Parses a matrix from JSON (`[[..],[..]]`) or whitespace/comma separated rows.
pub fn parse_matrix(text: &str) -> Result<PredictionMatrix> {
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        let rows: Vec<Vec<f64>> = serde_json::from_str(trimmed)?;
        return PredictionMatrix::from_rows(&rows);
    }
    let rows = trimmed
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::contract(format!("not a number: {t}")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionMatrix::from_rows(&rows)
}
