use super::{AllocationResult, AllocationSolver, PredictionMatrix};
use crate::error::{Error, Result};

/// Largest `k·m` the enumeration oracle accepts.
pub const ENUMERATION_LIMIT: usize = 20;

/// Exhaustive search over every feasible indicator matrix. Test oracle only.
#[derive(Clone, Copy, Debug, Default)]
pub struct BruteForceSolver;

impl AllocationSolver for BruteForceSolver {
    fn name(&self) -> &'static str {
        "brute-force"
    }

    fn solve(&self, p: &PredictionMatrix) -> Result<AllocationResult> {
        let (k, m) = (p.experts(), p.components());
        if k * m > ENUMERATION_LIMIT {
            return Err(Error::contract(format!(
                "brute-force allocation limited to k·m ≤ {ENUMERATION_LIMIT}, got {k}×{m}"
            )));
        }
        let total = p.edge_total() as u32;
        let (row_cap, col_cap) = (p.expert_budget() as u32, p.component_budget() as u32);
        let row_mask = (1u32 << m) - 1;
        let mut best: Option<AllocationResult> = None;
        for bits in 0u32..(1u32 << (k * m)) {
            if bits.count_ones() != total {
                continue;
            }
            let rows_ok = (0..k).all(|i| {
                let r = ((bits >> (i * m)) & row_mask).count_ones();
                (1..=row_cap).contains(&r)
            });
            if !rows_ok {
                continue;
            }
            let cols_ok = (0..m).all(|j| {
                let c = (0..k).filter(|&i| bits >> (i * m + j) & 1 == 1).count() as u32;
                (1..=col_cap).contains(&c)
            });
            if !cols_ok {
                continue;
            }
            let w: Vec<bool> = (0..k * m).map(|b| bits >> b & 1 == 1).collect();
            let cand = AllocationResult::from_assignment(p, w);
            if best.as_ref().is_none_or(|b| cand.objective > b.objective) {
                best = Some(cand);
            }
        }
        best.ok_or_else(|| Error::contract(format!("no feasible allocation for k={k}, m={m}")))
    }
}
