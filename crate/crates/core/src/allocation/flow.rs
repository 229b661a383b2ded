//! Min-cost flow with lower bounds on arcs.
//!
//! Lower bounds are removed by the usual transform: an arc `u→v` with window
//! `[l, c]` becomes an arc of capacity `c − l`, `l` units of supply move to
//! `v` and `l` units of demand to `u`. A return arc `t→s` with window
//! `[value, value]` turns the s–t problem into a circulation, and the
//! resulting supplies/demands are wired to a super source and super sink.
//! Successive shortest paths (Bellman–Ford, so negative arc costs are fine)
//! then routes the super flow; the bounds are satisfiable iff it saturates.

use std::collections::VecDeque;

const EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
struct Arc {
    to: usize,
    cap: i64,
    cost: f64,
}

/// Residual network solved by successive shortest augmenting paths.
#[derive(Clone, Debug)]
pub struct MinCostFlow {
    arcs: Vec<Arc>,
    adj: Vec<Vec<usize>>,
}

impl MinCostFlow {
    pub fn new(nodes: usize) -> Self {
        MinCostFlow {
            arcs: Vec::new(),
            adj: vec![Vec::new(); nodes],
        }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    /// Adds `u→v` and its residual twin; returns the forward arc index.
    pub fn add_arc(&mut self, u: usize, v: usize, cap: i64, cost: f64) -> usize {
        let id = self.arcs.len();
        self.arcs.push(Arc { to: v, cap, cost });
        self.arcs.push(Arc {
            to: u,
            cap: 0,
            cost: -cost,
        });
        self.adj[u].push(id);
        self.adj[v].push(id + 1);
        id
    }

    /// Flow currently carried by forward arc `id`.
    pub fn flow(&self, id: usize) -> i64 {
        self.arcs[id ^ 1].cap
    }

    /// Cheapest path from `s` to every node in the residual graph. Arcs are
    /// relaxed in insertion order and only on strict improvement, which makes
    /// the chosen path (and therefore tie-breaking) deterministic.
    fn shortest_paths(&self, s: usize) -> (Vec<f64>, Vec<Option<usize>>) {
        let n = self.node_count();
        let mut dist = vec![f64::INFINITY; n];
        let mut parent = vec![None; n];
        let mut in_queue = vec![false; n];
        let mut queue = VecDeque::new();
        dist[s] = 0.0;
        queue.push_back(s);
        in_queue[s] = true;
        while let Some(u) = queue.pop_front() {
            in_queue[u] = false;
            for &a in &self.adj[u] {
                let arc = &self.arcs[a];
                if arc.cap > 0 {
                    let nd = dist[u] + arc.cost;
                    if nd < dist[arc.to] - EPS {
                        dist[arc.to] = nd;
                        parent[arc.to] = Some(a);
                        if !in_queue[arc.to] {
                            queue.push_back(arc.to);
                            in_queue[arc.to] = true;
                        }
                    }
                }
            }
        }
        (dist, parent)
    }

    /// Sends up to `limit` units from `s` to `t` at minimum cost.
    /// Returns `(flow, cost)`.
    pub fn run(&mut self, s: usize, t: usize, limit: i64) -> (i64, f64) {
        let (mut flow, mut cost) = (0i64, 0.0f64);
        while flow < limit {
            let (dist, parent) = self.shortest_paths(s);
            if !dist[t].is_finite() {
                break;
            }
            let mut push = limit - flow;
            let mut v = t;
            while v != s {
                let a = parent[v].expect("path");
                push = push.min(self.arcs[a].cap);
                v = self.arcs[a ^ 1].to;
            }
            let mut v = t;
            while v != s {
                let a = parent[v].expect("path");
                self.arcs[a].cap -= push;
                self.arcs[a ^ 1].cap += push;
                v = self.arcs[a ^ 1].to;
            }
            flow += push;
            cost += push as f64 * dist[t];
        }
        (flow, cost)
    }
}

/// An arc with a capacity window `[lower, upper]`.
#[derive(Clone, Copy, Debug)]
pub struct BoundedArc {
    pub from: usize,
    pub to: usize,
    pub lower: i64,
    pub upper: i64,
    pub cost: f64,
}

/// Minimum-cost s–t flow of exactly `value` units respecting every arc window.
/// Returns the flow on each input arc, or `None` when infeasible.
pub fn min_cost_flow_with_bounds(
    nodes: usize,
    arcs: &[BoundedArc],
    s: usize,
    t: usize,
    value: i64,
) -> Option<Vec<i64>> {
    let super_s = nodes;
    let super_t = nodes + 1;
    let mut net = MinCostFlow::new(nodes + 2);
    let mut excess = vec![0i64; nodes];
    let mut ids = Vec::with_capacity(arcs.len());
    for a in arcs {
        assert!(a.lower <= a.upper && a.lower >= 0);
        ids.push(net.add_arc(a.from, a.to, a.upper - a.lower, a.cost));
        excess[a.to] += a.lower;
        excess[a.from] -= a.lower;
    }
    // return arc t→s carrying exactly `value`
    excess[s] += value;
    excess[t] -= value;

    let mut required = 0;
    for (v, &e) in excess.iter().enumerate() {
        if e > 0 {
            net.add_arc(super_s, v, e, 0.0);
            required += e;
        } else if e < 0 {
            net.add_arc(v, super_t, -e, 0.0);
        }
    }
    let (sent, _) = net.run(super_s, super_t, required);
    if sent < required {
        return None;
    }
    Some(
        arcs.iter()
            .zip(&ids)
            .map(|(a, &id)| a.lower + net.flow(id))
            .collect(),
    )
}
