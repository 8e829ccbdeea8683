//! Branch-and-bound over [`qp`](crate::qp) relaxations.
//!
//! Nodes are explored depth-first (down branch first) until a first
//! incumbent exists, then best-first on the relaxation bound with the node
//! id as tie-breaker, so the search order is fully deterministic. Children
//! are solved eagerly when their parent is branched; each child is warm
//! started from its parent's primal point and active set.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DVector;
use thiserror::Error;

use crate::qp::{QpError, QpProblem, QpSettings, QpSolver, QpStatus, WarmStart};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MiqpError {
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("invalid integer set: {0}")]
    InvalidIntegerSet(String),
    #[error("no fractional integer variable")]
    NoFractional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiqpProblem {
    pub base: QpProblem,
    /// Indices of variables restricted to integer values within their bounds.
    pub integer_set: Vec<usize>,
}

impl MiqpProblem {
    pub fn validate(&self) -> Result<(), MiqpError> {
        self.base.validate()?;
        let n = self.base.num_vars();
        for &i in &self.integer_set {
            if i >= n {
                return Err(MiqpError::InvalidIntegerSet(format!("index {i} out of range for {n} variables")));
            }
            if !self.base.lb[i].is_finite() || !self.base.ub[i].is_finite() {
                return Err(MiqpError::InvalidIntegerSet(format!(
                    "integer variable {i} needs finite bounds"
                )));
            }
        }
        let mut sorted = self.integer_set.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.integer_set.len() {
            return Err(MiqpError::InvalidIntegerSet("duplicate indices".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiqpStatus {
    Optimal,
    Infeasible,
    NodeLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiqpSolution {
    /// Best integer-feasible point; empty when none was found.
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: MiqpStatus,
    pub nodes_explored: usize,
    /// Relative gap `(incumbent - bound) / max(1, |incumbent|)`.
    pub gap: f64,
    pub best_bound: f64,
    pub qp_iterations: usize,
    /// Populated when [`MiqpSettings::record_trace`] is set.
    pub trace: Option<SearchTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiqpSettings {
    pub node_limit: usize,
    pub gap_tol: f64,
    pub int_tol: f64,
    pub qp: QpSettings,
    pub record_trace: bool,
}

impl Default for MiqpSettings {
    fn default() -> Self {
        Self {
            node_limit: 20_000,
            gap_tol: 1e-6,
            int_tol: 1e-6,
            qp: QpSettings::default(),
            record_trace: false,
        }
    }
}

/// Per-node record for auditing the search.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub id: usize,
    pub parent: Option<usize>,
    /// Integer-variable bounds `(lb, ub)` of the node, ordered like `integer_set`.
    pub bounds: Vec<(f64, f64)>,
    /// Relaxation objective; `+inf` for infeasible nodes.
    pub relaxation: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchTrace {
    pub nodes: Vec<NodeRecord>,
    /// Incumbent objective after each improvement, in order.
    pub incumbents: Vec<f64>,
}

/// Most fractional integer variable (fractional part closest to 1/2); lowest
/// index on ties.
pub fn branch_rule(x: &[f64], integer_set: &[usize]) -> Result<usize, MiqpError> {
    branch_rule_tol(x, integer_set, MiqpSettings::default().int_tol)
}

fn branch_rule_tol(x: &[f64], integer_set: &[usize], tol: f64) -> Result<usize, MiqpError> {
    let mut best: Option<(usize, f64)> = None;
    for &i in integer_set {
        let frac = x[i] - x[i].floor();
        let dist = frac.min(1.0 - frac);
        if dist <= tol {
            continue;
        }
        let score = (frac - 0.5).abs();
        let better = match best {
            None => true,
            Some((bi, bs)) => score < bs - 1e-12 || (score <= bs + 1e-12 && i < bi),
        };
        if better {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i).ok_or(MiqpError::NoFractional)
}

struct Node {
    id: usize,
    depth: usize,
    bound: f64,
    lb: Vec<f64>,
    ub: Vec<f64>,
    x: DVector<f64>,
    warm: WarmStart,
}

struct HeapEntry(Node);

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    // Max-heap: smallest bound, then smallest id, pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .bound
            .total_cmp(&self.0.bound)
            .then_with(|| other.0.id.cmp(&self.0.id))
    }
}

pub fn solve_miqp(
    p: &MiqpProblem,
    incumbent_hint: Option<&DVector<f64>>,
    node_limit: usize,
) -> Result<MiqpSolution, MiqpError> {
    let settings = MiqpSettings {
        node_limit,
        ..MiqpSettings::default()
    };
    MiqpSolver::new(p, settings)?.solve(incumbent_hint)
}

/// Branch-and-bound workspace; the relaxation factorization is built once.
pub struct MiqpSolver {
    qp: QpSolver,
    integer_set: Vec<usize>,
    settings: MiqpSettings,
}

impl MiqpSolver {
    pub fn new(p: &MiqpProblem, settings: MiqpSettings) -> Result<Self, MiqpError> {
        p.validate()?;
        let mut integer_set = p.integer_set.clone();
        integer_set.sort_unstable();
        Ok(Self {
            qp: QpSolver::new(&p.base, settings.qp)?,
            integer_set,
            settings,
        })
    }

    fn is_integral(&self, x: &DVector<f64>) -> bool {
        self.integer_set.iter().all(|&i| {
            let frac = x[i] - x[i].floor();
            frac.min(1.0 - frac) <= self.settings.int_tol
        })
    }

    fn prune_tol(&self, incumbent: f64) -> f64 {
        self.settings.gap_tol * incumbent.abs().max(1.0)
    }

    pub fn solve(&self, incumbent_hint: Option<&DVector<f64>>) -> Result<MiqpSolution, MiqpError> {
        let n = self.qp.num_vars();
        let mut lb = self.qp.lower_bounds().to_vec();
        let mut ub = self.qp.upper_bounds().to_vec();
        for &i in &self.integer_set {
            lb[i] = (lb[i] - self.settings.int_tol).ceil();
            ub[i] = (ub[i] + self.settings.int_tol).floor();
        }

        let mut trace = self.settings.record_trace.then(SearchTrace::default);
        let mut qp_iterations = 0;
        let mut incumbent: Option<(f64, DVector<f64>)> = None;

        if let Some(hint) = incumbent_hint.filter(|h| h.len() == n) {
            let mut hlb = lb.clone();
            let mut hub = ub.clone();
            for &i in &self.integer_set {
                let v = hint[i].round().clamp(lb[i], ub[i]);
                hlb[i] = v;
                hub[i] = v;
            }
            let warm = WarmStart {
                x: Some(hint.clone()),
                active: Vec::new(),
            };
            let sol = self.qp.solve_with_bounds(&hlb, &hub, Some(&warm));
            qp_iterations += sol.iterations;
            if sol.status == QpStatus::Optimal {
                if let Some(t) = trace.as_mut() {
                    t.incumbents.push(sol.objective);
                }
                incumbent = Some((sol.objective, sol.x));
            }
        }

        let mut next_id = 0usize;
        let mut nodes_explored = 0usize;

        let root = self.qp.solve_with_bounds(&lb, &ub, None);
        nodes_explored += 1;
        qp_iterations += root.iterations;
        self.record(&mut trace, next_id, None, &lb, &ub, &root);
        match root.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => {
                return Ok(self.finish(None, f64::INFINITY, MiqpStatus::Infeasible, nodes_explored, qp_iterations, trace));
            }
            QpStatus::Unbounded | QpStatus::IterLimit => {
                // Treat as a numerical failure of the relaxation; no bound can be certified.
                return Ok(self.finish(incumbent, f64::NEG_INFINITY, MiqpStatus::NodeLimit, nodes_explored, qp_iterations, trace));
            }
        }
        let root_node = Node {
            id: next_id,
            depth: 0,
            bound: root.objective,
            lb,
            ub,
            warm: WarmStart::from_solution(&root),
            x: root.x,
        };
        next_id += 1;

        if self.is_integral(&root_node.x) {
            let better = incumbent
                .as_ref()
                .is_none_or(|(obj, _)| root_node.bound < *obj - self.prune_tol(*obj));
            if better {
                if let Some(t) = trace.as_mut() {
                    t.incumbents.push(root_node.bound);
                }
                incumbent = Some((root_node.bound, root_node.x.clone()));
            }
            let bound = incumbent.as_ref().map_or(root_node.bound, |(o, _)| *o);
            return Ok(self.finish(incumbent, bound, MiqpStatus::Optimal, nodes_explored, qp_iterations, trace));
        }

        let mut stack: Vec<Node> = Vec::new();
        let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::new();
        if incumbent.is_some() {
            heap.push(HeapEntry(root_node));
        } else {
            stack.push(root_node);
        }

        loop {
            let node = if let Some(n) = stack.pop() {
                n
            } else if let Some(HeapEntry(n)) = heap.pop() {
                n
            } else {
                break;
            };
            if let Some((obj, _)) = &incumbent {
                if node.bound >= *obj - self.prune_tol(*obj) {
                    continue;
                }
            }
            if nodes_explored + 2 > self.settings.node_limit {
                let open_bound = heap
                    .iter()
                    .map(|e| e.0.bound)
                    .chain(stack.iter().map(|n| n.bound))
                    .fold(node.bound, f64::min);
                return Ok(self.finish(incumbent, open_bound, MiqpStatus::NodeLimit, nodes_explored, qp_iterations, trace));
            }

            let var = branch_rule_tol(node.x.as_slice(), &self.integer_set, self.settings.int_tol)?;
            let value = node.x[var];
            let mut children = Vec::with_capacity(2);
            for down in [true, false] {
                let mut clb = node.lb.clone();
                let mut cub = node.ub.clone();
                if down {
                    cub[var] = value.floor();
                } else {
                    clb[var] = value.ceil();
                }
                let sol = self.qp.solve_with_bounds(&clb, &cub, Some(&node.warm));
                nodes_explored += 1;
                qp_iterations += sol.iterations;
                let id = next_id;
                next_id += 1;
                self.record(&mut trace, id, Some(node.id), &clb, &cub, &sol);
                if sol.status != QpStatus::Optimal {
                    continue;
                }
                if let Some((obj, _)) = &incumbent {
                    if sol.objective >= *obj - self.prune_tol(*obj) {
                        continue;
                    }
                }
                if self.is_integral(&sol.x) {
                    if let Some(t) = trace.as_mut() {
                        t.incumbents.push(sol.objective);
                    }
                    incumbent = Some((sol.objective, sol.x));
                    if !stack.is_empty() {
                        for n in stack.drain(..) {
                            heap.push(HeapEntry(n));
                        }
                    }
                    continue;
                }
                children.push(Node {
                    id,
                    depth: node.depth + 1,
                    bound: sol.objective,
                    lb: clb,
                    ub: cub,
                    warm: WarmStart::from_solution(&sol),
                    x: sol.x,
                });
            }
            if incumbent.is_none() {
                // Down child ends on top of the stack.
                for c in children.into_iter().rev() {
                    stack.push(c);
                }
            } else {
                for c in children {
                    heap.push(HeapEntry(c));
                }
            }
        }

        match incumbent {
            Some((obj, x)) => Ok(self.finish(Some((obj, x)), obj, MiqpStatus::Optimal, nodes_explored, qp_iterations, trace)),
            None => Ok(self.finish(None, f64::INFINITY, MiqpStatus::Infeasible, nodes_explored, qp_iterations, trace)),
        }
    }

    fn record(
        &self,
        trace: &mut Option<SearchTrace>,
        id: usize,
        parent: Option<usize>,
        lb: &[f64],
        ub: &[f64],
        sol: &crate::qp::QpSolution,
    ) {
        if let Some(t) = trace.as_mut() {
            t.nodes.push(NodeRecord {
                id,
                parent,
                bounds: self.integer_set.iter().map(|&i| (lb[i], ub[i])).collect(),
                relaxation: if sol.status == QpStatus::Optimal {
                    sol.objective
                } else {
                    f64::INFINITY
                },
            });
        }
    }

    fn finish(
        &self,
        incumbent: Option<(f64, DVector<f64>)>,
        bound: f64,
        status: MiqpStatus,
        nodes_explored: usize,
        qp_iterations: usize,
        trace: Option<SearchTrace>,
    ) -> MiqpSolution {
        match incumbent {
            Some((objective, x)) => {
                let gap = if status == MiqpStatus::Optimal {
                    0.0
                } else {
                    ((objective - bound) / objective.abs().max(1.0)).max(0.0)
                };
                MiqpSolution {
                    x,
                    objective,
                    status,
                    nodes_explored,
                    gap,
                    best_bound: if status == MiqpStatus::Optimal { objective } else { bound },
                    qp_iterations,
                    trace,
                }
            }
            None => MiqpSolution {
                x: DVector::zeros(0),
                objective: f64::INFINITY,
                status,
                nodes_explored,
                gap: f64::INFINITY,
                best_bound: bound,
                qp_iterations,
                trace,
            },
        }
    }
}
