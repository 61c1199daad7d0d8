//! LP relaxations of [`MilpInstance`]s.
//!
//! [`solve_lp`] is a dense bounded-variable primal simplex; instances here
//! are tiny, so the full tableau is kept and pivoted explicitly. The
//! [`vertex_oracle`] enumerates polytope vertices and exists to check it.

mod simplex;
mod vertex;

use std::collections::BTreeMap;

pub use simplex::solve_lp;
pub use vertex::{vertex_oracle, OracleError, VertexOptimum, ORACLE_MAX_CONS, ORACLE_MAX_VARS};

use crate::milp::{MilpInstance, Sense};

/// Primal feasibility and optimality tolerance.
pub const LP_TOL: f64 = 1e-7;

/// Per-variable bound replacements applied on top of the instance bounds,
/// ordered by variable index.
pub type BoundOverrides = BTreeMap<usize, (f64, f64)>;

/// Effective `(lb, ub)` of every variable under `overrides`.
pub fn effective_bounds(inst: &MilpInstance, overrides: &BoundOverrides) -> (Vec<f64>, Vec<f64>) {
    let mut lb = inst.var_lb.clone();
    let mut ub = inst.var_ub.clone();
    for (&j, &(l, u)) in overrides {
        lb[j] = l;
        ub[j] = u;
    }
    (lb, ub)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisStatus {
    Basic,
    AtLower,
    AtUpper,
}

/// Result of an LP relaxation solve. Objective, duals and reduced costs are
/// in the canonical minimize orientation; `duals[i]` is `>= 0` on binding
/// GE rows and `<= 0` on binding LE rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub duals: Vec<f64>,
    pub reduced_costs: Vec<f64>,
    pub basis: Vec<BasisStatus>,
    pub iterations: usize,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }

    /// `b'y + sum_j d_j * x_j` over the nonbasic bounds: equals the primal
    /// objective at an optimal basis.
    pub fn dual_objective(&self, inst: &MilpInstance, overrides: &BoundOverrides) -> f64 {
        let (lb, ub) = effective_bounds(inst, overrides);
        let by: f64 = inst.rhs.iter().zip(&self.duals).map(|(b, y)| b * y).sum();
        let bounds: f64 = self
            .reduced_costs
            .iter()
            .enumerate()
            .map(|(j, &d)| if d >= 0.0 { d * lb[j] } else { d * ub[j] })
            .sum();
        by + bounds
    }

    /// Row slacks `b_i - a_i x`.
    pub fn slacks(&self, inst: &MilpInstance) -> Vec<f64> {
        (0..inst.n_cons())
            .map(|i| inst.rhs[i] - inst.row_activity(i, &self.x))
            .collect()
    }
}

/// Maximum violation of the optimality certificate of `sol`: primal
/// residuals, dual sign conditions, complementary slackness and reduced-cost
/// sign consistency with the basis.
pub fn certificate_violation(
    inst: &MilpInstance,
    overrides: &BoundOverrides,
    sol: &LpSolution,
) -> f64 {
    let (lb, ub) = effective_bounds(inst, overrides);
    let mut worst = 0.0_f64;
    for (j, &v) in sol.x.iter().enumerate() {
        worst = worst.max(lb[j] - v).max(v - ub[j]);
    }
    let slacks = sol.slacks(inst);
    for i in 0..inst.n_cons() {
        let (s, y) = (slacks[i], sol.duals[i]);
        let (primal, dual_sign) = match inst.sense[i] {
            Sense::Le => (-s, y),
            Sense::Ge => (s, -y),
            Sense::Eq => (s.abs(), 0.0),
        };
        worst = worst.max(primal).max(dual_sign).max((s * y).abs());
    }
    for (j, (&d, &status)) in sol.reduced_costs.iter().zip(&sol.basis).enumerate() {
        let v = match status {
            BasisStatus::Basic => d.abs(),
            BasisStatus::AtLower => (-d).max(0.0).max(((sol.x[j] - lb[j]) * d).abs()),
            BasisStatus::AtUpper => d.max(0.0).max(((ub[j] - sol.x[j]) * d).abs()),
        };
        worst = worst.max(v);
    }
    worst
}
