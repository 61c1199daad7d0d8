use super::{effective_bounds, BasisStatus, BoundOverrides, LpSolution, LpStatus};
use crate::milp::{MilpInstance, Sense};

/// Reduced-cost threshold for entering candidates.
const OPT_TOL: f64 = 1e-9;
/// Smallest tableau entry accepted as a pivot.
const PIVOT_TOL: f64 = 1e-10;
/// Step length below which a pivot counts as degenerate.
const DEGENERATE_STEP: f64 = 1e-12;
const PHASE1_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
enum VarState {
    Basic(usize),
    Lower,
    Upper,
}

enum Outcome {
    Optimal,
    IterationLimit,
    Unbounded,
}

/// Dense tableau `B^-1 [A | I | Art]` for the columns structural, slack,
/// artificial (in that order).
struct Tableau {
    n: usize,
    m: usize,
    cols: usize,
    t: Vec<Vec<f64>>,
    beta: Vec<f64>,
    basic: Vec<usize>,
    state: Vec<VarState>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    cost: Vec<f64>,
    d: Vec<f64>,
    rhs: Vec<f64>,
    iterations: usize,
    max_iterations: usize,
    degenerate_run: usize,
    bland: bool,
}

impl Tableau {
    fn value(&self, j: usize) -> f64 {
        match self.state[j] {
            VarState::Basic(r) => self.beta[r],
            VarState::Lower => self.lb[j],
            VarState::Upper => self.ub[j],
        }
    }

    fn set_costs(&mut self, cost: Vec<f64>) {
        self.cost = cost;
        self.refresh_reduced_costs();
    }

    fn refresh_reduced_costs(&mut self) {
        let mut d = self.cost.clone();
        for (r, &b) in self.basic.iter().enumerate() {
            let cb = self.cost[b];
            if cb != 0.0 {
                for (dj, tj) in d.iter_mut().zip(&self.t[r]) {
                    *dj -= cb * tj;
                }
            }
        }
        for &b in &self.basic {
            d[b] = 0.0;
        }
        self.d = d;
    }

    /// Recomputes basic values as `B^-1 b - sum_nonbasic T_j x_j`, where the
    /// slack columns of the tableau hold `B^-1`.
    fn refresh_basic_values(&mut self) {
        let (n, m) = (self.n, self.m);
        for r in 0..m {
            let mut v: f64 = (0..m).map(|i| self.t[r][n + i] * self.rhs[i]).sum();
            for j in 0..self.cols {
                if !matches!(self.state[j], VarState::Basic(_)) {
                    let xj = self.value(j);
                    if xj != 0.0 {
                        v -= self.t[r][j] * xj;
                    }
                }
            }
            self.beta[r] = v;
        }
    }

    fn entering(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..self.cols {
            if self.lb[j] >= self.ub[j] {
                continue;
            }
            let dir = match self.state[j] {
                VarState::Basic(_) => continue,
                VarState::Lower if self.d[j] < -OPT_TOL => 1.0,
                VarState::Upper if self.d[j] > OPT_TOL => -1.0,
                _ => continue,
            };
            if self.bland {
                return Some((j, dir));
            }
            if best.is_none_or(|(b, _)| self.d[j].abs() > self.d[b].abs()) {
                best = Some((j, dir));
            }
        }
        best
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let p = self.t[r][j];
        for v in self.t[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.t[r].clone();
        for (k, row) in self.t.iter_mut().enumerate() {
            if k == r {
                continue;
            }
            let f = row[j];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[j] = 0.0;
            }
        }
        let f = self.d[j];
        if f != 0.0 {
            for (v, pv) in self.d.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
        }
        self.d[j] = 0.0;
    }

    /// Runs primal simplex iterations on the current costs.
    fn optimize(&mut self) -> Outcome {
        loop {
            let Some((j, dir)) = self.entering() else {
                return Outcome::Optimal;
            };
            if self.iterations >= self.max_iterations {
                return Outcome::IterationLimit;
            }
            self.iterations += 1;

            // Ratio test over the basic rows.
            let mut leave: Option<(usize, f64, f64)> = None;
            for r in 0..self.m {
                let alpha = self.t[r][j] * dir;
                let b = self.basic[r];
                let limit = if alpha > PIVOT_TOL && self.lb[b].is_finite() {
                    (self.beta[r] - self.lb[b]) / alpha
                } else if alpha < -PIVOT_TOL && self.ub[b].is_finite() {
                    (self.ub[b] - self.beta[r]) / -alpha
                } else {
                    continue;
                };
                let limit = limit.max(0.0);
                let replace = match leave {
                    None => true,
                    Some((cur, cur_alpha, cur_limit)) => {
                        if limit < cur_limit - 1e-12 {
                            true
                        } else if limit <= cur_limit + 1e-12 {
                            if self.bland {
                                b < self.basic[cur]
                            } else {
                                alpha.abs() > cur_alpha.abs()
                            }
                        } else {
                            false
                        }
                    }
                };
                if replace {
                    leave = Some((r, alpha, limit));
                }
            }
            let flip = self.ub[j] - self.lb[j];
            let (step, leave) = match leave {
                Some((r, alpha, limit)) if limit < flip => (limit, Some((r, alpha))),
                _ => (flip, None),
            };
            if step.is_infinite() {
                return Outcome::Unbounded;
            }

            if step <= DEGENERATE_STEP {
                self.degenerate_run += 1;
                if self.degenerate_run >= 2 * self.n.max(1) {
                    self.bland = true;
                }
            } else {
                self.degenerate_run = 0;
            }

            let entering_value = self.value(j) + dir * step;
            for r in 0..self.m {
                let a = self.t[r][j];
                if a != 0.0 {
                    self.beta[r] -= a * dir * step;
                }
            }
            match leave {
                // The entering variable reaches its opposite bound first.
                None => {
                    self.state[j] = if dir > 0.0 { VarState::Upper } else { VarState::Lower };
                }
                Some((r, alpha)) => {
                    let b = self.basic[r];
                    self.state[b] = if alpha > 0.0 { VarState::Lower } else { VarState::Upper };
                    self.pivot(r, j);
                    self.basic[r] = j;
                    self.state[j] = VarState::Basic(r);
                    self.beta[r] = entering_value;
                }
            }
        }
    }
}

fn failed(status: LpStatus, n: usize, m: usize, iterations: usize) -> LpSolution {
    LpSolution {
        status,
        x: vec![0.0; n],
        objective: f64::NAN,
        duals: vec![0.0; m],
        reduced_costs: vec![0.0; n],
        basis: vec![BasisStatus::AtLower; n],
        iterations,
    }
}

/// Solves the LP relaxation of `inst` with `overrides` applied to the
/// variable bounds. Integrality is ignored.
///
/// Phase one minimizes the sum of artificials added to rows whose slack
/// cannot absorb the initial residual; phase two optimizes the objective.
/// Dantzig pricing switches to Bland's rule after `2 * n_vars` consecutive
/// degenerate pivots. The total pivot budget is `50 * (n_vars + n_cons)`.
pub fn solve_lp(inst: &MilpInstance, overrides: &BoundOverrides) -> LpSolution {
    let n = inst.n_vars();
    let m = inst.n_cons();
    let (var_lb, var_ub) = effective_bounds(inst, overrides);
    if var_lb.iter().zip(&var_ub).any(|(l, u)| l > u) {
        return failed(LpStatus::Infeasible, n, m, 0);
    }

    // Structural columns start at the bound their cost prefers.
    let mut start = Vec::with_capacity(n);
    let mut state = Vec::with_capacity(n + 2 * m);
    for j in 0..n {
        if inst.obj[j] < 0.0 {
            start.push(var_ub[j]);
            state.push(VarState::Upper);
        } else {
            start.push(var_lb[j]);
            state.push(VarState::Lower);
        }
    }

    let mut lb = var_lb.clone();
    let mut ub = var_ub.clone();
    for &s in &inst.sense {
        let (l, u) = match s {
            Sense::Le => (0.0, f64::INFINITY),
            Sense::Ge => (f64::NEG_INFINITY, 0.0),
            Sense::Eq => (0.0, 0.0),
        };
        lb.push(l);
        ub.push(u);
    }

    // Rows whose residual the slack cannot take get an artificial.
    let residual: Vec<f64> = (0..m).map(|i| inst.rhs[i] - inst.row_activity(i, &start)).collect();
    let needs_art: Vec<bool> = (0..m)
        .map(|i| {
            let r = residual[i];
            match inst.sense[i] {
                Sense::Le => r < 0.0,
                Sense::Ge => r > 0.0,
                Sense::Eq => r != 0.0,
            }
        })
        .collect();
    let n_art = needs_art.iter().filter(|&&a| a).count();
    let cols = n + m + n_art;
    lb.resize(cols, 0.0);
    ub.resize(cols, f64::INFINITY);

    let mut t = vec![vec![0.0; cols]; m];
    let mut beta = vec![0.0; m];
    let mut basic = vec![0; m];
    state.extend((0..m).map(|i| match inst.sense[i] {
        Sense::Ge => VarState::Upper,
        _ => VarState::Lower,
    }));
    state.resize(cols, VarState::Lower);

    let mut art = n + m;
    for i in 0..m {
        let sign = if needs_art[i] { residual[i].signum() } else { 1.0 };
        for &(j, a) in &inst.rows[i] {
            t[i][j] = a * sign;
        }
        t[i][n + i] = sign;
        if needs_art[i] {
            t[i][art] = 1.0;
            basic[i] = art;
            state[art] = VarState::Basic(i);
            beta[i] = residual[i].abs();
            art += 1;
        } else {
            basic[i] = n + i;
            state[n + i] = VarState::Basic(i);
            beta[i] = residual[i];
        }
    }

    let mut tab = Tableau {
        n,
        m,
        cols,
        t,
        beta,
        basic,
        state,
        lb,
        ub,
        cost: Vec::new(),
        d: Vec::new(),
        rhs: inst.rhs.clone(),
        iterations: 0,
        max_iterations: 50 * (n + m).max(1),
        degenerate_run: 0,
        bland: false,
    };

    if n_art > 0 {
        let mut phase1 = vec![0.0; cols];
        phase1[n + m..].iter_mut().for_each(|c| *c = 1.0);
        tab.set_costs(phase1);
        match tab.optimize() {
            Outcome::Optimal => {}
            Outcome::IterationLimit | Outcome::Unbounded => {
                return failed(LpStatus::IterationLimit, n, m, tab.iterations);
            }
        }
        tab.refresh_basic_values();
        let infeasibility: f64 = (n + m..cols).map(|a| tab.value(a)).sum();
        let scale = 1.0 + inst.rhs.iter().fold(0.0_f64, |s, b| s.max(b.abs()));
        if infeasibility > PHASE1_TOL * scale {
            return failed(LpStatus::Infeasible, n, m, tab.iterations);
        }
        // Drive zero-valued artificials out of the basis where possible.
        for r in 0..m {
            let b = tab.basic[r];
            if b < n + m {
                continue;
            }
            let best = (0..n + m)
                .filter(|&j| !matches!(tab.state[j], VarState::Basic(_)))
                .filter(|&j| tab.t[r][j].abs() > PIVOT_TOL)
                .max_by(|&a, &c| tab.t[r][a].abs().total_cmp(&tab.t[r][c].abs()).then(c.cmp(&a)));
            if let Some(j) = best {
                let v = tab.value(j);
                tab.state[b] = VarState::Lower;
                tab.pivot(r, j);
                tab.basic[r] = j;
                tab.state[j] = VarState::Basic(r);
                tab.beta[r] = v;
            }
        }
        for a in n + m..cols {
            tab.ub[a] = 0.0;
        }
        tab.refresh_basic_values();
        tab.degenerate_run = 0;
        tab.bland = false;
    }

    let mut phase2 = vec![0.0; cols];
    phase2[..n].copy_from_slice(&inst.obj);
    tab.set_costs(phase2);
    match tab.optimize() {
        Outcome::Optimal => {}
        Outcome::IterationLimit | Outcome::Unbounded => {
            return failed(LpStatus::IterationLimit, n, m, tab.iterations);
        }
    }
    tab.refresh_basic_values();

    let x: Vec<f64> = (0..n)
        .map(|j| match tab.state[j] {
            VarState::Basic(r) => tab.beta[r].clamp(var_lb[j], var_ub[j]),
            _ => tab.value(j),
        })
        .collect();
    let duals: Vec<f64> = (0..m).map(|i| -tab.d[n + i]).collect();
    let mut reduced_costs = inst.obj.clone();
    for (i, row) in inst.rows.iter().enumerate() {
        for &(j, a) in row {
            reduced_costs[j] -= duals[i] * a;
        }
    }
    for j in 0..n {
        if matches!(tab.state[j], VarState::Basic(_)) {
            reduced_costs[j] = 0.0;
        }
    }
    let basis = (0..n)
        .map(|j| match tab.state[j] {
            VarState::Basic(_) => BasisStatus::Basic,
            // A fixed variable is reported at whichever bound its reduced
            // cost sign is consistent with.
            _ if var_lb[j] == var_ub[j] => {
                if reduced_costs[j] >= 0.0 {
                    BasisStatus::AtLower
                } else {
                    BasisStatus::AtUpper
                }
            }
            VarState::Lower => BasisStatus::AtLower,
            VarState::Upper => BasisStatus::AtUpper,
        })
        .collect();
    LpSolution {
        status: LpStatus::Optimal,
        objective: inst.objective(&x),
        x,
        duals,
        reduced_costs,
        basis,
        iterations: tab.iterations,
    }
}
