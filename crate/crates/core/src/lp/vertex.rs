use thiserror::Error;

use super::{effective_bounds, BoundOverrides};
use crate::milp::{MilpInstance, Sense};

pub const ORACLE_MAX_VARS: usize = 8;
pub const ORACLE_MAX_CONS: usize = 8;

const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("vertex enumeration limited to {ORACLE_MAX_VARS} variables and {ORACLE_MAX_CONS} rows (got {n_vars}, {n_cons})")]
    TooLarge { n_vars: usize, n_cons: usize },
    #[error("no feasible vertex")]
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertexOptimum {
    pub value: f64,
    pub x: Vec<f64>,
}

/// Exact LP optimum by brute force: every choice of `n` hyperplanes among
/// the variable bounds and the rows is intersected, and the cheapest
/// feasible intersection wins. Independent of the simplex code.
pub fn vertex_oracle(
    inst: &MilpInstance,
    overrides: &BoundOverrides,
) -> Result<VertexOptimum, OracleError> {
    let n = inst.n_vars();
    let m = inst.n_cons();
    if n > ORACLE_MAX_VARS || m > ORACLE_MAX_CONS {
        return Err(OracleError::TooLarge { n_vars: n, n_cons: m });
    }
    let (lb, ub) = effective_bounds(inst, overrides);
    if lb.iter().zip(&ub).any(|(l, u)| l > u) {
        return Err(OracleError::Infeasible);
    }

    // Candidate hyperplanes a.x = b: lower bounds, upper bounds, rows.
    let mut planes: Vec<(Vec<f64>, f64, Option<usize>)> = Vec::with_capacity(2 * n + m);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        planes.push((e.clone(), lb[j], Some(j)));
        planes.push((e, ub[j], Some(j)));
    }
    for i in 0..m {
        let mut a = vec![0.0; n];
        for &(j, v) in &inst.rows[i] {
            a[j] = v;
        }
        planes.push((a, inst.rhs[i], None));
    }

    let feasible = |x: &[f64]| {
        x.iter()
            .enumerate()
            .all(|(j, &v)| v >= lb[j] - FEAS_TOL * (1.0 + lb[j].abs()) && v <= ub[j] + FEAS_TOL * (1.0 + ub[j].abs()))
            && (0..m).all(|i| {
                let act: f64 = inst.rows[i].iter().map(|&(j, a)| a * x[j]).sum();
                let tol = FEAS_TOL * (1.0 + inst.rhs[i].abs());
                match inst.sense[i] {
                    Sense::Le => act <= inst.rhs[i] + tol,
                    Sense::Ge => act >= inst.rhs[i] - tol,
                    Sense::Eq => (act - inst.rhs[i]).abs() <= tol,
                }
            })
    };

    let mut best: Option<VertexOptimum> = None;
    let mut consider = |x: Vec<f64>| {
        if feasible(&x) {
            let value: f64 = inst.obj.iter().zip(&x).map(|(c, v)| c * v).sum();
            if best.as_ref().is_none_or(|b| value < b.value) {
                best = Some(VertexOptimum { value, x });
            }
        }
    };

    if n == 0 {
        consider(Vec::new());
        return best.ok_or(OracleError::Infeasible);
    }

    let mut pick: Vec<usize> = (0..n).collect();
    let k = planes.len();
    loop {
        let var_twice = pick.windows(2).any(|w| {
            matches!((planes[w[0]].2, planes[w[1]].2), (Some(a), Some(b)) if a == b)
        });
        if !var_twice {
            if let Some(x) = solve_square(pick.iter().map(|&p| (&planes[p].0, planes[p].1))) {
                consider(x);
            }
        }
        // Next combination in lexicographic order.
        let mut i = n;
        loop {
            if i == 0 {
                return best.ok_or(OracleError::Infeasible);
            }
            i -= 1;
            if pick[i] < k - n + i {
                break;
            }
        }
        pick[i] += 1;
        for t in i + 1..n {
            pick[t] = pick[t - 1] + 1;
        }
    }
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_square<'a>(rows: impl Iterator<Item = (&'a Vec<f64>, f64)>) -> Option<Vec<f64>> {
    let mut a: Vec<Vec<f64>> = rows
        .map(|(r, b)| {
            let mut row = r.clone();
            row.push(b);
            row
        })
        .collect();
    let n = a.len();
    for col in 0..n {
        let p = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[p][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, p);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    Some((0..n).map(|r| a[r][n] / a[r][r]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::milp::{canonicalize, RawInstance};

    fn one_var(rows: Vec<Vec<(usize, f64)>>, sense: Vec<Sense>, rhs: Vec<f64>) -> MilpInstance {
        canonicalize(RawInstance {
            name: "t".into(),
            maximize: false,
            obj: vec![1.0],
            var_lb: vec![0.0],
            var_ub: vec![3.0],
            is_integer: vec![false],
            rows,
            sense,
            rhs,
            sign_flip: false,
        })
        .unwrap()
    }

    #[test]
    fn conflicting_rows_are_infeasible() {
        let inst = one_var(
            vec![vec![(0, 1.0)], vec![(0, 1.0)]],
            vec![Sense::Ge, Sense::Le],
            vec![2.0, 1.0],
        );
        assert_eq!(vertex_oracle(&inst, &BoundOverrides::new()), Err(OracleError::Infeasible));
    }

    #[test]
    fn single_row_optimum() {
        let inst = one_var(vec![vec![(0, 2.0)]], vec![Sense::Ge], vec![3.0]);
        let opt = vertex_oracle(&inst, &BoundOverrides::new()).unwrap();
        assert!((opt.value - 1.5).abs() < 1e-12);
    }

    #[test]
    fn nine_variables_is_too_large() {
        let inst = canonicalize(RawInstance {
            name: "big".into(),
            maximize: false,
            obj: vec![1.0; 9],
            var_lb: vec![0.0; 9],
            var_ub: vec![1.0; 9],
            is_integer: vec![false; 9],
            rows: vec![],
            sense: vec![],
            rhs: vec![],
            sign_flip: false,
        })
        .unwrap();
        assert_eq!(
            vertex_oracle(&inst, &BoundOverrides::new()),
            Err(OracleError::TooLarge { n_vars: 9, n_cons: 0 })
        );
    }
}
