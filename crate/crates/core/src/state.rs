//! Bipartite graph view of a branch-and-bound node: variable features,
//! constraint features and one feature per nonzero coefficient.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{effective_bounds, BasisStatus, BoundOverrides, LpSolution};
use crate::milp::{MilpInstance, Sense};

pub const VAR_FEATURES: usize = 10;
pub const CON_FEATURES: usize = 5;
pub const EDGE_FEATURES: usize = 1;

pub const FEATURE_CLIP: f64 = 10.0;
const INTEGRALITY_TOL: f64 = 1e-6;
const TIGHT_TOL: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum StateError {
    #[error("cannot extract features from a non-optimal LP ({0:?})")]
    NonOptimalLp(crate::lp::LpStatus),
}

/// Edge between constraint `con` and variable `var` carrying the
/// row-normalized coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub con: usize,
    pub var: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteState {
    pub n_vars: usize,
    pub n_cons: usize,
    /// Row-major `n_vars x VAR_FEATURES`.
    pub var_features: Vec<f64>,
    /// Row-major `n_cons x CON_FEATURES`.
    pub con_features: Vec<f64>,
    pub edges: Vec<Edge>,
    pub candidate_mask: Vec<bool>,
    pub expert_action: Option<usize>,
}

impl BipartiteState {
    pub fn var_row(&self, j: usize) -> &[f64] {
        &self.var_features[j * VAR_FEATURES..(j + 1) * VAR_FEATURES]
    }

    pub fn con_row(&self, i: usize) -> &[f64] {
        &self.con_features[i * CON_FEATURES..(i + 1) * CON_FEATURES]
    }

    pub fn candidates(&self) -> Vec<usize> {
        (0..self.n_vars).filter(|&j| self.candidate_mask[j]).collect()
    }

    pub fn with_label(mut self, action: usize) -> Self {
        self.expert_action = Some(action);
        self
    }

    /// Structural invariants: dimensions, finiteness, clipping and a label
    /// that points at a candidate.
    pub fn validate(&self) -> Result<(), String> {
        if self.var_features.len() != self.n_vars * VAR_FEATURES
            || self.con_features.len() != self.n_cons * CON_FEATURES
            || self.candidate_mask.len() != self.n_vars
        {
            return Err("feature dimensions do not match n_vars / n_cons".into());
        }
        let in_range = |v: &f64| v.is_finite() && v.abs() <= FEATURE_CLIP;
        if !self.var_features.iter().all(in_range) || !self.con_features.iter().all(in_range) {
            return Err("feature outside [-10, 10] or non-finite".into());
        }
        for e in &self.edges {
            if e.con >= self.n_cons || e.var >= self.n_vars || !in_range(&e.value) || e.value == 0.0 {
                return Err(format!("bad edge {e:?}"));
            }
        }
        if let Some(a) = self.expert_action {
            if a >= self.n_vars || !self.candidate_mask[a] {
                return Err(format!("label {a} is not a candidate"));
            }
        }
        Ok(())
    }
}

fn clip(v: f64) -> f64 {
    v.clamp(-FEATURE_CLIP, FEATURE_CLIP)
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Builds the bipartite state of a node from its LP solution.
///
/// Variable features: `c_j/|c|inf, lb, ub, is_integer, x_j, frac(x_j),
/// is_basic, d_j/|c|inf, at_lower, at_upper`. Constraint features:
/// `b_i/|a_i|inf, sense (LE -1, EQ 0, GE +1), y_i*|a_i|inf/|c|inf,
/// slack_i/|a_i|inf, tight`. Edge feature: `a_ij/|a_i|inf`. Everything is
/// clipped to `[-10, 10]`; row features are invariant to scaling a row.
pub fn extract_state(
    inst: &MilpInstance,
    overrides: &BoundOverrides,
    lp: &LpSolution,
) -> Result<BipartiteState, StateError> {
    if !lp.is_optimal() {
        return Err(StateError::NonOptimalLp(lp.status));
    }
    let n = inst.n_vars();
    let m = inst.n_cons();
    let (lb, ub) = effective_bounds(inst, overrides);
    let obj_norm = inst.obj_norm_inf();

    let mut var_features = Vec::with_capacity(n * VAR_FEATURES);
    let mut candidate_mask = Vec::with_capacity(n);
    for j in 0..n {
        let x = lp.x[j];
        let fractional = inst.is_integer[j] && (x - x.round()).abs() > INTEGRALITY_TOL;
        // Values within the integrality tolerance count as integral, so a
        // 1 - 1e-16 does not show up as fractionality ~1.
        let frac = if fractional { x - x.floor() } else { 0.0 };
        candidate_mask.push(fractional);
        let status = lp.basis[j];
        var_features.extend([
            inst.obj[j] / obj_norm,
            lb[j],
            ub[j],
            flag(inst.is_integer[j]),
            x,
            frac,
            flag(status == BasisStatus::Basic),
            lp.reduced_costs[j] / obj_norm,
            flag(status == BasisStatus::AtLower),
            flag(status == BasisStatus::AtUpper),
        ]);
    }
    var_features.iter_mut().for_each(|v| *v = clip(*v));

    let mut con_features = Vec::with_capacity(m * CON_FEATURES);
    let mut edges = Vec::with_capacity(inst.nnz());
    for i in 0..m {
        let norm = inst.row_norm_inf(i);
        let slack = (inst.rhs[i] - inst.row_activity(i, &lp.x)) / norm;
        let sense = match inst.sense[i] {
            Sense::Le => -1.0,
            Sense::Eq => 0.0,
            Sense::Ge => 1.0,
        };
        con_features.extend([
            clip(inst.rhs[i] / norm),
            sense,
            clip(lp.duals[i] * norm / obj_norm),
            clip(slack),
            flag(slack.abs() <= TIGHT_TOL),
        ]);
        for &(j, a) in &inst.rows[i] {
            edges.push(Edge {
                con: i,
                var: j,
                value: clip(a / norm),
            });
        }
    }

    Ok(BipartiteState {
        n_vars: n,
        n_cons: m,
        var_features,
        con_features,
        edges,
        candidate_mask,
        expert_action: None,
    })
}

#[derive(Debug, Error)]
pub enum SampleIoError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed sample on line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    n: usize,
    m: usize,
    nnz: usize,
    expert_action: Option<usize>,
}

/// On-disk record: header plus flat arrays. `E` is `[con, var, value]`
/// triples flattened; `mask` holds 0/1.
#[derive(Serialize, Deserialize)]
struct SampleRecord {
    header: SampleHeader,
    #[serde(rename = "V")]
    v: Vec<f64>,
    #[serde(rename = "C")]
    c: Vec<f64>,
    #[serde(rename = "E")]
    e: Vec<f64>,
    mask: Vec<u8>,
}

pub fn sample_to_json(s: &BipartiteState) -> String {
    let rec = SampleRecord {
        header: SampleHeader {
            n: s.n_vars,
            m: s.n_cons,
            nnz: s.edges.len(),
            expert_action: s.expert_action,
        },
        v: s.var_features.clone(),
        c: s.con_features.clone(),
        e: s
            .edges
            .iter()
            .flat_map(|e| [e.con as f64, e.var as f64, e.value])
            .collect(),
        mask: s.candidate_mask.iter().map(|&b| b as u8).collect(),
    };
    serde_json::to_string(&rec).expect("sample serialization cannot fail")
}

pub fn sample_from_json(text: &str) -> Result<BipartiteState, String> {
    let rec: SampleRecord = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let h = rec.header;
    if rec.e.len() != 3 * h.nnz {
        return Err(format!("E has {} values, header says nnz = {}", rec.e.len(), h.nnz));
    }
    let edges = rec
        .e
        .chunks_exact(3)
        .map(|t| Edge {
            con: t[0] as usize,
            var: t[1] as usize,
            value: t[2],
        })
        .collect();
    let state = BipartiteState {
        n_vars: h.n,
        n_cons: h.m,
        var_features: rec.v,
        con_features: rec.c,
        edges,
        candidate_mask: rec.mask.iter().map(|&b| b != 0).collect(),
        expert_action: h.expert_action,
    };
    state.validate()?;
    Ok(state)
}

/// Writes one JSON record per line.
pub fn write_samples<W: Write>(mut out: W, samples: &[BipartiteState]) -> std::io::Result<()> {
    for s in samples {
        writeln!(out, "{}", sample_to_json(s))?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(input: R) -> Result<Vec<BipartiteState>, SampleIoError> {
    let mut out = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(sample_from_json(&line).map_err(|message| SampleIoError::Malformed {
            line: k + 1,
            message,
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::{solve_lp, LpStatus};
    use crate::milp::{canonicalize, RawInstance};

    /// min 2x0 + 3x1  s.t.  2x0 + 4x1 >= 3,  x in [0,1]^2, both integer.
    fn toy() -> MilpInstance {
        canonicalize(RawInstance {
            name: "toy".into(),
            maximize: false,
            obj: vec![2.0, 3.0],
            var_lb: vec![0.0, 0.0],
            var_ub: vec![1.0, 1.0],
            is_integer: vec![true, true],
            rows: vec![vec![(0, 2.0), (1, 4.0)]],
            sense: vec![Sense::Ge],
            rhs: vec![3.0],
            sign_flip: false,
        })
        .unwrap()
    }

    #[test]
    fn toy_features_match_hand_calculation() {
        // Cost per unit of coverage: x0 gives 2/2 = 1, x1 gives 3/4 = 0.75,
        // so the LP sets x1 = 0.75, x0 = 0 with dual y = 3/4 and reduced
        // cost d0 = 2 - 2 * 0.75 = 0.5.
        let inst = toy();
        let lp = solve_lp(&inst, &BoundOverrides::new());
        assert_eq!(lp.status, LpStatus::Optimal);
        let s = extract_state(&inst, &BoundOverrides::new(), &lp).unwrap();
        let v0 = [2.0 / 3.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.5 / 3.0, 1.0, 0.0];
        let v1 = [1.0, 0.0, 1.0, 1.0, 0.75, 0.75, 1.0, 0.0, 0.0, 0.0];
        let c0 = [0.75, 1.0, 0.75 * 4.0 / 3.0, 0.0, 1.0];
        for (got, want) in s.var_row(0).iter().zip(v0).chain(s.var_row(1).iter().zip(v1)) {
            assert!((got - want).abs() < 1e-12, "{:?}", s.var_features);
        }
        for (got, want) in s.con_row(0).iter().zip(c0) {
            assert!((got - want).abs() < 1e-12, "{:?}", s.con_features);
        }
        assert_eq!(
            s.edges,
            vec![
                Edge { con: 0, var: 0, value: 0.5 },
                Edge { con: 0, var: 1, value: 1.0 }
            ]
        );
        assert_eq!(s.candidate_mask, vec![false, true]);
        s.validate().unwrap();
    }

    #[test]
    fn scaling_a_row_leaves_row_features_unchanged() {
        let inst = toy();
        let mut scaled = inst.clone();
        scaled.rows[0].iter_mut().for_each(|e| e.1 *= 10.0);
        scaled.rhs[0] *= 10.0;
        let ov = BoundOverrides::new();
        let a = extract_state(&inst, &ov, &solve_lp(&inst, &ov)).unwrap();
        let b = extract_state(&scaled, &ov, &solve_lp(&scaled, &ov)).unwrap();
        // The dual comes out of a differently scaled tableau, so it matches
        // to rounding; every other row feature is bitwise equal.
        for (k, (x, y)) in a.con_features.iter().zip(&b.con_features).enumerate() {
            if k % CON_FEATURES == 2 {
                assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            } else {
                assert_eq!(x.to_bits(), y.to_bits(), "feature {k}");
            }
        }
        assert_eq!(a.edges, b.edges);
    }

    #[test]
    fn integral_node_has_no_candidates() {
        let inst = toy();
        let mut ov = BoundOverrides::new();
        ov.insert(1, (1.0, 1.0));
        let lp = solve_lp(&inst, &ov);
        let s = extract_state(&inst, &ov, &lp).unwrap();
        assert!(s.candidate_mask.iter().all(|&c| !c));
        assert_eq!(s.var_row(1)[1], 1.0, "lb reflects the override");
    }

    #[test]
    fn non_optimal_lp_is_rejected() {
        let inst = toy();
        let mut ov = BoundOverrides::new();
        ov.insert(0, (0.0, 0.0));
        ov.insert(1, (0.0, 0.0));
        let lp = solve_lp(&inst, &ov);
        assert_eq!(lp.status, LpStatus::Infeasible);
        assert_eq!(
            extract_state(&inst, &ov, &lp),
            Err(StateError::NonOptimalLp(LpStatus::Infeasible))
        );
    }

    #[test]
    fn sample_record_round_trips() {
        let inst = toy();
        let ov = BoundOverrides::new();
        let s = extract_state(&inst, &ov, &solve_lp(&inst, &ov)).unwrap().with_label(1);
        let mut buf = Vec::new();
        write_samples(&mut buf, std::slice::from_ref(&s)).unwrap();
        let back = read_samples(buf.as_slice()).unwrap();
        assert_eq!(back, vec![s]);
    }
}
