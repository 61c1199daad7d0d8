//! MILP instances: the canonical minimization form, synthetic generators and
//! the versioned JSON instance file.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sense {
    #[serde(rename = "LE")]
    Le,
    #[serde(rename = "GE")]
    Ge,
    #[serde(rename = "EQ")]
    Eq,
}

impl Sense {
    pub fn as_str(self) -> &'static str {
        match self {
            Sense::Le => "LE",
            Sense::Ge => "GE",
            Sense::Eq => "EQ",
        }
    }

    pub fn parse(s: &str) -> Option<Sense> {
        match s {
            "LE" => Some(Sense::Le),
            "GE" => Some(Sense::Ge),
            "EQ" => Some(Sense::Eq),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MilpError {
    #[error("row {row} references variable {var}, but the instance has {n_vars} variables")]
    IndexOutOfRange { row: usize, var: usize, n_vars: usize },
    #[error("row {row} lists variable {var} more than once")]
    DuplicateIndex { row: usize, var: usize },
    #[error("integer variable {var} has a non-finite bound")]
    InfiniteBoundOnIntegerVar { var: usize },
    #[error("variable {var} has a non-finite bound; every variable must be boxed")]
    InfiniteBound { var: usize },
    #[error("integer variable {var} has fractional bounds [{lb}, {ub}]")]
    FractionalIntegerBound { var: usize, lb: f64, ub: f64 },
    #[error("variable {var} has lb {lb} > ub {ub}")]
    InvertedBounds { var: usize, lb: f64, ub: f64 },
    #[error("length mismatch: {what}")]
    LengthMismatch { what: String },
    #[error("non-finite coefficient in {what}")]
    NonFinite { what: String },
    #[error("degenerate generator parameters: {0}")]
    DegenerateParameters(String),
}

#[derive(Debug, Error)]
pub enum InstanceIoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("instance file has schema version {found}, expected {expected}")]
    SchemaVersionMismatch { found: u64, expected: u64 },
    #[error("invalid instance: {0}")]
    Invalid(#[from] MilpError),
}

/// A minimization MILP with boxed variables and sparse rows.
///
/// Constructed through [`canonicalize`], which enforces the structural
/// invariants; all other code treats it as immutable.
#[derive(Debug, Clone, PartialEq)]
pub struct MilpInstance {
    pub name: String,
    pub obj: Vec<f64>,
    pub var_lb: Vec<f64>,
    pub var_ub: Vec<f64>,
    pub is_integer: Vec<bool>,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub sense: Vec<Sense>,
    pub rhs: Vec<f64>,
    /// True when the source objective was a maximization and `obj` holds its
    /// negation.
    pub sign_flip: bool,
}

impl MilpInstance {
    pub fn n_vars(&self) -> usize {
        self.obj.len()
    }

    pub fn n_cons(&self) -> usize {
        self.rows.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Objective value of `x` in canonical (minimize) orientation.
    pub fn objective(&self, x: &[f64]) -> f64 {
        self.obj.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Converts a canonical objective value back to the orientation of the
    /// source instance.
    pub fn reported_objective(&self, value: f64) -> f64 {
        if self.sign_flip {
            -value
        } else {
            value
        }
    }

    pub fn row_activity(&self, row: usize, x: &[f64]) -> f64 {
        self.rows[row].iter().map(|&(j, a)| a * x[j]).sum()
    }

    /// Checks rows and bounds with an absolute tolerance. Integrality is not
    /// checked.
    pub fn is_feasible(&self, x: &[f64], tol: f64) -> bool {
        if x.len() != self.n_vars() {
            return false;
        }
        let bounds_ok = x
            .iter()
            .enumerate()
            .all(|(j, &v)| v >= self.var_lb[j] - tol && v <= self.var_ub[j] + tol);
        bounds_ok
            && (0..self.n_cons()).all(|i| {
                let act = self.row_activity(i, x);
                match self.sense[i] {
                    Sense::Le => act <= self.rhs[i] + tol,
                    Sense::Ge => act >= self.rhs[i] - tol,
                    Sense::Eq => (act - self.rhs[i]).abs() <= tol,
                }
            })
    }

    /// Largest absolute coefficient in row `i`, or 1 for an empty row.
    pub fn row_norm_inf(&self, i: usize) -> f64 {
        let norm = self.rows[i].iter().fold(0.0_f64, |m, &(_, a)| m.max(a.abs()));
        if norm > 0.0 {
            norm
        } else {
            1.0
        }
    }

    /// Largest absolute objective coefficient, or 1 for a zero objective.
    pub fn obj_norm_inf(&self) -> f64 {
        let norm = self.obj.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
        if norm > 0.0 {
            norm
        } else {
            1.0
        }
    }
}

/// An instance as a user or file supplies it: any objective direction, zero
/// coefficients allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInstance {
    pub name: String,
    pub maximize: bool,
    pub obj: Vec<f64>,
    pub var_lb: Vec<f64>,
    pub var_ub: Vec<f64>,
    pub is_integer: Vec<bool>,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub sense: Vec<Sense>,
    pub rhs: Vec<f64>,
    /// Sign flip already applied upstream (kept when re-canonicalizing).
    pub sign_flip: bool,
}

impl From<MilpInstance> for RawInstance {
    fn from(inst: MilpInstance) -> Self {
        RawInstance {
            name: inst.name,
            maximize: false,
            obj: inst.obj,
            var_lb: inst.var_lb,
            var_ub: inst.var_ub,
            is_integer: inst.is_integer,
            rows: inst.rows,
            sense: inst.sense,
            rhs: inst.rhs,
            sign_flip: inst.sign_flip,
        }
    }
}

/// Validates a raw instance and brings it to canonical minimization form.
///
/// Maximization objectives are negated and the flip recorded; GE rows stay
/// GE; explicit zero coefficients are dropped. Canonicalizing an already
/// canonical instance returns it unchanged.
pub fn canonicalize(raw: RawInstance) -> Result<MilpInstance, MilpError> {
    let n = raw.obj.len();
    let m = raw.rows.len();
    for (what, len, want) in [
        ("var_lb", raw.var_lb.len(), n),
        ("var_ub", raw.var_ub.len(), n),
        ("is_integer", raw.is_integer.len(), n),
        ("sense", raw.sense.len(), m),
        ("rhs", raw.rhs.len(), m),
    ] {
        if len != want {
            return Err(MilpError::LengthMismatch {
                what: format!("{what} has {len} entries, expected {want}"),
            });
        }
    }
    if raw.obj.iter().any(|c| !c.is_finite()) {
        return Err(MilpError::NonFinite { what: "obj".into() });
    }
    if raw.rhs.iter().any(|b| !b.is_finite()) {
        return Err(MilpError::NonFinite { what: "rhs".into() });
    }

    for j in 0..n {
        let (lb, ub) = (raw.var_lb[j], raw.var_ub[j]);
        if lb.is_nan() || ub.is_nan() {
            return Err(MilpError::NonFinite {
                what: format!("bounds of variable {j}"),
            });
        }
        if !lb.is_finite() || !ub.is_finite() {
            return Err(if raw.is_integer[j] {
                MilpError::InfiniteBoundOnIntegerVar { var: j }
            } else {
                MilpError::InfiniteBound { var: j }
            });
        }
        if lb > ub {
            return Err(MilpError::InvertedBounds { var: j, lb, ub });
        }
        if raw.is_integer[j] && (lb.fract() != 0.0 || ub.fract() != 0.0) {
            return Err(MilpError::FractionalIntegerBound { var: j, lb, ub });
        }
    }

    let mut rows = Vec::with_capacity(m);
    for (i, row) in raw.rows.into_iter().enumerate() {
        let mut seen = vec![false; n];
        let mut kept = Vec::with_capacity(row.len());
        for (j, a) in row {
            if j >= n {
                return Err(MilpError::IndexOutOfRange {
                    row: i,
                    var: j,
                    n_vars: n,
                });
            }
            if seen[j] {
                return Err(MilpError::DuplicateIndex { row: i, var: j });
            }
            seen[j] = true;
            if !a.is_finite() {
                return Err(MilpError::NonFinite {
                    what: format!("row {i}"),
                });
            }
            if a != 0.0 {
                kept.push((j, a));
            }
        }
        rows.push(kept);
    }

    let obj = if raw.maximize {
        raw.obj.into_iter().map(|c| -c).collect()
    } else {
        raw.obj
    };
    Ok(MilpInstance {
        name: raw.name,
        obj,
        var_lb: raw.var_lb,
        var_ub: raw.var_ub,
        is_integer: raw.is_integer,
        rows,
        sense: raw.sense,
        rhs: raw.rhs,
        sign_flip: raw.sign_flip ^ raw.maximize,
    })
}

const RESAMPLE_LIMIT: usize = 1000;

/// Random weighted set cover: one binary variable per set, one `>= 1` row
/// per item. Every item is covered by at least two sets.
pub fn gen_set_cover(
    seed: u64,
    n_items: usize,
    n_sets: usize,
    density: f64,
) -> Result<MilpInstance, MilpError> {
    if n_items < 2 || n_sets < n_items || !(density > 0.0 && density < 1.0) {
        return Err(MilpError::DegenerateParameters(format!(
            "set cover needs n_items >= 2, n_sets >= n_items, 0 < density < 1 \
             (got {n_items}, {n_sets}, {density})"
        )));
    }
    let mut rng = seeds::rng(seed);
    let mut rows = Vec::with_capacity(n_items);
    for item in 0..n_items {
        let mut attempts = 0;
        let row = loop {
            let row: Vec<(usize, f64)> = (0..n_sets)
                .filter(|_| rng.gen::<f64>() < density)
                .map(|j| (j, 1.0))
                .collect();
            if row.len() >= 2 {
                break row;
            }
            attempts += 1;
            if attempts >= RESAMPLE_LIMIT {
                return Err(MilpError::DegenerateParameters(format!(
                    "item {item} could not be covered twice at density {density}"
                )));
            }
        };
        rows.push(row);
    }
    let obj: Vec<f64> = (0..n_sets).map(|_| rng.gen_range(1..=100) as f64).collect();
    canonicalize(RawInstance {
        name: format!("setcover-s{seed}-{n_items}x{n_sets}"),
        maximize: false,
        obj,
        var_lb: vec![0.0; n_sets],
        var_ub: vec![1.0; n_sets],
        is_integer: vec![true; n_sets],
        rows,
        sense: vec![Sense::Ge; n_items],
        rhs: vec![1.0; n_items],
        sign_flip: false,
    })
}

/// Capacitated assignment: binary `x[i][b]` (variable `i * n_bins + b`),
/// one EQ row per item followed by one capacity LE row per bin.
pub fn gen_assignment(seed: u64, n_items: usize, n_bins: usize) -> Result<MilpInstance, MilpError> {
    if n_items < 2 || n_bins < 2 {
        return Err(MilpError::DegenerateParameters(format!(
            "assignment needs n_items >= 2 and n_bins >= 2 (got {n_items}, {n_bins})"
        )));
    }
    let mut rng = seeds::rng(seed);
    let n = n_items * n_bins;
    let obj: Vec<f64> = (0..n).map(|_| rng.gen_range(1..=100) as f64).collect();

    let mut attempt = 0;
    let (sizes, caps) = loop {
        let sizes: Vec<u32> = (0..n_items).map(|_| rng.gen_range(1..=10)).collect();
        let total: u32 = sizes.iter().sum();
        let max_size = *sizes.iter().max().expect("n_items >= 2");
        // Aim for capacities that bind: roughly 10-40% slack overall.
        let lo = max_size.max(total.div_ceil(n_bins as u32));
        let hi = lo.max((total as f64 * 1.4 / n_bins as f64).ceil() as u32);
        let caps: Vec<u32> = (0..n_bins).map(|_| rng.gen_range(lo..=hi)).collect();
        if greedy_assignment(&sizes, &caps).is_some() {
            break (sizes, caps);
        }
        attempt += 1;
        if attempt >= RESAMPLE_LIMIT {
            return Err(MilpError::DegenerateParameters(format!(
                "no feasible capacity draw for {n_items} items in {n_bins} bins"
            )));
        }
    };

    let mut rows = Vec::with_capacity(n_items + n_bins);
    let mut sense = Vec::with_capacity(n_items + n_bins);
    let mut rhs = Vec::with_capacity(n_items + n_bins);
    for i in 0..n_items {
        rows.push((0..n_bins).map(|b| (i * n_bins + b, 1.0)).collect());
        sense.push(Sense::Eq);
        rhs.push(1.0);
    }
    for b in 0..n_bins {
        rows.push(
            (0..n_items)
                .map(|i| (i * n_bins + b, sizes[i] as f64))
                .collect(),
        );
        sense.push(Sense::Le);
        rhs.push(caps[b] as f64);
    }
    canonicalize(RawInstance {
        name: format!("assign-s{seed}-{n_items}x{n_bins}"),
        maximize: false,
        obj,
        var_lb: vec![0.0; n],
        var_ub: vec![1.0; n],
        is_integer: vec![true; n],
        rows,
        sense,
        rhs,
        sign_flip: false,
    })
}

/// First-fit-decreasing into the bin with the most room left. Returns the bin
/// of every item when it succeeds.
fn greedy_assignment(sizes: &[u32], caps: &[u32]) -> Option<Vec<usize>> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut room: Vec<u32> = caps.to_vec();
    let mut bin_of = vec![0; sizes.len()];
    for i in order {
        let (b, &r) = room
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(&x.0)))?;
        if r < sizes[i] {
            return None;
        }
        room[b] -= sizes[i];
        bin_of[i] = b;
    }
    Some(bin_of)
}

/// A parameterized generator, so configs can name "where instances come
/// from" and regenerate them from a seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum InstanceFamily {
    SetCover { n_items: usize, n_sets: usize, density: f64 },
    Assignment { n_items: usize, n_bins: usize },
}

impl InstanceFamily {
    pub fn generate(&self, seed: u64) -> Result<MilpInstance, MilpError> {
        match *self {
            InstanceFamily::SetCover { n_items, n_sets, density } => gen_set_cover(seed, n_items, n_sets, density),
            InstanceFamily::Assignment { n_items, n_bins } => gen_assignment(seed, n_items, n_bins),
        }
    }

    /// `count` instances, the k-th drawn from `derive(base, [k])`.
    pub fn generate_many(&self, base: u64, count: usize) -> Result<Vec<MilpInstance>, MilpError> {
        (0..count as u64)
            .map(|k| self.generate(seeds::derive(base, &[k])))
            .collect()
    }
}

impl Default for InstanceFamily {
    fn default() -> Self {
        InstanceFamily::SetCover {
            n_items: 10,
            n_sets: 20,
            density: 0.25,
        }
    }
}

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Serialize)]
struct InstanceFileOut<'a> {
    version: u64,
    name: &'a str,
    n_vars: usize,
    obj: &'a [f64],
    lb: &'a [f64],
    ub: &'a [f64],
    integer: &'a [bool],
    rows: Vec<Vec<(usize, f64)>>,
    sense: Vec<&'static str>,
    rhs: &'a [f64],
    sign_flip: bool,
}

#[derive(Deserialize)]
struct InstanceFileIn {
    name: String,
    n_vars: usize,
    obj: Vec<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    integer: Vec<bool>,
    rows: Vec<Vec<(usize, f64)>>,
    sense: Vec<String>,
    rhs: Vec<f64>,
    sign_flip: bool,
}

/// Serializes an instance to the versioned JSON text format. Floats use the
/// shortest representation that reads back to the same value.
pub fn instance_to_json(inst: &MilpInstance) -> String {
    let file = InstanceFileOut {
        version: SCHEMA_VERSION,
        name: &inst.name,
        n_vars: inst.n_vars(),
        obj: &inst.obj,
        lb: &inst.var_lb,
        ub: &inst.var_ub,
        integer: &inst.is_integer,
        rows: inst.rows.clone(),
        sense: inst.sense.iter().map(|s| s.as_str()).collect(),
        rhs: &inst.rhs,
        sign_flip: inst.sign_flip,
    };
    serde_json::to_string(&file).expect("instance serialization cannot fail")
}

/// Line of the first occurrence of `"key"` in `text`, for error reporting.
fn line_of_key(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    text.lines()
        .position(|l| l.contains(&needle))
        .map_or(1, |p| p + 1)
}

pub fn instance_from_json(text: &str) -> Result<MilpInstance, InstanceIoError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| InstanceIoError::Parse {
        line: e.line(),
        field: "<document>".into(),
        message: e.to_string(),
    })?;
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| InstanceIoError::Parse {
            line: line_of_key(text, "version"),
            field: "version".into(),
            message: "missing or non-integer schema version".into(),
        })?;
    if version != SCHEMA_VERSION {
        return Err(InstanceIoError::SchemaVersionMismatch {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let file: InstanceFileIn = serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .unwrap_or("<document>")
            .to_string();
        InstanceIoError::Parse {
            line: line_of_key(text, &field),
            field,
            message: msg,
        }
    })?;
    let mut sense = Vec::with_capacity(file.sense.len());
    for (i, s) in file.sense.iter().enumerate() {
        sense.push(Sense::parse(s).ok_or_else(|| InstanceIoError::Parse {
            line: line_of_key(text, "sense"),
            field: format!("sense[{i}]"),
            message: format!("unknown constraint sense `{s}` (expected LE, GE or EQ)"),
        })?);
    }
    if file.n_vars != file.obj.len() {
        return Err(InstanceIoError::Parse {
            line: line_of_key(text, "n_vars"),
            field: "n_vars".into(),
            message: format!("n_vars = {} but obj has {} entries", file.n_vars, file.obj.len()),
        });
    }
    let inst = canonicalize(RawInstance {
        name: file.name,
        maximize: false,
        obj: file.obj,
        var_lb: file.lb,
        var_ub: file.ub,
        is_integer: file.integer,
        rows: file.rows,
        sense,
        rhs: file.rhs,
        sign_flip: file.sign_flip,
    })?;
    Ok(inst)
}

pub fn write_instance(inst: &MilpInstance, path: &Path) -> Result<(), InstanceIoError> {
    fs::write(path, instance_to_json(inst) + "\n").map_err(|source| InstanceIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_instance(path: &Path) -> Result<MilpInstance, InstanceIoError> {
    let text = fs::read_to_string(path).map_err(|source| InstanceIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    instance_from_json(&text)
}
