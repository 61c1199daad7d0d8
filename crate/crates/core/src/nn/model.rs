use rand::Rng as _;

use super::{ModelParams, NnError, ParamSet, Tensor};
use crate::seeds::Rng;
use crate::state::BipartiteState;

/// `out (r x c) = a (r x k) * w (k x c)`.
fn matmul(a: &[f64], r: usize, k: usize, w: &Tensor) -> Vec<f64> {
    let c = w.cols();
    debug_assert_eq!(w.rows(), k);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                let wr = &w.data[p * c..(p + 1) * c];
                for (o, &wv) in row.iter_mut().zip(wr) {
                    *o += s * wv;
                }
            }
        }
    }
    out
}

/// `out (r x k) = g (r x c) * w^T`, with `w` shaped `k x c`.
fn matmul_t(g: &[f64], r: usize, w: &Tensor) -> Vec<f64> {
    let (k, c) = (w.rows(), w.cols());
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        let gr = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let wr = &w.data[p * c..(p + 1) * c];
            out[i * k + p] = gr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// `grad (k x c) += a^T (k x r) * g (r x c)`.
fn accumulate_at_g(grad: &mut Tensor, a: &[f64], r: usize, k: usize, g: &[f64]) {
    let c = grad.cols();
    for i in 0..r {
        let gr = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                let row = &mut grad.data[p * c..(p + 1) * c];
                for (o, &gv) in row.iter_mut().zip(gr) {
                    *o += s * gv;
                }
            }
        }
    }
}

fn add_bias_relu(pre: &mut [f64], bias: &Tensor) -> Vec<f64> {
    let h = bias.len();
    for row in pre.chunks_exact_mut(h) {
        row.iter_mut().zip(&bias.data).for_each(|(v, b)| *v += b);
    }
    pre.iter().map(|&v| v.max(0.0)).collect()
}

fn sum_rows_into(bias_grad: &mut Tensor, g: &[f64]) {
    let h = bias_grad.len();
    for row in g.chunks_exact(h) {
        bias_grad.data.iter_mut().zip(row).for_each(|(b, v)| *b += v);
    }
}

fn relu_backward(g: &mut [f64], pre: &[f64]) {
    g.iter_mut().zip(pre).for_each(|(gv, &p)| {
        if p <= 0.0 {
            *gv = 0.0
        }
    });
}

/// Intermediate activations of one forward pass.
struct Cache {
    v1_pre: Vec<f64>,
    v1: Vec<f64>,
    c1_pre: Vec<f64>,
    c1: Vec<f64>,
    c2_pre: Vec<f64>,
    c2: Vec<f64>,
    v2_pre: Vec<f64>,
    /// Dropout scale per entry of V2 (all ones outside training).
    keep: Option<Vec<f64>>,
    v2_out: Vec<f64>,
    logits: Vec<f64>,
}

fn check_state(model: &ModelParams, s: &BipartiteState) -> Result<(), NnError> {
    let a = &model.arch;
    if s.var_features.len() != s.n_vars * a.var_in
        || s.con_features.len() != s.n_cons * a.con_in
        || s.candidate_mask.len() != s.n_vars
    {
        return Err(NnError::ShapeMismatch(format!(
            "state {}x{} / {}x{} does not fit arch ({} var, {} con features)",
            s.n_vars,
            s.var_features.len() / s.n_vars.max(1),
            s.n_cons,
            s.con_features.len() / s.n_cons.max(1),
            a.var_in,
            a.con_in
        )));
    }
    if a.edge_in != 1 {
        return Err(NnError::ShapeMismatch("only one edge feature is supported".into()));
    }
    if s.edges.iter().any(|e| e.con >= s.n_cons || e.var >= s.n_vars) {
        return Err(NnError::ShapeMismatch("edge index out of range".into()));
    }
    Ok(())
}

fn run_forward(
    model: &ModelParams,
    s: &BipartiteState,
    dropout: Option<&mut Rng>,
) -> Result<Cache, NnError> {
    check_state(model, s)?;
    let p = &model.params;
    let h = model.arch.embed_dim;
    let (n, m) = (s.n_vars, s.n_cons);

    let mut v1_pre = matmul(&s.var_features, n, model.arch.var_in, &p.w_v);
    let v1 = add_bias_relu(&mut v1_pre, &p.b_v);
    let mut c1_pre = matmul(&s.con_features, m, model.arch.con_in, &p.w_c);
    let c1 = add_bias_relu(&mut c1_pre, &p.b_c);

    // Constraint side: self term plus the sum of messages from incident
    // variables.
    let mut c2_pre = matmul(&c1, m, h, &p.conv_c.u);
    let msg_v = matmul(&v1, n, h, &p.conv_c.m);
    for e in &s.edges {
        let dst = &mut c2_pre[e.con * h..(e.con + 1) * h];
        let src = &msg_v[e.var * h..(e.var + 1) * h];
        for ((d, &sv), &we) in dst.iter_mut().zip(src).zip(&p.conv_c.w_e.data) {
            *d += sv + e.value * we;
        }
    }
    let c2 = add_bias_relu(&mut c2_pre, &p.conv_c.b);

    // Variable side.
    let mut v2_pre = matmul(&v1, n, h, &p.conv_v.u);
    let msg_c = matmul(&c2, m, h, &p.conv_v.m);
    for e in &s.edges {
        let dst = &mut v2_pre[e.var * h..(e.var + 1) * h];
        let src = &msg_c[e.con * h..(e.con + 1) * h];
        for ((d, &sv), &we) in dst.iter_mut().zip(src).zip(&p.conv_v.w_e.data) {
            *d += sv + e.value * we;
        }
    }
    let v2 = add_bias_relu(&mut v2_pre, &p.conv_v.b);

    let rate = model.arch.dropout_rate;
    let keep = match dropout {
        Some(rng) if rate > 0.0 => {
            let scale = 1.0 / (1.0 - rate);
            Some(
                (0..n * h)
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
                    .collect::<Vec<f64>>(),
            )
        }
        _ => None,
    };
    let v2_out = match &keep {
        Some(k) => v2.iter().zip(k).map(|(a, b)| a * b).collect(),
        None => v2,
    };

    let b_o = p.b_o.data[0];
    let logits = (0..n)
        .map(|j| {
            v2_out[j * h..(j + 1) * h]
                .iter()
                .zip(&p.w_o.data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + b_o
        })
        .collect();
    Ok(Cache {
        v1_pre,
        v1,
        c1_pre,
        c1,
        c2_pre,
        c2,
        v2_pre,
        keep,
        v2_out,
        logits,
    })
}

/// Softmax over the masked entries; exactly zero elsewhere.
fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, NnError> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NnError::NoCandidates);
    }
    let mut p: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| if m { (z - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

/// Candidate probabilities. With `train_mode` and a positive dropout rate,
/// dropout masks are drawn from `rng`.
pub fn forward(
    model: &ModelParams,
    state: &BipartiteState,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<Vec<f64>, NnError> {
    let cache = run_forward(model, state, train_mode.then_some(rng))?;
    masked_softmax(&cache.logits, &state.candidate_mask)
}

/// Inference-mode probabilities (no dropout, no randomness).
pub fn predict(model: &ModelParams, state: &BipartiteState) -> Result<Vec<f64>, NnError> {
    let cache = run_forward(model, state, None)?;
    masked_softmax(&cache.logits, &state.candidate_mask)
}

/// Raw per-variable scores before masking (inference mode).
pub fn logits(model: &ModelParams, state: &BipartiteState) -> Result<Vec<f64>, NnError> {
    Ok(run_forward(model, state, None)?.logits)
}

/// Cross-entropy `-log p(label)` computed as a log-sum-exp.
fn cross_entropy(logits: &[f64], mask: &[bool], label: usize) -> Result<f64, NnError> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NnError::NoCandidates);
    }
    let lse = max
        + logits
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&z, _)| (z - max).exp())
            .sum::<f64>()
            .ln();
    Ok(lse - logits[label])
}

fn label_of(s: &BipartiteState, index: usize) -> Result<usize, NnError> {
    let a = s.expert_action.ok_or(NnError::MissingLabel { index })?;
    if a >= s.n_vars || !s.candidate_mask[a] {
        return Err(NnError::ShapeMismatch(format!(
            "label {a} of sample {index} is not a candidate"
        )));
    }
    Ok(a)
}

/// Inference-mode loss of one labeled sample.
pub fn sample_loss(model: &ModelParams, s: &BipartiteState) -> Result<f64, NnError> {
    let a = label_of(s, 0)?;
    let cache = run_forward(model, s, None)?;
    cross_entropy(&cache.logits, &s.candidate_mask, a)
}

/// Mean cross-entropy over `batch` and its gradient. Dropout is applied
/// only when `dropout_rng` is given and the arch has a positive rate.
pub fn loss_and_grad(
    model: &ModelParams,
    batch: &[&BipartiteState],
    mut dropout_rng: Option<&mut Rng>,
) -> Result<(f64, ParamSet), NnError> {
    if batch.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut grads = ParamSet::zeros(&model.arch);
    let mut total = 0.0;
    for (k, s) in batch.iter().enumerate() {
        let label = label_of(s, k)?;
        let cache = run_forward(model, s, dropout_rng.as_deref_mut())?;
        total += cross_entropy(&cache.logits, &s.candidate_mask, label)?;
        backward(model, s, &cache, label, &mut grads)?;
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    Ok((total * scale, grads))
}

/// Adds the gradient of `-log p(label)` for one sample into `g`.
fn backward(
    model: &ModelParams,
    s: &BipartiteState,
    c: &Cache,
    label: usize,
    g: &mut ParamSet,
) -> Result<(), NnError> {
    let p = &model.params;
    let h = model.arch.embed_dim;
    let (n, m) = (s.n_vars, s.n_cons);

    let probs = masked_softmax(&c.logits, &s.candidate_mask)?;
    let dz: Vec<f64> = (0..n)
        .map(|j| probs[j] - if j == label { 1.0 } else { 0.0 })
        .collect();

    // Output layer.
    g.b_o.data[0] += dz.iter().sum::<f64>();
    let mut d_v2 = vec![0.0; n * h];
    for j in 0..n {
        if dz[j] == 0.0 {
            continue;
        }
        let row = &c.v2_out[j * h..(j + 1) * h];
        for k in 0..h {
            g.w_o.data[k] += dz[j] * row[k];
            d_v2[j * h + k] = dz[j] * p.w_o.data[k];
        }
    }
    if let Some(keep) = &c.keep {
        d_v2.iter_mut().zip(keep).for_each(|(d, k)| *d *= k);
    }
    relu_backward(&mut d_v2, &c.v2_pre);
    let d_v2_pre = d_v2;

    // Variable-side convolution.
    sum_rows_into(&mut g.conv_v.b, &d_v2_pre);
    accumulate_at_g(&mut g.conv_v.u, &c.v1, n, h, &d_v2_pre);
    let mut d_v1 = matmul_t(&d_v2_pre, n, &p.conv_v.u);
    // Per-constraint sum of the gradients of its neighbours.
    let mut s_c = vec![0.0; m * h];
    for e in &s.edges {
        let src = &d_v2_pre[e.var * h..(e.var + 1) * h];
        let dst = &mut s_c[e.con * h..(e.con + 1) * h];
        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
        g.conv_v
            .w_e
            .data
            .iter_mut()
            .zip(src)
            .for_each(|(w, v)| *w += e.value * v);
    }
    accumulate_at_g(&mut g.conv_v.m, &c.c2, m, h, &s_c);
    let mut d_c2 = matmul_t(&s_c, m, &p.conv_v.m);
    relu_backward(&mut d_c2, &c.c2_pre);
    let d_c2_pre = d_c2;

    // Constraint-side convolution.
    sum_rows_into(&mut g.conv_c.b, &d_c2_pre);
    accumulate_at_g(&mut g.conv_c.u, &c.c1, m, h, &d_c2_pre);
    let mut d_c1 = matmul_t(&d_c2_pre, m, &p.conv_c.u);
    let mut r_v = vec![0.0; n * h];
    for e in &s.edges {
        let src = &d_c2_pre[e.con * h..(e.con + 1) * h];
        let dst = &mut r_v[e.var * h..(e.var + 1) * h];
        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
        g.conv_c
            .w_e
            .data
            .iter_mut()
            .zip(src)
            .for_each(|(w, v)| *w += e.value * v);
    }
    accumulate_at_g(&mut g.conv_c.m, &c.v1, n, h, &r_v);
    let from_msgs = matmul_t(&r_v, n, &p.conv_c.m);
    d_v1.iter_mut().zip(&from_msgs).for_each(|(a, b)| *a += b);

    // Embeddings.
    relu_backward(&mut d_c1, &c.c1_pre);
    sum_rows_into(&mut g.b_c, &d_c1);
    accumulate_at_g(&mut g.w_c, &s.con_features, m, model.arch.con_in, &d_c1);
    relu_backward(&mut d_v1, &c.v1_pre);
    sum_rows_into(&mut g.b_v, &d_v1);
    accumulate_at_g(&mut g.w_v, &s.var_features, n, model.arch.var_in, &d_v1);
    Ok(())
}
