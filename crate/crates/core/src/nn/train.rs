use rand::seq::SliceRandom;

use super::{loss_and_grad, ModelParams, NnError, ParamSet, TrainConfig};
use crate::seeds;
use crate::state::BipartiteState;

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &ModelParams) -> Self {
        AdamState {
            m: ParamSet::zeros(&model.arch),
            v: ParamSet::zeros(&model.arch),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    model: &mut ModelParams,
    grads: &ParamSet,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), NnError> {
    if !model.params.same_shapes(grads) || !model.params.same_shapes(&state.m) {
        return Err(NnError::ShapeMismatch("gradient or moment shapes differ from the model".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let params = model.params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = config.beta1 * m.data[k] + (1.0 - config.beta1) * gk;
            v.data[k] = config.beta2 * v.data[k] + (1.0 - config.beta2) * gk * gk;
            let m_hat = m.data[k] / bc1;
            let v_hat = v.data[k] / bc2;
            p.data[k] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ModelParams,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// `(epoch, params)` captured after every `checkpoint_every` epochs.
    pub checkpoints: Vec<(usize, ModelParams)>,
}

/// Trains with shuffled minibatches; returns the model and per-epoch mean
/// loss.
pub fn train(
    model: ModelParams,
    dataset: &[BipartiteState],
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<f64>), NnError> {
    let out = train_with_checkpoints(model, dataset, config, None)?;
    Ok((out.model, out.epoch_losses))
}

pub fn train_with_checkpoints(
    mut model: ModelParams,
    dataset: &[BipartiteState],
    config: &TrainConfig,
    checkpoint_every: Option<usize>,
) -> Result<TrainOutput, NnError> {
    if dataset.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(NnError::ShapeMismatch("batch_size must be >= 1".into()));
    }
    let mut rng = seeds::derived_rng(config.seed, &[seeds::STREAM_TRAINING]);
    let mut adam = AdamState::new(&model);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();
    let use_dropout = model.arch.dropout_rate > 0.0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&BipartiteState> = chunk.iter().map(|&k| &dataset[k]).collect();
            let (loss, grads) = loss_and_grad(&model, &batch, use_dropout.then_some(&mut rng))?;
            sum += loss * batch.len() as f64;
            adam_step(&mut model, &grads, &mut adam, config)?;
        }
        epoch_losses.push(sum / dataset.len() as f64);
        if checkpoint_every.is_some_and(|k| k > 0 && epoch % k == 0) {
            checkpoints.push((epoch, model.clone()));
        }
    }
    Ok(TrainOutput {
        model,
        epoch_losses,
        checkpoints,
    })
}
