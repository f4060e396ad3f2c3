//! Training loop: freeze the prefill decoder, iterate instances, prefill and
//! fuse their passages, compute the LM loss on answer tokens conditioned on
//! the fused cache, update the trainable decoder with AdamW under a linear
//! warmup + cosine decay schedule.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{format_target, QAInstance, Tokenizer};
use crate::error::Error;
use crate::fusion::{prefill, res_fuse, FusedCache, PassageBatch};
use crate::model::{
    load_model, parse_container, save_model_file, write_container, ForwardOptions, Model,
    RawTensor, SeqInput,
};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Graph, Tensor};
use crate::Result;

/// Defaults are the desk-scale reference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    /// Instances per micro-batch; with `grad_accum` micro-batches per
    /// optimizer step the effective batch is `batch_size * grad_accum`.
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Fixed token length of every passage block.
    pub n: usize,
    /// Passages per instance (gold + negatives).
    pub n_passages: usize,
    /// Supervise the evidence span after `[RESULT]`; off drops it from the
    /// target (ablation).
    pub supervise_evidence: bool,
    /// Global-norm gradient clip; <= 0 disables.
    pub grad_clip: f64,
    /// Write a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk_scale()
    }
}

impl TrainConfig {
    pub fn desk_scale() -> Self {
        TrainConfig {
            max_lr: 1e-3,
            warmup_ratio: 0.05,
            total_steps: 2000,
            batch_size: 1,
            grad_accum: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            n: 64,
            n_passages: 5,
            supervise_evidence: true,
            grad_clip: 1.0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside [0, 1)",
                self.warmup_ratio
            )));
        }
        if self.total_steps < 1 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if self.batch_size * self.grad_accum < 1 {
            return Err(Error::Config(
                "batch_size * grad_accum must be >= 1".into(),
            ));
        }
        if self.max_lr <= 0.0 {
            return Err(Error::Config("max_lr must be positive".into()));
        }
        if self.n < 2 || self.n_passages < 1 {
            return Err(Error::Config("need n >= 2 and n_passages >= 1".into()));
        }
        Ok(())
    }
}

/// Optimizer state: step counter, per-parameter moments (aligned with
/// [`Model::named_params`] order), generator state, running loss.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub rng: Rng,
    pub running_loss: f64,
}

impl TrainState {
    pub fn new(model: &Model, config: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = model
            .named_params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        TrainState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            rng: Rng::new(derive_seed(config.seed, "train/rng")),
            running_loss: 0.0,
        }
    }
}

/// Linear ramp `0 -> max_lr` over `warmup_ratio * total_steps`, then cosine
/// decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    let total = config.total_steps;
    let warmup = (config.warmup_ratio * total as f64).round() as usize;
    let step = step.min(total);
    if warmup > 0 && step <= warmup {
        return config.max_lr * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    config.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decoupled-weight-decay Adam update with bias correction, elementwise in
/// f64, moments stored in f32. `step_t` is 1-based.
pub fn adamw_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    lr: f64,
    step_t: usize,
    config: &TrainConfig,
) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), m.len());
    debug_assert_eq!(param.len(), v.len());
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(step_t as i32);
    let bc2 = 1.0 - b2.powi(step_t as i32);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let m_new = b1 * m[i] as f64 + (1.0 - b1) * g;
        let v_new = b2 * v[i] as f64 + (1.0 - b2) * g * g;
        m[i] = m_new as f32;
        v[i] = v_new as f32;
        let m_hat = m[i] as f64 / bc1;
        let v_hat = v[i] as f64 / bc2;
        let p = param[i] as f64;
        param[i] =
            (p - lr * (m_hat / (v_hat.sqrt() + config.adam_eps) + config.weight_decay * p))
                as f32;
    }
}

fn loss_mask(q_len: usize, total: usize) -> (Vec<u32>, Vec<bool>) {
    // Position t predicts token t+1; only predictions of y tokens count.
    let mut mask = vec![false; total];
    for t in q_len.saturating_sub(1)..total.saturating_sub(1) {
        mask[t] = true;
    }
    (vec![0u32; total], mask)
}

/// Record the fused-cache LM loss into `graph`: forward over `q ++ y` at
/// positions `n..`, cross-entropy only on positions that predict `y` tokens.
/// Returns the loss node and the parameter node ids (named-params order) so
/// callers can run backward and harvest gradients.
pub fn build_fusion_loss(
    d_t: &Model,
    graph: &mut Graph,
    fused: &FusedCache,
    q_tokens: &[u32],
    y_tokens: &[u32],
) -> Result<(crate::tensor::NodeId, Vec<crate::tensor::NodeId>)> {
    if q_tokens.is_empty() || y_tokens.is_empty() {
        return Err(Error::Contract(
            "fusion loss needs nonempty query and answer tokens".into(),
        ));
    }
    let tokens: Vec<u32> = q_tokens.iter().chain(y_tokens).copied().collect();
    let total = tokens.len();
    let positions: Vec<usize> = (fused.n..fused.n + total).collect();
    let prefix = fused.to_prefix();
    let built = d_t.build_forward(
        graph,
        &SeqInput::dense(&tokens, &positions),
        Some(&prefix),
        ForwardOptions::default(),
    )?;
    let (mut targets, mask) = loss_mask(q_tokens.len(), total);
    for t in 0..total - 1 {
        targets[t] = tokens[t + 1];
    }
    let loss = graph.cross_entropy(built.logits.expect("logits"), &targets, &mask)?;
    Ok((loss, built.param_ids))
}

/// The LM loss on answer tokens conditioned on the fused cache.
pub fn kv_fusion_loss(
    d_t: &Model,
    fused: &FusedCache,
    q_tokens: &[u32],
    y_tokens: &[u32],
) -> Result<Tensor> {
    let mut graph = Graph::new();
    let (loss, _) = build_fusion_loss(d_t, &mut graph, fused, q_tokens, y_tokens)?;
    Ok(graph.value(loss).clone())
}

/// Loss value and f64 parameter gradients (named-params order) for one
/// instance.
pub(crate) fn instance_gradients(
    d_t: &Model,
    fused: &FusedCache,
    q_tokens: &[u32],
    y_tokens: &[u32],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut graph = Graph::new();
    let (loss, param_ids) = build_fusion_loss(d_t, &mut graph, fused, q_tokens, y_tokens)?;
    let loss_value = graph.value(loss).item() as f64;
    graph.backward(loss)?;
    let grads = param_ids
        .iter()
        .zip(d_t.named_params())
        .map(|(&id, (_, p))| {
            graph
                .grad_f64(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    Ok((loss_value, grads))
}

/// One metrics-log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub elapsed_s: f64,
}

/// Output hooks for [`train`].
#[derive(Default)]
pub struct TrainSinks<'a> {
    /// Receives one JSON object per line per step.
    pub metrics: Option<&'a mut dyn Write>,
    /// Periodic checkpoints land here when `checkpoint_every > 0`.
    pub checkpoint_dir: Option<&'a Path>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_loss: f64,
    pub wall_s: f64,
}

fn tokenize_instance(
    inst: &QAInstance,
    config: &TrainConfig,
    tokenizer: &Tokenizer,
) -> (Vec<u32>, Vec<u32>) {
    let evidence = if config.supervise_evidence && !inst.evidence.is_empty() {
        Some(inst.evidence.as_str())
    } else {
        None
    };
    format_target(&inst.question, &inst.answer, evidence, tokenizer)
}

/// Run the training loop: for each instance, prefill its passages with the
/// frozen decoder, fuse them in a freshly shuffled order (training-time
/// order augmentation; the loss is order-invariant), backprop the answer
/// loss, and update `d_t` every `batch_size * grad_accum` instances.
/// Resumes from `state.step` when nonzero; `run_limit` caps the number of
/// optimizer steps taken in this invocation (interrupt/resume is bit-exact
/// because the schedule always spans `config.total_steps`).
pub fn train(
    d_p: &Model,
    d_t: &mut Model,
    dataset: &[QAInstance],
    config: &TrainConfig,
    state: &mut TrainState,
    sinks: &mut TrainSinks,
    run_limit: Option<usize>,
) -> Result<TrainSummary> {
    config.validate()?;
    if !d_p.frozen() {
        return Err(Error::Contract(
            "prefill decoder must be frozen before training".into(),
        ));
    }
    if d_t.frozen() {
        return Err(Error::Contract("trainable decoder is frozen".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    for inst in dataset {
        if inst.passage_count() != config.n_passages {
            return Err(Error::Contract(format!(
                "instance {} has {} passages, config expects {}",
                inst.id,
                inst.passage_count(),
                config.n_passages
            )));
        }
    }
    let tokenizer = Tokenizer::new();
    let per_step = config.batch_size * config.grad_accum;
    let param_names: Vec<String> = d_t
        .named_params()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let param_sizes: Vec<usize> = d_t.named_params().iter().map(|(_, t)| t.numel()).collect();

    let start = Instant::now();
    let mut consumed = state.step * per_step;
    let mut epoch_order: Vec<usize> = Vec::new();
    let mut epoch = usize::MAX;
    let mut last_loss = state.running_loss;
    let mut steps_this_run = 0usize;
    let limit = run_limit.unwrap_or(usize::MAX);

    while state.step < config.total_steps && steps_this_run < limit {
        let lr = lr_schedule(state.step, config);
        let mut grad_acc: Vec<Vec<f64>> =
            param_sizes.iter().map(|&n| vec![0.0f64; n]).collect();
        let mut loss_sum = 0.0f64;
        for _ in 0..per_step {
            let e = consumed / dataset.len();
            if e != epoch {
                epoch = e;
                let mut order_rng =
                    Rng::new(derive_seed(config.seed, &format!("train/epoch/{e}")));
                epoch_order = order_rng.permutation(dataset.len());
            }
            let inst = &dataset[epoch_order[consumed % dataset.len()]];
            consumed += 1;

            let passages = inst.gold_first();
            let batch = PassageBatch::from_passages(&passages, &tokenizer, config.n)?;
            let caches = prefill(d_p, &batch)?;
            let order = state.rng.permutation(batch.n_passages);
            let fused = res_fuse(&caches, &order)?;
            let (q_tokens, y_tokens) = tokenize_instance(inst, config, &tokenizer);
            let (loss, grads) = instance_gradients(d_t, &fused, &q_tokens, &y_tokens)?;
            loss_sum += loss;
            for (acc, g) in grad_acc.iter_mut().zip(&grads) {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
        let scale = 1.0 / per_step as f64;
        let mut sq_norm = 0.0f64;
        for acc in grad_acc.iter_mut() {
            for a in acc.iter_mut() {
                *a *= scale;
                sq_norm += *a * *a;
            }
        }
        if config.grad_clip > 0.0 {
            let norm = sq_norm.sqrt();
            if norm > config.grad_clip {
                let clip_scale = config.grad_clip / norm;
                for acc in grad_acc.iter_mut() {
                    for a in acc.iter_mut() {
                        *a *= clip_scale;
                    }
                }
            }
        }

        let step_t = state.step + 1;
        for (idx, (_, param)) in d_t.named_params_mut().into_iter().enumerate() {
            let grad_f32: Vec<f32> = grad_acc[idx].iter().map(|&g| g as f32).collect();
            adamw_step(
                std::sync::Arc::make_mut(param).data_mut(),
                &grad_f32,
                state.m[idx].data_mut(),
                state.v[idx].data_mut(),
                lr,
                step_t,
                config,
            );
        }
        state.step += 1;
        steps_this_run += 1;
        let mean_loss = loss_sum / per_step as f64;
        last_loss = mean_loss;
        state.running_loss = if state.step == 1 {
            mean_loss
        } else {
            0.98 * state.running_loss + 0.02 * mean_loss
        };

        if let Some(w) = sinks.metrics.as_mut() {
            let line = StepLog {
                step: state.step,
                loss: mean_loss,
                lr,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            serde_json::to_writer(&mut *w, &line)
                .map_err(|e| Error::Contract(format!("metrics serialization: {e}")))?;
            w.write_all(b"\n")?;
        }
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
            if let Some(dir) = sinks.checkpoint_dir {
                save_model_file(d_t, dir.join(format!("checkpoint-{}.kvf", state.step)))?;
                save_train_state_file(state, &param_names, dir.join("train_state.kvf"))?;
            }
        }
    }
    Ok(TrainSummary {
        steps_run: state.step,
        final_loss: last_loss,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Train-state checkpointing (same container format as model checkpoints)
// ---------------------------------------------------------------------------

pub fn save_train_state(state: &TrainState, param_names: &[String]) -> Vec<u8> {
    let meta = serde_json::json!({
        "step": state.step,
        "rng_state": state.rng.state().to_string(),
        "running_loss": state.running_loss,
    });
    let mut tensors: Vec<(String, &Tensor)> = Vec::with_capacity(state.m.len() * 2);
    for (name, t) in param_names.iter().zip(&state.m) {
        tensors.push((format!("m.{name}"), t));
    }
    for (name, t) in param_names.iter().zip(&state.v) {
        tensors.push((format!("v.{name}"), t));
    }
    write_container("train_state", meta, &tensors)
}

pub fn load_train_state(bytes: &[u8], model: &Model) -> Result<TrainState> {
    let (kind, meta, raw) = parse_container(bytes)?;
    if kind != "train_state" {
        return Err(Error::Checkpoint(format!(
            "container kind {kind:?}, expected \"train_state\""
        )));
    }
    let step = meta
        .get("step")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Checkpoint("missing step".into()))? as usize;
    let rng_state: u64 = meta
        .get("rng_state")
        .and_then(serde_json::Value::as_str)
        .ok_or_else(|| Error::Checkpoint("missing rng_state".into()))?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad rng_state: {e}")))?;
    let running_loss = meta
        .get("running_loss")
        .and_then(serde_json::Value::as_f64)
        .unwrap_or(0.0);
    let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    if raw.len() != names.len() * 2 {
        return Err(Error::Checkpoint(format!(
            "train state has {} tensors, model needs {}",
            raw.len(),
            names.len() * 2
        )));
    }
    let take = |raw: &[RawTensor], offset: usize| -> Result<Vec<Tensor>> {
        names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let rt = &raw[offset + i];
                let prefix = if offset == 0 { "m" } else { "v" };
                if rt.name != format!("{prefix}.{name}") {
                    return Err(Error::Checkpoint(format!(
                        "unexpected tensor {} at slot {i}",
                        rt.name
                    )));
                }
                Tensor::new(rt.shape.clone(), rt.data.clone())
            })
            .collect()
    };
    let m = take(&raw, 0)?;
    let v = take(&raw, names.len())?;
    Ok(TrainState {
        step,
        m,
        v,
        rng: Rng::from_state(rng_state),
        running_loss,
    })
}

pub fn save_train_state_file<P: AsRef<Path>>(
    state: &TrainState,
    param_names: &[String],
    path: P,
) -> Result<()> {
    std::fs::write(path, save_train_state(state, param_names))?;
    Ok(())
}

pub fn load_train_state_file<P: AsRef<Path>>(path: P, model: &Model) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    load_train_state(&bytes, model)
}

/// Convenience for resuming: load the model checkpoint next to its state.
pub fn load_resume<P: AsRef<Path>>(model_path: P, state_path: P) -> Result<(Model, TrainState)> {
    let model = load_model(&std::fs::read(model_path)?)?;
    let state = load_train_state(&std::fs::read(state_path)?, &model)?;
    Ok((model, state))
}
