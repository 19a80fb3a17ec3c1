//! Training recipe: sampled-query MSE, AdamW with linear warmup and
//! exponential decay, global-norm gradient clipping, and checkpoint-restart
//! on loss blowups.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::Dataset;
use crate::operators::{AnyModel, Surrogate};
use crate::params::{ParamStore, TapeParams};
use crate::tensor::io::IoError;
use crate::tensor::{Rng, Tape, Tensor, TensorError, Var};

/// Steps between decay applications; the warmup length is configurable, the
/// decay interval is part of the recipe.
const DECAY_INTERVAL: f64 = 5000.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("restart budget exhausted after {restarts} restarts at step {step}")]
    RestartsExhausted {
        restarts: u32,
        step: u64,
        history: Vec<f64>,
    },
    #[error("config: {0}")]
    BadConfig(String),
}

pub type TrainResult<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Query coordinates sampled per step, without replacement, on the grid.
    pub queries: usize,
    pub steps: u64,
    pub warmup: u64,
    pub peak_lr: f64,
    /// Decay rate applied continuously per 5000 steps after warmup.
    pub decay: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub max_restarts: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            queries: 1024,
            steps: 200_000,
            warmup: 5000,
            peak_lr: 1e-3,
            decay: 0.9,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            checkpoint_every: 1000,
            seed: 0,
            max_restarts: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        if self.batch_size == 0 || self.queries == 0 || self.steps == 0 {
            return Err(TrainError::BadConfig(
                "batch_size, queries, and steps must be positive".into(),
            ));
        }
        if self.warmup > self.steps {
            return Err(TrainError::BadConfig(format!(
                "warmup {} exceeds total steps {}",
                self.warmup, self.steps
            )));
        }
        if self.peak_lr <= 0.0 || self.decay <= 0.0 || self.clip_norm <= 0.0 {
            return Err(TrainError::BadConfig(
                "peak_lr, decay, and clip_norm must be positive".into(),
            ));
        }
        if self.checkpoint_every == 0 {
            return Err(TrainError::BadConfig("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// Linear ramp `0 -> peak` over `[0, warmup]`, then continuous exponential
/// decay `peak * decay^((step - warmup) / 5000)`.
pub fn lr_schedule(cfg: &TrainConfig, step: u64) -> f64 {
    if step <= cfg.warmup {
        if cfg.warmup == 0 {
            return cfg.peak_lr;
        }
        cfg.peak_lr * step as f64 / cfg.warmup as f64
    } else {
        cfg.peak_lr
            * cfg
                .decay
                .powf((step - cfg.warmup) as f64 / DECAY_INTERVAL)
    }
}

/// Mean squared error over batch, queries, and output channels:
/// `(1/B)(1/Q)(1/D) sum |pred - target|^2`.
pub fn mse_sampled_queries(
    tape: &mut Tape<f32>,
    pred: Var,
    target: &Tensor<f32>,
) -> crate::tensor::Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(TensorError::ShapeMismatch {
            context: "mse prediction vs target",
            lhs: tape.shape(pred).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let tv = tape.constant(target.clone());
    let diff = tape.sub(pred, tv)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// First/second-moment state for AdamW, keyed like the parameter store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            p.iter()
                .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape())))
                .collect::<BTreeMap<_, _>>()
        };
        AdamState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }
}

/// Euclidean norm over the concatenation of all gradients, in f64.
pub fn global_grad_norm(grads: &BTreeMap<String, Tensor<f32>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients by `clip / norm` when the global norm exceeds the
/// clip; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor<f32>>, clip: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > clip {
        let scale = (clip / norm) as f32;
        for g in grads.values_mut() {
            *g = g.map(|v| v * scale);
        }
    }
    norm
}

/// Decoupled-weight-decay Adam update with bias correction,
/// `beta = (0.9, 0.999)`, `eps = 1e-8`.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    weight_decay: f64,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = match grads.get(&name) {
            Some(g) => g,
            None => continue,
        };
        let m = state.m.get_mut(&name).expect("moment state out of sync");
        let v = state.v.get_mut(&name).expect("moment state out of sync");
        let theta = params.get(&name).unwrap();
        let mut new_theta = Vec::with_capacity(theta.numel());
        let mut new_m = Vec::with_capacity(theta.numel());
        let mut new_v = Vec::with_capacity(theta.numel());
        for i in 0..theta.numel() {
            let gi = g.data()[i] as f64;
            let mi = ADAM_BETA1 * m.data()[i] as f64 + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data()[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let th = theta.data()[i] as f64;
            let updated = th - lr * mhat / (vhat.sqrt() + ADAM_EPS) - lr * weight_decay * th;
            new_m.push(mi as f32);
            new_v.push(vi as f32);
            new_theta.push(updated as f32);
        }
        let shape = theta.shape().to_vec();
        *m = Tensor::from_parts(shape.clone(), new_m);
        *v = Tensor::from_parts(shape.clone(), new_v);
        params.set(&name, Tensor::from_parts(shape, new_theta));
    }
}

/// One training batch: profiles, shared query coordinates, and the targets
/// at those coordinates.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `B x N x D`
    pub u: Tensor<f32>,
    /// Grid coordinates in `[0, 1)`, distinct within the batch.
    pub queries: Vec<f64>,
    /// `B x Q x D`
    pub targets: Tensor<f32>,
}

/// Draw a batch: `B` sample indices and `Q` distinct grid query indices.
pub fn sample_batch(data: &Dataset, cfg: &TrainConfig, rng: &mut Rng) -> Batch {
    let n = data.grid_size;
    let d = data.channels;
    let b = cfg.batch_size;
    let q = cfg.queries.min(n);
    let sample_ids: Vec<usize> = (0..b).map(|_| rng.below(data.len())).collect();
    let query_ids = rng.sample_distinct(n, q);
    let queries: Vec<f64> = query_ids.iter().map(|&m| m as f64 / n as f64).collect();

    let mut u = Vec::with_capacity(b * n * d);
    let mut targets = Vec::with_capacity(b * q * d);
    for &si in &sample_ids {
        let s = &data.samples[si];
        u.extend_from_slice(&s.u0);
        for &m in &query_ids {
            targets.extend_from_slice(&s.target[m * d..(m + 1) * d]);
        }
    }
    Batch {
        u: Tensor::from_parts(vec![b, n, d], u),
        queries,
        targets: Tensor::from_parts(vec![b, q, d], targets),
    }
}

pub enum StepOutcome {
    Loss(f64),
    /// Non-finite loss or gradients; the loop restarts from a checkpoint.
    Blowup(String),
}

/// Forward, loss, backward, clip, update. Non-finite values surface as a
/// blowup signal rather than an error.
pub fn train_step(
    model: &dyn Surrogate,
    params: &mut ParamStore,
    opt: &mut AdamState,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
) -> TrainResult<StepOutcome> {
    let mut tape = Tape::new();
    let bound = TapeParams::bind(&mut tape, params);
    // Numeric failures inside the forward pass (NaN activations degenerate
    // the attention softmax) are blowup signals, not crashes.
    let pred = match model.forward(&mut tape, &bound, &batch.u, &batch.queries) {
        Ok(v) => v,
        Err(e @ (TensorError::DegenerateSoftmax | TensorError::NonFinite { .. })) => {
            return Ok(StepOutcome::Blowup(e.to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    let loss = mse_sampled_queries(&mut tape, pred, &batch.targets)?;
    let loss_val = tape.value(loss).item() as f64;
    if !loss_val.is_finite() {
        return Ok(StepOutcome::Blowup(format!("non-finite loss {loss_val}")));
    }
    let grads = tape.backward(loss)?;
    let mut by_name = BTreeMap::new();
    for (name, var) in bound.iter() {
        if let Some(g) = grads.wrt(*var) {
            if !g.is_all_finite() {
                return Ok(StepOutcome::Blowup(format!("non-finite gradient for {name}")));
            }
            by_name.insert(name.clone(), g.clone());
        }
    }
    clip_gradients(&mut by_name, cfg.clip_norm);
    adamw_step(params, &by_name, opt, cfg.weight_decay, lr);
    Ok(StepOutcome::Loss(loss_val))
}

#[derive(Debug)]
pub struct TrainRun {
    pub loss_history: Vec<f64>,
    pub restarts: u32,
    pub checkpoint: PathBuf,
}

fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("latest.cvc")
}

fn save_checkpoint(
    dir: &Path,
    model_meta: &AnyModel,
    params: &ParamStore,
    opt: &AdamState,
    step: u64,
) -> TrainResult<()> {
    let mut store = params.clone();
    model_meta.write_meta(&mut store);
    for (name, t) in &opt.m {
        store.insert(format!("opt.m.{name}"), t.clone());
    }
    for (name, t) in &opt.v {
        store.insert(format!("opt.v.{name}"), t.clone());
    }
    store.insert("opt.step", Tensor::scalar(opt.step as f32));
    store.insert("opt.trained_steps", Tensor::scalar(step as f32));
    store.save(&checkpoint_path(dir))?;
    Ok(())
}

/// Split a saved archive back into parameters and optimizer state.
pub fn load_checkpoint(path: &Path) -> TrainResult<(ParamStore, AdamState, u64)> {
    let store = ParamStore::load(path)?;
    let mut params = ParamStore::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut opt_step = 0u64;
    let mut trained = 0u64;
    for (name, t) in store.iter() {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            m.insert(rest.to_string(), t.clone());
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            v.insert(rest.to_string(), t.clone());
        } else if name == "opt.step" {
            opt_step = t.item() as u64;
        } else if name == "opt.trained_steps" {
            trained = t.item() as u64;
        } else if !name.starts_with("meta.") {
            params.insert(name.clone(), t.clone());
        }
    }
    let opt = AdamState {
        m,
        v,
        step: opt_step,
    };
    Ok((params, opt, trained))
}

/// Per-step callback, called before the step runs; may mutate parameters
/// (used for fault injection and progress reporting).
pub type StepHook<'a> = &'a mut dyn FnMut(u64, &mut ParamStore);

/// Run the full loop: fresh query sampling per step, periodic checkpoints,
/// and restart-from-checkpoint on blowups with a reseeded sampling stream.
/// Gives up after `max_restarts` restarts.
pub fn train_loop(
    model: &dyn Surrogate,
    model_meta: &AnyModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    ckpt_dir: &Path,
    mut hook: Option<StepHook>,
) -> TrainResult<TrainRun> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::BadConfig("dataset is empty".into()));
    }
    std::fs::create_dir_all(ckpt_dir).map_err(IoError::from)?;

    let mut init_rng = Rng::new(cfg.seed);
    let mut params = model.init(&mut init_rng);
    let mut opt = AdamState::new(&params);
    let mut restarts = 0u32;
    let mut sampler = Rng::new(cfg.seed).substream(0xB47C);
    let mut history: Vec<f64> = Vec::with_capacity(cfg.steps as usize);
    let mut step = 0u64;
    let mut ckpt_step = 0u64;

    save_checkpoint(ckpt_dir, model_meta, &params, &opt, 0)?;

    while step < cfg.steps {
        if let Some(h) = hook.as_mut() {
            h(step, &mut params);
        }
        let lr = lr_schedule(cfg, step);
        let batch = sample_batch(dataset, cfg, &mut sampler);
        let outcome = train_step(model, &mut params, &mut opt, &batch, cfg, lr)?;

        let blowup_reason = match outcome {
            StepOutcome::Blowup(reason) => Some(reason),
            StepOutcome::Loss(loss) => {
                // A finite loss far above the trailing median is a blowup too.
                let mut reason = None;
                let window = &history[history.len().saturating_sub(100)..];
                if window.len() >= 10 {
                    let mut sorted: Vec<f64> = window.to_vec();
                    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let median = sorted[sorted.len() / 2];
                    if loss > 1e3 * median.max(f64::MIN_POSITIVE) {
                        reason =
                            Some(format!("loss {loss} exceeds 1e3 x trailing median {median}"));
                    }
                }
                if reason.is_none() {
                    history.push(loss);
                }
                reason
            }
        };

        if let Some(reason) = blowup_reason {
            restarts += 1;
            if restarts > cfg.max_restarts {
                return Err(TrainError::RestartsExhausted {
                    restarts,
                    step,
                    history,
                });
            }
            let (p, o, s) = load_checkpoint(&checkpoint_path(ckpt_dir))?;
            params = p;
            opt = o;
            step = s;
            history.truncate(s as usize);
            // Reseed the sampling stream so the same batch cannot re-trigger
            // the blowup deterministically.
            sampler = Rng::new(cfg.seed).substream(0xB47C + restarts as u64);
            eprintln!("restart {restarts} from step {s}: {reason}");
            continue;
        }

        step += 1;
        if step % cfg.checkpoint_every == 0 {
            save_checkpoint(ckpt_dir, model_meta, &params, &opt, step)?;
            ckpt_step = step;
        }
    }
    if ckpt_step != cfg.steps {
        save_checkpoint(ckpt_dir, model_meta, &params, &opt, cfg.steps)?;
    }
    Ok(TrainRun {
        loss_history: history,
        restarts,
        checkpoint: checkpoint_path(ckpt_dir),
    })
}
