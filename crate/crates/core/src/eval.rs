//! Relative-L2 and total-variation metrics, auto-regressive rollout, and the
//! metrics report.

use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::{Result as TensorResult, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("zero-norm truth for sample {sample} variable {variable}")]
    ZeroNormTruth { sample: usize, variable: usize },
    #[error("length mismatch: prediction {pred} vs truth {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type EvalResult<T> = std::result::Result<T, EvalError>;

/// Relative L2 error of one sample, averaged over variables:
/// `(1/D) sum_k ||pred_k - truth_k||_2 / ||truth_k||_2` with the norm over
/// all grid points. Values are row-major `N x D`; sums run in f64.
pub fn rel_l2(pred: &[f32], truth: &[f32], channels: usize, sample: usize) -> EvalResult<f64> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let n = truth.len() / channels;
    let mut acc = 0.0f64;
    for k in 0..channels {
        let mut err = 0.0f64;
        let mut norm = 0.0f64;
        for m in 0..n {
            let p = pred[m * channels + k] as f64;
            let t = truth[m * channels + k] as f64;
            err += (p - t) * (p - t);
            norm += t * t;
        }
        if norm == 0.0 {
            return Err(EvalError::ZeroNormTruth {
                sample,
                variable: k,
            });
        }
        acc += (err / norm).sqrt();
    }
    Ok(acc / channels as f64)
}

/// Discrete total variation distance between gradient magnitudes:
/// `sum_m | |f_{m+1} - f_m| - |g_{m+1} - g_m| |` with circular indexing on a
/// uniform periodic grid (the grid spacing cancels against the difference
/// divisor).
pub fn total_variation(pred: &[f32], truth: &[f32]) -> EvalResult<f64> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let n = pred.len();
    let mut acc = 0.0f64;
    for m in 0..n {
        let df = (pred[(m + 1) % n] as f64 - pred[m] as f64).abs();
        let dg = (truth[(m + 1) % n] as f64 - truth[m] as f64).abs();
        acc += (df - dg).abs();
    }
    Ok(acc)
}

/// Per-sample metric values with their aggregates (mean, median, worst).
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub per_sample: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    pub worst: f64,
}

fn aggregate(values: impl Iterator<Item = f64> + Clone) -> Aggregate {
    let mut sorted: Vec<f64> = values.clone().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    assert!(n > 0, "aggregate of an empty metric set");
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Aggregate {
        mean: sorted.iter().sum::<f64>() / n as f64,
        median,
        worst: sorted[n - 1],
    }
}

impl MetricsReport {
    /// Evaluate predictions against truths, in parallel over samples with a
    /// deterministic sample-order reduction.
    pub fn compute(
        preds: &[Vec<f32>],
        truths: &[Vec<f32>],
        channels: usize,
    ) -> EvalResult<MetricsReport> {
        assert_eq!(preds.len(), truths.len());
        let per_sample: Vec<EvalResult<(f64, f64)>> = preds
            .par_iter()
            .zip(truths.par_iter())
            .enumerate()
            .map(|(i, (p, t))| {
                let r = rel_l2(p, t, channels, i)?;
                let tv = total_variation(p, t)?;
                Ok((r, tv))
            })
            .collect();
        let per_sample = per_sample.into_iter().collect::<EvalResult<Vec<_>>>()?;
        Ok(MetricsReport { per_sample })
    }

    pub fn rel_l2_aggregate(&self) -> Aggregate {
        aggregate(self.per_sample.iter().map(|v| v.0))
    }

    pub fn tv_aggregate(&self) -> Aggregate {
        aggregate(self.per_sample.iter().map(|v| v.1))
    }

    /// CSV with one row per sample and aggregate comment lines appended.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,rel_l2,tv\n");
        for (i, (r, tv)) in self.per_sample.iter().enumerate() {
            out.push_str(&format!("{i},{r},{tv}\n"));
        }
        let rl = self.rel_l2_aggregate();
        let tv = self.tv_aggregate();
        out.push_str(&format!(
            "# rel_l2: mean={}, median={}, worst={}\n",
            rl.mean, rl.median, rl.worst
        ));
        out.push_str(&format!(
            "# tv: mean={}, median={}, worst={}\n",
            tv.mean, tv.median, tv.worst
        ));
        out
    }
}

/// A model usable for rollout: maps a window of `T` frames to the next frame
/// on the full evaluation grid.
pub trait FrameModel {
    /// `window` is `T x N x D` flattened per frame; returns one `N x D` frame.
    fn next_frame(&self, window: &[Vec<f32>]) -> TensorResult<Vec<f32>>;
}

impl<F> FrameModel for F
where
    F: Fn(&[Vec<f32>]) -> TensorResult<Vec<f32>>,
{
    fn next_frame(&self, window: &[Vec<f32>]) -> TensorResult<Vec<f32>> {
        self(window)
    }
}

/// Auto-regressive rollout: predict, drop the oldest frame, append the
/// prediction, repeat. Returns `n_steps` predicted frames.
pub fn rollout(
    model: &dyn FrameModel,
    initial_window: &[Vec<f32>],
    n_steps: usize,
) -> TensorResult<Vec<Vec<f32>>> {
    assert!(n_steps >= 1, "rollout needs at least one step");
    assert!(!initial_window.is_empty(), "rollout needs an input window");
    let mut window: Vec<Vec<f32>> = initial_window.to_vec();
    let mut out = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let next = model.next_frame(&window)?;
        window.remove(0);
        window.push(next.clone());
        out.push(next);
    }
    Ok(out)
}

/// Identity dynamics: predict the last frame again. Used as a baseline and
/// for rollout plumbing checks.
pub struct LastFrameModel;

impl FrameModel for LastFrameModel {
    fn next_frame(&self, window: &[Vec<f32>]) -> TensorResult<Vec<f32>> {
        Ok(window.last().unwrap().clone())
    }
}

/// Convenience: single-sample rel-L2 between flat tensors.
pub fn rel_l2_tensors(pred: &Tensor<f32>, truth: &Tensor<f32>, channels: usize) -> EvalResult<f64> {
    rel_l2(pred.data(), truth.data(), channels, 0)
}
