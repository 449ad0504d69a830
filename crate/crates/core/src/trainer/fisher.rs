//! Numerical check of the diagonal-Fisher proxy.
//!
//! Near a minimum, the expected outer product of mini-batch gradients equals
//! the per-sample gradient second moment divided by the batch size. On the
//! diagonal that means |B| * E[(batch grad)^2] should sit near the mean of
//! per-sample squared gradients, up to a (1 - 1/|B|) * (mean grad)^2 term
//! that vanishes at convergence. This module estimates both sides and
//! reports the per-coordinate ratio distribution.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::trainer::{Dataset, ModelConfig, ParamMap, batch_loss_and_grad};

/// Distribution of |B| * D[i] / diag(F)[i] over coordinates above the noise
/// floor, plus the gradient norms that tell how converged the model is.
#[derive(Debug, Clone)]
pub struct FisherProxyReport {
    pub batch_size: usize,
    pub n_batches: usize,
    pub coords_total: usize,
    pub coords_above_floor: usize,
    pub median_ratio: f64,
    pub q25_ratio: f64,
    pub q75_ratio: f64,
    /// Norm of the full mean gradient; small when near a minimum.
    pub mean_grad_norm: f64,
    /// Root mean squared per-sample gradient norm, the scale the mean
    /// gradient should be compared against.
    pub sample_grad_norm: f64,
}

impl FisherProxyReport {
    /// Heuristic convergence check: the systematic (1 - 1/|B|)(mean g)^2
    /// bias stays small relative to the Fisher diagonal when the mean
    /// gradient is much smaller than typical per-sample gradients.
    pub fn near_minimum(&self) -> bool {
        self.mean_grad_norm < 0.2 * self.sample_grad_norm
    }
}

fn flatten(params: &ParamMap) -> Vec<f64> {
    params.values().flat_map(|v| v.iter().copied()).collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Estimate the ratio between the scaled mini-batch gradient second moment
/// and the per-sample one.
///
/// Batch size 1 enumerates the dataset once, so both sides are computed by
/// the identical accumulation and the ratio is exactly 1 on every coordinate
/// above the floor. A batch size equal to the dataset runs the single
/// deterministic full batch, whose squared gradient is the (mean grad)^2
/// limit. Anything in between is Monte-Carlo over batches sampled with
/// replacement.
pub fn verify_fisher_proxy(
    config: &ModelConfig,
    params: &ParamMap,
    data: &Dataset,
    batch_size: usize,
    n_batches: usize,
    seed: u64,
) -> Result<FisherProxyReport> {
    if batch_size == 0 || batch_size > data.n {
        return Err(Error::Training(format!(
            "batch size {batch_size} outside 1..={}",
            data.n
        )));
    }
    let monte_carlo = batch_size > 1 && batch_size < data.n;
    if monte_carlo && n_batches < 30 {
        return Err(Error::Training(format!(
            "{n_batches} batches are too few for a stable estimate"
        )));
    }

    // Per-sample gradients, cached; batches then average cached vectors
    // instead of re-running backprop.
    let mut sample_grads: Vec<Vec<f64>> = Vec::with_capacity(data.n);
    for i in 0..data.n {
        let (_, g) = batch_loss_and_grad(config, params, data, &[i]);
        sample_grads.push(flatten(&g));
    }
    let dim = sample_grads[0].len();

    let mut fisher_diag = vec![0.0f64; dim];
    let mut mean_grad = vec![0.0f64; dim];
    let mut sample_norm_sq = 0.0f64;
    for g in &sample_grads {
        let mut norm = 0.0;
        for (j, &x) in g.iter().enumerate() {
            fisher_diag[j] += x * x;
            mean_grad[j] += x;
            norm += x * x;
        }
        sample_norm_sq += norm;
    }
    let inv_n = 1.0 / data.n as f64;
    for j in 0..dim {
        fisher_diag[j] *= inv_n;
        mean_grad[j] *= inv_n;
    }
    sample_norm_sq *= inv_n;

    let mut batch_sq = vec![0.0f64; dim];
    let (effective_batches, used_batch) = if batch_size == 1 {
        // definitional identity: a batch of one is a sample
        for g in &sample_grads {
            for (j, &x) in g.iter().enumerate() {
                batch_sq[j] += x * x;
            }
        }
        for v in &mut batch_sq {
            *v *= inv_n;
        }
        (data.n, 1)
    } else if batch_size == data.n {
        // single deterministic full batch
        for (j, &m) in mean_grad.iter().enumerate() {
            batch_sq[j] = m * m;
        }
        (1, data.n)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batch_grad = vec![0.0f64; dim];
        for _ in 0..n_batches {
            batch_grad.fill(0.0);
            for _ in 0..batch_size {
                let s = rng.random_range(0..data.n);
                for (j, &x) in sample_grads[s].iter().enumerate() {
                    batch_grad[j] += x;
                }
            }
            let inv_b = 1.0 / batch_size as f64;
            for (j, acc) in batch_sq.iter_mut().enumerate() {
                let g = batch_grad[j] * inv_b;
                *acc += g * g;
            }
        }
        let inv = 1.0 / n_batches as f64;
        for v in &mut batch_sq {
            *v *= inv;
        }
        (n_batches, batch_size)
    };

    let floor = 1e-12 * fisher_diag.iter().cloned().fold(0.0f64, f64::max);
    let mut ratios: Vec<f64> = (0..dim)
        .filter(|&j| fisher_diag[j] > floor)
        .map(|j| used_batch as f64 * batch_sq[j] / fisher_diag[j])
        .collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).expect("ratios are finite"));

    let mean_grad_norm = mean_grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(FisherProxyReport {
        batch_size: used_batch,
        n_batches: effective_batches,
        coords_total: dim,
        coords_above_floor: ratios.len(),
        median_ratio: quantile(&ratios, 0.5),
        q25_ratio: quantile(&ratios, 0.25),
        q75_ratio: quantile(&ratios, 0.75),
        mean_grad_norm,
        sample_grad_norm: sample_norm_sq.sqrt(),
    })
}
