//! Sample fusion: weighted intents, intent velocities and the importance
//! weight update that compares samples with refined positions.
//!
//! Samples at one step are passed as `S x N` slices: `samples[s][j]` is
//! human `j` in joint sample `s`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::prediction::log_sum_exp;
use crate::state::{HumanState, WeightVector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Temperature of the sample likelihood, in m^2.
    pub sigma: f64,
    /// Lower bound applied to every weight after an update.
    pub weight_floor: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            sigma: 0.25,
            weight_floor: 1e-6,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self, num_samples: usize) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig("sigma must be positive".into()));
        }
        if !(self.weight_floor >= 0.0 && self.weight_floor * (num_samples as f64) < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "weight floor {} must lie in [0, 1/S)",
                self.weight_floor
            )));
        }
        Ok(())
    }
}

fn check_slice(samples: &[Vec<Vec2>], s: usize, n: Option<usize>) -> Result<usize> {
    if samples.len() != s {
        return Err(Error::DimensionMismatch(format!(
            "{} samples for {s} weights",
            samples.len()
        )));
    }
    let n = n.unwrap_or_else(|| samples.first().map_or(0, Vec::len));
    if samples.iter().any(|row| row.len() != n) {
        return Err(Error::DimensionMismatch(
            "samples disagree on the number of humans".into(),
        ));
    }
    Ok(n)
}

/// Per-human weighted average of the sample positions; one weight per
/// joint sample.
pub fn weighted_intent(samples: &[Vec<Vec2>], weights: &WeightVector) -> Result<Vec<Vec2>> {
    let n = check_slice(samples, weights.len(), None)?;
    let mut out = vec![Vec2::ZERO; n];
    for (row, &w) in samples.iter().zip(weights.as_slice()) {
        for (o, p) in out.iter_mut().zip(row) {
            *o += w * *p;
        }
    }
    Ok(out)
}

/// Velocity that reaches `intent` from the human's position in one step.
pub fn intent_velocity(human: &HumanState, intent: Vec2, dt: f64) -> Vec2 {
    debug_assert!(dt > 0.0);
    (1.0 / dt) * (intent - human.position)
}

/// Sum over humans of squared distances between each sample and the
/// refined positions.
fn sample_errors(samples: &[Vec<Vec2>], refined: &[Vec2]) -> Vec<f64> {
    samples
        .iter()
        .map(|row| {
            row.iter()
                .zip(refined)
                .map(|(y, p)| (*y - *p).norm_squared())
                .sum()
        })
        .collect()
}

/// Weight update with its Jacobians.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStep {
    pub weights: Vec<f64>,
    /// `S x S`, derivative w.r.t. the previous weights.
    pub d_prev: DMatrix<f64>,
    /// `S x 2N`, derivative w.r.t. refined positions `(x_0, y_0, x_1, ...)`.
    pub d_refined: DMatrix<f64>,
}

/// Importance-weight update: likelihood factors from the refined positions,
/// multiplied into the previous weights, renormalized and floored.
pub fn weight_update(
    prev: &WeightVector,
    refined: &[Vec2],
    samples: &[Vec<Vec2>],
    config: &RefineConfig,
) -> Result<WeightVector> {
    let step = weight_update_with_jacobian(prev.as_slice(), refined, samples, config)?;
    WeightVector::new(step.weights)
}

/// [`weight_update`] on a raw weight slice, returning exact derivatives.
///
/// Evaluated in the log domain, so the product of prior and likelihood
/// cannot underflow to an all-zero vector.
pub fn weight_update_with_jacobian(
    prev: &[f64],
    refined: &[Vec2],
    samples: &[Vec<Vec2>],
    config: &RefineConfig,
) -> Result<WeightStep> {
    let s = prev.len();
    config.validate(s)?;
    let n = check_slice(samples, s, Some(refined.len()))?;
    if s == 0 || n == 0 {
        return Err(Error::DimensionMismatch(
            "weight update needs S >= 1 and N >= 1".into(),
        ));
    }
    let scale = 1.0 / (n as f64 * config.sigma);
    let errors = sample_errors(samples, refined);
    let log_lik: Vec<f64> = errors.iter().map(|e| -scale * e).collect();
    let log_post: Vec<f64> = prev
        .iter()
        .zip(&log_lik)
        .map(|(w, l)| {
            if *w > 0.0 {
                w.ln() + l
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let log_norm = log_sum_exp(&log_post);
    let (q, ratio): (Vec<f64>, Vec<f64>) = if log_norm.is_finite() {
        (
            log_post.iter().map(|l| (l - log_norm).exp()).collect(),
            // likelihood_k / sum_i prev_i likelihood_i
            log_lik.iter().map(|l| (l - log_norm).exp()).collect(),
        )
    } else {
        // unreachable for a prior on the simplex; keep the likelihood alone
        let z = log_sum_exp(&log_lik);
        (
            log_lik.iter().map(|l| (l - z).exp()).collect(),
            vec![0.0; s],
        )
    };

    let mut dq_dw = DMatrix::zeros(s, s);
    for a in 0..s {
        for k in 0..s {
            let delta = if a == k { ratio[a] } else { 0.0 };
            dq_dw[(a, k)] = delta - q[a] * ratio[k];
        }
    }
    // d log_lik_s / d p_j = 2 scale (y_j^s - p_j)
    let mut dl_dp = DMatrix::zeros(s, 2 * n);
    for (a, row) in samples.iter().enumerate() {
        for (j, (y, p)) in row.iter().zip(refined).enumerate() {
            dl_dp[(a, 2 * j)] = 2.0 * scale * (y.x - p.x);
            dl_dp[(a, 2 * j + 1)] = 2.0 * scale * (y.y - p.y);
        }
    }
    let mut dq_dp = DMatrix::zeros(s, 2 * n);
    for c in 0..2 * n {
        let mean: f64 = (0..s).map(|k| q[k] * dl_dp[(k, c)]).sum();
        for a in 0..s {
            dq_dp[(a, c)] = q[a] * (dl_dp[(a, c)] - mean);
        }
    }

    let floor = config.weight_floor;
    let m: Vec<f64> = q.iter().map(|x| x.max(floor)).collect();
    let free: Vec<bool> = q.iter().map(|x| *x > floor).collect();
    let z: f64 = m.iter().sum();
    let weights: Vec<f64> = m.iter().map(|x| x / z).collect();
    let apply_floor = |dq: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(s, dq.ncols());
        for c in 0..dq.ncols() {
            let dm: Vec<f64> = (0..s)
                .map(|a| if free[a] { dq[(a, c)] } else { 0.0 })
                .collect();
            let total: f64 = dm.iter().sum();
            for a in 0..s {
                out[(a, c)] = (dm[a] - weights[a] * total) / z;
            }
        }
        out
    };
    Ok(WeightStep {
        d_prev: apply_floor(&dq_dw),
        d_refined: apply_floor(&dq_dp),
        weights,
    })
}
