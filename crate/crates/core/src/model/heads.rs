//! Per-attribute output heads and their negative log-likelihoods.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::nn::{log_softmax, log_sum_exp, softmax};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// How a block's raw output slice is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HeadLayout {
    /// `k` logits.
    Categorical(usize),
    /// `n` mixture weights (logits), then `n` means, then `n` log-sigmas.
    Mixture(usize),
    /// One `log(alpha)` with a fixed scale `beta`.
    Pareto(f64),
}

impl HeadLayout {
    pub fn width(&self) -> usize {
        match *self {
            HeadLayout::Categorical(k) => k,
            HeadLayout::Mixture(n) => 3 * n,
            HeadLayout::Pareto(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation {
    Category(usize),
    /// Standardized value for mixture heads, raw value for Pareto.
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadParams {
    Categorical {
        logits: Vec<f64>,
    },
    GaussianMixture {
        log_weights: Vec<f64>,
        means: Vec<f64>,
        log_sigmas: Vec<f64>,
    },
    Pareto {
        log_alpha: f64,
        beta: f64,
    },
}

impl HeadParams {
    pub fn from_raw(layout: HeadLayout, raw: &[f64]) -> Self {
        debug_assert_eq!(raw.len(), layout.width());
        match layout {
            HeadLayout::Categorical(_) => HeadParams::Categorical { logits: raw.to_vec() },
            HeadLayout::Mixture(n) => HeadParams::GaussianMixture {
                log_weights: raw[..n].to_vec(),
                means: raw[n..2 * n].to_vec(),
                log_sigmas: raw[2 * n..].to_vec(),
            },
            HeadLayout::Pareto(beta) => HeadParams::Pareto { log_alpha: raw[0], beta },
        }
    }

    /// Category probabilities (softmax of the logits).
    pub fn probabilities(&self) -> Option<Vec<f64>> {
        match self {
            HeadParams::Categorical { logits } => Some(softmax(logits)),
            _ => None,
        }
    }

    pub fn log_prob_category(&self, k: usize) -> Option<f64> {
        match self {
            HeadParams::Categorical { logits } => logits.get(k).map(|l| l - log_sum_exp(logits)),
            _ => None,
        }
    }

    /// Normalized mixture weights.
    pub fn mixture_weights(&self) -> Option<Vec<f64>> {
        match self {
            HeadParams::GaussianMixture { log_weights, .. } => Some(softmax(log_weights)),
            _ => None,
        }
    }

    pub fn nll(&self, obs: Observation) -> Result<f64, ModelError> {
        self.nll_with_grad(obs, false).map(|(v, _)| v)
    }

    /// NLL and its gradient with respect to the raw head outputs (in
    /// [`HeadLayout`] order).
    pub fn nll_grad(&self, obs: Observation) -> Result<(f64, Vec<f64>), ModelError> {
        self.nll_with_grad(obs, true)
    }

    fn nll_with_grad(&self, obs: Observation, want_grad: bool) -> Result<(f64, Vec<f64>), ModelError> {
        match (self, obs) {
            (HeadParams::Categorical { logits }, Observation::Category(k)) => {
                if k >= logits.len() {
                    return Err(ModelError::Argument(format!(
                        "category {k} out of range for {} logits",
                        logits.len()
                    )));
                }
                let lsm = log_softmax(logits);
                let nll = -lsm[k];
                let grad = if want_grad {
                    let mut g: Vec<f64> = lsm.iter().map(|l| l.exp()).collect();
                    g[k] -= 1.0;
                    g
                } else {
                    Vec::new()
                };
                Ok((nll, grad))
            }
            (
                HeadParams::GaussianMixture {
                    log_weights,
                    means,
                    log_sigmas,
                },
                Observation::Value(x),
            ) => {
                let n = means.len();
                let lw = log_softmax(log_weights);
                // Per-component joint log density log(w_i) + log N(x | mu_i, sigma_i).
                let terms: Vec<f64> = (0..n)
                    .map(|i| {
                        let u = (x - means[i]) * (-log_sigmas[i]).exp();
                        lw[i] - HALF_LN_2PI - log_sigmas[i] - 0.5 * u * u
                    })
                    .collect();
                let total = log_sum_exp(&terms);
                let nll = -total;
                let grad = if want_grad {
                    let mut g = vec![0.0; 3 * n];
                    for i in 0..n {
                        let r = (terms[i] - total).exp();
                        let inv_sigma = (-log_sigmas[i]).exp();
                        let u = (x - means[i]) * inv_sigma;
                        g[i] = lw[i].exp() - r;
                        g[n + i] = -r * u * inv_sigma;
                        g[2 * n + i] = r * (1.0 - u * u);
                    }
                    g
                } else {
                    Vec::new()
                };
                Ok((nll, grad))
            }
            (HeadParams::Pareto { log_alpha, beta }, Observation::Value(x)) => {
                if x < *beta {
                    return Err(ModelError::Argument(format!(
                        "pareto observation {x} below beta {beta}"
                    )));
                }
                let alpha = log_alpha.exp();
                let nll = -(log_alpha + alpha * beta.ln() - (alpha + 1.0) * x.ln());
                let grad = if want_grad {
                    vec![-1.0 - alpha * (beta.ln() - x.ln())]
                } else {
                    Vec::new()
                };
                Ok((nll, grad))
            }
            (head, obs) => Err(ModelError::Argument(format!(
                "observation {obs:?} does not fit head {head:?}"
            ))),
        }
    }
}
