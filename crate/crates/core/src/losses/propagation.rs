use serde::Serialize;

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Dynamic relation propagation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    Off,
    /// `w_t = sum_{i >= t} alpha^(i - t) L_i`.
    Eq20SuffixSum,
    /// `w_t = alpha^(N - t) sum_{i >= t} L_i`.
    Alg1Scaled,
}

/// Coefficients `C` with `w = C L`. Upper triangular; identity when off.
pub fn propagation_matrix(n: usize, alpha: f64, mode: Propagation) -> Tensor {
    let mut c = Tensor::zeros(n, n);
    for t in 0..n {
        for i in t..n {
            let coef = match mode {
                Propagation::Off => {
                    if i == t {
                        1.0
                    } else {
                        0.0
                    }
                }
                Propagation::Eq20SuffixSum => alpha.powi((i - t) as i32),
                // positions are 0-based, so N - t becomes (n - 1) - t
                Propagation::Alg1Scaled => alpha.powi((n - 1 - t) as i32),
            };
            c.set(t, i, coef);
        }
    }
    c
}

pub fn relation_propagation_weights(
    token_losses: &[f64],
    alpha: f64,
    mode: Propagation,
) -> Result<Vec<f64>> {
    if token_losses.is_empty() {
        return Err(Error::NoTargetTokens);
    }
    if token_losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLoss);
    }
    let c = propagation_matrix(token_losses.len(), alpha, mode);
    Ok(c.matmul(&Tensor::column(token_losses.to_vec())).into_data())
}
