//! Closed-form weighted ridge regression with an unpenalized intercept.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Weighted coefficient of determination.
    pub r_squared: f64,
}

/// Minimizes `sum_n w_n (y_n - beta . z_n - beta_0)^2 + lambda |beta|^2`.
///
/// Centring by the weighted means removes the intercept from the penalized
/// system, which is then solved by Cholesky.
pub fn weighted_ridge(
    features: &[Vec<f64>],
    targets: &[f64],
    weights: &[f64],
    lambda: f64,
) -> Result<SurrogateFit> {
    let n = features.len();
    if n == 0 {
        return Err(Error::invalid("surrogate fit needs at least one sample"));
    }
    if targets.len() != n || weights.len() != n {
        return Err(Error::invalid(format!(
            "{n} samples but {} targets and {} weights",
            targets.len(),
            weights.len()
        )));
    }
    let k = features[0].len();
    if features.iter().any(|f| f.len() != k) {
        return Err(Error::invalid("samples have different feature counts"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "ridge penalty must be >= 0, got {lambda}"
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid(
            "sample weights must be finite and non-negative",
        ));
    }
    let w_total: f64 = weights.iter().sum();
    if w_total <= 0.0 {
        return Err(Error::invalid("sample weights sum to zero"));
    }

    let mean_z: Vec<f64> = (0..k)
        .map(|j| {
            features
                .iter()
                .zip(weights)
                .map(|(f, &w)| w * f[j])
                .sum::<f64>()
                / w_total
        })
        .collect();
    let mean_y = targets
        .iter()
        .zip(weights)
        .map(|(&y, &w)| w * y)
        .sum::<f64>()
        / w_total;

    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    let mut centred = vec![0.0; k];
    for ((f, &y), &w) in features.iter().zip(targets).zip(weights) {
        for (c, (&v, &m)) in centred.iter_mut().zip(f.iter().zip(&mean_z)) {
            *c = v - m;
        }
        let yc = y - mean_y;
        for a in 0..k {
            let wa = w * centred[a];
            rhs[a] += wa * yc;
            for b in a..k {
                gram[(a, b)] += wa * centred[b];
            }
        }
    }
    for a in 0..k {
        gram[(a, a)] += lambda;
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }

    let scale = (0..k).map(|a| gram[(a, a)].abs()).fold(0.0, f64::max);
    let singular = || Error::Singular(lambda == 0.0);
    if k > 0 && scale == 0.0 {
        return Err(singular());
    }
    let chol = gram.clone().cholesky().ok_or_else(singular)?;
    let l = chol.l();
    let min_pivot = (0..k)
        .map(|a| l[(a, a)] * l[(a, a)])
        .fold(f64::INFINITY, f64::min);
    if k > 0 && min_pivot <= scale * 1e-12 {
        return Err(singular());
    }
    let beta = chol.solve(&rhs);
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let intercept = mean_y
        - coefficients
            .iter()
            .zip(&mean_z)
            .map(|(b, m)| b * m)
            .sum::<f64>();

    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for ((f, &y), &w) in features.iter().zip(targets).zip(weights) {
        let pred = intercept + f.iter().zip(&coefficients).map(|(z, b)| z * b).sum::<f64>();
        ss_res += w * (y - pred).powi(2);
        ss_tot += w * (y - mean_y).powi(2);
    }
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= f64::EPSILON * w_total {
        1.0
    } else {
        0.0
    };
    Ok(SurrogateFit {
        coefficients,
        intercept,
        r_squared,
    })
}
