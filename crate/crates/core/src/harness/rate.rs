//! Log-log slope fits over sweep grids.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use super::CheckResult;

#[derive(Debug, Error, PartialEq)]
pub enum RateError {
    #[error("need at least {needed} grid points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("grid point {index} has no measurements")]
    EmptyCell { index: usize },
    #[error("measurement {value} at x = {x} is not positive")]
    NonPositive { x: f64, value: f64 },
}

/// Least-squares fit of `log(median y) = intercept + slope·log x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub x: Vec<f64>,
    pub median_y: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// Half-width of the 95% confidence interval on the slope.
    pub half_width: f64,
}

impl RateFit {
    pub fn check(&self, name: impl Into<String>, threshold: f64) -> CheckResult {
        CheckResult::rate(name, self.slope, self.half_width, threshold)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fits the slope of the per-point median of `ys[i]` against `xs[i]` on log-log axes.
pub fn rate_fit(xs: &[f64], ys: &[Vec<f64>]) -> Result<RateFit, RateError> {
    if xs.len() < 4 || ys.len() != xs.len() {
        return Err(RateError::TooFewPoints { needed: 4, got: xs.len().min(ys.len()) });
    }
    let mut med = Vec::with_capacity(xs.len());
    for (i, (x, cell)) in xs.iter().zip(ys).enumerate() {
        if cell.is_empty() {
            return Err(RateError::EmptyCell { index: i });
        }
        if !(*x > 0.0) {
            return Err(RateError::NonPositive { x: *x, value: *x });
        }
        if let Some(v) = cell.iter().find(|v| !(**v > 0.0)) {
            return Err(RateError::NonPositive { x: *x, value: *v });
        }
        med.push(median(cell));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = med.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let dof = n - 2.0;
    let se = (sse / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof).expect("dof >= 2").inverse_cdf(0.975);
    Ok(RateFit { x: xs.to_vec(), median_y: med, slope, intercept, half_width: t * se })
}
