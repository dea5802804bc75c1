//! MAPE and R².

use crate::error::{Error, Result};

fn check(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::Eval(format!("{} targets but {} predictions", y.len(), yhat.len())));
    }
    if y.is_empty() {
        return Err(Error::Eval("no values to score".into()));
    }
    Ok(())
}

/// Mean absolute percentage error as a fraction.
pub fn mape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    if let Some(v) = y.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NonPositiveTarget(*v));
    }
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs() / a).sum::<f64>() / y.len() as f64)
}

/// Coefficient of determination.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    if y.len() < 2 {
        return Err(Error::Eval("R² needs at least two values".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ConstantTarget);
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}
