//! Black formula with zero rates and forward call delta.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid standard normal")
}

pub fn norm_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn norm_inv_cdf(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Undiscounted call price `F N(d1) - K N(d2)`.
pub fn bs_call(forward: f64, strike: f64, t: f64, vol: f64) -> f64 {
    let sd = vol * t.sqrt();
    if sd <= 0.0 {
        return (forward - strike).max(0.0);
    }
    if strike <= 0.0 {
        return forward;
    }
    let d1 = ((forward / strike).ln() + 0.5 * sd * sd) / sd;
    forward * norm_cdf(d1) - strike * norm_cdf(d1 - sd)
}

/// Strike with the given forward call delta `N(d1)`.
pub fn delta_to_strike(delta: f64, t: f64, vol: f64, forward: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Parameter(format!("delta {delta} must lie in (0, 1)")));
    }
    let sd = vol * t.sqrt();
    Ok(forward * (-sd * norm_inv_cdf(delta) + 0.5 * sd * sd).exp())
}

/// Forward call delta `N(d1)` of a strike.
pub fn strike_to_delta(strike: f64, t: f64, vol: f64, forward: f64) -> f64 {
    let sd = vol * t.sqrt();
    norm_cdf(((forward / strike).ln() + 0.5 * sd * sd) / sd)
}
