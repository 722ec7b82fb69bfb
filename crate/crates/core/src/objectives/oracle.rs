//! Exact-arithmetic reference for the CVaR aggregate.
//!
//! Uses the dual of `max sum q_u l_u  s.t.  sum q = 1, 0 <= q_u <= c`,
//! namely `min_tau tau + c * sum_u (l_u - tau)_+`, whose minimum is attained
//! at one of the losses. Every quantity is a big rational, so this shares no
//! rounding behaviour (and no code) with the primal closed form.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};

fn exact(x: f64) -> Result<BigRational> {
    BigRational::from_float(x).ok_or_else(|| Error::Numeric(format!("non-finite value {x}")))
}

/// CVaR value as an exact rational.
pub fn cvar_dual_exact(losses: &[f64], alpha: f64) -> Result<BigRational> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("CVaR alpha {alpha} outside (0, 1]")));
    }
    if losses.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut xs = losses.iter().map(|&l| exact(l)).collect::<Result<Vec<_>>>()?;
    xs.sort();
    let n = xs.len();
    let cap = (exact(alpha)? * BigRational::from_integer(BigInt::from(n))).recip();

    // suffix[k] = sum of xs[k..]
    let mut suffix = vec![BigRational::zero(); n + 1];
    for k in (0..n).rev() {
        suffix[k] = &suffix[k + 1] + &xs[k];
    }
    let mut best: Option<BigRational> = None;
    for (k, tau) in xs.iter().enumerate() {
        let above = n - k - 1;
        let excess = &suffix[k + 1] - tau * BigRational::from_integer(BigInt::from(above));
        let value = tau + &cap * excess;
        if best.as_ref().is_none_or(|b| value < *b) {
            best = Some(value);
        }
    }
    Ok(best.expect("non-empty"))
}

/// [`cvar_dual_exact`] rounded to the nearest `f64`.
pub fn cvar_lp_oracle(losses: &[f64], alpha: f64) -> Result<f64> {
    cvar_dual_exact(losses, alpha)?
        .to_f64()
        .ok_or_else(|| Error::Numeric("oracle value not representable".into()))
}
