//! Check loss and the non-crossing output transform `Ψ(τ, x)`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Levels closer than this are treated as the same quantile.
pub const TAU_EPS: f64 = 1e-9;

#[inline]
pub fn is_median(tau: f64) -> bool {
    (tau - 0.5).abs() < TAU_EPS
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(domain(format!("quantile level must lie in (0, 1), got {tau}")))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ρ_τ(v) = v (τ - 1{v < 0})`.
pub fn check_loss(v: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(check_loss_unchecked(v, tau))
}

#[inline]
pub(crate) fn check_loss_unchecked(v: f64, tau: f64) -> f64 {
    if v < 0.0 {
        v * (tau - 1.0)
    } else {
        v * tau
    }
}

/// Subgradient of `ρ_τ` in `v`; `τ - 0.5` at the kink.
#[inline]
pub fn check_loss_grad(v: f64, tau: f64) -> f64 {
    if v < 0.0 {
        tau - 1.0
    } else if v > 0.0 {
        tau
    } else {
        tau - 0.5
    }
}

/// Mean check loss of the residuals `targets - predictions`.
pub fn empirical_risk(predictions: &[f64], targets: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if predictions.is_empty() {
        return Err(domain("empirical risk of an empty sample"));
    }
    if predictions.len() != targets.len() {
        return Err(domain(format!(
            "prediction/target length mismatch: {} vs {}",
            predictions.len(),
            targets.len()
        )));
    }
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| check_loss_unchecked(y - p, tau))
        .sum();
    Ok(total / predictions.len() as f64)
}

/// `Ψ(τ, x)`: identity at the median, otherwise a sigmoid offset of at most
/// `λ|τ - 0.5|` on the correct side of `f_constant`.
#[inline]
pub fn psi(tau: f64, x: f64, f_constant: f64, lambda: f64) -> f64 {
    if is_median(tau) {
        x
    } else if tau > 0.5 {
        f_constant + lambda * (tau - 0.5) * sigmoid(x)
    } else {
        f_constant - lambda * (0.5 - tau) * sigmoid(x)
    }
}

/// `∂Ψ/∂x`.
#[inline]
pub fn psi_grad(tau: f64, x: f64, lambda: f64) -> f64 {
    if is_median(tau) {
        1.0
    } else {
        let s = sigmoid(x);
        lambda * (tau - 0.5) * s * (1.0 - s)
    }
}

/// `max(Z) - min(Z)`.
pub fn data_range(z: &[f64]) -> f64 {
    let (lo, hi) = z
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Default `λ = σ_range / 2`. A constant sample falls back to a tiny positive width.
pub fn default_lambda(z: &[f64]) -> f64 {
    let half = data_range(z) / 2.0;
    if half > 0.0 {
        half
    } else {
        1e-6
    }
}

/// Quantile level plus the `Ψ` parameters it is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileSpec {
    pub tau: f64,
    pub lambda: f64,
}

impl QuantileSpec {
    pub fn new(tau: f64, lambda: f64) -> Result<Self> {
        check_tau(tau)?;
        if !(lambda > 0.0) {
            return Err(domain(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self { tau, lambda })
    }

    pub fn apply(&self, x: f64, f_constant: f64) -> f64 {
        psi(self.tau, x, f_constant, self.lambda)
    }
}

/// Parses `0.05,0.5,0.95` into sorted, deduplicated levels. The median must be present.
pub fn parse_taus(list: &str) -> Result<Vec<f64>> {
    let mut taus = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let tau: f64 = part
            .parse()
            .map_err(|_| domain(format!("cannot parse quantile level `{part}`")))?;
        check_tau(tau)?;
        taus.push(tau);
    }
    normalize_taus(taus)
}

/// Sorts and deduplicates levels; errors when the median is missing.
pub fn normalize_taus(mut taus: Vec<f64>) -> Result<Vec<f64>> {
    for &t in &taus {
        check_tau(t)?;
    }
    taus.sort_by(f64::total_cmp);
    taus.dedup_by(|a, b| (*a - *b).abs() < TAU_EPS);
    if !taus.iter().any(|&t| is_median(t)) {
        return Err(domain("quantile levels must include the median 0.5"));
    }
    Ok(taus)
}

/// Quantile levels `(α/2, 1 - α/2)` for a `100(1-α)%` interval.
pub fn interval_levels(alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok((alpha / 2.0, 1.0 - alpha / 2.0))
}

/// Stored quantile levels rarely match a computed `α/2` bit-for-bit.
pub(crate) fn find_tau<T>(items: &[(f64, T)], tau: f64) -> Option<&T> {
    items
        .iter()
        .find(|(t, _)| (t - tau).abs() < TAU_EPS)
        .map(|(_, v)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn check_loss_values() {
        for tau in [0.05, 0.5, 0.9] {
            assert_eq!(check_loss(0.0, tau).unwrap(), 0.0);
        }
        assert_abs_diff_eq!(check_loss(2.0, 0.5).unwrap(), 1.0);
        assert_abs_diff_eq!(check_loss(-1.0, 0.9).unwrap(), 0.1, epsilon = 1e-15);
        assert!(check_loss(1.0, 0.0).is_err());
        assert!(check_loss(1.0, 1.0).is_err());
    }

    #[test]
    fn subgradient_at_zero() {
        assert_abs_diff_eq!(check_loss_grad(0.0, 0.9), 0.4, epsilon = 1e-15);
        assert_eq!(check_loss_grad(0.0, 0.5), 0.0);
        assert_eq!(check_loss_grad(-3.0, 0.9), 0.9 - 1.0);
        assert_eq!(check_loss_grad(3.0, 0.9), 0.9);
    }

    #[test]
    fn psi_values() {
        assert_eq!(psi(0.5, 3.7, 100.0, 2.0), 3.7);
        assert_abs_diff_eq!(psi(0.95, 0.0, 1.0, 2.0), 1.45, epsilon = 1e-15);
        assert_abs_diff_eq!(psi(0.05, 0.0, 1.0, 2.0), 0.55, epsilon = 1e-15);
        assert_abs_diff_eq!(psi(0.9, 50.0, 0.0, 1.0), 0.4, epsilon = 1e-15);
    }

    #[test]
    fn psi_grad_matches_finite_difference() {
        for &(tau, x) in &[(0.9, 0.3), (0.1, -1.2), (0.5, 2.0), (0.75, 4.0)] {
            let h = 1e-6;
            let fd = (psi(tau, x + h, 0.3, 1.7) - psi(tau, x - h, 0.3, 1.7)) / (2.0 * h);
            assert_abs_diff_eq!(psi_grad(tau, x, 1.7), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn empirical_risk_values() {
        assert_eq!(empirical_risk(&[1.0, 2.0], &[1.0, 2.0], 0.3).unwrap(), 0.0);
        assert_abs_diff_eq!(empirical_risk(&[1.0, -1.0], &[0.0, 0.0], 0.5).unwrap(), 0.5);
        assert_abs_diff_eq!(
            empirical_risk(&[1.0, -1.0], &[0.0, 0.0], 0.9).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        assert!(empirical_risk(&[], &[], 0.5).is_err());
    }

    #[test]
    fn tau_parsing() {
        assert_eq!(parse_taus("0.95, 0.05,0.5").unwrap(), vec![0.05, 0.5, 0.95]);
        assert!(parse_taus("0.05,0.95").is_err());
        assert!(parse_taus("0.5,1.2").is_err());
        assert!(parse_taus("0.5,abc").is_err());
    }

    #[test]
    fn lambda_default_is_half_range() {
        assert_eq!(default_lambda(&[3.0, -1.0, 2.0]), 2.0);
    }

    proptest! {
        #[test]
        fn check_loss_nonnegative_and_half_abs_at_median(v in -1e3f64..1e3, tau in 0.001f64..0.999) {
            let l = check_loss(v, tau).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, v == 0.0);
            prop_assert!((check_loss(v, 0.5).unwrap() - v.abs() / 2.0).abs() < 1e-12);
        }

        #[test]
        fn psi_brackets_f_constant(
            xu in -30.0f64..30.0, xl in -30.0f64..30.0, f in -10.0f64..10.0,
            lambda in 0.01f64..10.0, tu in 0.51f64..0.999, tl in 0.001f64..0.49
        ) {
            let hi = psi(tu, xu, f, lambda);
            let lo = psi(tl, xl, f, lambda);
            prop_assert!(lo <= f && f <= hi);
            prop_assert!(hi - lo <= lambda * (tu - tl) + 1e-12);
            // strict once the sigmoid offset is representable next to f
            let (su, sl) = (psi(tu, xu.clamp(-5.0, 5.0), f, lambda), psi(tl, xl.clamp(-5.0, 5.0), f, lambda));
            prop_assert!(sl < f && f < su);
        }
    }
}
