//! Normal and chi-squared distribution helpers.

use core::f64::consts::{PI, SQRT_2};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal quantile for `p ∈ (0, 1)`: a rational initial
/// approximation (Acklam) polished by one Halley step against `erfc`.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile probability {p} outside (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = libm::sqrt(-2.0 * libm::log(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = libm::sqrt(-2.0 * libm::log(1.0 - p));
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * libm::sqrt(2.0 * PI) * libm::exp(x * x / 2.0);
    x - u / (1.0 + x * u / 2.0)
}

/// Upper-tail probability `P(X > x)` for a chi-squared variable with one
/// degree of freedom.
pub fn chi2_df1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    libm::erfc(libm::sqrt(x / 2.0))
}

/// Critical value `c` with `P(X > c) = alpha` for one degree of freedom,
/// i.e. the squared two-sided normal quantile.
pub fn chi2_df1_critical(alpha: f64) -> f64 {
    let z = normal_quantile(alpha / 2.0);
    z * z
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

    #[test]
    fn critical_value_at_five_percent() {
        assert!((chi2_df1_critical(0.05) - 3.841458820694124).abs() < 1e-9);
    }

    #[test]
    fn agrees_with_statrs_inverse_cdf() {
        let chi = ChiSquared::new(1.0).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        for &alpha in &[1e-8, 1e-4, 0.001, 0.01, 0.05, 0.1, 0.3, 0.5, 0.9, 0.999] {
            let ours = chi2_df1_critical(alpha);
            let reference = chi.inverse_cdf(1.0 - alpha);
            assert!((ours - reference).abs() <= 1e-7 * reference.max(1.0), "alpha {alpha}: {ours} vs {reference}");
            assert!(((chi2_df1_sf(ours) - alpha) / alpha).abs() < 1e-8);
        }
        for &p in &[1e-10, 0.001, 0.02, 0.3, 0.5, 0.77, 0.98, 0.999999] {
            assert!((normal_quantile(p) - normal.inverse_cdf(p)).abs() < 1e-7);
        }
    }

    #[test]
    fn critical_value_decreases_with_alpha() {
        let mut prev = f64::INFINITY;
        for k in 1..100 {
            let c = chi2_df1_critical(k as f64 / 100.0);
            assert!(c < prev);
            prev = c;
        }
    }
}
