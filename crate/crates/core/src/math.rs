//! Small numeric kernels shared by the policy and objective code.

use alloc::vec::Vec;

/// `ln Σ exp(x_i)`, stable for large magnitudes. Empty input gives `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| libm::exp(x - max)).sum();
    max + libm::log(sum)
}

/// Softmax of `logits / temperature` written into `out`.
pub fn softmax_into(logits: &[f64], temperature: f64, out: &mut Vec<f64>) {
    out.clear();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in logits {
        let e = libm::exp((l - max) / temperature);
        sum += e;
        out.push(e);
    }
    for p in out.iter_mut() {
        *p /= sum;
    }
}

/// Log-softmax of `logits / temperature`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    let lse = log_sum_exp(&scaled);
    scaled.into_iter().map(|l| l - lse).collect()
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * libm::log(p))
        .sum::<f64>()
}

/// Covariance of `x` and `y` under the probability weights `p`.
pub fn weighted_covariance(p: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let ex: f64 = p.iter().zip(x).map(|(p, x)| p * x).sum();
    let ey: f64 = p.iter().zip(y).map(|(p, y)| p * y).sum();
    p.iter()
        .zip(x.iter().zip(y))
        .map(|(p, (x, y))| p * (x - ex) * (y - ey))
        .sum()
}

/// `⌊fraction · n⌋`, capped at `n`. The fraction is nudged up by 1e-9 so
/// that products like `0.8 · 10` are not lost to rounding.
pub fn floor_count(fraction: f64, n: usize) -> usize {
    (libm::floor(fraction * n as f64 + 1e-9).max(0.0) as usize).min(n)
}

/// `⌈fraction · n⌉`, capped at `n`, with the matching downward nudge.
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    (libm::ceil(fraction * n as f64 - 1e-9).max(0.0) as usize).min(n)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let xs = [0.1f64.ln(), 0.3f64.ln()];
        assert!((log_sum_exp(&xs) - 0.4f64.ln()).abs() < 1e-14);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn weighted_covariance_of_constant_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(weighted_covariance(&p, &[1.0, 1.0, 1.0], &[3.0, -1.0, 2.0]), 0.0);
    }
}
