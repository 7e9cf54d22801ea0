use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cosine annealing within one period: `η_min + ½(η_max − η_min)(1 + cos(π·T_cur/T_i))`.
pub fn cosine_lr(t_cur: f64, t_i: f64, lr_max: f64, lr_min: f64) -> f64 {
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t_cur / t_i).cos())
}

/// Warm-restart schedule evaluated at `step` epochs (fractional epochs allowed).
///
/// Period `i` lasts `t0 · t_mult^i` epochs and starts again from `lr_max`.
pub fn sgdr_lr(step: f64, t0: usize, t_mult: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if t0 < 1 || t_mult < 1 {
        return Err(Error::Parameter(format!("SGDR periods need T_0 ≥ 1 and T_mult ≥ 1, got {t0} and {t_mult}")));
    }
    if !(step >= 0.0) {
        return Err(Error::Parameter(format!("SGDR step {step} must be ≥ 0")));
    }
    let mut start = 0.0;
    let mut period = t0 as f64;
    while step >= start + period {
        start += period;
        period *= t_mult as f64;
    }
    Ok(cosine_lr(step - start, period, lr_max, lr_min))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.0, 10.0, 0.05, 1e-4), 0.05);
        assert_eq!(cosine_lr(10.0, 10.0, 0.05, 1e-4), 1e-4);
        assert!((cosine_lr(5.0, 10.0, 0.05, 1e-4) - (0.05 + 1e-4) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn restarts() {
        let lr = |s| sgdr_lr(s, 10, 2, 0.05, 1e-4).unwrap();
        assert_eq!(lr(0.0), 0.05);
        assert!(lr(9.99) < 0.001);
        assert_eq!(lr(10.0), 0.05);
        assert!((lr(20.0) - (0.05 + 1e-4) / 2.0).abs() < 1e-15);
        assert_eq!(lr(30.0), 0.05);
        let flat = |s| sgdr_lr(s, 4, 1, 1.0, 0.0).unwrap();
        assert_eq!(flat(8.0), 1.0);
        assert!((flat(6.0) - 0.5).abs() < 1e-15);
        assert!(matches!(sgdr_lr(1.0, 0, 2, 1.0, 0.0), Err(Error::Parameter(_))));
        assert!(sgdr_lr(1.0, 1, 0, 1.0, 0.0).is_err());
    }

    #[test]
    fn within_bounds_and_decreasing_inside_a_period() {
        let mut prev = f64::INFINITY;
        for i in 0..100 {
            let v = sgdr_lr(i as f64 * 0.1, 10, 2, 0.05, 1e-4).unwrap();
            assert!((1e-4..=0.05).contains(&v));
            assert!(v <= prev);
            prev = v;
        }
    }

    proptest::proptest! {
        #[test]
        fn stays_within_bounds(step in 0.0f64..500.0, t0 in 1usize..20, t_mult in 1usize..4) {
            let lr = sgdr_lr(step, t0, t_mult, 0.05, 1e-4).unwrap();
            proptest::prop_assert!((1e-4..=0.05).contains(&lr));
        }
    }
}
