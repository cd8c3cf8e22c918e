//! Minimal dense neural-network substrate: tensors, a reverse-mode tape,
//! GELU MLPs, Adam and EMA parameter tracking.

mod adam;
pub mod checkpoint;
mod graph;
mod mlp;
mod tensor;

pub use adam::AdamState;
pub use graph::{Graph, Var};
pub use mlp::{BoundMlp, Mlp};
pub use tensor::Tensor;

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{ensure, Result};

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// `d/dx [x Phi(x)] = Phi(x) + x phi(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// `target <- (1 - coeff) * target + coeff * online`, elementwise.
pub fn ema_update(target: &mut Mlp, online: &Mlp, coeff: f64) -> Result<()> {
    ensure!(
        target.dims() == online.dims(),
        Shape,
        "EMA between {:?} and {:?}",
        target.dims(),
        online.dims()
    );
    ensure!((0.0..=1.0).contains(&coeff), Contract, "EMA coefficient {coeff} outside [0, 1]");
    for (t, &o) in target.params_mut().iter_mut().zip(online.params()) {
        *t += coeff * (o - *t);
    }
    Ok(())
}

/// L2 norm of a flat gradient.
pub fn grad_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_zero() {
        assert_eq!(gelu(0.0), 0.0);
    }

    /// Maclaurin series for erf, summed until the terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x * x / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-18 {
                break;
            }
        }
        2.0 / PI.sqrt() * sum
    }

    #[test]
    fn gelu_three_matches_erf_oracle() {
        let expected = 3.0 * 0.5 * (1.0 + erf_series(3.0 / 2f64.sqrt()));
        assert!((gelu(3.0) - expected).abs() < 1e-10);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn gelu_antisymmetry_residue(x in -10.0f64..10.0) {
            prop_assert!((gelu(x) - gelu(-x) - x).abs() <= 1e-12);
        }

        #[test]
        fn ema_stays_inside_envelope(seed in 0u64..1000, coeff in 1e-4f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut target = Mlp::new(&[3, 4, 2], &mut rng).unwrap();
            let online = Mlp::new(&[3, 4, 2], &mut rng).unwrap();
            let before = target.clone();
            ema_update(&mut target, &online, coeff).unwrap();
            for ((&t, &b), &o) in target.params().iter().zip(before.params()).zip(online.params()) {
                prop_assert!(t >= b.min(o) - 1e-15 && t <= b.max(o) + 1e-15);
            }
        }
    }

    #[test]
    fn ema_full_replacement_and_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let online = Mlp::new(&[2, 3, 1], &mut rng).unwrap();
        let mut target = Mlp::new(&[2, 3, 1], &mut rng).unwrap();
        ema_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);

        let mut same = online.clone();
        ema_update(&mut same, &online, 0.3).unwrap();
        assert_eq!(same, online);
    }

    #[test]
    fn ema_arithmetic() {
        let mut target = Mlp::from_params(&[1, 1], vec![0.0, 0.0]).unwrap();
        let online = Mlp::from_params(&[1, 1], vec![1.0, 1.0]).unwrap();
        ema_update(&mut target, &online, 0.005).unwrap();
        assert!(target.params().iter().all(|&v| (v - 0.005).abs() < 1e-15));
    }

    #[test]
    fn ema_shape_mismatch() {
        let mut a = Mlp::zeros(&[2, 3, 1]).unwrap();
        let b = Mlp::zeros(&[2, 4, 1]).unwrap();
        assert!(matches!(ema_update(&mut a, &b, 0.5), Err(crate::Error::Shape(_))));
    }
}
