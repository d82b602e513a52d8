//! Small seeded sampling helpers shared by the generators.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

/// One draw from a symmetric Dirichlet(α) on `k` coordinates, built from
/// normalized Gamma(α, 1) variates.
pub fn symmetric_dirichlet<R: Rng + ?Sized>(rng: &mut R, k: usize, alpha: f64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Precondition("dirichlet needs at least one coordinate".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Precondition(format!("dirichlet concentration must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Precondition(e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // tiny α can underflow every coordinate to zero; redraw
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn draws_lie_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for alpha in [0.05, 0.5, 1.0, 10.0] {
            for _ in 0..100 {
                let v = symmetric_dirichlet(&mut rng, 4, alpha).unwrap();
                assert!(v.iter().all(|&x| x >= 0.0));
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(symmetric_dirichlet(&mut rng, 3, 0.0).is_err());
        assert!(symmetric_dirichlet(&mut rng, 0, 1.0).is_err());
    }
}
