//! Central finite-difference verification of the analytic gradient.
//! Only available in double precision; single-precision differencing is
//! too noisy to say anything.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::transformer::TinyLm;

/// Below this magnitude the relative error degenerates to the absolute
/// error, so zero-gradient directions do not divide by zero.
const DENOM_FLOOR: f64 = 1e-8;

impl TinyLm<f64> {
    /// Compares the analytic gradient against central finite differences
    /// on `n_coords` randomly sampled coordinates (all coordinates when
    /// the model is smaller than that) and returns the maximum relative
    /// error.
    pub fn grad_check(
        &mut self,
        batch: &[(Vec<u32>, Vec<bool>)],
        epsilon: f64,
        n_coords: usize,
        seed: u64,
    ) -> Result<f64> {
        let (_, grad) = self.batch_grad(batch, 0)?;
        let total = self.params.len();
        let coords: Vec<usize> = if total <= n_coords {
            (0..total).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, total, n_coords).into_vec()
        };
        let mut worst = 0.0f64;
        for idx in coords {
            let orig = self.params[idx];
            self.params[idx] = orig + epsilon;
            let plus = self.batch_nll(batch)?;
            self.params[idx] = orig - epsilon;
            let minus = self.batch_nll(batch)?;
            self.params[idx] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grad[idx];
            let denom = analytic.abs().max(numeric.abs());
            let err = if denom < DENOM_FLOOR {
                (analytic - numeric).abs()
            } else {
                (analytic - numeric).abs() / denom
            };
            if err > worst {
                worst = err;
            }
        }
        Ok(worst)
    }
}
