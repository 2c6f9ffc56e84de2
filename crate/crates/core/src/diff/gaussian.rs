//! Diagonal Gaussians: value type, tape handles, reparameterized sampling and KL.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::{softplus, Tape, Var};
use crate::error::{IolError, Result};

/// Lower bound added to every softplus-mapped standard deviation.
pub const STD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(IolError::shape("DiagGaussian std", mean.len(), std.len()));
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite()) || std.iter().any(|s| *s <= 0.0) {
            return Err(IolError::Numerical("DiagGaussian needs finite mean and positive std".into()));
        }
        Ok(DiagGaussian { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Builds the distribution from raw network heads: `std = softplus(raw) + floor`.
    pub fn from_raw(mean: &[f64], std_raw: &[f64]) -> Self {
        DiagGaussian {
            mean: mean.to_vec(),
            std: std_raw.iter().map(|r| softplus(*r) + STD_FLOOR).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + max(std, floor) * eps` with `eps ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| {
                let e: f64 = rng.sample(StandardNormal);
                m + s.max(STD_FLOOR) * e
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.std)
            .zip(x)
            .map(|((m, s), v)| {
                let z = (v - m) / s;
                -0.5 * (z * z + ln_2pi) - s.ln()
            })
            .sum()
    }
}

pub fn kl_diag_values(mq: &[f64], sq: &[f64], mp: &[f64], sp: &[f64]) -> f64 {
    mq.iter()
        .zip(sq)
        .zip(mp.iter().zip(sp))
        .map(|((a, b), (c, d))| {
            let diff = a - c;
            (d / b).ln() + (b * b + diff * diff) / (2.0 * d * d) - 0.5
        })
        .sum()
}

/// Closed-form KL divergence between diagonal Gaussians, summed over coordinates.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(IolError::shape("kl_diag", q.dim(), p.dim()));
    }
    Ok(kl_diag_values(&q.mean, &q.std, &p.mean, &p.std))
}

/// A diagonal Gaussian whose parameters live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GaussVar {
    pub mean: Var,
    pub std: Var,
}

impl GaussVar {
    /// Splits a `2 * dim` head into mean and `softplus(raw) + floor` std.
    pub fn from_head(tape: &mut Tape<'_>, head: Var, dim: usize) -> Self {
        let mean = tape.slice(head, 0, dim);
        let raw = tape.slice(head, dim, dim);
        let sp = tape.softplus(raw);
        let std = tape.add_const(sp, STD_FLOOR);
        GaussVar { mean, std }
    }

    pub fn constant(tape: &mut Tape<'_>, g: &DiagGaussian) -> Self {
        GaussVar {
            mean: tape.input(g.mean.clone()),
            std: tape.input(g.std.clone()),
        }
    }

    pub fn value(&self, tape: &Tape<'_>) -> DiagGaussian {
        DiagGaussian {
            mean: tape.value(self.mean).to_vec(),
            std: tape.value(self.std).to_vec(),
        }
    }

    /// Reparameterized sample `mean + std * eps` for a supplied noise vector.
    pub fn sample_with(&self, tape: &mut Tape<'_>, eps: Var) -> Var {
        let scaled = tape.mul(self.std, eps);
        tape.add(self.mean, scaled)
    }

    pub fn kl(&self, tape: &mut Tape<'_>, p: &GaussVar) -> Var {
        tape.kl_diag(self.mean, self.std, p.mean, p.std)
    }
}

/// Draws `eps ~ N(0, I)` and returns the reparameterized sample together with
/// the noise leaf, so gradients reach both mean and std.
pub fn gaussian_sample_reparam<R: Rng + ?Sized>(tape: &mut Tape<'_>, g: &GaussVar, rng: &mut R) -> (Var, Var) {
    let n = tape.dim(g.mean);
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let eps = tape.input(eps);
    (g.sample_with(tape, eps), eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(m: &[f64], s: &[f64]) -> DiagGaussian {
        DiagGaussian::new(m.to_vec(), s.to_vec()).unwrap()
    }

    #[test]
    fn kl_identity_is_zero() {
        let q = g(&[0.3, -1.0], &[0.5, 2.0]);
        assert_eq!(kl_diag(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn kl_length_mismatch() {
        assert!(kl_diag(&g(&[0.0], &[1.0]), &DiagGaussian::standard(2)).is_err());
    }

    #[test]
    fn kl_known_values() {
        let p = DiagGaussian::standard(1);
        assert!((kl_diag(&g(&[1.0], &[1.0]), &p).unwrap() - 0.5).abs() < 1e-15);
        // N(0, 4) has std 2.
        let v = kl_diag(&g(&[0.0], &[2.0]), &p).unwrap();
        assert!((v - (1.5 - std::f64::consts::LN_2)).abs() < 1e-15);
        assert!((v - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn zero_std_sample_is_mean() {
        let d = DiagGaussian { mean: vec![1.5, -2.0], std: vec![0.0, 0.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = d.sample(&mut rng);
        for (a, b) in s.iter().zip(&d.mean) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn reparam_gradients() {
        let p = ParamSet::new();
        let mut tape = Tape::new(&p);
        let mean = tape.input(vec![0.5, -0.5, 2.0]);
        let std = tape.input(vec![1.0, 0.1, 3.0]);
        let gv = GaussVar { mean, std };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (s, eps) = gaussian_sample_reparam(&mut tape, &gv, &mut rng);
        let eps_v = tape.value(eps).to_vec();
        for k in 0..3 {
            let e = tape.input((0..3).map(|j| if j == k { 1.0 } else { 0.0 }).collect());
            let pick = tape.dot(s, e);
            let dm = tape.input_gradient(pick, mean);
            let ds = tape.input_gradient(pick, std);
            for j in 0..3 {
                assert_eq!(dm[j], if j == k { 1.0 } else { 0.0 });
                assert_eq!(ds[j], if j == k { eps_v[k] } else { 0.0 });
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn kl_is_non_negative(
            pairs in proptest::collection::vec((-5.0f64..5.0, 0.05f64..5.0, -5.0f64..5.0, 0.05f64..5.0), 1..6)
        ) {
            let mq: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let sq: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let mp: Vec<f64> = pairs.iter().map(|p| p.2).collect();
            let sp: Vec<f64> = pairs.iter().map(|p| p.3).collect();
            proptest::prop_assert!(kl_diag_values(&mq, &sq, &mp, &sp) >= -1e-12);
            proptest::prop_assert!(kl_diag_values(&mq, &sq, &mq, &sq).abs() < 1e-12);
        }
    }
}
