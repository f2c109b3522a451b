//! Ground-truth generators and samplers for simulation studies.
//!
//! Loading entries are zero with probability 2/3 and Uniform(0, 1) otherwise;
//! idiosyncratic variances are Uniform(0.1, 1). Data are drawn through the
//! latent construction `x = L z + e`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Result, VbError};
use crate::model::{Dataset, MultiStudyDataset};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FaTruth {
    pub lambda: DMatrix<f64>,
    /// Idiosyncratic variances.
    pub psi: DVector<f64>,
}

impl FaTruth {
    pub fn sigma(&self) -> DMatrix<f64> {
        &self.lambda * self.lambda.transpose() + DMatrix::from_diagonal(&self.psi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsfaTruth {
    pub phi: DMatrix<f64>,
    pub lambdas: Vec<DMatrix<f64>>,
    pub psis: Vec<DVector<f64>>,
}

impl MsfaTruth {
    pub fn num_studies(&self) -> usize {
        self.lambdas.len()
    }

    pub fn sigma(&self, s: usize) -> DMatrix<f64> {
        &self.phi * self.phi.transpose()
            + &self.lambdas[s] * self.lambdas[s].transpose()
            + DMatrix::from_diagonal(&self.psis[s])
    }

    /// `[Phi, Lambda_s]` and `Psi_s` as a single-study truth.
    pub fn study(&self, s: usize) -> FaTruth {
        let p = self.phi.nrows();
        let k = self.phi.ncols();
        let j = self.lambdas[s].ncols();
        let mut lambda = DMatrix::zeros(p, k + j);
        lambda.columns_mut(0, k).copy_from(&self.phi);
        lambda.columns_mut(k, j).copy_from(&self.lambdas[s]);
        FaTruth {
            lambda,
            psi: self.psis[s].clone(),
        }
    }
}

fn sparse_uniform_matrix(p: usize, j: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    DMatrix::from_fn(p, j, |_, _| {
        let keep = rng.random_bool(1.0 / 3.0);
        let value = unit.sample(rng);
        if keep {
            value
        } else {
            0.0
        }
    })
}

fn variances(p: usize, rng: &mut ChaCha20Rng) -> DVector<f64> {
    let u = Uniform::new(0.1, 1.0).expect("valid range");
    DVector::from_fn(p, |_, _| u.sample(rng))
}

fn require_positive(values: &[(usize, &str)]) -> Result<()> {
    for (v, name) in values {
        if *v == 0 {
            return Err(VbError::Config(format!("{name} must be at least 1")));
        }
    }
    Ok(())
}

pub fn generate_fa_truth(p: usize, j: usize, seed: u64) -> Result<FaTruth> {
    require_positive(&[(p, "P"), (j, "J")])?;
    let mut rng = rng::stream(seed, &[rng::TRUTH]);
    let lambda = sparse_uniform_matrix(p, j, &mut rng);
    let psi = variances(p, &mut rng);
    Ok(FaTruth { lambda, psi })
}

fn latent_draws(lambda: &DMatrix<f64>, psi: &DVector<f64>, n: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
    let p = lambda.nrows();
    let z = DMatrix::from_fn(n, lambda.ncols(), |_, _| -> f64 { StandardNormal.sample(rng) });
    let sd: Vec<f64> = psi.iter().map(|v| v.sqrt()).collect();
    let e = DMatrix::from_fn(n, p, |_, c| {
        let z: f64 = StandardNormal.sample(rng);
        sd[c] * z
    });
    z * lambda.transpose() + e
}

/// `n` raw (uncentered) draws from `N(0, L L^T + Psi)`.
pub fn sample_fa_dataset(truth: &FaTruth, n: usize, seed: u64) -> Result<Dataset> {
    require_positive(&[(n, "N")])?;
    let mut rng = rng::stream(seed, &[rng::SAMPLE, 0]);
    Dataset::new(latent_draws(&truth.lambda, &truth.psi, n, &mut rng))
}

pub fn generate_msfa_truth(s: usize, p: usize, k: usize, j_s: &[usize], seed: u64) -> Result<MsfaTruth> {
    require_positive(&[(s, "S"), (p, "P")])?;
    if j_s.len() != s {
        return Err(VbError::Config(format!("{} study-specific dimensions for {s} studies", j_s.len())));
    }
    let mut rng = rng::stream(seed, &[rng::TRUTH]);
    let phi = sparse_uniform_matrix(p, k, &mut rng);
    let lambdas = j_s.iter().map(|&j| sparse_uniform_matrix(p, j, &mut rng)).collect();
    let psis = (0..s).map(|_| variances(p, &mut rng)).collect();
    Ok(MsfaTruth { phi, lambdas, psis })
}

/// Raw draws for every study, each from its own random stream.
pub fn sample_msfa_dataset(truth: &MsfaTruth, n_s: &[usize], seed: u64) -> Result<MultiStudyDataset> {
    if n_s.len() != truth.num_studies() {
        return Err(VbError::Config(format!(
            "{} sample sizes for {} studies",
            n_s.len(),
            truth.num_studies()
        )));
    }
    let studies = n_s
        .iter()
        .enumerate()
        .map(|(s, &n)| {
            require_positive(&[(n, "N_s")])?;
            let mut rng = rng::stream(seed, &[rng::SAMPLE, s as u64]);
            let t = truth.study(s);
            Dataset::new(latent_draws(&t.lambda, &t.psi, n, &mut rng))
        })
        .collect::<Result<Vec<_>>>()?;
    MultiStudyDataset::new(studies)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparsity_and_support() {
        let t = generate_fa_truth(1000, 10, 3).unwrap();
        let zeros = t.lambda.iter().filter(|v| **v == 0.0).count() as f64 / 1e4;
        assert!((zeros - 2.0 / 3.0).abs() <= 0.02, "{zeros}");
        assert!(t.lambda.iter().all(|v| (0.0..1.0).contains(v)));
        assert!(t.psi.iter().all(|v| (0.1..=1.0).contains(v)));
        assert_eq!(t, generate_fa_truth(1000, 10, 3).unwrap());
        assert_ne!(t, generate_fa_truth(1000, 10, 4).unwrap());
    }

    #[test]
    fn zero_sizes_rejected() {
        let t = generate_fa_truth(3, 1, 0).unwrap();
        assert!(sample_fa_dataset(&t, 0, 0).is_err());
        assert!(generate_fa_truth(0, 1, 0).is_err());
    }

    #[test]
    fn moments_match_truth() {
        let t = generate_fa_truth(5, 2, 11).unwrap();
        let n = 100_000;
        let d = sample_fa_dataset(&t, n, 12).unwrap();
        let sigma = t.sigma();
        let cov = d.x.transpose() * &d.x / n as f64;
        for a in 0..5 {
            let se_mean = (sigma[(a, a)] / n as f64).sqrt();
            assert!(d.column_means[a].abs() <= 3.0 * se_mean);
            for b in 0..5 {
                let se = ((sigma[(a, a)] * sigma[(b, b)] + sigma[(a, b)].powi(2)) / n as f64).sqrt();
                assert!((cov[(a, b)] - sigma[(a, b)]).abs() <= 3.0 * se + 1e-12, "({a},{b})");
            }
        }
    }

    #[test]
    fn multi_study_draws() {
        let t = generate_msfa_truth(2, 6, 2, &[1, 3], 5).unwrap();
        assert_eq!(t.lambdas[1].ncols(), 3);
        let d = sample_msfa_dataset(&t, &[50, 70], 6).unwrap();
        assert_eq!(d.studies[1].n(), 70);
        assert_eq!(d, sample_msfa_dataset(&t, &[50, 70], 6).unwrap());
        let single = generate_msfa_truth(1, 4, 1, &[2], 8).unwrap();
        let a = sample_msfa_dataset(&single, &[10], 9).unwrap();
        let stacked = single.study(0);
        assert_eq!(stacked.lambda.ncols(), 3);
        assert!((single.sigma(0) - stacked.sigma()).amax() < 1e-15);
        assert_eq!(a.studies[0], sample_fa_dataset(&stacked, 10, 9).unwrap());
    }
}
