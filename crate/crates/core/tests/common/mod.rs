//! Brute-force numerical integration of the ELBO for a one-variable,
//! one-factor model. Nothing here calls library code: Gaussian expectations
//! use Gauss-Hermite rules and gamma expectations use the trapezoid rule in
//! log space, with every normalizing constant integrated numerically.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights for `integral exp(-t^2) f(t) dt` (Golub-Welsch).
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            ((i.max(j)) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], PI.sqrt() * v0 * v0)
        })
        .collect()
}

/// Probability-weighted nodes of `N(mean, var)`.
pub fn normal_rule(mean: f64, var: f64, n: usize) -> Vec<(f64, f64)> {
    gauss_hermite(n)
        .into_iter()
        .map(|(t, w)| (mean + (2.0 * var).sqrt() * t, w / PI.sqrt()))
        .collect()
}

const STEP: f64 = 0.02;

fn log_grid(shape: f64, rate: f64) -> Vec<f64> {
    let centre = (shape / rate).ln();
    let (lo, hi) = (centre - 30.0, centre + 5.0);
    let n = ((hi - lo) / STEP).ceil() as usize;
    (0..=n).map(|k| lo + k as f64 * STEP).collect()
}

/// `ln integral x^(a-1) e^(-b x) dx`, i.e. `ln Gamma(a) - a ln b`, by quadrature.
pub fn ln_gamma_normalizer(shape: f64, rate: f64) -> f64 {
    let total: f64 = log_grid(shape, rate)
        .iter()
        .map(|u| (shape * u - rate * u.exp()).exp() * STEP)
        .sum();
    total.ln()
}

/// Probability-weighted nodes of `Gamma(shape, rate)`.
pub fn gamma_rule(shape: f64, rate: f64) -> Vec<(f64, f64)> {
    let ln_z = ln_gamma_normalizer(shape, rate);
    log_grid(shape, rate)
        .into_iter()
        .map(|u| (u.exp(), (shape * u - rate * u.exp() - ln_z).exp() * STEP))
        .collect()
}

fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
}

#[derive(Debug, Clone, Copy)]
pub struct Normal {
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Gamma {
    pub shape: f64,
    pub rate: f64,
}

/// Variational factors and prior settings of the model
/// `x_i ~ N(lambda l_i, 1/psi)`, `l_i ~ N(0, 1)`, `lambda ~ N(0, 1/(omega delta))`,
/// `psi ~ Ga(a_psi, b_psi)`, `omega ~ Ga(nu/2, nu/2)`, `delta ~ Ga(a1, 1)`.
pub struct ToyModel {
    pub x: Vec<f64>,
    pub lambda: Normal,
    pub scores: Vec<Normal>,
    pub psi: Gamma,
    pub omega: Gamma,
    pub delta: Gamma,
    pub nu: f64,
    pub a1: f64,
    pub a_psi: f64,
    pub b_psi: f64,
}

const HERMITE_NODES: usize = 24;

impl ToyModel {
    /// `E_q[log p(theta, x)] - E_q[log q(theta)]`.
    pub fn elbo_by_quadrature(&self) -> f64 {
        let lam = normal_rule(self.lambda.mean, self.lambda.var, HERMITE_NODES);
        let psi = gamma_rule(self.psi.shape, self.psi.rate);
        let omega = gamma_rule(self.omega.shape, self.omega.rate);
        let delta = gamma_rule(self.delta.shape, self.delta.rate);

        let mut total = 0.0;
        for (x, sc) in self.x.iter().zip(&self.scores) {
            let l = normal_rule(sc.mean, sc.var, HERMITE_NODES);
            for &(p, wp) in &psi {
                let mut inner = 0.0;
                for &(a, wa) in &lam {
                    for &(b, wb) in &l {
                        inner += wa * wb * ln_normal(*x, a * b, 1.0 / p);
                    }
                }
                total += wp * inner;
            }
            for &(b, wb) in &l {
                total += wb * (ln_normal(b, 0.0, 1.0) - ln_normal(b, sc.mean, sc.var));
            }
        }
        for &(o, wo) in &omega {
            for &(d, wd) in &delta {
                let mut inner = 0.0;
                for &(a, wa) in &lam {
                    inner += wa * ln_normal(a, 0.0, 1.0 / (o * d));
                }
                total += wo * wd * inner;
            }
        }
        for &(a, wa) in &lam {
            total -= wa * ln_normal(a, self.lambda.mean, self.lambda.var);
        }
        let gamma_terms = [
            (&psi, self.psi, self.a_psi, self.b_psi),
            (&omega, self.omega, self.nu / 2.0, self.nu / 2.0),
            (&delta, self.delta, self.a1, 1.0),
        ];
        for (rule, q, a, b) in gamma_terms {
            let ln_zp = ln_gamma_normalizer(a, b);
            let ln_zq = ln_gamma_normalizer(q.shape, q.rate);
            for &(v, w) in rule.iter() {
                let prior = (a - 1.0) * v.ln() - b * v - ln_zp;
                let own = (q.shape - 1.0) * v.ln() - q.rate * v - ln_zq;
                total += w * (prior - own);
            }
        }
        total
    }
}

/// Largest error of the rules on moments and constants known in closed form.
pub fn rule_error() -> f64 {
    let second: f64 = normal_rule(1.5, 0.3, 20).iter().map(|(x, w)| w * x * x).sum();
    let g = gamma_rule(2.5, 1.7);
    let mass: f64 = g.iter().map(|(_, w)| w).sum();
    let mean: f64 = g.iter().map(|(x, w)| w * x).sum();
    // Gamma(1) = 1, Gamma(5) = 24
    [
        second - (1.5 * 1.5 + 0.3),
        mass - 1.0,
        mean - 2.5 / 1.7,
        ln_gamma_normalizer(1.0, 1.0),
        ln_gamma_normalizer(5.0, 1.0) - 24f64.ln(),
    ]
    .iter()
    .fold(0.0, |m, e| m.max(e.abs()))
}
