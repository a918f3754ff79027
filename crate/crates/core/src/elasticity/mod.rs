//! Material fields, stress/strain operators and PDE residual kernels.
//!
//! Residuals follow the sign convention `D(u) + f` with
//! `D(u) = div(sigma_lambda(u)) + div(sigma_mu(u))`, so the residual vanishes
//! exactly when `-div(sigma(u)) = f`. Variable-coefficient terms pick up the
//! analytic material gradients supplied by [`MaterialField`].
//!
//! These per-point kernels are the reference implementations; the batched
//! loss assembly in [`crate::losses`] reproduces them plane-wise and is
//! tested against them.

pub mod problems;

pub use problems::{ex4_family, problem_registry, ParamFamily, ProblemChoice, ProblemSpec};

use crate::jet::{seed_spatial, Jet2, MAX_DIM};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("unknown problem name {0:?}")]
    UnknownName(String),
    #[error("parameter {name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("Poisson ratio must lie in (0, 1/2), got {0}")]
    BadPoisson(f64),
    #[error("material field not positive at sampled point {point:?}: {which} = {value}")]
    MaterialNotPositive {
        which: &'static str,
        point: Vec<f64>,
        value: f64,
    },
}

/// Scalar coefficient field: value and spatial gradient at a point.
pub type ScalarField = Arc<dyn Fn(&[f64]) -> (f64, [f64; MAX_DIM]) + Send + Sync>;

/// Lame coefficient fields with their gradients, plus the magnitude scale
/// of `lambda` used by the loss weight rule (`lambda` itself when constant).
#[derive(Clone)]
pub struct MaterialField {
    lambda: ScalarField,
    mu: ScalarField,
    lambda_scale: f64,
}

impl MaterialField {
    pub fn new(lambda: ScalarField, mu: ScalarField, lambda_scale: f64) -> Self {
        MaterialField {
            lambda,
            mu,
            lambda_scale,
        }
    }

    /// Constant coefficients.
    pub fn constant(lambda: f64, mu: f64) -> Self {
        MaterialField {
            lambda: Arc::new(move |_| (lambda, [0.0; MAX_DIM])),
            mu: Arc::new(move |_| (mu, [0.0; MAX_DIM])),
            lambda_scale: lambda,
        }
    }

    #[inline]
    pub fn lambda(&self, x: &[f64]) -> (f64, [f64; MAX_DIM]) {
        (self.lambda)(x)
    }

    #[inline]
    pub fn mu(&self, x: &[f64]) -> (f64, [f64; MAX_DIM]) {
        (self.mu)(x)
    }

    pub fn lambda_scale(&self) -> f64 {
        self.lambda_scale
    }

    /// Check positivity of both coefficients at the given sample points.
    pub fn check_positive(&self, points: &[Vec<f64>]) -> Result<(), ProblemError> {
        for p in points {
            let (lam, _) = self.lambda(p);
            if lam <= 0.0 {
                return Err(ProblemError::MaterialNotPositive {
                    which: "lambda",
                    point: p.clone(),
                    value: lam,
                });
            }
            let (mu, _) = self.mu(p);
            if mu <= 0.0 {
                return Err(ProblemError::MaterialNotPositive {
                    which: "mu",
                    point: p.clone(),
                    value: mu,
                });
            }
        }
        Ok(())
    }
}

/// A displacement evaluation carrying first and second spatial derivatives:
/// one jet per component.
#[derive(Clone, Debug)]
pub struct DisplacementJet {
    components: Vec<Jet2>,
}

impl DisplacementJet {
    pub fn new(components: Vec<Jet2>) -> Self {
        debug_assert!(!components.is_empty());
        DisplacementJet { components }
    }

    /// Evaluate a jet-valued field at a spatial point.
    pub fn of_field(
        field: &dyn Fn(&[Jet2]) -> Vec<Jet2>,
        x: &[f64],
    ) -> Result<Self, crate::jet::JetError> {
        let seeds = seed_spatial(x)?;
        Ok(DisplacementJet::new(field(&seeds)))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    #[inline]
    pub fn component(&self, i: usize) -> &Jet2 {
        &self.components[i]
    }

    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        self.components[i].value()
    }

    #[inline]
    pub fn jac(&self, i: usize, j: usize) -> f64 {
        self.components[i].grad(j)
    }

    /// `div u = sum_j d u_j / d x_j`.
    pub fn div(&self) -> f64 {
        (0..self.dim()).map(|j| self.jac(j, j)).sum()
    }

    /// `(grad div u)_i = sum_k d^2 u_k / d x_k d x_i`.
    pub fn grad_div(&self, i: usize) -> f64 {
        (0..self.dim()).map(|k| self.components[k].hess(k, i)).sum()
    }

    /// `(laplacian u)_i = sum_j d^2 u_i / d x_j^2`.
    pub fn laplacian(&self, i: usize) -> f64 {
        (0..self.dim()).map(|j| self.components[i].hess(j, j)).sum()
    }

    /// Linear combination `a * self + other`, componentwise.
    pub fn scaled_add(&self, a: f64, other: &DisplacementJet) -> DisplacementJet {
        DisplacementJet::new(
            self.components
                .iter()
                .zip(&other.components)
                .map(|(s, o)| *s * a + *o)
                .collect(),
        )
    }
}

/// Symmetric strain tensor `eps = (jac + jac^T) / 2`.
pub fn strain(jac: &[[f64; MAX_DIM]; MAX_DIM], d: usize) -> [[f64; MAX_DIM]; MAX_DIM] {
    let mut eps = [[0.0; MAX_DIM]; MAX_DIM];
    for i in 0..d {
        for j in 0..d {
            eps[i][j] = 0.5 * (jac[i][j] + jac[j][i]);
        }
    }
    eps
}

/// `div(lambda (div u) I) = lambda grad(div u) + (div u) grad(lambda)`.
pub fn div_sigma_lambda(dj: &DisplacementJet, material: &MaterialField, x: &[f64]) -> [f64; MAX_DIM] {
    let d = dj.dim();
    let (lam, dlam) = material.lambda(x);
    let divu = dj.div();
    let mut out = [0.0; MAX_DIM];
    for i in 0..d {
        out[i] = lam * dj.grad_div(i) + divu * dlam[i];
    }
    out
}

/// `div(2 mu eps(u)) = mu (laplacian u + grad(div u)) + 2 eps(u) grad(mu)`.
pub fn div_sigma_mu(dj: &DisplacementJet, material: &MaterialField, x: &[f64]) -> [f64; MAX_DIM] {
    let d = dj.dim();
    let (mu, dmu) = material.mu(x);
    let mut out = [0.0; MAX_DIM];
    for i in 0..d {
        let mut acc = mu * (dj.laplacian(i) + dj.grad_div(i));
        for j in 0..d {
            acc += (dj.jac(i, j) + dj.jac(j, i)) * dmu[j];
        }
        out[i] = acc;
    }
    out
}

/// Full-system residual `D(u) + f`; zero exactly when `-div sigma(u) = f`.
pub fn residual_full(
    dj: &DisplacementJet,
    material: &MaterialField,
    x: &[f64],
    f: &[f64],
) -> [f64; MAX_DIM] {
    let d = dj.dim();
    let dsl = div_sigma_lambda(dj, material, x);
    let dsm = div_sigma_mu(dj, material, x);
    let mut out = [0.0; MAX_DIM];
    for i in 0..d {
        out[i] = dsl[i] + dsm[i] + f[i];
    }
    out
}

/// Body force that makes `exact` solve the system: `f = -(D exact)(x)`.
pub fn manufactured_force(
    exact: &dyn Fn(&[Jet2]) -> Vec<Jet2>,
    material: &MaterialField,
    x: &[f64],
) -> Vec<f64> {
    let dj = DisplacementJet::of_field(exact, x).expect("registry domains are 2D/3D");
    let dsl = div_sigma_lambda(&dj, material, x);
    let dsm = div_sigma_mu(&dj, material, x);
    (0..dj.dim()).map(|i| -(dsl[i] + dsm[i])).collect()
}
