//! Second-order forward-mode jets.
//!
//! A [`Jet2`] carries a scalar value together with its full gradient and
//! (packed symmetric) Hessian with respect to the spatial coordinates.
//! Evaluating an expression on seeded jets yields exact first and second
//! derivatives via the chain rule, which is what the PDE residuals need.

use thiserror::Error;

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;
/// Packed Hessian length for `MAX_DIM`.
pub const MAX_HESS: usize = 6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum JetError {
    #[error("spatial dimension must be 1, 2 or 3, got {0}")]
    UnsupportedDim(usize),
    #[error("seed points must have dimension 2 or 3, got {0}")]
    BadSeedDim(usize),
    #[error("axis {axis} out of range for dimension {dim}")]
    AxisOutOfRange { axis: usize, dim: usize },
    #[error("division by zero in jet arithmetic")]
    DivisionByZero,
    #[error("primitive not differentiable at the given value")]
    DomainError,
}

/// Number of packed upper-triangle Hessian entries for dimension `d`.
#[inline]
pub const fn hess_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Packed index of the `(j, k)` Hessian entry (order-insensitive).
#[inline]
pub const fn hess_index(d: usize, j: usize, k: usize) -> usize {
    let (j, k) = if j <= k { (j, k) } else { (k, j) };
    j * (2 * d - j - 1) / 2 + k
}

/// Value plus exact first and second spatial derivatives.
///
/// Only the upper triangle of the Hessian is stored, so symmetry holds by
/// construction. The spatial dimension is carried at runtime (1..=3); binary
/// operations require both operands to share it.
#[derive(Clone, Copy, Debug)]
pub struct Jet2 {
    pub(crate) dim: u8,
    pub(crate) v: f64,
    pub(crate) g: [f64; MAX_DIM],
    pub(crate) h: [f64; MAX_HESS],
}

impl Jet2 {
    /// A constant: zero gradient and Hessian.
    pub fn constant(dim: usize, v: f64) -> Self {
        debug_assert!((1..=MAX_DIM).contains(&dim));
        Jet2 {
            dim: dim as u8,
            v,
            g: [0.0; MAX_DIM],
            h: [0.0; MAX_HESS],
        }
    }

    /// The coordinate variable along `axis`: unit gradient, zero Hessian.
    pub fn variable(dim: usize, v: f64, axis: usize) -> Result<Self, JetError> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(JetError::UnsupportedDim(dim));
        }
        if axis >= dim {
            return Err(JetError::AxisOutOfRange { axis, dim });
        }
        let mut j = Jet2::constant(dim, v);
        j.g[axis] = 1.0;
        Ok(j)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.v
    }

    #[inline]
    pub fn grad(&self, j: usize) -> f64 {
        debug_assert!(j < self.dim());
        self.g[j]
    }

    #[inline]
    pub fn hess(&self, j: usize, k: usize) -> f64 {
        debug_assert!(j < self.dim() && k < self.dim());
        self.h[hess_index(self.dim(), j, k)]
    }

    /// Gradient as a slice of length `dim`.
    #[inline]
    pub fn grad_slice(&self) -> &[f64] {
        &self.g[..self.dim()]
    }

    /// Packed Hessian as a slice of length `dim (dim + 1) / 2`.
    #[inline]
    pub fn hess_packed(&self) -> &[f64] {
        &self.h[..hess_len(self.dim())]
    }

    /// Apply a scalar primitive with derivatives `f = (f(v), f'(v), f''(v))`.
    #[inline]
    pub(crate) fn lift(&self, f0: f64, f1: f64, f2: f64) -> Jet2 {
        let d = self.dim();
        let mut out = Jet2::constant(d, f0);
        for j in 0..d {
            out.g[j] = f1 * self.g[j];
        }
        let mut idx = 0;
        for j in 0..d {
            for k in j..d {
                out.h[idx] = f1 * self.h[idx] + f2 * self.g[j] * self.g[k];
                idx += 1;
            }
        }
        out
    }

    pub fn sin(&self) -> Jet2 {
        let (s, c) = (self.v.sin(), self.v.cos());
        self.lift(s, c, -s)
    }

    pub fn cos(&self) -> Jet2 {
        let (s, c) = (self.v.sin(), self.v.cos());
        self.lift(c, -s, -c)
    }

    pub fn exp(&self) -> Jet2 {
        let e = self.v.exp();
        self.lift(e, e, e)
    }

    pub fn erf(&self) -> Jet2 {
        let e0 = libm::erf(self.v);
        let e1 = std::f64::consts::FRAC_2_SQRT_PI * (-self.v * self.v).exp();
        self.lift(e0, e1, -2.0 * self.v * e1)
    }

    /// GELU in its exact form `v * Phi(v)` with `Phi` the standard normal CDF.
    pub fn gelu(&self) -> Jet2 {
        let (g0, g1, g2, _) = gelu_derivs(self.v);
        self.lift(g0, g1, g2)
    }

    pub fn recip(&self) -> Jet2 {
        let w = 1.0 / self.v;
        self.lift(w, -w * w, 2.0 * w * w * w)
    }

    pub fn powi(&self, n: i32) -> Jet2 {
        let (f0, f1, f2, _) = powi_derivs(self.v, n);
        self.lift(f0, f1, f2)
    }
}

/// Unary primitives accepted by [`jet_apply`] and the adjoint tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryPrimitive {
    Neg,
    Sin,
    Cos,
    Exp,
    Erf,
    Gelu,
    Recip,
    Powi(i32),
}

/// Value and first three derivatives of a unary primitive at `v`.
pub(crate) fn unary_derivs(op: UnaryPrimitive, v: f64) -> (f64, f64, f64, f64) {
    match op {
        UnaryPrimitive::Neg => (-v, -1.0, 0.0, 0.0),
        UnaryPrimitive::Sin => {
            let (s, c) = (v.sin(), v.cos());
            (s, c, -s, -c)
        }
        UnaryPrimitive::Cos => {
            let (s, c) = (v.sin(), v.cos());
            (c, -s, -c, s)
        }
        UnaryPrimitive::Exp => {
            let e = v.exp();
            (e, e, e, e)
        }
        UnaryPrimitive::Erf => {
            let e0 = libm::erf(v);
            let e1 = std::f64::consts::FRAC_2_SQRT_PI * (-v * v).exp();
            (e0, e1, -2.0 * v * e1, (4.0 * v * v - 2.0) * e1)
        }
        UnaryPrimitive::Gelu => gelu_derivs(v),
        UnaryPrimitive::Recip => {
            let w = 1.0 / v;
            let w2 = w * w;
            (w, -w2, 2.0 * w2 * w, -6.0 * w2 * w2)
        }
        UnaryPrimitive::Powi(n) => powi_derivs(v, n),
    }
}

/// `1 / sqrt(2 pi)`.
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via `erf`.
#[inline]
pub fn normal_cdf(v: f64) -> f64 {
    0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(v: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * v * v).exp()
}

/// GELU `v * Phi(v)` and its first three derivatives.
#[inline]
pub fn gelu_derivs(v: f64) -> (f64, f64, f64, f64) {
    let cdf = normal_cdf(v);
    let pdf = normal_pdf(v);
    (
        v * cdf,
        cdf + v * pdf,
        (2.0 - v * v) * pdf,
        (v * v * v - 4.0 * v) * pdf,
    )
}

fn powi_derivs(v: f64, n: i32) -> (f64, f64, f64, f64) {
    let nf = n as f64;
    match n {
        0 => (1.0, 0.0, 0.0, 0.0),
        1 => (v, 1.0, 0.0, 0.0),
        2 => (v * v, 2.0 * v, 2.0, 0.0),
        _ => (
            v.powi(n),
            nf * v.powi(n - 1),
            nf * (nf - 1.0) * v.powi(n - 2),
            nf * (nf - 1.0) * (nf - 2.0) * v.powi(n - 3),
        ),
    }
}

/// Apply a unary primitive with domain checking.
pub fn jet_apply(op: UnaryPrimitive, x: &Jet2) -> Result<Jet2, JetError> {
    match op {
        UnaryPrimitive::Recip if x.v == 0.0 => return Err(JetError::DivisionByZero),
        UnaryPrimitive::Powi(n) if n < 0 && x.v == 0.0 => return Err(JetError::DomainError),
        _ => {}
    }
    let (f0, f1, f2, _) = unary_derivs(op, x.v);
    Ok(x.lift(f0, f1, f2))
}

/// Seed a spatial point as coordinate jets: leaf `j` has value `point[j]`,
/// unit gradient along axis `j` and zero Hessian.
pub fn seed_spatial(point: &[f64]) -> Result<Vec<Jet2>, JetError> {
    let d = point.len();
    if d != 2 && d != 3 {
        return Err(JetError::BadSeedDim(d));
    }
    Ok(point
        .iter()
        .enumerate()
        .map(|(j, &v)| Jet2::variable(d, v, j).expect("dim checked"))
        .collect())
}

macro_rules! check_dims {
    ($a:expr, $b:expr) => {
        debug_assert_eq!($a.dim, $b.dim, "jet dimension mismatch");
    };
}

impl std::ops::Add for Jet2 {
    type Output = Jet2;
    #[inline]
    fn add(self, rhs: Jet2) -> Jet2 {
        check_dims!(self, rhs);
        let mut out = self;
        out.v += rhs.v;
        for j in 0..MAX_DIM {
            out.g[j] += rhs.g[j];
        }
        for j in 0..MAX_HESS {
            out.h[j] += rhs.h[j];
        }
        out
    }
}

impl std::ops::Sub for Jet2 {
    type Output = Jet2;
    #[inline]
    fn sub(self, rhs: Jet2) -> Jet2 {
        check_dims!(self, rhs);
        let mut out = self;
        out.v -= rhs.v;
        for j in 0..MAX_DIM {
            out.g[j] -= rhs.g[j];
        }
        for j in 0..MAX_HESS {
            out.h[j] -= rhs.h[j];
        }
        out
    }
}

impl std::ops::Neg for Jet2 {
    type Output = Jet2;
    #[inline]
    fn neg(self) -> Jet2 {
        let mut out = self;
        out.v = -out.v;
        for j in 0..MAX_DIM {
            out.g[j] = -out.g[j];
        }
        for j in 0..MAX_HESS {
            out.h[j] = -out.h[j];
        }
        out
    }
}

impl std::ops::Mul for Jet2 {
    type Output = Jet2;
    #[inline]
    fn mul(self, rhs: Jet2) -> Jet2 {
        check_dims!(self, rhs);
        let d = self.dim();
        let mut out = Jet2::constant(d, self.v * rhs.v);
        for j in 0..d {
            out.g[j] = self.g[j] * rhs.v + self.v * rhs.g[j];
        }
        let mut idx = 0;
        for j in 0..d {
            for k in j..d {
                out.h[idx] = self.v * rhs.h[idx]
                    + rhs.v * self.h[idx]
                    + self.g[j] * rhs.g[k]
                    + self.g[k] * rhs.g[j];
                idx += 1;
            }
        }
        out
    }
}

impl std::ops::Div for Jet2 {
    type Output = Jet2;
    #[inline]
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, rhs: Jet2) -> Jet2 {
        self * rhs.recip()
    }
}

impl std::ops::Add<f64> for Jet2 {
    type Output = Jet2;
    #[inline]
    fn add(self, rhs: f64) -> Jet2 {
        let mut out = self;
        out.v += rhs;
        out
    }
}

impl std::ops::Sub<f64> for Jet2 {
    type Output = Jet2;
    #[inline]
    fn sub(self, rhs: f64) -> Jet2 {
        let mut out = self;
        out.v -= rhs;
        out
    }
}

impl std::ops::Mul<f64> for Jet2 {
    type Output = Jet2;
    #[inline]
    fn mul(self, rhs: f64) -> Jet2 {
        let mut out = self;
        out.v *= rhs;
        for j in 0..MAX_DIM {
            out.g[j] *= rhs;
        }
        for j in 0..MAX_HESS {
            out.h[j] *= rhs;
        }
        out
    }
}

impl std::ops::Div<f64> for Jet2 {
    type Output = Jet2;
    #[inline]
    fn div(self, rhs: f64) -> Jet2 {
        self * (1.0 / rhs)
    }
}

impl std::ops::Mul<Jet2> for f64 {
    type Output = Jet2;
    #[inline]
    fn mul(self, rhs: Jet2) -> Jet2 {
        rhs * self
    }
}

impl std::ops::Add<Jet2> for f64 {
    type Output = Jet2;
    #[inline]
    fn add(self, rhs: Jet2) -> Jet2 {
        rhs + self
    }
}

impl std::ops::Sub<Jet2> for f64 {
    type Output = Jet2;
    #[inline]
    fn sub(self, rhs: Jet2) -> Jet2 {
        -rhs + self
    }
}
