//! Manufactured-solution problem registry.
//!
//! Each registered problem supplies domain, material fields, a closed-form
//! displacement evaluated in jet arithmetic, the body force derived from it,
//! and matching Dirichlet data.

use super::{manufactured_force, MaterialField, ProblemError, ScalarField};
use crate::jet::{Jet2, MAX_DIM};
use crate::network::VectorFn;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Axis-aligned box domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Domain {
    pub dim: usize,
    pub lo: [f64; MAX_DIM],
    pub hi: [f64; MAX_DIM],
}

impl Domain {
    pub fn square(side: f64) -> Self {
        Domain {
            dim: 2,
            lo: [0.0; MAX_DIM],
            hi: [side, side, 0.0],
        }
    }

    pub fn cube(side: f64) -> Self {
        Domain {
            dim: 3,
            lo: [0.0; MAX_DIM],
            hi: [side, side, side],
        }
    }

    pub fn side(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim).map(|a| self.side(a)).product()
    }

    /// Total boundary measure (perimeter in 2D, surface area in 3D).
    pub fn boundary_measure(&self) -> f64 {
        match self.dim {
            2 => 2.0 * (self.side(0) + self.side(1)),
            3 => {
                let (a, b, c) = (self.side(0), self.side(1), self.side(2));
                2.0 * (a * b + b * c + a * c)
            }
            _ => unreachable!("domains are 2D or 3D"),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim).all(|a| x[a] > self.lo[a] && x[a] < self.hi[a])
    }
}

/// Jet-valued closed-form displacement field.
pub type ExactFn = Arc<dyn Fn(&[Jet2]) -> Vec<Jet2> + Send + Sync>;

/// A fully specified boundary-value problem.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub domain: Domain,
    pub material: MaterialField,
    pub exact: Option<ExactFn>,
    pub body_force: VectorFn,
    pub boundary: VectorFn,
}

impl ProblemSpec {
    /// Exact displacement values at a point (available for every registered
    /// problem; they are all manufactured).
    pub fn exact_values(&self, x: &[f64]) -> Option<Vec<f64>> {
        let exact = self.exact.as_ref()?;
        let seeds = crate::jet::seed_spatial(x).ok()?;
        Some(exact(&seeds).iter().map(|j| j.value()).collect())
    }
}

/// Problem selection with its scalar parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ProblemChoice {
    /// 2D square, constant coefficients.
    Ex1 { lambda: f64 },
    /// 3D cube, constant coefficients.
    Ex2 { lambda: f64 },
    /// 2D square, variable coefficients scaled by `lambda_scale`.
    Ex3 { lambda_scale: f64 },
    /// 2D square, coefficients from Young's modulus and Poisson ratio.
    Ex4 { e: f64, nu: f64 },
}

impl ProblemChoice {
    pub fn label(&self) -> &'static str {
        match self {
            ProblemChoice::Ex1 { .. } => "ex1",
            ProblemChoice::Ex2 { .. } => "ex2",
            ProblemChoice::Ex3 { .. } => "ex3",
            ProblemChoice::Ex4 { .. } => "ex4",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ProblemChoice::Ex2 { .. } => 3,
            _ => 2,
        }
    }
}

/// Lame coefficients from `(E, nu)`; requires `0 < nu < 1/2`.
pub fn lame_from_e_nu(e: f64, nu: f64) -> Result<(f64, f64), ProblemError> {
    if e <= 0.0 {
        return Err(ProblemError::NonPositive {
            name: "E",
            value: e,
        });
    }
    if nu <= 0.0 || nu >= 0.5 {
        return Err(ProblemError::BadPoisson(nu));
    }
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    Ok((lambda, mu))
}

/// Leading (lambda-independent) term of the 2D manufactured solution. It is
/// divergence-free, which the tests exploit.
pub fn ex1_leading_term(s: &[Jet2]) -> Vec<Jet2> {
    let (x, y) = (s[0], s[1]);
    vec![
        ((x * 2.0).cos() - 1.0) * (y * 2.0).sin(),
        (1.0 - (y * 2.0).cos()) * (x * 2.0).sin(),
    ]
}

fn ex1_exact(inv_lambda: f64) -> ExactFn {
    Arc::new(move |s: &[Jet2]| {
        let (x, y) = (s[0], s[1]);
        let bump = x.sin() * y.sin() * inv_lambda;
        let lead = ex1_leading_term(s);
        vec![lead[0] + bump, lead[1] + bump]
    })
}

fn ex2_exact(inv_lambda: f64) -> ExactFn {
    Arc::new(move |s: &[Jet2]| {
        let (x, y, z) = (s[0], s[1], s[2]);
        vec![
            z.powi(3) * x.sin() * y.sin() + x.sin() * inv_lambda,
            z.powi(3) * x.cos() * y.cos() * 5.0 + y.sin() * inv_lambda,
            z.powi(4) * x.cos() * y.sin() + z.sin() * inv_lambda,
        ]
    })
}

fn build(
    name: String,
    domain: Domain,
    material: MaterialField,
    exact: ExactFn,
) -> Result<ProblemSpec, ProblemError> {
    // Positivity probe on a fixed lattice of interior points.
    let mut probes = Vec::new();
    let steps = 5usize;
    let mut idx = vec![1usize; domain.dim];
    loop {
        let p: Vec<f64> = (0..domain.dim)
            .map(|a| domain.lo[a] + domain.side(a) * idx[a] as f64 / (steps as f64 + 1.0))
            .collect();
        probes.push(p);
        let mut carry = 0;
        loop {
            if carry == domain.dim {
                break;
            }
            idx[carry] += 1;
            if idx[carry] <= steps {
                break;
            }
            idx[carry] = 1;
            carry += 1;
        }
        if carry == domain.dim {
            break;
        }
    }
    material.check_positive(&probes)?;

    let force_material = material.clone();
    let force_exact = Arc::clone(&exact);
    let body_force: VectorFn = Arc::new(move |x: &[f64]| {
        manufactured_force(force_exact.as_ref(), &force_material, x)
    });
    let boundary_exact = Arc::clone(&exact);
    let boundary: VectorFn = Arc::new(move |x: &[f64]| {
        let seeds = crate::jet::seed_spatial(x).expect("2D/3D domains");
        boundary_exact(&seeds).iter().map(|j| j.value()).collect()
    });
    Ok(ProblemSpec {
        name,
        domain,
        material,
        exact: Some(exact),
        body_force,
        boundary,
    })
}

/// Construct a registered problem.
pub fn problem_registry(choice: ProblemChoice) -> Result<ProblemSpec, ProblemError> {
    match choice {
        ProblemChoice::Ex1 { lambda } => {
            if lambda <= 0.0 {
                return Err(ProblemError::NonPositive {
                    name: "lambda",
                    value: lambda,
                });
            }
            build(
                format!("ex1(lambda={lambda:e})"),
                Domain::square(std::f64::consts::PI),
                MaterialField::constant(lambda, 1.0),
                ex1_exact(1.0 / lambda),
            )
        }
        ProblemChoice::Ex2 { lambda } => {
            if lambda <= 0.0 {
                return Err(ProblemError::NonPositive {
                    name: "lambda",
                    value: lambda,
                });
            }
            build(
                format!("ex2(lambda={lambda:e})"),
                Domain::cube(1.0),
                MaterialField::constant(lambda, 1.0),
                ex2_exact(1.0 / lambda),
            )
        }
        ProblemChoice::Ex3 { lambda_scale } => {
            if lambda_scale <= 0.0 {
                return Err(ProblemError::NonPositive {
                    name: "lambda_scale",
                    value: lambda_scale,
                });
            }
            let lam: ScalarField = Arc::new(move |x: &[f64]| {
                (
                    lambda_scale * (1.0 + 0.5 * (2.0 * x[0]).sin()),
                    [lambda_scale * (2.0 * x[0]).cos(), 0.0, 0.0],
                )
            });
            let mu: ScalarField =
                Arc::new(|x: &[f64]| (1.0 + x[0] + x[1], [1.0, 1.0, 0.0]));
            build(
                format!("ex3(Lambda={lambda_scale:e})"),
                Domain::square(std::f64::consts::PI),
                MaterialField::new(lam, mu, lambda_scale),
                ex1_exact(1.0 / lambda_scale),
            )
        }
        ProblemChoice::Ex4 { e, nu } => {
            let (lambda, mu) = lame_from_e_nu(e, nu)?;
            build(
                format!("ex4(E={e},nu={nu})"),
                Domain::square(std::f64::consts::PI),
                MaterialField::constant(lambda, mu),
                ex1_exact(1.0 / lambda),
            )
        }
    }
}

/// The parametric problem family over `(E, nu)` used by parametric training.
pub struct ParamFamily {
    pub domain: Domain,
    /// `(lo, hi)` ranges for `E` and `nu`.
    pub e_range: (f64, f64),
    pub nu_range: (f64, f64),
    make: Arc<dyn Fn(f64, f64) -> Result<ProblemSpec, ProblemError> + Send + Sync>,
}

impl ParamFamily {
    pub fn instance(&self, e: f64, nu: f64) -> Result<ProblemSpec, ProblemError> {
        (self.make)(e, nu)
    }
}

/// The family over `P = (2, 4) x (0.1, 0.5)`.
pub fn ex4_family() -> ParamFamily {
    ParamFamily {
        domain: Domain::square(std::f64::consts::PI),
        e_range: (2.0, 4.0),
        nu_range: (0.1, 0.5),
        make: Arc::new(|e, nu| problem_registry(ProblemChoice::Ex4 { e, nu })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elasticity::{residual_full, DisplacementJet};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_interior(domain: &Domain, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..domain.dim)
                    .map(|a| rng.random_range(domain.lo[a]..domain.hi[a]))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn ex1_exact_at_center() {
        let p = problem_registry(ProblemChoice::Ex1 { lambda: 1e5 }).unwrap();
        let half_pi = std::f64::consts::FRAC_PI_2;
        let u = p.exact_values(&[half_pi, half_pi]).unwrap();
        assert!((u[0] - 1e-5).abs() < 1e-9, "u1 = {}", u[0]);
        assert!((u[1] - 1e-5).abs() < 1e-9, "u2 = {}", u[1]);
    }

    #[test]
    fn ex4_lame_coefficients() {
        let (lambda, mu) = lame_from_e_nu(3.0, 0.25).unwrap();
        assert!((lambda - 1.2).abs() < 1e-14);
        assert!((mu - 1.2).abs() < 1e-14);
        assert!(matches!(
            lame_from_e_nu(3.0, 0.5),
            Err(ProblemError::BadPoisson(_))
        ));
        assert!(matches!(
            lame_from_e_nu(3.0, 0.62),
            Err(ProblemError::BadPoisson(_))
        ));
    }

    #[test]
    fn ex3_lambda_field() {
        let p = problem_registry(ProblemChoice::Ex3 { lambda_scale: 1e4 }).unwrap();
        let (lam, dlam) = p.material.lambda(&[std::f64::consts::FRAC_PI_4, 1.0]);
        assert!((lam - 1.5e4).abs() < 1e-9);
        // d/dx at pi/4 is Lambda cos(pi/2) ~ 0.
        assert!(dlam[0].abs() < 1e-11);
        let (mu, dmu) = p.material.mu(&[1.0, 2.0]);
        assert_eq!(mu, 4.0);
        assert_eq!(dmu[..2], [1.0, 1.0]);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(problem_registry(ProblemChoice::Ex1 { lambda: -1.0 }).is_err());
        assert!(problem_registry(ProblemChoice::Ex3 { lambda_scale: 0.0 }).is_err());
        assert!(problem_registry(ProblemChoice::Ex4 { e: 3.0, nu: 0.51 }).is_err());
    }

    #[test]
    fn leading_term_is_divergence_free() {
        let pts = random_interior(&Domain::square(std::f64::consts::PI), 200, 11);
        for p in &pts {
            let dj = DisplacementJet::of_field(&ex1_leading_term, p).unwrap();
            assert!(dj.div().abs() <= 1e-10, "div = {} at {p:?}", dj.div());
        }
    }

    #[test]
    fn manufactured_residual_vanishes_on_exact_solution() {
        let choices = [
            ProblemChoice::Ex1 { lambda: 1e5 },
            ProblemChoice::Ex2 { lambda: 1e4 },
            ProblemChoice::Ex3 { lambda_scale: 1e4 },
            ProblemChoice::Ex4 { e: 3.0, nu: 0.49 },
        ];
        for choice in choices {
            let p = problem_registry(choice).unwrap();
            let exact = p.exact.clone().unwrap();
            for x in random_interior(&p.domain, 100, 5) {
                let dj = DisplacementJet::of_field(exact.as_ref(), &x).unwrap();
                let f = (p.body_force)(&x);
                let r = residual_full(&dj, &p.material, &x, &f);
                for ri in &r[..p.domain.dim] {
                    assert!(
                        ri.abs() <= 1e-9,
                        "{}: residual {ri} at {x:?}",
                        p.name
                    );
                }
            }
        }
    }

    #[test]
    fn manufactured_force_matches_finite_difference_operator() {
        // Apply -div(sigma) to the exact solution by nested central
        // differences of plain values and compare with the jet route.
        let p = problem_registry(ProblemChoice::Ex1 { lambda: 10.0 }).unwrap();
        let exact = p.exact.clone().unwrap();
        let value = |x: f64, y: f64, c: usize| -> f64 {
            let seeds = crate::jet::seed_spatial(&[x, y]).unwrap();
            exact(&seeds)[c].value()
        };
        let x0 = [1.0, 1.0];
        let h = 1e-4;
        let (lambda, mu) = (10.0, 1.0);
        let d2 = |c: usize, i: usize, j: usize| -> f64 {
            // second partial d^2 u_c / dx_i dx_j at x0
            let shift = |si: f64, sj: f64| {
                let mut q = x0;
                q[i] += si * h;
                q[j] += sj * h;
                value(q[0], q[1], c)
            };
            if i == j {
                (shift(1.0, 0.0) - 2.0 * value(x0[0], x0[1], c) + shift(-1.0, 0.0)) / (h * h)
            } else {
                (shift(1.0, 1.0) - shift(1.0, -1.0) - shift(-1.0, 1.0) + shift(-1.0, -1.0))
                    / (4.0 * h * h)
            }
        };
        let grad_div = |i: usize| (0..2).map(|k| d2(k, k, i)).sum::<f64>();
        let lap = |c: usize| (0..2).map(|j| d2(c, j, j)).sum::<f64>();
        let f_jet = (p.body_force)(&x0);
        for i in 0..2 {
            let fd = -(lambda * grad_div(i) + mu * (lap(i) + grad_div(i)));
            assert!(
                (f_jet[i] - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                "component {i}: jet {} vs fd {fd}",
                f_jet[i]
            );
        }
    }

    #[test]
    fn boundary_data_matches_exact_trace() {
        let p = problem_registry(ProblemChoice::Ex1 { lambda: 100.0 }).unwrap();
        let pi = std::f64::consts::PI;
        for x in [[0.0, 1.3], [pi, 0.4], [2.0, 0.0], [1.1, pi]] {
            let g = (p.boundary)(&x);
            let u = p.exact_values(&x).unwrap();
            assert_eq!(g, u);
            // This problem has homogeneous Dirichlet data.
            assert!(g[0].abs() < 1e-14 && g[1].abs() < 1e-14, "{g:?}");
        }
    }

    #[test]
    fn family_instances_match_registry() {
        let fam = ex4_family();
        let a = fam.instance(2.5, 0.3).unwrap();
        let b = problem_registry(ProblemChoice::Ex4 { e: 2.5, nu: 0.3 }).unwrap();
        let x = [0.9, 2.1];
        assert_eq!(a.exact_values(&x), b.exact_values(&x));
        assert_eq!((a.body_force)(&x), (b.body_force)(&x));
    }
}
