//! Collocation sampling and loss assembly.
//!
//! Every loss exists in two routes:
//!
//! * a value route built on the per-point reference kernels in
//!   [`crate::elasticity`] (used by tests and the Monte-Carlo estimators),
//!   and
//! * a batched gradient route built on [`crate::batch`] that the trainer
//!   uses; it returns the loss breakdown together with exact parameter
//!   gradients.
//!
//! The decomposed loss evaluates the `u_tilde` volumetric residual in
//! normalized form, dividing `sigma_lambda` by the material's `lambda`
//! scale. With the weight rule `delta_s1 = delta_s / Lambda^2` this is
//! algebraically the same term, and for constant coefficients it removes
//! `lambda` from the equation entirely, which is the point of the scheme.

use crate::batch::{self, forward_batch, seed_input, values_input, JetMat};
use crate::elasticity::problems::{Domain, ParamFamily, ProblemSpec};
use crate::elasticity::{div_sigma_lambda, div_sigma_mu, DisplacementJet, ProblemError};
use crate::jet::{hess_index, Jet2, MAX_DIM};
use crate::network::{AnchoredNetwork, MlpNetwork};
use crate::par::{add_assign, map_reduce_chunks, ExecMode};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("sample count must be >= 1")]
    EmptySample,
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Uniform interior samples, `n x dim` row-major.
pub fn sample_interior(
    domain: &Domain,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, LossError> {
    if n == 0 {
        return Err(LossError::EmptySample);
    }
    let mut out = Vec::with_capacity(n * domain.dim);
    for _ in 0..n {
        for a in 0..domain.dim {
            out.push(rng.random_range(domain.lo[a]..domain.hi[a]));
        }
    }
    Ok(out)
}

/// Uniform boundary samples with per-face probability proportional to face
/// measure, `n x dim` row-major.
pub fn sample_boundary(
    domain: &Domain,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, LossError> {
    if n == 0 {
        return Err(LossError::EmptySample);
    }
    let d = domain.dim;
    // A face is (axis, side): the hyperplane x_axis = lo or hi.
    let mut measures = Vec::with_capacity(2 * d);
    for axis in 0..d {
        let m: f64 = (0..d)
            .filter(|&a| a != axis)
            .map(|a| domain.side(a))
            .product();
        measures.push((axis, 0usize, m));
        measures.push((axis, 1usize, m));
    }
    let total: f64 = measures.iter().map(|(_, _, m)| m).sum();

    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let mut pick = rng.random_range(0.0..total);
        let mut chosen = measures[measures.len() - 1];
        for &(axis, side, m) in &measures {
            if pick < m {
                chosen = (axis, side, m);
                break;
            }
            pick -= m;
        }
        let (axis, side, _) = chosen;
        for a in 0..d {
            if a == axis {
                out.push(if side == 0 { domain.lo[a] } else { domain.hi[a] });
            } else {
                out.push(rng.random_range(domain.lo[a]..domain.hi[a]));
            }
        }
    }
    Ok(out)
}

/// Fixed collocation point sets for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct CollocationSet {
    pub dim: usize,
    pub interior_r: Vec<f64>,
    pub interior_s: Vec<f64>,
    pub boundary: Vec<f64>,
    pub n_r: usize,
    pub n_s: usize,
    pub n_b: usize,
    pub seed: u64,
}

impl CollocationSet {
    /// Draw all three sets from one seeded generator. Regeneration with the
    /// same seed reproduces the set bitwise.
    pub fn generate(
        domain: &Domain,
        n_r: usize,
        n_s: usize,
        n_b: usize,
        seed: u64,
    ) -> Result<Self, LossError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let interior_r = sample_interior(domain, n_r, &mut rng)?;
        let interior_s = sample_interior(domain, n_s, &mut rng)?;
        let boundary = sample_boundary(domain, n_b, &mut rng)?;
        Ok(CollocationSet {
            dim: domain.dim,
            interior_r,
            interior_s,
            boundary,
            n_r,
            n_s,
            n_b,
            seed,
        })
    }
}

/// Loss weights and the derived per-term values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub delta_r: f64,
    pub delta_s: f64,
    pub delta_b: f64,
}

impl LossWeights {
    pub fn delta_r1(&self) -> f64 {
        self.delta_r
    }

    pub fn delta_r2(&self) -> f64 {
        self.delta_r
    }

    /// `delta_s / lambda_scale^2`.
    pub fn delta_s1(&self, lambda_scale: f64) -> f64 {
        self.delta_s / (lambda_scale * lambda_scale)
    }

    pub fn delta_s2(&self) -> f64 {
        self.delta_s
    }
}

/// Weighted per-term loss values; `total` is their sum.
///
/// In standard (single-network) modes only `residual_hat_lambda` (which then
/// carries the whole interior residual term) and `boundary` are populated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub residual_hat_lambda: f64,
    pub residual_hat_mu: f64,
    pub residual_tilde_lambda: f64,
    pub residual_tilde_mu: f64,
    pub boundary: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.residual_hat_lambda
            + self.residual_hat_mu
            + self.residual_tilde_lambda
            + self.residual_tilde_mu
            + self.boundary;
        self
    }
}

/// Parameter box for the parametric problem with its sample counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub e_lo: f64,
    pub e_hi: f64,
    pub nu_lo: f64,
    pub nu_hi: f64,
    pub n_pr: usize,
    pub n_pb: usize,
}

impl ParamBox {
    pub fn ex4(n_pr: usize, n_pb: usize) -> Self {
        ParamBox {
            e_lo: 2.0,
            e_hi: 4.0,
            nu_lo: 0.1,
            nu_hi: 0.5,
            n_pr,
            n_pb,
        }
    }

    /// Uniform `(E, nu)` samples; `nu` stays strictly below 1/2 because the
    /// draw is over a half-open range.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| {
                (
                    rng.random_range(self.e_lo..self.e_hi),
                    rng.random_range(self.nu_lo..self.nu_hi),
                )
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Prepared per-point data
// ---------------------------------------------------------------------------

/// Interior point set with problem data cached per point.
#[derive(Clone, Debug, Default)]
pub struct PreparedPoints {
    pub n: usize,
    /// Network inputs, `n x input_dim` (spatial coordinates, then any
    /// parameter inputs).
    pub xs: Vec<f64>,
    /// Body force, `n x d`.
    pub f: Vec<f64>,
    pub lambda: Vec<f64>,
    pub dlambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub dmu: Vec<f64>,
    /// Per-point `lambda` magnitude scale used by the normalized
    /// `u_tilde` volumetric residual.
    pub lambda_scale: Vec<f64>,
}

/// Boundary point set with Dirichlet data cached per point.
#[derive(Clone, Debug, Default)]
pub struct PreparedBoundary {
    pub n: usize,
    pub xs: Vec<f64>,
    /// `g`, `n x d`.
    pub g: Vec<f64>,
}

/// Everything the batched loss evaluation needs for one run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dim: usize,
    pub input_dim: usize,
    pub r: PreparedPoints,
    pub s: PreparedPoints,
    pub b: PreparedBoundary,
}

fn prepare_interior(problem: &ProblemSpec, pts: &[f64], n: usize) -> PreparedPoints {
    let d = problem.domain.dim;
    let mut out = PreparedPoints {
        n,
        xs: pts.to_vec(),
        f: Vec::with_capacity(n * d),
        lambda: Vec::with_capacity(n),
        dlambda: Vec::with_capacity(n * d),
        mu: Vec::with_capacity(n),
        dmu: Vec::with_capacity(n * d),
        lambda_scale: vec![problem.material.lambda_scale(); n],
    };
    for b in 0..n {
        let x = &pts[b * d..(b + 1) * d];
        out.f.extend((problem.body_force)(x));
        let (lam, dlam) = problem.material.lambda(x);
        out.lambda.push(lam);
        out.dlambda.extend_from_slice(&dlam[..d]);
        let (mu, dmu) = problem.material.mu(x);
        out.mu.push(mu);
        out.dmu.extend_from_slice(&dmu[..d]);
    }
    out
}

fn prepare_boundary(problem: &ProblemSpec, pts: &[f64], n: usize) -> PreparedBoundary {
    let d = problem.domain.dim;
    let mut g = Vec::with_capacity(n * d);
    for b in 0..n {
        g.extend((problem.boundary)(&pts[b * d..(b + 1) * d]));
    }
    PreparedBoundary {
        n,
        xs: pts.to_vec(),
        g,
    }
}

/// Cache problem data at the collocation points of one fixed problem.
pub fn prepare(problem: &ProblemSpec, colloc: &CollocationSet) -> Prepared {
    Prepared {
        dim: problem.domain.dim,
        input_dim: problem.domain.dim,
        r: prepare_interior(problem, &colloc.interior_r, colloc.n_r),
        s: prepare_interior(problem, &colloc.interior_s, colloc.n_s),
        b: prepare_boundary(problem, &colloc.boundary, colloc.n_b),
    }
}

fn parametric_interior(
    family: &ParamFamily,
    pts: &[f64],
    n: usize,
    params: &[(f64, f64)],
) -> Result<PreparedPoints, ProblemError> {
    let d = family.domain.dim;
    let rows = n * params.len();
    let mut out = PreparedPoints {
        n: rows,
        xs: Vec::with_capacity(rows * (d + 2)),
        f: Vec::with_capacity(rows * d),
        lambda: Vec::with_capacity(rows),
        dlambda: Vec::with_capacity(rows * d),
        mu: Vec::with_capacity(rows),
        dmu: Vec::with_capacity(rows * d),
        lambda_scale: Vec::with_capacity(rows),
    };
    for &(e, nu) in params {
        let instance = family.instance(e, nu)?;
        for b in 0..n {
            let x = &pts[b * d..(b + 1) * d];
            out.xs.extend_from_slice(x);
            out.xs.push(e);
            out.xs.push(nu);
            out.f.extend((instance.body_force)(x));
            let (lam, dlam) = instance.material.lambda(x);
            out.lambda.push(lam);
            out.dlambda.extend_from_slice(&dlam[..d]);
            let (mu, dmu) = instance.material.mu(x);
            out.mu.push(mu);
            out.dmu.extend_from_slice(&dmu[..d]);
            out.lambda_scale.push(instance.material.lambda_scale());
        }
    }
    Ok(out)
}

/// Cache problem-family data over the product of spatial and parameter
/// samples (the same spatial points are reused for every parameter sample).
/// `with_s` skips the `x_s` set for modes that never touch it.
pub fn prepare_parametric(
    family: &ParamFamily,
    colloc: &CollocationSet,
    params_r: &[(f64, f64)],
    params_b: &[(f64, f64)],
    with_s: bool,
) -> Result<Prepared, ProblemError> {
    let d = family.domain.dim;
    let r = parametric_interior(family, &colloc.interior_r, colloc.n_r, params_r)?;
    let s = if with_s {
        parametric_interior(family, &colloc.interior_s, colloc.n_s, params_r)?
    } else {
        PreparedPoints::default()
    };
    let mut b = PreparedBoundary {
        n: colloc.n_b * params_b.len(),
        ..Default::default()
    };
    for &(e, nu) in params_b {
        let instance = family.instance(e, nu)?;
        for i in 0..colloc.n_b {
            let x = &colloc.boundary[i * d..(i + 1) * d];
            b.xs.extend_from_slice(x);
            b.xs.push(e);
            b.xs.push(nu);
            b.g.extend((instance.boundary)(x));
        }
    }
    Ok(Prepared {
        dim: d,
        input_dim: d + 2,
        r,
        s,
        b,
    })
}

// ---------------------------------------------------------------------------
// Batched gradient route
// ---------------------------------------------------------------------------

/// The decomposed networks. Force networks are anchored at `f / 3`.
#[derive(Clone)]
pub struct DecomposedNets {
    pub u_hat: MlpNetwork,
    pub u_tilde: MlpNetwork,
    pub force: ForceNets,
}

/// Force-split realization: two independent networks (default), or a single
/// network with `2 d` outputs whose halves play the two roles.
#[derive(Clone)]
pub enum ForceNets {
    Split {
        lambda: AnchoredNetwork,
        mu: AnchoredNetwork,
    },
    Combined(AnchoredNetwork),
}

impl DecomposedNets {
    pub fn role_names(&self) -> Vec<&'static str> {
        match self.force {
            ForceNets::Split { .. } => vec!["u_hat", "u_tilde", "f_lambda", "f_mu"],
            ForceNets::Combined(_) => vec!["u_hat", "u_tilde", "f_combined"],
        }
    }

    pub fn networks(&self) -> Vec<&MlpNetwork> {
        match &self.force {
            ForceNets::Split { lambda, mu } => {
                vec![&self.u_hat, &self.u_tilde, lambda.base(), mu.base()]
            }
            ForceNets::Combined(f) => vec![&self.u_hat, &self.u_tilde, f.base()],
        }
    }

    pub fn networks_mut(&mut self) -> Vec<&mut MlpNetwork> {
        match &mut self.force {
            ForceNets::Split { lambda, mu } => {
                vec![
                    &mut self.u_hat,
                    &mut self.u_tilde,
                    lambda.base_mut(),
                    mu.base_mut(),
                ]
            }
            ForceNets::Combined(f) => vec![&mut self.u_hat, &mut self.u_tilde, f.base_mut()],
        }
    }

    /// Total parameter count across roles.
    pub fn param_count(&self) -> usize {
        self.networks().iter().map(|n| n.theta().len()).sum()
    }
}

/// Slot-plane views of one batched jet evaluation, mirroring the per-point
/// accessors on [`DisplacementJet`].
struct ResidualView<'a> {
    d: usize,
    out: &'a JetMat,
}

impl<'a> ResidualView<'a> {
    fn new(out: &'a JetMat, d: usize) -> Self {
        ResidualView { d, out }
    }

    fn div(&self, b: usize) -> f64 {
        (0..self.d).map(|j| self.out.at(1 + j, b, j)).sum()
    }

    fn grad_div(&self, b: usize, i: usize) -> f64 {
        (0..self.d)
            .map(|k| self.out.at(1 + self.d + hess_index(self.d, k, i), b, k))
            .sum()
    }

    fn laplacian(&self, b: usize, i: usize) -> f64 {
        (0..self.d)
            .map(|j| self.out.at(1 + self.d + hess_index(self.d, j, j), b, i))
            .sum()
    }

    fn jac(&self, b: usize, i: usize, j: usize) -> f64 {
        self.out.at(1 + j, b, i)
    }

    fn dsl(&self, b: usize, lam: f64, dlam: &[f64], out: &mut [f64]) {
        let divu = self.div(b);
        for i in 0..self.d {
            out[i] = lam * self.grad_div(b, i) + divu * dlam[i];
        }
    }

    fn dsm(&self, b: usize, mu: f64, dmu: &[f64], out: &mut [f64]) {
        for i in 0..self.d {
            let mut acc = mu * (self.laplacian(b, i) + self.grad_div(b, i));
            for j in 0..self.d {
                acc += (self.jac(b, i, j) + self.jac(b, j, i)) * dmu[j];
            }
            out[i] = acc;
        }
    }
}

/// Scatter `a[i] = dL/d(dsl_i)` and `c[i] = dL/d(dsm_i)` into the jet-slot
/// cotangent planes of one point.
#[allow(clippy::too_many_arguments)]
fn scatter_residual_cotangent(
    obar: &mut JetMat,
    b: usize,
    d: usize,
    lam: f64,
    dlam: &[f64],
    mu: f64,
    dmu: &[f64],
    a: &[f64],
    c: &[f64],
) {
    let a_dot_dlam: f64 = (0..d).map(|i| a[i] * dlam[i]).sum();
    for m in 0..d {
        // Gradient slots: div u reads J[m][m]; the shear term reads J[i][j]
        // and J[j][i].
        let g_plane = 1 + m;
        for i in 0..d {
            let mut v = c[i] * dmu[m] + c[m] * dmu[i];
            if i == m {
                v += a_dot_dlam;
            }
            if v != 0.0 {
                *obar.at_mut(g_plane, b, i) += v;
            }
        }
        // grad_div_i reads H_m[m][i] (column m); dsl and dsm both use it.
        for i in 0..d {
            let h_plane = 1 + d + hess_index(d, m, i);
            let v = lam * a[i] + mu * c[i];
            if v != 0.0 {
                *obar.at_mut(h_plane, b, m) += v;
            }
        }
        // laplacian_i reads H_i[m][m] (column i).
        if mu != 0.0 {
            let hmm_plane = 1 + d + hess_index(d, m, m);
            for i in 0..d {
                *obar.at_mut(hmm_plane, b, i) += mu * c[i];
            }
        }
    }
}

fn chunk_inputs(prep: &PreparedPoints, input_dim: usize, dim: usize, range: &std::ops::Range<usize>) -> JetMat {
    seed_input(
        &prep.xs[range.start * input_dim..range.end * input_dim],
        range.len(),
        input_dim,
        dim,
    )
}

fn chunk_value_inputs(
    xs: &[f64],
    input_dim: usize,
    range: &std::ops::Range<usize>,
) -> JetMat {
    values_input(
        &xs[range.start * input_dim..range.end * input_dim],
        range.len(),
        input_dim,
    )
}

/// Standard loss with gradient: interior residual plus boundary mismatch.
pub fn standard_loss_grad(
    net: &MlpNetwork,
    prep: &Prepared,
    w: &LossWeights,
    mode: ExecMode,
) -> (LossBreakdown, Vec<f64>) {
    let d = prep.dim;
    let n_r = prep.r.n;
    let (interior_sum, mut grad) = map_reduce_chunks(
        n_r,
        mode,
        |range| {
            let input = chunk_inputs(&prep.r, prep.input_dim, d, &range);
            let (out, cache) = forward_batch(net, &input, true);
            let mut obar = JetMat::zeros(out.slots(), out.points(), out.cols());
            let view = ResidualView::new(&out, d);
            let mut sum = 0.0;
            let scale = 2.0 * w.delta_r / n_r as f64;
            let (mut dsl, mut dsm, mut res) = ([0.0; MAX_DIM], [0.0; MAX_DIM], [0.0; MAX_DIM]);
            for (row, b) in range.clone().enumerate() {
                let lam = prep.r.lambda[b];
                let dlam = &prep.r.dlambda[b * d..(b + 1) * d];
                let mu = prep.r.mu[b];
                let dmu = &prep.r.dmu[b * d..(b + 1) * d];
                view.dsl(row, lam, dlam, &mut dsl);
                view.dsm(row, mu, dmu, &mut dsm);
                for i in 0..d {
                    res[i] = dsl[i] + dsm[i] + prep.r.f[b * d + i];
                    sum += res[i] * res[i];
                    res[i] *= scale;
                }
                scatter_residual_cotangent(
                    &mut obar, row, d, lam, dlam, mu, dmu, &res[..d], &res[..d],
                );
            }
            let mut grad = vec![0.0; net.theta().len()];
            batch::backward_batch(net, &input, cache.as_ref().unwrap(), &obar, &mut grad);
            (sum, grad)
        },
        |(s1, mut g1), (s2, g2)| {
            add_assign(&mut g1, &g2);
            (s1 + s2, g1)
        },
        (0.0, vec![0.0; net.theta().len()]),
    );

    let boundary_sum =
        boundary_pass_single(net, &prep.b, prep.input_dim, w.delta_b, mode, &mut grad);

    let breakdown = LossBreakdown {
        residual_hat_lambda: w.delta_r * interior_sum / n_r as f64,
        boundary: w.delta_b * boundary_sum / prep.b.n as f64,
        ..Default::default()
    }
    .finish();
    (breakdown, grad)
}

/// `delta_b * mean |net(x) - g|^2` with gradient accumulation; returns the
/// unweighted sum of squares.
fn boundary_pass_single(
    net: &MlpNetwork,
    bnd: &PreparedBoundary,
    input_dim: usize,
    delta_b: f64,
    mode: ExecMode,
    grad: &mut [f64],
) -> f64 {
    let n_b = bnd.n;
    let out_dim = net.spec().output_dim;
    let (sum, gb) = map_reduce_chunks(
        n_b,
        mode,
        |range| {
            let input = chunk_value_inputs(&bnd.xs, input_dim, &range);
            let (out, cache) = forward_batch(net, &input, true);
            let mut obar = JetMat::zeros(1, range.len(), out_dim);
            let mut sum = 0.0;
            let scale = 2.0 * delta_b / n_b as f64;
            for (row, b) in range.clone().enumerate() {
                for i in 0..out_dim {
                    let m = out.at(0, row, i) - bnd.g[b * out_dim + i];
                    sum += m * m;
                    *obar.at_mut(0, row, i) = scale * m;
                }
            }
            let mut g = vec![0.0; net.theta().len()];
            batch::backward_batch(net, &input, cache.as_ref().unwrap(), &obar, &mut g);
            (sum, g)
        },
        |(s1, mut g1), (s2, g2)| {
            add_assign(&mut g1, &g2);
            (s1 + s2, g1)
        },
        (0.0, vec![0.0; net.theta().len()]),
    );
    add_assign(grad, &gb);
    sum
}

/// Reduced diagnostic loss `delta_r mean |grad(div u)|^2 + delta_b mean |u|^2`
/// with gradient.
pub fn reduced_loss_grad(
    net: &MlpNetwork,
    prep: &Prepared,
    w: &LossWeights,
    mode: ExecMode,
) -> (f64, Vec<f64>) {
    let d = prep.dim;
    let n_r = prep.r.n;
    let zeros = [0.0; MAX_DIM];
    let (interior_sum, mut grad) = map_reduce_chunks(
        n_r,
        mode,
        |range| {
            let input = chunk_inputs(&prep.r, prep.input_dim, d, &range);
            let (out, cache) = forward_batch(net, &input, true);
            let mut obar = JetMat::zeros(out.slots(), out.points(), out.cols());
            let view = ResidualView::new(&out, d);
            let mut sum = 0.0;
            let scale = 2.0 * w.delta_r / n_r as f64;
            let mut rho = [0.0; MAX_DIM];
            for row in 0..range.len() {
                for i in 0..d {
                    rho[i] = view.grad_div(row, i);
                    sum += rho[i] * rho[i];
                    rho[i] *= scale;
                }
                // grad(div u) is div_sigma_lambda with lambda = 1, grad 0.
                scatter_residual_cotangent(
                    &mut obar,
                    row,
                    d,
                    1.0,
                    &zeros[..d],
                    0.0,
                    &zeros[..d],
                    &rho[..d],
                    &zeros[..d],
                );
            }
            let mut grad = vec![0.0; net.theta().len()];
            batch::backward_batch(net, &input, cache.as_ref().unwrap(), &obar, &mut grad);
            (sum, grad)
        },
        |(s1, mut g1), (s2, g2)| {
            add_assign(&mut g1, &g2);
            (s1 + s2, g1)
        },
        (0.0, vec![0.0; net.theta().len()]),
    );
    // Boundary term of the reduced loss penalizes |u| itself.
    let n_b = prep.b.n;
    let bnd = PreparedBoundary {
        n: n_b,
        xs: prep.b.xs.clone(),
        g: vec![0.0; prep.b.g.len()],
    };
    let boundary_sum = boundary_pass_single(net, &bnd, prep.input_dim, w.delta_b, mode, &mut grad);
    let total = w.delta_r * interior_sum / n_r as f64 + w.delta_b * boundary_sum / n_b as f64;
    (total, grad)
}

/// Per-role gradients in the order of [`DecomposedNets::role_names`].
pub struct RoleGrads(pub Vec<Vec<f64>>);

enum ForceFwd {
    Split {
        cache_l: batch::ForwardCache,
        cache_m: batch::ForwardCache,
    },
    Combined {
        cache: batch::ForwardCache,
    },
}

/// Decomposed loss with gradients for all four (or three) networks.
pub fn decomposed_loss_grad(
    nets: &DecomposedNets,
    prep: &Prepared,
    w: &LossWeights,
    mode: ExecMode,
) -> (LossBreakdown, RoleGrads) {
    let d = prep.dim;
    let combined = matches!(nets.force, ForceNets::Combined(_));

    let (n_hat, n_tilde, n_flam, n_fmu) = {
        let ns = nets.networks();
        (
            ns[0].theta().len(),
            ns[1].theta().len(),
            ns[2].theta().len(),
            if combined { 0 } else { ns[3].theta().len() },
        )
    };

    struct Acc {
        hat_lambda: f64,
        hat_mu: f64,
        tilde_lambda: f64,
        tilde_mu: f64,
        boundary: f64,
        g_hat: Vec<f64>,
        g_tilde: Vec<f64>,
        g_flam: Vec<f64>,
        g_fmu: Vec<f64>,
    }
    let zero_acc = || Acc {
        hat_lambda: 0.0,
        hat_mu: 0.0,
        tilde_lambda: 0.0,
        tilde_mu: 0.0,
        boundary: 0.0,
        g_hat: vec![0.0; n_hat],
        g_tilde: vec![0.0; n_tilde],
        g_flam: vec![0.0; n_flam],
        g_fmu: vec![0.0; n_fmu],
    };
    let merge = |mut a: Acc, b: Acc| {
        a.hat_lambda += b.hat_lambda;
        a.hat_mu += b.hat_mu;
        a.tilde_lambda += b.tilde_lambda;
        a.tilde_mu += b.tilde_mu;
        a.boundary += b.boundary;
        add_assign(&mut a.g_hat, &b.g_hat);
        add_assign(&mut a.g_tilde, &b.g_tilde);
        add_assign(&mut a.g_flam, &b.g_flam);
        add_assign(&mut a.g_fmu, &b.g_fmu);
        a
    };

    // Anchored force values (f/3 + base output) for a chunk.
    let force_values = |pts: &PreparedPoints,
                        range: &std::ops::Range<usize>,
                        input: &JetMat|
     -> (Vec<f64>, Vec<f64>, ForceFwd) {
        let rows = range.len();
        match &nets.force {
            ForceNets::Split { lambda, mu } => {
                let (out_l, cache_l) = forward_batch(lambda.base(), input, true);
                let (out_m, cache_m) = forward_batch(mu.base(), input, true);
                let mut vl = vec![0.0; rows * d];
                let mut vm = vec![0.0; rows * d];
                for (row, b) in range.clone().enumerate() {
                    for i in 0..d {
                        let anchor = pts.f[b * d + i] / 3.0;
                        vl[row * d + i] = anchor + out_l.at(0, row, i);
                        vm[row * d + i] = anchor + out_m.at(0, row, i);
                    }
                }
                (
                    vl,
                    vm,
                    ForceFwd::Split {
                        cache_l: cache_l.unwrap(),
                        cache_m: cache_m.unwrap(),
                    },
                )
            }
            ForceNets::Combined(f) => {
                let (out, cache) = forward_batch(f.base(), input, true);
                let mut vl = vec![0.0; rows * d];
                let mut vm = vec![0.0; rows * d];
                for (row, b) in range.clone().enumerate() {
                    for i in 0..d {
                        let anchor = pts.f[b * d + i] / 3.0;
                        vl[row * d + i] = anchor + out.at(0, row, i);
                        vm[row * d + i] = anchor + out.at(0, row, d + i);
                    }
                }
                (
                    vl,
                    vm,
                    ForceFwd::Combined {
                        cache: cache.unwrap(),
                    },
                )
            }
        }
    };

    let force_backward = |fwd: &ForceFwd,
                          input: &JetMat,
                          cot_l: &JetMat,
                          cot_m: &JetMat,
                          g_flam: &mut [f64],
                          g_fmu: &mut [f64]| {
        match (&nets.force, fwd) {
            (ForceNets::Split { lambda, mu }, ForceFwd::Split { cache_l, cache_m }) => {
                batch::backward_batch(lambda.base(), input, cache_l, cot_l, g_flam);
                batch::backward_batch(mu.base(), input, cache_m, cot_m, g_fmu);
            }
            (ForceNets::Combined(f), ForceFwd::Combined { cache }) => {
                let rows = cot_l.points();
                let mut cot = JetMat::zeros(1, rows, 2 * d);
                for row in 0..rows {
                    for i in 0..d {
                        *cot.at_mut(0, row, i) = cot_l.at(0, row, i);
                        *cot.at_mut(0, row, d + i) = cot_m.at(0, row, i);
                    }
                }
                batch::backward_batch(f.base(), input, cache, &cot, g_flam);
            }
            _ => unreachable!("force forward/backward shape mismatch"),
        }
    };

    // Pass over x_r: u_hat residuals against the learned force splits.
    let n_r = prep.r.n;
    let acc_r = map_reduce_chunks(
        n_r,
        mode,
        |range| {
            let mut acc = zero_acc();
            let rows = range.len();
            let input_jets = chunk_inputs(&prep.r, prep.input_dim, d, &range);
            let input_vals = chunk_value_inputs(&prep.r.xs, prep.input_dim, &range);
            let (out, cache) = forward_batch(&nets.u_hat, &input_jets, true);
            let (fl, fm, force_fwd) = force_values(&prep.r, &range, &input_vals);
            let view = ResidualView::new(&out, d);
            let mut obar = JetMat::zeros(out.slots(), rows, d);
            let mut cot_l = JetMat::zeros(1, rows, d);
            let mut cot_m = JetMat::zeros(1, rows, d);
            let scale1 = 2.0 * w.delta_r1() / n_r as f64;
            let scale2 = 2.0 * w.delta_r2() / n_r as f64;
            let (mut dsl, mut dsm) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
            let (mut ra, mut rc) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
            for (row, b) in range.clone().enumerate() {
                let lam = prep.r.lambda[b];
                let dlam = &prep.r.dlambda[b * d..(b + 1) * d];
                let mu = prep.r.mu[b];
                let dmu = &prep.r.dmu[b * d..(b + 1) * d];
                view.dsl(row, lam, dlam, &mut dsl);
                view.dsm(row, mu, dmu, &mut dsm);
                for i in 0..d {
                    let r_lam = dsl[i] + fl[row * d + i];
                    let r_mu = dsm[i] + fm[row * d + i];
                    acc.hat_lambda += r_lam * r_lam;
                    acc.hat_mu += r_mu * r_mu;
                    ra[i] = scale1 * r_lam;
                    rc[i] = scale2 * r_mu;
                    *cot_l.at_mut(0, row, i) = ra[i];
                    *cot_m.at_mut(0, row, i) = rc[i];
                }
                scatter_residual_cotangent(
                    &mut obar, row, d, lam, dlam, mu, dmu, &ra[..d], &rc[..d],
                );
            }
            batch::backward_batch(
                &nets.u_hat,
                &input_jets,
                cache.as_ref().unwrap(),
                &obar,
                &mut acc.g_hat,
            );
            force_backward(
                &force_fwd,
                &input_vals,
                &cot_l,
                &cot_m,
                &mut acc.g_flam,
                &mut acc.g_fmu,
            );
            acc
        },
        merge,
        zero_acc(),
    );

    // Pass over x_s: u_tilde residuals; the volumetric one is normalized by
    // the lambda scale and weighted with delta_s (== delta_s1 * Lambda^2).
    let n_s = prep.s.n;
    let acc_s = map_reduce_chunks(
        n_s,
        mode,
        |range| {
            let mut acc = zero_acc();
            let rows = range.len();
            let input_jets = chunk_inputs(&prep.s, prep.input_dim, d, &range);
            let input_vals = chunk_value_inputs(&prep.s.xs, prep.input_dim, &range);
            let (out, cache) = forward_batch(&nets.u_tilde, &input_jets, true);
            let (fl, fm, force_fwd) = force_values(&prep.s, &range, &input_vals);
            let view = ResidualView::new(&out, d);
            let mut obar = JetMat::zeros(out.slots(), rows, d);
            let mut cot_l = JetMat::zeros(1, rows, d);
            let mut cot_m = JetMat::zeros(1, rows, d);
            let scale1 = 2.0 * w.delta_s / n_s as f64;
            let scale2 = 2.0 * w.delta_s2() / n_s as f64;
            let (mut dsl, mut dsm) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
            let (mut ra, mut rc) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
            let mut dlam_norm = [0.0; MAX_DIM];
            for (row, b) in range.clone().enumerate() {
                let inv_scale = 1.0 / prep.s.lambda_scale[b];
                let lam_norm = prep.s.lambda[b] * inv_scale;
                for i in 0..d {
                    dlam_norm[i] = prep.s.dlambda[b * d + i] * inv_scale;
                }
                let mu = prep.s.mu[b];
                let dmu = &prep.s.dmu[b * d..(b + 1) * d];
                view.dsl(row, lam_norm, &dlam_norm, &mut dsl);
                view.dsm(row, mu, dmu, &mut dsm);
                for i in 0..d {
                    let r_lam = dsl[i];
                    let r_mu = dsm[i] + prep.s.f[b * d + i] - fl[row * d + i] - fm[row * d + i];
                    acc.tilde_lambda += r_lam * r_lam;
                    acc.tilde_mu += r_mu * r_mu;
                    ra[i] = scale1 * r_lam;
                    rc[i] = scale2 * r_mu;
                    *cot_l.at_mut(0, row, i) = -rc[i];
                    *cot_m.at_mut(0, row, i) = -rc[i];
                }
                scatter_residual_cotangent(
                    &mut obar, row, d, lam_norm, &dlam_norm, mu, dmu, &ra[..d], &rc[..d],
                );
            }
            batch::backward_batch(
                &nets.u_tilde,
                &input_jets,
                cache.as_ref().unwrap(),
                &obar,
                &mut acc.g_tilde,
            );
            force_backward(
                &force_fwd,
                &input_vals,
                &cot_l,
                &cot_m,
                &mut acc.g_flam,
                &mut acc.g_fmu,
            );
            acc
        },
        merge,
        zero_acc(),
    );

    // Boundary: |u_hat + u_tilde - g|^2.
    let n_b = prep.b.n;
    let acc_b = map_reduce_chunks(
        n_b,
        mode,
        |range| {
            let mut acc = zero_acc();
            let rows = range.len();
            let input = chunk_value_inputs(&prep.b.xs, prep.input_dim, &range);
            let (out_hat, cache_hat) = forward_batch(&nets.u_hat, &input, true);
            let (out_tilde, cache_tilde) = forward_batch(&nets.u_tilde, &input, true);
            let mut obar = JetMat::zeros(1, rows, d);
            let scale = 2.0 * w.delta_b / n_b as f64;
            for (row, b) in range.clone().enumerate() {
                for i in 0..d {
                    let m = out_hat.at(0, row, i) + out_tilde.at(0, row, i) - prep.b.g[b * d + i];
                    acc.boundary += m * m;
                    *obar.at_mut(0, row, i) = scale * m;
                }
            }
            batch::backward_batch(
                &nets.u_hat,
                &input,
                cache_hat.as_ref().unwrap(),
                &obar,
                &mut acc.g_hat,
            );
            batch::backward_batch(
                &nets.u_tilde,
                &input,
                cache_tilde.as_ref().unwrap(),
                &obar,
                &mut acc.g_tilde,
            );
            acc
        },
        merge,
        zero_acc(),
    );

    let acc = merge(merge(acc_r, acc_s), acc_b);
    let breakdown = LossBreakdown {
        residual_hat_lambda: w.delta_r1() * acc.hat_lambda / n_r as f64,
        residual_hat_mu: w.delta_r2() * acc.hat_mu / n_r as f64,
        residual_tilde_lambda: w.delta_s * acc.tilde_lambda / n_s as f64,
        residual_tilde_mu: w.delta_s2() * acc.tilde_mu / n_s as f64,
        boundary: w.delta_b * acc.boundary / n_b as f64,
        total: 0.0,
    }
    .finish();
    let grads = if combined {
        RoleGrads(vec![acc.g_hat, acc.g_tilde, acc.g_flam])
    } else {
        RoleGrads(vec![acc.g_hat, acc.g_tilde, acc.g_flam, acc.g_fmu])
    };
    (breakdown, grads)
}

// ---------------------------------------------------------------------------
// Value route (per-point reference kernels)
// ---------------------------------------------------------------------------

/// Jet-valued displacement field: either a network or a closed form.
pub enum FieldRef<'a> {
    Network(&'a MlpNetwork),
    Closure(&'a dyn Fn(&[Jet2]) -> Vec<Jet2>),
}

impl FieldRef<'_> {
    fn eval_jets(&self, x: &[f64]) -> Vec<Jet2> {
        let seeds = crate::jet::seed_spatial(x).expect("2D/3D domains");
        match self {
            FieldRef::Network(net) => net.forward_jet(&seeds),
            FieldRef::Closure(f) => f(&seeds),
        }
    }

    fn eval_values(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FieldRef::Network(net) => net.forward(x),
            FieldRef::Closure(f) => {
                let seeds = crate::jet::seed_spatial(x).expect("2D/3D domains");
                f(&seeds).iter().map(|j| j.value()).collect()
            }
        }
    }
}

/// Standard collocation loss via the per-point reference kernels.
pub fn standard_loss(
    field: &FieldRef,
    problem: &ProblemSpec,
    colloc: &CollocationSet,
    w: &LossWeights,
) -> (f64, LossBreakdown) {
    let d = problem.domain.dim;
    let mut interior = 0.0;
    for b in 0..colloc.n_r {
        let x = &colloc.interior_r[b * d..(b + 1) * d];
        let dj = DisplacementJet::new(field.eval_jets(x));
        let f = (problem.body_force)(x);
        let r = crate::elasticity::residual_full(&dj, &problem.material, x, &f);
        interior += r[..d].iter().map(|v| v * v).sum::<f64>();
    }
    let mut boundary = 0.0;
    for b in 0..colloc.n_b {
        let x = &colloc.boundary[b * d..(b + 1) * d];
        let u = field.eval_values(x);
        let g = (problem.boundary)(x);
        boundary += u
            .iter()
            .zip(&g)
            .map(|(u, g)| (u - g) * (u - g))
            .sum::<f64>();
    }
    let breakdown = LossBreakdown {
        residual_hat_lambda: w.delta_r * interior / colloc.n_r as f64,
        boundary: w.delta_b * boundary / colloc.n_b as f64,
        ..Default::default()
    }
    .finish();
    (breakdown.total, breakdown)
}

/// Reduced diagnostic loss via the reference kernels (`g = 0` setting).
pub fn reduced_loss(
    field: &FieldRef,
    problem: &ProblemSpec,
    colloc: &CollocationSet,
    w: &LossWeights,
) -> f64 {
    let d = problem.domain.dim;
    let mut interior = 0.0;
    for b in 0..colloc.n_r {
        let x = &colloc.interior_r[b * d..(b + 1) * d];
        let dj = DisplacementJet::new(field.eval_jets(x));
        interior += (0..d).map(|i| dj.grad_div(i).powi(2)).sum::<f64>();
    }
    let mut boundary = 0.0;
    for b in 0..colloc.n_b {
        let x = &colloc.boundary[b * d..(b + 1) * d];
        let u = field.eval_values(x);
        boundary += u.iter().map(|v| v * v).sum::<f64>();
    }
    w.delta_r * interior / colloc.n_r as f64 + w.delta_b * boundary / colloc.n_b as f64
}

/// Field bundle for the decomposed loss value route.
pub struct DecomposedFields<'a> {
    pub u_hat: FieldRef<'a>,
    pub u_tilde: FieldRef<'a>,
    pub f_lambda: &'a dyn Fn(&[f64]) -> Vec<f64>,
    pub f_mu: &'a dyn Fn(&[f64]) -> Vec<f64>,
}

/// Decomposed loss via the reference kernels.
pub fn decomposed_loss(
    fields: &DecomposedFields,
    problem: &ProblemSpec,
    colloc: &CollocationSet,
    w: &LossWeights,
) -> (f64, LossBreakdown) {
    let d = problem.domain.dim;
    let scale = problem.material.lambda_scale();
    let mut acc = LossBreakdown::default();
    for b in 0..colloc.n_r {
        let x = &colloc.interior_r[b * d..(b + 1) * d];
        let dj = DisplacementJet::new(fields.u_hat.eval_jets(x));
        let dsl = div_sigma_lambda(&dj, &problem.material, x);
        let dsm = div_sigma_mu(&dj, &problem.material, x);
        let fl = (fields.f_lambda)(x);
        let fm = (fields.f_mu)(x);
        for i in 0..d {
            acc.residual_hat_lambda += (dsl[i] + fl[i]).powi(2);
            acc.residual_hat_mu += (dsm[i] + fm[i]).powi(2);
        }
    }
    for b in 0..colloc.n_s {
        let x = &colloc.interior_s[b * d..(b + 1) * d];
        let dj = DisplacementJet::new(fields.u_tilde.eval_jets(x));
        let dsl = div_sigma_lambda(&dj, &problem.material, x);
        let dsm = div_sigma_mu(&dj, &problem.material, x);
        let f = (problem.body_force)(x);
        let fl = (fields.f_lambda)(x);
        let fm = (fields.f_mu)(x);
        for i in 0..d {
            acc.residual_tilde_lambda += (dsl[i] / scale).powi(2);
            acc.residual_tilde_mu += (dsm[i] + f[i] - fl[i] - fm[i]).powi(2);
        }
    }
    for b in 0..colloc.n_b {
        let x = &colloc.boundary[b * d..(b + 1) * d];
        let uh = fields.u_hat.eval_values(x);
        let ut = fields.u_tilde.eval_values(x);
        let g = (problem.boundary)(x);
        for i in 0..d {
            acc.boundary += (uh[i] + ut[i] - g[i]).powi(2);
        }
    }
    let breakdown = LossBreakdown {
        residual_hat_lambda: w.delta_r1() * acc.residual_hat_lambda / colloc.n_r as f64,
        residual_hat_mu: w.delta_r2() * acc.residual_hat_mu / colloc.n_r as f64,
        residual_tilde_lambda: w.delta_s * acc.residual_tilde_lambda / colloc.n_s as f64,
        residual_tilde_mu: w.delta_s2() * acc.residual_tilde_mu / colloc.n_s as f64,
        boundary: w.delta_b * acc.boundary / colloc.n_b as f64,
        total: 0.0,
    }
    .finish();
    (breakdown.total, breakdown)
}

/// Parametric loss via the reference kernels: a double mean over parameter
/// and spatial samples. The network takes `(x, E, nu)`.
pub fn parametric_loss(
    net: &MlpNetwork,
    family: &ParamFamily,
    colloc: &CollocationSet,
    param_samples_r: &[(f64, f64)],
    param_samples_b: &[(f64, f64)],
    w: &LossWeights,
) -> Result<f64, LossError> {
    let d = family.domain.dim;
    if param_samples_r.is_empty() || param_samples_b.is_empty() {
        return Err(LossError::EmptySample);
    }
    let mut interior = 0.0;
    for &(e, nu) in param_samples_r {
        let instance = family.instance(e, nu)?;
        for b in 0..colloc.n_r {
            let x = &colloc.interior_r[b * d..(b + 1) * d];
            let seeds = crate::jet::seed_spatial(x).expect("2D domain");
            let mut inputs = seeds.clone();
            inputs.push(Jet2::constant(d, e));
            inputs.push(Jet2::constant(d, nu));
            let dj = DisplacementJet::new(net.forward_jet(&inputs));
            let f = (instance.body_force)(x);
            let r = crate::elasticity::residual_full(&dj, &instance.material, x, &f);
            interior += r[..d].iter().map(|v| v * v).sum::<f64>();
        }
    }
    interior /= (param_samples_r.len() * colloc.n_r) as f64;

    let mut boundary = 0.0;
    for &(e, nu) in param_samples_b {
        let instance = family.instance(e, nu)?;
        for b in 0..colloc.n_b {
            let x = &colloc.boundary[b * d..(b + 1) * d];
            let mut input = x.to_vec();
            input.push(e);
            input.push(nu);
            let u = net.forward(&input);
            let g = (instance.boundary)(x);
            boundary += u
                .iter()
                .zip(&g)
                .map(|(u, g)| (u - g) * (u - g))
                .sum::<f64>();
        }
    }
    boundary /= (param_samples_b.len() * colloc.n_b) as f64;

    Ok(w.delta_r * interior + w.delta_b * boundary)
}
