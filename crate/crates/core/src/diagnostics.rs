//! Error metrics and analysis instruments: relative L2 error on tensor
//! grids, the gradient cosine diagnostic, parametric error surfaces and
//! Poisson-ratio histograms, and fresh-sample energy estimates.

use crate::elasticity::problems::{Domain, ParamFamily, ProblemSpec};
use crate::jet::seed_spatial;
use crate::losses::{
    decomposed_loss, standard_loss, CollocationSet, DecomposedFields, FieldRef, LossError,
    LossWeights,
};
use crate::par::{map_reduce_chunks, ExecMode};
use crate::trainer::{train, TrainConfig, TrainError, TrainOptions, TrainRecord, TrainedModel};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiagError {
    #[error("exact field has zero norm on the evaluation grid")]
    ZeroNormExact,
    #[error("grid resolution must have one entry >= 2 per axis")]
    BadResolution,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Problem(#[from] crate::elasticity::ProblemError),
}

/// Tensor-product evaluation grid over the closed box, with trapezoidal
/// quadrature weights.
#[derive(Clone, Debug)]
pub struct EvalGrid {
    pub dim: usize,
    pub res: Vec<usize>,
    /// `n x dim` node coordinates, row-major, fastest axis last.
    pub points: Vec<f64>,
    /// Per-node quadrature weight (product trapezoid rule).
    pub weights: Vec<f64>,
    pub n: usize,
}

impl EvalGrid {
    pub fn new(domain: &Domain, res: &[usize]) -> Self {
        assert_eq!(res.len(), domain.dim, "resolution per axis");
        assert!(res.iter().all(|&r| r >= 2), "need at least two nodes");
        let d = domain.dim;
        let n: usize = res.iter().product();
        let mut points = Vec::with_capacity(n * d);
        let mut weights = Vec::with_capacity(n);
        let h: Vec<f64> = (0..d)
            .map(|a| domain.side(a) / (res[a] - 1) as f64)
            .collect();
        let mut idx = vec![0usize; d];
        for _ in 0..n {
            let mut w = 1.0;
            for a in 0..d {
                points.push(domain.lo[a] + idx[a] as f64 * h[a]);
                let edge = idx[a] == 0 || idx[a] == res[a] - 1;
                w *= h[a] * if edge { 0.5 } else { 1.0 };
            }
            weights.push(w);
            // Odometer increment, last axis fastest.
            for a in (0..d).rev() {
                idx[a] += 1;
                if idx[a] < res[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        EvalGrid {
            dim: d,
            res: res.to_vec(),
            points,
            weights,
            n,
        }
    }

    /// Exact-solution values at every node, `n x d`.
    pub fn exact_values(
        &self,
        exact: &(dyn Fn(&[crate::jet::Jet2]) -> Vec<crate::jet::Jet2> + Send + Sync),
    ) -> Vec<f64> {
        let d = self.dim;
        let mut out = Vec::with_capacity(self.n * d);
        for b in 0..self.n {
            let x = &self.points[b * d..(b + 1) * d];
            let seeds = seed_spatial(x).expect("2D/3D grids");
            out.extend(exact(&seeds).iter().map(|j| j.value()));
        }
        out
    }
}

/// Weighted relative L2 error of precomputed field values.
pub fn relative_l2_values(
    pred: &[f64],
    exact: &[f64],
    weights: &[f64],
    d: usize,
) -> Result<f64, DiagError> {
    debug_assert_eq!(pred.len(), exact.len());
    debug_assert_eq!(pred.len(), weights.len() * d);
    let mut num = 0.0;
    let mut den = 0.0;
    for (b, w) in weights.iter().enumerate() {
        for i in 0..d {
            let p = pred[b * d + i];
            let e = exact[b * d + i];
            num += w * (p - e) * (p - e);
            den += w * e * e;
        }
    }
    if den == 0.0 {
        return Err(DiagError::ZeroNormExact);
    }
    Ok((num / den).sqrt())
}

/// Relative L2 error between two point functions on a grid.
pub fn relative_l2(
    predict: &dyn Fn(&[f64]) -> Vec<f64>,
    exact: &dyn Fn(&[f64]) -> Vec<f64>,
    grid: &EvalGrid,
) -> Result<f64, DiagError> {
    let d = grid.dim;
    let mut pred = Vec::with_capacity(grid.n * d);
    let mut exv = Vec::with_capacity(grid.n * d);
    for b in 0..grid.n {
        let x = &grid.points[b * d..(b + 1) * d];
        pred.extend(predict(x));
        exv.extend(exact(x));
    }
    relative_l2_values(&pred, &exv, &grid.weights, d)
}

/// Relative L2 error of a trained model against a closed-form solution,
/// evaluated in deterministic chunks. For parametric models the `(E, nu)`
/// pair is appended to every grid point.
pub fn model_rel_l2(
    model: &TrainedModel,
    exact: &(dyn Fn(&[crate::jet::Jet2]) -> Vec<crate::jet::Jet2> + Send + Sync),
    grid: &EvalGrid,
    params: Option<(f64, f64)>,
) -> Result<f64, DiagError> {
    let d = grid.dim;
    let (num, den) = map_reduce_chunks(
        grid.n,
        ExecMode::Sequential,
        |range| {
            let rows = range.len();
            let xs: Vec<f64> = match params {
                None => grid.points[range.start * d..range.end * d].to_vec(),
                Some((e, nu)) => {
                    let mut xs = Vec::with_capacity(rows * (d + 2));
                    for b in range.clone() {
                        xs.extend_from_slice(&grid.points[b * d..(b + 1) * d]);
                        xs.push(e);
                        xs.push(nu);
                    }
                    xs
                }
            };
            let pred = model.predict_values(&xs, rows);
            let mut num = 0.0;
            let mut den = 0.0;
            for (row, b) in range.enumerate() {
                let x = &grid.points[b * d..(b + 1) * d];
                let seeds = seed_spatial(x).expect("2D/3D grids");
                let ex = exact(&seeds);
                let w = grid.weights[b];
                for i in 0..d {
                    let p = pred[row * d + i];
                    let e = ex[i].value();
                    num += w * (p - e) * (p - e);
                    den += w * e * e;
                }
            }
            (num, den)
        },
        |(n1, d1), (n2, d2)| (n1 + n2, d1 + d2),
        (0.0, 0.0),
    );
    if den == 0.0 {
        return Err(DiagError::ZeroNormExact);
    }
    Ok((num / den).sqrt())
}

/// Run the gradient-alignment diagnostic: train with the standard loss and
/// record, at every epoch, the cosine between the training-loss gradient and
/// the reduced-loss gradient evaluated at the same parameters.
pub fn cosine_diag(config: &TrainConfig) -> Result<Vec<TrainRecord>, TrainError> {
    let mut config = config.clone();
    config.cosine_diag = true;
    config.log_every = 1;
    let out = train(&config, TrainOptions::default())?;
    Ok(out.records)
}

/// Relative L2 errors of a parametric model over an `(E, nu)` grid.
/// Returns `(e, nu, rel_l2)` triples in row-major order over `e_values` x
/// `nu_values`.
pub fn error_surface(
    model: &TrainedModel,
    family: &ParamFamily,
    e_values: &[f64],
    nu_values: &[f64],
    grid: &EvalGrid,
) -> Result<Vec<(f64, f64, f64)>, DiagError> {
    let mut out = Vec::with_capacity(e_values.len() * nu_values.len());
    for &e in e_values {
        for &nu in nu_values {
            let instance = family.instance(e, nu)?;
            let exact = instance.exact.as_ref().expect("registry problems are manufactured");
            let rel = model_rel_l2(model, exact.as_ref(), grid, Some((e, nu)))?;
            out.push((e, nu, rel));
        }
    }
    Ok(out)
}

/// The seven Poisson-ratio intervals with their per-bin sample count.
#[derive(Clone, Debug)]
pub struct NuBins {
    pub bins: Vec<(f64, f64)>,
    pub samples_per_bin: usize,
}

impl Default for NuBins {
    fn default() -> Self {
        NuBins {
            bins: vec![
                (0.1, 0.2),
                (0.2, 0.3),
                (0.3, 0.4),
                (0.4, 0.45),
                (0.45, 0.49),
                (0.49, 0.499),
                (0.499, 0.4999),
            ],
            samples_per_bin: 100,
        }
    }
}

/// Mean relative L2 error per Poisson-ratio bin for each model. All models
/// see the same `(E, nu)` draws, so the comparison is paired.
pub fn nu_histogram(
    models: &[&TrainedModel],
    family: &ParamFamily,
    bins: &NuBins,
    grid: &EvalGrid,
    seed: u64,
) -> Result<Vec<Vec<f64>>, DiagError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = vec![Vec::with_capacity(bins.bins.len()); models.len()];
    for &(lo, hi) in &bins.bins {
        let samples: Vec<(f64, f64)> = (0..bins.samples_per_bin)
            .map(|_| {
                (
                    rng.random_range(family.e_range.0..family.e_range.1),
                    rng.random_range(lo..hi),
                )
            })
            .collect();
        for (mi, model) in models.iter().enumerate() {
            let mut acc = 0.0;
            for &(e, nu) in &samples {
                let instance = family.instance(e, nu)?;
                let exact = instance.exact.as_ref().expect("manufactured");
                acc += model_rel_l2(model, exact.as_ref(), grid, Some((e, nu)))?;
            }
            means[mi].push(acc / samples.len() as f64);
        }
    }
    Ok(means)
}

/// Which energy functional to estimate.
pub enum EnergyTarget<'a> {
    /// `delta_r ||div sigma(u) + f||^2 + delta_b ||u - g||^2` on the boundary.
    Full(&'a FieldRef<'a>),
    /// The decomposed functional with uniform split weights.
    Decomposed(&'a DecomposedFields<'a>),
}

/// Fresh-sample Monte-Carlo estimate of the energy functional, using points
/// independent of any training set. Interior and boundary means are scaled
/// by the domain and boundary measures so the estimate targets the integral
/// functional itself.
pub fn energy_estimate(
    target: &EnergyTarget,
    problem: &ProblemSpec,
    w: &LossWeights,
    n_samples: usize,
    seed: u64,
) -> Result<f64, DiagError> {
    let colloc = CollocationSet::generate(
        &problem.domain,
        n_samples,
        n_samples,
        n_samples,
        seed,
    )?;
    let volume = problem.domain.volume();
    let surface = problem.domain.boundary_measure();
    match target {
        EnergyTarget::Full(field) => {
            let (_, b) = standard_loss(field, problem, &colloc, w);
            Ok(volume * b.residual_hat_lambda + surface * b.boundary)
        }
        EnergyTarget::Decomposed(fields) => {
            let (_, b) = decomposed_loss(fields, problem, &colloc, w);
            let scale = problem.material.lambda_scale();
            // The stored tilde_lambda term is normalized by the lambda
            // scale; the uniform-weight functional wants it unnormalized.
            Ok(volume
                * (b.residual_hat_lambda
                    + b.residual_hat_mu
                    + b.residual_tilde_lambda * scale * scale
                    + b.residual_tilde_mu)
                + surface * b.boundary)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elasticity::problems::{ex4_family, problem_registry, ProblemChoice};
    use crate::jet::Jet2;
    use crate::network::{MlpNetwork, MlpSpec};

    fn ex1_grid(res: usize) -> (ProblemSpec, EvalGrid) {
        let problem = problem_registry(ProblemChoice::Ex1 { lambda: 100.0 }).unwrap();
        let grid = EvalGrid::new(&problem.domain, &[res, res]);
        (problem, grid)
    }

    #[test]
    fn grid_covers_closed_box() {
        let (problem, grid) = ex1_grid(11);
        assert_eq!(grid.n, 121);
        let pi = std::f64::consts::PI;
        let first = &grid.points[..2];
        let last = &grid.points[grid.points.len() - 2..];
        assert_eq!(first, &[0.0, 0.0]);
        assert!((last[0] - pi).abs() < 1e-12 && (last[1] - pi).abs() < 1e-12);
        let total: f64 = grid.weights.iter().sum();
        assert!((total - problem.domain.volume()).abs() < 1e-10);
    }

    #[test]
    fn relative_l2_basic_cases() {
        let (problem, grid) = ex1_grid(21);
        let exact = problem.exact.clone().unwrap();
        let exact_vals = grid.exact_values(exact.as_ref());
        // predict == exact.
        let r = relative_l2_values(&exact_vals, &exact_vals, &grid.weights, 2).unwrap();
        assert_eq!(r, 0.0);
        // predict == 0.
        let zeros = vec![0.0; exact_vals.len()];
        let r = relative_l2_values(&zeros, &exact_vals, &grid.weights, 2).unwrap();
        assert!((r - 1.0).abs() < 1e-14);
        // predict = 1.1 exact.
        let scaled: Vec<f64> = exact_vals.iter().map(|v| 1.1 * v).collect();
        let r = relative_l2_values(&scaled, &exact_vals, &grid.weights, 2).unwrap();
        assert!((r - 0.1).abs() < 1e-12, "{r}");
        // zero-norm exact is an error.
        assert_eq!(
            relative_l2_values(&zeros, &zeros, &grid.weights, 2).unwrap_err(),
            DiagError::ZeroNormExact
        );
    }

    #[test]
    fn relative_l2_scale_invariance() {
        let (_, grid) = ex1_grid(15);
        let predict = |x: &[f64]| vec![x[0] * x[1], x[0] - x[1]];
        let exact = |x: &[f64]| vec![x[0], x[1] * x[1]];
        let base = relative_l2(&predict, &exact, &grid).unwrap();
        let c = 37.5;
        let predict_scaled = |x: &[f64]| vec![c * x[0] * x[1], c * (x[0] - x[1])];
        let exact_scaled = |x: &[f64]| vec![c * x[0], c * x[1] * x[1]];
        let scaled = relative_l2(&predict_scaled, &exact_scaled, &grid).unwrap();
        assert!((base - scaled).abs() <= 1e-14 * base);
    }

    #[test]
    fn model_rel_l2_matches_pointwise_route() {
        let (problem, grid) = ex1_grid(13);
        let exact = problem.exact.clone().unwrap();
        let net = MlpNetwork::init(MlpSpec::new(2, vec![7], 2), 3).unwrap();
        let model = TrainedModel::Single(net.clone());
        let batched = model_rel_l2(&model, exact.as_ref(), &grid, None).unwrap();
        let predict = |x: &[f64]| net.forward(x);
        let exact_vals = move |x: &[f64]| {
            let seeds = seed_spatial(x).unwrap();
            exact(&seeds).iter().map(|j| j.value()).collect::<Vec<_>>()
        };
        let pointwise = relative_l2(&predict, &exact_vals, &grid).unwrap();
        assert!((batched - pointwise).abs() <= 1e-12 * pointwise);
    }

    #[test]
    fn error_surface_is_deterministic_and_nonnegative() {
        let family = ex4_family();
        let grid = EvalGrid::new(&family.domain, &[9, 9]);
        let net = MlpNetwork::init(MlpSpec::new(4, vec![6], 2), 5).unwrap();
        let model = TrainedModel::Single(net);
        let es = [2.5, 3.5];
        let nus = [0.2, 0.4, 0.49];
        let a = error_surface(&model, &family, &es, &nus, &grid).unwrap();
        let b = error_surface(&model, &family, &es, &nus, &grid).unwrap();
        assert_eq!(a.len(), 6);
        for ((e1, n1, r1), (e2, n2, r2)) in a.iter().zip(&b) {
            assert_eq!((e1, n1), (e2, n2));
            assert!(*r1 >= 0.0);
            assert_eq!(r1.to_bits(), r2.to_bits());
        }
    }

    #[test]
    fn nu_bins_partition_their_range() {
        let bins = NuBins::default();
        assert_eq!(bins.bins.len(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let nu = rng.random_range(0.1..0.4999);
            let hits = bins
                .bins
                .iter()
                .filter(|(lo, hi)| nu >= *lo && nu < *hi)
                .count();
            assert_eq!(hits, 1, "nu = {nu}");
        }
    }

    #[test]
    fn nu_histogram_is_reproducible() {
        let family = ex4_family();
        let grid = EvalGrid::new(&family.domain, &[7, 7]);
        let net = MlpNetwork::init(MlpSpec::new(4, vec![5], 2), 6).unwrap();
        let model = TrainedModel::Single(net);
        let bins = NuBins {
            samples_per_bin: 3,
            ..Default::default()
        };
        let a = nu_histogram(&[&model], &family, &bins, &grid, 99).unwrap();
        let b = nu_histogram(&[&model], &family, &bins, &grid, 99).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].len(), 7);
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn energy_estimate_vanishes_on_exact_solution() {
        let problem = problem_registry(ProblemChoice::Ex1 { lambda: 50.0 }).unwrap();
        let w = LossWeights {
            delta_r: 0.05,
            delta_s: 1.0,
            delta_b: 20.0,
        };
        let exact = problem.exact.clone().unwrap();
        let field = move |s: &[Jet2]| exact(s);
        let fr = FieldRef::Closure(&field);
        let e = energy_estimate(&EnergyTarget::Full(&fr), &problem, &w, 500, 8).unwrap();
        assert!(e <= 1e-10, "energy {e}");
        assert!(e >= 0.0);
    }

    #[test]
    fn decomposed_energy_estimates_agree_across_seeds() {
        use crate::losses::DecomposedFields;
        let problem = problem_registry(ProblemChoice::Ex1 { lambda: 10.0 }).unwrap();
        let w = LossWeights {
            delta_r: 0.05,
            delta_s: 1.0,
            delta_b: 20.0,
        };
        let spec = MlpSpec::new(2, vec![6], 2);
        let u_hat = MlpNetwork::init(spec.clone(), 31).unwrap();
        let u_tilde = MlpNetwork::init(spec.clone(), 32).unwrap();
        let flam_net = MlpNetwork::init(spec.clone(), 33).unwrap();
        let fmu_net = MlpNetwork::init(spec, 34).unwrap();
        let flam = move |x: &[f64]| flam_net.forward(x);
        let fmu = move |x: &[f64]| fmu_net.forward(x);
        let fields = DecomposedFields {
            u_hat: FieldRef::Network(&u_hat),
            u_tilde: FieldRef::Network(&u_tilde),
            f_lambda: &flam,
            f_mu: &fmu,
        };
        let a =
            energy_estimate(&EnergyTarget::Decomposed(&fields), &problem, &w, 100_000, 5)
                .unwrap();
        let b =
            energy_estimate(&EnergyTarget::Decomposed(&fields), &problem, &w, 100_000, 6)
                .unwrap();
        assert!(a >= 0.0 && b >= 0.0);
        let rel = (a - b).abs() / a.abs();
        assert!(rel < 0.02, "{a} vs {b}: {rel}");
    }

    #[test]
    fn energy_estimates_agree_across_seeds() {
        let problem = problem_registry(ProblemChoice::Ex1 { lambda: 10.0 }).unwrap();
        let w = LossWeights {
            delta_r: 0.05,
            delta_s: 1.0,
            delta_b: 20.0,
        };
        let net = MlpNetwork::init(MlpSpec::new(2, vec![8], 2), 21).unwrap();
        let fr = FieldRef::Network(&net);
        let a = energy_estimate(&EnergyTarget::Full(&fr), &problem, &w, 100_000, 1).unwrap();
        let b = energy_estimate(&EnergyTarget::Full(&fr), &problem, &w, 100_000, 2).unwrap();
        let rel = (a - b).abs() / a.abs();
        assert!(rel < 0.02, "{a} vs {b}: {rel}");
    }
}
