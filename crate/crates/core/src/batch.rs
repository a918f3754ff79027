//! Batched jet evaluation of networks with layer-level reverse-mode
//! gradients.
//!
//! Jets for a whole batch of points are stored as stacked slot planes: a
//! [`JetMat`] is a `(slots * points) x cols` row-major matrix where slot 0
//! holds values, slots `1..=d` the gradient axes and the remaining slots the
//! packed Hessian entries. Affine layers act identically on every slot, so
//! each layer is a single GEMM over the stacked planes; the activation mixes
//! slots only pointwise. The backward sweep propagates slot-shaped
//! cotangents through the same structure and accumulates exact parameter
//! gradients.
//!
//! This is the training hot path. It computes the same reverse-over-forward
//! derivatives as the general tape in [`crate::tape`], which the tests use
//! as a cross-check.

use crate::jet::{gelu_derivs, hess_len, Jet2};
use crate::network::{Activation, LayerOffsets, MlpNetwork};

/// Slots carried by a full second-order jet in dimension `d`.
#[inline]
pub const fn jet_slots(d: usize) -> usize {
    1 + d + hess_len(d)
}

// Plane buffers are large and short-lived; recycling them through a
// thread-local pool keeps the hot loop free of allocator traffic.
thread_local! {
    static POOL: std::cell::RefCell<Vec<Vec<f64>>> =
        const { std::cell::RefCell::new(Vec::new()) };
}

const POOL_LIMIT: usize = 32;

fn pool_take(n: usize, zero: bool) -> Vec<f64> {
    let mut v = POOL
        .with(|p| p.borrow_mut().pop())
        .unwrap_or_default();
    if zero {
        v.clear();
        v.resize(n, 0.0);
    } else if v.len() < n {
        v.resize(n, 0.0);
    } else {
        v.truncate(n);
    }
    v
}

fn pool_put(data: Vec<f64>) {
    if data.capacity() == 0 {
        return;
    }
    POOL.with(|p| {
        let mut pool = p.borrow_mut();
        if pool.len() < POOL_LIMIT {
            pool.push(data);
        }
    });
}

/// Stacked slot planes for a batch of points.
#[derive(Debug)]
pub struct JetMat {
    slots: usize,
    points: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Clone for JetMat {
    fn clone(&self) -> Self {
        let mut data = pool_take(self.data.len(), false);
        data.copy_from_slice(&self.data);
        JetMat {
            slots: self.slots,
            points: self.points,
            cols: self.cols,
            data,
        }
    }
}

impl Drop for JetMat {
    fn drop(&mut self) {
        pool_put(std::mem::take(&mut self.data));
    }
}

impl JetMat {
    pub fn zeros(slots: usize, points: usize, cols: usize) -> Self {
        JetMat {
            slots,
            points,
            cols,
            data: pool_take(slots * points * cols, true),
        }
    }

    /// A recycled matrix whose every entry will be overwritten before use;
    /// contents start out stale.
    fn output_buffer(slots: usize, points: usize, cols: usize) -> Self {
        JetMat {
            slots,
            points,
            cols,
            data: pool_take(slots * points * cols, false),
        }
    }

    #[inline]
    pub fn slots(&self) -> usize {
        self.slots
    }

    #[inline]
    pub fn points(&self) -> usize {
        self.points
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn plane(&self, s: usize) -> &[f64] {
        let n = self.points * self.cols;
        &self.data[s * n..(s + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, s: usize) -> &mut [f64] {
        let n = self.points * self.cols;
        &mut self.data[s * n..(s + 1) * n]
    }

    #[inline]
    pub fn at(&self, s: usize, point: usize, col: usize) -> f64 {
        self.data[(s * self.points + point) * self.cols + col]
    }

    #[inline]
    pub fn at_mut(&mut self, s: usize, point: usize, col: usize) -> &mut f64 {
        &mut self.data[(s * self.points + point) * self.cols + col]
    }

    /// Consume the matrix, handing out its backing storage.
    pub fn take_data(mut self) -> Vec<f64> {
        std::mem::take(&mut self.data)
    }

    /// Reassemble one output component as a [`Jet2`] (full-jet mats only).
    pub fn jet(&self, point: usize, col: usize, d: usize) -> Jet2 {
        debug_assert_eq!(self.slots, jet_slots(d));
        let mut out = Jet2::constant(d, self.at(0, point, col));
        for j in 0..d {
            out.g[j] = self.at(1 + j, point, col);
        }
        for idx in 0..hess_len(d) {
            out.h[idx] = self.at(1 + d + idx, point, col);
        }
        out
    }
}

/// Build the seeded input planes for a batch of points (`xs` is
/// `points x input_dim` row-major). The first `spatial_dim` columns are
/// coordinates and get unit gradient seeds; any further columns (parameter
/// inputs) are constants.
pub fn seed_input(xs: &[f64], points: usize, input_dim: usize, spatial_dim: usize) -> JetMat {
    debug_assert_eq!(xs.len(), points * input_dim);
    let mut m = JetMat::zeros(jet_slots(spatial_dim), points, input_dim);
    m.plane_mut(0).copy_from_slice(xs);
    for axis in 0..spatial_dim {
        let plane = m.plane_mut(1 + axis);
        for b in 0..points {
            plane[b * input_dim + axis] = 1.0;
        }
    }
    m
}

/// Value-only input planes (no derivative tracking).
pub fn values_input(xs: &[f64], points: usize, input_dim: usize) -> JetMat {
    debug_assert_eq!(xs.len(), points * input_dim);
    let mut m = JetMat::zeros(1, points, input_dim);
    m.plane_mut(0).copy_from_slice(xs);
    m
}

#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `out = input * W^T`, bias added to the value plane.
fn affine_forward(theta: &[f64], off: &LayerOffsets, input: &JetMat) -> JetMat {
    let mut out = JetMat::output_buffer(input.slots, input.points, off.n_out);
    let m = input.slots * input.points;
    dgemm(
        m,
        off.n_in,
        off.n_out,
        1.0,
        &input.data,
        off.n_in,
        1,
        &theta[off.weight..off.bias],
        1,
        off.n_in,
        0.0,
        &mut out.data,
        off.n_out,
        1,
    );
    let bias = &theta[off.bias..off.bias + off.n_out];
    for row in out.plane_mut(0).chunks_exact_mut(off.n_out) {
        for (z, b) in row.iter_mut().zip(bias) {
            *z += b;
        }
    }
    out
}

/// Cached activation derivatives for one hidden layer; `g3` is only filled
/// when the forward pass is recorded for a backward sweep.
struct ActCache {
    g1: Vec<f64>,
    g2: Vec<f64>,
    g3: Vec<f64>,
}

impl Drop for ActCache {
    fn drop(&mut self) {
        pool_put(std::mem::take(&mut self.g1));
        pool_put(std::mem::take(&mut self.g2));
        pool_put(std::mem::take(&mut self.g3));
    }
}

fn act_forward(
    pre: &JetMat,
    d: usize,
    want_cache: bool,
) -> (JetMat, Option<ActCache>) {
    let n = pre.points * pre.cols;
    let mut out = JetMat::output_buffer(pre.slots, pre.points, pre.cols);
    let mut g1 = pool_take(n, false);
    let mut g2 = if pre.slots > 1 || want_cache {
        pool_take(n, false)
    } else {
        Vec::new()
    };
    let mut g3 = if want_cache { pool_take(n, false) } else { Vec::new() };

    {
        let vals = pre.plane(0);
        let outv = out.plane_mut(0);
        for i in 0..n {
            let (a0, a1, a2, a3) = gelu_derivs(vals[i]);
            outv[i] = a0;
            g1[i] = a1;
            if !g2.is_empty() {
                g2[i] = a2;
            }
            if want_cache {
                g3[i] = a3;
            }
        }
    }

    if pre.slots > 1 {
        for axis in 0..d {
            let src = pre.plane(1 + axis);
            let dst = out.plane_mut(1 + axis);
            for i in 0..n {
                dst[i] = g1[i] * src[i];
            }
        }
        let mut idx = 0;
        for j in 0..d {
            for k in j..d {
                let (hj, hk) = (pre.plane(1 + j), pre.plane(1 + k));
                let hh = pre.plane(1 + d + idx);
                let dst = out.plane_mut(1 + d + idx);
                for i in 0..n {
                    dst[i] = g1[i] * hh[i] + g2[i] * hj[i] * hk[i];
                }
                idx += 1;
            }
        }
    }

    let cache = want_cache.then_some(ActCache { g1, g2, g3 });
    (out, cache)
}

/// Cotangent of the activation input given the cotangent of its output.
fn act_backward(pre: &JetMat, cache: &ActCache, abar: &JetMat, d: usize) -> JetMat {
    let n = pre.points * pre.cols;
    let mut pbar = JetMat::output_buffer(pre.slots, pre.points, pre.cols);
    let (g1, g2, g3) = (&cache.g1, &cache.g2, &cache.g3);

    {
        let av = abar.plane(0);
        let dst = pbar.plane_mut(0);
        for i in 0..n {
            dst[i] = av[i] * g1[i];
        }
    }

    if pre.slots > 1 {
        // Gradient slots: direct term plus the Hessian slots' dependence.
        for axis in 0..d {
            let ag = abar.plane(1 + axis);
            let dst = pbar.plane_mut(1 + axis);
            for i in 0..n {
                dst[i] = ag[i] * g1[i];
            }
        }
        {
            let dst = pbar.plane_mut(0);
            for axis in 0..d {
                let ag = abar.plane(1 + axis);
                let pg = pre.plane(1 + axis);
                for i in 0..n {
                    dst[i] += ag[i] * g2[i] * pg[i];
                }
            }
        }
        let mut idx = 0;
        for j in 0..d {
            for k in j..d {
                let plane = 1 + d + idx;
                let ah = abar.plane(plane);
                // value slot picks up g2 * pre.h + g3 * pre.g_j * pre.g_k
                {
                    let ph = pre.plane(plane);
                    let (pj, pk) = (pre.plane(1 + j), pre.plane(1 + k));
                    let dst = pbar.plane_mut(0);
                    for i in 0..n {
                        dst[i] += ah[i] * (g2[i] * ph[i] + g3[i] * pj[i] * pk[i]);
                    }
                }
                {
                    let pk = pre.plane(1 + k);
                    let dst = pbar.plane_mut(1 + j);
                    for i in 0..n {
                        dst[i] += ah[i] * g2[i] * pk[i];
                    }
                }
                {
                    let pj = pre.plane(1 + j);
                    let dst = pbar.plane_mut(1 + k);
                    for i in 0..n {
                        dst[i] += ah[i] * g2[i] * pj[i];
                    }
                }
                {
                    let dst = pbar.plane_mut(plane);
                    for i in 0..n {
                        dst[i] = ah[i] * g1[i];
                    }
                }
                idx += 1;
            }
        }
    }

    pbar
}

/// `dW += dout^T input`, `db += column sums of the value plane of dout`,
/// and optionally the input cotangent `dout * W`.
fn affine_backward(
    theta: &[f64],
    off: &LayerOffsets,
    input: &JetMat,
    dout: &JetMat,
    want_dinput: bool,
    grad: &mut [f64],
) -> Option<JetMat> {
    let m = input.slots * input.points;
    dgemm(
        off.n_out,
        m,
        off.n_in,
        1.0,
        &dout.data,
        1,
        off.n_out,
        &input.data,
        off.n_in,
        1,
        1.0,
        &mut grad[off.weight..off.bias],
        off.n_in,
        1,
    );
    for row in dout.plane(0).chunks_exact(off.n_out) {
        for (g, z) in grad[off.bias..off.bias + off.n_out].iter_mut().zip(row) {
            *g += z;
        }
    }
    want_dinput.then(|| {
        let mut dinput = JetMat::output_buffer(input.slots, input.points, off.n_in);
        dgemm(
            m,
            off.n_out,
            off.n_in,
            1.0,
            &dout.data,
            off.n_out,
            1,
            &theta[off.weight..off.bias],
            off.n_in,
            1,
            0.0,
            &mut dinput.data,
            off.n_in,
            1,
        );
        dinput
    })
}

/// Saved forward state for one batched evaluation.
pub struct ForwardCache {
    pre: Vec<JetMat>,
    post: Vec<JetMat>,
    act: Vec<Option<ActCache>>,
    spatial_dim: usize,
}

/// Spatial dimension implied by a slot count (inverse of [`jet_slots`]).
fn spatial_dim_for_slots(slots: usize) -> usize {
    match slots {
        1 => 0,
        3 => 1,
        6 => 2,
        10 => 3,
        _ => panic!("unsupported slot count {slots}"),
    }
}

/// Forward pass over a batch. With `with_cache` the per-layer state needed
/// by [`backward_batch`] is retained.
pub fn forward_batch(
    net: &MlpNetwork,
    input: &JetMat,
    with_cache: bool,
) -> (JetMat, Option<ForwardCache>) {
    let offsets = net.layer_offsets();
    let n_layers = offsets.len();
    let d = spatial_dim_for_slots(input.slots);
    let theta = net.theta();
    let mut cache = with_cache.then(|| ForwardCache {
        pre: Vec::with_capacity(n_layers - 1),
        post: Vec::with_capacity(n_layers - 1),
        act: Vec::with_capacity(n_layers - 1),
        spatial_dim: d,
    });

    let mut cur = affine_forward(theta, &offsets[0], input);
    for l in 1..n_layers {
        let (post, act) = match net.spec().activation {
            Activation::Gelu => act_forward(&cur, d, with_cache),
            Activation::Identity => (cur.clone(), None),
        };
        let next = affine_forward(theta, &offsets[l], &post);
        if let Some(c) = cache.as_mut() {
            c.pre.push(cur);
            c.post.push(post);
            c.act.push(act);
        }
        cur = next;
    }
    (cur, cache)
}

/// Accumulate `d(loss)/d(theta)` into `grad` given the cotangent of the
/// network outputs. `input` must be the same matrix the forward pass saw.
pub fn backward_batch(
    net: &MlpNetwork,
    input: &JetMat,
    cache: &ForwardCache,
    obar: &JetMat,
    grad: &mut [f64],
) {
    let offsets = net.layer_offsets();
    let n_layers = offsets.len();
    let theta = net.theta();
    debug_assert_eq!(grad.len(), theta.len());
    debug_assert_eq!(cache.pre.len(), n_layers - 1);

    let mut dout = None;
    for l in (0..n_layers).rev() {
        let dcur = dout.as_ref().unwrap_or(obar);
        let layer_input: &JetMat = if l == 0 { input } else { &cache.post[l - 1] };
        let dinput = affine_backward(theta, &offsets[l], layer_input, dcur, l > 0, grad);
        if l > 0 {
            let dpost = dinput.expect("requested above");
            let dpre = match &cache.act[l - 1] {
                Some(act) => act_backward(&cache.pre[l - 1], act, &dpost, cache.spatial_dim),
                None => dpost,
            };
            dout = Some(dpre);
        }
    }
}

/// Plain batched evaluation: returns `points x output_dim` values, row-major.
pub fn forward_values(net: &MlpNetwork, xs: &[f64], points: usize) -> Vec<f64> {
    let input_dim = net.spec().input_dim;
    let input = values_input(xs, points, input_dim);
    let (out, _) = forward_batch(net, &input, false);
    out.take_data()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::seed_spatial;
    use crate::network::{Activation, MlpSpec};
    use crate::tape::AdjointTape;

    fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(a.abs()) + abs
    }

    #[test]
    fn batched_forward_matches_per_point_jets() {
        for d in [2usize, 3] {
            let spec = MlpSpec::new(d, vec![7, 5], d);
            let net = MlpNetwork::init(spec, 21).unwrap();
            let pts: Vec<Vec<f64>> = (0..9)
                .map(|i| (0..d).map(|j| 0.1 * (i * d + j) as f64 - 0.4).collect())
                .collect();
            let flat: Vec<f64> = pts.iter().flatten().copied().collect();
            let input = seed_input(&flat, pts.len(), d, d);
            let (out, _) = forward_batch(&net, &input, false);
            for (b, p) in pts.iter().enumerate() {
                let jets = net.forward_jet(&seed_spatial(p).unwrap());
                for (c, jet) in jets.iter().enumerate() {
                    let got = out.jet(b, c, d);
                    assert!(rel_close(got.value(), jet.value(), 1e-12, 1e-14));
                    for j in 0..d {
                        assert!(rel_close(got.grad(j), jet.grad(j), 1e-12, 1e-14));
                        for k in 0..d {
                            assert!(rel_close(got.hess(j, k), jet.hess(j, k), 1e-12, 1e-13));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn forward_values_matches_per_point() {
        let net = MlpNetwork::init(MlpSpec::new(4, vec![6], 2), 3).unwrap();
        let xs: Vec<f64> = (0..20).map(|i| 0.05 * i as f64 - 0.3).collect();
        let vals = forward_values(&net, &xs, 5);
        for b in 0..5 {
            let per = net.forward(&xs[b * 4..(b + 1) * 4]);
            for c in 0..2 {
                assert!(rel_close(vals[b * 2 + c], per[c], 1e-13, 1e-15));
            }
        }
    }

    /// Quadratic loss over every jet slot of every output, with distinct
    /// weights so each slot's cotangent path is exercised.
    fn slot_loss_weights(d: usize) -> (f64, f64, f64) {
        let _ = d;
        (1.0, 0.7, 0.3)
    }

    fn batch_route_grad(net: &MlpNetwork, pts: &[Vec<f64>], d: usize) -> (f64, Vec<f64>) {
        let (wv, wg, wh) = slot_loss_weights(d);
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        let input = seed_input(&flat, pts.len(), d, d);
        let (out, cache) = forward_batch(net, &input, true);
        let mut obar = JetMat::zeros(out.slots(), out.points(), out.cols());
        let mut loss = 0.0;
        for b in 0..out.points() {
            for c in 0..out.cols() {
                let v = out.at(0, b, c);
                loss += wv * v * v;
                *obar.at_mut(0, b, c) = 2.0 * wv * v;
                for j in 0..d {
                    let g = out.at(1 + j, b, c);
                    loss += wg * g * g;
                    *obar.at_mut(1 + j, b, c) = 2.0 * wg * g;
                }
                for idx in 0..hess_len(d) {
                    let h = out.at(1 + d + idx, b, c);
                    loss += wh * h * h;
                    *obar.at_mut(1 + d + idx, b, c) = 2.0 * wh * h;
                }
            }
        }
        let mut grad = vec![0.0; net.theta().len()];
        backward_batch(net, &input, &cache.unwrap(), &obar, &mut grad);
        (loss, grad)
    }

    fn tape_route_grad(net: &MlpNetwork, pts: &[Vec<f64>], d: usize) -> (f64, Vec<f64>) {
        let (wv, wg, wh) = slot_loss_weights(d);
        let mut total_loss = 0.0;
        let mut total_grad = vec![0.0; net.theta().len()];
        for p in pts {
            let mut tape = AdjointTape::new(d);
            let xs = tape.input_point(p).unwrap();
            let outs = net.tape_forward(&mut tape, &xs);
            let mut loss = tape.constant(0.0);
            let weighted_square = |tape: &mut AdjointTape, var, w: f64, acc| {
                let sq = tape.mul(var, var);
                let wc = tape.constant(w);
                let term = tape.mul(wc, sq);
                tape.add(acc, term)
            };
            for o in &outs {
                let v = tape.proj_value(*o);
                loss = weighted_square(&mut tape, v, wv, loss);
                for j in 0..d {
                    let g = tape.proj_grad(*o, j);
                    loss = weighted_square(&mut tape, g, wg, loss);
                }
                for j in 0..d {
                    for k in j..d {
                        let h = tape.proj_hess(*o, j, k);
                        loss = weighted_square(&mut tape, h, wh, loss);
                    }
                }
            }
            total_loss += tape.value(loss).value();
            let g = tape.grad_wrt_params(loss).unwrap();
            for (t, gi) in total_grad.iter_mut().zip(g) {
                *t += gi;
            }
        }
        (total_loss, total_grad)
    }

    fn fd_route_grad(net: &MlpNetwork, pts: &[Vec<f64>], d: usize) -> Vec<f64> {
        let loss_at = |theta: &[f64]| {
            let mut probe = net.clone();
            probe.set_theta(theta).unwrap();
            batch_route_grad(&probe, pts, d).0
        };
        let mut theta = net.theta().to_vec();
        let mut grad = vec![0.0; theta.len()];
        let h = 1e-5;
        for i in 0..theta.len() {
            let orig = theta[i];
            theta[i] = orig + h;
            let up = loss_at(&theta);
            theta[i] = orig - h;
            let down = loss_at(&theta);
            theta[i] = orig;
            grad[i] = (up - down) / (2.0 * h);
        }
        grad
    }

    #[test]
    fn gradient_routes_agree() {
        for d in [2usize, 3] {
            let spec = MlpSpec::new(d, vec![5, 4], d);
            let net = MlpNetwork::init(spec, 33 + d as u64).unwrap();
            let pts: Vec<Vec<f64>> = (0..3)
                .map(|i| (0..d).map(|j| 0.2 * (i + j) as f64 - 0.1).collect())
                .collect();
            let (_, batch_grad) = batch_route_grad(&net, &pts, d);
            let (_, tape_grad) = tape_route_grad(&net, &pts, d);
            let fd_grad = fd_route_grad(&net, &pts, d);
            for i in 0..batch_grad.len() {
                assert!(
                    rel_close(batch_grad[i], tape_grad[i], 1e-10, 1e-12),
                    "dim {d} comp {i}: batch {} vs tape {}",
                    batch_grad[i],
                    tape_grad[i]
                );
                assert!(
                    rel_close(batch_grad[i], fd_grad[i], 1e-5, 1e-8),
                    "dim {d} comp {i}: batch {} vs fd {}",
                    batch_grad[i],
                    fd_grad[i]
                );
            }
        }
    }

    #[test]
    fn gradient_routes_agree_identity_activation() {
        let mut spec = MlpSpec::new(2, vec![4, 4], 2);
        spec.activation = Activation::Identity;
        let net = MlpNetwork::init(spec, 77).unwrap();
        let pts = vec![vec![0.3, -0.2], vec![0.9, 0.4]];
        let (_, batch_grad) = batch_route_grad(&net, &pts, 2);
        let fd_grad = fd_route_grad(&net, &pts, 2);
        for i in 0..batch_grad.len() {
            assert!(rel_close(batch_grad[i], fd_grad[i], 1e-5, 1e-8));
        }
    }
}
