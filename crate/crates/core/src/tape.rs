//! Reverse-mode adjoint tape over jet-valued computations.
//!
//! The tape records an append-only sequence of primitive operations whose
//! values are [`Jet2`]s, so the primal computation carries exact spatial
//! derivatives while the backward sweep produces exact parameter gradients
//! (reverse over forward). Parameter leaves are constant jets; projections
//! extract jet slots as plain scalars so losses can be assembled from PDE
//! residual components.
//!
//! One tape serves one scalar evaluation and is discarded after the backward
//! sweep. The training hot path uses the batched engine in [`crate::batch`]
//! instead; this tape is the general mechanism and the cross-check route.

use crate::jet::{hess_index, hess_len, unary_derivs, Jet2, JetError, UnaryPrimitive, MAX_DIM};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TapeError {
    #[error("tape has no recorded nodes to seed")]
    Unseeded,
    #[error("variable index {0} out of range")]
    VarOutOfRange(usize),
    #[error("parameter count mismatch: expected {expected}, got {got}")]
    ParamCountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Jet(#[from] JetError),
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

#[derive(Clone, Copy, Debug)]
enum Node {
    Constant,
    Param(u32),
    Input,
    Unary(UnaryPrimitive, u32),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    ProjValue(u32),
    ProjGrad(u32, u8),
    ProjHess(u32, u8, u8),
}

/// Append-only operation record with jet-valued nodes.
pub struct AdjointTape {
    dim: usize,
    nodes: Vec<Node>,
    vals: Vec<Jet2>,
    n_params: usize,
}

impl AdjointTape {
    /// A fresh tape for computations over `dim` spatial coordinates (1..=3).
    pub fn new(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "unsupported dimension {dim}");
        AdjointTape {
            dim,
            nodes: Vec::new(),
            vals: Vec::new(),
            n_params: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    fn push(&mut self, node: Node, val: Jet2) -> Var {
        let id = self.nodes.len() as u32;
        self.nodes.push(node);
        self.vals.push(val);
        Var(id)
    }

    /// Record a constant (zero derivatives in every direction).
    pub fn constant(&mut self, v: f64) -> Var {
        self.push(Node::Constant, Jet2::constant(self.dim, v))
    }

    /// Record a parameter leaf. Gradients are reported in registration order.
    pub fn param(&mut self, v: f64) -> Var {
        let ordinal = self.n_params as u32;
        self.n_params += 1;
        self.push(Node::Param(ordinal), Jet2::constant(self.dim, v))
    }

    /// Record a spatial point as seeded coordinate leaves.
    pub fn input_point(&mut self, point: &[f64]) -> Result<Vec<Var>, TapeError> {
        if point.len() != self.dim {
            return Err(JetError::UnsupportedDim(point.len()).into());
        }
        Ok(point
            .iter()
            .enumerate()
            .map(|(axis, &v)| {
                let jet = Jet2::variable(self.dim, v, axis).expect("dim checked");
                self.push(Node::Input, jet)
            })
            .collect())
    }

    pub fn value(&self, var: Var) -> Jet2 {
        self.vals[var.0 as usize]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let val = self.vals[a.0 as usize] + self.vals[b.0 as usize];
        self.push(Node::Add(a.0, b.0), val)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let val = self.vals[a.0 as usize] - self.vals[b.0 as usize];
        self.push(Node::Sub(a.0, b.0), val)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let val = self.vals[a.0 as usize] * self.vals[b.0 as usize];
        self.push(Node::Mul(a.0, b.0), val)
    }

    pub fn unary(&mut self, op: UnaryPrimitive, a: Var) -> Result<Var, TapeError> {
        let val = crate::jet::jet_apply(op, &self.vals[a.0 as usize])?;
        Ok(self.push(Node::Unary(op, a.0), val))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryPrimitive::Neg, a).expect("neg is total")
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(UnaryPrimitive::Sin, a).expect("sin is total")
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(UnaryPrimitive::Cos, a).expect("cos is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryPrimitive::Exp, a).expect("exp is total")
    }

    pub fn erf(&mut self, a: Var) -> Var {
        self.unary(UnaryPrimitive::Erf, a).expect("erf is total")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryPrimitive::Gelu, a).expect("gelu is total")
    }

    pub fn powi(&mut self, a: Var, n: i32) -> Result<Var, TapeError> {
        self.unary(UnaryPrimitive::Powi(n), a)
    }

    /// Division, recorded as reciprocal followed by multiplication.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let r = self.unary(UnaryPrimitive::Recip, b)?;
        Ok(self.mul(a, r))
    }

    /// Extract the value slot of a jet node as a plain scalar node.
    pub fn proj_value(&mut self, a: Var) -> Var {
        let v = self.vals[a.0 as usize].value();
        self.push(Node::ProjValue(a.0), Jet2::constant(self.dim, v))
    }

    /// Extract the `j`-th gradient slot as a plain scalar node.
    pub fn proj_grad(&mut self, a: Var, j: usize) -> Var {
        assert!(j < self.dim);
        let v = self.vals[a.0 as usize].grad(j);
        self.push(Node::ProjGrad(a.0, j as u8), Jet2::constant(self.dim, v))
    }

    /// Extract the `(j, k)` Hessian slot as a plain scalar node.
    pub fn proj_hess(&mut self, a: Var, j: usize, k: usize) -> Var {
        assert!(j < self.dim && k < self.dim);
        let v = self.vals[a.0 as usize].hess(j, k);
        self.push(
            Node::ProjHess(a.0, j as u8, k as u8),
            Jet2::constant(self.dim, v),
        )
    }

    /// Helper: `acc + a * b` as one recorded chain.
    pub fn mul_add(&mut self, acc: Var, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.add(acc, p)
    }

    /// Gradient of the value slot of `seed` with respect to every parameter
    /// leaf, in registration order. Exact to machine precision, including
    /// derivatives flowing through jet-valued intermediates.
    pub fn grad_wrt_params(&self, seed: Var) -> Result<Vec<f64>, TapeError> {
        if self.nodes.is_empty() {
            return Err(TapeError::Unseeded);
        }
        if seed.0 as usize >= self.nodes.len() {
            return Err(TapeError::VarOutOfRange(seed.0 as usize));
        }
        let d = self.dim;
        let hl = hess_len(d);
        let mut adj = vec![Cotangent::zero(); self.nodes.len()];
        adj[seed.0 as usize].v = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let zbar = adj[i];
            if zbar.is_zero(d, hl) {
                continue;
            }
            match self.nodes[i] {
                Node::Constant | Node::Param(_) | Node::Input => {}
                Node::Add(a, b) => {
                    adj[a as usize].accum(&zbar, 1.0, d, hl);
                    adj[b as usize].accum(&zbar, 1.0, d, hl);
                }
                Node::Sub(a, b) => {
                    adj[a as usize].accum(&zbar, 1.0, d, hl);
                    adj[b as usize].accum(&zbar, -1.0, d, hl);
                }
                Node::Mul(a, b) => {
                    let (xa, xb) = (self.vals[a as usize], self.vals[b as usize]);
                    mul_adjoint(&zbar, &xb, &mut adj[a as usize], d);
                    mul_adjoint(&zbar, &xa, &mut adj[b as usize], d);
                }
                Node::Unary(op, a) => {
                    let x = self.vals[a as usize];
                    let (_, f1, f2, f3) = unary_derivs(op, x.value());
                    unary_adjoint(&zbar, &x, f1, f2, f3, &mut adj[a as usize], d);
                }
                Node::ProjValue(a) => adj[a as usize].v += zbar.v,
                Node::ProjGrad(a, j) => adj[a as usize].g[j as usize] += zbar.v,
                Node::ProjHess(a, j, k) => {
                    adj[a as usize].h[hess_index(d, j as usize, k as usize)] += zbar.v
                }
            }
        }

        let mut grad = vec![0.0; self.n_params];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Node::Param(ordinal) = node {
                grad[*ordinal as usize] = adj[i].v;
            }
        }
        Ok(grad)
    }
}

/// Cotangent of a jet node: one slot per jet component.
#[derive(Clone, Copy)]
struct Cotangent {
    v: f64,
    g: [f64; MAX_DIM],
    h: [f64; crate::jet::MAX_HESS],
}

impl Cotangent {
    fn zero() -> Self {
        Cotangent {
            v: 0.0,
            g: [0.0; MAX_DIM],
            h: [0.0; crate::jet::MAX_HESS],
        }
    }

    fn is_zero(&self, d: usize, hl: usize) -> bool {
        self.v == 0.0
            && self.g[..d].iter().all(|&x| x == 0.0)
            && self.h[..hl].iter().all(|&x| x == 0.0)
    }

    fn accum(&mut self, other: &Cotangent, scale: f64, d: usize, hl: usize) {
        self.v += scale * other.v;
        for j in 0..d {
            self.g[j] += scale * other.g[j];
        }
        for j in 0..hl {
            self.h[j] += scale * other.h[j];
        }
    }
}

/// Accumulate the adjoint of `z = x * y` into `xbar`, given `zbar` and the
/// other operand `y`. This is the transpose of the linear map `x -> x * y`
/// on jet slots.
fn mul_adjoint(zbar: &Cotangent, y: &Jet2, xbar: &mut Cotangent, d: usize) {
    let hl = hess_len(d);
    let mut dot = zbar.v * y.v;
    for j in 0..d {
        dot += zbar.g[j] * y.g[j];
        xbar.g[j] += zbar.g[j] * y.v;
    }
    for idx in 0..hl {
        dot += zbar.h[idx] * y.h[idx];
        xbar.h[idx] += zbar.h[idx] * y.v;
    }
    xbar.v += dot;
    let mut idx = 0;
    for j in 0..d {
        for k in j..d {
            let zh = zbar.h[idx];
            xbar.g[j] += zh * y.g[k];
            xbar.g[k] += zh * y.g[j];
            idx += 1;
        }
    }
}

/// Accumulate the adjoint of `z = op(x)` into `xbar`, given the primitive's
/// derivatives `f1, f2, f3` at `x.value()`.
fn unary_adjoint(zbar: &Cotangent, x: &Jet2, f1: f64, f2: f64, f3: f64, xbar: &mut Cotangent, d: usize) {
    let mut v_acc = zbar.v * f1;
    for j in 0..d {
        v_acc += zbar.g[j] * f2 * x.g[j];
        xbar.g[j] += zbar.g[j] * f1;
    }
    let mut idx = 0;
    for j in 0..d {
        for k in j..d {
            let zh = zbar.h[idx];
            v_acc += zh * (f2 * x.h[idx] + f3 * x.g[j] * x.g[k]);
            xbar.g[j] += zh * f2 * x.g[k];
            xbar.g[k] += zh * f2 * x.g[j];
            xbar.h[idx] += zh * f1;
            idx += 1;
        }
    }
    xbar.v += v_acc;
}
