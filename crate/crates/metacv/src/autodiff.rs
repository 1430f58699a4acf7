//! Nested automatic differentiation over plain `f64` computations.
//!
//! Three pieces compose to give every derivative this crate needs:
//!
//! * [`Dual`] — forward-mode dual numbers, used for derivatives with respect
//!   to *inputs* (one pass per input coordinate; the divergence of a vector
//!   field is the trace of the resulting Jacobian).
//! * [`Tape`] / [`Var`] — a reverse-mode tape, used for derivatives with
//!   respect to *parameters* of scalar losses.
//! * Nesting — both are generic over the [`Scalar`] they compute with, so a
//!   tape can record arithmetic whose "numbers" are variables of another
//!   tape. Running a tape of `Var<Var<f64>>` inside a tape of `Var<f64>`
//!   yields exact second-order meta-gradients of an unrolled inner loop
//!   ([`meta_grad_exact`]); forward duals over tape variables differentiate
//!   divergence terms with respect to parameters.
//!
//! Everything is `f64`. Derivatives are checked against the independent
//! central finite-difference oracle [`finite_diff_grad`], which evaluates
//! losses through the plain `f64` path only.

use std::cell::RefCell;
use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

/// Errors reported by the differentiation entry points.
#[derive(Debug, Error)]
pub enum AdError {
    /// A slice had the wrong length for the program it was passed to.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// A non-finite value appeared in inputs, the program value, or a
    /// derivative.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
}

/// The number type differentiable programs are written against.
///
/// Implemented by `f64` (plain evaluation), [`Dual`] (forward mode) and
/// [`Var`] (reverse mode). Nested combinations — `Dual<Var>`, `Var` over a
/// tape of `Var`s — give higher derivatives.
pub trait Scalar:
    Copy + Debug + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    /// Lift a constant. Constants never carry derivative information.
    fn from_f64(v: f64) -> Self;
    /// The underlying primal value, for diagnostics and finiteness checks.
    fn value(self) -> f64;
    fn sigmoid(self) -> Self;
    fn tanh(self) -> Self;
    /// True only for *structural* zeros (constants equal to zero). Used to
    /// skip arithmetic that cannot contribute to any derivative.
    fn is_const_zero(self) -> bool;
    /// True only for structural ones.
    fn is_const_one(self) -> bool;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sigmoid(self) -> f64 {
        1.0 / (1.0 + (-self).exp())
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn is_const_zero(self) -> bool {
        self == 0.0
    }
    fn is_const_one(self) -> bool {
        self == 1.0
    }
}

// ─── Forward mode ───────────────────────────────────────────────────────────

/// Forward-mode dual number: primal part `re`, tangent part `du`.
#[derive(Clone, Copy, Debug)]
pub struct Dual<V: Scalar> {
    pub re: V,
    pub du: V,
}

impl<V: Scalar> Dual<V> {
    /// Lift a value with zero tangent.
    pub fn constant(v: V) -> Self {
        Dual { re: v, du: V::zero() }
    }
    /// Lift a value with unit tangent (the coordinate being differentiated).
    pub fn seeded(v: V) -> Self {
        Dual { re: v, du: V::one() }
    }
}

impl<V: Scalar> Add for Dual<V> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual { re: self.re + o.re, du: self.du + o.du }
    }
}

impl<V: Scalar> Sub for Dual<V> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual { re: self.re - o.re, du: self.du - o.du }
    }
}

impl<V: Scalar> Mul for Dual<V> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual {
            re: self.re * o.re,
            du: self.re * o.du + self.du * o.re,
        }
    }
}

impl<V: Scalar> Neg for Dual<V> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual { re: -self.re, du: -self.du }
    }
}

impl<V: Scalar> Scalar for Dual<V> {
    fn from_f64(v: f64) -> Self {
        Dual::constant(V::from_f64(v))
    }
    fn value(self) -> f64 {
        self.re.value()
    }
    fn sigmoid(self) -> Self {
        let s = self.re.sigmoid();
        Dual { re: s, du: s * (V::one() - s) * self.du }
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual { re: t, du: (V::one() - t * t) * self.du }
    }
    fn is_const_zero(self) -> bool {
        self.re.is_const_zero() && self.du.is_const_zero()
    }
    fn is_const_one(self) -> bool {
        self.re.is_const_one() && self.du.is_const_zero()
    }
}

// ─── Reverse mode ───────────────────────────────────────────────────────────

const NO_PARENT: u32 = u32::MAX;

struct Node<V> {
    p0: u32,
    p1: u32,
    d0: V,
    d1: V,
}

/// A reverse-mode tape. One tape is created per gradient evaluation; tapes
/// are not shared across threads.
///
/// The tape is generic over the scalar its arithmetic is performed in, which
/// is what allows nesting: the backward sweep of a `Tape<Var<'o, f64>>`
/// performs `Var<'o, f64>` arithmetic, i.e. it is itself recorded on the
/// outer tape and can be differentiated again.
pub struct Tape<V: Scalar> {
    nodes: RefCell<Vec<Node<V>>>,
}

impl<V: Scalar> Default for Tape<V> {
    fn default() -> Self {
        Self::new()
    }
}

impl<V: Scalar> Tape<V> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape { nodes: RefCell::new(Vec::with_capacity(n)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Introduce a leaf variable holding `val`.
    pub fn var(&self, val: V) -> Var<'_, V> {
        let idx = self.push(NO_PARENT, V::zero(), NO_PARENT, V::zero());
        Var { val, idx, tape: Some(self) }
    }

    fn push(&self, p0: u32, d0: V, p1: u32, d1: V) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        assert!(idx < NO_PARENT as usize, "tape overflow");
        nodes.push(Node { p0, p1, d0, d1 });
        idx as u32
    }

    /// Reverse sweep: the gradient of `out` with respect to each of `wrt`.
    ///
    /// Variables of other tapes must not appear; constants in `wrt` get a
    /// zero gradient, as does any leaf the output does not depend on.
    pub fn grad(&self, out: Var<'_, V>, wrt: &[Var<'_, V>]) -> Vec<V> {
        let nodes = self.nodes.borrow();
        let mut adj: Vec<V> = vec![V::zero(); nodes.len()];
        if let Some(t) = out.tape {
            assert!(std::ptr::eq(t, self), "output recorded on a different tape");
            adj[out.idx as usize] = V::one();
            for i in (0..nodes.len()).rev() {
                let a = adj[i];
                if a.is_const_zero() {
                    continue;
                }
                let n = &nodes[i];
                if n.p0 != NO_PARENT {
                    adj[n.p0 as usize] = adj[n.p0 as usize] + a * n.d0;
                }
                if n.p1 != NO_PARENT {
                    adj[n.p1 as usize] = adj[n.p1 as usize] + a * n.d1;
                }
            }
        }
        // A constant output leaves every adjoint at structural zero.
        wrt.iter()
            .map(|v| match v.tape {
                Some(t) => {
                    assert!(std::ptr::eq(t, self), "wrt variable from a different tape");
                    adj[v.idx as usize]
                }
                None => V::zero(),
            })
            .collect()
    }
}

/// A value recorded on a [`Tape`], or a free constant (`tape: None`).
#[derive(Clone, Copy)]
pub struct Var<'t, V: Scalar> {
    val: V,
    idx: u32,
    tape: Option<&'t Tape<V>>,
}

impl<V: Scalar> Debug for Var<'_, V> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?})", self.val)
    }
}

impl<'t, V: Scalar> Var<'t, V> {
    fn constant(val: V) -> Self {
        Var { val, idx: NO_PARENT, tape: None }
    }

    fn join(a: Self, b: Self) -> Option<&'t Tape<V>> {
        match (a.tape, b.tape) {
            (Some(t), Some(u)) => {
                assert!(std::ptr::eq(t, u), "variables from different tapes");
                Some(t)
            }
            (Some(t), None) | (None, Some(t)) => Some(t),
            (None, None) => None,
        }
    }

    fn unary(self, val: V, d: V) -> Self {
        match self.tape {
            Some(t) => Var { val, idx: t.push(self.idx, d, NO_PARENT, V::zero()), tape: Some(t) },
            None => Var::constant(val),
        }
    }
}

impl<'t, V: Scalar> Add for Var<'t, V> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        if self.is_const_zero() {
            return o;
        }
        if o.is_const_zero() {
            return self;
        }
        let val = self.val + o.val;
        match Self::join(self, o) {
            Some(t) => Var { val, idx: t.push(self.idx, V::one(), o.idx, V::one()), tape: Some(t) },
            None => Var::constant(val),
        }
    }
}

impl<'t, V: Scalar> Sub for Var<'t, V> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        if o.is_const_zero() {
            return self;
        }
        if self.is_const_zero() {
            return -o;
        }
        let val = self.val - o.val;
        match Self::join(self, o) {
            Some(t) => {
                Var { val, idx: t.push(self.idx, V::one(), o.idx, -V::one()), tape: Some(t) }
            }
            None => Var::constant(val),
        }
    }
}

impl<'t, V: Scalar> Mul for Var<'t, V> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        // Structural zeros and ones never contribute derivative information,
        // so the node can be elided. This is what makes e.g. a zero inner
        // step size collapse the whole inner branch of a meta-gradient.
        if self.is_const_zero() || o.is_const_zero() {
            return Var::constant(V::zero());
        }
        if self.is_const_one() {
            return o;
        }
        if o.is_const_one() {
            return self;
        }
        let val = self.val * o.val;
        match Self::join(self, o) {
            Some(t) => Var { val, idx: t.push(self.idx, o.val, o.idx, self.val), tape: Some(t) },
            None => Var::constant(val),
        }
    }
}

impl<'t, V: Scalar> Neg for Var<'t, V> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -V::one())
    }
}

impl<'t, V: Scalar> Scalar for Var<'t, V> {
    fn from_f64(v: f64) -> Self {
        Var::constant(V::from_f64(v))
    }
    fn value(self) -> f64 {
        self.val.value()
    }
    fn sigmoid(self) -> Self {
        let s = self.val.sigmoid();
        self.unary(s, s * (V::one() - s))
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, V::one() - t * t)
    }
    fn is_const_zero(self) -> bool {
        self.tape.is_none() && self.val.is_const_zero()
    }
    fn is_const_one(self) -> bool {
        self.tape.is_none() && self.val.is_const_one()
    }
}

// ─── Differentiable programs ────────────────────────────────────────────────

/// A vector-valued map `u(x; params)` written against generic scalars.
pub trait VectorProgram {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn param_len(&self) -> usize;
    fn eval<S: Scalar>(&self, params: &[S], x: &[S]) -> Vec<S>;
}

/// A scalar loss `J(params)` written against generic scalars. Data the loss
/// closes over (sample points, function values) enters as constants.
pub trait ScalarProgram {
    fn param_len(&self) -> usize;
    fn eval<S: Scalar>(&self, params: &[S]) -> S;
}

fn check_finite_slice(v: &[f64], context: &'static str) -> Result<(), AdError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AdError::NonFinite { context })
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), AdError> {
    if expected == got {
        Ok(())
    } else {
        Err(AdError::DimensionMismatch { what, expected, got })
    }
}

/// Jacobian `∂u/∂x` of a vector program at `(params, x)`, one forward-mode
/// pass per input coordinate. Row `i`, column `j` holds `∂u_i/∂x_j`.
pub fn grad_inputs<P: VectorProgram>(
    prog: &P,
    params: &[f64],
    x: &[f64],
) -> Result<Vec<Vec<f64>>, AdError> {
    check_len("params", prog.param_len(), params.len())?;
    check_len("x", prog.input_dim(), x.len())?;
    check_finite_slice(params, "grad_inputs params")?;
    check_finite_slice(x, "grad_inputs x")?;
    let lifted: Vec<Dual<f64>> = params.iter().map(|&p| Dual::constant(p)).collect();
    let mut jac = vec![vec![0.0; x.len()]; prog.output_dim()];
    for j in 0..x.len() {
        let xs: Vec<Dual<f64>> = x
            .iter()
            .enumerate()
            .map(|(k, &v)| if k == j { Dual::seeded(v) } else { Dual::constant(v) })
            .collect();
        let out = prog.eval(&lifted, &xs);
        debug_assert_eq!(out.len(), prog.output_dim());
        for (i, o) in out.iter().enumerate() {
            jac[i][j] = o.du;
        }
    }
    for row in &jac {
        check_finite_slice(row, "grad_inputs jacobian")?;
    }
    Ok(jac)
}

/// Divergence `∇·u` (trace of the input Jacobian) for square programs.
pub fn divergence<P: VectorProgram>(prog: &P, params: &[f64], x: &[f64]) -> Result<f64, AdError> {
    check_len("divergence output", prog.input_dim(), prog.output_dim())?;
    let jac = grad_inputs(prog, params, x)?;
    Ok((0..x.len()).map(|j| jac[j][j]).sum())
}

/// Loss value and gradient with respect to parameters, by one reverse sweep.
pub fn value_and_grad<L: ScalarProgram>(loss: &L, gamma: &[f64]) -> Result<(f64, Vec<f64>), AdError> {
    check_len("gamma", loss.param_len(), gamma.len())?;
    check_finite_slice(gamma, "gradient inputs")?;
    // Rough pre-size: a few recorded ops per parameter is typical for the
    // losses in this crate; the tape grows as needed either way.
    let tape = Tape::with_capacity(8 * gamma.len());
    let vars: Vec<Var<'_, f64>> = gamma.iter().map(|&g| tape.var(g)).collect();
    let out = loss.eval(&vars);
    if !out.value().is_finite() {
        return Err(AdError::NonFinite { context: "loss value" });
    }
    let g = tape.grad(out, &vars);
    check_finite_slice(&g, "loss gradient")?;
    Ok((out.value(), g))
}

/// Gradient of a scalar loss with respect to its parameters.
pub fn grad_params<L: ScalarProgram>(loss: &L, gamma: &[f64]) -> Result<Vec<f64>, AdError> {
    value_and_grad(loss, gamma).map(|(_, g)| g)
}

/// Exact meta-gradient of `outer` evaluated at the result of `steps` plain
/// gradient-descent updates on `inner`, differentiated through the updates:
///
/// `γ_{j+1} = γ_j − α ∇inner(γ_j)`, returns `∇_γ0 outer(γ_steps)`.
///
/// The inner gradients are computed on nested tapes whose arithmetic is
/// recorded on the outer tape, so all second-order terms are kept. Memory
/// grows with `steps` (the loop is unrolled). Only plain gradient descent is
/// supported here; stateful inner optimizers have no exact mode.
pub fn meta_grad_exact<LI, LO>(
    inner: &LI,
    outer: &LO,
    gamma: &[f64],
    alpha: f64,
    steps: usize,
) -> Result<Vec<f64>, AdError>
where
    LI: ScalarProgram,
    LO: ScalarProgram,
{
    meta_value_and_grad_exact(inner, outer, gamma, alpha, steps).map(|(_, g)| g)
}

/// [`meta_grad_exact`] returning the outer loss value at the adapted
/// parameters alongside the meta-gradient.
pub fn meta_value_and_grad_exact<LI, LO>(
    inner: &LI,
    outer: &LO,
    gamma: &[f64],
    alpha: f64,
    steps: usize,
) -> Result<(f64, Vec<f64>), AdError>
where
    LI: ScalarProgram,
    LO: ScalarProgram,
{
    check_len("gamma", inner.param_len(), gamma.len())?;
    check_len("gamma", outer.param_len(), gamma.len())?;
    check_finite_slice(gamma, "meta-gradient inputs")?;
    if !alpha.is_finite() {
        return Err(AdError::NonFinite { context: "inner step size" });
    }
    let otape = Tape::<f64>::new();
    let leaves: Vec<Var<'_, f64>> = gamma.iter().map(|&g| otape.var(g)).collect();
    let alpha_c = Var::from_f64(alpha);
    let mut cur = leaves.clone();
    for _ in 0..steps {
        let itape = Tape::<Var<'_, f64>>::new();
        let ivars: Vec<Var<'_, Var<'_, f64>>> = cur.iter().map(|&w| itape.var(w)).collect();
        let iout = inner.eval(&ivars);
        if !iout.value().is_finite() {
            return Err(AdError::NonFinite { context: "inner loss value" });
        }
        let ig = itape.grad(iout, &ivars);
        cur = cur.iter().zip(&ig).map(|(&w, &g)| w - alpha_c * g).collect();
    }
    let oout = outer.eval(&cur);
    if !oout.value().is_finite() {
        return Err(AdError::NonFinite { context: "outer loss value" });
    }
    let g = otape.grad(oout, &leaves);
    check_finite_slice(&g, "meta-gradient")?;
    Ok((oout.value(), g))
}

/// First-order approximation of [`meta_grad_exact`]: run the inner updates
/// without recording them, then take the plain gradient of `outer` at the
/// adapted parameters. Differs from the exact meta-gradient by terms
/// proportional to `alpha`.
pub fn meta_grad_first_order<LI, LO>(
    inner: &LI,
    outer: &LO,
    gamma: &[f64],
    alpha: f64,
    steps: usize,
) -> Result<Vec<f64>, AdError>
where
    LI: ScalarProgram,
    LO: ScalarProgram,
{
    check_len("gamma", inner.param_len(), gamma.len())?;
    check_len("gamma", outer.param_len(), gamma.len())?;
    let mut cur = gamma.to_vec();
    for _ in 0..steps {
        let g = grad_params(inner, &cur)?;
        for (c, gi) in cur.iter_mut().zip(&g) {
            *c -= alpha * gi;
        }
    }
    grad_params(outer, &cur)
}

/// Central finite differences: the independent oracle the tape and dual
/// implementations are checked against. Evaluates `f` through the plain
/// `f64` path only.
pub fn finite_diff_grad<F: Fn(&[f64]) -> f64>(f: F, point: &[f64], step: f64) -> Vec<f64> {
    let mut g = vec![0.0; point.len()];
    let mut work = point.to_vec();
    for i in 0..point.len() {
        let orig = work[i];
        work[i] = orig + step;
        let hi = f(&work);
        work[i] = orig - step;
        let lo = f(&work);
        work[i] = orig;
        g[i] = (hi - lo) / (2.0 * step);
    }
    g
}
