//! Scalar reverse-mode differentiation on a dynamically built tape.
//!
//! Every differentiable quantity in this crate is a node on a [`Tape`]:
//! a flat arena of scalar operations recorded in creation order. Creation
//! order is a topological order (parents always precede children), so the
//! backward pass is a single reverse sweep with a fixed accumulation
//! order, making gradients bit-reproducible for a given seed.
//!
//! [`finite_diff_gradient`] is the independent oracle used by the gradient
//! test suites. It never appears in any training path.

use thiserror::Error;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error)]
pub enum AutodiffError {
    /// A non-finite value or partial showed up while accumulating adjoints.
    #[error("non-finite value during backward accumulation at node {node}")]
    NonFinite { node: u32 },
    /// The objective evaluated to a non-finite value during finite differencing.
    #[error("non-finite objective value in finite-difference probe at coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum OpKind {
    Leaf,
    Add,
    Mul,
    Neg,
    Exp,
    Ln,
    LogSigmoid,
    Tanh,
    Sum,
    Select,
    StopGrad,
}

const NOT_A_PARAM: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
struct Node {
    kind: OpKind,
    /// Leaf: parameter index (or `NOT_A_PARAM`). Select: chosen edge offset.
    aux: u32,
    value: f64,
    edge_start: u32,
    edge_count: u32,
}

/// Dense map from parameter index to partial derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap(Vec<f64>);

impl GradientMap {
    pub fn zeros(len: usize) -> Self {
        GradientMap(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        GradientMap(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, param: usize) -> f64 {
        self.0[param]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }

    pub fn scale(&self, factor: f64) -> GradientMap {
        GradientMap(self.0.iter().map(|g| g * factor).collect())
    }

    /// Coordinate-wise sum with another map of the same length.
    pub fn add(&self, other: &GradientMap) -> GradientMap {
        assert_eq!(self.len(), other.len(), "gradient length mismatch");
        GradientMap(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &GradientMap) -> f64 {
        assert_eq!(self.len(), other.len(), "gradient length mismatch");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Numerically stable `log(sigmoid(x))`, computed as `-softplus(-x)`.
///
/// Monotone increasing, always <= 0, and free of overflow for any finite
/// input: `log_sigmoid(-1000.0)` is `-1000.0`, not `-inf`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Arena of scalar operations with recorded data flow.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    edges: Vec<NodeId>,
    param_count: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.nodes[id.index()].value
    }

    fn push(&mut self, kind: OpKind, aux: u32, value: f64, parents: &[NodeId]) -> NodeId {
        let edge_start = self.edges.len() as u32;
        self.edges.extend_from_slice(parents);
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            kind,
            aux,
            value,
            edge_start,
            edge_count: parents.len() as u32,
        });
        id
    }

    /// Leaf that takes no gradient.
    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(OpKind::Leaf, NOT_A_PARAM, value, &[])
    }

    /// Leaf registered as parameter number `tape.param_count()`.
    pub fn param(&mut self, value: f64) -> NodeId {
        let idx = self.param_count as u32;
        self.param_count += 1;
        self.push(OpKind::Leaf, idx, value, &[])
    }

    /// Registers one parameter leaf per coordinate, in order.
    pub fn bind_params(&mut self, theta: &[f64]) -> Vec<NodeId> {
        theta.iter().map(|&v| self.param(v)).collect()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(OpKind::Add, 0, v, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(OpKind::Mul, 0, v, &[a, b])
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.value(a);
        self.push(OpKind::Neg, 0, v, &[a])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let c = self.constant(factor);
        self.mul(a, c)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).exp();
        self.push(OpKind::Exp, 0, v, &[a])
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).ln();
        self.push(OpKind::Ln, 0, v, &[a])
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = log_sigmoid(self.value(a));
        self.push(OpKind::LogSigmoid, 0, v, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).tanh();
        self.push(OpKind::Tanh, 0, v, &[a])
    }

    /// N-ary sum; the value folds left-to-right so evaluation order is fixed.
    pub fn sum(&mut self, terms: &[NodeId]) -> NodeId {
        let v = terms.iter().fold(0.0, |acc, &t| acc + self.value(t));
        self.push(OpKind::Sum, 0, v, terms)
    }

    /// Passes through `options[choice]`; gradient flows only to the chosen parent.
    pub fn select(&mut self, options: &[NodeId], choice: usize) -> NodeId {
        assert!(choice < options.len(), "select choice out of range");
        let v = self.value(options[choice]);
        self.push(OpKind::Select, choice as u32, v, options)
    }

    /// Value passes, partials are cut.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        self.push(OpKind::StopGrad, 0, v, &[a])
    }

    /// Reverse accumulation from `root` down to every parameter leaf.
    ///
    /// Nodes recorded after `root` cannot be its ancestors and are skipped.
    /// Accumulation visits nodes in strictly decreasing creation order, so
    /// the floating-point result is identical across runs.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap, AutodiffError> {
        let mut adjoint = vec![0.0f64; root.index() + 1];
        adjoint[root.index()] = 1.0;
        let mut grad = vec![0.0f64; self.param_count];

        for idx in (0..=root.index()).rev() {
            let a = adjoint[idx];
            if a == 0.0 {
                continue;
            }
            let node = self.nodes[idx];
            if !a.is_finite() || !node.value.is_finite() {
                return Err(AutodiffError::NonFinite { node: idx as u32 });
            }
            let parents = &self.edges
                [node.edge_start as usize..(node.edge_start + node.edge_count) as usize];
            match node.kind {
                OpKind::Leaf => {
                    if node.aux != NOT_A_PARAM {
                        grad[node.aux as usize] += a;
                    }
                }
                OpKind::Add => {
                    adjoint[parents[0].index()] += a;
                    adjoint[parents[1].index()] += a;
                }
                OpKind::Mul => {
                    let (p0, p1) = (parents[0], parents[1]);
                    adjoint[p0.index()] += a * self.value(p1);
                    adjoint[p1.index()] += a * self.value(p0);
                }
                OpKind::Neg => {
                    adjoint[parents[0].index()] -= a;
                }
                OpKind::Exp => {
                    adjoint[parents[0].index()] += a * node.value;
                }
                OpKind::Ln => {
                    adjoint[parents[0].index()] += a / self.value(parents[0]);
                }
                OpKind::LogSigmoid => {
                    // d/dx log(sigmoid(x)) = sigmoid(-x)
                    adjoint[parents[0].index()] += a * sigmoid(-self.value(parents[0]));
                }
                OpKind::Tanh => {
                    adjoint[parents[0].index()] += a * (1.0 - node.value * node.value);
                }
                OpKind::Sum => {
                    for p in parents {
                        adjoint[p.index()] += a;
                    }
                }
                OpKind::Select => {
                    adjoint[parents[node.aux as usize].index()] += a;
                }
                OpKind::StopGrad => {}
            }
        }

        for (idx, g) in grad.iter().enumerate() {
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite { node: idx as u32 });
            }
        }
        Ok(GradientMap(grad))
    }
}

/// Central-difference gradient oracle: `(f(p + h e_i) - f(p - h e_i)) / 2h`.
///
/// Test-suite oracle only; never called from a training path.
pub fn finite_diff_gradient<F>(
    mut f: F,
    params: &[f64],
    step: f64,
) -> Result<GradientMap, AutodiffError>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let saved = probe[i];
        probe[i] = saved + step;
        let up = f(&probe);
        probe[i] = saved - step;
        let down = f(&probe);
        probe[i] = saved;
        if !up.is_finite() || !down.is_finite() {
            return Err(AutodiffError::NonFiniteProbe { coordinate: i });
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(GradientMap(grad))
}

/// Abstraction over plain `f64` evaluation and tape-recorded evaluation.
///
/// Forward passes (policy scoring, proxy/score construction) are written
/// once against this trait and run either as fast value-only math or as
/// graph construction for [`Tape::backward`].
pub trait Context {
    type V: Copy;

    fn constant(&mut self, x: f64) -> Self::V;
    /// The `index`-th coordinate of the bound parameter vector.
    fn param(&mut self, index: usize) -> Self::V;
    fn value(&self, v: Self::V) -> f64;

    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn neg(&mut self, a: Self::V) -> Self::V;
    fn exp(&mut self, a: Self::V) -> Self::V;
    fn ln(&mut self, a: Self::V) -> Self::V;
    fn tanh(&mut self, a: Self::V) -> Self::V;
    fn log_sigmoid(&mut self, a: Self::V) -> Self::V;
    fn sum(&mut self, terms: &[Self::V]) -> Self::V;
    fn select(&mut self, options: &[Self::V], choice: usize) -> Self::V;
    fn stop_grad(&mut self, a: Self::V) -> Self::V;

    fn scale(&mut self, a: Self::V, factor: f64) -> Self::V {
        let c = self.constant(factor);
        self.mul(a, c)
    }

    /// `log(sum_i exp(z_i))`, shifted by the (constant) running max so the
    /// exponentials cannot overflow. The shift is a plain constant, which
    /// leaves the gradient untouched.
    fn logsumexp(&mut self, zs: &[Self::V]) -> Self::V {
        let m = zs
            .iter()
            .map(|&z| self.value(z))
            .fold(f64::NEG_INFINITY, f64::max);
        let mc = self.constant(m);
        let shifted: Vec<Self::V> = zs
            .iter()
            .map(|&z| {
                let d = self.sub(z, mc);
                self.exp(d)
            })
            .collect();
        let total = self.sum(&shifted);
        let log_total = self.ln(total);
        self.add(log_total, mc)
    }

    /// Minimum by current value; gradient flows through the chosen branch only.
    fn min_by_value(&mut self, a: Self::V, b: Self::V) -> Self::V {
        let choice = if self.value(a) <= self.value(b) { 0 } else { 1 };
        self.select(&[a, b], choice)
    }

    /// Clamp against constant bounds; out-of-range values become constants
    /// with zero gradient, matching the usual clipping semantics.
    fn clamp_const(&mut self, x: Self::V, lo: f64, hi: f64) -> Self::V {
        let v = self.value(x);
        if v < lo {
            self.constant(lo)
        } else if v > hi {
            self.constant(hi)
        } else {
            x
        }
    }
}

/// Value-only evaluation over a borrowed parameter vector.
pub struct Values<'a> {
    theta: &'a [f64],
}

impl<'a> Values<'a> {
    pub fn new(theta: &'a [f64]) -> Self {
        Values { theta }
    }
}

impl Context for Values<'_> {
    type V = f64;

    fn constant(&mut self, x: f64) -> f64 {
        x
    }

    fn param(&mut self, index: usize) -> f64 {
        self.theta[index]
    }

    fn value(&self, v: f64) -> f64 {
        v
    }

    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }

    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a + (-b)
    }

    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }

    fn neg(&mut self, a: f64) -> f64 {
        -a
    }

    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }

    fn ln(&mut self, a: f64) -> f64 {
        a.ln()
    }

    fn tanh(&mut self, a: f64) -> f64 {
        a.tanh()
    }

    fn log_sigmoid(&mut self, a: f64) -> f64 {
        log_sigmoid(a)
    }

    fn sum(&mut self, terms: &[f64]) -> f64 {
        terms.iter().fold(0.0, |acc, t| acc + t)
    }

    fn select(&mut self, options: &[f64], choice: usize) -> f64 {
        options[choice]
    }

    fn stop_grad(&mut self, a: f64) -> f64 {
        a
    }
}

/// Tape-recording evaluation; parameters must be bound up front so all
/// forwards on the tape share the same leaves.
pub struct Trace<'a> {
    pub tape: &'a mut Tape,
    params: &'a [NodeId],
}

impl<'a> Trace<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a [NodeId]) -> Self {
        Trace { tape, params }
    }
}

impl Context for Trace<'_> {
    type V = NodeId;

    fn constant(&mut self, x: f64) -> NodeId {
        self.tape.constant(x)
    }

    fn param(&mut self, index: usize) -> NodeId {
        self.params[index]
    }

    fn value(&self, v: NodeId) -> f64 {
        self.tape.value(v)
    }

    fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.tape.add(a, b)
    }

    fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.tape.sub(a, b)
    }

    fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.tape.mul(a, b)
    }

    fn neg(&mut self, a: NodeId) -> NodeId {
        self.tape.neg(a)
    }

    fn exp(&mut self, a: NodeId) -> NodeId {
        self.tape.exp(a)
    }

    fn ln(&mut self, a: NodeId) -> NodeId {
        self.tape.ln(a)
    }

    fn tanh(&mut self, a: NodeId) -> NodeId {
        self.tape.tanh(a)
    }

    fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        self.tape.log_sigmoid(a)
    }

    fn sum(&mut self, terms: &[NodeId]) -> NodeId {
        self.tape.sum(terms)
    }

    fn select(&mut self, options: &[NodeId], choice: usize) -> NodeId {
        self.tape.select(options, choice)
    }

    fn stop_grad(&mut self, a: NodeId) -> NodeId {
        self.tape.stop_grad(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.param(3.0);
        let y = tape.param(2.0);
        let f = tape.mul(x, y);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(0), 2.0);
        assert_eq!(g.get(1), 3.0);
    }

    #[test]
    fn constant_has_zero_partials() {
        let mut tape = Tape::new();
        let _x = tape.param(1.5);
        let _y = tape.param(-0.5);
        let f = tape.constant(5.0);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn log_sigmoid_chain_rule_at_zero() {
        // d/dx log(sigmoid(x)) at 0 is sigmoid(0) * (1 - sigmoid(0)) / sigmoid(0) = 0.5
        let mut tape = Tape::new();
        let x = tape.param(0.0);
        let f = tape.log_sigmoid(x);
        let g = tape.backward(f).unwrap();
        assert!((g.get(0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_sigmoid_values() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        // asymptote: log_sigmoid(x) -> x as x -> -inf, with no overflow
        assert!((log_sigmoid(-1000.0) + 1000.0).abs() < 1e-9);
        assert!(log_sigmoid(-1000.0).is_finite());
        // softplus(-30) evaluated in extended precision
        assert!((log_sigmoid(30.0) - (-9.357622968839737e-14)).abs() < 1e-27);
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let g = finite_diff_gradient(|p| p[0] * p[0], &[3.0], 1e-4).unwrap();
        assert!((g.get(0) - 6.0).abs() < 1e-7);
    }

    #[test]
    fn finite_diff_on_constant() {
        let g = finite_diff_gradient(|_| 41.0, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn stop_grad_cuts_partials() {
        let mut tape = Tape::new();
        let x = tape.param(2.0);
        let frozen = tape.stop_grad(x);
        let f = tape.mul(x, frozen); // value x^2, gradient x (not 2x)
        assert_eq!(tape.value(f), 4.0);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(0), 2.0);
    }

    #[test]
    fn select_routes_gradient_to_chosen_parent() {
        let mut tape = Tape::new();
        let x = tape.param(1.0);
        let y = tape.param(5.0);
        let s = tape.select(&[x, y], 1);
        assert_eq!(tape.value(s), 5.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_reports_offending_node() {
        // The reverse sweep flags the first non-finite node it consumes,
        // which is the root-most one carrying the bad value.
        let mut tape = Tape::new();
        let x = tape.param(0.0);
        let bad = tape.ln(x); // -inf value
        let f = tape.add(bad, x);
        match tape.backward(f) {
            Err(AutodiffError::NonFinite { node }) => assert_eq!(node as usize, f.index()),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        // with the bad node as root it is named directly
        match tape.backward(bad) {
            Err(AutodiffError::NonFinite { node }) => assert_eq!(node as usize, bad.index()),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn backward_from_interior_root_ignores_later_nodes() {
        let mut tape = Tape::new();
        let x = tape.param(2.0);
        let y = tape.mul(x, x);
        let _later = tape.exp(y);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(0), 4.0);
    }

    #[test]
    fn sum_linearity_is_exact() {
        // Gradient of a sum of two disjoint subgraphs equals the per-subgraph
        // gradients, exactly, because the accumulation order is fixed.
        let mut tape = Tape::new();
        let a = tape.param(0.37);
        let b = tape.param(-1.21);
        let fa = tape.tanh(a);
        let fb = tape.exp(b);
        let total = tape.add(fa, fb);
        let g_total = tape.backward(total).unwrap();
        let g_a = tape.backward(fa).unwrap();
        let g_b = tape.backward(fb).unwrap();
        assert_eq!(g_total.get(0), g_a.get(0));
        assert_eq!(g_total.get(1), g_b.get(1));
    }

    #[test]
    fn trace_and_values_contexts_agree() {
        fn build<C: Context>(ctx: &mut C) -> C::V {
            let x = ctx.param(0);
            let y = ctx.param(1);
            let xy = ctx.mul(x, y);
            let t = ctx.tanh(xy);
            let e = ctx.exp(y);
            let z = ctx.add(t, e);
            let ls = ctx.log_sigmoid(z);
            let lse = ctx.logsumexp(&[x, y, z]);
            ctx.add(ls, lse)
        }
        let theta = [0.4, -0.9];
        let mut values = Values::new(&theta);
        let plain = build(&mut values);

        let mut tape = Tape::new();
        let params = tape.bind_params(&theta);
        let mut trace = Trace::new(&mut tape, &params);
        let traced = build(&mut trace);
        assert_eq!(plain, tape.value(traced));
    }
}
