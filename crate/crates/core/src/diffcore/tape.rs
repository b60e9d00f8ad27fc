//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is the computation record: every primitive evaluates eagerly and
//! appends a node that references earlier nodes only, so the node list is
//! topologically ordered by construction. [`Tape::gradient`] replays it
//! backwards from a scalar output.

use ndarray::{Array2, Axis, Zip};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Slope of LeakyReLU on negative inputs.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative from the input `x` and output `y`. The kink at 0 takes the
    /// negative-side slope.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Below this row norm the sphere projection refuses to divide.
pub const SPHERE_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    RowSqNorm(Var),
    Sum(Var),
    Mean(Var),
    /// Row norms of the input are kept for the backward pass.
    SphereProject(Var, Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Act(..) => "activation",
            Op::RowSqNorm(..) => "row_sq_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SphereProject(..) => "sphere_project",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

/// Computation record for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient can be requested.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn push(&mut self, op: Op, value: Array2<f64>, inputs: &[Var]) -> Result<Var> {
        let index = self.nodes.len();
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                location: format!("node {index} ({})", op.name()),
                detail: format!("produced non-finite value {bad}"),
            });
        }
        let tracked = self.tracked(inputs);
        self.nodes.push(Node {
            op,
            value: Tensor::from_array(value),
            tracked,
        });
        Ok(Var(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [k2, n]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::config(format!(
                "matmul: [{m}, {k}] x [{k2}, {n}] is not defined"
            )));
        }
        let out = self.value(a).array().dot(self.value(b).array());
        self.push(Op::MatMul(a, b), out, &[a, b])
    }

    fn check_broadcast(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let ([ar, ac], [br, bc]) = (self.shape(a), self.shape(b));
        let ok = (br == ar || br == 1) && (bc == ac || bc == 1);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "{op}: shape [{br}, {bc}] does not broadcast to [{ar}, {ac}]"
            )))
        }
    }

    /// `a + b`; `b` may broadcast along rows and/or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let out = self.value(a).array() + self.value(b).array();
        self.push(Op::Add(a, b), out, &[a, b])
    }

    /// `a - b`; `b` may broadcast.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("sub", a, b)?;
        let out = self.value(a).array() - self.value(b).array();
        self.push(Op::Sub(a, b), out, &[a, b])
    }

    /// Elementwise `a * b`; `b` may broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let out = self.value(a).array() * self.value(b).array();
        self.push(Op::Mul(a, b), out, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).array() * factor;
        self.push(Op::Scale(a, factor), out, &[a])
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        let out = self.value(a).array().mapv(|x| act.apply(x));
        self.push(Op::Act(a, act), out, &[a])
    }

    /// Squared Euclidean norm of every row, as an `n x 1` column.
    pub fn row_sq_norm(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .array()
            .map_axis(Axis(1), |r| r.dot(&r))
            .insert_axis(Axis(1));
        self.push(Op::RowSqNorm(a), out, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Array2::from_elem((1, 1), self.value(a).array().sum());
        self.push(Op::Sum(a), out, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Array2::from_elem((1, 1), t.array().sum() / t.len() as f64);
        self.push(Op::Mean(a), out, &[a])
    }

    /// Divides every row by its Euclidean norm.
    pub fn sphere_project(&mut self, a: Var) -> Result<Var> {
        let norms = self.value(a).row_norms();
        if let Some((row, n)) = norms.iter().enumerate().find(|(_, n)| **n < SPHERE_EPS) {
            return Err(Error::DegenerateInput(format!(
                "sphere projection of row {row} with norm {n:e} (node {})",
                self.nodes.len()
            )));
        }
        let mut out = self.value(a).array().clone();
        for (mut r, n) in out.rows_mut().into_iter().zip(&norms) {
            r /= *n;
        }
        self.push(Op::SphereProject(a, norms), out, &[a])
    }

    /// Reverse-mode gradients of the scalar `output` with respect to `wrt`.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        if self.shape(output) != [1, 1] {
            return Err(Error::Contract(format!(
                "gradient requires a scalar output, node {} has shape {:?}",
                output.0,
                self.shape(output)
            )));
        }
        for w in wrt {
            if !matches!(self.nodes[w.0].op, Op::Leaf) || !self.nodes[w.0].tracked {
                return Err(Error::Contract(format!("node {} is not a tracked leaf", w.0)));
            }
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].tracked {
                        let ga = g.dot(&self.value(*b).array().t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.nodes[b.0].tracked {
                        let gb = self.value(*a).array().t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if self.nodes[b.0].tracked {
                        let gb = reduce_to(&g, self.shape(*b)) * sign;
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.nodes[a.0].tracked {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).array(), self.value(*b).array());
                    if self.nodes[b.0].tracked {
                        let gb = reduce_to(&(&g * va), self.shape(*b));
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.nodes[a.0].tracked {
                        accumulate(&mut grads, *a, &g * vb);
                    }
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g * *f),
                Op::Act(a, act) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a).array())
                        .and(node.value.array())
                        .for_each(|g, &x, &y| *g *= act.derivative(x, y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSqNorm(a) => {
                    let ga = self.value(*a).array() * &g * 2.0;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let [r, c] = self.shape(*a);
                    accumulate(&mut grads, *a, Array2::from_elem((r, c), g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let [r, c] = self.shape(*a);
                    let v = g[[0, 0]] / (r * c) as f64;
                    accumulate(&mut grads, *a, Array2::from_elem((r, c), v));
                }
                Op::SphereProject(a, norms) => {
                    // d(x/|x|) = (g - y (y.g)) / |x|
                    let y = node.value.array();
                    let mut ga = g;
                    for ((mut gr, yr), n) in ga.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        let proj = yr.dot(&gr);
                        Zip::from(&mut gr).and(&yr).for_each(|g, &y| *g = (*g - y * proj) / n);
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.0) {
                Some(Some(g)) => Tensor::from_array(g.clone()),
                _ => {
                    let [r, c] = self.shape(*w);
                    Tensor::zeros(r, c)
                }
            })
            .collect())
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to(g: &Array2<f64>, shape: [usize; 2]) -> Array2<f64> {
    let mut out = g.clone();
    if shape[0] == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape[1] == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_value_and_derivative() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 9.0);
        let g = tape.gradient(y, &[x]).unwrap();
        assert_eq!(g[0].item().unwrap(), 6.0);
    }

    #[test]
    fn relu_forward_and_flat_negative_side() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row_vector(&[-1.0, 2.0]));
        let y = tape.activation(x, Activation::Relu).unwrap();
        assert_eq!(tape.value(y).values(), &[0.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(-1.0));
        let y = tape.activation(x, Activation::Relu).unwrap();
        assert_eq!(tape.gradient(y, &[x]).unwrap()[0].item().unwrap(), 0.0);

        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(0.0));
        let y = tape.activation(x, Activation::Relu).unwrap();
        assert_eq!(tape.gradient(y, &[x]).unwrap()[0].item().unwrap(), 0.0);
    }

    #[test]
    fn squared_norm_of_three_four() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row_vector(&[3.0, 4.0]));
        let y = tape.row_sq_norm(x).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 25.0);
        let g = tape.gradient(y, &[x]).unwrap();
        assert_eq!(g[0].values(), &[6.0, 8.0]);
    }

    #[test]
    fn non_scalar_output_is_a_contract_violation() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row_vector(&[1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.gradient(y, &[x]), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_leaf_gradient_is_refused() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1.0));
        let x = tape.input(Tensor::scalar(2.0));
        let y = tape.mul(x, c).unwrap();
        assert!(matches!(tape.gradient(y, &[c]), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(2, 3));
        let b = tape.input(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(Error::Config(_))));
        let c = tape.input(Tensor::zeros(3, 2));
        assert!(matches!(tape.add(a, c), Err(Error::Config(_))));
    }

    #[test]
    fn overflow_reports_node() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::scalar(1e300));
        let err = tape.scale(a, 1e300).unwrap_err();
        match err {
            Error::Numeric { location, .. } => assert!(location.contains("node 1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sphere_projection_rejects_origin() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::row_vector(&[0.0, 0.0]));
        assert!(matches!(tape.sphere_project(a), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(3, 2, vec![1.0; 6]).unwrap());
        let b = tape.input(Tensor::row_vector(&[0.5, -0.5]));
        let y = tape.add(x, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.gradient(s, &[x, b]).unwrap();
        assert_eq!(g[1].values(), &[3.0, 3.0]);
        assert_eq!(g[0].values(), &[1.0; 6]);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::row_vector(&[0.3, -1.7, 2.2]));
            let w = tape.constant(Tensor::new(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap());
            let h = tape.matmul(x, w).unwrap();
            let h = tape.activation(h, Activation::Tanh).unwrap();
            let n = tape.row_sq_norm(h).unwrap();
            tape.value(n).clone()
        };
        assert_eq!(run(), run());
    }
}
