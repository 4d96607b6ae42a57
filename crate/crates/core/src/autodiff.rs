//! Define-by-run reverse-mode differentiation over the tensor op set.
//!
//! Every op called on a [`Tape`] evaluates eagerly, appends a node holding
//! its output, and returns a [`Var`] handle. Nodes are appended in
//! execution order, so the tape is topologically sorted by construction
//! and [`Tape::backward`] is a single reverse sweep.

use std::collections::HashMap;

use crate::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::resize::{bicubic_resize, bicubic_resize_backward};
use crate::tensor::{self, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    Relu(Var),
    Scale {
        input: Var,
        lambda: Var,
    },
    Add(Var, Var),
    Concat(Var, Var),
    Resize(Var),
    Sum(Var),
    L2Loss {
        pred: Var,
        target: Tensor<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    output: Option<Var>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            output: None,
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// The node recorded as the graph output by [`forward`], if any.
    pub fn output(&self) -> Option<Var> {
        self.output
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        value.check_finite("input")?;
        Ok(self.push(Op::Input, value))
    }

    /// Leaf for parameter `name`; repeated lookups return the same node.
    pub fn param(&mut self, params: &Params<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = params.require(name)?.clone();
        value.check_finite("param")?;
        let v = self.push(Op::Param, value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let out = conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        Ok(self.push(
            Op::Conv {
                input,
                weight,
                bias,
                spec: *spec,
            },
            out,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = tensor::relu(self.value(input))?;
        Ok(self.push(Op::Relu(input), out))
    }

    /// Multiplies `input` by the 1-element tensor `lambda`.
    pub fn scale(&mut self, input: Var, lambda: Var) -> Result<Var> {
        let lv = self.value(lambda);
        if lv.numel() != 1 {
            return Err(Error::Shape {
                op: "scale",
                axis: "lambda elements",
                expected: 1,
                got: lv.numel(),
            });
        }
        let out = tensor::scale(self.value(input), lv.data()[0].to_f64())?;
        Ok(self.push(Op::Scale { input, lambda }, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat(a, b), out))
    }

    pub fn bicubic_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = bicubic_resize(self.value(input), out_h, out_w)?;
        Ok(self.push(Op::Resize(input), out))
    }

    /// Sum of all elements as a 1×1×1×1 tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum_f64();
        Ok(self.push(Op::Sum(input), Tensor::scalar(T::from_f64(s))))
    }

    /// `1/(2N) * sum((pred - target)^2)` with N the batch size.
    pub fn l2_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let loss = crate::train::l2_density_loss(self.value(pred), target)?;
        Ok(self.push(
            Op::L2Loss {
                pred,
                target: target.clone(),
            },
            Tensor::scalar(T::from_f64(loss)),
        ))
    }

    /// Positivity of every ReLU input, in tape order. Two evaluations of the
    /// same graph share an activation pattern iff these are equal.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu(_)))
            .flat_map(|n| n.value.data().iter().map(|&v| v > T::ZERO))
            .collect()
    }

    /// Backward sweep from the recorded output.
    pub fn backward(&self, seed: &Tensor<T>) -> Result<Gradients<T>> {
        let out = self
            .output
            .ok_or_else(|| Error::arg("tape has no recorded output"))?;
        self.backward_from(out, seed)
    }

    /// Propagates `seed` (d loss / d `output`) to every node reachable from `output`.
    pub fn backward_from(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        tensor::same_dims("backward seed", self.value(output).dims(), seed.dims())?;
        seed.check_finite("backward")?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());

        fn accum<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
            *slot = Some(match slot.take() {
                None => g,
                Some(prev) => tensor::add(&prev, &g)?,
            });
            Ok(())
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::Conv {
                    input,
                    weight,
                    bias,
                    spec,
                } => {
                    let cg = conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        bias.map(|b| self.value(b)),
                        spec,
                        &g,
                    )?;
                    accum(&mut grads[input.0], cg.input)?;
                    accum(&mut grads[weight.0], cg.weights)?;
                    if let (Some(b), Some(gb)) = (bias, cg.bias) {
                        accum(&mut grads[b.0], gb)?;
                    }
                }
                Op::Relu(input) => {
                    let x = self.value(*input);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > T::ZERO { gv } else { T::ZERO })
                        .collect();
                    accum(&mut grads[input.0], Tensor::new(g.dims(), data)?)?;
                }
                Op::Scale { input, lambda } => {
                    let lv = self.value(*lambda).data()[0].to_f64();
                    let x = self.value(*input);
                    let dl = g.dot(x);
                    accum(&mut grads[input.0], tensor::scale(&g, lv)?)?;
                    accum(&mut grads[lambda.0], Tensor::new(self.value(*lambda).dims(), vec![T::from_f64(dl)])?)?;
                }
                Op::Add(a, b) => {
                    accum(&mut grads[a.0], g.clone())?;
                    accum(&mut grads[b.0], g)?;
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).c();
                    let cb = self.value(*b).c();
                    accum(&mut grads[a.0], tensor::slice_channels(&g, 0, ca)?)?;
                    accum(&mut grads[b.0], tensor::slice_channels(&g, ca, ca + cb)?)?;
                }
                Op::Resize(input) => {
                    let gin = bicubic_resize_backward(self.value(*input).dims(), &g)?;
                    accum(&mut grads[input.0], gin)?;
                }
                Op::Sum(input) => {
                    let dims = self.value(*input).dims();
                    accum(&mut grads[input.0], Tensor::full(dims, g.data()[0]))?;
                }
                Op::L2Loss { pred, target } => {
                    let p = self.value(*pred);
                    let n = p.n().max(1) as f64;
                    let g0 = g.data()[0].to_f64();
                    let data = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&a, &b)| T::from_f64(g0 * (a.to_f64() - b.to_f64()) / n))
                        .collect();
                    accum(&mut grads[pred.0], Tensor::new(p.dims(), data)?)?;
                }
            }
        }

        let mut params = HashMap::new();
        for (name, v) in &self.params {
            let g = match grads.get_mut(v.0).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros(self.value(*v).dims()),
            };
            params.insert(name.clone(), g);
        }
        let mut inputs = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if matches!(node.op, Op::Input) {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.dims()));
                inputs.insert(Var(i), g);
            }
        }
        Ok(Gradients { params, inputs })
    }
}

/// Gradients of a scalar (or seeded) output with respect to parameters and inputs.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar = f32> {
    params: HashMap<String, Tensor<T>>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.params.insert(name.into(), grad);
    }

    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Adds `other` into `self`, parameter by parameter. Used to reduce
    /// per-item tapes in a fixed order.
    pub fn merge(&mut self, other: &Gradients<T>) -> Result<()> {
        for (name, g) in &other.params {
            match self.params.get_mut(name) {
                Some(mine) => *mine = tensor::add(mine, g)?,
                None => {
                    self.params.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale_all(&mut self, factor: f64) -> Result<()> {
        for g in self.params.values_mut() {
            *g = tensor::scale(g, factor)?;
        }
        Ok(())
    }
}

/// A computation that can be replayed onto a tape.
pub trait Graph<T: Scalar> {
    fn build(&self, tape: &mut Tape<T>, params: &Params<T>, inputs: &[Var]) -> Result<Var>;
}

impl<T, F> Graph<T> for F
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &Params<T>, &[Var]) -> Result<Var>,
{
    fn build(&self, tape: &mut Tape<T>, params: &Params<T>, inputs: &[Var]) -> Result<Var> {
        self(tape, params, inputs)
    }
}

/// Runs `graph` on `inputs`, returning its output and the recorded tape.
pub fn forward<T: Scalar, G: Graph<T> + ?Sized>(
    graph: &G,
    params: &Params<T>,
    inputs: &[Tensor<T>],
) -> Result<(Tensor<T>, Tape<T>)> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = graph.build(&mut tape, params, &vars)?;
    tape.output = Some(out);
    Ok((tape.value(out).clone(), tape))
}

/// Backward pass from the tape's recorded output.
pub fn backward<T: Scalar>(tape: &Tape<T>, seed: &Tensor<T>) -> Result<Gradients<T>> {
    tape.backward(seed)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step, relative to `max(|θ|, 1)`.
    pub step: f64,
    /// Pass threshold on the max relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// How many times the step may shrink by 10× when a perturbation flips
    /// a ReLU before the element is reported as sitting on a kink.
    pub refinements: u32,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            floor: 1e-6,
            refinements: 3,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Flat indices whose perturbation crossed a ReLU kink at every step tried.
    pub kinks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// Parameter with the largest relative error.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.kinks.is_empty())
    }
}

fn summed<G: Graph<f64> + ?Sized>(graph: &G, params: &Params<f64>, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)> {
    let (_, mut tape) = forward(graph, params, inputs)?;
    let out = tape.output.expect("forward records output");
    let s = tape.sum(out)?;
    Ok((tape.value(s).data()[0], tape.relu_pattern()))
}

/// Compares backprop against central finite differences of `sum(graph(inputs))`
/// for every element of every parameter, in f64.
///
/// The op set is piecewise linear in each single parameter, so the central
/// difference is exact whenever the perturbation leaves every ReLU on the same
/// side. Perturbations that flip an activation are retried with a smaller
/// step; an element that flips at every step is recorded as a kink, given
/// infinite error, and fails the check.
pub fn grad_check<G: Graph<f64> + ?Sized>(
    graph: &G,
    params: &Params<f64>,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (out, tape) = forward(graph, params, inputs)?;
    let grads = tape.backward(&Tensor::full(out.dims(), 1.0))?;
    let base_pattern = tape.relu_pattern();

    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (name, value) in params.iter() {
        let analytic = grads
            .param(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.dims()));
        let mut check = ParamCheck {
            name: name.to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            kinks: Vec::new(),
        };
        for i in 0..value.numel() {
            let theta = value.data()[i];
            let mut h = opts.step * theta.abs().max(1.0);
            let mut estimate = None;
            for _ in 0..=opts.refinements {
                work.get_mut(name).expect("cloned").data_mut()[i] = theta + h;
                let (fp, pp) = summed(graph, &work, inputs)?;
                work.get_mut(name).expect("cloned").data_mut()[i] = theta - h;
                let (fm, pm) = summed(graph, &work, inputs)?;
                work.get_mut(name).expect("cloned").data_mut()[i] = theta;
                if pp == base_pattern && pm == base_pattern {
                    estimate = Some((fp - fm) / (2.0 * h));
                    break;
                }
                h /= 10.0;
            }
            let err = match estimate {
                Some(fd) if !fd.is_finite() => {
                    return Err(Error::Numeric {
                        param: name.to_string(),
                        reason: format!("finite-difference estimate at element {i} is {fd}"),
                    })
                }
                Some(fd) => {
                    let a = analytic.data()[i];
                    (a - fd).abs() / a.abs().max(fd.abs()).max(opts.floor)
                }
                None => {
                    check.kinks.push(i);
                    f64::INFINITY
                }
            };
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
            }
        }
        report.push(check);
    }
    let passed = report
        .iter()
        .all(|p| p.max_rel_error < opts.tolerance && p.kinks.is_empty());
    Ok(GradCheckReport {
        params: report,
        step: opts.step,
        tolerance: opts.tolerance,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn relu_sum_gradient() {
        let graph = |tape: &mut Tape<f64>, _: &Params<f64>, x: &[Var]| -> Result<Var> {
            let r = tape.relu(x[0])?;
            tape.sum(r)
        };
        let (_, tape) = forward(&graph, &Params::new(), &[t(&[-1.0, 2.0])]).unwrap();
        let g = tape.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.input(Var(0)).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_is_zero_at_zero() {
        let graph = |tape: &mut Tape<f64>, _: &Params<f64>, x: &[Var]| tape.relu(x[0]);
        let (_, tape) = forward(&graph, &Params::new(), &[t(&[0.0])]).unwrap();
        let g = tape.backward(&t(&[1.0])).unwrap();
        assert_eq!(g.input(Var(0)).unwrap().data(), &[0.0]);
    }

    #[test]
    fn scale_gradients() {
        let mut params = Params::new();
        params.insert("lambda", Tensor::scalar(0.7));
        let graph = |tape: &mut Tape<f64>, p: &Params<f64>, x: &[Var]| -> Result<Var> {
            let l = tape.param(p, "lambda")?;
            let s = tape.scale(x[0], l)?;
            tape.sum(s)
        };
        let x = t(&[1.0, -2.0, 4.5]);
        let (_, tape) = forward(&graph, &params, std::slice::from_ref(&x)).unwrap();
        let g = tape.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.input(Var(0)).unwrap().data(), &[0.7, 0.7, 0.7]);
        assert!((g.param("lambda").unwrap().data()[0] - x.sum_f64()).abs() < 1e-15);
    }

    #[test]
    fn seed_shape_checked() {
        let graph = |tape: &mut Tape<f64>, _: &Params<f64>, x: &[Var]| tape.relu(x[0]);
        let (_, tape) = forward(&graph, &Params::new(), &[t(&[1.0, 2.0])]).unwrap();
        assert!(matches!(tape.backward(&t(&[1.0])), Err(Error::Shape { .. })));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut params = Params::new();
        params.insert("used", Tensor::scalar(2.0));
        params.insert("unused", Tensor::full([1, 1, 2, 2], 3.0));
        let graph = |tape: &mut Tape<f64>, p: &Params<f64>, x: &[Var]| -> Result<Var> {
            let _ = tape.param(p, "unused")?;
            let l = tape.param(p, "used")?;
            tape.scale(x[0], l)
        };
        let (out, tape) = forward(&graph, &params, &[t(&[1.0])]).unwrap();
        let g = tape.backward(&Tensor::full(out.dims(), 1.0)).unwrap();
        let unused = g.param("unused").unwrap();
        assert_eq!(unused.dims(), [1, 1, 2, 2]);
        assert!(unused.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut params = Params::new();
        params.insert("w.weight", Tensor::full([2, 1, 3, 3], 0.3));
        params.insert("w.bias", Tensor::full([2, 1, 1, 1], 0.1));
        let spec = ConvSpec::same(1, 2, 3, 1);
        let graph = move |tape: &mut Tape<f64>, p: &Params<f64>, x: &[Var]| -> Result<Var> {
            let w = tape.param(p, "w.weight")?;
            let b = tape.param(p, "w.bias")?;
            let c = tape.conv2d(x[0], w, Some(b), &spec)?;
            tape.relu(c)
        };
        let x = Tensor::from_fn([1, 1, 4, 4], |[_, _, h, w]| (h as f64) - (w as f64) * 0.5);
        let (out, tape) = forward(&graph, &params, &[x]).unwrap();
        let g = tape.backward(&Tensor::zeros(out.dims())).unwrap();
        for name in ["w.weight", "w.bias"] {
            assert!(g.param(name).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_graph_grad_check_is_exact() {
        let mut params = Params::new();
        params.insert("c.weight", Tensor::new([2, 3, 1, 1], vec![0.3, -0.2, 0.5, 1.1, 0.4, -0.9]).unwrap());
        params.insert("c.bias", Tensor::new([2, 1, 1, 1], vec![0.05, -0.1]).unwrap());
        let spec = ConvSpec::same(3, 2, 1, 1);
        let graph = move |tape: &mut Tape<f64>, p: &Params<f64>, x: &[Var]| -> Result<Var> {
            let w = tape.param(p, "c.weight")?;
            let b = tape.param(p, "c.bias")?;
            tape.conv2d(x[0], w, Some(b), &spec)
        };
        let x = Tensor::from_fn([1, 3, 3, 3], |[_, c, h, w]| (c as f64 + 1.0) * 0.3 - h as f64 * 0.2 + w as f64 * 0.1);
        let report = grad_check(&graph, &params, &[x], GradCheckOptions::with_tolerance(1e-9)).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error() < 1e-9);
    }

    #[test]
    fn kink_is_flagged_not_passed() {
        // Bias exactly cancels the only input, so the ReLU sits at 0.
        let mut params = Params::new();
        params.insert("c.weight", Tensor::full([1, 1, 1, 1], 1.0));
        params.insert("c.bias", Tensor::full([1, 1, 1, 1], -2.0));
        let spec = ConvSpec::same(1, 1, 1, 1);
        let graph = move |tape: &mut Tape<f64>, p: &Params<f64>, x: &[Var]| -> Result<Var> {
            let w = tape.param(p, "c.weight")?;
            let b = tape.param(p, "c.bias")?;
            let c = tape.conv2d(x[0], w, Some(b), &spec)?;
            tape.relu(c)
        };
        let x = Tensor::full([1, 1, 1, 1], 2.0);
        let report = grad_check(&graph, &params, &[x], GradCheckOptions::default()).unwrap();
        assert!(!report.passed);
        let flagged: Vec<_> = report.flagged().map(|p| p.name.as_str()).collect();
        assert_eq!(flagged, ["c.weight", "c.bias"]);
    }
}
