//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it audits.

use crate::tensor::{Element, Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error used throughout the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backward-pass gradients of the scalar produced by `build` with
/// central differences of step `h` for every element of every input.
pub fn check_gradients<B>(inputs: &[Tensor<f64>], h: f64, build: B) -> Result<GradCheckReport, TensorError>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    check_gradients_in(Graph::new, inputs, h, build)
}

/// [`check_gradients`] with a caller-supplied graph factory, e.g. one with
/// dropout enabled. The factory must be deterministic.
pub fn check_gradients_in<G, B>(make_graph: G, inputs: &[Tensor<f64>], h: f64, build: B) -> Result<GradCheckReport, TensorError>
where
    G: Fn() -> Graph<f64>,
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let analytic = analytic_gradients(&make_graph, inputs, &build)?;
    let numeric = numeric_gradients(&make_graph, inputs, h, &build)?;
    Ok(compare(&analytic, &numeric))
}

/// Gradients from the backward pass at element type `F`.
pub fn analytic_gradients<F, G, B>(make_graph: &G, inputs: &[Tensor<F>], build: &B) -> Result<Vec<Vec<f64>>, TensorError>
where
    F: Element,
    G: Fn() -> Graph<F>,
    B: Fn(&mut Graph<F>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = make_graph();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| g.grad(v).expect("leaf requires grad").iter().map(|x| x.as_f64()).collect())
        .collect())
}

/// Central differences of a 64-bit forward pass.
pub fn numeric_gradients<G, B>(make_graph: &G, inputs: &[Tensor<f64>], h: f64, build: &B) -> Result<Vec<Vec<f64>>, TensorError>
where
    G: Fn() -> Graph<f64>,
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = make_graph();
        let vars = perturbed
            .iter()
            .map(|t| g.leaf(t.clone(), false))
            .collect::<Result<Vec<_>, _>>()?;
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut grads = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let x = input.data()[j];
            work[i].data_mut()[j] = x + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x;
            grads.push((up - down) / (2.0 * h));
        }
        out.push(grads);
    }
    Ok(out)
}

pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&a, &n)) in a.iter().zip(n).enumerate() {
            let err = relative_error(a, n);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    report
}

type Builder<F> = Box<dyn Fn(&mut Graph<F>, &[Var]) -> Result<Var, TensorError>>;

/// One differentiable op wrapped as a scalar function of random inputs.
pub struct OpCase<F> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<F>>,
    pub dropout: bool,
    pub build: Builder<F>,
}

impl<F: Element> OpCase<F> {
    fn graph<E: Element>(&self) -> impl Fn() -> Graph<E> {
        let dropout = self.dropout;
        move || {
            if dropout {
                Graph::new().with_dropout(11, 3)
            } else {
                Graph::new()
            }
        }
    }

    /// Checks this case's backward pass against central differences taken
    /// on `reference`, the same case built at 64-bit. Inputs are this case's
    /// values widened to 64-bit, so both sides see identical points.
    pub fn check_against(&self, reference: &OpCase<f64>, h: f64) -> Result<GradCheckReport, TensorError> {
        let analytic = analytic_gradients(&self.graph::<F>(), &self.inputs, &self.build)?;
        let wide: Vec<Tensor<f64>> = self.inputs.iter().map(Tensor::cast).collect();
        let numeric = numeric_gradients(&reference.graph::<f64>(), &wide, h, &reference.build)?;
        Ok(compare(&analytic, &numeric))
    }
}

impl OpCase<f64> {
    pub fn check(&self, h: f64) -> Result<GradCheckReport, TensorError> {
        self.check_against(self, h)
    }
}

/// Reduces `v` to a scalar through fixed, uneven weights so every output
/// element contributes a distinct amount to the loss.
pub fn weighted_sum<F: Element>(g: &mut Graph<F>, v: Var) -> Result<Var, TensorError> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + 0.5 * (1.3 * i as f64 + 0.7).sin().abs()).collect();
    let w = g.constant(Tensor::from_f64(shape, &w)?)?;
    let p = g.mul(v, w)?;
    g.sum_all(p)
}

struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn tensor<F: Element>(&mut self, shape: &[usize]) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.next()).collect();
        Tensor::from_f64(shape.to_vec(), &data).expect("valid shape")
    }

    /// Values bounded away from zero, for ops with a kink or pole there.
    fn tensor_away_from_zero<F: Element>(&mut self, shape: &[usize]) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let x = self.next();
                x.signum() * (0.1 + x.abs())
            })
            .collect();
        Tensor::from_f64(shape.to_vec(), &data).expect("valid shape")
    }
}

/// Every differentiable op of the tape, each on small random inputs.
pub fn op_cases<F: Element>(seed: u64) -> Vec<OpCase<F>> {
    let mut r = Lcg(seed ^ 0x5eed);
    let mut cases: Vec<OpCase<F>> = Vec::new();
    let mut add = |name: &'static str, inputs: Vec<Tensor<F>>, dropout: bool, build: Builder<F>| {
        cases.push(OpCase {
            name,
            inputs,
            dropout,
            build,
        })
    };

    add(
        "matmul",
        vec![r.tensor(&[3, 4]), r.tensor(&[4, 2])],
        false,
        Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y)
        }),
    );
    add(
        "matmul_batched",
        vec![r.tensor(&[2, 3, 4]), r.tensor(&[2, 4, 3])],
        false,
        Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y)
        }),
    );
    add(
        "matmul_t",
        vec![r.tensor(&[2, 3, 4]), r.tensor(&[2, 5, 4])],
        false,
        Box::new(|g, v| {
            let y = g.matmul_t(v[0], v[1])?;
            weighted_sum(g, y)
        }),
    );
    add(
        "add",
        vec![r.tensor(&[2, 3, 4]), r.tensor(&[4])],
        false,
        Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y)
        }),
    );
    add(
        "mul",
        vec![r.tensor(&[2, 3, 4]), r.tensor(&[3, 4])],
        false,
        Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y)
        }),
    );
    add(
        "scale",
        vec![r.tensor(&[3, 3])],
        false,
        Box::new(|g, v| {
            let y = g.scale(v[0], -0.75)?;
            weighted_sum(g, y)
        }),
    );
    add(
        "add_scalar",
        vec![r.tensor(&[3, 3])],
        false,
        Box::new(|g, v| {
            let y = g.add_scalar(v[0], 2.5)?;
            let y = g.mul(y, v[0])?;
            weighted_sum(g, y)
        }),
    );
    add(
        "mean_axis",
        vec![r.tensor(&[2, 3, 4])],
        false,
        Box::new(|g, v| {
            let y = g.mean_axis(v[0], 1)?;
            weighted_sum(g, y)
        }),
    );
    add(
        "mean_all",
        vec![r.tensor(&[2, 3])],
        false,
        Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.mean_all(sq)
        }),
    );
    add(
        "softmax",
        vec![r.tensor(&[3, 5])],
        false,
        Box::new(|g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y)
        }),
    );
    add(
        "log",
        vec![{
            let t: Tensor<F> = r.tensor(&[2, 4]);
            let d: Vec<f64> = t.data().iter().map(|x| 0.5 + x.as_f64().abs()).collect();
            Tensor::from_f64(vec![2, 4], &d).expect("valid shape")
        }],
        false,
        Box::new(|g, v| {
            let y = g.log(v[0])?;
            weighted_sum(g, y)
        }),
    );
    add(
        "exp",
        vec![r.tensor(&[2, 4])],
        false,
        Box::new(|g, v| {
            let y = g.exp(v[0])?;
            weighted_sum(g, y)
        }),
    );
    add(
        "relu",
        vec![r.tensor_away_from_zero(&[3, 4])],
        false,
        Box::new(|g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y)
        }),
    );
    add(
        "layer_norm",
        vec![r.tensor(&[3, 5]), r.tensor(&[5]), r.tensor(&[5])],
        false,
        Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y)
        }),
    );
    add(
        "embedding",
        vec![r.tensor(&[5, 3])],
        false,
        Box::new(|g, v| {
            let y = g.embedding(v[0], &[4, 0, 4, 2], &[2, 2])?;
            weighted_sum(g, y)
        }),
    );
    add(
        "concat",
        vec![r.tensor(&[2, 3]), r.tensor(&[2, 2])],
        false,
        Box::new(|g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            weighted_sum(g, y)
        }),
    );
    add(
        "masked_fill",
        vec![r.tensor(&[2, 3])],
        false,
        Box::new(|g, v| {
            let y = g.masked_fill(v[0], &[false, true, false, false, false, true])?;
            let y = g.softmax(y)?;
            weighted_sum(g, y)
        }),
    );
    add(
        "dropout",
        vec![r.tensor(&[4, 4])],
        true,
        Box::new(|g, v| {
            let y = g.dropout(v[0], 0.3)?;
            weighted_sum(g, y)
        }),
    );
    add(
        "cross_entropy_ls",
        vec![r.tensor(&[2, 3, 4])],
        false,
        Box::new(|g, v| {
            let ce = g.cross_entropy_ls(v[0], &[1, 3, 0, 2, 0, 3], 0.1, 0)?;
            g.scale(ce, 1.0)
        }),
    );
    add(
        "cross_entropy_ls_grouped",
        vec![r.tensor(&[2, 3, 4])],
        false,
        Box::new(|g, v| {
            let ce = g.cross_entropy_ls_grouped(v[0], &[1, 3, 0, 2, 0, 3], 0.1, 0, 2)?;
            weighted_sum(g, ce)
        }),
    );
    add(
        "clamp_min",
        vec![r.tensor_away_from_zero(&[3, 4])],
        false,
        Box::new(|g, v| {
            let y = g.clamp_min(v[0], 0.0)?;
            weighted_sum(g, y)
        }),
    );
    add(
        "reshape",
        vec![r.tensor(&[2, 6])],
        false,
        Box::new(|g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            let y = g.softmax(y)?;
            weighted_sum(g, y)
        }),
    );
    add(
        "swap_axes_12",
        vec![r.tensor(&[2, 3, 2, 2])],
        false,
        Box::new(|g, v| {
            let y = g.swap_axes_12(v[0])?;
            let y = g.softmax(y)?;
            weighted_sum(g, y)
        }),
    );
    add(
        "select_col",
        vec![r.tensor(&[3, 4])],
        false,
        Box::new(|g, v| {
            let y = g.softmax(v[0])?;
            let y = g.select_col(y, 2)?;
            weighted_sum(g, y)
        }),
    );
    add(
        "scale_rows",
        vec![r.tensor(&[3, 2, 2]), r.tensor(&[3])],
        false,
        Box::new(|g, v| {
            let y = g.scale_rows(v[0], v[1])?;
            weighted_sum(g, y)
        }),
    );
    cases
}
