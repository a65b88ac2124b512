//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Activation, Graph, Tensor, Var};
use crate::error::Result;
use crate::se3;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Outcome of one named gradient check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Builds a graph from leaf inputs and returns the output node.
pub type BuildFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Relative error of `analytic` against `numeric`: the largest component
/// difference over the largest numeric component.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn eval_projected(build: &BuildFn<'_>, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let root = project(&mut g, out, weights)?;
    Ok(g.value(root).item())
}

/// Analytic gradients of `sum(W * build(inputs))` with respect to every input,
/// plus the projection weights used.
pub fn analytic_gradients(build: &BuildFn<'_>, inputs: &[Tensor], seed: u64) -> Result<(Vec<Tensor>, Tensor)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let (r, c) = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let weights = Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let root = project(&mut g, out, &weights)?;
    g.backward(root)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows, t.cols)))
        .collect();
    Ok((grads, weights))
}

/// Compares analytic and central-difference gradients for every input entry.
pub fn check_gradient(
    name: &str,
    inputs: &[Tensor],
    build: &BuildFn<'_>,
    step: f64,
    tolerance: f64,
    seed: u64,
    inject_fault: bool,
) -> Result<CheckReport> {
    let (mut analytic, weights) = analytic_gradients(build, inputs, seed)?;
    if inject_fault {
        for t in &mut analytic {
            t.data.iter_mut().for_each(|x| *x *= 1.01);
        }
    }
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data[i] -= step;
            let fp = eval_projected(build, &plus, &weights)?;
            let fm = eval_projected(build, &minus, &weights)?;
            *slot = (fp - fm) / (2.0 * step);
        }
        worst = worst.max(relative_error(&analytic[k].data, &numeric));
    }
    Ok(CheckReport {
        name: name.to_owned(),
        max_rel_error: worst,
        tolerance,
        passed: worst < tolerance,
    })
}

struct OpCase {
    name: &'static str,
    shapes: Vec<(usize, usize)>,
    domain: Domain,
    build: Box<BuildFn<'static>>,
}

#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
    /// Magnitudes bounded away from zero (kinks at the origin).
    AwayFromZero,
}

fn sample(rng: &mut ChaCha8Rng, shape: (usize, usize), domain: Domain) -> Tensor {
    let data = (0..shape.0 * shape.1)
        .map(|_| match domain {
            Domain::Any => rng.gen_range(-1.5..1.5),
            Domain::Positive => rng.gen_range(0.2..2.0),
            Domain::AwayFromZero => {
                let m = rng.gen_range(0.1..1.5);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
        })
        .collect();
    Tensor {
        rows: shape.0,
        cols: shape.1,
        data,
    }
}

fn case(
    name: &'static str,
    shapes: &[(usize, usize)],
    domain: Domain,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.to_vec(),
        domain,
        build: Box::new(build),
    }
}

fn op_cases() -> Vec<OpCase> {
    use Domain::*;
    vec![
        case("add", &[(4, 3), (4, 3)], Any, |g, v| g.add(v[0], v[1])),
        case("add_broadcast_row", &[(4, 3), (1, 3)], Any, |g, v| g.add(v[0], v[1])),
        case("sub", &[(4, 3), (4, 1)], Any, |g, v| g.sub(v[0], v[1])),
        case("mul", &[(4, 3), (4, 3)], Any, |g, v| g.mul(v[0], v[1])),
        case("mul_broadcast_col", &[(4, 3), (4, 1)], Any, |g, v| g.mul(v[0], v[1])),
        case("div", &[(4, 3), (4, 3)], Positive, |g, v| g.div(v[0], v[1])),
        case("affine", &[(3, 2)], Any, |g, v| Ok(g.affine(v[0], -2.5, 0.75))),
        case("matmul", &[(4, 3), (3, 5)], Any, |g, v| g.matmul(v[0], v[1])),
        case("dense_identity", &[(5, 3), (3, 4), (1, 4)], Any, |g, v| {
            g.dense(v[0], v[1], v[2], Activation::Identity)
        }),
        case("dense_relu", &[(5, 3), (3, 4), (1, 4)], Any, |g, v| {
            g.dense(v[0], v[1], v[2], Activation::Relu)
        }),
        case("dense_sigmoid", &[(5, 3), (3, 4), (1, 4)], Any, |g, v| {
            g.dense(v[0], v[1], v[2], Activation::Sigmoid)
        }),
        case("dense_softplus", &[(5, 3), (3, 4), (1, 4)], Any, |g, v| {
            g.dense(v[0], v[1], v[2], Activation::Softplus)
        }),
        case("exp", &[(3, 3)], Any, |g, v| Ok(g.exp(v[0]))),
        case("log", &[(3, 3)], Positive, |g, v| Ok(g.log(v[0]))),
        case("sin", &[(3, 3)], Any, |g, v| Ok(g.sin(v[0]))),
        case("cos", &[(3, 3)], Any, |g, v| Ok(g.cos(v[0]))),
        case("sigmoid", &[(3, 3)], Any, |g, v| Ok(g.sigmoid(v[0]))),
        case("relu", &[(3, 3)], AwayFromZero, |g, v| Ok(g.relu(v[0]))),
        case("softplus", &[(3, 3)], Any, |g, v| Ok(g.softplus(v[0]))),
        case("abs", &[(3, 3)], AwayFromZero, |g, v| Ok(g.abs(v[0]))),
        case("sum", &[(3, 4)], Any, |g, v| Ok(g.sum(v[0]))),
        case("mean", &[(3, 4)], Any, |g, v| Ok(g.mean(v[0]))),
        case("sum_cols", &[(3, 4)], Any, |g, v| Ok(g.sum_cols(v[0]))),
        case("sum_groups", &[(6, 2)], Any, |g, v| g.sum_groups(v[0], 3)),
        case("l2norm", &[(4, 3)], AwayFromZero, |g, v| Ok(g.l2norm(v[0]))),
        case("normalize3", &[(4, 3)], AwayFromZero, |g, v| g.normalize3(v[0])),
        case("cross3", &[(4, 3), (4, 3)], Any, |g, v| g.cross3(v[0], v[1])),
        case("concat_cols", &[(3, 2), (3, 1)], Any, |g, v| g.concat_cols(&[v[0], v[1]])),
        case("concat_rows", &[(2, 3), (1, 3)], Any, |g, v| g.concat_rows(&[v[0], v[1]])),
        case("slice_cols", &[(3, 5)], Any, |g, v| g.slice_cols(v[0], 1, 4)),
        case("gather_rows", &[(4, 2)], Any, |g, v| g.gather_rows(v[0], &[3, 0, 3, 1])),
        case("reshape", &[(4, 3)], Any, |g, v| g.reshape(v[0], 2, 6)),
        case("cumprod_exclusive", &[(3, 5)], Any, |g, v| Ok(g.cumprod_exclusive(v[0]))),
        case("posenc", &[(3, 3)], Any, |g, v| Ok(g.posenc(v[0], 4))),
        case("rotation_coeff", &[(3, 1)], Positive, |g, v| {
            Ok(g.elementwise(v[0], se3::rotation_coeff))
        }),
        case("coupling_coeff", &[(3, 1)], Positive, |g, v| {
            Ok(g.elementwise(v[0], se3::coupling_coeff))
        }),
        case("translation_coeff", &[(3, 1)], Positive, |g, v| {
            Ok(g.elementwise(v[0], se3::translation_coeff))
        }),
        case("warp", &[(4, 3), (4, 3), (4, 3), (4, 3)], Any, |g, v| {
            let (o, d) = se3::warp_rays_graph(g, v[0], v[1], v[2], v[3])?;
            g.concat_cols(&[o, d])
        }),
    ]
}

/// Names of every operation covered by [`run_op_suite`].
pub fn op_names() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.name).collect()
}

/// Checks every differentiable operation at `points` random inputs each.
/// `fault` names one check whose analytic gradient is deliberately perturbed.
pub fn run_op_suite(seed: u64, points: usize, tolerance: f64, fault: Option<&str>) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for c in op_cases() {
        let mut worst = 0.0f64;
        for p in 0..points {
            let inputs: Vec<Tensor> = c.shapes.iter().map(|&s| sample(&mut rng, s, c.domain)).collect();
            let r = check_gradient(
                c.name,
                &inputs,
                c.build.as_ref(),
                DEFAULT_STEP,
                tolerance,
                seed.wrapping_add(p as u64),
                fault == Some(c.name),
            )?;
            worst = worst.max(r.max_rel_error);
        }
        reports.push(CheckReport {
            name: c.name.to_owned(),
            max_rel_error: worst,
            tolerance,
            passed: worst < tolerance,
        });
    }
    Ok(reports)
}
