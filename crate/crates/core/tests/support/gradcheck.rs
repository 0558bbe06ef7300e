//! Central finite differences in f64 against the analytic backward pass.

use coala::objectives::{contrastive, kl_reconstruction, softmax_cross_entropy, tag_bce, Denominator};
use coala::tensor::{CustomOp, Graph, Tensor, Var};
use coala::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed random linear functional turning any output into a scalar.
struct Probe(Vec<f64>);

impl CustomOp<f64> for Probe {
    fn name(&self) -> &'static str {
        "probe"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<f64>],
        _output: &Tensor<f64>,
        grad_output: &Tensor<f64>,
    ) -> Result<Vec<Option<Tensor<f64>>>> {
        let up = grad_output.data()[0];
        let g = self.0.iter().map(|w| w * up).collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape(), g)?)])
    }
}

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

const STEP: f64 = 1e-5;
/// Denominator floor so that gradients that vanish do not turn rounding
/// noise into a large relative error.
const FLOOR: f64 = 1e-3;
const PROBES_PER_INPUT: usize = 10;

fn evaluate(build: &Build, inputs: &[Tensor<f64>], seed: u64, scalarize: bool) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new(true, seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let loss = if scalarize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let w: Vec<f64> = (0..g.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: f64 = g.value(out).data().iter().zip(&w).map(|(a, b)| a * b).sum();
        g.custom(&[out], Tensor::scalar(v), Box::new(Probe(w)))?
    } else {
        out
    };
    Ok((g, vars, loss))
}

/// Largest relative error over a random subset of input coordinates.
/// `scalarize` wraps a non-scalar output in a random linear functional.
pub fn max_relative_error(build: &Build, inputs: &[Tensor<f64>], seed: u64, scalarize: bool) -> Result<f64> {
    let (g, vars, loss) = evaluate(build, inputs, seed, scalarize)?;
    let grads = g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let Some(analytic) = grads.get(vars[k]) else { continue };
        let n = input.numel();
        let picks: Vec<usize> = if n <= PROBES_PER_INPUT {
            (0..n).collect()
        } else {
            (0..PROBES_PER_INPUT).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in picks {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[j] += STEP;
            let (gp, _, lp) = evaluate(build, &shifted, seed, scalarize)?;
            shifted[k].data_mut()[j] -= 2.0 * STEP;
            let (gm, _, lm) = evaluate(build, &shifted, seed, scalarize)?;
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, so no coordinate sits on a ReLU kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Build>,
    pub scalarize: bool,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, scalarize: bool, build: Box<Build>) -> Case {
    Case {
        name,
        inputs,
        build,
        scalarize,
    }
}

/// Every layer and loss with fresh random inputs drawn from `seed`.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let binary = |r: &mut ChaCha8Rng, shape: &[usize]| Tensor::from_fn(shape, |_| if r.gen_bool(0.4) { 1.0 } else { 0.0 });
    let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
    vec![
        case(
            "conv2d",
            vec![uniform(r, &[2, 2, 6, 6], -1.0, 1.0), uniform(r, &[3, 2, 4, 4], -0.5, 0.5), uniform(r, &[3], -0.5, 0.5)],
            true,
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), (2, 2), (1, 1))),
        ),
        case(
            "conv_transpose2d",
            vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0), uniform(r, &[3, 2, 4, 4], -0.5, 0.5), uniform(r, &[2], -0.5, 0.5)],
            true,
            Box::new(|g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), (2, 2), (1, 1))),
        ),
        case(
            "linear",
            vec![uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[4, 5], -0.5, 0.5), uniform(r, &[4], -0.5, 0.5)],
            true,
            Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        ),
        case(
            "batchnorm_train",
            vec![uniform(r, &[3, 2, 2, 2], -2.0, 2.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -0.5, 0.5)],
            true,
            Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0)),
        ),
        case(
            "batchnorm_eval",
            vec![uniform(r, &[3, 2, 2, 2], -2.0, 2.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -0.5, 0.5)],
            true,
            Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2], &[0.8, 1.3])), 1e-5)?.0)),
        ),
        case("relu", vec![away_from_zero(r, &[4, 6])], true, Box::new(|g, v| g.relu(v[0]))),
        case("sigmoid", vec![uniform(r, &[4, 6], -4.0, 4.0)], true, Box::new(|g, v| g.sigmoid(v[0]))),
        case("dropout", vec![uniform(r, &[4, 6], -1.0, 1.0)], true, Box::new(|g, v| g.dropout(v[0], 0.25))),
        case("reshape", vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], true, Box::new(|g, v| g.reshape(v[0], &[6, 4]))),
        case(
            "add",
            vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)],
            true,
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        case("scale", vec![uniform(r, &[3, 4], -1.0, 1.0)], true, Box::new(|g, v| g.scale(v[0], -2.5))),
        case(
            "generalized_kl",
            vec![uniform(r, &[2, 1, 4, 4], 0.05, 1.0), uniform(r, &[2, 1, 4, 4], 0.05, 1.0)],
            false,
            Box::new(|g, v| kl_reconstruction(g, v[0], v[1])),
        ),
        case(
            "binary_cross_entropy",
            vec![binary(r, &[3, 6]), uniform(r, &[3, 6], 0.05, 0.95)],
            false,
            Box::new(|g, v| tag_bce(g, v[0], v[1])),
        ),
        case(
            "contrastive_exclude_positive",
            vec![uniform(r, &[4, 5], 0.1, 1.0), uniform(r, &[4, 5], 0.1, 1.0)],
            false,
            Box::new(|g, v| contrastive(g, v[0], v[1], 0.1, Denominator::ExcludePositive)),
        ),
        case(
            "contrastive_include_positive",
            vec![uniform(r, &[4, 5], 0.1, 1.0), uniform(r, &[4, 5], 0.1, 1.0)],
            false,
            Box::new(|g, v| contrastive(g, v[0], v[1], 0.5, Denominator::IncludePositive)),
        ),
        case(
            "softmax_cross_entropy",
            vec![uniform(r, &[4, 3], -2.0, 2.0)],
            false,
            Box::new(move |g, v| softmax_cross_entropy(g, v[0], &labels)),
        ),
    ]
}

/// Worst error of every case over `seeds` seeds: `(name, worst error)`.
pub fn run_suite(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut worst: Vec<(&'static str, f64)> = cases(0).iter().map(|c| (c.name, 0.0)).collect();
    for seed in 0..seeds {
        for (k, c) in cases(seed).into_iter().enumerate() {
            let e = max_relative_error(&*c.build, &c.inputs, seed, c.scalarize)?;
            worst[k].1 = worst[k].1.max(e);
        }
    }
    Ok(worst)
}

/// `<conv(x), y> - <x, conv_transpose(y)>` with the same weights, relative.
pub fn adjoint_gap(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let w = uniform(&mut rng, &[4, 3, 4, 4], -1.0, 1.0);
    let y = uniform(&mut rng, &[2, 4, 4, 4], -1.0, 1.0);
    let ax = coala::tensor::kernels::conv2d(&x, &w, None, (2, 2), (1, 1))?;
    let aty = coala::tensor::kernels::conv_transpose2d(&y, &w, None, (2, 2), (1, 1))?;
    let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
    let (l, r) = (dot(&ax, &y), dot(&x, &aty));
    Ok((l - r).abs() / l.abs().max(r.abs()).max(1e-12))
}
