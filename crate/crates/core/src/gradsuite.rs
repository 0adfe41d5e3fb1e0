//! Gradient-check suite: every differentiable primitive plus tiny versions of
//! both networks, each on several seeded inputs, in 64-bit mode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::param::Bound;
use crate::recnet::{RecConfig, RecModel};
use crate::rng;
use crate::segnet::{SegConfig, SegModel};
use crate::tensor::gradcheck::{grad_check_many, GradCheckOptions};
use crate::tensor::{Padding, Tape, Tensor, Var};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE && self.checked > 0
    }
}

type Case = fn(&mut ChaCha8Rng, u64) -> Result<CaseResult>;

/// Uniform values in ±[0.05, 1]: bounded away from the ReLU kink.
fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product").with_requires_grad(true)
}

/// Collapses a non-scalar output to a scalar with fixed random weights so
/// every output coordinate matters.
fn project<'t>(v: Var<'t, f64>, weights: &Tensor<f64>) -> Result<Var<'t, f64>> {
    let w = v.tape().constant(weights.clone().reshape(v.shape())?);
    Ok(v.mul(w)?.sum())
}

fn check<F>(name: &str, seed: u64, inputs: &[Tensor<f64>], coords: Option<usize>, f: F) -> Result<CaseResult>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let opts = GradCheckOptions { eps: 1e-6, max_coords_per_input: coords, seed };
    let r = grad_check_many(f, inputs, opts)?;
    Ok(CaseResult { name: name.into(), seed, max_rel_error: r.max_rel_error, checked: r.checked })
}

/// Checks a unary op followed by a random projection.
fn unary(
    name: &str,
    rng: &mut ChaCha8Rng,
    seed: u64,
    shape: &[usize],
    out: &[usize],
    op: for<'t> fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
) -> Result<CaseResult> {
    let x = rand_tensor(rng, shape);
    let w = rand_tensor(rng, out);
    check(name, seed, &[x], None, move |_, v| project(op(v[0])?, &w))
}

fn conv_same(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    let ins = [rand_tensor(rng, &[2, 2, 5, 4]), rand_tensor(rng, &[3, 2, 3, 3]), rand_tensor(rng, &[3])];
    let w = rand_tensor(rng, &[2, 3, 5, 4]);
    check("conv2d_same", seed, &ins, None, move |_, v| project(v[0].conv2d(v[1], v[2], Padding::Same, 1)?, &w))
}

fn conv_valid_stride2(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    let ins = [rand_tensor(rng, &[1, 3, 7, 6]), rand_tensor(rng, &[2, 3, 3, 3]), rand_tensor(rng, &[2])];
    let w = rand_tensor(rng, &[1, 2, 3, 2]);
    check("conv2d_valid_s2", seed, &ins, None, move |_, v| project(v[0].conv2d(v[1], v[2], Padding::Valid, 2)?, &w))
}

fn conv_pointwise(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    let ins = [rand_tensor(rng, &[2, 3, 3, 3]), rand_tensor(rng, &[2, 3, 1, 1]), rand_tensor(rng, &[2])];
    let w = rand_tensor(rng, &[2, 2, 3, 3]);
    check("conv2d_1x1", seed, &ins, None, move |_, v| project(v[0].conv2d(v[1], v[2], Padding::Same, 1)?, &w))
}

fn max_pool(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    unary("max_pool2d", rng, seed, &[1, 2, 4, 6], &[1, 2, 2, 3], |v| v.max_pool2d())
}

fn avg_pool(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    unary("avg_pool3x3", rng, seed, &[1, 2, 4, 5], &[1, 2, 4, 5], |v| v.avg_pool3x3())
}

fn upsample(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    unary("upsample_nearest2x", rng, seed, &[1, 2, 2, 3], &[1, 2, 4, 6], |v| v.upsample_nearest2x())
}

fn concat(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    let ins = [rand_tensor(rng, &[2, 1, 3, 2]), rand_tensor(rng, &[2, 2, 3, 2])];
    let w = rand_tensor(rng, &[2, 3, 3, 2]);
    check("concat", seed, &ins, None, move |_, v| project(v[0].concat(v[1])?, &w))
}

fn dense(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    let ins = [rand_tensor(rng, &[3, 4]), rand_tensor(rng, &[4, 2]), rand_tensor(rng, &[2])];
    let w = rand_tensor(rng, &[3, 2]);
    check("dense", seed, &ins, None, move |_, v| project(v[0].dense(v[1], v[2])?, &w))
}

fn relu(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    unary("relu", rng, seed, &[2, 5], &[2, 5], |v| Ok(v.relu()))
}

fn sigmoid(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    unary("sigmoid", rng, seed, &[2, 5], &[2, 5], |v| Ok(v.sigmoid()))
}

fn softmax(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    unary("softmax", rng, seed, &[3, 4], &[3, 4], |v| v.softmax())
}

fn add(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    let ins = [rand_tensor(rng, &[2, 3]), rand_tensor(rng, &[2, 3])];
    let w = rand_tensor(rng, &[2, 3]);
    check("add", seed, &ins, None, move |_, v| project(v[0].add(v[1])?, &w))
}

fn mul(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    let ins = [rand_tensor(rng, &[2, 3]), rand_tensor(rng, &[2, 3])];
    let w = rand_tensor(rng, &[2, 3]);
    check("mul", seed, &ins, None, move |_, v| project(v[0].mul(v[1])?, &w))
}

fn scale(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    unary("scale", rng, seed, &[4], &[4], |v| Ok(v.scale(-1.75)))
}

fn sum(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    let x = rand_tensor(rng, &[2, 3, 2]);
    check("sum", seed, &[x], None, |_, v| Ok(v[0].sum()))
}

fn mean(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    let x = rand_tensor(rng, &[2, 3, 2]);
    check("mean", seed, &[x], None, |_, v| Ok(v[0].mean()))
}

fn pad_reflect(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    unary("pad_reflect", rng, seed, &[1, 2, 3, 4], &[1, 2, 5, 5], |v| v.pad_reflect(2, 1))
}

fn crop(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    unary("crop", rng, seed, &[1, 2, 4, 5], &[1, 2, 3, 2], |v| v.crop(3, 2))
}

fn global_avg_pool(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    unary("global_avg_pool", rng, seed, &[2, 3, 3, 2], &[2, 3], |v| v.global_avg_pool())
}

fn targets(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect()
}

fn bce(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    let mut x = rand_tensor(rng, &[2, 1, 3, 3]);
    x.data_mut().iter_mut().for_each(|v| *v *= 4.0);
    let y = targets(rng, 18);
    check("bce_loss", seed, &[x], None, move |_, v| v[0].bce_with_logits(&y))
}

fn dice(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    let x = rand_tensor(rng, &[1, 1, 4, 4]);
    let y = targets(rng, 16);
    check("dice_loss", seed, &[x], None, move |_, v| v[0].dice_with_logits(&y))
}

fn cross_entropy(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    let x = rand_tensor(rng, &[4, 3]);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
    let weights = [1.7825, 0.4859, 2.6247];
    check("cross_entropy", seed, &[x], None, move |_, v| v[0].softmax_cross_entropy(&labels, &weights))
}

/// Network parameters as check inputs. Biases initialize to exactly zero, which
/// puts every unit fed by a dead channel on the relu kink, so they are redrawn.
fn model_inputs<'a>(rng: &mut ChaCha8Rng, params: impl Iterator<Item = (&'a str, &'a Tensor<f64>)>) -> Vec<Tensor<f64>> {
    params
        .map(|(name, t)| {
            if name.ends_with(".bias") {
                let mut b = rand_tensor(rng, t.shape());
                b.data_mut().iter_mut().for_each(|v| *v *= 0.2);
                b
            } else {
                t.clone().with_requires_grad(true)
            }
        })
        .collect()
}

fn tiny_segnet(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    let model = SegModel::<f64>::build(SegConfig { depth: 1, base_filters: 2, ..SegConfig::default() }, seed)?;
    let mut inputs = vec![rand_tensor(rng, &[1, 3, 6, 5])];
    inputs.extend(model_inputs(rng, model.params().iter().map(|p| (p.name.as_str(), &p.tensor))));
    let w = rand_tensor(rng, &[1, 1, 6, 5]);
    check("segnet_depth1", seed, &inputs, Some(24), move |_, v| {
        let bound = Bound::from_vars(v[1..].to_vec());
        project(model.forward(&bound, v[0])?, &w)
    })
}

fn tiny_recnet(rng: &mut ChaCha8Rng, seed: u64) -> Result<CaseResult> {
    let cfg = RecConfig { stem_filters: 2, num_blocks: 2, block_width: 1, head_units: 4, ..RecConfig::default() };
    let model = RecModel::<f64>::build(cfg, seed)?;
    let mut inputs = vec![rand_tensor(rng, &[2, 3, 16, 16]), rand_tensor(rng, &[2, 3, 16, 16])];
    inputs.extend(model_inputs(rng, model.params().iter().map(|p| (p.name.as_str(), &p.tensor))));
    let labels = vec![0, 2];
    check("recnet_2blocks", seed, &inputs, Some(24), move |_, v| {
        let bound = Bound::from_vars(v[2..].to_vec());
        model.forward_logits(&bound, v[0], v[1])?.softmax_cross_entropy(&labels, &[1.0, 1.0, 1.0])
    })
}

const CASES: &[Case] = &[
    conv_same,
    conv_valid_stride2,
    conv_pointwise,
    max_pool,
    avg_pool,
    upsample,
    concat,
    dense,
    relu,
    sigmoid,
    softmax,
    add,
    mul,
    scale,
    sum,
    mean,
    pad_reflect,
    crop,
    global_avg_pool,
    bce,
    dice,
    cross_entropy,
    tiny_segnet,
    tiny_recnet,
];

/// Runs every case on `inputs_per_case` seeds derived from `seed`.
pub fn run(seed: u64, inputs_per_case: usize) -> Result<Vec<CaseResult>> {
    let mut out = Vec::with_capacity(CASES.len() * inputs_per_case);
    for (c, case) in CASES.iter().enumerate() {
        for i in 0..inputs_per_case {
            let s = rng::derive_seed(seed, (c * 1000 + i) as u64);
            let mut rng = rng::stream(s, 0);
            out.push(case(&mut rng, s)?);
        }
    }
    Ok(out)
}
