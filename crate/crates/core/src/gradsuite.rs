//! Finite-difference checks over every differentiable operation, the
//! distillation losses, and the full objective on a small model.
//!
//! Each check contracts the operation's output with a fixed random tensor,
//! so every output coordinate contributes to the checked gradient.

use rand::Rng as _;

use crate::combinator::predict_all;
use crate::distill::{hmd_loss, kd_loss, total_loss, ObjectiveConfig, Topology};
use crate::encoder::{EncoderParams, ModelConfig};
use crate::error::Result;
use crate::rng::{self, Rng};
use crate::tensor::{grad_check_many, Tape, Tensor, Var};
use crate::uncertainty::weighted_fuse_on_tape;

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    /// Worst relative error over all seeds.
    pub max_error: f64,
    pub seeds: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_error < GRAD_TOLERANCE
    }
}

type Check = fn(&mut Rng) -> Result<f64>;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Values bounded away from zero, so relu kinks stay out of reach of the step.
fn off_kink(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = uniform(shape, -1.0, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

/// `Σ out ⊙ R` for a fixed `R`.
fn contract<'t>(tape: &'t Tape, out: Var<'t>, r: &Tensor) -> Result<Var<'t>> {
    Ok(out.mul(tape.constant(r.clone()))?.sum())
}

/// Checks a unary op on inputs of `shape`.
fn unary<F>(rng: &mut Rng, x: Tensor, out_shape: &[usize], f: F) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let r = uniform(out_shape, -1.0, 1.0, rng);
    grad_check_many(|tape, v| contract(tape, f(v[0])?, &r), &[x], GRAD_STEP)
}

fn binary<F>(rng: &mut Rng, a: Tensor, b: Tensor, out_shape: &[usize], f: F) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>, Var<'t>) -> Result<Var<'t>>,
{
    let r = uniform(out_shape, -1.0, 1.0, rng);
    grad_check_many(|tape, v| contract(tape, f(v[0], v[1])?, &r), &[a, b], GRAD_STEP)
}

fn check_add(rng: &mut Rng) -> Result<f64> {
    let (a, b) = (uniform(&[3, 4], -1.0, 1.0, rng), uniform(&[3, 4], -1.0, 1.0, rng));
    binary(rng, a, b, &[3, 4], |x, y| x.add(y))
}

fn check_sub(rng: &mut Rng) -> Result<f64> {
    let (a, b) = (uniform(&[5], -1.0, 1.0, rng), uniform(&[5], -1.0, 1.0, rng));
    binary(rng, a, b, &[5], |x, y| x.sub(y))
}

fn check_mul(rng: &mut Rng) -> Result<f64> {
    let (a, b) = (uniform(&[2, 3], -1.0, 1.0, rng), uniform(&[2, 3], -1.0, 1.0, rng));
    binary(rng, a, b, &[2, 3], |x, y| x.mul(y))
}

fn check_scale(rng: &mut Rng) -> Result<f64> {
    let c = rng.gen_range(-2.0..2.0);
    let x = uniform(&[4], -1.0, 1.0, rng);
    unary(rng, x, &[4], move |v| Ok(v.scale(c)))
}

fn check_matmul(rng: &mut Rng) -> Result<f64> {
    let (a, b) = (uniform(&[3, 4], -1.0, 1.0, rng), uniform(&[4, 5], -1.0, 1.0, rng));
    binary(rng, a, b, &[3, 5], |x, y| x.matmul(y))
}

fn check_linear(rng: &mut Rng) -> Result<f64> {
    let x = uniform(&[3, 4], -1.0, 1.0, rng);
    let w = uniform(&[4, 2], -1.0, 1.0, rng);
    let b = uniform(&[2], -1.0, 1.0, rng);
    let r = uniform(&[3, 2], -1.0, 1.0, rng);
    grad_check_many(|tape, v| contract(tape, v[0].linear(v[1], v[2])?, &r), &[x, w, b], GRAD_STEP)
}

fn check_conv(stride: usize, rng: &mut Rng) -> Result<f64> {
    let x = uniform(&[2, 7, 7], -1.0, 1.0, rng);
    let k = uniform(&[3, 2, 3, 3], -1.0, 1.0, rng);
    let side = (7 - 3) / stride + 1;
    binary(rng, x, k, &[3, side, side], move |x, k| x.conv2d(k, stride))
}

fn check_conv_stride1(rng: &mut Rng) -> Result<f64> {
    check_conv(1, rng)
}

fn check_conv_stride2(rng: &mut Rng) -> Result<f64> {
    check_conv(2, rng)
}

fn check_channel_bias(rng: &mut Rng) -> Result<f64> {
    let (x, b) = (uniform(&[3, 2, 2], -1.0, 1.0, rng), uniform(&[3], -1.0, 1.0, rng));
    binary(rng, x, b, &[3, 2, 2], |x, b| x.add_channel_bias(b))
}

fn check_relu(rng: &mut Rng) -> Result<f64> {
    let x = off_kink(&[10], rng);
    unary(rng, x, &[10], |v| Ok(v.relu()))
}

fn check_layer_norm(rng: &mut Rng) -> Result<f64> {
    let x = uniform(&[3, 6], -2.0, 2.0, rng);
    let g = uniform(&[6], 0.5, 1.5, rng);
    let b = uniform(&[6], -0.5, 0.5, rng);
    let r = uniform(&[3, 6], -1.0, 1.0, rng);
    grad_check_many(|tape, v| contract(tape, v[0].layer_norm(v[1], v[2])?, &r), &[x, g, b], GRAD_STEP)
}

fn check_softmax(rng: &mut Rng) -> Result<f64> {
    let tau = rng.gen_range(0.5..4.0);
    let x = uniform(&[2, 5], -2.0, 2.0, rng);
    unary(rng, x, &[2, 5], move |v| v.softmax(tau))
}

fn check_log(rng: &mut Rng) -> Result<f64> {
    let x = uniform(&[6], 0.2, 2.0, rng);
    unary(rng, x, &[6], |v| Ok(v.log()))
}

fn check_kl(rng: &mut Rng) -> Result<f64> {
    let (a, b) = (uniform(&[5], -2.0, 2.0, rng), uniform(&[5], -2.0, 2.0, rng));
    grad_check_many(|_, v| v[0].softmax(1.0)?.kl_div(v[1].softmax(1.0)?), &[a, b], GRAD_STEP)
}

fn check_ce_logits(rng: &mut Rng) -> Result<f64> {
    let label = rng.gen_range(0..6);
    let x = uniform(&[6], -3.0, 3.0, rng);
    grad_check_many(|_, v| v[0].cross_entropy_logits(label), &[x], GRAD_STEP)
}

fn check_ce_target(rng: &mut Rng) -> Result<f64> {
    let target = Tensor::one_hot(rng.gen_range(0..4), 4)?;
    let x = uniform(&[4], -2.0, 2.0, rng);
    grad_check_many(|_, v| v[0].softmax(1.0)?.cross_entropy(&target, 1e-8), &[x], GRAD_STEP)
}

fn check_entropy(rng: &mut Rng) -> Result<f64> {
    let x = uniform(&[5], -2.0, 2.0, rng);
    grad_check_many(|_, v| v[0].softmax(1.0)?.entropy(1e-8), &[x], GRAD_STEP)
}

fn check_mean_sum(rng: &mut Rng) -> Result<f64> {
    let x = uniform(&[3, 3], -1.0, 1.0, rng);
    let c = rng.gen_range(-1.0..1.0);
    grad_check_many(|_, v| v[0].mean().scale(c).add(v[0].mul(v[0])?.sum()), &[x], GRAD_STEP)
}

fn check_select_row(rng: &mut Rng) -> Result<f64> {
    let row = rng.gen_range(0..4);
    let x = uniform(&[4, 3], -1.0, 1.0, rng);
    unary(rng, x, &[3], move |v| v.select_row(row))
}

fn check_spatial_tokens(rng: &mut Rng) -> Result<f64> {
    let x = uniform(&[3, 2, 4], -1.0, 1.0, rng);
    unary(rng, x, &[8, 3], |v| v.spatial_tokens())
}

fn check_concat_rows(rng: &mut Rng) -> Result<f64> {
    let (a, b) = (uniform(&[2, 3], -1.0, 1.0, rng), uniform(&[4, 3], -1.0, 1.0, rng));
    let r = uniform(&[6, 3], -1.0, 1.0, rng);
    grad_check_many(|tape, v| contract(tape, tape.concat_rows(&[v[0], v[1]])?, &r), &[a, b], GRAD_STEP)
}

fn check_attention(rng: &mut Rng) -> Result<f64> {
    let q = uniform(&[5, 4], -1.0, 1.0, rng);
    let k = uniform(&[5, 4], -1.0, 1.0, rng);
    let v = uniform(&[5, 4], -1.0, 1.0, rng);
    let r = uniform(&[5, 4], -1.0, 1.0, rng);
    grad_check_many(
        |tape, x| contract(tape, tape.attention(x[0], x[1], x[2], 2)?, &r),
        &[q, k, v],
        GRAD_STEP,
    )
}

fn check_kd(rng: &mut Rng) -> Result<f64> {
    let tau = rng.gen_range(1.0..4.0);
    let (t, s) = (uniform(&[5], -2.0, 2.0, rng), uniform(&[5], -2.0, 2.0, rng));
    grad_check_many(|_, v| kd_loss(v[0], v[1], tau), &[t, s], GRAD_STEP)
}

fn check_hmd(rng: &mut Rng) -> Result<f64> {
    let n = 3;
    let inputs: Vec<Tensor> = (0..n).map(|_| uniform(&[4], -2.0, 2.0, rng)).collect();
    let topology = Topology::ALL[rng.gen_range(0..4)];
    let obj = ObjectiveConfig {
        topology,
        ..ObjectiveConfig::default()
    };
    grad_check_many(
        |_, v| {
            let logits: Vec<Option<Var<'_>>> = v.iter().copied().map(Some).collect();
            hmd_loss(&logits, &obj.edges(n), &obj)
        },
        &inputs,
        GRAD_STEP,
    )
}

fn check_weighted_fuse(rng: &mut Rng) -> Result<f64> {
    let m = 3;
    let inputs: Vec<Tensor> = (0..m).map(|_| uniform(&[4], -2.0, 2.0, rng)).collect();
    let mut w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    let r = uniform(&[4], -1.0, 1.0, rng);
    grad_check_many(
        |tape, v| {
            let probs = v.iter().map(|x| x.softmax(1.0)).collect::<Result<Vec<_>>>()?;
            contract(tape, weighted_fuse_on_tape(&probs, &w)?.log(), &r)
        },
        &inputs,
        GRAD_STEP,
    )
}

/// Small model used by the end-to-end check.
pub fn toy_model_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        in_channels: 2,
        image_size: 7,
        conv_channels: vec![3],
        kernel: 3,
        stride: 2,
        dim: 4,
        depth: 1,
        heads: 2,
        ff: 6,
        num_classes,
    }
}

/// `L_total` of a 2-view, 2-class sample, differentiated with respect to
/// every model parameter and both input images.
fn check_end_to_end(rng: &mut Rng) -> Result<f64> {
    let config = toy_model_config(2);
    let params = EncoderParams::init(&config, rng)?;
    let encoder = crate::encoder::Encoder::from_params(config.clone(), params.clone())?;
    let label = rng.gen_range(0..2);
    let image = |rng: &mut Rng| uniform(&[2, 7, 7], 0.0, 1.0, rng);
    let mut inputs: Vec<Tensor> = params.tensors().to_vec();
    inputs.push(image(rng));
    inputs.push(image(rng));
    let np = params.len();
    let obj = ObjectiveConfig::default();
    grad_check_many(
        |_, v| {
            let bound = encoder.params().bind_vars(v[..np].to_vec())?;
            let preds = predict_all(&encoder, &bound, &v[np..], 5)?;
            Ok(total_loss(&preds, label, &obj)?.total)
        },
        &inputs,
        GRAD_STEP,
    )
}

const CHECKS: &[(&str, Check)] = &[
    ("add", check_add),
    ("sub", check_sub),
    ("mul", check_mul),
    ("scale", check_scale),
    ("matmul", check_matmul),
    ("linear", check_linear),
    ("conv2d/stride1", check_conv_stride1),
    ("conv2d/stride2", check_conv_stride2),
    ("channel_bias", check_channel_bias),
    ("relu", check_relu),
    ("layer_norm", check_layer_norm),
    ("softmax", check_softmax),
    ("log", check_log),
    ("kl_div", check_kl),
    ("cross_entropy_logits", check_ce_logits),
    ("cross_entropy", check_ce_target),
    ("entropy", check_entropy),
    ("mean_sum", check_mean_sum),
    ("select_row", check_select_row),
    ("spatial_tokens", check_spatial_tokens),
    ("concat_rows", check_concat_rows),
    ("attention", check_attention),
    ("kd_loss", check_kd),
    ("hmd_loss", check_hmd),
    ("weighted_fuse", check_weighted_fuse),
    ("total_loss/end_to_end", check_end_to_end),
];

/// Names of all checks in suite order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check for each seed; each check draws from its own stream.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<OpCheck>> {
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let mut worst = 0.0f64;
            for &seed in seeds {
                let mut rng = rng::stream(seed, &format!("gradcheck/{name}"));
                worst = worst.max(check(&mut rng)?);
            }
            Ok(OpCheck {
                name,
                max_error: worst,
                seeds: seeds.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_at_one_seed() {
        for c in run_suite(&[11]).unwrap() {
            assert!(c.passed(), "{}: {}", c.name, c.max_error);
        }
    }
}
