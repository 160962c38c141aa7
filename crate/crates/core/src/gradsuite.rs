//! Finite-difference checks over every tape primitive, the three losses and
//! a small end-to-end network.

use ndtensor::gradcheck::{check_gradients, DEFAULT_STEP};
use ndtensor::{ReduceOp, Tape, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsule::{squash, RoutingConfig};
use crate::error::Result;
use crate::losses::{attribute_loss, fit_target_distribution, malignancy_kl_loss, reconstruction_loss};
use crate::model::{XCapsConfig, XCapsModel};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = random(rng, shape, 0.2, 1.5);
    let signs: Vec<f64> = t.data().iter().map(|&v| if rng.gen_bool(0.5) { v } else { -v }).collect();
    Tensor::new(shape, signs).expect("valid shape")
}

/// Contracts `out` with fixed random weights so every output entry gets a
/// distinct upstream gradient.
fn weigh(tape: &mut Tape, out: Var, seed: u64) -> ndtensor::Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = random(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0);
    let w = tape.constant(w)?;
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> ndtensor::Result<Var>>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let m = |rng: &mut ChaCha8Rng, s: &[usize]| random(rng, s, -1.0, 1.0);
    vec![
        ("add", vec![m(rng, &[3, 4]), m(rng, &[3, 4])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![m(rng, &[3, 4]), m(rng, &[3, 4])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![m(rng, &[3, 4]), m(rng, &[3, 4])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("mul_scalar", vec![m(rng, &[3, 4]), m(rng, &[])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("neg", vec![m(rng, &[5])], Box::new(|t, v| t.neg(v[0]))),
        ("exp", vec![m(rng, &[5])], Box::new(|t, v| t.exp(v[0]))),
        ("log", vec![random(rng, &[5], 0.2, 3.0)], Box::new(|t, v| t.log(v[0]))),
        ("sigmoid", vec![m(rng, &[5])], Box::new(|t, v| t.sigmoid(v[0]))),
        ("relu", vec![away_from_zero(rng, &[6])], Box::new(|t, v| t.relu(v[0]))),
        ("abs", vec![away_from_zero(rng, &[6])], Box::new(|t, v| t.abs(v[0]))),
        ("scale", vec![m(rng, &[4])], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("matmul", vec![m(rng, &[3, 4]), m(rng, &[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        (
            "batched_matmul",
            vec![m(rng, &[2, 3, 4]), m(rng, &[2, 4, 2])],
            Box::new(|t, v| t.batched_matmul(v[0], v[1])),
        ),
        (
            "conv2d",
            vec![m(rng, &[2, 6, 6]), m(rng, &[3, 2, 3, 3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], 1)),
        ),
        (
            "conv2d_stride2",
            vec![m(rng, &[2, 7, 7]), m(rng, &[3, 2, 3, 3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], 2)),
        ),
        (
            "channel_bias",
            vec![m(rng, &[3, 2, 2]), m(rng, &[3])],
            Box::new(|t, v| t.add_channel_bias(v[0], v[1])),
        ),
        ("reduce_sum", vec![m(rng, &[3, 4])], Box::new(|t, v| t.reduce(ReduceOp::Sum, v[0], 1))),
        ("reduce_mean", vec![m(rng, &[3, 4])], Box::new(|t, v| t.reduce(ReduceOp::Mean, v[0], 0))),
        ("reduce_max", vec![m(rng, &[3, 4])], Box::new(|t, v| t.reduce(ReduceOp::Max, v[0], 1))),
        ("sum_all", vec![m(rng, &[3, 4])], Box::new(|t, v| t.sum_all(v[0]))),
        ("mean_all", vec![m(rng, &[3, 4])], Box::new(|t, v| t.mean_all(v[0]))),
        ("softmax", vec![m(rng, &[3, 4])], Box::new(|t, v| t.softmax(v[0], 1))),
        ("log_softmax", vec![m(rng, &[3, 4])], Box::new(|t, v| t.log_softmax(v[0], 0))),
        ("l2_norm", vec![m(rng, &[3, 4])], Box::new(|t, v| t.l2_norm(v[0], 1))),
        ("reshape", vec![m(rng, &[3, 4])], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        ("permute", vec![m(rng, &[2, 3, 4])], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))),
        (
            "squash",
            vec![m(rng, &[4, 3])],
            Box::new(|t, v| squash(t, v[0]).map_err(|e| ndtensor::TensorError::InvalidArgument(e.to_string()))),
        ),
    ]
}

fn case(name: &str, tolerance: f64, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> ndtensor::Result<Var>) -> Result<GradCase> {
    let check = check_gradients(inputs, DEFAULT_STEP, f)?;
    Ok(GradCase {
        name: name.to_string(),
        max_rel_err: check.max_rel_err,
        tolerance,
        checked: check.checked,
    })
}

fn to_tensor_err(e: crate::error::Error) -> ndtensor::TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => ndtensor::TensorError::InvalidArgument(other.to_string()),
    }
}

/// Every case in the suite; deterministic for a given `seed`.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for (i, (name, inputs, build)) in primitive_cases(&mut rng).into_iter().enumerate() {
        cases.push(case(name, PRIMITIVE_TOLERANCE, &inputs, |t, v| {
            let out = build(t, v)?;
            weigh(t, out, seed.wrapping_add(i as u64))
        })?);
    }

    // losses
    let image = random(&mut rng, &[4, 4], 0.0, 1.0);
    let mask = Tensor::new(&[4, 4], (0..16).map(|i| f64::from(u8::from(i % 3 != 0))).collect())?;
    let recon = random(&mut rng, &[4, 4], 0.05, 0.95);
    cases.push(case("reconstruction_loss", PRIMITIVE_TOLERANCE, &[recon], |t, v| {
        reconstruction_loss(t, v[0], &image, &mask, 0.512).map_err(to_tensor_err)
    })?);
    let target: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
    let alpha = vec![1.0, 0.5, 2.0, 1.0, 1.0, 0.25];
    let pred = random(&mut rng, &[6], 0.0, 1.0);
    cases.push(case("attribute_loss", PRIMITIVE_TOLERANCE, &[pred], |t, v| {
        attribute_loss(t, v[0], &target, &alpha).map(|(l, _)| l).map_err(to_tensor_err)
    })?);
    let dist = fit_target_distribution(3.4, 0.8, 5)?;
    let logits = random(&mut rng, &[5], -2.0, 2.0);
    cases.push(case("malignancy_kl_loss", PRIMITIVE_TOLERANCE, &[logits], |t, v| {
        malignancy_kl_loss(t, v[0], &dist, 1.0).map_err(to_tensor_err)
    })?);

    cases.push(model_case(seed)?);
    Ok(cases)
}

/// Total loss of the toy network against every parameter, at random biases.
/// One routing iteration, so the (detached) coefficients are the constant
/// prior and the tape gradient is the exact derivative.
fn model_case(seed: u64) -> Result<GradCase> {
    let cfg = XCapsConfig {
        routing: RoutingConfig {
            iterations: 1,
            ..RoutingConfig::sigmoid()
        },
        ..XCapsConfig::toy()
    };
    let model = XCapsModel::build(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let image = random(&mut rng, &[8, 8], 0.0, 1.0);
    let mask = Tensor::new(&[8, 8], (0..64).map(|i| f64::from(u8::from((i / 8 + i % 8) % 3 != 0))).collect())?;
    let attr_target = [0.3, 0.8];
    let dist = fit_target_distribution(2.6, 0.7, 5)?;
    // Zero-initialized biases leave ReLU pre-activations within a finite
    // difference step of the kink, since fresh capsule outputs are tiny.
    let inputs: Vec<Tensor> = model
        .params()
        .iter()
        .map(|(name, t)| if name.ends_with(".b") { away_from_zero(&mut rng, t.shape()) } else { t.clone() })
        .collect();
    case("xcaps_toy_total_loss", MODEL_TOLERANCE, &inputs, |t, v| {
        let run = |t: &mut Tape| -> Result<Var> {
            let out = model.forward_graph(t, v, &image, true)?;
            let (l_a, _) = attribute_loss(t, out.attr_scores, &attr_target, &[1.0, 1.0])?;
            let l_m = malignancy_kl_loss(t, out.malignancy_logits, &dist, 1.0)?;
            let l_r = reconstruction_loss(t, out.reconstruction.expect("decoder on"), &image, &mask, 0.512)?;
            let s = t.add(l_a, l_m)?;
            Ok(t.add(s, l_r)?)
        };
        run(t).map_err(to_tensor_err)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let cases = run_gradient_suite(1).unwrap();
        assert!(cases.len() >= 30);
        for c in &cases {
            assert!(c.passed(), "{c:?}");
            assert!(c.checked > 0);
        }
    }
}
