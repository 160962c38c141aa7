//! Masked reconstruction, attribute and malignancy losses.
//!
//! All losses are built on a [`Tape`] so they differentiate with the rest of
//! the network. Weights are applied inside each component; the total is the
//! plain sum `l_m + l_a + l_r`.

use ndtensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reconstruction weight, as printed (0.005 x 32 x 32 would be 5.12).
pub const DEFAULT_GAMMA: f64 = 0.512;

/// Lower bound applied to every entry of a fitted target distribution.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(attr_count: usize) -> Self {
        Self {
            alpha: vec![1.0; attr_count],
            beta: 1.0,
            gamma: DEFAULT_GAMMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if self.alpha.iter().all(|&a| ok(a)) && ok(self.beta) && ok(self.gamma) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_a: f64,
    pub l_a_per_attribute: Vec<f64>,
    pub l_m: f64,
    pub total: f64,
}

/// `gamma / (H W) * sum |I*S - O_r|`.
pub fn reconstruction_loss(tape: &mut Tape, recon: Var, image: &Tensor, mask: &Tensor, gamma: f64) -> Result<Var> {
    if image.shape() != mask.shape() || tape.shape(recon) != image.shape() {
        return Err(Error::invalid(
            "reconstruction_loss",
            format!(
                "shapes differ: output {:?}, image {:?}, mask {:?}",
                tape.shape(recon),
                image.shape(),
                mask.shape()
            ),
        ));
    }
    if let Some(bad) = mask.data().iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(Error::invalid("reconstruction_loss", format!("mask value {bad} is not 0 or 1")));
    }
    let target: Vec<f64> = image.data().iter().zip(mask.data()).map(|(i, s)| i * s).collect();
    let target = tape.constant(Tensor::new(image.shape(), target)?)?;
    let diff = tape.sub(target, recon)?;
    let abs = tape.abs(diff)?;
    let total = tape.sum_all(abs)?;
    Ok(tape.scale(total, gamma / image.numel() as f64)?)
}

/// `sum_n alpha_n |A_n - O_a_n|`; also returns the per-attribute terms.
pub fn attribute_loss(tape: &mut Tape, pred: Var, target: &[f64], alpha: &[f64]) -> Result<(Var, Vec<f64>)> {
    let n = tape.value(pred).numel();
    if target.len() != n || alpha.len() != n {
        return Err(Error::invalid(
            "attribute_loss",
            format!("lengths differ: prediction {n}, target {}, alpha {}", target.len(), alpha.len()),
        ));
    }
    let pred = tape.reshape(pred, &[n])?;
    let t = tape.constant(Tensor::vector(target.to_vec())?)?;
    let a = tape.constant(Tensor::vector(alpha.to_vec())?)?;
    let diff = tape.sub(t, pred)?;
    let abs = tape.abs(diff)?;
    let weighted = tape.mul(abs, a)?;
    let per = tape.value(weighted).data().to_vec();
    Ok((tape.sum_all(weighted)?, per))
}

/// Discretized Gaussian over classes `1..=classes`, floored and normalized.
pub fn fit_target_distribution(mu: f64, sigma: f64, classes: usize) -> Result<Vec<f64>> {
    if classes < 2 {
        return Err(Error::invalid("fit_target_distribution", "need at least two classes"));
    }
    if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
        return Err(Error::invalid("fit_target_distribution", format!("invalid mu {mu} / sigma {sigma}")));
    }
    let raw: Vec<f64> = (1..=classes)
        .map(|k| {
            let z = (k as f64 - mu) / sigma;
            (-0.5 * z * z).exp().max(PROB_FLOOR)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|g| g / total).collect())
}

/// `beta * KL(softmax(logits) || target)`.
pub fn malignancy_kl_loss(tape: &mut Tape, logits: Var, target: &[f64], beta: f64) -> Result<Var> {
    let k = tape.value(logits).numel();
    if target.len() != k {
        return Err(Error::invalid(
            "malignancy_kl_loss",
            format!("{k} logits but {} target classes", target.len()),
        ));
    }
    let sum: f64 = target.iter().sum();
    if target.iter().any(|&g| !(g > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "malignancy_kl_loss",
            format!("target must be strictly positive and sum to 1 (sum {sum})"),
        ));
    }
    let logits = tape.reshape(logits, &[k])?;
    let p = tape.softmax(logits, 0)?;
    let log_p = tape.log_softmax(logits, 0)?;
    let log_g = tape.constant(Tensor::vector(target.iter().map(|g| g.ln()).collect())?)?;
    let ratio = tape.sub(log_p, log_g)?;
    let terms = tape.mul(p, ratio)?;
    let kl = tape.sum_all(terms)?;
    Ok(tape.scale(kl, beta)?)
}

/// `beta * |target - prediction|` for the mean-regression ablation.
pub fn mean_regression_loss(tape: &mut Tape, prediction: Var, target: f64, beta: f64) -> Result<Var> {
    let n = tape.value(prediction).numel();
    if n != 1 {
        return Err(Error::invalid("mean_regression_loss", format!("expected one output, got {n}")));
    }
    let t = tape.constant(Tensor::scalar(target))?;
    let p = tape.reshape(prediction, &[])?;
    let diff = tape.sub(t, p)?;
    let abs = tape.abs(diff)?;
    Ok(tape.scale(abs, beta)?)
}

pub fn total_loss(l_m: f64, l_a: f64, l_r: f64) -> Result<LossBreakdown> {
    total_loss_with_terms(l_m, l_a, Vec::new(), l_r)
}

pub fn total_loss_with_terms(l_m: f64, l_a: f64, l_a_per_attribute: Vec<f64>, l_r: f64) -> Result<LossBreakdown> {
    if !(l_m.is_finite() && l_a.is_finite() && l_r.is_finite()) {
        return Err(Error::invalid("total_loss", format!("non-finite component ({l_m}, {l_a}, {l_r})")));
    }
    Ok(LossBreakdown {
        l_r,
        l_a,
        l_a_per_attribute,
        l_m,
        total: l_m + l_a + l_r,
    })
}
