//! Per-pixel multinomial logistic regression over malignancy classes, the
//! linear reference point for the capsule network.

use ndtensor::{softmax_along, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{SampleRecord, PATCH_PIXELS};
use crate::error::{Error, Result};
use crate::ratings::{fit_label_distribution, SCORE_CLASSES};
use crate::trainer::{accuracy_within_one, adam_step, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub lr: f64,
    pub l2: f64,
    pub max_iterations: usize,
    /// Full-batch steps without a lower validation loss before stopping.
    pub patience: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            l2: 1.0,
            max_iterations: 2000,
            patience: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticBaseline {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[PATCH_PIXELS, SCORE_CLASSES]`.
    weights: Tensor,
    bias: Tensor,
    pub iterations: usize,
    pub l2: f64,
    /// Validation cross-entropy of the kept weights.
    pub val_loss: f64,
}

/// L2 strengths tried by [`LogisticBaseline::fit_tuned`].
pub const L2_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

struct Design {
    x: Vec<f64>,
    targets: Vec<f64>,
    n: usize,
}

fn design(records: &[&SampleRecord], mean: &[f64], scale: &[f64]) -> Result<Design> {
    let mut x = Vec::with_capacity(records.len() * PATCH_PIXELS);
    let mut targets = Vec::with_capacity(records.len() * SCORE_CLASSES);
    for r in records {
        x.extend(r.image.iter().zip(mean.iter().zip(scale)).map(|(&v, (m, s))| (f64::from(v) - m) / s));
        targets.extend(fit_label_distribution(r.ratings.malignancy())?.probs);
    }
    Ok(Design {
        x,
        targets,
        n: records.len(),
    })
}

impl LogisticBaseline {
    fn probs(&self, x: &[f64]) -> Vec<f64> {
        let w = self.weights.data();
        let mut z = self.bias.data().to_vec();
        for (p, &xv) in x.iter().enumerate() {
            for k in 0..SCORE_CLASSES {
                z[k] += xv * w[p * SCORE_CLASSES + k];
            }
        }
        let z = Tensor::vector(z).expect("non-empty");
        softmax_along(&z, 0).expect("1-d").into_data()
    }

    /// Mean soft-target cross-entropy, and its gradients when requested.
    fn loss(&self, d: &Design, l2: f64, want_grad: bool) -> (f64, Option<(Tensor, Tensor)>) {
        let mut gw = vec![0.0; PATCH_PIXELS * SCORE_CLASSES];
        let mut gb = vec![0.0; SCORE_CLASSES];
        let mut loss = 0.0;
        let inv = 1.0 / d.n as f64;
        for i in 0..d.n {
            let x = &d.x[i * PATCH_PIXELS..(i + 1) * PATCH_PIXELS];
            let t = &d.targets[i * SCORE_CLASSES..(i + 1) * SCORE_CLASSES];
            let p = self.probs(x);
            loss -= t.iter().zip(&p).map(|(t, p)| t * p.max(1e-300).ln()).sum::<f64>() * inv;
            if want_grad {
                let delta: Vec<f64> = p.iter().zip(t).map(|(p, t)| (p - t) * inv).collect();
                for (pix, &xv) in x.iter().enumerate() {
                    for k in 0..SCORE_CLASSES {
                        gw[pix * SCORE_CLASSES + k] += xv * delta[k];
                    }
                }
                for k in 0..SCORE_CLASSES {
                    gb[k] += delta[k];
                }
            }
        }
        let w = self.weights.data();
        loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
        let grads = want_grad.then(|| {
            for (g, v) in gw.iter_mut().zip(w) {
                *g += l2 * v;
            }
            (
                Tensor::new(&[PATCH_PIXELS, SCORE_CLASSES], gw).expect("shape"),
                Tensor::vector(gb).expect("shape"),
            )
        });
        (loss, grads)
    }

    /// Full-batch Adam on soft rater-distribution targets, keeping the
    /// weights with the lowest validation loss.
    pub fn fit(train: &[&SampleRecord], val: &[&SampleRecord], cfg: &BaselineConfig) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Dataset("baseline needs non-empty train and validation sets".into()));
        }
        let n = train.len() as f64;
        let mut mean = vec![0.0; PATCH_PIXELS];
        for r in train {
            for (m, &v) in mean.iter_mut().zip(&r.image) {
                *m += f64::from(v) / n;
            }
        }
        let mut scale = vec![0.0; PATCH_PIXELS];
        for r in train {
            for ((s, &v), m) in scale.iter_mut().zip(&r.image).zip(&mean) {
                *s += (f64::from(v) - m).powi(2) / n;
            }
        }
        let scale: Vec<f64> = scale.iter().map(|v| v.sqrt().max(1e-6)).collect();
        let train_d = design(train, &mean, &scale)?;
        let val_d = design(val, &mean, &scale)?;

        let mut model = Self {
            mean,
            scale,
            weights: Tensor::zeros(&[PATCH_PIXELS, SCORE_CLASSES])?,
            bias: Tensor::zeros(&[SCORE_CLASSES])?,
            iterations: 0,
            l2: cfg.l2,
            val_loss: f64::INFINITY,
        };
        let mut adam = AdamState::new([&model.weights, &model.bias]);
        let mut best = (f64::INFINITY, model.clone());
        let mut since_best = 0;
        for it in 0..cfg.max_iterations {
            let (_, grads) = model.loss(&train_d, cfg.l2, true);
            let (gw, gb) = grads.expect("requested");
            let Self { weights, bias, .. } = &mut model;
            adam_step([("weights", weights), ("bias", bias)], &[gw, gb], &mut adam, cfg.lr)?;
            model.iterations = it + 1;
            let (val_loss, _) = model.loss(&val_d, 0.0, false);
            if val_loss < best.0 {
                model.val_loss = val_loss;
                best = (val_loss, model.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
        Ok(best.1)
    }

    /// Fits once per entry of [`L2_GRID`] and keeps the lowest validation loss.
    pub fn fit_tuned(train: &[&SampleRecord], val: &[&SampleRecord], cfg: &BaselineConfig) -> Result<Self> {
        let mut best: Option<Self> = None;
        for l2 in L2_GRID {
            let model = Self::fit(train, val, &BaselineConfig { l2, ..cfg.clone() })?;
            if best.as_ref().map_or(true, |b| model.val_loss < b.val_loss) {
                best = Some(model);
            }
        }
        Ok(best.expect("grid is non-empty"))
    }

    /// Argmax class (1-based) for one 32x32 image.
    pub fn predict(&self, image: &[f32]) -> u8 {
        let x: Vec<f64> = image
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&v, (m, s))| (f64::from(v) - m) / s)
            .collect();
        let p = self.probs(&x);
        let best = p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        best.0 as u8 + 1
    }

    pub fn malignancy_accuracy(&self, records: &[&SampleRecord]) -> f64 {
        let predicted: Vec<u8> = records.iter().map(|r| self.predict(&r.image)).collect();
        let means: Vec<f64> = records.iter().map(|r| r.ratings.malignancy_mean()).collect();
        accuracy_within_one(&predicted, &means)
    }
}
