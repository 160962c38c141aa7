//! Multi-rater scores: label distributions, confidence and the +/-1 rule.

use serde::{Deserialize, Serialize};

use crate::error::RatingError;
use crate::losses::fit_target_distribution;

pub const SCORE_CLASSES: usize = 5;
pub const MIN_RATERS: usize = 3;
/// Floor on the fitted standard deviation, in score units.
pub const SIGMA_MIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Attribute {
    #[serde(rename = "sub")]
    Subtlety,
    #[serde(rename = "sph")]
    Sphericity,
    #[serde(rename = "mar")]
    Margin,
    #[serde(rename = "lob")]
    Lobulation,
    #[serde(rename = "spi")]
    Spiculation,
    #[serde(rename = "tex")]
    Texture,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::Subtlety,
        Attribute::Sphericity,
        Attribute::Margin,
        Attribute::Lobulation,
        Attribute::Spiculation,
        Attribute::Texture,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Attribute::Subtlety => "sub",
            Attribute::Sphericity => "sph",
            Attribute::Margin => "mar",
            Attribute::Lobulation => "lob",
            Attribute::Spiculation => "spi",
            Attribute::Texture => "tex",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const ATTRIBUTE_NAMES: [&str; 6] = ["sub", "sph", "mar", "lob", "spi", "tex"];

/// Integer scores from a panel of raters, per attribute and for malignancy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaterScores {
    malignancy: Vec<u8>,
    attributes: [Vec<u8>; 6],
}

impl RaterScores {
    pub fn new(malignancy: Vec<u8>, attributes: [Vec<u8>; 6]) -> Result<Self, RatingError> {
        validate_scores(&malignancy)?;
        for scores in &attributes {
            validate_scores(scores)?;
        }
        Ok(Self { malignancy, attributes })
    }

    pub fn malignancy(&self) -> &[u8] {
        &self.malignancy
    }

    pub fn attribute(&self, attr: Attribute) -> &[u8] {
        &self.attributes[attr.index()]
    }

    pub fn attributes(&self) -> &[Vec<u8>; 6] {
        &self.attributes
    }

    pub fn malignancy_mean(&self) -> f64 {
        mean(&self.malignancy)
    }

    pub fn attribute_means(&self) -> [f64; 6] {
        std::array::from_fn(|i| mean(&self.attributes[i]))
    }
}

fn validate_scores(scores: &[u8]) -> Result<(), RatingError> {
    if scores.len() < MIN_RATERS {
        return Err(RatingError::TooFewScores {
            min: MIN_RATERS,
            got: scores.len(),
        });
    }
    match scores.iter().find(|s| !(1..=5).contains(*s)) {
        Some(&bad) => Err(RatingError::OutOfRange(bad)),
        None => Ok(()),
    }
}

fn mean(scores: &[u8]) -> f64 {
    scores.iter().map(|&s| f64::from(s)).sum::<f64>() / scores.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub mu: f64,
    pub sigma: f64,
    pub probs: Vec<f64>,
}

/// Gaussian label target fitted to a rater panel's mean and population deviation.
pub fn fit_label_distribution(scores: &[u8]) -> Result<ScoreDistribution, RatingError> {
    validate_scores(scores)?;
    let mu = mean(scores);
    let var = scores.iter().map(|&s| (f64::from(s) - mu).powi(2)).sum::<f64>() / scores.len() as f64;
    let sigma = var.sqrt().max(SIGMA_MIN);
    let probs = fit_target_distribution(mu, sigma, SCORE_CLASSES).expect("sigma is floored and mu finite");
    Ok(ScoreDistribution { mu, sigma, probs })
}

pub fn mean_score(scores: &[u8]) -> Result<f64, RatingError> {
    if scores.is_empty() {
        return Err(RatingError::TooFewScores { min: 1, got: 0 });
    }
    Ok(mean(scores))
}

/// True iff the predicted class lies within one unit of the raters' (unrounded) mean.
pub fn within_one_correct(predicted_class: u8, rater_mean: f64) -> bool {
    (f64::from(predicted_class) - rater_mean).abs() <= 1.0
}

/// `1 - H(p) / ln K`, using natural-log Shannon entropy.
pub fn confidence(probs: &[f64]) -> Result<f64, RatingError> {
    let sum: f64 = probs.iter().sum();
    if probs.len() < 2 || probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(RatingError::NotNormalized(sum));
    }
    let entropy: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    Ok((1.0 - entropy / (probs.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Rounds a continuous 1..5 score to the nearest valid class.
pub fn to_class(score: f64) -> u8 {
    score.round().clamp(1.0, SCORE_CLASSES as f64) as u8
}
