use serde::{Deserialize, Serialize};

use super::{evaluate_losses, prepare, train_fold_with, EpochLog, TrainConfig};
use crate::capsule::RoutingMode;
use crate::data::{stratified_kfold, train_val_split, FoldSpec, SampleRecord};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{MalignancyMode, XCapsConfig, XCapsModel};
use crate::ratings::{to_class, within_one_correct, ATTRIBUTE_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: String,
    pub malignancy: u8,
    pub malignancy_rater_mean: f64,
    pub malignancy_correct: bool,
    /// `None` for the mean-regression head.
    pub malignancy_probs: Option<Vec<f64>>,
    pub confidence: Option<f64>,
    /// Capsule lengths on the 1..5 scale.
    pub attribute_scores: Vec<f64>,
    pub attribute_correct: Vec<bool>,
    /// `attr_count x head_outputs` logit contributions.
    pub contributions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples_evaluated: usize,
    pub attribute_names: Vec<String>,
    pub attribute_accuracy: Vec<f64>,
    pub malignancy_accuracy: f64,
    pub mean_confidence: Option<f64>,
    pub losses: LossBreakdown,
    pub samples: Vec<SamplePrediction>,
}

/// Fraction of predicted classes within one unit of the rater means.
pub fn accuracy_within_one(predicted: &[u8], rater_means: &[f64]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted
        .iter()
        .zip(rater_means)
        .filter(|(&p, &m)| within_one_correct(p, m))
        .count();
    hits as f64 / predicted.len() as f64
}

pub fn evaluate(model: &XCapsModel, records: &[&SampleRecord], cfg: &TrainConfig) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let samples = prepare(records)?;
    let (losses, outputs) = evaluate_losses(model, &samples, cfg)?;
    let mut predictions = Vec::with_capacity(samples.len());
    for (sample, out) in samples.iter().zip(&outputs) {
        let malignancy = out.malignancy_class();
        let attribute_scores = out.attribute_scale();
        let attribute_correct = attribute_scores
            .iter()
            .zip(&sample.attr_means)
            .map(|(&s, &m)| within_one_correct(to_class(s), m))
            .collect();
        let report = model.contribution_report(&out.attr_vectors)?;
        let k = report.shape()[1];
        predictions.push(SamplePrediction {
            id: sample.id.clone(),
            malignancy,
            malignancy_rater_mean: sample.malignancy_mean,
            malignancy_correct: within_one_correct(malignancy, sample.malignancy_mean),
            malignancy_probs: out.malignancy_probs(),
            confidence: out.confidence(),
            attribute_scores,
            attribute_correct,
            contributions: report.data().chunks(k).map(<[f64]>::to_vec).collect(),
        });
    }
    let n = predictions.len() as f64;
    let attribute_accuracy = (0..ATTRIBUTE_NAMES.len())
        .map(|a| predictions.iter().filter(|p| p.attribute_correct[a]).count() as f64 / n)
        .collect();
    let malignancy_accuracy = predictions.iter().filter(|p| p.malignancy_correct).count() as f64 / n;
    let mean_confidence = match model.config().malignancy_mode {
        MalignancyMode::Distribution => Some(predictions.iter().filter_map(|p| p.confidence).sum::<f64>() / n),
        MalignancyMode::Mean => None,
    };
    Ok(EvalReport {
        samples_evaluated: predictions.len(),
        attribute_names: ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect(),
        attribute_accuracy,
        malignancy_accuracy,
        mean_confidence,
        losses,
        samples: predictions,
    })
}

// ----- cross-validation --------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub report: EvalReport,
}

/// Metrics pooled over every evaluated sample, i.e. the fold means
/// weighted by fold size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvAggregate {
    pub samples_evaluated: usize,
    pub attribute_accuracy: Vec<f64>,
    pub malignancy_accuracy: f64,
    pub mean_confidence: Option<f64>,
}

impl CvAggregate {
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a EvalReport> + Clone) -> Self {
        let total: usize = reports.clone().into_iter().map(|r| r.samples_evaluated).sum();
        let weight = |r: &EvalReport| r.samples_evaluated as f64 / total.max(1) as f64;
        let mut attribute_accuracy = vec![0.0; ATTRIBUTE_NAMES.len()];
        let mut malignancy_accuracy = 0.0;
        let mut confidence = Some(0.0);
        for r in reports.into_iter() {
            let w = weight(r);
            for (a, acc) in attribute_accuracy.iter_mut().zip(&r.attribute_accuracy) {
                *a += w * acc;
            }
            malignancy_accuracy += w * r.malignancy_accuracy;
            confidence = confidence.zip(r.mean_confidence).map(|(c, m)| c + w * m);
        }
        Self {
            samples_evaluated: total,
            attribute_accuracy,
            malignancy_accuracy,
            mean_confidence: confidence,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: FoldSpec,
    pub results: Vec<FoldResult>,
    pub aggregate: CvAggregate,
    #[serde(skip)]
    pub models: Vec<XCapsModel>,
}

/// Seed for fold `fold`: model init, batch order and validation split.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Stratified k-fold cross-validation. `run_folds` limits how many of the
/// `k` folds are trained (all when `None`); the partition is unchanged.
pub fn cross_validate(
    records: &[SampleRecord],
    base: &XCapsConfig,
    cfg: &TrainConfig,
    k: usize,
    run_folds: Option<usize>,
    on_epoch: &mut dyn FnMut(usize, &EpochLog),
) -> Result<CvResult> {
    let folds = stratified_kfold(records, k, cfg.seed)?;
    cross_validate_on(records, &folds, base, cfg, run_folds, on_epoch)
}

fn cross_validate_on(
    records: &[SampleRecord],
    folds: &FoldSpec,
    base: &XCapsConfig,
    cfg: &TrainConfig,
    run_folds: Option<usize>,
    on_epoch: &mut dyn FnMut(usize, &EpochLog),
) -> Result<CvResult> {
    let model_cfg = cfg.model_config(base);
    let count = run_folds.unwrap_or(folds.k).min(folds.k);
    let mut results = Vec::with_capacity(count);
    let mut models = Vec::with_capacity(count);
    for fold in 0..count {
        let (pool, test) = folds.split(records, fold)?;
        let seed = fold_seed(cfg.seed, fold);
        let (train, val) = train_val_split(&pool, cfg.val_fraction, seed)?;
        let model = XCapsModel::build(model_cfg.clone(), seed)?;
        let fold_cfg = TrainConfig { seed, ..cfg.clone() };
        let outcome = train_fold_with(model, &train, &val, &fold_cfg, &mut |e| on_epoch(fold, e))?;
        let report = evaluate(&outcome.model, &test, cfg)?;
        results.push(FoldResult {
            fold,
            train_size: train.len(),
            val_size: val.len(),
            best_epoch: outcome.best_epoch,
            log: outcome.log,
            report,
        });
        models.push(outcome.model);
    }
    let aggregate = CvAggregate::from_reports(results.iter().map(|r| &r.report));
    Ok(CvResult {
        folds: folds.clone(),
        results,
        aggregate,
        models,
    })
}

// ----- ablations ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Base,
    /// Regress the mean malignancy score instead of matching the distribution.
    MeanRegression,
    /// Drop the reconstruction branch (gamma = 0).
    NoReconstruction,
    /// Softmax routing with zero priors.
    SoftmaxRouting,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Base,
        Ablation::MeanRegression,
        Ablation::NoReconstruction,
        Ablation::SoftmaxRouting,
    ];

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        match self {
            Ablation::Base => {}
            Ablation::MeanRegression => out.malignancy_mode = MalignancyMode::Mean,
            Ablation::NoReconstruction => out.use_reconstruction = false,
            Ablation::SoftmaxRouting => out.routing_mode = RoutingMode::Softmax,
        }
        out
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Base => "base",
            Ablation::MeanRegression => "mean_regression",
            Ablation::NoReconstruction => "no_reconstruction",
            Ablation::SoftmaxRouting => "softmax_routing",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub config: TrainConfig,
    pub aggregate: CvAggregate,
    /// Largest mean reconstruction loss seen in any training epoch.
    pub max_train_l_r: f64,
    pub fold_results: Vec<FoldResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub folds: FoldSpec,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<18} {:>10}", "config", "malignancy");
        for name in ATTRIBUTE_NAMES {
            out.push_str(&format!(" {name:>6}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{:<18} {:>10.4}",
                row.ablation.label(),
                row.aggregate.malignancy_accuracy
            ));
            for a in &row.aggregate.attribute_accuracy {
                out.push_str(&format!(" {a:>6.3}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the base configuration and each single-change ablation on one fold
/// assignment, with identical per-fold seeds.
pub fn ablation_suite(
    records: &[SampleRecord],
    base: &XCapsConfig,
    cfg: &TrainConfig,
    k: usize,
    run_folds: Option<usize>,
    on_epoch: &mut dyn FnMut(Ablation, usize, &EpochLog),
) -> Result<AblationTable> {
    let folds = stratified_kfold(records, k, cfg.seed)?;
    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    for ablation in Ablation::ALL {
        let run_cfg = ablation.apply(cfg);
        let cv = cross_validate_on(records, &folds, base, &run_cfg, run_folds, &mut |f, e| on_epoch(ablation, f, e))?;
        let max_train_l_r = cv
            .results
            .iter()
            .flat_map(|r| r.log.iter().map(|e| e.train.l_r))
            .fold(0.0, f64::max);
        rows.push(AblationRow {
            ablation,
            config: run_cfg,
            aggregate: cv.aggregate,
            max_train_l_r,
            fold_results: cv.results,
        });
    }
    Ok(AblationTable { folds, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SyntheticConfig};

    #[test]
    fn constant_three_matches_analytic_fraction() {
        // rater means spread evenly over [1, 5]
        let means: Vec<f64> = (0..=400).map(|i| 1.0 + i as f64 / 100.0).collect();
        let predicted = vec![3u8; means.len()];
        let expected = means.iter().filter(|m| (2.0..=4.0).contains(*m)).count() as f64 / means.len() as f64;
        assert!((accuracy_within_one(&predicted, &means) - expected).abs() < 1e-12);
        assert!((expected - 0.5).abs() < 0.01);
        let oracle: Vec<u8> = means.iter().map(|&m| to_class(m)).collect();
        assert_eq!(accuracy_within_one(&oracle, &means), 1.0);
    }

    fn report(n: usize, acc: f64) -> EvalReport {
        EvalReport {
            samples_evaluated: n,
            attribute_names: vec![],
            attribute_accuracy: vec![acc; 6],
            malignancy_accuracy: acc,
            mean_confidence: Some(acc / 2.0),
            losses: LossBreakdown::default(),
            samples: vec![],
        }
    }

    #[test]
    fn aggregate_is_size_weighted() {
        let reports = [report(10, 0.5), report(30, 0.9)];
        let agg = CvAggregate::from_reports(reports.iter());
        let expected = (10.0 * 0.5 + 30.0 * 0.9) / 40.0;
        assert!((agg.malignancy_accuracy - expected).abs() < 1e-12);
        assert_eq!(agg.samples_evaluated, 40);
    }

    #[test]
    fn ablations_change_one_setting_each() {
        let base = TrainConfig::default();
        let changed: Vec<TrainConfig> = Ablation::ALL.iter().map(|a| a.apply(&base)).collect();
        assert_eq!(changed[0], base);
        assert_eq!(changed[1].malignancy_mode, MalignancyMode::Mean);
        assert!(!changed[2].use_reconstruction);
        let routing = changed[3].model_config(&XCapsConfig::desk()).routing;
        assert_eq!((routing.mode, routing.prior_init), (RoutingMode::Softmax, 0.0));
    }

    #[test]
    fn small_cross_validation_covers_every_sample() {
        let records: Vec<_> = synthesize(&SyntheticConfig::new(4, 60))
            .unwrap()
            .into_iter()
            .map(|s| s.record)
            .filter(|r| r.ratings.malignancy_mean() != 3.0)
            .collect();
        let base = XCapsConfig {
            conv_filters: 2,
            primary_types: 1,
            primary_dim: 4,
            attr_dim: 4,
            decoder_widths: vec![8],
            ..XCapsConfig::desk()
        };
        let cfg = TrainConfig {
            max_epochs: 1,
            val_fraction: 0.2,
            ..TrainConfig::default()
        };
        let cv = cross_validate(&records, &base, &cfg, 3, None, &mut |_, _| {}).unwrap();
        assert_eq!(cv.results.len(), 3);
        let mut ids: Vec<&str> = cv.results.iter().flat_map(|r| r.report.samples.iter().map(|s| s.id.as_str())).collect();
        ids.sort_unstable();
        let mut all: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        all.sort_unstable();
        assert_eq!(ids, all);
        let weighted: f64 = cv
            .results
            .iter()
            .map(|r| r.report.malignancy_accuracy * r.report.samples_evaluated as f64)
            .sum::<f64>()
            / records.len() as f64;
        assert!((cv.aggregate.malignancy_accuracy - weighted).abs() < 1e-12);
        for r in &cv.results {
            assert!(r.report.attribute_accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
            let s = &r.report.samples[0];
            let bias = cv.models[r.fold].head_bias();
            for c in 0..5 {
                let logit_sum: f64 = s.contributions.iter().map(|row| row[c]).sum::<f64>() + bias[c];
                let probs = s.malignancy_probs.as_ref().unwrap();
                assert!(logit_sum.is_finite() && probs[c] > 0.0);
            }
        }
    }
}
