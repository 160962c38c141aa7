use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SampleRecord;
use crate::error::{Error, Result};

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_VAL_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stratum {
    Benign,
    /// Mean exactly 3; only present when mean-3 exclusion is off.
    Indeterminate,
    Malignant,
}

pub fn stratum_of(record: &SampleRecord) -> Stratum {
    let mean = record.ratings.malignancy_mean();
    if mean < 3.0 {
        Stratum::Benign
    } else if mean > 3.0 {
        Stratum::Malignant
    } else {
        Stratum::Indeterminate
    }
}

const STRATA: [Stratum; 3] = [Stratum::Benign, Stratum::Indeterminate, Stratum::Malignant];

fn group_by_stratum<'a, I: Iterator<Item = &'a SampleRecord>>(records: I) -> [Vec<usize>; 3] {
    let mut groups: [Vec<usize>; 3] = Default::default();
    for (i, r) in records.enumerate() {
        groups[STRATA.iter().position(|&s| s == stratum_of(r)).unwrap()].push(i);
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub val_fraction: f64,
    /// Sample ids in dataset order.
    pub ids: Vec<String>,
    /// Fold index of `ids[i]`.
    pub folds: Vec<usize>,
}

impl FoldSpec {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id).map(|i| self.folds[i])
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.folds {
            sizes[f] += 1;
        }
        sizes
    }

    /// Splits `records` (in the order the assignment was built from) into
    /// (training pool, held-out fold).
    pub fn split<'a>(&self, records: &'a [SampleRecord], fold: usize) -> Result<(Vec<&'a SampleRecord>, Vec<&'a SampleRecord>)> {
        if records.len() != self.ids.len() || records.iter().zip(&self.ids).any(|(r, id)| &r.id != id) {
            return Err(Error::Dataset("records do not match the fold assignment".into()));
        }
        if fold >= self.k {
            return Err(Error::Config(format!("fold {fold} out of range for k = {}", self.k)));
        }
        let (test, train): (Vec<_>, Vec<_>) = records.iter().zip(&self.folds).partition(|(_, &f)| f == fold);
        Ok((train.into_iter().map(|(r, _)| r).collect(), test.into_iter().map(|(r, _)| r).collect()))
    }
}

/// Assigns every record to one of `k` folds, stratified by benign/malignant.
///
/// Each stratum is shuffled and dealt round-robin, continuing the deal
/// across strata, so per-stratum and overall fold sizes differ by at most one.
pub fn stratified_kfold(records: &[SampleRecord], k: usize, seed: u64) -> Result<FoldSpec> {
    if records.is_empty() {
        return Err(Error::Dataset("cannot build folds over an empty dataset".into()));
    }
    if k < 2 {
        return Err(Error::Config(format!("need k >= 2 folds, got {k}")));
    }
    let groups = group_by_stratum(records.iter());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; records.len()];
    let mut dealt = 0;
    for (stratum, mut members) in STRATA.iter().zip(groups) {
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::Dataset(format!(
                "{stratum:?} stratum has {} samples, fewer than k = {k}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for idx in members {
            folds[idx] = dealt % k;
            dealt += 1;
        }
    }
    Ok(FoldSpec {
        k,
        val_fraction: DEFAULT_VAL_FRACTION,
        ids: records.iter().map(|r| r.id.clone()).collect(),
        folds,
    })
}

/// Stratified hold-out of `fraction` of `records` for validation.
/// Both halves keep the input order.
pub fn train_val_split<'a>(
    records: &[&'a SampleRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<&'a SampleRecord>, Vec<&'a SampleRecord>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {fraction} not in (0, 1)")));
    }
    let groups = group_by_stratum(records.iter().copied());
    let nonempty: Vec<&Vec<usize>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if let Some(g) = nonempty.iter().find(|g| g.len() < 2) {
        return Err(Error::Dataset(format!(
            "a stratum with {} sample(s) cannot give up a validation sample",
            g.len()
        )));
    }
    // largest-remainder apportionment of round(fraction * n), at least one per stratum
    let total = ((fraction * records.len() as f64).round() as usize).max(nonempty.len());
    let quotas: Vec<f64> = groups.iter().map(|g| fraction * g.len() as f64).collect();
    let mut counts: Vec<usize> = groups
        .iter()
        .zip(&quotas)
        .map(|(g, q)| if g.is_empty() { 0 } else { (q.floor() as usize).max(1) })
        .collect();
    let mut order: Vec<usize> = (0..groups.len()).filter(|&s| !groups[s].is_empty()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
    let mut assigned: usize = counts.iter().sum();
    for &s in order.iter().cycle().take(order.len() * 2) {
        if assigned >= total {
            break;
        }
        if counts[s] + 1 < groups[s].len() {
            counts[s] += 1;
            assigned += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; records.len()];
    for (members, &count) in groups.iter().zip(&counts) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &idx in shuffled.iter().take(count) {
            is_val[idx] = true;
        }
    }
    let (val, train): (Vec<_>, Vec<_>) = records.iter().zip(&is_val).partition(|(_, &v)| v);
    Ok((train.into_iter().map(|(r, _)| *r).collect(), val.into_iter().map(|(r, _)| *r).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PATCH_PIXELS;
    use crate::ratings::RaterScores;

    fn rec(id: usize, malignant: bool) -> SampleRecord {
        let m = if malignant { vec![4, 4, 5] } else { vec![1, 2, 2] };
        let mut mask = vec![0; PATCH_PIXELS];
        mask[0] = 1;
        SampleRecord {
            id: format!("s{id}"),
            image: vec![0.5; PATCH_PIXELS],
            mask,
            ratings: RaterScores::new(m, std::array::from_fn(|_| vec![3, 3, 3])).unwrap(),
        }
    }

    fn dataset(benign: usize, malignant: usize) -> Vec<SampleRecord> {
        (0..benign + malignant).map(|i| rec(i, i >= benign)).collect()
    }

    #[test]
    fn full_scale_folds_are_balanced() {
        let records = dataset(646, 503);
        let spec = stratified_kfold(&records, 5, 42).unwrap();
        let sizes = spec.fold_sizes();
        assert!(sizes.iter().all(|&s| s == 229 || s == 230), "{sizes:?}");
        let global = 646.0 / 1149.0;
        for f in 0..5 {
            let members: Vec<_> = records.iter().zip(&spec.folds).filter(|(_, &x)| x == f).collect();
            let benign = members.iter().filter(|(r, _)| stratum_of(r) == Stratum::Benign).count();
            let ratio = benign as f64 / members.len() as f64;
            assert!((ratio - global).abs() < 0.05);
            assert!((ratio - 0.56).abs() < 0.01);
        }
    }

    #[test]
    fn folds_are_deterministic_and_balanced() {
        let records = dataset(5, 5);
        let a = stratified_kfold(&records, 5, 1).unwrap();
        assert_eq!(a, stratified_kfold(&records, 5, 1).unwrap());
        assert_eq!(a.fold_sizes(), vec![2; 5]);
        assert_ne!(a.folds, stratified_kfold(&records, 5, 2).unwrap().folds);
    }

    #[test]
    fn fold_errors() {
        assert!(stratified_kfold(&[], 5, 0).is_err());
        assert!(stratified_kfold(&dataset(6, 4), 5, 0).is_err());
        assert!(stratified_kfold(&dataset(6, 6), 1, 0).is_err());
    }

    #[test]
    fn split_partitions_records() {
        let records = dataset(12, 8);
        let spec = stratified_kfold(&records, 4, 3).unwrap();
        let mut seen = 0;
        for f in 0..4 {
            let (train, test) = spec.split(&records, f).unwrap();
            assert_eq!(train.len() + test.len(), records.len());
            seen += test.len();
        }
        assert_eq!(seen, records.len());
    }

    #[test]
    fn val_split_sizes_and_determinism() {
        let records = dataset(55, 45);
        let refs: Vec<_> = records.iter().collect();
        let (train, val) = train_val_split(&refs, 0.1, 9).unwrap();
        assert_eq!((train.len(), val.len()), (90, 10));
        let (train2, val2) = train_val_split(&refs, 0.1, 9).unwrap();
        assert_eq!(
            val.iter().map(|r| &r.id).collect::<Vec<_>>(),
            val2.iter().map(|r| &r.id).collect::<Vec<_>>()
        );
        assert_eq!(train.len(), train2.len());
        assert!(train_val_split(&refs, 1.0, 0).is_err());
        let tiny = dataset(1, 5);
        let tiny_refs: Vec<_> = tiny.iter().collect();
        assert!(train_val_split(&tiny_refs, 0.1, 0).is_err());
    }

    #[test]
    fn val_split_preserves_strata_on_random_datasets() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..20 {
            let benign = rng.gen_range(40..200);
            let malignant = rng.gen_range(40..200);
            let records = dataset(benign, malignant);
            let refs: Vec<_> = records.iter().collect();
            let (_, val) = train_val_split(&refs, 0.1, trial).unwrap();
            let global = benign as f64 / (benign + malignant) as f64;
            let vb = val.iter().filter(|r| stratum_of(r) == Stratum::Benign).count() as f64 / val.len() as f64;
            assert!((vb - global).abs() < 0.05, "trial {trial}: {vb} vs {global}");
        }
    }
}
