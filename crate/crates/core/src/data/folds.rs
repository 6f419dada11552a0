use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PairedStudy;
use crate::error::{Error, Result};

/// Subject-level fold labels; all rows of a subject, in both views, share one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k_folds: usize,
    pub fold_of: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn test_subjects(&self, fold: usize) -> BTreeSet<String> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.clone())
            .collect()
    }

    pub fn train_subjects(&self, fold: usize) -> BTreeSet<String> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(s, _)| s.clone())
            .collect()
    }
}

/// Shuffles subjects with a seeded generator and deals them round-robin into
/// `k_folds` folds, so fold sizes differ by at most one.
pub fn subject_folds(study: &PairedStudy, k_folds: usize, seed: u64) -> Result<FoldAssignment> {
    let mut subjects = study.shared_subjects();
    if k_folds < 2 || k_folds > subjects.len() {
        return Err(Error::TooFewSubjects {
            subjects: subjects.len(),
            folds: k_folds,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let fold_of = subjects
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i % k_folds))
        .collect();
    Ok(FoldAssignment { k_folds, fold_of })
}
