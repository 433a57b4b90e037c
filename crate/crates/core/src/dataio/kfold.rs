//! Subject-grouped k-fold assignment: all images of one subject land in the
//! same fold, so left/right eye pairs can never leak across folds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::Manifest;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct KFoldSplit {
    pub k: usize,
    fold_of_sample: Vec<usize>,
    fold_subjects: Vec<Vec<String>>,
}

impl KFoldSplit {
    pub fn fold_of(&self, sample_index: usize) -> usize {
        self.fold_of_sample[sample_index]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.fold_of_sample
    }

    pub fn subjects_in_fold(&self, fold: usize) -> &[String] {
        &self.fold_subjects[fold]
    }

    /// Sample indices whose subject belongs to `fold`.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        self.fold_of_sample
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sample indices outside `fold`.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        self.fold_of_sample
            .iter()
            .enumerate()
            .filter(|(_, &f)| f != fold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Partitions subjects (not samples) into `k` near-equal folds with a
/// seeded shuffle; deterministic for a given `(manifest, k, seed)`.
pub fn kfold_split(manifest: &Manifest, k: usize, seed: u64) -> Result<KFoldSplit> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("k must be >= 2, got {k}")));
    }
    // unique subjects in first-appearance order
    let mut subjects: Vec<String> = Vec::new();
    {
        let mut seen = std::collections::HashSet::new();
        for r in manifest.records() {
            if seen.insert(r.subject_id.clone()) {
                subjects.push(r.subject_id.clone());
            }
        }
    }
    if subjects.len() < k {
        return Err(Error::InvalidInput(format!(
            "{} distinct subjects cannot fill {k} folds",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);

    let mut fold_subjects: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut fold_of_subject = std::collections::HashMap::new();
    for (i, subject) in subjects.into_iter().enumerate() {
        let fold = i % k;
        fold_of_subject.insert(subject.clone(), fold);
        fold_subjects[fold].push(subject);
    }
    let fold_of_sample = manifest
        .records()
        .iter()
        .map(|r| fold_of_subject[&r.subject_id])
        .collect();
    Ok(KFoldSplit {
        k,
        fold_of_sample,
        fold_subjects,
    })
}
