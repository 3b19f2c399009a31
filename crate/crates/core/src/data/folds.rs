//! Cross-validation splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// Indices into the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split unless every entry carries a fold hint, in which case
/// the sorted distinct hints define the folds and must number `n_folds`.
pub fn make_folds(manifest: &DatasetManifest, n_folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let hints: Option<Vec<&str>> = manifest
        .entries
        .iter()
        .map(|e| e.fold_hint.as_deref())
        .collect();
    match hints {
        Some(hints) => folds_from_hints(&hints, n_folds),
        None => stratified_folds(&manifest.labels(), n_folds, seed),
    }
}

/// Shuffles each class by `seed`, then deals its members round-robin over
/// the folds, continuing from where the previous class stopped.
pub fn stratified_folds(labels: &[usize], n_folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    check_counts(labels.len(), n_folds)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = vec![0; labels.len()];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assign[i] = next;
            next = (next + 1) % n_folds;
        }
    }
    Ok(build(&assign, n_folds))
}

fn folds_from_hints(hints: &[&str], n_folds: usize) -> Result<Vec<FoldSplit>> {
    check_counts(hints.len(), n_folds)?;
    let mut distinct: Vec<&str> = hints.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != n_folds {
        return Err(Error::Config(format!(
            "manifest fold hints name {} groups but {n_folds} folds were requested",
            distinct.len()
        )));
    }
    let assign: Vec<usize> = hints
        .iter()
        .map(|h| distinct.binary_search(h).expect("hint present"))
        .collect();
    Ok(build(&assign, n_folds))
}

fn check_counts(samples: usize, n_folds: usize) -> Result<()> {
    if n_folds < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    if samples < n_folds {
        return Err(Error::invalid(format!(
            "{samples} samples cannot fill {n_folds} folds"
        )));
    }
    Ok(())
}

fn build(assign: &[usize], n_folds: usize) -> Vec<FoldSplit> {
    (0..n_folds)
        .map(|fold| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..assign.len()).partition(|&i| assign[i] == fold);
            FoldSplit { fold, train, test }
        })
        .collect()
}
