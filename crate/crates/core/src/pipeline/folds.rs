//! Stratified (optionally subject-grouped) k-fold splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One rotation of the k-fold split. Index lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits samples into `k` parts and returns the `k` rotations where part
/// `f` is the test set, part `(f+1) mod k` the validation set and the rest
/// the training set.
///
/// Within each class the samples (or, with `group_aware`, the groups) are
/// shuffled by `seed` and dealt round-robin with a cursor that carries over
/// from one class to the next, so class counts per part differ by at most
/// one and part sizes stay balanced. A group is assigned to the majority
/// label of its members; samples without a group form their own group.
pub fn stratified_kfold(
    labels: &[usize],
    groups: &[Option<String>],
    k: usize,
    seed: u64,
    group_aware: bool,
) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::TooFewSamples { detail: format!("k must be at least 2, got {k}") });
    }
    if group_aware && groups.len() != labels.len() {
        return Err(Error::shape("stratified_kfold", format!("{} labels but {} groups", labels.len(), groups.len())));
    }
    let units = units(labels, groups, group_aware);
    let mut by_class: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for unit in units {
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &unit {
            *votes.entry(labels[i]).or_default() += 1;
        }
        let label = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&l, _)| l).unwrap_or(0);
        by_class.entry(label).or_default().push(unit);
    }
    for (class, units) in &by_class {
        if units.len() < k {
            let what = if group_aware { "groups" } else { "samples" };
            return Err(Error::TooFewSamples {
                detail: format!("class {class} has {} {what}, need at least k = {k}", units.len()),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut cursor = 0;
    for units in by_class.values_mut() {
        units.shuffle(&mut rng);
        for unit in units.iter() {
            parts[cursor % k].extend_from_slice(unit);
            cursor += 1;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((0..k)
        .map(|f| {
            let v = (f + 1) % k;
            let mut train: Vec<usize> = (0..k).filter(|&i| i != f && i != v).flat_map(|i| parts[i].iter().copied()).collect();
            train.sort_unstable();
            Fold { index: f, train, val: parts[v].clone(), test: parts[f].clone() }
        })
        .collect())
}

/// Groups of sample indices that must stay together, in first-seen order.
fn units(labels: &[usize], groups: &[Option<String>], group_aware: bool) -> Vec<Vec<usize>> {
    if !group_aware {
        return (0..labels.len()).map(|i| vec![i]).collect();
    }
    let mut order: Vec<Vec<usize>> = Vec::new();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        match g.as_deref() {
            Some(name) => {
                let slot = *seen.entry(name).or_insert_with(|| {
                    order.push(Vec::new());
                    order.len() - 1
                });
                order[slot].push(i);
            }
            None => order.push(vec![i]),
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_groups(n: usize) -> Vec<Option<String>> {
        vec![None; n]
    }

    #[test]
    fn exact_stratification() {
        let labels: Vec<usize> = [0; 5].into_iter().chain([1; 5]).collect();
        let folds = stratified_kfold(&labels, &no_groups(10), 5, 0, false).unwrap();
        for f in &folds {
            assert_eq!(f.test.len(), 2);
            let mut l: Vec<usize> = f.test.iter().map(|&i| labels[i]).collect();
            l.sort();
            assert_eq!(l, [0, 1]);
        }
    }

    #[test]
    fn rotation_layout() {
        let labels = vec![0; 12];
        let folds = stratified_kfold(&labels, &no_groups(12), 4, 3, false).unwrap();
        for f in &folds {
            assert_eq!(f.val, folds[(f.index + 1) % 4].test);
            assert_eq!(f.train.len() + f.val.len() + f.test.len(), 12);
        }
    }

    #[test]
    fn groups_stay_whole() {
        let labels: Vec<usize> = (0..30).map(|i| (i / 3) % 2).collect();
        let groups: Vec<Option<String>> = (0..30).map(|i| Some(format!("g{}", i / 3))).collect();
        let folds = stratified_kfold(&labels, &groups, 5, 1, true).unwrap();
        for f in &folds {
            assert_eq!(f.test.len(), 6);
            let mut gs: Vec<&str> = f.test.iter().map(|&i| groups[i].as_deref().unwrap()).collect();
            gs.dedup();
            assert_eq!(gs.len(), 2);
        }
    }

    #[test]
    fn too_few() {
        let labels = vec![0, 0, 1, 1, 1];
        assert!(matches!(
            stratified_kfold(&labels, &no_groups(5), 3, 0, false),
            Err(Error::TooFewSamples { .. })
        ));
        assert!(stratified_kfold(&labels, &no_groups(5), 1, 0, false).is_err());
    }

    proptest! {
        #[test]
        fn partition_laws(labels in prop::collection::vec(0usize..4, 40..120), k in 2usize..=10, seed in 0u64..1000) {
            let mut counts = [0usize; 4];
            for &l in &labels { counts[l] += 1; }
            prop_assume!(counts.iter().all(|&c| c == 0 || c >= k));
            let folds = stratified_kfold(&labels, &no_groups(labels.len()), k, seed, false).unwrap();
            let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.iter().copied()).collect();
            all.sort();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            for f in &folds {
                for (class, &total) in counts.iter().enumerate() {
                    let got = f.test.iter().filter(|&&i| labels[i] == class).count() as f64;
                    let ideal = total as f64 / k as f64;
                    prop_assert!((got - ideal).abs() < 1.0 + 1e-9);
                }
            }
            let again = stratified_kfold(&labels, &no_groups(labels.len()), k, seed, false).unwrap();
            prop_assert_eq!(folds, again);
        }
    }
}
