//! Grouped, farm-stratified K-fold assignment of fields.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldDescriptor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// field_id → fold index
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, field_id: &str) -> Option<usize> {
        self.folds.get(field_id).copied()
    }

    /// Field ids of one fold, sorted.
    pub fn fields_in(&self, fold: usize) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// The training fold held out for early stopping when `test` is the test fold.
    pub fn early_stopping_fold(&self, test: usize) -> usize {
        if test == 0 {
            1
        } else {
            0
        }
    }
}

/// Greedy deterministic assignment. Farms are visited largest first (ties by
/// id); a farm's fields, shuffled by `seed`, each go to the fold minimizing
/// (fields of this farm already there, fold size, fold index).
pub fn make_folds(fields: &[FieldDescriptor], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Eval(format!("need at least 2 folds, got {k}")));
    }
    if fields.len() < k {
        return Err(Error::TooFewFields { n: fields.len(), k });
    }
    crate::field::validate_fields(fields)?;
    let mut farms: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for f in fields {
        farms.entry(&f.farm_id).or_default().push(&f.field_id);
    }
    let mut farms: Vec<(&str, Vec<&str>)> = farms.into_iter().collect();
    farms.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut size = vec![0usize; k];
    let mut folds = BTreeMap::new();
    for (_, mut ids) in farms {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let mut farm_count = vec![0usize; k];
        for id in ids {
            let f = (0..k).min_by_key(|f| (farm_count[*f], size[*f], *f)).unwrap();
            farm_count[f] += 1;
            size[f] += 1;
            folds.insert(id.to_string(), f);
        }
    }
    Ok(FoldAssignment { k, seed, folds })
}
