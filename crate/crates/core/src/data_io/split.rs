use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Subject-wise split. `test_fraction` of the distinct subjects (rounded,
/// at least one) go to test, the same number to validation, the rest to
/// training.
pub fn split_subjects(samples: &[Sample], test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "test_fraction {test_fraction} not in (0, 1)"
        )));
    }
    let subjects: BTreeSet<&str> = samples.iter().map(|s| s.subject_id.as_str()).collect();
    let n = subjects.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 distinct subjects, found {n}"
        )));
    }
    let mut order: Vec<&str> = subjects.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let held = ((n as f64 * test_fraction).round() as usize).clamp(1, (n - 1) / 2);
    let test: BTreeSet<&str> = order[..held].iter().copied().collect();
    let val: BTreeSet<&str> = order[held..2 * held].iter().copied().collect();

    let mut split = Split::default();
    for s in samples {
        let id = s.subject_id.as_str();
        if test.contains(id) {
            split.test.push(s.clone());
        } else if val.contains(id) {
            split.val.push(s.clone());
        } else {
            split.train.push(s.clone());
        }
    }
    Ok(split)
}
