use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetBundle, Splits};
use crate::encoders::seeded_rng;

/// Fraction of environments assigned to each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test_hm3d: f64,
    pub test_mp3d: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test_hm3d: 0.1,
            test_mp3d: 0.0,
        }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 4] {
        [self.train, self.val, self.test_hm3d, self.test_mp3d]
    }
}

/// Environment counts per split by largest remainder, every non-zero ratio
/// receiving at least one environment.
fn allocate(n: usize, ratios: [f64; 4]) -> [usize; 4] {
    let mut counts = [0usize; 4];
    let mut remainders = Vec::new();
    for (i, r) in ratios.iter().enumerate() {
        let exact = r * n as f64;
        counts[i] = exact.floor() as usize;
        remainders.push((exact - exact.floor(), i));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = n - counts.iter().sum::<usize>();
    for &(_, i) in &remainders {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..4 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..4)
                .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                .unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

/// Partitions environments (never samples) into the four splits.
pub fn split_dataset(
    bundle: &DatasetBundle,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Splits, DataError> {
    let r = ratios.as_array();
    if r.iter().any(|x| !(0.0..=1.0).contains(x)) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!(
            "ratios {r:?} must lie in [0, 1] and sum to 1"
        )));
    }
    let mut envs: Vec<&str> = bundle.environments().into_iter().collect();
    let non_empty = r.iter().filter(|x| **x > 0.0).count();
    if envs.len() < non_empty {
        return Err(DataError::Split(format!(
            "{} environments cannot fill {non_empty} non-empty splits",
            envs.len()
        )));
    }
    envs.shuffle(&mut seeded_rng(seed, "split", b""));
    let counts = allocate(envs.len(), r);

    let mut assignment = BTreeMap::new();
    let mut offset = 0;
    for (slot, &count) in counts.iter().enumerate() {
        for env in &envs[offset..offset + count] {
            assignment.insert(*env, slot);
        }
        offset += count;
    }
    let mut lists: [Vec<String>; 4] = Default::default();
    for s in &bundle.samples {
        if let Some(&slot) = assignment.get(s.environment_id.as_str()) {
            lists[slot].push(s.instruction_id.clone());
        }
    }
    let [train, val, test_hm3d, test_mp3d] = lists;
    Ok(Splits {
        train,
        val,
        test_hm3d,
        test_mp3d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_counts() {
        assert_eq!(allocate(10, [0.8, 0.1, 0.1, 0.0]), [8, 1, 1, 0]);
        assert_eq!(allocate(7, [0.5, 0.25, 0.25, 0.0]), [3, 2, 2, 0]);
        assert_eq!(allocate(3, [0.9, 0.05, 0.05, 0.0]), [1, 1, 1, 0]);
        assert_eq!(allocate(24, [0.7, 0.1, 0.1, 0.1]).iter().sum::<usize>(), 24);
    }
}
