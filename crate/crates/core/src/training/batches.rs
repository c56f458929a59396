use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::seeded_rng;
use crate::types::{FetchCarrySample, ModeToken};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub mode: ModeToken,
    pub instruction_id: String,
    pub positive_image_id: String,
    pub environment_id: String,
}

/// Each sample yields a target-mode and a receptacle-mode instance.
pub fn expand_instances(samples: &[&FetchCarrySample]) -> Vec<TrainingInstance> {
    samples
        .iter()
        .flat_map(|s| {
            ModeToken::ALL.map(|mode| TrainingInstance {
                mode,
                instruction_id: s.instruction_id.clone(),
                positive_image_id: s.positive_for(mode).to_string(),
                environment_id: s.environment_id.clone(),
            })
        })
        .collect()
}

/// Shuffles all instances with a seed derived from `(seed, epoch)` and packs
/// them into batches whose positive images are pairwise distinct. An
/// instance that would repeat a positive waits for a later batch.
pub fn build_batches(
    samples: &[&FetchCarrySample],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<TrainingInstance>> {
    let mut instances = expand_instances(samples);
    instances.shuffle(&mut seeded_rng(seed, "batches", &epoch.to_le_bytes()));
    let batch_size = batch_size.max(1);
    let mut queue: VecDeque<TrainingInstance> = instances.into();
    let mut batches = Vec::new();
    while !queue.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut positives = BTreeSet::new();
        let mut deferred = VecDeque::new();
        while let Some(inst) = queue.pop_front() {
            if batch.len() == batch_size {
                queue.push_front(inst);
                break;
            }
            if positives.insert(inst.positive_image_id.clone()) {
                batch.push(inst);
            } else {
                deferred.push_back(inst);
            }
        }
        deferred.append(&mut queue);
        queue = deferred;
        batches.push(batch);
    }
    batches
}
