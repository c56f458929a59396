use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ModeToken, RankedList};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("no query results")]
    Empty,
    #[error("K must be at least 1")]
    ZeroK,
    #[error("query {0} has no relevant images")]
    NoRelevant(String),
    #[error("query {query}: relevant image {image} is not among the candidates")]
    NotRanked { query: String, image: String },
    #[error("{successes} successes out of {attempts} attempts")]
    Counter { successes: u64, attempts: u64 },
}

/// One ranked query with its relevant set `A` and best relevant rank `r_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub instruction_id: String,
    pub mode: ModeToken,
    pub ranked: RankedList,
    pub relevant_ids: BTreeSet<String>,
    pub best_rank: usize,
}

impl QueryResult {
    pub fn new(
        instruction_id: impl Into<String>,
        mode: ModeToken,
        ranked: RankedList,
        relevant_ids: BTreeSet<String>,
    ) -> Result<Self, MetricError> {
        let instruction_id = instruction_id.into();
        if relevant_ids.is_empty() {
            return Err(MetricError::NoRelevant(instruction_id));
        }
        let mut best = usize::MAX;
        for id in &relevant_ids {
            match ranked.rank_of(id) {
                Some(r) => best = best.min(r),
                None => {
                    return Err(MetricError::NotRanked {
                        query: instruction_id,
                        image: id.clone(),
                    })
                }
            }
        }
        Ok(Self {
            instruction_id,
            mode,
            ranked,
            relevant_ids,
            best_rank: best,
        })
    }
}

/// Mean of `1/r_1`. With a cap, queries whose `r_1` exceeds it contribute 0.
pub fn mrr(results: &[QueryResult], cap: Option<usize>) -> Result<f64, MetricError> {
    if results.is_empty() {
        return Err(MetricError::Empty);
    }
    let sum: f64 = results
        .iter()
        .map(|q| match cap {
            Some(c) if q.best_rank > c => 0.0,
            _ => 1.0 / q.best_rank as f64,
        })
        .sum();
    Ok(sum / results.len() as f64)
}

/// Mean over queries of `|A ∩ top-K| / |A|`.
pub fn recall_at_k(results: &[QueryResult], k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if results.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sum = 0.0;
    for q in results {
        if q.relevant_ids.is_empty() {
            return Err(MetricError::NoRelevant(q.instruction_id.clone()));
        }
        let hits = q
            .ranked
            .ids()
            .take(k)
            .filter(|id| q.relevant_ids.contains(*id))
            .count();
        sum += hits as f64 / q.relevant_ids.len() as f64;
    }
    Ok(sum / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fetching,
    Carrying,
    Overall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessCounter {
    pub successes: u64,
    pub attempts: u64,
    pub phase: Phase,
}

impl SuccessCounter {
    pub fn new(phase: Phase, successes: u64, attempts: u64) -> Result<Self, MetricError> {
        if successes > attempts {
            return Err(MetricError::Counter {
                successes,
                attempts,
            });
        }
        Ok(Self {
            successes,
            attempts,
            phase,
        })
    }

    pub fn record(&mut self, success: bool) {
        self.attempts += 1;
        self.successes += u64::from(success);
    }
}

/// `N_s / N_a`; undefined without attempts.
pub fn success_rate(counter: &SuccessCounter) -> Result<f64, MetricError> {
    if counter.attempts == 0 || counter.successes > counter.attempts {
        return Err(MetricError::Counter {
            successes: counter.successes,
            attempts: counter.attempts,
        });
    }
    Ok(counter.successes as f64 / counter.attempts as f64)
}
