//! Dual-mode ranking over an environment's images and the evaluation metrics.

mod metrics;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{
    mrr, recall_at_k, success_rate, MetricError, Phase, QueryResult, SuccessCounter,
};

use crate::data::DatasetBundle;
use crate::encoders::Providers;
use crate::features::{FeatureError, FeatureStore};
use crate::model::{
    build_text_bundle, similarity, ImageFeatures, ModelError, RankerModel, TextFeatureBundle,
};
use crate::types::{FetchCarrySample, InstructionRecord, MetricsReport, ModeToken, RankedList};

/// Recall cut-offs reported by default.
pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];
/// Rank beyond which a query counts as a miss in capped MRR.
pub const MRR_CAP: usize = 10;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no candidate images")]
    NoCandidates,
    #[error("candidates span environments {0:?}")]
    MixedEnvironments(Vec<String>),
    #[error("candidate {id}: {source}")]
    Candidate { id: String, source: ModelError },
    #[error("environment {environment} has {count} images; ranking needs at least 2")]
    SmallPool { environment: String, count: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// One image offered for ranking, with its frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub image_id: String,
    pub environment_id: String,
    pub features: ImageFeatures,
}

/// Image-side embeddings of one candidate pool, computed once and shared by
/// both modes.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub environment_id: String,
    pub image_ids: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl CandidateSet {
    pub fn encode(model: &RankerModel, candidates: &[Candidate]) -> Result<Self, RetrievalError> {
        let first = candidates.first().ok_or(RetrievalError::NoCandidates)?;
        let envs: BTreeSet<&str> = candidates
            .iter()
            .map(|c| c.environment_id.as_str())
            .collect();
        if envs.len() > 1 {
            return Err(RetrievalError::MixedEnvironments(
                envs.into_iter().map(String::from).collect(),
            ));
        }
        let features: Vec<ImageFeatures> = candidates.iter().map(|c| c.features.clone()).collect();
        let embeddings = model.encode_images(&features)?;
        Ok(Self {
            environment_id: first.environment_id.clone(),
            image_ids: candidates.iter().map(|c| c.image_id.clone()).collect(),
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    /// Scores every candidate against `h_txt`.
    pub fn rank(&self, mode: ModeToken, h_txt: &[f64]) -> Result<RankedList, RetrievalError> {
        let mut scores = Vec::with_capacity(self.len());
        for (id, h_img) in self.image_ids.iter().zip(&self.embeddings) {
            let s = similarity(h_txt, h_img).map_err(|source| RetrievalError::Candidate {
                id: id.clone(),
                source,
            })?;
            scores.push((id.clone(), s));
        }
        Ok(RankedList::from_scores(mode, scores))
    }
}

fn text_embedding(
    model: &RankerModel,
    bundle: &TextFeatureBundle,
) -> Result<Vec<f64>, RetrievalError> {
    Ok(model.encode_texts(std::slice::from_ref(bundle))?.remove(0))
}

/// Ranks `candidates` for one mode of a processed instruction.
pub fn rank(
    model: &RankerModel,
    mode: ModeToken,
    instruction: &InstructionRecord,
    candidates: &[Candidate],
    providers: &Providers,
) -> Result<RankedList, RetrievalError> {
    let set = CandidateSet::encode(model, candidates)?;
    let bundle = build_text_bundle(mode, instruction, providers.text.as_ref(), &model.config)?;
    set.rank(mode, &text_embedding(model, &bundle)?)
}

/// Target-mode and receptacle-mode rankings over the same candidates; the
/// image side is encoded once.
pub fn dual_rank(
    model: &RankerModel,
    instruction: &InstructionRecord,
    candidates: &[Candidate],
    providers: &Providers,
) -> Result<(RankedList, RankedList), RetrievalError> {
    let set = CandidateSet::encode(model, candidates)?;
    dual_rank_encoded(model, instruction, &set, providers)
}

/// [`dual_rank`] over an already encoded candidate pool.
pub fn dual_rank_encoded(
    model: &RankerModel,
    instruction: &InstructionRecord,
    set: &CandidateSet,
    providers: &Providers,
) -> Result<(RankedList, RankedList), RetrievalError> {
    let bundles = ModeToken::ALL
        .iter()
        .map(|&m| build_text_bundle(m, instruction, providers.text.as_ref(), &model.config))
        .collect::<Result<Vec<_>, _>>()?;
    let h = model.encode_texts(&bundles)?;
    Ok((
        set.rank(ModeToken::Target, &h[0])?,
        set.rank(ModeToken::Receptacle, &h[1])?,
    ))
}

/// Metrics of one split: per mode, averaged over modes, and capped MRR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Number of instructions; each contributes one query per mode.
    pub query_count: usize,
    pub modes: BTreeMap<String, MetricsReport>,
    pub capped_mrr: BTreeMap<String, f64>,
    pub mean_mrr: f64,
    pub mean_recall_at: BTreeMap<usize, f64>,
}

impl EvalReport {
    /// Mean recall@10 plus mean MRR, the checkpoint-selection score.
    pub fn selection_score(&self) -> f64 {
        self.mean_recall_at.get(&10).copied().unwrap_or(0.0) + self.mean_mrr
    }

    pub fn mode(&self, mode: ModeToken) -> &MetricsReport {
        &self.modes[mode.name()]
    }
}

/// Ranks every sample's environment pool in both modes.
pub fn evaluate_queries(
    model: &RankerModel,
    dataset: &DatasetBundle,
    samples: &[&FetchCarrySample],
    features: &FeatureStore,
) -> Result<Vec<QueryResult>, RetrievalError> {
    let mut pools: BTreeMap<&str, CandidateSet> = BTreeMap::new();
    for s in samples {
        if pools.contains_key(s.environment_id.as_str()) {
            continue;
        }
        let records = dataset.environment_images(&s.environment_id);
        if records.len() < 2 {
            return Err(RetrievalError::SmallPool {
                environment: s.environment_id.clone(),
                count: records.len(),
            });
        }
        let candidates = records
            .iter()
            .map(|r| {
                Ok(Candidate {
                    image_id: r.id.clone(),
                    environment_id: r.environment_id.clone(),
                    features: features.image(&r.id)?.clone(),
                })
            })
            .collect::<Result<Vec<_>, FeatureError>>()?;
        pools.insert(&s.environment_id, CandidateSet::encode(model, &candidates)?);
    }

    let mut bundles = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        for m in ModeToken::ALL {
            bundles.push(features.bundle(&s.instruction_id, m)?.clone());
        }
    }
    let h = model.encode_texts(&bundles)?;

    let mut results = Vec::with_capacity(bundles.len());
    for (i, s) in samples.iter().enumerate() {
        let pool = &pools[s.environment_id.as_str()];
        for (j, m) in ModeToken::ALL.into_iter().enumerate() {
            let ranked = pool.rank(m, &h[2 * i + j])?;
            let relevant = BTreeSet::from([s.positive_for(m).to_string()]);
            results.push(QueryResult::new(
                s.instruction_id.clone(),
                m,
                ranked,
                relevant,
            )?);
        }
    }
    Ok(results)
}

/// Aggregates query results into per-mode and mode-averaged metrics.
pub fn summarize(results: &[QueryResult], ks: &[usize]) -> Result<EvalReport, RetrievalError> {
    let mut modes = BTreeMap::new();
    let mut capped = BTreeMap::new();
    for m in ModeToken::ALL {
        let subset: Vec<QueryResult> = results.iter().filter(|q| q.mode == m).cloned().collect();
        let recall_at = ks
            .iter()
            .map(|&k| Ok((k, recall_at_k(&subset, k)?)))
            .collect::<Result<BTreeMap<_, _>, MetricError>>()?;
        capped.insert(m.name().to_string(), mrr(&subset, Some(MRR_CAP))?);
        modes.insert(
            m.name().to_string(),
            MetricsReport {
                query_count: subset.len(),
                mrr: mrr(&subset, None)?,
                recall_at,
                per_query_best_rank: subset.iter().map(|q| q.best_rank).collect(),
            },
        );
    }
    let n = modes.len() as f64;
    let mean_mrr = modes.values().map(|r: &MetricsReport| r.mrr).sum::<f64>() / n;
    let mean_recall_at = ks
        .iter()
        .map(|k| {
            (
                *k,
                modes
                    .values()
                    .map(|r: &MetricsReport| r.recall_at[k])
                    .sum::<f64>()
                    / n,
            )
        })
        .collect();
    Ok(EvalReport {
        query_count: modes
            .values()
            .next()
            .map_or(0, |r: &MetricsReport| r.query_count),
        modes,
        capped_mrr: capped,
        mean_mrr,
        mean_recall_at,
    })
}

pub fn evaluate(
    model: &RankerModel,
    dataset: &DatasetBundle,
    samples: &[&FetchCarrySample],
    features: &FeatureStore,
    ks: &[usize],
) -> Result<EvalReport, RetrievalError> {
    summarize(&evaluate_queries(model, dataset, samples, features)?, ks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbeddingRow {
    pub instruction_id: String,
    pub mode: ModeToken,
    pub h_txt: Vec<f64>,
    /// Word count of the raw instruction.
    pub sentence_length: usize,
}

/// `h_txt` in both modes for every processed instruction.
pub fn export_text_embeddings(
    model: &RankerModel,
    instructions: &[InstructionRecord],
    providers: &Providers,
) -> Result<Vec<TextEmbeddingRow>, RetrievalError> {
    let mut bundles = Vec::with_capacity(instructions.len() * 2);
    for instr in instructions {
        for m in ModeToken::ALL {
            bundles.push(build_text_bundle(
                m,
                instr,
                providers.text.as_ref(),
                &model.config,
            )?);
        }
    }
    let h = model.encode_texts(&bundles)?;
    let mut h = h.into_iter();
    let mut rows = Vec::with_capacity(bundles.len());
    for instr in instructions {
        for m in ModeToken::ALL {
            rows.push(TextEmbeddingRow {
                instruction_id: instr.id.clone(),
                mode: m,
                h_txt: h.next().expect("one embedding per bundle"),
                sentence_length: instr.raw_text.split_whitespace().count(),
            });
        }
    }
    Ok(rows)
}
