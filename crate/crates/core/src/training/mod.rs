//! Contrastive training of both towers and validation-based model selection.

mod adam;
mod batches;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::Adam;
pub use batches::{build_batches, expand_instances, TrainingInstance};

use crate::data::DatasetBundle;
use crate::encoders::seeded_rng;
use crate::features::{FeatureError, FeatureStore};
use crate::model::graph::Graph;
use crate::model::{ImageFeatures, Matrix, ModelError, RankerModel, TextFeatureBundle};
use crate::retrieval::{evaluate, EvalReport, RetrievalError};
use crate::types::FetchCarrySample;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid loss input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss in batch {batch} (max |sim| {max_abs_sim})")]
    NonFinite { batch: usize, max_abs_sim: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Text-to-image InfoNCE: the mean over rows of `-log softmax(row)[i]`, the
/// positive of row `i` being column `i`. Logits are already divided by the
/// temperature.
pub fn info_nce_loss(sims: &Matrix) -> Result<f64, TrainError> {
    let (rows, cols) = sims.shape();
    if rows != cols || rows == 0 {
        return Err(TrainError::InvalidInput(format!(
            "logits must be square and non-empty, got {rows}x{cols}"
        )));
    }
    if !sims.is_finite() {
        return Err(TrainError::InvalidInput(
            "logits contain non-finite entries".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..rows {
        let row = sims.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    Ok(total / rows as f64)
}

/// Weights, optimizer moments and the best checkpoint seen so far.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: RankerModel,
    pub optimizer: Adam,
    pub epoch: usize,
    pub best_score: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best: Option<RankerModel>,
}

impl TrainState {
    pub fn new(model: RankerModel) -> Self {
        let optimizer = Adam::from_config(&model.config);
        Self {
            model,
            optimizer,
            epoch: 0,
            best_score: None,
            best_epoch: None,
            best: None,
        }
    }
}

fn batch_loss<'a>(
    model: &'a RankerModel,
    g: &mut Graph<'a>,
    texts: &[&TextFeatureBundle],
    images: &[&ImageFeatures],
    rng: &mut ChaCha8Rng,
) -> Result<(crate::model::graph::Var, f64), TrainError> {
    let t = model.spe.forward_graph(g, texts, Some(&mut *rng))?;
    let i = model.sare.forward_graph(g, images, Some(&mut *rng))?;
    let t = g.l2_normalize_rows(t);
    let i = g.l2_normalize_rows(i);
    let sims = g.matmul_t(t, i);
    let max_abs = g
        .value(sims)
        .data()
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let logits = g.scale(sims, 1.0 / model.config.temperature);
    Ok((g.info_nce(logits), max_abs))
}

/// One Adam step per batch; returns the mean batch loss.
pub fn train_epoch(
    state: &mut TrainState,
    batches: &[Vec<TrainingInstance>],
    features: &FeatureStore,
) -> Result<f64, TrainError> {
    let mut rng = seeded_rng(
        state.model.config.seed,
        "dropout",
        &(state.epoch as u64).to_le_bytes(),
    );
    let mut total = 0.0;
    for (b, batch) in batches.iter().enumerate() {
        let texts = batch
            .iter()
            .map(|inst| features.bundle(&inst.instruction_id, inst.mode))
            .collect::<Result<Vec<_>, _>>()?;
        let images = batch
            .iter()
            .map(|inst| features.image(&inst.positive_image_id))
            .collect::<Result<Vec<_>, _>>()?;
        let grads = {
            let mut g = Graph::new();
            let (loss, max_abs_sim) = batch_loss(&state.model, &mut g, &texts, &images, &mut rng)?;
            let value = g.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    batch: b,
                    max_abs_sim,
                });
            }
            total += value;
            g.backward(loss)
        };
        state.optimizer.step(&mut state.model, &grads);
    }
    state.epoch += 1;
    Ok(if batches.is_empty() {
        0.0
    } else {
        total / batches.len() as f64
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mrr: f64,
    pub val_r10: f64,
    /// Whether this epoch's weights became the selected checkpoint.
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub best: RankerModel,
    pub last: RankerModel,
    pub best_report: EvalReport,
}

/// Trains for `config.epochs` epochs, evaluating on `val` after each and
/// keeping the weights with the highest mean recall@10 plus mean MRR.
/// `on_epoch` sees every record as soon as it exists.
pub fn fit(
    model: RankerModel,
    dataset: &DatasetBundle,
    train: &[&FetchCarrySample],
    val: &[&FetchCarrySample],
    features: &FeatureStore,
    mut on_epoch: impl FnMut(&EpochRecord, &TrainState),
) -> Result<FitReport, TrainError> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config(format!(
            "train ({}) and validation ({}) splits must be non-empty",
            train.len(),
            val.len()
        )));
    }
    let config = model.config.clone();
    let mut state = TrainState::new(model);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best_report = None;
    for epoch in 0..config.epochs {
        let batches = build_batches(train, config.batch_size, config.seed, epoch as u64);
        let train_loss = train_epoch(&mut state, &batches, features)?;
        let report = evaluate(&state.model, dataset, val, features, &[10])?;
        let score = report.selection_score();
        let selected = state.best_score.is_none_or(|b| score > b);
        if selected {
            state.best_score = Some(score);
            state.best_epoch = Some(epoch);
            state.best = Some(state.model.clone());
            best_report = Some(report.clone());
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_mrr: report.mean_mrr,
            val_r10: report.mean_recall_at[&10],
            selected,
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.4} val mrr {:.4} r@10 {:.4}{}",
            record.val_mrr,
            record.val_r10,
            if selected { " *" } else { "" }
        );
        on_epoch(&record, &state);
        history.push(record);
    }
    Ok(FitReport {
        history,
        best_epoch: state.best_epoch.expect("at least one epoch"),
        best_score: state.best_score.expect("at least one epoch"),
        best: state.best.expect("at least one epoch"),
        last: state.model,
        best_report: best_report.expect("at least one epoch"),
    })
}
