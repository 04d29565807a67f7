//! Accuracy metrics and the held-out evaluation protocol.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{LengthPredictor, PredictionSource, PredictorConfig, MIN_CORPUS};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::workload::Request;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub predicted: u32,
    pub actual: u32,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Fraction of pairs whose predicted and actual lengths share a bin
    /// `[i*w, (i+1)*w)`.
    pub accuracy: f64,
    /// Mean of `|pred - actual| / actual`.
    pub pred_error: f64,
    pub mean_latency_ms: f64,
    pub count: usize,
}

pub fn eval_accuracy(outcomes: &[PredictionOutcome], bin_width: u32) -> Result<AccuracyReport> {
    if outcomes.is_empty() {
        return Err(Error::Empty("prediction outcomes"));
    }
    if bin_width == 0 {
        return Err(Error::InvalidParameter("bin width must be >= 1".into()));
    }
    let n = outcomes.len() as f64;
    let same_bin = outcomes
        .iter()
        .filter(|o| o.predicted / bin_width == o.actual / bin_width)
        .count();
    let rel_err: f64 = outcomes
        .iter()
        .map(|o| (o.predicted as f64 - o.actual as f64).abs() / o.actual.max(1) as f64)
        .sum();
    Ok(AccuracyReport {
        accuracy: same_bin as f64 / n,
        pred_error: rel_err / n,
        mean_latency_ms: outcomes.iter().map(|o| o.latency_ms).sum::<f64>() / n,
        count: outcomes.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    #[serde(flatten)]
    pub metrics: AccuracyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictEvalReport {
    pub n_train: usize,
    pub n_test: usize,
    pub bin_width: u32,
    pub split_seed: u64,
    pub similarity_threshold: f64,
    pub top_k: usize,
    pub methods: Vec<MethodReport>,
    /// Share of test prompts answered from the database.
    pub retrieval_hit_rate: f64,
    /// Mean modeled latency of retrieval-based predictions that hit.
    pub hit_path_latency_ms: Option<f64>,
    /// Mean modeled latency of retrieval-based predictions that fell back.
    pub fallback_path_latency_ms: Option<f64>,
}

/// Splits `corpus` into a training/database part and a test part, then
/// scores the retrieval-based predictor against the regressor alone.
///
/// With `online_update` the database learns each test request's true
/// length after predicting it, as a live deployment would on completion.
pub fn predict_eval(
    corpus: &[Request],
    config: &PredictorConfig,
    train_fraction: f64,
    split_seed: u64,
    bin_width: u32,
    online_update: bool,
) -> Result<PredictEvalReport> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParameter("train fraction must be in (0, 1)".into()));
    }
    let mut order: Vec<&Request> = corpus.iter().collect();
    order.shuffle(&mut rng::component_rng(split_seed, stream::EVAL_SPLIT));
    let n_train = (order.len() as f64 * train_fraction).round() as usize;
    if n_train < MIN_CORPUS || n_train >= order.len() {
        return Err(Error::CorpusTooSmall {
            got: corpus.len(),
            need: MIN_CORPUS + 1,
        });
    }
    let (train, test) = order.split_at(n_train);
    let train: Vec<Request> = train.iter().map(|r| (*r).clone()).collect();

    let mut config = config.clone();
    config.fallback.seed = rng::derive_seed(split_seed, stream::FALLBACK_INIT);
    let mut predictor = LengthPredictor::<f64>::train(config.clone(), &train, true)?;

    let mut retrieval = Vec::with_capacity(test.len());
    let mut fallback_only = Vec::with_capacity(test.len());
    let (mut hit_lat, mut fb_lat) = (Vec::new(), Vec::new());
    for r in test {
        let (v, p) = predictor.predict_request(r)?;
        let latency_ms = predictor.modeled_latency_ms(p.ops);
        match p.source {
            PredictionSource::Retrieved => hit_lat.push(latency_ms),
            PredictionSource::Fallback => fb_lat.push(latency_ms),
        }
        retrieval.push(PredictionOutcome {
            predicted: p.length,
            actual: r.output_len,
            latency_ms,
        });
        let f = predictor.predict_fallback_only(r)?;
        fallback_only.push(PredictionOutcome {
            predicted: f.length,
            actual: r.output_len,
            latency_ms: predictor.modeled_latency_ms(f.ops),
        });
        if online_update {
            predictor.update(v, r.output_len)?;
        }
    }
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    Ok(PredictEvalReport {
        n_train,
        n_test: test.len(),
        bin_width,
        split_seed,
        similarity_threshold: config.similarity_threshold,
        top_k: config.top_k,
        methods: vec![
            MethodReport {
                method: "retrieval".into(),
                metrics: eval_accuracy(&retrieval, bin_width)?,
            },
            MethodReport {
                method: "fallback_only".into(),
                metrics: eval_accuracy(&fallback_only, bin_width)?,
            },
        ],
        retrieval_hit_rate: hit_lat.len() as f64 / test.len() as f64,
        hit_path_latency_ms: mean(&hit_lat),
        fallback_path_latency_ms: mean(&fb_lat),
    })
}
