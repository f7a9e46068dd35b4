//! End-to-end runs on a synthetic dataset: embed, match with and without the
//! ratio filter, evaluate, and sweep the hard-negative fraction.

use std::collections::BTreeSet;

use crate::descriptor::{Descriptor, ImageId, Prediction};
use crate::encoder::{embed, EncoderParams};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, sweep_hard_negatives, EvalReport, GroundTruth, SweepPoint};
use crate::matcher::{build_index, match_all, MatchConfig};
use crate::synth::{build_dataset, Dataset, DatasetManifest, SynthConfig};
use crate::trainer::{train, TrainConfig, TrainMode, TrainOutcome};

pub const SWEEP_FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Embeds the listed images, rounding to storage precision.
pub fn embed_images(params: &EncoderParams, dataset: &Dataset, ids: &[ImageId]) -> Result<Vec<Descriptor>> {
    let images: Vec<_> = ids.iter().map(|&id| dataset.image(id)).collect();
    let emb = embed(params, &images)?;
    ids.iter()
        .zip(emb.rows())
        .map(|(&id, row)| Descriptor::from_f64(id, row.as_slice().expect("contiguous")))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Embedded {
    pub references: Vec<Descriptor>,
    pub queries: Vec<Descriptor>,
}

pub fn embed_splits(params: &EncoderParams, dataset: &Dataset) -> Result<Embedded> {
    Ok(Embedded {
        references: embed_images(params, dataset, &dataset.manifest.references)?,
        queries: embed_images(params, dataset, &dataset.manifest.queries)?,
    })
}

/// Matches every query; any per-query failure aborts the run.
pub fn predict(embedded: &Embedded, cfg: &MatchConfig) -> Result<Vec<Prediction>> {
    cfg.validate()?;
    let index = build_index(embedded.references.clone())?;
    let mut out = match_all(&embedded.queries, &index, cfg);
    match out.failures.pop() {
        Some((_, e)) => Err(e),
        None => Ok(out.predictions),
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub unfiltered: EvalReport,
    pub filtered: EvalReport,
    /// µAP per hard-negative fraction, filter disabled.
    pub sweep: Vec<SweepPoint>,
}

/// Queries that are not hard negatives, and the hard-negative pool in
/// manifest order.
pub fn query_split(manifest: &DatasetManifest) -> (BTreeSet<ImageId>, Vec<ImageId>) {
    let pool = manifest.hard_negative_query_ids.clone();
    let hard: BTreeSet<ImageId> = pool.iter().copied().collect();
    let base = manifest.queries.iter().copied().filter(|q| !hard.contains(q)).collect();
    (base, pool)
}

pub fn evaluate_params(params: &EncoderParams, dataset: &Dataset, cfg: &MatchConfig) -> Result<BenchmarkResult> {
    let embedded = embed_splits(params, dataset)?;
    let gt: GroundTruth = dataset.manifest.ground_truth();
    let off = MatchConfig {
        filter_enabled: false,
        ..*cfg
    };
    let on = MatchConfig {
        filter_enabled: true,
        ..*cfg
    };
    let preds_off = predict(&embedded, &off)?;
    let preds_on = predict(&embedded, &on)?;
    let (base, pool) = query_split(&dataset.manifest);
    Ok(BenchmarkResult {
        unfiltered: evaluate(&preds_off, &gt, None)?,
        filtered: evaluate(&preds_on, &gt, None)?,
        sweep: sweep_hard_negatives(&preds_off, &gt, &base, &pool, &SWEEP_FRACTIONS)?,
    })
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub matching: MatchConfig,
}

impl BenchmarkConfig {
    /// The standard benchmark: default dataset, training, and matching
    /// settings with every seed set to `seed`.
    pub fn standard(seed: u64, mode: TrainMode) -> Self {
        Self {
            synth: SynthConfig {
                seed,
                ..SynthConfig::default()
            },
            train: TrainConfig {
                seed,
                mode,
                ..TrainConfig::default()
            },
            matching: MatchConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub dataset: Dataset,
    pub training: TrainOutcome,
    pub result: BenchmarkResult,
}

pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkRun> {
    let dataset = build_dataset(&cfg.synth)?;
    if dataset.manifest.ground_truth().is_empty() {
        return Err(Error::config(
            "pos_queries",
            "benchmark needs at least one positive query",
        ));
    }
    let training = train(&cfg.train, &dataset)?;
    let result = evaluate_params(&training.params, &dataset, &cfg.matching)?;
    Ok(BenchmarkRun {
        dataset,
        training,
        result,
    })
}
