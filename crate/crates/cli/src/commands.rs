use std::fs;
use std::path::Path;

use asl_core::benchmark::{embed_images, query_split};
use asl_core::descriptor::{read_descriptors, write_descriptors};
use asl_core::encoder::{read_checkpoint, write_checkpoint};
use asl_core::evaluator::{
    compare_reports, evaluate, read_report_json, sweep_csv, sweep_hard_negatives, sweep_svg, write_report_json,
};
use asl_core::matcher::{build_index, match_all, read_predictions_csv, write_predictions_csv, MatchConfig};
use asl_core::synth::{build_dataset, load_dataset, read_ground_truth, read_manifest, write_dataset, SynthConfig};
use asl_core::trainer::{train as train_encoder, write_log_csv, TrainConfig};
use asl_core::Error;

use crate::Failure;

const REFS_FILE: &str = "refs.asld";
const QUERIES_FILE: &str = "queries.asld";

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| {
        Failure::from(Error::Io {
            path: path.into(),
            source: e,
        })
    })
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| {
        Failure::from(Error::Io {
            path: dir.into(),
            source: e,
        })
    })
}

pub fn gen_data(config: &SynthConfig, out: &Path) -> Result<(), Failure> {
    let dataset = build_dataset(config)?;
    write_dataset(&dataset, out)?;
    let m = &dataset.manifest;
    println!("references {}", m.references.len());
    println!(
        "queries {} (positive {}, easy negative {}, hard negative {})",
        m.queries.len(),
        config.pos_queries,
        config.easy_neg,
        config.hard_neg
    );
    println!(
        "training images {}, directed hard-negative pairs {}",
        m.train_base_images().len(),
        m.train_hard_negative_pairs().len()
    );
    Ok(())
}

pub fn train(config: &TrainConfig, data: &Path, out: &Path, log: &Path) -> Result<(), Failure> {
    config.validate()?;
    let dataset = load_dataset(data)?;
    let outcome = train_encoder(config, &dataset)?;
    write_checkpoint(out, &outcome.params)?;
    write_log_csv(log, &outcome.log)?;
    let last = outcome.log.last().expect("at least one epoch");
    println!("mode {}, {} epochs", config.mode.name(), last.epoch);
    println!("final loss {:.6}", last.loss);
    println!("held-out mean ratio {:.6}", last.mean_ratio_heldout);
    Ok(())
}

pub fn embed(checkpoint: &Path, data: &Path, out: &Path) -> Result<(), Failure> {
    let params = read_checkpoint(checkpoint).map_err(Failure::checkpoint)?;
    let dataset = load_dataset(data)?;
    let dim = params.dims().dim;
    let refs = embed_images(&params, &dataset, &dataset.manifest.references).map_err(Failure::checkpoint)?;
    let queries = embed_images(&params, &dataset, &dataset.manifest.queries).map_err(Failure::checkpoint)?;
    create_dir(out)?;
    write_descriptors(&out.join(REFS_FILE), dim, &refs)?;
    write_descriptors(&out.join(QUERIES_FILE), dim, &queries)?;
    println!(
        "embedded {} references and {} queries (dim {dim})",
        refs.len(),
        queries.len()
    );
    Ok(())
}

pub fn match_queries(config: &MatchConfig, embeddings: &Path, out: &Path) -> Result<(), Failure> {
    config.validate()?;
    let refs = read_descriptors(&embeddings.join(REFS_FILE), None)?;
    let queries = read_descriptors(&embeddings.join(QUERIES_FILE), Some(refs.dim))?;
    let index = build_index(refs.descriptors)?;
    let result = match_all(&queries.descriptors, &index, config);
    for (id, e) in &result.failures {
        eprintln!("warning: query {id} skipped: {e}");
    }
    write_predictions_csv(out, &result.predictions)?;
    println!(
        "{} predictions for {} queries (filter {})",
        result.predictions.len(),
        queries.descriptors.len() - result.failures.len(),
        if config.filter_enabled { "on" } else { "off" }
    );
    Ok(())
}

pub fn eval(predictions: &Path, gt: &Path, n: Option<usize>, out: &Path) -> Result<(), Failure> {
    let preds = read_predictions_csv(predictions)?;
    let gt = read_ground_truth(gt)?;
    let report = evaluate(&preds, &gt, n)?;
    write_report_json(out, &report)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn sweep(
    predictions: &Path,
    data: &Path,
    fractions: &[f64],
    out: &Path,
    svg: Option<&Path>,
) -> Result<(), Failure> {
    let manifest = read_manifest(data)?;
    let preds = read_predictions_csv(predictions)?;
    let (base, pool) = query_split(&manifest);
    let points = sweep_hard_negatives(&preds, &manifest.ground_truth(), &base, &pool, fractions)?;
    let csv = sweep_csv(&points);
    write_text(out, &csv)?;
    if let Some(path) = svg {
        write_text(path, &sweep_svg(&points))?;
    }
    print!("{csv}");
    Ok(())
}

pub fn compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let ra = read_report_json(a)?;
    let rb = read_report_json(b)?;
    let delta = compare_reports(&ra, &rb)?;
    print!("{}", delta.to_table(&ra, &rb));
    if let Some(path) = out {
        write_text(path, &delta.to_csv(&ra, &rb))?;
    }
    Ok(())
}
