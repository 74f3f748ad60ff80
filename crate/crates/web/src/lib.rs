//! Browser bindings for the memory planner, the class sampler and small
//! single-worker training runs. Every export returns a JSON string.

use std::fmt::Write;

use partialfc::collectives::{Backend, World};
use partialfc::dataio::{generate_blobs, split_dataset};
use partialfc::engine::{train, MetricsRecord, TrainConfig, TrainMode};
use partialfc::memcost::{profile, sampled_profile};
use partialfc::numerics::RngStream;
use partialfc::sampler::{build_plan, partition_classes, SamplingMode};
use wasm_bindgen::prelude::*;

const LABEL_STREAM: u64 = 21;

fn join<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::from("[");
    for (i, v) in items.into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v}");
    }
    out.push(']');
    out
}

/// Per-worker memory for `k = 1..=k_max` with `classes_per_gpu · k` classes.
pub fn memory_curve_json(
    d: u64,
    classes_per_gpu: u64,
    batch: u64,
    k_max: u64,
    rate: f64,
) -> Result<String, String> {
    if k_max == 0 || k_max > 4096 {
        return Err("k_max must lie in 1..=4096".into());
    }
    let mut rows = Vec::with_capacity(k_max as usize);
    for k in 1..=k_max {
        let classes = classes_per_gpu
            .checked_mul(k)
            .ok_or("class count overflows")?;
        let p = profile(d, classes, k, batch).map_err(|e| e.to_string())?;
        let s = sampled_profile(d, classes, k, batch, rate).map_err(|e| e.to_string())?;
        rows.push(format!(
            "{{\"k\":{k},\"mem_w\":{},\"mem_logits\":{},\"mem_fc\":{},\"sampled_mem_fc\":{}}}",
            p.mem_w, p.mem_logits, p.mem_fc, s.profile.mem_fc
        ));
    }
    Ok(format!("[{}]", rows.join(",")))
}

/// Draws `batch` uniform labels and shows which class centers each worker
/// would use.
pub fn sampling_plan_json(
    classes: usize,
    workers: usize,
    batch: usize,
    rate: f64,
    seed: u64,
    fully_random: bool,
) -> Result<String, String> {
    let err = |e: partialfc::Error| e.to_string();
    if classes == 0 || classes > 100_000 {
        return Err("classes must lie in 1..=100000".into());
    }
    let mut rng = RngStream::with_stream(seed, LABEL_STREAM);
    let labels: Vec<usize> = (0..batch).map(|_| rng.next_below(classes)).collect();
    let ranges = partition_classes(classes, workers).map_err(err)?;
    let mode = if fully_random {
        SamplingMode::FullyRandom
    } else {
        SamplingMode::Pprn
    };
    let plan = build_plan(&labels, &ranges, rate, seed, 0, mode).map_err(err)?;
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let covered = distinct
        .iter()
        .filter(|&&y| plan.compact_index(y).is_some())
        .count();
    let ranks: Vec<String> = plan
        .ranks
        .iter()
        .map(|r| {
            format!(
                "{{\"rank\":{},\"start\":{},\"end\":{},\"positives\":{},\"negatives\":{}}}",
                r.range.rank,
                r.range.start,
                r.range.end,
                join(&r.positives),
                join(&r.negatives)
            )
        })
        .collect();
    Ok(format!(
        "{{\"labels\":{},\"width\":{},\"distinct_labels\":{},\"covered_labels\":{covered},\"ranks\":[{}]}}",
        join(&labels),
        plan.width(),
        distinct.len(),
        ranks.join(",")
    ))
}

fn metrics_json(records: &[MetricsRecord]) -> String {
    let rows: Vec<String> = records
        .iter()
        .map(|m| {
            format!(
                "{{\"iter\":{},\"loss\":{},\"ca_pcc\":{},\"eval_acc\":{}}}",
                m.iteration,
                m.loss,
                m.ca_pcc,
                m.eval_acc
                    .map_or_else(|| "null".to_string(), |v| v.to_string())
            )
        })
        .collect();
    format!("[{}]", rows.join(","))
}

/// Trains full, PPRN and fully random softmax on the same blob dataset and
/// returns their metric curves.
pub fn train_curves_json(
    classes: usize,
    per_class: usize,
    dim: usize,
    rate: f64,
    iterations: usize,
    seed: u64,
) -> Result<String, String> {
    let err = |e: partialfc::Error| e.to_string();
    if classes * per_class > 20_000 || iterations > 5_000 {
        return Err(
            "keep classes x per_class <= 20000 and iterations <= 5000 in the browser".into(),
        );
    }
    let data = generate_blobs(classes, per_class, dim, 0.15, seed).map_err(err)?;
    let split = split_dataset(&data, 0.2, seed).map_err(err)?;
    let world = World::new(1, Backend::Sequential).map_err(err)?;
    let mut out = Vec::new();
    for mode in [TrainMode::Full, TrainMode::Pprn, TrainMode::FullyRandom] {
        let cfg = TrainConfig {
            workers: 1,
            batch_per_worker: 64.min(split.train.len()),
            embedding_dim: dim,
            mode,
            rate,
            lr0: 1.0,
            lr_milestones: vec![iterations * 6 / 10 + 1, iterations * 85 / 100 + 2],
            iterations,
            seed,
            log_every: (iterations / 50).max(1),
            timestamps: false,
            ..TrainConfig::new(classes)
        };
        let run = train(&cfg, &data, &split, &world).map_err(err)?;
        out.push(format!("\"{mode}\":{}", metrics_json(&run.metrics)));
    }
    Ok(format!("{{{}}}", out.join(",")))
}

#[wasm_bindgen]
pub fn memory_curve(
    d: u32,
    classes_per_gpu: u32,
    batch: u32,
    k_max: u32,
    rate: f64,
) -> Result<String, JsError> {
    memory_curve_json(
        d.into(),
        classes_per_gpu.into(),
        batch.into(),
        k_max.into(),
        rate,
    )
    .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn sampling_plan(
    classes: u32,
    workers: u32,
    batch: u32,
    rate: f64,
    seed: u32,
    fully_random: bool,
) -> Result<String, JsError> {
    sampling_plan_json(
        classes as usize,
        workers as usize,
        batch as usize,
        rate,
        seed.into(),
        fully_random,
    )
    .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn train_curves(
    classes: u32,
    per_class: u32,
    dim: u32,
    rate: f64,
    iterations: u32,
    seed: u32,
) -> Result<String, JsError> {
    train_curves_json(
        classes as usize,
        per_class as usize,
        dim as usize,
        rate,
        iterations as usize,
        seed.into(),
    )
    .map_err(|e| JsError::new(&e))
}
