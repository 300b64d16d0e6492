use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use msseg_core::fusion::{best_cell, fuse, tau_sweep, SweepSubject};
use msseg_core::metrics::evaluate_cohort;
use msseg_core::orient::extract_slab;
use msseg_core::phantom::{corrupt, generate, read_cohort, write_cohort, PhantomSubject};
use msseg_core::pipeline::ViewMasks;
use msseg_core::tinynet::{
    export_norm_stats, load_checkpoint, save_checkpoint, stats_to_csv, Checkpoint, NormPolicy, TrainLog, Trainer,
    TrainingSubject,
};
use msseg_core::volio::{read_confidence, read_mask, read_volume, write_confidence, write_mask};
use msseg_core::{BinaryMask3D, Contrast, Error, MultiContrastVolume, Net, Plane};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{self, required, EvalCmd, InferCmd, PhantomCmd, StatsCmd, SweepCmd, TrainCmd};
use crate::error::{CliError, CliResult};
use crate::{EvalArgs, InferArgs, PhantomArgs, StatsArgs, SweepArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const BEST_JSON: &str = "best.json";
pub const STATS_CSV: &str = "stats.csv";

pub fn confidence_file(id: &str) -> String {
    format!("{id}_confidence.nii.gz")
}

pub fn mask_file(id: &str) -> String {
    format!("{id}_mask.nii.gz")
}

/// Input problems (unreadable or malformed files) are data errors whatever
/// the core error kind.
fn data_err(e: Error) -> CliError {
    CliError::data(e.to_string())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let name = path.file_name().ok_or_else(|| CliError::usage(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

fn to_json(value: &impl Serialize) -> Value {
    serde_json::to_value(value).expect("configurations serialize")
}

/// Creates `out` and writes `<command>_config.json` there.
fn echo_config(out: &Path, command: &str, resolved: &Value) -> CliResult<()> {
    fs::create_dir_all(out)?;
    write_json(&out.join(format!("{command}_config.json")), resolved)
}

fn read_subjects(data: &Path) -> CliResult<Vec<PhantomSubject>> {
    let (_, subjects) = read_cohort(data).map_err(data_err)?;
    if subjects.is_empty() {
        return Err(CliError::data(format!("{}: cohort has no subjects", data.display())));
    }
    Ok(subjects)
}

fn load_net(path: &Path, stats: Option<msseg_core::InferenceStats>) -> CliResult<Net> {
    let ck = load_checkpoint(path).map_err(data_err)?;
    let stats = stats.unwrap_or(ck.net.policy.inference_stats);
    Ok(ck.net.with_inference_stats(stats))
}

pub fn phantom(a: PhantomArgs) -> CliResult<Value> {
    let mut c: PhantomCmd = config::load(a.config.as_deref())?;
    if a.out.is_some() {
        c.out = a.out;
    }
    if let Some(s) = a.seed {
        c.phantom.seed = s;
    }
    if let Some(n) = a.subjects {
        c.phantom.n_subjects = n;
    }
    if let Some(d) = a.dims {
        c.phantom.dims = match d[..] {
            [n] => [n; 3],
            [x, y, z] => [x, y, z],
            _ => return Err(CliError::usage("--dims takes one or three values")),
        };
    }
    if let Some(l) = a.lesions {
        let [lo, hi] = l[..] else {
            return Err(CliError::usage("--lesions takes MIN,MAX"));
        };
        c.phantom.lesion_count = (lo, hi);
    }
    let out = required(&c.out, "--out")?;
    c.phantom.validate()?;
    let resolved = to_json(&c);
    let seed = c.phantom.seed;
    let mut subjects = generate(&c.phantom)?;
    for (i, s) in subjects.iter_mut().enumerate() {
        // streams disjoint from the generator's per-subject streams
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((1 << 32) + i as u64);
        for spec in &c.corruptions {
            s.mcv = corrupt(&s.mcv, spec, &mut rng)?;
        }
    }
    echo_config(&out, "phantom", &resolved)?;
    write_cohort(&out, &subjects, seed)?;
    Ok(json!({
        "command": "phantom",
        "config": resolved,
        "out": out,
        "subjects": subjects.iter().map(|s| json!({"id": s.id, "lesions": s.n_lesions})).collect::<Vec<_>>(),
    }))
}

pub fn train(a: TrainArgs) -> CliResult<Value> {
    let mut c: TrainCmd = config::load(a.config.as_deref())?;
    if a.data.is_some() {
        c.data = a.data;
    }
    if a.out.is_some() {
        c.out = a.out;
    }
    if a.resume.is_some() {
        c.resume = a.resume;
    }
    if let Some(n) = a.norm {
        c.norm = n.into();
    }
    if let Some(s) = a.stats {
        c.inference_stats = s.into();
    }
    if let Some(s) = a.contrast_dropout {
        c.train.contrast_dropout = s.into();
    }
    if let Some(s) = a.rater_sampling {
        c.train.rater_sampling = s.into();
    }
    if let Some(s) = a.augmentation {
        c.train.spatial_augmentation = s.into();
    }
    if let Some(n) = a.iterations {
        c.train.iterations = n;
    }
    if let Some(n) = a.batch_size {
        c.train.batch_size = n;
    }
    if let Some(lr) = a.lr {
        c.train.learning_rate = lr;
    }
    if let Some(s) = a.seed {
        c.train.seed = s;
    }
    let data = required(&c.data, "--data")?;
    let out = required(&c.out, "--out")?;
    let target = c.train.iterations;

    let mut trainer = match &c.resume {
        Some(path) => {
            // the checkpoint's recipe wins; only the iteration target and
            // an explicit --stats carry over
            let ck = load_checkpoint(path).map_err(data_err)?;
            let adam = ck.adam.ok_or_else(|| CliError::data("checkpoint has no optimizer state"))?;
            let mut cfg = ck.train_config.ok_or_else(|| CliError::data("checkpoint has no training configuration"))?;
            cfg.iterations = target;
            if ck.iteration > target {
                return Err(CliError::usage(format!(
                    "checkpoint is at iteration {}, beyond --iterations {target}",
                    ck.iteration
                )));
            }
            let stats = a.stats.map(Into::into).unwrap_or(ck.net.policy.inference_stats);
            let net = ck.net.with_inference_stats(stats);
            c.train = cfg.clone();
            c.net = net.config.clone();
            c.norm = net.policy.mode;
            c.eps = net.policy.eps;
            c.momentum = net.policy.momentum;
            c.inference_stats = stats;
            Trainer { net, adam, cfg, iteration: ck.iteration }
        }
        None => {
            let policy =
                NormPolicy { mode: c.norm, eps: c.eps, momentum: c.momentum, inference_stats: c.inference_stats };
            policy.validate()?;
            c.train.validate()?;
            Trainer::new(Net::new(c.net.clone(), policy, c.train.seed)?, c.train.clone())?
        }
    };
    let resolved = to_json(&c);
    let subjects: Vec<TrainingSubject> = read_subjects(&data)?.iter().map(Into::into).collect();
    echo_config(&out, "train", &resolved)?;

    let start = trainer.iteration;
    let mut log = TrainLog::default();
    trainer.run(&subjects, target - start, &mut log)?;
    let ckpt = Checkpoint {
        net: trainer.net.clone(),
        adam: Some(trainer.adam.clone()),
        train_config: Some(trainer.cfg.clone()),
        iteration: trainer.iteration,
    };
    let ckpt_path = out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &ckpt_path)?;
    write_atomic(&out.join(LOSS_FILE), log.to_csv().as_bytes())?;
    let tail = log.losses.len().min(10);
    let final_loss = log.mean_loss(target + 1 - tail..target + 1);
    Ok(json!({
        "command": "train",
        "config": resolved,
        "checkpoint": ckpt_path,
        "start_iteration": start,
        "iteration": trainer.iteration,
        "final_loss": if tail > 0 { json!(final_loss) } else { Value::Null },
        "condition_sets": ckpt.condition_sets(),
        "parameters": trainer.net.num_params(),
    }))
}

/// `(id, volume)` pairs from a cohort or from `--input` files.
fn infer_inputs(c: &InferCmd) -> CliResult<Vec<(String, MultiContrastVolume)>> {
    if let Some(data) = &c.data {
        if !c.inputs.is_empty() {
            return Err(CliError::usage("--data and --input are mutually exclusive"));
        }
        return Ok(read_subjects(data)?.into_iter().map(|s| (s.id, s.mcv)).collect());
    }
    if c.inputs.is_empty() {
        return Err(CliError::usage("missing --data or --input"));
    }
    let mut pairs = Vec::new();
    for (name, path) in &c.inputs {
        let contrast = Contrast::from_name(name).ok_or_else(|| CliError::usage(format!("unknown contrast {name:?}")))?;
        pairs.push((contrast, read_volume(path).map_err(data_err)?));
    }
    let mcv = MultiContrastVolume::from_pairs(pairs).map_err(data_err)?;
    Ok(vec![(c.id.clone().unwrap_or_else(|| "subject".into()), mcv)])
}

pub fn infer(a: InferArgs) -> CliResult<Value> {
    let mut c: InferCmd = config::load(a.config.as_deref())?;
    if a.checkpoint.is_some() {
        c.checkpoint = a.checkpoint;
    }
    if a.data.is_some() {
        c.data = a.data;
    }
    if !a.inputs.is_empty() {
        c.inputs = a.inputs;
    }
    if a.id.is_some() {
        c.id = a.id;
    }
    if a.out.is_some() {
        c.out = a.out;
    }
    if let Some(s) = a.stats {
        c.stats = Some(s.into());
    }
    if let Some(t) = a.transforms {
        c.transforms = t;
    }
    if a.tau1.is_some() {
        c.tau1 = a.tau1;
    }
    if a.tau2.is_some() {
        c.tau2 = a.tau2;
    }
    let ckpt = required(&c.checkpoint, "--checkpoint")?;
    let out = required(&c.out, "--out")?;
    let mut fusion = c.transforms.default_fusion();
    fusion.tau1 = c.tau1.unwrap_or(fusion.tau1);
    fusion.tau2 = c.tau2.unwrap_or(fusion.tau2);
    fusion.validate()?;
    c.tau1 = Some(fusion.tau1);
    c.tau2 = Some(fusion.tau2);
    let net = load_net(&ckpt, c.stats)?;
    c.stats = Some(net.policy.inference_stats);
    let resolved = to_json(&c);
    let inputs = infer_inputs(&c)?;
    echo_config(&out, "infer", &resolved)?;

    let transforms = c.transforms.transforms();
    let rows = inputs
        .par_iter()
        .map(|(id, mcv)| {
            let conf = ViewMasks::predict(mcv, &net, &transforms)?.confidence()?;
            let mask = fuse(&conf, &fusion)?;
            write_confidence(&conf, out.join(confidence_file(id)))?;
            write_mask(&mask, out.join(mask_file(id)))?;
            Ok(json!({"id": id, "voxels": mask.count()}))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(json!({
        "command": "infer",
        "config": resolved,
        "fusion": fusion,
        "inference_passes": rows.len(),
        "subjects": rows,
    }))
}

/// First existing reference file for `id` in `dir`.
fn find_reference(dir: &Path, id: &str, rater: usize) -> CliResult<PathBuf> {
    let candidates = [mask_file(id), format!("{id}_rater{rater}.nii.gz"), format!("{id}.nii.gz")];
    candidates
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::data(format!("no reference mask for {id} in {}", dir.display())))
}

/// Subject ids of every `<id>_mask.nii.gz` in `dir`, sorted.
fn prediction_ids(dir: &Path) -> CliResult<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_mask.nii.gz") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(CliError::data(format!("no *_mask.nii.gz files in {}", dir.display())));
    }
    Ok(ids)
}

pub fn eval(a: EvalArgs) -> CliResult<Value> {
    let mut c: EvalCmd = config::load(a.config.as_deref())?;
    if a.pred.is_some() {
        c.pred = a.pred;
    }
    if a.data.is_some() {
        c.data = a.data;
    }
    if a.rater1.is_some() {
        c.rater1 = a.rater1;
    }
    if a.rater2.is_some() {
        c.rater2 = a.rater2;
    }
    if a.out.is_some() {
        c.out = a.out;
    }
    let pred_dir = required(&c.pred, "--pred")?;
    let out = required(&c.out, "--out")?;
    let resolved = to_json(&c);

    let mut ids = Vec::new();
    let (mut r1, mut r2) = (Vec::new(), Vec::new());
    match (&c.data, &c.rater1, &c.rater2) {
        (Some(data), None, None) => {
            for s in read_subjects(data)? {
                ids.push(s.id);
                r1.push(s.rater1);
                r2.push(s.rater2);
            }
        }
        (None, Some(d1), Some(d2)) => {
            ids = prediction_ids(&pred_dir)?;
            for id in &ids {
                r1.push(read_mask(find_reference(d1, id, 1)?).map_err(data_err)?);
                r2.push(read_mask(find_reference(d2, id, 2)?).map_err(data_err)?);
            }
        }
        _ => return Err(CliError::usage("give either --data or both --rater1 and --rater2")),
    }
    let preds =
        ids.iter().map(|id| read_mask(pred_dir.join(mask_file(id))).map_err(data_err)).collect::<CliResult<Vec<BinaryMask3D>>>()?;
    let report = evaluate_cohort(&preds, &r1, &r2).map_err(data_err)?;
    echo_config(&out, "eval", &resolved)?;
    let mut doc = to_json(&report);
    doc["subject_ids"] = json!(ids);
    write_json(&out.join(REPORT_JSON), &doc)?;
    write_atomic(&out.join(REPORT_CSV), report.to_csv(&ids).as_bytes())?;
    Ok(json!({
        "command": "eval",
        "config": resolved,
        "n_subjects": report.n_subjects,
        "score": report.score,
        "dsc": report.dsc,
        "ppv": report.ppv,
        "tpr": report.tpr,
        "lfpr": report.lfpr,
        "ltpr": report.ltpr,
        "vc": report.vc,
        "partial": report.partial,
        "warnings": report.warnings,
    }))
}

pub fn sweep(a: SweepArgs) -> CliResult<Value> {
    let mut c: SweepCmd = config::load(a.config.as_deref())?;
    if a.checkpoint.is_some() {
        c.checkpoint = a.checkpoint;
    }
    if a.data.is_some() {
        c.data = a.data;
    }
    if a.confidence.is_some() {
        c.confidence = a.confidence;
    }
    if a.out.is_some() {
        c.out = a.out;
    }
    if let Some(s) = a.stats {
        c.stats = Some(s.into());
    }
    if let Some(t) = a.transforms {
        c.transforms = t;
    }
    if let Some(g) = a.tau1_grid {
        c.tau1_grid = g;
    }
    if let Some(g) = a.tau2_grid {
        c.tau2_grid = g;
    }
    let data = required(&c.data, "--data")?;
    let out = required(&c.out, "--out")?;
    let cache = c.confidence.clone().unwrap_or_else(|| out.join("confidence"));
    c.confidence = Some(cache.clone());
    let subjects = read_subjects(&data)?;
    let missing: Vec<&PhantomSubject> =
        subjects.iter().filter(|s| !cache.join(confidence_file(&s.id)).is_file()).collect();
    let net = if missing.is_empty() {
        None
    } else {
        let ckpt = c
            .checkpoint
            .clone()
            .ok_or_else(|| CliError::usage("missing --checkpoint (confidence cache is incomplete)"))?;
        let net = load_net(&ckpt, c.stats)?;
        c.stats = Some(net.policy.inference_stats);
        Some(net)
    };
    let n_votes = c.transforms.transforms().len() as u16;
    if c.tau1_grid.is_empty() {
        c.tau1_grid = (0..=n_votes).collect();
    }
    if c.tau2_grid.is_empty() {
        c.tau2_grid = (0..=n_votes).collect();
    }
    let resolved = to_json(&c);
    echo_config(&out, "sweep", &resolved)?;
    fs::create_dir_all(&cache)?;

    let passes = AtomicUsize::new(0);
    if let Some(net) = &net {
        let transforms = c.transforms.transforms();
        missing.par_iter().try_for_each(|s| -> Result<(), Error> {
            let conf = ViewMasks::predict(&s.mcv, net, &transforms)?.confidence()?;
            passes.fetch_add(1, Ordering::Relaxed);
            write_confidence(&conf, cache.join(confidence_file(&s.id)))
        })?;
    }
    let mut cohort = Vec::with_capacity(subjects.len());
    for s in &subjects {
        let confidence = read_confidence(cache.join(confidence_file(&s.id))).map_err(data_err)?;
        if confidence.n_votes() != n_votes {
            return Err(CliError::data(format!(
                "cached confidence map of {} has {} votes, expected {n_votes}",
                s.id,
                confidence.n_votes()
            )));
        }
        cohort.push(SweepSubject { confidence, rater1: s.rater1.clone(), rater2: s.rater2.clone() });
    }
    let rows = tau_sweep(&cohort, &c.tau1_grid, &c.tau2_grid)?;
    let best = best_cell(&rows).ok_or_else(|| CliError::usage("threshold grid has no cell with tau2 <= tau1 <= n_votes"))?;
    let mut csv = String::from("tau1,tau2,mean_score,n_subjects\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.tau1, r.tau2, r.mean_score, r.n_subjects));
    }
    write_atomic(&out.join(SWEEP_CSV), csv.as_bytes())?;
    write_json(&out.join(BEST_JSON), &best)?;
    Ok(json!({
        "command": "sweep",
        "config": resolved,
        "inference_passes": passes.load(Ordering::Relaxed),
        "cells": rows.len(),
        "best": best,
    }))
}

pub fn stats(a: StatsArgs) -> CliResult<Value> {
    let mut c: StatsCmd = config::load(a.config.as_deref())?;
    if a.checkpoint.is_some() {
        c.checkpoint = a.checkpoint;
    }
    if a.data.is_some() {
        c.data = a.data;
    }
    if a.out.is_some() {
        c.out = a.out;
    }
    if let Some(s) = a.stats {
        c.stats = Some(s.into());
    }
    if let Some(l) = a.layers {
        c.layers = l;
    }
    let ckpt = required(&c.checkpoint, "--checkpoint")?;
    let data = required(&c.data, "--data")?;
    let out = required(&c.out, "--out")?;
    let net = load_net(&ckpt, c.stats)?;
    c.stats = Some(net.policy.inference_stats);
    if c.layers.is_empty() {
        c.layers = vec![0, net.bottleneck_unit()];
    }
    if let Some(&l) = c.layers.iter().find(|&&l| l >= net.units.len()) {
        return Err(CliError::usage(format!("layer {l} out of range 0..{}", net.units.len())));
    }
    let resolved = to_json(&c);
    let subjects = read_subjects(&data)?;
    echo_config(&out, "stats", &resolved)?;

    // the central slab of every subject in every plane
    let mut slabs = Vec::new();
    let mut inputs = Vec::new();
    for s in &subjects {
        for plane in Plane::ALL {
            let index = plane.extent(s.mcv.dims()) / 2;
            slabs.push(extract_slab(&s.mcv, plane, index)?);
            inputs.push(json!({"input_id": inputs.len(), "subject": s.id, "plane": plane.name(), "slice": index}));
        }
    }
    let records = export_norm_stats(&net, &slabs, &c.layers)?;
    write_atomic(&out.join(STATS_CSV), stats_to_csv(&records).as_bytes())?;
    let max_abs_mean = records.iter().map(|r| r.mean.abs()).fold(0.0, f64::max);
    let max_var_dev = records.iter().map(|r| (r.var - 1.0).abs()).fold(0.0, f64::max);
    Ok(json!({
        "command": "stats",
        "config": resolved,
        "records": records.len(),
        "inputs": inputs,
        "max_abs_mean": max_abs_mean,
        "max_var_deviation": max_var_dev,
    }))
}
