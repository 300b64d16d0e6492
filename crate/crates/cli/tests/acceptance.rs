//! Acceptance runner: one PASS/FAIL line per primary criterion, then the
//! desk-scale experiment tables. Exits nonzero when any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use msseg_core::fusion::{best_cell, detect_masks, fuse, grow_lesions, tau_sweep};
use msseg_core::metrics::{lesion_metrics, score, voxel_metrics};
use msseg_core::orient::extract_slab;
use msseg_core::phantom::{corrupt, generate, CorruptionKind, CorruptionSpec, PhantomConfig, PhantomSubject};
use msseg_core::pipeline::{evaluate_fused, evaluate_three_plane, predict_cohort, EvalSubject};
use msseg_core::tinynet::{
    export_norm_stats, gradient_suite, normalize, train, InferenceStats, Norm, NormMode, NormPolicy, Phase, Tensor,
    TrainingSubject,
};
use msseg_core::volio::{read_mask, read_volume, write_mask, write_volume};
use msseg_core::{
    BinaryMask3D, Contrast, Dihedral, FusionParams, MultiContrastVolume, NetConfig, OrientTransform, Plane,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed < budget, || format!("took {elapsed:.1?}, budget {budget:?}"))
}

fn transform_group() -> Outcome {
    let start = Instant::now();
    let cat = OrientTransform::catalog();
    ensure(cat.len() == 24, || format!("{} transforms", cat.len()))?;
    for &t in &cat {
        let id = OrientTransform::new(t.plane, Dihedral::IDENTITY);
        ensure(t.then(t.inverse()) == Some(id) && t.inverse().then(t) == Some(id), || format!("{t:?} has no inverse"))?;
        for &u in &cat {
            if let Some(tu) = t.then(u) {
                ensure(cat.contains(&tu), || format!("{t:?} then {u:?} leaves the catalog"))?;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut volumes = 0;
    for &t in &cat {
        for _ in 0..50 {
            let dims = [0, 1, 2].map(|_| rng.random_range(1..13));
            let v = support::random_volume(&mut rng, dims);
            ensure(t.inverse().apply(&t.apply(&v)) == v, || format!("{t:?} round trip differs on {dims:?}"))?;
            volumes += 1;
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("24 transforms, {volumes} voxel-exact round trips, closed composition, {:.2?}", start.elapsed()))
}

fn fusion_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..200 {
        let density = rng.random_range(0.05..0.5);
        let m2 = support::random_mask(&mut rng, [16; 3], density);
        let mut m1 = m2.clone();
        let keep = rng.random_range(0.0..0.2);
        for v in m1.data_mut() {
            *v = *v && rng.random_bool(keep);
        }
        let got = grow_lesions(&m1, &m2).map_err(|e| e.to_string())?;
        ensure(got == support::bfs_grow(&m1, &m2), || format!("pair {i} differs from the BFS oracle"))?;
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("200 pairs of 16^3 masks equal to BFS growth, {:.2?}", start.elapsed()))
}

fn fusion_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cells = 0;
    for i in 0..100 {
        let n = if i % 2 == 0 { 24 } else { rng.random_range(1..10) };
        let c = support::random_confidence(&mut rng, [12, 11, 10], n);
        let e = |e: msseg_core::Error| e.to_string();
        for tau1 in 0..=n {
            for tau2 in 0..=tau1 {
                let p = FusionParams::new(tau1, tau2, n).map_err(e)?;
                let (m1, m2) = detect_masks(&c, &p).map_err(e)?;
                let m = fuse(&c, &p).map_err(e)?;
                ensure(m1.is_subset_of(&m) && m.is_subset_of(&m2), || format!("sandwich fails at {tau1},{tau2}"))?;
                if tau2 < tau1 {
                    let up = fuse(&c, &FusionParams::new(tau1, tau2 + 1, n).map_err(e)?).map_err(e)?;
                    ensure(up.is_subset_of(&m), || format!("not monotone in tau2 at {tau1},{tau2}"))?;
                }
                if tau1 < n {
                    let up = fuse(&c, &FusionParams::new(tau1 + 1, tau2, n).map_err(e)?).map_err(e)?;
                    ensure(up.is_subset_of(&m), || format!("not monotone in tau1 at {tau1},{tau2}"))?;
                }
                cells += 1;
            }
            let same = fuse(&c, &FusionParams::new(tau1, tau1, n).map_err(e)?).map_err(e)?;
            ensure(same == c.above(tau1), || format!("tau1 = tau2 = {tau1} is not thresholding"))?;
        }
    }
    Ok(format!("100 maps, {cells} threshold pairs"))
}

fn eq5() -> Outcome {
    let s = score(0.664, 0.882, 0.508, 0.100, 0.866);
    ensure((s - 0.76175).abs() < 1e-12, || format!("score {s}"))?;
    Ok(format!("score = {s:.12}"))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100 {
        let (dp, dg) = (rng.random_range(0.0..0.3), rng.random_range(0.0..0.3));
        let pred = support::random_mask(&mut rng, [12; 3], dp);
        let gt = support::random_mask(&mut rng, [12; 3], dg);
        let v = voxel_metrics(&pred, &gt).map_err(|e| e.to_string())?;
        let l = lesion_metrics(&pred, &gt).map_err(|e| e.to_string())?;
        ensure((v.dsc, v.ppv, v.tpr) == support::brute_voxel(&pred, &gt), || format!("voxel metrics differ on pair {i}"))?;
        ensure((l.ltpr, l.lfpr) == support::brute_lesion(&pred, &gt), || format!("lesion metrics differ on pair {i}"))?;
    }
    Ok("100 pairs of 12^3 masks, exact".into())
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst_linear: f64 = 0.0;
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for seed in 0..3 {
        for (name, e) in gradient_suite(seed).map_err(|e| e.to_string())? {
            let linear = name.starts_with("linear");
            let tol = if linear { 1e-7 } else { 1e-3 };
            ensure(e < tol, || format!("seed {seed} {name}: relative error {e:e} >= {tol:e}"))?;
            if linear {
                worst_linear = worst_linear.max(e);
            } else {
                worst = worst.max(e);
            }
            entries += 1;
        }
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "{entries} checks, worst {worst:.1e} (linear {worst_linear:.1e}), {:.1?}",
        start.elapsed()
    ))
}

fn normalization() -> Outcome {
    let cfg = PhantomConfig { n_subjects: 2, seed: 11, ..Default::default() };
    let subjects = generate(&cfg).map_err(|e| e.to_string())?;
    let slabs: Vec<_> = subjects
        .iter()
        .flat_map(|s| Plane::ALL.map(|p| extract_slab(&s.mcv, p, 24).unwrap()))
        .collect();
    let (mut max_mean, mut max_var): (f64, f64) = (0.0, 0.0);
    for mode in [NormMode::Bn, NormMode::In, NormMode::CondIn] {
        let net = msseg_core::Net::new(NetConfig::desk(), NormPolicy::new(mode), 7)
            .map_err(|e| e.to_string())?
            .with_inference_stats(InferenceStats::InstanceStats);
        let layers: Vec<usize> = (0..net.units.len()).collect();
        for r in export_norm_stats(&net, &slabs, &layers).map_err(|e| e.to_string())? {
            max_mean = max_mean.max(r.mean.abs());
            max_var = max_var.max((r.var - 1.0).abs());
        }
    }
    ensure(max_mean < 1e-3 && max_var < 1e-2, || format!("TTIN stats: |mean| {max_mean:e}, |var - 1| {max_var:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rand_tensor = |rng: &mut ChaCha8Rng, n, c| {
        let data = (0..n * c * 64).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(n, c, 8, 8, data).unwrap()
    };
    let policy = |mode| NormPolicy { inference_stats: InferenceStats::InstanceStats, ..NormPolicy::new(mode) };
    let mut max_affine: f64 = 0.0;
    for _ in 0..50 {
        let x = rand_tensor(&mut rng, 2, 3);
        let (a, c) = (rng.random_range(0.5..10.0), rng.random_range(-100.0..100.0));
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = a * *v + c);
        let layer = Norm::new(3, NormMode::In);
        let n0 = normalize(&x, &layer, &policy(NormMode::In), Phase::Infer, &[15, 15]).map_err(|e| e.to_string())?;
        let n1 = normalize(&y, &layer, &policy(NormMode::In), Phase::Infer, &[15, 15]).map_err(|e| e.to_string())?;
        for (u, v) in n0.data.iter().zip(&n1.data) {
            max_affine = max_affine.max((u - v).abs());
        }
    }
    ensure(max_affine < 1e-4, || format!("IN affine invariance error {max_affine:e}"))?;

    for _ in 0..50 {
        let x = rand_tensor(&mut rng, 3, 4);
        let combos: Vec<u8> = (0..3).map(|_| rng.random_range(1..16)).collect();
        let mut inorm = Norm::new(4, NormMode::In);
        inorm.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.1..3.0));
        inorm.beta.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        let mut cond = Norm::new(4, NormMode::CondIn);
        for set in 0..cond.n_sets {
            cond.gamma[set * 4..set * 4 + 4].copy_from_slice(&inorm.gamma);
            cond.beta[set * 4..set * 4 + 4].copy_from_slice(&inorm.beta);
        }
        for phase in [Phase::Train, Phase::Infer] {
            let a = normalize(&x, &inorm, &policy(NormMode::In), phase, &combos).map_err(|e| e.to_string())?;
            let b = normalize(&x, &cond, &policy(NormMode::CondIn), phase, &combos).map_err(|e| e.to_string())?;
            ensure(a.data == b.data, || "tied CondIN differs from IN".into())?;
        }
    }
    Ok(format!("TTIN |mean| {max_mean:.1e}, |var-1| {max_var:.1e}; IN affine {max_affine:.1e}; tied CondIN == IN bitwise"))
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ITERATIONS: usize = 1000;
const LEARNING_RATE: f64 = 1e-3;

struct SeedResult {
    seed: u64,
    bn_train: f64,
    bn_ttin: f64,
    condin_ttin: f64,
    vote3: f64,
    swept: f64,
    best: (u16, u16),
}

fn held_out(subjects: &[PhantomSubject], seed: u64) -> Vec<(MultiContrastVolume, BinaryMask3D, BinaryMask3D)> {
    let drop = CorruptionSpec::new(CorruptionKind::DropContrast, Some(Contrast::Flair));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.iter().map(|s| (corrupt(&s.mcv, &drop, &mut rng).unwrap(), s.rater1.clone(), s.rater2.clone())).collect()
}

fn run_seed(seed: u64) -> Result<SeedResult, String> {
    let e = |e: msseg_core::Error| e.to_string();
    let cohort = generate(&PhantomConfig { n_subjects: 18, seed, ..Default::default() }).map_err(e)?;
    let train_set: Vec<TrainingSubject> = cohort[..12].iter().map(Into::into).collect();
    let test = held_out(&cohort[12..], seed);
    let cfg = TrainConfig { iterations: ITERATIONS, learning_rate: LEARNING_RATE, seed, ..Default::default() };
    assert!(cfg.contrast_dropout);

    let (bn, _) = train(&train_set, NetConfig::desk(), NormPolicy::new(NormMode::Bn), &cfg).map_err(e)?;
    let (cin, _) = train(&train_set, NetConfig::desk(), NormPolicy::new(NormMode::CondIn), &cfg).map_err(e)?;

    let eval = |c: &[EvalSubject]| evaluate_fused(c, &FusionParams::DEFAULT).map(|r| r.score).map_err(e);
    let bn_train = eval(&predict_cohort(&test, &bn.with_inference_stats(InferenceStats::TrainStats)).map_err(e)?)?;
    let bn_ttin = eval(&predict_cohort(&test, &bn.with_inference_stats(InferenceStats::InstanceStats)).map_err(e)?)?;
    let cached = predict_cohort(&test, &cin.with_inference_stats(InferenceStats::InstanceStats)).map_err(e)?;
    let condin_ttin = eval(&cached)?;

    let vote3 = evaluate_three_plane(&cached).map_err(e)?.score;
    let sweep: Vec<_> = cached.iter().map(EvalSubject::sweep_subject).collect();
    let grid: Vec<u16> = (0..=24).collect();
    let best = best_cell(&tau_sweep(&sweep, &grid, &grid).map_err(e)?).ok_or("empty sweep")?;
    Ok(SeedResult {
        seed,
        bn_train,
        bn_ttin,
        condin_ttin,
        vote3,
        swept: best.mean_score,
        best: (best.tau1, best.tau2),
    })
}

fn experiments() -> (Outcome, Outcome) {
    let start = Instant::now();
    let mut rows = Vec::new();
    println!("  seed | BN+train | BN+TTIN | CondIN+TTIN (24-view) | 3-plane vote | 24-view swept (tau1,tau2)");
    for seed in SEEDS {
        match run_seed(seed) {
            Ok(r) => {
                println!(
                    "  {:>4} | {:>8.4} | {:>7.4} | {:>21.4} | {:>12.4} | {:.4} ({},{})",
                    r.seed, r.bn_train, r.bn_ttin, r.condin_ttin, r.vote3, r.swept, r.best.0, r.best.1
                );
                rows.push(r);
            }
            Err(msg) => {
                let fail = Err(format!("seed {seed}: {msg}"));
                return (fail.clone(), fail);
            }
        }
    }
    let elapsed = start.elapsed();
    let n = rows.len() as f64;
    let mean = |f: fn(&SeedResult) -> f64| rows.iter().map(f).sum::<f64>() / n;
    println!(
        "  mean | {:>8.4} | {:>7.4} | {:>21.4} | {:>12.4} | {:.4}   ({elapsed:.0?})",
        mean(|r| r.bn_train),
        mean(|r| r.bn_ttin),
        mean(|r| r.condin_ttin),
        mean(|r| r.vote3),
        mean(|r| r.swept)
    );

    let wins = rows.iter().filter(|r| r.condin_ttin > r.bn_train).count();
    let generalization = if wins >= 4 && elapsed < Duration::from_secs(3600) {
        Ok(format!("TTIN beats train-stats BN in {wins}/5 seeds, {elapsed:.0?}"))
    } else {
        Err(format!("TTIN beats train-stats BN in {wins}/5 seeds, {elapsed:.0?}"))
    };
    let wins = rows.iter().filter(|r| r.swept >= r.vote3).count();
    let ensemble = if wins >= 4 {
        Ok(format!("swept 24-view fusion >= 3-plane vote in {wins}/5 seeds"))
    } else {
        Err(format!("swept 24-view fusion >= 3-plane vote in {wins}/5 seeds"))
    };
    (generalization, ensemble)
}

fn msseg(root: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_msseg")).args(args).current_dir(root).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("msseg {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn roundtrip_and_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..20 {
        let dims = [0, 1, 2].map(|_| rng.random_range(1..20));
        let v = support::random_volume(&mut rng, dims);
        let m = support::random_mask(&mut rng, dims, 0.3);
        let (vp, mp) = (tmp.path().join(format!("v{i}.nii.gz")), tmp.path().join(format!("m{i}.nii")));
        write_volume(&v, &vp).map_err(|e| e.to_string())?;
        write_mask(&m, &mp).map_err(|e| e.to_string())?;
        let back = read_volume(&vp).map_err(|e| e.to_string())?;
        let same = back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same && back.dims() == dims, || format!("volume {i} not bit-exact"))?;
        ensure(read_mask(&mp).map_err(|e| e.to_string())? == m, || format!("mask {i} differs"))?;
    }

    let pipeline: [&[&str]; 5] = [
        &["phantom", "--out", "coh", "--seed", "5", "--subjects", "3", "--dims", "32", "--lesions", "2,5"],
        &["train", "--data", "coh", "--out", "run", "--iterations", "20", "--seed", "5"],
        &["infer", "--checkpoint", "run/model.ckpt", "--data", "coh", "--out", "pred"],
        &["eval", "--pred", "pred", "--data", "coh", "--out", "eval"],
        &["sweep", "--data", "coh", "--confidence", "pred", "--out", "sweep"],
    ];
    let runs = [tmp.path().join("a"), tmp.path().join("b")];
    for root in &runs {
        fs::create_dir_all(root).map_err(|e| e.to_string())?;
        for args in pipeline {
            msseg(root, args)?;
        }
    }
    let (a, b) = (tree(&runs[0]), tree(&runs[1]));
    ensure(a == b, || {
        let diff: Vec<_> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.display().to_string()).collect();
        format!("pipeline outputs differ: {diff:?}")
    })?;
    Ok(format!("20 volumes and masks bit-exact; full CLI pipeline twice, {} files identical", a.len()))
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let line = match &r {
            Ok(m) => format!("PASS  {name}: {m}"),
            Err(m) => format!("FAIL  {name}: {m}"),
        };
        println!("{line}  [{:.1?}]", t.elapsed());
        results.push((name, r));
    };
    run("transform-group", &transform_group);
    run("fusion-oracle", &fusion_oracle);
    run("fusion-algebra", &fusion_algebra);
    run("eq5-score", &eq5);
    run("metric-oracle", &metric_oracle);
    run("gradient-suite", &gradients);
    run("normalization-contracts", &normalization);
    run("nifti-roundtrip-cli-determinism", &roundtrip_and_determinism);

    println!("desk-scale experiments: {} seeds, {ITERATIONS} iterations, lr {LEARNING_RATE}", SEEDS.len());
    let t = Instant::now();
    let (generalization, ensemble) = catch_unwind(experiments).unwrap_or_else(|_| (Err("panicked".into()), Err("panicked".into())));
    for (name, r) in [("generalization-experiment", generalization), ("ensemble-experiment", ensemble)] {
        match &r {
            Ok(m) => println!("PASS  {name}: {m}  [{:.1?}]", t.elapsed()),
            Err(m) => println!("FAIL  {name}: {m}  [{:.1?}]", t.elapsed()),
        }
        results.push((name, r));
    }

    let failed: Vec<_> = results.iter().filter(|(_, r)| r.is_err()).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0?}",
        results.len() - failed.len(),
        results.len(),
        started.elapsed()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
