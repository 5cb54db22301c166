//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits non-zero if any of them fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use vspsr::imaging::synth::{natural_image, smooth_image};
use vspsr::imaging::{bicubic_upsample, degrade, load_png, Dataset, DatasetSpec, Image, NamedImage};
use vspsr::metrics::{diversity_from_maps, diversity_score, evaluate, lr_psnr, DistanceMap, EvalOptions, EvalReport};
use vspsr::objective::{sample_prior, PriorParams};
use vspsr::oracle;
use vspsr::rng::SeedStream;
use vspsr::trainer::{train, TrainConfig, TrainLog, TrainOutputs, TrainState};
use vspsr::vspm::{cem_project, super_resolve, super_resolve_with, SampleOptions, VSpMConfig, VSpMModel};
use vspsr::Result;

const SEED: u64 = 1;
const DESK_N: usize = 10;
const DESK_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn photos_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/photos")
}

fn photos() -> Result<Vec<NamedImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(photos_dir())
        .expect("photo fixtures present")
        .map(|e| e.expect("readable entry").path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            Ok(NamedImage {
                id: p.file_stem().unwrap().to_string_lossy().into_owned(),
                image: load_png(&p)?,
            })
        })
        .collect()
}

fn kl() -> Result<Outcome> {
    let t = Instant::now();
    let err = oracle::kl_oracle(1000, SEED)?;
    let secs = t.elapsed().as_secs_f64();
    Ok(outcome(
        err <= 1e-10 && secs < 5.0,
        format!("max rel err {err:.3e} over 1000 tuples (≤ 1e-10), {secs:.2} s (< 5 s)"),
    ))
}

fn prior_marginal() -> Result<Outcome> {
    let t = Instant::now();
    let err = oracle::prior_oracle()?;
    let mass = oracle::prior_mass_oracle()?;
    let secs = t.elapsed().as_secs_f64();
    Ok(outcome(
        err <= 1e-6 && mass <= 1e-4 && secs < 10.0,
        format!("max |log p − log quad| {err:.3e} (≤ 1e-6), |mass − 1| {mass:.3e} (≤ 1e-4), {secs:.2} s (< 10 s)"),
    ))
}

fn gradient() -> Result<Outcome> {
    let t = Instant::now();
    let rep = oracle::vspm_gradient_check(SEED, oracle::FD_STEP)?;
    let secs = t.elapsed().as_secs_f64();
    Ok(outcome(
        rep.max_rel_err <= 1e-5 && secs < 120.0,
        format!(
            "max rel err {:.3e} over {} entries (≤ 1e-5), {secs:.2} s (< 120 s)",
            rep.max_rel_err, rep.entries
        ),
    ))
}

fn diversity_brute_force() -> Result<Outcome> {
    let err = oracle::diversity_oracle(50, SEED)?;
    let mut rng = SeedStream::new(SEED).stream("acceptance.identical", 0);
    let values: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
    let map = DistanceMap::new(3, 4, values)?;
    let from_maps = diversity_from_maps(&vec![map; 4])?;
    let img = natural_image(16, 16, 7);
    let reference = natural_image(16, 16, 8);
    let from_images = diversity_score(&vec![img; 5], &reference)?;
    Ok(outcome(
        err <= 1e-9 && from_maps == 0.0 && from_images == 0.0,
        format!("max |Div − brute force| {err:.3e} on 50 cases (≤ 1e-9), identical samples give {from_maps} / {from_images}"),
    ))
}

fn zero_coefficients() -> Result<Outcome> {
    let cfg = VSpMConfig {
        stochastic_z: true,
        ..VSpMConfig::desk_scale()
    };
    let model = VSpMModel::<f32>::init(cfg.clone(), PriorParams::default().scale(), SEED)?;
    let mut worst_bits = 0usize;
    let mut count = 0;
    for photo in photos()?.iter().take(2) {
        let y = degrade(&photo.image, cfg.scale)?;
        let opts = SampleOptions {
            zero_coefficients: true,
            ..SampleOptions::default()
        };
        let set = super_resolve_with(&model, &y, 3, SEED, &opts)?;
        let expected = cem_project(&bicubic_upsample(&y, cfg.scale), &y, cfg.scale, cfg.cem_iters)?;
        for s in &set.samples {
            let differing = s
                .data()
                .iter()
                .zip(expected.data())
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count();
            worst_bits = worst_bits.max(differing);
            count += 1;
        }
    }
    Ok(outcome(
        worst_bits == 0,
        format!("{count} samples with ω = 0, {worst_bits} pixels differing from cem_project(m, y)"),
    ))
}

fn bicubic_baseline() -> Result<Outcome> {
    let images = photos()?;
    let mut values = Vec::new();
    for p in &images {
        let y = degrade(&p.image, 4)?;
        values.push(lr_psnr(&bicubic_upsample(&y, 4), &y, 4)?);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let listed: Vec<String> = images
        .iter()
        .zip(&values)
        .map(|(p, v)| format!("{} {v:.2}", p.id))
        .collect();
    Ok(outcome(
        images.len() >= 5 && (36.0..=41.0).contains(&mean),
        format!("mean {mean:.2} dB over {} photographs, in [36, 41] ({})", images.len(), listed.join(", ")),
    ))
}

fn sparsity() -> Result<Outcome> {
    let prior = PriorParams::new(3.0, 0.5)?;
    let mut rng = SeedStream::new(SEED).stream("acceptance.prior", 0);
    let n = 1_000_000;
    let xs: Vec<f64> = (0..n).map(|_| sample_prior(&mut rng, &prior)).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
    let excess = m4 / (m2 * m2) - 3.0;
    Ok(outcome(excess > 0.5, format!("excess kurtosis {excess:.3} from 10⁶ samples (> 0.5)")))
}

/// Everything one desk-scale pipeline run produces.
struct DeskRun {
    train_time: Duration,
    checkpoint: Vec<u8>,
    report: EvalReport,
    report_json: String,
    /// Per test photo: the SR samples.
    samples: Vec<Vec<Image>>,
    /// Per smooth input: LR PSNR of each sample.
    smooth_lr_psnr: Vec<Vec<f64>>,
}

fn desk_run(stochastic_omega: bool) -> Result<DeskRun> {
    let cfg = TrainConfig {
        seed: SEED,
        ..TrainConfig::desk_scale()
    };
    let model_cfg = VSpMConfig {
        stochastic_omega,
        ..VSpMConfig::desk_scale()
    };
    let images = (0..16)
        .map(|i| NamedImage {
            id: format!("train{i:02}"),
            image: natural_image(96, 96, 100 + i),
        })
        .collect();
    let spec = DatasetSpec {
        dir: PathBuf::from("synthetic"),
        scale: model_cfg.scale,
        lr_patch: cfg.lr_patch,
        augment: cfg.augment,
        seed: SEED,
    };
    let dataset = Dataset::from_images(spec, images)?;
    let model = VSpMModel::init(model_cfg.clone(), cfg.prior.scale(), SEED)?;
    let mut state = TrainState::new(model, &cfg);
    let t = Instant::now();
    train(&mut state, &dataset, &cfg, &mut TrainLog::new(), &TrainOutputs::default())?;
    let train_time = t.elapsed();

    let test = photos()?;
    let report = evaluate(&state.model, &test, DESK_N, SEED, &EvalOptions::default())?;
    let mut samples = Vec::new();
    for (i, p) in test.iter().enumerate() {
        let y = degrade(&p.image, model_cfg.scale)?;
        samples.push(super_resolve(&state.model, &y, DESK_N, SEED + i as u64)?.samples);
    }
    let mut smooth_lr_psnr = Vec::new();
    for i in 0..3 {
        let y = degrade(&smooth_image(128, 128, 500 + i), model_cfg.scale)?;
        let set = super_resolve(&state.model, &y, DESK_N, SEED)?;
        smooth_lr_psnr.push(
            set.samples
                .iter()
                .map(|s| lr_psnr(s, &y, model_cfg.scale))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(DeskRun {
        train_time,
        checkpoint: state.to_checkpoint().to_bytes()?,
        report_json: report.to_json(),
        report,
        samples,
        smooth_lr_psnr,
    })
}

fn lr_consistency(run: &DeskRun) -> Outcome {
    let natural_min = run
        .report
        .images
        .iter()
        .map(|r| r.lr_psnr_min)
        .fold(f64::INFINITY, f64::min);
    let smooth_min = run.smooth_lr_psnr.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    outcome(
        natural_min >= 45.0 && smooth_min >= 55.0,
        format!(
            "worst sample {natural_min:.2} dB on photographs (≥ 45), {smooth_min:.2} dB on smooth inputs (≥ 55)"
        ),
    )
}

fn desk_diversity(stochastic: &DeskRun, deterministic: &DeskRun) -> Outcome {
    let mut identical_pairs = 0;
    for set in &stochastic.samples {
        for a in 0..set.len() {
            for b in a + 1..set.len() {
                if set[a].max_abs_diff(&set[b]) == 0.0 {
                    identical_pairs += 1;
                }
            }
        }
    }
    let div = stochastic.report.aggregate.div;
    let det_div = deterministic.report.aggregate.div;
    let det_rows_zero = deterministic.report.images.iter().all(|r| r.div == 0.0);
    let budget = stochastic.train_time.max(deterministic.train_time);
    outcome(
        div > 1.0 && identical_pairs == 0 && det_div == 0.0 && det_rows_zero && budget <= DESK_BUDGET,
        format!(
            "Div {div:.3} (> 1), {identical_pairs} identical sample pairs, deterministic Div {det_div}, training {:.0} s (≤ 900 s)",
            budget.as_secs_f64()
        ),
    )
}

fn reproducibility(first: &[&DeskRun], second: &[&DeskRun]) -> Outcome {
    let mut mismatches = Vec::new();
    for (k, (a, b)) in first.iter().zip(second).enumerate() {
        if a.checkpoint != b.checkpoint {
            mismatches.push(format!("run {k} checkpoint"));
        }
        if a.report_json != b.report_json {
            mismatches.push(format!("run {k} report"));
        }
        let same_samples = a.samples.iter().flatten().zip(b.samples.iter().flatten()).all(|(x, y)| {
            x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        });
        if !same_samples {
            mismatches.push(format!("run {k} samples"));
        }
    }
    let detail = if mismatches.is_empty() {
        format!("{} pipeline runs repeated with bit-identical checkpoints, samples and reports", first.len())
    } else {
        format!("differences in {}", mismatches.join(", "))
    };
    outcome(mismatches.is_empty(), detail)
}

fn report(id: usize, title: &str, r: Result<Outcome>, failures: &mut usize) {
    let o = r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    if !o.passed {
        *failures += 1;
    }
    println!("{} {id:>2} {title}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let mut failures = 0;
    report(1, "KL oracle equivalence", kl(), &mut failures);
    report(2, "prior marginal equivalence", prior_marginal(), &mut failures);
    report(3, "gradient correctness", gradient(), &mut failures);
    report(4, "diversity brute force", diversity_brute_force(), &mut failures);
    report(5, "zero-coefficient identity", zero_coefficients(), &mut failures);

    let runs = (|| -> Result<_> { Ok((desk_run(true)?, desk_run(false)?)) })();
    let repeat = (|| -> Result<_> { Ok((desk_run(true)?, desk_run(false)?)) })();
    match (&runs, &repeat) {
        (Ok((stoch, det)), Ok((stoch2, det2))) => {
            report(6, "LR consistency", Ok(lr_consistency(stoch)), &mut failures);
            report(7, "bicubic baseline direction", bicubic_baseline(), &mut failures);
            report(8, "desk-scale diversity", Ok(desk_diversity(stoch, det)), &mut failures);
            report(9, "reproducibility", Ok(reproducibility(&[stoch, det], &[stoch2, det2])), &mut failures);
        }
        _ => {
            let err = runs
                .as_ref()
                .err()
                .or(repeat.as_ref().err())
                .map(|e| e.to_string())
                .unwrap_or_default();
            report(6, "LR consistency", Err(vspsr::Error::Data(err.clone())), &mut failures);
            report(7, "bicubic baseline direction", bicubic_baseline(), &mut failures);
            report(8, "desk-scale diversity", Err(vspsr::Error::Data(err.clone())), &mut failures);
            report(9, "reproducibility", Err(vspsr::Error::Data(err)), &mut failures);
        }
    }
    report(10, "sparsity property", sparsity(), &mut failures);

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
