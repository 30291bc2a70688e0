//! Subcommand implementations.

use std::fmt::Write;
use std::path::Path;

use mracl::fusion::ToyModel;
use mracl::losses::MarginUnit;
use mracl::metrics::{anisotropy_histogram, metrics_csv, MetricsReport, PREC_THRESHOLDS};
use mracl::synth::{generate_dataset, read_dataset, write_dataset, Dataset, Split};
use mracl::train::{embed, evaluate, factor_grid, train as run_train, write_run_dir, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::plot;
use crate::CliError;

const HIST_PAIRS: usize = 10_000;
const HIST_BINS: usize = 36;
const PROFILE_POINTS: usize = 60;

/// Refuses a non-empty `dir` unless `force` is set.
fn claim_output(dir: &Path, force: bool) -> Result<(), CliError> {
    let occupied = dir.exists() && (dir.is_file() || std::fs::read_dir(dir)?.next().is_some());
    if occupied && !force {
        return Err(CliError::Conflict(format!(
            "{} already exists and is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    if !dir.join(mracl::synth::MANIFEST_FILE).exists() {
        return Err(CliError::Config(format!("{} is not a dataset directory", dir.display())));
    }
    read_dataset(dir).map_err(|e| CliError::Runtime(format!("dataset {}: {e}", dir.display())))
}

fn dataset_for(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Dataset, CliError> {
    match data {
        Some(dir) => load_data(dir),
        None => generate_dataset(&cfg.scene, &cfg.sizes).map_err(|e| CliError::Runtime(format!("generation failed: {e}"))),
    }
}

fn summary(ds: &Dataset) -> String {
    let counts: Vec<String> = Split::ALL.iter().map(|&s| format!("{} {}", s.name(), ds.split(s).len())).collect();
    format!("{} (seed {})", counts.join(", "), ds.manifest.scene.seed)
}

pub fn gen_data(config: &Path, out: Option<&Path>, force: bool, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config, seed)?;
    let dir = cfg.out_dir(out)?;
    claim_output(&dir, force)?;
    let ds = generate_dataset(&cfg.scene, &cfg.sizes).map_err(|e| CliError::Runtime(format!("generation failed: {e}")))?;
    write_dataset(&ds, &dir)?;
    println!("wrote {}: {}", dir.display(), summary(&ds));
    Ok(())
}

pub fn validate_data(data: &Path) -> Result<(), CliError> {
    let ds = load_data(data)?;
    println!("valid: {}", summary(&ds));
    Ok(())
}

pub fn train(config: &Path, data: Option<&Path>, out: Option<&Path>, force: bool, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config, seed)?;
    let dir = cfg.out_dir(out)?;
    claim_output(&dir, force)?;
    let ds = dataset_for(&cfg, data)?;
    let outcome = run_train(&ds, &cfg.train, Some(&dir))?;
    write_run_dir(&dir, &ds, &cfg.train, &outcome)?;
    let h = &outcome.history;
    println!(
        "{}: {} epochs, best epoch {}, masked negatives {}",
        cfg.train.loss_kind,
        h.epochs.len(),
        h.best().epoch,
        h.total_masked_negatives()
    );
    print!("{}", h.final_table());
    println!("run directory: {}", dir.display());
    Ok(())
}

const SUMMARY_HEADER: &str = "cell,status,loss_kind,augmentation,filtering,margin_m,nu,alpha";

fn summary_row(label: &str, cfg: &TrainConfig, result: &Result<(MetricsReport, MetricsReport), String>) -> String {
    let mut row = format!(
        "{label},{},{},{},{},{},{},{}",
        if result.is_ok() { "ok" } else { "FAILED" },
        cfg.loss_kind,
        cfg.augmentation_enabled,
        cfg.filtering_enabled,
        cfg.hyper.margin_m,
        cfg.hyper.nu,
        cfg.hyper.alpha
    );
    match result {
        Ok((st, mo)) => {
            for r in [st, mo] {
                let _ = write!(row, ",{:.6},{:.6}", r.miou, r.oiou);
                for p in PREC_THRESHOLDS {
                    let _ = write!(row, ",{:.6}", r.prec_at(p).unwrap_or(f64::NAN));
                }
                let _ = write!(row, ",{}", r.n_samples);
            }
        }
        Err(_) => row.push_str(&",".repeat(12)),
    }
    row
}

fn summary_header() -> String {
    let mut h = String::from(SUMMARY_HEADER);
    for split in ["static", "motion"] {
        let _ = write!(h, ",{split}_mIoU,{split}_oIoU");
        for p in PREC_THRESHOLDS {
            let _ = write!(h, ",{split}_P@{p}");
        }
        let _ = write!(h, ",{split}_n");
    }
    h
}

/// Cells named by the sweep: the factor grid, then one cell per value of
/// each hyperparameter list with everything else from `train`.
fn ablation_cells(cfg: &ExperimentConfig) -> Vec<(String, TrainConfig)> {
    let base = &cfg.train;
    let mut cells = Vec::new();
    if cfg.sweep.factor_grid {
        cells.extend(factor_grid(base));
    }
    let unit = match base.hyper.margin_unit {
        MarginUnit::Degrees => "deg",
        MarginUnit::Radians => "rad",
    };
    for &m in &cfg.sweep.margin {
        let mut c = base.clone();
        c.hyper.margin_m = m;
        cells.push((format!("m={m}{unit}"), c));
    }
    for &nu in &cfg.sweep.nu {
        let mut c = base.clone();
        c.hyper.nu = nu;
        cells.push((format!("nu={nu}"), c));
    }
    for &alpha in &cfg.sweep.alpha {
        let mut c = base.clone();
        c.hyper.alpha = alpha;
        cells.push((format!("alpha={alpha}"), c));
    }
    cells
}

pub fn ablate(
    config: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
    force: bool,
    seed: Option<u64>,
    jobs: Option<usize>,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config, seed)?;
    if cfg.sweep.is_empty() {
        return Err(CliError::Config(
            "invalid config field `sweep`: enable factor_grid or list margin, nu or alpha values".into(),
        ));
    }
    let dir = cfg.out_dir(out)?;
    claim_output(&dir, force)?;
    let ds = dataset_for(&cfg, data)?;
    let cells = ablation_cells(&cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let results: Vec<Result<(MetricsReport, MetricsReport), String>> = pool.install(|| {
        cells
            .par_iter()
            .map(|(_, c)| {
                run_train(&ds, c, None)
                    .map(|o| (o.history.best().test_static.clone(), o.history.best().test_motion.clone()))
                    .map_err(|e| e.to_string())
            })
            .collect()
    });
    let mut table = summary_header() + "\n";
    for ((label, c), r) in cells.iter().zip(&results) {
        table.push_str(&summary_row(label, c, r));
        table.push('\n');
        if let Err(e) = r {
            eprintln!("cell {label} FAILED: {e}");
        }
    }
    std::fs::write(dir.join("summary.csv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn diagnose(checkpoint: &Path, data: &Path, out: &Path, force: bool, seed: u64) -> Result<(), CliError> {
    if !checkpoint.is_file() {
        return Err(CliError::Config(format!("checkpoint {} not found", checkpoint.display())));
    }
    let model = ToyModel::load(checkpoint).map_err(|e| CliError::Config(format!("checkpoint {}: {e}", checkpoint.display())))?;
    let ds = load_data(data)?;
    claim_output(out, force)?;

    let emb: Vec<Vec<f64>> = ds
        .test_static
        .iter()
        .chain(&ds.test_motion)
        .map(|s| embed(&model, s))
        .collect::<mracl::Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hist = anisotropy_histogram(&emb, HIST_PAIRS, HIST_BINS, &mut rng)?;
    std::fs::write(out.join("anisotropy.csv"), hist.to_csv())?;
    std::fs::write(out.join("anisotropy.svg"), hist.to_svg("fused test embeddings"))?;

    let profile = plot::gradient_profile(PROFILE_POINTS, model.embed_dim(), &mut rng)?;
    std::fs::write(out.join("gradient_profile.csv"), plot::profile_csv(&profile))?;
    std::fs::write(out.join("gradient_profile.svg"), plot::profile_svg(&profile))?;

    let reports: Vec<(&str, MetricsReport)> = Split::ALL
        .iter()
        .map(|&s| Ok((s.name(), evaluate(&model, ds.split(s))?)))
        .collect::<mracl::Result<_>>()?;
    let table = metrics_csv(reports.iter().map(|(n, r)| (*n, r)));
    std::fs::write(out.join("metrics.csv"), &table)?;
    println!(
        "anisotropy: mean {:.4} std {:.4} over {} pairs",
        hist.mean,
        hist.std,
        hist.total()
    );
    print!("{table}");
    println!("diagnostics written to {}", out.display());
    Ok(())
}
