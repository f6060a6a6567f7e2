//! The subcommands. Each takes a validated [`RunConfig`] and returns the
//! paths or records it produced.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use harmonize_core::metrics::{
    aggregate_folds, evaluate_pair, GroupSummary, Histogram, MetricsReport, Method, PairRecord,
    REPORT_COLUMNS,
};
use harmonize_core::phantom::threshold_segment_with;
use harmonize_core::predictor::train_with_progress;
use harmonize_core::{hvol, translate_volume, Checkpoint, Direction, SmallNet};
use rayon::prelude::*;

use crate::config::{require_dir, RunConfig};
use crate::dataset::{generate_cohort, load_subject, training_pairs, Manifest, SubjectData};
use crate::error::{io_at, CliError, CliResult};
use crate::folds::{split, FoldFile};
use crate::seeds::derive;

pub const CHECKPOINT_FILE: &str = "model.hxck";
pub const LOSS_FILE: &str = "loss.csv";
pub const TRANSLATED_DIR: &str = "translated";
pub const TIMING_FILE: &str = "timing.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const HISTOGRAM_DIR: &str = "histograms";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";

fn create_dir(dir: &Path) -> CliResult<()> {
    io_at(dir, std::fs::create_dir_all(dir))
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    io_at(path, File::create(path)).map(BufWriter::new)
}

pub fn gen_phantoms(cfg: &RunConfig) -> CliResult<Manifest> {
    let manifest = generate_cohort(&cfg.cohort, &cfg.paths.data_dir)?;
    cfg.echo_into(&cfg.paths.data_dir)?;
    log::info!(
        "wrote {} subjects to {} (spec {})",
        manifest.subjects.len(),
        cfg.paths.data_dir.display(),
        manifest.spec_hash
    );
    Ok(manifest)
}

pub fn split_folds(cfg: &RunConfig) -> CliResult<FoldFile> {
    require_dir(&cfg.paths.data_dir, "data directory")?;
    let manifest = Manifest::read(&cfg.paths.data_dir)?;
    let folds = split(&manifest.ids(), cfg.folds.k, cfg.folds.shuffle_seed)?;
    let file = FoldFile {
        k: cfg.folds.k,
        shuffle_seed: cfg.folds.shuffle_seed,
        manifest_digest: manifest.digest(),
        folds,
    };
    create_dir(&cfg.paths.out_dir)?;
    file.write(&cfg.paths.out_dir)?;
    cfg.echo_into(&cfg.paths.out_dir)?;
    Ok(file)
}

/// Manifest and fold split, checked against each other.
fn load_split(cfg: &RunConfig) -> CliResult<(Manifest, FoldFile)> {
    require_dir(&cfg.paths.data_dir, "data directory")?;
    require_dir(&cfg.paths.out_dir, "output directory")?;
    let manifest = Manifest::read(&cfg.paths.data_dir)?;
    let folds = FoldFile::read(&cfg.paths.out_dir)?;
    if folds.manifest_digest != manifest.digest() {
        return Err(CliError::Config(
            "fold file was made for a different dataset; rerun split-folds".into(),
        ));
    }
    Ok((manifest, folds))
}

fn load_subjects(
    data_dir: &Path,
    ids: &[String],
    direction: Direction,
) -> CliResult<Vec<SubjectData>> {
    ids.par_iter()
        .map(|id| load_subject(data_dir, id, direction))
        .collect()
}

pub fn train(cfg: &RunConfig, fold: usize) -> CliResult<PathBuf> {
    let (_, folds) = load_split(cfg)?;
    let fold_spec = folds.fold(fold)?;
    let sched = cfg.schedule()?;
    let subjects = load_subjects(&cfg.paths.data_dir, &fold_spec.train, cfg.direction)?;
    let pairs = training_pairs(&subjects, cfg.data.skip_empty_slices);
    if pairs.is_empty() {
        return Err(CliError::Data("no training slices".into()));
    }

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = derive(cfg.seed, &[SEED_TRAIN, fold as u64, dir_code(cfg.direction), cfg.train.seed]);
    let init_seed = derive(cfg.seed, &[SEED_INIT, fold as u64, dir_code(cfg.direction)]);
    let net = SmallNet::new(cfg.model.clone(), init_seed)?;
    log::info!(
        "fold {fold} {}: {} slices from {} subjects, {} parameters",
        cfg.direction,
        pairs.len(),
        subjects.len(),
        cfg.model.parameter_count()
    );
    let every = (train_cfg.iterations / 20).max(1);
    let outcome = train_with_progress(net, &pairs, &sched, &train_cfg, |i, loss| {
        if i % every == 0 {
            log::info!("iteration {i}: loss {loss:.6}");
        }
    })?;

    let dir = cfg.run_dir(fold);
    create_dir(&dir)?;
    let ckpt = Checkpoint {
        direction: cfg.direction,
        schedule: cfg.schedule,
        precision: train_cfg.precision,
        net: outcome.net,
    };
    let path = dir.join(CHECKPOINT_FILE);
    ckpt.save(&path)?;
    let loss_path = dir.join(LOSS_FILE);
    let mut w = create_file(&loss_path)?;
    io_at(&loss_path, writeln!(w, "iteration,loss"))?;
    for (i, l) in outcome.losses.iter().enumerate() {
        io_at(&loss_path, writeln!(w, "{},{l}", i + 1))?;
    }
    io_at(&loss_path, w.flush())?;
    cfg.echo_into(&dir)?;
    Ok(path)
}

/// Loads the fold's checkpoint, refusing any mismatch with the config.
pub fn load_checkpoint(cfg: &RunConfig, fold: usize) -> CliResult<Checkpoint> {
    let path = cfg.run_dir(fold).join(CHECKPOINT_FILE);
    let ckpt = Checkpoint::load(&path)?;
    ckpt.ensure_direction(cfg.direction)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if ckpt.schedule != cfg.schedule {
        return Err(CliError::Config(format!(
            "{}: checkpoint schedule {:?} differs from configured {:?}",
            path.display(),
            ckpt.schedule,
            cfg.schedule
        )));
    }
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub subject_id: String,
    pub seconds: f64,
}

/// Translates the fold's test subjects into `run_dir/translated`.
pub fn translate(cfg: &RunConfig, fold: usize) -> CliResult<Vec<Timing>> {
    let ckpt = load_checkpoint(cfg, fold)?;
    let (_, folds) = load_split(cfg)?;
    let fold_spec = folds.fold(fold)?;
    let sched = cfg.schedule()?;
    let dir = cfg.run_dir(fold);
    let out = dir.join(TRANSLATED_DIR);
    create_dir(&out)?;

    let mut timings = Vec::new();
    for id in &fold_spec.test {
        let subject = load_subject(&cfg.paths.data_dir, id, cfg.direction)?;
        let seed = sample_seed(cfg, fold, id);
        let start = Instant::now();
        let result = translate_volume(
            &subject.input,
            &ckpt.net,
            &sched,
            seed,
            cfg.translate.options(),
        )?;
        let seconds = start.elapsed().as_secs_f64();
        log::info!("{id}: translated in {seconds:.1} s");
        hvol::write(out.join(format!("{id}.hvol")), &result.volume)?;
        timings.push(Timing {
            subject_id: id.clone(),
            seconds,
        });
    }
    let path = dir.join(TIMING_FILE);
    let mut w = create_file(&path)?;
    io_at(&path, writeln!(w, "subject_id,seconds"))?;
    for t in &timings {
        io_at(&path, writeln!(w, "{},{}", t.subject_id, t.seconds))?;
    }
    io_at(&path, w.flush())?;
    cfg.echo_into(&dir)?;
    Ok(timings)
}

/// Sampling seed of one test subject.
pub fn sample_seed(cfg: &RunConfig, fold: usize, subject_id: &str) -> u64 {
    let tag = subject_id
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(0x100_0000_01B3) ^ b as u64);
    derive(cfg.seed, &[SEED_SAMPLE, fold as u64, dir_code(cfg.direction), tag])
}

/// Scores the fold's test subjects. Original rows compare the untranslated
/// input with the reference; DM rows compare the translation with the
/// reference and are present only when translations exist.
pub fn evaluate(cfg: &RunConfig, fold: usize) -> CliResult<MetricsReport> {
    let (manifest, folds) = load_split(cfg)?;
    let fold_spec = folds.fold(fold)?;
    let (input_contrast, ref_contrast) = manifest.contrasts(cfg.direction);
    let (input_order, ref_order) = (input_contrast.tissue_order(), ref_contrast.tissue_order());
    let dir = cfg.run_dir(fold);
    let translated = dir.join(TRANSLATED_DIR);
    let available: Vec<bool> = fold_spec
        .test
        .iter()
        .map(|id| translated.join(format!("{id}.hvol")).is_file())
        .collect();
    let with_dm = available.iter().all(|&a| a);
    if !with_dm && available.iter().any(|&a| a) {
        return Err(CliError::Data(format!(
            "{} holds translations for only some test subjects",
            translated.display()
        )));
    }
    if !with_dm {
        log::warn!("no translations in {}; writing Original rows only", translated.display());
    }

    let hist_dir = dir.join(HISTOGRAM_DIR);
    create_dir(&hist_dir)?;
    let opts = &cfg.metrics;
    let per_subject = fold_spec
        .test
        .par_iter()
        .map(|id| -> CliResult<Vec<PairRecord>> {
            let s = load_subject(&cfg.paths.data_dir, id, cfg.direction)?;
            let ref_seg = threshold_segment_with(&s.reference, ref_order)?;
            let input_seg = threshold_segment_with(&s.input, input_order)?;
            let record = |method, (mse, ahd, classes)| PairRecord {
                subject_id: id.clone(),
                direction: cfg.direction,
                method,
                mse,
                ahd,
                classes,
            };
            let mut rows = vec![record(
                Method::Original,
                evaluate_pair(&s.input, &s.reference, &input_seg, &ref_seg, opts)?,
            )];
            write_histogram(&hist_dir, id, "reference", &s.reference, cfg)?;
            write_histogram(&hist_dir, id, Method::Original.tag(), &s.input, cfg)?;
            if with_dm {
                let out = hvol::read(translated.join(format!("{id}.hvol")))?;
                if !out.same_geometry(&s.reference) {
                    return Err(CliError::Data(format!("{id}: translation geometry differs")));
                }
                let out_seg = threshold_segment_with(&out, ref_order)?;
                rows.push(record(
                    Method::Diffusion,
                    evaluate_pair(&out, &s.reference, &out_seg, &ref_seg, opts)?,
                ));
                write_histogram(&hist_dir, id, Method::Diffusion.tag(), &out, cfg)?;
            }
            Ok(rows)
        })
        .collect::<CliResult<Vec<_>>>()?;

    let report = MetricsReport {
        fold,
        records: per_subject.into_iter().flatten().collect(),
    };
    let csv_path = dir.join(METRICS_CSV);
    let mut w = create_file(&csv_path)?;
    report.write_csv(&mut w)?;
    io_at(&csv_path, w.flush())?;
    let json_path = dir.join(METRICS_JSON);
    let json = serde_json::to_string_pretty(&report)?;
    io_at(&json_path, std::fs::write(&json_path, json))?;
    cfg.echo_into(&dir)?;
    Ok(report)
}

fn write_histogram(
    dir: &Path,
    id: &str,
    what: &str,
    v: &harmonize_core::Volume,
    cfg: &RunConfig,
) -> CliResult<()> {
    let h = Histogram::of_volume(v, cfg.metrics.histogram)?;
    let path = dir.join(format!("{id}_{what}.csv"));
    let mut w = create_file(&path)?;
    h.write_csv(&mut w)?;
    io_at(&path, w.flush())
}

/// Every fold report of the configured output directory, both directions.
pub fn collect_reports(out_dir: &Path) -> CliResult<Vec<MetricsReport>> {
    let mut fold_dirs: Vec<(usize, PathBuf)> = io_at(out_dir, std::fs::read_dir(out_dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let k = name.strip_prefix("fold-")?.parse().ok()?;
            Some((k, e.path()))
        })
        .collect();
    fold_dirs.sort();
    let mut reports = Vec::new();
    for (fold, dir) in fold_dirs {
        let mut records = Vec::new();
        for d in [Direction::SourceToTarget, Direction::TargetToSource] {
            let path = dir.join(d.tag()).join(METRICS_JSON);
            if path.is_file() {
                let text = io_at(&path, std::fs::read_to_string(&path))?;
                let r: MetricsReport = serde_json::from_str(&text)?;
                records.extend(r.records);
            }
        }
        if !records.is_empty() {
            reports.push(MetricsReport { fold, records });
        }
    }
    Ok(reports)
}

pub fn report(cfg: &RunConfig) -> CliResult<Vec<GroupSummary>> {
    require_dir(&cfg.paths.out_dir, "output directory")?;
    let reports = collect_reports(&cfg.paths.out_dir)?;
    if reports.is_empty() {
        return Err(CliError::Data(format!(
            "no fold metrics under {}",
            cfg.paths.out_dir.display()
        )));
    }
    let summary = aggregate_folds(&reports)?;
    let json_path = cfg.paths.out_dir.join(SUMMARY_JSON);
    io_at(
        &json_path,
        std::fs::write(&json_path, serde_json::to_string_pretty(&summary)?),
    )?;
    let csv_path = cfg.paths.out_dir.join(SUMMARY_CSV);
    let mut w = create_file(&csv_path)?;
    io_at(&csv_path, writeln!(w, "direction,method,metric,folds,mean,variance"))?;
    for g in &summary {
        for name in &REPORT_COLUMNS[3..] {
            let (mean, var) = g
                .get(name)
                .map(|s| (s.mean.to_string(), s.variance.to_string()))
                .unwrap_or_default();
            io_at(
                &csv_path,
                writeln!(
                    w,
                    "{},{},{name},{},{mean},{var}",
                    g.direction,
                    g.method.tag(),
                    g.folds
                ),
            )?;
        }
    }
    io_at(&csv_path, w.flush())?;
    cfg.echo_into(&cfg.paths.out_dir)?;
    Ok(summary)
}

const SEED_TRAIN: u64 = 1;
const SEED_INIT: u64 = 2;
const SEED_SAMPLE: u64 = 3;

fn dir_code(d: Direction) -> u64 {
    match d {
        Direction::SourceToTarget => 0,
        Direction::TargetToSource => 1,
    }
}
