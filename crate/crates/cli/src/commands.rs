use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use urbanform::dataset::{build_manifest, write_synth_corpus, Manifest, ManifestEntry, LABEL_CHANNEL};
use urbanform::metrics::{
    evaluate_pair, fractal_csv, report_csv, zipf_csv, Aggregate, FractalValidation, MetricReport,
};
use urbanform::raster::{export_pgm, read_grid, write_atomic, write_grid, Domain};
use urbanform::trainer::{train, Checkpoint, Trainer};

use crate::args::{BuildArgs, Command, DatasetCommand, EvaluateArgs, GenerateArgs, SynthArgs, TrainArgs};
use crate::config::RunConfig;
use crate::error::CliError;

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Dataset(DatasetCommand::Build(a)) => dataset_build(&a),
        Command::Dataset(DatasetCommand::Synth(a)) => dataset_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    Manifest::load(path).map_err(|e| CliError::Data(format!("cannot load manifest {}: {e}", path.display())))
}

/// Sample stem shared by a city's label file and its generated map.
fn entry_stem(entry: &ManifestEntry) -> String {
    let name = entry.path.rsplit('/').next().unwrap_or(&entry.path);
    name.strip_suffix(&format!("_{LABEL_CHANNEL}.urg")).unwrap_or(name).to_string()
}

fn dataset_build(a: &BuildArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let p = &mut cfg.pipeline;
    if let Some(t) = a.threshold {
        p.filter_threshold = t;
    }
    if let Some(n) = a.test_count {
        p.test_count = n;
    }
    if let Some(s) = a.seed {
        p.seed = s;
    }
    if !(0.0..=1.0).contains(&p.filter_threshold) {
        return Err(CliError::Usage(format!("--threshold must lie in [0, 1], got {}", p.filter_threshold)));
    }
    let manifest = build_manifest(&a.input, &a.out, &cfg.pipeline)?;
    cfg.write_resolved(&parent_dir(&a.out))?;
    info!(
        "wrote {} with {} cities ({} test)",
        a.out.display(),
        manifest.entries.len(),
        manifest.split(urbanform::dataset::Split::Test).count()
    );
    Ok(())
}

fn dataset_synth(a: &SynthArgs) -> Result<(), CliError> {
    let manifest = write_synth_corpus(&a.out, a.count, a.size, a.water, a.seed, a.test_count)?;
    let mut cfg = RunConfig::default();
    cfg.pipeline.resolution = a.size;
    cfg.pipeline.seed = a.seed;
    cfg.pipeline.test_count = a.test_count;
    cfg.write_resolved(&a.out)?;
    info!("wrote {} synthetic cities to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let t = &mut cfg.train;
    if a.no_geo {
        t.geo_enabled = false;
    }
    if a.no_adversarial {
        t.adversarial_enabled = false;
    }
    if a.spectral_norm {
        t.spectral_norm = true;
    }
    if a.physical_only {
        t.physical_only = true;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if t.spectral_norm && !t.adversarial_enabled {
        return Err(CliError::Usage("spectral norm needs the adversarial loss".into()));
    }
    t.validate()?;
    let manifest = load_manifest(&a.manifest)?;
    cfg.write_resolved(&a.out)?;
    let outcome = train(&manifest, &parent_dir(&a.manifest), &cfg.train, Some(&a.out))?;
    let last = outcome.reports.last();
    info!(
        "finished {} iterations; final checkpoint {}; last l1 {}",
        outcome.trainer.iter(),
        a.out.join(Checkpoint::file_name(outcome.trainer.iter())).display(),
        last.map_or(f64::NAN, |r| r.l1)
    );
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.ckpt)
        .map_err(|e| CliError::Data(format!("cannot load checkpoint {}: {e}", a.ckpt.display())))?;
    let trainer = Trainer::from_checkpoint(&ckpt).map_err(CliError::data)?;
    let manifest = load_manifest(&a.manifest)?;
    let entries: Vec<&ManifestEntry> = manifest.split(a.split).collect();
    if entries.is_empty() {
        return Err(CliError::Data(format!("manifest has no {} cities", a.split)));
    }
    let set = trainer
        .prepare_split(&manifest, &parent_dir(&a.manifest), a.split)
        .map_err(CliError::data)?;
    let maps = trainer.generate(&set).map_err(CliError::data)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", a.out.display())))?;
    for (entry, map) in entries.iter().zip(&maps) {
        let stem = entry_stem(entry);
        write_grid(map, a.out.join(format!("{stem}.urg")))?;
        export_pgm(map, a.out.join(format!("{stem}.pgm")))?;
    }
    let cfg = RunConfig {
        train: ckpt.meta.config.clone(),
        ..RunConfig::default()
    };
    cfg.write_resolved(&a.out)?;
    info!("wrote {} maps to {}", maps.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    matched: usize,
    unmatched: &'a [String],
    aggregate: Aggregate,
    fractal_validation: Option<FractalValidation>,
}

fn companion(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}_{suffix}"))
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(l) = a.spm_levels {
        cfg.evaluate.spm_levels = Some(l);
    }
    if let Some(m) = a.fractal_mode {
        cfg.evaluate.fractal_mode = m;
    }
    let opts = cfg.evaluate;
    let manifest = load_manifest(&a.manifest)?;
    let root = parent_dir(&a.manifest);

    let listing = fs::read_dir(&a.generated)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", a.generated.display())))?;
    let mut generated: BTreeMap<String, PathBuf> = BTreeMap::new();
    for item in listing {
        let path = item.map_err(|e| CliError::Data(e.to_string()))?.path();
        if path.extension().is_some_and(|x| x == "urg") {
            let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
            generated.insert(stem, path);
        }
    }

    let mut rows = Vec::new();
    let mut unmatched = Vec::new();
    for entry in manifest.split(a.split) {
        let stem = entry_stem(entry);
        let Some(path) = generated.remove(&stem) else {
            unmatched.push(stem);
            continue;
        };
        let gen = read_grid(&path).map_err(CliError::data)?;
        if gen.domain() != Domain::Binary {
            return Err(CliError::Data(format!("{} is not a binary map", path.display())));
        }
        let label = read_grid(root.join(&entry.path)).map_err(CliError::data)?;
        if gen.dims() != label.dims() {
            return Err(CliError::Data(format!(
                "{stem}: generated map is {}x{}, label is {}x{}",
                gen.width(),
                gen.height(),
                label.width(),
                label.height()
            )));
        }
        rows.push(evaluate_pair(&stem, &gen, &label, &opts)?);
    }
    unmatched.extend(generated.into_keys());
    unmatched.sort();
    for id in &unmatched {
        warn!("no match for {id}; skipped");
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!(
            "no generated map in {} matches a {} city of {}",
            a.generated.display(),
            a.split,
            a.manifest.display()
        )));
    }
    let report = MetricReport::new(rows);
    let out_dir = parent_dir(&a.out);
    fs::create_dir_all(&out_dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    write_atomic(&a.out, report_csv(&report, &opts).as_bytes())?;
    write_atomic(&companion(&a.out, "fractal.csv"), fractal_csv(&report).as_bytes())?;
    write_atomic(&companion(&a.out, "zipf.csv"), zipf_csv(&report).as_bytes())?;
    let summary = Summary {
        matched: report.rows.len(),
        unmatched: &unmatched,
        aggregate: report.aggregate(),
        fractal_validation: report.fractal_validation(),
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    write_atomic(&companion(&a.out, "summary.json"), json.as_bytes())?;
    cfg.write_resolved(&parent_dir(&a.out))?;
    if !unmatched.is_empty() {
        warn!("{} unmatched cities skipped", unmatched.len());
    }
    info!("scored {} cities into {}", report.rows.len(), a.out.display());
    Ok(())
}
