//! The four subcommands. Each returns what it printed so callers and tests
//! can inspect it.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dcmtl::data::{
    check_evaluation, generate_worlds, load_dataset, make_splits, save_dataset, Dataset, SplitManifest, World,
};
use dcmtl::eval::{dump_attention, evaluate, AttentionDump, CombinationTable, TaskMetrics};
use dcmtl::tensor::{load_checkpoint, write_checkpoint};
use dcmtl::training::{curriculum_run, CurriculumOptions, LogRecord, TaskPools, TrainOptions};
use dcmtl::{Error, Model, Split, TaskKind};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliResult;

/// File the resolved configuration is echoed to.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T, Error> {
    r.map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        io(dir, fs::create_dir_all(dir))?;
    }
    Ok(io(path, fs::write(path, bytes))?)
}

fn echo_config(config: &RunConfig, out: &Path) -> CliResult<()> {
    write_file(&out.join(RESOLVED_CONFIG), config.to_toml())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_manifest(path: &Path) -> CliResult<SplitManifest> {
    let text = io(path, fs::read_to_string(path))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        }
        .into()
    })
}

/// Writes the dataset and its split manifest.
pub fn gen_data(config: &RunConfig, out: &Path) -> CliResult<String> {
    echo_config(config, out)?;
    let dataset = Dataset {
        seed: config.seed,
        worlds: generate_worlds(config.seed, config.num_worlds),
    };
    let manifest = make_splits(config.num_worlds, config.seed, config.regime)?;
    let data_path = config.resolve_path(out, &config.paths.dataset);
    let manifest_path = config.resolve_path(out, &config.paths.manifest);
    if let Some(dir) = data_path.parent() {
        io(dir, fs::create_dir_all(dir))?;
    }
    save_dataset(&dataset, &data_path)?;
    write_file(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

    let mut report = format!("{} worlds, regime {}\n", config.num_worlds, manifest.regime);
    for (task, s) in &manifest.tasks {
        report.push_str(&format!(
            "{task}: train {} val {} test {}\n",
            s.train.len(),
            s.val.len(),
            s.test.len()
        ));
    }
    Ok(report)
}

fn split_worlds<'a>(dataset: &'a Dataset, manifest: &SplitManifest, task: TaskKind, split: Split) -> Result<Vec<&'a World>, Error> {
    manifest
        .ids(task, split)
        .iter()
        .map(|&id| {
            dataset
                .world(id)
                .ok_or_else(|| Error::InvalidInput(format!("world {id} missing from dataset")))
        })
        .collect()
}

/// Metrics for every trained task whose `split` may be evaluated.
fn evaluate_split(
    model: &Model,
    config: &RunConfig,
    dataset: &Dataset,
    manifest: &SplitManifest,
    tasks: &[TaskKind],
    split: Split,
) -> Result<TaskMetrics, Error> {
    let mut metrics = TaskMetrics::default();
    for (task, tap) in config.taps() {
        if !tasks.contains(&task) {
            continue;
        }
        check_evaluation(manifest, task, split)?;
        let worlds = split_worlds(dataset, manifest, task, split)?;
        let m = evaluate(model, &[(task, tap)], &worlds)?;
        metrics.icr = metrics.icr.or(m.icr);
        metrics.vqa = metrics.vqa.or(m.vqa);
        metrics.vg = metrics.vg.or(m.vg);
    }
    Ok(metrics)
}

/// Trains per the configured curriculum and writes the checkpoint, the
/// per-iteration log and val metrics.
pub fn train(config: &RunConfig, out: &Path) -> CliResult<String> {
    echo_config(config, out)?;
    let dataset = load_dataset(&config.resolve_path(out, &config.paths.dataset))?;
    let manifest = load_manifest(&config.resolve_path(out, &config.paths.manifest))?;
    let pools = TaskPools::from_manifest(&dataset, &manifest)?;
    let mut model = Model::new(config.model.clone(), config.seed)?;

    let log_path = config.resolve_path(out, &config.paths.log);
    let metrics_path = config.resolve_path(out, &config.paths.metrics);
    let ckpt_path = config.resolve_path(out, &config.paths.checkpoint);
    let mut log = BufWriter::new(io(&log_path, File::create(&log_path))?);
    let mut metrics_log = BufWriter::new(io(&metrics_path, File::create(&metrics_path))?);

    let mut stage = 0usize;
    let mut seen_iters = 0usize;
    let val_record = |model: &Model, at: String, out: &mut BufWriter<File>| -> Result<(), Error> {
        let tasks: Vec<TaskKind> = config
            .trained_tasks()
            .into_iter()
            .filter(|&t| check_evaluation(&manifest, t, Split::Val).is_ok())
            .collect();
        let m = evaluate_split(model, config, &dataset, &manifest, &tasks, Split::Val)?;
        let line = serde_json::json!({ "at": at, "split": "val", "metrics": m });
        io(&metrics_path, writeln!(out, "{line}"))
    };
    let mut observer = |model: &Model, r: &LogRecord| -> Result<(), Error> {
        if r.iter == 0 && seen_iters > 0 {
            stage += 1;
        }
        seen_iters += 1;
        io(&log_path, writeln!(log, "stage={} {r}", stage + 1))?;
        if config.checkpoint_every > 0 && seen_iters.is_multiple_of(config.checkpoint_every) {
            let p = ckpt_path.with_extension(format!("{seen_iters}.ckpt"));
            io(&p, fs::write(&p, write_checkpoint(&model.params)))?;
        }
        if config.eval_every > 0 && seen_iters.is_multiple_of(config.eval_every) {
            val_record(model, format!("iter {seen_iters}"), &mut metrics_log)?;
        }
        Ok(())
    };
    let options = CurriculumOptions {
        train: TrainOptions {
            adam: config.adam.clone(),
            seed: config.seed,
        },
        reset_moments: config.reset_moments,
    };
    let reports = curriculum_run(
        &mut model,
        &config.tasks,
        config.cycle,
        &config.stages,
        &pools,
        &options,
        &mut observer,
    )?;
    io(&log_path, log.flush())?;
    val_record(&model, "final".into(), &mut metrics_log)?;
    io(&metrics_path, metrics_log.flush())?;

    let bytes = write_checkpoint(&model.params);
    write_file(&ckpt_path, &bytes)?;
    let hash = sha256_hex(&bytes);
    write_file(&PathBuf::from(format!("{}.sha256", ckpt_path.display())), format!("{hash}\n"))?;

    let mut report = String::new();
    for (k, r) in reports.iter().enumerate() {
        let last = r.log.last().map_or(f64::NAN, |l| l.loss);
        let names: Vec<String> = r.tasks.iter().map(|t| t.to_string()).collect();
        report.push_str(&format!(
            "stage {}: {} for {} iterations, last loss {last:.4}\n",
            k + 1,
            names.join(" + "),
            r.log.len()
        ));
    }
    report.push_str(&format!("checkpoint {} sha256 {hash}\n", ckpt_path.display()));
    Ok(report)
}

fn load_model(config: &RunConfig, checkpoint: &Path) -> CliResult<Model> {
    let mut model = Model::new(config.model.clone(), config.seed)?;
    model.load_params(&load_checkpoint(checkpoint)?)?;
    Ok(model)
}

/// Evaluates `tasks` (all trained tasks if empty) on `split`. Refuses any
/// evaluation the run's regime forbids.
pub fn eval(config: &RunConfig, out: &Path, checkpoint: &Path, split: Split, tasks: &[TaskKind]) -> CliResult<String> {
    echo_config(config, out)?;
    let manifest = load_manifest(&config.resolve_path(out, &config.paths.manifest))?;
    let tasks: Vec<TaskKind> = if tasks.is_empty() {
        config.trained_tasks()
    } else {
        tasks.to_vec()
    };
    for &t in &tasks {
        check_evaluation(&manifest, t, split)?;
    }
    let dataset = load_dataset(&config.resolve_path(out, &config.paths.dataset))?;
    let model = load_model(config, checkpoint)?;
    let metrics = evaluate_split(&model, config, &dataset, &manifest, &tasks, split)?;

    let mut table = CombinationTable::default();
    table.push(&config.trained_tasks(), metrics.clone());
    let json = serde_json::json!({
        "split": split,
        "regime": manifest.regime,
        "trained": config.trained_tasks(),
        "metrics": metrics,
        "table": table,
    });
    write_file(&out.join(format!("eval_{split}.json")), serde_json::to_string_pretty(&json)?)?;
    Ok(table.render())
}

/// Attention maps and predictions for the given world ids.
pub fn dump(config: &RunConfig, out: &Path, checkpoint: &Path, samples: &[u64]) -> CliResult<String> {
    echo_config(config, out)?;
    let dataset = load_dataset(&config.resolve_path(out, &config.paths.dataset))?;
    let model = load_model(config, checkpoint)?;
    let taps: BTreeMap<TaskKind, usize> = config.taps().into_iter().collect();
    let dumps = samples
        .iter()
        .map(|&id| {
            let world = dataset
                .world(id)
                .ok_or_else(|| Error::InvalidInput(format!("unknown sample id {id}")))?;
            Ok(dump_attention(&model, &taps, world)?)
        })
        .collect::<CliResult<Vec<AttentionDump>>>()?;
    let text = serde_json::to_string_pretty(&dumps)?;
    write_file(&out.join("attention.json"), &text)?;
    Ok(text)
}
