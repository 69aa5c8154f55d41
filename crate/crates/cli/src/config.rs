//! Run configuration: defaults, TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use dcmtl::data::Regime;
use dcmtl::training::{growing_stages, AdamConfig, TaskSpec, CURRICULUM_ORDER, DEFAULT_CYCLE};
use dcmtl::{ModelConfig, TaskKind};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

/// File names inside the output directory. Relative paths resolve against
/// `--out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub metrics: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "worlds.jsonl".into(),
            manifest: "manifest.json".into(),
            checkpoint: "model.ckpt".into(),
            log: "train.log".into(),
            metrics: "metrics.log".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub num_worlds: u64,
    pub regime: Regime,
    /// Updates per task-switching cycle.
    pub cycle: usize,
    /// Task subsets trained in order; parameters carry over between them.
    pub stages: Vec<Vec<TaskKind>>,
    pub reset_moments: bool,
    /// Write a checkpoint every this many iterations (0: final only).
    pub checkpoint_every: usize,
    /// Evaluate on val every this many iterations (0: after training only).
    pub eval_every: usize,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub tasks: Vec<TaskSpec>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_worlds: 1000,
            regime: Regime::Standard,
            cycle: DEFAULT_CYCLE,
            stages: growing_stages(&CURRICULUM_ORDER),
            reset_moments: false,
            checkpoint_every: 0,
            eval_every: 0,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            tasks: vec![
                TaskSpec::new(TaskKind::Icr, 3, 32, 700, 500),
                TaskSpec::new(TaskKind::Vqa, 5, 64, 900, 500),
                TaskSpec::new(TaskKind::Vg, 2, 32, 400, 500),
            ],
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        for t in &self.tasks {
            if t.tap == 0 || t.tap > self.model.depth {
                return Err(dcmtl::Error::TapOutOfRange {
                    tap: t.tap,
                    depth: self.model.depth,
                }
                .into());
            }
        }
        for stage in &self.stages {
            for task in stage {
                if !self.tasks.iter().any(|t| t.task == *task) {
                    return Err(CliError::Config(format!("stage names {task}, which has no [[tasks]] entry")));
                }
            }
        }
        if self.stages.is_empty() {
            return Err(CliError::Config("at least one stage is required".into()));
        }
        Ok(())
    }

    /// Decoder depth for each configured task.
    pub fn taps(&self) -> Vec<(TaskKind, usize)> {
        self.tasks.iter().map(|t| (t.task, t.tap)).collect()
    }

    /// Tasks of the last stage, the combination a run ends up trained on.
    pub fn trained_tasks(&self) -> Vec<TaskKind> {
        self.stages.last().cloned().unwrap_or_default()
    }

    pub fn resolve_path(&self, out: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out.join(p)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

fn merge(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `v` as a TOML value, falling back to a plain string.
fn parse_value(v: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()))
}

/// Sets a dotted key such as `model.dim` or `tasks.0.iters`.
fn set_key(root: &mut Table, key: &str, value: Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let bad = || CliError::Config(format!("cannot set {key:?}"));
    let (last, path) = parts.split_last().ok_or_else(bad)?;
    let mut cur: &mut Value = root.get_mut(parts[0]).ok_or_else(bad)?;
    if path.is_empty() {
        root.insert((*last).to_string(), value);
        return Ok(());
    }
    for p in &path[1..] {
        cur = match cur {
            Value::Table(t) => t.get_mut(*p).ok_or_else(bad)?,
            Value::Array(a) => a.get_mut(p.parse::<usize>().map_err(|_| bad())?).ok_or_else(bad)?,
            _ => return Err(bad()),
        };
    }
    match cur {
        Value::Table(t) => {
            t.insert((*last).to_string(), value);
        }
        Value::Array(a) => {
            let i: usize = last.parse().map_err(|_| bad())?;
            *a.get_mut(i).ok_or_else(bad)? = value;
        }
        _ => return Err(bad()),
    }
    Ok(())
}

/// Defaults, overlaid by `file`, overlaid by `overrides` (`key=value`).
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut table = Table::try_from(RunConfig::default()).expect("defaults serialise");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| dcmtl::Error::io(path, e))?;
        let overlay: Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, overlay);
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
        set_key(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let config: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = resolve(
            None,
            &[
                "seed=9".into(),
                "model.dim=16".into(),
                "tasks.1.iters=5".into(),
                "regime=vqa-trainval".into(),
                "stages=[[\"icr\"],[\"icr\",\"vg\"]]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.dim, 16);
        assert_eq!(c.tasks[1].iters, 5);
        assert_eq!(c.regime, Regime::VqaTrainval);
        assert_eq!(c.stages, vec![vec![TaskKind::Icr], vec![TaskKind::Icr, TaskKind::Vg]]);
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\ncycle = 6\n[model]\ndepth = 3\n").unwrap();
        let c = resolve(Some(&path), &["seed=5".into(), "tasks.1.tap=3".into()]).unwrap();
        assert_eq!((c.seed, c.cycle, c.model.depth, c.model.dim), (5, 6, 3, 32));
    }

    #[test]
    fn rejects_unknown_keys_and_deep_taps() {
        assert!(resolve(None, &["nonsense=1".into()]).is_err());
        assert!(resolve(None, &["model.bogus=1".into()]).is_err());
        assert!(resolve(None, &["tasks.0.tap=9".into()]).is_err());
    }
}
