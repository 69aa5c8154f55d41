//! The alternating training loop and the staged curriculum driver.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::task_loss;
use super::optim::{adam_step, lr_schedule, AdamConfig, OptimizerState};
use super::plan::{build_task_sequence, derive_joint_plan, TaskSpec, TrainPlan};
use crate::data::{check_contamination, Dataset, SplitManifest, World};
use crate::error::{Error, Result};
use crate::model::{Forward, Model};
use crate::rng::{self, Rng};
use crate::task::{Split, TaskKind};
use crate::tensor::{ParamId, Tape};

/// Training samples available to each task.
#[derive(Clone, Debug)]
pub struct TaskPools<'a> {
    pools: BTreeMap<TaskKind, Vec<&'a World>>,
}

impl<'a> TaskPools<'a> {
    /// Every world in `worlds` feeds every task.
    pub fn shared(worlds: &'a [World]) -> Self {
        let all: Vec<&World> = worlds.iter().collect();
        Self {
            pools: TaskKind::ALL.into_iter().map(|t| (t, all.clone())).collect(),
        }
    }

    /// Train pools named by `manifest`, after checking it for contamination.
    pub fn from_manifest(dataset: &'a Dataset, manifest: &SplitManifest) -> Result<Self> {
        check_contamination(manifest)?;
        let mut pools = BTreeMap::new();
        for task in TaskKind::ALL {
            let worlds = manifest
                .ids(task, Split::Train)
                .iter()
                .map(|&id| {
                    dataset
                        .world(id)
                        .ok_or_else(|| Error::InvalidInput(format!("world {id} missing from dataset")))
                })
                .collect::<Result<Vec<_>>>()?;
            pools.insert(task, worlds);
        }
        Ok(Self { pools })
    }

    pub fn get(&self, task: TaskKind) -> &[&'a World] {
        self.pools.get(&task).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Shuffled passes over a pool, drawn without replacement within a pass.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl EpochSampler {
    fn new(len: usize, rng: Rng) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    /// Seeds batch sampling and dropout masks.
    pub seed: u64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub task: TaskKind,
    pub lr: f64,
    pub loss: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} task={} lr={:e} loss={:.17e}",
            self.iter,
            self.task.name(),
            self.lr,
            self.loss
        )
    }
}

/// Called after every update with the model and that update's record.
pub type Observer<'o> = dyn FnMut(&Model, &LogRecord) -> Result<()> + 'o;

/// Runs the task sequence of `plan`: each iteration samples a batch for one
/// task, encodes it to that task's tap, applies its decoder and loss, and
/// takes one Adam step on the parameters that took part.
pub fn train(
    model: &mut Model,
    plan: &TrainPlan,
    pools: &TaskPools<'_>,
    state: &mut OptimizerState,
    options: &TrainOptions,
    observer: &mut Observer<'_>,
) -> Result<Vec<LogRecord>> {
    let sequence = build_task_sequence(plan)?;
    for spec in &plan.tasks {
        if spec.tap > model.config.depth {
            return Err(Error::TapOutOfRange {
                tap: spec.tap,
                depth: model.config.depth,
            });
        }
        if pools.get(spec.task).is_empty() {
            return Err(Error::InvalidInput(format!("no training worlds for {}", spec.task)));
        }
    }
    let mut samplers: Vec<EpochSampler> = plan
        .tasks
        .iter()
        .map(|s| {
            let stream = rng::indexed_stream(options.seed, "sampler", s.task as u64);
            EpochSampler::new(pools.get(s.task).len(), stream)
        })
        .collect();
    let mut dropout_rng = rng::stream(options.seed, "dropout");
    let mut log = Vec::with_capacity(sequence.len());

    for (iter, &k) in sequence.iter().enumerate() {
        let spec = &plan.tasks[k];
        let pool = pools.get(spec.task);
        let batch: Vec<&World> = samplers[k].next_batch(spec.batch_size).into_iter().map(|i| pool[i]).collect();
        state.lr = lr_schedule(iter, plan.total_step, options.adam.lr, options.adam.decay);

        let mut tape = Tape::new();
        let root = {
            let mut fwd = Forward::train(&mut tape, &model.params, &model.config, &mut dropout_rng);
            task_loss(&mut fwd, model, spec.task, spec.tap, &batch)?
        };
        let loss = tape.value(root).item()?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("{} loss at iteration {iter} is {loss}", spec.task)));
        }
        let grads = tape.backward(root)?;
        model.params.zero_grads();
        model.params.accumulate(&tape, &grads)?;
        let active: Vec<ParamId> = tape.bound_params().map(|(id, _)| id).collect();
        adam_step(&mut model.params, &active, state, &options.adam)?;

        let record = LogRecord {
            iter,
            task: spec.task,
            lr: state.lr,
            loss,
        };
        observer(model, &record)?;
        log.push(record);
    }
    model.params.zero_grads();
    Ok(log)
}

/// Result of one curriculum stage.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub tasks: Vec<TaskKind>,
    pub plan: TrainPlan,
    pub log: Vec<LogRecord>,
    /// Parameter checksums on entry and exit.
    pub checksum_in: u64,
    pub checksum_out: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumOptions {
    pub train: TrainOptions,
    /// Start every stage with fresh optimizer moments.
    pub reset_moments: bool,
}

fn stage_seed(seed: u64, stage: usize) -> u64 {
    seed.wrapping_add((stage as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Trains on each stage's task subset in turn, carrying parameters (and,
/// unless reset, optimizer moments) from one stage to the next. Each
/// stage's plan is derived from exactly the specs of its tasks.
pub fn curriculum_run(
    model: &mut Model,
    specs: &[TaskSpec],
    cycle: usize,
    stages: &[Vec<TaskKind>],
    pools: &TaskPools<'_>,
    options: &CurriculumOptions,
    observer: &mut Observer<'_>,
) -> Result<Vec<StageReport>> {
    if stages.is_empty() {
        return Err(Error::Plan("curriculum has no stages".into()));
    }
    let mut plans = Vec::with_capacity(stages.len());
    for (k, stage) in stages.iter().enumerate() {
        if k > 0 && stage.len() < stages[k - 1].len() {
            return Err(Error::Plan(format!(
                "stage {} trains fewer tasks than the stage before it",
                k + 1
            )));
        }
        let chosen = stage
            .iter()
            .map(|t| {
                specs
                    .iter()
                    .find(|s| s.task == *t)
                    .cloned()
                    .ok_or_else(|| Error::Plan(format!("stage {} names {t}, which has no task spec", k + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        plans.push(derive_joint_plan(&chosen, cycle)?);
    }

    let mut state = OptimizerState::new(&model.params, options.train.adam.lr);
    let mut reports = Vec::with_capacity(stages.len());
    for (k, (stage, plan)) in stages.iter().zip(plans).enumerate() {
        if k > 0 && options.reset_moments {
            state = OptimizerState::new(&model.params, options.train.adam.lr);
        }
        let opts = TrainOptions {
            seed: stage_seed(options.train.seed, k),
            ..options.train.clone()
        };
        let checksum_in = model.params.checksum();
        let log = train(model, &plan, pools, &mut state, &opts, observer)?;
        reports.push(StageReport {
            tasks: stage.clone(),
            plan,
            log,
            checksum_in,
            checksum_out: model.params.checksum(),
        });
    }
    Ok(reports)
}
