//! Joint-plan arithmetic and the periodic task-switching sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskKind;

/// Default number of updates per switching cycle.
pub const DEFAULT_CYCLE: usize = 10;

/// Order in which the default curriculum adds tasks.
pub const CURRICULUM_ORDER: [TaskKind; 3] = [TaskKind::Vqa, TaskKind::Vg, TaskKind::Icr];

/// Stages that add one task at a time: `[a], [a, b], [a, b, c]`.
pub fn growing_stages(order: &[TaskKind]) -> Vec<Vec<TaskKind>> {
    (1..=order.len()).map(|k| order[..k].to_vec()).collect()
}

/// Single-task training settings, fixed before joint training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: TaskKind,
    /// Encoder depth whose state feeds the decoder.
    pub tap: usize,
    pub batch_size: usize,
    /// Iteration budget.
    pub iters: usize,
    /// Learning-rate decay step size.
    pub step: usize,
}

impl TaskSpec {
    pub fn new(task: TaskKind, tap: usize, batch_size: usize, iters: usize, step: usize) -> Self {
        Self {
            task,
            tap,
            batch_size,
            iters,
            step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub tasks: Vec<TaskSpec>,
    pub total_iter: usize,
    pub total_step: usize,
    /// Share of updates per task, `iters / total_iter`.
    pub alphas: Vec<f64>,
    /// Updates per cycle `C`.
    pub cycle: usize,
}

impl TrainPlan {
    /// Updates each task receives within one cycle, summing to `cycle`.
    ///
    /// `C * alpha_i` is floored and the leftover slots go to the largest
    /// remainders, lower task index first on ties. Computed in integers so
    /// the result does not depend on float rounding.
    pub fn slots(&self) -> Vec<usize> {
        let total = self.total_iter.max(1);
        let quota: Vec<(usize, usize)> = self
            .tasks
            .iter()
            .map(|t| {
                let q = self.cycle * t.iters;
                (q / total, q % total)
            })
            .collect();
        let mut slots: Vec<usize> = quota.iter().map(|q| q.0).collect();
        let left = self.cycle - slots.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..quota.len()).collect();
        order.sort_by(|&a, &b| quota[b].1.cmp(&quota[a].1).then(a.cmp(&b)));
        for &i in order.iter().take(left) {
            slots[i] += 1;
        }
        slots
    }

    pub fn num_cycles(&self) -> usize {
        self.total_iter / self.cycle.max(1)
    }

    pub fn spec(&self, task: TaskKind) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task == task)
    }

    fn validate(&self) -> Result<()> {
        if self.num_cycles() == 0 {
            return Err(Error::Plan(format!(
                "{} iterations do not fill one cycle of {}",
                self.total_iter, self.cycle
            )));
        }
        if let Some(i) = self.slots().iter().position(|&s| s == 0) {
            return Err(Error::StarvedTask {
                task: self.tasks[i].task.to_string(),
                cycle: self.cycle,
            });
        }
        Ok(())
    }
}

/// Sums budgets and step sizes over `specs` and derives each task's share.
pub fn derive_joint_plan(specs: &[TaskSpec], cycle: usize) -> Result<TrainPlan> {
    if specs.is_empty() {
        return Err(Error::Plan("no tasks to train".into()));
    }
    if specs.len() > TaskKind::ALL.len() {
        return Err(Error::Plan(format!("{} tasks given, at most 3 exist", specs.len())));
    }
    for (i, s) in specs.iter().enumerate() {
        if specs[..i].iter().any(|o| o.task == s.task) {
            return Err(Error::Plan(format!("task {} listed twice", s.task)));
        }
        if s.tap == 0 || s.batch_size == 0 || s.iters == 0 || s.step == 0 {
            return Err(Error::Plan(format!(
                "task {}: tap, batch_size, iters and step must be positive",
                s.task
            )));
        }
    }
    if cycle == 0 {
        return Err(Error::Plan("cycle length must be positive".into()));
    }
    let total_iter: usize = specs.iter().map(|s| s.iters).sum();
    let total_step: usize = specs.iter().map(|s| s.step).sum();
    let plan = TrainPlan {
        tasks: specs.to_vec(),
        total_iter,
        total_step,
        alphas: specs.iter().map(|s| s.iters as f64 / total_iter as f64).collect(),
        cycle,
    };
    plan.validate()?;
    Ok(plan)
}

/// Task indices (into `plan.tasks`) in execution order: each cycle gives
/// task `i` a contiguous block of `slots[i]` updates, repeated
/// `floor(total_iter / cycle)` times.
pub fn build_task_sequence(plan: &TrainPlan) -> Result<Vec<usize>> {
    plan.validate()?;
    let block: Vec<usize> = plan
        .slots()
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat_n(i, n))
        .collect();
    Ok(block.repeat(plan.num_cycles()))
}
