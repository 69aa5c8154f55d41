use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::task::{Split, TaskKind};

pub const MIN_WORLDS: u64 = 30;

/// Which training pools a run draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Every task trains on the shared train partition; all tasks may be
    /// evaluated on val and test.
    Standard,
    /// Question answering additionally trains on val. Retrieval and
    /// grounding evaluation is then forbidden for the run, since their val
    /// and test images are no longer unseen by the shared encoder.
    VqaTrainval,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Standard => "standard",
            Regime::VqaTrainval => "vqa-trainval",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Regime::Standard),
            "vqa-trainval" => Ok(Regime::VqaTrainval),
            other => Err(Error::InvalidInput(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl TaskSplits {
    pub fn get(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// World-id partitions per task for one run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub regime: Regime,
    pub seed: u64,
    pub num_worlds: u64,
    pub tasks: BTreeMap<TaskKind, TaskSplits>,
    /// `(task, split)` pairs that may be evaluated in this run. Train-split
    /// evaluation is always allowed and never listed.
    pub evaluable: Vec<(TaskKind, Split)>,
}

impl SplitManifest {
    pub fn task(&self, task: TaskKind) -> &TaskSplits {
        &self.tasks[&task]
    }

    pub fn ids(&self, task: TaskKind, split: Split) -> &[u64] {
        self.task(task).get(split)
    }
}

/// 80/10/10 partition of world ids `0..num_worlds`, shuffled by `seed`.
pub fn make_splits(num_worlds: u64, seed: u64, regime: Regime) -> Result<SplitManifest> {
    if num_worlds < MIN_WORLDS {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_WORLDS} worlds to split, got {num_worlds}"
        )));
    }
    let mut ids: Vec<u64> = (0..num_worlds).collect();
    ids.shuffle(&mut rng::stream(seed, "splits"));
    let n_val = (num_worlds / 10) as usize;
    let n_test = n_val;
    let n_train = ids.len() - n_val - n_test;
    let sorted = |s: &[u64]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let base = TaskSplits {
        train: sorted(&ids[..n_train]),
        val: sorted(&ids[n_train..n_train + n_val]),
        test: sorted(&ids[n_train + n_val..]),
    };
    let mut tasks = BTreeMap::new();
    for t in TaskKind::ALL {
        tasks.insert(t, base.clone());
    }
    let evaluable = match regime {
        Regime::Standard => TaskKind::ALL
            .into_iter()
            .flat_map(|t| [(t, Split::Val), (t, Split::Test)])
            .collect(),
        Regime::VqaTrainval => {
            let vqa = tasks.get_mut(&TaskKind::Vqa).expect("vqa splits");
            vqa.train = sorted(&[base.train.as_slice(), base.val.as_slice()].concat());
            vqa.val.clear();
            vec![(TaskKind::Vqa, Split::Test)]
        }
    };
    let manifest = SplitManifest {
        regime,
        seed,
        num_worlds,
        tasks,
        evaluable,
    };
    check_contamination(&manifest)?;
    Ok(manifest)
}

/// Verifies that each task's partitions are disjoint and that no world
/// evaluated in this run appears in any task's training pool.
pub fn check_contamination(manifest: &SplitManifest) -> Result<()> {
    let mut training: BTreeSet<u64> = BTreeSet::new();
    for (task, s) in &manifest.tasks {
        let train: BTreeSet<u64> = s.train.iter().copied().collect();
        for split in [Split::Val, Split::Test] {
            if let Some(&id) = s.get(split).iter().find(|id| train.contains(id)) {
                return Err(Error::Contamination {
                    world_id: id,
                    task: task.to_string(),
                    split: split.to_string(),
                });
            }
        }
        if let Some(&id) = s.val.iter().find(|id| s.test.contains(id)) {
            return Err(Error::Contamination {
                world_id: id,
                task: task.to_string(),
                split: "val/test".into(),
            });
        }
        training.extend(train);
    }
    for &(task, split) in &manifest.evaluable {
        let ids = manifest
            .tasks
            .get(&task)
            .ok_or_else(|| Error::InvalidInput(format!("manifest lacks task {task}")))?
            .get(split);
        if let Some(&id) = ids.iter().find(|id| training.contains(id)) {
            return Err(Error::Contamination {
                world_id: id,
                task: task.to_string(),
                split: split.to_string(),
            });
        }
    }
    Ok(())
}

/// Refuses evaluations the manifest does not permit.
pub fn check_evaluation(manifest: &SplitManifest, task: TaskKind, split: Split) -> Result<()> {
    if split == Split::Train || manifest.evaluable.contains(&(task, split)) {
        Ok(())
    } else {
        Err(Error::ForbiddenEvaluation {
            task: task.to_string(),
            split: split.to_string(),
            regime: manifest.regime.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[u64]) -> BTreeSet<u64> {
        v.iter().copied().collect()
    }

    #[test]
    fn standard_partition() {
        let m = make_splits(100, 3, Regime::Standard).unwrap();
        let icr = m.task(TaskKind::Icr);
        assert_eq!((icr.train.len(), icr.val.len(), icr.test.len()), (80, 10, 10));
        for t in TaskKind::ALL {
            assert_eq!(m.task(t), icr);
        }
        assert!(set(&icr.train).is_disjoint(&set(&icr.test)));
        assert!(set(&icr.train).is_disjoint(&set(&icr.val)));
        let all: BTreeSet<u64> = icr.train.iter().chain(&icr.val).chain(&icr.test).copied().collect();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn trainval_regime() {
        let std = make_splits(100, 3, Regime::Standard).unwrap();
        let m = make_splits(100, 3, Regime::VqaTrainval).unwrap();
        let vqa = set(&m.task(TaskKind::Vqa).train);
        let base = &std.task(TaskKind::Icr);
        assert!(vqa.is_superset(&set(&base.train)));
        assert!(vqa.is_superset(&set(&base.val)));
        for t in [TaskKind::Icr, TaskKind::Vg] {
            for s in [Split::Val, Split::Test] {
                assert!(check_evaluation(&m, t, s).is_err());
            }
        }
        check_evaluation(&m, TaskKind::Vqa, Split::Test).unwrap();
        check_evaluation(&m, TaskKind::Icr, Split::Train).unwrap();
        for t in TaskKind::ALL {
            assert!(set(m.ids(t, Split::Train)).is_disjoint(&set(m.ids(t, Split::Test))));
        }
    }

    #[test]
    fn injected_world_is_reported() {
        let mut m = make_splits(50, 1, Regime::Standard).unwrap();
        let leaked = m.task(TaskKind::Vg).test[0];
        m.tasks.get_mut(&TaskKind::Icr).unwrap().train.push(leaked);
        match check_contamination(&m) {
            Err(Error::Contamination { world_id, .. }) => assert_eq!(world_id, leaked),
            other => panic!("expected contamination, got {other:?}"),
        }
    }

    #[test]
    fn too_few_worlds() {
        assert!(make_splits(29, 0, Regime::Standard).is_err());
        make_splits(30, 0, Regime::Standard).unwrap();
    }

    #[test]
    fn regime_names_round_trip() {
        for r in [Regime::Standard, Regime::VqaTrainval] {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        }
    }
}
