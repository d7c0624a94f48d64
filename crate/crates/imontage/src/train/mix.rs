//! Task-mixture schedules and the per-stage learning-rate table.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    CosineToZero,
}

/// How one stage samples its tasks each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixSchedule {
    /// Constant weights proportional to per-task data amounts.
    Flat { tasks: Vec<(TaskKind, u64)> },
    /// Linear interpolation between two fixed weightings across the stage.
    Ramp {
        steps: u64,
        from: Vec<(TaskKind, f64)>,
        to: Vec<(TaskKind, f64)>,
    },
    /// Two phases: a head subset first, the full union afterwards, each
    /// size-proportional.
    Staged {
        boundary: u64,
        phase1: Vec<(TaskKind, u64)>,
        phase2: Vec<(TaskKind, u64)>,
    },
    /// Difficulty-ordered introduction: the newest task takes 0.8, earlier
    /// tasks split 0.2 evenly.
    Cocktail {
        steps: u64,
        /// `(task, introduction step)` in difficulty order; introductions
        /// must be non-decreasing and start at 0.
        tasks: Vec<(TaskKind, u64)>,
    },
}

impl MixSchedule {
    /// Pretraining ramp: video-continuation against editing, 0.75:0.25
    /// sliding linearly to 0.25:0.75 across the stage.
    pub fn stage1_ramp(steps: u64) -> MixSchedule {
        MixSchedule::Ramp {
            steps,
            from: vec![(TaskKind::Video, 0.75), (TaskKind::Edit, 0.25)],
            to: vec![(TaskKind::Video, 0.25), (TaskKind::Edit, 0.75)],
        }
    }

    /// The many-in/one-out trio first, the many-out tasks joining at the
    /// stage midpoint.
    pub fn staged_default(steps: u64, sizes: &[(TaskKind, u64)]) -> MixSchedule {
        let size_of = |t: TaskKind| {
            sizes
                .iter()
                .find(|(task, _)| *task == t)
                .map_or(1, |&(_, n)| n.max(1))
        };
        let head = [TaskKind::MultiRef, TaskKind::CondRef, TaskKind::StyleRef];
        let tail = [TaskKind::MultiTurn, TaskKind::MultiView, TaskKind::Storyboard];
        MixSchedule::Staged {
            boundary: steps / 2,
            phase1: head.iter().map(|&t| (t, size_of(t))).collect(),
            phase2: head
                .iter()
                .chain(tail.iter())
                .map(|&t| (t, size_of(t)))
                .collect(),
        }
    }

    /// Introductions evenly spaced across the stage, one per task in the
    /// given difficulty order.
    pub fn cocktail_even(steps: u64, tasks: &[TaskKind]) -> MixSchedule {
        let k = tasks.len() as u64;
        MixSchedule::Cocktail {
            steps,
            tasks: tasks
                .iter()
                .enumerate()
                .map(|(i, &t)| (t, i as u64 * steps / k.max(1)))
                .collect(),
        }
    }

    /// Every task this schedule can ever emit.
    pub fn tasks(&self) -> Vec<TaskKind> {
        let mut out: Vec<TaskKind> = match self {
            MixSchedule::Flat { tasks } => tasks.iter().map(|&(t, _)| t).collect(),
            MixSchedule::Ramp { from, to, .. } => from
                .iter()
                .chain(to.iter())
                .map(|&(t, _)| t)
                .collect(),
            MixSchedule::Staged { phase1, phase2, .. } => phase1
                .iter()
                .chain(phase2.iter())
                .map(|&(t, _)| t)
                .collect(),
            MixSchedule::Cocktail { tasks, .. } => tasks.iter().map(|&(t, _)| t).collect(),
        };
        out.sort();
        out.dedup();
        out
    }
}

fn proportional(sizes: &[(TaskKind, u64)]) -> Vec<(TaskKind, f64)> {
    let total: u64 = sizes.iter().map(|&(_, n)| n).sum();
    assert!(total > 0, "mixture needs at least one sample");
    sizes
        .iter()
        .map(|&(t, n)| (t, n as f64 / total as f64))
        .collect()
}

/// Per-task sampling probabilities at `step` of the stage. Non-negative and
/// summing to 1 within 1e-12 for every strategy at every step.
pub fn mix_weights(
    schedule: &MixSchedule,
    step: u64,
) -> Result<Vec<(TaskKind, f64)>, TrainError> {
    let out_of_range = |steps: u64| TrainError::StepOutOfRange { step, steps };
    match schedule {
        MixSchedule::Flat { tasks } => Ok(proportional(tasks)),
        MixSchedule::Ramp { steps, from, to } => {
            if step >= *steps {
                return Err(out_of_range(*steps));
            }
            assert_eq!(from.len(), to.len(), "ramp endpoints must align");
            let p = if *steps <= 1 {
                0.0
            } else {
                step as f64 / (*steps - 1) as f64
            };
            Ok(from
                .iter()
                .zip(to)
                .map(|(&(task, a), &(task2, b))| {
                    assert_eq!(task, task2, "ramp endpoints must align");
                    (task, a + (b - a) * p)
                })
                .collect())
        }
        MixSchedule::Staged {
            boundary,
            phase1,
            phase2,
        } => {
            let phase = if step < *boundary { phase1 } else { phase2 };
            Ok(proportional(phase))
        }
        MixSchedule::Cocktail { steps, tasks } => {
            if step >= *steps {
                return Err(out_of_range(*steps));
            }
            let active: Vec<TaskKind> = tasks
                .iter()
                .filter(|&&(_, intro)| intro <= step)
                .map(|&(t, _)| t)
                .collect();
            assert!(
                !active.is_empty(),
                "cocktail schedules must introduce a task at step 0"
            );
            let k = active.len();
            Ok(active
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let w = if k == 1 {
                        1.0
                    } else if i == k - 1 {
                        0.8
                    } else {
                        0.2 / (k - 1) as f64
                    };
                    (t, w)
                })
                .collect())
        }
    }
}

/// One stage of the plan, mirroring the hyperparameter table row for row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub steps: u64,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub warmup: u64,
    pub weight_decay: f64,
    pub clip: f64,
    pub mix: MixSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageConfig>,
}

impl StagePlan {
    /// The reference three-stage recipe: constant-lr pretraining with a
    /// video:edit ramp, constant-lr joint training with the staged mixture,
    /// then a short cosine-to-zero annealing pass over everything.
    /// `sizes` is the per-task record census of the corpus.
    pub fn reference(steps: [u64; 3], sizes: &[(TaskKind, u64)]) -> StagePlan {
        let all: Vec<(TaskKind, u64)> = sizes
            .iter()
            .copied()
            .map(|(t, n)| (t, n.max(1)))
            .collect();
        StagePlan {
            stages: vec![
                StageConfig {
                    steps: steps[0],
                    lr: 1e-5,
                    schedule: LrSchedule::Constant,
                    warmup: 1000,
                    weight_decay: 0.0,
                    clip: 1.0,
                    mix: MixSchedule::stage1_ramp(steps[0]),
                },
                StageConfig {
                    steps: steps[1],
                    lr: 1e-5,
                    schedule: LrSchedule::Constant,
                    warmup: 500,
                    weight_decay: 0.01,
                    clip: 1.0,
                    mix: MixSchedule::staged_default(steps[1], sizes),
                },
                StageConfig {
                    steps: steps[2],
                    lr: 1e-5,
                    schedule: LrSchedule::CosineToZero,
                    warmup: 0,
                    weight_decay: 0.01,
                    clip: 1.0,
                    mix: MixSchedule::Flat { tasks: all },
                },
            ],
        }
    }

    /// Step counts of the full-scale recipe.
    pub const REFERENCE_STEPS: [u64; 3] = [50_000, 15_000, 2_000];

    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// Map a global step to `(stage index, step within stage)`.
    pub fn locate(&self, global_step: u64) -> Result<(usize, u64), TrainError> {
        let mut base = 0;
        for (i, stage) in self.stages.iter().enumerate() {
            if global_step < base + stage.steps {
                return Ok((i, global_step - base));
            }
            base += stage.steps;
        }
        Err(TrainError::StepOutOfRange {
            step: global_step,
            steps: self.total_steps(),
        })
    }
}

/// Learning rate at `step` of stage `stage`: linear warmup from zero, then
/// the stage schedule (constant, or cosine annealed to exactly zero at the
/// final step).
pub fn lr_at(plan: &StagePlan, stage: usize, step: u64) -> f64 {
    let s = &plan.stages[stage];
    debug_assert!(step < s.steps, "step beyond stage length");
    if step < s.warmup {
        return s.lr * step as f64 / s.warmup as f64;
    }
    match s.schedule {
        LrSchedule::Constant => s.lr,
        LrSchedule::CosineToZero => {
            let progress = if s.steps <= 1 {
                1.0
            } else {
                (step as f64 / (s.steps - 1) as f64).min(1.0)
            };
            s.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}
