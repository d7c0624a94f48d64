//! The single-worker training loop: bucketed weighted sampling, per-sequence
//! forward/backward with gradient accumulation, AdamW updates on the stage
//! schedule, CSV logs, and rolling checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    clip_global_norm, config_digest, lr_at, mix_weights, save_checkpoint, AdamW, Checkpoint,
    Grads, Moments, RngState, StagePlan, TrainError,
};
use crate::data::{load_image, Bucket, ManifestRecord, TaskKind};
use crate::flow::{self, draw_t};
use crate::model::{bind_params, forward, init_params, ModelConfig, Parameters};
use crate::pack::{pack, OnVocabMiss, PackParams, Sample};
use crate::rope::RopeStrategy;
use crate::tensor::{randn_tensor, Tape, Tensor};

/// RNG stream for drawing the initial parameters.
pub const INIT_STREAM: u64 = 1;
/// RNG stream that drives every sampling decision of the training loop.
pub const TRAIN_STREAM: u64 = 2;
/// RNG stream that freezes the validation (t, noise) draws.
pub const VAL_STREAM: u64 = 3;

/// Seeded generator on one of the named streams, so initialization, the
/// training loop, and validation draw from disjoint sequences.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValConfig {
    /// Evaluate after every this many optimizer steps (and once up front and
    /// once at the end).
    pub every: u64,
    /// Cap on how many records form the frozen validation set.
    pub max_samples: usize,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub plan: StagePlan,
    pub seed: u64,
    pub strategy: RopeStrategy,
    /// Timestep-shift applied to the training time draws.
    pub shift: f64,
    /// Probability of replacing the caption with the null caption, the
    /// classifier-free guidance branch.
    pub null_caption_p: f64,
    pub token_budget: usize,
    pub batch_cap: usize,
    /// Save a rolling checkpoint every this many steps; 0 saves only at the
    /// end.
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
    pub val: Option<ValConfig>,
    /// Digest stamped into checkpoints; defaults to the model digest so
    /// library callers get architecture compatibility, while CLI runs stamp
    /// the whole parsed config.
    pub digest: Option<[u8; 32]>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, plan: StagePlan, seed: u64, out_dir: PathBuf) -> TrainConfig {
        TrainConfig {
            model,
            plan,
            seed,
            strategy: RopeStrategy::Marginal,
            shift: 5.0,
            null_caption_p: 0.1,
            token_budget: crate::data::DEFAULT_TOKEN_BUDGET,
            batch_cap: crate::data::DEFAULT_BATCH_CAP,
            checkpoint_every: 0,
            out_dir,
            val: None,
            digest: None,
        }
    }
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub task: TaskKind,
    pub bucket: String,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValRow {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: Parameters<f32>,
    pub rows: Vec<LossRow>,
    pub val_rows: Vec<ValRow>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub val_log: Option<PathBuf>,
    /// True when the stop flag cut the run short; the checkpoint still
    /// reflects the last completed step.
    pub interrupted: bool,
}

struct LoadedSample {
    weight: f64,
    sample: Sample,
    /// Rows of the concatenated target patch tokens, for noise draws.
    target_rows: usize,
}

/// All records of one task that share a bucket, with the batch size the
/// token budget allows for that bucket.
struct BucketGroup {
    bucket_id: String,
    batch_size: usize,
    /// `(sample index, weight)`; sampling is with replacement, weighted.
    members: Vec<(usize, f64)>,
    total_weight: f64,
}

fn weighted_pick(weights: &[f64], total: f64, r: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if r * total < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn load_samples(
    records: &[ManifestRecord],
    corpus_root: &Path,
    patch: usize,
) -> Result<Vec<LoadedSample>, TrainError> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let load_all = |paths: &[String]| -> Result<Vec<_>, TrainError> {
            paths
                .iter()
                .map(|p| load_image(&corpus_root.join(p)).map_err(TrainError::from))
                .collect()
        };
        let sample = Sample {
            refs: load_all(&rec.ref_paths)?,
            targets: load_all(&rec.target_paths)?,
            instruction: rec.instruction.clone(),
        };
        let target_rows = sample
            .targets
            .iter()
            .map(|im| (im.h / patch) * (im.w / patch))
            .sum();
        out.push(LoadedSample {
            weight: rec.weight,
            sample,
            target_rows,
        });
    }
    Ok(out)
}

fn group_by_task(
    records: &[ManifestRecord],
    samples: &[LoadedSample],
    patch: usize,
    token_budget: usize,
    batch_cap: usize,
) -> Result<BTreeMap<TaskKind, Vec<BucketGroup>>, TrainError> {
    let mut by_task: BTreeMap<TaskKind, Vec<BucketGroup>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        let bucket = Bucket::parse_id(&rec.bucket)?;
        let tokens = bucket.token_count(patch);
        if tokens == 0 || tokens > token_budget {
            return Err(crate::data::DataError::BudgetTooSmall {
                budget: token_budget,
                tokens,
                bucket: rec.bucket.clone(),
            }
            .into());
        }
        let batch_size = (token_budget / tokens).min(batch_cap);
        let groups = by_task.entry(rec.task).or_default();
        let group = match groups.iter_mut().find(|g| g.bucket_id == rec.bucket) {
            Some(g) => g,
            None => {
                groups.push(BucketGroup {
                    bucket_id: rec.bucket.clone(),
                    batch_size,
                    members: Vec::new(),
                    total_weight: 0.0,
                });
                groups.last_mut().unwrap()
            }
        };
        group.members.push((i, samples[i].weight));
        group.total_weight += samples[i].weight;
    }
    Ok(by_task)
}

struct ValItem {
    sample: usize,
    t: f64,
    noise: Tensor<f32>,
}

#[allow(clippy::too_many_arguments)]
fn forward_loss(
    cfg: &TrainConfig,
    pack_params: &PackParams,
    params: &Parameters<f32>,
    item: &LoadedSample,
    instruction: Option<&str>,
    t: f64,
    noise: &Tensor<f32>,
    trainable: bool,
) -> Result<(f64, Option<Grads<f32>>), TrainError> {
    let mut tape: Tape<f32> = Tape::new();
    let bound = bind_params(&mut tape, params, trainable);
    let seq = pack(&item.sample, instruction, t, noise, pack_params)?;
    let pred = forward(&mut tape, &bound, &cfg.model, &seq)?;
    let v_target = seq.v_target.as_ref().expect("training pack has a target");
    let loss = flow::fm_loss(&mut tape, pred, seq.target_offset(), v_target)?;
    let loss_val = tape.data(loss)[0] as f64;
    if !trainable {
        return Ok((loss_val, None));
    }
    tape.backward(loss)?;
    let mut grads = Grads::new();
    for (name, &id) in bound.iter() {
        if let Some(g) = tape.grad(id) {
            grads.insert(
                name.clone(),
                Tensor::new(params[name].shape().to_vec(), g.to_vec()),
            );
        }
    }
    Ok((loss_val, Some(grads)))
}

fn val_loss(
    cfg: &TrainConfig,
    pack_params: &PackParams,
    params: &Parameters<f32>,
    samples: &[LoadedSample],
    items: &[ValItem],
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    for item in items {
        let s = &samples[item.sample];
        let (loss, _) = forward_loss(
            cfg,
            pack_params,
            params,
            s,
            Some(&s.sample.instruction),
            item.t,
            &item.noise,
            false,
        )?;
        sum += loss;
    }
    Ok(sum / items.len() as f64)
}

/// Run the plan from scratch or from a checkpoint. Deterministic for a fixed
/// `(config, records, start)`: the loop consumes one dedicated RNG stream in
/// a fixed per-step order, and its position travels inside checkpoints, so a
/// resumed run reproduces the uninterrupted one bit for bit.
pub fn train(
    cfg: &TrainConfig,
    records: &[ManifestRecord],
    corpus_root: &Path,
    start: Option<Checkpoint>,
    stop: Option<&AtomicBool>,
) -> Result<TrainOutcome, TrainError> {
    let digest = cfg.digest.unwrap_or_else(|| config_digest(&cfg.model));
    let pack_params = PackParams {
        patch: cfg.model.patch,
        l_text: cfg.model.l_text,
        rope: cfg.model.rope.clone(),
        strategy: cfg.strategy,
        on_miss: OnVocabMiss::Error,
    };
    let samples = load_samples(records, corpus_root, cfg.model.patch)?;
    let by_task = group_by_task(
        records,
        &samples,
        cfg.model.patch,
        cfg.token_budget,
        cfg.batch_cap,
    )?;
    for stage in cfg.plan.stages.iter().filter(|s| s.steps > 0) {
        for task in stage.mix.tasks() {
            if by_task.get(&task).is_none_or(|g| g.is_empty()) {
                return Err(TrainError::EmptyTask { task });
            }
        }
    }

    let (mut params, mut opt, mut rng, start_step) = match start {
        Some(cp) => {
            let opt = match cp.moments {
                Some(m) => AdamW::from_parts(m.t, m.m, m.v),
                None => AdamW::new(),
            };
            (cp.params, opt, cp.rng.restore(), cp.step)
        }
        None => (
            init_params::<f32, _>(&cfg.model, &mut stream_rng(cfg.seed, INIT_STREAM)),
            AdamW::new(),
            stream_rng(cfg.seed, TRAIN_STREAM),
            0,
        ),
    };

    let val_items: Vec<ValItem> = match &cfg.val {
        None => Vec::new(),
        Some(vc) => {
            let mut vrng = stream_rng(cfg.seed, VAL_STREAM);
            samples
                .iter()
                .take(vc.max_samples)
                .enumerate()
                .map(|(i, s)| ValItem {
                    sample: i,
                    t: draw_t(&mut vrng, cfg.shift),
                    noise: randn_tensor(
                        &mut vrng,
                        &[s.target_rows, 3 * cfg.model.patch * cfg.model.patch],
                    ),
                })
                .collect()
        }
    };

    fs::create_dir_all(&cfg.out_dir).map_err(|source| TrainError::Io {
        path: cfg.out_dir.clone(),
        source,
    })?;
    let ckpt_path = cfg.out_dir.join("checkpoint.imtg");
    let save = |params: &Parameters<f32>,
                opt: &AdamW,
                rng: &ChaCha8Rng,
                step: u64|
     -> Result<(), TrainError> {
        let moments = (opt.step_count() > 0).then(|| {
            let (m, v) = opt.moments();
            Moments {
                t: opt.step_count(),
                m: m.clone(),
                v: v.clone(),
            }
        });
        let cp = Checkpoint {
            step,
            params: params.clone(),
            rng: RngState::capture(cfg.seed, rng),
            moments,
        };
        save_checkpoint(&ckpt_path, &cp, &digest)
    };

    let mut rows = Vec::new();
    let mut val_rows = Vec::new();
    if !val_items.is_empty() {
        val_rows.push(ValRow {
            step: start_step,
            loss: val_loss(cfg, &pack_params, &params, &samples, &val_items)?,
        });
    }

    let total = cfg.plan.total_steps();
    let mut reached = start_step;
    let mut interrupted = false;
    for g in start_step..total {
        if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            interrupted = true;
            break;
        }
        let (si, local) = cfg.plan.locate(g)?;
        let stage = &cfg.plan.stages[si];
        let weights = mix_weights(&stage.mix, local)?;

        // All stochastic choices for the step come from `rng` in this fixed
        // order: task, bucket, members, then (t, noise, caption drop) per
        // member.
        let wvals: Vec<f64> = weights.iter().map(|&(_, w)| w).collect();
        let task = weights[weighted_pick(&wvals, wvals.iter().sum(), rng.random())].0;
        let groups = &by_task[&task];
        let gw: Vec<f64> = groups.iter().map(|g| g.total_weight).collect();
        let group = &groups[weighted_pick(&gw, gw.iter().sum(), rng.random())];
        let mw: Vec<f64> = group.members.iter().map(|&(_, w)| w).collect();
        let picks: Vec<usize> = (0..group.batch_size)
            .map(|_| group.members[weighted_pick(&mw, group.total_weight, rng.random())].0)
            .collect();

        let mut grad_sum: Grads<f32> = Grads::new();
        let mut loss_sum = 0.0;
        for &idx in &picks {
            let s = &samples[idx];
            let t = draw_t(&mut rng, cfg.shift);
            let noise = randn_tensor::<f32, _>(
                &mut rng,
                &[s.target_rows, 3 * cfg.model.patch * cfg.model.patch],
            );
            let dropped = rng.random_bool(cfg.null_caption_p);
            let instruction = (!dropped).then_some(s.sample.instruction.as_str());
            let (loss, grads) =
                forward_loss(cfg, &pack_params, &params, s, instruction, t, &noise, true)?;
            loss_sum += loss;
            for (name, g) in grads.expect("trainable pass returns grads") {
                match grad_sum.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    None => {
                        grad_sum.insert(name, g);
                    }
                }
            }
        }
        let b = picks.len() as f64;
        let loss = loss_sum / b;
        if !loss.is_finite() {
            // Bail before touching the parameters or the checkpoint file, so
            // whatever was last saved stays usable.
            return Err(TrainError::NonFiniteLoss { step: g });
        }
        let inv_b = (1.0 / b) as f32;
        for grad in grad_sum.values_mut() {
            for v in grad.data_mut() {
                *v *= inv_b;
            }
        }
        let grad_norm = clip_global_norm(&mut grad_sum, stage.clip);
        let lr = lr_at(&cfg.plan, si, local);
        opt.step(&mut params, &grad_sum, lr, stage.weight_decay);

        rows.push(LossRow {
            step: g,
            task,
            bucket: group.bucket_id.clone(),
            loss,
            lr,
            grad_norm,
        });

        let done = g + 1;
        reached = done;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total {
            save(&params, &opt, &rng, done)?;
        }
        if let Some(vc) = &cfg.val {
            if vc.every > 0 && done % vc.every == 0 && done < total {
                val_rows.push(ValRow {
                    step: done,
                    loss: val_loss(cfg, &pack_params, &params, &samples, &val_items)?,
                });
            }
        }
    }

    if !val_items.is_empty() && !interrupted && val_rows.last().map(|r| r.step) != Some(reached) {
        val_rows.push(ValRow {
            step: reached,
            loss: val_loss(cfg, &pack_params, &params, &samples, &val_items)?,
        });
    }
    save(&params, &opt, &rng, reached)?;

    let write = |path: &Path, text: &str| -> Result<(), TrainError> {
        fs::write(path, text).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    let loss_log = cfg.out_dir.join("loss.csv");
    let mut csv = String::from("step,task,bucket,loss,lr,grad_norm\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.step, r.task, r.bucket, r.loss, r.lr, r.grad_norm
        )
        .unwrap();
    }
    write(&loss_log, &csv)?;
    let val_log = match cfg.val.is_some() {
        false => None,
        true => {
            let path = cfg.out_dir.join("val.csv");
            let mut csv = String::from("step,loss\n");
            for r in &val_rows {
                writeln!(csv, "{},{}", r.step, r.loss).unwrap();
            }
            write(&path, &csv)?;
            Some(path)
        }
    };

    Ok(TrainOutcome {
        params,
        rows,
        val_rows,
        checkpoint: ckpt_path,
        loss_log,
        val_log,
        interrupted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, SyntheticSceneSpec};
    use crate::train::{load_checkpoint, LrSchedule, MixSchedule, StageConfig};

    fn tiny_model() -> ModelConfig {
        let mut cfg = ModelConfig {
            dim: 32,
            heads: 2,
            depth_dual: 1,
            depth_single: 1,
            mlp_ratio: 2,
            patch: 8,
            l_text: 24,
            freq_dim: 16,
            ..ModelConfig::default()
        };
        cfg.rope.head_dim = 16;
        cfg.rope.split = (4, 6, 6);
        cfg
    }

    fn tiny_corpus(dir: &Path, tasks: Vec<TaskKind>, n: usize) -> Vec<ManifestRecord> {
        let spec = SyntheticSceneSpec {
            tasks,
            ..SyntheticSceneSpec::default()
        };
        gen_corpus(&spec, n, 77, dir).unwrap()
    }

    fn flat_plan(steps: u64, tasks: &[TaskKind]) -> StagePlan {
        StagePlan {
            stages: vec![StageConfig {
                steps,
                lr: 1e-3,
                schedule: LrSchedule::Constant,
                warmup: 0,
                weight_decay: 0.0,
                clip: 1.0,
                mix: MixSchedule::Flat {
                    tasks: tasks.iter().map(|&t| (t, 1)).collect(),
                },
            }],
        }
    }

    fn tiny_cfg(steps: u64, tasks: &[TaskKind], out_dir: PathBuf) -> TrainConfig {
        let mut cfg = TrainConfig::new(tiny_model(), flat_plan(steps, tasks), 5, out_dir);
        cfg.batch_cap = 1;
        cfg
    }

    #[test]
    fn zero_steps_checkpoints_exactly_the_init() {
        let dir = tempfile::tempdir().unwrap();
        let records = tiny_corpus(dir.path(), vec![TaskKind::Edit], 2);
        let cfg = TrainConfig::new(
            tiny_model(),
            StagePlan { stages: vec![] },
            5,
            dir.path().join("run"),
        );
        let out = train(&cfg, &records, dir.path(), None, None).unwrap();
        let expect: Parameters<f32> =
            init_params(&cfg.model, &mut stream_rng(cfg.seed, INIT_STREAM));
        assert_eq!(out.params, expect);
        let cp = load_checkpoint(&out.checkpoint, &config_digest(&cfg.model)).unwrap();
        assert_eq!(cp.step, 0);
        assert_eq!(cp.params, expect);
        assert!(cp.moments.is_none());
        // Header-only loss log.
        assert_eq!(
            fs::read_to_string(&out.loss_log).unwrap(),
            "step,task,bucket,loss,lr,grad_norm\n"
        );
    }

    #[test]
    fn a_raised_stop_flag_halts_before_the_next_step() {
        let dir = tempfile::tempdir().unwrap();
        let records = tiny_corpus(dir.path(), vec![TaskKind::Edit], 2);
        let cfg = tiny_cfg(4, &[TaskKind::Edit], dir.path().join("run"));
        let stop = AtomicBool::new(true);
        let out = train(&cfg, &records, dir.path(), None, Some(&stop)).unwrap();
        assert!(out.interrupted);
        assert!(out.rows.is_empty());
        // The checkpoint still lands, pinned to the step actually reached.
        let cp = load_checkpoint(&out.checkpoint, &config_digest(&cfg.model)).unwrap();
        assert_eq!(cp.step, 0);

        let calm = AtomicBool::new(false);
        let out = train(&cfg, &records, dir.path(), None, Some(&calm)).unwrap();
        assert!(!out.interrupted);
        assert_eq!(out.rows.len(), 4);
    }

    #[test]
    fn missing_task_data_is_rejected_up_front() {
        let dir = tempfile::tempdir().unwrap();
        let records = tiny_corpus(dir.path(), vec![TaskKind::Edit], 2);
        let cfg = tiny_cfg(
            3,
            &[TaskKind::Video, TaskKind::Edit],
            dir.path().join("run"),
        );
        match train(&cfg, &records, dir.path(), None, None) {
            Err(TrainError::EmptyTask { task }) => assert_eq!(task, TaskKind::Video),
            other => panic!("expected EmptyTask, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_reproduces_logs_and_checkpoint_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let records = tiny_corpus(dir.path(), vec![TaskKind::Edit, TaskKind::Video], 4);
        let mut outs = Vec::new();
        for run in ["a", "b"] {
            let mut cfg = tiny_cfg(
                3,
                &[TaskKind::Edit, TaskKind::Video],
                dir.path().join(run),
            );
            cfg.val = Some(ValConfig {
                every: 2,
                max_samples: 2,
            });
            outs.push(train(&cfg, &records, dir.path(), None, None).unwrap());
        }
        let read = |p: &Path| fs::read(p).unwrap();
        assert_eq!(read(&outs[0].loss_log), read(&outs[1].loss_log));
        assert_eq!(
            read(outs[0].val_log.as_ref().unwrap()),
            read(outs[1].val_log.as_ref().unwrap())
        );
        assert_eq!(read(&outs[0].checkpoint), read(&outs[1].checkpoint));
        assert!(outs[0].rows.iter().all(|r| r.loss.is_finite()));
        assert_eq!(outs[0].rows.len(), 3);
        // Initial, step-2, and final validation evaluations.
        let steps: Vec<u64> = outs[0].val_rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 2, 3]);

        let mut other = tiny_cfg(3, &[TaskKind::Edit, TaskKind::Video], dir.path().join("c"));
        other.seed = 6;
        let diff = train(&other, &records, dir.path(), None, None).unwrap();
        assert_ne!(read(&outs[0].loss_log), read(&diff.loss_log));
    }

    #[test]
    fn resuming_from_a_checkpoint_matches_the_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let records = tiny_corpus(dir.path(), vec![TaskKind::Edit], 3);
        let tasks = [TaskKind::Edit];

        let full_cfg = tiny_cfg(4, &tasks, dir.path().join("full"));
        let full = train(&full_cfg, &records, dir.path(), None, None).unwrap();

        let half_cfg = tiny_cfg(2, &tasks, dir.path().join("half"));
        let half = train(&half_cfg, &records, dir.path(), None, None).unwrap();
        let digest = config_digest(&half_cfg.model);
        let cp = load_checkpoint(&half.checkpoint, &digest).unwrap();
        assert_eq!(cp.step, 2);

        let resume_cfg = tiny_cfg(4, &tasks, dir.path().join("resume"));
        let resumed = train(&resume_cfg, &records, dir.path(), Some(cp), None).unwrap();

        assert_eq!(
            fs::read(&full.checkpoint).unwrap(),
            fs::read(&resumed.checkpoint).unwrap()
        );
        assert_eq!(resumed.rows, full.rows[2..].to_vec());
    }
}
