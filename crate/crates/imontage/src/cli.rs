//! Command-line entry point tying the pipeline together: `curate` builds
//! the synthetic corpus, `train` runs the curriculum, `sample` generates a
//! PNG grid from a checkpoint, `eval` scores a generated set, and
//! `ablate-rope` trains the two position layouts side by side.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config
//! error, 130 after Ctrl-C. `IMONTAGE_LOG={error,info,debug}` controls
//! verbosity.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};
use crate::data::{
    assign_bucket, filter_pairs, fit_to_bucket, gen_corpus, load_image, load_manifest,
    save_image, save_manifest, Bucket, DataError, ManifestRecord, TaskKind,
};
use crate::eval::{evaluate, DefaultExtractor, EvalError, Template, VlmClient, VlmEndpoint};
use crate::flow::{sample, FlowError};
use crate::pack::Image;
use crate::rope::RopeStrategy;
use crate::train::{
    load_checkpoint, train, Checkpoint, LrSchedule, MixSchedule, StageConfig, StagePlan,
    TrainConfig, TrainError, ValConfig,
};

const FLAG_REFERENCE: &str = "Flag reference:
  global       --config PATH   --seed N   --out DIR   --strategy marginal|even
  curate       (global flags only)
  train        --steps N   --resume
  sample       --refs CSV   --prompt STR   --n-out N   --steps N   --cfg-scale X
  eval         --gen CSV   --refs CSV   --gen-masks CSV   --ref-masks CSV   --prompt STR   --vlm URL
  ablate-rope  --steps N   --n-out N

Environment: IMONTAGE_LOG={error,info,debug} (default error).";

#[derive(Parser, Debug)]
#[command(
    name = "imontage",
    version,
    about = "Many-in, many-out image generation experiments",
    after_help = FLAG_REFERENCE
)]
struct Cli {
    /// JSON run config; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Position-layout strategy override.
    #[arg(long, global = true, value_name = "marginal|even", value_parser = parse_strategy)]
    strategy: Option<RopeStrategy>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic corpus, motion-filter it, bucket it, and
    /// write the manifest.
    Curate,
    /// Run the training curriculum and write checkpoint + CSV logs.
    Train(TrainArgs),
    /// Generate images from a checkpoint in one pass and write a PNG grid.
    Sample(SampleArgs),
    /// Score a generated set against references and write an eval report.
    Eval(EvalArgs),
    /// Train both position layouts with a shared seed and emit
    /// side-by-side losses and an image grid.
    #[command(name = "ablate-rope")]
    AblateRope(AblateArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Replace the configured curriculum with one flat stage of N steps
    /// over every task in the manifest.
    #[arg(long, value_name = "N")]
    steps: Option<u64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Comma-separated reference image paths.
    #[arg(long, value_name = "CSV", required = true)]
    refs: String,
    /// Editing instruction.
    #[arg(long, value_name = "STR", required = true)]
    prompt: String,
    /// Images to generate in the single pass.
    #[arg(long, value_name = "N", default_value_t = 1)]
    n_out: usize,
    /// Integrator steps override.
    #[arg(long, value_name = "N")]
    steps: Option<usize>,
    /// Guidance scale override.
    #[arg(long, value_name = "X")]
    cfg_scale: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Comma-separated generated image paths.
    #[arg(long, value_name = "CSV", required = true)]
    gen: String,
    /// Comma-separated reference image paths.
    #[arg(long, value_name = "CSV", required = true)]
    refs: String,
    /// Foreground masks for the generated images; full-frame when omitted.
    #[arg(long, value_name = "CSV")]
    gen_masks: Option<String>,
    /// Foreground masks for the references; full-frame when omitted.
    #[arg(long, value_name = "CSV")]
    ref_masks: Option<String>,
    /// Editing instruction passed to the judge.
    #[arg(long, value_name = "STR", default_value = "")]
    prompt: String,
    /// Judge endpoint URL; `stub:N` answers offline with a fixed score.
    #[arg(long, value_name = "URL")]
    vlm: Option<String>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Replace the configured curriculum with one flat stage of N steps
    /// over every task in the manifest (applied to both runs).
    #[arg(long, value_name = "N")]
    steps: Option<u64>,
    /// Images per strategy in the comparison grid.
    #[arg(long, value_name = "N")]
    n_out: Option<usize>,
}

fn parse_strategy(s: &str) -> Result<RopeStrategy, String> {
    match s {
        "marginal" => Ok(RopeStrategy::Marginal),
        "even" => Ok(RopeStrategy::Even),
        other => Err(format!("expected `marginal` or `even`, got `{other}`")),
    }
}

enum Failure {
    /// Bad configuration (file or flag values): exit 3.
    Config(String),
    /// Everything that breaks at run time: exit 1.
    Runtime(String),
    /// Ctrl-C landed and the checkpoint was saved: exit 130.
    Interrupted,
}

type CResult<T> = Result<T, Failure>;

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Failure {
        Failure::Config(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for Failure {
            fn from(e: $ty) -> Failure {
                Failure::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(DataError, TrainError, FlowError, EvalError);

/// Parse `argv`, dispatch, and map the outcome to an exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("IMONTAGE_LOG", "error"),
    )
    .try_init();

    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print to stdout and succeed; real usage
            // errors get the diagnostic plus full help on stderr.
            let is_usage = e.use_stderr();
            let _ = e.print();
            if !is_usage {
                return 0;
            }
            eprintln!();
            eprintln!("{}", Cli::command().render_help());
            return 2;
        }
    };

    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            3
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Interrupted) => {
            eprintln!("interrupted: checkpoint saved");
            130
        }
    }
}

fn dispatch(cli: Cli) -> CResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    // The digest pins the parsed file; flag overrides are session-local.
    let digest = cfg.digest();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(strategy) = cli.strategy {
        cfg.strategy = strategy;
    }

    match cli.cmd {
        Cmd::Curate => cmd_curate(&cfg),
        Cmd::Train(args) => cmd_train(&cfg, digest, &args),
        Cmd::Sample(args) => cmd_sample(&cfg, digest, &args),
        Cmd::Eval(args) => cmd_eval(&cfg, &args),
        Cmd::AblateRope(args) => cmd_ablate(&cfg, digest, &args),
    }
}

// ---------------------------------------------------------------------------
// curate

fn cmd_curate(cfg: &RunConfig) -> CResult<()> {
    let generated = gen_corpus(
        &cfg.curate.scene,
        cfg.curate.n_records,
        cfg.seed,
        &cfg.corpus_dir,
    )?;
    let total = generated.len();
    let mut records = filter_pairs(
        generated,
        cfg.curate.motion_threshold,
        cfg.curate.motion_upweight,
    );
    for rec in &mut records {
        let native = Bucket::parse_id(&rec.bucket)?;
        let bucket = assign_bucket(native.height, native.width, &cfg.buckets);
        if bucket != native {
            for rel in rec.ref_paths.iter().chain(&rec.target_paths) {
                let path = cfg.corpus_dir.join(rel);
                let fitted = fit_to_bucket(&load_image(&path)?, bucket);
                save_image(&fitted, &path)?;
            }
            rec.bucket = bucket.id();
        }
    }
    let manifest = cfg.manifest_path();
    save_manifest(&records, &manifest)?;
    println!(
        "curated {} records ({} dropped by the motion filter) -> {}",
        records.len(),
        total - records.len(),
        manifest.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

static SIGINT: AtomicBool = AtomicBool::new(false);

#[cfg(unix)]
fn install_sigint() {
    extern "C" fn on_sigint(_: libc::c_int) {
        SIGINT.store(true, Ordering::SeqCst);
    }
    unsafe {
        libc::signal(
            libc::SIGINT,
            on_sigint as extern "C" fn(libc::c_int) as libc::sighandler_t,
        );
    }
}

#[cfg(not(unix))]
fn install_sigint() {}

/// Per-task record counts, for deriving the curriculum from the manifest.
fn task_sizes(records: &[ManifestRecord]) -> Vec<(TaskKind, u64)> {
    let mut counts: BTreeMap<TaskKind, u64> = BTreeMap::new();
    for rec in records {
        *counts.entry(rec.task).or_insert(0) += 1;
    }
    counts.into_iter().collect()
}

fn flat_plan(steps: u64, sizes: &[(TaskKind, u64)]) -> StagePlan {
    StagePlan {
        stages: vec![StageConfig {
            steps,
            lr: 1e-4,
            schedule: LrSchedule::Constant,
            warmup: 0,
            weight_decay: 0.0,
            clip: 1.0,
            mix: MixSchedule::Flat {
                tasks: sizes.to_vec(),
            },
        }],
    }
}

fn build_plan(
    cfg: &RunConfig,
    records: &[ManifestRecord],
    steps_override: Option<u64>,
) -> StagePlan {
    let sizes = task_sizes(records);
    match steps_override {
        Some(steps) => flat_plan(steps, &sizes),
        None if cfg.train.stages.is_empty() => {
            StagePlan::reference(cfg.train.stage_steps, &sizes)
        }
        None => StagePlan {
            stages: cfg.train.stages.clone(),
        },
    }
}

fn build_train_config(
    cfg: &RunConfig,
    digest: [u8; 32],
    plan: StagePlan,
    out_dir: PathBuf,
) -> TrainConfig {
    TrainConfig {
        model: cfg.model.clone(),
        plan,
        seed: cfg.seed,
        strategy: cfg.strategy,
        shift: cfg.train.shift,
        null_caption_p: cfg.train.null_caption_p,
        token_budget: cfg.train.token_budget,
        batch_cap: cfg.train.batch_cap,
        checkpoint_every: cfg.train.checkpoint_every,
        out_dir,
        val: (cfg.train.val_every > 0).then_some(ValConfig {
            every: cfg.train.val_every,
            max_samples: cfg.train.val_max_samples,
        }),
        digest: Some(digest),
    }
}

/// Load the checkpoint, turning a digest mismatch into a config error —
/// the file on disk belongs to a different experiment bundle.
fn load_compatible(path: &Path, digest: &[u8; 32]) -> CResult<Checkpoint> {
    load_checkpoint(path, digest).map_err(|e| match e {
        TrainError::DigestMismatch => Failure::Config(format!(
            "{}: checkpoint was written under a different config",
            path.display()
        )),
        other => Failure::Runtime(other.to_string()),
    })
}

fn cmd_train(cfg: &RunConfig, digest: [u8; 32], args: &TrainArgs) -> CResult<()> {
    let records = load_manifest(&cfg.manifest_path())?;
    let plan = build_plan(cfg, &records, args.steps);
    let tc = build_train_config(cfg, digest, plan, cfg.out_dir.clone());
    let start = match args.resume {
        true => Some(load_compatible(&cfg.out_dir.join("checkpoint.imtg"), &digest)?),
        false => None,
    };
    install_sigint();
    let out = train(&tc, &records, &cfg.corpus_dir, start, Some(&SIGINT))?;
    if let Some(row) = out.rows.last() {
        println!(
            "trained to step {} (loss {:.6}) -> {}",
            row.step + 1,
            row.loss,
            out.checkpoint.display()
        );
    } else {
        println!("nothing to train -> {}", out.checkpoint.display());
    }
    println!("loss log: {}", out.loss_log.display());
    if let Some(val_log) = &out.val_log {
        println!("val log: {}", val_log.display());
    }
    if out.interrupted {
        return Err(Failure::Interrupted);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sample

fn split_csv(csv: &str) -> Vec<PathBuf> {
    csv.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect()
}

fn load_all(paths: &[PathBuf]) -> CResult<Vec<Image>> {
    paths.iter().map(|p| Ok(load_image(p)?)).collect()
}

/// Lay frames out in a single horizontal strip.
fn hstrip(frames: &[Image]) -> Image {
    let h = frames.iter().map(|f| f.h).max().unwrap_or(0);
    let w: usize = frames.iter().map(|f| f.w).sum();
    let mut grid = Image::zeros(h, w);
    let mut x0 = 0;
    for f in frames {
        for y in 0..f.h {
            for x in 0..f.w {
                grid.set(y, x0 + x, f.get(y, x));
            }
        }
        x0 += f.w;
    }
    grid
}

/// Stack strips vertically.
fn vstack(strips: &[Image]) -> Image {
    let w = strips.iter().map(|s| s.w).max().unwrap_or(0);
    let h: usize = strips.iter().map(|s| s.h).sum();
    let mut grid = Image::zeros(h, w);
    let mut y0 = 0;
    for s in strips {
        for y in 0..s.h {
            for x in 0..s.w {
                grid.set(y0 + y, x, s.get(y, x));
            }
        }
        y0 += s.h;
    }
    grid
}

fn ensure_out_dir(dir: &Path) -> CResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Failure::Runtime(format!("creating {}: {e}", dir.display()))
    })
}

fn cmd_sample(cfg: &RunConfig, digest: [u8; 32], args: &SampleArgs) -> CResult<()> {
    let ref_paths = split_csv(&args.refs);
    if ref_paths.is_empty() {
        return Err(Failure::Config("--refs names no files".into()));
    }
    if args.n_out == 0 {
        return Err(Failure::Config("--n-out must be positive".into()));
    }
    let refs = load_all(&ref_paths)?;
    let cp = load_compatible(&cfg.out_dir.join("checkpoint.imtg"), &digest)?;
    let mut sampler = cfg.sampler.clone();
    if let Some(steps) = args.steps {
        sampler.steps = steps;
    }
    if let Some(scale) = args.cfg_scale {
        sampler.cfg_scale = scale;
    }
    if sampler.steps == 0 {
        return Err(Failure::Config("--steps must be positive".into()));
    }
    let out_hw = (refs[0].h, refs[0].w);
    let frames = sample(
        &cp.params,
        &cfg.model,
        &refs,
        &args.prompt,
        args.n_out,
        out_hw,
        &sampler,
        cfg.strategy,
        cfg.seed,
    )?;
    ensure_out_dir(&cfg.out_dir)?;
    for (i, frame) in frames.iter().enumerate() {
        save_image(frame, &cfg.out_dir.join(format!("sample_{i:02}.png")))?;
    }
    let grid_path = cfg.out_dir.join("grid.png");
    save_image(&hstrip(&frames), &grid_path)?;
    println!("wrote {} frames -> {}", frames.len(), grid_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn load_masked(
    what: &str,
    image_paths: &[PathBuf],
    mask_csv: Option<&String>,
) -> CResult<Vec<(Image, Vec<bool>)>> {
    let images = load_all(image_paths)?;
    let masks: Vec<Vec<bool>> = match mask_csv {
        None => images.iter().map(|im| vec![true; im.h * im.w]).collect(),
        Some(csv) => {
            let mask_paths = split_csv(csv);
            if mask_paths.len() != images.len() {
                return Err(Failure::Config(format!(
                    "{what}: {} images but {} masks",
                    images.len(),
                    mask_paths.len()
                )));
            }
            load_all(&mask_paths)?
                .iter()
                .map(crate::eval::mask_from_image)
                .collect()
        }
    };
    Ok(images.into_iter().zip(masks).collect())
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> CResult<()> {
    let gen_paths = split_csv(&args.gen);
    let ref_paths = split_csv(&args.refs);
    if gen_paths.is_empty() || ref_paths.is_empty() {
        return Err(Failure::Config("--gen and --refs must name files".into()));
    }
    let gen = load_masked("--gen", &gen_paths, args.gen_masks.as_ref())?;
    let refs = load_masked("--refs", &ref_paths, args.ref_masks.as_ref())?;
    let mut report = evaluate(&gen, &refs, &DefaultExtractor)?;

    if let Some(vlm) = &args.vlm {
        let endpoint = match vlm.strip_prefix("stub:") {
            Some(score) => VlmEndpoint::Stub {
                score: score
                    .parse()
                    .map_err(|_| Failure::Config(format!("bad stub score `{score}`")))?,
            },
            None => VlmEndpoint::Http { url: vlm.clone() },
        };
        let client = VlmClient {
            endpoint,
            retries: 2,
        };
        let gen_images: Vec<Image> = gen.iter().map(|(im, _)| im.clone()).collect();
        let mut all: Vec<Image> = refs.iter().map(|(im, _)| im.clone()).collect();
        all.extend(gen_images.iter().cloned());
        let mut ratings = vec![client.rate(&all, &args.prompt, Template::IdPreservation)?];
        if gen_images.len() >= 2 {
            ratings.push(client.rate(&gen_images, &args.prompt, Template::TemporalConsistency)?);
        }
        report.vlm = Some(ratings);
    }

    ensure_out_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("report.json");
    report.save(&path)?;
    match report.tc {
        Some(tc) => println!("ip={} tc={} -> {}", report.ip, tc, path.display()),
        None => println!("ip={} tc=undefined -> {}", report.ip, path.display()),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate-rope

fn cmd_ablate(cfg: &RunConfig, digest: [u8; 32], args: &AblateArgs) -> CResult<()> {
    let records = load_manifest(&cfg.manifest_path())?;
    if records.is_empty() {
        return Err(Failure::Config("manifest is empty; run curate first".into()));
    }
    let root = cfg.out_dir.join("ablate");
    install_sigint();

    let mut outcomes = Vec::new();
    for (name, strategy) in [
        ("marginal", RopeStrategy::Marginal),
        ("even", RopeStrategy::Even),
    ] {
        let plan = build_plan(cfg, &records, args.steps);
        let mut tc = build_train_config(cfg, digest, plan, root.join(name));
        tc.strategy = strategy;
        // Always validate at least at the endpoints so the comparison has a
        // held-out number.
        tc.val = Some(ValConfig {
            every: cfg.train.val_every,
            max_samples: cfg.train.val_max_samples,
        });
        let out = train(&tc, &records, &cfg.corpus_dir, None, Some(&SIGINT))?;
        if out.interrupted {
            return Err(Failure::Interrupted);
        }
        outcomes.push(out);
    }
    let (marginal, even) = (&outcomes[0], &outcomes[1]);

    // The two runs draw identical step sequences, so rows pair one-to-one.
    let mut csv = String::from("step,marginal,even\n");
    for (m, e) in marginal.rows.iter().zip(&even.rows) {
        writeln!(csv, "{},{},{}", m.step, m.loss, e.loss).unwrap();
    }
    let loss_path = root.join("loss_compare.csv");
    std::fs::write(&loss_path, csv)
        .map_err(|e| Failure::Runtime(format!("writing {}: {e}", loss_path.display())))?;

    let mut vcsv = String::from("step,marginal,even\n");
    for (m, e) in marginal.val_rows.iter().zip(&even.val_rows) {
        writeln!(vcsv, "{},{},{}", m.step, m.loss, e.loss).unwrap();
    }
    let val_path = root.join("val_compare.csv");
    std::fs::write(&val_path, vcsv)
        .map_err(|e| Failure::Runtime(format!("writing {}: {e}", val_path.display())))?;

    // Shared-seed sample from both checkpoints on the first record.
    let first = &records[0];
    let refs: Vec<Image> = first
        .ref_paths
        .iter()
        .map(|rel| Ok(load_image(&cfg.corpus_dir.join(rel))?))
        .collect::<CResult<_>>()?;
    let n_out = args.n_out.unwrap_or_else(|| first.target_paths.len().max(1));
    let out_hw = match refs.first() {
        Some(r) => (r.h, r.w),
        None => (cfg.curate.scene.height, cfg.curate.scene.width),
    };
    let mut strips = Vec::new();
    for out in &outcomes {
        let frames = sample(
            &out.params,
            &cfg.model,
            &refs,
            &first.instruction,
            n_out,
            out_hw,
            &cfg.sampler,
            match strips.is_empty() {
                true => RopeStrategy::Marginal,
                false => RopeStrategy::Even,
            },
            cfg.seed,
        )?;
        strips.push(hstrip(&frames));
    }
    let grid_path = root.join("grid.png");
    save_image(&vstack(&strips), &grid_path)?;

    let mfinal = marginal.val_rows.last().expect("val rows always present");
    let efinal = even.val_rows.last().expect("val rows always present");
    println!(
        "final val loss: marginal={} even={} -> {}",
        mfinal.loss,
        efinal.loss,
        loss_path.display()
    );
    println!("grid: {}", grid_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_parser_accepts_exactly_the_two_names() {
        assert_eq!(parse_strategy("marginal"), Ok(RopeStrategy::Marginal));
        assert_eq!(parse_strategy("even"), Ok(RopeStrategy::Even));
        assert!(parse_strategy("Marginal").is_err());
        assert!(parse_strategy("").is_err());
    }

    #[test]
    fn csv_splitting_trims_and_drops_empties() {
        assert_eq!(
            split_csv(" a.png , b.png,,c.png "),
            vec![
                PathBuf::from("a.png"),
                PathBuf::from("b.png"),
                PathBuf::from("c.png")
            ]
        );
        assert!(split_csv("").is_empty());
    }

    #[test]
    fn grids_concatenate_in_both_directions() {
        let a = Image::fill(2, 3, [1.0, 0.0, 0.0]);
        let b = Image::fill(2, 2, [0.0, 1.0, 0.0]);
        let strip = hstrip(&[a.clone(), b.clone()]);
        assert_eq!((strip.h, strip.w), (2, 5));
        assert_eq!(strip.get(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(strip.get(1, 4), [0.0, 1.0, 0.0]);

        let stack = vstack(&[strip.clone(), strip]);
        assert_eq!((stack.h, stack.w), (4, 5));
        assert_eq!(stack.get(3, 4), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn the_command_line_knows_every_mandated_flag() {
        let help = Cli::command().render_long_help().to_string();
        for flag in [
            "--config", "--seed", "--out", "--strategy", "--n-out", "--refs", "--prompt",
            "--steps", "--cfg-scale", "--vlm",
        ] {
            assert!(help.contains(flag), "help lost {flag}:\n{help}");
        }
        assert!(help.contains("IMONTAGE_LOG"));
    }

    #[test]
    fn task_sizes_count_per_task() {
        let mut records = Vec::new();
        for (task, n) in [(TaskKind::Edit, 3), (TaskKind::Video, 2)] {
            for _ in 0..n {
                records.push(ManifestRecord {
                    task,
                    instruction: String::new(),
                    ref_paths: vec![],
                    target_paths: vec![],
                    bucket: "32x32".into(),
                    motion_score: None,
                    fg_mask_paths: None,
                    weight: 1.0,
                    transition: false,
                });
            }
        }
        assert_eq!(
            task_sizes(&records),
            vec![(TaskKind::Video, 2), (TaskKind::Edit, 3)]
        );
    }
}
