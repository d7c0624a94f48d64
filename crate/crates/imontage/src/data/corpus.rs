//! Procedural task generators and corpus emission.
//!
//! Each record draws from a per-record ChaCha stream (`seed` selects the
//! key, the record index selects the stream), so generation order never
//! bleeds between records and the corpus is reproducible byte for byte.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bucket::Bucket;
use super::io::{save_image, save_manifest};
use super::motion::motion_score;
use super::scene::{ColorName, MotionProgram, Scene, ShapeKind, ShapePlacement, SyntheticSceneSpec};
use super::{DataError, ManifestRecord, TaskKind};
use crate::pack::Image;

/// Block size and search radius for the motion scores recorded on video
/// pairs.
const MOTION_BLOCK: usize = 8;
const MOTION_RADIUS: usize = 7;

struct GeneratedRecord {
    instruction: String,
    refs: Vec<Image>,
    targets: Vec<Image>,
    masks: Vec<Image>,
    motion_score: Option<f64>,
}

/// Generate `n` records round-robin over the spec's task list, write every
/// image (and exact foreground mask) under `out_dir/<task>/`, and emit
/// `out_dir/manifest.jsonl`. Returns the records in manifest order.
pub fn gen_corpus(
    spec: &SyntheticSceneSpec,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ManifestRecord>, DataError> {
    assert!(spec.grid >= 7, "placement grid needs at least 7 cells");
    assert!(
        !spec.tasks.is_empty() && !spec.shapes.is_empty() && spec.colors.len() >= 2,
        "spec needs tasks, shapes, and at least two colors"
    );
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| DataError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let bucket_id = Bucket::new(spec.height, spec.width).id();

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let task = spec.tasks[i % spec.tasks.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + i as u64);
        let rec = gen_record(spec, task, &mut rng);

        let dir = out_dir.join(task.as_str());
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let save_all = |imgs: &[Image], kind: &str| -> Result<Vec<String>, DataError> {
            imgs.iter()
                .enumerate()
                .map(|(j, img)| {
                    let rel = format!("{}/{:06}_{}{}.png", task.as_str(), i, kind, j);
                    save_image(img, &out_dir.join(&rel))?;
                    Ok(rel)
                })
                .collect()
        };
        let ref_paths = save_all(&rec.refs, "ref")?;
        let target_paths = save_all(&rec.targets, "tgt")?;
        let fg_mask_paths = Some(save_all(&rec.masks, "mask")?);

        records.push(ManifestRecord {
            task,
            instruction: rec.instruction,
            ref_paths,
            target_paths,
            bucket: bucket_id.clone(),
            motion_score: rec.motion_score,
            fg_mask_paths,
            weight: 1.0,
            transition: false,
        });
    }
    save_manifest(&records, &out_dir.join("manifest.jsonl"))?;
    Ok(records)
}

fn gen_record(spec: &SyntheticSceneSpec, task: TaskKind, rng: &mut ChaCha8Rng) -> GeneratedRecord {
    match task {
        TaskKind::Video => gen_video(spec, rng),
        TaskKind::Edit => gen_edit(spec, rng),
        TaskKind::MultiRef => gen_multi_ref(spec, rng),
        TaskKind::CondRef => gen_cond_ref(spec, rng),
        TaskKind::StyleRef => gen_style_ref(spec, rng),
        TaskKind::MultiTurn => gen_multi_turn(spec, rng),
        TaskKind::MultiView => gen_multi_view(spec, rng),
        TaskKind::Storyboard => gen_storyboard(spec, rng),
    }
}

// ---------------------------------------------------------------------------
// Placement machinery

/// A shape on the logical cell grid; converts to a normalized placement.
#[derive(Clone, Copy)]
struct Subject {
    kind: ShapeKind,
    color: ColorName,
    ix: i64,
    iy: i64,
    r_scale: f64,
    angle: f64,
}

impl Subject {
    fn placement(&self, spec: &SyntheticSceneSpec) -> ShapePlacement {
        let g = spec.grid as f64;
        ShapePlacement {
            kind: self.kind,
            color: self.color,
            cx: (self.ix as f64 + 0.5) / g,
            cy: (self.iy as f64 + 0.5) / g,
            r: 1.5 / g * self.r_scale,
            angle: self.angle,
        }
    }

    /// Solo portrait on a neutral background, centered.
    fn portrait(&self, spec: &SyntheticSceneSpec) -> Image {
        let p = ShapePlacement {
            cx: 0.5,
            cy: 0.5,
            ..self.placement(spec)
        };
        Scene {
            bg: ColorName::White,
            shapes: vec![p],
        }
        .render(spec.height, spec.width)
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

fn pick_other<T: Copy + PartialEq>(rng: &mut ChaCha8Rng, xs: &[T], not: T) -> T {
    let rest: Vec<T> = xs.iter().copied().filter(|&x| x != not).collect();
    if rest.is_empty() {
        not
    } else {
        pick(rng, &rest)
    }
}

/// Interior spot: at least two cells from every border, so unit moves and
/// 1.5-cell extents stay in frame.
fn sample_subject(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng, pool: &[ShapeKind]) -> Subject {
    let hi = spec.grid as i64 - 3;
    Subject {
        kind: pick(rng, pool),
        color: pick(rng, &spec.colors),
        ix: rng.random_range(2..=hi),
        iy: rng.random_range(2..=hi),
        r_scale: 1.0,
        angle: 0.0,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Dir {
    Left,
    Right,
    Up,
    Down,
}

impl Dir {
    const ALL: [Dir; 4] = [Dir::Left, Dir::Right, Dir::Up, Dir::Down];

    fn word(self) -> &'static str {
        match self {
            Dir::Left => "left",
            Dir::Right => "right",
            Dir::Up => "up",
            Dir::Down => "down",
        }
    }

    /// Cell delta, x right and y down.
    fn delta(self) -> (i64, i64) {
        match self {
            Dir::Left => (-1, 0),
            Dir::Right => (1, 0),
            Dir::Up => (0, -1),
            Dir::Down => (0, 1),
        }
    }
}

/// A move of `k` cells that keeps the destination at least one cell inside
/// the frame. Some direction is always feasible for k ≤ 2 from an interior
/// spot.
fn sample_move(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng, s: Subject) -> (Dir, i64) {
    let g = spec.grid as i64;
    let k = rng.random_range(1..=2);
    let ok = |x: i64, y: i64| (1..=g - 2).contains(&x) && (1..=g - 2).contains(&y);
    let dirs: Vec<Dir> = Dir::ALL
        .into_iter()
        .filter(|d| {
            let (dx, dy) = d.delta();
            ok(s.ix + k * dx, s.iy + k * dy)
        })
        .collect();
    (pick(rng, &dirs), k)
}

fn moved(s: Subject, dir: Dir, k: i64) -> Subject {
    let (dx, dy) = dir.delta();
    Subject {
        ix: s.ix + k * dx,
        iy: s.iy + k * dy,
        ..s
    }
}

/// Render one scene frame plus its exact foreground mask.
fn frame(
    spec: &SyntheticSceneSpec,
    bg: ColorName,
    shapes: &[Subject],
) -> (Image, Image) {
    let scene = Scene {
        bg,
        shapes: shapes.iter().map(|s| s.placement(spec)).collect(),
    };
    (
        scene.render(spec.height, spec.width),
        scene.render_mask(spec.height, spec.width),
    )
}

// ---------------------------------------------------------------------------
// Task generators

fn gen_edit(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> GeneratedRecord {
    let pool: Vec<MotionProgram> = spec
        .programs
        .iter()
        .copied()
        .filter(|p| *p != MotionProgram::SceneCut)
        .collect();
    let prog = if pool.is_empty() {
        MotionProgram::Recolor
    } else {
        pick(rng, &pool)
    };
    let mut subj = sample_subject(spec, rng, &spec.shapes);
    if prog == MotionProgram::Rotate {
        // Right-angle turns are invisible on circles and squares.
        subj.kind = ShapeKind::Triangle;
    }
    let bg = pick(rng, &ColorName::BACKGROUND);
    let (ref_img, _) = frame(spec, bg, &[subj]);

    let (after, instruction) = match prog {
        MotionProgram::Recolor => {
            let c2 = pick_other(rng, &spec.colors, subj.color);
            let after = Subject { color: c2, ..subj };
            let text = format!(
                "recolor the {} {} to {}",
                subj.color.word(),
                subj.kind.word(),
                c2.word()
            );
            (after, text)
        }
        MotionProgram::Translate => {
            let (dir, k) = sample_move(spec, rng, subj);
            let text = format!(
                "move the {} {} {} by {} cells",
                subj.color.word(),
                subj.kind.word(),
                dir.word(),
                k
            );
            (moved(subj, dir, k), text)
        }
        MotionProgram::Rotate => {
            let after = Subject {
                angle: std::f64::consts::FRAC_PI_2,
                ..subj
            };
            let text = format!("rotate the {} triangle by 90 degrees", subj.color.word());
            (after, text)
        }
        MotionProgram::Scale | MotionProgram::SceneCut => {
            let bigger = rng.random_bool(0.5);
            let after = Subject {
                r_scale: if bigger { 1.5 } else { 2.0 / 3.0 },
                ..subj
            };
            let text = format!(
                "make the {} {} {}",
                subj.color.word(),
                subj.kind.word(),
                if bigger { "bigger" } else { "smaller" }
            );
            (after, text)
        }
    };
    let (tgt, mask) = frame(spec, bg, &[after]);
    GeneratedRecord {
        instruction,
        refs: vec![ref_img],
        targets: vec![tgt],
        masks: vec![mask],
        motion_score: None,
    }
}

fn gen_multi_ref(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> GeneratedRecord {
    let a = sample_subject(spec, rng, &spec.shapes);
    let mut b = sample_subject(spec, rng, &spec.shapes);
    b.color = pick_other(rng, &spec.colors, a.color);
    let g = spec.grid as i64;
    let row = rng.random_range(2..=g - 3);
    let left = Subject { ix: 2, iy: row, ..a };
    let right = Subject {
        ix: g - 3,
        iy: row,
        ..b
    };
    let bg = pick(rng, &ColorName::BACKGROUND);
    let (tgt, mask) = frame(spec, bg, &[left, right]);
    GeneratedRecord {
        instruction: format!(
            "place the {} {} and the {} {} together",
            a.color.word(),
            a.kind.word(),
            b.color.word(),
            b.kind.word()
        ),
        refs: vec![a.portrait(spec), b.portrait(spec)],
        targets: vec![tgt],
        masks: vec![mask],
        motion_score: None,
    }
}

fn gen_cond_ref(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> GeneratedRecord {
    let subj = sample_subject(spec, rng, &spec.shapes);
    // The condition background must differ from the portrait's white.
    let bg = pick(rng, &[ColorName::Gray, ColorName::Black]);
    let (cond, _) = frame(spec, bg, &[]);
    let (tgt, mask) = frame(spec, bg, &[subj]);
    GeneratedRecord {
        instruction: format!(
            "place the {} {} on the {} background",
            subj.color.word(),
            subj.kind.word(),
            bg.word()
        ),
        refs: vec![subj.portrait(spec), cond],
        targets: vec![tgt],
        masks: vec![mask],
        motion_score: None,
    }
}

fn gen_style_ref(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> GeneratedRecord {
    let content = sample_subject(spec, rng, &spec.shapes);
    let mut style = sample_subject(spec, rng, &spec.shapes);
    style.color = pick_other(rng, &spec.colors, content.color);
    let content_bg = pick(rng, &ColorName::BACKGROUND);
    let style_bg = pick_other(rng, &ColorName::BACKGROUND, content_bg);
    let (content_img, _) = frame(spec, content_bg, &[content]);
    let (style_img, _) = frame(spec, style_bg, &[style]);
    // Style transfer: keep the content geometry, adopt the style palette.
    let restyled = Subject {
        color: style.color,
        ..content
    };
    let (tgt, mask) = frame(spec, style_bg, &[restyled]);
    GeneratedRecord {
        instruction: "apply the style of the last image to the first image".into(),
        refs: vec![content_img, style_img],
        targets: vec![tgt],
        masks: vec![mask],
        motion_score: None,
    }
}

fn gen_multi_turn(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> GeneratedRecord {
    let subj = sample_subject(spec, rng, &spec.shapes);
    let bg = pick(rng, &ColorName::BACKGROUND);
    let (dir, k) = sample_move(spec, rng, subj);
    let step1 = moved(subj, dir, k);
    let c2 = pick_other(rng, &spec.colors, subj.color);
    let step2 = Subject { color: c2, ..step1 };
    let (ref_img, _) = frame(spec, bg, &[subj]);
    let (t1, m1) = frame(spec, bg, &[step1]);
    let (t2, m2) = frame(spec, bg, &[step2]);
    GeneratedRecord {
        instruction: format!(
            "move the {} {} {} by {} cells then recolor it to {}",
            subj.color.word(),
            subj.kind.word(),
            dir.word(),
            k,
            c2.word()
        ),
        refs: vec![ref_img],
        targets: vec![t1, t2],
        masks: vec![m1, m2],
        motion_score: None,
    }
}

fn gen_multi_view(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> GeneratedRecord {
    let mut subj = sample_subject(spec, rng, &spec.shapes);
    subj.kind = ShapeKind::Triangle;
    let bg = pick(rng, &ColorName::BACKGROUND);
    let (ref_img, _) = frame(spec, bg, &[subj]);
    let mut targets = Vec::new();
    let mut masks = Vec::new();
    for quarter in 1..=3 {
        let view = Subject {
            angle: quarter as f64 * std::f64::consts::FRAC_PI_2,
            ..subj
        };
        let (t, m) = frame(spec, bg, &[view]);
        targets.push(t);
        masks.push(m);
    }
    GeneratedRecord {
        instruction: format!("show 3 rotated views of the {} triangle", subj.color.word()),
        refs: vec![ref_img],
        targets,
        masks,
        motion_score: None,
    }
}

fn gen_storyboard(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> GeneratedRecord {
    let g = spec.grid as i64;
    let mut subj = sample_subject(spec, rng, &spec.shapes);
    let dir = pick(rng, &[Dir::Left, Dir::Right]);
    subj.ix = if dir == Dir::Right { 2 } else { g - 3 };
    let cut = spec.programs.contains(&MotionProgram::SceneCut);
    let bg0 = rng.random_range(0..ColorName::BACKGROUND.len());
    let mut targets = Vec::new();
    let mut masks = Vec::new();
    for panel in 0..3i64 {
        let bg = if cut {
            // Scene cut: every panel on a different background.
            ColorName::BACKGROUND[(bg0 + panel as usize) % ColorName::BACKGROUND.len()]
        } else {
            ColorName::BACKGROUND[bg0]
        };
        let (t, m) = frame(spec, bg, &[moved(subj, dir, panel)]);
        targets.push(t);
        masks.push(m);
    }
    GeneratedRecord {
        instruction: format!(
            "a storyboard of the {} {} moving {} across 3 scenes",
            subj.color.word(),
            subj.kind.word(),
            dir.word()
        ),
        refs: vec![subj.portrait(spec)],
        targets,
        masks,
        motion_score: None,
    }
}

fn gen_video(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> GeneratedRecord {
    let g = spec.grid as i64;
    let n_frames = 4.min(g - 3);
    let mut subj = sample_subject(spec, rng, &spec.shapes);
    let dir = pick(rng, &Dir::ALL);
    // Start against the travel direction so the whole path stays interior.
    match dir {
        Dir::Right => subj.ix = 2,
        Dir::Left => subj.ix = g - 3,
        Dir::Down => subj.iy = 2,
        Dir::Up => subj.iy = g - 3,
    }
    let bg = pick(rng, &ColorName::BACKGROUND);
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    for step in 0..n_frames {
        let (f, m) = frame(spec, bg, &[moved(subj, dir, step)]);
        frames.push(f);
        masks.push(m);
    }
    let score = motion_score(&frames[0], &frames[1], MOTION_BLOCK, MOTION_RADIUS)
        .expect("equal shapes by construction");
    let n_out = frames.len() - 1;
    let refs = vec![frames.remove(0)];
    masks.remove(0);
    GeneratedRecord {
        instruction: format!(
            "continue the motion of the {} {} for {} frames",
            subj.color.word(),
            subj.kind.word(),
            n_out
        ),
        refs,
        targets: frames,
        masks,
        motion_score: Some(score),
    }
}
