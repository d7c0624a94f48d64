//! Prompt rendering, tokenization, patchification, and sequence packing.
//!
//! A training example is a handful of reference images, an instruction, and a
//! handful of target images. Everything is flattened into one token sequence
//! laid out `[text | reference frames | target frames]`: the text slice is
//! padded to a fixed length, every frame becomes a row-major run of pixel
//! patches, and the target slots carry the noised interpolant of the clean
//! targets. Masks and per-frame spans travel with the tokens so the model,
//! the loss, and the sampler all agree on who is who.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow;
use crate::rope::{
    assign_temporal_indices, frame_geoms, FrameGeom, RopeConfig, RopeError, RopeStrategy,
};
use crate::tensor::{Scalar, Tensor};

// ---------------------------------------------------------------------------
// Images

/// Interleaved RGB, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), h * w * 3, "image buffer must be h*w*3");
        Image { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    pub fn fill(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.extend_from_slice(&rgb);
        }
        Image { h, w, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.w + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, rgb: [f32; 3]) {
        let i = (r * self.w + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// One training or inference example before packing.
#[derive(Debug, Clone)]
pub struct Sample {
    pub refs: Vec<Image>,
    pub targets: Vec<Image>,
    pub instruction: String,
}

// ---------------------------------------------------------------------------
// Vocabulary

pub const PAD_ID: usize = 0;
pub const NULL_ID: usize = 1;
pub const UNK_ID: usize = 2;
/// `<image_1>` .. `<image_8>` occupy ids 3..=10.
pub const IMAGE_REF_BASE: usize = 3;
pub const MAX_FRAMES_PER_ROLE: usize = 8;

/// Closed word list: specials first, then every word the instruction grammar
/// and the prompt preamble can produce.
pub const VOCAB: &[&str] = &[
    "<pad>", "<null>", "<unk>", "<image_1>", "<image_2>", "<image_3>", "<image_4>", "<image_5>",
    "<image_6>", "<image_7>", "<image_8>",
    // preamble
    "please", "output", "images", "according", "to", "the", "instruction",
    // counts and magnitudes
    "1", "2", "3", "4", "5", "6", "7", "8", "90", "180", "270",
    // palette
    "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white", "gray", "black",
    // geometry
    "circle", "square", "triangle", "left", "right", "up", "down",
    // verbs
    "recolor", "move", "rotate", "make", "place", "show", "continue", "apply",
    // nouns
    "background", "scene", "scenes", "motion", "cells", "degrees", "storyboard", "frames",
    "views", "style", "image",
    // glue
    "by", "of", "and", "on", "a", "it", "then", "first", "last", "together", "moving", "across",
    "rotated", "for", "bigger", "smaller", ".", ",", ":", ";",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

fn vocab_lookup(word: &str) -> Option<usize> {
    use std::collections::HashMap;
    use std::sync::OnceLock;
    static MAP: OnceLock<HashMap<&'static str, usize>> = OnceLock::new();
    MAP.get_or_init(|| VOCAB.iter().enumerate().map(|(i, &w)| (w, i)).collect())
        .get(word)
        .copied()
}

/// What to do with a word outside the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnVocabMiss {
    /// Fail with [`PackError::UnknownToken`] — the corpus generator must
    /// never produce such a word.
    Error,
    /// Substitute `<unk>`, for free-form prompts typed at the CLI.
    Unk,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PackError {
    #[error("unknown token {token:?}")]
    UnknownToken { token: String },
    #[error("image side {size} not divisible by patch {patch}")]
    IndivisibleShape { size: usize, patch: usize },
    #[error("prompt needs {got} tokens but the text slot holds {cap}")]
    PromptTooLong { got: usize, cap: usize },
    #[error(transparent)]
    Rope(#[from] RopeError),
}

/// Prompt preamble with the output count substituted, instruction appended.
pub fn render_prompt(n_out: usize, instruction: &str) -> String {
    format!("Please output {n_out} images according to the instruction: {instruction}")
}

/// Lowercase, whitespace-split encoding; `.,:;!?` peel off words as their own
/// tokens.
pub fn tokenize_text(text: &str, on_miss: OnVocabMiss) -> Result<Vec<usize>, PackError> {
    let mut ids = Vec::new();
    let mut push = |word: &str| -> Result<(), PackError> {
        if word.is_empty() {
            return Ok(());
        }
        let lower = word.to_lowercase();
        match vocab_lookup(&lower) {
            Some(id) => ids.push(id),
            None => match on_miss {
                OnVocabMiss::Error => {
                    return Err(PackError::UnknownToken { token: lower });
                }
                OnVocabMiss::Unk => ids.push(UNK_ID),
            },
        }
        Ok(())
    };
    let is_punct = |c: char| matches!(c, '.' | ',' | ':' | ';' | '!' | '?');
    for chunk in text.split_whitespace() {
        let core_start = chunk.find(|c| !is_punct(c)).unwrap_or(chunk.len());
        let (lead, rest) = chunk.split_at(core_start);
        let core_end = rest
            .rfind(|c| !is_punct(c))
            .map_or(0, |i| i + rest[i..].chars().next().unwrap().len_utf8());
        let (core, tail) = rest.split_at(core_end);
        for c in lead.chars() {
            push(&c.to_string())?;
        }
        push(core)?;
        for c in tail.chars() {
            push(&c.to_string())?;
        }
    }
    Ok(ids)
}

// ---------------------------------------------------------------------------
// Patches

/// Split an image into p x p pixel patches, one token per patch, channels
/// interleaved within the patch and values mapped from [0,1] to [-1,1].
/// Token order is row-major over the patch grid.
pub fn patchify<S: Scalar>(img: &Image, p: usize) -> Result<Tensor<S>, PackError> {
    for size in [img.h, img.w] {
        if size % p != 0 {
            return Err(PackError::IndivisibleShape { size, patch: p });
        }
    }
    let (gh, gw) = (img.h / p, img.w / p);
    let mut data = Vec::with_capacity(gh * gw * p * p * 3);
    for gr in 0..gh {
        for gc in 0..gw {
            for dr in 0..p {
                for dc in 0..p {
                    let px = img.get(gr * p + dr, gc * p + dc);
                    for ch in px {
                        data.push(S::from_f64(2.0 * ch as f64 - 1.0));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, 3 * p * p], data))
}

/// Inverse of [`patchify`]: tokens back to an image, clamped to [0,1].
pub fn unpatchify<S: Scalar>(tokens: &Tensor<S>, gh: usize, gw: usize, p: usize) -> Image {
    assert_eq!(tokens.shape(), &[gh * gw, 3 * p * p], "token grid mismatch");
    let mut img = Image::zeros(gh * p, gw * p);
    let d = tokens.data();
    let mut i = 0;
    for gr in 0..gh {
        for gc in 0..gw {
            for dr in 0..p {
                for dc in 0..p {
                    let rgb = [
                        (0.5 * (d[i].to_f64() + 1.0)).clamp(0.0, 1.0) as f32,
                        (0.5 * (d[i + 1].to_f64() + 1.0)).clamp(0.0, 1.0) as f32,
                        (0.5 * (d[i + 2].to_f64() + 1.0)).clamp(0.0, 1.0) as f32,
                    ];
                    img.set(gr * p + dr, gc * p + dc, rgb);
                    i += 3;
                }
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Packed sequences

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameRole {
    Ref,
    Target,
}

/// Absolute token range of one frame within the packed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSpan {
    pub offset: usize,
    pub len: usize,
    pub role: FrameRole,
}

/// Everything the model, loss, and sampler need to know about one flattened
/// example.
#[derive(Debug, Clone)]
pub struct PackedSequence<S> {
    /// Padded text ids, length `l_text`.
    pub text_ids: Vec<usize>,
    /// Non-pad prefix of `text_ids`.
    pub text_len: usize,
    /// `[n image tokens, 3*p*p]`; reference frames first, then target slots
    /// holding the interpolant.
    pub image_tokens: Tensor<S>,
    /// Per token over the full sequence; false only on text padding.
    pub attn_mask: Vec<bool>,
    /// Per token over the full sequence; true exactly on target tokens.
    pub loss_mask: Vec<bool>,
    /// Frame extents in full-sequence coordinates, refs then targets.
    pub frame_spans: Vec<FrameSpan>,
    /// Rope geometry per frame, same order as `frame_spans`.
    pub geoms: Vec<FrameGeom>,
    /// Flow target `noise - clean` over target tokens (training packs only).
    pub v_target: Option<Tensor<S>>,
    pub t: f64,
    pub patch: usize,
}

impl<S: Scalar> PackedSequence<S> {
    pub fn total_tokens(&self) -> usize {
        self.text_ids.len() + self.image_tokens.shape()[0]
    }

    /// Offset of the first target token; targets are one contiguous block at
    /// the end of the sequence.
    pub fn target_offset(&self) -> usize {
        self.frame_spans
            .iter()
            .find(|s| s.role == FrameRole::Target)
            .map_or(self.total_tokens(), |s| s.offset)
    }

    pub fn target_token_count(&self) -> usize {
        self.total_tokens() - self.target_offset()
    }

    /// Patch-grid sizes of the target frames, in order.
    pub fn target_grids(&self) -> Vec<(usize, usize)> {
        self.frame_spans
            .iter()
            .zip(&self.geoms)
            .filter(|(s, _)| s.role == FrameRole::Target)
            .map(|(_, g)| (g.rows, g.cols))
            .collect()
    }
}

/// Knobs shared by every pack call; mirrors the model's token geometry.
#[derive(Debug, Clone)]
pub struct PackParams {
    pub patch: usize,
    pub l_text: usize,
    pub rope: RopeConfig,
    pub strategy: RopeStrategy,
    pub on_miss: OnVocabMiss,
}

impl PackParams {
    fn encode_padded(
        &self,
        n_out: usize,
        instruction: Option<&str>,
    ) -> Result<(Vec<usize>, usize), PackError> {
        let mut ids = match instruction {
            Some(instr) => tokenize_text(&render_prompt(n_out, instr), self.on_miss)?,
            // Dropped caption: a lone <null> marker.
            None => vec![NULL_ID],
        };
        if ids.len() > self.l_text {
            return Err(PackError::PromptTooLong {
                got: ids.len(),
                cap: self.l_text,
            });
        }
        let text_len = ids.len();
        ids.resize(self.l_text, PAD_ID);
        Ok((ids, text_len))
    }
}

/// Pack a training example: patchify everything, mix noise into the target
/// slots at time `t`, and lay out `[text | refs | targets]` with masks.
///
/// `noise` must match the concatenated clean target tokens; the caller draws
/// it so the same draw can feed loss replay and determinism checks.
/// `instruction: None` packs the null caption (classifier-free branch).
pub fn pack<S: Scalar>(
    sample: &Sample,
    instruction: Option<&str>,
    t: f64,
    noise: &Tensor<S>,
    params: &PackParams,
) -> Result<PackedSequence<S>, PackError> {
    let clean = concat_frame_tokens::<S>(&sample.targets, params.patch)?;
    assert_eq!(
        noise.shape(),
        clean.shape(),
        "noise must match clean target tokens"
    );
    let x_t = flow::interpolate(&clean, noise, t);
    let v_target = flow::velocity_target(&clean, noise);
    let mut seq = assemble(
        &sample.refs,
        target_grids_of(&sample.targets, params.patch)?,
        &x_t,
        instruction,
        t,
        params,
    )?;
    seq.v_target = Some(v_target);
    Ok(seq)
}

/// Pack for sampling: target slots carry caller-provided state tokens
/// (initially pure noise) for frames of the given grid sizes.
pub fn pack_for_inference<S: Scalar>(
    refs: &[Image],
    target_grids: Vec<(usize, usize)>,
    state: &Tensor<S>,
    instruction: Option<&str>,
    t: f64,
    params: &PackParams,
) -> Result<PackedSequence<S>, PackError> {
    assemble(refs, target_grids, state, instruction, t, params)
}

fn target_grids_of(targets: &[Image], p: usize) -> Result<Vec<(usize, usize)>, PackError> {
    targets
        .iter()
        .map(|im| {
            for size in [im.h, im.w] {
                if size % p != 0 {
                    return Err(PackError::IndivisibleShape { size, patch: p });
                }
            }
            Ok((im.h / p, im.w / p))
        })
        .collect()
}

fn concat_frame_tokens<S: Scalar>(frames: &[Image], p: usize) -> Result<Tensor<S>, PackError> {
    let dim = 3 * p * p;
    let mut data = Vec::new();
    for im in frames {
        data.extend_from_slice(patchify::<S>(im, p)?.data());
    }
    let rows = data.len() / dim;
    Ok(Tensor::new(vec![rows, dim], data))
}

fn assemble<S: Scalar>(
    refs: &[Image],
    target_grids: Vec<(usize, usize)>,
    target_state: &Tensor<S>,
    instruction: Option<&str>,
    t: f64,
    params: &PackParams,
) -> Result<PackedSequence<S>, PackError> {
    let n_out = target_grids.len();
    let (text_ids, text_len) = params.encode_padded(n_out, instruction)?;

    let plan = assign_temporal_indices(refs.len(), n_out, params.strategy, &params.rope)?;
    let ref_grids = target_grids_of(refs, params.patch)?;
    let geoms = frame_geoms(&plan, &ref_grids, &target_grids)?;

    let dim = 3 * params.patch * params.patch;
    let ref_tokens = concat_frame_tokens::<S>(refs, params.patch)?;
    let n_target_tokens: usize = target_grids.iter().map(|&(r, c)| r * c).sum();
    assert_eq!(
        target_state.shape(),
        &[n_target_tokens, dim],
        "target state must cover the requested grids"
    );

    let mut data = Vec::with_capacity((ref_tokens.shape()[0] + n_target_tokens) * dim);
    data.extend_from_slice(ref_tokens.data());
    data.extend_from_slice(target_state.data());
    let n_image_tokens = ref_tokens.shape()[0] + n_target_tokens;
    let image_tokens = Tensor::new(vec![n_image_tokens, dim], data);

    let total = params.l_text + n_image_tokens;
    let mut attn_mask = vec![true; total];
    for m in attn_mask.iter_mut().take(params.l_text).skip(text_len) {
        *m = false;
    }
    let mut loss_mask = vec![false; total];
    let mut frame_spans = Vec::with_capacity(geoms.len());
    let mut offset = params.l_text;
    for (i, g) in geoms.iter().enumerate() {
        let len = g.rows * g.cols;
        let role = if i < refs.len() {
            FrameRole::Ref
        } else {
            FrameRole::Target
        };
        if role == FrameRole::Target {
            for m in loss_mask.iter_mut().skip(offset).take(len) {
                *m = true;
            }
        }
        frame_spans.push(FrameSpan { offset, len, role });
        offset += len;
    }
    debug_assert_eq!(offset, total);

    Ok(PackedSequence {
        text_ids,
        text_len,
        image_tokens,
        attn_mask,
        loss_mask,
        frame_spans,
        geoms,
        v_target: None,
        t,
        patch: params.patch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> PackParams {
        PackParams {
            patch: 8,
            l_text: 32,
            rope: RopeConfig::default(),
            strategy: RopeStrategy::Marginal,
            on_miss: OnVocabMiss::Error,
        }
    }

    fn checker(h: usize, w: usize) -> Image {
        let mut im = Image::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let v = ((r / 4 + c / 4) % 2) as f32;
                im.set(r, c, [v, 0.5 * v, 1.0 - v]);
            }
        }
        im
    }

    #[test]
    fn prompt_template_is_exact() {
        assert_eq!(
            render_prompt(3, "recolor the red circle to blue ."),
            "Please output 3 images according to the instruction: recolor the red circle to blue ."
        );
    }

    #[test]
    fn preamble_tokenizes_closed() {
        let ids = tokenize_text(&render_prompt(2, "move the red circle left by 3 cells ."),
            OnVocabMiss::Error,
        )
        .unwrap();
        assert!(ids.iter().all(|&i| i != UNK_ID && i < vocab_size()));
        // "instruction:" splits into word + colon.
        let back: Vec<&str> = ids.iter().map(|&i| VOCAB[i]).collect();
        assert!(back.windows(2).any(|w| w == ["instruction", ":"]));
    }

    #[test]
    fn unknown_words_error_or_map_to_unk() {
        let err = tokenize_text("a frobnicating circle", OnVocabMiss::Error).unwrap_err();
        assert_eq!(
            err,
            PackError::UnknownToken {
                token: "frobnicating".into()
            }
        );
        let ids = tokenize_text("a frobnicating circle", OnVocabMiss::Unk).unwrap();
        assert_eq!(ids[1], UNK_ID);
    }

    #[test]
    fn patchify_round_trips() {
        let im = checker(16, 24);
        let tokens = patchify::<f64>(&im, 8).unwrap();
        assert_eq!(tokens.shape(), &[2 * 3, 3 * 64]);
        let back = unpatchify(&tokens, 2, 3, 8);
        for (a, b) in im.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn indivisible_images_are_rejected() {
        let im = Image::zeros(15, 16);
        assert_eq!(
            patchify::<f32>(&im, 8).unwrap_err(),
            PackError::IndivisibleShape { size: 15, patch: 8 }
        );
    }

    #[test]
    fn pack_layout_and_masks() {
        let sample = Sample {
            refs: vec![checker(16, 16), checker(16, 16)],
            targets: vec![checker(16, 16), checker(16, 16)],
            instruction: "move the red circle left by 2 cells .".into(),
        };
        let p = params();
        let noise = Tensor::<f32>::zeros(vec![2 * 4, 3 * 64]);
        let seq = pack(&sample, Some(&sample.instruction), 0.5, &noise, &p).unwrap();

        assert_eq!(seq.total_tokens(), 32 + 4 * 4);
        assert_eq!(seq.frame_spans.len(), 4);
        // Spans tile the image region contiguously, refs before targets.
        assert_eq!(seq.frame_spans[0].offset, 32);
        assert_eq!(seq.target_offset(), 32 + 8);
        assert_eq!(seq.target_token_count(), 8);
        // Text padding is attention-masked, nothing else is.
        let pad_masked = seq.attn_mask.iter().filter(|&&m| !m).count();
        assert_eq!(pad_masked, 32 - seq.text_len);
        // Loss sits exactly on target tokens.
        let on: Vec<usize> = (0..seq.total_tokens()).filter(|&i| seq.loss_mask[i]).collect();
        assert_eq!(on, (40..48).collect::<Vec<_>>());
        // Interpolant at t=0.5 with zero noise halves the clean values.
        let clean = patchify::<f32>(&sample.targets[0], 8).unwrap();
        let packed = &seq.image_tokens.data()[8 * 192..9 * 192];
        for (x, c) in packed.iter().zip(clean.data()) {
            assert!((x - 0.5 * c).abs() < 1e-6);
        }
        // Marginal temporal slots: refs from 0 up, targets from 24 up.
        let slots: Vec<usize> = seq.geoms.iter().map(|g| g.temporal).collect();
        assert_eq!(slots, vec![0, 1, 24, 25]);
    }

    #[test]
    fn null_caption_packs_single_marker() {
        let sample = Sample {
            refs: vec![],
            targets: vec![checker(16, 16)],
            instruction: "ignored".into(),
        };
        let p = params();
        let noise = Tensor::<f32>::zeros(vec![4, 192]);
        let seq = pack(&sample, None, 1.0, &noise, &p).unwrap();
        assert_eq!(seq.text_len, 1);
        assert_eq!(seq.text_ids[0], NULL_ID);
        assert!(seq.text_ids[1..].iter().all(|&i| i == PAD_ID));
    }

    #[test]
    fn prompt_overflow_is_an_error() {
        let mut p = params();
        p.l_text = 8;
        let sample = Sample {
            refs: vec![],
            targets: vec![checker(16, 16)],
            instruction: "move the red circle left by 2 cells .".into(),
        };
        let noise = Tensor::<f32>::zeros(vec![4, 192]);
        match pack(&sample, Some(&sample.instruction), 0.0, &noise, &p) {
            Err(PackError::PromptTooLong { cap: 8, .. }) => {}
            other => panic!("expected PromptTooLong, got {other:?}"),
        }
    }
}
