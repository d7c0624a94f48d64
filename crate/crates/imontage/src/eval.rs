//! Storyboard consistency metrics over masked-foreground embeddings —
//! identity preservation against references and temporal consistency across
//! a generated set — plus a pluggable embedding extractor, PSNR, a JSON
//! report, and an optional VLM rating client with an offline stub.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::encode_png;
use crate::pack::Image;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("need at least one generated and one reference embedding")]
    EmptySet,
    #[error("temporal consistency needs at least two embeddings, got {0}")]
    NeedTwo(usize),
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("length mismatch: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("vlm transport: {0}")]
    Transport(String),
    #[error("vlm reply does not match the required format: {0}")]
    MalformedReply(String),
    #[error("vlm score {0} outside 0-10")]
    ScoreOutOfRange(i64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Similarity scores

/// Cosine similarity, computed as `a·b / sqrt((a·a)(b·b))` so that a vector
/// against itself is exactly 1.0, and clamped into `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::DimMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Identity preservation: the mean cosine similarity over every
/// (generated, reference) pair.
pub fn ip_score(gen: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<f64, EvalError> {
    if gen.is_empty() || refs.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut sum = 0.0;
    for g in gen {
        for r in refs {
            sum += cosine(g, r)?;
        }
    }
    Ok(sum / (gen.len() * refs.len()) as f64)
}

/// Temporal consistency: the mean cosine similarity over every unordered
/// pair of generated embeddings.
pub fn tc_score(gen: &[Vec<f64>]) -> Result<f64, EvalError> {
    let n = gen.len();
    if n < 2 {
        return Err(EvalError::NeedTwo(n));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += cosine(&gen[i], &gen[j])?;
        }
    }
    Ok(sum * 2.0 / (n * (n - 1)) as f64)
}

/// Peak signal-to-noise ratio in dB over `[0, 1]` pixels; infinite for
/// identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, EvalError> {
    if a.data.len() != b.data.len() || a.h != b.h || a.w != b.w {
        return Err(EvalError::DimMismatch {
            a: a.data.len(),
            b: b.data.len(),
        });
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

// ---------------------------------------------------------------------------
// Embeddings

/// Turns a foreground-masked image into a fixed-dimension vector. Callers
/// guarantee the mask is non-empty and sized `h*w`.
pub trait EmbeddingExtractor {
    fn dim(&self) -> usize;
    fn embed(&self, img: &Image, mask: &[bool]) -> Vec<f64>;
}

/// Built-in extractor: per-channel masked mean and variance, concatenated
/// with an 8x8 masked grayscale thumbnail, L2-normalized. Heavyweight
/// learned backbones plug in through the same trait.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultExtractor;

const THUMB: usize = 8;

impl EmbeddingExtractor for DefaultExtractor {
    fn dim(&self) -> usize {
        3 + 3 + THUMB * THUMB
    }

    fn embed(&self, img: &Image, mask: &[bool]) -> Vec<f64> {
        let mut count = 0.0f64;
        let mut mean = [0.0f64; 3];
        for (i, &keep) in mask.iter().enumerate() {
            if keep {
                count += 1.0;
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += img.data[3 * i + c] as f64;
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        let mut var = [0.0f64; 3];
        let mut thumb_sum = vec![0.0f64; THUMB * THUMB];
        let mut thumb_n = vec![0.0f64; THUMB * THUMB];
        for y in 0..img.h {
            for x in 0..img.w {
                let i = y * img.w + x;
                if !mask[i] {
                    continue;
                }
                let mut gray = 0.0;
                for (c, m) in mean.iter().enumerate() {
                    let v = img.data[3 * i + c] as f64;
                    var[c] += (v - m) * (v - m);
                    gray += v;
                }
                let cell = (y * THUMB / img.h) * THUMB + x * THUMB / img.w;
                thumb_sum[cell] += gray / 3.0;
                thumb_n[cell] += 1.0;
            }
        }
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(&mean);
        out.extend(var.iter().map(|v| v / count));
        out.extend(
            thumb_sum
                .iter()
                .zip(&thumb_n)
                .map(|(&s, &n)| if n > 0.0 { s / n } else { 0.0 }),
        );
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut out {
                *v /= norm;
            }
        }
        out
    }
}

/// Boolean foreground mask from a mask image: a pixel is foreground when
/// its channel mean exceeds one half.
pub fn mask_from_image(mask: &Image) -> Vec<bool> {
    (0..mask.h * mask.w)
        .map(|i| {
            let px = &mask.data[3 * i..3 * i + 3];
            (px[0] + px[1] + px[2]) / 3.0 > 0.5
        })
        .collect()
}

/// Apply `extractor` to the foreground of `img`, validating the mask first.
pub fn masked_embed(
    img: &Image,
    mask: &[bool],
    extractor: &dyn EmbeddingExtractor,
) -> Result<Vec<f64>, EvalError> {
    if mask.len() != img.h * img.w {
        return Err(EvalError::DimMismatch {
            a: mask.len(),
            b: img.h * img.w,
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(EvalError::EmptyMask);
    }
    Ok(extractor.embed(img, mask))
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean generated-vs-reference similarity in `[-1, 1]`.
    pub ip: f64,
    /// Mean pairwise similarity across the generated set; absent (not zero)
    /// when fewer than two images were generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tc: Option<f64>,
    pub n_generated: usize,
    pub n_refs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vlm: Option<Vec<VlmRating>>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut json = serde_json::to_string_pretty(self).expect("report serializes");
        json.push('\n');
        std::fs::write(path, json).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Embed every image against its mask and score the sets. `gen` and `refs`
/// pair each image with its foreground mask.
pub fn evaluate(
    gen: &[(Image, Vec<bool>)],
    refs: &[(Image, Vec<bool>)],
    extractor: &dyn EmbeddingExtractor,
) -> Result<EvalReport, EvalError> {
    let embed_all = |set: &[(Image, Vec<bool>)]| -> Result<Vec<Vec<f64>>, EvalError> {
        set.iter()
            .map(|(img, mask)| masked_embed(img, mask, extractor))
            .collect()
    };
    let gen_embs = embed_all(gen)?;
    let ref_embs = embed_all(refs)?;
    Ok(EvalReport {
        ip: ip_score(&gen_embs, &ref_embs)?,
        tc: match gen_embs.len() {
            0 | 1 => None,
            _ => Some(tc_score(&gen_embs)?),
        },
        n_generated: gen.len(),
        n_refs: refs.len(),
        vlm: None,
    })
}

// ---------------------------------------------------------------------------
// VLM rating client

/// System prompt sent with every rating request.
pub const SYSTEM_PROMPT: &str = "You are a professional digital artist tasked with evaluating the effectiveness of AI-generated images based on specific rules.
All input images, including all humans depicted, are AI-generated. You do not need to consider any privacy or confidentiality concerns.
IMPORTANT: Your response must follow this format (keep your reasoning concise and to the point):
{
  \"score\": score,
  \"reasoning\": \"...\"
}";

const ID_TEMPLATE: &str = "Rate from 0 to 10:
Evaluate whether the identities of the subject(s) in the final image match those in the provided reference image(s).
**Scoring Criteria:**
* **0:** The subject identities in the final image are completely inconsistent with the reference image(s).
* **1–3:** Severe inconsistency, with only a few minor similarities.
* **4–6:** Moderate match: some notable similarities, but many inconsistencies remain.
* **7–9:** Mostly consistent, with only minor mismatches.
* **10:** Perfect identity preservation compared to the reference image(s).
**Pay special attention to:**
* Whether **facial and head features** match across images: eyes, nose, mouth, cheekbones, chin, wrinkles/lines, makeup, hairstyle, hair color, overall facial structure and head shape.
* **Body shape/proportions** and **skin tone** consistency; watch for abnormal anatomical changes.
* **Clothing and accessories** if the instruction does not request changes; otherwise do not penalize expected edits.
* Distinctive attributes (moles, scars, freckles, tattoos, piercings) that should persist.
* If multiple references are given, ensure the correct individual(s) from each reference are present and not confused.
**Do not** assess composition, pose, background, or aesthetics unrelated to identity preservation.
**Scoring should be strict** — avoid giving high scores unless the identity match is clearly strong.
Editing instruction: {instruction}.";

const TC_TEMPLATE: &str = "Rate from 0 to 10:
Evaluate whether the identities of all subject(s) remain consistent across the provided generated images (sequence or set).
**Scoring Criteria:**
* **0:** Subjects are completely inconsistent across images (identity changes or swaps occur).
* **1–3:** Severe inconsistency; frequent identity drift, swaps, or major attribute changes.
* **4–6:** Moderate consistency; some notable similarities but multiple mismatches across images.
* **7–9:** Mostly consistent identities with only minor mismatches.
* **10:** Perfect temporal identity consistency across all images.
**Pay special attention to:**
* Stable **facial/head features** for the same subject across images (eyes, nose, mouth, facial structure, hairstyle/color).
* Consistent **body shape** and **skin tone** for each individual across images.
* **Clothing/accessories** stability unless the instruction implies changes; otherwise do not penalize expected edits.
* For **multi-person scenes**, ensure each person maintains a consistent identity mapping across images (no A/B swapping).
**Ignore** differences in pose, composition, viewpoint, background, or lighting that do not affect identity.
**Scoring should be strict** — do not award high scores unless identity consistency is clear across all images.
Editing instruction: {instruction}";

/// Which rating dimension a request asks the judge for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    IdPreservation,
    TemporalConsistency,
}

impl Template {
    /// The full prompt for this dimension with the editing instruction
    /// substituted in.
    pub fn render(self, instruction: &str) -> String {
        let body = match self {
            Template::IdPreservation => ID_TEMPLATE,
            Template::TemporalConsistency => TC_TEMPLATE,
        };
        body.replace("{instruction}", instruction)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmRating {
    pub template: Template,
    pub score: u8,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VlmEndpoint {
    /// Offline mode: every request succeeds with this fixed score.
    Stub { score: u8 },
    /// Generic JSON-over-HTTP judge.
    Http { url: String },
}

/// Mandated reply shape; anything else is a malformed reply.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VlmReply {
    score: i64,
    reasoning: String,
}

#[derive(Debug, Clone)]
pub struct VlmClient {
    pub endpoint: VlmEndpoint,
    /// Extra attempts after a transport failure; replies that arrive but
    /// fail validation are never retried.
    pub retries: u32,
}

impl VlmClient {
    pub fn stub(score: u8) -> VlmClient {
        VlmClient {
            endpoint: VlmEndpoint::Stub { score },
            retries: 0,
        }
    }

    pub fn http(url: impl Into<String>) -> VlmClient {
        VlmClient {
            endpoint: VlmEndpoint::Http { url: url.into() },
            retries: 0,
        }
    }

    /// Rate one image set on one dimension. Requests are issued one at a
    /// time; batch callers get concurrency by sharding sets across clients.
    pub fn rate(
        &self,
        images: &[Image],
        instruction: &str,
        template: Template,
    ) -> Result<VlmRating, EvalError> {
        let prompt = template.render(instruction);
        let raw = match &self.endpoint {
            VlmEndpoint::Stub { score } => {
                return check_score(*score as i64, "stub rating".to_string(), template);
            }
            VlmEndpoint::Http { url } => {
                let b64: Vec<String> = images
                    .iter()
                    .map(|im| {
                        use base64::Engine as _;
                        base64::engine::general_purpose::STANDARD.encode(encode_png(im))
                    })
                    .collect();
                let body = serde_json::json!({
                    "system": SYSTEM_PROMPT,
                    "prompt": prompt,
                    "images": b64,
                });
                self.post(url, &body)?
            }
        };
        let reply: VlmReply = serde_json::from_str(&raw)
            .map_err(|e| EvalError::MalformedReply(format!("{e}: {raw}")))?;
        check_score(reply.score, reply.reasoning, template)
    }

    fn post(&self, url: &str, body: &serde_json::Value) -> Result<String, EvalError> {
        let mut last = None;
        for _ in 0..=self.retries {
            match ureq::post(url).send_json(body) {
                Ok(mut resp) => {
                    return resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| EvalError::Transport(e.to_string()));
                }
                Err(e) => last = Some(e),
            }
        }
        Err(EvalError::Transport(last.expect("at least one attempt").to_string()))
    }
}

fn check_score(score: i64, reasoning: String, template: Template) -> Result<VlmRating, EvalError> {
    if !(0..=10).contains(&score) {
        return Err(EvalError::ScoreOutOfRange(score));
    }
    Ok(VlmRating {
        template,
        score: score as u8,
        reasoning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_matches_the_closed_forms() {
        let v = vec![0.3, -1.2, 2.0];
        assert_eq!(cosine(&v, &v).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 1.0 / 2.0f64.sqrt()).abs() < 1e-15);
        let neg = cosine(&v, &v.iter().map(|x| -x).collect::<Vec<_>>()).unwrap();
        assert_eq!(neg, -1.0);
    }

    #[test]
    fn degenerate_vectors_are_rejected() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(EvalError::ZeroVector)
        ));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(EvalError::DimMismatch { a: 1, b: 2 })
        ));
    }

    #[test]
    fn ip_matches_the_examples_and_the_double_loop() {
        let half = ip_score(&[vec![1.0, 0.0]], &[vec![1.0, 3.0f64.sqrt()]]).unwrap();
        assert!((half - 0.5).abs() < 1e-15);
        let same = vec![vec![0.1, 2.0], vec![0.2, 4.0]];
        assert_eq!(ip_score(&same, &same[..1]).unwrap(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rand_set = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..4).map(|_| rng.random::<f64>() - 0.5).collect())
                .collect()
        };
        for _ in 0..50 {
            let g = rand_set(&mut rng, 3);
            let r = rand_set(&mut rng, 2);
            let mut naive = 0.0;
            for gi in &g {
                let mut inner = 0.0;
                for rk in &r {
                    inner += cosine(gi, rk).unwrap();
                }
                naive += inner / r.len() as f64;
            }
            naive /= g.len() as f64;
            assert!((ip_score(&g, &r).unwrap() - naive).abs() < 1e-12);
        }
        assert!(matches!(ip_score(&[], &same), Err(EvalError::EmptySet)));
        assert!(matches!(ip_score(&same, &[]), Err(EvalError::EmptySet)));
    }

    #[test]
    fn tc_matches_the_hand_evaluations() {
        let e1 = vec![1.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0];
        let set = vec![e1.clone(), e1.clone(), e2];
        assert_eq!(tc_score(&set).unwrap(), 1.0 / 3.0);
        let same = vec![vec![0.5, -2.0]; 4];
        assert_eq!(tc_score(&same).unwrap(), 1.0);
        assert!(matches!(tc_score(&same[..1]), Err(EvalError::NeedTwo(1))));
    }

    #[test]
    fn scores_survive_permutation_and_positive_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..6).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let refs: Vec<Vec<f64>> = set[..2].to_vec();
        let base_tc = tc_score(&set).unwrap();
        let base_ip = ip_score(&set, &refs).unwrap();

        let mut shuffled = set.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        assert!((tc_score(&shuffled).unwrap() - base_tc).abs() < 1e-12);
        assert!((ip_score(&shuffled, &refs).unwrap() - base_ip).abs() < 1e-12);

        let scaled: Vec<Vec<f64>> = set
            .iter()
            .map(|v| v.iter().map(|x| x * 37.5).collect())
            .collect();
        assert!((tc_score(&scaled).unwrap() - base_tc).abs() < 1e-12);
        assert!((ip_score(&scaled, &refs).unwrap() - base_ip).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&base_tc));
        assert!((-1.0..=1.0).contains(&base_ip));
    }

    #[test]
    fn default_extractor_reports_constant_color_moments() {
        let img = Image::fill(16, 16, [0.25, 0.5, 0.75]);
        let mask = vec![true; 16 * 16];
        let e = masked_embed(&img, &mask, &DefaultExtractor).unwrap();
        assert_eq!(e.len(), DefaultExtractor.dim());
        // Unnormalized moments: mean = color, var = 0. Recover the scale from
        // the norm and check the ratios.
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((e[0] / e[1] - 0.5).abs() < 1e-6);
        assert!((e[2] / e[1] - 1.5).abs() < 1e-6);
        for &v in &e[3..6] {
            assert!(v.abs() < 1e-12, "variance of a flat color must be zero");
        }
    }

    #[test]
    fn disjoint_masks_and_empty_masks_behave() {
        let mut img = Image::fill(8, 8, [0.0, 0.0, 0.0]);
        for y in 0..8 {
            for x in 0..4 {
                img.set(y, x, [1.0, 0.0, 0.0]);
            }
        }
        let left: Vec<bool> = (0..64).map(|i| i % 8 < 4).collect();
        let right: Vec<bool> = (0..64).map(|i| i % 8 >= 4).collect();
        let el = masked_embed(&img, &left, &DefaultExtractor).unwrap();
        let er = masked_embed(&img, &right, &DefaultExtractor).unwrap();
        assert_ne!(el, er);
        assert!(matches!(
            masked_embed(&img, &[false; 64], &DefaultExtractor),
            Err(EvalError::EmptyMask)
        ));
        assert!(matches!(
            masked_embed(&img, &[true; 3], &DefaultExtractor),
            Err(EvalError::DimMismatch { .. })
        ));
    }

    #[test]
    fn mask_round_trips_through_an_image() {
        let mut mask_img = Image::fill(4, 4, [0.0, 0.0, 0.0]);
        mask_img.set(1, 2, [1.0, 1.0, 1.0]);
        mask_img.set(3, 0, [1.0, 1.0, 1.0]);
        let mask = mask_from_image(&mask_img);
        let on: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        assert_eq!(on, vec![6, 12]);
    }

    #[test]
    fn psnr_matches_the_closed_form() {
        let a = Image::fill(8, 8, [0.0, 0.0, 0.0]);
        let b = Image::fill(8, 8, [0.5, 0.5, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let got = psnr(&a, &b).unwrap();
        assert!((got - 10.0 * 4.0f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn evaluate_builds_a_report_and_serializes_it() {
        let red = Image::fill(16, 16, [1.0, 0.1, 0.1]);
        let mask = vec![true; 256];
        let gen = vec![(red.clone(), mask.clone()), (red.clone(), mask.clone())];
        let refs = vec![(red.clone(), mask.clone())];
        let report = evaluate(&gen, &refs, &DefaultExtractor).unwrap();
        assert_eq!(report.ip, 1.0);
        assert_eq!(report.tc, Some(1.0));
        assert_eq!((report.n_generated, report.n_refs), (2, 1));

        let solo = evaluate(&gen[..1], &refs, &DefaultExtractor).unwrap();
        assert_eq!(solo.tc, None);
        let json = serde_json::to_string(&solo).unwrap();
        assert!(!json.contains("\"tc\""), "undefined tc must be absent: {json}");
        assert!(!json.contains("\"vlm\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, solo);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(serde_json::from_str::<EvalReport>(&text).unwrap(), report);
    }

    #[test]
    fn templates_substitute_the_instruction() {
        let p = Template::IdPreservation.render("move the red circle left by 2 cells");
        assert!(p.starts_with("Rate from 0 to 10:\n"));
        assert!(p.ends_with("Editing instruction: move the red circle left by 2 cells."));
        assert!(!p.contains("{instruction}"));
        let t = Template::TemporalConsistency.render("x");
        assert!(t.ends_with("Editing instruction: x"));
        assert!(SYSTEM_PROMPT.starts_with("You are a professional digital artist"));
        assert!(SYSTEM_PROMPT.ends_with("}"));
    }

    #[test]
    fn stub_endpoint_returns_the_configured_score() {
        let rating = VlmClient::stub(7)
            .rate(&[], "anything", Template::IdPreservation)
            .unwrap();
        assert_eq!(rating.score, 7);
        assert_eq!(rating.template, Template::IdPreservation);
        assert!(matches!(
            VlmClient::stub(11).rate(&[], "x", Template::IdPreservation),
            Err(EvalError::ScoreOutOfRange(11))
        ));
    }

    // A one-request HTTP server that captures the request body and replies
    // with a fixed payload.
    fn one_shot_server(reply: &'static str) -> (String, std::sync::mpsc::Receiver<String>) {
        use std::io::{Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut tmp = [0u8; 4096];
            let (mut header_end, mut content_len) = (None, 0usize);
            loop {
                if let Some(he) = header_end {
                    if buf.len() >= he + content_len {
                        break;
                    }
                }
                let n = stream.read(&mut tmp).unwrap();
                assert!(n > 0, "request ended early");
                buf.extend_from_slice(&tmp[..n]);
                if header_end.is_none() {
                    if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                        header_end = Some(pos + 4);
                        let headers = String::from_utf8_lossy(&buf[..pos]).to_ascii_lowercase();
                        for line in headers.lines() {
                            if let Some(v) = line.strip_prefix("content-length:") {
                                content_len = v.trim().parse().unwrap();
                            }
                        }
                    }
                }
            }
            let he = header_end.unwrap();
            tx.send(String::from_utf8(buf[he..he + content_len].to_vec()).unwrap())
                .unwrap();
            let resp = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                reply.len(),
                reply
            );
            stream.write_all(resp.as_bytes()).unwrap();
        });
        (format!("http://{addr}"), rx)
    }

    #[test]
    fn http_endpoint_round_trips_the_protocol() {
        let (url, rx) = one_shot_server(r#"{"score": 7, "reasoning": "ok"}"#);
        let images = vec![
            Image::fill(8, 8, [1.0, 0.0, 0.0]),
            Image::fill(8, 8, [0.0, 1.0, 0.0]),
        ];
        let rating = VlmClient::http(url)
            .rate(&images, "recolor the red circle to blue", Template::IdPreservation)
            .unwrap();
        assert_eq!(rating.score, 7);
        assert_eq!(rating.reasoning, "ok");

        let body: serde_json::Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(body["system"], SYSTEM_PROMPT);
        let prompt = body["prompt"].as_str().unwrap();
        assert!(prompt.contains("Editing instruction: recolor the red circle to blue."));
        let imgs = body["images"].as_array().unwrap();
        assert_eq!(imgs.len(), 2);
        for b64 in imgs {
            use base64::Engine as _;
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.as_str().unwrap())
                .unwrap();
            assert_eq!(&bytes[1..4], b"PNG");
        }
    }

    #[test]
    fn bad_replies_map_to_the_right_errors() {
        for (reply, want_malformed, want_range) in [
            (r#"{"reasoning": "no score"}"#, true, false),
            (r#"{"score": 7}"#, true, false),
            (r#"{"score": 7, "reasoning": "ok", "extra": 1}"#, true, false),
            ("not json", true, false),
            (r#"{"score": 11, "reasoning": "ok"}"#, false, true),
            (r#"{"score": -1, "reasoning": "ok"}"#, false, true),
        ] {
            let (url, _rx) = one_shot_server(reply);
            let err = VlmClient::http(url)
                .rate(&[], "x", Template::TemporalConsistency)
                .unwrap_err();
            match (want_malformed, want_range) {
                (true, _) => assert!(
                    matches!(err, EvalError::MalformedReply(_)),
                    "{reply}: {err:?}"
                ),
                (_, true) => assert!(
                    matches!(err, EvalError::ScoreOutOfRange(_)),
                    "{reply}: {err:?}"
                ),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn unreachable_endpoints_report_transport() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let mut client = VlmClient::http(format!("http://{addr}"));
        client.retries = 1;
        assert!(matches!(
            client.rate(&[], "x", Template::IdPreservation),
            Err(EvalError::Transport(_))
        ));
    }
}
