//! The montage transformer.
//!
//! Text and image tokens first run through a stack of dual-stream blocks:
//! each modality keeps its own weights, the two token sets are concatenated
//! for one joint bidirectional attention, then split back apart. After that
//! the streams merge for a stack of shared single-stream blocks. Every block
//! is conditioned on the flow time through adaLN shift/scale/gate modulation
//! whose linear layers start at zero, so at init each block is the identity
//! and the zero-initialized output head makes the whole model emit exactly
//! zero. Rotary tables from the packed geometry rotate q and k only; text
//! rows rotate by nothing.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pack::{vocab_size, PackedSequence};
use crate::rope::{build_rope_tables, RopeConfig};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, TensorId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth_dual: usize,
    pub depth_single: usize,
    pub mlp_ratio: usize,
    /// Pixel patch side; a token is a p x p RGB patch.
    pub patch: usize,
    /// Padded text length every sequence reserves.
    pub l_text: usize,
    /// Width of the sinusoidal time feature fed to the conditioning MLP.
    pub freq_dim: usize,
    pub rope: RopeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            heads: 4,
            depth_dual: 2,
            depth_single: 2,
            mlp_ratio: 4,
            patch: 8,
            l_text: 32,
            freq_dim: 64,
            rope: RopeConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn token_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.rope.head_dim != self.head_dim() {
            return Err(format!(
                "rope head_dim {} != dim/heads {}",
                self.rope.head_dim,
                self.head_dim()
            ));
        }
        if !self.freq_dim.is_multiple_of(2) || self.freq_dim == 0 {
            return Err(format!("freq_dim {} must be positive and even", self.freq_dim));
        }
        if self.mlp_ratio == 0 || self.patch == 0 || self.l_text == 0 {
            return Err("mlp_ratio, patch, l_text must be positive".into());
        }
        self.rope.validate()
    }
}

/// Named parameter tensors; BTreeMap so iteration order is the name order.
pub type Parameters<S> = BTreeMap<String, Tensor<S>>;

/// Total scalar count across all parameters.
pub fn param_count<S: Scalar>(params: &Parameters<S>) -> usize {
    params.values().map(Tensor::numel).sum()
}

/// Closed-form parameter count for a config, the oracle `init_params` must hit.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.dim;
    let td = cfg.token_dim();
    let mlp = d * (cfg.mlp_ratio * d) + cfg.mlp_ratio * d + (cfg.mlp_ratio * d) * d + d;
    let attn = 4 * (d * d + d);
    let block = (d * 6 * d + 6 * d) + 2 * d + attn + mlp;
    let embeds = vocab_size() * d + cfg.l_text * d + (td * d + d);
    let time = cfg.freq_dim * d + d + d * d + d;
    let final_layer = (d * 2 * d + 2 * d) + (d * td + td);
    embeds + time + cfg.depth_dual * 2 * block + cfg.depth_single * block + final_layer
}

/// Normal(0, sigma) truncated to two sigma by resampling.
fn trunc_normal<S: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, sigma: f64) -> Tensor<S> {
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        for z in [r * theta.cos(), r * theta.sin()] {
            if z.abs() <= 2.0 && data.len() < n {
                data.push(S::from_f64(sigma * z));
            }
        }
    }
    Tensor::new(shape, data)
}

const INIT_SIGMA: f64 = 0.02;

/// Fresh parameters: trunc-normal weights, zero biases, unit norm gains, and
/// zeroed modulation + output head so the first forward pass is exactly zero.
pub fn init_params<S: Scalar, R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Parameters<S> {
    let d = cfg.dim;
    let td = cfg.token_dim();
    let mut p: Parameters<S> = BTreeMap::new();
    let w = |p: &mut Parameters<S>, name: String, shape: Vec<usize>, rng: &mut R| {
        p.insert(name, trunc_normal(rng, shape, INIT_SIGMA));
    };
    let zero = |p: &mut Parameters<S>, name: String, shape: Vec<usize>| {
        p.insert(name, Tensor::zeros(shape));
    };
    let ones = |p: &mut Parameters<S>, name: String, shape: Vec<usize>| {
        p.insert(name, Tensor::full(shape, S::ONE));
    };

    w(&mut p, "text_embed.table".into(), vec![vocab_size(), d], rng);
    w(&mut p, "text_embed.pos".into(), vec![cfg.l_text, d], rng);
    w(&mut p, "patch_embed.w".into(), vec![td, d], rng);
    zero(&mut p, "patch_embed.b".into(), vec![d]);
    w(&mut p, "time_embed.w1".into(), vec![cfg.freq_dim, d], rng);
    zero(&mut p, "time_embed.b1".into(), vec![d]);
    w(&mut p, "time_embed.w2".into(), vec![d, d], rng);
    zero(&mut p, "time_embed.b2".into(), vec![d]);

    let block = |p: &mut Parameters<S>, prefix: String, rng: &mut R| {
        zero(p, format!("{prefix}.mod.w"), vec![d, 6 * d]);
        zero(p, format!("{prefix}.mod.b"), vec![6 * d]);
        ones(p, format!("{prefix}.norm1.g"), vec![d]);
        ones(p, format!("{prefix}.norm2.g"), vec![d]);
        for nm in ["wq", "wk", "wv", "wo"] {
            w(p, format!("{prefix}.attn.{nm}"), vec![d, d], rng);
            zero(p, format!("{prefix}.attn.b{}", &nm[1..]), vec![d]);
        }
        w(p, format!("{prefix}.mlp.w1"), vec![d, cfg.mlp_ratio * d], rng);
        zero(p, format!("{prefix}.mlp.b1"), vec![cfg.mlp_ratio * d]);
        w(p, format!("{prefix}.mlp.w2"), vec![cfg.mlp_ratio * d, d], rng);
        zero(p, format!("{prefix}.mlp.b2"), vec![d]);
    };
    for i in 0..cfg.depth_dual {
        block(&mut p, format!("dual{i}.txt"), rng);
        block(&mut p, format!("dual{i}.img"), rng);
    }
    for i in 0..cfg.depth_single {
        block(&mut p, format!("single{i}"), rng);
    }
    zero(&mut p, "final.mod.w".into(), vec![d, 2 * d]);
    zero(&mut p, "final.mod.b".into(), vec![2 * d]);
    zero(&mut p, "final.proj.w".into(), vec![d, td]);
    zero(&mut p, "final.proj.b".into(), vec![td]);
    p
}

/// Parameter tensors pushed onto a tape, addressable by name.
pub struct TapeBinding {
    ids: BTreeMap<String, TensorId>,
}

impl TapeBinding {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }
}

/// Push every parameter as a tape leaf; `trainable` decides whether backward
/// will reach them.
pub fn bind_params<S: Scalar>(
    tape: &mut Tape<S>,
    params: &Parameters<S>,
    trainable: bool,
) -> TapeBinding {
    TapeBinding {
        ids: params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v, trainable)))
            .collect(),
    }
}

/// Sinusoidal feature of the flow time, `[1, freq_dim]`.
fn time_feature<S: Scalar>(t: f64, freq_dim: usize) -> Tensor<S> {
    let half = freq_dim / 2;
    let mut data = Vec::with_capacity(freq_dim);
    for i in 0..half {
        let w = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        data.push(S::from_f64((t * 1000.0 * w).cos()));
    }
    for i in 0..half {
        let w = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        data.push(S::from_f64((t * 1000.0 * w).sin()));
    }
    Tensor::new(vec![1, freq_dim], data)
}

struct Ctx<'a, S: Scalar> {
    tape: &'a mut Tape<S>,
    bound: &'a TapeBinding,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    fn p(&self, name: &str) -> TensorId {
        self.bound.id(name)
    }

    fn linear(&mut self, x: TensorId, w: &str, b: &str) -> Result<TensorId, TensorError> {
        let (w, b) = (self.p(w), self.p(b));
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    /// adaLN modulation vectors: silu(c) through a zero-init linear, split
    /// into `parts` chunks of width dim.
    fn modulation(
        &mut self,
        c: TensorId,
        prefix: &str,
        parts: usize,
        dim: usize,
    ) -> Result<Vec<TensorId>, TensorError> {
        let act = self.tape.silu(c);
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let m = self.tape.matmul(act, w)?;
        let m = self.tape.add(m, b)?;
        (0..parts).map(|i| self.tape.narrow(m, 1, i * dim, dim)).collect()
    }

    /// x * (1 + scale) + shift, broadcast over rows.
    fn modulate(
        &mut self,
        x: TensorId,
        shift: TensorId,
        scale: TensorId,
    ) -> Result<TensorId, TensorError> {
        let s1 = self.tape.add_scalar(scale, 1.0);
        let y = self.tape.mul(x, s1)?;
        self.tape.add(y, shift)
    }

    /// Joint bidirectional attention over already-projected q/k/v `[T, dim]`,
    /// rotary on q and k, key-padding mask over the last axis.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        cos: &[S],
        sin: &[S],
        mask: &[bool],
    ) -> Result<TensorId, TensorError> {
        let t_len = self.tape.shape(q)[0];
        let dim = self.tape.shape(q)[1];
        let hd = dim / heads;
        let split = |me: &mut Self, x: TensorId| -> Result<TensorId, TensorError> {
            let r = me.tape.reshape(x, &[t_len, heads, hd])?;
            let rot = me.tape.rotary(r, cos, sin)?;
            me.tape.permute(rot, &[1, 0, 2])
        };
        let qh = split(self, q)?;
        let kh = split(self, k)?;
        let vh = {
            let r = self.tape.reshape(v, &[t_len, heads, hd])?;
            self.tape.permute(r, &[1, 0, 2])?
        };
        let kt = self.tape.permute(kh, &[0, 2, 1])?;
        let scores = self.tape.matmul(qh, kt)?;
        let scores = self.tape.scale(scores, 1.0 / (hd as f64).sqrt());
        let attn = self.tape.softmax_masked(scores, Some(mask))?;
        let ctx = self.tape.matmul(attn, vh)?;
        let ctx = self.tape.permute(ctx, &[1, 0, 2])?;
        self.tape.reshape(ctx, &[t_len, dim])
    }

    fn mlp(&mut self, x: TensorId, prefix: &str) -> Result<TensorId, TensorError> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.tape.gelu(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }
}

/// One full forward pass over a packed sequence. Returns the per-token
/// velocity prediction `[total_tokens, 3 p^2]`.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &TapeBinding,
    cfg: &ModelConfig,
    seq: &PackedSequence<S>,
) -> Result<TensorId, TensorError> {
    let d = cfg.dim;
    let l = seq.text_ids.len();
    assert!(
        l <= cfg.l_text,
        "sequence text slot {l} exceeds model l_text {}",
        cfg.l_text
    );
    assert_eq!(seq.patch, cfg.patch, "sequence patch size mismatch");
    let n_img = seq.image_tokens.shape()[0];
    let total = l + n_img;
    let mut ctx = Ctx { tape, bound };

    // Conditioning vector from the flow time.
    let tf = time_feature::<S>(seq.t, cfg.freq_dim);
    let tf = ctx.tape.constant(&tf);
    let c = ctx.linear(tf, "time_embed.w1", "time_embed.b1")?;
    let c = ctx.tape.silu(c);
    let c = ctx.linear(c, "time_embed.w2", "time_embed.b2")?;

    // Token embeddings.
    let table = ctx.p("text_embed.table");
    let mut txt = ctx.tape.embedding(table, &seq.text_ids)?;
    let pos_all = ctx.p("text_embed.pos");
    let pos = ctx.tape.narrow(pos_all, 0, 0, l)?;
    txt = ctx.tape.add(txt, pos)?;
    let img_in = ctx.tape.constant(&seq.image_tokens);
    let mut img = ctx.linear(img_in, "patch_embed.w", "patch_embed.b")?;

    // Rotary tables for the full layout; text rows are identity.
    let (cos_t, sin_t) = build_rope_tables::<S>(&cfg.rope, l, &seq.geoms);
    let (cos, sin) = (cos_t.data().to_vec(), sin_t.data().to_vec());
    let mask = &seq.attn_mask;
    assert_eq!(mask.len(), total, "attention mask must cover the sequence");

    for i in 0..cfg.depth_dual {
        let (ntxt, nimg) = (format!("dual{i}.txt"), format!("dual{i}.img"));
        let mt = ctx.modulation(c, &format!("{ntxt}.mod"), 6, d)?;
        let mi = ctx.modulation(c, &format!("{nimg}.mod"), 6, d)?;

        // Per-stream pre-norm + q/k/v, one joint attention, per-stream out.
        let mut qkv = Vec::new();
        for (x, name, m) in [(txt, &ntxt, &mt), (img, &nimg, &mi)] {
            let g = ctx.p(&format!("{name}.norm1.g"));
            let h = ctx.tape.rms_norm(x, g)?;
            let h = ctx.modulate(h, m[0], m[1])?;
            qkv.push((
                ctx.linear(h, &format!("{name}.attn.wq"), &format!("{name}.attn.bq"))?,
                ctx.linear(h, &format!("{name}.attn.wk"), &format!("{name}.attn.bk"))?,
                ctx.linear(h, &format!("{name}.attn.wv"), &format!("{name}.attn.bv"))?,
            ));
        }
        let q = ctx.tape.concat(&[qkv[0].0, qkv[1].0], 0)?;
        let k = ctx.tape.concat(&[qkv[0].1, qkv[1].1], 0)?;
        let v = ctx.tape.concat(&[qkv[0].2, qkv[1].2], 0)?;
        let joint = ctx.attention(q, k, v, cfg.heads, &cos, &sin, mask)?;
        let ctx_txt = ctx.tape.narrow(joint, 0, 0, l)?;
        let ctx_img = ctx.tape.narrow(joint, 0, l, n_img)?;

        for (x, part, name, m) in [
            (&mut txt, ctx_txt, &ntxt, &mt),
            (&mut img, ctx_img, &nimg, &mi),
        ] {
            let o = ctx.linear(part, &format!("{name}.attn.wo"), &format!("{name}.attn.bo"))?;
            let gated = ctx.tape.mul(o, m[2])?;
            *x = ctx.tape.add(*x, gated)?;
            let g2 = ctx.p(&format!("{name}.norm2.g"));
            let h = ctx.tape.rms_norm(*x, g2)?;
            let h = ctx.modulate(h, m[3], m[4])?;
            let mo = ctx.mlp(h, &format!("{name}.mlp"))?;
            let gated = ctx.tape.mul(mo, m[5])?;
            *x = ctx.tape.add(*x, gated)?;
        }
    }

    // Merge streams and continue single-stream.
    let mut x = ctx.tape.concat(&[txt, img], 0)?;
    for i in 0..cfg.depth_single {
        let name = format!("single{i}");
        let m = ctx.modulation(c, &format!("{name}.mod"), 6, d)?;
        let g = ctx.p(&format!("{name}.norm1.g"));
        let h = ctx.tape.rms_norm(x, g)?;
        let h = ctx.modulate(h, m[0], m[1])?;
        let q = ctx.linear(h, &format!("{name}.attn.wq"), &format!("{name}.attn.bq"))?;
        let k = ctx.linear(h, &format!("{name}.attn.wk"), &format!("{name}.attn.bk"))?;
        let v = ctx.linear(h, &format!("{name}.attn.wv"), &format!("{name}.attn.bv"))?;
        let joint = ctx.attention(q, k, v, cfg.heads, &cos, &sin, mask)?;
        let o = ctx.linear(joint, &format!("{name}.attn.wo"), &format!("{name}.attn.bo"))?;
        let gated = ctx.tape.mul(o, m[2])?;
        x = ctx.tape.add(x, gated)?;
        let g2 = ctx.p(&format!("{name}.norm2.g"));
        let h = ctx.tape.rms_norm(x, g2)?;
        let h = ctx.modulate(h, m[3], m[4])?;
        let mo = ctx.mlp(h, &format!("{name}.mlp"))?;
        let gated = ctx.tape.mul(mo, m[5])?;
        x = ctx.tape.add(x, gated)?;
    }

    // Output head: norm without learned gain, 2-part modulation, zero-init proj.
    let ones = Tensor::full(vec![d], S::ONE);
    let ones = ctx.tape.constant(&ones);
    let h = ctx.tape.rms_norm(x, ones)?;
    let m = ctx.modulation(c, "final.mod", 2, d)?;
    let h = ctx.modulate(h, m[0], m[1])?;
    ctx.linear(h, "final.proj.w", "final.proj.b")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pack::{pack, Image, OnVocabMiss, PackParams, Sample};
    use crate::rope::RopeStrategy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
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

    fn tiny_sample() -> Sample {
        let mut r = Image::zeros(16, 16);
        let mut t = Image::zeros(16, 16);
        for i in 0..r.data.len() {
            r.data[i] = (i % 7) as f32 / 7.0;
            t.data[i] = (i % 5) as f32 / 5.0;
        }
        Sample {
            refs: vec![r],
            targets: vec![t],
            instruction: "recolor the red circle to blue .".into(),
        }
    }

    fn packed(cfg: &ModelConfig, l_text: usize) -> crate::pack::PackedSequence<f64> {
        let sample = tiny_sample();
        let params = PackParams {
            patch: cfg.patch,
            l_text,
            rope: cfg.rope.clone(),
            strategy: RopeStrategy::Marginal,
            on_miss: OnVocabMiss::Error,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = crate::tensor::randn_tensor(&mut rng, &[4, 192]);
        pack(&sample, Some(&sample.instruction), 0.4, &noise, &params).unwrap()
    }

    #[test]
    fn default_config_validates() {
        ModelConfig::default().validate().unwrap();
        tiny_cfg().validate().unwrap();
    }

    #[test]
    fn init_hits_expected_param_count() {
        for cfg in [ModelConfig::default(), tiny_cfg()] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let p = init_params::<f32, _>(&cfg, &mut rng);
            assert_eq!(param_count(&p), expected_param_count(&cfg));
        }
    }

    #[test]
    fn fresh_model_outputs_exact_zero() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_params::<f64, _>(&cfg, &mut rng);
        let seq = packed(&cfg, cfg.l_text);
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params, false);
        let out = forward(&mut tape, &bound, &cfg, &seq).unwrap();
        assert_eq!(tape.shape(out), &[seq.total_tokens(), 192]);
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn text_padding_does_not_leak() {
        // Same example packed with a roomier text slot: extra pad tokens are
        // attention-masked, so image-token outputs must not change.
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = init_params::<f64, _>(&cfg, &mut rng);
        // Perturb the zero-init layers so outputs are nontrivial.
        for (name, t) in params.iter_mut() {
            if name.contains("mod.") || name.contains("final.proj") {
                let n = t.numel();
                let shape = t.shape().to_vec();
                *t = crate::tensor::randn_tensor::<f64, _>(&mut rng, &shape);
                assert_eq!(t.numel(), n);
            }
        }
        let short = packed(&cfg, 18);
        let long = packed(&cfg, 24);
        let run = |seq: &crate::pack::PackedSequence<f64>| {
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params, false);
            let out = forward(&mut tape, &bound, &cfg, seq).unwrap();
            tape.data(out).to_vec()
        };
        let (a, b) = (run(&short), run(&long));
        // Compare the image-token block, which sits after the text slot.
        let (la, lb) = (18, 24);
        let n_img = short.image_tokens.shape()[0] * 192;
        assert_eq!(a[la * 192..la * 192 + n_img], b[lb * 192..lb * 192 + n_img]);
    }
}
