//! Discrete image tokenizer: a small convolution-free VQ autoencoder.
//!
//! The encoder alternates space-to-depth with per-position affine + SiLU
//! stages, the bottleneck snaps each position to its nearest codebook
//! row (straight-through gradients), and the decoder mirrors the encoder
//! with depth-to-space. One `H x W` image becomes `(H/f)·(W/f)` code ids.

use crate::numcore::{kernels, Tape, Tensor, Var};
use crate::store::Checkpoint;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("config error: {0}")]
    Config(String),
    #[error("expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("checkpoint missing tensor `{0}`")]
    MissingTensor(String),
    #[error(transparent)]
    Num(#[from] crate::numcore::NumError),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub height: usize,
    pub width: usize,
    /// Total spatial reduction; must be `2^len(enc_channels)`.
    pub factor: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Commitment loss weight.
    pub beta: f64,
    /// Feature width after each halving stage.
    pub enc_channels: Vec<usize>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            height: 32,
            width: 64,
            factor: 8,
            codebook_size: 256,
            code_dim: 64,
            beta: 0.25,
            enc_channels: vec![32, 64, 128],
        }
    }
}

impl TokenizerConfig {
    pub fn grid_tokens(&self) -> usize {
        (self.height / self.factor) * (self.width / self.factor)
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.enc_channels.len();
        if stages == 0 {
            return Err(TokenizerError::Config("enc_channels must be non-empty".into()));
        }
        if self.factor != 1usize << stages {
            return Err(TokenizerError::Config(format!(
                "factor {} must equal 2^{} for {} halving stages",
                self.factor, stages, stages
            )));
        }
        if self.height % self.factor != 0 || self.width % self.factor != 0 {
            return Err(TokenizerError::Config(format!(
                "factor {} must divide image extents {}x{}",
                self.factor, self.height, self.width
            )));
        }
        if self.codebook_size < 2 || self.code_dim == 0 {
            return Err(TokenizerError::Config(format!(
                "need codebook_size >= 2 and code_dim >= 1, got {} / {}",
                self.codebook_size, self.code_dim
            )));
        }
        if !(0.0..=10.0).contains(&self.beta) {
            return Err(TokenizerError::Config(format!("beta {} out of range", self.beta)));
        }
        Ok(())
    }
}

/// All trainable tensors. Encoder stage i maps `in·4 -> enc_channels[i]`
/// after its space-to-depth; the decoder mirrors the list in reverse.
#[derive(Debug, Clone)]
pub struct TokenizerParams {
    pub cfg: TokenizerConfig,
    pub enc_w: Vec<Tensor<f32>>,
    pub enc_b: Vec<Tensor<f32>>,
    pub enc_proj_w: Tensor<f32>,
    pub enc_proj_b: Tensor<f32>,
    pub codebook: Tensor<f32>,
    pub dec_proj_w: Tensor<f32>,
    pub dec_proj_b: Tensor<f32>,
    pub dec_w: Vec<Tensor<f32>>,
    pub dec_b: Tensor<f32>,
    pub dec_bs: Vec<Tensor<f32>>,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std > 0");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| dist.sample(rng) as f32)
        .collect();
    Tensor::new(shape, data).expect("shape/data")
}

impl TokenizerParams {
    pub fn init(cfg: TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc_w = Vec::new();
        let mut enc_b = Vec::new();
        let mut in_ch = 1usize;
        for &out_ch in &cfg.enc_channels {
            enc_w.push(he_normal(&mut rng, &[in_ch * 4, out_ch], in_ch * 4));
            enc_b.push(Tensor::zeros(&[out_ch]));
            in_ch = out_ch;
        }
        let last = *cfg.enc_channels.last().unwrap();
        let enc_proj_w = he_normal(&mut rng, &[last, cfg.code_dim], last);
        let enc_proj_b = Tensor::zeros(&[cfg.code_dim]);
        let cb_dist = Normal::new(0.0, 0.1).unwrap();
        let codebook = Tensor::new(
            &[cfg.codebook_size, cfg.code_dim],
            (0..cfg.codebook_size * cfg.code_dim)
                .map(|_| cb_dist.sample(&mut rng) as f32)
                .collect(),
        )?;
        let dec_proj_w = he_normal(&mut rng, &[cfg.code_dim, last], cfg.code_dim);
        let dec_proj_b = Tensor::zeros(&[last]);
        let mut dec_w = Vec::new();
        let mut dec_bs = Vec::new();
        // Reverse order: deepest stage first, ending at one channel.
        for i in (0..cfg.enc_channels.len()).rev() {
            let out_ch = if i == 0 { 1 } else { cfg.enc_channels[i - 1] };
            let ch = cfg.enc_channels[i];
            dec_w.push(he_normal(&mut rng, &[ch, out_ch * 4], ch));
            dec_bs.push(Tensor::zeros(&[out_ch * 4]));
        }
        Ok(TokenizerParams {
            cfg,
            enc_w,
            enc_b,
            enc_proj_w,
            enc_proj_b,
            codebook,
            dec_proj_w,
            dec_proj_b,
            dec_w,
            dec_b: Tensor::zeros(&[1]),
            dec_bs,
        })
    }

    /// Stable parameter order shared by the optimizer and gradients.
    pub fn param_refs(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut refs: Vec<&mut Tensor<f32>> = Vec::new();
        for w in &mut self.enc_w {
            refs.push(w);
        }
        for b in &mut self.enc_b {
            refs.push(b);
        }
        refs.push(&mut self.enc_proj_w);
        refs.push(&mut self.enc_proj_b);
        refs.push(&mut self.codebook);
        refs.push(&mut self.dec_proj_w);
        refs.push(&mut self.dec_proj_b);
        for w in &mut self.dec_w {
            refs.push(w);
        }
        for b in &mut self.dec_bs {
            refs.push(b);
        }
        refs
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (i, (w, b)) in self.enc_w.iter().zip(&self.enc_b).enumerate() {
            ckpt.insert(&format!("enc.{i}.w"), w.clone());
            ckpt.insert(&format!("enc.{i}.b"), b.clone());
        }
        ckpt.insert("enc_proj.w", self.enc_proj_w.clone());
        ckpt.insert("enc_proj.b", self.enc_proj_b.clone());
        ckpt.insert("codebook", self.codebook.clone());
        ckpt.insert("dec_proj.w", self.dec_proj_w.clone());
        ckpt.insert("dec_proj.b", self.dec_proj_b.clone());
        for (i, (w, b)) in self.dec_w.iter().zip(&self.dec_bs).enumerate() {
            ckpt.insert(&format!("dec.{i}.w"), w.clone());
            ckpt.insert(&format!("dec.{i}.b"), b.clone());
        }
        ckpt
    }

    pub fn from_checkpoint(cfg: TokenizerConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut params = TokenizerParams::init(cfg, 0)?;
        let load = |name: String, into: &mut Tensor<f32>| -> Result<()> {
            let t = ckpt
                .get(&name)
                .ok_or_else(|| TokenizerError::MissingTensor(name.clone()))?;
            if t.shape() != into.shape() {
                return Err(TokenizerError::Shape {
                    expected: format!("{name}: {:?}", into.shape()),
                    got: format!("{:?}", t.shape()),
                });
            }
            *into = t.clone();
            Ok(())
        };
        for i in 0..params.enc_w.len() {
            let (mut w, mut b) = (params.enc_w[i].clone(), params.enc_b[i].clone());
            load(format!("enc.{i}.w"), &mut w)?;
            load(format!("enc.{i}.b"), &mut b)?;
            params.enc_w[i] = w;
            params.enc_b[i] = b;
        }
        load("enc_proj.w".into(), &mut params.enc_proj_w)?;
        load("enc_proj.b".into(), &mut params.enc_proj_b)?;
        load("codebook".into(), &mut params.codebook)?;
        load("dec_proj.w".into(), &mut params.dec_proj_w)?;
        load("dec_proj.b".into(), &mut params.dec_proj_b)?;
        for i in 0..params.dec_w.len() {
            let (mut w, mut b) = (params.dec_w[i].clone(), params.dec_bs[i].clone());
            load(format!("dec.{i}.w"), &mut w)?;
            load(format!("dec.{i}.b"), &mut b)?;
            params.dec_w[i] = w;
            params.dec_bs[i] = b;
        }
        Ok(params)
    }
}

/// Tape handles for every parameter leaf, in [`TokenizerParams::param_refs`]
/// order.
struct TapeParams {
    enc_w: Vec<Var>,
    enc_b: Vec<Var>,
    enc_proj_w: Var,
    enc_proj_b: Var,
    codebook: Var,
    dec_proj_w: Var,
    dec_proj_b: Var,
    dec_w: Vec<Var>,
    dec_bs: Vec<Var>,
}

fn leaves(tape: &mut Tape<f32>, p: &TokenizerParams) -> TapeParams {
    TapeParams {
        enc_w: p.enc_w.iter().map(|t| tape.leaf(t.clone())).collect(),
        enc_b: p.enc_b.iter().map(|t| tape.leaf(t.clone())).collect(),
        enc_proj_w: tape.leaf(p.enc_proj_w.clone()),
        enc_proj_b: tape.leaf(p.enc_proj_b.clone()),
        codebook: tape.leaf(p.codebook.clone()),
        dec_proj_w: tape.leaf(p.dec_proj_w.clone()),
        dec_proj_b: tape.leaf(p.dec_proj_b.clone()),
        dec_w: p.dec_w.iter().map(|t| tape.leaf(t.clone())).collect(),
        dec_bs: p.dec_bs.iter().map(|t| tape.leaf(t.clone())).collect(),
    }
}

fn leaf_vars(tp: &TapeParams) -> Vec<Var> {
    let mut vars = Vec::new();
    vars.extend(&tp.enc_w);
    vars.extend(&tp.enc_b);
    vars.push(tp.enc_proj_w);
    vars.push(tp.enc_proj_b);
    vars.push(tp.codebook);
    vars.push(tp.dec_proj_w);
    vars.push(tp.dec_proj_b);
    vars.extend(&tp.dec_w);
    vars.extend(&tp.dec_bs);
    vars
}

/// Per-position affine over a `C x H x W` map: reshape to positions,
/// apply `linear`, reshape back to `C' x H x W`.
fn position_affine(
    tape: &mut Tape<f32>,
    x: Var,
    w: Var,
    b: Var,
    out_ch: usize,
) -> Result<Var> {
    let (_, h, wd) = tape.value(x).dims3()?;
    let flat = tape.reshape(x, &[tape.value(x).shape()[0], h * wd])?;
    let pos = tape.transpose(flat)?;
    let lin = tape.linear(pos, w, Some(b))?;
    let back = tape.transpose(lin)?;
    Ok(tape.reshape(back, &[out_ch, h, wd])?)
}

/// Encoder graph: image `[H, W]` to latents `[G, code_dim]`.
fn encode_on_tape(tape: &mut Tape<f32>, tp: &TapeParams, p: &TokenizerParams, img: Var) -> Result<Var> {
    let cfg = &p.cfg;
    let mut x = tape.reshape(img, &[1, cfg.height, cfg.width])?;
    for (i, &out_ch) in cfg.enc_channels.iter().enumerate() {
        x = tape.space_to_depth(x, 2)?;
        x = position_affine(tape, x, tp.enc_w[i], tp.enc_b[i], out_ch)?;
        x = tape.silu(x);
    }
    let last = *cfg.enc_channels.last().unwrap();
    let g = cfg.grid_tokens();
    let flat = tape.reshape(x, &[last, g])?;
    let pos = tape.transpose(flat)?;
    Ok(tape.linear(pos, tp.enc_proj_w, Some(tp.enc_proj_b))?)
}

/// Decoder graph: latents `[G, code_dim]` to image `[H, W]` (no clamp;
/// inference clamps separately so training gradients stay alive).
fn decode_on_tape(tape: &mut Tape<f32>, tp: &TapeParams, p: &TokenizerParams, z: Var) -> Result<Var> {
    let cfg = &p.cfg;
    let last = *cfg.enc_channels.last().unwrap();
    let (gh, gw) = (cfg.height / cfg.factor, cfg.width / cfg.factor);
    let mut x = tape.linear(z, tp.dec_proj_w, Some(tp.dec_proj_b))?;
    x = tape.silu(x);
    let t = tape.transpose(x)?;
    x = tape.reshape(t, &[last, gh, gw])?;
    let stages = cfg.enc_channels.len();
    for s in 0..stages {
        let out_ch = if s + 1 == stages {
            1
        } else {
            cfg.enc_channels[stages - 2 - s]
        };
        x = position_affine(tape, x, tp.dec_w[s], tp.dec_bs[s], out_ch * 4)?;
        if s + 1 != stages {
            x = tape.silu(x);
        }
        x = tape.depth_to_space(x, 2)?;
    }
    Ok(tape.reshape(x, &[cfg.height, cfg.width])?)
}

/// Nearest codebook row per latent by squared distance; ties go to the
/// lowest id.
pub fn quantize(latents: &Tensor<f32>, codebook: &Tensor<f32>) -> Result<Vec<usize>> {
    let (g, d) = latents.dims2().map_err(TokenizerError::Num)?;
    let (k, dk) = codebook.dims2().map_err(TokenizerError::Num)?;
    if d != dk {
        return Err(TokenizerError::Shape {
            expected: format!("code dim {d}"),
            got: format!("{dk}"),
        });
    }
    let ld = latents.data();
    let cd = codebook.data();
    let mut ids = Vec::with_capacity(g);
    for i in 0..g {
        let row = &ld[i * d..(i + 1) * d];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let crow = &cd[c * d..(c + 1) * d];
            let mut dist = 0f64;
            for j in 0..d {
                let diff = (row[j] - crow[j]) as f64;
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        ids.push(best);
    }
    Ok(ids)
}

fn check_image(cfg: &TokenizerConfig, img: &Tensor<f32>) -> Result<()> {
    if img.shape() != [cfg.height, cfg.width] {
        return Err(TokenizerError::Shape {
            expected: format!("image [{}, {}]", cfg.height, cfg.width),
            got: format!("{:?}", img.shape()),
        });
    }
    Ok(())
}

/// Image to code ids.
pub fn encode(params: &TokenizerParams, img: &Tensor<f32>) -> Result<Vec<usize>> {
    check_image(&params.cfg, img)?;
    let mut tape = Tape::new();
    let tp = leaves(&mut tape, params);
    let x = tape.leaf(img.clone());
    let z = encode_on_tape(&mut tape, &tp, params, x)?;
    quantize(tape.value(z), &params.codebook)
}

/// Code ids to image, clamped to [0,1].
pub fn decode(params: &TokenizerParams, ids: &[usize]) -> Result<Tensor<f32>> {
    let g = params.cfg.grid_tokens();
    if ids.len() != g {
        return Err(TokenizerError::Shape {
            expected: format!("{g} ids"),
            got: format!("{}", ids.len()),
        });
    }
    let zq = kernels::gather_rows(&params.codebook, ids)?;
    let mut tape = Tape::new();
    let tp = leaves(&mut tape, params);
    let z = tape.leaf(zq);
    let img = decode_on_tape(&mut tape, &tp, params, z)?;
    Ok(tape.value(img).map(|v| v.clamp(0.0, 1.0)))
}

pub fn reconstruct(params: &TokenizerParams, img: &Tensor<f32>) -> Result<Tensor<f32>> {
    decode(params, &encode(params, img)?)
}

/// Mean reconstruction MSE over a set of images.
pub fn reconstruction_mse(params: &TokenizerParams, images: &[Tensor<f32>]) -> Result<f64> {
    let mut total = 0.0;
    for img in images {
        let rec = reconstruct(params, img)?;
        let mut acc = 0.0;
        for (a, b) in rec.data().iter().zip(img.data()) {
            acc += (*a as f64 - *b as f64).powi(2);
        }
        total += acc / img.numel() as f64;
    }
    Ok(total / images.len().max(1) as f64)
}

/// Fraction of codebook rows used at least once across `images`.
pub fn codebook_usage(params: &TokenizerParams, images: &[Tensor<f32>]) -> Result<f64> {
    let mut used = vec![false; params.cfg.codebook_size];
    for img in images {
        for id in encode(params, img)? {
            used[id] = true;
        }
    }
    Ok(used.iter().filter(|&&u| u).count() as f64 / params.cfg.codebook_size as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOpts {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Every this many steps, codes unused since the last check are
    /// re-seeded from current encoder outputs.
    pub reinit_every: usize,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            steps: 2500,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            reinit_every: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub reinit_events: usize,
}

/// One optimizer step over a minibatch. Loss per image:
/// `mse(decode(st(z)), x) + mse(codebook[ids], sg z) + beta·mse(z, sg codebook[ids])`
/// where `st` is the straight-through estimator and `sg` stops gradients.
fn train_step(
    params: &mut TokenizerParams,
    opt: &mut crate::numcore::optim::Adam<f32>,
    batch: &[&Tensor<f32>],
    usage: &mut [u64],
) -> Result<f64> {
    let mut tape = Tape::new();
    let tp = leaves(&mut tape, params);
    let beta = params.cfg.beta as f32;
    let mut total: Option<Var> = None;
    for img in batch {
        let x = tape.leaf((*img).clone());
        let z_e = encode_on_tape(&mut tape, &tp, params, x)?;
        let ze_val = tape.value(z_e).clone();
        let ids = quantize(&ze_val, tape.value(tp.codebook))?;
        for &id in &ids {
            usage[id] += 1;
        }
        let zq = tape.gather_rows(tp.codebook, &ids)?;
        let zq_val = tape.value(zq).clone();
        let st = tape.passthrough(z_e, zq_val.clone())?;
        let xhat = decode_on_tape(&mut tape, &tp, params, st)?;
        let recon = tape.mse_const(xhat, img)?;
        let cb_loss = tape.mse_const(zq, &ze_val)?;
        let commit = tape.mse_const(z_e, &zq_val)?;
        let commit_s = tape.scale(commit, beta);
        let li = tape.add(recon, cb_loss)?;
        let li = tape.add(li, commit_s)?;
        total = Some(match total {
            None => li,
            Some(acc) => tape.add(acc, li)?,
        });
    }
    let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f32);
    let loss_val = tape.value(loss).item() as f64;
    let mut grads = tape.backward(loss)?;
    let vars = leaf_vars(&tp);
    let mut grad_list: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| grads.take(v)).collect();
    let mut refs = params.param_refs();
    opt.step(&mut refs, &mut grad_list)?;
    Ok(loss_val)
}

/// Replace codes with zero usage by random encoder outputs from `pool`.
fn reinit_dead_codes(
    params: &mut TokenizerParams,
    usage: &[u64],
    pool: &Tensor<f32>,
    rng: &mut ChaCha8Rng,
) -> usize {
    let (rows, d) = pool.dims2().expect("pool is 2D");
    if rows == 0 {
        return 0;
    }
    let mut replaced = 0;
    for (k, &count) in usage.iter().enumerate() {
        if count == 0 {
            let r = rng.gen_range(0..rows);
            let src = pool.data()[r * d..(r + 1) * d].to_vec();
            params.codebook.data_mut()[k * d..(k + 1) * d].copy_from_slice(&src);
            replaced += 1;
        }
    }
    replaced
}

/// Train in place; deterministic for a fixed seed and image list.
pub fn train(
    params: &mut TokenizerParams,
    images: &[Tensor<f32>],
    opts: &TrainOpts,
) -> Result<TrainReport> {
    if images.is_empty() {
        return Err(TokenizerError::Config("no training images".into()));
    }
    for img in images {
        check_image(&params.cfg, img)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = crate::numcore::optim::Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = images.len(); // force initial shuffle
    let mut usage = vec![0u64; params.cfg.codebook_size];
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut reinit_events = 0usize;
    for step in 0..opts.steps {
        let mut batch: Vec<&Tensor<f32>> = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&images[order[cursor]]);
            cursor += 1;
        }
        let loss = train_step(params, &mut opt, &batch, &mut usage)?;
        if step == 0 {
            first_loss = loss;
        }
        final_loss = loss;
        if opts.reinit_every > 0 && (step + 1) % opts.reinit_every == 0 {
            // Pool: encoder outputs for the last batch, after the update.
            let mut pool_rows: Vec<f32> = Vec::new();
            let mut pool_n = 0usize;
            for img in &batch {
                let mut tape = Tape::new();
                let tp = leaves(&mut tape, params);
                let x = tape.leaf((*img).clone());
                let z = encode_on_tape(&mut tape, &tp, params, x)?;
                pool_rows.extend_from_slice(tape.value(z).data());
                pool_n += tape.value(z).shape()[0];
            }
            let pool = Tensor::new(&[pool_n, params.cfg.code_dim], pool_rows)?;
            let replaced = reinit_dead_codes(params, &usage, &pool, &mut rng);
            if replaced > 0 {
                reinit_events += 1;
            }
            usage.iter_mut().for_each(|u| *u = 0);
        }
    }
    Ok(TrainReport {
        steps: opts.steps,
        first_loss,
        final_loss,
        reinit_events,
    })
}
