//! Causal decoder-only transformer over visual token sequences.
//!
//! Pre-norm blocks: RMS norm → rotary multi-head attention → residual,
//! RMS norm → gated SiLU MLP → residual, with a final norm and an output
//! head tied to the token embedding. Training runs on the autodiff tape;
//! inference uses the same kernels directly, so full-context logits and
//! the KV-cache decoder agree bit for bit.

use crate::numcore::optim::Adam;
use crate::numcore::{kernels, AttentionSpec, Real, Tape, Tensor, Var};
use crate::store::Checkpoint;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary {vocab}")]
    BadToken { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds context {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("checkpoint missing tensor `{0}`")]
    MissingTensor(String),
    #[error("expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error(transparent)]
    Num(#[from] crate::numcore::NumError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Reserved ids appended after the visual codebook: the vocabulary is
/// `codebook_size` code tokens followed by these four specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bos: usize,
    pub sep_phase: usize,
    pub sep_stream: usize,
    pub pad: usize,
}

impl SpecialTokens {
    pub fn for_codebook(codebook_size: usize) -> Self {
        SpecialTokens {
            bos: codebook_size,
            sep_phase: codebook_size + 1,
            sep_stream: codebook_size + 2,
            pad: codebook_size + 3,
        }
    }

    pub fn vocab_size(codebook_size: usize) -> usize {
        codebook_size + 4
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LMConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    /// MLP hidden width as a multiple of `model_dim`.
    pub expansion: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub rms_eps: f64,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig {
            num_layers: 4,
            num_heads: 4,
            model_dim: 128,
            expansion: 4,
            context_len: 2048,
            vocab_size: SpecialTokens::vocab_size(256),
            rope_base: 10000.0,
            rms_eps: 1e-5,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 {
            return Err(ModelError::Config(format!(
                "layers/heads/dim must be positive, got {}/{}/{}",
                self.num_layers, self.num_heads, self.model_dim
            )));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if (self.model_dim / self.num_heads) % 2 != 0 {
            return Err(ModelError::Config(format!(
                "head dim {} must be even for rotary pairs",
                self.model_dim / self.num_heads
            )));
        }
        if self.vocab_size < 5 {
            return Err(ModelError::Config(format!(
                "vocab_size {} too small for code tokens plus specials",
                self.vocab_size
            )));
        }
        if self.context_len == 0 || self.expansion == 0 {
            return Err(ModelError::Config("context_len and expansion must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        self.model_dim * self.expansion
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams<R: Real> {
    pub norm1: Tensor<R>,
    pub wq: Tensor<R>,
    pub wk: Tensor<R>,
    pub wv: Tensor<R>,
    pub wo: Tensor<R>,
    pub norm2: Tensor<R>,
    pub w_gate: Tensor<R>,
    pub w_up: Tensor<R>,
    pub w_down: Tensor<R>,
}

#[derive(Debug, Clone)]
pub struct LMParams<R: Real> {
    pub cfg: LMConfig,
    /// `[vocab, dim]`; also the tied output head.
    pub embedding: Tensor<R>,
    pub layers: Vec<LayerParams<R>>,
    pub final_norm: Tensor<R>,
}

impl<R: Real> LMParams<R> {
    pub fn init(cfg: LMConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 0.02).unwrap();
        let mut mat = |shape: &[usize]| -> Tensor<R> {
            let data = (0..shape.iter().product::<usize>())
                .map(|_| R::from_f64(dist.sample(&mut rng)))
                .collect();
            Tensor::new(shape, data).expect("shape/data")
        };
        let d = cfg.model_dim;
        let e = cfg.mlp_dim();
        let embedding = mat(&[cfg.vocab_size, d]);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                norm1: Tensor::filled(&[d], R::one()),
                wq: mat(&[d, d]),
                wk: mat(&[d, d]),
                wv: mat(&[d, d]),
                wo: mat(&[d, d]),
                norm2: Tensor::filled(&[d], R::one()),
                w_gate: mat(&[d, e]),
                w_up: mat(&[d, e]),
                w_down: mat(&[e, d]),
            })
            .collect();
        Ok(LMParams {
            cfg,
            embedding,
            layers,
            final_norm: Tensor::filled(&[d], R::one()),
        })
    }

    /// Stable parameter order shared by optimizer state and checkpoints.
    pub fn param_refs(&mut self) -> Vec<&mut Tensor<R>> {
        let mut refs: Vec<&mut Tensor<R>> = vec![&mut self.embedding];
        for layer in &mut self.layers {
            refs.push(&mut layer.norm1);
            refs.push(&mut layer.wq);
            refs.push(&mut layer.wk);
            refs.push(&mut layer.wv);
            refs.push(&mut layer.wo);
            refs.push(&mut layer.norm2);
            refs.push(&mut layer.w_gate);
            refs.push(&mut layer.w_up);
            refs.push(&mut layer.w_down);
        }
        refs.push(&mut self.final_norm);
        refs
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = self.embedding.numel() + self.final_norm.numel();
        for l in &self.layers {
            n += l.norm1.numel()
                + l.wq.numel()
                + l.wk.numel()
                + l.wv.numel()
                + l.wo.numel()
                + l.norm2.numel()
                + l.w_gate.numel()
                + l.w_up.numel()
                + l.w_down.numel();
        }
        n
    }
}

impl LMParams<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("embedding", self.embedding.clone());
        for (i, l) in self.layers.iter().enumerate() {
            ckpt.insert(&format!("layer.{i}.norm1"), l.norm1.clone());
            ckpt.insert(&format!("layer.{i}.wq"), l.wq.clone());
            ckpt.insert(&format!("layer.{i}.wk"), l.wk.clone());
            ckpt.insert(&format!("layer.{i}.wv"), l.wv.clone());
            ckpt.insert(&format!("layer.{i}.wo"), l.wo.clone());
            ckpt.insert(&format!("layer.{i}.norm2"), l.norm2.clone());
            ckpt.insert(&format!("layer.{i}.w_gate"), l.w_gate.clone());
            ckpt.insert(&format!("layer.{i}.w_up"), l.w_up.clone());
            ckpt.insert(&format!("layer.{i}.w_down"), l.w_down.clone());
        }
        ckpt.insert("final_norm", self.final_norm.clone());
        ckpt
    }

    pub fn from_checkpoint(cfg: LMConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut params = LMParams::<f32>::init(cfg, 0)?;
        {
            let load = |name: String, into: &mut Tensor<f32>| -> Result<()> {
                let t = ckpt
                    .get(&name)
                    .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
                if t.shape() != into.shape() {
                    return Err(ModelError::Shape {
                        expected: format!("{name}: {:?}", into.shape()),
                        got: format!("{:?}", t.shape()),
                    });
                }
                *into = t.clone();
                Ok(())
            };
            load("embedding".into(), &mut params.embedding)?;
            for i in 0..params.layers.len() {
                let l = &mut params.layers[i];
                load(format!("layer.{i}.norm1"), &mut l.norm1)?;
                load(format!("layer.{i}.wq"), &mut l.wq)?;
                load(format!("layer.{i}.wk"), &mut l.wk)?;
                load(format!("layer.{i}.wv"), &mut l.wv)?;
                load(format!("layer.{i}.wo"), &mut l.wo)?;
                load(format!("layer.{i}.norm2"), &mut l.norm2)?;
                load(format!("layer.{i}.w_gate"), &mut l.w_gate)?;
                load(format!("layer.{i}.w_up"), &mut l.w_up)?;
                load(format!("layer.{i}.w_down"), &mut l.w_down)?;
            }
            load("final_norm".into(), &mut params.final_norm)?;
        }
        Ok(params)
    }
}

fn check_ids(cfg: &LMConfig, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(ModelError::Config("empty token sequence".into()));
    }
    if ids.len() > cfg.context_len {
        return Err(ModelError::ContextOverflow {
            len: ids.len(),
            context: cfg.context_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::BadToken {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Tape handles for every parameter, in [`LMParams::param_refs`] order.
pub struct TapeLM {
    pub embedding: Var,
    pub layers: Vec<[Var; 9]>,
    pub final_norm: Var,
}

pub fn lm_leaves<R: Real>(tape: &mut Tape<R>, p: &LMParams<R>) -> TapeLM {
    TapeLM {
        embedding: tape.leaf(p.embedding.clone()),
        layers: p
            .layers
            .iter()
            .map(|l| {
                [
                    tape.leaf(l.norm1.clone()),
                    tape.leaf(l.wq.clone()),
                    tape.leaf(l.wk.clone()),
                    tape.leaf(l.wv.clone()),
                    tape.leaf(l.wo.clone()),
                    tape.leaf(l.norm2.clone()),
                    tape.leaf(l.w_gate.clone()),
                    tape.leaf(l.w_up.clone()),
                    tape.leaf(l.w_down.clone()),
                ]
            })
            .collect(),
        final_norm: tape.leaf(p.final_norm.clone()),
    }
}

impl TapeLM {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.embedding];
        for l in &self.layers {
            v.extend_from_slice(l);
        }
        v.push(self.final_norm);
        v
    }
}

/// Differentiable forward pass: `[S]` token ids to `[S, vocab]` logits at
/// positions `0..S`.
pub fn forward_logits<R: Real>(
    tape: &mut Tape<R>,
    tp: &TapeLM,
    cfg: &LMConfig,
    ids: &[usize],
) -> Result<Var> {
    check_ids(cfg, ids)?;
    let eps = R::from_f64(cfg.rms_eps);
    let spec = AttentionSpec {
        heads: cfg.num_heads,
        rope_base: cfg.rope_base,
    };
    let positions: Vec<usize> = (0..ids.len()).collect();
    let mut x = tape.gather_rows(tp.embedding, ids)?;
    for l in &tp.layers {
        let [norm1, wq, wk, wv, wo, norm2, w_gate, w_up, w_down] = *l;
        let h = tape.rms_norm(x, norm1, eps)?;
        let q = tape.linear(h, wq, None)?;
        let k = tape.linear(h, wk, None)?;
        let v = tape.linear(h, wv, None)?;
        let a = tape.attention(q, k, v, &spec, &positions)?;
        let o = tape.linear(a, wo, None)?;
        x = tape.add(x, o)?;
        let h2 = tape.rms_norm(x, norm2, eps)?;
        let gate = tape.linear(h2, w_gate, None)?;
        let up = tape.linear(h2, w_up, None)?;
        let act = tape.silu(gate);
        let m = tape.mul(act, up)?;
        let down = tape.linear(m, w_down, None)?;
        x = tape.add(x, down)?;
    }
    let hf = tape.rms_norm(x, tp.final_norm, eps)?;
    Ok(tape.matmul_bt(hf, tp.embedding)?)
}

/// Inference forward pass with the same kernels and evaluation order as
/// [`forward_logits`], without tape bookkeeping.
pub fn infer_logits<R: Real>(params: &LMParams<R>, ids: &[usize]) -> Result<Tensor<R>> {
    let cfg = &params.cfg;
    check_ids(cfg, ids)?;
    let eps = R::from_f64(cfg.rms_eps);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let add = |a: &Tensor<R>, b: &Tensor<R>| a.zip_map(b, |x, y| x + y);
    let mut x = kernels::gather_rows(&params.embedding, ids)?;
    for l in &params.layers {
        let (h, _) = kernels::rms_norm_fwd(&x, &l.norm1, eps)?;
        let q = kernels::matmul(&h, &l.wq)?;
        let k = kernels::matmul(&h, &l.wk)?;
        let v = kernels::matmul(&h, &l.wv)?;
        let (a, _) =
            kernels::attention_fwd(&q, &k, &v, cfg.num_heads, &positions, cfg.rope_base)?;
        let o = kernels::matmul(&a, &l.wo)?;
        x = add(&x, &o)?;
        let (h2, _) = kernels::rms_norm_fwd(&x, &l.norm2, eps)?;
        let gate = kernels::matmul(&h2, &l.w_gate)?;
        let up = kernels::matmul(&h2, &l.w_up)?;
        let act = gate.map(kernels::silu);
        let m = act.zip_map(&up, |x, y| x * y)?;
        let down = kernels::matmul(&m, &l.w_down)?;
        x = add(&x, &down)?;
    }
    let (hf, _) = kernels::rms_norm_fwd(&x, &params.final_norm, eps)?;
    Ok(kernels::matmul_a_bt(&hf, &params.embedding)?)
}

/// Incremental decoder with per-layer KV caches (keys stored pre-rotated).
/// Produces logits bit-identical to [`infer_logits`] at each position.
pub struct KvDecoder<'a, R: Real> {
    params: &'a LMParams<R>,
    pos: usize,
    k_cache: Vec<Vec<R>>,
    v_cache: Vec<Vec<R>>,
}

impl<'a, R: Real> KvDecoder<'a, R> {
    pub fn new(params: &'a LMParams<R>) -> Self {
        KvDecoder {
            params,
            pos: 0,
            k_cache: vec![Vec::new(); params.cfg.num_layers],
            v_cache: vec![Vec::new(); params.cfg.num_layers],
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feed one token; returns the logits row for the next token.
    pub fn step(&mut self, token: usize) -> Result<Vec<R>> {
        let cfg = &self.params.cfg;
        check_ids(cfg, &[token])?;
        if self.pos >= cfg.context_len {
            return Err(ModelError::ContextOverflow {
                len: self.pos + 1,
                context: cfg.context_len,
            });
        }
        let d = cfg.model_dim;
        let eps = R::from_f64(cfg.rms_eps);
        let mut x = Tensor::new(
            &[1, d],
            self.params.embedding.data()[token * d..(token + 1) * d].to_vec(),
        )?;
        for (li, l) in self.params.layers.iter().enumerate() {
            let (h, _) = kernels::rms_norm_fwd(&x, &l.norm1, eps)?;
            let mut q = kernels::matmul(&h, &l.wq)?;
            let mut k = kernels::matmul(&h, &l.wk)?;
            let v = kernels::matmul(&h, &l.wv)?;
            let dh = d / cfg.num_heads;
            for hd in 0..cfg.num_heads {
                kernels::rope_rotate_head(
                    &mut k.data_mut()[hd * dh..(hd + 1) * dh],
                    self.pos,
                    cfg.rope_base,
                    false,
                );
            }
            self.k_cache[li].extend_from_slice(k.data());
            self.v_cache[li].extend_from_slice(v.data());
            let mut out_row = vec![R::zero(); d];
            kernels::attention_step(
                q.data_mut(),
                &self.k_cache[li],
                &self.v_cache[li],
                cfg.num_heads,
                d,
                self.pos,
                cfg.rope_base,
                &mut out_row,
            );
            let a = Tensor::new(&[1, d], out_row)?;
            let o = kernels::matmul(&a, &l.wo)?;
            x = x.zip_map(&o, |p, q| p + q)?;
            let (h2, _) = kernels::rms_norm_fwd(&x, &l.norm2, eps)?;
            let gate = kernels::matmul(&h2, &l.w_gate)?;
            let up = kernels::matmul(&h2, &l.w_up)?;
            let act = gate.map(kernels::silu);
            let m = act.zip_map(&up, |p, q| p * q)?;
            let down = kernels::matmul(&m, &l.w_down)?;
            x = x.zip_map(&down, |p, q| p + q)?;
        }
        let (hf, _) = kernels::rms_norm_fwd(&x, &self.params.final_norm, eps)?;
        let logits = kernels::matmul_a_bt(&hf, &self.params.embedding)?;
        self.pos += 1;
        Ok(logits.into_data())
    }
}

/// Token selection. Greedy picks the highest logit, lowest id on ties;
/// `TopK` softmax-samples among the k best at the given temperature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Sampler {
    Greedy,
    TopK { k: usize, temperature: f64, seed: u64 },
}

pub struct SamplerState {
    sampler: Sampler,
    rng: Option<ChaCha8Rng>,
}

impl SamplerState {
    pub fn new(sampler: Sampler) -> Self {
        let rng = match &sampler {
            Sampler::Greedy => None,
            Sampler::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        };
        SamplerState { sampler, rng }
    }

    pub fn pick<R: Real>(&mut self, logits: &[R]) -> usize {
        match (&self.sampler, &mut self.rng) {
            (Sampler::Greedy, _) => argmax(logits),
            (Sampler::TopK { k, temperature, .. }, Some(rng)) => {
                top_k_sample(logits, (*k).max(1), *temperature, rng)
            }
            _ => unreachable!("TopK state always carries an rng"),
        }
    }
}

/// Strict-greater scan, so equal logits resolve to the lowest id.
pub fn argmax<R: Real>(logits: &[R]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn top_k_sample<R: Real>(logits: &[R], k: usize, temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature <= 0.0 {
        return argmax(logits);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Descending by logit; lowest id first among equals.
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k.min(logits.len()));
    let max = logits[order[0]].to_f64();
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i].to_f64() - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (w, &i) in weights.iter().zip(&order) {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    *order.last().unwrap()
}

/// Append `max_new` tokens to `prompt` with a KV-cache decoder.
pub fn generate<R: Real>(
    params: &LMParams<R>,
    prompt: &[usize],
    max_new: usize,
    sampler: &mut SamplerState,
) -> Result<Vec<usize>> {
    check_ids(&params.cfg, prompt)?;
    let mut decoder = KvDecoder::new(params);
    let mut out = prompt.to_vec();
    let mut logits = Vec::new();
    for &t in prompt {
        logits = decoder.step(t)?;
    }
    for _ in 0..max_new {
        let next = sampler.pick(&logits);
        out.push(next);
        if out.len() == params.cfg.context_len {
            break;
        }
        logits = decoder.step(next)?;
    }
    Ok(out)
}

/// One Adam step over `(input, target)` sequences. Targets equal to
/// `ignore_id` are masked out of the mean cross entropy; the batch loss
/// is the mean of per-sequence losses. Returns (loss, grad norm).
pub fn lm_train_step<R: Real>(
    params: &mut LMParams<R>,
    opt: &mut Adam<R>,
    batch: &[(&[usize], &[usize])],
    ignore_id: usize,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(ModelError::Config("empty batch".into()));
    }
    let mut tape = Tape::new();
    let tp = lm_leaves(&mut tape, params);
    let mut total: Option<Var> = None;
    for (ids, targets) in batch {
        if ids.len() != targets.len() {
            return Err(ModelError::Shape {
                expected: format!("targets of length {}", ids.len()),
                got: format!("{}", targets.len()),
            });
        }
        let logits = forward_logits(&mut tape, &tp, &params.cfg, ids)?;
        let loss = tape.cross_entropy(logits, targets, ignore_id)?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    let loss = tape.scale(total.unwrap(), R::from_f64(1.0 / batch.len() as f64));
    let loss_val = tape.value(loss).item().to_f64();
    let mut grads = tape.backward(loss)?;
    let vars = tp.vars();
    let mut grad_list: Vec<Option<Tensor<R>>> = vars.iter().map(|&v| grads.take(v)).collect();
    let mut refs = params.param_refs();
    let norm = opt.step(&mut refs, &mut grad_list)?;
    Ok((loss_val, norm))
}
