//! Pixel-space denoising diffusion with classifier-free guidance.
//!
//! The denoiser cuts the image into p×p patches, embeds them as tokens on a
//! G×G grid, runs 3×3 convolution blocks on that grid around a single
//! cross-attention block that reads the conditioned caption embedding, and
//! projects back to patches. Time enters as a learned table indexed by step.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use nesyaug_core::caption::{freeform_caption, CaptionMapping, TokenSeq};
use nesyaug_core::manifest::GeneratorId;
use nesyaug_core::mask::NEG_INF;
use nesyaug_core::world::scene_rng;
use nesyaug_core::{SceneGraph, Vocab};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioner::{Conditioner, ConditionerConfig, ConditionerDims};
use crate::nn::{attention, conv3x3, layer_norm, sinusoidal, tensor_from, Init, Linear};
use crate::params::{CheckpointMeta, ParamStore};
use crate::text::{TextEncoder, TextVocab};
use crate::{ModelError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub t_max: usize,
    /// betas[t-1] is beta_t.
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(t_max: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if t_max < 2 || !(0.0 < beta_1 && beta_1 < beta_t && beta_t < 1.0) {
            return Err(ModelError::Config(format!(
                "need T >= 2 and 0 < beta_1 < beta_T < 1, got T={t_max}, {beta_1}..{beta_t}"
            )));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (t_max - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            t_max,
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// The 1e-4 → 2e-2 schedule defined for 1000 steps, rescaled by 1000/T
    /// so the chain still ends near pure noise.
    pub fn scaled_linear(t_max: usize) -> Result<Self> {
        let scale = 1000.0 / t_max as f64;
        Self::linear(t_max, 1e-4 * scale, 2e-2 * scale)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(ModelError::StepOutOfRange { t, t_max: self.t_max });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// alpha_bar_t for t in 1..=T; alpha_bar_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `steps` timesteps, uniformly strided, descending from T.
    pub fn sampling_steps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.t_max {
            return Err(ModelError::Config(format!("sampling steps must be in 1..={}", self.t_max)));
        }
        Ok((1..=steps)
            .rev()
            .map(|i| ((i * self.t_max) as f64 / steps as f64).round() as usize)
            .collect())
    }
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Batched form with one step per leading index.
pub fn q_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    let b = x0.dim(0)?;
    if ts.len() != b {
        return Err(ModelError::Shape(format!("{} steps for batch of {b}", ts.len())));
    }
    for &t in ts {
        sched.check_step(t)?;
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, x0.rank() - 1));
    let a = tensor_from(ts.iter().map(|&t| sched.alpha_bar(t).sqrt()).collect(), &shape, x0.dtype())?;
    let s = tensor_from(ts.iter().map(|&t| (1.0 - sched.alpha_bar(t)).sqrt()).collect(), &shape, x0.dtype())?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// Anything that predicts the added noise.
pub trait EpsModel {
    fn predict_eps(&self, x_t: &Tensor, ts: &[usize], cond: &Tensor, cond_bias: &Tensor) -> Result<Tensor>;
}

/// Standard-normal tensor drawn from our own RNG.
pub fn randn(shape: &[usize], dtype: DType, rng: &mut impl Rng) -> Result<Tensor> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    tensor_from(data, shape, dtype)
}

/// Noise-prediction MSE at uniformly sampled steps.
pub fn ldm_loss<M: EpsModel>(
    model: &M,
    sched: &DiffusionSchedule,
    x0: &Tensor,
    cond: &Tensor,
    cond_bias: &Tensor,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let b = x0.dim(0)?;
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.t_max)).collect();
    let eps = randn(x0.dims(), x0.dtype(), rng)?;
    let x_t = q_sample_batch(x0, &ts, &eps, sched)?;
    let pred = model.predict_eps(&x_t, &ts, cond, cond_bias)?;
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

fn guided_eps<M: EpsModel>(
    model: &M,
    x: &Tensor,
    ts: &[usize],
    cond: (&Tensor, &Tensor),
    uncond: (&Tensor, &Tensor),
    g: f64,
) -> Result<Tensor> {
    if g == 0.0 {
        return model.predict_eps(x, ts, uncond.0, uncond.1);
    }
    let c = model.predict_eps(x, ts, cond.0, cond.1)?;
    if g == 1.0 {
        return Ok(c);
    }
    let u = model.predict_eps(x, ts, uncond.0, uncond.1)?;
    Ok((&u + ((c - &u)? * g)?)?)
}

/// Strided ancestral DDPM sampling with x0 clipping to [-1, 1].
/// `rngs` holds one noise stream per batch element; `shape` excludes the batch.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_sample<M: EpsModel>(
    model: &M,
    sched: &DiffusionSchedule,
    shape: &[usize],
    steps: usize,
    guidance: f64,
    cond: (&Tensor, &Tensor),
    uncond: (&Tensor, &Tensor),
    rngs: &mut [ChaCha8Rng],
) -> Result<Tensor> {
    if !(guidance >= 0.0) {
        return Err(ModelError::Config("guidance scale must be non-negative".into()));
    }
    let steps = sched.sampling_steps(steps)?;
    let b = rngs.len();
    let dtype = cond.0.dtype();
    let mut one = vec![1];
    one.extend_from_slice(shape);
    let noise = |rngs: &mut [ChaCha8Rng]| -> Result<Tensor> {
        let parts = rngs.iter_mut().map(|r| randn(&one, dtype, r)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };
    let mut x = noise(rngs)?;
    for (i, &t) in steps.iter().enumerate() {
        let prev = steps.get(i + 1).copied().unwrap_or(0);
        // Parameters are trainable variables; detach so the graph does not
        // grow across steps.
        let eps = guided_eps(model, &x, &vec![t; b], cond, uncond, guidance)?.detach();
        let ab_t = sched.alpha_bar(t);
        let ab_s = sched.alpha_bar(prev);
        let x0 = ((&x - (eps * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?.clamp(-1.0, 1.0)?;
        if prev == 0 {
            return Ok(x0);
        }
        let a_ts = ab_t / ab_s;
        let beta_ts = 1.0 - a_ts;
        let c0 = ab_s.sqrt() * beta_ts / (1.0 - ab_t);
        let c1 = a_ts.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
        let sigma = ((1.0 - ab_s) / (1.0 - ab_t) * beta_ts).sqrt();
        x = (((x0 * c0)? + (&x * c1)?)? + (noise(rngs)? * sigma)?)?.detach();
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
    pub cond_dim: usize,
    /// Convolution blocks before and after the cross-attention block.
    pub blocks: usize,
    pub t_max: usize,
    pub zero_init_out: bool,
}

impl DenoiserConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 || self.channels == 0 {
            return Err(ModelError::Config(format!(
                "image size {} not divisible into {}-pixel patches",
                self.image_size, self.patch
            )));
        }
        // Narrower tokens cannot carry a whole patch of noise, which caps
        // how well the model can predict it.
        if self.channels < 3 * self.patch * self.patch {
            return Err(ModelError::Config(format!(
                "{} channels cannot represent {}-value patches",
                self.channels,
                3 * self.patch * self.patch
            )));
        }
        Ok(())
    }
}

struct ConvBlock {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl ConvBlock {
    fn new(ps: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            w1: ps.fan_in(&format!("{name}.conv1.weight"), &[9 * c, c], 9 * c, rng)?,
            b1: ps.zeros(&format!("{name}.conv1.bias"), &[c])?,
            w2: ps.fan_in(&format!("{name}.conv2.weight"), &[9 * c, c], 9 * c, rng)?,
            b2: ps.zeros(&format!("{name}.conv2.bias"), &[c])?,
        })
    }

    /// h: (B, L, C) tokens on a g×g grid; temb: (B, 1, C).
    fn forward(&self, h: &Tensor, temb: &Tensor, g: usize) -> Result<Tensor> {
        let x = layer_norm(h)?.broadcast_add(temb)?.silu()?;
        let x = conv3x3(&x, g, &self.w1, &self.b1)?.silu()?;
        let x = conv3x3(&x, g, &self.w2, &self.b2)?;
        Ok((h + x)?)
    }
}

pub struct Denoiser {
    cfg: DenoiserConfig,
    patch_in: Linear,
    pos: Tensor,
    /// Fixed sinusoidal table (T × C) fed through a two-layer MLP.
    time: Tensor,
    time1: Linear,
    time2: Linear,
    before: Vec<ConvBlock>,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    after: Vec<ConvBlock>,
    out: Linear,
}

impl Denoiser {
    pub fn new(ps: &mut ParamStore, cfg: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, p, g) = (cfg.channels, cfg.patch, cfg.grid());
        let patch_dim = 3 * p * p;
        let patch_in = Linear::new(ps, "den.patch_in", patch_dim, c, true, Init::FanIn, rng)?;
        let pos = ps.normal("den.pos", &[g * g, c], 0.02, rng)?;
        let time = sinusoidal(cfg.t_max, c, ps.dtype())?;
        let time1 = Linear::new(ps, "den.time1", c, c, true, Init::FanIn, rng)?;
        let time2 = Linear::new(ps, "den.time2", c, c, true, Init::FanIn, rng)?;
        let before = (0..cfg.blocks)
            .map(|i| ConvBlock::new(ps, &format!("den.before{i}"), c, rng))
            .collect::<Result<_>>()?;
        let q = Linear::new(ps, "den.attn.q", c, c, false, Init::FanIn, rng)?;
        let k = Linear::new(ps, "den.attn.k", cfg.cond_dim, c, false, Init::FanIn, rng)?;
        let v = Linear::new(ps, "den.attn.v", cfg.cond_dim, c, false, Init::FanIn, rng)?;
        let o = Linear::new(ps, "den.attn.o", c, c, true, Init::FanIn, rng)?;
        let after = (0..cfg.blocks)
            .map(|i| ConvBlock::new(ps, &format!("den.after{i}"), c, rng))
            .collect::<Result<_>>()?;
        let out_init = if cfg.zero_init_out { Init::Zeros } else { Init::FanIn };
        let out = Linear::new(ps, "den.out", c, patch_dim, true, out_init, rng)?;
        Ok(Self {
            cfg,
            patch_in,
            pos,
            time,
            time1,
            time2,
            before,
            q,
            k,
            v,
            o,
            after,
            out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, _, _) = x.dims4()?;
        let (p, g) = (self.cfg.patch, self.cfg.grid());
        // (B,3,G,p,G,p) -> (B,G,G,3,p,p)
        Ok(x.reshape((b, 3, g, p, g, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, g * g, 3 * p * p))?)
    }

    fn unpatchify(&self, t: &Tensor) -> Result<Tensor> {
        let b = t.dim(0)?;
        let (p, g) = (self.cfg.patch, self.cfg.grid());
        Ok(t.reshape((b, g, g, 3, p, p))?
            .permute((0, 3, 1, 4, 2, 5))?
            .contiguous()?
            .reshape((b, 3, g * p, g * p))?)
    }
}

impl EpsModel for Denoiser {
    /// x_t: (B, 3, H, W); cond: (B, N, D); cond_bias: (B, 1, N) additive.
    fn predict_eps(&self, x_t: &Tensor, ts: &[usize], cond: &Tensor, cond_bias: &Tensor) -> Result<Tensor> {
        let (b, ch, hgt, wid) = x_t.dims4()?;
        if ch != 3 || hgt != self.cfg.image_size || wid != self.cfg.image_size {
            return Err(ModelError::Shape(format!(
                "expected (B, 3, {0}, {0}) images, got {1:?}",
                self.cfg.image_size,
                x_t.dims()
            )));
        }
        if ts.len() != b {
            return Err(ModelError::Shape(format!("{} steps for batch of {b}", ts.len())));
        }
        let g = self.cfg.grid();
        let idx = Tensor::from_vec(
            ts.iter()
                .map(|&t| {
                    if t == 0 || t > self.cfg.t_max {
                        Err(ModelError::StepOutOfRange { t, t_max: self.cfg.t_max })
                    } else {
                        Ok((t - 1) as u32)
                    }
                })
                .collect::<Result<Vec<u32>>>()?,
            b,
            x_t.device(),
        )?;
        let temb = self.time.index_select(&idx, 0)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?.unsqueeze(1)?;
        let mut h = self
            .patch_in
            .forward(&self.patchify(x_t)?)?
            .broadcast_add(&self.pos)?
            .broadcast_add(&temb)?;
        for blk in &self.before {
            h = blk.forward(&h, &temb, g)?;
        }
        let q = self.q.forward(&layer_norm(&h)?)?;
        let k = self.k.forward(cond)?;
        let v = self.v.forward(cond)?;
        let (a, _) = attention(&q, &k, &v, Some(cond_bias))?;
        h = (h + self.o.forward(&a)?)?;
        for blk in &self.after {
            h = blk.forward(&h, &temb, g)?;
        }
        let out = self.out.forward(&h)?;
        self.unpatchify(&out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub dim: usize,
    pub channels: usize,
    pub image_size: usize,
    pub patch: usize,
    pub blocks: usize,
    pub t_max: usize,
    pub p_drop: f64,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub ema_decay: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            channels: 64,
            image_size: 64,
            patch: 4,
            blocks: 1,
            t_max: 200,
            p_drop: 0.1,
            lr: 1e-3,
            batch: 8,
            seed: 0,
            ema_decay: 0.999,
        }
    }
}

/// What a generator is asked to draw.
#[derive(Debug, Clone, PartialEq)]
pub struct CondInput {
    pub graph: SceneGraph,
    pub caption: CaptionMapping,
    pub freeform: TokenSeq,
}

impl CondInput {
    pub fn new(graph: SceneGraph, caption: CaptionMapping, v: &Vocab, template_seed: u64) -> Result<Self> {
        let freeform = freeform_caption(&graph, v, template_seed)?;
        Ok(Self {
            graph,
            caption,
            freeform,
        })
    }
}

pub struct Generator {
    pub id: GeneratorId,
    pub cfg: GeneratorConfig,
    ps: ParamStore,
    vocab: Vocab,
    tvocab: TextVocab,
    text: TextEncoder,
    cond: Option<Conditioner>,
    den: Denoiser,
    null_cond: Tensor,
    sched: DiffusionSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub image_size: usize,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    pub conditions: Vec<CondInput>,
}

impl SampleRequest {
    pub fn new(conditions: Vec<CondInput>, seed: u64) -> Self {
        Self {
            image_size: 64,
            steps: 50,
            guidance: 2.0,
            seed,
            conditions,
        }
    }
}

impl Generator {
    pub fn new(id: GeneratorId, v: &Vocab, cfg: GeneratorConfig) -> Result<Self> {
        Self::with_options(id, v, cfg, DType::F32, true)
    }

    /// `zero_init` controls the zero-initialised output and value projections;
    /// gradient checks turn it off so that every parameter receives gradient.
    pub fn with_options(id: GeneratorId, v: &Vocab, cfg: GeneratorConfig, dtype: DType, zero_init: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.p_drop) || cfg.batch == 0 || !(0.0..1.0).contains(&cfg.ema_decay) {
            return Err(ModelError::Config(
                "p_drop must be in [0, 1], ema_decay in [0, 1) and batch positive".into(),
            ));
        }
        let sched = DiffusionSchedule::scaled_linear(cfg.t_max)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamStore::new(dtype);
        let tvocab = TextVocab::from_vocab(v);
        let text = TextEncoder::new(&mut ps, tvocab.len(), cfg.dim, &mut rng)?;
        let cond = match id {
            GeneratorId::Baseline => None,
            GeneratorId::Config(_) => Some(Conditioner::with_value_init(
                &mut ps,
                ConditionerDims::new(cfg.dim, v.objects.len(), v.predicates.len()),
                zero_init,
                &mut rng,
            )?),
        };
        let den = Denoiser::new(
            &mut ps,
            DenoiserConfig {
                image_size: cfg.image_size,
                patch: cfg.patch,
                channels: cfg.channels,
                cond_dim: cfg.dim,
                blocks: cfg.blocks,
                t_max: cfg.t_max,
                zero_init_out: zero_init,
            },
            &mut rng,
        )?;
        let null_cond = ps.normal("null_cond", &[1, cfg.dim], 1.0, &mut rng)?;
        Ok(Self {
            id,
            cfg,
            ps,
            vocab: v.clone(),
            tvocab,
            text,
            cond,
            den,
            null_cond,
            sched,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.den
    }

    pub fn conditioner(&self) -> Option<&Conditioner> {
        self.cond.as_ref()
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    /// Tokens and token-relation map the generator reads for one input.
    fn prompt<'a>(&self, c: &'a CondInput) -> (&'a TokenSeq, Option<CaptionMapping>) {
        match self.id {
            GeneratorId::Config(4) => (&c.freeform, Some(CaptionMapping::unmapped(c.freeform.clone()))),
            GeneratorId::Baseline => (&c.caption.caption, None),
            GeneratorId::Config(_) => (&c.caption.caption, Some(c.caption.clone())),
        }
    }

    /// Conditioned embeddings (B, N, D) and key-padding bias (B, 1, N).
    pub fn encode_conditions(&self, inputs: &[&CondInput]) -> Result<(Tensor, Tensor, Vec<usize>)> {
        let prompts: Vec<_> = inputs.iter().map(|c| self.prompt(c)).collect();
        let seqs: Vec<Vec<u32>> = prompts.iter().map(|(t, _)| self.tvocab.encode(&t.tokens)).collect();
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let (w, bias) = self.text.encode_batch(&seqs)?;
        let w = match &self.cond {
            None => w,
            Some(cond) => {
                let graphs: Vec<&SceneGraph> = inputs.iter().map(|c| &c.graph).collect();
                let maps: Vec<&CaptionMapping> = prompts.iter().map(|(_, m)| m.as_ref().expect("adapter prompt")).collect();
                cond.condition_batch(&w, &lens, &graphs, &maps, ConditionerConfig::for_generator(self.id))?
            }
        };
        Ok((w, bias, lens))
    }

    /// Unconditional embeddings: the learned null vector as a one-token sequence.
    pub fn null_conditions(&self, b: usize) -> Result<(Tensor, Tensor)> {
        let w = self.null_cond.unsqueeze(0)?.broadcast_as((b, 1, self.cfg.dim))?.contiguous()?;
        let bias = Tensor::zeros((b, 1, 1), self.dtype(), &Device::Cpu)?;
        Ok((w, bias))
    }

    /// Conditioning with per-sample dropout to the null embedding.
    fn training_conditions(&self, inputs: &[&CondInput], drop: &[bool]) -> Result<(Tensor, Tensor)> {
        let (w, _, lens) = self.encode_conditions(inputs)?;
        let (b, n, d) = w.dims3()?;
        let keep = tensor_from(drop.iter().map(|&x| if x { 0.0 } else { 1.0 }).collect(), &[b, 1, 1], self.dtype())?;
        let null = self.null_cond.unsqueeze(0)?.broadcast_as((b, n, d))?;
        let w = (w.broadcast_mul(&keep)? + null.broadcast_mul(&(1.0 - &keep)?)?)?;
        let mut bias = Vec::with_capacity(b * n);
        for (i, &len) in lens.iter().enumerate() {
            for j in 0..n {
                let open = if drop[i] { j == 0 } else { j < len };
                bias.push(if open { 0.0 } else { NEG_INF });
            }
        }
        Ok((w, tensor_from(bias, &[b, 1, n], self.dtype())?))
    }

    /// Training loss on a batch (B, 3, H, W) in [-1, 1]; samples dropout,
    /// steps and noise from `rng`.
    pub fn ldm_loss(&self, x0: &Tensor, inputs: &[&CondInput], rng: &mut impl Rng) -> Result<Tensor> {
        let drop: Vec<bool> = inputs.iter().map(|_| rng.random::<f64>() < self.cfg.p_drop).collect();
        let (cond, bias) = self.training_conditions(inputs, &drop)?;
        ldm_loss(&self.den, &self.sched, x0, &cond, &bias, rng)
    }

    /// AdamW on shuffled mini-batches; the parameters end at their
    /// exponential moving average. Returns the loss of every step.
    pub fn train(&mut self, images: &Tensor, inputs: &[CondInput], steps: usize, rng: &mut impl Rng) -> Result<Vec<f32>> {
        let n = inputs.len();
        if n == 0 {
            return Err(ModelError::EmptyDataset);
        }
        if images.dim(0)? != n {
            return Err(ModelError::Shape(format!("{} images for {n} captions", images.dim(0)?)));
        }
        let images = images.to_dtype(self.dtype())?;
        let mut opt = AdamW::new(
            self.ps.vars(),
            ParamsAdamW {
                lr: self.cfg.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let vars = self.ps.vars();
        let mut ema: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().detach()).collect();
        let mut order: Vec<usize> = Vec::new();
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            if order.len() < self.cfg.batch {
                let mut fresh: Vec<usize> = (0..n).collect();
                fresh.shuffle(rng);
                order.extend(fresh);
            }
            let batch: Vec<usize> = order.drain(..self.cfg.batch.min(order.len())).collect();
            let idx = Tensor::from_vec(batch.iter().map(|&i| i as u32).collect::<Vec<_>>(), batch.len(), &Device::Cpu)?;
            let x0 = images.index_select(&idx, 0)?;
            let refs: Vec<&CondInput> = batch.iter().map(|&i| &inputs[i]).collect();
            let loss = self.ldm_loss(&x0, &refs, rng)?;
            opt.backward_step(&loss)?;
            losses.push(loss.to_dtype(DType::F32)?.to_scalar::<f32>()?);
            let n = losses.len() as f64;
            let decay = self.cfg.ema_decay.min((1.0 + n) / (10.0 + n));
            for (avg, var) in ema.iter_mut().zip(&vars) {
                *avg = ((&*avg * decay)? + (var.as_tensor() * (1.0 - decay))?)?.detach();
            }
        }
        for (avg, var) in ema.iter().zip(&vars) {
            var.set(avg)?;
        }
        Ok(losses)
    }

    /// Ancestral sampling with classifier-free guidance. Image i draws all
    /// its noise from stream i of the request seed, so results do not depend
    /// on batching.
    pub fn sample(&self, req: &SampleRequest) -> Result<Vec<RgbImage>> {
        if req.conditions.is_empty() {
            return Err(ModelError::Config("sample count must be at least 1".into()));
        }
        if req.image_size != self.cfg.image_size {
            return Err(ModelError::Config(format!(
                "model draws {0}x{0} images, {1}x{1} requested",
                self.cfg.image_size, req.image_size
            )));
        }
        let s = self.cfg.image_size;
        let mut out = Vec::with_capacity(req.conditions.len());
        for (chunk_idx, chunk) in req.conditions.chunks(self.cfg.batch).enumerate() {
            let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
                .map(|i| scene_rng(req.seed, (chunk_idx * self.cfg.batch + i) as u64))
                .collect();
            let refs: Vec<&CondInput> = chunk.iter().collect();
            let (cw, cb, _) = self.encode_conditions(&refs)?;
            let (cw, cb) = (cw.detach(), cb.detach());
            let uncond = self.null_conditions(chunk.len())?;
            let uncond = (uncond.0.detach(), uncond.1.detach());
            let x = ddpm_sample(
                &self.den,
                &self.sched,
                &[3, s, s],
                req.steps,
                req.guidance,
                (&cw, &cb),
                (&uncond.0, &uncond.1),
                &mut rngs,
            )?;
            out.extend(tensor_to_images(&x)?);
        }
        Ok(out)
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            kind: "generator".into(),
            config_id: self.id.to_string(),
            vocab_hash: format!("{}:{}", self.vocab.fingerprint(), self.tvocab.fingerprint()),
            extra: serde_json::to_value(&self.cfg).expect("config serializes"),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.ps.save(path, &self.checkpoint_meta())
    }

    /// Rebuilds the generator described by a checkpoint and loads its weights.
    pub fn load(path: &std::path::Path, v: &Vocab) -> Result<Self> {
        let meta = ParamStore::read_meta(path)?;
        if meta.kind != "generator" {
            return Err(ModelError::Checkpoint(format!("not a generator checkpoint: {}", meta.kind)));
        }
        let id: GeneratorId = meta.config_id.parse().map_err(ModelError::Checkpoint)?;
        let cfg: GeneratorConfig =
            serde_json::from_value(meta.extra.clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let g = Self::new(id, v, cfg)?;
        if g.checkpoint_meta().vocab_hash != meta.vocab_hash {
            return Err(ModelError::Checkpoint("vocabulary hash mismatch".into()));
        }
        g.ps.load(path)?;
        Ok(g)
    }

    /// Named parameter handle, for finite-difference checks.
    pub fn var(&self, name: &str) -> Option<&Var> {
        self.ps.get(name)
    }
}

/// (N, 3, H, W) in [-1, 1] from 8-bit images.
pub fn images_to_tensor(images: &[RgbImage]) -> Result<Tensor> {
    let first = images.first().ok_or(ModelError::EmptyDataset)?;
    let (w, h) = first.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.dimensions() != first.dimensions() {
            return Err(ModelError::Shape("images differ in size".into()));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?)
}

/// Clips to [-1, 1] and quantises to 8 bits.
pub fn tensor_to_images(x: &Tensor) -> Result<Vec<RgbImage>> {
    let (n, _, h, w) = x.dims4()?;
    let data = x.to_dtype(DType::F32)?.clamp(-1f32, 1f32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut img = RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for xx in 0..w {
                let px = |c: usize| {
                    let v = data[((i * 3 + c) * h + y) * w + xx];
                    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
                };
                img.put_pixel(xx as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        out.push(img);
    }
    Ok(out)
}
