//! Continuous embedding diffusion over remapped SELFIES index sequences,
//! denoised by a transformer that cross-attends to the text condition and
//! concatenates the omics latent before its output head.

use std::fmt;
use std::str::FromStr;

use log::info;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::{
    dropout, positional_encoding, timestep_encoding, Adam, AttnMask, FeedForward, Graph, LayerNorm, Linear, Mode,
    MultiHeadAttention, ParamId, ParamSet, Tensor, Var,
};
use crate::selfies::PAD;
use crate::util::{inert_rng, minibatches};
use crate::{Error, Result};

/// Offset inside the square root of the sqrt schedule.
pub const SQRT_SCHEDULE_OFFSET: f64 = 1e-4;
/// Per-step noise rate ceiling.
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `alpha_bar(t) = 1 - sqrt(t / T + s)`.
    Sqrt,
    /// Betas linear from 1e-4 to 0.02 (rescaled by `1000 / T`).
    Linear,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt" => Ok(ScheduleKind::Sqrt),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::Config(format!("unknown noise schedule {other:?} (expected sqrt or linear)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    /// `beta[t - 1]` for `t` in `1..=steps`.
    pub beta: Vec<f64>,
    /// `alpha_bar[t]` for `t` in `0..=steps`; `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("diffusion needs at least 2 steps, got {steps}")));
        }
        let raw: Vec<f64> = match kind {
            ScheduleKind::Sqrt => {
                let ab = |t: usize| 1.0 - (t as f64 / steps as f64 + SQRT_SCHEDULE_OFFSET).sqrt();
                (1..=steps)
                    .map(|t| {
                        let prev = if t == 1 { 1.0 } else { ab(t - 1) };
                        1.0 - ab(t).max(0.0) / prev
                    })
                    .collect()
            }
            ScheduleKind::Linear => {
                let scale = 1000.0 / steps as f64;
                let (lo, hi) = (1e-4 * scale, 0.02 * scale);
                (0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect()
            }
        };
        let beta: Vec<f64> = raw.into_iter().map(|b| b.clamp(1e-8, MAX_BETA)).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &beta {
            let last = *alpha_bar.last().unwrap();
            alpha_bar.push(last * (1.0 - b));
        }
        Ok(NoiseSchedule { steps, beta, alpha_bar })
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::Input(format!("diffusion step {t} outside 0..={}", self.steps)));
        }
        Ok(())
    }

    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_step(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::Input(format!("noise shape {:?} differs from {:?}", eps.shape(), x0.shape())));
        }
        let ab = self.alpha_bar[t];
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
        Ok(Tensor::new(x0.shape().to_vec(), data)?)
    }

    /// Reverse-time steps visited by skip sampling: `T, T - s, ...` while
    /// positive. The final jump lands on step 0.
    pub fn visited_steps(&self, stride: usize) -> Result<Vec<usize>> {
        if stride == 0 || stride > self.steps {
            return Err(Error::Config(format!("skip stride {stride} must lie in 1..={}", self.steps)));
        }
        Ok((1..=self.steps).rev().step_by(stride).collect())
    }
}

/// Which conditions the denoiser sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    NoText,
    NoOmics,
    /// Neither condition; the baseline for conditioning experiments.
    Unconditional,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoText, Ablation::NoOmics, Ablation::Unconditional];

    pub fn uses_text(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoOmics)
    }

    pub fn uses_omics(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoText)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoText => "no-text",
            Ablation::NoOmics => "no-omics",
            Ablation::Unconditional => "unconditional",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (expected full, no-text, no-omics or unconditional)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Index sequence length `L`.
    pub seq_len: usize,
    pub d_emb: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Width of the text condition rows.
    pub text_width: usize,
    /// Width of the omics latent.
    pub latent: usize,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub skip_stride: usize,
    pub lambda: f32,
    /// Adds `lambda * cos` instead of `lambda * (1 - cos)`.
    pub eq4_literal: bool,
    /// Snap each predicted clean embedding to its nearest table row while sampling.
    pub rounding: bool,
    pub lr: f32,
    pub dropout: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub ablation: Ablation,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            seq_len: crate::selfies::MAX_LEN,
            d_emb: 32,
            hidden: 64,
            blocks: 2,
            heads: 4,
            ff_hidden: 128,
            text_width: 64,
            latent: 128,
            steps: 2000,
            schedule: ScheduleKind::Sqrt,
            skip_stride: 10,
            lambda: 0.3,
            eq4_literal: false,
            rounding: true,
            lr: 1e-4,
            dropout: 0.1,
            epochs: 100,
            batch_size: 32,
            ablation: Ablation::Full,
        }
    }
}

/// Text condition rows for a batch, trimmed to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBatch {
    /// `[batch * len, width]`.
    pub hidden: Tensor,
    /// `[batch * len]`, true on real tokens.
    pub mask: Vec<bool>,
    pub len: usize,
}

impl TextBatch {
    /// Stacks per-record encodings `[L_d, width]` with their attention
    /// masks, keeping only the longest real prefix.
    pub fn stack(rows: &[(&Tensor, &[u8])]) -> Result<Self> {
        let len = rows.iter().map(|(_, m)| m.iter().filter(|&&v| v == 1).count()).max().unwrap_or(0);
        if rows.is_empty() || len == 0 {
            return Err(Error::Input("text condition needs at least one real token".into()));
        }
        let width = rows[0].0.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * len * width);
        let mut mask = Vec::with_capacity(rows.len() * len);
        for (h, m) in rows {
            if h.shape()[1] != width || h.shape()[0] < len || m.len() < len {
                return Err(Error::Input(format!("text condition of shape {:?} does not stack", h.shape())));
            }
            data.extend_from_slice(&h.data()[..len * width]);
            mask.extend(m[..len].iter().map(|&v| v == 1));
        }
        Ok(TextBatch { hidden: Tensor::new(vec![rows.len() * len, width], data)?, mask, len })
    }
}

/// Conditions for a batch of `batch` sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditions {
    pub batch: usize,
    pub text: Option<TextBatch>,
    /// `[batch, latent]`.
    pub omics: Option<Tensor>,
}

impl Conditions {
    pub fn none(batch: usize) -> Self {
        Conditions { batch, text: None, omics: None }
    }
}

/// One training batch: padded index rows, per-example steps and noise.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    /// `[batch * seq_len]`.
    pub indices: Vec<u32>,
    pub t: Vec<usize>,
    /// `[batch * seq_len, d_emb]`.
    pub eps: Tensor,
    pub cond: Conditions,
}

/// Scalar pieces of the training loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub mse: f32,
    pub nll: f32,
    /// Alignment term before weighting; `None` when omics are ablated.
    pub alignment: Option<f32>,
    /// `mse + nll`.
    pub base: f32,
    pub total: f32,
}

pub struct LossVars {
    pub total: Var,
    pub base: Var,
    pub mse: Var,
    pub nll: Var,
    pub alignment: Option<Var>,
}

/// Training inputs for the whole corpus.
#[derive(Clone, Debug)]
pub struct DiffusionData {
    /// Padded index rows of length `seq_len`.
    pub sequences: Vec<Vec<u32>>,
    /// Per-record text encodings and attention masks.
    pub text: Option<Vec<(Tensor, Vec<u8>)>>,
    /// `[n, latent]`.
    pub omics: Option<Tensor>,
}

impl DiffusionData {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Conditions for the selected records, honouring the ablation.
    pub fn conditions(&self, rows: &[usize], ablation: Ablation) -> Result<Conditions> {
        let text = match (&self.text, ablation.uses_text()) {
            (Some(t), true) => {
                let picked: Vec<(&Tensor, &[u8])> = rows.iter().map(|&r| (&t[r].0, t[r].1.as_slice())).collect();
                Some(TextBatch::stack(&picked)?)
            }
            (None, true) => return Err(Error::ConditionMismatch(format!("ablation {ablation} needs text conditions"))),
            _ => None,
        };
        let omics = match (&self.omics, ablation.uses_omics()) {
            (Some(o), true) => Some(crate::util::select_rows(o, rows)),
            (None, true) => return Err(Error::ConditionMismatch(format!("ablation {ablation} needs omics conditions"))),
            _ => None,
        };
        Ok(Conditions { batch: rows.len(), text, omics })
    }
}

/// A sampled index sequence with its mean noise-estimation error.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub indices: Vec<u32>,
    pub noise_error: f64,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_c: LayerNorm,
    cross: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub vocab_size: usize,
    pub params: ParamSet,
    pub schedule: NoiseSchedule,
    embed: ParamId,
    input: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head1: Linear,
    head2: Linear,
    align: Linear,
}

fn layer_forward(l: &Linear, g: &mut Graph, x: Var, frozen: bool) -> Result<Var> {
    Ok(if frozen { l.forward_frozen(g, x)? } else { l.forward(g, x)? })
}

impl DiffusionModel {
    pub fn new<R: Rng + ?Sized>(config: DiffusionConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        validate(&config, vocab_size)?;
        let c = &config;
        let mut params = ParamSet::new();
        let embed = params.add("diff.embed", Tensor::randn(&[vocab_size, c.d_emb], 1.0, rng));
        let input = Linear::new(&mut params, "diff.input", c.d_emb, c.hidden, rng);
        let blocks = (0..c.blocks)
            .map(|i| {
                let n = format!("diff.block{i}");
                Block {
                    ln1: LayerNorm::new(&mut params, &format!("{n}.ln1"), c.hidden),
                    self_attn: MultiHeadAttention::new(&mut params, &format!("{n}.self"), c.hidden, c.hidden, c.heads, rng),
                    ln_c: LayerNorm::new(&mut params, &format!("{n}.lnc"), c.hidden),
                    cross: MultiHeadAttention::new(&mut params, &format!("{n}.cross"), c.hidden, c.text_width, c.heads, rng),
                    ln2: LayerNorm::new(&mut params, &format!("{n}.ln2"), c.hidden),
                    ff: FeedForward::new(&mut params, &format!("{n}.ff"), c.hidden, c.ff_hidden, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut params, "diff.ln_f", c.hidden);
        let head1 = Linear::new(&mut params, "diff.head1", c.hidden + c.latent, c.hidden, rng);
        let head2 = Linear::new(&mut params, "diff.head2", c.hidden, c.d_emb, rng);
        let align = Linear::new(&mut params, "diff.align", c.hidden, c.latent, rng);
        let schedule = NoiseSchedule::new(c.steps, c.schedule)?;
        let mut model = DiffusionModel { config, vocab_size, params, schedule, embed, input, blocks, ln_f, head1, head2, align };
        model.normalize_embeddings();
        Ok(model)
    }

    /// Rebuilds a model around loaded parameters.
    pub fn from_params(config: DiffusionConfig, params: ParamSet) -> Result<Self> {
        let embed = crate::numerics::find_param(&params, "diff.embed")?;
        let (vocab_size, d) = params.get(embed).dims2();
        validate(&config, vocab_size)?;
        if d != config.d_emb {
            return Err(Error::Checkpoint(format!("embedding width {d} differs from configured {}", config.d_emb)));
        }
        let blocks = (0..config.blocks)
            .map(|i| {
                let n = format!("diff.block{i}");
                Ok(Block {
                    ln1: LayerNorm::bind(&params, &format!("{n}.ln1"))?,
                    self_attn: MultiHeadAttention::bind(&params, &format!("{n}.self"), config.heads)?,
                    ln_c: LayerNorm::bind(&params, &format!("{n}.lnc"))?,
                    cross: MultiHeadAttention::bind(&params, &format!("{n}.cross"), config.heads)?,
                    ln2: LayerNorm::bind(&params, &format!("{n}.ln2"))?,
                    ff: FeedForward::bind(&params, &format!("{n}.ff"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let input = Linear::bind(&params, "diff.input")?;
        let head1 = Linear::bind(&params, "diff.head1")?;
        let head2 = Linear::bind(&params, "diff.head2")?;
        let align = Linear::bind(&params, "diff.align")?;
        for (l, fi, fo) in [
            (&input, config.d_emb, config.hidden),
            (&head1, config.hidden + config.latent, config.hidden),
            (&head2, config.hidden, config.d_emb),
            (&align, config.hidden, config.latent),
        ] {
            if (l.fan_in, l.fan_out) != (fi, fo) {
                return Err(Error::Checkpoint(format!("layer shape [{}, {}] differs from configured [{fi}, {fo}]", l.fan_in, l.fan_out)));
            }
        }
        let ln_f = LayerNorm::bind(&params, "diff.ln_f")?;
        let schedule = NoiseSchedule::new(config.steps, config.schedule)?;
        Ok(DiffusionModel { config, vocab_size, params, schedule, embed, input, blocks, ln_f, head1, head2, align })
    }

    pub fn embedding_table(&self) -> &Tensor {
        self.params.get(self.embed)
    }

    /// Rescales every embedding row to norm `sqrt(d_emb)`, the scale of the
    /// unit-variance noise it is mixed with.
    pub fn normalize_embeddings(&mut self) {
        let d = self.config.d_emb;
        let target = (d as f64).sqrt();
        let table = self.params.get_mut(self.embed);
        for row in table.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v = (*v as f64 * target / norm) as f32);
        }
    }

    /// Embedding rows for an index sequence, `[len, d_emb]`.
    pub fn embed_tokens(&self, indices: &[u32]) -> Result<Tensor> {
        let table = self.embedding_table();
        let d = self.config.d_emb;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i as usize >= self.vocab_size {
                return Err(Error::Input(format!("token index {i} outside vocabulary of {}", self.vocab_size)));
            }
            data.extend_from_slice(table.row(i as usize));
        }
        Ok(Tensor::new(vec![indices.len(), d], data)?)
    }

    fn check_conditions(&self, cond: &Conditions) -> Result<()> {
        let a = self.config.ablation;
        if a.uses_text() != cond.text.is_some() {
            return Err(Error::ConditionMismatch(format!(
                "ablation {a} {} a text condition",
                if a.uses_text() { "requires" } else { "does not accept" }
            )));
        }
        if a.uses_omics() != cond.omics.is_some() {
            return Err(Error::ConditionMismatch(format!(
                "ablation {a} {} an omics condition",
                if a.uses_omics() { "requires" } else { "does not accept" }
            )));
        }
        if let Some(t) = &cond.text {
            if t.hidden.shape() != [cond.batch * t.len, self.config.text_width] {
                return Err(Error::Input(format!(
                    "text condition has shape {:?}, expected [{}, {}]",
                    t.hidden.shape(),
                    cond.batch * t.len,
                    self.config.text_width
                )));
            }
        }
        if let Some(o) = &cond.omics {
            if o.shape() != [cond.batch, self.config.latent] {
                return Err(Error::Input(format!(
                    "omics condition has shape {:?}, expected [{}, {}]",
                    o.shape(),
                    cond.batch,
                    self.config.latent
                )));
            }
        }
        Ok(())
    }

    /// Omics latents repeated over every sequence position, zeros when the
    /// condition is ablated. `[batch * seq_len, latent]`.
    pub fn broadcast_omics(&self, cond: &Conditions) -> Tensor {
        let (l, d) = (self.config.seq_len, self.config.latent);
        match &cond.omics {
            Some(o) => {
                let mut data = Vec::with_capacity(cond.batch * l * d);
                for b in 0..cond.batch {
                    for _ in 0..l {
                        data.extend_from_slice(o.row(b));
                    }
                }
                Tensor::new(vec![cond.batch * l, d], data).expect("broadcast shape")
            }
            None => Tensor::zeros(&[cond.batch * l, d]),
        }
    }

    /// Runs the denoiser on `x_t` (`[batch * seq_len, d_emb]`). Returns the
    /// transformer states, the fused condition and the predicted clean
    /// embeddings.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x_t: Var,
        t: &[usize],
        cond: &Conditions,
        mode: Mode,
        rng: &mut R,
        frozen: bool,
    ) -> Result<(Var, Var, Var)> {
        self.check_conditions(cond)?;
        let c = &self.config;
        let (b, l) = (cond.batch, c.seq_len);
        if t.len() != b || g.shape(x_t) != [b * l, c.d_emb] {
            return Err(Error::Input(format!(
                "denoiser input {:?} with {} steps does not match batch {b} of length {l}",
                g.shape(x_t),
                t.len()
            )));
        }
        let pe = positional_encoding(l, c.hidden)?;
        let mut add = Vec::with_capacity(b * l * c.hidden);
        for &step in t {
            self.schedule.check_step(step)?;
            let te = timestep_encoding(step as f64, c.hidden)?;
            for pos in 0..l {
                add.extend(pe.row(pos).iter().zip(te.data()).map(|(p, e)| p + e));
            }
        }
        let h0 = layer_forward(&self.input, g, x_t, frozen)?;
        let enc = g.constant(Tensor::new(vec![b * l, c.hidden], add)?);
        let mut h = g.add(h0, enc)?;
        let text = match &cond.text {
            Some(tb) => Some((g.constant(tb.hidden.clone()), AttnMask::Keys(tb.mask.clone()), tb.len)),
            None => None,
        };
        let p = c.dropout;
        for blk in &self.blocks {
            let a = blk.ln1.forward(g, h, frozen)?;
            let a = blk.self_attn.forward(g, a, a, b, l, l, &AttnMask::None, frozen)?;
            let a = dropout(g, a, p, rng, mode)?;
            h = g.add(h, a)?;
            if let Some((zd, mask, len)) = &text {
                let q = blk.ln_c.forward(g, h, frozen)?;
                let x = blk.cross.forward(g, q, *zd, b, l, *len, mask, frozen)?;
                let x = dropout(g, x, p, rng, mode)?;
                h = g.add(h, x)?;
            }
            let f = blk.ln2.forward(g, h, frozen)?;
            let f = blk.ff.forward(g, f, p, rng, mode, frozen)?;
            let f = dropout(g, f, p, rng, mode)?;
            h = g.add(h, f)?;
        }
        let z_hat = self.ln_f.forward(g, h, frozen)?;
        let omics = g.constant(self.broadcast_omics(cond));
        let z = g.concat_cols(z_hat, omics)?;
        let y = layer_forward(&self.head1, g, z, frozen)?;
        let y = g.relu(y)?;
        let x0_hat = layer_forward(&self.head2, g, y, frozen)?;
        Ok((z_hat, z, x0_hat))
    }

    /// Tied output head: `x0_hat · E^T`, `[rows, vocab]`.
    pub fn logits(&self, g: &mut Graph, x0_hat: Var, frozen: bool) -> Result<Var> {
        let table = if frozen { g.frozen_param(self.embed) } else { g.param(self.embed) };
        Ok(g.matmul_t(x0_hat, table)?)
    }

    /// Records the training loss: embedding MSE, token NLL through the tied
    /// head, and the weighted alignment between mean-pooled transformer
    /// states (projected to the latent width) and the omics latent.
    pub fn loss_graph<R: Rng + ?Sized>(&self, g: &mut Graph, batch: &TrainBatch, mode: Mode, rng: &mut R) -> Result<LossVars> {
        let c = &self.config;
        let (b, l, d) = (batch.cond.batch, c.seq_len, c.d_emb);
        if batch.indices.len() != b * l || batch.eps.shape() != [b * l, d] || batch.t.len() != b {
            return Err(Error::Input("training batch shapes disagree".into()));
        }
        if c.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", c.lambda)));
        }
        let idx: Vec<usize> = batch.indices.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Input(format!("token index {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let table = g.param(self.embed);
        let x0 = g.gather(table, &idx)?;
        let mut keep = Vec::with_capacity(b * l * d);
        let mut noise = Vec::with_capacity(b * l * d);
        for (r, &step) in batch.t.iter().enumerate() {
            self.schedule.check_step(step)?;
            let ab = self.schedule.alpha_bar[step];
            let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            keep.extend(std::iter::repeat_n(sa, l * d));
            noise.extend(batch.eps.data()[r * l * d..(r + 1) * l * d].iter().map(|e| sn * e));
        }
        let keep = g.constant(Tensor::new(vec![b * l, d], keep)?);
        let noise = g.constant(Tensor::new(vec![b * l, d], noise)?);
        let kept = g.mul(x0, keep)?;
        let x_t = g.add(kept, noise)?;
        let (z_hat, _, x0_hat) = self.denoise(g, x_t, &batch.t, &batch.cond, mode, rng, false)?;
        let diff = g.sub(x0_hat, x0)?;
        let sq = g.mul(diff, diff)?;
        let mse = g.mean(sq)?;
        let logits = self.logits(g, x0_hat, false)?;
        let nll = g.cross_entropy(logits, &idx)?;
        let base = g.add(mse, nll)?;
        let alignment = match &batch.cond.omics {
            Some(o) => {
                let mut pool = vec![0.0f32; b * b * l];
                for r in 0..b {
                    let row = &batch.indices[r * l..(r + 1) * l];
                    let real = row.iter().filter(|&&i| i != PAD).count();
                    let (n, all) = if real == 0 { (l, true) } else { (real, false) };
                    for (p, &i) in row.iter().enumerate() {
                        if all || i != PAD {
                            pool[r * b * l + r * l + p] = 1.0 / n as f32;
                        }
                    }
                }
                let pool = g.constant(Tensor::new(vec![b, b * l], pool)?);
                let pooled = g.matmul(pool, z_hat)?;
                let proj = self.align.forward(g, pooled)?;
                let zo = g.constant(o.clone());
                let cos = g.cosine_rows(proj, zo)?;
                let m = g.mean(cos)?;
                Some(if c.eq4_literal {
                    m
                } else {
                    let neg = g.scale(m, -1.0)?;
                    g.add_scalar(neg, 1.0)?
                })
            }
            None => None,
        };
        let total = match alignment {
            Some(a) if c.lambda != 0.0 => {
                let w = g.scale(a, c.lambda)?;
                g.add(base, w)?
            }
            _ => base,
        };
        Ok(LossVars { total, base, mse, nll, alignment })
    }

    /// Eval-mode loss pieces for a batch.
    pub fn loss(&self, batch: &TrainBatch) -> Result<LossParts> {
        let mut g = Graph::with_params(&self.params);
        let v = self.loss_graph(&mut g, batch, Mode::Eval, &mut inert_rng())?;
        Ok(LossParts {
            mse: g.scalar(v.mse),
            nll: g.scalar(v.nll),
            alignment: v.alignment.map(|a| g.scalar(a)),
            base: g.scalar(v.base),
            total: g.scalar(v.total),
        })
    }

    /// Draws steps uniformly from `1..=T` and standard normal noise.
    pub fn make_batch<R: Rng + ?Sized>(&self, data: &DiffusionData, rows: &[usize], rng: &mut R) -> Result<TrainBatch> {
        let (l, d) = (self.config.seq_len, self.config.d_emb);
        let mut indices = Vec::with_capacity(rows.len() * l);
        for &r in rows {
            let s = &data.sequences[r];
            if s.len() != l {
                return Err(Error::Input(format!("sequence {r} has length {}, expected {l}", s.len())));
            }
            indices.extend_from_slice(s);
        }
        let t = rows.iter().map(|_| rng.random_range(1..=self.config.steps)).collect();
        let eps = Tensor::randn(&[rows.len() * l, d], 1.0, rng);
        let cond = data.conditions(rows, self.config.ablation)?;
        Ok(TrainBatch { indices, t, eps, cond })
    }

    /// Minibatch Adam training; embeddings are renormalized after every
    /// step. Returns the mean loss per epoch.
    pub fn train<R: Rng + ?Sized>(&mut self, data: &DiffusionData, rng: &mut R) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Input("diffusion training needs at least one sequence".into()));
        }
        let c = self.config.clone();
        let mut adam = Adam::new(&self.params, c.lr);
        let mut log = Vec::with_capacity(c.epochs);
        for epoch in 0..c.epochs {
            let mut sum = 0.0f64;
            for (bi, rows) in minibatches(data.len(), c.batch_size, rng).iter().enumerate() {
                let batch = self.make_batch(data, rows, rng)?;
                let diverged = |detail: String| Error::Diverged { epoch, batch: bi, detail };
                let grads = {
                    let mut g = Graph::with_params(&self.params);
                    let v = self
                        .loss_graph(&mut g, &batch, Mode::Train, rng)
                        .map_err(|e| if e.is_numeric() { diverged(e.to_string()) } else { e })?;
                    sum += g.scalar(v.total) as f64 * rows.len() as f64;
                    g.backward(v.total).map_err(|e| diverged(e.to_string()))?
                };
                adam.step(&mut self.params, &grads).map_err(|e| diverged(e.to_string()))?;
                self.normalize_embeddings();
            }
            let mean = sum / data.len() as f64;
            info!("diffusion epoch {} loss {:.6}", epoch + 1, mean);
            log.push(mean);
        }
        Ok(log)
    }

    /// Reverse diffusion with skip steps from pure noise for every batch
    /// member. Each visited step predicts the clean embeddings, optionally
    /// snaps them to the nearest table rows, and moves to the next visited
    /// step through the Gaussian posterior. Tokens are the tied-head argmax
    /// of the final clean estimate; an all-PAD result keeps its best
    /// non-PAD token at the first position so it never decodes empty.
    pub fn sample<R: Rng + ?Sized>(&self, cond: &Conditions, rng: &mut R) -> Result<Vec<Sample>> {
        self.check_conditions(cond)?;
        let c = &self.config;
        let (b, l, d) = (cond.batch, c.seq_len, c.d_emb);
        if b == 0 {
            return Ok(Vec::new());
        }
        let visited = self.schedule.visited_steps(c.skip_stride)?;
        let mut x: Vec<f32> = (0..b * l * d).map(|_| StandardNormal.sample(rng)).collect();
        let mut errors = vec![0.0f64; b];
        let mut logits_last = Vec::new();
        let mut unused = inert_rng();
        for (k, &t) in visited.iter().enumerate() {
            let next = visited.get(k + 1).copied().unwrap_or(0);
            let mut g = Graph::with_params(&self.params);
            let xv = g.constant(Tensor::new(vec![b * l, d], x.clone())?);
            let (_, _, x0v) = self.denoise(&mut g, xv, &vec![t; b], cond, Mode::Eval, &mut unused, true)?;
            let lv = self.logits(&mut g, x0v, true)?;
            let x0_hat = g.value(x0v).data().to_vec();
            let logits = g.value(lv).data().to_vec();
            let table = self.embedding_table();
            let v = self.vocab_size;
            let mut rounded = Vec::with_capacity(b * l * d);
            for row in 0..b * l {
                let best = argmax(&logits[row * v..(row + 1) * v]);
                rounded.extend_from_slice(table.row(best));
            }
            let ab = self.schedule.alpha_bar[t];
            // Noise implied by the raw prediction minus that implied by the
            // snapped prediction, scaled back to noise units.
            let gain = ab / (1.0 - ab);
            for s in 0..b {
                let span = s * l * d..(s + 1) * l * d;
                let mse = x0_hat[span.clone()]
                    .iter()
                    .zip(&rounded[span])
                    .map(|(a, r)| ((a - r) as f64).powi(2))
                    .sum::<f64>()
                    / (l * d) as f64;
                errors[s] += gain * mse;
            }
            let x0 = if c.rounding { rounded } else { x0_hat };
            if next == 0 {
                x = x0;
                logits_last = logits;
            } else {
                let ab_next = self.schedule.alpha_bar[next];
                let alpha = ab / ab_next;
                let beta = 1.0 - alpha;
                let c0 = ab_next.sqrt() * beta / (1.0 - ab);
                let ct = alpha.sqrt() * (1.0 - ab_next) / (1.0 - ab);
                let sd = (beta * (1.0 - ab_next) / (1.0 - ab)).sqrt();
                for (xi, x0i) in x.iter_mut().zip(&x0) {
                    let z: f64 = StandardNormal.sample(rng);
                    *xi = (c0 * *x0i as f64 + ct * *xi as f64 + sd * z) as f32;
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch: 0, batch: k, detail: format!("non-finite sample at step {t}") });
            }
        }
        let v = self.vocab_size;
        let steps = visited.len() as f64;
        Ok((0..b)
            .map(|s| {
                let mut indices: Vec<u32> =
                    (0..l).map(|p| argmax(&logits_last[(s * l + p) * v..(s * l + p + 1) * v]) as u32).collect();
                if indices.iter().all(|&i| i == PAD) {
                    let row = &logits_last[s * l * v + 1..s * l * v + v];
                    indices[0] = argmax(row) as u32 + 1;
                }
                Sample { indices, noise_error: errors[s] / steps }
            })
            .collect())
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn validate(c: &DiffusionConfig, vocab_size: usize) -> Result<()> {
    if vocab_size < 2 {
        return Err(Error::Config(format!("diffusion vocabulary needs at least 2 tokens, got {vocab_size}")));
    }
    if c.hidden == 0 || c.heads == 0 || c.hidden % c.heads != 0 || c.hidden % 2 != 0 {
        return Err(Error::Config(format!("hidden width {} must be an even multiple of heads {}", c.hidden, c.heads)));
    }
    if c.seq_len == 0 || c.seq_len > crate::selfies::MAX_LEN {
        return Err(Error::Config(format!("sequence length {} must lie in 1..={}", c.seq_len, crate::selfies::MAX_LEN)));
    }
    if c.d_emb == 0 || c.latent == 0 || c.text_width == 0 || c.batch_size == 0 {
        return Err(Error::Config("diffusion widths and batch size must be positive".into()));
    }
    if c.lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {}", c.lambda)));
    }
    if c.skip_stride == 0 || c.skip_stride > c.steps {
        return Err(Error::Config(format!("skip stride {} must lie in 1..={}", c.skip_stride, c.steps)));
    }
    Ok(())
}
