//! Description tokenizer and the masked-token transformer encoder that
//! produces per-token contextual embeddings for conditioning.

use std::collections::HashMap;

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{
    dropout, positional_encoding, Adam, AttnMask, FeedForward, Graph, LayerNorm, Linear, Mode, MultiHeadAttention,
    ParamId, ParamSet, Tensor, Var,
};
use crate::util::{inert_rng, minibatches};
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const UNK: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<mask>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    /// Fixed token length `L_d`.
    pub max_len: usize,
    /// Word cap, reserved tokens excluded.
    pub vocab_cap: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_hidden: usize,
    pub dropout: f32,
    pub mask_ratio: f64,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            max_len: 64,
            vocab_cap: 2048,
            width: 64,
            heads: 4,
            layers: 2,
            ff_hidden: 128,
            dropout: 0.1,
            mask_ratio: 0.15,
            lr: 1e-3,
            epochs: 30,
            batch_size: 32,
        }
    }
}

/// Lowercased words, split on anything that is not alphanumeric.
pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TextVocabulary {
    /// Keeps the `cap` most frequent words, ties broken alphabetically.
    pub fn build<S: AsRef<str>>(corpus: &[S], cap: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in normalize(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Input("text vocabulary needs at least one word".into()));
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        words.truncate(cap);
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(words.into_iter().map(|w| w.0)).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Input("text vocabulary must start with <pad>, <mask>, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate text token {t:?}")));
            }
        }
        Ok(TextVocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// First `max_len` words, padded.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenizedText {
        let mut ids: Vec<usize> = normalize(text).iter().take(max_len).map(|w| self.id(w)).collect();
        let real = ids.len();
        ids.resize(max_len, PAD);
        let attention_mask = (0..max_len).map(|i| u8::from(i < real)).collect();
        TokenizedText { ids, attention_mask }
    }

    /// Space-joined words of the real positions.
    pub fn detokenize(&self, t: &TokenizedText) -> String {
        t.ids[..t.real_len()].iter().map(|&i| self.token(i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    /// 1 on real tokens (a prefix), 0 on padding.
    pub attention_mask: Vec<u8>,
}

impl TokenizedText {
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub ids_masked: Vec<usize>,
    pub attention_mask: Vec<u8>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
    /// Sorted masked positions.
    pub positions: Vec<usize>,
}

/// Replaces `round(ratio * real_len)` (at least one) real positions, drawn
/// uniformly without replacement, with the mask token.
pub fn mask_tokens<R: Rng + ?Sized>(t: &TokenizedText, ratio: f64, rng: &mut R) -> Result<MaskedBatch> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Input(format!("mask ratio must lie in (0, 1), got {ratio}")));
    }
    let n = t.real_len();
    if n == 0 {
        return Err(Error::Input("cannot mask an all-padding sequence".into()));
    }
    let m = ((ratio * n as f64).round() as usize).clamp(1, n);
    let mut positions = rand::seq::index::sample(rng, n, m).into_vec();
    positions.sort_unstable();
    let mut ids_masked = t.ids.clone();
    let targets = positions.iter().map(|&p| t.ids[p]).collect();
    for &p in &positions {
        ids_masked[p] = MASK;
    }
    Ok(MaskedBatch { ids_masked, attention_mask: t.attention_mask.clone(), targets, positions })
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

/// Pre-norm transformer encoder with a token prediction head.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub vocab: TextVocabulary,
    pub params: ParamSet,
    embed: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    frozen: bool,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(config: TextConfig, vocab: TextVocabulary, rng: &mut R) -> Result<Self> {
        let c = &config;
        if c.width == 0 || c.heads == 0 || c.width % c.heads != 0 {
            return Err(Error::Config(format!("text width {} must be a positive multiple of heads {}", c.width, c.heads)));
        }
        let mut params = ParamSet::new();
        let embed = params.add("text.embed", Tensor::randn(&[vocab.len(), c.width], 0.1, rng));
        let blocks = (0..c.layers)
            .map(|i| {
                let name = format!("text.block{i}");
                Block {
                    ln1: LayerNorm::new(&mut params, &format!("{name}.ln1"), c.width),
                    attn: MultiHeadAttention::new(&mut params, &format!("{name}.attn"), c.width, c.width, c.heads, rng),
                    ln2: LayerNorm::new(&mut params, &format!("{name}.ln2"), c.width),
                    ff: FeedForward::new(&mut params, &format!("{name}.ff"), c.width, c.ff_hidden, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut params, "text.ln_f", c.width);
        let head = Linear::new(&mut params, "text.head", c.width, vocab.len(), rng);
        Ok(TextEncoder { config, vocab, params, embed, blocks, ln_f, head, frozen: false })
    }

    /// Rebuilds an encoder around loaded parameters.
    pub fn from_params(config: TextConfig, vocab: TextVocabulary, params: ParamSet, frozen: bool) -> Result<Self> {
        let embed = crate::numerics::find_param(&params, "text.embed")?;
        if params.get(embed).shape() != [vocab.len(), config.width] {
            return Err(Error::Checkpoint(format!(
                "text.embed has shape {:?}, expected [{}, {}]",
                params.get(embed).shape(),
                vocab.len(),
                config.width
            )));
        }
        let blocks = (0..config.layers)
            .map(|i| {
                let name = format!("text.block{i}");
                Ok(Block {
                    ln1: LayerNorm::bind(&params, &format!("{name}.ln1"))?,
                    attn: MultiHeadAttention::bind(&params, &format!("{name}.attn"), config.heads)?,
                    ln2: LayerNorm::bind(&params, &format!("{name}.ln2"))?,
                    ff: FeedForward::bind(&params, &format!("{name}.ff"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::bind(&params, "text.ln_f")?;
        let head = Linear::bind(&params, "text.head")?;
        Ok(TextEncoder { config, vocab, params, embed, blocks, ln_f, head, frozen })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn tokenize(&self, text: &str) -> TokenizedText {
        self.vocab.tokenize(text, self.config.max_len)
    }

    /// Hidden states `[batch * len, width]` for equal-length id rows.
    fn hidden_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        ids: &[usize],
        mask: &[u8],
        len: usize,
        mode: Mode,
        rng: &mut R,
        frozen: bool,
    ) -> Result<Var> {
        let batch = ids.len() / len;
        let table = if frozen { g.frozen_param(self.embed) } else { g.param(self.embed) };
        let x = g.gather(table, ids)?;
        let pe = positional_encoding(len, self.config.width)?;
        let mut pos = Vec::with_capacity(batch * len * self.config.width);
        for _ in 0..batch {
            pos.extend_from_slice(pe.data());
        }
        let pos = g.constant(Tensor::new(vec![batch * len, self.config.width], pos)?);
        let mut h = g.add(x, pos)?;
        let keys = AttnMask::Keys(mask.iter().map(|&m| m == 1).collect());
        let p = self.config.dropout;
        for b in &self.blocks {
            let a = b.ln1.forward(g, h, frozen)?;
            let a = b.attn.forward(g, a, a, batch, len, len, &keys, frozen)?;
            let a = dropout(g, a, p, rng, mode)?;
            h = g.add(h, a)?;
            let f = b.ln2.forward(g, h, frozen)?;
            let f = b.ff.forward(g, f, p, rng, mode, frozen)?;
            let f = dropout(g, f, p, rng, mode)?;
            h = g.add(h, f)?;
        }
        Ok(self.ln_f.forward(g, h, frozen)?)
    }

    /// Mean negative log-probability of the original token over all masked
    /// positions of the batch. Rows are trimmed to the longest real length,
    /// which padding invariance makes exact.
    pub fn mlm_loss_graph<R: Rng + ?Sized>(&self, g: &mut Graph, batch: &[MaskedBatch], mode: Mode, rng: &mut R) -> Result<Var> {
        if batch.is_empty() || batch.iter().any(|b| b.positions.is_empty()) {
            return Err(Error::Input("masked-token loss needs at least one masked position per row".into()));
        }
        let len = batch.iter().map(|b| b.attention_mask.iter().filter(|&&m| m == 1).count()).max().unwrap_or(1).max(1);
        let mut ids = Vec::with_capacity(batch.len() * len);
        let mut mask = Vec::with_capacity(batch.len() * len);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (r, b) in batch.iter().enumerate() {
            ids.extend_from_slice(&b.ids_masked[..len]);
            mask.extend_from_slice(&b.attention_mask[..len]);
            rows.extend(b.positions.iter().map(|p| r * len + p));
            targets.extend_from_slice(&b.targets);
        }
        let h = self.hidden_graph(g, &ids, &mask, len, mode, rng, false)?;
        let picked = g.gather(h, &rows)?;
        let logits = self.head.forward(g, picked)?;
        Ok(g.cross_entropy(logits, &targets)?)
    }

    /// Eval-mode masked-token loss.
    pub fn mlm_loss(&self, batch: &[MaskedBatch]) -> Result<f32> {
        let mut g = Graph::with_params(&self.params);
        let loss = self.mlm_loss_graph(&mut g, batch, Mode::Eval, &mut inert_rng())?;
        Ok(g.scalar(loss))
    }

    /// Contextual embeddings `[max_len, width]`, padded rows zeroed. Only a
    /// frozen encoder may be used this way.
    pub fn encode(&self, t: &TokenizedText) -> Result<Tensor> {
        Ok(self.encode_batch(std::slice::from_ref(t))?.remove(0))
    }

    pub fn encode_batch(&self, texts: &[TokenizedText]) -> Result<Vec<Tensor>> {
        if !self.frozen {
            return Err(Error::Contract("text encoder must be frozen before encoding".into()));
        }
        let len = self.config.max_len;
        if let Some(t) = texts.iter().find(|t| t.len() != len) {
            return Err(Error::Input(format!("tokenized text has length {}, expected {len}", t.len())));
        }
        if texts.iter().any(|t| t.real_len() == 0) {
            return Err(Error::Input("cannot encode an empty description".into()));
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let ids: Vec<usize> = texts.iter().flat_map(|t| t.ids.iter().copied()).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.vocab.len())));
        }
        let mask: Vec<u8> = texts.iter().flat_map(|t| t.attention_mask.iter().copied()).collect();
        let mut g = Graph::with_params(&self.params);
        let h = self.hidden_graph(&mut g, &ids, &mask, len, Mode::Eval, &mut inert_rng(), true)?;
        let hv = g.value(h);
        let w = self.config.width;
        Ok(texts
            .iter()
            .enumerate()
            .map(|(b, t)| {
                let mut data = hv.data()[b * len * w..(b + 1) * len * w].to_vec();
                for (i, &m) in t.attention_mask.iter().enumerate() {
                    if m == 0 {
                        data[i * w..(i + 1) * w].fill(0.0);
                    }
                }
                Tensor::new(vec![len, w], data).expect("slice of encoder output")
            })
            .collect())
    }

    /// Masked-token training with Adam, then freezes the encoder. Returns
    /// the mean loss per epoch.
    pub fn train<S: AsRef<str>, R: Rng + ?Sized>(&mut self, corpus: &[S], rng: &mut R) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(Error::Contract("text encoder is frozen".into()));
        }
        if corpus.len() < 100 {
            return Err(Error::Input(format!("text training needs at least 100 descriptions, got {}", corpus.len())));
        }
        let c = self.config.clone();
        let tokens: Vec<TokenizedText> =
            corpus.iter().map(|s| self.tokenize(s.as_ref())).filter(|t| t.real_len() > 0).collect();
        let mut adam = Adam::new(&self.params, c.lr);
        let mut log = Vec::with_capacity(c.epochs);
        for epoch in 0..c.epochs {
            let mut sum = 0.0f64;
            let batches = minibatches(tokens.len(), c.batch_size, rng);
            for (b, rows) in batches.iter().enumerate() {
                let masked = rows.iter().map(|&r| mask_tokens(&tokens[r], c.mask_ratio, rng)).collect::<Result<Vec<_>>>()?;
                let diverged = |detail: String| Error::Diverged { epoch, batch: b, detail };
                let grads = {
                    let mut g = Graph::with_params(&self.params);
                    let loss = self
                        .mlm_loss_graph(&mut g, &masked, Mode::Train, rng)
                        .map_err(|e| if e.is_numeric() { diverged(e.to_string()) } else { e })?;
                    sum += g.scalar(loss) as f64 * rows.len() as f64;
                    g.backward(loss)?
                };
                adam.step(&mut self.params, &grads).map_err(|e| diverged(e.to_string()))?;
            }
            let mean = sum / tokens.len() as f64;
            info!("text epoch {} loss {:.6}", epoch + 1, mean);
            log.push(mean);
        }
        self.frozen = true;
        Ok(log)
    }
}
