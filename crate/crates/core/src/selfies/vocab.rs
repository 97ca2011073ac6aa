//! Token vocabulary with greedy bigram merges.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::grammar::{classify, SelfiesToken, Symbol};
use super::SelfiesError;

pub const PAD: u32 = 0;
pub const PAD_TEXT: &str = "<PAD>";
/// Upper bound on vocabulary size including merges.
pub const MAX_VOCAB: usize = 512;
/// Longest stored index sequence.
pub const MAX_LEN: usize = 258;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Entry {
    Pad,
    Base(Symbol),
    Merged(u32, u32),
}

/// Remapped token indices, possibly PAD-suffixed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenIndexSequence {
    pub indices: Vec<u32>,
}

impl TokenIndexSequence {
    /// Number of non-PAD positions.
    pub fn content_len(&self) -> usize {
        self.indices.iter().take_while(|&&i| i != PAD).count()
    }

    pub fn padded(&self, len: usize) -> Result<Vec<u32>, SelfiesError> {
        if self.indices.len() > len {
            return Err(SelfiesError::TooLong { len: self.indices.len(), max: len });
        }
        let mut out = self.indices.clone();
        out.resize(len, PAD);
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelfiesVocabulary {
    entries: Vec<Entry>,
    texts: Vec<String>,
    index_of: HashMap<String, u32>,
    base_len: usize,
}

fn merged_text(a: &str, b: &str) -> String {
    let inner = |s: &str| s.trim_start_matches('[').trim_end_matches(']').to_string();
    format!("[{}{}]", inner(a), inner(b))
}

impl SelfiesVocabulary {
    /// PAD plus every grammar symbol, no merges.
    pub fn base() -> Self {
        let mut entries = vec![Entry::Pad];
        entries.extend(Symbol::alphabet().into_iter().map(Entry::Base));
        let texts: Vec<String> = entries
            .iter()
            .map(|e| match e {
                Entry::Pad => PAD_TEXT.to_string(),
                Entry::Base(s) => s.text(),
                Entry::Merged(..) => unreachable!(),
            })
            .collect();
        let index_of = texts.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let base_len = entries.len();
        SelfiesVocabulary { entries, texts, index_of, base_len }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn merge_count(&self) -> usize {
        self.entries.len() - self.base_len
    }

    pub fn text(&self, index: u32) -> Option<&str> {
        self.texts.get(index as usize).map(String::as_str)
    }

    pub fn index_of(&self, text: &str) -> Option<u32> {
        self.index_of.get(text).copied()
    }

    /// Merge pairs in application order.
    pub fn merges(&self) -> Vec<(u32, u32)> {
        self.entries[self.base_len..]
            .iter()
            .map(|e| match e {
                Entry::Merged(a, b) => (*a, *b),
                _ => unreachable!("merged region holds merges only"),
            })
            .collect()
    }

    fn push_merge(&mut self, a: u32, b: u32) -> Result<u32, SelfiesError> {
        let n = self.entries.len() as u32;
        if a >= n || b >= n || a == PAD || b == PAD {
            return Err(SelfiesError::Vocabulary(format!("merge ({a}, {b}) references an undefined token")));
        }
        if self.entries.len() >= MAX_VOCAB {
            return Err(SelfiesError::Vocabulary(format!("vocabulary would exceed {MAX_VOCAB} tokens")));
        }
        let text = merged_text(&self.texts[a as usize], &self.texts[b as usize]);
        if self.index_of.contains_key(&text) {
            return Err(SelfiesError::Vocabulary(format!("merged token {text} already defined")));
        }
        self.entries.push(Entry::Merged(a, b));
        self.index_of.insert(text.clone(), n);
        self.texts.push(text);
        Ok(n)
    }

    fn base_index(&self, symbol: &Symbol) -> u32 {
        self.index_of[&symbol.text()]
    }

    pub fn encode_indices(&self, tokens: &[SelfiesToken]) -> Result<TokenIndexSequence, SelfiesError> {
        let mut seq: Vec<u32> = tokens.iter().map(|t| self.base_index(&t.symbol)).collect();
        for (k, (a, b)) in self.merges().into_iter().enumerate() {
            apply_merge(&mut seq, a, b, (self.base_len + k) as u32);
        }
        if seq.len() > MAX_LEN {
            return Err(SelfiesError::TooLong { len: seq.len(), max: MAX_LEN });
        }
        Ok(TokenIndexSequence { indices: seq })
    }

    fn expand(&self, index: u32, out: &mut Vec<Symbol>) {
        match self.entries[index as usize] {
            Entry::Pad => {}
            Entry::Base(s) => out.push(s),
            Entry::Merged(a, b) => {
                self.expand(a, out);
                self.expand(b, out);
            }
        }
    }

    /// Expands merges back to grammar symbols. PAD positions are dropped.
    pub fn decode_symbols(&self, indices: &[u32]) -> Result<Vec<Symbol>, SelfiesError> {
        let mut out = Vec::with_capacity(indices.len());
        for (pos, &i) in indices.iter().enumerate() {
            if i as usize >= self.entries.len() {
                return Err(SelfiesError::CorruptSequence { position: pos, index: i, size: self.entries.len() });
            }
            self.expand(i, &mut out);
        }
        Ok(out)
    }

    pub fn decode_indices(&self, indices: &[u32]) -> Result<Vec<SelfiesToken>, SelfiesError> {
        Ok(classify(&self.decode_symbols(indices)?))
    }

    /// Learns up to `max_merges` bigram merges from a corpus, most frequent
    /// pair first (ties go to the smaller index pair); stops when no pair
    /// occurs twice or the vocabulary is full.
    pub fn learn(corpus: &[Vec<SelfiesToken>], max_merges: usize) -> Self {
        let mut vocab = Self::base();
        let mut seqs: Vec<Vec<u32>> =
            corpus.iter().map(|t| t.iter().map(|tok| vocab.base_index(&tok.symbol)).collect()).collect();
        while vocab.merge_count() < max_merges && vocab.len() < MAX_VOCAB {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for seq in &seqs {
                for w in seq.windows(2) {
                    *counts.entry((w[0], w[1])).or_default() += 1;
                }
            }
            let mut ranked: Vec<((u32, u32), usize)> = counts.into_iter().filter(|&(_, c)| c >= 2).collect();
            ranked.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
            let chosen = ranked.into_iter().find_map(|((a, b), _)| vocab.push_merge(a, b).ok().map(|m| (a, b, m)));
            let Some((a, b, m)) = chosen else { break };
            for seq in &mut seqs {
                apply_merge(seq, a, b, m);
            }
        }
        vocab
    }

    /// One token per line in index order, then `#MERGES` and one
    /// tab-separated pair of token texts per merge.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.texts {
            s.push_str(t);
            s.push('\n');
        }
        s.push_str("#MERGES\n");
        for (a, b) in self.merges() {
            let _ = writeln!(s, "{}\t{}", self.texts[a as usize], self.texts[b as usize]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, SelfiesError> {
        let bad = |m: String| SelfiesError::Vocabulary(m);
        let (tokens, merges) = text.split_once("#MERGES\n").ok_or_else(|| bad("missing #MERGES section".into()))?;
        let tokens: Vec<&str> = tokens.lines().collect();
        let mut vocab = Self::base();
        if tokens.len() < vocab.len() || tokens[..vocab.len()] != vocab.texts.iter().map(String::as_str).collect::<Vec<_>>()[..]
        {
            return Err(bad("token list does not start with PAD and the grammar alphabet".into()));
        }
        for (k, line) in merges.lines().filter(|l| !l.is_empty()).enumerate() {
            let (a, b) = line.split_once('\t').ok_or_else(|| bad(format!("merge line {k} is not tab-separated")))?;
            let ia = vocab.index_of(a).ok_or_else(|| bad(format!("merge {k} uses unknown token {a}")))?;
            let ib = vocab.index_of(b).ok_or_else(|| bad(format!("merge {k} uses unknown token {b}")))?;
            let m = vocab.push_merge(ia, ib)?;
            let listed = tokens.get(m as usize).copied().unwrap_or("");
            if listed != vocab.texts[m as usize] {
                return Err(bad(format!("token line {m} is {listed:?}, merge defines {}", vocab.texts[m as usize])));
            }
        }
        if tokens.len() != vocab.len() {
            return Err(bad(format!("{} tokens listed but {} defined", tokens.len(), vocab.len())));
        }
        Ok(vocab)
    }
}

fn apply_merge(seq: &mut Vec<u32>, a: u32, b: u32, merged: u32) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
            out.push(merged);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}
