//! Generation metrics: statistical indicators, string and fingerprint
//! similarity, Fréchet distance, descriptors, BLEU, PCA export and the hit
//! ratio.

mod fcd;
mod fingerprint;
mod groups;

use std::collections::{HashMap, HashSet};

use log::warn;
use serde::{Deserialize, Serialize};

pub use fcd::{fcd, folded_morgan_embedding, frechet_distance, pca_export, GaussianStats, Pca, EMBED_DIM, FCD_EPS};
pub use fingerprint::{
    key_names, keys_fingerprint, morgan_fingerprint, morgan_identifiers, tanimoto, Fingerprint, FingerprintKind, KEY_BITS,
    MORGAN_BITS, MORGAN_RADIUS,
};
pub use groups::{
    aromatic_ring_count, aromatic_rings, descriptors, functional_group_match, functional_groups, groups_in_text,
    molecular_weight, ring_count, simple_cycles, Descriptors, FunctionalGroup,
};

use crate::selfies::{canonical_key, tokenize, MoleculeGraph};
use crate::{Error, Result};

/// Decoded graphs that are non-empty, connected and within valence.
pub fn is_valid(g: &MoleculeGraph) -> bool {
    !g.is_empty() && g.is_connected() && g.validate().is_ok()
}

fn nonempty<T>(set: &[T]) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Input("metric over an empty molecule set".into()));
    }
    Ok(())
}

pub fn validity(generated: &[MoleculeGraph]) -> Result<f64> {
    nonempty(generated)?;
    Ok(generated.iter().filter(|g| is_valid(g)).count() as f64 / generated.len() as f64)
}

/// Distinct canonical keys among the valid molecules over the valid count.
pub fn uniqueness(generated: &[MoleculeGraph]) -> Result<f64> {
    nonempty(generated)?;
    let keys: Vec<String> = generated.iter().filter(|g| is_valid(g)).map(canonical_key).collect();
    if keys.is_empty() {
        return Ok(0.0);
    }
    let distinct: HashSet<&String> = keys.iter().collect();
    Ok(distinct.len() as f64 / keys.len() as f64)
}

/// Valid generated molecules absent from the training keys, over all generated.
pub fn novelty(generated: &[MoleculeGraph], train_keys: &HashSet<String>) -> Result<f64> {
    nonempty(generated)?;
    let novel = generated.iter().filter(|g| is_valid(g) && !train_keys.contains(&canonical_key(g))).count();
    Ok(novel as f64 / generated.len() as f64)
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - d(a, b) / max(|a|, |b|)`; two empty sequences score 1.
pub fn levenshtein_similarity<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let m = a.len().max(b.len());
    if m == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / m as f64
}

/// Similarity over characters.
pub fn char_similarity(a: &str, b: &str) -> f64 {
    let (x, y): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    levenshtein_similarity(&x, &y)
}

fn selfies_units(s: &str) -> Vec<String> {
    match tokenize(s) {
        Ok(t) => t.iter().map(|t| t.text()).collect(),
        Err(_) => s.chars().map(String::from).collect(),
    }
}

/// Similarity over SELFIES tokens; strings that do not tokenize fall back
/// to characters.
pub fn selfies_similarity(a: &str, b: &str) -> f64 {
    levenshtein_similarity(&selfies_units(a), &selfies_units(b))
}

fn ngram_counts<T: Eq + std::hash::Hash + Clone>(s: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU: clipped n-gram precisions pooled over all pairs for
/// n = 1..=4, geometric mean over the orders for which the candidates have
/// any n-grams, times the brevity penalty.
pub fn corpus_bleu<T: Eq + std::hash::Hash + Clone>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.iter().any(|(_, r)| r.is_empty()) || pairs.is_empty() {
        return Err(Error::Input("BLEU needs non-empty references".into()));
    }
    let (cand_len, ref_len): (usize, usize) = pairs.iter().fold((0, 0), |(c, r), (a, b)| (c + a.len(), r + b.len()));
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=4 {
        let (mut hit, mut total) = (0usize, 0usize);
        for (c, r) in pairs {
            let rc = ngram_counts(r, n);
            for (gram, k) in ngram_counts(c, n) {
                hit += k.min(rc.get(&gram).copied().unwrap_or(0));
                total += k;
            }
        }
        if total == 0 {
            continue;
        }
        if hit == 0 {
            return Ok(0.0);
        }
        log_sum += (hit as f64 / total as f64).ln();
        orders += 1;
    }
    let bp = if cand_len >= ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    Ok(bp * (log_sum / orders as f64).exp())
}

pub fn bleu<T: Eq + std::hash::Hash + Clone>(candidate: &[T], reference: &[T]) -> Result<f64> {
    corpus_bleu(&[(candidate.to_vec(), reference.to_vec())])
}

/// Whether a generated molecule carries the groups a description names:
/// every named group must be present; a description naming none matches
/// molecules without any listed group.
pub fn description_match(description: &str, g: &MoleculeGraph) -> bool {
    let wanted = groups_in_text(description);
    if wanted.is_empty() {
        functional_groups(g).is_empty()
    } else {
        wanted.iter().all(|&w| functional_group_match(g, w))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitRatioReport {
    pub matches: Vec<bool>,
    pub errors: Vec<f64>,
    pub threshold: f64,
    pub flags: Vec<bool>,
    pub ratio: f64,
}

/// Hit iff the group matches or the noise error is at most `threshold`.
pub fn hit_ratio_with_threshold(matches: &[bool], errors: &[f64], threshold: f64) -> Result<HitRatioReport> {
    if matches.len() != errors.len() || matches.is_empty() {
        return Err(Error::Input(format!("hit ratio needs equal, non-empty inputs ({} vs {})", matches.len(), errors.len())));
    }
    let flags: Vec<bool> = matches.iter().zip(errors).map(|(&m, &e)| m || e <= threshold).collect();
    let ratio = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
    Ok(HitRatioReport { matches: matches.to_vec(), errors: errors.to_vec(), threshold, flags, ratio })
}

/// Threshold is the mean noise error of the run.
pub fn hit_ratio(matches: &[bool], errors: &[f64]) -> Result<HitRatioReport> {
    if errors.is_empty() {
        return Err(Error::Input("hit ratio over no samples".into()));
    }
    let delta = errors.iter().sum::<f64>() / errors.len() as f64;
    hit_ratio_with_threshold(matches, errors, delta)
}

/// A generated molecule, optionally paired with a reference by index.
#[derive(Clone, Debug)]
pub struct Generated {
    pub selfies: String,
    pub graph: MoleculeGraph,
    pub reference: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Reference {
    pub selfies: String,
    pub graph: MoleculeGraph,
}

/// Metric columns in reporting order.
pub const METRIC_COLUMNS: [&str; 8] =
    ["validity", "uniqueness", "novelty", "levenshtein", "fcd", "morgan", "maccs_keys", "bleu"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub validity: f64,
    pub uniqueness: f64,
    pub novelty: f64,
    pub levenshtein: Option<f64>,
    pub fcd: Option<f64>,
    pub morgan: Option<f64>,
    pub maccs_keys: Option<f64>,
    pub bleu: Option<f64>,
}

impl MetricReport {
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            Some(self.validity),
            Some(self.uniqueness),
            Some(self.novelty),
            self.levenshtein,
            self.fcd,
            self.morgan,
            self.maccs_keys,
            self.bleu,
        ]
    }
}

/// Full battery. Paired metrics average over generated molecules that
/// name a reference; FCD is omitted when either set is too small.
pub fn evaluate(generated: &[Generated], references: &[Reference], train_keys: &HashSet<String>) -> Result<MetricReport> {
    nonempty(generated)?;
    let graphs: Vec<MoleculeGraph> = generated.iter().map(|g| g.graph.clone()).collect();
    let mut report = MetricReport {
        validity: validity(&graphs)?,
        uniqueness: uniqueness(&graphs)?,
        novelty: novelty(&graphs, train_keys)?,
        ..MetricReport::default()
    };
    let pairs: Vec<(&Generated, &Reference)> = generated
        .iter()
        .filter_map(|g| g.reference.map(|r| references.get(r).map(|rr| (g, rr)).ok_or(r)))
        .collect::<std::result::Result<_, _>>()
        .map_err(|r| Error::Input(format!("reference index {r} outside {} references", references.len())))?;
    if !pairs.is_empty() {
        let n = pairs.len() as f64;
        report.levenshtein = Some(pairs.iter().map(|(g, r)| selfies_similarity(&g.selfies, &r.selfies)).sum::<f64>() / n);
        let mut morgan = 0.0;
        let mut keys = 0.0;
        for (g, r) in &pairs {
            if !g.graph.is_empty() && !r.graph.is_empty() {
                morgan += tanimoto(&morgan_fingerprint(&g.graph)?, &morgan_fingerprint(&r.graph)?)?;
                keys += tanimoto(&keys_fingerprint(&g.graph)?, &keys_fingerprint(&r.graph)?)?;
            }
        }
        report.morgan = Some(morgan / n);
        report.maccs_keys = Some(keys / n);
        let token_pairs: Vec<(Vec<String>, Vec<String>)> =
            pairs.iter().map(|(g, r)| (selfies_units(&g.selfies), selfies_units(&r.selfies))).collect();
        report.bleu = corpus_bleu(&token_pairs).ok();
    }
    let valid_gen: Vec<MoleculeGraph> = graphs.into_iter().filter(is_valid).collect();
    let refs: Vec<MoleculeGraph> = references.iter().map(|r| r.graph.clone()).filter(is_valid).collect();
    report.fcd = match fcd(&valid_gen, &refs, folded_morgan_embedding) {
        Ok(v) => Some(v),
        Err(e) => {
            warn!("FCD skipped: {e}");
            None
        }
    };
    Ok(report)
}

/// Min-max scaling of each column across reports; constant columns map to 0.
pub fn normalize_columns(reports: &[MetricReport]) -> Vec<[Option<f64>; 8]> {
    let rows: Vec<[Option<f64>; 8]> = reports.iter().map(MetricReport::values).collect();
    let mut out = rows.clone();
    for c in 0..8 {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r[c]).collect();
        if vals.is_empty() {
            continue;
        }
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for r in &mut out {
            r[c] = r[c].map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 });
        }
    }
    out
}
