//! Staged training and generation: omics VAE, frozen text encoder, then
//! the conditional diffusion model, with checkpoint helpers and the report
//! shapes used by the CLI.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Resolved;
use crate::datagen::{load_corpus, TextOmicsRecord};
use crate::diffusion::{Ablation, Conditions, DiffusionConfig, DiffusionData, DiffusionModel, TextBatch};
use crate::eval::{
    description_match, evaluate, hit_ratio, is_valid, Generated, HitRatioReport, MetricReport, Reference, METRIC_COLUMNS,
};
use crate::numerics::Tensor;
use crate::omics::{OmicsVae, VaeConfig};
use crate::selfies::{
    canonical_key, decode_to_graph, graph_to_smiles, selfies_to_graph, tokenize, tokens_to_string, MoleculeGraph,
    SelfiesVocabulary,
};
use crate::text::{TextConfig, TextEncoder, TextVocabulary};
use crate::{Error, Result};

pub const OMICS_TAG: &str = "omics";
pub const TEXT_TAG: &str = "text";
pub const DIFFUSION_TAG: &str = "diffusion";

/// Generator streams per stage, all rooted at the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Omics = 1,
    Text = 2,
    Diffusion = 3,
    Sampling = 4,
}

pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

/// Records with their vocabularies.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<TextOmicsRecord>,
    pub selfies_vocab: SelfiesVocabulary,
    pub text_vocab: TextVocabulary,
}

impl Corpus {
    /// Builds vocabularies from the records themselves.
    pub fn from_records(records: Vec<TextOmicsRecord>, cfg: &Resolved) -> Result<Self> {
        let tokens = records.iter().map(|r| tokenize(&r.selfies)).collect::<std::result::Result<Vec<_>, _>>()?;
        let selfies_vocab = SelfiesVocabulary::learn(&tokens, cfg.datagen.selfies_merges);
        let descriptions: Vec<&str> = records.iter().map(|r| r.description.as_str()).collect();
        let text_vocab = TextVocabulary::build(&descriptions, cfg.text.vocab_cap)?;
        Ok(Corpus { records, selfies_vocab, text_vocab })
    }

    /// Loads a JSONL corpus; `selfies_vocab.txt` and `text_vocab.txt` next
    /// to it are used when present, otherwise both are learned.
    pub fn load(path: &Path, cfg: &Resolved) -> Result<Self> {
        let records = load_corpus(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let (sv, tv) = (dir.join("selfies_vocab.txt"), dir.join("text_vocab.txt"));
        if sv.exists() && tv.exists() {
            let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
            let selfies_vocab = SelfiesVocabulary::from_text(&read(&sv)?)?;
            let text_vocab = TextVocabulary::from_text(&read(&tv)?)?;
            return Ok(Corpus { records, selfies_vocab, text_vocab });
        }
        Self::from_records(records, cfg)
    }

    pub fn genes(&self) -> usize {
        self.records[0].omics.len()
    }

    /// Training records and the held-out tail used as generation conditions.
    pub fn split(&self, held_out: usize) -> Result<(&[TextOmicsRecord], &[TextOmicsRecord])> {
        if held_out >= self.records.len() {
            return Err(Error::Config(format!(
                "cannot hold out {held_out} of {} records for evaluation",
                self.records.len()
            )));
        }
        Ok(self.records.split_at(self.records.len() - held_out))
    }
}

pub fn omics_matrix(records: &[TextOmicsRecord]) -> Tensor {
    crate::util::stack(&records.iter().map(|r| r.omics.clone()).collect::<Vec<_>>())
}

pub fn train_omics(cfg: &Resolved, records: &[TextOmicsRecord]) -> Result<(OmicsVae, Vec<f64>)> {
    let mut c = cfg.omics.clone();
    c.genes = records.first().ok_or_else(|| Error::Input("no records to train on".into()))?.omics.len();
    let mut rng = stage_rng(cfg.seed, Stage::Omics);
    let mut vae = OmicsVae::new(c, &mut rng);
    let log = vae.train(&omics_matrix(records), &mut rng)?;
    Ok((vae, log))
}

pub fn train_text(cfg: &Resolved, records: &[TextOmicsRecord], vocab: &TextVocabulary) -> Result<(TextEncoder, Vec<f64>)> {
    let mut rng = stage_rng(cfg.seed, Stage::Text);
    let mut enc = TextEncoder::new(cfg.text.clone(), vocab.clone(), &mut rng)?;
    let descriptions: Vec<&str> = records.iter().map(|r| r.description.as_str()).collect();
    let log = enc.train(&descriptions, &mut rng)?;
    Ok((enc, log))
}

/// Padded index rows; a molecule longer than `seq_len` is an input error.
pub fn encode_sequences(vocab: &SelfiesVocabulary, records: &[TextOmicsRecord], seq_len: usize) -> Result<Vec<Vec<u32>>> {
    records
        .iter()
        .map(|r| {
            let seq = vocab.encode_indices(&tokenize(&r.selfies)?)?;
            seq.padded(seq_len).map_err(|_| {
                Error::Input(format!(
                    "record {} needs {} tokens but L_max is {seq_len}",
                    r.id,
                    seq.indices.len()
                ))
            })
        })
        .collect()
}

const ENCODE_CHUNK: usize = 256;

/// Frozen text encodings with attention masks, one per description.
pub fn encode_texts(enc: &TextEncoder, descriptions: &[&str]) -> Result<Vec<(Tensor, Vec<u8>)>> {
    let mut out = Vec::with_capacity(descriptions.len());
    for chunk in descriptions.chunks(ENCODE_CHUNK) {
        let toks: Vec<_> = chunk.iter().map(|d| enc.tokenize(d)).collect();
        let hidden = enc.encode_batch(&toks)?;
        out.extend(hidden.into_iter().zip(toks).map(|(h, t)| (h, t.attention_mask)));
    }
    Ok(out)
}

/// Trained upstream encoders; either may be absent under an ablation.
#[derive(Clone, Debug, Default)]
pub struct Upstream {
    pub omics: Option<OmicsVae>,
    pub text: Option<TextEncoder>,
}

impl Upstream {
    fn require(&self, ablation: Ablation) -> Result<()> {
        if ablation.uses_omics() && self.omics.is_none() {
            return Err(Error::MissingArtifact(format!("ablation {ablation} needs the omics checkpoint")));
        }
        if ablation.uses_text() && self.text.is_none() {
            return Err(Error::MissingArtifact(format!("ablation {ablation} needs the text checkpoint")));
        }
        Ok(())
    }
}

pub fn diffusion_data(
    cfg: &DiffusionConfig,
    records: &[TextOmicsRecord],
    vocab: &SelfiesVocabulary,
    up: &Upstream,
) -> Result<DiffusionData> {
    up.require(cfg.ablation)?;
    let sequences = encode_sequences(vocab, records, cfg.seq_len)?;
    let text = match (&up.text, cfg.ablation.uses_text()) {
        (Some(enc), true) => {
            let d: Vec<&str> = records.iter().map(|r| r.description.as_str()).collect();
            Some(encode_texts(enc, &d)?)
        }
        _ => None,
    };
    let omics = match (&up.omics, cfg.ablation.uses_omics()) {
        (Some(vae), true) => Some(vae.latent_mean(&omics_matrix(records))?),
        _ => None,
    };
    Ok(DiffusionData { sequences, text, omics })
}

/// Widths of the upstream encoders override the configured ones.
pub fn diffusion_config(cfg: &Resolved, up: &Upstream) -> DiffusionConfig {
    let mut c = cfg.diffusion.clone();
    if let Some(v) = &up.omics {
        c.latent = v.config.latent;
    }
    if let Some(t) = &up.text {
        c.text_width = t.config.width;
    }
    c
}

pub fn train_diffusion(
    cfg: &Resolved,
    records: &[TextOmicsRecord],
    vocab: &SelfiesVocabulary,
    up: &Upstream,
) -> Result<(DiffusionModel, Vec<f64>)> {
    let c = diffusion_config(cfg, up);
    let data = diffusion_data(&c, records, vocab, up)?;
    let mut rng = stage_rng(cfg.seed, Stage::Diffusion);
    let mut model = DiffusionModel::new(c, vocab.len(), &mut rng)?;
    let log = model.train(&data, &mut rng)?;
    Ok((model, log))
}

/// One conditioning row of a generation request. Either field may be
/// absent when the model's ablation does not read it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omics: Option<Vec<f32>>,
    /// SELFIES of a paired reference molecule for similarity metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl From<&TextOmicsRecord> for ConditionRow {
    fn from(r: &TextOmicsRecord) -> Self {
        ConditionRow {
            id: Some(r.id.clone()),
            description: Some(r.description.clone()),
            omics: Some(r.omics.clone()),
            reference: Some(r.selfies.clone()),
        }
    }
}

pub fn load_conditions(path: &Path) -> Result<Vec<ConditionRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ConditionRow = serde_json::from_str(line).map_err(|e| Error::Data {
            path: path.display().to_string(),
            line: k + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data { path: path.display().to_string(), line: 0, message: "no condition rows".into() });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    /// Index of the condition row.
    pub condition: usize,
    pub selfies: String,
    pub smiles: String,
    pub indices: Vec<u32>,
    pub noise_error: f64,
    pub valid: bool,
    #[serde(skip)]
    pub graph: MoleculeGraph,
}

/// Samples per reverse-diffusion batch.
pub const SAMPLE_BATCH: usize = 100;

/// Samples `n_per` molecules for every condition row.
pub fn generate<R: Rng + ?Sized>(
    model: &DiffusionModel,
    vocab: &SelfiesVocabulary,
    up: &Upstream,
    rows: &[ConditionRow],
    n_per: usize,
    rng: &mut R,
) -> Result<Vec<GeneratedSample>> {
    let a = model.config.ablation;
    up.require(a)?;
    if vocab.len() != model.vocab_size {
        return Err(Error::Input(format!(
            "SELFIES vocabulary has {} tokens, the model {}",
            vocab.len(),
            model.vocab_size
        )));
    }
    let text = if a.uses_text() {
        let mut d = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            match &r.description {
                Some(s) if !s.trim().is_empty() => d.push(s.as_str()),
                _ => return Err(Error::ConditionMismatch(format!("ablation {a} needs a description on condition row {i}"))),
            }
        }
        Some(encode_texts(up.text.as_ref().expect("checked"), &d)?)
    } else {
        None
    };
    let omics = if a.uses_omics() {
        let vae = up.omics.as_ref().expect("checked");
        let mut profiles = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            match &r.omics {
                Some(o) if o.len() == vae.config.genes => profiles.push(o.clone()),
                Some(o) => {
                    return Err(Error::ConditionMismatch(format!(
                        "condition row {i} has {} genes, the omics encoder expects {}",
                        o.len(),
                        vae.config.genes
                    )))
                }
                None => return Err(Error::ConditionMismatch(format!("ablation {a} needs omics on condition row {i}"))),
            }
        }
        Some(vae.latent_mean(&crate::util::stack(&profiles))?)
    } else {
        None
    };
    if rows.iter().any(|r| (r.description.is_some() && !a.uses_text()) || (r.omics.is_some() && !a.uses_omics())) {
        warn!("ablation {a} ignores some supplied conditions");
    }
    let plan: Vec<usize> = (0..rows.len()).flat_map(|r| std::iter::repeat_n(r, n_per)).collect();
    let mut out = Vec::with_capacity(plan.len());
    for chunk in plan.chunks(SAMPLE_BATCH) {
        let text_batch = match &text {
            Some(t) => {
                let picked: Vec<(&Tensor, &[u8])> = chunk.iter().map(|&r| (&t[r].0, t[r].1.as_slice())).collect();
                Some(TextBatch::stack(&picked)?)
            }
            None => None,
        };
        let omics_batch = omics.as_ref().map(|o| crate::util::select_rows(o, chunk));
        let cond = Conditions { batch: chunk.len(), text: text_batch, omics: omics_batch };
        for (s, &r) in model.sample(&cond, rng)?.into_iter().zip(chunk) {
            out.push(decode_sample(vocab, r, s.indices, s.noise_error)?);
        }
    }
    Ok(out)
}

pub fn decode_sample(vocab: &SelfiesVocabulary, condition: usize, indices: Vec<u32>, noise_error: f64) -> Result<GeneratedSample> {
    let tokens = vocab.decode_indices(&indices)?;
    let graph = decode_to_graph(&tokens);
    let smiles = if graph.is_empty() { String::new() } else { graph_to_smiles(&graph)? };
    Ok(GeneratedSample {
        condition,
        selfies: tokens_to_string(&tokens),
        smiles,
        indices,
        noise_error,
        valid: is_valid(&graph),
        graph,
    })
}

/// Hit ratio of samples against the descriptions of their condition rows.
pub fn hit_ratio_for(rows: &[ConditionRow], samples: &[GeneratedSample]) -> Result<HitRatioReport> {
    let matches: Vec<bool> = samples
        .iter()
        .map(|s| {
            let d = rows[s.condition].description.as_deref().unwrap_or("");
            description_match(d, &s.graph)
        })
        .collect();
    let errors: Vec<f64> = samples.iter().map(|s| s.noise_error).collect();
    hit_ratio(&matches, &errors)
}

/// Full metric battery for samples paired with their condition rows'
/// references.
pub fn evaluate_samples(
    rows: &[ConditionRow],
    samples: &[GeneratedSample],
    train: &[TextOmicsRecord],
) -> Result<MetricReport> {
    let mut references = Vec::new();
    let mut ref_of = vec![None; rows.len()];
    for (i, r) in rows.iter().enumerate() {
        if let Some(s) = &r.reference {
            ref_of[i] = Some(references.len());
            references.push(Reference { selfies: s.clone(), graph: selfies_to_graph(s)? });
        }
    }
    let generated: Vec<Generated> = samples
        .iter()
        .map(|s| Generated { selfies: s.selfies.clone(), graph: s.graph.clone(), reference: ref_of[s.condition] })
        .collect();
    let keys = train_keys(train)?;
    evaluate(&generated, &references, &keys)
}

pub fn train_keys(train: &[TextOmicsRecord]) -> Result<HashSet<String>> {
    train.iter().map(|r| Ok(canonical_key(&selfies_to_graph(&r.selfies)?))).collect()
}

/// One trained-and-sampled diffusion run.
#[derive(Clone, Debug)]
pub struct DiffusionRun {
    pub model: DiffusionModel,
    pub log: Vec<f64>,
    pub samples: Vec<GeneratedSample>,
    pub metrics: MetricReport,
    pub hit: HitRatioReport,
}

/// Trains a diffusion model on `train` and evaluates it on the held-out
/// conditions, one sample per row.
pub fn run_diffusion(
    cfg: &Resolved,
    corpus: &Corpus,
    train: &[TextOmicsRecord],
    held_out: &[TextOmicsRecord],
    up: &Upstream,
) -> Result<DiffusionRun> {
    let (model, log) = train_diffusion(cfg, train, &corpus.selfies_vocab, up)?;
    let rows: Vec<ConditionRow> = held_out.iter().map(ConditionRow::from).collect();
    let mut rng = stage_rng(cfg.seed, Stage::Sampling);
    let samples = generate(&model, &corpus.selfies_vocab, up, &rows, 1, &mut rng)?;
    let metrics = evaluate_samples(&rows, &samples, train)?;
    let hit = hit_ratio_for(&rows, &samples)?;
    info!(
        "{} run: final loss {:.4}, validity {:.3}, hit ratio {:.3}",
        model.config.ablation,
        log.last().copied().unwrap_or(f64::NAN),
        metrics.validity,
        hit.ratio
    );
    Ok(DiffusionRun { model, log, samples, metrics, hit })
}

/// Trains whichever upstream encoders the ablations need.
pub fn train_upstream(cfg: &Resolved, corpus: &Corpus, train: &[TextOmicsRecord], ablations: &[Ablation]) -> Result<Upstream> {
    let mut up = Upstream::default();
    if ablations.iter().any(|a| a.uses_omics()) {
        up.omics = Some(train_omics(cfg, train)?.0);
    }
    if ablations.iter().any(|a| a.uses_text()) {
        up.text = Some(train_text(cfg, train, &corpus.text_vocab)?.0);
    }
    Ok(up)
}

/// Report header: a label column, the metric columns, then the hit ratio.
pub fn report_header(label: &str) -> String {
    let mut cols = vec![label.to_string()];
    cols.extend(METRIC_COLUMNS.iter().map(|c| c.to_string()));
    cols.push("hit_ratio".into());
    cols.join(",")
}

pub fn report_row(label: &str, m: &MetricReport, hit: f64) -> String {
    let mut s = label.to_string();
    for v in m.values() {
        match v {
            Some(x) => {
                let _ = write!(s, ",{x:.6}");
            }
            None => s.push(','),
        }
    }
    let _ = write!(s, ",{hit:.6}");
    s
}

/// Loss log as CSV with an epoch column.
pub fn loss_csv(log: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, v) in log.iter().enumerate() {
        let _ = writeln!(s, "{},{v:.8}", i + 1);
    }
    s
}

#[derive(Serialize, Deserialize)]
struct OmicsMeta {
    config: VaeConfig,
}

#[derive(Serialize, Deserialize)]
struct TextMeta {
    config: TextConfig,
    vocab: String,
}

#[derive(Serialize, Deserialize)]
struct DiffusionMeta {
    config: DiffusionConfig,
    selfies_vocab: String,
}

fn meta_json<T: Serialize>(m: &T) -> String {
    serde_json::to_string(m).expect("metadata serializes")
}

fn parse_meta<T: for<'de> Deserialize<'de>>(c: &Checkpoint) -> Result<T> {
    serde_json::from_str(&c.meta).map_err(|e| Error::Checkpoint(format!("{} metadata: {e}", c.tag)))
}

pub fn omics_checkpoint(vae: &OmicsVae) -> Checkpoint {
    Checkpoint::new(OMICS_TAG, meta_json(&OmicsMeta { config: vae.config.clone() }), vae.params.clone())
}

pub fn omics_from_checkpoint(c: &Checkpoint) -> Result<OmicsVae> {
    let m: OmicsMeta = parse_meta(c)?;
    OmicsVae::from_params(m.config, c.params.clone())
}

pub fn text_checkpoint(enc: &TextEncoder) -> Checkpoint {
    let meta = TextMeta { config: enc.config.clone(), vocab: enc.vocab.to_text() };
    Checkpoint::new(TEXT_TAG, meta_json(&meta), enc.params.clone())
}

/// Text encoders always load frozen.
pub fn text_from_checkpoint(c: &Checkpoint) -> Result<TextEncoder> {
    let m: TextMeta = parse_meta(c)?;
    TextEncoder::from_params(m.config, TextVocabulary::from_text(&m.vocab)?, c.params.clone(), true)
}

pub fn diffusion_checkpoint(model: &DiffusionModel, vocab: &SelfiesVocabulary) -> Checkpoint {
    let meta = DiffusionMeta { config: model.config.clone(), selfies_vocab: vocab.to_text() };
    Checkpoint::new(DIFFUSION_TAG, meta_json(&meta), model.params.clone())
}

pub fn diffusion_from_checkpoint(c: &Checkpoint) -> Result<(DiffusionModel, SelfiesVocabulary)> {
    let m: DiffusionMeta = parse_meta(c)?;
    let vocab = SelfiesVocabulary::from_text(&m.selfies_vocab)?;
    let model = DiffusionModel::from_params(m.config, c.params.clone())?;
    if model.vocab_size != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "embedding table has {} rows but the stored vocabulary {}",
            model.vocab_size,
            vocab.len()
        )));
    }
    Ok((model, vocab))
}
