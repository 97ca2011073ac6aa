use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use todi::checkpoint::Checkpoint;
use todi::config::{Resolved, RunConfig};
use todi::datagen::{generate_corpus, load_corpus};
use todi::diffusion::Ablation;
use todi::eval::{
    description_match, evaluate, groups_in_text, hit_ratio, pca_export, folded_morgan_embedding, FunctionalGroup,
    Generated, HitRatioReport, MetricReport, Reference,
};
use todi::pipeline::{self as pl, ConditionRow, Corpus, GeneratedSample, Stage, Upstream};
use todi::selfies::{canonical_key, selfies_to_graph, MoleculeGraph};
use todi::Error;

#[derive(Parser)]
#[command(name = "todi", version, about = "Text- and omics-conditioned molecule diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; the bundled desk config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a planted synthetic corpus.
    Datagen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Trains the omics VAE.
    TrainOmics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "omics.ckpt")]
        out: PathBuf,
    },
    /// Trains the masked-language text encoder.
    TrainText {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "text.ckpt")]
        out: PathBuf,
    },
    /// Trains the diffusion model on top of frozen encoders.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        omics: Option<PathBuf>,
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long, default_value = "diffusion.ckpt")]
        out: PathBuf,
    },
    /// Runs the three training stages in order, then evaluates on the
    /// held-out tail.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Samples molecules for each row of a conditions file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        omics: Option<PathBuf>,
        #[arg(long)]
        text: Option<PathBuf>,
        /// JSONL rows with `description`, `omics`, optional `id` and `reference`.
        #[arg(long)]
        conditions: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "generated.jsonl")]
        out: PathBuf,
    },
    /// Scores generated molecules against references.
    Evaluate {
        /// Output of `generate`, or any JSONL with a `selfies` field per line.
        #[arg(long)]
        generated: PathBuf,
        /// Corpus or conditions file; generated samples pair with its rows.
        #[arg(long)]
        references: PathBuf,
        /// Training corpus for novelty; the references when omitted.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value = "report")]
        out_dir: PathBuf,
        /// Also write a 2-D PCA of generated vs reference fingerprints.
        #[arg(long)]
        pca: bool,
    },
    /// Trains and scores one full model per alignment weight.
    LambdaSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,0.5,0.7,0.9,1.0")]
        grid: Vec<f32>,
        #[arg(long, default_value = "sweep")]
        out_dir: PathBuf,
    },
    /// Trains and scores each conditioning variant.
    Ablations {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full,no-text,no-omics")]
        variants: Vec<Ablation>,
        #[arg(long, default_value = "ablations")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::MissingArtifact(_)) => 3,
        Some(Error::ConditionMismatch(_)) => 4,
        Some(err) if err.is_numeric() => 5,
        _ => 1,
    }
}

fn resolve(c: &Common) -> anyhow::Result<Resolved> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    Ok(cfg.resolve()?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `model.ckpt` -> `model_loss.csv`.
fn loss_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    ckpt.with_file_name(format!("{stem}_loss.csv"))
}

fn save(ckpt: &Checkpoint, path: &Path, log: &[f64]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ckpt.save(path)?;
    write(&loss_path(path), pl::loss_csv(log))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn load_upstream(omics: Option<&Path>, text: Option<&Path>, ablation: Ablation) -> anyhow::Result<Upstream> {
    let mut up = Upstream::default();
    if ablation.uses_omics() {
        let p = omics.ok_or_else(|| Error::MissingArtifact(format!("ablation {ablation} needs an omics checkpoint (--omics)")))?;
        up.omics = Some(pl::omics_from_checkpoint(&Checkpoint::load_tagged(p, pl::OMICS_TAG)?)?);
    }
    if ablation.uses_text() {
        let p = text.ok_or_else(|| Error::MissingArtifact(format!("ablation {ablation} needs a text checkpoint (--text)")))?;
        up.text = Some(pl::text_from_checkpoint(&Checkpoint::load_tagged(p, pl::TEXT_TAG)?)?);
    }
    Ok(up)
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Datagen { common, n, out } => {
            let mut cfg = resolve(&common)?;
            if let Some(n) = n {
                cfg.datagen.n = n;
            }
            let files = generate_corpus(&cfg.datagen, &out)?;
            info!("wrote {}", files.corpus.display());
        }
        Command::TrainOmics { common, corpus, out } => {
            let cfg = resolve(&common)?;
            let corpus = Corpus::load(&corpus, &cfg)?;
            let (train, _) = corpus.split(cfg.eval.held_out)?;
            let (vae, log) = pl::train_omics(&cfg, train)?;
            save(&pl::omics_checkpoint(&vae), &out, &log)?;
        }
        Command::TrainText { common, corpus, out } => {
            let cfg = resolve(&common)?;
            let corpus = Corpus::load(&corpus, &cfg)?;
            let (train, _) = corpus.split(cfg.eval.held_out)?;
            let (enc, log) = pl::train_text(&cfg, train, &corpus.text_vocab)?;
            save(&pl::text_checkpoint(&enc), &out, &log)?;
        }
        Command::TrainDiffusion { common, corpus, omics, text, ablation, out } => {
            let mut cfg = resolve(&common)?;
            if let Some(a) = ablation {
                cfg.diffusion.ablation = a;
            }
            let up = load_upstream(omics.as_deref(), text.as_deref(), cfg.diffusion.ablation)?;
            let corpus = Corpus::load(&corpus, &cfg)?;
            let (train, _) = corpus.split(cfg.eval.held_out)?;
            let (model, log) = pl::train_diffusion(&cfg, train, &corpus.selfies_vocab, &up)?;
            save(&pl::diffusion_checkpoint(&model, &corpus.selfies_vocab), &out, &log)?;
        }
        Command::Pipeline { common, corpus, out_dir } => {
            let cfg = resolve(&common)?;
            let corpus = Corpus::load(&corpus, &cfg)?;
            let (train, held_out) = corpus.split(cfg.eval.held_out)?;
            let a = cfg.diffusion.ablation;
            let mut up = Upstream::default();
            if a.uses_omics() {
                let (vae, log) = pl::train_omics(&cfg, train)?;
                save(&pl::omics_checkpoint(&vae), &out_dir.join("omics.ckpt"), &log)?;
                up.omics = Some(vae);
            }
            if a.uses_text() {
                let (enc, log) = pl::train_text(&cfg, train, &corpus.text_vocab)?;
                save(&pl::text_checkpoint(&enc), &out_dir.join("text.ckpt"), &log)?;
                up.text = Some(enc);
            }
            let r = pl::run_diffusion(&cfg, &corpus, train, held_out, &up)?;
            save(&pl::diffusion_checkpoint(&r.model, &corpus.selfies_vocab), &out_dir.join("diffusion.ckpt"), &r.log)?;
            let rows: Vec<ConditionRow> = held_out.iter().map(ConditionRow::from).collect();
            write(&out_dir.join("generated.jsonl"), generated_jsonl(&rows, &r.samples, 1)?)?;
            write_report(&out_dir.join("report"), "model", &[(a.name().to_string(), r.metrics, Some(r.hit))])?;
        }
        Command::Generate { checkpoint, omics, text, conditions, n, seed, out } => {
            if n == 0 {
                bail!(Error::Config("--n must be at least 1".into()));
            }
            let (model, vocab) = pl::diffusion_from_checkpoint(&Checkpoint::load_tagged(&checkpoint, pl::DIFFUSION_TAG)?)?;
            let up = load_upstream(omics.as_deref(), text.as_deref(), model.config.ablation)?;
            let rows = pl::load_conditions(&conditions)?;
            let mut rng = pl::stage_rng(seed, Stage::Sampling);
            let samples = pl::generate(&model, &vocab, &up, &rows, n, &mut rng)?;
            write(&out, generated_jsonl(&rows, &samples, n)?)?;
            let valid = samples.iter().filter(|s| s.valid).count();
            info!("wrote {} samples ({valid} valid) to {}", samples.len(), out.display());
        }
        Command::Evaluate { generated, references, train, out_dir, pca } => {
            let gen = load_generated(&generated)?;
            let refs = load_references(&references)?;
            let train_keys = match &train {
                Some(p) => pl::train_keys(&load_corpus(p)?)?,
                None => refs.iter().map(|r| canonical_key(&r.graph)).collect(),
            };
            let paired: Vec<Generated> = gen
                .iter()
                .map(|g| Generated { selfies: g.selfies.clone(), graph: g.graph.clone(), reference: g.condition.filter(|&c| c < refs.len()) })
                .collect();
            let references: Vec<Reference> = refs.iter().map(|r| Reference { selfies: r.selfies.clone(), graph: r.graph.clone() }).collect();
            let metrics = evaluate(&paired, &references, &train_keys)?;
            let hit = hit_report(&gen, &refs)?;
            write_report(&out_dir.join("report"), "set", &[("generated".into(), metrics, hit.clone())])?;
            if let Some(h) = &hit {
                write(&out_dir.join("hit_by_group.csv"), hit_by_group(&gen, &refs, h))?;
            }
            if pca {
                let emb = |gs: Vec<&MoleculeGraph>| gs.into_iter().map(folded_morgan_embedding).collect::<todi::Result<Vec<_>>>();
                let p = pca_export(&emb(refs.iter().map(|r| &r.graph).collect())?, &emb(gen.iter().map(|g| &g.graph).collect())?, 2)?;
                write(&out_dir.join("pca.csv"), p.to_csv())?;
            }
        }
        Command::LambdaSweep { common, corpus, grid, out_dir } => {
            let base = resolve(&common)?;
            let corpus = Corpus::load(&corpus, &base)?;
            let (train, held_out) = corpus.split(base.eval.held_out)?;
            let up = pl::train_upstream(&base, &corpus, train, &[Ablation::Full])?;
            let mut rows = Vec::new();
            for lambda in grid {
                let mut cfg = base.clone();
                cfg.diffusion.ablation = Ablation::Full;
                cfg.diffusion.lambda = lambda;
                cfg.validate()?;
                let r = pl::run_diffusion(&cfg, &corpus, train, held_out, &up)?;
                write(&out_dir.join(format!("lambda_{lambda}_loss.csv")), pl::loss_csv(&r.log))?;
                rows.push((format!("{lambda}"), r.metrics, Some(r.hit)));
            }
            write_report(&out_dir.join("lambda_sweep"), "lambda", &rows)?;
        }
        Command::Ablations { common, corpus, variants, out_dir } => {
            let base = resolve(&common)?;
            let corpus = Corpus::load(&corpus, &base)?;
            let (train, held_out) = corpus.split(base.eval.held_out)?;
            let up = pl::train_upstream(&base, &corpus, train, &variants)?;
            let mut rows = Vec::new();
            for a in variants {
                let mut cfg = base.clone();
                cfg.diffusion.ablation = a;
                let r = pl::run_diffusion(&cfg, &corpus, train, held_out, &up)?;
                write(&out_dir.join(format!("{a}_loss.csv")), pl::loss_csv(&r.log))?;
                rows.push((a.name().to_string(), r.metrics, Some(r.hit)));
            }
            write_report(&out_dir.join("ablations"), "variant", &rows)?;
        }
    }
    Ok(())
}

/// One block per condition row.
#[derive(Serialize, Deserialize)]
struct OutputBlock {
    condition: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    samples: Vec<OutputSample>,
}

#[derive(Serialize, Deserialize)]
struct OutputSample {
    selfies: String,
    smiles: String,
    valid: bool,
    noise_error: f64,
    indices: Vec<u32>,
}

fn generated_jsonl(rows: &[ConditionRow], samples: &[GeneratedSample], n: usize) -> anyhow::Result<String> {
    let mut out = String::new();
    for (i, chunk) in samples.chunks(n).enumerate() {
        let block = OutputBlock {
            condition: i,
            id: rows[i].id.clone(),
            samples: chunk
                .iter()
                .map(|s| OutputSample {
                    selfies: s.selfies.clone(),
                    smiles: s.smiles.clone(),
                    valid: s.valid,
                    noise_error: s.noise_error,
                    indices: s.indices.clone(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&block)?);
        out.push('\n');
    }
    Ok(out)
}

struct GenRow {
    condition: Option<usize>,
    selfies: String,
    graph: MoleculeGraph,
    noise_error: Option<f64>,
}

#[derive(Deserialize)]
struct LooseRow {
    selfies: Option<String>,
    reference: Option<String>,
    description: Option<String>,
}

fn data_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Data { path: path.display().to_string(), line, message: message.into() }
}

fn jsonl_lines(path: &Path) -> anyhow::Result<Vec<(usize, serde_json::Value)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line).map_err(|e| data_err(path, k + 1, e.to_string()))?;
        out.push((k + 1, v));
    }
    if out.is_empty() {
        return Err(data_err(path, 0, "no rows").into());
    }
    Ok(out)
}

fn parse_graph(path: &Path, line: usize, s: &str) -> anyhow::Result<MoleculeGraph> {
    selfies_to_graph(s).map_err(|e| data_err(path, line, format!("bad SELFIES: {e}")).into())
}

/// Generate blocks pair with the reference row of their condition; plain
/// rows pair with the reference on the same line position.
fn load_generated(path: &Path) -> anyhow::Result<Vec<GenRow>> {
    let mut out = Vec::new();
    for (pos, (line, v)) in jsonl_lines(path)?.into_iter().enumerate() {
        if v.get("samples").is_some() {
            let b: OutputBlock = serde_json::from_value(v).map_err(|e| data_err(path, line, e.to_string()))?;
            for s in b.samples {
                let graph = parse_graph(path, line, &s.selfies)?;
                out.push(GenRow { condition: Some(b.condition), selfies: s.selfies, graph, noise_error: Some(s.noise_error) });
            }
        } else {
            let r: LooseRow = serde_json::from_value(v).map_err(|e| data_err(path, line, e.to_string()))?;
            let s = r.selfies.ok_or_else(|| data_err(path, line, "missing field `selfies`"))?;
            let graph = parse_graph(path, line, &s)?;
            out.push(GenRow { condition: Some(pos), selfies: s, graph, noise_error: None });
        }
    }
    Ok(out)
}

struct RefRow {
    selfies: String,
    graph: MoleculeGraph,
    description: Option<String>,
}

fn load_references(path: &Path) -> anyhow::Result<Vec<RefRow>> {
    jsonl_lines(path)?
        .into_iter()
        .map(|(line, v)| {
            let r: LooseRow = serde_json::from_value(v).map_err(|e| data_err(path, line, e.to_string()))?;
            let s = r
                .selfies
                .or(r.reference)
                .ok_or_else(|| data_err(path, line, "missing field `selfies` or `reference`"))?;
            let graph = parse_graph(path, line, &s)?;
            Ok(RefRow { selfies: s, graph, description: r.description })
        })
        .collect()
}

/// Hit ratio when every sample carries a noise error and its condition a
/// description.
fn hit_report(gen: &[GenRow], refs: &[RefRow]) -> anyhow::Result<Option<HitRatioReport>> {
    let mut matches = Vec::with_capacity(gen.len());
    let mut errors = Vec::with_capacity(gen.len());
    for g in gen {
        let desc = g.condition.and_then(|c| refs.get(c)).and_then(|r| r.description.as_deref());
        match (desc, g.noise_error) {
            (Some(d), Some(e)) => {
                matches.push(description_match(d, &g.graph));
                errors.push(e);
            }
            _ => return Ok(None),
        }
    }
    Ok(Some(hit_ratio(&matches, &errors)?))
}

/// Hit ratio per functional group named in the condition descriptions.
fn hit_by_group(gen: &[GenRow], refs: &[RefRow], hit: &HitRatioReport) -> String {
    let mut s = String::from("group,count,hit_ratio\n");
    for group in FunctionalGroup::ALL {
        let flags: Vec<bool> = gen
            .iter()
            .zip(&hit.flags)
            .filter(|(g, _)| {
                let d = g.condition.and_then(|c| refs.get(c)).and_then(|r| r.description.as_deref()).unwrap_or("");
                groups_in_text(d).contains(&group)
            })
            .map(|(_, &f)| f)
            .collect();
        if flags.is_empty() {
            continue;
        }
        let ratio = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
        s.push_str(&format!("{},{},{ratio:.6}\n", group.name(), flags.len()));
    }
    s
}

#[derive(Serialize)]
struct ReportRow<'a> {
    label: &'a str,
    metrics: &'a MetricReport,
    hit_ratio: Option<f64>,
    hit_threshold: Option<f64>,
}

/// `<prefix>.csv` and `<prefix>.json`.
fn write_report(prefix: &Path, label: &str, rows: &[(String, MetricReport, Option<HitRatioReport>)]) -> anyhow::Result<()> {
    let mut csv = pl::report_header(label);
    csv.push('\n');
    let mut json = Vec::new();
    for (name, m, h) in rows {
        csv.push_str(&pl::report_row(name, m, h.as_ref().map_or(f64::NAN, |r| r.ratio)));
        csv.push('\n');
        json.push(ReportRow {
            label: name,
            metrics: m,
            hit_ratio: h.as_ref().map(|r| r.ratio),
            hit_threshold: h.as_ref().map(|r| r.threshold),
        });
    }
    write(&prefix.with_extension("csv"), csv)?;
    write(&prefix.with_extension("json"), serde_json::to_string_pretty(&json).context("report serializes")?)?;
    info!("wrote {}", prefix.with_extension("csv").display());
    Ok(())
}
