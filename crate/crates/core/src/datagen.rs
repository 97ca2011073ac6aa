//! Synthetic text-omics corpus with planted structure, plus JSONL ingestion
//! for externally supplied corpora of the same schema.
//!
//! Each record binds one molecule (canonical SELFIES), a templated
//! description naming exactly its functional groups, and an omics profile
//! `W · features + noise` standardized over the corpus.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::eval::{descriptors, functional_groups, is_valid, morgan_fingerprint, FunctionalGroup};
use crate::selfies::{
    canonical_selfies, decode_symbols, selfies_to_graph, tokenize, Element, MoleculeGraph, SelfiesVocabulary, Symbol,
};
use crate::text::{normalize, TextVocabulary};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
/// Folded Morgan dimensions appended to the group indicators.
pub const FOLD_DIMS: usize = 16;
/// Feature width `F` of the planted map.
pub const FEATURES: usize = FunctionalGroup::ALL.len() + FOLD_DIMS;
/// Cap on any column norm of `W`.
pub const MAX_COLUMN_NORM: f32 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub n: usize,
    pub seed: u64,
    /// Profile width.
    #[serde(rename = "K")]
    pub genes: usize,
    /// Heavy-atom cap per molecule.
    pub max_atoms: usize,
    /// Molecules whose canonical SELFIES is longer are redrawn.
    pub max_tokens: usize,
    pub noise_sigma: f32,
    pub selfies_merges: usize,
    pub text_vocab_cap: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            n: 2000,
            seed: 7,
            genes: 978,
            max_atoms: 16,
            max_tokens: 40,
            noise_sigma: 0.3,
            selfies_merges: 50,
            text_vocab_cap: 2048,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.genes < FunctionalGroup::ALL.len() {
            return bad(format!("K must be at least {}, got {}", FunctionalGroup::ALL.len(), self.genes));
        }
        if self.max_atoms == 0 {
            return bad("max_atoms must be at least 1".into());
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

/// One corpus line. Field order is the serialized order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextOmicsRecord {
    pub id: String,
    pub selfies: String,
    pub description: String,
    pub omics: Vec<f32>,
}

/// Relative frequencies of walk symbols. Atoms attached by single bonds
/// dominate so random walks look like small organic molecules.
fn symbol_weight(s: &Symbol) -> u32 {
    match *s {
        Symbol::Atom { element, bond } => {
            let base = match element {
                Element::C => 60,
                Element::N | Element::O => 10,
                Element::S | Element::F | Element::Cl => 2,
                Element::P | Element::Br | Element::I | Element::B => 1,
            };
            match bond {
                1 => base * 4,
                2 => base,
                _ => base / 4,
            }
        }
        Symbol::Branch { size: 1, .. } => 12,
        Symbol::Ring { size: 1, .. } => 8,
        _ => 1,
    }
}

fn walk<R: Rng + ?Sized>(rng: &mut R, max_atoms: usize, alphabet: &[(Symbol, u32)]) -> MoleculeGraph {
    let target = rng.random_range(1..=max_atoms.max(1));
    let atoms: Vec<&(Symbol, u32)> = alphabet.iter().filter(|(s, _)| matches!(s, Symbol::Atom { .. })).collect();
    let first = atoms.choose_weighted(rng, |e| e.1).expect("non-empty alphabet").0;
    let mut symbols = vec![first];
    let mut placed = 1;
    while placed < target {
        let s = alphabet.choose_weighted(rng, |e| e.1).expect("non-empty alphabet").0;
        if matches!(s, Symbol::Atom { .. }) {
            placed += 1;
        }
        symbols.push(s);
    }
    decode_symbols(&symbols)
}

/// Random SELFIES token walk decoded to a graph. The walk places a uniform
/// number of atom symbols in `1..=max_atoms`, interleaved with branch and
/// ring symbols; the grammar makes every outcome valid, and index symbols
/// consumed by branches and rings only lower the atom count.
pub fn random_molecule<R: Rng + ?Sized>(rng: &mut R, max_atoms: usize) -> MoleculeGraph {
    let alphabet: Vec<(Symbol, u32)> = Symbol::alphabet().into_iter().map(|s| (s, symbol_weight(&s))).collect();
    walk(rng, max_atoms, &alphabet)
}

/// All-carbon walk used as the corpus scaffold.
fn carbon_scaffold<R: Rng + ?Sized>(rng: &mut R, max_atoms: usize) -> MoleculeGraph {
    let alphabet: Vec<(Symbol, u32)> = Symbol::alphabet()
        .into_iter()
        .filter(|s| match *s {
            Symbol::Atom { element, bond } => element == Element::C && bond < 3,
            Symbol::Branch { order, size } | Symbol::Ring { order, size } => order == 1 && size == 1,
        })
        .map(|s| (s, symbol_weight(&s)))
        .collect();
    walk(rng, max_atoms, &alphabet)
}

/// Atoms and internal bonds of a planted fragment; atom 0 attaches.
fn fragment(group: FunctionalGroup, halogen: Element) -> (Vec<Element>, Vec<(usize, usize, u8)>) {
    use Element::{C, N, O};
    match group {
        FunctionalGroup::Hydroxy => (vec![O], vec![]),
        FunctionalGroup::Ether => (vec![O, C], vec![(0, 1, 1)]),
        FunctionalGroup::CarboxylicAcid => (vec![C, O, O], vec![(0, 1, 2), (0, 2, 1)]),
        FunctionalGroup::Ester => (vec![C, O, O, C], vec![(0, 1, 2), (0, 2, 1), (2, 3, 1)]),
        FunctionalGroup::Amide => (vec![C, O, N], vec![(0, 1, 2), (0, 2, 1)]),
        FunctionalGroup::Amine => (vec![N], vec![]),
        FunctionalGroup::Halide => (vec![halogen], vec![]),
        FunctionalGroup::AromaticRing => {
            (vec![C; 6], vec![(0, 1, 2), (1, 2, 1), (2, 3, 2), (3, 4, 1), (4, 5, 2), (5, 0, 1)])
        }
    }
}

/// Corpus molecule: a carbon scaffold carrying zero to two planted group
/// fragments. Groups are read back from the finished graph, so accidental
/// patterns are described too.
pub fn planted_molecule<R: Rng + ?Sized>(rng: &mut R, max_atoms: usize) -> MoleculeGraph {
    let count = *[0usize, 1, 1, 2, 2].choose(rng).expect("non-empty");
    let mut groups = FunctionalGroup::ALL.to_vec();
    groups.shuffle(rng);
    let halogen = *[Element::F, Element::Cl, Element::Br].choose(rng).expect("non-empty");
    let mut chosen = Vec::new();
    let mut budget = max_atoms;
    for g in groups.into_iter().take(count) {
        let size = fragment(g, halogen).0.len();
        if size < budget {
            budget -= size;
            chosen.push(g);
        }
    }
    let mut mol = carbon_scaffold(rng, budget.max(1));
    let scaffold = mol.atom_count();
    for g in chosen {
        let open: Vec<usize> = (0..scaffold)
            .filter(|&i| mol.atom(i).element == Element::C && mol.bond_order_sum(i) < Element::C.max_valence())
            .collect();
        let Some(&site) = open.choose(rng) else { break };
        let (atoms, bonds) = fragment(g, halogen);
        let base = mol.atom_count();
        for e in atoms {
            mol.add_atom(e);
        }
        for (a, b, o) in bonds {
            mol.add_bond(base + a, base + b, o).expect("fragment bonds are valid");
        }
        mol.add_bond(site, base, 1).expect("site has a free valence");
    }
    mol.assign_hydrogens();
    mol
}

fn with_article(phrase: &str) -> String {
    let article = if phrase.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { "a" };
    if phrase.ends_with("ring") {
        format!("{article} {phrase}")
    } else {
        format!("{article} {phrase} group")
    }
}

/// Template description naming exactly the listed groups present.
pub fn describe(g: &MoleculeGraph) -> String {
    let groups = functional_groups(g);
    let parts: Vec<String> = groups.iter().map(|f| with_article(f.phrase())).collect();
    let list = match parts.as_slice() {
        [] => "no listed functional groups".to_string(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    };
    let d = descriptors(g);
    format!("The molecule contains {list}. It has {} rings and {} aromatic rings.", d.n_ring, d.n_aromatic)
}

/// Group indicators followed by folded Morgan bits.
pub fn features(g: &MoleculeGraph) -> Vec<f32> {
    let mut f = vec![0.0f32; FEATURES];
    for grp in functional_groups(g) {
        f[grp.index()] = 1.0;
    }
    if let Ok(fp) = morgan_fingerprint(g) {
        for b in fp.bits() {
            f[FunctionalGroup::ALL.len() + b % FOLD_DIMS] = 1.0;
        }
    }
    f
}

/// Linear map from molecular features to gene expression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedMap {
    pub genes: usize,
    /// Row-major `[genes, FEATURES]`.
    pub weights: Vec<f32>,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl PlantedMap {
    /// Group `f` drives its own block of genes `[f*B, (f+1)*B)` with
    /// `B = max(1, K/16)`; fingerprint columns spread small random weights
    /// over every gene. Column norms stay at most `MAX_COLUMN_NORM`.
    pub fn new(genes: usize, noise_sigma: f32, seed: u64) -> Result<Self> {
        let groups = FunctionalGroup::ALL.len();
        if genes < groups {
            return Err(Error::Input(format!("planted map needs at least {groups} genes, got {genes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let block = (genes / (2 * groups)).max(1);
        let amp = 0.6f32.min(0.97 * MAX_COLUMN_NORM / (block as f32).sqrt());
        let mut weights = vec![0.0f32; genes * FEATURES];
        for f in 0..groups {
            for k in f * block..(f + 1) * block {
                weights[k * FEATURES + f] = amp;
            }
        }
        for f in groups..FEATURES {
            for k in 0..genes {
                let z: f32 = StandardNormal.sample(&mut rng);
                weights[k * FEATURES + f] = 0.05 * z;
            }
            let norm = (0..genes).map(|k| weights[k * FEATURES + f].powi(2)).sum::<f32>().sqrt();
            if norm > MAX_COLUMN_NORM {
                for k in 0..genes {
                    weights[k * FEATURES + f] *= MAX_COLUMN_NORM / norm;
                }
            }
        }
        Ok(PlantedMap { genes, weights, noise_sigma, seed })
    }

    pub fn block_size(&self) -> usize {
        (self.genes / (2 * FunctionalGroup::ALL.len())).max(1)
    }

    /// Genes driven by one group indicator.
    pub fn block(&self, group: FunctionalGroup) -> std::ops::Range<usize> {
        let b = self.block_size();
        group.index() * b..(group.index() + 1) * b
    }

    pub fn column_norm(&self, f: usize) -> f32 {
        (0..self.genes).map(|k| self.weights[k * FEATURES + f].powi(2)).sum::<f32>().sqrt()
    }
}

/// Unstandardized profile `W · features(g) + sigma · eta`.
pub fn plant_omics<R: Rng + ?Sized>(g: &MoleculeGraph, map: &PlantedMap, rng: &mut R) -> Vec<f32> {
    let x = features(g);
    (0..map.genes)
        .map(|k| {
            let row = &map.weights[k * FEATURES..(k + 1) * FEATURES];
            let signal: f32 = row.iter().zip(&x).map(|(w, v)| w * v).sum();
            let eta: f32 = StandardNormal.sample(rng);
            signal + map.noise_sigma * eta
        })
        .collect()
}

/// Per-gene z-scores over the corpus; constant genes are only centered.
pub fn standardize(profiles: &mut [Vec<f32>]) {
    let Some(k) = profiles.first().map(Vec::len) else { return };
    let n = profiles.len() as f64;
    for j in 0..k {
        let mean = profiles.iter().map(|p| p[j] as f64).sum::<f64>() / n;
        let var = profiles.iter().map(|p| (p[j] as f64 - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 1e-12 { var.sqrt() } else { 1.0 };
        for p in profiles.iter_mut() {
            p[j] = ((p[j] as f64 - mean) / sd) as f32;
        }
    }
}

/// Table-1 style dataset statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub mean_selfies_len: f64,
    pub omics_dim: usize,
    pub omics_variance: f64,
    pub mean_text_len: f64,
    pub mol_weight: f64,
    pub n_ring: f64,
    pub n_aromatic: f64,
}

impl CorpusStats {
    pub const COLUMNS: [&'static str; 8] =
        ["count", "mean_selfies_len", "omics_dim", "omics_variance", "mean_text_len", "mol_weight", "n_ring", "n_aromatic"];

    pub fn compute(records: &[TextOmicsRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Input("statistics of an empty corpus".into()));
        }
        let n = records.len() as f64;
        let mut selfies_len = 0.0;
        let (mut mw, mut ring, mut arom) = (0.0, 0.0, 0.0);
        for r in records {
            selfies_len += tokenize(&r.selfies)?.len() as f64;
            let d = descriptors(&selfies_to_graph(&r.selfies)?);
            mw += d.mol_weight;
            ring += d.n_ring as f64;
            arom += d.n_aromatic as f64;
        }
        let k = records[0].omics.len();
        let mut var = 0.0;
        for j in 0..k {
            let mean = records.iter().map(|r| r.omics[j] as f64).sum::<f64>() / n;
            var += records.iter().map(|r| (r.omics[j] as f64 - mean).powi(2)).sum::<f64>() / n;
        }
        Ok(CorpusStats {
            count: records.len(),
            mean_selfies_len: selfies_len / n,
            omics_dim: k,
            omics_variance: if k > 0 { var / k as f64 } else { 0.0 },
            mean_text_len: records.iter().map(|r| normalize(&r.description).len() as f64).sum::<f64>() / n,
            mol_weight: mw / n,
            n_ring: ring / n,
            n_aromatic: arom / n,
        })
    }
}

/// Contents of the stats sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub schema_version: u32,
    pub stats: CorpusStats,
    /// Records describing each group, keyed by group name.
    pub group_counts: BTreeMap<String, usize>,
}

/// File names inside a corpus directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusFiles {
    pub corpus: PathBuf,
    pub stats: PathBuf,
    pub selfies_vocab: PathBuf,
    pub text_vocab: PathBuf,
}

impl CorpusFiles {
    pub fn in_dir(dir: &Path) -> Self {
        CorpusFiles {
            corpus: dir.join("corpus.jsonl"),
            stats: dir.join("stats.json"),
            selfies_vocab: dir.join("selfies_vocab.txt"),
            text_vocab: dir.join("text_vocab.txt"),
        }
    }
}

/// Record stream for index `i`: stream 0 belongs to the planted map.
fn record_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

/// Builds records in memory. Each record draws from its own stream, so the
/// result does not depend on generation order.
pub fn generate_records(config: &DatagenConfig) -> Result<Vec<TextOmicsRecord>> {
    config.validate()?;
    let map = PlantedMap::new(config.genes, config.noise_sigma, config.seed)?;
    let mut rows = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let mut rng = record_rng(config.seed, i);
        let (selfies, graph) = loop {
            let g = planted_molecule(&mut rng, config.max_atoms);
            let s = canonical_selfies(&g)?;
            let decoded = selfies_to_graph(&s)?;
            if is_valid(&decoded) && tokenize(&s)?.len() <= config.max_tokens {
                break (s, decoded);
            }
        };
        let omics = plant_omics(&graph, &map, &mut rng);
        rows.push((selfies, describe(&graph), omics));
    }
    let mut profiles: Vec<Vec<f32>> = rows.iter_mut().map(|r| std::mem::take(&mut r.2)).collect();
    standardize(&mut profiles);
    Ok(rows
        .into_iter()
        .zip(profiles)
        .enumerate()
        .map(|(i, ((selfies, description, _), omics))| TextOmicsRecord {
            id: format!("rec-{i:06}"),
            selfies,
            description,
            omics,
        })
        .collect())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents).map_err(|e| Error::io(path, e))
}

pub fn write_corpus(path: &Path, records: &[TextOmicsRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Input(e.to_string()))?;
        out.push(b'\n');
    }
    write_file(path, &out)
}

/// Writes the corpus, stats sidecar and both vocabularies into `dir`.
pub fn generate_corpus(config: &DatagenConfig, dir: &Path) -> Result<CorpusFiles> {
    let records = generate_records(config)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = CorpusFiles::in_dir(dir);
    write_corpus(&files.corpus, &records)?;

    let mut group_counts: BTreeMap<String, usize> =
        FunctionalGroup::ALL.iter().map(|g| (g.name().to_string(), 0)).collect();
    for r in &records {
        for g in crate::eval::groups_in_text(&r.description) {
            *group_counts.get_mut(g.name()).expect("listed group") += 1;
        }
    }
    let stats = StatsFile { schema_version: SCHEMA_VERSION, stats: CorpusStats::compute(&records)?, group_counts };
    let json = serde_json::to_string_pretty(&stats).map_err(|e| Error::Input(e.to_string()))?;
    write_file(&files.stats, format!("{json}\n").as_bytes())?;

    let tokens = records.iter().map(|r| tokenize(&r.selfies)).collect::<std::result::Result<Vec<_>, _>>()?;
    let selfies_vocab = SelfiesVocabulary::learn(&tokens, config.selfies_merges);
    write_file(&files.selfies_vocab, selfies_vocab.to_text().as_bytes())?;
    let descriptions: Vec<&str> = records.iter().map(|r| r.description.as_str()).collect();
    let text_vocab = TextVocabulary::build(&descriptions, config.text_vocab_cap)?;
    write_file(&files.text_vocab, text_vocab.to_text().as_bytes())?;
    Ok(files)
}

/// Reads and validates a JSONL corpus. Blank lines are skipped; every other
/// line must be a record with a decodable SELFIES string, a non-empty
/// description, finite omics of one common width and a unique id.
pub fn load_corpus(path: &Path) -> Result<Vec<TextOmicsRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let shown = path.display().to_string();
    let fail = |line: usize, message: String| Error::Data { path: shown.clone(), line, message };
    let mut records: Vec<TextOmicsRecord> = Vec::new();
    let mut ids = HashSet::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line_no = k + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TextOmicsRecord = serde_json::from_str(&line).map_err(|e| fail(line_no, e.to_string()))?;
        let g = selfies_to_graph(&r.selfies).map_err(|e| fail(line_no, e.to_string()))?;
        if !is_valid(&g) {
            return Err(fail(line_no, format!("selfies {:?} does not decode to a valid molecule", r.selfies)));
        }
        if r.description.trim().is_empty() {
            return Err(fail(line_no, "empty description".into()));
        }
        if r.omics.is_empty() || r.omics.iter().any(|v| !v.is_finite()) {
            return Err(fail(line_no, "omics must be a non-empty array of finite numbers".into()));
        }
        if let Some(first) = records.first() {
            if first.omics.len() != r.omics.len() {
                return Err(fail(line_no, format!("omics width {} differs from {}", r.omics.len(), first.omics.len())));
            }
        }
        if !ids.insert(r.id.clone()) {
            return Err(fail(line_no, format!("duplicate id {:?}", r.id)));
        }
        records.push(r);
    }
    if records.is_empty() {
        return Err(fail(0, "corpus has no records".into()));
    }
    Ok(records)
}

pub fn load_stats(path: &Path) -> Result<StatsFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stats: StatsFile = serde_json::from_str(&text)
        .map_err(|e| Error::Data { path: path.display().to_string(), line: e.line(), message: e.to_string() })?;
    if stats.schema_version != SCHEMA_VERSION {
        return Err(Error::Input(format!(
            "{}: schema version {} is not supported (expected {SCHEMA_VERSION})",
            path.display(),
            stats.schema_version
        )));
    }
    Ok(stats)
}
