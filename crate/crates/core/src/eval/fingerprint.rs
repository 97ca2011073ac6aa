//! Morgan (radius 2) and 32-key structural fingerprints with Tanimoto similarity.

use log::warn;
use serde::{Deserialize, Serialize};

use super::groups::{aromatic_ring_count, functional_group_match, simple_cycles, FunctionalGroup};
use crate::selfies::{Element, MoleculeGraph};
use crate::{Error, Result};

pub const MORGAN_BITS: usize = 2048;
pub const MORGAN_RADIUS: usize = 2;
pub const KEY_BITS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FingerprintKind {
    MorganR2,
    StructuralKeys,
}

impl FingerprintKind {
    pub fn width(self) -> usize {
        match self {
            FingerprintKind::MorganR2 => MORGAN_BITS,
            FingerprintKind::StructuralKeys => KEY_BITS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fingerprint {
    pub kind: FingerprintKind,
    words: Vec<u64>,
}

impl Fingerprint {
    pub fn empty(kind: FingerprintKind) -> Self {
        Fingerprint { kind, words: vec![0; kind.width().div_ceil(64)] }
    }

    pub fn from_bits(kind: FingerprintKind, bits: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut fp = Self::empty(kind);
        for b in bits {
            if b >= kind.width() {
                return Err(Error::Input(format!("bit {b} outside fingerprint width {}", kind.width())));
            }
            fp.set(b);
        }
        Ok(fp)
    }

    pub fn width(&self) -> usize {
        self.kind.width()
    }

    pub fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn bits(&self) -> Vec<usize> {
        (0..self.width()).filter(|&b| self.get(b)).collect()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the little-endian bytes of each word.
fn fnv1a(words: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    for w in words {
        for byte in w.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

fn element_code(e: Element) -> u64 {
    Element::ALL.iter().position(|&x| x == e).expect("listed element") as u64 + 1
}

fn require_atoms(g: &MoleculeGraph) -> Result<()> {
    if g.is_empty() {
        return Err(Error::Input("fingerprint of an empty molecule".into()));
    }
    Ok(())
}

/// Atom environment identifiers for radius 0 through `MORGAN_RADIUS`.
pub fn morgan_identifiers(g: &MoleculeGraph) -> Vec<Vec<u64>> {
    let n = g.atom_count();
    let mut ids: Vec<u64> = (0..n)
        .map(|i| {
            let a = g.atom(i);
            fnv1a(&[element_code(a.element), g.degree(i) as u64, a.charge as i64 as u64, a.implicit_h as u64])
        })
        .collect();
    let mut rounds = vec![ids.clone()];
    for round in 1..=MORGAN_RADIUS {
        ids = (0..n)
            .map(|i| {
                let mut env: Vec<(u64, u64)> = g.neighbors(i).iter().map(|&(w, o)| (o as u64, ids[w])).collect();
                env.sort_unstable();
                let mut words = vec![round as u64, ids[i]];
                for (o, id) in env {
                    words.push(o);
                    words.push(id);
                }
                fnv1a(&words)
            })
            .collect();
        rounds.push(ids.clone());
    }
    rounds
}

/// ECFP4-style bits: every environment identifier folded modulo 2048.
pub fn morgan_fingerprint(g: &MoleculeGraph) -> Result<Fingerprint> {
    require_atoms(g)?;
    let mut fp = Fingerprint::empty(FingerprintKind::MorganR2);
    for round in morgan_identifiers(g) {
        for id in round {
            fp.set((id % MORGAN_BITS as u64) as usize);
        }
    }
    Ok(fp)
}

/// Names of the 32 structural keys in bit order.
pub fn key_names() -> Vec<String> {
    let mut names: Vec<String> = Element::ALL.iter().map(|e| format!("element-{}", e.symbol())).collect();
    names.extend((3..=8).map(|s| format!("ring-size-{s}")));
    names.push("double-bond".into());
    names.push("triple-bond".into());
    names.extend(FunctionalGroup::ALL.iter().map(|g| format!("group-{}", g.name())));
    names.extend(["heavy-atoms-1-5", "heavy-atoms-6-10", "heavy-atoms-11-20", "heavy-atoms-21-plus"].map(String::from));
    names.push("aromatic-ring".into());
    names.push("aromatic-rings-2-plus".into());
    names
}

pub fn keys_fingerprint(g: &MoleculeGraph) -> Result<Fingerprint> {
    require_atoms(g)?;
    let mut bits = Vec::new();
    for (k, e) in Element::ALL.iter().enumerate() {
        if g.atoms().iter().any(|a| a.element == *e) {
            bits.push(k);
        }
    }
    let cycles = simple_cycles(g, 8);
    for size in 3..=8 {
        if cycles.iter().any(|c| c.len() == size) {
            bits.push(10 + size - 3);
        }
    }
    if g.bonds().iter().any(|b| b.order == 2) {
        bits.push(16);
    }
    if g.bonds().iter().any(|b| b.order == 3) {
        bits.push(17);
    }
    for (k, grp) in FunctionalGroup::ALL.iter().enumerate() {
        if functional_group_match(g, *grp) {
            bits.push(18 + k);
        }
    }
    let heavy = g.heavy_atom_count();
    bits.push(match heavy {
        0..=5 => 26,
        6..=10 => 27,
        11..=20 => 28,
        _ => 29,
    });
    let aromatic = aromatic_ring_count(g);
    if aromatic >= 1 {
        bits.push(30);
    }
    if aromatic >= 2 {
        bits.push(31);
    }
    Fingerprint::from_bits(FingerprintKind::StructuralKeys, bits)
}

/// `|a ∩ b| / |a ∪ b|`; two empty fingerprints score 0.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    if a.kind != b.kind {
        return Err(Error::Input(format!("cannot compare {:?} with {:?} fingerprints", a.kind, b.kind)));
    }
    let inter: u32 = a.words.iter().zip(&b.words).map(|(x, y)| (x & y).count_ones()).sum();
    let union: u32 = a.words.iter().zip(&b.words).map(|(x, y)| (x | y).count_ones()).sum();
    if union == 0 {
        warn!("tanimoto of two empty fingerprints taken as 0");
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}
