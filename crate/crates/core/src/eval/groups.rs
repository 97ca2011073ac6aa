//! Functional-group patterns, ring perception and Table-1 style descriptors.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::selfies::{Element, MoleculeGraph, HYDROGEN_MASS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionalGroup {
    Ether,
    CarboxylicAcid,
    Ester,
    Amide,
    Amine,
    Hydroxy,
    Halide,
    AromaticRing,
}

impl FunctionalGroup {
    pub const ALL: [FunctionalGroup; 8] = [
        FunctionalGroup::Ether,
        FunctionalGroup::CarboxylicAcid,
        FunctionalGroup::Ester,
        FunctionalGroup::Amide,
        FunctionalGroup::Amine,
        FunctionalGroup::Hydroxy,
        FunctionalGroup::Halide,
        FunctionalGroup::AromaticRing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FunctionalGroup::Ether => "ether",
            FunctionalGroup::CarboxylicAcid => "carboxylic-acid",
            FunctionalGroup::Ester => "ester",
            FunctionalGroup::Amide => "amide",
            FunctionalGroup::Amine => "amine",
            FunctionalGroup::Hydroxy => "hydroxy",
            FunctionalGroup::Halide => "halide",
            FunctionalGroup::AromaticRing => "aromatic-ring",
        }
    }

    /// Wording used in descriptions.
    pub fn phrase(self) -> &'static str {
        match self {
            FunctionalGroup::Ether => "ether",
            FunctionalGroup::CarboxylicAcid => "carboxylic acid",
            FunctionalGroup::Ester => "ester",
            FunctionalGroup::Amide => "amide",
            FunctionalGroup::Amine => "amine",
            FunctionalGroup::Hydroxy => "hydroxy",
            FunctionalGroup::Halide => "halide",
            FunctionalGroup::AromaticRing => "aromatic ring",
        }
    }

    pub fn index(self) -> usize {
        FunctionalGroup::ALL.iter().position(|&g| g == self).expect("listed group")
    }
}

impl fmt::Display for FunctionalGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FunctionalGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FunctionalGroup::ALL
            .into_iter()
            .find(|g| g.name() == s || g.phrase() == s)
            .ok_or_else(|| Error::Input(format!("unknown functional group {s:?}")))
    }
}

fn is_carbon(g: &MoleculeGraph, i: usize) -> bool {
    g.atom(i).element == Element::C
}

/// Carbon carrying a double bond to oxygen.
fn is_carbonyl_carbon(g: &MoleculeGraph, i: usize) -> bool {
    is_carbon(g, i) && g.neighbors(i).iter().any(|&(n, o)| o == 2 && g.atom(n).element == Element::O)
}

fn single_bonded(g: &MoleculeGraph, i: usize) -> bool {
    g.neighbors(i).iter().all(|&(_, o)| o == 1)
}

/// Oxygen with one hydrogen and a single bond to one carbon.
fn is_oh_on(g: &MoleculeGraph, o: usize) -> Option<usize> {
    let a = g.atom(o);
    if a.element != Element::O || a.implicit_h != 1 || g.degree(o) != 1 || !single_bonded(g, o) {
        return None;
    }
    let c = g.neighbors(o)[0].0;
    is_carbon(g, c).then_some(c)
}

/// Exact pattern match for one group.
pub fn functional_group_match(g: &MoleculeGraph, group: FunctionalGroup) -> bool {
    let n = g.atom_count();
    match group {
        FunctionalGroup::Hydroxy => (0..n).any(|o| is_oh_on(g, o).is_some_and(|c| !is_carbonyl_carbon(g, c))),
        FunctionalGroup::CarboxylicAcid => (0..n).any(|o| is_oh_on(g, o).is_some_and(|c| is_carbonyl_carbon(g, c))),
        FunctionalGroup::Ether => (0..n).any(|o| {
            g.atom(o).element == Element::O
                && g.degree(o) == 2
                && single_bonded(g, o)
                && g.neighbors(o).iter().all(|&(c, _)| is_carbon(g, c) && !is_carbonyl_carbon(g, c))
        }),
        FunctionalGroup::Ester => (0..n).any(|o| {
            g.atom(o).element == Element::O && g.degree(o) == 2 && single_bonded(g, o) && {
                let (a, b) = (g.neighbors(o)[0].0, g.neighbors(o)[1].0);
                (is_carbonyl_carbon(g, a) && is_carbon(g, b)) || (is_carbonyl_carbon(g, b) && is_carbon(g, a))
            }
        }),
        FunctionalGroup::Amide => (0..n).any(|c| {
            is_carbonyl_carbon(g, c)
                && g.neighbors(c).iter().any(|&(m, o)| o == 1 && g.atom(m).element == Element::N)
        }),
        FunctionalGroup::Amine => (0..n).any(|m| {
            g.atom(m).element == Element::N
                && single_bonded(g, m)
                && g.neighbors(m).iter().any(|&(c, _)| is_carbon(g, c))
                && g.neighbors(m).iter().all(|&(c, _)| is_carbon(g, c) && !is_carbonyl_carbon(g, c))
        }),
        FunctionalGroup::Halide => g
            .bonds()
            .iter()
            .any(|b| (g.atom(b.a).element.is_halogen() && is_carbon(g, b.b)) || (g.atom(b.b).element.is_halogen() && is_carbon(g, b.a))),
        FunctionalGroup::AromaticRing => aromatic_ring_count(g) > 0,
    }
}

/// Every listed group present in `g`, in table order.
pub fn functional_groups(g: &MoleculeGraph) -> Vec<FunctionalGroup> {
    FunctionalGroup::ALL.into_iter().filter(|&f| functional_group_match(g, f)).collect()
}

/// Groups named in a description, in table order. Words are lowercased and
/// split on non-alphanumerics, so hyphenated and spaced forms both match.
/// A phrase right after a number is a count ("0 aromatic rings"), not a
/// request for the group, and is skipped.
pub fn groups_in_text(text: &str) -> Vec<FunctionalGroup> {
    let words = crate::text::normalize(text);
    let is_count = |i: usize| i > 0 && words[i - 1].chars().all(|c| c.is_ascii_digit());
    let has_seq = |seq: &[&str]| {
        words.windows(seq.len()).enumerate().any(|(i, w)| !is_count(i) && w.iter().zip(seq).all(|(a, b)| a == b))
    };
    FunctionalGroup::ALL
        .into_iter()
        .filter(|g| {
            let parts: Vec<&str> = g.phrase().split(' ').collect();
            let plural: Vec<String> =
                parts.iter().enumerate().map(|(i, p)| if i + 1 == parts.len() { format!("{p}s") } else { p.to_string() }).collect();
            has_seq(&parts) || has_seq(&plural.iter().map(String::as_str).collect::<Vec<_>>())
        })
        .collect()
}

/// Simple cycles with `3..=max_len` atoms, each as its atom list in walk
/// order starting from its smallest atom.
pub fn simple_cycles(g: &MoleculeGraph, max_len: usize) -> Vec<Vec<usize>> {
    let n = g.atom_count();
    let mut seen: BTreeSet<Vec<(usize, usize)>> = BTreeSet::new();
    let mut out = Vec::new();
    for start in 0..n {
        // Iterative DFS over paths whose atoms all exceed `start`.
        let mut path = vec![start];
        let mut on_path = vec![false; n];
        on_path[start] = true;
        let mut cursor = vec![0usize];
        while let Some(&pos) = cursor.last() {
            let v = *path.last().unwrap();
            let nbrs = g.neighbors(v);
            if pos >= nbrs.len() {
                cursor.pop();
                on_path[v] = false;
                path.pop();
                continue;
            }
            *cursor.last_mut().unwrap() += 1;
            let w = nbrs[pos].0;
            if w == start && path.len() >= 3 {
                let mut edges: Vec<(usize, usize)> =
                    (0..path.len()).map(|i| (path[i], path[(i + 1) % path.len()])).map(|(a, b)| (a.min(b), a.max(b))).collect();
                edges.sort_unstable();
                if seen.insert(edges) {
                    out.push(path.clone());
                }
            } else if w > start && !on_path[w] && path.len() < max_len {
                on_path[w] = true;
                path.push(w);
                cursor.push(0);
            }
        }
    }
    out
}

/// Cyclomatic number: bonds - atoms + components.
pub fn ring_count(g: &MoleculeGraph) -> usize {
    (g.bonds().len() + g.components().len()).saturating_sub(g.atom_count())
}

/// Five- and six-membered rings whose atoms are all C, N, O or S and each
/// either carries a double bond or is N, O or S (lone pair).
pub fn aromatic_rings(g: &MoleculeGraph) -> Vec<Vec<usize>> {
    simple_cycles(g, 6)
        .into_iter()
        .filter(|ring| {
            (ring.len() == 5 || ring.len() == 6)
                && ring.iter().all(|&a| {
                    let e = g.atom(a).element;
                    matches!(e, Element::C | Element::N | Element::O | Element::S)
                        && (g.neighbors(a).iter().any(|&(_, o)| o == 2) || matches!(e, Element::N | Element::O | Element::S))
                })
        })
        .collect()
}

pub fn aromatic_ring_count(g: &MoleculeGraph) -> usize {
    aromatic_rings(g).len()
}

/// Sum of atomic masses including implicit hydrogens.
pub fn molecular_weight(g: &MoleculeGraph) -> f64 {
    g.atoms().iter().map(|a| a.element.mass() + HYDROGEN_MASS * a.implicit_h as f64).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descriptors {
    pub mol_weight: f64,
    pub n_ring: usize,
    pub n_aromatic: usize,
}

pub fn descriptors(g: &MoleculeGraph) -> Descriptors {
    Descriptors { mol_weight: molecular_weight(g), n_ring: ring_count(g), n_aromatic: aromatic_ring_count(g) }
}
