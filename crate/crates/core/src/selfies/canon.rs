//! Canonical atom ranking by colour refinement with individualization,
//! and the string key derived from it.

use super::molecule::MoleculeGraph;
use super::smiles::write_ranked;

/// Leaves explored before the search stops branching on ties.
const LEAF_BUDGET: usize = 4096;

fn relabel<K: Ord + Clone>(keys: &[K]) -> (Vec<u32>, usize) {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    let colors = keys.iter().map(|k| sorted.binary_search(k).expect("key present") as u32).collect();
    (colors, sorted.len())
}

fn class_count(colors: &[u32]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

/// Splits colour classes by the multiset of (bond order, neighbour colour)
/// until stable. Class order is preserved, so the result is invariant
/// under relabeling.
pub fn refine(g: &MoleculeGraph, colors: &[u32]) -> Vec<u32> {
    let mut colors = colors.to_vec();
    let mut classes = class_count(&colors);
    loop {
        let keys: Vec<(u32, Vec<(u8, u32)>)> = (0..g.atom_count())
            .map(|v| {
                let mut nb: Vec<(u8, u32)> = g.neighbors(v).iter().map(|&(w, o)| (o, colors[w])).collect();
                nb.sort_unstable();
                (colors[v], nb)
            })
            .collect();
        let (next, count) = relabel(&keys);
        colors = next;
        if count == classes {
            return colors;
        }
        classes = count;
    }
}

fn default_hydrogens(g: &MoleculeGraph, i: usize) -> u8 {
    let used = g.bond_order_sum(i);
    let target = g.atom(i).element.normal_valences().iter().copied().find(|&v| v >= used).unwrap_or(used);
    target - used
}

fn atom_label(g: &MoleculeGraph, i: usize) -> String {
    let a = g.atom(i);
    let mut s = a.element.symbol().to_string();
    if a.charge != 0 {
        s.push_str(&format!("{{{:+}}}", a.charge));
    }
    if a.implicit_h != default_hydrogens(g, i) {
        s.push_str(&format!("{{H{}}}", a.implicit_h));
    }
    s
}

fn initial_colors(g: &MoleculeGraph) -> Vec<u32> {
    let keys: Vec<(u8, i8, u8, usize)> = (0..g.atom_count())
        .map(|i| {
            let a = g.atom(i);
            (a.element as u8, a.charge, a.implicit_h, g.degree(i))
        })
        .collect();
    relabel(&keys).0
}

struct Search<'g> {
    g: &'g MoleculeGraph,
    acyclic: bool,
    budget: usize,
    best: Option<(String, Vec<u32>)>,
}

impl Search<'_> {
    fn run(&mut self, colors: Vec<u32>) {
        let colors = refine(self.g, &colors);
        let n = colors.len();
        let mut counts = vec![0usize; n];
        for &c in &colors {
            counts[c as usize] += 1;
        }
        let Some(cell) = (0..n).find(|&c| counts[c] > 1) else {
            self.budget = self.budget.saturating_sub(1);
            let rank: Vec<usize> = colors.iter().map(|&c| c as usize).collect();
            let cert = write_ranked(self.g, &rank, &|i| atom_label(self.g, i)).expect("connected component");
            if self.best.as_ref().is_none_or(|(b, _)| cert < *b) {
                self.best = Some((cert, colors));
            }
            return;
        };
        let members: Vec<usize> = (0..n).filter(|&v| colors[v] as usize == cell).collect();
        let interchangeable = self.acyclic || self.sibling_leaves(&members);
        for (k, &m) in members.iter().enumerate() {
            if k > 0 && (interchangeable || self.budget == 0) {
                break;
            }
            let split: Vec<u32> = colors
                .iter()
                .enumerate()
                .map(|(v, &c)| 2 * c + u32::from(c as usize == cell && v != m))
                .collect();
            self.run(split);
        }
    }

    /// Degree-one atoms hanging off one common neighbour can be swapped
    /// by an automorphism.
    fn sibling_leaves(&self, members: &[usize]) -> bool {
        let parent = |v: usize| (self.g.degree(v) == 1).then(|| self.g.neighbors(v)[0].0);
        match parent(members[0]) {
            Some(p) => members.iter().all(|&v| parent(v) == Some(p)),
            None => false,
        }
    }
}

/// Canonical rank of every atom of a connected graph.
pub fn canonical_ranking(g: &MoleculeGraph) -> Vec<usize> {
    canonical_form(g).1
}

fn canonical_form(g: &MoleculeGraph) -> (String, Vec<usize>) {
    if g.is_empty() {
        return (String::new(), Vec::new());
    }
    let acyclic = g.bonds().len() + 1 == g.atom_count();
    let mut search = Search { g, acyclic, budget: LEAF_BUDGET, best: None };
    search.run(initial_colors(g));
    let (cert, colors) = search.best.expect("search reaches at least one leaf");
    (cert, colors.into_iter().map(|c| c as usize).collect())
}

/// Relabeling-invariant string for a molecule. Components are keyed
/// separately and joined with '.' in sorted order.
pub fn canonical_key(g: &MoleculeGraph) -> String {
    let mut parts: Vec<String> = g.components().iter().map(|c| canonical_form(&g.induced(c)).0).collect();
    parts.sort();
    parts.join(".")
}
