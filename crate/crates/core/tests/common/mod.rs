#![allow(dead_code)]

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use todi::selfies::{Element, MoleculeGraph};

/// Exact isomorphism test by backtracking over atoms in BFS order,
/// matching element, charge, hydrogens, degree and bond orders.
pub fn isomorphic(a: &MoleculeGraph, b: &MoleculeGraph) -> bool {
    let n = a.atom_count();
    if n != b.atom_count() || a.bonds().len() != b.bonds().len() {
        return false;
    }
    let sig = |g: &MoleculeGraph, i: usize| {
        let at = g.atom(i);
        let mut orders: Vec<u8> = g.neighbors(i).iter().map(|&(_, o)| o).collect();
        orders.sort_unstable();
        (at.element, at.charge, at.implicit_h, orders)
    };
    let sa: Vec<_> = (0..n).map(|i| sig(a, i)).collect();
    let sb: Vec<_> = (0..n).map(|i| sig(b, i)).collect();
    let mut ms = sa.clone();
    let mut mb = sb.clone();
    ms.sort();
    mb.sort();
    if ms != mb {
        return false;
    }
    // Visit order: BFS over each component so mapped neighbours prune early.
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        order.push(s);
        let mut k = order.len() - 1;
        while k < order.len() {
            let v = order[k];
            k += 1;
            for &(w, _) in a.neighbors(v) {
                if !seen[w] {
                    seen[w] = true;
                    order.push(w);
                }
            }
        }
    }
    let mut map = vec![usize::MAX; n];
    let mut used = vec![false; n];
    fn extend(
        depth: usize,
        order: &[usize],
        a: &MoleculeGraph,
        b: &MoleculeGraph,
        sa: &[(Element, i8, u8, Vec<u8>)],
        sb: &[(Element, i8, u8, Vec<u8>)],
        map: &mut [usize],
        used: &mut [bool],
    ) -> bool {
        if depth == order.len() {
            return true;
        }
        let v = order[depth];
        for cand in 0..b.atom_count() {
            if used[cand] || sa[v] != sb[cand] {
                continue;
            }
            let consistent = a.neighbors(v).iter().all(|&(w, o)| map[w] == usize::MAX || b.bond_order(cand, map[w]) == Some(o))
                && {
                    let mapped_a = a.neighbors(v).iter().filter(|&&(w, _)| map[w] != usize::MAX).count();
                    let mapped_b = b.neighbors(cand).iter().filter(|&&(w, _)| used[w]).count();
                    mapped_a == mapped_b
                };
            if !consistent {
                continue;
            }
            map[v] = cand;
            used[cand] = true;
            if extend(depth + 1, order, a, b, sa, sb, map, used) {
                return true;
            }
            map[v] = usize::MAX;
            used[cand] = false;
        }
        false
    }
    extend(0, &order, a, b, &sa, &sb, &mut map, &mut used)
}

/// Random connected valid graph: a random tree grown under valence limits,
/// then extra ring bonds between atoms with spare valence.
pub fn random_graph<R: Rng>(rng: &mut R, max_atoms: usize) -> MoleculeGraph {
    let weights: [(Element, u32); 10] = [
        (Element::C, 12),
        (Element::N, 3),
        (Element::O, 3),
        (Element::S, 1),
        (Element::P, 1),
        (Element::F, 1),
        (Element::Cl, 1),
        (Element::Br, 1),
        (Element::I, 1),
        (Element::B, 1),
    ];
    let total: u32 = weights.iter().map(|w| w.1).sum();
    let pick = |rng: &mut R| {
        let mut x = rng.random_range(0..total);
        for (e, w) in weights {
            if x < w {
                return e;
            }
            x -= w;
        }
        Element::C
    };
    let n = rng.random_range(1..=max_atoms);
    let mut g = MoleculeGraph::new();
    g.add_atom(pick(rng));
    let spare = |g: &MoleculeGraph, i: usize| g.atom(i).element.max_valence() - g.bond_order_sum(i);
    for _ in 1..n {
        let open: Vec<usize> = (0..g.atom_count()).filter(|&i| spare(&g, i) > 0).collect();
        let Some(&parent) = open.choose(rng) else { break };
        let element = pick(rng);
        let cap = spare(&g, parent).min(element.max_valence()).min(3);
        let order = if rng.random_bool(0.7) { 1 } else { rng.random_range(1..=cap) };
        let atom = g.add_atom(element);
        g.add_bond(parent, atom, order).unwrap();
    }
    let rings = rng.random_range(0..=3);
    for _ in 0..rings {
        let open: Vec<usize> = (0..g.atom_count()).filter(|&i| spare(&g, i) > 0).collect();
        if open.len() < 2 {
            break;
        }
        let a = *open.choose(rng).unwrap();
        let b = *open.choose(rng).unwrap();
        if a == b || g.bond_order(a, b).is_some() {
            continue;
        }
        let order = if rng.random_bool(0.8) { 1 } else { spare(&g, a).min(spare(&g, b)).min(2) };
        g.add_bond(a, b, order).unwrap();
    }
    g.assign_hydrogens();
    g
}

pub fn random_permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
