//! Total decoding of symbol streams into valence-valid graphs.

use super::grammar::{Symbol, INDEX_BASE};
use super::molecule::MoleculeGraph;

/// Decodes any symbol sequence. Bond demands beyond the remaining valence
/// are lowered, and branch or ring directives with nothing to act on are
/// skipped, so every input yields a valid graph.
pub fn decode_symbols(symbols: &[Symbol]) -> MoleculeGraph {
    let mut d = Decoder { symbols, pos: 0, mol: MoleculeGraph::new(), rings: Vec::new() };
    d.derive(symbols.len(), None, None);
    d.close_rings();
    d.mol.assign_hydrogens();
    d.mol
}

struct Decoder<'a> {
    symbols: &'a [Symbol],
    pos: usize,
    mol: MoleculeGraph,
    rings: Vec<(usize, usize, u8)>,
}

impl Decoder<'_> {
    /// Derives atoms from `pos` up to `end`, starting with `state` free
    /// valences on `prev` (none for the root of the string).
    fn derive(&mut self, end: usize, mut state: Option<u8>, mut prev: Option<usize>) {
        while self.pos < end {
            if state == Some(0) {
                break;
            }
            let symbol = self.symbols[self.pos];
            self.pos += 1;
            match symbol {
                Symbol::Atom { element, bond } => {
                    let cap = element.max_valence();
                    let atom = self.mol.add_atom(element);
                    match (state, prev) {
                        (Some(s), Some(p)) => {
                            let order = bond.min(s).min(cap);
                            self.mol.add_bond(p, atom, order).expect("fresh atom has no bonds");
                            state = Some(cap - order);
                        }
                        _ => state = Some(cap),
                    }
                    prev = Some(atom);
                }
                Symbol::Branch { order, size } => {
                    let Some(s) = state.filter(|&s| s > 1) else { continue };
                    let Some(root) = prev else { continue };
                    let q = self.read_index(size as usize, end);
                    let init = (s - 1).min(order);
                    let branch_end = (self.pos + q + 1).min(end);
                    self.derive(branch_end, Some(init), Some(root));
                    self.pos = branch_end;
                    state = Some(s - init);
                }
                Symbol::Ring { order, size } => {
                    let Some(s) = state.filter(|&s| s > 0) else { continue };
                    let Some(right) = prev else { continue };
                    let q = self.read_index(size as usize, end);
                    let order = order.min(s);
                    let left = right.saturating_sub(q + 1);
                    self.rings.push((left, right, order));
                    state = Some(s - order);
                }
            }
        }
    }

    fn read_index(&mut self, width: usize, end: usize) -> usize {
        let mut q = 0;
        for _ in 0..width {
            q *= INDEX_BASE;
            if self.pos < end {
                q += self.symbols[self.pos].index_value();
                self.pos += 1;
            }
        }
        q
    }

    fn close_rings(&mut self) {
        for &(left, right, order) in &self.rings {
            if left == right {
                continue;
            }
            let free = |i: usize| self.mol.atom(i).element.max_valence() - self.mol.bond_order_sum(i);
            let order = order.min(free(left)).min(free(right));
            if order == 0 {
                continue;
            }
            match self.mol.bond_order(left, right) {
                Some(existing) => {
                    let merged = (existing + order).min(3);
                    self.mol.set_bond_order(left, right, merged);
                }
                None => self.mol.add_bond(left, right, order).expect("distinct atoms without a bond"),
            }
        }
    }
}
