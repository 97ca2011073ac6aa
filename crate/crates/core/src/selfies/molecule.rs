use std::fmt;

use super::SelfiesError;

/// Elements supported by the grammar subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    B,
    C,
    N,
    O,
    S,
    P,
    F,
    Cl,
    Br,
    I,
}

impl Element {
    pub const ALL: [Element; 10] = [
        Element::B,
        Element::C,
        Element::N,
        Element::O,
        Element::S,
        Element::P,
        Element::F,
        Element::Cl,
        Element::Br,
        Element::I,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::S => "S",
            Element::P => "P",
            Element::F => "F",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Element> {
        Element::ALL.iter().copied().find(|e| e.symbol() == s)
    }

    /// Valences an uncharged atom may take, ascending. The last is the cap.
    pub fn normal_valences(self) -> &'static [u8] {
        match self {
            Element::B => &[3],
            Element::C => &[4],
            Element::N => &[3],
            Element::O => &[2],
            Element::S => &[2, 4, 6],
            Element::P => &[3, 5],
            Element::F | Element::Cl | Element::Br | Element::I => &[1],
        }
    }

    pub fn max_valence(self) -> u8 {
        *self.normal_valences().last().unwrap_or(&0)
    }

    /// Standard atomic weight.
    pub fn mass(self) -> f64 {
        match self {
            Element::B => 10.81,
            Element::C => 12.011,
            Element::N => 14.007,
            Element::O => 15.999,
            Element::S => 32.06,
            Element::P => 30.974,
            Element::F => 18.998,
            Element::Cl => 35.45,
            Element::Br => 79.904,
            Element::I => 126.904,
        }
    }

    pub fn is_halogen(self) -> bool {
        matches!(self, Element::F | Element::Cl | Element::Br | Element::I)
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

pub const HYDROGEN_MASS: f64 = 1.008;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Atom {
    pub element: Element,
    pub charge: i8,
    pub implicit_h: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: u8,
}

/// Heavy-atom graph with implicit hydrogens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MoleculeGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    adjacency: Vec<Vec<(usize, u8)>>,
}

impl MoleculeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, i: usize) -> &Atom {
        &self.atoms[i]
    }

    /// Adds an uncharged atom; hydrogens are filled in by [`Self::assign_hydrogens`].
    pub fn add_atom(&mut self, element: Element) -> usize {
        self.atoms.push(Atom { element, charge: 0, implicit_h: 0 });
        self.adjacency.push(Vec::new());
        self.atoms.len() - 1
    }

    pub fn add_bond(&mut self, a: usize, b: usize, order: u8) -> Result<(), SelfiesError> {
        let n = self.atoms.len();
        if a >= n || b >= n {
            return Err(SelfiesError::InvalidGraph(format!("bond {a}-{b} references a missing atom")));
        }
        if a == b {
            return Err(SelfiesError::InvalidGraph(format!("self-bond on atom {a}")));
        }
        if !(1..=3).contains(&order) {
            return Err(SelfiesError::InvalidGraph(format!("bond order {order} outside 1..=3")));
        }
        if self.bond_order(a, b).is_some() {
            return Err(SelfiesError::InvalidGraph(format!("duplicate bond {a}-{b}")));
        }
        self.bonds.push(Bond { a, b, order });
        self.adjacency[a].push((b, order));
        self.adjacency[b].push((a, order));
        Ok(())
    }

    pub(crate) fn set_bond_order(&mut self, a: usize, b: usize, order: u8) {
        for bond in &mut self.bonds {
            if (bond.a == a && bond.b == b) || (bond.a == b && bond.b == a) {
                bond.order = order;
            }
        }
        for (n, o) in &mut self.adjacency[a] {
            if *n == b {
                *o = order;
            }
        }
        for (n, o) in &mut self.adjacency[b] {
            if *n == a {
                *o = order;
            }
        }
    }

    pub fn bond_order(&self, a: usize, b: usize) -> Option<u8> {
        self.adjacency.get(a)?.iter().find(|(n, _)| *n == b).map(|&(_, o)| o)
    }

    /// Neighbours with bond orders, in bond insertion order.
    pub fn neighbors(&self, i: usize) -> &[(usize, u8)] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn bond_order_sum(&self, i: usize) -> u8 {
        self.adjacency[i].iter().map(|&(_, o)| o).sum()
    }

    /// Sets each atom's implicit hydrogen count to fill the smallest normal
    /// valence that accommodates its explicit bonds.
    pub fn assign_hydrogens(&mut self) {
        for i in 0..self.atoms.len() {
            let used = self.bond_order_sum(i);
            let element = self.atoms[i].element;
            let target = element.normal_valences().iter().copied().find(|&v| v >= used).unwrap_or(used);
            self.atoms[i].implicit_h = target - used;
        }
    }

    pub fn set_charge(&mut self, i: usize, charge: i8) {
        self.atoms[i].charge = charge;
    }

    /// Checks every structural and valence invariant.
    pub fn validate(&self) -> Result<(), SelfiesError> {
        for (i, atom) in self.atoms.iter().enumerate() {
            let used = self.bond_order_sum(i) as u16 + atom.implicit_h as u16;
            if used > atom.element.max_valence() as u16 {
                return Err(SelfiesError::InvalidGraph(format!(
                    "atom {i} ({}) carries valence {used} > {}",
                    atom.element,
                    atom.element.max_valence()
                )));
            }
        }
        for bond in &self.bonds {
            if bond.a == bond.b || !(1..=3).contains(&bond.order) {
                return Err(SelfiesError::InvalidGraph(format!("bad bond {bond:?}")));
            }
        }
        Ok(())
    }

    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.atoms.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut k = 0;
            while k < comp.len() {
                let v = comp[k];
                k += 1;
                for &(w, _) in &self.adjacency[v] {
                    if !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }

    /// Relabels atoms so that old atom `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MoleculeGraph {
        let n = self.atoms.len();
        assert_eq!(perm.len(), n);
        let mut inverse = vec![0; n];
        for (old, &new) in perm.iter().enumerate() {
            inverse[new] = old;
        }
        let mut g = MoleculeGraph::new();
        for &old in &inverse {
            let idx = g.add_atom(self.atoms[old].element);
            g.atoms[idx] = self.atoms[old];
        }
        for bond in &self.bonds {
            g.add_bond(perm[bond.a], perm[bond.b], bond.order).expect("permutation preserves validity");
        }
        g
    }

    /// Subgraph induced by `atoms`, renumbered in the given order.
    pub fn induced(&self, atoms: &[usize]) -> MoleculeGraph {
        let mut map = vec![usize::MAX; self.atoms.len()];
        let mut g = MoleculeGraph::new();
        for &a in atoms {
            map[a] = g.add_atom(self.atoms[a].element);
            g.atoms[map[a]] = self.atoms[a];
        }
        for bond in &self.bonds {
            if map[bond.a] != usize::MAX && map[bond.b] != usize::MAX {
                g.add_bond(map[bond.a], map[bond.b], bond.order).expect("induced subgraph stays simple");
            }
        }
        g
    }

    pub fn heavy_atom_count(&self) -> usize {
        self.atoms.len()
    }
}
