//! Kekulé SMILES subset: organic atoms, branches, ring-closure digits and
//! the `=`/`#` bond symbols.

use std::collections::HashMap;

use super::encode::dfs_plan;
use super::molecule::{Element, MoleculeGraph};
use super::SelfiesError;

fn bond_symbol(order: u8) -> &'static str {
    match order {
        2 => "=",
        3 => "#",
        _ => "",
    }
}

fn ring_label(d: usize) -> String {
    if d < 10 {
        d.to_string()
    } else {
        format!("%{d}")
    }
}

/// Writes a connected graph with atoms walked in rank order.
pub(crate) fn write_ranked(
    g: &MoleculeGraph,
    rank: &[usize],
    atom_label: &dyn Fn(usize) -> String,
) -> Result<String, SelfiesError> {
    if g.is_empty() {
        return Ok(String::new());
    }
    if !g.is_connected() {
        return Err(SelfiesError::InvalidGraph("graph has more than one component".into()));
    }
    let plan = dfs_plan(g, rank);
    let mut out = String::new();
    let mut free_digits: Vec<bool> = vec![true; 100];
    let mut assigned: HashMap<(usize, usize), usize> = HashMap::new();
    enum Step {
        Atom(usize, u8),
        Open,
        Close,
    }
    let mut stack = vec![Step::Atom(plan.root, 1)];
    while let Some(step) = stack.pop() {
        match step {
            Step::Open => out.push('('),
            Step::Close => out.push(')'),
            Step::Atom(v, bond) => {
                out.push_str(bond_symbol(bond));
                out.push_str(&atom_label(v));
                for &(u, _) in &plan.closes[v] {
                    let d = assigned.remove(&(u, v)).expect("ring opened before it closes");
                    free_digits[d] = true;
                    out.push_str(&ring_label(d));
                }
                for &(w, o) in &plan.opens[v] {
                    let d = (1..100)
                        .find(|&d| free_digits[d])
                        .ok_or_else(|| SelfiesError::InvalidGraph("more than 99 open rings".into()))?;
                    free_digits[d] = false;
                    assigned.insert((v, w), d);
                    out.push_str(bond_symbol(o));
                    out.push_str(&ring_label(d));
                }
                let kids = &plan.children[v];
                for (i, &(c, o)) in kids.iter().enumerate().rev() {
                    if i + 1 < kids.len() {
                        stack.push(Step::Close);
                        stack.push(Step::Atom(c, o));
                        stack.push(Step::Open);
                    } else {
                        stack.push(Step::Atom(c, o));
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn graph_to_smiles(g: &MoleculeGraph) -> Result<String, SelfiesError> {
    if let Some(a) = g.atoms().iter().find(|a| a.charge != 0) {
        return Err(SelfiesError::UnsupportedAtom(format!("{}{:+}", a.element, a.charge)));
    }
    let rank: Vec<usize> = (0..g.atom_count()).collect();
    write_ranked(g, &rank, &|i| g.atom(i).element.symbol().to_string())
}

struct PendingRing {
    atom: usize,
    order: Option<u8>,
}

fn unsupported(feature: &str, offset: usize) -> SelfiesError {
    SelfiesError::UnsupportedFeature { feature: feature.to_string(), offset }
}

pub fn smiles_to_graph(s: &str) -> Result<MoleculeGraph, SelfiesError> {
    let mut g = MoleculeGraph::new();
    let bytes = s.as_bytes();
    let mut prev: Option<usize> = None;
    let mut branch_stack: Vec<Option<usize>> = Vec::new();
    let mut pending_bond: Option<u8> = None;
    let mut rings: HashMap<usize, PendingRing> = HashMap::new();
    let syntax = |offset: usize, message: &str| SelfiesError::Parse { offset, message: message.to_string() };
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            'B' | 'C' | 'N' | 'O' | 'S' | 'P' | 'F' | 'I' => {
                let (sym, width) = match (c, bytes.get(i + 1).map(|b| *b as char)) {
                    ('C', Some('l')) => ("Cl", 2),
                    ('B', Some('r')) => ("Br", 2),
                    _ => (&s[i..i + 1], 1),
                };
                let element = Element::from_symbol(sym).expect("listed organic symbol");
                let atom = g.add_atom(element);
                if let Some(p) = prev {
                    g.add_bond(p, atom, pending_bond.take().unwrap_or(1))?;
                } else if pending_bond.is_some() {
                    return Err(syntax(i, "bond symbol before the first atom"));
                }
                prev = Some(atom);
                i += width;
                continue;
            }
            '(' => {
                if prev.is_none() {
                    return Err(syntax(i, "branch before any atom"));
                }
                branch_stack.push(prev);
            }
            ')' => {
                if pending_bond.is_some() {
                    return Err(syntax(i, "bond symbol at end of branch"));
                }
                prev = branch_stack.pop().ok_or_else(|| syntax(i, "unbalanced ')'"))?;
            }
            '-' => pending_bond = Some(1),
            '=' => pending_bond = Some(2),
            '#' => pending_bond = Some(3),
            '0'..='9' | '%' => {
                let (label, width) = if c == '%' {
                    let digits = s.get(i + 1..i + 3).filter(|d| d.bytes().all(|b| b.is_ascii_digit()));
                    let d = digits.ok_or_else(|| syntax(i, "'%' needs two digits"))?;
                    (d.parse::<usize>().expect("two ascii digits"), 3)
                } else {
                    ((c as u8 - b'0') as usize, 1)
                };
                let atom = prev.ok_or_else(|| syntax(i, "ring label before any atom"))?;
                let bond = pending_bond.take();
                match rings.remove(&label) {
                    Some(open) => {
                        let order = match (open.order, bond) {
                            (Some(a), Some(b)) if a != b => return Err(syntax(i, "conflicting ring bond orders")),
                            (a, b) => a.or(b).unwrap_or(1),
                        };
                        if open.atom == atom || g.bond_order(open.atom, atom).is_some() {
                            return Err(syntax(i, "ring closure duplicates an existing bond"));
                        }
                        g.add_bond(open.atom, atom, order)?;
                    }
                    None => {
                        rings.insert(label, PendingRing { atom, order: bond });
                    }
                }
                i += width;
                continue;
            }
            'c' | 'n' | 'o' | 's' | 'p' | 'b' => return Err(unsupported(&format!("aromatic atom '{c}'"), i)),
            '[' => return Err(unsupported("bracket atom", i)),
            '@' => return Err(unsupported("stereocentre '@'", i)),
            '/' | '\\' => return Err(unsupported(&format!("directional bond '{c}'"), i)),
            '.' => return Err(unsupported("disconnected component '.'", i)),
            ':' => return Err(unsupported("aromatic bond ':'", i)),
            '$' => return Err(unsupported("quadruple bond '$'", i)),
            '+' => return Err(unsupported("charge '+'", i)),
            _ => return Err(syntax(i, &format!("unexpected character '{c}'"))),
        }
        i += 1;
    }
    if !branch_stack.is_empty() {
        return Err(syntax(s.len(), "unclosed '('"));
    }
    if pending_bond.is_some() {
        return Err(syntax(s.len(), "dangling bond symbol"));
    }
    if let Some(label) = rings.keys().min() {
        return Err(syntax(s.len(), &format!("ring label {label} never closed")));
    }
    g.assign_hydrogens();
    g.validate()?;
    Ok(g)
}
