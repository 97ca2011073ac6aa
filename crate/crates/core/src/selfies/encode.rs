use super::grammar::{classify, SelfiesToken, Symbol, INDEX_BASE};
use super::molecule::MoleculeGraph;
use super::SelfiesError;

/// Depth-first spanning tree plus ring-closure bonds, shared by the string
/// writers.
pub(crate) struct DfsPlan {
    pub root: usize,
    /// Atoms in visiting order.
    pub order: Vec<usize>,
    /// Position of each atom in `order`.
    pub position: Vec<usize>,
    /// Tree children with bond order, in visiting order.
    pub children: Vec<Vec<(usize, u8)>>,
    /// Ring bonds closed at this atom, back to an earlier atom.
    pub closes: Vec<Vec<(usize, u8)>>,
    /// Ring bonds opened at this atom, toward a later atom.
    pub opens: Vec<Vec<(usize, u8)>>,
}

/// Walks a connected graph from the lowest-ranked atom, visiting
/// neighbours in ascending rank.
pub(crate) fn dfs_plan(g: &MoleculeGraph, rank: &[usize]) -> DfsPlan {
    let n = g.atom_count();
    let root = (0..n).min_by_key(|&i| rank[i]).unwrap_or(0);
    let mut plan = DfsPlan {
        root,
        order: Vec::with_capacity(n),
        position: vec![usize::MAX; n],
        children: vec![Vec::new(); n],
        closes: vec![Vec::new(); n],
        opens: vec![Vec::new(); n],
    };
    if n == 0 {
        return plan;
    }
    let sorted: Vec<Vec<(usize, u8)>> = (0..n)
        .map(|v| {
            let mut nb = g.neighbors(v).to_vec();
            nb.sort_by_key(|&(w, _)| rank[w]);
            nb
        })
        .collect();
    // Explicit stack of (atom, parent, next neighbour cursor).
    let mut stack: Vec<(usize, usize, usize)> = vec![(root, usize::MAX, 0)];
    plan.position[root] = 0;
    plan.order.push(root);
    while let Some(top) = stack.last_mut() {
        let (v, parent, cursor) = *top;
        if cursor >= sorted[v].len() {
            stack.pop();
            continue;
        }
        top.2 += 1;
        let (w, o) = sorted[v][cursor];
        if w == parent {
            continue;
        }
        if plan.position[w] == usize::MAX {
            plan.position[w] = plan.order.len();
            plan.order.push(w);
            plan.children[v].push((w, o));
            stack.push((w, v, 0));
        } else if plan.position[w] < plan.position[v] {
            plan.closes[v].push((w, o));
            plan.opens[w].push((v, o));
        }
    }
    for list in &mut plan.opens {
        list.sort_by_key(|&(v, _)| plan.position[v]);
    }
    plan
}

fn check_encodable(g: &MoleculeGraph) -> Result<(), SelfiesError> {
    if let Some(a) = g.atoms().iter().find(|a| a.charge != 0) {
        return Err(SelfiesError::UnsupportedAtom(format!("{}{:+}", a.element, a.charge)));
    }
    if !g.is_connected() {
        return Err(SelfiesError::InvalidGraph("graph has more than one component".into()));
    }
    g.validate()
}

fn push_index(out: &mut Vec<Symbol>, q: usize, width: usize) {
    for k in (0..width).rev() {
        out.push(Symbol::from_index_value(q / INDEX_BASE.pow(k as u32) % INDEX_BASE));
    }
}

fn index_width(q: usize, what: &str) -> Result<u8, SelfiesError> {
    if q < INDEX_BASE {
        Ok(1)
    } else if q < INDEX_BASE * INDEX_BASE {
        Ok(2)
    } else {
        Err(SelfiesError::InvalidGraph(format!("{what} spans {} symbols, beyond the two-digit index range", q + 1)))
    }
}

fn emit(g: &MoleculeGraph, plan: &DfsPlan, v: usize, bond: u8) -> Result<Vec<Symbol>, SelfiesError> {
    let mut out = vec![Symbol::Atom { element: g.atom(v).element, bond }];
    for &(u, o) in &plan.closes[v] {
        let q = plan.position[v] - plan.position[u] - 1;
        let size = index_width(q, "ring closure")?;
        out.push(Symbol::Ring { order: o, size });
        push_index(&mut out, q, size as usize);
    }
    let kids = &plan.children[v];
    for (i, &(c, o)) in kids.iter().enumerate() {
        let sub = emit(g, plan, c, o)?;
        if i + 1 < kids.len() {
            let q = sub.len() - 1;
            let size = index_width(q, "branch")?;
            out.push(Symbol::Branch { order: o, size });
            push_index(&mut out, q, size as usize);
        }
        out.extend(sub);
    }
    Ok(out)
}

/// Encodes a connected graph, walking atoms in the given rank order.
pub fn graph_to_symbols_ranked(g: &MoleculeGraph, rank: &[usize]) -> Result<Vec<Symbol>, SelfiesError> {
    check_encodable(g)?;
    if g.is_empty() {
        return Ok(Vec::new());
    }
    let plan = dfs_plan(g, rank);
    emit(g, &plan, plan.root, 1)
}

/// Encodes a connected graph using atom indices as the walk order.
pub fn graph_to_selfies(g: &MoleculeGraph) -> Result<Vec<SelfiesToken>, SelfiesError> {
    let rank: Vec<usize> = (0..g.atom_count()).collect();
    Ok(classify(&graph_to_symbols_ranked(g, &rank)?))
}
