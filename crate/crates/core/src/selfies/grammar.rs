use std::fmt;

use super::molecule::Element;
use super::SelfiesError;

/// A grammar symbol with its bracket text stripped to structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Symbol {
    /// Atom with the order of the bond that attaches it to the previous atom.
    Atom { element: Element, bond: u8 },
    /// Opens a side chain; `size` index tokens follow.
    Branch { order: u8, size: u8 },
    /// Closes a ring back to an earlier atom; `size` index tokens follow.
    Ring { order: u8, size: u8 },
}

const ELEMENT_ORDER: [Element; 10] = [
    Element::C,
    Element::N,
    Element::O,
    Element::S,
    Element::P,
    Element::F,
    Element::Cl,
    Element::Br,
    Element::I,
    Element::B,
];

fn bond_prefix(order: u8) -> &'static str {
    match order {
        2 => "=",
        3 => "#",
        _ => "",
    }
}

impl Symbol {
    /// Every symbol of the grammar in a fixed order.
    pub fn alphabet() -> Vec<Symbol> {
        let mut out = Vec::with_capacity(42);
        for element in ELEMENT_ORDER {
            for bond in 1..=3 {
                out.push(Symbol::Atom { element, bond });
            }
        }
        for size in 1..=2 {
            for order in 1..=3 {
                out.push(Symbol::Branch { order, size });
            }
        }
        for size in 1..=2 {
            for order in 1..=3 {
                out.push(Symbol::Ring { order, size });
            }
        }
        out
    }

    pub fn text(&self) -> String {
        match *self {
            Symbol::Atom { element, bond } => format!("[{}{}]", bond_prefix(bond), element.symbol()),
            Symbol::Branch { order, size } => format!("[{}Branch{size}]", bond_prefix(order)),
            Symbol::Ring { order, size } => format!("[{}Ring{size}]", bond_prefix(order)),
        }
    }

    /// Parses the text between the brackets.
    pub fn parse_inner(inner: &str) -> Option<Symbol> {
        let (order, rest) = match inner.as_bytes().first() {
            Some(b'=') => (2, &inner[1..]),
            Some(b'#') => (3, &inner[1..]),
            _ => (1, inner),
        };
        let sized = |prefix: &str| -> Option<u8> {
            match rest.strip_prefix(prefix)? {
                "1" => Some(1),
                "2" => Some(2),
                _ => None,
            }
        };
        if let Some(size) = sized("Branch") {
            return Some(Symbol::Branch { order, size });
        }
        if let Some(size) = sized("Ring") {
            return Some(Symbol::Ring { order, size });
        }
        Element::from_symbol(rest).map(|element| Symbol::Atom { element, bond: order })
    }

    /// Number of index tokens that follow this symbol.
    pub fn index_width(&self) -> usize {
        match *self {
            Symbol::Atom { .. } => 0,
            Symbol::Branch { size, .. } | Symbol::Ring { size, .. } => size as usize,
        }
    }

    /// Digit value of this symbol when it is read as an index token.
    pub fn index_value(&self) -> usize {
        INDEX_ALPHABET.iter().position(|s| s == self).unwrap_or(0)
    }

    pub fn from_index_value(d: usize) -> Symbol {
        INDEX_ALPHABET[d]
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Base of the index numerals.
pub const INDEX_BASE: usize = 16;

/// Symbols standing for digits 0..16 when read as an index.
pub const INDEX_ALPHABET: [Symbol; INDEX_BASE] = [
    Symbol::Atom { element: Element::C, bond: 1 },
    Symbol::Ring { order: 1, size: 1 },
    Symbol::Ring { order: 1, size: 2 },
    Symbol::Branch { order: 1, size: 1 },
    Symbol::Branch { order: 2, size: 1 },
    Symbol::Branch { order: 3, size: 1 },
    Symbol::Branch { order: 1, size: 2 },
    Symbol::Branch { order: 2, size: 2 },
    Symbol::Branch { order: 3, size: 2 },
    Symbol::Atom { element: Element::O, bond: 1 },
    Symbol::Atom { element: Element::N, bond: 1 },
    Symbol::Atom { element: Element::N, bond: 2 },
    Symbol::Atom { element: Element::C, bond: 2 },
    Symbol::Atom { element: Element::C, bond: 3 },
    Symbol::Atom { element: Element::S, bond: 1 },
    Symbol::Atom { element: Element::P, bond: 1 },
];

/// Role a token plays at its position in a string.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Atom,
    BondAtom,
    Branch,
    Ring,
    /// Read as a numeral by the preceding branch or ring token.
    Index,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SelfiesToken {
    pub symbol: Symbol,
    pub kind: TokenKind,
}

impl SelfiesToken {
    pub fn text(&self) -> String {
        self.symbol.text()
    }
}

/// Assigns positional kinds to a symbol stream.
pub fn classify(symbols: &[Symbol]) -> Vec<SelfiesToken> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut pending_index = 0usize;
    for &symbol in symbols {
        let kind = if pending_index > 0 {
            pending_index -= 1;
            TokenKind::Index
        } else {
            pending_index = symbol.index_width();
            match symbol {
                Symbol::Atom { bond: 1, .. } => TokenKind::Atom,
                Symbol::Atom { .. } => TokenKind::BondAtom,
                Symbol::Branch { .. } => TokenKind::Branch,
                Symbol::Ring { .. } => TokenKind::Ring,
            }
        };
        out.push(SelfiesToken { symbol, kind });
    }
    out
}

pub fn tokenize(text: &str) -> Result<Vec<SelfiesToken>, SelfiesError> {
    let mut symbols = Vec::new();
    let bytes = text.as_bytes();
    let mut pos = 0;
    while pos < bytes.len() {
        if bytes[pos] != b'[' {
            return Err(SelfiesError::Parse { offset: pos, message: "expected '['".into() });
        }
        let close = text[pos..]
            .find(']')
            .ok_or_else(|| SelfiesError::Parse { offset: pos, message: "unterminated symbol".into() })?;
        let inner = &text[pos + 1..pos + close];
        let symbol = Symbol::parse_inner(inner)
            .ok_or_else(|| SelfiesError::Parse { offset: pos, message: format!("unknown symbol [{inner}]") })?;
        symbols.push(symbol);
        pos += close + 1;
    }
    Ok(classify(&symbols))
}

pub fn tokens_to_string(tokens: &[SelfiesToken]) -> String {
    tokens.iter().map(SelfiesToken::text).collect()
}

pub fn symbols_of(tokens: &[SelfiesToken]) -> Vec<Symbol> {
    tokens.iter().map(|t| t.symbol).collect()
}
