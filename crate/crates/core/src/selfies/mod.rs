//! SELFIES grammar codec: tokenizer, total decoder, graph encoder, index
//! vocabulary, a Kekulé SMILES subset and canonical molecule keys.

mod canon;
mod decode;
mod encode;
mod grammar;
mod molecule;
mod smiles;
mod vocab;

pub use canon::{canonical_key, canonical_ranking, refine};
pub use decode::decode_symbols;
pub use encode::{graph_to_selfies, graph_to_symbols_ranked};
pub use grammar::{
    classify, symbols_of, tokenize, tokens_to_string, SelfiesToken, Symbol, TokenKind, INDEX_ALPHABET, INDEX_BASE,
};
pub use molecule::{Atom, Bond, Element, MoleculeGraph, HYDROGEN_MASS};
pub use smiles::{graph_to_smiles, smiles_to_graph};
pub use vocab::{SelfiesVocabulary, TokenIndexSequence, MAX_LEN, MAX_VOCAB, PAD, PAD_TEXT};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SelfiesError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported SMILES feature at byte {offset}: {feature}")]
    UnsupportedFeature { feature: String, offset: usize },
    #[error("unsupported atom: {0}")]
    UnsupportedAtom(String),
    #[error("invalid molecule graph: {0}")]
    InvalidGraph(String),
    #[error("corrupt index sequence: index {index} at position {position} is outside a vocabulary of {size}")]
    CorruptSequence { position: usize, index: u32, size: usize },
    #[error("sequence of length {len} exceeds the limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
}

/// Decodes tokens into a graph; never fails.
pub fn decode_to_graph(tokens: &[SelfiesToken]) -> MoleculeGraph {
    decode_symbols(&symbols_of(tokens))
}

/// Parses and decodes a SELFIES string.
pub fn selfies_to_graph(text: &str) -> Result<MoleculeGraph, SelfiesError> {
    Ok(decode_to_graph(&tokenize(text)?))
}

/// SELFIES text walking atoms in canonical order, so isomorphic graphs
/// produce the same string.
pub fn canonical_selfies(g: &MoleculeGraph) -> Result<String, SelfiesError> {
    let rank = canonical_ranking(g);
    let symbols = graph_to_symbols_ranked(g, &rank)?;
    Ok(symbols.iter().map(Symbol::text).collect())
}
