//! The 29-symbol character alphabet: A-Z, space, apostrophe, and a padding
//! symbol used to fill fixed-length transcript buffers.

use crate::diffusion::TokenSeq;
use crate::error::{CoreError, Result};

/// Alphabet size.
pub const ALPHABET_SIZE: usize = 29;

/// Glyph used when rendering the padding symbol.
pub const PAD_GLYPH: char = '_';

/// Ordered 29-character alphabet with a designated padding index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
    pad: usize,
}

impl Default for Alphabet {
    fn default() -> Self {
        let mut symbols: Vec<char> = ('A'..='Z').collect();
        symbols.push(' ');
        symbols.push('\'');
        symbols.push(PAD_GLYPH);
        Self {
            symbols,
            pad: ALPHABET_SIZE - 1,
        }
    }
}

impl Alphabet {
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    /// Index of the padding symbol.
    pub fn pad_index(&self) -> usize {
        self.pad
    }

    /// Index of an input symbol. The padding glyph is not accepted as input.
    pub fn index_of(&self, c: char) -> Option<usize> {
        if c == PAD_GLYPH {
            return None;
        }
        self.symbols.iter().position(|&s| s == c)
    }

    /// Map a transcript to token indices, padding with the pad symbol up to
    /// `len`. Errors on out-of-alphabet characters or overlong text.
    pub fn to_tokens(&self, text: &str, len: usize) -> Result<TokenSeq> {
        let chars: Vec<char> = text.chars().collect();
        if chars.len() > len {
            return Err(CoreError::Encoding(format!(
                "text of {} chars does not fit in {len} positions",
                chars.len()
            )));
        }
        let mut tokens = Vec::with_capacity(len);
        for c in &chars {
            match self.index_of(*c) {
                Some(idx) => tokens.push(idx),
                None => {
                    return Err(CoreError::Encoding(format!(
                        "character {c:?} is not in the alphabet"
                    )))
                }
            }
        }
        tokens.resize(len, self.pad);
        TokenSeq::new(tokens, self.size())
    }

    /// Render tokens as text, stripping trailing padding symbols. Interior
    /// padding renders as [`PAD_GLYPH`].
    pub fn to_text(&self, x: &TokenSeq) -> String {
        let toks = x.tokens();
        let end = toks
            .iter()
            .rposition(|&tok| tok != self.pad)
            .map_or(0, |p| p + 1);
        toks[..end].iter().map(|&tok| self.symbols[tok]).collect()
    }
}
