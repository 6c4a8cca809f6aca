use crate::error::{Error, Result};
use crate::model::TokenId;

/// Byte-level tokenizer: ids `0..=255` are raw bytes, 256 is BOS.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ToyTokenizer;

impl ToyTokenizer {
    pub const BOS: TokenId = 256;
    pub const VOCAB_SIZE: usize = 257;

    pub fn encode(&self, text: &[u8]) -> Vec<TokenId> {
        text.iter().map(|&b| b as TokenId).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        ids.iter()
            .map(|&id| match id {
                0..=255 => Ok(id as u8),
                Self::BOS => Err(Error::Tokenizer("BOS inside a sequence".into())),
                other => Err(Error::Tokenizer(format!("id {other} outside the vocabulary"))),
            })
            .collect()
    }

    /// Printable rendering for reports; BOS shows as `[BOS]`.
    pub fn render(&self, id: TokenId) -> String {
        match id {
            Self::BOS => "[BOS]".to_string(),
            0x0a => "\\n".to_string(),
            0x20..=0x7e => (id as u8 as char).to_string(),
            other => format!("<{other:02x}>"),
        }
    }
}
