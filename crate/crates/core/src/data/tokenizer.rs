//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by two special
//! tokens.

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn encode(text: &str) -> impl Iterator<Item = usize> + '_ {
    text.bytes().map(usize::from)
}

/// Lossy decode; special tokens are dropped.
pub fn decode(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
