//! Byte-level vocabulary: ids 0..=255 are raw bytes, followed by three
//! special tokens.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn tokenize(text: &str) -> Vec<u32> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Raw bytes of the non-special ids.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
}

pub fn detokenize_lossy(ids: &[u32]) -> String {
    String::from_utf8_lossy(&detokenize(ids)).into_owned()
}

pub fn is_special(id: u32) -> bool {
    id >= 256
}
