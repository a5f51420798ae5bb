//! Word-level hashing tokenizer. Lowercases, splits on whitespace and
//! punctuation, and maps each word to a bucket with FNV-1a, so no vocabulary
//! file is needed.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const RESERVED: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    vocab_size: usize,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Tokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > RESERVED, "vocab must exceed the reserved ids");
        Tokenizer { vocab_size }
    }

    pub fn word_id(&self, word: &str) -> usize {
        RESERVED + (fnv1a(word.as_bytes()) % (self.vocab_size - RESERVED) as u64) as usize
    }

    /// `BOS word* EOS`, untruncated.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let lower = text.to_lowercase();
        let words = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty());
        std::iter::once(BOS).chain(words.map(|w| self.word_id(w))).chain([EOS]).collect()
    }
}
