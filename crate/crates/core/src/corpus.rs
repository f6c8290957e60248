//! Byte-level tokenization, packing into fixed-length sequences, and
//! deterministic train/validation splits.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{invalid, LabError, Result};
use crate::markov::MarkovSource;
use crate::rng::{stream, Purpose};

pub type TokenId = u16;

/// Byte values plus three special symbols, all of which sit above the byte range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
    pub bos_id: TokenId,
    pub mask_id: TokenId,
    pub pad_id: TokenId,
}

impl Vocab {
    pub const BYTE_LEVEL: Vocab = Vocab {
        size: 259,
        bos_id: 256,
        mask_id: 257,
        pad_id: 258,
    };

    /// `n` data symbols `0..n` followed by bos, mask and pad.
    pub fn symbolic(n: usize) -> Result<Vocab> {
        if n == 0 || n + 3 > usize::from(TokenId::MAX) + 1 {
            return Err(invalid(format!("symbol count {n} out of range")));
        }
        let n = n as TokenId;
        Ok(Vocab {
            size: usize::from(n) + 3,
            bos_id: n,
            mask_id: n + 1,
            pad_id: n + 2,
        })
    }

    /// Number of ordinary (non-special) token ids, which come first.
    pub fn data_symbols(&self) -> usize {
        self.size - 3
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.bos_id || id == self.mask_id || id == self.pad_id
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::BYTE_LEVEL
    }
}

/// One token per UTF-8 byte.
pub fn tokenize(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Byte values of the non-special tokens, in order.
pub fn detokenize(ids: &[TokenId]) -> Vec<u8> {
    ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
}

pub fn detokenize_lossy(ids: &[TokenId]) -> String {
    String::from_utf8_lossy(&detokenize(ids)).into_owned()
}

/// A fixed-length sequence of token ids, all inside the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
}

impl TokenSeq {
    /// Checks `len >= 2` and that every id is inside the vocabulary.
    pub fn new(ids: Vec<TokenId>, vocab: &Vocab) -> Result<Self> {
        if ids.len() < 2 {
            return Err(invalid(format!("sequences need at least 2 tokens, got {}", ids.len())));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab.size) {
            return Err(invalid(format!("token id {bad} outside vocabulary of {}", vocab.size)));
        }
        Ok(Self { ids })
    }

    /// Like [`TokenSeq::new`] but also rejects mask and bos tokens.
    pub fn clean(ids: Vec<TokenId>, vocab: &Vocab) -> Result<Self> {
        if ids.iter().any(|&id| id == vocab.mask_id || id == vocab.bos_id) {
            return Err(invalid("clean sequences may not contain mask or bos tokens"));
        }
        Self::new(ids, vocab)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// Sequences of one length. Tail-padded sequences remember how many leading
/// tokens are real.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    seq_len: usize,
    split: Split,
    sequences: Vec<TokenSeq>,
    valid_lens: Vec<usize>,
}

impl Dataset {
    pub fn new(seq_len: usize, split: Split) -> Self {
        Self {
            seq_len,
            split,
            sequences: Vec::new(),
            valid_lens: Vec::new(),
        }
    }

    /// Appends a sequence whose first `valid_len` tokens are real data.
    pub fn push(&mut self, seq: TokenSeq, valid_len: usize) -> Result<()> {
        if seq.len() != self.seq_len {
            return Err(invalid(format!(
                "sequence length {} does not match dataset length {}",
                seq.len(),
                self.seq_len
            )));
        }
        if valid_len == 0 || valid_len > self.seq_len {
            return Err(invalid(format!("valid length {valid_len} out of range")));
        }
        self.sequences.push(seq);
        self.valid_lens.push(valid_len);
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[TokenSeq] {
        &self.sequences
    }

    pub fn get(&self, i: usize) -> &TokenSeq {
        &self.sequences[i]
    }

    pub fn valid_len(&self, i: usize) -> usize {
        self.valid_lens[i]
    }

    pub fn is_padded(&self, i: usize) -> bool {
        self.valid_lens[i] < self.seq_len
    }

    /// Per-position flag: true where the token is real data.
    pub fn supervision(&self, i: usize) -> Vec<bool> {
        (0..self.seq_len).map(|p| p < self.valid_lens[i]).collect()
    }

    /// Number of real (non-pad) tokens.
    pub fn token_count(&self) -> usize {
        self.valid_lens.iter().sum()
    }
}

/// Train and validation halves of one packed stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedCorpus {
    pub train: Dataset,
    pub validation: Dataset,
}

/// Whether packed chunk `index` goes to validation. Depends only on
/// `(seed, index, fraction)`.
pub fn is_validation(seed: u64, index: usize, val_fraction: f64) -> bool {
    let u: f64 = stream(seed, Purpose::Split, index as u64, 0).random();
    u < val_fraction
}

/// Chunks `stream` into length-`seq_len` sequences, pads the final partial
/// chunk with `pad_id`, and splits chunks between train and validation.
pub fn pack(stream: &[TokenId], seq_len: usize, seed: u64, val_fraction: f64, vocab: &Vocab) -> Result<PackedCorpus> {
    if seq_len < 2 {
        return Err(invalid(format!("sequence length must be at least 2, got {seq_len}")));
    }
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(invalid(format!("validation fraction {val_fraction} outside [0, 1]")));
    }
    let mut corpus = PackedCorpus {
        train: Dataset::new(seq_len, Split::Train),
        validation: Dataset::new(seq_len, Split::Validation),
    };
    for (index, chunk) in stream.chunks(seq_len).enumerate() {
        let mut ids = chunk.to_vec();
        ids.resize(seq_len, vocab.pad_id);
        let seq = TokenSeq::clean(ids, vocab)?;
        let target = if is_validation(seed, index, val_fraction) {
            &mut corpus.validation
        } else {
            &mut corpus.train
        };
        target.push(seq, chunk.len())?;
    }
    Ok(corpus)
}

/// Samples a Markov chain and maps state `s` to byte id `s`.
pub fn synth_markov(source: &MarkovSource, n_tokens: usize, start: Option<usize>, seed: u64) -> Result<Vec<TokenId>> {
    let mut rng = stream(seed, Purpose::Synth, 0, 0);
    Ok(source
        .sample(n_tokens, start, &mut rng)?
        .into_iter()
        .map(|s| s as TokenId)
        .collect())
}

const DATASET_MAGIC: &[u8; 8] = b"CARD-DS1";

/// Writes the flat binary cache: magic, `u32` length, `u64` count, then `u16` ids.
pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&(dataset.seq_len as u32).to_le_bytes())?;
    out.write_all(&(dataset.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(dataset.len() * dataset.seq_len * 2);
    for seq in &dataset.sequences {
        for &id in seq.ids() {
            buf.extend_from_slice(&id.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a cache written by [`write_dataset`]. Padding is recovered from the
/// first pad token of each sequence.
pub fn read_dataset<R: Read>(mut input: R, split: Split, vocab: &Vocab) -> Result<Dataset> {
    let format_err = |reason: String| LabError::Format { what: "dataset cache", reason };
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(format_err(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let mut u32_buf = [0u8; 4];
    input.read_exact(&mut u32_buf)?;
    let seq_len = u32::from_le_bytes(u32_buf) as usize;
    let mut u64_buf = [0u8; 8];
    input.read_exact(&mut u64_buf)?;
    let count = u64::from_le_bytes(u64_buf) as usize;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != count * seq_len * 2 {
        return Err(format_err(format!(
            "expected {} payload bytes, found {}",
            count * seq_len * 2,
            bytes.len()
        )));
    }
    let mut dataset = Dataset::new(seq_len, split);
    for chunk in bytes.chunks_exact(seq_len * 2) {
        let ids: Vec<TokenId> = chunk
            .chunks_exact(2)
            .map(|b| TokenId::from_le_bytes([b[0], b[1]]))
            .collect();
        let valid = ids.iter().position(|&id| id == vocab.pad_id).unwrap_or(seq_len);
        if ids[valid..].iter().any(|&id| id != vocab.pad_id) {
            return Err(format_err("pad tokens must only occur as a tail".into()));
        }
        dataset.push(TokenSeq::clean(ids, vocab)?, valid)?;
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const V: Vocab = Vocab::BYTE_LEVEL;

    #[test]
    fn special_ids_are_distinct_and_above_bytes() {
        let ids = [V.bos_id, V.mask_id, V.pad_id];
        assert!(ids.iter().all(|&id| id >= 256 && (id as usize) < V.size));
        assert_ne!(V.bos_id, V.mask_id);
        assert_ne!(V.mask_id, V.pad_id);
        assert_ne!(V.bos_id, V.pad_id);
        assert_eq!(V.size, 259);
    }

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("AB"), vec![65, 66]);
        // U+20AC EURO SIGN is E2 82 AC in UTF-8.
        assert_eq!(tokenize("\u{20ac}"), vec![0xE2, 0x82, 0xAC]);
        assert_eq!(tokenize("\u{20ac}"), "€".as_bytes().iter().map(|&b| b as u16).collect::<Vec<_>>());
    }

    #[test]
    fn pack_ten_tokens_by_four() {
        let stream: Vec<TokenId> = (0..10).collect();
        let c = pack(&stream, 4, 0, 0.0, &V).unwrap();
        assert!(c.validation.is_empty());
        assert_eq!(c.train.len(), 3);
        assert!(!c.train.is_padded(0) && !c.train.is_padded(1));
        assert!(c.train.is_padded(2));
        assert_eq!(c.train.get(2).ids(), &[8, 9, V.pad_id, V.pad_id]);
        assert_eq!(c.train.supervision(2), vec![true, true, false, false]);
    }

    #[test]
    fn pack_exact_multiple_has_no_padding() {
        let stream: Vec<TokenId> = (0..8).collect();
        let c = pack(&stream, 4, 0, 0.0, &V).unwrap();
        assert_eq!(c.train.len(), 2);
        assert!((0..2).all(|i| !c.train.is_padded(i)));
    }

    #[test]
    fn pack_rejects_short_length_and_handles_empty() {
        assert!(pack(&[1, 2, 3], 1, 0, 0.0, &V).is_err());
        let c = pack(&[], 4, 0, 0.5, &V).unwrap();
        assert!(c.train.is_empty() && c.validation.is_empty());
    }

    #[test]
    fn pack_is_deterministic_and_splits() {
        let stream = tokenize(&"the quick brown fox ".repeat(50));
        let a = pack(&stream, 16, 9, 0.3, &V).unwrap();
        let b = pack(&stream, 16, 9, 0.3, &V).unwrap();
        assert_eq!(a, b);
        assert!(!a.train.is_empty() && !a.validation.is_empty());
    }

    #[test]
    fn identity_chain_is_constant() {
        let m = MarkovSource::new(
            (0..5)
                .map(|i| (0..5).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        )
        .unwrap();
        let s = synth_markov(&m, 100, Some(3), 1).unwrap();
        assert!(s.iter().all(|&x| x == 3));
    }

    #[test]
    fn uniform_two_symbol_bigrams() {
        // Every bigram has probability 1/4; over n-1 overlapping pairs the count
        // of each is approximately Binomial(n-1, 1/4).
        let m = MarkovSource::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let n = 100_000;
        let s = synth_markov(&m, n, None, 42).unwrap();
        let mut counts = [[0usize; 2]; 2];
        for w in s.windows(2) {
            counts[w[0] as usize][w[1] as usize] += 1;
        }
        let pairs = (n - 1) as f64;
        let sigma = (pairs * 0.25 * 0.75).sqrt();
        for row in counts {
            for c in row {
                assert!((c as f64 - pairs * 0.25).abs() < 3.0 * sigma, "count {c}");
            }
        }
        assert_eq!(s, synth_markov(&m, n, None, 42).unwrap());
    }

    #[test]
    fn cache_round_trip_and_bad_magic() {
        let stream = tokenize("hello, packed world");
        let c = pack(&stream, 6, 1, 0.0, &V).unwrap();
        let mut buf = Vec::new();
        write_dataset(&c.train, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"CARD-DS1");
        let back = read_dataset(&buf[..], Split::Train, &V).unwrap();
        assert_eq!(back, c.train);

        buf[0] = b'X';
        assert!(matches!(read_dataset(&buf[..], Split::Train, &V), Err(LabError::Format { .. })));
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(text in ".*") {
            prop_assert_eq!(detokenize(&tokenize(&text)), text.as_bytes().to_vec());
        }

        #[test]
        fn packing_conserves_tokens(len in 0usize..300, seq_len in 2usize..20, seed in any::<u64>()) {
            let stream: Vec<TokenId> = (0..len).map(|i| (i % 256) as TokenId).collect();
            let c = pack(&stream, seq_len, seed, 0.25, &V).unwrap();
            prop_assert_eq!(c.train.token_count() + c.validation.token_count(), len);
            let again = pack(&stream, seq_len, seed, 0.25, &V).unwrap();
            prop_assert_eq!(c, again);
        }
    }
}
