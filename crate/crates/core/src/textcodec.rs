//! Byte-level tokenizer: ids 0..=255 are raw bytes, then PAD, BOS and EOS.

use ndarray::Array2;

use crate::error::{Error, Result};

pub type TokenId = u16;

pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
pub const VOCAB_SIZE: usize = 259;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    /// Number of leading non-PAD positions.
    pub attention_len: usize,
}

impl TokenSequence {
    pub fn mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.attention_len).collect()
    }
}

/// `BOS`, the first `max_len - 2` bytes of `text`, `EOS`.
pub fn encode(text: &str, max_len: usize) -> TokenSequence {
    assert!(max_len >= 3, "max_len must be at least 3, got {max_len}");
    let body = text.as_bytes();
    let keep = body.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(BOS);
    ids.extend(body[..keep].iter().map(|&b| b as TokenId));
    ids.push(EOS);
    let attention_len = ids.len();
    TokenSequence { ids, attention_len }
}

/// Inverse of [`encode`]. Special tokens are skipped, and an incomplete UTF-8
/// character left at the end by truncation is dropped.
pub fn decode(ids: &[TokenId]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => bytes.push(id as u8),
            PAD | BOS | EOS => {}
            _ => return Err(Error::invalid(format!("token id {id} outside vocabulary"))),
        }
    }
    match String::from_utf8(bytes) {
        Ok(s) => Ok(s),
        Err(e) => {
            let err = e.utf8_error();
            let mut bytes = e.into_bytes();
            if err.error_len().is_none() {
                bytes.truncate(err.valid_up_to());
                Ok(String::from_utf8(bytes).expect("valid prefix"))
            } else {
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
        }
    }
}

/// Right-padded id matrix and 0/1 attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Array2<TokenId>,
    pub mask: Array2<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.nrows() == 0
    }

    pub fn row(&self, i: usize) -> (Vec<TokenId>, Vec<bool>) {
        (
            self.ids.row(i).to_vec(),
            self.mask.row(i).iter().map(|&m| m == 1).collect(),
        )
    }
}

pub fn batch_encode<S: AsRef<str>>(texts: &[S], max_len: usize) -> Batch {
    assert!(!texts.is_empty(), "batch_encode needs at least one text");
    let seqs: Vec<TokenSequence> = texts.iter().map(|t| encode(t.as_ref(), max_len)).collect();
    let width = seqs.iter().map(|s| s.ids.len()).max().unwrap_or(0);
    let mut ids = Array2::from_elem((seqs.len(), width), PAD);
    let mut mask = Array2::zeros((seqs.len(), width));
    for (r, seq) in seqs.iter().enumerate() {
        for (c, &id) in seq.ids.iter().enumerate() {
            ids[[r, c]] = id;
            mask[[r, c]] = 1;
        }
    }
    Batch { ids, mask }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        assert_eq!(encode("", 8).ids, vec![BOS, EOS]);
        assert_eq!(encode("AB", 8).ids, vec![BOS, 65, 66, EOS]);
        let s = encode("0123456789", 6);
        assert_eq!(s.ids, vec![BOS, 48, 49, 50, 51, EOS]);
        assert_eq!(s.attention_len, 6);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&encode("hello", 32).ids).unwrap(), "hello");
        assert_eq!(decode(&[BOS, EOS]).unwrap(), "");
        assert!(decode(&[BOS, 259]).is_err());
        // "é" is two bytes; truncation after the first leaves a partial char.
        let s = encode("aé", 4);
        assert_eq!(decode(&s.ids).unwrap(), "a");
    }

    #[test]
    fn batches() {
        let b = batch_encode(&["a", "abc"], 16);
        assert_eq!(b.ids.dim(), (2, 5));
        assert_eq!(b.ids.row(0).iter().filter(|&&i| i == PAD).count(), 2);
        let single = batch_encode(&["xyz"], 16);
        assert!(single.mask.iter().all(|&m| m == 1));
    }

    proptest! {
        #[test]
        fn decode_is_prefix(t in ".{0,64}", max_len in 3usize..80) {
            let seq = encode(&t, max_len);
            prop_assert!(seq.attention_len <= max_len);
            prop_assert_eq!(seq.ids[0], BOS);
            let back = decode(&seq.ids).unwrap();
            prop_assert!(t.starts_with(&back));
        }

        #[test]
        fn mask_rows_match_lengths(texts in proptest::collection::vec("[ -~]{0,30}", 1..6), max_len in 3usize..40) {
            let b = batch_encode(&texts, max_len);
            for (i, t) in texts.iter().enumerate() {
                let len = encode(t, max_len).attention_len;
                let row_sum: usize = b.mask.row(i).iter().map(|&m| m as usize).sum();
                prop_assert_eq!(row_sum, len);
            }
        }
    }
}
