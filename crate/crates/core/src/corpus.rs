//! Tokenized evaluation corpora.
//!
//! Corpora are consumed pre-tokenized. Every document starts with the
//! reserved BOS token id 0; NLL is averaged over the predicted positions
//! only, so documents must keep at least one token after the BOS.

use alloc::vec::Vec;

/// Reserved start-of-sentence token id prepended to every document.
pub const BOS_TOKEN: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: u32,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("document {doc_id} has token {token} >= vocab size {vocab}")]
    TokenOutOfRange { doc_id: u32, token: u32, vocab: u32 },
    #[error("document {doc_id} is empty after truncation")]
    EmptyDocument { doc_id: u32 },
    #[error("duplicate doc_id {0}")]
    DuplicateDocId(u32),
    #[error("corpus has no documents")]
    Empty,
}

/// Ordered set of token-id documents sharing one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCorpus {
    documents: Vec<Document>,
    vocab_size: u32,
    truncation: usize,
}

impl TokenCorpus {
    pub const DEFAULT_TRUNCATION: usize = 512;

    /// Build a corpus, truncating each document to `truncation` tokens and
    /// validating token ranges. Document order is preserved.
    pub fn new(
        documents: Vec<Document>,
        vocab_size: u32,
        truncation: usize,
    ) -> Result<Self, CorpusError> {
        if documents.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut seen: Vec<u32> = documents.iter().map(|d| d.doc_id).collect();
        seen.sort_unstable();
        for pair in seen.windows(2) {
            if pair[0] == pair[1] {
                return Err(CorpusError::DuplicateDocId(pair[0]));
            }
        }
        let mut docs = documents;
        for doc in &mut docs {
            doc.tokens.truncate(truncation);
            if doc.tokens.is_empty() {
                return Err(CorpusError::EmptyDocument { doc_id: doc.doc_id });
            }
            for &t in &doc.tokens {
                if t >= vocab_size {
                    return Err(CorpusError::TokenOutOfRange {
                        doc_id: doc.doc_id,
                        token: t,
                        vocab: vocab_size,
                    });
                }
            }
        }
        Ok(Self {
            documents: docs,
            vocab_size,
            truncation,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn get(&self, doc_id: u32) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    /// Documents for a list of ids, erroring on unknown ids.
    pub fn select<'a>(&'a self, ids: &[u32]) -> Result<Vec<&'a Document>, u32> {
        ids.iter().map(|&id| self.get(id).ok_or(id)).collect()
    }

    /// FNV-1a digest over ids and tokens, for provenance records.
    pub fn content_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |word: u32| {
            for b in word.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        mix(self.vocab_size);
        for doc in &self.documents {
            mix(doc.doc_id);
            mix(doc.tokens.len() as u32);
            for &t in &doc.tokens {
                mix(t);
            }
        }
        h
    }
}
