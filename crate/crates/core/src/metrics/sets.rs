//! Large-error / control set construction with 5-gram deduplication.

use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::TokenCorpus;
use crate::math;
use crate::rng::SeededRng;

use super::{ErrorVector, MetricsError};

/// Jaccard similarity over the sets of token 5-grams of two documents.
/// Documents shorter than 5 tokens have similarity 0 by convention.
pub fn five_gram_jaccard(a: &[u32], b: &[u32]) -> f64 {
    if a.len() < 5 || b.len() < 5 {
        return 0.0;
    }
    let grams = |doc: &[u32]| -> alloc::collections::BTreeSet<[u32; 5]> {
        doc.windows(5)
            .map(|w| [w[0], w[1], w[2], w[3], w[4]])
            .collect()
    };
    let ga = grams(a);
    let gb = grams(b);
    let inter = ga.intersection(&gb).count();
    let union = ga.len() + gb.len() - inter;
    inter as f64 / union as f64
}

/// Parameters for [`build_sets`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetParams {
    /// Fraction of the corpus forming the large-error candidate set.
    pub top_frac: f64,
    /// Number of control documents sampled from the bottom half.
    pub ctrl_n: usize,
    /// Retained pairs must have 5-gram Jaccard at or below this.
    pub dedup_thresh: f64,
    pub seed: u64,
}

impl Default for SetParams {
    fn default() -> Self {
        Self {
            top_frac: 0.10,
            ctrl_n: 0,
            dedup_thresh: 0.1,
            seed: 0,
        }
    }
}

/// One dropped near-duplicate.
#[derive(Debug, Clone, PartialEq)]
pub struct DedupEvent {
    pub dropped: u32,
    pub kept: u32,
    pub similarity: f64,
}

/// Disjoint large-error and control document sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSets {
    /// Top decile by error, deduplicated, in descending-error order.
    pub d_large: Vec<u32>,
    /// Seeded sample from the bottom half, ascending doc_id.
    pub d_ctrl: Vec<u32>,
    pub dedup_log: Vec<DedupEvent>,
    pub warnings: Vec<String>,
}

/// Build the large-error set (top `top_frac` by error, greedily filtered so
/// no retained pair exceeds the dedup threshold, keeping the higher-error
/// document) and a seeded control sample from the bottom half.
pub fn build_sets(
    errors: &ErrorVector,
    corpus: &TokenCorpus,
    params: &SetParams,
) -> Result<SplitSets, MetricsError> {
    if !(params.top_frac > 0.0 && params.top_frac <= 1.0) {
        return Err(MetricsError::BadFraction(params.top_frac));
    }
    let n = errors.len();
    if n == 0 {
        return Err(MetricsError::EmptyCorpus);
    }
    for &(doc_id, _) in errors.entries() {
        if corpus.get(doc_id).is_none() {
            return Err(MetricsError::UnknownDocId(doc_id));
        }
    }

    // Descending error, ties broken by ascending doc_id (boundary ties are
    // included first, then truncated deterministically).
    let mut ranked: Vec<(u32, f64)> = errors.entries().to_vec();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let n_large = (math::ceil(params.top_frac * n as f64) as usize).min(n);
    let mut warnings = Vec::new();
    let mut dedup_log = Vec::new();
    let mut d_large: Vec<u32> = Vec::with_capacity(n_large);
    let mut short_logged = alloc::collections::BTreeSet::new();
    for &(doc_id, _) in &ranked[..n_large] {
        let doc = corpus.get(doc_id).unwrap();
        if doc.tokens.len() < 5 && short_logged.insert(doc_id) {
            warnings.push(alloc::format!(
                "doc {doc_id} shorter than 5 tokens; 5-gram similarity treated as 0"
            ));
        }
        let mut dup_of = None;
        for &kept in &d_large {
            let sim = five_gram_jaccard(&doc.tokens, &corpus.get(kept).unwrap().tokens);
            if sim > params.dedup_thresh {
                dup_of = Some((kept, sim));
                break;
            }
        }
        match dup_of {
            Some((kept, similarity)) => dedup_log.push(DedupEvent {
                dropped: doc_id,
                kept,
                similarity,
            }),
            None => d_large.push(doc_id),
        }
    }
    if d_large.len() < n_large {
        warnings.push(alloc::format!(
            "large-error set reduced from {n_large} to {} by deduplication",
            d_large.len()
        ));
    }

    // Control pool: bottom half by error.
    let pool_len = n / 2;
    let pool: Vec<u32> = ranked[n - pool_len..].iter().map(|&(id, _)| id).collect();
    let take = params.ctrl_n.min(pool.len());
    if take < params.ctrl_n {
        warnings.push(alloc::format!(
            "control set reduced from {} to {take}: bottom half has only {} documents",
            params.ctrl_n,
            pool.len()
        ));
    }
    let mut rng = SeededRng::fork(params.seed, "ctrl-sample");
    let mut d_ctrl: Vec<u32> = rng
        .sample_indices(pool.len(), take)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    d_ctrl.sort_unstable();

    Ok(SplitSets {
        d_large,
        d_ctrl,
        dedup_log,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use alloc::vec;

    fn corpus_of(docs: Vec<Vec<u32>>) -> TokenCorpus {
        let documents = docs
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| Document {
                doc_id: i as u32,
                tokens,
            })
            .collect();
        TokenCorpus::new(documents, 64, 512).unwrap()
    }

    fn errors_of(values: &[f64]) -> ErrorVector {
        ErrorVector {
            entries: values
                .iter()
                .enumerate()
                .map(|(i, &e)| (i as u32, e))
                .collect(),
            base_digest: 0,
            quant_digest: 0,
        }
    }

    #[test]
    fn identical_docs_have_similarity_one() {
        let d = [1u32, 2, 3, 4, 5, 6];
        assert_eq!(five_gram_jaccard(&d, &d), 1.0);
    }

    #[test]
    fn disjoint_grams_give_zero() {
        let a = [1u32, 2, 3, 4, 5];
        let b = [6u32, 7, 8, 9, 10];
        assert_eq!(five_gram_jaccard(&a, &b), 0.0);
    }

    #[test]
    fn enumerated_third_case() {
        // A = {12345, 23456}, B = {12345, 23459}: 1 shared of 3 total.
        let a = [1u32, 2, 3, 4, 5, 6];
        let b = [1u32, 2, 3, 4, 5, 9];
        assert!((five_gram_jaccard(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn short_doc_similarity_is_zero() {
        assert_eq!(five_gram_jaccard(&[1, 2, 3], &[1, 2, 3, 4, 5]), 0.0);
    }

    #[test]
    fn top_decile_size_without_duplicates() {
        let docs: Vec<Vec<u32>> = (0..20)
            .map(|i| (0..8).map(|j| (i * 8 + j + 1) as u32 % 63 + 1).collect())
            .collect();
        let corpus = corpus_of(docs);
        let errs = errors_of(&(0..20).map(|i| i as f64 * 0.1).collect::<Vec<_>>());
        let sets = build_sets(&errs, &corpus, &SetParams { ctrl_n: 5, ..Default::default() }).unwrap();
        // ceil(0.1 * 20) = 2, highest errors are docs 19 and 18.
        assert_eq!(sets.d_large, vec![19, 18]);
        assert_eq!(sets.d_ctrl.len(), 5);
        assert!(sets.dedup_log.is_empty());
        // Control sample comes from the bottom half (errors 0..0.9).
        assert!(sets.d_ctrl.iter().all(|&id| id < 10));
    }

    #[test]
    fn duplicate_top_doc_dropped() {
        let mut docs: Vec<Vec<u32>> = (0..10)
            .map(|i| (0..8).map(|j| (i * 8 + j + 1) as u32 % 63 + 1).collect())
            .collect();
        docs[8] = docs[9].clone(); // identical pair at the top
        let corpus = corpus_of(docs);
        let errs = errors_of(&(0..10).map(|i| i as f64).collect::<Vec<_>>());
        // ceil(0.1*10) = 1... widen to top 20% so both duplicates qualify.
        let params = SetParams {
            top_frac: 0.2,
            ctrl_n: 2,
            ..Default::default()
        };
        let sets = build_sets(&errs, &corpus, &params).unwrap();
        assert_eq!(sets.d_large, vec![9]);
        assert_eq!(sets.dedup_log.len(), 1);
        assert_eq!(sets.dedup_log[0].dropped, 8);
        assert_eq!(sets.dedup_log[0].kept, 9);
        assert!((sets.dedup_log[0].similarity - 1.0).abs() < 1e-12);
        assert!(!sets.warnings.is_empty());
    }

    #[test]
    fn determinism_same_seed_same_sets() {
        let docs: Vec<Vec<u32>> = (0..30)
            .map(|i| (0..10).map(|j| ((i * 31 + j * 7) % 63 + 1) as u32).collect())
            .collect();
        let corpus = corpus_of(docs);
        let errs = errors_of(&(0..30).map(|i| ((i * 13) % 7) as f64).collect::<Vec<_>>());
        let params = SetParams { ctrl_n: 6, seed: 9, ..Default::default() };
        let a = build_sets(&errs, &corpus, &params).unwrap();
        let b = build_sets(&errs, &corpus, &params).unwrap();
        assert_eq!(a, b);
        // Sets are disjoint.
        assert!(a.d_ctrl.iter().all(|id| !a.d_large.contains(id)));
    }

    #[test]
    fn unknown_doc_id_rejected() {
        let corpus = corpus_of(vec![vec![1, 2, 3, 4, 5, 6]]);
        let errs = ErrorVector {
            entries: vec![(5, 1.0)],
            base_digest: 0,
            quant_digest: 0,
        };
        assert!(matches!(
            build_sets(&errs, &corpus, &SetParams::default()),
            Err(MetricsError::UnknownDocId(5))
        ));
    }
}
