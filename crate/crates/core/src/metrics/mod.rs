//! Quantization-error measurements: per-example error vectors, residual
//! magnitudes, correlations, kurtosis profiles, layer-wise MSE, KL errors,
//! RMSNorm-weight rank analysis, and the reversal report.

pub mod sets;
pub mod stats;

use alloc::vec::Vec;
use core::ops::Range;

use crate::corpus::TokenCorpus;
use crate::math;
use crate::runtime::{forward, log_softmax, nll, RuntimeError, Tap, TapSpec};
use crate::tensor::{l2_norm, Matrix};
use crate::weights::ModelWeights;

pub use sets::{build_sets, five_gram_jaccard, DedupEvent, SetParams, SplitSets};
pub use stats::{kurtosis, pearson, StatsError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("models have different configs")]
    ConfigMismatch,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("error vectors cover different documents")]
    CorpusMismatch,
    #[error("unknown doc_id {0}")]
    UnknownDocId(u32),
    #[error("layer {layer} out of range for {n_layers}-layer model")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("tap {0} is not a magnitude tap (expected r, z, or h)")]
    UnsupportedTap(Tap),
    #[error("fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

/// Per-example quantization errors over a corpus, aligned by doc_id.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorVector {
    /// `(doc_id, error)` in corpus order.
    pub entries: Vec<(u32, f64)>,
    pub base_digest: u64,
    pub quant_digest: u64,
}

impl ErrorVector {
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|&(_, e)| e).collect()
    }

    pub fn doc_ids(&self) -> Vec<u32> {
        self.entries.iter().map(|&(id, _)| id).collect()
    }

    fn same_documents(&self, other: &ErrorVector) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.0 == b.0)
    }
}

/// Per-example residual magnitudes at one layer and tap.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeVector {
    pub entries: Vec<(u32, f64)>,
    pub layer: usize,
    pub tap: Tap,
}

fn check_same_config(a: &ModelWeights, b: &ModelWeights) -> Result<(), MetricsError> {
    if a.config() != b.config() {
        return Err(MetricsError::ConfigMismatch);
    }
    Ok(())
}

/// Quantization error of one document: `nll(quant) - nll(base)`.
/// May be negative.
pub fn quant_error(
    base: &ModelWeights,
    quant: &ModelWeights,
    tokens: &[u32],
) -> Result<f64, MetricsError> {
    check_same_config(base, quant)?;
    Ok(nll(quant, tokens)? - nll(base, tokens)?)
}

/// Element-wise [`quant_error`] over a corpus, order preserved.
pub fn error_vector(
    base: &ModelWeights,
    quant: &ModelWeights,
    corpus: &TokenCorpus,
) -> Result<ErrorVector, MetricsError> {
    check_same_config(base, quant)?;
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut entries = Vec::with_capacity(corpus.len());
    for doc in corpus.documents() {
        entries.push((doc.doc_id, quant_error(base, quant, &doc.tokens)?));
    }
    Ok(ErrorVector {
        entries,
        base_digest: base.content_digest(),
        quant_digest: quant.content_digest(),
    })
}

/// Jaccard overlap of the top-`frac` document sets of two error vectors.
/// Ties at the cut are broken by ascending doc_id.
pub fn jaccard_top_fraction(
    e1: &ErrorVector,
    e2: &ErrorVector,
    frac: f64,
) -> Result<f64, MetricsError> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(MetricsError::BadFraction(frac));
    }
    if !e1.same_documents(e2) {
        return Err(MetricsError::CorpusMismatch);
    }
    let top = |e: &ErrorVector| -> alloc::collections::BTreeSet<u32> {
        let mut ranked = e.entries.clone();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let k = (math::ceil(frac * ranked.len() as f64) as usize).min(ranked.len());
        ranked[..k].iter().map(|&(id, _)| id).collect()
    };
    let a = top(e1);
    let b = top(e2);
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Mean Euclidean norm of the rows of a captured tap:
/// `(1/T) * sum_t ||row_t||_2`.
pub fn residual_magnitude(
    trace: &crate::runtime::ActivationTrace,
    layer: usize,
    tap: Tap,
) -> Result<f64, MetricsError> {
    let m = trace
        .get(layer, tap)
        .ok_or(RuntimeError::MissingTap { layer, tap })?;
    Ok(mean_row_norm(m))
}

fn mean_row_norm(m: &Matrix) -> f64 {
    let mut acc = 0.0f64;
    for t in 0..m.rows() {
        acc += l2_norm(m.row(t)) as f64;
    }
    acc / m.rows() as f64
}

fn magnitude_tap(tap: Tap) -> Result<Tap, MetricsError> {
    // "h" is the post-RMSNorm state ahead of the MLP.
    match tap {
        Tap::R | Tap::Z | Tap::H2 => Ok(tap),
        other => Err(MetricsError::UnsupportedTap(other)),
    }
}

fn check_layer(model: &ModelWeights, layer: usize) -> Result<(), MetricsError> {
    let n_layers = model.config().n_layers;
    if layer >= n_layers {
        return Err(MetricsError::LayerOutOfRange { layer, n_layers });
    }
    Ok(())
}

/// Per-document residual magnitude at `(layer, tap)` over a corpus.
pub fn magnitude_vector(
    model: &ModelWeights,
    corpus: &TokenCorpus,
    layer: usize,
    tap: Tap,
) -> Result<MagnitudeVector, MetricsError> {
    check_layer(model, layer)?;
    let tap = magnitude_tap(tap)?;
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let spec = TapSpec::single(layer, tap);
    let mut entries = Vec::with_capacity(corpus.len());
    for doc in corpus.documents() {
        let out = forward(model, &doc.tokens, &spec, None)?;
        entries.push((doc.doc_id, residual_magnitude(&out.trace, layer, tap)?));
    }
    Ok(MagnitudeVector { entries, layer, tap })
}

/// Pearson correlation between doc-aligned magnitudes and errors.
pub fn corr_magnitude_error(
    s: &MagnitudeVector,
    e: &ErrorVector,
) -> Result<f64, MetricsError> {
    if s.entries.len() != e.entries.len()
        || s.entries.iter().zip(&e.entries).any(|(a, b)| a.0 != b.0)
    {
        return Err(MetricsError::CorpusMismatch);
    }
    let a: Vec<f64> = s.entries.iter().map(|&(_, v)| v).collect();
    let b: Vec<f64> = e.entries.iter().map(|&(_, v)| v).collect();
    Ok(pearson(&a, &b)?)
}

/// Per-document kurtosis of all entries of a tap matrix, plus the corpus
/// mean.
#[derive(Debug, Clone, PartialEq)]
pub struct KurtosisProfile {
    pub per_doc: Vec<(u32, f64)>,
    pub mean: f64,
    pub layer: usize,
    pub tap: Tap,
}

/// Kurtosis of the residual (`r`) or post-RMSNorm (`h`) states at a layer.
pub fn layer_kurtosis(
    model: &ModelWeights,
    corpus: &TokenCorpus,
    layer: usize,
    tap: Tap,
) -> Result<KurtosisProfile, MetricsError> {
    check_layer(model, layer)?;
    let tap = magnitude_tap(tap)?;
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let spec = TapSpec::single(layer, tap);
    let mut per_doc = Vec::with_capacity(corpus.len());
    let mut total = 0.0f64;
    for doc in corpus.documents() {
        let out = forward(model, &doc.tokens, &spec, None)?;
        let m = out.trace.get(layer, tap).unwrap();
        let k = stats::kurtosis_f32(m.data())?;
        total += k;
        per_doc.push((doc.doc_id, k));
    }
    Ok(KurtosisProfile {
        mean: total / per_doc.len() as f64,
        per_doc,
        layer,
        tap,
    })
}

/// Mean squared difference between the MLP outputs of two models at one
/// layer, each computed from its own upstream states. For AWQ models pass
/// the scale-aligned base so activations are comparable.
pub fn layer_mse(
    base: &ModelWeights,
    quant: &ModelWeights,
    tokens: &[u32],
    layer: usize,
) -> Result<f64, MetricsError> {
    check_same_config(base, quant)?;
    check_layer(base, layer)?;
    let spec = TapSpec::single(layer, Tap::DownOut);
    let a = forward(base, tokens, &spec, None)?;
    let b = forward(quant, tokens, &spec, None)?;
    let ma = a.trace.get(layer, Tap::DownOut).unwrap();
    let mb = b.trace.get(layer, Tap::DownOut).unwrap();
    let mut acc = 0.0f64;
    for (x, y) in ma.data().iter().zip(mb.data()) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    Ok(acc / ma.data().len() as f64)
}

/// Mean KL divergence `KL(p_base || p_quant)` over predicted positions.
pub fn kl_error(
    base: &ModelWeights,
    quant: &ModelWeights,
    tokens: &[u32],
) -> Result<f64, MetricsError> {
    check_same_config(base, quant)?;
    if tokens.len() < 2 {
        return Err(RuntimeError::DocumentTooShort(tokens.len()).into());
    }
    let a = forward(base, tokens, &TapSpec::none(), None)?;
    let b = forward(quant, tokens, &TapSpec::none(), None)?;
    let mut total = 0.0f64;
    let n_pos = tokens.len() - 1;
    for t in 0..n_pos {
        let lp = log_softmax(a.logits.row(t));
        let lq = log_softmax(b.logits.row(t));
        let mut kl = 0.0f64;
        for (p_log, q_log) in lp.iter().zip(&lq) {
            kl += math::exp(*p_log) * (p_log - q_log);
        }
        total += kl;
    }
    Ok(total / n_pos as f64)
}

/// One outlier channel and where its RMSNorm weight ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaOutlier {
    /// Residual channel index.
    pub channel: usize,
    /// Rank of `|gamma|` among all channels; rank 1 is the smallest.
    pub rank: usize,
    pub abs_gamma: f64,
    /// Mean `|r|` of this channel over the corpus.
    pub mean_abs_r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaRankReport {
    pub layer: usize,
    pub median_abs_gamma: f64,
    /// Top-k channels by mean `|r|`, strongest first.
    pub outliers: Vec<GammaOutlier>,
}

/// Rank the `ln2` weights of the channels with the highest mean absolute
/// residual activation. Rank 1 means the smallest `|gamma|`; ties break by
/// channel index.
pub fn gamma_outlier_ranks(
    model: &ModelWeights,
    corpus: &TokenCorpus,
    layer: usize,
    k: usize,
) -> Result<GammaRankReport, MetricsError> {
    check_layer(model, layer)?;
    let d = model.config().d_model;
    assert!(k >= 1 && k <= d, "k must be in [1, d]");
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }

    let spec = TapSpec::single(layer, Tap::R);
    let mut channel_abs = alloc::vec![0.0f64; d];
    let mut positions = 0usize;
    for doc in corpus.documents() {
        let out = forward(model, &doc.tokens, &spec, None)?;
        let r = out.trace.get(layer, Tap::R).unwrap();
        for t in 0..r.rows() {
            for (acc, &v) in channel_abs.iter_mut().zip(r.row(t)) {
                *acc += v.abs() as f64;
            }
        }
        positions += r.rows();
    }
    for v in &mut channel_abs {
        *v /= positions as f64;
    }

    let mut by_activation: Vec<usize> = (0..d).collect();
    by_activation.sort_by(|&a, &b| {
        channel_abs[b]
            .partial_cmp(&channel_abs[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let gamma = &model.layers[layer].ln2;
    let rank_of = |c: usize| -> usize {
        let g = gamma[c].abs();
        1 + gamma
            .iter()
            .enumerate()
            .filter(|&(j, v)| {
                let vj = v.abs();
                vj < g || (vj == g && j < c)
            })
            .count()
    };

    let outliers = by_activation[..k]
        .iter()
        .map(|&c| GammaOutlier {
            channel: c,
            rank: rank_of(c),
            abs_gamma: gamma[c].abs() as f64,
            mean_abs_r: channel_abs[c],
        })
        .collect();

    Ok(GammaRankReport {
        layer,
        median_abs_gamma: stats::median_abs(gamma),
        outliers,
    })
}

/// Per-layer mean magnitudes of `r` and `h` for two document sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ReversalRow {
    pub layer: usize,
    pub mean_r_a: f64,
    pub mean_r_b: f64,
    pub mean_h_a: f64,
    pub mean_h_b: f64,
    /// Set A has the smaller residual magnitude but the larger
    /// post-RMSNorm magnitude at this layer.
    pub reversed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReversalReport {
    pub rows: Vec<ReversalRow>,
}

impl ReversalReport {
    pub fn flagged_layers(&self) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.reversed)
            .map(|r| r.layer)
            .collect()
    }
}

/// Compare mean `r` and `h` magnitudes of two document sets across layers,
/// flagging layers where RMSNorm reverses the ordering.
pub fn reversal_report(
    model: &ModelWeights,
    set_a: &[u32],
    set_b: &[u32],
    corpus: &TokenCorpus,
    layers: Range<usize>,
) -> Result<ReversalReport, MetricsError> {
    if layers.end > model.config().n_layers {
        return Err(MetricsError::LayerOutOfRange {
            layer: layers.end.saturating_sub(1),
            n_layers: model.config().n_layers,
        });
    }
    let docs_a = corpus.select(set_a).map_err(MetricsError::UnknownDocId)?;
    let docs_b = corpus.select(set_b).map_err(MetricsError::UnknownDocId)?;
    if docs_a.is_empty() || docs_b.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }

    let mut spec = TapSpec::none();
    for l in layers.clone() {
        spec.add(l, Tap::R);
        spec.add(l, Tap::H2);
    }

    // mean over docs of (mean row norm) per layer/tap, per set.
    let set_means = |docs: &[&crate::corpus::Document]| -> Result<Vec<(f64, f64)>, MetricsError> {
        let mut acc = alloc::vec![(0.0f64, 0.0f64); layers.len()];
        for doc in docs {
            let out = forward(model, &doc.tokens, &spec, None)?;
            for (i, l) in layers.clone().enumerate() {
                acc[i].0 += mean_row_norm(out.trace.get(l, Tap::R).unwrap());
                acc[i].1 += mean_row_norm(out.trace.get(l, Tap::H2).unwrap());
            }
        }
        let n = docs.len() as f64;
        Ok(acc.into_iter().map(|(r, h)| (r / n, h / n)).collect())
    };

    let means_a = set_means(&docs_a)?;
    let means_b = set_means(&docs_b)?;
    let rows = layers
        .clone()
        .enumerate()
        .map(|(i, layer)| {
            let (ra, ha) = means_a[i];
            let (rb, hb) = means_b[i];
            ReversalRow {
                layer,
                mean_r_a: ra,
                mean_r_b: rb,
                mean_h_a: ha,
                mean_h_b: hb,
                reversed: ra < rb && ha > hb,
            }
        })
        .collect();
    Ok(ReversalReport { rows })
}
