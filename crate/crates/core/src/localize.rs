//! Error localization: early exiting (logit lens) and cross-model
//! activation patching.
//!
//! Early exiting decodes an intermediate residual state through the final
//! RMSNorm and the unembedding, measuring how ready each layer's state is
//! for decoding. Patching caches selected activations from a clean model
//! and forces them onto a quantized model mid-forward, attributing error to
//! the overwritten module.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::corpus::TokenCorpus;
use crate::math;
use crate::quant::QuantizedModel;
use crate::runtime::{
    forward, nll, nll_from_logits, PatchSet, RuntimeError, Tap, TapSpec,
};
use crate::tensor::Matrix;
use crate::weights::ModelWeights;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LocalizeError {
    #[error("layer {layer} out of range for {n_layers}-layer model")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("early exit supports taps r and z, got {0}")]
    UnsupportedTap(Tap),
    #[error("tap {0} is not patchable")]
    NotPatchable(Tap),
    #[error("unknown doc_id {0}")]
    UnknownDocId(u32),
    #[error("document set is empty")]
    EmptyDocSet,
    #[error("exit profiles cover different layers")]
    ProfileMismatch,
    #[error("models have different configs")]
    ConfigMismatch,
    #[error(
        "exit profile inconsistent: z-exit at the last layer gives {exit}, model NLL is {direct}"
    )]
    ExitInconsistent { exit: f64, direct: f64 },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

fn exit_tap(tap: Tap) -> Result<Tap, LocalizeError> {
    match tap {
        Tap::R | Tap::Z => Ok(tap),
        other => Err(LocalizeError::UnsupportedTap(other)),
    }
}

/// Decode a captured tap matrix through the final norm and unembedding,
/// returning the NLL of the document under the early-exit distribution.
fn decode_state(model: &ModelWeights, state: &Matrix, tokens: &[u32]) -> Result<f64, LocalizeError> {
    let cfg = model.config();
    let mut h = alloc::vec![0.0f32; cfg.d_model];
    let mut logits = Matrix::zeros(state.rows(), cfg.vocab_size);
    for t in 0..state.rows() {
        // Final RMSNorm, then U.
        let row = state.row(t);
        let mut ss = 0.0f32;
        for &v in row {
            ss += v * v;
        }
        let inv = 1.0 / math::sqrtf(ss / row.len() as f32 + cfg.rms_eps);
        for ((hv, &v), &g) in h.iter_mut().zip(row).zip(&model.final_norm) {
            *hv = v * inv * g;
        }
        model.unembed.matvec(&h, logits.row_mut(t));
    }
    Ok(nll_from_logits(&logits, tokens)?)
}

/// NLL of decoding the `r` or `z` state at one layer.
pub fn early_exit_nll(
    model: &ModelWeights,
    tokens: &[u32],
    layer: usize,
    tap: Tap,
) -> Result<f64, LocalizeError> {
    let tap = exit_tap(tap)?;
    let n_layers = model.config().n_layers;
    if layer >= n_layers {
        return Err(LocalizeError::LayerOutOfRange { layer, n_layers });
    }
    let out = forward(model, tokens, &TapSpec::single(layer, tap), None)?;
    decode_state(model, out.trace.get(layer, tap).unwrap(), tokens)
}

/// Mean early-exit NLL per `(layer, tap)` over a document set.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitProfile {
    pub layers: Vec<usize>,
    /// Mean NLL decoding `r` at each layer, aligned with `layers`.
    pub r_nll: Vec<f64>,
    /// Mean NLL decoding `z` at each layer, aligned with `layers`.
    pub z_nll: Vec<f64>,
}

/// Run early exiting for every layer in `layers` over the given documents.
///
/// When the range includes the final layer, the `z`-exit there is checked
/// against the model's direct NLL; they are the same computation, so any
/// disagreement beyond float noise is an internal error.
pub fn exit_profile(
    model: &ModelWeights,
    doc_ids: &[u32],
    corpus: &TokenCorpus,
    layers: Range<usize>,
) -> Result<ExitProfile, LocalizeError> {
    let n_layers = model.config().n_layers;
    if layers.end > n_layers {
        return Err(LocalizeError::LayerOutOfRange {
            layer: layers.end.saturating_sub(1),
            n_layers,
        });
    }
    let docs = corpus.select(doc_ids).map_err(LocalizeError::UnknownDocId)?;
    if docs.is_empty() {
        return Err(LocalizeError::EmptyDocSet);
    }

    let mut spec = TapSpec::none();
    for l in layers.clone() {
        spec.add(l, Tap::R);
        spec.add(l, Tap::Z);
    }

    let mut r_nll = alloc::vec![0.0f64; layers.len()];
    let mut z_nll = alloc::vec![0.0f64; layers.len()];
    let mut direct = 0.0f64;
    for doc in &docs {
        let out = forward(model, &doc.tokens, &spec, None)?;
        for (i, l) in layers.clone().enumerate() {
            r_nll[i] += decode_state(model, out.trace.get(l, Tap::R).unwrap(), &doc.tokens)?;
            z_nll[i] += decode_state(model, out.trace.get(l, Tap::Z).unwrap(), &doc.tokens)?;
        }
        direct += nll_from_logits(&out.logits, &doc.tokens)?;
    }
    let n = docs.len() as f64;
    for v in r_nll.iter_mut().chain(z_nll.iter_mut()) {
        *v /= n;
    }
    direct /= n;

    if layers.end == n_layers && !layers.is_empty() {
        let exit = z_nll[layers.len() - 1];
        if (exit - direct).abs() > 1e-5 {
            return Err(LocalizeError::ExitInconsistent { exit, direct });
        }
    }

    Ok(ExitProfile {
        layers: layers.collect(),
        r_nll,
        z_nll,
    })
}

/// Smallest layer where the base and quantized exit profiles differ by more
/// than `threshold` nats on either tap, or `None` if they never do.
pub fn divergence_layer(
    base: &ExitProfile,
    quant: &ExitProfile,
    threshold: f64,
) -> Result<Option<usize>, LocalizeError> {
    if base.layers != quant.layers {
        return Err(LocalizeError::ProfileMismatch);
    }
    for (i, &layer) in base.layers.iter().enumerate() {
        let dr = (base.r_nll[i] - quant.r_nll[i]).abs();
        let dz = (base.z_nll[i] - quant.z_nll[i]).abs();
        if dr > threshold || dz > threshold {
            return Ok(Some(layer));
        }
    }
    Ok(None)
}

/// Default divergence threshold in nats.
pub const DIVERGENCE_THRESHOLD: f64 = 0.05;

/// A set of activations to restore from the clean model.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTarget {
    pub tap: Tap,
    pub layers: Vec<usize>,
}

impl PatchTarget {
    pub fn new(tap: Tap, layers: impl IntoIterator<Item = usize>) -> Result<Self, LocalizeError> {
        if !tap.patchable() {
            return Err(LocalizeError::NotPatchable(tap));
        }
        Ok(Self {
            tap,
            layers: layers.into_iter().collect(),
        })
    }

    /// `tap` over the upper half of an `n_layers` model, the granularity
    /// the perplexity tables use.
    pub fn upper_half(tap: Tap, n_layers: usize) -> Result<Self, LocalizeError> {
        Self::new(tap, n_layers / 2..n_layers)
    }

    pub fn label(&self) -> String {
        if self.layers.is_empty() {
            return alloc::format!("{}:none", self.tap);
        }
        let lo = self.layers.iter().min().unwrap();
        let hi = self.layers.iter().max().unwrap();
        alloc::format!("{}:{}-{}", self.tap, lo, hi)
    }
}

fn check_target(model: &ModelWeights, targets: &[&PatchTarget]) -> Result<(), LocalizeError> {
    let n_layers = model.config().n_layers;
    for t in targets {
        if !t.tap.patchable() {
            return Err(LocalizeError::NotPatchable(t.tap));
        }
        for &l in &t.layers {
            if l >= n_layers {
                return Err(LocalizeError::LayerOutOfRange { layer: l, n_layers });
            }
        }
    }
    Ok(())
}

/// Run `quant` on a document with the targeted activations replaced by the
/// clean model's, and return the resulting NLL.
///
/// Phase 1 runs `base` and caches the target taps; phase 2 runs `quant`
/// with those values forced in before downstream consumption. For AWQ
/// models the caller must pass the scale-aligned base (see
/// [`QuantizedModel::aligned_base`]) so cached activations live on the same
/// scale as the quantized model's.
pub fn patch_run_models(
    base: &ModelWeights,
    quant: &ModelWeights,
    tokens: &[u32],
    targets: &[&PatchTarget],
) -> Result<f64, LocalizeError> {
    if base.config() != quant.config() {
        return Err(LocalizeError::ConfigMismatch);
    }
    check_target(base, targets)?;

    let mut spec = TapSpec::none();
    for t in targets {
        for &l in &t.layers {
            spec.add(l, t.tap);
        }
    }
    if spec.is_empty() {
        return Ok(nll(quant, tokens)?);
    }

    let mut clean = forward(base, tokens, &spec, None)?;
    let mut patches = PatchSet::new();
    for t in targets {
        for &l in &t.layers {
            let cached = clean
                .trace
                .take(l, t.tap)
                .expect("requested tap was captured");
            patches.insert(l, t.tap, cached)?;
        }
    }
    let out = forward(quant, tokens, &TapSpec::none(), Some(&patches))?;
    Ok(nll_from_logits(&out.logits, tokens)?)
}

/// [`patch_run_models`] with the aligned base drawn from the quantized
/// model itself.
pub fn patch_run(
    qm: &QuantizedModel,
    tokens: &[u32],
    target: &PatchTarget,
) -> Result<f64, LocalizeError> {
    patch_run_models(qm.aligned_base(), qm.weights(), tokens, &[target])
}

/// Perplexity table for a list of patch targets over a document set.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchReport {
    /// exp(mean NLL) of the full-precision model.
    pub base_ppl: f64,
    /// exp(mean NLL) of the quantized model, unpatched.
    pub quant_ppl: f64,
    /// One `(label, perplexity)` row per target.
    pub rows: Vec<(String, f64)>,
}

/// Build the patching table: baselines plus one perplexity per target.
pub fn patch_report(
    qm: &QuantizedModel,
    doc_ids: &[u32],
    corpus: &TokenCorpus,
    targets: &[PatchTarget],
) -> Result<PatchReport, LocalizeError> {
    let docs = corpus.select(doc_ids).map_err(LocalizeError::UnknownDocId)?;
    if docs.is_empty() {
        return Err(LocalizeError::EmptyDocSet);
    }
    let base = qm.aligned_base();
    let quant = qm.weights();
    check_target(base, &targets.iter().collect::<Vec<_>>())?;

    let mean_ppl = |nlls: &[f64]| -> f64 {
        math::exp(nlls.iter().sum::<f64>() / nlls.len() as f64)
    };

    let mut base_nlls = Vec::with_capacity(docs.len());
    let mut quant_nlls = Vec::with_capacity(docs.len());
    for doc in &docs {
        base_nlls.push(nll(base, &doc.tokens)?);
        quant_nlls.push(nll(quant, &doc.tokens)?);
    }

    let mut rows = Vec::with_capacity(targets.len());
    for target in targets {
        let mut nlls = Vec::with_capacity(docs.len());
        for doc in &docs {
            nlls.push(patch_run_models(base, quant, &doc.tokens, &[target])?);
        }
        rows.push((target.label(), mean_ppl(&nlls)));
    }

    Ok(PatchReport {
        base_ppl: mean_ppl(&base_nlls),
        quant_ppl: mean_ppl(&quant_nlls),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{self, CorpusSpec, FixtureSpec};
    use crate::quant::{quantize_model, Method, QuantSpec};

    fn setup() -> (ModelWeights, TokenCorpus, QuantizedModel) {
        let model = fixture::generate(&FixtureSpec::tiny(), 42);
        let corpus = fixture::sample_corpus(&CorpusSpec::new(32, 5, 12), 7);
        let spec = QuantSpec::new(Method::Rtn, 3).unwrap();
        let qm = quantize_model(&model, &corpus, &spec).unwrap();
        (model, corpus, qm)
    }

    #[test]
    fn z_exit_at_last_layer_equals_model_nll() {
        let (model, corpus, _) = setup();
        let last = model.config().n_layers - 1;
        for doc in corpus.documents() {
            let exit = early_exit_nll(&model, &doc.tokens, last, Tap::Z).unwrap();
            let direct = nll(&model, &doc.tokens).unwrap();
            assert!((exit - direct).abs() < 1e-6, "{exit} vs {direct}");
        }
    }

    #[test]
    fn one_layer_model_r_exit_matches_manual_decode() {
        let spec = FixtureSpec {
            config: crate::config::ModelConfig {
                n_layers: 1,
                d_model: 16,
                n_heads: 2,
                d_ff: 32,
                vocab_size: 32,
                max_seq: 64,
                rms_eps: 1e-6,
            },
            outliers: None,
        };
        let model = fixture::generate(&spec, 5);
        let tokens = [0u32, 3, 9, 2];
        let got = early_exit_nll(&model, &tokens, 0, Tap::R).unwrap();
        // Manual oracle: capture r, apply final norm + unembed + NLL.
        let out = forward(&model, &tokens, &TapSpec::single(0, Tap::R), None).unwrap();
        let r = out.trace.get(0, Tap::R).unwrap();
        let mut logits = Matrix::zeros(r.rows(), model.config().vocab_size);
        for t in 0..r.rows() {
            let h = crate::runtime::rmsnorm(r.row(t), &model.final_norm, model.config().rms_eps)
                .unwrap();
            model.unembed.matvec(&h, logits.row_mut(t));
        }
        let oracle = nll_from_logits(&logits, &tokens).unwrap();
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn uniform_model_exits_at_ln_v_everywhere() {
        let (mut model, corpus, _) = setup();
        model.unembed = Matrix::zeros(model.config().vocab_size, model.config().d_model);
        let doc = &corpus.documents()[0].tokens;
        let ln_v = math::ln(model.config().vocab_size as f64);
        for l in 0..model.config().n_layers {
            for tap in [Tap::R, Tap::Z] {
                let v = early_exit_nll(&model, doc, l, tap).unwrap();
                assert!((v - ln_v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn exit_profile_aggregates_and_checks_consistency() {
        let (model, corpus, _) = setup();
        let ids: Vec<u32> = corpus.documents().iter().map(|d| d.doc_id).collect();
        let profile = exit_profile(&model, &ids, &corpus, 0..model.config().n_layers).unwrap();
        assert_eq!(profile.layers.len(), model.config().n_layers);
        // Mean of per-doc early exits matches by construction.
        let last = model.config().n_layers - 1;
        let manual: f64 = corpus
            .documents()
            .iter()
            .map(|d| early_exit_nll(&model, &d.tokens, last, Tap::R).unwrap())
            .sum::<f64>()
            / corpus.len() as f64;
        assert!((profile.r_nll[last] - manual).abs() < 1e-9);
    }

    #[test]
    fn divergence_layer_on_synthetic_profiles() {
        let base = ExitProfile {
            layers: vec![0, 1, 2, 3],
            r_nll: vec![1.0; 4],
            z_nll: vec![1.0; 4],
        };
        let mut q = base.clone();
        assert_eq!(divergence_layer(&base, &q, 0.05).unwrap(), None);
        q.z_nll[2] += 0.1;
        assert_eq!(divergence_layer(&base, &q, 0.05).unwrap(), Some(2));

        let other = ExitProfile {
            layers: vec![1, 2],
            r_nll: vec![1.0; 2],
            z_nll: vec![1.0; 2],
        };
        assert!(divergence_layer(&base, &other, 0.05).is_err());
    }

    #[test]
    fn empty_patch_equals_quant_nll() {
        let (_, corpus, qm) = setup();
        let doc = &corpus.documents()[0].tokens;
        let target = PatchTarget::new(Tap::DownOut, []).unwrap();
        let got = patch_run(&qm, doc, &target).unwrap();
        let direct = nll(qm.weights(), doc).unwrap();
        assert_eq!(got, direct);
    }

    #[test]
    fn full_residual_patch_recovers_base() {
        let (model, corpus, qm) = setup();
        let n = model.config().n_layers;
        let attn = PatchTarget::new(Tap::AttnOut, 0..n).unwrap();
        let down = PatchTarget::new(Tap::DownOut, 0..n).unwrap();
        for doc in corpus.documents() {
            let patched =
                patch_run_models(qm.aligned_base(), qm.weights(), &doc.tokens, &[&attn, &down])
                    .unwrap();
            let base = nll(&model, &doc.tokens).unwrap();
            assert!((patched - base).abs() < 1e-5, "{patched} vs {base}");
        }
    }

    #[test]
    fn patch_neutrality_on_identical_models() {
        let (model, corpus, _) = setup();
        let doc = &corpus.documents()[1].tokens;
        let n = model.config().n_layers;
        for tap in [Tap::AttnOut, Tap::GateOut, Tap::UpOut, Tap::DownOut, Tap::GateIn] {
            let target = PatchTarget::new(tap, 0..n).unwrap();
            let patched = patch_run_models(&model, &model, doc, &[&target]).unwrap();
            let direct = nll(&model, doc).unwrap();
            assert!((patched - direct).abs() < 1e-6, "{tap}: {patched} vs {direct}");
        }
    }

    #[test]
    fn monotone_containment_traces_agree_on_patched_layers() {
        let (_, corpus, qm) = setup();
        let doc = &corpus.documents()[2].tokens;
        // Patch down_out at {1} vs {0, 1}; the patched layers' down_out in
        // the run equals the base trace exactly.
        let base_spec = TapSpec::all_layers(Tap::DownOut, 2);
        let clean = forward(qm.aligned_base(), doc, &base_spec, None).unwrap();
        for layers in [vec![1usize], vec![0usize, 1]] {
            let mut patches = PatchSet::new();
            for &l in &layers {
                patches
                    .insert(l, Tap::DownOut, clean.trace.get(l, Tap::DownOut).unwrap().clone())
                    .unwrap();
            }
            let out = forward(qm.weights(), doc, &base_spec, Some(&patches)).unwrap();
            for &l in &layers {
                assert_eq!(
                    out.trace.get(l, Tap::DownOut).unwrap(),
                    clean.trace.get(l, Tap::DownOut).unwrap()
                );
            }
        }
    }

    #[test]
    fn gate_in_patch_leaves_up_path_alone() {
        let (_, corpus, qm) = setup();
        let doc = &corpus.documents()[0].tokens;
        // Patching gate_in with the quantized model's own h2 is a no-op.
        let spec = TapSpec::single(1, Tap::H2);
        let own = forward(qm.weights(), doc, &spec, None).unwrap();
        let mut patches = PatchSet::new();
        patches
            .insert(1, Tap::GateIn, own.trace.get(1, Tap::H2).unwrap().clone())
            .unwrap();
        let patched = forward(qm.weights(), doc, &TapSpec::none(), Some(&patches)).unwrap();
        let plain = forward(qm.weights(), doc, &TapSpec::none(), None).unwrap();
        assert_eq!(patched.logits.data(), plain.logits.data());

        // Patching gate_in with the base's h2 differs from patching up_out:
        // only the gate path moves.
        let gate_in = PatchTarget::new(Tap::GateIn, [1usize]).unwrap();
        let up_out = PatchTarget::new(Tap::UpOut, [1usize]).unwrap();
        let a = patch_run(&qm, doc, &gate_in).unwrap();
        let b = patch_run(&qm, doc, &up_out).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn patch_report_shapes_and_baselines() {
        let (model, corpus, qm) = setup();
        let ids: Vec<u32> = corpus.documents().iter().map(|d| d.doc_id).collect();
        let n = model.config().n_layers;
        let targets = vec![
            PatchTarget::upper_half(Tap::GateOut, n).unwrap(),
            PatchTarget::upper_half(Tap::UpOut, n).unwrap(),
        ];
        let report = patch_report(&qm, &ids, &corpus, &targets).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.base_ppl > 0.0 && report.quant_ppl > 0.0);

        // Empty target list: only the baselines.
        let bare = patch_report(&qm, &ids, &corpus, &[]).unwrap();
        assert!(bare.rows.is_empty());
        assert_eq!(bare.base_ppl, report.base_ppl);

        // base == quant collapses every number to the same value.
        let id_spec = QuantSpec::new(Method::Rtn, crate::quant::IDENTITY_BITS).unwrap();
        let id_qm = quantize_model(&model, &corpus, &id_spec).unwrap();
        let same = patch_report(&id_qm, &ids, &corpus, &targets).unwrap();
        assert!((same.base_ppl - same.quant_ppl).abs() < 1e-9);
        for (_, ppl) in &same.rows {
            assert!((ppl - same.base_ppl).abs() < 1e-6);
        }
    }

    #[test]
    fn patch_rejects_out_of_range_layer() {
        let (_, corpus, qm) = setup();
        let doc = &corpus.documents()[0].tokens;
        let target = PatchTarget::new(Tap::DownOut, [99usize]).unwrap();
        assert!(matches!(
            patch_run(&qm, doc, &target),
            Err(LocalizeError::LayerOutOfRange { layer: 99, .. })
        ));
    }
}
