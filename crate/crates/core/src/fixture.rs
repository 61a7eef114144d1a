//! Synthetic fixture models and corpora.
//!
//! The fixture is a real (if small) pre-LN GLU transformer with random
//! weights plus just enough wired-in structure for quantization to have
//! real function to damage:
//!
//! - Attention projections are noisy near-identity maps, which makes every
//!   head a self-attention head (RoPE rotates `q_t` and `k_t` identically,
//!   so the self score stays dominant). Each layer therefore re-amplifies
//!   the current token's embedding direction through quantizable weights.
//! - The unembedding mixes in a fraction of the token embedding. Together
//!   with the copy path this makes the model a genuine current-token
//!   predictor: documents built from long token runs get much lower NLL
//!   than uniform-random ones, and quantizing the attention path destroys
//!   measurable function instead of reshuffling noise.
//! - An optional outlier plan scales the `W_o`/`W_down` rows that write into
//!   a few chosen residual channels and suppresses the matching `ln2`
//!   entries, planting the "large residual outlier, small RMSNorm weight"
//!   configuration whose reversal behavior the metrics measure.

use alloc::vec;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::corpus::{Document, TokenCorpus, BOS_TOKEN};
use crate::rng::SeededRng;
use crate::tensor::Matrix;
use crate::weights::{LayerWeights, ModelWeights};

/// Channels to boost and how hard.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierPlan {
    /// Residual channels to turn into outlier dimensions.
    pub channels: Vec<usize>,
    /// Multiplier applied to the `W_o` / `W_down` rows writing each channel.
    pub boost: f32,
    /// Value written into `ln2` at each planted channel.
    pub gamma_suppress: f32,
}

impl OutlierPlan {
    /// Evenly spread `k` channels across the residual stream.
    pub fn spread(k: usize, d_model: usize, boost: f32, gamma_suppress: f32) -> Self {
        assert!(k <= d_model);
        let channels = (0..k).map(|i| i * d_model / k + d_model / (2 * k)).collect();
        Self {
            channels,
            boost,
            gamma_suppress,
        }
    }
}

/// Everything that defines a fixture model.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub config: ModelConfig,
    pub outliers: Option<OutlierPlan>,
}

impl FixtureSpec {
    /// The default desk-scale fixture: 6 layers, d=64, 4 heads, d_ff=256,
    /// vocabulary of 256.
    pub fn small() -> Self {
        Self {
            config: ModelConfig {
                n_layers: 6,
                d_model: 64,
                n_heads: 4,
                d_ff: 256,
                vocab_size: 256,
                max_seq: 512,
                rms_eps: ModelConfig::DEFAULT_RMS_EPS,
            },
            outliers: None,
        }
    }

    /// A minimal model for fast unit tests.
    pub fn tiny() -> Self {
        Self {
            config: ModelConfig {
                n_layers: 2,
                d_model: 16,
                n_heads: 2,
                d_ff: 32,
                vocab_size: 32,
                max_seq: 128,
                rms_eps: ModelConfig::DEFAULT_RMS_EPS,
            },
            outliers: None,
        }
    }

    pub fn with_outliers(mut self, plan: OutlierPlan) -> Self {
        self.outliers = Some(plan);
        self
    }
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize, sigma: f64) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push((rng.normal() * sigma) as f32);
    }
    Matrix::from_vec(rows, cols, data)
}

/// `gain * I` plus Gaussian noise; the self-attention copy path.
fn noisy_identity(rng: &mut SeededRng, n: usize, gain: f32, sigma: f64) -> Matrix {
    let mut m = random_matrix(rng, n, n, sigma);
    for i in 0..n {
        let v = m.get(i, i) + gain;
        m.set(i, i, v);
    }
    m
}

fn random_gamma(rng: &mut SeededRng, len: usize) -> Vec<f32> {
    // Centered near 1 with mild spread, strictly positive.
    (0..len)
        .map(|_| {
            let g = 1.0 + 0.2 * rng.normal();
            (g.abs().max(0.05)) as f32
        })
        .collect()
}

/// Deterministic pseudo-random weights for `spec` at `seed`.
pub fn generate(spec: &FixtureSpec, seed: u64) -> ModelWeights {
    let c = spec.config;
    c.validate().expect("fixture config");
    let d = c.d_model;
    let ff = c.d_ff;
    let proj_sigma = 1.0 / crate::math::sqrt(d as f64);
    let down_sigma = 1.0 / crate::math::sqrt(ff as f64);

    let embed = random_matrix(&mut SeededRng::fork(seed, "embed"), c.vocab_size, d, 1.0);

    // Self-attention gains: enough for the self score to dominate the
    // softmax, with a modest copy strength per layer.
    let qk_gain = 1.5f32;
    let copy_gain = 0.8f32;
    // GLU structure: every gate row shares one direction (a per-token
    // scalar controller), the up/down pair carries a noisy identity, so
    // the MLP amplifies the residual under the gate's control.
    let up_gain = 1.0f32;
    let down_gain = 0.6f32;

    let mut layers = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let mut rng = SeededRng::fork(seed, &alloc::format!("layer.{l}"));

        let gate_dir: Vec<f32> = (0..d).map(|_| (rng.normal() * 0.6) as f32).collect();
        let mut w_gate = random_matrix(&mut rng, ff, d, proj_sigma * 0.5);
        for row in 0..ff {
            for (col, &g) in gate_dir.iter().enumerate() {
                let v = w_gate.get(row, col) + g;
                w_gate.set(row, col, v);
            }
        }
        let mut w_up = random_matrix(&mut rng, ff, d, proj_sigma);
        for i in 0..d.min(ff) {
            let v = w_up.get(i, i) + up_gain;
            w_up.set(i, i, v);
        }
        let mut w_down = random_matrix(&mut rng, d, ff, down_sigma);
        for i in 0..d.min(ff) {
            let v = w_down.get(i, i) + down_gain;
            w_down.set(i, i, v);
        }

        let mut layer = LayerWeights {
            ln1: random_gamma(&mut rng, d),
            ln2: random_gamma(&mut rng, d),
            w_q: noisy_identity(&mut rng, d, qk_gain, proj_sigma),
            w_k: noisy_identity(&mut rng, d, qk_gain, proj_sigma),
            w_v: noisy_identity(&mut rng, d, copy_gain, proj_sigma),
            w_o: noisy_identity(&mut rng, d, copy_gain, proj_sigma),
            w_gate,
            w_up,
            w_down,
        };
        if let Some(plan) = &spec.outliers {
            for &ch in &plan.channels {
                assert!(ch < d, "outlier channel out of range");
                layer.w_o.scale_row(ch, plan.boost);
                layer.w_down.scale_row(ch, plan.boost);
                layer.ln2[ch] = plan.gamma_suppress;
            }
        }
        layers.push(layer);
    }

    let final_norm = random_gamma(&mut SeededRng::fork(seed, "final_norm"), d);
    // Partially tied unembedding: see the module docs.
    let mut unembed = random_matrix(&mut SeededRng::fork(seed, "unembed"), c.vocab_size, d, 0.25);
    for (u, e) in unembed.data_mut().iter_mut().zip(embed.data()) {
        *u += 0.12 * e;
    }

    ModelWeights::new(c, embed, layers, final_norm, unembed).expect("fixture weights")
}

/// Parameters of the seeded corpus sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub vocab_size: u32,
    pub n_docs: usize,
    /// Tokens per document, BOS included.
    pub doc_len: usize,
    /// First doc_id; lets calibration and evaluation corpora stay disjoint.
    pub start_doc_id: u32,
    /// Fraction of documents built from long token runs (placed first).
    pub low_entropy_frac: f64,
}

impl CorpusSpec {
    pub fn new(vocab_size: u32, n_docs: usize, doc_len: usize) -> Self {
        Self {
            vocab_size,
            n_docs,
            doc_len,
            start_doc_id: 0,
            low_entropy_frac: 0.5,
        }
    }

    pub fn starting_at(mut self, id: u32) -> Self {
        self.start_doc_id = id;
        self
    }

    pub fn with_low_entropy_frac(mut self, frac: f64) -> Self {
        self.low_entropy_frac = frac;
        self
    }

    /// Number of low-entropy documents (they occupy the first ids).
    pub fn n_low_entropy(&self) -> usize {
        (self.low_entropy_frac * self.n_docs as f64) as usize
    }
}

/// Sample a corpus: every document starts with BOS, bodies draw from
/// `[1, vocab)`, and the first `n_low_entropy()` documents are built from
/// runs of a tiny per-document alphabet.
pub fn sample_corpus(spec: &CorpusSpec, seed: u64) -> TokenCorpus {
    assert!(spec.doc_len >= 2, "documents need BOS plus one token");
    assert!(spec.vocab_size >= 8, "vocabulary too small to sample from");
    let n_low = spec.n_low_entropy();
    let mut docs = Vec::with_capacity(spec.n_docs);
    for i in 0..spec.n_docs {
        let doc_id = spec.start_doc_id + i as u32;
        let mut rng = SeededRng::fork(seed, &alloc::format!("doc.{doc_id}"));
        let body_len = spec.doc_len - 1;
        let mut tokens = vec![BOS_TOKEN];
        if i < n_low {
            // Small alphabet, long runs. Run length varies across the
            // subset so the corpus spans a continuum of repetitiveness.
            let switch_p = 0.01 + 0.45 * (i as f64 / n_low.max(1) as f64);
            let alphabet: Vec<u32> = (0..3)
                .map(|_| 1 + rng.below(spec.vocab_size - 1))
                .collect();
            let mut current = alphabet[rng.below(3) as usize];
            for _ in 0..body_len {
                if rng.uniform() < switch_p {
                    current = alphabet[rng.below(3) as usize];
                }
                tokens.push(current);
            }
        } else {
            for _ in 0..body_len {
                tokens.push(1 + rng.below(spec.vocab_size - 1));
            }
        }
        docs.push(Document { doc_id, tokens });
    }
    TokenCorpus::new(docs, spec.vocab_size, spec.doc_len).expect("sampled corpus")
}

/// Sample documents from the model itself by ancestral sampling (seeded,
/// temperature 1). Useful when a measurement needs data the model actually
/// assigns probability to, such as comparing NLL-based and KL-based errors.
pub fn sample_model_corpus(
    model: &ModelWeights,
    n_docs: usize,
    doc_len: usize,
    seed: u64,
) -> TokenCorpus {
    use crate::runtime::{forward, log_softmax, TapSpec};
    assert!(doc_len >= 2);
    let mut docs = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let mut rng = SeededRng::fork(seed, &alloc::format!("modeldoc.{i}"));
        let mut tokens = alloc::vec![BOS_TOKEN];
        for _ in 1..doc_len {
            let out = forward(model, &tokens, &TapSpec::none(), None).expect("sampling forward");
            let logp = log_softmax(out.logits.row(tokens.len() - 1));
            let u = rng.uniform();
            let mut acc = 0.0f64;
            let mut pick = logp.len() - 1;
            for (v, &lp) in logp.iter().enumerate() {
                acc += crate::math::exp(lp);
                if u < acc {
                    pick = v;
                    break;
                }
            }
            tokens.push(pick as u32);
        }
        docs.push(Document {
            doc_id: i as u32,
            tokens,
        });
    }
    TokenCorpus::new(docs, model.config().vocab_size as u32, doc_len).expect("sampled corpus")
}
