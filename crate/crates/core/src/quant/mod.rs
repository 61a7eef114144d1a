//! Weight-only quantization of a full model.
//!
//! All methods share one storage form: packed integer codes plus per-group
//! grid parameters, dequantized back to `f32` before any multiply. The
//! model-level driver walks layers in order; for calibrated methods (GPTQ,
//! AWQ) the calibration activations for layer `l` come from forwarding the
//! calibration corpus through the already-quantized layers below (the
//! original GPTQ convention; a flag switches to full-precision
//! propagation). AWQ scale vectors are folded into the producers of each
//! input — RMSNorm gammas for `q/k/v` and `gate/up`, `W_v` rows for `o`,
//! and `W_up` rows for `down` — so the quantized model needs no extra
//! division at run time and a matching "aligned" full-precision model is
//! available for activation comparisons.

pub mod awq;
pub mod gptq;
pub mod grid;
pub mod nf;

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::corpus::TokenCorpus;
use crate::runtime::{forward, RuntimeError, Tap, TapSpec};
use crate::tensor::Matrix;
use crate::weights::{ModelWeights, Projection};

pub use awq::AwqOptions;
pub use gptq::GptqOptions;

/// Identity sentinel for `QuantSpec::bits`: no quantization at all.
pub const IDENTITY_BITS: u8 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Rtn,
    Nf,
    Gptq,
    Awq,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Rtn, Method::Nf, Method::Gptq, Method::Awq];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rtn => "rtn",
            Method::Nf => "nf",
            Method::Gptq => "gptq",
            Method::Awq => "awq",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|m| m.name() == s)
    }
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuantError {
    #[error("unsupported bit width {0}")]
    UnsupportedBits(u8),
    #[error("group size {0} is invalid")]
    BadGroupSize(usize),
    #[error("damping coefficient {0} must be positive")]
    BadDamping(f64),
    #[error("damped Hessian is singular; try a larger damping than {damp}")]
    SingularHessian { damp: f64 },
    #[error("input width mismatch: weights expect {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("scale search needs at least one weight matrix")]
    EmptyWeightGroup,
    #[error("layer {layer} out of range for {n_layers}-layer model")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("calibration corpus vocab {corpus} does not match model vocab {model}")]
    VocabMismatch { model: usize, corpus: usize },
    #[error("quantizing layers.{layer}.{projection}: {source}")]
    AtProjection {
        layer: usize,
        projection: Projection,
        #[source]
        source: Box<QuantError>,
    },
    #[error("forward pass during calibration: {0}")]
    Runtime(#[from] RuntimeError),
}

/// Full quantization recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSpec {
    pub method: Method,
    /// 3 or 4; [`IDENTITY_BITS`] keeps every tensor in full precision.
    pub bits: u8,
    pub group_size: usize,
    pub gptq_damp: f64,
    pub gptq_act_sort: bool,
    pub awq_grid_steps: usize,
    /// Calibrate layer `l` on activations from already-quantized layers
    /// below (on) or from the untouched base model (off).
    pub propagate_quantized: bool,
    /// Test hook: run scale searches and folding but skip the
    /// quantize-dequantize arithmetic.
    pub disable_grid: bool,
}

impl QuantSpec {
    /// Default group size: 64 for 3-bit, 128 for 4-bit.
    pub fn default_group_size(bits: u8) -> usize {
        if bits == 3 {
            64
        } else {
            128
        }
    }

    pub fn new(method: Method, bits: u8) -> Result<Self, QuantError> {
        let spec = Self {
            method,
            bits,
            group_size: Self::default_group_size(bits),
            gptq_damp: 0.01,
            gptq_act_sort: true,
            awq_grid_steps: 20,
            propagate_quantized: true,
            disable_grid: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if !matches!(self.bits, 3 | 4 | IDENTITY_BITS) {
            return Err(QuantError::UnsupportedBits(self.bits));
        }
        if self.group_size == 0 {
            return Err(QuantError::BadGroupSize(self.group_size));
        }
        if !(self.gptq_damp > 0.0) {
            return Err(QuantError::BadDamping(self.gptq_damp));
        }
        if self.awq_grid_steps == 0 {
            return Err(QuantError::BadGroupSize(self.awq_grid_steps));
        }
        Ok(())
    }

    /// Short name like `gptq3`, used in reports and file names.
    pub fn label(&self) -> String {
        alloc::format!("{}{}", self.method.name(), self.bits)
    }

    fn is_identity(&self) -> bool {
        self.bits == IDENTITY_BITS
    }
}

/// Grid parameters per group, row-major over `(row, group)`.
#[derive(Debug, Clone, PartialEq)]
pub enum GridKind {
    /// Asymmetric uniform grid: `value = code * scale + min`.
    Uniform { scales: Vec<f32>, mins: Vec<f32> },
    /// Normalized codebook: `value = levels[code] * absmax`.
    Codebook { absmax: Vec<f32>, levels: Vec<f32> },
}

impl GridKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            GridKind::Uniform { .. } => "uniform",
            GridKind::Codebook { .. } => "codebook",
        }
    }
}

/// One quantized weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinear {
    pub bits: u8,
    pub group_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub grid: GridKind,
    /// Packed codes, each row padded to a whole 32-bit word.
    pub packed: Vec<u32>,
    /// Per-input-channel AWQ scales already multiplied into the stored
    /// codes; kept for serialization and provenance.
    pub awq_scales: Option<Vec<f32>>,
}

impl QuantizedLinear {
    pub fn n_groups(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn codes(&self) -> Vec<u8> {
        grid::unpack_codes(&self.packed, self.bits, self.rows, self.cols)
    }

    /// Reconstruct the effective `f32` weight matrix.
    pub fn dequantize(&self) -> Matrix {
        let codes = self.codes();
        let n_groups = self.n_groups();
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let g = r * n_groups + c / self.group_size;
                let code = codes[r * self.cols + c];
                let v = match &self.grid {
                    GridKind::Uniform { scales, mins } => code as f32 * scales[g] + mins[g],
                    GridKind::Codebook { absmax, levels } => levels[code as usize] * absmax[g],
                };
                out.set(r, c, v);
            }
        }
        out
    }
}

/// Per-projection quantization state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum ProjState {
    Quantized(QuantizedLinear),
    /// Keep the (aligned) full-precision tensor.
    FullPrecision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates {
    states: [ProjState; 7],
}

impl LayerStates {
    fn full_precision() -> Self {
        Self {
            states: core::array::from_fn(|_| ProjState::FullPrecision),
        }
    }

    pub fn get(&self, p: Projection) -> &ProjState {
        &self.states[Self::index(p)]
    }

    pub fn set(&mut self, p: Projection, s: ProjState) {
        self.states[Self::index(p)] = s;
    }

    fn index(p: Projection) -> usize {
        Projection::ALL.iter().position(|&q| q == p).unwrap()
    }
}

/// Where a quantized model came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub spec_label: String,
    pub base_digest: u64,
    pub calib_digest: u64,
}

/// A quantized model: per-projection states over a shared aligned base.
///
/// `aligned_base` is the full-precision model with any AWQ scale folding
/// applied (identical to the base for other methods); `weights` is the
/// ready-to-run dequantized model. Both are immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    spec: QuantSpec,
    states: Vec<LayerStates>,
    aligned_base: ModelWeights,
    weights: ModelWeights,
    provenance: Provenance,
}

impl QuantizedModel {
    /// Runnable dequantized weights.
    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    /// Full-precision model with the same activation alignment (AWQ scale
    /// folding) as the quantized one.
    pub fn aligned_base(&self) -> &ModelWeights {
        &self.aligned_base
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn state(&self, layer: usize, p: Projection) -> Option<&ProjState> {
        self.states.get(layer).map(|s| s.get(p))
    }

    pub fn n_layers(&self) -> usize {
        self.states.len()
    }

    /// Rebuild from stored parts (used by the file loader).
    pub fn from_parts(
        spec: QuantSpec,
        aligned_base: ModelWeights,
        states: Vec<LayerStates>,
        provenance: Provenance,
    ) -> Self {
        let weights = materialize(&aligned_base, &states);
        Self {
            spec,
            states,
            aligned_base,
            weights,
            provenance,
        }
    }

    pub fn layer_states(&self) -> &[LayerStates] {
        &self.states
    }

    /// Replace every projection in layers `>= from_layer` with its
    /// full-precision tensor.
    pub fn restore_layers(&self, from_layer: usize) -> Result<QuantizedModel, QuantError> {
        let n_layers = self.states.len();
        if from_layer > n_layers {
            return Err(QuantError::LayerOutOfRange {
                layer: from_layer,
                n_layers,
            });
        }
        let mut states = self.states.clone();
        for layer in states.iter_mut().skip(from_layer) {
            *layer = LayerStates::full_precision();
        }
        Ok(Self::from_parts(
            self.spec.clone(),
            self.aligned_base.clone(),
            states,
            self.provenance.clone(),
        ))
    }

    /// Restore one projection across a layer range.
    pub fn restore_projection(
        &self,
        projection: Projection,
        layers: Range<usize>,
    ) -> Result<QuantizedModel, QuantError> {
        let n_layers = self.states.len();
        if layers.end > n_layers {
            return Err(QuantError::LayerOutOfRange {
                layer: layers.end,
                n_layers,
            });
        }
        let mut states = self.states.clone();
        for l in layers {
            states[l].set(projection, ProjState::FullPrecision);
        }
        Ok(Self::from_parts(
            self.spec.clone(),
            self.aligned_base.clone(),
            states,
            self.provenance.clone(),
        ))
    }
}

fn materialize(aligned: &ModelWeights, states: &[LayerStates]) -> ModelWeights {
    let mut w = aligned.clone();
    for (l, layer_states) in states.iter().enumerate() {
        for p in Projection::ALL {
            if let ProjState::Quantized(q) = layer_states.get(p) {
                *w.layers[l].proj_mut(p) = q.dequantize();
            }
        }
    }
    w
}

/// Calibration activations for one layer.
struct LayerCalib {
    /// Input to q/k/v.
    h1: Matrix,
    /// Input to o (concatenated head mixture).
    mix: Matrix,
    /// Input to gate/up.
    h2: Matrix,
    /// Input to down (gate ⊙ up).
    glu: Matrix,
}

fn collect_layer_calib(
    model: &ModelWeights,
    calib: &TokenCorpus,
    layer: usize,
) -> Result<LayerCalib, QuantError> {
    let d = model.config().d_model;
    let ff = model.config().d_ff;
    let total: usize = calib.documents().iter().map(|doc| doc.tokens.len()).sum();
    let mut h1 = Matrix::zeros(total, d);
    let mut mix = Matrix::zeros(total, d);
    let mut h2 = Matrix::zeros(total, d);
    let mut glu = Matrix::zeros(total, ff);

    let mut taps = TapSpec::none();
    for tap in [Tap::H1, Tap::AttnMix, Tap::H2, Tap::GateOut, Tap::UpOut] {
        taps.add(layer, tap);
    }

    let mut row = 0usize;
    for doc in calib.documents() {
        let out = forward(model, &doc.tokens, &taps, None)?;
        let t = doc.tokens.len();
        let src_h1 = out.trace.get(layer, Tap::H1).unwrap();
        let src_mix = out.trace.get(layer, Tap::AttnMix).unwrap();
        let src_h2 = out.trace.get(layer, Tap::H2).unwrap();
        let gate = out.trace.get(layer, Tap::GateOut).unwrap();
        let up = out.trace.get(layer, Tap::UpOut).unwrap();
        for i in 0..t {
            h1.row_mut(row + i).copy_from_slice(src_h1.row(i));
            mix.row_mut(row + i).copy_from_slice(src_mix.row(i));
            h2.row_mut(row + i).copy_from_slice(src_h2.row(i));
            let dst = glu.row_mut(row + i);
            for (o, (&g, &u)) in dst.iter_mut().zip(gate.row(i).iter().zip(up.row(i))) {
                *o = g * u;
            }
        }
        row += t;
    }
    Ok(LayerCalib { h1, mix, h2, glu })
}

fn calib_input<'a>(calib: &'a LayerCalib, p: Projection) -> &'a Matrix {
    match p {
        Projection::Q | Projection::K | Projection::V => &calib.h1,
        Projection::O => &calib.mix,
        Projection::Gate | Projection::Up => &calib.h2,
        Projection::Down => &calib.glu,
    }
}

fn at_projection(layer: usize, projection: Projection) -> impl Fn(QuantError) -> QuantError {
    move |source| QuantError::AtProjection {
        layer,
        projection,
        source: Box::new(source),
    }
}

/// Quantize a whole model per `spec`, layers in order.
pub fn quantize_model(
    base: &ModelWeights,
    calib: &TokenCorpus,
    spec: &QuantSpec,
) -> Result<QuantizedModel, QuantError> {
    spec.validate()?;
    let cfg = *base.config();
    if calib.vocab_size() as usize != cfg.vocab_size {
        return Err(QuantError::VocabMismatch {
            model: cfg.vocab_size,
            corpus: calib.vocab_size() as usize,
        });
    }
    let provenance = Provenance {
        spec_label: spec.label(),
        base_digest: base.content_digest(),
        calib_digest: calib.content_digest(),
    };

    let n_layers = cfg.n_layers;
    let mut states: Vec<LayerStates> = (0..n_layers).map(|_| LayerStates::full_precision()).collect();

    if spec.is_identity() {
        return Ok(QuantizedModel::from_parts(
            spec.clone(),
            base.clone(),
            states,
            provenance,
        ));
    }

    let mut aligned = base.clone();
    // Propagation model: quantized below the current layer, base above.
    let mut current = base.clone();
    let needs_calib = matches!(spec.method, Method::Gptq | Method::Awq);

    for l in 0..n_layers {
        let layer_calib = if needs_calib {
            let source = if spec.propagate_quantized { &current } else { base };
            Some(collect_layer_calib(source, calib, l)?)
        } else {
            None
        };

        match spec.method {
            Method::Rtn => {
                if !spec.disable_grid {
                    for p in Projection::ALL {
                        let q = grid::rtn_quantize(aligned.layers[l].proj(p), spec.bits, spec.group_size)
                            .map_err(at_projection(l, p))?;
                        states[l].set(p, ProjState::Quantized(q));
                    }
                }
            }
            Method::Nf => {
                if !spec.disable_grid {
                    for p in Projection::ALL {
                        let q = nf::nf_quantize(aligned.layers[l].proj(p), spec.bits, spec.group_size)
                            .map_err(at_projection(l, p))?;
                        states[l].set(p, ProjState::Quantized(q));
                    }
                }
            }
            Method::Gptq => {
                let cal = layer_calib.as_ref().unwrap();
                let opts = GptqOptions {
                    bits: spec.bits,
                    group_size: spec.group_size,
                    damp: spec.gptq_damp,
                    act_sort: spec.gptq_act_sort,
                };
                if !spec.disable_grid {
                    for p in Projection::ALL {
                        let q = gptq::gptq_quantize(aligned.layers[l].proj(p), calib_input(cal, p), &opts)
                            .map_err(at_projection(l, p))?;
                        states[l].set(p, ProjState::Quantized(q));
                    }
                }
            }
            Method::Awq => {
                let cal = layer_calib.as_ref().unwrap();
                let opts = AwqOptions {
                    bits: spec.bits,
                    group_size: spec.group_size,
                    grid_steps: spec.awq_grid_steps,
                };
                let layer_w = &aligned.layers[l];
                let s_attn =
                    awq::search_scales(&[&layer_w.w_q, &layer_w.w_k, &layer_w.w_v], &cal.h1, &opts)
                        .map_err(at_projection(l, Projection::Q))?;
                let s_o = awq::search_scales(&[&layer_w.w_o], &cal.mix, &opts)
                    .map_err(at_projection(l, Projection::O))?;
                let s_mlp = awq::search_scales(&[&layer_w.w_gate, &layer_w.w_up], &cal.h2, &opts)
                    .map_err(at_projection(l, Projection::Gate))?;
                let s_down = awq::search_scales(&[&layer_w.w_down], &cal.glu, &opts)
                    .map_err(at_projection(l, Projection::Down))?;

                // Fold the inverse scales into the producers of each input
                // and the scales into the weight columns. The folded model
                // computes the same function as the base, so it doubles as
                // the activation-aligned reference.
                let layer_mut = &mut aligned.layers[l];
                for (g, &s) in layer_mut.ln1.iter_mut().zip(&s_attn) {
                    *g /= s;
                }
                for (j, &s) in s_attn.iter().enumerate() {
                    layer_mut.w_q.scale_col(j, s);
                    layer_mut.w_k.scale_col(j, s);
                    layer_mut.w_v.scale_col(j, s);
                }
                for (r, &s) in s_o.iter().enumerate() {
                    layer_mut.w_v.scale_row(r, 1.0 / s);
                }
                for (j, &s) in s_o.iter().enumerate() {
                    layer_mut.w_o.scale_col(j, s);
                }
                for (g, &s) in layer_mut.ln2.iter_mut().zip(&s_mlp) {
                    *g /= s;
                }
                for (j, &s) in s_mlp.iter().enumerate() {
                    layer_mut.w_gate.scale_col(j, s);
                    layer_mut.w_up.scale_col(j, s);
                }
                for (r, &s) in s_down.iter().enumerate() {
                    layer_mut.w_up.scale_row(r, 1.0 / s);
                }
                for (j, &s) in s_down.iter().enumerate() {
                    layer_mut.w_down.scale_col(j, s);
                }

                if !spec.disable_grid {
                    for p in Projection::ALL {
                        let mut q =
                            grid::rtn_quantize(aligned.layers[l].proj(p), spec.bits, spec.group_size)
                                .map_err(at_projection(l, p))?;
                        q.awq_scales = Some(match p {
                            Projection::Q | Projection::K | Projection::V => s_attn.clone(),
                            Projection::O => s_o.clone(),
                            Projection::Gate | Projection::Up => s_mlp.clone(),
                            Projection::Down => s_down.clone(),
                        });
                        states[l].set(p, ProjState::Quantized(q));
                    }
                }
            }
        }

        if spec.propagate_quantized {
            // Quantized (or folded) layer l becomes part of the calibration
            // path for layer l+1.
            current.layers[l] = aligned.layers[l].clone();
            for p in Projection::ALL {
                if let ProjState::Quantized(q) = states[l].get(p) {
                    *current.layers[l].proj_mut(p) = q.dequantize();
                }
            }
        }
    }

    Ok(QuantizedModel::from_parts(
        spec.clone(),
        aligned,
        states,
        provenance,
    ))
}
