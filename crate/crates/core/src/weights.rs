//! Full-precision model weights.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::config::ModelConfig;
use crate::tensor::Matrix;

/// The seven quantizable projections of one transformer layer.
///
/// Embeddings, the unembedding, and all RMSNorm weights stay in full
/// precision; attention and MLP projections are the quantization surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::Gate => "gate",
            Projection::Up => "up",
            Projection::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|p| p.name() == s)
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Weights of a single layer. Projections are stored `(out_dim x in_dim)`,
/// so `y = W * x`; quantization groups run along the input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// RMSNorm weights ahead of attention.
    pub ln1: Vec<f32>,
    /// RMSNorm weights ahead of the MLP.
    pub ln2: Vec<f32>,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl LayerWeights {
    pub fn proj(&self, p: Projection) -> &Matrix {
        match p {
            Projection::Q => &self.w_q,
            Projection::K => &self.w_k,
            Projection::V => &self.w_v,
            Projection::O => &self.w_o,
            Projection::Gate => &self.w_gate,
            Projection::Up => &self.w_up,
            Projection::Down => &self.w_down,
        }
    }

    pub fn proj_mut(&mut self, p: Projection) -> &mut Matrix {
        match p {
            Projection::Q => &mut self.w_q,
            Projection::K => &mut self.w_k,
            Projection::V => &mut self.w_v,
            Projection::O => &mut self.w_o,
            Projection::Gate => &mut self.w_gate,
            Projection::Up => &mut self.w_up,
            Projection::Down => &mut self.w_down,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WeightsError {
    #[error("tensor {name} has shape {got}, expected {want}")]
    Shape {
        name: String,
        got: String,
        want: String,
    },
    #[error("tensor {0} contains non-finite values")]
    NonFinite(String),
    #[error("config invalid: {0}")]
    Config(#[from] crate::config::ConfigError),
}

/// Immutable named tensor set for the full model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    /// Token embedding, `V x d`.
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    /// Final RMSNorm weights applied before the unembedding.
    pub final_norm: Vec<f32>,
    /// Output embedding `U`, `V x d`.
    pub unembed: Matrix,
}

impl ModelWeights {
    pub fn new(
        config: ModelConfig,
        embed: Matrix,
        layers: Vec<LayerWeights>,
        final_norm: Vec<f32>,
        unembed: Matrix,
    ) -> Result<Self, WeightsError> {
        config.validate()?;
        let model = Self {
            config,
            embed,
            layers,
            final_norm,
            unembed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn validate(&self) -> Result<(), WeightsError> {
        let c = &self.config;
        let (d, ff, v) = (c.d_model, c.d_ff, c.vocab_size);
        let check = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<(), WeightsError> {
            if m.rows() != rows || m.cols() != cols {
                return Err(WeightsError::Shape {
                    name: name.into(),
                    got: alloc::format!("{}x{}", m.rows(), m.cols()),
                    want: alloc::format!("{rows}x{cols}"),
                });
            }
            if !m.is_finite() {
                return Err(WeightsError::NonFinite(name.into()));
            }
            Ok(())
        };
        let check_vec = |name: &str, x: &[f32], len: usize| -> Result<(), WeightsError> {
            if x.len() != len {
                return Err(WeightsError::Shape {
                    name: name.into(),
                    got: alloc::format!("{}", x.len()),
                    want: alloc::format!("{len}"),
                });
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(WeightsError::NonFinite(name.into()));
            }
            Ok(())
        };

        check("embed", &self.embed, v, d)?;
        check("unembed", &self.unembed, v, d)?;
        check_vec("final_norm", &self.final_norm, d)?;
        if self.layers.len() != c.n_layers {
            return Err(WeightsError::Shape {
                name: "layers".into(),
                got: alloc::format!("{}", self.layers.len()),
                want: alloc::format!("{}", c.n_layers),
            });
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let tag = |p: &str| alloc::format!("layers.{l}.{p}");
            check_vec(&tag("ln1"), &layer.ln1, d)?;
            check_vec(&tag("ln2"), &layer.ln2, d)?;
            check(&tag("q"), &layer.w_q, d, d)?;
            check(&tag("k"), &layer.w_k, d, d)?;
            check(&tag("v"), &layer.w_v, d, d)?;
            check(&tag("o"), &layer.w_o, d, d)?;
            check(&tag("gate"), &layer.w_gate, ff, d)?;
            check(&tag("up"), &layer.w_up, ff, d)?;
            check(&tag("down"), &layer.w_down, d, ff)?;
        }
        Ok(())
    }

    /// FNV-1a digest over every tensor in canonical order. Cheap, stable
    /// identity for provenance records; file-level integrity uses real
    /// hashes in the IO layer.
    pub fn content_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        self.visit_tensors(|name, _, data| {
            mix(name.as_bytes());
            for v in data {
                mix(&v.to_le_bytes());
            }
        });
        h
    }

    /// Visit every tensor in canonical order with its canonical name.
    /// Drives serialization and content digests.
    pub fn visit_tensors<F: FnMut(&str, &[usize], &[f32])>(&self, mut f: F) {
        let d = self.config.d_model;
        f("embed", &[self.embed.rows(), self.embed.cols()], self.embed.data());
        for (l, layer) in self.layers.iter().enumerate() {
            let name = |p: &str| alloc::format!("layers.{l}.{p}");
            f(&name("ln1"), &[d], &layer.ln1);
            for p in Projection::ALL {
                if matches!(p, Projection::Gate) {
                    f(&name("ln2"), &[d], &layer.ln2);
                }
                let m = layer.proj(p);
                f(&name(p.name()), &[m.rows(), m.cols()], m.data());
            }
        }
        f("final_norm", &[d], &self.final_norm);
        f(
            "unembed",
            &[self.unembed.rows(), self.unembed.cols()],
            self.unembed.data(),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{self, FixtureSpec};

    #[test]
    fn fixture_weights_validate() {
        let model = fixture::generate(&FixtureSpec::small(), 42);
        assert!(model.validate().is_ok());
    }

    #[test]
    fn shape_error_reported_with_name() {
        let mut model = fixture::generate(&FixtureSpec::small(), 42);
        model.layers[1].w_gate = Matrix::zeros(3, 3);
        let err = model.validate().unwrap_err();
        match err {
            WeightsError::Shape { name, .. } => assert_eq!(name, "layers.1.gate"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn visit_order_is_stable() {
        let model = fixture::generate(&FixtureSpec::tiny(), 1);
        let mut names = alloc::vec::Vec::new();
        model.visit_tensors(|n, _, _| names.push(alloc::string::String::from(n)));
        assert_eq!(names.first().map(|s| s.as_str()), Some("embed"));
        assert_eq!(names.last().map(|s| s.as_str()), Some("unembed"));
        assert!(names.contains(&alloc::string::String::from("layers.0.ln2")));
        // ln2 must come right before gate.
        let i = names.iter().position(|n| n == "layers.0.ln2").unwrap();
        assert_eq!(names[i + 1], "layers.0.gate");
    }
}
