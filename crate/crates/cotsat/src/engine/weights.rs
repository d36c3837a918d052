use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::compiler::CompilerConfig;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_emb: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
}

/// Residual lanes owned by one compiled node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneEntry {
    pub node: usize,
    pub kind: String,
    /// Name of the program node it came from, if any.
    pub name: Option<String>,
    pub start: usize,
    pub end: usize,
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEntry {
    /// 1-based block index.
    pub layer: usize,
    pub head: usize,
    pub node: usize,
    pub name: Option<String>,
    /// Logit multiplier applied to the abstract score.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

/// `((x·W_1 + b_1)[..d] ⊙ relu((x·W_1 + b_1)[d..]))·W_2 + b_2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w_1: Array2<f64>,
    pub b_1: Array1<f64>,
    pub w_2: Array2<f64>,
    pub b_2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    /// `(H·d_head) × d_emb`.
    pub w_o: Array2<f64>,
    pub mlp: MlpWeights,
}

/// A decoder-only transformer without normalization layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub vocab: Vocabulary,
    pub config: CompilerConfig,
    pub dims: Dims,
    /// Lane that receives the position index.
    pub position_lane: Option<usize>,
    pub token_embedding: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub lane_map: Vec<LaneEntry>,
    pub head_table: Vec<HeadEntry>,
    /// Free-form metadata about the compiled program.
    pub tags: BTreeMap<String, String>,
}

impl ModelWeights {
    /// A model with every weight zero, for tests and as an emission target.
    pub fn zeros(vocab: Vocabulary, config: CompilerConfig, dims: Dims) -> Self {
        let Dims {
            d_emb,
            d_head,
            d_mlp,
            n_layers,
            n_heads,
            vocab_size,
            ..
        } = dims;
        let layer = LayerWeights {
            heads: vec![
                HeadWeights {
                    w_q: Array2::zeros((d_emb, d_head)),
                    w_k: Array2::zeros((d_emb, d_head)),
                    w_v: Array2::zeros((d_emb, d_head)),
                };
                n_heads
            ],
            w_o: Array2::zeros((n_heads * d_head, d_emb)),
            mlp: MlpWeights {
                w_1: Array2::zeros((d_emb, 2 * d_mlp)),
                b_1: Array1::zeros(2 * d_mlp),
                w_2: Array2::zeros((d_mlp, d_emb)),
                b_2: Array1::zeros(d_emb),
            },
        };
        Self {
            vocab,
            config,
            dims,
            position_lane: None,
            token_embedding: Array2::zeros((vocab_size, d_emb)),
            layers: vec![layer; n_layers],
            w_out: Array2::zeros((d_emb, vocab_size)),
            b_out: Array1::zeros(vocab_size),
            lane_map: Vec::new(),
            head_table: Vec::new(),
            tags: BTreeMap::new(),
        }
    }

    /// Every tensor with its bundle name, in bundle order.
    pub fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = vec![("token_embedding".to_string(), TensorRef::Matrix(&self.token_embedding))];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layers.{l}.heads.{h}.w_q"), TensorRef::Matrix(&head.w_q)));
                out.push((format!("layers.{l}.heads.{h}.w_k"), TensorRef::Matrix(&head.w_k)));
                out.push((format!("layers.{l}.heads.{h}.w_v"), TensorRef::Matrix(&head.w_v)));
            }
            out.push((format!("layers.{l}.w_o"), TensorRef::Matrix(&layer.w_o)));
            out.push((format!("layers.{l}.mlp.w_1"), TensorRef::Matrix(&layer.mlp.w_1)));
            out.push((format!("layers.{l}.mlp.b_1"), TensorRef::Vector(&layer.mlp.b_1)));
            out.push((format!("layers.{l}.mlp.w_2"), TensorRef::Matrix(&layer.mlp.w_2)));
            out.push((format!("layers.{l}.mlp.b_2"), TensorRef::Vector(&layer.mlp.b_2)));
        }
        out.push(("w_out".to_string(), TensorRef::Matrix(&self.w_out)));
        out.push(("b_out".to_string(), TensorRef::Vector(&self.b_out)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters that are not zero.
    pub fn nonzero_count(&self) -> usize {
        self.tensors()
            .iter()
            .map(|(_, t)| t.values().filter(|&x| x != 0.0).count())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.values().all(f64::is_finite))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TensorRef<'a> {
    Matrix(&'a Array2<f64>),
    Vector(&'a Array1<f64>),
}

impl<'a> TensorRef<'a> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::Matrix(m) => vec![m.nrows(), m.ncols()],
            TensorRef::Vector(v) => vec![v.len()],
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorRef::Matrix(m) => m.len(),
            TensorRef::Vector(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values in row-major order.
    pub fn values(&self) -> Box<dyn Iterator<Item = f64> + 'a> {
        match *self {
            TensorRef::Matrix(m) => Box::new(m.iter().copied()),
            TensorRef::Vector(v) => Box::new(v.iter().copied()),
        }
    }
}
