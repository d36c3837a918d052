//! Compilation of DSL programs into transformer weights.
//!
//! The pipeline has four stages: the DSL program itself (run by
//! [`abstract_eval`](crate::dsl::abstract_eval)), the reduced graph of base
//! operations ([`reduce_to_base`], run by [`concrete_eval`]), the layer and
//! lane plan ([`plan_layers`]) and finally the weights ([`emit`]), run by
//! the [`engine`](crate::engine).

mod concrete;
mod emit;
mod plan;
mod primitives;
mod reduce;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{NodeRef, Program};
use crate::engine::ModelWeights;

pub use concrete::{concrete_eval, ConcreteEvaluator};
pub use emit::emit;
pub use plan::{plan_layers, LayerPlan};
pub use primitives::{
    attention_scale, build_attention_for_mean, build_reglu_for_mul, build_reglu_for_relu, AttentionApproxParams,
    MeanHead,
};
pub use reduce::{reduce_to_base, BaseId, BaseNode, BaseOp, ReducedGraph, INDEX_MARGIN};

/// Bound on `logit scale × context_len²`, the largest logit a position
/// lookup can produce.
pub const MAX_POSITIONAL_LOGIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloatWidth {
    F32,
    F64,
}

impl FloatWidth {
    pub fn bits(self) -> u32 {
        match self {
            FloatWidth::F32 => 32,
            FloatWidth::F64 => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(FloatWidth::F32),
            64 => Some(FloatWidth::F64),
            _ => None,
        }
    }

    /// Rounds `x` to this width.
    pub fn round(self, x: f64) -> f64 {
        match self {
            FloatWidth::F32 => x as f32 as f64,
            FloatWidth::F64 => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompilerConfig {
    /// Softmax logit gap between winning and losing positions.
    pub beta: f64,
    /// Score penalty used when building the SAT program.
    pub nonsep_penalty: f64,
    /// Longest sequence the weights must handle.
    pub context_len: usize,
    pub float_width: FloatWidth,
}

impl Default for CompilerConfig {
    fn default() -> Self {
        Self {
            beta: 20.0,
            nonsep_penalty: 20.0,
            context_len: 1024,
            float_width: FloatWidth::F32,
        }
    }
}

impl CompilerConfig {
    pub fn validate(&self) -> Result<(), CompileError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(CompileError::Config(format!(
                "beta must be positive and finite, got {}",
                self.beta
            )));
        }
        if self.context_len == 0 {
            return Err(CompileError::Config("context_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompileError {
    #[error("{0}: attention score margin cannot be certified")]
    Margin(NodeRef),
    #[error("{0} is not a Mean node")]
    NotMean(NodeRef),
    #[error("{node}: logit scale {alpha} over context {context_len} exceeds the supported range")]
    ContextTooLong {
        node: NodeRef,
        alpha: f64,
        context_len: usize,
    },
    #[error("residual lane count overflows")]
    LaneOverflow,
    #[error("{0}: emitted weight is not finite")]
    NonFinite(NodeRef),
    #[error("invalid compiler config: {0}")]
    Config(String),
}

/// Every intermediate stage of a compilation.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub reduced: ReducedGraph,
    pub plan: LayerPlan,
    pub weights: ModelWeights,
}

/// Runs reduction, planning and emission.
pub fn compile_stages(program: &Program, cfg: &CompilerConfig) -> Result<Compiled, CompileError> {
    cfg.validate()?;
    let reduced = reduce_to_base(program);
    let plan = plan_layers(&reduced)?;
    let weights = emit(&reduced, &plan, cfg)?;
    Ok(Compiled { reduced, plan, weights })
}

pub fn compile(program: &Program, cfg: &CompilerConfig) -> Result<ModelWeights, CompileError> {
    compile_stages(program, cfg).map(|c| c.weights)
}
