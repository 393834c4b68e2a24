//! Reverse-mode differentiation over dense tensors, plus the AdamW optimizer
//! and the one-cycle learning-rate schedule used by the trainers.

mod checkpoint;
mod graph;
mod optim;
mod tensor;

pub use checkpoint::{NamedTensors, PARAM_MAGIC};
pub use graph::{Gradients, Graph, NodeId, ReprojLimits, ReprojTarget, LAYER_NORM_EPS, LOG_SIGMA_CLAMP};
pub use optim::{adamw_step, one_cycle_lr, AdamWConfig, OptimState};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Graph handles of one pre-norm cross-attention block.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionNodes {
    pub heads: usize,
    pub ln_q: (NodeId, NodeId),
    pub ln_kv: (NodeId, NodeId),
    pub wq: (NodeId, NodeId),
    pub wk: (NodeId, NodeId),
    pub wv: (NodeId, NodeId),
    pub wo: (NodeId, NodeId),
    pub ln_ff: (NodeId, NodeId),
    pub ff1: (NodeId, NodeId),
    pub ff2: (NodeId, NodeId),
}

/// Key/value projections of the map tokens for one block; they are shared by
/// every query that attends over the same tokens.
#[derive(Debug, Clone, Copy)]
pub struct KvProjection {
    pub keys: NodeId,
    pub values: NodeId,
}

pub fn project_kv<T: Real>(
    g: &mut Graph<T>,
    kv_toks: NodeId,
    block: &CrossAttentionNodes,
) -> Result<KvProjection, AutodiffError> {
    if g.value(kv_toks).as_matrix_dims().0 == 0 || g.value(kv_toks).is_empty() {
        return Err(AutodiffError::EmptyInput("cross_attention tokens"));
    }
    let c = g.layer_norm(kv_toks, block.ln_kv.0, block.ln_kv.1)?;
    let keys = g.linear(c, block.wk.0, block.wk.1)?;
    let values = g.linear(c, block.wv.0, block.wv.1)?;
    Ok(KvProjection { keys, values })
}

/// Cross-attention block applied to query rows `x` against precomputed
/// key/value projections: attention sublayer and GELU feed-forward sublayer,
/// each pre-normalized and wrapped in a residual connection.
pub fn cross_attention_with<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    kv: KvProjection,
    block: &CrossAttentionNodes,
) -> Result<NodeId, AutodiffError> {
    let h = g.layer_norm(x, block.ln_q.0, block.ln_q.1)?;
    let q = g.linear(h, block.wq.0, block.wq.1)?;
    let a = g.attention(q, kv.keys, kv.values, block.heads)?;
    let a = g.linear(a, block.wo.0, block.wo.1)?;
    let x1 = g.add(x, a)?;
    let f = g.layer_norm(x1, block.ln_ff.0, block.ln_ff.1)?;
    let f = g.linear(f, block.ff1.0, block.ff1.1)?;
    let f = g.gelu(f)?;
    let f = g.linear(f, block.ff2.0, block.ff2.1)?;
    g.add(x1, f)
}

/// Cross-attention of query tokens `query_tok` (`[d_model]` or `[n, d_model]`)
/// over key/value tokens `kv_toks` (`[m, d_kv]`).
pub fn cross_attention<T: Real>(
    g: &mut Graph<T>,
    query_tok: NodeId,
    kv_toks: NodeId,
    block: &CrossAttentionNodes,
) -> Result<NodeId, AutodiffError> {
    let kv = project_kv(g, kv_toks, block)?;
    cross_attention_with(g, query_tok, kv, block)
}
