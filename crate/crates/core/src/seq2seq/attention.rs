use crate::compute::{NodeId, ParameterStore, Tape, Tensor};
use crate::error::ModelError;

/// Names of the attention and output parameters.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// `W_α`, `n × n`.
    pub score: String,
    /// `W`, `n × 2n`, applied to `[v; h_t]`.
    pub combine: String,
    /// `U`, `|V| × n`.
    pub output: String,
    /// `b`, `|V|`.
    pub output_bias: String,
    pub hidden: usize,
    pub vocab_size: usize,
}

impl AttentionParams {
    pub fn new(hidden: usize, vocab_size: usize) -> Self {
        AttentionParams {
            score: "att.score".into(),
            combine: "att.combine".into(),
            output: "out.w".into(),
            output_bias: "out.b".into(),
            hidden,
            vocab_size,
        }
    }

    pub fn register(&self, store: &mut ParameterStore) -> Result<(), ModelError> {
        let n = self.hidden;
        store.insert(&self.score, Tensor::zeros(&[n, n]))?;
        store.insert(&self.combine, Tensor::zeros(&[n, 2 * n]))?;
        store.insert(&self.output, Tensor::zeros(&[self.vocab_size, n]))?;
        store.insert(&self.output_bias, Tensor::zeros(&[self.vocab_size]))?;
        Ok(())
    }
}

/// Source-side attention memory: encoder top-layer states stacked as rows,
/// plus their projection `h_s W_αᵀ` so that `u = h_t · W_α h_s` is one
/// matrix product.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub states: NodeId,
    pub projected: NodeId,
}

impl Memory {
    pub fn new(tape: &mut Tape<'_>, states: NodeId, p: &AttentionParams) -> Result<Memory, ModelError> {
        let w = tape.param(&p.score)?;
        let projected = tape.linear(states, w)?;
        Ok(Memory { states, projected })
    }
}

/// `u_i = h_t · W_α h_i`, `α = softmax(u)` over the allowed memory rows,
/// `v = Σ α_i h_i`, `c = tanh(W [v; h_t])`. Returns `(c, α)`; `mask[r]`
/// lists which memory rows decoder row `r` may attend to.
pub fn attend(
    tape: &mut Tape<'_>,
    h_t: NodeId,
    memory: &Memory,
    mask: Option<&[Vec<bool>]>,
    p: &AttentionParams,
) -> Result<(NodeId, NodeId), ModelError> {
    let u = tape.matmul_t(h_t, memory.projected, false, true)?;
    let alpha = match mask {
        Some(m) => tape.masked_softmax(u, m)?,
        None => tape.softmax(u)?,
    };
    let v = tape.matmul(alpha, memory.states)?;
    let vh = tape.concat_cols(&[v, h_t])?;
    let w = tape.param(&p.combine)?;
    let c = tape.linear(vh, w)?;
    Ok((tape.tanh(c), alpha))
}

/// Pre-softmax output scores `U c + b`.
pub fn output_logits(tape: &mut Tape<'_>, c: NodeId, p: &AttentionParams) -> Result<NodeId, ModelError> {
    let u = tape.param(&p.output)?;
    let b = tape.param(&p.output_bias)?;
    Ok(tape.affine(c, u, b)?)
}
