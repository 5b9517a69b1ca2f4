//! Multi-head cross-attention layer and feed-forward block shared by the
//! attribute→visual and visual→attribute decoders. The two decoders differ
//! only in which side supplies queries and which supplies keys/values.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{self, Tensor};

#[derive(Clone, Debug)]
pub struct HeadParams<T> {
    /// query-in × τ
    pub wq: Tensor<T>,
    /// kv-in × τ
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams<T> {
    pub heads: Vec<HeadParams<T>>,
    /// (T·τ) × d output projection.
    pub wo: Tensor<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
}

pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

pub struct DecoderLayerVars {
    pub heads: Vec<HeadVars>,
    pub wo: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

impl<T: Scalar> DecoderLayerParams<T> {
    pub fn register(&self, tape: &mut Tape<T>) -> DecoderLayerVars {
        DecoderLayerVars {
            heads: self
                .heads
                .iter()
                .map(|h| HeadVars {
                    wq: tape.leaf(h.wq.clone()),
                    wk: tape.leaf(h.wk.clone()),
                    wv: tape.leaf(h.wv.clone()),
                })
                .collect(),
            wo: tape.leaf(self.wo.clone()),
            ffn_w1: tape.leaf(self.ffn_w1.clone()),
            ffn_b1: tape.leaf(self.ffn_b1.clone()),
            ffn_w2: tape.leaf(self.ffn_w2.clone()),
            ffn_b2: tape.leaf(self.ffn_b2.clone()),
        }
    }
}

/// Multi-head cross attention: per head softmax(Q_t K_tᵀ/√τ)·V_t, heads
/// concatenated and projected by W_o.
///
/// Returns the projected output (m×d) and the head-averaged attention matrix
/// (m×n) retained as plain values for export.
pub fn cross_attend<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    keys_values: Var,
    layer: &DecoderLayerVars,
) -> Result<(Var, Tensor<T>)> {
    let q_in = tape.value(queries).cols();
    let kv_in = tape.value(keys_values).cols();
    let mut head_outs = Vec::with_capacity(layer.heads.len());
    let mut attn_acc: Option<Tensor<T>> = None;

    for head in &layer.heads {
        if tape.value(head.wq).rows() != q_in {
            return Err(Error::shape(
                "cross_attend",
                format!("query width {}", tape.value(head.wq).rows()),
                format!("{q_in}"),
            ));
        }
        if tape.value(head.wk).rows() != kv_in || tape.value(head.wv).rows() != kv_in {
            return Err(Error::shape(
                "cross_attend",
                format!("key/value width {}", tape.value(head.wk).rows()),
                format!("{kv_in}"),
            ));
        }
        let tau = tape.value(head.wq).cols();
        let q = tape.matmul(queries, head.wq)?;
        let k = tape.matmul(keys_values, head.wk)?;
        let v = tape.matmul(keys_values, head.wv)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let scaled = tape.scale(logits, T::from_f64(1.0 / (tau as f64).sqrt()))?;
        let weights = tape.softmax_rows(scaled)?;
        head_outs.push(tape.matmul(weights, v)?);

        let w = tape.value(weights).clone();
        attn_acc = Some(match attn_acc {
            None => w,
            Some(acc) => tensor::add(&acc, &w)?,
        });
    }

    let cat = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)?
    };
    let out = tape.matmul(cat, layer.wo)?;
    let attn = tensor::scale(
        &attn_acc.expect("at least one head"),
        T::from_f64(1.0 / layer.heads.len() as f64),
    )?;
    Ok((out, attn))
}

/// Position-wise FFN: relu(x·W1 + b1)·W2 + b2.
pub fn ffn<T: Scalar>(tape: &mut Tape<T>, x: Var, layer: &DecoderLayerVars) -> Result<Var> {
    let hidden = tape.linear(x, layer.ffn_w1, Some(layer.ffn_b1))?;
    let act = tape.relu(hidden)?;
    tape.linear(act, layer.ffn_w2, Some(layer.ffn_b2))
}
