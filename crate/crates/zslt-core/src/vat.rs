//! Visual→attribute decoder and mapping M2: attends attributes from region
//! queries, scores each region, and embeds the region scores back into the
//! A-dimensional attribute space through a bilinear attention score.

use crate::decoder::{self, DecoderLayerParams, DecoderLayerVars};
use crate::error::Result;
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct VatParams<T> {
    pub layers: Vec<DecoderLayerParams<T>>,
    /// d × d bilinear mapping of M2 (region scores).
    pub w3: Tensor<T>,
    /// d_w × d attention-score matrix W_att.
    pub w_att: Tensor<T>,
}

pub struct VatVars {
    pub layers: Vec<DecoderLayerVars>,
    pub w3: Var,
    pub w_att: Var,
}

impl<T: Scalar> VatParams<T> {
    pub fn register(&self, tape: &mut Tape<T>) -> VatVars {
        VatVars {
            layers: self.layers.iter().map(|l| l.register(tape)).collect(),
            w3: tape.leaf(self.w3.clone()),
            w_att: tape.leaf(self.w_att.clone()),
        }
    }
}

/// Outputs of the visual→attribute branch for one image.
pub struct VatOutputs<T: Scalar> {
    /// Attended features Ŝ (K×d) before the FFN.
    pub s_hat: Var,
    /// Visual-based attribute features S (K×d).
    pub s: Var,
    /// Region scores S̄ of length K.
    pub region_scores: Var,
    /// Bilinear attention score Att (A×K).
    pub att: Var,
    /// Semantic embedding Ψ(x) of length A.
    pub big_psi: Var,
    /// Head-averaged K×A cross-attention of the last layer.
    pub attn: Tensor<T>,
}

/// Queries from U_aug, keys/values from the attribute vocabulary.
pub fn cross_attend_v2a<T: Scalar>(
    tape: &mut Tape<T>,
    u_aug: Var,
    vocab: Var,
    layer: &DecoderLayerVars,
) -> Result<(Var, Tensor<T>)> {
    decoder::cross_attend(tape, u_aug, vocab, layer)
}

pub fn ffn_vat<T: Scalar>(tape: &mut Tape<T>, s_hat: Var, layer: &DecoderLayerVars) -> Result<Var> {
    decoder::ffn(tape, s_hat, layer)
}

/// M2: S̄_k = u_aug,kᵀ W_3 S_k, Att = V_A W_att U(x)ᵀ, Ψ = Att·S̄.
///
/// `u` is the post-embedding, pre-attention feature matrix U(x); the region
/// scores use the augmented features U_aug as support. Att carries raw
/// bilinear scores; `att_softmax` optionally row-normalizes it.
pub fn map_m2<T: Scalar>(
    tape: &mut Tape<T>,
    s: Var,
    u_aug: Var,
    u: Var,
    vocab: Var,
    vars: &VatVars,
    att_softmax: bool,
) -> Result<(Var, Var, Var)> {
    let projected = tape.matmul(u_aug, vars.w3)?;
    let region_scores = tape.row_dot(projected, s)?;

    let va = tape.matmul(vocab, vars.w_att)?;
    let ut = tape.transpose(u)?;
    let mut att = tape.matmul(va, ut)?;
    if att_softmax {
        att = tape.softmax_rows(att)?;
    }

    let k = tape.value(region_scores).numel();
    let sbar_col = tape.reshape(region_scores, vec![k, 1])?;
    let psi_col = tape.matmul(att, sbar_col)?;
    let a = tape.value(psi_col).rows();
    let big_psi = tape.reshape(psi_col, vec![a])?;
    Ok((region_scores, att, big_psi))
}

/// Full branch: stacked decoder layers followed by M2.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    u_aug: Var,
    u: Var,
    vocab: Var,
    vars: &VatVars,
    att_softmax: bool,
) -> Result<VatOutputs<T>> {
    let mut queries = u_aug;
    let mut attn = None;
    let mut s_hat = u_aug;
    for layer in &vars.layers {
        let (attended, weights) = cross_attend_v2a(tape, queries, vocab, layer)?;
        s_hat = attended;
        queries = ffn_vat(tape, attended, layer)?;
        attn = Some(weights);
    }
    let s = queries;
    let (region_scores, att, big_psi) = map_m2(tape, s, u_aug, u, vocab, vars, att_softmax)?;
    Ok(VatOutputs {
        s_hat,
        s,
        region_scores,
        att,
        big_psi,
        attn: attn.ok_or_else(|| crate::error::Error::Parameter("decoder needs at least one layer".into()))?,
    })
}
