//! Attribute→visual decoder and mapping M1: attends image regions from
//! attribute queries and scores each attribute against its attended feature.

use crate::decoder::{self, DecoderLayerParams, DecoderLayerVars};
use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Semantic attribute word-vector features, one row per attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeVocabulary<T> {
    /// A × d_w
    pub features: Tensor<T>,
    pub names: Vec<String>,
}

impl<T: Scalar> AttributeVocabulary<T> {
    pub fn new(features: Tensor<T>, names: Vec<String>) -> Result<Self> {
        if features.rank() != 2 || features.rows() != names.len() || names.is_empty() {
            return Err(Error::Data(format!(
                "attribute vocabulary: {} names for a {:?} feature matrix",
                names.len(),
                features.shape()
            )));
        }
        Ok(AttributeVocabulary { features, names })
    }

    pub fn count(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Clone, Debug)]
pub struct AvtParams<T> {
    pub layers: Vec<DecoderLayerParams<T>>,
    /// d_w × d bilinear mapping of M1.
    pub w3: Tensor<T>,
}

pub struct AvtVars {
    pub layers: Vec<DecoderLayerVars>,
    pub w3: Var,
}

impl<T: Scalar> AvtParams<T> {
    pub fn register(&self, tape: &mut Tape<T>) -> AvtVars {
        AvtVars {
            layers: self.layers.iter().map(|l| l.register(tape)).collect(),
            w3: tape.leaf(self.w3.clone()),
        }
    }
}

/// Outputs of the attribute→visual branch for one image.
pub struct AvtOutputs<T: Scalar> {
    /// Attended features F̂ (A×d) before the FFN.
    pub f_hat: Var,
    /// Attribute-based visual features F (A×d).
    pub f: Var,
    /// Semantic embedding ψ(x) of length A.
    pub psi: Var,
    /// Head-averaged A×K attention of the last decoder layer, kept for export.
    pub attn: Tensor<T>,
}

/// Queries from the attribute vocabulary, keys/values from U_aug.
pub fn cross_attend_a2v<T: Scalar>(
    tape: &mut Tape<T>,
    vocab: Var,
    u_aug: Var,
    layer: &DecoderLayerVars,
) -> Result<(Var, Tensor<T>)> {
    decoder::cross_attend(tape, vocab, u_aug, layer)
}

pub fn ffn_avt<T: Scalar>(tape: &mut Tape<T>, f_hat: Var, layer: &DecoderLayerVars) -> Result<Var> {
    decoder::ffn(tape, f_hat, layer)
}

/// M1 diagonal bilinear score: ψ_a = v_aᵀ W_3 F_a.
pub fn map_m1<T: Scalar>(tape: &mut Tape<T>, f: Var, vocab: Var, w3: Var) -> Result<Var> {
    let projected = tape.matmul(vocab, w3)?;
    tape.row_dot(projected, f)
}

/// Full branch: stacked decoder layers (queries of layer ℓ>1 are the previous
/// layer's output) followed by M1.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    vocab: Var,
    u_aug: Var,
    vars: &AvtVars,
) -> Result<AvtOutputs<T>> {
    let mut queries = vocab;
    let mut attn = None;
    let mut f_hat = vocab;
    for layer in &vars.layers {
        let (attended, weights) = cross_attend_a2v(tape, queries, u_aug, layer)?;
        f_hat = attended;
        queries = ffn_avt(tape, attended, layer)?;
        attn = Some(weights);
    }
    let f = queries;
    let psi = map_m1(tape, f, vocab, vars.w3)?;
    Ok(AvtOutputs {
        f_hat,
        f,
        psi,
        attn: attn.ok_or_else(|| Error::Parameter("decoder needs at least one layer".into()))?,
    })
}
