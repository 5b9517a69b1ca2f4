//! Model state for the two attribute-guided sub-nets and the per-image
//! forward pass. The AVT and VAT branches share architecture but hold fully
//! independent parameters; only the attribute vocabulary is shared.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::avt::{self, AvtOutputs, AvtParams, AvtVars};
use crate::decoder::{DecoderLayerParams, HeadParams};
use crate::error::{Error, Result};
use crate::fae::{self, EncoderLayer, EncoderParams, EncoderVars};
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::numerics::Mode;
use crate::vat::{self, VatOutputs, VatParams, VatVars};

/// Static dimensions of one model instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Number of attributes A.
    pub attributes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Backbone channels C0.
    pub channels: usize,
    /// Attribute word-vector width d_w.
    pub vocab_dim: usize,
    /// Embedding width d.
    pub embed_dim: usize,
    /// Geometry FC hidden size d_g.
    pub geo_hidden: usize,
    /// Encoder/decoder layer count (same for both, per sub-net).
    pub layers: usize,
    /// Attention heads (same for encoder and decoder).
    pub heads: usize,
}

impl ModelDims {
    pub fn regions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("attributes", self.attributes),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("channels", self.channels),
            ("vocab_dim", self.vocab_dim),
            ("embed_dim", self.embed_dim),
            ("geo_hidden", self.geo_hidden),
            ("layers", self.layers),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model dimension {name} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "head count {} must divide embedding width {}",
                self.heads, self.embed_dim
            )));
        }
        Ok(())
    }
}

/// All learnable parameters of both sub-nets plus the shared vocabulary.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub dims: ModelDims,
    /// A×d_w attribute embeddings, initialized from loaded word vectors.
    pub vocab: Tensor<T>,
    pub vocab_trainable: bool,
    pub avt_encoder: EncoderParams<T>,
    pub avt_decoder: AvtParams<T>,
    pub vat_encoder: EncoderParams<T>,
    pub vat_decoder: VatParams<T>,
}

fn glorot<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let data: Vec<T> = (0..rows * cols)
        .map(|_| T::from_f64(rng.sample::<f64, _>(rand_distr::StandardNormal) * std))
        .collect();
    Tensor::from_vec_unchecked(vec![rows, cols], data)
}

fn scaled<T: Scalar>(t: Tensor<T>, factor: f64) -> Tensor<T> {
    crate::numerics::tensor::scale(&t, T::from_f64(factor)).expect("finite init")
}

fn encoder_init<T: Scalar>(dims: &ModelDims, rng: &mut ChaCha8Rng) -> EncoderParams<T> {
    EncoderParams {
        embed_w: glorot(dims.channels, dims.embed_dim, rng),
        embed_b: Tensor::zeros(vec![dims.embed_dim]),
        layers: (0..dims.layers)
            .map(|_| EncoderLayer {
                wq: glorot(dims.embed_dim, dims.embed_dim, rng),
                wk: glorot(dims.embed_dim, dims.embed_dim, rng),
                // Near-zero value projection: the residual branch starts as
                // an identity so downstream attention sees unmixed regions,
                // and the encoder grows into feature augmentation as training
                // finds use for it.
                wv: scaled(glorot(dims.embed_dim, dims.embed_dim, rng), 0.05),
            })
            .collect(),
        geo_fc: glorot(2, dims.geo_hidden, rng),
        geo_wg: glorot(dims.geo_hidden, 1, rng),
    }
}

fn decoder_layer_init<T: Scalar>(
    query_in: usize,
    kv_in: usize,
    dims: &ModelDims,
    rng: &mut ChaCha8Rng,
) -> DecoderLayerParams<T> {
    let d = dims.embed_dim;
    let tau = d / dims.heads;
    DecoderLayerParams {
        heads: (0..dims.heads)
            .map(|_| HeadParams {
                wq: glorot(query_in, tau, rng),
                wk: glorot(kv_in, tau, rng),
                wv: glorot(kv_in, tau, rng),
            })
            .collect(),
        wo: glorot(d, d, rng),
        ffn_w1: glorot(d, d, rng),
        ffn_b1: Tensor::zeros(vec![d]),
        ffn_w2: glorot(d, d, rng),
        ffn_b2: Tensor::zeros(vec![d]),
    }
}

impl<T: Scalar> ModelState<T> {
    pub fn init(
        dims: ModelDims,
        vocab: Tensor<T>,
        vocab_trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        dims.validate()?;
        if vocab.shape() != [dims.attributes, dims.vocab_dim] {
            return Err(Error::shape(
                "model init",
                format!("{}x{} vocabulary", dims.attributes, dims.vocab_dim),
                crate::numerics::tensor::fmt_shape(vocab.shape()),
            ));
        }
        let avt_encoder = encoder_init(&dims, rng);
        // AVT decoder layer 1 takes attribute word vectors as queries; deeper
        // layers re-query with the previous layer's d-wide output.
        let avt_decoder = AvtParams {
            layers: (0..dims.layers)
                .map(|i| {
                    let q_in = if i == 0 { dims.vocab_dim } else { dims.embed_dim };
                    decoder_layer_init(q_in, dims.embed_dim, &dims, rng)
                })
                .collect(),
            w3: glorot(dims.vocab_dim, dims.embed_dim, rng),
        };
        let vat_encoder = encoder_init(&dims, rng);
        let vat_decoder = VatParams {
            layers: (0..dims.layers)
                .map(|_| decoder_layer_init(dims.embed_dim, dims.vocab_dim, &dims, rng))
                .collect(),
            w3: glorot(dims.embed_dim, dims.embed_dim, rng),
            w_att: glorot(dims.vocab_dim, dims.embed_dim, rng),
        };
        Ok(ModelState {
            dims,
            vocab,
            vocab_trainable,
            avt_encoder,
            avt_decoder,
            vat_encoder,
            vat_decoder,
        })
    }

    fn walk<'a>(&'a self, mut visit: impl FnMut(String, &'a Tensor<T>)) {
        let enc = |prefix: &str, e: &'a EncoderParams<T>, visit: &mut dyn FnMut(String, &'a Tensor<T>)| {
            visit(format!("{prefix}.embed_w"), &e.embed_w);
            visit(format!("{prefix}.embed_b"), &e.embed_b);
            for (i, l) in e.layers.iter().enumerate() {
                visit(format!("{prefix}.l{i}.wq"), &l.wq);
                visit(format!("{prefix}.l{i}.wk"), &l.wk);
                visit(format!("{prefix}.l{i}.wv"), &l.wv);
            }
            visit(format!("{prefix}.geo_fc"), &e.geo_fc);
            visit(format!("{prefix}.geo_wg"), &e.geo_wg);
        };
        let dec_layer = |prefix: String, l: &'a DecoderLayerParams<T>, visit: &mut dyn FnMut(String, &'a Tensor<T>)| {
            for (h, head) in l.heads.iter().enumerate() {
                visit(format!("{prefix}.h{h}.wq"), &head.wq);
                visit(format!("{prefix}.h{h}.wk"), &head.wk);
                visit(format!("{prefix}.h{h}.wv"), &head.wv);
            }
            visit(format!("{prefix}.wo"), &l.wo);
            visit(format!("{prefix}.ffn_w1"), &l.ffn_w1);
            visit(format!("{prefix}.ffn_b1"), &l.ffn_b1);
            visit(format!("{prefix}.ffn_w2"), &l.ffn_w2);
            visit(format!("{prefix}.ffn_b2"), &l.ffn_b2);
        };

        enc("avt.enc", &self.avt_encoder, &mut visit);
        for (i, l) in self.avt_decoder.layers.iter().enumerate() {
            dec_layer(format!("avt.dec.l{i}"), l, &mut visit);
        }
        visit("avt.w3".into(), &self.avt_decoder.w3);
        enc("vat.enc", &self.vat_encoder, &mut visit);
        for (i, l) in self.vat_decoder.layers.iter().enumerate() {
            dec_layer(format!("vat.dec.l{i}"), l, &mut visit);
        }
        visit("vat.w3".into(), &self.vat_decoder.w3);
        visit("vat.w_att".into(), &self.vat_decoder.w_att);
        visit("vocab".into(), &self.vocab);
    }

    /// All parameters in canonical order (vocabulary last).
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.walk(|name, t| out.push((name, t)));
        out
    }

    /// Mutable views of all parameters in the same canonical order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        fn enc<'a, T>(e: &'a mut EncoderParams<T>, out: &mut Vec<&'a mut Tensor<T>>) {
            out.push(&mut e.embed_w);
            out.push(&mut e.embed_b);
            for l in e.layers.iter_mut() {
                out.push(&mut l.wq);
                out.push(&mut l.wk);
                out.push(&mut l.wv);
            }
            out.push(&mut e.geo_fc);
            out.push(&mut e.geo_wg);
        }
        fn dec_layer<'a, T>(l: &'a mut DecoderLayerParams<T>, out: &mut Vec<&'a mut Tensor<T>>) {
            for head in l.heads.iter_mut() {
                out.push(&mut head.wq);
                out.push(&mut head.wk);
                out.push(&mut head.wv);
            }
            out.push(&mut l.wo);
            out.push(&mut l.ffn_w1);
            out.push(&mut l.ffn_b1);
            out.push(&mut l.ffn_w2);
            out.push(&mut l.ffn_b2);
        }
        let mut out = Vec::new();
        enc(&mut self.avt_encoder, &mut out);
        for l in self.avt_decoder.layers.iter_mut() {
            dec_layer(l, &mut out);
        }
        out.push(&mut self.avt_decoder.w3);
        enc(&mut self.vat_encoder, &mut out);
        for l in self.vat_decoder.layers.iter_mut() {
            dec_layer(l, &mut out);
        }
        out.push(&mut self.vat_decoder.w3);
        out.push(&mut self.vat_decoder.w_att);
        out.push(&mut self.vocab);
        out
    }

    /// Index set the optimizer updates (vocabulary only when trainable).
    pub fn trainable_indices(&self) -> Vec<usize> {
        let n = self.named_params().len();
        if self.vocab_trainable {
            (0..n).collect()
        } else {
            (0..n - 1).collect()
        }
    }

    /// Replaces every parameter; shapes must match the current state.
    pub fn set_params(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        let mut slots = self.params_mut();
        if tensors.len() != slots.len() {
            return Err(Error::Contract(format!(
                "set_params: expected {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.iter().zip(tensors.iter()) {
            if t.shape() != slot.shape() {
                return Err(Error::shape(
                    "set_params",
                    crate::numerics::tensor::fmt_shape(slot.shape()),
                    crate::numerics::tensor::fmt_shape(t.shape()),
                ));
            }
        }
        for (slot, t) in slots.iter_mut().zip(tensors) {
            **slot = t;
        }
        Ok(())
    }

    /// Registers every parameter on a tape, preserving canonical order.
    pub fn register(&self, tape: &mut Tape<T>) -> ModelVars {
        let avt_enc = self.avt_encoder.register(tape);
        let avt_dec = self.avt_decoder.register(tape);
        let vat_enc = self.vat_encoder.register(tape);
        let vat_dec = self.vat_decoder.register(tape);
        let vocab = tape.leaf(self.vocab.clone());
        ModelVars {
            avt_enc,
            avt_dec,
            vat_enc,
            vat_dec,
            vocab,
        }
    }
}

/// Tape handles for one registration of the model parameters.
pub struct ModelVars {
    pub avt_enc: EncoderVars,
    pub avt_dec: AvtVars,
    pub vat_enc: EncoderVars,
    pub vat_dec: VatVars,
    pub vocab: Var,
}

impl ModelVars {
    /// Vars in the same canonical order as `ModelState::named_params`.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let enc = |e: &EncoderVars, out: &mut Vec<Var>| {
            out.push(e.embed_w);
            out.push(e.embed_b);
            for l in &e.layers {
                out.push(l.wq);
                out.push(l.wk);
                out.push(l.wv);
            }
            out.push(e.geo_fc);
            out.push(e.geo_wg);
        };
        let dec_layer = |l: &crate::decoder::DecoderLayerVars, out: &mut Vec<Var>| {
            for h in &l.heads {
                out.push(h.wq);
                out.push(h.wk);
                out.push(h.wv);
            }
            out.push(l.wo);
            out.push(l.ffn_w1);
            out.push(l.ffn_b1);
            out.push(l.ffn_w2);
            out.push(l.ffn_b2);
        };
        enc(&self.avt_enc, &mut out);
        for l in &self.avt_dec.layers {
            dec_layer(l, &mut out);
        }
        out.push(self.avt_dec.w3);
        enc(&self.vat_enc, &mut out);
        for l in &self.vat_dec.layers {
            dec_layer(l, &mut out);
        }
        out.push(self.vat_dec.w3);
        out.push(self.vat_dec.w_att);
        out.push(self.vocab);
        out
    }
}

/// Everything produced by one image's pass through both branches.
pub struct ImageForward<T: Scalar> {
    pub u_avt: Var,
    pub u_aug_avt: Var,
    pub avt: AvtOutputs<T>,
    pub u_vat: Var,
    pub u_aug_vat: Var,
    pub vat: VatOutputs<T>,
}

/// Knobs the forward pass needs beyond the parameters themselves.
#[derive(Clone, Copy, Debug)]
pub struct ForwardSettings {
    pub dropout_p: f64,
    /// Row-softmax the VAT attention score (off by default).
    pub att_softmax: bool,
}

/// Runs both sub-nets on one image's raw K×C0 grid features.
#[allow(clippy::too_many_arguments)]
pub fn forward_image<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    dims: &ModelDims,
    geo_pairs: &Tensor<T>,
    raw: &Tensor<T>,
    settings: ForwardSettings,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<ImageForward<T>> {
    if raw.shape() != [dims.regions(), dims.channels] {
        return Err(Error::shape(
            "forward_image",
            format!("{}x{} grid features", dims.regions(), dims.channels),
            crate::numerics::tensor::fmt_shape(raw.shape()),
        ));
    }
    let raw = tape.leaf(raw.clone());
    let pairs = tape.leaf(geo_pairs.clone());

    let u_avt = fae::embed_grid(tape, raw, &vars.avt_enc, settings.dropout_p, mode, rng)?;
    let g_avt = fae::geometry_bias_var(tape, pairs, &vars.avt_enc)?;
    let u_aug_avt = fae::encode(tape, u_avt, g_avt, &vars.avt_enc, dims.heads)?;
    let avt_out = avt::forward(tape, vars.vocab, u_aug_avt, &vars.avt_dec)?;

    let u_vat = fae::embed_grid(tape, raw, &vars.vat_enc, settings.dropout_p, mode, rng)?;
    let g_vat = fae::geometry_bias_var(tape, pairs, &vars.vat_enc)?;
    let u_aug_vat = fae::encode(tape, u_vat, g_vat, &vars.vat_enc, dims.heads)?;
    let vat_out = vat::forward(tape, u_aug_vat, u_vat, vars.vocab, &vars.vat_dec, settings.att_softmax)?;

    Ok(ImageForward {
        u_avt,
        u_aug_avt,
        avt: avt_out,
        u_vat,
        u_aug_vat,
        vat: vat_out,
    })
}
