//! Feature augmentation encoder: embeds raw grid features and applies scaled
//! dot-product self-attention whose logits subtract a learned, nonnegative
//! region-geometry bias. The bias depends only on center differences, so it is
//! invariant to translating the whole grid.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::numerics::Mode;

/// Clamp inside the log of the relative-geometry features; keeps the i = j
/// diagonal finite and the bias smooth.
pub const GEO_EPS: f64 = 1e-3;

/// Per-cell center coordinates and cell extents for an H×W grid.
///
/// Cells are indexed row-major; under the unit-cell convention the cell at
/// row r, col c has corners collapsed to (c, r), so its center is (c, r) and
/// its width and height are 1.
#[derive(Clone, Debug)]
pub struct GridGeometry {
    pub h: usize,
    pub w: usize,
    /// (v_cen, t_cen) per cell: v is the column axis, t the row axis.
    pub centers: Vec<(f64, f64)>,
    pub widths: Vec<f64>,
    pub heights: Vec<f64>,
}

impl GridGeometry {
    pub fn cells(&self) -> usize {
        self.centers.len()
    }
}

pub fn grid_geometry(h: usize, w: usize) -> Result<GridGeometry> {
    if h == 0 || w == 0 {
        return Err(Error::Parameter(format!(
            "grid dimensions must be positive, got {h}x{w}"
        )));
    }
    let mut centers = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            // v_min = v_max = c and t_min = t_max = r, so the center is the
            // midpoint (c, r) and both extents are (max - min) + 1 = 1.
            centers.push((c as f64, r as f64));
        }
    }
    Ok(GridGeometry {
        h,
        w,
        centers,
        widths: vec![1.0; h * w],
        heights: vec![1.0; h * w],
    })
}

/// The K²×2 matrix of relative geometry features r_ij, row index i·K + j.
pub fn geometry_pairs<T: Scalar>(geo: &GridGeometry) -> Tensor<T> {
    let k = geo.cells();
    let mut data = Vec::with_capacity(k * k * 2);
    for i in 0..k {
        let (vi, ti) = geo.centers[i];
        for j in 0..k {
            let (vj, tj) = geo.centers[j];
            let dv = (vi - vj).abs().max(GEO_EPS);
            let dt = (ti - tj).abs().max(GEO_EPS);
            data.push(T::from_f64((dv / geo.widths[i]).ln()));
            data.push(T::from_f64((dt / geo.heights[i]).ln()));
        }
    }
    Tensor::from_vec_unchecked(vec![k * k, 2], data)
}

/// Nonnegative K×K bias subtracted from the encoder attention logits.
#[derive(Clone, Debug)]
pub struct GeometryBias<T> {
    pub g: Tensor<T>,
}

/// Learnable pieces of one feature augmentation encoder.
#[derive(Clone, Debug)]
pub struct EncoderParams<T> {
    /// C0→d embedding.
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    /// One (W_q, W_k, W_v) triple of shape d×d per encoder layer.
    pub layers: Vec<EncoderLayer<T>>,
    /// 2→d_g geometry FC.
    pub geo_fc: Tensor<T>,
    /// d_g→1 geometry projection w_g.
    pub geo_wg: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

/// Tape handles for registered encoder parameters.
pub struct EncoderVars {
    pub embed_w: Var,
    pub embed_b: Var,
    pub layers: Vec<EncoderLayerVars>,
    pub geo_fc: Var,
    pub geo_wg: Var,
}

pub struct EncoderLayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn register(&self, tape: &mut Tape<T>) -> EncoderVars {
        EncoderVars {
            embed_w: tape.leaf(self.embed_w.clone()),
            embed_b: tape.leaf(self.embed_b.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayerVars {
                    wq: tape.leaf(l.wq.clone()),
                    wk: tape.leaf(l.wk.clone()),
                    wv: tape.leaf(l.wv.clone()),
                })
                .collect(),
            geo_fc: tape.leaf(self.geo_fc.clone()),
            geo_wg: tape.leaf(self.geo_wg.clone()),
        }
    }
}

/// r_ij → g_ij = ReLU(FC(r_ij)) → G_ij = ReLU(w_gᵀ g_ij), reshaped to K×K.
pub fn geometry_bias_var<T: Scalar>(
    tape: &mut Tape<T>,
    pairs: Var,
    vars: &EncoderVars,
) -> Result<Var> {
    let k2 = tape.value(pairs).rows();
    let k = (k2 as f64).sqrt().round() as usize;
    let fc = tape.matmul(pairs, vars.geo_fc)?;
    let g = tape.relu(fc)?;
    let proj = tape.matmul(g, vars.geo_wg)?;
    let bias = tape.relu(proj)?;
    tape.reshape(bias, vec![k, k])
}

/// Plain-value evaluation of the geometry bias for a given geometry.
pub fn geometry_bias<T: Scalar>(geo: &GridGeometry, params: &EncoderParams<T>) -> Result<GeometryBias<T>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let pairs = tape.leaf(geometry_pairs::<T>(geo));
    let bias = geometry_bias_var(&mut tape, pairs, &vars)?;
    Ok(GeometryBias {
        g: tape.value(bias).clone(),
    })
}

/// U(x) = dropout(relu(linear(raw))); raw is K×C0, output K×d.
pub fn embed_grid<T: Scalar>(
    tape: &mut Tape<T>,
    raw: Var,
    vars: &EncoderVars,
    dropout_p: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let c0 = tape.value(vars.embed_w).rows();
    if tape.value(raw).cols() != c0 {
        return Err(Error::shape(
            "embed_grid",
            format!("{c0} channels"),
            format!("{}", tape.value(raw).cols()),
        ));
    }
    let lin = tape.linear(raw, vars.embed_w, Some(vars.embed_b))?;
    let act = tape.relu(lin)?;
    tape.dropout(act, dropout_p, mode, rng)
}

/// One feature-augmented attention layer:
/// U_aug = U + softmax(QKᵀ/√τ − G)·V with τ the per-head width.
pub fn encode_layer<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    g_bias: Var,
    layer: &EncoderLayerVars,
    heads: usize,
) -> Result<Var> {
    let k = tape.value(u).rows();
    let d = tape.value(u).cols();
    if tape.value(g_bias).rows() != k || tape.value(g_bias).cols() != k {
        return Err(Error::shape(
            "encode",
            format!("{k}x{k} geometry bias"),
            crate::numerics::tensor::fmt_shape(tape.value(g_bias).shape()),
        ));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Parameter(format!(
            "encoder head count {heads} must divide d={d}"
        )));
    }
    let dh = d / heads;
    let q = tape.matmul(u, layer.wq)?;
    let key = tape.matmul(u, layer.wk)?;
    let v = tape.matmul(u, layer.wv)?;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());

    let mut head_outs = Vec::with_capacity(heads);
    for hidx in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, key, v)
        } else {
            (
                tape.slice_cols(q, hidx * dh, dh)?,
                tape.slice_cols(key, hidx * dh, dh)?,
                tape.slice_cols(v, hidx * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let scaled = tape.scale(logits, scale)?;
        let biased = tape.sub(scaled, g_bias)?;
        let attn = tape.softmax_rows(biased)?;
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let z = if heads == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)?
    };
    tape.add(u, z)
}

/// Full encoder stack (the geometry bias is shared across layers).
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    g_bias: Var,
    vars: &EncoderVars,
    heads: usize,
) -> Result<Var> {
    let mut cur = u;
    for layer in &vars.layers {
        cur = encode_layer(tape, cur, g_bias, layer, heads)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    fn params(c0: usize, d: usize, d_g: usize, r: &mut ChaCha8Rng) -> EncoderParams<f64> {
        EncoderParams {
            embed_w: rand_tensor(&[c0, d], r),
            embed_b: rand_tensor(&[d], r),
            layers: vec![EncoderLayer {
                wq: rand_tensor(&[d, d], r),
                wk: rand_tensor(&[d, d], r),
                wv: rand_tensor(&[d, d], r),
            }],
            geo_fc: rand_tensor(&[2, d_g], r),
            geo_wg: rand_tensor(&[d_g, 1], r),
        }
    }

    #[test]
    fn grid_geometry_2x2_centers() {
        let geo = grid_geometry(2, 2).unwrap();
        assert_eq!(geo.centers, vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        assert!(geo.widths.iter().chain(geo.heights.iter()).all(|&x| x == 1.0));
    }

    #[test]
    fn grid_geometry_1x1_and_7x7() {
        let geo = grid_geometry(1, 1).unwrap();
        assert_eq!(geo.centers, vec![(0.0, 0.0)]);

        let geo = grid_geometry(7, 7).unwrap();
        assert_eq!(geo.cells(), 49);
        let vmax = geo.centers.iter().map(|c| c.0).fold(f64::MIN, f64::max);
        let tmax = geo.centers.iter().map(|c| c.1).fold(f64::MIN, f64::max);
        assert_eq!((vmax, tmax), (6.0, 6.0));
        assert!(geo.centers.iter().all(|&(v, t)| (0.0..=6.0).contains(&v) && (0.0..=6.0).contains(&t)));
    }

    #[test]
    fn grid_geometry_rejects_zero_dims() {
        assert!(matches!(grid_geometry(0, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn relative_pairs_direct_evaluation() {
        // i at center (0,0); j at column 3, row 4 of a 5x4 grid.
        let geo = grid_geometry(5, 4).unwrap();
        let k = geo.cells();
        let pairs = geometry_pairs::<f64>(&geo);
        let j = 4 * 4 + 3;
        let row = pairs.row(j); // i = 0
        assert!((row[0] - 3f64.ln()).abs() < 1e-12);
        assert!((row[1] - 4f64.ln()).abs() < 1e-12);
        // Diagonal entries hit the clamp.
        let diag = pairs.row(0);
        assert!((diag[0] - GEO_EPS.ln()).abs() < 1e-12);
        assert!((diag[1] - GEO_EPS.ln()).abs() < 1e-12);
        assert_eq!(pairs.shape(), &[k * k, 2]);
    }

    #[test]
    fn geometry_bias_is_nonnegative_and_translation_invariant() {
        let mut r = rng(11);
        let p = params(4, 4, 8, &mut r);
        let geo = grid_geometry(3, 3).unwrap();
        let base = geometry_bias(&geo, &p).unwrap();
        assert!(base.g.data().iter().all(|&x| x >= 0.0));

        let mut shifted = geo.clone();
        for c in shifted.centers.iter_mut() {
            c.0 += 5.0;
            c.1 += 5.0;
        }
        let moved = geometry_bias(&shifted, &p).unwrap();
        assert_eq!(base.g.data(), moved.g.data());
    }

    #[test]
    fn embed_zero_weights_gives_zero_features() {
        let mut r = rng(2);
        let mut p = params(3, 4, 8, &mut r);
        p.embed_w = Tensor::zeros(vec![3, 4]);
        p.embed_b = Tensor::zeros(vec![4]);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let raw = tape.leaf(rand_tensor(&[5, 3], &mut r));
        let u = embed_grid(&mut tape, raw, &vars, 0.0, Mode::Train, &mut rng(0)).unwrap();
        assert!(tape.value(u).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn embed_identity_weights_is_relu_in_eval() {
        let mut r = rng(3);
        let mut p = params(4, 4, 8, &mut r);
        p.embed_w = Tensor::eye(4);
        p.embed_b = Tensor::zeros(vec![4]);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let raw = rand_tensor(&[6, 4], &mut r);
        let raw_v = tape.leaf(raw.clone());
        let u = embed_grid(&mut tape, raw_v, &vars, 0.5, Mode::Eval, &mut rng(0)).unwrap();
        let expect = crate::numerics::tensor::relu(&raw).unwrap();
        assert_eq!(tape.value(u), &expect);
    }

    #[test]
    fn embed_rejects_channel_mismatch() {
        let mut r = rng(4);
        let p = params(4, 4, 8, &mut r);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let raw = tape.leaf(rand_tensor(&[6, 5], &mut r));
        assert!(embed_grid(&mut tape, raw, &vars, 0.0, Mode::Eval, &mut rng(0)).is_err());
    }

    /// Naive loop re-implementation of the feature-augmented attention.
    fn encode_oracle(u: &Tensor<f64>, g: &Tensor<f64>, l: &EncoderLayer<f64>) -> Vec<f64> {
        let k = u.rows();
        let d = u.cols();
        let mm = |a: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            let (m, kk, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for p in 0..kk {
                        out[i * n + j] += a.at(i, p) * b.at(p, j);
                    }
                }
            }
            out
        };
        let q = mm(u, &l.wq);
        let key = mm(u, &l.wk);
        let v = mm(u, &l.wv);
        let mut out = vec![0.0; k * d];
        for i in 0..k {
            let mut logits = vec![0.0; k];
            for j in 0..k {
                let mut dot = 0.0;
                for p in 0..d {
                    dot += q[i * d + p] * key[j * d + p];
                }
                logits[j] = dot / (d as f64).sqrt() - g.at(i, j);
            }
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for p in 0..d {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += exps[j] / denom * v[j * d + p];
                }
                out[i * d + p] = u.at(i, p) + acc;
            }
        }
        out
    }

    #[test]
    fn encode_matches_naive_loop_oracle() {
        let mut r = rng(5);
        let p = params(2, 2, 4, &mut r);
        let u = rand_tensor(&[3, 2], &mut r);
        let geo = grid_geometry(3, 1).unwrap();
        let gb = geometry_bias(&geo, &p).unwrap();

        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let uv = tape.leaf(u.clone());
        let gv = tape.leaf(gb.g.clone());
        let got = encode(&mut tape, uv, gv, &vars, 1).unwrap();

        let want = encode_oracle(&u, &gb.g, &p.layers[0]);
        for (a, b) in tape.value(got).data().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_with_zero_values_is_residual_identity() {
        let mut r = rng(6);
        let mut p = params(2, 4, 4, &mut r);
        p.layers[0].wv = Tensor::zeros(vec![4, 4]);
        let u = rand_tensor(&[5, 4], &mut r);
        let geo = grid_geometry(5, 1).unwrap();
        let gb = geometry_bias(&geo, &p).unwrap();

        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let uv = tape.leaf(u.clone());
        let gv = tape.leaf(gb.g.clone());
        let got = encode(&mut tape, uv, gv, &vars, 1).unwrap();
        assert_eq!(tape.value(got), &u);
    }

    #[test]
    fn encode_zero_bias_is_standard_attention() {
        let mut r = rng(7);
        let p = params(2, 2, 4, &mut r);
        let u = rand_tensor(&[4, 2], &mut r);
        let zero_g = Tensor::zeros(vec![4, 4]);

        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let uv = tape.leaf(u.clone());
        let gv = tape.leaf(zero_g.clone());
        let got = encode(&mut tape, uv, gv, &vars, 1).unwrap();

        let want = encode_oracle(&u, &zero_g, &p.layers[0]);
        for (a, b) in tape.value(got).data().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_preserves_shape_and_rejects_k_mismatch() {
        let mut r = rng(8);
        let p = params(2, 4, 4, &mut r);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let u = tape.leaf(rand_tensor(&[6, 4], &mut r));
        let g = tape.leaf(Tensor::zeros(vec![6, 6]));
        let out = encode(&mut tape, u, g, &vars, 2).unwrap();
        assert_eq!(tape.value(out).shape(), &[6, 4]);

        let g_bad = tape.leaf(Tensor::zeros(vec![5, 5]));
        assert!(encode(&mut tape, u, g_bad, &vars, 1).is_err());
    }
}
