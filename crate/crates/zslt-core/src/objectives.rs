//! Training losses: attribute regression, attribute-based cross-entropy over
//! all classes, self-calibration toward unseen classes, the two semantic
//! collaborative losses, and their weighted composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Per-class attribute-score vectors plus the seen/unseen partition.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSemanticBank<T> {
    /// |C| × A class semantic vectors z^c.
    pub semantics: Tensor<T>,
    /// True where the class is seen; classes are exactly seen xor unseen.
    pub seen_mask: Vec<bool>,
    pub class_names: Vec<String>,
}

impl<T: Scalar> ClassSemanticBank<T> {
    pub fn new(semantics: Tensor<T>, seen_mask: Vec<bool>, class_names: Vec<String>) -> Result<Self> {
        if semantics.rank() != 2
            || semantics.rows() != seen_mask.len()
            || semantics.rows() != class_names.len()
        {
            return Err(Error::Data(format!(
                "class bank: {} semantic rows, {} flags, {} names",
                semantics.rows(),
                seen_mask.len(),
                class_names.len()
            )));
        }
        Ok(ClassSemanticBank {
            semantics,
            seen_mask,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.seen_mask.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.semantics.cols()
    }

    pub fn seen_indices(&self) -> Vec<usize> {
        (0..self.seen_mask.len()).filter(|&c| self.seen_mask[c]).collect()
    }

    pub fn unseen_indices(&self) -> Vec<usize> {
        (0..self.seen_mask.len()).filter(|&c| !self.seen_mask[c]).collect()
    }

    /// ±1 calibration offsets: +1 for unseen classes, −1 for seen.
    pub fn indicator(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .seen_mask
            .iter()
            .map(|&seen| if seen { -T::one() } else { T::one() })
            .collect();
        Tensor::from_vec_unchecked(vec![self.seen_mask.len()], data)
    }
}

/// Loss weights of the overall objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ar: f64,
    pub lambda_sc: f64,
    pub lambda_vat: f64,
    pub lambda_f_scl: f64,
    pub lambda_p_scl: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_ar", self.lambda_ar),
            ("lambda_sc", self.lambda_sc),
            ("lambda_vat", self.lambda_vat),
            ("lambda_f_scl", self.lambda_f_scl),
            ("lambda_p_scl", self.lambda_p_scl),
        ];
        for (name, v) in all {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    /// CUB-style defaults {λ_AR, λ_SC, λ_VAT, λ_f_SCL, λ_p_SCL}.
    fn default() -> Self {
        LossWeights {
            lambda_ar: 0.0001,
            lambda_sc: 0.1,
            lambda_vat: 0.1,
            lambda_f_scl: 0.001,
            lambda_p_scl: 0.01,
        }
    }
}

impl LossWeights {
    /// SUN-style defaults.
    pub fn sun() -> Self {
        LossWeights {
            lambda_ar: 0.01,
            lambda_sc: 0.1,
            lambda_vat: 1.0,
            lambda_f_scl: 0.001,
            lambda_p_scl: 0.001,
        }
    }
}

/// Distance used by the collaborative losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollabDistance {
    L2,
    /// KL(p1 ‖ p2)
    Kl,
    /// KL(p2 ‖ p1)
    KlRev,
    Jsd,
}

impl std::str::FromStr for CollabDistance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(CollabDistance::L2),
            "kl" => Ok(CollabDistance::Kl),
            "kl-rev" => Ok(CollabDistance::KlRev),
            "jsd" => Ok(CollabDistance::Jsd),
            other => Err(Error::Config(format!(
                "unknown collaborative distance {other:?} (expected l2 | kl | kl-rev | jsd)"
            ))),
        }
    }
}

fn batch_rows<T: Scalar>(tape: &Tape<T>, f: Var, context: &'static str) -> Result<(usize, usize)> {
    let t = tape.value(f);
    if t.rank() != 2 {
        return Err(Error::shape(context, "rank-2 batch tensor", format!("{:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

/// Attribute regression: (1/n_b) Σ ‖f(x_i) − z^{c_i}‖²₂.
pub fn l_ar<T: Scalar>(tape: &mut Tape<T>, f: Var, z_true: Var) -> Result<Var> {
    let (n, _) = batch_rows(tape, f, "l_ar")?;
    if tape.value(f).shape() != tape.value(z_true).shape() {
        return Err(Error::shape(
            "l_ar",
            format!("{:?}", tape.value(f).shape()),
            format!("{:?}", tape.value(z_true).shape()),
        ));
    }
    let diff = tape.sub(f, z_true)?;
    let ss = tape.sum_squares(diff)?;
    tape.scale(ss, T::from_f64(1.0 / n as f64))
}

/// Class logits f(x_i)·z^c over every class (seen and unseen).
pub fn class_logits<T: Scalar>(tape: &mut Tape<T>, f: Var, semantics: Var) -> Result<Var> {
    let zt = tape.transpose(semantics)?;
    tape.matmul(f, zt)
}

/// Attribute-based cross-entropy from precomputed logits.
pub fn l_ace_from_logits<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    bank: &ClassSemanticBank<T>,
) -> Result<Var> {
    let (n, c) = batch_rows(tape, logits, "l_ace")?;
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "l_ace: {n} logit rows but {} labels",
            labels.len()
        )));
    }
    if c != bank.num_classes() {
        return Err(Error::shape(
            "l_ace",
            format!("{} classes", bank.num_classes()),
            format!("{c}"),
        ));
    }
    for &label in labels {
        if label >= bank.num_classes() || !bank.seen_mask[label] {
            return Err(Error::Contract(format!(
                "l_ace: training label {label} is not a seen class"
            )));
        }
    }
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick_cols(logp, labels)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, T::from_f64(-1.0 / n as f64))
}

/// Attribute-based cross-entropy; the softmax denominator spans all classes.
pub fn l_ace<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    labels: &[usize],
    semantics: Var,
    bank: &ClassSemanticBank<T>,
) -> Result<Var> {
    let logits = class_logits(tape, f, semantics)?;
    l_ace_from_logits(tape, logits, labels, bank)
}

/// Self-calibration from precomputed logits: offset logits by +1 on unseen
/// and −1 on seen classes, then sum the unseen log-probabilities.
pub fn l_sc_from_logits<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    bank: &ClassSemanticBank<T>,
) -> Result<Var> {
    let (n, c) = batch_rows(tape, logits, "l_sc")?;
    if c != bank.num_classes() {
        return Err(Error::shape(
            "l_sc",
            format!("{} classes", bank.num_classes()),
            format!("{c}"),
        ));
    }
    let unseen = bank.unseen_indices();
    if unseen.is_empty() {
        return Err(Error::Contract("l_sc requires at least one unseen class".into()));
    }
    let indicator = tape.leaf(bank.indicator());
    let calibrated = tape.add_row_broadcast(logits, indicator)?;
    let logp = tape.log_softmax_rows(calibrated)?;
    // Column-selection matrix summing log-probabilities of unseen classes.
    let mut sel = vec![T::zero(); bank.num_classes()];
    for &u in &unseen {
        sel[u] = T::one();
    }
    let sel = tape.leaf(Tensor::from_vec_unchecked(vec![bank.num_classes(), 1], sel));
    let per_sample = tape.matmul(logp, sel)?;
    let total = tape.sum_all(per_sample)?;
    tape.scale(total, T::from_f64(-1.0 / n as f64))
}

pub fn l_sc<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    semantics: Var,
    bank: &ClassSemanticBank<T>,
) -> Result<Var> {
    let logits = class_logits(tape, f, semantics)?;
    l_sc_from_logits(tape, logits, bank)
}

/// Feature-level collaborative loss: (1/n_b) Σ ‖ψ(x_i) − Ψ(x_i)‖²₂.
pub fn l_f_scl<T: Scalar>(tape: &mut Tape<T>, psi: Var, big_psi: Var) -> Result<Var> {
    l_ar(tape, psi, big_psi)
}

/// Prediction-level collaborative loss over class posteriors.
pub fn l_p_scl<T: Scalar>(tape: &mut Tape<T>, p1: Var, p2: Var) -> Result<Var> {
    let (n, _) = batch_rows(tape, p1, "l_p_scl")?;
    for (name, v) in [("p1", p1), ("p2", p2)] {
        let t = tape.value(v);
        for i in 0..t.rows() {
            let sum: f64 = t.row(i).iter().map(|x| x.as_f64()).sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Contract(format!(
                    "l_p_scl: {name} row {i} sums to {sum}, not a probability vector"
                )));
            }
        }
    }
    let diff = tape.sub(p1, p2)?;
    let ss = tape.sum_squares(diff)?;
    tape.scale(ss, T::from_f64(1.0 / n as f64))
}

/// Collaborative distance between two probability-matrix batches for the
/// non-ℓ₂ alternatives. `KL(p‖q) = Σ p (ln p − ln q)`, averaged over the batch.
fn kl_mean<T: Scalar>(tape: &mut Tape<T>, p: Var, q: Var) -> Result<Var> {
    let (n, _) = batch_rows(tape, p, "kl")?;
    let lp = tape.ln(p)?;
    let lq = tape.ln(q)?;
    let diff = tape.sub(lp, lq)?;
    let weighted = tape.mul(p, diff)?;
    let total = tape.sum_all(weighted)?;
    tape.scale(total, T::from_f64(1.0 / n as f64))
}

/// Prediction-level collaborative loss under the configured distance.
pub fn collaborative_prediction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p1: Var,
    p2: Var,
    distance: CollabDistance,
) -> Result<Var> {
    match distance {
        CollabDistance::L2 => l_p_scl(tape, p1, p2),
        CollabDistance::Kl => kl_mean(tape, p1, p2),
        CollabDistance::KlRev => kl_mean(tape, p2, p1),
        CollabDistance::Jsd => {
            let sum = tape.add(p1, p2)?;
            let mid = tape.scale(sum, T::from_f64(0.5))?;
            let a = kl_mean(tape, p1, mid)?;
            let b = kl_mean(tape, p2, mid)?;
            let s = tape.add(a, b)?;
            tape.scale(s, T::from_f64(0.5))
        }
    }
}

/// Feature-level collaborative loss under the configured distance; the KL/JSD
/// alternatives act on row-softmaxed embeddings since raw scores are not
/// probability vectors.
pub fn collaborative_feature_loss<T: Scalar>(
    tape: &mut Tape<T>,
    psi: Var,
    big_psi: Var,
    distance: CollabDistance,
) -> Result<Var> {
    match distance {
        CollabDistance::L2 => l_f_scl(tape, psi, big_psi),
        _ => {
            let p1 = tape.softmax_rows(psi)?;
            let p2 = tape.softmax_rows(big_psi)?;
            collaborative_prediction_loss(tape, p1, p2, distance)
        }
    }
}

/// Per-sub-net composition: L_ACE + λ_AR·L_AR + λ_SC·L_SC.
pub fn l_subnet<T: Scalar>(
    tape: &mut Tape<T>,
    ace: Var,
    ar: Var,
    sc: Var,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let ar_w = tape.scale(ar, T::from_f64(weights.lambda_ar))?;
    let sc_w = tape.scale(sc, T::from_f64(weights.lambda_sc))?;
    let partial = tape.add(ace, ar_w)?;
    tape.add(partial, sc_w)
}

/// Overall objective: L_AVT + λ_VAT·L_VAT + λ_f_SCL·L_f_SCL + λ_p_SCL·L_p_SCL.
pub fn l_total<T: Scalar>(
    tape: &mut Tape<T>,
    l_avt: Var,
    l_vat: Var,
    l_f: Var,
    l_p: Var,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let vat_w = tape.scale(l_vat, T::from_f64(weights.lambda_vat))?;
    let f_w = tape.scale(l_f, T::from_f64(weights.lambda_f_scl))?;
    let p_w = tape.scale(l_p, T::from_f64(weights.lambda_p_scl))?;
    let s1 = tape.add(l_avt, vat_w)?;
    let s2 = tape.add(s1, f_w)?;
    tape.add(s2, p_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape64() -> Tape<f64> {
        Tape::new()
    }

    fn bank(seen: usize, unseen: usize, a: usize) -> ClassSemanticBank<f64> {
        let c = seen + unseen;
        let mut mask = vec![true; seen];
        mask.extend(vec![false; unseen]);
        ClassSemanticBank::new(
            Tensor::zeros(vec![c, a]),
            mask,
            (0..c).map(|i| format!("class_{i}")).collect(),
        )
        .unwrap()
    }

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], vals: &[f64]) -> Var {
        tape.leaf(Tensor::from_vec(shape.to_vec(), vals.to_vec()).unwrap())
    }

    #[test]
    fn l_ar_cases() {
        let mut t = tape64();
        let f = leaf(&mut t, &[1, 3], &[0.1, 0.2, 0.3]);
        let same = leaf(&mut t, &[1, 3], &[0.1, 0.2, 0.3]);
        let zero = l_ar(&mut t, f, same).unwrap();
        assert_eq!(t.value(zero).item().unwrap(), 0.0);

        let z = leaf(&mut t, &[1, 3], &[-0.9, 0.2, 0.3]);
        let unit = l_ar(&mut t, f, z).unwrap();
        assert!((t.value(unit).item().unwrap() - 1.0).abs() < 1e-12);

        // n_b=2, deviations (1,1) and (0,2) → (2 + 4) / 2 = 3.
        let f2 = leaf(&mut t, &[2, 2], &[1.0, 1.0, 0.0, 2.0]);
        let z2 = leaf(&mut t, &[2, 2], &[0.0, 0.0, 0.0, 0.0]);
        let l = l_ar(&mut t, f2, z2).unwrap();
        assert!((t.value(l).item().unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn l_ace_degenerate_uniform_and_direct() {
        // Single class → loss 0.
        let b1 = bank(1, 0, 2);
        let mut t = tape64();
        let logits = leaf(&mut t, &[1, 1], &[3.7]);
        let l = l_ace_from_logits(&mut t, logits, &[0], &b1).unwrap();
        assert!(t.value(l).item().unwrap().abs() < 1e-12);

        // All-equal logits → log |C| per sample.
        let b4 = bank(4, 0, 2);
        let mut t = tape64();
        let logits = leaf(&mut t, &[2, 4], &[0.5; 8]);
        let l = l_ace_from_logits(&mut t, logits, &[1, 3], &b4).unwrap();
        assert!((t.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        // Two classes, logits [2, 0], true class 0 → −log(e²/(e²+1)).
        let b2 = bank(2, 0, 2);
        let mut t = tape64();
        let logits = leaf(&mut t, &[1, 2], &[2.0, 0.0]);
        let l = l_ace_from_logits(&mut t, logits, &[0], &b2).unwrap();
        let expect = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((t.value(l).item().unwrap() - expect).abs() < 1e-10);
        assert!((expect - 0.1269).abs() < 5e-5);
    }

    #[test]
    fn l_ace_rejects_unseen_label() {
        let b = bank(2, 1, 2);
        let mut t = tape64();
        let logits = leaf(&mut t, &[1, 3], &[0.0, 0.0, 0.0]);
        assert!(matches!(
            l_ace_from_logits(&mut t, logits, &[2], &b),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn l_sc_direct_evaluation_and_shift_invariance() {
        let b = bank(3, 2, 2);
        let mut t = tape64();
        let logits = leaf(&mut t, &[1, 5], &[0.0; 5]);
        let l = l_sc_from_logits(&mut t, logits, &b).unwrap();
        // Calibrated probabilities: unseen e¹, seen e⁻¹.
        let pu = 1f64.exp() / (2.0 * 1f64.exp() + 3.0 * (-1f64).exp());
        let ps = (-1f64).exp() / (2.0 * 1f64.exp() + 3.0 * (-1f64).exp());
        assert!((pu - 0.4156).abs() < 1e-3);
        assert!((ps - 0.0563).abs() < 1e-3);
        assert!(pu > ps);
        let expect = -2.0 * pu.ln();
        assert!((t.value(l).item().unwrap() - expect).abs() < 1e-12);
        assert!((expect - 1.756).abs() < 1e-3);

        // Adding a constant to all raw logits changes nothing.
        let shifted = leaf(&mut t, &[1, 5], &[11.5; 5]);
        let l2 = l_sc_from_logits(&mut t, shifted, &b).unwrap();
        assert!((t.value(l).item().unwrap() - t.value(l2).item().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn l_sc_requires_unseen_classes() {
        let b = bank(3, 0, 2);
        let mut t = tape64();
        let logits = leaf(&mut t, &[1, 3], &[0.0; 3]);
        assert!(matches!(
            l_sc_from_logits(&mut t, logits, &b),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn l_f_scl_cases() {
        let mut t = tape64();
        let a = leaf(&mut t, &[1, 2], &[3.0, 4.0]);
        let b = leaf(&mut t, &[1, 2], &[0.0, 0.0]);
        let l = l_f_scl(&mut t, a, b).unwrap();
        assert!((t.value(l).item().unwrap() - 25.0).abs() < 1e-12);
        let sym = l_f_scl(&mut t, b, a).unwrap();
        assert_eq!(t.value(l).item().unwrap(), t.value(sym).item().unwrap());
        let zero = l_f_scl(&mut t, a, a).unwrap();
        assert_eq!(t.value(zero).item().unwrap(), 0.0);
    }

    #[test]
    fn l_p_scl_cases() {
        let mut t = tape64();
        let p1 = leaf(&mut t, &[1, 2], &[1.0, 0.0]);
        let p2 = leaf(&mut t, &[1, 2], &[0.0, 1.0]);
        let l = l_p_scl(&mut t, p1, p2).unwrap();
        assert!((t.value(l).item().unwrap() - 2.0).abs() < 1e-12);
        let same = l_p_scl(&mut t, p1, p1).unwrap();
        assert_eq!(t.value(same).item().unwrap(), 0.0);

        let bad = leaf(&mut t, &[1, 2], &[0.7, 0.7]);
        assert!(matches!(l_p_scl(&mut t, p1, bad), Err(Error::Contract(_))));
    }

    proptest::proptest! {
        /// ‖p1 − p2‖² ≤ 2 per sample for probability vectors.
        #[test]
        fn l_p_scl_bounded_by_two(raw1 in proptest::collection::vec(0.01f64..1.0, 4),
                                  raw2 in proptest::collection::vec(0.01f64..1.0, 4)) {
            let norm = |v: &[f64]| {
                let s: f64 = v.iter().sum();
                v.iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let mut t = tape64();
            let p1 = leaf(&mut t, &[1, 4], &norm(&raw1));
            let p2 = leaf(&mut t, &[1, 4], &norm(&raw2));
            let l = l_p_scl(&mut t, p1, p2).unwrap();
            let v = t.value(l).item().unwrap();
            proptest::prop_assert!((0.0..=2.0 + 1e-9).contains(&v));
        }

        /// l_ace is invariant to adding a constant to all logits of a sample.
        #[test]
        fn l_ace_logit_shift_invariance(base in proptest::collection::vec(-3.0f64..3.0, 4),
                                        shift in -5.0f64..5.0) {
            let b = bank(4, 0, 2);
            let mut t = tape64();
            let l1 = leaf(&mut t, &[1, 4], &base);
            let shifted: Vec<f64> = base.iter().map(|x| x + shift).collect();
            let l2 = leaf(&mut t, &[1, 4], &shifted);
            let a = l_ace_from_logits(&mut t, l1, &[2], &b).unwrap();
            let bb = l_ace_from_logits(&mut t, l2, &[2], &b).unwrap();
            let (va, vb) = (t.value(a).item().unwrap(), t.value(bb).item().unwrap());
            proptest::prop_assert!((va - vb).abs() < 1e-8);
        }
    }

    #[test]
    fn compositions_match_direct_evaluation() {
        let weights = LossWeights {
            lambda_ar: 0.1,
            lambda_sc: 0.1,
            lambda_vat: 0.1,
            lambda_f_scl: 0.001,
            lambda_p_scl: 0.01,
        };
        let mut t = tape64();
        let ace = t.leaf(Tensor::scalar(1.0));
        let ar = t.leaf(Tensor::scalar(2.0));
        let sc = t.leaf(Tensor::scalar(3.0));
        let sub = l_subnet(&mut t, ace, ar, sc, &weights).unwrap();
        assert!((t.value(sub).item().unwrap() - 1.5).abs() < 1e-12);

        // λ_AR = λ_SC = 0 → equals L_ACE.
        let zeroed = LossWeights {
            lambda_ar: 0.0,
            lambda_sc: 0.0,
            ..weights
        };
        let sub0 = l_subnet(&mut t, ace, ar, sc, &zeroed).unwrap();
        assert_eq!(t.value(sub0).item().unwrap(), 1.0);

        let one = t.leaf(Tensor::scalar(1.0));
        let total = l_total(&mut t, one, one, one, one, &weights).unwrap();
        assert!((t.value(total).item().unwrap() - 1.111).abs() < 1e-12);

        let all_zero = LossWeights {
            lambda_ar: 0.0,
            lambda_sc: 0.0,
            lambda_vat: 0.0,
            lambda_f_scl: 0.0,
            lambda_p_scl: 0.0,
        };
        let avt_only = l_total(&mut t, one, ar, sc, ace, &all_zero).unwrap();
        assert_eq!(t.value(avt_only).item().unwrap(), 1.0);
    }

    #[test]
    fn negative_weights_are_rejected() {
        let bad = LossWeights {
            lambda_ar: -0.1,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn collaborative_distances_are_nonnegative_and_zero_at_equality() {
        let mut t = tape64();
        let p = leaf(&mut t, &[1, 3], &[0.2, 0.3, 0.5]);
        let q = leaf(&mut t, &[1, 3], &[0.6, 0.1, 0.3]);
        for dist in [
            CollabDistance::L2,
            CollabDistance::Kl,
            CollabDistance::KlRev,
            CollabDistance::Jsd,
        ] {
            let l = collaborative_prediction_loss(&mut t, p, q, dist).unwrap();
            assert!(t.value(l).item().unwrap() > 0.0, "{dist:?}");
            let z = collaborative_prediction_loss(&mut t, p, p, dist).unwrap();
            assert!(t.value(z).item().unwrap().abs() < 1e-12, "{dist:?}");
        }
    }
}
