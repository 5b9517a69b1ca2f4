//! Fused calibrated prediction, CZSL/GZSL evaluation, and attention export.

use std::io::Write;

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::objectives::ClassSemanticBank;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setting {
    /// Search space restricted to unseen classes.
    Czsl,
    /// Search space is the union of seen and unseen classes.
    Gzsl,
}

/// One image's fused prediction.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub fused: Tensor<T>,
    /// Calibrated per-class scores over all classes.
    pub scores: Tensor<T>,
    pub class_index: usize,
    pub setting: Setting,
}

/// score_c = (α·ψ + (1−α)·Ψ)ᵀ z^c + 𝕀[c ∈ C^u], argmax over the admissible
/// class set with lowest-index tie-breaking.
pub fn fuse_predict<T: Scalar>(
    psi: &Tensor<T>,
    big_psi: &Tensor<T>,
    alpha: f64,
    bank: &ClassSemanticBank<T>,
    setting: Setting,
) -> Result<Prediction<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let a = bank.num_attributes();
    if psi.numel() != a || big_psi.numel() != a {
        return Err(Error::shape(
            "fuse_predict",
            format!("embeddings of length {a}"),
            format!("{} and {}", psi.numel(), big_psi.numel()),
        ));
    }
    let aw = T::from_f64(alpha);
    let bw = T::from_f64(1.0 - alpha);
    let fused: Vec<T> = psi
        .data()
        .iter()
        .zip(big_psi.data().iter())
        .map(|(&p, &q)| aw * p + bw * q)
        .collect();

    let c = bank.num_classes();
    let mut scores = Vec::with_capacity(c);
    for cls in 0..c {
        let z = bank.semantics.row(cls);
        let mut s = T::zero();
        for (f, zv) in fused.iter().zip(z.iter()) {
            s += *f * *zv;
        }
        s += if bank.seen_mask[cls] { -T::one() } else { T::one() };
        scores.push(s);
    }

    let admissible: Vec<usize> = match setting {
        Setting::Czsl => bank.unseen_indices(),
        Setting::Gzsl => (0..c).collect(),
    };
    if admissible.is_empty() {
        return Err(Error::Contract("prediction over an empty class set".into()));
    }
    let mut best = admissible[0];
    for &cls in &admissible[1..] {
        if scores[cls] > scores[best] {
            best = cls;
        }
    }
    Ok(Prediction {
        fused: Tensor::from_vec_unchecked(vec![a], fused),
        scores: Tensor::from_vec_unchecked(vec![c], scores),
        class_index: best,
        setting,
    })
}

/// Mean per-class top-1 accuracy over `class_subset`, as a percentage.
///
/// `sample_averaged` switches to plain sample accuracy for debugging.
pub fn per_class_top1(
    predictions: &[usize],
    labels: &[usize],
    class_subset: &[usize],
    sample_averaged: bool,
) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let accs = per_class_accuracies(predictions, labels, class_subset)?;
    if sample_averaged {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (&p, &l) in predictions.iter().zip(labels.iter()) {
            if class_subset.contains(&l) {
                total += 1;
                correct += usize::from(p == l);
            }
        }
        return Ok(100.0 * correct as f64 / total as f64);
    }
    Ok(accs.iter().map(|(_, a)| *a).sum::<f64>() / accs.len() as f64)
}

/// Per-class accuracy (percent) for each class in the subset.
pub fn per_class_accuracies(
    predictions: &[usize],
    labels: &[usize],
    class_subset: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(class_subset.len());
    for &cls in class_subset {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (&p, &l) in predictions.iter().zip(labels.iter()) {
            if l == cls {
                total += 1;
                correct += usize::from(p == cls);
            }
        }
        if total == 0 {
            return Err(Error::Data(format!("class {cls} has no test samples")));
        }
        out.push((cls, 100.0 * correct as f64 / total as f64));
    }
    Ok(out)
}

/// H = 2·S·U/(S+U); defined as 0 when both are 0.
pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u == 0.0 && s == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// GZSL evaluation summary; U, S, H are percentages.
#[derive(Clone, Debug)]
pub struct GzslReport {
    pub u: f64,
    pub s: f64,
    pub h: f64,
    pub per_class: Vec<(usize, f64)>,
}

impl GzslReport {
    pub fn from_counts(
        predictions: &[usize],
        labels: &[usize],
        seen_classes: &[usize],
        unseen_classes: &[usize],
    ) -> Result<Self> {
        let seen = per_class_accuracies(predictions, labels, seen_classes)?;
        let unseen = per_class_accuracies(predictions, labels, unseen_classes)?;
        let s = seen.iter().map(|(_, a)| *a).sum::<f64>() / seen.len() as f64;
        let u = unseen.iter().map(|(_, a)| *a).sum::<f64>() / unseen.len() as f64;
        let mut per_class = seen;
        per_class.extend(unseen);
        Ok(GzslReport {
            u,
            s,
            h: harmonic_mean(u, s),
            per_class,
        })
    }
}

/// Run-level metrics with the fixed report keys.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub czsl_acc: f64,
    pub gzsl: GzslReport,
}

impl MetricsReport {
    /// Structured text form: one `key=value` line per metric.
    pub fn render(&self) -> String {
        format!(
            "czsl_acc={:.6}\ngzsl_u={:.6}\ngzsl_s={:.6}\ngzsl_h={:.6}\n",
            self.czsl_acc, self.gzsl.u, self.gzsl.s, self.gzsl.h
        )
    }
}

/// One exported attention line: an (image, attribute) pair with the
/// attribute's score and its K-length attention row.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub image_id: String,
    pub attribute_name: String,
    pub psi_score: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub weights: Vec<f64>,
}

/// Selects the `top_k` attributes by ψ score (descending, index tie-break)
/// and pairs each with its attention row.
pub fn export_attention<T: Scalar>(
    attn: &Tensor<T>,
    psi: &Tensor<T>,
    names: &[String],
    top_k: usize,
    image_id: &str,
    grid_h: usize,
    grid_w: usize,
) -> Result<Vec<AttentionRecord>> {
    let a = psi.numel();
    if top_k > a {
        return Err(Error::Parameter(format!(
            "top_k {top_k} exceeds attribute count {a}"
        )));
    }
    if attn.rows() != a || attn.cols() != grid_h * grid_w || names.len() != a {
        return Err(Error::shape(
            "export_attention",
            format!("{a}x{} attention with {a} names", grid_h * grid_w),
            format!("{:?}, {} names", attn.shape(), names.len()),
        ));
    }
    let mut order: Vec<usize> = (0..a).collect();
    order.sort_by(|&x, &y| {
        psi.data()[y]
            .partial_cmp(&psi.data()[x])
            .expect("finite scores")
            .then(x.cmp(&y))
    });
    Ok(order[..top_k]
        .iter()
        .map(|&idx| AttentionRecord {
            image_id: image_id.to_string(),
            attribute_name: names[idx].clone(),
            psi_score: psi.data()[idx].as_f64(),
            grid_h,
            grid_w,
            weights: attn.row(idx).iter().map(|w| w.as_f64()).collect(),
        })
        .collect())
}

/// Tab-separated line format: image_id, attribute_name, psi_score (6 dp),
/// grid_h, grid_w, then the H·W attention weights.
pub fn write_attention_records<W: Write>(mut out: W, records: &[AttentionRecord]) -> Result<()> {
    for r in records {
        write!(
            out,
            "{}\t{}\t{:.6}\t{}\t{}",
            r.image_id, r.attribute_name, r.psi_score, r.grid_h, r.grid_w
        )?;
        for w in &r.weights {
            write!(out, "\t{w}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(seen: usize, unseen: usize, semantics: Vec<f64>, a: usize) -> ClassSemanticBank<f64> {
        let c = seen + unseen;
        let mut mask = vec![true; seen];
        mask.extend(vec![false; unseen]);
        ClassSemanticBank::new(
            Tensor::from_vec(vec![c, a], semantics).unwrap(),
            mask,
            (0..c).map(|i| format!("class_{i}")).collect(),
        )
        .unwrap()
    }

    fn t1(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn alpha_one_reduces_to_avt_scoring() {
        let b = bank(1, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2);
        let psi = t1(&[2.0, -1.0]);
        let big_psi = t1(&[-5.0, 9.0]);
        let p = fuse_predict(&psi, &big_psi, 1.0, &b, Setting::Gzsl).unwrap();
        assert_eq!(p.fused.data(), psi.data());

        let p0 = fuse_predict(&psi, &big_psi, 0.0, &b, Setting::Gzsl).unwrap();
        assert_eq!(p0.fused.data(), big_psi.data());
    }

    #[test]
    fn czsl_argmax_ignores_the_indicator() {
        // Indicator shifts every unseen score equally, so the CZSL winner
        // within C^u never changes.
        let b = bank(1, 3, vec![1.0, 0.0, 0.3, 0.7, 0.9, 0.1, 0.2, 0.8], 2);
        let psi = t1(&[0.4, 1.7]);
        let big_psi = t1(&[1.1, -0.3]);
        let with = fuse_predict(&psi, &big_psi, 0.6, &b, Setting::Czsl).unwrap();
        // Recompute without the indicator by hand.
        let fused: Vec<f64> = psi
            .data()
            .iter()
            .zip(big_psi.data())
            .map(|(p, q)| 0.6 * p + 0.4 * q)
            .collect();
        let mut best = 1;
        let mut best_score = f64::MIN;
        for cls in 1..4 {
            let s: f64 = fused
                .iter()
                .zip(b.semantics.row(cls))
                .map(|(f, z)| f * z)
                .sum();
            if s > best_score {
                best_score = s;
                best = cls;
            }
        }
        assert_eq!(with.class_index, best);
        assert!(!b.seen_mask[with.class_index]);
    }

    #[test]
    fn gzsl_indicator_can_flip_a_close_call() {
        // Seen class outscores unseen by less than the 2-point indicator gap.
        let b = bank(1, 1, vec![1.0, 0.0, 0.0, 1.0], 2);
        let psi = t1(&[1.5, 1.0]);
        let big_psi = psi.clone();
        let p = fuse_predict(&psi, &big_psi, 0.5, &b, Setting::Gzsl).unwrap();
        // Raw scores: seen 1.5, unseen 1.0; calibrated: 0.5 vs 2.0.
        assert_eq!(p.class_index, 1);
    }

    #[test]
    fn ties_break_toward_the_lowest_index() {
        let b = bank(0, 3, vec![1.0, 1.0, 1.0], 1);
        let psi = t1(&[0.0]);
        let p = fuse_predict(&psi, &psi, 0.5, &b, Setting::Czsl).unwrap();
        assert_eq!(p.class_index, 0);
    }

    #[test]
    fn alpha_out_of_range_is_rejected() {
        let b = bank(1, 1, vec![1.0, 0.0], 1);
        let psi = t1(&[0.0]);
        assert!(matches!(
            fuse_predict(&psi, &psi, 1.5, &b, Setting::Gzsl),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn positive_scaling_preserves_argmax_only_without_the_indicator() {
        // Seen/unseen score gap below the 2-point indicator swing.
        let b = bank(1, 1, vec![1.0, 0.0, 0.0, 1.0], 2);
        let psi = t1(&[1.5, 1.0]);
        let scaled = t1(&[150.0, 100.0]);

        // With the indicator, scaling flips the GZSL winner.
        let small = fuse_predict(&psi, &psi, 0.5, &b, Setting::Gzsl).unwrap();
        let big = fuse_predict(&scaled, &scaled, 0.5, &b, Setting::Gzsl).unwrap();
        assert_eq!(small.class_index, 1);
        assert_eq!(big.class_index, 0);

        // Without it (CZSL restricts to unseen where the offset is constant),
        // scaling never moves the argmax.
        let b3 = bank(1, 3, vec![1.0, 0.0, 0.3, 0.7, 0.9, 0.1, 0.4, 0.6], 2);
        let c_small = fuse_predict(&psi, &psi, 0.5, &b3, Setting::Czsl).unwrap();
        let c_big = fuse_predict(&scaled, &scaled, 0.5, &b3, Setting::Czsl).unwrap();
        assert_eq!(c_small.class_index, c_big.class_index);
    }

    #[test]
    fn per_class_accuracy_examples() {
        // All correct.
        assert_eq!(
            per_class_top1(&[0, 1, 2], &[0, 1, 2], &[0, 1, 2], false).unwrap(),
            100.0
        );
        // Two classes at 100% and 0%, sizes 1 and 3 → 50% per-class average.
        let preds = [0, 9, 9, 9];
        let labels = [0, 1, 1, 1];
        assert_eq!(per_class_top1(&preds, &labels, &[0, 1], false).unwrap(), 50.0);
        // Sample-averaged differs: 1/4 correct.
        assert_eq!(per_class_top1(&preds, &labels, &[0, 1], true).unwrap(), 25.0);
        // Three classes at 100%, 50%, 0%.
        let preds = [0, 1, 9, 9, 9];
        let labels = [0, 1, 1, 2, 2];
        assert_eq!(per_class_top1(&preds, &labels, &[0, 1, 2], false).unwrap(), 50.0);
        // Empty class is an error.
        assert!(per_class_top1(&[0], &[0], &[0, 1], false).is_err());
    }

    #[test]
    fn harmonic_mean_reference_cases() {
        assert!((harmonic_mean(67.5, 73.6) - 70.4).abs() < 0.05);
        assert!((harmonic_mean(64.6, 82.7) - 72.5).abs() < 0.05);
        assert_eq!(harmonic_mean(41.0, 41.0), 41.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn harmonic_mean_symmetric_and_bounded(u in 0.0f64..100.0, s in 0.0f64..100.0) {
            let h = harmonic_mean(u, s);
            proptest::prop_assert!((h - harmonic_mean(s, u)).abs() < 1e-9);
            proptest::prop_assert!(h <= (u + s) / 2.0 + 1e-9);
        }
    }

    #[test]
    fn export_sorts_by_psi_and_respects_top_k() {
        let attn = Tensor::from_vec(
            vec![3, 2],
            vec![0.5, 0.5, 0.9, 0.1, 0.2, 0.8],
        )
        .unwrap();
        let psi = t1(&[0.3, 2.0, -1.0]);
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let all = export_attention(&attn, &psi, &names, 3, "img0", 1, 2).unwrap();
        assert_eq!(
            all.iter().map(|r| r.attribute_name.as_str()).collect::<Vec<_>>(),
            vec!["b", "a", "c"]
        );
        for r in &all {
            let sum: f64 = r.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let top1 = export_attention(&attn, &psi, &names, 1, "img0", 1, 2).unwrap();
        assert_eq!(top1.len(), 1);
        assert!(export_attention(&attn, &psi, &names, 4, "img0", 1, 2).is_err());
    }

    #[test]
    fn record_lines_are_tab_separated_with_six_decimal_scores() {
        let rec = AttentionRecord {
            image_id: "img_007".into(),
            attribute_name: "bill color yellow".into(),
            psi_score: 1.23456789,
            grid_h: 1,
            grid_w: 2,
            weights: vec![0.25, 0.75],
        };
        let mut buf = Vec::new();
        write_attention_records(&mut buf, &[rec]).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(line, "img_007\tbill color yellow\t1.234568\t1\t2\t0.25\t0.75\n");
    }

    #[test]
    fn metrics_report_uses_fixed_keys() {
        let report = MetricsReport {
            czsl_acc: 93.75,
            gzsl: GzslReport {
                u: 70.0,
                s: 80.0,
                h: harmonic_mean(70.0, 80.0),
                per_class: vec![],
            },
        };
        let text = report.render();
        assert!(text.contains("czsl_acc=93.750000"));
        assert!(text.contains("gzsl_u=70.000000"));
        assert!(text.contains("gzsl_s=80.000000"));
        assert!(text.contains("gzsl_h=74.666667"));
    }
}
