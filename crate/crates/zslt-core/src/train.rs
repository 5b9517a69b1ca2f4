//! Training loop, evaluation driver, and the finite-difference gradient
//! checker.
//!
//! Per-image forward/backward passes are independent (each derives its own
//! dropout substream from the root seed and its position), so batches fan out
//! across threads; gradients are then reduced in index order, which keeps the
//! parallel and sequential paths bit-identical.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::config::{Precision, RunConfig};
use crate::data::{Checkpoint, DatasetBundle, ParamEntry, Split};
use crate::error::{Error, Result};
use crate::fae::{geometry_pairs, grid_geometry};
use crate::inference::{fuse_predict, GzslReport, MetricsReport, Setting};
use crate::model::{forward_image, ForwardSettings, ModelDims, ModelState, ModelVars};
use crate::numerics::adam::AdamState;
use crate::numerics::rng::{stream, StreamId};
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{self, Tensor};
use crate::numerics::Mode;
use crate::objectives::{
    self, class_logits, l_ace_from_logits, l_ar, l_sc_from_logits, l_subnet, l_total,
    ClassSemanticBank,
};
use crate::par;

/// Immutable per-run context shared by every image pass.
pub struct TrainContext<T: Scalar> {
    pub dims: ModelDims,
    pub geo_pairs: Tensor<T>,
    pub cfg: RunConfig,
}

impl<T: Scalar> TrainContext<T> {
    pub fn new(cfg: &RunConfig, bundle: &DatasetBundle<T>) -> Result<Self> {
        cfg.validate()?;
        let dims = ModelDims {
            attributes: bundle.attributes(),
            grid_h: bundle.grid_h,
            grid_w: bundle.grid_w,
            channels: bundle.channels,
            vocab_dim: bundle.vocab.dim(),
            embed_dim: cfg.model.d,
            geo_hidden: cfg.model.d_g,
            layers: cfg.model.layers,
            heads: cfg.model.heads,
        };
        dims.validate()?;
        let geo = grid_geometry(dims.grid_h, dims.grid_w)?;
        Ok(TrainContext {
            dims,
            geo_pairs: geometry_pairs(&geo),
            cfg: cfg.clone(),
        })
    }

    fn forward_settings(&self) -> ForwardSettings {
        ForwardSettings {
            dropout_p: self.cfg.model.dropout,
            att_softmax: self.cfg.model.att_softmax,
        }
    }

    /// Fresh model from the config's init stream, vocabulary taken from the
    /// bundle (optionally ℓ2-normalized).
    pub fn init_state(&self, bundle: &DatasetBundle<T>) -> Result<ModelState<T>> {
        let mut vocab = bundle.vocab.features.clone();
        if self.cfg.data.normalize_vocab {
            let rows = vocab.rows();
            let cols = vocab.cols();
            let mut data = vocab.data().to_vec();
            for r in 0..rows {
                let norm = data[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| *v * *v)
                    .sum::<T>()
                    .sqrt();
                if norm > T::zero() {
                    for v in data[r * cols..(r + 1) * cols].iter_mut() {
                        *v = *v / norm;
                    }
                }
            }
            vocab = Tensor::from_vec(vec![rows, cols], data)?;
        }
        let mut rng = stream(self.cfg.seed, StreamId::Init, &[]);
        ModelState::init(self.dims, vocab, self.cfg.model.vocab_trainable, &mut rng)
    }
}

/// Per-component loss values of one batch (or epoch), in f64 for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ace_avt: f64,
    pub ar_avt: f64,
    pub sc_avt: f64,
    pub ace_vat: f64,
    pub ar_vat: f64,
    pub sc_vat: f64,
    pub f_scl: f64,
    pub p_scl: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.total += w * other.total;
        self.ace_avt += w * other.ace_avt;
        self.ar_avt += w * other.ar_avt;
        self.sc_avt += w * other.sc_avt;
        self.ace_vat += w * other.ace_vat;
        self.ar_vat += w * other.ar_vat;
        self.sc_vat += w * other.sc_vat;
        self.f_scl += w * other.f_scl;
        self.p_scl += w * other.p_scl;
    }

    fn render(&self) -> String {
        format!(
            "total={:.12e} ace_avt={:.12e} ar_avt={:.12e} sc_avt={:.12e} ace_vat={:.12e} ar_vat={:.12e} sc_vat={:.12e} f_scl={:.12e} p_scl={:.12e}",
            self.total, self.ace_avt, self.ar_avt, self.sc_avt, self.ace_vat, self.ar_vat,
            self.sc_vat, self.f_scl, self.p_scl
        )
    }
}

/// Builds one image's full objective on the given tape.
///
/// Returns the scalar total-loss node plus the component values.
#[allow(clippy::too_many_arguments)]
pub fn image_objective<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    ctx: &TrainContext<T>,
    bank: &ClassSemanticBank<T>,
    raw: &Tensor<T>,
    label: usize,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossBreakdown)> {
    let a = ctx.dims.attributes;
    let fwd = forward_image(
        tape,
        vars,
        &ctx.dims,
        &ctx.geo_pairs,
        raw,
        ctx.forward_settings(),
        mode,
        rng,
    )?;
    let psi = tape.reshape(fwd.avt.psi, vec![1, a])?;
    let big_psi = tape.reshape(fwd.vat.big_psi, vec![1, a])?;
    let semantics = tape.leaf(bank.semantics.clone());
    let z_row = tape.leaf(Tensor::from_vec_unchecked(
        vec![1, a],
        bank.semantics.row(label).to_vec(),
    ));

    let weights = &ctx.cfg.loss.weights;
    let distance = ctx.cfg.loss.collab_distance;

    let mut subnet = |f: Var| -> Result<(Var, Var, Var, Var, Var)> {
        let logits = class_logits(tape, f, semantics)?;
        let ace = l_ace_from_logits(tape, logits, &[label], bank)?;
        let ar = l_ar(tape, f, z_row)?;
        let sc = l_sc_from_logits(tape, logits, bank)?;
        let combined = l_subnet(tape, ace, ar, sc, weights)?;
        Ok((logits, ace, ar, sc, combined))
    };
    let (logits_avt, ace_avt, ar_avt, sc_avt, loss_avt) = subnet(psi)?;
    let (logits_vat, ace_vat, ar_vat, sc_vat, loss_vat) = subnet(big_psi)?;

    let f_scl = objectives::collaborative_feature_loss(tape, psi, big_psi, distance)?;
    let (p1, p2) = if ctx.cfg.loss.p_scl_calibrated {
        let indicator = tape.leaf(bank.indicator());
        let c1 = tape.add_row_broadcast(logits_avt, indicator)?;
        let c2 = tape.add_row_broadcast(logits_vat, indicator)?;
        (tape.softmax_rows(c1)?, tape.softmax_rows(c2)?)
    } else {
        (tape.softmax_rows(logits_avt)?, tape.softmax_rows(logits_vat)?)
    };
    let p_scl = objectives::collaborative_prediction_loss(tape, p1, p2, distance)?;

    let total = l_total(tape, loss_avt, loss_vat, f_scl, p_scl, weights)?;
    let value = |v: Var| -> Result<f64> { Ok(tape.value(v).item()?.as_f64()) };
    let breakdown = LossBreakdown {
        total: value(total)?,
        ace_avt: value(ace_avt)?,
        ar_avt: value(ar_avt)?,
        sc_avt: value(sc_avt)?,
        ace_vat: value(ace_vat)?,
        ar_vat: value(ar_vat)?,
        sc_vat: value(sc_vat)?,
        f_scl: value(f_scl)?,
        p_scl: value(p_scl)?,
    };
    Ok((total, breakdown))
}

fn run_indexed<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
    R: Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel {
            return par::map_indexed_par(n, f);
        }
    }
    let _ = parallel;
    par::map_indexed_seq(n, f)
}

/// Mean loss and mean gradient (all parameters, canonical order) of one batch.
///
/// The dropout substream of batch item `i` is derived from
/// `(seed, epoch, batch_index, i)`, so results do not depend on thread count.
pub fn batch_gradients<T: Scalar>(
    state: &ModelState<T>,
    ctx: &TrainContext<T>,
    bank: &ClassSemanticBank<T>,
    batch: &[(Tensor<T>, usize)],
    epoch: u64,
    batch_index: u64,
    parallel: bool,
) -> Result<(Vec<Tensor<T>>, LossBreakdown)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Contract("empty training batch".into()));
    }
    let per_image = run_indexed(n, parallel, |i| -> Result<(Vec<Tensor<T>>, LossBreakdown)> {
        let (raw, label) = &batch[i];
        let mut tape = Tape::new();
        let vars = state.register(&mut tape);
        let mut rng = stream(ctx.cfg.seed, StreamId::Dropout, &[epoch, batch_index, i as u64]);
        let (total, breakdown) =
            image_objective(&mut tape, &vars, ctx, bank, raw, *label, Mode::Train, &mut rng)?;
        let grads = tape.backward(total)?;
        let ordered: Vec<Tensor<T>> = vars.ordered().iter().map(|v| grads.of(*v).clone()).collect();
        Ok((ordered, breakdown))
    });

    let inv = 1.0 / n as f64;
    let mut acc: Option<Vec<Tensor<T>>> = None;
    let mut breakdown = LossBreakdown::default();
    for item in per_image {
        let (grads, bd) = item?;
        breakdown.add_scaled(&bd, inv);
        acc = Some(match acc {
            None => grads,
            Some(cur) => cur
                .iter()
                .zip(grads.iter())
                .map(|(a, b)| tensor::add(a, b))
                .collect::<Result<Vec<_>>>()?,
        });
    }
    let scale = T::from_f64(inv);
    let mean = acc
        .expect("nonempty batch")
        .iter()
        .map(|g| tensor::scale(g, scale))
        .collect::<Result<Vec<_>>>()?;
    Ok((mean, breakdown))
}

/// Eval-mode embeddings (ψ, Ψ) and the AVT attention map for one image.
pub fn embed_image<T: Scalar>(
    state: &ModelState<T>,
    ctx: &TrainContext<T>,
    raw: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let vars = state.register(&mut tape);
    let mut rng = stream(ctx.cfg.seed, StreamId::Dropout, &[u64::MAX]);
    let fwd = forward_image(
        &mut tape,
        &vars,
        &ctx.dims,
        &ctx.geo_pairs,
        raw,
        ctx.forward_settings(),
        Mode::Eval,
        &mut rng,
    )?;
    Ok((
        tape.value(fwd.avt.psi).clone(),
        tape.value(fwd.vat.big_psi).clone(),
        fwd.avt.attn,
    ))
}

/// Full CZSL + GZSL evaluation over the bundle's test splits.
pub fn evaluate<T: Scalar>(
    state: &ModelState<T>,
    ctx: &TrainContext<T>,
    bundle: &DatasetBundle<T>,
    parallel: bool,
) -> Result<MetricsReport> {
    let bank = &bundle.bank;
    let unseen_test = bundle.split_indices(Split::TestUnseen);
    let seen_test = bundle.split_indices(Split::TestSeen);
    if unseen_test.is_empty() || seen_test.is_empty() {
        return Err(Error::Data("evaluation requires seen and unseen test samples".into()));
    }
    let mut all_test = seen_test;
    all_test.extend(unseen_test.iter().copied());
    let alpha = ctx.cfg.predict.alpha;

    let embeddings = run_indexed(all_test.len(), parallel, |i| -> Result<(Tensor<T>, Tensor<T>)> {
        let (psi, big_psi, _) = embed_image(state, ctx, &bundle.images[all_test[i]].grid)?;
        Ok((psi, big_psi))
    });
    let embeddings: Vec<(Tensor<T>, Tensor<T>)> = embeddings.into_iter().collect::<Result<_>>()?;

    let mut gzsl_preds = Vec::with_capacity(all_test.len());
    let mut labels = Vec::with_capacity(all_test.len());
    let mut czsl_preds = Vec::new();
    let mut czsl_labels = Vec::new();
    for (pos, &idx) in all_test.iter().enumerate() {
        let (psi, big_psi) = &embeddings[pos];
        let label = bundle.images[idx].class;
        let g = fuse_predict(psi, big_psi, alpha, bank, Setting::Gzsl)?;
        gzsl_preds.push(g.class_index);
        labels.push(label);
        if bundle.images[idx].split == Split::TestUnseen {
            let c = fuse_predict(psi, big_psi, alpha, bank, Setting::Czsl)?;
            czsl_preds.push(c.class_index);
            czsl_labels.push(label);
        }
    }

    let czsl_acc = crate::inference::per_class_top1(
        &czsl_preds,
        &czsl_labels,
        &bank.unseen_indices(),
        ctx.cfg.predict.sample_averaged,
    )?;
    let gzsl = GzslReport::from_counts(
        &gzsl_preds,
        &labels,
        &bank.seen_indices(),
        &bank.unseen_indices(),
    )?;
    Ok(MetricsReport { czsl_acc, gzsl })
}

/// Outcome of a full training run.
pub struct TrainOutcome<T: Scalar> {
    pub state: ModelState<T>,
    pub adam: AdamState<T>,
    pub best_state: ModelState<T>,
    pub best_h: f64,
    pub best_epoch: u64,
    pub epochs_run: u64,
    /// Per-epoch loss lines followed by eval lines, one per line.
    pub log: String,
    pub final_report: MetricsReport,
}

/// Runs the optimization loop: shuffled seeded batches, both sub-nets forward,
/// one combined objective, Adam updates; periodic evaluation tracks the
/// best-H parameters.
pub fn run_train<T: Scalar>(cfg: &RunConfig, bundle: &DatasetBundle<T>) -> Result<TrainOutcome<T>> {
    let ctx = TrainContext::new(cfg, bundle)?;
    bundle.validate()?;
    let parallel = cfg!(feature = "parallel");
    let mut state = ctx.init_state(bundle)?;

    let trainable = state.trainable_indices();
    let shapes: Vec<Vec<usize>> = {
        let named = state.named_params();
        trainable.iter().map(|&i| named[i].1.shape().to_vec()).collect()
    };
    let mut adam = AdamState::new(&shapes, cfg.optim);

    let train_indices = bundle.split_indices(Split::TrainSeen);
    if train_indices.is_empty() {
        return Err(Error::Data("no training images".into()));
    }

    let mut log = String::new();
    let mut best_h = f64::MIN;
    let mut best_epoch = 0u64;
    let mut best_state = state.clone();

    for epoch in 1..=cfg.train.epochs as u64 {
        let mut order = train_indices.clone();
        order.shuffle(&mut stream(cfg.seed, StreamId::Shuffle, &[epoch]));

        let mut epoch_bd = LossBreakdown::default();
        let mut images_done = 0usize;
        for (batch_index, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let batch: Vec<(Tensor<T>, usize)> = chunk
                .iter()
                .map(|&i| (bundle.images[i].grid.clone(), bundle.images[i].class))
                .collect();
            let (grads, bd) = batch_gradients(
                &state,
                &ctx,
                &bundle.bank,
                &batch,
                epoch,
                batch_index as u64,
                parallel,
            )
            .map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} (epoch {epoch}, batch {batch_index})"),
                },
                other => other,
            })?;
            epoch_bd.add_scaled(&bd, chunk.len() as f64);
            images_done += chunk.len();

            let selected: Vec<Tensor<T>> = trainable.iter().map(|&i| grads[i].clone()).collect();
            let mut params = state.params_mut();
            let mut chosen: Vec<&mut Tensor<T>> = Vec::with_capacity(trainable.len());
            for (i, p) in params.iter_mut().enumerate() {
                if trainable.contains(&i) {
                    // params_mut order matches trainable index order.
                    chosen.push(p);
                }
            }
            adam.step(&mut chosen, &selected)?;
        }

        let mut mean_bd = LossBreakdown::default();
        mean_bd.add_scaled(&epoch_bd, 1.0 / images_done as f64);
        writeln!(log, "epoch={epoch:04} {}", mean_bd.render()).expect("string write");

        let is_last = epoch == cfg.train.epochs as u64;
        if epoch % cfg.train.eval_interval as u64 == 0 || is_last {
            let report = evaluate(&state, &ctx, bundle, parallel)?;
            writeln!(
                log,
                "eval epoch={epoch:04} czsl_acc={:.6} gzsl_u={:.6} gzsl_s={:.6} gzsl_h={:.6}",
                report.czsl_acc, report.gzsl.u, report.gzsl.s, report.gzsl.h
            )
            .expect("string write");
            if report.gzsl.h > best_h {
                best_h = report.gzsl.h;
                best_epoch = epoch;
                best_state = state.clone();
            }
        }
    }

    let final_report = evaluate(&state, &ctx, bundle, parallel)?;
    if cfg.train.epochs == 0 {
        best_state = state.clone();
        best_h = final_report.gzsl.h;
    }
    Ok(TrainOutcome {
        state,
        adam,
        best_state,
        best_h,
        best_epoch,
        epochs_run: cfg.train.epochs as u64,
        log,
        final_report,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint glue
// ---------------------------------------------------------------------------

/// Packs the model, optimizer moments, config snapshot, and RNG root state.
pub fn make_checkpoint<T: Scalar>(
    cfg: &RunConfig,
    state: &ModelState<T>,
    adam: &AdamState<T>,
    epoch: u64,
) -> Result<Checkpoint<T>> {
    let config_json = serde_json::to_string(cfg)
        .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    let trainable = state.trainable_indices();
    let params = state
        .named_params()
        .into_iter()
        .enumerate()
        .map(|(i, (name, value))| {
            let (m, v) = match trainable.iter().position(|&t| t == i) {
                Some(slot) => (adam.m[slot].clone(), adam.v[slot].clone()),
                None => (
                    Tensor::zeros(value.shape().to_vec()),
                    Tensor::zeros(value.shape().to_vec()),
                ),
            };
            ParamEntry {
                name,
                value: value.clone(),
                m,
                v,
            }
        })
        .collect();
    Ok(Checkpoint {
        config_json,
        epoch,
        root_seed: cfg.seed,
        adam_step: adam.step,
        params,
    })
}

/// Restores a checkpoint into a freshly initialized state, validating the
/// parameter names and shapes against the current config/dataset.
pub fn restore_checkpoint<T: Scalar>(
    ckpt: &Checkpoint<T>,
    state: &mut ModelState<T>,
    adam: &mut AdamState<T>,
) -> Result<RunConfig> {
    let expected: Vec<String> = state.named_params().into_iter().map(|(n, _)| n).collect();
    if expected.len() != ckpt.params.len() {
        return Err(Error::Config(format!(
            "incompatible checkpoint: holds {} parameters, model needs {}",
            ckpt.params.len(),
            expected.len()
        )));
    }
    for (want, got) in expected.iter().zip(ckpt.params.iter()) {
        if want != &got.name {
            return Err(Error::Config(format!(
                "incompatible checkpoint: parameter {} where {} was expected",
                got.name, want
            )));
        }
    }
    state
        .set_params(ckpt.params.iter().map(|p| p.value.clone()).collect())
        .map_err(|e| Error::Config(format!("incompatible checkpoint: {e}")))?;
    let trainable = state.trainable_indices();
    adam.m = trainable.iter().map(|&i| ckpt.params[i].m.clone()).collect();
    adam.v = trainable.iter().map(|&i| ckpt.params[i].v.clone()).collect();
    adam.step = ckpt.adam_step;
    serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::Config(format!("checkpoint config snapshot does not parse: {e}")))
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Pass threshold for the gradient check.
pub const GC_TOLERANCE: f64 = 1e-4;

/// Scale of the random verification point the gradient check evaluates at.
const GC_POINT_SIGMA: f64 = 0.6;
const GC_POINT_SALT: u64 = 13;

/// Canonical tiny configuration for `gradcheck`: small dims so the O(elements)
/// finite-difference sweep stays fast, unit loss weights so every objective
/// term contributes first-order signal.
pub fn gradcheck_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.d = 8;
    cfg.model.d_g = 8;
    cfg.model.dropout = 0.3;
    cfg.loss.weights = crate::objectives::LossWeights {
        lambda_ar: 1.0,
        lambda_sc: 1.0,
        lambda_vat: 1.0,
        lambda_f_scl: 1.0,
        lambda_p_scl: 1.0,
    };
    cfg.synth = crate::data::SyntheticSpec {
        attributes: 6,
        grid_h: 2,
        grid_w: 2,
        channels: 8,
        seen_classes: 4,
        unseen_classes: 2,
        images_per_class: 6,
        density: 0.3,
        noise_scale: 0.1,
        vocab_dim: 8,
        seed: 1,
    };
    cfg
}

pub struct GradCheckReport {
    /// (parameter name, max relative error over its elements)
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub runtime: Duration,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, err) in &self.per_param {
            writeln!(out, "{name} max_rel_err={err:.3e}").expect("string write");
        }
        writeln!(out, "overall max_rel_err={:.3e}", self.max_rel_err).expect("string write");
        out
    }
}

/// Central-difference check of the full objective's gradient on a small batch.
///
/// Runs in train mode: every finite-difference evaluation re-derives the same
/// dropout substreams, so the perturbed losses stay comparable. f64 only;
/// finite-difference tolerances are unreliable in f32.
pub fn grad_check(
    cfg: &RunConfig,
    bundle: &DatasetBundle<f64>,
    batch_size: usize,
) -> Result<GradCheckReport> {
    let start = Instant::now();
    let ctx = TrainContext::new(cfg, bundle)?;
    let mut state = ctx.init_state(bundle)?;
    // Check at a boldly scaled random point: Glorot-scale activations leave
    // some attention-weight gradients below what central differences can
    // resolve, while the differentiation engine is the same at any point.
    {
        let mut rng = stream(ctx.cfg.seed, StreamId::Init, &[GC_POINT_SALT]);
        for p in state.params_mut() {
            let shape = p.shape().to_vec();
            let data: Vec<f64> = (0..p.numel())
                .map(|_| rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal) * GC_POINT_SIGMA)
                .collect();
            *p = Tensor::from_vec_unchecked(shape, data);
        }
    }
    let state = state;
    let bank = &bundle.bank;

    let train = bundle.split_indices(Split::TrainSeen);
    if train.len() < batch_size {
        return Err(Error::Data(format!(
            "gradient check needs {batch_size} training images, bundle has {}",
            train.len()
        )));
    }
    let batch: Vec<(Tensor<f64>, usize)> = train[..batch_size]
        .iter()
        .map(|&i| (bundle.images[i].grid.clone(), bundle.images[i].class))
        .collect();

    let parallel = cfg!(feature = "parallel");
    let (analytic, _) = batch_gradients(&state, &ctx, bank, &batch, 0, 0, parallel)?;

    let batch_loss = |st: &ModelState<f64>| -> Result<f64> {
        let mut total = 0.0;
        for (i, (raw, label)) in batch.iter().enumerate() {
            let mut tape = Tape::new();
            let vars = st.register(&mut tape);
            let mut rng = stream(ctx.cfg.seed, StreamId::Dropout, &[0, 0, i as u64]);
            let (_, bd) =
                image_objective(&mut tape, &vars, &ctx, bank, raw, *label, Mode::Train, &mut rng)?;
            total += bd.total;
        }
        Ok(total / batch.len() as f64)
    };

    let named = state.named_params();
    let param_shapes: Vec<(String, usize)> = named
        .iter()
        .map(|(n, t)| (n.clone(), t.numel()))
        .collect();
    // Flatten (param, element) pairs so the finite differences fan out evenly.
    let mut jobs = Vec::new();
    for (p_idx, (_, numel)) in param_shapes.iter().enumerate() {
        for e_idx in 0..*numel {
            jobs.push((p_idx, e_idx));
        }
    }
    const STEP: f64 = 1e-5;
    let errors = run_indexed(jobs.len(), parallel, |j| -> Result<f64> {
        let (p_idx, e_idx) = jobs[j];
        let eval_at = |delta: f64| -> Result<f64> {
            let mut st = state.clone();
            {
                let mut params = st.params_mut();
                let data = params[p_idx].data_mut();
                data[e_idx] += delta;
            }
            batch_loss(&st)
        };
        let numeric = (eval_at(STEP)? - eval_at(-STEP)?) / (2.0 * STEP);
        let a = analytic[p_idx].data()[e_idx];
        Ok((a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs()))
    });

    let mut per_param: Vec<(String, f64)> = param_shapes
        .iter()
        .map(|(n, _)| (n.clone(), 0.0))
        .collect();
    let mut max_rel_err = 0.0f64;
    for (j, err) in errors.into_iter().enumerate() {
        let err = err?;
        let (p_idx, _) = jobs[j];
        per_param[p_idx].1 = per_param[p_idx].1.max(err);
        max_rel_err = max_rel_err.max(err);
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        runtime: start.elapsed(),
    })
}

/// Picks the concrete scalar type for a run. Callers dispatch:
/// `match cfg.precision { Precision::F64 => run::<f64>(...), ... }`.
pub fn precision_of(cfg: &RunConfig) -> Precision {
    cfg.precision
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = gradcheck_config();
        cfg.loss.weights = crate::objectives::LossWeights::default();
        cfg.train.batch_size = 4;
        cfg.train.epochs = 2;
        cfg.train.eval_interval = 1;
        cfg
    }

    #[test]
    fn two_epoch_run_is_deterministic() {
        let cfg = tiny_cfg();
        let bundle = generate_synthetic::<f64>(&cfg.synthetic_spec()).unwrap();
        let a = run_train(&cfg, &bundle).unwrap();
        let b = run_train(&cfg, &bundle).unwrap();
        assert_eq!(a.log, b.log);
        let pa = a.state.named_params();
        let pb = b.state.named_params();
        for ((_, x), (_, y)) in pa.iter().zip(pb.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_batches_agree_bitwise() {
        let cfg = tiny_cfg();
        let bundle = generate_synthetic::<f64>(&cfg.synthetic_spec()).unwrap();
        let ctx = TrainContext::new(&cfg, &bundle).unwrap();
        let state = ctx.init_state(&bundle).unwrap();
        let batch: Vec<(Tensor<f64>, usize)> = bundle
            .split_indices(Split::TrainSeen)
            .iter()
            .take(6)
            .map(|&i| (bundle.images[i].grid.clone(), bundle.images[i].class))
            .collect();
        let (gp, bp) = batch_gradients(&state, &ctx, &bundle.bank, &batch, 1, 0, true).unwrap();
        let (gs, bs) = batch_gradients(&state, &ctx, &bundle.bank, &batch, 1, 0, false).unwrap();
        assert_eq!(bp, bs);
        for (a, b) in gp.iter().zip(gs.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn zeroed_vat_weights_leave_vat_parameters_untrained() {
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 1;
        cfg.loss.weights.lambda_vat = 0.0;
        cfg.loss.weights.lambda_f_scl = 0.0;
        cfg.loss.weights.lambda_p_scl = 0.0;
        let bundle = generate_synthetic::<f64>(&cfg.synthetic_spec()).unwrap();
        let ctx = TrainContext::new(&cfg, &bundle).unwrap();
        let init = ctx.init_state(&bundle).unwrap();
        let out = run_train(&cfg, &bundle).unwrap();
        for ((name, before), (_, after)) in
            init.named_params().iter().zip(out.state.named_params().iter())
        {
            if name.starts_with("vat.") {
                assert_eq!(before.data(), after.data(), "{name} moved");
            } else if name.starts_with("avt.") && name.contains("embed_w") {
                assert_ne!(before.data(), after.data(), "{name} did not move");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_outputs() {
        let cfg = tiny_cfg();
        let bundle = generate_synthetic::<f64>(&cfg.synthetic_spec()).unwrap();
        let ctx = TrainContext::new(&cfg, &bundle).unwrap();
        let out = run_train(&cfg, &bundle).unwrap();

        let ckpt = make_checkpoint(&cfg, &out.state, &out.adam, out.epochs_run).unwrap();
        let bytes = ckpt.encode();
        let loaded = Checkpoint::<f64>::decode(&bytes).unwrap();

        let mut fresh = ctx.init_state(&bundle).unwrap();
        let shapes: Vec<Vec<usize>> = {
            let named = fresh.named_params();
            fresh
                .trainable_indices()
                .iter()
                .map(|&i| named[i].1.shape().to_vec())
                .collect()
        };
        let mut adam = AdamState::new(&shapes, cfg.optim);
        restore_checkpoint(&loaded, &mut fresh, &mut adam).unwrap();

        let raw = &bundle.images[0].grid;
        let (psi_a, bpsi_a, _) = embed_image(&out.state, &ctx, raw).unwrap();
        let (psi_b, bpsi_b, _) = embed_image(&fresh, &ctx, raw).unwrap();
        assert_eq!(psi_a.data(), psi_b.data());
        assert_eq!(bpsi_a.data(), bpsi_b.data());
        assert_eq!(adam.step, out.adam.step);
    }

    #[test]
    fn incompatible_checkpoint_is_a_config_error() {
        let cfg = tiny_cfg();
        let bundle = generate_synthetic::<f64>(&cfg.synthetic_spec()).unwrap();
        let ctx = TrainContext::new(&cfg, &bundle).unwrap();
        let state = ctx.init_state(&bundle).unwrap();
        let shapes: Vec<Vec<usize>> = state
            .named_params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let adam = AdamState::new(&shapes, cfg.optim);
        let ckpt = make_checkpoint(&cfg, &state, &adam, 0).unwrap();

        // A model with a different attribute count must refuse the load.
        let mut other_cfg = cfg.clone();
        other_cfg.synth.attributes = 7;
        let other_bundle = generate_synthetic::<f64>(&other_cfg.synthetic_spec()).unwrap();
        let other_ctx = TrainContext::new(&other_cfg, &other_bundle).unwrap();
        let mut other_state = other_ctx.init_state(&other_bundle).unwrap();
        let mut other_adam = AdamState::new(&shapes, cfg.optim);
        let err = restore_checkpoint(&ckpt, &mut other_state, &mut other_adam).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn exploding_run_aborts_with_epoch_and_batch_context() {
        let mut cfg = tiny_cfg();
        cfg.optim.lr = 1e120;
        cfg.train.epochs = 4;
        let bundle = generate_synthetic::<f64>(&cfg.synthetic_spec()).unwrap();
        match run_train(&cfg, &bundle) {
            Err(Error::NonFinite { context }) => {
                assert!(context.contains("epoch"), "context: {context}");
                assert!(context.contains("batch"), "context: {context}");
            }
            Err(other) => panic!("expected a NaN abort, got {other}"),
            Ok(_) => panic!("expected a NaN abort, run finished"),
        }
    }

    #[test]
    fn gradcheck_on_a_tiny_batch_passes() {
        let cfg = gradcheck_config();
        let bundle = generate_synthetic::<f64>(&cfg.synthetic_spec()).unwrap();
        let report = grad_check(&cfg, &bundle, 2).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {}\n{}",
            report.max_rel_err,
            report.render()
        );
    }
}
