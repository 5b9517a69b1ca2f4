//! Command-line driver: training, evaluation, synthetic data generation,
//! gradient checking, and attention export.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zslt_core::config::{Precision, RunConfig};
use zslt_core::data::{
    assemble_dataset, bundle::write_bundle_to_dir, checkpoint_load, checkpoint_save,
    generate_synthetic, DatasetBundle,
};
use zslt_core::error::{Error, Result};
use zslt_core::inference::{export_attention, write_attention_records};
use zslt_core::numerics::adam::AdamState;
use zslt_core::numerics::tensor::{concat_cols, Tensor};
use zslt_core::train::{
    self, embed_image, evaluate, grad_check, gradcheck_config, make_checkpoint,
    restore_checkpoint, run_train, TrainContext,
};
use zslt_core::Scalar;

#[derive(Parser)]
#[command(name = "zslt", about = "Cross attribute-guided zero-shot learner", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key-value config file with dotted keys (e.g. model.d = 64).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, repeatable (e.g. --set optim.lr=0.0001).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write final/best checkpoints plus the loss log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for train.log, final.ckpt, best.ckpt.
        #[arg(long, default_value = "runs/train")]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint and print the metrics report.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also print the per-class accuracy table.
        #[arg(long)]
        per_class: bool,
        /// Write the metrics report to this file as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the configured synthetic dataset in on-disk layout.
    Gensynth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/synth")]
        out_dir: PathBuf,
    },
    /// Finite-difference gradient check (always 64-bit).
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Batch size for the checked objective.
        #[arg(long, default_value_t = 2)]
        images: usize,
    },
    /// Export top-k attention rows and both semantic embeddings per image.
    ExportAttn {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated image ids.
        #[arg(long, value_delimiter = ',', required = true)]
        images: Vec<String>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, default_value = "runs/attn")]
        out_dir: PathBuf,
    },
}

fn load_config(args: &ConfigArgs, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_kv_text(&text)?;
    }
    for assignment in &args.sets {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects key=value, got {assignment:?}"))
        })?;
        cfg.set(key.trim(), value)?;
    }
    if let Ok(seed) = std::env::var("ZSLT_SEED") {
        let seed = seed
            .parse()
            .map_err(|_| Error::Config(format!("ZSLT_SEED must be an integer, got {seed:?}")))?;
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_bundle<T: Scalar>(cfg: &RunConfig) -> Result<DatasetBundle<T>> {
    if cfg.uses_real_data()? {
        let bundle = assemble_dataset(
            cfg.data.feature_dir.as_ref().unwrap(),
            cfg.data.semantics.as_ref().unwrap(),
            cfg.data.vocab.as_ref().unwrap(),
            cfg.data.split.as_ref().unwrap(),
        )?;
        eprintln!("loaded dataset: {}", bundle.summary());
        Ok(bundle)
    } else {
        let bundle = generate_synthetic(&cfg.synthetic_spec())?;
        eprintln!("generated synthetic dataset: {}", bundle.summary());
        Ok(bundle)
    }
}

fn restore_state<T: Scalar>(
    cfg: &RunConfig,
    bundle: &DatasetBundle<T>,
    checkpoint: &Path,
) -> Result<(TrainContext<T>, zslt_core::model::ModelState<T>)> {
    let ctx = TrainContext::new(cfg, bundle)?;
    let mut state = ctx.init_state(bundle)?;
    let shapes: Vec<Vec<usize>> = {
        let named = state.named_params();
        state
            .trainable_indices()
            .iter()
            .map(|&i| named[i].1.shape().to_vec())
            .collect()
    };
    let mut adam = AdamState::new(&shapes, cfg.optim);
    let ckpt = checkpoint_load::<T>(checkpoint)?;
    restore_checkpoint(&ckpt, &mut state, &mut adam)?;
    Ok((ctx, state))
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let bundle = load_bundle::<T>(cfg)?;
    fs::create_dir_all(out_dir)?;
    let outcome = run_train(cfg, &bundle)?;
    print!("{}", outcome.log);
    fs::write(out_dir.join("train.log"), &outcome.log)?;
    let final_ckpt = make_checkpoint(cfg, &outcome.state, &outcome.adam, outcome.epochs_run)?;
    checkpoint_save(&out_dir.join("final.ckpt"), &final_ckpt)?;
    let best_ckpt = make_checkpoint(cfg, &outcome.best_state, &outcome.adam, outcome.best_epoch)?;
    checkpoint_save(&out_dir.join("best.ckpt"), &best_ckpt)?;
    println!(
        "best gzsl_h={:.6} at epoch {}",
        outcome.best_h, outcome.best_epoch
    );
    print!("{}", outcome.final_report.render());
    Ok(())
}

fn cmd_eval<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: &Path,
    per_class: bool,
    out: Option<&Path>,
) -> Result<()> {
    let bundle = load_bundle::<T>(cfg)?;
    let (ctx, state) = restore_state(cfg, &bundle, checkpoint)?;
    let report = evaluate(&state, &ctx, &bundle, cfg!(feature = "parallel"))?;
    let text = report.render();
    print!("{text}");
    if per_class {
        for (cls, acc) in &report.gzsl.per_class {
            println!("class_acc\t{}\t{acc:.6}", bundle.bank.class_names[*cls]);
        }
    }
    if let Some(path) = out {
        fs::write(path, text)?;
    }
    Ok(())
}

fn cmd_export_attn<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: &Path,
    images: &[String],
    top_k: usize,
    out_dir: &Path,
) -> Result<()> {
    let bundle = load_bundle::<T>(cfg)?;
    let (ctx, state) = restore_state(cfg, &bundle, checkpoint)?;
    fs::create_dir_all(out_dir)?;

    let mut records = Vec::new();
    let mut psi_rows: Vec<Tensor<T>> = Vec::new();
    let mut big_psi_rows: Vec<Tensor<T>> = Vec::new();
    for id in images {
        let img = bundle
            .images
            .iter()
            .find(|img| &img.id == id)
            .ok_or_else(|| Error::Data(format!("unknown image id {id:?}")))?;
        let (psi, big_psi, attn) = embed_image(&state, &ctx, &img.grid)?;
        records.extend(export_attention(
            &attn,
            &psi,
            &bundle.vocab.names,
            top_k,
            id,
            bundle.grid_h,
            bundle.grid_w,
        )?);
        let a = psi.numel();
        psi_rows.push(psi.reshaped(vec![1, a])?);
        big_psi_rows.push(big_psi.reshaped(vec![1, a])?);
    }
    let file = fs::File::create(out_dir.join("attention.tsv"))?;
    write_attention_records(file, &records)?;

    // Raw embeddings of the listed images, one row each, for downstream plots.
    let psi_refs: Vec<&Tensor<T>> = psi_rows.iter().collect();
    let big_refs: Vec<&Tensor<T>> = big_psi_rows.iter().collect();
    zslt_core::data::save_tensor_file(&out_dir.join("psi.zslt"), &concat_rows(&psi_refs)?)?;
    zslt_core::data::save_tensor_file(&out_dir.join("big_psi.zslt"), &concat_rows(&big_refs)?)?;
    fs::write(out_dir.join("images.txt"), images.join("\n") + "\n")?;
    println!(
        "wrote {} attention records for {} images to {}",
        records.len(),
        images.len(),
        out_dir.display()
    );
    Ok(())
}

/// Stacks 1×A rows into an N×A matrix.
fn concat_rows<T: Scalar>(rows: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let cols = concat_cols(rows)?;
    cols.reshaped(vec![rows.len(), rows[0].numel()])
}

fn cmd_gensynth<T: Scalar>(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let bundle = generate_synthetic::<T>(&cfg.synthetic_spec())?;
    fs::create_dir_all(out_dir)?;
    write_bundle_to_dir(&bundle, out_dir)?;
    println!("{}", bundle.summary());
    println!("wrote dataset to {}", out_dir.display());
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, images: usize) -> Result<()> {
    let bundle = generate_synthetic::<f64>(&cfg.synthetic_spec())?;
    let report = grad_check(cfg, &bundle, images)?;
    print!("{}", report.render());
    println!("runtime={:.2}s", report.runtime.as_secs_f64());
    if report.max_rel_err >= train::GC_TOLERANCE {
        return Err(Error::GradCheck(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_err,
            train::GC_TOLERANCE
        )));
    }
    println!("gradcheck ok");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out_dir } => {
            let cfg = load_config(&config, RunConfig::default())?;
            match cfg.precision {
                Precision::F64 => cmd_train::<f64>(&cfg, &out_dir),
                Precision::F32 => cmd_train::<f32>(&cfg, &out_dir),
            }
        }
        Command::Eval {
            config,
            checkpoint,
            per_class,
            out,
        } => {
            let cfg = load_config(&config, RunConfig::default())?;
            match cfg.precision {
                Precision::F64 => cmd_eval::<f64>(&cfg, &checkpoint, per_class, out.as_deref()),
                Precision::F32 => cmd_eval::<f32>(&cfg, &checkpoint, per_class, out.as_deref()),
            }
        }
        Command::Gensynth { config, out_dir } => {
            let cfg = load_config(&config, RunConfig::default())?;
            match cfg.precision {
                Precision::F64 => cmd_gensynth::<f64>(&cfg, &out_dir),
                Precision::F32 => cmd_gensynth::<f32>(&cfg, &out_dir),
            }
        }
        Command::Gradcheck { config, images } => {
            // The finite-difference suite is only reliable in f64.
            let mut cfg = load_config(&config, gradcheck_config())?;
            cfg.precision = Precision::F64;
            cmd_gradcheck(&cfg, images)
        }
        Command::ExportAttn {
            config,
            checkpoint,
            images,
            top_k,
            out_dir,
        } => {
            let cfg = load_config(&config, RunConfig::default())?;
            match cfg.precision {
                Precision::F64 => cmd_export_attn::<f64>(&cfg, &checkpoint, &images, top_k, &out_dir),
                Precision::F32 => cmd_export_attn::<f32>(&cfg, &checkpoint, &images, top_k, &out_dir),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
