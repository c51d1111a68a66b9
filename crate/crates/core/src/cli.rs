//! Command-line driver: `synth`, `train`, `eval`, `infer` and `gradcheck`.
//!
//! Exit codes: 0 on success, 1 on a numerical failure (divergence, failed
//! gradient check), 2 on usage and I/O errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{
    build_dataset, clahe, load_dataset, load_png, network_input, save_dataset, save_mask_png,
    save_png, ClassTaxonomy, DEFAULT_CLIP_LIMIT, DEFAULT_TILES,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, SuiteOptions};
use crate::metrics::{argmax_labels, evaluate, MetricsConfig, MetricsReport, CORRODED};
use crate::model::{load_checkpoint, save_checkpoint, UNet};
use crate::optim::train_with_observer;
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERICAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "useg", version, about = "Corrosion segmentation with a compact U-Net")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset as PNGs plus a manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset directory; writes the best checkpoint and a
    /// history CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Print a line per evaluation.
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Target class, by name or index.
        #[arg(long, default_value = "corroded")]
        class: String,
        #[arg(long, default_value_t = 10.0)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also print the CSV header and row.
        #[arg(long)]
        csv: bool,
    },
    /// Segment one image and write a label mask (or a color overlay).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlay: bool,
        /// Apply CLAHE before inference (for raw, unprocessed images).
        #[arg(long)]
        clahe: bool,
        /// Forward passes to time.
        #[arg(long, default_value_t = 3)]
        repeat: usize,
    },
    /// Finite-difference check of every layer and loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Corrupt one analytic gradient; the check must then fail.
        #[arg(long)]
        inject_fault: bool,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::NonFinite(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn echo(what: &str, value: &impl Serialize) {
    eprintln!(
        "effective {what}:\n{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth {
            config,
            out,
            n_train,
            n_test,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.n_train = n_train.unwrap_or(cfg.n_train);
            cfg.n_test = n_test.unwrap_or(cfg.n_test);
            cfg.synth.seed = seed.unwrap_or(cfg.synth.seed);
            cfg.paths.data_dir = Some(out.clone());
            cfg.validate()?;
            echo("config", &cfg);
            let (train, test) = build_dataset(&cfg.synth, cfg.n_train, cfg.n_test)?;
            let manifest = save_dataset(&out, &cfg.synth.taxonomy.names, &train, &test)?;
            println!(
                "wrote {} samples ({} train, {} test) to {}",
                manifest.entries.len(),
                train.len(),
                test.len(),
                out.display()
            );
            Ok(EXIT_OK)
        }
        Command::Train {
            config,
            data,
            out,
            epochs,
            seed,
            verbose,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(d) = data {
                cfg.paths.data_dir = Some(d);
            }
            if let Some(o) = out {
                cfg.paths.checkpoint = Some(o);
            }
            cfg.train.max_epochs = epochs.unwrap_or(cfg.train.max_epochs);
            cfg.train.seed = seed.unwrap_or(cfg.train.seed);
            let data_dir = cfg
                .paths
                .data_dir
                .clone()
                .ok_or_else(|| Error::Config("no data directory (--data)".into()))?;
            let ckpt_path = cfg
                .paths
                .checkpoint
                .clone()
                .ok_or_else(|| Error::Config("no checkpoint path (--out)".into()))?;
            let history_path = cfg.history_path(&ckpt_path);
            cfg.paths.history_csv = Some(history_path.clone());
            cfg.validate()?;
            echo("config", &cfg);
            if !data_dir.is_dir() {
                return Err(Error::Io {
                    path: data_dir,
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
                });
            }
            let (manifest, train, test) = load_dataset(&data_dir)?;
            if manifest.classes.len() != cfg.model.num_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes, model expects {}",
                    manifest.classes.len(),
                    cfg.model.num_classes
                )));
            }
            let model = UNet::new(cfg.model.clone(), cfg.train.seed)?;
            let (best, history) = train_with_observer(model, &train, &test, &cfg.train, |r| {
                if let (true, Some(e)) = (verbose, &r.eval) {
                    eprintln!(
                        "epoch {:>5}  loss {:.5}  dsc {:.4}  {:.1}s",
                        r.epoch,
                        r.train_loss,
                        e.score(),
                        r.wall_time_s
                    );
                }
            })?;
            save_checkpoint(&best, &ckpt_path)?;
            fs::write(&history_path, history.to_csv()).map_err(|e| Error::io(&history_path, e))?;
            println!(
                "best eval DSC {:.4} at epoch {} of {}{}; checkpoint {}, history {}",
                best.eval_dsc,
                best.epoch,
                history.records.len(),
                if history.stopped_early { " (early stop)" } else { "" },
                ckpt_path.display(),
                history_path.display()
            );
            Ok(EXIT_OK)
        }
        Command::Eval {
            ckpt,
            data,
            class,
            alpha,
            split,
            csv,
        } => {
            let checkpoint = load_checkpoint(&ckpt)?;
            let (manifest, train, test) = load_dataset(&data)?;
            let taxonomy = ClassTaxonomy {
                names: manifest.classes.clone(),
                ..Default::default()
            };
            let target_class = match class.parse::<usize>() {
                Ok(i) => i,
                Err(_) => taxonomy
                    .index_of(&class)
                    .ok_or_else(|| Error::Config(format!("unknown class `{class}`")))?,
            };
            let metrics = MetricsConfig { target_class, alpha };
            echo("metrics config", &metrics);
            let samples = match split {
                SplitArg::Train => train,
                SplitArg::Test => test,
            };
            let report = evaluate(&checkpoint.to_model()?, &samples, &metrics)?;
            println!("{report}");
            if csv {
                println!("{}\n{}", MetricsReport::CSV_HEADER, report.csv_row());
            }
            Ok(EXIT_OK)
        }
        Command::Infer {
            ckpt,
            image,
            out,
            overlay,
            clahe: use_clahe,
            repeat,
        } => {
            echo(
                "inference settings",
                &serde_json::json!({
                    "ckpt": ckpt, "image": image, "out": out, "overlay": overlay,
                    "clahe": use_clahe, "repeat": repeat,
                }),
            );
            let model = load_checkpoint(&ckpt)?.to_model()?;
            let mut img = load_png(&image)?;
            if use_clahe {
                img = clahe(&img, DEFAULT_CLIP_LIMIT, DEFAULT_TILES)?;
            }
            let input = network_input(&img);
            let start = Instant::now();
            let mut logits = model.forward_eval(&input)?;
            for _ in 1..repeat.max(1) {
                logits = model.forward_eval(&input)?;
            }
            let fps = repeat.max(1) as f64 / start.elapsed().as_secs_f64();
            let labels = argmax_labels(&logits)?;
            let (_, _, h, w) = img.dims4()?;
            if overlay {
                save_png(&out, &overlay_image(&img, &labels, &ClassTaxonomy::default())?)?;
            } else {
                save_mask_png(&out, h, w, &labels)?;
            }
            let corroded = labels.iter().filter(|&&l| l as usize == CORRODED).count();
            println!(
                "{}x{} -> {}; corroded {:.1}% of pixels; {fps:.2} fps",
                w,
                h,
                out.display(),
                100.0 * corroded as f64 / labels.len() as f64
            );
            Ok(EXIT_OK)
        }
        Command::Gradcheck {
            seed,
            instances,
            tol,
            inject_fault,
        } => {
            let opts = SuiteOptions {
                seed,
                instances,
                inject_fault,
            };
            echo(
                "gradcheck settings",
                &serde_json::json!({
                    "seed": seed, "instances": instances, "tol": tol, "inject_fault": inject_fault,
                }),
            );
            let checks = run_suite(&opts)?;
            let mut ok = true;
            for c in &checks {
                let pass = c.passes(tol);
                ok &= pass;
                println!(
                    "{:<28} {:>3} instances  max rel err {:.3e}  {}",
                    c.op,
                    c.instances,
                    c.max_rel_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            Ok(if ok { EXIT_OK } else { EXIT_NUMERICAL })
        }
    }
}

/// Blend color per class name; classes without one are left as is.
pub fn overlay_color(name: &str) -> Option<[f64; 3]> {
    match name {
        "corroded" => Some([230.0, 25.0, 25.0]),
        "rivet" => Some([255.0, 150.0, 0.0]),
        "water" => Some([30.0, 200.0, 60.0]),
        "wet_coating" => Some([40.0, 90.0, 230.0]),
        "others" => Some([170.0, 80.0, 200.0]),
        _ => None,
    }
}

/// Half-transparent class colors over a `1 x 3 x H x W` image.
pub fn overlay_image(image: &Tensor, labels: &[u8], taxonomy: &ClassTaxonomy) -> Result<Tensor> {
    let (_, c, h, w) = image.dims4()?;
    let plane = h * w;
    if c != 3 || labels.len() != plane {
        return Err(Error::dims(format!(
            "overlay of {} labels on {:?}",
            labels.len(),
            image.dims()
        )));
    }
    let mut out = image.clone();
    let d = out.data_mut();
    for (i, &l) in labels.iter().enumerate() {
        if let Some(rgb) = taxonomy.names.get(l as usize).and_then(|n| overlay_color(n)) {
            for k in 0..3 {
                d[k * plane + i] = 0.5 * d[k * plane + i] + 0.5 * rgb[k];
            }
        }
    }
    Ok(out)
}
