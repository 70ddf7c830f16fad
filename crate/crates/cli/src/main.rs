//! `kpvp`: synthetic data, two-stage training, prediction and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kpvp_core::config::Config;
use kpvp_core::data::{
    dataset_digest, frame_file_name, generate_synthetic_dataset, load_dataset, read_frame, write_contact_sheet,
    write_frame, DatasetSpec, SynthKind, SynthSpec,
};
use kpvp_core::evaluation::{evaluate_bundle, EvalOptions};
use kpvp_core::motion::PseudoLabels;
use kpvp_core::pipeline::{
    bundle_file_digest, extract_dataset_labels, load_bundle, predict_video, save_bundle, train_motion,
    train_translator,
};
use kpvp_core::{Error, Frame, Tensor};

/// File name of the bundle inside a checkpoint directory.
const BUNDLE_FILE: &str = "bundle.kpvp";
const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Parser)]
#[command(name = "kpvp", version, about = "Keypoint-guided video prediction from a single image")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with ground-truth object centers.
    Synth {
        #[arg(long)]
        kind: SynthKind,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        length: usize,
        /// Frame size as HxW, e.g. 64x64.
        #[arg(long, value_parser = parse_size)]
        size: [usize; 2],
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the keypoint detector and image translator.
    TrainTranslator {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, action = clap::ArgAction::Set)]
        use_mask: Option<bool>,
        #[arg(long, action = clap::ArgAction::Set)]
        use_reference_keypoints: Option<bool>,
    },
    /// Detect keypoints on every training clip and write pseudo-labels.
    ExtractKeypoints {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train the motion generator on pseudo-labels.
    TrainMotion {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Predict future frames of a single image for an action class.
    Predict {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        action: String,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write keypoints, masks and pre-blend frames.
        #[arg(long)]
        diagnostics: bool,
    },
    /// Score a bundle on the evaluation split of a dataset.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW, e.g. 64x64")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok([p(h)?, p(w)?])
}

/// Exit status classes.
const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::Config(_) => EXIT_USAGE,
        Error::NonFinite { .. } | Error::Numeric(_) => EXIT_NUMERIC,
        Error::Data { .. } | Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) | Error::State(_) => {
            EXIT_DATA
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create_dir(dir: &Path) -> kpvp_core::Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> kpvp_core::Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Appends one JSON line per logged step and reports progress.
struct MetricsLog {
    lines: String,
    every: u64,
}

impl MetricsLog {
    fn new(every: u64) -> Self {
        Self {
            lines: String::new(),
            every,
        }
    }

    fn record<M: serde::Serialize>(&mut self, step: u64, total: u64, m: &M) {
        if step % self.every == 0 || step + 1 == total {
            let line = serde_json::to_string(m).expect("metrics serialize");
            log::info!("step {}/{total} {line}", step + 1);
            self.lines.push_str(&line);
            self.lines.push('\n');
        }
    }
}

/// `[H, W, 1]` mask in `[0, 1]` as a grey frame.
fn mask_frame(mask: &kpvp_core::BackgroundMask) -> kpvp_core::Result<Frame> {
    let v = mask.values();
    let (h, w) = (v.shape()[0], v.shape()[1]);
    let data = v.data().iter().flat_map(|&m| [2.0 * m - 1.0; 3]).collect();
    Frame::new(Tensor::new(vec![h, w, 3], data)?)
}

fn run(command: Command) -> kpvp_core::Result<()> {
    match command {
        Command::Synth {
            kind,
            count,
            length,
            size,
            classes,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                kind,
                count,
                length,
                image_size: size,
                classes,
                seed,
            };
            generate_synthetic_dataset(&spec, &out)?;
            log::info!("wrote {count} {kind} clips to {}", out.display());
        }
        Command::TrainTranslator {
            config,
            data,
            out,
            steps,
            use_mask,
            use_reference_keypoints,
        } => {
            let mut cfg = Config::load(&config)?;
            if let Some(s) = steps {
                cfg.train.translator_steps = s;
            }
            if let Some(m) = use_mask {
                cfg.translator.use_mask = m;
            }
            if let Some(r) = use_reference_keypoints {
                cfg.translator.use_reference_keypoints = r;
            }
            cfg.validate()?;
            let mut spec = DatasetSpec::new(&data, cfg.data.train_split.clone(), cfg.hyper.image_size);
            spec.augment = cfg.augment.clone();
            let dataset = load_dataset(&spec)?;
            log::info!("training stage 1 on {} clips", dataset.clips.len());
            create_dir(&out)?;
            let total = cfg.train.translator_steps;
            let mut log = MetricsLog::new(cfg.train.log_every);
            let bundle = train_translator(&cfg, &dataset, total, |m| log.record(m.step, total, m))?;
            write_text(&out.join(METRICS_FILE), &log.lines)?;
            write_text(&out.join("config.toml"), &bundle.config.to_toml_string())?;
            save_bundle(&bundle, &out.join(BUNDLE_FILE))?;
            log::info!("saved {}", out.join(BUNDLE_FILE).display());
        }
        Command::ExtractKeypoints { ckpt, data, out } => {
            let bundle = load_bundle(&ckpt)?;
            let cfg = &bundle.config;
            let dataset = load_dataset(&DatasetSpec::new(&data, cfg.data.train_split.clone(), cfg.hyper.image_size))?;
            let labels = extract_dataset_labels(&bundle, &dataset)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            labels.save(&out)?;
            log::info!("wrote pseudo-labels for {} clips to {}", labels.records.len(), out.display());
        }
        Command::TrainMotion {
            config,
            labels,
            ckpt,
            out,
            steps,
        } => {
            let mut cfg = Config::load(&config)?;
            if let Some(s) = steps {
                cfg.train.motion_steps = s;
            }
            let bundle = load_bundle(&ckpt)?;
            let labels = PseudoLabels::load(&labels)?;
            create_dir(&out)?;
            let total = cfg.train.motion_steps;
            let mut log = MetricsLog::new(cfg.train.log_every);
            let trained = train_motion(&bundle, &cfg, &labels, total, |m| log.record(m.step, total, m))?;
            write_text(&out.join(METRICS_FILE), &log.lines)?;
            write_text(&out.join("config.toml"), &trained.config.to_toml_string())?;
            save_bundle(&trained, &out.join(BUNDLE_FILE))?;
            log::info!("saved {}", out.join(BUNDLE_FILE).display());
        }
        Command::Predict {
            bundle,
            image,
            action,
            frames,
            seed,
            out,
            diagnostics,
        } => {
            let bundle = load_bundle(&bundle)?;
            let v0 = read_frame(&image)?;
            let [h, w] = bundle.config.hyper.image_size;
            if (v0.height(), v0.width()) != (h, w) {
                return Err(Error::Data {
                    path: image,
                    message: format!("image is {}x{}, the model expects {h}x{w}", v0.height(), v0.width()),
                });
            }
            let a = bundle.action_code(&action)?;
            let pred = predict_video(&v0, &a, frames, &bundle, seed, diagnostics)?;
            create_dir(&out)?;
            for (t, f) in pred.frames.iter().enumerate() {
                write_frame(f, &out.join(frame_file_name(t)))?;
            }
            let mut sheet = vec![v0.clone()];
            sheet.extend(pred.frames.iter().cloned());
            write_contact_sheet(&sheet, &out.join("contact_sheet.png"))?;
            if let Some(d) = &pred.diagnostics {
                for (t, (m, s)) in d.masks.iter().zip(&d.synthesized).enumerate() {
                    write_frame(&mask_frame(m)?, &out.join(format!("mask_{:06}.png", t + 1)))?;
                    write_frame(s, &out.join(format!("synth_{:06}.png", t + 1)))?;
                }
                let doc = serde_json::json!({
                    "initial": pred.initial_keypoints,
                    "keypoints": pred.keypoints,
                    "action": action,
                    "seed": seed,
                });
                write_text(&out.join("keypoints.json"), &serde_json::to_string_pretty(&doc).expect("json"))?;
            }
            log::info!("wrote {frames} frames to {}", out.display());
        }
        Command::Eval { bundle, data, report } => {
            let digest = bundle_file_digest(&bundle)?;
            let bundle = load_bundle(&bundle)?;
            let cfg = &bundle.config;
            let dataset = load_dataset(&DatasetSpec::new(&data, cfg.data.eval_split.clone(), cfg.hyper.image_size))?;
            let r = evaluate_bundle(
                &bundle,
                digest,
                &dataset.clips,
                dataset_digest(&data)?,
                &EvalOptions::default(),
            )?;
            if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            write_text(&report, &r.to_json())?;
            for m in &r.metrics {
                println!("{} {} (n={})", m.metric, m.value, m.samples);
            }
        }
    }
    Ok(())
}
