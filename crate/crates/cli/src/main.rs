//! Command line driver for the pixveil pipeline. All numeric work runs in
//! f32. Exit codes: 0 success, 2 configuration, 3 file/ingestion,
//! 4 serialization, 5 training divergence, 6 transport, 7 protocol,
//! 8 domain.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pixveil::config::ExperimentConfig;
use pixveil::data::{synthetic, DatasetId};
use pixveil::error::{Error, Result};
use pixveil::pipeline;

#[derive(Parser)]
#[command(
    name = "pixveil",
    about = "Train and evaluate learnable image protection with a co-trained classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the transform/classifier pair from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Protect image files with a trained transform checkpoint.
    Protect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Input images (lossless rasters).
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Train and evaluate the inverse-network attack against a transform.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Transform checkpoint, or the literal `identity` for the
        /// attack-sanity control.
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy and distortion evaluation of trained checkpoints.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Classifier checkpoint.
        #[arg(long)]
        classifier: PathBuf,
        /// Transform checkpoint; omit to evaluate on plain images.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a classifier checkpoint over TCP.
    Serve {
        #[arg(long)]
        classifier: PathBuf,
        /// Bind address, e.g. 127.0.0.1:7878.
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
    },
    /// Protect one image locally and submit it to a running service.
    Submit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        server: String,
        image: PathBuf,
        #[arg(long, default_value_t = 3)]
        retries: usize,
    },
    /// Generate a synthetic CIFAR-layout archive for offline runs.
    SynthData {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "cifar10")]
        dataset: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply_overrides(seed, out);
            let artifacts = pipeline::cmd_train::<f32>(&cfg)?;
            for art in &artifacts {
                println!(
                    "alpha {}: best epoch {} (val loss {:.6})",
                    art.alpha, art.best_epoch, art.best_val_total
                );
                println!("  transform:  {}", art.best_transform.display());
                println!("  classifier: {}", art.best_classifier.display());
                println!("  metrics:    {}", art.metrics_csv.display());
            }
        }
        Command::Protect { checkpoint, out, images } => {
            let artifacts = pipeline::cmd_protect::<f32>(&checkpoint, &images, &out)?;
            for path in &artifacts.outputs {
                println!("{}", path.display());
            }
            println!("grid: {}", artifacts.grid.display());
        }
        Command::Attack { config, checkpoint, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply_overrides(seed, None);
            let out_dir = out.unwrap_or_else(|| cfg.run.out_dir.join("attack"));
            let transform = match checkpoint.as_str() {
                "identity" => None,
                path => Some(PathBuf::from(path)),
            };
            let artifacts =
                pipeline::cmd_attack::<f32>(transform.as_deref(), &cfg, &out_dir)?;
            println!("inverse checkpoint: {}", artifacts.inverse_ckpt.display());
            println!("report: {}", artifacts.report_path.display());
            if let Some(stats) = &artifacts.report.box_stats {
                println!(
                    "psnr quartiles: q1 {:.2} dB, median {:.2} dB, q3 {:.2} dB (n {})",
                    stats.q1, stats.median, stats.q3, stats.n
                );
            }
        }
        Command::Eval { config, classifier, checkpoint, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out_dir = out.unwrap_or_else(|| cfg.run.out_dir.join("eval"));
            let artifacts =
                pipeline::cmd_eval::<f32>(checkpoint.as_deref(), &classifier, &cfg, &out_dir)?;
            println!("accuracy: {:.2}%", artifacts.accuracy_percent);
            println!("report: {}", artifacts.report_path.display());
        }
        Command::Serve { classifier, bind } => {
            let handle = pipeline::cmd_serve::<f32>(&classifier, &bind)?;
            println!("serving classifier on {}", handle.local_addr);
            // run until killed
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
        Command::Submit { checkpoint, server, image, retries } => {
            let response = pipeline::cmd_submit::<f32>(&checkpoint, &image, &server, retries)?;
            println!("label: {}", response.label);
            let probs: Vec<String> = response
                .probabilities
                .iter()
                .map(|p| format!("{p:.6}"))
                .collect();
            println!("probabilities: [{}]", probs.join(", "));
            println!("model: {}", response.model_digest);
        }
        Command::SynthData { root, dataset, seed } => {
            let id: DatasetId = dataset.parse()?;
            std::fs::create_dir_all(&root).map_err(Error::from)?;
            let dir = synthetic::write_archive(id, &root, seed)?;
            println!("wrote synthetic {} archive to {}", id.name(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
