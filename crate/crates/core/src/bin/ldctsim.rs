use std::path::PathBuf;

use clap::{Parser, Subcommand};

use ldctsim::pipeline::{self, RunConfig};
use ldctsim::Result;

#[derive(Parser)]
#[command(
    name = "ldctsim",
    version,
    about = "Virtual CT scanner and multi-dose image synthesis workflow"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// master seed, overriding the config's `seed`
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory, overriding the config section's `out`
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a multi-dose dataset and its manifest
    Simulate,
    /// Train the noise-entangled generator on a dataset
    Train {
        /// dataset manifest to train on
        #[arg(long)]
        manifest: PathBuf,
        /// resume from this checkpoint instead of starting fresh
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Synthesize images from a checkpoint at chosen noise factors
    Generate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// noise factor, repeatable; defaults to the trained grid
        #[arg(long = "k")]
        k: Vec<f64>,
    },
    /// Compare synthesized noise against re-simulated references
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// needed whenever noise factors are evaluated
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// noise factor, repeatable; defaults to the trained grid
        #[arg(long = "k")]
        k: Vec<f64>,
    },
}

fn run(cli: &Cli) -> Result<String> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Simulate => {
            let s = pipeline::cmd_simulate(&cfg, cli.seed, out)?;
            Ok(format!(
                "wrote {} samples x {} dose levels ({} images) under {}\n\
                 noise factors: {:?}\nmanifest: {}",
                s.samples,
                s.levels,
                s.images,
                s.out.display(),
                s.k,
                s.manifest_path.display()
            ))
        }
        Command::Train { manifest, checkpoint } => {
            let s = pipeline::cmd_train(&cfg, manifest, cli.seed, out, checkpoint.as_deref())?;
            let mut text = String::new();
            for w in &s.warnings {
                text.push_str(&format!("warning: {w}\n"));
            }
            if let Some(d) = &s.denoiser {
                text.push_str(&format!("denoiser checkpoint: {}\n", d.display()));
            }
            text.push_str(&format!(
                "trained {} epochs ({} total) with the {} scheme\n",
                s.epochs_run, s.epochs_total, s.scheme
            ));
            if let Some(last) = &s.last {
                text.push_str(&format!(
                    "final losses: d {:.4}, g {:.4}, fidelity {:.4}, reconstruction {:.4}\n",
                    last.d_loss, last.g_loss, last.fid, last.rec
                ));
            }
            text.push_str(&format!(
                "checkpoint: {}\nloss log: {}",
                s.checkpoint.display(),
                s.log_path.display()
            ));
            Ok(text)
        }
        Command::Generate {
            manifest,
            checkpoint,
            k,
        } => {
            let ks = (!k.is_empty()).then_some(k.as_slice());
            let s = pipeline::cmd_generate(&cfg, checkpoint, manifest, out, ks)?;
            let mut text = String::new();
            for w in &s.warnings {
                text.push_str(&format!("warning: {w}\n"));
            }
            text.push_str(&format!(
                "generated {} images ({} inputs x {} factors) under {}\n\
                 throughput: {:.1} images/second ({:.2} s total)",
                s.images,
                s.inputs,
                s.k.len(),
                s.out.display(),
                s.images_per_second,
                s.seconds
            ));
            Ok(text)
        }
        Command::Evaluate {
            manifest,
            checkpoint,
            k,
        } => {
            let ks = (!k.is_empty()).then_some(k.as_slice());
            let s = pipeline::cmd_evaluate(&cfg, manifest, checkpoint.as_deref(), cli.seed, out, ks)?;
            let mut text = String::new();
            for w in &s.warnings {
                text.push_str(&format!("warning: {w}\n"));
            }
            text.push_str(&format!(
                "evaluated {} test samples with {} realizations per dose\n\
                 report: {} ({} rows)\nnps profiles: {}",
                s.test_samples,
                s.realizations,
                s.report_path.display(),
                s.rows,
                s.profiles_path.display()
            ));
            Ok(text)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            std::process::exit(1);
        }
    }
}
