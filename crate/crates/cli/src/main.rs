//! Command-line front end for the try-on engine.
//!
//! Exit codes: 0 on success, 1 when training aborts on a non-finite loss,
//! 2 for usage, configuration, IO, or data errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tryon_core::config::TrainConfig;
use tryon_core::error::Error;
use tryon_core::pipeline;

/// Scalar type used for all training and inference.
type El = f32;

#[derive(Parser)]
#[command(
    name = "tryon",
    version,
    about = "Desk-scale virtual try-on: synthetic wardrobe data, three-stage training, \
             warping, synthesis, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (`key = value` lines, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set batch=2`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired wardrobe dataset.
    SynthData {
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of samples (defaults to the configured count).
        #[arg(long)]
        count: Option<usize>,
        /// Replace an existing non-empty directory.
        #[arg(long)]
        force: bool,
    },

    /// Compute clothing-agnostic images and parses for a dataset.
    Preprocess {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Recompute even if the dataset was already preprocessed.
        #[arg(long)]
        force: bool,
    },

    /// Train the segmentation, warp, and synthesis stages.
    Train {
        /// Dataset directory (must be preprocessed).
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints, traces, and the manifest.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },

    /// Run try-on inference over the held-out split.
    Infer {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Directory holding a trained checkpoint set.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Directory for the rendered outputs.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Replace outputs and waive checkpoint cross-checks.
        #[arg(long)]
        force: bool,
    },

    /// Score the held-out split and write a metrics report.
    /// Metric computation honours the ALIAS_SYNTH_THREADS environment
    /// variable as a thread cap.
    Eval {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Directory holding a trained checkpoint set.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Directory for the report.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Swap garments between people instead of scoring against the
        /// paired photos; the report then carries only reference-free
        /// quantities.
        #[arg(long)]
        unpaired: bool,
        /// Seed for the deterministic garment swap.
        #[arg(long, default_value_t = 17)]
        eval_seed: u64,
        /// Replace outputs and waive checkpoint cross-checks.
        #[arg(long)]
        force: bool,
    },

    /// Verify every analytic gradient against finite differences.
    Gradcheck {
        /// Directory for the audit table.
        #[arg(long)]
        out: PathBuf,
        /// First audit seed.
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Number of consecutive seeds to audit.
        #[arg(long, default_value_t = 5)]
        rounds: u64,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },

    /// Compare region-wise against channel-wise conditional normalization
    /// over several training seeds.
    Ablate {
        /// Dataset directory (must be preprocessed).
        #[arg(long)]
        data: PathBuf,
        /// Directory for the comparison table.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of training seeds, starting at the configured seed.
        #[arg(long, default_value_t = 3)]
        rounds: u64,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::SynthData { out, cfg, count, force } => {
            let cfg = cfg.resolve()?;
            let count = count.unwrap_or(cfg.samples);
            let ds = pipeline::cmd_synth_data(&out, count, cfg.seed, cfg.h, cfg.w, force)?;
            println!(
                "wrote {} samples ({} train / {} held out) at {}x{} to {}",
                count,
                ds.train.len(),
                ds.test.len(),
                cfg.h,
                cfg.w,
                out.display()
            );
        }
        Cmd::Preprocess { data, cfg, force } => {
            let cfg = cfg.resolve()?;
            pipeline::cmd_preprocess(&data, &cfg, force)?;
            println!(
                "computed clothing-agnostic artifacts (padding {}px) in {}",
                cfg.padding_px,
                data.display()
            );
        }
        Cmd::Train { data, out, cfg, force } => {
            let cfg = cfg.resolve()?;
            let outcome = pipeline::cmd_train::<El>(&data, &cfg, &out, force)?;
            let seg_end = outcome.seg_trace.rows.len();
            let gmm_end = outcome.gmm_trace.rows.len();
            let alias_end = outcome.alias_trace.rows.len();
            println!(
                "trained {} / {} / {} iterations; final smoothed ce {:.4}, warp l1 {:.4}, \
                 recon l1 {:.4}",
                seg_end,
                gmm_end,
                alias_end,
                outcome.seg_trace.smoothed("ce", seg_end, 50),
                outcome.gmm_trace.smoothed("warp_l1", gmm_end, 50),
                outcome.alias_trace.smoothed("recon_l1", alias_end, 50),
            );
            println!("checkpoint set {} in {}", outcome.set.combined_id(), out.display());
        }
        Cmd::Infer { data, checkpoints, out, cfg, force } => {
            let cfg = cfg.resolve()?;
            let ids = pipeline::cmd_infer::<El>(&data, &checkpoints, &cfg, &out, force)?;
            println!("rendered {} try-on results to {}", ids.len(), out.display());
        }
        Cmd::Eval { data, checkpoints, out, cfg, unpaired, eval_seed, force } => {
            let cfg = cfg.resolve()?;
            let report =
                pipeline::cmd_eval::<El>(&data, &checkpoints, &cfg, &out, !unpaired, eval_seed, force)?;
            println!("{}", serde_json::to_string_pretty(&report.summary_json()).unwrap());
            println!("report written to {}", out.display());
        }
        Cmd::Gradcheck { out, seed, rounds, force } => {
            let seeds: Vec<u64> = (seed..seed + rounds.max(1)).collect();
            let rows = pipeline::cmd_gradcheck(&out, &seeds, force)?;
            print!("{}", tryon_core::audit::report_table(&rows));
            if !tryon_core::audit::all_pass(&rows) {
                return Err(Error::InvalidArgument(
                    "derivative audit failed; see the table above".into(),
                ));
            }
            println!("all {} gradient paths verified over {} seeds", rows.len(), seeds.len());
        }
        Cmd::Ablate { data, out, cfg, rounds, force } => {
            let cfg = cfg.resolve()?;
            let seeds: Vec<u64> = (cfg.seed..cfg.seed + rounds.max(1)).collect();
            let outcome = pipeline::cmd_ablate::<El>(&data, &cfg, &out, &seeds, force)?;
            print!("{}", outcome.csv());
            println!(
                "region-wise better on {}/{} seeds{}",
                outcome.wins,
                outcome.seeds,
                if outcome.sweep() { " (sweep)" } else { "" }
            );
        }
    }
    Ok(())
}

/// 1 signals a numerical failure inside training; everything else that
/// errors is a usage, configuration, IO, or data problem.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_failures_map_to_exit_one_everything_else_to_two() {
        let non_finite = Error::NonFinite {
            stage: "seg".into(),
            term: "ce".into(),
            iteration: 3,
        };
        assert_eq!(exit_code(&non_finite), 1);
        assert_eq!(exit_code(&Error::InvalidArgument("bad flag".into())), 2);
        assert_eq!(exit_code(&Error::Dataset("missing file".into())), 2);
    }

    #[test]
    fn cli_parses_every_verb() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
