use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::ConfigError;

#[derive(Parser)]
#[command(name = "csi-codec", version, about = "Fixed-rate CSI compression with diffusion decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CodecArg {
    Diffusion,
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic UL/DL dataset.
    GenData {
        /// Channel config (TOML); defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Store only the cropped angular-delay blocks.
        #[arg(long)]
        angular_only: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Train a codec and write checkpoints plus metrics.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out data for periodic validation NMSE.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "diffusion")]
        codec: CodecArg,
        /// Continue a diffusion run from a checkpoint up to the configured n_train.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Encode every sample's input into one codeword file each.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Decode a directory of codeword files into a dataset of reconstructions.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        codewords: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset supplying Y, required when the model uses side information.
        #[arg(long)]
        side: Option<PathBuf>,
        /// Also store the full antenna x subcarrier reconstruction with this many subcarriers.
        #[arg(long)]
        full_subcarriers: Option<usize>,
    },
    /// Report NMSE of a checkpoint (or of decoded reconstructions) on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "recon")]
        ckpt: Option<PathBuf>,
        /// Dataset written by `decode`; NMSE is computed against it instead of running a model.
        #[arg(long, conflicts_with = "ckpt")]
        recon: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        /// Append the result to this rate-distortion CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate every configured rate point; writes rd.csv and rd.svg.
    RdSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

/// Exit status for an error: 2 config, 3 data, 4 numerical.
fn exit_code(err: &anyhow::Error) -> u8 {
    use csi_codec::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => 2,
                E::NonFinite { .. } | E::Tensor(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, split, count, seed, angular_only, sets } => {
            commands::gen_data(config.as_deref(), &sets, &out, &split, count, seed, angular_only)
        }
        Command::Train { config, data, out, val, codec, resume, sets } => {
            commands::train(config.as_deref(), &sets, &data, &out, val.as_deref(), codec, resume.as_deref())
        }
        Command::Encode { ckpt, data, out, limit } => commands::encode(&ckpt, &data, &out, limit),
        Command::Decode { ckpt, codewords, out, side, full_subcarriers } => {
            commands::decode(&ckpt, &codewords, &out, side.as_deref(), full_subcarriers)
        }
        Command::Eval { data, ckpt, recon, limit, csv } => {
            commands::eval(&data, ckpt.as_deref(), recon.as_deref(), limit, csv.as_deref())
        }
        Command::RdSweep { config, out, sets } => commands::rd_sweep(&config, &sets, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
