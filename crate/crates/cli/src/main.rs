mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvaluateArgs, KeywordArgs, SanitizeArgs};
use prompt_dp::eval::DatasetFormat;

/// Private prompt sanitization and evaluation.
#[derive(Debug, Parser)]
#[command(name = "prompt-dp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Derive clip bounds [mean, mean + 4 std] from a file of logits, one per line.
    Calibrate {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sanitize one prompt and print the full result as JSON.
    Sanitize {
        #[arg(long)]
        config: PathBuf,
        /// Prompt text, or @path to read it from a file.
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the privacy budget table to stderr.
        #[arg(long)]
        report: bool,
    },
    /// Run the question-answering experiment and write a CSV report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: DatasetFormat,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated: group-ndp, group-dp, single-paraphrase, identity.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',', conflicts_with = "schedule")]
        temperatures: Option<Vec<f64>>,
        /// Mixed-temperature group as lo:hi:step, one rewrite per temperature.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Evaluate a seeded random subset of this many records.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, requires = "sample")]
        sample_seed: Option<u64>,
    },
    /// Release the top-K keywords of a file of rewrites, one per line.
    Keywords {
        #[arg(long)]
        input: PathBuf,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        /// Release privately with this epsilon instead of deterministically.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print rouge1, rougeL and bleu between two texts (or @files).
    Score {
        #[arg(long)]
        reference: String,
        #[arg(long)]
        hypothesis: String,
    },
}

fn parse_format(s: &str) -> Result<DatasetFormat, String> {
    s.parse()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    let result = match cli.command {
        Command::Calibrate { samples, out } => commands::calibrate(&samples, &out),
        Command::Sanitize {
            config,
            prompt,
            seed,
            report,
        } => commands::sanitize(
            SanitizeArgs {
                config,
                prompt,
                seed,
                report,
            },
            &mut stdout,
        ),
        Command::Evaluate {
            config,
            dataset,
            format,
            out,
            methods,
            temperatures,
            schedule,
            repeats,
            sample,
            sample_seed,
        } => commands::evaluate(EvaluateArgs {
            config,
            dataset,
            format,
            out,
            methods,
            temperatures,
            schedule,
            repeats,
            sample,
            sample_seed,
        }),
        Command::Keywords { input, k, epsilon, seed } => {
            commands::keywords(KeywordArgs { input, k, epsilon, seed }, &mut stdout)
        }
        Command::Score { reference, hypothesis } => commands::score(&reference, &hypothesis, &mut stdout),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
