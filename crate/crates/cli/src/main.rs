//! `qrr` command-line driver.
//!
//! Exit status is 0 on success, 1 for configuration errors and 2 for
//! failures while loading data or training.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qrr::experiment::{self, ExperimentConfig, DATA_DIR_ENV};
use qrr::QrrError;

#[derive(Parser)]
#[command(
    name = "qrr",
    version,
    about = "Federated learning simulator with low-rank quantized gradient uploads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write evaluation metrics as CSV.
    Run(Settings),
    /// Warm up, then write the singular values of one client's first dense-layer gradient.
    Spectrum(Settings),
    /// Print the closed-form payload bits per round and for the whole run.
    Bits(Settings),
    /// Print the effective configuration as key=value lines.
    Config(Settings),
}

/// Every option maps to a configuration key of the same name (dashes
/// become underscores) and overrides the value from `--config`.
#[derive(Args)]
struct Settings {
    /// File of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// sgd, quant or qrr.
    #[arg(long)]
    algorithm: Option<String>,
    /// mlp or cnn.
    #[arg(long)]
    arch: Option<String>,
    /// mnist or synthetic.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the uncompressed MNIST IDX files.
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<String>,
    #[arg(long)]
    clients: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    /// Per-client batch size.
    #[arg(long)]
    batch: Option<String>,
    /// Learning rate, or a schedule such as 0:0.01,1000:0.001.
    #[arg(long)]
    alpha: Option<String>,
    /// Quantization bits (1 to 16).
    #[arg(long)]
    beta: Option<String>,
    /// Rank fraction, or one value per client separated by commas.
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    hooi_sweeps: Option<String>,
    /// sum or mean.
    #[arg(long)]
    aggregation: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    eval_interval: Option<String>,
    /// CSV destination.
    #[arg(long)]
    output: Option<String>,
    /// f64 or f32.
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    synthetic_per_class: Option<String>,
    #[arg(long)]
    synthetic_test_per_class: Option<String>,
    #[arg(long)]
    synthetic_spread: Option<String>,
    #[arg(long)]
    warmup_rounds: Option<String>,
    #[arg(long)]
    spectrum_client: Option<String>,
}

impl Settings {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let fields = [
            ("algorithm", &self.algorithm),
            ("arch", &self.arch),
            ("dataset", &self.dataset),
            ("data_dir", &self.data_dir),
            ("clients", &self.clients),
            ("rounds", &self.rounds),
            ("batch", &self.batch),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("p", &self.p),
            ("hooi_sweeps", &self.hooi_sweeps),
            ("aggregation", &self.aggregation),
            ("seed", &self.seed),
            ("eval_interval", &self.eval_interval),
            ("output", &self.output),
            ("precision", &self.precision),
            ("synthetic_per_class", &self.synthetic_per_class),
            ("synthetic_test_per_class", &self.synthetic_test_per_class),
            ("synthetic_spread", &self.synthetic_spread),
            ("warmup_rounds", &self.warmup_rounds),
            ("spectrum_client", &self.spectrum_client),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.clone().map(|v| (k, v)))
            .collect()
    }

    fn build(&self, default_output: &str) -> Result<ExperimentConfig, String> {
        let mut cfg = ExperimentConfig {
            output: default_output.into(),
            ..ExperimentConfig::default()
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            cfg.apply_text(&text).map_err(|e| e.to_string())?;
        }
        for (key, value) in self.overrides() {
            cfg.set(key, &value).map_err(|e| e.to_string())?;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

enum Failure {
    Config(String),
    Runtime(QrrError),
}

impl From<QrrError> for Failure {
    fn from(e: QrrError) -> Self {
        Failure::Runtime(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    let mut stdout = io::stdout().lock();
    match command {
        Command::Run(s) => {
            let cfg = s.build("metrics.csv").map_err(Failure::Config)?;
            let rows = experiment::run(&cfg)?;
            let last = rows.last().expect("initial evaluation row");
            writeln!(
                stdout,
                "round={} cum_bits={} cum_comms={} train_loss={} test_loss={} test_accuracy={} grad_l2={}",
                last.round,
                last.cum_bits,
                last.cum_comms,
                last.train_loss,
                last.test_loss,
                last.test_accuracy,
                last.grad_l2
            )?;
        }
        Command::Spectrum(s) => {
            let cfg = s.build("spectrum.csv").map_err(Failure::Config)?;
            let sigma = experiment::singular_spectrum(&cfg)?;
            let file =
                fs::File::create(&cfg.output).map_err(|e| QrrError::Io(format!("{}: {e}", cfg.output.display())))?;
            experiment::write_spectrum(&sigma, io::BufWriter::new(file))?;
            writeln!(
                stdout,
                "values={} top10_mass={}",
                sigma.len(),
                experiment::top_k_mass(&sigma, 10)
            )?;
        }
        Command::Bits(s) => {
            let cfg = s.build("metrics.csv").map_err(Failure::Config)?;
            let (per_round, total) = experiment::predicted_bits(&cfg).map_err(|e| Failure::Config(e.to_string()))?;
            writeln!(
                stdout,
                "per_round={per_round} per_client_round={} total={total}",
                per_round / cfg.fl.clients as u64
            )?;
        }
        Command::Config(s) => {
            let cfg = s.build("metrics.csv").map_err(Failure::Config)?;
            write!(stdout, "{}", cfg.to_text())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("qrr: configuration error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("qrr: {e}");
            ExitCode::from(2)
        }
    }
}
