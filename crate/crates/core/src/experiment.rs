//! Experiment configuration, runs with CSV output, and the gradient spectrum
//! diagnostic.
//!
//! Configuration is a flat list of `key=value` settings. A file holds one
//! setting per line; blank lines and lines starting with `#` are skipped.
//! Later settings override earlier ones, so command-line flags applied after
//! a file take precedence. Unknown keys are rejected.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `algorithm` | `qrr` | `sgd`, `quant` or `qrr` |
//! | `arch` | `mlp` | `mlp` (784-200-10) or `cnn` |
//! | `dataset` | `mnist` | `mnist` or `synthetic` |
//! | `data_dir` | `$QRR_DATA_DIR`, else `data/mnist` | directory with the four IDX files |
//! | `clients` | `10` | |
//! | `rounds` | `1000` | |
//! | `batch` | `512` | per-client batch size |
//! | `alpha` | `0.001` | a rate, or a schedule `0:0.01,1000:0.001` |
//! | `beta` | `8` | quantization bits, 1 to 16 |
//! | `p` | `0.3` | rank fraction, or one per client separated by commas |
//! | `hooi_sweeps` | `0` | Tucker refinement sweeps |
//! | `aggregation` | `sum` | `sum` or `mean` of client gradients |
//! | `seed` | `0` | |
//! | `eval_interval` | `10` | rounds between test evaluations |
//! | `output` | `metrics.csv` | CSV destination |
//! | `precision` | `f64` | `f64` or `f32` arithmetic |
//! | `synthetic_per_class` | `600` | training samples per class for `synthetic` |
//! | `synthetic_test_per_class` | `100` | test samples per class for `synthetic` |
//! | `synthetic_spread` | `1.0` | cluster noise for `synthetic` |
//! | `warmup_rounds` | `50` | rounds before the spectrum is taken |
//! | `spectrum_client` | `0` | client whose gradient is decomposed |

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{load_mnist, synthetic_blobs, Dataset};
use crate::error::{QrrError, Result};
use crate::fl::{self, Aggregation, FlConfig, LrSchedule, RoundMetrics, Simulation};
use crate::linalg;
use crate::nn::{self, Arch};
use crate::scalar::Scalar;

/// Environment variable naming the default MNIST directory.
pub const DATA_DIR_ENV: &str = "QRR_DATA_DIR";

pub const CSV_HEADER: [&str; 7] = [
    "round",
    "cum_bits",
    "cum_comms",
    "train_loss",
    "test_loss",
    "test_accuracy",
    "grad_l2",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub fl: FlConfig,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub output: PathBuf,
    pub precision: Precision,
    pub synthetic_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_spread: f64,
    pub warmup_rounds: usize,
    pub spectrum_client: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data_dir = std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| "data/mnist".into());
        ExperimentConfig {
            fl: FlConfig::default(),
            dataset: DatasetKind::Mnist,
            data_dir,
            output: "metrics.csv".into(),
            precision: Precision::F64,
            synthetic_per_class: 600,
            synthetic_test_per_class: 100,
            synthetic_spread: 1.0,
            warmup_rounds: 50,
            spectrum_client: 0,
        }
    }
}

fn invalid(key: &str, value: &str, why: impl std::fmt::Display) -> QrrError {
    QrrError::InvalidArgument(format!("{key}={value}: {why}"))
}

fn number<N: std::str::FromStr>(key: &str, value: &str) -> Result<N>
where
    N::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| invalid(key, value, e))
}

/// `0.001` or `0:0.01,1000:0.001`
pub fn parse_schedule(value: &str) -> Result<LrSchedule> {
    if !value.contains(':') {
        return LrSchedule::constant(number("alpha", value)?);
    }
    let steps = value
        .split(',')
        .map(|part| {
            let (start, rate) = part
                .split_once(':')
                .ok_or_else(|| invalid("alpha", value, "expected start:rate"))?;
            Ok((number("alpha", start)?, number("alpha", rate)?))
        })
        .collect::<Result<Vec<_>>>()?;
    LrSchedule::new(steps)
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "algorithm" => self.fl.algorithm = v.parse()?,
            "arch" => {
                self.fl.arch = match v {
                    "mlp" => Arch::mnist_mlp(),
                    "cnn" => Arch::mnist_cnn(),
                    _ => return Err(invalid(key, v, "expected mlp or cnn")),
                }
            }
            "dataset" => {
                self.dataset = match v {
                    "mnist" => DatasetKind::Mnist,
                    "synthetic" => DatasetKind::Synthetic,
                    _ => return Err(invalid(key, v, "expected mnist or synthetic")),
                }
            }
            "data_dir" => self.data_dir = v.into(),
            "clients" => self.fl.clients = number(key, v)?,
            "rounds" => self.fl.rounds = number(key, v)?,
            "batch" => self.fl.batch_size = number(key, v)?,
            "alpha" => self.fl.schedule = parse_schedule(v)?,
            "beta" => self.fl.beta = number(key, v)?,
            "p" => self.fl.p = v.split(',').map(|x| number(key, x)).collect::<Result<_>>()?,
            "hooi_sweeps" => self.fl.hooi_sweeps = number(key, v)?,
            "aggregation" => {
                self.fl.aggregation = match v {
                    "sum" => Aggregation::Sum,
                    "mean" => Aggregation::Mean,
                    _ => return Err(invalid(key, v, "expected sum or mean")),
                }
            }
            "seed" => self.fl.seed = number(key, v)?,
            "eval_interval" => self.fl.eval_interval = number(key, v)?,
            "output" => self.output = v.into(),
            "precision" => {
                self.precision = match v {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => return Err(invalid(key, v, "expected f64 or f32")),
                }
            }
            "synthetic_per_class" => self.synthetic_per_class = number(key, v)?,
            "synthetic_test_per_class" => self.synthetic_test_per_class = number(key, v)?,
            "synthetic_spread" => self.synthetic_spread = number(key, v)?,
            "warmup_rounds" => self.warmup_rounds = number(key, v)?,
            "spectrum_client" => self.spectrum_client = number(key, v)?,
            _ => return Err(QrrError::InvalidArgument(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                QrrError::InvalidArgument(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then `overrides`, then validation.
    pub fn build<'a>(file: Option<&str>, overrides: impl IntoIterator<Item = (&'a str, String)>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(text) = file {
            cfg.apply_text(text)?;
        }
        for (key, value) in overrides {
            cfg.set(key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.fl.validate()?;
        if self.dataset == DatasetKind::Synthetic {
            if self.synthetic_per_class == 0 || self.synthetic_test_per_class == 0 {
                return Err(QrrError::InvalidArgument(
                    "synthetic sample counts must be positive".into(),
                ));
            }
            if !(self.synthetic_spread.is_finite() && self.synthetic_spread >= 0.0) {
                return Err(QrrError::InvalidArgument(
                    "synthetic_spread must be finite and non-negative".into(),
                ));
            }
            if self.synthetic_per_class * self.fl.arch.classes() < self.fl.clients {
                return Err(QrrError::InvalidArgument("fewer synthetic samples than clients".into()));
            }
        }
        if self.spectrum_client >= self.fl.clients {
            return Err(QrrError::InvalidArgument(format!(
                "spectrum_client {} outside 0..{}",
                self.spectrum_client, self.fl.clients
            )));
        }
        Ok(())
    }

    /// Every setting as `key=value` lines, readable by [`apply_text`](Self::apply_text).
    pub fn to_text(&self) -> String {
        let fl = &self.fl;
        let arch = if matches!(fl.arch, Arch::Mlp { .. }) {
            "mlp"
        } else {
            "cnn"
        };
        let alpha = fl
            .schedule
            .steps()
            .iter()
            .map(|(s, r)| format!("{s}:{r}"))
            .collect::<Vec<_>>()
            .join(",");
        let p = fl.p.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let lines = [
            format!("algorithm={}", fl.algorithm),
            format!("arch={arch}"),
            format!(
                "dataset={}",
                if self.dataset == DatasetKind::Mnist {
                    "mnist"
                } else {
                    "synthetic"
                }
            ),
            format!("data_dir={}", self.data_dir.display()),
            format!("clients={}", fl.clients),
            format!("rounds={}", fl.rounds),
            format!("batch={}", fl.batch_size),
            format!("alpha={alpha}"),
            format!("beta={}", fl.beta),
            format!("p={p}"),
            format!("hooi_sweeps={}", fl.hooi_sweeps),
            format!(
                "aggregation={}",
                if fl.aggregation == Aggregation::Sum {
                    "sum"
                } else {
                    "mean"
                }
            ),
            format!("seed={}", fl.seed),
            format!("eval_interval={}", fl.eval_interval),
            format!("output={}", self.output.display()),
            format!(
                "precision={}",
                if self.precision == Precision::F64 { "f64" } else { "f32" }
            ),
            format!("synthetic_per_class={}", self.synthetic_per_class),
            format!("synthetic_test_per_class={}", self.synthetic_test_per_class),
            format!("synthetic_spread={}", self.synthetic_spread),
            format!("warmup_rounds={}", self.warmup_rounds),
            format!("spectrum_client={}", self.spectrum_client),
        ];
        lines.join("\n") + "\n"
    }

    /// Training and test sets for this configuration.
    pub fn load_data<T: Scalar>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        match self.dataset {
            DatasetKind::Mnist => load_mnist(&self.data_dir).map_err(|e| match e {
                QrrError::Io(msg) => QrrError::Io(format!(
                    "{msg} (MNIST IDX files are read from data_dir or ${DATA_DIR_ENV})"
                )),
                other => other,
            }),
            DatasetKind::Synthetic => {
                let classes = self.fl.arch.classes();
                let per = self.synthetic_per_class + self.synthetic_test_per_class;
                let all = synthetic_blobs(
                    classes,
                    per,
                    self.fl.arch.input_len(),
                    self.synthetic_spread,
                    self.fl.seed,
                )?;
                all.split_at(self.synthetic_per_class * classes)
            }
        }
    }
}

pub fn write_csv_header<W: Write>(w: &mut csv::Writer<W>) -> Result<()> {
    w.write_record(CSV_HEADER)?;
    Ok(())
}

pub fn write_csv_row<W: Write>(w: &mut csv::Writer<W>, m: &RoundMetrics) -> Result<()> {
    w.write_record([
        m.round.to_string(),
        m.cum_bits.to_string(),
        m.cum_comms.to_string(),
        m.train_loss.to_string(),
        m.test_loss.to_string(),
        m.test_accuracy.to_string(),
        m.grad_l2.to_string(),
    ])?;
    Ok(())
}

/// Reads a metrics CSV back.
pub fn read_csv(path: &Path) -> Result<Vec<RoundMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(CSV_HEADER) {
        return Err(QrrError::Malformed(format!(
            "{}: unexpected CSV header",
            path.display()
        )));
    }
    let field = |rec: &csv::StringRecord, i: usize| -> Result<f64> {
        rec[i]
            .parse()
            .map_err(|_| QrrError::Malformed(format!("bad number {:?}", &rec[i])))
    };
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(RoundMetrics {
                round: field(&rec, 0)? as usize,
                cum_bits: rec[1]
                    .parse()
                    .map_err(|_| QrrError::Malformed(format!("bad bit count {:?}", &rec[1])))?,
                cum_comms: field(&rec, 2)? as u64,
                train_loss: field(&rec, 3)?,
                test_loss: field(&rec, 4)?,
                test_accuracy: field(&rec, 5)?,
                grad_l2: field(&rec, 6)?,
            })
        })
        .collect()
}

/// Trains with `cfg`, streaming one CSV row per evaluation point to `out`.
pub fn run_to_writer<W: Write>(cfg: &ExperimentConfig, out: W) -> Result<Vec<RoundMetrics>> {
    match cfg.precision {
        Precision::F64 => run_generic::<f64, W>(cfg, out),
        Precision::F32 => run_generic::<f32, W>(cfg, out),
    }
}

fn run_generic<T: Scalar, W: Write>(cfg: &ExperimentConfig, out: W) -> Result<Vec<RoundMetrics>> {
    let (train, test) = cfg.load_data::<T>()?;
    let mut w = csv::Writer::from_writer(out);
    write_csv_header(&mut w)?;
    let mut rows = Vec::new();
    let mut failure = None;
    fl::train_with(&cfg.fl, &train, &test, |m| {
        rows.push(*m);
        if failure.is_none() {
            failure = write_csv_row(&mut w, m)
                .and_then(|_| w.flush().map_err(QrrError::from))
                .err();
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    w.flush()?;
    Ok(rows)
}

/// Trains with `cfg` and writes the CSV to `cfg.output`.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RoundMetrics>> {
    let file =
        std::fs::File::create(&cfg.output).map_err(|e| QrrError::Io(format!("{}: {e}", cfg.output.display())))?;
    run_to_writer(cfg, std::io::BufWriter::new(file))
}

/// Closed-form payload bits per round and over the configured number of rounds.
pub fn predicted_bits(cfg: &ExperimentConfig) -> Result<(u64, u64)> {
    let per_round = cfg.fl.predicted_round_bits()?;
    Ok((per_round, per_round * cfg.fl.rounds as u64))
}

/// Name of the fully connected layer whose gradient spectrum is reported.
pub fn spectrum_layer(arch: &Arch) -> &'static str {
    match arch {
        Arch::Mlp { .. } => "w1",
        Arch::Cnn { .. } => "w_fc",
    }
}

/// Trains for `warmup_rounds`, then returns the singular values (descending)
/// of one client's gradient for the first fully connected layer.
pub fn singular_spectrum(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    match cfg.precision {
        Precision::F64 => spectrum_generic::<f64>(cfg),
        Precision::F32 => spectrum_generic::<f32>(cfg),
    }
}

fn spectrum_generic<T: Scalar>(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let (train, _) = cfg.load_data::<T>()?;
    let mut sim = Simulation::<T>::new(cfg.fl.clone(), train.len())?;
    for _ in 0..cfg.warmup_rounds {
        sim.run_round(&train)?;
    }
    let client = &mut sim.clients[cfg.spectrum_client];
    let batch = client.shard.next_batch(&train, cfg.fl.batch_size)?;
    let (_, grads) = nn::loss_and_grads(&sim.server.params, &batch, &cfg.fl.arch)?;
    let layer = grads.get(spectrum_layer(&cfg.fl.arch)).expect("layer exists");
    Ok(linalg::svd(layer)?.sigma.into_iter().map(Scalar::as_f64).collect())
}

/// Writes `index,sigma` rows.
pub fn write_spectrum<W: Write>(sigma: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "sigma"])?;
    for (i, s) in sigma.iter().enumerate() {
        w.write_record([i.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Fraction of `Σσ` held by the `k` largest values.
pub fn top_k_mass(sigma: &[f64], k: usize) -> f64 {
    let total: f64 = sigma.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    sigma.iter().take(k).sum::<f64>() / total
}
