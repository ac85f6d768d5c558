//! Round-based federated training with three upload schemes: raw gradients
//! (`Sgd`), quantization only (`Quant`), and low-rank factors followed by
//! quantization (`Qrr`).
//!
//! A round broadcasts the parameters, lets every client draw a batch and
//! compute its mean gradient, moves each upload through the wire format,
//! and applies one descent step with the aggregate. Clients may run on
//! several threads; the server always consumes their messages in client-id
//! order.

use rayon::prelude::*;

use crate::codec::{self, CodecConfig, CodecLedger, UpdateMessage};
use crate::data::{partition, ClientShard, Dataset};
use crate::error::{QrrError, Result};
use crate::nn::{self, Arch, ModelParams};
use crate::scalar::Scalar;

/// Bits per uncompressed parameter.
pub const FLOAT_BITS: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Sgd,
    Quant,
    Qrr,
}

impl Algorithm {
    pub fn compresses(self) -> bool {
        self != Algorithm::Sgd
    }
}

impl std::str::FromStr for Algorithm {
    type Err = QrrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Algorithm::Sgd),
            "quant" => Ok(Algorithm::Quant),
            "qrr" => Ok(Algorithm::Qrr),
            other => Err(QrrError::InvalidArgument(format!("unknown algorithm {other:?}"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Sgd => "sgd",
            Algorithm::Quant => "quant",
            Algorithm::Qrr => "qrr",
        })
    }
}

/// How client gradients are combined before the step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

/// Piecewise-constant learning rate: `(first iteration, rate)` pairs, with
/// iterations counted from 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    steps: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(steps: Vec<(usize, f64)>) -> Result<Self> {
        if steps.first().map(|s| s.0) != Some(0) {
            return Err(QrrError::InvalidArgument(
                "learning-rate schedule must start at iteration 0".into(),
            ));
        }
        if steps.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(QrrError::InvalidArgument("schedule iterations must increase".into()));
        }
        if let Some(&(_, bad)) = steps.iter().find(|s| !(s.1.is_finite() && s.1 >= 0.0)) {
            return Err(QrrError::InvalidArgument(format!(
                "learning rate {bad} must be finite and non-negative"
            )));
        }
        Ok(LrSchedule { steps })
    }

    pub fn constant(rate: f64) -> Result<Self> {
        Self::new(vec![(0, rate)])
    }

    pub fn steps(&self) -> &[(usize, f64)] {
        &self.steps
    }

    pub fn rate_at(&self, iteration: usize) -> f64 {
        self.steps
            .iter()
            .take_while(|s| s.0 <= iteration)
            .last()
            .expect("starts at 0")
            .1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlConfig {
    pub algorithm: Algorithm,
    pub arch: Arch,
    pub clients: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub beta: u8,
    /// One shared rank fraction, or one per client.
    pub p: Vec<f64>,
    pub hooi_sweeps: usize,
    pub aggregation: Aggregation,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for FlConfig {
    fn default() -> Self {
        FlConfig {
            algorithm: Algorithm::Qrr,
            arch: Arch::mnist_mlp(),
            clients: 10,
            rounds: 1000,
            batch_size: 512,
            schedule: LrSchedule::constant(0.001).expect("valid"),
            beta: 8,
            p: vec![0.3],
            hooi_sweeps: 0,
            aggregation: Aggregation::Sum,
            eval_interval: 10,
            seed: 0,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |msg: String| Err(QrrError::InvalidArgument(msg));
        if self.clients == 0 || self.clients > u16::MAX as usize {
            return bad(format!("client count {} outside 1..={}", self.clients, u16::MAX));
        }
        if self.rounds > u32::MAX as usize {
            return bad(format!("too many rounds ({})", self.rounds));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return bad("evaluation interval must be at least 1".into());
        }
        if self.p.len() != 1 && self.p.len() != self.clients {
            return bad(format!(
                "{} rank fractions given for {} clients",
                self.p.len(),
                self.clients
            ));
        }
        for c in 0..self.clients {
            self.codec_for(c)?;
        }
        Ok(())
    }

    pub fn p_for(&self, client: usize) -> f64 {
        if self.p.len() == 1 {
            self.p[0]
        } else {
            self.p[client]
        }
    }

    /// Codec settings for one client; `None` for uncompressed uploads.
    pub fn codec_for(&self, client: usize) -> Result<Option<CodecConfig>> {
        match self.algorithm {
            Algorithm::Sgd => Ok(None),
            Algorithm::Quant => CodecConfig::quantize_only(self.beta).map(Some),
            Algorithm::Qrr => {
                let mut cfg = CodecConfig::new(self.p_for(client), self.beta)?;
                cfg.hooi_sweeps = self.hooi_sweeps;
                Ok(Some(cfg))
            }
        }
    }

    /// Closed-form payload bits uploaded by all clients in one round.
    pub fn predicted_round_bits(&self) -> Result<u64> {
        let shapes = self.arch.param_shapes();
        let mut total = 0;
        for c in 0..self.clients {
            total += match self.codec_for(c)? {
                None => FLOAT_BITS * self.arch.param_count() as u64,
                Some(cfg) => codec::predicted_payload_bits(&cfg, shapes.iter().map(|(n, s)| (*n, s.as_slice())))?,
            };
        }
        Ok(total)
    }
}

/// One evaluation point. Training loss and gradient norm describe the round
/// just finished and are NaN before the first round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub grad_l2: f64,
    pub cum_bits: u64,
    pub cum_comms: u64,
}

/// What a client sends in one round.
#[derive(Clone, Debug)]
pub enum Upload<T> {
    Raw(ModelParams<T>),
    Encoded(Vec<u8>),
}

pub struct ServerState<T> {
    pub params: ModelParams<T>,
    pub round: usize,
    /// One ledger per client; empty for uncompressed uploads.
    pub ledgers: Vec<CodecLedger<T>>,
    pub codecs: Vec<Option<CodecConfig>>,
    pub cum_bits: u64,
    pub cum_comms: u64,
}

pub struct ClientRuntime<T> {
    pub id: usize,
    pub shard: ClientShard,
    pub ledger: CodecLedger<T>,
    pub codec: Option<CodecConfig>,
}

impl<T: Scalar> ClientRuntime<T> {
    /// Draws a batch, computes the mean gradient and prepares the upload.
    pub fn compute_upload(
        &mut self,
        params: &ModelParams<T>,
        data: &Dataset<T>,
        arch: &Arch,
        batch_size: usize,
        round: usize,
    ) -> Result<(T, Upload<T>)> {
        let batch = self.shard.next_batch(data, batch_size)?;
        let (loss, grads) = nn::loss_and_grads(params, &batch, arch)?;
        let upload = match &self.codec {
            None => Upload::Raw(grads),
            Some(cfg) => {
                let msg = codec::encode_update(round as u32, self.id as u16, grads.entries(), &mut self.ledger, cfg)?;
                Upload::Encoded(msg.serialize())
            }
        };
        Ok((loss, upload))
    }
}

/// Server and clients for one experiment.
pub struct Simulation<T> {
    pub config: FlConfig,
    pub server: ServerState<T>,
    pub clients: Vec<ClientRuntime<T>>,
}

impl<T: Scalar> Simulation<T> {
    /// Glorot-initialized parameters and a seeded IID split of `train_len`
    /// samples.
    pub fn new(config: FlConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::glorot(&config.arch, config.seed);
        Self::with_params(config, train_len, params)
    }

    pub fn with_params(config: FlConfig, train_len: usize, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        if !params.is_congruent(&ModelParams::zeros(&config.arch)) {
            return Err(QrrError::ShapeMismatch(
                "initial parameters do not fit the architecture".into(),
            ));
        }
        let shards = partition(train_len, config.clients, config.seed.wrapping_add(1))?;
        let codecs = (0..config.clients)
            .map(|c| config.codec_for(c))
            .collect::<Result<Vec<_>>>()?;
        let clients = shards
            .into_iter()
            .zip(&codecs)
            .enumerate()
            .map(|(id, (shard, codec))| ClientRuntime {
                id,
                shard,
                ledger: CodecLedger::new(),
                codec: codec.clone(),
            })
            .collect();
        let ledgers = if config.algorithm.compresses() {
            (0..config.clients).map(|_| CodecLedger::new()).collect()
        } else {
            Vec::new()
        };
        Ok(Simulation {
            server: ServerState {
                params,
                round: 0,
                ledgers,
                codecs,
                cum_bits: 0,
                cum_comms: 0,
            },
            clients,
            config,
        })
    }

    /// Runs one round and returns its metrics with the test columns set to NaN.
    pub fn run_round(&mut self, data: &Dataset<T>) -> Result<RoundMetrics> {
        let alpha = self.config.schedule.rate_at(self.server.round);
        run_round(&mut self.server, &mut self.clients, data, &self.config, T::of(alpha))
    }

    pub fn evaluate(&self, test: &Dataset<T>) -> Result<(f64, f64)> {
        let (loss, acc) = nn::evaluate(&self.server.params, test, &self.config.arch)?;
        Ok((loss.as_f64(), acc.as_f64()))
    }
}

/// Broadcast, local gradients, upload, aggregate, step.
pub fn run_round<T: Scalar>(
    server: &mut ServerState<T>,
    clients: &mut [ClientRuntime<T>],
    data: &Dataset<T>,
    config: &FlConfig,
    alpha: T,
) -> Result<RoundMetrics> {
    if clients.len() != config.clients {
        return Err(QrrError::InvalidArgument(format!(
            "{} clients for a {}-client run",
            clients.len(),
            config.clients
        )));
    }
    let round = server.round + 1;
    let params = &server.params;
    let uploads: Vec<(T, Upload<T>)> = clients
        .par_iter_mut()
        .map(|c| c.compute_upload(params, data, &config.arch, config.batch_size, round))
        .collect::<Result<_>>()?;

    let mut total: Option<ModelParams<T>> = None;
    let mut loss_sum = T::zero();
    let mut bits = 0u64;
    for (c, (loss, upload)) in uploads.into_iter().enumerate() {
        loss_sum += loss;
        let grads = match upload {
            Upload::Raw(g) => {
                bits += FLOAT_BITS * g.param_count() as u64;
                g
            }
            Upload::Encoded(bytes) => {
                let msg = UpdateMessage::deserialize(&bytes)?;
                if msg.client as usize != c || msg.round as usize != round {
                    return Err(QrrError::Desync(format!(
                        "expected round {round} from client {c}, got round {} from client {}",
                        msg.round, msg.client
                    )));
                }
                let cfg = server.codecs[c].as_ref().expect("compressed uploads have a codec");
                let decoded = codec::decode_update(&msg, &mut server.ledgers[c], cfg)?;
                bits += msg.payload_bits();
                ModelParams::new(decoded)?
            }
        };
        match &mut total {
            None => total = Some(grads),
            Some(acc) => acc.axpy(T::one(), &grads)?,
        }
    }
    let mut total = total.expect("at least one client");
    if config.aggregation == Aggregation::Mean {
        total.scale(T::one() / T::of(clients.len() as f64));
    }
    server.params.apply_update(&total, alpha)?;
    if !server.params.is_finite() {
        return Err(QrrError::NonFinite);
    }
    server.round = round;
    server.cum_bits += bits;
    server.cum_comms += clients.len() as u64;
    Ok(RoundMetrics {
        round,
        train_loss: loss_sum.as_f64() / clients.len() as f64,
        test_loss: f64::NAN,
        test_accuracy: f64::NAN,
        grad_l2: total.l2_norm().as_f64(),
        cum_bits: server.cum_bits,
        cum_comms: server.cum_comms,
    })
}

/// Full run: an initial evaluation, then one row every `eval_interval`
/// rounds and after the last round.
pub fn train<T: Scalar>(config: &FlConfig, train: &Dataset<T>, test: &Dataset<T>) -> Result<Vec<RoundMetrics>> {
    let mut rows = Vec::new();
    train_with(config, train, test, |m| rows.push(*m))?;
    Ok(rows)
}

/// Like [`train`], handing each evaluation row to `on_row` as it is produced.
pub fn train_with<T: Scalar>(
    config: &FlConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
    mut on_row: impl FnMut(&RoundMetrics),
) -> Result<ModelParams<T>> {
    let mut sim = Simulation::new(config.clone(), train.len())?;
    let (test_loss, test_accuracy) = sim.evaluate(test)?;
    on_row(&RoundMetrics {
        round: 0,
        train_loss: f64::NAN,
        test_loss,
        test_accuracy,
        grad_l2: f64::NAN,
        cum_bits: 0,
        cum_comms: 0,
    });
    for k in 1..=config.rounds {
        let mut m = sim.run_round(train)?;
        if k % config.eval_interval == 0 || k == config.rounds {
            (m.test_loss, m.test_accuracy) = sim.evaluate(test)?;
            on_row(&m);
        }
    }
    Ok(sim.server.params)
}
