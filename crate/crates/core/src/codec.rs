//! Client-side encoding and server-side decoding of per-round gradient updates.
//!
//! A client compresses each parameter gradient into its factors, flattens
//! every factor into a block and quantizes the block against the matching
//! entry of its [`CodecLedger`]. The server keeps one ledger per client and
//! applies the same recovery arithmetic, so after every round the two ledgers
//! hold bit-identical values. Factor order inside an entry is fixed:
//! `U, sigma, V` for matrices and `core, F₁, F₂, F₃, F₄` for order-4 tensors.
//!
//! # Wire format (`QRR1`)
//!
//! All integers little-endian.
//!
//! ```text
//! message := "QRR1" round:u32 client:u16 entry_count:u16 entry*
//! entry   := name_len:u16 name:utf8 kind:u8 ndim:u8 dim:u32*ndim
//!            nranks:u8 rank:u32*nranks nblocks:u8 block*
//! block   := beta:u8 n:u32 radius:f32 codes:[u8; ceil(beta*n/8)]
//! ```
//!
//! `kind` is 0 for quantize-only, 1 for SVD, 2 for Tucker. Codes are packed
//! with [`quant::pack`].

use std::collections::BTreeMap;

use crate::decomp::{self, ParamKind, SvdFactors, TuckerFactors};
use crate::error::{QrrError, Result};
use crate::quant::{self, QuantState, QuantizedBlock, MAX_BETA};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 3] = b"QRR";
pub const WIRE_VERSION: u8 = b'1';

/// Whether gradients are factorized before quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompressionMode {
    /// SVD for matrices, Tucker for order-4 tensors, bypass for vectors.
    LowRank,
    /// Every parameter is flattened and quantized as one block.
    QuantizeOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    /// Rank fraction in `(0, 1]`.
    pub p: f64,
    pub beta: u8,
    pub mode: CompressionMode,
    /// HOOI refinement sweeps after the HOSVD start.
    pub hooi_sweeps: usize,
    /// Per-parameter overrides of `p`, keyed by parameter name.
    pub layer_p: BTreeMap<String, f64>,
}

impl CodecConfig {
    pub fn new(p: f64, beta: u8) -> Result<Self> {
        let cfg = Self {
            p,
            beta,
            mode: CompressionMode::LowRank,
            hooi_sweeps: 0,
            layer_p: BTreeMap::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn quantize_only(beta: u8) -> Result<Self> {
        let cfg = Self {
            mode: CompressionMode::QuantizeOnly,
            ..Self::new(1.0, beta)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let check_p = |p: f64| {
            if p > 0.0 && p <= 1.0 {
                Ok(())
            } else {
                Err(QrrError::InvalidArgument(format!("rank fraction {p} outside (0, 1]")))
            }
        };
        check_p(self.p)?;
        for &p in self.layer_p.values() {
            check_p(p)?;
        }
        if self.beta == 0 || self.beta > MAX_BETA {
            return Err(QrrError::InvalidArgument(format!(
                "beta {} outside 1..={MAX_BETA}",
                self.beta
            )));
        }
        Ok(())
    }

    pub fn fraction_for(&self, name: &str) -> f64 {
        self.layer_p.get(name).copied().unwrap_or(self.p)
    }

    pub fn kind_for(&self, shape: &[usize]) -> Result<ParamKind> {
        match self.mode {
            CompressionMode::QuantizeOnly => Ok(ParamKind::Bypass),
            CompressionMode::LowRank => ParamKind::for_shape(shape),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MessageEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    /// `[ν]` for SVD, `[r₁, r₂, r₃, r₄]` for Tucker, empty for bypass.
    pub ranks: Vec<usize>,
    pub blocks: Vec<QuantizedBlock>,
}

impl MessageEntry {
    pub fn payload_bits(&self) -> u64 {
        self.blocks.iter().map(QuantizedBlock::payload_bits).sum()
    }
}

/// One client's upload for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateMessage {
    pub round: u32,
    pub client: u16,
    pub entries: Vec<MessageEntry>,
}

impl UpdateMessage {
    /// `Σ_blocks (32 + β·n)`
    pub fn payload_bits(&self) -> u64 {
        self.entries.iter().map(MessageEntry::payload_bits).sum()
    }

    /// Serialized size in bytes, including headers and padding.
    pub fn wire_bytes(&self) -> usize {
        self.serialize().len()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(WIRE_VERSION);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u16).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(kind_tag(e.kind));
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(e.ranks.len() as u8);
            for &r in &e.ranks {
                out.extend_from_slice(&(r as u32).to_le_bytes());
            }
            out.push(e.blocks.len() as u8);
            for b in &e.blocks {
                out.push(b.beta);
                out.extend_from_slice(&(b.codes.len() as u32).to_le_bytes());
                out.extend_from_slice(&b.radius.to_le_bytes());
                out.extend(quant::pack(&b.codes, b.beta).expect("codes fit their beta"));
            }
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if &magic[..3] != MAGIC {
            return Err(QrrError::Malformed("bad magic".into()));
        }
        if magic[3] != WIRE_VERSION {
            return Err(QrrError::VersionMismatch(magic[3]));
        }
        let round = r.u32()?;
        let client = r.u16()?;
        let count = r.u16()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| QrrError::Malformed("parameter name is not UTF-8".into()))?;
            let kind = kind_from_tag(r.u8()?)?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let nranks = r.u8()? as usize;
            let ranks = (0..nranks)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let nblocks = r.u8()? as usize;
            let mut blocks = Vec::with_capacity(nblocks);
            for _ in 0..nblocks {
                let beta = r.u8()?;
                if beta == 0 || beta > MAX_BETA {
                    return Err(QrrError::Malformed(format!("beta {beta}")));
                }
                let n = r.u32()? as usize;
                let radius = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
                let codes = quant::unpack(r.take(quant::packed_len(beta, n))?, beta, n)?;
                blocks.push(QuantizedBlock { radius, codes, beta });
            }
            entries.push(MessageEntry {
                name,
                kind,
                shape,
                ranks,
                blocks,
            });
        }
        if r.pos != bytes.len() {
            return Err(QrrError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { round, client, entries })
    }
}

fn kind_tag(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Bypass => 0,
        ParamKind::Svd => 1,
        ParamKind::Tucker => 2,
    }
}

fn kind_from_tag(tag: u8) -> Result<ParamKind> {
    match tag {
        0 => Ok(ParamKind::Bypass),
        1 => Ok(ParamKind::Svd),
        2 => Ok(ParamKind::Tucker),
        t => Err(QrrError::Malformed(format!("unknown parameter kind {t}"))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| QrrError::Malformed(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Element count of every block of a parameter, in wire order.
pub fn block_lengths(kind: ParamKind, shape: &[usize], ranks: &[usize]) -> Result<Vec<usize>> {
    let bad = || QrrError::Desync(format!("{kind:?} entry with shape {shape:?} and ranks {ranks:?}"));
    match kind {
        ParamKind::Bypass if ranks.is_empty() && !shape.is_empty() => Ok(vec![shape.iter().product()]),
        ParamKind::Svd => match (shape, ranks) {
            (&[d_out, d_in], &[nu]) if nu >= 1 && nu <= d_out.min(d_in) => Ok(vec![d_out * nu, nu, d_in * nu]),
            _ => Err(bad()),
        },
        ParamKind::Tucker => match (shape, ranks) {
            (&[_, _, _, _], &[_, _, _, _]) if shape.iter().zip(ranks).all(|(&i, &r)| r >= 1 && r <= i) => {
                let mut v = vec![ranks.iter().product()];
                v.extend(shape.iter().zip(ranks).map(|(i, r)| i * r));
                Ok(v)
            }
            _ => Err(bad()),
        },
        _ => Err(bad()),
    }
}

/// Closed-form payload of one parameter: `Σ_blocks (32 + β·n)`.
pub fn entry_payload_bits(kind: ParamKind, shape: &[usize], ranks: &[usize], beta: u8) -> Result<u64> {
    Ok(block_lengths(kind, shape, ranks)?
        .into_iter()
        .map(|n| quant::payload_bits(beta, n))
        .sum())
}

/// Ranks a parameter of `shape` gets under `cfg`.
pub fn ranks_for(cfg: &CodecConfig, name: &str, shape: &[usize]) -> Result<(ParamKind, Vec<usize>)> {
    let kind = cfg.kind_for(shape)?;
    let p = cfg.fraction_for(name);
    let ranks = match (kind, shape) {
        (ParamKind::Svd, &[d_out, d_in]) => vec![decomp::svd_rank_from_fraction(p, d_out, d_in)?],
        (ParamKind::Tucker, &[a, b, c, d]) => decomp::tucker_ranks_from_fraction(p, [a, b, c, d])?.to_vec(),
        _ => vec![],
    };
    Ok((kind, ranks))
}

/// Closed-form payload of a full update for parameters of the given shapes.
pub fn predicted_payload_bits<'a>(
    cfg: &CodecConfig,
    params: impl IntoIterator<Item = (&'a str, &'a [usize])>,
) -> Result<u64> {
    let mut total = 0;
    for (name, shape) in params {
        let (kind, ranks) = ranks_for(cfg, name, shape)?;
        total += entry_payload_bits(kind, shape, &ranks, cfg.beta)?;
    }
    Ok(total)
}

/// Previously quantized factor values per parameter, one state per block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodecLedger<T> {
    states: BTreeMap<String, Vec<QuantState<T>>>,
}

impl<T: Scalar> CodecLedger<T> {
    pub fn new() -> Self {
        Self {
            states: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[QuantState<T>]> {
        self.states.get(name).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Bitwise equality of every stored value.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.states.len() == other.states.len()
            && self
                .states
                .iter()
                .zip(&other.states)
                .all(|((na, a), (nb, b))| na == nb && a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y)))
    }

    /// Current states for `name`, zero-initialized on first use.
    fn states_for(&self, name: &str, lengths: &[usize]) -> Result<Vec<QuantState<T>>> {
        match self.states.get(name) {
            None => Ok(lengths.iter().map(|&n| QuantState::zeros(n)).collect()),
            Some(existing) => {
                let have: Vec<usize> = existing.iter().map(QuantState::len).collect();
                if have != lengths {
                    return Err(QrrError::Desync(format!(
                        "parameter {name}: ledger blocks {have:?}, update blocks {lengths:?}"
                    )));
                }
                Ok(existing.clone())
            }
        }
    }
}

fn flatten_factors<T: Scalar>(
    name: &str,
    grad: &Tensor<T>,
    kind: ParamKind,
    ranks: &[usize],
    cfg: &CodecConfig,
) -> Result<Vec<Vec<T>>> {
    Ok(match kind {
        ParamKind::Bypass => vec![grad.data().to_vec()],
        ParamKind::Svd => {
            let f = decomp::compress_matrix_with_rank(grad, ranks[0])?;
            vec![f.u.into_data(), f.sigma, f.v.into_data()]
        }
        ParamKind::Tucker => {
            let r: [usize; 4] = ranks
                .try_into()
                .map_err(|_| QrrError::Desync(format!("ranks for {name}")))?;
            let f = decomp::compress_tensor4_with_ranks(grad, r, cfg.hooi_sweeps)?;
            let mut v = vec![f.core.into_data()];
            v.extend(f.factors.into_iter().map(Tensor::into_data));
            v
        }
    })
}

/// Compresses, quantizes and ledgers one client's gradients. The ledger is
/// only advanced if every parameter encodes successfully.
pub fn encode_update<T: Scalar>(
    round: u32,
    client: u16,
    grads: &[(String, Tensor<T>)],
    ledger: &mut CodecLedger<T>,
    cfg: &CodecConfig,
) -> Result<UpdateMessage> {
    cfg.validate()?;
    let mut entries = Vec::with_capacity(grads.len());
    let mut staged = Vec::with_capacity(grads.len());
    for (name, grad) in grads {
        let (kind, ranks) = ranks_for(cfg, name, grad.shape())?;
        let lengths = block_lengths(kind, grad.shape(), &ranks)?;
        let prev = ledger.states_for(name, &lengths)?;
        let factors = flatten_factors(name, grad, kind, &ranks, cfg)?;
        let mut blocks = Vec::with_capacity(factors.len());
        let mut next = Vec::with_capacity(factors.len());
        for (values, state) in factors.iter().zip(&prev) {
            let (block, advanced) = quant::quantize(values, state, cfg.beta)?;
            blocks.push(block);
            next.push(advanced);
        }
        entries.push(MessageEntry {
            name: name.clone(),
            kind,
            shape: grad.shape().to_vec(),
            ranks,
            blocks,
        });
        staged.push((name.clone(), next));
    }
    ledger.states.extend(staged);
    Ok(UpdateMessage { round, client, entries })
}

/// Reconstructs a parameter gradient from its recovered factor values.
pub fn reconstruct_entry<T: Scalar>(
    kind: ParamKind,
    shape: &[usize],
    ranks: &[usize],
    values: &[&[T]],
) -> Result<Tensor<T>> {
    match kind {
        ParamKind::Bypass => Tensor::new(shape.to_vec(), values[0].to_vec()),
        ParamKind::Svd => {
            let (d_out, d_in, nu) = (shape[0], shape[1], ranks[0]);
            let f = SvdFactors {
                u: Tensor::matrix(d_out, nu, values[0].to_vec())?,
                sigma: values[1].to_vec(),
                v: Tensor::matrix(d_in, nu, values[2].to_vec())?,
                original_shape: (d_out, d_in),
            };
            decomp::reconstruct_matrix(&f)
        }
        ParamKind::Tucker => {
            let factor = |i: usize| Tensor::matrix(shape[i], ranks[i], values[i + 1].to_vec());
            let f = TuckerFactors {
                core: Tensor::new(ranks.to_vec(), values[0].to_vec())?,
                factors: [factor(0)?, factor(1)?, factor(2)?, factor(3)?],
                original_shape: [shape[0], shape[1], shape[2], shape[3]],
            };
            decomp::reconstruct_tensor4(&f)
        }
    }
}

/// Recovers every factor against the server-side ledger for this client and
/// rebuilds dense gradients in message order. Any inconsistency between the
/// message and the ledger is a protocol violation and leaves the ledger
/// untouched.
pub fn decode_update<T: Scalar>(
    msg: &UpdateMessage,
    ledger: &mut CodecLedger<T>,
    cfg: &CodecConfig,
) -> Result<Vec<(String, Tensor<T>)>> {
    let mut grads = Vec::with_capacity(msg.entries.len());
    let mut staged = Vec::with_capacity(msg.entries.len());
    for e in &msg.entries {
        let lengths = block_lengths(e.kind, &e.shape, &e.ranks)?;
        if e.blocks.len() != lengths.len() {
            return Err(QrrError::Desync(format!(
                "parameter {}: {} blocks, expected {}",
                e.name,
                e.blocks.len(),
                lengths.len()
            )));
        }
        for (b, &n) in e.blocks.iter().zip(&lengths) {
            if b.len() != n {
                return Err(QrrError::Desync(format!(
                    "parameter {}: block of {} codes, expected {n}",
                    e.name,
                    b.len()
                )));
            }
            if b.beta != cfg.beta {
                return Err(QrrError::Desync(format!(
                    "parameter {}: beta {} but codec uses {}",
                    e.name, b.beta, cfg.beta
                )));
            }
        }
        let prev = ledger.states_for(&e.name, &lengths)?;
        let next = prev
            .iter()
            .zip(&e.blocks)
            .map(|(s, b)| quant::recover(s, b))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<&[T]> = next.iter().map(QuantState::values).collect();
        grads.push((e.name.clone(), reconstruct_entry(e.kind, &e.shape, &e.ranks, &views)?));
        staged.push((e.name.clone(), next));
    }
    ledger.states.extend(staged);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn mlp_shapes() -> Vec<(String, Vec<usize>)> {
        vec![
            ("w1".into(), vec![200, 784]),
            ("b1".into(), vec![200]),
            ("w2".into(), vec![10, 200]),
            ("b2".into(), vec![10]),
        ]
    }

    #[test]
    fn large_layer_payload() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grads = vec![("w1".to_string(), random(&[200, 784], &mut rng))];
        let cfg = CodecConfig::new(0.3, 8).unwrap();
        let msg = encode_update(0, 0, &grads, &mut CodecLedger::new(), &cfg).unwrap();
        assert_eq!(msg.entries[0].ranks, vec![60]);
        assert_eq!(msg.payload_bits(), 3 * 32 + 8 * (200 * 60 + 60 + 784 * 60));
        assert_eq!(msg.payload_bits(), 472_896);
    }

    #[test]
    fn mlp_message_payload_matches_closed_form() {
        for (p, expected) in [(0.3, 479_800u64), (0.2, 320_512), (0.1, 161_224)] {
            let cfg = CodecConfig::new(p, 8).unwrap();
            let shapes = mlp_shapes();
            let predicted =
                predicted_payload_bits(&cfg, shapes.iter().map(|(n, s)| (n.as_str(), s.as_slice()))).unwrap();
            assert_eq!(predicted, expected);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let grads: Vec<_> = shapes.iter().map(|(n, s)| (n.clone(), random(s, &mut rng))).collect();
            let msg = encode_update(0, 3, &grads, &mut CodecLedger::new(), &cfg).unwrap();
            assert_eq!(msg.payload_bits(), expected);
        }
    }

    #[test]
    fn zero_gradients_send_zero_radii() {
        let grads: Vec<_> = mlp_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::<f64>::zeros(&s)))
            .collect();
        let cfg = CodecConfig::new(0.3, 8).unwrap();
        let msg = encode_update(0, 0, &grads, &mut CodecLedger::new(), &cfg).unwrap();
        let blocks: Vec<_> = msg.entries.iter().flat_map(|e| &e.blocks).collect();
        assert_eq!(blocks.len(), 3 + 1 + 3 + 1);
        assert!(blocks.iter().all(|b| b.radius == 0.0));
        assert!(blocks.iter().all(|b| b.payload_bits() >= 32));
    }

    #[test]
    fn empty_message() {
        let msg = UpdateMessage {
            round: 0,
            client: 0,
            entries: vec![],
        };
        assert_eq!(msg.payload_bits(), 0);
        assert_eq!(UpdateMessage::deserialize(&msg.serialize()).unwrap(), msg);
    }

    #[test]
    fn ledgers_match_after_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = CodecConfig::new(0.5, 6).unwrap();
        let mut client = CodecLedger::new();
        let mut server = CodecLedger::new();
        for round in 0..5 {
            let grads = vec![
                ("k".to_string(), random(&[6, 3, 3, 3], &mut rng)),
                ("w".to_string(), random(&[8, 12], &mut rng)),
                ("b".to_string(), random(&[8], &mut rng)),
            ];
            let msg = encode_update(round, 1, &grads, &mut client, &cfg).unwrap();
            let wire = msg.serialize();
            decode_update(&UpdateMessage::deserialize(&wire).unwrap(), &mut server, &cfg).unwrap();
            assert!(client.bit_eq(&server));
        }
    }

    #[test]
    fn bias_bypasses_factorization() {
        let cfg = CodecConfig::new(0.3, 8).unwrap();
        let g = Tensor::vector(vec![0.5, -0.25, 1.0]);
        let grads = vec![("b".to_string(), g.clone())];
        let mut client = CodecLedger::new();
        let msg = encode_update(0, 0, &grads, &mut client, &cfg).unwrap();
        assert_eq!(msg.entries[0].kind, ParamKind::Bypass);
        let mut server = CodecLedger::<f64>::new();
        let out = decode_update(&msg, &mut server, &cfg).unwrap();
        let (expected_block, expected_state) = quant::quantize(g.data(), &QuantState::zeros(3), 8).unwrap();
        assert_eq!(msg.entries[0].blocks[0], expected_block);
        assert_eq!(out[0].1.data(), expected_state.values());
    }

    #[test]
    fn full_fidelity_decode_is_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = CodecConfig::new(1.0, 16).unwrap();
        let w = random(&[6, 9], &mut rng);
        let b = random(&[6], &mut rng);
        let grads = vec![("w".to_string(), w.clone()), ("b".to_string(), b.clone())];
        let msg = encode_update(0, 0, &grads, &mut CodecLedger::new(), &cfg).unwrap();
        let out = decode_update(&msg, &mut CodecLedger::new(), &cfg).unwrap();

        let tau = quant::tau::<f64>(16);
        let bias_bound = tau * msg.entries[1].blocks[0].radius as f64 + 1e-12;
        assert!(out[1].1.sub(&b).unwrap().max_norm() <= bias_bound);

        // entrywise bound for U·diag(σ)·Vᵀ under perturbations |δ| ≤ τR per factor
        let f = decomp::compress_matrix(&w, 1.0).unwrap();
        let [eu, es, ev] = [0, 1, 2].map(|i| tau * msg.entries[0].blocks[i].radius as f64);
        let nu = f.rank();
        for i in 0..6 {
            for j in 0..9 {
                let mut bound = 0.0;
                for k in 0..nu {
                    let (u, s, v) = (f.u.get(&[i, k]).abs(), f.sigma[k].abs(), f.v.get(&[j, k]).abs());
                    bound += (u + eu) * (s + es) * (v + ev) - u * s * v;
                }
                let err = (out[0].1.get(&[i, j]) - w.get(&[i, j])).abs();
                assert!(err <= bound + 1e-9, "({i},{j}): {err} > {bound}");
            }
        }
        assert!(out[0].1.sub(&w).unwrap().frobenius_norm() < 1e-3 * w.frobenius_norm());
    }

    #[test]
    fn lockstep_against_independent_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = CodecConfig::new(0.3, 8).unwrap();
        let shapes = mlp_shapes();
        let mut client = CodecLedger::new();
        let mut server = CodecLedger::new();
        // oracle: per-parameter factor states kept by hand
        let mut oracle: Vec<Vec<QuantState<f64>>> = Vec::new();
        for round in 0..50 {
            let grads: Vec<_> = shapes.iter().map(|(n, s)| (n.clone(), random(s, &mut rng))).collect();
            let msg = encode_update(round, 0, &grads, &mut client, &cfg).unwrap();
            let decoded = decode_update(&msg, &mut server, &cfg).unwrap();
            assert!(client.bit_eq(&server));

            for (idx, (name, g)) in grads.iter().enumerate() {
                let factors: Vec<Vec<f64>> = if g.order() == 1 {
                    vec![g.data().to_vec()]
                } else {
                    let f = decomp::compress_matrix(g, 0.3).unwrap();
                    vec![f.u.data().to_vec(), f.sigma.clone(), f.v.data().to_vec()]
                };
                if oracle.len() <= idx {
                    oracle.push(factors.iter().map(|v| QuantState::zeros(v.len())).collect());
                }
                for (state, values) in oracle[idx].iter_mut().zip(&factors) {
                    *state = quant::quantize(values, state, 8).unwrap().1;
                }
                let expected = if g.order() == 1 {
                    Tensor::vector(oracle[idx][0].values().to_vec())
                } else {
                    let (m, n) = (g.rows(), g.cols());
                    let nu = oracle[idx][1].len();
                    decomp::reconstruct_matrix(&SvdFactors {
                        u: Tensor::matrix(m, nu, oracle[idx][0].values().to_vec()).unwrap(),
                        sigma: oracle[idx][1].values().to_vec(),
                        v: Tensor::matrix(n, nu, oracle[idx][2].values().to_vec()).unwrap(),
                        original_shape: (m, n),
                    })
                    .unwrap()
                };
                assert_eq!(decoded[idx].0, *name);
                assert_eq!(decoded[idx].1, expected, "round {round}, parameter {name}");
            }
        }
    }

    #[test]
    fn quantize_only_mode_sends_single_blocks() {
        let cfg = CodecConfig::quantize_only(8).unwrap();
        let shapes = mlp_shapes();
        let predicted = predicted_payload_bits(&cfg, shapes.iter().map(|(n, s)| (n.as_str(), s.as_slice()))).unwrap();
        assert_eq!(predicted, 4 * 32 + 8 * 159_010);
    }

    #[test]
    fn per_layer_fraction_override() {
        let mut cfg = CodecConfig::new(0.3, 8).unwrap();
        cfg.layer_p.insert("w1".into(), 0.1);
        assert_eq!(ranks_for(&cfg, "w1", &[200, 784]).unwrap().1, vec![20]);
        assert_eq!(ranks_for(&cfg, "w2", &[10, 200]).unwrap().1, vec![3]);
        cfg.layer_p.insert("w2".into(), 0.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn desync_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = CodecConfig::new(0.5, 8).unwrap();
        let grads = vec![("w".to_string(), random(&[6, 4], &mut rng))];
        let mut client = CodecLedger::new();
        let msg = encode_update(0, 0, &grads, &mut client, &cfg).unwrap();

        // server ledger built for a different rank
        let mut server = CodecLedger::<f64>::new();
        let other = CodecConfig::new(1.0, 8).unwrap();
        let m2 = encode_update(0, 0, &grads, &mut CodecLedger::new(), &other).unwrap();
        decode_update(&m2, &mut server, &other).unwrap();
        let before = server.clone();
        assert!(matches!(
            decode_update(&msg, &mut server, &cfg),
            Err(QrrError::Desync(_))
        ));
        assert_eq!(server, before);

        let mut bad = msg.clone();
        bad.entries[0].blocks.pop();
        assert!(matches!(
            decode_update(&bad, &mut CodecLedger::<f64>::new(), &cfg),
            Err(QrrError::Desync(_))
        ));
        let mut bad = msg.clone();
        bad.entries[0].ranks = vec![9];
        assert!(matches!(
            decode_update(&bad, &mut CodecLedger::<f64>::new(), &cfg),
            Err(QrrError::Desync(_))
        ));
        let wrong_beta = CodecConfig::new(0.5, 4).unwrap();
        assert!(decode_update(&msg, &mut CodecLedger::<f64>::new(), &wrong_beta).is_err());

        // client ledger shaped for other ranks rejects the update
        assert!(matches!(
            encode_update(1, 0, &grads, &mut client, &other),
            Err(QrrError::Desync(_))
        ));
    }

    #[test]
    fn deserialize_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = CodecConfig::new(0.5, 5).unwrap();
        let grads = vec![("w".to_string(), random(&[4, 4], &mut rng))];
        let wire = encode_update(9, 2, &grads, &mut CodecLedger::new(), &cfg)
            .unwrap()
            .serialize();

        let mut bad = wire.clone();
        bad[0] = b'X';
        assert!(matches!(UpdateMessage::deserialize(&bad), Err(QrrError::Malformed(_))));
        let mut bad = wire.clone();
        bad[3] = b'2';
        assert_eq!(UpdateMessage::deserialize(&bad), Err(QrrError::VersionMismatch(b'2')));
        assert!(UpdateMessage::deserialize(&wire[..wire.len() - 1]).is_err());
        let mut bad = wire.clone();
        bad.push(0);
        assert!(UpdateMessage::deserialize(&bad).is_err());
        assert!(UpdateMessage::deserialize(&[]).is_err());
    }

    #[test]
    fn wire_size_exceeds_payload() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = CodecConfig::new(0.3, 3).unwrap();
        let grads: Vec<_> = mlp_shapes()
            .into_iter()
            .map(|(n, s)| (n, random(&s, &mut rng)))
            .collect();
        let msg = encode_update(0, 0, &grads, &mut CodecLedger::new(), &cfg).unwrap();
        assert!(msg.wire_bytes() as u64 * 8 >= msg.payload_bits());
    }
}
