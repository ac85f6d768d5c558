//! A small neural-network engine: a one-hidden-layer perceptron and a
//! two-convolution network, both trained with mean cross-entropy.
//!
//! Gradients are exact backpropagation. The CNN processes samples one at a
//! time inside fixed-size chunks; chunks may run on several threads but are
//! summed in chunk order, so results do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{QrrError, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CHUNK: usize = 32;
const EVAL_CHUNK: usize = 1000;

/// Network architecture. Images are square with a single channel for the CNN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// `input → hidden (ReLU) → classes`
    Mlp {
        input: usize,
        hidden: usize,
        classes: usize,
    },
    /// conv 3×3 pad 1 → ReLU → conv 3×3 pad 1 → ReLU → maxpool 2×2 → linear
    Cnn {
        side: usize,
        conv1: usize,
        conv2: usize,
        classes: usize,
    },
}

impl Arch {
    /// 784-200-10, 159,010 parameters.
    pub const fn mnist_mlp() -> Self {
        Arch::Mlp {
            input: 784,
            hidden: 200,
            classes: 10,
        }
    }

    /// 16 and 32 channels on 28×28 inputs, 67,530 parameters.
    pub const fn mnist_cnn() -> Self {
        Arch::Cnn {
            side: 28,
            conv1: 16,
            conv2: 32,
            classes: 10,
        }
    }

    pub fn input_len(&self) -> usize {
        match *self {
            Arch::Mlp { input, .. } => input,
            Arch::Cnn { side, .. } => side * side,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Arch::Mlp { classes, .. } | Arch::Cnn { classes, .. } => classes,
        }
    }

    /// Length of the flattened feature vector entering the CNN's linear layer.
    pub fn pooled_features(&self) -> Option<usize> {
        match *self {
            Arch::Mlp { .. } => None,
            Arch::Cnn { side, conv2, .. } => Some(conv2 * (side / 2) * (side / 2)),
        }
    }

    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Arch::Mlp { input, hidden, classes } => vec![
                ("w1", vec![hidden, input]),
                ("b1", vec![hidden]),
                ("w2", vec![classes, hidden]),
                ("b2", vec![classes]),
            ],
            Arch::Cnn {
                conv1, conv2, classes, ..
            } => {
                let f = self.pooled_features().expect("cnn");
                vec![
                    ("k1", vec![conv1, 1, 3, 3]),
                    ("c1", vec![conv1]),
                    ("k2", vec![conv2, conv1, 3, 3]),
                    ("c2", vec![conv2]),
                    ("w_fc", vec![classes, f]),
                    ("b_fc", vec![classes]),
                ]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Arch::Mlp { input, hidden, classes } => input > 0 && hidden > 0 && classes > 1,
            Arch::Cnn {
                side,
                conv1,
                conv2,
                classes,
            } => side >= 2 && side % 2 == 0 && conv1 > 0 && conv2 > 0 && classes > 1,
        };
        if ok {
            Ok(())
        } else {
            Err(QrrError::InvalidArgument(format!("invalid architecture {self:?}")))
        }
    }
}

/// Named parameter (or gradient) tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(QrrError::InvalidArgument(format!("duplicate parameter name {name}")));
            }
        }
        Ok(ModelParams { entries })
    }

    pub fn zeros(arch: &Arch) -> Self {
        let entries = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| (name.to_string(), Tensor::zeros(&shape)))
            .collect();
        ModelParams { entries }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(arch: &Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let receptive: usize = shape[2..].iter().product();
                    let fan_in = shape[1] * receptive;
                    let fan_out = shape[0] * receptive;
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(&shape, |_| T::of(rng.random_range(-limit..limit)))
                };
                (name.to_string(), t)
            })
            .collect();
        ModelParams { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<T>)> {
        self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Same names, order and shapes.
    pub fn is_congruent(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    fn check_congruent(&self, other: &Self) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(QrrError::ShapeMismatch("parameter sets are not congruent".into()))
        }
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_congruent(other)?;
        for ((_, x), (_, y)) in self.entries.iter_mut().zip(&other.entries) {
            x.axpy(alpha, y)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for (_, t) in &mut self.entries {
            t.scale(alpha);
        }
    }

    /// ℓ2 norm over every entry of every tensor.
    pub fn l2_norm(&self) -> T {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    /// `θ ← θ − α · g`, where `g` is the already aggregated gradient.
    pub fn apply_update(&mut self, aggregated: &Self, alpha: T) -> Result<()> {
        self.axpy(-alpha, aggregated)
    }

    /// Entrywise sum of congruent parameter sets, in the given order.
    pub fn sum<'a>(items: impl IntoIterator<Item = &'a Self>) -> Result<Self>
    where
        T: 'a,
    {
        let mut iter = items.into_iter();
        let mut acc = iter
            .next()
            .ok_or_else(|| QrrError::InvalidArgument("cannot sum an empty set of gradients".into()))?
            .clone();
        for g in iter {
            acc.axpy(T::one(), g)?;
        }
        Ok(acc)
    }

    fn check_arch(&self, arch: &Arch) -> Result<()> {
        let shapes = arch.param_shapes();
        let matches = shapes.len() == self.entries.len()
            && shapes
                .iter()
                .zip(&self.entries)
                .all(|((n, s), (name, t))| n == name && s.as_slice() == t.shape());
        if matches {
            Ok(())
        } else {
            Err(QrrError::ShapeMismatch(format!("parameters do not fit {arch:?}")))
        }
    }

    fn data(&self, i: usize) -> &[T] {
        self.entries[i].1.data()
    }
}

/// Inputs are `B × input_len` (or `B × 1 × side × side` for the CNN).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(QrrError::ShapeMismatch(format!(
                "{} input rows but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_inputs<T: Scalar>(inputs: &Tensor<T>, arch: &Arch) -> Result<usize> {
    let b = inputs.shape()[0];
    let per: usize = inputs.shape()[1..].iter().product();
    if inputs.order() < 2 || b == 0 || per != arch.input_len() {
        return Err(QrrError::ShapeMismatch(format!(
            "inputs of shape {:?} do not fit {arch:?}",
            inputs.shape()
        )));
    }
    Ok(b)
}

fn check_labels(labels: &[usize], b: usize, classes: usize) -> Result<()> {
    if labels.len() != b {
        return Err(QrrError::ShapeMismatch(format!(
            "{b} inputs but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(QrrError::InvalidArgument(format!("label {bad} outside 0..{classes}")));
    }
    Ok(())
}

/// Logits, `B × classes`.
pub fn forward<T: Scalar>(params: &ModelParams<T>, inputs: &Tensor<T>, arch: &Arch) -> Result<Tensor<T>> {
    params.check_arch(arch)?;
    let b = check_inputs(inputs, arch)?;
    let k = arch.classes();
    let logits = match *arch {
        Arch::Mlp { .. } => mlp_forward(params, inputs.data(), b, arch).2,
        Arch::Cnn { .. } => {
            let n = arch.input_len();
            let rows: Vec<Vec<T>> = inputs
                .data()
                .par_chunks(n * CHUNK)
                .map(|chunk| {
                    chunk
                        .chunks(n)
                        .flat_map(|x| cnn_forward(params, x, arch).logits)
                        .collect()
                })
                .collect();
            rows.concat()
        }
    };
    Tensor::matrix(b, k, logits)
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    arch: &Arch,
) -> Result<(T, ModelParams<T>)> {
    params.check_arch(arch)?;
    let b = check_inputs(&batch.inputs, arch)?;
    check_labels(&batch.labels, b, arch.classes())?;
    match *arch {
        Arch::Mlp { .. } => Ok(mlp_loss_and_grads(params, batch, b, arch)),
        Arch::Cnn { .. } => Ok(cnn_loss_and_grads(params, batch, b, arch)),
    }
}

/// Mean cross-entropy over the batch, forward pass only.
pub fn loss<T: Scalar>(params: &ModelParams<T>, batch: &Batch<T>, arch: &Arch) -> Result<T> {
    let logits = forward(params, &batch.inputs, arch)?;
    check_labels(&batch.labels, batch.len(), arch.classes())?;
    let k = arch.classes();
    let total: T = logits
        .data()
        .chunks(k)
        .zip(&batch.labels)
        .map(|(z, &y)| cross_entropy(z, y).0)
        .sum();
    Ok(total / T::of(batch.len() as f64))
}

/// Mean loss and accuracy over a whole dataset. Ties in the argmax go to the
/// lowest class index.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, data: &Dataset<T>, arch: &Arch) -> Result<(T, T)> {
    let n = data.len();
    if n == 0 {
        return Err(QrrError::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    check_labels(data.labels(), n, arch.classes())?;
    let dim = data.dim();
    let k = arch.classes();
    let mut loss = T::zero();
    let mut correct = 0usize;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let x = Tensor::matrix(end - start, dim, data.images().data()[start * dim..end * dim].to_vec())?;
        let logits = forward(params, &x, arch)?;
        for (row, &y) in logits.data().chunks(k).zip(&data.labels()[start..end]) {
            let (l, _) = cross_entropy(row, y);
            loss += l;
            if argmax(row) == y {
                correct += 1;
            }
        }
    }
    Ok((loss / T::of(n as f64), T::of(correct as f64 / n as f64)))
}

pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Loss `−log softmax(z)[y]` and the softmax probabilities.
fn cross_entropy<T: Scalar>(z: &[T], y: usize) -> (T, Vec<T>) {
    let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let loss = total.ln() - (z[y] - max);
    (loss, exps.into_iter().map(|e| e / total).collect())
}

fn relu_in_place<T: Scalar>(xs: &mut [T]) {
    for x in xs {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Returns `(pre-activation hidden, hidden, logits)`, all row-major by sample.
fn mlp_forward<T: Scalar>(params: &ModelParams<T>, x: &[T], b: usize, arch: &Arch) -> (Vec<T>, Vec<T>, Vec<T>) {
    let Arch::Mlp { input, hidden, classes } = *arch else {
        unreachable!()
    };
    let (w1, b1, w2, b2) = (params.data(0), params.data(1), params.data(2), params.data(3));
    let mut pre = Vec::with_capacity(b * hidden);
    for _ in 0..b {
        pre.extend_from_slice(b1);
    }
    gemm_nt(b, input, hidden, x, w1, &mut pre);
    let mut h = pre.clone();
    relu_in_place(&mut h);
    let mut z = Vec::with_capacity(b * classes);
    for _ in 0..b {
        z.extend_from_slice(b2);
    }
    gemm_nt(b, hidden, classes, &h, w2, &mut z);
    (pre, h, z)
}

fn mlp_loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    b: usize,
    arch: &Arch,
) -> (T, ModelParams<T>) {
    let Arch::Mlp { input, hidden, classes } = *arch else {
        unreachable!()
    };
    let x = batch.inputs.data();
    let (pre, h, z) = mlp_forward(params, x, b, arch);
    let inv_b = T::one() / T::of(b as f64);

    let mut loss = T::zero();
    let mut dz = vec![T::zero(); b * classes];
    for (i, &y) in batch.labels.iter().enumerate() {
        let (l, probs) = cross_entropy(&z[i * classes..(i + 1) * classes], y);
        loss += l;
        for (j, p) in probs.into_iter().enumerate() {
            let target = if j == y { T::one() } else { T::zero() };
            dz[i * classes + j] = (p - target) * inv_b;
        }
    }

    let mut dw2 = vec![T::zero(); classes * hidden];
    gemm_tn(classes, b, hidden, &dz, &h, &mut dw2);
    let db2 = column_sums(&dz, classes);
    let mut dh = vec![T::zero(); b * hidden];
    gemm_nn(b, classes, hidden, &dz, params.data(2), &mut dh);
    for (d, &p) in dh.iter_mut().zip(&pre) {
        if p <= T::zero() {
            *d = T::zero();
        }
    }
    let mut dw1 = vec![T::zero(); hidden * input];
    gemm_tn(hidden, b, input, &dh, x, &mut dw1);
    let db1 = column_sums(&dh, hidden);

    let grads = ModelParams {
        entries: vec![
            ("w1".into(), Tensor::matrix(hidden, input, dw1).expect("shape")),
            ("b1".into(), Tensor::vector(db1)),
            ("w2".into(), Tensor::matrix(classes, hidden, dw2).expect("shape")),
            ("b2".into(), Tensor::vector(db2)),
        ],
    };
    (loss * inv_b, grads)
}

fn column_sums<T: Scalar>(rows: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for row in rows.chunks(width) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Patch matrix of a `channels × side × side` image for a 3×3 kernel with
/// padding 1: row `c·9 + ky·3 + kx`, column `y·side + x`.
fn im2col<T: Scalar>(img: &[T], channels: usize, side: usize) -> Vec<T> {
    let hw = side * side;
    let mut cols = vec![T::zero(); channels * 9 * hw];
    for c in 0..channels {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..side {
                    let sy = y + ky;
                    if sy == 0 || sy > side {
                        continue;
                    }
                    let src = &plane[(sy - 1) * side..sy * side];
                    let dst = &mut row[y * side..(y + 1) * side];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x + kx;
                        if sx >= 1 && sx <= side {
                            *d = src[sx - 1];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto the image.
fn col2im<T: Scalar>(cols: &[T], channels: usize, side: usize) -> Vec<T> {
    let hw = side * side;
    let mut img = vec![T::zero(); channels * hw];
    for c in 0..channels {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..side {
                    let sy = y + ky;
                    if sy == 0 || sy > side {
                        continue;
                    }
                    for x in 0..side {
                        let sx = x + kx;
                        if sx >= 1 && sx <= side {
                            plane[(sy - 1) * side + sx - 1] += row[y * side + x];
                        }
                    }
                }
            }
        }
    }
    img
}

/// `out = K · im2col(input) + bias`, `out: c_out × side²`
fn conv<T: Scalar>(input: &[T], c_in: usize, side: usize, kernel: &[T], bias: &[T]) -> Vec<T> {
    let hw = side * side;
    let c_out = bias.len();
    let cols = im2col(input, c_in, side);
    let mut out = Vec::with_capacity(c_out * hw);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, hw));
    }
    gemm_nn(c_out, c_in * 9, hw, kernel, &cols, &mut out);
    out
}

struct CnnTrace<T> {
    a1: Vec<T>,
    a2: Vec<T>,
    pooled: Vec<T>,
    argmax: Vec<usize>,
    logits: Vec<T>,
}

fn cnn_forward<T: Scalar>(params: &ModelParams<T>, x: &[T], arch: &Arch) -> CnnTrace<T> {
    let Arch::Cnn {
        side,
        conv1,
        conv2,
        classes,
    } = *arch
    else {
        unreachable!()
    };
    let mut a1 = conv(x, 1, side, params.data(0), params.data(1));
    relu_in_place(&mut a1);
    let mut a2 = conv(&a1, conv1, side, params.data(2), params.data(3));
    relu_in_place(&mut a2);

    let half = side / 2;
    let hw = side * side;
    let f = conv2 * half * half;
    let mut pooled = Vec::with_capacity(f);
    let mut argmax = Vec::with_capacity(f);
    for c in 0..conv2 {
        for py in 0..half {
            for px in 0..half {
                let mut best = c * hw + 2 * py * side + 2 * px;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = c * hw + (2 * py + dy) * side + 2 * px + dx;
                    if a2[idx] > a2[best] {
                        best = idx;
                    }
                }
                pooled.push(a2[best]);
                argmax.push(best);
            }
        }
    }

    let mut logits = params.data(5).to_vec();
    gemm_nt(1, f, classes, &pooled, params.data(4), &mut logits);
    CnnTrace {
        a1,
        a2,
        pooled,
        argmax,
        logits,
    }
}

fn cnn_loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    b: usize,
    arch: &Arch,
) -> (T, ModelParams<T>) {
    let Arch::Cnn {
        side,
        conv1,
        conv2,
        classes,
    } = *arch
    else {
        unreachable!()
    };
    let n = arch.input_len();
    let f = arch.pooled_features().expect("cnn");
    let hw = side * side;
    let inv_b = T::one() / T::of(b as f64);
    let sizes: Vec<usize> = params.entries.iter().map(|(_, t)| t.numel()).collect();

    let partials: Vec<(T, Vec<Vec<T>>)> = batch
        .inputs
        .data()
        .par_chunks(n * CHUNK)
        .zip(batch.labels.par_chunks(CHUNK))
        .map(|(xs, ys)| {
            let mut g: Vec<Vec<T>> = sizes.iter().map(|&s| vec![T::zero(); s]).collect();
            let mut loss = T::zero();
            for (x, &y) in xs.chunks(n).zip(ys) {
                let t = cnn_forward(params, x, arch);
                let (l, probs) = cross_entropy(&t.logits, y);
                loss += l;
                let dz: Vec<T> = probs
                    .into_iter()
                    .enumerate()
                    .map(|(j, p)| (p - if j == y { T::one() } else { T::zero() }) * inv_b)
                    .collect();

                gemm_tn(classes, 1, f, &dz, &t.pooled, &mut g[4]);
                for (o, &d) in g[5].iter_mut().zip(&dz) {
                    *o += d;
                }
                let mut dpooled = vec![T::zero(); f];
                gemm_nn(1, classes, f, &dz, params.data(4), &mut dpooled);

                let mut da2 = vec![T::zero(); conv2 * hw];
                for (&idx, &d) in t.argmax.iter().zip(&dpooled) {
                    if t.a2[idx] > T::zero() {
                        da2[idx] += d;
                    }
                }
                let cols2 = im2col(&t.a1, conv1, side);
                gemm_nt(conv2, hw, conv1 * 9, &da2, &cols2, &mut g[2]);
                for (o, row) in g[3].iter_mut().zip(da2.chunks(hw)) {
                    *o += row.iter().copied().sum::<T>();
                }
                let mut dcols2 = vec![T::zero(); conv1 * 9 * hw];
                gemm_tn(conv1 * 9, conv2, hw, params.data(2), &da2, &mut dcols2);
                let mut da1 = col2im(&dcols2, conv1, side);
                for (d, &a) in da1.iter_mut().zip(&t.a1) {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                }
                let cols1 = im2col(x, 1, side);
                gemm_nt(conv1, hw, 9, &da1, &cols1, &mut g[0]);
                for (o, row) in g[1].iter_mut().zip(da1.chunks(hw)) {
                    *o += row.iter().copied().sum::<T>();
                }
            }
            (loss, g)
        })
        .collect();

    let mut loss = T::zero();
    let mut acc: Vec<Vec<T>> = sizes.iter().map(|&s| vec![T::zero(); s]).collect();
    for (l, g) in partials {
        loss += l;
        for (a, part) in acc.iter_mut().zip(g) {
            for (x, y) in a.iter_mut().zip(part) {
                *x += y;
            }
        }
    }
    let entries = params
        .entries
        .iter()
        .zip(acc)
        .map(|((name, t), data)| (name.clone(), Tensor::new(t.shape().to_vec(), data).expect("shape")))
        .collect();
    (loss * inv_b, ModelParams { entries })
}
