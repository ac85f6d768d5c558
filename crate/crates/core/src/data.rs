//! Datasets, IDX ingestion, client partitioning and batch iteration.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{QrrError, Result};
use crate::nn::Batch;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Row-major `N × dim` samples with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if images.order() != 2 {
            return Err(QrrError::ShapeMismatch(format!(
                "images must be N×dim, got {:?}",
                images.shape()
            )));
        }
        if images.rows() != labels.len() {
            return Err(QrrError::ShapeMismatch(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    /// Parses a pair of IDX files.
    pub fn from_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Self> {
        let images = load_idx_images(image_bytes)?;
        let labels = load_idx_labels(label_bytes)?;
        if images.rows() != labels.len() {
            return Err(QrrError::Idx(format!(
                "image file holds {} items, label file {}",
                images.rows(),
                labels.len()
            )));
        }
        Dataset::new(images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        let dim = self.dim();
        let mut x = Vec::with_capacity(indices.len() * dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(QrrError::InvalidArgument(format!(
                    "sample {i} outside dataset of {}",
                    self.len()
                )));
            }
            x.extend_from_slice(&self.images.data()[i * dim..(i + 1) * dim]);
            y.push(self.labels[i]);
        }
        Batch::new(Tensor::matrix(indices.len(), dim, x)?, y)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let b = self.batch(indices)?;
        Dataset::new(b.inputs, b.labels)
    }

    /// First `at` samples and the rest.
    pub fn split_at(&self, at: usize) -> Result<(Self, Self)> {
        if at == 0 || at >= self.len() {
            return Err(QrrError::InvalidArgument(format!(
                "split point {at} outside 1..{}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..at).collect();
        let tail: Vec<usize> = (at..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| QrrError::Idx("truncated header".into()))
}

/// IDX image file → `N × (rows·cols)` with pixels scaled to `[0, 1]`.
pub fn load_idx_images<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(QrrError::Idx(format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    if n == 0 || dim == 0 {
        return Err(QrrError::Idx(format!("empty image file ({n} items of {rows}×{cols})")));
    }
    let payload = &bytes[16..];
    if payload.len() != n * dim {
        return Err(QrrError::Idx(format!(
            "image payload has {} bytes, header promises {}",
            payload.len(),
            n * dim
        )));
    }
    let scale = T::of(1.0 / 255.0);
    let data = payload.iter().map(|&p| T::of(p as f64) * scale).collect();
    Tensor::matrix(n, dim, data)
}

pub fn load_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(QrrError::Idx(format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(QrrError::Idx(format!(
            "label payload has {} bytes, header promises {n}",
            payload.len()
        )));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Reads the four uncompressed MNIST files from `dir`, returning `(train, test)`.
pub fn load_mnist<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read(&path).map_err(|e| QrrError::Io(format!("{}: {e}", path.display())))
    };
    let train = Dataset::from_idx(&read(MNIST_TRAIN_IMAGES)?, &read(MNIST_TRAIN_LABELS)?)?;
    let test = Dataset::from_idx(&read(MNIST_TEST_IMAGES)?, &read(MNIST_TEST_LABELS)?)?;
    Ok((train, test))
}

/// Gaussian clusters: class centers are standard normal vectors, samples add
/// noise with standard deviation `spread`. Labels cycle `0, 1, …, classes−1`.
pub fn synthetic_blobs<T: Scalar>(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(QrrError::InvalidArgument(
            "blobs need at least one class, sample and feature".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..classes * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = classes * per_class;
    let mut x = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &mu in &centers[c * dim..(c + 1) * dim] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            x.push(T::of(mu + spread * noise));
        }
        y.push(c);
    }
    Dataset::new(Tensor::matrix(n, dim, x)?, y)
}

/// One client's slice of the training set and its batch cursor.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    client: usize,
    indices: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl ClientShard {
    pub fn client(&self) -> usize {
        self.client
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next batch of at most `batch_size` samples. A batch never spans two
    /// epochs; when the shard is exhausted it is reshuffled first.
    pub fn next_batch<T: Scalar>(&mut self, data: &Dataset<T>, batch_size: usize) -> Result<Batch<T>> {
        if batch_size == 0 {
            return Err(QrrError::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.cursor == self.order.len() {
            self.epoch += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(self.epoch);
            self.order.shuffle(&mut rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let batch = data.batch(&self.order[self.cursor..end])?;
        self.cursor = end;
        Ok(batch)
    }
}

/// Splits `0..n` into `clients` shards of a seeded permutation; sizes differ
/// by at most one.
pub fn partition(n: usize, clients: usize, seed: u64) -> Result<Vec<ClientShard>> {
    if clients == 0 || clients > n {
        return Err(QrrError::InvalidArgument(format!(
            "cannot split {n} samples across {clients} clients"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / clients, n % clients);
    let mut start = 0;
    let shards = (0..clients)
        .map(|c| {
            let len = base + usize::from(c < extra);
            let indices = perm[start..start + len].to_vec();
            start += len;
            ClientShard {
                client: c,
                order: indices.clone(),
                indices,
                cursor: 0,
                epoch: 0,
                seed: seed ^ (c as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            }
        })
        .collect();
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{loss_and_grads, Arch, ModelParams};
    use proptest::prelude::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn tiny_image_file() {
        let t: Tensor<f64> = load_idx_images(&idx_images(1, 2, 2, &[0, 255, 128, 64])).unwrap();
        assert_eq!(t.shape(), &[1, 4]);
        assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn tiny_label_file() {
        assert_eq!(load_idx_labels(&idx_labels(&[0, 5, 9])).unwrap(), vec![0, 5, 9]);
    }

    #[test]
    fn malformed_idx_is_rejected() {
        let mut bad = idx_images(1, 2, 2, &[1, 2, 3, 4]);
        bad[3] = 0x01;
        assert!(matches!(load_idx_images::<f64>(&bad), Err(QrrError::Idx(_))));
        assert!(load_idx_images::<f64>(&idx_images(2, 2, 2, &[1, 2, 3, 4])).is_err());
        assert!(load_idx_images::<f64>(&[0, 0, 8]).is_err());
        assert!(load_idx_labels(&idx_images(1, 1, 1, &[0])).is_err());
        let mut short = idx_labels(&[1, 2, 3]);
        short.pop();
        assert!(load_idx_labels(&short).is_err());
        let images = idx_images(2, 1, 1, &[0, 1]);
        assert!(matches!(
            Dataset::<f64>::from_idx(&images, &idx_labels(&[3])),
            Err(QrrError::Idx(_))
        ));
    }

    #[test]
    fn ingestion_is_deterministic() {
        let images = idx_images(3, 2, 1, &[9, 8, 7, 6, 5, 4]);
        let labels = idx_labels(&[1, 2, 3]);
        let a = Dataset::<f64>::from_idx(&images, &labels).unwrap();
        assert_eq!(a, Dataset::from_idx(&images, &labels).unwrap());
        assert_eq!(a.dim(), 2);
    }

    #[test]
    fn one_index_per_client() {
        let shards = partition(10, 10, 3).unwrap();
        let mut all: Vec<usize> = shards.iter().flat_map(|s| s.indices().to_vec()).collect();
        assert!(shards.iter().all(|s| s.len() == 1));
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn mnist_sized_partition() {
        let shards = partition(60_000, 10, 0).unwrap();
        assert!(shards.iter().all(|s| s.len() == 6000));
    }

    #[test]
    fn partition_errors() {
        assert!(partition(3, 4, 0).is_err());
        assert!(partition(3, 0, 0).is_err());
    }

    #[test]
    fn seeds_control_the_permutation() {
        let a = partition(100, 7, 1).unwrap();
        assert_eq!(a, partition(100, 7, 1).unwrap());
        assert_ne!(a, partition(100, 7, 2).unwrap());
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_and_covering(n in 1usize..300, c in 1usize..20, seed in any::<u64>()) {
            prop_assume!(c <= n);
            let shards = partition(n, c, seed).unwrap();
            let mut seen = vec![false; n];
            for s in &shards {
                prop_assert!(s.len() == n / c || s.len() == n / c + 1);
                for &i in s.indices() {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
            prop_assert!(seen.iter().all(|&x| x));
        }
    }

    fn counting_dataset(n: usize) -> Dataset<f64> {
        Dataset::new(Tensor::from_fn(&[n, 1], |i| i as f64), vec![0; n]).unwrap()
    }

    #[test]
    fn batches_stop_at_the_epoch_boundary() {
        let data = counting_dataset(6);
        let mut shard = partition(6, 1, 9).unwrap().remove(0);
        let first = shard.next_batch(&data, 4).unwrap();
        let second = shard.next_batch(&data, 4).unwrap();
        assert_eq!((first.len(), second.len()), (4, 2));
        assert_eq!(shard.epoch(), 0);
        let mut seen: Vec<f64> = first
            .inputs
            .data()
            .iter()
            .chain(second.inputs.data())
            .copied()
            .collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let third = shard.next_batch(&data, 4).unwrap();
        assert_eq!(third.len(), 4);
        assert_eq!(shard.epoch(), 1);
    }

    #[test]
    fn oversized_batch_returns_the_whole_shard() {
        let data = counting_dataset(5);
        let mut shard = partition(5, 1, 2).unwrap().remove(0);
        for _ in 0..3 {
            assert_eq!(shard.next_batch(&data, 50).unwrap().len(), 5);
        }
        assert!(shard.next_batch(&data, 0).is_err());
    }

    #[test]
    fn draws_cover_the_shard_evenly() {
        let data = counting_dataset(70);
        let mut shard = partition(70, 2, 4).unwrap().remove(0);
        let mut counts = [0usize; 70];
        for _ in 0..1000 {
            for &x in shard.next_batch(&data, 8).unwrap().inputs.data() {
                counts[x as usize] += 1;
            }
        }
        let epochs = shard.epoch() as usize;
        for &i in shard.indices() {
            assert!(
                counts[i] == epochs || counts[i] == epochs + 1,
                "index {i} drawn {} times",
                counts[i]
            );
        }
        assert!(counts
            .iter()
            .enumerate()
            .all(|(i, &c)| c == 0 || shard.indices().contains(&i)));
    }

    #[test]
    fn blobs_basics() {
        let a: Dataset<f64> = synthetic_blobs(3, 1, 5, 0.1, 7).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a.labels(), &[0, 1, 2]);
        assert_eq!(a, synthetic_blobs(3, 1, 5, 0.1, 7).unwrap());
    }

    #[test]
    fn separated_blobs_are_learnable() {
        let data: Dataset<f64> = synthetic_blobs(2, 100, 10, 0.1, 5).unwrap();
        let arch = Arch::Mlp {
            input: 10,
            hidden: 8,
            classes: 2,
        };
        let mut params = ModelParams::glorot(&arch, 1);
        let mut shard = partition(data.len(), 1, 0).unwrap().remove(0);
        for _ in 0..100 {
            let batch = shard.next_batch(&data, 32).unwrap();
            let (_, g) = loss_and_grads(&params, &batch, &arch).unwrap();
            params.apply_update(&g, 0.1).unwrap();
        }
        let (_, acc) = crate::nn::evaluate(&params, &data, &arch).unwrap();
        assert!(acc > 0.95, "accuracy {acc}");
    }
}
