//! Datasets, synthetic generation, non-IID partitioning, Poisson sampling and
//! IDX ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(records: Vec<Record>, classes: usize) -> Result<Self> {
        if let Some(first) = records.first() {
            let d_in = first.features.len();
            for r in &records {
                if r.features.len() != d_in {
                    return Err(Error::DimensionMismatch { expected: d_in, actual: r.features.len() });
                }
                if r.label >= classes {
                    return Err(Error::InvalidArgument(format!(
                        "label {} out of range for {} classes",
                        r.label, classes
                    )));
                }
            }
        }
        Ok(Self { records, classes })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.features.len())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Number of distinct labels present.
    pub fn label_support(&self) -> usize {
        self.class_counts().iter().filter(|&&c| c > 0).count()
    }

    /// Copy with every label mapped to `classes - 1 - label`.
    pub fn label_flipped(&self) -> Dataset {
        Dataset {
            records: self
                .records
                .iter()
                .map(|r| Record { features: r.features.clone(), label: self.classes - 1 - r.label })
                .collect(),
            classes: self.classes,
        }
    }
}

/// Gaussian class clusters with unit within-class variance.
///
/// Centers are fixed at construction so that train and test splits drawn from
/// different streams share the same task.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    centers: Vec<Vec<f64>>,
    classes: usize,
}

impl SyntheticTask {
    /// Pairwise center distance equals `class_separation` when `classes <= d_in`
    /// (scaled axis vectors); otherwise centers lie on random directions with
    /// norm `class_separation / sqrt(2)`.
    pub fn new(stream: &RngStream, d_in: usize, classes: usize, class_separation: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
        }
        if d_in == 0 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        if !(class_separation > 0.0) {
            return Err(Error::InvalidArgument("class_separation must be positive".into()));
        }
        let radius = class_separation / std::f64::consts::SQRT_2;
        let mut rng = stream.rng();
        let centers = (0..classes)
            .map(|c| {
                let mut center = vec![0.0; d_in];
                if classes <= d_in {
                    center[c] = radius;
                } else {
                    fill_standard_normal(&mut rng, &mut center);
                    let norm = center.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    center.iter_mut().for_each(|x| *x *= radius / norm);
                }
                center
            })
            .collect();
        Ok(Self { centers, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.centers[0].len()
    }

    /// Draws `n_records` records. Labels are balanced (`i mod L` before
    /// shuffling); a `label_noise` fraction of records beyond the first `L`
    /// has its label replaced by a uniformly chosen *different* class, so
    /// every class keeps at least one record and `label_noise = 1 - 1/L`
    /// makes labels independent of features. Features always come from the
    /// clean class.
    pub fn sample(&self, stream: &RngStream, n_records: usize, label_noise: f64) -> Result<Dataset> {
        if n_records < self.classes {
            return Err(Error::InvalidArgument(format!(
                "n_records {} smaller than class count {}",
                n_records, self.classes
            )));
        }
        if !(0.0..1.0).contains(&label_noise) {
            return Err(Error::InvalidArgument(format!("label_noise {label_noise} not in [0,1)")));
        }
        let d_in = self.feature_dim();
        let mut rng = stream.rng();
        let mut records = Vec::with_capacity(n_records);
        for i in 0..n_records {
            let clean = i % self.classes;
            let mut features = vec![0.0; d_in];
            fill_standard_normal(&mut rng, &mut features);
            features.iter_mut().zip(&self.centers[clean]).for_each(|(x, m)| *x += m);
            let label = if i >= self.classes && rng.random::<f64>() < label_noise {
                (clean + rng.random_range(1..self.classes)) % self.classes
            } else {
                clean
            };
            records.push(Record { features, label });
        }
        records.shuffle(&mut rng);
        Ok(Dataset { records, classes: self.classes })
    }
}

/// Synthetic Gaussian-cluster dataset; centers and records come from children
/// of `stream`.
pub fn gen_synthetic(
    stream: &RngStream,
    n_records: usize,
    d_in: usize,
    classes: usize,
    class_separation: f64,
    label_noise: f64,
) -> Result<Dataset> {
    SyntheticTask::new(&stream.derive("centers"), d_in, classes, class_separation)?
        .sample(&stream.derive("records"), n_records, label_noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum PartitionSpec {
    Shards { n_clients: usize, shards_per_client: usize },
    Dirichlet { n_clients: usize, alpha: f64 },
    Uniform { n_clients: usize },
}

impl PartitionSpec {
    pub fn n_clients(&self) -> usize {
        match *self {
            PartitionSpec::Shards { n_clients, .. }
            | PartitionSpec::Dirichlet { n_clients, .. }
            | PartitionSpec::Uniform { n_clients } => n_clients,
        }
    }

    pub fn partition_indices(&self, d: &Dataset, stream: &RngStream) -> Result<Vec<Vec<usize>>> {
        match *self {
            PartitionSpec::Shards { n_clients, shards_per_client } => {
                shard_indices(d, n_clients, shards_per_client, stream)
            }
            PartitionSpec::Dirichlet { n_clients, alpha } => dirichlet_indices(d, n_clients, alpha, stream),
            PartitionSpec::Uniform { n_clients } => uniform_indices(d, n_clients, stream),
        }
    }

    pub fn partition(&self, d: &Dataset, stream: &RngStream) -> Result<Vec<Dataset>> {
        Ok(self.partition_indices(d, stream)?.iter().map(|ix| d.subset(ix)).collect())
    }
}

fn check_clients(n_clients: usize) -> Result<()> {
    if n_clients == 0 {
        return Err(Error::InvalidArgument("n_clients must be at least 1".into()));
    }
    Ok(())
}

/// Label-sorted shard assignment. Records are sorted by label (ties by
/// original index), the trailing remainder beyond a multiple of
/// `n_clients * shards_per_client` is dropped, and each client receives
/// `shards_per_client` random shards without replacement.
pub fn shard_indices(
    d: &Dataset,
    n_clients: usize,
    shards_per_client: usize,
    stream: &RngStream,
) -> Result<Vec<Vec<usize>>> {
    check_clients(n_clients)?;
    if shards_per_client == 0 {
        return Err(Error::InvalidArgument("shards_per_client must be at least 1".into()));
    }
    let n_shards = n_clients * shards_per_client;
    let shard_len = d.len() / n_shards;
    if shard_len == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} records cannot fill {} shards",
            d.len(),
            n_shards
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by_key(|&i| (d.records[i].label, i));
    order.truncate(n_shards * shard_len);

    let mut shard_ids: Vec<usize> = (0..n_shards).collect();
    shard_ids.shuffle(&mut stream.rng());
    Ok(shard_ids
        .chunks(shards_per_client)
        .map(|mine| {
            let mut ix: Vec<usize> = mine
                .iter()
                .flat_map(|&s| order[s * shard_len..(s + 1) * shard_len].iter().copied())
                .collect();
            ix.sort_unstable();
            ix
        })
        .collect())
}

pub fn partition_shards(
    d: &Dataset,
    n_clients: usize,
    shards_per_client: usize,
    stream: &RngStream,
) -> Result<Vec<Dataset>> {
    PartitionSpec::Shards { n_clients, shards_per_client }.partition(d, stream)
}

fn dirichlet_sample<R: Rng + ?Sized>(rng: &mut R, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|x| *x /= total);
    } else {
        // Every gamma draw underflowed (tiny alpha): put the mass on one client.
        let k = rng.random_range(0..n);
        draws.iter_mut().enumerate().for_each(|(i, x)| *x = if i == k { 1.0 } else { 0.0 });
    }
    draws
}

/// Per-class Dirichlet allocation. For each class, client proportions are
/// drawn from `Dirichlet(alpha)` and the class's records (in shuffled order)
/// are split by the rounded cumulative proportions. Empty clients are then
/// filled by moving one record from the currently largest client.
pub fn dirichlet_indices(d: &Dataset, n_clients: usize, alpha: f64, stream: &RngStream) -> Result<Vec<Vec<usize>>> {
    check_clients(n_clients)?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if d.len() < n_clients {
        return Err(Error::InvalidArgument(format!(
            "{} records cannot cover {} clients",
            d.len(),
            n_clients
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.classes];
    for (i, r) in d.records.iter().enumerate() {
        by_class[r.label].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(c));
    }
    let mut rng = stream.rng();
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for members in &mut by_class {
        members.shuffle(&mut rng);
        let props = dirichlet_sample(&mut rng, alpha, n_clients);
        let n_c = members.len() as f64;
        let mut cum = 0.0;
        let mut start = 0usize;
        for (k, p) in props.iter().enumerate() {
            cum += p;
            let end = if k + 1 == n_clients { members.len() } else { ((cum * n_c).round() as usize).min(members.len()) };
            let end = end.max(start);
            parts[k].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    // Rebalance: an empty client takes one record from the largest client.
    while let Some(empty) = parts.iter().position(Vec::is_empty) {
        let largest = (0..n_clients).max_by_key(|&k| (parts[k].len(), std::cmp::Reverse(k))).unwrap();
        let moved = parts[largest].pop().expect("largest client holds at least two records");
        parts[empty].push(moved);
    }
    parts.iter_mut().for_each(|p| p.sort_unstable());
    Ok(parts)
}

pub fn partition_dirichlet(d: &Dataset, n_clients: usize, alpha: f64, stream: &RngStream) -> Result<Vec<Dataset>> {
    PartitionSpec::Dirichlet { n_clients, alpha }.partition(d, stream)
}

/// IID split: a random permutation dealt into near-equal contiguous blocks.
pub fn uniform_indices(d: &Dataset, n_clients: usize, stream: &RngStream) -> Result<Vec<Vec<usize>>> {
    check_clients(n_clients)?;
    if d.len() < n_clients {
        return Err(Error::InvalidArgument(format!(
            "{} records cannot cover {} clients",
            d.len(),
            n_clients
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut stream.rng());
    let base = d.len() / n_clients;
    let extra = d.len() % n_clients;
    let mut start = 0;
    Ok((0..n_clients)
        .map(|k| {
            let len = base + usize::from(k < extra);
            let mut ix = order[start..start + len].to_vec();
            start += len;
            ix.sort_unstable();
            ix
        })
        .collect())
}

/// Indices of records included independently with probability `p`.
pub fn poisson_indices<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<usize> {
    if p >= 1.0 {
        return (0..n).collect();
    }
    (0..n).filter(|_| rng.random::<f64>() < p).collect()
}

/// Record-level Poisson sampling. An empty sample is a legal result.
pub fn poisson_sample(d: &Dataset, p: f64, stream: &RngStream) -> Result<Dataset> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("sampling rate {p} not in (0,1]")));
    }
    Ok(d.subset(&poisson_indices(d.len(), p, &mut stream.rng())))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IdxError {
    #[error("I/O error: {0}")]
    Io(String),
    #[error("bad IDX magic number {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("truncated IDX file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("IDX dimensions overflow the addressable size")]
    DimensionOverflow,
    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// A parsed unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn parse(bytes: &[u8]) -> Result<Self, IdxError> {
        if bytes.len() < 4 {
            return Err(IdxError::Truncated { expected: 4, found: bytes.len() });
        }
        let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
        if magic[0] != 0 || magic[1] != 0 || magic[2] != 0x08 || magic[3] == 0 {
            return Err(IdxError::BadMagic(magic));
        }
        let rank = magic[3] as usize;
        let header = 4 + 4 * rank;
        if bytes.len() < header {
            return Err(IdxError::Truncated { expected: header, found: bytes.len() });
        }
        let dims: Vec<usize> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let payload = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(IdxError::DimensionOverflow)?;
        let expected = header.checked_add(payload).ok_or(IdxError::DimensionOverflow)?;
        if bytes.len() < expected {
            return Err(IdxError::Truncated { expected, found: bytes.len() });
        }
        Ok(Self { dims, data: bytes[header..expected].to_vec() })
    }

    /// Items along the first axis, each flattened row-major and scaled to [0,1].
    pub fn into_features(self) -> Vec<Vec<f64>> {
        let n = self.dims.first().copied().unwrap_or(0);
        let per_item: usize = self.dims.iter().skip(1).product();
        if n == 0 {
            return Vec::new();
        }
        self.data
            .chunks_exact(per_item.max(1))
            .take(n)
            .map(|c| c.iter().map(|&b| b as f64 / 255.0).collect())
            .collect()
    }
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxArray, IdxError> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| IdxError::Io(format!("{}: {e}", path.as_ref().display())))?;
    IdxArray::parse(&bytes)
}

/// Pairs an image file with a rank-1 label file.
pub fn load_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>, classes: usize) -> Result<Dataset, IdxError> {
    let features = load_idx(images)?.into_features();
    let labels = load_idx(labels)?;
    if features.len() != labels.data.len() {
        return Err(IdxError::CountMismatch { images: features.len(), labels: labels.data.len() });
    }
    let mut records = Vec::with_capacity(features.len());
    for (features, &label) in features.into_iter().zip(&labels.data) {
        let label = label as usize;
        if label >= classes {
            return Err(IdxError::LabelOutOfRange { label, classes });
        }
        records.push(Record { features, label });
    }
    Ok(Dataset { records, classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(n: usize, classes: usize) -> Dataset {
        Dataset {
            records: (0..n).map(|i| Record { features: vec![i as f64], label: i % classes }).collect(),
            classes,
        }
    }

    fn assert_disjoint_exhaustive(parts: &[Vec<usize>], expected_total: usize) {
        let mut seen = std::collections::HashSet::new();
        for p in parts {
            for &i in p {
                assert!(seen.insert(i), "index {i} assigned twice");
            }
        }
        assert_eq!(seen.len(), expected_total);
    }

    #[test]
    fn synthetic_is_deterministic_and_covers_classes() {
        let s = RngStream::from_seed(1);
        let a = gen_synthetic(&s, 50, 3, 5, 4.0, 0.3).unwrap();
        let b = gen_synthetic(&s, 50, 3, 5, 4.0, 0.3).unwrap();
        assert_eq!(a, b);
        assert!(a.class_counts().iter().all(|&c| c > 0));
        assert!(gen_synthetic(&s, 50, 3, 1, 4.0, 0.0).is_err());
        assert!(gen_synthetic(&s, 3, 3, 5, 4.0, 0.0).is_err());
    }

    #[test]
    fn shards_mnist_shape() {
        let d = labelled(60_000, 10);
        let parts = shard_indices(&d, 100, 4, &RngStream::from_seed(2)).unwrap();
        assert_eq!(parts.len(), 100);
        assert!(parts.iter().all(|p| p.len() == 600));
        assert_disjoint_exhaustive(&parts, 60_000);
        for p in &parts {
            assert!(d.subset(p).label_support() <= 4);
        }
    }

    #[test]
    fn shards_truncate_remainder_and_single_client() {
        let d = labelled(103, 3);
        let parts = shard_indices(&d, 5, 2, &RngStream::from_seed(3)).unwrap();
        assert!(parts.iter().all(|p| p.len() == 20));
        assert_disjoint_exhaustive(&parts, 100);
        let one = shard_indices(&d, 1, 1, &RngStream::from_seed(3)).unwrap();
        assert_eq!(one[0].len(), 103);
        assert!(shard_indices(&d, 5, 0, &RngStream::from_seed(3)).is_err());
    }

    #[test]
    fn dirichlet_concentrates_for_large_alpha() {
        let d = labelled(5000, 5);
        let parts = dirichlet_indices(&d, 10, 1e6, &RngStream::from_seed(4)).unwrap();
        assert_disjoint_exhaustive(&parts, 5000);
        for p in &parts {
            let sub = d.subset(p);
            for c in sub.class_counts() {
                let frac = c as f64 / sub.len() as f64;
                assert!((frac - 0.2).abs() < 0.05, "{frac}");
            }
        }
    }

    #[test]
    fn dirichlet_never_leaves_clients_empty() {
        let d = labelled(300, 3);
        for seed in 0..100 {
            for alpha in [0.01, 0.9, 5.0] {
                let parts = dirichlet_indices(&d, 100, alpha, &RngStream::from_seed(seed)).unwrap();
                assert!(parts.iter().all(|p| !p.is_empty()));
                assert_disjoint_exhaustive(&parts, 300);
            }
        }
    }

    #[test]
    fn dirichlet_rejects_empty_class_and_bad_alpha() {
        let d = labelled(10, 2);
        let d3 = Dataset { records: d.records.clone(), classes: 3 };
        assert_eq!(dirichlet_indices(&d3, 2, 1.0, &RngStream::from_seed(0)), Err(Error::EmptyClass(2)));
        assert!(dirichlet_indices(&d, 2, 0.0, &RngStream::from_seed(0)).is_err());
    }

    #[test]
    fn poisson_full_rate_is_identity() {
        let d = labelled(40, 2);
        assert_eq!(poisson_sample(&d, 1.0, &RngStream::from_seed(5)).unwrap(), d);
        assert!(poisson_sample(&d, 0.0, &RngStream::from_seed(5)).is_err());
    }

    #[test]
    fn poisson_batch_size_and_independence() {
        let root = RngStream::from_seed(6);
        let trials = 10_000;
        let n = 600;
        let p = 0.05;
        let mut total = 0usize;
        let mut hits = vec![0usize; n];
        let mut both = 0usize;
        for t in 0..trials {
            let ix = poisson_indices(n, p, &mut root.derive_indexed("t", t as u64).rng());
            total += ix.len();
            for &i in &ix {
                hits[i] += 1;
            }
            if ix.contains(&0) && ix.contains(&1) {
                both += 1;
            }
        }
        let mean = total as f64 / trials as f64;
        assert!((mean - 30.0).abs() < 1.0, "mean batch {mean}");
        let band = 3.0 * (p * (1.0 - p) / trials as f64).sqrt();
        for &h in &hits[..20] {
            assert!((h as f64 / trials as f64 - p).abs() <= band);
        }
        let (p0, p1) = (hits[0] as f64 / trials as f64, hits[1] as f64 / trials as f64);
        let cov = both as f64 / trials as f64 - p0 * p1;
        let r = cov / (p0 * (1.0 - p0) * p1 * (1.0 - p1)).sqrt();
        assert!(r.abs() < 0.02, "correlation {r}");
    }

    fn idx_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, dims.len() as u8];
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_parses_images() {
        let payload: Vec<u8> = (0..24).collect();
        let arr = IdxArray::parse(&idx_bytes(&[2, 3, 4], &payload)).unwrap();
        let feats = arr.into_features();
        assert_eq!(feats.len(), 2);
        assert_eq!(feats[0].len(), 12);
        assert_eq!(feats[1][0], 12.0 / 255.0);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let payload: Vec<u8> = (0..23).collect();
        assert!(matches!(IdxArray::parse(&idx_bytes(&[2, 3, 4], &payload)), Err(IdxError::Truncated { .. })));
        assert!(matches!(IdxArray::parse(&[0, 1, 8, 1, 0, 0, 0, 0]), Err(IdxError::BadMagic(_))));
        assert!(matches!(IdxArray::parse(&[0, 0, 9, 1, 0, 0, 0, 0]), Err(IdxError::BadMagic(_))));
        let huge = idx_bytes(&[u32::MAX, u32::MAX, u32::MAX], &[]);
        assert_eq!(IdxArray::parse(&huge), Err(IdxError::DimensionOverflow));
    }

    #[test]
    fn idx_dataset_pairs_labels() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, idx_bytes(&[3, 2, 2], &[0u8; 12])).unwrap();
        std::fs::write(&lab, idx_bytes(&[3], &[0, 1, 1])).unwrap();
        let ds = load_idx_dataset(&img, &lab, 2).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.records[2].label, 1);
        std::fs::write(&lab, idx_bytes(&[2], &[0, 1])).unwrap();
        assert!(matches!(load_idx_dataset(&img, &lab, 2), Err(IdxError::CountMismatch { .. })));
    }
}
