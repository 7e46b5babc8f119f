//! Datasets: IDX ingestion, synthetic Gaussian blobs, and seeded splits.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Radius of the sphere the blob centres are placed on.
pub const BLOB_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitTag::Train),
            "validation" | "val" => Some(SplitTag::Validation),
            "test" => Some(SplitTag::Test),
            _ => None,
        }
    }
}

/// Features, integer labels and (optionally) a split tag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
    tags: Option<Vec<SplitTag>>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyDataset("dataset has no rows".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::CountMismatch {
                images: features.rows(),
                labels: labels.len(),
            });
        }
        if let Some(i) = labels.iter().position(|&y| y >= class_count) {
            return Err(Error::Shape {
                layer: 0,
                detail: format!("label {} at row {i} is not below class count {class_count}", labels[i]),
            });
        }
        if !features.all_finite() {
            return Err(Error::Numeric("dataset features contain non-finite values".into()));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
            tags: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn tags(&self) -> Option<&[SplitTag]> {
        self.tags.as_deref()
    }

    /// Rows at `indices`, in that order, carrying their tags along.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset("selection is empty".into()));
        }
        Ok(Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            tags: self.tags.as_ref().map(|t| indices.iter().map(|&i| t[i]).collect()),
        })
    }

    pub fn indices_of(&self, tag: SplitTag) -> Vec<usize> {
        match &self.tags {
            Some(t) => (0..t.len()).filter(|&i| t[i] == tag).collect(),
            None => Vec::new(),
        }
    }

    /// The rows carrying `tag`, as an untagged dataset.
    pub fn part(&self, tag: SplitTag) -> Result<Dataset> {
        if self.tags.is_none() {
            return Err(Error::config("split", "dataset has not been split"));
        }
        let idx = self.indices_of(tag);
        if idx.is_empty() {
            return Err(Error::EmptyDataset(format!("{} split is empty", tag.name())));
        }
        let mut d = self.select(&idx)?;
        d.tags = None;
        Ok(d)
    }

    /// Keep the rows whose label satisfies `keep`.
    pub fn filter_labels(&self, keep: impl Fn(usize) -> bool) -> Result<Dataset> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.select(&idx)
    }

    /// Re-declare the number of classes; every label must stay below it.
    pub fn with_class_count(mut self, class_count: usize) -> Result<Dataset> {
        if let Some(&y) = self.labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Shape {
                layer: 0,
                detail: format!("label {y} is not below class count {class_count}"),
            });
        }
        self.class_count = class_count;
        Ok(self)
    }
}

/// Fractions of the data going to train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, validation: f64, test: f64, seed: u64) -> Result<Self> {
        let s = SplitSpec {
            train,
            validation,
            test,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.validation, self.test];
        if f.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::config("split", "every split fraction must be positive"));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", "split fractions must sum to 1"));
        }
        Ok(())
    }

    /// `(train, validation, test)` sizes for `n` rows. Validation and test
    /// sizes are floored; the remainder goes to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = (self.validation * n as f64).floor() as usize;
        let test = (self.test * n as f64).floor() as usize;
        (n.saturating_sub(val + test), val, test)
    }
}

/// Fisher-Yates with draws from `random_range` on `u64`, which is portable.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut rng::Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        items.swap(i, j);
    }
}

/// Tag every row: seeded shuffle, then contiguous train/validation/test runs.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = dataset.len();
    if n < 3 {
        return Err(Error::config(
            "split",
            format!("need at least 3 rows to split, have {n}"),
        ));
    }
    let (tr, va, te) = spec.sizes(n);
    for (name, size) in [("train", tr), ("validation", va), ("test", te)] {
        if size == 0 {
            return Err(Error::config(
                "split",
                format!("{name} split would be empty for {n} rows"),
            ));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut rng::stream(spec.seed, "split", 0));
    let mut tags = vec![SplitTag::Train; n];
    for &i in &order[tr..tr + va] {
        tags[i] = SplitTag::Validation;
    }
    for &i in &order[tr + va..] {
        tags[i] = SplitTag::Test;
    }
    let mut out = dataset.clone();
    out.tags = Some(tags);
    Ok(out)
}

/// `classes` Gaussian clusters of `per_class` points each in `dim` dimensions.
///
/// Cluster centres are seed-derived random directions scaled to
/// [`BLOB_RADIUS`]; points are centre plus isotropic noise with standard
/// deviation `spread`. Rows are ordered class by class.
pub fn synth_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config("blobs.classes", "need at least 2 classes"));
    }
    if per_class < 1 {
        return Err(Error::config("blobs.per_class", "need at least 1 point per class"));
    }
    if dim < 1 {
        return Err(Error::config("blobs.dim", "dimension must be positive"));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::config("blobs.spread", "spread must be positive"));
    }
    let mut mrng = rng::stream(seed, "blob-centres", 0);
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut mrng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| BLOB_RADIUS * x / norm).collect();
            }
        })
        .collect();
    let mut prng = rng::stream(seed, "blob-points", 0);
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..per_class {
            for &m in centre {
                let z: f64 = StandardNormal.sample(&mut prng);
                data.push(m + spread * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(classes * per_class, dim, data)?, labels, classes)
}

fn read_u32_be(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            what,
            needed: at + 4,
            found: bytes.len(),
        })
}

/// Parse an IDX image file into `(count, rows*cols, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let magic = read_u32_be(bytes, 0, "image file")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            what: "image file",
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(bytes, 4, "image file")? as usize;
    let rows = read_u32_be(bytes, 8, "image file")? as usize;
    let cols = read_u32_be(bytes, 12, "image file")? as usize;
    if count == 0 {
        return Err(Error::EmptyDataset("image file holds zero images".into()));
    }
    let dim = rows * cols;
    let needed = 16 + count * dim;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            what: "image file",
            needed,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..needed].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((count, dim, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0, "label file")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            what: "label file",
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(bytes, 4, "label file")? as usize;
    if count == 0 {
        return Err(Error::EmptyDataset("label file holds zero labels".into()));
    }
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            what: "label file",
            needed,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| usize::from(b)).collect())
}

/// Load an IDX image/label pair (the MNIST container format).
///
/// Pixels are scaled to `[0, 1]` by dividing by 255. The class count is 10
/// when every label is a digit, otherwise one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    idx_dataset(&images, &labels)
}

pub fn idx_dataset(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (count, dim, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(10));
    Dataset::new(Matrix::from_vec(count, dim, pixels)?, labels, classes)
}

/// Encode a dataset as an IDX pair with `rows * cols == dim`. Features are
/// quantized as `round(255 * v)`, clamped to the byte range.
pub fn encode_idx(dataset: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != dataset.dim() {
        return Err(Error::Shape {
            layer: 0,
            detail: format!("{rows}x{cols} images cannot hold {} features", dataset.dim()),
        });
    }
    if dataset.class_count() > 256 {
        return Err(Error::config("labels", "IDX labels are single bytes"));
    }
    let n = dataset.len() as u32;
    let mut images = Vec::with_capacity(16 + dataset.len() * dataset.dim());
    for v in [IDX_IMAGES_MAGIC, n, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(
        dataset
            .features()
            .as_slice()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend(dataset.labels().iter().map(|&y| y as u8));
    Ok((images, labels))
}

pub fn write_idx(dataset: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(dataset, rows, cols)?;
    fs::write(images_path, images).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Where a dataset comes from: `idx:<images>,<labels>` or
/// `blobs:K,n,D,spread,seed`.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetDescriptor {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    },
}

impl DatasetDescriptor {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = |detail: &str| Error::config("dataset", format!("`{s}`: {detail}"));
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| bad("expected `idx:` or `blobs:` prefix"))?;
        match kind {
            "idx" => {
                let (images, labels) = rest
                    .split_once(',')
                    .ok_or_else(|| bad("expected `idx:<images>,<labels>`"))?;
                Ok(DatasetDescriptor::Idx {
                    images: PathBuf::from(images.trim()),
                    labels: PathBuf::from(labels.trim()),
                })
            }
            "blobs" => {
                let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
                if parts.len() != 5 {
                    return Err(bad("expected `blobs:K,n,D,spread,seed`"));
                }
                let int = |v: &str| v.parse::<usize>().map_err(|_| bad("non-integer field"));
                Ok(DatasetDescriptor::Blobs {
                    classes: int(parts[0])?,
                    per_class: int(parts[1])?,
                    dim: int(parts[2])?,
                    spread: parts[3].parse().map_err(|_| bad("spread is not a number"))?,
                    seed: parts[4].parse().map_err(|_| bad("seed is not an integer"))?,
                })
            }
            _ => Err(bad("unknown dataset kind")),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetDescriptor::Idx { images, labels } => load_idx(images, labels),
            DatasetDescriptor::Blobs {
                classes,
                per_class,
                dim,
                spread,
                seed,
            } => synth_blobs(*classes, *per_class, *dim, *spread, *seed),
        }
    }
}

impl std::fmt::Display for DatasetDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetDescriptor::Idx { images, labels } => write!(f, "idx:{},{}", images.display(), labels.display()),
            DatasetDescriptor::Blobs {
                classes,
                per_class,
                dim,
                spread,
                seed,
            } => write!(f, "blobs:{classes},{per_class},{dim},{spread},{seed}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx_pair() -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        images.extend_from_slice(&[0, 255, 51, 102, 10, 20, 30, 40]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (images, labels)
    }

    #[test]
    fn parses_hand_written_idx() {
        let (images, labels) = idx_pair();
        let d = idx_dataset(&images, &labels).unwrap();
        assert_eq!((d.len(), d.dim(), d.class_count()), (2, 4, 10));
        assert_eq!(d.features().row(0), &[0.0, 1.0, 51.0 / 255.0, 102.0 / 255.0]);
        assert_eq!(
            d.features().row(1),
            &[10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0, 40.0 / 255.0]
        );
        assert_eq!(d.labels(), &[7, 3]);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let (images, labels) = idx_pair();
        assert!(matches!(
            idx_dataset(&images, &images),
            Err(Error::BadMagic {
                what: "label file",
                found: 0x803,
                ..
            })
        ));
        assert!(matches!(
            idx_dataset(&images[..20], &labels),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            idx_dataset(&images, &labels[..9]),
            Err(Error::Truncated { .. })
        ));
        let mut three = labels.clone();
        three[7] = 3;
        three.push(1);
        assert!(matches!(
            idx_dataset(&images, &three),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
        let empty = vec![0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 2];
        assert!(matches!(idx_dataset(&empty, &labels), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn blobs_are_balanced_and_reproducible() {
        let a = synth_blobs(3, 100, 4, 0.5, 9).unwrap();
        let b = synth_blobs(3, 100, 4, 0.5, 9).unwrap();
        assert_eq!(a, b);
        for c in 0..3 {
            assert_eq!(a.labels().iter().filter(|&&y| y == c).count(), 100);
        }
        assert_ne!(a, synth_blobs(3, 100, 4, 0.5, 10).unwrap());
    }

    #[test]
    fn tight_blobs_are_centroid_separable() {
        let d = synth_blobs(5, 40, 3, 1e-3, 1).unwrap();
        let mut centroids = vec![vec![0.0; 3]; 5];
        for (row, &y) in d.features().iter_rows().zip(d.labels()) {
            for (c, v) in centroids[y].iter_mut().zip(row) {
                *c += v / 40.0;
            }
        }
        let correct = d
            .features()
            .iter_rows()
            .zip(d.labels())
            .filter(|(row, &y)| {
                let dist = |c: &Vec<f64>| c.iter().zip(row.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                (0..5)
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap()
                    == y
            })
            .count();
        assert_eq!(correct, d.len());
    }

    #[test]
    fn split_sizes_and_partition() {
        let d = synth_blobs(2, 50, 2, 1.0, 3).unwrap();
        let spec = SplitSpec::new(0.8, 0.1, 0.1, 5).unwrap();
        let s = split(&d, &spec).unwrap();
        let sizes: Vec<usize> = [SplitTag::Train, SplitTag::Validation, SplitTag::Test]
            .iter()
            .map(|&t| s.indices_of(t).len())
            .collect();
        assert_eq!(sizes, vec![80, 10, 10]);
        assert_eq!(split(&d, &spec).unwrap(), s);
        assert_eq!(s.part(SplitTag::Test).unwrap().len(), 10);
    }

    #[test]
    fn split_rejects_empty_parts() {
        let d = synth_blobs(2, 5, 2, 1.0, 3).unwrap();
        let spec = SplitSpec::new(0.9, 0.05, 0.05, 5).unwrap();
        assert!(matches!(split(&d, &spec), Err(Error::Config { .. })));
        assert!(SplitSpec::new(0.5, 0.5, 0.0, 1).is_err());
        assert!(SplitSpec::new(0.5, 0.4, 0.2, 1).is_err());
    }

    #[test]
    fn descriptors_round_trip() {
        let d = DatasetDescriptor::parse("blobs:3,10,4,0.5,7").unwrap();
        assert_eq!(
            d,
            DatasetDescriptor::Blobs {
                classes: 3,
                per_class: 10,
                dim: 4,
                spread: 0.5,
                seed: 7
            }
        );
        assert_eq!(DatasetDescriptor::parse(&d.to_string()).unwrap(), d);
        assert!(DatasetDescriptor::parse("csv:foo").is_err());
        assert!(DatasetDescriptor::parse("blobs:3,10,4").is_err());
        assert!(matches!(
            DatasetDescriptor::parse("idx:a.idx,b.idx").unwrap(),
            DatasetDescriptor::Idx { .. }
        ));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 3usize..400, seed in any::<u64>()) {
            let d = synth_blobs(3, n, 1, 1.0, 0).unwrap();
            let spec = SplitSpec::new(0.6, 0.2, 0.2, seed).unwrap();
            let s = split(&d, &spec).unwrap();
            let mut all: Vec<usize> = [SplitTag::Train, SplitTag::Validation, SplitTag::Test]
                .iter()
                .flat_map(|&t| s.indices_of(t))
                .collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
        }

        #[test]
        fn idx_round_trip(pixels in proptest::collection::vec(0u8..=255, 12), labels in proptest::collection::vec(0usize..10, 3)) {
            let features = Matrix::from_vec(3, 4, pixels.iter().map(|&p| f64::from(p) / 255.0).collect()).unwrap();
            let d = Dataset::new(features, labels, 10).unwrap();
            let (img, lab) = encode_idx(&d, 2, 2).unwrap();
            prop_assert_eq!(idx_dataset(&img, &lab).unwrap(), d);
        }
    }
}
