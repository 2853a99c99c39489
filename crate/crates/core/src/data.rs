//! Datasets: synthetic Gaussian blobs, IDX image files and CSV images, with
//! deterministic splitting and batching.

use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::substream;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Spatially constant class centres `6σ` apart plus `N(0, σ²)` pixel noise.
    SyntheticBlobs { samples_per_class: usize, sigma: f64 },
    /// Unsigned-byte IDX files (`N×H×W` images, one channel).
    IdxImages { images: PathBuf, labels: PathBuf },
    /// One sample per line: `label,v0,v1,…` with `C·H·W` values in NCHW order.
    CsvImages { path: PathBuf },
}

/// Fractions of the shuffled dataset given to each split, in this order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub search_train: f64,
    pub search_val: f64,
    pub final_train: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub source: DatasetSource,
    pub channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub splits: SplitFractions,
}

impl DatasetDescriptor {
    pub fn validate(&self) -> Result<()> {
        let s = &self.splits;
        let fr = [s.search_train, s.search_val, s.final_train, s.test];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || fr.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config("split fractions must be in [0, 1] and sum to at most 1".into()));
        }
        if let DatasetSource::SyntheticBlobs { sigma, samples_per_class } = &self.source {
            if *sigma <= 0.0 || *samples_per_class == 0 {
                return Err(Error::Config("blobs need positive σ and sample count".into()));
            }
            if self.num_classes > 2 && self.num_classes > self.channels {
                return Err(Error::Config("blobs with more than two classes need one channel per class".into()));
            }
        }
        if let DatasetSource::IdxImages { .. } = &self.source {
            if self.channels != 1 {
                return Err(Error::Config("IDX images have a single channel".into()));
            }
        }
        Ok(())
    }
}

/// Images (NCHW) with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

pub type Batch = (Tensor, Vec<usize>);

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, ..) = images.nchw()?;
        if n != labels.len() {
            return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Shuffled full batches; a trailing partial batch is dropped.
    pub fn shuffled_batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Batch> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks_exact(batch_size)
            .map(|c| {
                let s = self.subset(c);
                (s.images, s.labels)
            })
            .collect()
    }

    /// In-order batches covering every sample.
    pub fn ordered_batches(&self, batch_size: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1))
            .map(|c| {
                let s = self.subset(c);
                (s.images, s.labels)
            })
            .collect()
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.len() / batch_size
    }
}

/// The four disjoint splits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub search_train: Dataset,
    pub search_val: Dataset,
    pub final_train: Dataset,
    pub test: Dataset,
}

/// Loads the dataset and splits it with the `split` substream of `seed`.
pub fn load_dataset(desc: &DatasetDescriptor, seed: u64) -> Result<Splits> {
    desc.validate()?;
    let full = match &desc.source {
        DatasetSource::SyntheticBlobs { samples_per_class, sigma } => {
            synthetic_blobs(desc, *samples_per_class, *sigma, &mut substream(seed, "data"))?
        }
        DatasetSource::IdxImages { images, labels } => load_idx_pair(images, labels, desc)?,
        DatasetSource::CsvImages { path } => load_csv(path, desc)?,
    };
    split(&full, &desc.splits, &mut substream(seed, "split"))
}

pub fn split<R: Rng + ?Sized>(full: &Dataset, fr: &SplitFractions, rng: &mut R) -> Result<Splits> {
    let n = full.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let counts = [fr.search_train, fr.search_val, fr.final_train, fr.test].map(|f| (f * n as f64 + 1e-9).floor() as usize);
    let mut parts = Vec::with_capacity(4);
    let mut at = 0;
    for c in counts {
        parts.push(full.subset(&idx[at..at + c]));
        at += c;
    }
    let test = parts.pop().expect("four parts");
    let final_train = parts.pop().expect("four parts");
    let search_val = parts.pop().expect("four parts");
    let search_train = parts.pop().expect("four parts");
    Ok(Splits {
        search_train,
        search_val,
        final_train,
        test,
    })
}

/// Class centres for the blob task: `±3σ·u` for two classes, otherwise
/// `3√2σ` times orthonormal directions; all pairwise distances are `6σ`.
pub fn blob_centres<R: Rng + ?Sized>(classes: usize, channels: usize, sigma: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let wanted = if classes == 2 { 1 } else { classes };
    while basis.len() < wanted {
        let mut v: Vec<f64> = (0..channels).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    if classes == 2 {
        let u = &basis[0];
        vec![u.iter().map(|x| 3.0 * sigma * x).collect(), u.iter().map(|x| -3.0 * sigma * x).collect()]
    } else {
        let r = 3.0 * std::f64::consts::SQRT_2 * sigma;
        basis.into_iter().map(|b| b.into_iter().map(|x| r * x).collect()).collect()
    }
}

pub fn synthetic_blobs<R: Rng + ?Sized>(
    desc: &DatasetDescriptor,
    samples_per_class: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<Dataset> {
    let (c, s, k) = (desc.channels, desc.image_size, desc.num_classes);
    let centres = blob_centres(k, c, sigma, rng);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let n = samples_per_class * k;
    let mut data = Vec::with_capacity(n * c * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        labels.push(class);
        for ch in 0..c {
            for _ in 0..s * s {
                data.push(centres[class][ch] + noise.sample(rng));
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, c, s, s], data)?, labels, k)
}

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        offset,
        message: message.into(),
    })
}

/// Validates an IDX header and returns the dimensions and the payload.
pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return parse_err(0, "file shorter than the IDX magic");
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != expected_magic {
        return parse_err(0, format!("magic 0x{magic:08x}, expected 0x{expected_magic:08x}"));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return parse_err(bytes.len(), format!("header needs {header} bytes"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..8 + 4 * i]) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() - header != payload {
        return parse_err(
            header,
            format!("payload has {} bytes, dimensions {dims:?} need {payload}", bytes.len() - header),
        );
    }
    Ok((dims, &bytes[header..]))
}

/// Serializes unsigned-byte data as IDX.
pub fn write_idx(magic: u32, dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; 4 + 4 * dims.len()];
    BigEndian::write_u32(&mut out[0..4], magic);
    for (i, &d) in dims.iter().enumerate() {
        BigEndian::write_u32(&mut out[4 + 4 * i..8 + 4 * i], d as u32);
    }
    out.extend_from_slice(data);
    out
}

pub fn decode_idx_pair(images: &[u8], labels: &[u8], desc: &DatasetDescriptor) -> Result<Dataset> {
    let (idims, ipay) = parse_idx(images, IDX_IMAGES_MAGIC)?;
    let (ldims, lpay) = parse_idx(labels, IDX_LABELS_MAGIC)?;
    if idims[1] != desc.image_size || idims[2] != desc.image_size {
        return Err(Error::Data(format!(
            "IDX images are {}x{}, expected {}x{}",
            idims[1], idims[2], desc.image_size, desc.image_size
        )));
    }
    if ldims[0] != idims[0] {
        return Err(Error::Data(format!("{} images but {} labels", idims[0], ldims[0])));
    }
    let data: Vec<f64> = ipay.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lpay.iter().map(|&b| b as usize).collect();
    Dataset::new(Tensor::new(vec![idims[0], 1, idims[1], idims[2]], data)?, labels, desc.num_classes)
}

fn load_idx_pair(images: &Path, labels: &Path, desc: &DatasetDescriptor) -> Result<Dataset> {
    decode_idx_pair(&std::fs::read(images)?, &std::fs::read(labels)?, desc)
}

pub fn decode_csv<R: std::io::Read>(reader: R, desc: &DatasetDescriptor) -> Result<Dataset> {
    let per = desc.channels * desc.image_size * desc.image_size;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != per + 1 {
            return Err(Error::Data(format!("line {}: {} fields, expected {}", line + 1, rec.len(), per + 1)));
        }
        let label: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {}: label `{}` is not an integer", line + 1, &rec[0])))?;
        labels.push(label);
        for f in rec.iter().skip(1) {
            data.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("line {}: value `{f}` is not a number", line + 1)))?,
            );
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, desc.channels, desc.image_size, desc.image_size], data)?,
        labels,
        desc.num_classes,
    )
}

fn load_csv(path: &Path, desc: &DatasetDescriptor) -> Result<Dataset> {
    decode_csv(std::fs::File::open(path)?, desc)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::config::RunConfig;

    fn desc() -> DatasetDescriptor {
        RunConfig::desk().data
    }

    #[test]
    fn blobs_are_reproducible_and_split_disjointly() {
        let a = load_dataset(&desc(), 7).unwrap();
        let b = load_dataset(&desc(), 7).unwrap();
        assert_eq!(a.search_train, b.search_train);
        assert_eq!(a.test, b.test);
        let total = a.search_train.len() + a.search_val.len() + a.final_train.len() + a.test.len();
        assert!(total <= 256);
        assert_eq!(a.search_train.len(), 128);
        assert_ne!(load_dataset(&desc(), 8).unwrap().search_train, a.search_train);
    }

    #[test]
    fn blob_centres_are_six_sigma_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, c) in [(2, 3), (3, 3), (4, 6)] {
            let cs = blob_centres(k, c, 0.5, &mut rng);
            for i in 0..k {
                for j in i + 1..k {
                    let d: f64 = cs[i].iter().zip(&cs[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    assert!((d - 3.0).abs() < 1e-12, "distance {d}");
                }
            }
        }
    }

    #[test]
    fn idx_wrong_magic_reports_offset_zero() {
        let bytes = write_idx(0x0000_0802, &[1, 2, 2], &[0, 1, 2, 3]);
        match parse_idx(&bytes, IDX_IMAGES_MAGIC) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn idx_truncated_payload_reports_header_offset() {
        let mut bytes = write_idx(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0; 8]);
        bytes.pop();
        match parse_idx(&bytes, IDX_IMAGES_MAGIC) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn idx_pair_decodes_and_checks_labels() {
        let mut d = desc();
        d.channels = 1;
        d.image_size = 2;
        d.source = DatasetSource::IdxImages {
            images: "unused".into(),
            labels: "unused".into(),
        };
        let img = write_idx(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0, 255, 51, 102, 1, 2, 3, 4]);
        let lab = write_idx(IDX_LABELS_MAGIC, &[2], &[1, 0]);
        let ds = decode_idx_pair(&img, &lab, &d).unwrap();
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.images.data()[1], 1.0);
        let bad = write_idx(IDX_LABELS_MAGIC, &[2], &[1, 9]);
        assert!(matches!(decode_idx_pair(&img, &bad, &d), Err(Error::Data(_))));
    }

    #[test]
    fn csv_decodes() {
        let mut d = desc();
        d.channels = 1;
        d.image_size = 1;
        let ds = decode_csv("1,0.5\n0,-2\n".as_bytes(), &d).unwrap();
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.images.data(), &[0.5, -2.0]);
        assert!(decode_csv("1,0.5,3\n".as_bytes(), &d).is_err());
    }

    #[test]
    fn batches_drop_partial_and_cover_all_in_order() {
        let s = load_dataset(&desc(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = s.search_val.shuffled_batches(10, &mut rng);
        assert_eq!(b.len(), s.search_val.len() / 10);
        let o = s.search_val.ordered_batches(10);
        assert_eq!(o.iter().map(|b| b.1.len()).sum::<usize>(), s.search_val.len());
    }
}
