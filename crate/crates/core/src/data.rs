//! Feature and label files, plus a clustered synthetic generator.
//!
//! Feature files (`MFEA`) are a fixed 18-byte header followed by a row-major
//! little-endian payload:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MFEA"
//! 4       1     version (1)
//! 5       8     N      u64 LE
//! 13      4     d      u32 LE
//! 17      1     dtype  (0 = f32, 1 = f64)
//! 18      ...   N·d values
//! ```
//!
//! Activation files use the same container with `d` read as the latent
//! count, sample-major (`N x M`), and are never normalized.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::types::{normalize_rows, ActivationMatrix, FeatureMatrix};

pub const MAGIC: [u8; 4] = *b"MFEA";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: u64 = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn width(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub n_samples: u64,
    pub dim: u32,
    pub dtype: Dtype,
}

impl Header {
    pub fn payload_len(&self) -> Option<u64> {
        self.n_samples
            .checked_mul(self.dim as u64)?
            .checked_mul(self.dtype.width())
    }

    fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut out = [0u8; HEADER_LEN as usize];
        out[..4].copy_from_slice(&MAGIC);
        out[4] = VERSION;
        out[5..13].copy_from_slice(&self.n_samples.to_le_bytes());
        out[13..17].copy_from_slice(&self.dim.to_le_bytes());
        out[17] = self.dtype as u8;
        out
    }

    fn decode(buf: &[u8; HEADER_LEN as usize]) -> Result<Self> {
        let magic: [u8; 4] = buf[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        if buf[4] != VERSION {
            return Err(Error::UnsupportedVersion(buf[4]));
        }
        let header = Header {
            n_samples: u64::from_le_bytes(buf[5..13].try_into().expect("8 bytes")),
            dim: u32::from_le_bytes(buf[13..17].try_into().expect("4 bytes")),
            dtype: Dtype::from_code(buf[17])?,
        };
        if header.n_samples == 0 || header.dim == 0 {
            return Err(Error::Empty {
                rows: header.n_samples as usize,
                cols: header.dim as usize,
            });
        }
        Ok(header)
    }
}

/// Serializes `values` (`N x d`) in the given dtype. f32 output rounds.
pub fn encode_matrix(values: &Array2<f64>, dtype: Dtype) -> Result<Vec<u8>> {
    let (n, d) = values.dim();
    if n == 0 || d == 0 {
        return Err(Error::Empty { rows: n, cols: d });
    }
    let header = Header {
        n_samples: n as u64,
        dim: u32::try_from(d).map_err(|_| Error::InvalidConfig("dimension exceeds u32".into()))?,
        dtype,
    };
    let mut out = Vec::with_capacity(HEADER_LEN as usize + n * d * dtype.width() as usize);
    out.extend_from_slice(&header.encode());
    for &v in values.as_standard_layout().iter() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn write_matrix(path: &Path, values: &Array2<f64>, dtype: Dtype) -> Result<()> {
    let bytes = encode_matrix(values, dtype)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn write_features(path: &Path, features: &FeatureMatrix, dtype: Dtype) -> Result<()> {
    write_matrix(path, features.as_array(), dtype)
}

/// Streams rows out of one file. Each chunk is widened to f64.
pub struct MatrixReader {
    src: BufReader<File>,
    header: Header,
    remaining: u64,
}

impl MatrixReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let file_len = file.metadata()?.len();
        let mut src = BufReader::new(file);
        let mut raw = [0u8; HEADER_LEN as usize];
        src.read_exact(&mut raw).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::TruncatedPayload {
                expected: HEADER_LEN,
                found: file_len,
            },
            _ => Error::Io(e),
        })?;
        let header = Header::decode(&raw)?;
        let expected = header
            .payload_len()
            .and_then(|p| p.checked_add(HEADER_LEN))
            .ok_or(Error::TruncatedPayload {
                expected: u64::MAX,
                found: file_len,
            })?;
        if file_len < expected {
            return Err(Error::TruncatedPayload {
                expected: expected - HEADER_LEN,
                found: file_len.saturating_sub(HEADER_LEN),
            });
        }
        if file_len > expected {
            return Err(Error::TrailingBytes(file_len - expected));
        }
        Ok(MatrixReader {
            src,
            header,
            remaining: header.n_samples,
        })
    }

    pub fn header(&self) -> Header {
        self.header
    }

    /// Reads up to `rows` more rows; `None` once the payload is exhausted.
    pub fn next_chunk(&mut self, rows: usize) -> Result<Option<Array2<f64>>> {
        if self.remaining == 0 {
            return Ok(None);
        }
        let take = (rows.max(1) as u64).min(self.remaining) as usize;
        let d = self.header.dim as usize;
        let width = self.header.dtype.width() as usize;
        let mut bytes = vec![0u8; take * d * width];
        self.src.read_exact(&mut bytes)?;
        self.remaining -= take as u64;
        let values: Vec<f64> = match self.header.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let chunk = Array2::from_shape_vec((take, d), values).expect("chunk shape");
        if let Some(i) = chunk.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("file payload value {i} of chunk"),
            });
        }
        Ok(Some(chunk))
    }

    /// Iterator over unit-normalized feature chunks of `rows` samples.
    pub fn feature_chunks(self, rows: usize) -> FeatureChunks {
        FeatureChunks { reader: self, rows }
    }
}

pub struct FeatureChunks {
    reader: MatrixReader,
    rows: usize,
}

impl Iterator for FeatureChunks {
    type Item = Result<FeatureMatrix>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.reader.next_chunk(self.rows) {
            Ok(Some(raw)) => Some(normalize_rows(raw)),
            Ok(None) => None,
            Err(e) => Some(Err(e)),
        }
    }
}

/// Whole payload as stored, widened to f64, without normalization.
pub fn read_matrix_raw(path: &Path) -> Result<Array2<f64>> {
    let mut reader = MatrixReader::open(path)?;
    let n = reader.header.n_samples as usize;
    Ok(reader.next_chunk(n)?.expect("non-empty file"))
}

/// Reads a feature file and unit-normalizes every row.
pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    normalize_rows(read_matrix_raw(path)?)
}

/// Reads a sample-major activation file into latent-major form.
pub fn read_activations(path: &Path) -> Result<ActivationMatrix> {
    ActivationMatrix::from_sample_major(read_matrix_raw(path)?.view())
}

pub fn write_activations(path: &Path, a: &ActivationMatrix, dtype: Dtype) -> Result<()> {
    write_matrix(path, &a.view().t().to_owned(), dtype)
}

/// Parses labels: one non-negative integer per line, or CSV rows
/// `index,class_id` covering `0..N` exactly once (a header line is allowed).
pub fn parse_labels(text: &str, n_samples: usize) -> Result<Vec<usize>> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let is_csv = lines.iter().any(|(_, l)| l.contains(','));
    let parse = |lineno: usize, s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::Labels(format!("line {lineno}: expected a non-negative integer, got {s:?}")))
    };

    let labels = if is_csv {
        let mut slots: Vec<Option<usize>> = vec![None; n_samples];
        for (idx, &(lineno, line)) in lines.iter().enumerate() {
            let mut fields = line.split(',');
            let (a, b) = match (fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), None) => (a, b),
                _ => return Err(Error::Labels(format!("line {lineno}: expected index,class_id"))),
            };
            let index = match parse(lineno, a) {
                Ok(i) => i,
                Err(_) if idx == 0 => continue,
                Err(e) => return Err(e),
            };
            let class = parse(lineno, b)?;
            let slot = slots
                .get_mut(index)
                .ok_or_else(|| Error::Labels(format!("line {lineno}: index {index} out of range")))?;
            if slot.replace(class).is_some() {
                return Err(Error::Labels(format!("line {lineno}: duplicate index {index}")));
            }
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| Error::Labels(format!("missing label for sample {i}"))))
            .collect::<Result<Vec<_>>>()?
    } else {
        lines.iter().map(|&(n, l)| parse(n, l)).collect::<Result<Vec<_>>>()?
    };
    if labels.len() != n_samples {
        return Err(Error::Labels(format!(
            "expected {n_samples} labels, found {}",
            labels.len()
        )));
    }
    Ok(labels)
}

pub fn read_labels(path: &Path, n_samples: usize) -> Result<Vec<usize>> {
    parse_labels(&std::fs::read_to_string(path)?, n_samples)
}

pub fn encode_labels(labels: &[usize]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    std::fs::write(path, encode_labels(labels))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub samples_per_cluster: usize,
    pub dim: usize,
    /// Expected Euclidean norm of the noise vector added to a center.
    pub within_cluster_noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Cluster-major: samples `c·S .. (c+1)·S` belong to cluster `c`.
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
    /// `K x d` unit centers.
    pub centers: Array2<f64>,
}

/// Center candidates tried per cluster before giving up.
pub const CENTER_ATTEMPTS: usize = 10_000;
/// Centers must be pairwise below this cosine.
pub const MAX_CENTER_COSINE: f64 = 0.5;

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Option<Vec<f64>> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 1e-12).then(|| v.into_iter().map(|x| x / norm).collect())
}

/// Gaussian clusters around rejection-sampled unit centers.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.n_clusters == 0 || spec.samples_per_cluster == 0 || spec.dim == 0 {
        return Err(Error::InvalidConfig(
            "synthetic data needs at least one cluster, sample and dimension".into(),
        ));
    }
    if !(spec.within_cluster_noise >= 0.0 && spec.within_cluster_noise.is_finite()) {
        return Err(Error::InvalidConfig("within_cluster_noise must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, d) = (spec.n_clusters, spec.dim);

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    while centers.len() < k {
        let mut placed = false;
        for _ in 0..CENTER_ATTEMPTS {
            let Some(c) = unit_gaussian(&mut rng, d) else { continue };
            let ok = centers
                .iter()
                .all(|o| o.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() < MAX_CENTER_COSINE);
            if ok {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::CenterSampling {
                wanted: k,
                dim: d,
                attempts: CENTER_ATTEMPTS,
            });
        }
    }

    let std = spec.within_cluster_noise / (d as f64).sqrt();
    let n = k * spec.samples_per_cluster;
    let mut raw = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in raw.axis_iter_mut(Axis(0)).enumerate() {
        let c = i / spec.samples_per_cluster;
        labels.push(c);
        for (x, &m) in row.iter_mut().zip(&centers[c]) {
            let eps: f64 = if std > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            *x = m + std * eps;
        }
    }
    // Zero noise: keep centers verbatim rather than re-normalizing.
    let features = if std > 0.0 {
        normalize_rows(raw)?
    } else {
        FeatureMatrix::from_unit_rows(raw)
    };
    let centers = Array2::from_shape_vec((k, d), centers.concat()).expect("center shape");
    Ok(SyntheticData {
        features,
        labels,
        centers,
    })
}
