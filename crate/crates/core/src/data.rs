//! Dataset loading (IDX, CSV), synthetic generators and preprocessing.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{DataError, Error, Result};
use crate::numeric::{Matrix, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples as columns of `x`, with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Matrix,
    pub labels: Option<Vec<usize>>,
    /// Extra labelings such as `"pose"` or `"expression"`.
    pub attributes: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            x,
            labels,
            attributes: BTreeMap::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::domain(format!("{} labels for {n} samples", l.len())));
            }
        }
        for (name, l) in &self.attributes {
            if l.len() != n {
                return Err(Error::domain(format!(
                    "attribute '{name}' has {} labels for {n} samples",
                    l.len()
                )));
            }
        }
        Ok(())
    }

    /// Sample count.
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    /// Number of distinct ground-truth labels.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().collect::<BTreeSet<_>>().len())
    }

    /// Keeps the given samples, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let pick = |l: &Vec<usize>| indices.iter().map(|&i| l[i]).collect::<Vec<_>>();
        Dataset {
            name: self.name.clone(),
            x: crate::numeric::select_columns(&self.x, indices),
            labels: self.labels.as_ref().map(pick),
            attributes: self
                .attributes
                .iter()
                .map(|(k, v)| (k.clone(), pick(v)))
                .collect(),
        }
    }
}

/// Relabels arbitrary ids onto `0..k` in increasing order.
pub fn compact_labels<T: Ord + Copy>(raw: &[T]) -> Vec<usize> {
    let ids: BTreeMap<T, usize> = raw
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    raw.iter().map(|v| ids[v]).collect()
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        Ok(IdxReader {
            path,
            bytes: std::fs::read(path)?,
        })
    }

    fn header(&self, expected_magic: u32, dims: usize) -> Result<Vec<usize>> {
        let need = 4 * (1 + dims);
        if self.bytes.len() < 4 {
            return Err(self.truncated(need));
        }
        let magic = u32::from_be_bytes(self.bytes[..4].try_into().unwrap());
        if magic != expected_magic {
            return Err(DataError::BadMagic {
                path: self.path.to_path_buf(),
                expected: expected_magic,
                found: magic,
            }
            .into());
        }
        if self.bytes.len() < need {
            return Err(self.truncated(need));
        }
        Ok((0..dims)
            .map(|d| {
                u32::from_be_bytes(self.bytes[4 + 4 * d..8 + 4 * d].try_into().unwrap()) as usize
            })
            .collect())
    }

    fn payload(&self, offset: usize, len: usize) -> Result<&[u8]> {
        let expected = offset + len;
        if self.bytes.len() < expected {
            return Err(self.truncated(expected));
        }
        if self.bytes.len() > expected {
            return Err(DataError::TrailingBytes {
                path: self.path.to_path_buf(),
                extra: self.bytes.len() - expected,
            }
            .into());
        }
        Ok(&self.bytes[offset..])
    }

    fn truncated(&self, expected: usize) -> Error {
        DataError::Truncated {
            path: self.path.to_path_buf(),
            expected,
            found: self.bytes.len(),
        }
        .into()
    }
}

/// Reads an IDX image file (and optionally its label file). Pixels are
/// scaled to `[0, 1]` and each image becomes one column.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let img = IdxReader::open(images)?;
    let dims = img.header(IDX_IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let m = rows * cols;
    let pixels = img.payload(16, n * m)?;
    let mut x = Matrix::zeros((m, n));
    for (i, image) in pixels.chunks_exact(m.max(1)).take(n).enumerate() {
        for (r, &b) in image.iter().enumerate() {
            x[[r, i]] = f64::from(b) / 255.0;
        }
    }
    let labels = match labels {
        Some(path) => {
            let lab = IdxReader::open(path)?;
            let count = lab.header(IDX_LABELS_MAGIC, 1)?[0];
            let raw = lab.payload(8, count)?;
            if count != n {
                return Err(DataError::CountMismatch {
                    images: n,
                    labels: count,
                }
                .into());
            }
            Some(raw.iter().map(|&b| b as usize).collect())
        }
        None => None,
    };
    let name = images
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, x, labels)
}

/// Reads a comma-separated file with one sample per row. A non-numeric first
/// row is taken as a header. With `has_labels` the last column holds integer
/// class ids, which are compacted onto `0..k`.
pub fn load_csv(path: &Path, has_labels: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, e))?;
    let parse_err = |line: usize, message: String| -> Error {
        DataError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        }
        .into()
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| csv_error(path, line, e))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Vec<Option<f64>> = record.iter().map(|f| f.parse::<f64>().ok()).collect();
        if idx == 0 && parsed.iter().any(Option::is_none) {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(
                    line,
                    format!("expected {w} fields, found {}", record.len()),
                ));
            }
            _ => {}
        }
        let mut values = Vec::with_capacity(record.len());
        for (col, (field, v)) in record.iter().zip(&parsed).enumerate() {
            match v {
                Some(v) if v.is_finite() => values.push(*v),
                _ => {
                    return Err(parse_err(
                        line,
                        format!("column {}: '{field}' is not a finite number", col + 1),
                    ));
                }
            }
        }
        if has_labels {
            let label = values
                .pop()
                .ok_or_else(|| parse_err(line, "missing label column".into()))?;
            if label.fract() != 0.0 {
                return Err(parse_err(line, format!("label {label} is not an integer")));
            }
            raw_labels.push(label as i64);
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(DataError::Empty {
            path: path.to_path_buf(),
        }
        .into());
    }
    let m = rows[0].len();
    if m == 0 {
        return Err(parse_err(1, "no feature columns".into()));
    }
    let mut x = Matrix::zeros((m, rows.len()));
    for (i, row) in rows.iter().enumerate() {
        for (r, &v) in row.iter().enumerate() {
            x[[r, i]] = v;
        }
    }
    let labels = has_labels.then(|| compact_labels(&raw_labels));
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(name, x, labels)
}

fn csv_error(path: &Path, line: usize, e: csv::Error) -> Error {
    if let csv::ErrorKind::Io(_) = e.kind() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::Io(io);
        }
        unreachable!()
    }
    DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
    .into()
}

/// Writes a dataset in the CSV dialect read by [`load_csv`].
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds.x.column(i).iter().map(|v| format!("{v}")).collect();
        if let Some(l) = &ds.labels {
            fields.push(l[i].to_string());
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `k` Gaussian clusters with unit within-cluster deviation, centered at
/// `separation` times random unit directions. Sample `i` belongs to cluster
/// `i mod k`, so sizes are balanced.
pub fn synth_blobs(m: usize, n: usize, k: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if k == 0 || k > n {
        return Err(Error::domain(format!(
            "need 1 <= clusters <= samples, got {k} and {n}"
        )));
    }
    let mut rng = Rng::new(seed);
    let centers: Vec<Vec<f64>> = (0..k).map(|_| random_unit(&mut rng, m)).collect();
    let mut x = Matrix::zeros((m, n));
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    for (i, &c) in labels.iter().enumerate() {
        for r in 0..m {
            x[[r, i]] = separation * centers[c][r] + rng.normal();
        }
    }
    Dataset::new(format!("blobs-{k}"), x, Some(labels))
}

/// Settings for [`synth_hierarchical`].
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalConfig {
    pub dim: usize,
    pub samples: usize,
    pub poses: usize,
    pub expressions: usize,
    pub identities: usize,
    /// Norm of the pose and expression offsets.
    pub separation: f64,
    /// Norm of the identity offsets.
    pub identity_separation: f64,
    /// Per-coordinate noise deviation.
    pub noise: f64,
}

impl Default for HierarchicalConfig {
    fn default() -> Self {
        HierarchicalConfig {
            dim: 60,
            samples: 1800,
            poses: 5,
            expressions: 6,
            identities: 30,
            separation: 6.0,
            identity_separation: 10.0,
            noise: 1.0,
        }
    }
}

/// Samples whose mean is the sum of a pose, an expression and an identity
/// offset, each living in its own block of coordinates. Attribute values are
/// drawn independently and uniformly. Identity is the primary label; pose and
/// expression are stored as attributes.
pub fn synth_hierarchical(cfg: &HierarchicalConfig, seed: u64) -> Result<Dataset> {
    let counts = [cfg.poses, cfg.expressions, cfg.identities];
    if counts.contains(&0) || cfg.dim < 3 {
        return Err(Error::domain(
            "attribute counts must be positive and dim at least 3",
        ));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::domain("noise must be nonnegative"));
    }
    let mut rng = Rng::new(seed);
    let block = cfg.dim / 3;
    let ranges = [0..block, block..2 * block, 2 * block..cfg.dim];
    let centers: Vec<Vec<Vec<f64>>> = counts
        .iter()
        .zip(&ranges)
        .map(|(&c, r)| (0..c).map(|_| random_unit(&mut rng, r.len())).collect())
        .collect();

    let mut x = Matrix::zeros((cfg.dim, cfg.samples));
    let mut labels = vec![Vec::with_capacity(cfg.samples); 3];
    let scales = [cfg.separation, cfg.separation, cfg.identity_separation];
    for i in 0..cfg.samples {
        for (a, range) in ranges.iter().enumerate() {
            let v = rng.below(counts[a]);
            labels[a].push(v);
            for (off, r) in range.clone().enumerate() {
                x[[r, i]] = scales[a] * centers[a][v][off];
            }
        }
        for r in 0..cfg.dim {
            x[[r, i]] += cfg.noise * rng.normal();
        }
    }
    let identity = labels.pop().unwrap();
    let expression = labels.pop().unwrap();
    let pose = labels.pop().unwrap();
    let mut ds = Dataset::new("hierarchical", x, Some(identity))?;
    ds.attributes.insert("pose".into(), pose);
    ds.attributes.insert("expression".into(), expression);
    Ok(ds)
}

/// Adds i.i.d. `N(0, s²)` noise to every entry. No clamping.
pub fn add_noise(ds: &Dataset, s: f64, seed: u64) -> Result<Dataset> {
    if !(s >= 0.0) {
        return Err(Error::domain(format!(
            "noise level must be nonnegative, got {s}"
        )));
    }
    let mut out = ds.clone();
    if s == 0.0 {
        return Ok(out);
    }
    let mut rng = Rng::new(seed);
    out.x.mapv_inplace(|v| v + s * rng.normal());
    Ok(out)
}

/// Scales each sample to unit Euclidean norm; zero samples stay zero.
pub fn normalize(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for mut col in out.x.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col /= norm;
        }
    }
    out
}
