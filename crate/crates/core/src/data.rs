//! Embedding datasets, their on-disk format, and a seeded synthetic generator.
//!
//! The file format is a little-endian binary: magic `TSLE`, format version
//! `u16`, dim `u32`, row count `u64`, then row-major `f32` payload. Labels
//! travel in an optional text sidecar at `<path>.labels` with one integer per
//! line (`-1` = unlabeled). Values are held as `f64` in memory but quantized
//! to `f32` at construction so that a save/load round trip is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TSLE";
pub const FORMAT_VERSION: u16 = 1;

/// Which split of the pipeline a set of rows belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Labeled in-distribution rows; every row carries a class label.
    LabeledId,
    /// Unlabeled mixture of ID and OOD rows.
    UnlabeledMix,
    /// In-distribution test rows.
    TestId,
    /// Out-of-distribution test rows.
    TestOod,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::LabeledId => "labeled_id",
            Role::UnlabeledMix => "unlabeled_mix",
            Role::TestId => "test_id",
            Role::TestOod => "test_ood",
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("feature dimension must be positive")]
    ZeroDim,
    #[error("row data length {len} is not a multiple of dim {dim}")]
    RaggedRows { len: usize, dim: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("value at row {row}, column {col} overflows 32-bit float range")]
    F32Overflow { row: usize, col: usize },
    #[error("role {role} requires a label for every row")]
    MissingLabels { role: &'static str },
    #[error("role {role} does not admit labels")]
    UnexpectedLabels { role: &'static str },
    #[error("label count {labels} does not match row count {rows}")]
    LabelCount { labels: usize, rows: usize },
    #[error("file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes (expected \"TSLE\")")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("truncated header (need {need} bytes, have {have})")]
    TruncatedHeader { need: usize, have: usize },
    #[error("truncated payload (expected {expected} values, payload holds {have})")]
    TruncatedPayload { expected: u64, have: u64 },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("non-finite value in payload at index {index}")]
    NonFinitePayload { index: usize },
    #[error("embedding file declares zero rows")]
    EmptyFile,
    #[error("embedding file dimensions overflow addressable memory")]
    SizeOverflow,
    #[error("label sidecar line {line}: cannot parse {text:?} as an integer")]
    LabelParse { line: usize, text: String },
    #[error("label sidecar line {line}: label {value} out of range (must be -1 or a class index)")]
    LabelOutOfRange { line: usize, value: i64 },
    #[error("label sidecar has {lines} lines for {rows} rows")]
    SidecarLineCount { lines: usize, rows: usize },
    #[error("label sidecar mixes labeled and unlabeled rows (first unlabeled at line {line})")]
    MixedLabels { line: usize },
    #[error("cannot save an empty embedding set")]
    SaveEmpty,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// A matrix of feature vectors with an optional per-row class label and a
/// dataset role.
///
/// Row values are quantized through `f32` at construction (the on-disk payload
/// width) and widened back to `f64`, so everything the library produces
/// round-trips through [`save_embeddings`]/[`load_embeddings`] bit-exactly.
/// A set may be empty in memory (the generator returns empty splits for zero
/// counts) but must hold at least one row to be saved or loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f64>,
    labels: Option<Vec<u32>>,
    role: Role,
}

impl EmbeddingSet {
    /// Builds a set from row-major data, validating finiteness, label/role
    /// consistency, and quantizing each value through `f32`.
    pub fn new(
        role: Role,
        dim: usize,
        data: Vec<f64>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::ZeroDim);
        }
        if data.len() % dim != 0 {
            return Err(DataError::RaggedRows { len: data.len(), dim });
        }
        let rows = data.len() / dim;
        match (&labels, role) {
            (None, Role::LabeledId) => {
                return Err(DataError::MissingLabels { role: role.as_str() })
            }
            (Some(_), Role::LabeledId) => {}
            (Some(_), _) => return Err(DataError::UnexpectedLabels { role: role.as_str() }),
            (None, _) => {}
        }
        if let Some(ref l) = labels {
            if l.len() != rows {
                return Err(DataError::LabelCount { labels: l.len(), rows });
            }
        }
        let mut quantized = data;
        for (i, v) in quantized.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(DataError::NonFinite { row: i / dim, col: i % dim });
            }
            let narrow = *v as f32;
            if !narrow.is_finite() {
                return Err(DataError::F32Overflow { row: i / dim, col: i % dim });
            }
            *v = narrow as f64;
        }
        Ok(Self { dim, data: quantized, labels, role })
    }

    pub fn from_rows(
        role: Role,
        rows: &[Vec<f64>],
        labels: Option<Vec<u32>>,
    ) -> Result<Self, DataError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(DataError::RaggedRows { len: r.len(), dim });
            }
            data.extend_from_slice(r);
        }
        Self::new(role, dim, data, labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Number of distinct classes, as max label + 1. Zero for unlabeled sets.
    pub fn n_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    /// Retags the set with a new role. The file format does not store roles,
    /// so callers retag loaded sets by provenance; moving to or from
    /// `LabeledId` is rejected when the labels do not match the target role.
    pub fn with_role(mut self, role: Role) -> Result<Self, DataError> {
        match (&self.labels, role) {
            (None, Role::LabeledId) => Err(DataError::MissingLabels { role: role.as_str() }),
            (Some(_), Role::LabeledId) | (None, _) => {
                self.role = role;
                Ok(self)
            }
            (Some(_), _) => Err(DataError::UnexpectedLabels { role: role.as_str() }),
        }
    }

    /// Concatenates labeled rows followed by unlabeled rows into the mining
    /// pool. Labels are dropped; index order is the mining convention
    /// (labeled indices come first).
    pub fn concat_pool(labeled: &EmbeddingSet, unlabeled: &EmbeddingSet) -> Result<Self, DataError> {
        if labeled.dim != unlabeled.dim {
            return Err(DataError::RaggedRows { len: unlabeled.dim, dim: labeled.dim });
        }
        let mut data = Vec::with_capacity(labeled.data.len() + unlabeled.data.len());
        data.extend_from_slice(&labeled.data);
        data.extend_from_slice(&unlabeled.data);
        Self::new(Role::UnlabeledMix, labeled.dim, data, None)
    }
}

// ---------------------------------------------------------------------------
// Binary format
// ---------------------------------------------------------------------------

/// Encodes a row-major `f64` matrix into the embedding file layout. Values
/// are narrowed to `f32`.
pub fn encode_matrix(dim: usize, rows: usize, data: &[f64]) -> Vec<u8> {
    debug_assert_eq!(data.len(), dim * rows);
    let mut out = Vec::with_capacity(18 + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Decodes the embedding file layout. Returns `(dim, rows, values)` with the
/// payload widened to `f64`. Rejects bad magic, unknown versions, truncated
/// or oversized payloads, zero rows, and non-finite values.
pub fn decode_matrix(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), DataError> {
    const HEADER: usize = 4 + 2 + 4 + 8;
    if bytes.len() < HEADER {
        return Err(DataError::TruncatedHeader { need: HEADER, have: bytes.len() });
    }
    if &bytes[0..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(DataError::BadVersion(version));
    }
    let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as u64;
    let rows = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    if dim == 0 {
        return Err(DataError::ZeroDim);
    }
    if rows == 0 {
        return Err(DataError::EmptyFile);
    }
    let expected = dim.checked_mul(rows).ok_or(DataError::SizeOverflow)?;
    if expected > (usize::MAX / 8) as u64 {
        return Err(DataError::SizeOverflow);
    }
    let have = (bytes.len() - HEADER) as u64 / 4;
    let payload_bytes = expected
        .checked_mul(4)
        .ok_or(DataError::SizeOverflow)? as usize;
    if (bytes.len() - HEADER) < payload_bytes {
        return Err(DataError::TruncatedPayload { expected, have });
    }
    if (bytes.len() - HEADER) > payload_bytes {
        return Err(DataError::TrailingBytes { extra: bytes.len() - HEADER - payload_bytes });
    }
    let mut data = Vec::with_capacity(expected as usize);
    for (i, chunk) in bytes[HEADER..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(DataError::NonFinitePayload { index: i });
        }
        data.push(v as f64);
    }
    Ok((dim as usize, rows as usize, data))
}

/// Parses a label sidecar. Returns `Some(labels)` when every line is a class
/// index, `None` when every line is `-1`. Mixed files are rejected, and the
/// line count must equal the row count either way.
pub fn parse_labels_text(text: &str, rows: usize) -> Result<Option<Vec<u32>>, DataError> {
    let mut labels = Vec::with_capacity(rows);
    let mut unlabeled_at = None;
    let mut lines = 0usize;
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        lines += 1;
        let value: i64 = trimmed
            .parse()
            .map_err(|_| DataError::LabelParse { line: idx + 1, text: trimmed.to_string() })?;
        if value == -1 {
            unlabeled_at.get_or_insert(idx + 1);
        } else if value < 0 || value > u32::MAX as i64 {
            return Err(DataError::LabelOutOfRange { line: idx + 1, value });
        } else {
            labels.push(value as u32);
        }
    }
    match unlabeled_at {
        Some(line) if !labels.is_empty() => Err(DataError::MixedLabels { line }),
        _ if lines != rows => Err(DataError::SidecarLineCount { lines, rows }),
        Some(_) => Ok(None),
        None => Ok(Some(labels)),
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".labels");
    PathBuf::from(os)
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.to_path_buf(), source }
}

/// Loads an embedding file plus its optional `.labels` sidecar. Sets with a
/// sidecar load as `LabeledId`; everything else loads as `UnlabeledMix` and
/// can be retagged with [`EmbeddingSet::with_role`].
pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (dim, rows, data) = decode_matrix(&bytes)?;
    let sidecar = sidecar_path(path);
    let labels = if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| io_err(&sidecar, e))?;
        parse_labels_text(&text, rows)?
    } else {
        None
    };
    let role = if labels.is_some() { Role::LabeledId } else { Role::UnlabeledMix };
    EmbeddingSet::new(role, dim, data, labels)
}

/// [`load_embeddings`] followed by a role retag.
pub fn load_embeddings_as(path: &Path, role: Role) -> Result<EmbeddingSet, DataError> {
    load_embeddings(path)?.with_role(role)
}

/// Writes the set to `path` (and labels to `path.labels` when present). A
/// stale sidecar from a previous labeled file at the same path is removed so
/// that save/load round-trips exactly.
pub fn save_embeddings(set: &EmbeddingSet, path: &Path) -> Result<(), DataError> {
    if set.is_empty() {
        return Err(DataError::SaveEmpty);
    }
    let bytes = encode_matrix(set.dim, set.n_rows(), &set.data);
    fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    let sidecar = sidecar_path(path);
    match set.labels {
        Some(ref labels) => {
            let mut text = String::with_capacity(labels.len() * 4);
            for l in labels {
                text.push_str(&l.to_string());
                text.push('\n');
            }
            fs::write(&sidecar, text).map_err(|e| io_err(&sidecar, e))?;
        }
        None => {
            if sidecar.exists() {
                fs::remove_file(&sidecar).map_err(|e| io_err(&sidecar, e))?;
            }
        }
    }
    Ok(())
}

/// Saves a bare matrix (projector weights, covariance, centers) in the
/// embedding file layout.
pub fn save_matrix(path: &Path, dim: usize, rows: usize, data: &[f64]) -> Result<(), DataError> {
    if rows == 0 || dim == 0 {
        return Err(DataError::SaveEmpty);
    }
    fs::write(path, encode_matrix(dim, rows, data)).map_err(|e| io_err(path, e))
}

/// Loads a bare matrix saved with [`save_matrix`].
pub fn load_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>), DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_matrix(&bytes)
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Sample counts for one synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticCounts {
    pub n_labeled_per_class: usize,
    pub n_unlabeled_id_per_class: usize,
    pub n_unlabeled_ood: usize,
    pub n_test_id: usize,
    pub n_test_ood: usize,
}

/// A seeded Gaussian-mixture benchmark: `num_classes` ID clusters with
/// centers spread by `id_center_scale`, and `ood_modes` OOD clusters placed
/// at distance `ood_offset` from the ID centroid along random directions.
///
/// `intrinsic_dim` bounds the subspace everything is drawn in (centers,
/// mode directions, and per-point noise occupy the first `intrinsic_dim`
/// coordinates; the rest are zero). Real embedding features concentrate near
/// a low-dimensional set, and neighbor structure only carries signal when
/// near-pair distances sit well below far-pair distances, so desk-scale
/// benchmarks use `intrinsic_dim` well under `dim`.
///
/// With `share_ood` set, the unlabeled mixture's OOD rows and the OOD test
/// rows are the same sample (requires matching counts); otherwise the two are
/// drawn independently.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub intrinsic_dim: usize,
    pub id_center_scale: f64,
    pub class_std: f64,
    pub ood_modes: usize,
    pub ood_offset: f64,
    pub counts: SyntheticCounts,
    pub share_ood: bool,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::InvalidSpec(msg));
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.dim == 0 {
            return fail("dim must be positive".into());
        }
        if self.intrinsic_dim == 0 || self.intrinsic_dim > self.dim {
            return fail(format!(
                "intrinsic_dim must lie in 1..=dim ({}), got {}",
                self.dim, self.intrinsic_dim
            ));
        }
        if !(self.id_center_scale > 0.0) {
            return fail("id_center_scale must be > 0".into());
        }
        if !(self.class_std > 0.0) {
            return fail("class_std must be > 0".into());
        }
        if self.ood_modes == 0 {
            return fail("ood_modes must be positive".into());
        }
        if !(self.ood_offset > 0.0) {
            return fail("ood_offset must be > 0".into());
        }
        if self.counts.n_labeled_per_class < 2 {
            return fail("n_labeled_per_class must be >= 2 (covariance needs two samples)".into());
        }
        if self.share_ood && self.counts.n_unlabeled_ood != self.counts.n_test_ood {
            return fail(format!(
                "share_ood requires n_unlabeled_ood == n_test_ood (got {} and {})",
                self.counts.n_unlabeled_ood, self.counts.n_test_ood
            ));
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha12Rng, dim: usize, active: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for slot in v.iter_mut().take(active) {
        *slot = rng.sample::<f64, _>(StandardNormal);
    }
    v
}

fn gaussian_point(rng: &mut ChaCha12Rng, center: &[f64], std: f64, active: usize) -> Vec<f64> {
    let mut v = center.to_vec();
    for slot in v.iter_mut().take(active) {
        *slot += std * rng.sample::<f64, _>(StandardNormal);
    }
    v
}

/// Generates the four splits of a synthetic benchmark. Pure function of the
/// spec (including its seed): the draw order is fixed, so identical specs
/// give bit-identical outputs.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(EmbeddingSet, EmbeddingSet, EmbeddingSet, EmbeddingSet), DataError> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let k = spec.num_classes;
    let dim = spec.dim;
    let active = spec.intrinsic_dim;
    let c = spec.counts;

    // Draw order: ID centers, OOD mode centers, labeled, unlabeled-ID,
    // OOD sample(s), test-ID, then the unlabeled shuffle.
    let id_centers: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            normal_vec(&mut rng, dim, active).iter().map(|v| v * spec.id_center_scale).collect()
        })
        .collect();
    let mut centroid = vec![0.0; dim];
    for center in &id_centers {
        for (acc, v) in centroid.iter_mut().zip(center) {
            *acc += v / k as f64;
        }
    }
    let ood_centers: Vec<Vec<f64>> = (0..spec.ood_modes)
        .map(|_| {
            let dir = normal_vec(&mut rng, dim, active);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            centroid
                .iter()
                .zip(&dir)
                .map(|(c, d)| c + spec.ood_offset * d / norm)
                .collect()
        })
        .collect();

    let mut labeled_rows = Vec::with_capacity(k * c.n_labeled_per_class);
    let mut labels = Vec::with_capacity(k * c.n_labeled_per_class);
    for (class, center) in id_centers.iter().enumerate() {
        for _ in 0..c.n_labeled_per_class {
            labeled_rows.push(gaussian_point(&mut rng, center, spec.class_std, active));
            labels.push(class as u32);
        }
    }

    let mut unlabeled_rows = Vec::with_capacity(k * c.n_unlabeled_id_per_class + c.n_unlabeled_ood);
    for center in &id_centers {
        for _ in 0..c.n_unlabeled_id_per_class {
            unlabeled_rows.push(gaussian_point(&mut rng, center, spec.class_std, active));
        }
    }

    let ood_point = |rng: &mut ChaCha12Rng, i: usize| {
        gaussian_point(rng, &ood_centers[i % spec.ood_modes], spec.class_std, active)
    };
    let test_ood_rows: Vec<Vec<f64>>;
    if spec.share_ood {
        let shared: Vec<Vec<f64>> = (0..c.n_test_ood).map(|i| ood_point(&mut rng, i)).collect();
        unlabeled_rows.extend(shared.iter().cloned());
        test_ood_rows = shared;
    } else {
        for i in 0..c.n_unlabeled_ood {
            let p = ood_point(&mut rng, i);
            unlabeled_rows.push(p);
        }
        test_ood_rows = (0..c.n_test_ood).map(|i| ood_point(&mut rng, i)).collect();
    }

    let test_id_rows: Vec<Vec<f64>> = (0..c.n_test_id)
        .map(|i| gaussian_point(&mut rng, &id_centers[i % k], spec.class_std, active))
        .collect();

    unlabeled_rows.shuffle(&mut rng);

    // Flatten explicitly so zero-count splits still carry the spec's dim.
    let flat = |rows: &[Vec<f64>]| rows.iter().flatten().copied().collect::<Vec<f64>>();
    let labeled = EmbeddingSet::new(Role::LabeledId, dim, flat(&labeled_rows), Some(labels))?;
    let unlabeled = EmbeddingSet::new(Role::UnlabeledMix, dim, flat(&unlabeled_rows), None)?;
    let test_id = EmbeddingSet::new(Role::TestId, dim, flat(&test_id_rows), None)?;
    let test_ood = EmbeddingSet::new(Role::TestOod, dim, flat(&test_ood_rows), None)?;
    Ok((labeled, unlabeled, test_id, test_ood))
}
