//! Embedding matrices and the `.hemb` on-disk format.
//!
//! Layout (little-endian):
//!
//! | offset | size | field                                   |
//! |-------:|-----:|-----------------------------------------|
//! | 0      | 8    | magic `HFTTEMB1`                        |
//! | 8      | 4    | `u32` version (= 1)                     |
//! | 12     | 4    | `u32` dim                               |
//! | 16     | 8    | `u64` count                             |
//! | 24     | 1    | `u8` normalized (0/1)                   |
//! | 25     | 1    | `u8` modality (0 text, 1 image, 2 synthetic) |
//! | 26     | 4    | `f32` temperature                       |
//! | 30     | ...  | `count * dim` `f32`, row-major          |
//!
//! An optional sidecar `<name>.labels.txt` holds one UTF-8 label per row.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HFTTEMB1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 30;

/// Logit temperature used when a file carries none (stored as 0).
pub const DEFAULT_TEMPERATURE: f32 = 0.01;

/// Allowed deviation from unit L2 norm for rows of a normalized store.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Synthetic,
}

impl Modality {
    fn to_byte(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
            Modality::Synthetic => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::Text),
            1 => Some(Modality::Image),
            2 => Some(Modality::Synthetic),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "synthetic" => Ok(Modality::Synthetic),
            other => Err(Error::validation(format!("unknown modality {other:?}"))),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Rounds every value to the nearest `f32`, the precision embeddings are persisted at.
pub(crate) fn snap_to_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

/// An immutable `count x dim` matrix of embeddings plus its manifest.
///
/// Values are kept at their on-disk `f32` precision so that a save/load cycle
/// is bit-exact; computation widens rows to `f64` via [`EmbeddingStore::row_f64`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    count: usize,
    normalized: bool,
    temperature: f32,
    modality: Modality,
    data: Vec<f32>,
    labels: Option<Vec<String>>,
}

impl EmbeddingStore {
    pub fn new(
        dim: usize,
        data: Vec<f32>,
        normalized: bool,
        temperature: f32,
        modality: Modality,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("embedding dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::validation(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        let store = EmbeddingStore {
            dim,
            count: data.len() / dim,
            normalized,
            temperature,
            modality,
            data,
            labels: None,
        };
        store.validate()?;
        Ok(store)
    }

    /// Builds a normalized store from `f64` rows that are already unit length.
    pub fn from_unit_rows(
        dim: usize,
        rows: &[f64],
        temperature: f32,
        modality: Modality,
    ) -> Result<Self> {
        let data = rows.iter().map(|&v| v as f32).collect();
        Self::new(dim, data, true, temperature, modality)
    }

    pub fn empty(dim: usize, temperature: f32, modality: Modality) -> Result<Self> {
        Self::new(dim, Vec::new(), true, temperature, modality)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        validate_labels(&labels, self.count)?;
        self.labels = Some(labels);
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::validation(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        for (i, row) in self.data.chunks_exact(self.dim).enumerate() {
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "non-finite value at row {i}, column {j}"
                )));
            }
            if self.normalized {
                let norm = row
                    .iter()
                    .map(|&v| f64::from(v) * f64::from(v))
                    .sum::<f64>()
                    .sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(Error::validation(format!(
                        "row {i} has norm {norm}, expected 1 within {UNIT_NORM_TOLERANCE}"
                    )));
                }
            }
        }
        if let Some(labels) = &self.labels {
            validate_labels(labels, self.count)?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn temperature(&self) -> f32 {
        self.temperature
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// The whole matrix widened to `f64`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Row identifiers: labels when present, otherwise the row index.
    pub fn ids(&self) -> Vec<String> {
        match &self.labels {
            Some(l) => l.clone(),
            None => (0..self.count).map(|i| i.to_string()).collect(),
        }
    }

    /// A new store containing the given rows in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.count {
                return Err(Error::validation(format!(
                    "row index {i} out of range for {} rows",
                    self.count
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i].clone()).collect());
        Ok(EmbeddingStore {
            count: indices.len(),
            data,
            labels,
            ..self.clone_manifest()
        })
    }

    /// Stacks `other` below `self`. Manifests must agree on dim; the result
    /// keeps `self`'s temperature and modality.
    pub fn concat(&self, other: &EmbeddingStore) -> Result<Self> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: other.dim,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).cloned().collect()),
            _ => None,
        };
        Ok(EmbeddingStore {
            count: self.count + other.count,
            normalized: self.normalized && other.normalized,
            data,
            labels,
            ..self.clone_manifest()
        })
    }

    fn clone_manifest(&self) -> Self {
        EmbeddingStore {
            dim: self.dim,
            count: 0,
            normalized: self.normalized,
            temperature: self.temperature,
            modality: self.modality,
            data: Vec::new(),
            labels: None,
        }
    }
}

fn validate_labels(labels: &[String], count: usize) -> Result<()> {
    if labels.len() != count {
        return Err(Error::validation(format!(
            "{} labels for {count} rows",
            labels.len()
        )));
    }
    if let Some(i) = labels.iter().position(|l| l.contains(['\n', '\r'])) {
        return Err(Error::validation(format!(
            "label {i} contains a line break"
        )));
    }
    Ok(())
}

/// `<dir>/<stem>.labels.txt` for `<dir>/<stem>.hemb`.
pub fn labels_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.labels.txt"))
}

pub fn encode_store(store: &EmbeddingStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + store.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(store.count as u64).to_le_bytes());
    buf.push(u8::from(store.normalized));
    buf.push(store.modality.to_byte());
    buf.extend_from_slice(&store.temperature.to_le_bytes());
    for v in &store.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_store(bytes: &[u8], path: &Path) -> Result<EmbeddingStore> {
    let format = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };

    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format("missing HFTTEMB1 magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!(
            "header truncated at {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != FORMAT_VERSION {
        return Err(format(format!("unsupported version {version}")));
    }
    let dim = u32_at(12) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let normalized = match bytes[24] {
        0 => false,
        1 => true,
        b => return Err(format(format!("normalized flag must be 0 or 1, got {b}"))),
    };
    let modality = Modality::from_byte(bytes[25])
        .ok_or_else(|| format(format!("unknown modality byte {}", bytes[25])))?;
    let mut temperature = f32::from_le_bytes(bytes[26..30].try_into().unwrap());
    if temperature == 0.0 {
        temperature = DEFAULT_TEMPERATURE;
    }
    if dim == 0 {
        return Err(format("dimension is zero".into()));
    }

    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(dim))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| corrupt(format!("payload size overflows: {count} x {dim}")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(corrupt(format!(
            "payload truncated: {} of {expected} bytes",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(corrupt(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingStore::new(dim, data, normalized, temperature, modality)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub(crate) fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Writes `store` to `path` (and its labels sidecar, if any) atomically.
pub fn save_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    store.validate()?;
    write_atomic(path, &encode_store(store))?;
    let sidecar = labels_path(path);
    match &store.labels {
        Some(labels) => {
            let mut text = String::new();
            for l in labels {
                text.push_str(l);
                text.push('\n');
            }
            write_atomic(&sidecar, text.as_bytes())?;
        }
        None => {
            if sidecar.exists() {
                fs::remove_file(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            }
        }
    }
    Ok(())
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let store = decode_store(&bytes, path)?;
    let sidecar = labels_path(path);
    if !sidecar.exists() {
        return Ok(store);
    }
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let labels: Vec<String> = if text.is_empty() {
        Vec::new()
    } else {
        text.strip_suffix('\n')
            .unwrap_or(&text)
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_owned())
            .collect()
    };
    if labels.len() != store.count {
        return Err(Error::Corrupt {
            path: sidecar,
            reason: format!("{} labels for {} rows", labels.len(), store.count),
        });
    }
    store.with_labels(labels)
}

/// Scales every row of a row-major `dim`-column matrix to unit L2 norm.
pub fn normalize_rows(matrix: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !matrix.len().is_multiple_of(dim) {
        return Err(Error::validation(format!(
            "{} values do not form rows of dimension {dim}",
            matrix.len()
        )));
    }
    let mut out = matrix.to_vec();
    for (i, row) in out.chunks_exact_mut(dim).enumerate() {
        let norm = l2_norm(row);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("row {i}")));
        }
        if norm == 0.0 {
            return Err(Error::Degenerate(format!("row {i} is all zeros")));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(out)
}

/// The frozen in-distribution text embeddings, one per task class or phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEmbeddings {
    dim: usize,
    names: Vec<String>,
    data: Vec<f64>,
}

impl TaskEmbeddings {
    /// Rows are rounded to `f32` so the embeddings persist losslessly.
    pub fn new(dim: usize, names: Vec<String>, mut data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("embedding dimension must be positive"));
        }
        if names.is_empty() {
            return Err(Error::validation("at least one task embedding is required"));
        }
        if data.len() != names.len() * dim {
            return Err(Error::validation(format!(
                "{} values for {} task embeddings of dimension {dim}",
                data.len(),
                names.len()
            )));
        }
        snap_to_f32(&mut data);
        for (i, row) in data.chunks_exact(dim).enumerate() {
            let norm = l2_norm(row);
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::validation(format!(
                    "task embedding {i} has norm {norm}"
                )));
            }
        }
        Ok(TaskEmbeddings { dim, names, data })
    }

    /// Uses each row of `store` as one task embedding, labels as names.
    pub fn from_store(store: &EmbeddingStore) -> Result<Self> {
        let names = store
            .labels()
            .map(<[String]>::to_vec)
            .unwrap_or_else(|| (0..store.count()).map(|i| format!("task_{i}")).collect());
        Self::new(store.dim(), names, store.to_f64())
    }

    pub fn to_store(&self, temperature: f32) -> Result<EmbeddingStore> {
        EmbeddingStore::from_unit_rows(self.dim, &self.data, temperature, Modality::Text)?
            .with_labels(self.names.clone())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }
}

/// A named group of prompt embeddings to be ensembled into one task embedding.
#[derive(Debug, Clone)]
pub struct PromptGroup {
    pub name: String,
    pub members: Vec<Vec<f64>>,
}

impl PromptGroup {
    pub fn new(name: impl Into<String>, members: Vec<Vec<f64>>) -> Self {
        PromptGroup {
            name: name.into(),
            members,
        }
    }
}

/// Prompt ensembling: each group becomes the renormalized mean of its members.
pub fn build_task_embeddings(groups: &[PromptGroup]) -> Result<TaskEmbeddings> {
    let dim = groups
        .iter()
        .flat_map(|g| g.members.first())
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::validation("no prompt groups with members"))?;
    let mut data = Vec::with_capacity(groups.len() * dim);
    for group in groups {
        if group.members.is_empty() {
            return Err(Error::validation(format!(
                "prompt group {:?} is empty",
                group.name
            )));
        }
        let mut mean = vec![0.0; dim];
        for m in &group.members {
            if m.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: m.len(),
                });
            }
            for (acc, v) in mean.iter_mut().zip(m) {
                *acc += v;
            }
        }
        let n = group.members.len() as f64;
        mean.iter_mut().for_each(|v| *v /= n);
        let norm = l2_norm(&mean);
        if !(norm >= 1e-8) {
            return Err(Error::Degenerate(format!(
                "ensemble {:?} has mean norm {norm}",
                group.name
            )));
        }
        data.extend(mean.iter().map(|v| v / norm));
    }
    let names = groups.iter().map(|g| g.name.clone()).collect();
    TaskEmbeddings::new(dim, names, data)
}

/// Ensembles a store whose rows are laid out name-major: rows
/// `[i * per_group, (i + 1) * per_group)` belong to `names[i]`.
pub fn ensemble_store(store: &EmbeddingStore, names: &[String]) -> Result<TaskEmbeddings> {
    if names.is_empty() || !store.count().is_multiple_of(names.len()) {
        return Err(Error::validation(format!(
            "{} rows cannot be split evenly across {} names",
            store.count(),
            names.len()
        )));
    }
    let per_group = store.count() / names.len();
    let groups: Vec<PromptGroup> = names
        .iter()
        .enumerate()
        .map(|(g, name)| {
            let members = (g * per_group..(g + 1) * per_group)
                .map(|i| store.row_f64(i))
                .collect();
            PromptGroup::new(name.clone(), members)
        })
        .collect();
    build_task_embeddings(&groups)
}
