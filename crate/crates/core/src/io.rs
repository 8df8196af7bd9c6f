//! Binary embedding files, CSV tables and the TOML run configuration.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignConfig, CostMode, PromptFeature, PromptSet, Side};
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, DenseVector};
use crate::ot::SinkhornSettings;
use crate::trainer::{BackboneSpec, PromptParams, TaskSpec, TrainConfig};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"ALGNEMB1";
pub const EMBEDDING_VERSION: u32 = 1;

/// One prompt as stored on disk: a global vector and a row-major token
/// matrix, both at 32-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrompt {
    pub global: Vec<f32>,
    pub tokens: Vec<f32>,
    pub token_count: usize,
}

/// Contents of an embedding file.
///
/// Layout, all integers `u32` little-endian:
/// magic `ALGNEMB1`, version, side (0 image, 1 class), set count, prompts per
/// set (one entry per set), dimension, token count per prompt (sets in
/// order, prompts in order). The payload follows as `f32` little-endian: for
/// each set, its global vectors, then its token matrices row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub side: Side,
    pub dim: usize,
    pub sets: Vec<Vec<RawPrompt>>,
}

fn side_code(side: Side) -> u32 {
    match side {
        Side::Image => 0,
        Side::Class => 1,
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Parse(format!("embedding file truncated while reading {what}"))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Parse("size overflow".into()))?, what)?;
        let out: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse(format!("non-finite value in {what}")));
        }
        Ok(out)
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidInput(format!("{what} {n} does not fit in 32 bits")))
}

impl EmbeddingFile {
    /// Checks the shape invariants the byte layout relies on.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidInput("embedding dimension must be positive".into()));
        }
        if self.sets.is_empty() {
            return Err(Error::InvalidInput("embedding file holds no prompt sets".into()));
        }
        for (s, set) in self.sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::InvalidInput(format!("prompt set {s} is empty")));
            }
            for (p, prompt) in set.iter().enumerate() {
                if prompt.global.len() != self.dim
                    || prompt.token_count == 0
                    || prompt.tokens.len() != prompt.token_count * self.dim
                {
                    return Err(Error::DimensionMismatch(format!(
                        "set {s} prompt {p} does not match dimension {} with {} tokens",
                        self.dim, prompt.token_count
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(EMBEDDING_MAGIC);
        let mut put = |v: u32| out.extend_from_slice(&v.to_le_bytes());
        put(EMBEDDING_VERSION);
        put(side_code(self.side));
        put(to_u32(self.sets.len(), "set count")?);
        for set in &self.sets {
            put(to_u32(set.len(), "prompt count")?);
        }
        put(to_u32(self.dim, "dimension")?);
        for prompt in self.sets.iter().flatten() {
            put(to_u32(prompt.token_count, "token count")?);
        }
        for set in &self.sets {
            for prompt in set {
                out.extend(prompt.global.iter().flat_map(|x| x.to_le_bytes()));
            }
            for prompt in set {
                out.extend(prompt.tokens.iter().flat_map(|x| x.to_le_bytes()));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8, "magic")? != EMBEDDING_MAGIC {
            return Err(Error::Parse("not an embedding file (bad magic)".into()));
        }
        let version = cur.u32("version")?;
        if version != EMBEDDING_VERSION {
            return Err(Error::Parse(format!("unsupported embedding file version {version}")));
        }
        let side = match cur.u32("side")? {
            0 => Side::Image,
            1 => Side::Class,
            other => return Err(Error::Parse(format!("unknown side code {other}"))),
        };
        let count = cur.u32("set count")? as usize;
        let per_set = (0..count)
            .map(|_| cur.u32("prompt count").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let dim = cur.u32("dimension")? as usize;
        let token_counts = per_set
            .iter()
            .map(|&n| (0..n).map(|_| cur.u32("token count").map(|v| v as usize)).collect())
            .collect::<Result<Vec<Vec<usize>>>>()?;

        let mut sets = Vec::with_capacity(count);
        for counts in &token_counts {
            let globals = counts
                .iter()
                .map(|_| cur.f32s(dim, "global vector"))
                .collect::<Result<Vec<_>>>()?;
            let mut set = Vec::with_capacity(counts.len());
            for (global, &t) in globals.into_iter().zip(counts) {
                let n = t.checked_mul(dim).ok_or_else(|| Error::Parse("size overflow".into()))?;
                set.push(RawPrompt {
                    global,
                    tokens: cur.f32s(n, "token matrix")?,
                    token_count: t,
                });
            }
            sets.push(set);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Parse(format!(
                "embedding file has {} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        let file = Self { side, dim, sets };
        file.validate().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(file)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Narrows already encoded prompt sets to 32-bit storage.
    pub fn from_prompt_sets(side: Side, sets: &[PromptSet]) -> Result<Self> {
        let dim = sets
            .first()
            .ok_or_else(|| Error::InvalidInput("no prompt sets to store".into()))?
            .dim();
        let narrow = |xs: &[f64]| xs.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let sets = sets
            .iter()
            .map(|set| {
                set.prompts()
                    .iter()
                    .map(|p| RawPrompt {
                        global: narrow(p.global()),
                        tokens: narrow(p.tokens().as_slice()),
                        token_count: p.token_count(),
                    })
                    .collect()
            })
            .collect();
        let file = Self { side, dim, sets };
        file.validate()?;
        Ok(file)
    }

    /// Widens to 64 bits and renormalizes every global vector and token row.
    pub fn to_prompt_sets(&self) -> Result<Vec<PromptSet>> {
        self.validate()?;
        let widen = |xs: &[f32]| xs.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();
        self.sets
            .iter()
            .enumerate()
            .map(|(s, set)| {
                let prompts = set
                    .iter()
                    .enumerate()
                    .map(|(p, raw)| {
                        let tokens = DenseMatrix::new(raw.token_count, self.dim, widen(&raw.tokens))?;
                        PromptFeature::normalized(&widen(&raw.global), &tokens)
                            .map_err(|e| Error::InvalidInput(format!("set {s} prompt {p}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                PromptSet::new(prompts, self.side)
            })
            .collect()
    }
}

/// Formats a float with the shortest representation that parses back to the
/// same value.
pub fn format_f64(x: f64) -> String {
    format!("{x:?}")
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::io(path, e))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::io(path, format!("row {}, column {}: not a finite number: {f:?}", i + 1, j + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Reads a headerless numeric CSV as a matrix; every row must have the same
/// number of fields.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let rows = csv_rows(path)?;
    if rows.is_empty() {
        return Err(Error::io(path, "empty matrix"));
    }
    let cols = rows[0].len();
    if let Some(i) = rows.iter().position(|r| r.len() != cols) {
        return Err(Error::io(
            path,
            format!("row {} has {} fields, expected {cols}", i + 1, rows[i].len()),
        ));
    }
    DenseMatrix::from_rows(&rows).map_err(|e| Error::io(path, e))
}

/// Reads a headerless numeric CSV holding one row or one column of values.
pub fn read_vector_csv(path: impl AsRef<Path>) -> Result<DenseVector> {
    let path = path.as_ref();
    let rows = csv_rows(path)?;
    let values: Vec<f64> = if rows.len() == 1 {
        rows.into_iter().next().unwrap_or_default()
    } else if rows.iter().all(|r| r.len() == 1) {
        rows.into_iter().flatten().collect()
    } else {
        return Err(Error::io(path, "expected a single row or a single column"));
    };
    if values.is_empty() {
        return Err(Error::io(path, "empty vector"));
    }
    DenseVector::new(values).map_err(|e| Error::io(path, e))
}

/// Reads one non-negative integer label per line (or per field).
pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    csv_rows(path)?
        .into_iter()
        .flatten()
        .map(|x| {
            if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
                Ok(x as usize)
            } else {
                Err(Error::io(path, format!("label {x} is not a non-negative integer")))
            }
        })
        .collect()
}

/// Writes a matrix as headerless CSV.
pub fn write_matrix_csv<W: Write>(out: W, m: &DenseMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in m.row_iter() {
        w.write_record(row.iter().map(|&x| format_f64(x)))
            .map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))
}

/// Writes a table with a header row; every cell is already formatted.
pub fn write_table_csv<W: Write>(out: W, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(|e| Error::Parse(e.to_string()))?;
    for row in rows {
        w.write_record(row).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))
}

/// Prompt parameters as CSV: `side,prompt,row,x_0,...`.
pub fn write_params_csv<W: Write>(out: W, params: &PromptParams) -> Result<()> {
    let header: Vec<String> = ["side", "prompt", "row"]
        .into_iter()
        .map(String::from)
        .chain((0..params.input_dim()).map(|k| format!("x_{k}")))
        .collect();
    let mut rows = Vec::new();
    for (side, prompts) in [("visual", params.visual()), ("textual", params.textual())] {
        for (p, m) in prompts.iter().enumerate() {
            for (r, row) in m.row_iter().enumerate() {
                rows.push(
                    [side.to_string(), p.to_string(), r.to_string()]
                        .into_iter()
                        .chain(row.iter().map(|&x| format_f64(x)))
                        .collect(),
                );
            }
        }
    }
    write_table_csv(out, &header, &rows)
}

/// `[align]` section of a run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignSection {
    pub lambda: f64,
    pub beta: f64,
    pub tau: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub accelerated: bool,
    pub cost_mode: CostMode,
}

impl Default for AlignSection {
    fn default() -> Self {
        AlignSection::from(AlignConfig::default())
    }
}

impl From<AlignConfig> for AlignSection {
    fn from(c: AlignConfig) -> Self {
        Self {
            lambda: c.sinkhorn.lambda,
            beta: c.beta,
            tau: c.tau,
            max_iterations: c.sinkhorn.max_iterations,
            tolerance: c.sinkhorn.tolerance,
            accelerated: c.sinkhorn.accelerated,
            cost_mode: c.cost_mode,
        }
    }
}

impl AlignSection {
    pub fn to_config(&self) -> Result<AlignConfig> {
        let mut sinkhorn = SinkhornSettings::new(self.lambda, self.max_iterations, self.tolerance)?;
        sinkhorn.accelerated = self.accelerated;
        let cfg = AlignConfig {
            beta: self.beta,
            tau: self.tau,
            sinkhorn,
            cost_mode: self.cost_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `[prompts]` section: how many prompts per side and how they start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub visual: usize,
    pub textual: usize,
    pub length: usize,
    pub init_std: f64,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            visual: 4,
            textual: 4,
            length: 2,
            init_std: 0.02,
        }
    }
}

/// `[train]` section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
            seed: d.seed,
        }
    }
}

/// Everything `train-toy` and `ablate` need, read from TOML.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub align: AlignSection,
    pub prompts: PromptSection,
    pub train: TrainSection,
    pub task: TaskSpec,
    pub backbone: BackboneSpec,
}

/// The default configuration, with every key present and commented.
pub const DEFAULT_RUN_CONFIG: &str = r#"# Hierarchical distance and classifier.
[align]
lambda = 0.1            # entropic weight, shared by both OT levels
beta = 1.0              # weight of the token-level distance
tau = 0.01              # softmax temperature
max_iterations = 100    # Sinkhorn iteration cap
tolerance = 1e-6        # L1 marginal violation accepted as converged
accelerated = true      # warm start and dual Newton steps
cost_mode = "additive"  # "additive" or "convex" (convex needs beta <= 1)

# Learnable prompts.
[prompts]
visual = 4              # M
textual = 4             # N
length = 2              # rows per prompt
init_std = 0.02         # Gaussian initialization scale

[train]
learning_rate = 0.0035
epochs = 200
batch_size = 4
seed = 0                # batch order and prompt initialization

# Synthetic few-shot task.
[task]
classes = 3
shots = 8               # training images per class
test_per_class = 10
patches = 4             # patch rows per image
class_tokens = 2        # content rows per class description
input_dim = 16
cluster_spread = 0.05   # patch noise around the class anchors
anchors_per_class = 1   # 2 gives each class two distinct concepts
seed = 0

# Frozen toy encoders.
[backbone]
embed_dim = 16
modality_gap = 2.0      # scale of the modality-specific projection part
seed = 0
"#;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()?.validate()?;
        self.task.validate()?;
        if self.prompts.visual == 0 || self.prompts.textual == 0 || self.prompts.length == 0 {
            return Err(Error::Config("prompt counts and length must be at least 1".into()));
        }
        if !(self.prompts.init_std >= 0.0) || !self.prompts.init_std.is_finite() {
            return Err(Error::Config("init_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            align: self.align.to_config()?,
            seed: self.train.seed,
        })
    }

    pub fn initial_params(&self) -> Result<PromptParams> {
        PromptParams::init(
            self.prompts.visual,
            self.prompts.textual,
            self.prompts.length,
            self.task.input_dim,
            self.prompts.init_std,
            self.train.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_file() -> EmbeddingFile {
        EmbeddingFile {
            side: Side::Class,
            dim: 2,
            sets: vec![
                vec![RawPrompt {
                    global: vec![1.0, 0.0],
                    tokens: vec![0.6, 0.8, 0.0, 1.0],
                    token_count: 2,
                }],
                vec![
                    RawPrompt {
                        global: vec![0.0, 1.0],
                        tokens: vec![1.0, 0.0],
                        token_count: 1,
                    },
                    RawPrompt {
                        global: vec![0.6, -0.8],
                        tokens: vec![0.0, -1.0],
                        token_count: 1,
                    },
                ],
            ],
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample_file().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"ALGNEMB1");
        let words: Vec<u32> = bytes[8..8 + 4 * 9]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        // version, side, count, per-set prompts, dim, token counts
        assert_eq!(words, vec![1, 1, 2, 1, 2, 2, 2, 1, 1]);
        let floats = (2 + 4) + (4 + 2 + 2);
        assert_eq!(bytes.len(), 8 + 4 * 9 + 4 * floats);
        // second set: both globals precede its token matrices
        let payload = &bytes[8 + 36..];
        let f = |i: usize| f32::from_le_bytes(payload[4 * i..4 * i + 4].try_into().unwrap());
        assert_eq!([f(6), f(7), f(8), f(9)], [0.0, 1.0, 0.6, -0.8]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let good = sample_file().to_bytes().unwrap();
        assert!(EmbeddingFile::from_bytes(&good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(EmbeddingFile::from_bytes(&extra).is_err());
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(EmbeddingFile::from_bytes(&magic).is_err());
        let mut version = good.clone();
        version[8] = 2;
        assert!(EmbeddingFile::from_bytes(&version).is_err());
        let mut side = good.clone();
        side[12] = 7;
        assert!(EmbeddingFile::from_bytes(&side).is_err());
        let mut nan = good;
        let at = nan.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(EmbeddingFile::from_bytes(&nan).is_err());
        assert!(EmbeddingFile::from_bytes(b"").is_err());
    }

    #[test]
    fn conversion_to_prompt_sets_normalizes() {
        let mut file = sample_file();
        file.sets[0][0].global = vec![3.0, 4.0];
        let sets = file.to_prompt_sets().unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[1].len(), 2);
        assert!((sets[0].prompts()[0].global()[0] - 0.6).abs() < 1e-12);
        assert_eq!(sets[0].side(), Side::Class);
        file.sets[1][0].tokens = vec![0.0, 0.0];
        assert!(file.to_prompt_sets().is_err());
    }

    #[test]
    fn csv_readers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "0.1, 0.2\n0.3,0.4\n").unwrap();
        let m = read_matrix_csv(&p).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m.get(1, 0), 0.3);
        fs::write(&p, "0.5\n0.5\n").unwrap();
        assert_eq!(read_vector_csv(&p).unwrap().as_slice(), &[0.5, 0.5]);
        fs::write(&p, "0.25,0.75\n").unwrap();
        assert_eq!(read_vector_csv(&p).unwrap().as_slice(), &[0.25, 0.75]);
        fs::write(&p, "1,2\n3\n").unwrap();
        assert!(read_matrix_csv(&p).is_err());
        fs::write(&p, "1,x\n").unwrap();
        let err = read_matrix_csv(&p).unwrap_err().to_string();
        assert!(err.contains("m.csv") && err.contains("column 2"), "{err}");
        fs::write(&p, "0\n2\n1\n").unwrap();
        assert_eq!(read_labels_csv(&p).unwrap(), vec![0, 2, 1]);
        fs::write(&p, "0.5\n").unwrap();
        assert!(read_labels_csv(&p).is_err());
        assert!(read_matrix_csv(dir.path().join("missing.csv")).is_err());
    }

    #[test]
    fn matrix_csv_round_trips_exactly() {
        let m = DenseMatrix::from_rows(&[[0.1, 1e-300], [2.0 / 3.0, 12345.678]]).unwrap();
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, &buf).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), m);
        assert!(String::from_utf8(buf).unwrap().ends_with('\n'));
    }

    #[test]
    fn default_config_text_matches_defaults() {
        assert_eq!(RunConfig::from_toml(DEFAULT_RUN_CONFIG).unwrap(), RunConfig::default());
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn config_rejects_unknown_keys_by_name() {
        let err = RunConfig::from_toml("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = RunConfig::from_toml("[model]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("model"), "{err}");
        assert!(RunConfig::from_toml("[align]\ncost_mode = \"convex\"\nbeta = 2.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nepochs = 0\n").is_err());
    }

    #[test]
    fn config_overrides_apply() {
        let cfg = RunConfig::from_toml("[align]\nbeta = 0.5\ncost_mode = \"convex\"\n[prompts]\nvisual = 2\n").unwrap();
        let train = cfg.train_config().unwrap();
        assert_eq!(train.align.beta, 0.5);
        assert_eq!(train.align.cost_mode, CostMode::Convex);
        assert_eq!(cfg.initial_params().unwrap().visual().len(), 2);
    }

    fn arb_file() -> impl Strategy<Value = EmbeddingFile> {
        let finite = prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL;
        (1usize..5, any::<bool>(), prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..4))
            .prop_flat_map(move |(dim, image, shape)| {
                let sets: Vec<_> = shape
                    .iter()
                    .map(|prompts| {
                        prompts
                            .iter()
                            .map(|&t| {
                                (
                                    prop::collection::vec(finite, dim),
                                    prop::collection::vec(finite, t * dim),
                                )
                                    .prop_map(move |(global, tokens)| RawPrompt {
                                        global,
                                        tokens,
                                        token_count: t,
                                    })
                            })
                            .collect::<Vec<_>>()
                    })
                    .collect();
                (Just(dim), Just(image), sets)
            })
            .prop_map(|(dim, image, sets)| EmbeddingFile {
                side: if image { Side::Image } else { Side::Class },
                dim,
                sets,
            })
    }

    proptest! {
        #[test]
        fn embedding_round_trip_is_bitwise(file in arb_file()) {
            let bytes = file.to_bytes().unwrap();
            let parsed = EmbeddingFile::from_bytes(&bytes).unwrap();
            prop_assert_eq!(parsed.to_bytes().unwrap(), bytes);
            let bits = |f: &EmbeddingFile| -> Vec<u32> {
                f.sets.iter().flatten().flat_map(|p| p.global.iter().chain(&p.tokens).map(|x| x.to_bits())).collect()
            };
            prop_assert_eq!(bits(&parsed), bits(&file));
            prop_assert_eq!(parsed.side, file.side);
        }
    }
}
