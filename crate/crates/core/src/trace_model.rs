//! Rollout/group data model and the on-disk trace-bundle format.
//!
//! A *bundle* is a directory with two files:
//!
//! - `index.jsonl` — one JSON object per rollout, ascending by
//!   `(prompt_id, rollout_id)`, carrying the token strings, prompt boundary,
//!   terminal reward, and the byte offset of the rollout's hidden-state
//!   matrix.
//! - `hidden.f32` — the concatenated hidden-state matrices, row-major,
//!   little-endian IEEE-754 `f32`, matrix *i* occupying bytes
//!   `[offset, offset + eta * dim * 4)`.
//!
//! Store followed by load is the identity on every field; hidden matrices
//! round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// Dense row-major matrix of `f32` hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct F32Matrix {
    data: Vec<f32>,
    rows: usize,
    dim: usize,
}

impl F32Matrix {
    /// Builds a matrix from row-major data; `data.len()` must be `rows * dim`.
    pub fn from_vec(data: Vec<f32>, rows: usize, dim: usize) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(validation!(
                "matrix data length {} does not match {} rows x {} dim",
                data.len(),
                rows,
                dim
            ));
        }
        Ok(Self { data, rows, dim })
    }

    /// Number of rows.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of columns.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row `i` as a slice of length `dim`.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Flat row-major data.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// True if every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bit-exact equality (distinguishes NaN payloads and signed zeros).
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.dim == other.dim
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// One generated trajectory: tokens, prompt boundary, terminal reward, and
/// the hidden-state matrix of the generated suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Unique integer id within the bundle.
    pub rollout_id: u64,
    /// Grouping key; all rollouts answering one prompt share it.
    pub prompt_id: u64,
    /// Decoded token strings, prompt tokens first, length `T_total`.
    pub tokens: Vec<String>,
    /// Number of leading tokens that form the prompt (state `s_0`).
    pub prompt_len: usize,
    /// Terminal reward in `[0, 1]`.
    pub reward: f64,
    /// Hidden states of the generated suffix, shape `eta x dim` where
    /// `eta = T_total - prompt_len`; row `t` is the state after generated
    /// token `t`.
    pub hidden: F32Matrix,
    /// True if generation ended with end-of-sequence rather than truncation.
    pub terminal: bool,
}

impl Rollout {
    /// Number of generated tokens (`eta`).
    pub fn eta(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    /// Hidden-state dimensionality.
    pub fn dim(&self) -> usize {
        self.hidden.dim()
    }

    /// Generated-suffix token strings.
    pub fn generated_tokens(&self) -> &[String] {
        &self.tokens[self.prompt_len..]
    }

    /// Checks every rollout invariant, naming the rollout on failure.
    pub fn validate(&self) -> Result<()> {
        let id = self.rollout_id;
        if self.prompt_len < 1 {
            return Err(validation!("rollout {id}: prompt_len must be >= 1"));
        }
        if self.prompt_len >= self.tokens.len() {
            return Err(validation!(
                "rollout {id}: prompt_len {} must be < token count {}",
                self.prompt_len,
                self.tokens.len()
            ));
        }
        if self.hidden.rows() != self.eta() {
            return Err(validation!(
                "rollout {id}: hidden has {} rows but eta is {}",
                self.hidden.rows(),
                self.eta()
            ));
        }
        if self.hidden.dim() < 1 {
            return Err(validation!("rollout {id}: hidden dim must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.reward) {
            return Err(validation!(
                "rollout {id}: reward {} outside [0, 1]",
                self.reward
            ));
        }
        if !self.hidden.all_finite() {
            return Err(validation!(
                "rollout {id}: hidden contains non-finite values"
            ));
        }
        Ok(())
    }
}

/// All rollouts sharing one prompt — the unit every estimator operates on.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    /// Shared prompt id.
    pub prompt_id: u64,
    /// Member rollouts, ascending by `rollout_id`.
    pub rollouts: Vec<Rollout>,
}

impl Group {
    /// Number of member rollouts.
    pub fn size(&self) -> usize {
        self.rollouts.len()
    }

    /// Shared hidden dimensionality.
    pub fn dim(&self) -> usize {
        self.rollouts.first().map_or(0, |r| r.dim())
    }

    /// Mean terminal reward, accumulated in rollout order.
    pub fn mean_reward(&self) -> f64 {
        let sum: f64 = self.rollouts.iter().map(|r| r.reward).sum();
        sum / self.rollouts.len() as f64
    }

    /// Checks group invariants plus every member rollout.
    pub fn validate(&self) -> Result<()> {
        if self.rollouts.is_empty() {
            return Err(validation!("group {}: empty group", self.prompt_id));
        }
        let dim = self.rollouts[0].dim();
        for rollout in &self.rollouts {
            rollout.validate()?;
            if rollout.prompt_id != self.prompt_id {
                return Err(validation!(
                    "rollout {}: prompt_id {} does not match group {}",
                    rollout.rollout_id,
                    rollout.prompt_id,
                    self.prompt_id
                ));
            }
            if rollout.dim() != dim {
                return Err(validation!(
                    "rollout {}: dim {} differs from group dim {}",
                    rollout.rollout_id,
                    rollout.dim(),
                    dim
                ));
            }
        }
        Ok(())
    }
}

/// Estimation method tag carried by a [`ValueAssignment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Group-average baseline.
    Grpo,
    /// Numerical-milestone credit assignment.
    Numca,
    /// Hidden-state nearest-neighbor estimation.
    Hista,
    /// Monte-Carlo continuations.
    Mcs,
    /// Values supplied by an external producer.
    External,
}

impl Method {
    /// Stable lowercase name.
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Grpo => "grpo",
            Method::Numca => "numca",
            Method::Hista => "hista",
            Method::Mcs => "mcs",
            Method::External => "external",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-token state values and advantages produced by one estimator for one
/// rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueAssignment {
    /// Rollout the values belong to.
    pub rollout_id: u64,
    /// Producing method.
    pub method: Method,
    /// Per-generated-token state values, length `eta`.
    pub values: Vec<f64>,
    /// Per-generated-token advantages, length `eta`.
    pub advantages: Vec<f64>,
}

/// One line of `index.jsonl`. Field order here fixes the serialized key
/// order, so writes are byte-reproducible.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexRecord {
    rollout_id: u64,
    prompt_id: u64,
    tokens: Vec<String>,
    prompt_len: usize,
    reward: f64,
    terminal: bool,
    eta: usize,
    dim: usize,
    offset: u64,
}

/// Writes `groups` as a trace bundle at `path` (created if missing).
///
/// Rollouts are emitted ascending by `(prompt_id, rollout_id)` with
/// contiguous hidden-matrix offsets; an empty group list yields an empty
/// `index.jsonl` and a zero-byte `hidden.f32`.
pub fn store_bundle(groups: &[Group], path: &Path) -> Result<()> {
    for group in groups {
        group.validate()?;
    }
    let mut rollouts: Vec<&Rollout> = groups.iter().flat_map(|g| &g.rollouts).collect();
    rollouts.sort_by_key(|r| (r.prompt_id, r.rollout_id));

    fs::create_dir_all(path)?;
    let mut index = BufWriter::new(fs::File::create(path.join("index.jsonl"))?);
    let mut hidden = BufWriter::new(fs::File::create(path.join("hidden.f32"))?);

    let mut offset: u64 = 0;
    for rollout in rollouts {
        let record = IndexRecord {
            rollout_id: rollout.rollout_id,
            prompt_id: rollout.prompt_id,
            tokens: rollout.tokens.clone(),
            prompt_len: rollout.prompt_len,
            reward: rollout.reward,
            terminal: rollout.terminal,
            eta: rollout.eta(),
            dim: rollout.dim(),
            offset,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Integrity(format!("serializing index record: {e}")))?;
        index.write_all(line.as_bytes())?;
        index.write_all(b"\n")?;
        for value in rollout.hidden.data() {
            hidden.write_all(&value.to_le_bytes())?;
        }
        offset += (rollout.eta() * rollout.dim() * 4) as u64;
    }
    index.flush()?;
    hidden.flush()?;
    Ok(())
}

/// Loads a trace bundle from `path`, validating every invariant.
///
/// Returns groups ascending by `prompt_id` with rollouts ascending by
/// `rollout_id`. Malformed index lines are format errors carrying the line
/// number; byte-accounting mismatches against `hidden.f32` are integrity
/// errors; invariant violations are validation errors naming the rollout.
pub fn load_bundle(path: &Path) -> Result<Vec<Group>> {
    let index_path = path.join("index.jsonl");
    let hidden_path = path.join("hidden.f32");
    let hidden_bytes = fs::read(&hidden_path)?;
    let reader = BufReader::new(fs::File::open(&index_path)?);

    let mut records: Vec<IndexRecord> = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: IndexRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: line_no + 1,
            message: e.to_string(),
        })?;
        if let Some(prev) = records.last() {
            if (record.prompt_id, record.rollout_id) <= (prev.prompt_id, prev.rollout_id) {
                return Err(Error::Format {
                    line: line_no + 1,
                    message: format!(
                        "index not ascending: ({}, {}) after ({}, {})",
                        record.prompt_id, record.rollout_id, prev.prompt_id, prev.rollout_id
                    ),
                });
            }
        }
        records.push(record);
    }

    let mut expected_end: u64 = 0;
    let mut groups: BTreeMap<u64, Vec<Rollout>> = BTreeMap::new();
    for record in records {
        let matrix_bytes = (record.eta * record.dim * 4) as u64;
        let end = record.offset + matrix_bytes;
        if end > hidden_bytes.len() as u64 {
            return Err(Error::Integrity(format!(
                "rollout {}: matrix bytes [{}, {}) exceed hidden.f32 length {}",
                record.rollout_id,
                record.offset,
                end,
                hidden_bytes.len()
            )));
        }
        expected_end = expected_end.max(end);
        let slice = &hidden_bytes[record.offset as usize..end as usize];
        let data: Vec<f32> = slice
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let rollout = Rollout {
            rollout_id: record.rollout_id,
            prompt_id: record.prompt_id,
            tokens: record.tokens,
            prompt_len: record.prompt_len,
            reward: record.reward,
            hidden: F32Matrix::from_vec(data, record.eta, record.dim)?,
            terminal: record.terminal,
        };
        rollout.validate()?;
        groups.entry(rollout.prompt_id).or_default().push(rollout);
    }
    if expected_end != hidden_bytes.len() as u64 {
        return Err(Error::Integrity(format!(
            "hidden.f32 length {} does not match indexed extent {}",
            hidden_bytes.len(),
            expected_end
        )));
    }

    let groups: Vec<Group> = groups
        .into_iter()
        .map(|(prompt_id, rollouts)| Group {
            prompt_id,
            rollouts,
        })
        .collect();
    for group in &groups {
        group.validate()?;
    }
    Ok(groups)
}
