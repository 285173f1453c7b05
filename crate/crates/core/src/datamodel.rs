//! Record and tensor-shaped types shared across the crate.
//!
//! Gender and label codes are stored as raw integers so that a malformed
//! record can still be loaded and reported by [`validate_session`]; every
//! constructor that builds records from trusted sources goes through the
//! checked `new` functions.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Gender code fed to the models as one scalar input. 0 = male (minority
/// group), 1 = female (majority group).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GenderCode(u8);

impl GenderCode {
    pub const MALE: GenderCode = GenderCode(0);
    pub const FEMALE: GenderCode = GenderCode(1);

    pub fn new(value: u8) -> Result<Self> {
        match value {
            0 | 1 => Ok(GenderCode(value)),
            v => Err(Error::invalid(format!("gender code {v} not in {{0,1}}"))),
        }
    }

    /// Builds a code without range checking; only for loading untrusted data
    /// that will be passed through [`validate_session`].
    pub fn from_raw(value: u8) -> Self {
        GenderCode(value)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn is_valid(self) -> bool {
        self.0 <= 1
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_input(self) -> f64 {
        f64::from(self.0)
    }

    pub fn flipped(self) -> Self {
        GenderCode(1 - self.0.min(1))
    }
}

impl fmt::Display for GenderCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => f.write_str("M"),
            1 => f.write_str("F"),
            v => write!(f, "?{v}"),
        }
    }
}

/// Binary depression label. Index 1 (Depressed) is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DepressionLabel(u8);

impl DepressionLabel {
    pub const NON_DEPRESSED: DepressionLabel = DepressionLabel(0);
    pub const DEPRESSED: DepressionLabel = DepressionLabel(1);

    pub fn new(value: u8) -> Result<Self> {
        match value {
            0 | 1 => Ok(DepressionLabel(value)),
            v => Err(Error::invalid(format!("label {v} not in {{0,1}}"))),
        }
    }

    pub fn from_raw(value: u8) -> Self {
        DepressionLabel(value)
    }

    pub fn from_index(index: usize) -> Self {
        DepressionLabel(u8::from(index != 0))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn is_valid(self) -> bool {
        self.0 <= 1
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_depressed(self) -> bool {
        self.0 == 1
    }
}

/// Segment-level feature rows (T × d) for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    #[serde(with = "matrix_rows")]
    pub data: Array2<f64>,
    pub d_alf: usize,
}

impl FeatureSequence {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let seq = FeatureSequence {
            d_alf: data.ncols(),
            data,
        };
        seq.check()?;
        Ok(seq)
    }

    pub fn check(&self) -> Result<()> {
        if self.data.nrows() == 0 || self.data.ncols() == 0 {
            return Err(Error::invalid("feature sequence must have at least one row and column"));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("feature sequence contains non-finite values"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Mean over rows.
    pub fn mean_pool(&self) -> Array1<f64> {
        self.data
            .mean_axis(ndarray::Axis(0))
            .unwrap_or_else(|| Array1::zeros(self.data.ncols()))
    }
}

/// A pair of pre-activation class scores, indexed by [`DepressionLabel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(pub [f64; 2]);

impl LogitVector {
    pub fn new(non_depressed: f64, depressed: f64) -> Self {
        LogitVector([non_depressed, depressed])
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        match values {
            [a, b] => Ok(LogitVector([*a, *b])),
            _ => Err(Error::shape("2 logits", values.len())),
        }
    }

    pub fn from_view(values: ArrayView1<'_, f64>) -> Result<Self> {
        if values.len() != 2 {
            return Err(Error::shape("2 logits", values.len()));
        }
        Ok(LogitVector([values[0], values[1]]))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Index of the larger score; ties go to Non-depressed.
    pub fn argmax(&self) -> DepressionLabel {
        DepressionLabel::from_index(usize::from(self.0[1] > self.0[0]))
    }

    pub fn softmax(&self) -> [f64; 2] {
        let m = self.0[0].max(self.0[1]);
        let e0 = (self.0[0] - m).exp();
        let e1 = (self.0[1] - m).exp();
        let z = e0 + e1;
        [e0 / z, e1 / z]
    }

    pub fn to_array(self) -> Array1<f64> {
        Array1::from(self.0.to_vec())
    }
}

impl std::ops::Index<usize> for LogitVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub gender: GenderCode,
    pub label: DepressionLabel,
    #[serde(default)]
    pub audio_path: Option<PathBuf>,
    #[serde(default)]
    pub transcript_path: Option<PathBuf>,
    #[serde(default)]
    pub features: Option<FeatureSequence>,
    /// Set on synthetic training records produced by feature mixing; such
    /// records must never be used for evaluation.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub augmented: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parents: Option<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl SessionRecord {
    pub fn with_features(
        session_id: impl Into<String>,
        gender: GenderCode,
        label: DepressionLabel,
        features: FeatureSequence,
    ) -> Self {
        SessionRecord {
            session_id: session_id.into(),
            gender,
            label,
            audio_path: None,
            transcript_path: None,
            features: Some(features),
            augmented: false,
            parents: None,
            lambda: None,
        }
    }

    pub fn with_audio(
        session_id: impl Into<String>,
        gender: GenderCode,
        label: DepressionLabel,
        audio_path: PathBuf,
        transcript_path: Option<PathBuf>,
    ) -> Self {
        SessionRecord {
            session_id: session_id.into(),
            gender,
            label,
            audio_path: Some(audio_path),
            transcript_path,
            features: None,
            augmented: false,
            parents: None,
            lambda: None,
        }
    }

    pub fn cell(&self) -> (GenderCode, DepressionLabel) {
        (self.gender, self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub session_id: String,
    pub gender: GenderCode,
    pub true_label: DepressionLabel,
    pub predicted_label: DepressionLabel,
    #[serde(default)]
    pub tie_scores: Option<LogitVector>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validation {
    Pass,
    Violations(Vec<String>),
}

impl Validation {
    pub fn is_pass(&self) -> bool {
        matches!(self, Validation::Pass)
    }

    pub fn violations(&self) -> &[String] {
        match self {
            Validation::Pass => &[],
            Validation::Violations(v) => v,
        }
    }
}

/// Checks the invariants of a single record. Violations are collected, not
/// raised.
pub fn validate_session(record: &SessionRecord) -> Validation {
    let mut violations = Vec::new();
    if record.session_id.trim().is_empty() {
        violations.push("session_id is empty".to_string());
    }
    if !record.gender.is_valid() {
        violations.push("gender not in {0,1}".to_string());
    }
    if !record.label.is_valid() {
        violations.push("label not in {0,1}".to_string());
    }
    let mixed_from_parents = record.augmented && record.parents.is_some();
    if record.audio_path.is_none() && record.features.is_none() && !mixed_from_parents {
        violations.push("neither audio_path nor features present".to_string());
    }
    if record.augmented && record.parents.is_none() {
        violations.push("augmented record without parents".to_string());
    }
    if let Some((a, b)) = &record.parents {
        if a == b {
            violations.push("parents are the same session".to_string());
        }
    }
    if let Some(features) = &record.features {
        if let Err(e) = features.check() {
            violations.push(e.to_string());
        } else if features.d_alf == 0 {
            violations.push("features d_alf is zero".to_string());
        }
    }
    if let Some(lambda) = record.lambda {
        if !(0.0..=1.0).contains(&lambda) {
            violations.push("lambda not in [0,1]".to_string());
        }
    }
    if violations.is_empty() {
        Validation::Pass
    } else {
        Validation::Violations(violations)
    }
}

/// Checks that a prediction agrees with the argmax of its TIE scores.
pub fn validate_prediction(record: &PredictionRecord) -> Validation {
    let mut violations = Vec::new();
    if !record.predicted_label.is_valid() {
        violations.push("predicted_label not in {0,1}".to_string());
    }
    if let Some(scores) = record.tie_scores {
        if scores.argmax() != record.predicted_label {
            violations.push("predicted_label is not argmax of tie_scores".to_string());
        }
    }
    if violations.is_empty() {
        Validation::Pass
    } else {
        Validation::Violations(violations)
    }
}

pub fn write_jsonl<T: Serialize, W: Write>(mut out: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl writer>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<jsonl reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            context: format!("jsonl line {}", lineno + 1),
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

pub fn write_jsonl_file<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, items)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(std::io::BufReader::new(file))
}

/// Serializes a matrix as a row-major list of rows.
pub mod matrix_rows {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Array2<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        rows_to_matrix(&rows).map_err(serde::de::Error::custom)
    }

    pub fn rows_to_matrix(rows: &[Vec<f64>]) -> std::result::Result<Array2<f64>, String> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".to_string());
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Array2::from_shape_vec((rows.len(), ncols), flat).map_err(|e| e.to_string())
    }
}
