//! Corpus manifests, DAIC-WOZ ingestion and the synthetic shortcut corpus.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{validate_session, DepressionLabel, FeatureSequence, GenderCode, SessionRecord, Validation};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

/// One value per (gender, label) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CellTable<T> {
    pub female_non_depressed: T,
    pub female_depressed: T,
    pub male_non_depressed: T,
    pub male_depressed: T,
}

impl<T: Copy> CellTable<T> {
    pub fn get(&self, gender: GenderCode, label: DepressionLabel) -> T {
        match (gender == GenderCode::FEMALE, label.is_depressed()) {
            (true, false) => self.female_non_depressed,
            (true, true) => self.female_depressed,
            (false, false) => self.male_non_depressed,
            (false, true) => self.male_depressed,
        }
    }

    pub fn get_mut(&mut self, gender: GenderCode, label: DepressionLabel) -> &mut T {
        match (gender == GenderCode::FEMALE, label.is_depressed()) {
            (true, false) => &mut self.female_non_depressed,
            (true, true) => &mut self.female_depressed,
            (false, false) => &mut self.male_non_depressed,
            (false, true) => &mut self.male_depressed,
        }
    }

    pub fn values(&self) -> [T; 4] {
        [
            self.female_non_depressed,
            self.female_depressed,
            self.male_non_depressed,
            self.male_depressed,
        ]
    }
}

/// Cells in a fixed order: (F,0), (F,1), (M,0), (M,1).
pub const CELLS: [(GenderCode, DepressionLabel); 4] = [
    (GenderCode::FEMALE, DepressionLabel::NON_DEPRESSED),
    (GenderCode::FEMALE, DepressionLabel::DEPRESSED),
    (GenderCode::MALE, DepressionLabel::NON_DEPRESSED),
    (GenderCode::MALE, DepressionLabel::DEPRESSED),
];

pub type Distribution = CellTable<usize>;

impl Distribution {
    pub fn from_cells(f0: usize, f1: usize, m0: usize, m1: usize) -> Self {
        CellTable {
            female_non_depressed: f0,
            female_depressed: f1,
            male_non_depressed: m0,
            male_depressed: m1,
        }
    }

    pub fn total(&self) -> usize {
        self.values().iter().sum()
    }

    pub fn of_records(records: &[SessionRecord]) -> Self {
        let mut d = Distribution::default();
        for r in records {
            *d.get_mut(r.gender, r.label) += 1;
        }
        d
    }

    /// Depression rate within one gender group.
    pub fn depression_rate(&self, gender: GenderCode) -> f64 {
        let dep = self.get(gender, DepressionLabel::DEPRESSED) as f64;
        let all = dep + self.get(gender, DepressionLabel::NON_DEPRESSED) as f64;
        if all == 0.0 {
            0.0
        } else {
            dep / all
        }
    }

    pub fn fractions(&self) -> CellTable<f64> {
        let n = self.total().max(1) as f64;
        CellTable {
            female_non_depressed: self.female_non_depressed as f64 / n,
            female_depressed: self.female_depressed as f64 / n,
            male_non_depressed: self.male_non_depressed as f64 / n,
            male_depressed: self.male_depressed as f64 / n,
        }
    }
}

/// Label distribution of the combined DAIC-WOZ train + development split.
pub const REFERENCE_TRAIN: Distribution = CellTable {
    female_non_depressed: 39,
    female_depressed: 24,
    male_non_depressed: 60,
    male_depressed: 19,
};

/// Label distribution of the DAIC-WOZ test split.
pub const REFERENCE_TEST: Distribution = CellTable {
    female_non_depressed: 17,
    female_depressed: 7,
    male_non_depressed: 16,
    male_depressed: 7,
};

pub const SPLIT_TRAIN: &str = "train_combined";
pub const SPLIT_TEST: &str = "test";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub split_name: String,
    pub records: Vec<SessionRecord>,
    pub distribution: Distribution,
}

impl CorpusManifest {
    pub fn new(split_name: impl Into<String>, records: Vec<SessionRecord>) -> Self {
        CorpusManifest {
            split_name: split_name.into(),
            distribution: Distribution::of_records(&records),
            records,
        }
    }

    pub fn empty(split_name: impl Into<String>) -> Self {
        CorpusManifest::new(split_name, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks record invariants, id uniqueness and the stored distribution.
    pub fn validate(&self) -> Result<()> {
        if self.split_name != SPLIT_TRAIN && self.split_name != SPLIT_TEST {
            return Err(Error::invalid(format!("unknown split name {}", self.split_name)));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if let Validation::Violations(v) = validate_session(r) {
                return Err(Error::Session {
                    session_id: r.session_id.clone(),
                    message: v.join("; "),
                });
            }
            if !seen.insert(r.session_id.as_str()) {
                return Err(Error::Session {
                    session_id: r.session_id.clone(),
                    message: "duplicate session_id".into(),
                });
            }
        }
        if Distribution::of_records(&self.records) != self.distribution {
            return Err(Error::invalid("manifest distribution does not match its records"));
        }
        Ok(())
    }

    pub fn records_in(&self, gender: GenderCode, label: DepressionLabel) -> Vec<&SessionRecord> {
        self.records.iter().filter(|r| r.cell() == (gender, label)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: CorpusManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    /// SHA-256 of the serialized manifest.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellDiff {
    pub gender: GenderCode,
    pub label: DepressionLabel,
    pub expected: usize,
    pub actual: usize,
}

impl CellDiff {
    pub fn delta(&self) -> i64 {
        self.actual as i64 - self.expected as i64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DistributionCheck {
    Pass,
    Fail(Vec<CellDiff>),
}

pub fn validate_distribution(manifest: &CorpusManifest, expected: &Distribution) -> DistributionCheck {
    let actual = Distribution::of_records(&manifest.records);
    let diffs: Vec<CellDiff> = CELLS
        .iter()
        .filter(|&&(g, l)| actual.get(g, l) != expected.get(g, l))
        .map(|&(g, l)| CellDiff {
            gender: g,
            label: l,
            expected: expected.get(g, l),
            actual: actual.get(g, l),
        })
        .collect();
    if diffs.is_empty() {
        DistributionCheck::Pass
    } else {
        DistributionCheck::Fail(diffs)
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub train_proportions: CellTable<f64>,
    pub test_proportions: CellTable<f64>,
    pub feature_dim: usize,
    pub seq_len_range: (usize, usize),
    pub signal_strength: f64,
    pub gender_leakage: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: REFERENCE_TRAIN.total(),
            n_test: REFERENCE_TEST.total(),
            train_proportions: REFERENCE_TRAIN.fractions(),
            test_proportions: REFERENCE_TEST.fractions(),
            feature_dim: 16,
            seq_len_range: (4, 12),
            signal_strength: 1.0,
            gender_leakage: 1.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("train", &self.train_proportions), ("test", &self.test_proportions)] {
            let sum: f64 = p.values().iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("{name} proportions sum to {sum}, expected 1")));
            }
            if p.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("{name} proportions must be finite")));
            }
        }
        if self.seq_len_range.0 < 1 || self.seq_len_range.0 > self.seq_len_range.1 {
            return Err(Error::config("seq_len_range must satisfy 1 ≤ min ≤ max"));
        }
        if self.feature_dim < 2 {
            return Err(Error::config("feature_dim must be at least 2"));
        }
        if !(self.noise_sigma > 0.0) || !(self.signal_strength >= 0.0) || !(self.gender_leakage >= 0.0) {
            return Err(Error::config("noise_sigma must be > 0; signal_strength and gender_leakage ≥ 0"));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` over the four cells.
pub fn cell_counts(proportions: &CellTable<f64>, n: usize) -> Result<Distribution> {
    let p = proportions.values();
    if p.iter().any(|&v| v < 0.0) {
        return Err(Error::config("cell proportion is negative"));
    }
    let quotas: Vec<f64> = p.iter().map(|&v| v * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    if assigned > n {
        return Err(Error::config("proportions infeasible for requested size"));
    }
    let mut order: Vec<usize> = (0..4).collect();
    // stable on ties: earlier cell wins
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    Ok(Distribution::from_cells(counts[0], counts[1], counts[2], counts[3]))
}

/// Two orthonormal directions (label, gender) from a seeded random rotation.
pub fn synthetic_directions(dim: usize, seed: u64) -> (Array1<f64>, Array1<f64>) {
    let mut rng = seeded_rng(seed, 10);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    loop {
        let a = Array1::from_shape_fn(dim, |_| normal.sample(&mut rng));
        let b = Array1::from_shape_fn(dim, |_| normal.sample(&mut rng));
        let na = a.dot(&a).sqrt();
        if na < 1e-6 {
            continue;
        }
        let u = &a / na;
        let b_perp = &b - &(&u * u.dot(&b));
        let nb = b_perp.dot(&b_perp).sqrt();
        if nb < 1e-6 {
            continue;
        }
        return (u, b_perp / nb);
    }
}

fn synth_split(
    cfg: &SynthConfig,
    split: &str,
    counts: &Distribution,
    directions: &(Array1<f64>, Array1<f64>),
    rng: &mut rand_chacha::ChaCha8Rng,
) -> CorpusManifest {
    let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let (u_label, u_gender) = directions;
    let mut records = Vec::with_capacity(counts.total());
    for &(gender, label) in &CELLS {
        let shift = u_label * ((label.value() as f64 - 0.5) * cfg.signal_strength)
            + u_gender * ((gender.value() as f64 - 0.5) * cfg.gender_leakage);
        for _ in 0..counts.get(gender, label) {
            let len = rng.random_range(cfg.seq_len_range.0..=cfg.seq_len_range.1);
            let mut data = Array2::from_shape_fn((len, cfg.feature_dim), |_| normal.sample(rng));
            for mut row in data.rows_mut() {
                row += &shift;
            }
            let id = format!("{split}-{:05}", records.len());
            let features = FeatureSequence::new(data).expect("finite synthetic rows");
            records.push(SessionRecord::with_features(id, gender, label, features));
        }
    }
    records.shuffle(rng);
    CorpusManifest::new(split, records)
}

/// Synthetic corpora whose feature rows carry a label signal, a gender
/// shortcut along an orthogonal direction, and isotropic noise.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(CorpusManifest, CorpusManifest)> {
    cfg.validate()?;
    let train_counts = cell_counts(&cfg.train_proportions, cfg.n_train)?;
    let test_counts = cell_counts(&cfg.test_proportions, cfg.n_test)?;
    let directions = synthetic_directions(cfg.feature_dim, cfg.seed);
    let mut rng = seeded_rng(cfg.seed, 11);
    let train = synth_split(cfg, SPLIT_TRAIN, &train_counts, &directions, &mut rng);
    let test = synth_split(cfg, SPLIT_TEST, &test_counts, &directions, &mut rng);
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// DAIC-WOZ

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreRow {
    pub participant_id: String,
    pub phq_score: u32,
    /// Gender as coded in the score table.
    pub gender_code: u8,
}

/// Reads a PHQ-8 score table. Columns are found by header name: an id column
/// containing `participant`, a score column containing `score`, and a
/// `gender` column.
pub fn read_score_table(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |message: String| Error::Parse {
        context: path.display().to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    let find = |needle: &str| {
        headers
            .iter()
            .position(|h| h.to_ascii_lowercase().contains(needle))
            .ok_or_else(|| parse_err(format!("no column matching '{needle}'")))
    };
    let id_col = find("participant")?;
    let score_col = find("score")?;
    let gender_col = find("gender")?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let field = |col: usize| rec.get(col).unwrap_or("").to_string();
        let phq_score = field(score_col)
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| parse_err(format!("row {}: bad score '{}'", i + 2, field(score_col))))?;
        let gender_code = field(gender_col)
            .parse::<u8>()
            .ok()
            .filter(|&g| g <= 1)
            .ok_or_else(|| parse_err(format!("row {}: bad gender '{}'", i + 2, field(gender_col))))?;
        let participant_id = field(id_col);
        if participant_id.is_empty() {
            return Err(parse_err(format!("row {}: empty participant id", i + 2)));
        }
        rows.push(ScoreRow {
            participant_id,
            phq_score: phq_score.round() as u32,
            gender_code,
        });
    }
    Ok(rows)
}

/// Session ids per original split. Train and development are merged into
/// the combined training manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.dev.is_empty() && self.test.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub phq_threshold: u32,
    /// Value of the score table's gender column that denotes male. DAIC-WOZ
    /// codes male as 1 and female as 0.
    pub male_code: u8,
    pub exclude: Vec<String>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            phq_threshold: 10,
            male_code: 1,
            exclude: Vec::new(),
        }
    }
}

/// Score files found under a DAIC-WOZ root: (train, dev, test).
pub fn discover_score_files(root: &Path) -> Result<(Option<PathBuf>, Option<PathBuf>, Option<PathBuf>)> {
    let mut found = (None, None, None);
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut names: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    names.sort();
    for path in names {
        let Some(name) = path.file_name().and_then(|n| n.to_str()).map(str::to_ascii_lowercase) else {
            continue;
        };
        if !name.ends_with(".csv") || !name.contains("split") {
            continue;
        }
        if name.contains("train") && found.0.is_none() {
            found.0 = Some(path);
        } else if name.contains("dev") && found.1.is_none() {
            found.1 = Some(path);
        } else if name.contains("test") && found.2.is_none() {
            found.2 = Some(path);
        }
    }
    Ok(found)
}

/// Score table and split spec from the score CSVs under `root`.
pub fn load_daicwoz_splits(root: &Path) -> Result<(SplitSpec, BTreeMap<String, ScoreRow>)> {
    let (train, dev, test) = discover_score_files(root)?;
    let mut spec = SplitSpec::default();
    let mut table = BTreeMap::new();
    for (path, ids) in [(train, &mut spec.train), (dev, &mut spec.dev), (test, &mut spec.test)] {
        let Some(path) = path else { continue };
        for row in read_score_table(&path)? {
            ids.push(row.participant_id.clone());
            table.insert(row.participant_id.clone(), row);
        }
    }
    Ok((spec, table))
}

fn session_file(root: &Path, id: &str, suffix: &str) -> Option<PathBuf> {
    let name = format!("{id}_{suffix}");
    [root.join(format!("{id}_P")).join(&name), root.join(id).join(&name), root.join(&name)]
        .into_iter()
        .find(|p| p.is_file())
}

/// Ingested DAIC-WOZ manifests.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestedCorpus {
    pub train_combined: CorpusManifest,
    pub test: CorpusManifest,
}

/// Builds manifests for the combined train split and the test split.
/// Labels are `score ≥ phq_threshold`.
pub fn ingest_daicwoz(
    root: &Path,
    split_spec: &SplitSpec,
    scores: &BTreeMap<String, ScoreRow>,
    opts: &IngestOptions,
) -> Result<IngestedCorpus> {
    let excluded: HashSet<&str> = opts.exclude.iter().map(String::as_str).collect();
    let build = |ids: &mut dyn Iterator<Item = &String>, split: &str| -> Result<CorpusManifest> {
        let mut records = Vec::new();
        for id in ids {
            if excluded.contains(id.as_str()) {
                continue;
            }
            let row = scores.get(id).ok_or_else(|| Error::Session {
                session_id: id.clone(),
                message: "no PHQ-8 score".into(),
            })?;
            let audio = session_file(root, id, "AUDIO.wav").ok_or_else(|| Error::Session {
                session_id: id.clone(),
                message: "missing audio file".into(),
            })?;
            let transcript = session_file(root, id, "TRANSCRIPT.csv").ok_or_else(|| Error::Session {
                session_id: id.clone(),
                message: "missing transcript file".into(),
            })?;
            let gender = if row.gender_code == opts.male_code {
                GenderCode::MALE
            } else {
                GenderCode::FEMALE
            };
            let label = DepressionLabel::from_index(usize::from(row.phq_score >= opts.phq_threshold));
            records.push(SessionRecord::with_audio(id.clone(), gender, label, audio, Some(transcript)));
        }
        let m = CorpusManifest::new(split, records);
        m.validate()?;
        Ok(m)
    };
    let train_combined = build(&mut split_spec.train.iter().chain(split_spec.dev.iter()), SPLIT_TRAIN)?;
    let test = build(&mut split_spec.test.iter(), SPLIT_TEST)?;
    Ok(IngestedCorpus { train_combined, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_counts_and_rate_ratio() {
        assert_eq!(REFERENCE_TRAIN.total(), 142);
        assert_eq!(REFERENCE_TEST.total(), 47);
        let ratio = REFERENCE_TRAIN.depression_rate(GenderCode::FEMALE) / REFERENCE_TRAIN.depression_rate(GenderCode::MALE);
        assert!((ratio - (24.0 / 63.0) / (19.0 / 79.0)).abs() < 1e-12);
        assert!((ratio - 1.58).abs() < 0.01);
    }

    #[test]
    fn largest_remainder_hits_table_one() {
        assert_eq!(cell_counts(&REFERENCE_TRAIN.fractions(), 142).unwrap(), REFERENCE_TRAIN);
        assert_eq!(cell_counts(&REFERENCE_TRAIN.fractions(), 568).unwrap(), Distribution::from_cells(156, 96, 240, 76));
        let c = cell_counts(&REFERENCE_TRAIN.fractions(), 100).unwrap();
        assert_eq!(c.total(), 100);
        let neg = CellTable { female_non_depressed: 1.2, female_depressed: -0.2, male_non_depressed: 0.0, male_depressed: 0.0 };
        assert!(cell_counts(&neg, 10).is_err());
    }

    #[test]
    fn validate_distribution_reports_cells() {
        let (mut train, _) = generate_synthetic(&SynthConfig::default()).unwrap();
        assert_eq!(validate_distribution(&train, &REFERENCE_TRAIN), DistributionCheck::Pass);
        let idx = train.records.iter().position(|r| r.cell() == (GenderCode::MALE, DepressionLabel::DEPRESSED)).unwrap();
        train.records[idx].label = DepressionLabel::NON_DEPRESSED;
        match validate_distribution(&train, &REFERENCE_TRAIN) {
            DistributionCheck::Fail(diffs) => {
                assert_eq!(diffs.len(), 2);
                assert!(diffs.iter().all(|d| d.delta().abs() == 1));
            }
            DistributionCheck::Pass => panic!("perturbation not detected"),
        }
        let empty = CorpusManifest::empty(SPLIT_TEST);
        assert_eq!(validate_distribution(&empty, &Distribution::default()), DistributionCheck::Pass);
    }

    #[test]
    fn synthetic_is_deterministic_and_table_shaped() {
        let cfg = SynthConfig { seed: 42, ..Default::default() };
        let (a_train, a_test) = generate_synthetic(&cfg).unwrap();
        let (b_train, b_test) = generate_synthetic(&cfg).unwrap();
        assert_eq!(a_train.to_json().unwrap(), b_train.to_json().unwrap());
        assert_eq!(a_test, b_test);
        assert_eq!(a_train.distribution, REFERENCE_TRAIN);
        assert_eq!(a_test.distribution, REFERENCE_TEST);
        a_train.validate().unwrap();
        let other = generate_synthetic(&SynthConfig { seed: 43, ..Default::default() }).unwrap().0;
        assert_ne!(other, a_train);
    }

    #[test]
    fn synthetic_directions_are_orthonormal() {
        let (u, v) = synthetic_directions(8, 3);
        assert!((u.dot(&u) - 1.0).abs() < 1e-12);
        assert!((v.dot(&v) - 1.0).abs() < 1e-12);
        assert!(u.dot(&v).abs() < 1e-12);
    }

    #[test]
    fn synthetic_cell_means_follow_directions() {
        let cfg = SynthConfig {
            n_train: 4000,
            noise_sigma: 0.5,
            signal_strength: 2.0,
            gender_leakage: 1.0,
            seed: 5,
            ..Default::default()
        };
        let (train, _) = generate_synthetic(&cfg).unwrap();
        let (u_label, u_gender) = synthetic_directions(cfg.feature_dim, cfg.seed);
        let mean_proj = |g: GenderCode, l: DepressionLabel, u: &Array1<f64>| {
            let rs = train.records_in(g, l);
            rs.iter().map(|r| r.features.as_ref().unwrap().mean_pool().dot(u)).sum::<f64>() / rs.len() as f64
        };
        let sep = mean_proj(GenderCode::MALE, DepressionLabel::DEPRESSED, &u_label)
            - mean_proj(GenderCode::MALE, DepressionLabel::NON_DEPRESSED, &u_label);
        assert!((sep - 2.0).abs() < 0.1, "label separation {sep}");
        let gsep = mean_proj(GenderCode::FEMALE, DepressionLabel::NON_DEPRESSED, &u_gender)
            - mean_proj(GenderCode::MALE, DepressionLabel::NON_DEPRESSED, &u_gender);
        assert!((gsep - 1.0).abs() < 0.1, "gender separation {gsep}");
    }

    #[test]
    fn synth_config_validation() {
        let bad = SynthConfig { seq_len_range: (0, 3), ..Default::default() };
        assert!(generate_synthetic(&bad).is_err());
        let mut bad = SynthConfig::default();
        bad.train_proportions.male_depressed += 0.1;
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn empty_split_spec_gives_empty_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let out = ingest_daicwoz(dir.path(), &SplitSpec::default(), &BTreeMap::new(), &IngestOptions::default()).unwrap();
        assert!(out.train_combined.is_empty() && out.test.is_empty());
        assert_eq!(out.train_combined.distribution.total(), 0);
    }

    #[test]
    fn score_table_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train_split.csv");
        std::fs::write(&p, "Participant_ID,PHQ8_Binary,PHQ8_Score,Gender\n300,0,abc,1\n").unwrap();
        assert!(matches!(read_score_table(&p), Err(Error::Parse { .. })));
        std::fs::write(&p, "Participant_ID,Gender\n300,1\n").unwrap();
        assert!(matches!(read_score_table(&p), Err(Error::Parse { .. })));
        std::fs::write(&p, "Participant_ID,PHQ8_Binary,PHQ8_Score,Gender\n300,1,12,1\n").unwrap();
        let rows = read_score_table(&p).unwrap();
        assert_eq!(rows, vec![ScoreRow { participant_id: "300".into(), phq_score: 12, gender_code: 1 }]);
    }
}
