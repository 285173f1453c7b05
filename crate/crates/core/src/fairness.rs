//! Classification and group-fairness metrics.
//!
//! Depressed (label 1) is the positive class throughout. Female (G = 1) is
//! the majority group and male (G = 0) the minority group.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datamodel::{GenderCode, PredictionRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn predicted_positive(&self) -> usize {
        self.tp + self.fp
    }
}

/// Counts overall and per gender group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupedConfusion {
    pub overall: ConfusionCounts,
    pub male: ConfusionCounts,
    pub female: ConfusionCounts,
}

impl GroupedConfusion {
    pub fn group(&self, gender: GenderCode) -> &ConfusionCounts {
        if gender == GenderCode::FEMALE {
            &self.female
        } else {
            &self.male
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Unweighted mean over the two classes.
    #[default]
    Macro,
    /// Depressed class only.
    PositiveClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreMetrics {
    pub f1: f64,
    pub accuracy: f64,
    pub recall: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(records: &[PredictionRecord]) -> Result<GroupedConfusion> {
    if records.is_empty() {
        return Err(Error::invalid("no prediction records"));
    }
    let mut out = GroupedConfusion::default();
    for r in records {
        if !r.gender.is_valid() || !r.true_label.is_valid() || !r.predicted_label.is_valid() {
            return Err(Error::invalid(format!("record {} has out-of-range codes", r.session_id)));
        }
        let truth = r.true_label.is_depressed();
        let pred = r.predicted_label.is_depressed();
        out.overall.add(truth, pred);
        if r.gender == GenderCode::FEMALE {
            out.female.add(truth, pred);
        } else {
            out.male.add(truth, pred);
        }
    }
    Ok(out)
}

/// Accuracy, F1 and recall. Class terms with a zero denominator count as 0.
pub fn core_metrics(c: &ConfusionCounts, averaging: Averaging) -> CoreMetrics {
    let f1_pos = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let f1_neg = ratio(2 * c.tn, 2 * c.tn + c.fn_ + c.fp);
    let rec_pos = ratio(c.tp, c.tp + c.fn_);
    let rec_neg = ratio(c.tn, c.tn + c.fp);
    let (f1, recall) = match averaging {
        Averaging::Macro => ((f1_pos + f1_neg) / 2.0, (rec_pos + rec_neg) / 2.0),
        Averaging::PositiveClass => (f1_pos, rec_pos),
    };
    CoreMetrics {
        f1,
        accuracy: c.accuracy(),
        recall,
    }
}

fn require_both_groups(c: &GroupedConfusion) -> Result<()> {
    if c.male.total() == 0 || c.female.total() == 0 {
        return Err(Error::invalid("both gender groups must be present"));
    }
    Ok(())
}

/// `|Acc(G=1) − Acc(G=0)|`
pub fn equal_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    let c = confusion(records)?;
    require_both_groups(&c)?;
    Ok((c.female.accuracy() - c.male.accuracy()).abs())
}

/// `Pr(Ŷ=1 | G=1) / Pr(Ŷ=1 | G=0)`; `None` when no male sample is predicted
/// positive.
pub fn disparate_impact(records: &[PredictionRecord]) -> Result<Option<f64>> {
    let c = confusion(records)?;
    require_both_groups(&c)?;
    Ok(di_from_counts(&c))
}

fn di_from_counts(c: &GroupedConfusion) -> Option<f64> {
    if c.male.predicted_positive() == 0 {
        return None;
    }
    let female_rate = ratio(c.female.predicted_positive(), c.female.total());
    let male_rate = ratio(c.male.predicted_positive(), c.male.total());
    Some(female_rate / male_rate)
}

/// One row of metrics for a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub f1: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub male_f1: f64,
    pub female_f1: f64,
    pub ea: f64,
    #[serde(with = "di_serde")]
    pub di: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 7] = ["F1-score", "Accuracy", "Recall", "Male-F1", "Female-F1", "EA", "DI"];

impl FairnessReport {
    pub fn from_records(records: &[PredictionRecord], averaging: Averaging) -> Result<Self> {
        let c = confusion(records)?;
        require_both_groups(&c)?;
        let overall = core_metrics(&c.overall, averaging);
        Ok(FairnessReport {
            f1: overall.f1,
            accuracy: overall.accuracy,
            recall: overall.recall,
            male_f1: core_metrics(&c.male, averaging).f1,
            female_f1: core_metrics(&c.female, averaging).f1,
            ea: (c.female.accuracy() - c.male.accuracy()).abs(),
            di: di_from_counts(&c),
        })
    }

    /// Cells in [`REPORT_COLUMNS`] order, three decimals, `NA` for an
    /// undefined DI.
    pub fn cells(&self) -> [String; 7] {
        let f = |v: f64| format!("{v:.3}");
        [
            f(self.f1),
            f(self.accuracy),
            f(self.recall),
            f(self.male_f1),
            f(self.female_f1),
            f(self.ea),
            self.di.map_or_else(|| "NA".to_string(), f),
        ]
    }
}

mod di_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("NA"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
        Null(()),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Text(t) if t == "NA" => Ok(None),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected DI value {t}"))),
            Raw::Null(()) => Ok(None),
        }
    }
}
