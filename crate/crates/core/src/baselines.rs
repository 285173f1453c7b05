//! Comparison debiasing strategies: majority sub-sampling and MixFeat
//! augmentation in ALF space.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Beta, Distribution as _};
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, Distribution, CELLS};
use crate::datamodel::{DepressionLabel, FeatureSequence, GenderCode, SessionRecord};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

/// Down-samples every (gender, label) cell without replacement to the size
/// of the smallest cell. Record order is preserved.
pub fn sub_sample(manifest: &CorpusManifest, seed: u64) -> Result<CorpusManifest> {
    let dist = Distribution::of_records(&manifest.records);
    let target = dist.values().into_iter().min().unwrap_or(0);
    if target == 0 {
        return Err(Error::invalid("sub-sampling needs every (gender, label) cell to be nonempty"));
    }
    let mut rng = seeded_rng(seed, 30);
    let mut keep = vec![false; manifest.records.len()];
    for &(g, l) in &CELLS {
        let members: Vec<usize> = (0..manifest.records.len())
            .filter(|&i| manifest.records[i].cell() == (g, l))
            .collect();
        for k in rand::seq::index::sample(&mut rng, members.len(), target) {
            keep[members[k]] = true;
        }
    }
    let records = manifest
        .records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    Ok(CorpusManifest::new(manifest.split_name.clone(), records))
}

/// Distribution of the mixing coefficient λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSampler {
    Beta { alpha: f64, beta: f64 },
    Fixed { value: f64 },
}

impl Default for LambdaSampler {
    fn default() -> Self {
        LambdaSampler::Beta { alpha: 1.0, beta: 1.0 }
    }
}

impl LambdaSampler {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LambdaSampler::Beta { alpha, beta } if alpha > 0.0 && beta > 0.0 => Ok(()),
            LambdaSampler::Fixed { value } if (0.0..=1.0).contains(&value) => Ok(()),
            LambdaSampler::Beta { .. } => Err(Error::config("Beta parameters must be positive")),
            LambdaSampler::Fixed { .. } => Err(Error::config("fixed lambda must lie in [0, 1]")),
        }
    }
}

/// Indices of the two parents within a cell and the coefficient on `i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixPair {
    pub i: usize,
    pub j: usize,
    pub lambda: f64,
}

fn cell_stream(gender: GenderCode, label: DepressionLabel) -> u64 {
    20 + 2 * gender.value() as u64 + label.value() as u64
}

/// Draws `n_new` parent pairs `i ≠ j` from a cell of `cell_size` members.
pub fn mixfeat_plan(
    cell_size: usize,
    n_new: usize,
    seed: u64,
    stream: u64,
    sampler: &LambdaSampler,
) -> Result<Vec<MixPair>> {
    if cell_size < 2 {
        return Err(Error::invalid(format!("MixFeat needs at least 2 cell members, got {cell_size}")));
    }
    sampler.validate()?;
    let mut rng = seeded_rng(seed, stream);
    let beta = match *sampler {
        LambdaSampler::Beta { alpha, beta } => Some(Beta::new(alpha, beta).map_err(|e| Error::config(e.to_string()))?),
        LambdaSampler::Fixed { .. } => None,
    };
    Ok((0..n_new)
        .map(|_| {
            let i = rng.random_range(0..cell_size);
            let mut j = rng.random_range(0..cell_size - 1);
            if j >= i {
                j += 1;
            }
            let lambda = match (*sampler, &beta) {
                (LambdaSampler::Fixed { value }, _) => value,
                (_, Some(b)) => b.sample(&mut rng),
                _ => unreachable!("beta constructed above"),
            };
            MixPair { i, j, lambda }
        })
        .collect())
}

/// `λ·a + (1−λ)·b`
pub fn mix(a: &Array1<f64>, b: &Array1<f64>, lambda: f64) -> Array1<f64> {
    a * lambda + b * (1.0 - lambda)
}

/// A synthetic ALF interpolated between two members of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedFeature {
    pub features: Vec<f64>,
    pub gender: GenderCode,
    pub label: DepressionLabel,
    pub parents: (String, String),
    pub lambda: f64,
}

/// New features `λ·C_i + (1−λ)·C_j` for one (gender, label) cell, given as
/// `(session_id, ALF)` pairs.
pub fn mixfeat_augment(
    gender: GenderCode,
    label: DepressionLabel,
    members: &[(String, Array1<f64>)],
    n_new: usize,
    seed: u64,
    sampler: &LambdaSampler,
) -> Result<Vec<AugmentedFeature>> {
    let plan = mixfeat_plan(members.len(), n_new, seed, cell_stream(gender, label), sampler)?;
    Ok(plan
        .into_iter()
        .map(|p| AugmentedFeature {
            features: mix(&members[p.i].1, &members[p.j].1, p.lambda).to_vec(),
            gender,
            label,
            parents: (members[p.i].0.clone(), members[p.j].0.clone()),
            lambda: p.lambda,
        })
        .collect())
}

/// Raises every cell to the size of the largest one with MixFeat records.
///
/// When both parents carry feature sequences the new record stores the mixed
/// mean-pooled features as a one-row sequence. Otherwise it keeps only the
/// parent ids and λ, and the ALF is mixed during training.
pub fn balance_by_augmentation(manifest: &CorpusManifest, seed: u64, sampler: &LambdaSampler) -> Result<CorpusManifest> {
    let dist = Distribution::of_records(&manifest.records);
    let target = dist.values().into_iter().max().unwrap_or(0);
    let mut records = manifest.records.clone();
    for &(g, l) in &CELLS {
        let members = manifest.records_in(g, l);
        if members.len() < 2 {
            return Err(Error::invalid(format!(
                "cell (gender {g}, label {}) has {} members; MixFeat needs 2",
                l.value(),
                members.len()
            )));
        }
        let n_new = target - members.len();
        let plan = mixfeat_plan(members.len(), n_new, seed, cell_stream(g, l), sampler)?;
        for (k, p) in plan.into_iter().enumerate() {
            let (a, b) = (members[p.i], members[p.j]);
            let features = match (&a.features, &b.features) {
                (Some(fa), Some(fb)) => {
                    let row = mix(&fa.mean_pool(), &fb.mean_pool(), p.lambda);
                    let dim = row.len();
                    let data = Array2::from_shape_vec((1, dim), row.to_vec()).expect("one row");
                    Some(FeatureSequence::new(data)?)
                }
                _ => None,
            };
            records.push(SessionRecord {
                session_id: format!("aug-{}{}-{k:05}", g.value(), l.value()),
                gender: g,
                label: l,
                audio_path: None,
                transcript_path: None,
                features,
                augmented: true,
                parents: Some((a.session_id.clone(), b.session_id.clone())),
                lambda: Some(p.lambda),
            });
        }
    }
    Ok(CorpusManifest::new(manifest.split_name.clone(), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig, REFERENCE_TRAIN};
    use ndarray::array;
    use std::collections::HashSet;

    fn reference_train() -> CorpusManifest {
        generate_synthetic(&SynthConfig { seed: 9, ..Default::default() }).unwrap().0
    }

    #[test]
    fn sub_sample_table_one() {
        let m = reference_train();
        let s = sub_sample(&m, 1).unwrap();
        assert_eq!(s.distribution, Distribution::from_cells(19, 19, 19, 19));
        assert_eq!(s.len(), 76);
        let ids: HashSet<_> = m.records.iter().map(|r| &r.session_id).collect();
        assert!(s.records.iter().all(|r| ids.contains(&r.session_id)));
        assert_eq!(sub_sample(&m, 1).unwrap(), s);
        assert_ne!(sub_sample(&m, 2).unwrap(), s);
    }

    #[test]
    fn sub_sample_fixed_point_and_empty_cell() {
        let s = sub_sample(&reference_train(), 4).unwrap();
        assert_eq!(sub_sample(&s, 99).unwrap(), s);
        let mut m = reference_train();
        m.records.retain(|r| r.cell() != (GenderCode::MALE, DepressionLabel::DEPRESSED));
        assert!(sub_sample(&m, 0).is_err());
    }

    #[test]
    fn mixfeat_arithmetic() {
        let members = vec![("a".to_string(), array![0.0, 2.0]), ("b".to_string(), array![2.0, 0.0])];
        let half = mixfeat_augment(GenderCode::MALE, DepressionLabel::DEPRESSED, &members, 4, 0, &LambdaSampler::Fixed { value: 0.5 }).unwrap();
        assert!(half.iter().all(|f| f.features == vec![1.0, 1.0]));
        let one = mixfeat_augment(GenderCode::MALE, DepressionLabel::DEPRESSED, &members, 4, 0, &LambdaSampler::Fixed { value: 1.0 }).unwrap();
        for f in &one {
            let parent = members.iter().find(|m| m.0 == f.parents.0).unwrap();
            assert_eq!(f.features, parent.1.to_vec());
        }
        assert!(mixfeat_augment(GenderCode::MALE, DepressionLabel::DEPRESSED, &members[..1], 1, 0, &LambdaSampler::default()).is_err());
        assert!(mixfeat_augment(GenderCode::MALE, DepressionLabel::DEPRESSED, &members[..1], 0, 0, &LambdaSampler::default()).is_err());
        assert!(mixfeat_plan(3, 1, 0, 0, &LambdaSampler::Beta { alpha: 0.0, beta: 1.0 }).is_err());
    }

    #[test]
    fn mixfeat_outputs_are_convex() {
        let members: Vec<_> = (0..5).map(|i| (format!("s{i}"), array![i as f64, -(i as f64) * 2.0, 3.0])).collect();
        let out = mixfeat_augment(GenderCode::FEMALE, DepressionLabel::NON_DEPRESSED, &members, 200, 3, &LambdaSampler::default()).unwrap();
        for f in &out {
            assert_ne!(f.parents.0, f.parents.1);
            assert!((0.0..=1.0).contains(&f.lambda));
            let a = &members.iter().find(|m| m.0 == f.parents.0).unwrap().1;
            let b = &members.iter().find(|m| m.0 == f.parents.1).unwrap().1;
            for d in 0..3 {
                let (lo, hi) = (a[d].min(b[d]), a[d].max(b[d]));
                assert!(f.features[d] >= lo - 1e-12 && f.features[d] <= hi + 1e-12);
            }
            assert_eq!((f.gender, f.label), (GenderCode::FEMALE, DepressionLabel::NON_DEPRESSED));
        }
    }

    #[test]
    fn balance_table_one() {
        let m = reference_train();
        let b = balance_by_augmentation(&m, 5, &LambdaSampler::default()).unwrap();
        assert_eq!(b.distribution, Distribution::from_cells(60, 60, 60, 60));
        let added = |g, l| b.records_in(g, l).iter().filter(|r| r.augmented).count();
        assert_eq!(added(GenderCode::FEMALE, DepressionLabel::NON_DEPRESSED), 60 - REFERENCE_TRAIN.female_non_depressed);
        assert_eq!(added(GenderCode::FEMALE, DepressionLabel::NON_DEPRESSED), 21);
        assert_eq!(added(GenderCode::FEMALE, DepressionLabel::DEPRESSED), 36);
        assert_eq!(added(GenderCode::MALE, DepressionLabel::NON_DEPRESSED), 0);
        assert_eq!(added(GenderCode::MALE, DepressionLabel::DEPRESSED), 41);
        b.validate().unwrap();
        for r in b.records.iter().filter(|r| r.augmented) {
            let (pa, pb) = r.parents.as_ref().unwrap();
            let a = m.records.iter().find(|x| &x.session_id == pa).unwrap();
            let c = m.records.iter().find(|x| &x.session_id == pb).unwrap();
            assert_eq!(a.cell(), r.cell());
            assert_eq!(c.cell(), r.cell());
            let lam = r.lambda.unwrap();
            let expect = mix(&a.features.as_ref().unwrap().mean_pool(), &c.features.as_ref().unwrap().mean_pool(), lam);
            let got = r.features.as_ref().unwrap().mean_pool();
            assert!((&got - &expect).iter().all(|d| d.abs() < 1e-12));
        }
        let balanced = balance_by_augmentation(&b, 1, &LambdaSampler::default()).unwrap();
        assert_eq!(balanced.len(), b.len());
    }

    #[test]
    fn balance_audio_records_keeps_parents_only() {
        let mut recs = Vec::new();
        for &(g, l) in &CELLS {
            for k in 0..(2 + g.value() as usize) {
                recs.push(SessionRecord::with_audio(format!("{}{}{k}", g.value(), l.value()), g, l, "x.wav".into(), None));
            }
        }
        let m = CorpusManifest::new(crate::corpus::SPLIT_TRAIN, recs);
        let b = balance_by_augmentation(&m, 0, &LambdaSampler::default()).unwrap();
        b.validate().unwrap();
        let aug: Vec<_> = b.records.iter().filter(|r| r.augmented).collect();
        assert_eq!(aug.len(), 2);
        assert!(aug.iter().all(|r| r.features.is_none() && r.parents.is_some()));
    }
}
