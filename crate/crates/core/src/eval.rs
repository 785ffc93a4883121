//! Verification and identification metrics over cosine similarity.
//!
//! A pair is predicted "same" when its score is at or above the threshold.

use ndarray::{Array2, ArrayView2, Axis};
use serde::Serialize;
use thiserror::Error;

use crate::datagen::PairProtocol;
use crate::format::shortest;

/// Scores may exceed ±1 by this much from rounding.
const SCORE_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("fold {0} has no pairs")]
    EmptyFold(usize),
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("score {score} at pair {index} is not a cosine similarity")]
    ScoreOutOfRange { index: usize, score: f64 },
    #[error("no negative pairs")]
    NoNegatives,
    #[error("no positive pairs")]
    NoPositives,
    #[error("false-accept rate must be in (0, 1], got {0}")]
    InvalidFar(f64),
    #[error("probe {probe} has identity {label}, which is not in the gallery")]
    MissingGalleryIdentity { probe: usize, label: usize },
    #[error("distractor {index} shares identity {label} with a probe")]
    DistractorOverlap { index: usize, label: usize },
    #[error("zero-norm {what} embedding {index}")]
    ZeroVector { what: &'static str, index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPairs {
    pub scores: Vec<f64>,
    pub same: Vec<bool>,
    pub folds: Vec<usize>,
}

impl ScoredPairs {
    pub fn new(scores: Vec<f64>, same: Vec<bool>, folds: Vec<usize>) -> Result<Self, EvalError> {
        if scores.len() != same.len() || scores.len() != folds.len() {
            return Err(EvalError::LengthMismatch(format!(
                "{} scores, {} labels, {} fold ids",
                scores.len(),
                same.len(),
                folds.len()
            )));
        }
        if let Some((index, &score)) = scores
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.abs() <= 1.0 + SCORE_SLACK))
        {
            return Err(EvalError::ScoreOutOfRange { index, score });
        }
        Ok(Self { scores, same, folds })
    }

    /// Cosine similarity of every protocol pair.
    pub fn from_embeddings(emb: ArrayView2<f64>, protocol: &PairProtocol) -> Result<Self, EvalError> {
        let unit = unit_rows(emb, "sample")?;
        if let Some(p) = protocol.pairs.iter().find(|p| p.a.max(p.b) >= unit.nrows()) {
            return Err(EvalError::LengthMismatch(format!(
                "pair ({}, {}) indexes past {} embeddings",
                p.a,
                p.b,
                unit.nrows()
            )));
        }
        let scores = protocol
            .pairs
            .iter()
            .map(|p| unit.row(p.a).dot(&unit.row(p.b)).clamp(-1.0, 1.0))
            .collect();
        Self::new(
            scores,
            protocol.pairs.iter().map(|p| p.same).collect(),
            protocol.pairs.iter().map(|p| p.fold).collect(),
        )
    }
}

fn unit_rows(m: ArrayView2<f64>, what: &'static str) -> Result<Array2<f64>, EvalError> {
    let mut out = m.to_owned();
    for (index, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) {
            return Err(EvalError::ZeroVector { what, index });
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

/// Threshold maximizing accuracy on `(score, same)`; ties go to the lowest
/// threshold. Candidates are −∞, midpoints between consecutive distinct
/// scores, and +∞.
pub fn best_threshold(pairs: &[(f64, bool)]) -> (f64, usize) {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = sorted.iter().filter(|p| p.1).count();
    // Everything accepted: correct = positives.
    let mut correct = positives;
    let mut best = (f64::NEG_INFINITY, correct);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            correct = if sorted[i].1 { correct - 1 } else { correct + 1 };
            i += 1;
        }
        let threshold = if i < sorted.len() {
            v + (sorted[i].0 - v) / 2.0
        } else {
            f64::INFINITY
        };
        if correct > best.1 {
            best = (threshold, correct);
        }
    }
    best
}

fn accuracy_at(pairs: &[(f64, bool)], threshold: f64) -> f64 {
    let correct = pairs.iter().filter(|(s, same)| (*s >= threshold) == *same).count();
    correct as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationResult {
    pub accuracy: f64,
    /// Threshold applied to each fold, chosen on the other folds. Infinite
    /// thresholds serialize as `null`.
    pub thresholds: Vec<f64>,
    pub fold_accuracies: Vec<f64>,
}

/// Leave-one-fold-out verification accuracy. Fold ids must cover
/// `0..folds` with no gaps.
pub fn tenfold_verification(pairs: &ScoredPairs) -> Result<VerificationResult, EvalError> {
    let folds = pairs.folds.iter().max().map_or(0, |m| m + 1);
    if folds < 2 {
        return Err(EvalError::TooFewFolds(folds));
    }
    let mut by_fold: Vec<Vec<(f64, bool)>> = vec![Vec::new(); folds];
    for ((&s, &same), &f) in pairs.scores.iter().zip(&pairs.same).zip(&pairs.folds) {
        by_fold[f].push((s, same));
    }
    if let Some(k) = by_fold.iter().position(Vec::is_empty) {
        return Err(EvalError::EmptyFold(k));
    }
    let mut thresholds = Vec::with_capacity(folds);
    let mut fold_accuracies = Vec::with_capacity(folds);
    for k in 0..folds {
        let train: Vec<(f64, bool)> = by_fold
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        let (t, _) = best_threshold(&train);
        thresholds.push(t);
        fold_accuracies.push(accuracy_at(&by_fold[k], t));
    }
    Ok(VerificationResult {
        accuracy: fold_accuracies.iter().sum::<f64>() / folds as f64,
        thresholds,
        fold_accuracies,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TarAtFar {
    pub tar: f64,
    pub far: f64,
    /// `+∞` (serialized as `null`) when no observed score qualifies.
    pub threshold: f64,
}

fn check_labels(scores: &[f64], same: &[bool]) -> Result<(usize, usize), EvalError> {
    if scores.len() != same.len() {
        return Err(EvalError::LengthMismatch(format!("{} scores, {} labels", scores.len(), same.len())));
    }
    let pos = same.iter().filter(|&&s| s).count();
    let neg = same.len() - pos;
    if neg == 0 {
        return Err(EvalError::NoNegatives);
    }
    if pos == 0 {
        return Err(EvalError::NoPositives);
    }
    Ok((pos, neg))
}

/// True-accept rate at the smallest observed score whose false-accept rate
/// is at most `far`. If none qualifies the threshold is `+∞` and the rate 0.
pub fn tar_at_far(scores: &[f64], same: &[bool], far: f64) -> Result<TarAtFar, EvalError> {
    if !(far > 0.0 && far <= 1.0) {
        return Err(EvalError::InvalidFar(far));
    }
    let (pos, neg) = check_labels(scores, same)?;
    let mut negatives: Vec<f64> = scores.iter().zip(same).filter(|(_, &s)| !s).map(|(&v, _)| v).collect();
    negatives.sort_by(f64::total_cmp);
    let mut candidates = scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    // Negatives at or above t, counted from the sorted list.
    let above = |t: f64| neg - negatives.partition_point(|&v| v < t);
    let threshold = candidates
        .into_iter()
        .find(|&t| above(t) as f64 / neg as f64 <= far)
        .unwrap_or(f64::INFINITY);
    let accepted = scores.iter().zip(same).filter(|(&v, &s)| s && v >= threshold).count();
    Ok(TarAtFar {
        tar: accepted as f64 / pos as f64,
        far,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocRow {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

/// One row per distinct score, ascending.
pub fn roc_table(scores: &[f64], same: &[bool]) -> Result<Vec<RocRow>, EvalError> {
    let (pos, neg) = check_labels(scores, same)?;
    let mut sorted: Vec<(f64, bool)> = scores.iter().copied().zip(same.iter().copied()).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut pos_above, mut neg_above) = (pos, neg);
    let mut rows = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        rows.push(RocRow {
            threshold: t,
            far: neg_above as f64 / neg as f64,
            tar: pos_above as f64 / pos as f64,
        });
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                pos_above -= 1;
            } else {
                neg_above -= 1;
            }
            i += 1;
        }
    }
    Ok(rows)
}

pub fn roc_to_csv(rows: &[RocRow]) -> String {
    let mut out = String::from("threshold,far,tar\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", shortest(r.threshold), shortest(r.far), shortest(r.tar)));
    }
    out
}

/// Probes, the enrolled gallery, and unlabeled-for-matching distractors.
/// Distractor identities must differ from every probe identity.
#[derive(Debug, Clone, Copy)]
pub struct IdentificationSet<'a> {
    pub probes: ArrayView2<'a, f64>,
    pub probe_labels: &'a [usize],
    pub gallery: ArrayView2<'a, f64>,
    pub gallery_labels: &'a [usize],
    pub distractors: ArrayView2<'a, f64>,
    pub distractor_labels: &'a [usize],
}

/// Fraction of probes whose most similar gallery-or-distractor entry has the
/// probe's identity. Ties go to the lowest index, gallery first.
pub fn rank1_identification(set: &IdentificationSet) -> Result<f64, EvalError> {
    let dims = [set.probes.ncols(), set.gallery.ncols(), set.distractors.ncols()];
    let lens = [
        (set.probes.nrows(), set.probe_labels.len()),
        (set.gallery.nrows(), set.gallery_labels.len()),
        (set.distractors.nrows(), set.distractor_labels.len()),
    ];
    if lens.iter().any(|(a, b)| a != b) || (set.distractors.nrows() > 0 && dims[2] != dims[0]) || dims[0] != dims[1] {
        return Err(EvalError::LengthMismatch(format!(
            "rows/labels {lens:?}, dimensions {dims:?}"
        )));
    }
    for (probe, &label) in set.probe_labels.iter().enumerate() {
        if !set.gallery_labels.contains(&label) {
            return Err(EvalError::MissingGalleryIdentity { probe, label });
        }
    }
    if let Some((index, &label)) = set
        .distractor_labels
        .iter()
        .enumerate()
        .find(|(_, l)| set.probe_labels.contains(l))
    {
        return Err(EvalError::DistractorOverlap { index, label });
    }
    if set.probes.nrows() == 0 {
        return Ok(0.0);
    }
    let probes = unit_rows(set.probes, "probe")?;
    let gallery = unit_rows(set.gallery, "gallery")?;
    let distractors = unit_rows(set.distractors, "distractor")?;
    let mut correct = 0;
    for (probe, &label) in probes.axis_iter(Axis(0)).zip(set.probe_labels) {
        let mut best = (f64::NEG_INFINITY, None);
        for (row, &l) in gallery.axis_iter(Axis(0)).zip(set.gallery_labels) {
            let s = probe.dot(&row);
            if s > best.0 {
                best = (s, Some(l == label));
            }
        }
        for row in distractors.axis_iter(Axis(0)) {
            let s = probe.dot(&row);
            if s > best.0 {
                best = (s, Some(false));
            }
        }
        if best.1 == Some(true) {
            correct += 1;
        }
    }
    Ok(correct as f64 / probes.nrows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::test_util::random_matrix;
    use ndarray::Array2;

    fn separable() -> ScoredPairs {
        let same: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let scores = same.iter().map(|&s| if s { 1.0 } else { -1.0 }).collect();
        ScoredPairs::new(scores, same, (0..40).map(|i| i % 10).collect()).unwrap()
    }

    #[test]
    fn separable_is_perfect() {
        let p = separable();
        assert_eq!(tenfold_verification(&p).unwrap().accuracy, 1.0);
        for far in [1e-6, 0.1, 1.0] {
            assert_eq!(tar_at_far(&p.scores, &p.same, far).unwrap().tar, 1.0);
        }
    }

    #[test]
    fn constant_scores_give_majority_rate() {
        let same: Vec<bool> = (0..60).map(|i| i % 3 == 0).collect();
        let p = ScoredPairs::new(vec![0.2; 60], same, (0..60).map(|i| i % 10).collect()).unwrap();
        let r = tenfold_verification(&p).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!(r.thresholds.iter().all(|t| *t == f64::INFINITY));
    }

    #[test]
    fn brute_force_threshold_agrees() {
        let mut rng = SplitMix64::new(1);
        for _ in 0..50 {
            let n = 2 + rng.below(60) as usize;
            let pairs: Vec<(f64, bool)> = (0..n)
                .map(|_| ((rng.below(9) as f64 - 4.0) / 4.0, rng.below(2) == 1))
                .collect();
            let (t, correct) = best_threshold(&pairs);
            let mut uniq: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            uniq.sort_by(f64::total_cmp);
            uniq.dedup();
            let mut cands = vec![f64::NEG_INFINITY];
            cands.extend(uniq.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
            cands.push(f64::INFINITY);
            let score = |t: f64| pairs.iter().filter(|(s, y)| (*s >= t) == *y).count();
            let best = cands.iter().map(|&c| score(c)).max().unwrap();
            let first = *cands.iter().find(|&&c| score(c) == best).unwrap();
            assert_eq!((t, correct), (first, best));
        }
    }

    #[test]
    fn fold_errors() {
        let p = ScoredPairs::new(vec![0.1, 0.2], vec![true, false], vec![0, 2]).unwrap();
        assert_eq!(tenfold_verification(&p).unwrap_err(), EvalError::EmptyFold(1));
        let p = ScoredPairs::new(vec![0.1], vec![true], vec![0]).unwrap();
        assert_eq!(tenfold_verification(&p).unwrap_err(), EvalError::TooFewFolds(1));
        assert!(ScoredPairs::new(vec![1.5], vec![true], vec![0]).is_err());
        assert!(ScoredPairs::new(vec![0.5], vec![true, false], vec![0]).is_err());
    }

    #[test]
    fn far_edge_cases() {
        let scores = [0.9, 0.1, -0.3, 0.5];
        let same = [true, false, true, false];
        let all = tar_at_far(&scores, &same, 1.0).unwrap();
        assert_eq!((all.tar, all.threshold), (1.0, -0.3));
        let strict = tar_at_far(&scores, &same, 0.4).unwrap();
        assert_eq!((strict.tar, strict.threshold), (0.5, 0.9));
        let top_negative = tar_at_far(&[0.9, 0.1], &[false, true], 0.5).unwrap();
        assert_eq!(top_negative.threshold, f64::INFINITY);
        assert_eq!(top_negative.tar, 0.0);
        assert_eq!(tar_at_far(&[0.1], &[true], 0.5).unwrap_err(), EvalError::NoNegatives);
        assert!(tar_at_far(&scores, &same, 0.0).is_err());
    }

    #[test]
    fn roc_rows() {
        let rows = roc_table(&[0.9, 0.1, 0.1, 0.5], &[true, false, true, false]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], RocRow { threshold: 0.1, far: 1.0, tar: 1.0 });
        assert_eq!(rows[2], RocRow { threshold: 0.9, far: 0.0, tar: 0.5 });
        assert!(roc_to_csv(&rows).starts_with("threshold,far,tar\n0.1,1,1\n"));
    }

    #[test]
    fn identification_rules() {
        let mut rng = SplitMix64::new(2);
        let emb = random_matrix(&mut rng, 6, 4);
        let labels = [0, 1, 2, 3, 4, 5];
        let none = Array2::<f64>::zeros((0, 4));
        let mut set = IdentificationSet {
            probes: emb.view(),
            probe_labels: &labels,
            gallery: emb.view(),
            gallery_labels: &labels,
            distractors: none.view(),
            distractor_labels: &[],
        };
        assert_eq!(rank1_identification(&set).unwrap(), 1.0);
        let scaled = &emb * 3.5;
        set.gallery = scaled.view();
        assert_eq!(rank1_identification(&set).unwrap(), 1.0);

        let copy = emb.slice(ndarray::s![..1, ..]).to_owned();
        set.gallery = emb.view();
        set.distractors = copy.view();
        set.distractor_labels = &[99];
        assert_eq!(rank1_identification(&set).unwrap(), 1.0);

        let shifted = &emb + 0.5;
        set.gallery = shifted.view();
        let with = rank1_identification(&set).unwrap();
        assert!(with <= 5.0 / 6.0);

        set.distractor_labels = &[3];
        assert!(matches!(rank1_identification(&set), Err(EvalError::DistractorOverlap { .. })));
        set.distractor_labels = &[99];
        set.gallery_labels = &[0, 1, 2, 3, 4, 4];
        assert_eq!(
            rank1_identification(&set).unwrap_err(),
            EvalError::MissingGalleryIdentity { probe: 5, label: 5 }
        );
    }
}
