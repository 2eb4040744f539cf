//! Tile-to-image vote aggregation and classification metrics.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::NUM_CLASSES;

/// Non-negative per-class tile scores summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TileScores(pub [f64; NUM_CLASSES]);

const SUM_TOLERANCE: f64 = 1e-6;

impl TileScores {
    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.0.iter().sum();
        if self.0.iter().any(|v| !v.is_finite() || *v < 0.0) || (s - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Data(format!("malformed score vector {:?}", self.0)));
        }
        Ok(())
    }

    pub fn one_hot(class: usize) -> Self {
        let mut s = [0.0; NUM_CLASSES];
        s[class] = 1.0;
        TileScores(s)
    }

    pub fn argmax(&self) -> usize {
        argmax_lowest(&self.0)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One tile's hard label and its score vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileVote {
    pub label: usize,
    pub scores: TileScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteMethod {
    Majority,
    Probability,
}

impl VoteMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            VoteMethod::Majority => "majority",
            VoteMethod::Probability => "probability",
        }
    }
}

/// How probability voting reduces tile scores. Both give the same argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub source_id: String,
    pub predicted: usize,
    pub method: VoteMethod,
    /// Vote counts for majority voting, reduced scores for probability voting.
    pub scores: [f64; NUM_CLASSES],
    pub tile_count: usize,
}

/// Plurality vote over tile labels. Ties go to the tied class with the larger
/// summed tile score, then to the lower class ID.
pub fn majority_vote(source_id: &str, tiles: &[TileVote]) -> Result<ImagePrediction> {
    if tiles.is_empty() {
        return Err(Error::Data(format!("no tiles to vote for {source_id}")));
    }
    let mut counts = [0.0f64; NUM_CLASSES];
    let mut mass = [0.0f64; NUM_CLASSES];
    for t in tiles {
        if t.label >= NUM_CLASSES {
            return Err(Error::Data(format!("tile label {} out of range", t.label)));
        }
        counts[t.label] += 1.0;
        for (m, s) in mass.iter_mut().zip(t.scores.0) {
            *m += s;
        }
    }
    let predicted = (0..NUM_CLASSES)
        .min_by(|&a, &b| {
            counts[b]
                .partial_cmp(&counts[a])
                .unwrap_or(Ordering::Equal)
                .then(mass[b].partial_cmp(&mass[a]).unwrap_or(Ordering::Equal))
                .then(a.cmp(&b))
        })
        .expect("non-empty class range");
    Ok(ImagePrediction {
        source_id: source_id.to_string(),
        predicted,
        method: VoteMethod::Majority,
        scores: counts,
        tile_count: tiles.len(),
    })
}

/// Argmax of the summed (or averaged) tile score vectors; ties go to the lower
/// class ID.
pub fn probability_vote(source_id: &str, tiles: &[TileScores], reduction: Reduction) -> Result<ImagePrediction> {
    if tiles.is_empty() {
        return Err(Error::Data(format!("no tiles to vote for {source_id}")));
    }
    let mut acc = [0.0f64; NUM_CLASSES];
    for t in tiles {
        t.validate()?;
        for (a, s) in acc.iter_mut().zip(t.0) {
            *a += s;
        }
    }
    if reduction == Reduction::Mean {
        let m = tiles.len() as f64;
        acc.iter_mut().for_each(|a| *a /= m);
    }
    Ok(ImagePrediction {
        source_id: source_id.to_string(),
        predicted: argmax_lowest(&acc),
        method: VoteMethod::Probability,
        scores: acc,
        tile_count: tiles.len(),
    })
}

/// A tile-level prediction tagged with its parent image.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePrediction {
    pub source_id: String,
    pub true_class: usize,
    pub vote: TileVote,
}

/// Groups tile predictions by source image (sorted by ID) and votes.
pub fn aggregate_by_source(tiles: &[TilePrediction], method: VoteMethod) -> Result<Vec<(ImagePrediction, usize)>> {
    let mut groups: BTreeMap<&str, (usize, Vec<TileVote>)> = BTreeMap::new();
    for t in tiles {
        let entry = groups.entry(&t.source_id).or_insert((t.true_class, Vec::new()));
        if entry.0 != t.true_class {
            return Err(Error::Data(format!("tiles of {} disagree on the true class", t.source_id)));
        }
        entry.1.push(t.vote);
    }
    groups
        .into_iter()
        .map(|(id, (truth, votes))| {
            let pred = match method {
                VoteMethod::Majority => majority_vote(id, &votes)?,
                VoteMethod::Probability => {
                    let scores: Vec<TileScores> = votes.iter().map(|v| v.scores).collect();
                    probability_vote(id, &scores, Reduction::Sum)?
                }
            };
            Ok((pred, truth))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

/// Accuracy and macro-averaged precision, recall and F1.
///
/// A class never predicted has precision 0; a class absent from the ground
/// truth has recall 0. Macro F1 is the mean of per-class F1 scores.
pub fn compute_metrics(predicted: &[usize], truth: &[usize]) -> Result<MetricsReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} ground-truth labels",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= NUM_CLASSES || t >= NUM_CLASSES {
            return Err(Error::Data(format!("class out of range: predicted {p}, true {t}")));
        }
        confusion[t][p] += 1;
    }
    let total = predicted.len() as f64;
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..NUM_CLASSES {
        let tp = confusion[c][c] as f64;
        let pred_c: usize = (0..NUM_CLASSES).map(|t| confusion[t][c]).sum();
        let true_c: usize = confusion[c].iter().sum();
        let precision = if pred_c > 0 { tp / pred_c as f64 } else { 0.0 };
        let recall = if true_c > 0 { tp / true_c as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        p_sum += precision;
        r_sum += recall;
        f_sum += f1;
    }
    let k = NUM_CLASSES as f64;
    Ok(MetricsReport {
        accuracy: correct as f64 / total,
        macro_precision: p_sum / k,
        macro_recall: r_sum / k,
        macro_f1: f_sum / k,
        confusion,
    })
}

/// Monte-Carlo image accuracy of voting over `tiles` iid tiles, each correct
/// with probability `p_tile` and otherwise uniformly wrong. Tiles carry one-hot
/// scores and the true class is drawn uniformly per image.
pub fn simulate_vote_accuracy(p_tile: f64, tiles: usize, images: usize, method: VoteMethod, seed: u64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_tile) || tiles == 0 || images == 0 {
        return Err(Error::InvalidArgument(format!(
            "need p in [0,1] and positive counts, got p={p_tile}, tiles={tiles}, images={images}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    let mut votes = Vec::with_capacity(tiles);
    for _ in 0..images {
        let truth = rng.random_range(0..NUM_CLASSES);
        votes.clear();
        for _ in 0..tiles {
            let label = if rng.random::<f64>() < p_tile {
                truth
            } else {
                let off = rng.random_range(1..NUM_CLASSES);
                (truth + off) % NUM_CLASSES
            };
            votes.push(TileVote {
                label,
                scores: TileScores::one_hot(label),
            });
        }
        let pred = match method {
            VoteMethod::Majority => majority_vote("sim", &votes)?,
            VoteMethod::Probability => {
                let s: Vec<TileScores> = votes.iter().map(|v| v.scores).collect();
                probability_vote("sim", &s, Reduction::Sum)?
            }
        };
        correct += (pred.predicted == truth) as usize;
    }
    Ok(correct as f64 / images as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn votes_from_counts(counts: [usize; 4]) -> Vec<TileVote> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(TileVote { label: c, scores: TileScores::one_hot(c) }, n))
            .collect()
    }

    #[test]
    fn unanimous_and_plurality() {
        let all2 = votes_from_counts([0, 0, 42, 0]);
        assert_eq!(majority_vote("a", &all2).unwrap().predicted, 2);
        let p = majority_vote("a", &votes_from_counts([10, 12, 10, 10])).unwrap();
        assert_eq!(p.predicted, 1);
        assert_eq!(p.scores, [10.0, 12.0, 10.0, 10.0]);
        assert_eq!(p.tile_count, 42);
        assert!(majority_vote("a", &[]).is_err());
    }

    #[test]
    fn majority_tie_uses_summed_scores() {
        // 11 tiles each for classes 0 and 1; summed scores 9.1 vs 8.7.
        let mut votes = Vec::new();
        let mk = |label, s: [f64; 4]| TileVote { label, scores: TileScores(s) };
        for i in 0..11 {
            let s = if i == 0 { 0.8 } else { 0.83 };
            votes.push(mk(0, [s, 1.0 - s, 0.0, 0.0]));
        }
        for i in 0..11 {
            let x = if i == 0 { 0.6 } else { 0.62 };
            votes.push(mk(1, [0.0, x, 1.0 - x, 0.0]));
        }
        for _ in 0..10 {
            votes.push(mk(2, [0.0, 0.0, 1.0, 0.0]));
            votes.push(mk(3, [0.0, 0.0, 0.0, 1.0]));
        }
        let mass0: f64 = votes.iter().map(|v| v.scores.0[0]).sum();
        let mass1: f64 = votes.iter().map(|v| v.scores.0[1]).sum();
        assert!((mass0 - 9.1).abs() < 1e-9 && (mass1 - 8.7).abs() < 1e-9);
        assert_eq!(majority_vote("a", &votes).unwrap().predicted, 0);
        // Identical counts and mass fall back to the lower class ID.
        assert_eq!(majority_vote("a", &votes_from_counts([0, 3, 0, 3])).unwrap().predicted, 1);
    }

    #[test]
    fn probability_vote_sums() {
        let tiles = [TileScores([0.6, 0.4, 0.0, 0.0]), TileScores([0.1, 0.55, 0.35, 0.0])];
        let p = probability_vote("x", &tiles, Reduction::Sum).unwrap();
        assert_eq!(p.predicted, 1);
        for (a, b) in p.scores.iter().zip([0.7, 0.95, 0.35, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let uniform = vec![TileScores([0.25; 4]); 42];
        assert_eq!(probability_vote("x", &uniform, Reduction::Mean).unwrap().predicted, 0);
        assert!(probability_vote("x", &[TileScores([0.5, 0.6, 0.0, 0.0])], Reduction::Sum).is_err());
        assert!(probability_vote("x", &[], Reduction::Sum).is_err());
    }

    #[test]
    fn metrics_edge_cases() {
        let truth = [0, 1, 2, 3, 0, 1, 2, 3];
        let perfect = compute_metrics(&truth, &truth).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.macro_f1, 1.0);
        for c in 0..4 {
            assert_eq!(perfect.confusion[c][c], 2);
        }
        let zeros = compute_metrics(&[0; 8], &truth).unwrap();
        assert_eq!(zeros.accuracy, 0.25);
        assert_eq!(zeros.macro_recall, 0.25);
        // Only class 0 is ever predicted: precision 2/8 there, 0 elsewhere.
        assert!((zeros.macro_precision - 0.0625).abs() < 1e-12);
        assert!(compute_metrics(&[0, 1], &[0]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
    }

    #[test]
    fn aggregation_groups_sources() {
        let mk = |id: &str, t, l| TilePrediction {
            source_id: id.into(),
            true_class: t,
            vote: TileVote { label: l, scores: TileScores::one_hot(l) },
        };
        let tiles = vec![mk("b", 1, 1), mk("a", 0, 2), mk("a", 0, 0), mk("a", 0, 0), mk("b", 1, 3)];
        let out = aggregate_by_source(&tiles, VoteMethod::Majority).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].0.source_id.as_str(), out[0].0.predicted, out[0].1), ("a", 0, 0));
        assert_eq!((out[1].0.predicted, out[1].1), (1, 1));
        let bad = vec![mk("a", 0, 0), mk("a", 1, 0)];
        assert!(aggregate_by_source(&bad, VoteMethod::Probability).is_err());
    }

    #[test]
    fn simulation_lifts_accuracy() {
        let acc = simulate_vote_accuracy(0.5, 15, 5_000, VoteMethod::Majority, 3).unwrap();
        assert!(acc > 0.5);
        assert!(simulate_vote_accuracy(1.5, 15, 10, VoteMethod::Majority, 3).is_err());
    }
}
