//! Recall, MAP and Distance over masked slots.
//!
//! Each masked slot has exactly one relevant location, so average precision
//! for a slot is `1 / rank` of the ground truth and MAP is the mean
//! reciprocal rank. Methods that output a single location are ranked by
//! putting that location first and the rest in id order.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, LocationId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: f64,
    pub map: f64,
    pub distance_m: f64,
    /// Number of masked slots evaluated.
    pub n_instances: usize,
}

/// Outcome of recovering one masked slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotOutcome {
    pub prediction: LocationId,
    pub truth: LocationId,
    /// 1-based rank of the truth in the method's ordering.
    pub truth_rank: usize,
}

pub fn recall_at_1(predictions: &[LocationId], truths: &[LocationId]) -> f64 {
    assert_eq!(predictions.len(), truths.len(), "one prediction per truth");
    if truths.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    hits as f64 / truths.len() as f64
}

/// 1-based position of `truth` in `ranking`.
pub fn rank_in(ranking: &[LocationId], truth: LocationId) -> Result<usize> {
    ranking.iter().position(|&l| l == truth).map(|p| p + 1).ok_or(Error::TruthNotRanked)
}

pub fn mean_average_precision<R: AsRef<[LocationId]>>(rankings: &[R], truths: &[LocationId]) -> Result<f64> {
    assert_eq!(rankings.len(), truths.len(), "one ranking per truth");
    if truths.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (r, &t) in rankings.iter().zip(truths) {
        sum += 1.0 / rank_in(r.as_ref(), t)? as f64;
    }
    Ok(sum / truths.len() as f64)
}

pub fn mean_distance(predictions: &[LocationId], truths: &[LocationId], grid: &GridSpec) -> Result<f64> {
    assert_eq!(predictions.len(), truths.len(), "one prediction per truth");
    if truths.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (&p, &t) in predictions.iter().zip(truths) {
        sum += grid.cell_distance_m(Some(p), Some(t))?;
    }
    Ok(sum / truths.len() as f64)
}

/// Rank of `truth` when `prediction` is placed first and every other
/// location follows in id order.
pub fn single_output_rank(prediction: LocationId, truth: LocationId) -> usize {
    if prediction == truth {
        1
    } else {
        // ids below the truth, minus the prediction if it is one of them, then the truth itself
        let below = truth.index() - usize::from(prediction < truth);
        below + 2
    }
}

/// The full ordering used for single-output methods.
pub fn single_output_ranking(prediction: LocationId, n_locations: usize) -> Vec<LocationId> {
    std::iter::once(prediction)
        .chain((0..n_locations as u32).map(LocationId).filter(|&l| l != prediction))
        .collect()
}

impl EvalReport {
    pub fn from_outcomes(outcomes: &[SlotOutcome], grid: &GridSpec) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::InvalidConfig("no masked slots to evaluate".into()));
        }
        let preds: Vec<LocationId> = outcomes.iter().map(|o| o.prediction).collect();
        let truths: Vec<LocationId> = outcomes.iter().map(|o| o.truth).collect();
        let n = outcomes.len() as f64;
        Ok(EvalReport {
            recall: recall_at_1(&preds, &truths),
            map: outcomes.iter().map(|o| 1.0 / o.truth_rank as f64).sum::<f64>() / n,
            distance_m: mean_distance(&preds, &truths, grid)?,
            n_instances: outcomes.len(),
        })
    }
}

pub const RESULTS_HEADER: &str = "model,recall,map,distance_m";

/// One row of the results table.
pub fn write_results_row<W: Write>(mut w: W, model: &str, r: &EvalReport) -> std::io::Result<()> {
    writeln!(w, "{},{:.4},{:.4},{:.1}", model, r.recall, r.map, r.distance_m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> Vec<LocationId> {
        v.iter().map(|&i| LocationId(i)).collect()
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_1(&ids(&[1, 2, 3]), &ids(&[1, 2, 3])), 1.0);
        assert_eq!(recall_at_1(&ids(&[0, 0, 0]), &ids(&[1, 2, 3])), 0.0);
        assert_eq!(recall_at_1(&ids(&[1, 2, 3, 9]), &ids(&[1, 2, 3, 4])), 0.75);
    }

    #[test]
    fn map_examples() {
        let r = ids(&[4, 1, 2, 3]);
        assert_eq!(mean_average_precision(&[r.clone(), r.clone()], &ids(&[4, 4])).unwrap(), 1.0);
        assert_eq!(mean_average_precision(&[r.clone(), r.clone()], &ids(&[1, 1])).unwrap(), 0.5);
        assert_eq!(mean_average_precision(&[r.clone(), r.clone()], &ids(&[4, 3])).unwrap(), 0.625);
        assert!(matches!(
            mean_average_precision(&[ids(&[0, 1])], &ids(&[5])),
            Err(Error::TruthNotRanked)
        ));
    }

    #[test]
    fn distance_examples() {
        let g = GridSpec::with_dims(39.9, 116.3, 10, 10, 500.0).unwrap();
        let truth: Vec<LocationId> = (0..9).map(|c| g.id_at(5, c).unwrap()).collect();
        assert_eq!(mean_distance(&truth, &truth, &g).unwrap(), 0.0);
        let east: Vec<LocationId> = (1..10).map(|c| g.id_at(5, c).unwrap()).collect();
        let d = mean_distance(&east, &truth, &g).unwrap();
        assert!((d - 500.0).abs() / 500.0 < 0.01, "{d}");
        let a = g.id_at(5, 2).unwrap();
        let b = g.id_at(5, 4).unwrap();
        let d = mean_distance(&[a, b], &[a, a], &g).unwrap();
        assert!((d - 500.0).abs() / 500.0 < 0.01, "{d}");
    }

    #[test]
    fn single_output_ranks() {
        for n in [1usize, 5, 12] {
            for p in 0..n as u32 {
                let ranking = single_output_ranking(LocationId(p), n);
                for t in 0..n as u32 {
                    assert_eq!(rank_in(&ranking, LocationId(t)).unwrap(), single_output_rank(LocationId(p), LocationId(t)));
                }
            }
        }
    }

    #[test]
    fn empty_report_rejected() {
        let g = GridSpec::with_dims(39.9, 116.3, 2, 2, 500.0).unwrap();
        assert!(EvalReport::from_outcomes(&[], &g).is_err());
    }

    #[test]
    fn results_row_format() {
        let mut buf = Vec::new();
        let r = EvalReport { recall: 0.5, map: 0.625, distance_m: 512.345, n_instances: 4 };
        write_results_row(&mut buf, "History", &r).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "History,0.5000,0.6250,512.3\n");
    }

    proptest! {
        #[test]
        fn map_at_least_recall_and_order_free(
            pairs in proptest::collection::vec((0u32..20, 0u32..20), 1..50),
            rot in 0usize..50,
        ) {
            let g = GridSpec::with_dims(39.9, 116.3, 4, 5, 500.0).unwrap();
            let outcomes: Vec<SlotOutcome> = pairs.iter().map(|&(p, t)| SlotOutcome {
                prediction: LocationId(p),
                truth: LocationId(t),
                truth_rank: single_output_rank(LocationId(p), LocationId(t)),
            }).collect();
            let r = EvalReport::from_outcomes(&outcomes, &g).unwrap();
            prop_assert!(r.map >= r.recall);
            prop_assert!((0.0..=1.0).contains(&r.recall) && r.map > 0.0 && r.map <= 1.0);
            let mut rotated = outcomes.clone();
            rotated.rotate_left(rot % outcomes.len());
            let r2 = EvalReport::from_outcomes(&rotated, &g).unwrap();
            prop_assert!((r.recall - r2.recall).abs() < 1e-12);
            prop_assert!((r.map - r2.map).abs() < 1e-12);
            prop_assert!((r.distance_m - r2.distance_m).abs() < 1e-6);
        }
    }
}
