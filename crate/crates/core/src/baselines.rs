//! Rule-based recovery: Top, History and Linear.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{MaskedInstance, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, LocationId};
use crate::metrics::{single_output_rank, EvalReport, SlotOutcome};
use crate::model::aggregate_history;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Top,
    History,
    Linear,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Top, BaselineKind::History, BaselineKind::Linear];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Top => "Top",
            BaselineKind::History => "History",
            BaselineKind::Linear => "Linear",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "top" => Ok(BaselineKind::Top),
            "history" => Ok(BaselineKind::History),
            "linear" => Ok(BaselineKind::Linear),
            _ => Err(Error::InvalidConfig(format!("unknown baseline `{s}`"))),
        }
    }
}

/// Most visited location per user, plus the global favourite for users
/// without training data.
#[derive(Debug, Clone, PartialEq)]
pub struct TopLocations {
    per_user: HashMap<u64, LocationId>,
    global: LocationId,
}

fn most_frequent(counts: &BTreeMap<LocationId, usize>) -> Option<LocationId> {
    // BTreeMap iterates by ascending id, so the first maximum is the smallest id
    let best = counts.values().copied().max()?;
    counts.iter().find(|(_, &c)| c == best).map(|(&l, _)| l)
}

impl TopLocations {
    pub fn fit(train: &[Trajectory]) -> Result<Self> {
        let mut per_user: HashMap<u64, BTreeMap<LocationId, usize>> = HashMap::new();
        let mut global: BTreeMap<LocationId, usize> = BTreeMap::new();
        for t in train {
            let counts = per_user.entry(t.user_id).or_default();
            for (_, l) in t.observed_slots() {
                *counts.entry(l).or_default() += 1;
                *global.entry(l).or_default() += 1;
            }
        }
        let global = most_frequent(&global).ok_or(Error::NoObservations)?;
        Ok(TopLocations {
            per_user: per_user
                .into_iter()
                .filter_map(|(u, c)| most_frequent(&c).map(|l| (u, l)))
                .collect(),
            global,
        })
    }

    pub fn for_user(&self, user_id: u64) -> LocationId {
        self.per_user.get(&user_id).copied().unwrap_or(self.global)
    }

    pub fn global(&self) -> LocationId {
        self.global
    }
}

/// Every masked slot gets the user's most visited training location.
pub fn top_recover(inst: &MaskedInstance, top: &TopLocations) -> BTreeMap<usize, LocationId> {
    let l = top.for_user(inst.user_id);
    inst.masked_slots().map(|t| (t, l)).collect()
}

/// Slot-wise most frequent historical location, falling back to Top where
/// the history never observed the slot.
pub fn history_recover(inst: &MaskedInstance, top: &TopLocations) -> Result<BTreeMap<usize, LocationId>> {
    let agg = aggregate_history(&inst.history)?;
    let fallback = top.for_user(inst.user_id);
    Ok(inst
        .masked_slots()
        .map(|t| (t, agg.get(t).copied().flatten().unwrap_or(fallback)))
        .collect())
}

/// Straight-line, constant-speed interpolation between the nearest observed
/// slots before and after each masked slot, snapped to the containing cell.
/// With only one side observed the nearest observation is copied.
pub fn linear_recover(inst: &MaskedInstance, grid: &GridSpec) -> Result<BTreeMap<usize, LocationId>> {
    let observed: Vec<(usize, LocationId)> = inst.current.observed_slots().collect();
    if observed.is_empty() {
        return Err(Error::NoObservations);
    }
    inst.masked_slots()
        .map(|t| {
            let after = observed.partition_point(|&(s, _)| s < t);
            let prev = after.checked_sub(1).map(|i| observed[i]);
            let next = observed.get(after).copied();
            let loc = match (prev, next) {
                (Some((t0, a)), Some((t1, b))) => interpolate(grid, a, b, (t - t0) as f64 / (t1 - t0) as f64)?,
                (Some((_, a)), None) => a,
                (None, Some((_, b))) => b,
                (None, None) => unreachable!("observed is non-empty"),
            };
            Ok((t, loc))
        })
        .collect()
}

fn interpolate(grid: &GridSpec, a: LocationId, b: LocationId, f: f64) -> Result<LocationId> {
    let (ra, ca) = grid.row_col(a)?;
    let (rb, cb) = grid.row_col(b)?;
    // cell centers sit at index + 0.5; flooring gives the containing cell
    let along = |x0: usize, x1: usize, n: usize| {
        let x = x0 as f64 + 0.5 + f * (x1 as f64 - x0 as f64);
        (x.floor().max(0.0) as usize).min(n - 1)
    };
    Ok(grid
        .id_at(along(ra, rb, grid.n_rows()), along(ca, cb, grid.n_cols()))
        .expect("clamped into the grid"))
}

/// Dispatches on the baseline kind.
pub fn baseline_recover(kind: BaselineKind, inst: &MaskedInstance, top: &TopLocations, grid: &GridSpec) -> Result<BTreeMap<usize, LocationId>> {
    match kind {
        BaselineKind::Top => Ok(top_recover(inst, top)),
        BaselineKind::History => history_recover(inst, top),
        BaselineKind::Linear => linear_recover(inst, grid),
    }
}

/// Recall, MAP and Distance of a baseline over every masked slot. The single
/// output is ranked first and the remaining locations follow in id order.
pub fn evaluate_baseline(
    kind: BaselineKind,
    instances: &[MaskedInstance],
    top: &TopLocations,
    grid: &GridSpec,
) -> Result<EvalReport> {
    let mut outcomes = Vec::new();
    for inst in instances {
        let rec = baseline_recover(kind, inst, top, grid)?;
        for &(t, truth) in &inst.masked {
            let prediction = rec[&t];
            outcomes.push(SlotOutcome {
                prediction,
                truth,
                truth_rank: single_output_rank(prediction, truth),
            });
        }
    }
    EvalReport::from_outcomes(&outcomes, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mask_instance;
    use proptest::prelude::*;

    fn traj(user: u64, day: u32, slots: &[i64]) -> Trajectory {
        Trajectory::new(user, day, slots.iter().map(|&s| (s >= 0).then_some(LocationId(s as u32))).collect())
    }

    fn grid() -> GridSpec {
        GridSpec::with_dims(39.9, 116.3, 10, 10, 500.0).unwrap()
    }

    #[test]
    fn top_single_location() {
        let top = TopLocations::fit(&[traj(1, 1, &[3, 3, -1, 3])]).unwrap();
        let inst = mask_instance(&traj(1, 4, &[3, 3, 3, 3]), &[traj(1, 1, &[3, -1, -1, -1])], 2, 0).unwrap();
        assert!(top_recover(&inst, &top).values().all(|&l| l == LocationId(3)));
    }

    #[test]
    fn top_counts_and_users() {
        let train = [
            traj(1, 1, &[0, 0, 0, 0, 0, 1, 1, 1]),
            traj(2, 1, &[7, 7, -1, -1, -1, -1, -1, -1]),
            traj(2, 2, &[7, 2, -1, -1, -1, -1, -1, -1]),
        ];
        let top = TopLocations::fit(&train).unwrap();
        assert_eq!(top.for_user(1), LocationId(0));
        assert_eq!(top.for_user(2), LocationId(7));
        assert_eq!(top.for_user(99), LocationId(0));
        // tie between 4 and 5 resolves to the smaller id
        let tie = TopLocations::fit(&[traj(1, 1, &[5, 4])]).unwrap();
        assert_eq!(tie.for_user(1), LocationId(4));
        assert!(TopLocations::fit(&[traj(1, 1, &[-1])]).is_err());
    }

    #[test]
    fn history_examples() {
        let truth = traj(1, 4, &[1, 2, 3, 4]);
        let hist = vec![traj(1, 1, &[1, 2, 3, 4]), traj(1, 2, &[1, 2, 3, 4]), traj(1, 3, &[1, 2, 3, 4])];
        let inst = mask_instance(&truth, &hist, 4, 1).unwrap();
        let top = TopLocations::fit(&hist).unwrap();
        let rec = history_recover(&inst, &top).unwrap();
        assert!(inst.masked.iter().all(|&(t, l)| rec[&t] == l));

        let hist = vec![traj(1, 1, &[0, -1]), traj(1, 2, &[1, -1]), traj(1, 3, &[1, -1])];
        let top = TopLocations::fit(&[traj(1, 1, &[6, 6])]).unwrap();
        let inst = mask_instance(&traj(1, 4, &[0, 0]), &hist, 2, 1).unwrap();
        let rec = history_recover(&inst, &top).unwrap();
        assert_eq!(rec[&0], LocationId(1));
        assert_eq!(rec[&1], LocationId(6));
    }

    #[test]
    fn linear_same_cell() {
        let inst = mask_instance(&traj(1, 4, &[5, 5, 5, 5]), &[traj(1, 1, &[0; 4])], 0, 0).unwrap();
        let mut inst = inst;
        inst.current.slots[1] = None;
        inst.current.slots[2] = None;
        inst.masked = vec![(1, LocationId(5)), (2, LocationId(5))];
        let rec = linear_recover(&inst, &grid()).unwrap();
        assert_eq!(rec[&1], LocationId(5));
        assert_eq!(rec[&2], LocationId(5));
    }

    #[test]
    fn linear_midpoint_four_cells_east() {
        let g = grid();
        let start = g.id_at(3, 2).unwrap();
        let end = g.id_at(3, 6).unwrap();
        let truth = Trajectory::new(1, 4, vec![Some(start), Some(start), Some(start), Some(end), Some(end)]);
        let mut inst = mask_instance(&truth, std::slice::from_ref(&truth), 0, 0).unwrap();
        // observed at slot 0 and slot 4, masked in between
        for t in 1..4 {
            inst.current.slots[t] = None;
        }
        inst.masked = vec![(1, start), (2, start), (3, end)];
        let rec = linear_recover(&inst, &g).unwrap();
        // oracle: midpoint of the two centers, located with cell_of
        let (la, lo) = g.center_of(start).unwrap();
        let (lb, lob) = g.center_of(end).unwrap();
        let mid = g.cell_of((la + lb) / 2.0, (lo + lob) / 2.0).unwrap();
        assert_eq!(mid, g.id_at(3, 4).unwrap());
        assert_eq!(rec[&2], mid);
    }

    #[test]
    fn linear_one_sided_and_empty() {
        let truth = traj(1, 4, &[1, 2, 3, 9]);
        let mut inst = mask_instance(&truth, std::slice::from_ref(&truth), 0, 0).unwrap();
        inst.current.slots = vec![None, None, Some(LocationId(3)), None];
        inst.masked = vec![(0, LocationId(1)), (1, LocationId(2)), (3, LocationId(9))];
        let rec = linear_recover(&inst, &grid()).unwrap();
        assert_eq!(rec[&0], LocationId(3));
        assert_eq!(rec[&3], LocationId(3));
        let all = mask_instance(&truth, std::slice::from_ref(&truth), 4, 0).unwrap();
        assert!(matches!(linear_recover(&all, &grid()), Err(Error::NoObservations)));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("history".parse::<BaselineKind>().unwrap(), BaselineKind::History);
        assert_eq!("Top".parse::<BaselineKind>().unwrap(), BaselineKind::Top);
        assert!("rf".parse::<BaselineKind>().is_err());
    }

    proptest! {
        #[test]
        fn baselines_are_total(
            cur in proptest::collection::vec(0u32..100, 8),
            hist in proptest::collection::vec(proptest::collection::vec(-1i64..100, 8), 1..5),
            k in 1usize..8,
            seed in any::<u64>(),
        ) {
            let g = grid();
            let truth = Trajectory::new(1, 10, cur.iter().map(|&c| Some(LocationId(c))).collect());
            let history: Vec<Trajectory> = hist.iter().enumerate().map(|(i, h)| traj(1, i as u32 + 1, h)).collect();
            let inst = mask_instance(&truth, &history, k, seed).unwrap();
            let top = TopLocations::fit(std::slice::from_ref(&truth)).unwrap();
            let agg = aggregate_history(&history).unwrap();
            for kind in BaselineKind::ALL {
                let rec = baseline_recover(kind, &inst, &top, &g).unwrap();
                prop_assert_eq!(rec.len(), k);
                prop_assert!(rec.values().all(|l| l.index() < g.n_locations()));
                if kind == BaselineKind::History {
                    for (&t, &l) in &rec {
                        if let Some(a) = agg[t] {
                            prop_assert_eq!(a, l);
                        }
                    }
                }
            }
        }
    }
}
