//! Trajectory data model, ingestion, filtering, masking and splits.
//!
//! File formats (both comma separated, one record per line, no header):
//!
//! * raw records: `user_id,timestamp,lat,lon` where `timestamp` is ISO-8601
//!   (`2018-06-01T09:05:00`, optionally with an offset or `Z`); the wall-clock
//!   time of the timestamp decides the slot.
//! * binned trajectories: `user_id,day_index,s_0,...,s_{T-1}` where each slot
//!   is a cell id or `-1` for MISSING.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Timelike};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, LocationId, Slot};
use crate::seed::derive_seed;

/// Minimum number of earlier days an instance needs ("from the fourth day").
pub const MIN_HISTORY_DAYS: usize = 3;

/// One user-day: `T` slots, each a cell or MISSING.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: u64,
    pub day_index: u32,
    pub slots: Vec<Slot>,
}

impl Trajectory {
    pub fn new(user_id: u64, day_index: u32, slots: Vec<Slot>) -> Self {
        Trajectory {
            user_id,
            day_index,
            slots,
        }
    }

    pub fn missing(user_id: u64, day_index: u32, t: usize) -> Self {
        Self::new(user_id, day_index, vec![None; t])
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn n_observed(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn observed_slots(&self) -> impl Iterator<Item = (usize, LocationId)> + '_ {
        self.slots.iter().enumerate().filter_map(|(t, s)| s.map(|l| (t, l)))
    }

    /// Fraction of MISSING slots.
    pub fn missing_rate(&self) -> f64 {
        if self.slots.is_empty() {
            return 0.0;
        }
        1.0 - self.n_observed() as f64 / self.slots.len() as f64
    }
}

/// A current day with extra slots hidden, plus the user's earlier days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedInstance {
    pub user_id: u64,
    pub current: Trajectory,
    pub history: Vec<Trajectory>,
    /// Masked slot indices in ascending order with their true location.
    pub masked: Vec<(usize, LocationId)>,
}

impl MaskedInstance {
    pub fn day_index(&self) -> u32 {
        self.current.day_index
    }

    pub fn masked_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.masked.iter().map(|&(t, _)| t)
    }

    /// The current trajectory before masking.
    pub fn original(&self) -> Trajectory {
        let mut traj = self.current.clone();
        for &(t, l) in &self.masked {
            traj.slots[t] = Some(l);
        }
        traj
    }

    pub fn truth_at(&self, slot: usize) -> Option<LocationId> {
        self.masked
            .binary_search_by_key(&slot, |&(t, _)| t)
            .ok()
            .map(|i| self.masked[i].1)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<MaskedInstance>,
    pub validation: Vec<MaskedInstance>,
    pub test: Vec<MaskedInstance>,
}

/// A raw GPS record.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub user_id: u64,
    pub timestamp: NaiveDateTime,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub parsed: usize,
    pub skipped_unparseable: usize,
    pub skipped_out_of_bounds: usize,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_local());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
}

fn parse_raw_line(line: &str) -> Option<RawRecord> {
    let mut fields = line.split(',').map(str::trim);
    let user_id = fields.next()?.parse().ok()?;
    let timestamp = parse_timestamp(fields.next()?)?;
    let lat: f64 = fields.next()?.parse().ok()?;
    let lon: f64 = fields.next()?.parse().ok()?;
    if fields.next().is_some() || !lat.is_finite() || !lon.is_finite() {
        return None;
    }
    Some(RawRecord {
        user_id,
        timestamp,
        lat,
        lon,
    })
}

/// Parses raw records; malformed lines are skipped and counted. Blank lines
/// and lines starting with `#` are ignored.
pub fn parse_raw_records<R: Read>(reader: R) -> std::io::Result<(Vec<RawRecord>, IngestStats)> {
    let mut stats = IngestStats::default();
    let mut out = Vec::new();
    for line in BufReader::new(reader).lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match parse_raw_line(trimmed) {
            Some(r) => {
                stats.parsed += 1;
                out.push(r);
            }
            None => stats.skipped_unparseable += 1,
        }
    }
    Ok((out, stats))
}

/// Bins raw records into per-user daily trajectories of `1440 / slot_minutes`
/// slots. Day indices count calendar days from the earliest record (day 1).
///
/// Within a slot the most frequent cell wins; ties go to the cell seen most
/// recently. Out-of-bounds points are skipped and counted.
pub fn bin_records(
    records: &[RawRecord],
    grid: &GridSpec,
    slot_minutes: u32,
) -> Result<(Vec<Trajectory>, IngestStats)> {
    if slot_minutes == 0 || 1440 % slot_minutes != 0 {
        return Err(Error::InvalidConfig(format!(
            "slot_minutes must divide 1440, got {slot_minutes}"
        )));
    }
    let t_slots = (1440 / slot_minutes) as usize;
    let mut stats = IngestStats {
        parsed: records.len(),
        ..Default::default()
    };
    let Some(first_day) = records.iter().map(|r| r.timestamp.date()).min() else {
        return Ok((Vec::new(), stats));
    };

    // (user, day) -> slot -> cell -> (count, latest timestamp, latest input position)
    type Votes = HashMap<LocationId, (usize, NaiveDateTime, usize)>;
    let mut cells: BTreeMap<(u64, u32), Vec<Votes>> = BTreeMap::new();
    for (pos, r) in records.iter().enumerate() {
        let cell = match grid.cell_of(r.lat, r.lon) {
            Ok(c) => c,
            Err(_) => {
                stats.skipped_out_of_bounds += 1;
                continue;
            }
        };
        let day = day_index(first_day, r.timestamp.date());
        let minutes = r.timestamp.hour() * 60 + r.timestamp.minute();
        let slot = (minutes / slot_minutes) as usize;
        let votes = cells
            .entry((r.user_id, day))
            .or_insert_with(|| vec![HashMap::new(); t_slots]);
        let e = votes[slot].entry(cell).or_insert((0, r.timestamp, pos));
        e.0 += 1;
        if (r.timestamp, pos) >= (e.1, e.2) {
            e.1 = r.timestamp;
            e.2 = pos;
        }
    }

    let trajs = cells
        .into_iter()
        .map(|((user_id, day), votes)| {
            let slots = votes
                .into_iter()
                .map(|v| {
                    v.into_iter()
                        .max_by_key(|&(_, (count, ts, pos))| (count, ts, pos))
                        .map(|(cell, _)| cell)
                })
                .collect();
            Trajectory::new(user_id, day, slots)
        })
        .collect();
    Ok((trajs, stats))
}

fn day_index(first: NaiveDate, date: NaiveDate) -> u32 {
    (date - first).num_days() as u32 + 1
}

/// Drops trajectories with fewer than `min_observed_slots` observations, then
/// users with fewer than `min_days` remaining days.
pub fn filter_dataset(trajs: &[Trajectory], min_observed_slots: usize, min_days: usize) -> Vec<Trajectory> {
    let dense: Vec<&Trajectory> = trajs
        .iter()
        .filter(|t| t.n_observed() >= min_observed_slots)
        .collect();
    let mut days_per_user: HashMap<u64, usize> = HashMap::new();
    for t in &dense {
        *days_per_user.entry(t.user_id).or_default() += 1;
    }
    dense
        .into_iter()
        .filter(|t| days_per_user[&t.user_id] >= min_days)
        .cloned()
        .collect()
}

/// Hides `k` observed slots of `traj`, chosen uniformly without replacement
/// from a generator seeded with `seed`.
pub fn mask_instance(traj: &Trajectory, history: &[Trajectory], k: usize, seed: u64) -> Result<MaskedInstance> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let observed: Vec<(usize, LocationId)> = traj.observed_slots().collect();
    if observed.len() < k {
        return Err(Error::InsufficientObserved {
            observed: observed.len(),
            requested: k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked: Vec<(usize, LocationId)> = index::sample(&mut rng, observed.len(), k)
        .into_iter()
        .map(|i| observed[i])
        .collect();
    masked.sort_unstable_by_key(|&(t, _)| t);

    let mut current = traj.clone();
    for &(t, _) in &masked {
        current.slots[t] = None;
    }
    Ok(MaskedInstance {
        user_id: traj.user_id,
        current,
        history: history.to_vec(),
        masked,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    /// Slots masked per current day.
    pub k: usize,
    /// When set, overrides `k` with `round(missing_rate * T)`.
    pub missing_rate: Option<f64>,
    /// Earlier days required before a day becomes an instance.
    pub min_history_days: usize,
    /// Keep only the most recent days of history; `None` keeps all.
    pub history_cap: Option<usize>,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            k: 30,
            missing_rate: None,
            min_history_days: MIN_HISTORY_DAYS,
            history_cap: None,
        }
    }
}

/// Number of slots to mask for a missing rate in `(0, 1]`.
pub fn k_for_rate(rate: f64, t_slots: usize) -> Result<usize> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidConfig(format!("missing rate must lie in (0, 1], got {rate}")));
    }
    Ok(((rate * t_slots as f64).round() as usize).clamp(1, t_slots))
}

impl MaskingConfig {
    /// Slots to mask in a day of `t_slots` slots.
    pub fn k_for(&self, t_slots: usize) -> Result<usize> {
        match self.missing_rate {
            Some(r) => k_for_rate(r, t_slots),
            None => Ok(self.k),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct InstanceStats {
    pub built: usize,
    pub skipped_insufficient: usize,
}

/// Turns each user's days into masked instances.
///
/// History always comes from `observed`. The day being masked comes from
/// `truth` when given (synthetic data with known complete days), otherwise
/// from `observed`. Each instance is masked with a seed derived from
/// `(seed, user, day)`, so masks are fixed per instance.
pub fn build_instances(
    observed: &[Trajectory],
    truth: Option<&[Trajectory]>,
    cfg: &MaskingConfig,
    seed: u64,
) -> Result<(BTreeMap<u64, Vec<MaskedInstance>>, InstanceStats)> {
    let min_hist = cfg.min_history_days.max(1);
    let by_user = group_by_user(observed);
    let truth_lookup: Option<HashMap<(u64, u32), &Trajectory>> =
        truth.map(|ts| ts.iter().map(|t| ((t.user_id, t.day_index), t)).collect());

    let mut stats = InstanceStats::default();
    let mut out = BTreeMap::new();
    for (user, days) in by_user {
        let mut instances = Vec::new();
        for (i, day) in days.iter().enumerate().skip(min_hist) {
            let current = match &truth_lookup {
                Some(lookup) => lookup.get(&(user, day.day_index)).copied().ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "no complete trajectory for user {user} day {}",
                        day.day_index
                    ))
                })?,
                None => day,
            };
            let start = cfg.history_cap.map_or(0, |cap| i.saturating_sub(cap));
            let history: Vec<Trajectory> = days[start..i].iter().map(|t| (*t).clone()).collect();
            let s = derive_seed(seed, &[user, day.day_index as u64]);
            match mask_instance(current, &history, cfg.k_for(current.len())?, s) {
                Ok(inst) => {
                    stats.built += 1;
                    instances.push(inst);
                }
                Err(Error::InsufficientObserved { .. }) => stats.skipped_insufficient += 1,
                Err(e) => return Err(e),
            }
        }
        if !instances.is_empty() {
            out.insert(user, instances);
        }
    }
    Ok((out, stats))
}

/// Groups trajectories by user, each user's days sorted by day index.
pub fn group_by_user(trajs: &[Trajectory]) -> BTreeMap<u64, Vec<&Trajectory>> {
    let mut by_user: BTreeMap<u64, Vec<&Trajectory>> = BTreeMap::new();
    for t in trajs {
        by_user.entry(t.user_id).or_default().push(t);
    }
    for days in by_user.values_mut() {
        days.sort_by_key(|t| t.day_index);
    }
    by_user
}

/// Per user: earliest 70% (rounded down) to train, next 10% (rounded down)
/// to validation, the rest to test.
pub fn chronological_split(per_user: BTreeMap<u64, Vec<MaskedInstance>>) -> DatasetSplit {
    let mut split = DatasetSplit::default();
    for (_, mut instances) in per_user {
        instances.sort_by_key(|i| i.day_index());
        let n = instances.len();
        let n_train = n * 7 / 10;
        let n_val = n / 10;
        let mut iter = instances.into_iter();
        split.train.extend(iter.by_ref().take(n_train));
        split.validation.extend(iter.by_ref().take(n_val));
        split.test.extend(iter);
    }
    split
}

/// Restores the unmasked current days and masks them again with `k` slots.
/// Instances without enough observed slots are skipped.
pub fn remask(instances: &[MaskedInstance], k: usize, seed: u64) -> Vec<MaskedInstance> {
    instances
        .iter()
        .filter_map(|inst| {
            let s = derive_seed(seed, &[inst.user_id, inst.day_index() as u64, k as u64]);
            mask_instance(&inst.original(), &inst.history, k, s).ok()
        })
        .collect()
}

pub fn write_trajectories<W: Write>(mut w: W, trajs: &[Trajectory]) -> std::io::Result<()> {
    for t in trajs {
        write!(w, "{},{}", t.user_id, t.day_index)?;
        for s in &t.slots {
            match s {
                Some(l) => write!(w, ",{}", l.0)?,
                None => write!(w, ",-1")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn save_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_trajectories(&mut w, trajs).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads binned trajectories. All lines must have the same slot count; when
/// `n_locations` is given, ids must be below it.
pub fn read_trajectories<R: Read>(reader: R, source: &str, n_locations: Option<usize>) -> Result<Vec<Trajectory>> {
    let mut out: Vec<Trajectory> = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let mut fields = line.split(',').map(str::trim);
        let user_id = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| err("bad user_id".into()))?;
        let day_index: u32 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| err("bad day_index".into()))?;
        if day_index == 0 {
            return Err(err("day_index must be >= 1".into()));
        }
        let slots = fields
            .map(|f| match f.parse::<i64>() {
                Ok(-1) => Ok(None),
                Ok(v) if v >= 0 && n_locations.is_none_or(|n| (v as usize) < n) => Ok(Some(LocationId(v as u32))),
                _ => Err(err(format!("bad slot value `{f}`"))),
            })
            .collect::<Result<Vec<Slot>>>()?;
        if slots.is_empty() {
            return Err(err("no slots".into()));
        }
        if let Some(first) = out.first() {
            if first.slots.len() != slots.len() {
                return Err(err(format!("expected {} slots, got {}", first.slots.len(), slots.len())));
            }
        }
        out.push(Trajectory::new(user_id, day_index, slots));
    }
    Ok(out)
}

pub fn load_trajectories(path: &Path, n_locations: Option<usize>) -> Result<Vec<Trajectory>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trajectories(f, &path.display().to_string(), n_locations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec::with_dims(39.9, 116.3, 4, 4, 500.0).unwrap()
    }

    fn rec(user: u64, ts: &str, cell: u32) -> RawRecord {
        let g = grid();
        let (lat, lon) = g.center_of(LocationId(cell)).unwrap();
        RawRecord {
            user_id: user,
            timestamp: parse_timestamp(ts).unwrap(),
            lat,
            lon,
        }
    }

    fn traj(user: u64, day: u32, slots: &[i64]) -> Trajectory {
        Trajectory::new(
            user,
            day,
            slots.iter().map(|&s| (s >= 0).then_some(LocationId(s as u32))).collect(),
        )
    }

    #[test]
    fn single_record_fills_slot_zero() {
        let (trajs, _) = bin_records(&[rec(1, "2018-06-01T00:10:00", 5)], &grid(), 30).unwrap();
        assert_eq!(trajs.len(), 1);
        assert_eq!(trajs[0].len(), 48);
        assert_eq!(trajs[0].slots[0], Some(LocationId(5)));
        assert!(trajs[0].slots[1..].iter().all(|s| s.is_none()));
        assert_eq!(trajs[0].day_index, 1);
    }

    #[test]
    fn agreeing_records_share_a_slot() {
        let recs = [rec(1, "2018-06-01T09:05:00", 3), rec(1, "2018-06-01T09:20:00", 3)];
        let (trajs, _) = bin_records(&recs, &grid(), 30).unwrap();
        assert_eq!(trajs[0].slots[18], Some(LocationId(3)));
        assert_eq!(trajs[0].n_observed(), 1);
    }

    #[test]
    fn most_frequent_cell_wins_then_latest() {
        let recs = [
            rec(1, "2018-06-01T09:01:00", 2),
            rec(1, "2018-06-01T09:02:00", 2),
            rec(1, "2018-06-01T09:03:00", 7),
        ];
        let (trajs, _) = bin_records(&recs, &grid(), 30).unwrap();
        assert_eq!(trajs[0].slots[18], Some(LocationId(2)));

        let tie = [rec(1, "2018-06-01T09:01:00", 2), rec(1, "2018-06-01T09:09:00", 7)];
        let (trajs, _) = bin_records(&tie, &grid(), 30).unwrap();
        assert_eq!(trajs[0].slots[18], Some(LocationId(7)));
    }

    #[test]
    fn days_and_users_are_separated() {
        let recs = [
            rec(1, "2018-06-01T09:00:00", 1),
            rec(1, "2018-06-03T09:00:00", 2),
            rec(2, "2018-06-02T23:59:59", 3),
        ];
        let (trajs, _) = bin_records(&recs, &grid(), 30).unwrap();
        let keys: Vec<(u64, u32)> = trajs.iter().map(|t| (t.user_id, t.day_index)).collect();
        assert_eq!(keys, vec![(1, 1), (1, 3), (2, 2)]);
        assert_eq!(trajs[2].slots[47], Some(LocationId(3)));
    }

    #[test]
    fn bad_slot_minutes_rejected() {
        assert!(bin_records(&[], &grid(), 7).is_err());
        assert!(bin_records(&[], &grid(), 0).is_err());
    }

    #[test]
    fn unparseable_and_out_of_bounds_records_are_counted() {
        let text = "1,2018-06-01T09:00:00,39.9001,116.3001\n\
                    garbage\n\
                    2,not-a-time,39.9,116.3\n\
                    # comment\n\
                    3,2018-06-01 10:00:00,10.0,10.0\n";
        let (recs, stats) = parse_raw_records(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(stats.skipped_unparseable, 2);
        let (trajs, stats) = bin_records(&recs, &grid(), 30).unwrap();
        assert_eq!(trajs.len(), 1);
        assert_eq!(stats.skipped_out_of_bounds, 1);
    }

    #[test]
    fn timestamps_with_offsets_use_wall_clock() {
        let ts = parse_timestamp("2018-06-01T09:05:00+08:00").unwrap();
        assert_eq!(ts.hour(), 9);
        assert!(parse_timestamp("2018-06-01T09:05:00Z").is_some());
    }

    #[test]
    fn filter_drops_sparse_days_then_short_users() {
        let mut dense = vec![0i64; 34];
        dense.extend(vec![-1; 14]);
        let mut sparse = vec![0i64; 33];
        sparse.extend(vec![-1; 15]);
        let mut trajs: Vec<Trajectory> = (1..=5).map(|d| traj(1, d, &dense)).collect();
        trajs.push(traj(1, 6, &sparse));
        trajs.extend((1..=4).map(|d| traj(2, d, &dense)));
        trajs.push(traj(2, 5, &sparse));

        let kept = filter_dataset(&trajs, 34, 5);
        assert_eq!(kept.len(), 5);
        assert!(kept.iter().all(|t| t.user_id == 1 && t.n_observed() >= 34));
        assert_eq!(filter_dataset(&kept, 34, 5), kept);
        assert!(filter_dataset(&[], 34, 5).is_empty());
    }

    fn full_day(user: u64, day: u32, n_obs: usize) -> Trajectory {
        let slots: Vec<i64> = (0..48).map(|t| if t < n_obs { t as i64 } else { -1 }).collect();
        traj(user, day, &slots)
    }

    #[test]
    fn mask_zero_is_identity() {
        let t = full_day(1, 4, 40);
        let inst = mask_instance(&t, &[full_day(1, 1, 10)], 0, 9).unwrap();
        assert_eq!(inst.current, t);
        assert!(inst.masked.is_empty());
    }

    #[test]
    fn mask_all_observed() {
        let t = full_day(1, 4, 40);
        let inst = mask_instance(&t, &[full_day(1, 1, 10)], 40, 9).unwrap();
        assert_eq!(inst.current.n_observed(), 0);
        assert_eq!(inst.masked.len(), 40);
        assert_eq!(inst.original(), t);
    }

    #[test]
    fn masking_is_reproducible() {
        let t = full_day(1, 4, 40);
        let h = [full_day(1, 1, 10)];
        let a = mask_instance(&t, &h, 30, 1234).unwrap();
        let b = mask_instance(&t, &h, 30, 1234).unwrap();
        assert_eq!(a.masked, b.masked);
        let c = mask_instance(&t, &h, 30, 4321).unwrap();
        assert_ne!(a.masked, c.masked);
    }

    #[test]
    fn mask_errors() {
        let t = full_day(1, 4, 10);
        assert!(matches!(
            mask_instance(&t, &[full_day(1, 1, 3)], 11, 0),
            Err(Error::InsufficientObserved { observed: 10, requested: 11 })
        ));
        assert!(matches!(mask_instance(&t, &[], 1, 0), Err(Error::EmptyHistory)));
    }

    fn instances_for(user: u64, n: usize) -> Vec<MaskedInstance> {
        (0..n)
            .map(|i| mask_instance(&full_day(user, 4 + i as u32, 40), &[full_day(user, 1, 5)], 3, i as u64).unwrap())
            .collect()
    }

    #[test]
    fn split_ten_instances() {
        let mut m = BTreeMap::new();
        m.insert(1, instances_for(1, 10));
        let s = chronological_split(m);
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (7, 1, 2));
        let last_train = s.train.iter().map(|i| i.day_index()).max().unwrap();
        assert!(s.test.iter().all(|i| i.day_index() > last_train));
    }

    #[test]
    fn split_five_instances_rounds_down() {
        let mut m = BTreeMap::new();
        let mut v = instances_for(7, 5);
        v.reverse();
        m.insert(7, v);
        let s = chronological_split(m);
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (3, 0, 2));
        assert!(s.train.windows(2).all(|w| w[0].day_index() < w[1].day_index()));
    }

    #[test]
    fn build_instances_starts_from_fourth_day() {
        let days: Vec<Trajectory> = (1..=8).map(|d| full_day(3, d, 40)).collect();
        let cfg = MaskingConfig {
            k: 5,
            ..Default::default()
        };
        let (per_user, stats) = build_instances(&days, None, &cfg, 11).unwrap();
        let inst = &per_user[&3];
        assert_eq!(stats.built, 5);
        assert_eq!(inst[0].day_index(), 4);
        assert_eq!(inst[0].history.len(), 3);
        assert_eq!(inst[4].history.len(), 7);

        let capped = MaskingConfig {
            history_cap: Some(2),
            ..cfg
        };
        let (per_user, _) = build_instances(&days, None, &capped, 11).unwrap();
        assert!(per_user[&3].iter().all(|i| i.history.len() == 2));
        assert_eq!(per_user[&3][4].history[1].day_index, 7);
    }

    #[test]
    fn trajectory_file_roundtrip_and_errors() {
        let trajs = vec![traj(1, 1, &[0, -1, 3]), traj(2, 5, &[-1, -1, 15])];
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &trajs).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "1,1,0,-1,3\n2,5,-1,-1,15\n");
        assert_eq!(read_trajectories(&buf[..], "mem", Some(16)).unwrap(), trajs);
        assert!(read_trajectories(&buf[..], "mem", Some(10)).is_err());
        assert!(read_trajectories("1,1,0,1\n1,2,0\n".as_bytes(), "mem", None).is_err());
        assert!(read_trajectories("1,0,0,1\n".as_bytes(), "mem", None).is_err());
    }

    proptest! {
        #[test]
        fn masking_only_touches_observed(mask in proptest::collection::vec(any::<bool>(), 48), k in 0usize..48, seed in any::<u64>()) {
            let slots: Vec<Slot> = mask.iter().enumerate().map(|(t, &o)| o.then_some(LocationId(t as u32))).collect();
            let t = Trajectory::new(1, 9, slots);
            let k = k.min(t.n_observed());
            let inst = mask_instance(&t, std::slice::from_ref(&t), k, seed).unwrap();
            prop_assert_eq!(inst.masked.len(), k);
            for &(s, l) in &inst.masked {
                prop_assert_eq!(t.slots[s], Some(l));
                prop_assert_eq!(inst.current.slots[s], None);
            }
            prop_assert_eq!(inst.original(), t);
        }

        #[test]
        fn split_partitions(n in 1usize..40) {
            let mut m = BTreeMap::new();
            m.insert(1, instances_for(1, n));
            let s = chronological_split(m);
            let mut days: Vec<u32> = s.train.iter().chain(&s.validation).chain(&s.test).map(|i| i.day_index()).collect();
            prop_assert_eq!(days.len(), n);
            days.sort();
            days.dedup();
            prop_assert_eq!(days.len(), n);
        }
    }
}
