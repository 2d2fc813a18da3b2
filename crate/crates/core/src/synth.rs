//! Synthetic periodic mobility.
//!
//! Every user has a home and a work cell. A day is spent at home until
//! `leave_home`, commutes along the straight home-work line, works until
//! `leave_work`, commutes back and is home again from `arrive_home`. Each
//! slot independently deviates with probability `p_noise` to a random cell
//! within `excursion_radius_cells` (Chebyshev) of the routine cell.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mask_instance, MaskedInstance, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, LocationId};
use crate::seed::derive_seed;

/// Routine boundaries as minutes after midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutineMinutes {
    pub leave_home: u32,
    pub arrive_work: u32,
    pub leave_work: u32,
    pub arrive_home: u32,
}

impl Default for RoutineMinutes {
    /// With 30-minute slots: home 0-15 and 40-47, commute 16-17 and 38-39,
    /// work 18-37.
    fn default() -> Self {
        RoutineMinutes {
            leave_home: 8 * 60,
            arrive_work: 9 * 60,
            leave_work: 19 * 60,
            arrive_home: 20 * 60,
        }
    }
}

/// Tunable generator parameters, as they appear in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub n_users: usize,
    pub n_days: usize,
    pub t_slots: usize,
    pub p_observe: f64,
    pub p_noise: f64,
    pub excursion_radius_cells: usize,
    pub routine: RoutineMinutes,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_users: 200,
            n_days: 30,
            t_slots: 48,
            p_observe: 0.4,
            p_noise: 0.15,
            excursion_radius_cells: 2,
            routine: RoutineMinutes::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub params: SynthParams,
    pub grid: GridSpec,
    pub rng_seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if p.n_users == 0 {
            return bad("n_users must be positive");
        }
        if p.n_days < 5 {
            return bad("n_days must be at least 5");
        }
        if p.t_slots == 0 || 1440 % p.t_slots != 0 {
            return bad("t_slots must divide 1440");
        }
        if !(p.p_observe > 0.0 && p.p_observe <= 1.0) {
            return bad("p_observe must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&p.p_noise) {
            return bad("p_noise must lie in [0, 1]");
        }
        if p.p_noise > 0.0 && p.excursion_radius_cells == 0 {
            return bad("p_noise > 0 needs excursion_radius_cells >= 1");
        }
        if self.grid.n_locations() < 2 {
            return bad("grid needs at least two cells");
        }
        let r = &p.routine;
        if !(r.leave_home < r.arrive_work && r.arrive_work <= r.leave_work && r.leave_work < r.arrive_home && r.arrive_home <= 1440) {
            return bad("routine minutes must be increasing");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Home,
    /// Fraction of the way from `from` to `to`, as (numerator, denominator).
    Commute { outbound: bool, num: u32, den: u32 },
    Work,
}

fn phase(t: usize, t_slots: usize, r: &RoutineMinutes) -> Phase {
    let slot_len = (1440 / t_slots) as u32;
    let m = t as u32 * slot_len;
    if m < r.leave_home || m >= r.arrive_home {
        Phase::Home
    } else if m < r.arrive_work {
        Phase::Commute {
            outbound: true,
            num: m - r.leave_home + slot_len,
            den: r.arrive_work - r.leave_home + slot_len,
        }
    } else if m < r.leave_work {
        Phase::Work
    } else {
        Phase::Commute {
            outbound: false,
            num: m - r.leave_work + slot_len,
            den: r.arrive_home - r.leave_work + slot_len,
        }
    }
}

/// A user's noise-free day.
pub fn routine_day(home: LocationId, work: LocationId, t_slots: usize, r: &RoutineMinutes, grid: &GridSpec) -> Result<Vec<LocationId>> {
    let (hr, hc) = grid.row_col(home)?;
    let (wr, wc) = grid.row_col(work)?;
    let lerp = |a: usize, b: usize, f: f64| (a as f64 + f * (b as f64 - a as f64)).round() as usize;
    (0..t_slots)
        .map(|t| {
            Ok(match phase(t, t_slots, r) {
                Phase::Home => home,
                Phase::Work => work,
                Phase::Commute { outbound, num, den } => {
                    let f = num as f64 / den as f64;
                    let f = if outbound { f } else { 1.0 - f };
                    grid.id_at(lerp(hr, wr, f), lerp(hc, wc, f)).expect("line stays inside the grid")
                }
            })
        })
        .collect()
}

fn excursion(center: LocationId, radius: usize, grid: &GridSpec, rng: &mut impl Rng) -> LocationId {
    let (r0, c0) = grid.row_col(center).expect("routine cell is valid");
    let rows = r0.saturating_sub(radius)..=(r0 + radius).min(grid.n_rows() - 1);
    let cols = c0.saturating_sub(radius)..=(c0 + radius).min(grid.n_cols() - 1);
    let candidates: Vec<LocationId> = rows
        .flat_map(|r| cols.clone().map(move |c| (r, c)))
        .filter(|&rc| rc != (r0, c0))
        .filter_map(|(r, c)| grid.id_at(r, c))
        .collect();
    candidates[rng.random_range(0..candidates.len())]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserAnchors {
    pub user_id: u64,
    pub home: LocationId,
    pub work: LocationId,
}

fn anchors(user_id: u64, grid: &GridSpec, rng: &mut impl Rng) -> UserAnchors {
    let n = grid.n_locations() as u32;
    let home = LocationId(rng.random_range(0..n));
    let work = loop {
        let w = LocationId(rng.random_range(0..n));
        if w != home {
            break w;
        }
    };
    UserAnchors { user_id, home, work }
}

/// Complete trajectories (no MISSING) for users `1..=n_users`, days
/// `1..=n_days`, plus each user's anchors.
pub fn generate_with_anchors(cfg: &SynthConfig) -> Result<(Vec<Trajectory>, Vec<UserAnchors>)> {
    cfg.validate()?;
    let p = &cfg.params;
    let mut trajs = Vec::with_capacity(p.n_users * p.n_days);
    let mut all_anchors = Vec::with_capacity(p.n_users);
    for user in 1..=p.n_users as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &[user]));
        let a = anchors(user, &cfg.grid, &mut rng);
        let routine = routine_day(a.home, a.work, p.t_slots, &p.routine, &cfg.grid)?;
        for day in 1..=p.n_days as u32 {
            let slots = routine
                .iter()
                .map(|&cell| {
                    if p.p_noise > 0.0 && rng.random::<f64>() < p.p_noise {
                        Some(excursion(cell, p.excursion_radius_cells, &cfg.grid, &mut rng))
                    } else {
                        Some(cell)
                    }
                })
                .collect();
            trajs.push(Trajectory::new(user, day, slots));
        }
        all_anchors.push(a);
    }
    Ok((trajs, all_anchors))
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<Trajectory>> {
    generate_with_anchors(cfg).map(|(t, _)| t)
}

/// Keeps each slot independently with probability `p_observe`.
pub fn sparsify(trajs: &[Trajectory], p_observe: f64, rng_seed: u64) -> Result<Vec<Trajectory>> {
    if !(p_observe > 0.0 && p_observe <= 1.0) {
        return Err(Error::InvalidConfig("p_observe must lie in (0, 1]".into()));
    }
    Ok(trajs
        .iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, &[t.user_id, t.day_index as u64]));
            let slots = t
                .slots
                .iter()
                .map(|&s| if rng.random::<f64>() < p_observe { s } else { None })
                .collect();
            Trajectory::new(t.user_id, t.day_index, slots)
        })
        .collect())
}

/// Instances with uniformly random locations: `history_days` earlier days
/// observed with probability `p_observe` per slot, and a complete current day
/// with `k` masked slots. Meant for numerical checks on tiny models.
pub fn random_instances(
    n: usize,
    n_locations: usize,
    t_slots: usize,
    history_days: usize,
    k: usize,
    p_observe: f64,
    rng_seed: u64,
) -> Result<Vec<MaskedInstance>> {
    if n_locations == 0 || history_days == 0 {
        return Err(Error::InvalidConfig("need at least one location and one history day".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..n as u64)
        .map(|user| {
            let mut day = |d: u32, p: f64| {
                let slots = (0..t_slots)
                    .map(|_| (rng.random::<f64>() < p).then(|| LocationId(rng.random_range(0..n_locations as u32))))
                    .collect();
                Trajectory::new(user, d, slots)
            };
            let history: Vec<Trajectory> = (1..=history_days as u32).map(|d| day(d, p_observe)).collect();
            let current = day(history_days as u32 + 1, 1.0);
            mask_instance(&current, &history, k, derive_seed(rng_seed, &[user]))
        })
        .collect()
}
