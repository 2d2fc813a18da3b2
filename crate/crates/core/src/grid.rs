//! Uniform lat/lon grid used as the location vocabulary.
//!
//! Cells are `cell_size_m` meters on a side (measured at the box's middle
//! latitude) and numbered row-major from the south-west corner. The grid
//! covers the bounding box; the last row/column may extend past it.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * PI / 180.0;

/// A cell of the grid. The MISSING marker is modelled as `None` in a [`Slot`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LocationId(pub u32);

impl LocationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for LocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One time slot of a trajectory: an observed cell or MISSING.
pub type Slot = Option<LocationId>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RawGridSpec {
    min_lat: f64,
    min_lon: f64,
    max_lat: f64,
    max_lon: f64,
    cell_size_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGridSpec", into = "RawGridSpec")]
pub struct GridSpec {
    min_lat: f64,
    min_lon: f64,
    max_lat: f64,
    max_lon: f64,
    cell_size_m: f64,
    lat_step: f64,
    lon_step: f64,
    n_rows: usize,
    n_cols: usize,
}

impl TryFrom<RawGridSpec> for GridSpec {
    type Error = Error;

    fn try_from(raw: RawGridSpec) -> Result<Self> {
        GridSpec::new(raw.min_lat, raw.min_lon, raw.max_lat, raw.max_lon, raw.cell_size_m)
    }
}

impl From<GridSpec> for RawGridSpec {
    fn from(g: GridSpec) -> Self {
        RawGridSpec {
            min_lat: g.min_lat,
            min_lon: g.min_lon,
            max_lat: g.max_lat,
            max_lon: g.max_lon,
            cell_size_m: g.cell_size_m,
        }
    }
}

impl GridSpec {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64, cell_size_m: f64) -> Result<Self> {
        let finite = [min_lat, min_lon, max_lat, max_lon, cell_size_m]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("grid bounds must be finite".into()));
        }
        if max_lat <= min_lat || max_lon <= min_lon {
            return Err(Error::InvalidConfig(
                "grid requires max_lat > min_lat and max_lon > min_lon".into(),
            ));
        }
        if !(-90.0..=90.0).contains(&min_lat) || !(-90.0..=90.0).contains(&max_lat) {
            return Err(Error::InvalidConfig("grid latitudes must lie in [-90, 90]".into()));
        }
        if cell_size_m <= 0.0 {
            return Err(Error::InvalidConfig("cell_size_m must be positive".into()));
        }
        let mid_lat = 0.5 * (min_lat + max_lat);
        let lat_step = cell_size_m / METERS_PER_DEGREE;
        let lon_step = cell_size_m / (METERS_PER_DEGREE * mid_lat.to_radians().cos());
        let n_rows = cells_along(max_lat - min_lat, lat_step);
        let n_cols = cells_along(max_lon - min_lon, lon_step);
        Ok(GridSpec {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
            cell_size_m,
            lat_step,
            lon_step,
            n_rows,
            n_cols,
        })
    }

    /// A box of exactly `n_rows` x `n_cols` cells with its south-west corner at
    /// the given origin.
    pub fn with_dims(origin_lat: f64, origin_lon: f64, n_rows: usize, n_cols: usize, cell_size_m: f64) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::InvalidConfig("grid needs at least one row and column".into()));
        }
        let lat_step = cell_size_m / METERS_PER_DEGREE;
        let max_lat = origin_lat + lat_step * n_rows as f64;
        // the longitude step depends on the middle latitude, which is known now
        let mid_lat = 0.5 * (origin_lat + max_lat);
        let lon_step = cell_size_m / (METERS_PER_DEGREE * mid_lat.to_radians().cos());
        // shave a hair off so rounding cannot add a spurious row or column
        let shave = 1e-9;
        let g = GridSpec::new(
            origin_lat,
            origin_lon,
            origin_lat + lat_step * (n_rows as f64 - shave),
            origin_lon + lon_step * (n_cols as f64 - shave),
            cell_size_m,
        )?;
        debug_assert_eq!((g.n_rows, g.n_cols), (n_rows, n_cols));
        Ok(g)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Total number of cells, |L|.
    pub fn n_locations(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_m
    }

    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (self.min_lat, self.min_lon, self.max_lat, self.max_lon)
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.min_lat..=self.max_lat).contains(&lat) && (self.min_lon..=self.max_lon).contains(&lon)
    }

    /// Row-major cell containing the point. Points on a shared edge go to the
    /// cell with the larger row/column index.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Result<LocationId> {
        if !self.contains(lat, lon) {
            return Err(Error::OutOfBounds { lat, lon });
        }
        let row = index_along(lat - self.min_lat, self.lat_step, self.n_rows);
        let col = index_along(lon - self.min_lon, self.lon_step, self.n_cols);
        Ok(LocationId((row * self.n_cols + col) as u32))
    }

    pub fn row_col(&self, id: LocationId) -> Result<(usize, usize)> {
        self.check(id)?;
        Ok((id.index() / self.n_cols, id.index() % self.n_cols))
    }

    pub fn id_at(&self, row: usize, col: usize) -> Option<LocationId> {
        (row < self.n_rows && col < self.n_cols).then(|| LocationId((row * self.n_cols + col) as u32))
    }

    /// Center of a cell as (lat, lon) degrees.
    pub fn center_of(&self, id: LocationId) -> Result<(f64, f64)> {
        let (row, col) = self.row_col(id)?;
        Ok((
            self.min_lat + (row as f64 + 0.5) * self.lat_step,
            self.min_lon + (col as f64 + 0.5) * self.lon_step,
        ))
    }

    /// Haversine distance between two cell centers.
    pub fn cell_distance_m(&self, a: Slot, b: Slot) -> Result<f64> {
        let (a, b) = (a.ok_or(Error::MissingLocation)?, b.ok_or(Error::MissingLocation)?);
        if a == b {
            self.check(a)?;
            return Ok(0.0);
        }
        let (lat1, lon1) = self.center_of(a)?;
        let (lat2, lon2) = self.center_of(b)?;
        Ok(haversine_m(lat1, lon1, lat2, lon2))
    }

    fn check(&self, id: LocationId) -> Result<()> {
        if id.index() < self.n_locations() {
            Ok(())
        } else {
            Err(Error::LocationOutOfRange {
                id: id.index(),
                n_locations: self.n_locations(),
            })
        }
    }
}

fn cells_along(span: f64, step: f64) -> usize {
    ((span / step).ceil() as usize).max(1)
}

fn index_along(offset: f64, step: f64, n: usize) -> usize {
    let x = offset / step;
    // snap values within rounding noise of an edge onto it, so edges go up
    let snapped = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.floor() };
    (snapped.max(0.0) as usize).min(n - 1)
}

/// Great-circle distance in meters.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}
