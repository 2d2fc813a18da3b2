//! Location embeddings plus sinusoidal time encodings.

use std::io::Write;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Slot;

/// Learned location embeddings: one row per location plus a final MISSING row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub table: Array2<f64>,
}

impl EmbeddingTable {
    pub fn zeros(n_locations: usize, d: usize) -> Self {
        EmbeddingTable {
            table: Array2::zeros((n_locations + 1, d)),
        }
    }

    /// Entries uniform in `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn random(n_locations: usize, d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        EmbeddingTable {
            table: Array2::from_shape_fn((n_locations + 1, d), |_| rng.random_range(-bound..=bound)),
        }
    }

    pub fn from_array(table: Array2<f64>) -> Result<Self> {
        if table.nrows() < 2 || table.ncols() == 0 {
            return Err(Error::InvalidConfig("embedding table needs a location row and a MISSING row".into()));
        }
        Ok(EmbeddingTable { table })
    }

    /// |L|, excluding the MISSING row.
    pub fn n_locations(&self) -> usize {
        self.table.nrows() - 1
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn missing_row(&self) -> usize {
        self.n_locations()
    }

    /// Table row used for a slot.
    pub fn row_of(&self, slot: Slot) -> Result<usize> {
        match slot {
            None => Ok(self.missing_row()),
            Some(l) if l.index() < self.n_locations() => Ok(l.index()),
            Some(l) => Err(Error::LocationOutOfRange {
                id: l.index(),
                n_locations: self.n_locations(),
            }),
        }
    }

    /// Writes the table as CSV, one row per location and MISSING last.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for row in self.table.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Parameter-free sinusoidal encoding of slot indices, precomputed for `T`
/// slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEncoder {
    table: Array2<f64>,
}

impl TimeEncoder {
    pub fn new(t_slots: usize, d: usize) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("time encoding needs an even dimension, got {d}")));
        }
        let mut table = Array2::zeros((t_slots, d));
        for t in 0..t_slots {
            table.row_mut(t).assign(&time_encoding(t, d));
        }
        Ok(TimeEncoder { table })
    }

    pub fn t_slots(&self) -> usize {
        self.table.nrows()
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }
}

/// `e_t(2i) = sin(t / 10000^(2i/d))`, `e_t(2i+1) = cos(t / 10000^(2i/d))`.
pub fn time_encoding(t: usize, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |j| {
        let i = j / 2;
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Row `t` is the slot's location embedding (MISSING row when unobserved)
/// plus the time encoding of `t`.
pub fn embed_trajectory(slots: &[Slot], table: &EmbeddingTable, time: &TimeEncoder) -> Result<Array2<f64>> {
    if slots.len() != time.t_slots() {
        return Err(Error::DimensionMismatch {
            context: "trajectory length",
            expected: time.t_slots(),
            actual: slots.len(),
        });
    }
    if table.dim() != time.dim() {
        return Err(Error::DimensionMismatch {
            context: "embedding dimension",
            expected: time.dim(),
            actual: table.dim(),
        });
    }
    let mut out = time.table().clone();
    for (t, &slot) in slots.iter().enumerate() {
        let row = table.row_of(slot)?;
        let mut target = out.row_mut(t);
        target += &table.table.row(row);
    }
    Ok(out)
}

/// Scatters the gradient of an embedded trajectory back into table rows.
pub fn embed_backward(slots: &[Slot], d_embedded: &Array2<f64>, table: &EmbeddingTable, grad: &mut Array2<f64>) {
    for (t, &slot) in slots.iter().enumerate() {
        let row = table.row_of(slot).expect("slots were validated in the forward pass");
        let mut target = grad.row_mut(row);
        target += &d_embedded.row(t);
    }
}
