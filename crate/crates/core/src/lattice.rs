//! Index arithmetic on uniform rectangular arrays.
//!
//! Antenna indices are 1-based. Element `idx` sits at the 0-based lattice
//! point `y = (idx-1) mod n_y`, `z = (idx-1) div n_y`.

use serde::{Deserialize, Serialize};
use std::ops::Sub;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LatticeError {
    #[error("antenna index {index} outside 1..={total}")]
    IndexOutOfRange { index: usize, total: usize },
    #[error("invalid pilot budget n_t = {n_t} for array of {total}")]
    InvalidBudget { n_t: usize, total: usize },
    #[error("array dimensions must be positive (got {n_y}x{n_z})")]
    EmptyGeometry { n_y: usize, n_z: usize },
    #[error("active set must be strictly increasing indices in 1..={total}")]
    InvalidActiveSet { total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UraGeometry {
    pub n_y: usize,
    pub n_z: usize,
}

impl UraGeometry {
    pub fn new(n_y: usize, n_z: usize) -> Result<Self, LatticeError> {
        let g = Self { n_y, n_z };
        g.validate()?;
        Ok(g)
    }

    pub fn square(n: usize) -> Self {
        Self { n_y: n, n_z: n }
    }

    pub fn total(&self) -> usize {
        self.n_y * self.n_z
    }

    pub fn validate(&self) -> Result<(), LatticeError> {
        if self.n_y == 0 || self.n_z == 0 {
            return Err(LatticeError::EmptyGeometry {
                n_y: self.n_y,
                n_z: self.n_z,
            });
        }
        Ok(())
    }

    /// Number of distinct coordinate differences, `(2n_y−1)(2n_z−1)`.
    pub fn lag_count(&self) -> usize {
        (2 * self.n_y - 1) * (2 * self.n_z - 1)
    }

    /// Slot of a coordinate difference in a lag table of size [`lag_count`](Self::lag_count).
    pub fn lag_slot(&self, d: LatticeCoord) -> usize {
        let w = 2 * self.n_y as i64 - 1;
        ((d.y + self.n_y as i64 - 1) + w * (d.z + self.n_z as i64 - 1)) as usize
    }

    /// Inverse of [`lag_slot`](Self::lag_slot).
    pub fn lag_at(&self, slot: usize) -> LatticeCoord {
        let w = 2 * self.n_y - 1;
        LatticeCoord {
            y: (slot % w) as i64 - (self.n_y as i64 - 1),
            z: (slot / w) as i64 - (self.n_z as i64 - 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatticeCoord {
    pub y: i64,
    pub z: i64,
}

impl LatticeCoord {
    pub fn new(y: i64, z: i64) -> Self {
        Self { y, z }
    }
}

impl Sub for LatticeCoord {
    type Output = LatticeCoord;
    fn sub(self, rhs: Self) -> Self {
        LatticeCoord {
            y: self.y - rhs.y,
            z: self.z - rhs.z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IndexPair {
    pub rx: usize,
    pub tx: usize,
}

impl IndexPair {
    pub fn new(rx: usize, tx: usize) -> Self {
        Self { rx, tx }
    }

    /// Column-major position of `H[rx, tx]` in `vec(H)` (0-based).
    pub fn vec_index(&self, n_r: usize) -> usize {
        (self.rx - 1) + n_r * (self.tx - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    indices: Vec<usize>,
    n_total: usize,
}

impl ActiveSet {
    pub fn new(indices: Vec<usize>, n_total: usize) -> Result<Self, LatticeError> {
        let ok = !indices.is_empty()
            && indices.len() <= n_total
            && indices.iter().all(|&a| a >= 1 && a <= n_total)
            && indices.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(LatticeError::InvalidActiveSet { total: n_total });
        }
        Ok(Self { indices, n_total })
    }

    pub fn full(n_total: usize) -> Self {
        Self {
            indices: (1..=n_total).collect(),
            n_total,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn contains(&self, tx: usize) -> bool {
        self.indices.binary_search(&tx).is_ok()
    }
}

pub fn coords_of(index: usize, geom: UraGeometry) -> Result<LatticeCoord, LatticeError> {
    if index == 0 || index > geom.total() {
        return Err(LatticeError::IndexOutOfRange {
            index,
            total: geom.total(),
        });
    }
    Ok(coords_unchecked(index, geom))
}

#[inline]
pub(crate) fn coords_unchecked(index: usize, geom: UraGeometry) -> LatticeCoord {
    let k = index - 1;
    LatticeCoord {
        y: (k % geom.n_y) as i64,
        z: (k / geom.n_y) as i64,
    }
}

/// Inverse of [`coords_of`].
pub fn index_of(c: LatticeCoord, geom: UraGeometry) -> Option<usize> {
    if c.y < 0 || c.z < 0 || c.y >= geom.n_y as i64 || c.z >= geom.n_z as i64 {
        return None;
    }
    Some(1 + c.y as usize + geom.n_y * c.z as usize)
}

/// `a_ℓ = 1 + ⌊(ℓ−1)·N_t/n_t⌋`.
pub fn equispaced_subset(n_total: usize, n_t: usize) -> Result<ActiveSet, LatticeError> {
    if n_t == 0 || n_t > n_total {
        return Err(LatticeError::InvalidBudget {
            n_t,
            total: n_total,
        });
    }
    let indices = (0..n_t).map(|l| 1 + l * n_total / n_t).collect();
    ActiveSet::new(indices, n_total)
}

/// Training grid `{(i, a_ℓ)}` with the receive index running fastest.
pub fn training_grid(n_r: usize, omega: &ActiveSet) -> Vec<IndexPair> {
    omega
        .indices()
        .iter()
        .flat_map(|&a| (1..=n_r).map(move |i| IndexPair::new(i, a)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionMode {
    #[default]
    Full,
    MissingOnly,
}

pub fn prediction_grid(
    n_r: usize,
    n_t: usize,
    mode: PredictionMode,
    omega: &ActiveSet,
) -> Vec<IndexPair> {
    (1..=n_t)
        .filter(|&j| mode == PredictionMode::Full || !omega.contains(j))
        .flat_map(|j| (1..=n_r).map(move |i| IndexPair::new(i, j)))
        .collect()
}
