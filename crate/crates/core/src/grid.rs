//! Regular cell grids and the handcrafted typed-neighborhood adjacency.
//!
//! A cell `x` at `(row, col)` has index `row * cols + col`. Its neighbors are
//! the cells within Euclidean distance `radius` (in cell units), split into
//! `sectors` angular bins of equal width centered on the axis directions.
//! With four sectors the bins are named left, right, up and down, and at
//! radius 1 they reduce to plain 4-adjacency.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sector index of left neighbors when `sectors == 4`.
pub const LEFT: usize = 0;
/// Sector index of right neighbors when `sectors == 4`.
pub const RIGHT: usize = 1;
/// Sector index of upper neighbors when `sectors == 4`.
pub const UP: usize = 2;
/// Sector index of lower neighbors when `sectors == 4`.
pub const DOWN: usize = 3;

/// Angular bin (bin `b` centered on `b * 360 / C` degrees, counter-clockwise
/// from the +col axis) to sector index, for the four-sector layout.
const FOUR_SECTOR_ORDER: [usize; 4] = [RIGHT, UP, LEFT, DOWN];

const ANGLE_EPS_DEG: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub radius: usize,
    pub sectors: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, radius: usize, sectors: usize) -> Result<Self> {
        let spec = GridSpec {
            rows,
            cols,
            radius,
            sectors,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rows", self.rows),
            ("cols", self.cols),
            ("radius", self.radius),
            ("sectors", self.sectors),
        ] {
            if v == 0 {
                return Err(Error::InvalidGrid(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Number of cells `n`.
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn cell_coords(&self, x: usize) -> (usize, usize) {
        (x / self.cols, x % self.cols)
    }
}

/// Sector of the displacement `(delta_row, delta_col)`; rows grow downward,
/// so `(-1, 0)` points up. Displacements on a bin boundary go to the
/// lower-indexed sector.
pub fn sector_of(delta_row: i64, delta_col: i64, sectors: usize) -> Result<usize> {
    if delta_row == 0 && delta_col == 0 {
        return Err(Error::ZeroDisplacement);
    }
    if sectors == 0 {
        return Err(Error::InvalidGrid("sectors must be >= 1".into()));
    }
    let width = 360.0 / sectors as f64;
    let angle = (-(delta_row as f64)).atan2(delta_col as f64).to_degrees();
    let angle = if angle < 0.0 { angle + 360.0 } else { angle };

    let mut best: Option<usize> = None;
    for bin in 0..sectors {
        let center = bin as f64 * width;
        let mut dist = (angle - center).abs();
        if dist > 180.0 {
            dist = 360.0 - dist;
        }
        if dist <= width / 2.0 + ANGLE_EPS_DEG {
            let sector = if sectors == 4 {
                FOUR_SECTOR_ORDER.get(bin).copied().unwrap_or(bin)
            } else {
                bin
            };
            best = Some(best.map_or(sector, |b| b.min(sector)));
        }
    }
    // every angle lies within half a bin width of some center
    Ok(best.expect("angle falls in no sector"))
}

/// Fixed sparsity pattern shared by all layers built from one grid.
#[derive(Debug, PartialEq)]
pub struct Support {
    spec: GridSpec,
    edges: Vec<Vec<(usize, usize)>>,
    mask: Vec<Array2<bool>>,
    degree: Vec<usize>,
}

impl Support {
    pub fn new(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.cells();
        let c_count = spec.sectors;
        let r = spec.radius as i64;
        let mut edges = vec![Vec::new(); c_count];
        let mut mask = vec![Array2::from_elem((n, n), false); c_count];
        let mut degree = vec![0usize; n];

        for x in 0..n {
            let (row, col) = spec.cell_coords(x);
            for dr in -r..=r {
                for dc in -r..=r {
                    if (dr == 0 && dc == 0) || dr * dr + dc * dc > r * r {
                        continue;
                    }
                    let nr = row as i64 + dr;
                    let nc = col as i64 + dc;
                    if nr < 0 || nc < 0 || nr >= spec.rows as i64 || nc >= spec.cols as i64 {
                        continue;
                    }
                    let x2 = spec.cell_index(nr as usize, nc as usize);
                    let c = sector_of(dr, dc, c_count)?;
                    mask[c][[x, x2]] = true;
                    degree[x] += 1;
                }
            }
        }
        // canonical edge order: row-major over (x, x') within each sector
        for c in 0..c_count {
            for x in 0..n {
                for x2 in 0..n {
                    if mask[c][[x, x2]] {
                        edges[c].push((x, x2));
                    }
                }
            }
        }
        Ok(Support {
            spec,
            edges,
            mask,
            degree,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn cells(&self) -> usize {
        self.spec.cells()
    }

    pub fn sectors(&self) -> usize {
        self.spec.sectors
    }

    /// Masked `(x, x')` pairs of sector `c`, row-major.
    pub fn edges(&self, c: usize) -> &[(usize, usize)] {
        &self.edges[c]
    }

    pub fn is_masked(&self, c: usize, x: usize, x2: usize) -> bool {
        self.mask[c][[x, x2]]
    }

    pub fn mask(&self, c: usize) -> &Array2<bool> {
        &self.mask[c]
    }

    /// Total neighbor count of `x` across all sectors.
    pub fn degree(&self, x: usize) -> usize {
        self.degree[x]
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }
}

/// One weight matrix per sector over a shared [`Support`]; entries off the
/// mask are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencySet {
    support: Arc<Support>,
    matrices: Vec<Array2<f64>>,
}

impl AdjacencySet {
    /// All-zero weights on the given support.
    pub fn zeros(support: Arc<Support>) -> Self {
        let n = support.cells();
        let matrices = vec![Array2::zeros((n, n)); support.sectors()];
        AdjacencySet { support, matrices }
    }

    pub fn support(&self) -> &Arc<Support> {
        &self.support
    }

    pub fn cells(&self) -> usize {
        self.support.cells()
    }

    pub fn sectors(&self) -> usize {
        self.support.sectors()
    }

    pub fn matrix(&self, c: usize) -> &Array2<f64> {
        &self.matrices[c]
    }

    pub fn get(&self, c: usize, x: usize, x2: usize) -> f64 {
        self.matrices[c][[x, x2]]
    }

    pub fn set(&mut self, c: usize, x: usize, x2: usize, value: f64) -> Result<()> {
        if !self.support.is_masked(c, x, x2) {
            return Err(Error::InvalidArgument(format!(
                "entry ({x}, {x2}) of sector {c} is outside the neighborhood mask"
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("adjacency weight ({c}, {x}, {x2})")));
        }
        self.matrices[c][[x, x2]] = value;
        Ok(())
    }

    /// `(x, x', weight)` for every masked entry of sector `c`.
    pub fn weighted_edges(&self, c: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.support
            .edges(c)
            .iter()
            .map(move |&(x, x2)| (x, x2, self.matrices[c][[x, x2]]))
    }

    /// Masked weights flattened in canonical order (sector, then row-major).
    pub fn masked_values(&self) -> Vec<f64> {
        (0..self.sectors())
            .flat_map(|c| self.weighted_edges(c).map(|(_, _, w)| w))
            .collect()
    }

    /// Inverse of [`masked_values`](Self::masked_values).
    pub fn set_masked_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.support.edge_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} masked weights, got {}",
                self.support.edge_count(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for c in 0..self.sectors() {
            for &(x, x2) in self.support.edges(c) {
                let v = *it.next().unwrap();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("adjacency weight ({c}, {x}, {x2})")));
                }
                self.matrices[c][[x, x2]] = v;
            }
        }
        Ok(())
    }
}

/// Handcrafted context: each masked entry of row `x` is `1 / deg(x)`, where
/// `deg(x)` counts neighbors over all sectors. Rows of the sector sum are
/// stochastic for non-isolated cells, and corner cells get larger weights.
pub fn build_adjacency(spec: &GridSpec) -> Result<AdjacencySet> {
    let support = Arc::new(Support::new(*spec)?);
    Ok(handcrafted(support))
}

pub(crate) fn handcrafted(support: Arc<Support>) -> AdjacencySet {
    let mut adj = AdjacencySet::zeros(support);
    let support = Arc::clone(&adj.support);
    for c in 0..support.sectors() {
        for &(x, x2) in support.edges(c) {
            adj.matrices[c][[x, x2]] = 1.0 / support.degree(x) as f64;
        }
    }
    adj
}
