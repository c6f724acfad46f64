//! Uniform latitude/longitude grid and great-circle distances between cells.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean earth radius used for every distance in the crate.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Row-major index of a grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub u32);

impl CellId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Extent and resolution of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub cell_size_deg: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    n_rows: u32,
    n_cols: u32,
}

fn cells_along(span: f64, size: f64) -> u32 {
    // 180 / 0.1 lands a hair above 1800; don't let that open an extra row.
    ((span / size) - 1e-9).ceil().max(1.0) as u32
}

impl GridConfig {
    pub fn new(cell_size_deg: f64, lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let finite = [cell_size_deg, lat_min, lat_max, lon_min, lon_max].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidGrid("non-finite parameter".into()));
        }
        if cell_size_deg <= 0.0 {
            return Err(Error::InvalidGrid(format!("cell size {cell_size_deg} must be positive")));
        }
        if !(-90.0..=90.0).contains(&lat_min) || !(-90.0..=90.0).contains(&lat_max) || lat_min >= lat_max {
            return Err(Error::InvalidGrid(format!("bad latitude range [{lat_min}, {lat_max}]")));
        }
        if lon_min >= lon_max || lon_max - lon_min > 360.0 || lon_min < -360.0 || lon_max > 360.0 {
            return Err(Error::InvalidGrid(format!("bad longitude range [{lon_min}, {lon_max}]")));
        }
        let n_rows = cells_along(lat_max - lat_min, cell_size_deg);
        let n_cols = cells_along(lon_max - lon_min, cell_size_deg);
        if (n_rows as u64) * (n_cols as u64) > u32::MAX as u64 {
            return Err(Error::InvalidGrid("too many cells".into()));
        }
        Ok(Self { cell_size_deg, lat_min, lat_max, lon_min, lon_max, n_rows, n_cols })
    }

    /// Whole-earth grid starting at (-90, -180).
    pub fn global(cell_size_deg: f64) -> Result<Self> {
        Self::new(cell_size_deg, -90.0, 90.0, -180.0, 180.0)
    }

    pub fn n_rows(&self) -> u32 {
        self.n_rows
    }

    pub fn n_cols(&self) -> u32 {
        self.n_cols
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows as usize * self.n_cols as usize
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat.is_finite()
            && lon.is_finite()
            && (self.lat_min..=self.lat_max).contains(&lat)
            && (self.lon_min..=self.lon_max).contains(&lon)
    }

    pub fn cell_of(&self, lat: f64, lon: f64) -> Result<CellId> {
        if !self.contains(lat, lon) {
            return Err(Error::OutOfExtent { lat, lon });
        }
        let row = (((lat - self.lat_min) / self.cell_size_deg).floor() as u32).min(self.n_rows - 1);
        let col = (((lon - self.lon_min) / self.cell_size_deg).floor() as u32).min(self.n_cols - 1);
        Ok(self.cell_at(row, col))
    }

    pub fn cell_at(&self, row: u32, col: u32) -> CellId {
        debug_assert!(row < self.n_rows && col < self.n_cols);
        CellId(row * self.n_cols + col)
    }

    pub fn row_col(&self, cell: CellId) -> (u32, u32) {
        (cell.0 / self.n_cols, cell.0 % self.n_cols)
    }

    /// Midpoint of the cell's lat/lon box, pulled inside the extent for
    /// partial cells on the last row/column.
    pub fn cell_center(&self, cell: CellId) -> (f64, f64) {
        let (row, col) = self.row_col(cell);
        self.center_of(row, col)
    }

    fn center_of(&self, row: u32, col: u32) -> (f64, f64) {
        let half = self.cell_size_deg / 2.0;
        let lat = self.lat_min + row as f64 * self.cell_size_deg + half;
        let lon = self.lon_min + col as f64 * self.cell_size_deg + half;
        (lat.min(self.lat_max), lon.min(self.lon_max))
    }

    pub fn is_valid(&self, cell: CellId) -> bool {
        cell.index() < self.n_cells()
    }

    pub fn cells(&self) -> impl Iterator<Item = CellId> {
        (0..self.n_cells() as u32).map(CellId)
    }

    /// Half the diagonal of one cell sitting on the equator. Used as the
    /// representative distance of a center from itself and as the smallest
    /// default ring radius.
    pub fn half_cell_diagonal_km(&self) -> f64 {
        haversine_km(0.0, 0.0, self.cell_size_deg, self.cell_size_deg) / 2.0
    }

    /// Stable byte encoding used for content hashes.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48);
        for v in [self.cell_size_deg, self.lat_min, self.lat_max, self.lon_min, self.lon_max] {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out.extend_from_slice(&self.n_rows.to_le_bytes());
        out.extend_from_slice(&self.n_cols.to_le_bytes());
        out
    }
}

/// Great-circle distance between two lat/lon points (degrees).
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

fn unit_vector(lat: f64, lon: f64) -> [f64; 3] {
    let (p, l) = (lat.to_radians(), lon.to_radians());
    [p.cos() * l.cos(), p.cos() * l.sin(), p.sin()]
}

/// Central-angle distance from two unit vectors via the chord length, which
/// stays accurate for both tiny and near-antipodal separations.
#[inline]
pub fn chord_distance_km(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    let chord = (dx * dx + dy * dy + dz * dz).sqrt();
    2.0 * EARTH_RADIUS_KM * (chord / 2.0).min(1.0).asin()
}

/// A grid configuration plus precomputed cell-center unit vectors.
#[derive(Clone, Debug)]
pub struct Grid {
    config: GridConfig,
    centers: Vec<[f64; 3]>,
}

impl Grid {
    pub fn new(config: GridConfig) -> Self {
        // Distances use the full cell box midpoint (not truncated to the
        // extent) so that they only depend on row pair and column offset.
        let size = config.cell_size_deg;
        let centers = config
            .cells()
            .map(|c| {
                let (row, col) = config.row_col(c);
                let lat = (config.lat_min + (row as f64 + 0.5) * size).min(90.0);
                let lon = config.lon_min + (col as f64 + 0.5) * size;
                unit_vector(lat, lon)
            })
            .collect();
        Self { config, centers }
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn n_cells(&self) -> usize {
        self.config.n_cells()
    }

    pub fn cell_of(&self, lat: f64, lon: f64) -> Result<CellId> {
        self.config.cell_of(lat, lon)
    }

    pub fn cell_center(&self, cell: CellId) -> (f64, f64) {
        self.config.cell_center(cell)
    }

    #[inline]
    pub fn unit(&self, cell: CellId) -> &[f64; 3] {
        &self.centers[cell.index()]
    }

    /// Distance between the centers of two cells; exactly zero iff `a == b`.
    #[inline]
    pub fn great_circle_km(&self, a: CellId, b: CellId) -> f64 {
        if a == b {
            return 0.0;
        }
        chord_distance_km(&self.centers[a.index()], &self.centers[b.index()])
    }

    /// Distance from the cell at (`row_a`, column 0) to the cell at
    /// (`row_b`, column `dcol`). On a lat/lon grid every pair of cells is a
    /// translate of one of these along the longitude axis.
    #[inline]
    pub fn row_offset_km(&self, row_a: u32, row_b: u32, dcol: u32) -> f64 {
        let a = self.config.cell_at(row_a, 0);
        let b = self.config.cell_at(row_b, dcol);
        self.great_circle_km(a, b)
    }

    /// Largest distance between any two cell centers.
    pub fn max_pairwise_km(&self) -> f64 {
        let (rows, cols) = (self.config.n_rows(), self.config.n_cols());
        let mut best = 0.0f64;
        for ra in 0..rows {
            for rb in ra..rows {
                for dc in 0..cols {
                    best = best.max(self.row_offset_km(ra, rb, dc));
                }
            }
        }
        best
    }

    /// The eight surrounding cells (fewer on the border).
    pub fn neighbors(&self, cell: CellId) -> Vec<CellId> {
        let (row, col) = self.config.row_col(cell);
        let mut out = Vec::with_capacity(8);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (r, c) = (row as i64 + dr, col as i64 + dc);
                if r >= 0 && c >= 0 && r < self.config.n_rows() as i64 && c < self.config.n_cols() as i64 {
                    out.push(self.config.cell_at(r as u32, c as u32));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn global1() -> GridConfig {
        GridConfig::global(1.0).unwrap()
    }

    #[test]
    fn bucketing() {
        let g = global1();
        assert_eq!((g.n_rows(), g.n_cols()), (180, 360));
        let c = g.cell_of(0.5, 0.5).unwrap();
        assert_eq!(g.row_col(c), (90, 180));
        assert_eq!(g.cell_of(40.7, -74.0).unwrap(), CellId(130 * 360 + 106));
        assert_eq!(g.cell_of(40.7, -74.0).unwrap(), CellId(46906));
    }

    #[test]
    fn boundary_clamps_into_last_row() {
        let g = global1();
        let c = g.cell_of(90.0, 179.99).unwrap();
        assert_eq!(g.row_col(c), (179, 359));
        let c = g.cell_of(-90.0, 180.0).unwrap();
        assert_eq!(g.row_col(c), (0, 359));
    }

    #[test]
    fn out_of_extent() {
        let g = global1();
        assert!(matches!(g.cell_of(91.0, 0.0), Err(Error::OutOfExtent { .. })));
        assert!(g.cell_of(0.0, -180.5).is_err());
        assert!(g.cell_of(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn centers() {
        let g = global1();
        let c = g.cell_of(0.5, 0.5).unwrap();
        assert_eq!(g.cell_center(c), (0.5, 0.5));
        assert_eq!(g.cell_center(CellId(0)), (-89.5, -179.5));
        for cell in g.cells() {
            let (lat, lon) = g.cell_center(cell);
            assert_eq!(g.cell_of(lat, lon).unwrap(), cell);
        }
    }

    #[test]
    fn regional_grid_round_trip() {
        let g = GridConfig::new(0.7, 24.0, 50.0, -125.0, -66.0).unwrap();
        for cell in g.cells() {
            let (lat, lon) = g.cell_center(cell);
            assert_eq!(g.cell_of(lat, lon).unwrap(), cell, "cell {cell}");
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(GridConfig::global(0.0).is_err());
        assert!(GridConfig::new(1.0, 10.0, 5.0, 0.0, 1.0).is_err());
        assert!(GridConfig::new(1.0, -91.0, 5.0, 0.0, 1.0).is_err());
        assert!(GridConfig::new(1.0, 0.0, 5.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn reference_distances() {
        let g = Grid::new(global1());
        let a = g.cell_of(0.5, 0.5).unwrap();
        assert_eq!(g.great_circle_km(a, a), 0.0);
        let anti = g.cell_of(-0.5, -179.5).unwrap();
        let half = std::f64::consts::PI * EARTH_RADIUS_KM;
        assert!((g.great_circle_km(a, anti) - half).abs() < 1e-6);
        assert!((half - 20015.0868).abs() < 1e-3);

        let quarter = haversine_km(0.0, 0.0, 0.0, 90.0);
        assert!((quarter - 10007.543).abs() < 1e-2);
        assert!((chord_distance_km(&unit_vector(0.0, 0.0), &unit_vector(0.0, 90.0)) - quarter).abs() < 1e-9);
    }

    #[test]
    fn max_pairwise_on_global_grid_is_half_circumference() {
        let g = Grid::new(GridConfig::global(10.0).unwrap());
        let d = g.max_pairwise_km();
        assert!((d - std::f64::consts::PI * EARTH_RADIUS_KM).abs() < 1e-6, "{d}");
    }

    #[test]
    fn neighbors_on_border() {
        let g = Grid::new(GridConfig::global(10.0).unwrap());
        assert_eq!(g.neighbors(CellId(0)).len(), 3);
        assert_eq!(g.neighbors(g.cell_of(5.0, 5.0).unwrap()).len(), 8);
    }

    proptest! {
        #[test]
        fn metric_properties(a in 0u32..64800, b in 0u32..64800, c in 0u32..64800) {
            thread_local! {
                static G: Grid = Grid::new(GridConfig::global(1.0).unwrap());
            }
            G.with(|g| {
                let (a, b, c) = (CellId(a), CellId(b), CellId(c));
                let ab = g.great_circle_km(a, b);
                prop_assert_eq!(ab, g.great_circle_km(b, a));
                prop_assert!(ab >= 0.0);
                prop_assert_eq!(ab == 0.0, a == b);
                let ac = g.great_circle_km(a, c);
                let cb = g.great_circle_km(c, b);
                prop_assert!(ab <= ac + cb + 1e-9);
                let (la, oa) = g.cell_center(a);
                let (lb, ob) = g.cell_center(b);
                prop_assert!((ab - haversine_km(la, oa, lb, ob)).abs() < 1e-6);
                Ok(())
            })?;
        }
    }
}
