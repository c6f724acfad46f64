//! Per-center count of grid cells falling in each ring (`T_i`), built once
//! per (grid, ring spec) and cached on disk.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{CellId, Grid, GridConfig};
use crate::rings::RingSpec;

const MAGIC: &[u8; 8] = b"RINGTBL\0";
const VERSION: u32 = 1;

/// Content hash of a grid configuration and ring spec.
pub fn table_key(cfg: &GridConfig, spec: &RingSpec) -> u64 {
    let mut h = Sha256::new();
    h.update(cfg.canonical_bytes());
    h.update(spec.canonical_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RingCellTable {
    rings: usize,
    key: u64,
    counts: Vec<u32>,
}

impl RingCellTable {
    /// Builds the table using the longitude-translation symmetry of the
    /// grid: distances only depend on (row, row, column offset), so each
    /// pair of rows is handled with one prefix-sum pass per ring.
    pub fn build(grid: &Grid, spec: &RingSpec, exec: Execution) -> Self {
        let cfg = grid.config();
        let (rows, cols, r) = (cfg.n_rows(), cfg.n_cols() as usize, spec.len());
        let per_row = exec.map_range(rows as usize, |ra| {
            let ra = ra as u32;
            let mut out = vec![0u32; cols * r];
            let mut prefix = vec![0u32; r * cols];
            for rb in 0..rows {
                prefix.iter_mut().for_each(|v| *v = 0);
                for dc in 0..cols {
                    if dc > 0 {
                        for i in 0..r {
                            prefix[i * cols + dc] = prefix[i * cols + dc - 1];
                        }
                    }
                    let d = grid.row_offset_km(ra, rb, dc as u32);
                    if let Some(i) = spec.ring_index(d) {
                        prefix[i * cols + dc] += 1;
                    }
                }
                for ca in 0..cols {
                    let right = cols - 1 - ca;
                    for i in 0..r {
                        let p = &prefix[i * cols..(i + 1) * cols];
                        out[ca * r + i] += p[ca] + p[right] - p[0];
                    }
                }
            }
            out
        });
        Self { rings: r, key: table_key(cfg, spec), counts: per_row.concat() }
    }

    /// Straight double loop over all cell pairs.
    pub fn build_brute_force(grid: &Grid, spec: &RingSpec) -> Self {
        let n = grid.n_cells();
        let r = spec.len();
        let mut counts = vec![0u32; n * r];
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                if let Some(i) = spec.ring_index(grid.great_circle_km(CellId(a as u32), CellId(b as u32))) {
                    counts[a * r + i] += 1;
                }
            }
        }
        Self { rings: r, key: table_key(grid.config(), spec), counts }
    }

    pub fn rings(&self) -> usize {
        self.rings
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn n_cells(&self) -> usize {
        self.counts.len() / self.rings
    }

    /// `T_1..T_R` for the given center.
    pub fn row(&self, center: CellId) -> &[u32] {
        let s = center.index() * self.rings;
        &self.counts[s..s + self.rings]
    }

    pub fn cache_path(dir: &Path, key: u64) -> PathBuf {
        dir.join(format!("ring_table_{key:016x}.bin"))
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.key.to_le_bytes())?;
        w.write_all(&(self.rings as u32).to_le_bytes())?;
        for c in &self.counts {
            w.write_all(&c.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path, expected_key: u64, expected_cells: usize) -> Result<Self> {
        let bad = |message: String| Error::Format { path: path.to_path_buf(), message };
        let mut buf = Vec::new();
        BufReader::new(fs::File::open(path)?).read_to_end(&mut buf)?;
        if buf.len() < 24 || &buf[..8] != MAGIC {
            return Err(bad("missing ring table header".into()));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        let key = u64::from_le_bytes(buf[12..20].try_into().unwrap());
        let rings = u32::from_le_bytes(buf[20..24].try_into().unwrap()) as usize;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        if key != expected_key {
            return Err(bad(format!("key {key:016x} does not match {expected_key:016x}")));
        }
        let body = &buf[24..];
        if rings == 0 || body.len() != expected_cells * rings * 4 {
            return Err(bad("unexpected table size".into()));
        }
        let counts = body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { rings, key, counts })
    }

    /// Loads the cached table for (grid, spec) from `dir`, building and
    /// persisting it on a miss or a stale file.
    pub fn load_or_build(grid: &Grid, spec: &RingSpec, dir: &Path, exec: Execution) -> Result<Self> {
        let key = table_key(grid.config(), spec);
        let path = Self::cache_path(dir, key);
        if path.exists() {
            match Self::read_from(&path, key, grid.n_cells()) {
                Ok(t) => return Ok(t),
                Err(e) => log::warn!("rebuilding ring table: {e}"),
            }
        }
        let table = Self::build(grid, spec, exec);
        fs::create_dir_all(dir)?;
        table.write_to(&path)?;
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Grid {
        Grid::new(GridConfig::new(1.0, 10.0, 20.0, 30.0, 40.0).unwrap())
    }

    #[test]
    fn fast_build_matches_double_loop() {
        let g = toy();
        let spec = RingSpec::new(vec![200.0, 600.0]).unwrap();
        let fast = RingCellTable::build(&g, &spec, Execution::Sequential);
        assert_eq!(fast, RingCellTable::build_brute_force(&g, &spec));
        assert_eq!(fast, RingCellTable::build(&g, &spec, Execution::Parallel));

        let global = Grid::new(GridConfig::global(15.0).unwrap());
        let spec = RingSpec::geometric(0.6, global.max_pairwise_km(), 500.0, 10).unwrap();
        assert_eq!(
            RingCellTable::build(&global, &spec, Execution::Parallel),
            RingCellTable::build_brute_force(&global, &spec)
        );
    }

    #[test]
    fn tiny_radius_counts_nothing() {
        let g = toy();
        let spec = RingSpec::new(vec![50.0]).unwrap();
        let t = RingCellTable::build(&g, &spec, Execution::Sequential);
        assert!(t.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn all_covering_ring() {
        let g = toy();
        let spec = RingSpec::new(vec![g.max_pairwise_km() + 1.0]).unwrap();
        let t = RingCellTable::build(&g, &spec, Execution::Sequential);
        for c in g.config().cells() {
            assert_eq!(t.row(c), &[99]);
        }
    }

    #[test]
    fn cells_partition_around_each_center() {
        let g = Grid::new(GridConfig::global(10.0).unwrap());
        let spec = RingSpec::new(vec![1500.0, 4000.0, 9000.0]).unwrap();
        let t = RingCellTable::build(&g, &spec, Execution::Parallel);
        for c in g.config().cells() {
            let beyond = g.config().cells().filter(|&o| g.great_circle_km(c, o) > 9000.0).count();
            let inside: u32 = t.row(c).iter().sum();
            assert_eq!(inside as usize + beyond + 1, g.n_cells());
        }
    }

    #[test]
    fn cache_round_trip_and_stale_key() {
        let dir = tempfile::tempdir().unwrap();
        let g = toy();
        let spec = RingSpec::new(vec![200.0, 600.0]).unwrap();
        let built = RingCellTable::load_or_build(&g, &spec, dir.path(), Execution::Sequential).unwrap();
        let path = RingCellTable::cache_path(dir.path(), built.key());
        assert!(path.exists());
        let loaded = RingCellTable::read_from(&path, built.key(), g.n_cells()).unwrap();
        assert_eq!(built, loaded);
        assert!(RingCellTable::read_from(&path, built.key() ^ 1, g.n_cells()).is_err());

        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len(), 24 + 4 * 2 * g.n_cells());
    }
}
