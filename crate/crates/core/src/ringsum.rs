//! Ringsum: a Tsum whose centers carry one occurrence counter per distance
//! ring, with ring transfer on eviction and the alternative update
//! strategies.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{self, invalid};
use crate::error::{Error, Result};
use crate::grid::{CellId, Grid};
use crate::model::RingLikInput;
use crate::ring_table::RingCellTable;
use crate::rings::{transfer_rings, RingSpec};
use crate::tsum::{Counter, Tsum, UpdateOutcome};

/// Largest precomputed ring-index table kept by a frozen summary, in bytes.
pub const FROZEN_TABLE_LIMIT: usize = 1 << 26;

pub const DEFAULT_FREEZE_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Standard,
    /// Stop replacing centers once `theta * expected_len` occurrences have
    /// been seen.
    FixedCenter {
        theta: f64,
        expected_len: u64,
    },
    /// New centers start with empty rings instead of a transfer.
    LightUpdate,
    /// An unmonitored cell within the first ring of a center does not
    /// replace anything.
    ProximityAware,
}

impl Strategy {
    pub fn tag(&self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::FixedCenter { .. } => "fixed_center",
            Strategy::LightUpdate => "light_update",
            Strategy::ProximityAware => "proximity_aware",
        }
    }

    fn code(&self) -> u8 {
        match self {
            Strategy::Standard => 0,
            Strategy::FixedCenter { .. } => 1,
            Strategy::LightUpdate => 2,
            Strategy::ProximityAware => 3,
        }
    }

    /// Parses a strategy tag; `fixed_center` takes the freeze parameters.
    pub fn parse(tag: &str, theta: f64, expected_len: u64) -> Result<Self> {
        Ok(match tag {
            "standard" => Strategy::Standard,
            "fixed_center" => {
                if !(theta > 0.0 && theta <= 1.0) {
                    return Err(Error::InvalidConfig(format!("theta {theta} must lie in (0, 1]")));
                }
                if expected_len == 0 {
                    return Err(Error::InvalidConfig("fixed_center needs a positive expected stream length".into()));
                }
                Strategy::FixedCenter { theta, expected_len }
            }
            "light_update" => Strategy::LightUpdate,
            "proximity_aware" => Strategy::ProximityAware,
            other => return Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A center with its ring counters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingCenter {
    pub cell: CellId,
    pub f: u64,
    pub delta: u64,
    pub phi: Vec<f64>,
}

/// Work counters used to check the per-update cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct UpdateStats {
    /// Distances from a stream cell to stored centers.
    pub distance_evals: u64,
    /// Ring transfers on eviction.
    pub transfers: u64,
    /// Occurrences that did not become centers under proximity_aware.
    pub rejected: u64,
    /// Occurrences not counted by any center after a freeze.
    pub dropped: u64,
}

#[derive(Clone, Debug)]
pub struct Ringsum {
    spec: RingSpec,
    strategy: Strategy,
    tsum: Tsum,
    /// Ring counters by Tsum slot, `R` per slot.
    phi: Vec<f64>,
    stream_len: u64,
    frozen: bool,
    /// After a freeze: `ring index + 1` (0 for none) per (slot, cell).
    frozen_rows: Option<Vec<u8>>,
    stats: UpdateStats,
    scratch: Vec<f64>,
}

impl Ringsum {
    pub fn new(capacity: usize, spec: RingSpec, strategy: Strategy) -> Self {
        let r = spec.len();
        Self {
            spec,
            strategy,
            tsum: Tsum::new(capacity),
            phi: Vec::with_capacity(capacity * r),
            stream_len: 0,
            frozen: false,
            frozen_rows: None,
            stats: UpdateStats::default(),
            scratch: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.tsum.capacity()
    }

    pub fn spec(&self) -> &RingSpec {
        &self.spec
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// The center counters as a plain Tsum.
    pub fn tsum(&self) -> &Tsum {
        &self.tsum
    }

    /// Exact number of occurrences seen, including any the centers did not
    /// count.
    pub fn stream_len(&self) -> u64 {
        self.stream_len
    }

    pub fn total_frequency(&self) -> u64 {
        self.stream_len
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn stats(&self) -> UpdateStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.tsum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tsum.is_empty()
    }

    pub fn phi_of_slot(&self, slot: usize) -> &[f64] {
        let r = self.spec.len();
        &self.phi[slot * r..(slot + 1) * r]
    }

    pub fn phi(&self, cell: CellId) -> Option<&[f64]> {
        self.tsum.slot_of(cell).map(|s| self.phi_of_slot(s))
    }

    pub fn center(&self, cell: CellId) -> Option<RingCenter> {
        let slot = self.tsum.slot_of(cell)?;
        Some(self.center_at(slot))
    }

    fn center_at(&self, slot: usize) -> RingCenter {
        let c = self.tsum.slots()[slot];
        RingCenter { cell: c.cell, f: c.f, delta: c.delta, phi: self.phi_of_slot(slot).to_vec() }
    }

    /// Centers by `f` descending, ties by lower cell.
    pub fn centers(&self) -> Vec<RingCenter> {
        self.tsum.top_k(self.capacity()).iter().map(|c| self.center(c.cell).expect("stored")).collect()
    }

    pub fn update(&mut self, grid: &Grid, cell: CellId) {
        self.stream_len += 1;
        if self.frozen {
            self.update_frozen(grid, cell);
            return;
        }
        let known = self.tsum.contains(cell);
        if !known && self.tsum.is_full() && self.strategy == Strategy::ProximityAware {
            self.fill_distances(grid, cell, None);
            let d1 = self.spec.first_radius_km();
            if self.scratch.iter().any(|d| *d <= d1) {
                self.stats.rejected += 1;
                self.add_from_scratch(None);
                return;
            }
            let outcome = self.tsum.update(cell);
            self.after_center_update(grid, cell, outcome, true);
        } else {
            let outcome = self.tsum.update(cell);
            self.after_center_update(grid, cell, outcome, false);
        }
        if let Strategy::FixedCenter { theta, expected_len } = self.strategy {
            if self.stream_len as f64 >= theta * expected_len as f64 {
                self.freeze(grid);
            }
        }
    }

    /// Ring and transfer bookkeeping after the center counters took `cell`.
    /// With `have_distances` the scratch buffer already holds the distance
    /// from `cell` to every slot, measured before the update.
    fn after_center_update(&mut self, grid: &Grid, cell: CellId, outcome: UpdateOutcome, have_distances: bool) {
        let r = self.spec.len();
        let slot = outcome.slot();
        match outcome {
            UpdateOutcome::Incremented { .. } => {}
            UpdateOutcome::Inserted { .. } => {
                self.phi.resize((slot + 1) * r, 0.0);
            }
            UpdateOutcome::Replaced { evicted, .. } => {
                let fresh = match self.strategy {
                    Strategy::LightUpdate => vec![0.0; r],
                    _ => {
                        let sep =
                            if have_distances { self.scratch[slot] } else { grid.great_circle_km(evicted.cell, cell) };
                        self.stats.transfers += 1;
                        transfer_rings(&self.spec, sep, self.phi_of_slot(slot))
                    }
                };
                self.phi[slot * r..(slot + 1) * r].copy_from_slice(&fresh);
            }
        }
        if have_distances {
            self.add_from_scratch(Some(slot));
        } else {
            self.add_to_rings(grid, cell, slot);
        }
    }

    /// Counts `cell` in the rings of every center except `skip`.
    fn add_to_rings(&mut self, grid: &Grid, cell: CellId, skip: usize) {
        let r = self.spec.len();
        for (s, c) in self.tsum.slots().iter().enumerate() {
            if s == skip {
                continue;
            }
            self.stats.distance_evals += 1;
            if let Some(i) = self.spec.ring_index(grid.great_circle_km(c.cell, cell)) {
                self.phi[s * r + i] += 1.0;
            }
        }
    }

    fn fill_distances(&mut self, grid: &Grid, cell: CellId, skip: Option<usize>) {
        self.scratch.clear();
        for (s, c) in self.tsum.slots().iter().enumerate() {
            if Some(s) == skip {
                self.scratch.push(0.0);
                continue;
            }
            self.stats.distance_evals += 1;
            self.scratch.push(grid.great_circle_km(c.cell, cell));
        }
    }

    fn add_from_scratch(&mut self, skip: Option<usize>) {
        let r = self.spec.len();
        for (s, d) in self.scratch.iter().enumerate() {
            if Some(s) == skip {
                continue;
            }
            if let Some(i) = self.spec.ring_index(*d) {
                self.phi[s * r + i] += 1.0;
            }
        }
    }

    /// Stops center replacement. The ring index of every cell around every
    /// center is tabulated when it fits in [`FROZEN_TABLE_LIMIT`].
    pub fn freeze(&mut self, grid: &Grid) {
        if self.frozen {
            return;
        }
        self.frozen = true;
        let n = grid.n_cells();
        let m = self.tsum.len();
        if m * n > FROZEN_TABLE_LIMIT || self.spec.len() >= u8::MAX as usize {
            return;
        }
        let mut rows = vec![0u8; m * n];
        for (s, c) in self.tsum.slots().iter().enumerate() {
            for (j, v) in rows[s * n..(s + 1) * n].iter_mut().enumerate() {
                if let Some(i) = self.spec.ring_index(grid.great_circle_km(c.cell, CellId(j as u32))) {
                    *v = i as u8 + 1;
                }
            }
        }
        self.frozen_rows = Some(rows);
    }

    fn update_frozen(&mut self, grid: &Grid, cell: CellId) {
        let skip = self.tsum.increment_existing(cell);
        if skip.is_none() {
            self.stats.dropped += 1;
        }
        let r = self.spec.len();
        match &self.frozen_rows {
            Some(rows) => {
                let n = grid.n_cells();
                let j = cell.index();
                for s in 0..self.tsum.len() {
                    if Some(s) == skip {
                        continue;
                    }
                    let v = rows[s * n + j];
                    if v > 0 {
                        self.phi[s * r + v as usize - 1] += 1.0;
                    }
                }
            }
            None => {
                self.fill_distances(grid, cell, skip);
                self.add_from_scratch(skip);
            }
        }
    }

    /// Ring-likelihood inputs for a stored center, or `None` if `cell` is
    /// not a center. The center count is the guaranteed part `f - delta`:
    /// the inherited `delta` belongs to other cells, and counting it at the
    /// center would make every recent replacement look concentrated.
    pub fn ring_lik_input(&self, cell: CellId, table: &RingCellTable) -> Option<RingLikInput> {
        let slot = self.tsum.slot_of(cell)?;
        let r = self.spec.len();
        let c = self.tsum.slots()[slot];
        let phi = self.phi_of_slot(slot).to_vec();
        let f_center = (c.f - c.delta) as f64;
        let total = f_center + phi.iter().sum::<f64>();
        Some(RingLikInput {
            phi,
            cells: table.row(cell).iter().map(|&t| t as f64).collect(),
            d_exp_km: (0..r).map(|i| self.spec.midpoint_km(i)).collect(),
            f_center,
            total,
            stream_total: self.stream_len as f64,
        })
    }

    const MAGIC: &'static [u8; 4] = b"RSUM";

    /// Binary record: magic, version, capacity, radii, strategy, counters
    /// and the `R` ring values of each center in `top_k` order.
    pub fn write_binary(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        codec::put_u32(w, 1)?;
        codec::put_u32(w, self.capacity() as u32)?;
        codec::put_u32(w, self.spec.len() as u32)?;
        for r in self.spec.radii_km() {
            codec::put_f64(w, *r)?;
        }
        codec::put_u8(w, self.strategy.code())?;
        let (theta, expected) = match self.strategy {
            Strategy::FixedCenter { theta, expected_len } => (theta, expected_len),
            _ => (0.0, 0),
        };
        codec::put_f64(w, theta)?;
        codec::put_u64(w, expected)?;
        codec::put_u64(w, self.stream_len)?;
        codec::put_u64(w, self.tsum.stream_len())?;
        codec::put_u8(w, self.frozen as u8)?;
        let centers = self.centers();
        codec::put_u32(w, centers.len() as u32)?;
        for c in &centers {
            codec::put_u32(w, c.cell.0)?;
            codec::put_u64(w, c.f)?;
            codec::put_u64(w, c.delta)?;
            for p in &c.phi {
                codec::put_f64(w, *p)?;
            }
        }
        Ok(())
    }

    /// Restores a binary snapshot; `grid` rebuilds the frozen lookup table.
    pub fn read_binary(r: &mut impl Read, grid: &Grid) -> std::io::Result<Self> {
        codec::expect_magic(r, Self::MAGIC)?;
        if codec::get_u32(r)? != 1 {
            return Err(invalid("unsupported Ringsum version"));
        }
        let capacity = codec::get_u32(r)? as usize;
        let rings = codec::get_u32(r)? as usize;
        if capacity == 0 || rings == 0 || rings > 254 {
            return Err(invalid("bad Ringsum header"));
        }
        let radii = (0..rings).map(|_| codec::get_f64(r)).collect::<std::io::Result<Vec<_>>>()?;
        let spec = RingSpec::new(radii).map_err(|e| invalid(e.to_string()))?;
        let code = codec::get_u8(r)?;
        let theta = codec::get_f64(r)?;
        let expected_len = codec::get_u64(r)?;
        let strategy = match code {
            0 => Strategy::Standard,
            1 => Strategy::FixedCenter { theta, expected_len },
            2 => Strategy::LightUpdate,
            3 => Strategy::ProximityAware,
            _ => return Err(invalid("unknown strategy code")),
        };
        let stream_len = codec::get_u64(r)?;
        let tsum_len = codec::get_u64(r)?;
        let frozen = codec::get_u8(r)? != 0;
        let n = codec::get_u32(r)? as usize;
        if n > capacity {
            return Err(invalid("more centers than capacity"));
        }
        let mut centers = Vec::with_capacity(n);
        for _ in 0..n {
            let cell = CellId(codec::get_u32(r)?);
            if !grid.config().is_valid(cell) {
                return Err(invalid(format!("cell {cell} outside the grid")));
            }
            let f = codec::get_u64(r)?;
            let delta = codec::get_u64(r)?;
            let phi = (0..rings).map(|_| codec::get_f64(r)).collect::<std::io::Result<Vec<_>>>()?;
            centers.push(RingCenter { cell, f, delta, phi });
        }
        Self::from_centers(capacity, spec, strategy, stream_len, tsum_len, frozen, &centers, grid)
    }

    /// Rebuilds a summary from its centers.
    #[allow(clippy::too_many_arguments)]
    pub fn from_centers(
        capacity: usize,
        spec: RingSpec,
        strategy: Strategy,
        stream_len: u64,
        center_stream_len: u64,
        frozen: bool,
        centers: &[RingCenter],
        grid: &Grid,
    ) -> std::io::Result<Self> {
        let r = spec.len();
        if centers.iter().any(|c| c.phi.len() != r || c.phi.iter().any(|p| p.is_nan() || *p < 0.0)) {
            return Err(invalid("ring values must be non-negative and match the ring count"));
        }
        let counters: Vec<Counter> = centers.iter().map(|c| Counter { cell: c.cell, f: c.f, delta: c.delta }).collect();
        let tsum = Tsum::from_counters(capacity, center_stream_len, &counters)?;
        let mut phi = vec![0.0; tsum.len() * r];
        for c in centers {
            let s = tsum.slot_of(c.cell).expect("inserted");
            phi[s * r..(s + 1) * r].copy_from_slice(&c.phi);
        }
        let mut out = Self::new(capacity, spec, strategy);
        out.tsum = tsum;
        out.phi = phi;
        out.stream_len = stream_len;
        if frozen {
            out.freeze(grid);
        }
        Ok(out)
    }

    /// CSV with `#` header lines (capacity, rings, radii, strategy, stream
    /// length) and one row `cell_id,f,delta,phi_1..phi_R` per center.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# m={}", self.capacity())?;
        writeln!(w, "# R={}", self.spec.len())?;
        let radii: Vec<String> = self.spec.radii_km().iter().map(|r| format!("{r}")).collect();
        writeln!(w, "# radii_km={}", radii.join(";"))?;
        writeln!(w, "# strategy={}", self.strategy.tag())?;
        writeln!(w, "# N={}", self.stream_len)?;
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["cell_id".to_string(), "f".into(), "delta".into()];
        header.extend((1..=self.spec.len()).map(|i| format!("phi_{i}")));
        out.write_record(&header)?;
        for c in self.centers() {
            let mut rec = vec![c.cell.0.to_string(), c.f.to_string(), c.delta.to_string()];
            rec.extend(c.phi.iter().map(|p| format!("{p}")));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the centers and header fields of a CSV snapshot.
    pub fn read_csv(r: impl BufRead) -> Result<(CsvHeader, Vec<RingCenter>)> {
        let mut header = CsvHeader::default();
        let mut body = String::new();
        for line in r.lines() {
            let line = line?;
            if let Some(kv) = line.strip_prefix("# ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad_csv(format!("bad header line {line:?}")))?;
                match k {
                    "m" => header.capacity = parse_field(v)?,
                    "R" => header.rings = parse_field(v)?,
                    "radii_km" => {
                        header.radii_km = v.split(';').map(parse_field).collect::<Result<_>>()?;
                    }
                    "strategy" => header.strategy = v.to_string(),
                    "N" => header.stream_len = parse_field(v)?,
                    _ => {}
                }
            } else {
                body.push_str(&line);
                body.push('\n');
            }
        }
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let mut centers = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 + header.rings {
                return Err(bad_csv(format!("expected {} columns, found {}", 3 + header.rings, rec.len())));
            }
            centers.push(RingCenter {
                cell: CellId(parse_field(&rec[0])?),
                f: parse_field(&rec[1])?,
                delta: parse_field(&rec[2])?,
                phi: (3..rec.len()).map(|i| parse_field(&rec[i])).collect::<Result<_>>()?,
            });
        }
        Ok((header, centers))
    }
}

/// Header fields of a CSV snapshot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvHeader {
    pub capacity: usize,
    pub rings: usize,
    pub radii_km: Vec<f64>,
    pub strategy: String,
    pub stream_len: u64,
}

fn bad_csv(message: String) -> Error {
    Error::Parse { line: 0, message }
}

fn parse_field<T: FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| bad_csv(format!("cannot parse {s:?}")))
}
