//! Exact reference counts and fits, and a seeded stream generator that
//! samples cells from the power-law model.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{CellId, Grid};
use crate::ingest::read_events_file;
use crate::model::{self, power_law, DistanceScale, FullLikelihood, ModelParams, Trials};

/// Exact per-term, per-cell occurrence counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExactCounts {
    pub cells: BTreeMap<String, BTreeMap<CellId, u64>>,
    pub totals: BTreeMap<String, u64>,
}

impl ExactCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, term: &str, cell: CellId) {
        *self.cells.entry(term.to_owned()).or_default().entry(cell).or_insert(0) += 1;
        *self.totals.entry(term.to_owned()).or_insert(0) += 1;
    }

    pub fn term(&self, term: &str) -> Option<&BTreeMap<CellId, u64>> {
        self.cells.get(term)
    }

    pub fn count(&self, term: &str, cell: CellId) -> u64 {
        self.cells.get(term).and_then(|m| m.get(&cell)).copied().unwrap_or(0)
    }

    pub fn total(&self, term: &str) -> u64 {
        self.totals.get(term).copied().unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.cells.keys().map(String::as_str)
    }
}

/// Per-term cell sequences of a stream, in arrival order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TermStreams {
    pub terms: BTreeMap<String, Vec<CellId>>,
    pub events: u64,
    pub rejected: u64,
}

impl TermStreams {
    pub fn push(&mut self, term: &str, cell: CellId) {
        self.terms.entry(term.to_owned()).or_default().push(cell);
    }

    /// Reads a JSON-lines or CSV event file, applying the ingest tokenizer
    /// and extent rules.
    pub fn from_file(path: &Path, grid: &Grid) -> Result<Self> {
        let mut out = Self::default();
        read_events_file(path, |ev| match grid.cell_of(ev.lat, ev.lon) {
            Ok(cell) => {
                out.events += 1;
                for t in &ev.terms {
                    out.push(t, cell);
                }
            }
            Err(_) => out.rejected += 1,
        })?;
        Ok(out)
    }

    pub fn exact_counts(&self) -> ExactCounts {
        let mut ex = ExactCounts::new();
        for (term, cells) in &self.terms {
            for &c in cells {
                ex.add(term, c);
            }
        }
        ex
    }

    pub fn get(&self, term: &str) -> &[CellId] {
        self.terms.get(term).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Exact counts of an event file.
pub fn exact_counts(path: &Path, grid: &Grid) -> Result<ExactCounts> {
    Ok(TermStreams::from_file(path, grid)?.exact_counts())
}

/// Counts of a single cell sequence.
pub fn cell_counts(cells: &[CellId]) -> BTreeMap<CellId, u64> {
    let mut m = BTreeMap::new();
    for &c in cells {
        *m.entry(c).or_insert(0) += 1;
    }
    m
}

/// Full-likelihood fit over every nonzero cell of `counts`.
pub fn exact_fit(
    grid: &Grid,
    scale: &DistanceScale,
    counts: &BTreeMap<CellId, u64>,
    trials: Trials,
    exec: Execution,
) -> Result<ModelParams> {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(Error::FitFailure("term has no occurrences".into()));
    }
    let candidates: Vec<CellId> = counts.iter().filter(|(_, n)| **n > 0).map(|(c, _)| *c).collect();
    model::fit(&candidates, |c| FullLikelihood::new(grid, counts, c, scale, trials, total as f64), exec)
}

/// Model parameters driving the generator for one term.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SourceSpec {
    pub term: String,
    pub center: CellId,
    pub focus: f64,
    pub spread: f64,
}

/// Sampling weight of every cell: `clamp(C * d^-alpha, 0, 1)`.
pub fn model_weights(grid: &Grid, scale: &DistanceScale, center: CellId, focus: f64, spread: f64) -> Vec<f64> {
    grid.config().cells().map(|c| power_law(focus, spread, scale.units(grid.great_circle_km(center, c)))).collect()
}

/// `n` cells drawn independently with probability proportional to the model
/// weights.
pub fn sample_cells(grid: &Grid, scale: &DistanceScale, src: &SourceSpec, n: usize, seed: u64) -> Result<Vec<CellId>> {
    sample_weighted(&model_weights(grid, scale, src.center, src.focus, src.spread), n, seed)
}

/// `n` cells drawn with probability proportional to `weights`.
pub fn sample_weighted(weights: &[f64], n: usize, seed: u64) -> Result<Vec<CellId>> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::InvalidConfig(format!("generator weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| CellId(dist.sample(&mut rng) as u32)).collect())
}

/// Cellwise product of two sources' weights: where two independently
/// placed terms meet.
pub fn product_weights(grid: &Grid, scale: &DistanceScale, a: &SourceSpec, b: &SourceSpec) -> Vec<f64> {
    let wa = model_weights(grid, scale, a.center, a.focus, a.spread);
    let wb = model_weights(grid, scale, b.center, b.focus, b.spread);
    wa.iter().zip(&wb).map(|(x, y)| x * y).collect()
}

#[derive(Serialize)]
struct GenRecord<'a> {
    terms: &'a [&'a str],
    lat: f64,
    lon: f64,
}

/// Writes one JSON-lines event per cell, each carrying all `terms` and
/// placed at its cell center.
pub fn write_events(grid: &Grid, terms: &[&str], cells: &[CellId], out: &mut impl Write) -> Result<()> {
    for &c in cells {
        let (lat, lon) = grid.cell_center(c);
        serde_json::to_writer(&mut *out, &GenRecord { terms, lat, lon })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Per-cell counts of events containing both terms of each pair.
pub fn joint_counts(
    path: &Path,
    grid: &Grid,
    pairs: &[(String, String)],
) -> Result<BTreeMap<(String, String), BTreeMap<CellId, u64>>> {
    let mut out: BTreeMap<(String, String), BTreeMap<CellId, u64>> =
        pairs.iter().map(|p| (p.clone(), BTreeMap::new())).collect();
    read_events_file(path, |ev| {
        let Ok(cell) = grid.cell_of(ev.lat, ev.lon) else { return };
        for (a, b) in pairs {
            if ev.terms.contains(a) && ev.terms.contains(b) {
                *out.get_mut(&(a.clone(), b.clone())).expect("pair key").entry(cell).or_insert(0) += 1;
            }
        }
    })?;
    Ok(out)
}

/// Writes a sampled stream as JSON lines, one event per occurrence, each
/// placed at its cell center.
pub fn gen_stream(
    grid: &Grid,
    scale: &DistanceScale,
    src: &SourceSpec,
    n: usize,
    seed: u64,
    out: &mut impl Write,
) -> Result<Vec<CellId>> {
    let cells = sample_cells(grid, scale, src, n, seed)?;
    write_events(grid, &[&src.term], &cells, out)?;
    Ok(cells)
}

/// Samples every source (source `i` with seed `seed + i`) and writes the
/// streams one after another.
pub fn gen_sources(
    grid: &Grid,
    scale: &DistanceScale,
    sources: &[(SourceSpec, usize)],
    seed: u64,
    out: &mut impl Write,
) -> Result<TermStreams> {
    let mut streams = TermStreams::default();
    for (i, (src, n)) in sources.iter().enumerate() {
        let cells = gen_stream(grid, scale, src, *n, seed.wrapping_add(i as u64), out)?;
        streams.events += cells.len() as u64;
        streams.terms.entry(src.term.clone()).or_default().extend(cells);
    }
    Ok(streams)
}
