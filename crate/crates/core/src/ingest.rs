//! Event parsing, tokenization and the per-term summary registry.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{CellId, Grid, GridConfig};
use crate::rings::RingSpec;
use crate::ringsum::{Ringsum, Strategy};
use crate::tsum::{Counter, Tsum};

/// One geo-tagged record.
#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub terms: Vec<String>,
    pub lat: f64,
    pub lon: f64,
    pub ts: Option<i64>,
}

/// Lowercases, splits on anything that is not alphanumeric, drops tokens
/// shorter than two characters and keeps the first copy of each token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut seen = BTreeSet::new();
    lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .filter(|t| seen.insert(*t))
        .map(str::to_owned)
        .collect()
}

fn normalize_terms(terms: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    terms
        .into_iter()
        .map(|t| t.trim().to_lowercase())
        .filter(|t| !t.is_empty())
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

#[derive(Deserialize)]
struct RawEvent {
    text: Option<String>,
    terms: Option<Vec<String>>,
    lat: f64,
    lon: f64,
    ts: Option<i64>,
}

/// Parses one JSON-lines record carrying `text` or `terms` plus `lat`,
/// `lon` and an optional `ts`. `line_no` is used in error messages.
pub fn parse_event(line: &str, line_no: usize) -> Result<Event> {
    let raw: RawEvent =
        serde_json::from_str(line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
    let terms = match (raw.terms, raw.text) {
        (Some(terms), _) => normalize_terms(terms),
        (None, Some(text)) => tokenize(&text),
        (None, None) => {
            return Err(Error::Parse { line: line_no, message: "record has neither `text` nor `terms`".into() })
        }
    };
    if !raw.lat.is_finite() || !raw.lon.is_finite() {
        return Err(Error::Parse { line: line_no, message: "non-finite coordinate".into() });
    }
    Ok(Event { terms, lat: raw.lat, lon: raw.lon, ts: raw.ts })
}

/// Parses one `term,lat,lon` CSV row.
pub fn parse_csv_event(record: &csv::StringRecord, line_no: usize) -> Result<Event> {
    let bad = |message: String| Error::Parse { line: line_no, message };
    if record.len() != 3 {
        return Err(bad(format!("expected 3 fields, found {}", record.len())));
    }
    let num = |i: usize| record[i].trim().parse::<f64>().map_err(|_| bad(format!("bad number {:?}", &record[i])));
    let (lat, lon) = (num(1)?, num(2)?);
    if !lat.is_finite() || !lon.is_finite() {
        return Err(bad("non-finite coordinate".into()));
    }
    Ok(Event { terms: normalize_terms(vec![record[0].to_string()]), lat, lon, ts: None })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    JsonLines,
    Csv,
}

impl InputFormat {
    /// `.csv` files are CSV, everything else JSON lines.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => InputFormat::Csv,
            _ => InputFormat::JsonLines,
        }
    }
}

/// Calls `f` for every event of a stream. Blank lines are skipped; a CSV
/// header row `term,lat,lon` is recognised and skipped.
pub fn read_events(r: impl BufRead, format: InputFormat, mut f: impl FnMut(Event)) -> Result<usize> {
    let mut n = 0;
    match format {
        InputFormat::JsonLines => {
            for (i, line) in r.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                f(parse_event(&line, i + 1)?);
                n += 1;
            }
        }
        InputFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(r);
            for (i, rec) in rdr.records().enumerate() {
                let rec = rec?;
                if rec.iter().all(|s| s.trim().is_empty()) {
                    continue;
                }
                if i == 0 && rec.len() == 3 && rec[1].trim().eq_ignore_ascii_case("lat") {
                    continue;
                }
                f(parse_csv_event(&rec, i + 1)?);
                n += 1;
            }
        }
    }
    Ok(n)
}

/// Reads every event of a file.
pub fn read_events_file(path: &Path, f: impl FnMut(Event)) -> Result<usize> {
    let file = fs::File::open(path)?;
    read_events(BufReader::new(file), InputFormat::for_path(path), f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    TsumPlus,
    Ringsum,
}

impl Backend {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tsum_plus" | "tsum+" | "tsum" => Ok(Backend::TsumPlus),
            "ringsum" => Ok(Backend::Ringsum),
            other => Err(Error::InvalidConfig(format!("unknown backend {other:?}"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Backend::TsumPlus => "tsum_plus",
            Backend::Ringsum => "ringsum",
        }
    }

    /// Default counters per term.
    pub fn default_capacity(&self) -> usize {
        match self {
            Backend::TsumPlus => 216,
            Backend::Ringsum => 50,
        }
    }
}

/// Ring layout parameters: `max_rings` radii `D, rD, r^2 D, ...` down to
/// `min_radius_km`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingConfig {
    pub ratio: f64,
    pub max_radius_km: f64,
    pub min_radius_km: f64,
    pub max_rings: usize,
}

impl RingConfig {
    pub const DEFAULT_RATIO: f64 = 0.6;
    pub const DEFAULT_MAX_RINGS: usize = 10;

    /// Defaults for a grid: `D` is the grid diameter and the smallest ring
    /// must still reach half a cell diagonal.
    pub fn for_grid(grid: &Grid) -> Self {
        Self {
            ratio: Self::DEFAULT_RATIO,
            max_radius_km: grid.max_pairwise_km(),
            min_radius_km: grid.config().half_cell_diagonal_km(),
            max_rings: Self::DEFAULT_MAX_RINGS,
        }
    }

    pub fn spec(&self) -> Result<RingSpec> {
        RingSpec::geometric(self.ratio, self.max_radius_km, self.min_radius_km, self.max_rings)
    }
}

/// Everything that shapes the summaries of a registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryConfig {
    pub grid: GridConfig,
    pub backend: Backend,
    pub capacity: usize,
    pub rings: RingConfig,
    pub strategy: Strategy,
}

impl RegistryConfig {
    pub fn new(grid: &Grid, backend: Backend) -> Self {
        Self {
            grid: grid.config().clone(),
            backend,
            capacity: backend.default_capacity(),
            rings: RingConfig::for_grid(grid),
            strategy: Strategy::Standard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::InvalidConfig("capacity must be positive".into()));
        }
        self.rings.spec()?;
        Ok(())
    }
}

/// The summary kept for one term.
#[derive(Clone, Debug)]
pub enum Summary {
    Tsum(Tsum),
    Ringsum(Ringsum),
}

impl Summary {
    pub fn counters(&self) -> &Tsum {
        match self {
            Summary::Tsum(t) => t,
            Summary::Ringsum(r) => r.tsum(),
        }
    }

    /// Occurrences of the term seen so far.
    pub fn total_frequency(&self) -> u64 {
        match self {
            Summary::Tsum(t) => t.total_frequency(),
            Summary::Ringsum(r) => r.total_frequency(),
        }
    }

    pub fn top_k(&self, k: usize) -> Vec<Counter> {
        self.counters().top_k(k)
    }

    pub fn capacity(&self) -> usize {
        self.counters().capacity()
    }

    fn write_binary(&self, w: &mut impl Write) -> std::io::Result<()> {
        match self {
            Summary::Tsum(t) => t.write_binary(w),
            Summary::Ringsum(r) => r.write_binary(w),
        }
    }

    fn write_csv(&self, w: impl Write) -> Result<()> {
        match self {
            Summary::Tsum(t) => t.write_csv(w),
            Summary::Ringsum(r) => r.write_csv(w),
        }
    }

    /// Bytes of the binary snapshot; equal bytes mean equal state.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_binary(&mut out).expect("writing to memory");
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestCounts {
    /// Accepted events.
    pub events: u64,
    /// Events outside the grid extent.
    pub rejected: u64,
    /// Events with no terms left after tokenization.
    pub empty: u64,
    /// (term, event) pairs routed to summaries.
    pub occurrences: u64,
}

/// Term to summary map sharing one grid and ring layout.
#[derive(Clone, Debug)]
pub struct Registry {
    config: RegistryConfig,
    grid: Grid,
    spec: RingSpec,
    summaries: BTreeMap<String, Summary>,
    whitelist: Option<BTreeSet<String>>,
    counts: IngestCounts,
}

const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: RegistryConfig,
    counts: IngestCounts,
    whitelist: Option<Vec<String>>,
    terms: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    term: String,
    file: String,
    total: u64,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// File stem for a term: the term itself when it is plain ASCII
/// alphanumeric, otherwise its hex bytes.
fn term_file_stem(term: &str) -> String {
    if !term.is_empty() && term.len() <= 64 && term.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit()) {
        format!("t_{term}")
    } else {
        format!("x_{}", hex(&term.as_bytes()[..term.len().min(48)]))
    }
}

impl Registry {
    pub fn new(config: RegistryConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.rings.spec()?;
        let grid = Grid::new(config.grid.clone());
        Ok(Self { config, grid, spec, summaries: BTreeMap::new(), whitelist: None, counts: IngestCounts::default() })
    }

    pub fn with_whitelist(mut self, terms: impl IntoIterator<Item = String>) -> Self {
        self.whitelist = Some(terms.into_iter().map(|t| t.trim().to_lowercase()).collect());
        self
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.config
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn ring_spec(&self) -> &RingSpec {
        &self.spec
    }

    pub fn counts(&self) -> IngestCounts {
        self.counts
    }

    pub fn summary(&self, term: &str) -> Option<&Summary> {
        self.summaries.get(term)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.summaries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.summaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.summaries.is_empty()
    }

    fn new_summary(&self) -> Summary {
        match self.config.backend {
            Backend::TsumPlus => Summary::Tsum(Tsum::new(self.config.capacity)),
            Backend::Ringsum => {
                Summary::Ringsum(Ringsum::new(self.config.capacity, self.spec.clone(), self.config.strategy))
            }
        }
    }

    /// Routes an event to the summaries of its terms. Returns `false` when
    /// the event is rejected for lying outside the grid.
    pub fn observe(&mut self, ev: &Event) -> bool {
        let cell = match self.grid.cell_of(ev.lat, ev.lon) {
            Ok(c) => c,
            Err(_) => {
                self.counts.rejected += 1;
                return false;
            }
        };
        if ev.terms.is_empty() {
            self.counts.empty += 1;
            return true;
        }
        self.counts.events += 1;
        for term in &ev.terms {
            if let Some(w) = &self.whitelist {
                if !w.contains(term) {
                    continue;
                }
            }
            self.observe_term(term, cell);
        }
        true
    }

    /// Counts one occurrence of `term` at `cell`.
    pub fn observe_term(&mut self, term: &str, cell: CellId) {
        if !self.summaries.contains_key(term) {
            let s = self.new_summary();
            self.summaries.insert(term.to_owned(), s);
        }
        let grid = &self.grid;
        match self.summaries.get_mut(term).expect("just inserted") {
            Summary::Tsum(t) => {
                t.update(cell);
            }
            Summary::Ringsum(r) => r.update(grid, cell),
        }
        self.counts.occurrences += 1;
    }

    /// Ingests a stream file.
    pub fn ingest_file(&mut self, path: &Path) -> Result<usize> {
        read_events_file(path, |ev| {
            self.observe(&ev);
        })
    }

    /// Writes one binary file per term and `manifest.json` into `dir`; with
    /// `csv` a CSV copy of each summary is written next to it.
    pub fn save(&self, dir: &Path, csv: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.summaries.len());
        let mut used = BTreeSet::new();
        for (term, s) in &self.summaries {
            let mut stem = term_file_stem(term);
            let mut k = 1;
            while !used.insert(stem.clone()) {
                stem = format!("{}_{k}", term_file_stem(term));
                k += 1;
            }
            let bytes = s.snapshot_bytes();
            let file = format!("{stem}.bin");
            fs::write(dir.join(&file), &bytes)?;
            if csv {
                s.write_csv(BufWriter::new(fs::File::create(dir.join(format!("{stem}.csv")))?))?;
            }
            entries.push(ManifestEntry {
                term: term.clone(),
                file,
                total: s.total_frequency(),
                sha256: hex(&Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest {
            version: 1,
            config: self.config.clone(),
            counts: self.counts,
            whitelist: self.whitelist.as_ref().map(|w| w.iter().cloned().collect()),
            terms: entries,
        };
        let mut w = BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Loads a snapshot directory written by [`Registry::save`], checking
    /// every file against its recorded hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let bad = |path: PathBuf, message: String| Error::Format { path, message };
        let text = fs::read_to_string(&manifest_path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| bad(manifest_path.clone(), e.to_string()))?;
        if m.version != 1 {
            return Err(bad(manifest_path, format!("unsupported version {}", m.version)));
        }
        let g = &m.config.grid;
        let grid_cfg = GridConfig::new(g.cell_size_deg, g.lat_min, g.lat_max, g.lon_min, g.lon_max)?;
        let config = RegistryConfig { grid: grid_cfg, ..m.config };
        let mut reg = Self::new(config)?;
        reg.counts = m.counts;
        reg.whitelist = m.whitelist.map(|w| w.into_iter().collect());
        for e in m.terms {
            let path = dir.join(&e.file);
            let bytes = fs::read(&path)?;
            if hex(&Sha256::digest(&bytes)) != e.sha256 {
                return Err(bad(path, "content hash mismatch".into()));
            }
            let summary = match reg.config.backend {
                Backend::TsumPlus => Summary::Tsum(
                    Tsum::read_binary(&mut bytes.as_slice()).map_err(|x| bad(path.clone(), x.to_string()))?,
                ),
                Backend::Ringsum => Summary::Ringsum(
                    Ringsum::read_binary(&mut bytes.as_slice(), &reg.grid)
                        .map_err(|x| bad(path.clone(), x.to_string()))?,
                ),
            };
            if summary.capacity() != reg.config.capacity {
                return Err(bad(path, "summary capacity differs from the manifest".into()));
            }
            reg.summaries.insert(e.term, summary);
        }
        Ok(reg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("New York!"), vec!["new", "york"]);
        assert!(tokenize("a I x").is_empty());
        assert_eq!(tokenize("flu flu vaccine"), vec!["flu", "vaccine"]);
        assert_eq!(tokenize("Bitcoin rally"), vec!["bitcoin", "rally"]);
        assert_eq!(tokenize("Flu, FLU; flu-shot"), vec!["flu", "shot"]);
        assert_eq!(tokenize("Zürich café"), vec!["zürich", "café"]);
    }

    #[test]
    fn parse_records() {
        let grid = Grid::new(GridConfig::global(1.0).unwrap());
        let ev = parse_event(r#"{"text":"Bitcoin rally","lat":40.7,"lon":-74.0}"#, 1).unwrap();
        assert_eq!(ev.terms, vec!["bitcoin", "rally"]);
        assert_eq!(grid.cell_of(ev.lat, ev.lon).unwrap(), CellId(46906));
        let ev = parse_event(r#"{"terms":["flu"],"lat":0.5,"lon":0.5,"ts":17}"#, 2).unwrap();
        assert_eq!(ev.terms, vec!["flu"]);
        assert_eq!(ev.ts, Some(17));
        match parse_event(r#"{"lat":1.0"#, 9) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_event(r#"{"lat":1.0,"lon":2.0}"#, 3), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn out_of_extent_is_counted() {
        let grid = Grid::new(GridConfig::global(1.0).unwrap());
        let mut reg = Registry::new(RegistryConfig::new(&grid, Backend::TsumPlus)).unwrap();
        let ev = parse_event(r#"{"terms":["flu"],"lat":91.0,"lon":0.0}"#, 1).unwrap();
        assert!(!reg.observe(&ev));
        assert_eq!(reg.counts().rejected, 1);
        assert!(reg.is_empty());
    }

    #[test]
    fn csv_fallback() {
        let text = "term,lat,lon\nFlu,0.5,0.5\nflu,1.5,0.5\n\ncold,2,3\n";
        let mut got = Vec::new();
        let n = read_events(text.as_bytes(), InputFormat::Csv, |e| got.push(e)).unwrap();
        assert_eq!(n, 3);
        assert_eq!(got[0].terms, vec!["flu"]);
        assert_eq!(got[2].lat, 2.0);
        let err = read_events("flu,x,1\n".as_bytes(), InputFormat::Csv, |_| {});
        assert!(matches!(err, Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn observe_and_whitelist() {
        let grid = Grid::new(GridConfig::global(10.0).unwrap());
        let mut reg = Registry::new(RegistryConfig::new(&grid, Backend::Ringsum)).unwrap();
        let ev = Event { terms: vec!["flu".into(), "cold".into()], lat: 10.0, lon: 10.0, ts: None };
        reg.observe(&ev);
        assert_eq!(reg.summary("flu").unwrap().total_frequency(), 1);
        assert_eq!(reg.summary("cold").unwrap().total_frequency(), 1);

        let mut reg =
            Registry::new(RegistryConfig::new(&grid, Backend::TsumPlus)).unwrap().with_whitelist(["flu".to_string()]);
        reg.observe(&ev);
        assert!(reg.summary("cold").is_none());
        assert_eq!(reg.summary("flu").unwrap().total_frequency(), 1);
        assert_eq!(reg.counts().events, 1);
    }

    #[test]
    fn snapshot_dir_round_trip() {
        let grid = Grid::new(GridConfig::global(10.0).unwrap());
        for backend in [Backend::TsumPlus, Backend::Ringsum] {
            let mut cfg = RegistryConfig::new(&grid, backend);
            cfg.capacity = 5;
            let mut reg = Registry::new(cfg).unwrap();
            for i in 0..300 {
                let terms = vec![format!("t{}", i % 3), "Ünï code".to_string()];
                let lat = ((i * 37) % 170) as f64 - 85.0;
                let lon = ((i * 53) % 350) as f64 - 175.0;
                reg.observe(&Event { terms, lat, lon, ts: None });
            }
            let dir = tempfile::tempdir().unwrap();
            reg.save(dir.path(), true).unwrap();
            let back = Registry::load(dir.path()).unwrap();
            assert_eq!(back.config(), reg.config());
            assert_eq!(back.counts(), reg.counts());
            for t in reg.terms() {
                assert_eq!(back.summary(t).unwrap().snapshot_bytes(), reg.summary(t).unwrap().snapshot_bytes());
            }
            let dir2 = tempfile::tempdir().unwrap();
            back.save(dir2.path(), false).unwrap();
            assert_eq!(fs::read(dir.path().join(MANIFEST)).unwrap(), fs::read(dir2.path().join(MANIFEST)).unwrap());
            let victim = dir.path().join("t_t0.bin");
            let mut bytes = fs::read(&victim).unwrap();
            let last = bytes.len() - 1;
            bytes[last] ^= 1;
            fs::write(&victim, bytes).unwrap();
            assert!(matches!(Registry::load(dir.path()), Err(Error::Format { .. })));
        }
    }
}
