//! Single- and multi-term RFS/TFS queries over a registry.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{CellId, Grid};
use crate::ingest::{Backend, Registry, Summary};
use crate::model::{self, DistanceScale, FullLikelihood, ModelParams, RingLikelihood, Trials};
use crate::ring_table::RingCellTable;
use crate::tsum::Counter;

/// How per-term probabilities combine in multi-term queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Product of the per-term probabilities.
    Independent,
    /// Smallest per-term probability, an upper bound on the joint.
    MinBound,
}

impl CombineMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(CombineMode::Independent),
            "min_bound" | "min" => Ok(CombineMode::MinBound),
            other => Err(Error::InvalidConfig(format!("unknown combine mode {other:?}"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            CombineMode::Independent => "independent",
            CombineMode::MinBound => "min_bound",
        }
    }

    fn combine(&self, probs: impl Iterator<Item = f64>) -> f64 {
        match self {
            CombineMode::Independent => probs.product(),
            CombineMode::MinBound => probs.fold(f64::INFINITY, f64::min),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryEntry {
    pub rank: usize,
    pub cell: CellId,
    pub lat: f64,
    pub lon: f64,
    pub score: f64,
    pub delta: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryResult {
    pub backend: Backend,
    pub entries: Vec<QueryEntry>,
    /// Fewer entries than requested were available.
    pub truncated: bool,
    pub models: Vec<(String, ModelParams)>,
}

pub const QUERY_CSV_HEADER: [&str; 6] = ["rank", "cell_id", "lat", "lon", "score", "delta"];

impl QueryResult {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(QUERY_CSV_HEADER)?;
        for e in &self.entries {
            let delta = e.delta.map(|d| d.to_string()).unwrap_or_default();
            out.write_record([
                e.rank.to_string(),
                e.cell.0.to_string(),
                e.lat.to_string(),
                e.lon.to_string(),
                e.score.to_string(),
                delta,
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn cells(&self) -> Vec<CellId> {
        self.entries.iter().map(|e| e.cell).collect()
    }
}

/// Answer to a single-term frequency query.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TfsAnswer {
    pub cell: CellId,
    /// Stored `f` for a monitored cell, otherwise the model's expected count.
    pub estimate: f64,
    /// The counter when the cell is monitored.
    pub stored: Option<Counter>,
    /// Upper bound on the true count: stored `f`, or the smallest stored
    /// `f` when the summary is full (0 when it is not, since then every
    /// occurrence has a counter).
    pub upper_bound: u64,
    pub model: Option<ModelParams>,
}

/// Term, total frequency and fixed center of a memoized fit.
type FitKey = (String, u64, Option<CellId>);
type TermModels = Vec<(String, ModelParams)>;

/// Query processor over a registry. Fitted models are memoized per term,
/// summary length and center set, so repeated queries between updates
/// reuse them.
pub struct QueryEngine<'a> {
    registry: &'a Registry,
    table: Option<RingCellTable>,
    scale: DistanceScale,
    trials: Trials,
    exec: Execution,
    fits: Mutex<HashMap<FitKey, ModelParams>>,
}

impl<'a> QueryEngine<'a> {
    /// `table` is required for the Ringsum backend.
    pub fn new(registry: &'a Registry, table: Option<RingCellTable>) -> Result<Self> {
        if registry.config().backend == Backend::Ringsum {
            let t = table.as_ref().ok_or_else(|| Error::InvalidConfig("ring table required for ringsum".into()))?;
            let expected = crate::ring_table::table_key(registry.grid().config(), registry.ring_spec());
            if t.key() != expected {
                return Err(Error::InvalidConfig("ring table does not match the registry".into()));
            }
        }
        Ok(Self {
            registry,
            table,
            scale: DistanceScale::for_grid(registry.grid().config()),
            trials: Trials::TermTotal,
            exec: Execution::default(),
            fits: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn with_trials(mut self, trials: Trials) -> Self {
        self.trials = trials;
        self
    }

    pub fn registry(&self) -> &Registry {
        self.registry
    }

    pub fn scale(&self) -> DistanceScale {
        self.scale
    }

    fn grid(&self) -> &Grid {
        self.registry.grid()
    }

    fn summary(&self, term: &str) -> Result<&Summary> {
        self.registry.summary(term).ok_or_else(|| Error::NotMonitored(term.to_owned()))
    }

    fn entry(&self, rank: usize, cell: CellId, score: f64, delta: Option<u64>) -> QueryEntry {
        let (lat, lon) = self.grid().cell_center(cell);
        QueryEntry { rank, cell, lat, lon, score, delta }
    }

    /// The `k` most frequent stored cells of a term.
    pub fn rfs(&self, term: &str, k: usize) -> Result<QueryResult> {
        let s = self.summary(term)?;
        let top = s.top_k(k);
        let entries =
            top.iter().enumerate().map(|(i, c)| self.entry(i + 1, c.cell, c.f as f64, Some(c.delta))).collect();
        Ok(QueryResult { backend: self.registry.config().backend, entries, truncated: top.len() < k, models: vec![] })
    }

    /// Expected frequency of a term at a cell.
    pub fn tfs(&self, term: &str, cell: CellId) -> Result<TfsAnswer> {
        let s = self.summary(term)?;
        if !self.grid().config().is_valid(cell) {
            return Err(Error::InvalidConfig(format!("cell {cell} is outside the grid")));
        }
        let counters = s.counters();
        if let Some(c) = counters.get(cell) {
            return Ok(TfsAnswer { cell, estimate: c.f as f64, stored: Some(*c), upper_bound: c.f, model: None });
        }
        let upper_bound = if counters.is_full() { counters.min_frequency().unwrap_or(0) } else { 0 };
        let params = self.fit_term(term)?;
        let estimate = params.expected_frequency(self.grid(), &self.scale, s.total_frequency() as f64, cell);
        Ok(TfsAnswer { cell, estimate, stored: None, upper_bound, model: Some(params) })
    }

    fn memo_key(&self, term: &str, s: &Summary, center: Option<CellId>) -> FitKey {
        (term.to_owned(), s.total_frequency(), center)
    }

    /// Best model over all stored cells of a term.
    pub fn fit_term(&self, term: &str) -> Result<ModelParams> {
        let s = self.summary(term)?;
        let key = self.memo_key(term, s, None);
        if let Some(p) = self.fits.lock().expect("memo lock").get(&key) {
            return Ok(*p);
        }
        let candidates: Vec<CellId> = s.counters().slots().iter().map(|c| c.cell).collect();
        let p = self.fit_candidates(s, &candidates, self.exec)?;
        self.fits.lock().expect("memo lock").insert(key, p);
        Ok(p)
    }

    /// Model with its center fixed at a stored cell.
    pub fn fit_at(&self, term: &str, center: CellId) -> Result<ModelParams> {
        let s = self.summary(term)?;
        if !s.counters().contains(center) {
            return Err(Error::FitFailure(format!("cell {center} is not stored for `{term}`")));
        }
        let key = self.memo_key(term, s, Some(center));
        if let Some(p) = self.fits.lock().expect("memo lock").get(&key) {
            return Ok(*p);
        }
        let p = self.fit_candidates(s, &[center], Execution::Sequential)?;
        self.fits.lock().expect("memo lock").insert(key, p);
        Ok(p)
    }

    fn fit_candidates(&self, s: &Summary, candidates: &[CellId], exec: Execution) -> Result<ModelParams> {
        match s {
            Summary::Tsum(t) => {
                let counts: BTreeMap<CellId, u64> = t.slots().iter().map(|c| (c.cell, c.f)).collect();
                let total = t.total_frequency() as f64;
                model::fit(
                    candidates,
                    |c| FullLikelihood::new(self.grid(), &counts, c, &self.scale, self.trials, total),
                    exec,
                )
            }
            Summary::Ringsum(r) => {
                let table = self.table.as_ref().expect("checked in new");
                model::fit(
                    candidates,
                    |c| RingLikelihood {
                        input: r.ring_lik_input(c, table).expect("candidate is stored"),
                        scale: self.scale,
                        trials: self.trials,
                    },
                    exec,
                )
            }
        }
    }

    /// Per-cell probability of each term: the largest probability over the
    /// models fitted at the term's `k` most frequent centers.
    fn term_probabilities(&self, terms: &[&str], k: usize) -> Result<(Vec<Vec<f64>>, TermModels)> {
        if terms.len() < 2 {
            return Err(Error::InvalidConfig("multi-term queries need at least two terms".into()));
        }
        let mut per_term = Vec::with_capacity(terms.len());
        let mut models = Vec::new();
        for term in terms {
            let s = self.summary(term)?;
            let centers: Vec<CellId> = s.top_k(k.max(1)).iter().map(|c| c.cell).collect();
            let fitted = self.exec.map(&centers, |c| self.fit_at(term, *c));
            let fitted = fitted.into_iter().collect::<Result<Vec<_>>>()?;
            let n = self.grid().n_cells();
            let probs = self.exec.map_range(n, |j| {
                let cell = CellId(j as u32);
                fitted.iter().map(|p| p.probability_at(self.grid(), &self.scale, cell)).fold(0.0, f64::max)
            });
            models.extend(fitted.into_iter().map(|p| (term.to_string(), p)));
            per_term.push(probs);
        }
        Ok((per_term, models))
    }

    /// Top `k` cells by combined probability of all terms.
    pub fn multi_rfs(&self, terms: &[&str], k: usize, mode: CombineMode) -> Result<QueryResult> {
        let (probs, models) = self.term_probabilities(terms, k)?;
        let n = self.grid().n_cells();
        let mut scored: Vec<(CellId, f64)> =
            (0..n).map(|j| (CellId(j as u32), mode.combine(probs.iter().map(|p| p[j])))).collect();
        sort_scores(&mut scored);
        scored.truncate(k);
        let entries = scored.iter().enumerate().map(|(i, (c, s))| self.entry(i + 1, *c, *s, None)).collect();
        Ok(QueryResult { backend: self.registry.config().backend, entries, truncated: scored.len() < k, models })
    }

    /// Combined probability at every cell, indexed by cell.
    pub fn multi_scores(&self, terms: &[&str], k: usize, mode: CombineMode) -> Result<Vec<f64>> {
        let (probs, _) = self.term_probabilities(terms, k)?;
        Ok((0..self.grid().n_cells()).map(|j| mode.combine(probs.iter().map(|p| p[j]))).collect())
    }

    /// Expected count of events containing all terms at `cell`: the combined
    /// probability times the smallest term total.
    pub fn multi_tfs(&self, terms: &[&str], cell: CellId, k: usize, mode: CombineMode) -> Result<f64> {
        if !self.grid().config().is_valid(cell) {
            return Err(Error::InvalidConfig(format!("cell {cell} is outside the grid")));
        }
        let mut min_total = u64::MAX;
        for t in terms {
            min_total = min_total.min(self.summary(t)?.total_frequency());
        }
        if min_total == 0 {
            return Ok(0.0);
        }
        let (probs, _) = self.term_probabilities(terms, k)?;
        Ok(mode.combine(probs.iter().map(|p| p[cell.index()])) * min_total as f64)
    }

    /// Cells stored in every term's summary, scored by their smallest
    /// stored frequency.
    pub fn intersection_rfs(&self, terms: &[&str], k: usize) -> Result<QueryResult> {
        let mut common: Option<BTreeMap<CellId, u64>> = None;
        for t in terms {
            let s = self.summary(t)?;
            let here: BTreeMap<CellId, u64> = s.counters().slots().iter().map(|c| (c.cell, c.f)).collect();
            common = Some(match common {
                None => here,
                Some(prev) => prev.into_iter().filter_map(|(c, f)| here.get(&c).map(|g| (c, f.min(*g)))).collect(),
            });
        }
        let mut scored: Vec<(CellId, f64)> =
            common.unwrap_or_default().into_iter().map(|(c, f)| (c, f as f64)).collect();
        sort_scores(&mut scored);
        scored.truncate(k);
        let entries = scored.iter().enumerate().map(|(i, (c, s))| self.entry(i + 1, *c, *s, None)).collect();
        Ok(QueryResult {
            backend: self.registry.config().backend,
            entries,
            truncated: scored.len() < k,
            models: vec![],
        })
    }
}

/// Score descending, then cell ascending.
fn sort_scores(v: &mut [(CellId, f64)]) {
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}
