//! Evaluation harness: model accuracy against exact fits, TFS error with
//! baselines, multi-term top-1 accuracy and timing benches. Accuracy
//! reports are deterministic under fixed seeds; timings go to separate files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{CellId, Grid};
use crate::ingest::{Backend, Registry, RegistryConfig, RingConfig};
use crate::model::{DistanceScale, ModelParams, Trials};
use crate::oracle::{
    exact_fit, joint_counts, model_weights, product_weights, sample_cells, sample_weighted, write_events, ExactCounts,
    SourceSpec, TermStreams,
};
use crate::query::{CombineMode, QueryEngine};
use crate::ring_table::RingCellTable;
use crate::ringsum::{Ringsum, Strategy};
use crate::tsum::Tsum;

/// One summary configuration under evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub label: String,
    pub backend: Backend,
    pub capacity: usize,
    pub ratio: f64,
    pub rings: usize,
    /// Smallest ring radius; 0 selects the grid default.
    pub min_radius_km: f64,
    pub strategy: Strategy,
}

impl MethodConfig {
    pub fn tsum_plus(capacity: usize) -> Self {
        Self {
            label: format!("tsum_plus_m{capacity}"),
            backend: Backend::TsumPlus,
            capacity,
            ratio: RingConfig::DEFAULT_RATIO,
            rings: 0,
            min_radius_km: 0.0,
            strategy: Strategy::Standard,
        }
    }

    pub fn ringsum(capacity: usize, ratio: f64, rings: usize, min_radius_km: f64) -> Self {
        Self {
            label: format!("ringsum_m{capacity}_r{ratio}_R{rings}"),
            backend: Backend::Ringsum,
            capacity,
            ratio,
            rings,
            min_radius_km,
            strategy: Strategy::Standard,
        }
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.label = format!("{}_{}", self.label, strategy.tag());
        self.strategy = strategy;
        self
    }

    pub fn registry_config(&self, grid: &Grid) -> RegistryConfig {
        let mut cfg = RegistryConfig::new(grid, self.backend);
        cfg.capacity = self.capacity;
        cfg.strategy = self.strategy;
        cfg.rings.ratio = self.ratio;
        if self.rings > 0 {
            cfg.rings.max_rings = self.rings;
        }
        if self.min_radius_km > 0.0 {
            cfg.rings.min_radius_km = self.min_radius_km;
        }
        cfg
    }
}

/// Ringsum configurations for the ring-ratio sweep.
pub fn r_sweep_methods(capacity: usize, rings: usize, min_radius_km: f64, ratios: &[f64]) -> Vec<MethodConfig> {
    ratios.iter().map(|r| MethodConfig::ringsum(capacity, *r, rings, min_radius_km)).collect()
}

/// Registry holding every term of `streams` under one method.
pub fn build_registry(grid: &Grid, method: &MethodConfig, streams: &TermStreams) -> Result<Registry> {
    let mut reg = Registry::new(method.registry_config(grid))?;
    for (term, cells) in &streams.terms {
        for &c in cells {
            reg.observe_term(term, c);
        }
    }
    Ok(reg)
}

fn ring_table_for(reg: &Registry, exec: Execution) -> Option<RingCellTable> {
    (reg.config().backend == Backend::Ringsum).then(|| RingCellTable::build(reg.grid(), reg.ring_spec(), exec))
}

/// `|est - truth| / |truth|`, or `|est|` when the truth is 0.
pub fn relative_error(est: f64, truth: f64) -> f64 {
    if truth == 0.0 {
        est.abs()
    } else {
        (est - truth).abs() / truth.abs()
    }
}

/// `|log10(est + 1) - log10(actual + 1)|`.
pub fn log_error(est: f64, actual: f64) -> f64 {
    ((est.max(0.0) + 1.0).log10() - (actual + 1.0).log10()).abs()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Exact full-likelihood fit of every term.
pub fn exact_fits(grid: &Grid, exact: &ExactCounts, exec: Execution) -> Result<BTreeMap<String, ModelParams>> {
    let scale = DistanceScale::for_grid(grid.config());
    exact
        .cells
        .iter()
        .map(|(t, counts)| Ok((t.clone(), exact_fit(grid, &scale, counts, Trials::TermTotal, exec)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub method: String,
    pub term: String,
    pub exact_center: u32,
    pub exact_focus: f64,
    pub exact_spread: f64,
    pub fit_center: u32,
    pub fit_focus: f64,
    pub fit_spread: f64,
    pub rel_err_focus: f64,
    pub rel_err_spread: f64,
    pub center_match: u8,
    pub center_within_one: u8,
    pub center_in_top_k: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub method: String,
    pub backend: String,
    pub capacity: usize,
    pub ratio: f64,
    pub rings: usize,
    pub strategy: String,
    pub terms: usize,
    pub mean_rel_err_focus: f64,
    pub mean_rel_err_spread: f64,
    pub center_accuracy_pct: f64,
    pub within_one_pct: f64,
    pub top_k_pct: f64,
}

/// Fits every term under every method and compares with the exact fits.
/// `top_k` sets the top-K center-accuracy variant: the exact center is
/// among the method's `top_k` most frequent cells.
pub fn eval_model_accuracy(
    grid: &Grid,
    streams: &TermStreams,
    exact: &BTreeMap<String, ModelParams>,
    methods: &[MethodConfig],
    top_k: usize,
    exec: Execution,
) -> Result<(Vec<AccuracyRow>, Vec<AccuracySummary>)> {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for m in methods {
        let reg = build_registry(grid, m, streams)?;
        let engine = QueryEngine::new(&reg, ring_table_for(&reg, exec))?.with_execution(exec);
        let mut mine = Vec::new();
        for (term, truth) in exact {
            let fit = engine.fit_term(term)?;
            let top: Vec<CellId> = engine.rfs(term, top_k)?.cells();
            let near = fit.center == truth.center || grid.neighbors(truth.center).contains(&fit.center);
            mine.push(AccuracyRow {
                method: m.label.clone(),
                term: term.clone(),
                exact_center: truth.center.0,
                exact_focus: truth.focus,
                exact_spread: truth.spread,
                fit_center: fit.center.0,
                fit_focus: fit.focus,
                fit_spread: fit.spread,
                rel_err_focus: relative_error(fit.focus, truth.focus),
                rel_err_spread: relative_error(fit.spread, truth.spread),
                center_match: (fit.center == truth.center) as u8,
                center_within_one: near as u8,
                center_in_top_k: top.contains(&truth.center) as u8,
            });
        }
        summaries.push(summarize_accuracy(m, &mine));
        rows.extend(mine);
    }
    Ok((rows, summaries))
}

fn summarize_accuracy(m: &MethodConfig, rows: &[AccuracyRow]) -> AccuracySummary {
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&AccuracyRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    AccuracySummary {
        method: m.label.clone(),
        backend: m.backend.tag().to_owned(),
        capacity: m.capacity,
        ratio: if m.backend == Backend::Ringsum { m.ratio } else { 0.0 },
        rings: if m.backend == Backend::Ringsum { m.rings } else { 0 },
        strategy: m.strategy.tag().to_owned(),
        terms: rows.len(),
        mean_rel_err_focus: mean(&|r| r.rel_err_focus),
        mean_rel_err_spread: mean(&|r| r.rel_err_spread),
        center_accuracy_pct: 100.0 * mean(&|r| r.center_match as f64),
        within_one_pct: 100.0 * mean(&|r| r.center_within_one as f64),
        top_k_pct: 100.0 * mean(&|r| r.center_in_top_k as f64),
    }
}

/// `n_terms` random terms and, for each, `n_cells` random cells where the
/// term occurs (fewer when it occurs in fewer cells).
pub fn select_tfs_queries(exact: &ExactCounts, n_terms: usize, n_cells: usize, seed: u64) -> Vec<(String, CellId)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms: Vec<&str> = exact.terms().collect();
    let mut picked: Vec<usize> = sample(&mut rng, terms.len(), n_terms.min(terms.len())).into_vec();
    picked.sort_unstable();
    let mut out = Vec::new();
    for i in picked {
        let cells: Vec<CellId> = exact.term(terms[i]).map(|m| m.keys().copied().collect()).unwrap_or_default();
        let mut idx = sample(&mut rng, cells.len(), n_cells.min(cells.len())).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|j| (terms[i].to_owned(), cells[j])));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfsRow {
    pub method: String,
    pub term: String,
    pub cell_id: u32,
    pub actual: u64,
    pub stored: u8,
    pub estimate: f64,
    pub log_err: f64,
    pub zero_fill: f64,
    pub zero_fill_err: f64,
    pub neighbor_avg: f64,
    pub neighbor_avg_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfsSummary {
    pub method: String,
    pub queries: usize,
    pub mean_log_err: f64,
    pub std_log_err: f64,
    pub zero_fill_mean: f64,
    pub zero_fill_std: f64,
    pub neighbor_avg_mean: f64,
    pub neighbor_avg_std: f64,
}

/// Stored frequency, or the mean stored frequency of the surrounding cells
/// (unstored neighbours count as 0).
pub fn neighbor_average(grid: &Grid, counters: &Tsum, cell: CellId) -> f64 {
    if let Some(c) = counters.get(cell) {
        return c.f as f64;
    }
    let nb = grid.neighbors(cell);
    if nb.is_empty() {
        return 0.0;
    }
    nb.iter().map(|c| counters.get(*c).map_or(0, |x| x.f)).sum::<u64>() as f64 / nb.len() as f64
}

pub fn eval_tfs(
    grid: &Grid,
    streams: &TermStreams,
    exact: &ExactCounts,
    queries: &[(String, CellId)],
    methods: &[MethodConfig],
    exec: Execution,
) -> Result<(Vec<TfsRow>, Vec<TfsSummary>)> {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for m in methods {
        let reg = build_registry(grid, m, streams)?;
        let engine = QueryEngine::new(&reg, ring_table_for(&reg, exec))?.with_execution(exec);
        let mut mine = Vec::new();
        for (term, cell) in queries {
            let actual = exact.count(term, *cell);
            let ans = engine.tfs(term, *cell)?;
            let counters = reg.summary(term).expect("term was ingested").counters();
            let zero_fill = ans.stored.map_or(0.0, |c| c.f as f64);
            let neighbor_avg = neighbor_average(grid, counters, *cell);
            mine.push(TfsRow {
                method: m.label.clone(),
                term: term.clone(),
                cell_id: cell.0,
                actual,
                stored: ans.stored.is_some() as u8,
                estimate: ans.estimate,
                log_err: log_error(ans.estimate, actual as f64),
                zero_fill,
                zero_fill_err: log_error(zero_fill, actual as f64),
                neighbor_avg,
                neighbor_avg_err: log_error(neighbor_avg, actual as f64),
            });
        }
        let col = |f: &dyn Fn(&TfsRow) -> f64| mean_std(&mine.iter().map(f).collect::<Vec<_>>());
        let (mean_log_err, std_log_err) = col(&|r| r.log_err);
        let (zero_fill_mean, zero_fill_std) = col(&|r| r.zero_fill_err);
        let (neighbor_avg_mean, neighbor_avg_std) = col(&|r| r.neighbor_avg_err);
        summaries.push(TfsSummary {
            method: m.label.clone(),
            queries: mine.len(),
            mean_log_err,
            std_log_err,
            zero_fill_mean,
            zero_fill_std,
            neighbor_avg_mean,
            neighbor_avg_std,
        });
        rows.extend(mine);
    }
    Ok((rows, summaries))
}

/// Co-occurrence bins of the multi-term suite. In the frequent bins the
/// two terms share one source and mostly appear together. In the others
/// each term has its own source, the pair seldom co-occurs, and joint
/// events fall where both terms are likely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bin {
    Rare,
    Medium,
    Frequent,
    VeryFrequent,
}

impl Bin {
    pub const ALL: [Bin; 4] = [Bin::Rare, Bin::Medium, Bin::Frequent, Bin::VeryFrequent];

    /// Events carrying only one of the terms, per term.
    pub fn single_events(&self) -> usize {
        match self {
            Bin::Rare | Bin::Medium => 10_000,
            Bin::Frequent => 3_000,
            Bin::VeryFrequent => 2_000,
        }
    }

    /// Events carrying both terms.
    pub fn joint_events(&self) -> usize {
        match self {
            Bin::Rare => 20,
            Bin::Medium => 100,
            Bin::Frequent => 6_000,
            Bin::VeryFrequent => 20_000,
        }
    }

    /// Column offset between the two centers.
    pub fn separation(&self) -> u32 {
        match self {
            Bin::Rare => 6,
            Bin::Medium => 3,
            Bin::Frequent | Bin::VeryFrequent => 0,
        }
    }

    /// Whether joint events follow the shared source rather than the
    /// product of the two sources.
    pub fn shared(&self) -> bool {
        matches!(self, Bin::Frequent | Bin::VeryFrequent)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Bin::Rare => "rare",
            Bin::Medium => "medium",
            Bin::Frequent => "frequent",
            Bin::VeryFrequent => "very_frequent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairSpec {
    pub bin: Bin,
    pub a: SourceSpec,
    pub b: SourceSpec,
}

impl PairSpec {
    pub fn terms(&self) -> (String, String) {
        (self.a.term.clone(), self.b.term.clone())
    }
}

/// `pairs_per_bin` random term pairs per bin. Centers keep clear of the
/// poles and the grid's east edge.
pub fn multiterm_suite(grid: &Grid, pairs_per_bin: usize, seed: u64) -> Vec<PairSpec> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (grid.config().n_rows(), grid.config().n_cols());
    let mut out = Vec::new();
    for bin in Bin::ALL {
        let sep = bin.separation();
        for i in 0..pairs_per_bin {
            let row = rng.random_range(rows / 4..rows - rows / 4);
            let col = rng.random_range(2..cols.saturating_sub(sep + 2).max(3));
            // Apart pairs join a concentrated term with a widespread one,
            // so their meeting point is not a top cell of the latter.
            let spread_a = rng.random_range(1.5..2.5);
            let spread_b = if bin.shared() { spread_a } else { rng.random_range(0.8..1.2) };
            let name = |s: &str| format!("{}{i}{s}", bin.tag().replace('_', ""));
            out.push(PairSpec {
                bin,
                a: SourceSpec {
                    term: name("a"),
                    center: grid.config().cell_at(row, col),
                    focus: 0.3,
                    spread: spread_a,
                },
                b: SourceSpec {
                    term: name("b"),
                    center: grid.config().cell_at(row, col + sep),
                    focus: 0.3,
                    spread: spread_b,
                },
            });
        }
    }
    out
}

/// Generates the suite's stream as JSON lines. Each pair's single-term
/// and joint events are shuffled together, so no event kind clusters at
/// the end of the stream. Pair `i` draws from seeds `seed + 4i ..= seed + 4i + 3`.
pub fn gen_multiterm(grid: &Grid, suite: &[PairSpec], seed: u64, out: &mut impl std::io::Write) -> Result<TermStreams> {
    use rand::seq::SliceRandom;
    let scale = DistanceScale::for_grid(grid.config());
    let mut streams = TermStreams::default();
    for (i, p) in suite.iter().enumerate() {
        let s = seed.wrapping_add(4 * i as u64);
        let mut events: Vec<(u8, CellId)> = Vec::new();
        for (k, src) in [&p.a, &p.b].into_iter().enumerate() {
            let cells = sample_cells(grid, &scale, src, p.bin.single_events(), s + k as u64)?;
            events.extend(cells.into_iter().map(|c| (k as u8, c)));
        }
        let weights = if p.bin.shared() {
            model_weights(grid, &scale, p.a.center, p.a.focus, p.a.spread)
        } else {
            product_weights(grid, &scale, &p.a, &p.b)
        };
        events.extend(sample_weighted(&weights, p.bin.joint_events(), s + 2)?.into_iter().map(|c| (2, c)));
        events.shuffle(&mut ChaCha8Rng::seed_from_u64(s + 3));
        let (a, b) = (p.a.term.as_str(), p.b.term.as_str());
        for (kind, c) in events {
            let terms: &[&str] = match kind {
                0 => &[a],
                1 => &[b],
                _ => &[a, b],
            };
            write_events(grid, terms, &[c], out)?;
            streams.events += 1;
            for t in terms {
                streams.push(t, c);
            }
        }
    }
    Ok(streams)
}

/// Cell with the most joint events, ties to the lowest cell.
pub fn joint_top1(joint: &BTreeMap<CellId, u64>) -> Option<CellId> {
    let mut best: Option<(u64, CellId)> = None;
    for (c, n) in joint {
        if *n > 0 && best.is_none_or(|(b, _)| *n > b) {
            best = Some((*n, *c));
        }
    }
    best.map(|(_, c)| c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiRow {
    pub bin: Bin,
    pub term_a: String,
    pub term_b: String,
    pub method: String,
    pub oracle_top1: u32,
    pub predicted_top1: Option<u32>,
    pub hit: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSummary {
    pub bin: String,
    pub method: String,
    pub pairs: usize,
    pub top1_accuracy_pct: f64,
}

pub const INTERSECTION: &str = "tsum_intersection";

/// Top-1 accuracy of the intersection baseline (over the Tsum+ summaries)
/// and of both backends under both combination modes, against the exact
/// joint counts. Pairs that never co-occur are skipped.
#[allow(clippy::too_many_arguments)]
pub fn eval_multiterm(
    grid: &Grid,
    streams: &TermStreams,
    joint: &BTreeMap<(String, String), BTreeMap<CellId, u64>>,
    suite: &[PairSpec],
    tsum: &MethodConfig,
    ringsum: &MethodConfig,
    centers: usize,
    exec: Execution,
) -> Result<(Vec<MultiRow>, Vec<MultiSummary>)> {
    let treg = build_registry(grid, tsum, streams)?;
    let rreg = build_registry(grid, ringsum, streams)?;
    let tq = QueryEngine::new(&treg, None)?.with_execution(exec);
    let rq = QueryEngine::new(&rreg, ring_table_for(&rreg, exec))?.with_execution(exec);
    let modes = [CombineMode::Independent, CombineMode::MinBound];
    let mut rows = Vec::new();
    for p in suite {
        let Some(oracle) = joint.get(&p.terms()).and_then(joint_top1) else {
            continue;
        };
        let terms = [p.a.term.as_str(), p.b.term.as_str()];
        let mut push = |method: String, pred: Option<CellId>| {
            rows.push(MultiRow {
                bin: p.bin,
                term_a: p.a.term.clone(),
                term_b: p.b.term.clone(),
                method,
                oracle_top1: oracle.0,
                predicted_top1: pred.map(|c| c.0),
                hit: (pred == Some(oracle)) as u8,
            })
        };
        push(INTERSECTION.to_owned(), tq.intersection_rfs(&terms, 1)?.cells().first().copied());
        for (label, engine) in [(&tsum.label, &tq), (&ringsum.label, &rq)] {
            for mode in modes {
                let scores = engine.multi_scores(&terms, centers, mode)?;
                push(format!("{label}_{}", mode.tag()), argmax(&scores));
            }
        }
    }
    let mut groups: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for r in &rows {
        for bin in [r.bin.tag().to_owned(), "all".to_owned()] {
            let e = groups.entry((bin, r.method.clone())).or_default();
            e.0 += 1;
            e.1 += r.hit as usize;
        }
    }
    let summaries = groups
        .into_iter()
        .map(|((bin, method), (n, hits))| MultiSummary {
            bin,
            method,
            pairs: n,
            top1_accuracy_pct: 100.0 * hits as f64 / n as f64,
        })
        .collect();
    Ok((rows, summaries))
}

/// Index of the largest score, ties to the lowest index.
fn argmax(scores: &[f64]) -> Option<CellId> {
    let mut best: Option<(f64, usize)> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|(b, _)| *s > b) {
            best = Some((*s, i));
        }
    }
    best.map(|(_, i)| CellId(i as u32))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateTiming {
    pub method: String,
    pub strategy: String,
    pub events: u64,
    pub mean_update_ns: f64,
    pub distance_evals: u64,
    pub transfers: u64,
    pub replacements: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryTiming {
    pub method: String,
    pub queries: usize,
    pub mean_query_ns: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplacementPoint {
    pub method: String,
    pub fraction: f64,
    pub events: u64,
    pub replacements: u64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Mean per-event update latency of one method on one cell sequence,
/// median over `runs` runs. Ringsum counts come from the last run.
pub fn time_updates(grid: &Grid, method: &MethodConfig, cells: &[CellId], runs: usize) -> Result<UpdateTiming> {
    let cfg = method.registry_config(grid);
    cfg.validate()?;
    let spec = cfg.rings.spec()?;
    let mut times = Vec::new();
    let mut stats = (0, 0, 0);
    for _ in 0..runs.max(1) {
        match method.backend {
            Backend::TsumPlus => {
                let mut t = Tsum::new(cfg.capacity);
                let start = Instant::now();
                for &c in cells {
                    t.update(c);
                }
                times.push(start.elapsed().as_nanos() as f64 / cells.len().max(1) as f64);
                stats = (0, 0, t.replacements());
            }
            Backend::Ringsum => {
                let mut r = Ringsum::new(cfg.capacity, spec.clone(), cfg.strategy);
                let start = Instant::now();
                for &c in cells {
                    r.update(grid, c);
                }
                times.push(start.elapsed().as_nanos() as f64 / cells.len().max(1) as f64);
                let s = r.stats();
                stats = (s.distance_evals, s.transfers, r.tsum().replacements());
            }
        }
    }
    Ok(UpdateTiming {
        method: method.label.clone(),
        strategy: method.strategy.tag().to_owned(),
        events: cells.len() as u64,
        mean_update_ns: median(times),
        distance_evals: stats.0,
        transfers: stats.1,
        replacements: stats.2,
    })
}

/// Cumulative replacements at each of `points` evenly spaced stream
/// fractions.
pub fn replacement_curve(method: &MethodConfig, cells: &[CellId], points: usize) -> Vec<ReplacementPoint> {
    let mut t = Tsum::new(method.capacity);
    let mut out = Vec::new();
    let n = cells.len();
    let mut next = 1;
    for (i, &c) in cells.iter().enumerate() {
        t.update(c);
        while next <= points && (i + 1) * points >= next * n {
            out.push(ReplacementPoint {
                method: method.label.clone(),
                fraction: next as f64 / points as f64,
                events: (i + 1) as u64,
                replacements: t.replacements(),
            });
            next += 1;
        }
    }
    out
}

/// Mean TFS latency per query on a fresh engine (fits are memoized within
/// the run), median over `runs` runs.
pub fn time_tfs(
    reg: &Registry,
    label: &str,
    queries: &[(String, CellId)],
    runs: usize,
    exec: Execution,
) -> Result<QueryTiming> {
    let table = ring_table_for(reg, exec);
    let mut times = Vec::new();
    for _ in 0..runs.max(1) {
        let engine = QueryEngine::new(reg, table.clone())?.with_execution(exec);
        let start = Instant::now();
        for (t, c) in queries {
            engine.tfs(t, *c)?;
        }
        times.push(start.elapsed().as_nanos() as f64 / queries.len().max(1) as f64);
    }
    Ok(QueryTiming { method: label.to_owned(), queries: queries.len(), mean_query_ns: median(times) })
}

/// Writes rows as CSV with a header from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r =
        csv::Reader::from_path(path).map_err(|e| Error::Format { path: path.to_owned(), message: e.to_string() })?;
    r.deserialize().map(|x| x.map_err(|e| Error::Format { path: path.to_owned(), message: e.to_string() })).collect()
}

/// What an evaluation run did, written next to its reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub kind: String,
    pub seed: u64,
    pub grid: crate::grid::GridConfig,
    pub methods: Vec<MethodConfig>,
    pub files: Vec<String>,
}

impl EvalManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(Self::FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let text =
            fs::read_to_string(&path).map_err(|e| Error::Format { path: path.clone(), message: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path, message: e.to_string() })
    }
}

/// Settings of a model and TFS evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub seed: u64,
    pub methods: Vec<MethodConfig>,
    pub sweep_ratios: Vec<f64>,
    pub sweep_capacity: usize,
    pub sweep_rings: usize,
    pub sweep_min_radius_km: f64,
    pub top_k: usize,
    pub tfs_terms: usize,
    pub tfs_cells: usize,
}

impl EvalPlan {
    /// Equal-space comparison: Tsum+ with 216 counters against Ringsum with
    /// 50 centers, 10 rings and ratio 0.6.
    pub fn standard(grid: &Grid, seed: u64) -> Self {
        let min_radius = (grid.config().half_cell_diagonal_km() / 8.0).max(1.0);
        Self {
            seed,
            methods: vec![MethodConfig::tsum_plus(216), MethodConfig::ringsum(50, 0.6, 10, min_radius)],
            sweep_ratios: (1..=9).map(|i| i as f64 / 10.0).collect(),
            sweep_capacity: 50,
            sweep_rings: 10,
            sweep_min_radius_km: min_radius,
            top_k: 10,
            tfs_terms: 100,
            tfs_cells: 10,
        }
    }
}

/// Model accuracy, ring-ratio sweep and TFS error on one stream; writes
/// `accuracy.csv`, `accuracy_summary.csv`, `r_sweep.csv`, `tfs.csv`,
/// `tfs_summary.csv` and the manifest.
pub fn run_model_eval(
    dir: &Path,
    grid: &Grid,
    streams: &TermStreams,
    plan: &EvalPlan,
    exec: Execution,
) -> Result<EvalManifest> {
    fs::create_dir_all(dir)?;
    let exact = streams.exact_counts();
    let fits = exact_fits(grid, &exact, exec)?;
    let (rows, summary) = eval_model_accuracy(grid, streams, &fits, &plan.methods, plan.top_k, exec)?;
    write_csv(&dir.join("accuracy.csv"), &rows)?;
    write_csv(&dir.join("accuracy_summary.csv"), &summary)?;
    let sweep = r_sweep_methods(plan.sweep_capacity, plan.sweep_rings, plan.sweep_min_radius_km, &plan.sweep_ratios);
    let (_, sweep_summary) = eval_model_accuracy(grid, streams, &fits, &sweep, plan.top_k, exec)?;
    write_csv(&dir.join("r_sweep.csv"), &sweep_summary)?;
    let queries = select_tfs_queries(&exact, plan.tfs_terms, plan.tfs_cells, plan.seed);
    let (tfs_rows, tfs_summary) = eval_tfs(grid, streams, &exact, &queries, &plan.methods, exec)?;
    write_csv(&dir.join("tfs.csv"), &tfs_rows)?;
    write_csv(&dir.join("tfs_summary.csv"), &tfs_summary)?;
    let manifest = EvalManifest {
        kind: "model".into(),
        seed: plan.seed,
        grid: grid.config().clone(),
        methods: plan.methods.iter().chain(&sweep).cloned().collect(),
        files: ["accuracy.csv", "accuracy_summary.csv", "r_sweep.csv", "tfs.csv", "tfs_summary.csv"]
            .map(String::from)
            .to_vec(),
    };
    manifest.write(dir)?;
    Ok(manifest)
}

/// Multi-term suite: generates the stream into `dir/multiterm.jsonl` and
/// writes `multiterm.csv`, `multiterm_summary.csv` and the manifest.
/// Model methods use each term's `centers` most frequent cells.
#[allow(clippy::too_many_arguments)]
pub fn run_multiterm_eval(
    dir: &Path,
    grid: &Grid,
    pairs_per_bin: usize,
    centers: usize,
    seed: u64,
    tsum: &MethodConfig,
    ringsum: &MethodConfig,
    exec: Execution,
) -> Result<EvalManifest> {
    fs::create_dir_all(dir)?;
    let suite = multiterm_suite(grid, pairs_per_bin, seed);
    let mut out = std::io::BufWriter::new(fs::File::create(dir.join("multiterm.jsonl"))?);
    let streams = gen_multiterm(grid, &suite, seed, &mut out)?;
    std::io::Write::flush(&mut out)?;
    drop(out);
    let pairs: Vec<(String, String)> = suite.iter().map(PairSpec::terms).collect();
    let joint = joint_counts(&dir.join("multiterm.jsonl"), grid, &pairs)?;
    let (rows, summary) = eval_multiterm(grid, &streams, &joint, &suite, tsum, ringsum, centers, exec)?;
    write_csv(&dir.join("multiterm.csv"), &rows)?;
    write_csv(&dir.join("multiterm_summary.csv"), &summary)?;
    let manifest = EvalManifest {
        kind: "multiterm".into(),
        seed,
        grid: grid.config().clone(),
        methods: vec![tsum.clone(), ringsum.clone()],
        files: ["multiterm.jsonl", "multiterm.csv", "multiterm_summary.csv"].map(String::from).to_vec(),
    };
    manifest.write(dir)?;
    Ok(manifest)
}

/// Settings of a timing run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPlan {
    pub seed: u64,
    pub methods: Vec<MethodConfig>,
    pub runs: usize,
    pub tfs_terms: usize,
    pub tfs_cells: usize,
    pub curve_points: usize,
}

/// Update latency of every method over the concatenated term streams,
/// TFS latency per backend, the replacement curve of the first method
/// and the strategy accuracy table. Writes `update_timing.csv`,
/// `query_timing.csv`, `replacements.csv`, `strategies.csv` and the
/// manifest.
pub fn run_bench(
    dir: &Path,
    grid: &Grid,
    streams: &TermStreams,
    plan: &BenchPlan,
    exec: Execution,
) -> Result<EvalManifest> {
    fs::create_dir_all(dir)?;
    let first = streams
        .terms
        .iter()
        .max_by_key(|(_, v)| v.len())
        .map(|(_, v)| v.as_slice())
        .ok_or_else(|| Error::InvalidConfig("empty stream".into()))?;
    let mut updates = Vec::new();
    for m in &plan.methods {
        updates.push(time_updates(grid, m, first, plan.runs)?);
    }
    write_csv(&dir.join("update_timing.csv"), &updates)?;

    let exact = streams.exact_counts();
    let queries = select_tfs_queries(&exact, plan.tfs_terms, plan.tfs_cells, plan.seed);
    let mut seen = Vec::new();
    let mut query_rows = Vec::new();
    for m in plan.methods.iter().filter(|m| m.strategy == Strategy::Standard) {
        if seen.contains(&m.backend) {
            continue;
        }
        seen.push(m.backend);
        let reg = build_registry(grid, m, streams)?;
        query_rows.push(time_tfs(&reg, &m.label, &queries, plan.runs, exec)?);
    }
    write_csv(&dir.join("query_timing.csv"), &query_rows)?;

    let curve = plan.methods.first().map(|m| replacement_curve(m, first, plan.curve_points)).unwrap_or_default();
    write_csv(&dir.join("replacements.csv"), &curve)?;

    let ring_methods: Vec<MethodConfig> =
        plan.methods.iter().filter(|m| m.backend == Backend::Ringsum).cloned().collect();
    let fits = exact_fits(grid, &exact, exec)?;
    let (_, strategies) = eval_model_accuracy(grid, streams, &fits, &ring_methods, 10, exec)?;
    write_csv(&dir.join("strategies.csv"), &strategies)?;

    let manifest = EvalManifest {
        kind: "bench".into(),
        seed: plan.seed,
        grid: grid.config().clone(),
        methods: plan.methods.clone(),
        files: ["update_timing.csv", "query_timing.csv", "replacements.csv", "strategies.csv"]
            .map(String::from)
            .to_vec(),
    };
    manifest.write(dir)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub ratio: f64,
    pub rings: usize,
    pub counters: usize,
    pub rel_err_focus: f64,
    pub rel_err_spread: f64,
    pub center_accuracy_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub method: String,
    pub update_ms: Option<f64>,
    pub query_ms: Option<f64>,
    pub log_dist_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3Row {
    pub strategy: String,
    pub rel_err_focus: f64,
    pub rel_err_spread: f64,
    pub center_accuracy_pct: f64,
}

/// Rebuilds summary tables from completed runs without recomputation:
/// `table1.csv` from a model run, `table3.csv` from a bench run and
/// `table2.csv` from whichever of the two are given. Returns the files
/// written.
pub fn write_tables(model_dir: Option<&Path>, bench_dir: Option<&Path>, out: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut table2: BTreeMap<String, Table2Row> = BTreeMap::new();
    let row2 = |m: &str| Table2Row { method: m.to_owned(), update_ms: None, query_ms: None, log_dist_error: None };
    if let Some(dir) = model_dir {
        let acc: Vec<AccuracySummary> = read_csv(&dir.join("accuracy_summary.csv"))?;
        let rows: Vec<Table1Row> = acc
            .iter()
            .map(|a| Table1Row {
                ratio: a.ratio,
                rings: a.rings,
                counters: a.capacity,
                rel_err_focus: a.mean_rel_err_focus,
                rel_err_spread: a.mean_rel_err_spread,
                center_accuracy_pct: a.center_accuracy_pct,
            })
            .collect();
        write_csv(&out.join("table1.csv"), &rows)?;
        written.push("table1.csv".to_owned());
        let tfs: Vec<TfsSummary> = read_csv(&dir.join("tfs_summary.csv"))?;
        for t in tfs {
            table2.entry(t.method.clone()).or_insert_with(|| row2(&t.method)).log_dist_error = Some(t.mean_log_err);
        }
    }
    if let Some(dir) = bench_dir {
        let upd: Vec<UpdateTiming> = read_csv(&dir.join("update_timing.csv"))?;
        for u in upd {
            table2.entry(u.method.clone()).or_insert_with(|| row2(&u.method)).update_ms = Some(u.mean_update_ns / 1e6);
        }
        let q: Vec<QueryTiming> = read_csv(&dir.join("query_timing.csv"))?;
        for x in q {
            table2.entry(x.method.clone()).or_insert_with(|| row2(&x.method)).query_ms = Some(x.mean_query_ns / 1e6);
        }
        let st: Vec<AccuracySummary> = read_csv(&dir.join("strategies.csv"))?;
        let rows: Vec<Table3Row> = st
            .iter()
            .map(|a| Table3Row {
                strategy: a.strategy.clone(),
                rel_err_focus: a.mean_rel_err_focus,
                rel_err_spread: a.mean_rel_err_spread,
                center_accuracy_pct: a.center_accuracy_pct,
            })
            .collect();
        write_csv(&out.join("table3.csv"), &rows)?;
        written.push("table3.csv".to_owned());
    }
    if !table2.is_empty() {
        write_csv(&out.join("table2.csv"), &table2.into_values().collect::<Vec<_>>())?;
        written.push("table2.csv".to_owned());
    }
    written.sort();
    Ok(written)
}
