//! Subcommand implementations. Human-readable results go to `out`; `--out`
//! files receive CSV.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use geosketch::eval::{
    self, AccuracyRow, AccuracySummary, BenchPlan, EvalPlan, MethodConfig, MultiSummary, TfsSummary,
};
use geosketch::ingest::{Backend, Registry};
use geosketch::model::{DistanceScale, ModelParams, MODEL_CSV_HEADER};
use geosketch::oracle::{gen_stream, SourceSpec, TermStreams};
use geosketch::query::{CombineMode, QueryEngine, QueryResult};
use geosketch::ringsum::Strategy;
use geosketch::{CellId, Execution, Grid, RingCellTable};

use crate::config::CliConfig;
use crate::CliError;

type Out<'a> = &'a mut dyn Write;

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Event file: JSON lines, or CSV when the extension is `.csv`.
    #[arg(long)]
    pub input: PathBuf,
    /// Also write a CSV copy of every summary.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args, Debug)]
pub struct RfsArgs {
    #[arg(long)]
    pub term: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// CSV output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A query location: either a coordinate or a cell id.
#[derive(Args, Debug, Clone)]
pub struct Location {
    #[arg(long, allow_hyphen_values = true, requires = "lon")]
    pub lat: Option<f64>,
    #[arg(long, allow_hyphen_values = true, requires = "lat")]
    pub lon: Option<f64>,
    #[arg(long, conflicts_with_all = ["lat", "lon"])]
    pub cell: Option<u32>,
}

impl Location {
    fn is_set(&self) -> bool {
        self.cell.is_some() || self.lat.is_some()
    }

    fn resolve(&self, grid: &Grid) -> Result<CellId, CliError> {
        match (self.cell, self.lat, self.lon) {
            (Some(c), _, _) => {
                let cell = CellId(c);
                if !grid.config().is_valid(cell) {
                    return Err(CliError::Usage(format!("cell {c} is outside the grid")));
                }
                Ok(cell)
            }
            (None, Some(lat), Some(lon)) => grid.cell_of(lat, lon).map_err(|e| CliError::Usage(e.to_string())),
            _ => Err(CliError::Usage("give --lat and --lon, or --cell".into())),
        }
    }
}

#[derive(Args, Debug)]
pub struct TfsArgs {
    #[arg(long)]
    pub term: String,
    #[command(flatten)]
    pub at: Location,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MultiArgs {
    /// Comma-separated terms.
    #[arg(long, value_delimiter = ',', required = true)]
    pub terms: Vec<String>,
    /// Result size; also the number of centers fitted per term.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// independent, min_bound or intersection.
    #[arg(long, default_value = "independent")]
    pub mode: String,
    /// Estimate the joint frequency at this location instead of ranking.
    #[command(flatten)]
    pub at: Location,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Terms to fit; every snapshot term when omitted.
    #[arg(long)]
    pub term: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value = "term")]
    pub term: String,
    /// Focus `C`.
    #[arg(long)]
    pub c: f64,
    /// Spread `alpha`.
    #[arg(long)]
    pub alpha: f64,
    #[arg(long = "center-lat", allow_hyphen_values = true)]
    pub center_lat: f64,
    #[arg(long = "center-lon", allow_hyphen_values = true)]
    pub center_lon: f64,
    /// Number of events.
    #[arg(long)]
    pub n: usize,
    /// JSON-lines output; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Append to `--out` instead of replacing it.
    #[arg(long, requires = "out")]
    pub append: bool,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Model accuracy, ring-ratio sweep and TFS error on an event file.
    Model(EvalModelArgs),
    /// Multi-term top-1 accuracy on a generated pair suite.
    Multi(EvalMultiArgs),
}

#[derive(Args, Debug)]
pub struct EvalModelArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
    #[arg(long = "top-k", default_value_t = 10)]
    pub top_k: usize,
    #[arg(long = "tfs-terms", default_value_t = 100)]
    pub tfs_terms: usize,
    #[arg(long = "tfs-cells", default_value_t = 10)]
    pub tfs_cells: usize,
    /// Ring ratios for the sweep.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct EvalMultiArgs {
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
    /// Pairs per frequency bin.
    #[arg(long, default_value_t = 25)]
    pub pairs: usize,
    /// Centers per term.
    #[arg(long, default_value_t = 1)]
    pub centers: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    #[arg(long = "tfs-terms", default_value_t = 10)]
    pub tfs_terms: usize,
    #[arg(long = "tfs-cells", default_value_t = 10)]
    pub tfs_cells: usize,
    #[arg(long = "curve-points", default_value_t = 20)]
    pub curve_points: usize,
}

#[derive(Args, Debug)]
pub struct TableArgs {
    #[arg(long = "model-dir")]
    pub model_dir: Option<PathBuf>,
    #[arg(long = "bench-dir")]
    pub bench_dir: Option<PathBuf>,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?))
}

fn open_snapshot(cfg: &CliConfig) -> Result<Registry, CliError> {
    let dir = cfg.snapshot()?;
    if !dir.is_dir() {
        return Err(CliError::Data(format!("snapshot {} does not exist", dir.display())));
    }
    Ok(Registry::load(dir)?)
}

fn engine<'a>(cfg: &CliConfig, reg: &'a Registry, exec: Execution) -> Result<QueryEngine<'a>, CliError> {
    let table = match reg.config().backend {
        Backend::TsumPlus => None,
        Backend::Ringsum => Some(RingCellTable::load_or_build(reg.grid(), reg.ring_spec(), cfg.snapshot()?, exec)?),
    };
    Ok(QueryEngine::new(reg, table)?.with_execution(exec))
}

fn print_ranking(out: Out, header: &str, score: &str, r: &QueryResult) -> Result<(), CliError> {
    writeln!(out, "{header} backend={} entries={}", r.backend.tag(), r.entries.len())?;
    writeln!(out, "rank\tcell_id\tlat\tlon\t{score}\tdelta")?;
    for e in &r.entries {
        let delta = e.delta.map(|d| d.to_string()).unwrap_or_else(|| "-".into());
        writeln!(out, "{}\t{}\t{:.4}\t{:.4}\t{}\t{delta}", e.rank, e.cell, e.lat, e.lon, e.score)?;
    }
    Ok(())
}

pub fn ingest(cfg: &CliConfig, exec: Execution, a: &IngestArgs, out: Out) -> Result<(), CliError> {
    let dir = cfg.snapshot()?;
    let grid = Grid::new(cfg.grid.clone());
    let mut reg = Registry::new(cfg.registry_config(&grid))?;
    if let Some(terms) = cfg.whitelist_terms()? {
        reg = reg.with_whitelist(terms);
    }
    if !a.input.is_file() {
        return Err(CliError::Data(format!("input {} does not exist", a.input.display())));
    }
    reg.ingest_file(&a.input)?;
    reg.save(dir, a.csv)?;
    if reg.config().backend == Backend::Ringsum {
        RingCellTable::load_or_build(reg.grid(), reg.ring_spec(), dir, exec)?;
    }
    let c = reg.counts();
    log::info!("snapshot written to {}", dir.display());
    writeln!(
        out,
        "ingest backend={} m={} terms={} events={} occurrences={} rejected={} empty={}",
        reg.config().backend.tag(),
        reg.config().capacity,
        reg.len(),
        c.events,
        c.occurrences,
        c.rejected,
        c.empty
    )?;
    Ok(())
}

pub fn rfs(cfg: &CliConfig, exec: Execution, a: &RfsArgs, out: Out) -> Result<(), CliError> {
    let reg = open_snapshot(cfg)?;
    let r = engine(cfg, &reg, exec)?.rfs(&a.term, a.k)?;
    print_ranking(out, &format!("rfs term={} k={}", a.term, a.k), "f", &r)?;
    if let Some(p) = &a.out {
        r.write_csv(create(p)?)?;
    }
    Ok(())
}

pub fn tfs(cfg: &CliConfig, exec: Execution, a: &TfsArgs, out: Out) -> Result<(), CliError> {
    let reg = open_snapshot(cfg)?;
    let cell = a.at.resolve(reg.grid())?;
    let ans = engine(cfg, &reg, exec)?.tfs(&a.term, cell)?;
    let (lat, lon) = reg.grid().cell_center(cell);
    write!(
        out,
        "tfs term={} cell={cell} lat={lat:.4} lon={lon:.4} estimate={} upper_bound={}",
        a.term, ans.estimate, ans.upper_bound
    )?;
    match (&ans.stored, &ans.model) {
        (Some(c), _) => writeln!(out, " stored=yes f={} delta={}", c.f, c.delta)?,
        (None, Some(m)) => writeln!(out, " stored=no center={} C={} alpha={}", m.center, m.focus, m.spread)?,
        (None, None) => writeln!(out, " stored=no")?,
    }
    if let Some(p) = &a.out {
        let mut w = csv::Writer::from_writer(create(p)?);
        w.write_record(["term", "cell_id", "lat", "lon", "estimate", "upper_bound", "stored", "delta"])
            .map_err(|e| CliError::Data(e.to_string()))?;
        let delta = ans.stored.map(|c| c.delta.to_string()).unwrap_or_default();
        let stored = if ans.stored.is_some() { "1" } else { "0" };
        w.write_record([
            a.term.clone(),
            cell.to_string(),
            lat.to_string(),
            lon.to_string(),
            ans.estimate.to_string(),
            ans.upper_bound.to_string(),
            stored.to_owned(),
            delta,
        ])
        .map_err(|e| CliError::Data(e.to_string()))?;
        w.flush()?;
    }
    Ok(())
}

pub fn multi(cfg: &CliConfig, exec: Execution, a: &MultiArgs, out: Out) -> Result<(), CliError> {
    if a.terms.len() < 2 {
        return Err(CliError::Usage("--terms needs at least two terms".into()));
    }
    let terms: Vec<&str> = a.terms.iter().map(String::as_str).collect();
    let reg = open_snapshot(cfg)?;
    let eng = engine(cfg, &reg, exec)?;
    let header = format!("multi terms={} mode={}", a.terms.join(","), a.mode);
    if a.mode == "intersection" {
        if a.at.is_set() {
            return Err(CliError::Usage("the intersection mode only ranks cells".into()));
        }
        let r = eng.intersection_rfs(&terms, a.k)?;
        print_ranking(out, &header, "min_f", &r)?;
        if let Some(p) = &a.out {
            r.write_csv(create(p)?)?;
        }
        return Ok(());
    }
    let mode = CombineMode::parse(&a.mode).map_err(|e| CliError::Usage(e.to_string()))?;
    if a.at.is_set() {
        let cell = a.at.resolve(reg.grid())?;
        let est = eng.multi_tfs(&terms, cell, a.k, mode)?;
        writeln!(out, "{header} cell={cell} estimate={est}")?;
        if let Some(p) = &a.out {
            let mut w = create(p)?;
            writeln!(w, "terms,cell_id,mode,estimate\n\"{}\",{cell},{},{est}", a.terms.join(","), mode.tag())?;
            w.flush()?;
        }
        return Ok(());
    }
    let r = eng.multi_rfs(&terms, a.k, mode)?;
    print_ranking(out, &header, "score", &r)?;
    if let Some(p) = &a.out {
        r.write_csv(create(p)?)?;
    }
    Ok(())
}

fn write_models(path: &Path, models: &[(String, ModelParams)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let data = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record(MODEL_CSV_HEADER).map_err(data)?;
    for (t, p) in models {
        p.write_csv_row(t, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn fit(cfg: &CliConfig, exec: Execution, a: &FitArgs, out: Out) -> Result<(), CliError> {
    let reg = open_snapshot(cfg)?;
    let eng = engine(cfg, &reg, exec)?;
    let terms: Vec<String> = if a.term.is_empty() { reg.terms().map(str::to_owned).collect() } else { a.term.clone() };
    let mut models = Vec::with_capacity(terms.len());
    writeln!(out, "term\tcenter_cell\tlat\tlon\tC\talpha\tlog_lik")?;
    for t in terms {
        let p = eng.fit_term(&t)?;
        let (lat, lon) = reg.grid().cell_center(p.center);
        writeln!(out, "{t}\t{}\t{lat:.4}\t{lon:.4}\t{}\t{}\t{}", p.center, p.focus, p.spread, p.log_lik)?;
        models.push((t, p));
    }
    if let Some(p) = &a.out {
        write_models(p, &models)?;
    }
    Ok(())
}

pub fn gen(cfg: &CliConfig, a: &GenArgs, out: Out) -> Result<(), CliError> {
    if a.c.is_nan() || a.c <= 0.0 || a.c > 1.0 || a.alpha.is_nan() || a.alpha < 0.0 {
        return Err(CliError::Usage("need 0 < c <= 1 and alpha >= 0".into()));
    }
    let grid = Grid::new(cfg.grid.clone());
    let center = grid.cell_of(a.center_lat, a.center_lon).map_err(|e| CliError::Usage(e.to_string()))?;
    let src = SourceSpec { term: a.term.clone(), center, focus: a.c, spread: a.alpha };
    let scale = DistanceScale::for_grid(grid.config());
    match &a.out {
        Some(p) => {
            let file = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(a.append)
                .truncate(!a.append)
                .open(p)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let mut w = BufWriter::new(file);
            gen_stream(&grid, &scale, &src, a.n, cfg.seed, &mut w)?;
            w.flush()?;
            log::info!("{} events for `{}` written to {}", a.n, a.term, p.display());
        }
        None => {
            let mut w = BufWriter::new(out);
            gen_stream(&grid, &scale, &src, a.n, cfg.seed, &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn load_streams(cfg: &CliConfig, input: &Path) -> Result<(Grid, TermStreams), CliError> {
    if !input.is_file() {
        return Err(CliError::Data(format!("input {} does not exist", input.display())));
    }
    let grid = Grid::new(cfg.grid.clone());
    let streams = TermStreams::from_file(input, &grid)?;
    if streams.terms.is_empty() {
        return Err(CliError::Data(format!("{} has no events inside the grid", input.display())));
    }
    Ok((grid, streams))
}

pub fn eval(cfg: &CliConfig, exec: Execution, cmd: &EvalCommand, out: Out) -> Result<(), CliError> {
    match cmd {
        EvalCommand::Model(a) => {
            let (grid, streams) = load_streams(cfg, &a.input)?;
            let mut plan = EvalPlan::standard(&grid, cfg.seed);
            plan.top_k = a.top_k;
            plan.tfs_terms = a.tfs_terms;
            plan.tfs_cells = a.tfs_cells;
            if let Some(r) = &a.ratios {
                plan.sweep_ratios = r.clone();
            }
            eval::run_model_eval(&a.out_dir, &grid, &streams, &plan, exec)?;
            let rows: Vec<AccuracyRow> = eval::read_csv(&a.out_dir.join("accuracy.csv"))?;
            writeln!(out, "exact fits")?;
            writeln!(out, "term\tcenter_cell\tlat\tlon\tC\talpha")?;
            let first = rows.first().map(|r| r.method.clone()).unwrap_or_default();
            for r in rows.iter().filter(|r| r.method == first) {
                let (lat, lon) = grid.cell_center(CellId(r.exact_center));
                writeln!(
                    out,
                    "{}\t{}\t{lat:.4}\t{lon:.4}\t{}\t{}",
                    r.term, r.exact_center, r.exact_focus, r.exact_spread
                )?;
            }
            let acc: Vec<AccuracySummary> = eval::read_csv(&a.out_dir.join("accuracy_summary.csv"))?;
            writeln!(out, "method\trel_err_C\trel_err_alpha\tcenter_pct\twithin_one_pct\ttop_k_pct")?;
            for s in &acc {
                writeln!(
                    out,
                    "{}\t{:.4}\t{:.4}\t{:.1}\t{:.1}\t{:.1}",
                    s.method,
                    s.mean_rel_err_focus,
                    s.mean_rel_err_spread,
                    s.center_accuracy_pct,
                    s.within_one_pct,
                    s.top_k_pct
                )?;
            }
            let tfs: Vec<TfsSummary> = eval::read_csv(&a.out_dir.join("tfs_summary.csv"))?;
            writeln!(out, "method\tqueries\tlog_err\tzero_fill\tneighbor_avg")?;
            for t in &tfs {
                writeln!(
                    out,
                    "{}\t{}\t{:.3}\t{:.3}\t{:.3}",
                    t.method, t.queries, t.mean_log_err, t.zero_fill_mean, t.neighbor_avg_mean
                )?;
            }
        }
        EvalCommand::Multi(a) => {
            let grid = Grid::new(cfg.grid.clone());
            let min_radius = (grid.config().half_cell_diagonal_km() / 8.0).max(1.0);
            let tsum = MethodConfig::tsum_plus(Backend::TsumPlus.default_capacity());
            let ringsum = MethodConfig::ringsum(cfg.m, cfg.ratio, cfg.rings, cfg.min_radius_km.unwrap_or(min_radius));
            eval::run_multiterm_eval(&a.out_dir, &grid, a.pairs, a.centers, cfg.seed, &tsum, &ringsum, exec)?;
            let summary: Vec<MultiSummary> = eval::read_csv(&a.out_dir.join("multiterm_summary.csv"))?;
            writeln!(out, "bin\tmethod\tpairs\ttop1_pct")?;
            for s in &summary {
                writeln!(out, "{}\t{}\t{}\t{:.1}", s.bin, s.method, s.pairs, s.top1_accuracy_pct)?;
            }
        }
    }
    Ok(())
}

pub fn bench(cfg: &CliConfig, exec: Execution, a: &BenchArgs, out: Out) -> Result<(), CliError> {
    let (grid, streams) = load_streams(cfg, &a.input)?;
    let longest = streams.terms.values().map(Vec::len).max().unwrap_or(0) as u64;
    let min_radius = cfg.min_radius_km.unwrap_or_else(|| (grid.config().half_cell_diagonal_km() / 8.0).max(1.0));
    let ring = MethodConfig::ringsum(cfg.m, cfg.ratio, cfg.rings, min_radius);
    let plan = BenchPlan {
        seed: cfg.seed,
        methods: vec![
            ring.clone(),
            MethodConfig::tsum_plus(Backend::TsumPlus.default_capacity()),
            ring.clone().with_strategy(Strategy::FixedCenter { theta: cfg.theta, expected_len: longest.max(1) }),
            ring.clone().with_strategy(Strategy::LightUpdate),
            ring.with_strategy(Strategy::ProximityAware),
        ],
        runs: a.runs.max(1),
        tfs_terms: a.tfs_terms,
        tfs_cells: a.tfs_cells,
        curve_points: a.curve_points,
    };
    eval::run_bench(&a.out_dir, &grid, &streams, &plan, exec)?;
    let upd: Vec<eval::UpdateTiming> = eval::read_csv(&a.out_dir.join("update_timing.csv"))?;
    writeln!(out, "method\tupdate_ns\treplacements")?;
    for u in &upd {
        writeln!(out, "{}\t{:.0}\t{}", u.method, u.mean_update_ns, u.replacements)?;
    }
    let q: Vec<eval::QueryTiming> = eval::read_csv(&a.out_dir.join("query_timing.csv"))?;
    writeln!(out, "method\tqueries\tquery_ns")?;
    for x in &q {
        writeln!(out, "{}\t{}\t{:.0}", x.method, x.queries, x.mean_query_ns)?;
    }
    Ok(())
}

pub fn table(a: &TableArgs, out: Out) -> Result<(), CliError> {
    if a.model_dir.is_none() && a.bench_dir.is_none() {
        return Err(CliError::Usage("give --model-dir, --bench-dir or both".into()));
    }
    for d in a.model_dir.iter().chain(&a.bench_dir) {
        if !d.is_dir() {
            return Err(CliError::Data(format!("{} does not exist", d.display())));
        }
    }
    let written = eval::write_tables(a.model_dir.as_deref(), a.bench_dir.as_deref(), &a.out_dir)?;
    for f in written {
        writeln!(out, "{}", a.out_dir.join(f).display())?;
    }
    Ok(())
}
