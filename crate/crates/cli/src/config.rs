//! Run configuration: a `key=value` file overridden by command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use geosketch::ingest::{Backend, RegistryConfig};
use geosketch::ringsum::{Strategy, DEFAULT_FREEZE_FRACTION};
use geosketch::{Grid, GridConfig};

use crate::CliError;

/// Keys accepted in a config file. Upper-case `R` and `r` follow the
/// notation for ring count and ratio.
const KEYS: &[&str] = &[
    "cell_size_deg",
    "extent",
    "backend",
    "m",
    "R",
    "r",
    "D_km",
    "min_radius_km",
    "strategy",
    "theta",
    "expected_total_len",
    "whitelist",
    "snapshot",
    "seed",
];

/// Flags shared by every subcommand.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// Config file with `key=value` lines; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Grid cell size in degrees.
    #[arg(long = "cell-size", global = true, value_name = "DEG")]
    pub cell_size_deg: Option<f64>,
    /// Grid extent as `lat_min,lat_max,lon_min,lon_max`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub extent: Option<String>,
    /// Summary backend: `tsum_plus` or `ringsum`.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Counters per term.
    #[arg(long, global = true)]
    pub m: Option<usize>,
    /// Number of rings.
    #[arg(long = "rings", global = true)]
    pub rings: Option<usize>,
    /// Ring ratio `r`.
    #[arg(long = "ratio", global = true)]
    pub ratio: Option<f64>,
    /// Radius of the outermost ring in km.
    #[arg(long = "max-radius-km", global = true)]
    pub max_radius_km: Option<f64>,
    /// Smallest ring radius in km.
    #[arg(long = "min-radius-km", global = true)]
    pub min_radius_km: Option<f64>,
    /// Ringsum update strategy: standard, fixed_center, light_update,
    /// proximity_aware.
    #[arg(long, global = true)]
    pub strategy: Option<String>,
    /// Fraction of the expected stream after which fixed_center freezes.
    #[arg(long, global = true)]
    pub theta: Option<f64>,
    /// Expected per-term stream length for fixed_center.
    #[arg(long = "expected-len", global = true)]
    pub expected_total_len: Option<u64>,
    /// File with one monitored term per line.
    #[arg(long, global = true)]
    pub whitelist: Option<PathBuf>,
    /// Snapshot directory.
    #[arg(long, global = true)]
    pub snapshot: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

/// Resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub grid: GridConfig,
    pub backend: Backend,
    pub m: usize,
    pub rings: usize,
    pub ratio: f64,
    pub max_radius_km: Option<f64>,
    pub min_radius_km: Option<f64>,
    pub strategy: Strategy,
    pub theta: f64,
    pub whitelist: Option<PathBuf>,
    pub snapshot: Option<PathBuf>,
    pub seed: u64,
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_file(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| CliError::Config(format!("line {}: expected key=value", i + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(CliError::Config(format!("line {}: unknown key {k:?}", i + 1)));
        }
        out.insert(k.to_owned(), v.trim().to_owned());
    }
    Ok(out)
}

fn pick<T: FromStr>(flag: Option<T>, file: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    file.get(key)
        .map(|v| v.parse::<T>().map_err(|_| CliError::Config(format!("invalid value {v:?} for {key}"))))
        .transpose()
}

fn parse_extent(s: &str) -> Result<[f64; 4], CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Config(format!("invalid extent {s:?}")))?;
    parts.try_into().map_err(|_| CliError::Config(format!("extent {s:?} needs lat_min,lat_max,lon_min,lon_max")))
}

impl CliConfig {
    pub fn resolve(args: &ConfigArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(p) => {
                parse_file(&fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?)?
            }
            None => BTreeMap::new(),
        };
        let cell = pick(args.cell_size_deg, &file, "cell_size_deg")?.unwrap_or(1.0);
        let [lat_min, lat_max, lon_min, lon_max] = match pick(args.extent.clone(), &file, "extent")? {
            Some(s) => parse_extent(&s)?,
            None => [-90.0, 90.0, -180.0, 180.0],
        };
        let grid = GridConfig::new(cell, lat_min, lat_max, lon_min, lon_max).map_err(CliError::from)?;
        let backend = match pick(args.backend.clone(), &file, "backend")? {
            Some(b) => Backend::parse(&b)?,
            None => Backend::Ringsum,
        };
        let m = pick(args.m, &file, "m")?.unwrap_or(backend.default_capacity());
        let rings = pick(args.rings, &file, "R")?.unwrap_or(10);
        let ratio = pick(args.ratio, &file, "r")?.unwrap_or(0.6);
        let theta = pick(args.theta, &file, "theta")?.unwrap_or(DEFAULT_FREEZE_FRACTION);
        let expected = pick(args.expected_total_len, &file, "expected_total_len")?.unwrap_or(0);
        let strategy = match pick(args.strategy.clone(), &file, "strategy")? {
            Some(s) => Strategy::parse(&s, theta, expected)?,
            None => Strategy::Standard,
        };
        let cfg = Self {
            grid,
            backend,
            m,
            rings,
            ratio,
            max_radius_km: pick(args.max_radius_km, &file, "D_km")?,
            min_radius_km: pick(args.min_radius_km, &file, "min_radius_km")?,
            strategy,
            theta,
            whitelist: pick(args.whitelist.clone(), &file, "whitelist")?,
            snapshot: pick(args.snapshot.clone(), &file, "snapshot")?,
            seed: pick(args.seed, &file, "seed")?.unwrap_or(0),
        };
        if cfg.m == 0 {
            return Err(CliError::Config("m must be positive".into()));
        }
        if cfg.backend == Backend::TsumPlus && cfg.strategy != Strategy::Standard {
            return Err(CliError::Config("update strategies apply to the ringsum backend only".into()));
        }
        cfg.registry_config(&Grid::new(cfg.grid.clone())).validate()?;
        Ok(cfg)
    }

    pub fn registry_config(&self, grid: &Grid) -> RegistryConfig {
        let mut rc = RegistryConfig::new(grid, self.backend);
        rc.capacity = self.m;
        rc.strategy = self.strategy;
        rc.rings.ratio = self.ratio;
        rc.rings.max_rings = self.rings;
        if let Some(d) = self.max_radius_km {
            rc.rings.max_radius_km = d;
        }
        if let Some(d) = self.min_radius_km {
            rc.rings.min_radius_km = d;
        }
        rc
    }

    pub fn snapshot(&self) -> Result<&Path, CliError> {
        self.snapshot.as_deref().ok_or_else(|| CliError::Usage("--snapshot is required".into()))
    }

    pub fn whitelist_terms(&self) -> Result<Option<Vec<String>>, CliError> {
        let Some(p) = &self.whitelist else { return Ok(None) };
        let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        Ok(Some(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_lowercase).collect()))
    }
}
