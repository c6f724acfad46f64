//! Power-law location model `p = C * d^-alpha`, its log-likelihood over the
//! full grid and over ring aggregates, and the maximum-likelihood fitter.
//!
//! Distances enter the model in units of `DistanceScale::unit_km`, which by
//! default is the representative distance of a center cell from itself, so
//! `C` is the probability at the center. A cell at distance zero (the center
//! itself) is placed at `DistanceScale::center_km`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{CellId, Grid, GridConfig};
use crate::optimize::{alternating_golden_max, AscentConfig};

/// Lower bound of the focus search.
pub const FOCUS_MIN: f64 = 1e-9;
/// Upper bound of the spread search.
pub const SPREAD_MAX: f64 = 10.0;
/// Probabilities are capped here inside `log(1 - p)`.
pub const P_CAP: f64 = 1.0 - 1e-12;
pub const FIT_TOLERANCE: f64 = 1e-6;
pub const MAX_SWEEPS: usize = 100;

/// Fitted model for one term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub center: CellId,
    /// `C`, the probability at unit distance.
    pub focus: f64,
    /// `alpha`, the decay exponent.
    pub spread: f64,
    pub log_lik: f64,
}

/// Maps kilometres to model distance units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceScale {
    pub unit_km: f64,
    pub center_km: f64,
}

impl DistanceScale {
    /// Unit and center distance both equal to half a cell diagonal.
    pub fn for_grid(cfg: &GridConfig) -> Self {
        let d = cfg.half_cell_diagonal_km();
        Self { unit_km: d, center_km: d }
    }

    /// Raw kilometres, with `center_km` for the center cell.
    pub fn kilometres(center_km: f64) -> Self {
        Self { unit_km: 1.0, center_km }
    }

    #[inline]
    pub fn units(&self, d_km: f64) -> f64 {
        let d = if d_km > 0.0 { d_km } else { self.center_km };
        d / self.unit_km
    }

    #[inline]
    pub fn log_units(&self, d_km: f64) -> f64 {
        self.units(d_km).ln()
    }
}

/// `clamp(C * d^-alpha, 0, 1)` for a distance in model units.
#[inline]
pub fn power_law(focus: f64, spread: f64, d_units: f64) -> f64 {
    (focus * d_units.powf(-spread)).clamp(0.0, 1.0)
}

#[inline]
fn ln_p(ln_focus: f64, spread: f64, log_d: f64) -> f64 {
    (ln_focus - spread * log_d).min(0.0)
}

/// `ln(1 - p)` with `p` capped at [`P_CAP`].
#[inline]
pub fn ln_one_minus(p: f64) -> f64 {
    (-p.min(P_CAP)).ln_1p()
}

impl ModelParams {
    pub fn probability_at(&self, grid: &Grid, scale: &DistanceScale, cell: CellId) -> f64 {
        power_law(self.focus, self.spread, scale.units(grid.great_circle_km(self.center, cell)))
    }

    /// `f_t * p(cell)`.
    pub fn expected_frequency(&self, grid: &Grid, scale: &DistanceScale, total: f64, cell: CellId) -> f64 {
        total.max(0.0) * self.probability_at(grid, scale, cell)
    }

    /// CSV row `term,center_cell,C,alpha,log_lik`.
    pub fn write_csv_row(&self, term: &str, w: &mut csv::Writer<impl Write>) -> Result<()> {
        w.serialize((term, self.center.0, self.focus, self.spread, self.log_lik))?;
        Ok(())
    }
}

pub const MODEL_CSV_HEADER: [&str; 5] = ["term", "center_cell", "C", "alpha", "log_lik"];

/// How many Bernoulli trials each cell contributes to the likelihood.
///
/// `PerCell` is one trial per cell: occurrences add `n log p` and every
/// cell without occurrences adds `log(1 - p)`. `TermTotal` gives every cell
/// `f_t` trials, so a cell with `n` occurrences also adds
/// `(f_t - n) log(1 - p)`; `p` is then the chance that a given occurrence of
/// the term lands in the cell, which is what `f_t * p` estimates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trials {
    PerCell,
    #[default]
    TermTotal,
}

impl Trials {
    #[inline]
    fn per_cell(self, total: f64) -> f64 {
        match self {
            Trials::PerCell => 1.0,
            Trials::TermTotal => total,
        }
    }
}

/// One cell of a likelihood evaluation: its distance from the center and
/// its occurrence count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellObservation {
    pub d_km: f64,
    pub count: f64,
}

/// Log-likelihood summed cell by cell.
pub fn full_log_likelihood(
    cells: &[CellObservation],
    scale: &DistanceScale,
    trials: Trials,
    focus: f64,
    spread: f64,
) -> f64 {
    let total: f64 = cells.iter().map(|c| c.count).sum();
    let tau = trials.per_cell(total);
    cells
        .iter()
        .map(|c| {
            let p = power_law(focus, spread, scale.units(c.d_km));
            let mut v = 0.0;
            if c.count > 0.0 {
                v += c.count * p.ln();
            }
            let negative = (tau - c.count).max(0.0);
            if negative > 0.0 {
                v += negative * ln_one_minus(p);
            }
            v
        })
        .sum()
}

/// Observations for every grid cell around `center`.
pub fn grid_observations(grid: &Grid, counts: &BTreeMap<CellId, u64>, center: CellId) -> Vec<CellObservation> {
    grid.config()
        .cells()
        .map(|c| CellObservation {
            d_km: grid.great_circle_km(center, c),
            count: counts.get(&c).copied().unwrap_or(0) as f64,
        })
        .collect()
}

/// Something that can be maximized over `(C, alpha)`.
pub trait Objective {
    fn log_likelihood(&self, focus: f64, spread: f64) -> f64;

    /// Occurrence-weighted mean of `ln d` in model units. The search over
    /// `ln C` follows this slope, along which the occurrence terms do not
    /// change with `alpha`.
    fn pivot_log_distance(&self) -> f64 {
        0.0
    }
}

/// Full-grid likelihood around one center, precompiled for repeated
/// evaluation. Cells are grouped into classes of identical distance (same
/// row, same absolute column offset), and occupied cells are applied as a
/// correction on top of an all-empty background.
#[derive(Clone, Debug)]
pub struct FullLikelihood {
    tau: f64,
    pivot: f64,
    background: Vec<(f64, f64)>,
    occupied: Vec<(f64, f64)>,
}

impl FullLikelihood {
    pub fn new(
        grid: &Grid,
        counts: &BTreeMap<CellId, u64>,
        center: CellId,
        scale: &DistanceScale,
        trials: Trials,
        total: f64,
    ) -> Self {
        let cfg = grid.config();
        let (ra, ca) = cfg.row_col(center);
        let cols = cfg.n_cols();
        let mut background = Vec::with_capacity(cfg.n_cells() / 2 + cfg.n_rows() as usize);
        for rb in 0..cfg.n_rows() {
            for dc in 0..cols {
                let mult = (dc <= ca) as u32 + (dc >= 1 && dc <= cols - 1 - ca) as u32;
                if mult == 0 {
                    continue;
                }
                let d = if rb == ra && dc == 0 { 0.0 } else { grid.row_offset_km(ra, rb, dc) };
                background.push((scale.log_units(d), mult as f64));
            }
        }
        let occupied: Vec<(f64, f64)> = counts
            .iter()
            .filter(|(_, n)| **n > 0)
            .map(|(c, n)| (scale.log_units(grid.great_circle_km(center, *c)), *n as f64))
            .collect();
        let pivot = weighted_mean(occupied.iter().copied());
        Self { tau: trials.per_cell(total), pivot, background, occupied }
    }
}

impl Objective for FullLikelihood {
    fn log_likelihood(&self, focus: f64, spread: f64) -> f64 {
        let ln_c = focus.ln();
        let mut empty = 0.0;
        for &(log_d, mult) in &self.background {
            let p = (ln_c - spread * log_d).exp();
            empty += mult * ln_one_minus(p);
        }
        let mut v = self.tau * empty;
        for &(log_d, n) in &self.occupied {
            let lp = ln_p(ln_c, spread, log_d);
            v += n * lp - n.min(self.tau) * ln_one_minus(lp.exp());
        }
        v
    }

    fn pivot_log_distance(&self) -> f64 {
        self.pivot
    }
}

fn weighted_mean(items: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut s, mut w) = (0.0, 0.0);
    for (x, n) in items {
        s += x * n;
        w += n;
    }
    if w > 0.0 {
        s / w
    } else {
        0.0
    }
}

/// Ring-aggregated inputs for one center.
#[derive(Clone, Debug, PartialEq)]
pub struct RingLikInput {
    /// Occurrences per ring.
    pub phi: Vec<f64>,
    /// Grid cells per ring.
    pub cells: Vec<f64>,
    /// Representative distance of each ring, km.
    pub d_exp_km: Vec<f64>,
    pub f_center: f64,
    /// Occurrences behind `f_center` and `phi`: the trial count of
    /// [`Trials::TermTotal`].
    pub total: f64,
    /// Occurrences of the term in the whole stream. [`RingLikelihood`]
    /// scales the log-likelihood by `stream_total / total` so that centers
    /// which observed different parts of the stream compare on one scale.
    pub stream_total: f64,
}

/// Ring-aggregated log-likelihood: one positive and one negative term per
/// ring plus the center cell. With [`Trials::PerCell`] the center only
/// contributes its occurrences.
pub fn ring_log_likelihood(
    input: &RingLikInput,
    scale: &DistanceScale,
    trials: Trials,
    focus: f64,
    spread: f64,
) -> f64 {
    let tau = trials.per_cell(input.total);
    let p0 = power_law(focus, spread, scale.units(0.0));
    let mut v = 0.0;
    if input.f_center > 0.0 {
        v += input.f_center * p0.ln();
    }
    let neg0 = match trials {
        Trials::PerCell => 0.0,
        Trials::TermTotal => (tau - input.f_center).max(0.0),
    };
    if neg0 > 0.0 {
        v += neg0 * ln_one_minus(p0);
    }
    for ((phi, cells), d) in input.phi.iter().zip(&input.cells).zip(&input.d_exp_km) {
        let p = power_law(focus, spread, scale.units(*d));
        if *phi > 0.0 {
            v += phi * p.ln();
        }
        let neg = (tau * cells - phi).max(0.0);
        if neg > 0.0 {
            v += neg * ln_one_minus(p);
        }
    }
    v
}

/// [`ring_log_likelihood`] bound to its inputs.
#[derive(Clone, Debug)]
pub struct RingLikelihood {
    pub input: RingLikInput,
    pub scale: DistanceScale,
    pub trials: Trials,
}

impl Objective for RingLikelihood {
    fn log_likelihood(&self, focus: f64, spread: f64) -> f64 {
        let v = ring_log_likelihood(&self.input, &self.scale, self.trials, focus, spread);
        if self.input.total > 0.0 && self.input.stream_total > 0.0 {
            v * (self.input.stream_total / self.input.total)
        } else {
            v
        }
    }

    fn pivot_log_distance(&self) -> f64 {
        let center = std::iter::once((self.scale.log_units(0.0), self.input.f_center));
        let rings = self.input.d_exp_km.iter().zip(&self.input.phi).map(|(d, phi)| (self.scale.log_units(*d), *phi));
        weighted_mean(center.chain(rings))
    }
}

impl<F: Fn(f64, f64) -> f64> Objective for F {
    fn log_likelihood(&self, focus: f64, spread: f64) -> f64 {
        self(focus, spread)
    }
}

/// Search settings for one center: `C` is searched on a log scale over
/// `[FOCUS_MIN, 1]`, `alpha` over `[0, SPREAD_MAX]`.
pub fn ascent_config(pivot: f64) -> AscentConfig {
    AscentConfig {
        x_bounds: (FOCUS_MIN.ln(), 0.0),
        y_bounds: (0.0, SPREAD_MAX),
        shear: pivot,
        y_start: 1.0,
        line_tol: FIT_TOLERANCE / 10.0,
        move_tol: FIT_TOLERANCE,
        max_sweeps: MAX_SWEEPS,
    }
}

/// Best `(C, alpha)` for a single center.
pub fn fit_center(center: CellId, objective: &impl Objective) -> Result<ModelParams> {
    let cfg = ascent_config(objective.pivot_log_distance());
    let r = alternating_golden_max(|ln_c, a| objective.log_likelihood(ln_c.exp(), a), &cfg);
    if !r.value.is_finite() {
        return Err(Error::FitFailure(format!("non-finite log-likelihood at center {center}")));
    }
    Ok(ModelParams { center, focus: r.x.exp(), spread: r.y, log_lik: r.value })
}

/// Fits every candidate center and keeps the one with the highest
/// likelihood (lower cell on ties). Objectives are built per candidate by
/// `make`, so only the ones in flight are held in memory.
pub fn fit<O, F>(candidates: &[CellId], make: F, exec: Execution) -> Result<ModelParams>
where
    O: Objective,
    F: Fn(CellId) -> O + Sync + Send,
{
    if candidates.is_empty() {
        return Err(Error::FitFailure("no candidate centers".into()));
    }
    let fits = exec.map(candidates, |&c| fit_center(c, &make(c)));
    let mut best: Option<ModelParams> = None;
    let mut last_err = None;
    for r in fits {
        match r {
            Ok(p) => {
                let better = match &best {
                    None => true,
                    Some(b) => p.log_lik > b.log_lik || (p.log_lik == b.log_lik && p.center < b.center),
                };
                if better {
                    best = Some(p);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one result"))
}
