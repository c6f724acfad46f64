//! Distance bands around a center and the planar annulus geometry used to
//! move ring mass from an evicted center to its replacement.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellId, Grid};

/// Strictly increasing outer radii `d_1 < ... < d_R`; ring `i` is the
/// half-open band `(d_{i-1}, d_i]` with `d_0 = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    radii_km: Vec<f64>,
}

impl RingSpec {
    pub fn new(radii_km: Vec<f64>) -> Result<Self> {
        if radii_km.is_empty() {
            return Err(Error::InvalidSpec("at least one ring is required".into()));
        }
        if radii_km.len() > 254 {
            return Err(Error::InvalidSpec("at most 254 rings are supported".into()));
        }
        if !radii_km.iter().all(|r| r.is_finite() && *r > 0.0) {
            return Err(Error::InvalidSpec("radii must be finite and positive".into()));
        }
        if radii_km.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec("radii must be strictly increasing".into()));
        }
        Ok(Self { radii_km })
    }

    /// Geometric rings `D, rD, r^2 D, ...`, kept while the radius is at least
    /// `min_radius_km` and at most `max_rings` are taken.
    pub fn geometric(ratio: f64, max_radius_km: f64, min_radius_km: f64, max_rings: usize) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::InvalidSpec(format!("ratio {ratio} must lie in (0, 1)")));
        }
        if !(min_radius_km > 0.0 && max_radius_km > min_radius_km) || !max_radius_km.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "need 0 < min radius ({min_radius_km}) < max radius ({max_radius_km})"
            )));
        }
        if max_rings == 0 {
            return Err(Error::InvalidSpec("max_rings must be at least 1".into()));
        }
        let mut radii: Vec<f64> =
            (0..max_rings as i32).map(|k| max_radius_km * ratio.powi(k)).take_while(|r| *r >= min_radius_km).collect();
        radii.reverse();
        Self::new(radii)
    }

    pub fn radii_km(&self) -> &[f64] {
        &self.radii_km
    }

    pub fn len(&self) -> usize {
        self.radii_km.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii_km.is_empty()
    }

    pub fn max_radius_km(&self) -> f64 {
        *self.radii_km.last().expect("non-empty")
    }

    pub fn first_radius_km(&self) -> f64 {
        self.radii_km[0]
    }

    /// Inner and outer radius of ring `i` (0-based).
    pub fn bounds(&self, i: usize) -> (f64, f64) {
        let inner = if i == 0 { 0.0 } else { self.radii_km[i - 1] };
        (inner, self.radii_km[i])
    }

    /// Midpoint distance `(d_{i-1} + d_i) / 2` of ring `i`.
    pub fn midpoint_km(&self, i: usize) -> f64 {
        let (a, b) = self.bounds(i);
        (a + b) / 2.0
    }

    /// 0-based ring containing distance `d_km`, or `None` at the center
    /// itself (`d = 0`) and beyond the outermost radius.
    #[inline]
    pub fn ring_index(&self, d_km: f64) -> Option<usize> {
        if d_km.is_nan() || d_km <= 0.0 || d_km > self.max_radius_km() {
            return None;
        }
        Some(self.radii_km.partition_point(|r| *r < d_km))
    }

    /// Planar area of ring `i`.
    pub fn ring_area(&self, i: usize) -> f64 {
        let (a, b) = self.bounds(i);
        PI * (b * b - a * a)
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.radii_km.len() + 4);
        out.extend_from_slice(&(self.radii_km.len() as u32).to_le_bytes());
        for r in &self.radii_km {
            out.extend_from_slice(&r.to_bits().to_le_bytes());
        }
        out
    }
}

/// Area of the intersection of two disks with radii `r1`, `r2` whose centers
/// are `sep` apart.
pub fn disk_overlap(r1: f64, r2: f64, sep: f64) -> f64 {
    if r1 <= 0.0 || r2 <= 0.0 || sep >= r1 + r2 {
        return 0.0;
    }
    let small = r1.min(r2);
    if sep <= (r1 - r2).abs() {
        return PI * small * small;
    }
    let a1 = ((sep * sep + r1 * r1 - r2 * r2) / (2.0 * sep * r1)).clamp(-1.0, 1.0).acos();
    let a2 = ((sep * sep + r2 * r2 - r1 * r1) / (2.0 * sep * r2)).clamp(-1.0, 1.0).acos();
    let k = (-sep + r1 + r2) * (sep + r1 - r2) * (sep - r1 + r2) * (sep + r1 + r2);
    let area = r1 * r1 * a1 + r2 * r2 * a2 - 0.5 * k.max(0.0).sqrt();
    area.clamp(0.0, PI * small * small)
}

/// Intersection area of annuli `inner1 < |x| <= outer1` and
/// `inner2 < |x - c| <= outer2` with `|c| = sep`, on the plane.
pub fn annulus_overlap(sep: f64, inner1: f64, outer1: f64, inner2: f64, outer2: f64) -> f64 {
    let area =
        disk_overlap(outer1, outer2, sep) - disk_overlap(outer1, inner2, sep) - disk_overlap(inner1, outer2, sep)
            + disk_overlap(inner1, inner2, sep);
    area.max(0.0)
}

/// Annulus intersection for two cell centers, using the great-circle
/// separation as the distance on the local tangent plane.
pub fn annulus_intersection_area(
    grid: &Grid,
    center1: CellId,
    (inner1, outer1): (f64, f64),
    center2: CellId,
    (inner2, outer2): (f64, f64),
) -> f64 {
    annulus_overlap(grid.great_circle_km(center1, center2), inner1, outer1, inner2, outer2)
}

/// Fraction matrix `w[i][k] = area(new ring i ∩ old ring k) / area(old ring k)`
/// for two centers `sep` km apart sharing the same ring radii.
pub fn transfer_weights(spec: &RingSpec, sep: f64) -> Vec<Vec<f64>> {
    let r = spec.len();
    // Disk overlaps for every radius pair, index 0 standing for radius 0.
    let mut radii = Vec::with_capacity(r + 1);
    radii.push(0.0);
    radii.extend_from_slice(spec.radii_km());
    let mut disks = vec![vec![0.0; r + 1]; r + 1];
    for a in 1..=r {
        for b in a..=r {
            let v = disk_overlap(radii[a], radii[b], sep);
            disks[a][b] = v;
            disks[b][a] = v;
        }
    }
    (1..=r)
        .map(|i| {
            (1..=r)
                .map(|k| {
                    let overlap = disks[i][k] - disks[i][k - 1] - disks[i - 1][k] + disks[i - 1][k - 1];
                    (overlap.max(0.0) / spec.ring_area(k - 1)).min(1.0)
                })
                .collect()
        })
        .collect()
}

/// Moves ring mass from an old center to a new one `sep` km away, assuming
/// occurrences are spread uniformly inside each old ring.
pub fn transfer_rings(spec: &RingSpec, sep: f64, old_phi: &[f64]) -> Vec<f64> {
    let w = transfer_weights(spec, sep);
    w.iter().map(|row| row.iter().zip(old_phi).map(|(w, p)| w * p).sum()).collect()
}
