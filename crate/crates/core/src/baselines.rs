//! Radius-outlier-removal baselines: DROR, LIOR and the multi-echo MEDROR.
//!
//! Each produces a [`ScoreMap`] of 0 (inlier) and 1 (outlier) so the result
//! goes through the same decision rule as the learned scores. Neighbors are
//! always the valid strongest echoes of other cells inside a grid window
//! around the query (wrapping in azimuth), counted within a search radius.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::cloud::{dist2, MultiEchoOrderedCloud, PointRecord};
use crate::error::{Error, Result};
use crate::inference::ScoreMap;
use crate::neighbors::window_cells;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrorConfig {
    /// Multiplier on range times horizontal angular resolution.
    pub beta: f64,
    pub min_neighbors: usize,
    /// Lower bound on the search radius, meters.
    pub min_radius: f64,
    pub window_rows: usize,
    pub window_cols: usize,
}

impl Default for DrorConfig {
    fn default() -> Self {
        DrorConfig {
            beta: 3.0,
            min_neighbors: 3,
            min_radius: 0.04,
            window_rows: 11,
            window_cols: 11,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiorConfig {
    /// Echoes at or above this intensity are always kept.
    pub intensity_threshold: f64,
    /// Fixed search radius, meters.
    pub radius: f64,
    pub min_neighbors: usize,
    pub window_rows: usize,
    pub window_cols: usize,
}

impl Default for LiorConfig {
    fn default() -> Self {
        LiorConfig {
            intensity_threshold: 0.1,
            radius: 0.5,
            min_neighbors: 3,
            window_rows: 11,
            window_cols: 11,
        }
    }
}

fn check_window(rows: usize, cols: usize) -> Result<()> {
    if rows.is_multiple_of(2) || cols.is_multiple_of(2) || rows == 0 || cols == 0 {
        return Err(Error::Config(format!("search window {rows}x{cols} must have odd positive sides")));
    }
    Ok(())
}

impl DrorConfig {
    pub fn validate(&self) -> Result<()> {
        check_window(self.window_rows, self.window_cols)?;
        if !(self.beta > 0.0 && self.min_radius >= 0.0 && self.beta.is_finite() && self.min_radius.is_finite()) {
            return Err(Error::Config("DROR needs beta > 0 and min_radius >= 0".into()));
        }
        Ok(())
    }

    /// Search radius around an echo at range `r` on a grid `width` columns wide.
    pub fn radius(&self, r: f64, width: usize) -> f64 {
        (self.beta * (TAU / width as f64) * r).max(self.min_radius)
    }
}

impl LiorConfig {
    pub fn validate(&self) -> Result<()> {
        check_window(self.window_rows, self.window_cols)?;
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config("LIOR radius must be positive".into()));
        }
        Ok(())
    }
}

/// Valid strongest echoes of other cells within `radius` of `p`, counting at most `stop`.
fn count_within(
    cloud: &MultiEchoOrderedCloud,
    h: usize,
    w: usize,
    p: &PointRecord,
    radius: f64,
    rows: usize,
    cols: usize,
    skip_own: bool,
    stop: usize,
) -> usize {
    let r2 = radius * radius;
    let mut n = 0;
    for (r, c) in window_cells(h, w, cloud.height(), cloud.width(), rows, cols).flatten() {
        if skip_own && (r, c) == (h, w) {
            continue;
        }
        let q = cloud.get(r, c, 0);
        if q.valid && dist2(p, q) <= r2 {
            n += 1;
            if n >= stop {
                break;
            }
        }
    }
    n
}

fn binary_scores(cloud: &MultiEchoOrderedCloud, outlier: impl Fn(usize, usize, usize) -> bool + Sync) -> Result<ScoreMap> {
    let (width, ne) = (cloud.width(), cloud.echoes());
    let scores = par::map_range(cloud.len(), |i| {
        let (cell, e) = (i / ne, i % ne);
        let (h, w) = (cell / width, cell % width);
        if !cloud.records()[i].valid {
            0.0
        } else if outlier(h, w, e) {
            1.0
        } else {
            0.0
        }
    });
    ScoreMap::new(cloud.height(), width, ne, scores)
}

/// Dynamic radius outlier removal on the strongest echoes. Later echoes are
/// always scored as outliers.
pub fn dror(cloud: &MultiEchoOrderedCloud, cfg: &DrorConfig) -> Result<ScoreMap> {
    cfg.validate()?;
    binary_scores(cloud, |h, w, e| {
        if e > 0 {
            return true;
        }
        let p = cloud.get(h, w, 0);
        let radius = cfg.radius(p.range(), cloud.width());
        count_within(cloud, h, w, p, radius, cfg.window_rows, cfg.window_cols, true, cfg.min_neighbors)
            < cfg.min_neighbors
    })
}

/// Low-intensity outlier removal on the strongest echoes: an echo is removed
/// when it is dim and has too few neighbors within the fixed radius. Later
/// echoes are always scored as outliers.
pub fn lior(cloud: &MultiEchoOrderedCloud, cfg: &LiorConfig) -> Result<ScoreMap> {
    cfg.validate()?;
    binary_scores(cloud, |h, w, e| {
        if e > 0 {
            return true;
        }
        let p = cloud.get(h, w, 0);
        (p.intensity as f64) < cfg.intensity_threshold
            && count_within(cloud, h, w, p, cfg.radius, cfg.window_rows, cfg.window_cols, true, cfg.min_neighbors)
                < cfg.min_neighbors
    })
}

/// Multi-echo DROR: every echo is tested against the strongest echoes around
/// it with a radius from its own range. A later echo may count its own cell's
/// strongest echo as a neighbor; the strongest echo may not.
pub fn medror(cloud: &MultiEchoOrderedCloud, cfg: &DrorConfig) -> Result<ScoreMap> {
    cfg.validate()?;
    binary_scores(cloud, |h, w, e| {
        let p = cloud.get(h, w, e);
        let radius = cfg.radius(p.range(), cloud.width());
        count_within(cloud, h, w, p, radius, cfg.window_rows, cfg.window_cols, e == 0, cfg.min_neighbors)
            < cfg.min_neighbors
    })
}
