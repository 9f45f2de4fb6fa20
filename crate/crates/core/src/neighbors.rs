//! Multi-echo neighbor search and feature encoding.
//!
//! Every echo of the ordered grid is a query. Candidates are the valid
//! strongest echoes (slot 0) inside a rows x cols grid window centered on the
//! query's cell; the window wraps around in azimuth and is cut off at the top
//! and bottom rows. In KNN mode the `k` candidates closest in 3D, and strictly
//! closer than the cutoff radius, are kept in ascending distance order (ties by
//! row, then column). In grid mode every window cell is a slot, in raster
//! order, irrespective of distance.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::cloud::{dist2, MultiEchoOrderedCloud};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Knn,
    GridNeighbors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Neighbors per query (KNN mode).
    pub k: usize,
    /// Cutoff radius in meters; only candidates strictly closer are kept.
    pub cutoff: f64,
    pub window_rows: usize,
    pub window_cols: usize,
    pub mode: SearchMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            k: 5,
            cutoff: 2.0,
            window_rows: 9,
            window_cols: 9,
            mode: SearchMode::Knn,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(Error::Config(format!("cutoff radius must be positive, got {}", self.cutoff)));
        }
        for (name, v) in [("window_rows", self.window_rows), ("window_cols", self.window_cols)] {
            if v == 0 || v % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd and >= 1, got {v}")));
            }
        }
        Ok(())
    }

    /// Neighbor slots per query.
    pub fn slots(&self) -> usize {
        match self.mode {
            SearchMode::Knn => self.k,
            SearchMode::GridNeighbors => self.window_rows * self.window_cols,
        }
    }
}

/// Distinct column offsets of a window of `cols` columns on a grid `width` wide.
fn column_offsets(cols: usize, width: usize) -> std::ops::Range<i64> {
    let span = cols.min(width) as i64;
    let start = -(span / 2);
    start..start + span
}

/// Cells of the search window around (h, w) in raster order. Rows outside the
/// grid are reported as `None`.
pub fn window_cells(
    h: usize,
    w: usize,
    height: usize,
    width: usize,
    rows: usize,
    cols: usize,
) -> impl Iterator<Item = Option<(usize, usize)>> {
    let half = (rows / 2) as i64;
    let (h, w, height, width) = (h as i64, w as i64, height as i64, width as i64);
    (-half..=half).flat_map(move |dh| {
        column_offsets(cols, width as usize).map(move |dw| {
            let r = h + dh;
            if r < 0 || r >= height {
                None
            } else {
                Some((r as usize, (w + dw).rem_euclid(width) as usize))
            }
        })
    })
}

/// One neighbor slot: the strongest echo at (row, col) and its distance to the query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborSlot {
    pub row: u32,
    pub col: u32,
    pub distance: f64,
    pub present: bool,
}

impl NeighborSlot {
    pub const ABSENT: NeighborSlot = NeighborSlot {
        row: 0,
        col: 0,
        distance: 0.0,
        present: false,
    };
}

/// Neighbor slots for every query of a cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    height: usize,
    width: usize,
    echoes: usize,
    slots: usize,
    cutoff: f64,
    data: Vec<NeighborSlot>,
}

impl NeighborSet {
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn echoes(&self) -> usize {
        self.echoes
    }
    pub fn slots(&self) -> usize {
        self.slots
    }
    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// Slots of query (h, w, e).
    #[inline]
    pub fn get(&self, h: usize, w: usize, e: usize) -> &[NeighborSlot] {
        let q = (h * self.width + w) * self.echoes + e;
        &self.data[q * self.slots..(q + 1) * self.slots]
    }

    /// True when `slot` is the query's own record (an echo-0 query matching its own cell).
    #[inline]
    pub fn is_self(&self, h: usize, w: usize, e: usize, slot: &NeighborSlot) -> bool {
        e == 0 && slot.present && slot.row as usize == h && slot.col as usize == w
    }
}

/// Gathers the neighbor slots of every echo of `cloud`.
pub fn gather_neighbors(cloud: &MultiEchoOrderedCloud, cfg: &EncoderConfig) -> Result<NeighborSet> {
    cfg.validate()?;
    let (height, width, echoes) = (cloud.height(), cloud.width(), cloud.echoes());
    let slots = cfg.slots();
    let per_cell = par::map_range(height * width, |cell| {
        let (h, w) = (cell / width, cell % width);
        let mut out = Vec::with_capacity(echoes * slots);
        for e in 0..echoes {
            let start = out.len();
            out.resize(start + slots, NeighborSlot::ABSENT);
            let q = cloud.get(h, w, e);
            if !q.valid {
                continue;
            }
            let buf = &mut out[start..];
            match cfg.mode {
                SearchMode::Knn => knn_query(cloud, cfg, h, w, e, buf),
                SearchMode::GridNeighbors => {
                    let cells = window_cells(h, w, height, width, cfg.window_rows, cfg.window_cols);
                    for (slot, cell) in buf.iter_mut().zip(cells) {
                        if let Some((r, c)) = cell {
                            let p = cloud.get(r, c, 0);
                            if p.valid {
                                *slot = NeighborSlot {
                                    row: r as u32,
                                    col: c as u32,
                                    distance: dist2(q, p).sqrt(),
                                    present: true,
                                };
                            }
                        }
                    }
                }
            }
        }
        out
    });
    Ok(NeighborSet {
        height,
        width,
        echoes,
        slots,
        cutoff: cfg.cutoff,
        data: per_cell.into_iter().flatten().collect(),
    })
}

fn knn_query(
    cloud: &MultiEchoOrderedCloud,
    cfg: &EncoderConfig,
    h: usize,
    w: usize,
    e: usize,
    out: &mut [NeighborSlot],
) {
    let q = cloud.get(h, w, e);
    let k = out.len();
    let mut filled = 0usize;
    let before = |a: &NeighborSlot, b: &NeighborSlot| (a.distance, a.row, a.col) < (b.distance, b.row, b.col);
    for (r, c) in window_cells(h, w, cloud.height(), cloud.width(), cfg.window_rows, cfg.window_cols).flatten() {
        let p = cloud.get(r, c, 0);
        if !p.valid {
            continue;
        }
        let d = dist2(q, p).sqrt();
        if d >= cfg.cutoff {
            continue;
        }
        let cand = NeighborSlot {
            row: r as u32,
            col: c as u32,
            distance: d,
            present: true,
        };
        if filled == k && !before(&cand, &out[k - 1]) {
            continue;
        }
        // Insertion into the sorted prefix.
        let mut i = filled.min(k - 1);
        out[i] = cand;
        while i > 0 && before(&out[i], &out[i - 1]) {
            out.swap(i, i - 1);
            i -= 1;
        }
        filled = (filled + 1).min(k);
    }
}

/// Distance from each query to its nearest neighbor other than itself.
///
/// Queries without such a neighbor get the cutoff radius. The self match of an
/// echo-0 query (its own cell) is skipped.
pub fn nearest_distance(neighbors: &NeighborSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(neighbors.height * neighbors.width * neighbors.echoes);
    for h in 0..neighbors.height {
        for w in 0..neighbors.width {
            for e in 0..neighbors.echoes {
                let nearest = neighbors
                    .get(h, w, e)
                    .iter()
                    .filter(|s| s.present && !neighbors.is_self(h, w, e, s))
                    .map(|s| s.distance)
                    .fold(f64::INFINITY, f64::min);
                out.push(if nearest.is_finite() { nearest } else { neighbors.cutoff });
            }
        }
    }
    out
}

/// Wraps an angle difference into (-pi, pi].
#[inline]
pub fn wrap_angle(d: f64) -> f64 {
    let r = d.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Sentinel for absent slots in [`FeatureTensor::source`].
pub const NO_SOURCE: u32 = u32::MAX;

/// Encoded neighbor features, one vector of `echoes * slots * 3` values per cell.
///
/// Layout per cell is echo-major, then neighbor rank, then
/// (neighbor range, query azimuth - neighbor azimuth, query elevation - neighbor elevation).
/// Absent slots are zero and masked out in `present`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub height: usize,
    pub width: usize,
    pub echoes: usize,
    pub slots: usize,
    /// H*W*Ne*slots*3 values.
    pub data: Vec<f64>,
    /// H*W*Ne*slots presence flags.
    pub present: Vec<bool>,
    /// Flat cell index (h * W + w) of the strongest echo behind each slot.
    pub source: Vec<u32>,
}

impl FeatureTensor {
    /// Features per cell.
    pub fn channels(&self) -> usize {
        self.echoes * self.slots * 3
    }

    #[inline]
    pub fn slot_index(&self, h: usize, w: usize, e: usize, s: usize) -> usize {
        ((h * self.width + w) * self.echoes + e) * self.slots + s
    }

    /// (range, d_azimuth, d_elevation) of one slot.
    pub fn triple(&self, h: usize, w: usize, e: usize, s: usize) -> [f64; 3] {
        let i = self.slot_index(h, w, e, s) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Copy with every slot referencing a cell in `hidden` zeroed and unmasked.
    pub fn without_sources(&self, hidden: &[bool]) -> FeatureTensor {
        let mut out = self.clone();
        for (i, src) in self.source.iter().enumerate() {
            if *src != NO_SOURCE && hidden[*src as usize] {
                out.present[i] = false;
                out.source[i] = NO_SOURCE;
                out.data[i * 3..i * 3 + 3].fill(0.0);
            }
        }
        out
    }
}

/// Encodes gathered neighbors as range and angle-offset features.
pub fn encode_features(cloud: &MultiEchoOrderedCloud, neighbors: &NeighborSet) -> Result<FeatureTensor> {
    if (cloud.height(), cloud.width(), cloud.echoes())
        != (neighbors.height, neighbors.width, neighbors.echoes)
    {
        return Err(Error::Shape("neighbor set does not belong to this cloud".into()));
    }
    let (height, width, echoes, slots) = (cloud.height(), cloud.width(), cloud.echoes(), neighbors.slots);
    let n = height * width * echoes * slots;
    let mut data = vec![0.0; n * 3];
    let mut present = vec![false; n];
    let mut source = vec![NO_SOURCE; n];
    let mut i = 0;
    for h in 0..height {
        for w in 0..width {
            let (qa, qe) = (cloud.azimuth(h, w), cloud.elevation(h, w));
            for e in 0..echoes {
                for slot in neighbors.get(h, w, e) {
                    if slot.present {
                        let (r, c) = (slot.row as usize, slot.col as usize);
                        data[i * 3] = cloud.range(r, c, 0);
                        data[i * 3 + 1] = wrap_angle(qa - cloud.azimuth(r, c));
                        data[i * 3 + 2] = qe - cloud.elevation(r, c);
                        present[i] = true;
                        source[i] = (r * width + c) as u32;
                    }
                    i += 1;
                }
            }
        }
    }
    Ok(FeatureTensor {
        height,
        width,
        echoes,
        slots,
        data,
        present,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointRecord;

    fn line_cloud() -> MultiEchoOrderedCloud {
        let cells = vec![
            PointRecord::new(5.0, 0.0, 0.0, 0.5),
            PointRecord::new(6.0, 0.0, 0.0, 0.5),
            PointRecord::new(20.0, 0.0, 0.0, 0.5),
        ];
        MultiEchoOrderedCloud::new(1, 3, 1, cells, vec![[0.1, 0.0], [0.0, 0.0], [-0.1, 0.0]]).unwrap()
    }

    fn cfg(k: usize, cutoff: f64, rows: usize, cols: usize) -> EncoderConfig {
        EncoderConfig {
            k,
            cutoff,
            window_rows: rows,
            window_cols: cols,
            mode: SearchMode::Knn,
        }
    }

    #[test]
    fn colinear_points() {
        let c = line_cloud();
        let n = gather_neighbors(&c, &cfg(2, 3.0, 1, 3)).unwrap();
        let q = n.get(0, 0, 0);
        // Self first at distance 0, then x = 6; x = 20 is beyond the cutoff.
        assert!(q[0].present && q[0].distance == 0.0 && q[0].col == 0);
        assert!(q[1].present && q[1].distance == 1.0 && q[1].col == 1);
        let nn = nearest_distance(&n);
        assert_eq!(nn[0], 1.0);
        assert_eq!(nn[2], 3.0);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0, 1.0, 3, 3).validate().is_err());
        assert!(cfg(1, 0.0, 3, 3).validate().is_err());
        assert!(cfg(1, 1.0, 2, 3).validate().is_err());
        assert!(cfg(1, 1.0, 3, 4).validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }

    #[test]
    fn self_slot_encodes_zero_offsets() {
        let c = line_cloud();
        let n = gather_neighbors(&c, &cfg(2, 3.0, 1, 3)).unwrap();
        let f = encode_features(&c, &n).unwrap();
        assert_eq!(f.triple(0, 0, 0, 0), [5.0, 0.0, 0.0]);
        let east = f.triple(0, 0, 0, 1);
        assert_eq!(east[0], 6.0);
        assert!((east[1] - 0.1).abs() < 1e-7);
        // Absent slot of the far point is zero and masked.
        assert_eq!(f.triple(0, 2, 0, 1), [0.0; 3]);
        assert!(!f.present[f.slot_index(0, 2, 0, 1)]);
    }

    #[test]
    fn angle_wrap() {
        let d = wrap_angle(3.1 - (-3.1));
        assert!((d - (6.2 - TAU)).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(0.25) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn window_wraps_columns_and_cuts_rows() {
        let cells: Vec<_> = window_cells(0, 0, 4, 8, 3, 3).collect();
        assert_eq!(cells.len(), 9);
        assert_eq!(cells[..3], [None, None, None]);
        assert_eq!(cells[3], Some((0, 7)));
        assert_eq!(cells[5], Some((0, 1)));
        // A window wider than the grid visits every column once.
        let wide: Vec<_> = window_cells(0, 1, 1, 3, 1, 9).flatten().collect();
        assert_eq!(wide.len(), 3);
    }

    #[test]
    fn grid_mode_ignores_distance() {
        let c = line_cloud();
        let mut g = cfg(1, 0.5, 1, 3);
        g.mode = SearchMode::GridNeighbors;
        let n = gather_neighbors(&c, &g).unwrap();
        assert_eq!(n.slots(), 3);
        let cols: Vec<_> = n.get(0, 1, 0).iter().map(|s| (s.present, s.col)).collect();
        assert_eq!(cols, vec![(true, 0), (true, 1), (true, 2)]);
    }

    #[test]
    fn hidden_sources_are_zeroed() {
        let c = line_cloud();
        let n = gather_neighbors(&c, &cfg(2, 3.0, 1, 3)).unwrap();
        let f = encode_features(&c, &n).unwrap();
        let blind = f.without_sources(&[true, false, false]);
        assert_eq!(blind.triple(0, 0, 0, 0), [0.0; 3]);
        assert!(!blind.present[blind.slot_index(0, 0, 0, 0)]);
        // Query at x = 6 loses its neighbor x = 5 as well.
        let s = (0..2).find(|&s| f.source[f.slot_index(0, 1, 0, s)] == 0).unwrap();
        assert!(!blind.present[blind.slot_index(0, 1, 0, s)]);
        assert_ne!(blind, f);
    }
}
