//! Spherical projection of unordered echo lists into the ordered grid, and the
//! strongest + last (or second strongest) echo-group assembly.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::cloud::{MultiEchoOrderedCloud, PointRecord};
use crate::error::{Error, Result};

/// Echoes closer than this (per axis, meters) count as the same return.
pub const DUPLICATE_TOLERANCE: f64 = 1e-6;

/// Echo slots produced by [`assemble_2p5`].
pub const ECHOES_2P5: usize = 2;

/// Which return of a pulse an echo is, as reported by the sensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EchoKind {
    Strongest = 0,
    SecondStrongest = 1,
    Last = 2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawEcho {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
    pub pulse_id: u64,
    pub kind: EchoKind,
}

impl RawEcho {
    fn record(&self) -> PointRecord {
        PointRecord::new(self.x, self.y, self.z, self.intensity)
    }
}

/// Grid size and vertical field of view of the projection.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    /// Upper edge of the vertical field of view, radians.
    pub fov_up: f64,
    /// Lower edge of the vertical field of view, radians.
    pub fov_down: f64,
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("projection grid must be at least 1x1".into()));
        }
        if !(self.fov_up.is_finite() && self.fov_down.is_finite()) || self.fov_up <= self.fov_down {
            return Err(Error::Config(format!(
                "fov_up ({}) must exceed fov_down ({})",
                self.fov_up, self.fov_down
            )));
        }
        Ok(())
    }

    /// Grid cell hit by a beam through (x, y, z).
    pub fn cell_of(&self, x: f64, y: f64, z: f64) -> (usize, usize) {
        let r = (x * x + y * y + z * z).sqrt();
        let azimuth = y.atan2(x);
        let elevation = (z / r).clamp(-1.0, 1.0).asin();
        self.cell_of_angles(azimuth, elevation)
    }

    pub fn cell_of_angles(&self, azimuth: f64, elevation: f64) -> (usize, usize) {
        let span = self.fov_up - self.fov_down;
        let hf = ((1.0 - (elevation - self.fov_down) / span) * self.height as f64).floor();
        let h = hf.clamp(0.0, (self.height - 1) as f64) as usize;
        let wf = ((1.0 - azimuth / PI) / 2.0 * self.width as f64).floor();
        let w = (wf as i64).rem_euclid(self.width as i64) as usize;
        (h, w)
    }

    /// Beam angles (azimuth, elevation) through the center of cell (h, w).
    pub fn cell_center(&self, h: usize, w: usize) -> (f64, f64) {
        let azimuth = PI * (1.0 - 2.0 * (w as f64 + 0.5) / self.width as f64);
        let elevation =
            self.fov_down + (1.0 - (h as f64 + 0.5) / self.height as f64) * (self.fov_up - self.fov_down);
        (azimuth, elevation)
    }

    /// Cell-center angles for the whole grid, row-major.
    pub fn center_angles(&self) -> Vec<[f32; 2]> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for h in 0..self.height {
            for w in 0..self.width {
                let (a, e) = self.cell_center(h, w);
                out.push([a as f32, e as f32]);
            }
        }
        out
    }
}

fn coincident(a: &PointRecord, b: &PointRecord) -> bool {
    (a.x as f64 - b.x as f64).abs() <= DUPLICATE_TOLERANCE
        && (a.y as f64 - b.y as f64).abs() <= DUPLICATE_TOLERANCE
        && (a.z as f64 - b.z as f64).abs() <= DUPLICATE_TOLERANCE
}

/// Builds a two-slot echo group: the strongest echo, then the last echo unless
/// it repeats the strongest one, in which case the second strongest is used.
/// Slot 1 stays empty when no distinct alternative exists.
pub fn assemble_2p5(
    strongest: PointRecord,
    second: Option<PointRecord>,
    last: Option<PointRecord>,
) -> [PointRecord; 2] {
    let alternative = [last, second]
        .into_iter()
        .flatten()
        .find(|p| p.valid && !coincident(p, &strongest));
    [strongest, alternative.unwrap_or(PointRecord::EMPTY)]
}

/// Projects a list of echoes into a two-echo ordered cloud.
///
/// Pulses are placed in `pulse_id` order; when two pulses fall into one cell
/// the one whose strongest echo is nearer wins (lower id on equal range).
/// An empty list yields an all-empty cloud.
pub fn project(points: &[RawEcho], cfg: &ProjectionConfig) -> Result<MultiEchoOrderedCloud> {
    cfg.validate()?;
    let mut pulses: BTreeMap<u64, [Option<RawEcho>; 3]> = BTreeMap::new();
    for p in points {
        let r2 = p.x as f64 * p.x as f64 + p.y as f64 * p.y as f64 + p.z as f64 * p.z as f64;
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) || r2 <= 0.0 {
            return Err(Error::Invariant(format!(
                "echo of pulse {} needs finite coordinates and positive range",
                p.pulse_id
            )));
        }
        let slot = &mut pulses.entry(p.pulse_id).or_default()[p.kind as usize];
        if slot.is_some() {
            return Err(Error::Invariant(format!(
                "pulse {} has two {:?} echoes",
                p.pulse_id, p.kind
            )));
        }
        *slot = Some(*p);
    }

    let (height, width) = (cfg.height, cfg.width);
    let mut cells = vec![PointRecord::EMPTY; height * width * ECHOES_2P5];
    let mut angles = cfg.center_angles();
    // Range of the strongest echo currently occupying each cell.
    let mut occupant: Vec<Option<f64>> = vec![None; height * width];

    for (id, echoes) in &pulses {
        let strongest = echoes[EchoKind::Strongest as usize]
            .ok_or_else(|| Error::Invariant(format!("pulse {id} has no strongest echo")))?;
        let s = strongest.record();
        let group = assemble_2p5(
            s,
            echoes[EchoKind::SecondStrongest as usize].map(|e| e.record()),
            echoes[EchoKind::Last as usize].map(|e| e.record()),
        );
        let range = s.range();
        let (x, y, z) = (s.x as f64, s.y as f64, s.z as f64);
        let (h, w) = cfg.cell_of(x, y, z);
        let cell = h * width + w;
        if matches!(occupant[cell], Some(r) if r <= range) {
            continue;
        }
        occupant[cell] = Some(range);
        // Slot 0 must carry the highest intensity; on ties the sensor's own
        // ranking (strongest before the alternative) is kept.
        let ordered = if group[1].valid && group[1].intensity > group[0].intensity {
            [group[1], group[0]]
        } else {
            group
        };
        cells[cell * ECHOES_2P5..(cell + 1) * ECHOES_2P5].copy_from_slice(&ordered);
        angles[cell] = [y.atan2(x) as f32, (z / range).clamp(-1.0, 1.0).asin() as f32];
    }
    MultiEchoOrderedCloud::new(height, width, ECHOES_2P5, cells, angles)
}

/// Echo list of an ordered cloud: slot 0 as the strongest echo, slot 1 as the
/// last echo, one pulse id per cell.
pub fn unproject(cloud: &MultiEchoOrderedCloud) -> Vec<RawEcho> {
    let mut out = Vec::new();
    for h in 0..cloud.height() {
        for w in 0..cloud.width() {
            let id = (h * cloud.width() + w) as u64;
            for (e, p) in cloud.group(h, w).iter().enumerate().take(2) {
                if p.valid {
                    out.push(RawEcho {
                        x: p.x,
                        y: p.y,
                        z: p.z,
                        intensity: p.intensity,
                        pulse_id: id,
                        kind: if e == 0 { EchoKind::Strongest } else { EchoKind::Last },
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn echo(x: f32, y: f32, z: f32, i: f32, id: u64, kind: EchoKind) -> RawEcho {
        RawEcho {
            x,
            y,
            z,
            intensity: i,
            pulse_id: id,
            kind,
        }
    }

    fn cfg() -> ProjectionConfig {
        ProjectionConfig {
            height: 4,
            width: 8,
            fov_up: 0.2,
            fov_down: -0.2,
        }
    }

    #[test]
    fn forward_point_lands_in_center() {
        let c = project(&[echo(10.0, 0.0, 0.0, 0.5, 0, EchoKind::Strongest)], &cfg()).unwrap();
        assert!(c.get(2, 4, 0).valid);
        assert_eq!(c.valid_count(), 1);
    }

    #[test]
    fn echoes_of_one_pulse_share_a_cell() {
        let pts = [
            echo(5.0, 0.0, 0.0, 0.8, 7, EchoKind::Strongest),
            echo(9.0, 0.0, 0.0, 0.3, 7, EchoKind::Last),
        ];
        let c = project(&pts, &cfg()).unwrap();
        assert_eq!(c.range(2, 4, 0), 5.0);
        assert_eq!(c.range(2, 4, 1), 9.0);
    }

    #[test]
    fn nearer_pulse_wins_collision() {
        let pts = [
            echo(9.0, 0.0, 0.0, 0.5, 1, EchoKind::Strongest),
            echo(5.0, 0.0, 0.0, 0.5, 2, EchoKind::Strongest),
        ];
        let c = project(&pts, &cfg()).unwrap();
        assert_eq!(c.range(2, 4, 0), 5.0);
        assert_eq!(c.valid_count(), 1);
    }

    #[test]
    fn empty_input_gives_empty_cloud() {
        let c = project(&[], &cfg()).unwrap();
        assert!(c.is_empty());
        assert_eq!((c.height(), c.width(), c.echoes()), (4, 8, 2));
    }

    #[test]
    fn bad_fov_is_config_error() {
        let mut bad = cfg();
        bad.fov_up = -0.3;
        assert!(matches!(project(&[], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_kind_rejected() {
        let pts = [
            echo(5.0, 0.0, 0.0, 0.5, 1, EchoKind::Last),
            echo(6.0, 0.0, 0.0, 0.5, 1, EchoKind::Last),
        ];
        assert!(project(&pts, &cfg()).is_err());
    }

    #[test]
    fn assembly_cases() {
        let s = PointRecord::new(5.0, 0.0, 0.0, 0.9);
        let l = PointRecord::new(9.0, 0.0, 0.0, 0.2);
        assert_eq!(assemble_2p5(s, None, Some(l)), [s, l]);
        let second = PointRecord::new(7.0, 0.0, 0.0, 0.4);
        let same = PointRecord::new(5.0, 0.0, 0.0, 0.9);
        assert_eq!(assemble_2p5(s, Some(second), Some(same)), [s, second]);
        assert_eq!(assemble_2p5(s, None, None), [s, PointRecord::EMPTY]);
        assert_eq!(assemble_2p5(s, None, Some(same)), [s, PointRecord::EMPTY]);
    }

    #[test]
    fn wraparound_column_edges() {
        let c = cfg();
        assert_eq!(c.cell_of_angles(PI, 0.0).1, 0);
        assert_eq!(c.cell_of_angles(-PI, 0.0).1, 0);
        assert_eq!(c.cell_of_angles(0.0, 0.19).0, 0);
        assert_eq!(c.cell_of_angles(0.0, -0.5).0, 3);
        for h in 0..4 {
            for w in 0..8 {
                let (a, e) = c.cell_center(h, w);
                assert_eq!(c.cell_of_angles(a, e), (h, w));
            }
        }
    }
}
