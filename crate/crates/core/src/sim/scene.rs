//! Procedural street scenes and a single-return ray caster.
//!
//! The sensor sits at the origin. Every grid cell casts one beam through its
//! center; the nearest surface hit within range becomes the cell's echo.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::{Label, LabelGrid, MultiEchoOrderedCloud, PointRecord};
use crate::error::{Error, Result};
use crate::par;
use crate::projection::ProjectionConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSpec {
    pub height: usize,
    pub width: usize,
    /// Vertical field of view edges, radians.
    pub fov_up: f64,
    pub fov_down: f64,
    pub max_range: f64,
    /// Standard deviation of the range noise, meters.
    pub range_noise: f64,
    /// Chance that a beam hitting a surface returns nothing.
    pub dropout: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        SensorSpec {
            height: 16,
            width: 256,
            fov_up: 0.05,
            fov_down: -0.4,
            max_range: 50.0,
            range_noise: 0.01,
            dropout: 0.02,
        }
    }
}

impl SensorSpec {
    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            height: self.height,
            width: self.width,
            fov_up: self.fov_up,
            fov_down: self.fov_down,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.projection().validate()?;
        if !(self.max_range > 1.0 && self.max_range.is_finite()) {
            return Err(Error::Config("max_range must exceed 1 m".into()));
        }
        if !(self.range_noise >= 0.0 && self.range_noise.is_finite()) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("range_noise must be >= 0 and dropout in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ground {
    /// Height of the ground plane relative to the sensor (negative: below).
    pub z: f64,
    pub reflectivity: f64,
}

/// Axis-aligned box rotated by `yaw` about its vertical axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxObject {
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    pub reflectivity: f64,
}

/// Vertical cylinder (pole, trunk).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cylinder {
    pub center: [f64; 2],
    pub radius: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub reflectivity: f64,
}

/// Vertical rectangle standing on the segment `start`-`end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wall {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub z_min: f64,
    pub z_max: f64,
    pub reflectivity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub sensor: SensorSpec,
    pub ground: Option<Ground>,
    pub boxes: Vec<BoxObject>,
    pub cylinders: Vec<Cylinder>,
    pub walls: Vec<Wall>,
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let scene: SceneSpec = toml::from_str(text).map_err(|e| Error::Config(format!("scene: {e}")))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        let refl = self
            .ground
            .iter()
            .map(|g| g.reflectivity)
            .chain(self.boxes.iter().map(|b| b.reflectivity))
            .chain(self.cylinders.iter().map(|c| c.reflectivity))
            .chain(self.walls.iter().map(|w| w.reflectivity));
        for r in refl {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("reflectivity {r} outside [0, 1]")));
            }
        }
        if self.boxes.iter().any(|b| b.size.iter().any(|&s| s <= 0.0))
            || self.cylinders.iter().any(|c| c.radius <= 0.0 || c.z_max <= c.z_min)
            || self.walls.iter().any(|w| w.z_max <= w.z_min || w.start == w.end)
        {
            return Err(Error::Config("scene holds a degenerate object".into()));
        }
        Ok(())
    }

    /// Nearest hit along unit direction `d`: distance and cosine of incidence.
    pub fn cast(&self, d: [f64; 3]) -> Option<(f64, f64, f64)> {
        let mut best: Option<(f64, f64, f64)> = None;
        let mut take = |hit: Option<(f64, f64)>, refl: f64| {
            if let Some((t, cos)) = hit {
                if t > 1e-6 && best.is_none_or(|b| t < b.0) {
                    best = Some((t, cos, refl));
                }
            }
        };
        if let Some(g) = &self.ground {
            if d[2] < 0.0 && g.z < 0.0 {
                take(Some((g.z / d[2], -d[2])), g.reflectivity);
            }
        }
        for b in &self.boxes {
            take(hit_box(b, d), b.reflectivity);
        }
        for c in &self.cylinders {
            take(hit_cylinder(c, d), c.reflectivity);
        }
        for w in &self.walls {
            take(hit_wall(w, d), w.reflectivity);
        }
        best
    }
}

fn hit_box(b: &BoxObject, d: [f64; 3]) -> Option<(f64, f64)> {
    // Ray from the origin, expressed in the box frame.
    let (s, c) = (-b.yaw).sin_cos();
    let o = [-b.center[0], -b.center[1], -b.center[2]];
    let o = [c * o[0] - s * o[1], s * o[0] + c * o[1], o[2]];
    let dir = [c * d[0] - s * d[1], s * d[0] + c * d[1], d[2]];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        let half = b.size[a] / 2.0;
        if dir[a].abs() < 1e-12 {
            if o[a].abs() > half {
                return None;
            }
            continue;
        }
        let (t1, t2) = ((-half - o[a]) / dir[a], (half - o[a]) / dir[a]);
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > t_near {
            t_near = lo;
            axis = a;
        }
        t_far = t_far.min(hi);
    }
    if t_near > t_far || t_near <= 0.0 {
        return None;
    }
    Some((t_near, dir[axis].abs()))
}

fn hit_cylinder(c: &Cylinder, d: [f64; 3]) -> Option<(f64, f64)> {
    let (cx, cy) = (c.center[0], c.center[1]);
    let a = d[0] * d[0] + d[1] * d[1];
    let mut best: Option<(f64, f64)> = None;
    if a > 1e-12 {
        let b = -2.0 * (d[0] * cx + d[1] * cy);
        let cc = cx * cx + cy * cy - c.radius * c.radius;
        let disc = b * b - 4.0 * a * cc;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / (2.0 * a);
            let z = t * d[2];
            if t > 0.0 && z >= c.z_min && z <= c.z_max {
                let n = [(t * d[0] - cx) / c.radius, (t * d[1] - cy) / c.radius];
                best = Some((t, (n[0] * d[0] + n[1] * d[1]).abs()));
            }
        }
    }
    for cap in [c.z_max, c.z_min] {
        if d[2].abs() > 1e-12 {
            let t = cap / d[2];
            let (x, y) = (t * d[0] - cx, t * d[1] - cy);
            if t > 0.0 && x * x + y * y <= c.radius * c.radius && best.is_none_or(|b| t < b.0) {
                best = Some((t, d[2].abs()));
            }
        }
    }
    best
}

fn hit_wall(w: &Wall, d: [f64; 3]) -> Option<(f64, f64)> {
    let (ex, ey) = (w.end[0] - w.start[0], w.end[1] - w.start[1]);
    // Solve t * (dx, dy) = start + u * e.
    let det = d[0] * (-ey) - d[1] * (-ex);
    if det.abs() < 1e-12 {
        return None;
    }
    let (sx, sy) = (w.start[0], w.start[1]);
    let t = (sx * (-ey) - sy * (-ex)) / det;
    let u = (d[0] * sy - d[1] * sx) / det;
    if t <= 0.0 || !(0.0..=1.0).contains(&u) {
        return None;
    }
    let z = t * d[2];
    if z < w.z_min || z > w.z_max {
        return None;
    }
    let len = (ex * ex + ey * ey).sqrt();
    let n = [-ey / len, ex / len];
    Some((t, (n[0] * d[0] + n[1] * d[1]).abs()))
}

/// Unit beam direction for azimuth / elevation.
pub fn direction(azimuth: f64, elevation: f64) -> [f64; 3] {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    [ce * ca, ce * sa, se]
}

/// Per-cell random stream, independent of evaluation order.
pub(crate) fn cell_rng(seed: u64, salt: u64, cell: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.rotate_left(32));
    rng.set_stream(cell as u64);
    rng
}

/// Ray-casts the scene into a clean single-echo cloud and its labels.
pub fn render(scene: &SceneSpec, seed: u64) -> Result<(MultiEchoOrderedCloud, LabelGrid)> {
    scene.validate()?;
    let s = &scene.sensor;
    let proj = s.projection();
    let angles = proj.center_angles();
    let noise = Normal::new(0.0, s.range_noise.max(1e-12)).expect("finite deviation");
    let hits = par::map_range(s.height * s.width, |cell| {
        let mut rng = cell_rng(seed, 0x5CE4E, cell);
        let (h, w) = (cell / s.width, cell % s.width);
        let (az, el) = proj.cell_center(h, w);
        let d = direction(az, el);
        let (t, _, refl) = scene.cast(d)?;
        let dropped = rng.gen_bool(s.dropout);
        let t = t + if s.range_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        if dropped || t > s.max_range || t < 0.5 {
            return None;
        }
        let intensity = refl / (1.0 + rng.gen_range(0.0..0.05));
        Some(PointRecord::new(
            (t * d[0]) as f32,
            (t * d[1]) as f32,
            (t * d[2]) as f32,
            intensity as f32,
        ))
    });
    let labels = hits
        .iter()
        .map(|p| if p.is_some() { Label::ValidObject } else { Label::Empty })
        .collect();
    let cells = hits.into_iter().map(|p| p.unwrap_or(PointRecord::EMPTY)).collect();
    let cloud = MultiEchoOrderedCloud::new(s.height, s.width, 1, cells, angles)?;
    Ok((cloud, LabelGrid::new(s.height, s.width, 1, labels)?))
}

/// A random street: building facades on both sides with gaps, parked cars,
/// poles and trees, on flat ground 1.8 m below the sensor.
pub fn random_street(sensor: &SensorSpec, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground_z = -1.8;
    let mut scene = SceneSpec {
        sensor: sensor.clone(),
        ground: Some(Ground {
            z: ground_z,
            reflectivity: rng.gen_range(0.15..0.35),
        }),
        ..SceneSpec::default()
    };
    let heading = rng.gen_range(-PI..PI);
    let (hs, hc) = heading.sin_cos();
    // Street frame (along, across) to sensor frame.
    let to_world = |a: f64, c: f64| [hc * a - hs * c, hs * a + hc * c];
    for side in [-1.0, 1.0] {
        let offset = side * rng.gen_range(6.0..11.0);
        let mut a = -45.0;
        while a < 45.0 {
            let len = rng.gen_range(5.0..20.0);
            if rng.gen_bool(0.8) {
                let jog = rng.gen_range(-1.0..1.0);
                scene.walls.push(Wall {
                    start: to_world(a, offset + jog),
                    end: to_world(a + len, offset + jog),
                    z_min: ground_z,
                    z_max: ground_z + rng.gen_range(4.0..15.0),
                    reflectivity: rng.gen_range(0.3..0.8),
                });
            }
            a += len + rng.gen_range(0.0..4.0);
        }
        let mut a = -35.0 + rng.gen_range(0.0..5.0);
        while a < 35.0 {
            if rng.gen_bool(0.6) {
                let c = offset - side * rng.gen_range(2.0..3.0);
                let center = to_world(a, c);
                scene.boxes.push(BoxObject {
                    center: [center[0], center[1], ground_z + 0.75],
                    size: [rng.gen_range(3.8..4.8), rng.gen_range(1.7..2.0), 1.5],
                    yaw: heading + rng.gen_range(-0.1..0.1),
                    reflectivity: rng.gen_range(0.2..0.9),
                });
            }
            a += rng.gen_range(5.0..9.0);
        }
        let mut a = -40.0 + rng.gen_range(0.0..8.0);
        while a < 40.0 {
            let c = offset - side * rng.gen_range(0.5..1.5);
            let tree = rng.gen_bool(0.4);
            scene.cylinders.push(Cylinder {
                center: to_world(a, c),
                radius: if tree { rng.gen_range(0.2..0.4) } else { rng.gen_range(0.06..0.15) },
                z_min: ground_z,
                z_max: ground_z + rng.gen_range(3.0..8.0),
                reflectivity: rng.gen_range(0.3..0.8),
            });
            a += rng.gen_range(6.0..15.0);
        }
    }
    // A few cars or pedestrians on the road itself.
    for _ in 0..rng.gen_range(0..4) {
        let along: f64 = rng.gen_range(-30.0..30.0);
        if along.abs() < 4.0 {
            continue;
        }
        let center = to_world(along, rng.gen_range(-3.0..3.0));
        let person = rng.gen_bool(0.4);
        let size = if person { [0.5, 0.5, 1.75] } else { [4.5, 1.9, 1.5] };
        scene.boxes.push(BoxObject {
            center: [center[0], center[1], ground_z + size[2] / 2.0],
            size,
            yaw: heading + rng.gen_range(-0.2..0.2),
            reflectivity: rng.gen_range(0.2..0.9),
        });
    }
    scene
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_hit_distance() {
        let scene = SceneSpec {
            ground: Some(Ground {
                z: -2.0,
                reflectivity: 0.5,
            }),
            ..SceneSpec::default()
        };
        let d = direction(0.3, -0.2);
        let (t, _, refl) = scene.cast(d).unwrap();
        assert!((t * d[2] + 2.0).abs() < 1e-12);
        assert_eq!(refl, 0.5);
        assert!(scene.cast(direction(0.0, 0.1)).is_none());
    }

    #[test]
    fn box_and_wall_and_cylinder_hits() {
        let b = BoxObject {
            center: [10.0, 0.0, 0.0],
            size: [2.0, 2.0, 2.0],
            yaw: 0.0,
            reflectivity: 0.5,
        };
        let (t, cos) = hit_box(&b, [1.0, 0.0, 0.0]).unwrap();
        assert!((t - 9.0).abs() < 1e-12 && (cos - 1.0).abs() < 1e-12);
        // Rotated 45 degrees the near corner sits at 10 - sqrt(2).
        let r = BoxObject { yaw: PI / 4.0, ..b };
        assert!((hit_box(&r, [1.0, 0.0, 0.0]).unwrap().0 - (10.0 - 2f64.sqrt())).abs() < 1e-9);
        let w = Wall {
            start: [5.0, -1.0],
            end: [5.0, 1.0],
            z_min: -1.0,
            z_max: 1.0,
            reflectivity: 0.4,
        };
        assert!((hit_wall(&w, [1.0, 0.0, 0.0]).unwrap().0 - 5.0).abs() < 1e-12);
        assert!(hit_wall(&w, [-1.0, 0.0, 0.0]).is_none());
        let c = Cylinder {
            center: [0.0, 8.0],
            radius: 0.5,
            z_min: -2.0,
            z_max: 2.0,
            reflectivity: 0.4,
        };
        assert!((hit_cylinder(&c, [0.0, 1.0, 0.0]).unwrap().0 - 7.5).abs() < 1e-12);
    }

    #[test]
    fn render_labels_match_hits() {
        let sensor = SensorSpec {
            height: 8,
            width: 64,
            ..SensorSpec::default()
        };
        let scene = random_street(&sensor, 3);
        let (cloud, labels) = render(&scene, 1).unwrap();
        labels.check_against(&cloud).unwrap();
        assert!(cloud.valid_count() > 64);
        let (again, _) = render(&scene, 1).unwrap();
        assert!(cloud.bit_eq(&again));
    }

    #[test]
    fn toml_round_trip() {
        let scene = random_street(&SensorSpec::default(), 9);
        assert_eq!(SceneSpec::from_toml(&scene.to_toml()).unwrap(), scene);
        assert!(SceneSpec::from_toml("[sensor]\nheight = 0\n").is_err());
    }
}
