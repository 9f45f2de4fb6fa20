//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use medenoise::cloud::{MultiEchoOrderedCloud, PointRecord};
use medenoise::projection::ProjectionConfig;
use medenoise::sim::scene::direction;
use rand::Rng;

/// Random cloud on a small grid: echo groups along the cell beams, ranges in
/// [1, 12] m, about `fill` of the cells occupied, later echoes farther and
/// weaker than the first.
pub fn random_cloud(rng: &mut impl Rng, height: usize, width: usize, echoes: usize, fill: f64) -> MultiEchoOrderedCloud {
    let proj = ProjectionConfig {
        height,
        width,
        fov_up: 0.1,
        fov_down: -0.3,
    };
    let mut cells = vec![PointRecord::EMPTY; height * width * echoes];
    for h in 0..height {
        for w in 0..width {
            if !rng.gen_bool(fill) {
                continue;
            }
            let (az, el) = proj.cell_center(h, w);
            let d = direction(az, el);
            let mut r = rng.gen_range(1.0..12.0);
            let mut intensity = rng.gen_range(0.2..1.0f32);
            for e in 0..echoes {
                if e > 0 && !rng.gen_bool(0.5) {
                    break;
                }
                let p = PointRecord::new((r * d[0]) as f32, (r * d[1]) as f32, (r * d[2]) as f32, intensity);
                cells[(h * width + w) * echoes + e] = p;
                r += rng.gen_range(0.5..6.0);
                intensity *= rng.gen_range(0.1..1.0f32);
            }
        }
    }
    MultiEchoOrderedCloud::new(height, width, echoes, cells, proj.center_angles()).unwrap()
}
