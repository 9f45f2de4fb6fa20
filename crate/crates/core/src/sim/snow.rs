//! Snow injection into clean single-echo scans.
//!
//! Every beam independently meets a snow particle with a fixed probability.
//! The particle sits between 1 m and 80 % of the true range (or anywhere up to
//! the maximum range for beams that hit nothing) and returns a weak raw
//! intensity.
//!
//! In single-echo output the particle replaces the true return. In two-echo
//! output the particle is the strongest echo and the true return, when it
//! survives occlusion, the second one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{cell_rng, direction};
use crate::cloud::{Label, LabelGrid, MultiEchoOrderedCloud, PointRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Light,
    Medium,
    Heavy,
}

impl Severity {
    /// Per-beam particle probability.
    pub fn probability(self) -> f64 {
        match self {
            Severity::Light => 0.02,
            Severity::Medium => 0.06,
            Severity::Heavy => 0.12,
        }
    }

    pub fn all() -> [Severity; 3] {
        [Severity::Light, Severity::Medium, Severity::Heavy]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnowConfig {
    /// Share of beams that return from a snow particle.
    pub probability: f64,
    /// Particle intensities are uniform in [0, intensity_max].
    pub intensity_max: f64,
    /// Chance that the true return behind a particle is lost (two-echo output).
    pub occlusion_drop: f64,
    /// Echo slots of the output: 1 or 2.
    pub echoes: usize,
    pub max_range: f64,
}

impl Default for SnowConfig {
    fn default() -> Self {
        SnowConfig {
            probability: Severity::Medium.probability(),
            intensity_max: 0.3,
            occlusion_drop: 0.1,
            echoes: 1,
            max_range: 50.0,
        }
    }
}

impl SnowConfig {
    pub fn with_severity(severity: Severity, echoes: usize) -> Self {
        SnowConfig {
            probability: severity.probability(),
            echoes,
            ..SnowConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.probability)
            || !unit(self.occlusion_drop)
            || !unit(self.intensity_max)
            || self.max_range <= 1.0
        {
            return Err(Error::Config("snow probabilities and intensity_max must lie in [0, 1]".into()));
        }
        if !(1..=2).contains(&self.echoes) {
            return Err(Error::Config(format!("snow output supports 1 or 2 echoes, not {}", self.echoes)));
        }
        Ok(())
    }
}

/// Range bounds of a particle in front of a surface at `true_range` (None: beam missed).
fn particle_bounds(true_range: Option<f64>, max_range: f64) -> Option<(f64, f64)> {
    match true_range {
        Some(r) => {
            let hi = (0.8 * r).min(max_range);
            (hi >= 1.0).then_some((1.0, hi))
        }
        None => Some((1.0, max_range)),
    }
}

/// Adds snow to a clean single-echo cloud and returns the noisy cloud with labels.
pub fn inject_snow(
    clean: &MultiEchoOrderedCloud,
    labels: &LabelGrid,
    cfg: &SnowConfig,
    seed: u64,
) -> Result<(MultiEchoOrderedCloud, LabelGrid)> {
    cfg.validate()?;
    if clean.echoes() != 1 {
        return Err(Error::Mode(clean.echoes()));
    }
    labels.check_against(clean)?;
    let (height, width) = (clean.height(), clean.width());
    let cells = height * width;

    let ne = cfg.echoes;
    let mut records = vec![PointRecord::EMPTY; cells * ne];
    let mut out_labels = vec![Label::Empty; cells * ne];
    for c in 0..cells {
        let mut rng = cell_rng(seed, 0x1D7E, c);
        let truth = clean.records()[c];
        let bounds = particle_bounds(truth.valid.then(|| truth.range()), cfg.max_range);
        let hit = rng.gen_bool(cfg.probability);
        let (true, Some((lo, hi))) = (hit, bounds) else {
            records[c * ne] = truth;
            out_labels[c * ne] = labels.labels()[c];
            continue;
        };
        let r = rng.gen_range(lo..=hi);
        let (h, w) = (c / width, c % width);
        let d = direction(clean.azimuth(h, w), clean.elevation(h, w));
        let intensity = rng.gen_range(0.0..=cfg.intensity_max) as f32;
        records[c * ne] = PointRecord::new((r * d[0]) as f32, (r * d[1]) as f32, (r * d[2]) as f32, intensity);
        out_labels[c * ne] = Label::NoiseParticle;
        if ne == 2 && truth.valid && !rng.gen_bool(cfg.occlusion_drop) {
            // The true return stays weaker than the particle in front of it.
            let mut behind = truth;
            behind.intensity = truth.intensity.min(0.9 * intensity);
            records[c * ne + 1] = behind;
            out_labels[c * ne + 1] = labels.labels()[c];
        }
    }
    let cloud = MultiEchoOrderedCloud::new(height, width, ne, records, clean.angles().to_vec())?;
    Ok((cloud, LabelGrid::new(height, width, ne, out_labels)?))
}
