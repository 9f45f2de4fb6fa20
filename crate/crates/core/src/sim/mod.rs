//! Synthetic scans: ray-cast street scenes with injected snow.

pub mod scene;
pub mod snow;

pub use scene::{random_street, render, SceneSpec, SensorSpec};
pub use snow::{inject_snow, Severity, SnowConfig};

use crate::cloud::{LabelGrid, MultiEchoOrderedCloud};
use crate::error::Result;

/// One labeled noisy scan.
#[derive(Clone, Debug)]
pub struct LabeledScan {
    pub cloud: MultiEchoOrderedCloud,
    pub labels: LabelGrid,
}

/// `count` random street scans with snow; scan `i` uses scene seed `seed + i`.
pub fn snowy_streets(sensor: &SensorSpec, snow: &SnowConfig, count: usize, seed: u64) -> Result<Vec<LabeledScan>> {
    (0..count as u64)
        .map(|i| {
            let s = seed.wrapping_add(i);
            let (clean, labels) = render(&random_street(sensor, s), s)?;
            let (cloud, labels) = inject_snow(&clean, &labels, snow, s)?;
            Ok(LabeledScan { cloud, labels })
        })
        .collect()
}
