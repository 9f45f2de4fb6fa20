//! Scoring scans with a trained correlation learner and turning scores into
//! per-echo decisions and a single-echo output cloud.

use serde::{Deserialize, Serialize};

use crate::cloud::{CodeGrid, MultiEchoOrderedCloud, PointRecord};
use crate::error::{Error, Result};
use crate::neighbors::{encode_features, gather_neighbors, EncoderConfig};
use crate::nn::{forward, network_input, Checkpoint, Learner, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// An echo passes when its score is at most this.
    pub threshold: f64,
    /// A later echo may replace a failed strongest echo only if their ranges
    /// differ by more than this many meters.
    pub min_separation: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            threshold: 0.0,
            min_separation: 0.05,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || !(self.min_separation > 0.0) {
            return Err(Error::Config("threshold must be a number and min_separation positive".into()));
        }
        Ok(())
    }
}

/// Per-echo scores on the grid; higher means more likely noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub echoes: usize,
    /// Flat (h * W + w) * Ne + e. Invalid echoes hold 0.
    pub scores: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, echoes: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != height * width * echoes {
            return Err(Error::Shape(format!(
                "{} scores for a {height}x{width}x{echoes} grid",
                scores.len()
            )));
        }
        Ok(ScoreMap {
            height,
            width,
            echoes,
            scores,
        })
    }

    pub fn get(&self, h: usize, w: usize, e: usize) -> f64 {
        self.scores[(h * self.width + w) * self.echoes + e]
    }

    fn fits(&self, cloud: &MultiEchoOrderedCloud) -> Result<()> {
        if (self.height, self.width, self.echoes) != (cloud.height(), cloud.width(), cloud.echoes()) {
            return Err(Error::Shape(format!(
                "score map {}x{}x{} does not match cloud {}x{}x{}",
                self.height,
                self.width,
                self.echoes,
                cloud.height(),
                cloud.width(),
                cloud.echoes()
            )));
        }
        Ok(())
    }
}

/// Noise scores (O_cor) of every valid echo.
pub fn correlation_scores(
    params: &ParameterStore,
    encoder: &EncoderConfig,
    cloud: &MultiEchoOrderedCloud,
) -> Result<ScoreMap> {
    if cloud.echoes() != params.config.echoes {
        return Err(Error::Shape(format!(
            "model expects {} echoes per cell, cloud has {}",
            params.config.echoes,
            cloud.echoes()
        )));
    }
    let neighbors = gather_neighbors(cloud, encoder)?;
    let input = network_input(&encode_features(cloud, &neighbors)?, &params.config)?;
    let out = forward(params, Learner::Correlation, input, cloud.height(), cloud.width())?.output(&params.config);
    let scores = out
        .into_iter()
        .zip(cloud.records())
        .map(|(s, p)| if p.valid { s } else { 0.0 })
        .collect();
    ScoreMap::new(cloud.height(), cloud.width(), cloud.echoes(), scores)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EchoClass {
    /// Removed, or not a valid echo to begin with.
    Discarded,
    /// Strongest echo kept as is.
    Valid,
    /// Later echo that replaces a removed strongest echo.
    Substitute,
}

impl EchoClass {
    /// Code in class grid files.
    pub fn code(self) -> u8 {
        match self {
            EchoClass::Discarded => 0,
            EchoClass::Valid => 1,
            EchoClass::Substitute => 4,
        }
    }
}

/// Decides every echo of the cloud.
///
/// An echo passes when it is valid and scores at most the threshold. A
/// passing strongest echo is kept. Otherwise the lowest-scoring passing later
/// echo whose range differs from the strongest echo's by more than
/// `min_separation` becomes the substitute (lower slot on equal scores).
/// Everything else is discarded.
pub fn classify(cloud: &MultiEchoOrderedCloud, scores: &ScoreMap, cfg: &InferenceConfig) -> Result<Vec<EchoClass>> {
    scores.fits(cloud)?;
    let ne = cloud.echoes();
    let mut out = vec![EchoClass::Discarded; cloud.len()];
    for cell in 0..cloud.groups() {
        let (h, w) = (cell / cloud.width(), cell % cloud.width());
        let group = cloud.group(h, w);
        let passes = |e: usize| group[e].valid && scores.scores[cell * ne + e] <= cfg.threshold;
        if passes(0) {
            out[cell * ne] = EchoClass::Valid;
            continue;
        }
        let r0 = group[0].range();
        let mut best: Option<(f64, usize)> = None;
        for e in 1..ne {
            if !passes(e) || (group[e].range() - r0).abs() <= cfg.min_separation {
                continue;
            }
            let s = scores.scores[cell * ne + e];
            if best.is_none_or(|(b, _)| s < b) {
                best = Some((s, e));
            }
        }
        if let Some((_, e)) = best {
            out[cell * ne + e] = EchoClass::Substitute;
        }
    }
    Ok(out)
}

pub fn class_codes(cloud: &MultiEchoOrderedCloud, classes: &[EchoClass]) -> CodeGrid {
    CodeGrid {
        height: cloud.height(),
        width: cloud.width(),
        echoes: cloud.echoes(),
        codes: classes.iter().map(|c| c.code()).collect(),
    }
}

/// Single-echo cloud of kept and substituted echoes, with a flag per cell
/// telling whether the echo is a substitute.
pub fn assemble_output(
    cloud: &MultiEchoOrderedCloud,
    classes: &[EchoClass],
) -> Result<(MultiEchoOrderedCloud, Vec<bool>)> {
    if classes.len() != cloud.len() {
        return Err(Error::Shape(format!("{} classes for {} echoes", classes.len(), cloud.len())));
    }
    let ne = cloud.echoes();
    let mut cells = vec![PointRecord::EMPTY; cloud.groups()];
    let mut substitute = vec![false; cloud.groups()];
    for (cell, out) in cells.iter_mut().enumerate() {
        for e in 0..ne {
            match classes[cell * ne + e] {
                EchoClass::Discarded => {}
                c => {
                    *out = cloud.records()[cell * ne + e];
                    substitute[cell] = c == EchoClass::Substitute;
                }
            }
        }
    }
    let cleaned = MultiEchoOrderedCloud::new(cloud.height(), cloud.width(), 1, cells, cloud.angles().to_vec())?;
    Ok((cleaned, substitute))
}

/// Result of denoising one scan.
#[derive(Clone, Debug)]
pub struct Denoised {
    pub cleaned: MultiEchoOrderedCloud,
    pub substitute: Vec<bool>,
    pub scores: ScoreMap,
    pub classes: Vec<EchoClass>,
}

pub fn denoise(cloud: &MultiEchoOrderedCloud, model: &Checkpoint, cfg: &InferenceConfig) -> Result<Denoised> {
    let scores = correlation_scores(&model.params, &model.encoder, cloud)?;
    decide(cloud, scores, cfg)
}

/// Classification and output assembly for precomputed scores.
pub fn decide(cloud: &MultiEchoOrderedCloud, scores: ScoreMap, cfg: &InferenceConfig) -> Result<Denoised> {
    let classes = classify(cloud, &scores, cfg)?;
    let (cleaned, substitute) = assemble_output(cloud, &classes)?;
    Ok(Denoised {
        cleaned,
        substitute,
        scores,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One cell with three echoes at ranges 10, r1, r2 and the given scores.
    fn cell(r1: f32, r2: f32, s: [f64; 3]) -> (MultiEchoOrderedCloud, ScoreMap) {
        let recs = vec![
            PointRecord::new(10.0, 0.0, 0.0, 0.9),
            PointRecord::new(r1, 0.0, 0.0, 0.5),
            PointRecord::new(r2, 0.0, 0.0, 0.4),
        ];
        let c = MultiEchoOrderedCloud::new(1, 1, 3, recs, vec![[0.0, 0.0]]).unwrap();
        (c, ScoreMap::new(1, 1, 3, s.to_vec()).unwrap())
    }

    #[test]
    fn passing_strongest_is_kept() {
        let (c, s) = cell(12.0, 14.0, [-1.0, -2.0, -3.0]);
        let k = classify(&c, &s, &InferenceConfig::default()).unwrap();
        assert_eq!(k, vec![EchoClass::Valid, EchoClass::Discarded, EchoClass::Discarded]);
    }

    #[test]
    fn lowest_scoring_separated_echo_substitutes() {
        let (c, s) = cell(12.0, 14.0, [1.0, -0.5, -2.0]);
        let k = classify(&c, &s, &InferenceConfig::default()).unwrap();
        assert_eq!(k[2], EchoClass::Substitute);
        let (cleaned, sub) = assemble_output(&c, &k).unwrap();
        assert_eq!(cleaned.range(0, 0, 0), 14.0);
        assert_eq!(sub, vec![true]);
    }

    #[test]
    fn close_echo_cannot_substitute() {
        let (c, s) = cell(10.03, 14.0, [1.0, -2.0, 0.5]);
        let k = classify(&c, &s, &InferenceConfig::default()).unwrap();
        assert!(k.iter().all(|&x| x == EchoClass::Discarded));
        let (cleaned, sub) = assemble_output(&c, &k).unwrap();
        assert!(cleaned.is_empty() && !sub[0]);
    }

    #[test]
    fn equal_scores_prefer_lower_slot() {
        let (c, s) = cell(12.0, 14.0, [1.0, -1.0, -1.0]);
        let k = classify(&c, &s, &InferenceConfig::default()).unwrap();
        assert_eq!(k[1], EchoClass::Substitute);
        assert_eq!(k[2], EchoClass::Discarded);
    }

    #[test]
    fn shape_mismatch() {
        let (c, _) = cell(12.0, 14.0, [0.0; 3]);
        let s = ScoreMap::new(1, 1, 1, vec![0.0]).unwrap();
        assert!(matches!(classify(&c, &s, &InferenceConfig::default()), Err(Error::Shape(_))));
    }
}
