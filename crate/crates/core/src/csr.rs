//! Characteristics similarity regularization.
//!
//! Each valid echo gets a characteristics vector: range-normalized intensity
//! `I = intensity * r^2` and range-normalized sparsity `S = nn_dist / r`. Both
//! channels are standardized over the scan, the `k` nearest other echoes in
//! that plane are found exactly, and an echo's penalty is the absolute Z-score
//! of its correlation score against the scores of those neighbors.

use serde::{Deserialize, Serialize};

use crate::cloud::MultiEchoOrderedCloud;
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsrConfig {
    /// Characteristic-space neighbors per echo.
    pub k: usize,
    /// Added to the neighbor standard deviation.
    pub eps: f64,
    /// Upper bound of the penalty.
    pub clamp: f64,
}

impl Default for CsrConfig {
    fn default() -> Self {
        CsrConfig {
            k: 9,
            eps: 1e-6,
            clamp: 1e3,
        }
    }
}

impl CsrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("CSR k must be >= 2, got {}", self.k)));
        }
        if !(self.eps > 0.0) || !(self.clamp > 0.0) {
            return Err(Error::Config("CSR eps and clamp must be positive".into()));
        }
        Ok(())
    }
}

/// Per-echo characteristics; entries of invalid echoes are zero and ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct CharacteristicsMap {
    pub intensity: Vec<f64>,
    pub sparsity: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CharacteristicsMap {
    pub fn from_parts(intensity: Vec<f64>, sparsity: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if intensity.len() != sparsity.len() || intensity.len() != valid.len() {
            return Err(Error::Shape("characteristics channels differ in length".into()));
        }
        Ok(CharacteristicsMap {
            intensity,
            sparsity,
            valid,
        })
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Builds the characteristics map from a cloud and per-echo nearest-neighbor distances.
pub fn characteristics_map(cloud: &MultiEchoOrderedCloud, nn_dist: &[f64]) -> Result<CharacteristicsMap> {
    if nn_dist.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "{} nearest distances for {} echoes",
            nn_dist.len(),
            cloud.len()
        )));
    }
    let n = cloud.len();
    let mut intensity = vec![0.0; n];
    let mut sparsity = vec![0.0; n];
    let mut valid = vec![false; n];
    for (i, p) in cloud.records().iter().enumerate() {
        if !p.valid {
            continue;
        }
        let r = p.range();
        if r == 0.0 {
            let e = i % cloud.echoes();
            let cell = i / cloud.echoes();
            return Err(Error::DegenerateRange {
                h: cell / cloud.width(),
                w: cell % cloud.width(),
                e,
            });
        }
        intensity[i] = p.intensity as f64 * r * r;
        sparsity[i] = nn_dist[i] / r;
        valid[i] = true;
    }
    Ok(CharacteristicsMap {
        intensity,
        sparsity,
        valid,
    })
}

/// Mean and population standard deviation; a zero deviation is reported as 1.
fn standardizer(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

/// Characteristic-space neighbor lists, fixed for a scan.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrNeighbors {
    k: usize,
    /// For each echo: `k` neighbor echo indices, or empty.
    lists: Vec<Vec<u32>>,
}

impl CsrNeighbors {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Neighbor echo indices of echo `i` (empty for invalid echoes or tiny scans).
    pub fn of(&self, i: usize) -> &[u32] {
        &self.lists[i]
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// Finds the `k` nearest other valid echoes of every valid echo, in the
    /// standardized (I, S) plane; ties go to the lower echo index.
    pub fn build(theta: &CharacteristicsMap, cfg: &CsrConfig) -> Result<Self> {
        cfg.validate()?;
        let n = theta.len();
        let idx: Vec<usize> = (0..n).filter(|&i| theta.valid[i]).collect();
        let mut lists = vec![Vec::new(); n];
        if idx.len() < cfg.k + 1 {
            return Ok(CsrNeighbors { k: cfg.k, lists });
        }
        let (mi, si) = standardizer(idx.iter().map(|&i| theta.intensity[i]));
        let (ms, ss) = standardizer(idx.iter().map(|&i| theta.sparsity[i]));
        // Points sorted by standardized intensity allow an exact early exit.
        let mut pts: Vec<(f64, f64, usize)> = idx
            .iter()
            .map(|&i| ((theta.intensity[i] - mi) / si, (theta.sparsity[i] - ms) / ss, i))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        let k = cfg.k;
        let found = par::map_range(pts.len(), |pos| {
            let (qi, qs, qidx) = pts[pos];
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            let consider = |j: usize, best: &mut Vec<(f64, usize)>| -> bool {
                let (pi, ps, pidx) = pts[j];
                let di = pi - qi;
                let bound = di * di;
                if best.len() == k && bound > best[k - 1].0 {
                    return false;
                }
                let ds = ps - qs;
                let d = di * di + ds * ds;
                let cand = (d, pidx);
                if best.len() < k || cand < best[k - 1] {
                    let at = best.partition_point(|b| *b < cand);
                    best.insert(at, cand);
                    best.truncate(k);
                }
                true
            };
            let mut lo = pos;
            let mut hi = pos + 1;
            let (mut go_lo, mut go_hi) = (true, true);
            while go_lo || go_hi {
                if go_lo {
                    if lo == 0 {
                        go_lo = false;
                    } else {
                        lo -= 1;
                        go_lo = consider(lo, &mut best);
                    }
                }
                if go_hi {
                    if hi >= pts.len() {
                        go_hi = false;
                    } else {
                        go_hi = consider(hi, &mut best);
                        hi += 1;
                    }
                }
            }
            (qidx, best.into_iter().map(|(_, j)| j as u32).collect::<Vec<_>>())
        });
        for (q, list) in found {
            lists[q] = list;
        }
        Ok(CsrNeighbors { k, lists })
    }

    /// Penalty of every echo; zero where an echo has no neighbor list.
    pub fn penalty(&self, scores: &[f64], cfg: &CsrConfig) -> Vec<f64> {
        (0..self.lists.len())
            .map(|q| self.penalty_at(q, scores, cfg).map_or(0.0, |t| t.value))
            .collect()
    }

    fn penalty_at(&self, q: usize, scores: &[f64], cfg: &CsrConfig) -> Option<ZTerm> {
        let list = &self.lists[q];
        if list.is_empty() {
            return None;
        }
        let k = list.len() as f64;
        let mean = list.iter().map(|&j| scores[j as usize]).sum::<f64>() / k;
        let var = list
            .iter()
            .map(|&j| (scores[j as usize] - mean).powi(2))
            .sum::<f64>()
            / k;
        let sd = var.sqrt();
        let diff = scores[q] - mean;
        let z = diff.abs() / (sd + cfg.eps);
        Some(ZTerm {
            value: z.min(cfg.clamp),
            clamped: z >= cfg.clamp,
            mean,
            sd,
            diff,
        })
    }

    /// Gradient of `sum_q weight[q] * penalty[q]` with respect to every score.
    ///
    /// Neighbor selection is held fixed; the gradient flows through the
    /// query score and the neighbor mean and deviation. Clamped terms
    /// contribute nothing.
    pub fn penalty_backward(&self, scores: &[f64], weight: &[f64], cfg: &CsrConfig) -> Vec<f64> {
        let mut grad = vec![0.0; scores.len()];
        for q in 0..self.lists.len() {
            if weight[q] == 0.0 {
                continue;
            }
            let Some(t) = self.penalty_at(q, scores, cfg) else {
                continue;
            };
            if t.clamped {
                continue;
            }
            let list = &self.lists[q];
            let k = list.len() as f64;
            let denom = t.sd + cfg.eps;
            let sign = if t.diff > 0.0 {
                1.0
            } else if t.diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            let g = weight[q];
            grad[q] += g * sign / denom;
            for &j in list {
                let j = j as usize;
                let dsd = if t.sd > 0.0 { (scores[j] - t.mean) / (k * t.sd) } else { 0.0 };
                grad[j] += g * (-sign / (k * denom) - t.diff.abs() / (denom * denom) * dsd);
            }
        }
        grad
    }
}

struct ZTerm {
    value: f64,
    clamped: bool,
    mean: f64,
    sd: f64,
    diff: f64,
}

/// Builds the neighbor lists and evaluates the penalty in one go.
pub fn csr_penalty(theta: &CharacteristicsMap, scores: &[f64], cfg: &CsrConfig) -> Result<Vec<f64>> {
    if scores.len() != theta.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} characteristics",
            scores.len(),
            theta.len()
        )));
    }
    Ok(CsrNeighbors::build(theta, cfg)?.penalty(scores, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointRecord;

    #[test]
    fn characteristics_arithmetic() {
        let cells = vec![
            PointRecord::new(10.0, 0.0, 0.0, 0.5),
            PointRecord::EMPTY,
            PointRecord::new(0.0, 4.0, 0.0, 0.25),
            PointRecord::EMPTY,
        ];
        let c = MultiEchoOrderedCloud::new(1, 2, 2, cells, vec![[0.0, 0.0]; 2]).unwrap();
        let m = characteristics_map(&c, &[1.0, 0.0, 0.2, 0.0]).unwrap();
        assert_eq!(m.intensity[0], 50.0);
        assert_eq!(m.sparsity[2], 0.05);
        assert!(!m.valid[1] && !m.valid[3]);
        assert_eq!(m.valid_count(), 2);
        assert!(characteristics_map(&c, &[1.0]).is_err());
    }

    fn flat_map(n: usize) -> CharacteristicsMap {
        CharacteristicsMap::from_parts(
            (0..n).map(|i| i as f64).collect(),
            (0..n).map(|i| (i % 3) as f64).collect(),
            vec![true; n],
        )
        .unwrap()
    }

    #[test]
    fn identical_neighbor_scores_give_zero() {
        let cfg = CsrConfig {
            k: 3,
            ..Default::default()
        };
        let theta = flat_map(8);
        let xi = csr_penalty(&theta, &[2.0; 8], &cfg).unwrap();
        assert!(xi.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_variance_neighbors_hit_the_clamp() {
        let cfg = CsrConfig {
            k: 3,
            ..Default::default()
        };
        // Echo 0 is far from the others in I; its neighbors are 1, 2, 3.
        let theta = CharacteristicsMap::from_parts(
            vec![0.0, 10.0, 10.1, 10.2, 50.0],
            vec![0.0; 5],
            vec![true; 5],
        )
        .unwrap();
        let nb = CsrNeighbors::build(&theta, &cfg).unwrap();
        assert_eq!(nb.of(0), &[1, 2, 3]);
        let scores = [1.0, 0.0, 0.0, 0.0, 0.0];
        let xi = nb.penalty(&scores, &cfg);
        assert_eq!(xi[0], 1e3);
        // Unclamped value would be 1 / 1e-6.
        let loose = CsrConfig {
            clamp: f64::INFINITY,
            ..cfg.clone()
        };
        assert!((nb.penalty(&scores, &loose)[0] - 1e6).abs() < 1e-3);
        assert!(nb.penalty_backward(&scores, &[1.0, 0.0, 0.0, 0.0, 0.0], &cfg).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn too_few_echoes_gives_zero_penalty() {
        let cfg = CsrConfig::default();
        let theta = flat_map(9);
        let xi = csr_penalty(&theta, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &cfg).unwrap();
        assert!(xi.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn invalid_echoes_never_neighbors() {
        let cfg = CsrConfig {
            k: 2,
            ..Default::default()
        };
        let mut theta = flat_map(6);
        theta.valid[1] = false;
        let nb = CsrNeighbors::build(&theta, &cfg).unwrap();
        assert!(nb.of(1).is_empty());
        for q in [0, 2, 3, 4, 5] {
            assert!(!nb.of(q).contains(&1));
            assert!(!nb.of(q).contains(&(q as u32)));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = CsrConfig {
            k: 3,
            ..Default::default()
        };
        let theta = CharacteristicsMap::from_parts(
            vec![0.3, 1.2, 2.2, 0.7, 3.1, 1.9, 0.1],
            vec![0.5, 0.1, 0.9, 0.4, 0.2, 0.7, 0.3],
            vec![true; 7],
        )
        .unwrap();
        let nb = CsrNeighbors::build(&theta, &cfg).unwrap();
        let scores = vec![0.4, -1.3, 0.8, 2.1, -0.2, 0.9, 1.4];
        let weight = vec![1.0, 0.5, 0.0, 1.0, 2.0, 1.0, 0.3];
        let f = |s: &[f64]| -> f64 { nb.penalty(s, &cfg).iter().zip(&weight).map(|(a, b)| a * b).sum() };
        let g = nb.penalty_backward(&scores, &weight, &cfg);
        for i in 0..scores.len() {
            let mut p = scores.clone();
            let mut m = scores.clone();
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }
}
