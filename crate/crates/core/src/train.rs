//! Blind-spot self-supervised training of the two learners.
//!
//! Each step hides a random half of the valid echoes of one scan. Hidden
//! strongest echoes are removed from every neighbor list fed to the range
//! learner, which must then predict their range from what remains; the
//! correlation learner sees the full scan and learns a per-echo log-scale of
//! the range error. Noise echoes are hard to predict from their neighborhood,
//! so their log-scale (the noise score) ends up high.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::MultiEchoOrderedCloud;
use crate::csr::{characteristics_map, CsrConfig, CsrNeighbors};
use crate::error::{Error, Result};
use crate::neighbors::{encode_features, gather_neighbors, nearest_distance, EncoderConfig, FeatureTensor};
use crate::nn::{backward, forward, network_input, Learner, ParameterStore};

/// Bounds on the predicted error scale exp(O_cor) inside the loss.
pub const SCALE_MIN: f64 = 1e-6;
pub const SCALE_MAX: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplied into the learning rate after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Weight of the scaled range error.
    pub lambda: f64,
    /// Probability that a valid echo is hidden in a step.
    pub blind_fraction: f64,
    pub seed: u64,
    /// Adds the characteristic-space regularizer to the loss.
    pub use_csr: bool,
    pub csr: CsrConfig,
    /// Gradients with a larger global L2 norm are scaled down to it; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.01,
            lr_decay: 0.99,
            momentum: 0.9,
            lambda: 5.0,
            blind_fraction: 0.5,
            seed: 0,
            use_csr: true,
            csr: CsrConfig::default(),
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.grad_clip >= 0.0
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && (0.0..1.0).contains(&self.momentum)
            && self.lambda > 0.0
            && self.lambda.is_finite()
            && self.blind_fraction > 0.0
            && self.blind_fraction <= 1.0;
        if !ok {
            return Err(Error::Config(
                "training needs lr >= 0, grad_clip >= 0, 0 < lr_decay <= 1, 0 <= momentum < 1, lambda > 0 and 0 < blind_fraction <= 1"
                    .into(),
            ));
        }
        self.csr.validate()
    }

    /// Learning rate used during `epoch` (zero-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }
}

/// Per-meter normalizer of the range error: ceil(r), at least 1.
pub fn ceil_meters(r: f64) -> f64 {
    r.ceil().max(1.0)
}

/// Loss value and its gradients with respect to both learner outputs.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub loss: f64,
    pub grad_coordinate: Vec<f64>,
    pub grad_correlation: Vec<f64>,
    pub selected: usize,
}

/// Mean over hidden valid echoes of
/// `lambda * |O_coo - r| / (ceil(r) * clamp(exp(O_cor))) + O_cor + penalty`.
///
/// All slices are flat per echo. `penalty` is the characteristic-space term
/// already evaluated on `o_cor` (zeros when disabled).
pub fn blind_spot_loss(
    o_coo: &[f64],
    o_cor: &[f64],
    ranges: &[f64],
    hidden: &[bool],
    penalty: &[f64],
    lambda: f64,
) -> Result<LossTerms> {
    let n = ranges.len();
    if [o_coo.len(), o_cor.len(), hidden.len(), penalty.len()].iter().any(|&l| l != n) {
        return Err(Error::Shape("loss inputs differ in length".into()));
    }
    let selected = hidden.iter().filter(|&&m| m).count();
    if selected == 0 {
        return Err(Error::EmptySubset);
    }
    let inv = 1.0 / selected as f64;
    let mut loss = 0.0;
    let mut gc = vec![0.0; n];
    let mut gs = vec![0.0; n];
    for i in 0..n {
        if !hidden[i] {
            continue;
        }
        let raw_scale = o_cor[i].exp();
        let scale = raw_scale.clamp(SCALE_MIN, SCALE_MAX);
        let diff = o_coo[i] - ranges[i];
        let norm = ceil_meters(ranges[i]);
        let fit = lambda * diff.abs() / (norm * scale);
        loss += fit + o_cor[i] + penalty[i];
        gc[i] = inv * lambda * diff.signum() * f64::from(diff != 0.0) / (norm * scale);
        let dscale = if (SCALE_MIN..=SCALE_MAX).contains(&raw_scale) { -fit } else { 0.0 };
        gs[i] = inv * (dscale + 1.0);
    }
    Ok(LossTerms {
        loss: loss * inv,
        grad_coordinate: gc,
        grad_correlation: gs,
        selected,
    })
}

/// Everything about a scan that stays fixed during training.
#[derive(Clone, Debug)]
pub struct PreparedScan {
    pub cloud: MultiEchoOrderedCloud,
    pub features: FeatureTensor,
    pub correlation_input: Vec<f64>,
    pub ranges: Vec<f64>,
    pub valid: Vec<bool>,
    pub csr: CsrNeighbors,
}

pub fn prepare_scan(
    cloud: &MultiEchoOrderedCloud,
    encoder: &EncoderConfig,
    params: &ParameterStore,
    csr: &CsrConfig,
) -> Result<PreparedScan> {
    let neighbors = gather_neighbors(cloud, encoder)?;
    let features = encode_features(cloud, &neighbors)?;
    let correlation_input = network_input(&features, &params.config)?;
    let theta = characteristics_map(cloud, &nearest_distance(&neighbors))?;
    let csr = CsrNeighbors::build(&theta, csr)?;
    Ok(PreparedScan {
        cloud: cloud.clone(),
        features,
        correlation_input,
        ranges: cloud.records().iter().map(|p| if p.valid { p.range() } else { 0.0 }).collect(),
        valid: cloud.records().iter().map(|p| p.valid).collect(),
        csr,
    })
}

/// Draws the hidden echo set: each valid echo independently with probability `fraction`.
pub fn sample_hidden(valid: &[bool], fraction: f64, rng: &mut impl Rng) -> Vec<bool> {
    valid.iter().map(|&v| v && rng.gen_bool(fraction)).collect()
}

/// Range-learner input with every hidden strongest echo removed from all neighbor lists.
pub fn coordinate_input(scan: &PreparedScan, hidden: &[bool], params: &ParameterStore) -> Result<Vec<f64>> {
    let ne = scan.cloud.echoes();
    let hidden_cells: Vec<bool> = (0..scan.cloud.groups()).map(|c| hidden[c * ne]).collect();
    network_input(&scan.features.without_sources(&hidden_cells), &params.config)
}

/// Loss and full parameter gradient of one step on one scan.
pub fn loss_and_gradient(
    params: &ParameterStore,
    scan: &PreparedScan,
    hidden: &[bool],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (h, w) = (scan.cloud.height(), scan.cloud.width());
    let coo = forward(params, Learner::Coordinate, coordinate_input(scan, hidden, params)?, h, w)?;
    let cor = forward(params, Learner::Correlation, scan.correlation_input.clone(), h, w)?;
    let o_coo = coo.output(&params.config);
    let o_cor = cor.output(&params.config);
    let penalty = if cfg.use_csr {
        scan.csr.penalty(&o_cor, &cfg.csr)
    } else {
        vec![0.0; o_cor.len()]
    };
    let mut terms = blind_spot_loss(&o_coo, &o_cor, &scan.ranges, hidden, &penalty, cfg.lambda)?;
    if cfg.use_csr {
        let inv = 1.0 / terms.selected as f64;
        let weight: Vec<f64> = hidden.iter().map(|&m| if m { inv } else { 0.0 }).collect();
        let g = scan.csr.penalty_backward(&o_cor, &weight, &cfg.csr);
        for (a, b) in terms.grad_correlation.iter_mut().zip(g) {
            *a += b;
        }
    }
    let mut grads = params.zeros_like();
    backward(params, &coo, &terms.grad_coordinate, &mut grads);
    backward(params, &cor, &terms.grad_correlation, &mut grads);
    Ok((terms.loss, grads))
}

/// Loss only, for finite-difference checks.
pub fn loss_value(params: &ParameterStore, scan: &PreparedScan, hidden: &[bool], cfg: &TrainConfig) -> Result<f64> {
    let (h, w) = (scan.cloud.height(), scan.cloud.width());
    let o_coo = forward(params, Learner::Coordinate, coordinate_input(scan, hidden, params)?, h, w)?
        .output(&params.config);
    let o_cor = forward(params, Learner::Correlation, scan.correlation_input.clone(), h, w)?.output(&params.config);
    let penalty = if cfg.use_csr {
        scan.csr.penalty(&o_cor, &cfg.csr)
    } else {
        vec![0.0; o_cor.len()]
    };
    Ok(blind_spot_loss(&o_coo, &o_cor, &scan.ranges, hidden, &penalty, cfg.lambda)?.loss)
}

/// SGD with classical momentum: `v = mu v + g; p -= lr v`.
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
    momentum: f64,
}

impl Sgd {
    pub fn new(params: &ParameterStore, momentum: f64) -> Self {
        Sgd {
            velocity: params.zeros_like(),
            momentum,
        }
    }

    pub fn step(&mut self, params: &mut ParameterStore, grads: &[Vec<f64>], lr: f64) {
        for ((t, v), g) in params.tensors.iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((p, v), g) in t.values.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

/// Writes the loss history as CSV (`epoch,mean_loss,learning_rate`).
pub fn write_loss_log(history: &[EpochRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "mean_loss", "learning_rate"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.mean_loss.to_string(), r.learning_rate.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let field = |i: usize| -> Result<&str> {
            row.get(i).ok_or_else(|| Error::Format("loss log row is too short".into()))
        };
        let bad = |_| Error::Format("loss log holds a non-numeric field".into());
        out.push(EpochRecord {
            epoch: field(0)?.parse().map_err(|_| Error::Format("bad epoch".into()))?,
            mean_loss: field(1)?.parse().map_err(bad)?,
            learning_rate: field(2)?.parse().map_err(bad)?,
        });
    }
    Ok(out)
}

/// Trains from `params` on `scans` and returns the per-epoch loss history.
///
/// Scan order and hidden sets come from `cfg.seed`, so a run is reproducible.
/// Scans with no valid echo are skipped. `on_epoch` sees every record as it
/// is produced.
pub fn train(
    params: &mut ParameterStore,
    encoder: &EncoderConfig,
    scans: &[MultiEchoOrderedCloud],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    encoder.validate()?;
    if encoder.slots() != params.config.neighbors {
        return Err(Error::Config(format!(
            "encoder yields {} slots per query but the network expects {}",
            encoder.slots(),
            params.config.neighbors
        )));
    }
    let prepared: Vec<PreparedScan> = scans
        .iter()
        .filter(|c| c.valid_count() > 0)
        .map(|c| prepare_scan(c, encoder, params, &cfg.csr))
        .collect::<Result<_>>()?;
    if prepared.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut opt = Sgd::new(params, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for &i in &order {
            let scan = &prepared[i];
            let hidden = sample_hidden(&scan.valid, cfg.blind_fraction, &mut rng);
            if !hidden.iter().any(|&m| m) {
                continue;
            }
            let (loss, mut grads) = loss_and_gradient(params, scan, &hidden, cfg)?;
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                let shrink = cfg.grad_clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= shrink);
            }
            opt.step(params, &grads, lr);
            total += loss;
            steps += 1;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: if steps > 0 { total / steps as f64 } else { f64::NAN },
            learning_rate: lr,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_matches_hand_value() {
        // One hidden echo: r = 2.5 -> ceil 3; O_cor = 0 -> scale 1; |3.1 - 2.5| = 0.6.
        let t = blind_spot_loss(&[3.1, 9.0], &[0.0, 4.0], &[2.5, 1.0], &[true, false], &[0.25, 7.0], 5.0).unwrap();
        assert!((t.loss - (5.0 * 0.6 / 3.0 + 0.25)).abs() < 1e-12);
        assert_eq!(t.grad_coordinate[1], 0.0);
        assert!((t.grad_correlation[0] - (1.0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_subset_is_an_error() {
        let r = blind_spot_loss(&[1.0], &[0.0], &[1.0], &[false], &[0.0], 5.0);
        assert!(matches!(r, Err(Error::EmptySubset)));
    }

    #[test]
    fn short_ranges_use_unit_normalizer() {
        assert_eq!(ceil_meters(0.2), 1.0);
        assert_eq!(ceil_meters(1.0), 1.0);
        assert_eq!(ceil_meters(1.01), 2.0);
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let o_coo = [3.1, 0.7, 2.2];
        let o_cor = [0.3, -0.4, 1.1];
        let r = [2.5, 1.5, 4.0];
        let hidden = [true, true, false];
        let pen = [0.0; 3];
        let t = blind_spot_loss(&o_coo, &o_cor, &r, &hidden, &pen, 5.0).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut a = o_coo;
            a[i] += h;
            let mut b = o_coo;
            b[i] -= h;
            let fd = (blind_spot_loss(&a, &o_cor, &r, &hidden, &pen, 5.0).unwrap().loss
                - blind_spot_loss(&b, &o_cor, &r, &hidden, &pen, 5.0).unwrap().loss)
                / (2.0 * h);
            assert!((fd - t.grad_coordinate[i]).abs() < 1e-6);
            let mut a = o_cor;
            a[i] += h;
            let mut b = o_cor;
            b[i] -= h;
            let fd = (blind_spot_loss(&o_coo, &a, &r, &hidden, &pen, 5.0).unwrap().loss
                - blind_spot_loss(&o_coo, &b, &r, &hidden, &pen, 5.0).unwrap().loss)
                / (2.0 * h);
            assert!((fd - t.grad_correlation[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate_at(0), 0.01);
        assert!((c.learning_rate_at(2) - 0.01 * 0.99 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn momentum_update() {
        let cfg = crate::nn::NetworkConfig {
            encoder_channels: 1,
            block_widths: vec![],
            neighbors: 1,
            ..Default::default()
        };
        let mut p = ParameterStore::init(&cfg).unwrap();
        let before = p.tensors[1].values[0];
        let mut opt = Sgd::new(&p, 0.9);
        let mut g = p.zeros_like();
        g[1][0] = 1.0;
        opt.step(&mut p, &g, 0.1);
        opt.step(&mut p, &g, 0.1);
        // v1 = 1, v2 = 1.9: total step 0.1 * 2.9.
        assert!((p.tensors[1].values[0] - (before - 0.29)).abs() < 1e-12);
    }

    #[test]
    fn bad_config_rejected() {
        for c in [
            TrainConfig {
                blind_fraction: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: -0.1,
                ..TrainConfig::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
        let all_hidden = TrainConfig {
            blind_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(all_hidden.validate().is_ok());
    }
}
