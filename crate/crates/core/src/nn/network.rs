//! The two per-pixel learners (range regression and noise correlation).
//!
//! Both learners share one architecture: a pointwise encoder from the neighbor
//! features to `encoder_channels`, a stack of residual blocks of two 3x3
//! convolutions, and a pointwise head with one output per echo slot. Their
//! parameters are independent and live together in one [`ParameterStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, softplus, softplus_inverse, sigmoid, Activation};
use crate::error::{Error, Result};
use crate::neighbors::FeatureTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Neighbor slots per query echo (k in KNN mode, window size in grid mode).
    pub neighbors: usize,
    pub echoes: usize,
    pub encoder_channels: usize,
    /// Hidden width of each residual block; one entry per block.
    pub block_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    /// Ranges are divided by this before entering the network, and the range
    /// head is scaled by it on the way out.
    pub range_scale: f64,
    /// Angle offsets are divided by this before entering the network.
    pub angle_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            neighbors: 5,
            echoes: 1,
            encoder_channels: 16,
            block_widths: vec![16; 3],
            activation: Activation::SmoothLeaky,
            seed: 0,
            range_scale: 20.0,
            angle_scale: 0.02,
        }
    }
}

impl NetworkConfig {
    /// Full-size two-echo configuration: 5 neighbors, 96 encoder channels and
    /// three blocks of width 108, about 1.13 million parameters over both
    /// learners. Meant for size comparisons, not for desk-scale training.
    pub fn full_scale() -> Self {
        NetworkConfig {
            neighbors: 5,
            echoes: 2,
            encoder_channels: 96,
            block_widths: vec![108; 3],
            ..NetworkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 || self.echoes == 0 || self.encoder_channels == 0 {
            return Err(Error::Config(
                "network needs at least one neighbor slot, echo and encoder channel".into(),
            ));
        }
        if self.block_widths.contains(&0) {
            return Err(Error::Config("residual block widths must be positive".into()));
        }
        if !(self.range_scale > 0.0 && self.range_scale.is_finite())
            || !(self.angle_scale > 0.0 && self.angle_scale.is_finite())
        {
            return Err(Error::Config("input scales must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn residual_blocks(&self) -> usize {
        self.block_widths.len()
    }

    /// Input features per cell.
    pub fn input_channels(&self) -> usize {
        self.neighbors * self.echoes * 3
    }

    /// Tensor names and shapes of one learner, in storage order.
    fn learner_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let s = self.encoder_channels;
        let mut out = vec![
            (format!("{prefix}.encoder.weight"), vec![s, self.input_channels()]),
            (format!("{prefix}.encoder.bias"), vec![s]),
        ];
        for (b, &w) in self.block_widths.iter().enumerate() {
            out.push((format!("{prefix}.block{b}.conv1.weight"), vec![w, s, 3, 3]));
            out.push((format!("{prefix}.block{b}.conv1.bias"), vec![w]));
            out.push((format!("{prefix}.block{b}.conv2.weight"), vec![s, w, 3, 3]));
            out.push((format!("{prefix}.block{b}.conv2.bias"), vec![s]));
        }
        out.push((format!("{prefix}.head.weight"), vec![self.echoes, s]));
        out.push((format!("{prefix}.head.bias"), vec![self.echoes]));
        out
    }

    /// Names and shapes of every tensor, range learner first.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = self.learner_shapes(Learner::Coordinate.prefix());
        out.extend(self.learner_shapes(Learner::Correlation.prefix()));
        out
    }

    /// Trainable scalars over both learners.
    pub fn parameter_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Learner {
    /// Predicts echo ranges (O_coo).
    Coordinate,
    /// Predicts per-echo log-scale noise scores (O_cor).
    Correlation,
}

impl Learner {
    pub fn prefix(self) -> &'static str {
        match self {
            Learner::Coordinate => "coord",
            Learner::Correlation => "corr",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named parameters of both learners in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    pub config: NetworkConfig,
    pub tensors: Vec<Tensor>,
}

impl ParameterStore {
    /// Freshly initialized parameters. Weights are uniform with variance
    /// 1/fan_in (second convolutions of each block scaled down by half);
    /// biases start at zero.
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = config
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let values = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let mut a = (3.0 / fan_in as f64).sqrt();
                    if name.contains(".conv2.") {
                        a *= 0.5;
                    }
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                };
                Tensor { name, shape, values }
            })
            .collect();
        Ok(ParameterStore {
            config: config.clone(),
            tensors,
        })
    }

    /// Rebuilds a store from named tensors, checking them against the config.
    pub fn from_tensors(config: NetworkConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.tensor_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if *name != t.name || *shape != t.shape || t.values.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, name, shape
                )));
            }
        }
        Ok(ParameterStore { config, tensors })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    fn learner_base(&self, learner: Learner) -> usize {
        match learner {
            Learner::Coordinate => 0,
            Learner::Correlation => self.tensors.len() / 2,
        }
    }

    /// Zero gradients shaped like the parameters.
    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.values.len()]).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Converts encoded neighbor features to a scaled, channel-major network input.
pub fn network_input(features: &FeatureTensor, config: &NetworkConfig) -> Result<Vec<f64>> {
    if features.slots != config.neighbors || features.echoes != config.echoes {
        return Err(Error::Shape(format!(
            "features have {} slots x {} echoes, network expects {} x {}",
            features.slots, features.echoes, config.neighbors, config.echoes
        )));
    }
    let pixels = features.height * features.width;
    let channels = features.channels();
    let k = features.slots;
    let mut out = vec![0.0; channels * pixels];
    for p in 0..pixels {
        for e in 0..features.echoes {
            let first = (p * features.echoes + e) * k;
            let present = features.present[first..first + k].iter().filter(|&&m| m).count();
            if present == 0 {
                continue;
            }
            // Sums over slots become means over present slots times k.
            let fill = k as f64 / present as f64;
            for c in first * 3..(first + k) * 3 {
                let scale = if c % 3 == 0 { config.range_scale } else { config.angle_scale };
                out[(c - p * channels) * pixels + p] = features.data[c] * fill / scale;
            }
        }
    }
    Ok(out)
}

struct BlockCache {
    input: Vec<f64>,
    act0: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub struct ForwardCache {
    learner: Learner,
    height: usize,
    width: usize,
    input: Vec<f64>,
    enc_pre: Vec<f64>,
    blocks: Vec<BlockCache>,
    trunk: Vec<f64>,
    /// Raw head output, echo-major planes (Ne x H*W).
    pub head: Vec<f64>,
    /// Fixed head offset, echo-major like `head`.
    offset: Vec<f64>,
}

impl ForwardCache {
    /// Learner output per echo, flattened as (h * W + w) * Ne + e.
    pub fn output(&self, config: &NetworkConfig) -> Vec<f64> {
        let pixels = self.height * self.width;
        let ne = config.echoes;
        let mut out = vec![0.0; pixels * ne];
        for e in 0..ne {
            for p in 0..pixels {
                let v = self.head[e * pixels + p] + self.offset[e * pixels + p];
                out[p * ne + e] = match self.learner {
                    Learner::Coordinate => config.range_scale * softplus(v),
                    Learner::Correlation => v,
                };
            }
        }
        out
    }
}

pub fn forward(
    params: &ParameterStore,
    learner: Learner,
    input: Vec<f64>,
    height: usize,
    width: usize,
) -> Result<ForwardCache> {
    let cfg = &params.config;
    let pixels = height * width;
    if pixels == 0 || input.len() != cfg.input_channels() * pixels {
        return Err(Error::Shape(format!(
            "input of {} values does not fit {} channels on a {height}x{width} grid",
            input.len(),
            cfg.input_channels()
        )));
    }
    let base = params.learner_base(learner);
    let t = |i: usize| &params.tensors[base + i].values;
    let act = cfg.activation;
    let s = cfg.encoder_channels;

    let enc_pre = layers::pointwise_forward(&input, cfg.input_channels(), pixels, t(0), t(1));
    let mut x = act.map(&enc_pre);
    let mut blocks = Vec::with_capacity(cfg.residual_blocks());
    for (b, &w) in cfg.block_widths.iter().enumerate() {
        let i = 2 + 4 * b;
        let act0 = act.map(&x);
        let pre1 = layers::conv3x3_forward(&act0, s, height, width, t(i), t(i + 1));
        debug_assert_eq!(pre1.len(), w * pixels);
        let act1 = act.map(&pre1);
        let delta = layers::conv3x3_forward(&act1, w, height, width, t(i + 2), t(i + 3));
        let input = x.clone();
        for (a, d) in x.iter_mut().zip(&delta) {
            *a += d;
        }
        blocks.push(BlockCache { input, act0, pre1, act1 });
    }
    let h = 2 + 4 * cfg.residual_blocks();
    let head = layers::pointwise_forward(&x, s, pixels, t(h), t(h + 1));
    let offset = match learner {
        Learner::Coordinate => neighbor_mean_offset(&input, cfg, pixels),
        Learner::Correlation => vec![0.0; head.len()],
    };
    Ok(ForwardCache {
        learner,
        height,
        width,
        input,
        enc_pre,
        blocks,
        trunk: x,
        head,
        offset,
    })
}

/// Head offset that makes a zero head predict the mean range of the present
/// neighbors. Queries without neighbors get no offset.
fn neighbor_mean_offset(input: &[f64], cfg: &NetworkConfig, pixels: usize) -> Vec<f64> {
    let k = cfg.neighbors;
    let mut offset = vec![0.0; cfg.echoes * pixels];
    for e in 0..cfg.echoes {
        for p in 0..pixels {
            // Inputs hold k / present times each scaled range, so the plain sum over k is the mean.
            let mean = (0..k).map(|j| input[(e * k + j) * 3 * pixels + p]).sum::<f64>() / k as f64;
            if mean > 0.0 {
                offset[e * pixels + p] = softplus_inverse(mean);
            }
        }
    }
    offset
}

/// Accumulates parameter gradients of one learner into `grads`, given the
/// gradient with respect to its output in the flat (h * W + w) * Ne + e order.
pub fn backward(params: &ParameterStore, cache: &ForwardCache, grad_output: &[f64], grads: &mut [Vec<f64>]) {
    let cfg = &params.config;
    let (height, width) = (cache.height, cache.width);
    let pixels = height * width;
    let ne = cfg.echoes;
    let s = cfg.encoder_channels;
    let act = cfg.activation;
    let base = params.learner_base(cache.learner);
    let t = |i: usize| &params.tensors[base + i].values;

    let mut g_head = vec![0.0; ne * pixels];
    for e in 0..ne {
        for p in 0..pixels {
            let g = grad_output[p * ne + e];
            g_head[e * pixels + p] = match cache.learner {
                Learner::Coordinate => {
                    g * cfg.range_scale * sigmoid(cache.head[e * pixels + p] + cache.offset[e * pixels + p])
                }
                Learner::Correlation => g,
            };
        }
    }
    let mut add = |i: usize, g: Vec<f64>| {
        for (a, b) in grads[base + i].iter_mut().zip(g) {
            *a += b;
        }
    };

    let hi = 2 + 4 * cfg.residual_blocks();
    let head = layers::pointwise_backward(&cache.trunk, &g_head, s, pixels, t(hi), true);
    add(hi, head.weight);
    add(hi + 1, head.bias);
    let mut g = head.input;

    // The trunk gradient passes each residual block unchanged; the branch adds to it.
    for (b, blk) in cache.blocks.iter().enumerate().rev() {
        let i = 2 + 4 * b;
        let w = cfg.block_widths[b];
        let c2 = layers::conv3x3_backward(&blk.act1, &g, w, height, width, t(i + 2), true);
        add(i + 2, c2.weight);
        add(i + 3, c2.bias);
        let g_pre1 = act.backward(&blk.pre1, &c2.input);
        let c1 = layers::conv3x3_backward(&blk.act0, &g_pre1, s, height, width, t(i), true);
        add(i, c1.weight);
        add(i + 1, c1.bias);
        let g_in = act.backward(&blk.input, &c1.input);
        for (a, d) in g.iter_mut().zip(&g_in) {
            *a += d;
        }
    }

    let g_pre = act.backward(&cache.enc_pre, &g);
    let enc = layers::pointwise_backward(&cache.input, &g_pre, cfg.input_channels(), pixels, t(0), false);
    add(0, enc.weight);
    add(1, enc.bias);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_weight_count() {
        let cfg = NetworkConfig {
            neighbors: 5,
            echoes: 2,
            encoder_channels: 8,
            ..NetworkConfig::default()
        };
        let shapes = cfg.tensor_shapes();
        let n = |name: &str| -> usize {
            shapes.iter().find(|(n, _)| n == name).unwrap().1.iter().product()
        };
        assert_eq!(n("coord.encoder.weight") + n("coord.encoder.bias"), 248);
    }

    #[test]
    fn parameter_count_formula() {
        let cfg = NetworkConfig {
            neighbors: 4,
            echoes: 2,
            encoder_channels: 6,
            block_widths: vec![5, 7],
            ..NetworkConfig::default()
        };
        let d = 4 * 2 * 3;
        let per = d * 6 + 6 + (6 * 5 * 9 + 5 + 5 * 6 * 9 + 6) + (6 * 7 * 9 + 7 + 7 * 6 * 9 + 6) + 6 * 2 + 2;
        assert_eq!(cfg.parameter_count(), 2 * per);
        assert_eq!(ParameterStore::init(&cfg).unwrap().parameter_count(), 2 * per);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = NetworkConfig::default();
        let a = ParameterStore::init(&cfg).unwrap();
        assert_eq!(a, ParameterStore::init(&cfg).unwrap());
        let b = ParameterStore::init(&NetworkConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn wrong_input_size_is_shape_error() {
        let p = ParameterStore::init(&NetworkConfig::default()).unwrap();
        assert!(matches!(forward(&p, Learner::Correlation, vec![0.0; 7], 2, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn range_output_is_positive() {
        let cfg = NetworkConfig {
            block_widths: vec![4],
            encoder_channels: 4,
            ..NetworkConfig::default()
        };
        let p = ParameterStore::init(&cfg).unwrap();
        let input: Vec<f64> = (0..cfg.input_channels() * 6).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let out = forward(&p, Learner::Coordinate, input, 2, 3).unwrap().output(&cfg);
        assert!(out.iter().all(|&v| v > 0.0));
    }
}
