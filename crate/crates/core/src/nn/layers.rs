//! Grid layers on channel-major (C x H x W) buffers.
//!
//! 3x3 convolutions wrap around in the column (azimuth) direction and pad
//! with zeros above and below. Work is split by output channel, or by input
//! channel for input gradients, so every buffer element is written by exactly
//! one task and summation order never depends on scheduling.

use serde::{Deserialize, Serialize};

use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `0.1 x + 0.9 (softplus(x) - ln 2)`: leaky-ReLU shaped and smooth at 0.
    SmoothLeaky,
    /// Piecewise linear with slope 0.1 below zero.
    LeakyRelu,
    Tanh,
}

const LEAK: f64 = 0.1;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::SmoothLeaky => LEAK * x + (1.0 - LEAK) * (softplus(x) - std::f64::consts::LN_2),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAK * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::SmoothLeaky => LEAK + (1.0 - LEAK) * sigmoid(x),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAK
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn map(self, pre: &[f64]) -> Vec<f64> {
        pre.iter().map(|&x| self.apply(x)).collect()
    }

    /// `grad * f'(pre)` elementwise.
    pub fn backward(self, pre: &[f64], grad: &[f64]) -> Vec<f64> {
        pre.iter().zip(grad).map(|(&x, &g)| g * self.derivative(x)).collect()
    }
}

/// Per-pixel affine map: `out[o] = bias[o] + sum_i weight[o, i] * input[i]`.
pub fn pointwise_forward(input: &[f64], c_in: usize, pixels: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let c_out = bias.len();
    debug_assert_eq!(weight.len(), c_out * c_in);
    debug_assert_eq!(input.len(), c_in * pixels);
    let mut out = vec![0.0; c_out * pixels];
    par::for_each_chunk_mut(&mut out, pixels, |o, plane| {
        plane.fill(bias[o]);
        for i in 0..c_in {
            let wv = weight[o * c_in + i];
            if wv == 0.0 {
                continue;
            }
            let src = &input[i * pixels..(i + 1) * pixels];
            for (d, s) in plane.iter_mut().zip(src) {
                *d += wv * s;
            }
        }
    });
    out
}

pub struct Grads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn pointwise_backward(
    input: &[f64],
    grad_out: &[f64],
    c_in: usize,
    pixels: usize,
    weight: &[f64],
    need_input: bool,
) -> Grads {
    let c_out = grad_out.len() / pixels;
    let per_out = par::map_range(c_out, |o| {
        let g = &grad_out[o * pixels..(o + 1) * pixels];
        let wg: Vec<f64> = (0..c_in)
            .map(|i| {
                let x = &input[i * pixels..(i + 1) * pixels];
                g.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect();
        (wg, g.iter().sum::<f64>())
    });
    let mut wgrad = Vec::with_capacity(c_out * c_in);
    let mut bgrad = Vec::with_capacity(c_out);
    for (wg, b) in per_out {
        wgrad.extend(wg);
        bgrad.push(b);
    }
    let mut ginput = Vec::new();
    if need_input {
        ginput = vec![0.0; c_in * pixels];
        par::for_each_chunk_mut(&mut ginput, pixels, |i, plane| {
            for o in 0..c_out {
                let wv = weight[o * c_in + i];
                let g = &grad_out[o * pixels..(o + 1) * pixels];
                for (d, s) in plane.iter_mut().zip(g) {
                    *d += wv * s;
                }
            }
        });
    }
    Grads {
        input: ginput,
        weight: wgrad,
        bias: bgrad,
    }
}

/// Pads each plane with a zero row above and below and one wrapped column on each side.
fn pad(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; channels * ph * pw];
    for c in 0..channels {
        for y in 0..h {
            let src = &input[(c * h + y) * w..(c * h + y + 1) * w];
            let row = &mut out[(c * ph + y + 1) * pw..(c * ph + y + 2) * pw];
            row[1..=w].copy_from_slice(src);
            row[0] = src[w - 1];
            row[w + 1] = src[0];
        }
    }
    out
}

/// 3x3 convolution, `weight` laid out as [c_out][c_in][3][3].
pub fn conv3x3_forward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let c_out = bias.len();
    let (ph, pw) = (h + 2, w + 2);
    let padded = pad(input, c_in, h, w);
    let mut out = vec![0.0; c_out * h * w];
    par::for_each_chunk_mut(&mut out, h * w, |o, plane| {
        plane.fill(bias[o]);
        for i in 0..c_in {
            let src = &padded[i * ph * pw..(i + 1) * ph * pw];
            let k = &weight[(o * c_in + i) * 9..(o * c_in + i + 1) * 9];
            for y in 0..h {
                let dst = &mut plane[y * w..(y + 1) * w];
                for dy in 0..3 {
                    let row = &src[(y + dy) * pw..(y + dy + 1) * pw];
                    let (k0, k1, k2) = (k[dy * 3], k[dy * 3 + 1], k[dy * 3 + 2]);
                    for x in 0..w {
                        dst[x] += k0 * row[x] + k1 * row[x + 1] + k2 * row[x + 2];
                    }
                }
            }
        }
    });
    out
}

pub fn conv3x3_backward(
    input: &[f64],
    grad_out: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    need_input: bool,
) -> Grads {
    let c_out = grad_out.len() / (h * w);
    let (ph, pw) = (h + 2, w + 2);
    let padded = pad(input, c_in, h, w);
    let per_out = par::map_range(c_out, |o| {
        let g = &grad_out[o * h * w..(o + 1) * h * w];
        let mut wg = vec![0.0; c_in * 9];
        for i in 0..c_in {
            let src = &padded[i * ph * pw..(i + 1) * ph * pw];
            for dy in 0..3 {
                for dx in 0..3 {
                    let mut acc = 0.0;
                    for y in 0..h {
                        let gr = &g[y * w..(y + 1) * w];
                        let row = &src[(y + dy) * pw + dx..(y + dy) * pw + dx + w];
                        acc += gr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                    }
                    wg[i * 9 + dy * 3 + dx] = acc;
                }
            }
        }
        (wg, g.iter().sum::<f64>())
    });
    let mut wgrad = Vec::with_capacity(c_out * c_in * 9);
    let mut bgrad = Vec::with_capacity(c_out);
    for (wg, b) in per_out {
        wgrad.extend(wg);
        bgrad.push(b);
    }

    let mut ginput = Vec::new();
    if need_input {
        ginput = vec![0.0; c_in * h * w];
        par::for_each_chunk_mut(&mut ginput, h * w, |i, plane| {
            let mut gp = vec![0.0; ph * pw];
            for o in 0..c_out {
                let g = &grad_out[o * h * w..(o + 1) * h * w];
                let k = &weight[(o * c_in + i) * 9..(o * c_in + i + 1) * 9];
                for y in 0..h {
                    let gr = &g[y * w..(y + 1) * w];
                    for dy in 0..3 {
                        let row = &mut gp[(y + dy) * pw..(y + dy + 1) * pw];
                        let (k0, k1, k2) = (k[dy * 3], k[dy * 3 + 1], k[dy * 3 + 2]);
                        for x in 0..w {
                            let v = gr[x];
                            row[x] += k0 * v;
                            row[x + 1] += k1 * v;
                            row[x + 2] += k2 * v;
                        }
                    }
                }
            }
            // Fold the padded gradient back; wrapped columns return to their source.
            for y in 0..h {
                let row = &gp[(y + 1) * pw..(y + 2) * pw];
                let dst = &mut plane[y * w..(y + 1) * w];
                for x in 0..w {
                    dst[x] += row[x + 1];
                }
                dst[w - 1] += row[0];
                dst[0] += row[w + 1];
            }
        });
    }
    Grads {
        input: ginput,
        weight: wgrad,
        bias: bgrad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Direct definition of the wrapped convolution, one output at a time.
    fn conv_oracle(input: &[f64], c_in: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let c_out = bias.len();
        let mut out = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[o];
                    for i in 0..c_in {
                        for dy in 0..3 {
                            let yy = y as i64 + dy as i64 - 1;
                            if yy < 0 || yy >= h as i64 {
                                continue;
                            }
                            for dx in 0..3 {
                                let xx = (x as i64 + dx as i64 - 1).rem_euclid(w as i64) as usize;
                                acc += weight[((o * c_in + i) * 3 + dy) * 3 + dx]
                                    * input[(i * h + yy as usize) * w + xx];
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        for &(c_in, c_out, h, w) in &[(2, 3, 4, 5), (1, 1, 1, 1), (3, 2, 2, 1), (2, 2, 3, 2)] {
            let x = lcg(c_in * h * w, 1);
            let k = lcg(c_out * c_in * 9, 2);
            let b = lcg(c_out, 3);
            let fast = conv3x3_forward(&x, c_in, h, w, &k, &b);
            let slow = conv_oracle(&x, c_in, h, w, &k, &b);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and in the weights; compare against the oracle.
        let (c_in, c_out, h, w) = (2, 3, 3, 4);
        let x = lcg(c_in * h * w, 4);
        let k = lcg(c_out * c_in * 9, 5);
        let b = vec![0.0; c_out];
        let g = lcg(c_out * h * w, 6);
        let grads = conv3x3_backward(&x, &g, c_in, h, w, &k, true);
        let dot = |y: &[f64]| -> f64 { y.iter().zip(&g).map(|(a, b)| a * b).sum() };
        for j in 0..x.len() {
            let mut e = vec![0.0; x.len()];
            e[j] = 1.0;
            let col = dot(&conv_oracle(&e, c_in, h, w, &k, &b));
            assert!((col - grads.input[j]).abs() < 1e-12, "input {j}");
        }
        for j in 0..k.len() {
            let mut e = vec![0.0; k.len()];
            e[j] = 1.0;
            let col = dot(&conv_oracle(&x, c_in, h, w, &e, &b));
            assert!((col - grads.weight[j]).abs() < 1e-12, "weight {j}");
        }
        let bsum: Vec<f64> = (0..c_out).map(|o| g[o * h * w..(o + 1) * h * w].iter().sum()).collect();
        assert_eq!(grads.bias, bsum);
    }

    #[test]
    fn pointwise_backward_is_adjoint() {
        let (c_in, c_out, n) = (3, 2, 5);
        let x = lcg(c_in * n, 7);
        let wt = lcg(c_out * c_in, 8);
        let b = lcg(c_out, 9);
        let g = lcg(c_out * n, 10);
        let y = pointwise_forward(&x, c_in, n, &wt, &b);
        assert!((y[0] - (b[0] + wt[0] * x[0] + wt[1] * x[n] + wt[2] * x[2 * n])).abs() < 1e-12);
        let grads = pointwise_backward(&x, &g, c_in, n, &wt, true);
        for i in 0..c_in {
            for p in 0..n {
                let expect: f64 = (0..c_out).map(|o| wt[o * c_in + i] * g[o * n + p]).sum();
                assert!((grads.input[i * n + p] - expect).abs() < 1e-12);
            }
        }
        for o in 0..c_out {
            for i in 0..c_in {
                let expect: f64 = (0..n).map(|p| g[o * n + p] * x[i * n + p]).sum();
                assert!((grads.weight[o * c_in + i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activation_derivatives() {
        for act in [Activation::SmoothLeaky, Activation::Tanh, Activation::LeakyRelu] {
            for &x in &[-3.0, -0.4, 0.3, 2.5] {
                let fd = (act.apply(x + 1e-6) - act.apply(x - 1e-6)) / 2e-6;
                assert!((fd - act.derivative(x)).abs() < 1e-6, "{act:?} at {x}");
            }
        }
        assert_eq!(Activation::SmoothLeaky.apply(0.0), 0.0);
        assert!(Activation::SmoothLeaky.apply(-50.0) < -4.0);
    }
}
