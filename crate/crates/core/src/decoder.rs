//! The decoder network: latent `d` → hidden → hidden → 12 raw outputs, with
//! ReLU after both hidden layers and an affine output. Forward and backward
//! passes are written out by hand.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, domain, Error, Result};
use crate::likelihoods::{link_unchecked, ThetaVector};
use crate::rng::{self, stream};
use crate::task::THETA_DIM;

pub const DEFAULT_LATENT_DIM: usize = 3;
pub const DEFAULT_HIDDEN: usize = THETA_DIM;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub latent: usize,
    pub hidden: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { latent: DEFAULT_LATENT_DIM, hidden: DEFAULT_HIDDEN }
    }
}

impl Dims {
    fn offsets(&self) -> Offsets {
        let (d, h, o) = (self.latent, self.hidden, THETA_DIM);
        let w1 = 0;
        let b1 = w1 + h * d;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        Offsets { w1, b1, w2, b2, w3, b3, len: b3 + o }
    }

    pub fn n_params(&self) -> usize {
        self.offsets().len
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

/// All decoder weights in one flat row-major buffer
/// `[W1 | b1 | W2 | b2 | W3 | b3]`. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    dims: Dims,
    params: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    pub out: [f64; THETA_DIM],
}

impl DecoderWeights {
    pub fn zeros(dims: Dims) -> Self {
        Self { dims, params: vec![0.0; dims.n_params()] }
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init(dims: Dims, seed: u64) -> Self {
        let mut w = Self::zeros(dims);
        let mut r = rng::rng_from(seed, &[stream::DECODER_INIT]);
        let o = dims.offsets();
        let layers = [
            (o.w1, dims.hidden, dims.latent),
            (o.w2, dims.hidden, dims.hidden),
            (o.w3, THETA_DIM, dims.hidden),
        ];
        for (start, rows, cols) in layers {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            for p in &mut w.params[start..start + rows * cols] {
                *p = r.random_range(-limit..limit);
            }
        }
        w
    }

    pub fn from_params(dims: Dims, params: Vec<f64>) -> Result<Self> {
        if params.len() != dims.n_params() {
            return Err(contract(format!("expected {} params, got {}", dims.n_params(), params.len())));
        }
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn latent_dim(&self) -> usize {
        self.dims.latent
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let o = self.dims.offsets();
        &mut self.params[o.w1..o.b1]
    }

    pub fn b1_mut(&mut self) -> &mut [f64] {
        let o = self.dims.offsets();
        &mut self.params[o.b1..o.w2]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        let o = self.dims.offsets();
        &mut self.params[o.w2..o.b2]
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        let o = self.dims.offsets();
        &mut self.params[o.b2..o.w3]
    }

    pub fn w3_mut(&mut self) -> &mut [f64] {
        let o = self.dims.offsets();
        &mut self.params[o.w3..o.b3]
    }

    pub fn b3(&self) -> &[f64] {
        let o = self.dims.offsets();
        &self.params[o.b3..o.len]
    }

    pub fn b3_mut(&mut self) -> &mut [f64] {
        let o = self.dims.offsets();
        &mut self.params[o.b3..o.len]
    }

    /// Raw (unconstrained) outputs for latent `x`.
    pub fn forward(&self, x: &[f64]) -> Result<[f64; THETA_DIM]> {
        self.check_input(x)?;
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache);
        Ok(cache.out)
    }

    /// `link(forward(x))`.
    pub fn decode(&self, x: &[f64]) -> Result<ThetaVector> {
        Ok(link_unchecked(&self.forward(x)?))
    }

    pub(crate) fn decode_unchecked(&self, x: &[f64], cache: &mut ForwardCache) -> ThetaVector {
        self.forward_cached(x, cache);
        link_unchecked(&cache.out)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims.latent {
            return Err(contract(format!("latent has {} dims, decoder expects {}", x.len(), self.dims.latent)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(domain("non-finite latent input"));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) {
        let (d, h) = (self.dims.latent, self.dims.hidden);
        let o = self.dims.offsets();
        let p = &self.params;
        cache.pre1.resize(h, 0.0);
        cache.h1.resize(h, 0.0);
        cache.pre2.resize(h, 0.0);
        cache.h2.resize(h, 0.0);
        for i in 0..h {
            let row = &p[o.w1 + i * d..o.w1 + (i + 1) * d];
            let z = p[o.b1 + i] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            cache.pre1[i] = z;
            cache.h1[i] = z.max(0.0);
        }
        for i in 0..h {
            let row = &p[o.w2 + i * h..o.w2 + (i + 1) * h];
            let z = p[o.b2 + i] + row.iter().zip(&cache.h1).map(|(w, v)| w * v).sum::<f64>();
            cache.pre2[i] = z;
            cache.h2[i] = z.max(0.0);
        }
        for i in 0..THETA_DIM {
            let row = &p[o.w3 + i * h..o.w3 + (i + 1) * h];
            cache.out[i] = p[o.b3 + i] + row.iter().zip(&cache.h2).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Reverse-mode gradients of `grad_out · forward(x)`.
    ///
    /// Returns `(grad_w, grad_x)`; `grad_w` shares this decoder's layout.
    pub fn backward(&self, x: &[f64], grad_out: &[f64; THETA_DIM]) -> Result<(DecoderWeights, Vec<f64>)> {
        self.check_input(x)?;
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache);
        let mut grad_w = DecoderWeights::zeros(self.dims);
        let mut grad_x = vec![0.0; self.dims.latent];
        self.backward_into(x, &cache, grad_out, Some(&mut grad_w.params), &mut grad_x);
        Ok((grad_w, grad_x))
    }

    /// Accumulates (`+=`) weight gradients into `grad_w` when given, and
    /// writes the input gradient into `grad_x`.
    pub(crate) fn backward_into(
        &self,
        x: &[f64],
        cache: &ForwardCache,
        grad_out: &[f64; THETA_DIM],
        mut grad_w: Option<&mut [f64]>,
        grad_x: &mut [f64],
    ) {
        let (d, h) = (self.dims.latent, self.dims.hidden);
        let o = self.dims.offsets();
        let p = &self.params;

        let mut g_h2 = vec![0.0; h];
        for i in 0..THETA_DIM {
            let g = grad_out[i];
            if g == 0.0 {
                continue;
            }
            if let Some(gw) = grad_w.as_deref_mut() {
                gw[o.b3 + i] += g;
                for j in 0..h {
                    gw[o.w3 + i * h + j] += g * cache.h2[j];
                }
            }
            for j in 0..h {
                g_h2[j] += g * p[o.w3 + i * h + j];
            }
        }

        let mut g_h1 = vec![0.0; h];
        for i in 0..h {
            // ReLU subgradient is 0 at exactly 0.
            if cache.pre2[i] <= 0.0 {
                continue;
            }
            let g = g_h2[i];
            if let Some(gw) = grad_w.as_deref_mut() {
                gw[o.b2 + i] += g;
                for j in 0..h {
                    gw[o.w2 + i * h + j] += g * cache.h1[j];
                }
            }
            for j in 0..h {
                g_h1[j] += g * p[o.w2 + i * h + j];
            }
        }

        grad_x.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..h {
            if cache.pre1[i] <= 0.0 {
                continue;
            }
            let g = g_h1[i];
            if let Some(gw) = grad_w.as_deref_mut() {
                gw[o.b1 + i] += g;
                for j in 0..d {
                    gw[o.w1 + i * d + j] += g * x[j];
                }
            }
            for j in 0..d {
                grad_x[j] += g * p[o.w1 + i * d + j];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

/// One dense layer as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// On-disk decoder checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub d: usize,
    #[serde(rename = "D")]
    pub output_dim: usize,
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<LayerRecord>,
    pub rng_seed: u64,
    #[serde(default)]
    pub training: serde_json::Value,
}

impl Checkpoint {
    pub fn from_weights(w: &DecoderWeights, rng_seed: u64, training: serde_json::Value) -> Self {
        let Dims { latent, hidden } = w.dims;
        let o = w.dims.offsets();
        let p = &w.params;
        let layer = |wo: usize, bo: usize, rows: usize, cols: usize| LayerRecord {
            rows,
            cols,
            weights: p[wo..wo + rows * cols].to_vec(),
            bias: p[bo..bo + rows].to_vec(),
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            d: latent,
            output_dim: THETA_DIM,
            layer_sizes: vec![latent, hidden, hidden, THETA_DIM],
            layers: vec![
                layer(o.w1, o.b1, hidden, latent),
                layer(o.w2, o.b2, hidden, hidden),
                layer(o.w3, o.b3, THETA_DIM, hidden),
            ],
            rng_seed,
            training,
        }
    }

    pub fn to_weights(&self) -> Result<DecoderWeights> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", self.version)));
        }
        if self.output_dim != THETA_DIM || self.layers.len() != 3 || self.layer_sizes.len() != 4 {
            return Err(Error::Parse("checkpoint shape does not match the 3-layer decoder".into()));
        }
        let dims = Dims { latent: self.d, hidden: self.layer_sizes[1] };
        let expected = [(dims.hidden, dims.latent), (dims.hidden, dims.hidden), (THETA_DIM, dims.hidden)];
        let mut params = Vec::with_capacity(dims.n_params());
        for (layer, (rows, cols)) in self.layers.iter().zip(expected) {
            if layer.rows != rows || layer.cols != cols || layer.weights.len() != rows * cols || layer.bias.len() != rows
            {
                return Err(Error::Parse(format!("layer shape {}x{} expected {rows}x{cols}", layer.rows, layer.cols)));
            }
            params.extend_from_slice(&layer.weights);
            params.extend_from_slice(&layer.bias);
        }
        let w = DecoderWeights::from_params(dims, params)?;
        if !w.is_finite() {
            return Err(domain("checkpoint contains non-finite weights"));
        }
        Ok(w)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Nested-loop reference evaluation over explicit matrices.
    fn reference_forward(w: &DecoderWeights, x: &[f64]) -> Vec<f64> {
        let Dims { latent: d, hidden: h } = w.dims();
        let p = w.params();
        let mut idx = 0;
        let mut take = |n: usize| {
            let s = p[idx..idx + n].to_vec();
            idx += n;
            s
        };
        let (w1, b1, w2, b2, w3, b3) = (take(h * d), take(h), take(h * h), take(h), take(12 * h), take(12));
        let dense = |m: &[f64], b: &[f64], v: &[f64], rows: usize, cols: usize, relu: bool| {
            let mut out = vec![0.0; rows];
            for r in 0..rows {
                let mut acc = b[r];
                for c in 0..cols {
                    acc += m[r * cols + c] * v[c];
                }
                out[r] = if relu && acc < 0.0 { 0.0 } else { acc };
            }
            out
        };
        let a1 = dense(&w1, &b1, x, h, d, true);
        let a2 = dense(&w2, &b2, &a1, h, h, true);
        dense(&w3, &b3, &a2, 12, h, false)
    }

    fn random_biased(seed: u64) -> DecoderWeights {
        let mut w = DecoderWeights::init(Dims::default(), seed);
        let mut r = rng::rng(seed ^ 0xABCD);
        for v in w.b1_mut() {
            *v = r.random_range(-0.5..0.5);
        }
        for v in w.b2_mut() {
            *v = r.random_range(-0.5..0.5);
        }
        w
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let w = DecoderWeights::zeros(Dims::default());
        assert_eq!(w.forward(&[0.3, -1.0, 2.0]).unwrap(), [0.0; 12]);
    }

    #[test]
    fn output_bias_passthrough() {
        let mut w = DecoderWeights::zeros(Dims::default());
        let v: Vec<f64> = (0..12).map(|i| i as f64 - 4.5).collect();
        w.b3_mut().copy_from_slice(&v);
        assert_eq!(w.forward(&[5.0, -3.0, 0.1]).unwrap().to_vec(), v);
        let (g, _) = w.backward(&[5.0, -3.0, 0.1], &[1.5; 12]).unwrap();
        assert!(g.b3().iter().all(|&b| b == 1.5));
    }

    #[test]
    fn matches_reference() {
        let mut r = rng::rng(11);
        for seed in 0..10 {
            let w = random_biased(seed);
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let fast = w.forward(&x).unwrap();
            let slow = reference_forward(&w, &x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_grad_out() {
        let w = random_biased(3);
        let (g, gx) = w.backward(&[0.1, 0.2, 0.3], &[0.0; 12]).unwrap();
        assert!(g.params().iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let w = random_biased(3);
        assert!(matches!(w.forward(&[f64::NAN, 0.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(w.forward(&[0.0, 0.0]), Err(Error::Contract(_))));
    }

    fn dot_forward(w: &DecoderWeights, x: &[f64], g: &[f64; 12]) -> f64 {
        w.forward(x).unwrap().iter().zip(g).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    fn kink_margin(seed: u64) -> f64 {
        let mut r = rng::rng(seed + 1000);
        let w = random_biased(seed);
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut cache = ForwardCache::default();
        w.forward_cached(&x, &mut cache);
        cache.pre1.iter().chain(&cache.pre2).fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    fn gradient_check(seed: u64) -> f64 {
        let mut r = rng::rng(seed + 1000);
        let w = random_biased(seed);
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut g = [0.0; 12];
        g.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
        let (gw, gx) = w.backward(&x, &g).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..w.params().len() {
            let mut up = w.clone();
            let mut dn = w.clone();
            up.params_mut()[i] += h;
            dn.params_mut()[i] -= h;
            let fd = (dot_forward(&up, &x, &g) - dot_forward(&dn, &x, &g)) / (2.0 * h);
            worst = worst.max(rel_err(fd, gw.params()[i]));
        }
        for j in 0..3 {
            let mut up = x.clone();
            let mut dn = x.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (dot_forward(&w, &up, &g) - dot_forward(&w, &dn, &g)) / (2.0 * h);
            worst = worst.max(rel_err(fd, gx[j]));
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..20 {
            let err = gradient_check(seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = DecoderWeights::init(Dims::default(), 42);
        let b = DecoderWeights::init(Dims::default(), 42);
        assert_eq!(a, b);
        let limit = (6.0f64 / 15.0).sqrt();
        let o = Dims::default().offsets();
        assert!(a.params()[o.w1..o.b1].iter().all(|v| v.abs() <= limit));
        assert!(a.params()[o.b1..o.w2].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let w = random_biased(9);
        let ck = Checkpoint::from_weights(&w, 9, serde_json::json!({"iterations": 10}));
        let json = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&json).unwrap().to_weights().unwrap();
        for (a, b) in w.params().iter().zip(back.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(ck.layer_sizes, vec![3, 12, 12, 12]);
    }

    proptest! {
        #[test]
        fn gradient_check_property(seed in 0u64..10_000) {
            // Finite differences are meaningless across a ReLU kink.
            prop_assume!(kink_margin(seed) > 1e-3);
            prop_assert!(gradient_check(seed) < 1e-4);
        }

        #[test]
        fn piecewise_linear_along_lines(seed in 0u64..10_000) {
            let mut r = rng::rng(seed);
            let w = random_biased(seed);
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let t = 1e-4;
            let at = |s: f64| {
                let p: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + s * b).collect();
                w.forward(&p).unwrap()
            };
            let (a, b, c) = (at(-t), at(0.0), at(t));
            // A kink inside [-t, t] breaks linearity; only check when no
            // pre-activation changes sign there.
            let mut cache = [ForwardCache::default(), ForwardCache::default()];
            let xa: Vec<f64> = x.iter().zip(&v).map(|(p, q)| p - t * q).collect();
            let xc: Vec<f64> = x.iter().zip(&v).map(|(p, q)| p + t * q).collect();
            w.forward_cached(&xa, &mut cache[0]);
            w.forward_cached(&xc, &mut cache[1]);
            let same = cache[0].pre1.iter().zip(&cache[1].pre1).all(|(p, q)| (*p > 0.0) == (*q > 0.0))
                && cache[0].pre2.iter().zip(&cache[1].pre2).all(|(p, q)| (*p > 0.0) == (*q > 0.0));
            if same {
                for i in 0..12 {
                    prop_assert!((a[i] - 2.0 * b[i] + c[i]).abs() < 1e-9);
                }
            }
        }
    }
}
