use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Objective, Smoothness};
use crate::error::{invalid, Error, Result};
use crate::subspace::LayerShape;

/// Hidden-layer nonlinearity. The hard variants use no smooth surrogate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `sign(x)`, with `sign(0) = 0`.
    Sign,
    /// ReLU followed by symmetric 8-bit rounding, `round(x / s) s` with
    /// `s = max|x| / 127` over the layer's activation vector.
    Int8Round,
    /// `floor(x)`.
    StaircaseFloor,
    /// A gate picks one expert sub-layer by argmax (lowest index on ties);
    /// only that expert runs, followed by ReLU.
    ArgmaxRoute,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "relu" => Ok(Self::Relu),
            "sign" | "binary" => Ok(Self::Sign),
            "int8" | "int8_round" => Ok(Self::Int8Round),
            "staircase" | "floor" | "staircase_floor" => Ok(Self::StaircaseFloor),
            "argmax" | "argmax_route" | "moe" => Ok(Self::ArgmaxRoute),
            _ => Err(invalid(format!("unknown activation '{s}'"))),
        }
    }
}

/// Symmetric per-tensor 8-bit rounding in place.
pub fn quantize_int8(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return;
    }
    let s = max / 127.0;
    v.iter_mut().for_each(|x| *x = (*x / s).round() * s);
}

/// Fully connected network with a configurable hidden nonlinearity.
///
/// Parameters are laid out layer by layer as a row-major weight matrix
/// followed by its bias. An `ArgmaxRoute` hidden layer stores the gate first
/// and then every expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyMlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub experts: usize,
}

impl TinyMlp {
    pub fn new(sizes: &[usize], activation: Activation) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "need at least input and output sizes");
        Self { sizes: sizes.to_vec(), activation, experts: 4 }
    }

    pub fn with_experts(mut self, experts: usize) -> Self {
        assert!(experts >= 1);
        self.experts = experts;
        self
    }

    fn routed(&self, layer: usize) -> bool {
        self.activation == Activation::ArgmaxRoute && layer + 1 < self.sizes.len() - 1
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut out = Vec::new();
        for l in 0..self.sizes.len() - 1 {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            if self.routed(l) {
                out.push(LayerShape::weight(format!("gate{l}"), self.experts, din));
                out.push(LayerShape::bias(format!("gate{l}.bias"), self.experts));
                for e in 0..self.experts {
                    out.push(LayerShape::weight(format!("fc{l}.expert{e}"), dout, din));
                    out.push(LayerShape::bias(format!("fc{l}.expert{e}.bias"), dout));
                }
            } else {
                out.push(LayerShape::weight(format!("fc{l}"), dout, din));
                out.push(LayerShape::bias(format!("fc{l}.bias"), dout));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerShape::size).sum()
    }

    /// Gaussian weights with standard deviation `1 / sqrt(fan_in)`, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            if layer.is_bias {
                theta.extend(std::iter::repeat_n(0.0, layer.d_out));
            } else {
                let sd = 1.0 / (layer.d_in as f64).sqrt();
                theta.extend((0..layer.d_out * layer.d_in).map(|_| sd * rng.sample::<f64, _>(StandardNormal)));
            }
        }
        theta
    }

    /// Logits for one input. `a` and `b` are scratch buffers.
    pub fn forward<'s>(&self, theta: &[f64], x: &[f64], a: &'s mut Vec<f64>, b: &'s mut Vec<f64>) -> &'s [f64] {
        a.clear();
        a.extend_from_slice(x);
        let mut off = 0;
        let last = self.sizes.len() - 2;
        for l in 0..=last {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            if self.routed(l) {
                let e = self.experts;
                b.clear();
                b.resize(e, 0.0);
                affine(&theta[off..off + e * din], &theta[off + e * din..off + e * din + e], a, b);
                let expert = argmax(b);
                off += e * din + e;
                let stride = dout * din + dout;
                let w0 = off + expert * stride;
                b.clear();
                b.resize(dout, 0.0);
                affine(&theta[w0..w0 + dout * din], &theta[w0 + dout * din..w0 + stride], a, b);
                b.iter_mut().for_each(|v| *v = v.max(0.0));
                off += e * stride;
            } else {
                b.clear();
                b.resize(dout, 0.0);
                affine(&theta[off..off + dout * din], &theta[off + dout * din..off + dout * din + dout], a, b);
                off += dout * din + dout;
                if l < last {
                    self.activate(b);
                }
            }
            std::mem::swap(a, b);
        }
        a
    }

    fn activate(&self, v: &mut [f64]) {
        match self.activation {
            Activation::Relu | Activation::ArgmaxRoute => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Sign => v.iter_mut().for_each(|x| {
                *x = if *x > 0.0 {
                    1.0
                } else if *x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Activation::Int8Round => {
                v.iter_mut().for_each(|x| *x = x.max(0.0));
                quantize_int8(v);
            }
            Activation::StaircaseFloor => v.iter_mut().for_each(|x| *x = x.floor()),
        }
    }
}

fn affine(w: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let din = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * din..(r + 1) * din];
        *o = bias[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_at(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits[label] - m - z.ln()
}

/// Mean cross-entropy of a [`TinyMlp`] over a fixed batch.
#[derive(Clone, Debug)]
pub struct MlpLoss {
    pub model: TinyMlp,
    pub data: Arc<Dataset>,
    pub batch: Vec<usize>,
}

impl MlpLoss {
    pub fn new(model: TinyMlp, data: Arc<Dataset>, batch: Vec<usize>) -> Result<Self> {
        if model.sizes[0] != data.features {
            return Err(Error::DimensionMismatch { expected: data.features, got: model.sizes[0] });
        }
        if *model.sizes.last().unwrap() < data.classes {
            return Err(invalid("output layer smaller than the number of classes"));
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= data.len()) {
            return Err(invalid(format!("batch index {bad} out of range for {} samples", data.len())));
        }
        Ok(Self { model, data, batch })
    }

    /// Loss over every sample tagged with `split`.
    pub fn on_split(model: TinyMlp, data: Arc<Dataset>, split: super::Split) -> Result<Self> {
        let batch = data.indices(split);
        Self::new(model, data, batch)
    }

    /// Fraction of the batch classified correctly.
    pub fn accuracy(&self, theta: &[f64]) -> f64 {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        let hits = self
            .batch
            .iter()
            .filter(|&&i| argmax(self.model.forward(theta, self.data.input(i), &mut a, &mut b)) == self.data.labels[i])
            .count();
        hits as f64 / self.batch.len().max(1) as f64
    }
}

impl Objective for MlpLoss {
    fn dim(&self) -> usize {
        self.model.param_count()
    }

    fn eval(&self, theta: &[f64]) -> f64 {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        let mut total = 0.0;
        for &i in &self.batch {
            let logits = self.model.forward(theta, self.data.input(i), &mut a, &mut b);
            total -= log_softmax_at(logits, self.data.labels[i]);
        }
        total / self.batch.len().max(1) as f64
    }

    fn name(&self) -> String {
        format!("mlp_{:?}", self.model.activation).to_lowercase()
    }

    fn smoothness(&self) -> Smoothness {
        match self.model.activation {
            Activation::Relu | Activation::ArgmaxRoute => Smoothness::PiecewiseSmooth,
            _ => Smoothness::PiecewiseConstant,
        }
    }

    fn layers(&self) -> Option<Vec<LayerShape>> {
        Some(self.model.layers())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{make_blobs, zero_fd_fraction, Split};
    use super::*;
    use crate::rng::seeded;

    fn blobs() -> Arc<Dataset> {
        Arc::new(make_blobs(3, 40, 0.3, &mut seeded(1)))
    }

    #[test]
    fn zero_parameters_give_log_classes() {
        let data = blobs();
        let model = TinyMlp::new(&[2, 16, 3], Activation::Relu);
        let loss = MlpLoss::on_split(model.clone(), data, Split::Train).unwrap();
        let zero = vec![0.0; model.param_count()];
        assert!((loss.eval(&zero) - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn param_counts() {
        assert_eq!(TinyMlp::new(&[2, 16, 3], Activation::Relu).param_count(), 99);
        assert_eq!(TinyMlp::new(&[64, 32, 10], Activation::Sign).param_count(), 2410);
        assert_eq!(TinyMlp::new(&[784, 128, 10], Activation::Relu).param_count(), 101_770);
        // gate 4x2+4, experts 4 x (16x2+16), output 16x3+3
        assert_eq!(TinyMlp::new(&[2, 16, 3], Activation::ArgmaxRoute).param_count(), 12 + 192 + 51);
    }

    #[test]
    fn sign_is_scale_invariant_in_first_layer() {
        let data = blobs();
        let model = TinyMlp::new(&[2, 16, 3], Activation::Sign);
        let theta = model.init_params(&mut seeded(4));
        let loss = MlpLoss::on_split(model, data, Split::Train).unwrap();
        let mut scaled = theta.clone();
        scaled[..48].iter_mut().for_each(|w| *w *= 2.0);
        assert_eq!(loss.eval(&theta), loss.eval(&scaled));
    }

    #[test]
    fn int8_is_exact_on_integer_grid() {
        let mut v: Vec<f64> = (-127..=127).map(f64::from).collect();
        let orig = v.clone();
        quantize_int8(&mut v);
        assert_eq!(v, orig);
        let mut z = vec![0.0; 4];
        quantize_int8(&mut z);
        assert_eq!(z, vec![0.0; 4]);
    }

    /// Independent forward pass with nested vectors.
    fn naive_relu_loss(sizes: &[usize], theta: &[f64], data: &Dataset) -> f64 {
        let mut weights: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut biases: Vec<Vec<f64>> = Vec::new();
        let mut k = 0;
        for l in 0..sizes.len() - 1 {
            let mut w = vec![vec![0.0; sizes[l]]; sizes[l + 1]];
            for row in w.iter_mut() {
                for x in row.iter_mut() {
                    *x = theta[k];
                    k += 1;
                }
            }
            weights.push(w);
            biases.push(theta[k..k + sizes[l + 1]].to_vec());
            k += sizes[l + 1];
        }
        let mut total = 0.0;
        for i in 0..data.len() {
            let mut h = data.input(i).to_vec();
            for l in 0..weights.len() {
                let mut next: Vec<f64> = (0..weights[l].len())
                    .map(|r| biases[l][r] + (0..h.len()).map(|c| weights[l][r][c] * h[c]).sum::<f64>())
                    .collect();
                if l + 1 < weights.len() {
                    next = next.into_iter().map(|x| if x > 0.0 { x } else { 0.0 }).collect();
                }
                h = next;
            }
            let z: f64 = h.iter().map(|x| x.exp()).sum();
            total += -(h[data.labels[i]].exp() / z).ln();
        }
        total / data.len() as f64
    }

    #[test]
    fn relu_matches_naive_forward() {
        let data = blobs();
        for seed in 0..5 {
            let sizes = [2, 16, 8, 3];
            let model = TinyMlp::new(&sizes, Activation::Relu);
            let theta = model.init_params(&mut seeded(seed));
            let loss = MlpLoss::new(model, data.clone(), (0..data.len()).collect()).unwrap();
            assert!((loss.eval(&theta) - naive_relu_loss(&sizes, &theta, &data)).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_route_uses_one_expert() {
        let model = TinyMlp::new(&[2, 4, 2], Activation::ArgmaxRoute).with_experts(2);
        let mut theta = vec![0.0; model.param_count()];
        // gate rows: expert 1 always wins for positive x[0]
        theta[2] = 1.0;
        // expert 1 weights start after gate (2x2 + 2) and expert 0 (4x2 + 4)
        let e1 = 6 + 12;
        theta[e1] = 1.0;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        let out = model.forward(&theta, &[1.0, 0.0], &mut a, &mut b).to_vec();
        assert_eq!(out, vec![0.0, 0.0]);
        let n = theta.len();
        theta[n - 2 - 8] = 1.0; // output row 0, hidden unit 0
        let out = model.forward(&theta, &[1.0, 0.0], &mut a, &mut b).to_vec();
        assert_eq!(out, vec![1.0, 0.0]);
        let out = model.forward(&theta, &[-1.0, 0.0], &mut a, &mut b).to_vec();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn hard_activations_are_gradient_dead_upstream() {
        let data = blobs();
        for act in [Activation::Sign, Activation::StaircaseFloor] {
            let model = TinyMlp::new(&[2, 16, 3], act);
            let loss = MlpLoss::on_split(model.clone(), data.clone(), Split::Train).unwrap();
            let mut dead = 0.0;
            for seed in 0..10 {
                let theta = model.init_params(&mut seeded(seed));
                // first-layer weights and biases feed the hard nonlinearity
                let coords: Vec<usize> = (0..48).collect();
                dead += zero_fd_fraction(&loss, &theta, &coords, 1e-6) / 10.0;
            }
            assert!(dead >= 0.99, "{act:?}: {dead}");
        }
    }
}
