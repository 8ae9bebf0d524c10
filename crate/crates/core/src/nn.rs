//! Small dense networks with a softmax cross-entropy head.
//!
//! Hidden layers use tanh. Losses are averaged over the batch, plus an
//! optional `0.5 * decay * ||W||^2` penalty on weights (not biases).

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::F32Raster;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in self
            .weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .enumerate()
        {
            out[o] = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }
}

/// Feedforward classifier: `dims[0]` inputs, tanh hidden layers, softmax
/// over `dims.last()` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Gradient with the same shape as an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    layers: Vec<Dense>,
}

impl Gradient {
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn layer_bias(&self, layer: usize) -> &[f64] {
        &self.layers[layer].bias
    }
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// `-log softmax(z)[label]`, computed stably.
pub fn cross_entropy_from_logits(z: &[f64], label: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - z[label]
}

/// Row-major sample matrix with one class label per row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], label: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.features.extend_from_slice(x);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

impl Mlp {
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an mlp needs input and output sizes");
        Self {
            layers: dims.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect(),
        }
    }

    /// Uniform Glorot init for hidden layers; the output layer starts at zero
    /// when there are hidden layers, so initial predictions are uniform.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        let mut mlp = Self::zeros(dims);
        let hidden = mlp.layers.len() - 1;
        for layer in mlp.layers.iter_mut().take(hidden) {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-limit..limit);
            }
        }
        mlp
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            if idx < l.weights.len() {
                return &mut l.weights[idx];
            }
            idx -= l.weights.len();
            if idx < l.bias.len() {
                return &mut l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Fills `acts` with the activations of every layer; the last entry
    /// holds logits.
    fn forward_into(&self, x: &[f64], acts: &mut [Vec<f64>]) {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = acts.split_at_mut(i);
            let out = &mut rest[0];
            layer.forward(done.last().map_or(x, |a| a.as_slice()), out);
            if i < last {
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
            }
        }
    }

    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.outputs]).collect();
        self.forward_into(x, &mut acts);
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.activations(x).pop().expect("at least one layer")
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.logits(x);
        softmax_in_place(&mut z);
        z
    }

    fn decay_penalty(&self, decay: f64) -> f64 {
        if decay == 0.0 {
            return 0.0;
        }
        0.5 * decay
            * self
                .layers
                .iter()
                .flat_map(|l| &l.weights)
                .map(|w| w * w)
                .sum::<f64>()
    }

    /// Mean cross-entropy over the selected rows plus the decay penalty.
    pub fn loss(&self, samples: &Samples, rows: &[usize], decay: f64) -> f64 {
        let sum: f64 = rows
            .iter()
            .map(|&i| cross_entropy_from_logits(&self.logits(samples.row(i)), samples.labels[i]))
            .sum();
        sum / rows.len() as f64 + self.decay_penalty(decay)
    }

    /// Summed cross-entropy and its gradient over the selected rows, without
    /// decay. Accumulation runs in row order, so results are reproducible.
    pub fn summed_loss_and_gradient(&self, samples: &Samples, rows: &[usize]) -> (f64, Gradient) {
        let mut grad = Gradient {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        };
        let mut loss = 0.0;
        let last = self.layers.len() - 1;
        let mut acts: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.outputs]).collect();
        let widest = self
            .layers
            .iter()
            .map(|l| l.inputs.max(l.outputs))
            .max()
            .unwrap_or(0);
        let mut delta = Vec::with_capacity(widest);
        let mut prev = Vec::with_capacity(widest);
        for &i in rows {
            let x = samples.row(i);
            let label = samples.labels[i];
            self.forward_into(x, &mut acts);
            loss += cross_entropy_from_logits(&acts[last], label);
            delta.clear();
            delta.extend_from_slice(&acts[last]);
            softmax_in_place(&mut delta);
            delta[label] -= 1.0;
            for l in (0..=last).rev() {
                let input = if l == 0 { x } else { &acts[l - 1] };
                let g = &mut grad.layers[l];
                for (o, &d) in delta.iter().enumerate() {
                    g.bias[o] += d;
                    let row = &mut g.weights[o * g.inputs..(o + 1) * g.inputs];
                    for (gw, &v) in row.iter_mut().zip(input) {
                        *gw += d * v;
                    }
                }
                if l > 0 {
                    let layer = &self.layers[l];
                    prev.clear();
                    prev.resize(layer.inputs, 0.0);
                    for (o, &d) in delta.iter().enumerate() {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (p, &w) in prev.iter_mut().zip(row) {
                            *p += w * d;
                        }
                    }
                    for (p, &a) in prev.iter_mut().zip(&acts[l - 1]) {
                        *p *= 1.0 - a * a;
                    }
                    std::mem::swap(&mut delta, &mut prev);
                }
            }
        }
        (loss, grad)
    }

    /// Mean cross-entropy plus decay, and its gradient.
    pub fn loss_and_gradient(
        &self,
        samples: &Samples,
        rows: &[usize],
        decay: f64,
    ) -> (f64, Gradient) {
        let (loss, mut grad) = self.summed_loss_and_gradient(samples, rows);
        let scale = 1.0 / rows.len() as f64;
        for (g, layer) in grad.layers.iter_mut().zip(&self.layers) {
            for (gw, &w) in g.weights.iter_mut().zip(&layer.weights) {
                *gw = *gw * scale + decay * w;
            }
            for gb in &mut g.bias {
                *gb *= scale;
            }
        }
        (loss * scale + self.decay_penalty(decay), grad)
    }

    pub fn step(&mut self, grad: &Gradient, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    /// Serializes as a single-row F32R: `[layer_count, dims..., params...]`.
    pub fn to_f32r(&self) -> F32Raster {
        let dims = self.dims();
        let mut data = vec![self.layers.len() as f32];
        data.extend(dims.iter().map(|&d| d as f32));
        for l in &self.layers {
            data.extend(l.weights.iter().chain(&l.bias).map(|&v| v as f32));
        }
        F32Raster {
            width: data.len(),
            height: 1,
            channels: 1,
            data,
        }
    }

    pub fn from_f32r(r: &F32Raster) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("mlp params: {m}"));
        let data = &r.data;
        let as_count = |v: f32| {
            (v >= 1.0 && v.fract() == 0.0 && v < 1e7)
                .then_some(v as usize)
                .ok_or_else(|| bad("invalid size field"))
        };
        let layers = as_count(*data.first().ok_or_else(|| bad("empty"))?)?;
        if data.len() < layers + 2 {
            return Err(bad("truncated header"));
        }
        let dims: Vec<usize> = data[1..layers + 2]
            .iter()
            .map(|&v| as_count(v))
            .collect::<Result<_>>()?;
        let mut mlp = Self::zeros(&dims);
        if data.len() != layers + 2 + mlp.param_count() {
            return Err(bad("parameter count does not match layer sizes"));
        }
        let mut values = data[layers + 2..].iter().map(|&v| f64::from(v));
        for l in &mut mlp.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = values.next().expect("length checked");
            }
        }
        if !mlp.is_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(mlp)
    }
}

/// Plain gradient descent with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Option<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn update(&mut self, model: &mut Mlp, grad: &Gradient) {
        if self.momentum == 0.0 {
            model.step(grad, self.lr);
            return;
        }
        let flat = grad.flat();
        let v = self.velocity.get_or_insert_with(|| vec![0.0; flat.len()]);
        for (vi, g) in v.iter_mut().zip(&flat) {
            *vi = self.momentum * *vi + g;
        }
        let mut idx = 0;
        for layer in &mut model.layers {
            for p in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *p -= self.lr * v[idx];
                idx += 1;
            }
        }
    }
}

/// Largest relative difference between the analytic gradient and central
/// finite differences with step `h`. Each entry uses
/// `|a - n| / max(|a| + |n|, 1e-8)`.
pub fn gradient_check(model: &Mlp, samples: &Samples, rows: &[usize], decay: f64, h: f64) -> f64 {
    let (_, grad) = model.loss_and_gradient(samples, rows, decay);
    let analytic = grad.flat();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + h;
        let up = probe.loss(samples, rows, decay);
        *probe.param_mut(i) = orig - h;
        let down = probe.loss(samples, rows, decay);
        *probe.param_mut(i) = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Samples {
        let mut s = Samples::new(dim);
        for _ in 0..n {
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            s.push(&x, rng.gen_range(0..classes));
        }
        s
    }

    #[test]
    fn uniform_logits_give_uniform_posterior() {
        let p = Mlp::zeros(&[3, 5]).probabilities(&[1.0, 2.0, 3.0]);
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_values() {
        // Prob 1 (up to rounding) gives zero loss.
        assert!(cross_entropy_from_logits(&[1000.0, 0.0], 0) < 1e-12);
        // Two logits differing by ln(e - 1) give p = 1/e for the label.
        let z = [(std::f64::consts::E - 1.0).ln(), 0.0];
        assert!((cross_entropy_from_logits(&z, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_params_bias_gradient_is_softmax_minus_onehot() {
        let mut s = Samples::new(2);
        s.push(&[0.3, -0.7], 2);
        let (_, g) = Mlp::zeros(&[2, 4]).loss_and_gradient(&s, &[0], 0.0);
        assert_eq!(g.layer_bias(0), &[0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn duplicated_batch_doubles_summed_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Mlp::init(&[4, 6, 3], &mut rng);
        let s = random_batch(&mut rng, 1, 4, 3);
        let (l1, single) = model.summed_loss_and_gradient(&s, &[0]);
        let (l2, double) = model.summed_loss_and_gradient(&s, &[0, 0]);
        assert_eq!(l2, 2.0 * l1);
        for (a, b) in single.flat().iter().zip(double.flat()) {
            assert_eq!(b, 2.0 * a);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dims in [vec![5, 4], vec![5, 7, 4]] {
            let mut model = Mlp::init(&dims, &mut rng);
            for l in model.layers_mut() {
                for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                    *w += rng.gen_range(-0.5..0.5);
                }
            }
            let s = random_batch(&mut rng, 8, 5, 4);
            let rows: Vec<usize> = (0..s.len()).collect();
            let err = gradient_check(&model, &s, &rows, 1e-3, 1e-5);
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn f32r_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Mlp::init(&[3, 4, 2], &mut rng);
        let back = Mlp::from_f32r(&model.to_f32r()).unwrap();
        assert_eq!(back.dims(), vec![3, 4, 2]);
        for (a, b) in model.layers().iter().zip(back.layers()) {
            for (x, y) in a.weights().iter().zip(b.weights()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        let mut bad = model.to_f32r();
        bad.data.pop();
        assert!(Mlp::from_f32r(&bad).is_err());
    }
}
