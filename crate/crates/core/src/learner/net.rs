//! Fully connected value network with rectifier hidden layers and a linear
//! output, plus hand-written backpropagation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Q-value reported for slots outside the valid set.
pub const MASKED_Q: f64 = f64::NEG_INFINITY;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `inputs x outputs`, i.e. the transpose of the layer matrix,
    /// so that row `i` holds the weights leaving input `i`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub layers: Vec<Layer>,
}

/// Parameter-shaped buffer for gradients and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &ValueNet) -> Self {
        Gradients {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl ValueNet {
    /// He-initialized weights, zero biases.
    pub fn new<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        for l in &mut net.layers {
            let normal = Normal::new(0.0, (2.0 / l.inputs as f64).sqrt()).expect("positive std");
            for w in &mut l.weights {
                *w = normal.sample(rng);
            }
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::ShapeError(format!("bad layer dims {dims:?}")));
        }
        Ok(ValueNet {
            layers: dims
                .windows(2)
                .map(|w| Layer {
                    inputs: w[0],
                    outputs: w[1],
                    weights: vec![0.0; w[0] * w[1]],
                    biases: vec![0.0; w[1]],
                })
                .collect(),
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::ShapeError(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                params.len()
            )));
        }
        let mut i = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.copy_from_slice(&params[i..i + n]);
            i += n;
            let n = l.biases.len();
            l.biases.copy_from_slice(&params[i..i + n]);
            i += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|x| x.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeError(format!(
                "input has {} features, net expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; l.outputs];
            affine_batch(l, &a, &mut z);
            if i < last {
                relu(&mut z);
            }
            a = z;
        }
        Ok(a)
    }

    /// Outputs for a batch of inputs.
    pub fn forward_batch(&self, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        for x in xs {
            self.check_input(x)?;
        }
        let acts = self.forward_trace(xs);
        let out = acts.last().expect("output layer");
        let w = self.output_dim();
        Ok(out.chunks_exact(w).map(|c| c.to_vec()).collect())
    }

    /// Activations of every layer for the whole batch, input first, each
    /// stored sample-major.
    fn forward_trace(&self, xs: &[&[f64]]) -> Vec<Vec<f64>> {
        let n = xs.len();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(xs.iter().flat_map(|x| x.iter().copied()).collect::<Vec<f64>>());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let input = acts.last().expect("nonempty");
            let mut z = vec![0.0; n * l.outputs];
            affine_batch(l, input, &mut z);
            if i < last {
                relu(&mut z);
            }
            acts.push(z);
        }
        acts
    }

    /// Mean squared error over the taken-action outputs and its gradient.
    pub fn loss_and_gradients(&self, inputs: &[&[f64]], actions: &[usize], targets: &[f64]) -> Result<(f64, Gradients)> {
        if inputs.is_empty() || inputs.len() != actions.len() || inputs.len() != targets.len() {
            return Err(Error::ShapeError(format!(
                "batch sizes differ: {} inputs, {} actions, {} targets",
                inputs.len(),
                actions.len(),
                targets.len()
            )));
        }
        for (x, &a) in inputs.iter().zip(actions) {
            self.check_input(x)?;
            if a >= self.output_dim() {
                return Err(Error::ShapeError(format!("action {a} out of range")));
            }
        }
        let n = inputs.len();
        let acts = self.forward_trace(inputs);
        let out_w = self.output_dim();
        let mut loss = 0.0;
        let mut delta = vec![0.0; n * out_w];
        for (s, (&a, &y)) in actions.iter().zip(targets).enumerate() {
            let err = acts.last().expect("output")[s * out_w + a] - y;
            loss += err * err / n as f64;
            delta[s * out_w + a] = 2.0 * err / n as f64;
        }
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return Ok((loss, unsafe { self.backward_avx2(&acts, delta, n) }));
        }
        Ok((loss, self.backward(&acts, delta, n)))
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn backward_avx2(&self, acts: &[Vec<f64>], delta: Vec<f64>, n: usize) -> Gradients {
        self.backward(acts, delta, n)
    }

    /// Gradients of the loss given the output-layer error signal `delta`.
    #[inline(always)]
    fn backward(&self, acts: &[Vec<f64>], mut delta: Vec<f64>, n: usize) -> Gradients {
        let mut grads = Gradients::zeros_like(self);
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let (ni, no) = (l.inputs, l.outputs);
            let input = &acts[li];
            let mut back = if li > 0 { vec![0.0; n * ni] } else { Vec::new() };
            for s in 0..n {
                let d = &delta[s * no..(s + 1) * no];
                let x = &input[s * ni..(s + 1) * ni];
                for (gb, di) in grads.biases[li].iter_mut().zip(d) {
                    *gb += di;
                }
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (g, di) in grads.weights[li][i * no..(i + 1) * no].iter_mut().zip(d) {
                        *g += xi * di;
                    }
                }
                if li > 0 {
                    // Rectifier derivative, taken as zero at the kink.
                    for (i, &xi) in x.iter().enumerate() {
                        if xi > 0.0 {
                            back[s * ni + i] = dot(&l.weights[i * no..(i + 1) * no], d);
                        }
                    }
                }
            }
            if li == 0 {
                break;
            }
            delta = back;
        }
        grads
    }

    /// `theta <- theta - lr * g`.
    pub fn apply_gradients(&mut self, g: &Gradients, lr: f64) {
        for (li, l) in self.layers.iter_mut().enumerate() {
            for (w, d) in l.weights.iter_mut().zip(&g.weights[li]) {
                *w -= lr * d;
            }
            for (b, d) in l.biases.iter_mut().zip(&g.biases[li]) {
                *b -= lr * d;
            }
        }
    }

    fn same_shape(&self, other: &ValueNet) -> bool {
        self.dims() == other.dims()
    }
}

/// `z[s] = W x[s] + b` for every sample of a sample-major batch.
fn affine_batch(l: &Layer, input: &[f64], z: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { affine_batch_avx2(l, input, z) };
        return;
    }
    affine_batch_generic(l, input, z);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn affine_batch_avx2(l: &Layer, input: &[f64], z: &mut [f64]) {
    affine_batch_generic(l, input, z);
}

/// Accumulates input by input, so every output lane sums in the same order
/// whatever the vector width.
#[inline(always)]
fn affine_batch_generic(l: &Layer, input: &[f64], z: &mut [f64]) {
    let (ni, no) = (l.inputs, l.outputs);
    for (x, zs) in input.chunks_exact(ni).zip(z.chunks_exact_mut(no)) {
        zs.copy_from_slice(&l.biases);
        for (&xi, col) in x.iter().zip(l.weights.chunks_exact(no)) {
            if xi == 0.0 {
                continue;
            }
            for (zo, w) in zs.iter_mut().zip(col) {
                *zo += xi * w;
            }
        }
    }
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn relu(z: &mut [f64]) {
    for v in z {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Q-values for every slot, with slots outside `mask` set to [`MASKED_Q`].
pub fn q_forward(net: &ValueNet, o: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if mask.len() != net.output_dim() {
        return Err(Error::ShapeError(format!(
            "mask has {} slots, net has {} outputs",
            mask.len(),
            net.output_dim()
        )));
    }
    let mut q = net.forward(o)?;
    for (v, &ok) in q.iter_mut().zip(mask) {
        if !ok {
            *v = MASKED_Q;
        }
    }
    Ok(q)
}

/// Index of the largest finite value, lowest index on ties.
pub fn argmax(q: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in q.iter().enumerate() {
        if v == MASKED_Q {
            continue;
        }
        if best.map_or(true, |b| v > q[b]) {
            best = Some(i);
        }
    }
    best
}

/// `theta_minus <- tau * theta + (1 - tau) * theta_minus`.
pub fn soft_target_update(online: &ValueNet, target: &mut ValueNet, tau: f64) -> Result<()> {
    if !online.same_shape(target) {
        return Err(Error::ShapeError(format!(
            "online {:?} vs target {:?}",
            online.dims(),
            target.dims()
        )));
    }
    for (lo, lt) in online.layers.iter().zip(&mut target.layers) {
        for (t, o) in lt.weights.iter_mut().zip(&lo.weights) {
            *t = tau * o + (1.0 - tau) * *t;
        }
        for (t, o) in lt.biases.iter_mut().zip(&lo.biases) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Per-network optimizer state.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, net: &ValueNet) -> Self {
        let n = match kind {
            Optimizer::Sgd => 0,
            _ => net.parameter_count(),
        };
        OptimizerState {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; if matches!(kind, Optimizer::Adam { .. }) { n } else { 0 }],
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut ValueNet, g: &Gradients, lr: f64) {
        match self.kind {
            Optimizer::Sgd => net.apply_gradients(g, lr),
            Optimizer::Momentum { beta } => {
                let flat = g.flat();
                for (m, gi) in self.m.iter_mut().zip(&flat) {
                    *m = beta * *m + gi;
                }
                let mut p = net.flat();
                for (pi, m) in p.iter_mut().zip(&self.m) {
                    *pi -= lr * m;
                }
                net.set_flat(&p).expect("same shape");
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let flat = g.flat();
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                let mut p = net.flat();
                for i in 0..p.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * flat[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * flat[i] * flat[i];
                    p[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
                net.set_flat(&p).expect("same shape");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_biases() {
        let mut net = ValueNet::zeros(&[3, 4, 2]).unwrap();
        net.layers[1].biases = vec![0.5, -1.5];
        let q = q_forward(&net, &[1.0, 2.0, 3.0], &[true, true]).unwrap();
        assert_eq!(q, vec![0.5, -1.5]);
    }

    #[test]
    fn single_valid_slot_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = ValueNet::new(&[4, 8, 5], &mut rng).unwrap();
        for only in 0..5 {
            let mask: Vec<bool> = (0..5).map(|i| i == only).collect();
            let q = q_forward(&net, &[0.1, -0.2, 0.3, 0.9], &mask).unwrap();
            assert_eq!(argmax(&q), Some(only));
        }
    }

    #[test]
    fn shape_errors() {
        let net = ValueNet::zeros(&[3, 2]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::ShapeError(_))));
        assert!(matches!(q_forward(&net, &[1.0, 2.0, 3.0], &[true]), Err(Error::ShapeError(_))));
        let mut other = ValueNet::zeros(&[3, 3]).unwrap();
        assert!(matches!(soft_target_update(&net, &mut other, 0.5), Err(Error::ShapeError(_))));
    }

    #[test]
    fn soft_update_examples() {
        let mut online = ValueNet::zeros(&[1, 1]).unwrap();
        online.layers[0].weights[0] = 4.0;
        let mut target = ValueNet::zeros(&[1, 1]).unwrap();
        soft_target_update(&online, &mut target, 0.5).unwrap();
        soft_target_update(&online, &mut target, 0.5).unwrap();
        assert_eq!(target.layers[0].weights[0], 3.0);
        let before = target.clone();
        soft_target_update(&online, &mut target, 0.0).unwrap();
        assert_eq!(target, before);
        soft_target_update(&online, &mut target, 1.0).unwrap();
        assert_eq!(target, online);
    }

    #[test]
    fn linear_layer_gradient_closed_form() {
        // Q = w.x + b, L = (Q - y)^2, dL/dw = 2 (Q - y) x, dL/db = 2 (Q - y).
        let mut net = ValueNet::zeros(&[2, 1]).unwrap();
        net.layers[0].weights = vec![0.5, -1.0];
        net.layers[0].biases = vec![0.25];
        let x = [2.0, 3.0];
        let (loss, g) = net.loss_and_gradients(&[&x], &[0], &[1.0]).unwrap();
        let q = 0.5 * 2.0 - 3.0 + 0.25;
        assert_eq!(loss, (q - 1.0) * (q - 1.0));
        assert_eq!(g.weights[0], vec![2.0 * (q - 1.0) * 2.0, 2.0 * (q - 1.0) * 3.0]);
        assert_eq!(g.biases[0], vec![2.0 * (q - 1.0)]);
    }

    #[test]
    fn fixed_point_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = ValueNet::new(&[3, 6, 2], &mut rng).unwrap();
        let x = [0.3, 0.2, -0.7];
        let y = net.forward(&x).unwrap()[1];
        let (loss, g) = net.loss_and_gradients(&[&x], &[1], &[y]).unwrap();
        assert_eq!(loss, 0.0);
        let before = net.clone();
        net.apply_gradients(&g, 0.1);
        assert_eq!(net, before);
    }
}
