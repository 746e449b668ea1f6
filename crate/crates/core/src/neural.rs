//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Networks operate on row-major mini-batches (`batch × features`). A
//! [`Cache`] remembers the activations of one forward pass together with the
//! parameter generation it was computed under; [`DenseNet::backward`] refuses
//! caches from an older generation.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
    #[serde(skip, default = "next_generation")]
    generation: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
    generation: u64,
}

impl Cache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Gradients with the shapes of a [`DenseNet`], plus the input gradient of
/// the pass they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// `batch × input size`.
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Parameter gradients flattened in [`DenseNet::params`] order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

impl DenseNet {
    /// Fully connected net with `hidden` activations on every layer but the
    /// last, which uses `output`.
    ///
    /// Weights and biases are uniform in `±1/√fan_in`; when `final_scale` is
    /// given the last layer uses `±final_scale` instead.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        final_scale: Option<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let last = l + 1 == n;
                let bound = match final_scale {
                    Some(s) if last => s,
                    _ => 1.0 / (fan_in as f64).sqrt(),
                };
                let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..=bound));
                let bias = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..=bound));
                Layer {
                    weights,
                    bias,
                    activation: if last { output } else { hidden },
                }
            })
            .collect();
        Ok(Self {
            layers,
            generation: next_generation(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::Contract(format!(
                    "layer widths disagree: {} outputs feed {} inputs",
                    w[0].fan_out(),
                    w[1].fan_in()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::Contract("bias length differs from layer width".into()));
            }
        }
        Ok(Self {
            layers,
            generation: next_generation(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// `[in, h1, …, out]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_size())
            .chain(self.layers.iter().map(Layer::fan_out))
            .collect()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn same_architecture(&self, other: &DenseNet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.dim() == b.weights.dim() && a.activation == b.activation
            })
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|x| x.is_finite())
    }

    /// All parameters, layer by layer, row-major weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = *it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = *it.next().unwrap());
        }
        self.touch();
        Ok(())
    }

    fn touch(&mut self) {
        self.generation = next_generation();
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_size() {
            return Err(Error::Contract(format!(
                "network expects {} inputs, got {cols}",
                self.input_size()
            )));
        }
        Ok(())
    }

    /// Output for a mini-batch, without keeping intermediate activations.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = a.dot(&l.weights.t());
            z += &l.bias;
            z.mapv_inplace(|v| l.activation.apply(v));
            a = z;
        }
        Ok(a)
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.predict(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Cache> {
        self.check_input(x.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = a.dot(&l.weights.t());
            z += &l.bias;
            let out = z.mapv(|v| l.activation.apply(v));
            inputs.push(a);
            pre.push(z);
            a = out;
        }
        Ok(Cache {
            inputs,
            pre,
            output: a,
            generation: self.generation,
        })
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Cache)> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let cache = self.forward_batch(view)?;
        Ok((cache.output.row(0).to_vec(), cache))
    }

    /// Gradients of `Σ_batch yᵀ dy` with respect to every parameter and to
    /// the input rows.
    pub fn backward(&self, cache: &Cache, dy: ArrayView2<f64>) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::Contract("stale forward cache: parameters changed since the forward pass".into()));
        }
        if dy.dim() != cache.output.dim() {
            return Err(Error::Contract(format!(
                "output gradient has shape {:?}, forward output was {:?}",
                dy.dim(),
                cache.output.dim()
            )));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut delta = dy.to_owned();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let out = if l + 1 == n { &cache.output } else { &cache.inputs[l + 1] };
            Zip::from(&mut delta)
                .and(&cache.pre[l])
                .and(out)
                .for_each(|d, &z, &a| *d *= layer.activation.derivative(z, a));
            weights.push(delta.t().dot(&cache.inputs[l]));
            biases.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&layer.weights);
        }
        weights.reverse();
        biases.reverse();
        Ok(Gradients {
            weights,
            biases,
            input: delta,
        })
    }
}

/// `target ← τ·train + (1−τ)·target`, parameter by parameter.
pub fn soft_update(target: &mut DenseNet, train: &DenseNet, tau: f64) -> Result<()> {
    if !target.same_architecture(train) {
        return Err(Error::Contract("soft update between different architectures".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
    }
    for (t, s) in target.layers.iter_mut().zip(&train.layers) {
        Zip::from(&mut t.weights)
            .and(&s.weights)
            .for_each(|t, &s| *t = tau * s + (1.0 - tau) * *t);
        Zip::from(&mut t.bias)
            .and(&s.bias)
            .for_each(|t, &s| *t = tau * s + (1.0 - tau) * *t);
    }
    target.touch();
    Ok(())
}

/// Adam moments for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_w: Vec<Array2<f64>>,
    v_b: Vec<Array1<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient contained NaN or infinity; nothing changed.
    SkippedNonFinite,
}

impl Adam {
    pub fn new(net: &DenseNet, learning_rate: f64) -> Self {
        let zw: Vec<Array2<f64>> = net.layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect();
        let zb: Vec<Array1<f64>> = net.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m_w: zw.clone(),
            m_b: zb.clone(),
            v_w: zw,
            v_b: zb,
        }
    }

    /// One descent step `θ ← θ − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, net: &mut DenseNet, g: &Gradients) -> Result<StepOutcome> {
        if g.weights.len() != net.layers.len()
            || g.weights.iter().zip(&net.layers).any(|(w, l)| w.dim() != l.weights.dim())
        {
            return Err(Error::Contract("gradient shapes do not match the network".into()));
        }
        if !g.is_finite() {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.learning_rate;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (l, layer) in net.layers.iter_mut().enumerate() {
            Zip::from(&mut layer.weights)
                .and(&mut self.m_w[l])
                .and(&mut self.v_w[l])
                .and(&g.weights[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut self.m_b[l])
                .and(&mut self.v_b[l])
                .and(&g.biases[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        net.touch();
        Ok(StepOutcome::Applied)
    }
}
