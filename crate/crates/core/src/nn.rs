//! Small dense networks in double precision: forward pass, exact reverse-mode
//! gradients, forward-mode parameter tangents, losses and plain SGD.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_CLASSES: usize = 5;

const MAGIC: &[u8; 4] = b"VNN1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One affine layer followed by an activation. `weights` is row-major with
/// one row per output.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// He-uniform weights for relu layers, LeCun-uniform otherwise; zero bias.
    fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let gain = match activation {
            Activation::Relu => 6.0,
            Activation::Identity => 3.0,
        };
        let limit = (gain / inputs as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            weights,
            ..Self::zeros(inputs, outputs, activation)
        }
    }

    #[inline]
    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match sparse_support(x) {
            Some(nz) => {
                for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.bias) {
                    out.push(nz.iter().map(|&j| row[j] * x[j]).sum::<f64>() + b);
                }
            }
            None => {
                for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.bias) {
                    out.push(dot(row, x) + b);
                }
            }
        }
    }
}

/// Indices of the non-zero entries when they are few enough that skipping
/// the zeros beats a dense pass (rendered frames are mostly empty sky).
fn sparse_support(x: &[f64]) -> Option<Vec<usize>> {
    if x.len() < 256 {
        return None;
    }
    let nz: Vec<usize> = (0..x.len()).filter(|&j| x[j] != 0.0).collect();
    (nz.len() * 4 < x.len()).then_some(nz)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise the reduction.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * i + k] * b[4 * i + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[derive(Debug, Clone)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
    pub seed: u64,
}

/// Equality is over parameters only; the initialisation seed is metadata.
impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Layer inputs and pre-activations recorded by [`DenseNet::forward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Partial derivatives shaped like a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn is_congruent(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn scale(&mut self, k: f64) {
        self.values_mut().for_each(|v| *v *= k);
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    /// Reshapes `flat` like `net`'s parameters.
    pub fn from_flat(net: &DenseNet, flat: &[f64]) -> Result<Self> {
        let mut g = Self::zeros_like(net);
        let n = net.num_params();
        if flat.len() != n {
            return Err(Error::Dimension {
                context: "GradientSet::from_flat",
                expected: n,
                actual: flat.len(),
            });
        }
        for (dst, src) in g.values_mut().zip(flat) {
            *dst = *src;
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 32,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "sgd needs learning_rate >= 0 and batch_size >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

impl DenseNet {
    /// Builds a network with `sizes.len() - 1` layers. `activations` gives
    /// one activation per layer.
    pub fn new(sizes: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 || sizes.contains(&0) {
            return Err(Error::Config(format!(
                "network needs >= 2 positive sizes and one activation per layer, got sizes {sizes:?} and {} activations",
                activations.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| Layer::init(w[0], w[1], act, &mut rng))
            .collect();
        Ok(Self { layers, seed })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let net = Self { layers, seed: 0 };
        net.check_chain()?;
        Ok(net)
    }

    fn check_chain(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for l in &self.layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Config("layer parameter shapes are inconsistent".into()));
            }
        }
        for w in self.layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::Dimension {
                    context: "layer chain",
                    expected: w[0].outputs,
                    actual: w[1].inputs,
                });
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)).copied().collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                context: "DenseNet::set_params_flat",
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        let dst = self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()));
        for (d, s) in dst.zip(flat) {
            *d = *s;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                context: "DenseNet::forward",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(input)?;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(&x, &mut z);
            let y = z.iter().map(|&v| layer.activation.apply(v)).collect();
            cache.inputs.push(x);
            cache.pre.push(z);
            x = y;
        }
        Ok((x, cache))
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let mut z = Vec::new();
        for layer in &self.layers {
            layer.affine(&x, &mut z);
            x.clear();
            x.extend(z.iter().map(|&v| layer.activation.apply(v)));
        }
        Ok(x)
    }

    /// Reverse-mode gradients of a scalar whose derivative with respect to
    /// the network output is `grad_out`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64]) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros_like(self);
        self.backward_into(cache, grad_out, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the network input.
    pub fn backward_into(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut GradientSet) -> Result<Vec<f64>> {
        self.backward_impl(cache, grad_out, grads, true)
    }

    /// Like [`DenseNet::backward_into`] but skips the input gradient, which
    /// dominates the cost for wide first layers.
    pub fn accumulate_grads(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut GradientSet) -> Result<()> {
        self.backward_impl(cache, grad_out, grads, false).map(|_| ())
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        grad_out: &[f64],
        grads: &mut GradientSet,
        input_grad: bool,
    ) -> Result<Vec<f64>> {
        if cache.pre.len() != self.layers.len() || !grads.is_congruent(self) {
            return Err(Error::domain("forward cache or gradient set does not match network"));
        }
        if grad_out.len() != self.output_dim() {
            return Err(Error::Dimension {
                context: "DenseNet::backward",
                expected: self.output_dim(),
                actual: grad_out.len(),
            });
        }
        let mut delta = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[i];
            let x = &cache.inputs[i];
            if pre.len() != layer.outputs || x.len() != layer.inputs {
                return Err(Error::domain("forward cache shapes do not match network"));
            }
            for (d, &z) in delta.iter_mut().zip(pre) {
                *d *= layer.activation.derivative(z);
            }
            let g = &mut grads.layers[i];
            let nz = sparse_support(x);
            for (o, &d) in delta.iter().enumerate() {
                g.bias[o] += d;
                if d != 0.0 {
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    match &nz {
                        Some(nz) => nz.iter().for_each(|&j| row[j] += d * x[j]),
                        None => row.iter_mut().zip(x).for_each(|(w, &xi)| *w += d * xi),
                    }
                }
            }
            if i == 0 && !input_grad {
                return Ok(Vec::new());
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Directional derivative of the output along the parameter direction
    /// `tangent`, at input `input` (forward-mode).
    pub fn jvp(&self, cache: &ForwardCache, tangent: &GradientSet) -> Result<Vec<f64>> {
        if !tangent.is_congruent(self) || cache.pre.len() != self.layers.len() {
            return Err(Error::domain("tangent or cache does not match network"));
        }
        let mut dx = vec![0.0; self.input_dim()];
        for (i, layer) in self.layers.iter().enumerate() {
            let t = &tangent.layers[i];
            let x = &cache.inputs[i];
            let dz: Vec<f64> = (0..layer.outputs)
                .map(|o| {
                    let w = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    let tw = &t.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    dot(w, &dx) + dot(tw, x) + t.bias[o]
                })
                .collect();
            dx = dz
                .iter()
                .zip(&cache.pre[i])
                .map(|(d, &z)| d * layer.activation.derivative(z))
                .collect();
        }
        Ok(dx)
    }

    /// θ ← θ − lr·g. Non-finite gradients leave the network untouched.
    pub fn sgd_step(&mut self, grads: &GradientSet, config: &SgdConfig) -> Result<()> {
        if !grads.is_congruent(self) {
            return Err(Error::domain("gradient set does not match network"));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("sgd gradients"));
        }
        let lr = config.learning_rate;
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.num_params() * 8 + self.layers.len() * 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
            out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
            out.extend_from_slice(&l.activation.code().to_le_bytes());
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, section: &str| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::format(section, format!("truncated at offset {pos}")))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4, "magic")? != MAGIC {
            return Err(Error::format("magic", "expected \"VNN1\""));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let n_layers = u32_at(take(4, "header")?) as usize;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for i in 0..n_layers {
            let section = format!("layer {i}");
            let rows = u32_at(take(4, &section)?) as usize;
            let cols = u32_at(take(4, &section)?) as usize;
            let code = u32_at(take(4, &section)?);
            let activation = Activation::from_code(code)
                .ok_or_else(|| Error::format(&section, format!("unknown activation code {code}")))?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::format(&section, "layer size overflows"))?;
            let mut read = |count: usize| -> Result<Vec<f64>> {
                let raw = take(count.checked_mul(8).ok_or_else(|| Error::format(&section, "overflow"))?, &section)?;
                Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
            };
            let weights = read(n)?;
            let bias = read(rows)?;
            layers.push(Layer {
                inputs: cols,
                outputs: rows,
                weights,
                bias,
                activation,
            });
        }
        if pos != bytes.len() {
            return Err(Error::format("trailer", "unexpected trailing bytes"));
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::render::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Weighted cross-entropy of a 5-way softmax against a 1-based rating.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: u8, weight: f64) -> Result<(f64, Vec<f64>)> {
    if !(1..=N_CLASSES as u8).contains(&label) {
        return Err(Error::InvalidRating(label as i64));
    }
    if logits.len() != N_CLASSES {
        return Err(Error::Dimension {
            context: "softmax_cross_entropy",
            expected: N_CLASSES,
            actual: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let k = (label - 1) as usize;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln() + m;
    let loss = weight * (log_sum - logits[k]);
    let mut grad = softmax(logits);
    grad[k] -= 1.0;
    for g in grad.iter_mut() {
        *g *= weight;
    }
    Ok((loss, grad))
}
