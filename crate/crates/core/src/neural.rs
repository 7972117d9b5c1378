//! A small dense-network engine: forward pass, backprop, Adam, positional
//! encoding and a finite-difference gradient check.
//!
//! Samples are laid out as matrix columns, so a batch of `B` inputs of width
//! `n` is an `n × B` matrix.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    /// `weights[l]` is `sizes[l+1] × sizes[l]`.
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    activations: Vec<Activation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    /// Mini-batch size; 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_decay: 1.0,
            epochs: 200,
            batch_size: 256,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Loss over the full dataset before any update.
    pub initial_mse: f64,
    /// Loss over the full dataset after each epoch.
    pub epoch_mse: Vec<f64>,
    pub final_mse: f64,
}

/// Intermediate values of a batched forward pass, kept for backprop.
struct Trace {
    /// Layer inputs; `inputs[0]` is the batch itself.
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// Xavier-uniform weights, zero biases, ReLU hidden layers and a linear output.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!(
                "layer sizes must have at least two entries, all >= 1: {layer_sizes:?}"
            )));
        }
        let n = layer_sizes.len() - 1;
        let activations = (0..n)
            .map(|l| if l + 1 == n { Activation::Identity } else { Activation::Relu })
            .collect();
        Self::with_activations(layer_sizes, activations, seed)
    }

    pub fn with_activations(layer_sizes: &[usize], activations: Vec<Activation>, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!("invalid layer sizes {layer_sizes:?}")));
        }
        if activations.len() != layer_sizes.len() - 1 {
            return Err(Error::Dimension {
                expected: layer_sizes.len() - 1,
                actual: activations.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            // row-major draw order so the sequence does not depend on storage
            let mut vals = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in * fan_out {
                vals.push(rng.gen_range(-limit..=limit));
            }
            weights.push(DMatrix::from_row_slice(fan_out, fan_in, &vals));
            biases.push(DVector::zeros(fan_out));
        }
        Ok(Self {
            sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activations,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Splits the network after layer `at` (counted in weight layers).
    pub fn split_at(&self, at: usize) -> (Mlp, Mlp) {
        assert!(at > 0 && at < self.weights.len());
        let front = Mlp {
            sizes: self.sizes[..=at].to_vec(),
            weights: self.weights[..at].to_vec(),
            biases: self.biases[..at].to_vec(),
            activations: self.activations[..at].to_vec(),
        };
        let back = Mlp {
            sizes: self.sizes[at..].to_vec(),
            weights: self.weights[at..].to_vec(),
            biases: self.biases[at..].to_vec(),
            activations: self.activations[at..].to_vec(),
        };
        (front, back)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut a = DVector::from_column_slice(x);
        for ((w, b), act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            let mut z = w * &a + b;
            z.apply(|v| *v = act.apply(*v));
            a = z;
        }
        Ok(a.as_slice().to_vec())
    }

    /// Forward pass over a batch whose columns are samples.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.input_dim());
        let mut a = x.clone();
        for ((w, b), act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            let mut z = w * &a;
            for mut col in z.column_iter_mut() {
                col += b;
            }
            z.apply(|v| *v = act.apply(*v));
            a = z;
        }
        a
    }

    fn forward_trace(&self, x: DMatrix<f64>) -> (DMatrix<f64>, Trace) {
        let mut inputs = vec![x];
        let mut pre = Vec::with_capacity(self.weights.len());
        for ((w, b), act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            let mut z = w * inputs.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += b;
            }
            let a = z.map(|v| act.apply(v));
            pre.push(z);
            inputs.push(a);
        }
        let out = inputs.pop().unwrap();
        (out, Trace { inputs, pre })
    }

    /// Gradients of `mean((y - t)²)` over all batch entries and output components.
    fn backward(&self, x: DMatrix<f64>, t: &DMatrix<f64>) -> (f64, Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let (y, trace) = self.forward_trace(x);
        let count = (y.nrows() * y.ncols()) as f64;
        let diff = &y - t;
        let loss = diff.norm_squared() / count;

        let n = self.weights.len();
        let mut gw = vec![DMatrix::zeros(0, 0); n];
        let mut gb = vec![DVector::zeros(0); n];
        let mut delta = diff * (2.0 / count);
        for l in (0..n).rev() {
            let act = self.activations[l];
            delta.zip_apply(&trace.pre[l], |d, z| *d *= act.derivative(z));
            gw[l] = &delta * trace.inputs[l].transpose();
            gb[l] = delta.column_sum();
            if l > 0 {
                delta = self.weights[l].transpose() * &delta;
            }
        }
        (loss, gw, gb)
    }

    pub fn mse(&self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
        const CHUNK: usize = 4096;
        let n = inputs.ncols();
        let mut sum = 0.0;
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            let y = self.forward_batch(&inputs.columns(start, len).into_owned());
            sum += (y - targets.columns(start, len)).norm_squared();
            start += len;
        }
        sum / (n * self.output_dim()) as f64
    }

    /// Adam on the mean squared error. Shuffling is driven by `config.seed`.
    pub fn train(&mut self, inputs: &[Vec<f64>], targets: &[Vec<f64>], config: &TrainConfig) -> Result<TrainReport> {
        if inputs.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::Dimension {
                expected: inputs.len(),
                actual: targets.len(),
            });
        }
        let x = columns_to_matrix(inputs, self.input_dim())?;
        let t = columns_to_matrix(targets, self.output_dim())?;
        self.train_matrix(&x, &t, config)
    }

    pub fn train_matrix(&mut self, x: &DMatrix<f64>, t: &DMatrix<f64>, config: &TrainConfig) -> Result<TrainReport> {
        if config.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(config.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(config.lr_decay > 0.0 && config.lr_decay <= 1.0) {
            return Err(Error::invalid("lr_decay must be in (0, 1]"));
        }
        let n = x.ncols();
        if n == 0 {
            return Err(Error::Empty("training set".into()));
        }
        if x.nrows() != self.input_dim() || t.nrows() != self.output_dim() || t.ncols() != n {
            return Err(Error::invalid("training matrices do not match the network shape"));
        }
        let batch = if config.batch_size == 0 { n } else { config.batch_size.min(n) };

        let mut adam = Adam::new(self, config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let initial_mse = self.mse(x, t);
        let mut epoch_mse = Vec::with_capacity(config.epochs);

        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(batch) {
                let xb = x.select_columns(idx);
                let tb = t.select_columns(idx);
                let (_, gw, gb) = self.backward(xb, &tb);
                adam.step(self, &gw, &gb);
            }
            epoch_mse.push(self.mse(x, t));
            adam.lr *= config.lr_decay;
        }
        let final_mse = *epoch_mse.last().unwrap();
        Ok(TrainReport {
            initial_mse,
            epoch_mse,
            final_mse,
        })
    }

    fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if idx < w.len() {
                return &mut w[idx];
            }
            idx -= w.len();
            if idx < b.len() {
                return &mut b[idx];
            }
            idx -= b.len();
        }
        panic!("parameter index out of range");
    }

    fn min_abs_hidden_preactivation(&self, x: &[f64]) -> f64 {
        let (_, trace) = self.forward_trace(DMatrix::from_column_slice(x.len(), 1, x));
        trace
            .pre
            .iter()
            .zip(&self.activations)
            .filter(|(_, a)| **a == Activation::Relu)
            .flat_map(|(z, _)| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::default();
        self.write_to(&mut w);
        w.save(path)
    }

    pub(crate) fn write_to(&self, w: &mut Writer) {
        w.u32(self.sizes.len() as u32);
        for &s in &self.sizes {
            w.u32(s as u32);
        }
        for (wm, b) in self.weights.iter().zip(&self.biases) {
            for r in 0..wm.nrows() {
                for c in 0..wm.ncols() {
                    w.f32(wm[(r, c)] as f32);
                }
            }
            for &v in b.iter() {
                w.f32(v as f32);
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = read_file(path)?;
        let mut r = Reader::new(&data, path);
        let m = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(m)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        let count = r.u32()? as usize;
        if !(2..=64).contains(&count) {
            return Err(r.err(format!("implausible layer count {count}")));
        }
        let sizes = (0..count).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut m = Mlp::new(&sizes, 0).map_err(|e| r.err(e.to_string()))?;
        for l in 0..m.weights.len() {
            let (rows, cols) = m.weights[l].shape();
            for i in 0..rows {
                for j in 0..cols {
                    m.weights[l][(i, j)] = r.f32()? as f64;
                }
            }
            for i in 0..rows {
                m.biases[l][i] = r.f32()? as f64;
            }
        }
        Ok(m)
    }
}

pub fn mlp_new(layer_sizes: &[usize], seed: u64) -> Result<Mlp> {
    Mlp::new(layer_sizes, seed)
}

pub(crate) fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        if c.len() != rows {
            return Err(Error::Dimension {
                expected: rows,
                actual: c.len(),
            });
        }
        m.column_mut(j).copy_from_slice(c);
    }
    Ok(m)
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    mw: Vec<DMatrix<f64>>,
    vw: Vec<DMatrix<f64>>,
    mb: Vec<DVector<f64>>,
    vb: Vec<DVector<f64>>,
}

impl Adam {
    fn new(m: &Mlp, c: &TrainConfig) -> Self {
        let zw: Vec<_> = m.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
        let zb: Vec<_> = m.biases.iter().map(|b| DVector::zeros(b.len())).collect();
        Self {
            lr: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.epsilon,
            step: 0,
            mw: zw.clone(),
            vw: zw,
            mb: zb.clone(),
            vb: zb,
        }
    }

    fn step(&mut self, m: &mut Mlp, gw: &[DMatrix<f64>], gb: &[DVector<f64>]) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: &mut [f64], g: &[f64], mom: &mut [f64], vel: &mut [f64]| {
            for i in 0..p.len() {
                mom[i] = b1 * mom[i] + (1.0 - b1) * g[i];
                vel[i] = b2 * vel[i] + (1.0 - b2) * g[i] * g[i];
                let mh = mom[i] / c1;
                let vh = vel[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        };
        for l in 0..m.weights.len() {
            update(
                m.weights[l].as_mut_slice(),
                gw[l].as_slice(),
                self.mw[l].as_mut_slice(),
                self.vw[l].as_mut_slice(),
            );
            update(
                m.biases[l].as_mut_slice(),
                gb[l].as_slice(),
                self.mb[l].as_mut_slice(),
                self.vb[l].as_mut_slice(),
            );
        }
    }
}

/// `concat(p, sin(2ᵏπp), cos(2ᵏπp))` for `k = 0..frequencies`, giving `3 + 6·frequencies` values.
pub fn positional_encode(p: &[f64; 3], frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * frequencies);
    out.extend_from_slice(p);
    for k in 0..frequencies {
        let w = (1u64 << k) as f64 * std::f64::consts::PI;
        out.extend(p.iter().map(|v| (w * v).sin()));
        out.extend(p.iter().map(|v| (w * v).cos()));
    }
    out
}

/// Largest relative disagreement between backprop and central finite
/// differences of the squared-error loss on one sample.
///
/// When a hidden pre-activation sits close enough to the ReLU kink that a
/// parameter perturbation could cross it, the input is nudged
/// deterministically before measuring.
pub fn grad_check(mlp: &Mlp, input: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    if input.len() != mlp.input_dim() || target.len() != mlp.output_dim() {
        return Err(Error::invalid("sample does not match network shape"));
    }
    let mut x = input.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let scale = |x: &[f64]| x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut attempts = 0;
    while mlp.min_abs_hidden_preactivation(&x) < 50.0 * eps * scale(&x) {
        attempts += 1;
        if attempts > 256 {
            return Err(Error::Numerical("could not move the sample away from ReLU kinks".into()));
        }
        x.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }

    let xm = DMatrix::from_column_slice(x.len(), 1, &x);
    let tm = DMatrix::from_column_slice(target.len(), 1, target);
    let (_, gw, gb) = mlp.backward(xm.clone(), &tm);
    let analytic: Vec<f64> = gw
        .iter()
        .zip(&gb)
        .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
        .collect();

    let loss = |m: &Mlp| (m.forward_batch(&xm) - &tm).norm_squared() / target.len() as f64;
    let mut probe = mlp.clone();
    let mut worst = 0.0f64;
    for (i, &g) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + eps;
        let up = loss(&probe);
        *probe.param_mut(i) = orig - eps;
        let down = loss(&probe);
        *probe.param_mut(i) = orig;
        let fd = (up - down) / (2.0 * eps);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
