//! Control networks `u^θ(t, x)` and `v^θ(t, x)`: a multilayer perceptron with a
//! sinusoidal time embedding, hand-written backpropagation and Adam.
//!
//! # Checkpoint layout
//!
//! A checkpoint is an ASCII header followed by the flat parameter vector:
//!
//! ```text
//! naas-checkpoint v1
//! dim 5
//! hidden 128,128,128        (or `none`)
//! time_embedding 64
//! max_frequency 100
//! activation silu
//! step 1200
//! params 51205
//! end
//! <params × 8 bytes, IEEE-754 binary64, little-endian>
//! ```
//!
//! Parameters are stored layer by layer, each layer as its weight matrix in
//! row-major `(out, in)` order followed by its bias. The input of the first
//! layer is `[sin(ω_k t) ..., cos(ω_k t) ..., x]`.

use std::hash::{Hash, Hasher};
use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{NaasError, Result};
use crate::scalar::Scalar;

const MAGIC: &str = "naas-checkpoint v1";

/// Architecture of a control network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    /// Number of sinusoidal time features; even, possibly zero.
    pub time_embedding: usize,
    /// Highest embedding frequency; frequencies are geometric from 1.
    pub max_frequency: f64,
}

impl NetConfig {
    /// Three hidden layers of width 128 (256 from d = 50 on) and a
    /// 64-feature time embedding.
    pub fn default_for_dim(dim: usize) -> Self {
        let width = if dim >= 50 { 256 } else { 128 };
        Self {
            dim,
            hidden: vec![width; 3],
            time_embedding: 64,
            max_frequency: 100.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(NaasError::InvalidInput(
                "network dim must be positive".into(),
            ));
        }
        if !self.time_embedding.is_multiple_of(2) {
            return Err(NaasError::InvalidInput(
                "time embedding size must be even".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(NaasError::InvalidInput(
                "hidden widths must be positive".into(),
            ));
        }
        if !(self.max_frequency >= 1.0) {
            return Err(NaasError::InvalidInput("max_frequency must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn weights<'a, T>(&self, p: &'a [T]) -> ArrayView2<'a, T> {
        ArrayView2::from_shape(
            (self.fan_out, self.fan_in),
            &p[self.offset..self.offset + self.fan_in * self.fan_out],
        )
        .expect("layer shape matches parameter slice")
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    fn len(&self) -> usize {
        self.fan_out * (self.fan_in + 1)
    }
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    (T::one() + (-z).exp()).recip()
}

#[inline]
fn silu<T: Scalar>(z: T) -> T {
    z * sigmoid(z)
}

#[inline]
fn silu_prime<T: Scalar>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

/// Parameterized control field `(t, x) -> R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlNet<T> {
    config: NetConfig,
    frequencies: Vec<T>,
    layers: Vec<Layer>,
    params: Vec<T>,
}

/// Per-layer activations kept for backpropagation.
struct Tape<T> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
}

impl<T: Scalar> ControlNet<T> {
    /// Hidden layers get uniform `±1/sqrt(fan_in)` weights and zero biases;
    /// the output layer is all zeros so the initial control vanishes.
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let n_layers = net.layers.len();
        for layer in &net.layers[..n_layers - 1] {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for w in &mut net.params[layer.offset..layer.offset + layer.fan_in * layer.fan_out] {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let half = config.time_embedding / 2;
        let frequencies = (0..half)
            .map(|k| {
                let frac = if half > 1 {
                    k as f64 / (half - 1) as f64
                } else {
                    0.0
                };
                T::lit(config.max_frequency.powf(frac))
            })
            .collect();
        let mut widths = vec![config.time_embedding + config.dim];
        widths.extend(&config.hidden);
        widths.push(config.dim);
        let mut offset = 0;
        let layers: Vec<Layer> = widths
            .windows(2)
            .map(|w| {
                let l = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += l.len();
                l
            })
            .collect();
        Ok(Self {
            config,
            frequencies,
            layers,
            params: vec![T::zero(); offset],
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Hash of the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in &self.params {
            p.as_f64().to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn input_matrix(&self, times: &[T], xs: ArrayView2<'_, T>) -> Array2<T> {
        let e = self.config.time_embedding;
        let half = e / 2;
        let mut a = Array2::zeros((times.len(), e + self.config.dim));
        for (mut row, (&t, x)) in a.outer_iter_mut().zip(times.iter().zip(xs.outer_iter())) {
            for (k, &w) in self.frequencies.iter().enumerate() {
                let (s, c) = (w * t).sin_cos();
                row[k] = s;
                row[half + k] = c;
            }
            for (j, &v) in x.iter().enumerate() {
                row[e + j] = v;
            }
        }
        a
    }

    fn run(&self, times: &[T], xs: ArrayView2<'_, T>, tape: Option<&mut Tape<T>>) -> Array2<T> {
        let mut a = self.input_matrix(times, xs);
        let last = self.layers.len() - 1;
        let mut tape = tape;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = layer.weights(&self.params);
            let b = &self.params[layer.bias_range()];
            let mut z = a.dot(&w.t());
            for mut row in z.outer_iter_mut() {
                for (zi, &bi) in row.iter_mut().zip(b) {
                    *zi += bi;
                }
            }
            if l == last {
                if let Some(t) = tape.as_deref_mut() {
                    t.inputs.push(a);
                }
                return z;
            }
            let next = z.mapv(silu);
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(a);
                t.pre.push(z);
            }
            a = next;
        }
        unreachable!("network has at least one layer")
    }

    /// Batched forward pass; `xs` is `(batch, dim)`.
    pub fn forward_batch(&self, times: &[T], xs: ArrayView2<'_, T>) -> Array2<T> {
        assert_eq!(times.len(), xs.nrows(), "one time per row");
        assert_eq!(xs.ncols(), self.config.dim, "row width equals dim");
        self.run(times, xs, None)
    }

    pub fn forward(&self, t: T, x: &[T]) -> Vec<T> {
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.forward_batch(&[t], xs).into_raw_vec_and_offset().0
    }

    /// Mean over the batch of `‖f(t, x) - target‖²` and its gradient with
    /// respect to the parameters. Also returns the network outputs.
    pub fn loss_and_grad(
        &self,
        times: &[T],
        xs: ArrayView2<'_, T>,
        targets: ArrayView2<'_, T>,
    ) -> (T, Vec<T>, Array2<T>) {
        let n = times.len();
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let out = self.run(times, xs, Some(&mut tape));
        let inv_n = T::from_usize_lossy(n).recip();
        let diff = &out - &targets;
        let loss = diff.iter().map(|&v| v * v).sum::<T>() * inv_n;
        let mut delta = diff * (T::lit(2.0) * inv_n);
        let mut grad = vec![T::zero(); self.params.len()];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a = &tape.inputs[l];
            let gw = delta.t().dot(a);
            let w_range = layer.offset..layer.offset + layer.fan_in * layer.fan_out;
            for (g, &v) in grad[w_range].iter_mut().zip(gw.iter()) {
                *g = v;
            }
            let gb = delta.sum_axis(Axis(0));
            for (g, &v) in grad[layer.bias_range()].iter_mut().zip(gb.iter()) {
                *g = v;
            }
            if l > 0 {
                let w = layer.weights(&self.params);
                let mut prev = delta.dot(&w);
                ndarray::Zip::from(&mut prev)
                    .and(&tape.pre[l - 1])
                    .for_each(|p, &z| *p *= silu_prime(z));
                delta = prev;
            }
        }
        (loss, grad, out)
    }

    /// One Adam step on the batch regression loss. Returns the loss before
    /// the update.
    pub fn regression_step(
        &mut self,
        opt: &mut Adam<T>,
        times: &[T],
        xs: ArrayView2<'_, T>,
        targets: ArrayView2<'_, T>,
    ) -> Result<T> {
        if times.is_empty() {
            return Err(NaasError::InvalidInput("empty regression batch".into()));
        }
        let (loss, mut grad, out) = self.loss_and_grad(times, xs, targets);
        if !loss.is_finite() {
            let max_abs =
                |m: ArrayView2<'_, T>| m.iter().fold(0.0f64, |acc, v| acc.max(v.as_f64().abs()));
            return Err(NaasError::Training {
                batch: times.len(),
                max_target: max_abs(targets),
                max_output: max_abs(out.view()),
            });
        }
        opt.step(&mut self.params, &mut grad);
        Ok(loss)
    }

    pub fn write_checkpoint<W: Write>(&self, step: u64, mut w: W) -> Result<()> {
        let hidden = if self.config.hidden.is_empty() {
            "none".to_string()
        } else {
            self.config
                .hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "dim {}", self.config.dim)?;
        writeln!(w, "hidden {hidden}")?;
        writeln!(w, "time_embedding {}", self.config.time_embedding)?;
        writeln!(w, "max_frequency {}", self.config.max_frequency)?;
        writeln!(w, "activation silu")?;
        writeln!(w, "step {step}")?;
        writeln!(w, "params {}", self.params.len())?;
        writeln!(w, "end")?;
        for p in &self.params {
            w.write_all(&p.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    /// Returns the network and the stored step count.
    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<(Self, u64)> {
        let mut fields = std::collections::HashMap::new();
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(NaasError::Checkpoint(format!(
                "bad magic line {:?}",
                line.trim_end()
            )));
        }
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(NaasError::Checkpoint("header not terminated".into()));
            }
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            let (k, v) = l
                .split_once(' ')
                .ok_or_else(|| NaasError::Checkpoint(format!("bad header line {l:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| NaasError::Checkpoint(format!("missing header field {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| NaasError::Checkpoint(format!("field {k} is not an integer")))
        };
        if get("activation")? != "silu" {
            return Err(NaasError::Checkpoint("unsupported activation".into()));
        }
        let hidden_s = get("hidden")?;
        let hidden = if hidden_s == "none" {
            Vec::new()
        } else {
            hidden_s
                .split(',')
                .map(|h| h.parse())
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|_| NaasError::Checkpoint("bad hidden widths".into()))?
        };
        let config = NetConfig {
            dim: num("dim")?,
            hidden,
            time_embedding: num("time_embedding")?,
            max_frequency: get("max_frequency")?
                .parse()
                .map_err(|_| NaasError::Checkpoint("bad max_frequency".into()))?,
        };
        let step = num("step")? as u64;
        let mut net = Self::zeros(config).map_err(|e| NaasError::Checkpoint(e.to_string()))?;
        if num("params")? != net.params.len() {
            return Err(NaasError::Checkpoint(
                "parameter count does not match architecture".into(),
            ));
        }
        let mut buf = [0u8; 8];
        for p in &mut net.params {
            r.read_exact(&mut buf)?;
            *p = T::lit(f64::from_le_bytes(buf));
        }
        Ok((net, step))
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    /// Global gradient-norm bound applied before the moment updates.
    pub grad_clip: Option<T>,
}

impl<T: Scalar> AdamConfig<T> {
    /// `(β₁, β₂) = (0, 0.9)`, `ε = 1e-8`, gradient clip 1.
    pub fn with_lr(lr: T) -> Self {
        Self {
            lr,
            beta1: T::zero(),
            beta2: T::lit(0.9),
            eps: T::lit(1e-8),
            grad_clip: Some(T::one()),
        }
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig<T>,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig<T>, num_params: usize) -> Self {
        Self {
            config,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [T], grad: &mut [T]) {
        let c = self.config;
        crate::scalar::clip_norm(grad, c.grad_clip);
        self.step += 1;
        let k = self.step as i32;
        let bc1 = T::one() - c.beta1.powi(k);
        let bc2 = T::one() - c.beta2.powi(k);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = c.beta1 * *m + (T::one() - c.beta1) * g;
            *v = c.beta2 * *v + (T::one() - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(dim: usize, hidden: Vec<usize>, emb: usize) -> NetConfig {
        NetConfig {
            dim,
            hidden,
            time_embedding: emb,
            max_frequency: 10.0,
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ControlNet::<f64>::new(small(3, vec![16, 16], 8), &mut rng).unwrap();
        assert_eq!(net.forward(0.3, &[1.0, -2.0, 4.0]), vec![0.0; 3]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = ControlNet::<f64>::new(small(2, vec![8], 4), &mut rng).unwrap();
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            *p = (i as f64 * 0.37).sin();
        }
        let a = net.forward(0.5, &[0.1, 0.2]);
        let b = net.forward(0.5, &[0.1, 0.2]);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn identity_configuration() {
        let d = 3;
        let emb = 4;
        let mut net = ControlNet::<f64>::zeros(small(d, vec![], emb)).unwrap();
        // Weight rows: zeros for the time features, identity for x.
        let cols = emb + d;
        for i in 0..d {
            net.params_mut()[i * cols + emb + i] = 1.0;
        }
        assert_eq!(net.forward(0.7, &[1.5, -2.0, 3.0]), vec![1.5, -2.0, 3.0]);
    }

    #[test]
    fn rejects_odd_embedding() {
        assert!(ControlNet::<f64>::zeros(small(2, vec![4], 3)).is_err());
    }

    #[test]
    fn hand_computed_adam_step() {
        // f(x) = θ with a single bias parameter: no hidden layer, no time
        // features, x = 0 so the weight receives no gradient.
        let mut net = ControlNet::<f64>::zeros(small(1, vec![], 0)).unwrap();
        assert_eq!(net.num_params(), 2);
        net.params_mut()[1] = 1.0;
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), net.num_params());
        opt.config.grad_clip = None;
        let xs = array![[0.0]];
        let ys = array![[0.0]];
        let loss = net
            .regression_step(&mut opt, &[0.0], xs.view(), ys.view())
            .unwrap();
        assert_eq!(loss, 1.0);
        // g = 2, m̂ = 2, v̂ = 0.1 * 4 / (1 - 0.9) = 4, step = 0.1 * 2 / (2 + 1e-8).
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((net.params()[1] - expected).abs() < 1e-15);
        assert!((net.params()[1] - 0.9).abs() < 1e-8);
        assert_eq!(net.params()[0], 0.0);
    }

    #[test]
    fn perfect_fit_leaves_parameters_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = ControlNet::<f64>::new(small(2, vec![8], 4), &mut rng).unwrap();
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            *p = (i as f64).cos() * 0.3;
        }
        let times = [0.1, 0.5];
        let xs = array![[1.0, 2.0], [-1.0, 0.5]];
        let ys = net.forward_batch(&times, xs.view());
        let before = net.params().to_vec();
        let mut opt = Adam::new(AdamConfig::with_lr(1e-2), net.num_params());
        let loss = net
            .regression_step(&mut opt, &times, xs.view(), ys.view())
            .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(net.params(), &before[..]);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = ControlNet::<f64>::new(small(2, vec![8], 4), &mut rng).unwrap();
        let before = net.params().to_vec();
        let mut opt = Adam::new(AdamConfig::with_lr(0.0), net.num_params());
        let xs = array![[1.0, 2.0]];
        let ys = array![[3.0, -1.0]];
        for _ in 0..5 {
            net.regression_step(&mut opt, &[0.2], xs.view(), ys.view())
                .unwrap();
        }
        assert_eq!(net.params(), &before[..]);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut net = ControlNet::<f64>::zeros(small(1, vec![], 0)).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), net.num_params());
        let xs = array![[0.0]];
        let ys = array![[f64::NAN]];
        let err = net.regression_step(&mut opt, &[0.0], xs.view(), ys.view());
        assert!(matches!(err, Err(NaasError::Training { batch: 1, .. })));
        assert!(net
            .regression_step(
                &mut opt,
                &[],
                xs.slice(ndarray::s![0..0, ..]),
                ys.slice(ndarray::s![0..0, ..])
            )
            .is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = ControlNet::<f64>::new(small(3, vec![5, 7], 6), &mut rng).unwrap();
        net.params_mut()[0] = std::f64::consts::PI;
        let mut buf = Vec::new();
        net.write_checkpoint(42, &mut buf).unwrap();
        let header_len = buf.len() - 8 * net.num_params();
        let header = std::str::from_utf8(&buf[..header_len]).unwrap();
        assert!(header.starts_with("naas-checkpoint v1\ndim 3\nhidden 5,7\n"));
        assert_eq!(
            &buf[header_len..header_len + 8],
            &std::f64::consts::PI.to_le_bytes()
        );
        let (back, step) = ControlNet::<f64>::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(step, 42);
        assert_eq!(back, net);
        assert!(ControlNet::<f64>::read_checkpoint(&buf[..header_len + 3]).is_err());
        assert!(ControlNet::<f64>::read_checkpoint(&b"nope\n"[..]).is_err());
    }
}
