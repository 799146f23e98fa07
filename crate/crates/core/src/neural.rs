//! Small dense networks with hand-written reverse-mode gradients, Adam,
//! Polyak averaging and the expectile loss.
//!
//! Parameters live in one flat vector: for each layer the row-major weight
//! matrix (`out x in`) followed by the bias. Gradients and optimizer moments use
//! the same layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fully connected network, ReLU on hidden layers, identity output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRecord", into = "MlpRecord")]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    /// `(weight offset, bias offset)` per layer.
    offsets: Vec<(usize, usize)>,
}

/// On-disk form: layer sizes plus the flat parameter array.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpRecord {
    pub layer_sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl From<Mlp> for MlpRecord {
    fn from(m: Mlp) -> Self {
        Self {
            layer_sizes: m.sizes,
            params: m.params,
        }
    }
}

impl TryFrom<MlpRecord> for Mlp {
    type Error = Error;

    fn try_from(r: MlpRecord) -> Result<Self> {
        Mlp::from_params(&r.layer_sizes, r.params)
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Input followed by every layer's output (post-activation).
    pub activations: Vec<Vec<f64>>,
    /// Pre-activations of every layer.
    pub pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations
            .last()
            .expect("trace has at least the input")
    }
}

fn layout(sizes: &[usize]) -> Result<(Vec<(usize, usize)>, usize)> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::InvalidConfig(format!("bad layer sizes {sizes:?}")));
    }
    let mut offsets = Vec::with_capacity(sizes.len() - 1);
    let mut at = 0;
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        offsets.push((at, at + fan_in * fan_out));
        at += fan_in * fan_out + fan_out;
    }
    Ok((offsets, at))
}

impl Mlp {
    /// Seeded initialization: hidden weights uniform in `+-sqrt(6 / fan_in)`,
    /// output weights uniform in `+-1 / sqrt(fan_in)`, zero biases.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let last = net.offsets.len() - 1;
        for (l, &(w_off, b_off)) in net.offsets.iter().enumerate() {
            let fan_in = sizes[l] as f64;
            let bound = if l == last {
                1.0 / fan_in.sqrt()
            } else {
                (6.0 / fan_in).sqrt()
            };
            for p in &mut net.params[w_off..b_off] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn seeded(sizes: &[usize], seed: u64) -> Result<Self> {
        Self::new(sizes, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        let (offsets, total) = layout(sizes)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; total],
            offsets,
        })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let (offsets, total) = layout(sizes)?;
        if params.len() != total {
            return Err(Error::ShapeMismatch {
                expected: total,
                got: params.len(),
            });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
            offsets,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.offsets.len()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight matrix (row-major, `out x in`) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (w, b) = self.offsets[l];
        (&self.params[w..b], &self.params[b..b + self.sizes[l + 1]])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (w, b) = self.offsets[l];
        let end = b + self.sizes[l + 1];
        let (ws, bs) = self.params[w..end].split_at_mut(b - w);
        (ws, bs)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let last = self.n_layers() - 1;
        let mut a = x.to_vec();
        for l in 0..self.n_layers() {
            let mut z = self.affine(l, &a);
            if l != last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let last = self.n_layers() - 1;
        let mut activations = Vec::with_capacity(self.n_layers() + 1);
        let mut pre = Vec::with_capacity(self.n_layers());
        activations.push(x.to_vec());
        for l in 0..self.n_layers() {
            let z = self.affine(l, activations.last().unwrap());
            let a = if l == last {
                z.clone()
            } else {
                z.iter().map(|v| v.max(0.0)).collect()
            };
            pre.push(z);
            activations.push(a);
        }
        Ok(Trace { activations, pre })
    }

    fn affine(&self, l: usize, a: &[f64]) -> Vec<f64> {
        let (w, b) = self.layer(l);
        let fan_in = a.len();
        w.chunks_exact(fan_in)
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>())
            .collect()
    }

    /// Accumulates `d(loss)/d(params)` into `grads` given `d(loss)/d(output)`
    /// and returns `d(loss)/d(input)`.
    pub fn backward(&self, trace: &Trace, dout: &[f64], grads: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grads.len(), self.params.len());
        self.backprop(trace, dout, Some(grads))
    }

    /// `d(loss)/d(input)` alone, leaving parameter gradients untouched.
    pub fn input_grad(&self, trace: &Trace, dout: &[f64]) -> Vec<f64> {
        self.backprop(trace, dout, None)
    }

    fn backprop(&self, trace: &Trace, dout: &[f64], mut grads: Option<&mut [f64]>) -> Vec<f64> {
        let last = self.n_layers() - 1;
        let mut delta = dout.to_vec();
        for l in (0..self.n_layers()).rev() {
            if l != last {
                for (d, z) in delta.iter_mut().zip(&trace.pre[l]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &trace.activations[l];
            let fan_in = input.len();
            let (w_off, b_off) = self.offsets[l];
            let w = &self.params[w_off..b_off];
            let mut dprev = vec![0.0; fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for i in 0..fan_in {
                    dprev[i] += d * row[i];
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = g[w_off..b_off + delta.len()].split_at_mut(b_off - w_off);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let grow = &mut gw[o * fan_in..(o + 1) * fan_in];
                    for i in 0..fan_in {
                        grow[i] += d * input[i];
                    }
                }
            }
            delta = dprev;
        }
        delta
    }

    /// Mean loss over `batch` and its parameter gradient. `loss(i, out)` returns
    /// the loss of sample `i` and its derivative with respect to `out`.
    pub fn grad<F>(&self, batch: &[Vec<f64>], mut loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnMut(usize, &[f64]) -> (f64, Vec<f64>),
    {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut grads = vec![0.0; self.n_params()];
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for (i, x) in batch.iter().enumerate() {
            let trace = self.forward_trace(x)?;
            let (l, mut dout) = loss(i, trace.output());
            if dout.len() != self.output_dim() {
                return Err(Error::ShapeMismatch {
                    expected: self.output_dim(),
                    got: dout.len(),
                });
            }
            total += l;
            dout.iter_mut().for_each(|d| *d *= scale);
            self.backward(&trace, &dout, &mut grads);
        }
        let mean = total * scale;
        if !mean.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss(format!("batch loss {mean}")));
        }
        Ok((mean, grads))
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn for_net(net: &Mlp, lr: f64) -> Self {
        Self::new(net.n_params(), lr)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &[f64]) -> Result<()> {
        self.step_slice(net.params_mut(), grads)
    }

    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: self.m.len(),
                got: grads.len().min(params.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `target <- rho * online + (1 - rho) * target`.
pub fn polyak_update(target: &mut Mlp, online: &Mlp, rho: f64) -> Result<()> {
    if target.sizes != online.sizes {
        return Err(Error::ShapeMismatch {
            expected: target.n_params(),
            got: online.n_params(),
        });
    }
    for (t, o) in target.params.iter_mut().zip(&online.params) {
        *t = rho * o + (1.0 - rho) * *t;
    }
    Ok(())
}

/// `|tau - 1[u < 0]| * u^2`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

/// Derivative of [`expectile_loss`] with respect to `u`.
pub fn expectile_grad(u: f64, tau: f64) -> f64 {
    2.0 * expectile_weight(u, tau) * u
}

fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}
