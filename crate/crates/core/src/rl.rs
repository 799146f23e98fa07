//! Offline soft actor-critic and implicit Q-learning on a fixed transition set,
//! plus deterministic evaluation rollouts.
//!
//! Actions are stored in environment units. Networks see them divided by the
//! action bound, so critic inputs and squashed policy outputs share `[-1, 1]`.
//! The policy head emits a mean and a log standard deviation per action
//! dimension; samples are `tanh(mu + sigma * eps)`.

use std::f64::consts::{LN_2, PI};
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envdata::{Environment, TransitionSet};
use crate::neural::{expectile_grad, expectile_loss, polyak_update, Adam, Mlp};
use crate::qme::QmeModel;
use crate::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const AWR_WEIGHT_CLIP: f64 = 100.0;
/// Evaluation resets are seeded with `run seed + EVAL_SEED_OFFSET`.
pub const EVAL_SEED_OFFSET: u64 = 10_000;
/// Dataset actions are clipped to this magnitude before `atanh`.
const ATANH_CLIP: f64 = 1.0 - 1e-6;
/// Lower bound on the AWR exponent so weights stay strictly positive.
const AWR_EXPONENT_FLOOR: f64 = -700.0;

const STREAM_SAMPLING: u64 = 2;
const STREAM_NOISE: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Sac,
    Iql,
}

impl Algo {
    pub fn name(&self) -> &'static str {
        match self {
            Algo::Sac => "sac",
            Algo::Iql => "iql",
        }
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sac" => Ok(Algo::Sac),
            "iql" => Ok(Algo::Iql),
            other => Err(Error::InvalidConfig(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub algo: Algo,
    pub gamma: f64,
    pub batch_size: usize,
    /// One gradient update per epoch.
    pub epochs: usize,
    pub lr: f64,
    /// Entropy weight (SAC).
    pub zeta: f64,
    /// Expectile of the value regression (IQL).
    pub tau_expectile: f64,
    /// Inverse temperature of the advantage weights (IQL).
    pub beta_awr: f64,
    pub polyak_rho: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_max_steps: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Two Q networks with a pessimistic minimum.
    pub twin_q: bool,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Sac,
            gamma: 0.99,
            batch_size: 100,
            epochs: 1200,
            lr: 3e-4,
            zeta: 0.2,
            tau_expectile: 0.7,
            beta_awr: 3.0,
            polyak_rho: 0.005,
            eval_every: 10,
            eval_episodes: 5,
            eval_max_steps: 50,
            seed: 0,
            hidden: vec![256, 256],
            twin_q: false,
        }
    }
}

impl RlConfig {
    pub fn new(algo: Algo) -> Self {
        Self {
            algo,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return bad(format!("zeta {}", self.zeta));
        }
        if !(self.tau_expectile > 0.0 && self.tau_expectile < 1.0) {
            return bad(format!(
                "tau_expectile {} outside (0, 1)",
                self.tau_expectile
            ));
        }
        if !(self.beta_awr >= 0.0 && self.beta_awr.is_finite()) {
            return bad(format!("beta_awr {}", self.beta_awr));
        }
        if !(0.0..=1.0).contains(&self.polyak_rho) {
            return bad(format!("polyak_rho {} outside [0, 1]", self.polyak_rho));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer of width 0".into());
        }
        Ok(())
    }
}

/// Mini-batch with actions already divided by the action bound.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub s: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub r: Vec<f64>,
    pub s_next: Vec<Vec<f64>>,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn from_indices(set: &TransitionSet, indices: &[usize], action_bound: f64) -> Self {
        let mut b = Batch {
            s: Vec::with_capacity(indices.len()),
            a: Vec::with_capacity(indices.len()),
            r: Vec::with_capacity(indices.len()),
            s_next: Vec::with_capacity(indices.len()),
            done: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            let t = &set.transitions[i];
            b.s.push(t.s.clone());
            b.a.push(
                t.a.iter()
                    .map(|a| (a / action_bound).clamp(-1.0, 1.0))
                    .collect(),
            );
            b.r.push(t.r);
            b.s_next.push(t.s_next.clone());
            b.done.push(t.done);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// Critics, value functions, their targets and the policy.
///
/// SAC bootstraps from `v_target`; IQL reads `q_target`. The unused target is
/// carried along untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentNets {
    pub q: Vec<Mlp>,
    pub q_target: Vec<Mlp>,
    pub v: Mlp,
    pub v_target: Mlp,
    pub policy: Mlp,
}

impl AgentNets {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        twin_q: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let sizes = |input: usize, output: usize| {
            let mut s = vec![input];
            s.extend_from_slice(hidden);
            s.push(output);
            s
        };
        let n_q = if twin_q { 2 } else { 1 };
        let mut q = Vec::with_capacity(n_q);
        for _ in 0..n_q {
            q.push(Mlp::new(&sizes(obs_dim + action_dim, 1), rng)?);
        }
        let v = Mlp::new(&sizes(obs_dim, 1), rng)?;
        let policy = Mlp::new(&sizes(obs_dim, 2 * action_dim), rng)?;
        Ok(Self {
            q_target: q.clone(),
            q,
            v_target: v.clone(),
            v,
            policy,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.policy.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.policy.output_dim() / 2
    }
}

/// Minimum over critics and the index attaining it.
fn q_min(nets: &[Mlp], s: &[f64], a: &[f64]) -> Result<(f64, usize)> {
    let x = concat(s, a);
    let mut best = (f64::INFINITY, 0);
    for (k, net) in nets.iter().enumerate() {
        let q = net.forward(&x)?[0];
        if q < best.0 {
            best = (q, k);
        }
    }
    Ok(best)
}

fn concat(s: &[f64], a: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(s.len() + a.len());
    x.extend_from_slice(s);
    x.extend_from_slice(a);
    x
}

/// `ln(1 - tanh(u)^2)` without cancellation for large `|u|`.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Splits a policy output into means and clamped log standard deviations;
/// `active[j]` is false where the clamp is engaged.
fn policy_head(out: &[f64]) -> (&[f64], Vec<f64>, Vec<bool>) {
    let d = out.len() / 2;
    let (mu, raw) = out.split_at(d);
    let ls = raw
        .iter()
        .map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX))
        .collect();
    let active = raw
        .iter()
        .map(|l| (LOG_STD_MIN..=LOG_STD_MAX).contains(l))
        .collect();
    (mu, ls, active)
}

/// Reparameterized sample: normalized action and `log pi` of it.
fn squashed_sample(mu: &[f64], ls: &[f64], eps: &[f64]) -> (Vec<f64>, f64) {
    let mut a = Vec::with_capacity(mu.len());
    let mut logp = 0.0;
    for j in 0..mu.len() {
        let u = mu[j] + ls[j].exp() * eps[j];
        a.push(u.tanh());
        logp += -0.5 * eps[j] * eps[j] - ls[j] - 0.5 * (2.0 * PI).ln() - log_one_minus_tanh_sq(u);
    }
    (a, logp)
}

fn label_non_finite(label: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFiniteLoss(msg) => Error::NonFiniteLoss(format!("{label}: {msg}")),
        other => other,
    }
}

fn finite(label: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss(format!("{label}: {v}")))
    }
}

/// Bootstrapped targets `r + gamma * (1 - done) * value(s')`.
fn td_targets(value: &Mlp, batch: &Batch, gamma: f64) -> Result<Vec<f64>> {
    (0..batch.len())
        .map(|i| {
            let next = if batch.done[i] {
                0.0
            } else {
                value.forward(&batch.s_next[i])?[0]
            };
            Ok(batch.r[i] + gamma * next)
        })
        .collect()
}

/// Sum over critics of the mean squared error to `targets`, with one
/// gradient per critic.
fn critic_mse(q: &[Mlp], batch: &Batch, targets: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
    let inputs: Vec<Vec<f64>> = (0..batch.len())
        .map(|i| concat(&batch.s[i], &batch.a[i]))
        .collect();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(q.len());
    for net in q {
        let (l, g) = net.grad(&inputs, |i, out| {
            let e = out[0] - targets[i];
            (e * e, vec![2.0 * e])
        })?;
        total += l;
        grads.push(g);
    }
    Ok((total, grads))
}

fn value_mse(v: &Mlp, batch: &Batch, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    v.grad(&batch.s, |i, out| {
        let e = out[0] - targets[i];
        (e * e, vec![2.0 * e])
    })
}

/// SAC critic targets `r + gamma * (1 - done) * V_target(s')`.
pub fn sac_q_targets(nets: &AgentNets, batch: &Batch, gamma: f64) -> Result<Vec<f64>> {
    td_targets(&nets.v_target, batch, gamma)
}

pub fn sac_q_loss(nets: &AgentNets, batch: &Batch, gamma: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let targets = sac_q_targets(nets, batch, gamma)?;
    critic_mse(&nets.q, batch, &targets)
}

/// SAC value targets `min_k Q_k(s, a~) - zeta * log pi(a~|s)` for the given
/// standard-normal draws.
pub fn sac_v_targets(
    nets: &AgentNets,
    batch: &Batch,
    zeta: f64,
    noise: &[Vec<f64>],
) -> Result<Vec<f64>> {
    check_noise(batch, noise, nets.action_dim())?;
    (0..batch.len())
        .map(|i| {
            let out = nets.policy.forward(&batch.s[i])?;
            let (mu, ls, _) = policy_head(&out);
            let (a, logp) = squashed_sample(mu, &ls, &noise[i]);
            Ok(q_min(&nets.q, &batch.s[i], &a)?.0 - zeta * logp)
        })
        .collect()
}

pub fn sac_v_loss(
    nets: &AgentNets,
    batch: &Batch,
    zeta: f64,
    noise: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    let targets = sac_v_targets(nets, batch, zeta, noise)?;
    value_mse(&nets.v, batch, &targets)
}

/// Mean of `zeta * log pi(a~|s) - min_k Q_k(s, a~)` over the batch, with the
/// gradient with respect to the policy parameters.
pub fn sac_policy_loss(
    nets: &AgentNets,
    batch: &Batch,
    zeta: f64,
    noise: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    let d = nets.action_dim();
    check_noise(batch, noise, d)?;
    let obs_dim = nets.obs_dim();
    let scale = 1.0 / batch.len() as f64;
    let mut grads = vec![0.0; nets.policy.n_params()];
    let mut total = 0.0;
    for i in 0..batch.len() {
        let trace = nets.policy.forward_trace(&batch.s[i])?;
        let (mu, ls, active) = policy_head(trace.output());
        let eps = &noise[i];
        let (a, logp) = squashed_sample(mu, &ls, eps);
        let (q, k) = q_min(&nets.q, &batch.s[i], &a)?;
        let q_trace = nets.q[k].forward_trace(&concat(&batch.s[i], &a))?;
        let dq_da = &nets.q[k].input_grad(&q_trace, &[1.0])[obs_dim..];
        total += zeta * logp - q;

        let mut dout = vec![0.0; 2 * d];
        for j in 0..d {
            let t = a[j];
            let sigma_eps = ls[j].exp() * eps[j];
            let dtanh = 1.0 - t * t;
            dout[j] = scale * (zeta * 2.0 * t - dq_da[j] * dtanh);
            if active[j] {
                dout[d + j] =
                    scale * (zeta * (-1.0 + 2.0 * t * sigma_eps) - dq_da[j] * dtanh * sigma_eps);
            }
        }
        nets.policy.backward(&trace, &dout, &mut grads);
    }
    let mean = finite("sac policy loss", total * scale)?;
    Ok((mean, grads))
}

fn check_noise(batch: &Batch, noise: &[Vec<f64>], action_dim: usize) -> Result<()> {
    if noise.len() != batch.len() {
        return Err(Error::ShapeMismatch {
            expected: batch.len(),
            got: noise.len(),
        });
    }
    if let Some(bad) = noise.iter().find(|e| e.len() != action_dim) {
        return Err(Error::ShapeMismatch {
            expected: action_dim,
            got: bad.len(),
        });
    }
    Ok(())
}

/// Mean expectile loss of `min_k Q_target_k(s, a) - V(s)`.
pub fn iql_v_loss(nets: &AgentNets, batch: &Batch, tau: f64) -> Result<(f64, Vec<f64>)> {
    let q: Vec<f64> = (0..batch.len())
        .map(|i| Ok(q_min(&nets.q_target, &batch.s[i], &batch.a[i])?.0))
        .collect::<Result<_>>()?;
    nets.v.grad(&batch.s, |i, out| {
        let u = q[i] - out[0];
        (expectile_loss(u, tau), vec![-expectile_grad(u, tau)])
    })
}

/// Critic regression onto `r + gamma * (1 - done) * V(s')`.
pub fn iql_q_loss(nets: &AgentNets, batch: &Batch, gamma: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let targets = td_targets(&nets.v, batch, gamma)?;
    critic_mse(&nets.q, batch, &targets)
}

/// `min(exp(beta * (Q_target(s, a) - V(s))), 100)` per sample.
pub fn awr_weights(nets: &AgentNets, batch: &Batch, beta: f64) -> Result<Vec<f64>> {
    (0..batch.len())
        .map(|i| {
            let q = q_min(&nets.q_target, &batch.s[i], &batch.a[i])?.0;
            let v = nets.v.forward(&batch.s[i])?[0];
            Ok(awr_weight(q - v, beta))
        })
        .collect()
}

pub fn awr_weight(advantage: f64, beta: f64) -> f64 {
    let x = beta * advantage;
    if x.is_nan() {
        return f64::NAN;
    }
    x.max(AWR_EXPONENT_FLOOR).exp().min(AWR_WEIGHT_CLIP)
}

/// Advantage-weighted negative log-likelihood of the dataset actions.
pub fn iql_policy_loss(nets: &AgentNets, batch: &Batch, beta: f64) -> Result<(f64, Vec<f64>)> {
    let weights = awr_weights(nets, batch, beta)?;
    let d = nets.action_dim();
    nets.policy.grad(&batch.s, |i, out| {
        let (mu, ls, active) = policy_head(out);
        let w = weights[i];
        let mut nll = 0.0;
        let mut dout = vec![0.0; 2 * d];
        for j in 0..d {
            let u = batch.a[i][j].clamp(-ATANH_CLIP, ATANH_CLIP).atanh();
            let sigma = ls[j].exp();
            let z = (u - mu[j]) / sigma;
            nll += 0.5 * z * z + ls[j] + 0.5 * (2.0 * PI).ln() + log_one_minus_tanh_sq(u);
            dout[j] = -w * z / sigma;
            if active[j] {
                dout[d + j] = w * (1.0 - z * z);
            }
        }
        (w * nll, dout)
    })
}

/// Adam state for every trained network.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub q: Vec<Adam>,
    pub v: Adam,
    pub policy: Adam,
}

impl Optimizers {
    pub fn new(nets: &AgentNets, lr: f64) -> Self {
        Self {
            q: nets.q.iter().map(|n| Adam::for_net(n, lr)).collect(),
            v: Adam::for_net(&nets.v, lr),
            policy: Adam::for_net(&nets.policy, lr),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub q_loss: f64,
    pub v_loss: f64,
    pub policy_loss: f64,
}

fn step_critics(nets: &mut AgentNets, opt: &mut Optimizers, grads: &[Vec<f64>]) -> Result<()> {
    for ((net, adam), g) in nets.q.iter_mut().zip(opt.q.iter_mut()).zip(grads) {
        adam.step(net, g)?;
    }
    Ok(())
}

fn draw_noise(rng: &mut dyn RngCore, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// One SAC step on Q, V and the policy, then Polyak averaging of `v_target`.
pub fn sac_update(
    nets: &mut AgentNets,
    opt: &mut Optimizers,
    batch: &Batch,
    cfg: &RlConfig,
    rng: &mut dyn RngCore,
) -> Result<UpdateStats> {
    let d = nets.action_dim();
    let (q_loss, q_grads) =
        sac_q_loss(nets, batch, cfg.gamma).map_err(label_non_finite("sac q loss"))?;
    step_critics(nets, opt, &q_grads)?;

    let noise = draw_noise(rng, batch.len(), d);
    let (v_loss, v_grad) =
        sac_v_loss(nets, batch, cfg.zeta, &noise).map_err(label_non_finite("sac v loss"))?;
    opt.v.step(&mut nets.v, &v_grad)?;

    let noise = draw_noise(rng, batch.len(), d);
    let (policy_loss, p_grad) = sac_policy_loss(nets, batch, cfg.zeta, &noise)?;
    opt.policy.step(&mut nets.policy, &p_grad)?;

    polyak_update(&mut nets.v_target, &nets.v, cfg.polyak_rho)?;
    Ok(UpdateStats {
        q_loss,
        v_loss,
        policy_loss,
    })
}

/// One IQL step on V, Q and the policy, then Polyak averaging of `q_target`.
pub fn iql_update(
    nets: &mut AgentNets,
    opt: &mut Optimizers,
    batch: &Batch,
    cfg: &RlConfig,
) -> Result<UpdateStats> {
    let (v_loss, v_grad) =
        iql_v_loss(nets, batch, cfg.tau_expectile).map_err(label_non_finite("iql v loss"))?;
    opt.v.step(&mut nets.v, &v_grad)?;

    let (q_loss, q_grads) =
        iql_q_loss(nets, batch, cfg.gamma).map_err(label_non_finite("iql q loss"))?;
    step_critics(nets, opt, &q_grads)?;

    let (policy_loss, p_grad) =
        iql_policy_loss(nets, batch, cfg.beta_awr).map_err(label_non_finite("iql policy loss"))?;
    opt.policy.step(&mut nets.policy, &p_grad)?;

    for (t, q) in nets.q_target.iter_mut().zip(&nets.q) {
        polyak_update(t, q, cfg.polyak_rho)?;
    }
    Ok(UpdateStats {
        q_loss,
        v_loss,
        policy_loss,
    })
}

/// Squashed Gaussian policy acting in environment units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub action_bound: f64,
}

impl GaussianPolicy {
    pub fn action_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Pre-squash means and clamped log standard deviations.
    pub fn mean_and_log_std(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.net.forward(obs)?;
        let (mu, ls, _) = policy_head(&out);
        Ok((mu.to_vec(), ls))
    }

    /// Deterministic action `bound * tanh(mu)`.
    pub fn act(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let (mu, _) = self.mean_and_log_std(obs)?;
        Ok(mu.iter().map(|m| self.action_bound * m.tanh()).collect())
    }
}

/// Maps raw environment observations into the representation the policy was
/// trained on.
pub trait StateEncoder {
    fn encode(&self, obs: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl StateEncoder for Identity {
    fn encode(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(obs.to_vec())
    }
}

/// Per-observation L2 normalization; zero vectors pass through.
#[derive(Clone, Copy, Debug, Default)]
pub struct L2Normalize;

impl StateEncoder for L2Normalize {
    fn encode(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(l2_normalize(obs).0)
    }
}

/// `(x / |x|, false)`, or `(x, true)` when `x` is zero.
pub fn l2_normalize(x: &[f64]) -> (Vec<f64>, bool) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        (x.to_vec(), true)
    } else {
        (x.iter().map(|v| v / n).collect(), false)
    }
}

impl StateEncoder for QmeModel {
    fn encode(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.embed(obs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointReturn {
    pub epoch: usize,
    pub mean_return: f64,
}

/// Mean evaluation return at every checkpoint of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTrace {
    pub run: usize,
    pub points: Vec<CheckpointReturn>,
}

pub const TRACE_CSV_HEADER: &str = "run,checkpoint_epoch,mean_return";

impl EvalTrace {
    pub fn epochs(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.epoch).collect()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean_return).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TRACE_CSV_HEADER}")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", self.run, p.epoch, p.mean_return)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    /// Parses one or more runs; rows of a run must be contiguous.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<EvalTrace>> {
        let mut traces: Vec<EvalTrace> = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() || (i == 0 && line == TRACE_CSV_HEADER) {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: lineno, msg };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(parse_err(format!(
                    "expected 3 fields, got {}",
                    fields.len()
                )));
            }
            let run: usize = fields[0]
                .parse()
                .map_err(|e| parse_err(format!("run: {e}")))?;
            let epoch: usize = fields[1]
                .parse()
                .map_err(|e| parse_err(format!("epoch: {e}")))?;
            let mean_return: f64 = fields[2]
                .parse()
                .map_err(|e| parse_err(format!("return: {e}")))?;
            match traces.last_mut() {
                Some(t) if t.run == run => t.points.push(CheckpointReturn { epoch, mean_return }),
                _ => traces.push(EvalTrace {
                    run,
                    points: vec![CheckpointReturn { epoch, mean_return }],
                }),
            }
        }
        Ok(traces)
    }
}

/// Generator for the reset (and any other randomness) of evaluation episode `episode`.
pub fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64);
    rng
}

/// Undiscounted return of one episode capped at `max_steps`.
pub fn rollout(
    policy: &GaussianPolicy,
    env: &mut dyn Environment,
    encoder: Option<&dyn StateEncoder>,
    max_steps: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let mut obs = env.reset(rng);
    let mut total = 0.0;
    for _ in 0..max_steps {
        let input = match encoder {
            Some(e) => e.encode(&obs)?,
            None => obs,
        };
        let action = policy.act(&input)?;
        let (next, r, done) = env.step(&action);
        total += r;
        obs = next;
        if done {
            break;
        }
    }
    Ok(total)
}

/// Mean return of the deterministic policy over `episodes` seeded resets.
pub fn evaluate(
    policy: &GaussianPolicy,
    env: &mut dyn Environment,
    encoder: Option<&dyn StateEncoder>,
    episodes: usize,
    max_steps: usize,
    seed: u64,
) -> Result<f64> {
    if episodes == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for e in 0..episodes {
        total += rollout(policy, env, encoder, max_steps, &mut episode_rng(seed, e))?;
    }
    Ok(total / episodes as f64)
}

/// Trains on `dataset` without touching `env` except for checkpoint
/// evaluations, which reset with `cfg.seed + EVAL_SEED_OFFSET`.
pub fn train_offline(
    dataset: &TransitionSet,
    cfg: &RlConfig,
    env: &mut dyn Environment,
    encoder: Option<&dyn StateEncoder>,
) -> Result<(GaussianPolicy, EvalTrace)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset.validate()?;
    if dataset.meta.action_dim != env.action_dim() {
        return Err(Error::DimMismatch(format!(
            "dataset action dim {} but environment action dim {}",
            dataset.meta.action_dim,
            env.action_dim()
        )));
    }
    let bound = env.action_bound();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(STREAM_SAMPLING);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(STREAM_NOISE);

    let mut nets = AgentNets::new(
        dataset.meta.obs_dim,
        dataset.meta.action_dim,
        &cfg.hidden,
        cfg.twin_q,
        &mut init_rng,
    )?;
    let mut opt = Optimizers::new(&nets, cfg.lr);
    let eval_seed = cfg.seed.wrapping_add(EVAL_SEED_OFFSET);
    let mut trace = EvalTrace::default();
    let n = dataset.len();

    for epoch in 1..=cfg.epochs {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| sample_rng.random_range(0..n))
            .collect();
        let batch = Batch::from_indices(dataset, &idx, bound);
        match cfg.algo {
            Algo::Sac => sac_update(&mut nets, &mut opt, &batch, cfg, &mut noise_rng),
            Algo::Iql => iql_update(&mut nets, &mut opt, &batch, cfg),
        }
        .map_err(|e| match e {
            Error::NonFiniteLoss(msg) => Error::NonFiniteLoss(format!("epoch {epoch}, {msg}")),
            other => other,
        })?;
        if epoch % cfg.eval_every == 0 {
            let policy = GaussianPolicy {
                net: nets.policy.clone(),
                action_bound: bound,
            };
            let mean_return = evaluate(
                &policy,
                env,
                encoder,
                cfg.eval_episodes,
                cfg.eval_max_steps,
                eval_seed,
            )?;
            trace.points.push(CheckpointReturn { epoch, mean_return });
        }
    }
    Ok((
        GaussianPolicy {
            net: nets.policy,
            action_bound: bound,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envdata::{
        generate_offline, Behavior, DatasetMeta, EnvConfig, Pendulum, Transition, PENDULUM_ENV,
    };

    fn tiny_nets(seed: u64, twin: bool) -> AgentNets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AgentNets::new(2, 1, &[1], twin, &mut rng).unwrap()
    }

    fn small_nets(seed: u64, twin: bool) -> AgentNets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nets = AgentNets::new(2, 1, &[6], twin, &mut rng).unwrap();
        // Distinct targets so target/online mix-ups show up in the gradients.
        for t in nets.q_target.iter_mut() {
            *t = Mlp::new(t.sizes(), &mut rng).unwrap();
        }
        nets.v_target = Mlp::new(nets.v.sizes(), &mut rng).unwrap();
        nets
    }

    fn batch2() -> Batch {
        Batch {
            s: vec![vec![0.3, -0.7], vec![-1.1, 0.4]],
            a: vec![vec![0.25], vec![-0.6]],
            r: vec![-1.5, -0.2],
            s_next: vec![vec![0.2, -0.5], vec![-0.9, 0.8]],
            done: vec![false, true],
        }
    }

    /// Relative agreement of an analytic gradient with central differences.
    fn check_fd(params: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) {
        let h = 1e-6;
        let mut p = params.to_vec();
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs()).max(1e-3);
            assert!(
                (fd - analytic[i]).abs() / scale < 1e-4,
                "param {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    fn set_params(net: &mut Mlp, p: &[f64]) {
        net.params_mut().copy_from_slice(p);
    }

    fn noise2() -> Vec<Vec<f64>> {
        vec![vec![0.4], vec![-1.3]]
    }

    #[test]
    fn gamma_zero_q_target_is_reward() {
        let nets = small_nets(1, false);
        let b = batch2();
        assert_eq!(sac_q_targets(&nets, &b, 0.0).unwrap(), b.r);
    }

    #[test]
    fn done_masks_bootstrap() {
        let nets = small_nets(1, false);
        let b = batch2();
        let t = sac_q_targets(&nets, &b, 0.99).unwrap();
        assert_eq!(t[1], b.r[1]);
        let v_next = nets.v_target.forward(&b.s_next[0]).unwrap()[0];
        assert_eq!(t[0], b.r[0] + 0.99 * v_next);
    }

    #[test]
    fn zeta_zero_deterministic_v_target_is_q_of_mean_action() {
        let nets = small_nets(2, false);
        let b = batch2();
        let zero = vec![vec![0.0]; 2];
        let t = sac_v_targets(&nets, &b, 0.0, &zero).unwrap();
        for i in 0..2 {
            let out = nets.policy.forward(&b.s[i]).unwrap();
            let a = out[0].tanh();
            let q = nets.q[0].forward(&[b.s[i][0], b.s[i][1], a]).unwrap()[0];
            assert_eq!(t[i], q);
        }
    }

    #[test]
    fn sac_gradients_match_finite_differences() {
        for twin in [false, true] {
            for nets in [tiny_nets(3, twin), small_nets(4, twin)] {
                let b = batch2();
                let noise = noise2();

                let (_, g) = sac_q_loss(&nets, &b, 0.9).unwrap();
                for k in 0..nets.q.len() {
                    check_fd(nets.q[k].params(), &g[k], |p| {
                        let mut n = nets.clone();
                        set_params(&mut n.q[k], p);
                        sac_q_loss(&n, &b, 0.9).unwrap().0
                    });
                }

                let (_, g) = sac_v_loss(&nets, &b, 0.2, &noise).unwrap();
                check_fd(nets.v.params(), &g, |p| {
                    let mut n = nets.clone();
                    set_params(&mut n.v, p);
                    sac_v_loss(&n, &b, 0.2, &noise).unwrap().0
                });

                let (_, g) = sac_policy_loss(&nets, &b, 0.2, &noise).unwrap();
                check_fd(nets.policy.params(), &g, |p| {
                    let mut n = nets.clone();
                    set_params(&mut n.policy, p);
                    sac_policy_loss(&n, &b, 0.2, &noise).unwrap().0
                });
            }
        }
    }

    #[test]
    fn iql_gradients_match_finite_differences() {
        for twin in [false, true] {
            for nets in [tiny_nets(5, twin), small_nets(6, twin)] {
                let b = batch2();

                let (_, g) = iql_v_loss(&nets, &b, 0.7).unwrap();
                check_fd(nets.v.params(), &g, |p| {
                    let mut n = nets.clone();
                    set_params(&mut n.v, p);
                    iql_v_loss(&n, &b, 0.7).unwrap().0
                });

                let (_, g) = iql_q_loss(&nets, &b, 0.9).unwrap();
                for k in 0..nets.q.len() {
                    check_fd(nets.q[k].params(), &g[k], |p| {
                        let mut n = nets.clone();
                        set_params(&mut n.q[k], p);
                        iql_q_loss(&n, &b, 0.9).unwrap().0
                    });
                }

                let (_, g) = iql_policy_loss(&nets, &b, 3.0).unwrap();
                check_fd(nets.policy.params(), &g, |p| {
                    let mut n = nets.clone();
                    set_params(&mut n.policy, p);
                    iql_policy_loss(&n, &b, 3.0).unwrap().0
                });
            }
        }
    }

    #[test]
    fn symmetric_expectile_is_least_squares() {
        let nets = small_nets(7, false);
        let b = batch2();
        let (l, _) = iql_v_loss(&nets, &b, 0.5).unwrap();
        let mut expected = 0.0;
        for i in 0..2 {
            let q = nets.q_target[0]
                .forward(&[b.s[i][0], b.s[i][1], b.a[i][0]])
                .unwrap()[0];
            let v = nets.v.forward(&b.s[i]).unwrap()[0];
            expected += 0.5 * (q - v) * (q - v);
        }
        assert!((l - expected / 2.0).abs() < 1e-15);
    }

    #[test]
    fn awr_weight_cases() {
        let nets = small_nets(8, false);
        assert_eq!(awr_weights(&nets, &batch2(), 0.0).unwrap(), vec![1.0, 1.0]);
        assert_eq!(awr_weight(10.0, 3.0), 100.0);
        assert_eq!(awr_weight(1.0, 3.0), 3f64.exp());
        let tiny = awr_weight(-1e6, 3.0);
        assert!(tiny > 0.0 && tiny <= 100.0);
        assert_eq!(awr_weight(f64::INFINITY, 3.0), 100.0);
    }

    #[test]
    fn log_one_minus_tanh_sq_is_stable() {
        for u in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let direct = (1.0 - f64::tanh(u).powi(2)).ln();
            assert!((log_one_minus_tanh_sq(u) - direct).abs() < 1e-12);
        }
        assert!((log_one_minus_tanh_sq(50.0) - (2.0 * LN_2 - 100.0)).abs() < 1e-9);
    }

    #[test]
    fn sac_q_steps_overfit_reward_at_gamma_zero() {
        let mut nets = small_nets(9, false);
        let mut opt = Optimizers::new(&nets, 1e-2);
        let b = batch2();
        let mut prev = f64::INFINITY;
        for _ in 0..500 {
            let (l, g) = sac_q_loss(&nets, &b, 0.0).unwrap();
            assert!(l <= prev, "loss rose from {prev} to {l}");
            prev = l;
            if l < 1e-3 {
                break;
            }
            step_critics(&mut nets, &mut opt, &g).unwrap();
        }
        assert!(prev < 1e-3, "{prev}");
    }

    #[test]
    fn non_finite_losses_abort() {
        let mut nets = small_nets(10, false);
        let mut opt = Optimizers::new(&nets, 1e-3);
        let mut b = batch2();
        b.r[0] = f64::NAN;
        let cfg = RlConfig::new(Algo::Iql);
        let err = iql_update(&mut nets, &mut opt, &b, &cfg).unwrap_err();
        assert!(
            matches!(err, Error::NonFiniteLoss(ref m) if m.contains("iql q loss")),
            "{err}"
        );
    }

    fn tiny_cfg(algo: Algo) -> RlConfig {
        RlConfig {
            epochs: 30,
            batch_size: 16,
            hidden: vec![16, 16],
            eval_episodes: 2,
            eval_max_steps: 10,
            ..RlConfig::new(algo)
        }
    }

    fn dataset() -> TransitionSet {
        let env = EnvConfig {
            lift_dim: 0,
            seed: 0,
        };
        generate_offline(&env, Behavior::NoisyEnergy { epsilon: 0.3 }, 60, 0).unwrap()
    }

    /// Wraps the pendulum and counts environment calls.
    struct Counting {
        inner: Pendulum,
        resets: usize,
        steps: usize,
    }

    impl Environment for Counting {
        fn obs_dim(&self) -> usize {
            self.inner.obs_dim()
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn action_bound(&self) -> f64 {
            self.inner.action_bound()
        }
        fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
            self.resets += 1;
            self.inner.reset(rng)
        }
        fn step(&mut self, a: &[f64]) -> (Vec<f64>, f64, bool) {
            self.steps += 1;
            self.inner.step(a)
        }
    }

    fn counting() -> Counting {
        Counting {
            inner: Pendulum::new(&EnvConfig {
                lift_dim: 0,
                seed: 0,
            })
            .unwrap(),
            resets: 0,
            steps: 0,
        }
    }

    #[test]
    fn training_only_touches_env_at_checkpoints() {
        let data = dataset();
        for algo in [Algo::Sac, Algo::Iql] {
            let mut env = counting();
            let cfg = RlConfig {
                eval_every: 100,
                ..tiny_cfg(algo)
            };
            let (_, trace) = train_offline(&data, &cfg, &mut env, None).unwrap();
            assert!(trace.points.is_empty());
            assert_eq!((env.resets, env.steps), (0, 0));

            let mut env = counting();
            let (_, trace) = train_offline(&data, &tiny_cfg(algo), &mut env, None).unwrap();
            assert_eq!(trace.epochs(), vec![10, 20, 30]);
            assert_eq!(env.resets, 3 * 2);
            assert_eq!(env.steps, 3 * 2 * 10);
        }
    }

    #[test]
    fn zero_epochs_returns_initial_policy() {
        let data = dataset();
        let cfg = RlConfig {
            epochs: 0,
            ..tiny_cfg(Algo::Sac)
        };
        let mut env = counting();
        let (policy, trace) = train_offline(&data, &cfg, &mut env, None).unwrap();
        assert!(trace.points.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = AgentNets::new(3, 1, &cfg.hidden, false, &mut rng).unwrap();
        assert_eq!(policy.net, init.policy);
    }

    #[test]
    fn training_is_deterministic_and_identity_encoder_is_transparent() {
        let data = dataset();
        for algo in [Algo::Sac, Algo::Iql] {
            let cfg = tiny_cfg(algo);
            let mut env = counting();
            let a = train_offline(&data, &cfg, &mut env, None).unwrap();
            let b = train_offline(&data, &cfg, &mut env, None).unwrap();
            let c = train_offline(&data, &cfg, &mut env, Some(&Identity)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
            let other = RlConfig { seed: 1, ..cfg };
            let d = train_offline(&data, &other, &mut env, None).unwrap();
            assert_ne!(a.0, d.0);
        }
    }

    #[test]
    fn evaluation_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nets = AgentNets::new(3, 1, &[8], false, &mut rng).unwrap();
        let policy = GaussianPolicy {
            net: nets.policy,
            action_bound: 2.0,
        };
        let mut env = counting();
        assert_eq!(evaluate(&policy, &mut env, None, 3, 0, 5).unwrap(), 0.0);
        let r1 = rollout(&policy, &mut env, None, 50, &mut episode_rng(5, 0)).unwrap();
        let r2 = rollout(&policy, &mut env, None, 50, &mut episode_rng(5, 0)).unwrap();
        assert_eq!(r1, r2);
        assert!(r1 <= 0.0);
        let mean = evaluate(&policy, &mut env, None, 2, 50, 5).unwrap();
        let r3 = rollout(&policy, &mut env, None, 50, &mut episode_rng(5, 1)).unwrap();
        assert!((mean - 0.5 * (r1 + r3)).abs() < 1e-12);
    }

    #[test]
    fn deterministic_action_is_bounded_tanh_of_mean() {
        let net = Mlp::from_params(&[1, 2], vec![0.0, 0.0, 0.5, -1.0]).unwrap();
        let p = GaussianPolicy {
            net,
            action_bound: 2.0,
        };
        assert_eq!(p.act(&[3.0]).unwrap(), vec![2.0 * 0.5f64.tanh()]);
    }

    #[test]
    fn batch_normalizes_actions() {
        let meta = DatasetMeta {
            env: PENDULUM_ENV.into(),
            obs_dim: 1,
            action_dim: 1,
            seed: None,
            lift_dim: None,
            behavior: None,
            action_bound: Some(2.0),
            repr: None,
        };
        let t = |a: f64| Transition {
            s: vec![1.0],
            a: vec![a],
            r: -1.0,
            s_next: vec![0.5],
            done: false,
        };
        let set = TransitionSet::new(meta, vec![t(1.0), t(-2.0), t(3.0)]).unwrap();
        let b = Batch::from_indices(&set, &[2, 0, 1, 0], 2.0);
        assert_eq!(b.a, vec![vec![1.0], vec![0.5], vec![-1.0], vec![0.5]]);
        assert_eq!(b.len(), 4);
    }

    #[test]
    fn trace_csv_round_trip() {
        let t = EvalTrace {
            run: 3,
            points: vec![
                CheckpointReturn {
                    epoch: 10,
                    mean_return: -123.456789012345,
                },
                CheckpointReturn {
                    epoch: 20,
                    mean_return: -0.1,
                },
            ],
        };
        let csv = t.to_csv();
        assert!(csv.starts_with("run,checkpoint_epoch,mean_return\n3,10,"));
        let back = EvalTrace::read_csv(csv.as_bytes()).unwrap();
        assert_eq!(back, vec![t]);
        let err =
            EvalTrace::read_csv("run,checkpoint_epoch,mean_return\n1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn config_validation() {
        assert!(RlConfig::default().validate().is_ok());
        for bad in [
            RlConfig {
                gamma: 1.0,
                ..RlConfig::default()
            },
            RlConfig {
                batch_size: 0,
                ..RlConfig::default()
            },
            RlConfig {
                eval_every: 0,
                ..RlConfig::default()
            },
            RlConfig {
                tau_expectile: 1.0,
                ..RlConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!("IQL".parse::<Algo>().unwrap(), Algo::Iql);
        assert!("ppo".parse::<Algo>().is_err());
    }
}
