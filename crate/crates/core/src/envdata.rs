//! Pendulum swing-up environment, offline dataset generation and JSONL IO.
//!
//! Angle convention: `theta = 0` is upright. The dynamics and cost follow the
//! usual pendulum benchmark (g = 10, m = 1, l = 1, dt = 0.05, torque in
//! [-2, 2], speed in [-8, 8]).

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const GRAVITY: f64 = 10.0;
pub const MASS: f64 = 1.0;
pub const LENGTH: f64 = 1.0;
pub const DT: f64 = 0.05;
pub const MAX_TORQUE: f64 = 2.0;
pub const MAX_SPEED: f64 = 8.0;
pub const PENDULUM_ENV: &str = "pendulum";

/// Episode length used when rolling out the behavior policy.
const BEHAVIOR_EPISODE_LEN: usize = 200;
/// Size of the behavior pool the offline subset is drawn from.
const BEHAVIOR_POOL: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    if x > -PI && x <= PI {
        return x;
    }
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y == -PI {
        PI
    } else {
        y
    }
}

/// One integration step. The reward is computed on the pre-step state.
pub fn env_step(state: PendulumState, torque: f64) -> (PendulumState, f64) {
    let a = torque.clamp(-MAX_TORQUE, MAX_TORQUE);
    let th = state.theta;
    let thdot = state.theta_dot;
    let cost = wrap_angle(th).powi(2) + 0.1 * thdot * thdot + 0.001 * a * a;
    let accel = 3.0 * GRAVITY / (2.0 * LENGTH) * th.sin() + 3.0 / (MASS * LENGTH * LENGTH) * a;
    let new_thdot = (thdot + accel * DT).clamp(-MAX_SPEED, MAX_SPEED);
    let new_th = wrap_angle(th + new_thdot * DT);
    (
        PendulumState {
            theta: new_th,
            theta_dot: new_thdot,
        },
        -cost,
    )
}

/// Uniform reset: `theta ~ U(-pi, pi)`, `theta_dot ~ U(-1, 1)`.
pub fn random_reset(rng: &mut dyn RngCore) -> PendulumState {
    PendulumState {
        theta: rng.random_range(-PI..PI),
        theta_dot: rng.random_range(-1.0..1.0),
    }
}

/// Random-feature observation lift `y = (base, sin(P base + phi))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lift {
    dim: usize,
    proj: Vec<[f64; 3]>,
    phase: Vec<f64>,
}

impl Lift {
    /// `dim == 0` keeps the 3-dimensional base observation.
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim != 0 && dim < 3 {
            return Err(Error::BadLiftDim(dim));
        }
        let extra = dim.saturating_sub(3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let proj = (0..extra)
            .map(|_| {
                [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ]
            })
            .collect();
        let phase = (0..extra)
            .map(|_| rng.random_range(0.0..2.0 * PI))
            .collect();
        Ok(Self { dim, proj, phase })
    }

    pub fn obs_dim(&self) -> usize {
        if self.dim == 0 {
            3
        } else {
            self.dim
        }
    }

    pub fn observe(&self, state: &PendulumState) -> Vec<f64> {
        let base = [
            state.theta.cos(),
            state.theta.sin(),
            state.theta_dot / MAX_SPEED,
        ];
        let mut out = Vec::with_capacity(self.obs_dim());
        out.extend_from_slice(&base);
        for (p, phi) in self.proj.iter().zip(&self.phase) {
            let z = p[0] * base[0] + p[1] * base[1] + p[2] * base[2] + phi;
            out.push(z.sin());
        }
        out
    }
}

/// Observation of `state` under the lift drawn from `seed`.
pub fn observe(state: &PendulumState, lift_dim: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(Lift::new(lift_dim, seed)?.observe(state))
}

/// Environment interface used for evaluation rollouts.
pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Actions live in `[-action_bound, action_bound]^action_dim`.
    fn action_bound(&self) -> f64;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    /// Returns `(next observation, reward, done)`.
    fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64, bool);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub lift_dim: usize,
    /// Seed of the observation lift; equal to the dataset seed.
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Pendulum {
    lift: Lift,
    state: PendulumState,
}

impl Pendulum {
    pub fn new(cfg: &EnvConfig) -> Result<Self> {
        Ok(Self {
            lift: Lift::new(cfg.lift_dim, cfg.seed)?,
            state: PendulumState {
                theta: PI,
                theta_dot: 0.0,
            },
        })
    }

    pub fn state(&self) -> PendulumState {
        self.state
    }

    pub fn lift(&self) -> &Lift {
        &self.lift
    }
}

impl Environment for Pendulum {
    fn obs_dim(&self) -> usize {
        self.lift.obs_dim()
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bound(&self) -> f64 {
        MAX_TORQUE
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.state = random_reset(rng);
        self.lift.observe(&self.state)
    }

    fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64, bool) {
        let (next, r) = env_step(self.state, action[0]);
        self.state = next;
        (self.lift.observe(&next), r, false)
    }
}

/// Behavior policy used to collect offline data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Behavior {
    Random,
    /// Energy-shaping swing-up with a PD catch near the top; with probability
    /// `epsilon` a uniform random torque is used instead.
    NoisyEnergy {
        epsilon: f64,
    },
}

impl Behavior {
    pub fn name(&self) -> &'static str {
        match self {
            Behavior::Random => "random",
            Behavior::NoisyEnergy { .. } => "noisy_energy",
        }
    }

    fn act(&self, state: &PendulumState, rng: &mut dyn RngCore) -> f64 {
        match *self {
            Behavior::Random => rng.random_range(-MAX_TORQUE..MAX_TORQUE),
            Behavior::NoisyEnergy { epsilon } => {
                if rng.random::<f64>() < epsilon {
                    rng.random_range(-MAX_TORQUE..MAX_TORQUE)
                } else {
                    energy_shaping_torque(state)
                }
            }
        }
    }
}

/// Swing-up controller: pumps the energy `0.5 thdot^2 + 15 cos(theta)` toward
/// its upright value and switches to PD control close to the top.
pub fn energy_shaping_torque(state: &PendulumState) -> f64 {
    let th = wrap_angle(state.theta);
    let thdot = state.theta_dot;
    let upright = 3.0 * GRAVITY / (2.0 * LENGTH);
    let u = if th.abs() < 0.4 && thdot.abs() < 2.0 {
        -(10.0 * th + 2.0 * thdot)
    } else {
        let energy = 0.5 * thdot * thdot + upright * th.cos();
        let pump = (upright - energy) * thdot;
        if pump == 0.0 {
            MAX_TORQUE
        } else {
            0.5 * pump
        }
    };
    u.clamp(-MAX_TORQUE, MAX_TORQUE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub obs_dim: usize,
    pub action_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lift_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<Behavior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_bound: Option<f64>,
    /// State representation: absent for raw states, otherwise `norm` or `qme`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repr: Option<String>,
}

impl DatasetMeta {
    /// Environment the dataset was collected on, when it is the built-in pendulum.
    pub fn env_config(&self) -> Option<EnvConfig> {
        if self.env != PENDULUM_ENV {
            return None;
        }
        Some(EnvConfig {
            lift_dim: self.lift_dim.unwrap_or(0),
            seed: self.seed.unwrap_or(0),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TransitionSet {
    pub meta: DatasetMeta,
    pub transitions: Vec<Transition>,
}

impl TransitionSet {
    pub fn new(meta: DatasetMeta, transitions: Vec<Transition>) -> Result<Self> {
        let set = Self { meta, transitions };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.r).collect()
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        self.transitions.iter().map(|t| t.s.clone()).collect()
    }

    /// Largest absolute action, from metadata when recorded.
    pub fn action_bound(&self) -> f64 {
        self.meta.action_bound.unwrap_or_else(|| {
            self.transitions
                .iter()
                .flat_map(|t| t.a.iter())
                .fold(1e-6f64, |m, a| m.max(a.abs()))
        })
    }

    /// Checks homogeneous dimensions and finite entries.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.transitions.first() else {
            return Ok(());
        };
        let (sd, ad) = (first.s.len(), first.a.len());
        for (i, t) in self.transitions.iter().enumerate() {
            if t.s.len() != sd || t.s_next.len() != sd || t.a.len() != ad {
                return Err(Error::DimMismatch(format!(
                    "transition {i}: dims s={} a={} s_next={}, expected s={sd} a={ad}",
                    t.s.len(),
                    t.a.len(),
                    t.s_next.len()
                )));
            }
            let finite =
                t.s.iter()
                    .chain(&t.a)
                    .chain(&t.s_next)
                    .all(|v| v.is_finite())
                    && t.r.is_finite();
            if !finite {
                return Err(Error::DimMismatch(format!(
                    "transition {i} has non-finite entries"
                )));
            }
        }
        if self.meta.obs_dim != 0 && self.meta.obs_dim != sd {
            return Err(Error::DimMismatch(format!(
                "metadata obs_dim {} but states have {sd} entries",
                self.meta.obs_dim
            )));
        }
        if self.meta.action_dim != 0 && self.meta.action_dim != ad {
            return Err(Error::DimMismatch(format!(
                "metadata action_dim {} but actions have {ad} entries",
                self.meta.action_dim
            )));
        }
        Ok(())
    }
}

/// Collects exactly `n` transitions: the behavior policy fills a pool of
/// 200-step episodes from random resets, and a seeded random subset of `n`
/// pool entries is kept in pool order.
pub fn generate_offline(
    env: &EnvConfig,
    behavior: Behavior,
    n: usize,
    seed: u64,
) -> Result<TransitionSet> {
    if n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    if let Behavior::NoisyEnergy { epsilon } = behavior {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidConfig(format!(
                "epsilon {epsilon} outside [0, 1]"
            )));
        }
    }
    let lift = Lift::new(env.lift_dim, env.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool_size = n.max(BEHAVIOR_POOL);
    let mut pool = Vec::with_capacity(pool_size);
    while pool.len() < pool_size {
        let mut state = random_reset(&mut rng);
        for _ in 0..BEHAVIOR_EPISODE_LEN {
            if pool.len() == pool_size {
                break;
            }
            let a = behavior.act(&state, &mut rng);
            let (next, r) = env_step(state, a);
            pool.push(Transition {
                s: lift.observe(&state),
                a: vec![a],
                r,
                s_next: lift.observe(&next),
                done: false,
            });
            state = next;
        }
    }
    let mut picks = index::sample(&mut rng, pool_size, n).into_vec();
    picks.sort_unstable();
    let transitions = picks.into_iter().map(|i| pool[i].clone()).collect();
    TransitionSet::new(
        DatasetMeta {
            env: PENDULUM_ENV.into(),
            obs_dim: lift.obs_dim(),
            action_dim: 1,
            seed: Some(env.seed),
            lift_dim: Some(env.lift_dim),
            behavior: Some(behavior),
            action_bound: Some(MAX_TORQUE),
            repr: None,
        },
        transitions,
    )
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: DatasetMeta,
}

/// Writes the metadata header and one JSON object per transition.
pub fn save_jsonl<W: Write>(set: &TransitionSet, mut out: W) -> Result<()> {
    serde_json::to_writer(
        &mut out,
        &MetaLine {
            meta: set.meta.clone(),
        },
    )?;
    out.write_all(b"\n")?;
    for t in &set.transitions {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_jsonl<R: BufRead>(input: R) -> Result<TransitionSet> {
    let mut meta = None;
    let mut transitions = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if value.get("meta").is_some() {
            if meta.is_some() || !transitions.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "metadata header must be the first line".into(),
                });
            }
            let m: MetaLine = serde_json::from_value(value).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            meta = Some(m.meta);
            continue;
        }
        let t: Transition = serde_json::from_value(value).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if let Some(first) = transitions.first() {
            let first: &Transition = first;
            if t.s.len() != first.s.len()
                || t.a.len() != first.a.len()
                || t.s_next.len() != t.s.len()
            {
                return Err(Error::DimMismatch(format!(
                    "line {lineno}: dims differ from the first transition"
                )));
            }
        }
        transitions.push(t);
    }
    let meta = meta.unwrap_or_else(|| DatasetMeta {
        env: "unknown".into(),
        obs_dim: transitions.first().map_or(0, |t| t.s.len()),
        action_dim: transitions.first().map_or(0, |t| t.a.len()),
        ..DatasetMeta::default()
    });
    TransitionSet::new(meta, transitions)
}

pub fn save_jsonl_file(set: &TransitionSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    save_jsonl(set, std::io::BufWriter::new(file))
}

pub fn load_jsonl_file(path: &Path) -> Result<TransitionSet> {
    let file = std::fs::File::open(path)?;
    load_jsonl(std::io::BufReader::new(file))
}
