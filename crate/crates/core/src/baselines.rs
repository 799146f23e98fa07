//! Comparison methodologies: raw data, per-sample normalization, reward
//! relabeling by a classical or a quantum regressor, and the random policy.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ansatz::{build_layered, LayeredAnsatz};
use crate::dfo::{self, DfoConfig};
use crate::envdata::{Environment, Transition, TransitionSet};
use crate::neural::{Adam, Mlp};
use crate::qme::{QmeModel, RewardScale};
use crate::rl::{episode_rng, l2_normalize, Identity, L2Normalize, StateEncoder};
use crate::statevector::{qubits_for_dim, GateOp, StateVector};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Methodology {
    /// Uniform random policy, no training.
    Rd,
    /// Raw dataset.
    Rl,
    /// Per-sample L2-normalized states.
    Norm,
    /// Rewards relabeled by a classical regressor.
    Cnn,
    /// Rewards relabeled by a quantum regressor.
    Qnn,
    /// QME-embedded states and decoded rewards.
    Qme,
}

impl Methodology {
    pub const ALL: [Methodology; 6] = [
        Methodology::Rd,
        Methodology::Rl,
        Methodology::Norm,
        Methodology::Cnn,
        Methodology::Qnn,
        Methodology::Qme,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Methodology::Rd => "RD",
            Methodology::Rl => "RL",
            Methodology::Norm => "NORM",
            Methodology::Cnn => "CNN",
            Methodology::Qnn => "QNN",
            Methodology::Qme => "QME",
        }
    }
}

impl fmt::Display for Methodology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Methodology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Methodology::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown methodology {s:?}")))
    }
}

/// Normalizes `s` and `s_next` of every transition. Returns the new set and
/// the number of zero vectors left unchanged.
pub fn l2_normalize_dataset(set: &TransitionSet) -> (TransitionSet, usize) {
    let mut zeros = 0;
    let mut norm = |x: &[f64]| {
        let (y, zero) = l2_normalize(x);
        zeros += zero as usize;
        y
    };
    let transitions = set
        .transitions
        .iter()
        .map(|t| Transition {
            s: norm(&t.s),
            a: t.a.clone(),
            r: t.r,
            s_next: norm(&t.s_next),
            done: t.done,
        })
        .collect();
    let mut meta = set.meta.clone();
    meta.repr = Some("norm".into());
    (TransitionSet { meta, transitions }, zeros)
}

/// State-to-reward predictor used for relabeling.
pub trait RewardPredictor {
    fn predict(&self, s: &[f64]) -> Result<f64>;
}

impl<F: Fn(&[f64]) -> Result<f64>> RewardPredictor for F {
    fn predict(&self, s: &[f64]) -> Result<f64> {
        self(s)
    }
}

impl RewardPredictor for QmeModel {
    fn predict(&self, s: &[f64]) -> Result<f64> {
        self.decode_reward(s)
    }
}

/// Replaces every reward by the prediction for its state.
pub fn relabel_rewards(
    set: &TransitionSet,
    predictor: &dyn RewardPredictor,
) -> Result<TransitionSet> {
    let transitions = set
        .transitions
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let r = predictor
                .predict(&t.s)
                .map_err(|e| Error::at_sample(i, e))?;
            if !r.is_finite() {
                return Err(Error::at_sample(
                    i,
                    Error::NonFiniteLoss(format!("prediction {r}")),
                ));
            }
            Ok(Transition { r, ..t.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransitionSet {
        meta: set.meta.clone(),
        transitions,
    })
}

pub const CNN_HIDDEN: [usize; 3] = [64, 8, 64];
pub const CNN_STEPS: usize = 2000;
pub const CNN_LR: f64 = 1e-3;

/// Bottleneck MLP regressor trained on standardized rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicalRegressor {
    pub net: Mlp,
    pub r_mean: f64,
    pub r_std: f64,
}

impl RewardPredictor for ClassicalRegressor {
    fn predict(&self, s: &[f64]) -> Result<f64> {
        Ok(self.r_mean + self.r_std * self.net.forward(s)?[0])
    }
}

/// Full-batch Adam on the mean squared error, `CNN_STEPS` steps.
pub fn train_reward_regressor_classical(
    set: &TransitionSet,
    seed: u64,
) -> Result<ClassicalRegressor> {
    if set.len() < 2 {
        return Err(Error::InvalidConfig(
            "regressor needs at least 2 samples".into(),
        ));
    }
    let rewards = set.rewards();
    let n = rewards.len() as f64;
    let r_mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - r_mean).powi(2)).sum::<f64>() / n;
    let r_std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let targets: Vec<f64> = rewards.iter().map(|r| (r - r_mean) / r_std).collect();

    let mut sizes = vec![set.meta.obs_dim];
    sizes.extend_from_slice(&CNN_HIDDEN);
    sizes.push(1);
    let mut net = Mlp::seeded(&sizes, seed)?;
    let mut adam = Adam::for_net(&net, CNN_LR);
    let states = set.states();
    for _ in 0..CNN_STEPS {
        let (_, g) = net.grad(&states, |i, out| {
            let e = out[0] - targets[i];
            (e * e, vec![2.0 * e])
        })?;
        adam.step(&mut net, &g)?;
    }
    Ok(ClassicalRegressor { net, r_mean, r_std })
}

/// Layered ansatz over the amplitude-encoded state; the reward is read from
/// `P1` of qubit 0 as `r_min + P1 * (r_max - r_min)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantumRegressor {
    pub n_qubits: usize,
    pub theta: Vec<f64>,
    pub scale: RewardScale,
}

impl QuantumRegressor {
    pub fn ansatz(n_qubits: usize) -> LayeredAnsatz {
        LayeredAnsatz::new(n_qubits, n_qubits, 0)
    }
}

impl RewardPredictor for QuantumRegressor {
    fn predict(&self, s: &[f64]) -> Result<f64> {
        let gates = build_layered(self.n_qubits, self.n_qubits, &self.theta)?;
        qnn_predict(&gates, self.n_qubits, &self.scale, s)
    }
}

fn qnn_predict(gates: &[GateOp], n_qubits: usize, scale: &RewardScale, s: &[f64]) -> Result<f64> {
    let mut state = StateVector::amplitude_encode(s, n_qubits)?;
    state.run_in_place(gates)?;
    let p1 = state.prob_one(0)?.clamp(0.0, 1.0);
    Ok(scale.r_min + p1 * (scale.r_max - scale.r_min))
}

/// Mean squared reward error of the quantum regressor with angles `theta`.
pub fn qnn_mse(
    n_qubits: usize,
    theta: &[f64],
    set: &TransitionSet,
    scale: &RewardScale,
) -> Result<f64> {
    let gates = build_layered(n_qubits, n_qubits, theta)?;
    let mut total = 0.0;
    for (i, t) in set.transitions.iter().enumerate() {
        let r = qnn_predict(&gates, n_qubits, scale, &t.s).map_err(|e| Error::at_sample(i, e))?;
        total += (r - t.r).powi(2);
    }
    Ok(total / set.len() as f64)
}

/// Fits the ansatz angles with the derivative-free optimizer from a seeded
/// uniform `[-pi, pi]` start. The register is the smallest one holding a state.
pub fn train_reward_regressor_quantum(
    set: &TransitionSet,
    seed: u64,
    dfo_cfg: &DfoConfig,
) -> Result<QuantumRegressor> {
    if set.len() < 2 {
        return Err(Error::InvalidConfig(
            "regressor needs at least 2 samples".into(),
        ));
    }
    let n_qubits = qubits_for_dim(set.meta.obs_dim);
    let scale = RewardScale::from_rewards(&set.rewards())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0: Vec<f64> = (0..QuantumRegressor::ansatz(n_qubits).parameter_count())
        .map(|_| rng.random_range(-std::f64::consts::PI..=std::f64::consts::PI))
        .collect();
    let mut failure = None;
    let objective = |theta: &[f64]| match qnn_mse(n_qubits, theta, set, &scale) {
        Ok(v) => v,
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    };
    let result = dfo::minimize(objective, &x0, dfo_cfg);
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(QuantumRegressor {
        n_qubits,
        theta: result?.x,
        scale,
    })
}

/// Mean return of uniform random actions. Episode `e` draws its reset and
/// then every action from `episode_rng(seed, e)`.
pub fn random_policy_return(
    env: &mut dyn Environment,
    episodes: usize,
    max_steps: usize,
    seed: u64,
) -> f64 {
    if episodes == 0 {
        return 0.0;
    }
    let bound = env.action_bound();
    let dim = env.action_dim();
    let mut total = 0.0;
    for e in 0..episodes {
        let mut rng = episode_rng(seed, e);
        env.reset(&mut rng);
        for _ in 0..max_steps {
            let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-bound..=bound)).collect();
            let (_, r, done) = env.step(&a);
            total += r;
            if done {
                break;
            }
        }
    }
    total / episodes as f64
}

/// Observation mapping applied at evaluation time for a methodology.
#[derive(Clone, Debug)]
pub enum EvalEncoder {
    Identity,
    L2,
    Qme(QmeModel),
}

impl StateEncoder for EvalEncoder {
    fn encode(&self, obs: &[f64]) -> Result<Vec<f64>> {
        match self {
            EvalEncoder::Identity => Identity.encode(obs),
            EvalEncoder::L2 => L2Normalize.encode(obs),
            EvalEncoder::Qme(m) => m.encode(obs),
        }
    }
}
