//! Reward-supervised encoder circuit: loss, training, state embedding, reward
//! decoding and dataset transformation.
//!
//! For a sample with amplitude-encoded state `x` and min-max normalized reward
//! `g`, the training circuit runs encoder, trash disposer, decoder and the
//! reward rotation `RY(-2 asin g)` on the target qubit. The per-sample loss is
//!
//! ```text
//! L_i = (1 - delta) * P1(target) + delta / n_trash * sum_s P1(trash_s)
//! ```
//!
//! where `P1` is the probability of measuring `|1>`. Correct decoding drives the
//! target back to `|0>`; compression drives the trash register to `|0...0>`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ansatz::{build_qme_circuit, reward_rotation, QmeArchitecture, Stage, TARGET_QUBIT};
use crate::dfo::{self, DfoConfig};
use crate::envdata::{Transition, TransitionSet};
use crate::statevector::{GateOp, StateVector};
use crate::{Error, Result};

/// Rotation angles of the three circuit blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QmeParams {
    pub theta_e: Vec<f64>,
    pub theta_t: Vec<f64>,
    pub theta_d: Vec<f64>,
}

impl QmeParams {
    pub fn zeros(arch: &QmeArchitecture) -> Self {
        Self {
            theta_e: vec![0.0; arch.encoder().parameter_count()],
            theta_t: vec![0.0; arch.disposer().parameter_count()],
            theta_d: vec![0.0; arch.decoder().parameter_count()],
        }
    }

    /// Independent uniform draws from `[-pi, pi]`.
    pub fn random(arch: &QmeArchitecture, rng: &mut impl Rng) -> Self {
        let flat: Vec<f64> = (0..arch.parameter_count())
            .map(|_| rng.random_range(-PI..=PI))
            .collect();
        Self::from_flat(arch, &flat).expect("length matches architecture")
    }

    /// Splits `[theta_e, theta_t, theta_d]`.
    pub fn from_flat(arch: &QmeArchitecture, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.parameter_count() {
            return Err(Error::ParamLengthMismatch {
                expected: arch.parameter_count(),
                got: flat.len(),
            });
        }
        let ne = arch.encoder().parameter_count();
        let nt = arch.disposer().parameter_count();
        Ok(Self {
            theta_e: flat[..ne].to_vec(),
            theta_t: flat[ne..ne + nt].to_vec(),
            theta_d: flat[ne + nt..].to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.theta_e.clone();
        v.extend_from_slice(&self.theta_t);
        v.extend_from_slice(&self.theta_d);
        v
    }

    pub fn validate(&self, arch: &QmeArchitecture) -> Result<()> {
        for (got, expected) in [
            (self.theta_e.len(), arch.encoder().parameter_count()),
            (self.theta_t.len(), arch.disposer().parameter_count()),
            (self.theta_d.len(), arch.decoder().parameter_count()),
        ] {
            if got != expected {
                return Err(Error::ParamLengthMismatch { expected, got });
            }
        }
        if self.to_flat().iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("non-finite rotation angle".into()));
        }
        Ok(())
    }
}

/// Min-max statistics of the training rewards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardScale {
    pub r_min: f64,
    pub r_max: f64,
}

impl RewardScale {
    pub fn from_rewards(rewards: &[f64]) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let r_min = rewards.iter().cloned().fold(f64::INFINITY, f64::min);
        let r_max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { r_min, r_max })
    }

    /// `(r - r_min) / (r_max - r_min)`, or 0 when the scale is degenerate.
    /// Values outside the training range are clamped to `[0, 1]`.
    pub fn normalize(&self, r: f64) -> f64 {
        let span = self.r_max - self.r_min;
        if span <= 0.0 {
            0.0
        } else {
            ((r - self.r_min) / span).clamp(0.0, 1.0)
        }
    }

    pub fn denormalize(&self, g: f64) -> f64 {
        self.r_min + g * (self.r_max - self.r_min)
    }
}

pub fn normalize_rewards(rewards: &[f64], scale: &RewardScale) -> Vec<f64> {
    rewards.iter().map(|&r| scale.normalize(r)).collect()
}

/// How the target-qubit readout is mapped back to a normalized reward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// `g = sqrt(P1)`: the `|1>` amplitude, which exactly inverts the reward rotation.
    #[default]
    Amplitude,
    /// `g = P1`.
    Probability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QmeConfig {
    pub arch: QmeArchitecture,
    pub delta: f64,
    #[serde(default)]
    pub decode_mode: DecodeMode,
    #[serde(default)]
    pub dfo: DfoConfig,
}

impl QmeConfig {
    pub fn new(arch: QmeArchitecture) -> Self {
        Self {
            arch,
            delta: 0.5,
            decode_mode: DecodeMode::Amplitude,
            dfo: DfoConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidConfig(format!(
                "delta {} outside [0, 1]",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Reward and compression terms of one sample's loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    /// `P1` of the target qubit after the reward rotation.
    pub reward: f64,
    /// Mean `P1` over the trash qubits.
    pub trash: f64,
}

impl LossTerms {
    pub fn combine(&self, delta: f64) -> f64 {
        (1.0 - delta) * self.reward + delta * self.trash
    }
}

/// Circuit without the sample-dependent reward rotation, reused across samples.
struct DecodeCircuit<'a> {
    arch: &'a QmeArchitecture,
    gates: Vec<GateOp>,
    trash: Vec<usize>,
}

impl<'a> DecodeCircuit<'a> {
    fn new(arch: &'a QmeArchitecture, params: &QmeParams) -> Result<Self> {
        params.validate(arch)?;
        Ok(Self {
            arch,
            gates: build_qme_circuit(arch, params, Stage::FullDecode)?,
            trash: arch.trash_qubits(),
        })
    }

    fn terms(&self, encoded: &StateVector, g: f64) -> Result<LossTerms> {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::RewardOutOfRange(g));
        }
        let mut state = encoded.clone();
        state.run_in_place(&self.gates)?;
        state.apply_in_place(&reward_rotation(g))?;
        let reward = state.prob_one(TARGET_QUBIT)?;
        let mut trash = 0.0;
        for &q in &self.trash {
            trash += state.prob_one(q)?;
        }
        Ok(LossTerms {
            reward,
            trash: trash / self.arch.n_trash as f64,
        })
    }
}

pub fn qme_loss_terms(params: &QmeParams, cfg: &QmeConfig, x: &[f64], g: f64) -> Result<LossTerms> {
    let circuit = DecodeCircuit::new(&cfg.arch, params)?;
    let encoded = StateVector::amplitude_encode(x, cfg.arch.n_qubits)?;
    circuit.terms(&encoded, g)
}

/// Loss of a single sample with normalized reward `g`.
pub fn qme_loss_single(params: &QmeParams, cfg: &QmeConfig, x: &[f64], g: f64) -> Result<f64> {
    Ok(qme_loss_terms(params, cfg, x, g)?.combine(cfg.delta))
}

/// Mean loss over a dataset, with rewards normalized by the dataset's own range.
pub fn qme_loss(params: &QmeParams, cfg: &QmeConfig, dataset: &TransitionSet) -> Result<f64> {
    let batch = EncodedBatch::new(cfg, dataset)?;
    batch.loss(params, cfg)
}

/// Amplitude-encoded training states and their normalized rewards.
struct EncodedBatch {
    states: Vec<StateVector>,
    targets: Vec<f64>,
    scale: RewardScale,
}

impl EncodedBatch {
    fn new(cfg: &QmeConfig, dataset: &TransitionSet) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        cfg.validate()?;
        let rewards = dataset.rewards();
        let scale = RewardScale::from_rewards(&rewards)?;
        let states = dataset
            .transitions
            .iter()
            .enumerate()
            .map(|(i, t)| {
                StateVector::amplitude_encode(&t.s, cfg.arch.n_qubits)
                    .map_err(|e| Error::at_sample(i, e))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            states,
            targets: normalize_rewards(&rewards, &scale),
            scale,
        })
    }

    fn mean_terms(&self, params: &QmeParams, cfg: &QmeConfig) -> Result<LossTerms> {
        let circuit = DecodeCircuit::new(&cfg.arch, params)?;
        let mut reward = 0.0;
        let mut trash = 0.0;
        // Index-ordered sum keeps the result bit-reproducible.
        for (state, &g) in self.states.iter().zip(&self.targets) {
            let t = circuit.terms(state, g)?;
            reward += t.reward;
            trash += t.trash;
        }
        let k = self.states.len() as f64;
        Ok(LossTerms {
            reward: reward / k,
            trash: trash / k,
        })
    }

    fn loss(&self, params: &QmeParams, cfg: &QmeConfig) -> Result<f64> {
        let circuit = DecodeCircuit::new(&cfg.arch, params)?;
        let mut total = 0.0;
        for (state, &g) in self.states.iter().zip(&self.targets) {
            total += circuit.terms(state, g)?.combine(cfg.delta);
        }
        Ok(total / self.states.len() as f64)
    }
}

/// A trained encoder together with the reward scale of its training set.
#[derive(Clone, Debug, PartialEq)]
pub struct QmeModel {
    pub config: QmeConfig,
    pub params: QmeParams,
    pub scale: RewardScale,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss of every optimizer evaluation, in order.
    pub trace: Vec<f64>,
}

/// Fits the circuit to `dataset` from a seeded uniform `[-pi, pi]` start.
pub fn train_qme(dataset: &TransitionSet, cfg: &QmeConfig, seed: u64) -> Result<QmeModel> {
    let batch = EncodedBatch::new(cfg, dataset)?;
    let arch = cfg.arch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = QmeParams::random(&arch, &mut rng);

    let mut failure = None;
    let objective = |flat: &[f64]| -> f64 {
        let params = QmeParams::from_flat(&arch, flat).expect("optimizer keeps dimension");
        match batch.loss(&params, cfg) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    };
    let result = dfo::minimize(objective, &init.to_flat(), &cfg.dfo);
    if let Some(e) = failure {
        return Err(e);
    }
    let result = result?;
    let params = QmeParams::from_flat(&arch, &result.x)?;
    Ok(QmeModel {
        config: cfg.clone(),
        params,
        scale: batch.scale,
        seed,
        initial_loss: result.history[0],
        final_loss: result.f,
        trace: result.history,
    })
}

/// Latent-register amplitudes after encoder and disposer, with the trash
/// register projected onto `|0...0>` and the result renormalized.
pub fn embed_state(params: &QmeParams, cfg: &QmeConfig, s: &[f64]) -> Result<Vec<f64>> {
    let gates = build_qme_circuit(&cfg.arch, params, Stage::EncodeDispose)?;
    embed_with(&gates, &cfg.arch, s)
}

fn embed_with(gates: &[GateOp], arch: &QmeArchitecture, s: &[f64]) -> Result<Vec<f64>> {
    let mut state = StateVector::amplitude_encode(s, arch.n_qubits)?;
    state.run_in_place(gates)?;
    Ok(state.project_zeros(&arch.trash_qubits())?.into_amplitudes())
}

/// Normalized reward estimate read from the target qubit before the reward rotation.
pub fn decode_normalized(params: &QmeParams, cfg: &QmeConfig, s: &[f64]) -> Result<f64> {
    let gates = build_qme_circuit(&cfg.arch, params, Stage::FullDecode)?;
    decode_with(&gates, cfg, s)
}

fn decode_with(gates: &[GateOp], cfg: &QmeConfig, s: &[f64]) -> Result<f64> {
    let mut state = StateVector::amplitude_encode(s, cfg.arch.n_qubits)?;
    state.run_in_place(gates)?;
    let p1 = state.prob_one(TARGET_QUBIT)?.clamp(0.0, 1.0);
    Ok(match cfg.decode_mode {
        DecodeMode::Amplitude => p1.sqrt(),
        DecodeMode::Probability => p1,
    })
}

/// Decoded reward in reward units, always within `[r_min, r_max]`.
pub fn decode_reward(
    params: &QmeParams,
    cfg: &QmeConfig,
    scale: &RewardScale,
    s: &[f64],
) -> Result<f64> {
    Ok(scale.denormalize(decode_normalized(params, cfg, s)?))
}

/// Replaces states by their embeddings and rewards by decoded rewards.
pub fn transform_dataset(
    params: &QmeParams,
    cfg: &QmeConfig,
    scale: &RewardScale,
    dataset: &TransitionSet,
) -> Result<TransitionSet> {
    let embed_gates = build_qme_circuit(&cfg.arch, params, Stage::EncodeDispose)?;
    let decode_gates = build_qme_circuit(&cfg.arch, params, Stage::FullDecode)?;
    let transitions = dataset
        .transitions
        .iter()
        .enumerate()
        .map(|(i, t)| -> Result<Transition> {
            let wrap = |e| Error::at_sample(i, e);
            Ok(Transition {
                s: embed_with(&embed_gates, &cfg.arch, &t.s).map_err(wrap)?,
                a: t.a.clone(),
                r: scale.denormalize(decode_with(&decode_gates, cfg, &t.s).map_err(wrap)?),
                s_next: embed_with(&embed_gates, &cfg.arch, &t.s_next).map_err(wrap)?,
                done: t.done,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = dataset.meta.clone();
    meta.obs_dim = 1 << cfg.arch.n_latent();
    meta.repr = Some("qme".into());
    TransitionSet::new(meta, transitions)
}

impl QmeModel {
    pub fn embed(&self, s: &[f64]) -> Result<Vec<f64>> {
        embed_state(&self.params, &self.config, s)
    }

    pub fn decode_reward(&self, s: &[f64]) -> Result<f64> {
        decode_reward(&self.params, &self.config, &self.scale, s)
    }

    pub fn transform(&self, dataset: &TransitionSet) -> Result<TransitionSet> {
        transform_dataset(&self.params, &self.config, &self.scale, dataset)
    }

    /// Mean reward and trash terms of the loss on `dataset`.
    pub fn loss_terms(&self, dataset: &TransitionSet) -> Result<LossTerms> {
        EncodedBatch::new(&self.config, dataset)?.mean_terms(&self.params, &self.config)
    }

    pub fn embedding_dim(&self) -> usize {
        1 << self.config.arch.n_latent()
    }

    pub fn to_checkpoint(&self) -> QmeCheckpoint {
        QmeCheckpoint {
            arch: self.config.arch,
            delta: self.config.delta,
            decode_mode: self.config.decode_mode,
            theta_e: self.params.theta_e.clone(),
            theta_t: self.params.theta_t.clone(),
            theta_d: self.params.theta_d.clone(),
            r_min: self.scale.r_min,
            r_max: self.scale.r_max,
            seed: self.seed,
            final_loss: self.final_loss,
        }
    }
}

/// JSON checkpoint of a trained encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QmeCheckpoint {
    pub arch: QmeArchitecture,
    pub delta: f64,
    pub decode_mode: DecodeMode,
    pub theta_e: Vec<f64>,
    pub theta_t: Vec<f64>,
    pub theta_d: Vec<f64>,
    pub r_min: f64,
    pub r_max: f64,
    pub seed: u64,
    pub final_loss: f64,
}

impl QmeCheckpoint {
    /// Rebuilds a model; the optimizer trace is not persisted.
    pub fn into_model(self) -> Result<QmeModel> {
        let mut config = QmeConfig::new(self.arch);
        config.delta = self.delta;
        config.decode_mode = self.decode_mode;
        config.validate()?;
        let params = QmeParams {
            theta_e: self.theta_e,
            theta_t: self.theta_t,
            theta_d: self.theta_d,
        };
        params.validate(&self.arch)?;
        Ok(QmeModel {
            config,
            params,
            scale: RewardScale {
                r_min: self.r_min,
                r_max: self.r_max,
            },
            seed: self.seed,
            initial_loss: f64::NAN,
            final_loss: self.final_loss,
            trace: Vec::new(),
        })
    }
}
