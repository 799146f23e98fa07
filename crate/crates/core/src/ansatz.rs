//! Layered RY/CX circuits and the assembled encoder / disposer / decoder circuit.

use serde::{Deserialize, Serialize};

use crate::qme::QmeParams;
use crate::statevector::GateOp;
use crate::{Error, Result};

/// `reps` layers of (RY on every qubit, then a linear CX chain) on a contiguous
/// block of qubits starting at `qubit_offset`. There is no trailing rotation layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayeredAnsatz {
    pub n_qubits: usize,
    pub reps: usize,
    pub qubit_offset: usize,
}

impl LayeredAnsatz {
    pub fn new(n_qubits: usize, reps: usize, qubit_offset: usize) -> Self {
        Self {
            n_qubits,
            reps,
            qubit_offset,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.n_qubits * self.reps
    }

    pub fn gate_count(&self) -> usize {
        self.reps * (self.n_qubits + self.n_qubits.saturating_sub(1))
    }

    pub fn gates(&self, theta: &[f64]) -> Result<Vec<GateOp>> {
        let mut out = Vec::with_capacity(self.gate_count());
        self.append_gates(theta, &mut out)?;
        Ok(out)
    }

    pub fn append_gates(&self, theta: &[f64], out: &mut Vec<GateOp>) -> Result<()> {
        if theta.len() != self.parameter_count() {
            return Err(Error::ParamLengthMismatch {
                expected: self.parameter_count(),
                got: theta.len(),
            });
        }
        let off = self.qubit_offset;
        for layer in theta.chunks_exact(self.n_qubits.max(1)) {
            for (q, &angle) in layer.iter().enumerate() {
                out.push(GateOp::ry(off + q, angle));
            }
            for q in 0..self.n_qubits.saturating_sub(1) {
                out.push(GateOp::cx(off + q, off + q + 1));
            }
        }
        Ok(())
    }
}

/// Gate list for a layered ansatz on qubits `0..n_qubits`.
pub fn build_layered(n_qubits: usize, reps: usize, theta: &[f64]) -> Result<Vec<GateOp>> {
    LayeredAnsatz::new(n_qubits, reps, 0).gates(theta)
}

/// Register layout of the encoder circuit.
///
/// Latent qubits occupy the low indices `0..n_latent` and the trash register the
/// high indices `n_latent..n_qubits`. The reward is read from qubit 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QmeArchitecture {
    pub n_qubits: usize,
    pub n_trash: usize,
}

/// Global index of the reward readout qubit.
pub const TARGET_QUBIT: usize = 0;

impl QmeArchitecture {
    pub fn new(n_qubits: usize, n_trash: usize) -> Result<Self> {
        let arch = Self { n_qubits, n_trash };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trash == 0 {
            return Err(Error::InvalidArchitecture(
                "n_trash must be at least 1".into(),
            ));
        }
        if self.n_qubits <= self.n_trash {
            return Err(Error::InvalidArchitecture(format!(
                "{} qubits leave no latent qubit with {} trash qubits",
                self.n_qubits, self.n_trash
            )));
        }
        if self.n_qubits > 20 {
            return Err(Error::InvalidArchitecture(format!(
                "{} qubits is beyond the simulator budget",
                self.n_qubits
            )));
        }
        Ok(())
    }

    pub fn n_latent(&self) -> usize {
        self.n_qubits - self.n_trash
    }

    pub fn trash_qubits(&self) -> Vec<usize> {
        (self.n_latent()..self.n_qubits).collect()
    }

    pub fn encoder(&self) -> LayeredAnsatz {
        LayeredAnsatz::new(self.n_qubits, self.n_qubits, 0)
    }

    pub fn disposer(&self) -> LayeredAnsatz {
        LayeredAnsatz::new(self.n_trash, self.n_trash, self.n_latent())
    }

    pub fn decoder(&self) -> LayeredAnsatz {
        LayeredAnsatz::new(self.n_latent(), self.n_latent(), 0)
    }

    /// `n_qubits^2 + n_latent^2 + n_trash^2`.
    pub fn parameter_count(&self) -> usize {
        self.encoder().parameter_count()
            + self.disposer().parameter_count()
            + self.decoder().parameter_count()
    }
}

/// Which prefix of the circuit to build.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stage {
    /// Encoder then trash disposer.
    EncodeDispose,
    /// Encoder, disposer, decoder.
    FullDecode,
    /// Full decode followed by the reward rotation `RY(-2 asin(g))` on the target.
    Train(f64),
}

pub fn build_qme_circuit(
    arch: &QmeArchitecture,
    params: &QmeParams,
    stage: Stage,
) -> Result<Vec<GateOp>> {
    arch.validate()?;
    let mut gates = Vec::new();
    arch.encoder().append_gates(&params.theta_e, &mut gates)?;
    arch.disposer().append_gates(&params.theta_t, &mut gates)?;
    match stage {
        Stage::EncodeDispose => {}
        Stage::FullDecode => {
            arch.decoder().append_gates(&params.theta_d, &mut gates)?;
        }
        Stage::Train(g) => {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::RewardOutOfRange(g));
            }
            arch.decoder().append_gates(&params.theta_d, &mut gates)?;
            gates.push(reward_rotation(g));
        }
    }
    Ok(gates)
}

/// `RY(-2 asin(g))` on the target qubit.
pub fn reward_rotation(g: f64) -> GateOp {
    GateOp::ry(TARGET_QUBIT, -2.0 * g.asin())
}
