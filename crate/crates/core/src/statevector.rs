//! Exact real-amplitude statevector simulation.
//!
//! Only `RY` and `CX` gates are supported. Both map real amplitudes to real
//! amplitudes, so states are stored as `f64` vectors of length `2^n`.

use crate::{Error, Result};

/// Tolerance on `|<psi|psi> - 1|` accepted when a state is built from raw amplitudes.
pub const NORM_TOLERANCE: f64 = 1e-10;

/// Squared norm below which a projection is considered to have annihilated the state.
pub const PROJECTION_FLOOR: f64 = 1e-12;

/// A single gate acting on a register.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateOp {
    /// Rotation about Y: `[[cos(a/2), -sin(a/2)], [sin(a/2), cos(a/2)]]`.
    Ry { target: usize, angle: f64 },
    /// Controlled NOT.
    Cx { control: usize, target: usize },
}

impl GateOp {
    pub fn ry(target: usize, angle: f64) -> Self {
        GateOp::Ry { target, angle }
    }

    pub fn cx(control: usize, target: usize) -> Self {
        GateOp::Cx { control, target }
    }

    /// Checks the gate against a register width.
    pub fn validate(&self, n_qubits: usize) -> Result<()> {
        match *self {
            GateOp::Ry { target, angle } => {
                check_index(target, n_qubits)?;
                if !angle.is_finite() {
                    return Err(Error::InvalidGate(format!("non-finite RY angle {angle}")));
                }
            }
            GateOp::Cx { control, target } => {
                check_index(control, n_qubits)?;
                check_index(target, n_qubits)?;
                if control == target {
                    return Err(Error::InvalidGate(format!(
                        "CX control and target are both qubit {target}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_index(index: usize, n_qubits: usize) -> Result<()> {
    if index >= n_qubits {
        Err(Error::IndexOutOfRange { index, n_qubits })
    } else {
        Ok(())
    }
}

/// Normalized real amplitudes over `n_qubits` qubits.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amplitudes: Vec<f64>,
}

impl StateVector {
    /// The all-zeros basis state `|0...0>`.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        Self::basis(n_qubits, 0)
    }

    /// Computational basis state `|index>`.
    pub fn basis(n_qubits: usize, index: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > 30 {
            return Err(Error::InvalidState(format!(
                "register width {n_qubits} outside 1..=30"
            )));
        }
        let dim = 1usize << n_qubits;
        if index >= dim {
            return Err(Error::InvalidState(format!(
                "basis index {index} outside dimension {dim}"
            )));
        }
        let mut amplitudes = vec![0.0; dim];
        amplitudes[index] = 1.0;
        Ok(Self {
            n_qubits,
            amplitudes,
        })
    }

    /// Wraps amplitudes that must already be normalized.
    pub fn from_amplitudes(n_qubits: usize, amplitudes: Vec<f64>) -> Result<Self> {
        if n_qubits == 0 || n_qubits > 30 {
            return Err(Error::InvalidState(format!(
                "register width {n_qubits} outside 1..=30"
            )));
        }
        if amplitudes.len() != 1usize << n_qubits {
            return Err(Error::InvalidState(format!(
                "{} amplitudes for {n_qubits} qubits",
                amplitudes.len()
            )));
        }
        let norm_sq: f64 = amplitudes.iter().map(|a| a * a).sum();
        if !norm_sq.is_finite() || (norm_sq - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidState(format!("squared norm {norm_sq}")));
        }
        Ok(Self {
            n_qubits,
            amplitudes,
        })
    }

    /// Loads `x`, zero-padded to `2^n_qubits`, as the normalized amplitudes of a state.
    pub fn amplitude_encode(x: &[f64], n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > 30 {
            return Err(Error::InvalidState(format!(
                "register width {n_qubits} outside 1..=30"
            )));
        }
        let dim = 1usize << n_qubits;
        if x.len() > dim {
            return Err(Error::DimensionTooLarge {
                len: x.len(),
                n_qubits,
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("non-finite input entry".into()));
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector);
        }
        let mut amplitudes = vec![0.0; dim];
        for (a, v) in amplitudes.iter_mut().zip(x) {
            *a = v / norm;
        }
        Ok(Self {
            n_qubits,
            amplitudes,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<f64> {
        self.amplitudes
    }

    pub fn norm_sq(&self) -> f64 {
        self.amplitudes.iter().map(|a| a * a).sum()
    }

    /// Returns the state after `gate`.
    pub fn apply(&self, gate: &GateOp) -> Result<Self> {
        let mut out = self.clone();
        out.apply_in_place(gate)?;
        Ok(out)
    }

    /// Returns the state after applying `gates` in order.
    pub fn run(&self, gates: &[GateOp]) -> Result<Self> {
        let mut out = self.clone();
        out.run_in_place(gates)?;
        Ok(out)
    }

    pub fn run_in_place(&mut self, gates: &[GateOp]) -> Result<()> {
        for gate in gates {
            self.apply_in_place(gate)?;
        }
        Ok(())
    }

    pub fn apply_in_place(&mut self, gate: &GateOp) -> Result<()> {
        gate.validate(self.n_qubits)?;
        match *gate {
            GateOp::Ry { target, angle } => self.ry_unchecked(target, angle),
            GateOp::Cx { control, target } => self.cx_unchecked(control, target),
        }
        Ok(())
    }

    fn ry_unchecked(&mut self, target: usize, angle: f64) {
        let (s, c) = (0.5 * angle).sin_cos();
        let stride = 1usize << target;
        let amps = &mut self.amplitudes;
        // Blocks of 2*stride: first half has the target bit clear, second half set.
        for block in amps.chunks_exact_mut(stride << 1) {
            let (zeros, ones) = block.split_at_mut(stride);
            for (a0, a1) in zeros.iter_mut().zip(ones.iter_mut()) {
                let (x0, x1) = (*a0, *a1);
                *a0 = c * x0 - s * x1;
                *a1 = s * x0 + c * x1;
            }
        }
    }

    fn cx_unchecked(&mut self, control: usize, target: usize) {
        let cmask = 1usize << control;
        let tmask = 1usize << target;
        for i in 0..self.amplitudes.len() {
            if i & cmask != 0 && i & tmask == 0 {
                self.amplitudes.swap(i, i | tmask);
            }
        }
    }

    /// Probability of measuring `|1>` on `qubit`; `<Z_q> = 1 - 2 * prob_one`.
    pub fn prob_one(&self, qubit: usize) -> Result<f64> {
        check_index(qubit, self.n_qubits)?;
        let mask = 1usize << qubit;
        Ok(self
            .amplitudes
            .iter()
            .enumerate()
            .filter(|(i, _)| i & mask != 0)
            .map(|(_, a)| a * a)
            .sum())
    }

    pub fn prob_zero(&self, qubit: usize) -> Result<f64> {
        check_index(qubit, self.n_qubits)?;
        let mask = 1usize << qubit;
        Ok(self
            .amplitudes
            .iter()
            .enumerate()
            .filter(|(i, _)| i & mask == 0)
            .map(|(_, a)| a * a)
            .sum())
    }

    /// Projects `qubits` onto `|0...0>` and renormalizes the remaining register.
    ///
    /// The surviving qubits keep their relative order and are packed into the
    /// low bits of the new basis index.
    pub fn project_zeros(&self, qubits: &[usize]) -> Result<Self> {
        let mut mask = 0usize;
        for &q in qubits {
            check_index(q, self.n_qubits)?;
            if mask & (1 << q) != 0 {
                return Err(Error::InvalidState(format!(
                    "qubit {q} listed twice for projection"
                )));
            }
            mask |= 1 << q;
        }
        let kept: Vec<usize> = (0..self.n_qubits)
            .filter(|q| mask & (1 << q) == 0)
            .collect();
        if kept.is_empty() {
            return Err(Error::InvalidState(
                "projection must leave at least one qubit".into(),
            ));
        }
        let mut out = vec![0.0; 1 << kept.len()];
        for (j, slot) in out.iter_mut().enumerate() {
            let i = kept
                .iter()
                .enumerate()
                .fold(0usize, |acc, (bit, &q)| acc | (((j >> bit) & 1) << q));
            *slot = self.amplitudes[i];
        }
        let norm_sq: f64 = out.iter().map(|a| a * a).sum();
        if norm_sq < PROJECTION_FLOOR {
            return Err(Error::DegenerateProjection { norm_sq });
        }
        let norm = norm_sq.sqrt();
        out.iter_mut().for_each(|a| *a /= norm);
        Ok(Self {
            n_qubits: kept.len(),
            amplitudes: out,
        })
    }
}

/// Number of qubits needed to hold a vector of length `len`.
pub fn qubits_for_dim(len: usize) -> usize {
    let mut n = 1;
    while (1usize << n) < len {
        n += 1;
    }
    n
}
