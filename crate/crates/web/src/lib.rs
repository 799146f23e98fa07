//! WebAssembly bindings for the browser demo in `www/`.

use wasm_bindgen::prelude::*;

use qme_core::ansatz::{reward_rotation, LayeredAnsatz};
use qme_core::geom::delta_for_states;
use qme_core::statevector::StateVector;

#[wasm_bindgen]
pub fn ansatz_parameter_count(n_qubits: usize, reps: usize) -> usize {
    LayeredAnsatz::new(n_qubits, reps, 0).parameter_count()
}

/// Runs a layered RY/CX ansatz on an amplitude-encoded input and returns the
/// final amplitudes followed by `P1` of every qubit.
#[wasm_bindgen]
pub fn circuit_explorer(
    n_qubits: usize,
    reps: usize,
    theta: Vec<f64>,
    input: Vec<f64>,
) -> Result<Vec<f64>, String> {
    let gates = LayeredAnsatz::new(n_qubits, reps, 0)
        .gates(&theta)
        .map_err(|e| e.to_string())?;
    let state = StateVector::amplitude_encode(&input, n_qubits)
        .and_then(|s| s.run(&gates))
        .map_err(|e| e.to_string())?;
    let mut out = state.amplitudes().to_vec();
    for q in 0..n_qubits {
        out.push(state.prob_one(q).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

/// Delta-hyperbolicity report, as JSON, of `points` given row-major with `dim` columns.
#[wasm_bindgen]
pub fn hyperbolicity(points: Vec<f64>, dim: usize) -> Result<String, String> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(format!(
            "{} values do not split into rows of {dim}",
            points.len()
        ));
    }
    let rows: Vec<Vec<f64>> = points.chunks(dim).map(<[f64]>::to_vec).collect();
    let report = delta_for_states(&rows).map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

/// Reward-term curve for a target qubit holding `(sqrt(1 - g^2), g)`: pairs of
/// candidate reward and `P1` after the reward rotation for that candidate.
#[wasm_bindgen]
pub fn reward_coding(g: f64, points: usize) -> Result<Vec<f64>, String> {
    if !(0.0..=1.0).contains(&g) {
        return Err(format!("reward {g} outside [0, 1]"));
    }
    let state = StateVector::from_amplitudes(1, vec![(1.0 - g * g).sqrt(), g])
        .map_err(|e| e.to_string())?;
    let steps = points.max(2);
    let mut out = Vec::with_capacity(2 * steps);
    for k in 0..steps {
        let candidate = k as f64 / (steps - 1) as f64;
        let p1 = state
            .apply(&reward_rotation(candidate))
            .and_then(|s| s.prob_one(0))
            .map_err(|e| e.to_string())?;
        out.push(candidate);
        out.push(p1);
    }
    Ok(out)
}
