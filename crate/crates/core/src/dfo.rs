//! Derivative-free minimization with linear interpolation models on a simplex
//! (the unconstrained specialization of COBYLA).
//!
//! The optimizer keeps `dim + 1` interpolation points. The best point is the
//! pole; the linear interpolant through the simplex gives a model gradient, and
//! the trust-region step is the steepest-descent step of length `rho` from the
//! pole. Geometry steps keep the simplex well conditioned, and `rho` is halved
//! whenever a trust step fails on an acceptable simplex.
//!
//! Trust steps have length `delta` in `[rho, rho_begin]`. `delta` grows after a
//! step that achieves at least half its predicted decrease and falls back toward
//! `rho` after a poor one, so long valleys can be followed at a small `rho`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Simplex vertices closer than `ALPHA * rho` to their opposite face are replaced.
const ALPHA: f64 = 0.25;
/// Simplex vertices farther than `BETA * rho` from the pole are replaced.
const BETA: f64 = 2.1;
/// Volume factor below which a vertex is re-anchored on a coordinate axis.
const DEGENERATE_VOLUME: f64 = 1e-8;
/// Growth factor of `delta` after a step that achieves at least half its predicted decrease.
const EXPANSION: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfoConfig {
    pub rho_begin: f64,
    pub rho_end: f64,
    pub max_evals: usize,
    /// Recorded with results; the search itself is deterministic.
    pub seed: u64,
}

impl Default for DfoConfig {
    fn default() -> Self {
        Self {
            rho_begin: 1.0,
            rho_end: 1e-4,
            max_evals: 2000,
            seed: 0,
        }
    }
}

impl DfoConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.rho_end > 0.0 && self.rho_end < self.rho_begin && self.rho_begin.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < rho_end < rho_begin, got {} and {}",
                self.rho_end, self.rho_begin
            )));
        }
        if self.max_evals < dim + 2 {
            return Err(Error::InvalidConfig(format!(
                "max_evals {} below dim + 2 = {}",
                self.max_evals,
                dim + 2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DfoResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    /// Objective value of every evaluation, in order.
    pub history: Vec<f64>,
    pub final_rho: f64,
}

struct Budget<F> {
    f: F,
    max_evals: usize,
    history: Vec<f64>,
    best_x: Vec<f64>,
    best_f: f64,
}

impl<F: FnMut(&[f64]) -> f64> Budget<F> {
    fn exhausted(&self) -> bool {
        self.history.len() >= self.max_evals
    }

    fn eval(&mut self, x: &[f64]) -> Result<f64> {
        let v = (self.f)(x);
        self.history.push(v);
        if !v.is_finite() {
            return Err(Error::NonFiniteObjective {
                eval: self.history.len(),
            });
        }
        if v < self.best_f {
            self.best_f = v;
            self.best_x.clear();
            self.best_x.extend_from_slice(x);
        }
        Ok(v)
    }
}

/// Minimizes `f` from `x0`.
///
/// The returned value is the best point over all evaluations, so `f <= f(x0)`.
pub fn minimize<F>(f: F, x0: &[f64], cfg: &DfoConfig) -> Result<DfoResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return Err(Error::InvalidConfig(
            "cannot minimize over zero dimensions".into(),
        ));
    }
    cfg.validate(n)?;
    let mut budget = Budget {
        f,
        max_evals: cfg.max_evals,
        history: Vec::with_capacity(cfg.max_evals),
        best_x: x0.to_vec(),
        best_f: f64::INFINITY,
    };
    let mut rho = cfg.rho_begin;
    let mut delta = rho;

    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut vals: Vec<f64> = Vec::with_capacity(n + 1);
    pts.push(x0.to_vec());
    vals.push(budget.eval(x0)?);
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += rho;
        vals.push(budget.eval(&x)?);
        pts.push(x);
    }

    // After a poor trust step the next iteration must either repair geometry
    // or shrink rho.
    let mut last_step_poor = false;

    while !budget.exhausted() {
        move_best_to_front(&mut pts, &mut vals);
        let pole = pts[0].clone();
        let f0 = vals[0];
        let edges: Vec<Vec<f64>> = pts[1..]
            .iter()
            .map(|p| p.iter().zip(&pole).map(|(a, b)| a - b).collect())
            .collect();

        let inverse = match invert(&edges) {
            Some(inv) => inv,
            None => {
                // Singular simplex: rebuild it on the coordinate axes around the pole.
                for i in 0..n {
                    if budget.exhausted() {
                        break;
                    }
                    let mut x = pole.clone();
                    x[i] += rho;
                    vals[i + 1] = budget.eval(&x)?;
                    pts[i + 1] = x;
                }
                last_step_poor = false;
                continue;
            }
        };

        // Column j of the inverse is normal to the face opposite vertex j.
        let col_norm: Vec<f64> = (0..n)
            .map(|j| (0..n).map(|i| inverse[i][j].powi(2)).sum::<f64>().sqrt())
            .collect();
        let dist: Vec<f64> = edges.iter().map(|e| norm(e)).collect();
        let sigma: Vec<f64> = col_norm.iter().map(|c| 1.0 / c).collect();

        // Model gradient solves edges * g = df.
        let df: Vec<f64> = vals[1..].iter().map(|v| v - f0).collect();
        let grad: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| inverse[i][j] * df[j]).sum())
            .collect();

        // Volume factor of vertex j: simplex volume over the volume it would have
        // with edge j orthogonal to the opposite face.
        let factor: Vec<f64> = (0..n).map(|j| volume_factor(sigma[j], dist[j])).collect();
        let j = argmin_by(n, |j| factor[j]);
        if factor[j] < DEGENERATE_VOLUME {
            // The coordinate axis closest to the face normal restores the most volume.
            let k = argmax_by(n, |i| inverse[i][j].abs());
            let mut x = pole.clone();
            x[k] += rho;
            vals[j + 1] = budget.eval(&x)?;
            pts[j + 1] = x;
            last_step_poor = false;
            continue;
        }

        let too_far = argmax_by(n, |j| dist[j]);
        let flat = argmin_by(n, |j| sigma[j]);
        let bad_vertex = if dist[too_far] > BETA * rho {
            Some(too_far)
        } else if sigma[flat] < ALPHA * rho {
            Some(flat)
        } else {
            None
        };

        if last_step_poor {
            if let Some(j) = bad_vertex {
                geometry_step(
                    &mut budget,
                    &mut pts,
                    &mut vals,
                    &pole,
                    &inverse,
                    &col_norm,
                    &grad,
                    j,
                    rho,
                )?;
                last_step_poor = false;
                continue;
            }
            if rho <= cfg.rho_end {
                break;
            }
            rho = shrink(rho, cfg.rho_end);
            delta = (0.5 * delta).max(rho);
            last_step_poor = false;
            continue;
        }

        let gnorm = norm(&grad);
        if gnorm == 0.0 {
            last_step_poor = true;
            continue;
        }
        let step: Vec<f64> = grad.iter().map(|g| -delta * g / gnorm).collect();
        let trial: Vec<f64> = pole.iter().zip(&step).map(|(p, s)| p + s).collect();
        let ft = budget.eval(&trial)?;
        let predicted = delta * gnorm;
        let actual = f0 - ft;

        // Coefficients of the step in the edge basis; replacing vertex j scales
        // the simplex volume by |lambda_j|.
        let lambda: Vec<f64> = (0..n)
            .map(|j| (0..n).map(|i| inverse[i][j] * step[i]).sum())
            .collect();
        let weight = |p: &[f64]| {
            let d = p
                .iter()
                .zip(&trial)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                / rho;
            d.powi(2).max(1.0)
        };
        let mut best_j = None;
        let mut best_score = 0.0;
        for j in 0..n {
            let score = lambda[j].abs() * weight(&pts[j + 1]);
            if score > best_score {
                best_score = score;
                best_j = Some(j + 1);
            }
        }
        if actual > 0.0 {
            let score = (1.0 - lambda.iter().sum::<f64>()).abs() * weight(&pole);
            if score > best_score {
                best_score = score;
                best_j = Some(0);
            }
        }
        if let Some(j) = best_j {
            if actual > 0.0 || best_score > 1.0 {
                pts[j] = trial;
                vals[j] = ft;
            }
        }
        let ratio = actual / predicted;
        let at_rho = delta <= rho;
        if ratio >= 0.5 {
            delta = (EXPANSION * delta).min(cfg.rho_begin).max(rho);
        } else if ratio < 0.1 {
            delta *= 0.5;
            if delta <= 1.5 * rho {
                delta = rho;
            }
        }
        last_step_poor = at_rho && ratio < 0.1;
    }

    Ok(DfoResult {
        x: budget.best_x,
        f: budget.best_f,
        evals: budget.history.len(),
        history: budget.history,
        final_rho: rho,
    })
}

#[allow(clippy::too_many_arguments)]
fn geometry_step<F: FnMut(&[f64]) -> f64>(
    budget: &mut Budget<F>,
    pts: &mut [Vec<f64>],
    vals: &mut [f64],
    pole: &[f64],
    inverse: &[Vec<f64>],
    col_norm: &[f64],
    grad: &[f64],
    j: usize,
    rho: f64,
) -> Result<()> {
    let n = pole.len();
    let dir: Vec<f64> = (0..n).map(|i| inverse[i][j] / col_norm[j]).collect();
    let slope: f64 = dir.iter().zip(grad).map(|(d, g)| d * g).sum();
    let sign = if slope > 0.0 { -1.0 } else { 1.0 };
    let x: Vec<f64> = pole
        .iter()
        .zip(&dir)
        .map(|(p, d)| p + sign * rho * d)
        .collect();
    vals[j + 1] = budget.eval(&x)?;
    pts[j + 1] = x;
    Ok(())
}

fn shrink(rho: f64, rho_end: f64) -> f64 {
    let next = 0.5 * rho;
    if next <= 1.5 * rho_end {
        rho_end
    } else {
        next
    }
}

fn move_best_to_front(pts: &mut [Vec<f64>], vals: &mut [f64]) {
    let mut best = 0;
    for (i, v) in vals.iter().enumerate() {
        if *v < vals[best] {
            best = i;
        }
    }
    if best != 0 {
        pts.swap(0, best);
        vals.swap(0, best);
    }
}

/// Face distance over edge length: 1 when the edge is orthogonal to the
/// opposite face, 0 when the vertex lies in it.
fn volume_factor(sigma: f64, dist: f64) -> f64 {
    if dist > 0.0 {
        (sigma / dist).min(1.0)
    } else {
        0.0
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn argmin_by(n: usize, key: impl Fn(usize) -> f64) -> usize {
    (1..n).fold(0, |best, j| if key(j) < key(best) { j } else { best })
}

fn argmax_by(n: usize, key: impl Fn(usize) -> f64) -> usize {
    (1..n).fold(0, |best, j| if key(j) > key(best) { j } else { best })
}

/// Inverse of the matrix with the given rows, by Gauss-Jordan elimination with
/// partial pivoting. `None` when a pivot vanishes relative to the matrix scale.
fn invert(rows: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = rows.len();
    let scale = rows
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    let mut a: Vec<Vec<f64>> = rows.to_vec();
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        if a[piv][col].abs() <= 1e-14 * scale {
            return None;
        }
        a.swap(col, piv);
        inv.swap(col, piv);
        let p = a[col][col];
        for j in 0..n {
            a[col][j] /= p;
            inv[col][j] /= p;
        }
        for r in 0..n {
            if r != col {
                let factor = a[r][col];
                if factor != 0.0 {
                    for j in 0..n {
                        a[r][j] -= factor * a[col][j];
                        inv[r][j] -= factor * inv[col][j];
                    }
                }
            }
        }
    }
    Some(inv)
}
