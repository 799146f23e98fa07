//! Exact Gromov delta-hyperbolicity of finite metric spaces.
//!
//! With the Gromov product `(x|y)_w = (d(x,w) + d(y,w) - d(x,y)) / 2`,
//!
//! ```text
//! delta = max_{w,x,y} [ max_z min((x|z)_w, (z|y)_w) - (x|y)_w ]
//! ```
//!
//! For each base point `w` the inner `max_z min` is a max-min matrix product of
//! the Gromov-product matrix with itself, so the whole computation is exact and
//! takes `O(n^4)` simple operations (about 5e7 at n = 100).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on symmetry and zero-diagonal violations of an input matrix.
pub const METRIC_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicityReport {
    pub n: usize,
    pub delta: f64,
    pub diameter: f64,
    /// `2 * delta / diameter`, defined as 0 when the diameter is 0.
    pub delta_rel: f64,
}

/// Symmetric Euclidean distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    /// Checks symmetry, zero diagonal and non-negativity.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::NotAMetric(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        let m = Self { n, data };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        let n = self.n;
        for i in 0..n {
            let d = self.get(i, i);
            if !d.is_finite() || d.abs() > METRIC_TOLERANCE {
                return Err(Error::NotAMetric(format!("d({i},{i}) = {d}")));
            }
            for j in 0..i {
                let (a, b) = (self.get(i, j), self.get(j, i));
                if !a.is_finite() || !b.is_finite() || a < -METRIC_TOLERANCE {
                    return Err(Error::NotAMetric(format!("d({i},{j}) = {a}")));
                }
                if (a - b).abs() > METRIC_TOLERANCE {
                    return Err(Error::NotAMetric(format!(
                        "d({i},{j}) = {a} but d({j},{i}) = {b}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn diameter(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }
}

/// Pairwise Euclidean distances.
pub fn distance_matrix(points: &[Vec<f64>]) -> Result<DistanceMatrix> {
    let n = points.len();
    if let Some(first) = points.first() {
        if let Some((i, p)) = points
            .iter()
            .enumerate()
            .find(|(_, p)| p.len() != first.len())
        {
            return Err(Error::DimMismatch(format!(
                "point {i} has dimension {}, expected {}",
                p.len(),
                first.len()
            )));
        }
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let d = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, data })
}

/// Exact delta over all base points.
pub fn delta_hyperbolicity(dist: &DistanceMatrix) -> HyperbolicityReport {
    let n = dist.len();
    let diameter = dist.diameter();
    let mut delta = 0.0f64;
    if n >= 4 {
        let mut gp = vec![0.0; n * n];
        for w in 0..n {
            for x in 0..n {
                let dxw = dist.get(x, w);
                for y in 0..n {
                    gp[x * n + y] = 0.5 * (dxw + dist.get(y, w) - dist.get(x, y));
                }
            }
            // gp is symmetric, so pairs x <= y suffice.
            for x in 0..n {
                let row_x = &gp[x * n..(x + 1) * n];
                for y in x..n {
                    let row_y = &gp[y * n..(y + 1) * n];
                    let best = row_x
                        .iter()
                        .zip(row_y)
                        .fold(f64::NEG_INFINITY, |m, (a, b)| m.max(a.min(*b)));
                    delta = delta.max(best - row_x[y]);
                }
            }
        }
    }
    HyperbolicityReport {
        n,
        delta,
        diameter,
        delta_rel: if diameter > 0.0 {
            2.0 * delta / diameter
        } else {
            0.0
        },
    }
}

/// Delta-hyperbolicity of a point cloud under Euclidean distance.
pub fn delta_for_states(points: &[Vec<f64>]) -> Result<HyperbolicityReport> {
    Ok(delta_hyperbolicity(&distance_matrix(points)?))
}
