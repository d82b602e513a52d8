//! Dense primal simplex for `max c·x  s.t.  A x ≤ b, x ≥ 0` with `b ≥ 0`.
//!
//! The slack basis is feasible for such programs, so no phase one is needed.
//! The tableau is kept in condensed dictionary form (one column per
//! nonbasic variable), so memory is `rows × (vars + 1)`. Dantzig pricing is
//! used until a run of degenerate pivots is seen, after which Bland's rule
//! takes over for the rest of the solve.

use crate::error::LpError;

const PRICE_TOL: f64 = 1e-11;
const PIVOT_TOL: f64 = 1e-12;
const DEGENERATE_STREAK: usize = 50;
pub const MAX_PIVOTS: usize = 200_000;

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub value: f64,
    pub pivots: usize,
}

/// Constraint row: `Σ coeffs[j]·x_j ≤ rhs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// `rows` dictionaries `x_B[i] = beta_i + Σ_j alpha_ij x_N[j]`, stored
/// row-major with the constant in the last column; the final row is the
/// objective.
struct Dictionary {
    width: usize,
    cells: Vec<f64>,
    basic: Vec<usize>,
    nonbasic: Vec<usize>,
}

impl Dictionary {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.cells[i * self.width + j]
    }

    fn rows(&self) -> usize {
        self.basic.len()
    }

    fn objective_row(&self) -> usize {
        self.rows()
    }

    fn pivot(&mut self, r: usize, s: usize) {
        let w = self.width;
        let a_rs = self.at(r, s);
        let inv = 1.0 / a_rs;
        {
            let row = &mut self.cells[r * w..(r + 1) * w];
            for (j, v) in row.iter_mut().enumerate() {
                if j == s {
                    *v = inv;
                } else {
                    *v = -*v * inv;
                }
            }
        }
        let pivot_row: Vec<f64> = self.cells[r * w..(r + 1) * w].to_vec();
        for i in 0..=self.rows() {
            if i == r {
                continue;
            }
            let a_is = self.cells[i * w + s];
            if a_is == 0.0 {
                continue;
            }
            let row = &mut self.cells[i * w..(i + 1) * w];
            for (j, v) in row.iter_mut().enumerate() {
                if j == s {
                    *v = a_is * pivot_row[s];
                } else {
                    *v += a_is * pivot_row[j];
                }
            }
        }
        std::mem::swap(&mut self.basic[r], &mut self.nonbasic[s]);
    }
}

/// Solves `max c·x` over `{x ≥ 0, rows}`. Every `rhs` must be `≥ 0`.
pub fn maximize(c: &[f64], rows: &[Constraint]) -> Result<LpSolution, LpError> {
    let n = c.len();
    if let Some(bad) = rows.iter().position(|r| !(r.rhs >= 0.0) || !r.rhs.is_finite()) {
        return Err(LpError::InvalidInstance(format!("row {bad} has a negative or non-finite bound")));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(LpError::InvalidInstance("non-finite objective".into()));
    }
    let m = rows.len();
    let width = n + 1;
    let mut cells = vec![0.0; (m + 1) * width];
    for (i, row) in rows.iter().enumerate() {
        for &(j, a) in &row.coeffs {
            if j >= n {
                return Err(LpError::InvalidInstance(format!("row {i} references variable {j}")));
            }
            cells[i * width + j] -= a;
        }
        cells[i * width + n] = row.rhs;
    }
    cells[m * width..m * width + n].copy_from_slice(c);
    let mut dict = Dictionary {
        width,
        cells,
        basic: (n..n + m).collect(),
        nonbasic: (0..n).collect(),
    };

    let obj = dict.objective_row();
    let mut pivots = 0;
    let mut streak = 0;
    let mut bland = false;
    loop {
        let entering = if bland {
            (0..n)
                .filter(|&j| dict.at(obj, j) > PRICE_TOL)
                .min_by_key(|&j| dict.nonbasic[j])
        } else {
            (0..n)
                .filter(|&j| dict.at(obj, j) > PRICE_TOL)
                .max_by(|&a, &b| dict.at(obj, a).total_cmp(&dict.at(obj, b)).then(b.cmp(&a)))
        };
        let Some(s) = entering else { break };

        let mut leave: Option<(usize, f64)> = None;
        for i in 0..dict.rows() {
            let a = dict.at(i, s);
            if a < -PIVOT_TOL {
                let ratio = dict.at(i, n).max(0.0) / -a;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((r, best)) => {
                        if ratio < best || (ratio == best && dict.basic[i] < dict.basic[r]) {
                            Some((i, ratio))
                        } else {
                            Some((r, best))
                        }
                    }
                };
            }
        }
        let Some((r, ratio)) = leave else {
            let mut direction = vec![0.0; n];
            if dict.nonbasic[s] < n {
                direction[dict.nonbasic[s]] = 1.0;
            }
            for i in 0..dict.rows() {
                if dict.basic[i] < n {
                    direction[dict.basic[i]] = dict.at(i, s);
                }
            }
            return Err(LpError::Unbounded { direction });
        };
        if ratio == 0.0 {
            streak += 1;
            if streak > DEGENERATE_STREAK {
                bland = true;
            }
        } else {
            streak = 0;
        }
        dict.pivot(r, s);
        pivots += 1;
        if pivots > MAX_PIVOTS {
            return Err(LpError::IterationLimit(MAX_PIVOTS));
        }
    }

    let mut x = vec![0.0; n];
    for i in 0..dict.rows() {
        if dict.basic[i] < n {
            x[dict.basic[i]] = dict.at(i, n).max(0.0);
        }
    }
    let value = c.iter().zip(&x).map(|(a, b)| a * b).sum();
    Ok(LpSolution { x, value, pivots })
}
