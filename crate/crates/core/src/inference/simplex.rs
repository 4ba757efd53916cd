//! Dense primal simplex for the least-absolute-deviations program
//!
//! ```text
//! minimise   D0 + D1 + ... + DK
//! subject to -D0 - ratio * sum(T) <= 0
//!            -D0 + ratio * sum(T) <= 0
//!            -Dk - (W T)k         <= -rk
//!            -Dk + (W T)k         <=  rk
//! ```
//!
//! over free variables `y = [D0, D1..DK, T1..TN]`, with one nonnegative
//! slack per row. Free variables never leave the basis once they enter,
//! so Bland's rule over the remaining (slack) variables prevents cycling.

use nalgebra::DMatrix;

use super::{LadProblem, LadSolution};
use crate::error::{Error, Result};
use crate::graph::IncidenceMatrix;

const COST_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;

/// The program in the row blocks A1, A2 (prior), A3, A4 (data).
#[derive(Clone, Debug, PartialEq)]
pub struct LpStandardForm {
    /// `[1; K+1] ++ [0; N]`.
    pub c: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    /// `[-I_K, -W]` over the columns `D1..DK, T`; the D0 column is zero.
    pub a3: DMatrix<f64>,
    /// `[-I_K, +W]`.
    pub a4: DMatrix<f64>,
    /// Right-hand sides `(0, 0, -r, r)`.
    pub b: Vec<f64>,
}

impl LpStandardForm {
    /// All constraint rows stacked over the full `(K+N+1)` columns.
    pub fn stacked(&self) -> DMatrix<f64> {
        let k = self.a3.nrows();
        let nvar = self.c.len();
        let mut a = DMatrix::zeros(2 * k + 2, nvar);
        for j in 0..nvar {
            a[(0, j)] = self.a1[j];
            a[(1, j)] = self.a2[j];
        }
        for r in 0..k {
            for j in 0..nvar - 1 {
                a[(2 + r, 1 + j)] = self.a3[(r, j)];
                a[(2 + k + r, 1 + j)] = self.a4[(r, j)];
            }
        }
        a
    }
}

pub fn assemble_lp(p: &LadProblem) -> LpStandardForm {
    let k = p.incidence.edges();
    let n = p.incidence.nodes();
    let nvar = k + n + 1;
    let mut c = vec![0.0; nvar];
    c[..=k].iter_mut().for_each(|x| *x = 1.0);
    let mut a1 = vec![0.0; nvar];
    let mut a2 = vec![0.0; nvar];
    a1[0] = -1.0;
    a2[0] = -1.0;
    for j in 0..n {
        a1[k + 1 + j] = -p.ratio;
        a2[k + 1 + j] = p.ratio;
    }
    let w = p.incidence.to_dense();
    let mut a3 = DMatrix::zeros(k, k + n);
    let mut a4 = DMatrix::zeros(k, k + n);
    for r in 0..k {
        a3[(r, r)] = -1.0;
        a4[(r, r)] = -1.0;
        for j in 0..n {
            a3[(r, k + j)] = -w[(r, j)];
            a4[(r, k + j)] = w[(r, j)];
        }
    }
    let mut b = vec![0.0, 0.0];
    b.extend(p.observations.iter().map(|v| -v));
    b.extend(p.observations.iter().copied());
    LpStandardForm { c, a1, a2, a3, a4, b }
}

/// Reusable tableau storage; one per worker.
#[derive(Clone, Debug, Default)]
pub struct LadSolver {
    tableau: Vec<f64>,
    objective: Vec<f64>,
    basis: Vec<usize>,
    basic: Vec<bool>,
    pivots: usize,
}

impl LadSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total pivots performed by this workspace.
    pub fn pivots(&self) -> usize {
        self.pivots
    }

    pub fn solve(&mut self, p: &LadProblem) -> Result<LadSolution> {
        p.validate()?;
        self.solve_parts(&p.incidence, &p.observations, p.ratio)
    }

    /// Solves without validating; `r` must have one entry per row of `w`.
    pub(crate) fn solve_parts(
        &mut self,
        w: &IncidenceMatrix,
        r: &[f64],
        ratio: f64,
    ) -> Result<LadSolution> {
        let k = w.edges();
        let n = w.nodes();
        let nvar = k + n + 1;
        let m = 2 * k + 2;
        let cols = nvar + m + 1;
        let rhs = cols - 1;

        self.load(w, r, ratio);

        // feasible start: every deviation basic on the row it saturates
        self.pivot(0, 0, m, cols);
        for (e, &re) in r.iter().enumerate() {
            let row = if re >= 0.0 { 2 + e } else { 2 + k + e };
            self.pivot(row, 1 + e, m, cols);
        }

        let limit = 50 * (m + nvar) + 100;
        let mut count = 0;
        loop {
            let Some((j, dir)) = self.entering(nvar, m) else {
                break;
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                let b = self.basis[i];
                if b < nvar {
                    continue;
                }
                let a = self.tableau[i * cols + j] * dir;
                if a > PIVOT_TOL {
                    let ratio = self.tableau[i * cols + rhs].max(0.0) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((bi, br)) => {
                            if ratio < br - 1e-12 || (ratio <= br + 1e-12 && b < self.basis[bi]) {
                                Some((i, ratio))
                            } else {
                                Some((bi, br))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = leave else {
                return Err(Error::Unbounded);
            };
            self.pivot(row, j, m, cols);
            count += 1;
            if count > limit {
                self.pivots += count;
                return Err(Error::NumericalFailure(count));
            }
        }
        self.pivots += count;

        let mut latent = vec![0.0; n];
        for i in 0..m {
            let b = self.basis[i];
            if b > k && b < nvar {
                latent[b - k - 1] = self.tableau[i * cols + rhs];
            }
        }
        Ok(LadSolution::from_latent(w, r, ratio, latent, count))
    }

    /// Fills the tableau `[A | I | b]` and the cost row with all slacks basic.
    fn load(&mut self, w: &IncidenceMatrix, r: &[f64], ratio: f64) {
        let k = w.edges();
        let n = w.nodes();
        let nvar = k + n + 1;
        let m = 2 * k + 2;
        let cols = nvar + m + 1;
        let rhs = cols - 1;
        self.tableau.clear();
        self.tableau.resize(m * cols, 0.0);
        let t = &mut self.tableau;
        let tcol = |j: usize| k + 1 + j;
        // prior rows
        t[0] = -1.0;
        t[cols] = -1.0;
        for j in 0..n {
            t[tcol(j)] = -ratio;
            t[cols + tcol(j)] = ratio;
        }
        // data rows
        for (e, &(a, b)) in w.rows().iter().enumerate() {
            let r3 = (2 + e) * cols;
            let r4 = (2 + k + e) * cols;
            t[r3 + 1 + e] = -1.0;
            t[r4 + 1 + e] = -1.0;
            t[r3 + tcol(a)] += 1.0;
            t[r3 + tcol(b)] -= 1.0;
            t[r4 + tcol(a)] -= 1.0;
            t[r4 + tcol(b)] += 1.0;
            t[r3 + rhs] = -r[e];
            t[r4 + rhs] = r[e];
        }
        for i in 0..m {
            t[i * cols + nvar + i] = 1.0;
        }
        self.objective.clear();
        self.objective.resize(cols, 0.0);
        self.objective[..=k].iter_mut().for_each(|x| *x = 1.0);
        self.basis.clear();
        self.basis.extend(nvar..nvar + m);
        self.basic.clear();
        self.basic.resize(nvar + m, false);
        self.basic[nvar..].iter_mut().for_each(|x| *x = true);
    }

    fn entering(&self, nvar: usize, m: usize) -> Option<(usize, f64)> {
        for j in 0..nvar + m {
            if self.basic[j] {
                continue;
            }
            let d = self.objective[j];
            if j < nvar {
                if d.abs() > COST_TOL {
                    return Some((j, -d.signum()));
                }
            } else if d < -COST_TOL {
                return Some((j, 1.0));
            }
        }
        None
    }

    fn pivot(&mut self, row: usize, col: usize, m: usize, cols: usize) {
        let t = &mut self.tableau;
        let p = t[row * cols + col];
        let inv = 1.0 / p;
        for x in &mut t[row * cols..(row + 1) * cols] {
            *x *= inv;
        }
        t[row * cols + col] = 1.0;
        let (before, rest) = t.split_at_mut(row * cols);
        let (pivot_row, after) = rest.split_at_mut(cols);
        for other in before.chunks_exact_mut(cols).chain(after.chunks_exact_mut(cols)) {
            let f = other[col];
            if f != 0.0 {
                for (x, y) in other.iter_mut().zip(pivot_row.iter()) {
                    *x -= f * y;
                }
                other[col] = 0.0;
            }
        }
        let f = self.objective[col];
        if f != 0.0 {
            for (x, y) in self.objective.iter_mut().zip(pivot_row.iter()) {
                *x -= f * y;
            }
            self.objective[col] = 0.0;
        }
        let old = self.basis[row];
        self.basic[old] = false;
        self.basic[col] = true;
        self.basis[row] = col;
        debug_assert!(row < m);
    }
}
