//! Dense primal simplex for small linear programs of the form
//! `max c'x  s.t.  A x <= b, x >= 0` with `b >= 0`.
//!
//! With `b >= 0` the slack basis is feasible, so no phase 1 is needed.
//! Bland's rule guards against cycling, which matters here: the cone
//! programs solved for the existence check are highly degenerate.

use crate::error::{Error, Result};

pub const PIVOT_TOL: f64 = 1e-9;

/// Refuse tableaux larger than this many entries.
pub const MAX_TABLEAU_ENTRIES: usize = 40_000_000;

#[derive(Clone, Debug, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Unbounded,
}

/// Constraint rows in sparse form: `(column, coefficient)` pairs plus rhs.
#[derive(Clone, Debug, Default)]
pub struct Constraints {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub rhs: Vec<f64>,
}

impl Constraints {
    pub fn push(&mut self, row: Vec<(usize, f64)>, rhs: f64) {
        self.rows.push(row);
        self.rhs.push(rhs);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

struct Tableau {
    rows: usize,
    width: usize,
    /// `rows` constraint rows then the objective row; last column is rhs.
    data: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn new(num_vars: usize, cons: &Constraints) -> Result<Self> {
        let rows = cons.len();
        let width = num_vars + rows + 1;
        if (rows + 1).saturating_mul(width) > MAX_TABLEAU_ENTRIES {
            return Err(Error::Capability(format!(
                "linear program with {rows} constraints and {num_vars} variables exceeds the dense solver cap"
            )));
        }
        let mut data = vec![0.0; (rows + 1) * width];
        for (r, (row, &b)) in cons.rows.iter().zip(&cons.rhs).enumerate() {
            if b < 0.0 || !b.is_finite() {
                return Err(Error::Input(format!("constraint {r} has rhs {b}; need b >= 0")));
            }
            for &(j, a) in row {
                if j >= num_vars {
                    return Err(Error::Input(format!("constraint {r} references variable {j}")));
                }
                data[r * width + j] += a;
            }
            data[r * width + num_vars + r] = 1.0;
            data[r * width + width - 1] = b;
        }
        let basis = (num_vars..num_vars + rows).collect();
        Ok(Self { rows, width, data, basis })
    }

    fn set_objective(&mut self, c: &[f64]) {
        let base = self.rows * self.width;
        self.data[base..].fill(0.0);
        // Reduced costs stored as -c so optimality is "all entries >= 0".
        for (j, &cj) in c.iter().enumerate() {
            self.data[base + j] = -cj;
        }
        for r in 0..self.rows {
            let b = self.basis[r];
            let coef = self.data[base + b];
            if coef != 0.0 {
                for col in 0..self.width {
                    self.data[base + col] -= coef * self.data[r * self.width + col];
                }
            }
        }
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.width;
        let inv = 1.0 / self.data[pr * w + pc];
        for col in 0..w {
            self.data[pr * w + col] *= inv;
        }
        let pivot_row: Vec<f64> = self.data[pr * w..(pr + 1) * w].to_vec();
        for r in 0..=self.rows {
            if r == pr {
                continue;
            }
            let f = self.data[r * w + pc];
            if f != 0.0 {
                for (dst, &src) in self.data[r * w..(r + 1) * w].iter_mut().zip(&pivot_row) {
                    *dst -= f * src;
                }
                self.data[r * w + pc] = 0.0;
            }
        }
        self.basis[pr] = pc;
    }

    fn solve(&mut self, max_iter: usize) -> Result<bool> {
        let w = self.width;
        let obj = self.rows * w;
        for _ in 0..max_iter {
            let Some(pc) = (0..w - 1).find(|&j| self.data[obj + j] < -PIVOT_TOL) else {
                return Ok(true);
            };
            let mut best: Option<(f64, usize, usize)> = None;
            for r in 0..self.rows {
                let a = self.data[r * w + pc];
                if a > PIVOT_TOL {
                    let ratio = self.data[r * w + w - 1] / a;
                    let better = match best {
                        None => true,
                        Some((br, _, bv)) => {
                            ratio < br - PIVOT_TOL || (ratio <= br + PIVOT_TOL && self.basis[r] < bv)
                        }
                    };
                    if better {
                        best = Some((ratio, r, self.basis[r]));
                    }
                }
            }
            match best {
                Some((_, pr, _)) => self.pivot(pr, pc),
                None => return Ok(false),
            }
        }
        Err(Error::Numeric(format!("simplex did not terminate within {max_iter} pivots")))
    }

    fn primal(&self, num_vars: usize) -> Vec<f64> {
        let mut x = vec![0.0; num_vars];
        for (r, &b) in self.basis.iter().enumerate() {
            if b < num_vars {
                x[b] = self.data[r * self.width + self.width - 1];
            }
        }
        x
    }
}

fn iteration_cap(num_vars: usize, rows: usize) -> usize {
    50 * (num_vars + rows) + 1000
}

/// Solves `max c'x` over `{A x <= b, x >= 0}`.
pub fn maximize(c: &[f64], cons: &Constraints) -> Result<LpOutcome> {
    let mut t = Tableau::new(c.len(), cons)?;
    t.set_objective(c);
    if !t.solve(iteration_cap(c.len(), cons.len()))? {
        return Ok(LpOutcome::Unbounded);
    }
    let x = t.primal(c.len());
    let value = c.iter().zip(&x).map(|(a, b)| a * b).sum();
    Ok(LpOutcome::Optimal { x, value })
}

/// Solves a sequence of objectives over the same feasible region, warm
/// starting each from the previous optimal basis. Stops early when `stop`
/// returns true for an outcome; returns the outcomes computed so far.
pub fn maximize_many<F>(objectives: &[Vec<f64>], num_vars: usize, cons: &Constraints, mut stop: F) -> Result<Vec<LpOutcome>>
where
    F: FnMut(&LpOutcome) -> bool,
{
    let mut t = Tableau::new(num_vars, cons)?;
    let cap = iteration_cap(num_vars, cons.len());
    let mut out = Vec::with_capacity(objectives.len());
    for c in objectives {
        t.set_objective(c);
        let outcome = if t.solve(cap)? {
            let x = t.primal(num_vars);
            let value = c.iter().zip(&x).map(|(a, b)| a * b).sum();
            LpOutcome::Optimal { x, value }
        } else {
            // An unbounded ray leaves the tableau primal feasible; rebuild so
            // later objectives start from a clean basis anyway.
            t = Tableau::new(num_vars, cons)?;
            LpOutcome::Unbounded
        };
        let done = stop(&outcome);
        out.push(outcome);
        if done {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_problem() {
        // max 3x + 5y, x <= 4, 2y <= 12, 3x + 2y <= 18 -> (2, 6), 36.
        let mut cons = Constraints::default();
        cons.push(vec![(0, 1.0)], 4.0);
        cons.push(vec![(1, 2.0)], 12.0);
        cons.push(vec![(0, 3.0), (1, 2.0)], 18.0);
        match maximize(&[3.0, 5.0], &cons).unwrap() {
            LpOutcome::Optimal { x, value } => {
                assert!((value - 36.0).abs() < 1e-12);
                assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 6.0).abs() < 1e-12);
            }
            LpOutcome::Unbounded => panic!("bounded problem"),
        }
    }

    #[test]
    fn detects_unbounded() {
        let mut cons = Constraints::default();
        cons.push(vec![(0, 1.0), (1, -1.0)], 1.0);
        assert_eq!(maximize(&[0.0, 1.0], &cons).unwrap(), LpOutcome::Unbounded);
    }

    #[test]
    fn rejects_negative_rhs() {
        let mut cons = Constraints::default();
        cons.push(vec![(0, 1.0)], -1.0);
        assert!(maximize(&[1.0], &cons).is_err());
    }

    #[test]
    fn degenerate_cone_terminates() {
        // Many redundant constraints through the origin.
        let mut cons = Constraints::default();
        for k in 1..30 {
            let k = k as f64;
            cons.push(vec![(0, k), (1, -1.0), (2, 1.0 / k)], 0.0);
            cons.push(vec![(1, 1.0), (0, -k)], 0.0);
        }
        cons.push(vec![(0, 1.0)], 1.0);
        cons.push(vec![(1, 1.0)], 1.0);
        cons.push(vec![(2, 1.0)], 1.0);
        let out = maximize_many(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]], 3, &cons, |_| false).unwrap();
        assert_eq!(out.len(), 2);
        for o in out {
            assert!(matches!(o, LpOutcome::Optimal { .. }));
        }
    }
}
