//! Dense strictly convex QP by the dual active-set method of Goldfarb and
//! Idnani:
//!
//! ```text
//!     minimize    1/2 d' G d + a' d
//!     subject to  E' d  = e
//!                 C' d >= c
//! ```
//!
//! Constraint normals are the columns of `E` and `C`. The method starts from
//! the unconstrained minimizer and adds the most violated constraint (by
//! normalized violation, lowest index on ties) until all hold, dropping
//! constraints whose multipliers would turn negative.

use nalgebra::Cholesky;

use crate::problem::{Matrix, Vector};

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vector,
    pub eq_multipliers: Vector,
    /// Nonnegative, zero for inactive constraints.
    pub ineq_multipliers: Vector,
    pub iterations: usize,
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpFailure {
    /// The constraints admit no point.
    Infeasible,
    /// `G` is not positive definite.
    NotConvex,
    IterationLimit,
}

/// Borrowed QP data. Equalities come first in the multiplier bookkeeping.
pub struct Qp<'a> {
    pub hessian: &'a Matrix,
    pub linear: &'a Vector,
    pub eq_normals: &'a Matrix,
    pub eq_rhs: &'a Vector,
    pub ineq_normals: &'a Matrix,
    pub ineq_rhs: &'a Vector,
}

/// Column-major dense square matrix with cheap column access.
struct Square {
    n: usize,
    data: Vec<f64>,
}

impl Square {
    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.n + i]
    }
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.n + i] = v;
    }
    /// Rotates columns `(j, j + 1)` by `(c, s)`.
    fn rotate_cols(&mut self, j: usize, c: f64, s: f64) {
        let n = self.n;
        let (head, tail) = self.data.split_at_mut((j + 1) * n);
        let a = &mut head[j * n..];
        let b = &mut tail[..n];
        for (ai, bi) in a.iter_mut().zip(b.iter_mut()) {
            let (x, y) = (*ai, *bi);
            *ai = c * x + s * y;
            *bi = -s * x + c * y;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

struct Constraint<'a> {
    normal: &'a [f64],
    /// Nonzero positions when the normal is sparse enough to matter.
    nonzeros: Option<Vec<usize>>,
    rhs: f64,
    norm: f64,
    equality: bool,
}

impl<'a> Constraint<'a> {
    fn new(normal: &'a [f64], rhs: f64, equality: bool) -> Self {
        let nz: Vec<usize> = (0..normal.len()).filter(|&i| normal[i] != 0.0).collect();
        let nonzeros = (4 * nz.len() < normal.len()).then_some(nz);
        Self {
            normal,
            nonzeros,
            rhs,
            norm: dot(normal, normal).sqrt(),
            equality,
        }
    }

    fn dot(&self, v: &[f64]) -> f64 {
        match &self.nonzeros {
            Some(nz) => nz.iter().map(|&i| self.normal[i] * v[i]).sum(),
            None => dot(self.normal, v),
        }
    }
}

pub fn solve_qp(qp: &Qp<'_>) -> Result<QpSolution, QpFailure> {
    solve_qp_warm(qp, &[])
}

/// Like [`solve_qp`], but among violated inequalities those listed in
/// `hint` (inequality indices, e.g. a previous active set) are added first.
pub fn solve_qp_warm(qp: &Qp<'_>, hint: &[usize]) -> Result<QpSolution, QpFailure> {
    let n = qp.linear.len();
    let me = qp.eq_rhs.len();
    let mi = qp.ineq_rhs.len();
    debug_assert_eq!(qp.hessian.shape(), (n, n));
    debug_assert_eq!(qp.eq_normals.ncols(), me);
    debug_assert_eq!(qp.ineq_normals.ncols(), mi);

    let chol = Cholesky::new(qp.hessian.clone()).ok_or(QpFailure::NotConvex)?;
    // J = L^{-T}, so that J J' = G^{-1}
    let l_inv = chol
        .l()
        .solve_lower_triangular(&Matrix::identity(n, n))
        .ok_or(QpFailure::NotConvex)?;
    let jt = l_inv.transpose();
    let mut j = Square {
        n,
        data: jt.as_slice().to_vec(),
    };
    let mut x: Vec<f64> = (-chol.solve(qp.linear)).as_slice().to_vec();

    let mut constraints: Vec<Constraint<'_>> = Vec::with_capacity(me + mi);
    for i in 0..me {
        let normal = &qp.eq_normals.as_slice()[i * n..(i + 1) * n];
        constraints.push(Constraint::new(normal, qp.eq_rhs[i], true));
    }
    for i in 0..mi {
        let normal = &qp.ineq_normals.as_slice()[i * n..(i + 1) * n];
        constraints.push(Constraint::new(normal, qp.ineq_rhs[i], false));
    }
    let m = constraints.len();
    let mut preferred = vec![false; m];
    for &i in hint {
        if i < mi {
            preferred[me + i] = true;
        }
    }

    let mut r = Square {
        n,
        data: vec![0.0; n * n],
    };
    let mut active: Vec<usize> = Vec::new();
    // sign applied to an equality normal when it is added from the other side
    let mut signs: Vec<f64> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let mut is_active = vec![false; m];
    let mut d = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut rdir: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let max_iterations = 20 * (n + m) + 100;

    let violation_tol =
        |c: &Constraint<'_>| 1e-12 * (1.0 + c.rhs.abs() / c.norm.max(f64::MIN_POSITIVE));

    loop {
        // pick the next constraint: pending equalities in order, then the most
        // violated inequality
        let mut pick: Option<(usize, f64)> = None;
        for (i, c) in constraints.iter().enumerate().take(me) {
            if !is_active[i] && c.norm > 0.0 {
                pick = Some((i, c.dot(&x) - c.rhs));
                break;
            }
        }
        if pick.is_none() {
            let mut worst = 0.0;
            let mut worst_preferred = 0.0;
            let mut pick_preferred = None;
            for (i, c) in constraints.iter().enumerate().skip(me) {
                if is_active[i] {
                    continue;
                }
                let s = c.dot(&x) - c.rhs;
                if c.norm == 0.0 {
                    if s < -violation_tol(c) * c.rhs.abs().max(1.0) {
                        return Err(QpFailure::Infeasible);
                    }
                    continue;
                }
                let v = s / c.norm;
                if v < -violation_tol(c) {
                    if v < worst {
                        worst = v;
                        pick = Some((i, s));
                    }
                    if preferred[i] && v < worst_preferred {
                        worst_preferred = v;
                        pick_preferred = Some((i, s));
                    }
                }
            }
            if pick_preferred.is_some() {
                pick = pick_preferred;
            }
        }
        let Some((p, mut slack)) = pick else { break };
        let sign = if constraints[p].equality && slack > 0.0 {
            -1.0
        } else {
            1.0
        };
        slack *= sign;
        let mut u_new = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iterations {
                return Err(QpFailure::IterationLimit);
            }
            let q = active.len();
            for (jj, dj) in d.iter_mut().enumerate() {
                *dj = sign * constraints[p].dot(j.col(jj));
            }
            // primal direction z = J2 d2
            z.iter_mut().for_each(|v| *v = 0.0);
            for jj in q..n {
                let coef = d[jj];
                if coef != 0.0 {
                    for (zi, ji) in z.iter_mut().zip(j.col(jj)) {
                        *zi += coef * ji;
                    }
                }
            }
            // dual direction r = R^{-1} d1
            rdir.clear();
            rdir.resize(q, 0.0);
            for row in (0..q).rev() {
                let mut acc = d[row];
                for col in row + 1..q {
                    acc -= r.get(row, col) * rdir[col];
                }
                rdir[row] = acc / r.get(row, row);
            }

            let mut t1 = f64::INFINITY;
            let mut drop_at = usize::MAX;
            for (k, &ci) in active.iter().enumerate() {
                if constraints[ci].equality {
                    continue;
                }
                if rdir[k] > 0.0 {
                    let ratio = mult[k] / rdir[k];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = k;
                    }
                }
            }
            let d_norm2: f64 = d.iter().map(|v| v * v).sum();
            let d2_norm2: f64 = d[q..].iter().map(|v| v * v).sum();
            let zn = sign * constraints[p].dot(&z);
            let t2 = if d2_norm2 > 1e-24 * d_norm2 && zn > 0.0 {
                -slack / zn
            } else {
                f64::INFINITY
            };

            if !t1.is_finite() && !t2.is_finite() {
                return Err(QpFailure::Infeasible);
            }
            if !t2.is_finite() {
                // pure dual step
                for (mk, rk) in mult.iter_mut().zip(&rdir) {
                    *mk -= t1 * rk;
                }
                u_new += t1;
                drop_constraint(
                    &mut r,
                    &mut j,
                    &mut active,
                    &mut signs,
                    &mut mult,
                    &mut is_active,
                    drop_at,
                );
                continue;
            }
            let t = t1.min(t2);
            for (xi, zi) in x.iter_mut().zip(&z) {
                *xi += t * zi;
            }
            for (mk, rk) in mult.iter_mut().zip(&rdir) {
                *mk -= t * rk;
            }
            u_new += t;
            if t2 <= t1 {
                // add p: rotate d[q+1..] into d[q]
                for jj in (q + 1..n).rev() {
                    if d[jj] == 0.0 {
                        continue;
                    }
                    let (c, s, h) = givens(d[jj - 1], d[jj]);
                    d[jj - 1] = h;
                    d[jj] = 0.0;
                    j.rotate_cols(jj - 1, c, s);
                }
                for row in 0..=q {
                    r.set(row, q, d[row]);
                }
                active.push(p);
                signs.push(sign);
                mult.push(u_new);
                is_active[p] = true;
                break;
            }
            drop_constraint(
                &mut r,
                &mut j,
                &mut active,
                &mut signs,
                &mut mult,
                &mut is_active,
                drop_at,
            );
            slack = sign * (constraints[p].dot(&x) - constraints[p].rhs);
        }
    }

    let mut eq_multipliers = Vector::zeros(me);
    let mut ineq_multipliers = Vector::zeros(mi);
    for ((&ci, &s), &u) in active.iter().zip(&signs).zip(&mult) {
        if ci < me {
            eq_multipliers[ci] = s * u;
        } else {
            ineq_multipliers[ci - me] = u.max(0.0);
        }
    }
    Ok(QpSolution {
        x: Vector::from_vec(x),
        eq_multipliers,
        ineq_multipliers,
        iterations,
        active,
    })
}

fn drop_constraint(
    r: &mut Square,
    j: &mut Square,
    active: &mut Vec<usize>,
    signs: &mut Vec<f64>,
    mult: &mut Vec<f64>,
    is_active: &mut [bool],
    at: usize,
) {
    let q = active.len();
    is_active[active[at]] = false;
    active.remove(at);
    signs.remove(at);
    mult.remove(at);
    // shift columns left; R becomes upper Hessenberg from column `at`
    for col in at..q - 1 {
        for row in 0..=col + 1 {
            let v = r.get(row, col + 1);
            r.set(row, col, v);
        }
    }
    for row in 0..q {
        r.set(row, q - 1, 0.0);
    }
    for col in at..q - 1 {
        let (c, s, h) = givens(r.get(col, col), r.get(col + 1, col));
        r.set(col, col, h);
        r.set(col + 1, col, 0.0);
        for k in col + 1..q - 1 {
            let (a, b) = (r.get(col, k), r.get(col + 1, k));
            r.set(col, k, c * a + s * b);
            r.set(col + 1, k, -s * a + c * b);
        }
        j.rotate_cols(col, c, s);
    }
}
