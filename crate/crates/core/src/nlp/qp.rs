//! Dense strictly convex QP by the Goldfarb-Idnani dual active-set method.
//!
//! ```text
//!     minimize    1/2 d' H d + g' d
//!     subject to  A_eq d  = b_eq
//!                 A_in d >= b_in
//! ```
//!
//! `H` must be positive definite. The method starts from the unconstrained
//! minimizer and adds violated constraints one at a time, dropping active
//! ones whose multipliers would turn negative, so every iterate is dual
//! feasible. Factorizations are kept as `J = L^-T Q` and the triangular `R`
//! and updated by Givens rotations.
//!
//! When the constraints are inconsistent, [`solve`] falls back to an elastic
//! problem in which every row gets slacks with cost `rho t + t^2 / 2`.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub elastic_penalty: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { elastic_penalty: 1e4, max_iter: 5000 }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub d: DVector<f64>,
    pub lambda_eq: DVector<f64>,
    /// Multipliers of the inequality rows, all `>= 0`.
    pub mu_in: DVector<f64>,
    /// Elastic slack per inequality row.
    pub slack: DVector<f64>,
    /// Elastic slack per equality row, `|s+ - s-|`.
    pub eq_slack: DVector<f64>,
    pub iterations: usize,
}

impl QpSolution {
    pub fn slack_sum(&self) -> f64 {
        self.slack.iter().sum::<f64>() + self.eq_slack.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpError {
    NotPositiveDefinite,
    DependentEqualities,
    Infeasible,
    IterationLimit,
    NonFinite,
}

pub struct QpProblem<'a> {
    pub h: &'a DMatrix<f64>,
    pub g: &'a DVector<f64>,
    pub a_eq: &'a DMatrix<f64>,
    pub b_eq: &'a DVector<f64>,
    pub a_in: &'a DMatrix<f64>,
    pub b_in: &'a DVector<f64>,
}

impl QpProblem<'_> {
    fn is_finite(&self) -> bool {
        [self.h.as_slice(), self.g.as_slice(), self.a_eq.as_slice(), self.b_eq.as_slice(), self.a_in.as_slice(), self.b_in.as_slice()]
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

struct Raw {
    d: DVector<f64>,
    lambda_eq: DVector<f64>,
    mu_in: DVector<f64>,
    iterations: usize,
}

/// Solve the QP; on inconsistent constraints solve the elastic problem instead.
pub fn solve(p: &QpProblem<'_>, opts: &QpOptions) -> Result<QpSolution, QpError> {
    if !p.is_finite() {
        return Err(QpError::NonFinite);
    }
    match dual_active_set(p, opts.max_iter) {
        Ok(r) => {
            let (m_eq, m_in) = (p.a_eq.nrows(), p.a_in.nrows());
            Ok(QpSolution {
                d: r.d,
                lambda_eq: r.lambda_eq,
                mu_in: r.mu_in,
                slack: DVector::zeros(m_in),
                eq_slack: DVector::zeros(m_eq),
                iterations: r.iterations,
            })
        }
        Err(QpError::Infeasible) | Err(QpError::DependentEqualities) => solve_elastic(p, opts),
        Err(e) => Err(e),
    }
}

/// Elastic relaxation: `A_eq d + s+ - s- = b_eq`, `A_in d + t >= b_in`, all
/// slacks non-negative and penalized. Always feasible.
pub fn solve_elastic(p: &QpProblem<'_>, opts: &QpOptions) -> Result<QpSolution, QpError> {
    let n = p.h.nrows();
    let m_eq = p.a_eq.nrows();
    let m_in = p.a_in.nrows();
    let ns = 2 * m_eq + m_in;
    let nt = n + ns;
    let rho = opts.elastic_penalty;

    let mut h = DMatrix::zeros(nt, nt);
    h.view_mut((0, 0), (n, n)).copy_from(p.h);
    let mut g = DVector::zeros(nt);
    g.rows_mut(0, n).copy_from(p.g);
    for k in 0..ns {
        h[(n + k, n + k)] = 1.0;
        g[n + k] = rho;
    }
    let mut a_eq = DMatrix::zeros(m_eq, nt);
    if m_eq > 0 {
        a_eq.view_mut((0, 0), (m_eq, n)).copy_from(p.a_eq);
    }
    for i in 0..m_eq {
        a_eq[(i, n + 2 * i)] = 1.0;
        a_eq[(i, n + 2 * i + 1)] = -1.0;
    }
    let mut a_in = DMatrix::zeros(m_in + ns, nt);
    if m_in > 0 {
        a_in.view_mut((0, 0), (m_in, n)).copy_from(p.a_in);
    }
    for i in 0..m_in {
        a_in[(i, n + 2 * m_eq + i)] = 1.0;
    }
    for k in 0..ns {
        a_in[(m_in + k, n + k)] = 1.0;
    }
    let mut b_in = DVector::zeros(m_in + ns);
    b_in.rows_mut(0, m_in).copy_from(p.b_in);

    let ep = QpProblem { h: &h, g: &g, a_eq: &a_eq, b_eq: p.b_eq, a_in: &a_in, b_in: &b_in };
    let r = dual_active_set(&ep, opts.max_iter)?;
    // a slack whose bound row is active is zero, whatever roundoff left in d
    let value = |k: usize| if r.mu_in[m_in + k] > 0.0 { 0.0 } else { r.d[n + k].max(0.0) };
    let slack = DVector::from_fn(m_in, |i, _| value(2 * m_eq + i));
    let eq_slack = DVector::from_fn(m_eq, |i, _| (value(2 * i) - value(2 * i + 1)).abs());
    Ok(QpSolution {
        d: r.d.rows(0, n).into_owned(),
        lambda_eq: r.lambda_eq,
        mu_in: r.mu_in.rows(0, m_in).into_owned(),
        slack,
        eq_slack,
        iterations: r.iterations,
    })
}

/// Working factorization: columns of `J` span the space, the first `iq` of
/// them are tied to the active constraints through upper-triangular `R`.
struct Work {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    r_norm: f64,
    iq: usize,
}

impl Work {
    fn d_of(&self, np: &DVector<f64>) -> DVector<f64> {
        self.j.tr_mul(np)
    }

    /// Primal step direction `z = J_2 d_2`.
    fn z_of(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.n);
        for k in self.iq..self.n {
            z.axpy(d[k], &self.j.column(k), 1.0);
        }
        z
    }

    /// Dual step direction `r = R^-1 d_1`.
    fn r_of(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut r = DVector::zeros(self.iq);
        for i in (0..self.iq).rev() {
            let mut s = d[i];
            for k in i + 1..self.iq {
                s -= self.r[(i, k)] * r[k];
            }
            r[i] = s / self.r[(i, i)];
        }
        r
    }

    /// Rotate `d` so that only its first `iq + 1` entries survive, then
    /// append a column to `R`. False when the new normal is dependent.
    fn add(&mut self, d: &mut DVector<f64>) -> bool {
        let n = self.n;
        for jj in (self.iq + 1..n).rev() {
            let mut cc = d[jj - 1];
            let mut ss = d[jj];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[jj] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, jj - 1)];
                let t2 = self.j[(k, jj)];
                let a = t1 * cc + t2 * ss;
                self.j[(k, jj - 1)] = a;
                self.j[(k, jj)] = xny * (t1 + a) - t2;
            }
        }
        self.iq += 1;
        for i in 0..self.iq {
            self.r[(i, self.iq - 1)] = d[i];
        }
        let diag = d[self.iq - 1].abs();
        if diag <= f64::EPSILON * self.r_norm {
            return false;
        }
        self.r_norm = self.r_norm.max(diag);
        true
    }

    /// Remove active position `qq` and restore the triangular form.
    fn remove(&mut self, qq: usize) {
        let n = self.n;
        for i in qq..self.iq - 1 {
            for k in 0..n {
                self.r[(k, i)] = self.r[(k, i + 1)];
            }
        }
        for k in 0..n {
            self.r[(k, self.iq - 1)] = 0.0;
        }
        self.iq -= 1;
        for jj in qq..self.iq {
            let mut cc = self.r[(jj, jj)];
            let mut ss = self.r[(jj + 1, jj)];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..self.iq {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                let a = t1 * cc + t2 * ss;
                self.r[(jj, k)] = a;
                self.r[(jj + 1, k)] = xny * (t1 + a) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                let a = t1 * cc + t2 * ss;
                self.j[(k, jj)] = a;
                self.j[(k, jj + 1)] = xny * (a + t1) - t2;
            }
        }
    }
}

fn dual_active_set(p: &QpProblem<'_>, max_iter: usize) -> Result<Raw, QpError> {
    let n = p.h.nrows();
    let m_eq = p.a_eq.nrows();
    let m_in = p.a_in.nrows();

    let chol = p.h.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let j = chol.l().transpose().try_inverse().ok_or(QpError::NotPositiveDefinite)?;
    let mut w = Work { n, j, r: DMatrix::zeros(n, n), r_norm: 1.0, iq: 0 };

    // unconstrained minimizer
    let mut x = -chol.solve(p.g);
    // active set: entries < m_eq are equalities, others are m_eq + inequality index
    let mut active: Vec<usize> = Vec::with_capacity(n);
    let mut u: Vec<f64> = Vec::with_capacity(n + 1);

    for i in 0..m_eq {
        let np = p.a_eq.row(i).transpose();
        let mut d = w.d_of(&np);
        let z = w.z_of(&d);
        let r = w.r_of(&d);
        let zn = z.dot(&np);
        let resid = p.b_eq[i] - np.dot(&x);
        let t2 = if z.norm_squared() > f64::EPSILON * f64::EPSILON * (1.0 + np.norm_squared()) {
            resid / zn
        } else {
            0.0
        };
        x.axpy(t2, &z, 1.0);
        for k in 0..w.iq {
            u[k] -= t2 * r[k];
        }
        u.push(t2);
        active.push(i);
        if !w.add(&mut d) || (t2 == 0.0 && resid.abs() > 1e-9 * (1.0 + p.b_eq[i].abs())) {
            return Err(QpError::DependentEqualities);
        }
    }

    let row_scale: Vec<f64> = (0..m_in).map(|i| 1.0 + p.a_in.row(i).amax() + p.b_in[i].abs()).collect();
    let slack_of = |x: &DVector<f64>, i: usize| p.a_in.row(i).transpose().dot(x) - p.b_in[i];
    let mut is_active = vec![false; m_in];
    let mut excluded = vec![false; m_in];
    let mut iterations = 0usize;

    'outer: loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(QpError::IterationLimit);
        }
        excluded.iter_mut().for_each(|e| *e = false);
        let u_old = u.clone();
        let active_old = active.clone();
        let x_old = x.clone();

        'select: loop {
            let xs = 1.0 + x.amax();
            let mut worst = None;
            let mut worst_val = 0.0;
            for i in 0..m_in {
                if is_active[i] || excluded[i] {
                    continue;
                }
                let s = slack_of(&x, i);
                if s < -1e-13 * row_scale[i] * xs && s < worst_val {
                    worst_val = s;
                    worst = Some(i);
                }
            }
            let Some(ip) = worst else {
                break 'outer;
            };
            let np = p.a_in.row(ip).transpose();
            u.push(0.0);
            active.push(m_eq + ip);

            loop {
                iterations += 1;
                if iterations > max_iter {
                    return Err(QpError::IterationLimit);
                }
                let mut d = w.d_of(&np);
                let z = w.z_of(&d);
                let r = w.r_of(&d);
                // dual step bound from active inequalities
                let mut t1 = f64::INFINITY;
                let mut drop = None;
                for k in m_eq..w.iq {
                    if r[k] > 0.0 {
                        let t = u[k] / r[k];
                        if t < t1 {
                            t1 = t;
                            drop = Some(k);
                        }
                    }
                }
                let zn = z.dot(&np);
                let t2 = if z.norm_squared() > f64::EPSILON * f64::EPSILON * np.norm_squared() && zn > 0.0 {
                    -slack_of(&x, ip) / zn
                } else {
                    f64::INFINITY
                };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(QpError::Infeasible);
                }
                if !t2.is_finite() {
                    // dual-only step
                    for k in 0..w.iq {
                        u[k] -= t * r[k];
                    }
                    let last = u.len() - 1;
                    u[last] += t;
                    let k = drop.unwrap();
                    is_active[active[k] - m_eq] = false;
                    w.remove(k);
                    active.remove(k);
                    u.remove(k);
                    continue;
                }
                x.axpy(t, &z, 1.0);
                for k in 0..w.iq {
                    u[k] -= t * r[k];
                }
                let last = u.len() - 1;
                u[last] += t;
                if t == t2 {
                    if !w.add(&mut d) {
                        // degenerate addition: restore and try another row
                        excluded[ip] = true;
                        u.clone_from(&u_old);
                        active.clone_from(&active_old);
                        x.clone_from(&x_old);
                        rebuild(&mut w, p, &active, &chol)?;
                        is_active.iter_mut().for_each(|a| *a = false);
                        for &a in &active {
                            if a >= m_eq {
                                is_active[a - m_eq] = true;
                            }
                        }
                        continue 'select;
                    }
                    is_active[ip] = true;
                    continue 'outer;
                }
                // partial step: drop the blocking active constraint
                let k = drop.unwrap();
                is_active[active[k] - m_eq] = false;
                w.remove(k);
                active.remove(k);
                u.remove(k);
            }
        }
    }

    let mut lambda_eq = DVector::zeros(m_eq);
    let mut mu_in = DVector::zeros(m_in);
    for (k, &a) in active.iter().enumerate() {
        if a < m_eq {
            lambda_eq[a] = u[k];
        } else {
            mu_in[a - m_eq] = u[k].max(0.0);
        }
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(QpError::NonFinite);
    }
    Ok(Raw { d: x, lambda_eq, mu_in, iterations })
}

/// Recompute `J` and `R` from scratch for a given active set.
fn rebuild(
    w: &mut Work,
    p: &QpProblem<'_>,
    active: &[usize],
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
) -> Result<(), QpError> {
    let m_eq = p.a_eq.nrows();
    w.j = chol.l().transpose().try_inverse().ok_or(QpError::NotPositiveDefinite)?;
    w.r.fill(0.0);
    w.r_norm = 1.0;
    w.iq = 0;
    for &a in active {
        let np = if a < m_eq { p.a_eq.row(a).transpose() } else { p.a_in.row(a - m_eq).transpose() };
        let mut d = w.d_of(&np);
        if !w.add(&mut d) {
            return Err(QpError::DependentEqualities);
        }
    }
    Ok(())
}
