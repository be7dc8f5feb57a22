//! Line-search SQP with a damped BFGS Hessian and an l1 merit function.
//!
//! Each iteration linearizes the constraints, solves the QP subproblem with
//! [`qp::solve`](super::qp::solve), and backtracks on
//! `phi(z) = f(z) + sum_i w_i |c_eq,i(z)| + sum_j v_j |min(0, c_in,j(z))|`
//! under the Armijo condition. The row weights follow Powell's rule, so rows
//! with small multipliers are not over-penalized. A second-order correction is tried before backtracking when the
//! full step is rejected.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use super::qp::{self, QpError, QpOptions, QpProblem, QpSolution};
use super::{gradients, Nlp};

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol_kkt: 1e-6, tol_feas: 1e-6, max_iter: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    InfeasibleQp,
    NumericalFailure,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::InfeasibleQp => "infeasible_qp",
            SolveStatus::NumericalFailure => "numerical_failure",
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub kkt: f64,
    pub violation: f64,
    pub step_norm: f64,
    pub alpha: f64,
    pub penalty: f64,
    /// Merit at the current iterate and at the accepted one, same penalty.
    pub merit: f64,
    pub merit_next: f64,
    pub qp_iterations: usize,
    pub elastic_slack: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub z: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub violation: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub lambda_eq: Vec<f64>,
    pub mu_ineq: Vec<f64>,
    pub diagnostic: Option<String>,
    pub trace: Vec<IterationRecord>,
}

/// One line per SQP iteration: `iter objective kkt step_norm`.
pub fn write_trace<W: Write>(report: &SolveReport, mut out: W) -> io::Result<()> {
    for r in &report.trace {
        writeln!(out, "{} {:.9e} {:.3e} {:.3e}", r.iter, r.objective, r.kkt, r.step_norm)?;
    }
    Ok(())
}

/// Function values and derivatives at one iterate.
struct Point {
    z: DVector<f64>,
    f: f64,
    g: DVector<f64>,
    ce: DVector<f64>,
    je: DMatrix<f64>,
    ci: DVector<f64>,
    ji: DMatrix<f64>,
}

struct Boxes {
    lower: Vec<(usize, f64)>,
    upper: Vec<(usize, f64)>,
}

impl Boxes {
    fn new(lb: &[f64], ub: &[f64]) -> Self {
        Self {
            lower: lb.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, v)| (i, *v)).collect(),
            upper: ub.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, v)| (i, *v)).collect(),
        }
    }

    fn len(&self) -> usize {
        self.lower.len() + self.upper.len()
    }

    fn clip(&self, z: &mut DVector<f64>) {
        for &(i, v) in &self.lower {
            if z[i] < v {
                z[i] = v;
            }
        }
        for &(i, v) in &self.upper {
            if z[i] > v {
                z[i] = v;
            }
        }
    }
}

fn eval_values<P: Nlp + ?Sized>(nlp: &P, z: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>) {
    let s = z.as_slice();
    (nlp.objective(s), nlp.eq_constraints(s), nlp.ineq_constraints(s))
}

/// Row weights of the l1 penalty.
struct Penalty {
    eq: DVector<f64>,
    ineq: DVector<f64>,
}

impl Penalty {
    fn new(n_eq: usize, n_in: usize) -> Self {
        Self { eq: DVector::from_element(n_eq, 1.0), ineq: DVector::from_element(n_in, 1.0) }
    }

    fn value(&self, ce: &DVector<f64>, ci: &DVector<f64>) -> f64 {
        let e: f64 = ce.iter().zip(self.eq.iter()).map(|(c, w)| w * c.abs()).sum();
        e + ci.iter().zip(self.ineq.iter()).map(|(c, w)| w * (-c).max(0.0)).sum::<f64>()
    }

    /// `w <- max(1.5 |m|, (w + 1.5 |m|) / 2)` for every row the QP satisfied.
    fn update(&mut self, sol: &QpSolution) {
        let rule = |w: &mut f64, m: f64| {
            let t = 1.5 * m.abs();
            *w = t.max(0.5 * (*w + t));
        };
        for (i, w) in self.eq.iter_mut().enumerate() {
            if sol.eq_slack.get(i).is_none_or(|s| *s == 0.0) {
                rule(w, sol.lambda_eq[i]);
            }
        }
        for (i, w) in self.ineq.iter_mut().enumerate() {
            if sol.slack[i] == 0.0 {
                rule(w, sol.mu_in[i]);
            }
        }
    }

    fn scale(&mut self, k: f64) {
        self.eq *= k;
        self.ineq *= k;
    }

    fn max(&self) -> f64 {
        self.eq.iter().chain(self.ineq.iter()).fold(0.0f64, |m, w| m.max(*w))
    }
}

fn violation_inf(ce: &DVector<f64>, ci: &DVector<f64>) -> f64 {
    let e = ce.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ci.iter().fold(e, |m, v| m.max(-v))
}

fn is_finite(v: f64, ce: &DVector<f64>, ci: &DVector<f64>) -> bool {
    v.is_finite() && ce.iter().all(|x| x.is_finite()) && ci.iter().all(|x| x.is_finite())
}

struct Subproblem {
    a_in: DMatrix<f64>,
    n_general: usize,
}

impl Subproblem {
    /// General inequality rows followed by one row per finite bound.
    fn new(pt: &Point, boxes: &Boxes) -> Self {
        let n = pt.z.len();
        let m = pt.ji.nrows();
        let mut a_in = DMatrix::zeros(m + boxes.len(), n);
        if m > 0 {
            a_in.view_mut((0, 0), (m, n)).copy_from(&pt.ji);
        }
        for (k, &(i, _)) in boxes.lower.iter().enumerate() {
            a_in[(m + k, i)] = 1.0;
        }
        for (k, &(i, _)) in boxes.upper.iter().enumerate() {
            a_in[(m + boxes.lower.len() + k, i)] = -1.0;
        }
        Self { a_in, n_general: m }
    }

    fn rhs(&self, z: &DVector<f64>, ci: &DVector<f64>, boxes: &Boxes) -> DVector<f64> {
        let m = self.n_general;
        let mut b = DVector::zeros(m + boxes.len());
        for i in 0..m {
            b[i] = -ci[i];
        }
        for (k, &(i, v)) in boxes.lower.iter().enumerate() {
            b[m + k] = v - z[i];
        }
        for (k, &(i, v)) in boxes.upper.iter().enumerate() {
            b[m + boxes.lower.len() + k] = z[i] - v;
        }
        b
    }

    fn solve(
        &self,
        h: &DMatrix<f64>,
        g: &DVector<f64>,
        je: &DMatrix<f64>,
        b_eq: &DVector<f64>,
        b_in: &DVector<f64>,
    ) -> Result<QpSolution, QpError> {
        qp::solve(
            &QpProblem { h, g, a_eq: je, b_eq, a_in: &self.a_in, b_in },
            &QpOptions::default(),
        )
    }
}

struct Kkt {
    stationarity: f64,
    complementarity: f64,
}

impl Kkt {
    fn residual(&self) -> f64 {
        self.stationarity.max(self.complementarity)
    }
}

fn kkt_at(pt: &Point, sub: &Subproblem, boxes: &Boxes, sol: &QpSolution) -> Kkt {
    let mut r = pt.g.clone();
    if pt.je.nrows() > 0 {
        r -= pt.je.transpose() * &sol.lambda_eq;
    }
    r -= sub.a_in.transpose() * &sol.mu_in;
    let stationarity = r.amax();
    let m = sub.n_general;
    let mut comp = 0.0f64;
    for i in 0..m {
        comp = comp.max((sol.mu_in[i] * pt.ci[i]).abs());
    }
    for (k, &(i, v)) in boxes.lower.iter().enumerate() {
        comp = comp.max((sol.mu_in[m + k] * (pt.z[i] - v)).abs());
    }
    let off = m + boxes.lower.len();
    for (k, &(i, v)) in boxes.upper.iter().enumerate() {
        comp = comp.max((sol.mu_in[off + k] * (v - pt.z[i])).abs());
    }
    Kkt { stationarity, complementarity: comp }
}

fn lagrangian_gradient(pt: &Point, lambda: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
    let mut r = pt.g.clone();
    if pt.je.nrows() > 0 {
        r -= pt.je.transpose() * lambda;
    }
    if pt.ji.nrows() > 0 {
        r -= pt.ji.transpose() * mu.rows(0, pt.ji.nrows());
    }
    r
}

/// Powell-damped BFGS update. Returns false when the curvature pair was
/// negative.
fn bfgs_update(h: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) -> bool {
    let hs = &*h * s;
    let shs = s.dot(&hs);
    if shs <= 1e-16 * (1.0 + s.norm_squared()) {
        return true;
    }
    let sy = s.dot(y);
    let r = if sy >= 0.2 * shs {
        y.clone()
    } else {
        let theta = 0.8 * shs / (shs - sy);
        y * theta + &hs * (1.0 - theta)
    };
    let sr = s.dot(&r);
    if sr <= 0.0 {
        return sy > 0.0;
    }
    *h += &r * r.transpose() / sr - &hs * hs.transpose() / shs;
    // keep exact symmetry
    let ht = h.transpose();
    *h = (&*h + ht) * 0.5;
    sy > 0.0
}

fn failure(pt: &Point, iterations: usize, status: SolveStatus, msg: String, trace: Vec<IterationRecord>) -> SolveReport {
    SolveReport {
        z: pt.z.as_slice().to_vec(),
        objective: pt.f,
        kkt_residual: f64::INFINITY,
        violation: violation_inf(&pt.ce, &pt.ci),
        iterations,
        status,
        lambda_eq: vec![0.0; pt.ce.len()],
        mu_ineq: vec![0.0; pt.ci.len()],
        diagnostic: Some(msg),
        trace,
    }
}

fn evaluate<P: Nlp + ?Sized>(nlp: &P, z: DVector<f64>) -> Result<Point, String> {
    let (f, ce, ci) = eval_values(nlp, &z);
    if !is_finite(f, &ce, &ci) {
        return Err("non-finite function value".into());
    }
    let d = gradients(nlp, z.as_slice()).map_err(|e| e.to_string())?;
    Ok(Point { z, f, g: d.gradient, ce, je: d.eq_jacobian, ci, ji: d.ineq_jacobian })
}

pub fn solve<P: Nlp + ?Sized>(nlp: &P, z0: &[f64], opts: &SolveOptions) -> SolveReport {
    let n = nlp.n_vars();
    let (lb, ub) = nlp.bounds();
    let boxes = Boxes::new(&lb, &ub);
    let mut z = DVector::from_column_slice(z0);
    boxes.clip(&mut z);

    let h0 = nlp.hessian_hint().unwrap_or_else(|| DMatrix::identity(n, n));
    let mut hess = h0.clone();
    let mut neg_curvature = 0usize;
    let mut penalty = Penalty::new(nlp.n_eq(), nlp.n_ineq());
    let mut trace = Vec::new();

    let mut pt = match evaluate(nlp, z) {
        Ok(p) => p,
        Err(msg) => {
            let z = DVector::from_column_slice(z0);
            let (f, ce, ci) = eval_values(nlp, &z);
            let pt = Point { z, f, g: DVector::zeros(n), ce, je: DMatrix::zeros(0, n), ci, ji: DMatrix::zeros(0, n) };
            return failure(&pt, 0, SolveStatus::NumericalFailure, msg, trace);
        }
    };

    let mut last: Option<(QpSolution, Kkt)> = None;
    for iter in 0..opts.max_iter {
        let sub = Subproblem::new(&pt, &boxes);
        let b_in = sub.rhs(&pt.z, &pt.ci, &boxes);
        let b_eq = -&pt.ce;
        let sol = match sub.solve(&hess, &pt.g, &pt.je, &b_eq, &b_in) {
            Ok(s) => s,
            Err(QpError::NotPositiveDefinite) | Err(QpError::IterationLimit) if hess != h0 => {
                hess = h0.clone();
                match sub.solve(&hess, &pt.g, &pt.je, &b_eq, &b_in) {
                    Ok(s) => s,
                    Err(e) => {
                        return failure(&pt, iter, SolveStatus::NumericalFailure, format!("QP subproblem failed: {e:?}"), trace)
                    }
                }
            }
            Err(e) => {
                return failure(&pt, iter, SolveStatus::NumericalFailure, format!("QP subproblem failed: {e:?}"), trace)
            }
        };

        let kkt = kkt_at(&pt, &sub, &boxes, &sol);
        let viol = violation_inf(&pt.ce, &pt.ci);
        if kkt.residual() <= opts.tol_kkt && viol <= opts.tol_feas {
            return finish(pt, iter, SolveStatus::Converged, &sol, &kkt, trace);
        }

        let d = &sol.d;
        let step_norm = d.amax();
        let slack = sol.slack_sum();
        let elastic = slack > 1e-9 * (1.0 + pt.ci.amax());

        // merit weights: exact-penalty bound on the multipliers of rows that
        // the QP satisfied, plus sufficient decrease of the model
        let lin_eq = &pt.ce + &pt.je * d;
        let lin_in = &pt.ci + &pt.ji * d;
        penalty.update(&sol);
        let gd = pt.g.dot(d);
        let dhd = d.dot(&(&hess * d));
        let mut reduction = penalty.value(&pt.ce, &pt.ci) - penalty.value(&lin_eq, &lin_in);
        if reduction > 1e-14 {
            let need = (gd + 0.5 * dhd.max(0.0)) / (0.9 * reduction);
            if need > 1.0 {
                penalty.scale(1.5 * need);
                reduction *= 1.5 * need;
            }
        }
        let merit = pt.f + penalty.value(&pt.ce, &pt.ci);
        let dphi = gd - reduction;

        if elastic && step_norm <= 1e-12 * (1.0 + pt.z.amax()) {
            return failure(&pt, iter, SolveStatus::InfeasibleQp, "linearized constraints are inconsistent at a stationary point of the violation".into(), trace);
        }

        // line search
        let eta = 1e-4;
        let phi_at = |zt: &DVector<f64>| -> f64 {
            let (f, ce, ci) = eval_values(nlp, zt);
            if !is_finite(f, &ce, &ci) {
                return f64::INFINITY;
            }
            f + penalty.value(&ce, &ci)
        };
        let mut accepted: Option<(DVector<f64>, f64, f64)> = None;
        // rounding level of the merit value; decreases below it are not measurable
        let noise = 8.0 * f64::EPSILON * (1.0 + merit.abs());
        let mut zt = &pt.z + d;
        boxes.clip(&mut zt);
        let full = phi_at(&zt);
        let small = dphi.abs() <= noise / eta;
        let acceptable = |val: f64, alpha: f64| val <= merit + eta * alpha * dphi || (small && val <= merit + noise);
        if acceptable(full, 1.0) {
            accepted = Some((zt, 1.0, full));
        } else if !elastic {
            // second-order correction
            let (_, ce_t, ci_t) = eval_values(nlp, &zt);
            if is_finite(0.0, &ce_t, &ci_t) {
                let b_eq_soc = &pt.je * d - &ce_t;
                let mut b_in_soc = b_in.clone();
                let jd = &pt.ji * d;
                for i in 0..sub.n_general {
                    b_in_soc[i] = jd[i] - ci_t[i];
                }
                if let Ok(soc) = sub.solve(&hess, &pt.g, &pt.je, &b_eq_soc, &b_in_soc) {
                    if soc.slack_sum() == 0.0 {
                        let mut zs = &pt.z + &soc.d;
                        boxes.clip(&mut zs);
                        let val = phi_at(&zs);
                        if acceptable(val, 1.0) {
                            accepted = Some((zs, 1.0, val));
                        }
                    }
                }
            }
        }
        if accepted.is_none() {
            let mut alpha = 0.5;
            while alpha >= 1e-10 {
                let mut zt = &pt.z + d * alpha;
                boxes.clip(&mut zt);
                let val = phi_at(&zt);
                if acceptable(val, alpha) {
                    accepted = Some((zt, alpha, val));
                    break;
                }
                alpha *= 0.5;
            }
        }
        let Some((z_new, alpha, merit_next)) = accepted else {
            if hess != h0 {
                hess = h0.clone();
                neg_curvature = 0;
                last = Some((sol, kkt));
                continue;
            }
            let status = if elastic { SolveStatus::InfeasibleQp } else { SolveStatus::NumericalFailure };
            return failure(&pt, iter, status, "line search failed to decrease the merit function".into(), trace);
        };

        trace.push(IterationRecord {
            iter,
            objective: pt.f,
            kkt: kkt.residual(),
            violation: viol,
            step_norm,
            alpha,
            penalty: penalty.max(),
            merit,
            merit_next,
            qp_iterations: sol.iterations,
            elastic_slack: slack,
        });

        let next = match evaluate(nlp, z_new) {
            Ok(p) => p,
            Err(msg) => return failure(&pt, iter + 1, SolveStatus::NumericalFailure, msg, trace),
        };
        let s = &next.z - &pt.z;
        let y = lagrangian_gradient(&next, &sol.lambda_eq, &sol.mu_in) - lagrangian_gradient(&pt, &sol.lambda_eq, &sol.mu_in);
        if bfgs_update(&mut hess, &s, &y) {
            neg_curvature = 0;
        } else {
            neg_curvature += 1;
            if neg_curvature >= 5 {
                hess = h0.clone();
                neg_curvature = 0;
            }
        }
        pt = next;
        last = Some((sol, kkt));
    }

    // iteration cap: report with the latest multiplier estimate
    let sub = Subproblem::new(&pt, &boxes);
    let b_in = sub.rhs(&pt.z, &pt.ci, &boxes);
    let b_eq = -&pt.ce;
    let (sol, kkt) = match sub.solve(&hess, &pt.g, &pt.je, &b_eq, &b_in) {
        Ok(s) => {
            let k = kkt_at(&pt, &sub, &boxes, &s);
            (s, k)
        }
        Err(_) => match last {
            Some(l) => l,
            None => return failure(&pt, opts.max_iter, SolveStatus::MaxIter, "iteration limit".into(), trace),
        },
    };
    let viol = violation_inf(&pt.ce, &pt.ci);
    let status = if kkt.residual() <= opts.tol_kkt && viol <= opts.tol_feas {
        SolveStatus::Converged
    } else if sol.slack_sum() > 1e-9 && viol > opts.tol_feas {
        SolveStatus::InfeasibleQp
    } else {
        SolveStatus::MaxIter
    };
    finish(pt, opts.max_iter, status, &sol, &kkt, trace)
}

fn finish(pt: Point, iterations: usize, status: SolveStatus, sol: &QpSolution, kkt: &Kkt, trace: Vec<IterationRecord>) -> SolveReport {
    let m = pt.ci.len();
    SolveReport {
        violation: violation_inf(&pt.ce, &pt.ci),
        z: pt.z.as_slice().to_vec(),
        objective: pt.f,
        kkt_residual: kkt.residual(),
        iterations,
        status,
        lambda_eq: sol.lambda_eq.as_slice().to_vec(),
        mu_ineq: sol.mu_in.as_slice()[..m].to_vec(),
        diagnostic: None,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::super::Nlp;
    use super::*;

    /// min 1/2 z'Qz - b'z, optional linear inequalities `a z >= c`.
    struct Quadratic {
        q: DMatrix<f64>,
        b: DVector<f64>,
        a: DMatrix<f64>,
        c: DVector<f64>,
        lb: Vec<f64>,
        ub: Vec<f64>,
        exact_hessian: bool,
    }

    impl Nlp for Quadratic {
        fn n_vars(&self) -> usize {
            self.b.len()
        }
        fn n_eq(&self) -> usize {
            0
        }
        fn n_ineq(&self) -> usize {
            self.c.len()
        }
        fn objective(&self, z: &[f64]) -> f64 {
            let z = DVector::from_column_slice(z);
            0.5 * z.dot(&(&self.q * &z)) - self.b.dot(&z)
        }
        fn gradient(&self, z: &[f64]) -> DVector<f64> {
            &self.q * DVector::from_column_slice(z) - &self.b
        }
        fn eq_constraints(&self, _: &[f64]) -> DVector<f64> {
            DVector::zeros(0)
        }
        fn eq_jacobian(&self, _: &[f64]) -> DMatrix<f64> {
            DMatrix::zeros(0, self.b.len())
        }
        fn ineq_constraints(&self, z: &[f64]) -> DVector<f64> {
            &self.a * DVector::from_column_slice(z) - &self.c
        }
        fn ineq_jacobian(&self, _: &[f64]) -> DMatrix<f64> {
            self.a.clone()
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (self.lb.clone(), self.ub.clone())
        }
        fn hessian_hint(&self) -> Option<DMatrix<f64>> {
            self.exact_hessian.then(|| self.q.clone())
        }
    }

    fn free(n: usize) -> (Vec<f64>, Vec<f64>) {
        (vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    #[test]
    fn unconstrained_quadratic_few_iterations() {
        let n = 4;
        let q = DMatrix::from_fn(n, n, |i, j| if i == j { 2.0 + i as f64 } else { 0.3 });
        let b = DVector::from_fn(n, |i, _| i as f64 - 1.0);
        let (lb, ub) = free(n);
        let p = Quadratic { q: q.clone(), b: b.clone(), a: DMatrix::zeros(0, n), c: DVector::zeros(0), lb, ub, exact_hessian: true };
        let r = solve(&p, &[0.0; 4], &SolveOptions { tol_kkt: 1e-10, ..Default::default() });
        assert_eq!(r.status, SolveStatus::Converged);
        assert!(r.iterations <= n + 1, "{} iterations", r.iterations);
        let exact = q.lu().solve(&b).unwrap();
        for i in 0..n {
            assert!((r.z[i] - exact[i]).abs() < 1e-9);
        }
        assert!(r.kkt_residual <= 1e-10);
    }

    #[test]
    fn unconstrained_quadratic_quasi_newton() {
        let n = 4;
        let q = DMatrix::from_fn(n, n, |i, j| if i == j { 2.0 + i as f64 } else { 0.3 });
        let b = DVector::from_fn(n, |i, _| i as f64 - 1.0);
        let (lb, ub) = free(n);
        let p = Quadratic { q: q.clone(), b: b.clone(), a: DMatrix::zeros(0, n), c: DVector::zeros(0), lb, ub, exact_hessian: false };
        let r = solve(&p, &[0.0; 4], &SolveOptions { tol_kkt: 1e-10, ..Default::default() });
        assert_eq!(r.status, SolveStatus::Converged);
        let exact = q.lu().solve(&b).unwrap();
        for i in 0..n {
            assert!((r.z[i] - exact[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn half_plane_constraint() {
        let (lb, ub) = free(2);
        let p = Quadratic {
            q: DMatrix::identity(2, 2) * 2.0,
            b: DVector::zeros(2),
            a: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            c: DVector::from_element(1, 1.0),
            lb,
            ub,
            exact_hessian: false,
        };
        let r = solve(&p, &[3.0, -1.0], &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Converged);
        assert!((r.z[0] - 0.5).abs() < 1e-8 && (r.z[1] - 0.5).abs() < 1e-8);
        assert!((r.mu_ineq[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bounds_are_respected() {
        let p = Quadratic {
            q: DMatrix::identity(2, 2),
            b: DVector::from_row_slice(&[5.0, -5.0]),
            a: DMatrix::zeros(0, 2),
            c: DVector::zeros(0),
            lb: vec![-1.0, -1.0],
            ub: vec![1.0, 1.0],
            exact_hessian: false,
        };
        let r = solve(&p, &[10.0, 0.0], &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Converged);
        assert!((r.z[0] - 1.0).abs() < 1e-12 && (r.z[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_constraints_flagged() {
        let (lb, ub) = free(1);
        let p = Quadratic {
            q: DMatrix::identity(1, 1),
            b: DVector::zeros(1),
            a: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            c: DVector::from_row_slice(&[1.0, 1.0]),
            lb,
            ub,
            exact_hessian: false,
        };
        let r = solve(&p, &[0.0], &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::InfeasibleQp);
    }

    /// Rosenbrock-type problem on a circle: min (1-x)^2 + 10(y-x^2)^2 s.t. x^2+y^2 = 1.
    struct Banana;

    impl Nlp for Banana {
        fn n_vars(&self) -> usize {
            2
        }
        fn n_eq(&self) -> usize {
            1
        }
        fn n_ineq(&self) -> usize {
            0
        }
        fn objective(&self, z: &[f64]) -> f64 {
            (1.0 - z[0]).powi(2) + 10.0 * (z[1] - z[0] * z[0]).powi(2)
        }
        fn gradient(&self, z: &[f64]) -> DVector<f64> {
            let t = z[1] - z[0] * z[0];
            DVector::from_row_slice(&[-2.0 * (1.0 - z[0]) - 40.0 * z[0] * t, 20.0 * t])
        }
        fn eq_constraints(&self, z: &[f64]) -> DVector<f64> {
            DVector::from_element(1, z[0] * z[0] + z[1] * z[1] - 1.0)
        }
        fn eq_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
            DMatrix::from_row_slice(1, 2, &[2.0 * z[0], 2.0 * z[1]])
        }
        fn ineq_constraints(&self, _: &[f64]) -> DVector<f64> {
            DVector::zeros(0)
        }
        fn ineq_jacobian(&self, _: &[f64]) -> DMatrix<f64> {
            DMatrix::zeros(0, 2)
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            free(2)
        }
    }

    #[test]
    fn nonlinear_equality_with_monotone_merit() {
        let r = solve(&Banana, &[0.5, 0.5], &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Converged, "{:?}", r.diagnostic);
        assert!((r.z[0].powi(2) + r.z[1].powi(2) - 1.0).abs() < 1e-6);
        for rec in &r.trace {
            assert!(rec.merit_next <= rec.merit + 1e-12);
        }
        // determinism
        let again = solve(&Banana, &[0.5, 0.5], &SolveOptions::default());
        assert_eq!(r.z, again.z);
        assert_eq!(r.iterations, again.iterations);
    }

    #[test]
    fn trace_lines() {
        let r = solve(&Banana, &[0.5, 0.5], &SolveOptions::default());
        let mut buf = Vec::new();
        write_trace(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), r.trace.len());
        assert_eq!(text.lines().next().unwrap().split_whitespace().count(), 4);
    }
}
