//! One receding-horizon instance of the robust CBF-constrained optimal
//! control problem, transcribed by multiple shooting.
//!
//! Decision vector `z = [x_1 .. x_N, u_0 .. u_{N-1}]` (states first, six per
//! stage, then three inputs per stage). `x_0` is the measurement and is not a
//! variable. Dynamics are equality rows, the input box is the variable bounds,
//! and every obstacle and barrier-enforced border contributes one discrete CBF
//! row per stage `k = 0..N-1`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Disturbance, VesselModel, NU, NX};
use crate::error::{Error, Result};
use crate::flow::DisturbanceGrid;
use crate::nlp::{self, Nlp, SolveOptions, SolveReport};
use crate::safety::{border_h, border_h_grad, obstacle_h, obstacle_h_grad, BorderLine, CbfParams, Obstacle};

/// Diagonals of the state, terminal and input-increment weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weights {
    pub q: [f64; NX],
    pub q_terminal: [f64; NX],
    pub r: [f64; NU],
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            q: [2.0, 2.0, 2.0, 1.0, 1.0, 1.0],
            q_terminal: [3.0, 3.0, 3.0, 1.0, 1.0, 1.0],
            r: [0.1, 0.1, 0.01],
        }
    }
}

impl Weights {
    pub fn validate(&self) -> Result<()> {
        let all = self.q.iter().chain(&self.q_terminal).chain(&self.r);
        if all.into_iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputBounds {
    pub min: [f64; NU],
    pub max: [f64; NU],
}

impl InputBounds {
    pub fn symmetric(limit: f64) -> Self {
        Self { min: [-limit; NU], max: [limit; NU] }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..NU {
            if !(self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i]) {
                return Err(Error::Validation(format!(
                    "input bounds need min < max on axis {i}, got [{}, {}]",
                    self.min[i], self.max[i]
                )));
            }
        }
        Ok(())
    }

    pub fn clamp(&self, u: [f64; NU]) -> [f64; NU] {
        std::array::from_fn(|i| u[i].clamp(self.min[i], self.max[i]))
    }

    pub fn contains(&self, u: &[f64; NU]) -> bool {
        (0..NU).all(|i| u[i] >= self.min[i] && u[i] <= self.max[i])
    }
}

/// Input with the in-plane disturbance removed: `u - [w_x, w_y, 0]`.
fn effective(u: &[f64; NU], omega: &Disturbance) -> [f64; NU] {
    [u[0] - omega[0], u[1] - omega[1], u[2]]
}

fn quad_diag<const K: usize>(w: &[f64; K], e: &[f64; K]) -> f64 {
    (0..K).map(|i| w[i] * e[i] * e[i]).sum()
}

fn input_increment(u: &[f64; NU], u_prev_eff: &[f64; NU], omega: &Disturbance, omega_prev: &Disturbance) -> [f64; NU] {
    let a = effective(u, omega);
    let b = effective(u_prev_eff, omega_prev);
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn stage_cost(
    x: &[f64; NX],
    u: &[f64; NU],
    u_prev_eff: &[f64; NU],
    omega: &Disturbance,
    omega_prev: &Disturbance,
    w: &Weights,
    r_d: &[f64; NX],
) -> f64 {
    let e: [f64; NX] = std::array::from_fn(|i| x[i] - r_d[i]);
    quad_diag(&w.q, &e) + quad_diag(&w.r, &input_increment(u, u_prev_eff, omega, omega_prev))
}

pub fn terminal_cost(xn: &[f64; NX], w: &Weights, r_d: &[f64; NX]) -> f64 {
    let e: [f64; NX] = std::array::from_fn(|i| xn[i] - r_d[i]);
    quad_diag(&w.q_terminal, &e)
}

/// Grid indices `(i, j)` of the stage-cost maximizer. Strict improvement in
/// row-major order, so ties go to the first point visited.
#[allow(clippy::too_many_arguments)]
pub fn worst_case_index(
    x: &[f64; NX],
    u: &[f64; NU],
    u_prev_eff: &[f64; NU],
    omega_prev: &Disturbance,
    grid: &DisturbanceGrid,
    w: &Weights,
    r_d: &[f64; NX],
) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_cost = stage_cost(x, u, u_prev_eff, &grid.point(0, 0), omega_prev, w, r_d);
    for i in 0..grid.levels_x.len() {
        for j in 0..grid.levels_y.len() {
            let c = stage_cost(x, u, u_prev_eff, &grid.point(i, j), omega_prev, w, r_d);
            if c > best_cost {
                best_cost = c;
                best = (i, j);
            }
        }
    }
    best
}

pub fn worst_case_omega(
    x: &[f64; NX],
    u: &[f64; NU],
    u_prev_eff: &[f64; NU],
    omega_prev: &Disturbance,
    grid: &DisturbanceGrid,
    w: &Weights,
    r_d: &[f64; NX],
) -> Disturbance {
    let (i, j) = worst_case_index(x, u, u_prev_eff, omega_prev, grid, w, r_d);
    grid.point(i, j)
}

/// Extra constraints `c(x) >= 0` imposed on every predicted state `x_1..x_N`.
pub trait StageConstraint: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fill `values[r]` and the state gradient `grads[r]` for each row.
    fn eval(&self, x: &[f64; NX], values: &mut [f64], grads: &mut [[f64; NX]]);
}

/// Pure state constraints `border_h(P) >= 0`, with no decay term.
#[derive(Debug, Clone)]
pub struct HardBorders {
    pub lines: Vec<BorderLine>,
    pub half_diagonal: f64,
}

impl StageConstraint for HardBorders {
    fn len(&self) -> usize {
        self.lines.len()
    }

    fn eval(&self, x: &[f64; NX], values: &mut [f64], grads: &mut [[f64; NX]]) {
        for (r, line) in self.lines.iter().enumerate() {
            let n = line.a.hypot(line.b);
            values[r] = (line.a * x[0] + line.b * x[1] + line.c) / n - self.half_diagonal;
            grads[r] = [line.a / n, line.b / n, 0.0, 0.0, 0.0, 0.0];
        }
    }
}

#[derive(Clone)]
pub struct OcpProblem {
    pub horizon: usize,
    pub ts: f64,
    pub x0: [f64; NX],
    pub r_d: [f64; NX],
    /// Input applied at the previous plant step.
    pub u_prev: [f64; NU],
    /// Disturbance paired with `u_prev`.
    pub omega_prev: Disturbance,
    pub weights: Weights,
    pub bounds: InputBounds,
    pub obstacles: Vec<Obstacle>,
    /// Borders enforced through CBF rows.
    pub borders: Vec<BorderLine>,
    pub cbf: CbfParams,
    /// Per-stage disturbance used in both dynamics and cost, length `horizon`.
    pub omega_seq: Vec<Disturbance>,
    pub extra: Vec<Arc<dyn StageConstraint>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstraintCounts {
    pub equality: usize,
    /// Two rows per input component and stage, carried as variable bounds.
    pub input_bound: usize,
    pub cbf: usize,
    pub extra: usize,
}

/// The transcribed problem, ready for [`nlp::solve`].
pub struct OcpNlp<'a> {
    p: &'a OcpProblem,
    model: &'a VesselModel,
    r_a: f64,
    obstacle_scale: Vec<f64>,
    border_scale: Vec<f64>,
    h0_obstacle: Vec<f64>,
    h0_border: Vec<f64>,
    extra_rows: usize,
    hessian: DMatrix<f64>,
}

pub fn assemble<'a>(p: &'a OcpProblem, model: &'a VesselModel) -> Result<OcpNlp<'a>> {
    if p.horizon == 0 {
        return Err(Error::Validation("horizon must be at least 1".into()));
    }
    if p.omega_seq.len() != p.horizon {
        return Err(Error::Dimension { what: "omega_seq", expected: p.horizon, got: p.omega_seq.len() });
    }
    if !(p.ts.is_finite() && p.ts > 0.0) {
        return Err(Error::Validation(format!("sample time must be positive, got {}", p.ts)));
    }
    if !p.x0.iter().chain(&p.r_d).chain(&p.u_prev).all(|v| v.is_finite()) {
        return Err(Error::Validation("non-finite initial state, target or previous input".into()));
    }
    p.weights.validate()?;
    p.bounds.validate()?;
    p.cbf.validate()?;
    let params = model.params();
    let pos0 = [p.x0[0], p.x0[1]];
    let h0_obstacle: Vec<f64> = p.obstacles.iter().map(|o| obstacle_h(pos0, o, params.r_a)).collect();
    let h0_border: Vec<f64> = p.borders.iter().map(|b| border_h(pos0, b, params)).collect();
    let scale = |h: &f64| 1.0 / h.abs().max(1.0);
    let extra_rows = p.extra.iter().map(|c| c.len()).sum();
    let mut nlp = OcpNlp {
        p,
        model,
        r_a: params.r_a,
        obstacle_scale: h0_obstacle.iter().map(scale).collect(),
        border_scale: h0_border.iter().map(scale).collect(),
        h0_obstacle,
        h0_border,
        extra_rows,
        hessian: DMatrix::zeros(0, 0),
    };
    nlp.hessian = nlp.cost_hessian();
    Ok(nlp)
}

impl<'a> OcpNlp<'a> {
    pub fn counts(&self) -> ConstraintCounts {
        let n = self.p.horizon;
        ConstraintCounts {
            equality: NX * n,
            input_bound: 2 * NU * n,
            cbf: n * (self.p.obstacles.len() + self.p.borders.len()),
            extra: n * self.extra_rows,
        }
    }

    fn n_states(&self) -> usize {
        NX * self.p.horizon
    }

    /// `x_k` for `k = 0..=N`.
    pub fn state(&self, z: &[f64], k: usize) -> [f64; NX] {
        if k == 0 {
            self.p.x0
        } else {
            let o = NX * (k - 1);
            std::array::from_fn(|i| z[o + i])
        }
    }

    pub fn input(&self, z: &[f64], k: usize) -> [f64; NU] {
        let o = self.n_states() + NU * k;
        std::array::from_fn(|i| z[o + i])
    }

    fn state_offset(k: usize) -> Option<usize> {
        (k > 0).then(|| NX * (k - 1))
    }

    fn input_offset(&self, k: usize) -> usize {
        self.n_states() + NU * k
    }

    pub fn pack(&self, states: &[[f64; NX]], inputs: &[[f64; NU]]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.n_vars());
        for s in &states[1..] {
            z.extend_from_slice(s);
        }
        for u in inputs {
            z.extend_from_slice(u);
        }
        z
    }

    pub fn unpack(&self, z: &[f64]) -> (Vec<[f64; NX]>, Vec<[f64; NU]>) {
        let n = self.p.horizon;
        ((0..=n).map(|k| self.state(z, k)).collect(), (0..n).map(|k| self.input(z, k)).collect())
    }

    fn prev_input(&self, z: &[f64], k: usize) -> ([f64; NU], Disturbance) {
        if k == 0 {
            (self.p.u_prev, self.p.omega_prev)
        } else {
            (self.input(z, k - 1), self.p.omega_seq[k - 1])
        }
    }

    /// Stage costs `L_k`, `k = 0..N-1`, under the fixed disturbance sequence.
    pub fn stage_costs(&self, z: &[f64]) -> Vec<f64> {
        let p = self.p;
        (0..p.horizon)
            .map(|k| {
                let (up, wp) = self.prev_input(z, k);
                stage_cost(&self.state(z, k), &self.input(z, k), &up, &p.omega_seq[k], &wp, &p.weights, &p.r_d)
            })
            .collect()
    }

    /// Constant Hessian of the objective.
    fn cost_hessian(&self) -> DMatrix<f64> {
        let n = self.p.horizon;
        let w = &self.p.weights;
        let mut h = DMatrix::zeros(self.n_vars(), self.n_vars());
        for k in 1..=n {
            let o = NX * (k - 1);
            let diag = if k == n { &w.q_terminal } else { &w.q };
            for i in 0..NX {
                h[(o + i, o + i)] = 2.0 * diag[i];
            }
        }
        for k in 0..n {
            let o = self.input_offset(k);
            for i in 0..NU {
                h[(o + i, o + i)] += 2.0 * w.r[i];
                if k + 1 < n {
                    let q = self.input_offset(k + 1);
                    h[(q + i, q + i)] += 2.0 * w.r[i];
                    h[(o + i, q + i)] -= 2.0 * w.r[i];
                    h[(q + i, o + i)] -= 2.0 * w.r[i];
                }
            }
        }
        // regularize zero weights so the initial quasi-Newton matrix is definite
        for i in 0..h.nrows() {
            if h[(i, i)] < 1e-6 {
                h[(i, i)] += 1e-6;
            }
        }
        h
    }

    fn obstacle_rows(&self, pos_now: [f64; 2], pos_next: [f64; 2], k: usize, out: &mut Vec<f64>) {
        for (i, o) in self.p.obstacles.iter().enumerate() {
            let h_now = if k == 0 { self.h0_obstacle[i] } else { obstacle_h(pos_now, o, self.r_a) };
            let h_next = obstacle_h(pos_next, o, self.r_a);
            out.push(self.obstacle_scale[i] * (h_next - (1.0 - self.p.cbf.gamma_obstacle) * h_now));
        }
    }

    fn border_rows(&self, pos_now: [f64; 2], pos_next: [f64; 2], k: usize, out: &mut Vec<f64>) {
        let params = self.model.params();
        for (j, b) in self.p.borders.iter().enumerate() {
            let h_now = if k == 0 { self.h0_border[j] } else { border_h(pos_now, b, params) };
            let h_next = border_h(pos_next, b, params);
            out.push(self.border_scale[j] * (h_next - (1.0 - self.p.cbf.gamma_border) * h_now));
        }
    }
}

fn pos(x: &[f64; NX]) -> [f64; 2] {
    [x[0], x[1]]
}

impl Nlp for OcpNlp<'_> {
    fn n_vars(&self) -> usize {
        (NX + NU) * self.p.horizon
    }

    fn n_eq(&self) -> usize {
        NX * self.p.horizon
    }

    fn n_ineq(&self) -> usize {
        let c = self.counts();
        c.cbf + c.extra
    }

    fn objective(&self, z: &[f64]) -> f64 {
        let p = self.p;
        self.stage_costs(z).iter().sum::<f64>() + terminal_cost(&self.state(z, p.horizon), &p.weights, &p.r_d)
    }

    fn gradient(&self, z: &[f64]) -> DVector<f64> {
        let p = self.p;
        let w = &p.weights;
        let n = p.horizon;
        let mut g = DVector::zeros(self.n_vars());
        for k in 1..=n {
            let x = self.state(z, k);
            let diag = if k == n { &w.q_terminal } else { &w.q };
            let o = NX * (k - 1);
            for i in 0..NX {
                g[o + i] = 2.0 * diag[i] * (x[i] - p.r_d[i]);
            }
        }
        for k in 0..n {
            let (up, wp) = self.prev_input(z, k);
            let du = input_increment(&self.input(z, k), &up, &p.omega_seq[k], &wp);
            let o = self.input_offset(k);
            for i in 0..NU {
                g[o + i] += 2.0 * w.r[i] * du[i];
                if k > 0 {
                    g[o - NU + i] -= 2.0 * w.r[i] * du[i];
                }
            }
        }
        g
    }

    fn eq_constraints(&self, z: &[f64]) -> DVector<f64> {
        let p = self.p;
        let mut c = DVector::zeros(self.n_eq());
        for k in 0..p.horizon {
            let next = self.model.step_array(&self.state(z, k), &self.input(z, k), &p.omega_seq[k], p.ts);
            let x1 = self.state(z, k + 1);
            for i in 0..NX {
                c[NX * k + i] = x1[i] - next[i];
            }
        }
        c
    }

    fn eq_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let p = self.p;
        let mut j = DMatrix::zeros(self.n_eq(), self.n_vars());
        for k in 0..p.horizon {
            let (_, a, b) = self.model.step_jacobian(&self.state(z, k), &self.input(z, k), &p.omega_seq[k], p.ts);
            let r = NX * k;
            for i in 0..NX {
                j[(r + i, NX * k + i)] = 1.0;
            }
            if let Some(o) = Self::state_offset(k) {
                for i in 0..NX {
                    for l in 0..NX {
                        j[(r + i, o + l)] = -a[(i, l)];
                    }
                }
            }
            let o = self.input_offset(k);
            for i in 0..NX {
                for l in 0..NU {
                    j[(r + i, o + l)] = -b[(i, l)];
                }
            }
        }
        j
    }

    fn ineq_constraints(&self, z: &[f64]) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_ineq());
        let mut vals = vec![0.0; self.extra_rows];
        let mut grads = vec![[0.0; NX]; self.extra_rows];
        for k in 0..self.p.horizon {
            let now = self.state(z, k);
            let next = self.state(z, k + 1);
            self.obstacle_rows(pos(&now), pos(&next), k, &mut out);
            self.border_rows(pos(&now), pos(&next), k, &mut out);
            let mut off = 0;
            for c in &self.p.extra {
                let m = c.len();
                c.eval(&next, &mut vals[off..off + m], &mut grads[off..off + m]);
                off += m;
            }
            out.extend_from_slice(&vals);
        }
        DVector::from_vec(out)
    }

    fn ineq_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let p = self.p;
        let mut j = DMatrix::zeros(self.n_ineq(), self.n_vars());
        let mut vals = vec![0.0; self.extra_rows];
        let mut grads = vec![[0.0; NX]; self.extra_rows];
        let mut row = 0;
        for k in 0..p.horizon {
            let now = self.state(z, k);
            let next = self.state(z, k + 1);
            let o_next = NX * k;
            let o_now = Self::state_offset(k);
            for (i, o) in p.obstacles.iter().enumerate() {
                let s = self.obstacle_scale[i];
                let gn = obstacle_h_grad(pos(&next), o, self.r_a);
                j[(row, o_next)] = s * gn[0];
                j[(row, o_next + 1)] = s * gn[1];
                if let Some(oc) = o_now {
                    let gc = obstacle_h_grad(pos(&now), o, self.r_a);
                    let f = -(1.0 - p.cbf.gamma_obstacle) * s;
                    j[(row, oc)] = f * gc[0];
                    j[(row, oc + 1)] = f * gc[1];
                }
                row += 1;
            }
            for (jj, b) in p.borders.iter().enumerate() {
                let s = self.border_scale[jj];
                let g = border_h_grad(b);
                j[(row, o_next)] = s * g[0];
                j[(row, o_next + 1)] = s * g[1];
                if let Some(oc) = o_now {
                    let f = -(1.0 - p.cbf.gamma_border) * s;
                    j[(row, oc)] = f * g[0];
                    j[(row, oc + 1)] = f * g[1];
                }
                row += 1;
            }
            let mut off = 0;
            for c in &p.extra {
                let m = c.len();
                c.eval(&next, &mut vals[off..off + m], &mut grads[off..off + m]);
                off += m;
            }
            for g in &grads {
                for l in 0..NX {
                    j[(row, o_next + l)] = g[l];
                }
                row += 1;
            }
        }
        j
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.p.horizon;
        let mut lb = vec![f64::NEG_INFINITY; self.n_vars()];
        let mut ub = vec![f64::INFINITY; self.n_vars()];
        for k in 0..n {
            let o = self.input_offset(k);
            lb[o..o + NU].copy_from_slice(&self.p.bounds.min);
            ub[o..o + NU].copy_from_slice(&self.p.bounds.max);
        }
        (lb, ub)
    }

    fn hessian_hint(&self) -> Option<DMatrix<f64>> {
        Some(self.hessian.clone())
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub states: Vec<[f64; NX]>,
    pub inputs: Vec<[f64; NU]>,
    pub objective: f64,
    /// Stage costs `L_k` at the solution.
    pub worst_case_cost_trace: Vec<f64>,
    pub report: SolveReport,
}

impl OcpSolution {
    pub fn status(&self) -> nlp::SolveStatus {
        self.report.status
    }
}

/// Initial guess holding `x0` over the horizon with inputs at zero (clamped
/// into the box).
pub fn hold_guess(p: &OcpProblem) -> (Vec<[f64; NX]>, Vec<[f64; NU]>) {
    (vec![p.x0; p.horizon + 1], vec![p.bounds.clamp([0.0; NU]); p.horizon])
}

/// Shift a previous solution one stage forward, repeating the last entries,
/// and re-anchor it at `x0`.
pub fn shifted_guess(prev: &OcpSolution, x0: [f64; NX]) -> (Vec<[f64; NX]>, Vec<[f64; NU]>) {
    let mut states: Vec<[f64; NX]> = prev.states[1..].to_vec();
    states.push(*prev.states.last().unwrap());
    states[0] = x0;
    let mut inputs: Vec<[f64; NU]> = prev.inputs[1..].to_vec();
    inputs.push(*prev.inputs.last().unwrap());
    (states, inputs)
}

pub fn solve_ocp(
    p: &OcpProblem,
    model: &VesselModel,
    guess: (&[[f64; NX]], &[[f64; NU]]),
    opts: &SolveOptions,
) -> Result<OcpSolution> {
    let nlp = assemble(p, model)?;
    let (gs, gu) = guess;
    if gs.len() != p.horizon + 1 {
        return Err(Error::Dimension { what: "state guess", expected: p.horizon + 1, got: gs.len() });
    }
    if gu.len() != p.horizon {
        return Err(Error::Dimension { what: "input guess", expected: p.horizon, got: gu.len() });
    }
    let z0 = nlp.pack(gs, gu);
    let report = nlp::solve(&nlp, &z0, opts);
    let (states, inputs) = nlp.unpack(&report.z);
    Ok(OcpSolution {
        objective: report.objective,
        worst_case_cost_trace: nlp.stage_costs(&report.z),
        states,
        inputs,
        report,
    })
}

/// Worst-case disturbance per stage along a candidate trajectory. Stage `k`
/// pairs with the disturbance chosen for stage `k - 1`; stage 0 pairs with
/// `p.omega_prev`.
pub fn worst_case_sequence(
    p: &OcpProblem,
    states: &[[f64; NX]],
    inputs: &[[f64; NU]],
    grid: &DisturbanceGrid,
) -> Vec<Disturbance> {
    let mut seq = Vec::with_capacity(p.horizon);
    let mut u_prev = p.u_prev;
    let mut w_prev = p.omega_prev;
    for k in 0..p.horizon {
        let w = worst_case_omega(&states[k], &inputs[k], &u_prev, &w_prev, grid, &p.weights, &p.r_d);
        seq.push(w);
        u_prev = inputs[k];
        w_prev = w;
    }
    seq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::tests::params;
    use crate::flow::{make_grid, DisturbanceBounds};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::SQRT_2;

    fn e(i: usize) -> [f64; NX] {
        let mut v = [0.0; NX];
        v[i] = 1.0;
        v
    }

    fn grid(levels: usize) -> DisturbanceGrid {
        make_grid(&DisturbanceBounds { w_min: -SQRT_2, w_max: SQRT_2, levels })
    }

    fn model() -> VesselModel {
        VesselModel::new(params()).unwrap()
    }

    fn problem(n: usize, obstacles: usize, borders: usize) -> OcpProblem {
        let obs = [
            Obstacle { x: 6.0, y: 2.5, radius: 0.8 },
            Obstacle { x: 12.0, y: 3.5, radius: 0.8 },
            Obstacle { x: 18.0, y: 2.5, radius: 0.8 },
        ];
        let lines = [BorderLine { a: 0.0, b: 1.0, c: 0.0 }, BorderLine { a: 0.0, b: -1.0, c: 6.0 }];
        OcpProblem {
            horizon: n,
            ts: 0.2,
            x0: [0.0, 2.0, 0.0, 0.0, 0.0, 0.0],
            r_d: [25.0, 3.0, 0.0, 0.0, 0.0, 0.0],
            u_prev: [0.0; NU],
            omega_prev: [0.0; 3],
            weights: Weights::default(),
            bounds: InputBounds::symmetric(8.0),
            obstacles: obs[..obstacles].to_vec(),
            borders: lines[..borders].to_vec(),
            cbf: CbfParams { gamma_obstacle: 0.15, gamma_border: 0.9 },
            omega_seq: vec![[0.0; 3]; n],
            extra: Vec::new(),
        }
    }

    /// Naive `e' W e` with a full double loop over a dense diagonal matrix.
    fn quad_form_oracle(diag: &[f64], e: &[f64]) -> f64 {
        let n = diag.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let wij = if i == j { diag[i] } else { 0.0 };
                s += e[i] * wij * e[j];
            }
        }
        s
    }

    #[test]
    fn stage_cost_examples() {
        let w = Weights::default();
        let r = [25.0, 3.0, 0.0, 0.0, 0.0, 0.0];
        let u = [1.0, -2.0, 0.5];
        assert_eq!(stage_cost(&r, &u, &u, &[0.3, 0.1, 0.0], &[0.3, 0.1, 0.0], &w, &r), 0.0);
        let x: [f64; NX] = std::array::from_fn(|i| r[i] + e(0)[i]);
        assert!((stage_cost(&x, &u, &u, &[0.0; 3], &[0.0; 3], &w, &r) - 2.0).abs() < 1e-12);
        let c = stage_cost(&r, &[0.0; 3], &[0.0; 3], &[SQRT_2, SQRT_2, 0.0], &[0.0; 3], &w, &r);
        assert!((c - 0.4).abs() < 1e-12);
    }

    #[test]
    fn terminal_cost_examples() {
        let w = Weights::default();
        let r = [25.0, 3.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(terminal_cost(&r, &w, &r), 0.0);
        let x: [f64; NX] = std::array::from_fn(|i| r[i] + e(1)[i]);
        assert!((terminal_cost(&x, &w, &r) - 3.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x: [f64; NX] = std::array::from_fn(|_| rng.gen_range(-30.0..30.0));
            let d: Vec<f64> = (0..NX).map(|i| x[i] - r[i]).collect();
            let want = quad_form_oracle(&w.q_terminal, &d);
            assert!((terminal_cost(&x, &w, &r) - want).abs() <= 1e-12 * want.max(1.0));
        }
    }

    #[test]
    fn worst_case_symmetric_tie_goes_to_first_corner() {
        let w = Weights::default();
        let r = [0.0; NX];
        let u = [0.5, 0.5, 0.0];
        let g = grid(20);
        assert_eq!(worst_case_omega(&r, &u, &u, &[0.0; 3], &g, &w, &r), [-SQRT_2, -SQRT_2, 0.0]);
    }

    #[test]
    fn worst_case_moves_away_from_increment() {
        let w = Weights::default();
        let r = [0.0; NX];
        let g = grid(20);
        // u_prev_eff - u = +3 in surge: increment is -3, so a negative
        // disturbance level cancels it and the positive boundary maximizes
        let wc = worst_case_omega(&r, &[0.0, 0.0, 0.0], &[3.0, 0.0, 0.0], &[0.0; 3], &g, &w, &r);
        assert_eq!(wc[0], SQRT_2);
    }

    #[test]
    fn two_level_grid_is_brute_force() {
        let w = Weights::default();
        let r = [0.0; NX];
        let g = grid(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let u: [f64; NU] = std::array::from_fn(|_| rng.gen_range(-8.0..8.0));
            let up: [f64; NU] = std::array::from_fn(|_| rng.gen_range(-8.0..8.0));
            let wp = [rng.gen_range(-1.4..1.4), rng.gen_range(-1.4..1.4), 0.0];
            let got = worst_case_omega(&r, &u, &up, &wp, &g, &w, &r);
            let corners = [(-SQRT_2, -SQRT_2), (-SQRT_2, SQRT_2), (SQRT_2, -SQRT_2), (SQRT_2, SQRT_2)];
            let best = corners
                .iter()
                .map(|&(a, b)| stage_cost(&r, &u, &up, &[a, b, 0.0], &wp, &w, &r))
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(stage_cost(&r, &u, &up, &got, &wp, &w, &r), best);
        }
    }

    #[test]
    fn constraint_counts() {
        let m = model();
        let p = problem(1, 1, 2);
        let c = assemble(&p, &m).unwrap().counts();
        assert_eq!(c, ConstraintCounts { equality: 6, input_bound: 6, cbf: 3, extra: 0 });
        let p = problem(10, 3, 2);
        let nlp = assemble(&p, &m).unwrap();
        assert_eq!(nlp.counts(), ConstraintCounts { equality: 60, input_bound: 60, cbf: 50, extra: 0 });
        assert_eq!(nlp.n_vars(), 90);
        assert_eq!(nlp.n_ineq(), 50);
    }

    #[test]
    fn malformed_problem_rejected() {
        let m = model();
        let mut p = problem(4, 1, 2);
        p.omega_seq.pop();
        assert!(matches!(assemble(&p, &m), Err(Error::Dimension { what: "omega_seq", expected: 4, got: 3 })));
    }

    fn random_z(nlp: &OcpNlp<'_>, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = nlp.p.horizon;
        let mut z = Vec::new();
        for _ in 0..n {
            z.extend_from_slice(&[
                rng.gen_range(0.0..25.0),
                rng.gen_range(0.5..5.5),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ]);
        }
        for _ in 0..n {
            z.extend((0..NU).map(|_| rng.gen_range(-8.0..8.0)));
        }
        z
    }

    #[test]
    fn objective_is_sum_of_parts() {
        let m = model();
        let mut p = problem(6, 3, 2);
        let g = grid(20);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        p.omega_seq = (0..6).map(|_| g.point(rng.gen_range(0..20), rng.gen_range(0..20))).collect();
        p.u_prev = [1.0, -0.5, 0.2];
        p.omega_prev = [0.3, -0.2, 0.0];
        let nlp = assemble(&p, &m).unwrap();
        for _ in 0..20 {
            let z = random_z(&nlp, &mut rng);
            let (xs, us) = nlp.unpack(&z);
            let mut want = 0.0;
            for k in 0..6 {
                let (up, wp) = if k == 0 { (p.u_prev, p.omega_prev) } else { (us[k - 1], p.omega_seq[k - 1]) };
                want += stage_cost(&xs[k], &us[k], &up, &p.omega_seq[k], &wp, &p.weights, &p.r_d);
            }
            want += terminal_cost(&xs[6], &p.weights, &p.r_d);
            assert!((nlp.objective(&z) - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn zero_disturbance_matches_nominal() {
        let m = model();
        let p = problem(5, 2, 2);
        let mut robust = p.clone();
        robust.omega_seq = vec![[0.0; 3]; 5];
        let a = assemble(&p, &m).unwrap();
        let b = assemble(&robust, &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random_z(&a, &mut rng);
        assert_eq!(a.objective(&z), b.objective(&z));
    }

    fn central_fd<F: Fn(&[f64]) -> DVector<f64>>(f: F, z: &[f64], h: f64) -> DMatrix<f64> {
        let m = f(z).len();
        let mut out = DMatrix::zeros(m, z.len());
        let mut zp = z.to_vec();
        for j in 0..z.len() {
            let v = zp[j];
            zp[j] = v + h;
            let fp = f(&zp);
            zp[j] = v - h;
            let fm = f(&zp);
            zp[j] = v;
            for i in 0..m {
                out[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        out
    }

    fn assert_close(analytic: &DMatrix<f64>, fd: &DMatrix<f64>, what: &str) {
        for i in 0..analytic.nrows() {
            for j in 0..analytic.ncols() {
                let a = analytic[(i, j)];
                let f = fd[(i, j)];
                assert!((a - f).abs() <= 1e-4 * a.abs().max(f.abs()).max(1.0), "{what} ({i},{j}): {a} vs {f}");
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let m = model();
        let mut p = problem(4, 3, 2);
        p.omega_seq = vec![[0.5, -1.0, 0.0], [1.4, 1.4, 0.0], [-0.3, 0.2, 0.0], [0.0, -1.4, 0.0]];
        p.u_prev = [2.0, 1.0, -0.5];
        p.extra.push(Arc::new(HardBorders { lines: p.borders.clone(), half_diagonal: 0.644 }));
        let nlp = assemble(&p, &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let z = random_z(&nlp, &mut rng);
            let g = nlp.gradient(&z);
            let gfd = central_fd(|z| DVector::from_element(1, nlp.objective(z)), &z, 1e-6);
            assert_close(&DMatrix::from_row_slice(1, g.len(), g.as_slice()), &gfd, "gradient");
            assert_close(&nlp.eq_jacobian(&z), &central_fd(|z| nlp.eq_constraints(z), &z, 1e-6), "equality");
            assert_close(&nlp.ineq_jacobian(&z), &central_fd(|z| nlp.ineq_constraints(z), &z, 1e-6), "inequality");
        }
    }

    #[test]
    fn gradient_at_origin_is_target_pattern() {
        let m = model();
        let mut p = problem(3, 0, 0);
        p.x0 = [0.0; NX];
        let nlp = assemble(&p, &m).unwrap();
        let z = vec![0.0; nlp.n_vars()];
        let g = nlp.gradient(&z);
        for k in 1..=3 {
            let diag = if k == 3 { p.weights.q_terminal } else { p.weights.q };
            for i in 0..NX {
                assert_eq!(g[NX * (k - 1) + i], -2.0 * diag[i] * p.r_d[i]);
            }
        }
        assert!(g.rows(18, 9).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cbf_rows_with_frozen_positions() {
        let m = model();
        let p = problem(3, 3, 2);
        let nlp = assemble(&p, &m).unwrap();
        let z = nlp.pack(&[p.x0; 4], &[[0.0; NU]; 3]);
        let c = nlp.ineq_constraints(&z);
        let per_stage = 5;
        for k in 0..3 {
            for i in 0..3 {
                let h = obstacle_h([p.x0[0], p.x0[1]], &p.obstacles[i], params().r_a);
                let want = nlp.obstacle_scale[i] * p.cbf.gamma_obstacle * h;
                assert!((c[k * per_stage + i] - want).abs() < 1e-12);
                assert!(c[k * per_stage + i] >= 0.0);
            }
            for j in 0..2 {
                let h = border_h([p.x0[0], p.x0[1]], &p.borders[j], &params());
                let want = nlp.border_scale[j] * p.cbf.gamma_border * h;
                assert!((c[k * per_stage + 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn short_horizon_from_rest_improves_on_zero_input() {
        let m = model();
        let p = problem(1, 0, 0);
        let (s, u) = hold_guess(&p);
        let sol = solve_ocp(&p, &m, (&s, &u), &SolveOptions::default()).unwrap();
        assert_eq!(sol.status(), nlp::SolveStatus::Converged);
        let nlp = assemble(&p, &m).unwrap();
        let next = m.step_array(&p.x0, &[0.0; NU], &[0.0; 3], p.ts);
        let zero = nlp.objective(&nlp.pack(&[p.x0, next], &[[0.0; NU]]));
        assert!(sol.objective < zero);
        // surge toward the goal
        assert!(sol.inputs[0][0] > 0.0);
        assert!(sol.report.kkt_residual <= 1e-6);
    }

    #[test]
    fn full_horizon_solve_converges() {
        let m = model();
        let p = problem(10, 3, 2);
        let (s, u) = hold_guess(&p);
        let sol = solve_ocp(&p, &m, (&s, &u), &SolveOptions::default()).unwrap();
        assert_eq!(sol.status(), nlp::SolveStatus::Converged, "{:?}", sol.report.diagnostic);
        assert!(sol.report.violation <= 1e-6);
        for u in &sol.inputs {
            assert!(p.bounds.contains(u));
        }
    }

    /// Independent evaluator: writes the cost as `sum_i w_i (a_i - b_i)^2` on
    /// raw components, no shared helpers.
    fn independent_cost(u: &[f64; 3], up: &[f64; 3], om: (f64, f64), wp: &[f64; 3], r: &[f64; 3]) -> f64 {
        let d0 = (u[0] - om.0) - (up[0] - wp[0]);
        let d1 = (u[1] - om.1) - (up[1] - wp[1]);
        let d2 = u[2] - up[2];
        r[0] * d0 * d0 + r[1] * d1 * d1 + r[2] * d2 * d2
    }

    proptest! {
        #[test]
        fn worst_case_dominates_grid(
            u in prop::array::uniform3(-8.0..8.0f64),
            up in prop::array::uniform3(-8.0..8.0f64),
            wpx in -1.4..1.4f64, wpy in -1.4..1.4f64,
            levels in 2usize..25,
        ) {
            let w = Weights::default();
            let r = [0.0; NX];
            let g = grid(levels);
            let wp = [wpx, wpy, 0.0];
            let wc = worst_case_omega(&r, &u, &up, &wp, &g, &w, &r);
            prop_assert!(g.levels_x.contains(&wc[0]) && g.levels_y.contains(&wc[1]));
            let best = independent_cost(&u, &up, (wc[0], wc[1]), &wp, &w.r);
            for &a in &g.levels_x {
                for &b in &g.levels_y {
                    prop_assert!(independent_cost(&u, &up, (a, b), &wp, &w.r) <= best + 1e-12);
                }
            }
        }
    }
}
