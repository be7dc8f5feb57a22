//! Receding-horizon closed loop: worst-case selection, OCP solve, apply the
//! first input to the disturbed plant, repeat until the goal is reached.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, CurrentModel, Disturbance, State, VesselModel, NU, NX};
use crate::error::{Error, Result};
use crate::flow::{make_grid, realized_disturbance, DisturbanceGrid};
use crate::nlp::{SolveOptions, SolveStatus};
use crate::ocp::{
    hold_guess, shifted_guess, solve_ocp, stage_cost, terminal_cost, worst_case_sequence, HardBorders, OcpProblem, OcpSolution,
};
use crate::safety::{border_h, obstacle_h};
use crate::scenario::ScenarioConfig;

/// Cap on alternating worst-case / solve rounds per step.
pub const MAX_OUTER_ITERS: usize = 5;

/// Consecutive failed steps that abort a run.
pub const MAX_CONSECUTIVE_FAILURES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ControllerVariant {
    /// Min-max robust MPC with barrier rows on obstacles and borders.
    #[default]
    #[serde(rename = "rmpc-cbf")]
    RmpcCbf,
    /// Same OCP with the disturbance fixed at zero and a single solve.
    #[serde(rename = "mpc")]
    MpcNominal,
    /// Robust MPC with obstacle barriers and plain `h_b(x_k) >= 0` border rows.
    #[serde(rename = "rmpc-hard")]
    RmpcHardBorder,
}

impl ControllerVariant {
    pub const ALL: [ControllerVariant; 3] =
        [ControllerVariant::RmpcCbf, ControllerVariant::RmpcHardBorder, ControllerVariant::MpcNominal];

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerVariant::RmpcCbf => "rmpc-cbf",
            ControllerVariant::MpcNominal => "mpc",
            ControllerVariant::RmpcHardBorder => "rmpc-hard",
        }
    }

    pub fn is_robust(self) -> bool {
        !matches!(self, ControllerVariant::MpcNominal)
    }
}

impl fmt::Display for ControllerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ControllerVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown controller `{s}` (expected rmpc-cbf, mpc or rmpc-hard)")))
    }
}

/// What the controller carries from one step to the next.
#[derive(Debug, Clone, Default)]
pub struct Memory {
    /// Input applied at the previous step.
    pub u_prev: [f64; NU],
    /// Disturbance the previous step's plan assumed for its first stage.
    pub omega_prev: Disturbance,
    pub warm: Option<OcpSolution>,
    pub consecutive_failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    /// First element of the worst-case sequence the final solve used.
    pub worst_case_omega: Disturbance,
    pub stage_cost: f64,
    pub objective: f64,
    pub status: SolveStatus,
    /// The solver failed and the previous input was re-applied.
    pub held: bool,
    pub retried: bool,
    pub outer_iters: usize,
    pub sqp_iterations: usize,
    pub kkt_residual: f64,
    pub violation: f64,
}

/// Controller for one scenario and variant.
pub struct Planner<'a> {
    cfg: &'a ScenarioConfig,
    variant: ControllerVariant,
    model: VesselModel,
    grid: DisturbanceGrid,
    opts: SolveOptions,
}

impl<'a> Planner<'a> {
    pub fn new(cfg: &'a ScenarioConfig, variant: ControllerVariant) -> Result<Self> {
        cfg.validate()?;
        let model = VesselModel::with_options(cfg.vessel, cfg.options.disturbance_injection, CurrentModel::None)?;
        Ok(Self { cfg, variant, model, grid: make_grid(&cfg.disturbance), opts: SolveOptions::default() })
    }

    pub fn model(&self) -> &VesselModel {
        &self.model
    }

    pub fn variant(&self) -> ControllerVariant {
        self.variant
    }

    fn problem(&self, x0: [f64; NX], memory: &Memory) -> OcpProblem {
        let cfg = self.cfg;
        let n = cfg.horizon;
        let mut p = OcpProblem {
            horizon: n,
            ts: cfg.ts,
            x0,
            r_d: cfg.reference(),
            u_prev: memory.u_prev,
            omega_prev: memory.omega_prev,
            weights: cfg.weights,
            bounds: cfg.bounds,
            obstacles: cfg.obstacles.clone(),
            borders: cfg.borders.clone(),
            cbf: cfg.cbf,
            omega_seq: vec![[0.0; 3]; n],
            extra: Vec::new(),
        };
        match self.variant {
            ControllerVariant::RmpcCbf => {}
            ControllerVariant::MpcNominal => {
                p.omega_prev = [0.0; 3];
                if !cfg.options.nominal_keeps_cbf {
                    p.obstacles.clear();
                    p.borders.clear();
                }
            }
            ControllerVariant::RmpcHardBorder => {
                let lines = std::mem::take(&mut p.borders);
                p.extra.push(Arc::new(HardBorders { lines, half_diagonal: cfg.vessel.half_diagonal() }));
            }
        }
        p
    }

    fn accepted(sol: &OcpSolution, opts: &SolveOptions) -> bool {
        match sol.status() {
            SolveStatus::Converged => true,
            SolveStatus::MaxIter => sol.report.violation <= opts.tol_feas,
            _ => false,
        }
    }

    /// Alternate worst-case selection and solves. Stops when the selected
    /// sequence repeats one already solved (fixed point or cycle) or at the
    /// round cap, and returns the solve whose worst-case value is lowest,
    /// with `p.omega_seq` set to the sequence that solve used.
    fn solve_minmax(
        &self,
        p: &mut OcpProblem,
        guess: (Vec<[f64; NX]>, Vec<[f64; NU]>),
    ) -> Result<(OcpSolution, usize)> {
        let (gs, gu) = guess;
        if !self.variant.is_robust() {
            let sol = solve_ocp(p, &self.model, (&gs, &gu), &self.opts)?;
            return Ok((sol, 1));
        }
        p.omega_seq = worst_case_sequence(p, &gs, &gu, &self.grid);
        let mut tried: Vec<Vec<Disturbance>> = Vec::new();
        let mut best: Option<(f64, OcpSolution, Vec<Disturbance>)> = None;
        let mut guess = (gs, gu);
        for round in 1..=MAX_OUTER_ITERS {
            let sol = solve_ocp(p, &self.model, (&guess.0, &guess.1), &self.opts)?;
            if !Self::accepted(&sol, &self.opts) {
                return Ok((sol, round));
            }
            let next = worst_case_sequence(p, &sol.states, &sol.inputs, &self.grid);
            let value = worst_case_value(p, &sol, &next);
            tried.push(std::mem::replace(&mut p.omega_seq, next));
            guess = (sol.states.clone(), sol.inputs.clone());
            if best.as_ref().is_none_or(|(v, _, _)| value < *v) {
                best = Some((value, sol, tried.last().unwrap().clone()));
            }
            if tried.contains(&p.omega_seq) {
                break;
            }
            if round == MAX_OUTER_ITERS {
                debug!("worst-case selection still moving after {round} rounds");
            }
        }
        let rounds = tried.len();
        let (_, sol, seq) = best.expect("at least one accepted round");
        p.omega_seq = seq;
        Ok((sol, rounds))
    }

    /// Compute the input for state `s` and update `memory`.
    pub fn plan_step(&self, s: &State, memory: &mut Memory) -> Result<(ControlInput, StepDiagnostics)> {
        if !s.is_finite() {
            return Err(Error::Validation("plan_step needs a finite state".into()));
        }
        let x0 = s.to_array();
        let mut p = self.problem(x0, memory);
        let warm = memory.warm.as_ref().map(|w| shifted_guess(w, x0));
        let retry_possible = warm.is_some();
        let mut retried = false;
        let mut outer = 0;
        let first = warm.unwrap_or_else(|| hold_guess(&p));
        let (mut sol, rounds) = self.solve_minmax(&mut p, first)?;
        outer += rounds;
        if !Self::accepted(&sol, &self.opts) && retry_possible {
            debug!("warm-started solve ended with {}, retrying from rest", sol.status().as_str());
            retried = true;
            let cold = hold_guess(&p);
            let (s2, r2) = self.solve_minmax(&mut p, cold)?;
            sol = s2;
            outer += r2;
        }
        let ok = Self::accepted(&sol, &self.opts);
        debug!(
            "solve: {} after {} SQP iterations, kkt {:.2e}, {} min-max rounds",
            sol.status().as_str(),
            sol.report.iterations,
            sol.report.kkt_residual,
            outer
        );
        let wc0 = p.omega_seq[0];
        let diag = StepDiagnostics {
            worst_case_omega: wc0,
            stage_cost: sol.worst_case_cost_trace[0],
            objective: sol.objective,
            status: sol.status(),
            held: !ok,
            retried,
            outer_iters: outer,
            sqp_iterations: sol.report.iterations,
            kkt_residual: sol.report.kkt_residual,
            violation: sol.report.violation,
        };
        let tau = if ok {
            let u = sol.inputs[0];
            memory.u_prev = u;
            memory.omega_prev = wc0;
            memory.consecutive_failures = 0;
            memory.warm = Some(sol);
            ControlInput { tau: u }
        } else {
            warn!(
                "solver failed ({}): {}; holding previous input",
                sol.status().as_str(),
                sol.report.diagnostic.as_deref().unwrap_or("no diagnostic")
            );
            memory.consecutive_failures += 1;
            memory.warm = None;
            ControlInput { tau: memory.u_prev }
        };
        Ok((tau, diag))
    }
}

/// Objective of `sol` re-evaluated with the disturbance sequence `seq`.
fn worst_case_value(p: &OcpProblem, sol: &OcpSolution, seq: &[Disturbance]) -> f64 {
    let mut u_prev = p.u_prev;
    let mut w_prev = p.omega_prev;
    let mut j = 0.0;
    for ((x, u), w) in sol.states.iter().zip(&sol.inputs).zip(seq) {
        j += stage_cost(x, u, &u_prev, w, &w_prev, &p.weights, &p.r_d);
        u_prev = *u;
        w_prev = *w;
    }
    j + terminal_cost(&sol.states[p.horizon], &p.weights, &p.r_d)
}

/// One-shot form of [`Planner::plan_step`].
pub fn plan_step(
    s: &State,
    memory: &mut Memory,
    cfg: &ScenarioConfig,
    variant: ControllerVariant,
) -> Result<(ControlInput, StepDiagnostics)> {
    Planner::new(cfg, variant)?.plan_step(s, memory)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunOutcome {
    Reached,
    StepCap,
    Aborted,
}

impl RunOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            RunOutcome::Reached => "reached",
            RunOutcome::StepCap => "step-cap",
            RunOutcome::Aborted => "aborted",
        }
    }
}

impl FromStr for RunOutcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [RunOutcome::Reached, RunOutcome::StepCap, RunOutcome::Aborted]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown run outcome `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    /// State at `t`, before the input is applied.
    pub state: State,
    pub tau: ControlInput,
    pub wc_omega: Disturbance,
    /// Disturbance the plant felt over `[t, t + Ts)`.
    pub realized_omega: Disturbance,
    pub stage_cost: f64,
    pub objective: f64,
    pub h_obs: Vec<f64>,
    pub h_border: Vec<f64>,
    pub status: SolveStatus,
    pub held: bool,
    pub outer_iters: usize,
    /// KKT residual of the accepted solve.
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub scenario: String,
    pub config_hash: String,
    pub variant: ControllerVariant,
    pub records: Vec<StepRecord>,
    pub final_time: f64,
    pub final_state: State,
    pub final_h_obs: Vec<f64>,
    pub final_h_border: Vec<f64>,
    pub outcome: RunOutcome,
}

impl TrajectoryLog {
    /// Every logged state with its safety values, the final state included.
    pub fn safety_samples(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.records
            .iter()
            .map(|r| (r.h_obs.as_slice(), r.h_border.as_slice()))
            .chain(std::iter::once((self.final_h_obs.as_slice(), self.final_h_border.as_slice())))
    }

    pub fn min_h(&self) -> f64 {
        self.safety_samples()
            .flat_map(|(o, b)| o.iter().chain(b.iter()).copied())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn min_border_h(&self) -> f64 {
        self.safety_samples().flat_map(|(_, b)| b.iter().copied()).fold(f64::INFINITY, f64::min)
    }

    pub fn min_obstacle_h(&self) -> f64 {
        self.safety_samples().flat_map(|(o, _)| o.iter().copied()).fold(f64::INFINITY, f64::min)
    }

    pub fn all_converged(&self) -> bool {
        self.records.iter().all(|r| r.status == SolveStatus::Converged && !r.held)
    }

    pub fn held_steps(&self) -> usize {
        self.records.iter().filter(|r| r.held).count()
    }
}

pub fn safety_values(cfg: &ScenarioConfig, s: &State) -> (Vec<f64>, Vec<f64>) {
    let pos = s.position();
    let h_obs = cfg.obstacles.iter().map(|o| obstacle_h(pos, o, cfg.vessel.r_a)).collect();
    let h_border = cfg.borders.iter().map(|b| border_h(pos, b, &cfg.vessel)).collect();
    (h_obs, h_border)
}

fn goal_distance(cfg: &ScenarioConfig, s: &State) -> f64 {
    (s.eta.x - cfg.goal.x).hypot(s.eta.y - cfg.goal.y)
}

/// Disturbance felt by the plant at `s`.
pub fn plant_disturbance(cfg: &ScenarioConfig, s: &State) -> Disturbance {
    if !cfg.flow {
        return [0.0; 3];
    }
    let w = realized_disturbance(s.eta.x, s.eta.y);
    [cfg.flow_gain * w[0], cfg.flow_gain * w[1], 0.0]
}

pub fn run_closed_loop(cfg: &ScenarioConfig, variant: ControllerVariant) -> Result<TrajectoryLog> {
    let planner = Planner::new(cfg, variant)?;
    let mut memory = Memory::default();
    let mut s = State::at_rest(cfg.start);
    let mut records = Vec::new();
    let mut outcome = RunOutcome::StepCap;
    let mut t = 0.0;
    for k in 0..cfg.step_cap {
        t = k as f64 * cfg.ts;
        if goal_distance(cfg, &s) < cfg.goal_tol {
            outcome = RunOutcome::Reached;
            break;
        }
        let (tau, d) = planner.plan_step(&s, &mut memory)?;
        let w = plant_disturbance(cfg, &s);
        let (h_obs, h_border) = safety_values(cfg, &s);
        records.push(StepRecord {
            t,
            state: s,
            tau,
            wc_omega: d.worst_case_omega,
            realized_omega: w,
            stage_cost: d.stage_cost,
            objective: d.objective,
            h_obs,
            h_border,
            status: d.status,
            held: d.held,
            outer_iters: d.outer_iters,
            kkt_residual: d.kkt_residual,
        });
        debug!(
            "{} k={k} pos=({:.3}, {:.3}) tau=({:.3}, {:.3}, {:.3}) J={:.4} {} outer={}",
            variant,
            s.eta.x,
            s.eta.y,
            tau.tau[0],
            tau.tau[1],
            tau.tau[2],
            d.objective,
            d.status.as_str(),
            d.outer_iters
        );
        s = planner.model().discrete_step(&s, &tau, &w, cfg.ts);
        t = (k + 1) as f64 * cfg.ts;
        if memory.consecutive_failures >= MAX_CONSECUTIVE_FAILURES {
            warn!("{variant}: aborting after {} consecutive solver failures at step {k}", memory.consecutive_failures);
            outcome = RunOutcome::Aborted;
            break;
        }
        if !s.is_finite() {
            warn!("{variant}: plant state became non-finite at step {k}");
            outcome = RunOutcome::Aborted;
            break;
        }
    }
    if outcome == RunOutcome::StepCap && goal_distance(cfg, &s) < cfg.goal_tol {
        outcome = RunOutcome::Reached;
    }
    let (final_h_obs, final_h_border) = safety_values(cfg, &s);
    info!("{variant}: {} after {} steps ({:.1} s)", outcome.as_str(), records.len(), t);
    Ok(TrajectoryLog {
        scenario: cfg.name.clone(),
        config_hash: cfg.hash.clone(),
        variant,
        records,
        final_time: t,
        final_state: s,
        final_h_obs,
        final_h_border,
        outcome,
    })
}

/// Per-step series of one run, indexed by plant step.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSeries {
    pub variant: ControllerVariant,
    pub t: Vec<f64>,
    pub speed: Vec<f64>,
    pub tau: Vec<[f64; NU]>,
    pub cumulative_cost: Vec<f64>,
    pub min_h: Vec<f64>,
}

/// Differences `run - first run` on the common step range.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceSeries {
    pub variant: ControllerVariant,
    pub speed: Vec<f64>,
    pub tau: Vec<[f64; NU]>,
    pub cumulative_cost: Vec<f64>,
    pub min_h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub variant: ControllerVariant,
    pub outcome: RunOutcome,
    pub steps: usize,
    /// Time at which the goal tolerance was met.
    pub arrival_time: Option<f64>,
    pub total_cost: f64,
    pub min_margin: f64,
    /// Largest per-axis input change between consecutive steps.
    pub max_dtau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub scenario: String,
    pub config_hash: String,
    pub ts: f64,
    pub series: Vec<RunSeries>,
    pub differences: Vec<DifferenceSeries>,
    pub summaries: Vec<RunSummary>,
}

impl ComparisonReport {
    pub fn steps(&self) -> usize {
        self.series.iter().map(|s| s.t.len()).max().unwrap_or(0)
    }
}

fn series(log: &TrajectoryLog) -> RunSeries {
    let mut cum = 0.0;
    let mut out = RunSeries {
        variant: log.variant,
        t: Vec::with_capacity(log.records.len()),
        speed: Vec::new(),
        tau: Vec::new(),
        cumulative_cost: Vec::new(),
        min_h: Vec::new(),
    };
    for r in &log.records {
        cum += r.stage_cost;
        out.t.push(r.t);
        out.speed.push(r.state.nu.u.hypot(r.state.nu.v));
        out.tau.push(r.tau.tau);
        out.cumulative_cost.push(cum);
        out.min_h.push(r.h_obs.iter().chain(&r.h_border).copied().fold(f64::INFINITY, f64::min));
    }
    out
}

fn summary(log: &TrajectoryLog, s: &RunSeries) -> RunSummary {
    let max_dtau = s
        .tau
        .windows(2)
        .flat_map(|w| (0..NU).map(move |i| (w[1][i] - w[0][i]).abs()))
        .fold(0.0, f64::max);
    RunSummary {
        variant: log.variant,
        outcome: log.outcome,
        steps: log.records.len(),
        arrival_time: (log.outcome == RunOutcome::Reached).then_some(log.final_time),
        total_cost: s.cumulative_cost.last().copied().unwrap_or(0.0),
        min_margin: log.min_h(),
        max_dtau,
    }
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn compare_runs(logs: &[TrajectoryLog]) -> Result<ComparisonReport> {
    let first = logs
        .first()
        .filter(|_| logs.len() >= 2)
        .ok_or_else(|| Error::Comparison(format!("need at least two logs, got {}", logs.len())))?;
    for other in &logs[1..] {
        if other.config_hash != first.config_hash {
            return Err(Error::ScenarioMismatch {
                left: format!("{} ({})", first.scenario, first.variant),
                left_hash: first.config_hash.clone(),
                right: format!("{} ({})", other.scenario, other.variant),
                right_hash: other.config_hash.clone(),
            });
        }
    }
    let series: Vec<RunSeries> = logs.iter().map(series).collect();
    let summaries = logs.iter().zip(&series).map(|(l, s)| summary(l, s)).collect();
    let base = &series[0];
    let differences = series[1..]
        .iter()
        .map(|s| DifferenceSeries {
            variant: s.variant,
            speed: diff(&s.speed, &base.speed),
            tau: s.tau.iter().zip(&base.tau).map(|(a, b)| std::array::from_fn(|i| a[i] - b[i])).collect(),
            cumulative_cost: diff(&s.cumulative_cost, &base.cumulative_cost),
            min_h: diff(&s.min_h, &base.min_h),
        })
        .collect();
    let ts = match (first.records.first(), first.records.get(1)) {
        (Some(a), Some(b)) => b.t - a.t,
        _ => first.final_time,
    };
    Ok(ComparisonReport {
        scenario: first.scenario.clone(),
        config_hash: first.config_hash.clone(),
        ts,
        series,
        differences,
        summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Pose;

    fn shipped() -> ScenarioConfig {
        ScenarioConfig::shipped().unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in ControllerVariant::ALL {
            assert_eq!(v.as_str().parse::<ControllerVariant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.as_str()));
        }
        assert!("rmpc".parse::<ControllerVariant>().is_err());
    }

    #[test]
    fn start_state_gives_bounded_finite_input() {
        let cfg = shipped();
        let mut mem = Memory::default();
        let s = State::at_rest(cfg.start);
        let (u, d) = plan_step(&s, &mut mem, &cfg, ControllerVariant::RmpcCbf).unwrap();
        assert_eq!(d.status, SolveStatus::Converged);
        assert!(!d.held);
        for v in u.tau {
            assert!(v.is_finite() && (-8.0..=8.0).contains(&v), "{v}");
        }
        assert_eq!(mem.u_prev, u.tau);
        assert_eq!(mem.omega_prev, d.worst_case_omega);
        assert!(d.outer_iters >= 1 && d.outer_iters <= 2 * MAX_OUTER_ITERS);
    }

    #[test]
    fn at_goal_input_is_near_zero() {
        let mut cfg = shipped();
        cfg.flow = false;
        let s = State::at_rest(cfg.goal);
        let mut mem = Memory::default();
        let (u, d) = plan_step(&s, &mut mem, &cfg, ControllerVariant::MpcNominal).unwrap();
        assert_eq!(d.status, SolveStatus::Converged);
        assert!(u.tau.iter().all(|v| v.abs() < 1e-6), "{:?}", u.tau);
        assert!(d.objective.abs() < 1e-9, "{}", d.objective);
    }

    #[test]
    fn robust_objective_dominates_nominal() {
        let mut cfg = shipped();
        cfg.disturbance.levels = 21;
        for pose in [cfg.start, Pose { x: 4.0, y: 2.5, psi: 0.1 }] {
            let s = State::at_rest(pose);
            let (_, rob) = plan_step(&s, &mut Memory::default(), &cfg, ControllerVariant::RmpcCbf).unwrap();
            let (_, nom) = plan_step(&s, &mut Memory::default(), &cfg, ControllerVariant::MpcNominal).unwrap();
            assert_eq!(rob.status, SolveStatus::Converged);
            assert_eq!(nom.status, SolveStatus::Converged);
            assert!(rob.objective >= nom.objective - 1e-9, "{} < {}", rob.objective, nom.objective);
        }
    }

    #[test]
    fn hard_border_variant_moves_borders_to_extra_rows() {
        let cfg = shipped();
        let p = Planner::new(&cfg, ControllerVariant::RmpcHardBorder).unwrap();
        let ocp = p.problem(State::at_rest(cfg.start).to_array(), &Memory::default());
        assert!(ocp.borders.is_empty());
        assert_eq!(ocp.obstacles.len(), 3);
        assert_eq!(ocp.extra.len(), 1);
        assert_eq!(ocp.extra[0].len(), 2);
    }

    #[test]
    fn nominal_without_cbf_switch_drops_rows() {
        let mut cfg = shipped();
        cfg.options.nominal_keeps_cbf = false;
        let p = Planner::new(&cfg, ControllerVariant::MpcNominal).unwrap();
        let ocp = p.problem(State::at_rest(cfg.start).to_array(), &Memory::default());
        assert!(ocp.borders.is_empty() && ocp.obstacles.is_empty());
    }

    fn open_channel() -> ScenarioConfig {
        let mut cfg = shipped();
        cfg.obstacles.clear();
        cfg.flow = false;
        cfg
    }

    fn check_arrival_and_monotone(cfg: &ScenarioConfig, log: &TrajectoryLog) {
        assert_eq!(log.outcome, RunOutcome::Reached);
        assert!(log.all_converged());
        let dist: Vec<f64> = log.records.iter().map(|r| goal_distance(cfg, &r.state)).collect();
        let settle = dist.len() / 10;
        for w in dist[settle..].windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
        for w in log.records.windows(2) {
            assert!((w[1].t - w[0].t - cfg.ts).abs() < 1e-12);
        }
    }

    #[test]
    fn open_channel_run_on_goal_line_is_straight() {
        let mut cfg = open_channel();
        cfg.start.y = cfg.goal.y;
        let log = run_closed_loop(&cfg, ControllerVariant::MpcNominal).unwrap();
        check_arrival_and_monotone(&cfg, &log);
        let dev = log.records.iter().map(|r| (r.state.eta.y - cfg.goal.y).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-3, "lateral deviation {dev}");
    }

    #[test]
    fn open_channel_run_from_start_reaches_goal() {
        // Off the goal line the optimizer crabs (sway thrust plus a yaw
        // offset adds forward speed), so the path bows but stays inside.
        let cfg = open_channel();
        let log = run_closed_loop(&cfg, ControllerVariant::MpcNominal).unwrap();
        check_arrival_and_monotone(&cfg, &log);
        assert!(log.min_border_h() > 0.0);
    }

    fn short_log(variant: ControllerVariant) -> TrajectoryLog {
        let mut cfg = shipped();
        cfg.step_cap = 4;
        run_closed_loop(&cfg, variant).unwrap()
    }

    #[test]
    fn step_cap_bounds_log_length() {
        let log = short_log(ControllerVariant::RmpcCbf);
        assert_eq!(log.records.len(), 4);
        assert_eq!(log.outcome, RunOutcome::StepCap);
        assert!((log.final_time - 0.8).abs() < 1e-12);
    }

    #[test]
    fn identical_logs_compare_to_zero() {
        let log = short_log(ControllerVariant::RmpcCbf);
        let rep = compare_runs(&[log.clone(), log.clone()]).unwrap();
        let d = &rep.differences[0];
        assert!(d.speed.iter().chain(&d.cumulative_cost).chain(&d.min_h).all(|v| *v == 0.0));
        assert!(d.tau.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(rep.summaries[0], rep.summaries[1]);
        assert!(rep.summaries[0].max_dtau.is_finite());
        assert_eq!(rep.steps(), 4);
    }

    #[test]
    fn runs_are_deterministic() {
        assert_eq!(short_log(ControllerVariant::RmpcCbf), short_log(ControllerVariant::RmpcCbf));
    }

    #[test]
    fn mismatched_hash_rejected() {
        let a = short_log(ControllerVariant::MpcNominal);
        let mut b = a.clone();
        b.config_hash = "0000000000000000".into();
        let err = compare_runs(&[a.clone(), b]).unwrap_err();
        assert!(matches!(err, Error::ScenarioMismatch { .. }), "{err}");
        assert!(compare_runs(&[a]).is_err());
    }
}
