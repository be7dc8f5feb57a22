//! Trajectory and comparison CSV files.
//!
//! Every file opens with a `#schema=<tag>` line carrying the run metadata,
//! followed by an ordinary CSV header. Numbers use 9 significant digits.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::dynamics::{ControlInput, State, NU};
use crate::error::{Error, Result};
use crate::nlp::SolveStatus;
use crate::planner::{ComparisonReport, ControllerVariant, RunOutcome, StepRecord, TrajectoryLog};

pub const TRAJECTORY_SCHEMA: &str = "asv-trajectory-v1";
pub const COMPARISON_SCHEMA: &str = "asv-comparison-v1";
pub const SUMMARY_SCHEMA: &str = "asv-summary-v1";

/// Status written on the row holding the final state, which has no input.
const FINAL_STATUS: &str = "final";

const FIXED_COLUMNS: [&str; 16] = [
    "t", "x", "y", "psi", "u", "v", "r", "tau_x", "tau_y", "tau_n", "wcx", "wcy", "wrx", "wry",
    "stage_cost", "objective",
];
const STATUS_COLUMNS: [&str; 4] = ["status", "held", "outer_iters", "kkt"];

fn num(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn trajectory_header(n_obs: usize, n_border: usize) -> Vec<String> {
    FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..n_obs).map(|i| format!("h_obs_{i}")))
        .chain((0..n_border).map(|j| format!("h_border_{j}")))
        .chain(STATUS_COLUMNS.iter().map(|s| s.to_string()))
        .collect()
}

fn meta_line(schema: &str, fields: &[(&str, &str)], scenario: &str) -> String {
    let mut line = format!("#schema={schema}");
    for (k, v) in fields {
        line.push_str(&format!(" {k}={v}"));
    }
    // last, so that names with spaces survive
    line.push_str(&format!(" scenario={scenario}\n"));
    line
}

fn parse_meta(line: &str, schema: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let bad = |message: String| Error::Parse { path: path.to_path_buf(), message };
    let rest = line
        .trim_end()
        .strip_prefix("#schema=")
        .ok_or_else(|| bad("missing `#schema=` line".into()))?;
    let (tag, mut rest) = rest.split_once(' ').unwrap_or((rest, ""));
    if tag != schema {
        return Err(bad(format!("schema `{tag}`, expected `{schema}`")));
    }
    let mut out = Vec::new();
    while !rest.is_empty() {
        let (k, tail) = rest.split_once('=').ok_or_else(|| bad(format!("bad metadata near `{rest}`")))?;
        if k == "scenario" {
            out.push((k.to_string(), tail.to_string()));
            break;
        }
        let (v, tail) = tail.split_once(' ').unwrap_or((tail, ""));
        out.push((k.to_string(), v.to_string()));
        rest = tail;
    }
    Ok(out)
}

/// Writes one row per plant step plus a closing row with the final state.
/// A log without records produces the header only.
pub fn write_log(log: &TrajectoryLog, path: &Path) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(
        meta_line(
            TRAJECTORY_SCHEMA,
            &[
                ("config_hash", &log.config_hash),
                ("variant", log.variant.as_str()),
                ("outcome", log.outcome.as_str()),
            ],
            &log.scenario,
        )
        .as_bytes(),
    )?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(trajectory_header(log.final_h_obs.len(), log.final_h_border.len()))?;
    for r in &log.records {
        let s = r.state.to_array();
        let mut row: Vec<String> = std::iter::once(r.t)
            .chain(s)
            .chain(r.tau.tau)
            .chain([r.wc_omega[0], r.wc_omega[1], r.realized_omega[0], r.realized_omega[1]])
            .chain([r.stage_cost, r.objective])
            .chain(r.h_obs.iter().copied())
            .chain(r.h_border.iter().copied())
            .map(num)
            .collect();
        row.push(r.status.as_str().to_string());
        row.push(u8::from(r.held).to_string());
        row.push(r.outer_iters.to_string());
        row.push(num(r.kkt_residual));
        w.write_record(&row)?;
    }
    if !log.records.is_empty() {
        let nan = f64::NAN;
        let mut row: Vec<String> = std::iter::once(log.final_time)
            .chain(log.final_state.to_array())
            .chain([nan; NU + 4 + 2])
            .chain(log.final_h_obs.iter().copied())
            .chain(log.final_h_border.iter().copied())
            .map(num)
            .collect();
        row.extend([FINAL_STATUS.to_string(), "0".into(), "0".into(), num(f64::NAN)]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_status(s: &str) -> Option<SolveStatus> {
    [
        SolveStatus::Converged,
        SolveStatus::MaxIter,
        SolveStatus::InfeasibleQp,
        SolveStatus::NumericalFailure,
    ]
    .into_iter()
    .find(|v| v.as_str() == s)
}

pub fn read_log(path: &Path) -> Result<TrajectoryLog> {
    let bad = |message: String| Error::Parse { path: path.to_path_buf(), message };
    let mut reader = BufReader::new(File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let meta: HashMap<String, String> = parse_meta(&first, TRAJECTORY_SCHEMA, path)?.into_iter().collect();
    let get = |key: &str| meta.get(key).cloned().ok_or_else(|| bad(format!("metadata lacks `{key}`")));
    let config_hash = get("config_hash")?;
    let variant: ControllerVariant = get("variant")?.parse()?;
    let outcome: RunOutcome = get("outcome")?.parse()?;
    let scenario = get("scenario")?;

    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let n_obs = header.iter().filter(|h| h.starts_with("h_obs_")).count();
    let n_border = header.iter().filter(|h| h.starts_with("h_border_")).count();
    let expected = trajectory_header(n_obs, n_border);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(bad("unexpected trajectory header".into()));
    }
    let n_num = FIXED_COLUMNS.len() + n_obs + n_border;

    let mut records = Vec::new();
    let mut last = None;
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let vals: Vec<f64> = row
            .iter()
            .take(n_num)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("row {}: {e}", line + 1)))?;
        let state = State::from_array(std::array::from_fn(|i| vals[1 + i]));
        let h_obs = vals[16..16 + n_obs].to_vec();
        let h_border = vals[16 + n_obs..n_num].to_vec();
        let status = &row[n_num];
        if status == FINAL_STATUS {
            last = Some((vals[0], state, h_obs, h_border));
            continue;
        }
        if last.is_some() {
            return Err(bad("rows after the final-state row".into()));
        }
        records.push(StepRecord {
            t: vals[0],
            state,
            tau: ControlInput { tau: [vals[7], vals[8], vals[9]] },
            wc_omega: [vals[10], vals[11], 0.0],
            realized_omega: [vals[12], vals[13], 0.0],
            stage_cost: vals[14],
            objective: vals[15],
            h_obs,
            h_border,
            status: parse_status(status).ok_or_else(|| bad(format!("unknown status `{status}`")))?,
            held: &row[n_num + 1] == "1",
            outer_iters: row[n_num + 2].parse().map_err(|e| bad(format!("outer_iters: {e}")))?,
            kkt_residual: row[n_num + 3].parse().map_err(|e| bad(format!("kkt: {e}")))?,
        });
    }
    let (final_time, final_state, final_h_obs, final_h_border) = match last {
        Some(l) => l,
        None if records.is_empty() => (0.0, State::default(), vec![f64::NAN; n_obs], vec![f64::NAN; n_border]),
        None => return Err(bad("missing final-state row".into())),
    };
    Ok(TrajectoryLog {
        scenario,
        config_hash,
        variant,
        records,
        final_time,
        final_state,
        final_h_obs,
        final_h_border,
        outcome,
    })
}

/// Per-step columns for each run side by side, then the differences to the
/// first run. Shorter runs are padded with NaN.
pub fn write_comparison(rep: &ComparisonReport, path: &Path) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    let variants: Vec<&str> = rep.series.iter().map(|s| s.variant.as_str()).collect();
    file.write_all(
        meta_line(
            COMPARISON_SCHEMA,
            &[("config_hash", &rep.config_hash), ("variants", &variants.join(","))],
            &rep.scenario,
        )
        .as_bytes(),
    )?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["step".to_string(), "t".to_string()];
    for s in &rep.series {
        let v = s.variant.as_str();
        for c in ["speed", "tau_x", "tau_y", "tau_n", "cum_cost", "min_h"] {
            header.push(format!("{c}_{v}"));
        }
    }
    for d in &rep.differences {
        let v = d.variant.as_str();
        for c in ["speed", "tau_x", "tau_y", "tau_n", "cum_cost", "min_h"] {
            header.push(format!("d_{c}_{v}"));
        }
    }
    w.write_record(&header)?;
    let at = |v: &[f64], k: usize| v.get(k).copied().unwrap_or(f64::NAN);
    let tau_at = |v: &[[f64; NU]], k: usize| v.get(k).copied().unwrap_or([f64::NAN; NU]);
    for k in 0..rep.steps() {
        let mut row = vec![k.to_string(), num(k as f64 * rep.ts)];
        for s in &rep.series {
            row.push(num(at(&s.speed, k)));
            row.extend(tau_at(&s.tau, k).map(num));
            row.push(num(at(&s.cumulative_cost, k)));
            row.push(num(at(&s.min_h, k)));
        }
        for d in &rep.differences {
            row.push(num(at(&d.speed, k)));
            row.extend(tau_at(&d.tau, k).map(num));
            row.push(num(at(&d.cumulative_cost, k)));
            row.push(num(at(&d.min_h, k)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per run: outcome, arrival time, total cost, safety margin.
pub fn write_summary(rep: &ComparisonReport, path: &Path) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(meta_line(SUMMARY_SCHEMA, &[("config_hash", &rep.config_hash)], &rep.scenario).as_bytes())?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["variant", "outcome", "steps", "arrival_time", "total_cost", "min_margin", "max_dtau"])?;
    for s in &rep.summaries {
        w.write_record([
            s.variant.as_str().to_string(),
            s.outcome.as_str().to_string(),
            s.steps.to_string(),
            num(s.arrival_time.unwrap_or(f64::NAN)),
            num(s.total_cost),
            num(s.min_margin),
            num(s.max_dtau),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Matplotlib script that plots the trajectory CSVs given on its command
/// line, plus obstacles and borders of the scenario.
pub fn plot_script(cfg: &crate::scenario::ScenarioConfig) -> String {
    let obstacles: Vec<String> =
        cfg.obstacles.iter().map(|o| format!("({}, {}, {})", o.x, o.y, o.radius)).collect();
    let borders: Vec<String> = cfg.borders.iter().map(|b| format!("({}, {}, {})", b.a, b.b, b.c)).collect();
    format!(
        r##"#!/usr/bin/env python3
# usage: plot.py trajectory.csv [more.csv ...]
import csv, sys
import matplotlib.pyplot as plt

OBSTACLES = [{obs}]
BORDERS = [{bor}]  # a*x + b*y + c = 0, safe side a*x + b*y + c > 0
X_RANGE = ({x0}, {x1})

def load(path):
    with open(path) as f:
        lines = [l for l in f if not l.startswith("#")]
    return list(csv.DictReader(lines))

fig, ax = plt.subplots(figsize=(10, 3.5))
for x, y, r in OBSTACLES:
    ax.add_patch(plt.Circle((x, y), r, color="tab:orange"))
for a, b, c in BORDERS:
    if b != 0:
        xs = X_RANGE
        ax.plot(xs, [-(a * x + c) / b for x in xs], "k-")
    else:
        ax.axvline(-c / a, color="k")
for path in sys.argv[1:]:
    rows = load(path)
    ax.plot([float(r["x"]) for r in rows], [float(r["y"]) for r in rows], label=path)
ax.plot([{sx}], [{sy}], "go")
ax.plot([{gx}], [{gy}], "r*")
ax.set_aspect("equal")
ax.set_xlabel("x [m]")
ax.set_ylabel("y [m]")
ax.legend()
plt.tight_layout()
plt.show()
"##,
        obs = obstacles.join(", "),
        bor = borders.join(", "),
        x0 = cfg.start.x.min(cfg.goal.x) - 1.0,
        x1 = cfg.start.x.max(cfg.goal.x) + 1.0,
        sx = cfg.start.x,
        sy = cfg.start.y,
        gx = cfg.goal.x,
        gy = cfg.goal.y,
    )
}
