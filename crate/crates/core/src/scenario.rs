//! Scenario files: parsing, validation and the resolved configuration.
//!
//! A scenario is a TOML document; see `docs/scenario-schema.md`. The vessel is
//! either a path (relative to the scenario file) or an inline table.

use std::f64::consts::SQRT_2;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{DisturbanceInjection, Pose, VesselParams, NX};
use crate::error::{Error, Result};
use crate::flow::DisturbanceBounds;
use crate::ocp::{InputBounds, Weights};
use crate::planner::ControllerVariant;
use crate::safety::{border_h, obstacle_h, BorderLine, CbfParams, Obstacle};

pub const SHIPPED_SCENARIO: &str = include_str!("../data/paper_scenario.toml");
pub const SHIPPED_VESSEL: &str = include_str!("../data/cybership2.toml");
const SHIPPED_VESSEL_NAME: &str = "cybership2.toml";

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum VesselSource {
    Path(PathBuf),
    Inline(Box<VesselParams>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioOptions {
    /// The nominal baseline keeps the barrier rows when true, otherwise it
    /// runs with the input box only.
    pub nominal_keeps_cbf: bool,
    pub disturbance_injection: DisturbanceInjection,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self { nominal_keeps_cbf: true, disturbance_injection: DisturbanceInjection::Direct }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CbfSection {
    gamma_obstacle: f64,
    gamma_border: f64,
}

impl Default for CbfSection {
    fn default() -> Self {
        Self { gamma_obstacle: 0.15, gamma_border: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DisturbanceSection {
    w_min: f64,
    w_max: f64,
    levels: usize,
}

impl Default for DisturbanceSection {
    fn default() -> Self {
        Self { w_min: -SQRT_2, w_max: SQRT_2, levels: 20 }
    }
}

fn d_horizon() -> usize {
    10
}
fn d_ts() -> f64 {
    0.2
}
fn d_step_cap() -> usize {
    600
}
fn d_goal_tol() -> f64 {
    0.3
}
fn d_true() -> bool {
    true
}
fn d_gain() -> f64 {
    1.0
}
fn d_input_min() -> [f64; 3] {
    [-8.0; 3]
}
fn d_input_max() -> [f64; 3] {
    [8.0; 3]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    vessel: VesselSource,
    #[serde(default)]
    controller: ControllerVariant,
    #[serde(default = "d_horizon")]
    horizon: usize,
    #[serde(default = "d_ts")]
    ts: f64,
    #[serde(default = "d_step_cap")]
    step_cap: usize,
    #[serde(default = "d_goal_tol")]
    goal_tol: f64,
    #[serde(default = "d_true")]
    flow: bool,
    #[serde(default = "d_gain")]
    flow_gain: f64,
    start: [f64; 3],
    goal: [f64; 3],
    #[serde(default = "d_input_min")]
    input_min: [f64; 3],
    #[serde(default = "d_input_max")]
    input_max: [f64; 3],
    #[serde(default)]
    cbf: CbfSection,
    #[serde(default)]
    disturbance: DisturbanceSection,
    #[serde(default)]
    weights: Weights,
    #[serde(default)]
    obstacles: Vec<Obstacle>,
    #[serde(default)]
    borders: Vec<BorderLine>,
    #[serde(default)]
    options: ScenarioOptions,
}

/// A loaded and validated scenario. Borders are unit-normalized and oriented
/// so that the start lies on their safe side.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub vessel: VesselParams,
    pub obstacles: Vec<Obstacle>,
    pub borders: Vec<BorderLine>,
    pub start: Pose,
    pub goal: Pose,
    pub weights: Weights,
    pub horizon: usize,
    pub ts: f64,
    pub disturbance: DisturbanceBounds,
    pub cbf: CbfParams,
    pub bounds: InputBounds,
    pub step_cap: usize,
    pub goal_tol: f64,
    pub controller: ControllerVariant,
    pub flow: bool,
    /// Multiplier on the realized flow disturbance (plant side only).
    pub flow_gain: f64,
    pub options: ScenarioOptions,
    #[serde(skip)]
    pub hash: String,
}

fn pose(a: [f64; 3]) -> Pose {
    Pose { x: a[0], y: a[1], psi: a[2] }
}

// Adding zero turns -0.0 into 0.0 so that equal lines hash equally.
fn canonical(b: BorderLine) -> BorderLine {
    BorderLine { a: b.a + 0.0, b: b.b + 0.0, c: b.c + 0.0 }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    ScenarioConfig::parse(&text, path, |p| VesselParams::load(dir.join(p)))
}

impl ScenarioConfig {
    /// Parse a scenario from text. Relative vessel paths resolve against the
    /// directory of `origin`.
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let dir = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(text, origin, |p| VesselParams::load(dir.join(p)))
    }

    /// The scenario shipped with the crate, independent of the working directory.
    pub fn shipped() -> Result<Self> {
        let origin = Path::new("data/paper_scenario.toml");
        Self::parse(SHIPPED_SCENARIO, origin, |p| {
            if p == Path::new(SHIPPED_VESSEL_NAME) {
                VesselParams::from_toml_str(SHIPPED_VESSEL, Path::new(SHIPPED_VESSEL_NAME))
            } else {
                Err(Error::Validation(format!("shipped scenario refers to unknown vessel {}", p.display())))
            }
        })
    }

    fn parse(text: &str, origin: &Path, vessel: impl Fn(&Path) -> Result<VesselParams>) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text)
            .map_err(|e| Error::Parse { path: origin.to_path_buf(), message: e.to_string() })?;
        let vessel = match &file.vessel {
            VesselSource::Path(p) => vessel(p)?,
            VesselSource::Inline(v) => {
                v.validate()?;
                **v
            }
        };
        let start = pose(file.start);
        let borders = file
            .borders
            .iter()
            .map(|b| b.normalized().map(|n| canonical(n.oriented_towards([start.x, start.y]))))
            .collect::<Result<Vec<_>>>()?;
        let mut cfg = ScenarioConfig {
            name: file.name,
            vessel,
            obstacles: file.obstacles,
            borders,
            start,
            goal: pose(file.goal),
            weights: file.weights,
            horizon: file.horizon,
            ts: file.ts,
            disturbance: DisturbanceBounds {
                w_min: file.disturbance.w_min,
                w_max: file.disturbance.w_max,
                levels: file.disturbance.levels,
            },
            cbf: CbfParams { gamma_obstacle: file.cbf.gamma_obstacle, gamma_border: file.cbf.gamma_border },
            bounds: InputBounds { min: file.input_min, max: file.input_max },
            step_cap: file.step_cap,
            goal_tol: file.goal_tol,
            controller: file.controller,
            flow: file.flow,
            flow_gain: file.flow_gain,
            options: file.options,
            hash: String::new(),
        };
        cfg.validate()?;
        cfg.hash = cfg.compute_hash();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.horizon < 1 {
            return fail(format!("horizon must be >= 1, got {}", self.horizon));
        }
        if !(self.ts.is_finite() && self.ts > 0.0) {
            return fail(format!("ts must be positive, got {}", self.ts));
        }
        if self.step_cap < 1 {
            return fail("step_cap must be >= 1".into());
        }
        if !(self.goal_tol.is_finite() && self.goal_tol > 0.0) {
            return fail(format!("goal_tol must be positive, got {}", self.goal_tol));
        }
        if !(self.flow_gain.is_finite() && self.flow_gain >= 0.0) {
            return fail(format!("flow_gain must be non-negative, got {}", self.flow_gain));
        }
        self.vessel.validate()?;
        self.weights.validate()?;
        self.bounds.validate()?;
        self.cbf.validate()?;
        self.disturbance.validate()?;
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.x.is_finite() && o.y.is_finite() && o.radius.is_finite() && o.radius > 0.0) {
                return fail(format!("obstacle {i} needs a finite center and a positive radius"));
            }
        }
        for (label, p) in [("start", self.start), ("goal", self.goal)] {
            if ![p.x, p.y, p.psi].iter().all(|v| v.is_finite()) {
                return fail(format!("{label} pose is not finite"));
            }
            let pos = [p.x, p.y];
            for (i, o) in self.obstacles.iter().enumerate() {
                if obstacle_h(pos, o, self.vessel.r_a) <= 0.0 {
                    return fail(format!(
                        "{label} ({}, {}) lies inside inflated obstacle {i} at ({}, {}) r={}",
                        p.x, p.y, o.x, o.y, o.radius
                    ));
                }
            }
            for (j, b) in self.borders.iter().enumerate() {
                if border_h(pos, b, &self.vessel) <= 0.0 {
                    return fail(format!(
                        "{label} ({}, {}) is not strictly inside border {j} ({}, {}, {})",
                        p.x, p.y, b.a, b.b, b.c
                    ));
                }
            }
        }
        Ok(())
    }

    /// Goal pose with zero velocities.
    pub fn reference(&self) -> [f64; NX] {
        [self.goal.x, self.goal.y, self.goal.psi, 0.0, 0.0, 0.0]
    }

    /// SHA-256 prefix over everything except the name and controller choice,
    /// so runs of different variants on one scenario share a hash.
    fn compute_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("controller");
            m.remove("name");
        }
        // serde_json maps are ordered by key, so the text is canonical.
        let text = serde_json::to_string(&v).expect("value serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shipped() -> ScenarioConfig {
        ScenarioConfig::shipped().unwrap()
    }

    fn inline(extra: &str) -> String {
        format!(
            "name = \"t\"\nstart = [0.0, 2.0, 0.0]\ngoal = [25.0, 3.0, 0.0]\n{extra}\n[vessel]\n{SHIPPED_VESSEL}"
        )
    }

    fn parse(text: &str) -> Result<ScenarioConfig> {
        ScenarioConfig::from_toml_str(text, Path::new("mem.toml"))
    }

    #[test]
    fn shipped_scenario_parameters() {
        let c = shipped();
        assert_eq!(c.horizon, 10);
        assert_eq!(c.ts, 0.2);
        assert_eq!(c.disturbance.levels, 20);
        assert_eq!(c.disturbance.w_max, SQRT_2);
        assert_eq!(c.cbf.gamma_obstacle, 0.15);
        assert_eq!(c.cbf.gamma_border, 0.9);
        assert_eq!(c.bounds, InputBounds::symmetric(8.0));
        assert_eq!(c.obstacles.len(), 3);
        assert!(c.obstacles.iter().all(|o| o.x >= 5.0 && o.x <= 20.0));
        assert_eq!(c.borders.len(), 2);
        assert_eq!(c.step_cap, 600);
        assert_eq!((c.start.x, c.start.y), (0.0, 2.0));
        assert_eq!((c.goal.x, c.goal.y), (25.0, 3.0));
    }

    #[test]
    fn shipped_file_matches_embedded() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/paper_scenario.toml");
        let from_disk = load_scenario(dir).unwrap();
        assert_eq!(from_disk, shipped());
        assert_eq!(from_disk.hash, shipped().hash);
    }

    #[test]
    fn start_inside_obstacle_names_index() {
        let text = inline(
            "[[obstacles]]\nx = 10.0\ny = 3.0\nradius = 0.5\n[[obstacles]]\nx = 0.3\ny = 2.0\nradius = 0.5",
        );
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("obstacle 1"), "{err}");
        assert!(err.contains("start"), "{err}");
    }

    #[test]
    fn goal_outside_border_rejected() {
        let text = inline("[[borders]]\na = 0.0\nb = -1.0\nc = 3.2");
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("goal") && err.contains("border 0"), "{err}");
    }

    #[test]
    fn flipped_border_is_normalized_and_idempotent() {
        let upright = parse(&inline("[[borders]]\na = 0.0\nb = -1.0\nc = 6.0")).unwrap();
        let flipped = parse(&inline("[[borders]]\na = 0.0\nb = 2.0\nc = -12.0")).unwrap();
        assert_eq!(flipped.borders, upright.borders);
        assert_eq!(flipped.hash, upright.hash);
        let b = flipped.borders[0];
        let again = parse(&inline(&format!("[[borders]]\na = {:?}\nb = {:?}\nc = {:?}", b.a, b.b, b.c))).unwrap();
        assert_eq!(again.borders, flipped.borders);
        assert_eq!(again.hash, flipped.hash);
    }

    #[test]
    fn hash_ignores_key_order_and_controller() {
        let a = parse(&inline("horizon = 10\nts = 0.2\ncontroller = \"mpc\"")).unwrap();
        let b = parse(&inline("ts = 0.2\nhorizon = 10")).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.hash.len(), 16);
        let c = parse(&inline("horizon = 9")).unwrap();
        assert_ne!(a.hash, c.hash);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse(&inline("horizn = 10")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        for extra in ["horizon = 0", "ts = 0.0", "[cbf]\ngamma_obstacle = 1.5", "[disturbance]\nlevels = 1"] {
            assert!(matches!(parse(&inline(extra)), Err(Error::Validation(_))), "{extra}");
        }
    }

    #[test]
    fn missing_vessel_file_is_io_error() {
        let text = "name = \"t\"\nvessel = \"nope.toml\"\nstart = [0.0, 2.0, 0.0]\ngoal = [25.0, 3.0, 0.0]";
        assert!(parse(text).is_err());
    }
}
