//! 3-DOF surface vessel model.
//!
//! eta_dot = J(psi) * nu
//! (M_RB + M_A) * nu_dot + (C_RB(nu) + C_A(nu) + D(nu)) * nu = tau + tau_d
//!
//! with eta = [x, y, psi] in the Earth-fixed frame and nu = [u, v, r] in the
//! body frame. The flattened state is always [x, y, psi, u, v, r].
//!
//! Every matrix is written once against [`Real`] so the same code runs on
//! `f64` for simulation and on [`Dual`] for exact prediction Jacobians.

use std::path::Path;

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::ad::{Dual, Real};
use crate::error::{Error, Result};

pub const NX: usize = 6;
pub const NU: usize = 3;

pub type Disturbance = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    /// North position (m).
    pub x: f64,
    /// East position (m).
    pub y: f64,
    /// Heading (rad), kept unwrapped.
    pub psi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Velocity {
    /// Surge (m/s).
    pub u: f64,
    /// Sway (m/s).
    pub v: f64,
    /// Yaw rate (rad/s).
    pub r: f64,
}

impl Velocity {
    pub fn to_array(self) -> [f64; 3] {
        [self.u, self.v, self.r]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub eta: Pose,
    pub nu: Velocity,
}

impl State {
    pub fn at_rest(pose: Pose) -> Self {
        Self { eta: pose, nu: Velocity::default() }
    }

    pub fn to_array(&self) -> [f64; NX] {
        [self.eta.x, self.eta.y, self.eta.psi, self.nu.u, self.nu.v, self.nu.r]
    }

    pub fn from_array(a: [f64; NX]) -> Self {
        Self {
            eta: Pose { x: a[0], y: a[1], psi: a[2] },
            nu: Velocity { u: a[3], v: a[4], r: a[5] },
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.eta.x, self.eta.y]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Body-frame generalized force [X, Y, N].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub tau: [f64; NU],
}

impl ControlInput {
    pub fn new(x: f64, y: f64, n: f64) -> Self {
        Self { tau: [x, y, n] }
    }

    pub fn zero() -> Self {
        Self::default()
    }
}

/// Hydrodynamic, inertial and geometric constants.
///
/// Damping coefficients are stored in the sign convention of the damping
/// matrix itself: `d11 = x_u + x_absu_u*|u| + x_uuu*u_r^2` is used as written,
/// so positive values dissipate energy. `|.|` is evaluated with
/// [`smooth_abs`]. Added-mass derivatives keep the usual
/// negative hydrodynamic sign (`M_A[0][0] = -x_du`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VesselParams {
    pub m: f64,
    pub i_z: f64,
    pub x_g: f64,
    pub x_du: f64,
    pub y_dv: f64,
    pub y_dr: f64,
    pub n_dv: f64,
    pub n_dr: f64,
    pub x_u: f64,
    pub x_absu_u: f64,
    pub x_uuu: f64,
    pub y_v: f64,
    pub y_absv_v: f64,
    pub y_absr_v: f64,
    pub y_r: f64,
    pub y_absv_r: f64,
    pub y_absr_r: f64,
    pub n_v: f64,
    pub n_absv_v: f64,
    pub n_absr_v: f64,
    pub n_r: f64,
    pub n_absv_r: f64,
    pub n_absr_r: f64,
    pub l_x: f64,
    pub l_y: f64,
    /// Beam width (m).
    pub w: f64,
    /// Length (m).
    pub l: f64,
    /// Clearance radius used against obstacles (m).
    pub r_a: f64,
}

impl VesselParams {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let p: VesselParams = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.message().to_string(),
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("m", self.m), ("i_z", self.i_z), ("x_g", self.x_g), ("x_du", self.x_du),
            ("y_dv", self.y_dv), ("y_dr", self.y_dr), ("n_dv", self.n_dv), ("n_dr", self.n_dr),
            ("x_u", self.x_u), ("x_absu_u", self.x_absu_u), ("x_uuu", self.x_uuu),
            ("y_v", self.y_v), ("y_absv_v", self.y_absv_v), ("y_absr_v", self.y_absr_v),
            ("y_r", self.y_r), ("y_absv_r", self.y_absv_r), ("y_absr_r", self.y_absr_r),
            ("n_v", self.n_v), ("n_absv_v", self.n_absv_v), ("n_absr_v", self.n_absr_v),
            ("n_r", self.n_r), ("n_absv_r", self.n_absv_r), ("n_absr_r", self.n_absr_r),
            ("l_x", self.l_x), ("l_y", self.l_y), ("w", self.w), ("l", self.l), ("r_a", self.r_a),
        ];
        for (field, v) in fields {
            if !v.is_finite() {
                return Err(Error::VesselParam { field, reason: "value is not finite".into() });
            }
        }
        for (field, v) in [("m", self.m), ("i_z", self.i_z), ("w", self.w), ("l", self.l), ("r_a", self.r_a)] {
            if v <= 0.0 {
                return Err(Error::VesselParam { field, reason: format!("must be > 0, got {v}") });
            }
        }
        Ok(())
    }

    pub fn rigid_body_mass(&self) -> Matrix3<f64> {
        let mxg = self.m * self.x_g;
        Matrix3::new(self.m, 0.0, 0.0, 0.0, self.m, mxg, 0.0, mxg, self.i_z)
    }

    pub fn added_mass(&self) -> Matrix3<f64> {
        Matrix3::new(-self.x_du, 0.0, 0.0, 0.0, -self.y_dv, -self.y_dr, 0.0, -self.n_dv, -self.n_dr)
    }

    pub fn mass_matrix(&self) -> Matrix3<f64> {
        self.rigid_body_mass() + self.added_mass()
    }

    /// Half of the hull diagonal, the clearance kept from border lines.
    pub fn half_diagonal(&self) -> f64 {
        (self.w * self.w + self.l * self.l).sqrt() / 2.0
    }

    pub fn allocation_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, self.l_x, -self.l_y, self.l_y)
    }
}

/// Where the environmental disturbance enters the force balance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceInjection {
    /// `[w_x, w_y, 0]` is added to the body force vector.
    #[default]
    Direct,
    /// `tau_d = B_T * w_d`, the thruster-allocated form.
    Allocation,
}

/// Ambient current model feeding the relative velocities u_r, v_r.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurrentModel {
    /// u_r = u, v_r = v.
    #[default]
    None,
}

pub fn rotation_matrix(psi: f64) -> Matrix3<f64> {
    to_matrix(rotation_g(psi))
}

pub fn coriolis_rb(nu: Velocity, p: &VesselParams) -> Matrix3<f64> {
    to_matrix(coriolis_rb_g(nu.to_array(), p))
}

pub fn coriolis_a(nu: Velocity, nu_ref: Velocity, p: &VesselParams) -> Matrix3<f64> {
    to_matrix(coriolis_a_g(nu.to_array(), nu_ref.to_array(), p))
}

pub fn damping(nu: Velocity, nu_ref: Velocity, p: &VesselParams) -> Matrix3<f64> {
    to_matrix(damping_g(nu.to_array(), nu_ref.to_array(), p))
}

/// Net body force from the three actuator forces `[f1, f2, f3]`.
pub fn thruster_allocation(forces: [f64; 3], p: &VesselParams) -> ControlInput {
    let t = p.allocation_matrix() * Vector3::from(forces);
    ControlInput::new(t[0], t[1], t[2])
}

fn to_matrix(m: [[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

fn rotation_g<T: Real>(psi: T) -> [[T; 3]; 3] {
    let (c, s) = (psi.cos(), psi.sin());
    let (z, o) = (T::cst(0.0), T::cst(1.0));
    [[c, -s, z], [s, c, z], [z, z, o]]
}

fn coriolis_rb_g<T: Real>(nu: [T; 3], p: &VesselParams) -> [[T; 3]; 3] {
    let [u, v, r] = nu;
    let z = T::cst(0.0);
    let c13 = -(r * p.x_g + v) * p.m;
    let c23 = u * p.m;
    [[z, z, c13], [z, z, c23], [-c13, -c23, z]]
}

fn coriolis_a_g<T: Real>(nu: [T; 3], nu_ref: [T; 3], p: &VesselParams) -> [[T; 3]; 3] {
    let r = nu[2];
    let (u_r, v_r) = (nu_ref[0], nu_ref[1]);
    let z = T::cst(0.0);
    let c13 = v_r * p.y_dv + r * (0.5 * (p.n_dv + p.y_dr));
    let c23 = u_r * (-p.x_du);
    [[z, z, c13], [z, z, c23], [-c13, -c23, z]]
}

/// RK4 steps per sample. A single 0.2 s step is off by up to 1e-3 relative
/// at full speed; four keep it well inside 1e-4.
pub const RK4_SUBSTEPS: usize = 4;

/// Width of the smoothed absolute value in the damping terms (m/s, rad/s).
pub const ABS_SMOOTHING: f64 = 1e-2;

/// `a tanh(a / eps)`: zero at rest, equal to `|a|` in f64 once `|a| > 20 eps`,
/// and smooth across zero so prediction Jacobians do not jump when a velocity
/// changes sign inside a step.
pub fn smooth_abs<T: Real>(a: T) -> T {
    a * (a * (1.0 / ABS_SMOOTHING)).tanh()
}

fn damping_g<T: Real>(nu: [T; 3], nu_ref: [T; 3], p: &VesselParams) -> [[T; 3]; 3] {
    let [u, _, r] = nu;
    let (u_r, v_r) = (nu_ref[0], nu_ref[1]);
    let (av, ar) = (smooth_abs(v_r), smooth_abs(r));
    let z = T::cst(0.0);
    let d11 = smooth_abs(u) * p.x_absu_u + u_r * u_r * p.x_uuu + p.x_u;
    let d22 = av * p.y_absv_v + ar * p.y_absr_v + p.y_v;
    let d23 = av * p.y_absv_r + ar * p.y_absr_r + p.y_r;
    let d32 = av * p.n_absv_v + ar * p.n_absr_v + p.n_v;
    let d33 = av * p.n_absv_r + ar * p.n_absr_r + p.n_r;
    [[d11, z, z], [z, d22, d23], [z, d32, d33]]
}

fn mat_vec<T: Real>(m: &[[T; 3]; 3], v: &[T; 3]) -> [T; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Vessel parameters together with the precomputed inverse mass matrix and
/// the modelling switches. All methods are pure.
#[derive(Debug, Clone)]
pub struct VesselModel {
    params: VesselParams,
    mass_inv: [[f64; 3]; 3],
    injection: DisturbanceInjection,
    current: CurrentModel,
}

impl VesselModel {
    pub fn new(params: VesselParams) -> Result<Self> {
        Self::with_options(params, DisturbanceInjection::Direct, CurrentModel::None)
    }

    pub fn with_options(
        params: VesselParams,
        injection: DisturbanceInjection,
        current: CurrentModel,
    ) -> Result<Self> {
        params.validate()?;
        let m = params.mass_matrix();
        let svd = m.svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !cond.is_finite() || cond > 1e12 {
            return Err(Error::SingularMass { cond });
        }
        let inv = m.try_inverse().ok_or(Error::SingularMass { cond })?;
        let mut mass_inv = [[0.0; 3]; 3];
        for (i, row) in mass_inv.iter_mut().enumerate() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = inv[(i, j)];
            }
        }
        Ok(Self { params, mass_inv, injection, current })
    }

    pub fn params(&self) -> &VesselParams {
        &self.params
    }

    pub fn injection(&self) -> DisturbanceInjection {
        self.injection
    }

    fn reference_velocity<T: Real>(&self, nu: [T; 3]) -> [T; 3] {
        match self.current {
            CurrentModel::None => nu,
        }
    }

    fn disturbance_force<T: Real>(&self, omega: [T; 3]) -> [T; 3] {
        match self.injection {
            DisturbanceInjection::Direct => [omega[0], omega[1], T::cst(0.0)],
            DisturbanceInjection::Allocation => {
                let b = self.params.allocation_matrix();
                let b = [
                    [T::cst(b[(0, 0)]), T::cst(b[(0, 1)]), T::cst(b[(0, 2)])],
                    [T::cst(b[(1, 0)]), T::cst(b[(1, 1)]), T::cst(b[(1, 2)])],
                    [T::cst(b[(2, 0)]), T::cst(b[(2, 1)]), T::cst(b[(2, 2)])],
                ];
                mat_vec(&b, &omega)
            }
        }
    }

    fn derivative_g<T: Real>(&self, x: &[T; NX], tau: &[T; 3], omega: &[T; 3]) -> [T; NX] {
        let p = &self.params;
        let nu = [x[3], x[4], x[5]];
        let nu_ref = self.reference_velocity(nu);
        let j = rotation_g(x[2]);
        let eta_dot = mat_vec(&j, &nu);

        let crb = coriolis_rb_g(nu, p);
        let ca = coriolis_a_g(nu, nu_ref, p);
        let d = damping_g(nu, nu_ref, p);
        let mut n = [[T::cst(0.0); 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                n[i][k] = crb[i][k] + ca[i][k] + d[i][k];
            }
        }
        let resist = mat_vec(&n, &nu);
        let dist = self.disturbance_force(*omega);
        let net = [
            tau[0] + dist[0] - resist[0],
            tau[1] + dist[1] - resist[1],
            tau[2] + dist[2] - resist[2],
        ];
        let mi = &self.mass_inv;
        let mut nu_dot = [T::cst(0.0); 3];
        for (i, nd) in nu_dot.iter_mut().enumerate() {
            *nd = net[0] * mi[i][0] + net[1] * mi[i][1] + net[2] * mi[i][2];
        }
        [eta_dot[0], eta_dot[1], eta_dot[2], nu_dot[0], nu_dot[1], nu_dot[2]]
    }

    fn rk4_g<T: Real>(&self, x: &[T; NX], tau: &[T; 3], omega: &[T; 3], ts: f64) -> [T; NX] {
        let axpy = |a: &[T; NX], k: &[T; NX], h: f64| -> [T; NX] {
            let mut out = *a;
            for i in 0..NX {
                out[i] = a[i] + k[i] * h;
            }
            out
        };
        let k1 = self.derivative_g(x, tau, omega);
        let k2 = self.derivative_g(&axpy(x, &k1, 0.5 * ts), tau, omega);
        let k3 = self.derivative_g(&axpy(x, &k2, 0.5 * ts), tau, omega);
        let k4 = self.derivative_g(&axpy(x, &k3, ts), tau, omega);
        let mut out = *x;
        for i in 0..NX {
            out[i] = x[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (ts / 6.0);
        }
        out
    }

    /// Continuous-time state derivative `[J(psi) nu ; M^-1 (tau + tau_d - (C_RB + C_A + D) nu)]`.
    pub fn continuous_dynamics(&self, s: &State, tau: &ControlInput, omega: &Disturbance) -> [f64; NX] {
        self.derivative_g(&s.to_array(), &tau.tau, omega)
    }

    fn integrate_g<T: Real>(&self, x: &[T; NX], tau: &[T; 3], omega: &[T; 3], ts: f64) -> [T; NX] {
        let h = ts / RK4_SUBSTEPS as f64;
        let mut out = *x;
        for _ in 0..RK4_SUBSTEPS {
            out = self.rk4_g(&out, tau, omega, h);
        }
        out
    }

    /// Fixed-step RK4 over `ts` with input and disturbance held constant.
    ///
    /// This is the only discretization in the crate: the predictor and the
    /// simulated plant both call it.
    pub fn discrete_step(&self, s: &State, tau: &ControlInput, omega: &Disturbance, ts: f64) -> State {
        State::from_array(self.step_array(&s.to_array(), &tau.tau, omega, ts))
    }

    pub fn step_array(&self, x: &[f64; NX], tau: &[f64; 3], omega: &[f64; 3], ts: f64) -> [f64; NX] {
        self.integrate_g(x, tau, omega, ts)
    }

    /// Next state plus its Jacobians with respect to state and input.
    pub fn step_jacobian(
        &self,
        x: &[f64; NX],
        tau: &[f64; 3],
        omega: &[f64; 3],
        ts: f64,
    ) -> ([f64; NX], SMatrix<f64, NX, NX>, SMatrix<f64, NX, NU>) {
        let xd: [Dual<9>; NX] = std::array::from_fn(|i| Dual::variable(x[i], i));
        let ud: [Dual<9>; 3] = std::array::from_fn(|i| Dual::variable(tau[i], NX + i));
        let wd: [Dual<9>; 3] = std::array::from_fn(|i| Dual::constant(omega[i]));
        let out = self.integrate_g(&xd, &ud, &wd, ts);
        let next = std::array::from_fn(|i| out[i].re);
        let a = SMatrix::<f64, NX, NX>::from_fn(|i, j| out[i].eps[j]);
        let b = SMatrix::<f64, NX, NU>::from_fn(|i, j| out[i].eps[NX + j]);
        (next, a, b)
    }
}
