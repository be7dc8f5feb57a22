//! Safety functions for circular obstacles and straight channel borders, and
//! the discrete-time barrier residual `h(x_{k+1}) - (1 - gamma) h(x_k)`.
//!
//! A state is safe with respect to an obstacle or border when the
//! corresponding `h` is non-negative. If the residual stays non-negative at
//! every step then `h_{k+1} >= (1 - gamma) h_k`, so a trajectory that starts
//! safe stays safe.

use serde::{Deserialize, Serialize};

use crate::dynamics::VesselParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    /// Center, North (m).
    pub x: f64,
    /// Center, East (m).
    pub y: f64,
    pub radius: f64,
}

/// Line `a x + b y + c = 0` with the safe side `a x + b y + c >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BorderLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl BorderLine {
    /// Scale the coefficients to a unit normal.
    pub fn normalized(self) -> Result<Self> {
        let n = self.a.hypot(self.b);
        if !(n.is_finite() && n > 0.0 && self.c.is_finite()) {
            return Err(Error::Validation(format!(
                "border line ({}, {}, {}) has no direction",
                self.a, self.b, self.c
            )));
        }
        // lines that are already unit up to rounding are kept as is, so
        // normalizing twice gives the same bits
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(self);
        }
        Ok(Self { a: self.a / n, b: self.b / n, c: self.c / n })
    }

    /// Flip the orientation so that `point` lies on the safe side.
    pub fn oriented_towards(self, point: [f64; 2]) -> Self {
        if self.a * point[0] + self.b * point[1] + self.c < 0.0 {
            Self { a: -self.a, b: -self.b, c: -self.c }
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbfParams {
    pub gamma_obstacle: f64,
    pub gamma_border: f64,
}

impl CbfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("gamma_obstacle", self.gamma_obstacle), ("gamma_border", self.gamma_border)] {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::Validation(format!("{name} must lie in (0, 1], got {g}")));
            }
        }
        Ok(())
    }
}

pub fn obstacle_h(pos: [f64; 2], obs: &Obstacle, r_a: f64) -> f64 {
    let dx = pos[0] - obs.x;
    let dy = pos[1] - obs.y;
    let rr = obs.radius + r_a;
    -1.0 + (dx * dx + dy * dy) / (rr * rr)
}

/// Gradient of [`obstacle_h`] with respect to `(x, y)`.
pub fn obstacle_h_grad(pos: [f64; 2], obs: &Obstacle, r_a: f64) -> [f64; 2] {
    let rr = obs.radius + r_a;
    let s = 2.0 / (rr * rr);
    [s * (pos[0] - obs.x), s * (pos[1] - obs.y)]
}

/// Signed distance to the line, positive on the safe side.
pub fn border_distance(pos: [f64; 2], line: &BorderLine) -> f64 {
    (line.a * pos[0] + line.b * pos[1] + line.c) / line.a.hypot(line.b)
}

pub fn border_h(pos: [f64; 2], line: &BorderLine, p: &VesselParams) -> f64 {
    border_distance(pos, line) - p.half_diagonal()
}

/// Gradient of [`border_h`] with respect to `(x, y)`.
pub fn border_h_grad(line: &BorderLine) -> [f64; 2] {
    let n = line.a.hypot(line.b);
    [line.a / n, line.b / n]
}

pub fn cbf_residual(h_next: f64, h_now: f64, gamma: f64) -> f64 {
    (h_next - h_now) + gamma * h_now
}
