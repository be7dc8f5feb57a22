//! Sinusoidal water-flow disturbance and the quantized disturbance grid.

use serde::{Deserialize, Serialize};

use crate::dynamics::Disturbance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceBounds {
    pub w_min: f64,
    pub w_max: f64,
    pub levels: usize,
}

impl DisturbanceBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_min.is_finite() && self.w_max.is_finite() && self.w_min < self.w_max) {
            return Err(Error::Validation(format!(
                "disturbance bounds need w_min < w_max, got [{}, {}]",
                self.w_min, self.w_max
            )));
        }
        if self.levels < 2 {
            return Err(Error::Validation(format!(
                "disturbance levels must be >= 2, got {}",
                self.levels
            )));
        }
        Ok(())
    }

    pub fn contains(&self, w: f64) -> bool {
        w >= self.w_min && w <= self.w_max
    }
}

/// `W = W_x x W_y`; both axes share the same bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceGrid {
    pub levels_x: Vec<f64>,
    pub levels_y: Vec<f64>,
}

impl DisturbanceGrid {
    pub fn len(&self) -> usize {
        self.levels_x.len() * self.levels_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point `(i, j)` in row-major order (x outer, y inner).
    pub fn point(&self, i: usize, j: usize) -> Disturbance {
        [self.levels_x[i], self.levels_y[j], 0.0]
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
    v[n - 1] = hi;
    v
}

pub fn make_grid(b: &DisturbanceBounds) -> DisturbanceGrid {
    DisturbanceGrid {
        levels_x: linspace(b.w_min, b.w_max, b.levels),
        levels_y: linspace(b.w_min, b.w_max, b.levels),
    }
}

pub fn flow_force(x: f64, y: f64) -> f64 {
    let a = (x + y).sin();
    let b = (x - y).sin();
    (a * a + b * b).sqrt()
}

/// Full-circle flow direction; 0 where the flow vanishes.
pub fn flow_angle(x: f64, y: f64) -> f64 {
    let a = (x + y).sin();
    let b = (x - y).sin();
    if a == 0.0 && b == 0.0 {
        0.0
    } else {
        b.atan2(a)
    }
}

/// Disturbance `[f cos(beta), f sin(beta), 0]` felt at position `(x, y)`.
pub fn realized_disturbance(x: f64, y: f64) -> Disturbance {
    let f = flow_force(x, y);
    let beta = flow_angle(x, y);
    [f * beta.cos(), f * beta.sin(), 0.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, SQRT_2};

    #[test]
    fn force_examples() {
        assert_eq!(flow_force(0.0, 0.0), 0.0);
        assert!((flow_force(FRAC_PI_2, 0.0) - SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn angle_examples() {
        assert!((flow_angle(FRAC_PI_2, 0.0) - FRAC_PI_4).abs() < 1e-15);
        assert!((flow_angle(0.0, FRAC_PI_2) + FRAC_PI_4).abs() < 1e-15);
        assert_eq!(flow_angle(0.0, 0.0), 0.0);
    }

    #[test]
    fn disturbance_examples() {
        assert_eq!(realized_disturbance(0.0, 0.0), [0.0; 3]);
        let w = realized_disturbance(FRAC_PI_2, 0.0);
        assert!((w[0] - 1.0).abs() < 1e-15 && (w[1] - 1.0).abs() < 1e-15 && w[2] == 0.0);
    }

    #[test]
    fn grid_examples() {
        let b = DisturbanceBounds { w_min: -SQRT_2, w_max: SQRT_2, levels: 2 };
        assert_eq!(make_grid(&b).levels_x, vec![-SQRT_2, SQRT_2]);

        let g = make_grid(&DisturbanceBounds { levels: 20, ..b });
        assert_eq!(g.levels_x.len(), 20);
        assert_eq!(g.len(), 400);
        assert_eq!(g.levels_x[0], -SQRT_2);
        assert_eq!(g.levels_x[19], SQRT_2);
        for w in g.levels_x.windows(2) {
            assert!(((w[1] - w[0]) - 0.148_864_585_5).abs() < 1e-9);
        }

        let g = make_grid(&DisturbanceBounds { w_min: -1.0, w_max: 1.0, levels: 3 });
        assert_eq!(g.levels_y, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn bounds_validation() {
        assert!(DisturbanceBounds { w_min: 1.0, w_max: 1.0, levels: 3 }.validate().is_err());
        assert!(DisturbanceBounds { w_min: -1.0, w_max: 1.0, levels: 1 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn polar_decomposition(x in -50.0..50.0f64, y in -50.0..50.0f64) {
            let f = flow_force(x, y);
            prop_assert!((0.0..=SQRT_2 + 1e-15).contains(&f));
            let w = realized_disturbance(x, y);
            prop_assert!((w[0].hypot(w[1]) - f).abs() < 1e-12);
            // two-argument angle recovers the signed components
            prop_assert!((w[0] - (x + y).sin()).abs() < 1e-12);
            prop_assert!((w[1] - (x - y).sin()).abs() < 1e-12);
        }

        #[test]
        fn periodic_in_sum_and_difference(x in -10.0..10.0f64, y in -10.0..10.0f64,
                                          k in -3i32..3, l in -3i32..3) {
            // shift (x+y) by 2*pi*k and (x-y) by 2*pi*l
            let s = 2.0 * PI * k as f64;
            let d = 2.0 * PI * l as f64;
            let (x2, y2) = (x + (s + d) / 2.0, y + (s - d) / 2.0);
            prop_assert!((flow_force(x, y) - flow_force(x2, y2)).abs() < 1e-9);
            let w1 = realized_disturbance(x, y);
            let w2 = realized_disturbance(x2, y2);
            prop_assert!((w1[0] - w2[0]).abs() < 1e-9 && (w1[1] - w2[1]).abs() < 1e-9);
        }

        #[test]
        fn grid_sorted_unique(lo in -5.0..0.0f64, span in 0.1..5.0f64, n in 2usize..40) {
            let b = DisturbanceBounds { w_min: lo, w_max: lo + span, levels: n };
            let g = make_grid(&b);
            prop_assert_eq!(g.levels_x[0], b.w_min);
            prop_assert_eq!(g.levels_x[n - 1], b.w_max);
            prop_assert!(g.levels_x.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
