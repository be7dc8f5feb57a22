//! Smooth nonlinear programs and their solver.
//!
//! A problem implements [`Nlp`]: objective, equality constraints `c_eq(z) = 0`,
//! inequality constraints `c_in(z) >= 0`, variable bounds, and exact first
//! derivatives. [`sqp::solve`] runs sequential quadratic programming on it.

pub mod qp;
pub mod sqp;

use std::fmt;

use nalgebra::{DMatrix, DVector};

pub use sqp::{solve, write_trace, IterationRecord, SolveOptions, SolveReport, SolveStatus};

pub trait Nlp {
    fn n_vars(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;

    fn objective(&self, z: &[f64]) -> f64;
    fn gradient(&self, z: &[f64]) -> DVector<f64>;

    fn eq_constraints(&self, z: &[f64]) -> DVector<f64>;
    fn eq_jacobian(&self, z: &[f64]) -> DMatrix<f64>;

    fn ineq_constraints(&self, z: &[f64]) -> DVector<f64>;
    fn ineq_jacobian(&self, z: &[f64]) -> DMatrix<f64>;

    /// Lower and upper variable bounds; infinite entries are unbounded.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);

    /// Initial Lagrangian Hessian approximation. Identity when `None`.
    fn hessian_hint(&self) -> Option<DMatrix<f64>> {
        None
    }
}

/// Objective gradient and constraint Jacobians at one point.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub gradient: DVector<f64>,
    pub eq_jacobian: DMatrix<f64>,
    pub ineq_jacobian: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeBlock {
    Objective,
    Equality,
    Inequality,
}

/// A non-finite derivative entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonFiniteDerivative {
    pub block: DerivativeBlock,
    pub row: usize,
}

impl fmt::Display for NonFiniteDerivative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.block {
            DerivativeBlock::Objective => "objective gradient",
            DerivativeBlock::Equality => "equality Jacobian",
            DerivativeBlock::Inequality => "inequality Jacobian",
        };
        write!(f, "non-finite entry in {what} row {}", self.row)
    }
}

/// Evaluate all first derivatives and reject non-finite entries.
pub fn gradients<P: Nlp + ?Sized>(nlp: &P, z: &[f64]) -> Result<Derivatives, NonFiniteDerivative> {
    let gradient = nlp.gradient(z);
    if let Some(row) = gradient.iter().position(|v| !v.is_finite()) {
        return Err(NonFiniteDerivative { block: DerivativeBlock::Objective, row });
    }
    let eq_jacobian = nlp.eq_jacobian(z);
    if let Some(row) = first_bad_row(&eq_jacobian) {
        return Err(NonFiniteDerivative { block: DerivativeBlock::Equality, row });
    }
    let ineq_jacobian = nlp.ineq_jacobian(z);
    if let Some(row) = first_bad_row(&ineq_jacobian) {
        return Err(NonFiniteDerivative { block: DerivativeBlock::Inequality, row });
    }
    Ok(Derivatives { gradient, eq_jacobian, ineq_jacobian })
}

fn first_bad_row(m: &DMatrix<f64>) -> Option<usize> {
    (0..m.nrows()).find(|&i| m.row(i).iter().any(|v| !v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Broken;

    impl Nlp for Broken {
        fn n_vars(&self) -> usize {
            1
        }
        fn n_eq(&self) -> usize {
            0
        }
        fn n_ineq(&self) -> usize {
            2
        }
        fn objective(&self, z: &[f64]) -> f64 {
            z[0] * z[0]
        }
        fn gradient(&self, z: &[f64]) -> DVector<f64> {
            DVector::from_element(1, 2.0 * z[0])
        }
        fn eq_constraints(&self, _: &[f64]) -> DVector<f64> {
            DVector::zeros(0)
        }
        fn eq_jacobian(&self, _: &[f64]) -> DMatrix<f64> {
            DMatrix::zeros(0, 1)
        }
        fn ineq_constraints(&self, z: &[f64]) -> DVector<f64> {
            DVector::from_vec(vec![1.0, z[0].sqrt()])
        }
        fn ineq_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
            DMatrix::from_vec(2, 1, vec![0.0, 0.5 / z[0].sqrt()])
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![f64::NEG_INFINITY], vec![f64::INFINITY])
        }
    }

    #[test]
    fn reports_offending_row() {
        let err = gradients(&Broken, &[0.0]).unwrap_err();
        assert_eq!(err, NonFiniteDerivative { block: DerivativeBlock::Inequality, row: 1 });
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn constant_row_has_zero_jacobian() {
        let d = gradients(&Broken, &[4.0]).unwrap();
        assert_eq!(d.ineq_jacobian[(0, 0)], 0.0);
    }
}
