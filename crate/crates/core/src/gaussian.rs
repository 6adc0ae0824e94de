//! Information-form Gaussian messages.
//!
//! A message is stored as a precision matrix `Λ = C⁻¹` and an information
//! vector `η = Λv`. The all-zero message is the non-informative (flat) message
//! and is the identity of [`GaussianMessage::product`]. Moments exist only for
//! positive-definite precision.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize};

/// Smallest eigenvalue a precision must exceed to count as positive definite;
/// also the slack allowed below zero for positive semi-definiteness.
pub const PD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMessage {
    precision: DMatrix<f64>,
    info: DVector<f64>,
}

impl GaussianMessage {
    /// Validated constructor. The precision is symmetrized; it must be p.s.d.
    /// and a zero precision must come with a zero information vector.
    pub fn new(precision: DMatrix<f64>, info: DVector<f64>) -> Result<Self> {
        if !precision.is_square() || precision.nrows() == 0 {
            return Err(Error::InvalidInput(format!(
                "precision must be square and non-empty, got {}x{}",
                precision.nrows(),
                precision.ncols()
            )));
        }
        if info.len() != precision.nrows() {
            return Err(Error::DimensionMismatch {
                expected: precision.nrows(),
                found: info.len(),
            });
        }
        let precision = symmetrize(&precision);
        if min_eigenvalue(&precision) < -PD_TOL {
            return Err(Error::NotPositiveDefinite("message precision is indefinite"));
        }
        if precision.iter().all(|&v| v == 0.0) && info.iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidInput(
                "non-informative message must have a zero information vector".into(),
            ));
        }
        Ok(Self { precision, info })
    }

    /// Unchecked constructor for internal algebra whose results are p.s.d. by
    /// construction. Still symmetrizes and clears the information vector of a
    /// zero-precision message.
    pub(crate) fn from_parts(precision: DMatrix<f64>, mut info: DVector<f64>) -> Self {
        debug_assert_eq!(precision.nrows(), info.len());
        let precision = symmetrize(&precision);
        if precision.iter().all(|&v| v == 0.0) {
            info.fill(0.0);
        }
        Self { precision, info }
    }

    pub fn non_informative(dim: usize) -> Self {
        Self {
            precision: DMatrix::zeros(dim, dim),
            info: DVector::zeros(dim),
        }
    }

    pub fn from_moments(mean: &DVector<f64>, covariance: &DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || !covariance.is_square() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: covariance.nrows(),
            });
        }
        let chol = symmetrize(covariance)
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("covariance"))?;
        let precision = symmetrize(&chol.inverse());
        let info = &precision * mean;
        Ok(Self { precision, info })
    }

    pub fn dim(&self) -> usize {
        self.info.len()
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn info(&self) -> &DVector<f64> {
        &self.info
    }

    pub fn is_non_informative(&self) -> bool {
        self.precision.iter().all(|&v| v == 0.0)
    }

    pub fn is_positive_definite(&self) -> bool {
        min_eigenvalue(&self.precision) > PD_TOL
    }

    /// Product of two Gaussian densities: precisions and information vectors add.
    pub fn product(&self, other: &GaussianMessage) -> Result<GaussianMessage> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(Self::from_parts(
            &self.precision + &other.precision,
            &self.info + &other.info,
        ))
    }

    /// In-place product, for accumulating many factors.
    pub(crate) fn absorb(&mut self, other: &GaussianMessage) {
        debug_assert_eq!(self.dim(), other.dim());
        self.precision += &other.precision;
        self.info += &other.info;
    }

    /// `(mean, covariance)`; fails with [`Error::SingularPrecision`] unless the
    /// precision is positive definite.
    pub fn to_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if !self.is_positive_definite() {
            return Err(Error::SingularPrecision);
        }
        let chol = self
            .precision
            .clone()
            .cholesky()
            .ok_or(Error::SingularPrecision)?;
        let covariance = symmetrize(&chol.inverse());
        let mean = chol.solve(&self.info);
        Ok((mean, covariance))
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        self.to_moments().map(|(m, _)| m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax()
    }

    fn scalar(precision: f64, info: f64) -> GaussianMessage {
        GaussianMessage::new(DMatrix::from_element(1, 1, precision), DVector::from_element(1, info))
            .unwrap()
    }

    fn random_psd(dim: usize, entries: &[f64]) -> DMatrix<f64> {
        let l = DMatrix::from_iterator(dim, dim, entries.iter().copied());
        &l * l.transpose()
    }

    #[test]
    fn non_informative_is_identity() {
        let flat = GaussianMessage::non_informative(1);
        let p = flat.product(&scalar(1.0, 1.0)).unwrap();
        assert_eq!(p, scalar(1.0, 1.0));
    }

    #[test]
    fn scalar_product_moments() {
        // N(1, 1) x N(3, 1)
        let p = scalar(1.0, 1.0).product(&scalar(1.0, 3.0)).unwrap();
        assert_eq!(p.precision()[(0, 0)], 2.0);
        assert_eq!(p.info()[0], 4.0);
        let (mean, cov) = p.to_moments().unwrap();
        assert!((mean[0] - 2.0).abs() < 1e-15);
        assert!((cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn product_dimension_mismatch() {
        let r = GaussianMessage::non_informative(1).product(&GaussianMessage::non_informative(2));
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn diagonal_moments() {
        let m = GaussianMessage::new(
            DMatrix::identity(2, 2) * 2.0,
            DVector::from_vec(vec![2.0, 4.0]),
        )
        .unwrap();
        let (mean, cov) = m.to_moments().unwrap();
        assert!((mean - DVector::from_vec(vec![1.0, 2.0])).norm() < 1e-15);
        assert!(max_diff(&cov, &(DMatrix::identity(2, 2) * 0.5)) < 1e-15);
    }

    #[test]
    fn zero_precision_has_no_moments() {
        let m = GaussianMessage::non_informative(3);
        assert!(matches!(m.to_moments(), Err(Error::SingularPrecision)));
        assert!(m.is_non_informative());
    }

    #[test]
    fn rejects_invalid_messages() {
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(GaussianMessage::new(indefinite, DVector::zeros(2)).is_err());
        assert!(GaussianMessage::new(DMatrix::zeros(1, 1), DVector::from_element(1, 1.0)).is_err());
        assert!(GaussianMessage::new(DMatrix::identity(2, 2), DVector::zeros(3)).is_err());
    }

    #[test]
    fn construction_symmetrizes() {
        let lopsided = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        let m = GaussianMessage::new(lopsided, DVector::zeros(2)).unwrap();
        assert_eq!(max_diff(m.precision(), &m.precision().transpose()), 0.0);
        assert_eq!(m.precision()[(0, 1)], 0.5);
    }

    fn psd_message() -> impl Strategy<Value = GaussianMessage> {
        (1usize..=4).prop_flat_map(|d| {
            (
                proptest::collection::vec(-2.0f64..2.0, d * d),
                proptest::collection::vec(-3.0f64..3.0, d),
            )
                .prop_map(move |(l, eta)| {
                    let p = random_psd(d, &l) + DMatrix::identity(d, d) * 1e-3;
                    GaussianMessage::new(p, DVector::from_vec(eta)).unwrap()
                })
        })
    }

    fn same_dim_triple() -> impl Strategy<Value = (GaussianMessage, GaussianMessage, GaussianMessage)> {
        (1usize..=4).prop_flat_map(|d| {
            let one = (
                proptest::collection::vec(-2.0f64..2.0, d * d),
                proptest::collection::vec(-3.0f64..3.0, d),
            )
                .prop_map(move |(l, eta)| {
                    GaussianMessage::new(random_psd(d, &l), DVector::from_vec(eta)).unwrap()
                });
            (one.clone(), one.clone(), one)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn product_commutes_and_associates((a, b, c) in same_dim_triple()) {
            let ab = a.product(&b).unwrap();
            let ba = b.product(&a).unwrap();
            prop_assert!(max_diff(ab.precision(), ba.precision()) <= 1e-12);
            prop_assert!((ab.info() - ba.info()).amax() <= 1e-12);

            let left = ab.product(&c).unwrap();
            let right = a.product(&b.product(&c).unwrap()).unwrap();
            prop_assert!(max_diff(left.precision(), right.precision()) <= 1e-12);
            prop_assert!((left.info() - right.info()).amax() <= 1e-12);
        }

        #[test]
        fn moments_round_trip(m in psd_message()) {
            let (mean, cov) = m.to_moments().unwrap();
            // Λ·mean reproduces η
            let eta = m.precision() * &mean;
            prop_assert!((eta - m.info()).amax() <= 1e-10 * (1.0 + m.info().amax()));

            let back = GaussianMessage::from_moments(&mean, &cov).unwrap();
            prop_assert!(max_diff(back.precision(), m.precision()) <= 1e-10 * m.precision().amax());
            prop_assert_eq!(max_diff(back.precision(), &back.precision().transpose()), 0.0);
        }

        #[test]
        fn from_moments_then_to_moments_is_identity(m in psd_message()) {
            let (mean, cov) = m.to_moments().unwrap();
            let (mean2, cov2) = GaussianMessage::from_moments(&mean, &cov).unwrap().to_moments().unwrap();
            prop_assert!((&mean2 - &mean).amax() <= 1e-10 * (1.0 + mean.amax()));
            prop_assert!(max_diff(&cov2, &cov) <= 1e-10 * cov.amax());
        }
    }
}
