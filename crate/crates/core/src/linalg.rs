//! Dense small-scale linear algebra and Gaussian sampling primitives.
//!
//! Ensembles are stored as `d × N` matrices whose columns are particles.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub type StateVector = DVector<f64>;

/// Columns are particles.
pub type Ensemble = DMatrix<f64>;

const SYMMETRY_RTOL: f64 = 1e-10;
const EIGEN_CLAMP: f64 = 1e-12;

/// Symmetric positive semidefinite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    /// Validates symmetry (relative 1e-10) and nonnegative spectrum.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::NotSpd(format!(
                "matrix is {}x{}, not square",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotSpd("non-finite entry".into()));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let asym = (&m - m.transpose()).amax();
        if asym > SYMMETRY_RTOL * scale {
            return Err(Error::NotSpd(format!(
                "asymmetry {asym:e} exceeds relative tolerance"
            )));
        }
        let sym = symmetrize(m);
        let min_eig = SymmetricEigen::new(sym.clone()).eigenvalues.min();
        if min_eig < -1e-12 * scale {
            return Err(Error::NotSpd(format!("negative eigenvalue {min_eig:e}")));
        }
        Ok(Self(sym))
    }

    /// For matrices that are PSD by construction (Gram matrices, identities).
    pub(crate) fn from_symmetric_unchecked(m: DMatrix<f64>) -> Self {
        Self(m)
    }

    pub fn identity(d: usize) -> Self {
        Self(DMatrix::identity(d, d))
    }

    pub fn scaled_identity(d: usize, s: f64) -> Self {
        assert!(s >= 0.0, "scaled identity needs s >= 0");
        Self(DMatrix::identity(d, d) * s)
    }

    pub fn zeros(d: usize) -> Self {
        Self(DMatrix::zeros(d, d))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        SymmetricEigen::new(self.0.clone()).eigenvalues
    }
}

fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    for j in 0..d {
        for i in (j + 1)..d {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Gaussian law `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub mean: StateVector,
    pub cov: SpdMatrix,
}

impl GaussianSpec {
    pub fn new(mean: StateVector, cov: SpdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: cov.dim(),
            });
        }
        if mean.is_empty() {
            return Err(Error::InvalidConfig("dimension must be at least 1".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mean: StateVector::zeros(d),
            cov: SpdMatrix::identity(d),
        }
    }

    /// `N(mean, s·I)`.
    pub fn isotropic(mean: StateVector, s: f64) -> Self {
        let d = mean.len();
        Self {
            mean,
            cov: SpdMatrix::scaled_identity(d, s),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Largest entrywise deviation in mean and covariance.
    pub fn max_abs_diff(&self, other: &GaussianSpec) -> f64 {
        let dm = (&self.mean - &other.mean).amax();
        let dc = (self.cov.as_matrix() - other.cov.as_matrix()).amax();
        dm.max(dc)
    }
}

/// `n` i.i.d. draws from `spec`, one per column.
///
/// Draws are taken particle by particle (a column of `d` normals at a time).
pub fn sample_gaussian(spec: &GaussianSpec, n: usize, rng: &mut RngStream) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let d = spec.dim();
    let factor = Cholesky::new(spec.cov.as_matrix().clone())
        .ok_or_else(|| Error::NotSpd("Cholesky factorization of the covariance failed".into()))?
        .unpack();
    let mut z = DMatrix::<f64>::zeros(d, n);
    rng.fill_standard_normal(z.as_mut_slice());
    let mut x = if is_identity(&factor) { z } else { &factor * z };
    for mut col in x.column_iter_mut() {
        col += &spec.mean;
    }
    Ok(x)
}

fn is_identity(m: &DMatrix<f64>) -> bool {
    m.iter().enumerate().all(|(k, &v)| {
        let (i, j) = (k % m.nrows(), k / m.nrows());
        if i == j {
            v == 1.0
        } else {
            v == 0.0
        }
    })
}

pub fn column_mean(samples: &Ensemble) -> StateVector {
    let n = samples.ncols() as f64;
    samples.column_sum() / n
}

/// Sample mean and `1/(N-1)` sample covariance of the columns.
pub fn empirical_moments(samples: &Ensemble) -> Result<(StateVector, SpdMatrix)> {
    let n = samples.ncols();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mean = column_mean(samples);
    let mut centered = samples.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let gram = &centered * centered.transpose() / (n as f64 - 1.0);
    Ok((mean, SpdMatrix::from_symmetric_unchecked(symmetrize(gram))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    Cholesky,
    /// Cholesky failed; eigenvalues were clamped at `1e-12 · λ_max`.
    ClampedEigen,
}

/// Solves `A X = B` for symmetric positive definite `A`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, SolveMethod)> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular {
            condition: f64::INFINITY,
        });
    }
    if let Some(chol) = Cholesky::<f64, Dyn>::new(a.clone()) {
        return Ok((chol.solve(b), SolveMethod::Cholesky));
    }
    let eig = SymmetricEigen::new(symmetrize(a.clone()));
    let lmax = eig.eigenvalues.max();
    if lmax <= 0.0 || !lmax.is_finite() {
        let lmin = eig.eigenvalues.min();
        return Err(Error::Singular {
            condition: if lmin > 0.0 {
                lmax / lmin
            } else {
                f64::INFINITY
            },
        });
    }
    let floor = EIGEN_CLAMP * lmax;
    let inv_diag = eig.eigenvalues.map(|l| 1.0 / l.max(floor));
    let q = &eig.eigenvectors;
    let x = q * DMatrix::from_diagonal(&inv_diag) * q.transpose() * b;
    Ok((x, SolveMethod::ClampedEigen))
}

/// Kalman-type gain `Σ (Σ + R)⁻¹`.
#[derive(Debug, Clone)]
pub struct Gain {
    pub matrix: DMatrix<f64>,
    pub method: SolveMethod,
}

impl Gain {
    pub fn used_fallback(&self) -> bool {
        self.method == SolveMethod::ClampedEigen
    }
}

pub fn gain_from_covariances(sigma: &SpdMatrix, noise_cov: &SpdMatrix) -> Result<Gain> {
    if sigma.dim() != noise_cov.dim() {
        return Err(Error::DimensionMismatch {
            expected: sigma.dim(),
            got: noise_cov.dim(),
        });
    }
    let total = sigma.as_matrix() + noise_cov.as_matrix();
    // Both factors are symmetric, so Lᵀ = (Σ+R)⁻¹ Σ.
    let (lt, method) = spd_solve(&total, sigma.as_matrix())?;
    Ok(Gain {
        matrix: lt.transpose(),
        method,
    })
}

/// Extreme eigenvalues of the symmetric part of `m`.
pub fn symmetric_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let ev = SymmetricEigen::new(sym).eigenvalues;
    (ev.min(), ev.max())
}
