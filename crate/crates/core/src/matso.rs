//! Dense d×d matrix kernel with the SO(d)-specific pieces the simulator needs:
//! skew/symmetric splitting, Frobenius metrics, projection onto SO(d) and
//! Haar-random rotations.
//!
//! Matrices are plain [`nalgebra::DMatrix`] values so the dimension stays a
//! runtime quantity; [`Rotation`] and [`SkewMatrix`] are checked newtypes on top.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Dense square matrix, row/column indexed as `m[(row, col)]`.
pub type Matrix = DMatrix<f64>;

/// Default bound on `‖OOᵀ − I‖_F` accepted for a [`Rotation`].
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-9;

/// Relative bound on `‖M + Mᵀ‖_F` accepted for a [`SkewMatrix`].
pub const SKEW_TOLERANCE: f64 = 1e-12;

/// Smallest-to-largest singular value ratio below which projection refuses.
pub const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("matrix is rank deficient (singular value ratio {ratio:e})")]
    RankDeficient { ratio: f64 },
    #[error("matrix is not orthogonal: |OO^T - I|_F = {drift:e}")]
    NotOrthogonal { drift: f64 },
    #[error("matrix has negative determinant {det}")]
    NegativeDeterminant { det: f64 },
    #[error("matrix is not skew-symmetric: |M + M^T|_F = {asym:e}")]
    NotSkew { asym: f64 },
}

fn ensure_square(m: &Matrix) -> Result<(), MatError> {
    if m.nrows() != m.ncols() {
        return Err(MatError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

fn ensure_finite(m: &Matrix) -> Result<(), MatError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(MatError::NonFinite)
    }
}

/// `‖OOᵀ − I‖_F`.
pub fn orthogonality_drift(m: &Matrix) -> f64 {
    let d = m.nrows();
    (m * m.transpose() - Matrix::identity(d, d)).norm()
}

/// `‖M + Mᵀ‖_F`.
pub fn skew_drift(m: &Matrix) -> f64 {
    (m + m.transpose()).norm()
}

/// An element of SO(d), up to a stated orthogonality tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation(Matrix);

impl Rotation {
    /// Validates against [`ORTHOGONALITY_TOLERANCE`].
    pub fn new(m: Matrix) -> Result<Self, MatError> {
        Self::with_tolerance(m, ORTHOGONALITY_TOLERANCE)
    }

    /// Validates with a caller-chosen orthogonality tolerance. Used for
    /// unprojected trajectories, where the discretisation drift is the
    /// quantity being measured.
    pub fn with_tolerance(m: Matrix, tol: f64) -> Result<Self, MatError> {
        ensure_square(&m)?;
        ensure_finite(&m)?;
        let drift = orthogonality_drift(&m);
        if drift > tol {
            return Err(MatError::NotOrthogonal { drift });
        }
        let det = m.determinant();
        if det < 0.0 {
            return Err(MatError::NegativeDeterminant { det });
        }
        Ok(Self(m))
    }

    pub fn identity(d: usize) -> Self {
        Self(Matrix::identity(d, d))
    }

    /// Planar rotation by `angle` (counter-clockwise).
    pub fn planar(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix::from_row_slice(2, 2, &[c, -s, s, c]))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(&self.0 * &other.0)
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.0 * v
    }
}

impl AsRef<Matrix> for Rotation {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

/// A skew-symmetric matrix (an element of so(d)).
#[derive(Debug, Clone, PartialEq)]
pub struct SkewMatrix(Matrix);

impl SkewMatrix {
    pub fn new(m: Matrix) -> Result<Self, MatError> {
        ensure_square(&m)?;
        ensure_finite(&m)?;
        let asym = skew_drift(&m);
        if asym > SKEW_TOLERANCE * m.norm().max(1.0) {
            return Err(MatError::NotSkew { asym });
        }
        Ok(Self(m))
    }

    pub fn zeros(d: usize) -> Self {
        Self(Matrix::zeros(d, d))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

impl AsRef<Matrix> for SkewMatrix {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

/// `(M − Mᵀ)/2`.
pub fn skew_part(m: &Matrix) -> Result<SkewMatrix, MatError> {
    ensure_square(m)?;
    Ok(SkewMatrix(antisymmetrize(m)))
}

/// `(M + Mᵀ)/2`.
pub fn sym_part(m: &Matrix) -> Result<Matrix, MatError> {
    ensure_square(m)?;
    Ok((m + m.transpose()) * 0.5)
}

// Exactly skew: entry (a,b) and (b,a) are computed from the same two operands.
pub(crate) fn antisymmetrize(m: &Matrix) -> Matrix {
    let d = m.nrows();
    let mut out = Matrix::zeros(d, d);
    for a in 0..d {
        for b in (a + 1)..d {
            let v = 0.5 * (m[(a, b)] - m[(b, a)]);
            out[(a, b)] = v;
            out[(b, a)] = -v;
        }
    }
    out
}

pub fn frobenius_distance(a: &Matrix, b: &Matrix) -> Result<f64, MatError> {
    if a.shape() != b.shape() {
        return Err(MatError::DimensionMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok((a - b).norm())
}

/// Frobenius-nearest element of SO(d) to a full-rank square matrix.
pub fn project_to_rotation(m: &Matrix) -> Result<Rotation, MatError> {
    ensure_square(m)?;
    ensure_finite(m)?;
    let svd = m.clone().svd(false, false);
    let sv = &svd.singular_values;
    let largest = sv.max();
    let smallest = sv.min();
    if largest == 0.0 || smallest < RANK_TOLERANCE * largest {
        let ratio = if largest == 0.0 { 0.0 } else { smallest / largest };
        return Err(MatError::RankDeficient { ratio });
    }
    Ok(special_polar_factor(m))
}

/// `U·diag(1,…,1,det(UVᵀ))·Vᵀ` without the rank check.
///
/// This is the maximiser of `tr(Oᵀ M)` over SO(d), which is all the
/// Procrustes fit needs; for rank-deficient `M` it is one of several maximisers.
pub(crate) fn special_polar_factor(m: &Matrix) -> Rotation {
    let d = m.nrows();
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut uv = &u * &v_t;
    if uv.determinant() < 0.0 {
        // flip the direction belonging to the smallest singular value
        let weakest = svd.singular_values.imin();
        let mut u_fixed = u.clone();
        u_fixed.column_mut(weakest).neg_mut();
        uv = u_fixed * v_t;
    }
    debug_assert_eq!(uv.nrows(), d);
    Rotation(uv)
}

/// Unconstrained orthogonal polar factor `UVᵀ`, which may be a reflection.
pub(crate) fn orthogonal_polar_factor(m: &Matrix) -> Matrix {
    let svd = m.clone().svd(true, true);
    svd.u.expect("svd requested u") * svd.v_t.expect("svd requested v_t")
}

/// Haar-distributed rotation, deterministic per `seed`.
pub fn random_rotation(seed: u64, d: usize) -> Rotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_rotation_with(&mut rng, d)
}

/// Haar-distributed rotation drawn from an existing generator.
///
/// Gaussian matrix → QR → column signs fixed so `diag(R) > 0` (Haar on O(d))
/// → first column flipped when the determinant is negative (Haar on SO(d)).
pub fn random_rotation_with<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Rotation {
    if d <= 1 {
        return Rotation::identity(d.max(1));
    }
    let g = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    Rotation(q)
}

/// Skew matrix with independent Gaussian upper-triangle entries times `scale`.
pub fn random_skew_with<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> SkewMatrix {
    let mut m = Matrix::zeros(d, d);
    for a in 0..d {
        for b in (a + 1)..d {
            let v = scale * rng.sample::<f64, _>(StandardNormal);
            m[(a, b)] = v;
            m[(b, a)] = -v;
        }
    }
    SkewMatrix(m)
}

// For values just produced by antisymmetrisation.
impl SkewMatrix {
    pub(crate) fn from_antisymmetrized(m: Matrix) -> Self {
        Self(m)
    }
}
