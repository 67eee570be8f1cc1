use nalgebra::{DMatrix, DVector, RealField};
use num_traits::ToPrimitive;

/// Thin SVD `(U, singular values, V^T)` with `k = min(rows, cols)`.
pub type ThinSvd<T> = (DMatrix<T>, DVector<T>, DMatrix<T>);

/// Floating point scalar the numerical modules are generic over (`f32`, `f64`).
pub trait Real: RealField + Copy + ToPrimitive + Send + Sync + 'static {
    /// Converts an `f64` literal into `Self`, rounding if needed.
    #[inline]
    fn lit(x: f64) -> Self {
        nalgebra::convert(x)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Machine epsilon of the concrete type.
    fn eps() -> Self;

    /// Thin SVD, `None` if the iteration did not converge.
    ///
    /// nalgebra's bidiagonal QR loses accuracy on rank deficient inputs, which
    /// is exactly the regime here, so the decomposition is delegated to faer.
    fn thin_svd(m: &DMatrix<Self>) -> Option<ThinSvd<Self>>;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            fn eps() -> Self {
                <$t>::EPSILON
            }

            fn thin_svd(m: &DMatrix<Self>) -> Option<ThinSvd<Self>> {
                let (r, c) = m.shape();
                let k = r.min(c);
                if k == 0 {
                    return Some((DMatrix::zeros(r, 0), DVector::zeros(0), DMatrix::zeros(0, c)));
                }
                let fm = faer::Mat::<$t>::from_fn(r, c, |i, j| m[(i, j)]);
                let svd = fm.thin_svd().ok()?;
                let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
                Some((
                    DMatrix::from_fn(r, k, |i, j| u[(i, j)]),
                    DVector::from_fn(k, |i, _| s[i]),
                    DMatrix::from_fn(k, c, |i, j| v[(j, i)]),
                ))
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);
