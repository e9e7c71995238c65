//! Floating-point element type used throughout the engine.
//!
//! Everything is generic over [`Real`], implemented for `f64` (default, used
//! by gradient checks) and `f32` (opt-in for speed).

use std::fmt::{Debug, Display};

use num_traits::Float;

pub trait Real:
    Float + Debug + Display + Default + Send + Sync + std::iter::Sum + 'static
{
    /// Short dtype tag used in checkpoints.
    const DTYPE: &'static str;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Largest representable value strictly below `self`.
    fn step_down(self) -> Self;

    /// `c = alpha * a·b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;
    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self>;
}

macro_rules! impl_real {
    ($t:ty, $tag:expr, $gemm:path, $width:expr) => {
        impl Real for $t {
            const DTYPE: &'static str = $tag;

            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn step_down(self) -> Self {
                <$t>::next_down(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices that cover every strided index the
                // kernel touches; checked by the debug assertions below.
                debug_assert!(span(m, k, rsa, csa) <= a.len());
                debug_assert!(span(k, n, rsb, csb) <= b.len());
                debug_assert!(span(m, n, rsc, csc) <= c.len());
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
                let mut out = Vec::with_capacity(values.len() * $width);
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }

            fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self> {
                bytes
                    .chunks_exact($width)
                    .map(|c| <$t>::from_le_bytes(c.try_into().expect("chunk width")))
                    .collect()
            }
        }
    };
}

#[allow(dead_code)]
fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

impl_real!(f64, "f64", matrixmultiply::dgemm, 8);
impl_real!(f32, "f32", matrixmultiply::sgemm, 4);
