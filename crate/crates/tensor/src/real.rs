use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Element type tag stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type of the engine: `f32` for training, `f64` for
/// gradient checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn extend_le_bytes(self, out: &mut Vec<u8>);

    fn from_le_slice(bytes: &[u8]) -> Self;

    /// `c <- alpha * a * b + beta * c` over strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
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
}

macro_rules! impl_real {
    ($t:ty, $tag:expr, $gemm:path, $width:expr) => {
        impl Real for $t {
            const DTYPE: DType = $tag;

            fn extend_le_bytes(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn from_le_slice(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $width];
                buf.copy_from_slice(&bytes[..$width]);
                <$t>::from_le_bytes(buf)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
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
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs buffer too small");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs buffer too small");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output buffer too small");
                // SAFETY: every strided access stays inside the spans asserted above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm, 4);
impl_real!(f64, DType::F64, matrixmultiply::dgemm, 8);
