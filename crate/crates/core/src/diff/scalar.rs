use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive, Zero};

use super::ext::F64x2;

/// Storage precision of a parameter set or tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
    /// Double-double, used only as a verification reference.
    F64x2,
}

impl Precision {
    /// Byte width of one element, also used as the on-disk precision tag.
    pub fn width(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
            Precision::F64x2 => 16,
        }
    }

    pub fn from_width(width: u8) -> Option<Self> {
        match width {
            4 => Some(Precision::F32),
            8 => Some(Precision::F64),
            _ => None,
        }
    }
}

/// Floating-point element type the tape is generic over.
///
/// Training runs in `f32`; every verification path runs in `f64`. Both go
/// through the same code.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static {
    const PRECISION: Precision;

    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    ///
    /// Strides and dimensions must describe in-bounds accesses of the
    /// given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self;

    /// Exact for `f32` and `f64`; rounds a double-double.
    fn to_f64_lossless(self) -> f64;

    fn write_le(self, out: &mut alloc::vec::Vec<u8>);

    /// Reads one little-endian element; `bytes` must have `PRECISION.width()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64_lossy(v: f64) -> f32 {
        v as f32
    }

    fn to_f64_lossless(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(buf)
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64_lossy(v: f64) -> f64 {
        v
    }

    fn to_f64_lossless(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(buf)
    }
}

impl Scalar for F64x2 {
    const PRECISION: Precision = Precision::F64x2;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: F64x2,
        a: *const F64x2,
        rsa: isize,
        csa: isize,
        b: *const F64x2,
        rsb: isize,
        csb: isize,
        beta: F64x2,
        c: *mut F64x2,
        rsc: isize,
        csc: isize,
    ) {
        for i in 0..m as isize {
            for j in 0..n as isize {
                let mut acc = F64x2::zero();
                for p in 0..k as isize {
                    acc = acc + *a.offset(i * rsa + p * csa) * *b.offset(p * rsb + j * csb);
                }
                let out = c.offset(i * rsc + j * csc);
                *out = if beta.is_zero() { alpha * acc } else { alpha * acc + beta * *out };
            }
        }
    }

    fn from_f64_lossy(v: f64) -> F64x2 {
        F64x2::from(v)
    }

    fn to_f64_lossless(self) -> f64 {
        self.hi()
    }

    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.hi().to_le_bytes());
        out.extend_from_slice(&self.lo().to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> F64x2 {
        let mut hi = [0u8; 8];
        let mut lo = [0u8; 8];
        hi.copy_from_slice(&bytes[..8]);
        lo.copy_from_slice(&bytes[8..16]);
        F64x2::new(f64::from_le_bytes(hi), f64::from_le_bytes(lo))
    }
}

/// Row-major dense matrix product `c (+)= a[m×k] · b[k×n]`, with optional
/// transposition of either operand expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // a is stored [m,k] or, when transposed, [k,m].
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the assert above bounds every strided access.
    unsafe {
        T::gemm_raw(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}
