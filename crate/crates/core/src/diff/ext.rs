//! Double-double arithmetic: a value is the unevaluated sum `hi + lo` of two
//! `f64`s with `|lo| ≤ ulp(hi) / 2`, about 106 significant bits.
//!
//! It serves as the high-precision reference of finite-difference checks.
//! Arithmetic, `sqrt`, `exp`, `exp_m1`, `ln` and the hyperbolic functions
//! are accurate to the full width; trigonometric and inverse hyperbolic
//! functions are only `f64`-accurate.

use core::cmp::Ordering;
use core::fmt;
use core::iter::Sum;
use core::num::FpCategory;
use core::ops::{Add, Div, Mul, Neg, Rem, Sub};

use num_traits::{Float, FromPrimitive, Num, One, ToPrimitive, Zero};

/// Double-double scalar.
#[derive(Clone, Copy, Default)]
pub struct F64x2 {
    hi: f64,
    lo: f64,
}

const LN_2: F64x2 = F64x2 { hi: core::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };
const SPLITTER: f64 = 134_217_729.0;

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn split(a: f64) -> (f64, f64) {
    let t = SPLITTER * a;
    let hi = t - (t - a);
    (hi, a - hi)
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

/// `2^k` for `k` in the normal exponent range.
fn pow2(k: i32) -> f64 {
    f64::from_bits(((k + 1023) as u64) << 52)
}

impl F64x2 {
    pub const fn new(hi: f64, lo: f64) -> Self {
        F64x2 { hi, lo }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return F64x2 { hi, lo: 0.0 };
        }
        let (hi, lo) = quick_two_sum(hi, lo);
        F64x2 { hi, lo }
    }

    fn mul_f64(self, b: f64) -> Self {
        let (p1, p2) = two_prod(self.hi, b);
        F64x2::renorm(p1, p2 + self.lo * b)
    }

    /// Exact multiplication by `2^k`.
    fn ldexp(self, k: i32) -> Self {
        let mut out = self;
        let mut k = k;
        while k != 0 {
            let step = k.clamp(-1000, 1000);
            let f = pow2(step);
            out = F64x2 { hi: out.hi * f, lo: out.lo * f };
            k -= step;
        }
        out
    }

    fn sqr(self) -> Self {
        self * self
    }

    /// `(exp(r) - 1, k)` with `exp(x) = (1 + r') 2^k`.
    fn exp_parts(self) -> (Self, i32) {
        let k = Float::round(self.hi / LN_2.hi);
        let r = (self - LN_2.mul_f64(k)).ldexp(-9);
        // Taylor series of exp(r) - 1 for |r| ≤ 7e-4; the tenth term is
        // below 1e-33 relative.
        let mut term = r;
        let mut sum = r;
        for i in 2..=10 {
            term = term * r / F64x2::from(i as f64);
            sum = sum + term;
        }
        // exp(2r) - 1 = (exp(r) - 1)(exp(r) + 1), applied nine times.
        for _ in 0..9 {
            sum = sum.ldexp(1) + sum.sqr();
        }
        (sum, k as i32)
    }
}

impl From<f64> for F64x2 {
    fn from(v: f64) -> Self {
        F64x2 { hi: v, lo: 0.0 }
    }
}

impl PartialEq for F64x2 {
    fn eq(&self, other: &Self) -> bool {
        self.hi == other.hi && self.lo == other.lo
    }
}

impl PartialOrd for F64x2 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            ord => Some(ord),
        }
    }
}

impl fmt::Debug for F64x2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F64x2({:e} + {:e})", self.hi, self.lo)
    }
}

impl fmt::Display for F64x2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.hi, f)
    }
}

impl Neg for F64x2 {
    type Output = F64x2;
    fn neg(self) -> F64x2 {
        F64x2 { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for F64x2 {
    type Output = F64x2;
    fn add(self, b: F64x2) -> F64x2 {
        let (s1, s2) = two_sum(self.hi, b.hi);
        if !s1.is_finite() {
            return F64x2 { hi: s1, lo: 0.0 };
        }
        let (t1, t2) = two_sum(self.lo, b.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        F64x2::renorm(s1, s2 + t2)
    }
}

impl Sub for F64x2 {
    type Output = F64x2;
    fn sub(self, b: F64x2) -> F64x2 {
        self + (-b)
    }
}

impl Mul for F64x2 {
    type Output = F64x2;
    fn mul(self, b: F64x2) -> F64x2 {
        let (p1, p2) = two_prod(self.hi, b.hi);
        if !p1.is_finite() {
            return F64x2 { hi: p1, lo: 0.0 };
        }
        F64x2::renorm(p1, p2 + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for F64x2 {
    type Output = F64x2;
    fn div(self, b: F64x2) -> F64x2 {
        let q1 = self.hi / b.hi;
        if !q1.is_finite() || b.hi == 0.0 {
            return F64x2 { hi: q1, lo: 0.0 };
        }
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        F64x2 { hi: q1, lo: q2 } + F64x2::from(q3)
    }
}

impl Rem for F64x2 {
    type Output = F64x2;
    fn rem(self, b: F64x2) -> F64x2 {
        self - Float::trunc(self / b) * b
    }
}

impl Sum for F64x2 {
    fn sum<I: Iterator<Item = F64x2>>(iter: I) -> F64x2 {
        iter.fold(F64x2::zero(), |a, b| a + b)
    }
}

impl Zero for F64x2 {
    fn zero() -> Self {
        F64x2 { hi: 0.0, lo: 0.0 }
    }

    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for F64x2 {
    fn one() -> Self {
        F64x2 { hi: 1.0, lo: 0.0 }
    }
}

impl Num for F64x2 {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;

    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(F64x2::from)
    }
}

impl ToPrimitive for F64x2 {
    fn to_i64(&self) -> Option<i64> {
        let t = Float::trunc(*self);
        t.hi.to_i64()?.checked_add(t.lo.to_i64()?)
    }

    fn to_u64(&self) -> Option<u64> {
        let t = Float::trunc(*self);
        let hi = t.hi.to_u64()?;
        let lo = t.lo.to_i64()?;
        if lo >= 0 {
            hi.checked_add(lo as u64)
        } else {
            hi.checked_sub(lo.unsigned_abs())
        }
    }

    fn to_f64(&self) -> Option<f64> {
        Some(self.hi)
    }
}

impl FromPrimitive for F64x2 {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        let lo = (n as i128 - hi as i128) as f64;
        Some(F64x2::renorm(hi, lo))
    }

    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        let lo = (n as i128 - hi as i128) as f64;
        Some(F64x2::renorm(hi, lo))
    }

    fn from_f64(n: f64) -> Option<Self> {
        Some(F64x2::from(n))
    }
}

impl num_traits::NumCast for F64x2 {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(|v| F64x2 { hi: v, lo: 0.0 })
    }
}

/// `f64`-accurate evaluation of `f` at `x`.
fn via_f64(x: F64x2, f: impl Fn(f64) -> f64) -> F64x2 {
    F64x2::from(f(x.hi))
}

impl Float for F64x2 {
    fn nan() -> Self {
        F64x2::from(f64::NAN)
    }

    fn infinity() -> Self {
        F64x2::from(f64::INFINITY)
    }

    fn neg_infinity() -> Self {
        F64x2::from(f64::NEG_INFINITY)
    }

    fn neg_zero() -> Self {
        F64x2::from(-0.0)
    }

    fn min_value() -> Self {
        F64x2::from(f64::MIN)
    }

    fn min_positive_value() -> Self {
        F64x2::from(f64::MIN_POSITIVE)
    }

    fn max_value() -> Self {
        F64x2::from(f64::MAX)
    }

    fn epsilon() -> Self {
        F64x2::from(pow2(-104))
    }

    fn is_nan(self) -> bool {
        self.hi.is_nan() || self.lo.is_nan()
    }

    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }

    fn is_finite(self) -> bool {
        self.hi.is_finite() && self.lo.is_finite()
    }

    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }

    fn classify(self) -> FpCategory {
        self.hi.classify()
    }

    fn floor(self) -> Self {
        let hi = Float::floor(self.hi);
        if hi == self.hi {
            F64x2::renorm(hi, Float::floor(self.lo))
        } else {
            F64x2::from(hi)
        }
    }

    fn ceil(self) -> Self {
        let hi = Float::ceil(self.hi);
        if hi == self.hi {
            F64x2::renorm(hi, Float::ceil(self.lo))
        } else {
            F64x2::from(hi)
        }
    }

    fn round(self) -> Self {
        let half = F64x2::from(0.5);
        if self.hi >= 0.0 {
            Float::floor(self + half)
        } else {
            Float::ceil(self - half)
        }
    }

    fn trunc(self) -> Self {
        if self.hi >= 0.0 {
            Float::floor(self)
        } else {
            Float::ceil(self)
        }
    }

    fn fract(self) -> Self {
        self - Float::trunc(self)
    }

    fn abs(self) -> Self {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }

    fn signum(self) -> Self {
        if self.is_nan() {
            self
        } else if self.hi.is_sign_negative() {
            -F64x2::one()
        } else {
            F64x2::one()
        }
    }

    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }

    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }

    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }

    fn recip(self) -> Self {
        F64x2::one() / self
    }

    fn powi(self, n: i32) -> Self {
        let mut base = self;
        let mut e = n.unsigned_abs();
        let mut acc = F64x2::one();
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base;
            }
            base = base.sqr();
            e >>= 1;
        }
        if n < 0 {
            acc.recip()
        } else {
            acc
        }
    }

    fn powf(self, n: Self) -> Self {
        if self.is_zero() {
            return if n.hi > 0.0 {
                F64x2::zero()
            } else if n.hi == 0.0 {
                F64x2::one()
            } else {
                F64x2::infinity()
            };
        }
        Float::exp(n * Float::ln(self))
    }

    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return if self.hi == 0.0 { F64x2::zero() } else { F64x2::nan() };
        }
        if !self.hi.is_finite() {
            return self;
        }
        let x = 1.0 / Float::sqrt(self.hi);
        let ax = self.hi * x;
        F64x2::from(ax) + F64x2::from((self - F64x2::from(ax).sqr()).hi * (x * 0.5))
    }

    fn exp(self) -> Self {
        if self.hi > 709.78 {
            return F64x2::infinity();
        }
        if self.hi < -745.2 {
            return F64x2::zero();
        }
        if self.is_nan() {
            return self;
        }
        let (em1, k) = self.exp_parts();
        (em1 + F64x2::one()).ldexp(k)
    }

    fn exp2(self) -> Self {
        Float::exp(self * LN_2)
    }

    fn ln(self) -> Self {
        if self.hi <= 0.0 {
            return if self.hi == 0.0 { F64x2::neg_infinity() } else { F64x2::nan() };
        }
        if !self.hi.is_finite() {
            return self;
        }
        // One Newton step on exp(x) = self doubles the f64 estimate's digits.
        let x = F64x2::from(Float::ln(self.hi));
        x + self * Float::exp(-x) - F64x2::one()
    }

    fn log(self, base: Self) -> Self {
        Float::ln(self) / Float::ln(base)
    }

    fn log2(self) -> Self {
        Float::ln(self) / LN_2
    }

    fn log10(self) -> Self {
        Float::ln(self) / Float::ln(F64x2::from(10.0))
    }

    fn max(self, other: Self) -> Self {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }

    fn min(self, other: Self) -> Self {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }

    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            F64x2::zero()
        }
    }

    fn cbrt(self) -> Self {
        if self.is_zero() {
            return self;
        }
        // Newton step on y³ = self from the f64 root.
        let y = F64x2::from(Float::cbrt(self.hi));
        y - (y * y * y - self) / (F64x2::from(3.0) * y * y)
    }

    fn hypot(self, other: Self) -> Self {
        Float::sqrt(self * self + other * other)
    }

    fn sin(self) -> Self {
        via_f64(self, <f64 as Float>::sin)
    }

    fn cos(self) -> Self {
        via_f64(self, <f64 as Float>::cos)
    }

    fn tan(self) -> Self {
        via_f64(self, <f64 as Float>::tan)
    }

    fn asin(self) -> Self {
        via_f64(self, <f64 as Float>::asin)
    }

    fn acos(self) -> Self {
        via_f64(self, <f64 as Float>::acos)
    }

    fn atan(self) -> Self {
        via_f64(self, <f64 as Float>::atan)
    }

    fn atan2(self, other: Self) -> Self {
        F64x2::from(Float::atan2(self.hi, other.hi))
    }

    fn sin_cos(self) -> (Self, Self) {
        (Float::sin(self), Float::cos(self))
    }

    fn exp_m1(self) -> Self {
        if Float::abs(self.hi) > 0.3 || self.is_nan() {
            return Float::exp(self) - F64x2::one();
        }
        self.exp_parts().0
    }

    fn ln_1p(self) -> Self {
        if Float::abs(self.hi) > 0.3 {
            return Float::ln(F64x2::one() + self);
        }
        // Newton step on exp_m1(x) = self.
        let x = F64x2::from(Float::ln_1p(self.hi));
        x - (Float::exp_m1(x) - self) / Float::exp(x)
    }

    fn sinh(self) -> Self {
        let e = Float::exp_m1(self);
        e * (e + F64x2::from(2.0)) / (e + F64x2::one()).ldexp(1)
    }

    fn cosh(self) -> Self {
        let e = Float::exp(self);
        (e + e.recip()).ldexp(-1)
    }

    fn tanh(self) -> Self {
        if Float::abs(self.hi) > 40.0 {
            return F64x2::from(Float::signum(self.hi));
        }
        let e = Float::exp_m1(self.ldexp(1));
        e / (e + F64x2::from(2.0))
    }

    fn asinh(self) -> Self {
        via_f64(self, <f64 as Float>::asinh)
    }

    fn acosh(self) -> Self {
        via_f64(self, <f64 as Float>::acosh)
    }

    fn atanh(self) -> Self {
        via_f64(self, <f64 as Float>::atanh)
    }

    fn integer_decode(self) -> (u64, i16, i8) {
        Float::integer_decode(self.hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: F64x2, expected_hi: f64, expected_lo: f64, tol: f64) -> bool {
        let d = a - F64x2::new(expected_hi, expected_lo);
        d.hi.abs() <= tol * expected_hi.abs()
    }

    #[test]
    fn arithmetic_carries_extra_digits() {
        let third = F64x2::one() / F64x2::from(3.0);
        let back = third * F64x2::from(3.0) - F64x2::one();
        assert!(back.hi.abs() < 1e-31);
        let tiny = F64x2::from(1.0) + F64x2::from(1e-20);
        assert_eq!(tiny.lo, 1e-20);
        assert_eq!((tiny - F64x2::one()).hi, 1e-20);
    }

    #[test]
    fn exp_and_ln_match_reference_digits() {
        // exp(1) = 2.718281828459045 + 1.4456468917292502e-16.
        assert!(close(Float::exp(F64x2::one()), core::f64::consts::E, 1.4456468917292502e-16, 1e-30));
        let x = F64x2::from(0.3);
        assert!((Float::ln(Float::exp(x)) - x).hi.abs() < 1e-31);
        let y = F64x2::from(-7.25);
        assert!(((Float::exp(y) * Float::exp(-y)) - F64x2::one()).hi.abs() < 1e-30);
        let two = F64x2::from(2.0);
        assert!(close(Float::sqrt(two), core::f64::consts::SQRT_2, -9.667293313452913e-17, 1e-30));
        assert!(close(Float::ln(two), LN_2.hi, LN_2.lo, 1e-30));
    }

    #[test]
    fn tanh_is_accurate_near_zero_and_saturates() {
        let x = F64x2::from(1e-5);
        // tanh x = x - x³/3 + 2x⁵/15.
        let series = x - x * x * x / F64x2::from(3.0) + F64x2::from(2.0) * x.powi(5) / F64x2::from(15.0);
        assert!(((Float::tanh(x) - series) / series).hi.abs() < 1e-30);
        assert_eq!(Float::tanh(F64x2::from(50.0)), F64x2::one());
        assert_eq!(Float::tanh(F64x2::from(-50.0)), -F64x2::one());
    }

    #[test]
    fn non_finite_values_propagate() {
        assert!(Float::is_infinite(F64x2::from(f64::MAX) * F64x2::from(2.0)));
        assert!(Float::is_nan(F64x2::zero() / F64x2::zero()));
        assert_eq!(Float::exp(F64x2::from(-1000.0)), F64x2::zero());
    }
}
