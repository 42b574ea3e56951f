//! Scalar arithmetic with an exact rational default and a float fallback.
//!
//! Linear and quadratic computations (means, variances, quantile
//! minimization, measure algebra) stay in [`Scalar::Exact`] so that equality
//! checks are witnesses, not tolerance calls.  Square roots, exponentials and
//! non-integer powers switch to [`Scalar::Approx`]; comparisons involving a
//! float use a relative tolerance of `1e-9` with an absolute floor of
//! `1e-12`.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::str::FromStr;

use num_bigint::BigInt;
use num_integer::Roots;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Relative tolerance for comparisons involving a float-valued scalar.
pub const REL_TOL: f64 = 1e-9;
/// Absolute floor under which float differences are ignored.
pub const ABS_TOL: f64 = 1e-12;

/// A number that is either an exact rational or a float approximation.
///
/// Arithmetic keeps exactness whenever both operands are exact and degrades
/// to `f64` otherwise.
#[derive(Clone, Debug)]
pub enum Scalar {
    Exact(BigRational),
    Approx(f64),
}

/// Numeric mode a computation (or a comparison) ran in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum NumericMode {
    RationalExact,
    FloatTolerance,
}

impl fmt::Display for NumericMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericMode::RationalExact => write!(f, "rational-exact"),
            NumericMode::FloatTolerance => write!(f, "float-tolerance"),
        }
    }
}

pub fn rat(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

pub fn rat_int(num: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(num))
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or_else(|| {
        // Fall back to a quotient of lossy conversions for huge terms.
        let n = r.numer().to_f64().unwrap_or(f64::NAN);
        let d = r.denom().to_f64().unwrap_or(f64::NAN);
        n / d
    })
}

/// Exact square root of a rational if both numerator and denominator are
/// perfect squares.
fn exact_sqrt(r: &BigRational) -> Option<BigRational> {
    if r.is_negative() {
        return None;
    }
    let n = r.numer();
    let d = r.denom();
    let ns = n.sqrt();
    let ds = d.sqrt();
    if &(&ns * &ns) == n && &(&ds * &ds) == d {
        Some(BigRational::new(ns, ds))
    } else {
        None
    }
}

impl Scalar {
    pub fn zero() -> Self {
        Scalar::Exact(BigRational::zero())
    }

    pub fn one() -> Self {
        Scalar::Exact(BigRational::one())
    }

    pub fn from_int(v: i64) -> Self {
        Scalar::Exact(rat_int(v))
    }

    pub fn from_ratio(num: i64, den: i64) -> Self {
        Scalar::Exact(rat(num, den))
    }

    pub fn from_rational(r: BigRational) -> Self {
        Scalar::Exact(r)
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, Scalar::Exact(_))
    }

    pub fn mode(&self) -> NumericMode {
        match self {
            Scalar::Exact(_) => NumericMode::RationalExact,
            Scalar::Approx(_) => NumericMode::FloatTolerance,
        }
    }

    pub fn as_rational(&self) -> Option<&BigRational> {
        match self {
            Scalar::Exact(r) => Some(r),
            Scalar::Approx(_) => None,
        }
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Scalar::Exact(r) => rational_to_f64(r),
            Scalar::Approx(x) => *x,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Scalar::Exact(r) => r.is_zero(),
            Scalar::Approx(x) => *x == 0.0,
        }
    }

    pub fn is_negative(&self) -> bool {
        match self {
            Scalar::Exact(r) => r.is_negative(),
            Scalar::Approx(x) => *x < 0.0,
        }
    }

    pub fn abs(&self) -> Scalar {
        match self {
            Scalar::Exact(r) => Scalar::Exact(r.abs()),
            Scalar::Approx(x) => Scalar::Approx(x.abs()),
        }
    }

    /// Square root; exact when the argument is a perfect rational square.
    pub fn sqrt(&self) -> Scalar {
        match self {
            Scalar::Exact(r) => match exact_sqrt(r) {
                Some(s) => Scalar::Exact(s),
                None => Scalar::Approx(rational_to_f64(r).sqrt()),
            },
            Scalar::Approx(x) => Scalar::Approx(x.sqrt()),
        }
    }

    /// Natural exponential; stays exact only at zero.
    pub fn exp(&self) -> Scalar {
        match self {
            Scalar::Exact(r) if r.is_zero() => Scalar::one(),
            other => Scalar::Approx(other.to_f64().exp()),
        }
    }

    /// Natural logarithm; stays exact only at one.
    pub fn ln(&self) -> Scalar {
        match self {
            Scalar::Exact(r) if r.is_one() => Scalar::zero(),
            other => Scalar::Approx(other.to_f64().ln()),
        }
    }

    /// `self` raised to a rational power; exact for non-negative integer
    /// exponents.
    pub fn pow_rational(&self, e: &BigRational) -> Scalar {
        if e.is_integer() && !e.is_negative() {
            if let (Scalar::Exact(base), Some(k)) = (self, e.to_integer().to_u32()) {
                if k <= 64 {
                    let mut acc = BigRational::one();
                    for _ in 0..k {
                        acc *= base;
                    }
                    return Scalar::Exact(acc);
                }
            }
        }
        Scalar::Approx(self.to_f64().powf(rational_to_f64(e)))
    }

    pub fn min(self, other: Scalar) -> Scalar {
        if compare(&self, &other) == Ordering::Greater {
            other
        } else {
            self
        }
    }

    pub fn max(self, other: Scalar) -> Scalar {
        if compare(&self, &other) == Ordering::Less {
            other
        } else {
            self
        }
    }

    /// Positive part `max(self, 0)`.
    pub fn positive_part(&self) -> Scalar {
        if self.is_negative() {
            Scalar::zero()
        } else {
            self.clone()
        }
    }
}

/// Total order used for quantiles and blockwise maxima.  Exact pairs compare
/// exactly; anything involving a float compares as `f64`.
pub fn compare(a: &Scalar, b: &Scalar) -> Ordering {
    match (a, b) {
        (Scalar::Exact(x), Scalar::Exact(y)) => x.cmp(y),
        _ => a.to_f64().partial_cmp(&b.to_f64()).unwrap_or(Ordering::Equal),
    }
}

fn float_close(a: f64, b: f64) -> bool {
    let diff = (a - b).abs();
    diff <= ABS_TOL || diff <= REL_TOL * a.abs().max(b.abs())
}

/// Equality respecting the numeric mode: exact when both sides are exact,
/// tolerance-based as soon as a float is involved.
pub fn scalar_eq(a: &Scalar, b: &Scalar) -> bool {
    match (a, b) {
        (Scalar::Exact(x), Scalar::Exact(y)) => x == y,
        _ => float_close(a.to_f64(), b.to_f64()),
    }
}

/// `a <= b`, allowing tolerance slack in float mode.
pub fn scalar_le(a: &Scalar, b: &Scalar) -> bool {
    match (a, b) {
        (Scalar::Exact(x), Scalar::Exact(y)) => x <= y,
        _ => {
            let (x, y) = (a.to_f64(), b.to_f64());
            x <= y || float_close(x, y)
        }
    }
}

/// Mode of a comparison between two scalars.
pub fn pair_mode(a: &Scalar, b: &Scalar) -> NumericMode {
    if a.is_exact() && b.is_exact() {
        NumericMode::RationalExact
    } else {
        NumericMode::FloatTolerance
    }
}

impl PartialEq for Scalar {
    fn eq(&self, other: &Self) -> bool {
        scalar_eq(self, other)
    }
}

macro_rules! scalar_binop {
    ($trait:ident, $method:ident, $op:tt) => {
        impl $trait for &Scalar {
            type Output = Scalar;
            fn $method(self, rhs: &Scalar) -> Scalar {
                match (self, rhs) {
                    (Scalar::Exact(a), Scalar::Exact(b)) => Scalar::Exact(a $op b),
                    _ => Scalar::Approx(self.to_f64() $op rhs.to_f64()),
                }
            }
        }
        impl $trait for Scalar {
            type Output = Scalar;
            fn $method(self, rhs: Scalar) -> Scalar {
                (&self).$method(&rhs)
            }
        }
    };
}

scalar_binop!(Add, add, +);
scalar_binop!(Sub, sub, -);
scalar_binop!(Mul, mul, *);
scalar_binop!(Div, div, /);

impl Neg for &Scalar {
    type Output = Scalar;
    fn neg(self) -> Scalar {
        match self {
            Scalar::Exact(r) => Scalar::Exact(-r),
            Scalar::Approx(x) => Scalar::Approx(-x),
        }
    }
}

impl Neg for Scalar {
    type Output = Scalar;
    fn neg(self) -> Scalar {
        -&self
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Exact(r) => write!(f, "{}", r),
            Scalar::Approx(x) => write!(f, "~{}", x),
        }
    }
}

/// Parses "p/q", integer, decimal ("0.25") or float ("~1.5e-3") literals.
pub fn parse_rational(s: &str) -> Result<BigRational, String> {
    let s = s.trim();
    if let Ok(r) = BigRational::from_str(s) {
        return Ok(r);
    }
    if let Ok(i) = BigInt::from_str(s) {
        return Ok(BigRational::from_integer(i));
    }
    // Decimal literal: sign, digits, '.', digits.
    if let Some(dot) = s.find('.') {
        let (int_part, frac_part) = (&s[..dot], &s[dot + 1..]);
        if frac_part.chars().all(|c| c.is_ascii_digit()) && !frac_part.is_empty() {
            let negative = int_part.starts_with('-');
            let int_digits = int_part.trim_start_matches(['-', '+']);
            if int_digits.chars().all(|c| c.is_ascii_digit()) {
                let int_val = if int_digits.is_empty() {
                    BigInt::zero()
                } else {
                    BigInt::from_str(int_digits).map_err(|e| e.to_string())?
                };
                let frac_val = BigInt::from_str(frac_part).map_err(|e| e.to_string())?;
                let scale = BigInt::from(10u32).pow(frac_part.len() as u32);
                let mut val = BigRational::from_integer(int_val)
                    + BigRational::new(frac_val, scale);
                if negative {
                    val = -val;
                }
                return Ok(val);
            }
        }
    }
    Err(format!("cannot parse `{}` as a rational number", s))
}

impl FromStr for Scalar {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix('~') {
            return rest
                .parse::<f64>()
                .map(Scalar::Approx)
                .map_err(|e| e.to_string());
        }
        match parse_rational(s) {
            Ok(r) => Ok(Scalar::Exact(r)),
            Err(e) => s.parse::<f64>().map(Scalar::Approx).map_err(|_| e),
        }
    }
}

impl serde::Serialize for Scalar {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for Scalar {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_arithmetic_stays_exact() {
        let a = Scalar::from_ratio(1, 3);
        let b = Scalar::from_ratio(1, 6);
        let sum = &a + &b;
        assert!(sum.is_exact());
        assert_eq!(sum, Scalar::from_ratio(1, 2));
    }

    #[test]
    fn mixed_arithmetic_degrades() {
        let a = Scalar::from_ratio(1, 3);
        let b = Scalar::Approx(0.5);
        assert!(!(&a + &b).is_exact());
    }

    #[test]
    fn perfect_square_root_is_exact() {
        let v = Scalar::from_ratio(9, 4).sqrt();
        assert!(v.is_exact());
        assert_eq!(v, Scalar::from_ratio(3, 2));
        assert!(!Scalar::from_int(2).sqrt().is_exact());
    }

    #[test]
    fn tolerance_comparison() {
        let a = Scalar::Approx(1.0);
        let b = Scalar::Approx(1.0 + 1e-12);
        assert!(scalar_eq(&a, &b));
        let c = Scalar::Approx(1.0 + 1e-6);
        assert!(!scalar_eq(&a, &c));
    }

    #[test]
    fn parse_literals() {
        assert_eq!(parse_rational("3/4").unwrap(), rat(3, 4));
        assert_eq!(parse_rational("-2").unwrap(), rat_int(-2));
        assert_eq!(parse_rational("0.25").unwrap(), rat(1, 4));
        assert_eq!(parse_rational("-1.5").unwrap(), rat(-3, 2));
        let s: Scalar = "~0.125".parse().unwrap();
        assert!(!s.is_exact());
    }

    #[test]
    fn positive_integer_powers_are_exact() {
        let v = Scalar::from_ratio(3, 2).pow_rational(&rat_int(2));
        assert_eq!(v, Scalar::from_ratio(9, 4));
    }
}
