//! Double-double arithmetic (about 32 significant digits) and a small
//! scalar trait shared with `f64`.
//!
//! Used to evaluate the reference sequence loss precisely enough that
//! central differences resolve gradients many orders of magnitude below the
//! loss itself.

use std::cmp::Ordering;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::sync::OnceLock;

/// Arithmetic needed by the reference forward pass.
pub trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

const LN2: DoubleDouble = DoubleDouble {
    hi: 6.931_471_805_599_453e-1,
    lo: 2.319_046_813_846_299_6e-17,
};

/// `1/n!` for `n = 2..=9`.
const INV_FACT: [DoubleDouble; 8] = [
    DoubleDouble { hi: 0.5, lo: 0.0 },
    DoubleDouble { hi: 0.166_666_666_666_666_66, lo: 9.251_858_538_542_97e-18 },
    DoubleDouble { hi: 0.041_666_666_666_666_664, lo: 2.312_964_634_635_742_7e-18 },
    DoubleDouble { hi: 0.008_333_333_333_333_333, lo: 1.156_482_317_317_871_4e-19 },
    DoubleDouble { hi: 0.001_388_888_888_888_889, lo: -5.300_543_954_373_577e-20 },
    DoubleDouble { hi: 0.000_198_412_698_412_698_4, lo: 1.720_955_829_342_070_5e-22 },
    DoubleDouble { hi: 2.480_158_730_158_73e-5, lo: 2.151_194_786_677_588_2e-23 },
    DoubleDouble { hi: 2.755_731_922_398_589_3e-6, lo: -1.858_393_274_046_472e-22 },
];

/// `1/n` for `n = 2..=12`.
const INV_INT: [DoubleDouble; 11] = [
    DoubleDouble { hi: 0.5, lo: 0.0 },
    DoubleDouble { hi: 0.333_333_333_333_333_3, lo: 1.850_371_707_708_594e-17 },
    DoubleDouble { hi: 0.25, lo: 0.0 },
    DoubleDouble { hi: 0.2, lo: -1.110_223_024_625_156_6e-17 },
    DoubleDouble { hi: 0.166_666_666_666_666_66, lo: 9.251_858_538_542_97e-18 },
    DoubleDouble { hi: 0.142_857_142_857_142_85, lo: 7.930_164_461_608_26e-18 },
    DoubleDouble { hi: 0.125, lo: 0.0 },
    DoubleDouble { hi: 0.111_111_111_111_111_1, lo: 6.167_905_692_361_980_4e-18 },
    DoubleDouble { hi: 0.1, lo: -5.551_115_123_125_783e-18 },
    DoubleDouble { hi: 0.090_909_090_909_090_91, lo: -2.523_234_146_875_356e-18 },
    DoubleDouble { hi: 0.083_333_333_333_333_33, lo: 4.625_929_269_271_485e-18 },
];

/// Relative size below which a series term no longer changes a result.
const NEGLIGIBLE: f64 = 1e-34;

/// `1/n` for odd `n = 3..=11`.
const INV_ODD: [DoubleDouble; 5] = [
    DoubleDouble { hi: 0.333_333_333_333_333_3, lo: 1.850_371_707_708_594e-17 },
    DoubleDouble { hi: 0.2, lo: -1.110_223_024_625_156_6e-17 },
    DoubleDouble { hi: 0.142_857_142_857_142_85, lo: 7.930_164_461_608_26e-18 },
    DoubleDouble { hi: 0.111_111_111_111_111_1, lo: 6.167_905_692_361_980_4e-18 },
    DoubleDouble { hi: 0.090_909_090_909_090_91, lo: -2.523_234_146_875_356e-18 },
];

const TABLE: usize = 256;

struct Tables {
    /// `2^(j/256)`
    exp2_frac: Vec<DoubleDouble>,
    /// `ln(1 + j/256)`
    ln_grid: Vec<DoubleDouble>,
}

fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(|| Tables {
        exp2_frac: (0..TABLE)
            .map(|j| exp_by_squaring(LN2 * DoubleDouble::new(j as f64 / TABLE as f64)))
            .collect(),
        ln_grid: (0..TABLE)
            .map(|j| ln_by_newton(DoubleDouble::new(1.0 + j as f64 / TABLE as f64)))
            .collect(),
    })
}

/// `exp(r) - 1` for `|r| <= ln2 / 512`, to full double-double accuracy.
fn expm1_small(r: DoubleDouble) -> DoubleDouble {
    let mut q = INV_FACT[7];
    for c in INV_FACT[..7].iter().rev() {
        q = *c + r * q;
    }
    r + r * r * q
}

/// Table-free exponential, used to build the tables.
fn exp_by_squaring(x: DoubleDouble) -> DoubleDouble {
    let k = (x.hi / LN2.hi).round();
    let r = (x - LN2 * DoubleDouble::new(k)).scale(1.0 / 512.0);
    let mut p = expm1_small(r);
    for _ in 0..9 {
        p = p.scale(2.0) + p * p;
    }
    (p + DoubleDouble::new(1.0)).scale(2f64.powi(k as i32))
}

/// Table-free logarithm, used to build the tables.
fn ln_by_newton(x: DoubleDouble) -> DoubleDouble {
    let y = DoubleDouble::new(x.hi.ln());
    // two Newton steps on exp(y) = x, each doubling the accuracy
    let y = y + x * exp_by_squaring(-y) - DoubleDouble::new(1.0);
    y + x * exp_by_squaring(-y) - DoubleDouble::new(1.0)
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

/// Veltkamp splitting: `a = hi + lo` with both halves holding 26 bits.
#[inline]
fn split(a: f64) -> (f64, f64) {
    const SPLITTER: f64 = 134_217_729.0; // 2^27 + 1
    let t = SPLITTER * a;
    let hi = t - (t - a);
    (hi, a - hi)
}

/// Dekker's product; `mul_add` would be shorter but is a library call on
/// targets built without hardware fma.
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

impl DoubleDouble {
    pub const fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    fn scale(self, s: f64) -> Self {
        // exact for powers of two
        Self {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }
}

impl DoubleDouble {
    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    /// `exp(x) - 1` without cancellation for small `x`.
    pub fn expm1(self) -> Self {
        if self.hi.abs() > 1e-3 {
            return if self.hi.abs() <= LN2.hi / 512.0 {
                expm1_small(self)
            } else {
                self.exp() - Self::new(1.0)
            };
        }
        // x + x^2/2! + ..., stopping once terms drop out
        let (mut sum, mut power) = (self, self);
        for c in INV_FACT {
            power = power * self;
            let term = power * c;
            sum += term;
            if term.hi.abs() <= NEGLIGIBLE * sum.hi.abs() {
                break;
            }
        }
        sum
    }

    /// `ln(1 + x)` without cancellation for small `x`.
    pub fn ln_1p(self) -> Self {
        if self.hi.abs() > 1e-3 {
            return (Self::new(1.0) + self).ln();
        }
        // x - x^2/2 + x^3/3 - ..., stopping once terms drop out
        let (mut sum, mut power) = (self, self);
        for c in INV_INT {
            power = -power * self;
            let term = power * c;
            sum += term;
            if term.hi.abs() <= NEGLIGIBLE * sum.hi.abs() {
                break;
            }
        }
        sum
    }
}

/// `f64` vector with precomputed Veltkamp halves, for repeated exact
/// products against double-double scalars.
#[derive(Debug, Clone)]
pub struct SplitVec {
    value: Vec<f64>,
    hi: Vec<f64>,
    lo: Vec<f64>,
}

impl SplitVec {
    pub fn new(value: Vec<f64>) -> Self {
        let (hi, lo) = value.iter().map(|&v| split(v)).unzip();
        Self { value, hi, lo }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Double-double vector stored as separate `hi` / `lo` lanes.
#[derive(Debug, Clone, PartialEq)]
pub struct DdVec {
    hi: Vec<f64>,
    lo: Vec<f64>,
}

impl DdVec {
    pub fn zeros(n: usize) -> Self {
        Self {
            hi: vec![0.0; n],
            lo: vec![0.0; n],
        }
    }

    pub fn get(&self, i: usize) -> DoubleDouble {
        DoubleDouble {
            hi: self.hi[i],
            lo: self.lo[i],
        }
    }

    /// `self += a * x` elementwise.
    pub fn axpy(&mut self, a: DoubleDouble, x: &SplitVec) {
        assert_eq!(self.hi.len(), x.len());
        let (ah, al) = split(a.hi);
        let lanes = self.hi.iter_mut().zip(self.lo.iter_mut());
        for ((acc_hi, acc_lo), ((&v, &vh), &vl)) in lanes.zip(x.value.iter().zip(&x.hi).zip(&x.lo)) {
            let p = v * a.hi;
            let e = ((vh * ah - p) + vh * al + vl * ah) + vl * al + v * a.lo;
            let s = *acc_hi + p;
            let bb = s - *acc_hi;
            let err = (*acc_hi - (s - bb)) + (p - bb) + (e + *acc_lo);
            *acc_hi = s + err;
            *acc_lo = err - (*acc_hi - s);
        }
    }
}

impl From<f64> for DoubleDouble {
    fn from(x: f64) -> Self {
        Self::new(x)
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    #[inline]
    fn add(self, b: Self) -> Self {
        // error below 4u^2 (|a| + |b|), ample for loss differences
        let (s, e) = two_sum(self.hi, b.hi);
        let (hi, lo) = quick_two_sum(s, e + (self.lo + b.lo));
        Self { hi, lo }
    }
}

impl AddAssign for DoubleDouble {
    #[inline]
    fn add_assign(&mut self, b: Self) {
        *self = *self + b;
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    #[inline]
    fn sub(self, b: Self) -> Self {
        self + (-b)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    #[inline]
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi));
        Self { hi, lo }
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        let r = self - b * Self::new(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Self::new(q2);
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Self { hi, lo } + Self::new(q3)
    }
}

impl PartialOrd for DoubleDouble {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            ord => Some(ord),
        }
    }
}

impl Real for DoubleDouble {
    fn from_f64(x: f64) -> Self {
        Self::new(x)
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Self::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Self::new(0.0);
        }
        // x = (256 q + j) ln2/256 + r with |r| <= ln2/512
        let step = LN2.scale(1.0 / TABLE as f64);
        let n = (self.hi / step.hi).round();
        let r = self - step * Self::new(n);
        let n = n as i64;
        let (q, j) = (n.div_euclid(TABLE as i64), n.rem_euclid(TABLE as i64) as usize);
        let t = tables().exp2_frac[j];
        (t + t * expm1_small(r)).scale(2f64.powi(q as i32))
    }

    fn ln(self) -> Self {
        if self.hi <= 0.0 {
            return Self::new(if self.hi == 0.0 { f64::NEG_INFINITY } else { f64::NAN });
        }
        // x = 2^e y with y in [1, 2), then y = c (1 + d) for a grid point c
        let mut e = self.hi.log2().floor();
        let mut y = self.scale(2f64.powi(-(e as i32)));
        if y.hi >= 2.0 {
            y = y.scale(0.5);
            e += 1.0;
        } else if y.hi < 1.0 {
            y = y.scale(2.0);
            e -= 1.0;
        }
        let j = (((y.hi - 1.0) * TABLE as f64) as usize).min(TABLE - 1);
        let c = Self::new(1.0 + j as f64 / TABLE as f64);
        // ln(y / c) = 2 atanh(s), |s| <= 1/512
        let s = (y - c) / (y + c);
        let s2 = s * s;
        let mut q = INV_ODD[4];
        for k in INV_ODD[..4].iter().rev() {
            q = *k + s2 * q;
        }
        let atanh = s + s * s2 * q;
        LN2 * Self::new(e) + tables().ln_grid[j] + atanh.scale(2.0)
    }

    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::new(0.0);
        }
        let x = 1.0 / self.hi.sqrt();
        let ax = Self::new(self.hi * x);
        let diff = self - ax * ax;
        ax + Self::new(diff.hi * x * 0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Relative tolerance for large values, absolute below 1.
    fn close(a: DoubleDouble, b: DoubleDouble, tol: f64) -> bool {
        let d = a - b;
        (d.hi + d.lo).abs() <= tol * b.hi.abs().max(1.0)
    }

    #[test]
    fn arithmetic_beyond_f64() {
        let third = DoubleDouble::new(1.0) / DoubleDouble::new(3.0);
        let back = third * DoubleDouble::new(3.0);
        assert!(close(back, DoubleDouble::new(1.0), 1e-31));
        // 1 + 1e-20 is lost in f64 but kept here
        let x = DoubleDouble::new(1.0) + DoubleDouble::new(1e-20);
        assert_eq!((x - DoubleDouble::new(1.0)).hi, 1e-20);
    }

    #[test]
    fn transcendental_identities() {
        let e = DoubleDouble::new(1.0).exp();
        let e_ref = DoubleDouble {
            hi: 2.718_281_828_459_045,
            lo: 1.445_646_891_729_250_2e-16,
        };
        assert!(close(e, e_ref, 1e-30), "{e:?}");
        for x in [-30.0, -3.2, -1e-3, 0.0, 0.7, 5.5, 100.0] {
            let v = DoubleDouble::new(x);
            if x != 0.0 {
                assert!(close(v.exp().ln(), v, 1e-29), "{x}");
            }
            let s = DoubleDouble::new(x.abs() + 0.5).sqrt();
            assert!(close(s * s, DoubleDouble::new(x.abs() + 0.5), 1e-30));
        }
        let h = DoubleDouble::new(0.5).exp();
        assert!(close(h * h, e, 1e-30));
        assert!(close(DoubleDouble::new(2.0).ln(), LN2, 1e-30));
    }

    #[test]
    fn table_paths_match_table_free_paths() {
        for x in [-40.3, -7.77, -0.3466, 1e-9, 0.3466, 2.5, 33.3] {
            let v = DoubleDouble::new(x) + DoubleDouble::new(x * 1e-17);
            assert!(close(v.exp(), exp_by_squaring(v), 1e-29), "{x}");
            let p = v.exp();
            assert!(close(p.ln(), ln_by_newton(p), 1e-30), "{x}");
        }
    }

    #[test]
    fn small_argument_helpers() {
        for x in [-1e-3, -3e-7, 2e-9, 1e-5, 9.9e-4, 1.5e-3, 0.4] {
            let v = DoubleDouble::new(x);
            assert!(close(v.expm1(), exp_by_squaring(v) - DoubleDouble::new(1.0), 1e-31), "{x}");
            assert!(close(v.ln_1p(), ln_by_newton(DoubleDouble::new(1.0) + v), 1e-31), "{x}");
        }
    }

    #[test]
    fn axpy_matches_scalar_arithmetic() {
        let x = SplitVec::new(vec![0.3, -1.7e-3, 12.25, 0.0]);
        let a = DoubleDouble::new(1.0) / DoubleDouble::new(7.0);
        let mut acc = DdVec::zeros(4);
        acc.axpy(DoubleDouble::new(1.0) / DoubleDouble::new(3.0), &x);
        acc.axpy(a, &x);
        for (i, &v) in x.value.iter().enumerate() {
            let expect = (DoubleDouble::new(1.0) / DoubleDouble::new(3.0) + a) * DoubleDouble::new(v);
            assert!(close(acc.get(i), expect, 1e-31), "{i}");
        }
    }

    #[test]
    fn ordering() {
        let a = DoubleDouble { hi: 1.0, lo: 1e-20 };
        let b = DoubleDouble::new(1.0);
        assert!(a > b && b < a);
        assert!(DoubleDouble::new(-2.0) < b);
    }
}
