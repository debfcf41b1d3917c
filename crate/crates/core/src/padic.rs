//! Finite-precision arithmetic in totally ramified extensions `Q_p(π)`, `π^e = p`.
//!
//! A scalar is stored as `π^val · u` with `u` a unit of the valuation ring,
//! known modulo `π^(prec - val)`. Valuations and precisions are counted in
//! `π`-adic digits, so `v(p) = e` internally; divide by `e` for the
//! normalisation `v(p) = 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported ramification index.
pub const MAX_RAMIFICATION: usize = 4;

/// Largest modulus used for digit storage; products must fit in `u128`.
const MODULUS_LIMIT: u64 = 1 << 62;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PadicError {
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("division by exact zero")]
    DivisionByZero,
    #[error("precision exhausted: {0}")]
    PrecisionExhausted(String),
    #[error("operands live in different fields")]
    FieldMismatch,
    #[error("exponential does not converge: v(x) = {val}/{e} <= 1/(p-1)")]
    ExpDomain { val: i64, e: u32 },
    #[error("Hensel precondition violated: v(P(x0)) = {defect}, v(P'(x0)) = {deriv}")]
    HenselPrecondition { defect: Val, deriv: Val },
    #[error("derivative vanishes to working precision")]
    DerivativeVanishes,
    #[error("cannot parse scalar literal {0:?}")]
    Parse(String),
}

/// A valuation in `π`-adic digits, or `+∞`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Val {
    Fin(i64),
    Inf,
}

impl Val {
    pub fn is_finite(self) -> bool {
        matches!(self, Val::Fin(_))
    }

    pub fn finite(self) -> Option<i64> {
        match self {
            Val::Fin(v) => Some(v),
            Val::Inf => None,
        }
    }

    pub fn add(self, other: Val) -> Val {
        match (self, other) {
            (Val::Fin(a), Val::Fin(b)) => Val::Fin(a + b),
            _ => Val::Inf,
        }
    }

    pub fn sub_fin(self, k: i64) -> Val {
        match self {
            Val::Fin(a) => Val::Fin(a - k),
            Val::Inf => Val::Inf,
        }
    }
}

impl fmt::Display for Val {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Val::Fin(v) => write!(f, "{v}"),
            Val::Inf => write!(f, "inf"),
        }
    }
}

impl Serialize for Val {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Val::Fin(v) => s.serialize_i64(*v),
            Val::Inf => s.serialize_str("inf"),
        }
    }
}

/// Base prime, ramification index and absolute precision `N` (in `π`-digits).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FieldSpecRaw", into = "FieldSpecRaw")]
pub struct FieldSpec {
    p: u64,
    e: u32,
    prec: u32,
    /// Digits of `p` carried per coefficient.
    k: u32,
    modulus: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldSpecRaw {
    p: u64,
    #[serde(default = "one_u32")]
    e: u32,
    prec: u32,
}

fn one_u32() -> u32 {
    1
}

impl TryFrom<FieldSpecRaw> for FieldSpec {
    type Error = PadicError;
    fn try_from(r: FieldSpecRaw) -> Result<Self, PadicError> {
        FieldSpec::new(r.p, r.e, r.prec)
    }
}

impl From<FieldSpec> for FieldSpecRaw {
    fn from(f: FieldSpec) -> Self {
        FieldSpecRaw { p: f.p, e: f.e, prec: f.prec }
    }
}

impl fmt::Debug for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q_{}(pi^{}={}) mod pi^{}", self.p, self.e, self.p, self.prec)
    }
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

impl FieldSpec {
    pub fn new(p: u64, e: u32, prec: u32) -> Result<Self, PadicError> {
        if !is_prime(p) {
            return Err(PadicError::InvalidField(format!("{p} is not prime")));
        }
        if p == 2 {
            return Err(PadicError::InvalidField("p = 2 is not supported".into()));
        }
        if e == 0 || e as usize > MAX_RAMIFICATION {
            return Err(PadicError::InvalidField(format!(
                "ramification index {e} outside 1..={MAX_RAMIFICATION}"
            )));
        }
        if prec < 4 * e {
            return Err(PadicError::InvalidField(format!("precision {prec} < 4e = {}", 4 * e)));
        }
        let k = prec.div_ceil(e) + 2;
        let mut modulus: u64 = 1;
        for _ in 0..k {
            modulus = match modulus.checked_mul(p) {
                Some(m) if m < MODULUS_LIMIT => m,
                _ => {
                    return Err(PadicError::InvalidField(format!(
                        "p^{k} exceeds the 62-bit digit store; lower the precision"
                    )))
                }
            };
        }
        Ok(FieldSpec { p, e, prec, k, modulus })
    }

    pub fn p(&self) -> u64 {
        self.p
    }

    pub fn e(&self) -> u32 {
        self.e
    }

    /// Absolute precision `N` in `π`-digits.
    pub fn prec(&self) -> i64 {
        self.prec as i64
    }

    pub fn with_prec(&self, prec: u32) -> Result<Self, PadicError> {
        FieldSpec::new(self.p, self.e, prec)
    }

    fn ei(&self) -> i64 {
        self.e as i64
    }

    fn pow(&self, k: u32) -> u64 {
        if k >= self.k {
            return 0;
        }
        self.p.pow(k)
    }

    fn mulmod(&self, a: u64, b: u64) -> u64 {
        ((a as u128 * b as u128) % self.modulus as u128) as u64
    }

    fn addmod(&self, a: u64, b: u64) -> u64 {
        let s = a as u128 + b as u128;
        (s % self.modulus as u128) as u64
    }

    fn negmod(&self, a: u64) -> u64 {
        if a == 0 {
            0
        } else {
            self.modulus - a
        }
    }

    fn reduce_i128(&self, x: i128) -> u64 {
        x.rem_euclid(self.modulus as i128) as u64
    }

    fn inv_int(&self, a: u64) -> u64 {
        let (mut r0, mut r1) = (self.modulus as i128, a as i128);
        let (mut t0, mut t1) = (0i128, 1i128);
        while r1 != 0 {
            let q = r0 / r1;
            (r0, r1) = (r1, r0 - q * r1);
            (t0, t1) = (t1, t0 - q * t1);
        }
        debug_assert_eq!(r0, 1, "inverting a non-unit digit");
        self.reduce_i128(t0)
    }
}

/// Coefficients `a_0 + a_1 π + … + a_{e-1} π^{e-1}` of an integral element, each mod `p^k`.
type Digits = [u64; MAX_RAMIFICATION];

const ZERO_DIGITS: Digits = [0; MAX_RAMIFICATION];

fn vp(mut a: u64, p: u64) -> i64 {
    let mut v = 0;
    while a % p == 0 {
        a /= p;
        v += 1;
    }
    v
}

impl FieldSpec {
    fn d_add(&self, a: &Digits, b: &Digits) -> Digits {
        let mut c = ZERO_DIGITS;
        for i in 0..self.e as usize {
            c[i] = self.addmod(a[i], b[i]);
        }
        c
    }

    fn d_neg(&self, a: &Digits) -> Digits {
        let mut c = ZERO_DIGITS;
        for i in 0..self.e as usize {
            c[i] = self.negmod(a[i]);
        }
        c
    }

    fn d_mul(&self, a: &Digits, b: &Digits) -> Digits {
        let e = self.e as usize;
        let mut wide = [0u64; 2 * MAX_RAMIFICATION];
        for i in 0..e {
            if a[i] == 0 {
                continue;
            }
            for j in 0..e {
                wide[i + j] = self.addmod(wide[i + j], self.mulmod(a[i], b[j]));
            }
        }
        let mut c = ZERO_DIGITS;
        for k in 0..e {
            c[k] = self.addmod(wide[k], self.mulmod(self.p, wide[k + e]));
        }
        c
    }

    fn d_scale(&self, a: &Digits, s: u64) -> Digits {
        let mut c = ZERO_DIGITS;
        for i in 0..self.e as usize {
            c[i] = self.mulmod(a[i], s);
        }
        c
    }

    /// Reduce modulo `π^r`.
    fn d_trunc(&self, a: &Digits, r: i64) -> Digits {
        let mut c = ZERO_DIGITS;
        for (i, ci) in c.iter_mut().enumerate().take(self.e as usize) {
            let rem = r - i as i64;
            if rem > 0 {
                let t = (rem as u64).div_ceil(self.e as u64) as u32;
                let m = self.pow(t);
                *ci = if m == 0 { a[i] } else { a[i] % m };
            }
        }
        c
    }

    fn d_val(&self, a: &Digits) -> Option<i64> {
        (0..self.e as usize)
            .filter(|&i| a[i] != 0)
            .map(|i| self.ei() * vp(a[i], self.p) + i as i64)
            .min()
    }

    /// Multiply by `π^k`, `k >= 0`.
    fn d_shift_up(&self, a: &Digits, k: i64) -> Digits {
        let e = self.e as usize;
        let q = (k / self.ei()) as u32;
        let r = (k % self.ei()) as usize;
        let scaled = self.d_scale(a, self.pow(q));
        if r == 0 {
            return scaled;
        }
        let mut c = ZERO_DIGITS;
        for j in 0..e {
            c[j] = if j >= r {
                scaled[j - r]
            } else {
                self.mulmod(self.p, scaled[j + e - r])
            };
        }
        c
    }

    /// Divide by `π^k`; the caller guarantees divisibility.
    fn d_shift_down(&self, a: &Digits, k: i64) -> Digits {
        let e = self.e as usize;
        let q = (k / self.ei()) as u32;
        let r = (k % self.ei()) as usize;
        let mut c = ZERO_DIGITS;
        for j in 0..e {
            c[j] = if j + r < e { a[j + r] } else { a[j + r - e] / self.p };
        }
        let pq = self.p.pow(q);
        for x in c.iter_mut().take(e) {
            *x /= pq;
        }
        c
    }

    /// Inverse of a unit, exact modulo the digit store.
    fn d_inv_unit(&self, a: &Digits) -> Digits {
        let mut y = ZERO_DIGITS;
        y[0] = self.inv_int(a[0]);
        if self.e == 1 {
            return y;
        }
        let mut two = ZERO_DIGITS;
        two[0] = 2;
        let mut reached = 1;
        while reached < self.e * self.k {
            let uy = self.d_mul(a, &y);
            y = self.d_mul(&y, &self.d_add(&two, &self.d_neg(&uy)));
            reached *= 2;
        }
        y
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Repr {
    /// Exactly zero (valuation `+∞`).
    Exact,
    /// Zero modulo `π^prec`, nothing more known.
    Zero { prec: i64 },
    /// `π^val · unit`, known modulo `π^prec`.
    Unit { val: i64, prec: i64, unit: Digits },
}

/// An element of `Q_p(π)` known to finite absolute precision.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PadicScalar {
    field: FieldSpec,
    repr: Repr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl PadicScalar {
    pub fn zero(field: FieldSpec) -> Self {
        PadicScalar { field, repr: Repr::Exact }
    }

    /// Zero known only modulo `π^prec`.
    pub fn zero_mod(field: FieldSpec, prec: i64) -> Self {
        PadicScalar { field, repr: Repr::Zero { prec: prec.min(field.prec()) } }
    }

    pub fn one(field: FieldSpec) -> Self {
        Self::from_int(field, 1)
    }

    pub fn from_int(field: FieldSpec, x: i128) -> Self {
        if x == 0 {
            return Self::zero(field);
        }
        let mut a = x.unsigned_abs();
        let mut v = 0i64;
        while a % field.p as u128 == 0 {
            a /= field.p as u128;
            v += 1;
        }
        let signed = if x < 0 { -(a as i128) } else { a as i128 };
        let mut unit = ZERO_DIGITS;
        unit[0] = field.reduce_i128(signed);
        let val = v * field.ei();
        Self::build(field, val, unit, val + field.prec())
    }

    /// The exact rational `num / den`.
    pub fn from_ratio(field: FieldSpec, num: i128, den: i128) -> Result<Self, PadicError> {
        if den == 0 {
            return Err(PadicError::DivisionByZero);
        }
        let n = Self::from_int(field, num);
        let d = Self::from_int(field, den);
        let (Repr::Unit { val: vn, unit: un, .. }, Repr::Unit { val: vd, unit: ud, .. }) =
            (n.repr, d.repr)
        else {
            return Ok(Self::zero(field));
        };
        let val = vn - vd;
        let unit = field.d_mul(&un, &field.d_inv_unit(&ud));
        Ok(Self::build(field, val, unit, val + field.prec()))
    }

    /// `π^k`, carried to the field precision.
    pub fn pi_power(field: FieldSpec, k: i64) -> Self {
        let mut unit = ZERO_DIGITS;
        unit[0] = 1;
        Self::build(field, k, unit, k + field.prec())
    }

    /// `π^m · s` with `s` integral and known modulo `π^(prec - m)`.
    fn build(field: FieldSpec, m: i64, s: Digits, prec: i64) -> Self {
        let prec = prec.min(field.prec());
        let r = (prec - m).min(field.prec());
        if r <= 0 {
            return PadicScalar { field, repr: Repr::Zero { prec } };
        }
        let s = field.d_trunc(&s, r);
        match field.d_val(&s) {
            None => PadicScalar { field, repr: Repr::Zero { prec } },
            Some(v) if v >= r => PadicScalar { field, repr: Repr::Zero { prec } },
            Some(v) => {
                let unit = field.d_shift_down(&s, v);
                let val = m + v;
                let prec = prec.min(val + field.prec());
                let unit = field.d_trunc(&unit, prec - val);
                PadicScalar { field, repr: Repr::Unit { val, prec, unit } }
            }
        }
    }

    pub fn field(&self) -> FieldSpec {
        self.field
    }

    pub fn is_exact_zero(&self) -> bool {
        matches!(self.repr, Repr::Exact)
    }

    /// Zero to working precision (exact zeros included).
    pub fn is_zero(&self) -> bool {
        !matches!(self.repr, Repr::Unit { .. })
    }

    /// The valuation; for a zero known only modulo `π^k` this is the lower bound `k`.
    pub fn valuation(&self) -> Val {
        match self.repr {
            Repr::Exact => Val::Inf,
            Repr::Zero { prec } => Val::Fin(prec),
            Repr::Unit { val, .. } => Val::Fin(val),
        }
    }

    /// The valuation as observed at working precision: zeros of either kind read as `+∞`.
    pub fn observed_valuation(&self) -> Val {
        match self.repr {
            Repr::Unit { val, .. } => Val::Fin(val),
            _ => Val::Inf,
        }
    }

    /// Absolute precision; `+∞` for exact zero.
    pub fn prec(&self) -> Val {
        match self.repr {
            Repr::Exact => Val::Inf,
            Repr::Zero { prec } | Repr::Unit { prec, .. } => Val::Fin(prec),
        }
    }

    /// Forget digits at and beyond `π^k`.
    pub fn truncate(&self, k: i64) -> Self {
        match self.repr {
            Repr::Exact => *self,
            Repr::Zero { prec } => Self::zero_mod(self.field, prec.min(k)),
            Repr::Unit { val, prec, unit } => Self::build(self.field, val, unit, prec.min(k)),
        }
    }

    /// Re-home the value in a field with the same `p`, `e` and a different precision.
    pub fn rehome(&self, field: FieldSpec) -> Result<Self, PadicError> {
        if field.p != self.field.p || field.e != self.field.e {
            return Err(PadicError::FieldMismatch);
        }
        Ok(match self.repr {
            Repr::Exact => Self::zero(field),
            Repr::Zero { prec } => Self::zero_mod(field, prec),
            Repr::Unit { val, prec, unit } => {
                let mut u = ZERO_DIGITS;
                for i in 0..field.e as usize {
                    u[i] = unit[i] % field.modulus;
                }
                Self::build(field, val, u, prec)
            }
        })
    }

    /// Residue class modulo `π` of an integral scalar.
    pub fn residue(&self) -> Option<u64> {
        match self.repr {
            Repr::Exact => Some(0),
            Repr::Zero { prec } => (prec >= 1).then_some(0),
            Repr::Unit { val, .. } if val > 0 => Some(0),
            Repr::Unit { val: 0, unit, .. } => Some(unit[0] % self.field.p),
            Repr::Unit { .. } => None,
        }
    }

    pub fn is_integral(&self) -> bool {
        self.valuation() >= Val::Fin(0)
    }

    /// Integer representative modulo `p^k` of an integral scalar over an unramified field.
    pub fn to_u64_mod(&self, k: u32) -> Option<u64> {
        if self.field.e != 1 || k >= self.field.k {
            return None;
        }
        let m = self.field.p.pow(k);
        match self.repr {
            Repr::Exact => Some(0),
            Repr::Zero { prec } => (prec >= k as i64).then_some(0),
            Repr::Unit { val, prec, unit } => {
                if val < 0 || prec < k as i64 {
                    return None;
                }
                let shifted = self.field.d_shift_up(&unit, val);
                Some(shifted[0] % m)
            }
        }
    }

    pub fn neg(&self) -> Self {
        match self.repr {
            Repr::Unit { val, prec, unit } => PadicScalar {
                field: self.field,
                repr: Repr::Unit { val, prec, unit: self.field.d_trunc(&self.field.d_neg(&unit), prec - val) },
            },
            _ => *self,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let f = self.field;
        match (self.repr, other.repr) {
            (Repr::Exact, _) => *other,
            (_, Repr::Exact) => *self,
            (Repr::Zero { prec: a }, Repr::Zero { prec: b }) => Self::zero_mod(f, a.min(b)),
            (Repr::Zero { prec: a }, Repr::Unit { val, prec, unit })
            | (Repr::Unit { val, prec, unit }, Repr::Zero { prec: a }) => Self::build(f, val, unit, prec.min(a)),
            (
                Repr::Unit { val: va, prec: pa, unit: ua },
                Repr::Unit { val: vb, prec: pb, unit: ub },
            ) => {
                let m = va.min(vb);
                let prec = pa.min(pb);
                if prec <= m {
                    return Self::zero_mod(f, prec);
                }
                let s = f.d_add(&f.d_shift_up(&ua, va - m), &f.d_shift_up(&ub, vb - m));
                Self::build(f, m, s, prec)
            }
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &Self) -> Self {
        let f = self.field;
        match (self.repr, other.repr) {
            (Repr::Exact, _) | (_, Repr::Exact) => Self::zero(f),
            (Repr::Zero { prec: a }, Repr::Zero { prec: b }) => Self::zero_mod(f, a + b),
            (Repr::Zero { prec: a }, Repr::Unit { val, .. })
            | (Repr::Unit { val, .. }, Repr::Zero { prec: a }) => Self::zero_mod(f, a + val),
            (
                Repr::Unit { val: va, prec: pa, unit: ua },
                Repr::Unit { val: vb, prec: pb, unit: ub },
            ) => {
                let val = va + vb;
                let rel = (pa - va).min(pb - vb);
                Self::build(f, val, f.d_mul(&ua, &ub), val + rel)
            }
        }
    }

    pub fn inv(&self) -> Result<Self, PadicError> {
        match self.repr {
            Repr::Exact => Err(PadicError::DivisionByZero),
            Repr::Zero { prec } => Err(PadicError::PrecisionExhausted(format!(
                "divisor is zero modulo pi^{prec}"
            ))),
            Repr::Unit { val, prec, unit } => {
                let inv = self.field.d_inv_unit(&unit);
                Ok(Self::build(self.field, -val, inv, prec - 2 * val))
            }
        }
    }

    pub fn div(&self, other: &Self) -> Result<Self, PadicError> {
        Ok(self.mul(&other.inv()?))
    }

    pub fn pow(&self, k: i64) -> Result<Self, PadicError> {
        let base = if k < 0 { self.inv()? } else { *self };
        let mut acc = Self::one(self.field);
        let mut b = base;
        let mut n = k.unsigned_abs();
        while n > 0 {
            if n & 1 == 1 {
                acc = acc.mul(&b);
            }
            b = b.mul(&b);
            n >>= 1;
        }
        Ok(acc)
    }

    /// Checked arithmetic: rejects mismatched fields and results whose precision is exhausted.
    pub fn arith(&self, other: &Self, op: ArithOp) -> Result<Self, PadicError> {
        if self.field != other.field {
            return Err(PadicError::FieldMismatch);
        }
        let out = match op {
            ArithOp::Add => self.add(other),
            ArithOp::Sub => self.sub(other),
            ArithOp::Mul => self.mul(other),
            ArithOp::Div => self.div(other)?,
        };
        match out.prec() {
            Val::Fin(p) if p <= 0 => Err(PadicError::PrecisionExhausted(format!(
                "{op:?} leaves absolute precision {p}"
            ))),
            _ => Ok(out),
        }
    }

    /// `exp(x)` for `v(x) > 1/(p-1)`.
    pub fn exp(&self) -> Result<Self, PadicError> {
        let f = self.field;
        let (val, prec) = match self.repr {
            Repr::Exact => return Ok(Self::one(f)),
            Repr::Zero { prec } => (prec, prec),
            Repr::Unit { val, prec, .. } => (val, prec),
        };
        let pm1 = f.p as i64 - 1;
        if val * pm1 <= f.ei() {
            return Err(PadicError::ExpDomain { val, e: f.e });
        }
        if self.is_zero() {
            return Ok(Self::one(f).truncate(prec));
        }
        // v(x^i / i!) >= i (val - e/(p-1)); stop once that bound clears N.
        let slope = val * pm1 - f.ei();
        let mut sum = Self::one(f);
        let mut power = Self::one(f);
        let mut fact_unit: u64 = 1;
        let mut fact_val: i64 = 0;
        let mut i: i64 = 1;
        loop {
            if i * slope >= f.prec() * pm1 {
                break;
            }
            power = power.mul(self);
            let mut j = i as u64;
            while j % f.p == 0 {
                j /= f.p;
                fact_val += 1;
            }
            fact_unit = f.mulmod(fact_unit, j % f.modulus);
            let mut u = ZERO_DIGITS;
            u[0] = f.inv_int(fact_unit);
            let inv_fact = Self::build(f, -fact_val * f.ei(), u, -fact_val * f.ei() + f.prec());
            sum = sum.add(&power.mul(&inv_fact));
            i += 1;
        }
        Ok(sum)
    }

    /// Canonical literal, e.g. `63*5^0 + O(5^3)`.
    pub fn to_literal(&self) -> String {
        let f = self.field;
        let exp = |k: i64| -> String {
            let g = gcd(k.unsigned_abs(), f.e as u64) as i64;
            let (num, den) = (k / g, f.ei() / g);
            if den == 1 {
                format!("{}^{}", f.p, num)
            } else {
                format!("{}^({}/{})", f.p, num, den)
            }
        };
        match self.repr {
            Repr::Exact => "0".to_string(),
            Repr::Zero { prec } => format!("O({})", exp(prec)),
            Repr::Unit { val, prec, unit } => {
                let mut terms = Vec::new();
                for (i, &a) in unit.iter().enumerate().take(f.e as usize) {
                    if a != 0 {
                        terms.push(format!("{}*{}", a, exp(val + i as i64)));
                    }
                }
                terms.push(format!("O({})", exp(prec)));
                terms.join(" + ")
            }
        }
    }

    pub fn parse_literal(field: FieldSpec, s: &str) -> Result<Self, PadicError> {
        let bad = || PadicError::Parse(s.to_string());
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            return Err(bad());
        }
        let mut acc = Self::zero(field);
        let mut cap: Option<i64> = None;
        for term in split_terms(&compact) {
            if let Some(inner) = term.strip_prefix("O(").and_then(|t| t.strip_suffix(')')) {
                cap = Some(parse_power(field, inner).ok_or_else(bad)?);
                continue;
            }
            let (sign, body) = match term.strip_prefix('-') {
                Some(rest) => (-1i128, rest),
                None => (1i128, term),
            };
            let (coef, power) = match body.split_once('*') {
                Some((c, pw)) => (c, Some(pw)),
                None => (body, None),
            };
            let c: i128 = coef.parse().map_err(|_| bad())?;
            let k = match power {
                Some(pw) => parse_power(field, pw).ok_or_else(bad)?,
                None => 0,
            };
            acc = acc.add(&Self::from_int(field, sign * c).mul(&Self::pi_power(field, k)));
        }
        if let Some(k) = cap {
            acc = if acc.is_exact_zero() { Self::zero_mod(field, k) } else { acc.truncate(k) };
        }
        Ok(acc)
    }
}

fn split_terms(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            '+' if depth == 0 && i > start => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

/// Parses `p^k`, `p^-k` or `p^(a/b)` into a `π`-digit count.
fn parse_power(field: FieldSpec, s: &str) -> Option<i64> {
    let (base, k) = s.split_once('^')?;
    if base.parse::<u64>().ok()? != field.p {
        return None;
    }
    let k = k.trim_start_matches('(').trim_end_matches(')');
    let (num, den) = match k.split_once('/') {
        Some((a, b)) => (a.parse::<i64>().ok()?, b.parse::<i64>().ok()?),
        None => (k.parse::<i64>().ok()?, 1),
    };
    if den <= 0 || (num * field.ei()) % den != 0 {
        return None;
    }
    Some(num * field.ei() / den)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl fmt::Debug for PadicScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_literal())
    }
}

impl fmt::Display for PadicScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_literal())
    }
}

impl Serialize for PadicScalar {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_literal())
    }
}

impl FromStr for Val {
    type Err = PadicError;
    fn from_str(s: &str) -> Result<Self, PadicError> {
        if s == "inf" {
            return Ok(Val::Inf);
        }
        s.parse().map(Val::Fin).map_err(|_| PadicError::Parse(s.into()))
    }
}

/// Polynomial with scalar coefficients, constant term first.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    pub coeffs: Vec<PadicScalar>,
}

impl Poly {
    pub fn new(coeffs: Vec<PadicScalar>) -> Self {
        Poly { coeffs }
    }

    pub fn from_ints(field: FieldSpec, coeffs: &[i128]) -> Self {
        Poly { coeffs: coeffs.iter().map(|&c| PadicScalar::from_int(field, c)).collect() }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn eval(&self, x: &PadicScalar) -> PadicScalar {
        let mut acc = PadicScalar::zero(x.field());
        for c in self.coeffs.iter().rev() {
            acc = acc.mul(x).add(c);
        }
        acc
    }

    pub fn derivative(&self) -> Poly {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, c)| c.mul(&PadicScalar::from_int(c.field(), i as i128)))
            .collect();
        Poly { coeffs }
    }
}

/// Newton iteration from an approximate simple root.
pub fn hensel_lift_root(poly: &Poly, x0: &PadicScalar) -> Result<PadicScalar, PadicError> {
    let field = x0.field();
    let deriv = poly.derivative();
    let defect = poly.eval(x0).observed_valuation();
    let dval = deriv.eval(x0).observed_valuation();
    let ok = match (defect, dval) {
        (Val::Inf, Val::Fin(_)) => true,
        (Val::Fin(a), Val::Fin(b)) => a > 2 * b,
        _ => false,
    };
    if !ok {
        return Err(PadicError::HenselPrecondition { defect, deriv: dval });
    }
    let mut x = *x0;
    for _ in 0..64 {
        let px = poly.eval(&x);
        if px.is_zero() && px.prec() >= Val::Fin(field.prec()) {
            return Ok(x);
        }
        let dx = deriv.eval(&x);
        if dx.is_zero() {
            return Err(PadicError::DerivativeVanishes);
        }
        let next = x.sub(&px.div(&dx)?);
        if next == x {
            return Ok(x);
        }
        x = next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f5() -> FieldSpec {
        FieldSpec::new(5, 1, 12).unwrap()
    }

    #[test]
    fn field_validation() {
        assert!(FieldSpec::new(2, 1, 8).is_err());
        assert!(FieldSpec::new(9, 1, 8).is_err());
        assert!(FieldSpec::new(5, 2, 7).is_err());
        assert!(FieldSpec::new(5, 1, 40).is_err());
        assert!(FieldSpec::new(7, 1, 20).is_ok());
    }

    #[test]
    fn integers_embed() {
        let f = f5();
        let s = PadicScalar::from_int(f, 2).add(&PadicScalar::from_int(f, 3));
        assert_eq!(s.valuation(), Val::Fin(1));
        assert_eq!(s, PadicScalar::from_int(f, 5));
    }

    #[test]
    fn half_mod_125() {
        let f = f5();
        let h = PadicScalar::from_int(f, 1).div(&PadicScalar::from_int(f, 2)).unwrap();
        assert_eq!(h.to_u64_mod(3), Some(63));
    }

    #[test]
    fn uniformizer_squares_to_p() {
        let f = FieldSpec::new(5, 2, 12).unwrap();
        let pi = PadicScalar::pi_power(f, 1);
        let sq = pi.mul(&pi);
        assert_eq!(sq.valuation(), Val::Fin(2));
        assert!(sq.sub(&PadicScalar::from_int(f, 5)).is_zero());
    }

    #[test]
    fn exact_zero_is_distinct() {
        let f = f5();
        let one = PadicScalar::one(f);
        let z = one.sub(&one);
        assert!(z.is_zero() && !z.is_exact_zero());
        assert!(PadicScalar::zero(f).is_exact_zero());
        assert_eq!(PadicScalar::zero(f).div(&one).unwrap(), PadicScalar::zero(f));
        assert_eq!(one.div(&PadicScalar::zero(f)), Err(PadicError::DivisionByZero));
        assert!(matches!(one.div(&z), Err(PadicError::PrecisionExhausted(_))));
    }

    #[test]
    fn exp_examples() {
        let f = FieldSpec::new(5, 1, 6).unwrap();
        assert_eq!(PadicScalar::zero(f).exp().unwrap(), PadicScalar::one(f));
        let e1 = PadicScalar::from_int(f, 5).exp().unwrap();
        assert_eq!(e1.to_u64_mod(3), Some(81));
        assert!(PadicScalar::one(f).exp().is_err());
    }

    #[test]
    fn exp_ramified_domain() {
        let f = FieldSpec::new(3, 2, 12).unwrap();
        // v(pi) = 1/2 is not > 1/(p-1) = 1/2.
        assert!(PadicScalar::pi_power(f, 1).exp().is_err());
        assert!(PadicScalar::pi_power(f, 2).exp().is_ok());
    }

    #[test]
    fn hensel_examples() {
        let f = FieldSpec::new(5, 1, 12).unwrap();
        let p = Poly::from_ints(f, &[-1, 0, 1]);
        assert_eq!(hensel_lift_root(&p, &PadicScalar::one(f)).unwrap(), PadicScalar::one(f));

        let f7 = FieldSpec::new(7, 1, 12).unwrap();
        let p = Poly::from_ints(f7, &[-2, 0, 1]);
        let r = hensel_lift_root(&p, &PadicScalar::from_int(f7, 3)).unwrap();
        assert_eq!(r.to_u64_mod(2), Some(10));

        let p = Poly::from_ints(f, &[-5, 0, 1]);
        assert!(matches!(
            hensel_lift_root(&p, &PadicScalar::zero(f)),
            Err(PadicError::HenselPrecondition { .. })
        ));
    }

    #[test]
    fn literal_examples() {
        let f = FieldSpec::new(5, 2, 8).unwrap();
        let x = PadicScalar::parse_literal(f, "1*5^(1/2)").unwrap();
        assert_eq!(x, PadicScalar::pi_power(f, 1));
        let f1 = f5();
        let y = PadicScalar::parse_literal(f1, "63*5^0").unwrap();
        assert_eq!(y, PadicScalar::from_int(f1, 63));
        assert!(PadicScalar::parse_literal(f1, "3*7^1").is_err());
    }

    fn arb_scalar(f: FieldSpec) -> impl Strategy<Value = PadicScalar> {
        (-1_000_000i128..1_000_000, 0i64..3, 1i64..12).prop_map(move |(u, k, cut)| {
            PadicScalar::from_int(f, u)
                .mul(&PadicScalar::pi_power(f, k))
                .truncate(f.prec() - cut + 1)
        })
    }

    proptest! {
        #[test]
        fn valuation_laws(a in arb_scalar(FieldSpec::new(5, 2, 16).unwrap()),
                          b in arb_scalar(FieldSpec::new(5, 2, 16).unwrap())) {
            let prod = a.mul(&b);
            if !a.is_zero() && !b.is_zero() && !prod.is_zero() {
                prop_assert_eq!(prod.valuation(), a.valuation().add(b.valuation()));
            }
            let s = a.add(&b);
            if !s.is_zero() && !a.is_zero() && !b.is_zero() {
                prop_assert!(s.valuation() >= a.valuation().min(b.valuation()));
                if a.valuation() != b.valuation() {
                    prop_assert_eq!(s.valuation(), a.valuation().min(b.valuation()));
                }
            }
        }

        #[test]
        fn literal_round_trip(a in arb_scalar(FieldSpec::new(7, 2, 12).unwrap())) {
            let f = a.field();
            prop_assert_eq!(PadicScalar::parse_literal(f, &a.to_literal()).unwrap(), a);
        }

        #[test]
        fn exp_is_additive(z in -10_000i128..10_000, w in -10_000i128..10_000) {
            let f = FieldSpec::new(5, 1, 14).unwrap();
            let p = PadicScalar::from_int(f, 5);
            let x = p.mul(&PadicScalar::from_int(f, z));
            let y = p.mul(&PadicScalar::from_int(f, w));
            let lhs = x.add(&y).exp().unwrap();
            let rhs = x.exp().unwrap().mul(&y.exp().unwrap());
            prop_assert!(lhs.sub(&rhs).is_zero());
        }
    }
}
