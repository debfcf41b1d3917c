//! Element-order bounds, eigenvalue relations, tubular neighbourhoods and
//! thin-set density estimates.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::expr::{self, Env, Expr, ExprError, Index};
use crate::linalg::{charpoly, LinalgError, PadicMatrix};
use crate::padic::{FieldSpec, PadicScalar, Val};
use crate::rep::{haar_sample, RepError, RepFamily, Sampling};

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.5758;

/// Largest dimension accepted by the order bound (`d!` enters an exponent).
pub const MAX_BOUND_DIM: u32 = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvelopeError {
    #[error("invalid arguments: {0}")]
    InvalidInput(String),
    #[error("characteristic polynomial does not split over the working field")]
    NoEigenData,
    #[error("order cap {cap} too large for precision: need cap^(2e) < p^N")]
    OrderCapTooLarge { cap: u64 },
    #[error("precision {prec} too low to decide valuation > {needed} for `{poly}`")]
    Undecidable { poly: String, prec: i64, needed: i64 },
    #[error("subvariety spec: {0}")]
    Spec(String),
    #[error("sample count must be positive")]
    NoSamples,
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Rep(#[from] RepError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn big_str<S: Serializer>(x: &BigUint, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&x.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RootOfUnityBound {
    pub p: u64,
    pub f: u32,
    pub e: u32,
    pub d: u32,
    #[serde(serialize_with = "big_str")]
    pub prime_to_p: BigUint,
    #[serde(serialize_with = "big_str")]
    pub p_power: BigUint,
    #[serde(serialize_with = "big_str")]
    pub combined: BigUint,
}

fn is_odd_prime(p: u64) -> bool {
    p > 2 && p % 2 == 1 && (3..).step_by(2).take_while(|q| q * q <= p).all(|q| p % q != 0)
}

pub fn root_of_unity_order_bound(p: u64, f: u32, e: u32, d: u32) -> Result<RootOfUnityBound, EnvelopeError> {
    if !is_odd_prime(p) {
        return Err(EnvelopeError::InvalidInput(format!("p = {p} is not an odd prime")));
    }
    if f == 0 || e == 0 || d == 0 || d > MAX_BOUND_DIM {
        return Err(EnvelopeError::InvalidInput(format!("need f, e >= 1 and 1 <= d <= {MAX_BOUND_DIM}")));
    }
    let fact: u64 = (1..=d as u64).product();
    let prime_to_p = BigUint::from(p).pow((f as u64 * fact) as u32) - 1u32;
    let limit = BigUint::from(e as u64 * fact);
    let mut p_power = BigUint::from(1u32);
    loop {
        let next = &p_power * p;
        if &next - &p_power > limit {
            break;
        }
        p_power = next;
    }
    let combined = &prime_to_p * &p_power;
    Ok(RootOfUnityBound { p, f, e, d, prime_to_p, p_power, combined })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnitRelation {
    pub exponents: Vec<i64>,
    pub order: u64,
}

/// Eigenvalues with multiplicity, in `eigen_data` order.
pub fn eigenvalues(m: &PadicMatrix) -> Result<Vec<PadicScalar>, EnvelopeError> {
    let data = charpoly(m)?.eigen_data.ok_or(EnvelopeError::NoEigenData)?;
    Ok(data.iter().flat_map(|(x, k)| std::iter::repeat(*x).take(*k)).collect())
}

fn cap_fits(field: FieldSpec, cap: u64) -> bool {
    let lhs = BigUint::from(cap).pow(2 * field.e());
    let rhs = BigUint::from(field.p()).pow(field.prec() as u32);
    lhs < rhs
}

/// Order of a unit `ζ` if it is a nontrivial root of unity of order at most `cap`.
fn root_order(z: &PadicScalar, cap: u64) -> Option<u64> {
    let one = PadicScalar::one(z.field());
    if z.valuation() != Val::Fin(0) || z.sub(&one).is_zero() {
        return None;
    }
    let mut acc = *z;
    for m in 2..=cap {
        acc = acc.mul(z);
        if acc.sub(&one).is_zero() {
            return Some(m);
        }
    }
    None
}

/// All exponent vectors `|a_i| ≤ A` whose eigenvalue product is a nontrivial
/// root of unity of order at most `B`, by L1 norm then descending lexicographic order.
pub fn eigenvalue_unit_relation(m: &PadicMatrix, a_cap: i64, b_cap: u64) -> Result<Vec<UnitRelation>, EnvelopeError> {
    let field = m.field();
    if !cap_fits(field, b_cap) {
        return Err(EnvelopeError::OrderCapTooLarge { cap: b_cap });
    }
    let lambdas = eigenvalues(m)?;
    let d = lambdas.len();
    let mut powers: Vec<BTreeMap<i64, PadicScalar>> = Vec::with_capacity(d);
    for l in &lambdas {
        let mut row = BTreeMap::new();
        for a in -a_cap..=a_cap {
            if let Ok(x) = l.pow(a) {
                row.insert(a, x);
            }
        }
        powers.push(row);
    }
    let mut vectors: Vec<Vec<i64>> = vec![vec![]];
    for _ in 0..d {
        vectors = vectors
            .into_iter()
            .flat_map(|v| {
                (-a_cap..=a_cap).map(move |a| {
                    let mut w = v.clone();
                    w.push(a);
                    w
                })
            })
            .collect();
    }
    vectors.retain(|v| v.iter().any(|&a| a != 0));
    vectors.sort_by(|x, y| {
        let l1 = |v: &Vec<i64>| v.iter().map(|a| a.abs()).sum::<i64>();
        l1(x).cmp(&l1(y)).then_with(|| y.cmp(x))
    });
    let mut out = Vec::new();
    for v in vectors {
        let mut z = PadicScalar::one(field);
        let mut ok = true;
        for (i, &a) in v.iter().enumerate() {
            match powers[i].get(&a) {
                Some(x) => z = z.mul(x),
                None => ok = false,
            }
        }
        if !ok {
            continue;
        }
        if let Some(order) = root_order(&z, b_cap) {
            out.push(UnitRelation { exponents: v, order });
        }
    }
    Ok(out)
}

/// Polynomial conditions on characteristic-polynomial data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubvarietySpec {
    pub polys: Vec<String>,
    /// Tubular depth, in digits of `p`.
    pub m: u32,
}

/// Parsed subvariety; variables `c0, …, c{d-1}`, `dinv` (inverse determinant), `disc`.
#[derive(Debug, Clone)]
pub struct Subvariety {
    pub spec: SubvarietySpec,
    polys: Vec<Expr>,
}

impl Subvariety {
    pub fn new(spec: SubvarietySpec) -> Result<Self, EnvelopeError> {
        if spec.polys.is_empty() {
            return Err(EnvelopeError::Spec("at least one polynomial is required".into()));
        }
        let polys = spec
            .polys
            .iter()
            .map(|s| expr::parse(s).map_err(|e| EnvelopeError::Spec(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(Subvariety { spec, polys })
    }

    pub fn from_json(text: &str) -> Result<Self, EnvelopeError> {
        Self::new(serde_json::from_str(text).map_err(|e| EnvelopeError::Spec(e.to_string()))?)
    }

    pub fn with_depth(&self, m: u32) -> Self {
        let mut s = self.clone();
        s.spec.m = m;
        s
    }

    /// Values of every polynomial at `M`.
    pub fn evaluate(&self, m: &PadicMatrix) -> Result<Vec<PadicScalar>, EnvelopeError> {
        let cp = charpoly(m)?;
        let field = m.field();
        let d = m.dim();
        let mut vars = BTreeMap::new();
        for (i, c) in cp.coeffs.iter().take(d).enumerate() {
            vars.insert(format!("c{i}"), *c);
        }
        let det = if d % 2 == 0 { cp.coeffs[0] } else { cp.coeffs[0].neg() };
        if let Ok(inv) = det.inv() {
            vars.insert("dinv".to_string(), inv);
        }
        vars.insert("disc".to_string(), cp.disc);
        let seqs = BTreeMap::new();
        let env = Env { field, index: Index::Limit, z: None, seqs: &seqs, vars: &vars };
        self.polys.iter().map(|p| env.eval(p).map_err(EnvelopeError::from)).collect()
    }
}

/// Outcome of `v(f) > depth` for one value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Decision {
    Yes,
    No,
    Unknown,
}

fn decide(x: &PadicScalar, depth: i64) -> Decision {
    if x.is_exact_zero() {
        return Decision::Yes;
    }
    if x.is_zero() {
        return if x.prec() > Val::Fin(depth) { Decision::Yes } else { Decision::Unknown };
    }
    if x.valuation() > Val::Fin(depth) {
        Decision::Yes
    } else {
        Decision::No
    }
}

fn decide_all(values: &[PadicScalar], depth: i64) -> Decision {
    let ds: Vec<Decision> = values.iter().map(|v| decide(v, depth)).collect();
    if ds.contains(&Decision::No) {
        Decision::No
    } else if ds.contains(&Decision::Unknown) {
        Decision::Unknown
    } else {
        Decision::Yes
    }
}

/// `v(f_i(M)) > m` for every defining polynomial.
pub fn tubular_member(m: &PadicMatrix, x: &Subvariety) -> Result<bool, EnvelopeError> {
    let values = x.evaluate(m)?;
    let depth = x.spec.m as i64 * m.field().e() as i64;
    for (v, src) in values.iter().zip(&x.spec.polys) {
        match decide(v, depth) {
            Decision::No => return Ok(false),
            Decision::Unknown => {
                return Err(EnvelopeError::Undecidable { poly: src.clone(), prec: digits(v.prec()), needed: depth })
            }
            Decision::Yes => {}
        }
    }
    Ok(true)
}

fn digits(v: Val) -> i64 {
    v.finite().unwrap_or(i64::MAX)
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityEstimate {
    pub m: u32,
    pub samples: usize,
    pub hits: usize,
    pub undecidable: usize,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub seed: u64,
    pub mode: Sampling,
}

/// Wilson score interval for `hits / n` at normal quantile `z`.
pub fn wilson_interval(hits: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if hits == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if hits as f64 == n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Monte Carlo measure of the tubular neighbourhoods of `X` at each depth.
pub fn thin_density(
    fam: &RepFamily,
    x: &Subvariety,
    levels: &[u32],
    samples: usize,
    seed: u64,
    mode: Sampling,
) -> Result<Vec<DensityEstimate>, EnvelopeError> {
    if samples == 0 {
        return Err(EnvelopeError::NoSamples);
    }
    let top = levels.iter().copied().max().unwrap_or(0);
    let mats = haar_sample(fam, Index::Limit, seed, samples, top, mode)?;
    let e = fam.field().e() as i64;
    let values: Vec<Vec<PadicScalar>> = mats.par_iter().map(|m| x.evaluate(m)).collect::<Result<_, _>>()?;
    Ok(levels
        .iter()
        .map(|&m| {
            let (mut hits, mut undecidable) = (0, 0);
            for v in &values {
                match decide_all(v, m as i64 * e) {
                    Decision::Yes => hits += 1,
                    Decision::Unknown => undecidable += 1,
                    Decision::No => {}
                }
            }
            let (ci_lo, ci_hi) = wilson_interval(hits, samples, Z99);
            DensityEstimate {
                m,
                samples,
                hits,
                undecidable,
                estimate: hits as f64 / samples as f64,
                ci_lo,
                ci_hi,
                seed,
                mode,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(prec: u32) -> FieldSpec {
        FieldSpec::new(5, 1, prec).unwrap()
    }

    fn disc_zero(m: u32) -> Subvariety {
        Subvariety::from_json(&format!(r#"{{"polys": ["disc"], "m": {m}}}"#)).unwrap()
    }

    #[test]
    fn order_bounds() {
        let b = root_of_unity_order_bound(5, 1, 1, 2).unwrap();
        assert_eq!((b.prime_to_p, b.p_power), (BigUint::from(24u32), BigUint::from(1u32)));
        assert_eq!(root_of_unity_order_bound(3, 1, 2, 2).unwrap().p_power, BigUint::from(3u32));
        let b = root_of_unity_order_bound(7, 1, 1, 1).unwrap();
        assert_eq!((b.prime_to_p, b.p_power), (BigUint::from(6u32), BigUint::from(1u32)));
        assert!(root_of_unity_order_bound(4, 1, 1, 1).is_err());
        assert!(root_of_unity_order_bound(2, 1, 1, 1).is_err());
    }

    #[test]
    fn minus_identity_has_order_two() {
        let f = field(10);
        let m = PadicMatrix::from_ints(f, &[&[-1, 0], &[0, -1]]);
        let rels = eigenvalue_unit_relation(&m, 1, 24).unwrap();
        assert_eq!(rels[0], UnitRelation { exponents: vec![1, 0], order: 2 });
        assert!(rels.iter().all(|r| r.order == 2));
    }

    #[test]
    fn one_units_have_no_relation() {
        let f = field(8);
        let five = PadicScalar::from_int(f, 5);
        let m = PadicMatrix::diag(f, &[five.exp().unwrap(), five.mul(&PadicScalar::from_int(f, 2)).exp().unwrap()]);
        assert!(eigenvalue_unit_relation(&m, 3, 24).unwrap().is_empty());
    }

    #[test]
    fn lifted_i_has_order_four() {
        let f = field(10);
        let one = PadicScalar::one(f);
        let i = crate::padic::hensel_lift_root(&crate::padic::Poly::new(vec![one, PadicScalar::zero(f), one]), &PadicScalar::from_int(f, 2)).unwrap();
        let m = PadicMatrix::diag(f, &[i, one]);
        let rels = eigenvalue_unit_relation(&m, 1, 24).unwrap();
        assert_eq!(rels[0], UnitRelation { exponents: vec![1, 0], order: 4 });
    }

    #[test]
    fn order_cap_checked_against_precision() {
        let f = field(4);
        let m = PadicMatrix::identity(f, 2);
        assert!(matches!(eigenvalue_unit_relation(&m, 1, 30), Err(EnvelopeError::OrderCapTooLarge { .. })));
        assert!(eigenvalue_unit_relation(&m, 1, 24).is_ok());
    }

    #[test]
    fn tubular_examples() {
        let f = field(10);
        let u = PadicMatrix::from_ints(f, &[&[1, 1], &[0, 1]]);
        for m in [0, 3, 9] {
            assert!(tubular_member(&u, &disc_zero(m)).unwrap());
        }
        assert!(matches!(tubular_member(&u, &disc_zero(10)), Err(EnvelopeError::Undecidable { .. })));
        let b = PadicMatrix::from_ints(f, &[&[1, 0], &[0, 6]]);
        assert!(tubular_member(&b, &disc_zero(0)).unwrap());
        assert!(tubular_member(&b, &disc_zero(1)).unwrap());
        assert!(!tubular_member(&b, &disc_zero(2)).unwrap());
    }

    #[test]
    fn undecidable_is_an_error() {
        let f = field(6);
        let m = PadicMatrix::diag(f, &[PadicScalar::one(f), PadicScalar::one(f).add(&PadicScalar::zero_mod(f, 3))]);
        assert!(matches!(tubular_member(&m, &disc_zero(5)), Err(EnvelopeError::Undecidable { .. })));
    }

    #[test]
    fn wilson_contains_estimate() {
        for (h, n) in [(0, 10), (10, 10), (3, 10), (500, 1000)] {
            let (lo, hi) = wilson_interval(h, n, Z99);
            let p = h as f64 / n as f64;
            assert!(lo <= p && p <= hi);
        }
    }

    fn diag_family() -> RepFamily {
        RepFamily::from_json(
            r#"{"field": {"p": 5, "prec": 12}, "d": 2,
                "generators": [[["E(z)","0"],["0","E(2*z)"]]], "parametric": true}"#,
        )
        .unwrap()
    }

    #[test]
    fn density_of_disc_neighbourhoods() {
        let fam = diag_family();
        let est = thin_density(&fam, &disc_zero(1), &[1, 2, 3, 4], 4000, 11, Sampling::ExactHaar).unwrap();
        // v(disc) = 2(1 + v(z)): measures 1, 1/5, 1/5, 1/25.
        let exact = [1.0, 0.2, 0.2, 0.04];
        for (e, x) in est.iter().zip(exact) {
            assert_eq!(e.undecidable, 0);
            assert!(e.ci_lo <= x && x <= e.ci_hi, "{e:?}");
        }
        let again = thin_density(&fam, &disc_zero(1), &[1, 2, 3, 4], 4000, 11, Sampling::ExactHaar).unwrap();
        assert_eq!(
            serde_json::to_string(&est).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn identically_zero_polynomial_has_full_measure() {
        let x = Subvariety::from_json(r#"{"polys": ["c0 - c0"], "m": 1}"#).unwrap();
        let est = thin_density(&diag_family(), &x, &[1, 2, 3], 200, 3, Sampling::ExactHaar).unwrap();
        assert!(est.iter().all(|e| e.estimate == 1.0));
    }

    #[test]
    fn zero_samples_rejected() {
        assert_eq!(
            thin_density(&diag_family(), &disc_zero(1), &[1], 0, 3, Sampling::ExactHaar).unwrap_err(),
            EnvelopeError::NoSamples
        );
    }

    #[test]
    fn spec_rejects_unknown_keys() {
        assert!(Subvariety::from_json(r#"{"polys": ["disc"], "m": 1, "r": 2}"#).is_err());
        assert!(Subvariety::from_json(r#"{"polys": [], "m": 1}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn bound_monotone(p in prop::sample::select(vec![3u64, 5, 7, 11]), f in 1u32..3, e in 1u32..4, d in 1u32..4) {
            let b = root_of_unity_order_bound(p, f, e, d).unwrap();
            for (f2, e2, d2) in [(f + 1, e, d), (f, e + 1, d), (f, e, d + 1)] {
                let c = root_of_unity_order_bound(p, f2, e2, d2).unwrap();
                prop_assert!(c.prime_to_p >= b.prime_to_p && c.p_power >= b.p_power);
            }
            prop_assert!(b.prime_to_p >= BigUint::from(1u32) && b.p_power >= BigUint::from(1u32));
        }

        #[test]
        fn tubular_is_conjugation_invariant(a in 0i128..25, b in 0i128..25, c in -10i128..10, m in 0u32..4) {
            let f = field(12);
            let mat = PadicMatrix::from_ints(f, &[&[1 + 5 * a, 1], &[0, 1 + 5 * b]]);
            let conj = PadicMatrix::from_ints(f, &[&[1, c], &[5, 1 + 5 * c]]);
            let moved = mat.conjugate_by(&conj).unwrap();
            let x = disc_zero(m);
            prop_assert_eq!(tubular_member(&mat, &x).ok(), tubular_member(&moved, &x).ok());
        }

        #[test]
        fn relations_conjugation_and_permutation_invariant(k in 0i128..4, c in -5i128..5) {
            let f = field(10);
            let one = PadicScalar::one(f);
            let i = crate::padic::hensel_lift_root(&crate::padic::Poly::new(vec![one, PadicScalar::zero(f), one]), &PadicScalar::from_int(f, 2)).unwrap();
            let x = i.pow(k as i64).unwrap();
            let a = PadicMatrix::diag(f, &[x, PadicScalar::from_int(f, -1)]);
            let b = PadicMatrix::diag(f, &[PadicScalar::from_int(f, -1), x]);
            let conj = PadicMatrix::from_ints(f, &[&[1, c], &[0, 1]]);
            let orders = |m: &PadicMatrix| {
                let mut v: Vec<(Vec<i64>, u64)> = eigenvalue_unit_relation(m, 2, 24).unwrap()
                    .into_iter().map(|r| (r.exponents, r.order)).collect();
                v.sort();
                v
            };
            let base = orders(&a);
            prop_assert_eq!(&base, &orders(&a.conjugate_by(&conj).unwrap()));
            let swapped: Vec<(Vec<i64>, u64)> = {
                let mut v: Vec<_> = orders(&b).into_iter().map(|(e, o)| (vec![e[1], e[0]], o)).collect();
                v.sort();
                v
            };
            prop_assert_eq!(base, swapped);
        }

        #[test]
        fn density_levels_nest(seed in 0u64..1000) {
            let est = thin_density(&diag_family(), &disc_zero(1), &[1, 2, 3, 4], 400, seed, Sampling::ExactHaar).unwrap();
            for w in est.windows(2) {
                let se = |e: &DensityEstimate| (e.estimate * (1.0 - e.estimate) / e.samples as f64).sqrt();
                prop_assert!(w[1].estimate <= w[0].estimate + 3.0 * (se(&w[0]) + se(&w[1])));
            }
        }
    }
}
