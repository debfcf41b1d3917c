//! Dense square matrices over [`PadicScalar`].

use serde::Serialize;
use thiserror::Error;

use crate::padic::{hensel_lift_root, FieldSpec, PadicError, PadicScalar, Poly, Val};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error(transparent)]
    Padic(#[from] PadicError),
    #[error("matrix is singular to working precision")]
    Singular,
    #[error("rank deficient to working precision (rank {rank} of {d})")]
    RankDeficient { rank: usize, d: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("idempotent defect not decreasing: v = {before} then {after}")]
    DefectNotDecreasing { before: Val, after: Val },
    #[error("lifted idempotent has non-integral trace {0}")]
    NonIntegralTrace(String),
}

#[derive(Clone, PartialEq)]
pub struct PadicMatrix {
    field: FieldSpec,
    d: usize,
    entries: Vec<PadicScalar>,
}

impl std::fmt::Debug for PadicMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.rows()).finish()
    }
}

impl Serialize for PadicMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_literals().serialize(s)
    }
}

impl PadicMatrix {
    pub fn new(field: FieldSpec, d: usize, entries: Vec<PadicScalar>) -> Result<Self, LinalgError> {
        if d == 0 || entries.len() != d * d {
            return Err(LinalgError::Dimension(format!("{} entries for d = {d}", entries.len())));
        }
        if entries.iter().any(|x| x.field() != field) {
            return Err(PadicError::FieldMismatch.into());
        }
        Ok(PadicMatrix { field, d, entries })
    }

    pub fn from_fn(field: FieldSpec, d: usize, f: impl Fn(usize, usize) -> PadicScalar) -> Self {
        let entries = (0..d * d).map(|k| f(k / d, k % d)).collect();
        PadicMatrix { field, d, entries }
    }

    pub fn from_ints(field: FieldSpec, rows: &[&[i128]]) -> Self {
        let d = rows.len();
        Self::from_fn(field, d, |i, j| PadicScalar::from_int(field, rows[i][j]))
    }

    pub fn identity(field: FieldSpec, d: usize) -> Self {
        Self::from_fn(field, d, |i, j| {
            if i == j {
                PadicScalar::one(field)
            } else {
                PadicScalar::zero(field)
            }
        })
    }

    pub fn zero(field: FieldSpec, d: usize) -> Self {
        Self::from_fn(field, d, |_, _| PadicScalar::zero(field))
    }

    pub fn diag(field: FieldSpec, diag: &[PadicScalar]) -> Self {
        Self::from_fn(field, diag.len(), |i, j| if i == j { diag[i] } else { PadicScalar::zero(field) })
    }

    pub fn field(&self) -> FieldSpec {
        self.field
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> &PadicScalar {
        &self.entries[i * self.d + j]
    }

    pub fn set(&mut self, i: usize, j: usize, x: PadicScalar) {
        self.entries[i * self.d + j] = x;
    }

    pub fn entries(&self) -> &[PadicScalar] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<PadicScalar>> {
        self.entries.chunks(self.d).map(|r| r.to_vec()).collect()
    }

    pub fn to_literals(&self) -> Vec<Vec<String>> {
        self.entries.chunks(self.d).map(|r| r.iter().map(|x| x.to_literal()).collect()).collect()
    }

    /// Weakest absolute precision among the entries.
    pub fn min_prec(&self) -> Val {
        self.entries.iter().map(|x| x.prec()).min().unwrap_or(Val::Inf)
    }

    /// Smallest observed entry valuation (`+∞` for a zero matrix).
    pub fn min_valuation(&self) -> Val {
        self.entries.iter().map(|x| x.observed_valuation()).min().unwrap_or(Val::Inf)
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|x| x.is_zero())
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::from_fn(self.field, self.d, |i, j| self.get(i, j).add(other.get(i, j)))
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::from_fn(self.field, self.d, |i, j| self.get(i, j).sub(other.get(i, j)))
    }

    pub fn scale(&self, s: &PadicScalar) -> Self {
        Self::from_fn(self.field, self.d, |i, j| self.get(i, j).mul(s))
    }

    pub fn mul(&self, other: &Self) -> Self {
        let d = self.d;
        Self::from_fn(self.field, d, |i, j| {
            let mut acc = PadicScalar::zero(self.field);
            for k in 0..d {
                acc = acc.add(&self.get(i, k).mul(other.get(k, j)));
            }
            acc
        })
    }

    pub fn mul_vec(&self, v: &[PadicScalar]) -> Vec<PadicScalar> {
        (0..self.d)
            .map(|i| {
                let mut acc = PadicScalar::zero(self.field);
                for (k, vk) in v.iter().enumerate() {
                    acc = acc.add(&self.get(i, k).mul(vk));
                }
                acc
            })
            .collect()
    }

    pub fn column(&self, j: usize) -> Vec<PadicScalar> {
        (0..self.d).map(|i| *self.get(i, j)).collect()
    }

    pub fn from_columns(field: FieldSpec, cols: &[Vec<PadicScalar>]) -> Self {
        let d = cols.len();
        Self::from_fn(field, d, |i, j| cols[j][i])
    }

    pub fn trace(&self) -> PadicScalar {
        (0..self.d).fold(PadicScalar::zero(self.field), |acc, i| acc.add(self.get(i, i)))
    }

    /// `tr(AB)` without forming the product.
    pub fn trace_of_product(&self, other: &Self) -> PadicScalar {
        let mut acc = PadicScalar::zero(self.field);
        for i in 0..self.d {
            for k in 0..self.d {
                acc = acc.add(&self.get(i, k).mul(other.get(k, i)));
            }
        }
        acc
    }

    pub fn inverse(&self) -> Result<Self, LinalgError> {
        let id = Self::identity(self.field, self.d);
        let cols: Vec<Vec<PadicScalar>> = (0..self.d).map(|j| id.column(j)).collect();
        let sol = solve(self, &cols)?;
        Ok(Self::from_columns(self.field, &sol))
    }

    /// `P⁻¹ · self · P`.
    pub fn conjugate_by(&self, p: &Self) -> Result<Self, LinalgError> {
        Ok(p.inverse()?.mul(self).mul(p))
    }

    pub fn det(&self) -> Result<PadicScalar, LinalgError> {
        let mut a = self.rows();
        let d = self.d;
        let mut det = PadicScalar::one(self.field);
        let mut row_used = vec![false; d];
        let mut col_used = vec![false; d];
        let mut assignment = vec![0usize; d];
        for _ in 0..d {
            let Some((r, c)) = pick_pivot(&a, &row_used, &col_used) else {
                return Ok(PadicScalar::zero(self.field).truncate(self.field.prec()));
            };
            if a[r][c].is_zero() {
                let prec = a[r][c].valuation().finite().unwrap_or(self.field.prec());
                return Ok(det.mul(&PadicScalar::zero_mod(self.field, prec)));
            }
            row_used[r] = true;
            col_used[c] = true;
            assignment[r] = c;
            let piv = a[r][c];
            det = det.mul(&piv);
            for i in 0..d {
                if row_used[i] || a[i][c].is_exact_zero() {
                    continue;
                }
                let factor = a[i][c].div(&piv)?;
                for j in 0..d {
                    if !col_used[j] || j == c {
                        a[i][j] = a[i][j].sub(&factor.mul(&a[r][j]));
                    }
                }
            }
        }
        if permutation_parity(&assignment) {
            det = det.neg();
        }
        Ok(det)
    }
}

/// Minimal observed valuation among unused rows and columns; ties by row, then column.
fn pick_pivot(a: &[Vec<PadicScalar>], row_used: &[bool], col_used: &[bool]) -> Option<(usize, usize)> {
    let mut best: Option<(Val, usize, usize)> = None;
    for (i, row) in a.iter().enumerate() {
        if row_used[i] {
            continue;
        }
        for (j, x) in row.iter().enumerate() {
            if col_used[j] {
                continue;
            }
            let v = x.observed_valuation();
            if best.is_none_or(|(bv, _, _)| v < bv) {
                best = Some((v, i, j));
            }
        }
    }
    best.map(|(_, i, j)| (i, j))
}

fn permutation_parity(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    let mut odd = false;
    for start in 0..perm.len() {
        if seen[start] {
            continue;
        }
        let mut len = 0;
        let mut k = start;
        while !seen[k] {
            seen[k] = true;
            k = perm[k];
            len += 1;
        }
        if len % 2 == 0 {
            odd = !odd;
        }
    }
    odd
}

/// Solve `A x = b` for each right-hand side, full pivoting on valuation.
pub fn solve(a: &PadicMatrix, rhs: &[Vec<PadicScalar>]) -> Result<Vec<Vec<PadicScalar>>, LinalgError> {
    let d = a.dim();
    let m = rhs.len();
    let mut rows = a.rows();
    let mut b: Vec<Vec<PadicScalar>> = (0..d).map(|i| rhs.iter().map(|col| col[i]).collect()).collect();
    let mut row_used = vec![false; d];
    let mut col_used = vec![false; d];
    let mut pivots = Vec::with_capacity(d);
    for _ in 0..d {
        let (r, c) = pick_pivot(&rows, &row_used, &col_used).ok_or(LinalgError::Singular)?;
        if rows[r][c].is_zero() {
            return Err(LinalgError::Singular);
        }
        row_used[r] = true;
        col_used[c] = true;
        pivots.push((r, c));
        let piv = rows[r][c];
        for i in 0..d {
            if i == r || rows[i][c].is_exact_zero() {
                continue;
            }
            let factor = rows[i][c].div(&piv)?;
            for j in 0..d {
                rows[i][j] = rows[i][j].sub(&factor.mul(&rows[r][j]));
            }
            rows[i][c] = PadicScalar::zero(a.field());
            for k in 0..m {
                b[i][k] = b[i][k].sub(&factor.mul(&b[r][k]));
            }
        }
    }
    let mut x = vec![vec![PadicScalar::zero(a.field()); d]; m];
    for &(r, c) in &pivots {
        for k in 0..m {
            x[k][c] = b[r][k].div(&rows[r][c])?;
        }
    }
    Ok(x)
}

/// Result of reducing a matrix over the valuation ring.
#[derive(Debug, Clone)]
pub struct SmithForm {
    /// Invariant valuations, nondecreasing.
    pub invariants: Vec<Val>,
    pub u: PadicMatrix,
    pub v: PadicMatrix,
}

/// `U M V = diag(π^k_1, …, π^k_d)` with `U`, `V` invertible over the valuation ring.
pub fn smith_form(m: &PadicMatrix) -> Result<SmithForm, LinalgError> {
    let f = m.field();
    let d = m.dim();
    let mut a = m.rows();
    let mut u = PadicMatrix::identity(f, d).rows();
    let mut v = PadicMatrix::identity(f, d).rows();
    let mut invariants = Vec::with_capacity(d);
    for t in 0..d {
        let mut best: Option<(Val, usize, usize)> = None;
        for (i, row) in a.iter().enumerate().skip(t) {
            for (j, x) in row.iter().enumerate().skip(t) {
                let val = x.observed_valuation();
                if best.is_none_or(|(bv, _, _)| val < bv) {
                    best = Some((val, i, j));
                }
            }
        }
        let (val, r, c) = best.expect("nonempty block");
        if val == Val::Inf {
            return Err(LinalgError::RankDeficient { rank: t, d });
        }
        a.swap(t, r);
        u.swap(t, r);
        for row in a.iter_mut() {
            row.swap(t, c);
        }
        for row in v.iter_mut() {
            row.swap(t, c);
        }
        let piv = a[t][t];
        for i in t + 1..d {
            if a[i][t].is_exact_zero() {
                continue;
            }
            let factor = a[i][t].div(&piv)?;
            for j in 0..d {
                a[i][j] = a[i][j].sub(&factor.mul(&a[t][j]));
                u[i][j] = u[i][j].sub(&factor.mul(&u[t][j]));
            }
            a[i][t] = PadicScalar::zero(f);
        }
        for j in t + 1..d {
            if a[t][j].is_exact_zero() {
                continue;
            }
            let factor = a[t][j].div(&piv)?;
            for row in a.iter_mut() {
                let x = row[j].sub(&factor.mul(&row[t]));
                row[j] = x;
            }
            for row in v.iter_mut() {
                let x = row[j].sub(&factor.mul(&row[t]));
                row[j] = x;
            }
            a[t][j] = PadicScalar::zero(f);
        }
        let k = val.finite().expect("finite pivot");
        let unit_inv = PadicScalar::pi_power(f, k).div(&piv)?;
        for x in u[t].iter_mut() {
            *x = x.mul(&unit_inv);
        }
        invariants.push(val);
    }
    let flat = |rows: Vec<Vec<PadicScalar>>| PadicMatrix::new(f, d, rows.into_iter().flatten().collect());
    Ok(SmithForm { invariants, u: flat(u)?, v: flat(v)? })
}

/// Characteristic polynomial with its discriminant and, when available, eigenvalues.
#[derive(Debug, Clone, Serialize)]
pub struct CharPolyData {
    /// Coefficients `c_0, …, c_{d-1}, 1`, constant term first.
    pub coeffs: Vec<PadicScalar>,
    pub disc: PadicScalar,
    pub eigen_data: Option<Vec<(PadicScalar, usize)>>,
}

/// Division-free characteristic polynomial (Berkowitz).
pub fn charpoly_coeffs(m: &PadicMatrix) -> Vec<PadicScalar> {
    let f = m.field();
    let d = m.dim();
    let zero = PadicScalar::zero(f);
    // Highest degree first while building.
    let mut vect = vec![PadicScalar::one(f), m.get(0, 0).neg()];
    for r in 1..d {
        let a = *m.get(r, r);
        let row: Vec<PadicScalar> = (0..r).map(|j| *m.get(r, j)).collect();
        let mut col: Vec<PadicScalar> = (0..r).map(|i| *m.get(i, r)).collect();
        let mut t = vec![PadicScalar::one(f), a.neg()];
        for _ in 0..r {
            let dot = row.iter().zip(&col).fold(zero, |acc, (x, y)| acc.add(&x.mul(y)));
            t.push(dot.neg());
            col = (0..r)
                .map(|i| (0..r).fold(zero, |acc, k| acc.add(&m.get(i, k).mul(&col[k]))))
                .collect();
        }
        let mut next = vec![zero; r + 2];
        for (i, slot) in next.iter_mut().enumerate() {
            for (j, vj) in vect.iter().enumerate() {
                if i >= j && i - j < t.len() {
                    *slot = slot.add(&t[i - j].mul(vj));
                }
            }
        }
        vect = next;
    }
    vect.reverse();
    vect
}

/// Discriminant of a monic polynomial, `(-1)^(n(n-1)/2) Res(f, f')`.
pub fn discriminant(coeffs: &[PadicScalar]) -> Result<PadicScalar, LinalgError> {
    let f = coeffs[0].field();
    let n = coeffs.len() - 1;
    match n {
        0 | 1 => return Ok(PadicScalar::one(f)),
        2 => {
            let four = PadicScalar::from_int(f, 4);
            return Ok(coeffs[1].mul(&coeffs[1]).sub(&four.mul(&coeffs[0])));
        }
        _ => {}
    }
    let deriv = Poly::new(coeffs.to_vec()).derivative().coeffs;
    let size = 2 * n - 1;
    let zero = PadicScalar::zero(f);
    let mut syl = vec![zero; size * size];
    for i in 0..n - 1 {
        for (k, c) in coeffs.iter().rev().enumerate() {
            syl[i * size + i + k] = *c;
        }
    }
    for i in 0..n {
        for (k, c) in deriv.iter().rev().enumerate() {
            syl[(n - 1 + i) * size + i + k] = *c;
        }
    }
    let res = PadicMatrix::new(f, size, syl)?.det()?;
    Ok(if (n * (n - 1) / 2) % 2 == 1 { res.neg() } else { res })
}

pub fn charpoly(m: &PadicMatrix) -> Result<CharPolyData, LinalgError> {
    let coeffs = charpoly_coeffs(m);
    let disc = discriminant(&coeffs)?;
    let eigen_data = eigenvalues(m, &coeffs);
    Ok(CharPolyData { coeffs, disc, eigen_data })
}

/// Eigenvalues in the working field: read off triangular matrices, otherwise
/// Hensel-lifted from simple residue roots. `None` when neither applies.
fn eigenvalues(m: &PadicMatrix, coeffs: &[PadicScalar]) -> Option<Vec<(PadicScalar, usize)>> {
    let d = m.dim();
    let lower_zero = (0..d).all(|i| (0..i).all(|j| m.get(i, j).is_zero()));
    let upper_zero = (0..d).all(|i| (i + 1..d).all(|j| m.get(i, j).is_zero()));
    if lower_zero || upper_zero {
        let mut groups: Vec<(PadicScalar, usize)> = Vec::new();
        for i in 0..d {
            let x = *m.get(i, i);
            match groups.iter_mut().find(|(y, _)| y.sub(&x).is_zero()) {
                Some(g) => g.1 += 1,
                None => groups.push((x, 1)),
            }
        }
        return Some(groups);
    }
    let f = m.field();
    if coeffs.iter().any(|c| !c.is_integral()) {
        return None;
    }
    let poly = Poly::new(coeffs.to_vec());
    let mut roots = Vec::new();
    for r in 0..f.p() {
        let x = PadicScalar::from_int(f, r as i128);
        if poly.eval(&x).residue() == Some(0) {
            match hensel_lift_root(&poly, &x) {
                Ok(root) => roots.push((root, 1)),
                Err(_) => return None,
            }
        }
    }
    (roots.len() == d).then_some(roots)
}

/// Gram matrix of the trace pairing: entry `(s, t)` is `tr(M_s M_t)`.
pub fn gram(mats: &[PadicMatrix]) -> Result<PadicMatrix, LinalgError> {
    let first = mats.first().ok_or_else(|| LinalgError::Dimension("empty word list".into()))?;
    let f = first.field();
    let n = mats.len();
    let mut entries = Vec::with_capacity(n * n);
    for a in mats {
        for b in mats {
            entries.push(a.trace_of_product(b));
        }
    }
    PadicMatrix::new(f, n, entries)
}

/// Outcome of Newton idempotent lifting.
#[derive(Debug, Clone)]
pub struct LiftedIdempotent {
    pub matrix: PadicMatrix,
    /// Trace of the lifted idempotent, an integer in `0..=d`.
    pub rank: usize,
    pub iterations: usize,
    /// Defect valuations `v(E² − E)` observed before each step.
    pub defects: Vec<Val>,
}

/// Newton iteration `E ← 3E² − 2E³` from an approximate idempotent.
pub fn lift_idempotent(e0: &PadicMatrix) -> Result<LiftedIdempotent, LinalgError> {
    let f = e0.field();
    let three = PadicScalar::from_int(f, 3);
    let two = PadicScalar::from_int(f, 2);
    let mut e = e0.clone();
    let mut defects = Vec::new();
    let mut iterations = 0;
    loop {
        let sq = e.mul(&e);
        let defect = sq.sub(&e).min_valuation();
        if let Some(&prev) = defects.last() {
            let ok = match (prev, defect) {
                (_, Val::Inf) => true,
                (Val::Fin(a), Val::Fin(b)) => b >= 2 * a && b > a,
                _ => false,
            };
            if !ok {
                return Err(LinalgError::DefectNotDecreasing { before: prev, after: defect });
            }
        } else if defect <= Val::Fin(0) {
            return Err(LinalgError::DefectNotDecreasing { before: defect, after: defect });
        }
        defects.push(defect);
        if defect == Val::Inf {
            break;
        }
        e = sq.scale(&three).sub(&sq.mul(&e).scale(&two));
        iterations += 1;
    }
    let tr = e.trace();
    let rank = (0..=e.dim())
        .find(|&k| tr.sub(&PadicScalar::from_int(f, k as i128)).is_zero())
        .ok_or_else(|| LinalgError::NonIntegralTrace(tr.to_literal()))?;
    Ok(LiftedIdempotent { matrix: e, rank, iterations, defects })
}

/// Incremental linear-independence test for vectors, by valuation-pivoted elimination.
#[derive(Debug, Clone, Default)]
pub struct Echelon {
    rows: Vec<(usize, Vec<PadicScalar>)>,
}

impl Echelon {
    pub fn new() -> Self {
        Echelon { rows: Vec::new() }
    }

    pub fn rank(&self) -> usize {
        self.rows.len()
    }

    fn reduce(&self, v: &[PadicScalar]) -> Vec<PadicScalar> {
        let mut v = v.to_vec();
        for (pc, row) in &self.rows {
            let c = v[*pc];
            if c.is_exact_zero() {
                continue;
            }
            for (x, r) in v.iter_mut().zip(row) {
                *x = x.sub(&c.mul(r));
            }
        }
        v
    }

    /// Adds `v` if it is independent of the stored rows; reports whether it was.
    pub fn insert(&mut self, v: &[PadicScalar]) -> bool {
        let red = self.reduce(v);
        let best = red
            .iter()
            .enumerate()
            .filter(|(_, x)| !x.is_zero())
            .min_by_key(|(i, x)| (x.observed_valuation(), *i));
        let Some((pc, piv)) = best else {
            return false;
        };
        let Ok(inv) = piv.inv() else {
            return false;
        };
        let row: Vec<PadicScalar> = red.iter().map(|x| x.mul(&inv)).collect();
        for (opc, orow) in self.rows.iter_mut() {
            let _ = opc;
            let c = orow[pc];
            if c.is_exact_zero() {
                continue;
            }
            for (x, r) in orow.iter_mut().zip(&row) {
                *x = x.sub(&c.mul(r));
            }
        }
        self.rows.push((pc, row));
        true
    }
}
