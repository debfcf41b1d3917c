//! Constructing physical limits: Gram certificates and trace coordinates for
//! irreducible limits, idempotents, valuation profiles and rebalancing for
//! multiplicity-free ones.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::convergence::{tail_start, tends_to_infinity, WordDeltas};
use crate::expr::Index;
use crate::linalg::{charpoly, gram, lift_idempotent, solve, Echelon, LinalgError, PadicMatrix};
use crate::padic::{FieldSpec, PadicScalar, Val};
use crate::rep::{Instance, RepError, RepFamily, Word, WordBall};

/// Radius of the sub-ball used for pairwise trace checks.
const PAIR_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    LimitCertificate,
    MemberIrreducibility,
    BlockIdempotents,
    ValuationProfile,
    Rebalance,
    Alignment,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::LimitCertificate => "limit certificate",
            Stage::MemberIrreducibility => "member irreducibility",
            Stage::BlockIdempotents => "block idempotents",
            Stage::ValuationProfile => "valuation profile",
            Stage::Rebalance => "rebalance",
            Stage::Alignment => "alignment",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LimitError {
    #[error("no irreducibility certificate at index {index}: rank {rank} < {needed} on the ball")]
    NoCertificate { index: Index, rank: usize, needed: usize },
    #[error("Gram determinant vanishes to precision at index {index}")]
    DegenerateGram { index: Index },
    #[error("precision budget exceeded: 2·v(det gram) = {} ≥ N = {prec}", 2 * det_val)]
    PrecisionBudget { det_val: i64, prec: i64 },
    #[error("no separating word in the ball: limit is not multiplicity free (or the ball is too small)")]
    NoSeparatingWord,
    #[error("idempotent lift failed at index {index}: {reason}")]
    IdempotentLift { index: Index, reason: String },
    #[error("coercivity x_ij + x_ji -> inf is not certified on the observed range")]
    CoercivityNotCertified,
    #[error("no usable index in the requested range")]
    EmptyRange,
    #[error("{stage} stage failed{}: {source}", index.map(|n| format!(" at n = {n}")).unwrap_or_default())]
    Stage { stage: Stage, index: Option<i64>, source: Box<LimitError> },
    #[error(transparent)]
    Rep(#[from] RepError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl LimitError {
    fn at(self, stage: Stage, index: Option<i64>) -> LimitError {
        LimitError::Stage { stage, index, source: Box::new(self) }
    }

    /// The underlying error with stage wrappers removed.
    pub fn root(&self) -> &LimitError {
        match self {
            LimitError::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            LimitError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

/// Index skipped by a per-member stage, with the reason.
#[derive(Debug, Clone, Serialize)]
pub struct SkippedIndex {
    pub n: i64,
    pub reason: String,
}

fn combine(field: FieldSpec, d: usize, coeffs: &[PadicScalar], mats: &[PadicMatrix]) -> PadicMatrix {
    coeffs
        .iter()
        .zip(mats)
        .fold(PadicMatrix::zero(field, d), |acc, (c, m)| acc.add(&m.scale(c)))
}


#[derive(Debug, Clone, Serialize)]
pub struct IrreducibilityCertificate {
    pub index: Index,
    pub radius: usize,
    pub words: Vec<Word>,
    pub gram: PadicMatrix,
    /// `v(det gram)` in π-digits.
    pub det_val: i64,
}

fn certify(inst: &Instance, ball: &WordBall, images: &[PadicMatrix]) -> Result<IrreducibilityCertificate, LimitError> {
    let needed = inst.d * inst.d;
    let mut ech = Echelon::new();
    let mut words = Vec::new();
    let mut mats = Vec::new();
    for (w, m) in ball.words.iter().zip(images) {
        if ech.insert(m.entries()) {
            words.push(w.clone());
            mats.push(m.clone());
            if words.len() == needed {
                break;
            }
        }
    }
    if words.len() < needed {
        return Err(LimitError::NoCertificate { index: inst.index, rank: words.len(), needed });
    }
    let g = gram(&mats)?;
    // det gram = ±det(F)², F the matrix of flattened images.
    let flat = PadicMatrix::from_columns(inst.field, &mats.iter().map(|m| m.entries().to_vec()).collect::<Vec<_>>());
    let v = flat.det()?.observed_valuation();
    let Val::Fin(det_val) = v.add(v) else {
        return Err(LimitError::DegenerateGram { index: inst.index });
    };
    Ok(IrreducibilityCertificate { index: inst.index, radius: ball.radius, words, gram: g, det_val })
}

/// Greedy shortlex search for `d²` ball words whose images span `M_d`.
pub fn irreducibility_certificate(
    fam: &RepFamily,
    index: Index,
    radius: usize,
) -> Result<IrreducibilityCertificate, LimitError> {
    let inst = fam.at(index)?;
    let ball = fam.word_ball(radius)?;
    let images = inst.eval_ball(&ball);
    certify(&inst, &ball, &images)
}

/// Coefficients with `ρ(g)_{ij} = Σ_k a_{k,ij} tr(ρ(g) ρ(g_k))`.
#[derive(Debug, Clone, Serialize)]
pub struct TraceCoordinates {
    pub index: Index,
    pub d: usize,
    pub words: Vec<Word>,
    /// `coeffs[i*d + j][k] = a_{k,i,j}`.
    pub coeffs: Vec<Vec<PadicScalar>>,
    pub det_val: i64,
    #[serde(skip)]
    basis: Vec<PadicMatrix>,
}

impl TraceCoordinates {
    pub fn reconstruct(&self, m: &PadicMatrix) -> PadicMatrix {
        let traces: Vec<PadicScalar> = self.basis.iter().map(|b| m.trace_of_product(b)).collect();
        let f = m.field();
        PadicMatrix::from_fn(f, self.d, |i, j| {
            self.coeffs[i * self.d + j]
                .iter()
                .zip(&traces)
                .fold(PadicScalar::zero(f), |acc, (a, t)| acc.add(&a.mul(t)))
        })
    }

    /// Observed valuation of the reconstruction error at `m`.
    pub fn residual(&self, m: &PadicMatrix) -> Val {
        self.reconstruct(m).sub(m).min_valuation()
    }

    /// Guaranteed residual valuation, `N − 2·v(det gram)` in π-digits.
    pub fn residual_bound(&self, field: FieldSpec) -> i64 {
        field.prec() - 2 * self.det_val
    }
}

pub fn trace_coordinates(
    cert: &IrreducibilityCertificate,
    fam: &RepFamily,
    index: Index,
) -> Result<TraceCoordinates, LimitError> {
    let inst = fam.at(index)?;
    let basis: Vec<PadicMatrix> = cert.words.iter().map(|w| inst.eval(w)).collect();
    let g = gram(&basis)?;
    let det_val = match g.det()?.observed_valuation() {
        Val::Fin(v) => v,
        Val::Inf => return Err(LimitError::DegenerateGram { index }),
    };
    let prec = fam.field().prec();
    if 2 * det_val >= prec {
        return Err(LimitError::PrecisionBudget { det_val, prec });
    }
    let d = inst.d;
    let rhs: Vec<Vec<PadicScalar>> = (0..d * d)
        .map(|ij| basis.iter().map(|b| b.entries()[ij]).collect())
        .collect();
    let coeffs = solve(&g, &rhs)?;
    Ok(TraceCoordinates { index, d, words: cert.words.clone(), coeffs, det_val, basis })
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignedMember {
    pub n: i64,
    pub frame: PadicMatrix,
    pub generators: Vec<PadicMatrix>,
    pub certificate_det_val: i64,
    /// Minimum entrywise valuation of `aligned(w) − ρ(w)` over the ball.
    pub delta: Val,
}

#[derive(Debug, Clone, Serialize)]
pub struct IrreducibleAlignment {
    pub radius: usize,
    pub threshold: i64,
    pub limit_certificate: IrreducibilityCertificate,
    pub members: Vec<AlignedMember>,
    pub skipped: Vec<SkippedIndex>,
    pub per_word: Vec<WordDeltas>,
    pub monotone_tail: Option<i64>,
    pub uniform_on_ball: bool,
}

impl IrreducibleAlignment {
    pub fn indices(&self) -> Vec<i64> {
        self.members.iter().map(|m| m.n).collect()
    }

    pub fn deltas(&self) -> Vec<Val> {
        self.members.iter().map(|m| m.delta).collect()
    }
}

fn entry_deltas(aligned: &[PadicMatrix], target: &[PadicMatrix]) -> Vec<Val> {
    aligned.iter().zip(target).map(|(a, t)| a.sub(t).min_valuation()).collect()
}

/// Conjugate members into frames where entries converge to those of the limit.
pub fn align_irreducible(
    fam: &RepFamily,
    radius: usize,
    ns: &[i64],
    threshold: i64,
) -> Result<IrreducibleAlignment, LimitError> {
    let f = fam.field();
    let d = fam.dim();
    let ball = fam.word_ball(radius)?;
    let lim = fam.at(Index::Limit)?;
    let lim_images = lim.eval_ball(&ball);
    let cert = certify(&lim, &ball, &lim_images).map_err(|e| e.at(Stage::LimitCertificate, None))?;
    // Coefficients expressing the matrix units E_{i1} in the certificate basis.
    let basis: Vec<PadicMatrix> = cert.words.iter().map(|w| lim.eval(w)).collect();
    let flat = PadicMatrix::from_columns(f, &basis.iter().map(|b| b.entries().to_vec()).collect::<Vec<_>>());
    let units: Vec<Vec<PadicScalar>> = (0..d)
        .map(|i| {
            let mut e = vec![PadicScalar::zero(f); d * d];
            e[i * d] = PadicScalar::one(f);
            e
        })
        .collect();
    let recipes = solve(&flat, &units).map_err(|e| LimitError::from(e).at(Stage::LimitCertificate, None))?;

    let outcomes: Vec<Result<(AlignedMember, Vec<Val>), SkippedIndex>> = ns
        .par_iter()
        .map(|&n| {
            let skip = |reason: String| SkippedIndex { n, reason };
            let inst = fam.at(Index::Member(n)).map_err(|e| skip(e.to_string()))?;
            let images = inst.eval_ball(&ball);
            let mcert = certify(&inst, &ball, &images).map_err(|e| skip(e.to_string()))?;
            let member_basis: Vec<PadicMatrix> = cert.words.iter().map(|w| inst.eval(w)).collect();
            let eps0 = combine(f, d, &recipes[0], &member_basis);
            let eps = lift_idempotent(&eps0).map_err(|e| skip(format!("idempotent lift: {e}")))?;
            if eps.rank != 1 {
                return Err(skip(format!("lifted idempotent has rank {}", eps.rank)));
            }
            let v = eps.matrix.column(0);
            if v.iter().all(|x| x.is_zero()) {
                return Err(skip("frame vector vanishes".into()));
            }
            let cols: Vec<Vec<PadicScalar>> = recipes
                .iter()
                .map(|c| combine(f, d, c, &member_basis).mul_vec(&v))
                .collect();
            let frame = PadicMatrix::from_columns(f, &cols);
            let aligned = inst.conjugated(&frame).map_err(|_| skip("frame is degenerate".into()))?;
            let word_deltas = entry_deltas(&aligned.eval_ball(&ball), &lim_images);
            let delta = word_deltas.iter().copied().min().unwrap_or(Val::Inf);
            Ok((
                AlignedMember { n, frame, generators: aligned.gens, certificate_det_val: mcert.det_val, delta },
                word_deltas,
            ))
        })
        .collect();

    let mut members = Vec::new();
    let mut skipped = Vec::new();
    let mut table: Vec<Vec<Val>> = Vec::new();
    for o in outcomes {
        match o {
            Ok((m, wd)) => {
                members.push(m);
                table.push(wd);
            }
            Err(s) => skipped.push(s),
        }
    }
    if members.is_empty() {
        return Err(LimitError::EmptyRange.at(Stage::Alignment, None));
    }
    let per_word = word_table(&ball, &table, threshold);
    let deltas: Vec<Val> = members.iter().map(|m| m.delta).collect();
    Ok(IrreducibleAlignment {
        radius,
        threshold,
        limit_certificate: cert,
        monotone_tail: Some(members[tail_start(&deltas)].n),
        uniform_on_ball: tends_to_infinity(&deltas, threshold),
        members,
        skipped,
        per_word,
    })
}

fn word_table(ball: &WordBall, table: &[Vec<Val>], threshold: i64) -> Vec<WordDeltas> {
    ball.words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let deltas: Vec<Val> = table.iter().map(|row| row[i]).collect();
            WordDeltas { word: w.to_string(), convergent: tends_to_infinity(&deltas, threshold), deltas }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MemberIdempotents {
    pub n: i64,
    pub idempotents: Vec<PadicMatrix>,
    pub lift_iterations: Vec<usize>,
    /// `min v(tr(e_i x e_j y e_i))` over pairs in the small ball, `i ≠ j`.
    pub cross_trace: Val,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockStructure {
    pub dims: Vec<usize>,
    pub separating_word: Word,
    pub eigenvalues: Vec<PadicScalar>,
    pub limit_idempotents: Vec<PadicMatrix>,
    /// Columns of each idempotent that span its image in the limit.
    pub frame_columns: Vec<Vec<usize>>,
    pub members: Vec<MemberIdempotents>,
    pub skipped: Vec<SkippedIndex>,
    pub threshold: i64,
    pub cross_trace_certified: bool,
}

impl BlockStructure {
    pub fn s(&self) -> usize {
        self.dims.len()
    }

    /// Positions of block `i` in the adapted frame.
    pub fn positions(&self, i: usize) -> std::ops::Range<usize> {
        let start: usize = self.dims[..i].iter().sum();
        start..start + self.dims[i]
    }

    fn block_of(&self, alpha: usize) -> usize {
        (0..self.s()).find(|&i| self.positions(i).contains(&alpha)).unwrap_or(0)
    }

    /// Adapted frame: the chosen columns of each idempotent.
    pub fn frame(&self, idempotents: &[PadicMatrix]) -> PadicMatrix {
        let cols: Vec<Vec<PadicScalar>> = idempotents
            .iter()
            .zip(&self.frame_columns)
            .flat_map(|(e, cs)| cs.iter().map(|&c| e.column(c)).collect::<Vec<_>>())
            .collect();
        PadicMatrix::from_columns(idempotents[0].field(), &cols)
    }
}

/// Spectral projector onto group `i` as a polynomial in `m`, before lifting.
fn lagrange(m: &PadicMatrix, groups: &[(PadicScalar, usize)], i: usize) -> Result<PadicMatrix, LinalgError> {
    let f = m.field();
    let d = m.dim();
    let id = PadicMatrix::identity(f, d);
    let mut acc = id.clone();
    for (j, (lj, mj)) in groups.iter().enumerate() {
        if j == i {
            continue;
        }
        let scale = groups[i].0.sub(lj).inv()?;
        let factor = m.sub(&id.scale(lj)).scale(&scale);
        for _ in 0..*mj {
            acc = acc.mul(&factor);
        }
    }
    Ok(acc)
}

fn lift_groups(m: &PadicMatrix, groups: &[(PadicScalar, usize)], index: Index) -> Result<(Vec<PadicMatrix>, Vec<usize>), LimitError> {
    let lift_err = |reason: String| LimitError::IdempotentLift { index, reason };
    if groups.len() == 1 {
        return Ok((vec![PadicMatrix::identity(m.field(), m.dim())], vec![0]));
    }
    let mut es = Vec::new();
    let mut its = Vec::new();
    for (i, (_, mult)) in groups.iter().enumerate() {
        let e0 = lagrange(m, groups, i).map_err(|e| lift_err(e.to_string()))?;
        let lifted = lift_idempotent(&e0).map_err(|e| lift_err(e.to_string()))?;
        if lifted.rank != *mult {
            return Err(lift_err(format!("trace {} differs from block dimension {mult}", lifted.rank)));
        }
        es.push(lifted.matrix);
        its.push(lifted.iterations);
    }
    let total = es.iter().skip(1).fold(es[0].clone(), |a, e| a.add(e));
    if !total.sub(&PadicMatrix::identity(m.field(), m.dim())).is_zero() {
        return Err(lift_err("idempotents do not sum to the identity".into()));
    }
    for i in 0..es.len() {
        for j in 0..es.len() {
            if i != j && !es[i].mul(&es[j]).is_zero() {
                return Err(lift_err(format!("e_{} e_{} is not zero", i + 1, j + 1)));
            }
        }
    }
    Ok((es, its))
}

fn cross_trace(es: &[PadicMatrix], pair_images: &[PadicMatrix]) -> Val {
    let mut best = Val::Inf;
    for (i, ei) in es.iter().enumerate() {
        for (j, ej) in es.iter().enumerate() {
            if i == j {
                continue;
            }
            for x in pair_images {
                let left = ei.mul(x).mul(ej);
                for y in pair_images {
                    let t = left.mul(y).mul(ei).trace().observed_valuation();
                    best = best.min(t);
                }
            }
        }
    }
    best
}

fn independent_columns(e: &PadicMatrix, count: usize) -> Option<Vec<usize>> {
    let mut ech = Echelon::new();
    let cols: Vec<usize> = (0..e.dim()).filter(|&c| ech.insert(&e.column(c))).take(count).collect();
    (cols.len() == count).then_some(cols)
}

/// Submatrix on the given positions.
fn block(m: &PadicMatrix, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<PadicScalar> {
    rows.flat_map(|i| cols.clone().map(move |j| *m.get(i, j))).collect()
}

/// Validate the grouping from one candidate word against the limit image.
fn limit_blocks(
    lim_images: &[PadicMatrix],
    pair_images: &[PadicMatrix],
    m: &PadicMatrix,
    groups: &[(PadicScalar, usize)],
) -> Option<(Vec<PadicMatrix>, Vec<Vec<usize>>)> {
    let (es, _) = lift_groups(m, groups, Index::Limit).ok()?;
    let frame_columns: Vec<Vec<usize>> = es
        .iter()
        .zip(groups)
        .map(|(e, (_, k))| independent_columns(e, *k))
        .collect::<Option<_>>()?;
    if cross_trace(&es, pair_images) != Val::Inf {
        return None;
    }
    let cols: Vec<Vec<PadicScalar>> = es
        .iter()
        .zip(&frame_columns)
        .flat_map(|(e, cs)| cs.iter().map(|&c| e.column(c)).collect::<Vec<_>>())
        .collect();
    let frame = PadicMatrix::from_columns(m.field(), &cols);
    let pinv = frame.inverse().ok()?;
    let conj: Vec<PadicMatrix> = lim_images.iter().map(|x| pinv.mul(x).mul(&frame)).collect();
    let mut start = 0;
    for (_, k) in groups {
        let r = start..start + k;
        let mut ech = Echelon::new();
        for c in &conj {
            ech.insert(&block(c, r.clone(), r.clone()));
            if ech.rank() == k * k {
                break;
            }
        }
        if ech.rank() < k * k {
            return None;
        }
        start += k;
    }
    Some((es, frame_columns))
}

/// Orthogonal idempotents splitting the limit into absolutely irreducible
/// blocks, and their lifts to every member.
pub fn block_idempotents(
    fam: &RepFamily,
    radius: usize,
    ns: &[i64],
    threshold: i64,
) -> Result<BlockStructure, LimitError> {
    let ball = fam.word_ball(radius)?;
    let pair_ball = ball.sub_ball(PAIR_RADIUS.min(radius));
    let lim = fam.at(Index::Limit)?;
    let lim_images = lim.eval_ball(&ball);
    let lim_pairs = lim.eval_ball(&pair_ball);
    let mut found = None;
    let mut tried: Vec<Vec<(PadicScalar, usize)>> = Vec::new();
    for (w, m) in ball.words.iter().zip(&lim_images) {
        let Some(groups) = charpoly(m)?.eigen_data else { continue };
        let seen = tried.iter().any(|t| {
            t.len() == groups.len() && t.iter().zip(&groups).all(|(a, b)| a.1 == b.1 && a.0.sub(&b.0).is_zero())
        });
        if seen {
            continue;
        }
        if let Some((es, cols)) = limit_blocks(&lim_images, &lim_pairs, m, &groups) {
            found = Some((w.clone(), groups, es, cols));
            break;
        }
        tried.push(groups);
    }
    let (word, groups, limit_idempotents, frame_columns) = found.ok_or(LimitError::NoSeparatingWord)?;

    let outcomes: Vec<Result<MemberIdempotents, SkippedIndex>> = ns
        .par_iter()
        .map(|&n| {
            let skip = |reason: String| SkippedIndex { n, reason };
            let inst = fam.at(Index::Member(n)).map_err(|e| skip(e.to_string()))?;
            let m = inst.eval(&word);
            let (es, its) = lift_groups(&m, &groups, Index::Member(n)).map_err(|e| skip(e.to_string()))?;
            let cross = cross_trace(&es, &inst.eval_ball(&pair_ball));
            Ok(MemberIdempotents { n, idempotents: es, lift_iterations: its, cross_trace: cross })
        })
        .collect();
    let (members, skipped) = split(outcomes);
    if members.is_empty() {
        return Err(LimitError::EmptyRange);
    }
    let cross: Vec<Val> = members.iter().map(|m| m.cross_trace).collect();
    Ok(BlockStructure {
        dims: groups.iter().map(|g| g.1).collect(),
        separating_word: word,
        eigenvalues: groups.iter().map(|g| g.0).collect(),
        limit_idempotents,
        frame_columns,
        cross_trace_certified: tends_to_infinity(&cross, threshold),
        members,
        skipped,
        threshold,
    })
}

fn split<T>(outcomes: Vec<Result<T, SkippedIndex>>) -> (Vec<T>, Vec<SkippedIndex>) {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for o in outcomes {
        match o {
            Ok(x) => ok.push(x),
            Err(s) => bad.push(s),
        }
    }
    (ok, bad)
}

#[derive(Debug, Clone, Serialize)]
pub struct ValuationProfile {
    pub radius: usize,
    pub dims: Vec<usize>,
    pub indices: Vec<i64>,
    /// Block-level `x[n][i][j]`: minimum valuation of block `(i, j)` over the ball.
    pub x: Vec<Vec<Vec<Val>>>,
    /// Entry-level valuations `x[n][α][β]`.
    pub x_entries: Vec<Vec<Vec<Val>>>,
    pub triangle_constant: i64,
    pub block_constant: i64,
    pub coercivity: Vec<Val>,
    pub coercivity_certified: bool,
    pub threshold: i64,
    #[serde(skip)]
    pub frames: Vec<PadicMatrix>,
    #[serde(skip)]
    prec: i64,
}

/// Smallest `N ≥ 0` with `x_ij ≤ x_ik + x_kj + N` on the recorded data.
pub fn triangle_constant(xs: &[Vec<Vec<Val>>]) -> i64 {
    let mut worst = 0;
    for x in xs {
        let s = x.len();
        for i in 0..s {
            for j in 0..s {
                let Val::Fin(lhs) = x[i][j] else { continue };
                for k in 0..s {
                    if let (Val::Fin(a), Val::Fin(b)) = (x[i][k], x[k][j]) {
                        worst = worst.max(lhs - a - b);
                    }
                }
            }
        }
    }
    worst
}

fn coercivity(x: &[Vec<Val>]) -> Val {
    let s = x.len();
    let mut c = Val::Inf;
    for i in 0..s {
        for j in 0..s {
            if i != j {
                c = c.min(x[i][j].add(x[j][i]));
            }
        }
    }
    c
}

pub fn valuation_profile(
    fam: &RepFamily,
    blocks: &BlockStructure,
    radius: usize,
    threshold: i64,
) -> Result<ValuationProfile, LimitError> {
    let ball = fam.word_ball(radius)?;
    let d = fam.dim();
    let s = blocks.s();
    let rows: Vec<(i64, PadicMatrix, Vec<Vec<Val>>)> = blocks
        .members
        .par_iter()
        .map(|mi| -> Result<_, LimitError> {
            let inst = fam.at(Index::Member(mi.n))?;
            let frame = blocks.frame(&mi.idempotents);
            let conj = inst.conjugated(&frame)?;
            let mut x = vec![vec![Val::Inf; d]; d];
            for m in conj.eval_ball(&ball) {
                for (a, row) in x.iter_mut().enumerate() {
                    for (b, slot) in row.iter_mut().enumerate() {
                        *slot = (*slot).min(m.get(a, b).observed_valuation());
                    }
                }
            }
            Ok((mi.n, frame, x))
        })
        .collect::<Result<_, _>>()?;
    let mut x_blocks = Vec::with_capacity(rows.len());
    let mut block_constant = 0;
    for (_, _, xe) in &rows {
        let mut xb = vec![vec![Val::Inf; s]; s];
        for (a, row) in xe.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                let (i, j) = (blocks.block_of(a), blocks.block_of(b));
                xb[i][j] = xb[i][j].min(v);
            }
        }
        for (a, row) in xe.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                if let (Val::Fin(entry), Val::Fin(blk)) = (v, xb[blocks.block_of(a)][blocks.block_of(b)]) {
                    block_constant = block_constant.max(entry - blk);
                }
            }
        }
        x_blocks.push(xb);
    }
    let coercivity: Vec<Val> = x_blocks.iter().map(|x| coercivity(x)).collect();
    Ok(ValuationProfile {
        radius,
        dims: blocks.dims.clone(),
        indices: rows.iter().map(|r| r.0).collect(),
        triangle_constant: triangle_constant(&x_blocks),
        block_constant,
        coercivity_certified: tends_to_infinity(&coercivity, threshold),
        coercivity,
        threshold,
        frames: rows.iter().map(|r| r.1.clone()).collect(),
        x_entries: rows.into_iter().map(|r| r.2).collect(),
        x: x_blocks,
        prec: fam.field().prec(),
    })
}

impl ValuationProfile {
    /// Profile from given block-level data, for planning without a family.
    pub fn from_data(indices: Vec<i64>, dims: Vec<usize>, x: Vec<Vec<Vec<Val>>>, prec: i64, threshold: i64) -> Self {
        let coercivity: Vec<Val> = x.iter().map(|m| coercivity(m)).collect();
        ValuationProfile {
            radius: 0,
            triangle_constant: triangle_constant(&x),
            block_constant: 0,
            coercivity_certified: tends_to_infinity(&coercivity, threshold),
            coercivity,
            threshold,
            frames: Vec::new(),
            x_entries: x.clone(),
            x,
            indices,
            dims,
            prec,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RebalancePlan {
    pub indices: Vec<i64>,
    pub dims: Vec<usize>,
    pub shift: i64,
    /// Block exponents `u[n][i]` in π-digits, normalised to `min u = 0`.
    pub u: Vec<Vec<i64>>,
    pub margins: Vec<Val>,
    /// `⌊c_n / d⌋ − N − 1`.
    pub bounds: Vec<Val>,
    pub bound_holds: bool,
}

impl RebalancePlan {
    /// `D_n = diag(π^{u_i})`, repeated over each block.
    pub fn conjugator(&self, field: FieldSpec, k: usize) -> PadicMatrix {
        let diag: Vec<PadicScalar> = self
            .dims
            .iter()
            .zip(&self.u[k])
            .flat_map(|(&dim, &u)| std::iter::repeat(PadicScalar::pi_power(field, u)).take(dim))
            .collect();
        PadicMatrix::diag(field, &diag)
    }
}

/// Barycentric exponents for one index.
pub fn barycenter(x: &[Vec<Val>], shift: i64, cap: i64) -> Vec<i64> {
    let s = x.len();
    let clamp = |v: Val| v.finite().map(|t| t + shift).unwrap_or(cap).min(cap);
    let sums: Vec<i64> = (0..s)
        .map(|i| (0..s).map(|l| if l == i { 0 } else { -clamp(x[l][i]) }).sum())
        .collect();
    let u: Vec<i64> = sums.iter().map(|t| t.div_euclid(s as i64)).collect();
    let lo = u.iter().copied().min().unwrap_or(0);
    u.iter().map(|v| v - lo).collect()
}

pub fn margin(x: &[Vec<Val>], u: &[i64]) -> Val {
    let s = x.len();
    let mut m = Val::Inf;
    for i in 0..s {
        for j in 0..s {
            if i != j {
                m = m.min(x[i][j].sub_fin(u[i] - u[j]));
            }
        }
    }
    m
}

pub fn rebalance(profile: &ValuationProfile) -> Result<RebalancePlan, LimitError> {
    if !profile.coercivity_certified {
        return Err(LimitError::CoercivityNotCertified);
    }
    let shift = profile.triangle_constant;
    let d: i64 = profile.dims.iter().sum::<usize>() as i64;
    let cap = profile.prec + shift;
    let u: Vec<Vec<i64>> = profile.x.iter().map(|x| barycenter(x, shift, cap)).collect();
    let margins: Vec<Val> = profile.x.iter().zip(&u).map(|(x, u)| margin(x, u)).collect();
    let bounds: Vec<Val> = profile
        .coercivity
        .iter()
        .map(|c| match c {
            Val::Fin(c) => Val::Fin(c.div_euclid(d) - shift - 1),
            Val::Inf => Val::Inf,
        })
        .collect();
    let bound_holds = margins.iter().zip(&bounds).all(|(m, b)| match (m, b) {
        (_, Val::Inf) => true,
        (m, b) => m >= b,
    });
    Ok(RebalancePlan {
        indices: profile.indices.clone(),
        dims: profile.dims.clone(),
        shift,
        u,
        margins,
        bounds,
        bound_holds,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockAlignedMember {
    pub n: i64,
    /// `Q_n = P_n D_n`; aligned member is `Q_n⁻¹ ρ_n Q_n`.
    pub conjugator: PadicMatrix,
    pub generators: Vec<PadicMatrix>,
    pub margin: Val,
    pub off_diagonal_delta: Val,
    pub diagonal_delta: Val,
    pub delta: Val,
    /// `tr` of each diagonal block of each aligned generator.
    pub block_traces: Vec<Vec<PadicScalar>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiplicityFreeAlignment {
    pub radius: usize,
    pub threshold: i64,
    /// First index from which every per-member stage succeeds.
    pub start_index: i64,
    pub member_failures: Vec<SkippedIndex>,
    pub blocks: BlockStructure,
    pub profile: ValuationProfile,
    pub plan: RebalancePlan,
    /// Block traces of the limit at each generator.
    pub limit_block_traces: Vec<Vec<PadicScalar>>,
    pub members: Vec<BlockAlignedMember>,
    pub monotone_tail: Option<i64>,
    pub uniform_on_ball: bool,
}

impl MultiplicityFreeAlignment {
    pub fn deltas(&self) -> Vec<Val> {
        self.members.iter().map(|m| m.delta).collect()
    }
}

fn block_traces(m: &PadicMatrix, dims: &[usize]) -> Vec<PadicScalar> {
    let mut start = 0;
    dims.iter()
        .map(|&k| {
            let t = (start..start + k).fold(PadicScalar::zero(m.field()), |acc, a| acc.add(m.get(a, a)));
            start += k;
            t
        })
        .collect()
}

/// Full pipeline for multiplicity-free limits.
pub fn align_multiplicity_free(
    fam: &RepFamily,
    radius: usize,
    ns: &[i64],
    threshold: i64,
) -> Result<MultiplicityFreeAlignment, LimitError> {
    let f = fam.field();
    let ball = fam.word_ball(radius)?;
    let certs: Vec<(i64, Result<(), LimitError>)> = ns
        .par_iter()
        .map(|&n| {
            let r = fam
                .at(Index::Member(n))
                .map_err(LimitError::from)
                .and_then(|inst| certify(&inst, &ball, &inst.eval_ball(&ball)).map(|_| ()));
            (n, r)
        })
        .collect();
    let last_bad = certs.iter().rposition(|(_, r)| r.is_err()).map_or(0, |k| k + 1);
    if last_bad == certs.len() {
        let (n, err) = certs.into_iter().last().map(|(n, r)| (n, r.unwrap_err())).ok_or(LimitError::EmptyRange)?;
        return Err(err.at(Stage::MemberIrreducibility, Some(n)));
    }
    let member_failures: Vec<SkippedIndex> = certs
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| SkippedIndex { n: *n, reason: e.to_string() }))
        .collect();
    let tail: Vec<i64> = certs[last_bad..].iter().map(|c| c.0).collect();
    let start_index = tail[0];

    let blocks =
        block_idempotents(fam, radius, &tail, threshold).map_err(|e| e.at(Stage::BlockIdempotents, None))?;
    if let Some(s) = blocks.skipped.last() {
        return Err(LimitError::IdempotentLift { index: Index::Member(s.n), reason: s.reason.clone() }
            .at(Stage::BlockIdempotents, Some(s.n)));
    }
    let profile =
        valuation_profile(fam, &blocks, radius, threshold).map_err(|e| e.at(Stage::ValuationProfile, None))?;
    let plan = rebalance(&profile).map_err(|e| e.at(Stage::Rebalance, None))?;

    let lim = fam.at(Index::Limit)?;
    let lim_frame = blocks.frame(&blocks.limit_idempotents);
    let lim_conj = lim.conjugated(&lim_frame).map_err(|e| LimitError::from(e).at(Stage::Alignment, None))?;
    let targets: Vec<PadicMatrix> = lim_conj.eval_ball(&ball);
    let limit_block_traces: Vec<Vec<PadicScalar>> =
        lim_conj.gens.iter().map(|g| block_traces(g, &blocks.dims)).collect();
    let off_block = |a: usize, b: usize| blocks.block_of(a) != blocks.block_of(b);

    let members: Vec<BlockAlignedMember> = profile
        .indices
        .par_iter()
        .enumerate()
        .map(|(k, &n)| -> Result<_, LimitError> {
            let inst = fam.at(Index::Member(n))?;
            let q = profile.frames[k].mul(&plan.conjugator(f, k));
            let aligned = inst.conjugated(&q)?;
            let (mut off, mut diag) = (Val::Inf, Val::Inf);
            for (m, t) in aligned.eval_ball(&ball).iter().zip(&targets) {
                for a in 0..m.dim() {
                    for b in 0..m.dim() {
                        if off_block(a, b) {
                            off = off.min(m.get(a, b).observed_valuation());
                        } else {
                            diag = diag.min(m.get(a, b).sub(t.get(a, b)).observed_valuation());
                        }
                    }
                }
            }
            Ok(BlockAlignedMember {
                n,
                conjugator: q,
                block_traces: aligned.gens.iter().map(|g| block_traces(g, &blocks.dims)).collect(),
                generators: aligned.gens,
                margin: plan.margins[k],
                off_diagonal_delta: off,
                diagonal_delta: diag,
                delta: off.min(diag),
            })
        })
        .collect::<Result<_, _>>()
        .map_err(|e: LimitError| e.at(Stage::Alignment, None))?;
    let deltas: Vec<Val> = members.iter().map(|m| m.delta).collect();
    Ok(MultiplicityFreeAlignment {
        radius,
        threshold,
        start_index,
        member_failures,
        monotone_tail: (!members.is_empty()).then(|| members[tail_start(&deltas)].n),
        uniform_on_ball: tends_to_infinity(&deltas, threshold),
        blocks,
        profile,
        plan,
        limit_block_traces,
        members,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn family(json: &str) -> RepFamily {
        RepFamily::from_json(json).unwrap()
    }

    fn ul(prec: u32, lower: &str) -> RepFamily {
        family(&format!(
            r#"{{"field": {{"p": 5, "prec": {prec}}}, "d": 2,
                "generators": [[["1","1"],["0","1"]], [["1","0"],["{lower}","1"]]]}}"#
        ))
    }

    fn conjugated_ul() -> RepFamily {
        family(
            r#"{"field": {"p": 5, "prec": 24}, "d": 2,
                "generators": [[["1","1/(1+pow(5,n))"],["0","1"]], [["1","0"],["5*(1+pow(5,n))","1"]]],
                "limit": [[["1","1"],["0","1"]], [["1","0"],["5","1"]]]}"#,
        )
    }

    fn ab(prec: u32) -> RepFamily {
        family(&format!(
            r#"{{"field": {{"p": 5, "prec": {prec}}}, "d": 2,
                "generators": [[["1","1"],["pow(5,n)","1"]], [["1","0"],["0","6"]]],
                "limit": [[["1","1"],["0","1"]], [["1","0"],["0","6"]]]}}"#
        ))
    }

    #[test]
    fn ul_certificate_matches_gram_oracle() {
        let fam = ul(12, "5");
        let cert = irreducibility_certificate(&fam, Index::Limit, 2).unwrap();
        let words: Vec<Word> = vec![Word(vec![]), Word(vec![1]), Word(vec![2]), Word(vec![1, 2])];
        assert_eq!(cert.words, words);
        let expect = PadicMatrix::from_ints(
            fam.field(),
            &[&[2, 2, 2, 7], &[2, 2, 7, 12], &[2, 7, 2, 12], &[7, 12, 12, 47]],
        );
        assert_eq!(cert.gram, expect);
        // det = -625
        assert_eq!(cert.det_val, 4);
    }

    #[test]
    fn commutative_image_has_no_certificate() {
        let fam = family(
            r#"{"field": {"p": 5, "prec": 10}, "d": 2, "generators": [[["E(z)","0"],["0","E(2*z)"]]], "parametric": true}"#,
        );
        match irreducibility_certificate(&fam, Index::Limit, 3) {
            Err(LimitError::NoCertificate { rank, needed: 4, .. }) => assert!(rank <= 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn character_certificate() {
        let fam = family(r#"{"field": {"p": 5, "prec": 10}, "d": 1, "generators": [[["2"]]]}"#);
        let cert = irreducibility_certificate(&fam, Index::Limit, 1).unwrap();
        assert_eq!(cert.words, vec![Word::empty()]);
        assert_eq!(cert.gram, PadicMatrix::from_ints(fam.field(), &[&[1]]));
        let tc = trace_coordinates(&cert, &fam, Index::Limit).unwrap();
        assert_eq!(tc.coeffs, vec![vec![PadicScalar::one(fam.field())]]);
    }

    #[test]
    fn trace_coordinates_reconstruct_ball() {
        let fam = ul(16, "5");
        let cert = irreducibility_certificate(&fam, Index::Limit, 2).unwrap();
        let tc = trace_coordinates(&cert, &fam, Index::Limit).unwrap();
        let bound = tc.residual_bound(fam.field());
        assert_eq!(bound, 16 - 8);
        let inst = fam.at(Index::Limit).unwrap();
        let ball = fam.word_ball(3).unwrap();
        for (w, m) in ball.words.iter().zip(inst.eval_ball(&ball)) {
            assert!(tc.residual(&m) >= Val::Fin(bound), "{w}");
        }
    }

    #[test]
    fn precision_budget_is_enforced() {
        let fam = ul(12, "25");
        let cert = irreducibility_certificate(&fam, Index::Limit, 2).unwrap();
        assert_eq!(cert.det_val, 8);
        assert!(matches!(trace_coordinates(&cert, &fam, Index::Limit), Err(LimitError::PrecisionBudget { .. })));
    }

    #[test]
    fn constant_family_aligns_trivially() {
        let fam = ul(12, "5");
        let r = align_irreducible(&fam, 3, &[1, 2, 3], 5).unwrap();
        let id = PadicMatrix::identity(fam.field(), 2);
        for m in &r.members {
            assert!(m.frame.sub(&id).is_zero());
            assert_eq!(m.delta, Val::Inf);
        }
        assert!(r.skipped.is_empty());
    }

    #[test]
    fn conjugated_family_aligns() {
        let fam = conjugated_ul();
        let ns: Vec<i64> = (1..=12).collect();
        let r = align_irreducible(&fam, 3, &ns, 5).unwrap();
        assert_eq!(r.indices(), ns);
        for m in &r.members {
            assert!(m.delta >= Val::Fin(m.n - 2), "n = {} delta = {}", m.n, m.delta);
        }
        assert!(r.uniform_on_ball);
    }

    #[test]
    fn reducible_limit_is_rejected() {
        let e = align_irreducible(&ab(12), 3, &[1, 2], 5).unwrap_err();
        assert_eq!(e.stage(), Some(Stage::LimitCertificate));
        assert!(matches!(e.root(), LimitError::NoCertificate { .. }));
    }

    #[test]
    fn ab_block_idempotents() {
        let fam = ab(16);
        let f = fam.field();
        let b = block_idempotents(&fam, 4, &[1, 2, 3, 4], 1).unwrap();
        assert_eq!(b.separating_word, Word(vec![2]));
        assert_eq!(b.dims, vec![1, 1]);
        assert_eq!(b.eigenvalues, vec![PadicScalar::one(f), PadicScalar::from_int(f, 6)]);
        let e1 = PadicMatrix::from_ints(f, &[&[1, 0], &[0, 0]]);
        for m in &b.members {
            assert!(m.idempotents[0].sub(&e1).is_zero());
            assert!(m.idempotents[0].trace().sub(&PadicScalar::one(f)).is_zero());
            assert_eq!(m.cross_trace, Val::Fin(m.n));
        }
        assert!(b.cross_trace_certified);
    }

    #[test]
    fn equal_characters_have_no_separating_word() {
        let fam = family(
            r#"{"field": {"p": 5, "prec": 12}, "d": 2,
                "generators": [[["1","1"],["0","1"]], [["1","0"],["pow(5,n)","1"]]],
                "limit": [[["1","1"],["0","1"]], [["1","0"],["0","1"]]]}"#,
        );
        assert_eq!(block_idempotents(&fam, 3, &[1, 2], 5).unwrap_err(), LimitError::NoSeparatingWord);
    }

    #[test]
    fn one_dimensional_block() {
        let fam = family(r#"{"field": {"p": 5, "prec": 10}, "d": 1, "generators": [[["1+pow(5,n)"]]], "limit": [[["1"]]]}"#);
        let b = block_idempotents(&fam, 2, &[1, 2], 5).unwrap();
        assert_eq!(b.dims, vec![1]);
        for m in &b.members {
            assert_eq!(m.idempotents, vec![PadicMatrix::identity(fam.field(), 1)]);
        }
    }

    #[test]
    fn ab_profile() {
        let fam = ab(16);
        let ns: Vec<i64> = (1..=8).collect();
        let b = block_idempotents(&fam, 4, &ns, 5).unwrap();
        let prof = valuation_profile(&fam, &b, 4, 5).unwrap();
        for (k, &n) in prof.indices.iter().enumerate() {
            assert_eq!(prof.x[k][0][1], Val::Fin(0));
            assert_eq!(prof.x[k][1][0], Val::Fin(n));
            assert_eq!(prof.coercivity[k], Val::Fin(n));
        }
        assert_eq!(prof.triangle_constant, 0);
        assert!(prof.coercivity_certified);
    }

    #[test]
    fn block_diagonal_profile_is_infinite_off_diagonal() {
        let fam = family(
            r#"{"field": {"p": 5, "prec": 10}, "d": 2,
                "generators": [[["E(z)","0"],["0","E(2*z)"]]], "parametric": true}"#,
        );
        let b = block_idempotents(&fam, 3, &[1, 2, 3], 5).unwrap();
        let prof = valuation_profile(&fam, &b, 3, 5).unwrap();
        for x in &prof.x {
            assert_eq!((x[0][1], x[1][0]), (Val::Inf, Val::Inf));
        }
        let plan = rebalance(&prof).unwrap();
        assert!(plan.u.iter().all(|u| u == &vec![0, 0]));
        assert_eq!(plan.conjugator(fam.field(), 0), PadicMatrix::identity(fam.field(), 2));
    }

    #[test]
    fn permuting_the_frame_permutes_the_profile() {
        let plain = ab(14);
        let swapped = family(
            r#"{"field": {"p": 5, "prec": 14}, "d": 2,
                "generators": [[["1","pow(5,n)"],["1","1"]], [["6","0"],["0","1"]]],
                "limit": [[["1","0"],["1","1"]], [["6","0"],["0","1"]]]}"#,
        );
        let ns = [1, 2, 3];
        let pa = valuation_profile(&plain, &block_idempotents(&plain, 3, &ns, 1).unwrap(), 3, 1).unwrap();
        let pb = valuation_profile(&swapped, &block_idempotents(&swapped, 3, &ns, 1).unwrap(), 3, 1).unwrap();
        for k in 0..ns.len() {
            assert_eq!(pa.x[k][0][1], pb.x[k][1][0]);
            assert_eq!(pa.x[k][1][0], pb.x[k][0][1]);
        }
    }

    fn two_block(n_max: i64, x12: impl Fn(i64) -> i64, x21: impl Fn(i64) -> i64) -> ValuationProfile {
        let ns: Vec<i64> = (1..=n_max).collect();
        let x = ns
            .iter()
            .map(|&n| vec![vec![Val::Fin(0), Val::Fin(x12(n))], vec![Val::Fin(x21(n)), Val::Fin(0)]])
            .collect();
        ValuationProfile::from_data(ns, vec![1, 1], x, 40, 5)
    }

    #[test]
    fn rebalance_examples() {
        let plan = rebalance(&two_block(12, |_| 0, |n| n)).unwrap();
        for (k, u) in plan.u.iter().enumerate() {
            let n = k as i64 + 1;
            assert_eq!(u[1] - u[0], (n + 1) / 2);
            assert!(plan.margins[k] >= Val::Fin(n / 2 - 1));
        }
        assert!(plan.bound_holds);

        let plan = rebalance(&two_block(12, |n| 2 * n, |n| -n)).unwrap();
        for (k, u) in plan.u.iter().enumerate() {
            let n = k as i64 + 1;
            assert_eq!(u[0] - u[1], 3 * n / 2);
            assert!(plan.margins[k] >= Val::Fin(n / 2 - 1));
        }

        let ns: Vec<i64> = (1..=9).collect();
        let x = ns
            .iter()
            .map(|&n| (0..3).map(|i| (0..3).map(|j| Val::Fin(if i == j { 0 } else { n })).collect()).collect())
            .collect();
        let plan = rebalance(&ValuationProfile::from_data(ns.clone(), vec![1, 1, 1], x, 40, 5)).unwrap();
        for (k, &n) in ns.iter().enumerate() {
            assert_eq!(plan.u[k], vec![0, 0, 0]);
            assert_eq!(plan.margins[k], Val::Fin(n));
        }
    }

    #[test]
    fn rebalance_refuses_without_coercivity() {
        let prof = two_block(8, |_| 0, |n| n % 2);
        assert_eq!(rebalance(&prof).unwrap_err(), LimitError::CoercivityNotCertified);
    }

    #[test]
    fn ab_pipeline() {
        let fam = ab(24);
        let f = fam.field();
        let ns: Vec<i64> = (1..=10).collect();
        let r = align_multiplicity_free(&fam, 4, &ns, 3).unwrap();
        assert_eq!(r.start_index, 1);
        assert_eq!(r.blocks.dims, vec![1, 1]);
        for (k, m) in r.members.iter().enumerate() {
            let n = m.n;
            assert!(r.profile.coercivity[k] >= Val::Fin(n - 2));
            assert!(m.margin >= Val::Fin(n / 2 - 1));
            assert!(m.off_diagonal_delta >= m.margin);
            let b = &m.block_traces[1];
            assert!(b[0].sub(&PadicScalar::one(f)).observed_valuation() >= Val::Fin(f.prec() - 2));
            assert!(b[1].sub(&PadicScalar::from_int(f, 6)).observed_valuation() >= Val::Fin(f.prec() - 2));
            let inst = fam.at(Index::Member(n)).unwrap();
            for (g, a) in inst.gens.iter().zip(&m.generators) {
                assert!(g.trace().sub(&a.trace()).is_zero());
            }
        }
        assert!(r.uniform_on_ball);
    }

    #[test]
    fn triangular_members_rejected_at_member_stage() {
        let fam = family(
            r#"{"field": {"p": 5, "prec": 12}, "d": 2,
                "generators": [[["1","1"],["0","1+pow(5,n)"]], [["6","0"],["0","1"]]],
                "limit": [[["1","1"],["0","1"]], [["6","0"],["0","1"]]]}"#,
        );
        let e = align_multiplicity_free(&fam, 3, &[1, 2, 3], 5).unwrap_err();
        assert_eq!(e.stage(), Some(Stage::MemberIrreducibility));
        assert!(matches!(e.root(), LimitError::NoCertificate { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn rebalance_margin_bound(
            seeds in proptest::collection::vec((0i64..6, 0i64..6, 0i64..6), 3),
            slopes in proptest::collection::vec(1i64..4, 3),
        ) {
            // Valuations from points on a line: x_ij = |h_i - h_j| + n·slope_ij is triangle-consistent
            // up to the slope terms, which are symmetric and additive.
            let ns: Vec<i64> = (1..=10).collect();
            let x: Vec<Vec<Vec<Val>>> = ns.iter().map(|&n| {
                (0..3).map(|i| (0..3).map(|j| {
                    if i == j { Val::Fin(0) } else {
                        let (a, b, c) = seeds[i];
                        let h = [a, b, c];
                        Val::Fin(h[j] - h[i] + n * slopes[i.min(j)] + 2 * h.iter().max().unwrap())
                    }
                }).collect()).collect()
            }).collect();
            let prof = ValuationProfile::from_data(ns, vec![1, 1, 1], x, 60, 5);
            prop_assume!(prof.coercivity_certified);
            let plan = rebalance(&prof).unwrap();
            prop_assert!(plan.bound_holds);
        }

        #[test]
        fn gram_det_val_is_conjugation_invariant(c in -30i128..30, e in -30i128..30) {
            let fam = ul(12, "5");
            let inst = fam.at(Index::Limit).unwrap();
            let p = PadicMatrix::from_ints(fam.field(), &[&[1, c], &[5 * e, 1]]);
            let conj = inst.conjugated(&p).unwrap();
            let ball = fam.word_ball(2).unwrap();
            let a = certify(&inst, &ball, &inst.eval_ball(&ball)).unwrap();
            let b = certify(&conj, &ball, &conj.eval_ball(&ball)).unwrap();
            prop_assert_eq!(a.words, b.words);
            prop_assert_eq!(a.det_val, b.det_val);
        }
    }
}
