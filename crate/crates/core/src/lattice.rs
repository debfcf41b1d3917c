//! Stable lattices: existence criteria, orbit saturation and transfer to members.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::Index;
use crate::linalg::{smith_form, LinalgError, PadicMatrix};
use crate::padic::{PadicScalar, Val};
use crate::rep::{Instance, RepError, RepFamily};

pub const DEFAULT_MAX_ITER: usize = 64;

/// Words used for the residual trace-form rank.
const RESIDUAL_WORD_CAP: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatticeError {
    #[error("no stable lattice within budget: {rounds} rounds, smallest invariant {min_invariant} below -{max_drop}")]
    Unbounded { rounds: usize, min_invariant: i64, max_drop: i64 },
    #[error("saturation did not become stationary within {0} rounds")]
    IterationBudget(usize),
    #[error("limit lattice search failed: {0}")]
    LimitLattice(Box<LatticeError>),
    #[error(transparent)]
    Rep(#[from] RepError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Saturation budget; `max_drop` defaults to `2·d·e` digits.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Budget {
    pub max_iter: usize,
    pub max_drop: i64,
}

impl Budget {
    pub fn default_for(fam: &RepFamily) -> Self {
        Budget { max_iter: DEFAULT_MAX_ITER, max_drop: 2 * fam.dim() as i64 * fam.field().e() as i64 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LatticeBasis {
    /// Columns span the lattice over the valuation ring.
    pub basis: PadicMatrix,
    /// Invariant valuations relative to the standard lattice.
    pub smith: Vec<Val>,
    /// `max(0, -min v(B⁻¹ ρ(g) B))` over generators and inverses; 0 when stable.
    pub stability: i64,
    /// Whether every ball word preserves the lattice.
    pub ball_stable: bool,
    pub rounds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatticeCriteria {
    pub radius: usize,
    /// Heuristic: entry valuations over the ball do not decrease past the half-radius ball.
    pub bounded_image: bool,
    pub min_entry_valuation: Val,
    pub integral_traces: bool,
    pub residual_trace_rank: usize,
    pub residually_irreducible_trace: bool,
}

fn min_entry(images: &[PadicMatrix]) -> Val {
    images.iter().map(|m| m.min_valuation()).min().unwrap_or(Val::Inf)
}

/// Rank over `F_p` of a matrix of residues.
fn rank_mod_p(mut rows: Vec<Vec<u64>>, p: u64) -> usize {
    let inv = |a: u64| -> u64 {
        let (mut r, mut b, mut e) = (1u64, a % p, p - 2);
        while e > 0 {
            if e & 1 == 1 {
                r = r * b % p;
            }
            b = b * b % p;
            e >>= 1;
        }
        r
    };
    let cols = rows.first().map_or(0, |r| r.len());
    let mut rank = 0;
    for c in 0..cols {
        let Some(piv) = (rank..rows.len()).find(|&r| rows[r][c] != 0) else { continue };
        rows.swap(rank, piv);
        let k = inv(rows[rank][c]);
        let pivot_row: Vec<u64> = rows[rank].iter().map(|x| x * k % p).collect();
        for (r, row) in rows.iter_mut().enumerate() {
            if r != rank && row[c] != 0 {
                let f = row[c];
                for (x, y) in row.iter_mut().zip(&pivot_row) {
                    *x = (*x + p * p - f * y % p) % p;
                }
            }
        }
        rows[rank] = pivot_row;
        rank += 1;
    }
    rank
}

pub fn lattice_criteria(fam: &RepFamily, index: Index, radius: usize) -> Result<LatticeCriteria, LatticeError> {
    let inst = fam.at(index)?;
    let ball = fam.word_ball(radius)?;
    let images = inst.eval_ball(&ball);
    let half = ball.sub_ball(radius.div_ceil(2));
    let min_full = min_entry(&images);
    let min_half = min_entry(&images[..half.len()]);
    let integral_traces = images.iter().all(|m| m.trace().is_integral());
    let d = fam.dim();
    let p = fam.field().p();
    let words = &images[..images.len().min(RESIDUAL_WORD_CAP)];
    let residual_trace_rank = if integral_traces {
        let rows: Vec<Vec<u64>> = words
            .iter()
            .map(|a| words.iter().map(|b| a.trace_of_product(b).residue().unwrap_or(0)).collect())
            .collect();
        rank_mod_p(rows, p)
    } else {
        0
    };
    Ok(LatticeCriteria {
        radius,
        bounded_image: min_full == min_half,
        min_entry_valuation: min_full,
        integral_traces,
        residual_trace_rank,
        residually_irreducible_trace: residual_trace_rank >= d * d,
    })
}

/// Basis of the module spanned by `vectors`, by valuation-pivoted column elimination.
fn module_basis(d: usize, mut vectors: Vec<Vec<PadicScalar>>) -> Result<Vec<Vec<PadicScalar>>, LinalgError> {
    let mut used_rows = vec![false; d];
    let mut basis = Vec::with_capacity(d);
    for _ in 0..d {
        let mut best: Option<(Val, usize, usize)> = None;
        for (c, v) in vectors.iter().enumerate() {
            for (r, x) in v.iter().enumerate() {
                if used_rows[r] || x.is_zero() {
                    continue;
                }
                let key = (x.observed_valuation(), r, c);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
        }
        let (_, r, c) = best.ok_or(LinalgError::Singular)?;
        let pivot = vectors.swap_remove(c);
        for v in vectors.iter_mut() {
            if v[r].is_exact_zero() {
                continue;
            }
            let factor = v[r].div(&pivot[r])?;
            for (x, y) in v.iter_mut().zip(&pivot) {
                *x = x.sub(&factor.mul(y));
            }
            v[r] = PadicScalar::zero(pivot[r].field());
        }
        used_rows[r] = true;
        basis.push(pivot);
    }
    Ok(basis)
}

fn stability(inst: &Instance, basis: &PadicMatrix) -> Result<i64, LinalgError> {
    let binv = basis.inverse()?;
    let worst = inst
        .gens
        .iter()
        .chain(&inst.invs)
        .map(|g| binv.mul(g).mul(basis).min_valuation())
        .min()
        .unwrap_or(Val::Inf);
    Ok(worst.finite().map_or(0, |v| (-v).max(0)))
}

fn same_lattice(a: &PadicMatrix, b: &PadicMatrix) -> Result<bool, LinalgError> {
    let t = a.inverse()?.mul(b);
    Ok(t.min_valuation() >= Val::Fin(0) && t.det()?.observed_valuation() == Val::Fin(0))
}

fn saturate(inst: &Instance, budget: Budget) -> Result<(PadicMatrix, usize), LatticeError> {
    let f = inst.field;
    let d = inst.d;
    let mut basis = PadicMatrix::identity(f, d);
    for round in 0..budget.max_iter {
        let mut vectors: Vec<Vec<PadicScalar>> = (0..d).map(|j| basis.column(j)).collect();
        for g in inst.gens.iter().chain(&inst.invs) {
            for j in 0..d {
                vectors.push(g.mul_vec(&basis.column(j)));
            }
        }
        let next = PadicMatrix::from_columns(f, &module_basis(d, vectors)?);
        if same_lattice(&basis, &next)? {
            return Ok((basis, round));
        }
        let smith = smith_form(&next)?;
        let lowest = smith.invariants.iter().filter_map(|v| v.finite()).min().unwrap_or(0);
        if lowest < -budget.max_drop {
            return Err(LatticeError::Unbounded { rounds: round + 1, min_invariant: lowest, max_drop: budget.max_drop });
        }
        basis = next;
    }
    Err(LatticeError::IterationBudget(budget.max_iter))
}

/// Orbit saturation starting from the standard lattice.
pub fn find_stable_lattice(
    fam: &RepFamily,
    index: Index,
    radius: usize,
    budget: Budget,
) -> Result<LatticeBasis, LatticeError> {
    let inst = fam.at(index)?;
    let (basis, rounds) = saturate(&inst, budget)?;
    lattice_report(&inst, fam, radius, basis, rounds)
}

fn lattice_report(
    inst: &Instance,
    fam: &RepFamily,
    radius: usize,
    basis: PadicMatrix,
    rounds: usize,
) -> Result<LatticeBasis, LatticeError> {
    let binv = basis.inverse()?;
    let ball = fam.word_ball(radius)?;
    let ball_stable = inst
        .eval_ball(&ball)
        .iter()
        .all(|m| binv.mul(m).mul(&basis).min_valuation() >= Val::Fin(0));
    Ok(LatticeBasis {
        smith: smith_form(&basis)?.invariants,
        stability: stability(inst, &basis)?,
        ball_stable,
        basis,
        rounds,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MemberLattice {
    pub n: i64,
    /// Smallest entry valuation of `B⁻¹ ρ_n(w) B` over the ball.
    pub min_valuation: Val,
    pub integral: bool,
    pub lattice: LatticeBasis,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatticeTransfer {
    pub radius: usize,
    pub limit: LatticeBasis,
    /// First index from which every member preserves the limit lattice on the ball.
    pub first_index: Option<i64>,
    pub members: Vec<MemberLattice>,
}

/// Carry the limit's stable lattice to the members, each taken in its frame
/// (`frames`, default the identity).
pub fn transfer_lattice(
    fam: &RepFamily,
    radius: usize,
    ns: &[i64],
    frames: Option<&[(i64, PadicMatrix)]>,
) -> Result<LatticeTransfer, LatticeError> {
    let budget = Budget::default_for(fam);
    let limit = find_stable_lattice(fam, Index::Limit, radius, budget)
        .map_err(|e| LatticeError::LimitLattice(Box::new(e)))?;
    let ball = fam.word_ball(radius)?;
    let members: Vec<MemberLattice> = ns
        .par_iter()
        .map(|&n| -> Result<_, LatticeError> {
            let mut inst = fam.at(Index::Member(n))?;
            if let Some(fr) = frames.and_then(|fs| fs.iter().find(|(k, _)| *k == n)) {
                inst = inst.conjugated(&fr.1)?;
            }
            let b = &limit.basis;
            let binv = b.inverse()?;
            let min_valuation = min_entry(
                &inst.eval_ball(&ball).iter().map(|m| binv.mul(m).mul(b)).collect::<Vec<_>>(),
            );
            Ok(MemberLattice {
                n,
                min_valuation,
                integral: min_valuation >= Val::Fin(0),
                lattice: lattice_report(&inst, fam, radius, b.clone(), 0)?,
            })
        })
        .collect::<Result<_, _>>()?;
    let start = members.iter().rposition(|m| !m.integral).map_or(0, |k| k + 1);
    Ok(LatticeTransfer { radius, first_index: members.get(start).map(|m| m.n), limit, members })
}
