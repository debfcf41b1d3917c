//! Built-in regression families with machine-checkable expectations.

use serde::Serialize;
use thiserror::Error;

use crate::convergence::{convergence_report, trace_table, DEFAULT_THRESHOLD};
use crate::envelope::{eigenvalue_unit_relation, root_of_unity_order_bound, MAX_BOUND_DIM};
use crate::expr::Index;
use crate::lattice::{find_stable_lattice, transfer_lattice, Budget, LatticeError};
use crate::limit::{align_irreducible, align_multiplicity_free, irreducibility_certificate, Stage};
use crate::padic::Val;
use crate::rep::{RepError, RepFamily};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("unknown fixture `{0}`; run `fixtures` for the catalog")]
    Unknown(String),
    #[error(transparent)]
    Rep(#[from] RepError),
}

/// Inclusive index range `lo..=hi`.
pub type Range = (i64, i64);

fn indices((lo, hi): Range) -> Vec<i64> {
    (lo..=hi).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Expectation {
    /// `δ_n = n + offset` exactly on the ball.
    DeltaPattern { radius: usize, range: Range, offset: i64 },
    TraceConvergence { radius: usize, range: Range, convergent: bool },
    LimitIrreducible { radius: usize, irreducible: bool },
    /// Every aligned entrywise delta is at least `n − slack`.
    IrreducibleAlignment { radius: usize, range: Range, slack: i64 },
    /// The multiplicity-free pipeline runs and off-diagonal deltas dominate margins.
    MultiplicityFreeAlignment { radius: usize, range: Range, threshold: i64 },
    RejectedAt { radius: usize, range: Range, stage: Stage },
    /// Generator `generator` (1-based) has a unit relation of this order at the limit,
    /// and the order divides the combined order bound.
    UnitRelation { generator: usize, order: u64 },
    StableLattice { radius: usize },
    LatticeBudgetExhausted,
    TransferFirstIndex { radius: usize, range: Range, first: i64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub expectation: Expectation,
    pub passed: bool,
    pub detail: String,
}

fn outcome(e: &Expectation, passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { expectation: e.clone(), passed, detail: detail.into() }
}

impl Expectation {
    /// Run the check; computation errors count as failures with the message as detail.
    pub fn check(&self, fam: &RepFamily) -> Outcome {
        match self.run(fam) {
            Ok((ok, detail)) => outcome(self, ok, detail),
            Err(msg) => outcome(self, false, msg),
        }
    }

    fn run(&self, fam: &RepFamily) -> Result<(bool, String), String> {
        let s = |e: &dyn std::fmt::Display| e.to_string();
        match *self {
            Expectation::DeltaPattern { radius, range, offset } => {
                let ns = indices(range);
                let r = convergence_report(&trace_table(fam, radius, &ns).map_err(|e| s(&e))?, DEFAULT_THRESHOLD);
                let ok = ns.iter().zip(&r.delta).all(|(&n, &d)| d == Val::Fin(n + offset));
                Ok((ok, format!("delta = {:?}", r.delta)))
            }
            Expectation::TraceConvergence { radius, range, convergent } => {
                let ns = indices(range);
                let r = convergence_report(&trace_table(fam, radius, &ns).map_err(|e| s(&e))?, DEFAULT_THRESHOLD);
                Ok((r.trace_convergent_on_ball == convergent, format!("convergent on ball: {}", r.trace_convergent_on_ball)))
            }
            Expectation::LimitIrreducible { radius, irreducible } => {
                let got = irreducibility_certificate(fam, Index::Limit, radius).is_ok();
                Ok((got == irreducible, format!("certificate found: {got}")))
            }
            Expectation::IrreducibleAlignment { radius, range, slack } => {
                let a = align_irreducible(fam, radius, &indices(range), DEFAULT_THRESHOLD).map_err(|e| s(&e))?;
                let ok = a.members.iter().all(|m| m.delta >= Val::Fin(m.n - slack));
                Ok((ok, format!("deltas = {:?}", a.deltas())))
            }
            Expectation::MultiplicityFreeAlignment { radius, range, threshold } => {
                let a = align_multiplicity_free(fam, radius, &indices(range), threshold).map_err(|e| s(&e))?;
                let ok = a.members.iter().all(|m| m.off_diagonal_delta >= m.margin);
                Ok((ok, format!("start index {}, {} aligned members", a.start_index, a.members.len())))
            }
            Expectation::RejectedAt { radius, range, stage } => {
                match align_multiplicity_free(fam, radius, &indices(range), DEFAULT_THRESHOLD) {
                    Ok(_) => Ok((false, "pipeline accepted the family".into())),
                    Err(e) => Ok((e.stage() == Some(stage), e.to_string())),
                }
            }
            Expectation::UnitRelation { generator, order } => {
                let m = fam.generator(generator - 1, Index::Limit, None).map_err(|e| s(&e))?;
                let rels = eigenvalue_unit_relation(&m, 2, 8).map_err(|e| s(&e))?;
                let f = fam.field();
                let d = (fam.dim() as u32).min(MAX_BOUND_DIM);
                let bound = root_of_unity_order_bound(f.p(), 1, f.e(), d).map_err(|e| s(&e))?;
                let found = rels.iter().any(|r| r.order == order);
                let divides = rels.iter().all(|r| (&bound.combined % r.order) == 0u32.into());
                Ok((found && divides, format!("orders {:?}, bound {}", rels.iter().map(|r| r.order).collect::<Vec<_>>(), bound.combined)))
            }
            Expectation::StableLattice { radius } => {
                let lat = find_stable_lattice(fam, Index::Limit, radius, Budget::default_for(fam)).map_err(|e| s(&e))?;
                Ok((lat.ball_stable, format!("smith {:?}, rounds {}", lat.smith, lat.rounds)))
            }
            Expectation::LatticeBudgetExhausted => {
                match find_stable_lattice(fam, Index::Limit, 1, Budget::default_for(fam)) {
                    Ok(l) => Ok((false, format!("lattice found with smith {:?}", l.smith))),
                    Err(e @ (LatticeError::Unbounded { .. } | LatticeError::IterationBudget(_))) => Ok((true, e.to_string())),
                    Err(e) => Err(e.to_string()),
                }
            }
            Expectation::TransferFirstIndex { radius, range, first } => {
                let t = transfer_lattice(fam, radius, &indices(range), None).map_err(|e| s(&e))?;
                Ok((t.first_index == Some(first), format!("first index {:?}", t.first_index)))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Fixture {
    pub name: &'static str,
    pub summary: &'static str,
    /// Rational stand-in for a construction that needs irrational valuations.
    pub surrogate: bool,
    pub expectations: Vec<Expectation>,
    #[serde(skip)]
    pub source: &'static str,
}

impl Fixture {
    pub fn family(&self) -> Result<RepFamily, RepError> {
        RepFamily::from_json(self.source)
    }
}

macro_rules! src {
    ($name:literal) => {
        include_str!(concat!("../fixtures/", $name, ".json"))
    };
}

pub fn catalog() -> Vec<Fixture> {
    use Expectation::*;
    let fx = |name, summary, surrogate, source, expectations| Fixture { name, summary, surrogate, expectations, source };
    vec![
        fx(
            "sec2_3_diag",
            "diag(e(z), e(a_n z)) with a_n -> a",
            false,
            src!("sec2_3_diag"),
            vec![DeltaPattern { radius: 4, range: (0, 12), offset: 1 }, TraceConvergence { radius: 4, range: (0, 12), convergent: true }],
        ),
        fx(
            "sec2_3_twist",
            "(-1)^k diag(e(z), e(a_n z))",
            false,
            src!("sec2_3_twist"),
            vec![UnitRelation { generator: 2, order: 2 }, TraceConvergence { radius: 3, range: (0, 10), convergent: true }],
        ),
        fx(
            "sec2_3_unipotent",
            "multiplicative members with a unipotent limit",
            false,
            src!("sec2_3_unipotent"),
            vec![TraceConvergence { radius: 3, range: (1, 8), convergent: true }],
        ),
        fx(
            "sec2_3_dim_jump",
            "diag(e(z1), e(a_n z2)) with a_n -> 0",
            false,
            src!("sec2_3_dim_jump"),
            vec![DeltaPattern { radius: 3, range: (0, 12), offset: 1 }],
        ),
        fx(
            "irreducible_ul",
            "residually irreducible constant pair",
            false,
            src!("irreducible_ul"),
            vec![LimitIrreducible { radius: 2, irreducible: true }, StableLattice { radius: 3 }],
        ),
        fx(
            "irreducible_conj",
            "irreducible pair conjugated by diag(1, 1+5^n)",
            false,
            src!("irreducible_conj"),
            vec![IrreducibleAlignment { radius: 3, range: (1, 12), slack: 2 }],
        ),
        fx(
            "lattice_transfer",
            "irreducible pair conjugated by a unipotent with entry 5^(n-1)",
            false,
            src!("lattice_transfer"),
            vec![TransferFirstIndex { radius: 3, range: (0, 8), first: 1 }],
        ),
        fx(
            "multfree_ab",
            "A_n = [[1,1],[5^n,1]], B = diag(1,6)",
            false,
            src!("multfree_ab"),
            vec![MultiplicityFreeAlignment { radius: 3, range: (1, 10), threshold: 3 }],
        ),
        fx(
            "sec1_3_counterexample",
            "uniformly trace-convergent triangular members",
            false,
            src!("sec1_3_counterexample"),
            vec![
                TraceConvergence { radius: 3, range: (1, 10), convergent: true },
                RejectedAt { radius: 3, range: (1, 10), stage: Stage::MemberIrreducibility },
            ],
        ),
        fx(
            "chi_chi",
            "irreducible members with limit chi + chi",
            false,
            src!("chi_chi"),
            vec![RejectedAt { radius: 3, range: (1, 5), stage: Stage::BlockIdempotents }],
        ),
        fx(
            "sec1_2_remark",
            "trace-convergent members with reducible limit",
            false,
            src!("sec1_2_remark"),
            vec![
                TraceConvergence { radius: 3, range: (1, 10), convergent: true },
                LimitIrreducible { radius: 2, irreducible: false },
            ],
        ),
        fx(
            "nonconvergent",
            "trace alternating between two residues",
            false,
            src!("nonconvergent"),
            vec![TraceConvergence { radius: 2, range: (0, 10), convergent: false }],
        ),
        fx("unbounded_diag", "diag(1/5, 1)", false, src!("unbounded_diag"), vec![LatticeBudgetExhausted]),
        fx(
            "sec1_4_surrogate",
            "bounded irreducible group with rational off-diagonal valuations",
            true,
            src!("sec1_4_surrogate"),
            vec![LimitIrreducible { radius: 2, irreducible: true }, StableLattice { radius: 3 }],
        ),
        fx("lifted_i", "diag(i, 1) over Z_5", false, src!("lifted_i"), vec![UnitRelation { generator: 1, order: 4 }]),
    ]
}

/// Look a fixture up by name; a trailing `.json` is ignored.
pub fn find_fixture(name: &str) -> Result<Fixture, FixtureError> {
    let key = name.strip_suffix(".json").unwrap_or(name);
    catalog().into_iter().find(|f| f.name == key).ok_or_else(|| FixtureError::Unknown(name.to_string()))
}

pub fn load_fixture(name: &str) -> Result<(RepFamily, Vec<Expectation>), FixtureError> {
    let fx = find_fixture(name)?;
    Ok((fx.family()?, fx.expectations))
}
