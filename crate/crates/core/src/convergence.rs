//! Trace tables and convergence diagnostics on a word ball.

use rayon::prelude::*;
use serde::Serialize;

use crate::expr::Index;
use crate::padic::{PadicScalar, Val};
use crate::rep::{RepError, RepFamily, Word, WordBall};

/// Default threshold Δ that the last δ_n must exceed.
pub const DEFAULT_THRESHOLD: i64 = 5;

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub n: i64,
    pub traces: Vec<PadicScalar>,
}

/// Traces of every ball word for each member index and for the limit.
#[derive(Debug, Clone, Serialize)]
pub struct TraceTable {
    pub d: usize,
    pub ball: WordBall,
    pub members: Vec<TraceRow>,
    pub limit: Vec<PadicScalar>,
}

impl TraceTable {
    pub fn indices(&self) -> Vec<i64> {
        self.members.iter().map(|r| r.n).collect()
    }

    pub fn limit_trace(&self, w: &Word) -> Option<&PadicScalar> {
        self.ball.words.iter().position(|x| x == w).map(|i| &self.limit[i])
    }
}

fn traces_at(fam: &RepFamily, ball: &WordBall, index: Index) -> Result<Vec<PadicScalar>, RepError> {
    let inst = fam.at(index)?;
    Ok(inst.eval_ball(ball).iter().map(|m| m.trace()).collect())
}

pub fn trace_table(fam: &RepFamily, radius: usize, ns: &[i64]) -> Result<TraceTable, RepError> {
    let ball = fam.word_ball(radius)?;
    let limit = traces_at(fam, &ball, Index::Limit)?;
    let members = ns
        .par_iter()
        .map(|&n| traces_at(fam, &ball, Index::Member(n)).map(|traces| TraceRow { n, traces }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TraceTable { d: fam.dim(), ball, members, limit })
}

#[derive(Debug, Clone, Serialize)]
pub struct WordDeltas {
    pub word: String,
    pub deltas: Vec<Val>,
    pub convergent: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub radius: usize,
    pub ball_size: usize,
    pub indices: Vec<i64>,
    pub threshold: i64,
    pub delta: Vec<Val>,
    pub per_word: Vec<WordDeltas>,
    /// First index from which δ is nondecreasing to the end of the range.
    pub monotone_tail: Option<i64>,
    pub trace_convergent_on_ball: bool,
    pub uniform_on_ball: bool,
    pub dimension_ok: bool,
}

/// Start position of the maximal nondecreasing tail.
pub(crate) fn tail_start(xs: &[Val]) -> usize {
    let mut start = xs.len().saturating_sub(1);
    while start > 0 && xs[start - 1] <= xs[start] {
        start -= 1;
    }
    start
}

/// Finite evidence that `xs` tends to infinity: a nondecreasing tail covering
/// at least half of the observations (and at least two), ending above Δ.
pub(crate) fn tends_to_infinity(xs: &[Val], threshold: i64) -> bool {
    let Some(&last) = xs.last() else { return false };
    let needed = xs.len().div_ceil(2).max(2).min(xs.len());
    xs.len() - tail_start(xs) >= needed && last > Val::Fin(threshold)
}

pub fn convergence_report(t: &TraceTable, threshold: i64) -> ConvergenceReport {
    let per_word: Vec<WordDeltas> = t
        .ball
        .words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let deltas: Vec<Val> = t
                .members
                .iter()
                .map(|row| row.traces[i].sub(&t.limit[i]).observed_valuation())
                .collect();
            let convergent = tends_to_infinity(&deltas, threshold);
            WordDeltas { word: w.to_string(), deltas, convergent }
        })
        .collect();
    let delta: Vec<Val> = (0..t.members.len())
        .map(|k| per_word.iter().map(|w| w.deltas[k]).min().unwrap_or(Val::Inf))
        .collect();
    let indices = t.indices();
    let monotone_tail = (!delta.is_empty()).then(|| indices[tail_start(&delta)]);
    ConvergenceReport {
        radius: t.ball.radius,
        ball_size: t.ball.len(),
        threshold,
        monotone_tail,
        trace_convergent_on_ball: per_word.iter().all(|w| w.convergent),
        uniform_on_ball: tends_to_infinity(&delta, threshold),
        dimension_ok: pseudochar_dimension_check(t, t.d),
        indices,
        delta,
        per_word,
    }
}

/// The limit pseudo-character has dimension `d`: `T(ε) = d` exactly.
pub fn pseudochar_dimension_check(t: &TraceTable, d: usize) -> bool {
    let Some(i) = t.ball.words.iter().position(|w| w.is_empty()) else { return false };
    let x = &t.limit[i];
    let diff = x.sub(&PadicScalar::from_int(x.field(), d as i128));
    diff.is_exact_zero() || (diff.is_zero() && diff.prec() >= Val::Fin(x.field().prec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::PadicMatrix;
    use proptest::prelude::*;

    fn diag_family(prec: u32) -> RepFamily {
        RepFamily::from_json(&format!(
            r#"{{
            "field": {{"p": 5, "prec": {prec}}}, "d": 2,
            "generators": [[["E(z)", "0"], ["0", "E(seq(a)*z)"]]],
            "sequences": {{"a": {{"formula": "2 + pow(5, n)", "limit": "2"}}}},
            "parametric": true }}"#
        ))
        .unwrap()
    }

    #[test]
    fn diag_traces_and_deltas() {
        let fam = diag_family(20);
        let ns: Vec<i64> = (0..=12).collect();
        let t = trace_table(&fam, 4, &ns).unwrap();
        let f = fam.field();
        let five = PadicScalar::from_int(f, 5);
        for row in &t.members {
            assert_eq!(row.traces[0], PadicScalar::from_int(f, 2));
            let an = 2 + 5i128.pow(row.n as u32);
            let expect = five.exp().unwrap().add(&five.mul(&PadicScalar::from_int(f, an)).exp().unwrap());
            assert_eq!(row.traces[1].sub(&expect).observed_valuation(), Val::Inf);
        }
        let r = convergence_report(&t, DEFAULT_THRESHOLD);
        let expect: Vec<Val> = ns.iter().map(|n| Val::Fin(n + 1)).collect();
        assert_eq!(r.delta, expect);
        assert_eq!(r.monotone_tail, Some(0));
        assert!(r.uniform_on_ball && r.trace_convergent_on_ball && r.dimension_ok);
    }

    #[test]
    fn constant_family_has_infinite_deltas() {
        let fam = RepFamily::from_json(
            r#"{"field": {"p": 5, "prec": 10}, "d": 2,
                "generators": [[["1","1"],["0","1"]], [["2","0"],["1","1"]]]}"#,
        )
        .unwrap();
        let t = trace_table(&fam, 2, &[0, 1, 2]).unwrap();
        let r = convergence_report(&t, DEFAULT_THRESHOLD);
        assert!(r.delta.iter().all(|&v| v == Val::Inf));
        assert!(r.per_word.iter().all(|w| w.deltas.iter().all(|&v| v == Val::Inf)));
    }

    #[test]
    fn oscillating_traces_do_not_converge() {
        let fam = RepFamily::from_json(
            r#"{"field": {"p": 5, "prec": 10}, "d": 2,
                "generators": [[["pow(-1, n)","0"],["0","1"]]],
                "limit": [[["1","0"],["0","1"]]]}"#,
        )
        .unwrap();
        let ns: Vec<i64> = (0..=10).collect();
        let r = convergence_report(&trace_table(&fam, 2, &ns).unwrap(), DEFAULT_THRESHOLD);
        assert!(!r.trace_convergent_on_ball);
        assert!(!r.uniform_on_ball);
    }

    #[test]
    fn dimension_check() {
        let fam = RepFamily::from_json(
            r#"{"field": {"p": 5, "prec": 10}, "d": 3,
                "generators": [[["E(z)","0","0"],["0","E(2*z)","0"],["0","0","E(3*z)"]]], "parametric": true}"#,
        )
        .unwrap();
        let mut t = trace_table(&fam, 1, &[1]).unwrap();
        assert!(pseudochar_dimension_check(&t, 3));
        t.limit[0] = PadicScalar::from_int(fam.field(), 2);
        assert!(!pseudochar_dimension_check(&t, 3));
    }

    fn two_gen(a: i64, b: i64) -> RepFamily {
        RepFamily::from_json(&format!(
            r#"{{"field": {{"p": 5, "prec": 12}}, "d": 2,
                "generators": [[["1+pow(5,n)*{a}","1"],["0","1"]], [["1","0"],["{b}*pow(5,n)","1"]]],
                "limit": [[["1","1"],["0","1"]], [["1","0"],["0","1"]]]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn direct_sum_takes_minimum() {
        let a = RepFamily::from_json(
            r#"{"field": {"p": 5, "prec": 12}, "d": 1, "generators": [[["1+pow(5,n)"]]], "limit": [[["1"]]]}"#,
        )
        .unwrap();
        let b = RepFamily::from_json(
            r#"{"field": {"p": 5, "prec": 12}, "d": 1, "generators": [[["1+25*pow(5,n)"]]], "limit": [[["1"]]]}"#,
        )
        .unwrap();
        let s = RepFamily::from_json(
            r#"{"field": {"p": 5, "prec": 12}, "d": 2,
                "generators": [[["1+pow(5,n)","0"],["0","1+25*pow(5,n)"]]], "limit": [[["1","0"],["0","1"]]]}"#,
        )
        .unwrap();
        let ns = [1, 2, 3];
        let da = convergence_report(&trace_table(&a, 3, &ns).unwrap(), 5).delta;
        let db = convergence_report(&trace_table(&b, 3, &ns).unwrap(), 5).delta;
        let ds = convergence_report(&trace_table(&s, 3, &ns).unwrap(), 5).delta;
        for k in 0..ns.len() {
            assert_eq!(ds[k], da[k].min(db[k]));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn delta_is_conjugation_invariant(a in 1i64..5, b in 1i64..5, c in -20i128..20, d in -20i128..20) {
            let fam = two_gen(a, b);
            let f = fam.field();
            let ball = fam.word_ball(3).unwrap();
            let p = PadicMatrix::from_ints(f, &[&[1, c], &[5 * d, 1]]);
            let lim: Vec<PadicScalar> = fam.at(Index::Limit).unwrap().eval_ball(&ball).iter().map(|m| m.trace()).collect();
            for n in 1..4 {
                let inst = fam.at(Index::Member(n)).unwrap();
                let conj = inst.conjugated(&p).unwrap();
                let plain = inst.eval_ball(&ball);
                let moved = conj.eval_ball(&ball);
                for i in 0..ball.len() {
                    let u = plain[i].trace().sub(&lim[i]).observed_valuation();
                    let v = moved[i].trace().sub(&lim[i]).observed_valuation();
                    prop_assert_eq!(u, v);
                }
            }
        }

        #[test]
        fn enlarging_ball_never_increases_delta(a in 1i64..5, b in 1i64..5, r in 1usize..3) {
            let fam = two_gen(a, b);
            let ns = [1, 2, 3];
            let small = convergence_report(&trace_table(&fam, r, &ns).unwrap(), 5).delta;
            let large = convergence_report(&trace_table(&fam, r + 1, &ns).unwrap(), 5).delta;
            for k in 0..ns.len() {
                prop_assert!(large[k] <= small[k]);
            }
        }

        #[test]
        fn delta_is_min_of_word_deltas(a in 1i64..5, b in 1i64..5) {
            let r = convergence_report(&trace_table(&two_gen(a, b), 2, &[1, 2, 3, 4]).unwrap(), 5);
            for k in 0..4 {
                let m = r.per_word.iter().map(|w| w.deltas[k]).min().unwrap();
                prop_assert_eq!(r.delta[k], m);
            }
        }
    }
}
