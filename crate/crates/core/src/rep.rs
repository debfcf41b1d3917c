//! Representation families of finitely generated (free) groups.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, Env, Expr, ExprError, Index, SeqDef};
use crate::linalg::{LinalgError, PadicMatrix};
use crate::padic::{FieldSpec, PadicScalar};

/// Default cap on the number of words in a ball.
pub const DEFAULT_BALL_CAP: usize = 200_000;

/// Shortest random walk accepted as a stand-in for Haar sampling.
pub const MIN_WALK_LENGTH: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RepError {
    #[error("family spec: {0}")]
    Spec(String),
    #[error("generator {generator} at index {index}, entry ({row},{col}): {source}")]
    Entry { generator: usize, index: Index, row: usize, col: usize, source: ExprError },
    #[error("generator {generator} is not invertible at index {index}")]
    NonInvertible { generator: usize, index: Index },
    #[error("word ball of radius {radius} has {size} words, above the cap {cap}")]
    BallTooLarge { radius: usize, size: u128, cap: usize },
    #[error("exact Haar sampling needs a parametric family with one generator")]
    NotParametric,
    #[error("random-walk sampling needs walk length >= {min}, got {got}")]
    WalkTooShort { got: usize, min: usize },
    #[error("sampling level m = {m} exceeds the field precision")]
    LevelTooDeep { m: u32 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A freely reduced word; letter `i > 0` is generator `i`, `-i` its inverse.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Word(pub Vec<i32>);

impl Word {
    pub fn empty() -> Self {
        Word(Vec::new())
    }

    pub fn letters(&self) -> &[i32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_reduced(&self) -> bool {
        self.0.windows(2).all(|w| w[0] != -w[1]) && self.0.iter().all(|&l| l != 0)
    }

    pub fn inverse(&self) -> Word {
        Word(self.0.iter().rev().map(|l| -l).collect())
    }

    /// Free reduction of the concatenation.
    pub fn concat(&self, other: &Word) -> Word {
        let mut out = self.0.clone();
        for &l in &other.0 {
            if out.last() == Some(&-l) {
                out.pop();
            } else {
                out.push(l);
            }
        }
        Word(out)
    }
}

impl std::fmt::Display for Word {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_empty() {
            return f.write_str("e");
        }
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|&l| if l > 0 { format!("g{l}") } else { format!("g{}^-1", -l) })
            .collect();
        f.write_str(&parts.join("*"))
    }
}

/// All reduced words of length at most `radius`, in shortlex order.
#[derive(Debug, Clone, Serialize)]
pub struct WordBall {
    pub radius: usize,
    pub words: Vec<Word>,
}

impl WordBall {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Words of length at most `r`, a prefix of the enumeration.
    pub fn sub_ball(&self, r: usize) -> WordBall {
        WordBall { radius: r, words: self.words.iter().filter(|w| w.len() <= r).cloned().collect() }
    }
}

/// Number of reduced words of length at most `radius` on `k` generators.
pub fn ball_size(k: usize, radius: usize) -> u128 {
    if k == 0 {
        return 1;
    }
    let (k2, mut layer, mut total) = (2 * k as u128, 2 * k as u128, 1u128);
    for _ in 0..radius {
        total = total.saturating_add(layer);
        layer = layer.saturating_mul(k2 - 1);
    }
    total
}

fn letter_order(k: usize) -> Vec<i32> {
    (1..=k as i32).flat_map(|g| [g, -g]).collect()
}

pub fn word_ball(k: usize, radius: usize, cap: usize) -> Result<WordBall, RepError> {
    let size = ball_size(k, radius);
    if size > cap as u128 {
        return Err(RepError::BallTooLarge { radius, size, cap });
    }
    let letters = letter_order(k);
    let mut words = vec![Word::empty()];
    let mut layer = vec![Word::empty()];
    for _ in 0..radius {
        let mut next = Vec::new();
        for w in &layer {
            for &l in &letters {
                if w.0.last() == Some(&-l) {
                    continue;
                }
                let mut v = w.0.clone();
                v.push(l);
                next.push(Word(v));
            }
        }
        words.extend(next.iter().cloned());
        layer = next;
    }
    Ok(WordBall { radius, words })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TableEntry {
    Int(i64),
    Expr(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqSpec {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub table: Vec<TableEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formula: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<String>,
}

type EntryGrid = Vec<Vec<String>>;

/// On-disk family description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub field: FieldSpec,
    pub d: usize,
    pub generators: Vec<EntryGrid>,
    /// Limit generators; when absent the member formulas are evaluated with
    /// every `seq(name)` replaced by its limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<Vec<EntryGrid>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sequences: BTreeMap<String, SeqSpec>,
    #[serde(default)]
    pub parametric: bool,
}

/// A parsed family: entry formulas for each member `ρ_n` and for the limit `ρ`.
#[derive(Debug, Clone)]
pub struct RepFamily {
    pub spec: FamilySpec,
    field: FieldSpec,
    d: usize,
    member: Vec<Vec<Expr>>,
    limit: Vec<Vec<Expr>>,
    seqs: BTreeMap<String, SeqDef>,
}

fn parse_grid(grid: &EntryGrid, d: usize, what: &str) -> Result<Vec<Expr>, RepError> {
    if grid.len() != d || grid.iter().any(|r| r.len() != d) {
        return Err(RepError::Spec(format!("{what} is not {d}x{d}")));
    }
    grid.iter()
        .flatten()
        .map(|s| expr::parse(s).map_err(|e| RepError::Spec(format!("{what}: {e}"))))
        .collect()
}

impl RepFamily {
    pub fn from_spec(spec: FamilySpec) -> Result<Self, RepError> {
        let d = spec.d;
        if d == 0 {
            return Err(RepError::Spec("dimension must be positive".into()));
        }
        if spec.generators.is_empty() {
            return Err(RepError::Spec("at least one generator is required".into()));
        }
        let member = spec
            .generators
            .iter()
            .enumerate()
            .map(|(i, g)| parse_grid(g, d, &format!("generator {}", i + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        let limit = match &spec.limit {
            Some(gs) => {
                if gs.len() != member.len() {
                    return Err(RepError::Spec("limit and member generator counts differ".into()));
                }
                gs.iter()
                    .enumerate()
                    .map(|(i, g)| parse_grid(g, d, &format!("limit generator {}", i + 1)))
                    .collect::<Result<Vec<_>, _>>()?
            }
            None => {
                if member.iter().flatten().any(expr::mentions_index) {
                    return Err(RepError::Spec(
                        "entries mention n directly; give explicit limit generators".into(),
                    ));
                }
                member.clone()
            }
        };
        let mut seqs = BTreeMap::new();
        for (name, s) in &spec.sequences {
            let p = |src: &str| expr::parse(src).map_err(|e| RepError::Spec(format!("sequence {name}: {e}")));
            let table = s
                .table
                .iter()
                .map(|t| match t {
                    TableEntry::Int(k) => Ok(Expr::Int(*k as i128)),
                    TableEntry::Expr(src) => p(src),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let formula = s.formula.as_deref().map(p).transpose()?;
            let limit = s.limit.as_deref().map(p).transpose()?;
            if formula.is_none() && table.is_empty() {
                return Err(RepError::Spec(format!("sequence {name} has neither table nor formula")));
            }
            seqs.insert(name.clone(), SeqDef { table, formula, limit });
        }
        if spec.parametric && spec.generators.len() != 1 {
            return Err(RepError::Spec("parametric families have exactly one generator".into()));
        }
        Ok(RepFamily { field: spec.field, d, member, limit, seqs, spec })
    }

    pub fn from_json(text: &str) -> Result<Self, RepError> {
        let spec: FamilySpec = serde_json::from_str(text).map_err(|e| RepError::Spec(e.to_string()))?;
        Self::from_spec(spec)
    }

    pub fn load(path: &Path) -> Result<Self, RepError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RepError::Spec(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn field(&self) -> FieldSpec {
        self.field
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn generator_count(&self) -> usize {
        self.member.len()
    }

    pub fn is_parametric(&self) -> bool {
        self.spec.parametric
    }

    pub fn name(&self) -> &str {
        self.spec.name.as_deref().unwrap_or("family")
    }

    /// Same family carried at a different precision.
    pub fn with_precision(&self, prec: u32) -> Result<Self, RepError> {
        let mut spec = self.spec.clone();
        spec.field = self.field.with_prec(prec).map_err(|e| RepError::Spec(e.to_string()))?;
        Self::from_spec(spec)
    }

    /// Generator matrix `g` (0-based) at `index`, with parameter `z` (default 1).
    pub fn generator(&self, g: usize, index: Index, z: Option<PadicScalar>) -> Result<PadicMatrix, RepError> {
        let grid = match index {
            Index::Member(_) => &self.member[g],
            Index::Limit => &self.limit[g],
        };
        let vars = BTreeMap::new();
        let env = Env { field: self.field, index, z, seqs: &self.seqs, vars: &vars };
        let mut entries = Vec::with_capacity(self.d * self.d);
        for (k, e) in grid.iter().enumerate() {
            let x = env.eval(e).map_err(|source| RepError::Entry {
                generator: g + 1,
                index,
                row: k / self.d,
                col: k % self.d,
                source,
            })?;
            entries.push(x);
        }
        Ok(PadicMatrix::new(self.field, self.d, entries)?)
    }

    /// Generators and their inverses at one index.
    pub fn at(&self, index: Index) -> Result<Instance, RepError> {
        let mut gens = Vec::with_capacity(self.member.len());
        let mut invs = Vec::with_capacity(self.member.len());
        for g in 0..self.member.len() {
            let m = self.generator(g, index, None)?;
            let inv = m.inverse().map_err(|_| RepError::NonInvertible { generator: g + 1, index })?;
            gens.push(m);
            invs.push(inv);
        }
        Ok(Instance { field: self.field, d: self.d, index, gens, invs })
    }

    pub fn eval(&self, index: Index, w: &Word) -> Result<PadicMatrix, RepError> {
        Ok(self.at(index)?.eval(w))
    }

    pub fn word_ball(&self, radius: usize) -> Result<WordBall, RepError> {
        word_ball(self.generator_count(), radius, DEFAULT_BALL_CAP)
    }
}

/// A family evaluated at one index.
#[derive(Debug, Clone)]
pub struct Instance {
    pub field: FieldSpec,
    pub d: usize,
    pub index: Index,
    pub gens: Vec<PadicMatrix>,
    pub invs: Vec<PadicMatrix>,
}

impl Instance {
    pub fn letter(&self, l: i32) -> &PadicMatrix {
        let g = l.unsigned_abs() as usize - 1;
        if l > 0 {
            &self.gens[g]
        } else {
            &self.invs[g]
        }
    }

    pub fn eval(&self, w: &Word) -> PadicMatrix {
        let mut acc = PadicMatrix::identity(self.field, self.d);
        for &l in w.letters() {
            acc = acc.mul(self.letter(l));
        }
        acc
    }

    /// Images of every ball word, reusing prefix products.
    pub fn eval_ball(&self, ball: &WordBall) -> Vec<PadicMatrix> {
        let mut index: HashMap<&[i32], usize> = HashMap::with_capacity(ball.len());
        let mut out: Vec<PadicMatrix> = Vec::with_capacity(ball.len());
        for (i, w) in ball.words.iter().enumerate() {
            let m = match w.letters().split_last() {
                None => PadicMatrix::identity(self.field, self.d),
                Some((&last, prefix)) => match index.get(prefix) {
                    Some(&j) => out[j].mul(self.letter(last)),
                    None => self.eval(w),
                },
            };
            index.insert(w.letters(), i);
            out.push(m);
        }
        out
    }

    /// Conjugate every generator: `P⁻¹ g P`.
    pub fn conjugated(&self, p: &PadicMatrix) -> Result<Instance, LinalgError> {
        let pinv = p.inverse()?;
        let conj = |m: &PadicMatrix| pinv.mul(m).mul(p);
        Ok(Instance {
            field: self.field,
            d: self.d,
            index: self.index,
            gens: self.gens.iter().map(conj).collect(),
            invs: self.invs.iter().map(conj).collect(),
        })
    }
}

/// Per-sample seed, independent of evaluation order.
pub fn derive_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// How group elements are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Sampling {
    /// Uniform parameter in the valuation ring: exact Haar measure.
    ExactHaar,
    /// Random reduced word of the given length: an approximation.
    RandomWalk { length: usize },
}

/// Uniform element of the valuation ring, to full working precision.
pub fn uniform_integer(field: FieldSpec, rng: &mut impl Rng) -> PadicScalar {
    let digits = field.prec().div_euclid(field.e() as i64) as u32 + 1;
    let mut acc = PadicScalar::zero(field);
    for i in 0..field.e() as i64 {
        let mut c: i128 = 0;
        for _ in 0..digits {
            c = c * field.p() as i128 + rng.gen_range(0..field.p()) as i128;
        }
        acc = acc.add(&PadicScalar::from_int(field, c).mul(&PadicScalar::pi_power(field, i)));
    }
    acc.truncate(field.prec())
}

/// Parameters `z_0, …` for exact Haar sampling; uniform modulo `p^m` for every `m` up to the precision.
pub fn haar_parameters(fam: &RepFamily, seed: u64, count: usize, level: u32) -> Result<Vec<PadicScalar>, RepError> {
    if !fam.is_parametric() {
        return Err(RepError::NotParametric);
    }
    let f = fam.field();
    if level as i64 * f.e() as i64 > f.prec() {
        return Err(RepError::LevelTooDeep { m: level });
    }
    Ok((0..count as u64)
        .map(|i| uniform_integer(f, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, i))))
        .collect())
}

/// Draw `count` group elements of `ρ_index`.
pub fn haar_sample(
    fam: &RepFamily,
    index: Index,
    seed: u64,
    count: usize,
    level: u32,
    mode: Sampling,
) -> Result<Vec<PadicMatrix>, RepError> {
    match mode {
        Sampling::ExactHaar => haar_parameters(fam, seed, count, level)?
            .into_iter()
            .map(|z| fam.generator(0, index, Some(z)))
            .collect(),
        Sampling::RandomWalk { length } => {
            if length < MIN_WALK_LENGTH {
                return Err(RepError::WalkTooShort { got: length, min: MIN_WALK_LENGTH });
            }
            let inst = fam.at(index)?;
            let letters = letter_order(fam.generator_count());
            Ok((0..count as u64)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i));
                    let mut w: Vec<i32> = Vec::with_capacity(length);
                    while w.len() < length {
                        let l = letters[rng.gen_range(0..letters.len())];
                        if w.last() != Some(&-l) {
                            w.push(l);
                        }
                    }
                    inst.eval(&Word(w))
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIAG: &str = r#"{
        "field": {"p": 5, "e": 1, "prec": 12},
        "d": 2,
        "generators": [[["E(z)", "0"], ["0", "E(seq(a)*z)"]]],
        "sequences": {"a": {"formula": "2 + pow(5, n)", "limit": "2"}},
        "parametric": true
    }"#;

    #[test]
    fn ball_sizes() {
        let b = word_ball(1, 3, 1000).unwrap();
        assert_eq!(b.len(), 7);
        assert_eq!(b.words[1], Word(vec![1]));
        assert_eq!(b.words[2], Word(vec![-1]));
        assert_eq!(b.words[3], Word(vec![1, 1]));
        assert_eq!(word_ball(2, 1, 1000).unwrap().len(), 5);
        assert_eq!(word_ball(2, 2, 1000).unwrap().len(), 17);
        assert_eq!(ball_size(2, 4), 161);
        assert!(matches!(word_ball(3, 10, 1000), Err(RepError::BallTooLarge { .. })));
    }

    #[test]
    fn ball_closed_under_inversion() {
        let b = word_ball(2, 3, 1000).unwrap();
        for w in &b.words {
            assert!(w.is_reduced());
            assert!(b.words.contains(&w.inverse()));
        }
    }

    #[test]
    fn diag_family_evaluation() {
        let fam = RepFamily::from_json(DIAG).unwrap();
        let f = fam.field();
        let id = fam.eval(Index::Member(1), &Word::empty()).unwrap();
        assert_eq!(id, PadicMatrix::identity(f, 2));
        let m = fam.eval(Index::Member(1), &Word(vec![1])).unwrap();
        // a_1 = 7; e(1) ≡ 81, e(7) = exp(35) mod 125 from the series oracle.
        let p = PadicScalar::from_int(f, 5);
        assert_eq!(m.get(0, 0).to_u64_mod(3), Some(81));
        let e7 = p.mul(&PadicScalar::from_int(f, 7)).exp().unwrap();
        assert_eq!(m.get(1, 1).to_u64_mod(3), e7.to_u64_mod(3));
        assert!(m.get(0, 1).is_exact_zero());
    }

    #[test]
    fn word_times_inverse_is_identity() {
        let fam = RepFamily::from_json(
            r#"{"field": {"p": 5, "prec": 12}, "d": 2,
                "generators": [[["1","1"],["0","1"]], [["1","0"],["5","1"]]]}"#,
        )
        .unwrap();
        let inst = fam.at(Index::Limit).unwrap();
        let ball = fam.word_ball(3).unwrap();
        let id = PadicMatrix::identity(fam.field(), 2);
        for w in ball.words.iter().take(50) {
            let prod = inst.eval(w).mul(&inst.eval(&w.inverse()));
            assert!(prod.sub(&id).is_zero(), "{w}");
        }
        let mats = inst.eval_ball(&ball);
        for (w, m) in ball.words.iter().zip(&mats) {
            assert_eq!(m, &inst.eval(w));
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_shapes() {
        assert!(RepFamily::from_json(r#"{"field": {"p": 5, "prec": 8}, "d": 1, "generators": [[["1"]]], "bogus": 1}"#).is_err());
        assert!(RepFamily::from_json(r#"{"field": {"p": 5, "prec": 8}, "d": 2, "generators": [[["1"]]]}"#).is_err());
        assert!(RepFamily::from_json(r#"{"field": {"p": 5, "prec": 8}, "d": 1, "generators": [[["n"]]]}"#).is_err());
    }

    #[test]
    fn non_invertible_generator() {
        let fam = RepFamily::from_json(
            r#"{"field": {"p": 5, "prec": 8}, "d": 2, "generators": [[["1","1"],["pow(5,n)","1"]]],
                "limit": [[["1","1"],["0","1"]]]}"#,
        )
        .unwrap();
        assert!(matches!(fam.at(Index::Member(0)), Err(RepError::NonInvertible { .. })));
        assert!(fam.at(Index::Member(1)).is_ok());
    }

    #[test]
    fn sampling_is_reproducible() {
        let fam = RepFamily::from_json(DIAG).unwrap();
        let a = haar_sample(&fam, Index::Limit, 7, 20, 3, Sampling::ExactHaar).unwrap();
        let b = haar_sample(&fam, Index::Limit, 7, 20, 3, Sampling::ExactHaar).unwrap();
        assert_eq!(a, b);
        assert!(haar_sample(&fam, Index::Limit, 7, 0, 3, Sampling::ExactHaar).unwrap().is_empty());
        assert!(matches!(
            haar_sample(&fam, Index::Limit, 7, 5, 3, Sampling::RandomWalk { length: 4 }),
            Err(RepError::WalkTooShort { .. })
        ));
    }

    #[test]
    fn haar_residues_are_uniform() {
        let fam = RepFamily::from_json(DIAG).unwrap();
        let zs = haar_parameters(&fam, 2024, 10_000, 1).unwrap();
        let mut counts = [0usize; 5];
        for z in &zs {
            counts[z.residue().unwrap() as usize] += 1;
        }
        // Chi-square with 4 degrees of freedom; 99.9% quantile is 18.47.
        let expect = 2000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 18.47, "{counts:?} chi2 = {chi2}");
        for &c in &counts {
            let sigma = (10_000.0f64 * 0.2 * 0.8).sqrt();
            assert!((c as f64 - expect).abs() < 3.0 * sigma);
        }
    }
}
