//! Immutable symbolic expressions over the mixed-space coordinate alphabet.
//!
//! Expressions are trees of exact rational constants, parameters, coordinates,
//! n-ary sums/products, rational powers and the elementary functions sin, cos,
//! exp, log. Every constructor normalizes: sums and products are flattened and
//! sorted, constants folded, identical terms collected. Two structurally equal
//! expressions therefore compare equal with `==` and evaluate equally at every
//! point, and `simplify` is idempotent by construction.
//!
//! Zero testing is probabilistic: after normalization an expression is sampled
//! at seeded pseudo-random points drawn uniformly from [-2, 2] and declared
//! zero when every sample stays below a relative tolerance. Exact structural
//! zeros short-circuit. See [`Expr::is_zero`].


use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type Rational = BigRational;

/// Relative tolerance of the probabilistic zero test.
pub const ZERO_REL_TOL: f64 = 1e-9;
/// Default number of sample points for the probabilistic zero test.
pub const DEFAULT_ZERO_TRIALS: usize = 16;
/// Default seed funnelled through the CLI `--seed` flag.
pub const DEFAULT_SEED: u64 = 42;

/// A coordinate of the mixed space T*E ×_E J¹π.
///
/// Indexed kinds carry a 1-based fibre index A with 1 ≤ A ≤ n. The variant
/// order here fixes the canonical coordinate order (t, q^A, τ, p_A, q̇^A)
/// shared by every module; the mixed space has 3n+2 coordinates in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Coord {
    Time,
    Position(u32),
    Tau,
    Momentum(u32),
    Velocity(u32),
}

impl Coord {
    pub fn name(&self) -> String {
        match self {
            Coord::Time => "t".to_string(),
            Coord::Position(a) => format!("q{a}"),
            Coord::Tau => "tau".to_string(),
            Coord::Momentum(a) => format!("p{a}"),
            Coord::Velocity(a) => format!("qd{a}"),
        }
    }

    /// Fibre index for indexed kinds, `None` for t and τ.
    pub fn index(&self) -> Option<u32> {
        match self {
            Coord::Time | Coord::Tau => None,
            Coord::Position(a) | Coord::Momentum(a) | Coord::Velocity(a) => Some(*a),
        }
    }

    /// Checks 1 ≤ A ≤ n for indexed kinds.
    pub fn valid_for(&self, n: u32) -> bool {
        match self.index() {
            None => true,
            Some(a) => a >= 1 && a <= n,
        }
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Expression node. Variant order defines the canonical term/factor order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Node {
    Num(Rational),
    Coord(Coord),
    Param(String),
    Sin(Expr),
    Cos(Expr),
    Exp(Expr),
    Log(Expr),
    Pow(Expr, Rational),
    Prod(Vec<Expr>),
    Sum(Vec<Expr>),
}

/// Immutable symbolic expression. Cheap to clone (`Arc`-shared) and safe to
/// send between threads; all operations are pure.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Expr(Arc<Node>);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("unbound coordinate {0}")]
    UnboundCoord(String),
    #[error("unbound parameter {0}")]
    UnboundParam(String),
    #[error("domain error: {reason} in `{subexpr}`")]
    Domain { reason: String, subexpr: String },
}

fn rat_i64(n: i64, d: i64) -> Rational {
    Rational::new(BigInt::from(n), BigInt::from(d))
}

fn rat_pow(base: &Rational, exp: &Rational) -> Option<Rational> {
    if !exp.is_integer() {
        return None;
    }
    let e = exp.to_integer().to_i32()?;
    if base.is_zero() && e < 0 {
        return None;
    }
    Some(base.pow(e))
}

impl Expr {
    fn node(&self) -> &Node {
        &self.0
    }

    // ----- constructors ---------------------------------------------------

    pub fn num(r: Rational) -> Expr {
        Expr(Arc::new(Node::Num(r)))
    }

    pub fn int(v: i64) -> Expr {
        Expr::num(rat_i64(v, 1))
    }

    pub fn rational(n: i64, d: i64) -> Expr {
        Expr::num(rat_i64(n, d))
    }

    pub fn zero() -> Expr {
        Expr::int(0)
    }

    pub fn one() -> Expr {
        Expr::int(1)
    }

    pub fn coord(c: Coord) -> Expr {
        Expr(Arc::new(Node::Coord(c)))
    }

    pub fn param(name: impl Into<String>) -> Expr {
        Expr(Arc::new(Node::Param(name.into())))
    }

    pub fn t() -> Expr {
        Expr::coord(Coord::Time)
    }

    pub fn tau() -> Expr {
        Expr::coord(Coord::Tau)
    }

    pub fn q(a: u32) -> Expr {
        Expr::coord(Coord::Position(a))
    }

    pub fn qd(a: u32) -> Expr {
        Expr::coord(Coord::Velocity(a))
    }

    pub fn p(a: u32) -> Expr {
        Expr::coord(Coord::Momentum(a))
    }

    pub fn sum(terms: Vec<Expr>) -> Expr {
        make_sum(terms)
    }

    pub fn product(factors: Vec<Expr>) -> Expr {
        make_prod(factors)
    }

    pub fn pow(&self, exp: Rational) -> Expr {
        make_pow(self.clone(), exp)
    }

    pub fn powi(&self, exp: i64) -> Expr {
        self.pow(rat_i64(exp, 1))
    }

    pub fn recip(&self) -> Expr {
        self.powi(-1)
    }

    pub fn sin(&self) -> Expr {
        if self.is_const_zero() {
            return Expr::zero();
        }
        Expr(Arc::new(Node::Sin(self.clone())))
    }

    pub fn cos(&self) -> Expr {
        if self.is_const_zero() {
            return Expr::one();
        }
        Expr(Arc::new(Node::Cos(self.clone())))
    }

    pub fn exp(&self) -> Expr {
        if self.is_const_zero() {
            return Expr::one();
        }
        Expr(Arc::new(Node::Exp(self.clone())))
    }

    pub fn log(&self) -> Expr {
        if self.is_const_one() {
            return Expr::zero();
        }
        Expr(Arc::new(Node::Log(self.clone())))
    }

    // ----- structural queries ---------------------------------------------

    pub fn is_const_zero(&self) -> bool {
        matches!(self.node(), Node::Num(r) if r.is_zero())
    }

    pub fn is_const_one(&self) -> bool {
        matches!(self.node(), Node::Num(r) if r.is_one())
    }

    pub fn as_rational(&self) -> Option<&Rational> {
        match self.node() {
            Node::Num(r) => Some(r),
            _ => None,
        }
    }

    /// Coordinates appearing in the expression.
    pub fn coords(&self) -> BTreeSet<Coord> {
        let mut out = BTreeSet::new();
        self.visit(&mut |n| {
            if let Node::Coord(c) = n {
                out.insert(*c);
            }
        });
        out
    }

    /// Parameter symbols appearing in the expression.
    pub fn params(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.visit(&mut |n| {
            if let Node::Param(p) = n {
                out.insert(p.clone());
            }
        });
        out
    }

    fn visit(&self, f: &mut impl FnMut(&Node)) {
        f(self.node());
        match self.node() {
            Node::Num(_) | Node::Coord(_) | Node::Param(_) => {}
            Node::Sin(u) | Node::Cos(u) | Node::Exp(u) | Node::Log(u) => u.visit(f),
            Node::Pow(b, _) => b.visit(f),
            Node::Prod(xs) | Node::Sum(xs) => {
                for x in xs {
                    x.visit(f);
                }
            }
        }
    }

    /// Conservative polynomial-ish degree estimate, used for deterministic
    /// pivot selection. Elementary functions count as degree of argument + 2.
    pub fn degree(&self) -> u64 {
        match self.node() {
            Node::Num(_) => 0,
            Node::Coord(_) | Node::Param(_) => 1,
            Node::Sin(u) | Node::Cos(u) | Node::Exp(u) | Node::Log(u) => {
                u.degree().saturating_add(2)
            }
            Node::Pow(b, e) => {
                let mag = e.abs().ceil().to_integer().to_u64().unwrap_or(u64::MAX);
                b.degree().saturating_mul(mag.max(1))
            }
            Node::Prod(xs) => xs.iter().map(|x| x.degree()).fold(0u64, |a, b| a.saturating_add(b)),
            Node::Sum(xs) => xs.iter().map(|x| x.degree()).max().unwrap_or(0),
        }
    }

    // ----- calculus ---------------------------------------------------------

    /// Exact partial derivative. Coordinates are independent symbols: there is
    /// no chain rule through t, and parameters differentiate to zero.
    pub fn diff(&self, c: Coord) -> Expr {
        match self.node() {
            Node::Num(_) | Node::Param(_) => Expr::zero(),
            Node::Coord(c2) => {
                if *c2 == c {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Node::Sum(xs) => make_sum(xs.iter().map(|x| x.diff(c)).collect()),
            Node::Prod(xs) => {
                let mut terms = Vec::with_capacity(xs.len());
                for (i, x) in xs.iter().enumerate() {
                    let dx = x.diff(c);
                    if dx.is_const_zero() {
                        continue;
                    }
                    let mut fs: Vec<Expr> = Vec::with_capacity(xs.len());
                    fs.push(dx);
                    for (j, y) in xs.iter().enumerate() {
                        if j != i {
                            fs.push(y.clone());
                        }
                    }
                    terms.push(make_prod(fs));
                }
                make_sum(terms)
            }
            Node::Pow(b, e) => {
                let db = b.diff(c);
                if db.is_const_zero() {
                    return Expr::zero();
                }
                let em1 = e - Rational::one();
                make_prod(vec![Expr::num(e.clone()), make_pow(b.clone(), em1), db])
            }
            Node::Sin(u) => make_prod(vec![u.cos(), u.diff(c)]),
            Node::Cos(u) => make_prod(vec![Expr::int(-1), u.sin(), u.diff(c)]),
            Node::Exp(u) => make_prod(vec![self.clone(), u.diff(c)]),
            Node::Log(u) => make_prod(vec![u.recip(), u.diff(c)]),
        }
    }

    /// Floating evaluation at a point. Every coordinate and parameter of the
    /// expression must be bound; domain errors report the offending
    /// subexpression.
    pub fn eval(
        &self,
        coords: &BTreeMap<Coord, f64>,
        params: &BTreeMap<String, f64>,
    ) -> Result<f64, EvalError> {
        match self.node() {
            Node::Num(r) => Ok(r.to_f64().unwrap_or(f64::NAN)),
            Node::Coord(c) => coords
                .get(c)
                .copied()
                .ok_or_else(|| EvalError::UnboundCoord(c.name())),
            Node::Param(p) => params
                .get(p)
                .copied()
                .ok_or_else(|| EvalError::UnboundParam(p.clone())),
            Node::Sum(xs) => {
                let mut acc = 0.0;
                for x in xs {
                    acc += x.eval(coords, params)?;
                }
                Ok(acc)
            }
            Node::Prod(xs) => {
                let mut acc = 1.0;
                for x in xs {
                    acc *= x.eval(coords, params)?;
                }
                Ok(acc)
            }
            Node::Pow(b, e) => {
                let bv = b.eval(coords, params)?;
                let ev = e.to_f64().unwrap_or(f64::NAN);
                if bv == 0.0 && ev < 0.0 {
                    return Err(EvalError::Domain {
                        reason: "zero base with negative exponent".into(),
                        subexpr: self.to_string(),
                    });
                }
                if bv < 0.0 && !e.is_integer() {
                    return Err(EvalError::Domain {
                        reason: "negative base with fractional exponent".into(),
                        subexpr: self.to_string(),
                    });
                }
                Ok(bv.powf(ev))
            }
            Node::Sin(u) => Ok(u.eval(coords, params)?.sin()),
            Node::Cos(u) => Ok(u.eval(coords, params)?.cos()),
            Node::Exp(u) => Ok(u.eval(coords, params)?.exp()),
            Node::Log(u) => {
                let uv = u.eval(coords, params)?;
                if uv <= 0.0 {
                    return Err(EvalError::Domain {
                        reason: format!("log of nonpositive value {uv}"),
                        subexpr: self.to_string(),
                    });
                }
                Ok(uv.ln())
            }
        }
    }

    /// Simultaneous substitution of coordinates by expressions, iterated to a
    /// fixpoint so solved forms may refer to later-solved coordinates.
    pub fn subst(&self, map: &BTreeMap<Coord, Expr>) -> Expr {
        if map.is_empty() {
            return self.clone();
        }
        let mut cur = self.clone();
        for _ in 0..map.len() + 1 {
            let next = cur.subst_once(map);
            if next == cur {
                return cur;
            }
            cur = next;
        }
        cur
    }

    fn subst_once(&self, map: &BTreeMap<Coord, Expr>) -> Expr {
        match self.node() {
            Node::Num(_) | Node::Param(_) => self.clone(),
            Node::Coord(c) => map.get(c).cloned().unwrap_or_else(|| self.clone()),
            Node::Sum(xs) => make_sum(xs.iter().map(|x| x.subst_once(map)).collect()),
            Node::Prod(xs) => make_prod(xs.iter().map(|x| x.subst_once(map)).collect()),
            Node::Pow(b, e) => make_pow(b.subst_once(map), e.clone()),
            Node::Sin(u) => u.subst_once(map).sin(),
            Node::Cos(u) => u.subst_once(map).cos(),
            Node::Exp(u) => u.subst_once(map).exp(),
            Node::Log(u) => u.subst_once(map).log(),
        }
    }

    /// Substitution of parameter symbols by expressions.
    pub fn subst_params(&self, map: &BTreeMap<String, Expr>) -> Expr {
        if map.is_empty() {
            return self.clone();
        }
        match self.node() {
            Node::Num(_) | Node::Coord(_) => self.clone(),
            Node::Param(p) => map.get(p).cloned().unwrap_or_else(|| self.clone()),
            Node::Sum(xs) => make_sum(xs.iter().map(|x| x.subst_params(map)).collect()),
            Node::Prod(xs) => make_prod(xs.iter().map(|x| x.subst_params(map)).collect()),
            Node::Pow(b, e) => make_pow(b.subst_params(map), e.clone()),
            Node::Sin(u) => u.subst_params(map).sin(),
            Node::Cos(u) => u.subst_params(map).cos(),
            Node::Exp(u) => u.subst_params(map).exp(),
            Node::Log(u) => u.subst_params(map).log(),
        }
    }

    /// Rebuild bottom-up through the normalizing constructors. Expressions are
    /// already in normal form, so this is a fixpoint: simplify ∘ simplify ≡
    /// simplify structurally.
    pub fn simplify(&self) -> Expr {
        match self.node() {
            Node::Num(_) | Node::Coord(_) | Node::Param(_) => self.clone(),
            Node::Sum(xs) => make_sum(xs.iter().map(|x| x.simplify()).collect()),
            Node::Prod(xs) => make_prod(xs.iter().map(|x| x.simplify()).collect()),
            Node::Pow(b, e) => make_pow(b.simplify(), e.clone()),
            Node::Sin(u) => u.simplify().sin(),
            Node::Cos(u) => u.simplify().cos(),
            Node::Exp(u) => u.simplify().exp(),
            Node::Log(u) => u.simplify().log(),
        }
    }

    // ----- probabilistic zero test ------------------------------------------

    /// True iff the expression vanishes at `trials` seeded sample points (or
    /// is an exact structural zero, which short-circuits). Sample coordinates
    /// and parameters are drawn uniformly from [-2, 2]; evaluation domain
    /// errors trigger resampling with a bounded retry budget.
    pub fn is_zero(&self, trials: usize, seed: u64) -> bool {
        let e = self.simplify();
        if let Node::Num(r) = e.node() {
            return r.is_zero();
        }
        let coords: Vec<Coord> = e.coords().into_iter().collect();
        let params: Vec<String> = e.params().into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut valid = 0usize;
        let budget = trials.max(1) * 8;
        for _ in 0..budget {
            if valid >= trials.max(1) {
                break;
            }
            let mut cmap = BTreeMap::new();
            for c in &coords {
                cmap.insert(*c, rng.random_range(-2.0..2.0));
            }
            let mut pmap = BTreeMap::new();
            for p in &params {
                pmap.insert(p.clone(), rng.random_range(-2.0..2.0));
            }
            match e.eval_scaled(&cmap, &pmap) {
                Ok((v, scale)) => {
                    valid += 1;
                    if v.abs() > ZERO_REL_TOL * scale.max(1.0) {
                        return false;
                    }
                }
                Err(_) => continue,
            }
        }
        valid > 0
    }

    /// Evaluate together with a magnitude scale for the relative zero test:
    /// for sums the scale is the sum of term magnitudes, otherwise 1.
    fn eval_scaled(
        &self,
        coords: &BTreeMap<Coord, f64>,
        params: &BTreeMap<String, f64>,
    ) -> Result<(f64, f64), EvalError> {
        match self.node() {
            Node::Sum(xs) => {
                let mut acc = 0.0;
                let mut scale = 0.0;
                for x in xs {
                    let v = x.eval(coords, params)?;
                    acc += v;
                    scale += v.abs();
                }
                Ok((acc, scale))
            }
            _ => {
                let v = self.eval(coords, params)?;
                Ok((v, 1.0))
            }
        }
    }

    /// Leading rational coefficient used for constraint normalization: the
    /// coefficient of the first non-constant canonical term.
    pub fn leading_coefficient(&self) -> Rational {
        fn term_coeff(e: &Expr) -> Rational {
            match e.node() {
                Node::Num(r) => r.clone(),
                Node::Prod(fs) => match fs[0].node() {
                    Node::Num(r) => r.clone(),
                    _ => Rational::one(),
                },
                _ => Rational::one(),
            }
        }
        match self.node() {
            Node::Sum(xs) => {
                for x in xs {
                    if x.as_rational().is_none() {
                        return term_coeff(x);
                    }
                }
                term_coeff(&xs[0])
            }
            _ => term_coeff(self),
        }
    }
}

/// Spec-level free function form of the zero test.
pub fn is_zero(e: &Expr, trials: usize, seed: u64) -> bool {
    e.is_zero(trials, seed)
}

/// Configuration for probabilistic zero testing, funnelled from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroCfg {
    pub trials: usize,
    pub seed: u64,
}

impl Default for ZeroCfg {
    fn default() -> Self {
        ZeroCfg { trials: DEFAULT_ZERO_TRIALS, seed: DEFAULT_SEED }
    }
}

impl ZeroCfg {
    pub fn with_seed(seed: u64) -> Self {
        ZeroCfg { trials: DEFAULT_ZERO_TRIALS, seed }
    }

    pub fn test(&self, e: &Expr) -> bool {
        e.is_zero(self.trials, self.seed)
    }

    /// Magnitude of the expression at one deterministic sample point, used
    /// for pivot scoring.
    pub fn sample_magnitude(&self, e: &Expr) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5bd1e995);
        let coords: BTreeMap<Coord, f64> =
            e.coords().into_iter().map(|c| (c, rng.random_range(-2.0..2.0))).collect();
        let params: BTreeMap<String, f64> =
            e.params().into_iter().map(|p| (p, rng.random_range(-2.0..2.0))).collect();
        e.eval(&coords, &params).map(f64::abs).unwrap_or(0.0)
    }
}

// ----- normalizing constructors ---------------------------------------------

fn make_sum(terms: Vec<Expr>) -> Expr {
    let mut flat: Vec<Expr> = Vec::with_capacity(terms.len());
    let mut stack = terms;
    stack.reverse();
    while let Some(t) = stack.pop() {
        match t.node() {
            Node::Sum(xs) => {
                for x in xs.iter().rev() {
                    stack.push(x.clone());
                }
            }
            // Scalar multiples of sums distribute so that cancellation stays
            // structural; products of sums are left unexpanded.
            Node::Prod(fs) if fs.len() == 2 => {
                if let (Node::Num(c), Node::Sum(xs)) = (fs[0].node(), fs[1].node()) {
                    let scale = Expr::num(c.clone());
                    for x in xs.iter().rev() {
                        stack.push(make_prod(vec![scale.clone(), x.clone()]));
                    }
                } else {
                    flat.push(t);
                }
            }
            _ => flat.push(t),
        }
    }

    let mut constant = Rational::zero();
    let mut coeffs: BTreeMap<Expr, Rational> = BTreeMap::new();
    for t in flat {
        match t.node() {
            Node::Num(r) => constant += r,
            Node::Prod(fs) => {
                if let Node::Num(c) = fs[0].node() {
                    let key = prod_from_sorted(&fs[1..]);
                    *coeffs.entry(key).or_insert_with(Rational::zero) += c;
                } else {
                    *coeffs.entry(t.clone()).or_insert_with(Rational::zero) += Rational::one();
                }
            }
            _ => {
                *coeffs.entry(t.clone()).or_insert_with(Rational::zero) += Rational::one();
            }
        }
    }

    let mut out: Vec<Expr> = Vec::with_capacity(coeffs.len() + 1);
    if !constant.is_zero() {
        out.push(Expr::num(constant));
    }
    let mut resplice = false;
    for (key, c) in coeffs {
        if c.is_zero() {
            continue;
        }
        if c.is_one() {
            // A unit-coefficient key may itself be a (primitive) sum; it must
            // be spliced back into the term list, not nested.
            if matches!(key.node(), Node::Sum(_)) {
                resplice = true;
            }
            out.push(key);
        } else {
            out.push(make_prod(vec![Expr::num(c), key]));
        }
    }
    if resplice {
        return make_sum(out);
    }
    out.sort();
    match out.len() {
        0 => Expr::zero(),
        1 => out.pop().unwrap(),
        _ => extract_content(out),
    }
}

/// Keep every stored sum primitive: factor out the rational content (gcd of
/// the term coefficients, signed so the first non-constant term is positive).
/// Scalar multiples of a sum then have the single canonical shape
/// `Prod([Num, Sum])`, which keeps flattening and cancellation exact.
fn extract_content(terms: Vec<Expr>) -> Expr {
    fn coeff_of(e: &Expr) -> Rational {
        match e.node() {
            Node::Num(r) => r.clone(),
            Node::Prod(fs) => match fs[0].node() {
                Node::Num(r) => r.clone(),
                _ => Rational::one(),
            },
            _ => Rational::one(),
        }
    }

    fn key_of(e: &Expr) -> Expr {
        match e.node() {
            Node::Num(_) => Expr::one(),
            Node::Prod(fs) => match fs[0].node() {
                Node::Num(_) => prod_from_sorted(&fs[1..]),
                _ => e.clone(),
            },
            _ => e.clone(),
        }
    }

    use num_integer::Integer;
    let coeffs: Vec<Rational> = terms.iter().map(coeff_of).collect();
    let mut gcd_num = BigInt::from(0);
    let mut lcm_den = BigInt::from(1);
    for c in &coeffs {
        gcd_num = gcd_num.gcd(c.numer());
        lcm_den = lcm_den.lcm(c.denom());
    }
    let mut content = Rational::new(gcd_num, lcm_den);
    // Sign reference: the coefficient of the minimal key among non-constant
    // terms. Keys are representation-independent, so extraction is a fixpoint.
    let anchor_negative = terms
        .iter()
        .zip(&coeffs)
        .filter(|(t, _)| t.as_rational().is_none())
        .min_by(|(a, _), (b, _)| key_of(a).cmp(&key_of(b)))
        .map(|(_, c)| c.is_negative())
        .unwrap_or(false);
    if anchor_negative {
        content = -content;
    }
    if content.is_one() {
        return Expr(Arc::new(Node::Sum(terms)));
    }
    let inv = content.recip();
    let mut resplice = false;
    let mut scaled: Vec<Expr> = terms
        .into_iter()
        .map(|t| match t.node() {
            Node::Num(r) => Expr::num(r * &inv),
            Node::Prod(fs) => {
                if let Node::Num(r) = fs[0].node() {
                    let c = r * &inv;
                    if c.is_one() {
                        let rest = prod_from_sorted(&fs[1..]);
                        if matches!(rest.node(), Node::Sum(_)) {
                            resplice = true;
                        }
                        rest
                    } else {
                        let mut all = vec![Expr::num(c)];
                        all.extend_from_slice(&fs[1..]);
                        Expr(Arc::new(Node::Prod(all)))
                    }
                } else {
                    make_prod(vec![Expr::num(inv.clone()), t.clone()])
                }
            }
            _ => make_prod(vec![Expr::num(inv.clone()), t]),
        })
        .collect();
    if resplice {
        return make_prod(vec![Expr::num(content), make_sum(scaled)]);
    }
    scaled.sort();
    let primitive = Expr(Arc::new(Node::Sum(scaled)));
    make_prod(vec![Expr::num(content), primitive])
}

/// Rebuild a product from factors already in canonical form and sorted (used
/// when stripping a numeric coefficient off an existing normalized product).
fn prod_from_sorted(factors: &[Expr]) -> Expr {
    match factors.len() {
        0 => Expr::one(),
        1 => factors[0].clone(),
        _ => Expr(Arc::new(Node::Prod(factors.to_vec()))),
    }
}

fn make_prod(factors: Vec<Expr>) -> Expr {
    let mut flat: Vec<Expr> = Vec::with_capacity(factors.len());
    let mut stack = factors;
    stack.reverse();
    while let Some(f) = stack.pop() {
        match f.node() {
            Node::Prod(xs) => {
                for x in xs.iter().rev() {
                    stack.push(x.clone());
                }
            }
            _ => flat.push(f),
        }
    }

    let mut coefficient = Rational::one();
    let mut bases: BTreeMap<Expr, Rational> = BTreeMap::new();
    for f in flat {
        match f.node() {
            Node::Num(r) => {
                if r.is_zero() {
                    return Expr::zero();
                }
                coefficient *= r;
            }
            Node::Pow(b, e) => {
                *bases.entry(b.clone()).or_insert_with(Rational::zero) += e;
            }
            _ => {
                *bases.entry(f.clone()).or_insert_with(Rational::zero) += Rational::one();
            }
        }
    }

    let mut out: Vec<Expr> = Vec::with_capacity(bases.len());
    let mut reflatten = false;
    for (b, e) in bases {
        let rebuilt = make_pow(b, e);
        match rebuilt.node() {
            Node::Num(r) => {
                if r.is_zero() {
                    return Expr::zero();
                }
                coefficient *= r;
            }
            // A collected power may re-expand into a product (e.g. when
            // fractional exponents of a product base sum to an integer).
            Node::Prod(_) => {
                reflatten = true;
                out.push(rebuilt);
            }
            _ => {
                if !rebuilt.is_const_one() {
                    out.push(rebuilt);
                }
            }
        }
    }
    if reflatten {
        let mut all = Vec::with_capacity(out.len() + 1);
        all.push(Expr::num(coefficient));
        all.extend(out);
        return make_prod(all);
    }
    out.sort();
    if out.is_empty() {
        return Expr::num(coefficient);
    }
    if coefficient.is_one() {
        if out.len() == 1 {
            return out.pop().unwrap();
        }
        return Expr(Arc::new(Node::Prod(out)));
    }
    let mut all = Vec::with_capacity(out.len() + 1);
    all.push(Expr::num(coefficient));
    all.extend(out);
    Expr(Arc::new(Node::Prod(all)))
}

fn make_pow(base: Expr, exp: Rational) -> Expr {
    if exp.is_zero() {
        return Expr::one();
    }
    if exp.is_one() {
        return base;
    }
    match base.node() {
        Node::Num(r) => {
            if let Some(v) = rat_pow(r, &exp) {
                return Expr::num(v);
            }
            if r.is_zero() && exp.is_positive() {
                return Expr::zero();
            }
            if r.is_one() {
                return Expr::one();
            }
            Expr(Arc::new(Node::Pow(base.clone(), exp)))
        }
        Node::Pow(b, e) => {
            if exp.is_integer() {
                return make_pow(b.clone(), e * &exp);
            }
            Expr(Arc::new(Node::Pow(base.clone(), exp)))
        }
        Node::Prod(fs) => {
            if exp.is_integer() {
                return make_prod(fs.iter().map(|f| make_pow(f.clone(), exp.clone())).collect());
            }
            Expr(Arc::new(Node::Pow(base.clone(), exp)))
        }
        _ => Expr(Arc::new(Node::Pow(base, exp))),
    }
}

// ----- operator sugar ---------------------------------------------------------

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        make_sum(vec![self, rhs])
    }
}

impl std::ops::Add for &Expr {
    type Output = Expr;
    fn add(self, rhs: &Expr) -> Expr {
        make_sum(vec![self.clone(), rhs.clone()])
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        make_sum(vec![self, -rhs])
    }
}

impl std::ops::Sub for &Expr {
    type Output = Expr;
    fn sub(self, rhs: &Expr) -> Expr {
        self.clone() - rhs.clone()
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        make_prod(vec![self, rhs])
    }
}

impl std::ops::Mul for &Expr {
    type Output = Expr;
    fn mul(self, rhs: &Expr) -> Expr {
        make_prod(vec![self.clone(), rhs.clone()])
    }
}

impl std::ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        make_prod(vec![self, rhs.recip()])
    }
}

impl std::ops::Div for &Expr {
    type Output = Expr;
    fn div(self, rhs: &Expr) -> Expr {
        self.clone() / rhs.clone()
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        make_prod(vec![Expr::int(-1), self])
    }
}

impl std::ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        -(self.clone())
    }
}

// ----- rendering ---------------------------------------------------------------

/// True when the term carries a negative rational coefficient (used by the
/// renderer to emit `a - b` instead of `a + -1*b`).
fn is_negative_term(e: &Expr) -> Option<Expr> {
    match e.node() {
        Node::Num(r) if r.is_negative() => Some(Expr::num(-r.clone())),
        Node::Prod(fs) => match fs[0].node() {
            Node::Num(r) if r.is_negative() => {
                let mut out = vec![Expr::num(-r.clone())];
                out.extend_from_slice(&fs[1..]);
                Some(make_prod(out))
            }
            _ => None,
        },
        _ => None,
    }
}

fn is_atom(e: &Expr) -> bool {
    matches!(
        e.node(),
        Node::Coord(_) | Node::Param(_) | Node::Sin(_) | Node::Cos(_) | Node::Exp(_) | Node::Log(_)
    ) || matches!(e.node(), Node::Num(r) if !r.is_negative() && r.is_integer())
}

fn fmt_rational(r: &Rational) -> String {
    if r.is_integer() {
        format!("{}", r.numer())
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

fn fmt_pow(base: &Expr, exp: &Rational, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if is_atom(base) {
        write!(f, "{base}")?;
    } else {
        write!(f, "({base})")?;
    }
    if exp.is_integer() && !exp.is_negative() {
        write!(f, "^{}", exp.numer())
    } else {
        write!(f, "^({})", fmt_rational(exp))
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Node::Num(r) => write!(f, "{}", fmt_rational(r)),
            Node::Coord(c) => write!(f, "{}", c.name()),
            Node::Param(p) => write!(f, "{p}"),
            Node::Sin(u) => write!(f, "sin({u})"),
            Node::Cos(u) => write!(f, "cos({u})"),
            Node::Exp(u) => write!(f, "exp({u})"),
            Node::Log(u) => write!(f, "log({u})"),
            Node::Pow(b, e) => fmt_pow(b, e, f),
            Node::Prod(fs) => {
                // Split into numerator/denominator by exponent sign; the
                // rational coefficient contributes to both sides.
                let mut coeff = Rational::one();
                let mut numer: Vec<String> = Vec::new();
                let mut denom: Vec<String> = Vec::new();
                for x in fs {
                    match x.node() {
                        Node::Num(r) => coeff = r.clone(),
                        Node::Pow(b, e) if e.is_negative() => {
                            let flipped = make_pow(b.clone(), -e.clone());
                            let s = if is_atom(&flipped) || matches!(flipped.node(), Node::Pow(..))
                            {
                                format!("{flipped}")
                            } else {
                                format!("({flipped})")
                            };
                            denom.push(s);
                        }
                        Node::Sum(_) => numer.push(format!("({x})")),
                        _ => numer.push(format!("{x}")),
                    }
                }
                let neg = coeff.is_negative();
                let coeff = coeff.abs();
                if !coeff.is_one() {
                    numer.insert(0, fmt_rational(&coeff));
                }
                if numer.is_empty() {
                    numer.push("1".to_string());
                }
                if neg {
                    write!(f, "-")?;
                }
                write!(f, "{}", numer.join("*"))?;
                if !denom.is_empty() {
                    if denom.len() == 1 && !denom[0].contains('*') {
                        write!(f, "/{}", denom[0])?;
                    } else {
                        write!(f, "/({})", denom.join("*"))?;
                    }
                }
                Ok(())
            }
            Node::Sum(xs) => {
                for (i, x) in xs.iter().enumerate() {
                    if i == 0 {
                        write!(f, "{x}")?;
                    } else if let Some(pos) = is_negative_term(x) {
                        write!(f, " - {pos}")?;
                    } else {
                        write!(f, " + {x}")?;
                    }
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(pairs: &[(Coord, f64)]) -> BTreeMap<Coord, f64> {
        pairs.iter().cloned().collect()
    }

    #[test]
    fn sum_collects_and_cancels() {
        let q = Expr::q(1);
        assert!((q.clone() - q.clone()).is_const_zero());
        let two_q = &q + &q;
        assert_eq!(two_q, Expr::int(2) * q.clone());
        assert_eq!(&two_q - &q, q);
    }

    #[test]
    fn product_collects_powers() {
        let q = Expr::q(1);
        assert_eq!(&q * &q, q.powi(2));
        assert_eq!(q.powi(2) * q.powi(-2), Expr::one());
        assert!((Expr::zero() * q.clone()).is_const_zero());
    }

    #[test]
    fn constant_folding_is_exact() {
        let e = Expr::rational(1, 3) + Expr::rational(1, 6);
        assert_eq!(e, Expr::rational(1, 2));
        let p = Expr::rational(2, 3) * Expr::rational(3, 4);
        assert_eq!(p, Expr::rational(1, 2));
        assert_eq!(Expr::int(2).powi(10), Expr::int(1024));
    }

    #[test]
    fn diff_linearity_examples() {
        // d(p1*qd1 + tau)/d qd1 = p1
        let e = Expr::p(1) * Expr::qd(1) + Expr::tau();
        assert_eq!(e.diff(Coord::Velocity(1)), Expr::p(1));
        // d(1/2 qd1^2 + q2*qd1)/d qd1 = qd1 + q2
        let l = Expr::rational(1, 2) * Expr::qd(1).powi(2) + Expr::q(2) * Expr::qd(1);
        assert_eq!(l.diff(Coord::Velocity(1)), Expr::qd(1) + Expr::q(2));
        // d(sin(t)*q1)/dt = cos(t)*q1
        let e = Expr::t().sin() * Expr::q(1);
        assert_eq!(e.diff(Coord::Time), Expr::t().cos() * Expr::q(1));
    }

    #[test]
    fn eval_basics() {
        let e = Expr::q(1) * Expr::p(1);
        let v = e
            .eval(&pt(&[(Coord::Position(1), 2.0), (Coord::Momentum(1), 3.0)]), &BTreeMap::new())
            .unwrap();
        assert_eq!(v, 6.0);
        let e = Expr::rational(1, 2) * Expr::qd(1).powi(2);
        let v = e.eval(&pt(&[(Coord::Velocity(1), 4.0)]), &BTreeMap::new()).unwrap();
        assert_eq!(v, 8.0);
        let v = Expr::t().sin().eval(&pt(&[(Coord::Time, 0.0)]), &BTreeMap::new()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn eval_reports_unbound_and_domain_errors() {
        let err = Expr::q(1).eval(&BTreeMap::new(), &BTreeMap::new()).unwrap_err();
        assert_eq!(err, EvalError::UnboundCoord("q1".into()));
        let err = Expr::q(1)
            .log()
            .eval(&pt(&[(Coord::Position(1), -1.0)]), &BTreeMap::new())
            .unwrap_err();
        match err {
            EvalError::Domain { subexpr, .. } => assert!(subexpr.contains("log(q1)")),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn zero_test_examples() {
        // structural cancellation short-circuits
        assert!((Expr::q(1) - Expr::q(1)).is_zero(16, 42));
        // sin^2 + cos^2 - 1 caught numerically
        let e = Expr::t().sin().powi(2) + Expr::t().cos().powi(2) - Expr::one();
        assert!(e.is_zero(16, 42));
        // independent coordinates are not identically equal
        assert!(!(Expr::p(1) - Expr::qd(1)).is_zero(16, 42));
    }

    #[test]
    fn zero_test_is_deterministic() {
        let e = Expr::t().sin() * Expr::q(1) - Expr::q(1) * Expr::t().sin() + Expr::param("eps");
        let a: Vec<bool> = (0..4).map(|_| e.is_zero(16, 7)).collect();
        let b: Vec<bool> = (0..4).map(|_| e.is_zero(16, 7)).collect();
        assert_eq!(a, b);
        assert!(!a[0]);
    }

    #[test]
    fn simplify_is_idempotent() {
        let e = (Expr::q(1) + Expr::int(2) * Expr::q(2)).powi(3)
            * (Expr::t().sin() + Expr::t().cos()).powi(2)
            + Expr::rational(3, 7) * Expr::tau();
        let s1 = e.simplify();
        let s2 = s1.simplify();
        assert_eq!(s1, s2);
        assert_eq!(e, s1);
    }

    #[test]
    fn subst_solves_through_chains() {
        // p1 -> qd1 + q2, qd1 -> 0 must cascade
        let mut map = BTreeMap::new();
        map.insert(Coord::Momentum(1), Expr::qd(1) + Expr::q(2));
        map.insert(Coord::Velocity(1), Expr::zero());
        assert_eq!(Expr::p(1).subst(&map), Expr::q(2));
    }

    #[test]
    fn rendering_shapes() {
        let e = Expr::rational(1, 2) * Expr::qd(1).powi(2) - Expr::rational(1, 2) * Expr::q(1).powi(2);
        assert_eq!(e.to_string(), "-1/2*(q1^2 - qd1^2)");
        // division renders through negative powers
        let e = Expr::q(1) / Expr::q(2);
        assert_eq!(e.to_string(), "q1/q2");
        let e = Expr::int(3) * Expr::q(1) / (Expr::int(2) * Expr::p(1));
        assert_eq!(e.to_string(), "3/2*q1/p1");
        let e = -(Expr::q(1).recip());
        assert_eq!(e.to_string(), "-1/q1");
        assert_eq!((Expr::q(1) + Expr::int(2)).powi(2).to_string(), "(2 + q1)^2");
    }

    #[test]
    fn mixed_partials_commute() {
        let l = Expr::rational(1, 2) * Expr::qd(1).powi(2)
            + Expr::q(2) * Expr::qd(1) * Expr::t().sin()
            + Expr::qd(2).powi(2) * Expr::q(1);
        for a in [Coord::Velocity(1), Coord::Velocity(2)] {
            for b in [Coord::Velocity(1), Coord::Velocity(2)] {
                let ab = l.diff(a).diff(b);
                let ba = l.diff(b).diff(a);
                assert!((ab - ba).is_zero(16, 42));
            }
        }
    }

    #[test]
    fn expressions_are_share_and_send_safe() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Expr>();
        assert_send_sync::<Coord>();
    }

    #[test]
    fn degree_estimates() {
        assert_eq!(Expr::q(1).degree(), 1);
        assert_eq!((Expr::q(1) * Expr::q(2)).degree(), 2);
        assert_eq!(Expr::q(1).powi(3).degree(), 3);
        assert_eq!(Expr::int(5).degree(), 0);
    }
}
