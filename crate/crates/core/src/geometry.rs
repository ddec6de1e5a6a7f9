//! Coordinate charts and differential forms on the mixed space and on J¹π.
//!
//! Forms are stored as coefficient arrays in the fixed coordinate order
//! (t, q¹..qⁿ, τ, p₁..pₙ, q̇¹..q̇ⁿ); every module shares this order. The sign
//! convention is `(dα ∧ dβ)[i][j]` = +1 on (i=α, j=β), so `ω_E[q^A][p_A]` =
//! `ω_E[t][τ]` = +1 matching the canonical coordinate formula. Wedge powers for
//! the rank identities are expanded symbolically through [`PolyForm`];
//! pointwise ranks use SVD with singular values below 1e-9 × σ_max counted
//! as zero.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::expr::{Coord, EvalError, Expr};
use crate::model::SystemSpec;

/// Relative SVD threshold for pointwise rank computation.
pub const RANK_SVD_TOL: f64 = 1e-9;

/// An ordered coordinate chart. All charts draw from the one global
/// coordinate alphabet, so expressions move between charts without renaming.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chart {
    coords: Vec<Coord>,
    n: u32,
}

impl Chart {
    /// Mixed-space chart (t, q^A, τ, p_A, q̇^A) of dimension 3n+2.
    pub fn mixed(n: u32) -> Arc<Chart> {
        let mut coords = vec![Coord::Time];
        coords.extend((1..=n).map(Coord::Position));
        coords.push(Coord::Tau);
        coords.extend((1..=n).map(Coord::Momentum));
        coords.extend((1..=n).map(Coord::Velocity));
        Arc::new(Chart { coords, n })
    }

    /// Jet-space chart (t, q^A, q̇^A) of dimension 2n+1.
    pub fn jet(n: u32) -> Arc<Chart> {
        let mut coords = vec![Coord::Time];
        coords.extend((1..=n).map(Coord::Position));
        coords.extend((1..=n).map(Coord::Velocity));
        Arc::new(Chart { coords, n })
    }

    /// Chart (t, q^A, τ, q̇^A) of the Legendre-constraint submanifold M_L,
    /// dimension 2n+2.
    pub fn graph(n: u32) -> Arc<Chart> {
        let mut coords = vec![Coord::Time];
        coords.extend((1..=n).map(Coord::Position));
        coords.push(Coord::Tau);
        coords.extend((1..=n).map(Coord::Velocity));
        Arc::new(Chart { coords, n })
    }

    /// Chart (t, q^A, p_A, q̇^A) of J¹π* ×_E J¹π, dimension 3n+1.
    pub fn dual(n: u32) -> Arc<Chart> {
        let mut coords = vec![Coord::Time];
        coords.extend((1..=n).map(Coord::Position));
        coords.extend((1..=n).map(Coord::Momentum));
        coords.extend((1..=n).map(Coord::Velocity));
        Arc::new(Chart { coords, n })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn fibre_dim(&self) -> u32 {
        self.n
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn coord(&self, i: usize) -> Coord {
        self.coords[i]
    }

    pub fn index_of(&self, c: Coord) -> Option<usize> {
        self.coords.iter().position(|&x| x == c)
    }

    pub fn names(&self) -> Vec<String> {
        self.coords.iter().map(|c| c.name()).collect()
    }

    /// Bind a flat coordinate vector (chart order) into an evaluation map.
    pub fn point_map(&self, xs: &[f64]) -> BTreeMap<Coord, f64> {
        assert_eq!(xs.len(), self.dim(), "point length must match chart dimension");
        self.coords.iter().copied().zip(xs.iter().copied()).collect()
    }
}

/// A 1-form as a coefficient vector over a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct OneForm {
    pub chart: Arc<Chart>,
    pub coeffs: Vec<Expr>,
}

impl OneForm {
    pub fn zero(chart: Arc<Chart>) -> OneForm {
        let coeffs = vec![Expr::zero(); chart.dim()];
        OneForm { chart, coeffs }
    }

    /// The basis 1-form dx^c.
    pub fn basis(chart: Arc<Chart>, c: Coord) -> OneForm {
        let mut f = OneForm::zero(chart);
        let i = f.chart.index_of(c).expect("coordinate not in chart");
        f.coeffs[i] = Expr::one();
        f
    }

    /// Coefficient vector of df.
    pub fn differential(chart: Arc<Chart>, f: &Expr) -> OneForm {
        let coeffs = chart.coords().iter().map(|&c| f.diff(c)).collect();
        OneForm { chart, coeffs }
    }

    pub fn eval(&self, point: &BTreeMap<Coord, f64>, params: &BTreeMap<String, f64>) -> Result<Vec<f64>, EvalError> {
        self.coeffs.iter().map(|e| e.eval(point, params)).collect()
    }
}

/// A 2-form as an antisymmetric coefficient matrix over a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoForm {
    pub chart: Arc<Chart>,
    pub coeffs: Vec<Vec<Expr>>,
}

impl TwoForm {
    pub fn zero(chart: Arc<Chart>) -> TwoForm {
        let d = chart.dim();
        TwoForm { chart, coeffs: vec![vec![Expr::zero(); d]; d] }
    }

    /// Add `e · dx^i ∧ dx^j`, keeping the matrix exactly antisymmetric.
    pub fn add_pair(&mut self, i: usize, j: usize, e: Expr) {
        assert_ne!(i, j);
        self.coeffs[i][j] = &self.coeffs[i][j] + &e;
        self.coeffs[j][i] = &self.coeffs[j][i] - &e;
    }

    pub fn add(&self, other: &TwoForm) -> TwoForm {
        assert_eq!(self.chart, other.chart);
        let d = self.chart.dim();
        let mut out = TwoForm::zero(self.chart.clone());
        for i in 0..d {
            for j in 0..d {
                out.coeffs[i][j] = &self.coeffs[i][j] + &other.coeffs[i][j];
            }
        }
        out
    }

    pub fn sub(&self, other: &TwoForm) -> TwoForm {
        assert_eq!(self.chart, other.chart);
        let d = self.chart.dim();
        let mut out = TwoForm::zero(self.chart.clone());
        for i in 0..d {
            for j in 0..d {
                out.coeffs[i][j] = &self.coeffs[i][j] - &other.coeffs[i][j];
            }
        }
        out
    }

    /// dα ∧ β for 1-forms, expanded onto the coefficient matrix:
    /// `(α ∧ β)[i][j]` = α_i β_j − α_j β_i.
    pub fn wedge_one_forms(alpha: &OneForm, beta: &OneForm) -> TwoForm {
        assert_eq!(alpha.chart, beta.chart);
        let d = alpha.chart.dim();
        let mut out = TwoForm::zero(alpha.chart.clone());
        for i in 0..d {
            for j in 0..d {
                out.coeffs[i][j] =
                    &(&alpha.coeffs[i] * &beta.coeffs[j]) - &(&alpha.coeffs[j] * &beta.coeffs[i]);
            }
        }
        out
    }

    /// Interior product with the coordinate direction ∂/∂x^k: the k-th row.
    pub fn interior_basis(&self, c: Coord) -> OneForm {
        let k = self.chart.index_of(c).expect("coordinate not in chart");
        OneForm { chart: self.chart.clone(), coeffs: self.coeffs[k].clone() }
    }

    /// Substitute coordinates in every coefficient.
    pub fn subst(&self, map: &BTreeMap<Coord, Expr>) -> TwoForm {
        let d = self.chart.dim();
        let mut out = TwoForm::zero(self.chart.clone());
        for i in 0..d {
            for j in 0..d {
                out.coeffs[i][j] = self.coeffs[i][j].subst(map);
            }
        }
        out
    }

    pub fn eval_matrix(
        &self,
        point: &BTreeMap<Coord, f64>,
        params: &BTreeMap<String, f64>,
    ) -> Result<DMatrix<f64>, EvalError> {
        let d = self.chart.dim();
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = self.coeffs[i][j].eval(point, params)?;
            }
        }
        Ok(m)
    }

    /// Pointwise rank via singular-value thresholding; antisymmetric matrices
    /// have even rank, so a stray odd count is floored to even.
    pub fn rank_at(
        &self,
        point: &BTreeMap<Coord, f64>,
        params: &BTreeMap<String, f64>,
    ) -> Result<usize, EvalError> {
        let m = self.eval_matrix(point, params)?;
        Ok(matrix_rank(&m, RANK_SVD_TOL))
    }
}

/// Rank of an arbitrary real matrix by SVD thresholding.
pub fn matrix_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Rank of an antisymmetric matrix, floored to even parity.
pub fn skew_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let r = matrix_rank(m, rel_tol);
    r - (r % 2)
}

/// Alternating form of arbitrary degree, for symbolic wedge-power identities.
#[derive(Debug, Clone)]
pub struct PolyForm {
    pub chart: Arc<Chart>,
    pub degree: usize,
    /// strictly increasing index tuples → coefficient
    pub terms: BTreeMap<Vec<usize>, Expr>,
}

impl PolyForm {
    pub fn constant_one(chart: Arc<Chart>) -> PolyForm {
        let mut terms = BTreeMap::new();
        terms.insert(Vec::new(), Expr::one());
        PolyForm { chart, degree: 0, terms }
    }

    pub fn from_one_form(f: &OneForm) -> PolyForm {
        let mut terms = BTreeMap::new();
        for (i, c) in f.coeffs.iter().enumerate() {
            if !c.is_const_zero() {
                terms.insert(vec![i], c.clone());
            }
        }
        PolyForm { chart: f.chart.clone(), degree: 1, terms }
    }

    pub fn from_two_form(f: &TwoForm) -> PolyForm {
        let mut terms = BTreeMap::new();
        let d = f.chart.dim();
        for i in 0..d {
            for j in (i + 1)..d {
                if !f.coeffs[i][j].is_const_zero() {
                    terms.insert(vec![i, j], f.coeffs[i][j].clone());
                }
            }
        }
        PolyForm { chart: f.chart.clone(), degree: 2, terms }
    }

    pub fn wedge(&self, other: &PolyForm) -> PolyForm {
        assert_eq!(self.chart, other.chart);
        let degree = self.degree + other.degree;
        let mut terms: BTreeMap<Vec<usize>, Expr> = BTreeMap::new();
        if degree > self.chart.dim() {
            return PolyForm { chart: self.chart.clone(), degree, terms };
        }
        for (ia, a) in &self.terms {
            for (ib, b) in &other.terms {
                if let Some((idx, sign)) = merge_indices(ia, ib) {
                    let mut c = a * b;
                    if sign < 0 {
                        c = -c;
                    }
                    let slot = terms.entry(idx).or_insert_with(Expr::zero);
                    *slot = &*slot + &c;
                }
            }
        }
        terms.retain(|_, c| !c.is_const_zero());
        PolyForm { chart: self.chart.clone(), degree, terms }
    }

    /// k-th wedge power (k ≥ 0).
    pub fn wedge_power(&self, k: usize) -> PolyForm {
        let mut acc = PolyForm::constant_one(self.chart.clone());
        for _ in 0..k {
            acc = acc.wedge(self);
        }
        acc
    }

    /// Exterior derivative.
    pub fn d(&self) -> PolyForm {
        let dim = self.chart.dim();
        let mut terms: BTreeMap<Vec<usize>, Expr> = BTreeMap::new();
        for (idx, c) in &self.terms {
            for m in 0..dim {
                if idx.contains(&m) {
                    continue;
                }
                let dc = c.diff(self.chart.coord(m));
                if dc.is_const_zero() {
                    continue;
                }
                let mut new_idx = idx.clone();
                let pos = new_idx.partition_point(|&x| x < m);
                new_idx.insert(pos, m);
                let signed = if pos % 2 == 0 { dc } else { -dc };
                let slot = terms.entry(new_idx).or_insert_with(Expr::zero);
                *slot = &*slot + &signed;
            }
        }
        terms.retain(|_, c| !c.is_const_zero());
        PolyForm { chart: self.chart.clone(), degree: self.degree + 1, terms }
    }

    /// True iff every coefficient passes the probabilistic zero test.
    pub fn is_zero_form(&self, trials: usize, seed: u64) -> bool {
        self.terms.values().all(|c| c.is_zero(trials, seed))
    }

    /// True iff some coefficient fails the probabilistic zero test.
    pub fn is_nonzero_form(&self, trials: usize, seed: u64) -> bool {
        self.terms.values().any(|c| !c.is_zero(trials, seed))
    }
}

/// Merge two strictly increasing index tuples; `None` when they intersect,
/// otherwise the merged tuple and the permutation sign.
fn merge_indices(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, i32)> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let mut inversions = 0usize;
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] == b[j] {
            return None;
        }
        if a[i] < b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            // b[j] jumps over the remaining a-elements
            inversions += a.len() - i;
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    let sign = if inversions.is_multiple_of(2) { 1 } else { -1 };
    Some((out, sign))
}

/// A smooth map between charts, given per-target-coordinate component
/// expressions over the source chart. Pullbacks of forms contract with its
/// Jacobian.
#[derive(Debug, Clone)]
pub struct ChartMap {
    pub source: Arc<Chart>,
    pub target: Arc<Chart>,
    pub components: Vec<Expr>,
}

impl ChartMap {
    pub fn new(source: Arc<Chart>, target: Arc<Chart>, components: Vec<Expr>) -> ChartMap {
        assert_eq!(components.len(), target.dim());
        ChartMap { source, target, components }
    }

    /// The projection pr₂: M₁ → J¹π (drop τ and p).
    pub fn pr2(n: u32) -> ChartMap {
        let source = Chart::mixed(n);
        let target = Chart::jet(n);
        let components = target.coords().iter().map(|&c| Expr::coord(c)).collect();
        ChartMap::new(source, target, components)
    }

    /// Substitution map sending each target coordinate to its component.
    fn subst_map(&self) -> BTreeMap<Coord, Expr> {
        self.target
            .coords()
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| {
                let comp = &self.components[i];
                if *comp == Expr::coord(c) {
                    None
                } else {
                    Some((c, comp.clone()))
                }
            })
            .collect()
    }

    /// Pull a 2-form on the target chart back to the source chart:
    /// `(φ*ω)[a][b]` = Σ_ij (ω_ij ∘ φ) ∂φ^i/∂x^a ∂φ^j/∂x^b.
    pub fn pullback_two_form(&self, form: &TwoForm) -> TwoForm {
        assert_eq!(form.chart, self.target);
        let subst = self.subst_map();
        let sdim = self.source.dim();
        let tdim = self.target.dim();
        // Jacobian J[i][a] = ∂φ^i/∂x^a
        let jac: Vec<Vec<Expr>> = self
            .components
            .iter()
            .map(|comp| self.source.coords().iter().map(|&c| comp.diff(c)).collect())
            .collect();
        let mut out = TwoForm::zero(self.source.clone());
        for i in 0..tdim {
            for j in 0..tdim {
                let cij = form.coeffs[i][j].subst(&subst);
                if cij.is_const_zero() {
                    continue;
                }
                for a in 0..sdim {
                    if jac[i][a].is_const_zero() {
                        continue;
                    }
                    for b in 0..sdim {
                        if jac[j][b].is_const_zero() {
                            continue;
                        }
                        let add = &(&cij * &jac[i][a]) * &jac[j][b];
                        out.coeffs[a][b] = &out.coeffs[a][b] + &add;
                    }
                }
            }
        }
        out
    }

    /// Push a source point forward to target coordinates.
    pub fn apply_point(
        &self,
        point: &BTreeMap<Coord, f64>,
        params: &BTreeMap<String, f64>,
    ) -> Result<Vec<f64>, EvalError> {
        self.components.iter().map(|c| c.eval(point, params)).collect()
    }
}

/// The Hamiltonian function H = p_A q̇^A + τ − L on the mixed space, with its
/// cached q̇- and τ-partials.
#[derive(Debug, Clone)]
pub struct HamiltonianFn {
    pub h: Expr,
    pub dh_dqd: Vec<Expr>,
    pub dh_dtau: Expr,
}

/// ω = pr₁*ω_E on the mixed chart: unit blocks pairing (q^A, p_A) and (t, τ);
/// the q̇^A rows and columns are identically zero.
pub fn build_omega(spec: &SystemSpec) -> TwoForm {
    let chart = Chart::mixed(spec.n);
    let mut omega = TwoForm::zero(chart.clone());
    let it = chart.index_of(Coord::Time).unwrap();
    let itau = chart.index_of(Coord::Tau).unwrap();
    omega.add_pair(it, itau, Expr::one());
    for a in 1..=spec.n {
        let iq = chart.index_of(Coord::Position(a)).unwrap();
        let ip = chart.index_of(Coord::Momentum(a)).unwrap();
        omega.add_pair(iq, ip, Expr::one());
    }
    omega
}

/// η = (π ∘ pr)*(dt) = dt on the mixed chart.
pub fn build_eta(n: u32) -> OneForm {
    OneForm::basis(Chart::mixed(n), Coord::Time)
}

/// η̃ = π₁*(dt) = dt on the jet chart.
pub fn build_eta_jet(n: u32) -> OneForm {
    OneForm::basis(Chart::jet(n), Coord::Time)
}

pub fn build_hamiltonian(spec: &SystemSpec) -> HamiltonianFn {
    let mut h = Expr::tau();
    for a in 1..=spec.n {
        h = h + Expr::p(a) * Expr::qd(a);
    }
    h = h - spec.lagrangian.clone();
    let dh_dqd = (1..=spec.n).map(|a| h.diff(Coord::Velocity(a))).collect();
    let dh_dtau = h.diff(Coord::Tau);
    HamiltonianFn { h, dh_dqd, dh_dtau }
}

/// ω_H = ω + dH ∧ η on the mixed chart.
pub fn build_omega_h(spec: &SystemSpec) -> TwoForm {
    let omega = build_omega(spec);
    let ham = build_hamiltonian(spec);
    let chart = omega.chart.clone();
    let dh = OneForm::differential(chart.clone(), &ham.h);
    let eta = build_eta(spec.n);
    omega.add(&TwoForm::wedge_one_forms(&dh, &eta))
}

/// Poincaré–Cartan forms on J¹π:
/// Θ_L = (L − q̇^A ∂L/∂q̇^A) dt + (∂L/∂q̇^A) dq^A and ω_L = −dΘ_L.
pub fn build_poincare_cartan(spec: &SystemSpec) -> (OneForm, TwoForm) {
    let chart = Chart::jet(spec.n);
    let mut theta = OneForm::zero(chart.clone());
    let mut energy_part = spec.lagrangian.clone();
    for a in 1..=spec.n {
        let dl = spec.lagrangian.diff(Coord::Velocity(a));
        energy_part = energy_part - Expr::qd(a) * dl.clone();
        let iq = chart.index_of(Coord::Position(a)).unwrap();
        theta.coeffs[iq] = dl;
    }
    let it = chart.index_of(Coord::Time).unwrap();
    theta.coeffs[it] = energy_part;

    // ω_L = −dΘ_L: (dθ)[i][j] = ∂θ_j/∂x^i − ∂θ_i/∂x^j.
    let d = chart.dim();
    let mut omega_l = TwoForm::zero(chart.clone());
    for i in 0..d {
        for j in 0..d {
            let dtheta_ij =
                theta.coeffs[j].diff(chart.coord(i)) - theta.coeffs[i].diff(chart.coord(j));
            omega_l.coeffs[i][j] = -dtheta_ij;
        }
    }
    (theta, omega_l)
}

/// pr₂*ω_L expressed on the mixed chart (τ and p rows zero).
pub fn pullback_omega_l(spec: &SystemSpec) -> TwoForm {
    let (_, omega_l) = build_poincare_cartan(spec);
    ChartMap::pr2(spec.n).pullback_two_form(&omega_l)
}

/// Embedding ι of the M_L chart (t, q, τ, q̇) into the mixed chart with
/// p_A = ∂L/∂q̇^A. Restricting forms to T M_L is pullback along this map.
pub fn graph_restriction_map(spec: &SystemSpec) -> ChartMap {
    let source = Chart::graph(spec.n);
    let target = Chart::mixed(spec.n);
    let components = target
        .coords()
        .iter()
        .map(|&c| match c {
            Coord::Momentum(a) => spec.lagrangian.diff(Coord::Velocity(a)),
            other => Expr::coord(other),
        })
        .collect();
    ChartMap::new(source, target, components)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_system;

    const T: usize = 16;
    const S: u64 = 42;

    fn oscillator() -> SystemSpec {
        parse_system("dim 1; L = 1/2*qd1^2 - 1/2*q1^2;").unwrap()
    }

    fn free_particle() -> SystemSpec {
        parse_system("dim 1; L = 1/2*qd1^2;").unwrap()
    }

    fn singular2() -> SystemSpec {
        parse_system("dim 2; L = 1/2*qd1^2 + q2*qd1;").unwrap()
    }

    #[test]
    fn omega_unit_blocks() {
        let spec = oscillator();
        let omega = build_omega(&spec);
        let ch = omega.chart.clone();
        let (it, itau) = (ch.index_of(Coord::Time).unwrap(), ch.index_of(Coord::Tau).unwrap());
        let (iq, ip) = (
            ch.index_of(Coord::Position(1)).unwrap(),
            ch.index_of(Coord::Momentum(1)).unwrap(),
        );
        assert_eq!(omega.coeffs[iq][ip], Expr::one());
        assert_eq!(omega.coeffs[it][itau], Expr::one());
        assert_eq!(omega.coeffs[ip][iq], Expr::int(-1));
        // velocity rows identically zero
        let iqd = ch.index_of(Coord::Velocity(1)).unwrap();
        assert!(omega.coeffs[iqd].iter().all(|e| e.is_const_zero()));
        assert!((0..ch.dim()).all(|i| omega.coeffs[i][iqd].is_const_zero()));
    }

    #[test]
    fn omega_rank_is_2n_plus_2_everywhere() {
        let spec = singular2();
        let omega = build_omega(&spec);
        let ch = omega.chart.clone();
        assert_eq!(ch.dim(), 8);
        let point = ch.point_map(&[0.3, -1.2, 0.7, 0.1, 0.9, -0.4, 1.5, 2.0]);
        assert_eq!(omega.rank_at(&point, &BTreeMap::new()).unwrap(), 6);

        let omega = build_omega(&oscillator());
        let ch = omega.chart.clone();
        let point = ch.point_map(&[0.3, -1.2, 0.7, 0.1, 0.9]);
        assert_eq!(omega.rank_at(&point, &BTreeMap::new()).unwrap(), 4);
    }

    #[test]
    fn omega_is_closed() {
        let spec = singular2();
        let omega = PolyForm::from_two_form(&build_omega(&spec));
        assert!(omega.d().is_zero_form(T, S));
    }

    #[test]
    fn hamiltonian_invariants() {
        for spec in [oscillator(), free_particle(), singular2()] {
            let ham = build_hamiltonian(&spec);
            assert_eq!(ham.dh_dtau, Expr::one(), "dH/dtau must be structurally 1");
            for a in 1..=spec.n {
                let expected = Expr::p(a) - spec.lagrangian.diff(Coord::Velocity(a));
                assert!((ham.dh_dqd[(a - 1) as usize].clone() - expected).is_zero(T, S));
            }
        }
        // oscillator: H = p1*qd1 + tau - 1/2*qd1^2 + 1/2*q1^2
        let ham = build_hamiltonian(&oscillator());
        let expected = Expr::p(1) * Expr::qd(1) + Expr::tau()
            - Expr::rational(1, 2) * Expr::qd(1).powi(2)
            + Expr::rational(1, 2) * Expr::q(1).powi(2);
        assert_eq!(ham.h, expected);
    }

    #[test]
    fn omega_h_coefficients() {
        let spec = free_particle();
        let wh = build_omega_h(&spec);
        let ch = wh.chart.clone();
        let it = ch.index_of(Coord::Time).unwrap();
        let iqd = ch.index_of(Coord::Velocity(1)).unwrap();
        let (iq, ip) = (
            ch.index_of(Coord::Position(1)).unwrap(),
            ch.index_of(Coord::Momentum(1)).unwrap(),
        );
        // dH ∧ η adds (∂H/∂qd) dqd ∧ dt; the [qd][t] entry is p1 - qd1 and
        // its antisymmetric partner [t][qd] is qd1 - p1.
        assert_eq!(wh.coeffs[iqd][it], Expr::p(1) - Expr::qd(1));
        assert_eq!(wh.coeffs[it][iqd], Expr::qd(1) - Expr::p(1));
        // the dq ∧ dp block is untouched
        assert_eq!(wh.coeffs[iq][ip], Expr::one());
        // the tau row vanishes: d/dtau belongs to ker ω_H
        let itau = ch.index_of(Coord::Tau).unwrap();
        assert!(wh.coeffs[itau].iter().all(|e| e.is_const_zero()));
        // off t, the qd row vanishes; on M_L even the [qd][t] entry does
        for j in 0..ch.dim() {
            if j != it {
                assert!(wh.coeffs[iqd][j].is_const_zero());
            }
        }
        let mut ml = BTreeMap::new();
        ml.insert(Coord::Momentum(1), spec.lagrangian.diff(Coord::Velocity(1)));
        assert!(wh.coeffs[iqd][it].subst(&ml).is_zero(T, S));
    }

    #[test]
    fn omega_h_is_closed() {
        let wh = PolyForm::from_two_form(&build_omega_h(&singular2()));
        assert!(wh.d().is_zero_form(T, S));
    }

    #[test]
    fn omega_h_rank_drops_on_ml() {
        let spec = oscillator();
        let wh = build_omega_h(&spec);
        let ch = wh.chart.clone();
        // off M_L: p1 ≠ qd1 → rank 4 = 2(n+1)
        let point = ch.point_map(&[0.0, 1.0, 0.5, 2.0, -1.0]);
        assert_eq!(wh.rank_at(&point, &BTreeMap::new()).unwrap(), 4);
        // on M_L: p1 = qd1 → rank 2 = 2n
        let point = ch.point_map(&[0.0, 1.0, 0.5, -1.0, -1.0]);
        assert_eq!(wh.rank_at(&point, &BTreeMap::new()).unwrap(), 2);
    }

    #[test]
    fn poincare_cartan_oscillator() {
        let spec = oscillator();
        let (theta, omega_l) = build_poincare_cartan(&spec);
        let ch = theta.chart.clone();
        let it = ch.index_of(Coord::Time).unwrap();
        let iq = ch.index_of(Coord::Position(1)).unwrap();
        let expected_t = -(Expr::rational(1, 2) * Expr::qd(1).powi(2))
            - Expr::rational(1, 2) * Expr::q(1).powi(2);
        assert!((theta.coeffs[it].clone() - expected_t).is_zero(T, S));
        assert_eq!(theta.coeffs[iq], Expr::qd(1));
        // ω_L = −dΘ_L coefficientwise
        let d_theta = PolyForm::from_one_form(&theta).d();
        let wl = PolyForm::from_two_form(&omega_l);
        for (idx, c) in &wl.terms {
            let neg_d = d_theta.terms.get(idx).cloned().unwrap_or_else(Expr::zero);
            assert!((c.clone() + neg_d).is_zero(T, S));
        }
    }

    #[test]
    fn poincare_cartan_free_particle() {
        // ω_L = dq ∧ dqd − qd dt ∧ dqd, nothing else
        let spec = free_particle();
        let (_, omega_l) = build_poincare_cartan(&spec);
        let ch = omega_l.chart.clone();
        let (it, iq, iqd) = (
            ch.index_of(Coord::Time).unwrap(),
            ch.index_of(Coord::Position(1)).unwrap(),
            ch.index_of(Coord::Velocity(1)).unwrap(),
        );
        assert_eq!(omega_l.coeffs[iq][iqd], Expr::one());
        assert_eq!(omega_l.coeffs[it][iqd], -Expr::qd(1));
        assert!(omega_l.coeffs[it][iq].is_const_zero());
    }

    #[test]
    fn pullback_omega_l_has_zero_tau_and_p_rows() {
        let spec = singular2();
        let pulled = pullback_omega_l(&spec);
        let ch = pulled.chart.clone();
        let itau = ch.index_of(Coord::Tau).unwrap();
        assert!(pulled.coeffs[itau].iter().all(|e| e.is_const_zero()));
        for a in 1..=2 {
            let ip = ch.index_of(Coord::Momentum(a)).unwrap();
            assert!(pulled.coeffs[ip].iter().all(|e| e.is_const_zero()));
        }
    }

    #[test]
    fn pullback_identity_on_graph_chart() {
        // ι*(pr₂*ω_L) = ι*(ω_H): the projected form agrees with ω_H on T M_L.
        for spec in [oscillator(), free_particle(), singular2()] {
            let restriction = graph_restriction_map(&spec);
            let lhs = restriction.pullback_two_form(&pullback_omega_l(&spec));
            let rhs = restriction.pullback_two_form(&build_omega_h(&spec));
            let diff = lhs.sub(&rhs);
            for row in &diff.coeffs {
                for c in row {
                    assert!(c.is_zero(T, S), "nonvanishing coefficient {c}");
                }
            }
        }
    }

    #[test]
    fn wedge_identities_oscillator() {
        // n = 1: ω_H ∧ η ≠ 0, ω_H² ∧ η = 0, ω_H³ = 0
        let spec = oscillator();
        let wh = PolyForm::from_two_form(&build_omega_h(&spec));
        let eta = PolyForm::from_one_form(&build_eta(1));
        assert!(wh.wedge(&eta).is_nonzero_form(T, S));
        assert!(wh.wedge_power(2).wedge(&eta).is_zero_form(T, S));
        assert!(wh.wedge_power(3).is_zero_form(T, S));
    }

    #[test]
    fn built_two_forms_are_antisymmetric() {
        let spec = singular2();
        for form in [build_omega(&spec), build_omega_h(&spec), pullback_omega_l(&spec)] {
            let d = form.chart.dim();
            for i in 0..d {
                for j in 0..d {
                    let s = form.coeffs[i][j].clone() + form.coeffs[j][i].clone();
                    assert!(s.is_zero(T, S), "entry ({i},{j}) breaks antisymmetry: {s}");
                }
            }
        }
        let restricted = graph_restriction_map(&spec).pullback_two_form(&build_omega_h(&spec));
        let d = restricted.chart.dim();
        for i in 0..d {
            for j in 0..d {
                let s = restricted.coeffs[i][j].clone() + restricted.coeffs[j][i].clone();
                assert!(s.is_zero(T, S));
            }
        }
    }

    #[test]
    fn wedge_sign_convention() {
        // (dq ∧ dp) ∧ (dt ∧ dtau) = (dt ∧ dtau) ∧ (dq ∧ dp): even permutation
        let spec = oscillator();
        let omega = PolyForm::from_two_form(&build_omega(&spec));
        let sq = omega.wedge(&omega);
        // ω² = 2 dt∧dq∧dτ∧dp reordered to increasing indices (t,q,τ,p) = (0,1,2,3)
        assert_eq!(sq.terms.len(), 1);
        let c = sq.terms.get(&vec![0, 1, 2, 3]).unwrap();
        // dt∧dτ∧dq∧dp: moving dq left over dτ flips one sign → coefficient -2
        assert_eq!(*c, Expr::int(-2));
    }
}
