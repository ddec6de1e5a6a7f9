//! Assembly of the vector field Z solving i_Zω_H = 0, i_Zη = 1 on the final
//! constraint level, and its projections to J¹π and J¹π* ×_E J¹π.
//!
//! The η equation forces Z_t = 1 and the ω_H equation forces Z_{q^A} = q̇^A
//! (the second-order form of the field) and Z_{p_A} = ∂L/∂q^A. The remaining
//! components (Z_q̇, Z_τ) are solved from the tangency conditions on the
//! chain's cumulative constraints, newest level first; directions in the
//! Hessian kernel stay undetermined and are kept as named parameters u₁, u₂,
//! … rather than silently zeroed. Tangency rows of earlier levels that the
//! later pins make unsatisfiable are the second-order consistency residuals;
//! they are reported on the final level, not imposed as new constraints, and
//! integral curves satisfy the Euler-Lagrange equations exactly on their
//! zero set.
//!
//! In raw mode Z_τ defaults to the energy-balance expression
//! Z(L − q̇^A ∂L/∂q̇^A) even off graph_L, so trajectories carry a meaningful
//! energy coordinate; graph-refined mode (regular Lagrangians) imposes
//! tangency to graph_L, which fixes Z_τ by the same formula and leaves no
//! free parameters.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::constraints::{
    normalize_constraint, resolved_substitutions, solve_rows, tangency_row, ConstraintChain,
    LinRow,
};
use crate::expr::{Coord, Expr, ZeroCfg};
use crate::geometry::{Chart, OneForm, TwoForm};
use crate::legendre::{hessian, legendre_graph, sym_inverse, Classification};
use crate::model::SystemSpec;

/// Symbolic Hessian inversion is used up to this fibre dimension; beyond it
/// the velocity components are solved numerically per point.
pub const SYMBOLIC_INVERSE_MAX_DIM: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveMode {
    Raw,
    GraphRefined,
}

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("constraint chain did not stabilize; no consistent dynamics")]
    NotStabilized,
    #[error("projection unavailable for singular Lagrangian")]
    SingularProjection,
    #[error("graph-refined mode requires a regular Lagrangian")]
    GraphRefinedSingular,
    #[error("final constraint set is empty; no dynamics")]
    EmptyFinal,
}

/// How the velocity components Z_q̇ are produced.
#[derive(Debug, Clone)]
pub enum VelocityLaw {
    /// Closed-form expressions (symbolic Hessian inverse or tangency solve).
    Closed(Vec<Expr>),
    /// Evaluate W and b at the point and solve W · Z_q̇ = b numerically;
    /// Z_τ = Z(G) with G = L − q̇·∂L/∂q̇ follows from the solved velocities
    /// through the stored partials of G.
    HessianSolve { w: Vec<Vec<Expr>>, b: Vec<Expr>, g_t: Expr, g_q: Vec<Expr>, g_qd: Vec<Expr> },
}

#[derive(Debug, Clone)]
pub struct VectorFieldSpec {
    pub n: u32,
    pub mode: SolveMode,
    /// Component expressions for every mixed-chart coordinate direction.
    /// Velocity components are present only when the law is closed-form.
    pub components: BTreeMap<Coord, Expr>,
    pub velocity_law: VelocityLaw,
    /// Undetermined components kept as named symbols (singular case).
    pub free_params: Vec<String>,
    /// Second-order consistency residuals on the final level (see module docs).
    pub sode_residuals: Vec<Expr>,
    /// Cumulative constraints of the domain level (graph-refined mode adds
    /// the τ − (L − q̇·∂L/∂q̇) constraint).
    pub domain_constraints: Vec<Expr>,
    pub domain_level: usize,
}

impl VectorFieldSpec {
    /// The derivative Z(f) of a function along the field. Velocity components
    /// must be closed-form.
    pub fn derive(&self, f: &Expr, chart: &Chart) -> Expr {
        let mut acc = Expr::zero();
        for &c in chart.coords() {
            let df = f.diff(c);
            if df.is_const_zero() {
                continue;
            }
            let zc = self.components.get(&c).cloned().unwrap_or_else(Expr::zero);
            acc = acc + zc * df;
        }
        acc
    }

    pub fn report(&self) -> VectorFieldReport {
        VectorFieldReport {
            mode: self.mode,
            components: self
                .components
                .iter()
                .map(|(c, e)| (c.name(), e.to_string()))
                .collect(),
            numeric_velocity_solve: matches!(self.velocity_law, VelocityLaw::HessianSolve { .. }),
            free_params: self.free_params.clone(),
            sode_residuals: self.sode_residuals.iter().map(|e| e.to_string()).collect(),
            domain_level: self.domain_level,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VectorFieldReport {
    pub mode: SolveMode,
    pub components: BTreeMap<String, String>,
    pub numeric_velocity_solve: bool,
    pub free_params: Vec<String>,
    pub sode_residuals: Vec<String>,
    pub domain_level: usize,
}

/// Right-hand side of the tangency system for the primary constraints:
/// b_A = ∂L/∂q^A − ∂²L/∂t∂q̇^A − q̇^B ∂²L/∂q^B∂q̇^A.
pub fn hessian_rhs(spec: &SystemSpec) -> Vec<Expr> {
    (1..=spec.n)
        .map(|a| {
            let dl_dqd = spec.lagrangian.diff(Coord::Velocity(a));
            let mut b = spec.lagrangian.diff(Coord::Position(a)) - dl_dqd.diff(Coord::Time);
            for bb in 1..=spec.n {
                b = b - Expr::qd(bb) * dl_dqd.diff(Coord::Position(bb));
            }
            b
        })
        .collect()
}

/// Fresh free-parameter names u1, u2, … avoiding declared model parameters.
fn free_param_names(spec: &SystemSpec, count: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut k = 1usize;
    while out.len() < count {
        let name = format!("u{k}");
        if !spec.params.contains_key(&name) {
            out.push(name);
        }
        k += 1;
    }
    out
}

/// Solve for Z on the chain's final level.
pub fn solve_z(
    spec: &SystemSpec,
    chain: &ConstraintChain,
    mode: SolveMode,
    cfg: &ZeroCfg,
) -> Result<VectorFieldSpec, DynamicsError> {
    match chain.status {
        crate::constraints::ChainStatus::Stabilized(_) => {}
        crate::constraints::ChainStatus::EmptyFinal => return Err(DynamicsError::EmptyFinal),
        crate::constraints::ChainStatus::MaxIterationsExceeded => {
            return Err(DynamicsError::NotStabilized)
        }
    }
    let regular = chain.regularity.classification == Classification::Regular;
    if mode == SolveMode::GraphRefined && !regular {
        return Err(DynamicsError::GraphRefinedSingular);
    }

    let n = spec.n as usize;
    let mut components: BTreeMap<Coord, Expr> = crate::constraints::forced_components(spec);
    let graph = legendre_graph(spec);
    let energy_neg = graph.tau.clone(); // L − q̇·∂L/∂q̇ = −E_L

    if mode == SolveMode::GraphRefined {
        let w = hessian(spec);
        let b = hessian_rhs(spec);
        let velocity_law = if spec.n <= SYMBOLIC_INVERSE_MAX_DIM {
            let winv = sym_inverse(&w).expect("regular Lagrangian has invertible Hessian");
            let zqd: Vec<Expr> = (0..n)
                .map(|a| {
                    let mut acc = Expr::zero();
                    for (bcol, bexp) in b.iter().enumerate() {
                        acc = acc + winv[a][bcol].clone() * bexp.clone();
                    }
                    acc.simplify()
                })
                .collect();
            VelocityLaw::Closed(zqd)
        } else {
            VelocityLaw::HessianSolve {
                w,
                b,
                g_t: energy_neg.diff(Coord::Time),
                g_q: (1..=spec.n).map(|a| energy_neg.diff(Coord::Position(a))).collect(),
                g_qd: (1..=spec.n).map(|a| energy_neg.diff(Coord::Velocity(a))).collect(),
            }
        };
        if let VelocityLaw::Closed(zqd) = &velocity_law {
            for (i, z) in zqd.iter().enumerate() {
                components.insert(Coord::Velocity(i as u32 + 1), z.clone());
            }
            // energy balance: Z_τ = Z(L − q̇^A ∂L/∂q̇^A)
            let mut ztau = energy_neg.diff(Coord::Time);
            for a in 1..=spec.n {
                ztau = ztau + Expr::qd(a) * energy_neg.diff(Coord::Position(a));
                ztau = ztau + zqd[(a - 1) as usize].clone() * energy_neg.diff(Coord::Velocity(a));
            }
            components.insert(Coord::Tau, ztau.simplify());
        }
        let mut domain = chain.cumulative();
        domain.push((Expr::tau() - energy_neg).simplify());
        return Ok(VectorFieldSpec {
            n: spec.n,
            mode,
            components,
            velocity_law,
            free_params: Vec::new(),
            sode_residuals: Vec::new(),
            domain_constraints: domain,
            domain_level: chain.final_level().level,
        });
    }

    // raw mode: tangency rows for every cumulative constraint, newest level
    // first so later pins take priority; leftovers become SODE residuals
    let subs = resolved_substitutions(&chain.substitutions);
    let mut rows: Vec<LinRow> = Vec::new();
    for level in chain.levels.iter().rev() {
        for psi in &level.constraints {
            let (coeffs, known) = tangency_row(spec, psi);
            rows.push(LinRow {
                coeffs: coeffs.into_iter().map(|c| c.subst(&subs)).collect(),
                rhs: (-known).subst(&subs),
            });
        }
    }
    let sol = solve_rows(rows, n + 1, |c| format!("zv{c}"), cfg);

    // rename free velocity unknowns to u1, u2, …; τ stays the energy-balance
    // convention rather than a bare symbol
    let names = free_param_names(spec, sol.free.iter().filter(|(c, _)| *c < n).count());
    let mut rename: BTreeMap<String, Expr> = BTreeMap::new();
    for ((_, placeholder), name) in sol.free.iter().filter(|(c, _)| *c < n).zip(&names) {
        rename.insert(placeholder.clone(), Expr::param(name.clone()));
    }
    let zqd: Vec<Expr> = (0..n).map(|a| sol.assignments[a].subst_params(&rename).simplify()).collect();
    for (i, z) in zqd.iter().enumerate() {
        components.insert(Coord::Velocity(i as u32 + 1), z.clone());
    }
    let tau_was_pinned = !sol.free.iter().any(|(c, _)| *c == n);
    if tau_was_pinned {
        components.insert(Coord::Tau, sol.assignments[n].subst_params(&rename).simplify());
    } else {
        let mut ztau = energy_neg.diff(Coord::Time);
        for a in 1..=spec.n {
            ztau = ztau + Expr::qd(a) * energy_neg.diff(Coord::Position(a));
            ztau = ztau + zqd[(a - 1) as usize].clone() * energy_neg.diff(Coord::Velocity(a));
        }
        components.insert(Coord::Tau, ztau.simplify());
    }

    let sode: Vec<Expr> = sol
        .residuals
        .iter()
        .map(|r| normalize_constraint(&r.subst(&subs)))
        .filter(|r| !cfg.test(r))
        .collect();

    Ok(VectorFieldSpec {
        n: spec.n,
        mode,
        components,
        velocity_law: VelocityLaw::Closed(zqd),
        free_params: names,
        sode_residuals: sode,
        domain_constraints: chain.cumulative(),
        domain_level: chain.final_level().level,
    })
}

/// A vector field on J¹π coordinates.
#[derive(Debug, Clone)]
pub struct JetField {
    pub n: u32,
    pub components: BTreeMap<Coord, Expr>,
    pub velocity_law: VelocityLaw,
    pub free_params: Vec<String>,
}

/// Drop the (τ, p) components: the result has components (1, q̇^A, Z_q̇^A),
/// a second-order field where defined.
pub fn project_to_jet(spec: &SystemSpec, z: &VectorFieldSpec) -> JetField {
    let mut components = BTreeMap::new();
    components.insert(Coord::Time, Expr::one());
    for a in 1..=spec.n {
        components.insert(Coord::Position(a), Expr::qd(a));
        if let Some(e) = z.components.get(&Coord::Velocity(a)) {
            components.insert(Coord::Velocity(a), e.clone());
        }
    }
    JetField {
        n: spec.n,
        components,
        velocity_law: z.velocity_law.clone(),
        free_params: z.free_params.clone(),
    }
}

/// A vector field on J¹π* ×_E J¹π coordinates (hyperregular projection).
#[derive(Debug, Clone)]
pub struct DualField {
    pub n: u32,
    pub components: BTreeMap<Coord, Expr>,
    /// Hyperregularity is a global hypothesis that is only checked
    /// symbolically/pointwise; the projection carries this caveat.
    pub globality_warning: &'static str,
}

/// Drop the τ component only: components (1, q̇^A, ∂L/∂q^A, Z_q̇^A) on
/// (t, q, p, q̇). Rejected for singular Lagrangians.
pub fn project_to_dual(spec: &SystemSpec, z: &VectorFieldSpec) -> Result<DualField, DynamicsError> {
    if !z.free_params.is_empty() || z.mode != SolveMode::GraphRefined {
        return Err(DynamicsError::SingularProjection);
    }
    let mut components = BTreeMap::new();
    components.insert(Coord::Time, Expr::one());
    for a in 1..=spec.n {
        components.insert(Coord::Position(a), Expr::qd(a));
        components.insert(Coord::Momentum(a), spec.lagrangian.diff(Coord::Position(a)));
        if let Some(e) = z.components.get(&Coord::Velocity(a)) {
            components.insert(Coord::Velocity(a), e.clone());
        }
    }
    Ok(DualField {
        n: spec.n,
        components,
        globality_warning:
            "regularity was verified symbolically and at sample points only; global hyperregularity is not checked",
    })
}

/// i_Zω as a 1-form: (i_Zω)_j = Σ_i Z_i `ω[i][j]`.
pub fn interior_product(z: &VectorFieldSpec, form: &TwoForm) -> OneForm {
    let chart = form.chart.clone();
    let dim = chart.dim();
    let mut coeffs = vec![Expr::zero(); dim];
    for (j, slot) in coeffs.iter_mut().enumerate() {
        let mut acc = Expr::zero();
        for i in 0..dim {
            if form.coeffs[i][j].is_const_zero() {
                continue;
            }
            let zi = z.components.get(&chart.coord(i)).cloned().unwrap_or_else(Expr::zero);
            acc = acc + zi * form.coeffs[i][j].clone();
        }
        *slot = acc.simplify();
    }
    OneForm { chart, coeffs }
}

/// Euler-Lagrange residuals of a second-order field on J¹π:
/// X(∂L/∂q̇^A) − ∂L/∂q^A, which vanish exactly when integral curves solve
/// the Euler-Lagrange equations.
pub fn el_residuals(spec: &SystemSpec, x: &JetField) -> Vec<Expr> {
    let chart = Chart::jet(spec.n);
    (1..=spec.n)
        .map(|a| {
            let momentum = spec.lagrangian.diff(Coord::Velocity(a));
            let mut acc = Expr::zero();
            for &c in chart.coords() {
                let d = momentum.diff(c);
                if d.is_const_zero() {
                    continue;
                }
                let xc = x.components.get(&c).cloned().unwrap_or_else(Expr::zero);
                acc = acc + xc * d;
            }
            (acc - spec.lagrangian.diff(Coord::Position(a))).simplify()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{run_algorithm, AlgoOptions};
    use crate::geometry::{build_eta, build_omega_h};
    use crate::model::parse_system;

    fn cfg() -> ZeroCfg {
        ZeroCfg::default()
    }

    fn chain_for(src: &str) -> (SystemSpec, ConstraintChain) {
        let spec = parse_system(src).unwrap();
        let chain = run_algorithm(&spec, &AlgoOptions::default()).unwrap();
        (spec, chain)
    }

    fn reduce(e: &Expr, z: &VectorFieldSpec) -> Expr {
        let mut subs = BTreeMap::new();
        for c in &z.domain_constraints {
            if let Some((coord, rhs)) = crate::constraints::try_solved_form(c) {
                subs.insert(coord, rhs);
            }
        }
        for r in &z.sode_residuals {
            if let Some((coord, rhs)) = crate::constraints::try_solved_form(r) {
                subs.insert(coord, rhs);
            }
        }
        e.subst(&resolved_substitutions(&subs)).simplify()
    }

    #[test]
    fn oscillator_graph_refined_unique() {
        let (spec, chain) = chain_for("dim 1; L = 1/2*qd1^2 - 1/2*q1^2;");
        let z = solve_z(&spec, &chain, SolveMode::GraphRefined, &cfg()).unwrap();
        assert!(z.free_params.is_empty());
        assert!(z.sode_residuals.is_empty());
        assert_eq!(z.components[&Coord::Time], Expr::one());
        assert_eq!(z.components[&Coord::Position(1)], Expr::qd(1));
        assert_eq!(z.components[&Coord::Momentum(1)], -Expr::q(1));
        assert_eq!(z.components[&Coord::Velocity(1)], -Expr::q(1));
        // autonomous: energy balance gives Z_tau = 0
        assert!(z.components[&Coord::Tau].is_const_zero());
    }

    #[test]
    fn free_particle_graph_refined() {
        let (spec, chain) = chain_for("dim 1; L = 1/2*qd1^2;");
        let z = solve_z(&spec, &chain, SolveMode::GraphRefined, &cfg()).unwrap();
        assert!(z.components[&Coord::Velocity(1)].is_const_zero());
        assert!(z.components[&Coord::Momentum(1)].is_const_zero());
        assert!(z.components[&Coord::Tau].is_const_zero());
    }

    #[test]
    fn time_dependent_oscillator_energy_balance() {
        let (spec, chain) =
            chain_for("dim 1; param eps = 0.1; L = 1/2*qd1^2 - 1/2*(1 + eps*sin(t))*q1^2;");
        let z = solve_z(&spec, &chain, SolveMode::GraphRefined, &cfg()).unwrap();
        // Z_qd = -(1 + eps sin t) q
        let expected = -(Expr::one() + Expr::param("eps") * Expr::t().sin()) * Expr::q(1);
        assert!((z.components[&Coord::Velocity(1)].clone() - expected).is_zero(16, 42));
        // Z_tau = -(1/2) eps cos(t) q^2
        let expected_tau = -(Expr::rational(1, 2)
            * Expr::param("eps")
            * Expr::t().cos()
            * Expr::q(1).powi(2));
        assert!((z.components[&Coord::Tau].clone() - expected_tau).is_zero(16, 42));
    }

    #[test]
    fn singular_raw_solution_family() {
        let (spec, chain) = chain_for("dim 2; L = 1/2*qd1^2 + q2*qd1;");
        let z = solve_z(&spec, &chain, SolveMode::Raw, &cfg()).unwrap();
        // qd1 frozen, qd2 direction free, one SODE residual qd2
        assert!(z.components[&Coord::Velocity(1)].is_const_zero());
        assert_eq!(z.components[&Coord::Velocity(2)], Expr::param("u1"));
        assert_eq!(z.free_params, vec!["u1".to_string()]);
        assert_eq!(z.sode_residuals, vec![Expr::qd(2)]);
        assert_eq!(z.components[&Coord::Momentum(1)], Expr::zero());
        assert_eq!(z.components[&Coord::Momentum(2)], Expr::qd(1));
        // graph-refined is rejected for the singular model
        assert!(matches!(
            solve_z(&spec, &chain, SolveMode::GraphRefined, &cfg()),
            Err(DynamicsError::GraphRefinedSingular)
        ));
    }

    #[test]
    fn totally_degenerate_keeps_velocity_free() {
        let (spec, chain) = chain_for("dim 1; L = qd1;");
        let z = solve_z(&spec, &chain, SolveMode::Raw, &cfg()).unwrap();
        assert_eq!(z.components[&Coord::Velocity(1)], Expr::param("u1"));
        assert_eq!(z.free_params, vec!["u1".to_string()]);
        assert!(z.sode_residuals.is_empty());
    }

    #[test]
    fn algebraic_verification_i_z_omega_h() {
        for src in [
            "dim 1; L = 1/2*qd1^2 - 1/2*q1^2;",
            "dim 1; L = 1/2*qd1^2;",
            "dim 1; param eps = 0.1; L = 1/2*qd1^2 - 1/2*(1 + eps*sin(t))*q1^2;",
        ] {
            let (spec, chain) = chain_for(src);
            for mode in [SolveMode::Raw, SolveMode::GraphRefined] {
                let z = solve_z(&spec, &chain, mode, &cfg()).unwrap();
                let omega_h = build_omega_h(&spec);
                let contraction = interior_product(&z, &omega_h);
                for coeff in &contraction.coeffs {
                    let reduced = reduce(coeff, &z);
                    assert!(reduced.is_zero(16, 42), "{src}: i_Z omega_H has residual {reduced}");
                }
                // i_Z eta = Z_t = 1
                let eta = build_eta(spec.n);
                let mut izeta = Expr::zero();
                for (i, &c) in omega_h.chart.coords().iter().enumerate() {
                    izeta = izeta
                        + z.components.get(&c).cloned().unwrap_or_else(Expr::zero)
                            * eta.coeffs[i].clone();
                }
                assert_eq!(izeta, Expr::one());
            }
        }
    }

    #[test]
    fn algebraic_verification_singular_raw() {
        let (spec, chain) = chain_for("dim 2; L = 1/2*qd1^2 + q2*qd1;");
        let z = solve_z(&spec, &chain, SolveMode::Raw, &cfg()).unwrap();
        let omega_h = build_omega_h(&spec);
        let contraction = interior_product(&z, &omega_h);
        for coeff in &contraction.coeffs {
            let reduced = reduce(coeff, &z);
            assert!(reduced.is_zero(16, 42), "i_Z omega_H residual {reduced}");
        }
        // tangency of every domain constraint, modulo domain + SODE locus
        let chart = Chart::mixed(spec.n);
        for psi in &z.domain_constraints {
            let reduced = reduce(&z.derive(psi, &chart), &z);
            assert!(reduced.is_zero(16, 42), "tangency residual {reduced} for {psi}");
        }
    }

    #[test]
    fn tangency_graph_refined_includes_tau_constraint() {
        let (spec, chain) = chain_for("dim 1; L = 1/2*qd1^2 - 1/2*q1^2;");
        let z = solve_z(&spec, &chain, SolveMode::GraphRefined, &cfg()).unwrap();
        let chart = Chart::mixed(spec.n);
        for psi in &z.domain_constraints {
            let reduced = reduce(&z.derive(psi, &chart), &z);
            assert!(reduced.is_zero(16, 42), "graph tangency residual {reduced} for {psi}");
        }
    }

    #[test]
    fn projection_examples() {
        let (spec, chain) = chain_for("dim 1; L = 1/2*qd1^2 - 1/2*q1^2;");
        let z = solve_z(&spec, &chain, SolveMode::GraphRefined, &cfg()).unwrap();
        let x = project_to_jet(&spec, &z);
        assert_eq!(x.components[&Coord::Position(1)], Expr::qd(1));
        assert_eq!(x.components[&Coord::Velocity(1)], -Expr::q(1));
        for r in el_residuals(&spec, &x) {
            assert!(r.is_zero(16, 42), "EL residual {r}");
        }
        let dual = project_to_dual(&spec, &z).unwrap();
        assert_eq!(dual.components[&Coord::Momentum(1)], -Expr::q(1));
        assert!(!dual.components.contains_key(&Coord::Tau));

        // singular model refuses the dual projection
        let (spec2, chain2) = chain_for("dim 2; L = 1/2*qd1^2 + q2*qd1;");
        let z2 = solve_z(&spec2, &chain2, SolveMode::Raw, &cfg()).unwrap();
        assert!(matches!(project_to_dual(&spec2, &z2), Err(DynamicsError::SingularProjection)));
    }

    #[test]
    fn singular_jet_projection_freezes_velocity() {
        let (spec, chain) = chain_for("dim 2; L = 1/2*qd1^2 + q2*qd1;");
        let z = solve_z(&spec, &chain, SolveMode::Raw, &cfg()).unwrap();
        let x = project_to_jet(&spec, &z);
        assert!(x.components[&Coord::Velocity(1)].is_const_zero());
        assert_eq!(x.components[&Coord::Velocity(2)], Expr::param("u1"));
        // EL residuals vanish on the SODE-consistent locus qd2 = 0 with u1 = 0
        let mut subs = BTreeMap::new();
        subs.insert(Coord::Velocity(1), Expr::zero());
        subs.insert(Coord::Velocity(2), Expr::zero());
        let mut params = BTreeMap::new();
        params.insert("u1".to_string(), Expr::zero());
        for r in el_residuals(&spec, &x) {
            let reduced = r.subst(&subs).subst_params(&params).simplify();
            assert!(reduced.is_zero(16, 42), "restricted EL residual {reduced}");
        }
    }

    #[test]
    fn raw_equals_refined_for_regular_velocity_components() {
        let (spec, chain) =
            chain_for("dim 1; param eps = 0.1; L = 1/2*qd1^2 - 1/2*(1 + eps*sin(t))*q1^2;");
        let raw = solve_z(&spec, &chain, SolveMode::Raw, &cfg()).unwrap();
        let refined = solve_z(&spec, &chain, SolveMode::GraphRefined, &cfg()).unwrap();
        for a in 1..=spec.n {
            let d = raw.components[&Coord::Velocity(a)].clone()
                - refined.components[&Coord::Velocity(a)].clone();
            assert!(d.is_zero(16, 42));
        }
        assert!(raw.free_params.is_empty());
    }
}
