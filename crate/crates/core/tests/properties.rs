//! Property tests for the symbolic kernel, the model DSL, and structural
//! soundness of the constraint/dynamics pipeline over randomized models.

use std::collections::BTreeMap;

use proptest::prelude::*;
use srusk_core::constraints::{
    resolved_substitutions, run_algorithm, try_solved_form, AlgoOptions, ChainStatus,
};
use srusk_core::dynamics::{interior_product, solve_z, SolveMode};
use srusk_core::expr::{Coord, Expr, ZeroCfg};
use srusk_core::geometry::{build_omega_h, Chart};
use srusk_core::legendre::Classification;
use srusk_core::model::{parse_system, render_system, SystemSpec};

/// Jet-chart expressions (t, q1, q2, qd1, qd2, params a/b) so values can be
/// embedded in a Lagrangian position for parser round-trips.
fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![
        (-6i64..7).prop_map(Expr::int),
        ((-6i64..7), (1i64..5)).prop_map(|(n, d)| Expr::rational(n, d)),
        Just(Expr::t()),
        Just(Expr::q(1)),
        Just(Expr::q(2)),
        Just(Expr::qd(1)),
        Just(Expr::qd(2)),
        Just(Expr::param("a")),
        Just(Expr::param("b")),
    ]
}

fn expr_strategy() -> impl Strategy<Value = Expr> {
    leaf().prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 2..4).prop_map(Expr::sum),
            prop::collection::vec(inner.clone(), 2..3).prop_map(Expr::product),
            (inner.clone(), prop_oneof![Just(2i64), Just(3), Just(-1), Just(-2)])
                .prop_map(|(e, k)| e.powi(k)),
            inner.clone().prop_map(|e| e.sin()),
            inner.clone().prop_map(|e| e.cos()),
            inner.prop_map(|e| e.exp()),
        ]
    })
}

/// Smooth strategy without negative powers, for finite-difference checks.
fn smooth_strategy() -> impl Strategy<Value = Expr> {
    leaf().prop_recursive(3, 16, 3, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 2..4).prop_map(Expr::sum),
            prop::collection::vec(inner.clone(), 2..3).prop_map(Expr::product),
            (inner.clone(), 2i64..4).prop_map(|(e, k)| e.powi(k)),
            inner.clone().prop_map(|e| e.sin()),
            inner.prop_map(|e| e.cos()),
        ]
    })
}

fn sample_point() -> (BTreeMap<Coord, f64>, BTreeMap<String, f64>) {
    let coords = [
        (Coord::Time, 0.37),
        (Coord::Position(1), -0.81),
        (Coord::Position(2), 1.23),
        (Coord::Velocity(1), 0.55),
        (Coord::Velocity(2), -1.47),
    ]
    .into_iter()
    .collect();
    let params = [("a".to_string(), 0.91), ("b".to_string(), -0.63)].into_iter().collect();
    (coords, params)
}

/// Random regular mechanical Lagrangians: positive kinetic form plus a low
/// degree potential, optionally time-dependent.
fn regular_lagrangian() -> impl Strategy<Value = SystemSpec> {
    (
        1u32..=2,
        prop::collection::vec((1i64..=4, 1i64..=2), 2),
        prop::collection::vec(-2i64..=2, 4),
        any::<bool>(),
    )
        .prop_map(|(n, masses, vcoeffs, driven)| {
            let mut lagrangian = Expr::zero();
            for a in 1..=n {
                let (num, den) = masses[(a - 1) as usize];
                lagrangian = lagrangian + Expr::rational(num, 2 * den) * Expr::qd(a).powi(2);
            }
            let mut k = 0;
            for a in 1..=n {
                let c = vcoeffs[k % vcoeffs.len()];
                k += 1;
                if c != 0 {
                    lagrangian = lagrangian - Expr::rational(c, 2) * Expr::q(a).powi(2);
                }
                let c = vcoeffs[k % vcoeffs.len()];
                k += 1;
                if c != 0 {
                    lagrangian = lagrangian - Expr::rational(c, 3) * Expr::q(a).powi(3);
                }
            }
            if driven {
                lagrangian = lagrangian + Expr::t().sin() * Expr::q(1);
            }
            SystemSpec {
                n,
                lagrangian,
                params: BTreeMap::new(),
                initial_conditions: Vec::new(),
                name: None,
                description: None,
            }
        })
}

/// Random constant-rank-one singular Lagrangians on two degrees of freedom:
/// L = ½q̇₁² + f(q)·q̇₂ − V(q) with f affine so discovered constraints stay in
/// solved form.
fn singular_lagrangian() -> impl Strategy<Value = SystemSpec> {
    ((-2i64..=2), (-2i64..=2), (-2i64..=2), (0i64..=2), (-2i64..=2))
        .prop_map(|(f1, f2, f0, v2, v1)| {
            let f = Expr::int(f0) + Expr::int(f1) * Expr::q(1) + Expr::int(f2) * Expr::q(2);
            let v = Expr::rational(v2, 2) * Expr::q(2).powi(2) + Expr::int(v1) * Expr::q(1);
            let lagrangian =
                Expr::rational(1, 2) * Expr::qd(1).powi(2) + f * Expr::qd(2) - v;
            SystemSpec {
                n: 2,
                lagrangian,
                params: BTreeMap::new(),
                initial_conditions: Vec::new(),
                name: None,
                description: None,
            }
        })
}

/// Reduce an expression modulo the solved forms of the given constraints.
fn reduce_mod(e: &Expr, constraints: &[Expr]) -> Expr {
    let mut subs = BTreeMap::new();
    for c in constraints {
        if let Some((coord, rhs)) = try_solved_form(c) {
            subs.insert(coord, rhs);
        }
    }
    e.subst(&resolved_substitutions(&subs)).simplify()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn simplify_is_identity_on_normal_forms(e in expr_strategy()) {
        // constructors normalize, so simplify must be a fixpoint
        let s = e.simplify();
        prop_assert_eq!(&s, &e);
        prop_assert_eq!(s.simplify(), e);
    }

    #[test]
    fn self_difference_is_structural_zero(e in expr_strategy()) {
        prop_assert!((e.clone() - e).is_const_zero());
    }

    #[test]
    fn doubling_matches_scaling(e in expr_strategy()) {
        let doubled = e.clone() + e.clone();
        prop_assert_eq!(doubled, Expr::int(2) * e);
    }

    #[test]
    fn addition_and_multiplication_commute_structurally(
        a in expr_strategy(),
        b in expr_strategy(),
    ) {
        prop_assert_eq!(a.clone() + b.clone(), b.clone() + a.clone());
        prop_assert_eq!(a.clone() * b.clone(), b * a);
    }

    #[test]
    fn addition_and_multiplication_associate_structurally(
        a in expr_strategy(),
        b in expr_strategy(),
        c in expr_strategy(),
    ) {
        prop_assert_eq!((a.clone() + b.clone()) + c.clone(), a.clone() + (b.clone() + c.clone()));
        prop_assert_eq!((a.clone() * b.clone()) * c.clone(), a * (b * c));
    }

    #[test]
    fn structural_equality_implies_equal_values(a in expr_strategy(), b in expr_strategy()) {
        // when two independently built expressions normalize to the same tree,
        // they must evaluate identically
        if a == b {
            let (coords, params) = sample_point();
            let va = a.eval(&coords, &params);
            let vb = b.eval(&coords, &params);
            match (va, vb) {
                (Ok(x), Ok(y)) => prop_assert!(
                    (x - y).abs() <= 1e-12 * x.abs().max(1.0),
                    "equal trees evaluated to {x} vs {y}"
                ),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "one side failed to evaluate: {other:?}"),
            }
        }
    }

    #[test]
    fn render_reparse_identity(e in expr_strategy()) {
        let src = format!("dim 2; param a; param b;\nL = {e};");
        let spec = parse_system(&src)
            .unwrap_or_else(|err| panic!("rendered expression failed to parse: {err}\n{src}"));
        prop_assert_eq!(&spec.lagrangian, &e, "{}", src);
        // and once more through render_system
        let rendered = render_system(&spec);
        let reparsed = parse_system(&rendered).unwrap();
        prop_assert_eq!(reparsed.lagrangian, e, "{}", rendered);
    }

    #[test]
    fn diff_is_linear(e1 in expr_strategy(), e2 in expr_strategy(), a in -4i64..5, b in -4i64..5) {
        let c = Coord::Velocity(1);
        let lhs = (Expr::int(a) * e1.clone() + Expr::int(b) * e2.clone()).diff(c);
        let rhs = Expr::int(a) * e1.diff(c) + Expr::int(b) * e2.diff(c);
        prop_assert!((lhs - rhs).is_zero(16, 42));
    }

    #[test]
    fn mixed_partials_commute(e in smooth_strategy()) {
        let ab = e.diff(Coord::Velocity(1)).diff(Coord::Velocity(2));
        let ba = e.diff(Coord::Velocity(2)).diff(Coord::Velocity(1));
        prop_assert!((ab - ba).is_zero(16, 42));
    }

    #[test]
    fn regular_models_always_stabilize_at_level_two(spec in regular_lagrangian()) {
        let chain = run_algorithm(&spec, &AlgoOptions::default()).unwrap();
        prop_assert_eq!(chain.regularity.classification, Classification::Regular);
        prop_assert_eq!(chain.status, ChainStatus::Stabilized(2));
        let cfg = ZeroCfg::default();
        let z = solve_z(&spec, &chain, SolveMode::GraphRefined, &cfg).unwrap();
        prop_assert!(z.free_params.is_empty());
        prop_assert!(z.sode_residuals.is_empty());
        // the projected field satisfies the Euler-Lagrange equations
        let jet = srusk_core::dynamics::project_to_jet(&spec, &z);
        for r in srusk_core::dynamics::el_residuals(&spec, &jet) {
            prop_assert!(r.is_zero(16, 42), "EL residual {} for L = {}", r, spec.lagrangian);
        }
    }

    #[test]
    fn singular_chains_terminate_and_solutions_verify(spec in singular_lagrangian()) {
        let chain = run_algorithm(&spec, &AlgoOptions::default()).unwrap();
        prop_assert!(chain.levels.len() <= 10);
        if !chain.is_stabilized() {
            return Ok(());
        }
        let cfg = ZeroCfg::default();
        let Ok(z) = solve_z(&spec, &chain, SolveMode::Raw, &cfg) else { return Ok(()) };
        // i_Z omega_H and the newest-level tangency vanish modulo the domain
        // constraints together with the second-order consistency residuals
        let mut locus = z.domain_constraints.clone();
        locus.extend(z.sode_residuals.iter().cloned());
        let omega_h = build_omega_h(&spec);
        for coeff in &interior_product(&z, &omega_h).coeffs {
            let reduced = reduce_mod(coeff, &locus);
            prop_assert!(
                reduced.is_zero(16, 42),
                "i_Z omega_H residual {} for L = {}",
                reduced,
                spec.lagrangian
            );
        }
        let chart = Chart::mixed(spec.n);
        if let Some(level) = chain.levels.last() {
            for psi in &level.constraints {
                let reduced = reduce_mod(&z.derive(psi, &chart), &locus);
                prop_assert!(
                    reduced.is_zero(16, 42),
                    "tangency residual {} for {} with L = {}",
                    reduced,
                    psi,
                    spec.lagrangian
                );
            }
        }
    }

    #[test]
    fn derivative_matches_finite_difference(e in smooth_strategy()) {
        let c = Coord::Velocity(1);
        let (mut coords, params) = sample_point();
        let exact_expr = e.diff(c);
        let Ok(exact) = exact_expr.eval(&coords, &params) else { return Ok(()) };
        // fourth-order central stencil keeps truncation error far below the
        // 1e-6 relative bound for this strategy's expressions
        let h = 1e-3;
        let x0 = coords[&c];
        let mut f = |x: f64| {
            coords.insert(c, x);
            e.eval(&coords, &params)
        };
        let (Ok(fm2), Ok(fm1), Ok(fp1), Ok(fp2)) =
            (f(x0 - 2.0 * h), f(x0 - h), f(x0 + h), f(x0 + 2.0 * h))
        else {
            return Ok(());
        };
        let fd = (fm2 - 8.0 * fm1 + 8.0 * fp1 - fp2) / (12.0 * h);
        let scale = exact.abs().max(fd.abs());
        if scale > 1e-3 && scale < 1e6 {
            prop_assert!(
                (exact - fd).abs() <= 1e-6 * scale.max(1.0),
                "d/d{c:?} mismatch: exact {exact}, fd {fd} for {e}"
            );
        }
    }
}
