//! Executable checks of the structural claims for a given model: rank
//! relations of (ω_H, η), the cosymplectic/precosymplectic relations of
//! (ω_L, η̃), the kernel direction ∂/∂τ, the pullback identity relating
//! pr₂*ω_L and ω_H on M_L, uniqueness of the graph-refined field, the
//! correspondence between the mixed-space chain and the independently
//! computed jet-side chain, and cross-validation of the flow against a
//! direct Euler-Lagrange integration.
//!
//! The direct-EL reference integrator here is an independent code path: its
//! own RK4 on (t, q, q̇) with the accelerations solved numerically per step
//! from q̈ = W⁻¹(∂L/∂q − ∂²L/∂t∂q̇ − q̇ ∂²L/∂q∂q̇), so the equivalence check
//! compares two genuinely different routes to the dynamics.
//!
//! Wedge-power identities are expanded symbolically for n ≤ 2; beyond that
//! pointwise rank surrogates are used and labeled as such in the report.
//! Reports are deterministic: the same seed yields identical bytes.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::constraints::{
    eta_in_flat_image, find_witnesses, run_algorithm, run_presymplectic, AlgoOptions, ChainError,
    ChainStatus, ConstraintChain,
};
use crate::dynamics::{el_residuals, interior_product, project_to_jet, solve_z, SolveMode, VectorFieldSpec};
use crate::expr::{Coord, Expr, ZeroCfg};
use crate::geometry::{
    build_eta, build_eta_jet, build_omega_h, build_poincare_cartan, graph_restriction_map,
    pullback_omega_l, skew_rank, Chart, OneForm, PolyForm, TwoForm, RANK_SVD_TOL,
};
use crate::integrator::{integrate, lift_initial_condition, IntegrateOptions};
use crate::legendre::{legendre_graph, sampled_params, Classification};
use crate::model::{InitialCondition, SystemSpec};

/// Symbolic wedge expansions are run up to this fibre dimension.
pub const SYMBOLIC_WEDGE_MAX_DIM: u32 = 2;

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub model: String,
    pub classification: String,
    pub seed: u64,
    pub points: usize,
    pub all_passed: bool,
    pub checks: Vec<CheckReport>,
}

impl VerificationReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("model: {} ({})\n", self.model, self.classification));
        for c in &self.checks {
            out.push_str(&format!(
                "  [{}] {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name
            ));
        }
        out.push_str(if self.all_passed { "all checks passed\n" } else { "CHECKS FAILED\n" });
        out
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seed: u64,
    pub points: usize,
    pub h: f64,
    pub horizon: f64,
    /// Test-only corruption hook (sign-flipped ω_E) used as a negative
    /// control for the failure path.
    pub corrupt_omega_sign: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: crate::expr::DEFAULT_SEED,
            points: 50,
            h: 1e-3,
            horizon: 10.0,
            corrupt_omega_sign: false,
        }
    }
}

/// Precomputed geometric objects shared by the checks.
pub struct SuiteContext {
    pub spec: SystemSpec,
    pub omega_h: TwoForm,
    pub eta: OneForm,
    pub omega_l: TwoForm,
    pub eta_jet: OneForm,
    pub params: BTreeMap<String, f64>,
    pub cfg: ZeroCfg,
    pub points: usize,
}

impl SuiteContext {
    pub fn new(spec: &SystemSpec, opts: &SuiteOptions) -> SuiteContext {
        let mut omega_h = build_omega_h(spec);
        if opts.corrupt_omega_sign {
            let d = omega_h.chart.dim();
            for i in 0..d {
                for j in 0..d {
                    omega_h.coeffs[i][j] = -omega_h.coeffs[i][j].clone();
                }
            }
        }
        let (_, omega_l) = build_poincare_cartan(spec);
        SuiteContext {
            spec: spec.clone(),
            omega_h,
            eta: build_eta(spec.n),
            omega_l,
            eta_jet: build_eta_jet(spec.n),
            params: sampled_params(spec, opts.seed),
            cfg: ZeroCfg::with_seed(opts.seed),
            points: opts.points,
        }
    }

    fn random_mixed_points(&self, count: usize, salt: u64) -> Vec<BTreeMap<Coord, f64>> {
        let chart = Chart::mixed(self.spec.n);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ salt);
        (0..count)
            .map(|_| {
                let xs: Vec<f64> = (0..chart.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
                chart.point_map(&xs)
            })
            .collect()
    }

    /// Random points of M_L: sample (t, q, τ, q̇) and set p = ∂L/∂q̇.
    fn random_ml_points(&self, count: usize, salt: u64) -> Vec<BTreeMap<Coord, f64>> {
        let graph = legendre_graph(&self.spec);
        self.random_mixed_points(count, salt)
            .into_iter()
            .map(|mut point| {
                for (i, p) in graph.momenta.iter().enumerate() {
                    let v = p.eval(&point, &self.params).unwrap_or(f64::NAN);
                    point.insert(Coord::Momentum(i as u32 + 1), v);
                }
                point
            })
            .collect()
    }
}

/// Rank identities of the pair (ω_H, η): symbolically ω_H^n ∧ η ≠ 0,
/// ω_H^{n+1} ∧ η = 0, ω_H^{n+2} = 0 for n ≤ 2, and numerically
/// 2n ≤ rank ω_H ≤ 2(n+1) at sampled points with rank = 2n exactly on M_L.
pub fn check_rank_relations(ctx: &SuiteContext) -> CheckReport {
    let n = ctx.spec.n as usize;
    let mut passed = true;
    let mut details = serde_json::Map::new();

    if ctx.spec.n <= SYMBOLIC_WEDGE_MAX_DIM {
        let wh = PolyForm::from_two_form(&ctx.omega_h);
        let eta = PolyForm::from_one_form(&ctx.eta);
        let nonzero = wh.wedge_power(n).wedge(&eta).is_nonzero_form(ctx.cfg.trials, ctx.cfg.seed);
        let van1 = wh.wedge_power(n + 1).wedge(&eta).is_zero_form(ctx.cfg.trials, ctx.cfg.seed);
        let van2 = wh.wedge_power(n + 2).is_zero_form(ctx.cfg.trials, ctx.cfg.seed);
        passed &= nonzero && van1 && van2;
        details.insert("symbolic".into(), json!({
            "omega_h^n ∧ eta != 0": nonzero,
            "omega_h^(n+1) ∧ eta == 0": van1,
            "omega_h^(n+2) == 0": van2,
        }));
    } else {
        details.insert("symbolic".into(), json!("skipped for n > 2; numeric rank surrogate used"));
    }

    let mut ranks = Vec::new();
    for point in ctx.random_mixed_points(ctx.points, 0x7a17) {
        match ctx.omega_h.eval_matrix(&point, &ctx.params) {
            Ok(m) => {
                let r = skew_rank(&m, RANK_SVD_TOL);
                if r < 2 * n || r > 2 * (n + 1) {
                    passed = false;
                }
                ranks.push(r);
            }
            Err(_) => continue,
        }
    }
    let mut ml_ranks = Vec::new();
    let mut eta_on_kernel_ok = true;
    for point in ctx.random_ml_points(ctx.points, 0x3a91) {
        if let Ok(m) = ctx.omega_h.eval_matrix(&point, &ctx.params) {
            let r = skew_rank(&m, RANK_SVD_TOL);
            if r != 2 * n {
                passed = false;
            }
            ml_ranks.push(r);
            // at rank 2n, ω_H^n ∧ η ≠ 0 iff η does not annihilate ker ω_H
            if let Ok(eta_v) = ctx.eta.eval(&point, &ctx.params) {
                let kernel = crate::constraints::null_space(&m, RANK_SVD_TOL);
                let eta_row = DMatrix::from_row_slice(1, eta_v.len(), &eta_v);
                let pairing = (&eta_row * &kernel).amax();
                if kernel.ncols() > 0 && pairing < 1e-9 {
                    eta_on_kernel_ok = false;
                    passed = false;
                }
            }
        }
    }
    details.insert("rank_bounds".into(), json!({
        "min": ranks.iter().min(),
        "max": ranks.iter().max(),
        "expected_low": 2 * n,
        "expected_high": 2 * (n + 1),
        "samples": ranks.len(),
    }));
    details.insert("rank_on_ml".into(), json!({
        "observed": ml_ranks.iter().max(),
        "expected": 2 * n,
        "samples": ml_ranks.len(),
        "eta_nonzero_on_kernel": eta_on_kernel_ok,
    }));
    CheckReport { name: "rank_relations".into(), passed, details: details.into() }
}

/// Cosymplectic relations of (ω_L, η̃) on J¹π: regular Lagrangians satisfy
/// ω_L^n ∧ η̃ ≠ 0 and ω_L^{n+1} = 0; constant-rank-r ones satisfy
/// ω_L^r ∧ η̃ ≠ 0, ω_L^{r+1} ∧ η̃ = 0, ω_L^{r+2} = 0.
pub fn check_cosymplectic_l(ctx: &SuiteContext, classification: Classification) -> CheckReport {
    let n = ctx.spec.n as usize;
    let r = match classification {
        Classification::Regular => n,
        Classification::ConstantRankSingular(r) => r,
        Classification::VariableRank => {
            return CheckReport {
                name: "cosymplectic_relations".into(),
                passed: false,
                details: json!("variable-rank Hessian: constant-rank relations do not apply"),
            }
        }
    };
    let mut passed = true;
    let mut details = serde_json::Map::new();
    if ctx.spec.n <= SYMBOLIC_WEDGE_MAX_DIM {
        let wl = PolyForm::from_two_form(&ctx.omega_l);
        let eta = PolyForm::from_one_form(&ctx.eta_jet);
        let nonzero = wl.wedge_power(r).wedge(&eta).is_nonzero_form(ctx.cfg.trials, ctx.cfg.seed);
        let van1 = wl.wedge_power(r + 1).wedge(&eta).is_zero_form(ctx.cfg.trials, ctx.cfg.seed);
        let van2 = wl.wedge_power(r + 2).is_zero_form(ctx.cfg.trials, ctx.cfg.seed);
        passed &= nonzero && van1 && van2;
        details.insert("symbolic".into(), json!({
            "rank": r,
            "omega_L^r ∧ eta != 0": nonzero,
            "omega_L^(r+1) ∧ eta == 0": van1,
            "omega_L^(r+2) == 0": van2,
        }));
    } else {
        // numeric surrogate: 2r ≤ rank ω_L ≤ 2r+2 at sampled jet points
        let chart = Chart::jet(ctx.spec.n);
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed ^ 0xc05f);
        let mut ok = true;
        for _ in 0..ctx.points {
            let xs: Vec<f64> = (0..chart.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let point = chart.point_map(&xs);
            if let Ok(m) = ctx.omega_l.eval_matrix(&point, &ctx.params) {
                let rank = skew_rank(&m, RANK_SVD_TOL);
                ok &= rank >= 2 * r.saturating_sub(0) && rank <= 2 * r + 2;
            }
        }
        passed &= ok;
        details.insert("numeric_rank_surrogate".into(), json!({"rank_r": r, "bounds_hold": ok}));
    }
    CheckReport { name: "cosymplectic_relations".into(), passed, details: details.into() }
}

/// ∂/∂τ lies in ker ω_H ∩ ker η: the τ row of ω_H and the τ component of η
/// vanish identically.
pub fn check_kernel_direction(ctx: &SuiteContext) -> CheckReport {
    let contraction = ctx.omega_h.interior_basis(Coord::Tau);
    let omega_ok = contraction.coeffs.iter().all(|c| ctx.cfg.test(c));
    let itau = ctx.eta.chart.index_of(Coord::Tau).unwrap();
    let eta_ok = ctx.eta.coeffs[itau].is_const_zero();
    CheckReport {
        name: "kernel_direction".into(),
        passed: omega_ok && eta_ok,
        details: json!({"i_dtau_omega_h_vanishes": omega_ok, "i_dtau_eta_vanishes": eta_ok}),
    }
}

/// The pullback identity pr₂*ω_L = ω_H restricted to T M_L: symbolically the
/// two forms pulled back along the graph chart ι agree coefficientwise, and
/// numerically the matrices contracted with a basis of T M_L agree at random
/// M₂ points.
pub fn check_pullback_identity(ctx: &SuiteContext) -> CheckReport {
    let restriction = graph_restriction_map(&ctx.spec);
    let pulled = pullback_omega_l(&ctx.spec);
    let lhs = restriction.pullback_two_form(&pulled);
    let rhs = restriction.pullback_two_form(&ctx.omega_h);
    let diff = lhs.sub(&rhs);
    let symbolic_ok = diff
        .coeffs
        .iter()
        .all(|row| row.iter().all(|c| ctx.cfg.test(c)));

    // numeric: |Dᵀ (pr₂*ω_L − ω_H) D| at sampled M₂ points, D = dι
    let mixed_diff = pulled.sub(&ctx.omega_h);
    let source = restriction.source.clone();
    let mut max_gap = 0.0f64;
    let mut numeric_ok = true;
    let mut samples = 0usize;
    for point in ctx.random_ml_points(10, 0x9217) {
        // express the point in graph-chart coordinates for the Jacobian
        let graph_point: BTreeMap<Coord, f64> = source
            .coords()
            .iter()
            .map(|&c| (c, point[&c]))
            .collect();
        let mut d = DMatrix::zeros(restriction.target.dim(), source.dim());
        let mut ok = true;
        for (i, comp) in restriction.components.iter().enumerate() {
            for (a, &c) in source.coords().iter().enumerate() {
                match comp.diff(c).eval(&graph_point, &ctx.params) {
                    Ok(v) => d[(i, a)] = v,
                    Err(_) => ok = false,
                }
            }
        }
        let Ok(m) = mixed_diff.eval_matrix(&point, &ctx.params) else { continue };
        if !ok {
            continue;
        }
        let restricted = d.transpose() * m * d;
        let gap = restricted.amax();
        max_gap = max_gap.max(gap);
        numeric_ok &= gap <= 1e-12;
        samples += 1;
    }
    CheckReport {
        name: "pullback_identity".into(),
        passed: symbolic_ok && numeric_ok && samples > 0,
        details: json!({
            "symbolic_identity_on_TM_L": symbolic_ok,
            "numeric_max_gap": max_gap,
            "numeric_tolerance": 1e-12,
            "m2_samples": samples,
        }),
    }
}

/// Regular uniqueness: in graph-refined mode the field has no free
/// parameters and the symbolic residuals i_Zω_H and Z(constraints) vanish.
pub fn check_uniqueness(ctx: &SuiteContext, chain: &ConstraintChain, z: &VectorFieldSpec) -> CheckReport {
    let chart = Chart::mixed(ctx.spec.n);
    let free_ok = z.free_params.is_empty() && z.sode_residuals.is_empty();
    if !matches!(z.velocity_law, crate::dynamics::VelocityLaw::Closed(_)) {
        // symbolic residual checks need closed-form components; beyond the
        // symbolic-inverse dimension only the structural facts are asserted
        return CheckReport {
            name: "graph_refined_uniqueness".into(),
            passed: free_ok,
            details: json!({
                "free_params_empty": free_ok,
                "symbolic_residuals": "skipped: numeric velocity law",
            }),
        };
    }
    let mut subs = BTreeMap::new();
    for psi in &z.domain_constraints {
        if let Some((c, e)) = crate::constraints::try_solved_form(psi) {
            subs.insert(c, e);
        }
    }
    let subs = crate::constraints::resolved_substitutions(&subs);
    let contraction = interior_product(z, &ctx.omega_h);
    let izomega_ok = contraction.coeffs.iter().all(|c| ctx.cfg.test(&c.subst(&subs)));
    let tangency_ok = z
        .domain_constraints
        .iter()
        .all(|psi| ctx.cfg.test(&z.derive(psi, &chart).subst(&subs)));
    let _ = chain;
    CheckReport {
        name: "graph_refined_uniqueness".into(),
        passed: free_ok && izomega_ok && tangency_ok,
        details: json!({
            "free_params_empty": free_ok,
            "i_Z_omega_H_vanishes": izomega_ok,
            "tangency_residuals_vanish": tangency_ok,
        }),
    }
}

/// Correspondence between the two constraint sequences: the jet-side chain
/// computed independently from (ω_L, η̃) matches the mixed-space chain with
/// levels offset by one; its constraints pull back into the cumulative mixed
/// constraints, and its sampled points lift onto the mixed levels.
pub fn check_chain_correspondence(ctx: &SuiteContext, chain: &ConstraintChain) -> CheckReport {
    let opts = AlgoOptions::with_seed(ctx.cfg.seed);
    let jet_chain = run_presymplectic(&ctx.omega_l, &ctx.eta_jet, &opts);
    let mut passed = true;
    let mut details = serde_json::Map::new();

    let status_ok = match (chain.status, jet_chain.status) {
        (ChainStatus::Stabilized(k), ChainStatus::Stabilized(p)) => p + 1 == k,
        (a, b) => a == b,
    };
    passed &= status_ok;
    details.insert("status_offset_by_one".into(), json!(status_ok));

    // every jet-side constraint of P_ℓ, pulled back by pr₂ (same expression on
    // the mixed chart), vanishes modulo the cumulative M_{ℓ+1} solved forms
    let mut pullback_ok = true;
    for (lvl_idx, level) in jet_chain.levels.iter().enumerate() {
        if level.is_empty() {
            continue;
        }
        let mut subs = BTreeMap::new();
        for lv in &chain.levels[..=(lvl_idx + 1).min(chain.levels.len() - 1)] {
            for c in &lv.constraints {
                if let Some((coord, rhs)) = crate::constraints::try_solved_form(c) {
                    subs.insert(coord, rhs);
                }
            }
        }
        let subs = crate::constraints::resolved_substitutions(&subs);
        for psi in level {
            if !ctx.cfg.test(&psi.subst(&subs)) {
                pullback_ok = false;
            }
        }
    }
    passed &= pullback_ok;
    details.insert("jet_constraints_vanish_on_mixed_levels".into(), json!(pullback_ok));

    // surjectivity onto samples: jet-side witnesses lift through the graph
    // formulas into the corresponding mixed level
    let jet_chart = Chart::jet(ctx.spec.n);
    let graph = legendre_graph(&ctx.spec);
    let mut lift_ok = true;
    let mut lifted = 0usize;
    for (lvl_idx, _) in jet_chain.levels.iter().enumerate() {
        let cumulative_jet: Vec<Expr> = jet_chain.levels[..=lvl_idx].iter().flatten().cloned().collect();
        let witnesses = find_witnesses(&jet_chart, &cumulative_jet, &ctx.params, 5, ctx.cfg.seed ^ (0x11f + lvl_idx as u64));
        let mixed_idx = (lvl_idx + 1).min(chain.levels.len() - 1);
        let cumulative_mixed: Vec<Expr> = chain.levels[..=mixed_idx]
            .iter()
            .flat_map(|l| l.constraints.iter().cloned())
            .collect();
        for w in witnesses {
            let mut point: BTreeMap<Coord, f64> =
                jet_chart.coords().iter().copied().zip(w.iter().copied()).collect();
            for (i, p) in graph.momenta.iter().enumerate() {
                let Ok(v) = p.eval(&point, &ctx.params) else { continue };
                point.insert(Coord::Momentum(i as u32 + 1), v);
            }
            let Ok(tau) = graph.tau.eval(&point, &ctx.params) else { continue };
            point.insert(Coord::Tau, tau);
            for psi in &cumulative_mixed {
                if let Ok(v) = psi.eval(&point, &ctx.params) {
                    if v.abs() > 1e-9 {
                        lift_ok = false;
                    }
                    lifted += 1;
                }
            }
        }
    }
    passed &= lift_ok;
    details.insert("jet_witnesses_lift_onto_mixed_levels".into(), json!({
        "ok": lift_ok,
        "checks": lifted,
    }));

    CheckReport { name: "chain_correspondence".into(), passed, details: details.into() }
}

/// Symbolic/numeric agreement of the tangency residuals with the ♭ image
/// test: η ∈ ♭(T_x M_ℓ) exactly at sampled points of M_{ℓ+1} (the final
/// level is sampled on its second-order-consistent subset).
pub fn check_flat_agreement(
    ctx: &SuiteContext,
    chain: &ConstraintChain,
    z: &VectorFieldSpec,
) -> CheckReport {
    let chart = Chart::mixed(ctx.spec.n);
    let mut passed = true;
    let mut positives = 0usize;
    let mut negatives = 0usize;

    for idx in 1..chain.levels.len() {
        let cumulative: Vec<Expr> = chain.levels[..=idx]
            .iter()
            .flat_map(|l| l.constraints.iter().cloned())
            .collect();
        let is_final = idx == chain.levels.len() - 1;
        // points where a tangent solution exists: the next level (or, at the
        // final level, the SODE-consistent subset)
        let mut solvable_set = cumulative.clone();
        if is_final {
            solvable_set.extend(z.sode_residuals.iter().cloned());
        } else {
            solvable_set.extend(chain.levels[idx + 1].constraints.iter().cloned());
        }
        let on_points = find_witnesses(&chart, &solvable_set, &ctx.params, 8, ctx.cfg.seed ^ (0xf1a7 + idx as u64));
        for w in &on_points {
            let point = chart.point_map(w);
            match eta_in_flat_image(&ctx.omega_h, &ctx.eta, &cumulative, &point, &ctx.params) {
                Ok(true) => positives += 1,
                Ok(false) => {
                    passed = false;
                    positives += 1;
                }
                Err(_) => {}
            }
        }
        // points of the level that fail the next level's constraints: the
        // test must reject them
        if !is_final {
            let next_constraints = &chain.levels[idx + 1].constraints;
            let off_points = find_witnesses(&chart, &cumulative, &ctx.params, 8, ctx.cfg.seed ^ (0x0ff + idx as u64));
            for w in &off_points {
                let point = chart.point_map(w);
                let violates = next_constraints.iter().any(|psi| {
                    psi.eval(&point, &ctx.params).map(|v| v.abs() > 1e-6).unwrap_or(false)
                });
                if !violates {
                    continue;
                }
                match eta_in_flat_image(&ctx.omega_h, &ctx.eta, &cumulative, &point, &ctx.params) {
                    Ok(false) => negatives += 1,
                    Ok(true) => {
                        passed = false;
                        negatives += 1;
                    }
                    Err(_) => {}
                }
            }
        }
    }
    CheckReport {
        name: "flat_solvability_agreement".into(),
        passed,
        details: json!({"solvable_points": positives, "unsolvable_points": negatives}),
    }
}

/// Independent direct Euler-Lagrange reference trajectory on (t, q, q̇):
/// RK4 with accelerations from a per-step numeric Hessian solve.
pub fn reference_el_trajectory(
    spec: &SystemSpec,
    t0: f64,
    q0: &[f64],
    qd0: &[f64],
    h: f64,
    steps: usize,
    params: &BTreeMap<String, f64>,
) -> Result<Vec<Vec<f64>>, String> {
    let n = spec.n as usize;
    let chart = Chart::jet(spec.n);
    // q̈ = W⁻¹ (∂L/∂q − ∂²L/∂t∂q̇ − q̇ ∂²L/∂q∂q̇), derived here independently
    let mut w = vec![vec![Expr::zero(); n]; n];
    let mut b = vec![Expr::zero(); n];
    for a in 1..=spec.n {
        let dl = spec.lagrangian.diff(Coord::Velocity(a));
        for bb in 1..=spec.n {
            w[(a - 1) as usize][(bb - 1) as usize] = dl.diff(Coord::Velocity(bb));
        }
        let mut rhs = spec.lagrangian.diff(Coord::Position(a)) - dl.diff(Coord::Time);
        for bb in 1..=spec.n {
            rhs = rhs - Expr::qd(bb) * dl.diff(Coord::Position(bb));
        }
        b[(a - 1) as usize] = rhs;
    }

    let accel = |state: &[f64]| -> Result<Vec<f64>, String> {
        let point = chart.point_map(state);
        let mut wm = DMatrix::zeros(n, n);
        let mut bv = DVector::zeros(n);
        for i in 0..n {
            for j in 0..n {
                wm[(i, j)] = w[i][j].eval(&point, params).map_err(|e| e.to_string())?;
            }
            bv[i] = b[i].eval(&point, params).map_err(|e| e.to_string())?;
        }
        let sol = wm.lu().solve(&bv).ok_or("singular Hessian in EL reference")?;
        Ok(sol.iter().copied().collect())
    };
    let deriv = |state: &[f64]| -> Result<Vec<f64>, String> {
        let acc = accel(state)?;
        let mut d = Vec::with_capacity(2 * n + 1);
        d.push(1.0);
        d.extend_from_slice(&state[1 + n..]);
        d.extend_from_slice(&acc);
        Ok(d)
    };

    let mut state: Vec<f64> = Vec::with_capacity(2 * n + 1);
    state.push(t0);
    state.extend_from_slice(q0);
    state.extend_from_slice(qd0);
    let mut out = vec![state.clone()];
    for _ in 0..steps {
        let k1 = deriv(&state)?;
        let s2: Vec<f64> = state.iter().zip(&k1).map(|(x, k)| x + 0.5 * h * k).collect();
        let k2 = deriv(&s2)?;
        let s3: Vec<f64> = state.iter().zip(&k2).map(|(x, k)| x + 0.5 * h * k).collect();
        let k3 = deriv(&s3)?;
        let s4: Vec<f64> = state.iter().zip(&k3).map(|(x, k)| x + h * k).collect();
        let k4 = deriv(&s4)?;
        for i in 0..state.len() {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out.push(state.clone());
    }
    Ok(out)
}

fn default_ic(spec: &SystemSpec) -> InitialCondition {
    spec.initial_conditions.first().cloned().unwrap_or_else(|| InitialCondition {
        label: "default".to_string(),
        t0: 0.0,
        q: vec![1.0; spec.n as usize],
        qd: vec![0.0; spec.n as usize],
    })
}

/// Dynamic equivalence: integrate Z, project by pr₂, and compare against the
/// independent EL reference from the same initial condition (regular case);
/// for singular models, verify the Euler-Lagrange residuals vanish along the
/// projected flow started from a second-order-consistent point with free
/// parameters bound to zero.
pub fn check_equivalence_dynamic(
    ctx: &SuiteContext,
    chain: &ConstraintChain,
    opts: &SuiteOptions,
) -> CheckReport {
    let regular = chain.regularity.classification == Classification::Regular;
    let cfg = ZeroCfg::with_seed(opts.seed);
    if regular {
        let Ok(z) = solve_z(&ctx.spec, chain, SolveMode::GraphRefined, &cfg) else {
            return CheckReport {
                name: "dynamic_equivalence".into(),
                passed: false,
                details: json!("vector field solve failed"),
            };
        };
        let ic = default_ic(&ctx.spec);
        let params = ctx.spec.default_params();
        let x0 = match lift_initial_condition(&ctx.spec, chain, ic.t0, &ic.q, &ic.qd, &params) {
            Ok(x) => x,
            Err(e) => {
                return CheckReport {
                    name: "dynamic_equivalence".into(),
                    passed: false,
                    details: json!(format!("lift failed: {e}")),
                }
            }
        };
        let int_opts = IntegrateOptions::new(opts.h, opts.horizon);
        let traj = match integrate(&ctx.spec, &z, &x0, &int_opts) {
            Ok(t) => t,
            Err(e) => {
                return CheckReport {
                    name: "dynamic_equivalence".into(),
                    passed: false,
                    details: json!(format!("integration failed: {e}")),
                }
            }
        };
        let steps = traj.states.len() - 1;
        let reference = match reference_el_trajectory(&ctx.spec, ic.t0, &ic.q, &ic.qd, opts.h, steps, &params) {
            Ok(r) => r,
            Err(e) => {
                return CheckReport {
                    name: "dynamic_equivalence".into(),
                    passed: false,
                    details: json!(format!("reference integration failed: {e}")),
                }
            }
        };
        // compare projected (q, q̇) at every shared sample
        let mixed = traj.chart.clone();
        let mut max_gap = 0.0f64;
        for (s, r) in traj.states.iter().zip(&reference) {
            for a in 1..=ctx.spec.n {
                let iq = mixed.index_of(Coord::Position(a)).unwrap();
                let iqd = mixed.index_of(Coord::Velocity(a)).unwrap();
                max_gap = max_gap.max((s[iq] - r[a as usize]).abs());
                max_gap = max_gap.max((s[iqd] - r[(ctx.spec.n + a) as usize]).abs());
            }
        }
        let passed = max_gap <= 1e-8;
        CheckReport {
            name: "dynamic_equivalence".into(),
            passed,
            details: json!({
                "mode": "regular: two independent integrations",
                "max_pointwise_gap": max_gap,
                "tolerance": 1e-8,
                "samples": traj.states.len(),
                "h": opts.h,
                "horizon": opts.horizon,
            }),
        }
    } else {
        let Ok(z) = solve_z(&ctx.spec, chain, SolveMode::Raw, &cfg) else {
            return CheckReport {
                name: "dynamic_equivalence".into(),
                passed: false,
                details: json!("vector field solve failed"),
            };
        };
        // SODE-consistent initial condition: zero out velocities constrained
        // by the chain or appearing in the consistency residuals
        let params = ctx.spec.default_params();
        let ic = InitialCondition {
            label: "sode-consistent".into(),
            t0: 0.0,
            q: (0..ctx.spec.n).map(|i| 0.5 + 0.25 * i as f64).collect(),
            qd: vec![0.0; ctx.spec.n as usize],
        };
        let x0 = match lift_initial_condition(&ctx.spec, chain, ic.t0, &ic.q, &ic.qd, &params) {
            Ok(x) => x,
            Err(e) => {
                return CheckReport {
                    name: "dynamic_equivalence".into(),
                    passed: false,
                    details: json!(format!("lift failed: {e}")),
                }
            }
        };
        let mut int_opts = IntegrateOptions::new(opts.h, opts.horizon.min(2.0));
        for p in &z.free_params {
            int_opts.bindings.insert(p.clone(), 0.0);
        }
        let traj = match integrate(&ctx.spec, &z, &x0, &int_opts) {
            Ok(t) => t,
            Err(e) => {
                return CheckReport {
                    name: "dynamic_equivalence".into(),
                    passed: false,
                    details: json!(format!("integration failed: {e}")),
                }
            }
        };
        // EL residuals along the projected flow
        let jet = project_to_jet(&ctx.spec, &z);
        let residuals = el_residuals(&ctx.spec, &jet);
        let mut bindings = params.clone();
        for p in &z.free_params {
            bindings.insert(p.clone(), 0.0);
        }
        let mut max_residual = 0.0f64;
        for s in traj.states.iter().step_by(10) {
            let point = traj.chart.point_map(s);
            for r in &residuals {
                if let Ok(v) = r.eval(&point, &bindings) {
                    max_residual = max_residual.max(v.abs());
                }
            }
        }
        let passed = max_residual <= 1e-8;
        CheckReport {
            name: "dynamic_equivalence".into(),
            passed,
            details: json!({
                "mode": "singular: EL residuals along the projected flow (bindings = 0)",
                "max_el_residual": max_residual,
                "tolerance": 1e-8,
            }),
        }
    }
}

/// Full equivalence check: the chain correspondence plus the dynamic
/// cross-validation against the direct Euler-Lagrange route.
pub fn check_equivalence(
    ctx: &SuiteContext,
    chain: &ConstraintChain,
    opts: &SuiteOptions,
) -> Vec<CheckReport> {
    vec![check_chain_correspondence(ctx, chain), check_equivalence_dynamic(ctx, chain, opts)]
}

/// Energy balance along an integrated regular flow: finite-difference dτ/dt
/// matches eval(Z_τ) within 1e-5 at h = 1e-3, and E_L is conserved to 1e-8
/// for autonomous Lagrangians.
pub fn check_energy_balance(
    ctx: &SuiteContext,
    chain: &ConstraintChain,
    opts: &SuiteOptions,
) -> CheckReport {
    if chain.regularity.classification != Classification::Regular {
        return CheckReport {
            name: "energy_balance".into(),
            passed: true,
            details: json!("skipped: stated for integrated regular flows"),
        };
    }
    let cfg = ZeroCfg::with_seed(opts.seed);
    let z = match solve_z(&ctx.spec, chain, SolveMode::GraphRefined, &cfg) {
        Ok(z) => z,
        Err(e) => {
            return CheckReport {
                name: "energy_balance".into(),
                passed: false,
                details: json!(format!("solve failed: {e}")),
            }
        }
    };
    let params = ctx.spec.default_params();
    let ic = default_ic(&ctx.spec);
    let x0 = match lift_initial_condition(&ctx.spec, chain, ic.t0, &ic.q, &ic.qd, &params) {
        Ok(x) => x,
        Err(e) => {
            return CheckReport {
                name: "energy_balance".into(),
                passed: false,
                details: json!(format!("lift failed: {e}")),
            }
        }
    };
    let traj = match integrate(&ctx.spec, &z, &x0, &IntegrateOptions::new(opts.h, opts.horizon)) {
        Ok(t) => t,
        Err(e) => {
            return CheckReport {
                name: "energy_balance".into(),
                passed: false,
                details: json!(format!("integration failed: {e}")),
            }
        }
    };
    let chart = traj.chart.clone();
    let itau = chart.index_of(Coord::Tau).unwrap();
    let mut max_fd_gap = 0.0f64;
    let mut fd_ok = true;
    if let Some(ztau) = z.components.get(&Coord::Tau) {
        for k in 1..traj.states.len() - 1 {
            let fd = (traj.states[k + 1][itau] - traj.states[k - 1][itau]) / (2.0 * opts.h);
            let point = chart.point_map(&traj.states[k]);
            let Ok(exact) = ztau.eval(&point, &params) else { continue };
            max_fd_gap = max_fd_gap.max((fd - exact).abs());
        }
        fd_ok = max_fd_gap <= 1e-5;
    }

    let autonomous = !ctx.spec.lagrangian.coords().contains(&Coord::Time);
    let mut energy_drift = 0.0f64;
    if autonomous {
        let energy = crate::legendre::energy_function(&ctx.spec);
        let e0 = energy.eval(&chart.point_map(&traj.states[0]), &params).unwrap_or(f64::NAN);
        for s in traj.states.iter().step_by(25) {
            if let Ok(e) = energy.eval(&chart.point_map(s), &params) {
                energy_drift = energy_drift.max((e - e0).abs());
            }
        }
    }
    let energy_ok = !autonomous || energy_drift <= 1e-8;
    CheckReport {
        name: "energy_balance".into(),
        passed: fd_ok && energy_ok,
        details: json!({
            "max_fd_vs_Ztau_gap": max_fd_gap,
            "fd_tolerance": 1e-5,
            "autonomous": autonomous,
            "energy_drift": if autonomous { json!(energy_drift) } else { json!("n/a") },
            "energy_tolerance": 1e-8,
        }),
    }
}

/// Run the full verification suite for a model.
pub fn run_suite(spec: &SystemSpec, opts: &SuiteOptions) -> VerificationReport {
    let ctx = SuiteContext::new(spec, opts);
    let algo = AlgoOptions::with_seed(opts.seed);
    let mut checks = Vec::new();

    let chain = match run_algorithm(spec, &algo) {
        Ok(c) => c,
        Err(ChainError::VariableRank(msg)) => {
            checks.push(CheckReport {
                name: "constraint_algorithm".into(),
                passed: false,
                details: json!(format!("variable-rank Hessian: {msg}")),
            });
            return VerificationReport {
                model: spec.display_name(),
                classification: "VariableRank".into(),
                seed: opts.seed,
                points: opts.points,
                all_passed: false,
                checks,
            };
        }
        Err(e) => {
            checks.push(CheckReport {
                name: "constraint_algorithm".into(),
                passed: false,
                details: json!(e.to_string()),
            });
            return VerificationReport {
                model: spec.display_name(),
                classification: "unknown".into(),
                seed: opts.seed,
                points: opts.points,
                all_passed: false,
                checks,
            };
        }
    };
    let classification = chain.regularity.classification;

    checks.push(check_rank_relations(&ctx));
    checks.push(check_cosymplectic_l(&ctx, classification));
    checks.push(check_kernel_direction(&ctx));
    checks.push(check_pullback_identity(&ctx));

    let cfg = ZeroCfg::with_seed(opts.seed);
    if chain.is_stabilized() {
        checks.extend(check_equivalence(&ctx, &chain, opts));
        if let Ok(z) = solve_z(spec, &chain, SolveMode::Raw, &cfg) {
            checks.push(check_flat_agreement(&ctx, &chain, &z));
        }
        if classification == Classification::Regular {
            if let Ok(z) = solve_z(spec, &chain, SolveMode::GraphRefined, &cfg) {
                checks.push(check_uniqueness(&ctx, &chain, &z));
            }
        }
        checks.push(check_energy_balance(&ctx, &chain, opts));
    } else {
        checks.push(check_chain_correspondence(&ctx, &chain));
    }

    let all_passed = checks.iter().all(|c| c.passed);
    VerificationReport {
        model: spec.display_name(),
        classification: format!("{classification:?}"),
        seed: opts.seed,
        points: opts.points,
        all_passed,
        checks,
    }
}
