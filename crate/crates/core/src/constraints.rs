//! The precosymplectic constraint algorithm on (M₁, ω_H, η).
//!
//! Level 1 is the whole mixed space. Level 2 carries the primary constraints
//! p_A − ∂L/∂q̇^A (the submanifold M_L, where a pointwise solution of
//! i_Zω_H = 0, i_Zη = 1 exists). Each later level demands that the solution
//! family stay tangent to the constraints introduced by the level before:
//! the undetermined components (Z_q̇, Z_τ) are eliminated by symbolic row
//! reduction and the unsolvable residuals, reduced modulo the cumulative
//! solved forms, become the next level's constraints. The chain stabilizes
//! when every residual already vanishes on the current level.
//!
//! Constraint functions stay symbolic; "submanifold" is operationalized as a
//! constraint list plus sampled witness points. Witnesses come from solved
//! forms where available and a damped Newton search otherwise. Pointwise
//! checks go through the ♭ morphism v ↦ i_vΩ + (i_vη)η, whose image test
//! η ∈ ♭(T_xP) characterizes the next level numerically.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{Coord, Expr, ZeroCfg};
use crate::geometry::{build_eta, build_omega_h, matrix_rank, Chart, OneForm, TwoForm, RANK_SVD_TOL};
use crate::legendre::{hessian_report, sampled_params, Classification, RegularityReport};
use crate::model::SystemSpec;

pub const DEFAULT_MAX_LEVELS: usize = 10;
pub const DEFAULT_WITNESSES_PER_LEVEL: usize = 20;
/// Witness points must satisfy their level's constraints to this tolerance.
pub const WITNESS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Error)]
pub enum ChainError {
    #[error("constraint algorithm requires a constant-rank Hessian; {0}")]
    VariableRank(String),
    #[error("parameter `{0}` has no default value; bind it before analysis")]
    UnboundParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ChainStatus {
    /// Level k+1 added no new independent constraint.
    Stabilized(usize),
    /// Constraints are jointly unsatisfiable; the final set is empty.
    EmptyFinal,
    MaxIterationsExceeded,
}

#[derive(Debug, Clone)]
pub struct ConstraintLevel {
    pub level: usize,
    pub constraints: Vec<Expr>,
}

#[derive(Debug, Clone)]
pub struct FreeDirectionsAt {
    pub point: Vec<f64>,
    pub dim: usize,
    pub directions: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ConstraintChain {
    pub levels: Vec<ConstraintLevel>,
    pub status: ChainStatus,
    /// Cumulative solved-form constraints (coordinate = expression).
    pub substitutions: BTreeMap<Coord, Expr>,
    /// Cumulative constraints that could not be put in solved form.
    pub unsolved: Vec<Expr>,
    /// Sampled witness points per level (mixed chart order).
    pub witnesses: Vec<Vec<Vec<f64>>>,
    /// ker ω_H ∩ ker η ∩ T M_f sampled at final-level witnesses.
    pub free_directions: Vec<FreeDirectionsAt>,
    pub regularity: RegularityReport,
}

impl ConstraintChain {
    pub fn cumulative(&self) -> Vec<Expr> {
        self.levels.iter().flat_map(|l| l.constraints.iter().cloned()).collect()
    }

    pub fn is_stabilized(&self) -> bool {
        matches!(self.status, ChainStatus::Stabilized(_))
    }

    pub fn final_level(&self) -> &ConstraintLevel {
        self.levels.last().expect("chain has at least level 1")
    }

    pub fn report(&self) -> ChainReport {
        ChainReport {
            levels: self
                .levels
                .iter()
                .map(|l| LevelReport {
                    level: l.level,
                    constraints: l.constraints.iter().map(|c| c.to_string()).collect(),
                    witness_points: self
                        .witnesses
                        .get(l.level - 1)
                        .cloned()
                        .unwrap_or_default(),
                })
                .collect(),
            status: match self.status {
                ChainStatus::Stabilized(k) => format!("stabilized at level {k}"),
                ChainStatus::EmptyFinal => "empty final constraint set".to_string(),
                ChainStatus::MaxIterationsExceeded => "max iterations exceeded".to_string(),
            },
            stabilized_at: match self.status {
                ChainStatus::Stabilized(k) => Some(k),
                _ => None,
            },
            free_directions: self
                .free_directions
                .iter()
                .map(|fd| FreeDirectionsReport {
                    dim: fd.dim,
                    directions: fd.directions.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelReport {
    pub level: usize,
    pub constraints: Vec<String>,
    pub witness_points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FreeDirectionsReport {
    pub dim: usize,
    pub directions: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainReport {
    pub levels: Vec<LevelReport>,
    pub status: String,
    pub stabilized_at: Option<usize>,
    pub free_directions: Vec<FreeDirectionsReport>,
}

#[derive(Debug, Clone, Copy)]
pub struct AlgoOptions {
    pub max_levels: usize,
    pub zero: ZeroCfg,
    pub witnesses_per_level: usize,
}

impl Default for AlgoOptions {
    fn default() -> Self {
        AlgoOptions {
            max_levels: DEFAULT_MAX_LEVELS,
            zero: ZeroCfg::default(),
            witnesses_per_level: DEFAULT_WITNESSES_PER_LEVEL,
        }
    }
}

impl AlgoOptions {
    pub fn with_seed(seed: u64) -> Self {
        AlgoOptions { zero: ZeroCfg::with_seed(seed), ..Default::default() }
    }
}

// ----- symbolic linear solving --------------------------------------------------

/// One linear equation Σ `coeffs[j]` · x_j = rhs over the expression field.
#[derive(Debug, Clone)]
pub struct LinRow {
    pub coeffs: Vec<Expr>,
    pub rhs: Expr,
}

#[derive(Debug, Clone)]
pub struct LinSolution {
    /// Per unknown: the solved expression (free unknowns carry their own
    /// fresh parameter symbol).
    pub assignments: Vec<Expr>,
    pub free: Vec<(usize, String)>,
    /// Expressions that must vanish for the system to be consistent.
    pub residuals: Vec<Expr>,
}

/// Pivot preference for the symbolic elimination. The Hessian-block tangency
/// solve uses largest-degree-first; the generic existence systems prefer
/// constant pivots, which cannot vanish on the (yet unknown) constraint
/// locus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PivotRule {
    LargestDegree,
    SmallestDegree,
}

/// Symbolic Gaussian elimination. Pivots are entries that do not vanish under
/// the probabilistic zero test, ranked by the pivot rule's degree preference,
/// then largest magnitude at a seeded sample point, ties broken by lowest
/// (row, column). Free unknowns become named parameter symbols; rows whose
/// coefficients all vanish leave their right-hand side as a residual.
pub fn solve_rows(
    rows: Vec<LinRow>,
    nvars: usize,
    free_name: impl FnMut(usize) -> String,
    cfg: &ZeroCfg,
) -> LinSolution {
    solve_rows_with(rows, nvars, free_name, cfg, PivotRule::LargestDegree)
}

#[allow(clippy::needless_range_loop)] // explicit indexing across parallel row/column state
pub fn solve_rows_with(
    rows: Vec<LinRow>,
    nvars: usize,
    mut free_name: impl FnMut(usize) -> String,
    cfg: &ZeroCfg,
    rule: PivotRule,
) -> LinSolution {
    let mut rows: Vec<LinRow> = rows
        .into_iter()
        .map(|r| LinRow {
            coeffs: r.coeffs.iter().map(|c| c.simplify()).collect(),
            rhs: r.rhs.simplify(),
        })
        .collect();
    let nrows = rows.len();
    let mut pivot_of_row: Vec<Option<usize>> = vec![None; nrows];
    let mut col_pivoted = vec![false; nvars];

    loop {
        // candidate pivot search
        let mut best: Option<(i64, f64, usize, usize)> = None;
        for (r, row) in rows.iter().enumerate() {
            if pivot_of_row[r].is_some() {
                continue;
            }
            for c in 0..nvars {
                if col_pivoted[c] || row.coeffs[c].is_const_zero() {
                    continue;
                }
                if cfg.test(&row.coeffs[c]) {
                    continue;
                }
                let deg = match rule {
                    PivotRule::LargestDegree => row.coeffs[c].degree().min(i64::MAX as u64) as i64,
                    PivotRule::SmallestDegree => {
                        -(row.coeffs[c].degree().min(i64::MAX as u64) as i64)
                    }
                };
                let mag = cfg.sample_magnitude(&row.coeffs[c]);
                let better = match &best {
                    None => true,
                    Some((bdeg, bmag, br, bc)) => {
                        (deg, mag) > (*bdeg, *bmag)
                            || ((deg, mag) == (*bdeg, *bmag) && (r, c) < (*br, *bc))
                    }
                };
                if better {
                    best = Some((deg, mag, r, c));
                }
            }
        }
        let Some((_, _, pr, pc)) = best else { break };
        pivot_of_row[pr] = Some(pc);
        col_pivoted[pc] = true;
        let pivot_row = rows[pr].clone();
        let pivot = pivot_row.coeffs[pc].clone();
        for r in 0..nrows {
            if r == pr || rows[r].coeffs[pc].is_const_zero() {
                continue;
            }
            let factor = rows[r].coeffs[pc].clone() / pivot.clone();
            for c in 0..nvars {
                if c == pc {
                    rows[r].coeffs[c] = Expr::zero();
                } else if !pivot_row.coeffs[c].is_const_zero() {
                    rows[r].coeffs[c] =
                        (rows[r].coeffs[c].clone() - factor.clone() * pivot_row.coeffs[c].clone()).simplify();
                }
            }
            rows[r].rhs = (rows[r].rhs.clone() - factor * pivot_row.rhs.clone()).simplify();
        }
    }

    // free unknowns get named symbols, in unknown order
    let mut assignments: Vec<Expr> = vec![Expr::zero(); nvars];
    let mut free = Vec::new();
    for c in 0..nvars {
        if !col_pivoted[c] {
            let name = free_name(c);
            assignments[c] = Expr::param(name.clone());
            free.push((c, name));
        }
    }
    // solved unknowns by back-substitution of free symbols only (cross-row
    // elimination already cleared other pivot columns)
    for r in 0..nrows {
        if let Some(pc) = pivot_of_row[r] {
            let mut rhs = rows[r].rhs.clone();
            for c in 0..nvars {
                if c != pc && !rows[r].coeffs[c].is_const_zero() && !col_pivoted[c] {
                    rhs = rhs - rows[r].coeffs[c].clone() * assignments[c].clone();
                }
            }
            assignments[pc] = (rhs / rows[r].coeffs[pc].clone()).simplify();
        }
    }
    // rows without a pivot: every coefficient vanished, the rhs must too
    let mut residuals = Vec::new();
    for r in 0..nrows {
        if pivot_of_row[r].is_none() && !cfg.test(&rows[r].rhs) {
            residuals.push(rows[r].rhs.clone());
        }
    }
    LinSolution { assignments, free, residuals }
}

// ----- constraint handling helpers ----------------------------------------------

/// Scale a constraint by the reciprocal of its leading rational coefficient
/// (sign-normalizing; only constant scaling, so the zero set is unchanged).
pub fn normalize_constraint(e: &Expr) -> Expr {
    let lead = e.leading_coefficient();
    (e / &Expr::num(lead)).simplify()
}

/// Try to put a constraint in solved form `coordinate = expression`: find a
/// coordinate with constant rational coefficient whose remainder is free of
/// it. Preference order: momenta, velocities, τ, positions.
pub fn try_solved_form(e: &Expr) -> Option<(Coord, Expr)> {
    let mut candidates: Vec<Coord> = e.coords().into_iter().collect();
    candidates.sort_by_key(|c| match c {
        Coord::Momentum(a) => (0u8, *a),
        Coord::Velocity(a) => (1, *a),
        Coord::Tau => (2, 0),
        Coord::Position(a) => (3, *a),
        Coord::Time => (4, 0),
    });
    for c in candidates {
        if c == Coord::Time {
            continue;
        }
        let a = e.diff(c);
        let Some(r) = a.as_rational().cloned() else { continue };
        if r == crate::expr::Rational::from_integer(0.into()) {
            continue;
        }
        let rest = (e.clone() - Expr::num(r.clone()) * Expr::coord(c)).simplify();
        if !rest.coords().contains(&c) {
            return Some((c, (-rest / Expr::num(r)).simplify()));
        }
    }
    None
}

/// Fully resolve solved forms so each right-hand side is free of every solved
/// coordinate (fixpoint substitution).
pub fn resolved_substitutions(subs: &BTreeMap<Coord, Expr>) -> BTreeMap<Coord, Expr> {
    subs.iter().map(|(c, e)| (*c, e.subst(subs))).collect()
}

// ----- the Skinner-Rusk chain ----------------------------------------------------

/// Level-2 constraints φ_A = p_A − ∂L/∂q̇^A (the submanifold M_L = M₂).
pub fn primary_constraints(spec: &SystemSpec) -> ConstraintLevel {
    let constraints = (1..=spec.n)
        .map(|a| Expr::p(a) - spec.lagrangian.diff(Coord::Velocity(a)))
        .collect();
    ConstraintLevel { level: 2, constraints }
}

/// Forced components of the candidate family solving i_Zω_H = 0, i_Zη = 1 on
/// M_L: Z_t = 1, Z_{q^A} = q̇^A, Z_{p_A} = ∂L/∂q^A. The q̇- and τ-components
/// stay undetermined and feed the tangency solve.
pub fn forced_components(spec: &SystemSpec) -> BTreeMap<Coord, Expr> {
    let mut out = BTreeMap::new();
    out.insert(Coord::Time, Expr::one());
    for a in 1..=spec.n {
        out.insert(Coord::Position(a), Expr::qd(a));
        out.insert(Coord::Momentum(a), spec.lagrangian.diff(Coord::Position(a)));
    }
    out
}

/// The directional derivative Z(ψ) split into a linear row over the unknowns
/// (Z_q̇^1, …, Z_q̇^n, Z_τ): returns (coefficients, forced part).
pub fn tangency_row(spec: &SystemSpec, psi: &Expr) -> (Vec<Expr>, Expr) {
    let n = spec.n as usize;
    let forced = forced_components(spec);
    let mut coeffs = Vec::with_capacity(n + 1);
    for a in 1..=spec.n {
        coeffs.push(psi.diff(Coord::Velocity(a)));
    }
    coeffs.push(psi.diff(Coord::Tau));
    let mut known = Expr::zero();
    for (c, zc) in &forced {
        known = known + zc.clone() * psi.diff(*c);
    }
    (coeffs, known)
}

pub enum TangencyOutcome {
    NewLevel(ConstraintLevel),
    Stabilized,
    /// A residual reduced to a nonzero constant: no point satisfies it.
    Empty(Expr),
}

/// One step of the algorithm: require the solution family to be tangent to
/// the constraints the previous level introduced. Residuals in the cokernel
/// of the velocity-Hessian block (reduced modulo cumulative solved forms)
/// become the next level; Stabilized when every residual already vanishes.
pub fn tangency_step(
    spec: &SystemSpec,
    newest: &[Expr],
    substitutions: &BTreeMap<Coord, Expr>,
    next_level: usize,
    cfg: &ZeroCfg,
) -> TangencyOutcome {
    let n = spec.n as usize;
    let subs = resolved_substitutions(substitutions);
    let rows: Vec<LinRow> = newest
        .iter()
        .map(|psi| {
            let (coeffs, known) = tangency_row(spec, psi);
            LinRow {
                coeffs: coeffs.into_iter().map(|c| c.subst(&subs)).collect(),
                rhs: (-known).subst(&subs),
            }
        })
        .collect();
    let sol = solve_rows(rows, n + 1, |c| format!("w{c}"), cfg);
    let mut fresh = Vec::new();
    for r in &sol.residuals {
        let reduced = r.subst(&subs).simplify();
        if cfg.test(&reduced) {
            continue;
        }
        let normalized = normalize_constraint(&reduced);
        if normalized.as_rational().is_some() {
            return TangencyOutcome::Empty(normalized);
        }
        if fresh.contains(&normalized) {
            continue;
        }
        fresh.push(normalized);
    }
    if fresh.is_empty() {
        TangencyOutcome::Stabilized
    } else {
        TangencyOutcome::NewLevel(ConstraintLevel { level: next_level, constraints: fresh })
    }
}

/// Run the full constraint algorithm for a model.
pub fn run_algorithm(spec: &SystemSpec, opts: &AlgoOptions) -> Result<ConstraintChain, ChainError> {
    let regularity = hessian_report(spec, crate::legendre::DEFAULT_HESSIAN_SAMPLES, opts.zero.seed);
    if regularity.classification == Classification::VariableRank {
        return Err(ChainError::VariableRank(format!(
            "Hessian determinant {} changes rank across sample points",
            regularity.determinant
        )));
    }

    let mut levels = vec![ConstraintLevel { level: 1, constraints: Vec::new() }];
    let mut substitutions: BTreeMap<Coord, Expr> = BTreeMap::new();
    let mut unsolved: Vec<Expr> = Vec::new();

    let absorb = |level: &ConstraintLevel,
                      substitutions: &mut BTreeMap<Coord, Expr>,
                      unsolved: &mut Vec<Expr>| {
        for c in &level.constraints {
            match try_solved_form(c) {
                Some((coord, rhs)) => {
                    substitutions.insert(coord, rhs);
                }
                None => unsolved.push(c.clone()),
            }
        }
    };

    let primary = primary_constraints(spec);
    absorb(&primary, &mut substitutions, &mut unsolved);
    levels.push(primary);

    let mut status = ChainStatus::MaxIterationsExceeded;
    while levels.len() < opts.max_levels {
        let newest = &levels.last().unwrap().constraints;
        match tangency_step(spec, newest, &substitutions, levels.len() + 1, &opts.zero) {
            TangencyOutcome::Stabilized => {
                status = ChainStatus::Stabilized(levels.len());
                break;
            }
            TangencyOutcome::Empty(_) => {
                status = ChainStatus::EmptyFinal;
                break;
            }
            TangencyOutcome::NewLevel(level) => {
                absorb(&level, &mut substitutions, &mut unsolved);
                levels.push(level);
            }
        }
    }

    // witness points per level
    let chart = Chart::mixed(spec.n);
    let params = sampled_params(spec, opts.zero.seed);
    let mut witnesses = Vec::new();
    for l in 0..levels.len() {
        let cumulative: Vec<Expr> =
            levels[..=l].iter().flat_map(|lv| lv.constraints.iter().cloned()).collect();
        witnesses.push(find_witnesses(
            &chart,
            &cumulative,
            &params,
            opts.witnesses_per_level,
            opts.zero.seed ^ (l as u64),
        ));
    }
    if matches!(status, ChainStatus::Stabilized(_))
        && witnesses.last().map(|w| w.is_empty()).unwrap_or(false)
    {
        status = ChainStatus::EmptyFinal;
    }

    // free directions at final-level witnesses
    let omega_h = build_omega_h(spec);
    let eta = build_eta(spec.n);
    let cumulative = levels.iter().flat_map(|l| l.constraints.iter().cloned()).collect::<Vec<_>>();
    let mut free_directions = Vec::new();
    if let Some(final_witnesses) = witnesses.last() {
        for w in final_witnesses.iter().take(5) {
            let point = chart.point_map(w);
            if let Ok(fd) = free_directions_at(&omega_h, &eta, &cumulative, &point, &params) {
                free_directions.push(FreeDirectionsAt {
                    point: w.clone(),
                    dim: fd.ncols(),
                    directions: describe_directions(&chart, &fd),
                });
            }
        }
    }

    Ok(ConstraintChain {
        levels,
        status,
        substitutions,
        unsolved,
        witnesses,
        free_directions,
        regularity,
    })
}

// ----- generic presymplectic chain ------------------------------------------------

/// Chain produced by the constraint algorithm on an arbitrary triple
/// (chart, Ω, η), e.g. (J¹π, ω_L, η̃) for the Lagrangian-side sequence.
#[derive(Debug, Clone)]
pub struct GenericChain {
    /// `levels[k]` holds the constraints added at level k+1 (`levels[0]` empty).
    pub levels: Vec<Vec<Expr>>,
    pub status: ChainStatus,
    pub substitutions: BTreeMap<Coord, Expr>,
    /// Solution family of i_XΩ = 0, i_Xη = 1 on the final level (chart order);
    /// free components carry named symbols.
    pub assignments: Vec<Expr>,
    pub free: Vec<(usize, String)>,
}

impl GenericChain {
    pub fn cumulative(&self) -> Vec<Expr> {
        self.levels.iter().flatten().cloned().collect()
    }
}

/// Run the constraint algorithm for (chart, Ω, η): each level solves
/// i_XΩ = 0, i_Xη = 1 in all components (reduced modulo the cumulative solved
/// forms) together with tangency to the newest constraints; inconsistency
/// residuals become the next level.
pub fn run_presymplectic(
    omega: &TwoForm,
    eta: &OneForm,
    opts: &AlgoOptions,
) -> GenericChain {
    let chart = omega.chart.clone();
    let dim = chart.dim();
    let mut levels: Vec<Vec<Expr>> = vec![Vec::new()];
    let mut substitutions: BTreeMap<Coord, Expr> = BTreeMap::new();
    let mut status = ChainStatus::MaxIterationsExceeded;
    let mut last_solution: Option<LinSolution> = None;

    loop {
        let subs = resolved_substitutions(&substitutions);
        let mut rows: Vec<LinRow> = Vec::new();
        // i_XΩ = 0: one row per coordinate direction j
        for j in 0..dim {
            let coeffs: Vec<Expr> =
                (0..dim).map(|i| omega.coeffs[i][j].subst(&subs)).collect();
            if coeffs.iter().all(|c| c.is_const_zero()) {
                continue;
            }
            rows.push(LinRow { coeffs, rhs: Expr::zero() });
        }
        // i_Xη = 1
        rows.push(LinRow {
            coeffs: eta.coeffs.iter().map(|c| c.subst(&subs)).collect(),
            rhs: Expr::one(),
        });
        // tangency to the newest constraints
        for psi in levels.last().unwrap() {
            let coeffs: Vec<Expr> =
                chart.coords().iter().map(|&c| psi.diff(c).subst(&subs)).collect();
            rows.push(LinRow { coeffs, rhs: Expr::zero() });
        }

        let sol = solve_rows_with(rows, dim, |c| format!("v{c}"), &opts.zero, PivotRule::SmallestDegree);
        let mut fresh = Vec::new();
        let mut empty = false;
        for r in &sol.residuals {
            let reduced = r.subst(&subs).simplify();
            if opts.zero.test(&reduced) {
                continue;
            }
            let normalized = normalize_constraint(&reduced);
            if normalized.as_rational().is_some() {
                empty = true;
                break;
            }
            if !fresh.contains(&normalized) {
                fresh.push(normalized);
            }
        }
        if empty {
            status = ChainStatus::EmptyFinal;
            last_solution = Some(sol);
            break;
        }
        if fresh.is_empty() {
            status = ChainStatus::Stabilized(levels.len());
            last_solution = Some(sol);
            break;
        }
        if levels.len() >= opts.max_levels {
            break;
        }
        for c in &fresh {
            if let Some((coord, rhs)) = try_solved_form(c) {
                substitutions.insert(coord, rhs);
            }
        }
        levels.push(fresh);
    }

    let (assignments, free) = match last_solution {
        Some(sol) => (sol.assignments, sol.free),
        None => ((0..dim).map(|_| Expr::zero()).collect(), Vec::new()),
    };
    GenericChain { levels, status, substitutions, assignments, free }
}

// ----- numeric machinery ---------------------------------------------------------

/// The ♭ morphism at a point as a matrix: ♭(v) = i_vΩ + (i_vη)η, i.e.
/// B = Ωᵀ + η ηᵀ on column vectors of components.
pub fn flat_map(
    form: &TwoForm,
    eta: &OneForm,
    point: &BTreeMap<Coord, f64>,
    params: &BTreeMap<String, f64>,
) -> Result<DMatrix<f64>, crate::expr::EvalError> {
    let omega = form.eval_matrix(point, params)?;
    let eta_v = DVector::from_vec(eta.eval(point, params)?);
    Ok(omega.transpose() + &eta_v * eta_v.transpose())
}

/// Basis of the null space of `m` (columns), via SVD.
pub fn null_space(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let ncols = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::identity(ncols, ncols);
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("svd with v requested");
    let sv = svd.singular_values;
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    let rank = if max == 0.0 { 0 } else { sv.iter().filter(|&&s| s > rel_tol * max).count() };
    let null_dim = ncols - rank;
    let mut out = DMatrix::zeros(ncols, null_dim);
    for (k, row) in (rank..v_t.nrows()).enumerate() {
        out.set_column(k, &v_t.row(row).transpose());
    }
    // rows of v_t span only min(nrows, ncols) directions; pad via QR if the
    // matrix was wide enough to leave implicit null directions
    if v_t.nrows() < ncols {
        // complete the basis: null space of m == null space of mᵀm
        let gram = m.transpose() * m;
        return null_space(&gram, rel_tol);
    }
    out
}

/// Jacobian of a constraint list at a point (rows = constraints).
pub fn constraint_jacobian(
    chart: &Chart,
    constraints: &[Expr],
    point: &BTreeMap<Coord, f64>,
    params: &BTreeMap<String, f64>,
) -> Result<DMatrix<f64>, crate::expr::EvalError> {
    let mut j = DMatrix::zeros(constraints.len(), chart.dim());
    for (r, psi) in constraints.iter().enumerate() {
        for (c, &coord) in chart.coords().iter().enumerate() {
            j[(r, c)] = psi.diff(coord).eval(point, params)?;
        }
    }
    Ok(j)
}

/// Does η lie in ♭(T_xP) for the submanifold cut out by `constraints`?
pub fn eta_in_flat_image(
    form: &TwoForm,
    eta: &OneForm,
    constraints: &[Expr],
    point: &BTreeMap<Coord, f64>,
    params: &BTreeMap<String, f64>,
) -> Result<bool, crate::expr::EvalError> {
    let b = flat_map(form, eta, point, params)?;
    let j = constraint_jacobian(&form.chart, constraints, point, params)?;
    let tangent = null_space(&j, RANK_SVD_TOL);
    let bt = &b * &tangent;
    let eta_v = DVector::from_vec(eta.eval(point, params)?);
    let rank_plain = matrix_rank(&bt, RANK_SVD_TOL);
    let mut augmented = DMatrix::zeros(bt.nrows(), bt.ncols() + 1);
    augmented.view_mut((0, 0), (bt.nrows(), bt.ncols())).copy_from(&bt);
    augmented.set_column(bt.ncols(), &eta_v);
    Ok(matrix_rank(&augmented, RANK_SVD_TOL) == rank_plain)
}

/// ker ω_H ∩ ker η ∩ T M_f at a point, as a column basis.
pub fn free_directions_at(
    omega_h: &TwoForm,
    eta: &OneForm,
    constraints: &[Expr],
    point: &BTreeMap<Coord, f64>,
    params: &BTreeMap<String, f64>,
) -> Result<DMatrix<f64>, crate::expr::EvalError> {
    let dim = omega_h.chart.dim();
    let omega = omega_h.eval_matrix(point, params)?;
    let eta_v = DVector::from_vec(eta.eval(point, params)?);
    let j = constraint_jacobian(&omega_h.chart, constraints, point, params)?;
    let mut stacked = DMatrix::zeros(dim + 1 + j.nrows(), dim);
    stacked.view_mut((0, 0), (dim, dim)).copy_from(&omega);
    stacked.view_mut((dim, 0), (1, dim)).copy_from(&eta_v.transpose());
    if j.nrows() > 0 {
        stacked.view_mut((dim + 1, 0), (j.nrows(), dim)).copy_from(&j);
    }
    Ok(null_space(&stacked, RANK_SVD_TOL))
}

fn describe_directions(chart: &Chart, basis: &DMatrix<f64>) -> Vec<String> {
    let mut out = Vec::new();
    for k in 0..basis.ncols() {
        let col = basis.column(k);
        let mut parts: Vec<(f64, String)> = Vec::new();
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > 0.1 {
                parts.push((v.abs(), format!("d/d{}", chart.coord(i).name())));
            }
        }
        parts.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        out.push(parts.into_iter().map(|(_, s)| s).collect::<Vec<_>>().join(" , "));
    }
    out
}

/// Sample points satisfying the given constraints: solved forms are imposed
/// directly, remaining constraints are polished by a damped Newton search.
pub fn find_witnesses(
    chart: &Arc<Chart>,
    constraints: &[Expr],
    params: &BTreeMap<String, f64>,
    count: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut subs: BTreeMap<Coord, Expr> = BTreeMap::new();
    let mut remaining: Vec<Expr> = Vec::new();
    for c in constraints {
        match try_solved_form(&c.subst(&subs)) {
            Some((coord, rhs)) => {
                subs.insert(coord, rhs);
            }
            None => remaining.push(c.clone()),
        }
    }
    let resolved = resolved_substitutions(&subs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77a1be55);
    let mut out = Vec::new();
    'attempts: for _ in 0..count * 8 {
        if out.len() >= count {
            break;
        }
        let mut point: BTreeMap<Coord, f64> = BTreeMap::new();
        for &c in chart.coords() {
            if !resolved.contains_key(&c) {
                point.insert(c, rng.random_range(-2.0..2.0));
            }
        }
        for (&c, e) in &resolved {
            match e.eval(&point, params) {
                Ok(v) => {
                    point.insert(c, v);
                }
                Err(_) => continue 'attempts,
            }
        }
        let mut xs: Vec<f64> = chart.coords().iter().map(|c| point[c]).collect();
        if !remaining.is_empty() {
            match newton_project(chart, &remaining, &xs, params) {
                Some(fixed) => xs = fixed,
                None => continue,
            }
        }
        let full = chart.point_map(&xs);
        let ok = constraints.iter().all(|c| {
            c.eval(&full, params).map(|v| v.abs() <= WITNESS_TOL).unwrap_or(false)
        });
        if ok {
            out.push(xs);
        }
    }
    out
}

/// Damped Newton iteration driving the constraint residuals to zero.
fn newton_project(
    chart: &Chart,
    constraints: &[Expr],
    start: &[f64],
    params: &BTreeMap<String, f64>,
) -> Option<Vec<f64>> {
    let mut xs = start.to_vec();
    for _ in 0..50 {
        let point = chart.point_map(&xs);
        let mut f = DVector::zeros(constraints.len());
        for (i, c) in constraints.iter().enumerate() {
            f[i] = c.eval(&point, params).ok()?;
        }
        let norm = f.amax();
        if norm <= WITNESS_TOL {
            return Some(xs);
        }
        let j = constraint_jacobian(chart, constraints, &point, params).ok()?;
        let step = j.svd(true, true).solve(&f, RANK_SVD_TOL).ok()?;
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..8 {
            let trial: Vec<f64> =
                xs.iter().zip(step.iter()).map(|(x, s)| x - lambda * s).collect();
            let tp = chart.point_map(&trial);
            let mut ok = true;
            let mut tnorm = 0.0f64;
            for c in constraints {
                match c.eval(&tp, params) {
                    Ok(v) => tnorm = tnorm.max(v.abs()),
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok && tnorm < norm {
                xs = trial;
                improved = true;
                break;
            }
            lambda *= 0.5;
        }
        if !improved {
            return None;
        }
    }
    None
}
