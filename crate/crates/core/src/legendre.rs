//! Hessian analysis, regularity classification, the extended Legendre map
//! and its graph, and the Lagrangian energy function.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::expr::{Coord, Expr};
use crate::geometry::{matrix_rank, Chart, ChartMap, RANK_SVD_TOL};
use crate::model::SystemSpec;

pub const DEFAULT_HESSIAN_SAMPLES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Classification {
    Regular,
    ConstantRankSingular(usize),
    VariableRank,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Classification::Regular => write!(f, "Regular"),
            Classification::ConstantRankSingular(r) => write!(f, "Singular rank {r}"),
            Classification::VariableRank => write!(f, "Variable rank"),
        }
    }
}

/// Symbolic Hessian ∂²L/∂q̇^A∂q̇^B with the rank profile observed at
/// structured plus seeded random sample points.
#[derive(Debug, Clone)]
pub struct RegularityReport {
    pub hessian: Vec<Vec<Expr>>,
    pub determinant: Expr,
    pub observed_ranks: Vec<usize>,
    pub samples: usize,
    pub classification: Classification,
}

impl RegularityReport {
    pub fn rank(&self) -> usize {
        match self.classification {
            Classification::Regular => self.hessian.len(),
            Classification::ConstantRankSingular(r) => r,
            Classification::VariableRank => *self.observed_ranks.iter().max().unwrap_or(&0),
        }
    }
}

/// The Hessian matrix ∂²L/∂q̇^A∂q̇^B as expressions on J¹π.
pub fn hessian(spec: &SystemSpec) -> Vec<Vec<Expr>> {
    let n = spec.n as usize;
    let mut w = vec![vec![Expr::zero(); n]; n];
    for a in 1..=spec.n {
        let dl = spec.lagrangian.diff(Coord::Velocity(a));
        for b in 1..=spec.n {
            w[(a - 1) as usize][(b - 1) as usize] = dl.diff(Coord::Velocity(b));
        }
    }
    w
}

/// Symbolic determinant by cofactor expansion (fibre dimensions are small).
pub fn sym_det(m: &[Vec<Expr>]) -> Expr {
    let n = m.len();
    if n == 0 {
        return Expr::one();
    }
    if n == 1 {
        return m[0][0].clone();
    }
    let mut acc = Expr::zero();
    for (j, pivot) in m[0].iter().enumerate() {
        if pivot.is_const_zero() {
            continue;
        }
        let minor: Vec<Vec<Expr>> = m[1..]
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(k, _)| *k != j)
                    .map(|(_, e)| e.clone())
                    .collect()
            })
            .collect();
        let term = pivot * &sym_det(&minor);
        acc = if j % 2 == 0 { acc + term } else { acc - term };
    }
    acc
}

/// Adjugate-over-determinant symbolic inverse. The caller is responsible for
/// checking that the determinant does not vanish on the relevant domain.
#[allow(clippy::needless_range_loop)] // cofactor indices mirror the adjugate formula
pub fn sym_inverse(m: &[Vec<Expr>]) -> Option<Vec<Vec<Expr>>> {
    let n = m.len();
    let det = sym_det(m);
    if det.is_const_zero() {
        return None;
    }
    let mut inv = vec![vec![Expr::zero(); n]; n];
    for i in 0..n {
        for j in 0..n {
            let minor: Vec<Vec<Expr>> = (0..n)
                .filter(|&r| r != j)
                .map(|r| {
                    (0..n)
                        .filter(|&c| c != i)
                        .map(|c| m[r][c].clone())
                        .collect()
                })
                .collect();
            let cof = sym_det(&minor);
            let signed = if (i + j) % 2 == 0 { cof } else { -cof };
            inv[i][j] = signed / det.clone();
        }
    }
    Some(inv)
}

/// Jet-space sample points: structured points (origin, ±unit axes) that catch
/// hypersurface rank drops, then seeded random fill.
pub fn jet_sample_points(n: u32, samples: usize, seed: u64) -> Vec<BTreeMap<Coord, f64>> {
    let chart = Chart::jet(n);
    let dim = chart.dim();
    let mut pts: Vec<Vec<f64>> = vec![vec![0.0; dim]];
    for i in 0..dim {
        for s in [1.0, -1.0] {
            let mut p = vec![0.0; dim];
            p[i] = s;
            pts.push(p);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while pts.len() < samples.max(pts.len()) {
        pts.push((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect());
    }
    pts.into_iter().map(|p| chart.point_map(&p)).collect()
}

/// Bind declared parameter defaults and sample the rest, deterministically.
pub fn sampled_params(spec: &SystemSpec, seed: u64) -> BTreeMap<String, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    spec.params
        .iter()
        .map(|(k, v)| (k.clone(), v.unwrap_or_else(|| rng.random_range(-2.0..2.0))))
        .collect()
}

/// Classify the Lagrangian by symbolic determinant plus sampled Hessian rank.
pub fn hessian_report(spec: &SystemSpec, samples: usize, seed: u64) -> RegularityReport {
    let n = spec.n as usize;
    let w = hessian(spec);
    let det = sym_det(&w);
    let params = sampled_params(spec, seed);
    let mut ranks = Vec::new();
    for point in jet_sample_points(spec.n, samples, seed) {
        let mut m = DMatrix::zeros(n, n);
        let mut ok = true;
        for i in 0..n {
            for j in 0..n {
                match w[i][j].eval(&point, &params) {
                    Ok(v) if v.is_finite() => m[(i, j)] = v,
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                break;
            }
        }
        if ok {
            ranks.push(matrix_rank(&m, RANK_SVD_TOL));
        }
    }
    let det_vanishes = det.is_zero(crate::expr::DEFAULT_ZERO_TRIALS, seed);
    let distinct: std::collections::BTreeSet<usize> = ranks.iter().copied().collect();
    let classification = if distinct.len() == 1 {
        let r = *distinct.iter().next().unwrap();
        if r == n && !det_vanishes {
            Classification::Regular
        } else if r < n && det_vanishes {
            Classification::ConstantRankSingular(r)
        } else {
            Classification::VariableRank
        }
    } else {
        Classification::VariableRank
    };
    RegularityReport {
        hessian: w,
        determinant: det,
        observed_ranks: ranks,
        samples,
        classification,
    }
}

/// Momentum and τ expressions of the extended Legendre map together with the
/// embedding Leg_L ×_E id of J¹π onto graph_L ⊂ M₁.
#[derive(Debug, Clone)]
pub struct LegendreGraph {
    pub momenta: Vec<Expr>,
    pub tau: Expr,
}

impl LegendreGraph {
    /// The embedding (t, q, q̇) ↦ (t, q, τ = L − q̇·∂L/∂q̇, p = ∂L/∂q̇, q̇).
    pub fn embedding(&self, n: u32) -> ChartMap {
        let source = Chart::jet(n);
        let target = Chart::mixed(n);
        let components = target
            .coords()
            .iter()
            .map(|&c| match c {
                Coord::Tau => self.tau.clone(),
                Coord::Momentum(a) => self.momenta[(a - 1) as usize].clone(),
                other => Expr::coord(other),
            })
            .collect();
        ChartMap::new(source, target, components)
    }

    /// Solved-form substitutions (p_A and τ as functions of (t, q, q̇)).
    pub fn substitutions(&self) -> BTreeMap<Coord, Expr> {
        let mut map = BTreeMap::new();
        for (i, p) in self.momenta.iter().enumerate() {
            map.insert(Coord::Momentum(i as u32 + 1), p.clone());
        }
        map.insert(Coord::Tau, self.tau.clone());
        map
    }
}

pub fn legendre_graph(spec: &SystemSpec) -> LegendreGraph {
    let momenta: Vec<Expr> =
        (1..=spec.n).map(|a| spec.lagrangian.diff(Coord::Velocity(a))).collect();
    let mut tau = spec.lagrangian.clone();
    for (i, p) in momenta.iter().enumerate() {
        tau = tau - Expr::qd(i as u32 + 1) * p.clone();
    }
    LegendreGraph { momenta, tau }
}

/// The Lagrangian energy E_L = q̇^A ∂L/∂q̇^A − L; τ = −E_L on graph_L.
pub fn energy_function(spec: &SystemSpec) -> Expr {
    let mut e = -spec.lagrangian.clone();
    for a in 1..=spec.n {
        e = e + Expr::qd(a) * spec.lagrangian.diff(Coord::Velocity(a));
    }
    e
}

/// Convenience: the mixed chart shared by the Legendre-side helpers.
pub fn mixed_chart(spec: &SystemSpec) -> Arc<Chart> {
    Chart::mixed(spec.n)
}
