//! Symbolic-numeric engine for time-dependent Lagrangian dynamics on the
//! mixed space T*E ×_E J¹π: presymplectic structure construction, the
//! constraint-submanifold chain for singular Lagrangians, vector-field
//! solutions, numerically integrated trajectories, and executable structural
//! verification against direct Euler-Lagrange dynamics.

pub mod cli;
pub mod constraints;
pub mod dynamics;
pub mod expr;
pub mod geometry;
pub mod integrator;
pub mod legendre;
pub mod model;
pub mod verification;

pub use constraints::{run_algorithm, AlgoOptions, ConstraintChain};
pub use dynamics::{solve_z, SolveMode, VectorFieldSpec};
pub use expr::{Coord, EvalError, Expr, Rational, ZeroCfg};
pub use integrator::{integrate, lift_initial_condition, IntegrateOptions, Trajectory};
pub use model::{parse_system, render_system, SystemSpec};
pub use verification::{run_suite, SuiteOptions, VerificationReport};
