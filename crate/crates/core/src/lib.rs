//! DP-Q2-P1 mixed finite elements for 2-D incompressible nonlinear
//! elasticity, with a damped Newton solver and a verification harness built
//! around the analytic radial cavitation solution.
//!
//! Modules follow the solver pipeline: [`mesh`] builds annular meshes of
//! curved (polar) quadrilaterals, [`fem_space`] provides the biquadratic /
//! discontinuous-affine pair on the reference square, [`material`] the stored
//! energy and its derivatives, [`assembly`] the Newton-step saddle system,
//! [`newton`] the damped iteration, [`verify`] error norms, the inf-sup probe
//! and convergence studies, and [`cli`] the command-line driver.

pub mod assembly;
pub mod cli;
pub mod fem_space;
pub mod material;
pub mod mesh;
pub mod newton;
pub mod verify;
