//! Assembly of the Newton-step saddle system and the nonlinear residuals.
//!
//! One Newton step solves the symmetric block system
//!
//! ```text
//! [ A  B^T  C^T ] [ w  ]   [ f ]
//! [ B   0    0  ] [ p  ] = [ g ]
//! [ C   0    0  ] [ mu ]   [ c ]
//! ```
//!
//! where `A` carries the second derivative of the stored energy minus the
//! current-pressure cofactor term, `B` the linearized incompressibility
//! constraint, `f`/`g` the residuals of the equilibrium and constraint
//! equations, and `C` the mean-zero rows used in the pure-traction case.

use crate::fem_space::{
    gauss_1d, gauss_rule, p1_eval, physical_gradient, q2_eval, q2_grad, DofMap, MapFrame,
    SpaceError,
};
use crate::material::{
    cofactor, energy_density, first_piola, tangent_tensor, MaterialError, MaterialParams,
};
use crate::mesh::Mesh;
use nalgebra::Matrix2;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("non-positive deformation Jacobian det = {det:.6e} in element {element} at quadrature point {qpoint}")]
    NonPositiveJacobian { element: usize, qpoint: usize, det: f64 },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Material(#[from] MaterialError),
}

/// Dead-load traction on the outer boundary; the inner boundary is
/// traction-free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TractionSpec {
    /// `t(x) = t n(x)` on the unit circle.
    RadialConstant(f64),
    /// `t(x) = (1 + eta |cos theta|) t n(x)`.
    Modulated { t: f64, eta: f64 },
}

impl TractionSpec {
    pub fn magnitude(&self) -> f64 {
        match self {
            Self::RadialConstant(t) => *t,
            Self::Modulated { t, .. } => *t,
        }
    }

    pub fn with_magnitude(&self, t: f64) -> Self {
        match self {
            Self::RadialConstant(_) => Self::RadialConstant(t),
            Self::Modulated { eta, .. } => Self::Modulated { t, eta: *eta },
        }
    }

    /// Traction vector at a point of the outer boundary.
    pub fn eval(&self, x: [f64; 2]) -> [f64; 2] {
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        let n = [x[0] / r, x[1] / r];
        match self {
            Self::RadialConstant(t) => [t * n[0], t * n[1]],
            Self::Modulated { t, eta } => {
                let scale = t * (1.0 + eta * (x[0] / r).abs());
                [scale * n[0], scale * n[1]]
            }
        }
    }
}

/// Current iterate: nodal deformation values (2 per node, including any
/// Dirichlet-fixed nodes) and per-element pressure coefficients on
/// `{1, xhat_1, xhat_2}`.
#[derive(Debug, Clone)]
pub struct DiscreteState {
    pub u: Vec<f64>,
    pub p: Vec<f64>,
}

impl DiscreteState {
    pub fn interpolate(mesh: &Mesh, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        let mut u = Vec::with_capacity(2 * mesh.nodes.len());
        for &x in &mesh.nodes {
            let v = f(x);
            u.push(v[0]);
            u.push(v[1]);
        }
        Self { u, p: vec![0.0; 3 * mesh.elements.len()] }
    }

    /// The undeformed configuration `u(x) = x` with zero pressure.
    pub fn identity(mesh: &Mesh) -> Self {
        Self::interpolate(mesh, |x| x)
    }

    pub fn set_constant_pressure(&mut self, c: f64) {
        for (k, v) in self.p.iter_mut().enumerate() {
            *v = if k % 3 == 0 { c } else { 0.0 };
        }
    }

    /// Pressure value at a reference point of an element.
    pub fn pressure_at(&self, element: usize, xhat: [f64; 2]) -> f64 {
        let b = p1_eval(xhat);
        let c = &self.p[3 * element..3 * element + 3];
        c[0] * b[0] + c[1] * b[1] + c[2] * b[2]
    }

    /// Deformation gradient at a reference point given precomputed physical
    /// basis gradients.
    pub fn grad_u(&self, mesh: &Mesh, element: usize, grads: &[[f64; 2]; 9]) -> Matrix2<f64> {
        let el = &mesh.elements[element];
        let mut g = Matrix2::zeros();
        for (k, gk) in grads.iter().enumerate() {
            let ux = self.u[2 * el.nodes[k]];
            let uy = self.u[2 * el.nodes[k] + 1];
            g[(0, 0)] += ux * gk[0];
            g[(0, 1)] += ux * gk[1];
            g[(1, 0)] += uy * gk[0];
            g[(1, 1)] += uy * gk[1];
        }
        g
    }

    /// Plain-text solution dump, 17 significant digits.
    pub fn dump(&self) -> String {
        let mut out = String::from("dpq2p1-sol v1\n");
        for (i, c) in self.u.chunks_exact(2).enumerate() {
            writeln!(out, "u {} {:.16e} {:.16e}", i, c[0], c[1]).unwrap();
        }
        for (e, c) in self.p.chunks_exact(3).enumerate() {
            writeln!(out, "p {} {:.16e} {:.16e} {:.16e}", e, c[0], c[1], c[2]).unwrap();
        }
        out
    }
}

/// Physical basis gradients of all nine shape functions at one point.
fn physical_grads(frame: &MapFrame, xhat: [f64; 2]) -> [[f64; 2]; 9] {
    let gref = q2_grad(xhat);
    std::array::from_fn(|k| physical_gradient(frame, gref[k]))
}

/// `cof(e_j x g_m) : (e_i x g_k)`; zero when `i == j`, otherwise the signed
/// wedge of the two gradients.
#[inline]
fn cof_cross(i: usize, j: usize, g_k: &[f64; 2], g_m: &[f64; 2]) -> f64 {
    if i == j {
        0.0
    } else {
        let w = g_m[0] * g_k[1] - g_m[1] * g_k[0];
        if i == 1 {
            w
        } else {
            -w
        }
    }
}

pub type Triplets = Vec<(usize, usize, f64)>;

/// Deformation-deformation block of the Newton system:
/// `(A(grad u) : grad w) : grad v - p cof grad w : grad v`.
pub fn assemble_a(
    mesh: &Mesh,
    dofs: &DofMap,
    params: &MaterialParams,
    state: &DiscreteState,
    order: usize,
) -> Result<Triplets, AssemblyError> {
    let rule = gauss_rule(order)?;
    let mut out = Vec::new();
    for (e, el) in mesh.elements.iter().enumerate() {
        let mut local = [[0.0; 18]; 18];
        for (q, (&xq, &wq)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let frame = MapFrame::at(&el.map, xq)?;
            let grads = physical_grads(&frame, xq);
            let gu = state.grad_u(mesh, e, &grads);
            let det = gu.determinant();
            if det <= 0.0 {
                return Err(AssemblyError::NonPositiveJacobian { element: e, qpoint: q, det });
            }
            let tangent = tangent_tensor(params, &gu)?;
            let pbar = state.pressure_at(e, xq);
            let scale = wq * frame.det;
            for k in 0..9 {
                for i in 0..2 {
                    for m in 0..9 {
                        for j in 0..2 {
                            let mut v = 0.0;
                            for a in 0..2 {
                                for b in 0..2 {
                                    v += tangent[2 * i + a][2 * j + b] * grads[k][a] * grads[m][b];
                                }
                            }
                            v -= pbar * cof_cross(i, j, &grads[k], &grads[m]);
                            local[2 * k + i][2 * m + j] += scale * v;
                        }
                    }
                }
            }
        }
        scatter_uu(dofs, el, &local, &mut out);
    }
    Ok(out)
}

fn scatter_uu(
    dofs: &DofMap,
    el: &crate::mesh::Element,
    local: &[[f64; 18]; 18],
    out: &mut Triplets,
) {
    for k in 0..9 {
        let Some(rk) = dofs.node_dof[el.nodes[k]] else { continue };
        for i in 0..2 {
            for m in 0..9 {
                let Some(cm) = dofs.node_dof[el.nodes[m]] else { continue };
                for j in 0..2 {
                    let v = local[2 * k + i][2 * m + j];
                    if v != 0.0 {
                        out.push((rk + i, cm + j, v));
                    }
                }
            }
        }
    }
}

/// Pressure-deformation block: `b(v, q) = int q cof(grad u) : grad v`.
/// Rows are pressure dofs, columns deformation dofs.
pub fn assemble_b(
    mesh: &Mesh,
    dofs: &DofMap,
    state: &DiscreteState,
    order: usize,
) -> Result<Triplets, AssemblyError> {
    let rule = gauss_rule(order)?;
    let mut out = Vec::new();
    for (e, el) in mesh.elements.iter().enumerate() {
        let mut local = [[0.0; 18]; 3];
        for (q, (&xq, &wq)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let frame = MapFrame::at(&el.map, xq)?;
            let grads = physical_grads(&frame, xq);
            let gu = state.grad_u(mesh, e, &grads);
            let det = gu.determinant();
            if det <= 0.0 {
                return Err(AssemblyError::NonPositiveJacobian { element: e, qpoint: q, det });
            }
            let cof = cofactor(&gu);
            let pb = p1_eval(xq);
            let scale = wq * frame.det;
            for (r, pbr) in pb.iter().enumerate() {
                for m in 0..9 {
                    for j in 0..2 {
                        let v = cof[(j, 0)] * grads[m][0] + cof[(j, 1)] * grads[m][1];
                        local[r][2 * m + j] += scale * pbr * v;
                    }
                }
            }
        }
        for (r, row) in local.iter().enumerate() {
            let row_dof = dofs.pressure_dof(e, r);
            for m in 0..9 {
                let Some(cm) = dofs.node_dof[el.nodes[m]] else { continue };
                for j in 0..2 {
                    let v = row[2 * m + j];
                    if v != 0.0 {
                        out.push((row_dof, cm + j, v));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Work of the outer-boundary traction against each deformation test
/// function: `int_dN t . v ds` with the exact polar arc parametrization.
pub fn assemble_boundary_work(
    mesh: &Mesh,
    dofs: &DofMap,
    traction: &TractionSpec,
    order: usize,
) -> Result<Vec<f64>, AssemblyError> {
    let (nodes1d, w1d) = gauss_1d(order)?;
    let mut out = vec![0.0; dofs.n_u];
    for (e, edge) in mesh.outer_boundary_edges() {
        let el = &mesh.elements[e];
        debug_assert_eq!(edge, 1);
        for (&t, &wt) in nodes1d.iter().zip(&w1d) {
            let xhat = [1.0, t];
            let x = el.map.eval(xhat);
            let (jac, _) = el.map.jacobian(xhat);
            let ds = (jac[0][1] * jac[0][1] + jac[1][1] * jac[1][1]).sqrt();
            let tv = traction.eval(x);
            let phis = q2_eval(xhat);
            for (k, phi) in phis.iter().enumerate() {
                if let Some(dk) = dofs.node_dof[el.nodes[k]] {
                    out[dk] += wt * ds * tv[0] * phi;
                    out[dk + 1] += wt * ds * tv[1] * phi;
                }
            }
        }
    }
    Ok(out)
}

/// Newton right-hand side for the deformation equation:
/// `f(v) = int_dN t . v ds - int (dW/dF - p cof grad u) : grad v dx`,
/// i.e. the negative residual of the equilibrium equation.
pub fn assemble_f(
    mesh: &Mesh,
    dofs: &DofMap,
    params: &MaterialParams,
    state: &DiscreteState,
    traction: &TractionSpec,
    order: usize,
) -> Result<Vec<f64>, AssemblyError> {
    let rule = gauss_rule(order)?;
    let mut out = assemble_boundary_work(mesh, dofs, traction, order)?;
    for (e, el) in mesh.elements.iter().enumerate() {
        for (q, (&xq, &wq)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let frame = MapFrame::at(&el.map, xq)?;
            let grads = physical_grads(&frame, xq);
            let gu = state.grad_u(mesh, e, &grads);
            let det = gu.determinant();
            if det <= 0.0 {
                return Err(AssemblyError::NonPositiveJacobian { element: e, qpoint: q, det });
            }
            let stress = first_piola(params, &gu)? - cofactor(&gu) * state.pressure_at(e, xq);
            let scale = wq * frame.det;
            for k in 0..9 {
                if let Some(dk) = dofs.node_dof[el.nodes[k]] {
                    for i in 0..2 {
                        out[dk + i] -=
                            scale * (stress[(i, 0)] * grads[k][0] + stress[(i, 1)] * grads[k][1]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Newton right-hand side for the constraint equation:
/// `g(q) = -int q (det grad u - 1) dx`.
pub fn assemble_g(
    mesh: &Mesh,
    dofs: &DofMap,
    state: &DiscreteState,
    order: usize,
) -> Result<Vec<f64>, AssemblyError> {
    let rule = gauss_rule(order)?;
    let mut out = vec![0.0; dofs.n_p];
    for (e, el) in mesh.elements.iter().enumerate() {
        for (q, (&xq, &wq)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let frame = MapFrame::at(&el.map, xq)?;
            let grads = physical_grads(&frame, xq);
            let gu = state.grad_u(mesh, e, &grads);
            let det = gu.determinant();
            if det <= 0.0 {
                return Err(AssemblyError::NonPositiveJacobian { element: e, qpoint: q, det });
            }
            let pb = p1_eval(xq);
            let scale = wq * frame.det * (det - 1.0);
            for (r, pbr) in pb.iter().enumerate() {
                out[3 * e + r] -= scale * pbr;
            }
        }
    }
    Ok(out)
}

/// Mean-zero constraint rows `int v dx` (two components) and, optionally, the
/// rotation row `int x ^ v dx`. The right-hand sides correct any integral
/// drift of the current iterate.
fn assemble_constraints(
    mesh: &Mesh,
    dofs: &DofMap,
    state: &DiscreteState,
    order: usize,
    pin_rotation: bool,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), AssemblyError> {
    let rule = gauss_rule(order)?;
    let n_rows = if pin_rotation { 3 } else { 2 };
    let mut rows = vec![vec![0.0; dofs.n_u]; n_rows];
    let mut rhs = vec![0.0; n_rows];
    for el in mesh.elements.iter() {
        for (&xq, &wq) in rule.points.iter().zip(&rule.weights) {
            let frame = MapFrame::at(&el.map, xq)?;
            let phis = q2_eval(xq);
            let x = el.map.eval(xq);
            let scale = wq * frame.det;
            let mut u_here = [0.0; 2];
            for (k, phi) in phis.iter().enumerate() {
                u_here[0] += phi * state.u[2 * el.nodes[k]];
                u_here[1] += phi * state.u[2 * el.nodes[k] + 1];
            }
            for (k, phi) in phis.iter().enumerate() {
                if let Some(dk) = dofs.node_dof[el.nodes[k]] {
                    rows[0][dk] += scale * phi;
                    rows[1][dk + 1] += scale * phi;
                    if pin_rotation {
                        rows[2][dk] -= scale * x[1] * phi;
                        rows[2][dk + 1] += scale * x[0] * phi;
                    }
                }
            }
            rhs[0] -= scale * u_here[0];
            rhs[1] -= scale * u_here[1];
            if pin_rotation {
                rhs[2] -= scale * (x[0] * u_here[1] - x[1] * u_here[0]);
            }
        }
    }
    Ok((rows, rhs))
}

/// Assembled saddle system in coordinate form.
#[derive(Debug, Clone)]
pub struct SaddleSystem {
    pub triplets: Triplets,
    pub rhs: Vec<f64>,
    pub n_u: usize,
    pub n_p: usize,
    pub n_c: usize,
}

impl SaddleSystem {
    pub fn dim(&self) -> usize {
        self.n_u + self.n_p + self.n_c
    }

    /// Dense copy, for the small-system tests.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for &(r, c, v) in &self.triplets {
            m[(r, c)] += v;
        }
        m
    }

    /// `max |K x - b|` for a candidate solution.
    pub fn residual_inf(&self, x: &[f64]) -> f64 {
        let mut r = self.rhs.clone();
        for &(i, j, v) in &self.triplets {
            r[i] -= v * x[j];
        }
        r.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// Compose the four forms plus the mean-zero constraint rows into the full
/// symmetric system.
pub fn assemble_system(
    mesh: &Mesh,
    dofs: &DofMap,
    params: &MaterialParams,
    state: &DiscreteState,
    traction: &TractionSpec,
    order: usize,
    pin_rotation: bool,
) -> Result<SaddleSystem, AssemblyError> {
    let n_u = dofs.n_u;
    let n_p = dofs.n_p;
    let mut triplets = assemble_a(mesh, dofs, params, state, order)?;
    for (r, c, v) in assemble_b(mesh, dofs, state, order)? {
        triplets.push((r, c, v));
        triplets.push((c, r, v));
    }
    let f = assemble_f(mesh, dofs, params, state, traction, order)?;
    let g = assemble_g(mesh, dofs, state, order)?;

    let (c_rows, c_rhs) = match dofs.n_constraints {
        0 => (Vec::new(), Vec::new()),
        _ => assemble_constraints(mesh, dofs, state, order, pin_rotation)?,
    };
    let n_c = c_rows.len();
    let base = n_u + n_p;
    for (ci, row) in c_rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v != 0.0 {
                triplets.push((base + ci, j, v));
                triplets.push((j, base + ci, v));
            }
        }
    }

    let mut rhs = Vec::with_capacity(base + n_c);
    rhs.extend_from_slice(&f);
    rhs.extend_from_slice(&g);
    rhs.extend_from_slice(&c_rhs);
    Ok(SaddleSystem { triplets, rhs, n_u, n_p, n_c })
}

/// Lagrangian value `E(u, p) = int W(grad u) - p (det grad u - 1) dx
/// - int_dN t . u ds`.
pub fn total_energy(
    mesh: &Mesh,
    dofs: &DofMap,
    params: &MaterialParams,
    state: &DiscreteState,
    traction: &TractionSpec,
    order: usize,
) -> Result<f64, AssemblyError> {
    let _ = dofs;
    let rule = gauss_rule(order)?;
    let mut e_int = 0.0;
    for (e, el) in mesh.elements.iter().enumerate() {
        for (q, (&xq, &wq)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let frame = MapFrame::at(&el.map, xq)?;
            let grads = physical_grads(&frame, xq);
            let gu = state.grad_u(mesh, e, &grads);
            let det = gu.determinant();
            if det <= 0.0 {
                return Err(AssemblyError::NonPositiveJacobian { element: e, qpoint: q, det });
            }
            let w = energy_density(params, &gu)?;
            let p = state.pressure_at(e, xq);
            e_int += wq * frame.det * (w - p * (det - 1.0));
        }
    }
    // Boundary work of the dead load against the current deformation.
    let (nodes1d, w1d) = gauss_1d(order)?;
    let mut e_bdry = 0.0;
    for (e, _) in mesh.outer_boundary_edges() {
        let el = &mesh.elements[e];
        for (&t, &wt) in nodes1d.iter().zip(&w1d) {
            let xhat = [1.0, t];
            let x = el.map.eval(xhat);
            let (jac, _) = el.map.jacobian(xhat);
            let ds = (jac[0][1] * jac[0][1] + jac[1][1] * jac[1][1]).sqrt();
            let tv = traction.eval(x);
            let phis = q2_eval(xhat);
            let mut u_here = [0.0; 2];
            for (k, phi) in phis.iter().enumerate() {
                u_here[0] += phi * state.u[2 * el.nodes[k]];
                u_here[1] += phi * state.u[2 * el.nodes[k] + 1];
            }
            e_bdry += wt * ds * (tv[0] * u_here[0] + tv[1] * u_here[1]);
        }
    }
    Ok(e_int - e_bdry)
}

pub fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem_space::{build_dof_map, physical_hessians, BoundaryCondition};
    use crate::material::tangent_apply;
    use crate::mesh::{build_annulus_mesh, DualParametricMap, Element, Mesh};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square_mesh(side: f64) -> Mesh {
        let map = DualParametricMap::bilinear([
            [0.0, 0.0],
            [side, 0.0],
            [side, side],
            [0.0, side],
        ])
        .unwrap();
        let nodes: Vec<[f64; 2]> =
            crate::fem_space::REF_NODES.iter().map(|&xh| map.eval(xh)).collect();
        let el = Element { map, nodes: std::array::from_fn(|k| k), layer: 0 };
        Mesh {
            nodes,
            elements: vec![el],
            rho: 0.0,
            outer_radius: side,
            layers: vec![(0.0, side)],
            sectors: 1,
            h: side,
            h_t: vec![side],
        }
    }

    fn small_annulus() -> (Mesh, DofMap) {
        let mesh = build_annulus_mesh(0.5, &[(0.5, 0.5)], 4).unwrap();
        let dofs = build_dof_map(&mesh, &BoundaryCondition::PureTraction);
        (mesh, dofs)
    }

    fn triplets_to_dense(t: &Triplets, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows, cols);
        for &(r, c, v) in t {
            m[(r, c)] += v;
        }
        m
    }

    /// Random admissible perturbation of the identity state.
    fn random_state(mesh: &Mesh, seed: u64, amp: f64) -> DiscreteState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = DiscreteState::identity(mesh);
        for v in st.u.iter_mut() {
            *v += rng.gen_range(-amp..amp);
        }
        for v in st.p.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        st
    }

    /// Brute-force dense assembly of the full saddle system, written
    /// independently of the production scatter loops: it works entirely with
    /// full 2x2 gradient matrices, `nalgebra` contractions, and per-pair
    /// global dof lookups. Boundary arc lengths come from finite differences
    /// of the map rather than the analytic Jacobian.
    fn dense_system_oracle(
        mesh: &Mesh,
        dofs: &DofMap,
        params: &MaterialParams,
        state: &DiscreteState,
        traction: &TractionSpec,
        order: usize,
        pin_rotation: bool,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let n_c = if dofs.n_constraints > 0 {
            if pin_rotation {
                3
            } else {
                2
            }
        } else {
            0
        };
        let n = dofs.n_u + dofs.n_p + n_c;
        let mut k_mat = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        let rule = gauss_rule(order).unwrap();

        for (e, el) in mesh.elements.iter().enumerate() {
            for (&xq, &wq) in rule.points.iter().zip(&rule.weights) {
                let frame = MapFrame::at(&el.map, xq).unwrap();
                let gref = q2_grad(xq);
                let gphys: [[f64; 2]; 9] =
                    std::array::from_fn(|k| physical_gradient(&frame, gref[k]));
                let gu = state.grad_u(mesh, e, &gphys);
                let tangent = tangent_tensor(params, &gu).unwrap();
                let pbar = state.pressure_at(e, xq);
                let stress = first_piola(params, &gu).unwrap() - cofactor(&gu) * pbar;
                let pb = p1_eval(xq);
                let scale = wq * frame.det;
                let x = el.map.eval(xq);
                let phis = q2_eval(xq);

                let grad_mat = |k: usize, i: usize| -> Matrix2<f64> {
                    let mut m = Matrix2::zeros();
                    m[(i, 0)] = gphys[k][0];
                    m[(i, 1)] = gphys[k][1];
                    m
                };

                for k in 0..9 {
                    let Some(rk) = dofs.node_dof[el.nodes[k]] else { continue };
                    for i in 0..2 {
                        let gv = grad_mat(k, i);
                        for m in 0..9 {
                            let Some(cm) = dofs.node_dof[el.nodes[m]] else { continue };
                            for j in 0..2 {
                                let gw = grad_mat(m, j);
                                let aw = tangent_apply(&tangent, &gw);
                                let val = aw.component_mul(&gv).sum()
                                    - pbar * cofactor(&gw).component_mul(&gv).sum();
                                k_mat[(rk + i, cm + j)] += scale * val;
                            }
                        }
                        rhs[rk + i] -= scale * stress.component_mul(&gv).sum();
                        for r in 0..3 {
                            let pd = dofs.pressure_dof(e, r);
                            let val = scale * pb[r] * cofactor(&gu).component_mul(&gv).sum();
                            k_mat[(pd, rk + i)] += val;
                            k_mat[(rk + i, pd)] += val;
                        }
                        if n_c > 0 {
                            let base = dofs.n_u + dofs.n_p;
                            let row = base + i;
                            k_mat[(row, rk + i)] += scale * phis[k];
                            k_mat[(rk + i, row)] += scale * phis[k];
                            if pin_rotation {
                                let rot = base + 2;
                                let c = if i == 0 { -x[1] } else { x[0] };
                                k_mat[(rot, rk + i)] += scale * c * phis[k];
                                k_mat[(rk + i, rot)] += scale * c * phis[k];
                            }
                        }
                    }
                }
                for r in 0..3 {
                    rhs[dofs.pressure_dof(e, r)] -= scale * pb[r] * (gu.determinant() - 1.0);
                }
                if n_c > 0 {
                    let mut uh = [0.0; 2];
                    for (k, phi) in phis.iter().enumerate() {
                        uh[0] += phi * state.u[2 * el.nodes[k]];
                        uh[1] += phi * state.u[2 * el.nodes[k] + 1];
                    }
                    let base = dofs.n_u + dofs.n_p;
                    rhs[base] -= scale * uh[0];
                    rhs[base + 1] -= scale * uh[1];
                    if pin_rotation {
                        rhs[base + 2] -= scale * (x[0] * uh[1] - x[1] * uh[0]);
                    }
                }
            }
        }
        let (n1, w1) = gauss_1d(order).unwrap();
        for (e, _) in mesh.outer_boundary_edges() {
            let el = &mesh.elements[e];
            for (&t, &wt) in n1.iter().zip(&w1) {
                let xhat = [1.0, t];
                let x = el.map.eval(xhat);
                let step = 1e-6;
                let xp = el.map.eval([1.0, t + step]);
                let xm = el.map.eval([1.0, t - step]);
                let ds = (((xp[0] - xm[0]) / (2.0 * step)).powi(2)
                    + ((xp[1] - xm[1]) / (2.0 * step)).powi(2))
                .sqrt();
                let tv = traction.eval(x);
                let phis = q2_eval(xhat);
                for (k, phi) in phis.iter().enumerate() {
                    if let Some(dk) = dofs.node_dof[el.nodes[k]] {
                        rhs[dk] += wt * ds * tv[0] * phi;
                        rhs[dk + 1] += wt * ds * tv[1] * phi;
                    }
                }
            }
        }
        (k_mat, rhs)
    }

    #[test]
    fn a_block_matches_dense_oracle_on_affine_element() {
        let mesh = square_mesh(1.0);
        let dofs = build_dof_map(&mesh, &BoundaryCondition::PureTraction);
        let params = MaterialParams::default();
        let state = DiscreteState::identity(&mesh);
        let a = assemble_a(&mesh, &dofs, &params, &state, 3).unwrap();
        let dense = triplets_to_dense(&a, dofs.n_u, dofs.n_u);
        let (oracle, _) = dense_system_oracle(
            &mesh,
            &dofs,
            &params,
            &state,
            &TractionSpec::RadialConstant(0.0),
            3,
            false,
        );
        for i in 0..dofs.n_u {
            for j in 0..dofs.n_u {
                assert!(
                    (dense[(i, j)] - oracle[(i, j)]).abs() <= 1e-12 * (1.0 + oracle[(i, j)].abs()),
                    "A[{i},{j}] = {} vs oracle {}",
                    dense[(i, j)],
                    oracle[(i, j)]
                );
            }
        }
    }

    #[test]
    fn a_block_is_symmetric_on_random_states() {
        let (mesh, dofs) = small_annulus();
        let params = MaterialParams::default();
        let state = random_state(&mesh, 1, 0.05);
        let a = assemble_a(&mesh, &dofs, &params, &state, 3).unwrap();
        let dense = triplets_to_dense(&a, dofs.n_u, dofs.n_u);
        let asym = (&dense - dense.transpose()).abs().max();
        assert!(asym <= 1e-12 * dense.abs().max(), "asymmetry {asym}");
    }

    #[test]
    fn a_block_is_affine_in_mu() {
        let (mesh, dofs) = small_annulus();
        let state = random_state(&mesh, 2, 0.03);
        let assemble = |mu: f64| {
            triplets_to_dense(
                &assemble_a(&mesh, &dofs, &MaterialParams::new(mu, 1.5).unwrap(), &state, 3)
                    .unwrap(),
                dofs.n_u,
                dofs.n_u,
            )
        };
        let (a1, a2, a3) = (assemble(1.0), assemble(2.0), assemble(3.0));
        let d32 = &a3 - &a2;
        let d21 = &a2 - &a1;
        assert!((d32 - d21).abs().max() <= 1e-12 * (1.0 + a1.abs().max()));
    }

    #[test]
    fn b_block_contracts_to_divergence_at_identity() {
        // On the unit square with u = identity, b(v, 1) = int div v; for
        // v = (x1, 0) that is the element area.
        let mesh = square_mesh(1.0);
        let dofs = build_dof_map(&mesh, &BoundaryCondition::PureTraction);
        let state = DiscreteState::identity(&mesh);
        let b = assemble_b(&mesh, &dofs, &state, 3).unwrap();
        let mut dense = DMatrix::<f64>::zeros(dofs.n_p, dofs.n_u);
        for &(r, c, v) in &b {
            dense[(r - dofs.n_u, c)] += v;
        }
        let v = DiscreteState::interpolate(&mesh, |x| [x[0], 0.0]);
        let mut contraction = 0.0;
        for (node, dof) in dofs.node_dof.iter().enumerate() {
            let base = dof.unwrap();
            contraction += dense[(0, base)] * v.u[2 * node];
            contraction += dense[(0, base + 1)] * v.u[2 * node + 1];
        }
        assert_relative_eq!(contraction, 1.0, max_relative = 1e-10);

        // Rigid translation has zero divergence: all contractions vanish.
        let vt = DiscreteState::interpolate(&mesh, |_| [0.3, -0.7]);
        for r in 0..dofs.n_p {
            let mut c = 0.0f64;
            for (node, dof) in dofs.node_dof.iter().enumerate() {
                let base = dof.unwrap();
                c += dense[(r, base)] * vt.u[2 * node] + dense[(r, base + 1)] * vt.u[2 * node + 1];
            }
            assert!(c.abs() < 1e-12);
        }
    }

    #[test]
    fn b_block_matches_dense_oracle_on_random_state() {
        let mesh = build_annulus_mesh(0.5, &[(0.5, 0.25), (0.75, 0.25)], 4).unwrap();
        let dofs = build_dof_map(&mesh, &BoundaryCondition::PureTraction);
        let params = MaterialParams::default();
        let state = random_state(&mesh, 3, 0.04);
        let b = assemble_b(&mesh, &dofs, &state, 3).unwrap();
        let mut dense = DMatrix::<f64>::zeros(dofs.n_p, dofs.n_u);
        for &(r, c, v) in &b {
            dense[(r - dofs.n_u, c)] += v;
        }
        let (oracle, _) = dense_system_oracle(
            &mesh,
            &dofs,
            &params,
            &state,
            &TractionSpec::RadialConstant(0.0),
            3,
            false,
        );
        for r in 0..dofs.n_p {
            for c in 0..dofs.n_u {
                let want = oracle[(dofs.n_u + r, c)];
                assert!(
                    (dense[(r, c)] - want).abs() <= 1e-12 * (1.0 + want.abs()),
                    "B[{r},{c}]: {} vs {want}",
                    dense[(r, c)]
                );
            }
        }
    }

    #[test]
    fn g_vanishes_at_identity() {
        // Exact on geometry whose map lies in the approximation space: the
        // square (bilinear) and the biquadratic twin of a curved mesh.
        let mesh = square_mesh(1.0);
        let dofs = build_dof_map(&mesh, &BoundaryCondition::PureTraction);
        let state = DiscreteState::identity(&mesh);
        let g = assemble_g(&mesh, &dofs, &state, 3).unwrap();
        assert!(max_norm(&g) < 1e-14);

        let (polar, dofs2) = small_annulus();
        let twin = crate::mesh::biquadratic_twin(&polar);
        let state2 = DiscreteState::identity(&twin);
        let g2 = assemble_g(&twin, &dofs2, &state2, 3).unwrap();
        assert!(max_norm(&g2) < 1e-13, "{}", max_norm(&g2));
    }

    #[test]
    fn identity_state_with_matching_pressure_has_zero_residual() {
        let (polar, dofs) = small_annulus();
        let mesh = crate::mesh::biquadratic_twin(&polar);
        let params = MaterialParams::new(1.0, 1.5).unwrap();
        let mut state = DiscreteState::identity(&mesh);
        state.set_constant_pressure(params.identity_pressure());
        let f = assemble_f(&mesh, &dofs, &params, &state, &TractionSpec::RadialConstant(0.0), 3)
            .unwrap();
        assert!(max_norm(&f) <= 1e-10, "residual {}", max_norm(&f));
    }

    #[test]
    fn boundary_work_of_radial_traction_is_t_times_perimeter() {
        // Pairing the boundary vector with the interpolant of the outward
        // normal gives t * 2 pi up to the Q2 interpolation of the normal.
        let t = 1.7;
        let mesh = build_annulus_mesh(0.5, &[(0.5, 0.5)], 80).unwrap();
        let dofs = build_dof_map(&mesh, &BoundaryCondition::PureTraction);
        let bw =
            assemble_boundary_work(&mesh, &dofs, &TractionSpec::RadialConstant(t), 3).unwrap();
        let v = DiscreteState::interpolate(&mesh, |x| {
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            [x[0] / r, x[1] / r]
        });
        let mut work = 0.0;
        for (node, dof) in dofs.node_dof.iter().enumerate() {
            let base = dof.unwrap();
            work += bw[base] * v.u[2 * node] + bw[base + 1] * v.u[2 * node + 1];
        }
        assert!(
            (work - t * std::f64::consts::TAU).abs() <= 1e-6,
            "work {} vs {}",
            work,
            t * std::f64::consts::TAU
        );
    }

    #[test]
    fn f_is_negative_gradient_of_energy() {
        let (mesh, dofs) = small_annulus();
        let params = MaterialParams::default();
        let state = random_state(&mesh, 4, 0.02);
        let traction = TractionSpec::RadialConstant(0.4);
        let f = assemble_f(&mesh, &dofs, &params, &state, &traction, 3).unwrap();
        let step = 1e-6;
        for dof in (0..dofs.n_u).step_by(7) {
            let node = dof / 2;
            let comp = dof % 2;
            let mut sp = state.clone();
            let mut sm = state.clone();
            sp.u[2 * node + comp] += step;
            sm.u[2 * node + comp] -= step;
            let ep = total_energy(&mesh, &dofs, &params, &sp, &traction, 3).unwrap();
            let em = total_energy(&mesh, &dofs, &params, &sm, &traction, 3).unwrap();
            let fd = -(ep - em) / (2.0 * step);
            assert_relative_eq!(f[dof], fd, max_relative = 1e-5, epsilon = 1e-7);
        }
    }

    #[test]
    fn a_block_is_fd_jacobian_of_residual() {
        let mesh = build_annulus_mesh(0.5, &[(0.5, 0.5)], 4).unwrap();
        let dofs = build_dof_map(&mesh, &BoundaryCondition::PureTraction);
        let params = MaterialParams::default();
        let state = random_state(&mesh, 5, 0.02);
        let traction = TractionSpec::RadialConstant(0.3);
        let a = triplets_to_dense(
            &assemble_a(&mesh, &dofs, &params, &state, 3).unwrap(),
            dofs.n_u,
            dofs.n_u,
        );
        let step = 1e-6;
        for col in (0..dofs.n_u).step_by(5) {
            let node = col / 2;
            let comp = col % 2;
            let mut sp = state.clone();
            let mut sm = state.clone();
            sp.u[2 * node + comp] += step;
            sm.u[2 * node + comp] -= step;
            let fp = assemble_f(&mesh, &dofs, &params, &sp, &traction, 3).unwrap();
            let fm = assemble_f(&mesh, &dofs, &params, &sm, &traction, 3).unwrap();
            for row in 0..dofs.n_u {
                // A = d(-f)/du
                let fd = -(fp[row] - fm[row]) / (2.0 * step);
                let scale = 1.0 + a[(row, col)].abs().max(1.0);
                assert!(
                    (a[(row, col)] - fd).abs() <= 1e-5 * scale,
                    "A[{row},{col}] {} vs FD {}",
                    a[(row, col)],
                    fd
                );
            }
        }
    }

    #[test]
    fn full_system_matches_dense_oracle() {
        let (mesh, dofs) = small_annulus();
        let params = MaterialParams::default();
        let state = random_state(&mesh, 6, 0.03);
        let traction = TractionSpec::Modulated { t: 0.8, eta: 0.1 };
        let sys = assemble_system(&mesh, &dofs, &params, &state, &traction, 3, false).unwrap();
        assert_eq!(sys.dim(), dofs.n_u + dofs.n_p + 2);
        let dense = sys.to_dense();
        let asym = (&dense - dense.transpose()).abs().max();
        assert!(asym <= 1e-12 * (1.0 + dense.abs().max()));
        let (ok, orhs) = dense_system_oracle(&mesh, &dofs, &params, &state, &traction, 3, false);
        let scale = 1.0 + ok.abs().max();
        assert!(
            (&dense - &ok).abs().max() <= 1e-10 * scale,
            "matrix deviation {}",
            (&dense - &ok).abs().max()
        );
        for i in 0..sys.dim() {
            assert!(
                (sys.rhs[i] - orhs[i]).abs() <= 1e-9 * (1.0 + orhs[i].abs()),
                "rhs[{i}]: {} vs {}",
                sys.rhs[i],
                orhs[i]
            );
        }
    }

    #[test]
    fn system_dims_with_rotation_pin() {
        let (mesh, dofs) = small_annulus();
        let params = MaterialParams::default();
        let state = DiscreteState::identity(&mesh);
        let sys = assemble_system(
            &mesh,
            &dofs,
            &params,
            &state,
            &TractionSpec::RadialConstant(0.0),
            3,
            true,
        )
        .unwrap();
        assert_eq!(sys.n_c, 3);
        let dense = sys.to_dense();
        let asym = (&dense - dense.transpose()).abs().max();
        assert!(asym <= 1e-12 * (1.0 + dense.abs().max()));
    }

    #[test]
    fn total_energy_identity_annulus() {
        // E -> W(I) * pi (1 - rho^2) at the identity with zero pressure and
        // traction. On the biquadratic twin the identity is exact, so E
        // equals W(I) times the mesh's own quadrature area to rounding; on a
        // reasonably fine polar mesh it matches the annulus value closely.
        let params = MaterialParams::new(1.0, 1.5).unwrap();
        let w_i = energy_density(&params, &Matrix2::identity()).unwrap();
        let traction = TractionSpec::RadialConstant(0.0);
        let area = std::f64::consts::PI * (1.0 - 0.25);

        let polar = build_annulus_mesh(0.5, &[(0.5, 0.5)], 40).unwrap();
        let dofs = build_dof_map(&polar, &BoundaryCondition::PureTraction);
        let mut state = DiscreteState::identity(&polar);
        let e0 = total_energy(&polar, &dofs, &params, &state, &traction, 3).unwrap();
        assert_relative_eq!(e0, w_i * area, max_relative = 1e-5);

        // Pressure does not change E when det = 1; exact on the twin.
        let twin = crate::mesh::biquadratic_twin(&polar);
        let mut st2 = DiscreteState::identity(&twin);
        let e0t = total_energy(&twin, &dofs, &params, &st2, &traction, 3).unwrap();
        assert_relative_eq!(e0t, w_i * twin.total_area(3), max_relative = 1e-13);
        st2.set_constant_pressure(3.21);
        let e1t = total_energy(&twin, &dofs, &params, &st2, &traction, 3).unwrap();
        assert_relative_eq!(e0t, e1t, max_relative = 1e-12);

        state.set_constant_pressure(3.21);
        let e1 = total_energy(&polar, &dofs, &params, &state, &traction, 3).unwrap();
        // On the polar mesh det grad u_h deviates from 1 only at interpolation
        // order, so the pressure term is tiny but not zero.
        assert_relative_eq!(e0, e1, max_relative = 1e-6);
    }

    #[test]
    fn non_positive_deformation_jacobian_reports_location() {
        let (mesh, dofs) = small_annulus();
        let params = MaterialParams::default();
        // Collapse the deformation to a line: det grad u = 0.
        let state = DiscreteState::interpolate(&mesh, |x| [x[0] + x[1], x[0] + x[1]]);
        let err = assemble_a(&mesh, &dofs, &params, &state, 3).unwrap_err();
        match err {
            AssemblyError::NonPositiveJacobian { det, .. } => assert!(det <= 0.0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn div_cof_of_q2_field_vanishes_identically() {
        // Row-wise divergence of cof(grad u_h) is a polynomial identity in
        // 2-D; quadrature against random smooth test values must vanish.
        let mesh = build_annulus_mesh(0.3, &[(0.3, 0.4), (0.7, 0.3)], 6).unwrap();
        let state = random_state(&mesh, 7, 0.2);
        let rule = gauss_rule(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (e, el) in mesh.elements.iter().enumerate() {
            let mut integral = [0.0; 2];
            for (&xq, &wq) in rule.points.iter().zip(&rule.weights) {
                let frame = MapFrame::at(&el.map, xq).unwrap();
                let hess = physical_hessians(&el.map, xq).unwrap();
                let mut h_u = [[[0.0; 2]; 2]; 2]; // [comp][a][b]
                for k in 0..9 {
                    let ux = state.u[2 * el.nodes[k]];
                    let uy = state.u[2 * el.nodes[k] + 1];
                    for a in 0..2 {
                        for b in 0..2 {
                            h_u[0][a][b] += ux * hess[k][a][b];
                            h_u[1][a][b] += uy * hess[k][a][b];
                        }
                    }
                }
                // cof grad u rows: (d2 u2, -d1 u2) and (-d2 u1, d1 u1); their
                // divergences are differences of mixed second derivatives.
                let div0 = h_u[1][1][0] - h_u[1][0][1];
                let div1 = -h_u[0][1][0] + h_u[0][0][1];
                let psi: f64 = rng.gen_range(-1.0..1.0);
                integral[0] += wq * frame.det * div0 * psi;
                integral[1] += wq * frame.det * div1 * psi;
            }
            assert!(
                integral[0].abs() < 1e-12 && integral[1].abs() < 1e-12,
                "element {e}: {integral:?}"
            );
        }
    }

    #[test]
    fn solution_dump_format() {
        let (mesh, _) = small_annulus();
        let state = DiscreteState::identity(&mesh);
        let text = state.dump();
        assert!(text.starts_with("dpq2p1-sol v1\n"));
        assert_eq!(text.lines().filter(|l| l.starts_with("u ")).count(), mesh.nodes.len());
        assert_eq!(text.lines().filter(|l| l.starts_with("p ")).count(), mesh.elements.len());
        assert_eq!(text, state.dump());
    }
}
