//! Reference-element machinery for the DP-Q2-P1 pair: biquadratic Lagrange
//! shape functions on `[-1,1]^2`, the per-element affine pressure basis
//! `{1, x1, x2}` in reference coordinates, tensor Gauss-Legendre quadrature,
//! and global degree-of-freedom bookkeeping.
//!
//! Node ordering on the reference square (shared with `mesh::Element`):
//! vertices `a0..a3` anticlockwise starting at `(-1,-1)`, edge midpoints
//! `a4` on `x2=-1`, `a5` on `x1=+1`, `a6` on `x2=+1`, `a7` on `x1=-1`,
//! center `a8`.

use crate::mesh::{DualParametricMap, Mesh};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("unsupported quadrature order {0} (need 1..=10)")]
    UnsupportedOrder(usize),
    #[error("singular geometry Jacobian, det = {0}")]
    SingularGeometryJacobian(f64),
}

/// Reference coordinates of the nine Q2 nodes, in element node order.
pub const REF_NODES: [[f64; 2]; 9] = [
    [-1.0, -1.0],
    [1.0, -1.0],
    [1.0, 1.0],
    [-1.0, 1.0],
    [0.0, -1.0],
    [1.0, 0.0],
    [0.0, 1.0],
    [-1.0, 0.0],
    [0.0, 0.0],
];

// 1-D quadratic Lagrange on {-1, 0, 1}, indexed by -1 -> 0, 0 -> 1, 1 -> 2.
fn lag1(i: usize, t: f64) -> f64 {
    match i {
        0 => 0.5 * t * (t - 1.0),
        1 => (1.0 - t) * (1.0 + t),
        _ => 0.5 * t * (t + 1.0),
    }
}

fn lag1_d(i: usize, t: f64) -> f64 {
    match i {
        0 => t - 0.5,
        1 => -2.0 * t,
        _ => t + 0.5,
    }
}

fn lag1_dd(i: usize) -> f64 {
    match i {
        0 => 1.0,
        1 => -2.0,
        _ => 1.0,
    }
}

/// 1-D index pair (into `{-1,0,1}` as `{0,1,2}`) for each of the nine nodes.
const NODE_IJ: [[usize; 2]; 9] =
    [[0, 0], [2, 0], [2, 2], [0, 2], [1, 0], [2, 1], [1, 2], [0, 1], [1, 1]];

/// Values of the nine Q2 shape functions at a reference point.
pub fn q2_eval(xhat: [f64; 2]) -> [f64; 9] {
    std::array::from_fn(|k| lag1(NODE_IJ[k][0], xhat[0]) * lag1(NODE_IJ[k][1], xhat[1]))
}

/// Reference gradients of the nine Q2 shape functions.
pub fn q2_grad(xhat: [f64; 2]) -> [[f64; 2]; 9] {
    std::array::from_fn(|k| {
        let [i, j] = NODE_IJ[k];
        [
            lag1_d(i, xhat[0]) * lag1(j, xhat[1]),
            lag1(i, xhat[0]) * lag1_d(j, xhat[1]),
        ]
    })
}

/// Reference Hessians, packed `[d11, d12, d22]` per shape function.
pub fn q2_hess(xhat: [f64; 2]) -> [[f64; 3]; 9] {
    std::array::from_fn(|k| {
        let [i, j] = NODE_IJ[k];
        [
            lag1_dd(i) * lag1(j, xhat[1]),
            lag1_d(i, xhat[0]) * lag1_d(j, xhat[1]),
            lag1(i, xhat[0]) * lag1_dd(j),
        ]
    })
}

/// Pressure basis `{1, x1, x2}` in reference coordinates.
pub fn p1_eval(xhat: [f64; 2]) -> [f64; 3] {
    [1.0, xhat[0], xhat[1]]
}

/// Tensor Gauss-Legendre rule on `[-1,1]^2`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub order: usize,
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

/// 1-D Gauss-Legendre nodes and weights by Newton iteration on the Legendre
/// recurrence.
pub fn gauss_1d(n: usize) -> Result<(Vec<f64>, Vec<f64>), SpaceError> {
    if n == 0 || n > 10 {
        return Err(SpaceError::UnsupportedOrder(n));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-like initial guess for the i-th root (descending).
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Evaluate P_n and P_n' via the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let dpn = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dpn;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        // Recompute derivative at the converged root for the weight.
        let mut p0 = 1.0;
        let mut p1 = x;
        for k in 2..=n {
            let kf = k as f64;
            let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
            p0 = p1;
            p1 = p2;
        }
        let dpn = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dpn * dpn);
    }
    // n = 1 needs the analytic values: the Newton loop divides by x^2 - 1 = -1
    // at x = 0, which is fine, but keep it exact.
    if n == 1 {
        nodes[0] = 0.0;
        weights[0] = 2.0;
    }
    nodes.reverse();
    weights.reverse();
    Ok((nodes, weights))
}

pub fn gauss_rule(n: usize) -> Result<QuadratureRule, SpaceError> {
    let (x, w) = gauss_1d(n)?;
    let mut points = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            points.push([x[i], x[j]]);
            weights.push(w[i] * w[j]);
        }
    }
    Ok(QuadratureRule { order: n, points, weights })
}

/// Geometry data at one reference point of one element.
#[derive(Debug, Clone, Copy)]
pub struct MapFrame {
    pub jac: [[f64; 2]; 2],
    pub inv_jac: [[f64; 2]; 2],
    pub det: f64,
}

impl MapFrame {
    pub fn at(map: &DualParametricMap, xhat: [f64; 2]) -> Result<Self, SpaceError> {
        let (jac, det) = map.jacobian(xhat);
        if det <= 0.0 {
            return Err(SpaceError::SingularGeometryJacobian(det));
        }
        let inv_jac = [
            [jac[1][1] / det, -jac[0][1] / det],
            [-jac[1][0] / det, jac[0][0] / det],
        ];
        Ok(Self { jac, inv_jac, det })
    }
}

/// Push a reference gradient to physical coordinates:
/// `grad_x = J^{-T} grad_xhat`.
pub fn physical_gradient(frame: &MapFrame, gref: [f64; 2]) -> [f64; 2] {
    [
        frame.inv_jac[0][0] * gref[0] + frame.inv_jac[1][0] * gref[1],
        frame.inv_jac[0][1] * gref[0] + frame.inv_jac[1][1] * gref[1],
    ]
}

/// Physical second derivatives of all nine shape functions at a point of a
/// (possibly curved) element. Includes the map curvature terms:
/// with `g_a = sum_d invJ[d][a] dphi[d]`,
/// `Hess_x[a][b] = sum_c (d g_a / d xhat_c) invJ[c][b]`.
pub fn physical_hessians(
    map: &DualParametricMap,
    xhat: [f64; 2],
) -> Result<[[[f64; 2]; 2]; 9], SpaceError> {
    let frame = MapFrame::at(map, xhat)?;
    let hmap = map.hessian(xhat); // hmap[i][c][d] = d^2 x_i / dxhat_c dxhat_d
    let grads = q2_grad(xhat);
    let hess = q2_hess(xhat);
    let inv = frame.inv_jac;

    // d(invJ)/dxhat_c = -invJ (dJ/dxhat_c) invJ, with (dJ/dxhat_c)[i][d] = hmap[i][c][d]
    let mut dinv = [[[0.0; 2]; 2]; 2];
    for (c, dinv_c) in dinv.iter_mut().enumerate() {
        let mut dj = [[0.0; 2]; 2];
        for i in 0..2 {
            for d in 0..2 {
                dj[i][d] = hmap[i][c][d];
            }
        }
        for r in 0..2 {
            for s in 0..2 {
                let mut acc = 0.0;
                for i in 0..2 {
                    for d in 0..2 {
                        acc += inv[r][i] * dj[i][d] * inv[d][s];
                    }
                }
                dinv_c[r][s] = -acc;
            }
        }
    }

    let mut out = [[[0.0; 2]; 2]; 9];
    for k in 0..9 {
        let g = grads[k];
        let h = hess[k]; // [d11, d12, d22]
        let href = [[h[0], h[1]], [h[1], h[2]]];
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = 0.0;
                for c in 0..2 {
                    // d g_a / d xhat_c
                    let mut dg = 0.0;
                    for d in 0..2 {
                        dg += dinv[c][d][a] * g[d] + inv[d][a] * href[d][c];
                    }
                    acc += dg * inv[c][b];
                }
                out[k][a][b] = acc;
            }
        }
    }
    Ok(out)
}


/// Which deformation dofs exist and how the saddle system is laid out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BoundaryCondition {
    /// Pure traction problem: all nodes free, two mean-zero multipliers.
    PureTraction,
    /// Deformation prescribed on the listed nodes (used for bookkeeping tests;
    /// the cavitation experiments are pure traction).
    Dirichlet(Vec<usize>),
}

/// Global numbering: deformation dofs first (2 per free node, consecutive
/// components), then 3 pressure coefficients per element, then the mean-zero
/// constraint multipliers.
#[derive(Debug, Clone)]
pub struct DofMap {
    pub n_nodes: usize,
    pub n_elements: usize,
    /// Base deformation dof of each node (`None` when Dirichlet-fixed).
    pub node_dof: Vec<Option<usize>>,
    pub n_u: usize,
    pub n_p: usize,
    pub n_constraints: usize,
    /// Deformation dof count as reported in convergence tables; excludes
    /// pressure and constraint dofs.
    pub n_d: usize,
}

impl DofMap {
    pub fn size(&self) -> usize {
        self.n_u + self.n_p + self.n_constraints
    }

    pub fn pressure_dof(&self, element: usize, comp: usize) -> usize {
        self.n_u + 3 * element + comp
    }
}

pub fn build_dof_map(mesh: &Mesh, bc: &BoundaryCondition) -> DofMap {
    let n_nodes = mesh.nodes.len();
    let n_elements = mesh.elements.len();
    let mut node_dof = vec![None; n_nodes];
    let mut next = 0usize;
    match bc {
        BoundaryCondition::PureTraction => {
            for slot in node_dof.iter_mut() {
                *slot = Some(next);
                next += 2;
            }
        }
        BoundaryCondition::Dirichlet(fixed) => {
            let mut is_fixed = vec![false; n_nodes];
            for &n in fixed {
                is_fixed[n] = true;
            }
            for (n, slot) in node_dof.iter_mut().enumerate() {
                if !is_fixed[n] {
                    *slot = Some(next);
                    next += 2;
                }
            }
        }
    }
    let n_u = next;
    let n_constraints = match bc {
        BoundaryCondition::PureTraction => 2,
        BoundaryCondition::Dirichlet(_) => 0,
    };
    DofMap {
        n_nodes,
        n_elements,
        node_dof,
        n_u,
        n_p: 3 * n_elements,
        n_constraints,
        n_d: n_u,
    }
}
