//! Stored-energy density for the incompressible cavitation model and its
//! first two derivatives with respect to the deformation gradient.
//!
//! The energy is
//!
//! ```text
//! W(F) = mu/2 |F|^s + (det F - 1)^2 / 2 + 1 / det F
//! ```
//!
//! with `|F|` the Frobenius norm and `1 < s < 2`. All derivatives are in
//! closed form; the unit tests check them against central finite differences.

use nalgebra::Matrix2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaterialError {
    #[error("non-positive Jacobian det F = {0}")]
    NonPositiveJacobian(f64),
    #[error("invalid material parameters: {0}")]
    InvalidParams(String),
}

/// Shear-like modulus and growth exponent of the stored energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    pub mu: f64,
    pub s: f64,
}

impl MaterialParams {
    pub fn new(mu: f64, s: f64) -> Result<Self, MaterialError> {
        if !(mu > 0.0) {
            return Err(MaterialError::InvalidParams(format!("mu = {mu} must be > 0")));
        }
        if !(s > 1.0 && s < 2.0) {
            return Err(MaterialError::InvalidParams(format!("s = {s} out of (1,2)")));
        }
        Ok(Self { mu, s })
    }

    /// Constant pressure multiplier that makes the undeformed state an exact
    /// equilibrium of the mixed system under zero traction:
    /// `p = (mu s / 2) 2^{(s-2)/2} - 1`.
    pub fn identity_pressure(&self) -> f64 {
        0.5 * self.mu * self.s * 2f64.powf(0.5 * (self.s - 2.0)) - 1.0
    }
}

impl Default for MaterialParams {
    /// `mu = 2, s = 3/2`. This pair reproduces the reference radial traction
    /// t for rho = 0.1, lambda = 2 to six digits (see `verify::RadialOracle`).
    fn default() -> Self {
        Self { mu: 2.0, s: 1.5 }
    }
}

/// Deformation gradient together with the cached quantities the forms need.
#[derive(Debug, Clone, Copy)]
pub struct StrainState {
    pub f: Matrix2<f64>,
    pub det: f64,
    pub cof: Matrix2<f64>,
    pub frob: f64,
}

impl StrainState {
    pub fn new(f: Matrix2<f64>) -> Self {
        Self { f, det: f.determinant(), cof: cofactor(&f), frob: f.norm() }
    }

    pub fn orientation_preserving(&self) -> bool {
        self.det > 0.0
    }
}

/// Cofactor of a 2x2 matrix: `cof [[a,b],[c,d]] = [[d,-c],[-b,a]]`,
/// so that `F (cof F)^T = det F * I`.
pub fn cofactor(f: &Matrix2<f64>) -> Matrix2<f64> {
    Matrix2::new(f[(1, 1)], -f[(1, 0)], -f[(0, 1)], f[(0, 0)])
}

/// W(F). Errors on det F <= 0.
pub fn energy_density(params: &MaterialParams, f: &Matrix2<f64>) -> Result<f64, MaterialError> {
    let det = f.determinant();
    if det <= 0.0 {
        return Err(MaterialError::NonPositiveJacobian(det));
    }
    let frob = f.norm();
    Ok(0.5 * params.mu * frob.powf(params.s) + 0.5 * (det - 1.0) * (det - 1.0) + 1.0 / det)
}

/// First Piola stress `dW/dF = (mu s/2)|F|^{s-2} F + (J-1) cof F - J^{-2} cof F`.
pub fn first_piola(params: &MaterialParams, f: &Matrix2<f64>) -> Result<Matrix2<f64>, MaterialError> {
    let st = StrainState::new(*f);
    if !st.orientation_preserving() {
        return Err(MaterialError::NonPositiveJacobian(st.det));
    }
    let j = st.det;
    let scale = 0.5 * params.mu * params.s * st.frob.powf(params.s - 2.0);
    Ok(st.f * scale + st.cof * (j - 1.0 - 1.0 / (j * j)))
}

/// Fourth-order tangent `A = d^2 W / dF^2` packed as a 4x4 array in row-major
/// `(i,j)` component order: index `2*i + j` for the `F_{ij}` slot. Assembly and
/// the finite-difference tests share this ordering.
pub type Tangent = [[f64; 4]; 4];

/// Constant permutation tensor `d(cof F)_{ij} / dF_{kl}` in the same packing.
fn cofactor_derivative() -> Tangent {
    let mut d = [[0.0; 4]; 4];
    // cof11 = F22, cof12 = -F21, cof21 = -F12, cof22 = F11
    d[0][3] = 1.0;
    d[1][2] = -1.0;
    d[2][1] = -1.0;
    d[3][0] = 1.0;
    d
}

pub fn tangent_tensor(params: &MaterialParams, f: &Matrix2<f64>) -> Result<Tangent, MaterialError> {
    let st = StrainState::new(*f);
    if !st.orientation_preserving() {
        return Err(MaterialError::NonPositiveJacobian(st.det));
    }
    let j = st.det;
    let mu_s = 0.5 * params.mu * params.s;
    let frob_sm4 = st.frob.powf(params.s - 4.0);
    let frob_sm2 = frob_sm4 * st.frob * st.frob;
    let cof_coef = 1.0 + 2.0 / (j * j * j);
    let dcof_coef = j - 1.0 - 1.0 / (j * j);
    let dcof = cofactor_derivative();

    let fv = [st.f[(0, 0)], st.f[(0, 1)], st.f[(1, 0)], st.f[(1, 1)]];
    let cv = [st.cof[(0, 0)], st.cof[(0, 1)], st.cof[(1, 0)], st.cof[(1, 1)]];

    let mut a = [[0.0; 4]; 4];
    for p in 0..4 {
        for q in 0..4 {
            let mut v = mu_s * (params.s - 2.0) * frob_sm4 * fv[p] * fv[q];
            if p == q {
                v += mu_s * frob_sm2;
            }
            v += cof_coef * cv[p] * cv[q] + dcof_coef * dcof[p][q];
            a[p][q] = v;
        }
    }
    Ok(a)
}

/// Contract the packed tangent with a 2x2 increment: `(A : H)_{ij}`.
pub fn tangent_apply(a: &Tangent, h: &Matrix2<f64>) -> Matrix2<f64> {
    let hv = [h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)]];
    let mut out = [0.0; 4];
    for (p, o) in out.iter_mut().enumerate() {
        *o = (0..4).map(|q| a[p][q] * hv[q]).sum();
    }
    Matrix2::new(out[0], out[1], out[2], out[3])
}
