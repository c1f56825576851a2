//! Annular meshes of dual-parametric (curved) quadrilateral elements.
//!
//! Each element carries its own geometry map `F_T` from the reference square
//! `[-1,1]^2`; the approximation functions are composed with `F_T^{-1}`, so no
//! map inversion is ever performed. The generator produces polar (circular
//! ring sector) elements tiling the annulus `B_1(0) \ B_rho(0)` with radial
//! layers of prescribed thickness and `N` uniform sectors per layer.

use crate::fem_space::{gauss_rule, q2_eval, q2_grad, q2_hess};
use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("non-positive radius: {0}")]
    NonPositiveRadius(f64),
    #[error("layer spec mismatch: {0}")]
    LayerSumMismatch(String),
    #[error("degenerate sector: angular span {0} exceeds pi/2; raise N")]
    DegenerateSector(f64),
    #[error("invalid geometry map: {0}")]
    InvalidMap(String),
    #[error("mesh dump supports polar maps only")]
    NonPolarDump,
}

/// Geometry map from the reference square to a (curved) quadrilateral.
#[derive(Debug, Clone, PartialEq)]
pub enum DualParametricMap {
    /// `R` affine in `xhat_1`, `theta` affine in `xhat_2`, then
    /// `x = (R cos theta, R sin theta)`.
    Polar { r0: f64, r1: f64, th0: f64, th3: f64 },
    /// Four corner control points, anticlockwise.
    Bilinear { p: [[f64; 2]; 4] },
    /// Nine control points in element node order.
    Biquadratic { p: [[f64; 2]; 9] },
}

const SPAN_TOL: f64 = 1e-12;

impl DualParametricMap {
    pub fn polar(r0: f64, r1: f64, th0: f64, th3: f64) -> Result<Self, MeshError> {
        if !(r0 > 0.0) {
            return Err(MeshError::NonPositiveRadius(r0));
        }
        if !(r1 > r0) {
            return Err(MeshError::InvalidMap(format!("need R1 > R0, got {r1} <= {r0}")));
        }
        if !(th3 > th0) {
            return Err(MeshError::InvalidMap(format!("need th3 > th0, got {th3} <= {th0}")));
        }
        if th3 - th0 > PI / 2.0 + SPAN_TOL {
            return Err(MeshError::DegenerateSector(th3 - th0));
        }
        Ok(Self::Polar { r0, r1, th0, th3 })
    }

    pub fn bilinear(p: [[f64; 2]; 4]) -> Result<Self, MeshError> {
        Self::validated(Self::Bilinear { p })
    }

    pub fn biquadratic(p: [[f64; 2]; 9]) -> Result<Self, MeshError> {
        Self::validated(Self::Biquadratic { p })
    }

    /// Orientation check: det of the geometry Jacobian must be positive at
    /// every 3x3 Gauss point. Polar maps satisfy this by their parameter
    /// invariants; point maps are checked explicitly.
    fn validated(map: Self) -> Result<Self, MeshError> {
        let rule = gauss_rule(3).expect("3x3 rule");
        for &q in &rule.points {
            let (_, det) = map.jacobian(q);
            if det <= 0.0 {
                return Err(MeshError::InvalidMap(format!(
                    "Jacobian determinant {det} <= 0 at reference point ({}, {})",
                    q[0], q[1]
                )));
            }
        }
        Ok(map)
    }

    pub fn eval(&self, xhat: [f64; 2]) -> [f64; 2] {
        match self {
            Self::Polar { r0, r1, th0, th3 } => {
                let r = r0 + 0.5 * (xhat[0] + 1.0) * (r1 - r0);
                let th = th0 + 0.5 * (xhat[1] + 1.0) * (th3 - th0);
                [r * th.cos(), r * th.sin()]
            }
            Self::Bilinear { p } => {
                let n = bilinear_shapes(xhat);
                let mut x = [0.0; 2];
                for k in 0..4 {
                    x[0] += n[k] * p[k][0];
                    x[1] += n[k] * p[k][1];
                }
                x
            }
            Self::Biquadratic { p } => {
                let n = q2_eval(xhat);
                let mut x = [0.0; 2];
                for k in 0..9 {
                    x[0] += n[k] * p[k][0];
                    x[1] += n[k] * p[k][1];
                }
                x
            }
        }
    }

    /// Analytic Jacobian `dx/dxhat` and its determinant.
    pub fn jacobian(&self, xhat: [f64; 2]) -> ([[f64; 2]; 2], f64) {
        let j = match self {
            Self::Polar { r0, r1, th0, th3 } => {
                let rp = 0.5 * (r1 - r0);
                let tp = 0.5 * (th3 - th0);
                let r = r0 + (xhat[0] + 1.0) * rp;
                let th = th0 + (xhat[1] + 1.0) * tp;
                let (sin, cos) = th.sin_cos();
                [[rp * cos, -r * tp * sin], [rp * sin, r * tp * cos]]
            }
            Self::Bilinear { p } => {
                let d = bilinear_shape_grads(xhat);
                let mut j = [[0.0; 2]; 2];
                for k in 0..4 {
                    for (i, ji) in j.iter_mut().enumerate() {
                        ji[0] += d[k][0] * p[k][i];
                        ji[1] += d[k][1] * p[k][i];
                    }
                }
                j
            }
            Self::Biquadratic { p } => {
                let d = q2_grad(xhat);
                let mut j = [[0.0; 2]; 2];
                for k in 0..9 {
                    for (i, ji) in j.iter_mut().enumerate() {
                        ji[0] += d[k][0] * p[k][i];
                        ji[1] += d[k][1] * p[k][i];
                    }
                }
                j
            }
        };
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        (j, det)
    }

    /// Second derivatives of the map: `out[i][c][d] = d^2 x_i / dxhat_c dxhat_d`.
    pub fn hessian(&self, xhat: [f64; 2]) -> [[[f64; 2]; 2]; 2] {
        match self {
            Self::Polar { r0, r1, th0, th3 } => {
                let rp = 0.5 * (r1 - r0);
                let tp = 0.5 * (th3 - th0);
                let r = r0 + (xhat[0] + 1.0) * rp;
                let th = th0 + (xhat[1] + 1.0) * tp;
                let (sin, cos) = th.sin_cos();
                [
                    [[0.0, -rp * tp * sin], [-rp * tp * sin, -r * tp * tp * cos]],
                    [[0.0, rp * tp * cos], [rp * tp * cos, -r * tp * tp * sin]],
                ]
            }
            Self::Bilinear { p } => {
                // Only the mixed derivative survives: d^2 n_k / dx1 dx2 = xi_k eta_k / 4.
                let mut out = [[[0.0; 2]; 2]; 2];
                for (k, &[xi, eta]) in BILINEAR_CORNERS.iter().enumerate() {
                    let c = 0.25 * xi * eta;
                    for i in 0..2 {
                        out[i][0][1] += c * p[k][i];
                        out[i][1][0] += c * p[k][i];
                    }
                }
                out
            }
            Self::Biquadratic { p } => {
                let h = q2_hess(xhat);
                let mut out = [[[0.0; 2]; 2]; 2];
                for k in 0..9 {
                    for i in 0..2 {
                        out[i][0][0] += h[k][0] * p[k][i];
                        out[i][0][1] += h[k][1] * p[k][i];
                        out[i][1][0] += h[k][1] * p[k][i];
                        out[i][1][1] += h[k][2] * p[k][i];
                    }
                }
                out
            }
        }
    }
}

const BILINEAR_CORNERS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];

fn bilinear_shapes(xhat: [f64; 2]) -> [f64; 4] {
    std::array::from_fn(|k| {
        let [xi, eta] = BILINEAR_CORNERS[k];
        0.25 * (1.0 + xi * xhat[0]) * (1.0 + eta * xhat[1])
    })
}

fn bilinear_shape_grads(xhat: [f64; 2]) -> [[f64; 2]; 4] {
    std::array::from_fn(|k| {
        let [xi, eta] = BILINEAR_CORNERS[k];
        [0.25 * xi * (1.0 + eta * xhat[1]), 0.25 * eta * (1.0 + xi * xhat[0])]
    })
}

/// One curved quadrilateral element: geometry map, the nine global node ids
/// in reference order, and the radial layer it belongs to.
#[derive(Debug, Clone)]
pub struct Element {
    pub map: DualParametricMap,
    pub nodes: [usize; 9],
    pub layer: usize,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub elements: Vec<Element>,
    pub rho: f64,
    pub outer_radius: f64,
    /// (inner radius, thickness) per radial layer.
    pub layers: Vec<(f64, f64)>,
    /// Elements per layer.
    pub sectors: usize,
    /// Nominal mesh size.
    pub h: f64,
    /// Cached element size h_T (longest curved edge).
    pub h_t: Vec<f64>,
}

/// Reference parametrizations of the four element edges, with the local node
/// triple (corner, midpoint, corner) of each: edge 0 is `xhat_2 = -1`,
/// edge 1 is `xhat_1 = +1`, edge 2 is `xhat_2 = +1`, edge 3 is `xhat_1 = -1`.
pub const EDGE_NODES: [[usize; 3]; 4] = [[0, 4, 1], [1, 5, 2], [3, 6, 2], [0, 7, 3]];

fn edge_point(edge: usize, t: f64) -> [f64; 2] {
    match edge {
        0 => [t, -1.0],
        1 => [1.0, t],
        2 => [t, 1.0],
        _ => [-1.0, t],
    }
}

/// Arc length of one (curved) element edge by 1-D Gauss quadrature.
pub fn edge_length(map: &DualParametricMap, edge: usize) -> f64 {
    let (x, w) = crate::fem_space::gauss_1d(5).expect("5-point rule");
    let along = if edge == 0 || edge == 2 { 0 } else { 1 };
    x.iter()
        .zip(&w)
        .map(|(&t, &wt)| {
            let (j, _) = map.jacobian(edge_point(edge, t));
            wt * (j[0][along] * j[0][along] + j[1][along] * j[1][along]).sqrt()
        })
        .sum()
}

fn element_h_t(map: &DualParametricMap) -> f64 {
    (0..4).map(|e| edge_length(map, e)).fold(0.0, f64::max)
}

impl Mesh {
    /// Element areas by quadrature of the geometry Jacobian determinant.
    pub fn element_area(&self, element: usize, order: usize) -> f64 {
        let rule = gauss_rule(order).expect("rule");
        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(&q, &w)| w * self.elements[element].map.jacobian(q).1)
            .sum()
    }

    pub fn total_area(&self, order: usize) -> f64 {
        (0..self.elements.len()).map(|e| self.element_area(e, order)).sum()
    }

    /// Interior edges must be shared by exactly two elements with identical
    /// node triples; returns false on any dangling or mismatched edge.
    pub fn conforming(&self) -> bool {
        use std::collections::BTreeMap;
        let mut seen: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
        for el in &self.elements {
            for en in EDGE_NODES {
                let (a, m, b) = (el.nodes[en[0]], el.nodes[en[1]], el.nodes[en[2]]);
                let key = (a.min(b), a.max(b));
                match seen.get_mut(&key) {
                    None => {
                        seen.insert(key, (m, 1));
                    }
                    Some((mid, count)) => {
                        if *mid != m {
                            return false;
                        }
                        *count += 1;
                        if *count > 2 {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    /// Outer-boundary edges: (element index, edge index) pairs lying on the
    /// circle of radius `outer_radius`. For the layered polar meshes this is
    /// edge 1 (`xhat_1 = +1`) of every last-layer element.
    pub fn outer_boundary_edges(&self) -> Vec<(usize, usize)> {
        let last = self.layers.len().saturating_sub(1);
        self.elements
            .iter()
            .enumerate()
            .filter(|(_, el)| el.layer == last)
            .map(|(e, _)| (e, 1))
            .collect()
    }

    /// Plain-text dump, 17 significant digits.
    pub fn dump(&self) -> Result<String, MeshError> {
        let mut out = String::new();
        writeln!(
            out,
            "dpq2p1-mesh v1 rho={:.16e} layers={} N={}",
            self.rho,
            self.layers.len(),
            self.sectors
        )
        .unwrap();
        for (i, n) in self.nodes.iter().enumerate() {
            writeln!(out, "n {} {:.16e} {:.16e}", i, n[0], n[1]).unwrap();
        }
        for (i, el) in self.elements.iter().enumerate() {
            let DualParametricMap::Polar { r0, r1, th0, th3 } = el.map else {
                return Err(MeshError::NonPolarDump);
            };
            write!(out, "e {}", i).unwrap();
            for n in el.nodes {
                write!(out, " {}", n).unwrap();
            }
            writeln!(out, " polar {:.16e} {:.16e} {:.16e} {:.16e}", r0, r1, th0, th3).unwrap();
        }
        Ok(out)
    }
}

/// Check node coordinates against the geometry map, 1e-12 relative.
fn validate_element_nodes(nodes: &[[f64; 2]], el: &Element) -> Result<(), MeshError> {
    for (k, &refpt) in crate::fem_space::REF_NODES.iter().enumerate() {
        let want = el.map.eval(refpt);
        let got = nodes[el.nodes[k]];
        let scale = 1.0 + want[0].abs().max(want[1].abs());
        let err = ((want[0] - got[0]).powi(2) + (want[1] - got[1]).powi(2)).sqrt();
        if err > 1e-12 * scale {
            return Err(MeshError::InvalidMap(format!(
                "node {k} of element deviates from its map image by {err:.3e}"
            )));
        }
    }
    Ok(())
}

/// Build the layered annulus mesh: `layer_spec` lists (inner radius,
/// thickness) per layer, `n` sectors per layer, uniform angular width
/// `2 pi / n`.
pub fn build_annulus_mesh(
    rho: f64,
    layer_spec: &[(f64, f64)],
    n: usize,
) -> Result<Mesh, MeshError> {
    if !(rho > 0.0) {
        return Err(MeshError::NonPositiveRadius(rho));
    }
    if n < 3 {
        return Err(MeshError::LayerSumMismatch(format!("need N >= 3, got {n}")));
    }
    let span = TAU / n as f64;
    if span > PI / 2.0 + SPAN_TOL {
        return Err(MeshError::DegenerateSector(span));
    }
    if layer_spec.is_empty() {
        return Err(MeshError::LayerSumMismatch("no layers".into()));
    }
    let total: f64 = layer_spec.iter().map(|&(_, t)| t).sum();
    if (total - (1.0 - rho)).abs() > 1e-10 {
        return Err(MeshError::LayerSumMismatch(format!(
            "thicknesses sum to {total}, expected {}",
            1.0 - rho
        )));
    }
    // Contiguity of the declared inner radii.
    let mut acc = rho;
    for (l, &(r_t, tau)) in layer_spec.iter().enumerate() {
        if (r_t - acc).abs() > 1e-10 {
            return Err(MeshError::LayerSumMismatch(format!(
                "layer {l} starts at {r_t}, expected {acc}"
            )));
        }
        if !(tau > 0.0) {
            return Err(MeshError::LayerSumMismatch(format!("layer {l} thickness {tau} <= 0")));
        }
        acc += tau;
    }

    let n_layers = layer_spec.len();
    let n_ang = 2 * n;
    // Radial node levels: 2 per layer plus the outer boundary.
    let mut radii = Vec::with_capacity(2 * n_layers + 1);
    let mut r = rho;
    radii.push(r);
    for &(_, tau) in layer_spec {
        radii.push(r + 0.5 * tau);
        radii.push(r + tau);
        r += tau;
    }

    let mut nodes = Vec::with_capacity(radii.len() * n_ang);
    for &rl in &radii {
        for a in 0..n_ang {
            let th = TAU * a as f64 / n_ang as f64;
            nodes.push([rl * th.cos(), rl * th.sin()]);
        }
    }
    let node_id = |level: usize, ang: usize| level * n_ang + (ang % n_ang);

    let mut elements = Vec::with_capacity(n_layers * n);
    let mut h_t = Vec::with_capacity(n_layers * n);
    let mut r = rho;
    for (l, &(_, tau)) in layer_spec.iter().enumerate() {
        for s in 0..n {
            let th0 = TAU * s as f64 / n as f64;
            let th3 = TAU * (s + 1) as f64 / n as f64;
            let map = DualParametricMap::polar(r, r + tau, th0, th3)?;
            let (lv, a) = (2 * l, 2 * s);
            let el = Element {
                nodes: [
                    node_id(lv, a),
                    node_id(lv + 2, a),
                    node_id(lv + 2, a + 2),
                    node_id(lv, a + 2),
                    node_id(lv + 1, a),
                    node_id(lv + 2, a + 1),
                    node_id(lv + 1, a + 2),
                    node_id(lv, a + 1),
                    node_id(lv + 1, a + 1),
                ],
                map,
                layer: l,
            };
            validate_element_nodes(&nodes, &el)?;
            h_t.push(element_h_t(&el.map));
            elements.push(el);
        }
        r += tau;
    }

    let mesh = Mesh {
        nodes,
        elements,
        rho,
        outer_radius: 1.0,
        layers: layer_spec.to_vec(),
        sectors: n,
        h: h_t.iter().cloned().fold(0.0, f64::max),
        h_t,
    };
    debug_assert!(mesh.conforming());
    let area = mesh.total_area(3);
    let exact = PI * (1.0 - rho * rho);
    if ((area - exact) / exact).abs() > 1e-8 {
        return Err(MeshError::LayerSumMismatch(format!(
            "element areas sum to {area}, expected {exact}"
        )));
    }
    Ok(mesh)
}

/// Geometric thickness grading `tau_{i+1} = gamma tau_i`, normalized so the
/// layers fill `[rho, 1]`.
pub fn geometric_layers(rho: f64, count: usize, gamma: f64) -> Vec<(f64, f64)> {
    assert!(count > 0 && gamma >= 1.0);
    let total = 1.0 - rho;
    let weight: f64 = (0..count).map(|i| gamma.powi(i as i32)).sum();
    let tau0 = total / weight;
    let mut out = Vec::with_capacity(count);
    let mut r = rho;
    for i in 0..count {
        let tau = tau0 * gamma.powi(i as i32);
        out.push((r, tau));
        r += tau;
    }
    // Absorb rounding into the last layer so the sum is exact.
    if let Some(last) = out.last_mut() {
        last.1 = 1.0 - last.0;
    }
    out
}

/// Thickness profile interpolating between a given min (inner) and max
/// (outer) thickness with a power law, the exponent solved so the layers sum
/// to `1 - rho`. Used to reproduce the published mesh families from their
/// (min, max, count) data.
pub fn power_law_layers(rho: f64, tau_min: f64, tau_max: f64, count: usize) -> Vec<(f64, f64)> {
    assert!(count >= 2 && tau_max > tau_min && tau_min > 0.0);
    let total = 1.0 - rho;
    let base = count as f64 * tau_min;
    let need = (total - base) / (tau_max - tau_min);
    assert!(
        need > 1e-12 && need < (count - 1) as f64,
        "infeasible layer profile: sum constraint {need} out of range"
    );
    let sum_pow = |q: f64| -> f64 {
        (0..count).map(|i| (i as f64 / (count - 1) as f64).powf(q)).sum()
    };
    // sum_pow is decreasing in q, from ~count (q -> 0) to 1 (q -> inf).
    let (mut lo, mut hi) = (1e-6, 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sum_pow(mid) > need {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q = 0.5 * (lo + hi);
    let mut taus: Vec<f64> =
        (0..count).map(|i| tau_min + (tau_max - tau_min) * (i as f64 / (count - 1) as f64).powf(q)).collect();
    let scale = total / taus.iter().sum::<f64>();
    for t in &mut taus {
        *t *= scale;
    }
    let mut out = Vec::with_capacity(count);
    let mut r = rho;
    for &tau in &taus {
        out.push((r, tau));
        r += tau;
    }
    if let Some(last) = out.last_mut() {
        last.1 = 1.0 - last.0;
    }
    out
}

/// Published mesh family for rho = 0.01: rows keyed by nominal h.
pub fn table1a_layers(h: f64) -> Option<(Vec<(f64, f64)>, usize)> {
    let (tau_min, tau_max, count, n) = match () {
        _ if (h - 0.05).abs() < 1e-12 => (0.0300, 0.1900, 8, 20),
        _ if (h - 0.04).abs() < 1e-12 => (0.0224, 0.1376, 11, 26),
        _ if (h - 0.03).abs() < 1e-12 => (0.0156, 0.1164, 14, 34),
        _ if (h - 0.02).abs() < 1e-12 => (0.0096, 0.0736, 22, 50),
        _ => return None,
    };
    Some((power_law_layers(0.01, tau_min, tau_max, count), n))
}

/// Published mesh family for rho = 0.0001.
pub fn table1b_layers(h: f64) -> Option<(Vec<(f64, f64)>, usize)> {
    let (tau_min, tau_max, count, n) = match () {
        _ if (h - 0.05).abs() < 1e-12 => (0.0120, 0.1720, 9, 24),
        _ if (h - 0.04).abs() < 1e-12 => (0.0080, 0.1360, 12, 28),
        _ if (h - 0.03).abs() < 1e-12 => (0.0048, 0.1056, 16, 38),
        _ if (h - 0.02).abs() < 1e-12 => (0.0024, 0.0728, 22, 56),
        _ => return None,
    };
    Some((power_law_layers(0.0001, tau_min, tau_max, count), n))
}

pub fn table1a_mesh(h: f64) -> Result<Mesh, MeshError> {
    let (layers, n) = table1a_layers(h)
        .ok_or_else(|| MeshError::LayerSumMismatch(format!("no table row for h = {h}")))?;
    let mut m = build_annulus_mesh(0.01, &layers, n)?;
    m.h = h;
    Ok(m)
}

pub fn table1b_mesh(h: f64) -> Result<Mesh, MeshError> {
    let (layers, n) = table1b_layers(h)
        .ok_or_else(|| MeshError::LayerSumMismatch(format!("no table row for h = {h}")))?;
    let mut m = build_annulus_mesh(0.0001, &layers, n)?;
    m.h = h;
    Ok(m)
}

/// Graded mesh for arbitrary defect radius, following the published rows'
/// scaling: innermost thickness `4h(h + sqrt(rho))`, `N ~ 1/h` sectors,
/// geometric growth filling the annulus.
pub fn graded_mesh(rho: f64, h: f64) -> Result<Mesh, MeshError> {
    assert!(rho > 0.0 && rho < 1.0 && h > 0.0);
    let tau0 = (4.0 * h * (h + rho.sqrt())).min(0.5 * (1.0 - rho));
    let count = ((0.44 / h).round() as usize).max(2);
    let n = ((1.0 / h).round() as usize).max(4);
    let total = 1.0 - rho;
    let layers = if tau0 * count as f64 >= total {
        geometric_layers(rho, count, 1.0)
    } else {
        // Solve the geometric ratio so count layers starting at tau0 fill the gap.
        let (mut lo, mut hi) = (1.0f64, 16.0f64);
        let sum = |g: f64| -> f64 {
            if (g - 1.0).abs() < 1e-14 {
                count as f64 * tau0
            } else {
                tau0 * (g.powi(count as i32) - 1.0) / (g - 1.0)
            }
        };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if sum(mid) < total {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let gamma = 0.5 * (lo + hi);
        let mut out = Vec::with_capacity(count);
        let mut r = rho;
        for i in 0..count {
            let tau = tau0 * gamma.powi(i as i32);
            out.push((r, tau));
            r += tau;
        }
        let correction = (1.0 - rho) / (out.last().unwrap().0 + out.last().unwrap().1 - rho);
        let mut r = rho;
        for item in &mut out {
            let tau = item.1 * correction;
            *item = (r, tau);
            r += tau;
        }
        if let Some(last) = out.last_mut() {
            last.1 = 1.0 - last.0;
        }
        out
    };
    let mut m = build_annulus_mesh(rho, &layers, n)?;
    m.h = h;
    Ok(m)
}

/// Replace every geometry map by the biquadratic map through the element's
/// own nine nodes. On such a mesh the identity deformation lies in the
/// discrete space exactly (geometry and approximation share the Q2 basis),
/// which the exactness tests rely on; polar maps only admit it up to
/// interpolation error.
pub fn biquadratic_twin(mesh: &Mesh) -> Mesh {
    let mut twin = mesh.clone();
    for el in &mut twin.elements {
        let p: [[f64; 2]; 9] = std::array::from_fn(|k| mesh.nodes[el.nodes[k]]);
        el.map = DualParametricMap::biquadratic(p).expect("twin map orientation");
    }
    twin.h_t = twin.elements.iter().map(|el| element_h_t(&el.map)).collect();
    twin
}

/// One-element mesh (quarter-ring sector), for bookkeeping tests.
pub fn single_element_mesh() -> Mesh {
    let map = DualParametricMap::polar(0.5, 1.0, 0.0, PI / 2.0).unwrap();
    let nodes: Vec<[f64; 2]> =
        crate::fem_space::REF_NODES.iter().map(|&xh| map.eval(xh)).collect();
    let el = Element { map, nodes: std::array::from_fn(|k| k), layer: 0 };
    let h_t = vec![element_h_t(&el.map)];
    Mesh {
        nodes,
        elements: vec![el],
        rho: 0.5,
        outer_radius: 1.0,
        layers: vec![(0.5, 0.5)],
        sectors: 1,
        h: h_t[0],
        h_t,
    }
}

/// Per-element quality data for the (M1)/(M2) mesh conditions.
#[derive(Debug, Clone)]
pub struct ElementQuality {
    pub edge_lengths: [f64; 4],
    pub h_t: f64,
    pub l1: [f64; 2],
    pub l2: [f64; 2],
    /// `h_T^{-2} |l1 x l2|`.
    pub m2_value: f64,
    /// Intra-element edge ratio <= 4.
    pub m1_intra: bool,
}

#[derive(Debug, Clone)]
pub struct MeshQualityReport {
    pub per_element: Vec<ElementQuality>,
    pub min_edge: f64,
    pub max_edge: f64,
    pub min_h_t: f64,
    pub max_h_t: f64,
    pub min_m2: f64,
    pub c_min: f64,
    /// All elements pass the intra-element edge-ratio test and the global
    /// h_T ratio is <= 4.
    pub m1_pass: bool,
    /// `h_T^{-2} |l1 x l2| >= c_min` everywhere.
    pub m2_pass: bool,
}

/// Evaluate the quality conditions: quasi-uniform edges within each element
/// and globally (ratio 4), and the minimum-angle value
/// `h_T^{-2} |l1 x l2| >= c_min` with
/// `l1 = a0a1 + a3a2 + 8 a7a5`, `l2 = a0a3 + a1a2 + 8 a4a6`.
pub fn check_regularity(mesh: &Mesh, c_min: f64) -> MeshQualityReport {
    let mut per_element = Vec::with_capacity(mesh.elements.len());
    let (mut min_edge, mut max_edge) = (f64::INFINITY, 0.0f64);
    let (mut min_h_t, mut max_h_t) = (f64::INFINITY, 0.0f64);
    let mut min_m2 = f64::INFINITY;
    let mut all_intra = true;

    for el in &mesh.elements {
        let edges: [f64; 4] = std::array::from_fn(|e| edge_length(&el.map, e));
        let h_t = edges.iter().cloned().fold(0.0, f64::max);
        let e_min = edges.iter().cloned().fold(f64::INFINITY, f64::min);
        let m1_intra = e_min > 0.0 && h_t / e_min <= 4.0;

        let p = |k: usize| mesh.nodes[el.nodes[k]];
        let d = |a: [f64; 2], b: [f64; 2]| [b[0] - a[0], b[1] - a[1]];
        let add = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| {
            [a[0] + b[0] + 8.0 * c[0], a[1] + b[1] + 8.0 * c[1]]
        };
        let l1 = add(d(p(0), p(1)), d(p(3), p(2)), d(p(7), p(5)));
        let l2 = add(d(p(0), p(3)), d(p(1), p(2)), d(p(4), p(6)));
        let wedge = (l1[0] * l2[1] - l1[1] * l2[0]).abs();
        let m2_value = if h_t > 0.0 { wedge / (h_t * h_t) } else { 0.0 };

        min_edge = min_edge.min(e_min);
        max_edge = max_edge.max(h_t);
        min_h_t = min_h_t.min(h_t);
        max_h_t = max_h_t.max(h_t);
        min_m2 = min_m2.min(m2_value);
        all_intra &= m1_intra;
        per_element.push(ElementQuality { edge_lengths: edges, h_t, l1, l2, m2_value, m1_intra });
    }

    let m1_pass = all_intra && min_h_t > 0.0 && max_h_t / min_h_t <= 4.0;
    let m2_pass = min_m2 >= c_min;
    MeshQualityReport {
        per_element,
        min_edge,
        max_edge,
        min_h_t,
        max_h_t,
        min_m2,
        c_min,
        m1_pass,
        m2_pass,
    }
}
