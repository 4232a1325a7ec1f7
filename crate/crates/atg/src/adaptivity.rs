//! Residual-type a posteriori error estimators and Doerfler marking.
//!
//! The element residual combines the strong divergence term of the current
//! solution with advection/reaction terms frozen at the previous-level
//! solution (prolongated onto the current mesh), minus the manufactured
//! source. The edge indicator is the jump of the normal flux of the current
//! solution. Indicators are stored squared:
//! `eta_R_K^2 = H_K^2 |R_K|^2_L2(K)` and `eta_J_E^2 = H_E |J_E|^2_L2(E)`,
//! with `H_K = |K|^(1/2)` and `H_E` the edge length.
//!
//! Oscillation terms are the mesh-size-weighted distances of residual and
//! jump from their elementwise/edgewise means (the P0 projections for linear
//! elements).

use std::sync::Arc;

use crate::fespace::FeFunction;
use crate::geom::{self, Mat2, Vec2};
use crate::mesh::Mesh;
use crate::problems::{LinearProblem, MildCoefficients, Problem, ScalarField};
use crate::quadrature::{edge_rule, triangle_rule, UnsupportedOrder};

#[derive(Debug, thiserror::Error)]
pub enum AdaptError {
    #[error(transparent)]
    Quadrature(#[from] UnsupportedOrder),
    #[error("solution and frozen function live on different meshes")]
    SpaceMismatch,
    #[error("problem {0} has no mildly nonlinear coefficient split")]
    MissingMildForm(&'static str),
    #[error("marking fraction theta must lie in (0, 1), got {0}")]
    BadTheta(f64),
}

/// Squared local indicators, oscillation parts and their global roll-ups.
#[derive(Debug, Clone)]
pub struct EstimatorReport {
    /// `(eta_R_K)^2` per triangle.
    pub eta2_elem: Vec<f64>,
    /// `(eta_J_E)^2` per edge; zero on boundary edges.
    pub eta2_edge: Vec<f64>,
    /// `(osc_R_K)^2` per triangle.
    pub osc2_elem: Vec<f64>,
    /// `(osc_J_E)^2` per edge; zero on boundary edges.
    pub osc2_edge: Vec<f64>,
    pub eta_global: f64,
    pub osc_global: f64,
}

impl EstimatorReport {
    /// Marking totals: each element takes its residual indicator plus half of
    /// each adjacent interior edge indicator.
    pub fn element_totals(&self, mesh: &Mesh) -> Vec<f64> {
        let mut totals = self.eta2_elem.clone();
        for (e, edge) in mesh.edges().iter().enumerate() {
            if let (t0, Some(t1)) = edge.tris {
                totals[t0] += 0.5 * self.eta2_edge[e];
                totals[t1] += 0.5 * self.eta2_edge[e];
            }
        }
        totals
    }

    pub fn eta_residual(&self) -> f64 {
        self.eta2_elem.iter().sum::<f64>().sqrt()
    }

    pub fn eta_jump(&self) -> f64 {
        self.eta2_edge.iter().sum::<f64>().sqrt()
    }
}

/// A Doerfler-marked element set.
#[derive(Debug, Clone)]
pub struct MarkedSet {
    pub elements: Vec<usize>,
    pub theta: f64,
    /// Fraction of the total squared indicator captured by `elements`.
    pub captured_fraction: f64,
}

/// Squared L2 distance of quadrature samples from their mean:
/// `|g - mean(g)|^2_L2` over a domain of the given measure, with weights
/// summing to 1.
pub fn p0_deviation_sq(samples: &[f64], weights: &[f64], measure: f64) -> f64 {
    let mean: f64 = samples.iter().zip(weights).map(|(s, w)| s * w).sum();
    measure
        * samples
            .iter()
            .zip(weights)
            .map(|(s, w)| w * (s - mean) * (s - mean))
            .sum::<f64>()
}

/// Estimator for the linear non-SPD problem: the divergence term uses the
/// current solution, advection and reaction are frozen at
/// `u_coarse_on_fine` (the prolongated previous-level solution).
pub fn estimate_linear(
    u_fine: &FeFunction,
    u_coarse_on_fine: &FeFunction,
    problem: &LinearProblem,
    order: usize,
) -> Result<EstimatorReport, AdaptError> {
    check_same_mesh(u_fine, u_coarse_on_fine)?;
    let residual = |ep_xy: Vec2, g_fine: Vec2, _w_val: f64, g_w: Vec2, w_val: f64| {
        let (x, y) = (ep_xy[0], ep_xy[1]);
        let div_alpha = problem.diffusion_div.as_ref().map_or([0.0, 0.0], |d| d(x, y));
        -geom::dot2(div_alpha, g_fine)
            + geom::dot2((problem.advection)(x, y), g_w)
            + (problem.reaction)(x, y) * w_val
            - (problem.source)(x, y)
    };
    let edge_coeff = |xy: Vec2, _w: f64| (problem.diffusion)(xy[0], xy[1]);
    estimate_impl(u_fine, u_coarse_on_fine, &residual, &edge_coeff, order)
}

/// Tilde estimator for mildly nonlinear problems: all coefficients are
/// frozen at `u_coarse_on_fine`; advection acts on the current gradient.
pub fn estimate_mild(
    u_fine: &FeFunction,
    u_coarse_on_fine: &FeFunction,
    mild: &MildCoefficients,
    source: &ScalarField,
    order: usize,
) -> Result<EstimatorReport, AdaptError> {
    check_same_mesh(u_fine, u_coarse_on_fine)?;
    let residual = |ep_xy: Vec2, g_fine: Vec2, _unused: f64, g_w: Vec2, w_val: f64| {
        let (x, y) = (ep_xy[0], ep_xy[1]);
        // div(alpha(x, w) grad u) = grad w . (d alpha / d u grad u)
        //                           + div_x(alpha) . grad u    (P1: lap u = 0)
        let alpha_du = (mild.diffusion_du)(x, y, w_val);
        let divx = mild.diffusion_div.as_ref().map_or([0.0, 0.0], |d| d(x, y, w_val));
        let div_term = geom::dot2(g_w, geom::mat_vec(alpha_du, g_fine)) + geom::dot2(divx, g_fine);
        -div_term
            + geom::dot2((mild.advection)(x, y, w_val), g_fine)
            + (mild.reaction)(x, y, w_val)
            - source(x, y)
    };
    let edge_coeff = |xy: Vec2, w: f64| (mild.diffusion)(xy[0], xy[1], w);
    estimate_impl(u_fine, u_coarse_on_fine, &residual, &edge_coeff, order)
}

/// Dispatch on the problem kind. Also serves fixed-function studies: pass a
/// prolongated solution together with its prolongated frozen companion to
/// evaluate the estimator of the same function on a refined mesh.
pub fn estimate(
    u_fine: &FeFunction,
    u_coarse_on_fine: &FeFunction,
    problem: &Problem,
    order: usize,
) -> Result<EstimatorReport, AdaptError> {
    match problem {
        Problem::Linear(p) => estimate_linear(u_fine, u_coarse_on_fine, p, order),
        Problem::Nonlinear(p) => {
            let mild = p.mild.as_ref().ok_or(AdaptError::MissingMildForm(p.name))?;
            estimate_mild(u_fine, u_coarse_on_fine, mild, &p.source, order)
        }
    }
}

fn check_same_mesh(u: &FeFunction, w: &FeFunction) -> Result<(), AdaptError> {
    if Arc::ptr_eq(u.space(), w.space()) {
        Ok(())
    } else {
        Err(AdaptError::SpaceMismatch)
    }
}

type ResidualFn<'a> = dyn Fn(Vec2, Vec2, f64, Vec2, f64) -> f64 + 'a;
type EdgeCoeffFn<'a> = dyn Fn(Vec2, f64) -> Mat2 + 'a;

fn estimate_impl(
    u: &FeFunction,
    w: &FeFunction,
    residual: &ResidualFn,
    edge_coeff: &EdgeCoeffFn,
    order: usize,
) -> Result<EstimatorReport, AdaptError> {
    let mesh = Arc::clone(u.space().mesh());
    let tri_rule = triangle_rule(order)?;
    let line_rule = edge_rule(order)?;

    let nt = mesh.n_triangles();
    let ne = mesh.n_edges();
    let mut eta2_elem = vec![0.0; nt];
    let mut osc2_elem = vec![0.0; nt];
    let mut samples = vec![0.0; tri_rule.points.len()];
    for t in 0..nt {
        let area = mesh.area(t);
        let hk2 = area; // H_K^2 = |K|
        let g_fine = u.gradient(t);
        let g_w = w.gradient(t);
        for (q, p) in tri_rule.points.iter().enumerate() {
            let xy = mesh.point_at(t, *p);
            let w_val = w.value_at(t, *p);
            samples[q] = residual(xy, g_fine, 0.0, g_w, w_val);
        }
        let mass: f64 = samples
            .iter()
            .zip(&tri_rule.weights)
            .map(|(s, wq)| wq * s * s)
            .sum::<f64>()
            * area;
        eta2_elem[t] = hk2 * mass;
        osc2_elem[t] = hk2 * p0_deviation_sq(&samples, &tri_rule.weights, area);
    }

    let mut eta2_edge = vec![0.0; ne];
    let mut osc2_edge = vec![0.0; ne];
    let mut jumps = vec![0.0; line_rule.points.len()];
    for (e, edge) in mesh.edges().iter().enumerate() {
        let (t0, Some(t1)) = edge.tris else { continue };
        let [va, vb] = edge.v;
        let a = mesh.vertices()[va].pos();
        let b = mesh.vertices()[vb].pos();
        let dir = geom::sub2(b, a);
        let len = geom::norm2(dir);
        let normal = geom::scale2(geom::perp(dir), 1.0 / len);
        let grad_diff = geom::sub2(u.gradient(t0), u.gradient(t1));

        // Barycentric parameterization of the edge inside t0 (w is
        // continuous, so either side gives the same trace).
        let tri0 = &mesh.triangles()[t0];
        let la = tri0.v.iter().position(|&v| v == va).expect("edge endpoint in triangle");
        let lb = tri0.v.iter().position(|&v| v == vb).expect("edge endpoint in triangle");
        for (q, s) in line_rule.points.iter().enumerate() {
            let mut bary = [0.0; 3];
            bary[la] = 1.0 - s;
            bary[lb] = *s;
            let xy = [a[0] + s * dir[0], a[1] + s * dir[1]];
            let w_val = w.value_at(t0, bary);
            let coeff = edge_coeff(xy, w_val);
            jumps[q] = geom::dot2(geom::mat_vec(coeff, grad_diff), normal);
        }
        let mass: f64 = jumps
            .iter()
            .zip(&line_rule.weights)
            .map(|(j, wq)| wq * j * j)
            .sum::<f64>()
            * len;
        eta2_edge[e] = len * mass; // H_E * |J|^2_L2(E)
        osc2_edge[e] = len * p0_deviation_sq(&jumps, &line_rule.weights, len);
    }

    let eta_global = (eta2_elem.iter().sum::<f64>() + eta2_edge.iter().sum::<f64>()).sqrt();
    let osc_global = (osc2_elem.iter().sum::<f64>() + osc2_edge.iter().sum::<f64>()).sqrt();
    Ok(EstimatorReport { eta2_elem, eta2_edge, osc2_elem, osc2_edge, eta_global, osc_global })
}

/// Doerfler bulk marking on per-element totals: the greedy descending prefix
/// whose squared indicators capture at least the fraction `theta`; ties break
/// by ascending element id.
pub fn dorfler_from_totals(totals: &[f64], theta: f64) -> Result<MarkedSet, AdaptError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(AdaptError::BadTheta(theta));
    }
    let total: f64 = totals.iter().sum();
    if total <= 0.0 {
        return Ok(MarkedSet { elements: Vec::new(), theta, captured_fraction: 1.0 });
    }
    let mut order: Vec<usize> = (0..totals.len()).collect();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    let target = theta * total;
    let mut elements = Vec::new();
    let mut captured = 0.0;
    for id in order {
        if captured >= target {
            break;
        }
        captured += totals[id];
        elements.push(id);
    }
    Ok(MarkedSet { elements, theta, captured_fraction: captured / total })
}

/// Doerfler marking of an estimator report; edge indicators are split evenly
/// onto their adjacent elements.
pub fn dorfler_mark(
    report: &EstimatorReport,
    mesh: &Mesh,
    theta: f64,
) -> Result<MarkedSet, AdaptError> {
    dorfler_from_totals(&report.element_totals(mesh), theta)
}
