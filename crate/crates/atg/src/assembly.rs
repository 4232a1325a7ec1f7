//! Assembly of the bilinear forms, load vectors and nonlinear residuals.
//!
//! Coefficient callbacks receive an [`ElemPoint`] (element id, barycentric
//! coordinates and physical position of the quadrature point), which lets
//! callers freeze coefficients at a finite element function by evaluating it
//! at the same point. Matrices are over interior dofs only (homogeneous
//! Dirichlet elimination).

use std::sync::Arc;

use crate::fespace::{FeFunction, FeSpace};
use crate::geom::{self, Mat2, Vec2};
use crate::linalg::CsrMatrix;
use crate::problems::{MildCoefficients, NonlinearProblem, ScalarField};
use crate::quadrature::TriangleRule;

/// A quadrature point inside an element.
pub struct ElemPoint {
    pub tri: usize,
    pub bary: [f64; 3],
    pub xy: Vec2,
}

/// Stiffness-type matrix of `(alpha grad u, grad v)`.
///
/// For SPD `alpha` the result is symmetric positive definite after Dirichlet
/// elimination; for constant `alpha` it is exact at any quadrature order.
pub fn assemble_diffusion(
    space: &Arc<FeSpace>,
    alpha: impl Fn(&ElemPoint) -> Mat2,
    rule: &TriangleRule,
) -> CsrMatrix {
    let mesh = space.mesh();
    let mut triplets = Vec::new();
    for t in 0..mesh.n_triangles() {
        let verts = mesh.triangles()[t].v;
        let grads = mesh.grad_lambda(t);
        let area = mesh.area(t);
        let mut local = [[0.0f64; 3]; 3];
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let ep = ElemPoint { tri: t, bary: *p, xy: mesh.point_at(t, *p) };
            let a = alpha(&ep);
            let scale = w * area;
            for j in 0..3 {
                let ag = geom::mat_vec(a, grads[j]);
                for i in 0..3 {
                    local[i][j] += scale * geom::dot2(ag, grads[i]);
                }
            }
        }
        scatter(space, &verts, &local, &mut triplets);
    }
    CsrMatrix::from_triplets(space.n_dofs(), triplets)
}

/// Advection-reaction matrix of `(beta . grad u + gamma u, v)`; generally
/// nonsymmetric.
pub fn assemble_advection_reaction(
    space: &Arc<FeSpace>,
    beta: impl Fn(&ElemPoint) -> Vec2,
    gamma: impl Fn(&ElemPoint) -> f64,
    rule: &TriangleRule,
) -> CsrMatrix {
    let mesh = space.mesh();
    let mut triplets = Vec::new();
    for t in 0..mesh.n_triangles() {
        let verts = mesh.triangles()[t].v;
        let grads = mesh.grad_lambda(t);
        let area = mesh.area(t);
        let mut local = [[0.0f64; 3]; 3];
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let ep = ElemPoint { tri: t, bary: *p, xy: mesh.point_at(t, *p) };
            let b = beta(&ep);
            let g = gamma(&ep);
            let scale = w * area;
            for j in 0..3 {
                let trial = geom::dot2(b, grads[j]) + g * p[j];
                for i in 0..3 {
                    local[i][j] += scale * trial * p[i];
                }
            }
        }
        scatter(space, &verts, &local, &mut triplets);
    }
    CsrMatrix::from_triplets(space.n_dofs(), triplets)
}

/// Load vector `(f, v)` for a pointwise source callback.
pub fn assemble_load(
    space: &Arc<FeSpace>,
    f: impl Fn(&ElemPoint) -> f64,
    rule: &TriangleRule,
) -> Vec<f64> {
    let mesh = space.mesh();
    let mut out = vec![0.0; space.n_dofs()];
    for t in 0..mesh.n_triangles() {
        let verts = mesh.triangles()[t].v;
        let area = mesh.area(t);
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let ep = ElemPoint { tri: t, bary: *p, xy: mesh.point_at(t, *p) };
            let fv = f(&ep) * w * area;
            for i in 0..3 {
                if let Some(dof) = space.dof_of_vertex(verts[i]) {
                    out[dof] += fv * p[i];
                }
            }
        }
    }
    out
}

/// Jacobian of the nonlinear Galerkin residual at `w`: the matrix of
/// `(a(w) grad v + b(w) v, grad xi) + (c(w) . grad v + d(w) v, xi)`.
pub fn assemble_linearized(
    space: &Arc<FeSpace>,
    w: &FeFunction,
    problem: &NonlinearProblem,
    rule: &TriangleRule,
) -> CsrMatrix {
    let mesh = space.mesh();
    let gen = &problem.general;
    let mut triplets = Vec::new();
    for t in 0..mesh.n_triangles() {
        let verts = mesh.triangles()[t].v;
        let grads = mesh.grad_lambda(t);
        let area = mesh.area(t);
        let gw = w.gradient(t);
        let mut local = [[0.0f64; 3]; 3];
        for (p, wq) in rule.points.iter().zip(&rule.weights) {
            let xy = mesh.point_at(t, *p);
            let wv = w.value_at(t, *p);
            let a = (gen.flux_dgrad)(xy[0], xy[1], wv, gw);
            let b = (gen.flux_du)(xy[0], xy[1], wv, gw);
            let c = (gen.lower_order_dgrad)(xy[0], xy[1], wv, gw);
            let d = (gen.lower_order_du)(xy[0], xy[1], wv, gw);
            let scale = wq * area;
            for j in 0..3 {
                let flux_part = [
                    a[0][0] * grads[j][0] + a[0][1] * grads[j][1] + b[0] * p[j],
                    a[1][0] * grads[j][0] + a[1][1] * grads[j][1] + b[1] * p[j],
                ];
                let lower_part = geom::dot2(c, grads[j]) + d * p[j];
                for i in 0..3 {
                    local[i][j] +=
                        scale * (geom::dot2(flux_part, grads[i]) + lower_part * p[i]);
                }
            }
        }
        scatter(space, &verts, &local, &mut triplets);
    }
    CsrMatrix::from_triplets(space.n_dofs(), triplets)
}

/// Nonlinear Galerkin residual `A(w, v_i) - (f, v_i)` in the general form.
pub fn nonlinear_residual(
    space: &Arc<FeSpace>,
    w: &FeFunction,
    problem: &NonlinearProblem,
    rule: &TriangleRule,
) -> Vec<f64> {
    let mesh = space.mesh();
    let gen = &problem.general;
    let mut out = vec![0.0; space.n_dofs()];
    for t in 0..mesh.n_triangles() {
        let verts = mesh.triangles()[t].v;
        let grads = mesh.grad_lambda(t);
        let area = mesh.area(t);
        let gw = w.gradient(t);
        for (p, wq) in rule.points.iter().zip(&rule.weights) {
            let xy = mesh.point_at(t, *p);
            let wv = w.value_at(t, *p);
            let flux = (gen.flux)(xy[0], xy[1], wv, gw);
            let lower = (gen.lower_order)(xy[0], xy[1], wv, gw) - (problem.source)(xy[0], xy[1]);
            let scale = wq * area;
            for i in 0..3 {
                if let Some(dof) = space.dof_of_vertex(verts[i]) {
                    out[dof] += scale * (geom::dot2(flux, grads[i]) + lower * p[i]);
                }
            }
        }
    }
    out
}

/// Residual of the mildly nonlinear form at `w`:
/// `(alpha(w) grad w, grad v_i) + (beta(w) . grad w + gamma(w) - f, v_i)`.
pub fn mild_residual(
    space: &Arc<FeSpace>,
    w: &FeFunction,
    mild: &MildCoefficients,
    source: &ScalarField,
    rule: &TriangleRule,
) -> Vec<f64> {
    let mesh = space.mesh();
    let mut out = vec![0.0; space.n_dofs()];
    for t in 0..mesh.n_triangles() {
        let verts = mesh.triangles()[t].v;
        let grads = mesh.grad_lambda(t);
        let area = mesh.area(t);
        let gw = w.gradient(t);
        for (p, wq) in rule.points.iter().zip(&rule.weights) {
            let xy = mesh.point_at(t, *p);
            let wv = w.value_at(t, *p);
            let flux = geom::mat_vec((mild.diffusion)(xy[0], xy[1], wv), gw);
            let lower = geom::dot2((mild.advection)(xy[0], xy[1], wv), gw)
                + (mild.reaction)(xy[0], xy[1], wv)
                - source(xy[0], xy[1]);
            let scale = wq * area;
            for i in 0..3 {
                if let Some(dof) = space.dof_of_vertex(verts[i]) {
                    out[dof] += scale * (geom::dot2(flux, grads[i]) + lower * p[i]);
                }
            }
        }
    }
    out
}

fn scatter(
    space: &Arc<FeSpace>,
    verts: &[usize; 3],
    local: &[[f64; 3]; 3],
    triplets: &mut Vec<(usize, usize, f64)>,
) {
    for i in 0..3 {
        let Some(row) = space.dof_of_vertex(verts[i]) else { continue };
        for j in 0..3 {
            if let Some(col) = space.dof_of_vertex(verts[j]) {
                triplets.push((row, col, local[i][j]));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::FeSpace;
    use crate::geom::IDENTITY;
    use crate::mesh::Mesh;
    use crate::problems::{test1, test2};
    use crate::quadrature::triangle_rule;

    /// Local 3x3 matrices computed without Dirichlet elimination, for
    /// comparison against hand calculations.
    fn local_matrix(
        coords: [[f64; 2]; 3],
        form: impl Fn(&ElemPoint, Vec2, f64, Vec2, f64) -> f64,
        order: usize,
    ) -> [[f64; 3]; 3] {
        let mesh = Mesh::from_parts(coords.to_vec(), vec![([0, 1, 2], 0)]).unwrap();
        let rule = triangle_rule(order).unwrap();
        let grads = mesh.grad_lambda(0);
        let area = mesh.area(0);
        let mut local = [[0.0f64; 3]; 3];
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let ep = ElemPoint { tri: 0, bary: *p, xy: mesh.point_at(0, *p) };
            for i in 0..3 {
                for j in 0..3 {
                    local[i][j] += w * area * form(&ep, grads[j], p[j], grads[i], p[i]);
                }
            }
        }
        local
    }

    #[test]
    fn unit_triangle_stiffness_block() {
        let local = local_matrix(
            [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            |_, gj, _, gi, _| geom::dot2(gj, gi),
            1,
        );
        let expect = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((local[i][j] - expect[i][j]).abs() < 1e-13, "({i},{j})");
            }
        }
    }

    #[test]
    fn unit_triangle_mass_block() {
        let local = local_matrix(
            [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            |_, _, lj, _, li| lj * li,
            2,
        );
        let k = 0.5 / 12.0;
        let expect = [[2.0 * k, k, k], [k, 2.0 * k, k], [k, k, 2.0 * k]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((local[i][j] - expect[i][j]).abs() < 1e-13, "({i},{j})");
            }
        }
    }

    fn uniform_space(n: usize) -> Arc<FeSpace> {
        FeSpace::new(Arc::new(Mesh::initial_uniform(n).unwrap()))
    }

    #[test]
    fn diffusion_scales_linearly_and_is_spd() {
        let space = uniform_space(8);
        let rule = triangle_rule(4).unwrap();
        let a1 = assemble_diffusion(&space, |_| IDENTITY, &rule);
        let a2 = assemble_diffusion(&space, |_| geom::mat_scale(IDENTITY, 2.0), &rule);
        for i in 0..a1.n() {
            let (cols, vals) = a1.row(i);
            for (c, v) in cols.iter().zip(vals) {
                assert!((2.0 * v - a2.get(i, *c)).abs() < 1e-13);
            }
        }
        assert!(a1.max_asymmetry() < 1e-14);
        // Positive-definiteness probe on deterministic pseudo-random vectors.
        let mut state = 1u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for _ in 0..100 {
            let x: Vec<f64> = (0..a1.n()).map(|_| next()).collect();
            let quad = crate::linalg::dot(&x, &a1.matvec(&x));
            assert!(quad > 0.0);
        }
    }

    #[test]
    fn advection_reaction_zero_coefficients_give_zero_matrix() {
        let space = uniform_space(4);
        let rule = triangle_rule(4).unwrap();
        let m = assemble_advection_reaction(&space, |_| [0.0, 0.0], |_| 0.0, &rule);
        for i in 0..m.n() {
            let (_, vals) = m.row(i);
            assert!(vals.iter().all(|v| v.abs() == 0.0));
        }
    }

    #[test]
    fn advection_entries_match_quadrature_oracle() {
        // (beta . grad phi_j + gamma phi_j, phi_i) checked entrywise against
        // a direct order-10 quadrature of the same integrand.
        let space = uniform_space(4);
        let mesh = space.mesh();
        let rule = triangle_rule(4).unwrap();
        let beta = [1.0, 0.0];
        let m = assemble_advection_reaction(&space, |_| beta, |_| 0.0, &rule);

        let oracle_rule = triangle_rule(10).unwrap();
        let n = space.n_dofs();
        let mut oracle = vec![vec![0.0f64; n]; n];
        for t in 0..mesh.n_triangles() {
            let verts = mesh.triangles()[t].v;
            let grads = mesh.grad_lambda(t);
            let area = mesh.area(t);
            for (p, w) in oracle_rule.points.iter().zip(&oracle_rule.weights) {
                for i in 0..3 {
                    let Some(row) = space.dof_of_vertex(verts[i]) else { continue };
                    for j in 0..3 {
                        if let Some(col) = space.dof_of_vertex(verts[j]) {
                            oracle[row][col] += w * area * geom::dot2(beta, grads[j]) * p[i];
                        }
                    }
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                assert!((m.get(i, j) - oracle[i][j]).abs() < 1e-13, "({i},{j})");
            }
        }
    }

    #[test]
    fn combined_form_matches_matrix_sum() {
        // The full nonsymmetric form assembled in one pass equals the sum of
        // its diffusion and advection-reaction parts.
        let space = uniform_space(6);
        let rule = triangle_rule(4).unwrap();
        let a_s = assemble_diffusion(&space, |_| IDENTITY, &rule);
        let a_n = assemble_advection_reaction(&space, |_| [1.0, 1.0], |_| 1.0, &rule);
        let sum = a_s.add(&a_n);

        // Monolithic assembly through the linearized form of an equivalent
        // "nonlinear" problem whose Jacobian is exactly alpha, beta, gamma.
        let fake = NonlinearProblem {
            name: "combined",
            general: crate::problems::GeneralCoefficients {
                flux: Box::new(|_, _, _, g| g),
                flux_du: Box::new(|_, _, _, _| [0.0, 0.0]),
                flux_dgrad: Box::new(|_, _, _, _| IDENTITY),
                lower_order: Box::new(|_, _, u, g| g[0] + g[1] + u),
                lower_order_du: Box::new(|_, _, _, _| 1.0),
                lower_order_dgrad: Box::new(|_, _, _, _| [1.0, 1.0]),
            },
            mild: None,
            source: Box::new(|_, _| 0.0),
            exact: crate::problems::linear_nonspd().exact,
        };
        let w = FeFunction::zero(&space);
        let mono = assemble_linearized(&space, &w, &fake, &rule);
        for i in 0..sum.n() {
            let (cols, vals) = sum.row(i);
            for (c, v) in cols.iter().zip(vals) {
                assert!((v - mono.get(i, *c)).abs() <= 1e-14 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn load_of_unit_source_is_support_third() {
        let space = uniform_space(4);
        let mesh = space.mesh();
        let rule = triangle_rule(6).unwrap();
        let load = assemble_load(&space, |_| 1.0, &rule);
        for dof in 0..space.n_dofs() {
            let v = space.vertex_of_dof(dof);
            let support: f64 = (0..mesh.n_triangles())
                .filter(|&t| mesh.triangles()[t].v.contains(&v))
                .map(|t| mesh.area(t))
                .sum();
            assert!((load[dof] - support / 3.0).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_source_gives_zero_load() {
        let space = uniform_space(4);
        let rule = triangle_rule(6).unwrap();
        let load = assemble_load(&space, |_| 0.0, &rule);
        assert!(load.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linearized_at_zero_matches_stiffness_plus_scaled_mass() {
        // Test 1 at w = c0 (interior constant): Jacobian = stiffness +
        // 5 c0^4 * mass on fully interior couplings.
        let space = uniform_space(8);
        let rule = triangle_rule(6).unwrap();
        let problem = test1();

        let w0 = FeFunction::zero(&space);
        let jac0 = assemble_linearized(&space, &w0, &problem, &rule);
        let stiff = assemble_diffusion(&space, |_| IDENTITY, &rule);
        for i in 0..jac0.n() {
            let (cols, vals) = jac0.row(i);
            for (c, v) in cols.iter().zip(vals) {
                assert!((v - stiff.get(i, *c)).abs() < 1e-14);
            }
        }

        let c0 = 0.75;
        let wc = FeFunction::interpolate(&space, |_, _| c0);
        let jac = assemble_linearized(&space, &wc, &problem, &rule);
        let mass = assemble_advection_reaction(&space, |_| [0.0, 0.0], |_| 1.0, &rule);
        let mesh = space.mesh();
        for i in 0..jac.n() {
            // Only rows whose vertex patch is fully interior see the constant.
            let vi = space.vertex_of_dof(i);
            let patch_interior = (0..mesh.n_triangles())
                .filter(|&t| mesh.triangles()[t].v.contains(&vi))
                .all(|t| mesh.triangles()[t].v.iter().all(|&v| !mesh.vertices()[v].boundary));
            if !patch_interior {
                continue;
            }
            let (cols, vals) = jac.row(i);
            for (c, v) in cols.iter().zip(vals) {
                let want = stiff.get(i, *c) + 5.0 * c0.powi(4) * mass.get(i, *c);
                assert!((v - want).abs() < 1e-12, "row {i} col {c}: {v} vs {want}");
            }
        }
    }

    #[test]
    fn residual_at_zero_is_negative_load() {
        let space = uniform_space(8);
        let rule = triangle_rule(6).unwrap();
        let problem = test1();
        let w = FeFunction::zero(&space);
        let res = nonlinear_residual(&space, &w, &problem, &rule);
        let load = assemble_load(&space, |ep| (problem.source)(ep.xy[0], ep.xy[1]), &rule);
        for (r, l) in res.iter().zip(&load) {
            assert!((r + l).abs() < 1e-14);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let space = uniform_space(4);
        let rule = triangle_rule(6).unwrap();
        let problem = test1();
        let w = FeFunction::interpolate(&space, |x, y| 0.4 * (1.0 - x * x) * (1.0 - y * y));
        let jac = assemble_linearized(&space, &w, &problem, &rule);
        let base = nonlinear_residual(&space, &w, &problem, &rule);
        let eps = 1e-6;
        for j in 0..space.n_dofs() {
            let mut coeffs = w.coeffs().to_vec();
            coeffs[j] += eps;
            let wp = FeFunction::from_coeffs(&space, coeffs).unwrap();
            let pert = nonlinear_residual(&space, &wp, &problem, &rule);
            for i in 0..space.n_dofs() {
                let fd = (pert[i] - base[i]) / eps;
                let ex = jac.get(i, j);
                assert!(
                    (fd - ex).abs() <= 1e-5 * ex.abs().max(1.0),
                    "d r[{i}] / d w[{j}]: fd {fd}, assembled {ex}"
                );
            }
        }
    }

    #[test]
    fn mild_and_general_views_assemble_identical_residuals() {
        for problem in [test1(), test2()] {
            let space = uniform_space(6);
            let rule = triangle_rule(6).unwrap();
            let w = FeFunction::interpolate(&space, |x, y| 0.3 * (1.0 + x) * (1.0 - y));
            let general = nonlinear_residual(&space, &w, &problem, &rule);
            let mild = mild_residual(
                &space,
                &w,
                problem.mild.as_ref().unwrap(),
                &problem.source,
                &rule,
            );
            for (a, b) in general.iter().zip(&mild) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn consistency_error_decreases_under_refinement() {
        // Residual of the exact solution's interpolant decreases roughly
        // linearly in h.
        let problem = test1();
        let mut norms = Vec::new();
        for n in [8usize, 16, 32] {
            let space = uniform_space(n);
            let rule = triangle_rule(6).unwrap();
            let w = FeFunction::interpolate(&space, |x, y| (problem.exact.value)(x, y));
            let res = nonlinear_residual(&space, &w, &problem, &rule);
            norms.push(crate::linalg::norm_inf(&res));
        }
        assert!(norms[0] < 0.5, "coarse consistency {norms:?}");
        assert!(norms[1] < norms[0] && norms[2] < norms[1], "{norms:?}");
    }
}
