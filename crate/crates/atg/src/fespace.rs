//! P1 Lagrange space with homogeneous Dirichlet boundary conditions.
//!
//! Degrees of freedom live on interior vertices only; boundary vertices carry
//! an implied value of zero. [`prolongate`] embeds a coarse function exactly
//! into the space of a bisection-refined mesh: surviving vertices keep their
//! values, each new midpoint takes the average of its source endpoints.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::geom::{self, Mat2, Vec2, IDENTITY};
use crate::mesh::{Mesh, Refinement};
use crate::quadrature::{triangle_rule, UnsupportedOrder};

#[derive(Debug, thiserror::Error)]
pub enum FeError {
    #[error("coefficient vector has length {got}, space has {want} dofs")]
    CoefficientLength { got: usize, want: usize },
    #[error("triangle id {tri} out of range (nt = {nt})")]
    TriangleOutOfRange { tri: usize, nt: usize },
    #[error("refinement hierarchy mismatch: {0}")]
    HierarchyMismatch(String),
    #[error("functions live on different spaces")]
    SpaceMismatch,
    #[error("function dump parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// P1 Lagrange space over a mesh; one dof per interior vertex, numbered in
/// vertex-index order.
#[derive(Debug)]
pub struct FeSpace {
    mesh: Arc<Mesh>,
    dof_of_vertex: Vec<Option<usize>>,
    vertex_of_dof: Vec<usize>,
}

impl FeSpace {
    pub fn new(mesh: Arc<Mesh>) -> Arc<FeSpace> {
        let mut dof_of_vertex = vec![None; mesh.n_vertices()];
        let mut vertex_of_dof = Vec::new();
        for (v, vert) in mesh.vertices().iter().enumerate() {
            if !vert.boundary {
                dof_of_vertex[v] = Some(vertex_of_dof.len());
                vertex_of_dof.push(v);
            }
        }
        Arc::new(FeSpace { mesh, dof_of_vertex, vertex_of_dof })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn n_dofs(&self) -> usize {
        self.vertex_of_dof.len()
    }

    pub fn dof_of_vertex(&self, vertex: usize) -> Option<usize> {
        self.dof_of_vertex[vertex]
    }

    pub fn vertex_of_dof(&self, dof: usize) -> usize {
        self.vertex_of_dof[dof]
    }
}

/// A function in an [`FeSpace`], stored as dof coefficients with cached
/// per-vertex values (zero on the boundary).
#[derive(Debug, Clone)]
pub struct FeFunction {
    space: Arc<FeSpace>,
    coeffs: Vec<f64>,
    vertex_values: Vec<f64>,
}

impl FeFunction {
    pub fn zero(space: &Arc<FeSpace>) -> FeFunction {
        FeFunction {
            space: Arc::clone(space),
            coeffs: vec![0.0; space.n_dofs()],
            vertex_values: vec![0.0; space.mesh().n_vertices()],
        }
    }

    pub fn from_coeffs(space: &Arc<FeSpace>, coeffs: Vec<f64>) -> Result<FeFunction, FeError> {
        if coeffs.len() != space.n_dofs() {
            return Err(FeError::CoefficientLength { got: coeffs.len(), want: space.n_dofs() });
        }
        let mut vertex_values = vec![0.0; space.mesh().n_vertices()];
        for (dof, &c) in coeffs.iter().enumerate() {
            vertex_values[space.vertex_of_dof(dof)] = c;
        }
        Ok(FeFunction { space: Arc::clone(space), coeffs, vertex_values })
    }

    /// Nodal interpolant: evaluates `f` at interior vertices (boundary values
    /// stay zero).
    pub fn interpolate(space: &Arc<FeSpace>, f: impl Fn(f64, f64) -> f64) -> FeFunction {
        let mesh = space.mesh();
        let coeffs = (0..space.n_dofs())
            .map(|d| {
                let v = &mesh.vertices()[space.vertex_of_dof(d)];
                f(v.x, v.y)
            })
            .collect();
        FeFunction::from_coeffs(space, coeffs).expect("lengths match by construction")
    }

    pub fn space(&self) -> &Arc<FeSpace> {
        &self.space
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn vertex_values(&self) -> &[f64] {
        &self.vertex_values
    }

    /// Value and (per-triangle constant) gradient at barycentric coordinates.
    pub fn eval(&self, tri: usize, bary: [f64; 3]) -> Result<(f64, Vec2), FeError> {
        let mesh = self.space.mesh();
        if tri >= mesh.n_triangles() {
            return Err(FeError::TriangleOutOfRange { tri, nt: mesh.n_triangles() });
        }
        Ok((self.value_at(tri, bary), self.gradient(tri)))
    }

    pub fn value_at(&self, tri: usize, bary: [f64; 3]) -> f64 {
        let v = self.space.mesh().triangles()[tri].v;
        bary[0] * self.vertex_values[v[0]]
            + bary[1] * self.vertex_values[v[1]]
            + bary[2] * self.vertex_values[v[2]]
    }

    pub fn gradient(&self, tri: usize) -> Vec2 {
        let mesh = self.space.mesh();
        let v = mesh.triangles()[tri].v;
        let grads = mesh.grad_lambda(tri);
        let mut g = [0.0, 0.0];
        for i in 0..3 {
            g[0] += self.vertex_values[v[i]] * grads[i][0];
            g[1] += self.vertex_values[v[i]] * grads[i][1];
        }
        g
    }

    /// `self += alpha * other` (same space required).
    pub fn axpy(&mut self, alpha: f64, other: &FeFunction) -> Result<(), FeError> {
        if !Arc::ptr_eq(&self.space, &other.space) {
            return Err(FeError::SpaceMismatch);
        }
        for (c, o) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *c += alpha * o;
        }
        for (v, o) in self.vertex_values.iter_mut().zip(&other.vertex_values) {
            *v += alpha * o;
        }
        Ok(())
    }
}

/// Embed a coarse function into the refined space: values at surviving
/// vertices are copied, each bisection midpoint takes the average of its
/// source endpoints (exact for nested P1 spaces).
pub fn prolongate(
    coarse: &FeFunction,
    refinement: &Refinement,
    fine_space: &Arc<FeSpace>,
) -> Result<FeFunction, FeError> {
    let coarse_nv = coarse.space().mesh().n_vertices();
    let fine_nv = fine_space.mesh().n_vertices();
    if fine_nv < coarse_nv {
        return Err(FeError::HierarchyMismatch(format!(
            "fine mesh has {fine_nv} vertices, coarse has {coarse_nv}"
        )));
    }

    let mut values = vec![0.0; fine_nv];
    values[..coarse_nv].copy_from_slice(coarse.vertex_values());
    let mut assigned = vec![false; fine_nv - coarse_nv];
    for rec in &refinement.records {
        let [a, b] = rec.source_endpoints;
        let m = rec.new_vertex;
        if m < coarse_nv || m >= fine_nv {
            return Err(FeError::HierarchyMismatch(format!(
                "record midpoint vertex {m} outside the new-vertex range [{coarse_nv}, {fine_nv})"
            )));
        }
        if a >= m || b >= m {
            return Err(FeError::HierarchyMismatch(format!(
                "record sources ({a}, {b}) do not precede midpoint {m}"
            )));
        }
        values[m] = 0.5 * (values[a] + values[b]);
        assigned[m - coarse_nv] = true;
    }
    if let Some(missing) = assigned.iter().position(|&a| !a) {
        return Err(FeError::HierarchyMismatch(format!(
            "no record assigns new vertex {}",
            coarse_nv + missing
        )));
    }

    let coeffs = (0..fine_space.n_dofs())
        .map(|d| values[fine_space.vertex_of_dof(d)])
        .collect();
    FeFunction::from_coeffs(fine_space, coeffs)
}

/// L2 norm, H1 seminorm and the two energy norms of a function or error.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormReport {
    pub l2: f64,
    pub h1_semi: f64,
    pub energy1: f64,
    pub energy2: f64,
}

/// Matrix weights for the two energy norms: `principal` is the x-dependent
/// diffusion weight, `frozen` the weight evaluated along a fixed solution.
#[derive(Clone, Copy)]
pub struct NormWeights<'a> {
    pub principal: &'a dyn Fn(f64, f64) -> Mat2,
    pub frozen: &'a dyn Fn(f64, f64) -> Mat2,
}

fn identity_field(_: f64, _: f64) -> Mat2 {
    IDENTITY
}

impl NormWeights<'static> {
    pub fn identity() -> Self {
        NormWeights { principal: &identity_field, frozen: &identity_field }
    }
}

/// Norms of `f` itself.
pub fn function_norms(
    f: &FeFunction,
    weights: NormWeights,
    order: usize,
) -> Result<NormReport, UnsupportedOrder> {
    norms_impl(f, None, None, weights, order)
}

/// Norms of the error `f - u` against exact value/gradient callbacks.
pub fn error_norms(
    f: &FeFunction,
    exact_value: &dyn Fn(f64, f64) -> f64,
    exact_grad: &dyn Fn(f64, f64) -> Vec2,
    weights: NormWeights,
    order: usize,
) -> Result<NormReport, UnsupportedOrder> {
    norms_impl(f, Some(exact_value), Some(exact_grad), weights, order)
}

fn norms_impl(
    f: &FeFunction,
    exact_value: Option<&dyn Fn(f64, f64) -> f64>,
    exact_grad: Option<&dyn Fn(f64, f64) -> Vec2>,
    weights: NormWeights,
    order: usize,
) -> Result<NormReport, UnsupportedOrder> {
    let rule = triangle_rule(order)?;
    let mesh = f.space().mesh();
    let (mut l2, mut h1, mut e1, mut e2) = (0.0, 0.0, 0.0, 0.0);
    for t in 0..mesh.n_triangles() {
        let area = mesh.area(t);
        let grad = f.gradient(t);
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let xy = mesh.point_at(t, *p);
            let dv = match exact_value {
                Some(u) => f.value_at(t, *p) - u(xy[0], xy[1]),
                None => f.value_at(t, *p),
            };
            let dg = match exact_grad {
                Some(gu) => geom::sub2(grad, gu(xy[0], xy[1])),
                None => grad,
            };
            let scale = area * w;
            l2 += scale * dv * dv;
            h1 += scale * geom::dot2(dg, dg);
            e1 += scale * geom::dot2(geom::mat_vec((weights.principal)(xy[0], xy[1]), dg), dg);
            e2 += scale * geom::dot2(geom::mat_vec((weights.frozen)(xy[0], xy[1]), dg), dg);
        }
    }
    Ok(NormReport {
        l2: l2.sqrt(),
        h1_semi: h1.sqrt(),
        energy1: e1.sqrt(),
        energy2: e2.sqrt(),
    })
}

/// Serialize a function's coefficients (`atgfn 1` format).
pub fn write_function(f: &FeFunction) -> String {
    let mut out = String::new();
    out.push_str("atgfn 1\n");
    let _ = writeln!(out, "{}", f.coeffs().len());
    for c in f.coeffs() {
        let _ = writeln!(out, "{c}");
    }
    out
}

/// Parse an `atgfn 1` dump and attach it to a space.
pub fn read_function(text: &str, space: &Arc<FeSpace>) -> Result<FeFunction, FeError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (line, header) = lines
        .next()
        .ok_or_else(|| FeError::Parse { line: 1, msg: "empty input".into() })?;
    if header.trim() != "atgfn 1" {
        return Err(FeError::Parse { line: line + 1, msg: format!("bad header {header:?}") });
    }
    let (line, count) = lines
        .next()
        .ok_or_else(|| FeError::Parse { line: line + 2, msg: "missing dof count".into() })?;
    let n: usize = count
        .trim()
        .parse()
        .map_err(|_| FeError::Parse { line: line + 1, msg: format!("bad dof count {count:?}") })?;
    let mut coeffs = Vec::with_capacity(n);
    for _ in 0..n {
        let (line, l) = lines
            .next()
            .ok_or_else(|| FeError::Parse { line: 0, msg: "unexpected end of coefficients".into() })?;
        let c: f64 = l
            .trim()
            .parse()
            .map_err(|_| FeError::Parse { line: line + 1, msg: format!("bad coefficient {l:?}") })?;
        coeffs.push(c);
    }
    FeFunction::from_coeffs(space, coeffs)
}
