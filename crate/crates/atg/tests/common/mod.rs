//! Shared helpers for the integration tests: an independent composite
//! quadrature oracle (tabulated 6-point rule on recursively subdivided
//! triangles, distinct from the library's collapsed tensor rules) and small
//! run utilities.

use atg::geom::Vec2;

/// Degree-4 exact 6-point rule, barycentric points and weights (sum 1).
const POINTS: [[f64; 3]; 6] = [
    [0.108103018168070, 0.445948490915965, 0.445948490915965],
    [0.445948490915965, 0.108103018168070, 0.445948490915965],
    [0.445948490915965, 0.445948490915965, 0.108103018168070],
    [0.816847572980459, 0.091576213509771, 0.091576213509771],
    [0.091576213509771, 0.816847572980459, 0.091576213509771],
    [0.091576213509771, 0.091576213509771, 0.816847572980459],
];
const WEIGHTS: [f64; 6] = [
    0.223381589678011,
    0.223381589678011,
    0.223381589678011,
    0.109951743655322,
    0.109951743655322,
    0.109951743655322,
];

fn area(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs()
}

fn mid(a: Vec2, b: Vec2) -> Vec2 {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

/// Integrate `f` over the triangle `(a, b, c)` with the 6-point rule applied
/// on `4^depth` self-similar subtriangles.
pub fn composite_integral(a: Vec2, b: Vec2, c: Vec2, depth: u32, f: &dyn Fn(f64, f64) -> f64) -> f64 {
    if depth == 0 {
        let t = area(a, b, c);
        let mut sum = 0.0;
        for (p, w) in POINTS.iter().zip(WEIGHTS) {
            let x = p[0] * a[0] + p[1] * b[0] + p[2] * c[0];
            let y = p[0] * a[1] + p[1] * b[1] + p[2] * c[1];
            sum += w * f(x, y);
        }
        return t * sum;
    }
    let ab = mid(a, b);
    let bc = mid(b, c);
    let ca = mid(c, a);
    composite_integral(a, ab, ca, depth - 1, f)
        + composite_integral(ab, b, bc, depth - 1, f)
        + composite_integral(ca, bc, c, depth - 1, f)
        + composite_integral(ab, bc, ca, depth - 1, f)
}

/// Oracle integral of `f` over one mesh triangle.
pub fn oracle_element_integral(
    mesh: &atg::mesh::Mesh,
    tri: usize,
    depth: u32,
    f: &dyn Fn(f64, f64) -> f64,
) -> f64 {
    let [a, b, c] = mesh.triangle_coords(tri);
    composite_integral(a, b, c, depth, f)
}
