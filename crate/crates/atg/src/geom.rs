//! Small fixed-size vector/matrix helpers shared by mesh, assembly and
//! estimator code. Everything here is plain `f64` arithmetic on arrays.

/// A point or vector in the plane.
pub type Vec2 = [f64; 2];

/// A 2x2 matrix stored row-major: `m[i][j]` is row `i`, column `j`.
pub type Mat2 = [[f64; 2]; 2];

/// The 2x2 identity matrix.
pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

pub fn dot2(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn sub2(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn scale2(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

pub fn norm2(a: Vec2) -> f64 {
    dot2(a, a).sqrt()
}

/// Matrix-vector product `m * v`.
pub fn mat_vec(m: Mat2, v: Vec2) -> Vec2 {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

/// Scale every entry of `m` by `s`.
pub fn mat_scale(m: Mat2, s: f64) -> Mat2 {
    [[m[0][0] * s, m[0][1] * s], [m[1][0] * s, m[1][1] * s]]
}

/// Frobenius inner product `a : b` of two 2x2 matrices.
pub fn mat_ddot(a: Mat2, b: Mat2) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
}

/// Rotate a vector by -90 degrees: `(x, y) -> (y, -x)`.
///
/// For a CCW triangle with vertices `p0, p1, p2` the barycentric gradient is
/// `grad lambda_i = perp(p_{i+1} - p_{i+2}) / (2 A)`.
pub fn perp(v: Vec2) -> Vec2 {
    [v[1], -v[0]]
}

/// Twice the signed area of the triangle `(a, b, c)`; positive for CCW order.
pub fn signed_area_x2(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Midpoint of the segment `ab`.
pub fn midpoint(a: Vec2, b: Vec2) -> Vec2 {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_area_orientation() {
        let a = [0.0, 0.0];
        let b = [1.0, 0.0];
        let c = [0.0, 1.0];
        assert_eq!(signed_area_x2(a, b, c), 1.0);
        assert_eq!(signed_area_x2(a, c, b), -1.0);
    }

    #[test]
    fn perp_is_orthogonal() {
        let v = [3.0, -2.0];
        assert_eq!(dot2(v, perp(v)), 0.0);
    }
}
