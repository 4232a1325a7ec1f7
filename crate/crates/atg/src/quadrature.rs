//! Quadrature rules on the reference triangle and on edges.
//!
//! Triangle rules return barycentric points and weights summing to 1; the
//! integral over a physical triangle `K` is `|K| * sum(w_q * f(x_q))`.
//! Edge rules use an arclength parameter `t in [0,1]` with weights summing
//! to 1, scaled by the edge length at use.
//!
//! Orders 1 and 2 are the classic centroid and edge-midpoint rules. Orders 4,
//! 6 and 10 are collapsed tensor Gauss rules (Duffy map of the unit square
//! onto the triangle with the map's Jacobian absorbed into the weights): an
//! `m x m` Gauss-Legendre grid is exact through polynomial degree `2m - 2`
//! on the triangle, so `m = 3, 4, 6` cover degrees 4, 6 and 10.

#[derive(Debug, thiserror::Error)]
#[error("unsupported quadrature order {0}, supported orders: 1, 2, 4, 6, 10")]
pub struct UnsupportedOrder(pub usize);

/// Quadrature rule on the reference triangle in barycentric coordinates.
#[derive(Debug, Clone)]
pub struct TriangleRule {
    pub order: usize,
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

/// Gauss rule on an edge, parameterized over `t in [0,1]`.
#[derive(Debug, Clone)]
pub struct EdgeRule {
    pub order: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Gauss-Legendre nodes/weights on [-1,1].
fn gauss_legendre(m: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    match m {
        1 => Some((vec![0.0], vec![2.0])),
        2 => {
            let a = 1.0 / 3.0f64.sqrt();
            Some((vec![-a, a], vec![1.0, 1.0]))
        }
        3 => {
            let a = (3.0f64 / 5.0).sqrt();
            Some((vec![-a, 0.0, a], vec![5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0]))
        }
        4 => {
            let (x1, x2) = (0.339981043584856264802665759103, 0.861136311594052575223946488893);
            let (w1, w2) = (0.652145154862546142626936050778, 0.347854845137453857373063942222);
            Some((vec![-x2, -x1, x1, x2], vec![w2, w1, w1, w2]))
        }
        6 => {
            let x = [
                0.238619186083196908630501721681,
                0.661209386466264513661399595020,
                0.932469514203152027812301554494,
            ];
            let w = [
                0.467913934572691047389870343990,
                0.360761573048138607569833513838,
                0.171324492379170345040296142173,
            ];
            Some((
                vec![-x[2], -x[1], -x[0], x[0], x[1], x[2]],
                vec![w[2], w[1], w[0], w[0], w[1], w[2]],
            ))
        }
        _ => None,
    }
}

/// Gauss points on [0,1] with weights summing to 1.
fn gauss_unit(m: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let (x, w) = gauss_legendre(m)?;
    Some((
        x.iter().map(|&xi| 0.5 * (xi + 1.0)).collect(),
        w.iter().map(|&wi| 0.5 * wi).collect(),
    ))
}

fn duffy_rule(order: usize, m: usize) -> TriangleRule {
    let (s, ws) = gauss_unit(m).expect("Gauss size is hardcoded");
    let mut points = Vec::with_capacity(m * m);
    let mut weights = Vec::with_capacity(m * m);
    // Map (s, t) in [0,1]^2 to (x, y) = (s, t (1 - s)); Jacobian 1 - s.
    // Normalizing by the reference area 1/2 makes the weights sum to 1.
    for i in 0..m {
        for j in 0..m {
            let x = s[i];
            let y = s[j] * (1.0 - s[i]);
            points.push([1.0 - x - y, x, y]);
            weights.push(2.0 * ws[i] * ws[j] * (1.0 - s[i]));
        }
    }
    TriangleRule { order, points, weights }
}

/// Quadrature rule on the reference triangle, exact for polynomials of the
/// given total degree.
pub fn triangle_rule(order: usize) -> Result<TriangleRule, UnsupportedOrder> {
    match order {
        1 => Ok(TriangleRule {
            order,
            points: vec![[1.0 / 3.0; 3]],
            weights: vec![1.0],
        }),
        2 => Ok(TriangleRule {
            order,
            points: vec![[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]],
            weights: vec![1.0 / 3.0; 3],
        }),
        4 => Ok(duffy_rule(4, 3)),
        6 => Ok(duffy_rule(6, 4)),
        10 => Ok(duffy_rule(10, 6)),
        other => Err(UnsupportedOrder(other)),
    }
}

/// Gauss rule on an edge, exact for polynomials of the given degree.
pub fn edge_rule(order: usize) -> Result<EdgeRule, UnsupportedOrder> {
    let m = match order {
        1 => 1,
        2 => 2,
        4 => 3,
        6 => 4,
        10 => 6,
        other => return Err(UnsupportedOrder(other)),
    };
    let (points, weights) = gauss_unit(m).expect("Gauss size is hardcoded");
    Ok(EdgeRule { order, points, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Integral of `x^a y^b` over the reference triangle `(0,0),(1,0),(0,1)`.
    fn monomial_integral(a: u32, b: u32) -> f64 {
        // a! b! / (a + b + 2)!
        let fact = |n: u32| (1..=n as u64).product::<u64>() as f64;
        fact(a) * fact(b) / fact(a + b + 2)
    }

    fn integrate_monomial(rule: &TriangleRule, a: u32, b: u32) -> f64 {
        // On the reference triangle the barycentric coordinates are
        // (1 - x - y, x, y), so x = lambda_1, y = lambda_2, and |K| = 1/2.
        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(p, w)| 0.5 * w * p[1].powi(a as i32) * p[2].powi(b as i32))
            .sum()
    }

    #[test]
    fn weights_sum_to_one_and_are_positive() {
        for order in [1, 2, 4, 6, 10] {
            let rule = triangle_rule(order).unwrap();
            let sum: f64 = rule.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-14, "order {order}: weight sum {sum}");
            assert!(rule.weights.iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn order1_integrates_constants() {
        let rule = triangle_rule(1).unwrap();
        assert!((integrate_monomial(&rule, 0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn order2_integrates_x_squared() {
        let rule = triangle_rule(2).unwrap();
        assert!((integrate_monomial(&rule, 2, 0) - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn order6_integrates_x3y2() {
        let rule = triangle_rule(6).unwrap();
        let got = integrate_monomial(&rule, 3, 2);
        assert!((got - 1.0 / 420.0).abs() < 1e-14, "got {got}");
    }

    #[test]
    fn declared_orders_are_exact() {
        for order in [1usize, 2, 4, 6, 10] {
            let rule = triangle_rule(order).unwrap();
            for a in 0..=order as u32 {
                for b in 0..=(order as u32 - a) {
                    let got = integrate_monomial(&rule, a, b);
                    let want = monomial_integral(a, b);
                    assert!(
                        (got - want).abs() <= 1e-14 * want.max(1.0),
                        "order {order}, x^{a} y^{b}: got {got}, want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn unsupported_order_rejected() {
        assert!(triangle_rule(3).is_err());
        assert!(edge_rule(7).is_err());
    }

    #[test]
    fn edge_rules_exact() {
        for order in [1usize, 2, 4, 6, 10] {
            let rule = edge_rule(order).unwrap();
            let sum: f64 = rule.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-14);
            for p in 0..=order as u32 {
                let got: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(t, w)| w * t.powi(p as i32))
                    .sum();
                let want = 1.0 / (p as f64 + 1.0);
                assert!((got - want).abs() < 1e-14, "order {order}, t^{p}");
            }
        }
    }
}
