//! Problem registry: coefficient callbacks, manufactured sources and exact
//! solution packs.
//!
//! Problems come in two shapes. A [`LinearProblem`] is
//! `-div(alpha(x) grad u) + beta(x) . grad u + gamma(x) u = f`. A
//! [`NonlinearProblem`] is `-div(flux(x, u, grad u)) + g(x, u, grad u) = f`,
//! carried in its general form together with an optional mildly nonlinear
//! view `-div(alpha(x,u) grad u) + beta(x,u) . grad u + gamma(x,u) = f`.
//! Both views of a registered problem assemble identical systems.
//!
//! All registered problems use the exact solution
//! `u = sin(pi x) sin(pi y)` on `[-1,1]^2` with homogeneous Dirichlet data;
//! sources are manufactured by substituting `u` into the strong form.

use std::f64::consts::PI;

use crate::geom::{self, Mat2, Vec2, IDENTITY};

pub type ScalarField = Box<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type VectorField = Box<dyn Fn(f64, f64) -> Vec2 + Send + Sync>;
pub type MatrixField = Box<dyn Fn(f64, f64) -> Mat2 + Send + Sync>;

/// Exact solution with first and second derivatives.
pub struct ExactSolution {
    pub value: ScalarField,
    pub gradient: VectorField,
    pub hessian: Box<dyn Fn(f64, f64) -> Mat2 + Send + Sync>,
}

/// Linear non-SPD problem
/// `-div(alpha grad u) + beta . grad u + gamma u = f`, `u = 0` on the
/// boundary.
pub struct LinearProblem {
    pub name: &'static str,
    /// `alpha(x, y)`, symmetric positive definite.
    pub diffusion: MatrixField,
    /// Columnwise divergence of `alpha` where it depends on `x` explicitly;
    /// `None` means zero (constant or piecewise-constant alpha).
    pub diffusion_div: Option<VectorField>,
    /// `beta(x, y)`.
    pub advection: VectorField,
    /// `gamma(x, y) >= 0`.
    pub reaction: ScalarField,
    pub source: ScalarField,
    pub exact: ExactSolution,
}

/// Coefficients of the mildly nonlinear form, each taking `(x, y, u)`.
pub struct MildCoefficients {
    pub diffusion: Box<dyn Fn(f64, f64, f64) -> Mat2 + Send + Sync>,
    /// `d alpha / d u`.
    pub diffusion_du: Box<dyn Fn(f64, f64, f64) -> Mat2 + Send + Sync>,
    /// Explicit-x columnwise divergence of `alpha`; `None` means zero.
    pub diffusion_div: Option<Box<dyn Fn(f64, f64, f64) -> Vec2 + Send + Sync>>,
    pub advection: Box<dyn Fn(f64, f64, f64) -> Vec2 + Send + Sync>,
    pub advection_du: Box<dyn Fn(f64, f64, f64) -> Vec2 + Send + Sync>,
    pub reaction: Box<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>,
    pub reaction_du: Box<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>,
}

/// Coefficients of the general nonlinear form. Arguments are
/// `(x, y, u, grad_u)`; derivative callbacks are with respect to the value
/// slot (`_du`) and the gradient slot (`_dgrad`).
pub struct GeneralCoefficients {
    /// `f(x, u, grad u)` in the divergence term.
    pub flux: Box<dyn Fn(f64, f64, f64, Vec2) -> Vec2 + Send + Sync>,
    pub flux_du: Box<dyn Fn(f64, f64, f64, Vec2) -> Vec2 + Send + Sync>,
    pub flux_dgrad: Box<dyn Fn(f64, f64, f64, Vec2) -> Mat2 + Send + Sync>,
    /// `g(x, u, grad u)` outside the divergence.
    pub lower_order: Box<dyn Fn(f64, f64, f64, Vec2) -> f64 + Send + Sync>,
    pub lower_order_du: Box<dyn Fn(f64, f64, f64, Vec2) -> f64 + Send + Sync>,
    pub lower_order_dgrad: Box<dyn Fn(f64, f64, f64, Vec2) -> Vec2 + Send + Sync>,
}

/// A nonlinear problem: the general form plus, when the PDE is mildly
/// nonlinear, the coefficient split used by the two-grid linearization and
/// the tilde estimator.
pub struct NonlinearProblem {
    pub name: &'static str,
    pub general: GeneralCoefficients,
    pub mild: Option<MildCoefficients>,
    pub source: ScalarField,
    pub exact: ExactSolution,
}

/// Any registered problem.
pub enum Problem {
    Linear(LinearProblem),
    Nonlinear(NonlinearProblem),
}

impl Problem {
    pub fn name(&self) -> &'static str {
        match self {
            Problem::Linear(p) => p.name,
            Problem::Nonlinear(p) => p.name,
        }
    }

    pub fn exact(&self) -> &ExactSolution {
        match self {
            Problem::Linear(p) => &p.exact,
            Problem::Nonlinear(p) => &p.exact,
        }
    }

    pub fn source(&self) -> &ScalarField {
        match self {
            Problem::Linear(p) => &p.source,
            Problem::Nonlinear(p) => &p.source,
        }
    }

    /// Diffusion weight frozen along the exact solution, used for energy
    /// norms: `alpha(x)` for linear problems, `a(x, u(x), grad u(x))` for
    /// nonlinear ones.
    pub fn energy_weight(&self) -> impl Fn(f64, f64) -> Mat2 + '_ {
        move |x, y| match self {
            Problem::Linear(p) => (p.diffusion)(x, y),
            Problem::Nonlinear(p) => {
                let u = (p.exact.value)(x, y);
                let g = (p.exact.gradient)(x, y);
                (p.general.flux_dgrad)(x, y, u, g)
            }
        }
    }
}

fn sine_exact() -> ExactSolution {
    ExactSolution {
        value: Box::new(|x, y| (PI * x).sin() * (PI * y).sin()),
        gradient: Box::new(|x, y| {
            [
                PI * (PI * x).cos() * (PI * y).sin(),
                PI * (PI * x).sin() * (PI * y).cos(),
            ]
        }),
        hessian: Box::new(|x, y| {
            let ss = (PI * x).sin() * (PI * y).sin();
            let cc = (PI * x).cos() * (PI * y).cos();
            [[-PI * PI * ss, PI * PI * cc], [PI * PI * cc, -PI * PI * ss]]
        }),
    }
}

/// Semilinear test problem `-lap u + u^5 = f` with
/// `f = 2 pi^2 sin(pi x) sin(pi y) + sin^5(pi x) sin^5(pi y)`.
pub fn test1() -> NonlinearProblem {
    NonlinearProblem {
        name: "test1",
        general: GeneralCoefficients {
            flux: Box::new(|_, _, _, g| g),
            flux_du: Box::new(|_, _, _, _| [0.0, 0.0]),
            flux_dgrad: Box::new(|_, _, _, _| IDENTITY),
            lower_order: Box::new(|_, _, u, _| u.powi(5)),
            lower_order_du: Box::new(|_, _, u, _| 5.0 * u.powi(4)),
            lower_order_dgrad: Box::new(|_, _, _, _| [0.0, 0.0]),
        },
        mild: Some(MildCoefficients {
            diffusion: Box::new(|_, _, _| IDENTITY),
            diffusion_du: Box::new(|_, _, _| [[0.0; 2]; 2]),
            diffusion_div: None,
            advection: Box::new(|_, _, _| [0.0, 0.0]),
            advection_du: Box::new(|_, _, _| [0.0, 0.0]),
            reaction: Box::new(|_, _, u| u.powi(5)),
            reaction_du: Box::new(|_, _, u| 5.0 * u.powi(4)),
        }),
        source: Box::new(|x, y| {
            let s = (PI * x).sin() * (PI * y).sin();
            2.0 * PI * PI * s + s.powi(5)
        }),
        exact: sine_exact(),
    }
}

/// Mildly nonlinear test problem `-div((2 - u) grad u) = f` with
/// `f = 4 pi^2 sin(pi x) sin(pi y) + pi^2 sin^2(pi y) cos(2 pi x)
///      + pi^2 sin^2(pi x) cos(2 pi y)`.
pub fn test2() -> NonlinearProblem {
    NonlinearProblem {
        name: "test2",
        general: GeneralCoefficients {
            flux: Box::new(|_, _, u, g| geom::scale2(g, 2.0 - u)),
            flux_du: Box::new(|_, _, _, g| geom::scale2(g, -1.0)),
            flux_dgrad: Box::new(|_, _, u, _| geom::mat_scale(IDENTITY, 2.0 - u)),
            lower_order: Box::new(|_, _, _, _| 0.0),
            lower_order_du: Box::new(|_, _, _, _| 0.0),
            lower_order_dgrad: Box::new(|_, _, _, _| [0.0, 0.0]),
        },
        mild: Some(MildCoefficients {
            diffusion: Box::new(|_, _, u| geom::mat_scale(IDENTITY, 2.0 - u)),
            diffusion_du: Box::new(|_, _, _| geom::mat_scale(IDENTITY, -1.0)),
            diffusion_div: None,
            advection: Box::new(|_, _, _| [0.0, 0.0]),
            advection_du: Box::new(|_, _, _| [0.0, 0.0]),
            reaction: Box::new(|_, _, _| 0.0),
            reaction_du: Box::new(|_, _, _| 0.0),
        }),
        source: Box::new(|x, y| {
            let sx = (PI * x).sin();
            let sy = (PI * y).sin();
            4.0 * PI * PI * sx * sy
                + PI * PI * sy * sy * (2.0 * PI * x).cos()
                + PI * PI * sx * sx * (2.0 * PI * y).cos()
        }),
        exact: sine_exact(),
    }
}

/// Linear non-SPD example `-lap u + (1,1) . grad u + u = f`, with the source
/// derived from the exact solution.
pub fn linear_nonspd() -> LinearProblem {
    LinearProblem {
        name: "linear-nonspd",
        diffusion: Box::new(|_, _| IDENTITY),
        diffusion_div: None,
        advection: Box::new(|_, _| [1.0, 1.0]),
        reaction: Box::new(|_, _| 1.0),
        source: Box::new(|x, y| {
            let sx = (PI * x).sin();
            let sy = (PI * y).sin();
            let cx = (PI * x).cos();
            let cy = (PI * y).cos();
            2.0 * PI * PI * sx * sy + PI * cx * sy + PI * sx * cy + sx * sy
        }),
        exact: sine_exact(),
    }
}

pub const PROBLEM_NAMES: [&str; 3] = ["test1", "test2", "linear-nonspd"];

/// Look up a registered problem by its CLI id.
pub fn by_name(name: &str) -> Option<Problem> {
    match name {
        "test1" => Some(Problem::Nonlinear(test1())),
        "test2" => Some(Problem::Nonlinear(test2())),
        "linear-nonspd" => Some(Problem::Linear(linear_nonspd())),
        _ => None,
    }
}

/// Strong-form residual of the exact solution at `(x, y)`.
pub fn strong_residual(problem: &Problem, x: f64, y: f64) -> f64 {
    let exact = problem.exact();
    let u = (exact.value)(x, y);
    let g = (exact.gradient)(x, y);
    let h = (exact.hessian)(x, y);
    match problem {
        Problem::Linear(p) => {
            let alpha = (p.diffusion)(x, y);
            let div_alpha = p.diffusion_div.as_ref().map_or([0.0, 0.0], |d| d(x, y));
            let div_term = geom::mat_ddot(alpha, h) + geom::dot2(div_alpha, g);
            -div_term + geom::dot2((p.advection)(x, y), g) + (p.reaction)(x, y) * u
                - (p.source)(x, y)
        }
        Problem::Nonlinear(p) => {
            // div f(x, u, grad u) = b . grad u + a : D^2 u for fluxes without
            // explicit x dependence.
            let a = (p.general.flux_dgrad)(x, y, u, g);
            let b = (p.general.flux_du)(x, y, u, g);
            let div_term = geom::dot2(b, g) + geom::mat_ddot(a, h);
            -div_term + (p.general.lower_order)(x, y, u, g) - (p.source)(x, y)
        }
    }
}

/// Evaluate the strong PDE at `samples` deterministic pseudo-random interior
/// points and return the largest absolute residual.
pub fn verify_manufactured(problem: &Problem, samples: usize, seed: u64) -> f64 {
    let mut state = seed.wrapping_add(0x9e3779b97f4a7c15);
    let mut next_unit = move || {
        // splitmix64
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z = z ^ (z >> 31);
        (z >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x = -0.98 + 1.96 * next_unit();
        let y = -0.98 + 1.96 * next_unit();
        worst = worst.max(strong_residual(problem, x, y).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test1_source_value_at_center_of_quadrant() {
        let p = test1();
        let got = (p.source)(0.5, 0.5);
        assert!((got - (2.0 * PI * PI + 1.0)).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn test2_source_value_at_center_of_quadrant() {
        let p = test2();
        let got = (p.source)(0.5, 0.5);
        assert!((got - 2.0 * PI * PI).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn exact_solution_vanishes_on_boundary() {
        let p = test1();
        for t in [-1.0, -0.5, 0.0, 0.25, 1.0] {
            for (x, y) in [(t, -1.0), (t, 1.0), (-1.0, t), (1.0, t)] {
                assert!((p.exact.value)(x, y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn manufactured_residuals_vanish() {
        for name in PROBLEM_NAMES {
            let p = by_name(name).unwrap();
            let worst = verify_manufactured(&p, 100, 7);
            assert!(worst <= 1e-10, "{name}: residual {worst}");
        }
    }

    #[test]
    fn perturbed_source_is_detected() {
        let mut p = test1();
        let orig = std::mem::replace(&mut p.source, Box::new(|_, _| 0.0));
        p.source = Box::new(move |x, y| orig(x, y) + 1.0);
        let worst = verify_manufactured(&Problem::Nonlinear(p), 100, 7);
        assert!((worst - 1.0).abs() < 1e-10, "got {worst}");
    }

    #[test]
    fn test2_diffusion_stays_positive() {
        let p = test2();
        let mild = p.mild.as_ref().unwrap();
        for u in [0.0, 0.5, 1.0, -1.0] {
            let alpha = (mild.diffusion)(0.0, 0.0, u);
            assert!(alpha[0][0] >= 1.0 && alpha[0][0] <= 3.0);
        }
    }

    #[test]
    fn reaction_is_nonnegative_for_linear_problem() {
        let p = linear_nonspd();
        assert!((p.reaction)(0.3, -0.7) >= 0.0);
    }

    #[test]
    fn general_derivatives_match_finite_differences() {
        let eps = 1e-6;
        for name in ["test1", "test2"] {
            let Problem::Nonlinear(p) = by_name(name).unwrap() else { unreachable!() };
            let mut state = 12345u64;
            let mut next = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            };
            for _ in 0..100 {
                let (x, y, u) = (next(), next(), next());
                let g = [next(), next()];
                // b = d f / d u by central differences.
                let fp = (p.general.flux)(x, y, u + eps, g);
                let fm = (p.general.flux)(x, y, u - eps, g);
                let b = (p.general.flux_du)(x, y, u, g);
                for i in 0..2 {
                    let fd = (fp[i] - fm[i]) / (2.0 * eps);
                    assert!((fd - b[i]).abs() <= 1e-6 * (1.0 + b[i].abs()), "{name} b[{i}]");
                }
                // a = d f / d grad u, columnwise.
                let a = (p.general.flux_dgrad)(x, y, u, g);
                for j in 0..2 {
                    let mut gp = g;
                    let mut gm = g;
                    gp[j] += eps;
                    gm[j] -= eps;
                    let fp = (p.general.flux)(x, y, u, gp);
                    let fm = (p.general.flux)(x, y, u, gm);
                    for i in 0..2 {
                        let fd = (fp[i] - fm[i]) / (2.0 * eps);
                        assert!((fd - a[i][j]).abs() <= 1e-6 * (1.0 + a[i][j].abs()), "{name} a[{i}][{j}]");
                    }
                }
                // d = d g / d u and c = d g / d grad u.
                let gp = (p.general.lower_order)(x, y, u + eps, g);
                let gm = (p.general.lower_order)(x, y, u - eps, g);
                let d = (p.general.lower_order_du)(x, y, u, g);
                assert!(((gp - gm) / (2.0 * eps) - d).abs() <= 1e-5 * (1.0 + d.abs()), "{name} d");
                let c = (p.general.lower_order_dgrad)(x, y, u, g);
                for j in 0..2 {
                    let mut zp = g;
                    let mut zm = g;
                    zp[j] += eps;
                    zm[j] -= eps;
                    let fd = ((p.general.lower_order)(x, y, u, zp)
                        - (p.general.lower_order)(x, y, u, zm))
                        / (2.0 * eps);
                    assert!((fd - c[j]).abs() <= 1e-6 * (1.0 + c[j].abs()), "{name} c[{j}]");
                }
            }
        }
    }
}
