//! Steady logistic-diffusive state `μΔθ + θ(m − θ) = 0` with Neumann
//! boundary conditions, its variational energy and the criterion `∫ j(θ)`.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::banded::assemble_operator;
use crate::criterion::{check_increasing, Criterion};
use crate::error::{Error, Result};
use crate::grid::{dirichlet_energy, integrate, laplacian, Field, Grid};

/// Relative tolerance on the prescribed mass.
pub const MASS_TOL: f64 = 1e-10;
/// Node values within this distance of 0 or 1 count as bang-bang.
pub const BANG_BANG_TOL: f64 = 1e-9;
/// Lower clip applied to Newton iterates.
pub const THETA_FLOOR: f64 = 1e-12;

/// An admissible resource distribution: `0 ≤ m ≤ 1`, `m ≢ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceDistribution {
    field: Field,
    mass: f64,
}

impl ResourceDistribution {
    /// Validates the box constraint and non-degeneracy; the mass is whatever
    /// `∫ m` evaluates to.
    pub fn new(field: Field) -> Result<Self> {
        if let Some(k) = field
            .values()
            .iter()
            .position(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::Inadmissible(format!(
                "m = {} at node {k} is outside [0, 1]",
                field.values()[k]
            )));
        }
        if field.values().iter().all(|&v| v == 0.0) {
            return Err(Error::Inadmissible("m vanishes identically".into()));
        }
        let mass = integrate(field.grid(), &field);
        Ok(Self { field, mass })
    }

    /// As [`new`](Self::new), additionally requiring `∫ m = m0`.
    pub fn with_mass(field: Field, m0: f64) -> Result<Self> {
        let rd = Self::new(field)?;
        if (rd.mass - m0).abs() > MASS_TOL * m0.abs().max(1e-300) {
            return Err(Error::Inadmissible(format!(
                "mass {} differs from prescribed {m0}",
                rd.mass
            )));
        }
        Ok(rd)
    }

    pub fn constant(g: &Grid, m0: f64) -> Result<Self> {
        Self::with_mass(g.constant(m0), m0)
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn grid(&self) -> &Grid {
        self.field.grid()
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn is_bang_bang(&self) -> bool {
        self.field
            .values()
            .iter()
            .all(|&v| v <= BANG_BANG_TOL || v >= 1.0 - BANG_BANG_TOL)
    }

    /// Quadrature measure of `{eps < m < 1 - eps}`.
    pub fn intermediate_measure(&self, eps: f64) -> f64 {
        let g = self.grid();
        self.field
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > eps && v < 1.0 - eps)
            .map(|(k, _)| g.weight(k))
            .sum()
    }

    pub fn intermediate_nodes(&self, eps: f64) -> Vec<usize> {
        self.field
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > eps && v < 1.0 - eps)
            .map(|(k, _)| k)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Max-norm residual target.
    pub tol: f64,
    pub max_newton: usize,
    pub max_linesearch: usize,
    /// Retry from an energy-descent warm start when Newton stalls.
    pub fallback_gradient_flow: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_newton: 200,
            max_linesearch: 40,
            fallback_gradient_flow: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationState {
    pub theta: Field,
    pub mu: f64,
    pub total_population: f64,
    pub energy: f64,
    pub shifted_energy: f64,
    pub newton_iters: usize,
    pub residual_norm: f64,
}

static MAX_EFFICIENCY_1D: AtomicU64 = AtomicU64::new(0);
static SOLVES_1D: AtomicU64 = AtomicU64::new(0);

fn record_efficiency(ratio: f64) {
    SOLVES_1D.fetch_add(1, Ordering::Relaxed);
    let mut cur = MAX_EFFICIENCY_1D.load(Ordering::Relaxed);
    while f64::from_bits(cur) < ratio {
        match MAX_EFFICIENCY_1D.compare_exchange_weak(
            cur,
            ratio.to_bits(),
            Ordering::Relaxed,
            Ordering::Relaxed,
        ) {
            Ok(_) => break,
            Err(actual) => cur = actual,
        }
    }
}

/// Largest `F_μ(m) / ∫ m` seen over every 1D state solve in this process, and
/// the number of such solves.
pub fn efficiency_monitor_1d() -> (f64, u64) {
    (
        f64::from_bits(MAX_EFFICIENCY_1D.load(Ordering::Relaxed)),
        SOLVES_1D.load(Ordering::Relaxed),
    )
}

/// `μΔθ + θ(m − θ)`.
pub fn state_residual(g: &Grid, m: &Field, mu: f64, theta: &Field) -> Field {
    let lap = laplacian(g, theta);
    let v: Vec<f64> = lap
        .values()
        .iter()
        .zip(theta.values())
        .zip(m.values())
        .map(|((&l, &t), &mm)| mu * l + t * (mm - t))
        .collect();
    Field::from_vec(*g, v)
}

/// `E(u) = (μ/2)∫|∇u|² − (1/2)∫ m u² + (1/3)∫ u³`, for `u ≥ 0`.
pub fn energy(g: &Grid, m: &Field, mu: f64, u: &Field) -> Result<f64> {
    if let Some(k) = u.values().iter().position(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "energy is defined for non-negative fields; u = {} at node {k}",
            u.values()[k]
        )));
    }
    Ok(energy_unchecked(g, m, mu, u))
}

fn energy_unchecked(g: &Grid, m: &Field, mu: f64, u: &Field) -> f64 {
    let pot = m.zip_map(u, |mm, t| -0.5 * mm * t * t + t * t * t / 3.0);
    0.5 * mu * dirichlet_energy(g, u) + integrate(g, &pot)
}

/// `Ẽ(u) = E(u) + (1/6)∫ m³`.
pub fn shifted_energy(g: &Grid, m: &Field, mu: f64, u: &Field) -> Result<f64> {
    Ok(energy(g, m, mu, u)? + integrate(g, &m.map(|v| v * v * v)) / 6.0)
}

/// Damped Newton for the state equation.
pub fn solve_state(
    g: &Grid,
    m: &ResourceDistribution,
    mu: f64,
    cfg: &SolverConfig,
) -> Result<PopulationState> {
    if m.grid() != g {
        return Err(Error::GridMismatch);
    }
    let m0 = m.mass();
    let theta0 = m.field().map(|v| v.max(0.1 * m0));
    let (theta, iters, residual) = solve_theta(g, m.field(), mu, cfg, theta0)?;
    let state = finish_state(g, m.field(), mu, theta, iters, residual)?;
    if g.dim() == 1 {
        record_efficiency(state.total_population / m0);
    }
    Ok(state)
}

/// State solve for an arbitrary non-negative, non-zero `m` (no box or mass
/// requirement). Used for finite-difference probes that leave the admissible set.
pub fn solve_state_field(
    g: &Grid,
    m: &Field,
    mu: f64,
    cfg: &SolverConfig,
) -> Result<PopulationState> {
    if m.grid() != g {
        return Err(Error::GridMismatch);
    }
    if m.min() < 0.0 || m.max() <= 0.0 {
        return Err(Error::Inadmissible(
            "m must be non-negative and not identically zero".into(),
        ));
    }
    let mean = integrate(g, m);
    let theta0 = m.map(|v| v.max(0.1 * mean));
    let (theta, iters, residual) = solve_theta(g, m, mu, cfg, theta0)?;
    finish_state(g, m, mu, theta, iters, residual)
}

fn finish_state(
    g: &Grid,
    m: &Field,
    mu: f64,
    theta: Field,
    newton_iters: usize,
    residual_norm: f64,
) -> Result<PopulationState> {
    let min = theta.min();
    if !(min > 0.0) {
        return Err(Error::PositivityViolation {
            what: "population density",
            min,
        });
    }
    let bound = m.max().max(1.0);
    if theta.max() > bound * (1.0 + 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "maximum principle violated: max θ = {} > {bound}",
            theta.max()
        )));
    }
    let e = energy_unchecked(g, m, mu, &theta);
    let se = e + integrate(g, &m.map(|v| v * v * v)) / 6.0;
    Ok(PopulationState {
        total_population: integrate(g, &theta),
        energy: e,
        shifted_energy: se,
        theta,
        mu,
        newton_iters,
        residual_norm,
    })
}

fn solve_theta(
    g: &Grid,
    m: &Field,
    mu: f64,
    cfg: &SolverConfig,
    theta0: Field,
) -> Result<(Field, usize, f64)> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "diffusivity must be positive, got {mu}"
        )));
    }
    match newton(g, m, mu, cfg, theta0.clone()) {
        Ok(ok) => Ok(ok),
        Err(Error::NonConvergence { .. }) | Err(Error::Singular(_))
            if cfg.fallback_gradient_flow =>
        {
            let opts = DescentOptions {
                grad_tol: 1e-6,
                ..DescentOptions::default()
            };
            let warm = descend_energy(g, m, mu, theta0, &opts).0;
            let warm = warm.map(|v| v.max(THETA_FLOOR));
            newton(g, m, mu, cfg, warm)
        }
        Err(e) => Err(e),
    }
}

fn newton(
    g: &Grid,
    m: &Field,
    mu: f64,
    cfg: &SolverConfig,
    mut theta: Field,
) -> Result<(Field, usize, f64)> {
    let mut r = state_residual(g, m, mu, &theta);
    let mut rn = r.max_abs();
    // residual level below which rounding in μΔθ dominates
    let h = g.spacing();
    let roundoff = 64.0 * f64::EPSILON * (4.0 * g.dim() as f64 * mu / (h * h) + 1.0);
    for it in 0..cfg.max_newton {
        if rn <= cfg.tol {
            return Ok((theta, it, rn));
        }
        let potential: Vec<f64> = theta
            .values()
            .iter()
            .zip(m.values())
            .map(|(&t, &mm)| 2.0 * t - mm)
            .collect();
        let lu = assemble_operator(g, mu, &potential).factor()?;
        let delta = lu.solve(r.values());
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=cfg.max_linesearch {
            let trial: Vec<f64> = theta
                .values()
                .iter()
                .zip(&delta)
                .map(|(&t, &d)| (t + step * d).max(THETA_FLOOR))
                .collect();
            let trial = Field::from_vec(*g, trial);
            let tr = state_residual(g, m, mu, &trial);
            let trn = tr.max_abs();
            if trn < rn && trn.is_finite() {
                theta = trial;
                r = tr;
                rn = trn;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if rn <= roundoff * theta.max_abs().max(1.0) {
                return Ok((theta, it + 1, rn));
            }
            return Err(Error::NonConvergence {
                iterations: it + 1,
                residual: rn,
            });
        }
    }
    if rn <= cfg.tol {
        return Ok((theta, cfg.max_newton, rn));
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_newton,
        residual: rn,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DescentOptions {
    pub max_iter: usize,
    /// Stop once the projected gradient is below this in max norm.
    pub grad_tol: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            max_iter: 50_000_000,
            grad_tol: 1e-11,
        }
    }
}

/// Minimises `E` over `u ≥ 0` by projected gradient descent with Nesterov
/// momentum and gradient-based restart. Independent of the Newton path: no
/// linear solves.
pub fn minimize_energy_oracle(g: &Grid, m: &ResourceDistribution, mu: f64) -> Result<Field> {
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "diffusivity must be positive, got {mu}"
        )));
    }
    let m0 = m.mass();
    let u0 = m.field().map(|v| v.max(0.1 * m0));
    Ok(descend_energy(g, m.field(), mu, u0, &DescentOptions::default()).0)
}

/// Returns the final iterate and the number of iterations used.
pub fn descend_energy(
    g: &Grid,
    m: &Field,
    mu: f64,
    u0: Field,
    opts: &DescentOptions,
) -> (Field, usize) {
    let h = g.spacing();
    let stiff = 4.0 * g.dim() as f64 * mu / (h * h);
    // gradient of E in the quadrature metric: −μΔu − m u + u²
    let grad = |u: &Field| -> Field {
        let lap = laplacian(g, u);
        let v = lap
            .values()
            .iter()
            .zip(u.values())
            .zip(m.values())
            .map(|((&l, &t), &mm)| -mu * l - mm * t + t * t)
            .collect();
        Field::from_vec(*g, v)
    };
    let mut x = u0.map(|v| v.max(0.0));
    let mut y = x.clone();
    let mut t_mom = 1.0f64;
    for it in 0..opts.max_iter {
        let gy = grad(&y);
        let umax = y.max().max(1.0);
        let tau = 1.0 / (stiff + 2.0 * umax + 1.0);
        let x_new: Vec<f64> = y
            .values()
            .iter()
            .zip(gy.values())
            .map(|(&a, &b)| (a - tau * b).max(0.0))
            .collect();
        let x_new = Field::from_vec(*g, x_new);
        // projected-gradient stationarity at the new point
        if it % 16 == 0 {
            let gx = grad(&x_new);
            let pg = x_new
                .values()
                .iter()
                .zip(gx.values())
                .fold(0.0f64, |acc, (&u, &d)| {
                    if u > 0.0 || d < 0.0 {
                        acc.max(d.abs())
                    } else {
                        acc
                    }
                });
            if pg < opts.grad_tol {
                return (x_new, it + 1);
            }
        }
        // restart when momentum points uphill
        let uphill: f64 = gy
            .values()
            .iter()
            .zip(x_new.values().iter().zip(x.values()))
            .map(|(&d, (&a, &b))| d * (a - b))
            .sum();
        let t_next = if uphill > 0.0 {
            1.0
        } else {
            0.5 * (1.0 + (1.0 + 4.0 * t_mom * t_mom).sqrt())
        };
        let beta = if uphill > 0.0 {
            0.0
        } else {
            (t_mom - 1.0) / t_next
        };
        y = x_new.axpy(beta, &x_new.axpy(-1.0, &x));
        y = y.map(|v| v.max(0.0));
        x = x_new;
        t_mom = t_next;
    }
    let n = opts.max_iter;
    (x, n)
}

/// `∫ j(θ)`, after checking `j' > 0` on the range of θ.
pub fn criterion_j(g: &Grid, state: &PopulationState, j: &dyn Criterion) -> Result<f64> {
    check_increasing(j, state.theta.values())?;
    Ok(integrate(g, &state.theta.map(|t| j.value(t))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criterion::Preset;

    fn indicator(g: &Grid, a: f64, b: f64) -> Field {
        g.sample(|x| if x[0] >= a && x[0] <= b { 1.0 } else { 0.0 })
    }

    #[test]
    fn constant_resource_gives_constant_state() {
        let g = Grid::new(1, 65).unwrap();
        for m0 in [0.4, 1.0] {
            let m = ResourceDistribution::with_mass(g.constant(m0), m0).unwrap();
            let s = solve_state(&g, &m, 0.3, &SolverConfig::default()).unwrap();
            assert_eq!(s.newton_iters, 0);
            assert!(s.theta.max_abs_diff(&g.constant(m0)) == 0.0);
            assert!((s.total_population - m0).abs() < 1e-14);
        }
    }

    #[test]
    fn half_indicator_state_is_consistent() {
        let g = Grid::new(1, 257).unwrap();
        let m = ResourceDistribution::new(indicator(&g, 0.0, 0.5)).unwrap();
        let s = solve_state(&g, &m, 0.01, &SolverConfig::default()).unwrap();
        assert!(s.residual_norm <= 1e-10);
        assert!(s.total_population > 0.5 && s.total_population < 1.5);
        assert!(s.theta.min() > 0.0 && s.theta.max() <= 1.0);
        let cubes = integrate(&g, &s.theta.map(|t| t * t * t));
        assert!((s.energy + cubes / 6.0).abs() < 1e-8 * s.energy.abs());
    }

    #[test]
    fn oracle_agrees_with_newton() {
        let g = Grid::new(1, 257).unwrap();
        let m = ResourceDistribution::new(indicator(&g, 0.0, 0.5)).unwrap();
        for mu in [0.05, 0.01] {
            let s = solve_state(&g, &m, mu, &SolverConfig::default()).unwrap();
            let u = minimize_energy_oracle(&g, &m, mu).unwrap();
            assert!(u.max_abs_diff(&s.theta) < 1e-6, "mu={mu}");
            let eu = energy(&g, m.field(), mu, &u).unwrap();
            assert!(eu <= s.energy + 1e-8);
            assert!(eu < 0.0);
        }
    }

    #[test]
    fn energy_examples() {
        let g = Grid::new(1, 33).unwrap();
        let m0 = 0.3;
        let c = g.constant(m0);
        let e = energy(&g, &c, 0.1, &c).unwrap();
        assert!((e + m0 * m0 * m0 / 6.0).abs() < 1e-15);
        assert!(shifted_energy(&g, &c, 0.1, &c).unwrap().abs() < 1e-15);
        let z = g.zeros();
        assert_eq!(energy(&g, &c, 0.1, &z).unwrap(), 0.0);
        assert!((shifted_energy(&g, &c, 0.1, &z).unwrap() - m0 * m0 * m0 / 6.0).abs() < 1e-15);
        assert!(energy(&g, &c, 0.1, &g.constant(-0.1)).is_err());
    }

    #[test]
    fn shifted_energy_of_indicator_is_nonnegative() {
        let g = Grid::new(1, 2049).unwrap();
        let m = indicator(&g, 0.2, 0.6);
        assert!(shifted_energy(&g, &m, 1e-4, &m).unwrap() >= 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = Grid::new(1, 33).unwrap();
        assert!(ResourceDistribution::new(g.zeros()).is_err());
        assert!(ResourceDistribution::new(g.constant(1.2)).is_err());
        assert!(ResourceDistribution::with_mass(g.constant(0.4), 0.5).is_err());
        let m = ResourceDistribution::constant(&g, 0.4).unwrap();
        assert!(solve_state(&g, &m, 0.0, &SolverConfig::default()).is_err());
        assert!(solve_state(&g, &m, -1.0, &SolverConfig::default()).is_err());
    }

    #[test]
    fn criterion_j_examples() {
        let g = Grid::new(1, 33).unwrap();
        let m = ResourceDistribution::constant(&g, 0.4).unwrap();
        let s = solve_state(&g, &m, 0.1, &SolverConfig::default()).unwrap();
        assert!((criterion_j(&g, &s, &Preset::Identity).unwrap() - 0.4).abs() < 1e-14);
        struct Square;
        impl Criterion for Square {
            fn value(&self, t: f64) -> f64 {
                t * t
            }
            fn d1(&self, t: f64) -> f64 {
                2.0 * t
            }
            fn d2(&self, _: f64) -> f64 {
                2.0
            }
            fn name(&self) -> String {
                "square".into()
            }
        }
        assert!((criterion_j(&g, &s, &Square).unwrap() - 0.16).abs() < 1e-14);
    }

    #[test]
    fn log1p_criterion_converges_under_refinement() {
        // Richardson extrapolation from two grids as the reference value
        let mu = 0.05;
        let value = |n: usize| {
            let g = Grid::new(1, n).unwrap();
            let m = ResourceDistribution::new(indicator(&g, 0.0, 0.5)).unwrap();
            let s = solve_state(&g, &m, mu, &SolverConfig::default()).unwrap();
            criterion_j(&g, &s, &Preset::Log1p).unwrap()
        };
        let (coarse, fine, finer) = (value(257), value(513), value(1025));
        let richardson = (4.0 * finer - fine) / 3.0;
        assert!((fine - richardson).abs() < 1e-3);
        assert!((finer - richardson).abs() < (coarse - richardson).abs());
    }
}
