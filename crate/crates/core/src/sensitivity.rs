//! Adjoint state, switching function and Gâteaux derivatives of the
//! control-to-state map `m ↦ θ`.
//!
//! Every linear solve goes through the linearised operator
//! `L_m = −μΔ − (m − 2θ)`, factorised once per `(m, μ)` snapshot in
//! [`Linearization`].
//!
//! The second derivative is also available in "energy form"
//!
//! ```text
//! F''(m)[h,h] = 2μ ∫ u |∇θ'|² − 2 ∫ u V θ'²,   u = p/θ,
//! V = m − θ + μΔu/(2u) − j''(θ)/(2u)
//! ```
//!
//! With the edge-averaged weight used by
//! [`weighted_dirichlet_energy`](crate::grid::weighted_dirichlet_energy) the
//! discrete version equals `∫ j'(θ)θ'' + ∫ j''(θ)θ'²` to round-off.

use serde::Serialize;

use crate::banded::{assemble_operator, BandLu};
use crate::criterion::{check_increasing, Criterion, Preset};
use crate::error::{Error, Result};
use crate::grid::{inner, integrate, laplacian, weighted_dirichlet_energy, Field, Grid};
use crate::state::PopulationState;

/// Guard below which `θ` or `p` are not divided by.
pub const DIVISION_GUARD: f64 = 1e-12;

/// Factorised `L_m` for a solved state.
pub struct Linearization {
    grid: Grid,
    mu: f64,
    m: Field,
    theta: Field,
    lu: BandLu,
}

impl Linearization {
    pub fn new(g: &Grid, m: &Field, state: &PopulationState) -> Result<Self> {
        if m.grid() != g || state.theta.grid() != g {
            return Err(Error::GridMismatch);
        }
        let potential = Self::potential_of(m, &state.theta);
        let lu = assemble_operator(g, state.mu, potential.values()).factor()?;
        Ok(Self {
            grid: *g,
            mu: state.mu,
            m: m.clone(),
            theta: state.theta.clone(),
            lu,
        })
    }

    /// `2θ − m`, the zeroth-order coefficient of `L_m`.
    fn potential_of(m: &Field, theta: &Field) -> Field {
        theta.zip_map(m, |t, mm| 2.0 * t - mm)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn m(&self) -> &Field {
        &self.m
    }

    pub fn theta(&self) -> &Field {
        &self.theta
    }

    /// `L_m v`.
    pub fn apply(&self, v: &Field) -> Field {
        let lap = laplacian(&self.grid, v);
        let out = lap
            .values()
            .iter()
            .zip(v.values())
            .zip(self.theta.values().iter().zip(self.m.values()))
            .map(|((&l, &x), (&t, &mm))| -self.mu * l + (2.0 * t - mm) * x)
            .collect();
        Field::from_vec(self.grid, out)
    }

    /// Solves `L_m v = rhs` with one step of iterative refinement.
    pub fn solve(&self, rhs: &Field) -> Field {
        let x = Field::from_vec(self.grid, self.lu.solve(rhs.values()));
        let r = rhs.axpy(-1.0, &self.apply(&x));
        x.axpy(1.0, &Field::from_vec(self.grid, self.lu.solve(r.values())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionTag {
    TotalPopulation,
    GeneralJ,
}

#[derive(Debug, Clone)]
pub struct AdjointState {
    pub p: Field,
    pub criterion: CriterionTag,
    /// `θ p`
    pub switching: Field,
    pub residual_norm: f64,
}

/// Solves `μΔp + p(m − 2θ) = −j'(θ)` (`j' ≡ 1` when `j` is `None`).
pub fn solve_adjoint(lin: &Linearization, j: Option<&dyn Criterion>) -> Result<AdjointState> {
    let theta = lin.theta();
    let (rhs, tag) = match j {
        Some(j) if !j.is_identity() => {
            check_increasing(j, theta.values())?;
            (theta.map(|t| j.d1(t)), CriterionTag::GeneralJ)
        }
        _ => (lin.grid().constant(1.0), CriterionTag::TotalPopulation),
    };
    let p = lin.solve(&rhs);
    let min = p.min();
    if !(min > 0.0) {
        return Err(Error::PositivityViolation {
            what: "adjoint state",
            min,
        });
    }
    let residual_norm = lin.apply(&p).max_abs_diff(&rhs);
    let switching = theta.zip_map(&p, |t, q| t * q);
    Ok(AdjointState {
        p,
        criterion: tag,
        switching,
        residual_norm,
    })
}

/// Convenience wrapper: factorise and solve the adjoint in one call.
pub fn adjoint_for(
    g: &Grid,
    m: &Field,
    state: &PopulationState,
    j: Option<&dyn Criterion>,
) -> Result<(Linearization, AdjointState)> {
    let lin = Linearization::new(g, m, state)?;
    let adj = solve_adjoint(&lin, j)?;
    Ok((lin, adj))
}

/// First variation `θ'` in direction `h`: `L_m θ' = h θ`.
pub fn gateaux_theta_dot(lin: &Linearization, h: &Field) -> Field {
    lin.solve(&h.zip_map(lin.theta(), |a, t| a * t))
}

/// Second variation `θ''`: `L_m θ'' = 2hθ' − 2θ'²`.
pub fn gateaux_theta_ddot(lin: &Linearization, h: &Field, theta_dot: &Field) -> Field {
    lin.solve(&h.zip_map(theta_dot, |a, d| 2.0 * a * d - 2.0 * d * d))
}

/// Pieces of the energy form of the second derivative.
#[derive(Debug, Clone)]
pub struct EnergyForm {
    pub value: f64,
    /// `u = p/θ`
    pub u_ratio: Field,
    /// `V`
    pub potential: Field,
}

/// `u = p/θ` and the potential `V` for the given adjoint.
pub fn ratio_and_potential(
    lin: &Linearization,
    adjoint: &AdjointState,
    j: Option<&dyn Criterion>,
) -> Result<(Field, Field)> {
    let theta = lin.theta();
    let (tmin, pmin) = (theta.min(), adjoint.p.min());
    if tmin < DIVISION_GUARD || pmin < DIVISION_GUARD {
        return Err(Error::PositivityViolation {
            what: "θ or p in the energy form",
            min: tmin.min(pmin),
        });
    }
    let u = adjoint.p.zip_map(theta, |p, t| p / t);
    let lap_u = laplacian(lin.grid(), &u);
    let mu = lin.mu();
    let jj: &dyn Criterion = j.unwrap_or(&Preset::Identity);
    let v: Vec<f64> = (0..u.len())
        .map(|k| {
            let (mm, t, uk) = (lin.m().values()[k], theta.values()[k], u.values()[k]);
            mm - t + mu * lap_u.values()[k] / (2.0 * uk) - jj.d2(t) / (2.0 * uk)
        })
        .collect();
    Ok((u, Field::from_vec(*lin.grid(), v)))
}

/// `2μ∫u|∇θ'|² − 2∫uVθ'²` for the direction `h`.
pub fn second_derivative_energy_form(
    lin: &Linearization,
    adjoint: &AdjointState,
    h: &Field,
    j: Option<&dyn Criterion>,
) -> Result<EnergyForm> {
    let td = gateaux_theta_dot(lin, h);
    energy_form_for(lin, adjoint, &td, j)
}

pub(crate) fn energy_form_for(
    lin: &Linearization,
    adjoint: &AdjointState,
    theta_dot: &Field,
    j: Option<&dyn Criterion>,
) -> Result<EnergyForm> {
    let (u, v) = ratio_and_potential(lin, adjoint, j)?;
    let g = lin.grid();
    let grad_term = weighted_dirichlet_energy(g, &u, theta_dot);
    let pot = u
        .zip_map(&v, |a, b| a * b)
        .zip_map(theta_dot, |uv, d| uv * d * d);
    let value = 2.0 * lin.mu() * grad_term - 2.0 * integrate(g, &pot);
    Ok(EnergyForm {
        value,
        u_ratio: u,
        potential: v,
    })
}

/// Polarised (bilinear) energy form `B(h1, h2)`.
pub fn second_derivative_bilinear(
    lin: &Linearization,
    adjoint: &AdjointState,
    h1: &Field,
    h2: &Field,
    j: Option<&dyn Criterion>,
) -> Result<f64> {
    let plus = h1.axpy(1.0, h2);
    let minus = h1.axpy(-1.0, h2);
    let qp = second_derivative_energy_form(lin, adjoint, &plus, j)?.value;
    let qm = second_derivative_energy_form(lin, adjoint, &minus, j)?.value;
    Ok(0.25 * (qp - qm))
}

#[derive(Debug, Clone)]
pub struct DerivativeReport {
    pub direction: Field,
    /// `∫ j'(θ) θ'`
    pub first_deriv: f64,
    /// `∫ p θ h`, the adjoint expression of the first derivative.
    pub first_deriv_adjoint: f64,
    /// `∫ j'(θ) θ'' + ∫ j''(θ) θ'²`
    pub second_deriv_direct: f64,
    pub second_deriv_energy_form: f64,
    pub theta_dot: Field,
    pub theta_ddot: Field,
    pub u_ratio: Field,
    pub potential: Field,
}

impl DerivativeReport {
    pub fn duality_gap(&self) -> f64 {
        (self.first_deriv - self.first_deriv_adjoint).abs() / self.first_deriv.abs().max(1e-300)
    }

    pub fn energy_form_gap(&self) -> f64 {
        (self.second_deriv_direct - self.second_deriv_energy_form).abs()
            / self.second_deriv_direct.abs().max(1e-300)
    }
}

pub fn derivative_report(
    lin: &Linearization,
    adjoint: &AdjointState,
    h: &Field,
    j: Option<&dyn Criterion>,
) -> Result<DerivativeReport> {
    let g = lin.grid();
    let jj: &dyn Criterion = j.unwrap_or(&Preset::Identity);
    let theta = lin.theta();
    let td = gateaux_theta_dot(lin, h);
    let tdd = gateaux_theta_ddot(lin, h, &td);
    let d1 = theta.map(|t| jj.d1(t));
    let d2 = theta.map(|t| jj.d2(t));
    let first_deriv = inner(g, &d1, &td);
    let first_deriv_adjoint = inner(g, &adjoint.switching, h);
    let second_deriv_direct = inner(g, &d1, &tdd) + inner(g, &d2, &td.map(|v| v * v));
    let form = energy_form_for(lin, adjoint, &td, j)?;
    Ok(DerivativeReport {
        direction: h.clone(),
        first_deriv,
        first_deriv_adjoint,
        second_deriv_direct,
        second_deriv_energy_form: form.value,
        theta_dot: td,
        theta_ddot: tdd,
        u_ratio: form.u_ratio,
        potential: form.potential,
    })
}

/// First-order optimality diagnostics of a candidate maximiser.
#[derive(Debug, Clone, Serialize)]
pub struct KktReport {
    /// Estimated level `c` of the switching function.
    pub c: f64,
    pub inactive_nodes: usize,
    /// `max |θp − c|` over the inactive set (0 when empty).
    pub max_deviation: f64,
    /// `max θp` over `{m = 0}`.
    pub c_lower: f64,
    /// `min θp` over `{m = 1}`.
    pub c_upper: f64,
    /// Absolute slack used in the sign test.
    pub tolerance: f64,
    pub sign_consistent: bool,
    /// Empty inactive set: `c` is only bracketed by the level sets.
    pub bang_bang: bool,
}

pub fn first_order_kkt_report(m: &Field, adjoint: &AdjointState, tol_active: f64) -> KktReport {
    let s = adjoint.switching.values();
    let mv = m.values();
    let tolerance = 1e-4 * adjoint.switching.max_abs();
    let mut inactive: Vec<f64> = Vec::new();
    let mut c_lower = f64::NEG_INFINITY;
    let mut c_upper = f64::INFINITY;
    for (&mm, &sw) in mv.iter().zip(s) {
        if mm <= tol_active {
            c_lower = c_lower.max(sw);
        } else if mm >= 1.0 - tol_active {
            c_upper = c_upper.min(sw);
        } else {
            inactive.push(sw);
        }
    }
    let bang_bang = inactive.is_empty();
    let (c, max_deviation) = if bang_bang {
        let c = match (c_lower.is_finite(), c_upper.is_finite()) {
            (true, true) => 0.5 * (c_lower + c_upper),
            (true, false) => c_lower,
            _ => c_upper,
        };
        (c, 0.0)
    } else {
        inactive.sort_by(|a, b| a.total_cmp(b));
        let k = inactive.len();
        let c = if k % 2 == 1 {
            inactive[k / 2]
        } else {
            0.5 * (inactive[k / 2 - 1] + inactive[k / 2])
        };
        let dev = inactive.iter().fold(0.0f64, |a, &v| a.max((v - c).abs()));
        (c, dev)
    };
    let sign_consistent = if bang_bang {
        c_lower <= c_upper + tolerance
    } else {
        c_lower <= c + tolerance && c_upper >= c - tolerance
    };
    KktReport {
        c,
        inactive_nodes: inactive.len(),
        max_deviation,
        c_lower,
        c_upper,
        tolerance,
        sign_consistent,
        bang_bang,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{solve_state, solve_state_field, ResourceDistribution, SolverConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(m: Field, mu: f64) -> (Grid, PopulationState, Linearization, AdjointState) {
        let g = *m.grid();
        let rd = ResourceDistribution::new(m.clone()).unwrap();
        let s = solve_state(&g, &rd, mu, &SolverConfig::default()).unwrap();
        let (lin, adj) = adjoint_for(&g, &m, &s, None).unwrap();
        (g, s, lin, adj)
    }

    fn zero_mean_random(g: &Grid, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = g.sample(|_| rng.random_range(-1.0..1.0));
        let mean = integrate(g, &f);
        f.map(|v| v - mean)
    }

    #[test]
    fn constant_resource_adjoint() {
        let g = Grid::new(1, 65).unwrap();
        let (_, _, _, adj) = setup(g.constant(0.4), 0.1);
        assert!(adj.p.max_abs_diff(&g.constant(2.5)) < 1e-12);
        assert!(adj.switching.max_abs_diff(&g.constant(1.0)) < 1e-12);
    }

    #[test]
    fn half_indicator_adjoint_is_positive() {
        let g = Grid::new(1, 257).unwrap();
        let m = g.sample(|x| if x[0] <= 0.5 { 1.0 } else { 0.0 });
        let (_, _, _, adj) = setup(m, 0.05);
        assert!(adj.p.min() > 0.0);
        assert!(adj.residual_norm < 1e-10);
    }

    #[test]
    fn theta_dot_examples() {
        let g = Grid::new(1, 65).unwrap();
        let (_, _, lin, _) = setup(g.constant(0.4), 0.1);
        assert_eq!(gateaux_theta_dot(&lin, &g.zeros()).max_abs(), 0.0);
        // θ' = cθ/(2θ − m) = c for θ = m
        let td = gateaux_theta_dot(&lin, &g.constant(0.3));
        assert!(td.max_abs_diff(&g.constant(0.3)) < 1e-12);
        let tdd = gateaux_theta_ddot(&lin, &g.zeros(), &g.zeros());
        assert_eq!(tdd.max_abs(), 0.0);
    }

    #[test]
    fn gradient_matches_forward_differences() {
        let g = Grid::new(1, 129).unwrap();
        let m = g.sample(|x| 0.5 + 0.3 * (3.0 * x[0]).sin());
        let mu = 0.05;
        let (_, s, lin, adj) = setup(m.clone(), mu);
        let h = zero_mean_random(&g, 3);
        let rep = derivative_report(&lin, &adj, &h, None).unwrap();
        assert!(rep.duality_gap() < 1e-8);
        let cfg = SolverConfig::default();
        let errs: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&eps| {
                let sp = solve_state_field(&g, &m.axpy(eps, &h), mu, &cfg).unwrap();
                let fd = (sp.total_population - s.total_population) / eps;
                (fd - rep.first_deriv).abs() / rep.first_deriv.abs()
            })
            .collect();
        assert!(errs[1] < errs[0]);
        assert!(
            errs.iter().cloned().fold(f64::INFINITY, f64::min) < 1e-4,
            "{errs:?}"
        );
    }

    #[test]
    fn hessian_matches_central_second_difference() {
        let g = Grid::new(1, 129).unwrap();
        let m = g.sample(|x| 0.5 + 0.3 * (3.0 * x[0]).sin());
        let mu = 0.05;
        let (_, s, lin, adj) = setup(m.clone(), mu);
        let h = zero_mean_random(&g, 5);
        let rep = derivative_report(&lin, &adj, &h, None).unwrap();
        let eps = 1e-3;
        let cfg = SolverConfig::default();
        let fp = solve_state_field(&g, &m.axpy(eps, &h), mu, &cfg)
            .unwrap()
            .total_population;
        let fm = solve_state_field(&g, &m.axpy(-eps, &h), mu, &cfg)
            .unwrap()
            .total_population;
        let fd2 = (fp - 2.0 * s.total_population + fm) / (eps * eps);
        let rel = (fd2 - rep.second_deriv_direct).abs() / rep.second_deriv_direct.abs();
        assert!(rel < 1e-3, "rel={rel}");
        assert!(
            rep.energy_form_gap() < 1e-6,
            "gap={}",
            rep.energy_form_gap()
        );
    }

    #[test]
    fn energy_form_examples() {
        let g = Grid::new(1, 65).unwrap();
        let (_, _, lin, adj) = setup(g.constant(0.4), 0.1);
        let z = second_derivative_energy_form(&lin, &adj, &g.zeros(), None).unwrap();
        assert_eq!(z.value, 0.0);
        let h = zero_mean_random(&g, 11);
        let rep = derivative_report(&lin, &adj, &h, None).unwrap();
        assert!(rep.energy_form_gap() < 1e-6);
        let q1 = second_derivative_energy_form(&lin, &adj, &h, None)
            .unwrap()
            .value;
        let q2 = second_derivative_energy_form(&lin, &adj, &h.scale(2.0), None)
            .unwrap()
            .value;
        assert!((q2 - 4.0 * q1).abs() < 1e-8 * q1.abs());
    }

    #[test]
    fn general_criterion_energy_form_and_gradient() {
        let g = Grid::new(1, 129).unwrap();
        let m = g.sample(|x| 0.5 + 0.3 * (3.0 * x[0]).cos());
        let mu = 0.05;
        let rd = ResourceDistribution::new(m.clone()).unwrap();
        let cfg = SolverConfig::default();
        let s = solve_state(&g, &rd, mu, &cfg).unwrap();
        let j = Preset::Log1p;
        let (lin, adj) = adjoint_for(&g, &m, &s, Some(&j)).unwrap();
        assert_eq!(adj.criterion, CriterionTag::GeneralJ);
        let h = zero_mean_random(&g, 17);
        let rep = derivative_report(&lin, &adj, &h, Some(&j)).unwrap();
        assert!(rep.duality_gap() < 1e-8);
        assert!(rep.energy_form_gap() < 1e-6);
        let jval = |f: &Field| {
            let st = solve_state_field(&g, f, mu, &cfg).unwrap();
            integrate(&g, &st.theta.map(|t| j.value(t)))
        };
        let eps = 1e-3;
        let fd2 = (jval(&m.axpy(eps, &h)) - 2.0 * jval(&m) + jval(&m.axpy(-eps, &h))) / (eps * eps);
        assert!((fd2 - rep.second_deriv_direct).abs() < 1e-3 * rep.second_deriv_direct.abs());
    }

    #[test]
    fn polarisation_is_symmetric() {
        let g = Grid::new(1, 129).unwrap();
        let m = g.sample(|x| 0.4 + 0.3 * (5.0 * x[0]).sin());
        let (_, _, lin, adj) = setup(m, 0.02);
        let h1 = zero_mean_random(&g, 1);
        let h2 = zero_mean_random(&g, 2);
        let b12 = second_derivative_bilinear(&lin, &adj, &h1, &h2, None).unwrap();
        let b21 = second_derivative_bilinear(&lin, &adj, &h2, &h1, None).unwrap();
        assert!((b12 - b21).abs() <= 1e-8 * b12.abs().max(1e-12));
    }

    #[test]
    fn kkt_report_cases() {
        let g = Grid::new(1, 65).unwrap();
        let (_, _, _, adj) = setup(g.constant(0.4), 0.1);
        let rep = first_order_kkt_report(&g.constant(0.4), &adj, 1e-3);
        assert_eq!(rep.inactive_nodes, 65);
        assert!(rep.max_deviation < 1e-12);
        assert!((rep.c - 1.0).abs() < 1e-12);

        // a resource field placed against the gradient violates the sign test
        let m = g.sample(|x| {
            if x[0] < 0.3 {
                0.0
            } else if x[0] > 0.7 {
                1.0
            } else {
                0.5
            }
        });
        let (_, _, _, adj) = setup(m.clone(), 0.05);
        let sw = &adj.switching;
        // swap: resources where the switching function is smallest
        let s_med = {
            let mut v = sw.values().to_vec();
            v.sort_by(|a, b| a.total_cmp(b));
            v[v.len() / 2]
        };
        let bad = sw.map(|v| if v < s_med { 1.0 } else { 0.0 });
        let rep = first_order_kkt_report(&bad, &adj, 1e-3);
        assert!(rep.bang_bang);
        assert!(!rep.sign_consistent);
    }
}
