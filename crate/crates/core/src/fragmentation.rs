//! Fragmentation of optimal resource sets as `μ → 0` and the energy
//! inequalities behind it: Modica-type test functions, the `L¹` distance to
//! the state, mollification, and the BV sweep over `μ`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{bv_norm, dirichlet_energy, integrate, l1_norm, mollify, tv_norm, Field, Grid};
use crate::optimizer::{optimize, OptimizerConfig};
use crate::state::{shifted_energy, solve_state, ResourceDistribution, SolverConfig};

/// Disjoint, sorted closed intervals in `[0, 1]`.
fn check_intervals(intervals: &[(f64, f64)]) -> Result<()> {
    if intervals.is_empty() {
        return Err(Error::Geometry("empty interval list".into()));
    }
    for &(a, b) in intervals {
        if !(0.0 <= a && a < b && b <= 1.0) {
            return Err(Error::Geometry(format!("invalid interval ({a}, {b})")));
        }
    }
    if intervals.windows(2).any(|w| w[1].0 <= w[0].1) {
        return Err(Error::Geometry("intervals overlap or are unsorted".into()));
    }
    Ok(())
}

/// Endpoints lying strictly inside `(0, 1)`.
fn interior_endpoints(intervals: &[(f64, f64)]) -> Vec<f64> {
    intervals
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .filter(|&x| x > 0.0 && x < 1.0)
        .collect()
}

pub fn interior_perimeter(intervals: &[(f64, f64)]) -> f64 {
    interior_endpoints(intervals).len() as f64
}

/// Perimeter of the union of intervals as a subset of the real line.
pub fn full_perimeter(intervals: &[(f64, f64)]) -> f64 {
    2.0 * intervals.len() as f64
}

/// Signed distance to the relative boundary of `A` in `(0, 1)`: negative
/// inside `A`, positive outside.
pub fn signed_distance_1d(g: &Grid, intervals: &[(f64, f64)]) -> Result<Field> {
    if g.dim() != 1 {
        return Err(Error::UnsupportedDimension(g.dim()));
    }
    check_intervals(intervals)?;
    let ends = interior_endpoints(intervals);
    if ends.is_empty() {
        return Err(Error::Geometry(
            "set has no boundary inside the domain".into(),
        ));
    }
    Ok(g.sample(|x| {
        let d = ends
            .iter()
            .fold(f64::INFINITY, |acc, &e| acc.min((x[0] - e).abs()));
        let inside = intervals.iter().any(|&(a, b)| a <= x[0] && x[0] <= b);
        if inside {
            -d
        } else {
            d
        }
    }))
}

/// Closed indicator `1_{h_A ≤ 0}` on the nodes.
pub fn indicator_1d(g: &Grid, intervals: &[(f64, f64)]) -> Result<Field> {
    Ok(signed_distance_1d(g, intervals)?.map(|d| if d <= 0.0 { 1.0 } else { 0.0 }))
}

#[derive(Debug, Clone)]
pub struct ModicaProfile {
    pub set_endpoints: Vec<(f64, f64)>,
    pub eta: f64,
    pub m: Field,
    pub u_eps: Field,
    pub signed_distance: Field,
    /// `∫|u'|²`
    pub gradient_term: f64,
    /// `∫ψ`, `ψ = u³/3 − m u²/2 + m³/6`
    pub potential_term: f64,
    pub interior_perimeter: f64,
    pub perimeter: f64,
}

impl ModicaProfile {
    pub fn gradient_bound(&self) -> f64 {
        2.0 * self.interior_perimeter / self.eta
    }

    pub fn potential_bound(&self) -> f64 {
        2.0 * self.eta * self.interior_perimeter
    }

    pub fn bounds_hold(&self) -> bool {
        self.gradient_term <= self.gradient_bound() && self.potential_term <= self.potential_bound()
    }
}

/// Ramp `1` inside `A`, `1 − h_A/η` within `η` outside, `0` beyond.
pub fn modica_test_function(g: &Grid, intervals: &[(f64, f64)], eta: f64) -> Result<ModicaProfile> {
    if !(eta > 0.0 && eta < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "eta must lie in (0, 0.5), got {eta}"
        )));
    }
    let sd = signed_distance_1d(g, intervals)?;
    let m = sd.map(|d| if d <= 0.0 { 1.0 } else { 0.0 });
    let u = sd.map(|t| {
        if t < 0.0 {
            1.0
        } else if t >= eta {
            0.0
        } else {
            1.0 - t / eta
        }
    });
    let psi = u.zip_map(&m, |a, b| {
        a.powi(3) / 3.0 - 0.5 * b * a * a + b.powi(3) / 6.0
    });
    Ok(ModicaProfile {
        set_endpoints: intervals.to_vec(),
        eta,
        gradient_term: dirichlet_energy(g, &u),
        potential_term: integrate(g, &psi),
        interior_perimeter: interior_perimeter(intervals),
        perimeter: full_perimeter(intervals),
        m,
        u_eps: u,
        signed_distance: sd,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ModicaEnergyReport {
    pub mu: f64,
    pub eta: f64,
    /// `Ẽ(θ)`
    pub state_energy: f64,
    /// `Ẽ(u_ε)`
    pub test_energy: f64,
    /// `Ẽ(u_ε) / (√μ Per_int)`
    pub measured_c1: f64,
    /// `Ẽ(θ) / √μ`
    pub scaled_state_energy: f64,
    pub minimality_holds: bool,
    pub under_resolved: bool,
}

/// Compares `Ẽ(θ)` for `m = 1_A` with the Modica test function at `η = √μ`.
pub fn modica_energy_bound_check(
    g: &Grid,
    intervals: &[(f64, f64)],
    mu: f64,
    cfg: &SolverConfig,
) -> Result<ModicaEnergyReport> {
    let eta = mu.sqrt();
    let profile = modica_test_function(g, intervals, eta)?;
    let rd = ResourceDistribution::new(profile.m.clone())?;
    let state = solve_state(g, &rd, mu, cfg)?;
    let test_energy = shifted_energy(g, &profile.m, mu, &profile.u_eps)?;
    Ok(ModicaEnergyReport {
        mu,
        eta,
        state_energy: state.shifted_energy,
        test_energy,
        measured_c1: test_energy / (eta * profile.interior_perimeter),
        scaled_state_energy: state.shifted_energy / eta,
        minimality_holds: state.shifted_energy <= test_energy,
        under_resolved: g.spacing() > 0.1 * eta,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct L1EnergyReport {
    pub mu: f64,
    /// `∫(θ/3 + m/6)(θ − m)²`
    pub weighted_gap: f64,
    /// `Ẽ(θ)`
    pub shifted_energy: f64,
    /// `Ẽ(θ) − ∫(θ/3 + m/6)(θ − m)²`
    pub margin: f64,
    pub l1_distance: f64,
    /// `‖θ − m‖₁ / weighted_gap^{1/3}`
    pub measured_m0: f64,
    /// `‖θ − m‖₁ / Ẽ(θ)^{1/3}`
    pub measured_m1: f64,
}

/// Distance between a bang-bang `m` and its state, against `Ẽ(θ)`.
pub fn l1_energy_bound_check(
    g: &Grid,
    m: &ResourceDistribution,
    mu: f64,
    cfg: &SolverConfig,
) -> Result<L1EnergyReport> {
    if !m.is_bang_bang() {
        return Err(Error::Inadmissible(
            "the L1 estimate needs m with values in {0, 1}".into(),
        ));
    }
    let state = solve_state(g, m, mu, cfg)?;
    let mf = m.field();
    let gap = state
        .theta
        .zip_map(mf, |t, mm| (t / 3.0 + mm / 6.0) * (t - mm) * (t - mm));
    let weighted_gap = integrate(g, &gap);
    let l1_distance = l1_norm(g, &state.theta.axpy(-1.0, mf));
    Ok(L1EnergyReport {
        mu,
        weighted_gap,
        shifted_energy: state.shifted_energy,
        margin: state.shifted_energy - weighted_gap,
        l1_distance,
        measured_m0: l1_distance / weighted_gap.cbrt(),
        measured_m1: l1_distance / state.shifted_energy.cbrt(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MollifierReport {
    pub eps: Vec<f64>,
    /// `‖m − m_ε‖₁ / (ε TV(m))`, zero when `TV(m) = 0`.
    pub ratios: Vec<f64>,
    pub tv: f64,
    /// Largest ratio.
    pub d0: f64,
}

pub fn mollifier_lemma_check(g: &Grid, m: &Field, eps_list: &[f64]) -> Result<MollifierReport> {
    let tv = tv_norm(g, m);
    let mut ratios = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let me = mollify(g, m, eps)?;
        let dist = l1_norm(g, &me.axpy(-1.0, m));
        ratios.push(if tv > 0.0 { dist / (eps * tv) } else { 0.0 });
    }
    Ok(MollifierReport {
        eps: eps_list.to_vec(),
        d0: ratios.iter().copied().fold(0.0, f64::max),
        ratios,
        tv,
    })
}

/// Grid resolution tied to `μ`: spacing at most `resolution·√μ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GridPolicy {
    pub dim: usize,
    /// Target spacing in units of `√μ`.
    pub resolution: f64,
    pub min_n: usize,
    pub max_n: usize,
}

impl Default for GridPolicy {
    fn default() -> Self {
        Self {
            dim: 1,
            resolution: 0.1,
            min_n: 257,
            max_n: 4097,
        }
    }
}

impl GridPolicy {
    pub fn grid_for(&self, mu: f64) -> Result<Grid> {
        let needed = (1.0 / (self.resolution * mu.sqrt())).ceil() as usize + 1;
        Grid::new(
            self.dim,
            needed.clamp(self.min_n, self.max_n.max(self.min_n)),
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRecord {
    pub mu: f64,
    pub bv_norm: f64,
    pub tv_norm: f64,
    pub objective: f64,
    pub objective_minus_m0: f64,
    pub bang_bang_fraction: f64,
    pub grid_n: usize,
    pub under_resolved: bool,
    #[serde(skip)]
    pub m_star: Field,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepFailure {
    pub mu: f64,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub m0: f64,
    pub records: Vec<SweepRecord>,
    pub failures: Vec<SweepFailure>,
    /// Least-squares slope of `log BV` against `log μ` over the smallest
    /// decade; `None` with fewer than two points there.
    pub slope: Option<f64>,
    pub slope_points: usize,
    /// `min(objective − m0)` over the three smallest `μ`.
    pub delta_hat: Option<f64>,
    /// Consecutive pairs where BV grows with `μ` by more than 10%.
    pub monotonicity_flags: Vec<(f64, f64)>,
}

/// `points` values from `max` down to `min`, equally spaced in `log μ`.
pub fn log_space_descending(max: f64, min: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![max],
        _ => (0..points)
            .map(|k| {
                let t = k as f64 / (points - 1) as f64;
                (max.ln() + t * (min.ln() - max.ln())).exp()
            })
            .collect(),
    }
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// Runs the optimizer at every `μ` and fits the BV growth rate.
pub fn mu_sweep(
    mu_list: &[f64],
    m0: f64,
    policy: &GridPolicy,
    cfg: &OptimizerConfig,
) -> Result<SweepReport> {
    if mu_list.is_empty() {
        return Err(Error::InvalidArgument("empty mu list".into()));
    }
    if mu_list.iter().any(|&mu| !(mu > 0.0 && mu.is_finite())) {
        return Err(Error::InvalidArgument("every mu must be positive".into()));
    }
    let outcomes: Vec<std::result::Result<SweepRecord, SweepFailure>> = mu_list
        .par_iter()
        .map(|&mu| {
            let run = || -> Result<SweepRecord> {
                let g = policy.grid_for(mu)?;
                let res = optimize(&g, mu, m0, cfg)?;
                let m = res.m_star.field();
                Ok(SweepRecord {
                    mu,
                    bv_norm: bv_norm(&g, m),
                    tv_norm: tv_norm(&g, m),
                    objective: res.final_objective,
                    objective_minus_m0: res.final_objective - m0,
                    bang_bang_fraction: res.bang_bang_fraction,
                    grid_n: g.n_per_axis(),
                    under_resolved: g.spacing() > policy.resolution * mu.sqrt() * (1.0 + 1e-12),
                    m_star: m.clone(),
                })
            };
            run().map_err(|e| SweepFailure {
                mu,
                message: e.to_string(),
            })
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    records.sort_by(|a, b| b.mu.total_cmp(&a.mu));

    let mu_min = records.iter().map(|r| r.mu).fold(f64::INFINITY, f64::min);
    let decade: Vec<&SweepRecord> = records
        .iter()
        .filter(|r| r.mu <= 10.0 * mu_min * (1.0 + 1e-9))
        .collect();
    let xs: Vec<f64> = decade.iter().map(|r| r.mu.ln()).collect();
    let ys: Vec<f64> = decade.iter().map(|r| r.bv_norm.ln()).collect();
    let slope = least_squares_slope(&xs, &ys);

    let delta_hat = records
        .iter()
        .rev()
        .take(3)
        .map(|r| r.objective_minus_m0)
        .reduce(f64::min);
    let monotonicity_flags = records
        .windows(2)
        .filter(|w| w[0].bv_norm > 1.1 * w[1].bv_norm)
        .map(|w| (w[0].mu, w[1].mu))
        .collect();
    Ok(SweepReport {
        m0,
        slope_points: xs.len(),
        records,
        failures,
        slope,
        delta_hat,
        monotonicity_flags,
    })
}
