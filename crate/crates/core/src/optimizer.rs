//! Maximisation of `∫ j(θ)` over `{0 ≤ m ≤ 1, ∫m = m0}`.
//!
//! Projected gradient ascent along the switching function `θp`, followed by
//! a bathtub (threshold) polish. Several starts run in parallel and the best
//! one is kept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criterion::{check_increasing, Criterion, Preset};
use crate::error::{Error, Result};
use crate::grid::{integrate, Field, Grid};
use crate::sensitivity::{adjoint_for, first_order_kkt_report, AdjointState, KktReport};
use crate::state::{solve_state, ResourceDistribution, SolverConfig};

/// Values of `m` within this distance of 0 or 1 count as saturated in the
/// bang-bang fraction.
pub const BANG_BANG_EPS: f64 = 1e-3;

const PROJECTION_MASS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub n_restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub max_polish: usize,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub solver: SolverConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            n_restarts: 5,
            seed: 0,
            max_iter: 400,
            max_polish: 50,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    pub m_star: ResourceDistribution,
    pub objective_trace: Vec<f64>,
    pub final_objective: f64,
    /// Measure of `{ε < m < 1 − ε}`, `ε = 10⁻³`.
    pub bang_bang_fraction: f64,
    pub kkt: KktReport,
    pub kkt_deviation: f64,
    pub restarts_used: usize,
    /// Final objective of every start, constant start first.
    pub restart_objectives: Vec<f64>,
    pub best_start: usize,
    pub mu: f64,
    pub m0: f64,
    pub criterion: String,
}

fn check_mass(m0: f64) -> Result<()> {
    if !(m0 > 0.0 && m0 < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "m0 must lie in (0,1), got {m0}"
        )));
    }
    Ok(())
}

fn projected_mass(g: &Grid, v: &[f64], shift: f64) -> f64 {
    v.iter()
        .enumerate()
        .map(|(k, &x)| g.weight(k) * (x - shift).clamp(0.0, 1.0))
        .sum()
}

/// Euclidean projection onto `{0 ≤ m ≤ 1, ∫m = m0}`: `clip(v − ℓ, 0, 1)`
/// with `ℓ` found by bisection.
pub fn project_onto_constraints(g: &Grid, v: &Field, m0: f64) -> Result<ResourceDistribution> {
    check_mass(m0)?;
    if v.grid() != g {
        return Err(Error::GridMismatch);
    }
    let vals = v.values();
    let in_box = vals.iter().all(|x| (0.0..=1.0).contains(x));
    if in_box && (integrate(g, v) - m0).abs() <= PROJECTION_MASS_TOL {
        return ResourceDistribution::with_mass(v.clone(), m0);
    }
    let (mut lo, mut hi) = (v.min() - 1.0, v.max());
    let mut shift = 0.5 * (lo + hi);
    for _ in 0..200 {
        shift = 0.5 * (lo + hi);
        let mass = projected_mass(g, vals, shift);
        if (mass - m0).abs() <= PROJECTION_MASS_TOL {
            break;
        }
        if mass > m0 {
            lo = shift;
        } else {
            hi = shift;
        }
    }
    // the mass is piecewise linear in the shift: finish with one exact step
    let slope: f64 = vals
        .iter()
        .enumerate()
        .filter(|(_, &x)| x - shift > 0.0 && x - shift < 1.0)
        .map(|(k, _)| g.weight(k))
        .sum();
    if slope > 0.0 {
        let candidate = shift + (projected_mass(g, vals, shift) - m0) / slope;
        if (projected_mass(g, vals, candidate) - m0).abs()
            < (projected_mass(g, vals, shift) - m0).abs()
        {
            shift = candidate;
        }
    }
    let out = Field::new(
        *g,
        vals.iter().map(|x| (x - shift).clamp(0.0, 1.0)).collect(),
    )?;
    ResourceDistribution::with_mass(out, m0)
}

/// State, adjoint and objective at one iterate.
struct Evaluation {
    adjoint: AdjointState,
    objective: f64,
}

fn evaluate(
    g: &Grid,
    m: &ResourceDistribution,
    mu: f64,
    j: &dyn Criterion,
    solver: &SolverConfig,
) -> Result<Evaluation> {
    let state = solve_state(g, m, mu, solver)?;
    let criterion = (!j.is_identity()).then_some(j);
    let (_, adjoint) = adjoint_for(g, m.field(), &state, criterion)?;
    let objective = if j.is_identity() {
        state.total_population
    } else {
        integrate(g, &state.theta.map(|t| j.value(t)))
    };
    Ok(Evaluation { adjoint, objective })
}

/// Bathtub step: `1` on the largest values of `s`, filled to mass `m0`.
/// Values within `1e-10·‖s‖∞` of the threshold form a tie shell filled in
/// node order; at most one node ends up fractional.
pub fn bathtub(g: &Grid, s: &Field, m0: f64) -> Result<ResourceDistribution> {
    check_mass(m0)?;
    let sv = s.values();
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut cut = order.len();
    for (pos, &k) in order.iter().enumerate() {
        if cum + g.weight(k) > m0 {
            cut = pos;
            break;
        }
        cum += g.weight(k);
    }
    let level = sv[order[cut.min(order.len() - 1)]];
    let tol = 1e-10 * s.max_abs();
    let mut m = vec![0.0; sv.len()];
    let mut shell = Vec::new();
    let mut filled = 0.0;
    for &k in &order {
        if sv[k] > level + tol {
            m[k] = 1.0;
            filled += g.weight(k);
        } else if sv[k] >= level - tol {
            shell.push(k);
        }
    }
    shell.sort_unstable();
    for k in shell {
        let room = m0 - filled;
        if room <= 0.0 {
            break;
        }
        let wk = g.weight(k);
        let v = (room / wk).min(1.0);
        m[k] = v;
        filled += v * wk;
    }
    ResourceDistribution::with_mass(Field::new(*g, m)?, m0)
}

/// Outcome of the bathtub iteration.
#[derive(Debug, Clone)]
pub struct ThresholdOutcome {
    pub m: ResourceDistribution,
    pub objective: f64,
    pub iterations: usize,
    pub cycle_detected: bool,
    pub trace: Vec<f64>,
}

/// Iterates `m ← bathtub(θp)` until a fixed point, a period-2 cycle or
/// `max_iter`; returns the best iterate by objective.
pub fn threshold_fixed_point(
    g: &Grid,
    m_init: &ResourceDistribution,
    mu: f64,
    m0: f64,
    max_iter: usize,
) -> Result<ThresholdOutcome> {
    threshold_with(
        g,
        m_init,
        mu,
        m0,
        max_iter,
        &Preset::Identity,
        &SolverConfig::default(),
        false,
    )
}

#[allow(clippy::too_many_arguments)]
fn threshold_with(
    g: &Grid,
    m_init: &ResourceDistribution,
    mu: f64,
    m0: f64,
    max_iter: usize,
    j: &dyn Criterion,
    solver: &SolverConfig,
    monotone: bool,
) -> Result<ThresholdOutcome> {
    let mut cur = m_init.clone();
    let mut ev = evaluate(g, &cur, mu, j, solver)?;
    let mut best = (cur.clone(), ev.objective);
    let mut prev: Option<ResourceDistribution> = None;
    let mut trace = vec![ev.objective];
    let mut cycle_detected = false;
    let mut iterations = 0;
    for _ in 0..max_iter {
        let next = bathtub(g, &ev.adjoint.switching, m0)?;
        iterations += 1;
        if next == cur {
            break;
        }
        if prev.as_ref() == Some(&next) {
            cycle_detected = true;
            break;
        }
        let next_ev = match evaluate(g, &next, mu, j, solver) {
            Ok(e) => e,
            Err(_) => break,
        };
        if monotone && next_ev.objective <= ev.objective {
            break;
        }
        trace.push(next_ev.objective);
        if next_ev.objective > best.1 {
            best = (next.clone(), next_ev.objective);
        }
        prev = Some(std::mem::replace(&mut cur, next));
        ev = next_ev;
    }
    Ok(ThresholdOutcome {
        m: best.0,
        objective: best.1,
        iterations,
        cycle_detected,
        trace,
    })
}

/// Projected gradient ascent from one start, then bathtub polish.
fn ascend(
    g: &Grid,
    start: ResourceDistribution,
    mu: f64,
    m0: f64,
    j: &dyn Criterion,
    cfg: &OptimizerConfig,
) -> Result<(ResourceDistribution, Vec<f64>)> {
    let mut m = start;
    let mut ev = evaluate(g, &m, mu, j, &cfg.solver)?;
    let mut trace = vec![ev.objective];
    let mut tau = 1.0 / ev.adjoint.switching.max_abs();
    let mut stalls = 0;
    for _ in 0..cfg.max_iter {
        let s = &ev.adjoint.switching;
        let smax = s.max_abs();
        let mut accepted = None;
        let mut t = tau;
        for _ in 0..cfg.max_backtracks {
            let trial = match project_onto_constraints(g, &m.field().axpy(t, s), m0) {
                Ok(t) => t,
                Err(_) => break,
            };
            let step = trial.field().axpy(-1.0, m.field());
            let predicted = integrate(g, &step.zip_map(s, |d, sw| d * sw));
            if step.max_abs() == 0.0 {
                break;
            }
            if let Ok(tev) = evaluate(g, &trial, mu, j, &cfg.solver) {
                if tev.objective >= ev.objective + cfg.armijo * predicted {
                    accepted = Some((trial, tev, step.max_abs()));
                    break;
                }
            }
            t *= cfg.backtrack;
        }
        let Some((trial, tev, moved)) = accepted else {
            break;
        };
        let gain = tev.objective - ev.objective;
        m = trial;
        ev = tev;
        trace.push(ev.objective);
        // accepted steps allow the next trial step to double
        tau = (2.0 * t).min(1e8 / smax);
        if moved < 1e-12 || gain <= 1e-15 * ev.objective.abs() {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    let polished = threshold_with(g, &m, mu, m0, cfg.max_polish, j, &cfg.solver, true)?;
    if polished.objective > ev.objective {
        trace.extend(polished.trace.iter().skip(1));
        m = polished.m;
    }
    Ok((m, trace))
}

/// Seeded random admissible start.
fn random_start(g: &Grid, m0: f64, seed: u64, stream: u64) -> Result<ResourceDistribution> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let v = g.sample(|_| rng.random_range(0.0..1.0));
    project_onto_constraints(g, &v, m0)
}

pub fn optimize(g: &Grid, mu: f64, m0: f64, cfg: &OptimizerConfig) -> Result<OptimizationResult> {
    optimize_general_j(g, mu, m0, &Preset::Identity, cfg)
}

pub fn optimize_general_j(
    g: &Grid,
    mu: f64,
    m0: f64,
    j: &dyn Criterion,
    cfg: &OptimizerConfig,
) -> Result<OptimizationResult> {
    check_mass(m0)?;
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "mu must be positive, got {mu}"
        )));
    }
    if !j.is_identity() {
        check_increasing(j, &[0.0, 1.0])?;
    }
    let runs: Vec<Result<(ResourceDistribution, Vec<f64>)>> = (0..=cfg.n_restarts)
        .into_par_iter()
        .map(|r| {
            let start = if r == 0 {
                ResourceDistribution::constant(g, m0)?
            } else {
                random_start(g, m0, cfg.seed, r as u64)?
            };
            ascend(g, start, mu, m0, j, cfg)
        })
        .collect();
    let mut restart_objectives = Vec::with_capacity(runs.len());
    let mut best: Option<(usize, ResourceDistribution, Vec<f64>)> = None;
    let mut first_err = None;
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok((m, trace)) => {
                let obj = *trace.last().unwrap();
                restart_objectives.push(obj);
                let better = best
                    .as_ref()
                    .is_none_or(|(_, _, bt)| obj > *bt.last().unwrap());
                if better {
                    best = Some((r, m, trace));
                }
            }
            Err(e) => {
                restart_objectives.push(f64::NAN);
                first_err.get_or_insert(e);
            }
        }
    }
    let Some((best_start, m_star, objective_trace)) = best else {
        return Err(
            first_err.unwrap_or_else(|| Error::IterationFailure("no start completed".into()))
        );
    };
    let ev = evaluate(g, &m_star, mu, j, &cfg.solver)?;
    let kkt = first_order_kkt_report(m_star.field(), &ev.adjoint, BANG_BANG_EPS);
    Ok(OptimizationResult {
        bang_bang_fraction: m_star.intermediate_measure(BANG_BANG_EPS),
        final_objective: ev.objective,
        kkt_deviation: kkt.max_deviation,
        kkt,
        m_star,
        objective_trace,
        restarts_used: cfg.n_restarts,
        restart_objectives,
        best_start,
        mu,
        m0,
        criterion: j.name(),
    })
}
