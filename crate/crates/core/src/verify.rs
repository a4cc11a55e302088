//! Self-check suite run by `logfrag verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::fragmentation::{
    indicator_1d, l1_energy_bound_check, modica_test_function, mollifier_lemma_check,
};
use crate::grid::{integrate, Field, Grid};
use crate::sensitivity::{adjoint_for, derivative_report};
use crate::spectral::{bang_bang_certificate, eigenpairs, principal_eigenvalue_of_state};
use crate::state::{
    efficiency_monitor_1d, energy, minimize_energy_oracle, solve_state, solve_state_field,
    ResourceDistribution, SolverConfig,
};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst measured value.
    pub value: f64,
    pub threshold: f64,
    /// Error message when the check could not run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckResult {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
            detail: None,
        }
    }

    fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value >= threshold,
            value,
            threshold,
            detail: None,
        }
    }

    fn failed(name: &str, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: false,
            value: f64::NAN,
            threshold,
            detail: Some(detail),
        }
    }
}

/// Smooth random resource field: a few random cosine modes around 1/2,
/// clipped to `[0, 1]`.
pub fn random_resource(g: &Grid, rng: &mut impl Rng, amplitude: f64) -> ResourceDistribution {
    let modes: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-amplitude..amplitude),
                rng.random_range(1.0..5.0),
                rng.random_range(1.0..5.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let pi = std::f64::consts::PI;
    let f = g.sample(|x| {
        let y = if g.dim() == 1 { 0.0 } else { x[1] };
        let s: f64 = modes
            .iter()
            .map(|&(a, kx, ky, ph)| {
                let ty = if g.dim() == 1 {
                    1.0
                } else {
                    (ky * pi * y).cos()
                };
                a * (kx * pi * x[0] + ph).cos() * ty
            })
            .sum();
        (0.5 + s).clamp(0.0, 1.0)
    });
    ResourceDistribution::new(f).expect("clipped field is admissible")
}

/// Zero-mean random direction.
pub fn random_direction(g: &Grid, rng: &mut impl Rng) -> Field {
    let f = g.sample(|_| rng.random_range(-1.0..1.0));
    let mean = integrate(g, &f);
    f.map(|v| v - mean)
}

/// Seeded probe direction with nonzero mean, so `∫θp h` stays away from zero.
pub fn probe_direction(g: &Grid, seed: u64) -> Field {
    random_direction(g, &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| v + 0.5)
}

fn guard(name: &str, threshold: f64, f: impl FnOnce() -> Result<CheckResult>) -> CheckResult {
    f().unwrap_or_else(|e| CheckResult::failed(name, threshold, e.to_string()))
}

/// Runs every invariant on desk-scale instances.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    let cfg = SolverConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    out.push(guard("constant solution exactness", 1e-12, || {
        let g = Grid::new(1, 129)?;
        let mut worst = 0.0f64;
        for m0 in [0.3, 0.4, 0.7] {
            let rd = ResourceDistribution::constant(&g, m0)?;
            let s = solve_state(&g, &rd, 0.1, &cfg)?;
            let (_, adj) = adjoint_for(&g, rd.field(), &s, None)?;
            worst = worst
                .max(s.theta.max_abs_diff(&g.constant(m0)))
                .max(adj.p.max_abs_diff(&g.constant(1.0 / m0)))
                .max((s.total_population - m0).abs());
        }
        Ok(CheckResult::at_most(
            "constant solution exactness",
            worst,
            1e-12,
        ))
    }));

    let g1 = Grid::new(1, 257).expect("valid grid");
    let g2 = Grid::new(2, 33).expect("valid grid");
    let instances: Vec<(Grid, ResourceDistribution, f64)> = [g1, g1, g2, g2]
        .iter()
        .zip([1e-2, 1e-1, 1e-2, 1e-1])
        .map(|(g, mu)| (*g, random_resource(g, &mut rng, 0.1), mu))
        .collect();

    out.push(guard("energy identity E(θ) = -∫θ³/6", 1e-8, || {
        let mut worst = 0.0f64;
        for (g, rd, mu) in &instances {
            let s = solve_state(g, rd, *mu, &cfg)?;
            let e = energy(g, rd.field(), *mu, &s.theta)?;
            let cube = -integrate(g, &s.theta.map(|t| t * t * t)) / 6.0;
            worst = worst.max((e - cube).abs() / cube.abs());
        }
        Ok(CheckResult::at_most(
            "energy identity E(θ) = -∫θ³/6",
            worst,
            1e-8,
        ))
    }));

    out.push(guard("Newton vs energy descent", 1e-6, || {
        let mut worst = 0.0f64;
        for (g, rd, mu) in instances.iter().take(2) {
            let s = solve_state(g, rd, *mu, &cfg)?;
            let o = minimize_energy_oracle(g, rd, *mu)?;
            worst = worst.max(s.theta.max_abs_diff(&o));
        }
        Ok(CheckResult::at_most(
            "Newton vs energy descent",
            worst,
            1e-6,
        ))
    }));

    let mut duality = 0.0f64;
    let mut fd_grad = 0.0f64;
    let mut fd_hess = 0.0f64;
    let mut form = 0.0f64;
    let mut positivity = f64::INFINITY;
    let mut principal = 0.0f64;
    let derivative_run = (|| -> Result<()> {
        for (g, rd, mu) in &instances {
            let m = rd.field();
            let s = solve_state(g, rd, *mu, &cfg)?;
            let (lin, adj) = adjoint_for(g, m, &s, None)?;
            let dec = eigenpairs(g, m, &s, 2)?;
            positivity = positivity.min(dec.eigenvalues[0]).min(adj.p.min());
            principal = principal.max(principal_eigenvalue_of_state(g, m, &s)?.abs());
            // a nonzero mean keeps F' away from zero when θp is nearly flat
            let h = random_direction(g, &mut rng).map(|v| v + 0.5);
            let rep = derivative_report(&lin, &adj, &h, None)?;
            duality = duality.max(rep.duality_gap());
            form = form.max(rep.energy_form_gap());
            let f = |eps: f64| -> Result<f64> {
                Ok(solve_state_field(g, &m.axpy(eps, &h), *mu, &cfg)?.total_population)
            };
            let best = [1e-3, 1e-4, 1e-5]
                .iter()
                .map(|&eps| Ok(((f(eps)? - s.total_population) / eps - rep.first_deriv).abs()))
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            fd_grad = fd_grad.max(best / rep.first_deriv.abs());
            let eps = 1e-3;
            let fd2 = (f(eps)? - 2.0 * s.total_population + f(-eps)?) / (eps * eps);
            fd_hess =
                fd_hess.max((fd2 - rep.second_deriv_direct).abs() / rep.second_deriv_direct.abs());
        }
        Ok(())
    })();
    let pick = |name: &str, v: f64, t: f64| match &derivative_run {
        Ok(()) => CheckResult::at_most(name, v, t),
        Err(e) => CheckResult::failed(name, t, e.to_string()),
    };
    out.push(pick("adjoint duality", duality, 1e-8));
    out.push(pick("finite-difference gradient", fd_grad, 1e-4));
    out.push(pick("finite-difference Hessian", fd_hess, 1e-3));
    out.push(pick("second derivative energy form", form, 1e-6));
    out.push(pick(
        "principal eigenvalue of the state vanishes",
        principal,
        1e-6,
    ));
    out.push(match &derivative_run {
        Ok(()) => CheckResult {
            name: "λ1(L_m) > 0 and p > 0".into(),
            passed: positivity > 0.0,
            value: positivity,
            threshold: 0.0,
            detail: None,
        },
        Err(e) => CheckResult::failed("λ1(L_m) > 0 and p > 0", 0.0, e.to_string()),
    });

    out.push(guard("constant-m spectrum", 5e-3, || {
        let g = Grid::new(1, 513)?;
        let rd = ResourceDistribution::constant(&g, 0.4)?;
        let s = solve_state(&g, &rd, 0.1, &cfg)?;
        let dec = eigenpairs(&g, rd.field(), &s, 10)?;
        let pi2 = std::f64::consts::PI.powi(2);
        let worst = (1..=5)
            .map(|k| {
                let exact = 0.1 * pi2 * ((k - 1) as f64).powi(2) + 0.4;
                (dec.eigenvalues[k - 1] - exact).abs() / exact
            })
            .fold(0.0, f64::max);
        Ok(CheckResult::at_most("constant-m spectrum", worst, 5e-3))
    }));

    out.push(guard("high-mode ascent from m ≡ m0", 0.0, || {
        let g = Grid::new(1, 257)?;
        let rd = ResourceDistribution::constant(&g, 0.4)?;
        let rep = bang_bang_certificate(&g, &rd, 0.1, 64, seed, &cfg)?;
        Ok(match rep.outcome {
            crate::spectral::CertificateOutcome::Certified {
                ascent,
                second_derivative,
                ..
            } => CheckResult {
                name: "high-mode ascent from m ≡ m0".into(),
                passed: ascent > 0.0 && second_derivative > 0.0,
                value: ascent.min(second_derivative),
                threshold: 0.0,
                detail: None,
            },
            other => CheckResult::failed("high-mode ascent from m ≡ m0", 0.0, format!("{other:?}")),
        })
    }));

    out.push(guard("L1 step-one inequality margin", 0.0, || {
        let g = Grid::new(1, 1025)?;
        let mut worst = f64::INFINITY;
        for (iv, mu) in [(vec![(0.0, 0.5)], 1e-3), (vec![(0.25, 0.75)], 1e-2)] {
            let m = ResourceDistribution::new(indicator_1d(&g, &iv)?)?;
            worst = worst.min(l1_energy_bound_check(&g, &m, mu, &cfg)?.margin);
        }
        Ok(CheckResult::at_least(
            "L1 step-one inequality margin",
            worst,
            0.0,
        ))
    }));

    out.push(guard("Modica bounds", 1.0, || {
        let g = Grid::new(1, 2049)?;
        let mut worst = 0.0f64;
        for iv in [
            vec![(0.0, 0.5)],
            vec![(0.2, 0.4), (0.6, 0.8)],
            vec![(0.45, 0.55)],
        ] {
            for eta in [0.2, 0.1, 0.05] {
                let p = modica_test_function(&g, &iv, eta)?;
                worst = worst
                    .max(p.gradient_term / p.gradient_bound())
                    .max(p.potential_term / p.potential_bound());
            }
        }
        Ok(CheckResult::at_most("Modica bounds", worst, 1.0))
    }));

    out.push(guard("mollifier constant d0", 1.0, || {
        let g = Grid::new(1, 2049)?;
        let m = indicator_1d(&g, &[(0.25, 0.75)])?;
        let d0 = mollifier_lemma_check(&g, &m, &[0.01, 0.02, 0.04])?.d0;
        Ok(CheckResult::at_most("mollifier constant d0", d0, 1.0))
    }));

    let (ratio, _) = efficiency_monitor_1d();
    out.push(CheckResult::at_most("F/∫m over 1D solves", ratio, 3.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_resource_is_admissible_and_reproducible() {
        let g = Grid::new(2, 17).unwrap();
        let a = random_resource(&g, &mut ChaCha8Rng::seed_from_u64(3), 0.4);
        let b = random_resource(&g, &mut ChaCha8Rng::seed_from_u64(3), 0.4);
        assert_eq!(a, b);
        assert!(a.field().min() >= 0.0 && a.field().max() <= 1.0);
        let h = random_direction(&g, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(integrate(&g, &h).abs() < 1e-15);
    }

    #[test]
    fn suite_passes() {
        let results = run_suite(0);
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }
}
