//! Subcommand bodies. Each computes first, then writes its artifacts into
//! the run directory and returns their paths relative to it.

use std::path::{Path, PathBuf};

use logfrag_core::fragmentation::{log_space_descending, mu_sweep};
use logfrag_core::io::{
    f17, write_field_csv, write_json, write_loglog_csv, write_sweep_csv, write_table,
};
use logfrag_core::optimizer::optimize_general_j;
use logfrag_core::sensitivity::{adjoint_for, derivative_report};
use logfrag_core::spectral::{bang_bang_certificate, eigenpairs};
use logfrag_core::state::{criterion_j, solve_state};
use logfrag_core::verify::{probe_direction, run_suite, CheckResult};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::config::Config;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Numerical(#[from] logfrag_core::Error),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Unsupported(String),
    #[error("every sweep point failed")]
    SweepFailed,
}

pub type Artifacts = Vec<PathBuf>;

/// Files written by a command and whether its checks passed.
#[derive(Debug)]
pub struct Completed {
    pub files: Artifacts,
    pub passed: bool,
}

struct Out<'a> {
    dir: &'a Path,
    files: Artifacts,
}

impl<'a> Out<'a> {
    fn new(dir: &'a Path) -> Self {
        Self {
            dir,
            files: Vec::new(),
        }
    }

    fn done(self) -> Completed {
        Completed {
            files: self.files,
            passed: true,
        }
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CommandError> {
        write_json(&self.dir.join(name), value)?;
        self.files.push(name.into());
        Ok(())
    }

    fn field(&mut self, name: &str, field: &logfrag_core::Field) -> Result<(), CommandError> {
        for p in write_field_csv(&self.dir.join(format!("{name}.csv")), name, field)? {
            self.files
                .push(p.strip_prefix(self.dir).unwrap_or(&p).to_path_buf());
        }
        Ok(())
    }

    fn table(
        &mut self,
        name: &str,
        headers: &[&str],
        rows: impl IntoIterator<Item = Vec<String>>,
    ) -> Result<(), CommandError> {
        write_table(&self.dir.join(name), headers, rows)?;
        self.files.push(name.into());
        Ok(())
    }
}

pub fn solve(cfg: &Config, dir: &Path) -> Result<Completed, CommandError> {
    let g = &cfg.grid;
    let m = &cfg.resource;
    let state = solve_state(g, m, cfg.mu, &cfg.solver)?;
    let j = cfg.criterion.as_criterion();
    let (_, adj) = adjoint_for(
        g,
        m.field(),
        &state,
        (!cfg.criterion.is_identity()).then_some(j),
    )?;
    let lambda1 = eigenpairs(g, m.field(), &state, 1)?.eigenvalues[0];
    let summary = json!({
        "mu": cfg.mu,
        "mass": m.mass(),
        "total_population": state.total_population,
        "efficiency": state.total_population / m.mass(),
        "energy": state.energy,
        "shifted_energy": state.shifted_energy,
        "newton_iters": state.newton_iters,
        "residual_norm": state.residual_norm,
        "criterion": j.name(),
        "criterion_value": criterion_j(g, &state, j)?,
        "adjoint_min": adj.p.min(),
        "adjoint_residual": adj.residual_norm,
        "lambda1": lambda1,
    });
    println!("total_population = {}", f17(state.total_population));
    let mut out = Out::new(dir);
    out.json("state.json", &summary)?;
    out.field("m", m.field())?;
    out.field("theta", &state.theta)?;
    out.field("adjoint", &adj.p)?;
    out.field("switching", &adj.switching)?;
    Ok(out.done())
}

pub fn optimize(cfg: &Config, dir: &Path) -> Result<Completed, CommandError> {
    let g = &cfg.grid;
    let res = optimize_general_j(
        g,
        cfg.mu,
        cfg.m0,
        cfg.criterion.as_criterion(),
        &cfg.optimizer,
    )?;
    let summary = json!({
        "mu": res.mu,
        "m0": res.m0,
        "criterion": res.criterion,
        "final_objective": res.final_objective,
        "bang_bang_fraction": res.bang_bang_fraction,
        "kkt": res.kkt,
        "kkt_deviation": res.kkt_deviation,
        "restarts_used": res.restarts_used,
        "restart_objectives": res.restart_objectives,
        "best_start": res.best_start,
        "seed": cfg.optimizer.seed,
        "config": cfg.echo(),
    });
    println!(
        "objective = {}  bang_bang_fraction = {}",
        f17(res.final_objective),
        f17(res.bang_bang_fraction)
    );
    let mut out = Out::new(dir);
    out.field("m_star", res.m_star.field())?;
    out.table(
        "trace.csv",
        &["iteration", "objective"],
        res.objective_trace
            .iter()
            .enumerate()
            .map(|(i, v)| vec![i.to_string(), f17(*v)]),
    )?;
    out.json("result.json", &summary)?;
    Ok(out.done())
}

pub fn sweep(cfg: &Config, dir: &Path) -> Result<Completed, CommandError> {
    if !cfg.criterion.is_identity() {
        return Err(CommandError::Unsupported(
            "criterion.j: the sweep measures total population and needs j = identity".into(),
        ));
    }
    let s = &cfg.sweep;
    let mus = log_space_descending(s.mu_max, s.mu_min, s.points);
    let report = mu_sweep(&mus, cfg.m0, &s.policy, &cfg.optimizer)?;
    if report.records.is_empty() {
        return Err(CommandError::SweepFailed);
    }
    for f in &report.failures {
        eprintln!("sweep point mu={} failed: {}", f17(f.mu), f.message);
    }
    let mut out = Out::new(dir);
    write_sweep_csv(&dir.join("sweep.csv"), &report)?;
    out.files.push("sweep.csv".into());
    write_loglog_csv(&dir.join("loglog.csv"), &report)?;
    out.files.push("loglog.csv".into());
    let fit = json!({
        "m0": report.m0,
        "slope": report.slope,
        "slope_points": report.slope_points,
        "delta_hat": report.delta_hat,
        "monotonicity_flags": report.monotonicity_flags,
        "failures": report.failures,
    });
    out.json("slope.json", &fit)?;
    std::fs::create_dir_all(dir.join("fields"))?;
    for (i, r) in report.records.iter().enumerate() {
        out.field(&format!("fields/m_star_{i:02}"), &r.m_star)?;
    }
    match report.slope {
        Some(slope) => println!("slope = {} over {} points", f17(slope), report.slope_points),
        None => println!("slope undefined (fewer than two points in the smallest decade)"),
    }
    Ok(out.done())
}

pub fn spectral(cfg: &Config, dir: &Path) -> Result<Completed, CommandError> {
    let g = &cfg.grid;
    let m = &cfg.resource;
    let state = solve_state(g, m, cfg.mu, &cfg.solver)?;
    let dec = eigenpairs(g, m.field(), &state, cfg.spectral_k)?;
    let cert = bang_bang_certificate(
        g,
        m,
        cfg.mu,
        cfg.spectral_k_max,
        cfg.optimizer.seed,
        &cfg.solver,
    )?;
    println!(
        "lambda1 = {}  certified = {}",
        f17(dec.eigenvalues[0]),
        cert.is_certified()
    );
    let mut out = Out::new(dir);
    out.table(
        "eigenvalues.csv",
        &["index", "eigenvalue", "residual"],
        dec.eigenvalues
            .iter()
            .zip(&dec.residuals)
            .enumerate()
            .map(|(k, (l, r))| vec![(k + 1).to_string(), f17(*l), f17(*r)]),
    )?;
    out.json("certificate.json", &cert)?;
    if let Some(h) = &cert.direction {
        out.field("certificate_direction", h)?;
    }
    Ok(out.done())
}

pub fn verify(cfg: &Config, dir: &Path) -> Result<Completed, CommandError> {
    let checks = run_suite(cfg.optimizer.seed);
    let g = &cfg.grid;
    let m = &cfg.resource;
    let j = (!cfg.criterion.is_identity()).then(|| cfg.criterion.as_criterion());
    let state = solve_state(g, m, cfg.mu, &cfg.solver)?;
    let (lin, adj) = adjoint_for(g, m.field(), &state, j)?;
    let h = probe_direction(g, cfg.optimizer.seed);
    let rep = derivative_report(&lin, &adj, &h, j)?;
    let derivative = json!({
        "first_deriv": rep.first_deriv,
        "first_deriv_adjoint": rep.first_deriv_adjoint,
        "duality_gap": rep.duality_gap(),
        "second_deriv_direct": rep.second_deriv_direct,
        "second_deriv_energy_form": rep.second_deriv_energy_form,
        "energy_form_gap": rep.energy_form_gap(),
    });

    print_checks(&checks);
    let mut out = Out::new(dir);
    out.json("checks.json", &checks)?;
    out.json("derivative.json", &derivative)?;
    out.field("direction", &rep.direction)?;
    out.field("theta_dot", &rep.theta_dot)?;
    out.field("theta_ddot", &rep.theta_ddot)?;
    out.field("u_ratio", &rep.u_ratio)?;
    out.field("potential", &rep.potential)?;
    Ok(Completed {
        files: out.files,
        passed: checks.iter().all(|c| c.passed),
    })
}

fn print_checks(checks: &[CheckResult]) {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        let detail = c
            .detail
            .as_deref()
            .map(|d| format!("  ({d})"))
            .unwrap_or_default();
        println!(
            "{status}  {:width$}  value {:>12.4e}  threshold {:.1e}{detail}",
            c.name, c.value, c.threshold
        );
    }
}
