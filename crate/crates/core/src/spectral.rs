//! Eigenpairs of `L_m = −μΔ − (m − 2θ)` and the two constructive
//! non-optimality tests for resource distributions that are not bang-bang.
//!
//! The discrete operator `A` is self-adjoint for the quadrature inner
//! product, so `W^{1/2} A W^{-1/2}` is symmetric. Eigenfunctions are returned
//! orthonormal for `⟨u, v⟩ = Σ w u v`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::banded::assemble_operator;
use crate::error::{Error, Result};
use crate::grid::{dirichlet_energy, inner, integrate, laplacian, Field, Grid};
use crate::sensitivity::{adjoint_for, energy_form_for, gateaux_theta_dot, Linearization};
use crate::state::{solve_state, PopulationState, ResourceDistribution, SolverConfig};

/// Residual target for every returned eigenpair.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Values of `m` within this distance of 0 or 1 count as saturated.
pub const INACTIVE_TOL: f64 = 1e-3;

pub const K_SCHEDULE: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenfunctions: Vec<Field>,
    pub residuals: Vec<f64>,
    pub operator_tag: String,
}

impl SpectralDecomposition {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// `max |⟨ψ_k, ψ_l⟩ − δ_kl|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = match self.eigenfunctions.first() {
            Some(f) => *f.grid(),
            None => return 0.0,
        };
        let mut worst = 0.0f64;
        for (k, a) in self.eigenfunctions.iter().enumerate() {
            for (l, b) in self.eigenfunctions.iter().enumerate().skip(k) {
                let target = if k == l { 1.0 } else { 0.0 };
                worst = worst.max((inner(&g, a, b) - target).abs());
            }
        }
        worst
    }
}

/// `K` smallest eigenpairs of `L_m` at a solved state.
pub fn eigenpairs(
    g: &Grid,
    m: &Field,
    state: &PopulationState,
    k: usize,
) -> Result<SpectralDecomposition> {
    if k == 0 || k > g.node_count() / 4 {
        return Err(Error::InvalidArgument(format!(
            "requested {k} eigenpairs, allowed 1..={}",
            g.node_count() / 4
        )));
    }
    let potential = state.theta.zip_map(m, |t, mm| 2.0 * t - mm);
    let mut dec = schrodinger_eigenpairs(g, state.mu, &potential, k)?;
    dec.operator_tag = format!(
        "L_m: dim={} n={} mu={:e} mass={:.6} F={:.6}",
        g.dim(),
        g.n_per_axis(),
        state.mu,
        integrate(g, m),
        state.total_population
    );
    Ok(dec)
}

/// Principal eigenvalue of `−μΔ − (m − θ)`; vanishes when `θ` solves the
/// state equation.
pub fn principal_eigenvalue_of_state(g: &Grid, m: &Field, state: &PopulationState) -> Result<f64> {
    let potential = state.theta.zip_map(m, |t, mm| t - mm);
    Ok(schrodinger_eigenpairs(g, state.mu, &potential, 1)?.eigenvalues[0])
}

/// `K` smallest eigenpairs of `−μΔ + potential`.
pub fn schrodinger_eigenpairs(
    g: &Grid,
    mu: f64,
    potential: &Field,
    k: usize,
) -> Result<SpectralDecomposition> {
    if k == 0 || k > g.node_count() {
        return Err(Error::InvalidArgument(format!(
            "cannot compute {k} eigenpairs"
        )));
    }
    let (vals, vecs) = if g.dim() == 1 {
        dense_eigenpairs(g, mu, potential, k)
    } else {
        subspace_eigenpairs(g, mu, potential, k)?
    };
    let residuals: Vec<f64> = vals
        .iter()
        .zip(&vecs)
        .map(|(&l, v)| eigen_residual(g, mu, potential, l, v))
        .collect();
    if let Some((i, r)) = residuals
        .iter()
        .enumerate()
        .find(|(_, r)| !(**r < RESIDUAL_TOL))
    {
        return Err(Error::IterationFailure(format!(
            "eigenpair {} residual {r:e} exceeds {RESIDUAL_TOL:e}",
            i + 1
        )));
    }
    Ok(SpectralDecomposition {
        eigenvalues: vals,
        eigenfunctions: vecs,
        residuals,
        operator_tag: format!(
            "-mu*Lap + V: dim={} n={} mu={mu:e}",
            g.dim(),
            g.n_per_axis()
        ),
    })
}

fn apply_operator(g: &Grid, mu: f64, potential: &Field, v: &Field) -> Field {
    let lap = laplacian(g, v);
    let out = lap
        .values()
        .iter()
        .zip(v.values())
        .zip(potential.values())
        .map(|((&l, &x), &p)| -mu * l + p * x)
        .collect();
    Field::from_vec(*g, out)
}

fn eigen_residual(g: &Grid, mu: f64, potential: &Field, lambda: f64, v: &Field) -> f64 {
    let r = apply_operator(g, mu, potential, v).axpy(-lambda, v);
    inner(g, &r, &r).sqrt()
}

/// Flips `v` so that its first significant entry is positive.
fn fix_sign(v: &mut [f64]) {
    let big = v.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-6 * big) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn dense_eigenpairs(g: &Grid, mu: f64, potential: &Field, k: usize) -> (Vec<f64>, Vec<Field>) {
    let n = g.node_count();
    let w = g.weights();
    let sq: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let a = assemble_operator(g, mu, potential.values());
    let s = DMatrix::from_fn(n, n, |i, j| {
        let aij = a.get(i, j) * sq[i] / sq[j];
        let aji = a.get(j, i) * sq[j] / sq[i];
        0.5 * (aij + aji)
    });
    let eig = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[p].total_cmp(&eig.eigenvalues[q]));
    let mut vals = Vec::with_capacity(k);
    let mut vecs = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        vals.push(eig.eigenvalues[c]);
        let mut v: Vec<f64> = (0..n).map(|i| eig.eigenvectors[(i, c)] / sq[i]).collect();
        fix_sign(&mut v);
        vecs.push(Field::from_vec(*g, v));
    }
    (vals, vecs)
}

/// W-orthonormalises the columns in place (modified Gram–Schmidt, twice).
/// Returns false if a column became numerically dependent.
fn w_orthonormalize(w: &[f64], cols: &mut [Vec<f64>]) -> bool {
    let dot =
        |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(w).map(|((x, y), z)| x * y * z).sum() };
    for _pass in 0..2 {
        for i in 0..cols.len() {
            for j in 0..i {
                let (head, tail) = cols.split_at_mut(i);
                let c = dot(&tail[0], &head[j]);
                tail[0]
                    .iter_mut()
                    .zip(&head[j])
                    .for_each(|(x, y)| *x -= c * y);
            }
            let nrm = dot(&cols[i], &cols[i]).sqrt();
            if !(nrm > 1e-300) {
                return false;
            }
            cols[i].iter_mut().for_each(|x| *x /= nrm);
        }
    }
    true
}

/// Shift-invert block subspace iteration with Rayleigh–Ritz and an adaptive
/// shift kept below the current lowest Ritz value.
fn subspace_eigenpairs(
    g: &Grid,
    mu: f64,
    potential: &Field,
    k: usize,
) -> Result<(Vec<f64>, Vec<Field>)> {
    let n_nodes = g.node_count();
    let b = (k + k / 2 + 4).min(n_nodes);
    let w = g.weights();
    let n = g.n_per_axis();

    // start from the lowest Neumann cosine modes
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    pairs.sort_by_key(|&(i, j)| (i * i + j * j, i, j));
    let pi = std::f64::consts::PI;
    let mut x: Vec<Vec<f64>> = pairs
        .iter()
        .take(b)
        .map(|&(i, j)| {
            (0..n_nodes)
                .map(|q| {
                    let c = g.coords(q);
                    (i as f64 * pi * c[0]).cos() * (j as f64 * pi * c[1]).cos()
                })
                .collect()
        })
        .collect();

    let pot_min = potential.min();
    let mut shift = pot_min - 1.0;
    let mut ritz = vec![0.0; b];
    for _iter in 0..500 {
        let shifted: Vec<f64> = potential.values().iter().map(|p| p - shift).collect();
        let lu = assemble_operator(g, mu, &shifted).factor()?;
        let mut y: Vec<Vec<f64>> = x.iter().map(|col| lu.solve(col)).collect();
        if !w_orthonormalize(&w, &mut y) {
            return Err(Error::IterationFailure("subspace collapsed".into()));
        }
        let ay: Vec<Field> = y
            .iter()
            .map(|col| apply_operator(g, mu, potential, &Field::from_vec(*g, col.clone())))
            .collect();
        let h = DMatrix::from_fn(b, b, |i, j| {
            let hij: f64 = y[i]
                .iter()
                .zip(ay[j].values())
                .zip(&w)
                .map(|((a, c), z)| a * c * z)
                .sum();
            let hji: f64 = y[j]
                .iter()
                .zip(ay[i].values())
                .zip(&w)
                .map(|((a, c), z)| a * c * z)
                .sum();
            0.5 * (hij + hji)
        });
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&p, &q| eig.eigenvalues[p].total_cmp(&eig.eigenvalues[q]));
        x = order
            .iter()
            .map(|&c| {
                let mut v = vec![0.0; n_nodes];
                for (i, yi) in y.iter().enumerate() {
                    let coef = eig.eigenvectors[(i, c)];
                    v.iter_mut().zip(yi).for_each(|(a, s)| *a += coef * s);
                }
                v
            })
            .collect();
        ritz = order.iter().map(|&c| eig.eigenvalues[c]).collect();

        let res: Vec<f64> = (0..k)
            .map(|i| {
                eigen_residual(
                    g,
                    mu,
                    potential,
                    ritz[i],
                    &Field::from_vec(*g, x[i].clone()),
                )
            })
            .collect();
        if res.iter().all(|&r| r < 0.1 * RESIDUAL_TOL) {
            let vecs = x
                .into_iter()
                .take(k)
                .map(|mut v| {
                    fix_sign(&mut v);
                    Field::from_vec(*g, v)
                })
                .collect();
            return Ok((ritz[..k].to_vec(), vecs));
        }
        let spread = (ritz[b - 1] - ritz[0]).max(1e-12);
        shift = (ritz[0] - res[0] - 0.05 * spread).max(pot_min - 1.0);
    }
    Err(Error::IterationFailure(format!(
        "subspace iteration did not converge for {k} eigenpairs (lowest Ritz value {})",
        ritz[0]
    )))
}

/// Nodes with `INACTIVE_TOL < m < 1 − INACTIVE_TOL`.
pub fn inactive_mask(m: &Field) -> Vec<bool> {
    m.values()
        .iter()
        .map(|&v| v > INACTIVE_TOL && v < 1.0 - INACTIVE_TOL)
        .collect()
}

/// Direction `h` supported on the inactive set with `∫h = 0` and
/// `Σ_inactive w θ ψ_k h = 0` for `k ≤ K`, normalised so that
/// `Σ_inactive w (hθ)² = 1`. Obtained by projecting a seeded random field
/// onto the joint kernel.
pub fn high_mode_perturbation(
    g: &Grid,
    state: &PopulationState,
    spec: &SpectralDecomposition,
    k: usize,
    inactive: &[bool],
    seed: u64,
) -> Result<Field> {
    let count = inactive.iter().filter(|&&b| b).count();
    if count <= k + 1 {
        return Err(Error::InactiveSetTooSmall {
            nodes: count,
            needed: k + 2,
        });
    }
    if spec.len() < k {
        return Err(Error::InvalidArgument(format!(
            "decomposition holds {} pairs, {k} requested",
            spec.len()
        )));
    }
    let w = g.weights();
    let theta = state.theta.values();
    let mask = |i: usize| if inactive[i] { 1.0 } else { 0.0 };
    let n = g.node_count();
    let mut constraints: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    constraints.push((0..n).map(|i| w[i] * mask(i)).collect());
    for psi in spec.eigenfunctions.iter().take(k) {
        constraints.push(
            (0..n)
                .map(|i| w[i] * theta[i] * psi.values()[i] * mask(i))
                .collect(),
        );
    }
    let ones = vec![1.0; n];
    if !w_orthonormalize(&ones, &mut constraints) {
        return Err(Error::InactiveSetTooSmall {
            nodes: count,
            needed: k + 2,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h: Vec<f64> = (0..n)
        .map(|i| {
            let r: f64 = rng.random_range(-1.0..1.0);
            r * mask(i)
        })
        .collect();
    for _pass in 0..2 {
        for c in &constraints {
            let d: f64 = h.iter().zip(c).map(|(a, b)| a * b).sum();
            h.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
    }
    let norm2: f64 = (0..n)
        .map(|i| w[i] * (h[i] * theta[i]).powi(2) * mask(i))
        .sum();
    if !(norm2 > 0.0) {
        return Err(Error::InactiveSetTooSmall {
            nodes: count,
            needed: k + 2,
        });
    }
    let s = norm2.sqrt();
    h.iter_mut().for_each(|v| *v /= s);
    Ok(Field::from_vec(*g, h))
}

/// Largest `|constraint|` among `∫h` and `Σ_inactive w θ ψ_k h`, `k ≤ K`.
pub fn constraint_residual(
    g: &Grid,
    state: &PopulationState,
    spec: &SpectralDecomposition,
    k: usize,
    inactive: &[bool],
    h: &Field,
) -> f64 {
    let w = g.weights();
    let (t, hv) = (state.theta.values(), h.values());
    let mut worst = integrate(g, h).abs();
    for psi in spec.eigenfunctions.iter().take(k) {
        let r: f64 = (0..g.node_count())
            .filter(|&i| inactive[i])
            .map(|i| w[i] * t[i] * psi.values()[i] * hv[i])
            .sum();
        worst = worst.max(r.abs());
    }
    worst
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeBound {
    pub k: usize,
    pub lambda_next: f64,
    /// `‖m − 2θ‖∞ + 1`
    pub m_bound: f64,
    /// `μ∫|∇θ'|²`
    pub gradient_side: f64,
    /// `(λ_{K+1} − M)∫θ'²`
    pub bound_side: f64,
    pub second_derivative: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CertificateOutcome {
    Certified {
        k: usize,
        second_derivative: f64,
        first_derivative: f64,
        epsilon: f64,
        ascent: f64,
        base_objective: f64,
    },
    AlreadyBangBang,
    Exhausted,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateReport {
    pub mu: f64,
    pub inactive_nodes: usize,
    pub outcome: CertificateOutcome,
    pub attempts: Vec<ModeBound>,
    #[serde(skip)]
    pub direction: Option<Field>,
}

impl CertificateReport {
    pub fn is_certified(&self) -> bool {
        matches!(self.outcome, CertificateOutcome::Certified { .. })
    }
}

/// Escalates `K` until the high-mode direction has positive second
/// derivative, then realises an ascent step by backtracking.
pub fn bang_bang_certificate(
    g: &Grid,
    m: &ResourceDistribution,
    mu: f64,
    k_max: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<CertificateReport> {
    let field = m.field();
    let inactive = inactive_mask(field);
    let count = inactive.iter().filter(|&&b| b).count();
    if m.is_bang_bang() || count == 0 {
        return Ok(CertificateReport {
            mu,
            inactive_nodes: count,
            outcome: CertificateOutcome::AlreadyBangBang,
            attempts: Vec::new(),
            direction: None,
        });
    }
    let schedule: Vec<usize> = K_SCHEDULE
        .iter()
        .copied()
        .filter(|&k| k <= k_max && k + 1 < count && k < g.node_count())
        .collect();
    if schedule.is_empty() {
        return Err(Error::InactiveSetTooSmall {
            nodes: count,
            needed: K_SCHEDULE[0] + 2,
        });
    }
    let state = solve_state(g, m, mu, cfg)?;
    let (lin, adj) = adjoint_for(g, field, &state, None)?;
    let m_bound = state
        .theta
        .zip_map(field, |t, mm| (mm - 2.0 * t).abs())
        .max()
        + 1.0;
    let potential = state.theta.zip_map(field, |t, mm| 2.0 * t - mm);
    let k_top = *schedule.last().unwrap();
    let full = if g.dim() == 1 {
        Some(schrodinger_eigenpairs(g, mu, &potential, k_top + 1)?)
    } else {
        None
    };
    let mut attempts = Vec::new();
    for &k in &schedule {
        let spec = match &full {
            Some(s) => s.clone(),
            None => schrodinger_eigenpairs(g, mu, &potential, k + 1)?,
        };
        let h = high_mode_perturbation(g, &state, &spec, k, &inactive, seed)?;
        let td = gateaux_theta_dot(&lin, &h);
        let form = energy_form_for(&lin, &adj, &td, None)?;
        let lambda_next = spec.eigenvalues[k];
        attempts.push(ModeBound {
            k,
            lambda_next,
            m_bound,
            gradient_side: mu * dirichlet_energy(g, &td),
            bound_side: (lambda_next - m_bound) * inner(g, &td, &td),
            second_derivative: form.value,
        });
        if form.value > 0.0 {
            let d1 = inner(g, &adj.switching, &h);
            let dir = if d1 < 0.0 { h.scale(-1.0) } else { h };
            if let Some((eps, gain)) = realise_ascent(g, m, &state, &dir, mu, cfg)? {
                return Ok(CertificateReport {
                    mu,
                    inactive_nodes: count,
                    outcome: CertificateOutcome::Certified {
                        k,
                        second_derivative: form.value,
                        first_derivative: d1.abs(),
                        epsilon: eps,
                        ascent: gain,
                        base_objective: state.total_population,
                    },
                    attempts,
                    direction: Some(dir),
                });
            }
        }
    }
    Ok(CertificateReport {
        mu,
        inactive_nodes: count,
        outcome: CertificateOutcome::Exhausted,
        attempts,
        direction: None,
    })
}

/// Largest admissible step, then halving until `F(m + εh) > F(m)`.
fn realise_ascent(
    g: &Grid,
    m: &ResourceDistribution,
    state: &PopulationState,
    h: &Field,
    mu: f64,
    cfg: &SolverConfig,
) -> Result<Option<(f64, f64)>> {
    let mut eps_max = f64::INFINITY;
    for (&mv, &hv) in m.field().values().iter().zip(h.values()) {
        if hv > 0.0 {
            eps_max = eps_max.min((1.0 - mv) / hv);
        } else if hv < 0.0 {
            eps_max = eps_max.min(mv / -hv);
        }
    }
    if !eps_max.is_finite() || eps_max <= 0.0 {
        return Ok(None);
    }
    let mut eps = eps_max;
    for _ in 0..40 {
        let trial = m.field().axpy(eps, h).map(|v| v.clamp(0.0, 1.0));
        if let Ok(rd) = ResourceDistribution::with_mass(trial, m.mass()) {
            if let Ok(s) = solve_state(g, &rd, mu, cfg) {
                let gain = s.total_population - state.total_population;
                if gain > 0.0 {
                    return Ok(Some((eps, gain)));
                }
            }
        }
        eps *= 0.5;
    }
    Ok(None)
}

/// `∫θ'² = Σ_{ℓ>K} α_ℓ²/λ_ℓ²` with `α_ℓ = ⟨hθ, ψ_ℓ⟩`, evaluated on a full
/// eigenbasis. Returns `(direct, expansion)`.
pub fn expansion_identity(
    g: &Grid,
    lin: &Linearization,
    full: &SpectralDecomposition,
    h: &Field,
) -> (f64, f64) {
    let td = gateaux_theta_dot(lin, h);
    let ht = h.zip_map(lin.theta(), |a, t| a * t);
    let direct = inner(g, &td, &td);
    let expansion = full
        .eigenvalues
        .iter()
        .zip(&full.eigenfunctions)
        .map(|(&l, psi)| {
            let a = inner(g, &ht, psi);
            a * a / (l * l)
        })
        .sum();
    (direct, expansion)
}

/// Smooth radial bump with `χ(0) = 1`, supported in the ball of radius `r`.
fn bump(dist: f64, r: f64) -> f64 {
    let s = dist / r;
    if s >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

#[derive(Debug, Clone)]
pub struct OscillatoryPerturbation {
    pub psi: Field,
    pub h: Field,
    /// `∫|∇ψ|²`
    pub gradient_energy: f64,
    pub mean_correction: f64,
}

fn distance(g: &Grid, a: [f64; 2], b: [f64; 2]) -> f64 {
    let dy = if g.dim() == 1 { 0.0 } else { a[1] - b[1] };
    ((a[0] - b[0]).powi(2) + dy * dy).sqrt()
}

/// Oscillating dipole `ψ = χ(·−x0)cos(k|·−x0|) − χ(·−y0)cos(k|·−y0|)` and the
/// direction `h = L_m ψ / θ`, mean-corrected on the two balls.
pub fn oscillatory_perturbation(
    g: &Grid,
    m: &Field,
    state: &PopulationState,
    x0: [f64; 2],
    y0: [f64; 2],
    r: f64,
    k: f64,
) -> Result<OscillatoryPerturbation> {
    if !(r > 0.0) || distance(g, x0, y0) <= 2.0 * r {
        return Err(Error::Geometry(format!(
            "balls of radius {r} around {x0:?} and {y0:?} overlap"
        )));
    }
    for c in [x0, y0] {
        let axes = if g.dim() == 1 { 1 } else { 2 };
        if (0..axes).any(|a| c[a] - r < 0.0 || c[a] + r > 1.0) {
            return Err(Error::Geometry(format!(
                "ball of radius {r} around {c:?} leaves the domain"
            )));
        }
    }
    let mut in_balls = vec![false; g.node_count()];
    let psi_vals: Vec<f64> = (0..g.node_count())
        .map(|q| {
            let p = g.coords(q);
            let (da, db) = (distance(g, p, x0), distance(g, p, y0));
            in_balls[q] = da < r || db < r;
            bump(da, r) * (k * da).cos() - bump(db, r) * (k * db).cos()
        })
        .collect();
    for (q, &inside) in in_balls.iter().enumerate() {
        let v = m.values()[q];
        if inside && !(v > 0.0 && v < 1.0) {
            return Err(Error::Geometry(format!(
                "node {q} inside the balls has saturated resource {v}"
            )));
        }
    }
    let psi = Field::from_vec(*g, psi_vals);
    let lap = laplacian(g, &psi);
    let mut h: Vec<f64> = (0..g.node_count())
        .map(|q| {
            let (t, mm, p) = (state.theta.values()[q], m.values()[q], psi.values()[q]);
            (-state.mu * lap.values()[q] - (mm - 2.0 * t) * p) / t
        })
        .collect();
    let w = g.weights();
    let ball_measure: f64 = (0..h.len()).filter(|&q| in_balls[q]).map(|q| w[q]).sum();
    let mean: f64 = h.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / ball_measure;
    for (q, v) in h.iter_mut().enumerate() {
        if in_balls[q] {
            *v -= mean;
        } else {
            *v = 0.0;
        }
    }
    Ok(OscillatoryPerturbation {
        gradient_energy: dirichlet_energy(g, &psi),
        psi,
        h: Field::from_vec(*g, h),
        mean_correction: mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::solve_state;
    use std::f64::consts::PI;

    fn constant_state(g: &Grid, m0: f64, mu: f64) -> (ResourceDistribution, PopulationState) {
        let rd = ResourceDistribution::constant(g, m0).unwrap();
        let s = solve_state(g, &rd, mu, &SolverConfig::default()).unwrap();
        (rd, s)
    }

    fn discrete_cosine_eigenvalue(g: &Grid, mu: f64, m0: f64, k: usize) -> f64 {
        let h = g.spacing();
        let s = ((k - 1) as f64 * PI * h / 2.0).sin();
        mu * 4.0 / (h * h) * s * s + m0
    }

    #[test]
    fn constant_resource_spectrum_1d() {
        let g = Grid::new(1, 129).unwrap();
        let (rd, s) = constant_state(&g, 0.4, 0.1);
        let dec = eigenpairs(&g, rd.field(), &s, 10).unwrap();
        for k in 1..=10 {
            let exact = discrete_cosine_eigenvalue(&g, 0.1, 0.4, k);
            assert!((dec.eigenvalues[k - 1] - exact).abs() < 1e-10 * exact.max(1.0));
            let cont = 0.1 * PI * PI * ((k - 1) as f64).powi(2) + 0.4;
            let h = g.spacing();
            assert!(
                (dec.eigenvalues[k - 1] - cont).abs() < 10.0 * h * h * PI * PI * (k * k) as f64
            );
        }
        assert!(dec.orthonormality_defect() < 1e-8);
        // second eigenfunction is ±√2 cos(πx)
        let c = g.sample(|x| 2f64.sqrt() * (PI * x[0]).cos());
        assert!(dec.eigenfunctions[1].max_abs_diff(&c) < 1e-8);
    }

    #[test]
    fn constant_resource_spectrum_2d_subspace() {
        let g = Grid::new(2, 17).unwrap();
        let (rd, s) = constant_state(&g, 0.3, 0.05);
        let dec = eigenpairs(&g, rd.field(), &s, 6).unwrap();
        let mut exact: Vec<f64> = (1..=6)
            .flat_map(|i| (1..=6).map(move |j| (i, j)))
            .map(|(i, j)| {
                discrete_cosine_eigenvalue(&g, 0.05, 0.0, i)
                    + discrete_cosine_eigenvalue(&g, 0.05, 0.0, j)
                    + 0.3
            })
            .collect();
        exact.sort_by(|a, b| a.total_cmp(b));
        for k in 0..6 {
            assert!((dec.eigenvalues[k] - exact[k]).abs() < 1e-9, "{k}");
        }
        assert!(dec.orthonormality_defect() < 1e-8);
    }

    #[test]
    fn subspace_matches_dense_on_nonconstant_potential() {
        let g = Grid::new(2, 13).unwrap();
        let pot = g.sample(|x| (3.0 * x[0]).sin() * x[1] - 0.2);
        let dec = schrodinger_eigenpairs(&g, 0.02, &pot, 5).unwrap();
        let (vals, _) = dense_eigenpairs(&g, 0.02, &pot, 5);
        for k in 0..5 {
            assert!((dec.eigenvalues[k] - vals[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn positivity_and_principal_eigenvalue() {
        let g = Grid::new(1, 257).unwrap();
        let m = g.sample(|x| {
            if (0.2..0.45).contains(&x[0]) {
                1.0
            } else {
                0.1
            }
        });
        let rd = ResourceDistribution::new(m.clone()).unwrap();
        let s = solve_state(&g, &rd, 0.01, &SolverConfig::default()).unwrap();
        let dec = eigenpairs(&g, &m, &s, 3).unwrap();
        assert!(dec.eigenvalues[0] > 0.0);
        assert!(principal_eigenvalue_of_state(&g, &m, &s).unwrap().abs() < 1e-6);

        let g2 = Grid::new(2, 33).unwrap();
        let m2 = g2.sample(|x| if x[0] + x[1] < 0.8 { 0.9 } else { 0.2 });
        let rd2 = ResourceDistribution::new(m2.clone()).unwrap();
        let s2 = solve_state(&g2, &rd2, 0.05, &SolverConfig::default()).unwrap();
        assert!(principal_eigenvalue_of_state(&g2, &m2, &s2).unwrap().abs() < 1e-6);
        assert!(eigenpairs(&g2, &m2, &s2, 2).unwrap().eigenvalues[0] > 0.0);
    }

    #[test]
    fn high_mode_direction_satisfies_constraints() {
        let g = Grid::new(1, 129).unwrap();
        let (rd, s) = constant_state(&g, 0.4, 0.1);
        let full = schrodinger_eigenpairs(&g, 0.1, &g.constant(0.4), g.node_count()).unwrap();
        let mask = inactive_mask(rd.field());
        let h = high_mode_perturbation(&g, &s, &full, 5, &mask, 1).unwrap();
        assert!(constraint_residual(&g, &s, &full, 5, &mask, &h) < 1e-10);
        let ht = h.zip_map(&s.theta, |a, t| a * t);
        assert!((inner(&g, &ht, &ht) - 1.0).abs() < 1e-12);
        for psi in full.eigenfunctions.iter().take(5) {
            assert!(inner(&g, &ht, psi).abs() < 1e-8);
        }
        let (lin, _) = adjoint_for(&g, rd.field(), &s, None).unwrap();
        let (direct, expansion) = expansion_identity(&g, &lin, &full, &h);
        assert!((direct - expansion).abs() < 1e-6 * direct);
        let td = gateaux_theta_dot(&lin, &h);
        let m_bound = 0.4 + 1.0;
        assert!(
            0.1 * dirichlet_energy(&g, &td)
                >= (full.eigenvalues[5] - m_bound) * inner(&g, &td, &td)
        );
    }

    #[test]
    fn bang_bang_input_is_rejected() {
        let g = Grid::new(1, 65).unwrap();
        let m = g.sample(|x| if x[0] <= 0.5 { 1.0 } else { 0.0 });
        let rd = ResourceDistribution::new(m.clone()).unwrap();
        let s = solve_state(&g, &rd, 0.1, &SolverConfig::default()).unwrap();
        let dec = eigenpairs(&g, &m, &s, 4).unwrap();
        let mask = inactive_mask(&m);
        assert!(matches!(
            high_mode_perturbation(&g, &s, &dec, 4, &mask, 0),
            Err(Error::InactiveSetTooSmall { .. })
        ));
        let rep = bang_bang_certificate(&g, &rd, 0.1, 64, 0, &SolverConfig::default()).unwrap();
        assert!(matches!(rep.outcome, CertificateOutcome::AlreadyBangBang));
    }

    #[test]
    fn single_inactive_node_is_exhausted_or_rejected() {
        let g = Grid::new(1, 65).unwrap();
        let m = g.sample(|x| if x[0] < 0.3 { 1.0 } else { 0.0 });
        let mut v = m.into_values();
        v[30] = 0.5;
        let rd = ResourceDistribution::new(Field::new(g, v).unwrap()).unwrap();
        let r = bang_bang_certificate(&g, &rd, 0.1, 64, 0, &SolverConfig::default());
        assert!(matches!(r, Err(Error::InactiveSetTooSmall { .. })) || !r.unwrap().is_certified());
    }

    #[test]
    fn certificate_on_constant_resource() {
        let g = Grid::new(1, 257).unwrap();
        let rd = ResourceDistribution::constant(&g, 0.4).unwrap();
        let rep = bang_bang_certificate(&g, &rd, 0.1, 64, 7, &SolverConfig::default()).unwrap();
        match rep.outcome {
            CertificateOutcome::Certified {
                second_derivative,
                ascent,
                ..
            } => {
                assert!(second_derivative > 0.0);
                assert!(ascent > 0.0);
            }
            other => panic!("no certificate: {other:?}"),
        }
        for a in &rep.attempts {
            assert!(a.gradient_side >= a.bound_side);
        }
    }

    #[test]
    fn oscillatory_examples() {
        let g = Grid::new(1, 1025).unwrap();
        let (rd, s) = constant_state(&g, 0.4, 0.1);
        let (x0, y0) = ([0.25, 0.0], [0.75, 0.0]);
        let p0 = oscillatory_perturbation(&g, rd.field(), &s, x0, y0, 0.24, 0.0).unwrap();
        let dipole =
            g.sample(|x| bump((x[0] - 0.25).abs(), 0.24) - bump((x[0] - 0.75).abs(), 0.24));
        assert!(p0.psi.max_abs_diff(&dipole) < 1e-15);
        assert!(integrate(&g, &p0.psi).abs() < 1e-12);
        let energies: Vec<f64> = [20.0, 40.0, 80.0]
            .iter()
            .map(|&k| {
                let p = oscillatory_perturbation(&g, rd.field(), &s, x0, y0, 0.24, k).unwrap();
                assert!(integrate(&g, &p.psi).abs() < 1e-12);
                assert!(integrate(&g, &p.h).abs() < 1e-12);
                p.gradient_energy
            })
            .collect();
        for w in energies.windows(2) {
            let ratio = w[1] / w[0];
            assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
        }
        assert!(oscillatory_perturbation(&g, rd.field(), &s, x0, [0.4, 0.0], 0.2, 5.0).is_err());
    }
}
