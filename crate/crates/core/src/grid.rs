//! Node-centred tensor grids on the unit cube, scalar fields and the discrete
//! operators used throughout the crate.
//!
//! Nodes include the endpoints of every axis. Quadrature is the tensor
//! trapezoid rule, and the Neumann Laplacian uses mirrored ghost nodes, which
//! makes it self-adjoint for the trapezoid inner product. The edge-based
//! Dirichlet form below is the exact counterpart of that Laplacian:
//! `integrate(v * laplacian(u)) == -dirichlet_form(u, v)` up to round-off.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    n_per_axis: usize,
}

impl Grid {
    pub fn new(dim: usize, n_per_axis: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::UnsupportedDimension(dim));
        }
        if n_per_axis < 8 {
            return Err(Error::GridTooCoarse(n_per_axis));
        }
        Ok(Self { dim, n_per_axis })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_per_axis(&self) -> usize {
        self.n_per_axis
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.n_per_axis - 1) as f64
    }

    pub fn node_count(&self) -> usize {
        self.n_per_axis.pow(self.dim as u32)
    }

    /// Coordinate of the `i`-th node along an axis. Computed as a ratio so the
    /// last node sits exactly at 1.
    pub fn axis_coord(&self, i: usize) -> f64 {
        i as f64 / (self.n_per_axis - 1) as f64
    }

    /// Trapezoid weight of the `i`-th node along an axis.
    pub fn axis_weight(&self, i: usize) -> f64 {
        let h = self.spacing();
        if i == 0 || i + 1 == self.n_per_axis {
            0.5 * h
        } else {
            h
        }
    }

    /// Per-axis indices of a node (x index first).
    pub fn axis_indices(&self, node: usize) -> (usize, usize) {
        match self.dim {
            1 => (node, 0),
            _ => (node % self.n_per_axis, node / self.n_per_axis),
        }
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        match self.dim {
            1 => i,
            _ => j * self.n_per_axis + i,
        }
    }

    /// Node coordinates; the second entry is 0 in 1D.
    pub fn coords(&self, node: usize) -> [f64; 2] {
        let (i, j) = self.axis_indices(node);
        match self.dim {
            1 => [self.axis_coord(i), 0.0],
            _ => [self.axis_coord(i), self.axis_coord(j)],
        }
    }

    pub fn weight(&self, node: usize) -> f64 {
        let (i, j) = self.axis_indices(node);
        match self.dim {
            1 => self.axis_weight(i),
            _ => self.axis_weight(i) * self.axis_weight(j),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.node_count()).map(|k| self.weight(k)).collect()
    }

    pub fn constant(&self, c: f64) -> Field {
        Field {
            grid: *self,
            values: vec![c; self.node_count()],
        }
    }

    pub fn zeros(&self) -> Field {
        self.constant(0.0)
    }

    /// Samples `f` at every node. `f` receives `[x, y]` (y = 0 in 1D).
    pub fn sample(&self, mut f: impl FnMut([f64; 2]) -> f64) -> Field {
        Field {
            grid: *self,
            values: (0..self.node_count()).map(|k| f(self.coords(k))).collect(),
        }
    }

    /// Visits every axis-aligned edge `(a, b, transverse_weight)`, where the
    /// transverse weight is the trapezoid weight of the edge in the other
    /// direction (1 in 1D).
    pub fn for_each_edge(&self, mut f: impl FnMut(usize, usize, f64)) {
        let n = self.n_per_axis;
        match self.dim {
            1 => {
                for i in 0..n - 1 {
                    f(i, i + 1, 1.0);
                }
            }
            _ => {
                for j in 0..n {
                    let wy = self.axis_weight(j);
                    for i in 0..n - 1 {
                        f(j * n + i, j * n + i + 1, wy);
                    }
                }
                for j in 0..n - 1 {
                    for i in 0..n {
                        let wx = self.axis_weight(i);
                        f(j * n + i, (j + 1) * n + i, wx);
                    }
                }
            }
        }
    }

    fn check(&self, u: &Field) -> Result<()> {
        if u.grid != *self {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

/// Nodal values of a scalar quantity on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::ShapeMismatch {
                expected: grid.node_count(),
                got: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(k));
        }
        Ok(Self { grid, values })
    }

    /// Skips the finiteness scan; callers guarantee the length matches.
    pub(crate) fn from_vec(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.node_count());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field::from_vec(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        assert_eq!(self.grid, other.grid, "fields live on different grids");
        Field::from_vec(
            self.grid,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn scale(&self, c: f64) -> Field {
        self.map(|v| c * v)
    }

    /// `self + c * other`
    pub fn axpy(&self, c: f64, other: &Field) -> Field {
        self.zip_map(other, |a, b| a + c * b)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for t in terms {
        let next = sum + t;
        carry += if sum.abs() >= t.abs() {
            (sum - next) + t
        } else {
            (t - next) + sum
        };
        sum = next;
    }
    sum + carry
}

/// Trapezoid quadrature over the unit cube.
pub fn integrate(g: &Grid, u: &Field) -> f64 {
    debug_assert_eq!(u.grid, *g);
    compensated_sum(u.values.iter().enumerate().map(|(k, v)| g.weight(k) * v))
}

/// Quadrature inner product `∫ a b`.
pub fn inner(g: &Grid, a: &Field, b: &Field) -> f64 {
    compensated_sum(
        a.values
            .iter()
            .zip(&b.values)
            .enumerate()
            .map(|(k, (x, y))| g.weight(k) * x * y),
    )
}

pub fn l1_norm(g: &Grid, u: &Field) -> f64 {
    compensated_sum(
        u.values
            .iter()
            .enumerate()
            .map(|(k, v)| g.weight(k) * v.abs()),
    )
}

pub fn l2_norm(g: &Grid, u: &Field) -> f64 {
    inner(g, u, u).sqrt()
}

/// Second-order Neumann Laplacian with mirrored ghost nodes.
pub fn apply_neumann_laplacian(g: &Grid, u: &Field) -> Result<Field> {
    g.check(u)?;
    Ok(laplacian(g, u))
}

pub(crate) fn laplacian(g: &Grid, u: &Field) -> Field {
    let n = g.n_per_axis;
    let inv_h2 = 1.0 / (g.spacing() * g.spacing());
    let v = &u.values;
    let second = |prev: Option<f64>, mid: f64, next: Option<f64>| -> f64 {
        match (prev, next) {
            (Some(a), Some(b)) => a - 2.0 * mid + b,
            (None, Some(b)) => 2.0 * (b - mid),
            (Some(a), None) => 2.0 * (a - mid),
            (None, None) => 0.0,
        }
    };
    let mut out = vec![0.0; v.len()];
    match g.dim {
        1 => {
            for i in 0..n {
                let prev = (i > 0).then(|| v[i - 1]);
                let next = (i + 1 < n).then(|| v[i + 1]);
                out[i] = second(prev, v[i], next) * inv_h2;
            }
        }
        _ => {
            for j in 0..n {
                for i in 0..n {
                    let k = j * n + i;
                    let dx = second(
                        (i > 0).then(|| v[k - 1]),
                        v[k],
                        (i + 1 < n).then(|| v[k + 1]),
                    );
                    let dy = second(
                        (j > 0).then(|| v[k - n]),
                        v[k],
                        (j + 1 < n).then(|| v[k + n]),
                    );
                    out[k] = (dx + dy) * inv_h2;
                }
            }
        }
    }
    Field::from_vec(*g, out)
}

/// `∫ ∇u · ∇v` from edge differences; symmetric counterpart of the Laplacian.
pub fn dirichlet_form(g: &Grid, u: &Field, v: &Field) -> f64 {
    let inv_h = 1.0 / g.spacing();
    let (a, b) = (&u.values, &v.values);
    let mut acc = 0.0;
    g.for_each_edge(|p, q, wt| {
        acc += (a[q] - a[p]) * (b[q] - b[p]) * wt * inv_h;
    });
    acc
}

/// `∫ |∇u|²`.
pub fn dirichlet_energy(g: &Grid, u: &Field) -> f64 {
    dirichlet_form(g, u, u)
}

/// `∫ a |∇u|²` with `a` averaged onto edges. With this convention the
/// discrete product rule `∫ a u (-Δu) = ∫ a|∇u|² - ½∫ Δa u²` holds exactly.
pub fn weighted_dirichlet_energy(g: &Grid, a: &Field, u: &Field) -> f64 {
    let inv_h = 1.0 / g.spacing();
    let (c, v) = (&a.values, &u.values);
    let mut acc = 0.0;
    g.for_each_edge(|p, q, wt| {
        let d = v[q] - v[p];
        acc += 0.5 * (c[p] + c[q]) * d * d * wt * inv_h;
    });
    acc
}

/// Anisotropic total variation: jumps across axis-adjacent node pairs times
/// the transverse cell measure. No contribution from ∂Ω.
pub fn tv_norm(g: &Grid, u: &Field) -> f64 {
    let v = &u.values;
    let mut acc = 0.0;
    g.for_each_edge(|p, q, wt| acc += (v[q] - v[p]).abs() * wt);
    acc
}

pub fn bv_norm(g: &Grid, u: &Field) -> f64 {
    l1_norm(g, u) + tv_norm(g, u)
}

/// Even reflection of an axis index into `0..n`.
fn reflect(mut i: isize, n: usize) -> usize {
    let last = n as isize - 1;
    loop {
        if i < 0 {
            i = -i;
        } else if i > last {
            i = 2 * last - i;
        } else {
            return i as usize;
        }
    }
}

/// Normalised discrete bump kernel `(1 - |x/eps|²)²` on the grid offsets.
fn bump_kernel(g: &Grid, eps: f64) -> Vec<(isize, isize, f64)> {
    let h = g.spacing();
    let reach = (eps / h).floor() as isize;
    let mut taps = Vec::new();
    let ys: Vec<isize> = if g.dim == 1 {
        vec![0]
    } else {
        (-reach..=reach).collect()
    };
    for &dy in &ys {
        for dx in -reach..=reach {
            let r2 = ((dx * dx + dy * dy) as f64) * h * h / (eps * eps);
            if r2 < 1.0 {
                let w = (1.0 - r2) * (1.0 - r2);
                taps.push((dx, dy, w));
            }
        }
    }
    let total: f64 = taps.iter().map(|t| t.2).sum();
    for t in &mut taps {
        t.2 /= total;
    }
    taps
}

/// Convolution with a normalised bump of radius `eps`, extending `m` outside
/// the domain by even reflection.
pub fn mollify(g: &Grid, m: &Field, eps: f64) -> Result<Field> {
    g.check(m)?;
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "mollifier radius must lie in (0, 0.5), got {eps}"
        )));
    }
    let n = g.n_per_axis;
    let taps = bump_kernel(g, eps);
    let v = &m.values;
    let out = (0..g.node_count())
        .map(|k| {
            let (i, j) = g.axis_indices(k);
            taps.iter()
                .map(|&(dx, dy, w)| {
                    let si = reflect(i as isize + dx, n);
                    let sj = if g.dim == 1 {
                        0
                    } else {
                        reflect(j as isize + dy, n)
                    };
                    w * v[g.node_index(si, sj)]
                })
                .sum()
        })
        .collect();
    Ok(Field::from_vec(*g, out))
}
