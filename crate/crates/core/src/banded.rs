//! Banded LU factorisation with partial pivoting.
//!
//! The finite-difference operators on a tensor grid are banded with half
//! bandwidth 1 (1D) or `n_per_axis` (2D, x-fastest ordering). Pivoting widens
//! the upper band of `U` to `ku + kl`, so rows store `kl + ku + kl + 1`
//! entries starting at column `row - kl`.

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.ku + self.kl);
        i * self.width + (j + self.kl - i)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.ku + self.kl {
            return 0.0;
        }
        self.data[self.offset(i, j)]
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let o = self.offset(i, j);
        self.data[o] += v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.kl);
                let hi = (i + self.ku).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    pub fn factor(mut self) -> Result<BandLu> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut piv = vec![0usize; n];
        let mut mult = vec![0.0; n * kl.max(1)];
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + ku + kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=last_row {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 {
                return Err(Error::Singular(k));
            }
            piv[k] = p;
            if p != k {
                for c in k..=last_col {
                    let (a, b) = (self.offset(k, c), self.offset(p, c));
                    self.data.swap(a, b);
                }
            }
            let pivot = self.get(k, k);
            for i in k + 1..=last_row {
                let oi = self.offset(i, k);
                let l = self.data[oi] / pivot;
                self.data[oi] = 0.0;
                mult[k * kl.max(1) + (i - k - 1)] = l;
                if l != 0.0 {
                    let base_k = self.offset(k, k);
                    let base_i = self.offset(i, k);
                    for c in 1..=last_col - k {
                        self.data[base_i + c] -= l * self.data[base_k + c];
                    }
                }
            }
        }
        Ok(BandLu {
            band: self,
            piv,
            mult,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BandLu {
    band: BandMatrix,
    piv: Vec<usize>,
    mult: Vec<f64>,
}

impl BandLu {
    pub fn size(&self) -> usize {
        self.band.n
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let b = &self.band;
        let (n, kl, ku) = (b.n, b.kl, b.ku);
        assert_eq!(rhs.len(), n);
        let mut x = rhs.to_vec();
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                x.swap(k, p);
            }
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..=(k + kl).min(n - 1) {
                    x[i] -= self.mult[k * kl.max(1) + (i - k - 1)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let base = b.offset(k, k);
            let last = (k + ku + kl).min(n - 1);
            let mut s = x[k];
            for c in 1..=last - k {
                s -= b.data[base + c] * x[k + c];
            }
            x[k] = s / b.data[base];
        }
        x
    }
}

/// Half bandwidth of the finite-difference operators on `g`.
pub fn grid_bandwidth(g: &Grid) -> usize {
    match g.dim() {
        1 => 1,
        _ => g.n_per_axis(),
    }
}

/// Assembles `-diffusion * Δ + diag(potential)` with the mirrored-ghost
/// Neumann stencil.
pub fn assemble_operator(g: &Grid, diffusion: f64, potential: &[f64]) -> BandMatrix {
    let n = g.n_per_axis();
    let bw = grid_bandwidth(g);
    let nodes = g.node_count();
    let c = diffusion / (g.spacing() * g.spacing());
    let mut a = BandMatrix::zeros(nodes, bw, bw);
    // stride and axis index for each axis
    let axes: Vec<(usize, Box<dyn Fn(usize) -> usize>)> = match g.dim() {
        1 => vec![(1, Box::new(|k| k))],
        _ => vec![(1, Box::new(move |k| k % n)), (n, Box::new(move |k| k / n))],
    };
    for k in 0..nodes {
        a.add(k, k, potential[k]);
        for (stride, idx) in &axes {
            let i = idx(k);
            if i == 0 {
                a.add(k, k, 2.0 * c);
                a.add(k, k + stride, -2.0 * c);
            } else if i == n - 1 {
                a.add(k, k, 2.0 * c);
                a.add(k, k - stride, -2.0 * c);
            } else {
                a.add(k, k, 2.0 * c);
                a.add(k, k - stride, -c);
                a.add(k, k + stride, -c);
            }
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn solves_random_banded_system_with_pivoting() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 40;
        let (kl, ku) = (3, 2);
        let mut a = BandMatrix::zeros(n, kl, ku);
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                // weak diagonal forces row swaps
                let v: f64 = rng.random_range(-1.0..1.0);
                a.add(i, j, if i == j { 0.01 * v } else { v });
            }
        }
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let b = a.mul_vec(&x);
        let lu = a.factor().unwrap();
        let y = lu.solve(&b);
        let err = x
            .iter()
            .zip(&y)
            .fold(0.0f64, |e, (p, q)| e.max((p - q).abs()));
        assert!(err < 1e-9, "err={err}");
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = BandMatrix::zeros(5, 1, 1);
        assert!(matches!(a.factor(), Err(Error::Singular(0))));
    }

    #[test]
    fn assembled_operator_matches_stencil() {
        let g = Grid::new(2, 9).unwrap();
        let u = g.sample(|x| (3.0 * x[0]).sin() + x[1] * x[1] * x[0]);
        let a = assemble_operator(&g, 0.7, &vec![0.0; g.node_count()]);
        let au = a.mul_vec(u.values());
        let lap = crate::grid::laplacian(&g, &u);
        for k in 0..g.node_count() {
            assert!((au[k] + 0.7 * lap.values()[k]).abs() < 1e-10);
        }
    }
}
