//! Small numerical kernels shared by the solvers and checkers.

use crate::error::{Error, Result};
use crate::scenario::{NoiseKind, NoiseSpec};

/// Pivots below this fraction of the row scale are treated as singular.
pub const SINGULARITY_THRESHOLD: f64 = 1e-12;

/// Real `m`-th root of `y` for odd `m`, keeping the sign of `y`.
///
/// `t ↦ t^m` is a bijection on the reals for odd `m`, so the result is the
/// unique real solution of `t^m = y`.
pub fn signed_root(y: f64, m: u32) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::NumericDomain(format!(
            "signed_root of non-finite value {y}"
        )));
    }
    if m == 0 || m % 2 == 0 {
        return Err(Error::NumericDomain(format!(
            "signed_root needs an odd positive order, got {m}"
        )));
    }
    let magnitude = y.abs();
    let root = match m {
        1 => magnitude,
        3 => magnitude.cbrt(),
        _ if magnitude == 0.0 => 0.0,
        _ => {
            let mut t = magnitude.powf(1.0 / f64::from(m));
            // One Newton step on t^m - y removes most of the powf rounding.
            let tm1 = t.powi(m as i32 - 1);
            let step = (t * tm1 - magnitude) / (f64::from(m) * tm1);
            if step.is_finite() {
                t -= step;
            }
            t
        }
    };
    Ok(if y.is_sign_negative() { -root } else { root })
}

/// Dense square matrix, row-major. Only used at agent-count size.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl SmallMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::NumericDomain("matrix dimension must be >= 1".into()));
        }
        if entries.len() != n * n {
            return Err(Error::NumericDomain(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                entries.len()
            )));
        }
        if let Some(bad) = entries.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericDomain(format!(
                "non-finite matrix entry {bad}"
            )));
        }
        Ok(Self { n, entries })
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        Self { n, entries }
    }

    /// Coupling matrix with unit diagonal and `e_ij = c_i * b_j` off the diagonal.
    pub fn coupling(c: &[f64], b: &[f64]) -> Result<Self> {
        let n = c.len();
        if b.len() != n {
            return Err(Error::NumericDomain(
                "coupling vectors differ in length".into(),
            ));
        }
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                entries.push(if i == j { 1.0 } else { c[i] * b[j] });
            }
        }
        Self::new(n, entries)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.entries[i * self.n..(i + 1) * self.n]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

/// Solves `E g = c` by Gaussian elimination with scaled partial pivoting and
/// one round of iterative refinement.
pub fn solve_linear(e: &SmallMatrix, c: &[f64]) -> Result<Vec<f64>> {
    let n = e.dim();
    if c.len() != n {
        return Err(Error::NumericDomain(format!(
            "right-hand side has length {}, matrix is {n}x{n}",
            c.len()
        )));
    }
    if let Some(bad) = c.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericDomain(format!(
            "non-finite right-hand side {bad}"
        )));
    }
    let lu = LuFactors::factor(e)?;
    let mut g = lu.solve(c);

    let residual: Vec<f64> = e
        .mul_vec(&g)
        .iter()
        .zip(c)
        .map(|(eg, ci)| ci - eg)
        .collect();
    let correction = lu.solve(&residual);
    for (gi, di) in g.iter_mut().zip(correction) {
        *gi += di;
    }
    Ok(g)
}

struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl LuFactors {
    fn factor(e: &SmallMatrix) -> Result<Self> {
        let n = e.dim();
        let mut lu = e.entries().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale: Vec<f64> = (0..n)
            .map(|i| {
                lu[i * n..(i + 1) * n]
                    .iter()
                    .fold(0.0_f64, |m, v| m.max(v.abs()))
            })
            .collect();

        for col in 0..n {
            let (pivot_row, _) = (col..n)
                .map(|r| {
                    let s = scale[perm[r]];
                    let rel = if s > 0.0 {
                        lu[perm[r] * n + col].abs() / s
                    } else {
                        0.0
                    };
                    (r, rel)
                })
                .fold(
                    (col, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
            perm.swap(col, pivot_row);
            let prow = perm[col];
            let pivot = lu[prow * n + col];
            let threshold = SINGULARITY_THRESHOLD * scale[prow];
            if !(pivot.abs() >= threshold) || scale[prow] == 0.0 {
                return Err(Error::Singular {
                    pivot: pivot.abs(),
                    threshold,
                    context: None,
                });
            }
            for r in col + 1..n {
                let row = perm[r];
                let factor = lu[row * n + col] / pivot;
                lu[row * n + col] = factor;
                for j in col + 1..n {
                    lu[row * n + j] -= factor * lu[prow * n + j];
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let row = self.perm[i];
            let mut acc = rhs[row];
            for j in 0..i {
                acc -= self.lu[row * n + j] * y[j];
            }
            y[i] = acc;
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let row = self.perm[i];
            let mut acc = y[i];
            for j in i + 1..n {
                acc -= self.lu[row * n + j] * x[j];
            }
            x[i] = acc / self.lu[row * n + i];
        }
        x
    }
}

/// `(2j - 1)!!` as a float.
pub fn double_factorial_odd(j: u32) -> f64 {
    (1..=j).map(|i| f64::from(2 * i - 1)).product()
}

/// `E[ε^order]` for the noise applied during the transition out of step `k`
/// (that is, `ε_{k+1}`).
pub fn noise_even_moment(spec: &NoiseSpec, k: usize, order: u32) -> Result<f64> {
    if order < 2 || order % 2 != 0 {
        return Err(Error::NumericDomain(format!(
            "noise moment order must be even and >= 2, got {order}"
        )));
    }
    let j = order / 2;
    let sigma = || {
        spec.sigma.get(k).copied().ok_or_else(|| {
            Error::NumericDomain(format!("noise schedule has no entry for step {k}"))
        })
    };
    match spec.kind {
        NoiseKind::Gaussian => Ok(sigma()?.powi(order as i32) * double_factorial_odd(j)),
        NoiseKind::Rademacher => Ok(sigma()?.powi(order as i32)),
        // Half-width w = σ√3, so E[ε^{2j}] = w^{2j}/(2j+1) = σ^{2j} 3^j/(2j+1).
        NoiseKind::Uniform => {
            Ok(sigma()?.powi(order as i32) * (3f64.powi(j as i32) / f64::from(order + 1)))
        }
        NoiseKind::ExplicitMoments => spec
            .moments
            .as_ref()
            .and_then(|rows| rows.get(k))
            .and_then(|row| row.get(j as usize - 1))
            .copied()
            .ok_or(Error::MissingMoment { step: k, order }),
    }
}

/// Second derivative of `z ↦ z^{2p} + (a z + b)^{2p}`.
pub fn convexity_second_derivative(p: u32, a: f64, b: f64, z: f64) -> f64 {
    let two_p = f64::from(2 * p);
    let lead = two_p * (two_p - 1.0);
    let e = 2 * p as i32 - 2;
    lead * z.powi(e) + lead * a * a * (a * z + b).powi(e)
}

/// Minimum of the second derivative of `z^{2p} + (a z + b)^{2p}` over `grid`.
pub fn convexity_scan(p: u32, a: f64, b: f64, grid: &[f64]) -> Result<f64> {
    if p == 0 {
        return Err(Error::NumericDomain("convexity scan needs p >= 1".into()));
    }
    if a == 0.0 || b == 0.0 || !a.is_finite() || !b.is_finite() {
        return Err(Error::NumericDomain(format!(
            "convexity scan needs finite nonzero a and b, got a={a}, b={b}"
        )));
    }
    if grid.is_empty() {
        return Err(Error::NumericDomain("convexity scan grid is empty".into()));
    }
    if let Some(z) = grid.iter().find(|z| !z.is_finite()) {
        return Err(Error::NumericDomain(format!("non-finite grid point {z}")));
    }
    Ok(grid
        .iter()
        .map(|&z| convexity_second_derivative(p, a, b, z))
        .fold(f64::INFINITY, f64::min))
}

/// Compensated (Neumaier) sum; order of `values` fixes the result.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
