//! Numerical verification of the large-velocity smallness of the cutoff
//! tail-kernel operator, the interpolation inequality between its L1, L2
//! and Linf norms, and the power-law fitting used by every rate claim.
//!
//! The measured object is the single weighted operator
//!
//!   T g = chi_M nu^{-1} w^{2 l2} Kt ( w^{-2 l2} nu^{-1} g ),
//!
//! where Kt is the tail kernel (the conjugated kernel matrix). All three
//! norms are taken of this one map: the L1 -> L1 and Linf -> Linf norms are
//! exactly the weighted column and row sums of the discrete kernel, the
//! L2 -> L2 norm is estimated variationally by power iteration. Measuring
//! one operator in three norms makes the lambda = 1/2 interpolation
//! inequality n2 <= sqrt(n1 ninf) a theorem for the measured numbers, up to
//! power-iteration underestimation.

use rayon::prelude::*;

use std::sync::Arc;

use crate::error::{KineticsError, Result};
use crate::grid::{velocity_weight, DistributionField, VelocityGrid};
use crate::linearized::LinearizedOperator;

/// Smooth radial cutoff: 0 inside |xi| <= M, 1 outside |xi| >= M + 1,
/// cubic smoothstep on the unit ramp between.
#[derive(Debug, Clone)]
pub struct CutoffProfile {
    pub m: f64,
    values: DistributionField,
}

impl CutoffProfile {
    pub fn new(grid: &Arc<VelocityGrid>, m: f64) -> Result<Self> {
        if !(m > 0.0) {
            return Err(KineticsError::Config(format!(
                "cutoff radius must be positive, got {m}"
            )));
        }
        if m + 1.0 >= grid.extent() {
            return Err(KineticsError::Config(format!(
                "cutoff radius {m} leaves no plateau inside the box of extent {}",
                grid.extent()
            )));
        }
        let values = grid.field_from_fn(|xi| {
            let r = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
            smoothstep(r - m)
        });
        Ok(Self { m, values })
    }

    pub fn values(&self) -> &DistributionField {
        &self.values
    }

    /// Evaluate the ramp at a radius (for tests and diagnostics).
    pub fn at_radius(&self, r: f64) -> f64 {
        smoothstep(r - self.m)
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// One sweep point: the three measured operator norms at cutoff radius M.
#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    pub m: f64,
    pub n1: f64,
    pub n2: f64,
    pub ninf: f64,
}

/// A completed sweep over cutoff radii.
#[derive(Debug, Clone)]
pub struct NormSweep {
    pub weight_exponent: f64,
    pub points: Vec<SweepPoint>,
}

impl NormSweep {
    /// All three norms non-increasing in M (the cutoff support shrinks).
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.points.windows(2).all(|w| {
            w[1].n1 <= w[0].n1 * (1.0 + slack)
                && w[1].n2 <= w[0].n2 * (1.0 + slack)
                && w[1].ninf <= w[0].ninf * (1.0 + slack)
        })
    }
}

/// Measure the three weighted norms of the cutoff tail-kernel operator at
/// one cutoff radius. `l2_weight` is the exponent l2 of the polynomial
/// weight (the operator carries w^{2 l2}).
pub fn cutoff_operator_norms(
    cache: &LinearizedOperator,
    m: f64,
    l2_weight: f64,
) -> Result<SweepPoint> {
    let grid = cache.grid();
    let n3 = grid.node_count();
    let chi = CutoffProfile::new(grid, m)?;
    let nu = cache.nu().values();
    let sqrt_mu = cache.sqrt_mu().values();

    // left diagonal: chi nu^{-1} w^{2 l2} sqrt(mu); right diagonal:
    // w^{-2 l2} nu^{-1} / sqrt(mu). The sqrt(mu) factors conjugate the
    // stored kernel matrix into the tail kernel.
    let left: Vec<f64> = (0..n3)
        .map(|i| {
            let w = velocity_weight(grid.node(i), 2.0 * l2_weight);
            chi.values().values()[i] / nu[i] * w * sqrt_mu[i]
        })
        .collect();
    let right: Vec<f64> = (0..n3)
        .map(|j| {
            let w = velocity_weight(grid.node(j), 2.0 * l2_weight);
            1.0 / (w * nu[j] * sqrt_mu[j])
        })
        .collect();

    let k = cache.k_matrix();

    // row sums (Linf norm) and column sums (L1 norm) in one parallel pass
    let n_chunks = 64.min(n3);
    let chunk = n3.div_ceil(n_chunks);
    let partials: Vec<(Vec<f64>, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let i0 = c * chunk;
            let i1 = ((c + 1) * chunk).min(n3);
            let mut colsum = vec![0.0f64; n3];
            let mut rowmax = 0.0f64;
            for i in i0..i1 {
                if left[i] == 0.0 {
                    continue;
                }
                let row = &k[i * n3..(i + 1) * n3];
                let mut rowsum = 0.0;
                for j in 0..n3 {
                    let t = (left[i] * row[j] * right[j]).abs();
                    rowsum += t;
                    colsum[j] += t;
                }
                rowmax = rowmax.max(rowsum);
            }
            (colsum, rowmax)
        })
        .collect();
    let mut colsum = vec![0.0f64; n3];
    let mut ninf = 0.0f64;
    for (cs, rm) in &partials {
        for (a, b) in colsum.iter_mut().zip(cs.iter()) {
            *a += b;
        }
        ninf = ninf.max(*rm);
    }
    let n1 = colsum.iter().cloned().fold(0.0, f64::max);

    // spectral norm by power iteration on T^T T
    let n2 = if ninf == 0.0 || n1 == 0.0 {
        0.0
    } else {
        power_iteration_spectral_norm(k, &left, &right, n3, 400, 1e-10)?
    };

    Ok(SweepPoint { m, n1, n2, ninf })
}

fn power_iteration_spectral_norm(
    k: &[f64],
    left: &[f64],
    right: &[f64],
    n3: usize,
    max_iter: usize,
    tol: f64,
) -> Result<f64> {
    let apply = |x: &[f64], out: &mut Vec<f64>| {
        // out = T x with T_ij = left_i K_ij right_j
        let y: Vec<f64> = k
            .par_chunks(n3)
            .enumerate()
            .map(|(i, row)| {
                if left[i] == 0.0 {
                    return 0.0;
                }
                let mut s = 0.0;
                for (kv, (rv, xv)) in row.iter().zip(right.iter().zip(x.iter())) {
                    s += kv * rv * xv;
                }
                left[i] * s
            })
            .collect();
        *out = y;
    };
    let apply_t = |x: &[f64], out: &mut Vec<f64>| {
        // out = T^T x, accumulated over fixed row chunks for determinism
        let n_chunks = 64.min(n3);
        let chunk = n3.div_ceil(n_chunks);
        let partials: Vec<Vec<f64>> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let i0 = c * chunk;
                let i1 = ((c + 1) * chunk).min(n3);
                let mut acc = vec![0.0f64; n3];
                for i in i0..i1 {
                    let s = left[i] * x[i];
                    if s == 0.0 {
                        continue;
                    }
                    let row = &k[i * n3..(i + 1) * n3];
                    for (a, (kv, rv)) in acc.iter_mut().zip(row.iter().zip(right.iter())) {
                        *a += s * kv * rv;
                    }
                }
                acc
            })
            .collect();
        let mut y = vec![0.0f64; n3];
        for p in &partials {
            for (a, b) in y.iter_mut().zip(p.iter()) {
                *a += b;
            }
        }
        *out = y;
    };

    let mut x = vec![1.0 / (n3 as f64).sqrt(); n3];
    let mut tx = Vec::new();
    let mut ttx = Vec::new();
    let mut sigma_prev = 0.0f64;
    for _ in 0..max_iter {
        apply(&x, &mut tx);
        apply_t(&tx, &mut ttx);
        let norm_ttx = ttx.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm_ttx == 0.0 {
            return Ok(0.0);
        }
        let sigma2 = ttx.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>();
        let sigma = sigma2.max(0.0).sqrt();
        for (xv, tv) in x.iter_mut().zip(ttx.iter()) {
            *xv = tv / norm_ttx;
        }
        if (sigma - sigma_prev).abs() <= tol * sigma.max(1e-300) {
            return Ok(sigma);
        }
        sigma_prev = sigma;
    }
    // power iteration approaches the norm from below; report the estimate
    Ok(sigma_prev)
}

/// Run a sweep over cutoff radii.
pub fn run_sweep(cache: &LinearizedOperator, ms: &[f64], l2_weight: f64) -> Result<NormSweep> {
    let mut points = Vec::with_capacity(ms.len());
    let mut prev = f64::NEG_INFINITY;
    for &m in ms {
        if m <= prev {
            return Err(KineticsError::Config(
                "cutoff radii must be strictly increasing".into(),
            ));
        }
        prev = m;
        points.push(cutoff_operator_norms(cache, m, l2_weight)?);
    }
    Ok(NormSweep {
        weight_exponent: l2_weight,
        points,
    })
}

/// One interpolation-inequality check: n2 against sqrt(n1 ninf) (1 + slack).
#[derive(Debug, Clone, Copy)]
pub struct InterpolationCheck {
    pub m: f64,
    pub n2: f64,
    pub bound: f64,
    pub satisfied: bool,
}

/// Verify the lambda = 1/2 interpolation inequality at every sweep point.
/// Violations are reported, never thrown.
pub fn riesz_thorin_check(sweep: &NormSweep, slack: f64) -> Vec<InterpolationCheck> {
    sweep
        .points
        .iter()
        .map(|p| {
            let bound = (p.n1 * p.ninf).sqrt() * (1.0 + slack);
            InterpolationCheck {
                m: p.m,
                n2: p.n2,
                bound,
                satisfied: p.n2 <= bound,
            }
        })
        .collect()
}

/// Least-squares power-law fit of log y against log x.
#[derive(Debug, Clone, Copy)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub amplitude: f64,
    pub r_squared: f64,
    pub exponent_stderr: f64,
}

pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<PowerLawFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(KineticsError::Config(format!(
            "power-law fit needs at least 3 paired points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys.iter()).any(|&v| !(v > 0.0)) {
        return Err(KineticsError::Config(
            "power-law fit requires strictly positive data".into(),
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = lx.iter().zip(ly.iter()).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(KineticsError::Config(
            "power-law fit requires at least two distinct abscissae".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (a, b) in lx.iter().zip(ly.iter()) {
        let pred = intercept + slope * a;
        ss_res += (b - pred) * (b - pred);
        ss_tot += (b - my) * (b - my);
    }
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    let dof = (lx.len() as f64 - 2.0).max(1.0);
    let exponent_stderr = (ss_res / dof / sxx).sqrt();
    Ok(PowerLawFit {
        exponent: slope,
        amplitude: intercept.exp(),
        r_squared,
        exponent_stderr,
    })
}
