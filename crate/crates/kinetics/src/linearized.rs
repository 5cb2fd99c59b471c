//! The discrete linearized collision operator L = nu - K, its projections
//! onto and off the five-dimensional kernel, a constrained (deflated)
//! conjugate-gradient inverse, the conjugated bilinear form, and the
//! explicit pointwise kernel bounds.
//!
//! K is assembled column-exactly from the same quadrature as the bilinear
//! operator: the j-th column is the response to a single-node impulse in
//! the conjugated source slot, accumulated by scattering each (offset,
//! omega) quadrature entry into the trilinear stencils of the two
//! post-collision points. By construction `apply_kernel` therefore agrees
//! with the direct quadrature to rounding.
//!
//! Quadrature breaks exact self-adjointness; the assembled operator is
//! symmetrized before inversion and the defect is recorded, not hidden.
//! Inversion is always performed on the deflated operator P1 L_sym P1,
//! whose null directions are the discretely orthonormalized collision
//! invariants.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::collision::{CollisionTables, ShearConfig};
use crate::error::{KineticsError, Result};
use crate::grid::{
    inner_product, l2_norm, velocity_weight, DistributionField, VelocityGrid,
};

/// Parameters identifying one assembled operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorFingerprint {
    pub extent: f64,
    pub points_per_axis: u32,
    pub gamma: f64,
    pub b0: f64,
    pub n_cos: u32,
    pub n_phi: u32,
}

/// Assembled dense linearized operator with its diagnostics.
#[derive(Debug)]
pub struct LinearizedOperator {
    grid: Arc<VelocityGrid>,
    fingerprint: OperatorFingerprint,
    nu: DistributionField,
    /// Row-major dense kernel matrix; entries include the quadrature weight,
    /// so application is a plain matrix-vector product on nodal values.
    k_matrix: Vec<f64>,
    /// Discretely orthonormalized kernel basis {1, xi, |xi|^2 - 3} sqrt(mu).
    kernel_basis: Vec<DistributionField>,
    sqrt_mu: DistributionField,
    /// Relative Frobenius asymmetry of K.
    pub symmetry_defect: f64,
    /// Largest L2 residual of the raw operator on the kernel basis.
    pub kernel_residual: f64,
    pub assembly_seconds: f64,
    pub checksum: u64,
}

impl LinearizedOperator {
    /// Assemble nu and K from the collision quadrature tables.
    pub fn assemble(tables: &CollisionTables) -> Result<Self> {
        let start = Instant::now();
        let grid = Arc::clone(tables.grid());
        let n = grid.points_per_axis();
        let n3 = n * n * n;
        let side = 2 * n - 1;
        let n_omega = tables.n_cos * tables.n_phi;

        let mu = grid.maxwellian();
        let sqrt_mu = grid.sqrt_maxwellian();
        let nu = tables.frequency_of(&mu)?;

        let mut k_matrix = vec![0.0f64; n3 * n3];
        let sqrt_mu_vals = sqrt_mu.values();
        let mu_vals = mu.values();
        let inv_sqrt_mu: Vec<f64> = sqrt_mu_vals.iter().map(|s| 1.0 / s).collect();
        let gain = &tables.gain;
        let loss = &tables.loss;

        k_matrix
            .par_chunks_mut(n3)
            .enumerate()
            .for_each(|(i, row)| {
                let iz = i % n;
                let iy = (i / n) % n;
                let ix = i / (n * n);
                let sqrt_mu_i = sqrt_mu_vals[i];
                for jx in 0..n {
                    let offx = (jx + n - 1 - ix) * side;
                    for jy in 0..n {
                        let offy = (offx + jy + n - 1 - iy) * side;
                        for jz in 0..n {
                            let off_idx = offy + jz + n - 1 - iz;
                            let j = (jx * n + jy) * n + jz;
                            // omega-integrated loss: K[i][j] -= h^3 nu_B sqrt(mu_j) sqrt(mu_i)
                            row[j] -= loss[off_idx] * sqrt_mu_vals[j] * sqrt_mu_i;
                            let entries = &gain[off_idx * n_omega..(off_idx + 1) * n_omega];
                            // both gain terms interpolate the normalized
                            // source f / sqrt(mu); the Maxwellian slot has
                            // unit ratio, so the prefactor is exact:
                            // sqrt(mu_i) mu_j per quadrature entry
                            let c0 = sqrt_mu_i * mu_vals[j];
                            for e in entries {
                                if e.coeff == 0.0 {
                                    continue;
                                }
                                let c = c0 * e.coeff;
                                // gain of Q(sqrt(mu) f, mu): source at xi*'
                                scatter_tri(
                                    row,
                                    &inv_sqrt_mu,
                                    n,
                                    [ix as i64, iy as i64, iz as i64],
                                    e.base_starp,
                                    e.frac_starp,
                                    c,
                                );
                                // gain of Q_gain(mu, sqrt(mu) f): source at xi'
                                scatter_tri(
                                    row,
                                    &inv_sqrt_mu,
                                    n,
                                    [ix as i64, iy as i64, iz as i64],
                                    e.base_prime,
                                    e.frac_prime,
                                    c,
                                );
                            }
                        }
                    }
                }
            });

        let fingerprint = OperatorFingerprint {
            extent: grid.extent(),
            points_per_axis: n as u32,
            gamma: tables.config().gamma,
            b0: tables.config().b0,
            n_cos: tables.n_cos as u32,
            n_phi: tables.n_phi as u32,
        };
        let assembly_seconds = start.elapsed().as_secs_f64();
        Self::from_parts(grid, fingerprint, nu, k_matrix, assembly_seconds)
    }

    /// Rebuild the cache object from stored parts (deserialization path).
    /// Recomputes the orthonormal kernel basis and the recorded defects.
    pub fn from_parts(
        grid: Arc<VelocityGrid>,
        fingerprint: OperatorFingerprint,
        nu: DistributionField,
        k_matrix: Vec<f64>,
        assembly_seconds: f64,
    ) -> Result<Self> {
        let n3 = grid.node_count();
        if k_matrix.len() != n3 * n3 {
            return Err(KineticsError::Config(format!(
                "kernel matrix has {} entries, expected {}",
                k_matrix.len(),
                n3 * n3
            )));
        }
        if nu.grid().node_count() != n3 {
            return Err(KineticsError::GridMismatch(
                "nu field does not match the grid".into(),
            ));
        }
        let kernel_basis = orthonormal_kernel_basis(&grid)?;
        let sqrt_mu = grid.sqrt_maxwellian();
        let checksum = fnv1a(&k_matrix);
        let symmetry_defect = symmetry_defect(&k_matrix, n3);
        let mut cache = Self {
            grid,
            fingerprint,
            nu,
            k_matrix,
            kernel_basis,
            sqrt_mu,
            symmetry_defect,
            kernel_residual: 0.0,
            assembly_seconds,
            checksum,
        };
        let mut worst = 0.0f64;
        for k in 0..5 {
            let basis = cache.kernel_basis[k].clone();
            let image = cache.apply(&basis)?;
            worst = worst.max(l2_norm(&image));
        }
        cache.kernel_residual = worst;
        Ok(cache)
    }

    pub fn grid(&self) -> &Arc<VelocityGrid> {
        &self.grid
    }

    pub fn fingerprint(&self) -> &OperatorFingerprint {
        &self.fingerprint
    }

    pub fn nu(&self) -> &DistributionField {
        &self.nu
    }

    pub fn k_matrix(&self) -> &[f64] {
        &self.k_matrix
    }

    pub fn kernel_basis(&self) -> &[DistributionField] {
        &self.kernel_basis
    }

    fn check_field(&self, f: &DistributionField) -> Result<()> {
        if !f.grid().same_lattice(&self.grid) {
            return Err(KineticsError::GridMismatch(
                "field does not live on the cached grid".into(),
            ));
        }
        Ok(())
    }

    /// K f (raw assembled kernel part).
    pub fn apply_kernel(&self, f: &DistributionField) -> Result<DistributionField> {
        self.check_field(f)?;
        let n3 = self.grid.node_count();
        let x = f.values();
        let out: Vec<f64> = self
            .k_matrix
            .par_chunks(n3)
            .map(|row| row.iter().zip(x.iter()).map(|(a, b)| a * b).sum())
            .collect();
        DistributionField::from_values(&self.grid, out)
    }

    /// K^T f, used by the symmetrized application.
    pub fn apply_kernel_transpose(&self, f: &DistributionField) -> Result<DistributionField> {
        self.check_field(f)?;
        let n3 = self.grid.node_count();
        let x = f.values();
        let k = &self.k_matrix;
        let n_chunks = 64.min(n3);
        let chunk = n3.div_ceil(n_chunks);
        let out: Vec<f64> = (0..n_chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let j0 = c * chunk;
                let j1 = ((c + 1) * chunk).min(n3);
                let mut acc = vec![0.0f64; j1.saturating_sub(j0)];
                for (i, &xi) in x.iter().enumerate() {
                    if xi != 0.0 {
                        let row = &k[i * n3 + j0..i * n3 + j1];
                        for (a, r) in acc.iter_mut().zip(row.iter()) {
                            *a += xi * r;
                        }
                    }
                }
                acc.into_iter()
            })
            .collect();
        DistributionField::from_values(&self.grid, out)
    }

    /// Raw operator L f = nu f - K f.
    pub fn apply(&self, f: &DistributionField) -> Result<DistributionField> {
        let mut out = self.apply_kernel(f)?;
        for ((o, nv), fv) in out
            .values_mut()
            .iter_mut()
            .zip(self.nu.values().iter())
            .zip(f.values().iter())
        {
            *o = nv * fv - *o;
        }
        Ok(out)
    }

    /// Symmetrized operator nu f - (K + K^T) f / 2.
    pub fn apply_symmetrized(&self, f: &DistributionField) -> Result<DistributionField> {
        let kf = self.apply_kernel(f)?;
        let ktf = self.apply_kernel_transpose(f)?;
        let mut out = kf;
        for (((o, t), nv), fv) in out
            .values_mut()
            .iter_mut()
            .zip(ktf.values().iter())
            .zip(self.nu.values().iter())
            .zip(f.values().iter())
        {
            *o = nv * fv - 0.5 * (*o + t);
        }
        Ok(out)
    }

    /// The effective invertible operator: P1 L_sym P1. All spectral
    /// statements and the constrained inverse refer to this map.
    pub fn apply_deflated(&self, f: &DistributionField) -> Result<DistributionField> {
        let pf = self.project_microscopic(f)?;
        let lf = self.apply_symmetrized(&pf)?;
        self.project_microscopic(&lf)
    }

    /// Macroscopic projection P0 onto the orthonormalized kernel basis.
    pub fn project_macroscopic(&self, f: &DistributionField) -> Result<DistributionField> {
        self.check_field(f)?;
        let mut out = self.grid.zero_field();
        for b in &self.kernel_basis {
            let c = inner_product(f, b)?;
            out.axpy(c, b)?;
        }
        Ok(out)
    }

    /// Microscopic projection P1 = I - P0.
    pub fn project_microscopic(&self, f: &DistributionField) -> Result<DistributionField> {
        let p0 = self.project_macroscopic(f)?;
        let mut out = f.clone();
        out.axpy(-1.0, &p0)?;
        Ok(out)
    }

    /// Constrained inverse on the microscopic subspace by deflated
    /// conjugate gradients; every iterate is re-projected by P1.
    ///
    /// The right-hand side must already be microscopic up to `tol`
    /// relative; the solution satisfies P0 x = 0 and
    /// || P1 L_sym P1 x - P1 rhs || <= tol ||rhs||.
    pub fn solve_constrained(
        &self,
        rhs: &DistributionField,
        tol: f64,
        max_iter: usize,
    ) -> Result<SolveReport> {
        self.check_field(rhs)?;
        let rhs_norm = l2_norm(rhs);
        if rhs_norm == 0.0 {
            return Ok(SolveReport {
                solution: self.grid.zero_field(),
                iterations: 0,
                residual: 0.0,
            });
        }
        let macro_part = l2_norm(&self.project_macroscopic(rhs)?);
        if macro_part > tol.max(1e-12) * rhs_norm * 10.0 {
            return Err(KineticsError::Invariant(format!(
                "right-hand side is not microscopic: |P0 rhs| / |rhs| = {:.3e}",
                macro_part / rhs_norm
            )));
        }
        let b = self.project_microscopic(rhs)?;
        let b_norm = l2_norm(&b).max(1e-300);

        let mut x = self.grid.zero_field();
        let mut r = b.clone();
        let mut p = r.clone();
        let mut rr = inner_product(&r, &r)?;
        let mut iterations = 0;
        for it in 0..max_iter {
            iterations = it + 1;
            let ap = self.apply_deflated(&p)?;
            let pap = inner_product(&p, &ap)?;
            if pap <= 0.0 {
                return Err(KineticsError::NoConvergence(format!(
                    "conjugate gradient broke down (p^T A p = {pap:e}); \
                     the deflated operator is not positive on this direction"
                )));
            }
            let alpha = rr / pap;
            x.axpy(alpha, &p)?;
            r.axpy(-alpha, &ap)?;
            // deflation: keep iterates exactly microscopic
            x = self.project_microscopic(&x)?;
            r = self.project_microscopic(&r)?;
            let rr_new = inner_product(&r, &r)?;
            if rr_new.sqrt() <= tol * b_norm {
                return Ok(SolveReport {
                    solution: x,
                    iterations,
                    residual: rr_new.sqrt() / b_norm,
                });
            }
            let beta = rr_new / rr;
            rr = rr_new;
            let mut p_next = r.clone();
            p_next.axpy(beta, &p)?;
            p = p_next;
        }
        let res = inner_product(&r, &r)?.sqrt() / b_norm;
        Err(KineticsError::NoConvergence(format!(
            "constrained solve: residual {res:.3e} after {iterations} iterations"
        )))
    }

    /// Smallest Rayleigh quotient of the deflated operator over the
    /// microscopic subspace, by inverse iteration (three deterministic
    /// starting vectors, minimum taken).
    pub fn coercivity_constant(&self, tol: f64) -> Result<f64> {
        let starts: Vec<DistributionField> = vec![
            self.grid.field_from_fn(|xi| {
                (1.0 + xi[0] + 0.4 * xi[1] * xi[1] - 0.3 * xi[2])
                    * (-0.25 * (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2])).exp()
            }),
            self.grid.field_from_fn(|xi| {
                (xi[0] * xi[1] + 0.2 * xi[2] * xi[2] * xi[2])
                    * (-0.25 * (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2])).exp()
            }),
            self.grid.field_from_fn(|xi| {
                (0.5 + xi[2] * xi[2] - xi[0] * xi[2])
                    * (-0.3 * (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2])).exp()
            }),
        ];
        let mut best = f64::MAX;
        for start in starts {
            let mut v = self.project_microscopic(&start)?;
            let nv = l2_norm(&v);
            if nv == 0.0 {
                continue;
            }
            v.scale(1.0 / nv);
            let mut lambda_prev = f64::MAX;
            for _ in 0..60 {
                let report = self.solve_constrained(&v, 1e-8, 4000)?;
                let mut w = report.solution;
                let wn = l2_norm(&w);
                if wn == 0.0 {
                    break;
                }
                w.scale(1.0 / wn);
                let aw = self.apply_deflated(&w)?;
                let lambda = inner_product(&w, &aw)?;
                v = w;
                if (lambda - lambda_prev).abs() <= tol * lambda.abs().max(1e-300) {
                    lambda_prev = lambda;
                    break;
                }
                lambda_prev = lambda;
            }
            best = best.min(lambda_prev);
        }
        if best == f64::MAX {
            return Err(KineticsError::NoConvergence(
                "coercivity estimate: all starting vectors were macroscopic".into(),
            ));
        }
        Ok(best)
    }

    /// Rayleigh quotients of the deflated operator on the five kernel
    /// basis vectors (zero up to rounding, by construction).
    pub fn kernel_rayleigh_quotients(&self) -> Result<[f64; 5]> {
        let mut out = [0.0; 5];
        for (k, b) in self.kernel_basis.iter().enumerate() {
            let ab = self.apply_deflated(b)?;
            out[k] = inner_product(b, &ab)?;
        }
        Ok(out)
    }

    /// The polynomial-tail sibling operator applied through the cached
    /// matrix: sqrt(mu) K(f / sqrt(mu)), guarded against Maxwellian
    /// underflow (nodes with mu below the floor contribute zero; at the
    /// default extents the floor is never reached).
    pub fn apply_tail_kernel(&self, f: &DistributionField) -> Result<DistributionField> {
        self.check_field(f)?;
        let floor = MU_UNDERFLOW_FLOOR.sqrt();
        let conj: Vec<f64> = f
            .values()
            .iter()
            .zip(self.sqrt_mu.values().iter())
            .map(|(v, s)| if *s > floor { v / s } else { 0.0 })
            .collect();
        let conj_field = DistributionField::from_values(&self.grid, conj)?;
        let mut out = self.apply_kernel(&conj_field)?;
        for (o, s) in out.values_mut().iter_mut().zip(self.sqrt_mu.values().iter()) {
            *o *= s;
        }
        Ok(out)
    }

    /// Entry of the tail-kernel matrix sqrt(mu_i) K_ij / sqrt(mu_j)
    /// (includes the quadrature weight, like `k_matrix`).
    pub fn tail_kernel_entry(&self, i: usize, j: usize) -> f64 {
        let n3 = self.grid.node_count();
        let si = self.sqrt_mu.values()[i];
        let sj = self.sqrt_mu.values()[j];
        if sj <= MU_UNDERFLOW_FLOOR.sqrt() {
            return 0.0;
        }
        self.k_matrix[i * n3 + j] * si / sj
    }

    pub fn sqrt_mu(&self) -> &DistributionField {
        &self.sqrt_mu
    }
}

/// Result of a constrained solve.
#[derive(Debug)]
pub struct SolveReport {
    pub solution: DistributionField,
    pub iterations: usize,
    pub residual: f64,
}

/// Floor below which the Maxwellian is treated as numerically zero when
/// conjugating; 1e-300 keeps 1/sqrt(mu) far from overflow.
pub const MU_UNDERFLOW_FLOOR: f64 = 1e-300;

/// The direct form of the tail kernel operator,
/// Q(f, mu) + Q_gain(mu, f), evaluated by the collision quadrature without
/// any conjugation. Agrees with `apply_tail_kernel` to rounding wherever
/// the Maxwellian is above the floor.
pub fn tail_kernel_direct(
    tables: &CollisionTables,
    f: &DistributionField,
) -> Result<DistributionField> {
    let mu = tables.grid().maxwellian();
    let mut out = tables.apply(f, &mu)?;
    let gain2 = tables.apply_gain(&mu, f)?;
    out.axpy(1.0, &gain2)?;
    Ok(out)
}

/// Conjugated bilinear collision form Gamma(f, g) = mu^{-1/2} Q(sqrt(mu) f, sqrt(mu) g).
pub fn conjugated_bilinear(
    tables: &CollisionTables,
    f: &DistributionField,
    g: &DistributionField,
) -> Result<DistributionField> {
    let grid = tables.grid();
    let sqrt_mu = grid.sqrt_maxwellian();
    let fs = f.pointwise_mul(&sqrt_mu)?;
    let gs = g.pointwise_mul(&sqrt_mu)?;
    let mut out = tables.apply(&fs, &gs)?;
    let floor = MU_UNDERFLOW_FLOOR.sqrt();
    for (o, s) in out.values_mut().iter_mut().zip(sqrt_mu.values().iter()) {
        *o = if *s > floor { *o / s } else { 0.0 };
    }
    Ok(out)
}

/// Orthonormalize {1, xi_1, xi_2, xi_3, |xi|^2 - 3} sqrt(mu) in the
/// quadrature inner product (modified Gram-Schmidt, two passes).
pub fn orthonormal_kernel_basis(grid: &Arc<VelocityGrid>) -> Result<Vec<DistributionField>> {
    let sqrt_mu = grid.sqrt_maxwellian();
    let shapes: Vec<DistributionField> = vec![
        sqrt_mu.clone(),
        grid.field_from_fn(|xi| xi[0]).pointwise_mul(&sqrt_mu)?,
        grid.field_from_fn(|xi| xi[1]).pointwise_mul(&sqrt_mu)?,
        grid.field_from_fn(|xi| xi[2]).pointwise_mul(&sqrt_mu)?,
        grid.field_from_fn(|xi| xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2] - 3.0)
            .pointwise_mul(&sqrt_mu)?,
    ];
    let mut basis: Vec<DistributionField> = Vec::with_capacity(5);
    for mut v in shapes {
        for _ in 0..2 {
            for b in &basis {
                let c = inner_product(&v, b)?;
                v.axpy(-c, b)?;
            }
        }
        let n = l2_norm(&v);
        if n <= 1e-14 {
            return Err(KineticsError::Invariant(
                "collision invariant basis is numerically degenerate".into(),
            ));
        }
        v.scale(1.0 / n);
        basis.push(v);
    }
    Ok(basis)
}

/// Constants of the pointwise kernel bounds; the slack `epsilon` enters the
/// row-sum decay estimate.
#[derive(Debug, Clone, Copy)]
pub struct KernelBoundParams {
    pub c1_tilde: f64,
    pub c2_tilde: f64,
    pub epsilon: f64,
}

impl KernelBoundParams {
    pub fn new(c1_tilde: f64, c2_tilde: f64, epsilon: f64) -> Result<Self> {
        if !(c1_tilde > 0.0 && c2_tilde > 0.0) {
            return Err(KineticsError::Config(
                "kernel bound constants must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(KineticsError::Config(format!(
                "epsilon must lie in [0, 1), got {epsilon}"
            )));
        }
        Ok(Self {
            c1_tilde,
            c2_tilde,
            epsilon,
        })
    }
}

/// Gaussian-product kernel bound
/// k1 = C1 |xi - xi*|^gamma exp(-(|xi|^2 + |xi*|^2)/4).
pub fn kernel_bound_k1(
    xi: [f64; 3],
    xi_star: [f64; 3],
    params: &KernelBoundParams,
    config: &ShearConfig,
) -> f64 {
    let d2 = dist2(xi, xi_star);
    let e2 = norm2(xi) + norm2(xi_star);
    params.c1_tilde * d2.sqrt().powf(config.gamma) * (-0.25 * e2).exp()
}

/// Difference-decay kernel bound
/// k2 = C2 |xi - xi*|^{gamma - 2} exp(-|xi - xi*|^2/8 - (|xi|^2 - |xi*|^2)^2 / (8 |xi - xi*|^2)).
/// Errors on coincident points, where the bound is singular.
pub fn kernel_bound_k2(
    xi: [f64; 3],
    xi_star: [f64; 3],
    params: &KernelBoundParams,
    config: &ShearConfig,
) -> Result<f64> {
    let d2 = dist2(xi, xi_star);
    if d2 == 0.0 {
        return Err(KineticsError::Config(
            "k2 bound is singular at coincident points".into(),
        ));
    }
    let energy_gap = norm2(xi) - norm2(xi_star);
    let expo = -0.125 * d2 - 0.125 * energy_gap * energy_gap / d2;
    Ok(params.c2_tilde * d2.sqrt().powf(config.gamma - 2.0) * expo.exp())
}

/// Polynomially weighted bound k_w = w^l(xi) (k1 + k2) w^{-l}(xi*).
pub fn kernel_bound_weighted(
    xi: [f64; 3],
    xi_star: [f64; 3],
    l: f64,
    params: &KernelBoundParams,
    config: &ShearConfig,
) -> Result<f64> {
    let k = kernel_bound_k1(xi, xi_star, params, config)
        + kernel_bound_k2(xi, xi_star, params, config)?;
    Ok(velocity_weight(xi, l) * k / velocity_weight(xi_star, l))
}

#[inline]
fn norm2(v: [f64; 3]) -> f64 {
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}

#[inline]
fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Scatter `factor * tent_weight * corner_scale[j]` into the row at the
/// eight stencil corners that fall inside the box (zero extension outside).
#[inline(always)]
fn scatter_tri(
    row: &mut [f64],
    corner_scale: &[f64],
    n: usize,
    node: [i64; 3],
    base: [i16; 3],
    frac: [f64; 3],
    factor: f64,
) {
    let fx = frac[0];
    let fy = frac[1];
    let fz = frac[2];
    let wx = [1.0 - fx, fx];
    let wy = [1.0 - fy, fy];
    let wz = [1.0 - fz, fz];
    let jx0 = node[0] + base[0] as i64;
    let jy0 = node[1] + base[1] as i64;
    let jz0 = node[2] + base[2] as i64;
    let nn = n as i64;
    for (dx, &wxv) in wx.iter().enumerate() {
        let jx = jx0 + dx as i64;
        if jx < 0 || jx >= nn {
            continue;
        }
        for (dy, &wyv) in wy.iter().enumerate() {
            let jy = jy0 + dy as i64;
            if jy < 0 || jy >= nn {
                continue;
            }
            let base_j = ((jx as usize) * n + jy as usize) * n;
            let wxy = wxv * wyv * factor;
            for (dz, &wzv) in wz.iter().enumerate() {
                let jz = jz0 + dz as i64;
                if jz < 0 || jz >= nn {
                    continue;
                }
                let j = base_j + jz as usize;
                row[j] += wxy * wzv * corner_scale[j];
            }
        }
    }
}

fn symmetry_defect(k: &[f64], n3: usize) -> f64 {
    let mut skew = 0.0f64;
    let mut full = 0.0f64;
    for i in 0..n3 {
        for j in 0..i {
            let a = k[i * n3 + j];
            let b = k[j * n3 + i];
            skew += (a - b) * (a - b);
            full += a * a + b * b;
        }
        let d = k[i * n3 + i];
        full += d * d;
    }
    if full == 0.0 {
        0.0
    } else {
        (0.5 * skew / full).sqrt()
    }
}

fn fnv1a(data: &[f64]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in data {
        for b in v.to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}
