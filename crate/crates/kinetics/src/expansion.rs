//! Second-order expansion machinery for the scaled shear problem: the
//! time-independent profiles behind the first and second correction terms,
//! the heating constants they induce, and the right-hand side of the
//! thermal-speed ODE.
//!
//! Time dependence is factored analytically: the first correction equals
//! beta^{-gamma} times a fixed profile and the second equals beta^{-2 gamma}
//! times another, so the constrained inverse is computed once per
//! configuration and never per time step.

use rayon::prelude::*;

use std::sync::Arc;

use crate::collision::{CollisionTables, ShearConfig};
use crate::error::{KineticsError, Result};
use crate::grid::{inner_product, l2_norm, DistributionField, VelocityGrid};
use crate::linearized::{conjugated_bilinear, LinearizedOperator, MU_UNDERFLOW_FLOOR};

/// Expansion profiles and heating constants for one configuration.
#[derive(Debug)]
pub struct ExpansionCoefficients {
    /// Strictly positive heating constant, (1/3)(source, L^{-1} source).
    pub rho0: f64,
    /// Second heating constant, -(1/3)(source, second profile).
    pub rho1: f64,
    /// First correction profile; the time-dependent correction is
    /// beta^{-gamma} times this field.
    pub first_profile: DistributionField,
    /// Second correction profile; time dependence beta^{-2 gamma}.
    pub second_profile: DistributionField,
    /// Relative macroscopic residual of the second-order source before
    /// projection (checks the analytic orthogonality identity).
    pub source_microscopy_residual: f64,
    /// Conjugate-gradient iterations spent on the two solves.
    pub solver_iterations: (usize, usize),
}

/// The microscopic shear source xi . (A xi) sqrt(mu).
pub fn shear_source(grid: &Arc<VelocityGrid>, config: &ShearConfig) -> DistributionField {
    let sqrt_mu = grid.sqrt_maxwellian();
    grid.field_from_fn(|xi| config.shear_quadratic(xi))
        .pointwise_mul(&sqrt_mu)
        .expect("shared grid")
}

/// First correction profile: minus the constrained inverse of the shear
/// source. Microscopic by construction.
pub fn compute_first_profile(
    cache: &LinearizedOperator,
    config: &ShearConfig,
    tol: f64,
) -> Result<(DistributionField, usize)> {
    let source = shear_source(cache.grid(), config);
    if l2_norm(&source) == 0.0 {
        return Ok((cache.grid().zero_field(), 0));
    }
    let report = cache.solve_constrained(&source, tol, 8000)?;
    let mut profile = report.solution;
    profile.scale(-1.0);
    Ok((profile, report.iterations))
}

/// Heating constant rho0 = (1/3)(source, L^{-1} source)
/// = -(1/3)(source, first profile). Fails if nonpositive while the source
/// is nonzero, which would indicate a broken assembly.
pub fn compute_heating_constant(
    cache: &LinearizedOperator,
    config: &ShearConfig,
    first_profile: &DistributionField,
) -> Result<f64> {
    let source = shear_source(cache.grid(), config);
    if l2_norm(&source) == 0.0 {
        return Ok(0.0);
    }
    let rho0 = -inner_product(&source, first_profile)? / 3.0;
    if !(rho0 > 0.0) {
        return Err(KineticsError::Invariant(format!(
            "heating constant must be positive, got {rho0:e}"
        )));
    }
    Ok(rho0)
}

/// Divergence of a node-sampled vector field by second-order centered
/// differences, one-sided (second order) at the box faces.
pub fn divergence(grid: &Arc<VelocityGrid>, vecs: &[[f64; 3]]) -> DistributionField {
    let n = grid.points_per_axis();
    let h = grid.spacing();
    let inv2h = 1.0 / (2.0 * h);
    let n3 = grid.node_count();
    assert_eq!(vecs.len(), n3);
    let stride = [n * n, n, 1usize];
    let values: Vec<f64> = (0..n3)
        .into_par_iter()
        .map(|i| {
            let iz = i % n;
            let iy = (i / n) % n;
            let ix = i / (n * n);
            let pos = [ix, iy, iz];
            let mut div = 0.0;
            for axis in 0..3 {
                let s = stride[axis];
                let p = pos[axis];
                let d = if p == 0 {
                    (-3.0 * vecs[i][axis] + 4.0 * vecs[i + s][axis] - vecs[i + 2 * s][axis])
                        * inv2h
                } else if p == n - 1 {
                    (3.0 * vecs[i][axis] - 4.0 * vecs[i - s][axis] + vecs[i - 2 * s][axis])
                        * inv2h
                } else {
                    (vecs[i + s][axis] - vecs[i - s][axis]) * inv2h
                };
                div += d;
            }
            div
        })
        .collect();
    DistributionField::from_values(grid, values).expect("matching length")
}

/// Conjugate a field by mu^{-1/2}, zeroing nodes where the Maxwellian is
/// below the underflow floor.
fn conjugate_by_inv_sqrt_mu(grid: &Arc<VelocityGrid>, f: &mut DistributionField) {
    let sqrt_mu = grid.sqrt_maxwellian();
    let floor = MU_UNDERFLOW_FLOOR.sqrt();
    for (v, s) in f.values_mut().iter_mut().zip(sqrt_mu.values().iter()) {
        *v = if *s > floor { *v / *s } else { 0.0 };
    }
}

/// Source of the second-order profile:
/// Gamma(first, first) + rho0 div(xi mu) mu^{-1/2} + div(A xi sqrt(mu) first) mu^{-1/2}.
pub fn second_order_source(
    cache: &LinearizedOperator,
    tables: &CollisionTables,
    config: &ShearConfig,
    first_profile: &DistributionField,
    rho0: f64,
) -> Result<DistributionField> {
    let grid = cache.grid();
    let mut source = conjugated_bilinear(tables, first_profile, first_profile)?;

    // rho0 * div(xi mu) mu^{-1/2}
    let mu = grid.maxwellian();
    let dilation: Vec<[f64; 3]> = grid
        .nodes()
        .zip(mu.values().iter())
        .map(|(xi, m)| [xi[0] * m, xi[1] * m, xi[2] * m])
        .collect();
    let mut dil_term = divergence(grid, &dilation);
    conjugate_by_inv_sqrt_mu(grid, &mut dil_term);
    source.axpy(rho0, &dil_term)?;

    // div(A xi sqrt(mu) first) mu^{-1/2}
    let sqrt_mu = grid.sqrt_maxwellian();
    let weighted: Vec<[f64; 3]> = grid
        .nodes()
        .zip(sqrt_mu.values().iter().zip(first_profile.values().iter()))
        .map(|(xi, (s, g))| {
            let axi = config.deformation_apply(xi);
            let f = s * g;
            [axi[0] * f, axi[1] * f, axi[2] * f]
        })
        .collect();
    let mut shear_term = divergence(grid, &weighted);
    conjugate_by_inv_sqrt_mu(grid, &mut shear_term);
    source.axpy(1.0, &shear_term)?;
    Ok(source)
}

/// Second correction profile: constrained inverse of the second-order
/// source. The source is checked to be microscopic (the orthogonality
/// identity behind the expansion) before projection; a large residual
/// signals an inconsistent rho0.
pub fn compute_second_profile(
    cache: &LinearizedOperator,
    tables: &CollisionTables,
    config: &ShearConfig,
    first_profile: &DistributionField,
    rho0: f64,
    tol: f64,
) -> Result<(DistributionField, f64, usize)> {
    if l2_norm(first_profile) == 0.0 && rho0 == 0.0 {
        return Ok((cache.grid().zero_field(), 0.0, 0));
    }
    let source = second_order_source(cache, tables, config, first_profile, rho0)?;
    let norm = l2_norm(&source).max(1e-300);
    let macro_part = l2_norm(&cache.project_macroscopic(&source)?);
    let residual = macro_part / norm;
    if residual > 0.2 {
        return Err(KineticsError::Invariant(format!(
            "second-order source is far from microscopic (residual {residual:.3e}); \
             the heating constant is inconsistent with the assembled operator"
        )));
    }
    let projected = cache.project_microscopic(&source)?;
    let report = cache.solve_constrained(&projected, tol, 8000)?;
    Ok((report.solution, residual, report.iterations))
}

/// Second heating constant rho1 = -(1/3)(source, second profile).
pub fn compute_heating_correction(
    cache: &LinearizedOperator,
    config: &ShearConfig,
    second_profile: &DistributionField,
) -> Result<f64> {
    let source = shear_source(cache.grid(), config);
    Ok(-inner_product(&source, second_profile)? / 3.0)
}

impl ExpansionCoefficients {
    /// Run the whole pipeline: first profile, rho0, second profile, rho1.
    pub fn compute(
        cache: &LinearizedOperator,
        tables: &CollisionTables,
        config: &ShearConfig,
        tol: f64,
    ) -> Result<Self> {
        let (first_profile, it1) = compute_first_profile(cache, config, tol)?;
        let rho0 = if l2_norm(&first_profile) == 0.0 {
            0.0
        } else {
            compute_heating_constant(cache, config, &first_profile)?
        };
        let (second_profile, source_microscopy_residual, it2) =
            compute_second_profile(cache, tables, config, &first_profile, rho0, tol)?;
        let rho1 = compute_heating_correction(cache, config, &second_profile)?;
        Ok(Self {
            rho0,
            rho1,
            first_profile,
            second_profile,
            source_microscopy_residual,
            solver_iterations: (it1, it2),
        })
    }
}

/// Right-hand side of the thermal-speed equation: returns beta' for
/// beta'/beta = rho0 alpha^2 beta^{-gamma} + rho1 alpha^3 beta^{-2 gamma}
///             - (alpha^{m+1}/3) remainder_integral.
pub fn beta_rate(
    beta: f64,
    config: &ShearConfig,
    rho0: f64,
    rho1: f64,
    remainder_integral: f64,
) -> f64 {
    let a = config.alpha;
    let g = config.gamma;
    let rate = rho0 * a * a * beta.powf(-g) + rho1 * a.powi(3) * beta.powf(-2.0 * g)
        - a.powf(config.expansion_order + 1.0) / 3.0 * remainder_integral;
    beta * rate
}

/// Integrate the beta ODE with the remainder integral forced to zero,
/// classical fourth-order Runge-Kutta with fixed step.
pub fn integrate_beta(
    config: &ShearConfig,
    rho0: f64,
    rho1: f64,
    t_end: f64,
    dt: f64,
) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut beta = 1.0f64;
    out.push((t, beta));
    let f = |b: f64| beta_rate(b, config, rho0, rho1, 0.0);
    while t < t_end - 1e-15 {
        let step = dt.min(t_end - t);
        let k1 = f(beta);
        let k2 = f(beta + 0.5 * step * k1);
        let k3 = f(beta + 0.5 * step * k2);
        let k4 = f(beta + step * k3);
        beta += step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        t += step;
        out.push((t, beta));
    }
    out
}

/// Closed-form solution of the leading-order ODE: beta^gamma = 1 + gamma rho0 alpha^2 t.
pub fn closed_form_beta(gamma: f64, rho0: f64, alpha: f64, t: f64) -> f64 {
    (1.0 + gamma * rho0 * alpha * alpha * t).powf(1.0 / gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::AngularQuadrature;
    use crate::grid::VelocityGrid;

    fn setup(
        gamma: f64,
    ) -> (
        Arc<VelocityGrid>,
        ShearConfig,
        CollisionTables,
        LinearizedOperator,
    ) {
        let grid = VelocityGrid::new(5.0, 6).unwrap();
        let cfg = ShearConfig::plane_shear(0.1, gamma, 1.0, 2.5).unwrap();
        let ang = AngularQuadrature::new(4, 4).unwrap();
        let tables = CollisionTables::build(&grid, &cfg, &ang).unwrap();
        let cache = LinearizedOperator::assemble(&tables).unwrap();
        (grid, cfg, tables, cache)
    }

    #[test]
    fn first_profile_microscopic_and_even() {
        let (_grid, cfg, _tables, cache) = setup(1.0);
        let (g1, _) = compute_first_profile(&cache, &cfg, 1e-10).unwrap();
        let p0 = cache.project_macroscopic(&g1).unwrap();
        assert!(l2_norm(&p0) <= 1e-9 * l2_norm(&g1));
        // the shear source is even under xi -> -xi, and the operator
        // commutes with parity on the symmetric lattice, so the profile
        // is even
        let grid = cache.grid();
        let n = grid.points_per_axis();
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    let i = grid.flat_index(ix, iy, iz);
                    let j = grid.flat_index(n - 1 - ix, n - 1 - iy, n - 1 - iz);
                    let a = g1.values()[i];
                    let b = g1.values()[j];
                    assert!(
                        (a - b).abs() <= 1e-8 * a.abs().max(b.abs()).max(1e-12),
                        "parity defect at ({ix},{iy},{iz}): {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn transposed_deformation_gives_same_profile() {
        // the source depends only on the symmetric part of A
        let (_grid, _cfg, _tables, cache) = setup(1.0);
        let mut a = [[0.0; 3]; 3];
        a[0][1] = 1.0;
        let mut at = [[0.0; 3]; 3];
        at[1][0] = 1.0;
        let cfg_a = ShearConfig::new(a, 0.1, 1.0, 1.0, 2.5).unwrap();
        let cfg_at = ShearConfig::new(at, 0.1, 1.0, 1.0, 2.5).unwrap();
        let (g_a, _) = compute_first_profile(&cache, &cfg_a, 1e-10).unwrap();
        let (g_at, _) = compute_first_profile(&cache, &cfg_at, 1e-10).unwrap();
        let mut d = g_a.clone();
        d.axpy(-1.0, &g_at).unwrap();
        assert!(l2_norm(&d) <= 1e-12 * l2_norm(&g_a).max(1e-300));
    }

    #[test]
    fn heating_constant_positive_and_quadratic_in_deformation() {
        let (_grid, cfg, _tables, cache) = setup(1.0);
        let (g1, _) = compute_first_profile(&cache, &cfg, 1e-10).unwrap();
        let rho0 = compute_heating_constant(&cache, &cfg, &g1).unwrap();
        assert!(rho0 > 0.0);

        // doubling A quadruples rho0 (bilinear in the source)
        let mut a2 = [[0.0; 3]; 3];
        a2[0][1] = 2.0;
        let cfg2 = ShearConfig::new(a2, 0.1, 1.0, 1.0, 2.5).unwrap();
        let (g1_2, _) = compute_first_profile(&cache, &cfg2, 1e-10).unwrap();
        let rho0_2 = compute_heating_constant(&cache, &cfg2, &g1_2).unwrap();
        assert!(
            (rho0_2 / rho0 - 4.0).abs() < 1e-6,
            "scaling ratio {}",
            rho0_2 / rho0
        );
    }

    #[test]
    fn heating_constant_self_adjoint_consistency() {
        // (1/3)(source, x) equals (1/3)(x, L x) for x = L^{-1} source
        let (_grid, cfg, _tables, cache) = setup(1.0);
        let (g1, _) = compute_first_profile(&cache, &cfg, 1e-10).unwrap();
        let rho0 = compute_heating_constant(&cache, &cfg, &g1).unwrap();
        let lx = cache.apply_deflated(&g1).unwrap();
        let alt = inner_product(&g1, &lx).unwrap() / 3.0;
        assert!(
            (alt - rho0).abs() <= 1e-6 * rho0,
            "rho0 = {rho0}, quadratic-form value = {alt}"
        );
    }

    #[test]
    fn zero_deformation_gives_zero_everything() {
        // alpha must stay positive, so emulate A = 0 through the raw matrix
        let (_grid, _cfg, tables, cache) = setup(1.0);
        let cfg0 = ShearConfig::new([[0.0; 3]; 3], 0.1, 1.0, 1.0, 2.5).unwrap();
        let coeffs = ExpansionCoefficients::compute(&cache, &tables, &cfg0, 1e-10).unwrap();
        assert_eq!(coeffs.rho0, 0.0);
        assert_eq!(coeffs.rho1, 0.0);
        assert_eq!(l2_norm(&coeffs.first_profile), 0.0);
        assert_eq!(l2_norm(&coeffs.second_profile), 0.0);
    }

    #[test]
    fn second_profile_pipeline() {
        let (_grid, cfg, tables, cache) = setup(1.0);
        let coeffs = ExpansionCoefficients::compute(&cache, &tables, &cfg, 1e-10).unwrap();
        assert!(coeffs.rho0 > 0.0);
        assert!(coeffs.rho1.is_finite());
        // the second-order source obeys the orthogonality identity up to
        // quadrature error
        assert!(
            coeffs.source_microscopy_residual < 0.1,
            "microscopy residual {}",
            coeffs.source_microscopy_residual
        );
        // profile is microscopic by the constrained solve
        let p0 = cache
            .project_macroscopic(&coeffs.second_profile)
            .unwrap();
        assert!(l2_norm(&p0) <= 1e-9 * l2_norm(&coeffs.second_profile).max(1e-300));
    }

    #[test]
    fn divergence_of_linear_field_is_exact() {
        let grid = VelocityGrid::new(4.0, 8).unwrap();
        // V = (2x, -y, 3z): div = 4 everywhere, exact for the second-order
        // scheme including the one-sided closure
        let vecs: Vec<[f64; 3]> = grid
            .nodes()
            .map(|xi| [2.0 * xi[0], -xi[1], 3.0 * xi[2]])
            .collect();
        let div = divergence(&grid, &vecs);
        for v in div.values() {
            assert!((v - 4.0).abs() < 1e-11, "div = {v}");
        }
    }

    #[test]
    fn beta_rate_and_closed_form() {
        let cfg = ShearConfig::plane_shear(0.1, 1.0, 1.0, 2.5).unwrap();
        // beta = 1, rho1 = 0, remainder 0: rate = rho0 alpha^2
        let rho0 = 2.0;
        let rate = beta_rate(1.0, &cfg, rho0, 0.0, 0.0);
        assert!((rate - rho0 * 0.01).abs() < 1e-15);

        // gamma = 1: beta = 1 + rho0 alpha^2 t, so beta(100) = 3
        let traj = integrate_beta(&cfg, 2.0, 0.0, 100.0, 0.01);
        let (t_end, b_end) = *traj.last().unwrap();
        assert!((t_end - 100.0).abs() < 1e-9);
        assert!((b_end - 3.0).abs() < 1e-8, "beta(100) = {b_end}");

        // gamma = 0.5: beta = (1 + 0.5 rho0 alpha^2 t)^2
        let cfg_half = ShearConfig::plane_shear(0.1, 0.5, 1.0, 2.5).unwrap();
        let traj = integrate_beta(&cfg_half, 2.0, 0.0, 100.0, 0.01);
        let (_, b_end) = *traj.last().unwrap();
        let expect = closed_form_beta(0.5, 2.0, 0.1, 100.0);
        assert!(
            (b_end - expect).abs() < 1e-8 * expect,
            "beta = {b_end}, closed form {expect}"
        );
    }

    #[test]
    fn beta_ode_correction_term_stays_cubic() {
        // with rho1 included the deviation from the leading closed form is
        // bounded by the cubic correction scale
        let cfg = ShearConfig::plane_shear(0.1, 1.0, 1.0, 2.5).unwrap();
        let rho0 = 1.0;
        let rho1 = 0.3;
        let t_end = 50.0;
        let traj = integrate_beta(&cfg, rho0, rho1, t_end, 0.005);
        for &(t, b) in traj.iter() {
            let lead = closed_form_beta(1.0, rho0, 0.1, t);
            let bound = 2.0 * rho1.abs() * 0.1f64.powi(3) * t + 1e-9;
            assert!(
                (b - lead).abs() <= bound,
                "t = {t}: |beta - closed| = {} > {bound}",
                (b - lead).abs()
            );
        }
    }
}
