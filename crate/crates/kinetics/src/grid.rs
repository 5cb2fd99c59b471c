//! Velocity-space discretization: the truncated uniform lattice, midpoint
//! quadrature, the reference Maxwellian, moments and the weighted norms used
//! by every other module.
//!
//! The grid covers the cube [-R, R]^3 with N nodes per axis placed at cell
//! midpoints, xi_k = -R + (i + 1/2) h, h = 2R/N. N is required to be even so
//! that xi = 0 is never a node and the lattice is exactly symmetric under
//! xi -> -xi.

use std::sync::Arc;

use crate::error::{KineticsError, Result};

/// Inverse of (2 pi)^{3/2}, the Maxwellian normalization.
pub const MAXWELLIAN_PEAK: f64 = 0.063_493_635_934_240_97;

/// Uniform midpoint lattice on [-R, R]^3 with per-node quadrature weight h^3.
#[derive(Debug)]
pub struct VelocityGrid {
    extent: f64,
    points_per_axis: usize,
    spacing: f64,
}

impl VelocityGrid {
    /// Build the lattice. Rejects nonpositive extent, N < 4 and odd N
    /// (odd N would place a node at the origin, where the singular kernel
    /// bounds are not defined).
    pub fn new(extent: f64, points_per_axis: usize) -> Result<Arc<Self>> {
        if !(extent > 0.0) || !extent.is_finite() {
            return Err(KineticsError::Config(format!(
                "grid extent must be positive and finite, got {extent}"
            )));
        }
        if points_per_axis < 4 {
            return Err(KineticsError::Config(format!(
                "points_per_axis must be >= 4, got {points_per_axis}"
            )));
        }
        if points_per_axis % 2 != 0 {
            return Err(KineticsError::Config(format!(
                "points_per_axis must be even so the origin is not a node, got {points_per_axis}"
            )));
        }
        let spacing = 2.0 * extent / points_per_axis as f64;
        Ok(Arc::new(Self {
            extent,
            points_per_axis,
            spacing,
        }))
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Quadrature weight carried by each node (midpoint rule).
    pub fn cell_volume(&self) -> f64 {
        self.spacing * self.spacing * self.spacing
    }

    pub fn node_count(&self) -> usize {
        let n = self.points_per_axis;
        n * n * n
    }

    /// Coordinate of the i-th node along one axis.
    #[inline]
    pub fn axis_coord(&self, i: usize) -> f64 {
        -self.extent + (i as f64 + 0.5) * self.spacing
    }

    /// Flat index of the node (ix, iy, iz); z varies fastest.
    #[inline]
    pub fn flat_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        let n = self.points_per_axis;
        (ix * n + iy) * n + iz
    }

    /// Node position from its flat index.
    #[inline]
    pub fn node(&self, idx: usize) -> [f64; 3] {
        let n = self.points_per_axis;
        let iz = idx % n;
        let iy = (idx / n) % n;
        let ix = idx / (n * n);
        [
            self.axis_coord(ix),
            self.axis_coord(iy),
            self.axis_coord(iz),
        ]
    }

    /// Iterator over all node positions in flat-index order.
    pub fn nodes(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        (0..self.node_count()).map(move |i| self.node(i))
    }

    /// True when two handles describe the same lattice.
    pub fn same_lattice(&self, other: &Self) -> bool {
        self.extent == other.extent && self.points_per_axis == other.points_per_axis
    }

    /// The reference Maxwellian mu(xi) = (2 pi)^{-3/2} exp(-|xi|^2 / 2)
    /// sampled on the lattice.
    pub fn maxwellian(self: &Arc<Self>) -> DistributionField {
        let values = self
            .nodes()
            .map(|xi| {
                let q = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
                MAXWELLIAN_PEAK * (-0.5 * q).exp()
            })
            .collect();
        DistributionField {
            grid: Arc::clone(self),
            values,
        }
    }

    /// Square root of the Maxwellian, the weight conjugating L and Gamma.
    pub fn sqrt_maxwellian(self: &Arc<Self>) -> DistributionField {
        let values = self
            .nodes()
            .map(|xi| {
                let q = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
                (MAXWELLIAN_PEAK * (-0.5 * q).exp()).sqrt()
            })
            .collect();
        DistributionField {
            grid: Arc::clone(self),
            values,
        }
    }

    /// Field of zeros on this grid.
    pub fn zero_field(self: &Arc<Self>) -> DistributionField {
        DistributionField {
            grid: Arc::clone(self),
            values: vec![0.0; self.node_count()],
        }
    }

    /// Field built from a function of the node position.
    pub fn field_from_fn(self: &Arc<Self>, f: impl FnMut([f64; 3]) -> f64) -> DistributionField {
        let values = self.nodes().map(f).collect();
        DistributionField {
            grid: Arc::clone(self),
            values,
        }
    }
}

/// Real-valued function sampled on the lattice: houses distribution
/// functions, expansion profiles and operator outputs alike.
#[derive(Debug, Clone)]
pub struct DistributionField {
    grid: Arc<VelocityGrid>,
    values: Vec<f64>,
}

impl DistributionField {
    pub fn from_values(grid: &Arc<VelocityGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(KineticsError::Config(format!(
                "field has {} values but the grid has {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        Ok(Self {
            grid: Arc::clone(grid),
            values,
        })
    }

    pub fn grid(&self) -> &Arc<VelocityGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// self + a * other, on a shared grid.
    pub fn axpy(&mut self, a: f64, other: &DistributionField) -> Result<()> {
        check_shared_grid(self, other)?;
        for (v, o) in self.values.iter_mut().zip(other.values.iter()) {
            *v += a * o;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for v in self.values.iter_mut() {
            *v *= a;
        }
    }

    /// Pointwise product with another field.
    pub fn pointwise_mul(&self, other: &DistributionField) -> Result<DistributionField> {
        check_shared_grid(self, other)?;
        let values = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(DistributionField {
            grid: Arc::clone(&self.grid),
            values,
        })
    }
}

pub(crate) fn check_shared_grid(a: &DistributionField, b: &DistributionField) -> Result<()> {
    if !a.grid.same_lattice(&b.grid) {
        return Err(KineticsError::GridMismatch(format!(
            "fields live on different lattices: (R={}, N={}) vs (R={}, N={})",
            a.grid.extent(),
            a.grid.points_per_axis(),
            b.grid.extent(),
            b.grid.points_per_axis()
        )));
    }
    Ok(())
}

/// Mass, bulk velocity and temperature of a sampled distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentSet {
    pub rho: f64,
    pub u: [f64; 3],
    pub theta: f64,
}

/// Discrete moments with the midpoint quadrature:
/// rho = sum w F, rho u = sum w xi F, rho theta = (1/3) sum w |xi - u|^2 F.
/// Fails when the mass is nonpositive (degenerate field).
pub fn moments(field: &DistributionField) -> Result<MomentSet> {
    let grid = field.grid();
    let w = grid.cell_volume();
    let mut rho = 0.0;
    let mut mom = [0.0f64; 3];
    for (idx, v) in field.values().iter().enumerate() {
        let xi = grid.node(idx);
        rho += v;
        mom[0] += xi[0] * v;
        mom[1] += xi[1] * v;
        mom[2] += xi[2] * v;
    }
    rho *= w;
    if !(rho > 0.0) {
        return Err(KineticsError::Invariant(format!(
            "nonpositive discrete mass {rho}"
        )));
    }
    let u = [mom[0] * w / rho, mom[1] * w / rho, mom[2] * w / rho];
    let mut second = 0.0;
    for (idx, v) in field.values().iter().enumerate() {
        let xi = grid.node(idx);
        let dx = xi[0] - u[0];
        let dy = xi[1] - u[1];
        let dz = xi[2] - u[2];
        second += (dx * dx + dy * dy + dz * dz) * v;
    }
    let theta = second * w / (3.0 * rho);
    Ok(MomentSet { rho, u, theta })
}

/// Raw conserved quantities (mass, momentum, energy = sum w |xi|^2 F),
/// without the degenerate-mass check. Used for defect tracking.
pub fn conserved_quantities(field: &DistributionField) -> (f64, [f64; 3], f64) {
    let grid = field.grid();
    let w = grid.cell_volume();
    let mut mass = 0.0;
    let mut mom = [0.0f64; 3];
    let mut energy = 0.0;
    for (idx, v) in field.values().iter().enumerate() {
        let xi = grid.node(idx);
        mass += v;
        mom[0] += xi[0] * v;
        mom[1] += xi[1] * v;
        mom[2] += xi[2] * v;
        energy += (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]) * v;
    }
    (mass * w, [mom[0] * w, mom[1] * w, mom[2] * w], energy * w)
}

/// Polynomial velocity weight (1 + |xi|^2)^l.
#[inline]
pub fn velocity_weight(xi: [f64; 3], l: f64) -> f64 {
    let q = 1.0 + xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
    if l == 0.0 {
        1.0
    } else {
        q.powf(l)
    }
}

/// max over nodes of (1 + |xi|^2)^l |f(xi)|.
pub fn weighted_sup_norm(field: &DistributionField, l: f64) -> f64 {
    let grid = field.grid();
    let mut best = 0.0f64;
    for (idx, v) in field.values().iter().enumerate() {
        let w = velocity_weight(grid.node(idx), l);
        let m = w * v.abs();
        if m > best {
            best = m;
        }
    }
    best
}

/// L^2 norm with the quadrature weights.
pub fn l2_norm(field: &DistributionField) -> f64 {
    let w = field.grid().cell_volume();
    let s: f64 = field.values().iter().map(|v| v * v).sum();
    (w * s).sqrt()
}

/// Collision-frequency weighted L^2 norm, ||nu^{1/2} f||.
pub fn l2_norm_nu(field: &DistributionField, nu: &DistributionField) -> Result<f64> {
    check_shared_grid(field, nu)?;
    let w = field.grid().cell_volume();
    let s: f64 = field
        .values()
        .iter()
        .zip(nu.values().iter())
        .map(|(v, n)| n * v * v)
        .sum();
    Ok((w * s).sqrt())
}

/// Quadrature inner product sum w f g.
pub fn inner_product(f: &DistributionField, g: &DistributionField) -> Result<f64> {
    check_shared_grid(f, g)?;
    let w = f.grid().cell_volume();
    let s: f64 = f
        .values()
        .iter()
        .zip(g.values().iter())
        .map(|(a, b)| a * b)
        .sum();
    Ok(w * s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        assert!(VelocityGrid::new(-1.0, 8).is_err());
        assert!(VelocityGrid::new(6.0, 2).is_err());
        assert!(VelocityGrid::new(6.0, 7).is_err());
        assert!(VelocityGrid::new(6.0, 8).is_ok());
    }

    #[test]
    fn lattice_geometry() {
        let grid = VelocityGrid::new(6.0, 16).unwrap();
        assert_eq!(grid.node_count(), 4096);
        // total quadrature weight is the box volume (2R)^3
        let total = grid.cell_volume() * grid.node_count() as f64;
        assert!((total - 1728.0).abs() < 1e-9);
        // no node at the origin, componentwise bound |xi_k| <= R
        for xi in grid.nodes() {
            assert!(xi.iter().any(|c| c.abs() > 1e-12));
            assert!(xi.iter().all(|c| c.abs() <= 6.0));
        }
    }

    #[test]
    fn negation_symmetry() {
        let grid = VelocityGrid::new(4.0, 6).unwrap();
        // every node has its mirror on the lattice
        let nodes: Vec<[f64; 3]> = grid.nodes().collect();
        for xi in &nodes {
            let found = nodes.iter().any(|eta| {
                (eta[0] + xi[0]).abs() < 1e-12
                    && (eta[1] + xi[1]).abs() < 1e-12
                    && (eta[2] + xi[2]).abs() < 1e-12
            });
            assert!(found);
        }
    }

    #[test]
    fn maxwellian_mass_energy() {
        let grid = VelocityGrid::new(6.0, 16).unwrap();
        let mu = grid.maxwellian();
        assert!((mu.values()[0] - mu.values()[grid.node_count() - 1]).abs() < 1e-18);
        let m = moments(&mu).unwrap();
        // discrete mass within 1e-3 of the exact Gaussian integral (= 1 up to
        // a 1e-9 truncation term at R = 6)
        assert!((m.rho - 1.0).abs() < 1e-3, "rho = {}", m.rho);
        assert!(m.u.iter().all(|c| c.abs() < 1e-12));
        // second moment of the standard Gaussian: theta = 1 within 1e-2
        assert!((m.theta - 1.0).abs() < 1e-2, "theta = {}", m.theta);
    }

    #[test]
    fn maxwellian_peak_value() {
        let grid = VelocityGrid::new(6.0, 16).unwrap();
        let mu = grid.maxwellian();
        // the sup of mu is attained at the nodes closest to the origin and
        // the weight-0 sup norm is below the analytic peak
        let sup = weighted_sup_norm(&mu, 0.0);
        assert!(sup <= MAXWELLIAN_PEAK);
        assert!(sup > 0.9 * MAXWELLIAN_PEAK);
    }

    #[test]
    fn moment_linearity_and_shift() {
        let grid = VelocityGrid::new(6.0, 16).unwrap();
        let mut two_mu = grid.maxwellian();
        two_mu.scale(2.0);
        let m = moments(&two_mu).unwrap();
        assert!((m.rho - 2.0).abs() < 2e-3);
        assert!((m.theta - 1.0).abs() < 1e-2);

        // shifted Maxwellian mu(xi - a): mean a, unit temperature
        let a = [0.5, 0.0, 0.0];
        let shifted = grid.field_from_fn(|xi| {
            let dx = xi[0] - a[0];
            let dy = xi[1] - a[1];
            let dz = xi[2] - a[2];
            MAXWELLIAN_PEAK * (-0.5 * (dx * dx + dy * dy + dz * dz)).exp()
        });
        let m = moments(&shifted).unwrap();
        assert!((m.u[0] - 0.5).abs() < 1e-3, "u = {:?}", m.u);
        assert!(m.u[1].abs() < 1e-12 && m.u[2].abs() < 1e-12);
        assert!((m.theta - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_degenerate_field() {
        let grid = VelocityGrid::new(6.0, 8).unwrap();
        let zero = grid.zero_field();
        assert!(moments(&zero).is_err());
    }

    #[test]
    fn norms_and_inner_products() {
        let grid = VelocityGrid::new(6.0, 16).unwrap();
        let sqrt_mu = grid.sqrt_maxwellian();
        // (sqrt mu, sqrt mu) = integral of mu = 1
        let ip = inner_product(&sqrt_mu, &sqrt_mu).unwrap();
        assert!((ip - 1.0).abs() < 1e-3, "ip = {ip}");
        // odd integrand cancels exactly on the symmetric lattice
        let odd = grid.field_from_fn(|xi| xi[0]);
        let odd_pair = odd.pointwise_mul(&sqrt_mu).unwrap();
        let z = inner_product(&sqrt_mu, &odd_pair).unwrap();
        assert!(z.abs() < 1e-12 * ip.abs().max(1.0));
        // norm consistency
        let n = l2_norm(&sqrt_mu);
        assert!((n * n - ip).abs() < 1e-13);
    }

    #[test]
    fn grid_mismatch_detected() {
        let g1 = VelocityGrid::new(6.0, 8).unwrap();
        let g2 = VelocityGrid::new(6.0, 10).unwrap();
        let f1 = g1.maxwellian();
        let f2 = g2.maxwellian();
        assert!(inner_product(&f1, &f2).is_err());
    }

    #[test]
    fn quadrature_exact_for_linear_polynomials() {
        // midpoint sums of degree <= 1 polynomials equal the exact box
        // integrals to machine precision
        let grid = VelocityGrid::new(3.0, 6).unwrap();
        let w = grid.cell_volume();
        let vol = 216.0; // (2R)^3
        let f = grid.field_from_fn(|xi| 2.0 + 3.0 * xi[0] - xi[2]);
        let sum: f64 = f.values().iter().sum::<f64>() * w;
        assert!((sum - 2.0 * vol).abs() < 1e-10 * vol);
    }
}
