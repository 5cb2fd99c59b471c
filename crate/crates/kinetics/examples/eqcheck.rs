use usf_kinetics::collision::{AngularQuadrature, CollisionTables, ShearConfig};
use usf_kinetics::grid::{weighted_sup_norm, VelocityGrid};

fn main() {
    for n in [8usize, 12, 16] {
        let grid = VelocityGrid::new(6.0, n).unwrap();
        let cfg = ShearConfig::plane_shear(0.1, 1.0, 1.0, 2.5).unwrap();
        for nc in [4usize, 8, 16] {
            let ang = AngularQuadrature::new(nc, 8).unwrap();
            let t0 = std::time::Instant::now();
            let tables = CollisionTables::build(&grid, &cfg, &ang).unwrap();
            let build_s = t0.elapsed().as_secs_f64();
            let mu = grid.maxwellian();
            let t0 = std::time::Instant::now();
            let q = tables.apply(&mu, &mu).unwrap();
            let apply_s = t0.elapsed().as_secs_f64();
            let nu = tables.collision_frequency();
            let scale = nu
                .values()
                .iter()
                .zip(mu.values().iter())
                .map(|(a, b)| a * b)
                .fold(0.0f64, f64::max);
            let res = weighted_sup_norm(&q, 0.0);
            println!(
                "N={n:2} ncos={nc:2}: residual={res:.3e} scale={scale:.3e} rel={:.3e}  build={build_s:.2}s apply={apply_s:.2}s",
                res / scale
            );
        }
    }
}
