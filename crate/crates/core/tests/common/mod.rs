//! Shared fixtures for the integration tests.
#![allow(dead_code)] // each test binary uses its own subset

use octrl_core::fem::{assemble_operators, nodal_sample, TriMesh};
use octrl_core::prox::BoxBounds;
use octrl_core::solver::ProblemSpec;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Test problem used throughout: alpha 0.1, beta 0.01, u in [-2, 2],
/// y_d = 10 sin(pi x) sin(pi y), y_r = 0, c0 = 0.
pub fn standard_spec(n_side: usize) -> ProblemSpec {
    let mesh = TriMesh::unit_square(n_side).unwrap();
    let ops = assemble_operators(&mesh, 0.0).unwrap();
    let yd = nodal_sample(&mesh, |x, y| {
        10.0 * (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin()
    })
    .unwrap();
    let yr = vec![0.0; mesh.n_dof()];
    ProblemSpec::new(
        mesh,
        ops,
        0.1,
        0.01,
        BoxBounds::new(-2.0, 2.0).unwrap(),
        yd,
        yr,
    )
    .unwrap()
}

/// Same data with an overridden L1 weight.
pub fn spec_with_beta(n_side: usize, beta: f64) -> ProblemSpec {
    let mesh = TriMesh::unit_square(n_side).unwrap();
    let ops = assemble_operators(&mesh, 0.0).unwrap();
    let yd = nodal_sample(&mesh, |x, y| {
        10.0 * (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin()
    })
    .unwrap();
    let yr = vec![0.0; mesh.n_dof()];
    ProblemSpec::new(
        mesh,
        ops,
        0.1,
        beta,
        BoxBounds::new(-2.0, 2.0).unwrap(),
        yd,
        yr,
    )
    .unwrap()
}

pub fn seeded_vec(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}
