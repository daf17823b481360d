//! Acceptance gate: one numbered criterion per test, each printing a single
//! "criterion NN: PASS/FAIL - ..." line (visible with --nocapture; failing
//! tests always show theirs in the captured output).

use octrl_core::fem::{assemble_operators, nodal_sample, TriMesh};
use octrl_core::oracle::{beta_max, enumerate_solve};
use octrl_core::primal::{primal_objective, recover_control};
use octrl_core::prox::{moreau_residual, BoxBounds};
use octrl_core::solver::{outer_cg_tol, run, ProblemSpec, SolverConfig};
use octrl_core::sparse::{dot, norm2};
use octrl_harness::config::Config;
use octrl_harness::studies;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::sync::OnceLock;
use std::time::Instant;

/// Standard test problem, with extra TOML lines appended inside [problem]
/// unless the extra text opens its own section.
fn standard_config(extra: &str) -> Config {
    let text = format!(
        "[problem]\n\
         alpha = 0.1\n\
         beta = 0.01\n\
         a = -2.0\n\
         b = 2.0\n\
         y_d = \"10*sin(pi*x)*sin(pi*y)\"\n\
         {extra}"
    );
    Config::from_toml(&text).expect("standard config")
}

fn standard_spec(n_side: usize) -> ProblemSpec {
    standard_config(&format!("n_side = {n_side}\n"))
        .build_spec(n_side)
        .expect("standard spec")
}

fn verdict(number: u32, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {number:02}: {tag} - {detail}");
    assert!(pass, "criterion {number:02} failed: {detail}");
}

struct Timed<T> {
    value: T,
    seconds: f64,
}

/// Rate study on n_side = 16, shared by criteria 2 and 3.
fn rate16() -> &'static Timed<studies::RateStudy> {
    static CELL: OnceLock<Timed<studies::RateStudy>> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = standard_config("n_side = 16\n");
        let start = Instant::now();
        let value = studies::rate_study(&cfg).expect("rate study on n_side = 16");
        Timed {
            value,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

/// Mesh study on {8, 16, 32, 64} at kkt_tol 1e-6, shared state of criterion 4.
fn mesh_study_8_to_64() -> &'static Timed<studies::MeshStudy> {
    static CELL: OnceLock<Timed<studies::MeshStudy>> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = standard_config("[solver]\nkkt_tol = 1e-6\n[study]\nmeshes = [8, 16, 32, 64]\n");
        let start = Instant::now();
        let value = studies::mesh_study(&cfg).expect("mesh study on {8, 16, 32, 64}");
        Timed {
            value,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_01_solver_matches_enumeration_oracle() {
    let start = Instant::now();
    let spec = standard_spec(3);
    let report = run(
        &spec,
        &SolverConfig {
            kkt_tol: 1e-10,
            max_iter: 20_000,
            ..Default::default()
        },
    )
    .unwrap();
    let pair = recover_control(&spec, &report.final_z).unwrap();
    let j_solver = primal_objective(&spec, &pair.u_hat).unwrap();
    let oracle = enumerate_solve(&spec).unwrap();
    let du: Vec<f64> = pair
        .u_hat
        .iter()
        .zip(&oracle.u_star)
        .map(|(a, b)| a - b)
        .collect();
    let delta_u = norm2(&du);
    let delta_j = (j_solver - oracle.objective).abs();
    let seconds = start.elapsed().as_secs_f64();

    let pass = report.converged && delta_u <= 1e-8 && delta_j <= 1e-9 && seconds < 5.0;
    verdict(
        1,
        pass,
        &format!(
            "n_side 3 at kkt_tol 1e-10: |du|_2 = {delta_u:.3e} (<= 1e-8), \
             |dJ| = {delta_j:.3e} (<= 1e-9), {seconds:.2}s (< 5s)"
        ),
    );
}

#[test]
fn criterion_02_objective_gap_stays_under_momentum_envelope() {
    let shared = rate16();
    let study = &shared.value;
    // Pure float-rounding slack on the comparison, nothing more.
    let slack = 1.0 + 1e-9;
    let within = study
        .rows
        .iter()
        .filter(|r| r.phi_gap <= r.bound * slack)
        .count();
    let mut worst = f64::NEG_INFINITY;
    let mut worst_k = 0;
    for row in &study.rows {
        let ratio = row.phi_gap / row.bound;
        if ratio > worst {
            worst = ratio;
            worst_k = row.k;
        }
    }
    let all_rows = !study.rows.is_empty() && study.rows.len() == study.k_final;
    let pass = all_rows && within == study.rows.len() && shared.seconds < 60.0;
    verdict(
        2,
        pass,
        &format!(
            "n_side 16: phi gap <= 4*tau/(k+1)^2 on {within} of {} iterations, \
             worst ratio {worst:.4} at k = {worst_k}, tau = {:.6e}, {:.1}s (< 60s)",
            study.k_final, study.tau, shared.seconds
        ),
    );
}

#[test]
fn criterion_03_rate_fits_and_bounded_products() {
    let study = &rate16().value;
    let half = study.k_final / 2;
    let slope = study.slope.unwrap_or(f64::INFINITY);
    let slope_ok = slope <= -1.5;
    let kz_ok = study.sup_k_z_dist.is_finite() && study.argmax_k_z_dist <= half;
    let su_ok = study.sup_sqrt_k_u_gap.is_finite() && study.argmax_sqrt_k_u_gap <= half;
    let pass = slope_ok && kz_ok && su_ok;
    verdict(
        3,
        pass,
        &format!(
            "n_side 16: phi-gap slope {slope:.3} over {} fit rows (<= -1.5), \
             sup k*z_dist = {:.4e} at k = {} (<= {half}), \
             sup sqrt(k)*u_gap = {:.4e} at k = {} (<= {half})",
            study.fit_rows,
            study.sup_k_z_dist,
            study.argmax_k_z_dist,
            study.sup_sqrt_k_u_gap,
            study.argmax_sqrt_k_u_gap
        ),
    );
}

#[test]
fn criterion_04_mesh_independent_iteration_counts() {
    let shared = mesh_study_8_to_64();
    let study = &shared.value;
    let iters: Vec<usize> = study.rows.iter().map(|r| r.iterations).collect();
    let keps: Vec<usize> = study.rows.iter().map(|r| r.k_eps).collect();

    let spread = |xs: &[usize]| -> (usize, f64, bool) {
        let min = *xs.iter().min().unwrap();
        let max = *xs.iter().max().unwrap();
        let allowed = 3.0f64.max(0.2 * min as f64);
        (max - min, allowed, (max - min) as f64 <= allowed)
    };
    let (iter_spread, iter_allowed, iter_ok) = spread(&iters);
    let (keps_spread, keps_allowed, keps_ok) = spread(&keps);
    let time_ok = shared.seconds < 600.0;

    let pass = iter_ok && keps_ok && time_ok;
    verdict(
        4,
        pass,
        &format!(
            "meshes {{8,16,32,64}} at kkt_tol 1e-6: iterations {iters:?} spread {iter_spread} \
             (allowed {iter_allowed:.1}), k_h(eps = {:.1e}) {keps:?} spread {keps_spread} \
             (allowed {keps_allowed:.1}), {:.0}s (< 600s)",
            study.epsilon, shared.seconds
        ),
    );
}

#[test]
fn criterion_05_tau_differences_contract_under_refinement() {
    let cfg = standard_config("[study]\nmeshes = [16, 32, 64]\n");
    let rows = studies::tau_study(&cfg).expect("tau study on {16, 32, 64}");
    let d1 = rows[1].diff.unwrap().abs();
    let d2 = rows[2].diff.unwrap().abs();
    let pass = d1 >= 1.5 * d2;
    verdict(
        5,
        pass,
        &format!(
            "tau at h = 1/16, 1/32, 1/64: [{:.6e}, {:.6e}, {:.6e}]; \
             |diff coarse| = {d1:.3e} >= 1.5 * |diff fine| = {:.3e}",
            rows[0].tau,
            rows[1].tau,
            rows[2].tau,
            1.5 * d2
        ),
    );
}

#[test]
fn criterion_06_operator_identities_and_norm_sandwich() {
    let rel_ok = |got: f64, want: f64| (got - want).abs() <= 1e-14 * want.abs();
    let mut pass = true;
    let mut worst_lo = f64::INFINITY;
    let mut worst_hi = f64::NEG_INFINITY;

    for &n_side in &[8usize, 16, 32, 64] {
        let spec = standard_spec(n_side);
        let mesh = &spec.mesh;
        let k = &spec.ops.stiffness;
        let m = &spec.ops.mass;
        let w = &spec.ops.lumped;
        pass &= k.max_asymmetry() == 0.0 && m.max_asymmetry() == 0.0;

        // Quadratic-form sandwich on 10^4 seeded random vectors per mesh.
        let mut rng = ChaCha8Rng::seed_from_u64(60_000 + n_side as u64);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..spec.n_dof()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let qm = dot(&x, &m.matvec(&x));
            let qw: f64 = x.iter().zip(w).map(|(xi, wi)| wi * xi * xi).sum();
            let ratio = qw / qm;
            worst_lo = worst_lo.min(ratio);
            worst_hi = worst_hi.max(ratio);
        }

        // Stencil of the interior node at the domain center (full neighborhood).
        let h = mesh.h();
        let center = (0..mesh.n_dof())
            .min_by(|&a, &b| {
                let d = |i: usize| {
                    let [x, y] = mesh.dof_xy(i);
                    (x - 0.5).powi(2) + (y - 0.5).powi(2)
                };
                d(a).partial_cmp(&d(b)).unwrap()
            })
            .unwrap();
        pass &= rel_ok(k.get(center, center), 4.0);
        pass &= rel_ok(m.get(center, center), h * h / 2.0);
        pass &= rel_ok(w[center], h * h);
        for other in 0..mesh.n_dof() {
            if other == center {
                continue;
            }
            let [cx, cy] = mesh.dof_xy(center);
            let [ox, oy] = mesh.dof_xy(other);
            let dx = ((ox - cx) / h).round() as i64;
            let dy = ((oy - cy) / h).round() as i64;
            if dx.abs() > 1 || dy.abs() > 1 {
                continue;
            }
            match (dx, dy) {
                (0, 0) => unreachable!(),
                (1, 0) | (-1, 0) | (0, 1) | (0, -1) => {
                    pass &= (k.get(center, other) + 1.0).abs() <= 1e-14;
                    pass &= rel_ok(m.get(center, other), h * h / 12.0);
                }
                (1, 1) | (-1, -1) => {
                    // Right-triangle pattern: mass couples along the mesh
                    // diagonal, the stiffness entry cancels exactly.
                    pass &= k.get(center, other) == 0.0;
                    pass &= rel_ok(m.get(center, other), h * h / 12.0);
                }
                _ => {
                    pass &= k.get(center, other) == 0.0 && m.get(center, other) == 0.0;
                }
            }
        }
    }

    pass &= worst_lo >= 1.0 - 1e-12 && worst_hi <= 4.0 + 1e-12;
    verdict(
        6,
        pass,
        &format!(
            "meshes {{8,16,32,64}}: K, M exactly symmetric; stencil values within 1e-14 relative; \
             |x|_W^2 / |x|_M^2 in [{worst_lo:.12}, {worst_hi:.12}] over 4x10^4 random vectors \
             (required within [1, 4])"
        ),
    );
}

#[test]
fn criterion_07_moreau_identity_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7_000);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1_000 {
        let dim = rng.gen_range(1..=48);
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let metric: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.05..30.0)).collect();
        let lo = -rng.gen_range(0.1..5.0);
        let hi = rng.gen_range(0.1..5.0);
        let bounds = BoxBounds::new(lo, hi).unwrap();
        worst = worst.max(moreau_residual(&x, &metric, bounds) / (1.0 + norm2(&x)));
    }
    let pass = worst <= 1e-11;
    verdict(
        7,
        pass,
        &format!(
            "10^3 random (x, metric, bounds) triples: max residual / (1 + |x|) = {worst:.3e} \
             (<= 1e-11)"
        ),
    );
}

#[test]
fn criterion_08_sgs_sweep_solves_its_subproblem() {
    let kkt_tol = 1e-8;
    let threshold = 10.0 * outer_cg_tol(kkt_tol);
    let mut worst = f64::NEG_INFINITY;
    let mut pass = true;
    for n_side in [2usize, 3, 4] {
        let spec = standard_spec(n_side);
        let report = run(
            &spec,
            &SolverConfig {
                kkt_tol,
                max_iter: 20_000,
                check_subproblems: true,
                ..Default::default()
            },
        )
        .unwrap();
        pass &= report.converged;
        let measured = report
            .max_sgs_residual
            .expect("check_subproblems records the sweep residual");
        worst = worst.max(measured);
    }
    pass &= worst <= threshold;
    verdict(
        8,
        pass,
        &format!(
            "full solves on n_side {{2,3,4}} at kkt_tol 1e-8: max post-sweep first-order \
             residual = {worst:.3e} (<= 10x inner cg tol = {threshold:.1e})"
        ),
    );
}

#[test]
fn criterion_09_duality_gap_vanishes_at_the_solution() {
    let mut pass = true;
    let mut parts = Vec::new();
    for n_side in [8usize, 16] {
        let cfg = standard_config(&format!("n_side = {n_side}\n[solver]\nkkt_tol = 1e-10\n"));
        let outcome = studies::run_solve(&cfg).expect("solve");
        let tol = 1e-8 * (1.0 + outcome.objective.abs());
        pass &= outcome.report.converged && outcome.gap.abs() <= tol;
        parts.push(format!(
            "n_side {n_side}: gap = {:.3e} (|gap| <= {tol:.3e})",
            outcome.gap
        ));
    }
    verdict(9, pass, &format!("kkt_tol 1e-10 runs; {}", parts.join("; ")));
}

#[test]
fn criterion_10_l1_weight_drives_sparsity() {
    let spec = standard_spec(3);
    let threshold = beta_max(&spec).unwrap();

    // Clause 1: just above the zero-pattern threshold the control vanishes.
    let beta_hi = threshold * (1.0 + 1e-9);
    let mesh = TriMesh::unit_square(3).unwrap();
    let ops = assemble_operators(&mesh, 0.0).unwrap();
    let yd = nodal_sample(&mesh, |x, y| 10.0 * (PI * x).sin() * (PI * y).sin()).unwrap();
    let yr = vec![0.0; yd.len()];
    let spec_hi = ProblemSpec::new(
        mesh,
        ops,
        0.1,
        beta_hi,
        BoxBounds::new(-2.0, 2.0).unwrap(),
        yd,
        yr,
    )
    .unwrap();
    let report = run(
        &spec_hi,
        &SolverConfig {
            kkt_tol: 1e-10,
            max_iter: 20_000,
            ..Default::default()
        },
    )
    .unwrap();
    let pair = recover_control(&spec_hi, &report.final_z).unwrap();
    let sup = pair.u_hat.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let clause1 = report.converged && sup <= 1e-8;

    // Clause 2: at beta = 0.01 the optimal Mu mixes zero and nonzero entries.
    let oracle = enumerate_solve(&spec).unwrap();
    let mu_vec = spec.ops.mass.matvec(&oracle.u_star);
    let zeros = mu_vec.iter().filter(|v| v.abs() <= 1e-12).count();
    let nonzeros = mu_vec.len() - zeros;
    let clause2 = zeros >= 1 && nonzeros >= 1;

    let pattern: Vec<String> = mu_vec.iter().map(|v| format!("{v:.4e}")).collect();
    let pass = clause1 && clause2;
    verdict(
        10,
        pass,
        &format!(
            "beta_max(n_side 3) = {threshold:.6e}; clause 1 at beta = {beta_hi:.6e}: \
             sup|u| = {sup:.3e} (<= 1e-8); clause 2 at beta = 0.01: Mu* = [{}] has \
             {zeros} zero and {nonzeros} nonzero entries (need >= 1 of each)",
            pattern.join(", ")
        ),
    );
}

#[test]
fn criterion_11_control_error_decays_at_first_order() {
    let cfg = standard_config("[solver]\nkkt_tol = 1e-8\n[study]\nmeshes = [8, 16, 32]\n");
    let study = studies::error_study(&cfg).expect("error study on {8, 16, 32}");
    let orders: Vec<f64> = study.rows.iter().filter_map(|r| r.order).collect();
    let pass = orders.len() == study.rows.len() - 1 && orders.iter().all(|&o| o >= 0.9);
    let rows: Vec<String> = study
        .rows
        .iter()
        .map(|r| {
            let order = match r.order {
                Some(o) => format!(", order {o:.3}"),
                None => String::new(),
            };
            format!("h = 1/{}: error {:.4e}{order}", r.n_side, r.l2_error)
        })
        .collect();
    verdict(
        11,
        pass,
        &format!(
            "reference n_side {}: {} (orders >= 0.9)",
            study.ref_n_side,
            rows.join("; ")
        ),
    );
}
