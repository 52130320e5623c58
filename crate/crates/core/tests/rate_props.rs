use jsqd::fluid::LogStationary;
use jsqd::path::{Control, PLPath};
use jsqd::rate::{
    control_cost, convergence_study, family_trajectory, harmonic, rate_i, rate_i_mu, rate_stationary,
    solve_controlled_ode, Family, Reference,
};
use jsqd::stats::spearman;
use jsqd::ModelParams;
use proptest::prelude::*;

const DEPTH: usize = 6;
const M: usize = 200;

fn params() -> ModelParams {
    ModelParams::new(0.5, 2)
}

fn reference() -> (Reference, PLPath) {
    let r = Reference::stationary(&params(), DEPTH).unwrap();
    let q = r.to_path(1.0, M).unwrap();
    (r, q)
}

/// Piecewise-linear path through random knots, coordinate `j` scaled by
/// `sqrt(Q*_j)` and pinned to zero at `t = 0`.
fn random_path(knots: &[Vec<f64>]) -> PLPath {
    let s = LogStationary::new(&params(), DEPTH).unwrap();
    let segs = knots.len() - 1;
    PLPath::from_fn(1.0, M, |t| {
        let x = t * segs as f64;
        let k = (x.floor() as usize).min(segs - 1);
        let f = x - k as f64;
        (0..=DEPTH)
            .map(|j| {
                if j == 0 {
                    return 0.0;
                }
                let v = knots[k][j - 1] + f * (knots[k + 1][j - 1] - knots[k][j - 1]);
                (0.5 * s.ln(j)).exp() * v
            })
            .collect()
    })
    .unwrap()
}

fn knots() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, DEPTH), 5).prop_map(|mut k| {
        k[0] = vec![0.0; DEPTH];
        k
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quadratic_homogeneity(k in knots(), c in prop::sample::select(vec![0.5, 2.0, 10.0, -3.0])) {
        let (r, q) = reference();
        let eta = random_path(&k);
        let base = rate_i(&eta, &q, &params()).unwrap().total;
        let scaled = rate_i(&eta.scaled(c), &q, &params()).unwrap().total;
        prop_assert!(base > 0.0);
        prop_assert!((scaled - c * c * base).abs() <= 1e-12 * c * c * base);
        let log_base = rate_stationary(&eta, &r, &params()).unwrap().total;
        let log_scaled = rate_stationary(&eta.scaled(c), &r, &params()).unwrap().total;
        prop_assert!((log_scaled - c * c * log_base).abs() <= 1e-12 * c * c * log_base);
    }

    #[test]
    fn log_space_matches_direct(k in knots()) {
        let (r, q) = reference();
        let eta = random_path(&k);
        let direct = rate_i(&eta, &q, &params()).unwrap().total;
        let logged = rate_stationary(&eta, &r, &params()).unwrap().total;
        prop_assert!((direct - logged).abs() <= 1e-10 * direct, "{} vs {}", direct, logged);
    }

    #[test]
    fn measure_form_agrees(k in knots()) {
        let (_, q) = reference();
        let eta = random_path(&k).materialized();
        let tilde = PLPath::from_fn(1.0, M, |t| {
            let m = (t * M as f64).round() as usize;
            (0..=DEPTH)
                .map(|j| {
                    let next = if j < DEPTH { eta.at(m, j + 1) } else { 0.0 };
                    if j == 0 { -eta.at(m, 1) } else { eta.at(m, j) - next }
                })
                .collect()
        })
        .unwrap();
        let a = rate_i(&eta, &q, &params()).unwrap().total;
        let b = rate_i_mu(&tilde, &q, &params()).unwrap().total;
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1e-300));
    }

    #[test]
    fn split_controls_cost_more(k in knots(), w in 0.0f64..1.0) {
        // phi_j = sqrt(a_j) psi_a + sqrt(s_j) psi_s with psi_a = w phi / sqrt(a),
        // psi_s = (1 - w) phi / sqrt(s); its cost is 1/2 int phi^2 (w^2/a + (1-w)^2/s)
        let (r, q) = reference();
        let phi = Control::new(random_path(&k).materialized()).unwrap();
        let best = control_cost(&phi, &q, &params()).unwrap();
        let lambda = params().lambda;
        let mut split = 0.0;
        for j in 1..=DEPTH {
            let a = lambda * (r.value(j - 1).powi(2) - r.value(j).powi(2));
            let s = r.value(j) - r.value(j + 1);
            let weight = w * w / a + (1.0 - w) * (1.0 - w) / s;
            let h = phi.step();
            let sq: f64 = (0..M)
                .map(|m| {
                    let (x, y) = (phi.at(m, j), phi.at(m + 1, j));
                    h * (x * x + x * y + y * y) / 3.0
                })
                .sum();
            split += 0.5 * weight * sq;
        }
        prop_assert!(split >= best * (1.0 - 1e-12));
    }
}

#[test]
fn zero_iff_no_residual() {
    let (r, q) = reference();
    let zero = PLPath::zeros(DEPTH + 1, 1.0, M).unwrap();
    assert_eq!(rate_i(&zero, &q, &params()).unwrap().total, 0.0);
    assert_eq!(rate_stationary(&zero, &r, &params()).unwrap().total, 0.0);
    // a solution of the linearized ODE with zero control has zero cost
    let phi = Control::new(PLPath::zeros(DEPTH + 1, 1.0, M).unwrap()).unwrap();
    let eta = solve_controlled_ode(&phi, &q, &params(), None).unwrap();
    assert_eq!(rate_i(&eta, &q, &params()).unwrap().total, 0.0);
}

#[test]
fn study_gap_tracks_tail_criterion() {
    let p = params();
    for family in [Family::A, Family::B] {
        let q = family_trajectory(family, &harmonic(24), 2.0, &p, 24, 400).unwrap();
        let report = convergence_study(&q, 10, &p).unwrap();
        let gap = report.column("gap").unwrap();
        let crit = report.column("criterion").unwrap();
        let rho = spearman(&gap, &crit);
        assert!(rho > 0.9, "{family:?}: spearman {rho}");
        assert_eq!(report.rows.len(), 9);
    }
}
