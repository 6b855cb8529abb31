use super::*;
use crate::linalg::identity_minus;
use crate::profile::{make_separable_profile, EntryKind};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_profile(p: usize, n: usize, seed: u64) -> VarianceProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals = (0..p * n).map(|_| rng.random_range(0.3..2.0)).collect();
    VarianceProfile::from_row_major(p, n, vals).unwrap()
}

/// Two row blocks × two column blocks; compresses to a 2×2 class system.
fn block_profile(p: usize, n: usize) -> VarianceProfile {
    let vals = (0..p)
        .flat_map(|i| (0..n).map(move |j| match (2 * i < p, 3 * j < n) {
            (true, true) => 1.5,
            (true, false) => 0.5,
            (false, true) => 1.0,
            (false, false) => 2.0,
        }))
        .collect();
    VarianceProfile::from_row_major(p, n, vals).unwrap()
}

fn solve(profile: &VarianceProfile, z: C64) -> DetEquivalent {
    solve_canonical(profile, z, &SolverOptions::default()).unwrap()
}

fn moderate(q: f64, n: usize) -> SparsityConfig {
    SparsityConfig::new(q, n, Regime::Moderate).unwrap()
}

fn quick() -> FluctOptions {
    FluctOptions::default().without_convergence_check()
}

fn direct_a(profile: &VarianceProfile, d1: &DetEquivalent, d2: &DetEquivalent) -> DMatrix<C64> {
    let (p, n) = (profile.p(), profile.n());
    let nf = n as f64;
    DMatrix::from_fn(n, n, |l, m| {
        let mut num = C64::new(0.0, 0.0);
        let mut den1 = C64::new(1.0, 0.0);
        let mut den2 = C64::new(1.0, 0.0);
        for i in 0..p {
            num += profile.get(i, l) * d1.t[i] * profile.get(i, m) * d2.t[i] / nf;
            den1 += profile.get(i, l) * d1.t[i] / nf;
            den2 += profile.get(i, l) * d2.t[i] / nf;
        }
        num / nf / (den1 * den2)
    })
}

#[test]
fn a_matrix_constant_profile() {
    let prof = VarianceProfile::constant(12, 12, 1.0).unwrap();
    let det = solve(&prof, C64::new(-1.0, 0.0));
    let a = a_matrix(&prof, &det, &det).unwrap();
    let t = (5f64.sqrt() - 1.0) / 2.0;
    let expected = t * t / (12.0 * (1.0 + t) * (1.0 + t));
    assert!(a.iter().all(|v| (v - expected).norm() < 1e-12));
}

#[test]
fn a_matrix_matches_direct_formula() {
    let prof = random_profile(4, 3, 1);
    let (d1, d2) = (solve(&prof, C64::new(0.5, 0.8)), solve(&prof, C64::new(2.0, -0.3)));
    let a = a_matrix(&prof, &d1, &d2).unwrap();
    let b = direct_a(&prof, &d1, &d2);
    assert!((a - b).norm() < 1e-14);
}

#[test]
fn a_matrix_zero_column() {
    let mut rows = vec![vec![1.0, 2.0, 0.5]; 4];
    rows.iter_mut().for_each(|r| r[1] = 0.0);
    rows[0][0] = 3.0;
    let prof = VarianceProfile::from_rows(&rows).unwrap();
    let det = solve(&prof, C64::new(0.2, 1.0));
    let a = a_matrix(&prof, &det, &det).unwrap();
    assert!((0..3).all(|m| a[(1, m)].norm() == 0.0));
}

#[test]
fn u_system_two_by_two_closed_form() {
    let a = DMatrix::from_row_slice(2, 2, &[
        C64::new(0.1, 0.02), C64::new(0.05, -0.01), C64::new(0.2, 0.0), C64::new(0.15, 0.03),
    ]);
    let n = 2.0;
    let y = u_system_solution(&a, 0, n).unwrap();
    let y1 = n * a[(1, 0)] / (1.0 - a[(1, 1)]);
    let y0 = a[(0, 1)] * y1 + n * a[(0, 0)];
    assert!((y[1] - y1).norm() < 1e-15 && (y[0] - y0).norm() < 1e-15);
    let zero = DMatrix::from_element(3, 3, C64::new(0.0, 0.0));
    assert!(u_system_solution(&zero, 1, 3.0).unwrap().iter().all(|v| v.norm() == 0.0));
}

#[test]
fn u_system_resubstitution() {
    let prof = random_profile(6, 9, 2);
    let det = solve(&prof, C64::new(1.0, 0.7));
    let a = a_matrix(&prof, &det, &det).unwrap();
    for j in 0..prof.n() {
        let y = u_system_solution(&a, j, 9.0).unwrap();
        for l in 0..prof.n() {
            let rhs: C64 = (0..prof.n()).filter(|&i| i != j).map(|i| a[(l, i)] * y[i]).sum::<C64>()
                + 9.0 * a[(l, j)];
            assert!((y[l] - rhs).norm() < 1e-10);
        }
    }
}

#[test]
fn rank_one_u_matches_per_column() {
    for prof in [random_profile(6, 9, 3), block_profile(6, 9)] {
        let det = solve(&prof, C64::new(1.5, 0.6));
        let fast = solve_u_systems(&prof, &det).unwrap();
        let slow = solve_u_systems_with(&prof, &det, UStrategy::PerColumn, AReading::AsPrinted).unwrap();
        for (a, b) in fast.u.iter().zip(&slow.u).chain(fast.u_tilde.iter().zip(&slow.u_tilde)) {
            assert!((a - b).norm() < 1e-10 * b.norm().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn compressed_h_recursion_matches_unpivoted_lu() {
    let prof = block_profile(7, 10);
    let red = prof.reduced();
    assert!(red.cols() < prof.n());
    let (d1, d2) = (solve(&prof, C64::new(0.4, 0.9)), solve(&prof, C64::new(3.0, -0.5)));
    let cache = covariance_kernel(&prof, &d1, &d2, &moderate(2.0, 10), &EntryModel::real_gaussian(), AReading::AsPrinted)
        .unwrap();
    let a = a_matrix(&prof, &d1, &d2).unwrap();
    let pivots = crate::linalg::unpivoted_lu_pivots(&identity_minus(&a), "full").unwrap();
    for (h, u) in cache.h_diag.iter().zip(&pivots) {
        assert!((h - 10.0 * (1.0 - u)).norm() < 1e-12);
    }
}

#[test]
fn h_diagonal_solves_triangular_system() {
    let prof = random_profile(5, 6, 4);
    let (d1, d2) = (solve(&prof, C64::new(0.4, 0.9)), solve(&prof, C64::new(3.0, 0.5)));
    let cache = covariance_kernel(&prof, &d1, &d2, &moderate(2.0, 6), &EntryModel::complex_gaussian(), AReading::AsPrinted)
        .unwrap();
    let a = a_matrix(&prof, &d1, &d2).unwrap();
    let n = 6.0;
    for j in 0..6 {
        // Solve the leading j×j block for H_{1..j-1, j}, then read off H_jj.
        let lead = DMatrix::from_fn(j, j, |l, i| {
            C64::new(if l == i { 1.0 } else { 0.0 }, 0.0) - a[(l, i)]
        });
        let rhs: Vec<C64> = (0..j).map(|l| n * a[(l, j)]).collect();
        let h = if j == 0 {
            vec![]
        } else {
            crate::linalg::ComplexLu::factor(&lead, "lead").unwrap().solve(&rhs)
        };
        let hjj: C64 = (0..j).map(|i| a[(j, i)] * h[i]).sum::<C64>() + n * a[(j, j)];
        assert!((hjj - cache.h_diag[j]).norm() < 1e-10);
    }
}

#[test]
fn kernel_cache_resubstitution() {
    let prof = random_profile(7, 8, 5);
    let det = solve(&prof, C64::new(2.0, 0.5));
    let cache = mean_kernel_cache(&prof, &det, &moderate(2.0, 8), &EntryModel::real_gaussian(), AReading::AsPrinted)
        .unwrap();
    for j in 0..8 {
        let rhs: C64 = (0..8).map(|m| cache.a[(j, m)] * cache.psi[m]).sum::<C64>() + cache.theta[j];
        assert!((cache.psi[j] - rhs).norm() < 1e-10);
    }
    let mean: C64 = cache.psi.iter().sum::<C64>() / 8.0;
    assert!((mean - cache.kernel).norm() < 1e-12);
}

#[test]
fn theta_high_is_moderate_without_side_blocks() {
    let prof = random_profile(5, 7, 6);
    let det = solve(&prof, C64::new(1.0, 0.4));
    let u = solve_u_systems(&prof, &det).unwrap();
    let model = EntryModel::real_gaussian();
    let sp = moderate(2.0, 7);
    let high = theta_sources(&prof, &det, &sp.with_regime(Regime::High), &model, &u).unwrap();
    // With ν̃₄ = 0 only the side blocks survive in the moderate regime.
    let side = theta_sources(&prof, &det, &sp, &model.with_nu4(0.0), &u).unwrap();
    let full = theta_sources(&prof, &det, &sp, &model, &u).unwrap();
    for j in 0..7 {
        assert!((full[j] - high[j] - side[j]).norm() < 1e-12);
    }
}

#[test]
fn theta_constant_profile_is_uniform() {
    let prof = VarianceProfile::constant(6, 9, 1.3).unwrap();
    let det = solve(&prof, C64::new(0.5, 0.5));
    let u = solve_u_systems(&prof, &det).unwrap();
    let theta = theta_sources(&prof, &det, &moderate(2.0, 9), &EntryModel::complex_gaussian(), &u).unwrap();
    assert!(theta.iter().all(|v| (v - theta[0]).norm() < 1e-12));
}

#[test]
fn theta_gap_scales_with_q_over_sqrt_p() {
    let n = 400;
    let prof = block_profile(200, n);
    let det = solve(&prof, C64::new(1.0, 0.5));
    let u = solve_u_systems(&prof, &det).unwrap();
    let model = EntryModel::real_gaussian();
    let ratios: Vec<f64> = [0.45, 0.4, 0.35]
        .iter()
        .map(|e| {
            let q = (n as f64).powf(*e);
            let sp = moderate(q, n);
            let m = theta_sources(&prof, &det, &sp, &model, &u).unwrap();
            let h = theta_sources(&prof, &det, &sp.with_regime(Regime::High), &model, &u).unwrap();
            let gap = m.iter().zip(&h).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            gap / (q / 200f64.sqrt())
        })
        .collect();
    assert!(ratios.iter().all(|r| (r - ratios[0]).abs() < 1e-10 * ratios[0]));
}

/// E Tr S² for the sparse model.
fn expected_trace_square(profile: &VarianceProfile, s: f64, nu4: f64) -> f64 {
    let (p, n) = (profile.p(), profile.n());
    let nf = n as f64;
    let mut total = 0.0;
    for i in 0..p {
        for k in 0..p {
            if i != k {
                total += (0..n).map(|j| profile.get(i, j) * profile.get(k, j)).sum::<f64>() / (nf * nf);
            }
        }
        total += (profile.row(i).iter().sum::<f64>() / nf).powi(2);
    }
    total + profile.sum_of_squares() * (nu4 / s - 1.0) / (nf * nf)
}

#[test]
fn mean_of_square_is_exact_finite_n_bias() {
    let prof = random_profile(9, 12, 7);
    let f = TestFunction::square();
    let contour = Contour::default_for(&prof, &[&f]).unwrap();
    let cases = [
        (12f64.sqrt(), EntryModel::complex_gaussian()),
        (12f64.sqrt(), EntryModel::real_gaussian()),
        (1.9, EntryModel::complex_gaussian()),
        (1.9, EntryModel::real_gaussian()),
        (2.45, EntryModel::shifted_gamma(2.0, 1.0).unwrap()),
    ];
    let integral = equivalent_integral(&prof, &f, &contour, &quick()).unwrap().value;
    for (q, model) in cases {
        let sp = moderate(q, 12);
        let mu = clt_mean_with(&prof, &f, &contour, &sp, &model, &quick()).unwrap().value;
        let exact = 9f64.sqrt() * q * (expected_trace_square(&prof, sp.s, model.nu4) / 9.0 - integral);
        assert!((mu - exact).abs() < 1e-7 * exact.abs().max(1.0), "{:?}: {mu} vs {exact}", model.kind);
    }
}

#[test]
fn measure_mass_and_cauchy() {
    let prof = random_profile(8, 6, 8);
    let one = TestFunction::custom("one", std::sync::Arc::new(|_| C64::new(1.0, 0.0)), std::sync::Arc::new(|_| C64::new(0.0, 0.0)), vec![], None);
    let contour = Contour::default_for(&prof, &[]).unwrap();
    let mass = equivalent_integral(&prof, &one, &contour, &quick()).unwrap();
    assert!((mass.value - 1.0).abs() < 1e-6, "{}", mass.value);
    let cauchy: C64 = contour.full_nodes().iter().map(|nd| nd.weight * nd.z.exp()).sum();
    assert!(cauchy.norm() < 1e-10);
}

#[test]
fn zero_function_and_zero_moment_give_zero() {
    let prof = random_profile(5, 5, 9);
    let sp = SparsityConfig::new(1.5, 5, Regime::High).unwrap();
    let contour = Contour::default_for(&prof, &[]).unwrap();
    let model = EntryModel::complex_gaussian();
    assert_eq!(clt_mean(&prof, &TestFunction::zero(), &contour, &sp, &model).unwrap().value, 0.0);
    let silent = EntryModel { kind: EntryKind::ComplexGaussian, kappa: 0, nu4: 0.0 };
    let corr = corrected_centering_with(&prof, &TestFunction::square(), &contour, &sp, &silent, &quick()).unwrap();
    assert_eq!(corr.value, 0.0);
}

#[test]
fn corrected_centering_is_negated_high_mean() {
    let prof = random_profile(6, 8, 10);
    let f = TestFunction::log1p_scaled(1.0).unwrap();
    let contour = Contour::default_for(&prof, &[&f]).unwrap();
    let sp = SparsityConfig::new(2.0, 8, Regime::High).unwrap();
    let model = EntryModel::complex_gaussian();
    let mean = clt_mean_with(&prof, &f, &contour, &sp, &model, &quick()).unwrap().value;
    let corr = corrected_centering_with(&prof, &f, &contour, &sp, &model, &quick()).unwrap().value;
    assert_eq!(corr, -mean);
    assert!(corrected_centering(&prof, &f, &contour, &moderate(2.0, 8), &model).is_err());
}

fn anchor_case(prof: &VarianceProfile, sp: &SparsityConfig, model: &EntryModel) -> (f64, f64) {
    let f = TestFunction::identity();
    let c1 = Contour::default_for(prof, &[&f]).unwrap().with_nodes(32);
    let c2 = c1.dilated(SECOND_CONTOUR_DILATION, &[&f]);
    let cov = clt_cov_with(prof, &f, &f, &c1, &c2, sp, model, &quick()).unwrap().value;
    (cov, trace_variance_closed_form(prof, sp, model))
}

#[test]
fn trace_covariance_anchor_both_kappas_and_regimes() {
    let prof = random_profile(10, 14, 11);
    for model in [EntryModel::real_gaussian(), EntryModel::complex_gaussian()] {
        for sp in [moderate(2.5, 14), SparsityConfig::new(2.5, 14, Regime::High).unwrap()] {
            let (cov, exact) = anchor_case(&prof, &sp, &model);
            assert!((cov - exact).abs() < 1e-6 * exact, "{:?} {:?}: {cov} vs {exact}", model.kind, sp.regime);
        }
    }
}

#[test]
fn alternative_a_reading_keeps_trace_anchor() {
    let prof = random_profile(6, 9, 12);
    let f = TestFunction::identity();
    let c1 = Contour::default_for(&prof, &[&f]).unwrap().with_nodes(24);
    let c2 = c1.dilated(SECOND_CONTOUR_DILATION, &[&f]);
    let sp = moderate(2.0, 9);
    let model = EntryModel::real_gaussian();
    let alt = FluctOptions { a_reading: AReading::Symmetric, ..quick() };
    let a = clt_cov_with(&prof, &f, &f, &c1, &c2, &sp, &model, &quick()).unwrap().value;
    let b = clt_cov_with(&prof, &f, &f, &c1, &c2, &sp, &model, &alt).unwrap().value;
    assert!((a - b).abs() < 1e-10 * a.abs());
}

#[test]
fn covariance_is_symmetric() {
    let prof = random_profile(6, 8, 13);
    let f = TestFunction::log1p_scaled(1.0).unwrap();
    let g = TestFunction::square();
    let c1 = Contour::default_for(&prof, &[&f, &g]).unwrap().with_nodes(24);
    let c2 = c1.dilated(SECOND_CONTOUR_DILATION, &[&f, &g]);
    let sp = moderate(2.0, 8);
    let model = EntryModel::complex_gaussian();
    let fg = clt_cov_with(&prof, &f, &g, &c1, &c2, &sp, &model, &quick()).unwrap().value;
    let gf = clt_cov_with(&prof, &g, &f, &c1, &c2, &sp, &model, &quick()).unwrap().value;
    assert!((fg - gf).abs() < 1e-8 * fg.abs(), "{fg} vs {gf}");
}

#[test]
fn overlapping_contours_rejected() {
    let prof = random_profile(4, 4, 14);
    let f = TestFunction::identity();
    let c1 = Contour::default_for(&prof, &[&f]).unwrap();
    let model = EntryModel::real_gaussian();
    let err = clt_cov(&prof, &f, &f, &c1, &c1, &moderate(1.5, 4), &model).unwrap_err();
    assert!(matches!(err, SpecgramError::Contour(_)));
}

#[test]
fn high_regime_covariance_is_moderate_limit() {
    let n = 400;
    let prof = block_profile(200, n);
    let f = TestFunction::log1p_scaled(1.0).unwrap();
    let c1 = Contour::default_for(&prof, &[&f]).unwrap().with_nodes(24);
    let c2 = c1.dilated(SECOND_CONTOUR_DILATION, &[&f]);
    let model = EntryModel::complex_gaussian();
    let mut gaps = Vec::new();
    for e in [0.45, 0.4, 0.35] {
        let q = (n as f64).powf(e);
        let sp = moderate(q, n);
        let m = clt_cov_with(&prof, &f, &f, &c1, &c2, &sp, &model, &quick()).unwrap().value;
        let h = clt_cov_with(&prof, &f, &f, &c1, &c2, &sp.with_regime(Regime::High), &model, &quick()).unwrap().value;
        gaps.push(((m - h).abs(), sp.s));
    }
    assert!(gaps.windows(2).all(|w| w[1].0 < w[0].0));
    // Bounded by a constant times s.
    let ratios: Vec<f64> = gaps.iter().map(|(g, s)| g / s).collect();
    assert!(ratios.iter().all(|r| *r < 2.0 * ratios[0]));
}

#[test]
fn integration_by_parts_matches_finite_differences() {
    let prof = random_profile(8, 8, 15);
    let f = TestFunction::log1p_scaled(1.0).unwrap();
    let g = TestFunction::square();
    // The difference quotient converges more slowly in the node count than the exact kernel.
    let c1 = Contour::default_for(&prof, &[&f, &g]).unwrap().with_nodes(64);
    let c2 = c1.dilated(SECOND_CONTOUR_DILATION, &[&f, &g]);
    let sp = moderate(2.0, 8);
    let model = EntryModel::real_gaussian();
    let ibp = clt_cov_with(&prof, &f, &g, &c1, &c2, &sp, &model, &quick()).unwrap().value;
    let fd = clt_cov_finite_difference(&prof, &f, &g, &c1, &c2, &sp, &model, 1e-4, &quick()).unwrap();
    assert!((ibp - fd).abs() < 1e-6 * ibp.abs(), "{ibp} vs {fd}");
}

#[test]
fn halving_node_spacing_is_stable() {
    let prof = random_profile(6, 9, 16);
    let f = TestFunction::log1p_scaled(1.0).unwrap();
    let contour = Contour::default_for(&prof, &[&f]).unwrap();
    let sp = moderate(2.0, 9);
    let model = EntryModel::complex_gaussian();
    let mean = clt_mean(&prof, &f, &contour, &sp, &model).unwrap();
    assert!(mean.warning.is_none(), "{mean:?}");
    let fine = clt_mean_with(&prof, &f, &contour.with_nodes(96), &sp, &model, &quick()).unwrap();
    assert!((fine.value - mean.value).abs() < 1e-6 * mean.value.abs());
    let c2 = contour.dilated(SECOND_CONTOUR_DILATION, &[&f]);
    let cov = clt_cov_with(&prof, &f, &f, &contour, &c2, &sp, &model, &quick()).unwrap().value;
    let cov_fine = clt_cov_with(&prof, &f, &f, &contour.with_nodes(96), &c2.with_nodes(96), &sp, &model, &quick())
        .unwrap()
        .value;
    assert!((cov_fine - cov).abs() < 1e-6 * cov.abs(), "{cov} vs {cov_fine}");
}

#[test]
fn separable_profile_uses_small_classes() {
    let prof = make_separable_profile(&[1.0, 1.0, 2.0], &[1.0, 3.0, 3.0, 1.0]).unwrap();
    let red = prof.reduced();
    assert_eq!((red.rows(), red.cols()), (2, 2));
}


