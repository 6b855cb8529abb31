//! Deterministic equivalents: the canonical (t, t̃) fixed point, Stieltjes
//! transforms of the equivalent measure, density recovery, and the scalar
//! (δ, δ̃) system for separable profiles.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpecgramError};
use crate::linalg::{ComplexLu, C64};
use crate::par;
use crate::profile::{ReducedProfile, VarianceProfile};

/// Tolerance and iteration budget for the fixed-point solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 10_000 }
    }
}

/// Solution (t, t̃) of the canonical system at one spectral argument.
#[derive(Debug, Clone, PartialEq)]
pub struct DetEquivalent {
    pub z: C64,
    pub t: Vec<C64>,
    pub t_tilde: Vec<C64>,
    /// Sup-norm fixed-point defect at return.
    pub residual: f64,
    pub iterations: usize,
}

/// m⁰(z) = (1/p)Σ t_i and m̲⁰(z) = (1/n)Σ t̃_j.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StieltjesPair {
    pub m0: C64,
    pub m0_under: C64,
}

/// Solution of the scalar system for σ²_ij = d_i·d̃_j.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMiEquivalent {
    pub z: C64,
    pub delta: C64,
    pub delta_tilde: C64,
    pub t_diag: Vec<C64>,
    pub t_tilde_diag: Vec<C64>,
    pub residual: f64,
}

/// Heights below which a point inside the support is reached by continuation.
const NEAR_AXIS: f64 = 1e-3;
const CONTINUATION_START: f64 = 0.1;
const CONTINUATION_RATIO: f64 = 0.5;
/// Jacobi sweeps before a Newton polish is attempted.
const JACOBI_BUDGET: usize = 400;
/// Largest reduced system handed to Newton's method.
const NEWTON_MAX_DIM: usize = 1200;

/// σ²_max(1 + √c)², the high-probability bound on the largest eigenvalue.
pub fn spectral_support_bound(profile: &VarianceProfile) -> f64 {
    profile.sigma2_max() * (1.0 + profile.c().sqrt()).powi(2)
}

/// Solves t_i = −1/(z(1 + (1/n)Σ_j σ²_ij t̃_j)), t̃_j = −1/(z(1 + (1/n)Σ_i σ²_ij t_i)).
pub fn solve_canonical_system(
    profile: &VarianceProfile,
    z: C64,
    tol: f64,
    max_iter: usize,
) -> Result<DetEquivalent> {
    solve_canonical(profile, z, &SolverOptions { tol, max_iter })
}

/// [`solve_canonical_system`] with an options struct.
pub fn solve_canonical(profile: &VarianceProfile, z: C64, opts: &SolverOptions) -> Result<DetEquivalent> {
    if !(opts.tol > 0.0) {
        return Err(SpecgramError::Validation("solver tolerance must be positive".into()));
    }
    if z.im == 0.0 && z.re >= 0.0 {
        return Err(SpecgramError::Domain(format!(
            "z = {z} lies on the nonnegative real axis"
        )));
    }
    if !(z.re.is_finite() && z.im.is_finite()) {
        return Err(SpecgramError::Domain(format!("z = {z} is not finite")));
    }
    let red = profile.reduced();
    let flip = z.im < 0.0;
    let zu = if flip { z.conj() } else { z };
    let near_support = zu.im < NEAR_AXIS && zu.re >= 0.0 && zu.re <= 1.05 * spectral_support_bound(profile);
    let n = profile.n() as f64;
    let state = if near_support {
        continuation(&red, n, zu, opts)?
    } else {
        match solve_reduced(&red, n, zu, opts, None) {
            Ok(state) => state,
            Err(err) if zu.im > 0.0 && zu.im < CONTINUATION_START => {
                continuation(&red, n, zu, opts).map_err(|_| err)?
            }
            Err(err) => return Err(err),
        }
    };
    let fix = |v: C64| if flip { v.conj() } else { v };
    Ok(DetEquivalent {
        z,
        t: red.row_class.iter().map(|&k| fix(state.t[k])).collect(),
        t_tilde: red.col_class.iter().map(|&k| fix(state.t_tilde[k])).collect(),
        residual: state.residual,
        iterations: state.iterations,
    })
}

#[derive(Debug, Clone)]
struct ReducedState {
    t: Vec<C64>,
    t_tilde: Vec<C64>,
    residual: f64,
    iterations: usize,
}

fn continuation(red: &ReducedProfile, n: f64, z: C64, opts: &SolverOptions) -> Result<ReducedState> {
    let mut heights = Vec::new();
    let mut h = CONTINUATION_START.max(z.im);
    while h > z.im {
        heights.push(h);
        h *= CONTINUATION_RATIO;
    }
    heights.push(z.im);
    let mut warm: Option<ReducedState> = None;
    let mut total = 0;
    for h in heights {
        let zk = C64::new(z.re, h);
        let state = solve_reduced(red, n, zk, opts, warm.as_ref())?;
        total += state.iterations;
        warm = Some(state);
    }
    let mut state = warm.expect("at least one continuation step");
    state.iterations = total;
    Ok(state)
}

/// Row map t_r = −1/(z(1 + (1/n)Σ_c w̃_c v_rc t̃_c)).
fn row_map(red: &ReducedProfile, n: f64, z: C64, t_tilde: &[C64]) -> Vec<C64> {
    let cols = red.cols();
    (0..red.rows())
        .map(|r| {
            let row = &red.values[r * cols..(r + 1) * cols];
            let acc: C64 = row
                .iter()
                .zip(&red.col_weight)
                .zip(t_tilde)
                .map(|((v, w), tt)| tt * (v * w))
                .sum();
            -1.0 / (z * (1.0 + acc / n))
        })
        .collect()
}

/// Column map t̃_c = −1/(z(1 + (1/n)Σ_r w_r v_rc t_r)).
fn col_map(red: &ReducedProfile, n: f64, z: C64, t: &[C64]) -> Vec<C64> {
    let cols = red.cols();
    let mut acc = vec![C64::new(0.0, 0.0); cols];
    for (r, tr) in t.iter().enumerate() {
        let scaled = tr * red.row_weight[r];
        for (a, v) in acc.iter_mut().zip(&red.values[r * cols..(r + 1) * cols]) {
            *a += scaled * v;
        }
    }
    acc.into_iter().map(|a| -1.0 / (z * (1.0 + a / n))).collect()
}

fn sup_diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn defect(red: &ReducedProfile, n: f64, z: C64, t: &[C64], t_tilde: &[C64]) -> f64 {
    let dt = sup_diff(t, &row_map(red, n, z, t_tilde));
    let dtt = sup_diff(t_tilde, &col_map(red, n, z, t));
    let d = dt.max(dtt);
    if d.is_nan() { f64::INFINITY } else { d }
}

fn solve_reduced(
    red: &ReducedProfile,
    n: f64,
    z: C64,
    opts: &SolverOptions,
    warm: Option<&ReducedState>,
) -> Result<ReducedState> {
    let start = -1.0 / z;
    let (mut t, mut t_tilde) = match warm {
        Some(w) => (w.t.clone(), w.t_tilde.clone()),
        None => (vec![start; red.rows()], vec![start; red.cols()]),
    };
    let target = opts.tol * 1e-2;
    let newton_ok = red.rows() + red.cols() <= NEWTON_MAX_DIM;
    let mut iterations = 0;
    let jacobi_limit = if newton_ok { opts.max_iter.min(JACOBI_BUDGET) } else { opts.max_iter };
    while iterations < jacobi_limit {
        iterations += 1;
        let t_new = row_map(red, n, z, &t_tilde);
        let tt_new = col_map(red, n, z, &t_new);
        let change = sup_diff(&t_new, &t).max(sup_diff(&tt_new, &t_tilde));
        t = t_new;
        t_tilde = tt_new;
        if change <= target {
            break;
        }
    }
    let mut residual = defect(red, n, z, &t, &t_tilde);
    if residual > target && newton_ok {
        let (tn, ttn, res, used) = newton(red, n, z, t.clone(), t_tilde.clone(), opts.max_iter.saturating_sub(iterations).max(1))?;
        iterations += used;
        if res < residual {
            t = tn;
            t_tilde = ttn;
            residual = res;
        }
    }
    if residual > opts.tol {
        return Err(SpecgramError::Iteration { iterations, residual, z: z.to_string() });
    }
    if z.im > 0.0 && t.iter().chain(&t_tilde).any(|v| v.im <= 0.0) {
        return Err(SpecgramError::Iteration {
            iterations,
            residual,
            z: format!("{z} (solution left the Stieltjes class)"),
        });
    }
    Ok(ReducedState { t, t_tilde, residual, iterations })
}

fn newton(
    red: &ReducedProfile,
    n: f64,
    z: C64,
    mut t: Vec<C64>,
    mut t_tilde: Vec<C64>,
    budget: usize,
) -> Result<(Vec<C64>, Vec<C64>, f64, usize)> {
    let (k, l) = (red.rows(), red.cols());
    let mut residual = defect(red, n, z, &t, &t_tilde);
    let mut used = 0;
    for _ in 0..budget.min(60) {
        used += 1;
        let a: Vec<C64> = (0..k)
            .map(|r| {
                (0..l).map(|c| t_tilde[c] * (red.values[r * l + c] * red.col_weight[c])).sum::<C64>() / n
            })
            .collect();
        let mut b = vec![C64::new(0.0, 0.0); l];
        for (r, tr) in t.iter().enumerate() {
            let row = &red.values[r * l..(r + 1) * l];
            for (bc, v) in b.iter_mut().zip(row) {
                *bc += tr * (v * red.row_weight[r]);
            }
        }
        b.iter_mut().for_each(|v| *v /= n);
        let mut jac = DMatrix::from_element(k + l, k + l, C64::new(0.0, 0.0));
        let mut rhs = vec![C64::new(0.0, 0.0); k + l];
        for r in 0..k {
            jac[(r, r)] = z * (1.0 + a[r]);
            for c in 0..l {
                jac[(r, k + c)] = z * t[r] * (red.col_weight[c] * red.values[r * l + c] / n);
            }
            rhs[r] = -(z * t[r] * (1.0 + a[r]) + 1.0);
        }
        for c in 0..l {
            jac[(k + c, k + c)] = z * (1.0 + b[c]);
            for r in 0..k {
                jac[(k + c, r)] = z * t_tilde[c] * (red.row_weight[r] * red.values[r * l + c] / n);
            }
            rhs[k + c] = -(z * t_tilde[c] * (1.0 + b[c]) + 1.0);
        }
        let step = match ComplexLu::factor(&jac, "Newton step") {
            Ok(lu) => lu.solve(&rhs),
            Err(_) => break,
        };
        let mut damping = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let tc: Vec<C64> = (0..k).map(|r| t[r] + step[r] * damping).collect();
            let ttc: Vec<C64> = (0..l).map(|c| t_tilde[c] + step[k + c] * damping).collect();
            let res = defect(red, n, z, &tc, &ttc);
            if res < residual {
                t = tc;
                t_tilde = ttc;
                residual = res;
                accepted = true;
                break;
            }
            damping *= 0.5;
        }
        if !accepted || residual < 1e-15 {
            break;
        }
    }
    Ok((t, t_tilde, residual, used))
}

/// Normalized traces of T and T̃.
pub fn stieltjes_m0(det: &DetEquivalent) -> StieltjesPair {
    let mean = |v: &[C64]| v.iter().sum::<C64>() / v.len() as f64;
    StieltjesPair { m0: mean(&det.t), m0_under: mean(&det.t_tilde) }
}

/// Density of the equivalent measure at `x_grid` by Stieltjes inversion at height `eta`.
pub fn lsd_density(profile: &VarianceProfile, x_grid: &[f64], eta: f64) -> Result<Vec<f64>> {
    lsd_density_with(profile, x_grid, eta, &SolverOptions::default())
}

/// [`lsd_density`] with explicit solver options.
pub fn lsd_density_with(
    profile: &VarianceProfile,
    x_grid: &[f64],
    eta: f64,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(SpecgramError::Validation("eta must be positive".into()));
    }
    if x_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SpecgramError::Validation("density grid must be increasing".into()));
    }
    par::try_map_indexed(x_grid.len(), |k| {
        let det = solve_canonical(profile, C64::new(x_grid[k], eta), opts)?;
        Ok((stieltjes_m0(&det).m0.im / std::f64::consts::PI).max(0.0))
    })
}

/// Marks grid points within 2η of an estimated support edge.
///
/// Edges are located where the density crosses 1e-3 of its maximum.
pub fn flag_near_edges(x_grid: &[f64], density: &[f64], eta: f64) -> Vec<bool> {
    let peak = density.iter().copied().fold(0.0, f64::max);
    let level = 1e-3 * peak;
    let edges: Vec<f64> = x_grid
        .windows(2)
        .zip(density.windows(2))
        .filter(|(_, d)| (d[0] > level) != (d[1] > level))
        .map(|(x, _)| 0.5 * (x[0] + x[1]))
        .collect();
    x_grid
        .iter()
        .map(|x| edges.iter().any(|e| (x - e).abs() <= 2.0 * eta))
        .collect()
}

/// Solves δ = (1/N_t)Σ d_i t_i, δ̃ = (1/N_t)Σ d̃_j t̃_j with
/// t_i = 1/(−z(1 + δ̃ d_i)) and t̃_j = 1/(−z(1 + δ d̃_j)).
pub fn solve_scalar_mi_system(d: &[f64], d_tilde: &[f64], z: C64, tol: f64) -> Result<ScalarMiEquivalent> {
    if z.im == 0.0 && z.re >= 0.0 {
        return Err(SpecgramError::Domain(format!("z = {z} lies on the nonnegative real axis")));
    }
    if d.is_empty() || d_tilde.is_empty() || d.iter().chain(d_tilde).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(SpecgramError::Validation("d and d_tilde must be nonempty and positive".into()));
    }
    if !(tol > 0.0) {
        return Err(SpecgramError::Validation("solver tolerance must be positive".into()));
    }
    let nt = d_tilde.len() as f64;
    let delta_of = |dt: C64| d.iter().map(|di| di / (-z * (1.0 + dt * di))).sum::<C64>() / nt;
    let delta_tilde_of = |dl: C64| d_tilde.iter().map(|dj| dj / (-z * (1.0 + dl * dj))).sum::<C64>() / nt;
    let start = -1.0 / z;
    let mut delta = d.iter().sum::<f64>() / nt * start;
    let mut delta_tilde = d_tilde.iter().sum::<f64>() / nt * start;
    let resid = |dl: C64, dt: C64| (dl - delta_of(dt)).norm().max((dt - delta_tilde_of(dl)).norm());
    for _ in 0..100_000 {
        let dt_new = delta_tilde_of(delta);
        let dl_new = delta_of(dt_new);
        let change = (dt_new - delta_tilde).norm().max((dl_new - delta).norm());
        delta = dl_new;
        delta_tilde = dt_new;
        if change <= tol * 1e-3 {
            break;
        }
    }
    // Newton polish on the 2×2 system.
    for _ in 0..20 {
        let f1 = delta - delta_of(delta_tilde);
        let f2 = delta_tilde - delta_tilde_of(delta);
        if f1.norm().max(f2.norm()) < 1e-16 {
            break;
        }
        let d1: C64 = d.iter().map(|di| di * di / (-z * (1.0 + delta_tilde * di).powi(2))).sum::<C64>() / nt;
        let d2: C64 = d_tilde.iter().map(|dj| dj * dj / (-z * (1.0 + delta * dj).powi(2))).sum::<C64>() / nt;
        // ∂f1/∂δ = 1, ∂f1/∂δ̃ = d1, ∂f2/∂δ = d2, ∂f2/∂δ̃ = 1.
        let det = 1.0 - d1 * d2;
        if det.norm() < 1e-14 {
            break;
        }
        let step_dl = (f1 - d1 * f2) / det;
        let step_dt = (f2 - d2 * f1) / det;
        let (cand_dl, cand_dt) = (delta - step_dl, delta_tilde - step_dt);
        if resid(cand_dl, cand_dt) < resid(delta, delta_tilde) {
            delta = cand_dl;
            delta_tilde = cand_dt;
        } else {
            break;
        }
    }
    let residual = resid(delta, delta_tilde);
    if residual > tol || residual.is_nan() {
        return Err(SpecgramError::Iteration { iterations: 100_000, residual, z: z.to_string() });
    }
    Ok(ScalarMiEquivalent {
        z,
        delta,
        delta_tilde,
        t_diag: d.iter().map(|di| 1.0 / (-z * (1.0 + delta_tilde * di))).collect(),
        t_tilde_diag: d_tilde.iter().map(|dj| 1.0 / (-z * (1.0 + delta * dj))).collect(),
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::make_separable_profile;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const GOLDEN: f64 = 0.618_033_988_749_894_9;

    fn random_profile(p: usize, n: usize, seed: u64) -> VarianceProfile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..p * n).map(|_| rng.random_range(0.2..2.0)).collect();
        VarianceProfile::from_row_major(p, n, vals).unwrap()
    }

    fn uniform(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(1.0..2.0)).collect()
    }

    #[test]
    fn constant_profile_golden_ratio() {
        let prof = VarianceProfile::constant(30, 30, 1.0).unwrap();
        let det = solve_canonical_system(&prof, C64::new(-1.0, 0.0), 1e-12, 10_000).unwrap();
        for v in det.t.iter().chain(&det.t_tilde) {
            assert!((v - GOLDEN).norm() < 1e-10, "{v}");
        }
        let m = stieltjes_m0(&det);
        assert!((m.m0 - GOLDEN).norm() < 1e-10);
        assert!((m.m0 - m.m0_under).norm() < 1e-12);
    }

    #[test]
    fn stieltjes_class_at_i() {
        let prof = random_profile(7, 11, 3);
        let det = solve_canonical(&prof, C64::new(0.0, 1.0), &SolverOptions::default()).unwrap();
        assert!(det.t.iter().chain(&det.t_tilde).all(|v| v.im > 0.0));
        assert!(stieltjes_m0(&det).m0.im > 0.0);
        assert!(det.residual <= 1e-12);
    }

    #[test]
    fn positive_real_axis_is_rejected() {
        let prof = VarianceProfile::constant(3, 3, 1.0).unwrap();
        assert!(matches!(
            solve_canonical(&prof, C64::new(1.0, 0.0), &SolverOptions::default()),
            Err(SpecgramError::Domain(_))
        ));
    }

    #[test]
    fn iteration_budget_is_reported() {
        let prof = random_profile(6, 9, 5);
        let err = solve_canonical_system(&prof, C64::new(1.0, 0.5), 1e-12, 2).unwrap_err();
        assert!(matches!(err, SpecgramError::Iteration { .. }), "{err:?}");
    }

    #[test]
    fn conjugate_symmetry() {
        let prof = random_profile(5, 8, 9);
        let opts = SolverOptions::default();
        let z = C64::new(1.3, 0.4);
        let up = solve_canonical(&prof, z, &opts).unwrap();
        let down = solve_canonical(&prof, z.conj(), &opts).unwrap();
        for (a, b) in up.t.iter().zip(&down.t) {
            assert!((a.conj() - b).norm() < 1e-12);
        }
    }

    #[test]
    fn separable_matches_scalar_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (d, dt) = (uniform(40, &mut rng), uniform(60, &mut rng));
        let prof = make_separable_profile(&d, &dt).unwrap();
        let z = C64::new(-1.0, 0.0);
        let tol = 1e-12;
        let det = solve_canonical_system(&prof, z, tol, 10_000).unwrap();
        let scalar = solve_scalar_mi_system(&d, &dt, z, tol).unwrap();
        for (i, ti) in det.t.iter().enumerate() {
            let expected = 1.0 / (-z * (1.0 + scalar.delta_tilde * d[i]));
            assert!((ti - expected).norm() < 10.0 * tol);
            assert!((ti - scalar.t_diag[i]).norm() < 10.0 * tol);
        }
        for (j, tj) in det.t_tilde.iter().enumerate() {
            assert!((tj - scalar.t_tilde_diag[j]).norm() < 10.0 * tol);
        }
    }

    #[test]
    fn scalar_system_golden_and_large_noise() {
        let ones = vec![1.0; 25];
        let sol = solve_scalar_mi_system(&ones, &ones, C64::new(-1.0, 0.0), 1e-12).unwrap();
        assert!((sol.delta - GOLDEN).norm() < 1e-10);
        assert!((sol.delta_tilde - GOLDEN).norm() < 1e-10);
        let big = solve_scalar_mi_system(&ones, &ones, C64::new(-1e8, 0.0), 1e-12).unwrap();
        assert!(big.delta.norm() < 1e-7 && big.delta_tilde.norm() < 1e-7);
    }

    fn marchenko_pastur(x: f64, c: f64) -> f64 {
        let (a, b) = ((1.0 - c.sqrt()).powi(2), (1.0 + c.sqrt()).powi(2));
        if x <= a || x >= b {
            0.0
        } else {
            ((b - x) * (x - a)).sqrt() / (2.0 * std::f64::consts::PI * c * x)
        }
    }

    #[test]
    fn marchenko_pastur_density() {
        let prof = VarianceProfile::constant(100, 200, 1.0).unwrap();
        let grid: Vec<f64> = (1..400).map(|k| k as f64 * 0.01).collect();
        let eta = 1e-3;
        let dens = lsd_density(&prof, &grid, eta).unwrap();
        let (a, b) = ((1.0 - 0.5f64.sqrt()).powi(2), (1.0 + 0.5f64.sqrt()).powi(2));
        let flags = flag_near_edges(&grid, &dens, eta);
        let mut worst: f64 = 0.0;
        for ((x, d), flagged) in grid.iter().zip(&dens).zip(&flags) {
            if !flagged && (x - a).abs() > 0.05 && (x - b).abs() > 0.05 {
                worst = worst.max((d - marchenko_pastur(*x, 0.5)).abs());
            }
        }
        assert!(worst < 1e-2, "sup error {worst}");
        let mass: f64 = grid.windows(2).zip(dens.windows(2)).map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1])).sum();
        assert!((mass - 1.0).abs() < 1e-2, "mass {mass}");
    }

    #[test]
    fn support_bound_formula() {
        assert_eq!(spectral_support_bound(&VarianceProfile::constant(4, 4, 1.0).unwrap()), 4.0);
        assert_eq!(spectral_support_bound(&VarianceProfile::constant(1, 4, 2.0).unwrap()), 4.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn defect_and_stieltjes_class(seed in 0u64..500, re in -3.0f64..6.0, im in 0.05f64..3.0) {
            let prof = random_profile(6, 9, seed);
            let det = solve_canonical(&prof, C64::new(re, im), &SolverOptions::default()).unwrap();
            prop_assert!(det.residual <= 1e-12);
            prop_assert!(det.t.iter().chain(&det.t_tilde).all(|v| v.im > 0.0));
            let n = prof.n() as f64;
            for i in 0..prof.p() {
                let acc: C64 = (0..prof.n()).map(|j| det.t_tilde[j] * prof.get(i, j)).sum();
                let rhs = -1.0 / (det.z * (1.0 + acc / n));
                prop_assert!((det.t[i] - rhs).norm() <= 1e-12);
            }
        }
    }
}
