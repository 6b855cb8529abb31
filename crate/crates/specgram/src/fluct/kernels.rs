//! Kernel building blocks at one spectral argument or a pair of them.
//!
//! All systems are assembled on the compressed profile: identical rows and
//! columns share their unknowns, so an n×n system with column classes of
//! multiplicities W collapses to an L×L system. With A = P·A_r·Pᵀ (P the
//! class indicator) the identities used are
//!
//! - (I − A)ψ = θ  ⇔  (I − A_r W)ψ_r = θ_r,
//! - (I − A)⁻¹ = I + P (I − A_r W)⁻¹ A_r Pᵀ,
//! - det of the leading j×j block of I − A = det(I − A_r W_j), with W_j the
//!   class counts among the first j columns.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::detequiv::DetEquivalent;
use crate::error::{Result, SpecgramError};
use crate::linalg::{identity_minus, unpivoted_lu_pivots, ComplexLu, C64};
use crate::profile::{EntryModel, ReducedProfile, Regime, SparsityConfig, VarianceProfile};

/// Threshold on |1 + (1/n)Tr Σ_l T| below which kernels are declared singular.
pub const DENOMINATOR_THRESHOLD: f64 = 1e-8;

/// Which column index carries the second denominator factor of a_lm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AReading {
    /// Both factors indexed by l.
    #[default]
    AsPrinted,
    /// Second factor indexed by m.
    Symmetric,
}

/// How the diagonal U-system unknowns are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UStrategy {
    /// Sherman–Morrison on (I − A)⁻¹: y̆_jj = n(1 − 1/[(I − A)⁻¹]_jj).
    #[default]
    RankOne,
    /// One dense solve per j on the expanded system.
    PerColumn,
}

/// Solutions U_j (length n) and Ũ_i (length p).
#[derive(Debug, Clone, PartialEq)]
pub struct USystems {
    pub u: Vec<C64>,
    pub u_tilde: Vec<C64>,
}

/// Class-level view of a solved equivalent.
#[derive(Debug, Clone)]
pub(crate) struct ClassDet {
    pub z: C64,
    pub t: Vec<C64>,
    pub tt: Vec<C64>,
}

impl ClassDet {
    pub fn new(red: &ReducedProfile, det: &DetEquivalent) -> Self {
        Self {
            z: det.z,
            t: red.row_rep.iter().map(|&i| det.t[i]).collect(),
            tt: red.col_rep.iter().map(|&j| det.t_tilde[j]).collect(),
        }
    }

    pub fn conj(&self) -> Self {
        Self {
            z: self.z.conj(),
            t: self.t.iter().map(|v| v.conj()).collect(),
            tt: self.tt.iter().map(|v| v.conj()).collect(),
        }
    }
}

fn check_same_profile(profile: &VarianceProfile, det: &DetEquivalent) -> Result<()> {
    if det.t.len() != profile.p() || det.t_tilde.len() != profile.n() {
        return Err(SpecgramError::Validation(format!(
            "equivalent has dimensions {}x{}, profile is {}x{}",
            det.t.len(),
            det.t_tilde.len(),
            profile.p(),
            profile.n()
        )));
    }
    Ok(())
}

/// Real matrix product Vᵀ·diag(w)·V split into real and imaginary parts.
fn weighted_gram_cols(v: &DMatrix<f64>, w: &[C64]) -> DMatrix<C64> {
    let scaled_re = DMatrix::from_fn(v.nrows(), v.ncols(), |r, c| v[(r, c)] * w[r].re);
    let scaled_im = DMatrix::from_fn(v.nrows(), v.ncols(), |r, c| v[(r, c)] * w[r].im);
    let re = v.tr_mul(&scaled_re);
    let im = v.tr_mul(&scaled_im);
    DMatrix::from_fn(re.nrows(), re.ncols(), |i, j| C64::new(re[(i, j)], im[(i, j)]))
}

/// Real matrix product V·diag(w)·Vᵀ split into real and imaginary parts.
fn weighted_gram_rows(v: &DMatrix<f64>, w: &[C64]) -> DMatrix<C64> {
    let scaled_re = DMatrix::from_fn(v.nrows(), v.ncols(), |r, c| v[(r, c)] * w[c].re);
    let scaled_im = DMatrix::from_fn(v.nrows(), v.ncols(), |r, c| v[(r, c)] * w[c].im);
    let re = scaled_re * v.transpose();
    let im = scaled_im * v.transpose();
    DMatrix::from_fn(re.nrows(), re.ncols(), |i, j| C64::new(re[(i, j)], im[(i, j)]))
}

/// d_c(z) = 1 + (1/n)Σ_r m_r v_rc t_r(z).
fn column_denominators(red: &ReducedProfile, n: f64, det: &ClassDet) -> Result<Vec<C64>> {
    let l = red.cols();
    let mut d = vec![C64::new(0.0, 0.0); l];
    for (r, tr) in det.t.iter().enumerate() {
        let w = tr * red.row_weight[r];
        for (dc, v) in d.iter_mut().zip(&red.values[r * l..(r + 1) * l]) {
            *dc += w * v;
        }
    }
    d.iter_mut().for_each(|v| *v = 1.0 + *v / n);
    if let Some(c) = d.iter().position(|v| v.norm() < DENOMINATOR_THRESHOLD) {
        return Err(SpecgramError::Singularity(format!(
            "denominator 1 + Tr(Σ_l T)/n vanishes for column l = {} at z = {}",
            red.col_rep[c], det.z
        )));
    }
    Ok(d)
}

/// Class-level A(z1, z2), without multiplicities.
pub(crate) fn class_a_matrix(
    red: &ReducedProfile,
    n: f64,
    d1: &ClassDet,
    d2: &ClassDet,
    reading: AReading,
) -> Result<DMatrix<C64>> {
    let den1 = column_denominators(red, n, d1)?;
    let den2 = column_denominators(red, n, d2)?;
    let w: Vec<C64> = (0..red.rows()).map(|r| d1.t[r] * d2.t[r] * red.row_weight[r]).collect();
    let mut a = weighted_gram_cols(&red.matrix, &w);
    let scale = 1.0 / (n * n);
    let rows = a.nrows();
    for (idx, v) in a.iter_mut().enumerate() {
        let (l, m) = (idx % rows, idx / rows);
        let denom = match reading {
            AReading::AsPrinted => den1[l] * den2[l],
            AReading::Symmetric => den1[l] * den2[m],
        };
        *v *= scale / denom;
    }
    Ok(a)
}

/// Class-level Á(z): á_rr′ = (1/n²)Σ_c μ_c v_rc v_r′c t̃_c² / (1 + (1/n)Σ_c μ_c v_rc t̃_c)².
pub(crate) fn class_a_tilde_matrix(red: &ReducedProfile, n: f64, det: &ClassDet) -> Result<DMatrix<C64>> {
    let l = red.cols();
    let w: Vec<C64> = (0..l).map(|c| det.tt[c] * det.tt[c] * red.col_weight[c]).collect();
    let mut a = weighted_gram_rows(&red.matrix, &w);
    let den: Vec<C64> = (0..red.rows())
        .map(|r| {
            1.0 + (0..l).map(|c| det.tt[c] * (red.col_weight[c] * red.values[r * l + c])).sum::<C64>() / n
        })
        .collect();
    if let Some(r) = den.iter().position(|v| v.norm() < DENOMINATOR_THRESHOLD) {
        return Err(SpecgramError::Singularity(format!(
            "denominator 1 + Tr(Σ̃_i T̃)/n vanishes for row i = {} at z = {}",
            red.row_rep[r], det.z
        )));
    }
    let scale = 1.0 / (n * n);
    for r in 0..a.nrows() {
        let f = scale / (den[r] * den[r]);
        for c in 0..a.ncols() {
            a[(r, c)] *= f;
        }
    }
    Ok(a)
}

/// I − X·diag(weights).
fn identity_minus_weighted(x: &DMatrix<C64>, weights: &[f64]) -> DMatrix<C64> {
    let k = x.nrows();
    DMatrix::from_fn(k, k, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        C64::new(delta, 0.0) - x[(i, j)] * weights[j]
    })
}

/// Diagonal of (I − X W)⁻¹ X, i.e. [(I − A)⁻¹]_jj − 1 per class.
fn resolvent_excess_diagonal(lu: &ComplexLu, x: &DMatrix<C64>) -> Vec<C64> {
    (0..x.ncols())
        .map(|c| {
            let col: Vec<C64> = x.column(c).iter().copied().collect();
            lu.solve(&col)[c]
        })
        .collect()
}

fn expand(values: &[C64], classes: &[usize]) -> Vec<C64> {
    classes.iter().map(|&k| values[k]).collect()
}

fn expand_matrix(x: &DMatrix<C64>, classes: &[usize]) -> DMatrix<C64> {
    let dim = classes.len();
    DMatrix::from_fn(dim, dim, |i, j| x[(classes[i], classes[j])])
}

/// The n×n matrix A(z1, z2), using the printed denominator.
pub fn a_matrix(profile: &VarianceProfile, det1: &DetEquivalent, det2: &DetEquivalent) -> Result<DMatrix<C64>> {
    a_matrix_with(profile, det1, det2, AReading::AsPrinted)
}

/// [`a_matrix`] with a choice of denominator reading.
pub fn a_matrix_with(
    profile: &VarianceProfile,
    det1: &DetEquivalent,
    det2: &DetEquivalent,
    reading: AReading,
) -> Result<DMatrix<C64>> {
    check_same_profile(profile, det1)?;
    check_same_profile(profile, det2)?;
    let red = profile.reduced();
    let a = class_a_matrix(&red, profile.n() as f64, &ClassDet::new(&red, det1), &ClassDet::new(&red, det2), reading)?;
    Ok(expand_matrix(&a, &red.col_class))
}

/// The p×p matrix Á(z) of the Ũ system.
pub fn a_tilde_matrix(profile: &VarianceProfile, det: &DetEquivalent) -> Result<DMatrix<C64>> {
    check_same_profile(profile, det)?;
    let red = profile.reduced();
    let a = class_a_tilde_matrix(&red, profile.n() as f64, &ClassDet::new(&red, det))?;
    Ok(expand_matrix(&a, &red.row_class))
}

/// Solution y̆_{·,j} of y_l = Σ_{i≠j} a_li y_i + scale·a_lj, where scale is n for both U and Ũ.
pub fn u_system_solution(a: &DMatrix<C64>, j: usize, scale: f64) -> Result<Vec<C64>> {
    let dim = a.nrows();
    let m = DMatrix::from_fn(dim, dim, |l, i| {
        let delta = if l == i { 1.0 } else { 0.0 };
        if i == j { C64::new(delta, 0.0) } else { C64::new(delta, 0.0) - a[(l, i)] }
    });
    let rhs: Vec<C64> = (0..dim).map(|l| a[(l, j)] * scale).collect();
    let lu = ComplexLu::factor(&m, &format!("U system for index {j}"))?;
    Ok(lu.solve(&rhs))
}

/// Solves the U and Ũ systems at the argument of `det`.
pub fn solve_u_systems(profile: &VarianceProfile, det: &DetEquivalent) -> Result<USystems> {
    solve_u_systems_with(profile, det, UStrategy::RankOne, AReading::AsPrinted)
}

/// [`solve_u_systems`] with explicit strategy and denominator reading.
pub fn solve_u_systems_with(
    profile: &VarianceProfile,
    det: &DetEquivalent,
    strategy: UStrategy,
    reading: AReading,
) -> Result<USystems> {
    check_same_profile(profile, det)?;
    let red = profile.reduced();
    let cd = ClassDet::new(&red, det);
    let n = profile.n() as f64;
    match strategy {
        UStrategy::RankOne => {
            let a = class_a_matrix(&red, n, &cd, &cd, reading)?;
            let lu = ComplexLu::factor(&identity_minus_weighted(&a, &red.col_weight), "I − A(z,z)")?;
            let (u, u_tilde) = class_u_rank_one(&red, n, &cd, &a, &lu)?;
            Ok(USystems { u: expand(&u, &red.col_class), u_tilde: expand(&u_tilde, &red.row_class) })
        }
        UStrategy::PerColumn => {
            let a = expand_matrix(&class_a_matrix(&red, n, &cd, &cd, reading)?, &red.col_class);
            let at = expand_matrix(&class_a_tilde_matrix(&red, n, &cd)?, &red.row_class);
            let z2 = det.z * det.z;
            let u = crate::par::try_map_indexed(profile.n(), |j| {
                Ok(u_system_solution(&a, j, n)?[j] / (z2 * det.t_tilde[j] * det.t_tilde[j]))
            })?;
            let u_tilde = crate::par::try_map_indexed(profile.p(), |i| {
                Ok(u_system_solution(&at, i, n)?[i] / (z2 * det.t[i] * det.t[i]))
            })?;
            Ok(USystems { u, u_tilde })
        }
    }
}

/// Class-level U and Ũ via the rank-one identity; `lu` factors I − A_r W.
pub(crate) fn class_u_rank_one(
    red: &ReducedProfile,
    n: f64,
    cd: &ClassDet,
    a: &DMatrix<C64>,
    lu: &ComplexLu,
) -> Result<(Vec<C64>, Vec<C64>)> {
    let z2 = cd.z * cd.z;
    let excess = resolvent_excess_diagonal(lu, a);
    let u = excess
        .iter()
        .enumerate()
        .map(|(c, e)| n * (1.0 - 1.0 / (1.0 + e)) / (z2 * cd.tt[c] * cd.tt[c]))
        .collect();
    let at = class_a_tilde_matrix(red, n, cd)?;
    let lu_t = ComplexLu::factor(&identity_minus_weighted(&at, &red.row_weight), "I − Á(z)")?;
    let excess_t = resolvent_excess_diagonal(&lu_t, &at);
    let u_tilde = excess_t
        .iter()
        .enumerate()
        .map(|(r, e)| n * (1.0 - 1.0 / (1.0 + e)) / (z2 * cd.t[r] * cd.t[r]))
        .collect();
    Ok((u, u_tilde))
}

/// Class-level θ. `u` is required in the moderate regime only.
pub(crate) fn class_theta(
    red: &ReducedProfile,
    p: f64,
    n: f64,
    cd: &ClassDet,
    sparsity: &SparsityConfig,
    model: &EntryModel,
    u: Option<(&[C64], &[C64])>,
) -> Vec<C64> {
    let (k, l) = (red.rows(), red.cols());
    let z = cd.z;
    let kappa = model.kappa as f64;
    let v = |r: usize, c: usize| red.values[r * l + c];
    // Hadamard traces Tr(T̃∘T̃∘Σ̃_i²) and Tr(T∘T∘Σ_j²).
    let had_t: Vec<C64> = (0..k)
        .map(|r| (0..l).map(|c| cd.tt[c] * cd.tt[c] * (red.col_weight[c] * v(r, c) * v(r, c))).sum())
        .collect();
    let had_s: Vec<C64> = (0..l)
        .map(|c| (0..k).map(|r| cd.t[r] * cd.t[r] * (red.row_weight[r] * v(r, c) * v(r, c))).sum())
        .collect();
    let lead = n * model.nu4 / (sparsity.q * p.sqrt());
    let side = sparsity.q / p.sqrt();
    (0..l)
        .map(|c| {
            let tt = cd.tt[c];
            let w1: C64 = (0..k).map(|r| cd.t[r].powi(3) * had_t[r] * (red.row_weight[r] * v(r, c))).sum();
            let mut theta = lead * (z.powi(3) * tt * tt * w1 / (n * n) + z * z * tt.powi(3) * had_s[c] / n);
            if sparsity.regime == Regime::Moderate {
                let (u, u_tilde) = u.expect("moderate regime needs U systems");
                let w2: C64 = (0..k)
                    .map(|r| {
                        cd.t[r].powi(3)
                            * (kappa * u_tilde[r] - (kappa + 2.0) / n * had_t[r])
                            * (red.row_weight[r] * v(r, c))
                    })
                    .sum();
                theta += side
                    * (z.powi(3) * tt * tt * w2 / n
                        + z * z * tt.powi(3) * (kappa * u[c] - (kappa + 2.0) / n * had_s[c]));
            }
            theta
        })
        .collect()
}

/// θ_j sources of the mean system (length n).
pub fn theta_sources(
    profile: &VarianceProfile,
    det: &DetEquivalent,
    sparsity: &SparsityConfig,
    model: &EntryModel,
    u: &USystems,
) -> Result<Vec<C64>> {
    check_same_profile(profile, det)?;
    let red = profile.reduced();
    let cd = ClassDet::new(&red, det);
    let u_red: Vec<C64> = red.col_rep.iter().map(|&j| u.u[j]).collect();
    let ut_red: Vec<C64> = red.row_rep.iter().map(|&i| u.u_tilde[i]).collect();
    let theta = class_theta(
        &red,
        profile.p() as f64,
        profile.n() as f64,
        &cd,
        sparsity,
        model,
        Some((&u_red, &ut_red)),
    );
    Ok(expand(&theta, &red.col_class))
}

/// Everything computed while evaluating the mean kernel at one argument.
#[derive(Debug, Clone)]
pub struct FluctKernelCache {
    pub z: C64,
    pub det: DetEquivalent,
    /// A(z, z), n×n.
    pub a: DMatrix<C64>,
    /// U and Ũ (moderate regime only).
    pub u: Option<USystems>,
    pub theta: Vec<C64>,
    pub psi: Vec<C64>,
    /// ℰ_n(z) = (1/n)Σ_j ψ_j.
    pub kernel: C64,
}

/// Kernel value, A(z,z), the optional (U, Ũ) pair, θ and ψ.
type MeanParts = (C64, DMatrix<C64>, Option<(Vec<C64>, Vec<C64>)>, Vec<C64>, Vec<C64>);

/// Class-level mean kernel ℰ_n(z).
pub(crate) fn class_mean_kernel(
    red: &ReducedProfile,
    p: f64,
    n: f64,
    cd: &ClassDet,
    sparsity: &SparsityConfig,
    model: &EntryModel,
    reading: AReading,
) -> Result<MeanParts> {
    let a = class_a_matrix(red, n, cd, cd, reading)?;
    let lu = ComplexLu::factor(&identity_minus_weighted(&a, &red.col_weight), "I − A(z,z)")?;
    let u = match sparsity.regime {
        Regime::Moderate => Some(class_u_rank_one(red, n, cd, &a, &lu)?),
        Regime::High => None,
    };
    let theta = class_theta(red, p, n, cd, sparsity, model, u.as_ref().map(|(x, y)| (x.as_slice(), y.as_slice())));
    let psi = lu.solve(&theta);
    let kernel = psi.iter().zip(&red.col_weight).map(|(v, w)| v * *w).sum::<C64>() / n;
    Ok((kernel, a, u, theta, psi))
}

/// Mean kernel with all intermediate quantities, expanded to full length.
pub fn mean_kernel_cache(
    profile: &VarianceProfile,
    det: &DetEquivalent,
    sparsity: &SparsityConfig,
    model: &EntryModel,
    reading: AReading,
) -> Result<FluctKernelCache> {
    check_same_profile(profile, det)?;
    let red = profile.reduced();
    let cd = ClassDet::new(&red, det);
    let (kernel, a, u, theta, psi) =
        class_mean_kernel(&red, profile.p() as f64, profile.n() as f64, &cd, sparsity, model, reading)?;
    Ok(FluctKernelCache {
        z: det.z,
        det: det.clone(),
        a: expand_matrix(&a, &red.col_class),
        u: u.map(|(u, ut)| USystems { u: expand(&u, &red.col_class), u_tilde: expand(&ut, &red.row_class) }),
        theta: expand(&theta, &red.col_class),
        psi: expand(&psi, &red.col_class),
        kernel,
    })
}

/// Σ_j H_jj(z1, z2) = n·Σ_j (1 − pivot_j) for the unpivoted LU of I − A(z1, z2).
pub(crate) fn class_h_sum(red: &ReducedProfile, n: f64, a: &DMatrix<C64>) -> Result<C64> {
    Ok(class_h_diagonal(red, n, a)?.into_iter().sum())
}

/// H_jj(z1, z2) in original column order.
pub(crate) fn class_h_diagonal(red: &ReducedProfile, n: f64, a: &DMatrix<C64>) -> Result<Vec<C64>> {
    let l = red.cols();
    if red.col_class.len() == l {
        // No duplicate columns: classes are the columns in their original order.
        let pivots = unpivoted_lu_pivots(&identity_minus(a), "H system")?;
        return Ok(pivots.into_iter().map(|u| n * (1.0 - u)).collect());
    }
    // Sherman–Morrison recursion on B_j = I − A_r W_j, tracking B_j⁻¹.
    let mut b_inv = DMatrix::<C64>::identity(l, l);
    let mut out = Vec::with_capacity(red.col_class.len());
    for (j, &c) in red.col_class.iter().enumerate() {
        let y: Vec<C64> = (0..l).map(|i| (0..l).map(|k| b_inv[(i, k)] * a[(k, c)]).sum()).collect();
        let pivot = 1.0 - y[c];
        if pivot.norm() < crate::linalg::PIVOT_THRESHOLD {
            return Err(SpecgramError::LinearAlgebra {
                context: "H system".into(),
                index: j,
                pivot: pivot.norm(),
            });
        }
        out.push(n * y[c]);
        let row: Vec<C64> = (0..l).map(|k| b_inv[(c, k)]).collect();
        for i in 0..l {
            let f = y[i] / pivot;
            for k in 0..l {
                b_inv[(i, k)] += f * row[k];
            }
        }
    }
    Ok(out)
}

/// T¹_r(z) = 1/(1 + (1/n)Σ_c μ_c t̃_c v_rc).
pub(crate) fn class_t_one(red: &ReducedProfile, n: f64, cd: &ClassDet) -> Vec<C64> {
    let l = red.cols();
    (0..red.rows())
        .map(|r| {
            let acc: C64 = (0..l).map(|c| cd.tt[c] * (red.col_weight[c] * red.values[r * l + c])).sum();
            1.0 / (1.0 + acc / n)
        })
        .collect()
}

/// Coefficients of ΣH_jj and of the Hadamard sum in G(z1, z2).
pub(crate) fn covariance_coefficients(p: f64, n: f64, sparsity: &SparsityConfig, model: &EntryModel) -> (f64, f64) {
    let (s, kappa) = (sparsity.s, model.kappa as f64);
    match sparsity.regime {
        Regime::Moderate => (s * (kappa + 1.0) / p, (model.nu4 - kappa * s - 2.0 * s) / (p * n)),
        Regime::High => (0.0, model.nu4 / (p * n)),
    }
}

/// Σ_j t̃_j(z1)t̃_j(z2)·Σ_i T¹_i(z1)T¹_i(z2)σ⁴_ij.
pub(crate) fn class_hadamard_sum(red: &ReducedProfile, n: f64, d1: &ClassDet, d2: &ClassDet) -> C64 {
    let (t1a, t1b) = (class_t_one(red, n, d1), class_t_one(red, n, d2));
    let l = red.cols();
    let mut total = C64::new(0.0, 0.0);
    for r in 0..red.rows() {
        let tr = t1a[r] * t1b[r] * red.row_weight[r];
        for c in 0..l {
            let v = red.values[r * l + c];
            total += tr * d1.tt[c] * d2.tt[c] * (red.col_weight[c] * v * v);
        }
    }
    total
}

/// Quantities computed for the covariance kernel at one pair of arguments.
#[derive(Debug, Clone)]
pub struct PairKernelCache {
    pub z1: C64,
    pub z2: C64,
    /// H_jj(z1, z2); empty in the high regime where the H term is absent.
    pub h_diag: Vec<C64>,
    pub hadamard_sum: C64,
    /// G(z1, z2), the function whose mixed derivative is the covariance kernel.
    pub kernel: C64,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn class_g(
    red: &ReducedProfile,
    p: f64,
    n: f64,
    d1: &ClassDet,
    d2: &ClassDet,
    sparsity: &SparsityConfig,
    model: &EntryModel,
    reading: AReading,
) -> Result<C64> {
    let (coef_h, coef_had) = covariance_coefficients(p, n, sparsity, model);
    let mut g = coef_had * class_hadamard_sum(red, n, d1, d2);
    if coef_h != 0.0 {
        let a = class_a_matrix(red, n, d1, d2, reading)?;
        g += coef_h * class_h_sum(red, n, &a)?;
    }
    Ok(g)
}

/// G(z1, z2) with its H diagonal.
pub fn covariance_kernel(
    profile: &VarianceProfile,
    det1: &DetEquivalent,
    det2: &DetEquivalent,
    sparsity: &SparsityConfig,
    model: &EntryModel,
    reading: AReading,
) -> Result<PairKernelCache> {
    check_same_profile(profile, det1)?;
    check_same_profile(profile, det2)?;
    let red = profile.reduced();
    let (p, n) = (profile.p() as f64, profile.n() as f64);
    let (d1, d2) = (ClassDet::new(&red, det1), ClassDet::new(&red, det2));
    let (coef_h, coef_had) = covariance_coefficients(p, n, sparsity, model);
    let hadamard_sum = class_hadamard_sum(&red, n, &d1, &d2);
    let h_diag = if coef_h != 0.0 {
        class_h_diagonal(&red, n, &class_a_matrix(&red, n, &d1, &d2, reading)?)?
    } else {
        Vec::new()
    };
    let kernel = coef_had * hadamard_sum + coef_h * h_diag.iter().sum::<C64>();
    Ok(PairKernelCache { z1: det1.z, z2: det2.z, h_diag, hadamard_sum, kernel })
}
