//! CLT mean and covariance of linear spectral statistics.
//!
//! Kernels are evaluated on the nodes of rectangular contours. Every kernel
//! satisfies K(z̄) = conj K(z) and every supported test function is real on
//! the real axis, so only upper-half nodes are ever solved.

mod contour;
mod kernels;

pub use contour::{
    ComplexFn, Contour, ContourNode, LssRoute, QuadratureRule, TestFunction, DEFAULT_NODES_PER_EDGE,
    SECOND_CONTOUR_DILATION,
};
pub use kernels::{
    a_matrix, a_matrix_with, a_tilde_matrix, covariance_kernel, mean_kernel_cache, solve_u_systems,
    solve_u_systems_with, theta_sources, u_system_solution, AReading, FluctKernelCache, PairKernelCache,
    UStrategy, USystems, DENOMINATOR_THRESHOLD,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::detequiv::{solve_canonical, stieltjes_m0, DetEquivalent, SolverOptions};
use crate::error::{Result, SpecgramError};
use crate::linalg::C64;
use crate::par;
use crate::profile::{EntryModel, Regime, SparsityConfig, VarianceProfile};
use kernels::ClassDet;

/// Numerical settings shared by the contour integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluctOptions {
    pub solver: SolverOptions,
    pub a_reading: AReading,
    /// Repeat each integral with doubled nodes and report the change.
    pub convergence_check: bool,
    /// Relative change above which a warning is attached.
    pub convergence_tol: f64,
}

impl Default for FluctOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            a_reading: AReading::AsPrinted,
            convergence_check: true,
            convergence_tol: 1e-6,
        }
    }
}

impl FluctOptions {
    pub fn without_convergence_check(self) -> Self {
        Self { convergence_check: false, ..self }
    }
}

/// Value of a contour integral with its convergence diagnostics.
///
/// The check re-evaluates on ⌈2N/3⌉ nodes per edge. For a geometrically
/// convergent rule the gap bounds the error of the coarse value, and hence
/// (conservatively) that of the reported one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureResult {
    pub value: f64,
    pub nodes_per_edge: usize,
    pub rule: QuadratureRule,
    pub coarse_value: Option<f64>,
    pub relative_change: Option<f64>,
    pub warning: Option<String>,
}

fn with_refinement(
    contour_nodes: usize,
    rule: QuadratureRule,
    opts: &FluctOptions,
    eval: impl Fn(usize) -> Result<f64>,
) -> Result<QuadratureResult> {
    let value = eval(contour_nodes)?;
    let mut out = QuadratureResult {
        value,
        nodes_per_edge: contour_nodes,
        rule,
        coarse_value: None,
        relative_change: None,
        warning: None,
    };
    if opts.convergence_check && contour_nodes >= 2 {
        let coarse = eval((2 * contour_nodes).div_ceil(3))?;
        let change = (coarse - value).abs();
        let rel = change / value.abs().max(f64::MIN_POSITIVE);
        out.coarse_value = Some(coarse);
        out.relative_change = Some(rel);
        if change > opts.convergence_tol * value.abs() + 1e-12 {
            out.warning = Some(format!(
                "a coarser node set changed the result by {rel:.2e} (relative); consider more nodes or a larger v0"
            ));
        }
    }
    Ok(out)
}

fn contour_error(err: SpecgramError, z: C64) -> SpecgramError {
    match err {
        SpecgramError::Singularity(msg) | SpecgramError::Iteration { z: msg, .. } => SpecgramError::Contour(format!(
            "kernel failed on the contour at z = {z} ({msg}); try a larger v0 or x_right"
        )),
        other => other,
    }
}

fn solve_nodes(profile: &VarianceProfile, nodes: &[ContourNode], opts: &FluctOptions) -> Result<Vec<DetEquivalent>> {
    par::try_map_indexed(nodes.len(), |k| {
        solve_canonical(profile, nodes[k].z, &opts.solver).map_err(|e| contour_error(e, nodes[k].z))
    })
}

/// ℰ_n(z) = (1/n)Σ_j ψ_j with (I − A(z,z))ψ = θ.
pub fn mean_kernel(profile: &VarianceProfile, z: C64, sparsity: &SparsityConfig, model: &EntryModel) -> Result<C64> {
    let det = solve_canonical(profile, z, &SolverOptions::default())?;
    Ok(mean_kernel_cache(profile, &det, sparsity, model, AReading::AsPrinted)?.kernel)
}

/// ∫ f dπ_n = −(1/2πi)∮ f(z) m⁰_n(z) dz.
pub fn equivalent_integral(
    profile: &VarianceProfile,
    f: &TestFunction,
    contour: &Contour,
    opts: &FluctOptions,
) -> Result<QuadratureResult> {
    contour.validate_for(profile, &[f])?;
    with_refinement(contour.nodes_per_edge, contour.rule, opts, |nodes| {
        let c = contour.with_nodes(nodes);
        let up = c.upper_nodes();
        let dets = solve_nodes(profile, &up, opts)?;
        let j: C64 = up
            .iter()
            .zip(&dets)
            .map(|(nd, det)| nd.weight * f.value(nd.z) * stieltjes_m0(det).m0)
            .sum();
        Ok(-j.im / PI)
    })
}

fn mean_integral(
    profile: &VarianceProfile,
    f: &TestFunction,
    contour: &Contour,
    sparsity: &SparsityConfig,
    model: &EntryModel,
    opts: &FluctOptions,
) -> Result<QuadratureResult> {
    contour.validate_for(profile, &[f])?;
    if f.is_zero() {
        return with_refinement(contour.nodes_per_edge, contour.rule, opts, |_| Ok(0.0));
    }
    let red = profile.reduced();
    let (p, n) = (profile.p() as f64, profile.n() as f64);
    with_refinement(contour.nodes_per_edge, contour.rule, opts, |nodes| {
        let up = contour.with_nodes(nodes).upper_nodes();
        let terms = par::try_map_indexed(up.len(), |k| {
            let nd = up[k];
            let det = solve_canonical(profile, nd.z, &opts.solver).map_err(|e| contour_error(e, nd.z))?;
            let cd = ClassDet::new(&red, &det);
            let (kernel, ..) = kernels::class_mean_kernel(&red, p, n, &cd, sparsity, model, opts.a_reading)
                .map_err(|e| contour_error(e, nd.z))?;
            Ok(nd.weight * f.value(nd.z) * kernel)
        })?;
        let j: C64 = terms.into_iter().sum();
        Ok(-j.im / PI)
    })
}

/// μ_n(X_f) = −(1/2πi)∮ f ℰ_n dz.
pub fn clt_mean(
    profile: &VarianceProfile,
    f: &TestFunction,
    contour: &Contour,
    sparsity: &SparsityConfig,
    model: &EntryModel,
) -> Result<QuadratureResult> {
    clt_mean_with(profile, f, contour, sparsity, model, &FluctOptions::default())
}

/// [`clt_mean`] with explicit options.
pub fn clt_mean_with(
    profile: &VarianceProfile,
    f: &TestFunction,
    contour: &Contour,
    sparsity: &SparsityConfig,
    model: &EntryModel,
    opts: &FluctOptions,
) -> Result<QuadratureResult> {
    mean_integral(profile, f, contour, sparsity, model, opts)
}

/// +(1/2πi)∮ f ℰ_n dz with the ν̃₄-only sources, the additive correction of the
/// high-sparsity statistic.
pub fn corrected_centering(
    profile: &VarianceProfile,
    f: &TestFunction,
    contour: &Contour,
    sparsity: &SparsityConfig,
    model: &EntryModel,
) -> Result<QuadratureResult> {
    corrected_centering_with(profile, f, contour, sparsity, model, &FluctOptions::default())
}

/// [`corrected_centering`] with explicit options.
pub fn corrected_centering_with(
    profile: &VarianceProfile,
    f: &TestFunction,
    contour: &Contour,
    sparsity: &SparsityConfig,
    model: &EntryModel,
    opts: &FluctOptions,
) -> Result<QuadratureResult> {
    if sparsity.regime != Regime::High {
        return Err(SpecgramError::Validation("the corrected centering applies to the high regime".into()));
    }
    let mut out = mean_integral(profile, f, contour, sparsity, model, opts)?;
    out.value = -out.value;
    out.coarse_value = out.coarse_value.map(|v| -v);
    Ok(out)
}

fn check_covariance_contours(
    profile: &VarianceProfile,
    f: &TestFunction,
    g: &TestFunction,
    contour1: &Contour,
    contour2: &Contour,
) -> Result<()> {
    contour1.validate_for(profile, &[f, g])?;
    contour2.validate_for(profile, &[f, g])?;
    if !contour1.is_nested_with(contour2) {
        return Err(SpecgramError::Contour("covariance contours must be nested without touching".into()));
    }
    Ok(())
}

/// ν_n(X_f, X_g) = −(1/4π²)∮∮ f′(z1) g′(z2) G(z1, z2) dz1 dz2.
pub fn clt_cov(
    profile: &VarianceProfile,
    f: &TestFunction,
    g: &TestFunction,
    contour1: &Contour,
    contour2: &Contour,
    sparsity: &SparsityConfig,
    model: &EntryModel,
) -> Result<QuadratureResult> {
    clt_cov_with(profile, f, g, contour1, contour2, sparsity, model, &FluctOptions::default())
}

/// [`clt_cov`] with explicit options.
#[allow(clippy::too_many_arguments)]
pub fn clt_cov_with(
    profile: &VarianceProfile,
    f: &TestFunction,
    g: &TestFunction,
    contour1: &Contour,
    contour2: &Contour,
    sparsity: &SparsityConfig,
    model: &EntryModel,
    opts: &FluctOptions,
) -> Result<QuadratureResult> {
    check_covariance_contours(profile, f, g, contour1, contour2)?;
    if f.is_zero() || g.is_zero() {
        return with_refinement(contour1.nodes_per_edge, contour1.rule, opts, |_| Ok(0.0));
    }
    let red = profile.reduced();
    let (p, n) = (profile.p() as f64, profile.n() as f64);
    let (coef_h, coef_had) = kernels::covariance_coefficients(p, n, sparsity, model);
    let scale2 = contour2.nodes_per_edge as f64 / contour1.nodes_per_edge as f64;
    with_refinement(contour1.nodes_per_edge, contour1.rule, opts, |nodes| {
        let c1 = contour1.with_nodes(nodes);
        let c2 = contour2.with_nodes(((nodes as f64) * scale2).round().max(1.0) as usize);
        let (up1, up2) = (c1.upper_nodes(), c2.upper_nodes());
        let d1: Vec<ClassDet> = solve_nodes(profile, &up1, opts)?.iter().map(|d| ClassDet::new(&red, d)).collect();
        let d2: Vec<ClassDet> = solve_nodes(profile, &up2, opts)?.iter().map(|d| ClassDet::new(&red, d)).collect();

        // The Hadamard term factorizes over (row class, column class).
        let (k, l) = (red.rows(), red.cols());
        let moments = |nodes: &[ContourNode], dets: &[ClassDet], h: &TestFunction| -> Vec<C64> {
            let mut acc = vec![C64::new(0.0, 0.0); k * l];
            for (nd, det) in nodes.iter().zip(dets) {
                let t_one = kernels::class_t_one(&red, n, det);
                let wf = nd.weight * h.derivative(nd.z);
                for r in 0..k {
                    for c in 0..l {
                        acc[r * l + c] += wf * det.tt[c] * t_one[r];
                    }
                }
            }
            acc
        };
        let m1 = moments(&up1, &d1, f);
        let m2: Vec<C64> = moments(&up2, &d2, g).into_iter().map(|v| v - v.conj()).collect();
        let mut j_total = C64::new(0.0, 0.0);
        for r in 0..k {
            for c in 0..l {
                let v = red.values[r * l + c];
                j_total += coef_had * red.row_weight[r] * red.col_weight[c] * v * v * m1[r * l + c] * m2[r * l + c];
            }
        }

        if coef_h != 0.0 {
            let pairs = up1.len() * up2.len();
            let terms = par::try_map_indexed(pairs, |idx| {
                let (a, b) = (idx / up2.len(), idx % up2.len());
                let (na, nb) = (up1[a], up2[b]);
                let h_up = kernels::class_h_sum(&red, n, &kernels::class_a_matrix(&red, n, &d1[a], &d2[b], opts.a_reading)?)?;
                let h_down =
                    kernels::class_h_sum(&red, n, &kernels::class_a_matrix(&red, n, &d1[a], &d2[b].conj(), opts.a_reading)?)?;
                let gb = g.derivative(nb.z);
                Ok(na.weight
                    * f.derivative(na.z)
                    * (nb.weight * gb * h_up - nb.weight.conj() * gb.conj() * h_down))
            })?;
            j_total += coef_h * terms.into_iter().sum::<C64>();
        }
        Ok(-j_total.re / (2.0 * PI * PI))
    })
}

/// Covariance from −(1/4π²)∮∮ f g ∂²G/∂z1∂z2 with the mixed derivative taken by
/// central differences of step `h`; a cross-check of [`clt_cov`].
#[allow(clippy::too_many_arguments)]
pub fn clt_cov_finite_difference(
    profile: &VarianceProfile,
    f: &TestFunction,
    g: &TestFunction,
    contour1: &Contour,
    contour2: &Contour,
    sparsity: &SparsityConfig,
    model: &EntryModel,
    h: f64,
    opts: &FluctOptions,
) -> Result<f64> {
    check_covariance_contours(profile, f, g, contour1, contour2)?;
    let red = profile.reduced();
    let (p, n) = (profile.p() as f64, profile.n() as f64);
    let (up1, up2) = (contour1.upper_nodes(), contour2.upper_nodes());
    let shifted = |nodes: &[ContourNode], delta: f64| -> Result<Vec<ClassDet>> {
        let moved: Vec<ContourNode> = nodes.iter().map(|nd| ContourNode { z: nd.z + delta, weight: nd.weight }).collect();
        Ok(solve_nodes(profile, &moved, opts)?.iter().map(|d| ClassDet::new(&red, d)).collect())
    };
    let (d1p, d1m) = (shifted(&up1, h)?, shifted(&up1, -h)?);
    let (d2p, d2m) = (shifted(&up2, h)?, shifted(&up2, -h)?);
    let g_of = |a: &ClassDet, b: &ClassDet| kernels::class_g(&red, p, n, a, b, sparsity, model, opts.a_reading);
    let mixed = |a: usize, b: usize, conj_b: bool| -> Result<C64> {
        let pick = |v: &ClassDet| if conj_b { v.conj() } else { v.clone() };
        let (bp, bm) = if conj_b { (pick(&d2p[b]), pick(&d2m[b])) } else { (d2p[b].clone(), d2m[b].clone()) };
        // Conjugation maps z + h to z̄ + h because h is real.
        Ok((g_of(&d1p[a], &bp)? - g_of(&d1p[a], &bm)? - g_of(&d1m[a], &bp)? + g_of(&d1m[a], &bm)?) / (4.0 * h * h))
    };
    let terms = par::try_map_indexed(up1.len() * up2.len(), |idx| {
        let (a, b) = (idx / up2.len(), idx % up2.len());
        let (na, nb) = (up1[a], up2[b]);
        let gb = g.value(nb.z);
        Ok(na.weight
            * f.value(na.z)
            * (nb.weight * gb * mixed(a, b, false)? - nb.weight.conj() * gb.conj() * mixed(a, b, true)?))
    })?;
    let j: C64 = terms.into_iter().sum();
    Ok(-j.re / (2.0 * PI * PI))
}

/// Closed form of ν_n(x, x): (ν̃₄ − s)/(pn)·Σσ⁴ in the moderate regime and
/// ν̃₄/(pn)·Σσ⁴ in the high regime.
pub fn trace_variance_closed_form(profile: &VarianceProfile, sparsity: &SparsityConfig, model: &EntryModel) -> f64 {
    let s = match sparsity.regime {
        Regime::Moderate => sparsity.s,
        Regime::High => 0.0,
    };
    (model.nu4 - s) / (profile.p() as f64 * profile.n() as f64) * profile.sum_of_squares()
}

#[cfg(test)]
mod tests;
