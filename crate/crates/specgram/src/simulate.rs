//! Monte Carlo sampling of the sparse model and linear spectral statistics.
//!
//! Every replication draws from its own ChaCha8 stream (`master seed`, `stream = rep`),
//! so batteries are bit-reproducible whatever the thread count.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detequiv::{lsd_density, spectral_support_bound};
use crate::error::{Result, SpecgramError};
use crate::fluct::{
    clt_cov_with, clt_mean_with, corrected_centering_with, equivalent_integral, Contour, FluctOptions,
    LssRoute, TestFunction, SECOND_CONTOUR_DILATION,
};
use crate::linalg::{HermitianMatrix, C64};
use crate::par;
use crate::profile::{EntryModel, Regime, SparsityConfig, VarianceProfile};
use crate::stats::{kolmogorov_to_normal, pairwise_sum, Moments};

/// Random generator for replication `stream` under `master`.
pub fn replication_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// One draw of S = YY* together with its provenance.
#[derive(Debug, Clone)]
pub struct GramSample {
    pub s: HermitianMatrix,
    pub seed: u64,
    pub stream: u64,
    /// Realized fraction of retained entries.
    pub mask_density: f64,
    eigenvalues: OnceLock<Vec<f64>>,
}

impl GramSample {
    /// Ascending spectrum, computed on first use. Round-off negatives are clipped to 0.
    pub fn eigenvalues(&self) -> &[f64] {
        self.eigenvalues.get_or_init(|| eigenvalues(&self.s))
    }

    pub fn dim(&self) -> usize {
        self.s.dim()
    }
}

/// Ascending eigenvalues of a Hermitian nonnegative matrix, clipped at 0.
pub fn eigenvalues(s: &HermitianMatrix) -> Vec<f64> {
    s.eigenvalues().into_iter().map(|v| v.max(0.0)).collect()
}

/// Draws a rows×cols array with entries b_ij·w_ij·amp(i, j)·scale, b_ij ~ Bernoulli(s).
///
/// Returns (real part, imaginary part for complex models, retained count).
pub(crate) fn sample_masked(
    rows: usize,
    cols: usize,
    s: f64,
    scale: f64,
    amp: impl Fn(usize, usize) -> f64,
    model: &EntryModel,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, Option<DMatrix<f64>>, usize) {
    let mut re = DMatrix::zeros(rows, cols);
    let mut im = model.is_complex().then(|| DMatrix::zeros(rows, cols));
    let mut kept = 0;
    for i in 0..rows {
        for j in 0..cols {
            // The mask draw always happens so the stream layout does not depend on s.
            let retained = rng.random::<f64>() < s;
            let w = model.sample(rng);
            if retained {
                kept += 1;
                let a = amp(i, j) * scale;
                re[(i, j)] = w.re * a;
                if let Some(im) = im.as_mut() {
                    im[(i, j)] = w.im * a;
                }
            }
        }
    }
    (re, im, kept)
}

pub(crate) fn gram(re: &DMatrix<f64>, im: Option<&DMatrix<f64>>) -> Result<HermitianMatrix> {
    match im {
        None => HermitianMatrix::new(re * re.transpose(), None),
        Some(im) => {
            // Re S = AAᵀ + BBᵀ as one product of [A B]; Im S = X − Xᵀ with X = BAᵀ.
            let (p, n) = re.shape();
            let mut stacked = DMatrix::zeros(p, 2 * n);
            stacked.columns_mut(0, n).copy_from(re);
            stacked.columns_mut(n, n).copy_from(im);
            let real = &stacked * stacked.transpose();
            let x = im * re.transpose();
            let imag = &x - x.transpose();
            HermitianMatrix::new(real, Some(imag))
        }
    }
}

/// Samples S from replication stream `stream` of `seed`.
pub fn sample_gram_stream(
    profile: &VarianceProfile,
    sparsity: &SparsityConfig,
    model: &EntryModel,
    seed: u64,
    stream: u64,
) -> GramSample {
    let mut rng = replication_rng(seed, stream);
    let (p, n) = (profile.p(), profile.n());
    let scale = 1.0 / (n as f64 * sparsity.s).sqrt();
    let (re, im, kept) = sample_masked(p, n, sparsity.s, scale, |i, j| profile.get(i, j).sqrt(), model, &mut rng);
    let s = gram(&re, im.as_ref()).expect("a Gram matrix is Hermitian by construction");
    GramSample {
        s,
        seed,
        stream,
        mask_density: kept as f64 / (profile.p() * profile.n()) as f64,
        eigenvalues: OnceLock::new(),
    }
}

/// Samples S = YY* on stream 0 of `seed`.
pub fn sample_gram(profile: &VarianceProfile, sparsity: &SparsityConfig, model: &EntryModel, seed: u64) -> GramSample {
    sample_gram_stream(profile, sparsity, model, seed, 0)
}

/// (1/p)·Σ f(λ_i), taking the cheapest route the test function allows.
pub fn spectral_average(sample: &GramSample, f: &TestFunction) -> Result<f64> {
    let p = sample.dim() as f64;
    let total = match f.lss_route() {
        LssRoute::Zero => 0.0,
        LssRoute::Trace => sample.s.trace(),
        LssRoute::TraceOfSquare => sample.s.trace_of_square(),
        LssRoute::LogDet { sigma2 } => sample.s.log_det_identity_plus(sigma2)?,
        LssRoute::Eigenvalues => {
            let values = sample
                .eigenvalues()
                .iter()
                .map(|&x| f.value_real(x))
                .collect::<Result<Vec<_>>>()?;
            pairwise_sum(&values)
        }
    };
    Ok(total / p)
}

/// Deterministic part of the centred statistic: ∫f dπ_n and the optional correction term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LssCentering {
    pub equivalent_integral: f64,
    pub correction: Option<f64>,
}

impl LssCentering {
    /// Integrates f against π_n; with `corrected`, also evaluates the high-regime correction.
    pub fn compute(
        profile: &VarianceProfile,
        f: &TestFunction,
        contour: &Contour,
        sparsity: &SparsityConfig,
        model: &EntryModel,
        corrected: bool,
        opts: &FluctOptions,
    ) -> Result<Self> {
        let integral = equivalent_integral(profile, f, contour, opts)?.value;
        let correction = if corrected {
            Some(corrected_centering_with(profile, f, contour, sparsity, model, opts)?.value)
        } else {
            None
        };
        Ok(Self { equivalent_integral: integral, correction })
    }
}

/// √p·q·[(1/p)Σ f(λ_i) − ∫f dπ_n], plus the correction when present.
pub fn centered_lss(
    sample: &GramSample,
    sparsity: &SparsityConfig,
    f: &TestFunction,
    centering: &LssCentering,
) -> Result<f64> {
    if f.is_zero() {
        return Ok(0.0);
    }
    let p = sample.dim() as f64;
    let raw = p.sqrt() * sparsity.q * (spectral_average(sample, f)? - centering.equivalent_integral);
    Ok(raw + centering.correction.unwrap_or(0.0))
}

/// Monte Carlo estimate and closed form of E[(x*Ax − TrAΣ)(x*Bx − TrBΣ)].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFormCheck {
    pub mc_estimate: f64,
    pub mc_std_error: f64,
    pub formula_value: f64,
}

impl QuadraticFormCheck {
    /// |mc − formula| in units of the Monte Carlo standard error.
    pub fn z_score(&self) -> f64 {
        if self.mc_std_error == 0.0 {
            if self.mc_estimate == self.formula_value { 0.0 } else { f64::INFINITY }
        } else {
            (self.mc_estimate - self.formula_value).abs() / self.mc_std_error
        }
    }
}

const ORACLE_CHUNK: usize = 1 << 14;

/// Inputs of one quadratic-form check: column variances and the matrices A and B.
#[derive(Debug, Clone)]
pub struct QuadraticFormCase {
    pub variances: Vec<f64>,
    pub a: HermitianMatrix,
    pub b: HermitianMatrix,
}

impl QuadraticFormCase {
    /// Variances uniform on [0.5, 2] and A, B with entries uniform on [−1, 1];
    /// A and B are complex Hermitian when `complex`, real symmetric otherwise.
    pub fn random(p: usize, complex: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let variances = (0..p).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut draw = || {
            let raw = DMatrix::from_fn(p, p, |_, _| {
                let im = if complex { rng.random::<f64>() - 0.5 } else { 0.0 };
                C64::new(rng.random::<f64>() - 0.5, im)
            });
            HermitianMatrix::from_complex(&(&raw + raw.adjoint())).expect("A + A* is Hermitian")
        };
        let a = draw();
        let b = draw();
        Self { variances, a, b }
    }
}

/// Checks the quadratic-form covariance identity for x = 𝔹∘w/√s with Cov w = diag(variances).
///
/// Real models need real symmetric A and B, since the identity is stated for that case.
pub fn quadratic_form_oracle(
    model: &EntryModel,
    variances: &[f64],
    s: f64,
    a: &HermitianMatrix,
    b: &HermitianMatrix,
    reps: usize,
    seed: u64,
) -> Result<QuadraticFormCheck> {
    let p = variances.len();
    if a.dim() != p || b.dim() != p {
        return Err(SpecgramError::Validation(format!(
            "matrices must be {p}×{p}, got {}×{0} and {}×{1}",
            a.dim(),
            b.dim()
        )));
    }
    if !(s > 0.0 && s <= 1.0) {
        return Err(SpecgramError::Validation(format!("retention probability must lie in (0, 1], got {s}")));
    }
    if reps < 2 {
        return Err(SpecgramError::Validation("need at least two replications".into()));
    }
    if !model.is_complex() && (a.imag.is_some() || b.imag.is_some()) {
        return Err(SpecgramError::Validation("real entry models need real symmetric A and B".into()));
    }
    let (ac, bc) = (a.to_complex(), b.to_complex());
    let sd: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
    let trace_a: f64 = (0..p).map(|i| ac[(i, i)].re * variances[i]).sum();
    let trace_b: f64 = (0..p).map(|i| bc[(i, i)].re * variances[i]).sum();
    let form = |m: &DMatrix<C64>, x: &[C64]| -> f64 {
        let mut acc = C64::new(0.0, 0.0);
        for i in 0..p {
            for j in 0..p {
                acc += x[i].conj() * m[(i, j)] * x[j];
            }
        }
        acc.re
    };
    let chunks = reps.div_ceil(ORACLE_CHUNK);
    let products: Vec<Vec<f64>> = par::map_indexed(chunks, |chunk| {
        let mut rng = replication_rng(seed, chunk as u64);
        let count = ORACLE_CHUNK.min(reps - chunk * ORACLE_CHUNK);
        let mut x = vec![C64::new(0.0, 0.0); p];
        (0..count)
            .map(|_| {
                for (xi, sdi) in x.iter_mut().zip(&sd) {
                    let retained = rng.random::<f64>() < s;
                    let w = model.sample(&mut rng);
                    *xi = if retained { w * (sdi / s.sqrt()) } else { C64::new(0.0, 0.0) };
                }
                (form(&ac, &x) - trace_a) * (form(&bc, &x) - trace_b)
            })
            .collect()
    });
    let all: Vec<f64> = products.into_iter().flatten().collect();
    let moments = Moments::of(&all);

    let kappa = model.kappa as f64;
    let mut cross = C64::new(0.0, 0.0);
    let mut hadamard = 0.0;
    for i in 0..p {
        for j in 0..p {
            cross += ac[(i, j)] * variances[j] * bc[(j, i)] * variances[i];
        }
        hadamard += ac[(i, i)].re * bc[(i, i)].re * variances[i] * variances[i];
    }
    let formula_value = (kappa + 1.0) * cross.re + (model.nu4 / s - kappa - 2.0) * hadamard;
    Ok(QuadraticFormCheck { mc_estimate: moments.mean, mc_std_error: moments.mean_se, formula_value })
}

/// Inputs of a Monte Carlo battery for one linear spectral statistic.
#[derive(Debug, Clone)]
pub struct McConfig {
    pub profile: VarianceProfile,
    pub sparsity: SparsityConfig,
    pub model: EntryModel,
    pub f: TestFunction,
    pub replications: usize,
    pub seed: u64,
    /// Contour for the deterministic terms; defaults to [`Contour::default_for`].
    pub contour: Option<Contour>,
    pub fluct: FluctOptions,
}

impl McConfig {
    pub fn new(
        profile: VarianceProfile,
        sparsity: SparsityConfig,
        model: EntryModel,
        f: TestFunction,
        replications: usize,
        seed: u64,
    ) -> Self {
        Self { profile, sparsity, model, f, replications, seed, contour: None, fluct: FluctOptions::default() }
    }
}

/// Moments of a simulated statistic next to its predicted law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub replications: usize,
    pub statistic_name: String,
    pub empirical_mean: f64,
    pub empirical_mean_se: f64,
    pub empirical_var: f64,
    pub empirical_var_se: f64,
    pub theoretical_mean: f64,
    pub theoretical_var: f64,
    /// Kolmogorov distance of the standardized draws to N(0,1); absent when the predicted variance is 0.
    pub ks_to_gaussian: Option<f64>,
    /// Mean |standardized draw|³, a tightness proxy.
    pub third_abs_moment: Option<f64>,
    pub rejection_rate: Option<f64>,
}

impl McSummary {
    /// Summarizes `values` against a predicted mean and variance.
    pub fn from_values(name: &str, values: &[f64], theoretical_mean: f64, theoretical_var: f64) -> Self {
        let m = Moments::of(values);
        let standardized: Option<Vec<f64>> = (theoretical_var > 0.0).then(|| {
            let sd = theoretical_var.sqrt();
            values.iter().map(|v| (v - theoretical_mean) / sd).collect()
        });
        Self {
            replications: values.len(),
            statistic_name: name.to_string(),
            empirical_mean: m.mean,
            empirical_mean_se: m.mean_se,
            empirical_var: m.variance,
            empirical_var_se: m.variance_se,
            theoretical_mean,
            theoretical_var,
            ks_to_gaussian: standardized.as_deref().map(kolmogorov_to_normal),
            third_abs_moment: standardized.as_deref().map(|z| {
                let cubes: Vec<f64> = z.iter().map(|v| v.abs().powi(3)).collect();
                pairwise_sum(&cubes) / z.len() as f64
            }),
            rejection_rate: None,
        }
    }
}

/// Output of [`mc_battery`]: the per-replication statistic and its summary.
#[derive(Debug, Clone)]
pub struct McRun {
    pub values: Vec<f64>,
    pub centering: LssCentering,
    pub summary: McSummary,
}

/// Simulates the centred statistic `replications` times.
///
/// In the high regime the statistic carries the correction term and is compared with
/// a zero mean; otherwise it is compared with the moderate-regime CLT mean.
pub fn mc_battery(config: &McConfig) -> Result<McRun> {
    if config.replications < 100 {
        return Err(SpecgramError::Validation(format!(
            "a battery needs at least 100 replications, got {}",
            config.replications
        )));
    }
    let f = &config.f;
    let corrected = config.sparsity.regime == Regime::High;
    let (centering, mean, var) = if f.is_zero() {
        (LssCentering { equivalent_integral: 0.0, correction: None }, 0.0, 0.0)
    } else {
        let contour = match &config.contour {
            Some(c) => *c,
            None => Contour::default_for(&config.profile, &[f])?,
        };
        let outer = contour.dilated(SECOND_CONTOUR_DILATION, &[f]);
        let centering = LssCentering::compute(
            &config.profile,
            f,
            &contour,
            &config.sparsity,
            &config.model,
            corrected,
            &config.fluct,
        )?;
        let mean = if corrected {
            0.0
        } else {
            clt_mean_with(&config.profile, f, &contour, &config.sparsity, &config.model, &config.fluct)?.value
        };
        let var = clt_cov_with(
            &config.profile,
            f,
            f,
            &contour,
            &outer,
            &config.sparsity,
            &config.model,
            &config.fluct,
        )?
        .value;
        (centering, mean, var)
    };
    let values = par::try_map_indexed(config.replications, |rep| {
        let sample = sample_gram_stream(&config.profile, &config.sparsity, &config.model, config.seed, rep as u64);
        centered_lss(&sample, &config.sparsity, f, &centering)
    })?;
    let name = if corrected { format!("corrected_lss[{}]", f.name()) } else { format!("lss[{}]", f.name()) };
    let summary = McSummary::from_values(&name, &values, mean, var);
    Ok(McRun { values, centering, summary })
}

/// Kolmogorov distance between the ESD of `eigenvalues` and π_n.
///
/// The π_n distribution function is the cumulative trapezoid of the smoothed density
/// (imaginary part `eta`) on `grid_points` nodes over [0, bound], renormalized to mass 1.
pub fn esd_kolmogorov_distance(
    eigenvalues: &[f64],
    profile: &VarianceProfile,
    grid_points: usize,
    eta: f64,
) -> Result<f64> {
    if grid_points < 2 {
        return Err(SpecgramError::Validation("need at least two grid points".into()));
    }
    let top = spectral_support_bound(profile).max(eigenvalues.iter().copied().fold(0.0, f64::max)) * 1.05;
    let grid: Vec<f64> = (0..grid_points).map(|k| top * k as f64 / (grid_points - 1) as f64).collect();
    let density = lsd_density(profile, &grid, eta)?;
    let mut cdf = vec![0.0; grid_points];
    for k in 1..grid_points {
        cdf[k] = cdf[k - 1] + 0.5 * (density[k] + density[k - 1]) * (grid[k] - grid[k - 1]);
    }
    let mass = cdf[grid_points - 1];
    if mass <= 0.0 {
        return Err(SpecgramError::Degenerate("smoothed density has no mass".into()));
    }
    let step = grid[1] - grid[0];
    let cdf_at = |x: f64| -> f64 {
        let pos = (x / step).clamp(0.0, (grid_points - 1) as f64);
        let k = (pos.floor() as usize).min(grid_points - 2);
        let frac = pos - k as f64;
        (cdf[k] * (1.0 - frac) + cdf[k + 1] * frac) / mass
    };
    let mut sorted = eigenvalues.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = cdf_at(x);
            (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max))
}
