//! Sparse MIMO applications: an equality test for large-scale fading matrices and
//! a Gaussian approximation of the mutual information and its outage probability.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::detequiv::solve_scalar_mi_system;
use crate::error::{Result, SpecgramError};
use crate::linalg::{HermitianMatrix, C64};
use crate::par;
use crate::profile::EntryModel;
use crate::simulate::{gram, replication_rng, sample_masked, McSummary};
use crate::stats::{normal_cdf, normal_quantile};

/// Nonnegative N_r×N_t large-scale fading gains.
#[derive(Debug, Clone, PartialEq)]
pub struct FadingMatrix(DMatrix<f64>);

impl FadingMatrix {
    pub fn new(gains: DMatrix<f64>) -> Result<Self> {
        if gains.is_empty() {
            return Err(SpecgramError::Validation("fading matrix is empty".into()));
        }
        if let Some(bad) = gains.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(SpecgramError::Validation(format!("fading gains must be finite and nonnegative, found {bad}")));
        }
        Ok(Self(gains))
    }

    /// Separable gains l_ij = √(d_i·d̃_j), i.e. D^{1/2} X D̃^{1/2} correlation.
    pub fn separable(d: &[f64], d_tilde: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_fn(d.len(), d_tilde.len(), |i, j| (d[i] * d_tilde[j]).sqrt()))
    }

    pub fn receive(&self) -> usize {
        self.0.nrows()
    }

    pub fn transmit(&self) -> usize {
        self.0.ncols()
    }

    pub fn gains(&self) -> &DMatrix<f64> {
        &self.0
    }

    fn power_sum(&self, k: i32) -> f64 {
        self.0.iter().map(|l| l.powi(k)).sum()
    }
}

/// A channel realization H, stored as real and (for complex fading) imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub re: DMatrix<f64>,
    pub im: Option<DMatrix<f64>>,
}

impl Channel {
    pub fn from_complex(h: &DMatrix<C64>) -> Result<Self> {
        if h.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(SpecgramError::Validation("channel has non-finite entries".into()));
        }
        Ok(Self { re: h.map(|v| v.re), im: Some(h.map(|v| v.im)) })
    }

    pub fn from_real(h: DMatrix<f64>) -> Result<Self> {
        if h.iter().any(|v| !v.is_finite()) {
            return Err(SpecgramError::Validation("channel has non-finite entries".into()));
        }
        Ok(Self { re: h, im: None })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.re.shape()
    }

    fn modulus_sq(&self) -> impl Iterator<Item = f64> + '_ {
        let im = self.im.as_ref();
        self.re.iter().enumerate().map(move |(k, r)| r * r + im.map_or(0.0, |m| m[k] * m[k]))
    }

    /// Tr HH* = Σ|h_ij|².
    pub fn frobenius_sq(&self) -> f64 {
        self.modulus_sq().sum()
    }

    /// Σ|h_ij|⁴.
    pub fn fourth_power_sum(&self) -> f64 {
        self.modulus_sq().map(|m| m * m).sum()
    }

    /// Fraction of entries that are exactly nonzero.
    pub fn nonzero_fraction(&self) -> f64 {
        self.modulus_sq().filter(|m| *m != 0.0).count() as f64 / self.re.len() as f64
    }

    /// HH* as a Hermitian matrix.
    pub fn gram(&self) -> HermitianMatrix {
        gram(&self.re, self.im.as_ref()).expect("a Gram matrix is Hermitian by construction")
    }
}

fn check_retention(s: f64) -> Result<()> {
    if s > 0.0 && s <= 1.0 {
        Ok(())
    } else {
        Err(SpecgramError::Validation(format!("retention probability must lie in (0, 1], got {s}")))
    }
}

/// Draws h_ij = b_ij·l_ij·g_ij/√(N_t s) on replication stream `stream` of `seed`.
pub fn sample_channel_stream(
    fading: &FadingMatrix,
    s: f64,
    model: &EntryModel,
    seed: u64,
    stream: u64,
) -> Result<Channel> {
    check_retention(s)?;
    let mut rng = replication_rng(seed, stream);
    let scale = 1.0 / (fading.transmit() as f64 * s).sqrt();
    let gains = fading.gains();
    let (re, im, _) =
        sample_masked(fading.receive(), fading.transmit(), s, scale, |i, j| gains[(i, j)], model, &mut rng);
    Ok(Channel { re, im })
}

/// [`sample_channel_stream`] on stream 0.
pub fn sample_channel(fading: &FadingMatrix, s: f64, model: &EntryModel, seed: u64) -> Result<Channel> {
    sample_channel_stream(fading, s, model, seed, 0)
}

/// Rejection region of the equality test.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Reject when D_x > √2·σ̂·z_{1−α}.
    #[default]
    Greater,
    /// Reject when |D_x| > √2·σ̂·z_{1−α/2}.
    TwoSided,
}

impl Alternative {
    fn critical_value(self, alpha: f64) -> f64 {
        match self {
            Alternative::Greater => normal_quantile(1.0 - alpha),
            Alternative::TwoSided => normal_quantile(1.0 - alpha / 2.0),
        }
    }
}

/// Plug-in for the null variance σ²_H0 from the first channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceEstimator {
    /// (ŝN_t/N_r)(1 − ŝ/ν̃₄)Σ|h|⁴, unbiased for (ν̃₄ − s)/(N_rN_t)Σl⁴.
    #[default]
    Consistent,
    /// (ŝN_t/N_r)(1 − 1/ν̃₄)Σ|h|⁴, whose second term lacks a factor ŝ.
    Printed,
}

/// Settings of [`equality_test`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqualityTestOptions {
    pub alpha: f64,
    /// Standardized fourth moment of the small-scale fading.
    pub nu4: f64,
    pub alternative: Alternative,
    pub estimator: VarianceEstimator,
    /// Known retention probability; estimated from the zero pattern of H1 when absent.
    pub known_s: Option<f64>,
    /// Known σ²_H0; replaces the plug-in estimate when present.
    pub known_sigma2: Option<f64>,
}

impl EqualityTestOptions {
    pub fn new(alpha: f64, nu4: f64) -> Self {
        Self {
            alpha,
            nu4,
            alternative: Alternative::Greater,
            estimator: VarianceEstimator::Consistent,
            known_s: None,
            known_sigma2: None,
        }
    }

    pub fn with_alternative(self, alternative: Alternative) -> Self {
        Self { alternative, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqualityTestResult {
    pub d_x: f64,
    pub t_x: f64,
    pub sigma2_h0_hat: f64,
    pub s_hat: f64,
    pub reject: bool,
    pub alpha: f64,
    pub alternative: Alternative,
    pub predicted_power: Option<f64>,
}

/// Trace test of H0: L1 = L2 from one realization of each channel.
pub fn equality_test(h1: &Channel, h2: &Channel, opts: &EqualityTestOptions) -> Result<EqualityTestResult> {
    if h1.shape() != h2.shape() {
        return Err(SpecgramError::Validation(format!(
            "channel shapes differ: {:?} vs {:?}",
            h1.shape(),
            h2.shape()
        )));
    }
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(SpecgramError::Validation(format!("alpha must lie in (0, 1), got {}", opts.alpha)));
    }
    if !(opts.nu4 > 0.0 && opts.nu4.is_finite()) {
        return Err(SpecgramError::Validation(format!("nu4 must be positive, got {}", opts.nu4)));
    }
    let (nr, nt) = h1.shape();
    let (nr, nt) = (nr as f64, nt as f64);
    let s_hat = match opts.known_s {
        Some(s) => {
            check_retention(s)?;
            s
        }
        None => h1.nonzero_fraction(),
    };
    if s_hat == 0.0 {
        return Err(SpecgramError::Degenerate("H1 has no nonzero entries".into()));
    }
    let q = (s_hat * nt).sqrt();
    let d_x = q / nr.sqrt() * (h1.frobenius_sq() - h2.frobenius_sq());
    let sigma2 = match opts.known_sigma2 {
        Some(v) => v,
        None => {
            let lead = s_hat * nt / nr * h1.fourth_power_sum();
            match opts.estimator {
                VarianceEstimator::Consistent => lead * (1.0 - s_hat / opts.nu4),
                VarianceEstimator::Printed => lead * (1.0 - 1.0 / opts.nu4),
            }
        }
    };
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(SpecgramError::Degenerate(format!("null variance estimate is {sigma2}")));
    }
    let t_x = d_x / (2.0 * sigma2).sqrt();
    let crit = opts.alternative.critical_value(opts.alpha);
    let reject = match opts.alternative {
        Alternative::Greater => t_x > crit,
        Alternative::TwoSided => t_x.abs() > crit,
    };
    Ok(EqualityTestResult {
        d_x,
        t_x,
        sigma2_h0_hat: sigma2,
        s_hat,
        reject,
        alpha: opts.alpha,
        alternative: opts.alternative,
        predicted_power: None,
    })
}

/// Asymptotic power of the trace test when the fading matrices are `l1` and `l2`.
pub fn predicted_power(
    l1: &FadingMatrix,
    l2: &FadingMatrix,
    s: f64,
    model: &EntryModel,
    alpha: f64,
    alternative: Alternative,
) -> Result<f64> {
    if l1.gains().shape() != l2.gains().shape() {
        return Err(SpecgramError::Validation("fading matrices differ in shape".into()));
    }
    check_retention(s)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SpecgramError::Validation(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let (nr, nt) = (l1.receive() as f64, l1.transmit() as f64);
    let q = (s * nt).sqrt();
    let excess = model.nu4 - s;
    let sigma2_h0 = excess / (nr * nt) * l1.power_sum(4);
    let sigma2_h1 = excess / (nr * nt) * (l1.power_sum(4) + l2.power_sum(4));
    if !(sigma2_h1 > 0.0) {
        return Err(SpecgramError::Degenerate(format!("alternative variance is {sigma2_h1}")));
    }
    let shift = q / (nr.sqrt() * nt) * (l1.power_sum(2) - l2.power_sum(2));
    let (sd0, sd1) = (sigma2_h0.sqrt(), sigma2_h1.sqrt());
    let crit = alternative.critical_value(alpha);
    let upper = 1.0 - normal_cdf((2f64.sqrt() * crit * sd0 - shift) / sd1);
    Ok(match alternative {
        Alternative::Greater => upper,
        Alternative::TwoSided => upper + normal_cdf((-(2f64.sqrt()) * crit * sd0 - shift) / sd1),
    })
}

/// Rejection frequency of [`equality_test`] over independent channel pairs.
#[derive(Debug, Clone)]
pub struct EqualityReplay {
    pub t_values: Vec<f64>,
    pub summary: McSummary,
}

/// Replays the test `reps` times; pair `r` uses streams 2r and 2r + 1 of `seed`.
pub fn equality_test_replay(
    l1: &FadingMatrix,
    l2: &FadingMatrix,
    s: f64,
    model: &EntryModel,
    opts: &EqualityTestOptions,
    reps: usize,
    seed: u64,
) -> Result<EqualityReplay> {
    if reps == 0 {
        return Err(SpecgramError::Validation("need at least one replication".into()));
    }
    let outcomes = par::try_map_indexed(reps, |r| {
        let h1 = sample_channel_stream(l1, s, model, seed, 2 * r as u64)?;
        let h2 = sample_channel_stream(l2, s, model, seed, 2 * r as u64 + 1)?;
        equality_test(&h1, &h2, opts)
    })?;
    let t_values: Vec<f64> = outcomes.iter().map(|o| o.t_x).collect();
    let rejected = outcomes.iter().filter(|o| o.reject).count();
    let mut summary = McSummary::from_values("t_x", &t_values, 0.0, 1.0);
    summary.rejection_rate = Some(rejected as f64 / reps as f64);
    Ok(EqualityReplay { t_values, summary })
}

/// log det(I + HH*/σ²) in nats, via a Cholesky factorization.
pub fn mutual_information(h: &Channel, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(SpecgramError::Validation(format!("noise variance must be positive, got {sigma2}")));
    }
    if h.re.iter().chain(h.im.iter().flat_map(|m| m.iter())).any(|v| !v.is_finite()) {
        return Err(SpecgramError::Validation("channel has non-finite entries".into()));
    }
    h.gram().log_det_identity_plus(sigma2)
}

/// Parameters of the Gaussian law of the mutual information at noise level σ².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiCltParams {
    pub sigma2: f64,
    /// Deterministic equivalent of the mutual information (nats).
    pub v: f64,
    pub mu_log: f64,
    /// Variance of the limiting Gaussian.
    pub sigma2_log: f64,
    pub delta: f64,
    pub delta_tilde: f64,
    /// |−log det(σ²T) − log det(I + δ̃D)| at the computed solution.
    pub identity_defect: f64,
}

/// Evaluates V, μ_log and σ²_log for H = B∘(D^{1/2}XD̃^{1/2})/√(N_t s), s = q²/N_t.
pub fn mi_clt_params(d: &[f64], d_tilde: &[f64], sigma2: f64, q: f64, model: &EntryModel) -> Result<MiCltParams> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(SpecgramError::Validation(format!("noise variance must be positive, got {sigma2}")));
    }
    let (nr, nt) = (d.len() as f64, d_tilde.len() as f64);
    let s = q * q / nt;
    if !(q > 0.0) || s > 1.0 {
        return Err(SpecgramError::Validation(format!("q must lie in (0, √N_t], got {q}")));
    }
    let z = -sigma2;
    let eq = solve_scalar_mi_system(d, d_tilde, C64::new(z, 0.0), 1e-13)?;
    let (delta, delta_tilde) = (eq.delta.re, eq.delta_tilde.re);
    let t: Vec<f64> = eq.t_diag.iter().map(|v| v.re).collect();
    let tt: Vec<f64> = eq.t_tilde_diag.iter().map(|v| v.re).collect();

    let log_det_t: f64 = t.iter().map(|ti| (sigma2 * ti).ln()).sum();
    let log_det_d: f64 = d.iter().map(|di| (1.0 + delta_tilde * di).ln()).sum();
    let log_det_dt: f64 = d_tilde.iter().map(|dj| (1.0 + delta * dj).ln()).sum();
    let v = -log_det_t + log_det_dt - nt * sigma2 * delta * delta_tilde;

    let tr_d: f64 = d.iter().zip(&t).map(|(di, ti)| (di * ti).powi(2)).sum();
    let tr_dt: f64 = d_tilde.iter().zip(&tt).map(|(dj, tj)| (dj * tj).powi(2)).sum();
    let product = tr_d * tr_dt;
    let excess = model.nu4 - (model.kappa as f64 + 2.0) * s;
    let sigma4 = sigma2 * sigma2;
    let mu_log = -excess * sigma4 / (2.0 * q * nr.sqrt() * nt) * product;
    let log_arg = 1.0 - z * z / (nt * nt) * product;
    if !(log_arg > 0.0 && log_arg < 1.0) {
        return Err(SpecgramError::Stability(format!("log argument {log_arg} is outside (0, 1)")));
    }
    let sigma2_log = excess * sigma4 / (nr * nt) * product - q * q / nr * log_arg.ln();
    if !(sigma2_log > 0.0) {
        return Err(SpecgramError::Stability(format!("variance {sigma2_log} is not positive")));
    }
    Ok(MiCltParams {
        sigma2,
        v,
        mu_log,
        sigma2_log,
        delta,
        delta_tilde,
        identity_defect: (-log_det_t - log_det_d).abs(),
    })
}

/// Gaussian approximation of P(C < R).
pub fn outage_probability(rate: f64, params: &MiCltParams, q: f64, n_receive: usize) -> f64 {
    let centered = q / (n_receive as f64).sqrt() * (rate - params.v) - params.mu_log;
    normal_cdf(centered / params.sigma2_log.sqrt())
}

/// Standardized T_log = ((q/√N_r)(C − V) − μ_log)/σ_log.
pub fn standardized_mi(mi: f64, params: &MiCltParams, q: f64, n_receive: usize) -> f64 {
    (q / (n_receive as f64).sqrt() * (mi - params.v) - params.mu_log) / params.sigma2_log.sqrt()
}

/// Simulated mutual information: `values[k][r]` at `sigma2s[k]` for replication r.
///
/// One eigendecomposition per channel serves every noise level.
pub fn simulate_mutual_information(
    d: &[f64],
    d_tilde: &[f64],
    q: f64,
    model: &EntryModel,
    sigma2s: &[f64],
    reps: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let fading = FadingMatrix::separable(d, d_tilde)?;
    let s = q * q / d_tilde.len() as f64;
    if let Some(bad) = sigma2s.iter().find(|v| !(**v > 0.0)) {
        return Err(SpecgramError::Validation(format!("noise variance must be positive, got {bad}")));
    }
    let per_rep = par::try_map_indexed(reps, |r| {
        let h = sample_channel_stream(&fading, s, model, seed, r as u64)?;
        let eig = crate::simulate::eigenvalues(&h.gram());
        Ok::<_, SpecgramError>(
            sigma2s
                .iter()
                .map(|s2| eig.iter().map(|l| (1.0 + l / s2).ln()).sum::<f64>())
                .collect::<Vec<f64>>(),
        )
    })?;
    Ok((0..sigma2s.len()).map(|k| per_rep.iter().map(|row| row[k]).collect()).collect())
}

/// Empirical fraction of `values` strictly below `rate`.
pub fn empirical_outage(values: &[f64], rate: f64) -> f64 {
    values.iter().filter(|v| **v < rate).count() as f64 / values.len() as f64
}

/// σ² = 10^{−SNR/10}.
pub fn noise_variance_from_snr_db(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(len: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(lo..hi)).collect()
    }

    fn fading(nr: usize, nt: usize, seed: u64) -> FadingMatrix {
        let vals = uniform(nr * nt, 2.0, 4.0, seed);
        FadingMatrix::new(DMatrix::from_vec(nr, nt, vals)).unwrap()
    }

    #[test]
    fn zero_fading_gives_zero_channel() {
        let l = FadingMatrix::new(DMatrix::zeros(3, 4)).unwrap();
        let h = sample_channel(&l, 0.5, &EntryModel::complex_gaussian(), 1).unwrap();
        assert_eq!(h.frobenius_sq(), 0.0);
        assert!(FadingMatrix::new(DMatrix::from_element(1, 1, -1.0)).is_err());
    }

    #[test]
    fn dense_unit_fading_has_variance_one_over_nt() {
        let l = FadingMatrix::new(DMatrix::from_element(50, 40, 1.0)).unwrap();
        let h = sample_channel(&l, 1.0, &EntryModel::complex_gaussian(), 2).unwrap();
        let mean = h.frobenius_sq() / 2000.0;
        // 2000 entries of mean 1/40 and standard deviation 1/40.
        assert!((mean - 1.0 / 40.0).abs() < 3.0 / 40.0 / 2000f64.sqrt());
        assert_eq!(h.nonzero_fraction(), 1.0);
    }

    #[test]
    fn expected_channel_energy() {
        let l = fading(6, 8, 3);
        let model = EntryModel::complex_gaussian();
        let energies: Vec<f64> =
            (0..500).map(|r| sample_channel_stream(&l, 0.4, &model, 4, r).unwrap().frobenius_sq()).collect();
        let m = crate::stats::Moments::of(&energies);
        let expected = l.power_sum(2) / 8.0;
        assert!((m.mean - expected).abs() < 3.0 * m.mean_se, "{} vs {expected}", m.mean);
    }

    #[test]
    fn identical_channels_never_reject() {
        let l = fading(5, 7, 5);
        let h = sample_channel(&l, 0.6, &EntryModel::complex_gaussian(), 6).unwrap();
        for alpha in [0.01, 0.2, 0.49] {
            for alt in [Alternative::Greater, Alternative::TwoSided] {
                let r = equality_test(&h, &h, &EqualityTestOptions::new(alpha, 2.0).with_alternative(alt)).unwrap();
                assert_eq!(r.d_x, 0.0);
                assert!(!r.reject);
            }
        }
    }

    #[test]
    fn equality_test_validates_inputs() {
        let a = sample_channel(&fading(3, 4, 1), 1.0, &EntryModel::real_gaussian(), 1).unwrap();
        let b = sample_channel(&fading(4, 3, 1), 1.0, &EntryModel::real_gaussian(), 1).unwrap();
        assert!(matches!(equality_test(&a, &b, &EqualityTestOptions::new(0.05, 3.0)), Err(SpecgramError::Validation(_))));
        let zero = Channel::from_real(DMatrix::zeros(3, 4)).unwrap();
        let opts = EqualityTestOptions { known_s: Some(1.0), ..EqualityTestOptions::new(0.05, 3.0) };
        assert!(matches!(equality_test(&zero, &zero, &opts), Err(SpecgramError::Degenerate(_))));
    }

    #[test]
    fn power_at_null_is_alpha() {
        let l = fading(10, 12, 7);
        for alt in [Alternative::Greater, Alternative::TwoSided] {
            let pw = predicted_power(&l, &l, 0.3, &EntryModel::complex_gaussian(), 0.05, alt).unwrap();
            assert_relative_eq!(pw, 0.05, epsilon = 1e-12);
        }
    }

    #[test]
    fn power_grows_with_shift() {
        let l1 = fading(10, 12, 8);
        let model = EntryModel::complex_gaussian();
        let powers: Vec<f64> = [0.0, 0.02, 0.05, 0.1]
            .iter()
            .map(|th| {
                let l2 = FadingMatrix::new(l1.gains().map(|v| v - th)).unwrap();
                predicted_power(&l1, &l2, 0.5, &model, 0.05, Alternative::Greater).unwrap()
            })
            .collect();
        assert!(powers.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn printed_variance_plugin_is_biased_when_sparse() {
        // Expected Σ|h|⁴ = ν̃₄Σl⁴/(N_t² s); compare both plug-ins with (ν̃₄ − s)Σl⁴/(N_rN_t).
        let l = fading(40, 50, 9);
        let model = EntryModel::complex_gaussian();
        let s = 0.25;
        let (mut consistent, mut printed) = (0.0, 0.0);
        let reps = 200;
        for r in 0..reps {
            let h = sample_channel_stream(&l, s, &model, 10, r).unwrap();
            let base = EqualityTestOptions { known_s: Some(s), ..EqualityTestOptions::new(0.05, 2.0) };
            consistent += equality_test(&h, &h, &base).unwrap().sigma2_h0_hat / reps as f64;
            let alt = EqualityTestOptions { estimator: VarianceEstimator::Printed, ..base };
            printed += equality_test(&h, &h, &alt).unwrap().sigma2_h0_hat / reps as f64;
        }
        let target = (2.0 - s) / 2000.0 * l.power_sum(4);
        assert!((consistent / target - 1.0).abs() < 0.02, "{consistent} vs {target}");
        assert!((printed / target - 1.0 / 1.75).abs() < 0.02);
    }

    #[test]
    fn mutual_information_identities() {
        let zero = Channel::from_real(DMatrix::zeros(3, 5)).unwrap();
        assert_eq!(mutual_information(&zero, 0.7).unwrap(), 0.0);

        let u = [C64::new(1.0, 0.2), C64::new(-0.5, 0.4), C64::new(0.3, -1.0)];
        let v = [C64::new(0.7, 0.0), C64::new(0.1, 0.9)];
        let h = DMatrix::from_fn(3, 2, |i, j| u[i] * v[j].conj());
        let nu: f64 = u.iter().map(|x| x.norm_sqr()).sum();
        let nv: f64 = v.iter().map(|x| x.norm_sqr()).sum();
        let mi = mutual_information(&Channel::from_complex(&h).unwrap(), 0.5).unwrap();
        assert_relative_eq!(mi, (1.0 + nu * nv / 0.5).ln(), epsilon = 1e-12);

        let l = fading(6, 9, 11);
        let ch = sample_channel(&l, 0.7, &EntryModel::complex_gaussian(), 12).unwrap();
        let eig = crate::simulate::eigenvalues(&ch.gram());
        let spectral: f64 = eig.iter().map(|x| (1.0 + x / 0.3).ln()).sum();
        assert!((mutual_information(&ch, 0.3).unwrap() - spectral).abs() < 1e-8);
        assert!(mutual_information(&ch, 0.0).is_err());
    }

    #[test]
    fn mi_params_fixed_point_identity_and_limits() {
        let d = uniform(30, 1.0, 2.0, 13);
        let dt = uniform(60, 1.0, 2.0, 14);
        let model = EntryModel::complex_gaussian();
        let p = mi_clt_params(&d, &dt, 1.0, 0.5 * 60f64.sqrt(), &model).unwrap();
        assert!(p.identity_defect < 1e-10);
        assert!(p.sigma2_log > 0.0 && p.mu_log < 0.0);

        // With small s the mean tends to −σ⁴/(q√N_r N_t)·Tr·Tr for ν̃₄ = 2, κ = 0.
        let q = 0.05;
        let small = mi_clt_params(&d, &dt, 1.0, q, &model).unwrap();
        let eq = solve_scalar_mi_system(&d, &dt, C64::new(-1.0, 0.0), 1e-13).unwrap();
        let tr_d: f64 = d.iter().zip(&eq.t_diag).map(|(a, t)| (a * t.re).powi(2)).sum();
        let tr_dt: f64 = dt.iter().zip(&eq.t_tilde_diag).map(|(a, t)| (a * t.re).powi(2)).sum();
        let limit = -tr_d * tr_dt / (q * 30f64.sqrt() * 60.0);
        assert!((small.mu_log / limit - 1.0).abs() < 1e-4);
    }

    #[test]
    fn v_matches_symmetric_form() {
        let d = uniform(20, 1.0, 2.0, 15);
        let dt = uniform(25, 1.0, 2.0, 16);
        let p = mi_clt_params(&d, &dt, 0.8, 2.0, &EntryModel::complex_gaussian()).unwrap();
        let sym: f64 = d.iter().map(|x| (1.0 + p.delta_tilde * x).ln()).sum::<f64>()
            + dt.iter().map(|x| (1.0 + p.delta * x).ln()).sum::<f64>()
            - 25.0 * 0.8 * p.delta * p.delta_tilde;
        assert!((p.v - sym).abs() < 1e-10);
    }

    #[test]
    fn outage_limits_and_midpoint() {
        let d = uniform(16, 1.0, 2.0, 17);
        let dt = uniform(32, 1.0, 2.0, 18);
        let q = 0.5 * 32f64.sqrt();
        let p = mi_clt_params(&d, &dt, 1.0, q, &EntryModel::complex_gaussian()).unwrap();
        assert!(outage_probability(-1e6, &p, q, 16) < 1e-12);
        assert!(outage_probability(1e6, &p, q, 16) > 1.0 - 1e-12);
        let mid = p.v + 16f64.sqrt() / q * p.mu_log;
        assert_relative_eq!(outage_probability(mid, &p, q, 16), 0.5, epsilon = 1e-12);
        let rates: Vec<f64> = (0..50).map(|k| p.v - 5.0 + 0.2 * k as f64).collect();
        let curve: Vec<f64> = rates.iter().map(|r| outage_probability(*r, &p, q, 16)).collect();
        assert!(curve.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn snr_conversion() {
        assert_relative_eq!(noise_variance_from_snr_db(0.0), 1.0);
        assert_relative_eq!(noise_variance_from_snr_db(10.0), 0.1, epsilon = 1e-15);
    }
}
