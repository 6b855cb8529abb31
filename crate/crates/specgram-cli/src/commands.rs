use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use specgram::detequiv::{flag_near_edges, lsd_density_with, SolverOptions};
use specgram::fluct::{
    clt_cov_with, clt_mean_with, corrected_centering_with, trace_variance_closed_form, AReading, Contour, FluctOptions,
    QuadratureResult, QuadratureRule, TestFunction, DEFAULT_NODES_PER_EDGE, SECOND_CONTOUR_DILATION,
};
use specgram::mimo::{
    empirical_outage, equality_test, equality_test_replay, mi_clt_params, noise_variance_from_snr_db,
    outage_probability, simulate_mutual_information, Alternative, Channel, EqualityTestOptions, FadingMatrix,
    VarianceEstimator,
};
use specgram::profile::{EntryModel, ModelSpec, ProfileSpec, Regime, SparsityConfig, VarianceProfile};
use specgram::simulate::{mc_battery, quadratic_form_oracle, replication_rng, McConfig, QuadraticFormCase};

use crate::error::CliError;
use crate::expr::QSpec;
use crate::output::{num, read_file, summary_path, write_csv, write_json, Metadata};

/// Smallest exponent φ = log q / log n accepted by the general-f kernels in the high regime.
pub const PHI_MIN_HIGH: f64 = 0.25;

pub fn phi_min(regime: Regime) -> f64 {
    match regime {
        Regime::High => PHI_MIN_HIGH,
        Regime::Moderate => 0.0,
    }
}

/// `a:b:m` → m equally spaced points from a to b.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Config(format!("grid '{text}' must look like a:b:m with a < b and m >= 2"));
    let parts: Vec<&str> = text.split(':').collect();
    let [a, b, m] = parts.as_slice() else { return Err(bad()) };
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    let m: usize = m.trim().parse().map_err(|_| bad())?;
    if !(a < b) || m < 2 {
        return Err(bad());
    }
    Ok((0..m).map(|k| a + (b - a) * k as f64 / (m - 1) as f64).collect())
}

/// Model names accepted on the command line: `real_gaussian`, `complex_gaussian`,
/// `gamma:<shape>` and `complex_gamma:<shape>`.
pub fn parse_model(text: &str) -> Result<ModelSpec, CliError> {
    let (name, param) = match text.split_once(':') {
        Some((n, p)) => (n.trim(), Some(p.trim())),
        None => (text.trim(), None),
    };
    let shape = |p: Option<&str>| -> Result<f64, CliError> {
        p.unwrap_or("2")
            .parse()
            .map_err(|_| CliError::Config(format!("cannot parse the Gamma shape in '{text}'")))
    };
    match name {
        "real_gaussian" | "gaussian" => Ok(ModelSpec::RealGaussian),
        "complex_gaussian" => Ok(ModelSpec::ComplexGaussian),
        "gamma" => Ok(ModelSpec::ShiftedGamma { shape: shape(param)?, scale: 1.0 }),
        "complex_gamma" => Ok(ModelSpec::ComplexShiftedGamma { shape: shape(param)?, scale: 1.0 }),
        _ => Err(CliError::Config(format!(
            "unknown model '{text}' (expected real_gaussian, complex_gaussian, gamma[:shape], complex_gamma[:shape])"
        ))),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

fn read_matrix(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let bytes = read_file(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| CliError::Config(format!("{}: cannot parse '{v}'", path.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Config(format!("{}: expected a nonempty rectangular matrix", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn read_vector(path: &Path) -> Result<Vec<f64>, CliError> {
    let m = read_matrix(path)?;
    Ok(m.iter().copied().collect())
}

fn load_profile(path: &Path) -> Result<(ProfileSource, VarianceProfile), CliError> {
    let profile = VarianceProfile::from_path(path)?;
    let source = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        ProfileSource::Spec(read_json(path)?)
    } else {
        ProfileSource::Dense { rows: profile.p(), cols: profile.n(), values: profile.as_row_major().to_vec() }
    };
    Ok((source, profile))
}

/// The profile as hashed into the metadata: the JSON spec, or the parsed values of a CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSource {
    Spec(ProfileSpec),
    Dense { rows: usize, cols: usize, values: Vec<f64> },
}

// ---------------------------------------------------------------- lsd

#[derive(Debug, Serialize)]
pub struct LsdConfig {
    pub profile: ProfileSource,
    pub grid: String,
    pub eta: f64,
    pub solver: SolverOptions,
}

pub fn lsd(profile_path: &Path, grid: &str, eta: f64, solver: SolverOptions, out: Option<&Path>) -> Result<(), CliError> {
    let (source, profile) = load_profile(profile_path)?;
    let xs = parse_grid(grid)?;
    let density = lsd_density_with(&profile, &xs, eta, &solver)?;
    let near = flag_near_edges(&xs, &density, eta);
    let config = LsdConfig { profile: source, grid: grid.to_string(), eta, solver };
    let meta = Metadata::for_config(&config, None)?;
    let rows: Vec<Vec<String>> = xs
        .iter()
        .zip(&density)
        .zip(&near)
        .map(|((x, d), e)| vec![num(*x), num(*d), e.to_string()])
        .collect();
    write_csv(out, &meta, &["x", "density", "near_edge"], &rows)
}

// ---------------------------------------------------------------- clt

#[derive(Debug, Serialize)]
pub struct CltConfig {
    pub profile: ProfileSource,
    pub f: String,
    pub g: String,
    pub regime: Regime,
    pub q: QSpec,
    pub model: ModelSpec,
    pub contour: Contour,
    pub fluct: FluctOptions,
}

#[derive(Debug, Serialize)]
struct CltOutput {
    q: f64,
    s: f64,
    phi: f64,
    mean: QuadratureResult,
    corrected_centering: Option<QuadratureResult>,
    cov: QuadratureResult,
    quadrature_diagnostics: QuadratureDiagnostics,
}

#[derive(Debug, Serialize)]
struct QuadratureDiagnostics {
    contour: Contour,
    outer_contour: Contour,
    warnings: Vec<String>,
}

pub struct CltArgs<'a> {
    pub profile: &'a Path,
    pub f: &'a str,
    pub g: Option<&'a str>,
    pub regime: Regime,
    pub q: &'a str,
    pub model: &'a str,
    pub nodes: usize,
    pub rule: QuadratureRule,
    pub a_reading: AReading,
    pub convergence_check: bool,
    pub out: Option<&'a Path>,
}

pub fn clt(args: CltArgs<'_>) -> Result<(), CliError> {
    let (source, profile) = load_profile(args.profile)?;
    let f = TestFunction::parse(args.f)?;
    let g = TestFunction::parse(args.g.unwrap_or(args.f))?;
    let q_spec = QSpec::parse(args.q);
    let q = q_spec.resolve(profile.n(), phi_min(args.regime))?;
    let sparsity = SparsityConfig::new(q, profile.n(), args.regime)?;
    let model_spec = parse_model(args.model)?;
    let model = EntryModel::from_spec(model_spec)?;
    let contour = Contour::default_for(&profile, &[&f, &g])?.with_nodes(args.nodes).with_rule(args.rule);
    let outer = contour.dilated(SECOND_CONTOUR_DILATION, &[&f, &g]);
    let fluct = FluctOptions {
        a_reading: args.a_reading,
        convergence_check: args.convergence_check,
        ..FluctOptions::default()
    };

    let mean = clt_mean_with(&profile, &f, &contour, &sparsity, &model, &fluct)?;
    let corrected = match args.regime {
        Regime::High => Some(corrected_centering_with(&profile, &f, &contour, &sparsity, &model, &fluct)?),
        Regime::Moderate => None,
    };
    let cov = clt_cov_with(&profile, &f, &g, &contour, &outer, &sparsity, &model, &fluct)?;
    let warnings = [Some(&mean), corrected.as_ref(), Some(&cov)]
        .into_iter()
        .flatten()
        .filter_map(|r| r.warning.clone())
        .collect();

    let config = CltConfig {
        profile: source,
        f: f.name().to_string(),
        g: g.name().to_string(),
        regime: args.regime,
        q: q_spec,
        model: model_spec,
        contour,
        fluct,
    };
    let meta = Metadata::for_config(&config, None)?;
    let result = CltOutput {
        q,
        s: sparsity.s,
        phi: sparsity.phi,
        mean,
        corrected_centering: corrected,
        cov,
        quadrature_diagnostics: QuadratureDiagnostics { contour, outer_contour: outer, warnings },
    };
    write_json(args.out, &meta, &result)
}

// ---------------------------------------------------------------- simulate

fn default_nodes() -> usize {
    DEFAULT_NODES_PER_EDGE
}

/// JSON configuration of `simulate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub profile: ProfileSpec,
    pub q: QSpec,
    pub regime: Regime,
    pub model: ModelSpec,
    pub f: String,
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default)]
    pub a_reading: AReading,
}

pub fn simulate(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let config: SimulateConfig = read_json(config_path)?;
    let profile = VarianceProfile::from_spec(&config.profile)?;
    let q = config.q.resolve(profile.n(), phi_min(config.regime))?;
    let sparsity = SparsityConfig::new(q, profile.n(), config.regime)?;
    let model = EntryModel::from_spec(config.model)?;
    let f = TestFunction::parse(&config.f)?;
    let mut mc = McConfig::new(profile.clone(), sparsity, model, f.clone(), config.replications, config.seed);
    if !f.is_zero() {
        mc.contour = Some(Contour::default_for(&profile, &[&f])?.with_nodes(config.nodes));
    }
    mc.fluct.a_reading = config.a_reading;
    let run = mc_battery(&mc)?;

    let meta = Metadata::for_config(&config, Some(config.seed))?;
    let name = &run.summary.statistic_name;
    let rows: Vec<Vec<String>> = run
        .values
        .iter()
        .enumerate()
        .map(|(rep, v)| vec![rep.to_string(), name.clone(), num(*v)])
        .collect();
    write_csv(Some(out), &meta, &["rep", "statistic", "value"], &rows)?;
    let summary = serde_json::json!({ "summary": run.summary, "centering": run.centering, "q": q, "s": sparsity.s });
    write_json(Some(&summary_path(out)), &meta, &summary)
}

// ---------------------------------------------------------------- test-equality

pub struct EqualityArgs<'a> {
    pub h1: &'a Path,
    pub h2: &'a Path,
    pub h1_imag: Option<&'a Path>,
    pub h2_imag: Option<&'a Path>,
    pub opts: EqualityTestOptions,
    pub out: Option<&'a Path>,
}

fn load_channel(re: &Path, im: Option<&Path>) -> Result<Channel, CliError> {
    let re = read_matrix(re)?;
    match im {
        None => Ok(Channel::from_real(re)?),
        Some(path) => {
            let im = read_matrix(path)?;
            if im.shape() != re.shape() {
                return Err(CliError::Config("real and imaginary parts differ in shape".into()));
            }
            Ok(Channel::from_complex(&re.zip_map(&im, specgram::C64::new))?)
        }
    }
}

pub fn test_equality(args: EqualityArgs<'_>) -> Result<(), CliError> {
    let h1 = load_channel(args.h1, args.h1_imag)?;
    let h2 = load_channel(args.h2, args.h2_imag)?;
    let result = equality_test(&h1, &h2, &args.opts)?;
    let flat = |h: &Channel| {
        let (rows, cols) = h.shape();
        serde_json::json!({
            "rows": rows,
            "cols": cols,
            "re": h.re.as_slice(),
            "im": h.im.as_ref().map(|m| m.as_slice().to_vec()),
        })
    };
    let config = serde_json::json!({ "h1": flat(&h1), "h2": flat(&h2), "opts": args.opts });
    let meta = Metadata::for_config(&config, None)?;
    write_json(args.out, &meta, &result)
}

fn default_alpha() -> f64 {
    0.05
}

fn default_gain_range() -> (f64, f64) {
    (2.0, 4.0)
}

/// Replay of the equality test on synthetic fading matrices.
///
/// L1 is either read from `fading` or drawn uniformly from `gain_range` with `seed`;
/// L2 = L1 − θ entrywise. Channel pairs use the streams of `seed + 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    pub receive: usize,
    pub transmit: usize,
    #[serde(default)]
    pub fading: Option<PathBuf>,
    #[serde(default = "default_gain_range")]
    pub gain_range: (f64, f64),
    #[serde(default)]
    pub theta: f64,
    pub q: QSpec,
    pub model: ModelSpec,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub alternative: Alternative,
    #[serde(default)]
    pub estimator: VarianceEstimator,
    #[serde(default)]
    pub nu4: Option<f64>,
    pub replications: usize,
    pub seed: u64,
}

pub fn test_equality_replay(config_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let config: ReplayConfig = read_json(config_path)?;
    let (nr, nt) = (config.receive, config.transmit);
    let gains = match &config.fading {
        Some(path) => read_matrix(path)?,
        None => {
            let (lo, hi) = config.gain_range;
            if !(lo < hi) {
                return Err(CliError::Config("gain_range must be increasing".into()));
            }
            let mut rng = replication_rng(config.seed, 0);
            DMatrix::from_vec(nr, nt, (0..nr * nt).map(|_| rng.random_range(lo..hi)).collect())
        }
    };
    if gains.shape() != (nr, nt) {
        return Err(CliError::Config(format!("fading matrix is {:?}, expected ({nr}, {nt})", gains.shape())));
    }
    let l1 = FadingMatrix::new(gains)?;
    let l2 = FadingMatrix::new(l1.gains().map(|v| v - config.theta))?;
    let q = config.q.resolve(nt, 0.0)?;
    let s = q * q / nt as f64;
    let model = EntryModel::from_spec(config.model)?;
    let mut opts = EqualityTestOptions::new(config.alpha, config.nu4.unwrap_or(model.nu4))
        .with_alternative(config.alternative);
    opts.estimator = config.estimator;
    let replay = equality_test_replay(&l1, &l2, s, &model, &opts, config.replications, config.seed + 1)?;
    let predicted = specgram::mimo::predicted_power(&l1, &l2, s, &model, config.alpha, config.alternative)?;
    let meta = Metadata::for_config(&config, Some(config.seed))?;
    let result = serde_json::json!({
        "rejection_rate": replay.summary.rejection_rate,
        "predicted_rejection_rate": predicted,
        "q": q,
        "s": s,
        "summary": replay.summary,
    });
    write_json(out, &meta, &result)
}

// ---------------------------------------------------------------- outage

pub struct OutageArgs<'a> {
    pub d: &'a Path,
    pub dt: &'a Path,
    pub snr_db: &'a [f64],
    pub rate_grid: &'a str,
    pub q: &'a str,
    pub model: &'a str,
    pub reps: Option<usize>,
    pub seed: u64,
    pub out: Option<&'a Path>,
}

pub fn outage(args: OutageArgs<'_>) -> Result<(), CliError> {
    let d = read_vector(args.d)?;
    let dt = read_vector(args.dt)?;
    let rates = parse_grid(args.rate_grid)?;
    let q_spec = QSpec::parse(args.q);
    let q = q_spec.resolve(dt.len(), 0.0)?;
    let model_spec = parse_model(args.model)?;
    let model = EntryModel::from_spec(model_spec)?;
    if args.snr_db.is_empty() {
        return Err(CliError::Config("need at least one SNR value".into()));
    }
    let sigma2s: Vec<f64> = args.snr_db.iter().map(|s| noise_variance_from_snr_db(*s)).collect();
    let params = sigma2s
        .iter()
        .map(|s2| mi_clt_params(&d, &dt, *s2, q, &model))
        .collect::<Result<Vec<_>, _>>()?;
    let empirical = match args.reps {
        Some(reps) => Some(simulate_mutual_information(&d, &dt, q, &model, &sigma2s, reps, args.seed)?),
        None => None,
    };

    #[derive(Serialize)]
    struct Config<'a> {
        d: &'a [f64],
        dt: &'a [f64],
        snr_db: &'a [f64],
        rate_grid: &'a str,
        q: &'a QSpec,
        model: ModelSpec,
        reps: Option<usize>,
        seed: u64,
    }
    let config = Config {
        d: &d,
        dt: &dt,
        snr_db: args.snr_db,
        rate_grid: args.rate_grid,
        q: &q_spec,
        model: model_spec,
        reps: args.reps,
        seed: args.seed,
    };
    let meta = Metadata::for_config(&config, args.reps.map(|_| args.seed))?;

    let mut header = vec!["R", "snr_db", "p_out_theory"];
    if empirical.is_some() {
        header.push("p_out_empirical");
    }
    let mut rows = Vec::with_capacity(rates.len() * sigma2s.len());
    for (k, snr) in args.snr_db.iter().enumerate() {
        for rate in &rates {
            let mut row = vec![num(*rate), num(*snr), num(outage_probability(*rate, &params[k], q, d.len()))];
            if let Some(values) = &empirical {
                row.push(num(empirical_outage(&values[k], *rate)));
            }
            rows.push(row);
        }
    }
    write_csv(args.out, &meta, &header, &rows)
}

// ---------------------------------------------------------------- oracle

pub struct QuadraticFormArgs<'a> {
    pub dim: usize,
    pub model: &'a str,
    pub s: f64,
    pub reps: usize,
    pub seed: u64,
    pub out: Option<&'a Path>,
}

pub fn oracle_quadratic_form(args: QuadraticFormArgs<'_>) -> Result<(), CliError> {
    let model_spec = parse_model(args.model)?;
    let model = EntryModel::from_spec(model_spec)?;
    let case = QuadraticFormCase::random(args.dim, model.is_complex(), args.seed);
    let check = quadratic_form_oracle(&model, &case.variances, args.s, &case.a, &case.b, args.reps, args.seed)?;
    #[derive(Serialize)]
    struct Config {
        dim: usize,
        model: ModelSpec,
        s: f64,
        reps: usize,
        seed: u64,
    }
    let config = Config { dim: args.dim, model: model_spec, s: args.s, reps: args.reps, seed: args.seed };
    let meta = Metadata::for_config(&config, Some(args.seed))?;
    let result = serde_json::json!({ "check": check, "z_score": check.z_score() });
    write_json(args.out, &meta, &result)
}

pub fn oracle_trace_anchor(
    profile_path: &Path,
    q: &str,
    regime: Regime,
    model: &str,
    nodes: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (source, profile) = load_profile(profile_path)?;
    let q_spec = QSpec::parse(q);
    let qv = q_spec.resolve(profile.n(), phi_min(regime))?;
    let sparsity = SparsityConfig::new(qv, profile.n(), regime)?;
    let model_spec = parse_model(model)?;
    let model = EntryModel::from_spec(model_spec)?;
    let f = TestFunction::identity();
    let contour = Contour::default_for(&profile, &[&f])?.with_nodes(nodes);
    let outer = contour.dilated(SECOND_CONTOUR_DILATION, &[&f]);
    let integral = clt_cov_with(&profile, &f, &f, &contour, &outer, &sparsity, &model, &FluctOptions::default())?;
    let closed = trace_variance_closed_form(&profile, &sparsity, &model);
    #[derive(Serialize)]
    struct Config {
        profile: ProfileSource,
        q: QSpec,
        regime: Regime,
        model: ModelSpec,
        nodes: usize,
    }
    let config = Config { profile: source, q: q_spec, regime, model: model_spec, nodes };
    let meta = Metadata::for_config(&config, None)?;
    let result = serde_json::json!({
        "contour_integral": integral,
        "closed_form": closed,
        "relative_error": (integral.value - closed).abs() / closed.abs(),
    });
    write_json(out, &meta, &result)
}
