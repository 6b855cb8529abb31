//! Rectangular integration contours and analytic test functions.

use std::fmt;
use std::num::NonZeroUsize;
use std::sync::Arc;

use gauss_quad::legendre::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::detequiv::spectral_support_bound;
use crate::error::{Result, SpecgramError};
use crate::linalg::C64;
use crate::profile::VarianceProfile;

/// Per-edge quadrature rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    GaussLegendre,
    /// Composite midpoint rule; never places a node on the real axis.
    Midpoint,
}

/// Positively oriented rectangle with corners x_left ± i·v0 and x_right ± i·v0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub x_left: f64,
    pub x_right: f64,
    pub v0: f64,
    pub nodes_per_edge: usize,
    pub rule: QuadratureRule,
}

/// A quadrature node: position and complex weight (including dz).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourNode {
    pub z: C64,
    pub weight: C64,
}

/// Default number of nodes on each edge.
pub const DEFAULT_NODES_PER_EDGE: usize = 48;
/// Dilation factor of the second covariance contour.
pub const SECOND_CONTOUR_DILATION: f64 = 1.15;

impl Contour {
    pub fn new(x_left: f64, x_right: f64, v0: f64, nodes_per_edge: usize, rule: QuadratureRule) -> Result<Self> {
        if !(x_left < x_right && v0 > 0.0 && nodes_per_edge > 0 && x_left.is_finite() && x_right.is_finite()) {
            return Err(SpecgramError::Contour(format!(
                "need x_left < x_right, v0 > 0 and at least one node (got {x_left}, {x_right}, {v0}, {nodes_per_edge})"
            )));
        }
        Ok(Self { x_left, x_right, v0, nodes_per_edge, rule })
    }

    /// Default contour for `profile`, kept clear of the exclusion points of `fns`.
    ///
    /// x_right = 1.2·σ²_max(1+√c)², x_left = −0.1·x_right moved right of any
    /// negative exclusion point (to the midpoint between it and zero), v0 = 1.
    pub fn default_for(profile: &VarianceProfile, fns: &[&TestFunction]) -> Result<Self> {
        let x_right = 1.2 * spectral_support_bound(profile);
        let mut x_left = -0.1 * x_right;
        for e in fns.iter().flat_map(|f| f.exclusion()) {
            if e >= 0.0 && e <= x_right {
                return Err(SpecgramError::Contour(format!(
                    "exclusion point {e} lies inside the default contour; supply a contour explicitly"
                )));
            }
            if e < 0.0 && e >= x_left {
                x_left = 0.5 * e;
            }
        }
        let contour = Self::new(x_left, x_right, 1.0, DEFAULT_NODES_PER_EDGE, QuadratureRule::GaussLegendre)?;
        contour.validate_for(profile, fns)?;
        Ok(contour)
    }

    pub fn with_nodes(self, nodes_per_edge: usize) -> Self {
        Self { nodes_per_edge, ..self }
    }

    pub fn with_rule(self, rule: QuadratureRule) -> Self {
        Self { rule, ..self }
    }

    /// Same rectangle with twice the nodes per edge.
    pub fn refined(&self) -> Self {
        self.with_nodes(2 * self.nodes_per_edge)
    }

    /// Rectangle scaled by `factor` about its center.
    ///
    /// The left edge is kept strictly right of exclusion points lying to the
    /// left of the original contour (at most halfway towards them).
    pub fn dilated(&self, factor: f64, fns: &[&TestFunction]) -> Self {
        let center = 0.5 * (self.x_left + self.x_right);
        let half = 0.5 * (self.x_right - self.x_left) * factor;
        let mut x_left = center - half;
        for e in fns.iter().flat_map(|f| f.exclusion()) {
            if e < self.x_left {
                x_left = x_left.max(0.5 * (self.x_left + e));
            }
        }
        Self { x_left, x_right: center + half, v0: self.v0 * factor, ..*self }
    }

    /// True when one contour lies strictly inside the other.
    pub fn is_nested_with(&self, other: &Contour) -> bool {
        let inside = |a: &Contour, b: &Contour| b.x_left < a.x_left && b.x_right > a.x_right && b.v0 > a.v0;
        inside(self, other) || inside(other, self)
    }

    /// Checks that the contour encloses the support and avoids the exclusion sets.
    pub fn validate_for(&self, profile: &VarianceProfile, fns: &[&TestFunction]) -> Result<()> {
        let bound = spectral_support_bound(profile);
        if self.x_right <= bound {
            return Err(SpecgramError::Contour(format!(
                "x_right = {} does not exceed the support bound {bound}; enlarge x_right",
                self.x_right
            )));
        }
        if profile.p() >= profile.n() && self.x_left >= 0.0 {
            return Err(SpecgramError::Contour(
                "the support reaches zero, so x_left must be negative".into(),
            ));
        }
        for f in fns {
            for e in f.exclusion() {
                if e >= self.x_left && e <= self.x_right {
                    return Err(SpecgramError::Contour(format!(
                        "{} is singular at {e}, which the contour encloses",
                        f.name()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Nodes on the upper half path x_r → x_r + i·v0 → x_l + i·v0 → x_l.
    pub fn upper_nodes(&self) -> Vec<ContourNode> {
        let corners = [
            C64::new(self.x_right, 0.0),
            C64::new(self.x_right, self.v0),
            C64::new(self.x_left, self.v0),
            C64::new(self.x_left, 0.0),
        ];
        let unit = self.unit_rule();
        corners
            .windows(2)
            .flat_map(|edge| {
                let (a, b) = (edge[0], edge[1]);
                unit.iter().map(move |&(u, w)| ContourNode {
                    z: a + (b - a) * (0.5 * (u + 1.0)),
                    weight: (b - a) * (0.5 * w),
                })
            })
            .collect()
    }

    /// Nodes on the whole closed contour; the lower half mirrors the upper.
    pub fn full_nodes(&self) -> Vec<ContourNode> {
        let upper = self.upper_nodes();
        let lower: Vec<ContourNode> = upper
            .iter()
            .map(|nd| ContourNode { z: nd.z.conj(), weight: -nd.weight.conj() })
            .collect();
        upper.into_iter().chain(lower).collect()
    }

    fn unit_rule(&self) -> Vec<(f64, f64)> {
        let m = self.nodes_per_edge;
        match self.rule {
            QuadratureRule::GaussLegendre => {
                let rule = GaussLegendre::new(NonZeroUsize::new(m).expect("validated node count"));
                let mut pairs = rule.as_node_weight_pairs().to_vec();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                pairs
            }
            QuadratureRule::Midpoint => {
                let h = 2.0 / m as f64;
                (0..m).map(|k| (-1.0 + (k as f64 + 0.5) * h, h)).collect()
            }
        }
    }
}

/// Complex map used by custom test functions.
pub type ComplexFn = Arc<dyn Fn(C64) -> C64 + Send + Sync>;

#[derive(Clone)]
enum FnKind {
    Zero,
    Identity,
    Square,
    Log1pScaled(f64),
    Custom { value: ComplexFn, derivative: ComplexFn, exclusion: Vec<f64>, domain_min: Option<f64> },
}

/// Fast evaluation route for a linear spectral statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LssRoute {
    Zero,
    /// Σ λ = Tr S.
    Trace,
    /// Σ λ² = Tr S².
    TraceOfSquare,
    /// Σ log(1 + λ/σ²) = log det(I + S/σ²).
    LogDet { sigma2: f64 },
    Eigenvalues,
}

/// An analytic test function paired with its derivative.
#[derive(Clone)]
pub struct TestFunction {
    name: String,
    kind: FnKind,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TestFunction({})", self.name)
    }
}

impl TestFunction {
    pub fn zero() -> Self {
        Self { name: "zero".into(), kind: FnKind::Zero }
    }

    /// f(x) = x.
    pub fn identity() -> Self {
        Self { name: "x".into(), kind: FnKind::Identity }
    }

    /// f(x) = x².
    pub fn square() -> Self {
        Self { name: "x2".into(), kind: FnKind::Square }
    }

    /// f(x) = log(1 + x/σ²), with branch point −σ².
    pub fn log1p_scaled(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(SpecgramError::Validation(format!("sigma2 must be positive, got {sigma2}")));
        }
        Ok(Self { name: format!("log1p_scaled:{sigma2}"), kind: FnKind::Log1pScaled(sigma2) })
    }

    /// User-supplied function; `domain_min` bounds the real inputs from below (exclusive).
    pub fn custom(
        name: &str,
        value: ComplexFn,
        derivative: ComplexFn,
        exclusion: Vec<f64>,
        domain_min: Option<f64>,
    ) -> Self {
        Self { name: name.into(), kind: FnKind::Custom { value, derivative, exclusion, domain_min } }
    }

    /// Parses `x`, `x2`, `zero` or `log1p_scaled:<sigma2>` (`log1p` means σ² = 1).
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, param) = match spec.split_once(':') {
            Some((n, p)) => (n.trim(), Some(p.trim())),
            None => (spec.trim(), None),
        };
        match (name, param) {
            ("x", None) => Ok(Self::identity()),
            ("x2", None) => Ok(Self::square()),
            ("zero", None) => Ok(Self::zero()),
            ("log1p", None) => Self::log1p_scaled(1.0),
            ("log1p_scaled", Some(p)) => {
                let sigma2 = p.parse::<f64>().map_err(|_| {
                    SpecgramError::Validation(format!("cannot parse sigma2 in '{spec}'"))
                })?;
                Self::log1p_scaled(sigma2)
            }
            _ => Err(SpecgramError::Validation(format!(
                "unknown test function '{spec}' (expected x, x2, zero, log1p_scaled:<sigma2>)"
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, FnKind::Zero)
    }

    pub fn value(&self, z: C64) -> C64 {
        match &self.kind {
            FnKind::Zero => C64::new(0.0, 0.0),
            FnKind::Identity => z,
            FnKind::Square => z * z,
            FnKind::Log1pScaled(s2) => (1.0 + z / *s2).ln(),
            FnKind::Custom { value, .. } => value(z),
        }
    }

    pub fn derivative(&self, z: C64) -> C64 {
        match &self.kind {
            FnKind::Zero => C64::new(0.0, 0.0),
            FnKind::Identity => C64::new(1.0, 0.0),
            FnKind::Square => 2.0 * z,
            FnKind::Log1pScaled(s2) => 1.0 / (*s2 + z),
            FnKind::Custom { derivative, .. } => derivative(z),
        }
    }

    /// Singular or branch points on the real axis.
    pub fn exclusion(&self) -> Vec<f64> {
        match &self.kind {
            FnKind::Log1pScaled(s2) => vec![-*s2],
            FnKind::Custom { exclusion, .. } => exclusion.clone(),
            _ => Vec::new(),
        }
    }

    /// Real evaluation with a domain check.
    pub fn value_real(&self, x: f64) -> Result<f64> {
        let lower = match &self.kind {
            FnKind::Log1pScaled(s2) => Some(-*s2),
            FnKind::Custom { domain_min, .. } => *domain_min,
            _ => None,
        };
        if lower.is_some_and(|lo| x <= lo) {
            return Err(SpecgramError::Domain(format!("{} is undefined at {x}", self.name)));
        }
        let v = self.value(C64::new(x, 0.0)).re;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(SpecgramError::Domain(format!("{} is not finite at {x}", self.name)))
        }
    }

    /// Cheapest way to evaluate Σ f(λ_i) for a Gram matrix.
    pub fn lss_route(&self) -> LssRoute {
        match &self.kind {
            FnKind::Zero => LssRoute::Zero,
            FnKind::Identity => LssRoute::Trace,
            FnKind::Square => LssRoute::TraceOfSquare,
            FnKind::Log1pScaled(s2) => LssRoute::LogDet { sigma2: *s2 },
            FnKind::Custom { .. } => LssRoute::Eigenvalues,
        }
    }

    /// Compares the derivative with central complex differences at `points`.
    pub fn check_derivative(&self, points: &[C64]) -> Result<()> {
        for &z in points {
            let h = 1e-5 * z.norm().max(1.0);
            let fd = (self.value(z + h) - self.value(z - h)) / (2.0 * h);
            let exact = self.derivative(z);
            let rel = (fd - exact).norm() / exact.norm().max(1e-300);
            if rel >= 1e-6 && (fd - exact).norm() > 1e-12 {
                return Err(SpecgramError::Validation(format!(
                    "derivative of {} disagrees with finite differences at {z} (relative error {rel:.2e})",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_integrate_closed_contour() {
        let c = Contour::new(-1.0, 5.0, 1.0, 64, QuadratureRule::GaussLegendre).unwrap();
        let nodes = c.full_nodes();
        // ∮ dz = 0 and ∮ dz/(z − 2) = 2πi.
        let total: C64 = nodes.iter().map(|nd| nd.weight).sum();
        assert!(total.norm() < 1e-13);
        let res: C64 = nodes.iter().map(|nd| nd.weight / (nd.z - 2.0)).sum();
        assert!((res - C64::new(0.0, 2.0 * std::f64::consts::PI)).norm() < 1e-9, "{res}");
    }

    #[test]
    fn midpoint_rule_has_no_axis_nodes() {
        let c = Contour::new(-1.0, 5.0, 1.0, 10, QuadratureRule::Midpoint).unwrap();
        assert!(c.upper_nodes().iter().all(|nd| nd.z.im > 0.0));
        let total: C64 = c.full_nodes().iter().map(|nd| nd.weight).sum();
        assert!(total.norm() < 1e-13);
    }

    #[test]
    fn default_contour_respects_log_branch_point() {
        let prof = VarianceProfile::constant(10, 10, 1.0).unwrap();
        let f = TestFunction::log1p_scaled(1.0).unwrap();
        let c = Contour::default_for(&prof, &[&f]).unwrap();
        assert!((c.x_right - 4.8).abs() < 1e-12);
        assert!((c.x_left + 0.48).abs() < 1e-12);
        let c2 = c.dilated(SECOND_CONTOUR_DILATION, &[&f]);
        assert!(c2.x_left > -1.0 && c.is_nested_with(&c2));
        let wide = TestFunction::log1p_scaled(0.2).unwrap();
        let c = Contour::default_for(&prof, &[&wide]).unwrap();
        assert!((c.x_left + 0.1).abs() < 1e-12);
    }

    #[test]
    fn contour_validation() {
        let prof = VarianceProfile::constant(10, 10, 1.0).unwrap();
        let c = Contour::new(-0.5, 3.0, 1.0, 8, QuadratureRule::GaussLegendre).unwrap();
        assert!(matches!(c.validate_for(&prof, &[]), Err(SpecgramError::Contour(_))));
        let c = Contour::new(0.1, 5.0, 1.0, 8, QuadratureRule::GaussLegendre).unwrap();
        assert!(c.validate_for(&prof, &[]).is_err());
        let f = TestFunction::log1p_scaled(0.5).unwrap();
        let c = Contour::new(-1.0, 5.0, 1.0, 8, QuadratureRule::GaussLegendre).unwrap();
        assert!(c.validate_for(&prof, &[&f]).is_err());
    }

    #[test]
    fn builtin_derivatives_are_exact() {
        let pts = [C64::new(0.3, 0.7), C64::new(4.0, 1.0), C64::new(-0.2, 0.1)];
        for spec in ["x", "x2", "log1p_scaled:1.5", "zero"] {
            TestFunction::parse(spec).unwrap().check_derivative(&pts).unwrap();
        }
        let bad = TestFunction::custom(
            "bad",
            Arc::new(|z: C64| z * z),
            Arc::new(|z: C64| z),
            vec![],
            None,
        );
        assert!(bad.check_derivative(&pts).is_err());
    }

    #[test]
    fn parse_and_domain() {
        assert!(TestFunction::parse("sin").is_err());
        let f = TestFunction::parse("log1p_scaled:2").unwrap();
        assert_eq!(f.exclusion(), vec![-2.0]);
        assert!(f.value_real(-2.5).is_err());
        assert!((f.value_real(2.0).unwrap() - 2f64.ln()).abs() < 1e-15);
    }
}
