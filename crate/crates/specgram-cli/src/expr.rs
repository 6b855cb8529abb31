//! Sparsity expressions such as `0.5*sqrt(n)` or `n^(1/3)`.

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// q given either as a number or as an expression in `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QSpec {
    Value(f64),
    Expr(String),
}

impl QSpec {
    pub fn parse(text: &str) -> Self {
        match text.trim().parse::<f64>() {
            Ok(v) => QSpec::Value(v),
            Err(_) => QSpec::Expr(text.trim().to_string()),
        }
    }

    /// Evaluates q at `n` and checks that n^phi_min ≤ q ≤ √n.
    pub fn resolve(&self, n: usize, phi_min: f64) -> Result<f64, CliError> {
        let nf = n as f64;
        let q = match self {
            QSpec::Value(v) => *v,
            QSpec::Expr(text) => {
                let expr: meval::Expr = text
                    .parse()
                    .map_err(|e| CliError::Config(format!("cannot parse q expression '{text}': {e}")))?;
                let f = expr
                    .bind("n")
                    .map_err(|e| CliError::Config(format!("q expression '{text}' may only use n: {e}")))?;
                f(nf)
            }
        };
        if !q.is_finite() {
            return Err(CliError::Config(format!("q evaluates to {q}")));
        }
        let lower = nf.powf(phi_min);
        if q < lower * (1.0 - 1e-12) || q > nf.sqrt() * (1.0 + 1e-12) {
            return Err(CliError::Config(format!(
                "q = {q} is outside [n^{phi_min}, sqrt(n)] = [{lower}, {}] for n = {n}",
                nf.sqrt()
            )));
        }
        Ok(q.min(nf.sqrt()))
    }
}
