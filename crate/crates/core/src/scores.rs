//! Post-hoc OOD scores computed from logits. Every score is oriented so that
//! higher means more in-distribution.
//!
//! Energy follows Liu et al. (free energy `T log sum exp(z / T)`), GEN follows
//! Liu et al. (generalized entropy over the top-M probabilities).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::features::LogitMatrix;
use crate::losses::softmax_row;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Msp,
    #[default]
    Maxlogit,
    Energy,
    Entropy,
    Gen,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 5] = [
        ScoreMethod::Maxlogit,
        ScoreMethod::Msp,
        ScoreMethod::Energy,
        ScoreMethod::Entropy,
        ScoreMethod::Gen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreMethod::Msp => "msp",
            ScoreMethod::Maxlogit => "maxlogit",
            ScoreMethod::Energy => "energy",
            ScoreMethod::Entropy => "entropy",
            ScoreMethod::Gen => "gen",
        }
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown score method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreParams {
    /// Energy temperature.
    pub temperature: f64,
    /// GEN exponent, in (0, 1).
    pub gen_gamma: f64,
    /// GEN top-M; `None` means `min(10, C)`.
    pub gen_top_m: Option<usize>,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            gen_gamma: 0.1,
            gen_top_m: None,
        }
    }
}

/// Per-row scores, higher is more in-distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn logsumexp(z: &[f64], t: f64) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| ((v - m) / t).exp()).sum();
    m + t * s.ln()
}

pub fn score(lm: &LogitMatrix, method: ScoreMethod, params: &ScoreParams) -> Result<ScoreVector> {
    let c = lm.n_cols();
    if method == ScoreMethod::Energy && !(params.temperature > 0.0 && params.temperature.is_finite()) {
        return arg_err(format!("energy temperature must be > 0, got {}", params.temperature));
    }
    let top_m = params.gen_top_m.unwrap_or(c.min(10));
    if method == ScoreMethod::Gen {
        if !(params.gen_gamma > 0.0 && params.gen_gamma < 1.0) {
            return arg_err(format!("GEN gamma must be in (0, 1), got {}", params.gen_gamma));
        }
        if top_m == 0 || top_m > c {
            return arg_err(format!("GEN top-M must be in 1..={c}, got {top_m}"));
        }
    }
    let mut p = vec![0.0; c];
    let out = lm
        .rows()
        .map(|z| match method {
            ScoreMethod::Maxlogit => z.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ScoreMethod::Energy => logsumexp(z, params.temperature),
            ScoreMethod::Msp => {
                softmax_row(z, &mut p);
                p.iter().copied().fold(0.0, f64::max)
            }
            ScoreMethod::Entropy => {
                softmax_row(z, &mut p);
                p.iter().map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 }).sum()
            }
            ScoreMethod::Gen => {
                softmax_row(z, &mut p);
                p.sort_by(|a, b| b.total_cmp(a));
                let g = params.gen_gamma;
                -p[..top_m].iter().map(|&q| q.powf(g) * (1.0 - q).max(0.0).powf(g)).sum::<f64>()
            }
        })
        .collect();
    Ok(ScoreVector(out))
}

/// `true` marks a row classified as ID (`score >= eta`).
pub fn threshold_decide(sv: &ScoreVector, eta: f64) -> Vec<bool> {
    sv.0.iter().map(|&s| s >= eta).collect()
}
