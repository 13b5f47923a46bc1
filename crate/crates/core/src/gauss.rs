//! Gaussian moments, Mahalanobis distance, and Monte-Carlo checks of the two
//! Feature Mixing properties: outliers land in low-likelihood regions, and
//! their deviation from the source sample is bounded by `sqrt(2N) * delta`.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::features::{FeatureMatrix, ModalitySet, RandomSource};
use crate::synth::{self, MixingConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean and covariance with a cached Cholesky factor and inverse.
///
/// `cov` is the matrix actually factorized, i.e. after any ridge added to
/// make it positive definite; `ridge` records how much was added.
#[derive(Debug, Clone)]
pub struct GaussianMoments {
    mean: Vec<f64>,
    cov: Vec<f64>,
    cov_inverse: Vec<f64>,
    chol_lower: Vec<f64>,
    log_det: f64,
    ridge: f64,
}

impl GaussianMoments {
    /// Factorizes `cov` (row-major `d x d`). A covariance that is not
    /// positive definite gets `eps * I` added, starting from
    /// `eps = 1e-6 * trace / d` and growing tenfold until the factorization
    /// succeeds.
    pub fn from_mean_cov(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return dim_err("zero-dimensional Gaussian");
        }
        if cov.len() != d * d {
            return dim_err(format!("covariance has {} entries, expected {}", cov.len(), d * d));
        }
        if mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return arg_err("non-finite moment");
        }
        let base = DMatrix::from_row_slice(d, d, &cov);
        let base = (&base + base.transpose()) * 0.5;

        let trace: f64 = base.diagonal().iter().sum();
        let mut ridge = 0.0;
        let mut step = 1e-6 * trace / d as f64;
        if !(step > 0.0 && step.is_finite()) {
            step = 1e-6;
        }
        for _ in 0..16 {
            let mut m = base.clone();
            for i in 0..d {
                m[(i, i)] += ridge;
            }
            if let Some(ch) = Cholesky::new(m.clone()) {
                let l = ch.l();
                let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let inv = ch.inverse();
                let to_rows = |x: &DMatrix<f64>| -> Vec<f64> {
                    let mut out = Vec::with_capacity(d * d);
                    for i in 0..d {
                        for j in 0..d {
                            out.push(x[(i, j)]);
                        }
                    }
                    out
                };
                return Ok(Self {
                    mean,
                    cov: to_rows(&m),
                    cov_inverse: to_rows(&inv),
                    chol_lower: to_rows(&l),
                    log_det,
                    ridge,
                });
            }
            ridge = if ridge == 0.0 { step } else { ridge * 10.0 };
        }
        arg_err("covariance could not be regularized to positive definite")
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Result<Self> {
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = 1.0;
        }
        Self::from_mean_cov(vec![0.0; d], cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn cov_inverse(&self) -> &[f64] {
        &self.cov_inverse
    }

    pub fn chol_lower(&self) -> &[f64] {
        &self.chol_lower
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// `L^-1 (x - mean)`, where `L L^T = cov`.
    pub fn whiten(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() != d {
            return dim_err(format!("vector of length {} for {d}-dim moments", x.len()));
        }
        let mut y = Vec::with_capacity(d);
        for i in 0..d {
            let row = &self.chol_lower[i * d..i * d + i];
            let s: f64 = row.iter().zip(&y).map(|(l, yj)| l * yj).sum();
            y.push((x[i] - self.mean[i] - s) / self.chol_lower[i * d + i]);
        }
        Ok(y)
    }

    /// `mean + L z` for standard-normal `z`.
    pub fn sample(&self, rng: &mut RandomSource) -> Vec<f64> {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        self.transform_standard(&z)
    }

    pub(crate) fn transform_standard(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| {
                let row = &self.chol_lower[i * d..i * d + i + 1];
                self.mean[i] + row.iter().zip(z).map(|(l, zj)| l * zj).sum::<f64>()
            })
            .collect()
    }
}

/// Sample mean and unbiased (`1/(n-1)`) covariance of the rows of `fm`.
///
/// Needs at least two rows. With fewer than `d + 2` rows the covariance is
/// rank deficient and comes back ridge-regularized.
pub fn estimate_moments(fm: &FeatureMatrix) -> Result<GaussianMoments> {
    let (n, d) = (fm.n_rows(), fm.n_cols());
    if n < 2 {
        return arg_err(format!("{n} rows are too few to estimate {d}-dim moments"));
    }
    let mut mean = vec![0.0; d];
    for row in fm.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in fm.rows() {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            let out = &mut cov[i * d..i * d + i + 1];
            for (o, cj) in out.iter_mut().zip(&centered) {
                *o += ci * cj;
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    GaussianMoments::from_mean_cov(mean, cov)
}

/// `(x - mean)^T cov^-1 (x - mean)`, evaluated through the Cholesky factor.
pub fn mahalanobis_sq(x: &[f64], gm: &GaussianMoments) -> Result<f64> {
    Ok(gm.whiten(x)?.iter().map(|v| v * v).sum())
}

/// Log density of `x` under `gm`.
pub fn gaussian_loglik(x: &[f64], gm: &GaussianMoments) -> Result<f64> {
    let d2 = mahalanobis_sq(x, gm)?;
    Ok(-0.5 * (gm.dim() as f64 * LN_2PI + gm.log_det() + d2))
}

/// Expected shift of the concatenated mean after swapping `n_swap` of `d`
/// dimensions between two modalities: `(N/d) [mu_l - mu_c; mu_c - mu_l]`.
pub fn predicted_mean_shift(mu_c: &[f64], mu_l: &[f64], n_swap: usize, d: usize) -> Result<Vec<f64>> {
    if mu_c.len() != d || mu_l.len() != d {
        return dim_err(format!(
            "mean lengths {} and {} do not match d = {d}",
            mu_c.len(),
            mu_l.len()
        ));
    }
    if n_swap > d {
        return arg_err(format!("n_swap {n_swap} exceeds d = {d}"));
    }
    let r = n_swap as f64 / d as f64;
    let upper = mu_c.iter().zip(mu_l).map(|(c, l)| r * (l - c));
    let lower = mu_c.iter().zip(mu_l).map(|(c, l)| r * (c - l));
    Ok(upper.chain(lower).collect())
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn merge(&mut self, other: &KahanSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Mean and standard error from a sum and a sum of squares.
fn mean_se(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

/// Where the reference (ID) moments come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MomentSource {
    /// The generator's exact mean and covariance.
    Exact,
    /// Estimated from a held-out ID sample of this many rows.
    Estimated { n_reference: usize },
}

impl Default for MomentSource {
    fn default() -> Self {
        MomentSource::Estimated { n_reference: 100_000 }
    }
}

/// Two-modality Gaussian used for the low-likelihood check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremSpec {
    pub mu_c: Vec<f64>,
    pub mu_l: Vec<f64>,
    /// Joint `2d x 2d` covariance, row-major; identity when absent.
    pub joint_cov: Option<Vec<f64>>,
    pub moments: MomentSource,
    /// Also estimate `Tr(Sigma^-1 Delta Sigma)` from the outliers.
    pub trace_diagnostic: bool,
}

impl TheoremSpec {
    /// Identity covariance, `mu_c = 0`, `mu_l = offset * 1`.
    pub fn isotropic(d: usize, offset: f64) -> Self {
        Self {
            mu_c: vec![0.0; d],
            mu_l: vec![offset; d],
            joint_cov: None,
            moments: MomentSource::default(),
            trace_diagnostic: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu_c.len()
    }
}

/// Outcome of the low-likelihood check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub n_trials: usize,
    pub dim_per_modality: usize,
    pub n_swap: usize,
    pub mean_d2_id: f64,
    pub se_d2_id: f64,
    pub mean_d2_outlier: f64,
    pub se_d2_outlier: f64,
    /// `Delta mu^T Sigma^-1 Delta mu` under the generator's covariance.
    pub mean_shift_d2: f64,
    pub mean_loglik_id: f64,
    pub mean_loglik_outlier: f64,
    pub predicted_mean_shift: Vec<f64>,
    pub empirical_mean_shift: Vec<f64>,
    pub se_mean_shift: Vec<f64>,
    pub trace_term_estimate: Option<f64>,
    pub reference_ridge: f64,
}

/// Pass/fail of each low-likelihood gate, all at three standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Theorem1Gates {
    pub id_matches_chi2_mean: bool,
    pub outlier_exceeds_id: bool,
    pub outlier_shift_lower_bound: bool,
    pub loglik_ordering: bool,
    pub mean_shift_matches: bool,
}

impl Theorem1Gates {
    pub fn all_pass(&self) -> bool {
        self.id_matches_chi2_mean
            && self.outlier_exceeds_id
            && self.outlier_shift_lower_bound
            && self.loglik_ordering
            && self.mean_shift_matches
    }
}

impl Theorem1Report {
    pub fn gates(&self) -> Theorem1Gates {
        let two_d = 2.0 * self.dim_per_modality as f64;
        Theorem1Gates {
            id_matches_chi2_mean: (self.mean_d2_id - two_d).abs() <= 3.0 * self.se_d2_id,
            outlier_exceeds_id: self.mean_d2_outlier > self.mean_d2_id,
            outlier_shift_lower_bound: self.mean_d2_outlier - two_d
                >= self.mean_shift_d2 - 3.0 * self.se_d2_outlier,
            loglik_ordering: self.mean_loglik_outlier < self.mean_loglik_id,
            mean_shift_matches: self.mean_shift_mismatches() == 0,
        }
    }

    /// Coordinates whose empirical shift is more than 3 SE from prediction.
    pub fn mean_shift_mismatches(&self) -> usize {
        self.empirical_mean_shift
            .iter()
            .zip(&self.predicted_mean_shift)
            .zip(&self.se_mean_shift)
            .filter(|((e, p), se)| (*e - *p).abs() > 3.0 * *se)
            .count()
    }
}

/// Outcome of the bounded-deviation check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub n_trials: usize,
    pub rows_checked: usize,
    pub n_swap: usize,
    pub bound_violations: usize,
    /// Largest `||F_o - F|| / (sqrt(2N) delta)` seen; 0 when nothing moved.
    pub max_bound_ratio: f64,
    pub mean_deviation: f64,
    pub max_deviation: f64,
}

impl Theorem2Report {
    pub fn passed(&self) -> bool {
        self.bound_violations == 0
    }
}

/// Flat `key=value` record, one metric per line; vectors are comma-joined.
pub trait KvRecord: Serialize {
    fn to_kv_text(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let mut out = String::new();
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                let rendered = match v {
                    serde_json::Value::Array(items) => items
                        .iter()
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join(","),
                    serde_json::Value::Null => "none".to_string(),
                    other => other.to_string(),
                };
                out.push_str(&format!("{k}={rendered}\n"));
            }
        }
        out
    }
}

impl KvRecord for Theorem1Report {}
impl KvRecord for Theorem2Report {}

const TRIAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Default)]
struct Theorem1Partial {
    d2_id: KahanSum,
    d2_id_sq: KahanSum,
    d2_out: KahanSum,
    d2_out_sq: KahanSum,
    ll_id: KahanSum,
    ll_out: KahanSum,
    shift: Vec<KahanSum>,
    shift_sq: Vec<KahanSum>,
    out_sum: Vec<KahanSum>,
    out_cross: Vec<f64>,
}

/// Draws `n_trials` ID samples from the spec's Gaussian, applies one
/// independent Feature Mixing invocation to each, and compares Mahalanobis
/// distance and likelihood of outliers against the ID samples.
///
/// Every trial draws its own swap mask, so `cfg.per_sample_masks` has no
/// effect here. Trials run in fixed-size chunks on child streams and are
/// reduced in chunk order, so the report does not depend on thread count.
pub fn verify_theorem1(
    spec: &TheoremSpec,
    cfg: &MixingConfig,
    n_trials: usize,
    rng: &RandomSource,
) -> Result<Theorem1Report> {
    let d = spec.dim();
    if d == 0 || spec.mu_l.len() != d {
        return dim_err("modality means must be non-empty and of equal length");
    }
    if spec.mu_c == spec.mu_l {
        return arg_err("the low-likelihood property requires mu_c != mu_l");
    }
    if cfg.n_swap > d {
        return arg_err(format!("n_swap {} exceeds modality width {d}", cfg.n_swap));
    }
    if n_trials < 2 {
        return arg_err("need at least 2 trials for standard errors");
    }
    let two_d = 2 * d;
    let mean: Vec<f64> = spec.mu_c.iter().chain(&spec.mu_l).copied().collect();
    let cov = match &spec.joint_cov {
        Some(c) => c.clone(),
        None => {
            let mut c = vec![0.0; two_d * two_d];
            for i in 0..two_d {
                c[i * two_d + i] = 1.0;
            }
            c
        }
    };
    let truth = GaussianMoments::from_mean_cov(mean, cov)?;
    let reference = match spec.moments {
        MomentSource::Exact => truth.clone(),
        MomentSource::Estimated { n_reference } => {
            let mut r = rng.child("reference");
            let mut data = Vec::with_capacity(n_reference * two_d);
            for _ in 0..n_reference {
                data.extend(truth.sample(&mut r));
            }
            estimate_moments(&FeatureMatrix::new(n_reference, two_d, data)?)?
        }
    };

    let predicted = predicted_mean_shift(&spec.mu_c, &spec.mu_l, cfg.n_swap, d)?;
    let shift_truth = GaussianMoments::from_mean_cov(
        predicted.clone(),
        truth.cov().to_vec(),
    )?;
    let mean_shift_d2 = mahalanobis_sq(&vec![0.0; two_d], &shift_truth)?;

    let n_chunks = n_trials.div_ceil(TRIAL_CHUNK);
    let partials: Vec<Result<Theorem1Partial>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let rows = TRIAL_CHUNK.min(n_trials - chunk * TRIAL_CHUNK);
            let mut r = rng.child_indexed("trial", chunk as u64);
            let mut p = Theorem1Partial {
                shift: vec![KahanSum::default(); two_d],
                shift_sq: vec![KahanSum::default(); two_d],
                out_sum: vec![KahanSum::default(); two_d],
                out_cross: if spec.trace_diagnostic {
                    vec![0.0; two_d * two_d]
                } else {
                    Vec::new()
                },
                ..Default::default()
            };
            let mut f_c = vec![0.0; d];
            let mut f_l = vec![0.0; d];
            for _ in 0..rows {
                let f = truth.sample(&mut r);
                f_c.copy_from_slice(&f[..d]);
                f_l.copy_from_slice(&f[d..]);
                let sel_c = crate::features::sample_index_subset(&mut r, d, cfg.n_swap)?;
                let sel_l = crate::features::sample_index_subset(&mut r, d, cfg.n_swap)?;
                synth::swap_pair_row(&mut f_c, &mut f_l, &sel_c, &sel_l);
                let fo: Vec<f64> = f_c.iter().chain(&f_l).copied().collect();

                let d2_id = mahalanobis_sq(&f, &reference)?;
                let d2_out = mahalanobis_sq(&fo, &reference)?;
                p.d2_id.add(d2_id);
                p.d2_id_sq.add(d2_id * d2_id);
                p.d2_out.add(d2_out);
                p.d2_out_sq.add(d2_out * d2_out);
                p.ll_id.add(gaussian_loglik(&f, &reference)?);
                p.ll_out.add(gaussian_loglik(&fo, &reference)?);
                for k in 0..two_d {
                    let delta = fo[k] - f[k];
                    p.shift[k].add(delta);
                    p.shift_sq[k].add(delta * delta);
                    p.out_sum[k].add(fo[k]);
                }
                if spec.trace_diagnostic {
                    for i in 0..two_d {
                        for j in 0..two_d {
                            p.out_cross[i * two_d + j] += fo[i] * fo[j];
                        }
                    }
                }
            }
            Ok(p)
        })
        .collect();

    let mut total = Theorem1Partial {
        shift: vec![KahanSum::default(); two_d],
        shift_sq: vec![KahanSum::default(); two_d],
        out_sum: vec![KahanSum::default(); two_d],
        out_cross: vec![0.0; if spec.trace_diagnostic { two_d * two_d } else { 0 }],
        ..Default::default()
    };
    for p in partials {
        let p = p?;
        total.d2_id.merge(&p.d2_id);
        total.d2_id_sq.merge(&p.d2_id_sq);
        total.d2_out.merge(&p.d2_out);
        total.d2_out_sq.merge(&p.d2_out_sq);
        total.ll_id.merge(&p.ll_id);
        total.ll_out.merge(&p.ll_out);
        for k in 0..two_d {
            total.shift[k].merge(&p.shift[k]);
            total.shift_sq[k].merge(&p.shift_sq[k]);
            total.out_sum[k].merge(&p.out_sum[k]);
        }
        for (a, b) in total.out_cross.iter_mut().zip(&p.out_cross) {
            *a += b;
        }
    }

    let (mean_d2_id, se_d2_id) = mean_se(total.d2_id.value(), total.d2_id_sq.value(), n_trials);
    let (mean_d2_outlier, se_d2_outlier) =
        mean_se(total.d2_out.value(), total.d2_out_sq.value(), n_trials);
    let (empirical_mean_shift, se_mean_shift): (Vec<f64>, Vec<f64>) = (0..two_d)
        .map(|k| mean_se(total.shift[k].value(), total.shift_sq[k].value(), n_trials))
        .unzip();

    let trace_term_estimate = if spec.trace_diagnostic {
        let nf = n_trials as f64;
        let mu_o: Vec<f64> = total.out_sum.iter().map(|s| s.value() / nf).collect();
        let inv = reference.cov_inverse();
        let mut trace = 0.0;
        for i in 0..two_d {
            for j in 0..two_d {
                let cov_o = (total.out_cross[j * two_d + i] - nf * mu_o[j] * mu_o[i]) / (nf - 1.0);
                trace += inv[i * two_d + j] * cov_o;
            }
        }
        Some(trace - two_d as f64)
    } else {
        None
    };

    Ok(Theorem1Report {
        n_trials,
        dim_per_modality: d,
        n_swap: cfg.n_swap,
        mean_d2_id,
        se_d2_id,
        mean_d2_outlier,
        se_d2_outlier,
        mean_shift_d2,
        mean_loglik_id: total.ll_id.value() / n_trials as f64,
        mean_loglik_outlier: total.ll_out.value() / n_trials as f64,
        predicted_mean_shift: predicted,
        empirical_mean_shift,
        se_mean_shift,
        trace_term_estimate,
        reference_ridge: reference.ridge(),
    })
}

/// `max_{i,j} |c_i - l_j|` for one sample.
pub fn cross_modal_delta(c: &[f64], l: &[f64]) -> f64 {
    let (c_min, c_max) = min_max(c);
    let (l_min, l_max) = min_max(l);
    (c_max - l_min).abs().max((l_max - c_min).abs())
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Relative slack for rounding in `||F_o - F||^2 <= 2N delta^2`; the
/// inequality is exact in real arithmetic, the slack covers the sum of
/// `2N` rounded squares.
fn bound_slack(n_swap: usize) -> f64 {
    1.0 + 8.0 * (2 * n_swap + 2) as f64 * f64::EPSILON
}

/// Checks one synthesized batch against its source; returns
/// `(violations, max ratio, sum of deviations, max deviation)`.
pub(crate) fn check_deviation_bound(
    source: &ModalitySet,
    outliers: &ModalitySet,
    n_swap: usize,
) -> (usize, f64, f64, f64) {
    let (c, l) = (source.block(0), source.block(1));
    let (oc, ol) = (outliers.block(0), outliers.block(1));
    let slack = bound_slack(n_swap);
    let mut violations = 0;
    let mut max_ratio = 0.0_f64;
    let mut dev_sum = 0.0;
    let mut dev_max = 0.0_f64;
    for i in 0..source.n_rows() {
        let dev_sq: f64 = c
            .row(i)
            .iter()
            .zip(oc.row(i))
            .chain(l.row(i).iter().zip(ol.row(i)))
            .map(|(a, b)| (b - a) * (b - a))
            .sum();
        let delta = cross_modal_delta(c.row(i), l.row(i));
        let bound_sq = 2.0 * n_swap as f64 * delta * delta;
        if dev_sq > bound_sq * slack {
            violations += 1;
        }
        let dev = dev_sq.sqrt();
        if bound_sq > 0.0 {
            max_ratio = max_ratio.max(dev / bound_sq.sqrt());
        }
        dev_sum += dev;
        dev_max = dev_max.max(dev);
    }
    (violations, max_ratio, dev_sum, dev_max)
}

/// Runs `n_trials` Feature Mixing invocations on `ms` and counts rows whose
/// deviation exceeds `sqrt(2N) * delta`, with `delta` computed per row.
pub fn verify_theorem2(
    ms: &ModalitySet,
    cfg: &MixingConfig,
    n_trials: usize,
    rng: &mut RandomSource,
) -> Result<Theorem2Report> {
    if ms.n_blocks() != 2 {
        return arg_err(format!("expected 2 modality blocks, got {}", ms.n_blocks()));
    }
    let mut report = Theorem2Report {
        n_trials,
        rows_checked: 0,
        n_swap: cfg.n_swap,
        bound_violations: 0,
        max_bound_ratio: 0.0,
        mean_deviation: 0.0,
        max_deviation: 0.0,
    };
    let mut dev_sum = 0.0;
    for _ in 0..n_trials {
        let out = synth::feature_mixing(ms, cfg, rng)?;
        let (v, ratio, sum, max) = check_deviation_bound(ms, &out.outliers, cfg.n_swap);
        report.bound_violations += v;
        report.max_bound_ratio = report.max_bound_ratio.max(ratio);
        report.max_deviation = report.max_deviation.max(max);
        report.rows_checked += ms.n_rows();
        dev_sum += sum;
    }
    if report.rows_checked > 0 {
        report.mean_deviation = dev_sum / report.rows_checked as f64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn diag(values: &[f64]) -> Vec<f64> {
        let d = values.len();
        let mut m = vec![0.0; d * d];
        for (i, v) in values.iter().enumerate() {
            m[i * d + i] = *v;
        }
        m
    }

    #[test]
    fn two_row_moments_by_hand() {
        let fm = FeatureMatrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let gm = estimate_moments(&fm).unwrap();
        assert_eq!(gm.mean(), &[1.0, 0.0]);
        // (1 + 1 + 0 + 0) / 3
        assert_abs_diff_eq!(gm.cov()[0], 2.0 / 3.0, epsilon = 1e-6);
    }

    #[test]
    fn two_point_moments() {
        // ((0-1)^2 + (2-1)^2) / (2-1) = 2; the zero second column forces a ridge.
        let fm = FeatureMatrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let gm = estimate_moments(&fm).unwrap();
        assert_eq!(gm.mean(), &[1.0, 0.0]);
        assert_abs_diff_eq!(gm.cov()[0], 2.0, epsilon = 1e-5);
        assert!(gm.ridge() > 0.0 && gm.ridge() < 1e-5);
        let one = FeatureMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(estimate_moments(&one).is_err());
    }

    #[test]
    fn constant_matrix_gets_ridge() {
        let fm = FeatureMatrix::new(10, 3, vec![4.0; 30]).unwrap();
        let gm = estimate_moments(&fm).unwrap();
        assert_eq!(gm.mean(), &[4.0, 4.0, 4.0]);
        assert!(gm.ridge() > 0.0);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { gm.ridge() } else { 0.0 };
                assert_eq!(gm.cov()[i * 3 + j], expect);
            }
        }
    }

    #[test]
    fn standard_normal_moments_converge() {
        let (n, d) = (100_000, 8);
        let mut rng = RandomSource::new(3);
        let data: Vec<f64> = (0..n * d).map(|_| rng.standard_normal()).collect();
        let gm = estimate_moments(&FeatureMatrix::new(n, d, data).unwrap()).unwrap();
        for i in 0..d {
            assert!(gm.mean()[i].abs() < 0.02);
            for j in 0..d {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((gm.cov()[i * d + j] - target).abs() < 0.05);
            }
        }
    }

    #[test]
    fn inverse_is_accurate() {
        let cov = vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let gm = GaussianMoments::from_mean_cov(vec![0.0; 3], cov.clone()).unwrap();
        let inv = gm.cov_inverse();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| cov[i * 3 + k] * inv[k * 3 + j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((v - target).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let id = GaussianMoments::from_mean_cov(vec![1.0, 1.0], diag(&[1.0, 1.0])).unwrap();
        assert_eq!(mahalanobis_sq(&[1.0, 1.0], &id).unwrap(), 0.0);
        assert_abs_diff_eq!(mahalanobis_sq(&[4.0, 5.0], &id).unwrap(), 25.0, epsilon = 1e-12);
        let d = GaussianMoments::from_mean_cov(vec![0.0, 0.0], diag(&[4.0, 1.0])).unwrap();
        assert_abs_diff_eq!(mahalanobis_sq(&[2.0, 1.0], &d).unwrap(), 2.0, epsilon = 1e-12);
        assert!(mahalanobis_sq(&[1.0], &d).is_err());
    }

    #[test]
    fn whitening_identity() {
        let cov = vec![2.0, 0.6, 0.1, 0.6, 1.5, -0.3, 0.1, -0.3, 0.8];
        let gm = GaussianMoments::from_mean_cov(vec![0.5, -1.0, 2.0], cov).unwrap();
        let mut rng = RandomSource::new(11);
        for _ in 0..100 {
            let z: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
            let x = gm.transform_standard(&z);
            let zz: f64 = z.iter().map(|v| v * v).sum();
            assert!((mahalanobis_sq(&x, &gm).unwrap() - zz).abs() < 1e-8);
        }
    }

    #[test]
    fn loglik_examples() {
        let gm = GaussianMoments::standard(1).unwrap();
        assert_abs_diff_eq!(gaussian_loglik(&[0.0], &gm).unwrap(), -0.918_938_533_204_672_7, epsilon = 1e-12);
        let a = gaussian_loglik(&[1.0], &gm).unwrap();
        let b = gaussian_loglik(&[2.0], &gm).unwrap();
        assert_abs_diff_eq!(b - a, -1.5, epsilon = 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        let gm = GaussianMoments::from_mean_cov(vec![0.3], vec![2.0]).unwrap();
        let step = 1e-3;
        let total: f64 = (-20_000..=20_000)
            .map(|k| gaussian_loglik(&[0.3 + k as f64 * step], &gm).unwrap().exp() * step)
            .sum();
        assert!((total - 1.0).abs() < 1e-3);
    }

    #[test]
    fn predicted_shift_examples() {
        assert_eq!(predicted_mean_shift(&[1.0, 2.0], &[1.0, 2.0], 1, 2).unwrap(), vec![0.0; 4]);
        assert_eq!(
            predicted_mean_shift(&[0.0, 1.0], &[3.0, 5.0], 2, 2).unwrap(),
            vec![3.0, 4.0, -3.0, -4.0]
        );
        assert_eq!(predicted_mean_shift(&[0.0], &[10.0], 1, 1).unwrap(), vec![10.0, -10.0]);
        assert_eq!(
            predicted_mean_shift(&[0.0, 0.0], &[10.0, 10.0], 1, 2).unwrap(),
            vec![5.0, 5.0, -5.0, -5.0]
        );
        assert!(predicted_mean_shift(&[0.0], &[1.0, 2.0], 1, 1).is_err());
    }

    #[test]
    fn theorem1_requires_distinct_means() {
        let spec = TheoremSpec::isotropic(4, 0.0);
        let cfg = MixingConfig::new(1);
        assert!(verify_theorem1(&spec, &cfg, 100, &RandomSource::new(1)).is_err());
    }

    #[test]
    fn theorem1_chi2_mean_exact_moments() {
        let mut spec = TheoremSpec::isotropic(4, 1.0);
        spec.moments = MomentSource::Exact;
        let rep = verify_theorem1(&spec, &MixingConfig::new(2), 100_000, &RandomSource::new(8)).unwrap();
        assert!((rep.mean_d2_id - 8.0).abs() <= 3.0 * rep.se_d2_id, "{}", rep.mean_d2_id);
        assert!(rep.gates().all_pass(), "{:?}", rep.gates());
    }

    #[test]
    fn theorem1_zero_swap_is_identity() {
        let mut spec = TheoremSpec::isotropic(3, 1.0);
        spec.moments = MomentSource::Exact;
        let rep = verify_theorem1(&spec, &MixingConfig::new(0), 5_000, &RandomSource::new(2)).unwrap();
        assert_eq!(rep.mean_d2_outlier, rep.mean_d2_id);
        assert_eq!(rep.mean_loglik_outlier, rep.mean_loglik_id);
    }

    #[test]
    fn theorem1_is_thread_count_independent() {
        let spec = TheoremSpec {
            moments: MomentSource::Estimated { n_reference: 2_000 },
            ..TheoremSpec::isotropic(3, 2.0)
        };
        let cfg = MixingConfig::new(1);
        let a = verify_theorem1(&spec, &cfg, 10_000, &RandomSource::new(4)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| verify_theorem1(&spec, &cfg, 10_000, &RandomSource::new(4)).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn theorem2_tight_case() {
        let c = FeatureMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let l = FeatureMatrix::from_rows(&[vec![10.0, 10.0]]).unwrap();
        let ms = ModalitySet::from_blocks(vec![c, l]).unwrap();
        let rep = verify_theorem2(&ms, &MixingConfig::new(1), 50, &mut RandomSource::new(1)).unwrap();
        assert!(rep.passed());
        assert_abs_diff_eq!(rep.max_deviation, 2f64.sqrt() * 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.max_bound_ratio, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn theorem2_zero_swap() {
        let mut rng = RandomSource::new(9);
        let mk = |rng: &mut RandomSource| {
            FeatureMatrix::new(16, 8, (0..128).map(|_| rng.standard_normal()).collect()).unwrap()
        };
        let ms = ModalitySet::from_blocks(vec![mk(&mut rng), mk(&mut rng)]).unwrap();
        let rep = verify_theorem2(&ms, &MixingConfig::new(0), 20, &mut rng).unwrap();
        assert!(rep.passed());
        assert_eq!(rep.max_deviation, 0.0);
    }

    #[test]
    fn kv_text_is_one_metric_per_line() {
        let rep = Theorem2Report {
            n_trials: 3,
            rows_checked: 6,
            n_swap: 1,
            bound_violations: 0,
            max_bound_ratio: 0.5,
            mean_deviation: 1.0,
            max_deviation: 2.0,
        };
        let text = rep.to_kv_text();
        assert!(text.lines().any(|l| l == "bound_violations=0"));
        assert_eq!(text.lines().count(), 7);
    }
}
