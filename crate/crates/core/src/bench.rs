//! Timing harness for the synthesis methods.
//!
//! Inputs are generated before timing starts; only the synthesis call is
//! timed. Each method gets discarded warmup runs, then `repeats` timed runs
//! summarized by median and interquartile range.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::features::{FeatureMatrix, LabeledFeatureSet, ModalitySet, RandomSource};
use crate::model::SynthMethod;
use crate::synth::{feature_mixing, mixup_synth, npmix_synth, vos_synth, MixingConfig, NpMixConfig};

/// Input shape of one benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchShape {
    pub n_samples: usize,
    pub widths: Vec<usize>,
    pub n_swap: usize,
    pub n_classes: usize,
}

impl BenchShape {
    /// 2048 samples of total width 4352, split evenly across two modalities.
    pub fn detection() -> Self {
        Self {
            n_samples: 2048,
            widths: vec![2176, 2176],
            n_swap: 512,
            n_classes: 4,
        }
    }

    /// 256 x 352 spatial positions of total width 48.
    pub fn segmentation() -> Self {
        Self {
            n_samples: 256 * 352,
            widths: vec![24, 24],
            n_swap: 10,
            n_classes: 10,
        }
    }

    pub fn total_width(&self) -> usize {
        self.widths.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub repeats: usize,
    pub warmups: usize,
    pub mixup_alpha: f64,
    pub npmix: NpMixConfig,
    /// Candidates per class for the VOS-style sampler.
    pub vos_candidates: usize,
    pub vos_keep_fraction: f64,
    /// The VOS-style sampler is timed on at most this many leading columns;
    /// the full-width cost is extrapolated cubically from it.
    pub vos_max_width: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repeats: 5,
            warmups: 2,
            mixup_alpha: 1.0,
            npmix: NpMixConfig::default(),
            vos_candidates: 1000,
            vos_keep_fraction: 0.01,
            vos_max_width: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub method: String,
    pub n_samples: usize,
    pub feature_dim: usize,
    pub median_seconds: f64,
    pub iqr_seconds: f64,
    pub n_repeats: usize,
    pub timings: Vec<f64>,
    /// Error message when the method failed.
    pub failure: Option<String>,
    pub note: Option<String>,
}

impl BenchResult {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn bench_inputs(shape: &BenchShape, seed: u64) -> Result<LabeledFeatureSet> {
    let mut rng = RandomSource::new(seed).child("bench-inputs");
    let n = shape.n_samples;
    let blocks = shape
        .widths
        .iter()
        .map(|&w| FeatureMatrix::new(n, w, (0..n * w).map(|_| rng.standard_normal()).collect()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = (0..n).map(|i| i % shape.n_classes).collect();
    LabeledFeatureSet::new(ModalitySet::from_blocks(blocks)?, labels, vec![false; n], shape.n_classes)
}

fn time_runs(cfg: &BenchConfig, mut run: impl FnMut(usize) -> Result<()>) -> Result<Vec<f64>> {
    for i in 0..cfg.warmups {
        run(i)?;
    }
    let mut out = Vec::with_capacity(cfg.repeats);
    for i in 0..cfg.repeats {
        let start = Instant::now();
        run(cfg.warmups + i)?;
        out.push(start.elapsed().as_secs_f64());
    }
    Ok(out)
}

fn leading_columns(lfs: &LabeledFeatureSet, total: usize) -> Result<LabeledFeatureSet> {
    let k = lfs.features().n_blocks();
    let per = (total / k).max(1);
    let blocks = lfs
        .features()
        .blocks()
        .iter()
        .map(|b| b.columns(0, per.min(b.n_cols())))
        .collect::<Result<Vec<_>>>()?;
    LabeledFeatureSet::new(
        ModalitySet::new(blocks, lfs.features().names().to_vec())?,
        lfs.labels().to_vec(),
        lfs.is_ood().to_vec(),
        lfs.n_classes(),
    )
}

/// Times each method on the same pre-generated inputs. A failing method is
/// reported with its error and does not stop the others.
pub fn run_bench(methods: &[SynthMethod], shape: &BenchShape, cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    if cfg.repeats == 0 {
        return arg_err("repeats must be >= 1");
    }
    if shape.n_samples == 0 || shape.widths.is_empty() || shape.n_classes == 0 {
        return arg_err("empty benchmark shape");
    }
    let data = bench_inputs(shape, cfg.seed)?;
    let root = RandomSource::new(cfg.seed).child("bench-runs");
    let mut results = Vec::new();
    for &method in methods {
        let mut note = None;
        let mut dim = shape.total_width();
        let outcome = match method {
            SynthMethod::None => Err(crate::Error::Argument("nothing to time for 'none'".into())),
            SynthMethod::FeatureMixing => {
                let mix = MixingConfig::new(shape.n_swap);
                time_runs(cfg, |i| {
                    feature_mixing(data.features(), &mix, &mut root.child_indexed("fm", i as u64)).map(drop)
                })
            }
            SynthMethod::Mixup => time_runs(cfg, |i| {
                mixup_synth(data.features(), cfg.mixup_alpha, &mut root.child_indexed("mixup", i as u64)).map(drop)
            }),
            SynthMethod::Npmix => time_runs(cfg, |i| {
                npmix_synth(&data, cfg.npmix.k_neighbors, cfg.npmix.beta_range, &mut root.child_indexed("npmix", i as u64))
                    .map(drop)
            }),
            SynthMethod::Vos => {
                let sub = if shape.total_width() > cfg.vos_max_width {
                    let sub = leading_columns(&data, cfg.vos_max_width)?;
                    dim = sub.features().total_width();
                    note = Some(format!(
                        "timed at width {dim}; cubic extrapolation to width {} gives x{:.0}",
                        shape.total_width(),
                        (shape.total_width() as f64 / dim as f64).powi(3)
                    ));
                    sub
                } else {
                    data.clone()
                };
                time_runs(cfg, |i| {
                    vos_synth(&sub, cfg.vos_candidates, cfg.vos_keep_fraction, &mut root.child_indexed("vos", i as u64))
                        .map(drop)
                })
            }
        };
        results.push(match outcome {
            Ok(timings) => {
                let mut sorted = timings.clone();
                sorted.sort_by(f64::total_cmp);
                BenchResult {
                    method: method.name().into(),
                    n_samples: shape.n_samples,
                    feature_dim: dim,
                    median_seconds: quantile(&sorted, 0.5),
                    iqr_seconds: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
                    n_repeats: timings.len(),
                    timings,
                    failure: None,
                    note,
                }
            }
            Err(e) => BenchResult {
                method: method.name().into(),
                n_samples: shape.n_samples,
                feature_dim: dim,
                median_seconds: f64::NAN,
                iqr_seconds: f64::NAN,
                n_repeats: 0,
                timings: Vec::new(),
                failure: Some(e.to_string()),
                note,
            },
        });
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub method: String,
    pub median_seconds: f64,
    /// Method median divided by the Feature Mixing median.
    pub ratio: f64,
}

/// Ratios against Feature Mixing, largest first. Failed methods are left out.
pub fn speedup_table(results: &[BenchResult]) -> Result<Vec<SpeedupRow>> {
    let base = match results.iter().find(|r| r.method == SynthMethod::FeatureMixing.name() && r.ok()) {
        Some(r) => r.median_seconds,
        None => return arg_err("speedup table needs a successful feature_mixing result"),
    };
    let mut rows: Vec<SpeedupRow> = results
        .iter()
        .filter(|r| r.ok())
        .map(|r| SpeedupRow {
            method: r.method.clone(),
            median_seconds: r.median_seconds,
            ratio: r.median_seconds / base,
        })
        .collect();
    rows.sort_by(|a, b| b.ratio.total_cmp(&a.ratio));
    Ok(rows)
}

pub const BENCH_CSV_HEADER: &str = "method,n_samples,feature_dim,median_seconds,iqr_seconds,n_repeats,ratio,status,note";

/// One CSV row per result; `ratio` is empty when no baseline is available.
pub fn bench_csv(results: &[BenchResult]) -> String {
    let table = speedup_table(results).ok();
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in results {
        let ratio = table
            .as_ref()
            .and_then(|t| t.iter().find(|s| s.method == r.method))
            .map(|s| s.ratio.to_string())
            .unwrap_or_default();
        let status = if r.ok() { "ok".to_string() } else { "failed".to_string() };
        let note = r.failure.as_deref().or(r.note.as_deref()).unwrap_or("").replace(',', ";");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.method, r.n_samples, r.feature_dim, r.median_seconds, r.iqr_seconds, r.n_repeats, ratio, status, note
        );
    }
    out
}

/// Fixed-width table of medians and ratios.
pub fn bench_table(results: &[BenchResult]) -> String {
    let mut out = format!("{:<16}{:>14}{:>14}{:>10}\n", "method", "median (s)", "iqr (s)", "ratio");
    let table = speedup_table(results).unwrap_or_default();
    for row in &table {
        let r = results.iter().find(|r| r.method == row.method).unwrap();
        let _ = writeln!(out, "{:<16}{:>14.6}{:>14.6}{:>10.2}", row.method, r.median_seconds, r.iqr_seconds, row.ratio);
    }
    for r in results.iter().filter(|r| !r.ok()) {
        let _ = writeln!(out, "{:<16}failed: {}", r.method, r.failure.as_deref().unwrap_or(""));
    }
    for r in results.iter().filter(|r| r.note.is_some()) {
        let _ = writeln!(out, "note ({}): {}", r.method, r.note.as_deref().unwrap());
    }
    out
}
