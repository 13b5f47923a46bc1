//! Subcommand bodies and the train/evaluate helpers they share.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use featmix_core::bench::{bench_csv, bench_table, run_bench};
use featmix_core::datagen::{generate, read_dataset, write_dataset, write_dataset_csv, GeneratorSpec};
use featmix_core::features::{FeatureMatrix, LabeledFeatureSet, ModalitySet, RandomSource};
use featmix_core::gauss::{verify_theorem1, verify_theorem2, KvRecord, TheoremSpec};
use featmix_core::metrics::{compute_ood_metrics, id_accuracy, MetricsReport, METRICS_CSV_HEADER};
use featmix_core::model::{train, SynthMethod, TrainConfig, TwoStreamNet};
use featmix_core::scores::{score, ScoreMethod, ScoreParams, ScoreVector};
use featmix_core::synth::MixingConfig;

use crate::config::{sub_seed, RunConfig, TheoremChoice};
use crate::CliError;

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_file(path, |w| w.write_all(text.as_bytes()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    write_text(path, &text)
}

fn core_io(path: &Path, e: featmix_core::Error) -> CliError {
    match e {
        featmix_core::Error::Io(_) | featmix_core::Error::Format { .. } => CliError::io(path, e),
        other => other.into(),
    }
}

fn train_set(cfg: &RunConfig) -> Result<LabeledFeatureSet, CliError> {
    match &cfg.inputs.train_data {
        Some(p) => read_dataset(p).map_err(|e| core_io(p, e)),
        None => Ok(generate(&cfg.data)?.train),
    }
}

fn test_set(cfg: &RunConfig) -> Result<LabeledFeatureSet, CliError> {
    match &cfg.inputs.test_data {
        Some(p) => read_dataset(p).map_err(|e| core_io(p, e)),
        None => Ok(generate(&cfg.data)?.test),
    }
}

/// Scores, metrics and ID accuracy of one network on one test set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub scores: ScoreVector,
    pub is_ood: Vec<bool>,
}

pub fn evaluate(
    net: &TwoStreamNet,
    test: &LabeledFeatureSet,
    method: ScoreMethod,
    params: &ScoreParams,
) -> Result<Evaluation, CliError> {
    if test.n_rows() == 0 {
        return Err(CliError::Usage("test set is empty".into()));
    }
    let expected = &net.shape().input_widths;
    let found = test.features().widths();
    if *expected != found {
        return Err(CliError::Usage(format!(
            "model expects modality widths {expected:?}, dataset has {found:?}"
        )));
    }
    if net.n_classes() != test.n_classes() {
        return Err(CliError::Usage(format!(
            "model has {} classes, dataset has {}",
            net.n_classes(),
            test.n_classes()
        )));
    }
    let logits = net.predict(test.features())?;
    let scores = score(&logits, method, params)?;
    let is_ood = test.is_ood().to_vec();
    let mut report = compute_ood_metrics(scores.values(), &is_ood)?;
    let id_rows: Vec<usize> = (0..test.n_rows()).filter(|&i| !is_ood[i]).collect();
    let id_labels: Vec<usize> = id_rows.iter().map(|&i| test.labels()[i]).collect();
    report.id_accuracy = Some(id_accuracy(&logits.select_rows(&id_rows)?, &id_labels)?);
    Ok(Evaluation { report, scores, is_ood })
}

/// Data spec of replicate `r`; replicate 0 is the spec itself.
pub fn replicate_data(spec: &GeneratorSpec, r: usize) -> GeneratorSpec {
    let mut s = spec.clone();
    if r > 0 {
        s.seed = sub_seed(spec.seed, &format!("replicate-{r}"));
    }
    s
}

pub fn replicate_train(cfg: &TrainConfig, r: usize) -> TrainConfig {
    let mut c = cfg.clone();
    if r > 0 {
        c.seed = sub_seed(cfg.seed, &format!("replicate-{r}"));
    }
    c
}

/// Generates data, trains, and evaluates on the generated test split.
pub fn train_and_eval(
    spec: &GeneratorSpec,
    train_cfg: &TrainConfig,
    method: ScoreMethod,
    params: &ScoreParams,
) -> Result<MetricsReport, CliError> {
    Ok(train_and_eval_scores(spec, train_cfg, &[(method, *params)])?.remove(0))
}

/// One training run scored several ways, one report per score.
pub fn train_and_eval_scores(
    spec: &GeneratorSpec,
    train_cfg: &TrainConfig,
    scores: &[(ScoreMethod, ScoreParams)],
) -> Result<Vec<MetricsReport>, CliError> {
    let data = generate(spec)?;
    let (net, _) = train(&data.train, train_cfg)?;
    scores
        .iter()
        .map(|(m, p)| Ok(evaluate(&net, &data.test, *m, p)?.report))
        .collect()
}

/// Train config for one synthesis method; `none` is the plain classifier.
pub fn method_config(base: &TrainConfig, method: SynthMethod) -> TrainConfig {
    if method == SynthMethod::None {
        return base.baseline();
    }
    let mut c = base.clone();
    c.synth_method = method;
    c
}

/// Train config for one swap count; 0 is the plain classifier.
pub fn sweep_config(base: &TrainConfig, n_swap: usize) -> TrainConfig {
    if n_swap == 0 {
        return base.baseline();
    }
    let mut c = base.clone();
    c.synth_method = SynthMethod::FeatureMixing;
    c.mixing.n_swap = n_swap;
    c
}

/// Runs independent jobs on `parallel` threads; results keep job order.
fn run_jobs<J: Sync, T: Send>(
    parallel: usize,
    jobs: &[J],
    f: impl Fn(&J) -> Result<T, CliError> + Sync + Send,
) -> Result<Vec<Result<T, CliError>>, CliError> {
    if parallel <= 1 {
        return Ok(jobs.iter().map(f).collect());
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    Ok(pool.install(|| jobs.par_iter().map(f).collect()))
}

/// Means of the metric fields over replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanMetrics {
    pub fpr_at_95: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub id_accuracy: f64,
    pub replicates: usize,
}

impl MeanMetrics {
    pub fn of(reports: &[MetricsReport]) -> Self {
        let n = reports.len() as f64;
        let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            fpr_at_95: mean(&|r| r.fpr_at_95),
            auroc: mean(&|r| r.auroc),
            aupr: mean(&|r| r.aupr),
            id_accuracy: mean(&|r| r.id_accuracy.unwrap_or(f64::NAN)),
            replicates: reports.len(),
        }
    }
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<(), CliError> {
    let data = generate(&cfg.data)?;
    let out = &cfg.run.out_dir;
    for (name, set) in [("train", &data.train), ("test", &data.test)] {
        let path = out.join(format!("{name}.bin"));
        write_dataset(&path, set).map_err(|e| core_io(&path, e))?;
        if cfg.run.write_csv {
            let path = out.join(format!("{name}.csv"));
            let mut w = BufWriter::new(File::create(&path).map_err(|e| CliError::io(&path, e))?);
            write_dataset_csv(&mut w, set).map_err(|e| core_io(&path, e))?;
            w.flush().map_err(|e| CliError::io(&path, e))?;
        }
    }
    println!(
        "wrote {} train rows and {} test rows to {}",
        data.train.n_rows(),
        data.test.n_rows(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = train_set(cfg)?;
    let (net, log) = train(&data, &cfg.train)?;
    let out = &cfg.run.out_dir;
    let model = out.join("model.bin");
    net.save(&model).map_err(|e| core_io(&model, e))?;
    let log_path = out.join("train_log.csv");
    let mut w = BufWriter::new(File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    log.write_csv(&mut w).map_err(|e| core_io(&log_path, e))?;
    w.flush().map_err(|e| CliError::io(&log_path, e))?;
    if let Some(last) = log.rows.last() {
        println!("trained {} steps, final loss {:.4}; model at {}", log.rows.len(), last.loss_total, model.display());
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let model_path = cfg
        .inputs
        .model
        .as_ref()
        .ok_or_else(|| CliError::Usage("--model is required".into()))?;
    let net = TwoStreamNet::load(model_path).map_err(|e| core_io(model_path, e))?;
    let test = test_set(cfg)?;
    let ev = evaluate(&net, &test, cfg.score.method, &cfg.score.params())?;
    let out = &cfg.run.out_dir;
    write_json(&out.join("metrics.json"), &ev.report)?;
    write_text(
        &out.join("metrics.csv"),
        &format!("{METRICS_CSV_HEADER}\n{}\n", ev.report.csv_row()),
    )?;
    write_file(&out.join("scores.csv"), |w| {
        writeln!(w, "score,is_ood")?;
        for (s, &o) in ev.scores.values().iter().zip(&ev.is_ood) {
            writeln!(w, "{s},{}", u8::from(o))?;
        }
        Ok(())
    })?;
    let r = &ev.report;
    println!(
        "{}: auroc {:.4} aupr {:.4} fpr@95 {:.4} id_acc {:.4}",
        cfg.score.method,
        r.auroc,
        r.aupr,
        r.fpr_at_95,
        r.id_accuracy.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn gaussian_block(rng: &mut RandomSource, n: usize, d: usize, mean: f64) -> Result<FeatureMatrix, CliError> {
    Ok(FeatureMatrix::new(n, d, (0..n * d).map(|_| mean + rng.standard_normal()).collect())?)
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<(), CliError> {
    let v = &cfg.verify;
    if v.mu_offset == 0.0 {
        return Err(CliError::Usage(
            "--mu-offset must be non-zero: the low-likelihood property requires mu_c != mu_l".into(),
        ));
    }
    let out = &cfg.run.out_dir;
    let root = RandomSource::new(cfg.run.seed);
    let mixing = MixingConfig::new(v.n_swap);
    let mut failures = Vec::new();
    if v.theorem != TheoremChoice::Two {
        let spec = TheoremSpec::isotropic(v.dim, v.mu_offset);
        let report = verify_theorem1(&spec, &mixing, v.trials, &root.child("theorem1"))?;
        let gates = report.gates();
        #[derive(Serialize)]
        struct Record<'a, R, G> {
            report: &'a R,
            gates: &'a G,
        }
        write_json(&out.join("theorem1.json"), &Record { report: &report, gates: &gates })?;
        let gate_text = serde_json::to_value(gates)
            .expect("serializable")
            .as_object()
            .expect("struct")
            .iter()
            .map(|(k, v)| format!("gate_{k}={v}\n"))
            .collect::<String>();
        write_text(&out.join("theorem1.txt"), &(report.to_kv_text() + &gate_text))?;
        println!(
            "low-likelihood: mean D2 id {:.3} (2d = {}), outlier {:.3}, shift term {:.3}; {}",
            report.mean_d2_id,
            2 * v.dim,
            report.mean_d2_outlier,
            report.mean_shift_d2,
            if gates.all_pass() { "PASS" } else { "FAIL" }
        );
        if !gates.all_pass() {
            failures.push(format!("low-likelihood gates {gates:?}"));
        }
    }
    if v.theorem != TheoremChoice::One {
        let mut rng = root.child("theorem2");
        let ms = ModalitySet::from_blocks(vec![
            gaussian_block(&mut rng, v.bound_rows, v.dim, 0.0)?,
            gaussian_block(&mut rng, v.bound_rows, v.dim, v.mu_offset)?,
        ])?;
        let report = verify_theorem2(&ms, &mixing, v.bound_trials, &mut rng)?;
        write_json(&out.join("theorem2.json"), &report)?;
        write_text(&out.join("theorem2.txt"), &report.to_kv_text())?;
        println!(
            "bounded deviation: {} rows, {} violations, max ratio {:.4}; {}",
            report.rows_checked,
            report.bound_violations,
            report.max_bound_ratio,
            if report.passed() { "PASS" } else { "FAIL" }
        );
        if !report.passed() {
            failures.push(format!("{} bound violations", report.bound_violations));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gate(failures.join("; ")))
    }
}

/// Default swap counts for a modality width.
pub fn default_n_values(d: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [16, 8, 4, 2].iter().map(|k| d / k).filter(|&n| n > 0).collect();
    v.dedup();
    v
}

pub fn cmd_sweep_n(cfg: &RunConfig) -> Result<(), CliError> {
    let s = &cfg.sweep;
    let min_width = cfg.data.dim_per_modality.iter().copied().min().unwrap_or(0);
    let n_values = if s.n_values.is_empty() {
        default_n_values(min_width)
    } else {
        s.n_values.clone()
    };
    if let Some(&n) = n_values.iter().find(|&&n| n > min_width) {
        return Err(CliError::Usage(format!("n_swap {n} exceeds modality width {min_width}")));
    }
    if s.replicates == 0 {
        return Err(CliError::Usage("replicates must be >= 1".into()));
    }
    let jobs: Vec<(usize, usize)> = n_values
        .iter()
        .flat_map(|&n| (0..s.replicates).map(move |r| (n, r)))
        .collect();
    let results = run_jobs(s.parallel, &jobs, |&(n, r)| {
        train_and_eval(
            &replicate_data(&cfg.data, r),
            &replicate_train(&sweep_config(&cfg.train, n), r),
            cfg.score.method,
            &cfg.score.params(),
        )
    })?;
    let out = &cfg.run.out_dir;
    let header = "n_swap,fpr_at_95,auroc,id_accuracy";
    let mut csv = format!("{header}\n");
    let mut failed = Vec::new();
    for (i, &n) in n_values.iter().enumerate() {
        let chunk = &results[i * s.replicates..(i + 1) * s.replicates];
        let ok: Vec<MetricsReport> = chunk.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
        if ok.len() < chunk.len() {
            for e in chunk.iter().filter_map(|r| r.as_ref().err()) {
                failed.push(format!("n_swap {n}: {e}"));
            }
            continue;
        }
        let m = MeanMetrics::of(&ok);
        csv.push_str(&format!("{n},{},{},{}\n", m.fpr_at_95, m.auroc, m.id_accuracy));
    }
    if !failed.is_empty() {
        write_text(&out.join("sweep_n.partial.csv"), &csv)?;
        return Err(CliError::Usage(format!(
            "sweep aborted, partial results in sweep_n.partial.csv: {}",
            failed.join("; ")
        )));
    }
    write_text(&out.join("sweep_n.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub const COMPARE_CSV_HEADER: &str = "method,fpr_at_95,auroc,aupr,id_accuracy,replicates";

pub fn cmd_compare(cfg: &RunConfig) -> Result<(), CliError> {
    let c = &cfg.compare;
    if c.replicates == 0 || c.methods.is_empty() {
        return Err(CliError::Usage("need at least one method and one replicate".into()));
    }
    let jobs: Vec<(SynthMethod, usize)> = c
        .methods
        .iter()
        .flat_map(|&m| (0..c.replicates).map(move |r| (m, r)))
        .collect();
    let results = run_jobs(c.parallel, &jobs, |&(m, r)| {
        train_and_eval(
            &replicate_data(&cfg.data, r),
            &replicate_train(&method_config(&cfg.train, m), r),
            cfg.score.method,
            &cfg.score.params(),
        )
    })?;
    let mut rows = Vec::new();
    for (i, &m) in c.methods.iter().enumerate() {
        let mut ok = Vec::new();
        for r in &results[i * c.replicates..(i + 1) * c.replicates] {
            match r {
                Ok(rep) => ok.push(rep.clone()),
                Err(e) => return Err(CliError::Usage(format!("{}: {e}", m.name()))),
            }
        }
        rows.push((m.name(), MeanMetrics::of(&ok)));
    }
    let mut csv = format!("{COMPARE_CSV_HEADER}\n");
    let mut table = format!("{:<16}{:>10}{:>10}{:>10}{:>10}\n", "method", "fpr@95", "auroc", "aupr", "id_acc");
    for (name, m) in &rows {
        csv.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            m.fpr_at_95, m.auroc, m.aupr, m.id_accuracy, m.replicates
        ));
        table.push_str(&format!(
            "{name:<16}{:>10.2}{:>10.2}{:>10.2}{:>10.2}\n",
            100.0 * m.fpr_at_95,
            100.0 * m.auroc,
            100.0 * m.aupr,
            100.0 * m.id_accuracy
        ));
    }
    let out = &cfg.run.out_dir;
    write_text(&out.join("compare.csv"), &csv)?;
    let json: Vec<_> = rows
        .iter()
        .map(|(name, m)| serde_json::json!({ "method": name, "metrics": m }))
        .collect();
    write_json(&out.join("compare.json"), &json)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<(), CliError> {
    let b = &cfg.bench;
    let results = run_bench(&b.methods, &b.shape, &b.timing)?;
    let out = &cfg.run.out_dir;
    write_text(&out.join("bench.csv"), &bench_csv(&results))?;
    let table = bench_table(&results);
    write_text(&out.join("bench.txt"), &table)?;
    print!("{table}");
    Ok(())
}
