//! Subcommand bodies. Each one creates its output directory and manifest
//! before loading data or doing any numerical work.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use optshift_core::data::{generate_blobs, load_cifar10, load_mnist, Dataset};
use optshift_core::hessian::{hessian_report, HessianReport};
use optshift_core::linalg::format_real;
use optshift_core::net::{accuracy, loss_from_logits, Checkpoint, LossKind, MlpModel, Targets};
use optshift_core::shift::{apply_os, sample_os_batch, OsReport};
use optshift_core::train::{train, MetricsRow, NoHooks, TrainHooks, TrainOutcome};

use crate::config::{DataSource, OsBatch, RunConfig};
use crate::manifest::OutputDir;
use crate::scaling::{self, ScalingReport};
use crate::CliError;

pub fn load_data(source: &DataSource) -> Result<(Dataset, Dataset), CliError> {
    Ok(match source {
        DataSource::Blobs(spec) => generate_blobs(spec)?,
        DataSource::Mnist(dir) => load_mnist(dir)?,
        DataSource::Cifar10(dir) => load_cifar10(dir)?,
    })
}

pub fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<MlpModel, CliError> {
    let mut dims = vec![data.features()];
    dims.extend(&cfg.hidden);
    dims.push(data.class_count);
    Ok(MlpModel::new(&dims, cfg.seed)?)
}

fn targets_for(data: &Dataset, kind: LossKind) -> Result<Targets, CliError> {
    Ok(match kind {
        LossKind::CrossEntropy => data.targets(),
        LossKind::MeanSquaredError => Targets::Dense(data.targets().to_dense(data.class_count)?),
    })
}

/// `(loss, accuracy)` over a whole split.
pub fn evaluate(model: &MlpModel, data: &Dataset, kind: LossKind) -> Result<(f64, f64), CliError> {
    let logits = model.logits(&data.inputs)?;
    Ok((
        loss_from_logits(&logits, &targets_for(data, kind)?, kind)?,
        accuracy(&logits, &data.labels),
    ))
}

/// Runs `body` against a fresh output directory and records the final
/// status in the manifest either way.
fn with_output<T>(
    root: &Path,
    command: &str,
    cfg: &RunConfig,
    body: impl FnOnce(&mut OutputDir) -> Result<T, CliError>,
) -> Result<T, CliError> {
    let mut out = OutputDir::create(root, command, cfg.resolved.clone(), cfg.seed)?;
    out.write("config.txt", cfg.to_text().as_bytes())?;
    match body(&mut out) {
        Ok(v) => {
            out.finish("complete")?;
            Ok(v)
        }
        Err(e) => {
            let _ = out.finish(&format!("failed: {e}"));
            Err(e)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: MlpModel,
    pub outcome: TrainOutcome,
}

impl TrainRun {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.outcome.rows.last().and_then(|r| r.test_acc)
    }

    pub fn os_reports_jsonl(&self) -> String {
        self.outcome
            .os_events
            .iter()
            .map(|e| e.report.to_json_line() + "\n")
            .collect()
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("epoch,trace_estimate,stderr,exact_last_layer_trace\n");
        for p in &self.outcome.trace_points {
            s.push_str(&format!(
                "{},{},{},{}\n",
                p.epoch,
                format_real(p.trace_estimate),
                format_real(p.stderr),
                format_real(p.exact_last_layer_trace)
            ));
        }
        s
    }
}

struct CheckpointHook {
    every: usize,
    seed: u64,
    saved: Vec<(String, String)>,
}

impl TrainHooks for CheckpointHook {
    fn on_epoch_end(&mut self, row: &MetricsRow, model: &MlpModel) {
        let done = row.epoch + 1;
        if self.every > 0 && done % self.every == 0 {
            let ckpt = Checkpoint {
                model: model.clone(),
                seed: self.seed,
                epoch: done,
            };
            self.saved.push((format!("checkpoints/epoch_{done}.ckpt"), ckpt.to_text()));
        }
    }
}

/// Trains on already-loaded data without touching the filesystem.
pub fn run_training(
    cfg: &RunConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainRun, CliError> {
    let mut model = build_model(cfg, train_set)?;
    let outcome = train(&mut model, train_set, Some(test_set), &cfg.train, hooks)?;
    Ok(TrainRun { model, outcome })
}

fn write_run(out: &mut OutputDir, prefix: &str, run: &TrainRun) -> Result<(), CliError> {
    out.write(&format!("{prefix}metrics.csv"), run.outcome.metrics_csv().as_bytes())?;
    if !run.outcome.os_events.is_empty() {
        out.write(&format!("{prefix}os_reports.jsonl"), run.os_reports_jsonl().as_bytes())?;
    }
    if !run.outcome.trace_points.is_empty() {
        out.write(&format!("{prefix}hessian_trace.csv"), run.trace_csv().as_bytes())?;
    }
    Ok(())
}

/// Writes `metrics.csv`, `os_reports.jsonl`, `hessian_trace.csv` (when
/// tracked), periodic checkpoints and `checkpoints/epoch_<epochs>.ckpt`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainRun, CliError> {
    with_output(out_dir, "train", cfg, |out| {
        let (train_set, test_set) = load_data(&cfg.data)?;
        let mut hook = CheckpointHook {
            every: cfg.checkpoint_every,
            seed: cfg.seed,
            saved: Vec::new(),
        };
        let result = run_training(cfg, &train_set, &test_set, &mut hook);
        for (name, text) in &hook.saved {
            out.write(name, text.as_bytes())?;
        }
        let run = result?;
        write_run(out, "", &run)?;
        let last = format!("checkpoints/epoch_{}.ckpt", cfg.train.epochs);
        if !hook.saved.iter().any(|(n, _)| *n == last) {
            let ckpt = Checkpoint {
                model: run.model.clone(),
                seed: cfg.seed,
                epoch: cfg.train.epochs,
            };
            out.write(&last, ckpt.to_text().as_bytes())?;
        }
        Ok(run)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OsApplySummary {
    #[serde(skip)]
    pub report: OsReport,
    pub rank: usize,
    pub batch_rows: usize,
    pub norm_before: f64,
    pub norm_after: f64,
    pub logit_drift: f64,
    pub train_loss_before: f64,
    pub train_loss_after: f64,
    pub train_acc_before: f64,
    pub train_acc_after: f64,
    pub test_loss_before: f64,
    pub test_loss_after: f64,
    pub test_acc_before: f64,
    pub test_acc_after: f64,
    /// Largest entry-wise change of `V`.
    pub max_v_change: f64,
}

fn load_checkpoint(path: &Path, data: &Dataset) -> Result<Checkpoint, CliError> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.model.input_dim() != data.features() || ckpt.model.output_dim() != data.class_count {
        return Err(CliError::Config(format!(
            "checkpoint model {:?} does not match data with {} features and {} classes",
            ckpt.model.dims(),
            data.features(),
            data.class_count
        )));
    }
    Ok(ckpt)
}

/// Applies OS once to a checkpoint on a batch drawn from the training set.
pub fn cmd_os_apply(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<OsApplySummary, CliError> {
    with_output(out_dir, "os-apply", cfg, |out| {
        let (train_set, test_set) = load_data(&cfg.data)?;
        let mut ckpt = load_checkpoint(checkpoint, &train_set)?;
        let kind = cfg.train.loss;
        let (indices, os_cfg) = match cfg.os_batch {
            OsBatch::All => {
                let mut c = cfg.os.clone();
                c.batch_size = train_set.len();
                ((0..train_set.len()).collect(), c)
            }
            OsBatch::Rows(_) => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let idx = sample_os_batch(&train_set.labels, train_set.class_count, &cfg.os, &mut rng)?;
                (idx, cfg.os.clone())
            }
        };
        let batch = train_set.inputs.select_rows(&indices);
        let v_before = ckpt.model.final_weight().clone();
        let (train_loss_before, train_acc_before) = evaluate(&ckpt.model, &train_set, kind)?;
        let (test_loss_before, test_acc_before) = evaluate(&ckpt.model, &test_set, kind)?;
        let mut report = apply_os(&mut ckpt.model, &batch, &os_cfg)?;
        let (train_loss_after, train_acc_after) = evaluate(&ckpt.model, &train_set, kind)?;
        let (test_loss_after, test_acc_after) = evaluate(&ckpt.model, &test_set, kind)?;
        report.loss_before = Some(train_loss_before);
        report.loss_after = Some(train_loss_after);
        let summary = OsApplySummary {
            rank: report.rank,
            batch_rows: report.batch_rows,
            norm_before: report.norm_before,
            norm_after: report.norm_after,
            logit_drift: report.logit_drift,
            train_loss_before,
            train_loss_after,
            train_acc_before,
            train_acc_after,
            test_loss_before,
            test_loss_after,
            test_acc_before,
            test_acc_after,
            max_v_change: ckpt.model.final_weight().max_abs_diff(&v_before)?,
            report,
        };
        out.write("checkpoints/os_applied.ckpt", ckpt.to_text().as_bytes())?;
        out.write("os_reports.jsonl", (summary.report.to_json_line() + "\n").as_bytes())?;
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        out.write("os_apply.json", (json + "\n").as_bytes())?;
        Ok(summary)
    })
}

/// Hessian diagnostics of a checkpoint over the leading `hessian.samples`
/// training samples.
pub fn cmd_hessian(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<HessianReport, CliError> {
    with_output(out_dir, "hessian", cfg, |out| {
        let (train_set, _) = load_data(&cfg.data)?;
        let ckpt = load_checkpoint(checkpoint, &train_set)?;
        let idx: Vec<usize> = (0..cfg.hessian_samples.min(train_set.len())).collect();
        let subset = train_set.subset(&idx);
        let targets = targets_for(&subset, cfg.train.loss)?;
        let report = hessian_report(&ckpt.model, &subset.inputs, &targets, cfg.train.loss, &cfg.hessian)?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        out.write("hessian.json", (json + "\n").as_bytes())?;
        let csv = format!(
            "epoch,trace_estimate,stderr,exact_last_layer_trace\n{},{},{},{}\n",
            ckpt.epoch,
            format_real(report.hutchinson_trace),
            format_real(report.hutchinson_stderr),
            format_real(report.exact_last_layer_trace)
        );
        out.write("hessian_trace.csv", csv.as_bytes())?;
        Ok(report)
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn feature_width(cfg: &RunConfig, data: &Dataset) -> usize {
    cfg.hidden.last().copied().unwrap_or(data.features())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` is the no-SOS baseline.
    pub b2: Option<usize>,
    /// `b₂ ≥ m`: OS is expected to leave `V` unchanged.
    pub identity_regime: bool,
    pub runs: usize,
    pub test_acc_mean: f64,
    pub test_acc_std: f64,
    pub delta_vs_baseline: f64,
    /// Largest `|‖V*‖ − ‖V‖|` over every OS application.
    pub max_abs_norm_change: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("b2,identity_regime,runs,test_acc_mean,test_acc_std,delta_vs_baseline,max_abs_norm_change\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:+.6},{:e}\n",
            r.b2.map_or("none".to_string(), |b| b.to_string()),
            r.identity_regime,
            r.runs,
            r.test_acc_mean,
            r.test_acc_std,
            r.delta_vs_baseline,
            r.max_abs_norm_change
        ));
    }
    s
}

/// One baseline plus one SOS run per `b₂` for each of `seeds` consecutive
/// seeds starting at the configured one.
pub fn cmd_sweep(cfg: &RunConfig, batches: &[usize], seeds: usize, out_dir: &Path) -> Result<Vec<SweepRow>, CliError> {
    if batches.is_empty() || seeds == 0 {
        return Err(CliError::Config("sweep needs at least one batch size and one seed".into()));
    }
    with_output(out_dir, "sweep", cfg, |out| {
        let (train_set, test_set) = load_data(&cfg.data)?;
        let m = feature_width(cfg, &train_set);
        let seed_list: Vec<u64> = (0..seeds as u64).map(|s| cfg.seed + s).collect();

        let mut arms: Vec<Option<usize>> = vec![None];
        arms.extend(batches.iter().map(|&b| Some(b)));
        let mut rows = Vec::new();
        let mut baseline = f64::NAN;
        for b2 in arms {
            let mut accs = Vec::new();
            let mut max_change = 0.0f64;
            for &seed in &seed_list {
                let run_cfg = cfg.with_seed(seed).with_sos(b2);
                let run = run_training(&run_cfg, &train_set, &test_set, &mut NoHooks)?;
                let tag = b2.map_or("none".to_string(), |b| b.to_string());
                write_run(out, &format!("runs/b2_{tag}/seed_{seed}/"), &run)?;
                accs.push(run.final_test_acc().unwrap_or(f64::NAN));
                for e in &run.outcome.os_events {
                    max_change = max_change.max((e.report.norm_after - e.report.norm_before).abs());
                }
            }
            let (mean, std) = mean_std(&accs);
            if b2.is_none() {
                baseline = mean;
            }
            rows.push(SweepRow {
                b2,
                identity_regime: b2.is_some_and(|b| b >= m),
                runs: accs.len(),
                test_acc_mean: mean,
                test_acc_std: std,
                delta_vs_baseline: mean - baseline,
                max_abs_norm_change: max_change,
            });
        }
        out.write("sweep.csv", sweep_csv(&rows).as_bytes())?;
        Ok(rows)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmComparison {
    pub name: String,
    pub base: Vec<f64>,
    pub with_sos: Vec<f64>,
    pub mean_base: f64,
    pub mean_sos: f64,
    /// Mean and sample standard deviation of the per-seed `with_sos − base`.
    pub diff_mean: f64,
    pub diff_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmComparison>,
}

/// Final test accuracy of SGD vs SGD+SOS and SAM vs SAM+SOS over
/// consecutive seeds. SOS uses the configured `sos.*` settings.
pub fn cmd_compare(cfg: &RunConfig, seeds: usize, default_rho: f64, out_dir: &Path) -> Result<CompareReport, CliError> {
    if seeds == 0 {
        return Err(CliError::Config("compare needs at least one seed".into()));
    }
    with_output(out_dir, "compare", cfg, |out| {
        let (train_set, test_set) = load_data(&cfg.data)?;
        let rho = cfg.train.sam_rho.unwrap_or(default_rho);
        let seed_list: Vec<u64> = (0..seeds as u64).map(|s| cfg.seed + s).collect();
        let sos_batch = Some(cfg.os.batch_size);
        let mut arms = Vec::new();
        for (name, sam) in [("sgd", None), ("sam", Some(rho))] {
            let mut base = Vec::new();
            let mut with_sos = Vec::new();
            for &seed in &seed_list {
                for (label, sos, accs) in [("base", None, &mut base), ("sos", sos_batch, &mut with_sos)] {
                    let run_cfg = cfg.with_seed(seed).with_sam(sam).with_sos(sos);
                    let run = run_training(&run_cfg, &train_set, &test_set, &mut NoHooks)?;
                    write_run(out, &format!("runs/{name}_{label}/seed_{seed}/"), &run)?;
                    accs.push(run.final_test_acc().unwrap_or(f64::NAN));
                }
            }
            let diffs: Vec<f64> = with_sos.iter().zip(&base).map(|(s, b)| s - b).collect();
            let (diff_mean, diff_std) = mean_std(&diffs);
            arms.push(ArmComparison {
                name: name.into(),
                mean_base: mean_std(&base).0,
                mean_sos: mean_std(&with_sos).0,
                base,
                with_sos,
                diff_mean,
                diff_std,
            });
        }
        let report = CompareReport { seeds: seed_list, arms };
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        out.write("compare.json", (json + "\n").as_bytes())?;
        Ok(report)
    })
}

pub fn cmd_scaling(
    sizes: &[usize],
    features: usize,
    outputs: usize,
    repeats: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<ScalingReport, CliError> {
    let mut out = OutputDir::create(out_dir, "scaling", Default::default(), seed)?;
    let result = scaling::measure(sizes, features, outputs, repeats, seed);
    match result {
        Ok(report) => {
            out.write("scaling.csv", report.to_csv().as_bytes())?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            out.write("scaling.json", (json + "\n").as_bytes())?;
            out.finish("complete")?;
            Ok(report)
        }
        Err(e) => {
            let _ = out.finish(&format!("failed: {e}"));
            Err(e)
        }
    }
}
