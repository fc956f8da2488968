//! The subcommands, callable in-process.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use metanorm::autodiff::FdReport;
use metanorm::gradcheck::{run_gradcheck, CheckTarget, GradcheckSpec};
use metanorm::model::{build_micro_cnn, ArchTable, ParamCount, RESNET_NAMES};
use metanorm::train::{load_cifar10, synthetic, train, Dataset, EpochRecord, Phase, Split, TrainConfig};
use metanorm::{IlmOptions, Mode, Model, NormKind, PartitionScheme, Scalar, Tape};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{DataKind, ExperimentConfig, Precision, SweepAxis};
use crate::error::CliError;
use crate::metrics::{row_fields, MetricsWriter, HEADER};

/// Lines go to `run.log` in the output directory and to `echo`.
struct RunLog<'a> {
    file: BufWriter<File>,
    path: String,
    echo: &'a mut dyn Write,
}

impl<'a> RunLog<'a> {
    fn create(path: &Path, echo: &'a mut dyn Write) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::io(path.display(), e))?;
        Ok(Self {
            file: BufWriter::new(file),
            path: path.display().to_string(),
            echo,
        })
    }

    fn line(&mut self, s: &str) -> Result<(), CliError> {
        writeln!(self.file, "{s}")
            .and_then(|_| self.file.flush())
            .map_err(|e| CliError::io(&self.path, e))?;
        // Console output is best effort.
        let _ = writeln!(self.echo, "{s}");
        Ok(())
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::io(path.display(), e)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))
}

pub fn param_line(c: &ParamCount) -> String {
    format!(
        "parameters total={} ilm_extra={} ratio={:.4}%",
        c.total,
        c.norm_extra,
        100.0 * c.ratio
    )
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub params: ParamCount,
    pub final_train_error: Option<f64>,
    pub final_val_error: Option<f64>,
    /// Largest logit difference for validation instance 0 run through the
    /// trained network alone versus inside a batch, using batch statistics.
    pub batch_gap: f64,
}

fn head<T: Scalar>(d: Dataset<T>, n: usize, what: &str) -> Result<Dataset<T>, CliError> {
    if n > d.len() {
        return Err(CliError::Config(format!(
            "{what} asks for {n} samples but only {} exist",
            d.len()
        )));
    }
    if n == d.len() {
        return Ok(d);
    }
    Ok(d.split_at(n)?.0)
}

/// Training and validation sets described by `cfg`.
pub fn load_data<T: Scalar>(cfg: &ExperimentConfig) -> Result<(Dataset<T>, Dataset<T>), CliError> {
    let (tr, va) = match cfg.data_kind {
        DataKind::Synthetic => synthetic::<T>(&cfg.synthetic_spec())?.split_at(cfg.train_samples)?,
        DataKind::Cifar10 => {
            let tr = load_cifar10::<T>(&cfg.data_path, Split::Train, cfg.data_standardize)?;
            let te = load_cifar10::<T>(&cfg.data_path, Split::Test, cfg.data_standardize)?;
            (
                head(tr, cfg.train_samples, "data.train_samples")?,
                head(te, cfg.val_samples, "data.val_samples")?,
            )
        }
    };
    if tr.image_shape() != cfg.model.input {
        return Err(CliError::Config(format!(
            "images are {:?} but the model expects {:?}",
            tr.image_shape(),
            cfg.model.input
        )));
    }
    if tr.classes() > cfg.model.classes {
        return Err(CliError::Config(format!(
            "data has {} classes but the model only {}",
            tr.classes(),
            cfg.model.classes
        )));
    }
    Ok((tr, va))
}

fn shuffle_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// See [`TrainOutcome::batch_gap`].
pub fn batch_gap<T: Scalar>(model: &Model<T>, data: &Dataset<T>, batch: usize) -> Result<f64, CliError> {
    let mut probe = model.clone();
    let n = batch.max(2).min(data.len());
    let mut first_row = |idx: &[usize]| -> Result<Vec<f64>, CliError> {
        let (x, _) = data.batch(idx)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let f = probe.forward(&mut tape, xv, Mode::Train)?;
        let logits = tape.value(f.output);
        let k = logits.dims2()?.1;
        Ok(logits.data()[..k].iter().map(|v| v.as_f64()).collect())
    };
    let alone = first_row(&[0])?;
    let together = first_row(&(0..n).collect::<Vec<_>>())?;
    Ok(alone
        .iter()
        .zip(&together)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Trains the configured network, writing `config.txt`, `run.log`,
/// `metrics.csv` and `checkpoint.bin` into the output directory.
pub fn cmd_train(cfg: &ExperimentConfig, echo: &mut dyn Write) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, echo),
        Precision::F64 => train_as::<f64>(cfg, echo),
    }
}

fn train_as<T: Scalar>(cfg: &ExperimentConfig, echo: &mut dyn Write) -> Result<TrainOutcome, CliError> {
    let dir = &cfg.out_dir;
    create_dir(dir)?;
    let config_path = dir.join("config.txt");
    std::fs::write(&config_path, cfg.to_text()).map_err(|e| CliError::io(config_path.display(), e))?;
    let mut log = RunLog::create(&dir.join("run.log"), echo)?;

    let (train_set, val_set) = load_data::<T>(cfg)?;
    let mut model = build_micro_cnn::<T>(&cfg.model, &cfg.norm, cfg.seed)?;
    let params = model.count_parameters();
    log.line(&format!(
        "norm {} precision {:?} seed {} train {} val {}",
        cfg.norm.kind,
        T::DTYPE,
        cfg.seed,
        train_set.len(),
        val_set.len()
    ))?;
    log.line(&param_line(&params))?;

    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        eval_batch_size: cfg.eval_batch_size,
        seed: shuffle_seed(cfg.seed),
        sgd: cfg.sgd,
        schedule: cfg.schedule.clone(),
    };
    let mut metrics = MetricsWriter::create(&dir.join("metrics.csv"))?;
    let mut write_err = None;
    let mut progress = Vec::new();
    let result = train(&mut model, &train_set, Some(&val_set), &tc, |r| {
        if write_err.is_none() {
            write_err = metrics.record(r).err();
        }
        progress.push(*r);
    });
    for r in &progress {
        if r.split == Phase::Val {
            log.line(&format!(
                "epoch {} lr {:.3e} val loss {:.4} error {:.4}",
                r.epoch, r.lr, r.loss, r.error_rate
            ))?;
        }
    }
    if let Some(e) = write_err {
        return Err(e);
    }
    let records = match result {
        Ok(r) => r,
        Err(e) => {
            let e = CliError::from(e);
            log.line(&format!("aborted: {e}"))?;
            return Err(e);
        }
    };

    Checkpoint::from_model(&model).save(&dir.join("checkpoint.bin"))?;
    let last = |split| records.iter().rev().find(|r| r.split == split).map(|r| r.error_rate);
    let gap = batch_gap(&model, &val_set, cfg.batch_size)?;
    log.line(&format!(
        "batch independence: instance 0 alone vs in a batch of {}: max |logit difference| = {gap:e}",
        cfg.batch_size.max(2).min(val_set.len())
    ))?;
    let outcome = TrainOutcome {
        final_train_error: last(Phase::Train),
        final_val_error: last(Phase::Val),
        records,
        params,
        batch_gap: gap,
    };
    if let (Some(t), Some(v)) = (outcome.final_train_error, outcome.final_val_error) {
        log.line(&format!("final train error {t:.4} val error {v:.4}"))?;
    }
    Ok(outcome)
}

pub fn gradcheck_spec(cfg: &ExperimentConfig) -> Result<GradcheckSpec, CliError> {
    let target: CheckTarget = cfg.gradcheck_target.parse().map_err(CliError::config)?;
    let mut spec = GradcheckSpec::new(target, cfg.gradcheck_shape, cfg.seed);
    spec.ilm = cfg.norm.ilm;
    spec.epsilon = cfg.norm.epsilon;
    Ok(spec)
}

/// Finite-difference check of one layer in `f64`. Fails with the worst
/// parameter named when any relative error exceeds the tolerance.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, as_json: bool, out: &mut dyn Write) -> Result<FdReport, CliError> {
    let spec = gradcheck_spec(cfg)?;
    let report = run_gradcheck(&spec)?;
    let text = if as_json {
        let params: Vec<_> = report
            .params
            .iter()
            .map(|p| {
                json!({
                    "name": p.name,
                    "max_rel_error": p.max_rel_error,
                    "checked": p.checked,
                    "kinks_skipped": p.kinks.len(),
                })
            })
            .collect();
        json!({
            "target": spec.target.to_string(),
            "shape": spec.shape,
            "seed": spec.seed,
            "tolerance": report.tol_rel,
            "passed": report.passed(),
            "params": params,
        })
        .to_string()
    } else {
        let mut s = format!("gradcheck {} shape {:?} seed {}\n", spec.target, spec.shape, spec.seed);
        for p in &report.params {
            s += &format!(
                "  {:<6} max relative error {:.3e} over {} entries",
                p.name, p.max_rel_error, p.checked
            );
            if !p.kinks.is_empty() {
                s += &format!(" ({} near kinks skipped)", p.kinks.len());
            }
            s.push('\n');
        }
        s += if report.passed() { "PASS" } else { "FAIL" };
        s
    };
    writeln!(out, "{text}").map_err(|e| CliError::io("stdout", e))?;
    if !report.passed() {
        let worst = report.worst().expect("a failing report has a worst parameter");
        return Err(CliError::Check(format!(
            "gradient of `{}` is off: max relative error {:.3e} exceeds {:.0e}",
            worst.name, worst.max_rel_error, report.tol_rel
        )));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRow {
    pub arch: String,
    /// `gn-keys` (configured key group size) or `in-keys` (size 1).
    pub keys: &'static str,
    pub key_group_size: usize,
    pub total: usize,
    pub extra: usize,
    pub ratio: f64,
}

/// Counts for each architecture under both key styles. `micro` names the
/// configured micro-net; no names means every ResNet.
pub fn params_rows(archs: &[String], cfg: &ExperimentConfig) -> Result<Vec<ParamRow>, CliError> {
    let names: Vec<String> = if archs.is_empty() {
        RESNET_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        archs.to_vec()
    };
    let kind = NormKind::meta(PartitionScheme::Group(32))?;
    let mut rows = Vec::new();
    for name in names {
        let table = if name == "micro" {
            ArchTable::from_specs("micro", &cfg.model.specs()?, cfg.model.input, cfg.norm.kind)?
        } else {
            ArchTable::named(&name)?
        };
        for (keys, k) in [("gn-keys", cfg.norm.ilm.key_group_size), ("in-keys", 1)] {
            let opts = IlmOptions {
                key_group_size: k,
                ..cfg.norm.ilm
            };
            let c = table.count(kind, &opts)?;
            rows.push(ParamRow {
                arch: name.clone(),
                keys,
                key_group_size: k,
                total: c.total,
                extra: c.norm_extra,
                ratio: c.ratio,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_params(
    archs: &[String],
    cfg: &ExperimentConfig,
    as_json: bool,
    out: &mut dyn Write,
) -> Result<Vec<ParamRow>, CliError> {
    let rows = params_rows(archs, cfg)?;
    let text = if as_json {
        serde_json::Value::Array(
            rows.iter()
                .map(|r| {
                    json!({
                        "arch": r.arch,
                        "keys": r.keys,
                        "key_group_size": r.key_group_size,
                        "total": r.total,
                        "extra": r.extra,
                        "ratio_percent": 100.0 * r.ratio,
                    })
                })
                .collect(),
        )
        .to_string()
    } else {
        let mut s = format!(
            "{:<10} {:<8} {:>12} {:>10} {:>9}\n",
            "arch", "keys", "total", "extra", "ratio"
        );
        for r in &rows {
            s += &format!(
                "{:<10} {:<8} {:>12} {:>10} {:>8.3}%\n",
                r.arch,
                r.keys,
                r.total,
                r.extra,
                100.0 * r.ratio
            );
        }
        s.trim_end().to_string()
    };
    writeln!(out, "{text}").map_err(|e| CliError::io("stdout", e))?;
    Ok(rows)
}

#[derive(Debug)]
pub struct SweepRun {
    pub value: String,
    pub result: Result<TrainOutcome, CliError>,
}

/// One configuration per value of the configured axis.
pub fn sweep_configs(cfg: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>, CliError> {
    if cfg.sweep.is_empty() {
        return Err(CliError::Config(format!(
            "sweep axis `{}` has no values",
            cfg.sweep.name()
        )));
    }
    let values = cfg.sweep.value_strings();
    let mut out = Vec::new();
    for (i, value) in values.into_iter().enumerate() {
        let mut run = cfg.clone();
        match &cfg.sweep {
            SweepAxis::BatchSize(v) => run.batch_size = v[i],
            SweepAxis::Activations(v) => (run.norm.ilm.act_mu, run.norm.ilm.act_gamma) = v[i],
        }
        run.out_dir = cfg
            .out_dir
            .join(format!("{}_{}", cfg.sweep.name(), value.replace(':', "-")));
        out.push((value, run));
    }
    Ok(out)
}

/// Runs every axis value with the shared seed on up to `workers` threads
/// and writes `sweep.csv` (all metrics rows keyed by axis value) and
/// `sweep_summary.csv`. A failed run does not stop the others; see
/// [`sweep_exit_code`].
pub fn cmd_sweep(cfg: &ExperimentConfig, workers: usize, echo: &mut dyn Write) -> Result<Vec<SweepRun>, CliError> {
    cfg.validate()?;
    let runs = sweep_configs(cfg)?;
    create_dir(&cfg.out_dir)?;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<TrainOutcome, CliError>>>> = runs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, runs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((_, run)) = runs.get(i) else { break };
                let result = cmd_train(run, &mut std::io::sink());
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    let results: Vec<SweepRun> = runs
        .into_iter()
        .zip(slots)
        .map(|((value, _), slot)| SweepRun {
            value,
            result: slot.into_inner().expect("slot lock").expect("every run finishes"),
        })
        .collect();

    let axis = cfg.sweep.name();
    let csv_path = cfg.out_dir.join("sweep.csv");
    let summary_path = cfg.out_dir.join("sweep_summary.csv");
    let mut combined = csv::Writer::from_path(&csv_path).map_err(csv_err(&csv_path))?;
    let mut summary = csv::Writer::from_path(&summary_path).map_err(csv_err(&summary_path))?;
    combined
        .write_record(["axis", "value"].into_iter().chain(HEADER.split(',')))
        .map_err(csv_err(&csv_path))?;
    summary
        .write_record([
            "axis",
            "value",
            "status",
            "final_train_error",
            "final_val_error",
            "batch_gap",
        ])
        .map_err(csv_err(&summary_path))?;
    let mut log = RunLog::create(&cfg.out_dir.join("sweep.log"), echo)?;
    let fmt_opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for run in &results {
        match &run.result {
            Ok(o) => {
                for r in &o.records {
                    let row = [axis.to_string(), run.value.clone()].into_iter().chain(row_fields(r));
                    combined.write_record(row).map_err(csv_err(&csv_path))?;
                }
                summary
                    .write_record([
                        axis.to_string(),
                        run.value.clone(),
                        "ok".into(),
                        fmt_opt(o.final_train_error),
                        fmt_opt(o.final_val_error),
                        o.batch_gap.to_string(),
                    ])
                    .map_err(csv_err(&summary_path))?;
                log.line(&format!(
                    "{axis}={}: final train error {} val error {}; batch independence gap {:e}",
                    run.value,
                    fmt_opt(o.final_train_error),
                    fmt_opt(o.final_val_error),
                    o.batch_gap
                ))?;
            }
            Err(e) => {
                let status = match e {
                    CliError::Divergence(_) => "diverged".to_string(),
                    _ => format!("failed (exit {})", e.exit_code()),
                };
                summary
                    .write_record([axis, &run.value, &status, "", "", ""])
                    .map_err(csv_err(&summary_path))?;
                log.line(&format!("{axis}={}: {status}: {e}", run.value))?;
            }
        }
    }
    if cfg.norm.kind.scheme.is_instance_level() {
        let gaps: Vec<f64> = results
            .iter()
            .filter_map(|r| r.result.as_ref().ok())
            .map(|o| o.batch_gap)
            .collect();
        if let Some(max) = gaps.iter().copied().reduce(f64::max) {
            log.line(&format!(
                "batch independence spot check ({}): max gap over the axis {max:e}",
                cfg.norm.kind
            ))?;
        }
    }
    combined.flush().map_err(|e| CliError::io(csv_path.display(), e))?;
    summary.flush().map_err(|e| CliError::io(summary_path.display(), e))?;
    Ok(results)
}

/// 0 when every run succeeded, otherwise the exit code of the first
/// failure.
pub fn sweep_exit_code(runs: &[SweepRun]) -> i32 {
    runs.iter()
        .find_map(|r| r.result.as_ref().err().map(CliError::exit_code))
        .unwrap_or(0)
}
