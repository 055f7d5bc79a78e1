//! Command-line front end for the unlearning lab.
//!
//! Pipeline: `gen-corpus` -> `train-base` -> `unlearn` / `sweep` /
//! `sequential` -> `report`. Exit codes: 0 success, 2 invalid config,
//! 3 incompatible checkpoints. Collapsed runs exit 0 with the status
//! recorded in the run directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use undial_core::aux::{AuxMethod, AuxSpec};
use undial_core::checkpoint;
use undial_core::corpus::{generate_corpus, read_jsonl, write_jsonl, SequenceRecord};
use undial_core::error::Error;
use undial_core::harness::{
    run_sequential, run_sweep, run_train_base, run_unlearn, save_run, write_jsonl_rows,
    write_report, BaseMeta, ExperimentConfig, MethodSpec, RunDirs, RunOptions, RunStatus,
    SequentialRow,
};
use undial_core::metrics::{compute_split_metrics, DecodePolicy, MetricsReport, RunMeta};
use undial_core::model::ModelParams;
use undial_core::objectives::{DirectMethod, UnlearnSpec};

#[derive(Parser)]
#[command(name = "undial", version, about = "Desk-scale unlearning lab for tiny language models")]
struct Cli {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Unlearning method: undial|fundial|ga|npo|dp|ta|cd|cd_plain.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Method strength (gamma / beta / lambda / alpha).
    #[arg(long, global = true)]
    strength: Option<f64>,
    /// Unlearning step budget.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into <out>/corpus.jsonl.
    GenCorpus,
    /// Train the base (forget+retain) and reference (retain-only) models.
    TrainBase {
        /// Skip the retain-only reference model.
        #[arg(long)]
        no_reference: bool,
    },
    /// Run the configured unlearning method from the base checkpoint.
    Unlearn {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Run directory name under <out>/runs/.
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate a checkpoint against the corpus (full metrics report).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// One unlearning run per strength; emits sweep.csv / sweep.jsonl.
    Sweep {
        /// Comma-separated strengths, e.g. 3,10,30.
        #[arg(long, value_delimiter = ',', required = true)]
        strengths: Vec<f64>,
    },
    /// Sequential unlearning requests over forget-set folds.
    Sequential {
        #[arg(long, default_value_t = 4)]
        requests: usize,
    },
    /// Aggregate run artifacts into per-figure CSVs and a summary.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.downcast_ref::<Error>() {
                Some(Error::InvalidConfig(_)) | Some(Error::InvalidArgument(_)) => ExitCode::from(2),
                Some(Error::IncompatibleCheckpoint(_)) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = build_config(&cli)?;
    let out = cfg.output_dir.clone();
    match cli.command {
        Command::GenCorpus => {
            let records = generate_corpus(&cfg.corpus)?;
            let path = RunDirs::corpus(&out);
            write_jsonl(&records, &path)?;
            println!("wrote {} records to {}", records.len(), path.display());
        }
        Command::TrainBase { no_reference } => {
            let records = load_or_generate_corpus(&cfg)?;
            let outcome = run_train_base(&cfg, &records, !no_reference)?;
            checkpoint::save(&outcome.base, &RunDirs::base(&out), false)?;
            if let Some(reference) = &outcome.reference {
                checkpoint::save(reference, &RunDirs::reference(&out), false)?;
            }
            let meta = BaseMeta {
                steps_used: outcome.steps_used,
                final_forget_ma: outcome.final_forget_ma,
                reached_target: outcome.reached_target,
                seed: cfg.seed,
            };
            std::fs::write(
                RunDirs::base_meta(&out),
                serde_json::to_string_pretty(&meta)?,
            )?;
            if outcome.reached_target {
                println!(
                    "base ready after {} steps (forget MA {:.3})",
                    outcome.steps_used, outcome.final_forget_ma
                );
            } else {
                println!(
                    "warning: MA target not reached within budget (achieved {:.3} after {} steps); artifacts saved",
                    outcome.final_forget_ma, outcome.steps_used
                );
            }
        }
        Command::Unlearn { base, reference, name } => {
            let records = load_or_generate_corpus(&cfg)?;
            let base = load_model(base.unwrap_or_else(|| RunDirs::base(&out)))?;
            let reference = load_model(reference.unwrap_or_else(|| RunDirs::reference(&out)))?;
            let outcome = run_unlearn(&cfg, &base, &reference, &records, &RunOptions::default())?;
            let name = name.unwrap_or_else(|| default_run_name(&cfg.unlearn));
            let dir = save_run(&out, &name, &outcome)?;
            print_report(&outcome.report);
            if let RunStatus::Collapsed { at_step } = outcome.status {
                println!("run collapsed at step {at_step}; partial logs in {}", dir.display());
            } else {
                println!("run complete ({} steps); artifacts in {}", outcome.steps_run, dir.display());
            }
        }
        Command::Eval { model, reference } => {
            let records = load_or_generate_corpus(&cfg)?;
            let model = load_model(model)?;
            let reference = reference.map(load_model).transpose()?;
            let forget: Vec<&[u32]> = records
                .iter()
                .filter(|r| r.split == undial_core::corpus::Split::Forget)
                .map(|r| r.tokens.as_slice())
                .collect();
            let retain: Vec<&[u32]> = records
                .iter()
                .filter(|r| r.split == undial_core::corpus::Split::Retain)
                .map(|r| r.tokens.as_slice())
                .collect();
            let meta = RunMeta {
                method: "eval".into(),
                strength: 0.0,
                step: 0,
                seed: cfg.seed,
            };
            let report = MetricsReport {
                forget: compute_split_metrics(
                    &model, &DecodePolicy::Plain, reference.as_ref(), &forget, "forget",
                    &cfg.metrics, true, &meta,
                )?,
                retain: compute_split_metrics(
                    &model, &DecodePolicy::Plain, reference.as_ref(), &retain, "retain",
                    &cfg.metrics, true, &meta,
                )?,
            };
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("eval_metrics.jsonl"), report.to_jsonl()?)?;
            print_report(&report);
        }
        Command::Sweep { strengths } => {
            let records = load_or_generate_corpus(&cfg)?;
            let base = load_model(RunDirs::base(&out))?;
            let reference = load_model(RunDirs::reference(&out))?;
            let rows = run_sweep(&cfg, &base, &reference, &records, &strengths)?;
            write_jsonl_rows(&out.join("sweep.jsonl"), &rows)?;
            let mut csv = String::from("method,strength,el3_forget,ma_forget,ppl_retain,rep3_retain,collapsed\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.method, r.strength, r.el3_forget, r.ma_forget, r.ppl_retain, r.rep3_retain, r.collapsed
                ));
            }
            std::fs::write(out.join("sweep.csv"), csv)?;
            for r in &rows {
                println!(
                    "strength {:>7.3}: forget EL3 {:.4} MA {:.4} | retain PPL {:.3} rep3 {:.4}{}",
                    r.strength, r.el3_forget, r.ma_forget, r.ppl_retain, r.rep3_retain,
                    if r.collapsed { " [collapsed]" } else { "" }
                );
            }
        }
        Command::Sequential { requests } => {
            let records = load_or_generate_corpus(&cfg)?;
            let base = load_model(RunDirs::base(&out))?;
            let reference = load_model(RunDirs::reference(&out))?;
            let results = run_sequential(&cfg, &base, &reference, &records, requests)?;
            let rows: Vec<SequentialRow> = results
                .iter()
                .enumerate()
                .map(|(i, (report, status))| SequentialRow {
                    request: i + 1,
                    method: cfg.unlearn.name().to_string(),
                    strength: cfg.unlearn.strength(),
                    forget_ma_cumulative: report.forget.ma,
                    ppl_retain: report.retain.ppl,
                    steps_total: report.forget.step,
                    collapsed: status.is_collapsed(),
                })
                .collect();
            write_jsonl_rows(&out.join("sequential.jsonl"), &rows)?;
            for r in &rows {
                println!(
                    "request {}: cumulative forget MA {:.4}, retain PPL {:.3}, total steps {}{}",
                    r.request, r.forget_ma_cumulative, r.ppl_retain, r.steps_total,
                    if r.collapsed { " [collapsed]" } else { "" }
                );
            }
        }
        Command::Report => {
            let gaps = write_report(&out)?;
            println!("report written to {}", RunDirs::report_dir(&out).display());
            for g in gaps {
                println!("gap: {g}");
            }
        }
    }
    Ok(())
}

fn build_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.corpus.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(method) = &cli.method {
        cfg.unlearn = method_spec_from_name(method, &cfg.unlearn)?;
    }
    if let Some(strength) = cli.strength {
        cfg.unlearn = cfg.unlearn.with_strength(strength);
    }
    if let Some(steps) = cli.steps {
        if let MethodSpec::Direct(spec) = &mut cfg.unlearn {
            spec.steps = steps;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Method names accepted by --method, mapped onto a spec with usual defaults.
/// Direct-method fields carry over when the family matches.
fn method_spec_from_name(name: &str, current: &MethodSpec) -> anyhow::Result<MethodSpec> {
    let direct = |method: DirectMethod, default_strength: f64| -> MethodSpec {
        match current {
            MethodSpec::Direct(s) => MethodSpec::Direct(UnlearnSpec { method, ..s.clone() }),
            MethodSpec::Aux(_) => {
                MethodSpec::Direct(UnlearnSpec::new(method, default_strength, 200, 1e-3))
            }
        }
    };
    let aux = |method: AuxMethod, default_coeff: f64| -> MethodSpec {
        match current {
            MethodSpec::Aux(s) => MethodSpec::Aux(AuxSpec { method, ..s.clone() }),
            MethodSpec::Direct(_) => MethodSpec::Aux(AuxSpec::new(method, default_coeff)),
        }
    };
    Ok(match name {
        "undial" => direct(DirectMethod::Undial, 10.0),
        "fundial" => direct(DirectMethod::Fundial, 10.0),
        "ga" => direct(DirectMethod::Ga, 1.0),
        "npo" => direct(DirectMethod::Npo, 0.1),
        "dp" => aux(AuxMethod::Dp, 0.4),
        "ta" => aux(AuxMethod::Ta, 0.1),
        "cd" => aux(AuxMethod::CdRelu, 0.5),
        "cd_plain" => aux(AuxMethod::CdPlain, 0.5),
        other => {
            return Err(Error::InvalidConfig(format!("unknown method '{other}'")).into());
        }
    })
}

fn default_run_name(spec: &MethodSpec) -> String {
    format!("{}_s{}", spec.name(), spec.strength())
}

fn load_or_generate_corpus(cfg: &ExperimentConfig) -> anyhow::Result<Vec<SequenceRecord>> {
    let path = RunDirs::corpus(&cfg.output_dir);
    if path.is_file() {
        Ok(read_jsonl(&path)?)
    } else {
        Ok(generate_corpus(&cfg.corpus)?)
    }
}

fn load_model(path: impl AsRef<Path>) -> anyhow::Result<ModelParams> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint {} not found (run train-base first)",
            path.display()
        ))
        .into());
    }
    Ok(checkpoint::load(path)?.params)
}

fn print_report(report: &MetricsReport) {
    for m in [&report.forget, &report.retain] {
        println!(
            "{:>6}: MA {:.4}{} PPL {:.3} rep3 {:.4}{}",
            m.split,
            m.ma,
            m.el3.map(|e| format!(" EL3 {e:.4}")).unwrap_or_default(),
            m.ppl,
            m.rep3,
            m.kl_ref.map(|k| format!(" KL {k:.5}")).unwrap_or_default(),
        );
    }
}
