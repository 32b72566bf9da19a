//! `rulcp`: detect | train | evaluate | monitor | sweep over C-MAPSS style data.

use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rulcp::cmapss::DatasetId;
use rulcp::error::{Error, Result};
use rulcp::eval::TABLE_HEADER;
use rulcp::lstm::{load_checkpoint, save_checkpoint};
use rulcp::monitor::{report_from_csv, report_to_csv, ChangePointRecord, MonitorModel};
use rulcp::pipeline::{
    build_training_set, detect_fleet, evaluate_test_set, load_test, load_train, summarize, sweep_min_lifespan,
    sweep_to_markdown, train_model, write_output, PipelineConfig, PredictionMode,
};
use rulcp::stream::{OnlineMonitor, RulEstimator, StreamSettings};
use rulcp::synthetic::{cmapss_like_corpus, SyntheticConfig};

#[derive(Parser)]
#[command(name = "rulcp", version, about = "Change-point informed RUL estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config; keys override the dataset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetId>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Use only the first N train and test engines.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Directory with train_/test_/RUL_FDxxx.txt.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_file: Option<PathBuf>,
    #[arg(long)]
    test_file: Option<PathBuf>,
    #[arg(long)]
    rul_file: Option<PathBuf>,
    #[arg(long)]
    min_lifespan: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Per-engine change-point detection over the train set.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Write each fitted monitor to monitors/unit_NNN.json.
        #[arg(long)]
        save_models: bool,
        /// Write per-engine statistic traces to traces/unit_NNN.csv.
        #[arg(long)]
        traces: bool,
    },
    /// Build piecewise labels and windows, then train the LSTM.
    Train {
        #[command(flatten)]
        common: Common,
        /// Change-point report from `detect`; detection runs inline when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Label every engine with the fixed cap (ablation).
        #[arg(long)]
        no_change_points: bool,
        /// Also write the training windows as train_windows.bin/.json.
        #[arg(long)]
        save_windows: bool,
    },
    /// Score the final window of each test engine.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Predict the true RUL (checks the scoring path).
        #[arg(long, conflicts_with = "constant")]
        oracle: bool,
        /// Predict the cap for every engine.
        #[arg(long)]
        constant: bool,
        #[arg(long, default_value = "ChangePoint-LSTM")]
        method: String,
    },
    /// Online monitoring of line-delimited JSON cycle records.
    Monitor {
        #[command(flatten)]
        common: Common,
        /// RUL checkpoint used once a device is degrading.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of monitors saved by `detect --save-models`.
        #[arg(long)]
        models_dir: Option<PathBuf>,
        /// Input file; standard input when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Reject devices without a saved monitor instead of calibrating on their first cycles.
        #[arg(long)]
        no_self_calibrate: bool,
        #[arg(long, default_value_t = 1)]
        min_lambda: usize,
    },
    /// Minimum-lifespan sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        candidates: Option<Vec<usize>>,
    },
    /// Print the resolved configuration.
    Config {
        #[command(flatten)]
        common: Common,
    },
    /// Write a seeded synthetic corpus in the public file layout.
    Synth {
        #[arg(long, default_value = "FD001")]
        dataset: DatasetId,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 40)]
        n_train: usize,
        #[arg(long, default_value_t = 40)]
        n_test: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn resolve(common: &Common) -> Result<PipelineConfig> {
    let text = match &common.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut cfg = PipelineConfig::from_json(text.as_deref(), common.dataset)?;
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = &common.out_dir {
        cfg.out_dir = v.clone();
    }
    if common.subset.is_some() {
        cfg.subset = common.subset;
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    if common.data_dir.is_some() {
        cfg.data_dir = common.data_dir.clone();
    }
    if common.train_file.is_some() {
        cfg.train_file = common.train_file.clone();
    }
    if common.test_file.is_some() {
        cfg.test_file = common.test_file.clone();
    }
    if common.rul_file.is_some() {
        cfg.rul_file = common.rul_file.clone();
    }
    if let Some(v) = common.min_lifespan {
        cfg.min_lifespan = v;
    }
    if let Some(v) = common.epochs {
        cfg.epochs = v;
    }
    cfg.validate()?;
    if let Some(n) = cfg.threads {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

fn run_detect(cfg: &PipelineConfig, save_models: bool, traces: bool) -> Result<Vec<ChangePointRecord>> {
    let engines = load_train(cfg)?;
    let det = detect_fleet(&engines, cfg)?;
    let summary = summarize(&det, cfg);
    let records: Vec<ChangePointRecord> = det.iter().map(|d| d.record.clone()).collect();
    write_output(&cfg.out_dir, "change_points.csv", &report_to_csv(&records))?;
    write_output(&cfg.out_dir, "change_points.json", &(serde_json::to_string_pretty(&records)? + "\n"))?;
    write_output(&cfg.out_dir, "detect_summary.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    let selection = cfg.selection();
    for (d, e) in det.iter().zip(&engines) {
        let Some(model) = &d.model else { continue };
        if save_models {
            write_output(&cfg.out_dir.join("monitors"), &format!("unit_{:03}.json", e.unit_id), &model.to_json()?)?;
        }
        if traces {
            let trace = model.statistics(&e.sensor_matrix(&selection))?;
            write_output(
                &cfg.out_dir.join("traces"),
                &format!("unit_{:03}.csv", e.unit_id),
                &trace.to_trace_csv(model.cl_t2, model.cl_q),
            )?;
        }
    }
    println!(
        "{}: {} engines, {} admitted (min lifespan {}), {} detected, {} without change point, {} fallback, {} clamped, {} validation-flagged",
        summary.dataset,
        summary.n_engines,
        summary.admitted,
        summary.min_lifespan,
        summary.detected,
        summary.none_detected,
        summary.fallback,
        summary.clamped,
        summary.validation_flagged
    );
    Ok(records)
}

fn run_train(cfg: &PipelineConfig, report: Option<&Path>, save_windows: bool) -> Result<()> {
    let records = match report {
        Some(p) => report_from_csv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => run_detect(cfg, false, false)?,
    };
    let engines = load_train(cfg)?;
    let set = build_training_set(&engines, &records, cfg)?;
    if save_windows {
        let side = set
            .windows
            .sidecar(cfg.dataset.as_str(), cfg.selection().channel_names(), cfg.fallback_cap, cfg.seed);
        set.windows.save(&cfg.out_dir, "train_windows", &side)?;
    }
    log::info!("training on {} windows", set.windows.len());
    let trained = train_model(&set, cfg)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    save_checkpoint(&cfg.out_dir.join("model.ckpt"), &trained.model, &trained.meta)?;
    write_output(&cfg.out_dir, "history.json", &trained.history.to_json()?)?;
    write_output(&cfg.out_dir, "config.json", &cfg.to_json()?)?;
    let last = trained.history.epochs.last().map(|e| e.train_rmse);
    println!(
        "{}: trained {:?} on {} windows for {} epochs; final train RMSE {}",
        cfg.dataset,
        cfg.hidden_sizes,
        set.windows.len(),
        cfg.epochs,
        last.map_or("n/a".into(), |v| format!("{v:.3}"))
    );
    Ok(())
}

fn run_evaluate(cfg: &PipelineConfig, checkpoint: Option<&Path>, mode: PredictionMode, method: &str) -> Result<()> {
    let (test, targets) = load_test(cfg)?;
    let loaded = match mode {
        PredictionMode::Model => {
            let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
            Some(load_checkpoint(&path)?)
        }
        _ => None,
    };
    let report = evaluate_test_set(loaded.as_ref().map(|(m, meta)| (m, meta)), &test, &targets, cfg, mode)?;
    write_output(&cfg.out_dir, "eval.json", &report.to_json()?)?;
    write_output(&cfg.out_dir, "eval.csv", &report.to_csv())?;
    let label = match mode {
        PredictionMode::Model => method.to_string(),
        PredictionMode::Oracle => "Oracle".into(),
        PredictionMode::Constant => format!("Constant-{}", cfg.fallback_cap),
    };
    println!("{TABLE_HEADER}\n{}", report.table_row(&label));
    Ok(())
}

fn load_monitors(dir: &Path) -> Result<Vec<MonitorModel>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| MonitorModel::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?))
        .collect()
}

fn run_monitor(
    cfg: &PipelineConfig,
    checkpoint: Option<&Path>,
    models_dir: Option<&Path>,
    input: Option<&Path>,
    self_calibrate: bool,
    min_lambda: usize,
) -> Result<()> {
    let models = match models_dir {
        Some(d) => load_monitors(d)?,
        None => Vec::new(),
    };
    let rul = match checkpoint {
        Some(p) => {
            let (model, meta) = load_checkpoint(p)?;
            Some(RulEstimator { model, meta })
        }
        None => None,
    };
    let settings = StreamSettings {
        monitor: cfg.monitor_config(),
        self_calibrate,
        min_lambda,
    };
    let mut mon = OnlineMonitor::new(cfg.selection(), settings, models, rul)?;
    let reader: Box<dyn BufRead> = match input {
        Some(p) => Box::new(io::BufReader::new(fs::File::open(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(io::BufReader::new(io::stdin())),
    };
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        for ev in mon.process_line(&line) {
            writeln!(out, "{}", serde_json::to_string(&ev)?).map_err(|e| Error::io("<stdout>", e))?;
        }
        out.flush().map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

fn run_sweep(cfg: &mut PipelineConfig, candidates: Option<Vec<usize>>) -> Result<()> {
    if let Some(c) = candidates {
        cfg.sweep_candidates = c;
    }
    let engines = load_train(cfg)?;
    let (test, targets) = load_test(cfg)?;
    let rows = sweep_min_lifespan(&engines, &test, &targets, cfg)?;
    write_output(&cfg.out_dir, "sweep.json", &(serde_json::to_string_pretty(&rows)? + "\n"))?;
    let md = sweep_to_markdown(cfg.dataset, &rows);
    write_output(&cfg.out_dir, "sweep.md", &md)?;
    print!("{md}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Detect {
            common,
            save_models,
            traces,
        } => run_detect(&resolve(&common)?, save_models, traces).map(|_| ()),
        Command::Train {
            common,
            report,
            no_change_points,
            save_windows,
        } => {
            let mut cfg = resolve(&common)?;
            if no_change_points {
                cfg.use_change_points = false;
            }
            run_train(&cfg, report.as_deref(), save_windows)
        }
        Command::Evaluate {
            common,
            checkpoint,
            oracle,
            constant,
            method,
        } => {
            let mode = if oracle {
                PredictionMode::Oracle
            } else if constant {
                PredictionMode::Constant
            } else {
                PredictionMode::Model
            };
            run_evaluate(&resolve(&common)?, checkpoint.as_deref(), mode, &method)
        }
        Command::Monitor {
            common,
            checkpoint,
            models_dir,
            input,
            no_self_calibrate,
            min_lambda,
        } => run_monitor(
            &resolve(&common)?,
            checkpoint.as_deref(),
            models_dir.as_deref(),
            input.as_deref(),
            !no_self_calibrate,
            min_lambda,
        ),
        Command::Sweep { common, candidates } => run_sweep(&mut resolve(&common)?, candidates),
        Command::Config { common } => {
            print!("{}", resolve(&common)?.to_json()?);
            Ok(())
        }
        Command::Synth {
            dataset,
            out_dir,
            n_train,
            n_test,
            seed,
        } => {
            let corpus = cmapss_like_corpus(SyntheticConfig::new(dataset, seed), n_train, n_test);
            corpus.write_to_dir(&out_dir)?;
            println!("wrote {n_train} train and {n_test} test engines to {}", out_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_category() as u8)
        }
    }
}
