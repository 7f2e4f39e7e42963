//! Command-line front end. All numerical behavior lives in the library;
//! this binary parses flags, applies config overrides, and maps errors to
//! stable exit codes (0 success, 1 validation, 2 I/O or format, 3 numerical).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use koopscore::edmd::{fit_dictionary, DictConfig};
use koopscore::pipeline::{
    prepare_study, run_evaluate, run_score, run_synth, run_train, study_decompositions,
    PipelineConfig,
};
use koopscore::synth::{load_manifest, load_study};
use koopscore::{Error, Result};

#[derive(Parser)]
#[command(name = "koopscore", version, about = "Koopman-spectral risk scoring pipeline")]
struct Cli {
    /// JSON pipeline configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted spectra and train/test flags.
    Synth {
        /// Patient count; the configured test fraction is preserved.
        #[arg(long)]
        n: Option<usize>,
        /// Cohort directory (default: config data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validate on the training subset, then fit and save the final model.
    Train {
        /// Cohort directory with manifest.json (default: config data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model output path (default: config model_path).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory for CV metrics, plots, and the fold audit.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Classification threshold marked in the reports.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score manifest patients with a saved model.
    Score {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory for scores.csv and scores.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score a single patient id instead of the whole manifest.
        #[arg(long)]
        patient: Option<String>,
    },
    /// Build metrics.csv and SVG plots from a scores CSV.
    Evaluate {
        /// Scores CSV as written by `score` (default: report_dir/scores/scores.csv).
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Print one patient's per-view Koopman decompositions as JSON.
    Decompose {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        patient: String,
        /// Use this model's dictionary and preprocessing; without it a
        /// dictionary is fit on the patient's own sequences.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    init_threads();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

/// KOOPSCORE_THREADS caps worker parallelism; unset or invalid leaves the
/// default pool (one worker per core).
fn init_threads() {
    if let Ok(v) = std::env::var("KOOPSCORE_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Synth { n, out } => {
            let mut cfg = cfg;
            if let Some(n) = n {
                let ratio = cfg.n_test as f64 / cfg.synth.n_patients as f64;
                cfg.synth.n_patients = n;
                cfg.n_test = ((n as f64 * ratio).round() as usize).min(n.saturating_sub(1));
            }
            let dir = out.unwrap_or_else(|| cfg.data_dir.clone());
            let s = run_synth(&cfg, &dir)?;
            println!(
                "wrote {} patients ({} train / {} test, {} positive) to {}",
                s.n_patients,
                s.n_train,
                s.n_test,
                s.n_positive,
                s.dir.display()
            );
        }
        Command::Train { data, model, out, threshold } => {
            let mut cfg = cfg;
            if let Some(t) = threshold {
                cfg.threshold = t;
            }
            let data = data.unwrap_or_else(|| cfg.data_dir.clone());
            let model = model.unwrap_or_else(|| cfg.model_path.clone());
            let out = out.unwrap_or_else(|| cfg.report_dir.clone());
            let outcome = run_train(&cfg, &data, &model, &out)?;
            for f in &outcome.cv.folds {
                println!("fold {}: auc {:.4}", f.fold, f.auc);
            }
            println!(
                "aggregate: auc {:.4} +/- {:.4}",
                outcome.cv.mean_auc, outcome.cv.sd_auc
            );
            println!("audit: {}", if outcome.audit.clean { "clean" } else { "LEAK" });
            println!("model: {}", outcome.model_path.display());
            println!("report: {}", out.display());
        }
        Command::Score { data, model, out, patient } => {
            let data = data.unwrap_or_else(|| cfg.data_dir.clone());
            let model = model.unwrap_or_else(|| cfg.model_path.clone());
            let out = out.unwrap_or_else(|| cfg.report_dir.join("scores"));
            let s = run_score(&model, &data, &out, patient.as_deref())?;
            println!("scored {} patients -> {}", s.n_scored, s.csv_path.display());
        }
        Command::Evaluate { scores, out, threshold } => {
            let mut cfg = cfg;
            if let Some(t) = threshold {
                cfg.threshold = t;
            }
            let scores =
                scores.unwrap_or_else(|| cfg.report_dir.join("scores").join("scores.csv"));
            let out = out.unwrap_or_else(|| cfg.report_dir.join("eval"));
            let report = run_evaluate(&cfg, &scores, &out)?;
            println!(
                "auc {:.4} +/- {:.4} over {} fold(s) -> {}",
                report.mean_auc,
                report.sd_auc,
                report.folds.len(),
                out.display()
            );
        }
        Command::Decompose { data, patient, model } => {
            let data = data.unwrap_or_else(|| cfg.data_dir.clone());
            let manifest = load_manifest(&data)?;
            let entry = manifest
                .entries
                .iter()
                .find(|e| e.patient_id == patient)
                .ok_or_else(|| Error::validation(format!("patient {patient:?} not in manifest")))?;
            let study = load_study(entry, &data)?;
            let decs = match model {
                Some(path) => {
                    let m = koopscore::model::load_model(&path)?;
                    let prepared = prepare_study(&study, &m.enhance, m.t_norm)?;
                    study_decompositions(&prepared, &m.dictionary, &m.filter, m.rcond)?
                }
                None => {
                    let prepared = prepare_study(&study, &cfg.enhance, cfg.t_norm)?;
                    let seqs: Vec<_> = prepared.sequences.values().collect();
                    let dict_cfg = DictConfig { seed: cfg.seed, ..cfg.dictionary.clone() };
                    let dict = fit_dictionary(&seqs, &dict_cfg)?;
                    study_decompositions(&prepared, &dict, &cfg.filter, cfg.rcond)?
                }
            };
            let doc = serde_json::json!({
                "patient_id": entry.patient_id,
                "views": decs.iter().map(|d| d.to_json()).collect::<Vec<_>>(),
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
    }
    Ok(())
}
