//! End-to-end orchestration: cohort synthesis, fold-hygienic training,
//! scoring, and evaluation reports.
//!
//! Hygiene is structural, not incidental: run_train never opens a held-out
//! patient's files, every fold's dictionary and normalization stats come from
//! that fold's fit subset only, and the audit it emits records the id sets so
//! the separation can be re-checked from the artifacts alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edmd::{
    decompose, filter_modes, fit_dictionary, koopman_matrix, lift, mix_seed, DictConfig,
    Dictionary, FilterConfig, KoopmanDecomposition, DEFAULT_RCOND,
};
use crate::error::{Error, Result};
use crate::eval::{cv_report, render_report, single_report, CvReport, ScoredCohort, ScoredRow};
use crate::model::{
    init_model, kfold_split, load_model, predict, save_model, train, TrainConfig, TrainExample,
};
use crate::risk::{acoustic_index, AcousticScore, ClinicalStats, FeatureStats, ModeFeatures, RiskModel};
use crate::sequence::{enhance, normalize_cycle, EnhanceConfig, Study};
use crate::synth::{
    assign_splits, gen_cohort, load_manifest, load_study, write_cohort, CohortSpec,
    ManifestEntry, Split,
};

const TRAIN_STREAM: u64 = 0x747261696e; // "train"
const DICT_STREAM: u64 = 0x64696374; // "dict"
const FINAL_STREAM: u64 = 0x66696e616c; // "final"

pub const SCORES_CSV: &str = "scores.csv";
pub const SCORES_JSONL: &str = "scores.jsonl";
pub const AUDIT_FILE: &str = "audit.json";
pub const MODEL_FILE: &str = "model.krm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data_dir: PathBuf,
    pub model_path: PathBuf,
    pub report_dir: PathBuf,
    pub enhance: EnhanceConfig,
    /// Frames per temporally normalized cycle.
    pub t_norm: usize,
    /// Relative singular-value cutoff for the Koopman pseudoinverse.
    pub rcond: f64,
    pub dictionary: DictConfig,
    pub filter: FilterConfig,
    pub train: TrainConfig,
    pub synth: CohortSpec,
    /// Patients withheld from training by manifest flag.
    pub n_test: usize,
    /// Ascending evaluation grid.
    pub thresholds: Vec<f64>,
    /// Classification threshold for confusion counts and report markers.
    pub threshold: f64,
    /// Master seed; the synth, dictionary, and training streams are derived
    /// from it, overriding any seed fields in the sub-configs.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data_dir: "data/cohort".into(),
            model_path: "out/model.krm".into(),
            report_dir: "out/report".into(),
            enhance: EnhanceConfig::default(),
            t_norm: 32,
            rcond: DEFAULT_RCOND,
            dictionary: DictConfig::default(),
            filter: FilterConfig::default(),
            train: TrainConfig::default(),
            synth: CohortSpec::default(),
            n_test: 112,
            thresholds: (0..=100).map(|i| i as f64 / 100.0).collect(),
            threshold: 0.45,
            seed: 7,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::validation("threshold grid must be nonempty"));
        }
        for t in &self.thresholds {
            if !(t.is_finite() && (0.0..=1.0).contains(t)) {
                return Err(Error::validation(format!("grid threshold {t} outside [0, 1]")));
            }
        }
        if self.thresholds.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::validation("threshold grid must be ascending"));
        }
        if !(self.threshold.is_finite() && (0.0..=1.0).contains(&self.threshold)) {
            return Err(Error::validation(format!(
                "classification threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if self.t_norm < 2 {
            return Err(Error::validation("t_norm must be at least 2"));
        }
        if !(self.rcond > 0.0 && self.rcond < 1.0) {
            return Err(Error::validation(format!("rcond must lie in (0, 1), got {}", self.rcond)));
        }
        if self.n_test >= self.synth.n_patients {
            return Err(Error::validation(format!(
                "n_test = {} leaves no training patients out of {}",
                self.n_test, self.synth.n_patients
            )));
        }
        self.dictionary.kind.validate()?;
        self.filter.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let cfg: PipelineConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Enhances and temporally normalizes every view of a study.
pub fn prepare_study(study: &Study, enh: &EnhanceConfig, t_norm: usize) -> Result<Study> {
    let mut sequences = BTreeMap::new();
    for (view, seq) in &study.sequences {
        let e = enhance(seq, enh)?;
        sequences.insert(*view, normalize_cycle(&e, t_norm)?);
    }
    Study::new(study.patient_id.clone(), sequences, study.clinical, study.label)
}

/// Filtered per-view decompositions of a prepared study.
pub fn study_decompositions(
    study: &Study,
    dict: &Dictionary,
    filter: &FilterConfig,
    rcond: f64,
) -> Result<Vec<KoopmanDecomposition>> {
    study
        .sequences
        .values()
        .map(|seq| {
            let snap = lift(seq, dict)?;
            let k = koopman_matrix(&snap, rcond)?;
            let dec = decompose(&k, &snap, seq, dict)?;
            filter_modes(&dec, filter)
        })
        .collect()
}

fn features_of(decs: &[KoopmanDecomposition]) -> Result<Vec<ModeFeatures>> {
    let mut out = Vec::new();
    for dec in decs {
        for mode in &dec.modes {
            out.push(ModeFeatures::from_mode(mode, dec.view, dec.dt)?);
        }
    }
    Ok(out)
}

/// Loads and prepares the given manifest entries in parallel, manifest order.
fn load_prepared(
    entries: &[&ManifestEntry],
    dir: &Path,
    enh: &EnhanceConfig,
    t_norm: usize,
) -> Result<Vec<Study>> {
    entries
        .par_iter()
        .map(|e| prepare_study(&load_study(e, dir)?, enh, t_norm))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub n_patients: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_positive: usize,
    pub dir: PathBuf,
}

/// Generates the configured cohort under the master seed and writes it with
/// stratified train/test flags.
pub fn run_synth(cfg: &PipelineConfig, out_dir: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let mut spec = cfg.synth.clone();
    spec.seed = cfg.seed;
    let cohort = gen_cohort(&spec)?;
    let labels: Vec<u8> = cohort.studies.iter().map(|s| s.label.unwrap_or(0)).collect();
    let splits = assign_splits(&labels, cfg.n_test, cfg.seed)?;
    write_cohort(&cohort, &spec, &splits, out_dir)?;
    let n_test = splits.iter().filter(|&&s| s == Split::Test).count();
    Ok(SynthSummary {
        n_patients: cohort.studies.len(),
        n_train: cohort.studies.len() - n_test,
        n_test,
        n_positive: labels.iter().map(|&l| l as usize).sum(),
        dir: out_dir.to_path_buf(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAuditEntry {
    pub fold: usize,
    pub fit_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Evidence that no held-out patient leaked into training and that folds
/// partition the training pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub test_ids: Vec<String>,
    pub folds: Vec<FoldAuditEntry>,
    /// Ids appearing in both the fit and validation side of some fold.
    pub fit_val_overlap: Vec<String>,
    /// Held-out ids appearing anywhere in any fold.
    pub test_leak: Vec<String>,
    pub val_folds_partition_train: bool,
    pub clean: bool,
}

pub fn build_audit(
    folds: Vec<FoldAuditEntry>,
    train_ids: &BTreeSet<String>,
    test_ids: &BTreeSet<String>,
) -> FoldAudit {
    let mut fit_val_overlap = BTreeSet::new();
    let mut test_leak = BTreeSet::new();
    let mut val_union = BTreeSet::new();
    let mut val_count = 0usize;
    for f in &folds {
        let fit: BTreeSet<&String> = f.fit_ids.iter().collect();
        for id in &f.val_ids {
            if fit.contains(id) {
                fit_val_overlap.insert(id.clone());
            }
            val_union.insert(id.clone());
            val_count += 1;
        }
        for id in f.fit_ids.iter().chain(&f.val_ids) {
            if test_ids.contains(id) {
                test_leak.insert(id.clone());
            }
        }
    }
    // partition: every training id validated exactly once
    let val_folds_partition_train = val_union == *train_ids && val_count == train_ids.len();
    let clean = fit_val_overlap.is_empty() && test_leak.is_empty() && val_folds_partition_train;
    FoldAudit {
        test_ids: test_ids.iter().cloned().collect(),
        folds,
        fit_val_overlap: fit_val_overlap.into_iter().collect(),
        test_leak: test_leak.into_iter().collect(),
        val_folds_partition_train,
        clean,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model_path: PathBuf,
    pub cv: CvReport,
    pub audit: FoldAudit,
    /// Full-training-set loss per epoch of the final fit.
    pub history: Vec<f64>,
}

fn fold_examples(
    idx: &[usize],
    entries: &[&ManifestEntry],
    studies: &[Study],
    dict: &Dictionary,
    filter: &FilterConfig,
    rcond: f64,
) -> Result<Vec<TrainExample>> {
    idx.par_iter()
        .map(|&i| {
            let decs = study_decompositions(&studies[i], dict, filter, rcond)?;
            Ok(TrainExample {
                patient_id: entries[i].patient_id.clone(),
                features: features_of(&decs)?,
                clinical: entries[i].clinical,
                label: entries[i].label,
            })
        })
        .collect()
}

/// K-fold cross-validation over the manifest's training subset, then a final
/// fit on all training patients. Writes the model, CV report files, and the
/// fold audit; held-out patients are never read.
pub fn run_train(
    cfg: &PipelineConfig,
    data_dir: &Path,
    model_path: &Path,
    cv_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(data_dir)?;
    let train_entries: Vec<&ManifestEntry> =
        manifest.entries.iter().filter(|e| e.split == Split::Train).collect();
    let test_ids: BTreeSet<String> = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .map(|e| e.patient_id.clone())
        .collect();
    if train_entries.is_empty() {
        return Err(Error::validation("manifest has no training patients"));
    }

    let train_seed = mix_seed(cfg.seed, TRAIN_STREAM);
    let mut tcfg = cfg.train.clone();
    tcfg.seed = train_seed;

    let pairs: Vec<(String, u8)> =
        train_entries.iter().map(|e| (e.patient_id.clone(), e.label)).collect();
    let folds = kfold_split(&pairs, tcfg.k_folds, train_seed)?;

    let studies = load_prepared(&train_entries, data_dir, &cfg.enhance, cfg.t_norm)?;

    let mut fold_cohorts = Vec::with_capacity(folds.k);
    let mut audit_entries = Vec::with_capacity(folds.k);
    for f in 0..folds.k {
        let (fit_idx, val_idx): (Vec<usize>, Vec<usize>) =
            (0..train_entries.len()).partition(|&i| folds.fold_of[&train_entries[i].patient_id] != f);
        let fit_seqs: Vec<_> =
            fit_idx.iter().flat_map(|&i| studies[i].sequences.values()).collect();
        let dict_cfg = DictConfig {
            seed: mix_seed(train_seed, DICT_STREAM ^ f as u64),
            ..cfg.dictionary.clone()
        };
        let dict = fit_dictionary(&fit_seqs, &dict_cfg)?;
        let fit_records: Vec<_> = fit_idx.iter().map(|&i| train_entries[i].clinical).collect();
        let stats = ClinicalStats::fit(&fit_records)?;

        let fit_examples =
            fold_examples(&fit_idx, &train_entries, &studies, &dict, &cfg.filter, cfg.rcond)?;
        let val_examples =
            fold_examples(&val_idx, &train_entries, &studies, &dict, &cfg.filter, cfg.rcond)?;

        let mode_stats = FeatureStats::fit(fit_examples.iter().flat_map(|e| e.features.iter()));
        let mut fold_cfg = tcfg.clone();
        fold_cfg.seed = mix_seed(train_seed, f as u64);
        let model0 = init_model(
            &fold_cfg,
            stats,
            mode_stats,
            dict,
            cfg.filter.clone(),
            cfg.enhance.clone(),
            cfg.t_norm,
            cfg.rcond,
        );
        let (fold_model, _) = train(&fit_examples, Some(&val_examples), model0, &fold_cfg)?;

        let rows: Vec<ScoredRow> = val_examples
            .iter()
            .map(|ex| ScoredRow {
                patient_id: ex.patient_id.clone(),
                score: predict(&fold_model, ex),
                label: ex.label,
                age: ex.clinical.age,
                fold: f,
            })
            .collect();
        fold_cohorts.push(ScoredCohort::new(rows)?);
        audit_entries.push(FoldAuditEntry {
            fold: f,
            fit_ids: fit_idx.iter().map(|&i| train_entries[i].patient_id.clone()).collect(),
            val_ids: val_idx.iter().map(|&i| train_entries[i].patient_id.clone()).collect(),
        });
    }

    let cv = cv_report(&fold_cohorts, &cfg.thresholds)?;

    // final model: dictionary, stats, and gradients from all training patients
    let all_idx: Vec<usize> = (0..train_entries.len()).collect();
    let all_seqs: Vec<_> = studies.iter().flat_map(|s| s.sequences.values()).collect();
    let dict_cfg =
        DictConfig { seed: mix_seed(train_seed, DICT_STREAM ^ FINAL_STREAM), ..cfg.dictionary.clone() };
    let dict = fit_dictionary(&all_seqs, &dict_cfg)?;
    let records: Vec<_> = train_entries.iter().map(|e| e.clinical).collect();
    let stats = ClinicalStats::fit(&records)?;
    let examples =
        fold_examples(&all_idx, &train_entries, &studies, &dict, &cfg.filter, cfg.rcond)?;
    let mode_stats = FeatureStats::fit(examples.iter().flat_map(|e| e.features.iter()));
    let mut final_cfg = tcfg.clone();
    final_cfg.seed = mix_seed(train_seed, FINAL_STREAM);
    let model0 = init_model(
        &final_cfg,
        stats,
        mode_stats,
        dict,
        cfg.filter.clone(),
        cfg.enhance.clone(),
        cfg.t_norm,
        cfg.rcond,
    );
    let (final_model, history) = train(&examples, None, model0, &final_cfg)?;

    if let Some(parent) = model_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_model(&final_model, model_path)?;

    let train_ids: BTreeSet<String> =
        train_entries.iter().map(|e| e.patient_id.clone()).collect();
    let audit = build_audit(audit_entries, &train_ids, &test_ids);
    let pooled: Vec<ScoredRow> =
        fold_cohorts.iter().flat_map(|c| c.rows().iter().cloned()).collect();
    render_report(&cv, &ScoredCohort::new(pooled)?, cfg.threshold, cv_dir)?;
    let mut audit_json = serde_json::to_vec_pretty(&audit)?;
    audit_json.push(b'\n');
    fs::write(cv_dir.join(AUDIT_FILE), audit_json)?;
    if !audit.clean {
        return Err(Error::validation("fold audit failed: training leaked across folds"));
    }

    Ok(TrainOutcome { model_path: model_path.to_path_buf(), cv, audit, history })
}

/// One scored patient as written to scores.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub patient_id: String,
    pub label: u8,
    pub age: f64,
    pub score: AcousticScore,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreSummary {
    pub n_scored: usize,
    pub csv_path: PathBuf,
    pub jsonl_path: PathBuf,
}

/// Scores manifest patients with a saved model. The model file carries its
/// own dictionary, filter, enhancement, and normalization settings, so the
/// result depends only on (model, sequences, clinical records).
pub fn run_score(
    model_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
    only: Option<&str>,
) -> Result<ScoreSummary> {
    let model = load_model(model_path)?;
    model.validate()?;
    let manifest = load_manifest(data_dir)?;
    let entries: Vec<&ManifestEntry> = match only {
        Some(id) => {
            let e = manifest
                .entries
                .iter()
                .find(|e| e.patient_id == id)
                .ok_or_else(|| Error::validation(format!("patient {id:?} not in manifest")))?;
            vec![e]
        }
        None => manifest.entries.iter().collect(),
    };
    let records: Vec<ScoreRecord> = entries
        .par_iter()
        .map(|e| score_entry(e, data_dir, &model))
        .collect::<Result<_>>()?;

    fs::create_dir_all(out_dir)?;
    let mut csv = String::from("patient_id,score,label,age,fold,dyn,clin,inter\n");
    let mut jsonl = String::new();
    for r in &records {
        let _ = writeln!(
            csv,
            "{},{},{},{},0,{},{},{}",
            r.patient_id, r.score.value, r.label, r.age, r.score.dynamical, r.score.clin,
            r.score.inter
        );
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    let csv_path = out_dir.join(SCORES_CSV);
    let jsonl_path = out_dir.join(SCORES_JSONL);
    fs::write(&csv_path, csv)?;
    fs::write(&jsonl_path, jsonl)?;
    Ok(ScoreSummary { n_scored: records.len(), csv_path, jsonl_path })
}

fn score_entry(entry: &ManifestEntry, dir: &Path, model: &RiskModel) -> Result<ScoreRecord> {
    let prepared = prepare_study(&load_study(entry, dir)?, &model.enhance, model.t_norm)?;
    let decs =
        study_decompositions(&prepared, &model.dictionary, &model.filter, model.rcond)?;
    let score = acoustic_index(&prepared, model, &decs)?;
    Ok(ScoreRecord {
        patient_id: entry.patient_id.clone(),
        label: entry.label,
        age: entry.clinical.age,
        score,
    })
}

/// Parses a scores CSV (as written by run_score or hand-built with the same
/// header) into rows for evaluation.
pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoredRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(format!("scores csv missing column {name:?}")))
    };
    let (ci, cs, cl, ca, cf) =
        (col("patient_id")?, col("score")?, col("label")?, col("age")?, col("fold")?);
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| Error::format("short csv record"))
        };
        let parse = |i: usize| -> Result<f64> {
            field(i)?.parse().map_err(|e| Error::format(format!("bad csv number: {e}")))
        };
        rows.push(ScoredRow {
            patient_id: field(ci)?.to_string(),
            score: parse(cs)?,
            label: parse(cl)? as u8,
            age: parse(ca)?,
            fold: parse(cf)? as usize,
        });
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(format!("csv: {other:?}")),
    }
}

/// Renders report files from a scores CSV. Rows are grouped by fold when the
/// file carries at least two distinct folds; otherwise the whole file is
/// evaluated as one cohort.
pub fn run_evaluate(cfg: &PipelineConfig, scores_csv: &Path, out_dir: &Path) -> Result<CvReport> {
    cfg.validate()?;
    let rows = read_scores_csv(scores_csv)?;
    let cohort = ScoredCohort::new(rows.clone())?;
    let mut by_fold: BTreeMap<usize, Vec<ScoredRow>> = BTreeMap::new();
    for r in rows {
        by_fold.entry(r.fold).or_default().push(r);
    }
    let report = if by_fold.len() >= 2 {
        let folds: Vec<ScoredCohort> =
            by_fold.into_values().map(ScoredCohort::new).collect::<Result<_>>()?;
        cv_report(&folds, &cfg.thresholds)?
    } else {
        single_report(&cohort, &cfg.thresholds)?
    };
    render_report(&report, &cohort, cfg.threshold, out_dir)?;
    Ok(report)
}
