//! Acceptance suite. Each test prints one machine-greppable line
//!
//!   [ACCEPTANCE] criterion N: PASS/FAIL - measured detail
//!
//! before asserting, so a `--nocapture` run yields a per-criterion report.
//! Criteria 6, 7, and 10 share one reference-scale pipeline run (736
//! patients, 624/112 split, 5-fold CV) held in a OnceLock.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use koopscore::edmd::{
    decompose, fit_dictionary, koopman_matrix, lift, DictConfig, DictKind, C64,
};
use koopscore::eval::{
    auc_concordance, confusion, crossing_point, roc, sens_spec_sweep, ScoredCohort, ScoredRow,
};
use koopscore::model::{
    assign_params, calibrate, flatten_grads, flatten_params, gradients, init_model, loss,
    TrainConfig, TrainExample,
};
use koopscore::pipeline::{
    read_scores_csv, run_evaluate, run_score, run_synth, run_train, study_decompositions,
    PipelineConfig, TrainOutcome,
};
use koopscore::risk::{sobolev_h1, temporal_irregularity, ClinicalStats, FeatureStats, ModeFeatures};
use koopscore::sequence::EnhanceConfig;
use koopscore::synth::{
    gen_cohort, gen_patient, load_manifest, oracle_eigenvalues, CohortSpec, ModeSpec, Split,
};

fn verdict(n: usize, pass: bool, detail: String) {
    println!("[ACCEPTANCE] criterion {n}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n}: {detail}");
}

/// The canonical three-mode plant: conjugate pair at sigma -0.5, omega 6,
/// plus a real decay at sigma -0.2.
fn three_mode_spec(noise_sd: f64, seed: u64) -> CohortSpec {
    CohortSpec {
        n_patients: 1,
        frames: 32,
        dt: 0.02,
        height: 48,
        width: 48,
        noise_sd,
        healthy_modes: vec![
            ModeSpec { sigma: -0.5, omega: 6.0, amplitude: 1.0, sharp: false },
            ModeSpec { sigma: -0.2, omega: 0.0, amplitude: 0.7, sharp: false },
        ],
        disease_modes: vec![ModeSpec { sigma: 0.4, omega: 12.6, amplitude: 0.8, sharp: false }],
        seed,
        ..CohortSpec::default()
    }
}

/// Worst-case recovery error: for each oracle eigenvalue the distance to its
/// nearest estimate, maximized over the oracle set.
fn recovery_error(estimated: &[C64], oracle: &[C64]) -> f64 {
    oracle
        .iter()
        .map(|o| {
            estimated
                .iter()
                .map(|e| (e - o).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0f64, f64::max)
}

fn decompose_first_view(spec: &CohortSpec, seed: u64) -> koopscore::edmd::KoopmanDecomposition {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (study, _) = gen_patient(spec, "p0", 0, &mut rng).unwrap();
    let seq = study.sequences.values().next().unwrap();
    let cfg = DictConfig { kind: DictKind::PcaLinear { r: 8 }, seed };
    let dict = fit_dictionary(&[seq], &cfg).unwrap();
    let snap = lift(seq, &dict).unwrap();
    let k = koopman_matrix(&snap, 1e-10).unwrap();
    decompose(&k, &snap, seq, &dict).unwrap()
}

#[test]
fn criterion_1_spectrum_recovery() {
    let start = Instant::now();
    let oracle = oracle_eigenvalues(&three_mode_spec(0.0, 0).healthy_modes, 0.02);
    assert_eq!(oracle.len(), 3);

    let mut worst_clean = 0.0f64;
    let mut worst_noisy = 0.0f64;
    for seed in 0..5u64 {
        let dec = decompose_first_view(&three_mode_spec(0.0, seed), seed);
        let est: Vec<C64> = dec.modes.iter().map(|m| m.lambda).collect();
        worst_clean = worst_clean.max(recovery_error(&est, &oracle));

        let dec = decompose_first_view(&three_mode_spec(0.01, seed), seed + 100);
        let est: Vec<C64> = dec.modes.iter().map(|m| m.lambda).collect();
        worst_noisy = worst_noisy.max(recovery_error(&est, &oracle));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        worst_clean < 1e-6 && worst_noisy < 1e-2 && secs < 5.0,
        format!(
            "max |est - oracle| = {worst_clean:.2e} noiseless, {worst_noisy:.2e} at 1% noise, {secs:.2} s"
        ),
    );
}

/// Noiseless three-mode sequence with dense full-field patterns. Dense
/// patterns keep every pixel dynamically active, so the f32 container
/// quantization floor sits orders of magnitude below the signal (the
/// generator's localized bumps leave most pixels static, which pushes the
/// one-step residual toward the storage noise).
fn dense_linear_sequence(seed: u64) -> koopscore::sequence::FrameSequence {
    use std::f64::consts::{FRAC_PI_2, TAU};
    let (h, w, frames, dt) = (48usize, 48usize, 32usize, 0.02f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pat = |ky: f64, kx: f64, ph: f64| {
        Array2::from_shape_fn((h, w), |(i, j)| {
            (TAU * (ky * i as f64 + kx * j as f64) / h as f64 + ph).cos()
        })
    };
    let phi0 = rng.random_range(0.0..TAU);
    let modes = vec![
        koopscore::synth::PlantedMode::new(-0.5, 6.0, 1.0, phi0, pat(1.0, 2.0, 0.3)).unwrap(),
        koopscore::synth::PlantedMode::new(-0.5, 6.0, 1.0, phi0 + FRAC_PI_2, pat(2.0, 1.0, 1.1))
            .unwrap(),
        koopscore::synth::PlantedMode::new(-0.2, 0.0, 0.7, 0.0, pat(3.0, 1.0, 2.0)).unwrap(),
    ];
    let raw = koopscore::synth::plant_view(&modes, frames, dt, h, w).unwrap();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let data: Vec<f32> = raw.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect();
    koopscore::sequence::FrameSequence::new(
        koopscore::sequence::ViewLabel::Plax,
        "p0",
        h,
        w,
        dt,
        data,
    )
    .unwrap()
}

#[test]
fn criterion_2_eigenfunction_linearity() {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let seq = dense_linear_sequence(seed);
        let cfg = DictConfig { kind: DictKind::PcaLinear { r: 8 }, seed };
        let dict = fit_dictionary(&[&seq], &cfg).unwrap();
        let snap = lift(&seq, &dict).unwrap();
        let k = koopman_matrix(&snap, 1e-10).unwrap();
        let dec = decompose(&k, &snap, &seq, &dict).unwrap();
        assert!(dec.modes.len() >= 3);
        for m in &dec.modes {
            let scale = m.phi_trace.iter().map(|z| z.norm()).fold(0.0f64, f64::max);
            if scale == 0.0 {
                continue;
            }
            let res = m
                .phi_trace
                .windows(2)
                .map(|w| (w[1] - m.lambda * w[0]).norm())
                .fold(0.0f64, f64::max);
            worst = worst.max(res / scale);
        }
    }
    verdict(2, worst < 1e-6, format!("max one-step residual = {worst:.2e}"));
}

#[test]
fn criterion_3_gradient_check() {
    // fixed batch of 8 synthetic patients
    let spec = CohortSpec {
        n_patients: 8,
        frames: 12,
        height: 20,
        width: 20,
        noise_sd: 0.02,
        seed: 42,
        ..CohortSpec::default()
    };
    let cohort = gen_cohort(&spec).unwrap();
    let seqs: Vec<_> = cohort.studies.iter().flat_map(|s| s.sequences.values()).collect();
    let dict_cfg = DictConfig { kind: DictKind::PcaLinear { r: 6 }, seed: 9 };
    let dict = fit_dictionary(&seqs, &dict_cfg).unwrap();
    let filter = koopscore::edmd::FilterConfig::default();
    let batch: Vec<TrainExample> = cohort
        .studies
        .iter()
        .map(|s| {
            let decs = study_decompositions(s, &dict, &filter, 1e-10).unwrap();
            let mut features = Vec::new();
            for d in &decs {
                for m in &d.modes {
                    features.push(ModeFeatures::from_mode(m, d.view, d.dt).unwrap());
                }
            }
            TrainExample {
                patient_id: s.patient_id.clone(),
                features,
                clinical: s.clinical,
                label: s.label.unwrap(),
            }
        })
        .collect();

    let records: Vec<_> = cohort.studies.iter().map(|s| s.clinical).collect();
    let stats = ClinicalStats::fit(&records).unwrap();
    let mode_stats = FeatureStats::fit(batch.iter().flat_map(|e| e.features.iter()));
    let tcfg = TrainConfig { hidden: 5, latent: 3, seed: 9, ..TrainConfig::default() };
    let mut model = init_model(
        &tcfg,
        stats,
        mode_stats,
        dict,
        filter,
        EnhanceConfig::default(),
        spec.frames,
        1e-10,
    );
    // Check the gradients at the live operating point the optimizer sees,
    // not at a saturated init where the clamp zeroes most of them.
    calibrate(&mut model, &batch).unwrap();

    let l2 = tcfg.l2_penalty;
    let analytic = flatten_grads(&gradients(&model, &batch, l2).unwrap());
    let theta = flatten_params(&model);
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut worst_idx = 0usize;
    for i in 0..theta.len() {
        let mut m = model.clone();
        let mut t = theta.clone();
        t[i] = theta[i] + h;
        assign_params(&mut m, &t).unwrap();
        let lp = loss(&m, &batch, l2).unwrap();
        t[i] = theta[i] - h;
        assign_params(&mut m, &t).unwrap();
        let lm = loss(&m, &batch, l2).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1.0);
        if rel > worst {
            worst = rel;
            worst_idx = i;
        }
    }
    verdict(
        3,
        worst < 1e-4,
        format!(
            "{n} parameters, worst relative error {worst:.2e} at index {worst_idx}",
            n = theta.len()
        ),
    );
}

/// Random cohort with deliberate score ties (quantized grid).
fn random_tied_cohort(rng: &mut ChaCha8Rng) -> ScoredCohort {
    loop {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=12) as f64;
        let rows: Vec<ScoredRow> = (0..n)
            .map(|i| ScoredRow {
                patient_id: format!("p{i}"),
                score: (rng.random_range(0..levels as u32) as f64) / (levels - 1.0),
                label: rng.random_range(0..2u8),
                age: rng.random_range(18.0..96.0),
                fold: 0,
            })
            .collect();
        let has_both = rows.iter().any(|r| r.label == 0) && rows.iter().any(|r| r.label == 1);
        if has_both {
            return ScoredCohort::new(rows).unwrap();
        }
    }
}

#[test]
fn criterion_4_auc_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa0c);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let cohort = random_tied_cohort(&mut rng);
        let trap = roc(&cohort).unwrap().auc;
        let conc = auc_concordance(&cohort).unwrap();
        worst = worst.max((trap - conc).abs());
    }
    verdict(4, worst <= 1e-12, format!("max |trapezoid - concordance| = {worst:.2e} over 100 cohorts"));
}

#[test]
fn criterion_5_sweep_monotonicity() {
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x53ee9);
    let mut checked = 0usize;
    let mut violations = 0usize;
    for _ in 0..100 {
        let cohort = random_tied_cohort(&mut rng);
        let sweep = sens_spec_sweep(&cohort, &grid).unwrap();
        for w in sweep.windows(2) {
            if w[1].0 > w[0].0 || w[1].1 < w[0].1 {
                violations += 1;
            }
        }
        checked += 1;
    }
    // every cohort the reference run evaluated: the five CV folds and the
    // held-out test set
    let r = reference();
    for fold in &r.outcome.cv.folds {
        for w in fold.points.windows(2) {
            if w[1].sensitivity > w[0].sensitivity || w[1].specificity < w[0].specificity {
                violations += 1;
            }
        }
        checked += 1;
    }
    let sweep = sens_spec_sweep(&r.test_cohort, &r.thresholds).unwrap();
    for w in sweep.windows(2) {
        if w[1].0 > w[0].0 || w[1].1 < w[0].1 {
            violations += 1;
        }
    }
    checked += 1;
    verdict(
        5,
        violations == 0,
        format!("{checked} cohorts swept, {violations} monotonicity violations"),
    );
}

struct RefRun {
    _tmp: tempfile::TempDir,
    outcome: TrainOutcome,
    test_cohort: ScoredCohort,
    thresholds: Vec<f64>,
    elapsed_secs: f64,
}

static REF: OnceLock<RefRun> = OnceLock::new();

/// Full reference pipeline: synth, 5-fold train, score, evaluate.
fn reference() -> &'static RefRun {
    REF.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            data_dir: tmp.path().join("cohort"),
            model_path: tmp.path().join("model.krm"),
            report_dir: tmp.path().join("report"),
            ..PipelineConfig::default()
        };
        let start = Instant::now();
        let synth = run_synth(&cfg, &cfg.data_dir).unwrap();
        assert_eq!((synth.n_patients, synth.n_train, synth.n_test), (736, 624, 112));
        let outcome =
            run_train(&cfg, &cfg.data_dir, &cfg.model_path, &cfg.report_dir.join("cv")).unwrap();
        let scores =
            run_score(&cfg.model_path, &cfg.data_dir, &cfg.report_dir.join("scores"), None)
                .unwrap();
        run_evaluate(&cfg, &scores.csv_path, &cfg.report_dir.join("eval")).unwrap();
        let elapsed_secs = start.elapsed().as_secs_f64();

        let manifest = load_manifest(&cfg.data_dir).unwrap();
        let test_ids: BTreeSet<String> = manifest
            .entries
            .iter()
            .filter(|e| e.split == Split::Test)
            .map(|e| e.patient_id.clone())
            .collect();
        let rows = read_scores_csv(&scores.csv_path).unwrap();
        let test_rows: Vec<ScoredRow> =
            rows.into_iter().filter(|r| test_ids.contains(&r.patient_id)).collect();
        assert_eq!(test_rows.len(), 112);

        RefRun {
            _tmp: tmp,
            outcome,
            test_cohort: ScoredCohort::new(test_rows).unwrap(),
            thresholds: cfg.thresholds.clone(),
            elapsed_secs,
        }
    })
}

#[test]
fn criterion_6_end_to_end_discrimination() {
    let r = reference();
    let auc = roc(&r.test_cohort).unwrap().auc;
    let sd = r.outcome.cv.sd_auc;
    let mins = r.elapsed_secs / 60.0;
    verdict(
        6,
        auc >= 0.85 && sd <= 0.05 && r.elapsed_secs < 900.0,
        format!("held-out auc = {auc:.4}, fold auc sd = {sd:.4}, pipeline {mins:.1} min"),
    );
}

#[test]
fn criterion_7_threshold_behavior() {
    let r = reference();
    let sweep = sens_spec_sweep(&r.test_cohort, &r.thresholds).unwrap();
    let sens: Vec<f64> = sweep.iter().map(|p| p.0).collect();
    let spec: Vec<f64> = sweep.iter().map(|p| p.1).collect();
    let (t_cross, y_cross) =
        crossing_point(&r.thresholds, &sens, &spec).expect("curves must cross");
    let c = confusion(&r.test_cohort, 0.45).unwrap();
    verdict(
        7,
        (0.35..=0.65).contains(&t_cross) && c.sensitivity > 0.75 && c.specificity > 0.75,
        format!(
            "crossing at {t_cross:.3} (value {y_cross:.3}); at 0.45 sens = {:.3}, spec = {:.3}",
            c.sensitivity, c.specificity
        ),
    );
}

#[test]
fn criterion_8_functional_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b5e);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        // spatial field against a naive double-loop oracle
        let h = rng.random_range(2..9);
        let w = rng.random_range(2..9);
        let dy = rng.random_range(0.1..2.0);
        let dx = rng.random_range(0.1..2.0);
        let field = Array2::from_shape_fn((h, w), |_| rng.random_range(-2.0..2.0));
        let got = sobolev_h1(&field, (dy, dx)).unwrap();
        let mut l2 = 0.0;
        let mut grad = 0.0;
        for i in 0..h {
            for j in 0..w {
                l2 += field[[i, j]] * field[[i, j]];
                if j + 1 < w {
                    let d = (field[[i, j + 1]] - field[[i, j]]) / dx;
                    grad += d * d;
                }
                if i + 1 < h {
                    let d = (field[[i + 1, j]] - field[[i, j]]) / dy;
                    grad += d * d;
                }
            }
        }
        let want = (dy * dx * (l2 + grad)).sqrt();
        worst = worst.max((got - want).abs());

        // homogeneity degree 1
        let c: f64 = rng.random_range(-3.0..3.0);
        if c != 0.0 {
            let scaled = sobolev_h1(&field.mapv(|v| c * v), (dy, dx)).unwrap();
            worst = worst.max((scaled - c.abs() * got).abs() / got.max(1e-12));
        }

        // temporal trace against a naive oracle
        let t = rng.random_range(2..40);
        let dt = rng.random_range(0.005..0.1);
        let trace: Vec<C64> = (0..t)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let got = temporal_irregularity(&trace, dt).unwrap();
        let mut want = 0.0;
        for k in 0..t - 1 {
            let d = trace[k + 1] - trace[k];
            want += d.re * d.re + d.im * d.im;
        }
        want /= dt;
        worst = worst.max((got - want).abs());

        // homogeneity degree 2
        let scaled_trace: Vec<C64> = trace.iter().map(|z| z * c).collect();
        let scaled = temporal_irregularity(&scaled_trace, dt).unwrap();
        worst = worst.max((scaled - c * c * got).abs() / got.max(1e-12));
    }
    verdict(8, worst <= 1e-12, format!("max oracle deviation = {worst:.2e} over 50 random inputs"));
}

/// Smaller full pipeline for the byte-identity rerun.
fn determinism_config(dir: &std::path::Path) -> PipelineConfig {
    PipelineConfig {
        data_dir: dir.join("cohort"),
        model_path: dir.join("model.krm"),
        report_dir: dir.join("report"),
        enhance: EnhanceConfig { target_height: 24, target_width: 24, ..EnhanceConfig::default() },
        t_norm: 16,
        dictionary: DictConfig { kind: DictKind::PcaLinear { r: 8 }, seed: 0 },
        train: TrainConfig {
            epochs: 40,
            patience: 40,
            k_folds: 3,
            hidden: 6,
            latent: 4,
            ..TrainConfig::default()
        },
        synth: CohortSpec {
            n_patients: 30,
            frames: 16,
            height: 24,
            width: 24,
            ..CohortSpec::default()
        },
        n_test: 8,
        thresholds: (0..=20).map(|i| i as f64 / 20.0).collect(),
        seed: 123,
        ..PipelineConfig::default()
    }
}

fn run_all(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let cfg = determinism_config(dir);
    run_synth(&cfg, &cfg.data_dir).unwrap();
    run_train(&cfg, &cfg.data_dir, &cfg.model_path, &cfg.report_dir.join("cv")).unwrap();
    let scores =
        run_score(&cfg.model_path, &cfg.data_dir, &cfg.report_dir.join("scores"), None).unwrap();
    run_evaluate(&cfg, &scores.csv_path, &cfg.report_dir.join("eval")).unwrap();
    let mut files = vec![
        ("cohort/manifest.json".to_string(), std::fs::read(cfg.data_dir.join("manifest.json")).unwrap()),
        ("cohort/oracle.csv".to_string(), std::fs::read(cfg.data_dir.join("oracle.csv")).unwrap()),
        ("model.krm".to_string(), std::fs::read(&cfg.model_path).unwrap()),
    ];
    for sub in ["cv", "scores", "eval"] {
        let d = cfg.report_dir.join(sub);
        let mut names: Vec<_> = std::fs::read_dir(&d)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        for n in names {
            files.push((format!("{sub}/{n}"), std::fs::read(d.join(&n)).unwrap()));
        }
    }
    files
}

#[test]
fn criterion_9_determinism() {
    let t1 = tempfile::tempdir().unwrap();
    let t2 = tempfile::tempdir().unwrap();
    let a = run_all(t1.path());
    let b = run_all(t2.path());
    assert_eq!(a.len(), b.len());
    let mut diffs = Vec::new();
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        if ba != bb {
            diffs.push(na.clone());
        }
    }
    verdict(
        9,
        diffs.is_empty(),
        format!("{} artifacts byte-compared across independent reruns, differing: {diffs:?}", a.len()),
    );
}

#[test]
fn criterion_10_fold_hygiene() {
    let r = reference();
    let audit = &r.outcome.audit;
    let test_ids: BTreeSet<&String> = audit.test_ids.iter().collect();
    let mut overlap = 0usize;
    for f in &audit.folds {
        let fit: BTreeSet<&String> = f.fit_ids.iter().collect();
        let val: BTreeSet<&String> = f.val_ids.iter().collect();
        overlap += fit.intersection(&val).count();
        overlap += fit.intersection(&test_ids).count();
        overlap += val.intersection(&test_ids).count();
    }
    verdict(
        10,
        overlap == 0 && audit.clean && audit.val_folds_partition_train,
        format!(
            "{} folds, {} held-out ids, {overlap} leaking ids, audit clean = {}",
            audit.folds.len(),
            audit.test_ids.len(),
            audit.clean
        ),
    );
}
