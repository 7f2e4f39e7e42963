//! Synthetic cohorts with planted spectra.
//!
//! Every generated patient carries an oracle record: the exact (sigma, omega)
//! pairs planted into its views, hence the exact eigenvalues
//! e^{(sigma + i*omega) dt} a decomposition should recover. Oscillatory modes
//! are planted as quadrature pairs (two independent patterns, phases 90
//! degrees apart) so the pixel dynamics are exactly linear in the span of the
//! patterns. The final min-max rescale is affine, which only adds a constant
//! drift; the dictionary's constant feature absorbs it, so the planted
//! spectrum survives normalization with an extra eigenvalue at 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edmd::{mix_seed, C64};
use crate::error::{Error, Result};
use crate::risk::ClinicalRecord;
use crate::sequence::{load_sequence, save_sequence, FrameSequence, Study, ViewLabel};

const LABEL_STREAM: u64 = 0x6c6162656c73; // "labels"
const PATIENT_STREAM: u64 = 0x70617469656e74; // "patient"
const SPLIT_STREAM: u64 = 0x73706c6974; // "split"

/// One entry of a mode pool: the dynamics (sigma, omega) are shared by every
/// view of a patient, while the spatial pattern and phase are drawn per view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    /// Continuous growth rate, 1/s. Positive means unstable.
    pub sigma: f64,
    /// Angular frequency, rad/s. Nonzero specs are planted as quadrature pairs.
    pub omega: f64,
    pub amplitude: f64,
    /// Sharp-edged rectangular patch instead of a smooth Gaussian bump.
    #[serde(default)]
    pub sharp: bool,
}

impl ModeSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() || !self.omega.is_finite() {
            return Err(Error::validation("mode sigma and omega must be finite"));
        }
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(Error::validation(format!(
                "mode amplitude must be > 0, got {}",
                self.amplitude
            )));
        }
        Ok(())
    }
}

/// A realized mode instance: spec dynamics plus a concrete pattern and phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedMode {
    pub sigma: f64,
    pub omega: f64,
    pub amplitude: f64,
    pub phase: f64,
    /// Unit L2 norm spatial pattern.
    pub pattern: Array2<f64>,
}

impl PlantedMode {
    /// Normalizes `pattern` to unit L2 norm; rejects zero patterns.
    pub fn new(
        sigma: f64,
        omega: f64,
        amplitude: f64,
        phase: f64,
        mut pattern: Array2<f64>,
    ) -> Result<Self> {
        if !(amplitude.is_finite() && amplitude > 0.0) {
            return Err(Error::validation("planted amplitude must be > 0"));
        }
        let norm = pattern.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::validation("spatial pattern must have nonzero L2 norm"));
        }
        pattern.mapv_inplace(|v| v / norm);
        Ok(PlantedMode { sigma, omega, amplitude, phase, pattern })
    }
}

/// Label-conditioned Gaussian marginals for the clinical covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelClinical {
    pub ef_mean: f64,
    pub ef_sd: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    pub dim_mean: f64,
    pub dim_sd: f64,
}

impl LabelClinical {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ef_mean", self.ef_mean),
            ("ef_sd", self.ef_sd),
            ("age_mean", self.age_mean),
            ("age_sd", self.age_sd),
            ("dim_mean", self.dim_mean),
            ("dim_sd", self.dim_sd),
        ] {
            if !v.is_finite() {
                return Err(Error::validation(format!("clinical {name} must be finite")));
            }
        }
        if self.ef_sd < 0.0 || self.age_sd < 0.0 || self.dim_sd < 0.0 {
            return Err(Error::validation("clinical sds must be >= 0"));
        }
        Ok(())
    }
}

/// Positives get lower EF and older ages than negatives; the age marginals
/// bracket an overall mean near 66 with sd near 17, matching the reference
/// cohort this generator stands in for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalGen {
    pub positive: LabelClinical,
    pub negative: LabelClinical,
}

impl Default for ClinicalGen {
    fn default() -> Self {
        ClinicalGen {
            positive: LabelClinical {
                ef_mean: 40.0,
                ef_sd: 10.0,
                age_mean: 72.0,
                age_sd: 15.0,
                dim_mean: 56.0,
                dim_sd: 8.0,
            },
            negative: LabelClinical {
                ef_mean: 60.0,
                ef_sd: 7.0,
                age_mean: 60.0,
                age_sd: 16.0,
                dim_mean: 48.0,
                dim_sd: 6.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub fraction_positive: f64,
    pub frames: usize,
    pub dt: f64,
    pub height: usize,
    pub width: usize,
    pub noise_sd: f64,
    pub healthy_modes: Vec<ModeSpec>,
    pub disease_modes: Vec<ModeSpec>,
    pub clinical: ClinicalGen,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_patients: 736,
            fraction_positive: 0.5,
            frames: 32,
            dt: 0.02,
            height: 48,
            width: 48,
            noise_sd: 0.02,
            healthy_modes: vec![
                // contraction-relaxation cycle near 1.25 Hz, lightly damped
                ModeSpec { sigma: -0.1, omega: 7.85, amplitude: 1.0, sharp: false },
                // slow monotone relaxation component
                ModeSpec { sigma: -0.6, omega: 0.0, amplitude: 0.6, sharp: false },
            ],
            disease_modes: vec![
                ModeSpec { sigma: -0.1, omega: 7.85, amplitude: 1.0, sharp: false },
                ModeSpec { sigma: -0.6, omega: 0.0, amplitude: 0.6, sharp: false },
                // the disease signature: one unstable oscillation
                ModeSpec { sigma: 0.4, omega: 12.6, amplitude: 0.8, sharp: false },
            ],
            clinical: ClinicalGen::default(),
            seed: 7,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::validation("n_patients must be > 0"));
        }
        if !(self.fraction_positive > 0.0 && self.fraction_positive < 1.0) {
            return Err(Error::validation(format!(
                "fraction_positive must lie in (0, 1), got {}",
                self.fraction_positive
            )));
        }
        if self.frames < 2 {
            return Err(Error::validation("a cohort needs at least 2 frames per sequence"));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::validation("resolution must be at least 2x2"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::validation(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::validation(format!(
                "noise_sd must be >= 0, got {}",
                self.noise_sd
            )));
        }
        if self.healthy_modes.is_empty() || self.disease_modes.is_empty() {
            return Err(Error::validation("both mode pools must be nonempty"));
        }
        for m in self.healthy_modes.iter().chain(&self.disease_modes) {
            m.validate()?;
        }
        for m in &self.healthy_modes {
            if m.sigma > 0.0 {
                return Err(Error::validation(format!(
                    "healthy pool must be stable, found sigma = {}",
                    m.sigma
                )));
            }
            if m.sharp {
                return Err(Error::validation("healthy pool must use smooth patterns"));
            }
        }
        if !self.disease_modes.iter().any(|m| m.sigma > 0.0 || m.sharp) {
            return Err(Error::validation(
                "disease pool needs at least one unstable or sharp-patterned mode",
            ));
        }
        self.clinical.positive.validate()?;
        self.clinical.negative.validate()?;
        Ok(())
    }

    fn pool(&self, label: u8) -> &[ModeSpec] {
        if label == 1 {
            &self.disease_modes
        } else {
            &self.healthy_modes
        }
    }
}

/// Exact (sigma, omega) pairs planted into one patient, pool order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEntry {
    pub sigma: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub patient_id: String,
    pub label: u8,
    pub modes: Vec<PlantedEntry>,
}

impl OracleRecord {
    /// Expected eigenvalues at step size `dt`, conjugates included.
    pub fn eigenvalues(&self, dt: f64) -> Vec<C64> {
        entry_eigenvalues(self.modes.iter().map(|e| (e.sigma, e.omega)), dt)
    }
}

pub fn lambda_of(sigma: f64, omega: f64, dt: f64) -> C64 {
    (C64::new(sigma, omega) * dt).exp()
}

fn entry_eigenvalues(entries: impl Iterator<Item = (f64, f64)>, dt: f64) -> Vec<C64> {
    let mut out = Vec::new();
    for (sigma, omega) in entries {
        out.push(lambda_of(sigma, omega, dt));
        if omega != 0.0 {
            out.push(lambda_of(sigma, -omega, dt));
        }
    }
    out
}

/// Eigenvalues a decomposition should recover for this pool, conjugates
/// included. The constant observable contributes an extra eigenvalue at 1
/// that is not listed here.
pub fn oracle_eigenvalues(modes: &[ModeSpec], dt: f64) -> Vec<C64> {
    entry_eigenvalues(modes.iter().map(|m| (m.sigma, m.omega)), dt)
}

/// One CSV row per expected eigenvalue; conjugates repeat the mode index
/// with omega negated.
pub fn oracle_csv(records: &[OracleRecord], dt: f64) -> String {
    let mut out = String::from("patient_id,mode_index,sigma,omega,lambda_re,lambda_im\n");
    for rec in records {
        for (j, e) in rec.modes.iter().enumerate() {
            for omega in if e.omega != 0.0 { vec![e.omega, -e.omega] } else { vec![e.omega] } {
                let lam = lambda_of(e.sigma, omega, dt);
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    rec.patient_id, j, e.sigma, omega, lam.re, lam.im
                );
            }
        }
    }
    out
}

/// Raw noiseless signal x_t = sum_j amp_j e^{sigma_j t dt} cos(omega_j t dt
/// + phase_j) pattern_j, before any normalization. Exposed so closed-form
/// oracles (e.g. the per-step L2 decay of a single real mode) can be checked
/// against the exact f64 field.
pub fn plant_view(
    modes: &[PlantedMode],
    frames: usize,
    dt: f64,
    height: usize,
    width: usize,
) -> Result<Array3<f64>> {
    if frames < 2 {
        return Err(Error::validation("plant_view needs at least 2 frames"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::validation("plant_view needs dt > 0"));
    }
    for m in modes {
        if m.pattern.dim() != (height, width) {
            return Err(Error::validation(format!(
                "pattern shape {:?} does not match {}x{}",
                m.pattern.dim(),
                height,
                width
            )));
        }
    }
    let mut x = Array3::zeros((frames, height, width));
    for t in 0..frames {
        let time = t as f64 * dt;
        let mut frame = x.index_axis_mut(ndarray::Axis(0), t);
        for m in modes {
            let c = m.amplitude * (m.sigma * time).exp() * (m.omega * time + m.phase).cos();
            frame.scaled_add(c, &m.pattern);
        }
    }
    Ok(x)
}

/// Smooth Gaussian bump, unit L2 norm. Draw order: center y, center x, width.
fn smooth_pattern(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let cy = rng.random_range(0.25..0.75) * height as f64;
    let cx = rng.random_range(0.25..0.75) * width as f64;
    let w = rng.random_range(0.12..0.30) * height.min(width) as f64;
    let mut p = Array2::from_shape_fn((height, width), |(y, x)| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        (-(dy * dy + dx * dx) / (2.0 * w * w)).exp()
    });
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    p.mapv_inplace(|v| v / norm);
    p
}

/// Sharp-edged rectangular patch, unit L2 norm. Draw order: y0, x0, extent y,
/// extent x. Extents are clamped so the patch never degenerates to zero area.
fn sharp_pattern(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let y0 = (rng.random_range(0.1..0.5) * height as f64) as usize;
    let x0 = (rng.random_range(0.1..0.5) * width as f64) as usize;
    let ey = ((rng.random_range(0.2..0.4) * height as f64) as usize).max(1);
    let ex = ((rng.random_range(0.2..0.4) * width as f64) as usize).max(1);
    let y1 = (y0 + ey).min(height);
    let x1 = (x0 + ex).min(width);
    let mut p = Array2::zeros((height, width));
    p.slice_mut(ndarray::s![y0..y1, x0..x1]).fill(1.0);
    let norm = p.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
    p.mapv_inplace(|v| v / norm);
    p
}

fn draw_pattern(spec: &ModeSpec, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    if spec.sharp {
        sharp_pattern(height, width, rng)
    } else {
        smooth_pattern(height, width, rng)
    }
}

/// Realizes pool entries for one view. Per entry the draws are: pattern,
/// second pattern when omega != 0, then phase. The draw count depends only on
/// pool structure (length, sharp flags, omega zero-ness), never on sigma, so
/// two pools that differ only in stability signs consume identical RNG
/// streams. The twin experiments rely on this.
fn realize_modes(
    pool: &[ModeSpec],
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PlantedMode>> {
    let mut out = Vec::new();
    for spec in pool {
        let p1 = draw_pattern(spec, height, width, rng);
        let p2 = if spec.omega != 0.0 { Some(draw_pattern(spec, height, width, rng)) } else { None };
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        out.push(PlantedMode::new(spec.sigma, spec.omega, spec.amplitude, phase, p1)?);
        if let Some(p2) = p2 {
            // quadrature leg: same dynamics, phase advanced a quarter turn
            out.push(PlantedMode::new(
                spec.sigma,
                spec.omega,
                spec.amplitude,
                phase + std::f64::consts::FRAC_PI_2,
                p2,
            )?);
        }
    }
    Ok(out)
}

/// Min-max maps the raw signal into [0, 1]; a span too small to resolve
/// yields all zeros. Monotone rounding keeps every value inside the range.
fn min_max_unit(x: &Array3<f64>) -> Vec<f32> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in x.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if !(span.is_finite() && span > 1e-300) {
        return vec![0.0; x.len()];
    }
    x.iter().map(|&v| ((v - lo) / span) as f32).collect()
}

fn draw_clinical(gen: &ClinicalGen, label: u8, rng: &mut ChaCha8Rng) -> ClinicalRecord {
    let lc = if label == 1 { &gen.positive } else { &gen.negative };
    // standard normal draws first so twins with different conditioning still
    // share the same underlying z values
    let z_ef: f64 = rng.sample(StandardNormal);
    let z_age: f64 = rng.sample(StandardNormal);
    let z_dim: f64 = rng.sample(StandardNormal);
    let sex = u8::from(rng.random::<f64>() < 0.5);
    ClinicalRecord {
        ef: (lc.ef_mean + lc.ef_sd * z_ef).clamp(5.0, 95.0),
        dim: (lc.dim_mean + lc.dim_sd * z_dim).clamp(20.0, 80.0),
        age: (lc.age_mean + lc.age_sd * z_age).clamp(18.0, 96.0),
        sex,
    }
}

/// Generates one labeled study plus its oracle record. Per-patient draw
/// order: for each of the five views, mode realization then pixel noise
/// (skipped entirely when noise_sd = 0); then the clinical record.
pub fn gen_patient(
    spec: &CohortSpec,
    patient_id: &str,
    label: u8,
    rng: &mut ChaCha8Rng,
) -> Result<(Study, OracleRecord)> {
    if label > 1 {
        return Err(Error::validation(format!("label must be 0 or 1, got {label}")));
    }
    let pool = spec.pool(label);
    let mut sequences = BTreeMap::new();
    for view in ViewLabel::ALL {
        let modes = realize_modes(pool, spec.height, spec.width, rng)?;
        let mut raw = plant_view(&modes, spec.frames, spec.dt, spec.height, spec.width)?;
        if spec.noise_sd > 0.0 {
            let noise = Normal::new(0.0, spec.noise_sd)
                .map_err(|e| Error::validation(format!("bad noise_sd: {e}")))?;
            raw.mapv_inplace(|v| v + noise.sample(rng));
        }
        let data = min_max_unit(&raw);
        let seq = FrameSequence::new(view, patient_id, spec.height, spec.width, spec.dt, data)?;
        sequences.insert(view, seq);
    }
    let clinical = draw_clinical(&spec.clinical, label, rng);
    let study = Study::new(patient_id, sequences, clinical, Some(label))?;
    let oracle = OracleRecord {
        patient_id: patient_id.to_string(),
        label,
        modes: pool.iter().map(|m| PlantedEntry { sigma: m.sigma, omega: m.omega }).collect(),
    };
    Ok((study, oracle))
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub studies: Vec<Study>,
    pub oracle: Vec<OracleRecord>,
}

fn patient_seed(seed: u64, index: usize) -> u64 {
    mix_seed(mix_seed(seed, PATIENT_STREAM), index as u64)
}

/// Exactly round(n * fraction_positive) positives, shuffled positions.
/// Patients are generated in parallel from per-patient seeds, so the result
/// is identical for any worker count.
pub fn gen_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let n = spec.n_patients;
    let n_pos = (n as f64 * spec.fraction_positive).round() as usize;
    let mut labels = vec![0u8; n];
    for l in labels.iter_mut().take(n_pos) {
        *l = 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, LABEL_STREAM));
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let width = (n.max(2) - 1).ilog10() as usize + 1;
    let patients: Result<Vec<(Study, OracleRecord)>> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let id = format!("p{i:0width$}");
            let mut rng = ChaCha8Rng::seed_from_u64(patient_seed(spec.seed, i));
            gen_patient(spec, &id, label, &mut rng)
        })
        .collect();
    let (studies, oracle) = patients?.into_iter().unzip();
    Ok(Cohort { studies, oracle })
}

/// Whether a patient belongs to the training pool or the held-out test set.
/// Training never touches `Test` patients; the fold audit enforces it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Stratified held-out assignment: each label group is shuffled under a
/// seed-derived stream and contributes test patients proportionally, so both
/// splits keep both classes whenever counts allow.
pub fn assign_splits(labels: &[u8], n_test: usize, seed: u64) -> Result<Vec<Split>> {
    let n = labels.len();
    if n_test >= n && n_test != 0 {
        return Err(Error::validation(format!(
            "cannot hold out {n_test} of {n} patients"
        )));
    }
    let mut groups: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        if l > 1 {
            return Err(Error::validation(format!("label must be 0 or 1, got {l}")));
        }
        groups[l as usize].push(i);
    }
    let n_pos = groups[1].len();
    let mut take_pos = ((n_test as f64 * n_pos as f64 / n as f64).round() as usize)
        .min(n_pos)
        .min(n_test);
    // the negative group must be able to absorb the remainder
    take_pos = take_pos.max(n_test.saturating_sub(groups[0].len()));
    let takes = [n_test - take_pos, take_pos];
    let mut out = vec![Split::Train; n];
    for (label, group) in groups.iter_mut().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(seed, SPLIT_STREAM ^ label as u64));
        for i in (1..group.len()).rev() {
            let j = rng.random_range(0..=i);
            group.swap(i, j);
        }
        for &idx in group.iter().take(takes[label]) {
            out[idx] = Split::Test;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub label: u8,
    pub split: Split,
    pub clinical: ClinicalRecord,
    /// View name to sequence file path, relative to the manifest.
    pub views: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub spec: CohortSpec,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ORACLE_FILE: &str = "oracle.csv";

/// Writes one KSQ1 file per view plus `manifest.json` and `oracle.csv` into
/// `dir`. `splits` runs parallel to the studies. Byte-deterministic for a
/// fixed cohort.
pub fn write_cohort(
    cohort: &Cohort,
    spec: &CohortSpec,
    splits: &[Split],
    dir: &Path,
) -> Result<CohortManifest> {
    if splits.len() != cohort.studies.len() {
        return Err(Error::validation(format!(
            "{} split flags for {} studies",
            splits.len(),
            cohort.studies.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(cohort.studies.len());
    for (study, &split) in cohort.studies.iter().zip(splits) {
        let mut views = BTreeMap::new();
        for (view, seq) in &study.sequences {
            let name = format!("{}_{}.ksq", study.patient_id, view.as_str());
            save_sequence(seq, &dir.join(&name))?;
            views.insert(view.as_str().to_string(), name);
        }
        entries.push(ManifestEntry {
            patient_id: study.patient_id.clone(),
            label: study.label.unwrap_or(0),
            split,
            clinical: study.clinical,
            views,
        });
    }
    let manifest = CohortManifest { spec: spec.clone(), entries };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(ORACLE_FILE), oracle_csv(&cohort.oracle, spec.dt))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<CohortManifest> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Rebuilds one manifest entry's study from its KSQ1 files.
pub fn load_study(entry: &ManifestEntry, dir: &Path) -> Result<Study> {
    let mut sequences = BTreeMap::new();
    for path in entry.views.values() {
        let seq = load_sequence(&dir.join(path))?;
        sequences.insert(seq.view(), seq);
    }
    Study::new(entry.patient_id.clone(), sequences, entry.clinical, Some(entry.label))
}

/// Rebuilds every study listed in a manifest.
pub fn load_cohort(manifest: &CohortManifest, dir: &Path) -> Result<Vec<Study>> {
    manifest.entries.iter().map(|e| load_study(e, dir)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edmd::{
        decompose, fit_dictionary, koopman_matrix, lift, DictConfig, DEFAULT_RCOND,
    };
    use crate::risk::{dyn_risk, ModeFeatures};
    use crate::sequence::write_sequence;
    use approx::assert_relative_eq;

    fn tiny_spec() -> CohortSpec {
        CohortSpec {
            n_patients: 4,
            frames: 8,
            height: 12,
            width: 12,
            noise_sd: 0.01,
            ..CohortSpec::default()
        }
    }

    fn unit_pattern(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Array2::from_shape_fn((h, w), |_| rng.random::<f64>() - 0.5);
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        p.mapv_inplace(|v| v / norm);
        p
    }

    #[test]
    fn static_mode_gives_constant_frames() {
        let spec = CohortSpec {
            noise_sd: 0.0,
            healthy_modes: vec![ModeSpec { sigma: 0.0, omega: 0.0, amplitude: 1.0, sharp: false }],
            ..tiny_spec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (study, _) = gen_patient(&spec, "p0", 0, &mut rng).unwrap();
        for seq in study.sequences.values() {
            for t in 1..seq.n_frames() {
                assert_eq!(seq.frame(t), seq.frame(0), "static mode must freeze every frame");
            }
        }
    }

    #[test]
    fn single_decay_mode_shrinks_l2_by_exp_dt() {
        let dt = 0.05;
        let mode =
            PlantedMode::new(-1.0, 0.0, 1.0, 0.0, unit_pattern(10, 10, 3)).unwrap();
        let x = plant_view(&[mode], 6, dt, 10, 10).unwrap();
        let norms: Vec<f64> = (0..6)
            .map(|t| {
                x.index_axis(ndarray::Axis(0), t).iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .collect();
        for t in 0..5 {
            assert_relative_eq!(norms[t + 1] / norms[t], (-dt).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn pattern_draws_have_unit_l2_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pool = [
            ModeSpec { sigma: -0.2, omega: 5.0, amplitude: 1.0, sharp: false },
            ModeSpec { sigma: 0.1, omega: 0.0, amplitude: 0.5, sharp: true },
        ];
        let modes = realize_modes(&pool, 16, 20, &mut rng).unwrap();
        assert_eq!(modes.len(), 3, "oscillatory entry must expand to a quadrature pair");
        for m in &modes {
            let norm = m.pattern.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_relative_eq!(norm, 1.0, epsilon = 1e-12);
        }
        assert_relative_eq!(
            modes[1].phase - modes[0].phase,
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn generated_frames_cover_unit_interval() {
        let spec = tiny_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (study, _) = gen_patient(&spec, "p0", 1, &mut rng).unwrap();
        for seq in study.sequences.values() {
            let lo = seq.pixels().iter().copied().fold(f32::INFINITY, f32::min);
            let hi = seq.pixels().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(lo, 0.0, "min-max must pin the minimum at 0");
            assert_eq!(hi, 1.0, "min-max must pin the maximum at 1");
        }
    }

    #[test]
    fn oracle_eigenvalue_examples() {
        let dt = 0.02;
        assert_eq!(lambda_of(0.0, 0.0, dt), C64::new(1.0, 0.0));
        let quarter = lambda_of(0.0, std::f64::consts::FRAC_PI_2 / dt, dt);
        assert_relative_eq!(quarter.re, 0.0, epsilon = 1e-15);
        assert_relative_eq!(quarter.im, 1.0, epsilon = 1e-15);
        let (sigma, omega, dt) = (-0.37, 4.21, 0.013);
        let lam = lambda_of(sigma, omega, dt);
        let scale = (sigma * dt).exp();
        assert_relative_eq!(lam.re, scale * (omega * dt).cos(), epsilon = 1e-15);
        assert_relative_eq!(lam.im, scale * (omega * dt).sin(), epsilon = 1e-15);
        let pool = [
            ModeSpec { sigma, omega, amplitude: 1.0, sharp: false },
            ModeSpec { sigma: -0.2, omega: 0.0, amplitude: 1.0, sharp: false },
        ];
        let lams = oracle_eigenvalues(&pool, dt);
        assert_eq!(lams.len(), 3, "conjugate of the oscillatory mode must be included");
        assert_eq!(lams[1], lams[0].conj());
    }

    #[test]
    fn cohort_has_exact_positive_count() {
        for (n, frac, want) in [(10, 0.5, 5), (7, 0.3, 2), (736, 0.5, 368)] {
            let spec = CohortSpec {
                n_patients: n,
                fraction_positive: frac,
                frames: 2,
                height: 2,
                width: 2,
                noise_sd: 0.0,
                ..CohortSpec::default()
            };
            let cohort = gen_cohort(&spec).unwrap();
            let got: usize = cohort.studies.iter().map(|s| s.label.unwrap() as usize).sum();
            assert_eq!(got, want, "n = {n}, fraction = {frac}");
            let oracle_pos: usize = cohort.oracle.iter().map(|o| o.label as usize).sum();
            assert_eq!(oracle_pos, want, "oracle labels must match study labels");
        }
    }

    #[test]
    fn same_seed_reproduces_cohort_bytes() {
        let spec = tiny_spec();
        let a = gen_cohort(&spec).unwrap();
        let b = gen_cohort(&spec).unwrap();
        assert_eq!(a.oracle, b.oracle);
        for (sa, sb) in a.studies.iter().zip(&b.studies) {
            assert_eq!(sa.label, sb.label);
            assert_eq!(sa.clinical, sb.clinical);
            for (va, vb) in sa.sequences.values().zip(sb.sequences.values()) {
                let mut ba = Vec::new();
                let mut bb = Vec::new();
                write_sequence(va, &mut ba).unwrap();
                write_sequence(vb, &mut bb).unwrap();
                assert_eq!(ba, bb, "same seed must give identical sequence bytes");
            }
        }
        let other = gen_cohort(&CohortSpec { seed: 8, ..spec }).unwrap();
        let same = a
            .studies
            .iter()
            .zip(&other.studies)
            .all(|(x, y)| x.clinical == y.clinical);
        assert!(!same, "different seeds must not reproduce the same clinical draws");
    }

    #[test]
    fn clinical_marginals_follow_labels() {
        let spec = CohortSpec {
            n_patients: 300,
            frames: 2,
            height: 2,
            width: 2,
            noise_sd: 0.0,
            ..CohortSpec::default()
        };
        let cohort = gen_cohort(&spec).unwrap();
        let mut ef = [0.0f64; 2];
        let mut age = [0.0f64; 2];
        let mut count = [0.0f64; 2];
        for s in &cohort.studies {
            let l = s.label.unwrap() as usize;
            ef[l] += s.clinical.ef;
            age[l] += s.clinical.age;
            count[l] += 1.0;
        }
        assert!(ef[1] / count[1] < ef[0] / count[0] - 10.0, "positives need clearly lower EF");
        assert!(age[1] / count[1] > age[0] / count[0] + 5.0, "positives need clearly higher age");
        for s in &cohort.studies {
            s.clinical.validate().unwrap();
        }
    }

    #[test]
    fn spec_validation_rejects_bad_pools() {
        let base = CohortSpec::default();
        let cases = [
            CohortSpec { fraction_positive: 0.0, ..base.clone() },
            CohortSpec { fraction_positive: 1.0, ..base.clone() },
            CohortSpec { noise_sd: -0.1, ..base.clone() },
            CohortSpec { frames: 1, ..base.clone() },
            CohortSpec {
                healthy_modes: vec![ModeSpec {
                    sigma: 0.2,
                    omega: 0.0,
                    amplitude: 1.0,
                    sharp: false,
                }],
                ..base.clone()
            },
            CohortSpec {
                healthy_modes: vec![ModeSpec {
                    sigma: -0.2,
                    omega: 0.0,
                    amplitude: 1.0,
                    sharp: true,
                }],
                ..base.clone()
            },
            CohortSpec {
                disease_modes: vec![ModeSpec {
                    sigma: -0.2,
                    omega: 1.0,
                    amplitude: 1.0,
                    sharp: false,
                }],
                ..base.clone()
            },
            CohortSpec {
                disease_modes: vec![ModeSpec {
                    sigma: 0.4,
                    omega: 1.0,
                    amplitude: 0.0,
                    sharp: false,
                }],
                ..base.clone()
            },
        ];
        for (i, spec) in cases.iter().enumerate() {
            assert!(
                matches!(spec.validate(), Err(Error::Validation(_))),
                "case {i} must fail validation"
            );
        }
        base.validate().unwrap();
    }

    #[test]
    fn planted_spectrum_is_recovered_noiselessly() {
        // one conjugate pair and one real mode: rank 3 plus the constant
        let pool = vec![
            ModeSpec { sigma: -0.5, omega: 6.0, amplitude: 1.0, sharp: false },
            ModeSpec { sigma: -0.2, omega: 0.0, amplitude: 0.7, sharp: false },
        ];
        let spec = CohortSpec {
            n_patients: 1,
            frames: 32,
            dt: 0.02,
            height: 24,
            width: 24,
            noise_sd: 0.0,
            disease_modes: pool.clone(),
            ..CohortSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (study, oracle) = gen_patient(&spec, "p0", 1, &mut rng).unwrap();
        let seq = &study.sequences[&ViewLabel::Plax];
        // r = 2 * number of planted specs, per the recoverability contract
        let dict = fit_dictionary(&[seq], &DictConfig::default_linear(4)).unwrap();
        let snap = lift(seq, &dict).unwrap();
        let k = koopman_matrix(&snap, DEFAULT_RCOND).unwrap();
        let dec = decompose(&k, &snap, seq, &dict).unwrap();
        for lam in oracle.eigenvalues(spec.dt) {
            let best = dec
                .modes
                .iter()
                .map(|m| (m.lambda - lam).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "oracle eigenvalue {lam} missed by {best:.2e}");
        }
    }

    #[test]
    fn unstable_twin_has_strictly_larger_max_dyn_risk() {
        // same structure either side so the RNG streams align; only the
        // stability sign differs
        let pos_pool = vec![ModeSpec { sigma: 0.4, omega: 12.6, amplitude: 1.0, sharp: false }];
        let neg_pool = vec![ModeSpec { sigma: -0.4, omega: 12.6, amplitude: 1.0, sharp: false }];
        let base = CohortSpec {
            n_patients: 1,
            frames: 32,
            dt: 0.02,
            height: 24,
            width: 24,
            noise_sd: 0.0,
            ..CohortSpec::default()
        };
        let pos_spec = CohortSpec { disease_modes: pos_pool, ..base.clone() };
        let neg_spec = CohortSpec { healthy_modes: neg_pool, ..base };
        let seed = 21;
        let max_risk = |spec: &CohortSpec, label: u8| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (study, _) = gen_patient(spec, "p0", label, &mut rng).unwrap();
            let seq = &study.sequences[&ViewLabel::A4c];
            let dict = fit_dictionary(&[seq], &DictConfig::default_linear(2)).unwrap();
            let snap = lift(seq, &dict).unwrap();
            let k = koopman_matrix(&snap, DEFAULT_RCOND).unwrap();
            let dec = decompose(&k, &snap, seq, &dict).unwrap();
            dec.modes
                .iter()
                .map(|m| dyn_risk(&ModeFeatures::from_mode(m, dec.view, dec.dt).unwrap()))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let pos = max_risk(&pos_spec, 1);
        let neg = max_risk(&neg_spec, 0);
        assert!(
            pos > neg,
            "unstable twin must carry the larger dynamical risk, got {pos} vs {neg}"
        );
    }

    #[test]
    fn split_assignment_is_stratified_and_deterministic() {
        // 736-patient layout: 368 of each class, 112 held out
        let labels: Vec<u8> = (0..736).map(|i| (i % 2) as u8).collect();
        let splits = assign_splits(&labels, 112, 3).unwrap();
        let n_test = splits.iter().filter(|&&s| s == Split::Test).count();
        assert_eq!(n_test, 112);
        let test_pos = labels
            .iter()
            .zip(&splits)
            .filter(|(&l, &s)| l == 1 && s == Split::Test)
            .count();
        assert_eq!(test_pos, 56, "balanced labels must split the holdout evenly");
        assert_eq!(splits, assign_splits(&labels, 112, 3).unwrap());

        let all_train = assign_splits(&labels, 0, 3).unwrap();
        assert!(all_train.iter().all(|&s| s == Split::Train));
        assert!(assign_splits(&labels, 736, 3).is_err(), "empty training pool must fail");

        // skewed cohort: 3 positives of 30, hold out 10; both splits keep
        // both classes
        let skewed: Vec<u8> = (0..30).map(|i| u8::from(i < 3)).collect();
        let s = assign_splits(&skewed, 10, 5).unwrap();
        let test_pos =
            skewed.iter().zip(&s).filter(|(&l, &sp)| l == 1 && sp == Split::Test).count();
        assert_eq!(test_pos, 1, "round(10 * 3/30) positives belong in the holdout");
    }

    #[test]
    fn cohort_roundtrips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CohortSpec { frames: 32, height: 16, width: 16, ..tiny_spec() };
        let cohort = gen_cohort(&spec).unwrap();
        let labels: Vec<u8> = cohort.studies.iter().map(|s| s.label.unwrap()).collect();
        let splits = assign_splits(&labels, 1, spec.seed).unwrap();
        let manifest = write_cohort(&cohort, &spec, &splits, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 4);
        assert_eq!(
            manifest.entries.iter().filter(|e| e.split == Split::Test).count(),
            1
        );

        let reloaded_manifest = load_manifest(dir.path()).unwrap();
        assert_eq!(reloaded_manifest, manifest);
        let studies = load_cohort(&reloaded_manifest, dir.path()).unwrap();
        for (orig, got) in cohort.studies.iter().zip(&studies) {
            assert_eq!(orig.patient_id, got.patient_id);
            assert_eq!(orig.label, got.label);
            assert_eq!(orig.clinical, got.clinical);
            assert_eq!(orig.sequences, got.sequences);
            let seq = &got.sequences[&ViewLabel::Plax];
            assert_eq!((seq.n_frames(), seq.height(), seq.width()), (32, 16, 16));
        }

        let csv = fs::read_to_string(dir.path().join(ORACLE_FILE)).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "patient_id,mode_index,sigma,omega,lambda_re,lambda_im"
        );
        // default disease pool: 2 oscillatory rows each + 1 real (healthy has
        // one oscillatory + one real)
        let rows = lines.count();
        let expect: usize = cohort
            .oracle
            .iter()
            .map(|o| o.modes.iter().map(|m| if m.omega != 0.0 { 2 } else { 1 }).sum::<usize>())
            .sum();
        assert_eq!(rows, expect);
    }
}
