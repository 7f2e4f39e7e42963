//! Risk fusion: per-mode dynamical risk, attention pooling over all views,
//! quadratic clinical risk, latent-space mode/clinical interaction, and the
//! calibrated sigmoid producing the final score in [0,1].

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::edmd::{Dictionary, FilterConfig, KoopmanDecomposition, KoopmanMode, C64};
use crate::error::{Error, Result};
use crate::sequence::{EnhanceConfig, Study, ViewLabel};

pub const N_CLINICAL: usize = 4;
/// ModeFeatures vector length: six numeric summaries plus the view one-hot.
pub const N_MODE_FEATURES: usize = 6 + ViewLabel::ALL.len();

/// Clinical covariates p = [ef, dim, age, sex].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    /// Ejection fraction, percent.
    pub ef: f64,
    /// Ventricular dimension, mm.
    pub dim: f64,
    /// Age in years.
    pub age: f64,
    /// 0 = male, 1 = female.
    pub sex: u8,
}

impl ClinicalRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.ef.is_finite() && self.ef > 0.0 && self.ef <= 100.0) {
            return Err(Error::validation(format!(
                "ef must lie in (0, 100], got {}",
                self.ef
            )));
        }
        if !(self.dim.is_finite() && self.dim > 0.0) {
            return Err(Error::validation(format!("dim must be > 0, got {}", self.dim)));
        }
        if !(self.age.is_finite() && self.age >= 16.0) {
            return Err(Error::validation(format!(
                "age must be >= 16 (adult cohort), got {}",
                self.age
            )));
        }
        if self.sex > 1 {
            return Err(Error::validation(format!("sex must be 0 or 1, got {}", self.sex)));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; N_CLINICAL] {
        [self.ef, self.dim, self.age, self.sex as f64]
    }
}

/// Per-field normalization statistics fitted on training data only.
/// Sex is passed through: its entries are pinned to mean 0, sd 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalStats {
    pub mean: [f64; N_CLINICAL],
    pub sd: [f64; N_CLINICAL],
}

impl ClinicalStats {
    /// Identity normalization (mean 0, sd 1 everywhere).
    pub fn identity() -> Self {
        ClinicalStats {
            mean: [0.0; N_CLINICAL],
            sd: [1.0; N_CLINICAL],
        }
    }

    /// Sample statistics of ef/dim/age over the given records (sd with the
    /// n-1 divisor). A constant field would give sd = 0, which is invalid;
    /// callers get the validation error instead of a silent divide-by-zero.
    pub fn fit(records: &[ClinicalRecord]) -> Result<Self> {
        if records.len() < 2 {
            return Err(Error::validation(
                "clinical stats need at least two training records",
            ));
        }
        let n = records.len() as f64;
        let mut mean = [0.0; N_CLINICAL];
        for r in records {
            let p = r.as_array();
            for j in 0..3 {
                mean[j] += p[j];
            }
        }
        for j in 0..3 {
            mean[j] /= n;
        }
        let mut var = [0.0; N_CLINICAL];
        for r in records {
            let p = r.as_array();
            for j in 0..3 {
                let d = p[j] - mean[j];
                var[j] += d * d;
            }
        }
        let mut sd = [1.0; N_CLINICAL];
        for j in 0..3 {
            sd[j] = (var[j] / (n - 1.0)).sqrt();
        }
        let stats = ClinicalStats { mean, sd };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        for j in 0..N_CLINICAL {
            if !self.mean[j].is_finite() {
                return Err(Error::validation("clinical stats mean must be finite"));
            }
            if !(self.sd[j].is_finite() && self.sd[j] > 0.0) {
                return Err(Error::validation(format!(
                    "clinical stats sd must be > 0, got {} at index {j}",
                    self.sd[j]
                )));
            }
        }
        Ok(())
    }

    /// p_hat = (p - mean) / sd componentwise (sex entries are (0, 1)).
    pub fn normalize(&self, rec: &ClinicalRecord) -> Array1<f64> {
        let p = rec.as_array();
        Array1::from_iter((0..N_CLINICAL).map(|j| (p[j] - self.mean[j]) / self.sd[j]))
    }
}

/// Fixed-length numeric summary of one retained Koopman mode; this is the
/// attention and embedder input (the raw eigenfunction trace varies in
/// length, so Q and V need a fixed-size stand-in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFeatures {
    pub re_mu: f64,
    pub im_mu: f64,
    /// |lambda|, discrete-time modulus.
    pub modulus: f64,
    /// Sobolev H1 norm of the spatial mode field, unit grid spacing.
    pub h1: f64,
    /// Temporal irregularity of the eigenfunction trace.
    pub p_irr: f64,
    pub energy: f64,
    pub view: ViewLabel,
}

impl ModeFeatures {
    pub fn from_mode(mode: &KoopmanMode, view: ViewLabel, dt: f64) -> Result<Self> {
        let h1 = sobolev_h1(&mode.field, (1.0, 1.0))?;
        let p_irr = temporal_irregularity(&mode.phi_trace, dt)?;
        Ok(ModeFeatures {
            re_mu: mode.mu.re,
            im_mu: mode.mu.im,
            modulus: mode.lambda.norm(),
            h1,
            p_irr,
            energy: mode.energy,
            view,
        })
    }

    /// Feature vector [re_mu, im_mu, modulus, h1, p_irr, energy, onehot x5].
    pub fn to_vec(&self) -> [f64; N_MODE_FEATURES] {
        let mut v = [0.0; N_MODE_FEATURES];
        v[0] = self.re_mu;
        v[1] = self.im_mu;
        v[2] = self.modulus;
        v[3] = self.h1;
        v[4] = self.p_irr;
        v[5] = self.energy;
        v[6 + self.view.index()] = 1.0;
        v
    }
}

pub const N_CONTINUOUS_FEATURES: usize = 6;

/// Per-dimension affine normalization for the six continuous mode-feature
/// entries; the one-hot view block passes through untouched. Near-Nyquist
/// junk modes put re_mu/im_mu/p_irr on scales of 1e2..1e3, which saturates
/// the attention and embedder activations at init, so the learned blocks
/// consume standardized features while dyn_risk keeps the raw ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; N_CONTINUOUS_FEATURES],
    pub sd: [f64; N_CONTINUOUS_FEATURES],
}

impl FeatureStats {
    /// Identity normalization (mean 0, sd 1 everywhere).
    pub fn identity() -> Self {
        FeatureStats {
            mean: [0.0; N_CONTINUOUS_FEATURES],
            sd: [1.0; N_CONTINUOUS_FEATURES],
        }
    }

    /// Sample statistics over the pooled training modes (all views, n-1
    /// divisor). Fewer than two modes, or a dimension with spread under
    /// 1e-9, keeps sd = 1 there; centering still applies.
    pub fn fit<'a, I>(features: I) -> Self
    where
        I: IntoIterator<Item = &'a ModeFeatures>,
    {
        let rows: Vec<[f64; N_MODE_FEATURES]> = features.into_iter().map(|mf| mf.to_vec()).collect();
        let mut out = FeatureStats::identity();
        if rows.is_empty() {
            return out;
        }
        let n = rows.len() as f64;
        for j in 0..N_CONTINUOUS_FEATURES {
            out.mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        }
        if rows.len() >= 2 {
            for j in 0..N_CONTINUOUS_FEATURES {
                let var = rows
                    .iter()
                    .map(|r| (r[j] - out.mean[j]).powi(2))
                    .sum::<f64>()
                    / (n - 1.0);
                let sd = var.sqrt();
                if sd > 1e-9 {
                    out.sd[j] = sd;
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for j in 0..N_CONTINUOUS_FEATURES {
            if !self.mean[j].is_finite() {
                return Err(Error::validation("feature stats mean must be finite"));
            }
            if !(self.sd[j].is_finite() && self.sd[j] > 0.0) {
                return Err(Error::validation(format!(
                    "feature stats sd must be > 0, got {} at index {j}",
                    self.sd[j]
                )));
            }
        }
        Ok(())
    }

    /// to_vec with the continuous block shifted and scaled.
    pub fn standardize(&self, mf: &ModeFeatures) -> Array1<f64> {
        let mut v = mf.to_vec();
        for j in 0..N_CONTINUOUS_FEATURES {
            v[j] = (v[j] - self.mean[j]) / self.sd[j];
        }
        Array1::from_iter(v)
    }
}

/// Two affine layers with a swish between them: W2 swish(W1 x + b1) + b2.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderStack {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl EmbedderStack {
    pub fn validate(&self, in_dim: usize) -> Result<()> {
        let h = self.w1.nrows();
        if self.w1.ncols() != in_dim {
            return Err(Error::validation(format!(
                "embedder expects input {in_dim}, has {}",
                self.w1.ncols()
            )));
        }
        if self.b1.len() != h || self.w2.ncols() != h {
            return Err(Error::validation("embedder hidden width mismatch"));
        }
        if self.b2.len() != self.w2.nrows() {
            return Err(Error::validation("embedder output width mismatch"));
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn embed(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let hidden = (self.w1.dot(&x) + &self.b1).mapv(swish);
        self.w2.dot(&hidden) + &self.b2
    }

    /// Squared L2 norm of every parameter block, biases included.
    pub fn l2_norm_sq(&self) -> f64 {
        self.w1.iter().map(|v| v * v).sum::<f64>()
            + self.b1.iter().map(|v| v * v).sum::<f64>()
            + self.w2.iter().map(|v| v * v).sum::<f64>()
            + self.b2.iter().map(|v| v * v).sum::<f64>()
    }
}

/// All trainable parameters plus the frozen preprocessing recipe needed to
/// score a raw study (dictionary, spectral filter, enhancement, cycle
/// length, pseudoinverse cutoff).
#[derive(Debug, Clone, PartialEq)]
pub struct RiskModel {
    /// Attention projection, length h.
    pub q: Array1<f64>,
    /// Attention mixing, h x N_MODE_FEATURES.
    pub v: Array2<f64>,
    /// Linear clinical risk, length 4.
    pub beta: Array1<f64>,
    /// Quadratic clinical risk, 4 x 4 symmetric.
    pub omega: Array2<f64>,
    /// ModeFeatures -> latent.
    pub embed_mode: EmbedderStack,
    /// Normalized clinical vector -> latent.
    pub embed_clin: EmbedderStack,
    /// Sigmoid curvature eta = exp(log_eta); the log parameterization keeps
    /// eta > 0 without a projection step and makes its gradient scale-free.
    pub log_eta: f64,
    /// Sigmoid midpoint.
    pub z0: f64,
    pub stats: ClinicalStats,
    /// Normalization for the learned blocks' mode-feature inputs.
    pub mode_stats: FeatureStats,
    pub dictionary: Dictionary,
    pub filter: FilterConfig,
    pub enhance: EnhanceConfig,
    /// Frames per normalized cycle fed to the decomposition.
    pub t_norm: usize,
    /// Relative singular-value cutoff for the Koopman pseudoinverse.
    pub rcond: f64,
}

pub const OMEGA_SYMMETRY_TOL: f64 = 1e-12;

/// |log_eta| beyond this would overflow exp or flatten the sigmoid to a step.
pub const LOG_ETA_BOUND: f64 = 700.0;

impl RiskModel {
    pub fn eta(&self) -> f64 {
        self.log_eta.exp()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.q.len();
        if self.v.nrows() != h || self.v.ncols() != N_MODE_FEATURES {
            return Err(Error::validation(format!(
                "V must be {h} x {N_MODE_FEATURES}, got {:?}",
                self.v.dim()
            )));
        }
        if self.beta.len() != N_CLINICAL {
            return Err(Error::validation("beta must have length 4"));
        }
        if self.omega.dim() != (N_CLINICAL, N_CLINICAL) {
            return Err(Error::validation("omega must be 4x4"));
        }
        for i in 0..N_CLINICAL {
            for j in 0..N_CLINICAL {
                if (self.omega[[i, j]] - self.omega[[j, i]]).abs() > OMEGA_SYMMETRY_TOL {
                    return Err(Error::validation("omega must be symmetric to 1e-12"));
                }
            }
        }
        self.embed_mode.validate(N_MODE_FEATURES)?;
        self.embed_clin.validate(N_CLINICAL)?;
        if self.embed_mode.out_dim() != self.embed_clin.out_dim() {
            return Err(Error::validation("embedders must share the latent dimension"));
        }
        if !(self.log_eta.is_finite() && self.log_eta.abs() <= LOG_ETA_BOUND) {
            return Err(Error::validation(format!(
                "log_eta must be finite with |log_eta| <= {LOG_ETA_BOUND}, got {}",
                self.log_eta
            )));
        }
        if !self.z0.is_finite() {
            return Err(Error::validation("z0 must be finite"));
        }
        self.stats.validate()?;
        self.mode_stats.validate()?;
        self.filter.validate()?;
        if self.t_norm < 2 {
            return Err(Error::validation("t_norm must be >= 2"));
        }
        if !(self.rcond > 0.0 && self.rcond < 1.0) {
            return Err(Error::validation("rcond must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// swish(x) = x * logistic(x).
pub fn swish(x: f64) -> f64 {
    x * logistic(x)
}

/// Sobolev H1 norm of a spatial field on a regular grid:
/// sqrt(dy dx sum f^2 + dy dx (sum (dx f)^2 + sum (dy f)^2)), with the
/// gradients by forward differences (H-1 rows / W-1 cols of differences).
pub fn sobolev_h1(field: &Array2<f64>, spacing: (f64, f64)) -> Result<f64> {
    let (h, w) = field.dim();
    if h < 2 || w < 2 {
        return Err(Error::validation(format!(
            "sobolev_h1 needs at least a 2x2 grid, got {h}x{w}"
        )));
    }
    let (dy, dx) = spacing;
    if !(dy.is_finite() && dy > 0.0 && dx.is_finite() && dx > 0.0) {
        return Err(Error::validation(format!("grid spacing must be > 0, got ({dy}, {dx})")));
    }
    let cell = dy * dx;
    let l2: f64 = field.iter().map(|v| v * v).sum();
    let mut grad = 0.0;
    for i in 0..h {
        for j in 0..w - 1 {
            let d = (field[[i, j + 1]] - field[[i, j]]) / dx;
            grad += d * d;
        }
    }
    for i in 0..h - 1 {
        for j in 0..w {
            let d = (field[[i + 1, j]] - field[[i, j]]) / dy;
            grad += d * d;
        }
    }
    Ok((cell * l2 + cell * grad).sqrt())
}

/// Discrete temporal irregularity: sum_t |phi(t+1) - phi(t)|^2 / dt.
pub fn temporal_irregularity(trace: &[C64], dt: f64) -> Result<f64> {
    if trace.len() < 2 {
        return Err(Error::validation(format!(
            "temporal_irregularity needs at least 2 samples, got {}",
            trace.len()
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::validation(format!("dt must be > 0, got {dt}")));
    }
    Ok(trace.windows(2).map(|w| (w[1] - w[0]).norm_sqr()).sum::<f64>() / dt)
}

/// Per-mode dynamical risk: Re(mu) * h1 + p_irr. Instability (Re(mu) > 0)
/// amplifies spatial roughness; irregular traces add unconditionally.
pub fn dyn_risk(mf: &ModeFeatures) -> f64 {
    mf.re_mu * mf.h1 + mf.p_irr
}

/// Stable softmax; empty input gives an empty weight vector.
pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Attention scores s_i = Q^T swish(V x_i) over standardized features,
/// pooled across every view of the study, softmaxed into weights. Zero
/// modes -> empty vector.
pub fn attention_weights(features: &[ModeFeatures], model: &RiskModel) -> Vec<f64> {
    let scores: Vec<f64> = features
        .iter()
        .map(|mf| {
            let x = model.mode_stats.standardize(mf);
            let hidden = model.v.dot(&x).mapv(swish);
            model.q.dot(&hidden)
        })
        .collect();
    softmax(&scores)
}

/// Quadratic clinical risk beta^T p_hat + p_hat^T Omega p_hat.
pub fn clinical_risk(rec: &ClinicalRecord, model: &RiskModel) -> f64 {
    let p = model.stats.normalize(rec);
    model.beta.dot(&p) + p.dot(&model.omega.dot(&p))
}

/// Interaction term: sum_i Re(mu_i) * ||embed_mode(mf_i) - embed_clin(p_hat)||.
/// Euclidean distance in the shared latent space stands in for the geodesic.
pub fn interaction(features: &[ModeFeatures], rec: &ClinicalRecord, model: &RiskModel) -> f64 {
    if features.is_empty() {
        return 0.0;
    }
    let p = model.stats.normalize(rec);
    let ec = model.embed_clin.embed(p.view());
    features
        .iter()
        .map(|mf| {
            let x = model.mode_stats.standardize(mf);
            let em = model.embed_mode.embed(x.view());
            let dist = (&em - &ec).iter().map(|v| v * v).sum::<f64>().sqrt();
            mf.re_mu * dist
        })
        .sum()
}

/// One row of the per-mode breakdown in an AcousticScore.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeContribution {
    pub view: ViewLabel,
    pub weight: f64,
    pub dyn_risk: f64,
    pub latent_dist: f64,
}

/// Final score with its full component breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticScore {
    /// Phi(z) in [0,1].
    pub value: f64,
    /// Pre-sigmoid sum dyn + clin + inter.
    pub z: f64,
    /// Attention-weighted dynamical risk.
    #[serde(rename = "dyn")]
    pub dynamical: f64,
    /// Clinical quadratic form.
    pub clin: f64,
    /// Mode/clinical latent interaction.
    pub inter: f64,
    pub per_mode: Vec<ModeContribution>,
}

/// Fuses the per-view decompositions with the clinical record:
/// z = sum_i w_i D_i + C(p) + I, value = 1/(1 + e^{-eta (z - z0)}).
/// A study whose filtered spectrum is empty scores on clinical risk alone.
pub fn acoustic_index(
    study: &Study,
    model: &RiskModel,
    decs: &[KoopmanDecomposition],
) -> Result<AcousticScore> {
    study.clinical.validate()?;
    let mut features = Vec::new();
    for dec in decs {
        for mode in &dec.modes {
            features.push(ModeFeatures::from_mode(mode, dec.view, dec.dt)?);
        }
    }
    let weights = attention_weights(&features, model);
    let dyn_total: f64 = features
        .iter()
        .zip(weights.iter())
        .map(|(mf, w)| w * dyn_risk(mf))
        .sum();
    let clin = clinical_risk(&study.clinical, model);
    let inter = interaction(&features, &study.clinical, model);

    let p = model.stats.normalize(&study.clinical);
    let ec = model.embed_clin.embed(p.view());
    let per_mode: Vec<ModeContribution> = features
        .iter()
        .zip(weights.iter())
        .map(|(mf, &w)| {
            let x = model.mode_stats.standardize(mf);
            let em = model.embed_mode.embed(x.view());
            let dist = (&em - &ec).iter().map(|v| v * v).sum::<f64>().sqrt();
            ModeContribution {
                view: mf.view,
                weight: w,
                dyn_risk: dyn_risk(mf),
                latent_dist: dist,
            }
        })
        .collect();

    let z = dyn_total + clin + inter;
    Ok(AcousticScore {
        value: logistic(model.eta() * (z - model.z0)),
        z,
        dynamical: dyn_total,
        clin,
        inter,
        per_mode,
    })
}
