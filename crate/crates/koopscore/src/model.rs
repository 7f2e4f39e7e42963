//! Training: binary cross-entropy over the scoring pipeline with exact
//! hand-derived gradients, plain seeded mini-batch gradient descent,
//! stratified k-fold assignment, and the versioned model file format.
//!
//! EDMD features are frozen inputs here; no gradient flows into the
//! decomposition.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edmd::{mix_seed, Dictionary, FilterConfig};
use crate::error::{Error, Result};
use crate::risk::{
    dyn_risk, logistic, swish, ClinicalRecord, ClinicalStats, EmbedderStack, FeatureStats,
    ModeFeatures, RiskModel, LOG_ETA_BOUND, N_CLINICAL, N_MODE_FEATURES,
};
use crate::sequence::EnhanceConfig;

/// BCE probability clamp; gradients are zeroed where the clamp is active.
pub const BCE_CLAMP: f64 = 1e-7;
const MODEL_MAGIC: &[u8; 4] = b"KRM1";
pub const MODEL_VERSION: u32 = 1;
const MAX_HEADER_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// L2 penalty on beta, omega, Q, V, and both embedder stacks.
    pub l2_penalty: f64,
    /// Early-stop patience on validation loss, in epochs.
    pub patience: usize,
    pub k_folds: usize,
    /// Attention and embedder hidden width.
    pub hidden: usize,
    /// Shared latent dimension of the two embedders.
    pub latent: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 300,
            batch_size: 16,
            seed: 0,
            l2_penalty: 1e-4,
            patience: 30,
            k_folds: 5,
            hidden: 16,
            latent: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if !(self.l2_penalty.is_finite() && self.l2_penalty >= 0.0) {
            return Err(Error::validation("l2_penalty must be >= 0"));
        }
        if self.k_folds < 2 {
            return Err(Error::validation("k_folds must be >= 2"));
        }
        if self.hidden == 0 || self.latent == 0 {
            return Err(Error::validation("hidden and latent must be >= 1"));
        }
        Ok(())
    }
}

/// One training observation: frozen decomposition features plus the label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub patient_id: String,
    pub features: Vec<ModeFeatures>,
    pub clinical: ClinicalRecord,
    pub label: u8,
}

/// patient_id -> fold index in [0, k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_size(&self, fold: usize) -> usize {
        self.fold_of.values().filter(|&&f| f == fold).count()
    }

    pub fn ids_in(&self, fold: usize) -> Vec<&str> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Xavier-uniform initialization: beta and omega start at zero, the
/// attention and embedder weights draw from uniform(-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)); biases zero; log_eta = 0; z0 = 0.
/// The draw order is fixed (Q, V, mode stack, clinical stack).
pub fn init_model(
    cfg: &TrainConfig,
    stats: ClinicalStats,
    mode_stats: FeatureStats,
    dictionary: Dictionary,
    filter: FilterConfig,
    enhance: EnhanceConfig,
    t_norm: usize,
    rcond: f64,
) -> RiskModel {
    let h = cfg.hidden;
    let e = cfg.latent;
    let f = N_MODE_FEATURES;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x696e6974));
    let draw = |fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        rng.random::<f64>() * 2.0 * a - a
    };
    let q = Array1::from_shape_fn(h, |_| draw(h, 1, &mut rng));
    let v = Array2::from_shape_fn((h, f), |_| draw(f, h, &mut rng));
    let embed_mode = EmbedderStack {
        w1: Array2::from_shape_fn((h, f), |_| draw(f, h, &mut rng)),
        b1: Array1::zeros(h),
        w2: Array2::from_shape_fn((e, h), |_| draw(h, e, &mut rng)),
        b2: Array1::zeros(e),
    };
    let embed_clin = EmbedderStack {
        w1: Array2::from_shape_fn((h, N_CLINICAL), |_| draw(N_CLINICAL, h, &mut rng)),
        b1: Array1::zeros(h),
        w2: Array2::from_shape_fn((e, h), |_| draw(h, e, &mut rng)),
        b2: Array1::zeros(e),
    };
    RiskModel {
        q,
        v,
        beta: Array1::zeros(N_CLINICAL),
        omega: Array2::zeros((N_CLINICAL, N_CLINICAL)),
        embed_mode,
        embed_clin,
        log_eta: 0.0,
        z0: 0.0,
        stats,
        mode_stats,
        dictionary,
        filter,
        enhance,
        t_norm,
        rcond,
    }
}

fn check_label(label: u8) -> Result<f64> {
    if label > 1 {
        return Err(Error::validation(format!("label must be 0 or 1, got {label}")));
    }
    Ok(label as f64)
}

/// Pre-sigmoid sum z = dyn + clin + inter for one example.
fn pre_sigmoid(model: &RiskModel, ex: &TrainExample) -> f64 {
    let w = crate::risk::attention_weights(&ex.features, model);
    let dyn_total: f64 = ex
        .features
        .iter()
        .zip(w.iter())
        .map(|(mf, wi)| wi * dyn_risk(mf))
        .sum();
    let clin = crate::risk::clinical_risk(&ex.clinical, model);
    let inter = crate::risk::interaction(&ex.features, &ex.clinical, model);
    dyn_total + clin + inter
}

/// Unclamped predicted probability for one example.
pub fn predict(model: &RiskModel, ex: &TrainExample) -> f64 {
    logistic(model.eta() * (pre_sigmoid(model, ex) - model.z0))
}

/// Moves z0 to the mean and eta to 1 / sd of the cohort's pre-sigmoid sums
/// (population sd, floored at 1e-9). Raw dynamical sums can sit thousands
/// of units from zero at init, which parks every prediction on a clamped
/// sigmoid tail where the BCE gradient is exactly zero; recentering first
/// puts the sigmoid in its responsive band so descent has something to use.
pub fn calibrate(model: &mut RiskModel, examples: &[TrainExample]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::validation("calibrate needs a nonempty cohort"));
    }
    let zs: Vec<f64> = examples.iter().map(|ex| pre_sigmoid(model, ex)).collect();
    let n = zs.len() as f64;
    let mean = zs.iter().sum::<f64>() / n;
    let sd = (zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(mean.is_finite() && sd.is_finite()) {
        return Err(Error::numerical("pre-sigmoid sums are not finite"));
    }
    model.z0 = mean;
    model.log_eta = if sd > 1e-9 {
        (-sd.ln()).clamp(-LOG_ETA_BOUND, LOG_ETA_BOUND)
    } else {
        0.0
    };
    Ok(())
}

fn l2_terms(model: &RiskModel) -> f64 {
    model.beta.iter().map(|v| v * v).sum::<f64>()
        + model.omega.iter().map(|v| v * v).sum::<f64>()
        + model.q.iter().map(|v| v * v).sum::<f64>()
        + model.v.iter().map(|v| v * v).sum::<f64>()
        + model.embed_mode.l2_norm_sq()
        + model.embed_clin.l2_norm_sq()
}

/// Mean clamped binary cross-entropy plus the L2 penalty.
pub fn loss(model: &RiskModel, batch: &[TrainExample], l2_penalty: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::validation("loss needs a nonempty batch"));
    }
    let mut total = 0.0;
    for ex in batch {
        let y = check_label(ex.label)?;
        let v = predict(model, ex).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= y * v.ln() + (1.0 - y) * (1.0 - v).ln();
    }
    Ok(total / batch.len() as f64 + l2_penalty * l2_terms(model))
}

/// Gradient structure mirroring the trainable parameters of RiskModel.
#[derive(Debug, Clone)]
pub struct ModelGrad {
    pub q: Array1<f64>,
    pub v: Array2<f64>,
    pub beta: Array1<f64>,
    pub omega: Array2<f64>,
    pub em_w1: Array2<f64>,
    pub em_b1: Array1<f64>,
    pub em_w2: Array2<f64>,
    pub em_b2: Array1<f64>,
    pub ec_w1: Array2<f64>,
    pub ec_b1: Array1<f64>,
    pub ec_w2: Array2<f64>,
    pub ec_b2: Array1<f64>,
    pub log_eta: f64,
    pub z0: f64,
}

impl ModelGrad {
    fn zeros_like(model: &RiskModel) -> Self {
        ModelGrad {
            q: Array1::zeros(model.q.len()),
            v: Array2::zeros(model.v.dim()),
            beta: Array1::zeros(model.beta.len()),
            omega: Array2::zeros(model.omega.dim()),
            em_w1: Array2::zeros(model.embed_mode.w1.dim()),
            em_b1: Array1::zeros(model.embed_mode.b1.len()),
            em_w2: Array2::zeros(model.embed_mode.w2.dim()),
            em_b2: Array1::zeros(model.embed_mode.b2.len()),
            ec_w1: Array2::zeros(model.embed_clin.w1.dim()),
            ec_b1: Array1::zeros(model.embed_clin.b1.len()),
            ec_w2: Array2::zeros(model.embed_clin.w2.dim()),
            ec_b2: Array1::zeros(model.embed_clin.b2.len()),
            log_eta: 0.0,
            z0: 0.0,
        }
    }
}

/// Derivative of swish: logistic(x) * (1 + x * (1 - logistic(x))).
fn swish_prime(x: f64) -> f64 {
    let s = logistic(x);
    s * (1.0 + x * (1.0 - s))
}

/// Exact gradients of `loss` by backward accumulation through the scoring
/// pipeline. Mode features are constants (no gradient into the EDMD stage);
/// the latent-distance subgradient at distance 0 is taken as 0, and samples
/// where the BCE clamp is active contribute zero data gradient.
pub fn gradients(model: &RiskModel, batch: &[TrainExample], l2_penalty: f64) -> Result<ModelGrad> {
    if batch.is_empty() {
        return Err(Error::validation("gradients need a nonempty batch"));
    }
    let mut g = ModelGrad::zeros_like(model);
    let n = batch.len() as f64;

    for ex in batch {
        let y = check_label(ex.label)?;
        let k = ex.features.len();
        let xs: Vec<Array1<f64>> = ex
            .features
            .iter()
            .map(|mf| model.mode_stats.standardize(mf))
            .collect();

        // Attention forward.
        let us: Vec<Array1<f64>> = xs.iter().map(|x| model.v.dot(x)).collect();
        let gs: Vec<Array1<f64>> = us.iter().map(|u| u.mapv(swish)).collect();
        let ss: Vec<f64> = gs.iter().map(|gv| model.q.dot(gv)).collect();
        let w = crate::risk::softmax(&ss);
        let ds: Vec<f64> = ex.features.iter().map(dyn_risk).collect();
        let dyn_total: f64 = w.iter().zip(ds.iter()).map(|(wi, di)| wi * di).sum();

        // Clinical forward.
        let p = model.stats.normalize(&ex.clinical);
        let clin = model.beta.dot(&p) + p.dot(&model.omega.dot(&p));

        // Embedder forward.
        let ucs = model.embed_clin.w1.dot(&p) + &model.embed_clin.b1;
        let gcs = ucs.mapv(swish);
        let ec = model.embed_clin.w2.dot(&gcs) + &model.embed_clin.b2;
        let ums: Vec<Array1<f64>> = xs
            .iter()
            .map(|x| model.embed_mode.w1.dot(x) + &model.embed_mode.b1)
            .collect();
        let gms: Vec<Array1<f64>> = ums.iter().map(|u| u.mapv(swish)).collect();
        let ems: Vec<Array1<f64>> = gms
            .iter()
            .map(|gm| model.embed_mode.w2.dot(gm) + &model.embed_mode.b2)
            .collect();
        let deltas: Vec<Array1<f64>> = ems.iter().map(|em| em - &ec).collect();
        let dists: Vec<f64> = deltas
            .iter()
            .map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let inter: f64 = ex
            .features
            .iter()
            .zip(dists.iter())
            .map(|(mf, di)| mf.re_mu * di)
            .sum();

        let z = dyn_total + clin + inter;
        let eta = model.eta();
        let a = eta * (z - model.z0);
        let v = logistic(a);

        // d loss / d a; zero where the clamp flattens the loss.
        let da = if v <= BCE_CLAMP || v >= 1.0 - BCE_CLAMP {
            0.0
        } else {
            (v - y) / n
        };
        if da == 0.0 {
            continue;
        }

        // d a / d log_eta = eta (z - z0) by the chain rule through exp.
        g.log_eta += da * (z - model.z0) * eta;
        g.z0 -= da * eta;
        let dz = da * eta;

        // Clinical block: z is linear in beta and omega.
        for j in 0..N_CLINICAL {
            g.beta[j] += dz * p[j];
            for l in 0..N_CLINICAL {
                g.omega[[j, l]] += dz * p[j] * p[l];
            }
        }

        // Attention block: d dyn / d s_i = w_i (D_i - dyn).
        for i in 0..k {
            let dsi = dz * w[i] * (ds[i] - dyn_total);
            if dsi == 0.0 {
                continue;
            }
            for a_idx in 0..model.q.len() {
                g.q[a_idx] += dsi * gs[i][a_idx];
                let du = dsi * model.q[a_idx] * swish_prime(us[i][a_idx]);
                for b_idx in 0..N_MODE_FEATURES {
                    g.v[[a_idx, b_idx]] += du * xs[i][b_idx];
                }
            }
        }

        // Interaction block.
        let e_dim = ec.len();
        let mut dec_acc = Array1::<f64>::zeros(e_dim);
        for i in 0..k {
            if dists[i] == 0.0 {
                continue; // subgradient 0 at the cusp
            }
            let scale = dz * ex.features[i].re_mu / dists[i];
            if scale == 0.0 {
                continue;
            }
            let dem: Array1<f64> = deltas[i].mapv(|d| scale * d);
            dec_acc -= &dem;
            // Mode stack backward.
            for r in 0..e_dim {
                g.em_b2[r] += dem[r];
                for c in 0..gms[i].len() {
                    g.em_w2[[r, c]] += dem[r] * gms[i][c];
                }
            }
            let dgm = model.embed_mode.w2.t().dot(&dem);
            for r in 0..dgm.len() {
                let dum = dgm[r] * swish_prime(ums[i][r]);
                g.em_b1[r] += dum;
                for c in 0..N_MODE_FEATURES {
                    g.em_w1[[r, c]] += dum * xs[i][c];
                }
            }
        }
        // Clinical stack backward, once with the accumulated delta.
        if dec_acc.iter().any(|&v| v != 0.0) {
            for r in 0..e_dim {
                g.ec_b2[r] += dec_acc[r];
                for c in 0..gcs.len() {
                    g.ec_w2[[r, c]] += dec_acc[r] * gcs[c];
                }
            }
            let dgc = model.embed_clin.w2.t().dot(&dec_acc);
            for r in 0..dgc.len() {
                let duc = dgc[r] * swish_prime(ucs[r]);
                g.ec_b1[r] += duc;
                for c in 0..N_CLINICAL {
                    g.ec_w1[[r, c]] += duc * p[c];
                }
            }
        }
    }

    // L2 penalty: d/dtheta l2 * ||theta||^2 = 2 l2 theta for every
    // regularized block (eta and z0 are calibration terms, not penalized).
    let reg = 2.0 * l2_penalty;
    if reg != 0.0 {
        g.q.scaled_add(reg, &model.q);
        g.v.scaled_add(reg, &model.v);
        g.beta.scaled_add(reg, &model.beta);
        g.omega.scaled_add(reg, &model.omega);
        g.em_w1.scaled_add(reg, &model.embed_mode.w1);
        g.em_b1.scaled_add(reg, &model.embed_mode.b1);
        g.em_w2.scaled_add(reg, &model.embed_mode.w2);
        g.em_b2.scaled_add(reg, &model.embed_mode.b2);
        g.ec_w1.scaled_add(reg, &model.embed_clin.w1);
        g.ec_b1.scaled_add(reg, &model.embed_clin.b1);
        g.ec_w2.scaled_add(reg, &model.embed_clin.w2);
        g.ec_b2.scaled_add(reg, &model.embed_clin.b2);
    }
    Ok(g)
}

fn apply_update(model: &mut RiskModel, g: &ModelGrad, lr: f64) {
    model.q.scaled_add(-lr, &g.q);
    model.v.scaled_add(-lr, &g.v);
    model.beta.scaled_add(-lr, &g.beta);
    model.omega.scaled_add(-lr, &g.omega);
    model.embed_mode.w1.scaled_add(-lr, &g.em_w1);
    model.embed_mode.b1.scaled_add(-lr, &g.em_b1);
    model.embed_mode.w2.scaled_add(-lr, &g.em_w2);
    model.embed_mode.b2.scaled_add(-lr, &g.em_b2);
    model.embed_clin.w1.scaled_add(-lr, &g.ec_w1);
    model.embed_clin.b1.scaled_add(-lr, &g.ec_b1);
    model.embed_clin.w2.scaled_add(-lr, &g.ec_w2);
    model.embed_clin.b2.scaled_add(-lr, &g.ec_b2);
    model.log_eta -= lr * g.log_eta;
    model.z0 -= lr * g.z0;
    // Invariants maintained after every step.
    let sym = (&model.omega + &model.omega.t()) * 0.5;
    model.omega = sym;
    model.log_eta = model.log_eta.clamp(-LOG_ETA_BOUND, LOG_ETA_BOUND);
}

/// Seeded mini-batch gradient descent, after a one-shot `calibrate` of
/// (eta, z0) against the training cohort. With a validation set, returns
/// the parameter state that achieved the best validation loss and stops
/// early after `patience` epochs without improvement; otherwise runs all
/// epochs and returns the final state. The history holds the
/// full-training-set loss after each epoch.
pub fn train(
    examples: &[TrainExample],
    val: Option<&[TrainExample]>,
    mut model: RiskModel,
    cfg: &TrainConfig,
) -> Result<(RiskModel, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::validation("train needs a nonempty cohort"));
    }
    let mut has = [false, false];
    for ex in examples {
        check_label(ex.label)?;
        has[ex.label as usize] = true;
    }
    if !(has[0] && has[1]) {
        return Err(Error::validation("training cohort must contain both classes"));
    }
    calibrate(&mut model, examples)?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7368756666));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_state = model.clone();
    let mut stale = 0usize;

    for _epoch in 0..cfg.epochs {
        // Fisher-Yates shuffle.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let g = gradients(&model, &batch, cfg.l2_penalty)?;
            apply_update(&mut model, &g, cfg.learning_rate);
        }
        history.push(loss(&model, examples, cfg.l2_penalty)?);
        if let Some(vset) = val {
            let vl = loss(&model, vset, cfg.l2_penalty)?;
            if vl < best_val {
                best_val = vl;
                best_state = model.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    let final_model = if val.is_some() { best_state } else { model };
    Ok((final_model, history))
}

/// Label-stratified, seeded fold assignment with sizes within 1 of each
/// other: each label group is shuffled then dealt by a round-robin counter
/// that continues across groups.
pub fn kfold_split(cohort: &[(String, u8)], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::validation("k must be >= 2"));
    }
    if cohort.len() < k {
        return Err(Error::validation(format!(
            "cannot split {} patients into {k} folds",
            cohort.len()
        )));
    }
    let mut groups: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    let mut seen = BTreeMap::new();
    for (id, label) in cohort {
        check_label(*label)?;
        if seen.insert(id.as_str(), ()).is_some() {
            return Err(Error::validation(format!("duplicate patient id {id}")));
        }
        groups[*label as usize].push(id);
    }
    let mut fold_of = BTreeMap::new();
    let mut counter = 0usize;
    for (label, group) in groups.iter_mut().enumerate() {
        group.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x666f6c64 + label as u64));
        for i in (1..group.len()).rev() {
            let j = rng.random_range(0..=i);
            group.swap(i, j);
        }
        for id in group.iter() {
            fold_of.insert(id.to_string(), counter % k);
            counter += 1;
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    h: usize,
    f: usize,
    e: usize,
    em_hidden: usize,
    ec_hidden: usize,
    log_eta: f64,
    z0: f64,
    t_norm: usize,
    rcond: f64,
    stats: ClinicalStats,
    mode_stats: FeatureStats,
    filter: FilterConfig,
    enhance: EnhanceConfig,
    dict_kind: crate::edmd::DictKind,
    dict_height: usize,
    dict_width: usize,
    dict_r_eff: usize,
    dict_rank_limited: bool,
    dict_n_centers: usize,
    dict_rbf_width: Option<f64>,
}

fn push_block(buf: &mut Vec<f64>, it: impl IntoIterator<Item = f64>) {
    buf.extend(it);
}

/// Serializes a model: magic "KRM1", one JSON header line, then all
/// parameter and dictionary arrays as little-endian f64 in a fixed order
/// (q, v, beta, omega, mode stack, clinical stack, dictionary mean,
/// components, singular values, rbf centers).
pub fn write_model<W: Write>(w: &mut W, model: &RiskModel) -> Result<()> {
    model.validate()?;
    w.write_all(MODEL_MAGIC)?;
    let dict = &model.dictionary;
    let header = ModelHeader {
        version: MODEL_VERSION,
        h: model.q.len(),
        f: N_MODE_FEATURES,
        e: model.embed_mode.out_dim(),
        em_hidden: model.embed_mode.w1.nrows(),
        ec_hidden: model.embed_clin.w1.nrows(),
        log_eta: model.log_eta,
        z0: model.z0,
        t_norm: model.t_norm,
        rcond: model.rcond,
        stats: model.stats.clone(),
        mode_stats: model.mode_stats.clone(),
        filter: model.filter,
        enhance: model.enhance.clone(),
        dict_kind: dict.kind().clone(),
        dict_height: dict.height(),
        dict_width: dict.width(),
        dict_r_eff: dict.r_eff(),
        dict_rank_limited: dict.rank_limited(),
        dict_n_centers: dict.centers().map_or(0, |c| c.nrows()),
        dict_rbf_width: dict.rbf_width(),
    };
    let mut hjson = serde_json::to_vec(&header)?;
    hjson.push(b'\n');
    w.write_all(&hjson)?;

    let mut vals: Vec<f64> = Vec::new();
    push_block(&mut vals, model.q.iter().cloned());
    push_block(&mut vals, model.v.iter().cloned());
    push_block(&mut vals, model.beta.iter().cloned());
    push_block(&mut vals, model.omega.iter().cloned());
    push_block(&mut vals, model.embed_mode.w1.iter().cloned());
    push_block(&mut vals, model.embed_mode.b1.iter().cloned());
    push_block(&mut vals, model.embed_mode.w2.iter().cloned());
    push_block(&mut vals, model.embed_mode.b2.iter().cloned());
    push_block(&mut vals, model.embed_clin.w1.iter().cloned());
    push_block(&mut vals, model.embed_clin.b1.iter().cloned());
    push_block(&mut vals, model.embed_clin.w2.iter().cloned());
    push_block(&mut vals, model.embed_clin.b2.iter().cloned());
    push_block(&mut vals, dict.mean().iter().cloned());
    push_block(&mut vals, dict.components().iter().cloned());
    push_block(&mut vals, dict.singular_values().iter().cloned());
    if let Some(c) = dict.centers() {
        push_block(&mut vals, c.iter().cloned());
    }
    let mut bytes = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<RiskModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| map_eof(e, 4, 0))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MODEL_MAGIC
        )));
    }
    let mut header_bytes = Vec::new();
    let mut one = [0u8; 1];
    loop {
        r.read_exact(&mut one)
            .map_err(|_| Error::format("unterminated model header"))?;
        if one[0] == b'\n' {
            break;
        }
        header_bytes.push(one[0]);
        if header_bytes.len() > MAX_HEADER_BYTES {
            return Err(Error::format("model header exceeds size bound"));
        }
    }
    let header: ModelHeader = serde_json::from_slice(&header_bytes)?;
    if header.version != MODEL_VERSION {
        return Err(Error::Version {
            found: header.version,
            supported: MODEL_VERSION,
        });
    }
    if header.f != N_MODE_FEATURES {
        return Err(Error::format(format!(
            "model expects {} mode features, this build uses {}",
            header.f, N_MODE_FEATURES
        )));
    }

    let p = header
        .dict_height
        .checked_mul(header.dict_width)
        .ok_or_else(|| Error::format("dictionary grid size overflow"))?;
    let sizes = [
        header.h,
        header.h * header.f,
        N_CLINICAL,
        N_CLINICAL * N_CLINICAL,
        header.em_hidden * header.f,
        header.em_hidden,
        header.e * header.em_hidden,
        header.e,
        header.ec_hidden * N_CLINICAL,
        header.ec_hidden,
        header.e * header.ec_hidden,
        header.e,
        p,
        header.dict_r_eff * p,
        header.dict_r_eff,
        header.dict_n_centers * header.dict_r_eff,
    ];
    let total: usize = sizes.iter().sum();
    let expected_bytes = total * 8;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() < expected_bytes {
        return Err(Error::Truncated {
            expected: expected_bytes,
            actual: payload.len(),
        });
    }
    if payload.len() > expected_bytes {
        return Err(Error::format(format!(
            "{} trailing bytes after model payload",
            payload.len() - expected_bytes
        )));
    }
    let mut vals = Vec::with_capacity(total);
    for chunk in payload.chunks_exact(8) {
        vals.push(f64::from_le_bytes(chunk.try_into().expect("chunk of 8")));
    }
    let mut off = 0usize;
    let mut take = |len: usize| {
        let s = vals[off..off + len].to_vec();
        off += len;
        s
    };
    let q = Array1::from_vec(take(sizes[0]));
    let v = Array2::from_shape_vec((header.h, header.f), take(sizes[1])).expect("sized");
    let beta = Array1::from_vec(take(sizes[2]));
    let omega =
        Array2::from_shape_vec((N_CLINICAL, N_CLINICAL), take(sizes[3])).expect("sized");
    let em_w1 =
        Array2::from_shape_vec((header.em_hidden, header.f), take(sizes[4])).expect("sized");
    let em_b1 = Array1::from_vec(take(sizes[5]));
    let em_w2 =
        Array2::from_shape_vec((header.e, header.em_hidden), take(sizes[6])).expect("sized");
    let em_b2 = Array1::from_vec(take(sizes[7]));
    let ec_w1 =
        Array2::from_shape_vec((header.ec_hidden, N_CLINICAL), take(sizes[8])).expect("sized");
    let ec_b1 = Array1::from_vec(take(sizes[9]));
    let ec_w2 =
        Array2::from_shape_vec((header.e, header.ec_hidden), take(sizes[10])).expect("sized");
    let ec_b2 = Array1::from_vec(take(sizes[11]));
    let mean = Array1::from_vec(take(sizes[12]));
    let components =
        Array2::from_shape_vec((header.dict_r_eff, p), take(sizes[13])).expect("sized");
    let singular = take(sizes[14]);
    let centers = if header.dict_n_centers > 0 {
        Some(
            Array2::from_shape_vec(
                (header.dict_n_centers, header.dict_r_eff),
                take(sizes[15]),
            )
            .expect("sized"),
        )
    } else {
        None
    };

    let dictionary = Dictionary::from_parts(
        header.dict_kind,
        header.dict_height,
        header.dict_width,
        mean,
        components,
        singular,
        header.dict_rank_limited,
        centers,
        header.dict_rbf_width,
    )?;
    let model = RiskModel {
        q,
        v,
        beta,
        omega,
        embed_mode: EmbedderStack {
            w1: em_w1,
            b1: em_b1,
            w2: em_w2,
            b2: em_b2,
        },
        embed_clin: EmbedderStack {
            w1: ec_w1,
            b1: ec_b1,
            w2: ec_w2,
            b2: ec_b2,
        },
        log_eta: header.log_eta,
        z0: header.z0,
        stats: header.stats,
        mode_stats: header.mode_stats,
        dictionary,
        filter: header.filter,
        enhance: header.enhance,
        t_norm: header.t_norm,
        rcond: header.rcond,
    };
    model.validate()?;
    Ok(model)
}

fn map_eof(e: io::Error, expected: usize, actual: usize) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Truncated { expected, actual }
    } else {
        Error::Io(e)
    }
}

pub fn save_model(model: &RiskModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<RiskModel> {
    let mut r = BufReader::new(File::open(path)?);
    read_model(&mut r)
}

/// Trainable parameters flattened in the documented block order
/// (q, v, beta, omega, mode stack, clinical stack, eta, z0). Used by the
/// finite-difference gradient checks.
pub fn flatten_params(model: &RiskModel) -> Vec<f64> {
    let mut out = Vec::new();
    push_block(&mut out, model.q.iter().cloned());
    push_block(&mut out, model.v.iter().cloned());
    push_block(&mut out, model.beta.iter().cloned());
    push_block(&mut out, model.omega.iter().cloned());
    push_block(&mut out, model.embed_mode.w1.iter().cloned());
    push_block(&mut out, model.embed_mode.b1.iter().cloned());
    push_block(&mut out, model.embed_mode.w2.iter().cloned());
    push_block(&mut out, model.embed_mode.b2.iter().cloned());
    push_block(&mut out, model.embed_clin.w1.iter().cloned());
    push_block(&mut out, model.embed_clin.b1.iter().cloned());
    push_block(&mut out, model.embed_clin.w2.iter().cloned());
    push_block(&mut out, model.embed_clin.b2.iter().cloned());
    out.push(model.log_eta);
    out.push(model.z0);
    out
}

/// Inverse of `flatten_params`.
pub fn assign_params(model: &mut RiskModel, params: &[f64]) -> Result<()> {
    let want = flatten_params(model).len();
    if params.len() != want {
        return Err(Error::validation(format!(
            "expected {want} parameters, got {}",
            params.len()
        )));
    }
    let mut off = 0usize;
    let fill1 = |a: &mut Array1<f64>, off: &mut usize| {
        for v in a.iter_mut() {
            *v = params[*off];
            *off += 1;
        }
    };
    let fill2 = |a: &mut Array2<f64>, off: &mut usize| {
        for v in a.iter_mut() {
            *v = params[*off];
            *off += 1;
        }
    };
    fill1(&mut model.q, &mut off);
    fill2(&mut model.v, &mut off);
    fill1(&mut model.beta, &mut off);
    fill2(&mut model.omega, &mut off);
    fill2(&mut model.embed_mode.w1, &mut off);
    fill1(&mut model.embed_mode.b1, &mut off);
    fill2(&mut model.embed_mode.w2, &mut off);
    fill1(&mut model.embed_mode.b2, &mut off);
    fill2(&mut model.embed_clin.w1, &mut off);
    fill1(&mut model.embed_clin.b1, &mut off);
    fill2(&mut model.embed_clin.w2, &mut off);
    fill1(&mut model.embed_clin.b2, &mut off);
    model.log_eta = params[off];
    model.z0 = params[off + 1];
    Ok(())
}

/// Gradients flattened in the same order as `flatten_params`.
pub fn flatten_grads(g: &ModelGrad) -> Vec<f64> {
    let mut out = Vec::new();
    push_block(&mut out, g.q.iter().cloned());
    push_block(&mut out, g.v.iter().cloned());
    push_block(&mut out, g.beta.iter().cloned());
    push_block(&mut out, g.omega.iter().cloned());
    push_block(&mut out, g.em_w1.iter().cloned());
    push_block(&mut out, g.em_b1.iter().cloned());
    push_block(&mut out, g.em_w2.iter().cloned());
    push_block(&mut out, g.em_b2.iter().cloned());
    push_block(&mut out, g.ec_w1.iter().cloned());
    push_block(&mut out, g.ec_b1.iter().cloned());
    push_block(&mut out, g.ec_w2.iter().cloned());
    push_block(&mut out, g.ec_b2.iter().cloned());
    out.push(g.log_eta);
    out.push(g.z0);
    out
}
