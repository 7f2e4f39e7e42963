//! Extended Dynamic Mode Decomposition over a fitted observable dictionary.
//!
//! A [`Dictionary`] lifts each frame x_t into m observables. From the lifted
//! snapshot matrices, `koopman_matrix` solves K = Psi' Psi^+ by truncated-SVD
//! pseudoinverse and `decompose` eigendecomposes K^T (left eigenvectors, so
//! eigenfunction traces evolve linearly: phi(x_{t+1}) = lambda phi(x_t)).

use ndarray::{s, Array1, Array2, ArrayView1};
use ndarray_linalg::{Eig, Eigh, SVD, UPLO};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{FrameSequence, ViewLabel};

pub type C64 = Complex64;

/// Relative singular-value cutoff when inverting Psi. See `koopman_matrix`.
pub const DEFAULT_RCOND: f64 = 1e-10;
/// Relative eigenpair residual above which `decompose` refuses the result.
const EIG_RESIDUAL_TOL: f64 = 1e-6;
/// Eigenvalues below this relative magnitude are rank-deficiency artifacts
/// of the pseudoinverse (K has rank <= rank(Psi)) and carry no dynamics.
const ZERO_LAMBDA_TOL: f64 = 1e-12;
/// |Im lambda| below this is treated as a real eigenvalue during pairing.
const PAIR_IM_TOL: f64 = 1e-12;
/// Relative distance within which lambda_j is accepted as conj(lambda_i).
const PAIR_MATCH_TOL: f64 = 1e-8;
/// Gram-method PCA is used up to this many pooled frames; beyond it the
/// seeded randomized range finder streams over the sequences instead.
const EXACT_PCA_MAX_FRAMES: usize = 1024;
const RANGE_OVERSAMPLE: usize = 8;

/// Observable dictionary family. `r` is the requested PCA rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DictKind {
    PcaLinear { r: usize },
    PcaRbf { r: usize, n_centers: usize, width: Option<f64> },
    PcaPoly { r: usize, degree: usize },
}

impl DictKind {
    pub fn r(&self) -> usize {
        match self {
            DictKind::PcaLinear { r }
            | DictKind::PcaRbf { r, .. }
            | DictKind::PcaPoly { r, .. } => *r,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.r() == 0 {
            return Err(Error::validation("dictionary rank r must be >= 1"));
        }
        match self {
            DictKind::PcaRbf { n_centers, width, .. } => {
                if *n_centers == 0 {
                    return Err(Error::validation("rbf dictionary needs n_centers >= 1"));
                }
                if let Some(w) = width {
                    if !(w.is_finite() && *w > 0.0) {
                        return Err(Error::validation(format!("rbf width must be > 0, got {w}")));
                    }
                }
            }
            DictKind::PcaPoly { degree, .. } => {
                if *degree == 0 {
                    return Err(Error::validation("poly dictionary needs degree >= 1"));
                }
            }
            DictKind::PcaLinear { .. } => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DictConfig {
    #[serde(flatten)]
    pub kind: DictKind,
    /// Seeds the randomized range finder and the rbf k-means.
    pub seed: u64,
}

impl Default for DictConfig {
    fn default() -> Self {
        DictConfig {
            kind: DictKind::PcaLinear { r: 24 },
            seed: 0,
        }
    }
}

impl DictConfig {
    /// Linear dictionary of rank r with the default seed.
    pub fn default_linear(r: usize) -> Self {
        DictConfig {
            kind: DictKind::PcaLinear { r },
            seed: 0,
        }
    }
}

/// Fitted observable dictionary: a PCA basis over flattened frames plus the
/// family-specific parameters (rbf centers/width, poly exponents).
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    kind: DictKind,
    height: usize,
    width: usize,
    /// Mean flattened training frame, length H*W.
    mean: Array1<f64>,
    /// r_eff x (H*W), rows orthonormal, ordered by decreasing variance.
    components: Array2<f64>,
    /// Singular values of the centered training data for the kept rows.
    singular_values: Vec<f64>,
    /// True when the requested r exceeded the available data rank.
    rank_limited: bool,
    /// k-means centers in PCA coordinates (rbf kind only), n_centers x r_eff.
    centers: Option<Array2<f64>>,
    rbf_width: Option<f64>,
}

impl Dictionary {
    pub fn kind(&self) -> &DictKind {
        &self.kind
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn components(&self) -> &Array2<f64> {
        &self.components
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn rank_limited(&self) -> bool {
        self.rank_limited
    }

    pub fn centers(&self) -> Option<&Array2<f64>> {
        self.centers.as_ref()
    }

    pub fn rbf_width(&self) -> Option<f64> {
        self.rbf_width
    }

    /// Effective PCA rank actually kept.
    pub fn r_eff(&self) -> usize {
        self.components.nrows()
    }

    /// Dictionary size m (number of observables, constant included).
    pub fn m(&self) -> usize {
        match &self.kind {
            DictKind::PcaLinear { .. } => self.r_eff() + 1,
            DictKind::PcaRbf { .. } => self.centers.as_ref().map_or(0, |c| c.nrows()) + 1,
            DictKind::PcaPoly { degree, .. } => n_multi_indices(self.r_eff(), *degree),
        }
    }

    /// Reassembles a dictionary from stored state (model deserialization).
    pub fn from_parts(
        kind: DictKind,
        height: usize,
        width: usize,
        mean: Array1<f64>,
        components: Array2<f64>,
        singular_values: Vec<f64>,
        rank_limited: bool,
        centers: Option<Array2<f64>>,
        rbf_width: Option<f64>,
    ) -> Result<Self> {
        kind.validate()?;
        if mean.len() != height * width {
            return Err(Error::validation("dictionary mean length mismatch"));
        }
        if components.ncols() != height * width || components.nrows() == 0 {
            return Err(Error::validation("dictionary component shape mismatch"));
        }
        if singular_values.len() != components.nrows() {
            return Err(Error::validation("dictionary singular value count mismatch"));
        }
        if let DictKind::PcaRbf { .. } = kind {
            match (&centers, rbf_width) {
                (Some(c), Some(w)) if w > 0.0 => {
                    if c.ncols() != components.nrows() {
                        return Err(Error::validation("rbf center dimension mismatch"));
                    }
                }
                _ => return Err(Error::validation("rbf dictionary requires centers and width")),
            }
        }
        Ok(Dictionary {
            kind,
            height,
            width,
            mean,
            components,
            singular_values,
            rank_limited,
            centers,
            rbf_width,
        })
    }

}

/// Lifted snapshot pair: column j of `psi` is Psi(x_j) and column j of
/// `psi_prime` is Psi(x_{j+1}), j = 0..T-2.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrices {
    pub psi: Array2<f64>,
    pub psi_prime: Array2<f64>,
    pub dt: f64,
}

impl SnapshotMatrices {
    pub fn new(psi: Array2<f64>, psi_prime: Array2<f64>, dt: f64) -> Result<Self> {
        if psi.dim() != psi_prime.dim() {
            return Err(Error::validation(format!(
                "snapshot matrices must share shape, got {:?} vs {:?}",
                psi.dim(),
                psi_prime.dim()
            )));
        }
        if psi.ncols() == 0 || psi.nrows() == 0 {
            return Err(Error::validation("snapshot matrices must be nonempty"));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::validation(format!("dt must be > 0, got {dt}")));
        }
        Ok(SnapshotMatrices { psi, psi_prime, dt })
    }

    pub fn m(&self) -> usize {
        self.psi.nrows()
    }

    pub fn n_pairs(&self) -> usize {
        self.psi.ncols()
    }
}

/// One retained Koopman mode.
#[derive(Debug, Clone)]
pub struct KoopmanMode {
    /// Discrete-time eigenvalue of K.
    pub lambda: C64,
    /// Continuous-time eigenvalue ln(lambda)/dt, principal branch.
    pub mu: C64,
    /// Left eigenvector (eigenvector of K^T), unit norm, phase-fixed.
    pub xi: Vec<C64>,
    /// Eigenfunction trace phi(x_t) = xi^T Psi(x_t) over the full sequence.
    pub phi_trace: Vec<C64>,
    /// Real spatial mode field (H x W), least-squares regression of the
    /// flattened frames onto the eigenfunction trace.
    pub field: Array2<f64>,
    /// mean_t |phi(x_t)|^2 * ||field||_F^2.
    pub energy: f64,
}

/// Spectral summary of one sequence, modes sorted by non-increasing energy.
#[derive(Debug, Clone)]
pub struct KoopmanDecomposition {
    pub view: ViewLabel,
    pub dt: f64,
    pub height: usize,
    pub width: usize,
    pub modes: Vec<KoopmanMode>,
    /// Set when filtering removed every mode; scored as zero dynamical risk.
    pub degenerate: bool,
}

/// Spectral filter policy applied after `decompose`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Keep modes with energy >= energy_floor * max energy.
    pub energy_floor: f64,
    /// Keep modes with |lambda| >= modulus_floor.
    pub modulus_floor: f64,
    /// Keep at most k_max modes by energy.
    pub k_max: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            energy_floor: 1e-3,
            modulus_floor: 0.1,
            k_max: 12,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.energy_floor.is_finite() && self.energy_floor >= 0.0) {
            return Err(Error::validation("energy_floor must be >= 0"));
        }
        if !(self.modulus_floor.is_finite() && self.modulus_floor >= 0.0) {
            return Err(Error::validation("modulus_floor must be >= 0"));
        }
        if self.k_max == 0 {
            return Err(Error::validation("k_max must be >= 1"));
        }
        Ok(())
    }
}

/// Fits the PCA basis (and family parameters) on the pooled, mean-centered
/// flattened frames of the training sequences. If the requested rank exceeds
/// the data rank, r is reduced and `rank_limited` is set instead of failing.
pub fn fit_dictionary(seqs: &[&FrameSequence], cfg: &DictConfig) -> Result<Dictionary> {
    cfg.kind.validate()?;
    if seqs.is_empty() {
        return Err(Error::validation("fit_dictionary needs at least one sequence"));
    }
    let h = seqs[0].height();
    let w = seqs[0].width();
    for s in seqs {
        if s.height() != h || s.width() != w {
            return Err(Error::validation(format!(
                "all sequences must share one shape; got {}x{} and {}x{}",
                h,
                w,
                s.height(),
                s.width()
            )));
        }
    }
    let p = h * w;
    let n_total: usize = seqs.iter().map(|s| s.n_frames()).sum();
    let r_req = cfg.kind.r();

    let (mean, components, singular_values) = if n_total <= EXACT_PCA_MAX_FRAMES {
        pca_exact(seqs, p, n_total, r_req)?
    } else {
        pca_randomized(seqs, p, n_total, r_req, cfg.seed)?
    };
    let r_eff = components.nrows();
    let rank_limited = r_eff < r_req;

    let (centers, rbf_width) = match &cfg.kind {
        DictKind::PcaRbf { n_centers, width, .. } => {
            if *n_centers > n_total {
                return Err(Error::validation(format!(
                    "n_centers {} exceeds pooled frame count {}",
                    n_centers, n_total
                )));
            }
            let coords = pooled_coords(seqs, &mean, &components);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x6b6d65616e73));
            let centers = kmeans(&coords, *n_centers, &mut rng);
            let width = match width {
                Some(w) => *w,
                None => {
                    let w = median_pairwise_distance(&centers);
                    if !(w.is_finite() && w > 0.0) {
                        return Err(Error::numerical(
                            "cannot infer rbf width: centers are not distinct; set width explicitly",
                        ));
                    }
                    w
                }
            };
            (Some(centers), Some(width))
        }
        _ => (None, None),
    };

    Ok(Dictionary {
        kind: cfg.kind.clone(),
        height: h,
        width: w,
        mean,
        components,
        singular_values,
        rank_limited,
        centers,
        rbf_width,
    })
}

/// Gram-method PCA for small pooled frame counts.
fn pca_exact(
    seqs: &[&FrameSequence],
    p: usize,
    n: usize,
    r_req: usize,
) -> Result<(Array1<f64>, Array2<f64>, Vec<f64>)> {
    let mut x = Array2::<f64>::zeros((n, p));
    let mut row = 0;
    for seq in seqs {
        for t in 0..seq.n_frames() {
            for (j, &v) in seq.frame(t).iter().enumerate() {
                x[[row, j]] = v as f64;
            }
            row += 1;
        }
    }
    let mean = x.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    for mut r in x.rows_mut() {
        r -= &mean;
    }
    let gram = x.dot(&x.t());
    let (evals, evecs) = gram
        .eigh(UPLO::Lower)
        .map_err(|e| Error::numerical(format!("gram eigendecomposition failed: {e}")))?;
    let max_eval = evals.iter().cloned().fold(0.0f64, f64::max);
    if max_eval <= 0.0 {
        return Err(Error::numerical("training frames have zero variance"));
    }
    let tol = max_eval * 1e-12;
    let mut kept: Vec<(f64, usize)> = Vec::new();
    for i in (0..n).rev() {
        if evals[i] > tol {
            kept.push((evals[i], i));
        }
    }
    let r_eff = r_req.min(kept.len());
    let mut components = Array2::<f64>::zeros((r_eff, p));
    let mut singulars = Vec::with_capacity(r_eff);
    for (out, &(ev, idx)) in kept.iter().take(r_eff).enumerate() {
        let u = evecs.column(idx);
        let v = u.dot(&x);
        let scale = 1.0 / ev.sqrt();
        for j in 0..p {
            components[[out, j]] = v[j] * scale;
        }
        singulars.push(ev.sqrt());
    }
    orthonormalize_rows(&mut components);
    Ok((mean, components, singulars))
}

/// Seeded randomized range-finder PCA streaming over the sequences; used
/// when the pooled frame count is too large for the Gram method.
fn pca_randomized(
    seqs: &[&FrameSequence],
    p: usize,
    n: usize,
    r_req: usize,
    seed: u64,
) -> Result<(Array1<f64>, Array2<f64>, Vec<f64>)> {
    // Pass 0: mean frame.
    let mut mean = Array1::<f64>::zeros(p);
    for seq in seqs {
        for t in 0..seq.n_frames() {
            for (j, &v) in seq.frame(t).iter().enumerate() {
                mean[j] += v as f64;
            }
        }
    }
    mean /= n as f64;

    let l = (r_req + RANGE_OVERSAMPLE).min(n).min(p);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x72616e6765));
    let mut omega = Array2::<f64>::zeros((n, l));
    for i in 0..n {
        for j in 0..l {
            omega[[i, j]] = StandardNormal.sample(&mut rng);
        }
    }

    // Y = A^T Omega with A = centered frames (n x p), accumulated per sequence.
    let mut y = Array2::<f64>::zeros((p, l));
    let mut row = 0;
    for seq in seqs {
        let f = centered_block(seq, &mean);
        let om = omega.slice(s![row..row + f.nrows(), ..]);
        y = y + f.t().dot(&om);
        row += f.nrows();
    }
    let mut q = orthonormal_columns(y);

    // One power iteration sharpens the subspace on noisy data.
    let mut z = Array2::<f64>::zeros((n, q.ncols()));
    let mut row = 0;
    for seq in seqs {
        let f = centered_block(seq, &mean);
        let zb = f.dot(&q);
        z.slice_mut(s![row..row + zb.nrows(), ..]).assign(&zb);
        row += zb.nrows();
    }
    let mut y2 = Array2::<f64>::zeros((p, z.ncols()));
    let mut row = 0;
    for seq in seqs {
        let f = centered_block(seq, &mean);
        let zb = z.slice(s![row..row + f.nrows(), ..]);
        y2 = y2 + f.t().dot(&zb);
        row += f.nrows();
    }
    q = orthonormal_columns(y2);
    let l_eff = q.ncols();
    if l_eff == 0 {
        return Err(Error::numerical("training frames have zero variance"));
    }

    // B = Q^T A^T (l x n), then the small symmetric eigenproblem of B B^T.
    let mut b = Array2::<f64>::zeros((l_eff, n));
    let mut row = 0;
    for seq in seqs {
        let f = centered_block(seq, &mean);
        let bb = f.dot(&q);
        b.slice_mut(s![.., row..row + bb.nrows()]).assign(&bb.t());
        row += bb.nrows();
    }
    let c = b.dot(&b.t());
    let (evals, evecs) = c
        .eigh(UPLO::Lower)
        .map_err(|e| Error::numerical(format!("range eigendecomposition failed: {e}")))?;
    let max_eval = evals.iter().cloned().fold(0.0f64, f64::max);
    if max_eval <= 0.0 {
        return Err(Error::numerical("training frames have zero variance"));
    }
    let tol = max_eval * 1e-12;
    let mut kept: Vec<(f64, usize)> = Vec::new();
    for i in (0..l_eff).rev() {
        if evals[i] > tol {
            kept.push((evals[i], i));
        }
    }
    let r_eff = r_req.min(kept.len());
    let mut components = Array2::<f64>::zeros((r_eff, p));
    let mut singulars = Vec::with_capacity(r_eff);
    for (out, &(ev, idx)) in kept.iter().take(r_eff).enumerate() {
        let wcol = evecs.column(idx);
        let dir = q.dot(&wcol);
        for j in 0..p {
            components[[out, j]] = dir[j];
        }
        singulars.push(ev.sqrt());
    }
    orthonormalize_rows(&mut components);
    Ok((mean, components, singulars))
}

fn centered_block(seq: &FrameSequence, mean: &Array1<f64>) -> Array2<f64> {
    let t_len = seq.n_frames();
    let p = seq.n_pixels();
    let mut f = Array2::<f64>::zeros((t_len, p));
    for t in 0..t_len {
        for (j, &v) in seq.frame(t).iter().enumerate() {
            f[[t, j]] = v as f64 - mean[j];
        }
    }
    f
}

fn pooled_coords(seqs: &[&FrameSequence], mean: &Array1<f64>, comps: &Array2<f64>) -> Array2<f64> {
    let n: usize = seqs.iter().map(|s| s.n_frames()).sum();
    let mut coords = Array2::<f64>::zeros((n, comps.nrows()));
    let mut row = 0;
    for seq in seqs {
        let f = centered_block(seq, mean);
        let c = f.dot(&comps.t());
        coords.slice_mut(s![row..row + c.nrows(), ..]).assign(&c);
        row += c.nrows();
    }
    coords
}

/// Modified Gram-Schmidt on columns, two passes; drops numerically null
/// columns so the returned matrix always has orthonormal columns.
fn orthonormal_columns(a: Array2<f64>) -> Array2<f64> {
    let (p, l) = a.dim();
    let max_norm = a
        .columns()
        .into_iter()
        .map(|c| c.dot(&c).sqrt())
        .fold(0.0f64, f64::max);
    if max_norm == 0.0 {
        return Array2::zeros((p, 0));
    }
    let mut kept: Vec<Array1<f64>> = Vec::with_capacity(l);
    for j in 0..l {
        let mut v = a.column(j).to_owned();
        for _pass in 0..2 {
            for u in &kept {
                let proj = u.dot(&v);
                v.scaled_add(-proj, u);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 * max_norm {
            kept.push(v / norm);
        }
    }
    let mut out = Array2::<f64>::zeros((p, kept.len()));
    for (j, v) in kept.iter().enumerate() {
        out.column_mut(j).assign(v);
    }
    out
}

/// In-place MGS polish of (already near-orthonormal) rows.
fn orthonormalize_rows(m: &mut Array2<f64>) {
    let r = m.nrows();
    for i in 0..r {
        for _pass in 0..2 {
            for k in 0..i {
                let proj = {
                    let (head, tail) = m.view().split_at(ndarray::Axis(0), i);
                    head.row(k).dot(&tail.row(0))
                };
                let prev = m.row(k).to_owned();
                m.row_mut(i).scaled_add(-proj, &prev);
            }
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        if norm > 0.0 {
            m.row_mut(i).mapv_inplace(|v| v / norm);
        }
    }
}

/// Seeded Lloyd k-means with k-means++ initialization; deterministic given
/// the rng state (ties broken by lowest index).
fn kmeans(data: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let d = data.ncols();
    debug_assert!(k >= 1 && k <= n);

    let mut centers = Array2::<f64>::zeros((k, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&data.row(first));
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row(i), centers.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d2) in dist2.iter().enumerate() {
                target -= d2;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with some center; spread deterministically.
            c % n
        };
        centers.row_mut(c).assign(&data.row(pick));
        for i in 0..n {
            let d2 = sq_dist(data.row(i), centers.row(c));
            if d2 < dist2[i] {
                dist2[i] = d2;
            }
        }
    }

    let mut assign = vec![0usize; n];
    for _iter in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d2 = sq_dist(data.row(i), centers.row(c));
                if d2 < best_d {
                    best_d = d2;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed && _iter > 0 {
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            let mut row = sums.row_mut(c);
            row += &data.row(i);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let cnt = counts[c] as f64;
                for j in 0..d {
                    centers[[c, j]] = sums[[c, j]] / cnt;
                }
            } else {
                // Re-seed an empty cluster with the point farthest from its center.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(data.row(a), centers.row(assign[a]));
                        let db = sq_dist(data.row(b), centers.row(assign[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap_or(0);
                centers.row_mut(c).assign(&data.row(far));
            }
        }
    }
    centers
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median_pairwise_distance(centers: &Array2<f64>) -> f64 {
    let k = centers.nrows();
    let mut dists = Vec::with_capacity(k * (k.saturating_sub(1)) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            dists.push(sq_dist(centers.row(i), centers.row(j)).sqrt());
        }
    }
    if dists.is_empty() {
        return f64::NAN;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    }
}

/// Number of monomials in r variables with total degree <= d: C(r + d, d).
fn n_multi_indices(r: usize, d: usize) -> usize {
    let mut acc: usize = 1;
    for i in 1..=d {
        acc = acc * (r + i) / i;
    }
    acc
}

/// Exponent vectors for monomials of total degree <= d over r variables,
/// ordered by total degree, then lexicographically. First entry is constant.
fn poly_exponents(r: usize, d: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::with_capacity(n_multi_indices(r, d));
    let mut current = vec![0u32; r];
    for total in 0..=d as u32 {
        emit_exponents(&mut out, &mut current, 0, total);
    }
    out
}

fn emit_exponents(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, pos: usize, remaining: u32) {
    if pos == current.len() - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        emit_exponents(out, current, pos + 1, remaining - e);
        current[pos] = 0;
    }
}

/// Full m x T feature matrix: column t is Psi(x_t).
pub fn feature_matrix(seq: &FrameSequence, dict: &Dictionary) -> Result<Array2<f64>> {
    if seq.height() != dict.height || seq.width() != dict.width {
        return Err(Error::validation(format!(
            "sequence shape {}x{} does not match dictionary {}x{}",
            seq.height(),
            seq.width(),
            dict.height,
            dict.width
        )));
    }
    let t_len = seq.n_frames();
    let coords = {
        let f = centered_block(seq, &dict.mean);
        f.dot(&dict.components.t()) // T x r_eff
    };
    let m = dict.m();
    let mut feats = Array2::<f64>::zeros((m, t_len));
    match &dict.kind {
        DictKind::PcaLinear { .. } => {
            for t in 0..t_len {
                feats[[0, t]] = 1.0;
                for i in 0..dict.r_eff() {
                    feats[[i + 1, t]] = coords[[t, i]];
                }
            }
        }
        DictKind::PcaRbf { .. } => {
            let centers = dict.centers.as_ref().expect("validated");
            let width = dict.rbf_width.expect("validated");
            let denom = 2.0 * width * width;
            for t in 0..t_len {
                feats[[0, t]] = 1.0;
                for (j, center) in centers.rows().into_iter().enumerate() {
                    let d2 = sq_dist(coords.row(t), center);
                    feats[[j + 1, t]] = (-d2 / denom).exp();
                }
            }
        }
        DictKind::PcaPoly { degree, .. } => {
            let exps = poly_exponents(dict.r_eff(), *degree);
            for t in 0..t_len {
                for (j, alpha) in exps.iter().enumerate() {
                    let mut v = 1.0;
                    for (i, &e) in alpha.iter().enumerate() {
                        for _ in 0..e {
                            v *= coords[[t, i]];
                        }
                    }
                    feats[[j, t]] = v;
                }
            }
        }
    }
    Ok(feats)
}

/// Lifts a sequence into the snapshot pair (Psi, Psi').
pub fn lift(seq: &FrameSequence, dict: &Dictionary) -> Result<SnapshotMatrices> {
    let feats = feature_matrix(seq, dict)?;
    let t_len = feats.ncols();
    let psi = feats.slice(s![.., ..t_len - 1]).to_owned();
    let psi_prime = feats.slice(s![.., 1..]).to_owned();
    SnapshotMatrices::new(psi, psi_prime, seq.dt())
}

/// K = Psi' pinv(Psi), pseudoinverse by SVD with singular values below
/// rcond * sigma_max treated as zero. K is the Frobenius-minimal solution of
/// min ||Psi' - K Psi|| restricted to the retained singular subspace.
pub fn koopman_matrix(snap: &SnapshotMatrices, rcond: f64) -> Result<Array2<f64>> {
    if !(rcond > 0.0 && rcond < 1.0) {
        return Err(Error::validation(format!("rcond must lie in (0, 1), got {rcond}")));
    }
    let (u, sv, vt) = snap
        .psi
        .svd(true, true)
        .map_err(|e| Error::numerical(format!("snapshot SVD failed: {e}")))?;
    let u = u.expect("requested");
    let vt = vt.expect("requested");
    let smax = sv.iter().cloned().fold(0.0f64, f64::max);
    let rank = sv.iter().filter(|&&s| s >= rcond * smax && s > 0.0).count();
    if rank == 0 {
        return Err(Error::numerical(
            "degenerate snapshot matrix: all singular values below threshold",
        ));
    }
    // pinv(Psi) = V_k diag(1/s) U_k^T restricted to the leading k triples.
    let uk = u.slice(s![.., ..rank]);
    let vk = vt.slice(s![..rank, ..]);
    let mut right = snap.psi_prime.dot(&vk.t()); // m x k
    for (j, col) in right.columns_mut().into_iter().enumerate() {
        let inv = 1.0 / sv[j];
        let mut col = col;
        col.mapv_inplace(|v| v * inv);
    }
    Ok(right.dot(&uk.t()))
}

/// Eigendecomposes K^T and assembles per-mode traces, spatial fields, and
/// energies. Deterministic: each eigenvector's largest-magnitude entry is
/// rotated to the positive real axis.
pub fn decompose(
    k: &Array2<f64>,
    snap: &SnapshotMatrices,
    seq: &FrameSequence,
    dict: &Dictionary,
) -> Result<KoopmanDecomposition> {
    decompose_with_tol(k, snap, seq, dict, EIG_RESIDUAL_TOL)
}

pub(crate) fn decompose_with_tol(
    k: &Array2<f64>,
    snap: &SnapshotMatrices,
    seq: &FrameSequence,
    dict: &Dictionary,
    residual_tol: f64,
) -> Result<KoopmanDecomposition> {
    let m = k.nrows();
    if k.ncols() != m {
        return Err(Error::validation("K must be square"));
    }
    if snap.m() != m || dict.m() != m {
        return Err(Error::validation(format!(
            "inconsistent dictionary size: K is {m}x{m}, snapshots {}, dictionary {}",
            snap.m(),
            dict.m()
        )));
    }
    if snap.dt != seq.dt() {
        return Err(Error::validation(format!(
            "snapshot dt {} does not match sequence dt {}",
            snap.dt,
            seq.dt()
        )));
    }
    let kt = k.t().to_owned();
    let (evals, evecs) = kt
        .eig()
        .map_err(|e| Error::numerical(format!("eigendecomposition failed: {e}")))?;

    let k_fro = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    let kt_c = kt.mapv(|v| C64::new(v, 0.0));
    let lam_max = evals.iter().map(|l| l.norm()).fold(0.0f64, f64::max);

    let feats = feature_matrix(seq, dict)?;
    let t_len = feats.ncols();

    // Raw flattened frames for the spatial regression.
    let p = seq.n_pixels();
    let mut x = Array2::<f64>::zeros((t_len, p));
    for t in 0..t_len {
        for (j, &v) in seq.frame(t).iter().enumerate() {
            x[[t, j]] = v as f64;
        }
    }

    struct Candidate {
        lambda: C64,
        xi: Vec<C64>,
        trace: Vec<C64>,
    }
    let mut cands = Vec::new();
    for (i, &lambda) in evals.iter().enumerate() {
        // Verify the eigenpair before trusting it.
        let xi_col = evecs.column(i);
        let resid_vec = kt_c.dot(&xi_col) - xi_col.mapv(|v| v * lambda);
        let resid = resid_vec.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
            / xi_col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if resid > residual_tol * k_fro.max(1.0) {
            return Err(Error::numerical(format!(
                "defective eigenproblem: eigenpair residual {resid:.3e} exceeds tolerance"
            )));
        }
        // Rank-deficiency artifacts: K cannot have dynamics at lambda = 0.
        if lambda.norm() <= ZERO_LAMBDA_TOL * lam_max.max(1.0) {
            continue;
        }
        let mut xi: Vec<C64> = xi_col.iter().cloned().collect();
        normalize_phase(&mut xi);
        let trace: Vec<C64> = (0..t_len)
            .map(|t| {
                let mut acc = C64::new(0.0, 0.0);
                for (j, &c) in xi.iter().enumerate() {
                    acc += c * feats[[j, t]];
                }
                acc
            })
            .collect();
        cands.push(Candidate { lambda, xi, trace });
    }

    // Spatial fields for all candidates in one real GEMM. The regression
    // coefficient is X^T conj(phi) / sum|phi|^2; only its real part is kept,
    // and Re(x * conj(phi)) needs just the real parts of the traces.
    let n_modes = cands.len();
    let mut tre = Array2::<f64>::zeros((t_len, n_modes));
    for (i, c) in cands.iter().enumerate() {
        for t in 0..t_len {
            tre[[t, i]] = c.trace[t].re;
        }
    }
    let num_re = x.t().dot(&tre); // p x n_modes

    let mut modes = Vec::with_capacity(n_modes);
    for (i, c) in cands.into_iter().enumerate() {
        let denom: f64 = c.trace.iter().map(|z| z.norm_sqr()).sum();
        let mut field = Array2::<f64>::zeros((seq.height(), seq.width()));
        if denom > 0.0 {
            for j in 0..p {
                field[[j / seq.width(), j % seq.width()]] = num_re[[j, i]] / denom;
            }
        }
        let field_sq: f64 = field.iter().map(|v| v * v).sum();
        let energy = denom / t_len as f64 * field_sq;
        let mu = c.lambda.ln() / snap.dt;
        modes.push(KoopmanMode {
            lambda: c.lambda,
            mu,
            xi: c.xi,
            phi_trace: c.trace,
            field,
            energy,
        });
    }
    sort_modes(&mut modes);
    Ok(KoopmanDecomposition {
        view: seq.view(),
        dt: snap.dt,
        height: seq.height(),
        width: seq.width(),
        modes,
        degenerate: false,
    })
}

fn normalize_phase(xi: &mut [C64]) {
    let norm = xi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let mut best = 0;
    let mut best_mag = -1.0;
    for (i, z) in xi.iter().enumerate() {
        let mag = z.norm();
        if mag > best_mag {
            best_mag = mag;
            best = i;
        }
    }
    let phase = xi[best] / xi[best].norm();
    let rot = phase.conj() / norm;
    for z in xi.iter_mut() {
        *z *= rot;
    }
}

fn sort_modes(modes: &mut [KoopmanMode]) {
    modes.sort_by(|a, b| {
        b.energy
            .partial_cmp(&a.energy)
            .unwrap()
            .then(b.lambda.re.partial_cmp(&a.lambda.re).unwrap())
            .then(b.lambda.im.partial_cmp(&a.lambda.im).unwrap())
    });
}

/// Applies the spectral filter policy: energy floor (relative to the top
/// mode), modulus floor, conjugate-pair collapse onto the Im >= 0
/// representative with combined energy, and a k_max cap.
pub fn filter_modes(dec: &KoopmanDecomposition, cfg: &FilterConfig) -> Result<KoopmanDecomposition> {
    cfg.validate()?;
    let mut out = KoopmanDecomposition {
        view: dec.view,
        dt: dec.dt,
        height: dec.height,
        width: dec.width,
        modes: Vec::new(),
        degenerate: false,
    };
    if dec.modes.is_empty() {
        out.degenerate = true;
        return Ok(out);
    }
    let e_max = dec.modes.iter().map(|m| m.energy).fold(0.0f64, f64::max);
    let retained: Vec<&KoopmanMode> = dec
        .modes
        .iter()
        .filter(|m| m.energy >= cfg.energy_floor * e_max && m.lambda.norm() >= cfg.modulus_floor)
        .collect();

    let n = retained.len();
    let mut used = vec![false; n];
    let mut collapsed: Vec<KoopmanMode> = Vec::new();
    for i in 0..n {
        if used[i] {
            continue;
        }
        used[i] = true;
        let mi = retained[i];
        if mi.lambda.im.abs() > PAIR_IM_TOL {
            let target = mi.lambda.conj();
            let mut best: Option<(usize, f64)> = None;
            for (j, mj) in retained.iter().enumerate().skip(i + 1) {
                if used[j] || mj.lambda.im.abs() <= PAIR_IM_TOL {
                    continue;
                }
                let d = (mj.lambda - target).norm();
                if d <= PAIR_MATCH_TOL * (1.0 + target.norm())
                    && best.map_or(true, |(_, bd)| d < bd)
                {
                    best = Some((j, d));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
                let (rep, other) = if mi.lambda.im > 0.0 {
                    (mi, retained[j])
                } else {
                    (retained[j], mi)
                };
                let mut rep = rep.clone();
                rep.energy += other.energy;
                collapsed.push(rep);
                continue;
            }
            if mi.lambda.im < 0.0 {
                collapsed.push(conjugate_mode(mi));
                continue;
            }
        }
        collapsed.push(mi.clone());
    }
    sort_modes(&mut collapsed);
    collapsed.truncate(cfg.k_max);
    out.degenerate = collapsed.is_empty();
    out.modes = collapsed;
    Ok(out)
}

fn conjugate_mode(m: &KoopmanMode) -> KoopmanMode {
    KoopmanMode {
        lambda: m.lambda.conj(),
        mu: m.mu.conj(),
        xi: m.xi.iter().map(|z| z.conj()).collect(),
        phi_trace: m.phi_trace.iter().map(|z| z.conj()).collect(),
        field: m.field.clone(),
        energy: m.energy,
    }
}

/// Principal-branch continuous-time eigenvalue mu = ln(lambda)/dt.
/// Re(mu) > 0 exactly when |lambda| > 1.
pub fn continuous_eigen(lambda: C64, dt: f64) -> Result<C64> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::validation(format!("dt must be > 0, got {dt}")));
    }
    if lambda.norm() == 0.0 {
        return Err(Error::numerical("continuous eigenvalue undefined for lambda = 0"));
    }
    Ok(lambda.ln() / dt)
}

impl KoopmanDecomposition {
    /// JSON document per the CLI `decompose` output contract: complex numbers
    /// as [re, im] pairs, mode fields as base64 little-endian f32.
    pub fn to_json(&self) -> serde_json::Value {
        use base64::Engine;
        let modes: Vec<serde_json::Value> = self
            .modes
            .iter()
            .map(|m| {
                let mut field_bytes = Vec::with_capacity(m.field.len() * 4);
                for &v in m.field.iter() {
                    field_bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
                serde_json::json!({
                    "lambda": [m.lambda.re, m.lambda.im],
                    "mu": [m.mu.re, m.mu.im],
                    "energy": m.energy,
                    "xi": m.xi.iter().map(|z| vec![z.re, z.im]).collect::<Vec<_>>(),
                    "phi_trace": m.phi_trace.iter().map(|z| vec![z.re, z.im]).collect::<Vec<_>>(),
                    "field_b64": base64::engine::general_purpose::STANDARD.encode(&field_bytes),
                })
            })
            .collect();
        serde_json::json!({
            "view": self.view.as_str(),
            "dt": self.dt,
            "height": self.height,
            "width": self.width,
            "degenerate": self.degenerate,
            "modes": modes,
        })
    }
}

/// SplitMix64 step; derives independent stream seeds from one master seed.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
