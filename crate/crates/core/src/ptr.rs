//! Probabilistic temporal ranking: sample time-ordered comparisons from
//! demonstration trajectories and fit a GP preference model over latent
//! observations, yielding a reward function with predictive uncertainty.
//!
//! The generative story: rewards over the pooled training latents carry a
//! GP prior (Matern32 kernel plus heteroscedastic noise), and each sampled
//! observation pair produces a Bernoulli comparison outcome through the
//! sigmoid of the reward difference. Inference is a Laplace approximation —
//! Newton iterations for the posterior mode, Hessian-based marginal
//! variances — with kernel hyperparameters set to their MAP values under
//! the configured priors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{self, GPDataset, GaussianPrediction, GpPredictor, KernelFamily, KernelSpec};
use crate::optim::nelder_mead;
use crate::trajectory::Trajectory;

/// Latent encoding of one observation: per-dimension mean and standard
/// deviation. Downstream fitting uses the mean as the point latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LatentState {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if mean.len() != scale.len() {
            return Err(Error::invalid("LatentState: mean/scale length mismatch"));
        }
        if scale.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(Error::invalid("LatentState: scale entries must be > 0"));
        }
        Ok(LatentState { mean, scale })
    }
}

/// Anything that maps observations to latent states: the trained variational
/// encoder, an identity map for low-dimensional states, or a PCA projection.
pub trait LatentEncoder {
    fn obs_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn encode(&self, obs: &[f64]) -> Result<LatentState>;
}

/// Passes observations through unchanged (unit scale).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityEncoder {
    pub dim: usize,
}

impl LatentEncoder for IdentityEncoder {
    fn obs_dim(&self) -> usize {
        self.dim
    }

    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, obs: &[f64]) -> Result<LatentState> {
        if obs.len() != self.dim {
            return Err(Error::invalid(format!(
                "identity encoder: observation dimension {} vs {}",
                obs.len(),
                self.dim
            )));
        }
        LatentState::new(obs.to_vec(), vec![1.0; self.dim])
    }
}

/// Linear projection onto the top principal components of a training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaEncoder {
    mean: Vec<f64>,
    /// Row-major (latent_dim x obs_dim) projection.
    components: Vec<Vec<f64>>,
}

impl PcaEncoder {
    pub fn fit(observations: &[Vec<f64>], latent_dim: usize) -> Result<Self> {
        let n = observations.len();
        if n < 2 {
            return Err(Error::invalid("PCA: need at least two observations"));
        }
        let d = observations[0].len();
        if latent_dim == 0 || latent_dim > d {
            return Err(Error::invalid(format!("PCA: latent dim {latent_dim} out of range for obs dim {d}")));
        }
        if observations.iter().any(|o| o.len() != d) {
            return Err(Error::invalid("PCA: observations must share one dimension"));
        }
        let mut mean = vec![0.0; d];
        for o in observations {
            for (m, v) in mean.iter_mut().zip(o) {
                *m += v / n as f64;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for o in observations {
            let c = DVector::from_iterator(d, o.iter().zip(&mean).map(|(v, m)| v - m));
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let components = order
            .iter()
            .take(latent_dim)
            .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
            .collect();
        Ok(PcaEncoder { mean, components })
    }
}

impl LatentEncoder for PcaEncoder {
    fn obs_dim(&self) -> usize {
        self.mean.len()
    }

    fn latent_dim(&self) -> usize {
        self.components.len()
    }

    fn encode(&self, obs: &[f64]) -> Result<LatentState> {
        if obs.len() != self.mean.len() {
            return Err(Error::invalid(format!(
                "PCA encoder: observation dimension {} vs {}",
                obs.len(),
                self.mean.len()
            )));
        }
        let mean = self
            .components
            .iter()
            .map(|c| c.iter().zip(obs).zip(&self.mean).map(|((w, v), m)| w * (v - m)).sum())
            .collect();
        LatentState::new(mean, vec![1.0; self.components.len()])
    }
}

/// Encode a batch of observations. Deterministic: the encoder mean is the
/// point latent used everywhere downstream.
pub fn encode_observations(
    observations: &[Vec<f64>],
    encoder: &dyn LatentEncoder,
) -> Result<Vec<LatentState>> {
    observations.iter().map(|o| encoder.encode(o)).collect()
}

/// Stack latent means into an N x d matrix.
pub fn latent_matrix(latents: &[LatentState]) -> DMatrix<f64> {
    let d = latents.first().map_or(0, |l| l.mean.len());
    DMatrix::from_fn(latents.len(), d, |i, j| latents[i].mean[j])
}

/// One temporal comparison: indices of the two sampled observations in the
/// pooled observation list and the outcome of the time test.
/// `outcome` is true exactly when the second observation was captured later
/// than the first within its trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonPair {
    pub first: usize,
    pub second: usize,
    pub outcome: bool,
}

/// Sample `n_pairs` comparisons from one trajectory, uniformly over ordered
/// index pairs with distinct time indices. Indices are trajectory-local.
pub fn sample_comparisons(traj: &Trajectory, n_pairs: usize, rng_seed: u64) -> Result<Vec<ComparisonPair>> {
    sample_comparisons_offset(traj, n_pairs, rng_seed, 0)
}

/// As `sample_comparisons`, with indices shifted by `offset` so pairs from
/// several trajectories can address one pooled observation list.
pub fn sample_comparisons_offset(
    traj: &Trajectory,
    n_pairs: usize,
    rng_seed: u64,
    offset: usize,
) -> Result<Vec<ComparisonPair>> {
    let n = traj.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "trajectory {} has {} steps; need at least 2 to sample comparisons",
            traj.id, n
        )));
    }
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be positive"));
    }
    let mut rng = crate::seed::rng(rng_seed);
    let mut out = Vec::with_capacity(n_pairs);
    while out.len() < n_pairs {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        // Ties carry no ordering signal: reject and resample.
        if traj.steps[i].t == traj.steps[j].t {
            continue;
        }
        out.push(ComparisonPair {
            first: offset + i,
            second: offset + j,
            outcome: traj.steps[j].t > traj.steps[i].t,
        });
    }
    Ok(out)
}

/// Sample comparisons from every trajectory against the pooled observation
/// list (observations concatenated in trajectory order). Pairs never span
/// trajectories; time indices from different demonstrations are not
/// comparable.
pub fn sample_comparisons_pooled(
    trajectories: &[Trajectory],
    n_pairs_per_traj: usize,
    rng_seed: u64,
) -> Result<Vec<ComparisonPair>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (k, traj) in trajectories.iter().enumerate() {
        let seed = crate::seed::child2(rng_seed, "comparisons", k as u64);
        out.extend(sample_comparisons_offset(traj, n_pairs_per_traj, seed, offset)?);
        offset += traj.len();
    }
    Ok(out)
}

/// Dump comparisons as CSV rows `traj,t1,t2,g` (one trajectory's pairs,
/// local indices resolved to time stamps).
pub fn comparisons_to_csv(traj: &Trajectory, pairs: &[ComparisonPair]) -> String {
    let mut s = String::from("traj,t1,t2,g\n");
    for p in pairs {
        let t1 = traj.steps[p.first].t;
        let t2 = traj.steps[p.second].t;
        s.push_str(&format!("{},{},{},{}\n", traj.id, t1, t2, u8::from(p.outcome)));
    }
    s
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log Ber(g | Sig(r_late - r_early)), numerically stabilised: finite for
/// all finite inputs.
pub fn preference_loglik(r_early: f64, r_late: f64, g: bool) -> f64 {
    let delta = r_late - r_early;
    if g {
        -softplus(-delta)
    } else {
        -softplus(delta)
    }
}

/// Hyperparameter priors for the preference GP: a Gamma(shape, rate) prior
/// on the kernel lengthscale and a Half-Cauchy(scale) prior on the noise
/// variances.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PtrHyperPriors {
    pub lengthscale_gamma: (f64, f64),
    pub noise_halfcauchy_scale: f64,
}

impl Default for PtrHyperPriors {
    fn default() -> Self {
        PtrHyperPriors { lengthscale_gamma: (2.0, 0.5), noise_halfcauchy_scale: 1.0 }
    }
}

impl PtrHyperPriors {
    fn log_prior(&self, lengthscale: f64, noise: f64) -> f64 {
        let (alpha, beta) = self.lengthscale_gamma;
        let lp_l = (alpha - 1.0) * lengthscale.ln() - beta * lengthscale;
        let s = self.noise_halfcauchy_scale;
        let lp_n = -(1.0 + (noise / s).powi(2)).ln();
        lp_l + lp_n
    }
}

/// Fit options; the defaults match the demonstration-scale experiments.
#[derive(Debug, Clone, Copy)]
pub struct PtrFitOptions {
    pub kernel_family: KernelFamily,
    pub amplitude: f64,
    pub max_newton_iter: usize,
    pub newton_tol: f64,
    pub outer_iters: usize,
}

impl Default for PtrFitOptions {
    fn default() -> Self {
        PtrFitOptions {
            kernel_family: KernelFamily::Matern32,
            amplitude: 1.0,
            max_newton_iter: 100,
            newton_tol: 1e-10,
            outer_iters: 40,
        }
    }
}

/// Summary of the outer hyperparameter search, kept for fit logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PtrFitReport {
    pub lengthscale: f64,
    pub noise_variance: f64,
    pub objective_trace: Vec<f64>,
    pub final_objective: f64,
}

/// The fitted preference model: posterior mode of the rewards at the
/// (deduplicated) training latents, Laplace marginal variances, and the
/// MAP kernel/noise used for predictive conditioning.
#[derive(Debug, Clone)]
pub struct RewardPosterior {
    pub train_latents: DMatrix<f64>,
    pub reward_mode: DVector<f64>,
    pub reward_cov_diag: DVector<f64>,
    pub kernel: KernelSpec,
    pub noise_diag: DVector<f64>,
    pub report: PtrFitReport,
    predictor: GpPredictor,
}

impl RewardPosterior {
    /// GP conditioning of the posterior-mode rewards at a query latent.
    pub fn predict(&self, latent: &[f64]) -> Result<GaussianPrediction> {
        self.predictor.predict(latent)
    }
}

/// Predictive reward at a latent point.
pub fn predict_reward(post: &RewardPosterior, latent: &[f64]) -> Result<GaussianPrediction> {
    post.predict(latent)
}

/// Collapse exactly duplicated latent rows to shared indices. Exact under
/// the GP model and keeps the Cholesky cost bounded when demonstrations
/// revisit states.
fn dedup_latents(latents: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let mut reps: Vec<usize> = Vec::new();
    let mut map = vec![0usize; latents.nrows()];
    let mut seen: std::collections::HashMap<Vec<u64>, usize> = std::collections::HashMap::new();
    for i in 0..latents.nrows() {
        let key: Vec<u64> = (0..latents.ncols()).map(|c| latents[(i, c)].to_bits()).collect();
        match seen.entry(key) {
            std::collections::hash_map::Entry::Occupied(e) => map[i] = *e.get(),
            std::collections::hash_map::Entry::Vacant(e) => {
                let idx = reps.len();
                e.insert(idx);
                reps.push(i);
                map[i] = idx;
            }
        }
    }
    let unique = DMatrix::from_fn(reps.len(), latents.ncols(), |r, c| latents[(reps[r], c)]);
    (unique, map)
}

/// Log joint of rewards under the GP prior and the comparison likelihood,
/// for a fixed prior precision. Shared by the Newton solver and exposed to
/// tests through `PtrObjective`.
pub struct PtrObjective {
    pub prior_precision: DMatrix<f64>,
    pub comparisons: Vec<ComparisonPair>,
}

impl PtrObjective {
    pub fn log_joint(&self, r: &DVector<f64>) -> f64 {
        let quad = (r.transpose() * &self.prior_precision * r)[(0, 0)];
        let ll: f64 = self
            .comparisons
            .iter()
            .map(|p| preference_loglik(r[p.first], r[p.second], p.outcome))
            .sum();
        ll - 0.5 * quad
    }

    fn grad_loglik(&self, r: &DVector<f64>, out: &mut DVector<f64>) {
        out.fill(0.0);
        for p in &self.comparisons {
            let delta = r[p.second] - r[p.first];
            let resid = f64::from(p.outcome) - sigmoid(delta);
            out[p.second] += resid;
            out[p.first] -= resid;
        }
    }

    /// W = -d^2 loglik / dr^2 (positive semi-definite).
    fn neg_hessian_loglik(&self, r: &DVector<f64>, out: &mut DMatrix<f64>) {
        out.fill(0.0);
        for p in &self.comparisons {
            let pr = sigmoid(r[p.second] - r[p.first]);
            let w = pr * (1.0 - pr);
            out[(p.second, p.second)] += w;
            out[(p.first, p.first)] += w;
            out[(p.second, p.first)] -= w;
            out[(p.first, p.second)] -= w;
        }
    }
}

struct LaplaceResult {
    mode: DVector<f64>,
    /// log of the Laplace-approximate marginal likelihood.
    log_evidence: f64,
    neg_hessian: DMatrix<f64>,
}

fn laplace_fit(
    objective: &PtrObjective,
    prior_cov_chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    start: &DVector<f64>,
    opts: &PtrFitOptions,
) -> Result<LaplaceResult> {
    let n = start.len();
    let mut r = start.clone();
    let mut grad = DVector::zeros(n);
    let mut w = DMatrix::zeros(n, n);
    let mut psi = objective.log_joint(&r);

    let mut converged = false;
    for _ in 0..opts.max_newton_iter {
        objective.grad_loglik(&r, &mut grad);
        grad -= &objective.prior_precision * &r;
        objective.neg_hessian_loglik(&r, &mut w);
        let a = &objective.prior_precision + &w;
        let step = gp::chol_solve(&a, &grad, 0.0)?;

        // Backtracking keeps the Newton step inside the concave basin.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &r + &step * scale;
            let cand_psi = objective.log_joint(&cand);
            if cand_psi >= psi - 1e-14 {
                r = cand;
                psi = cand_psi;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || step.amax() * scale < opts.newton_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        // One more gradient check: tiny gradients mean we are at the mode
        // even if the step never fell below tolerance.
        objective.grad_loglik(&r, &mut grad);
        grad -= &objective.prior_precision * &r;
        if grad.amax() > 1e-6 {
            return Err(Error::Fit {
                message: "Newton iterations for the preference posterior mode did not converge".into(),
                iterations: opts.max_newton_iter,
                last_objective: psi,
                last_iterate: r.iter().copied().collect(),
            });
        }
    }

    objective.neg_hessian_loglik(&r, &mut w);
    let a = &objective.prior_precision + &w;
    let a_chol = gp::chol_factor(&a, 0.0)?;

    let ll: f64 = objective
        .comparisons
        .iter()
        .map(|p| preference_loglik(r[p.first], r[p.second], p.outcome))
        .sum();
    let quad = (r.transpose() * &objective.prior_precision * &r)[(0, 0)];
    let logdet_cov_half: f64 = (0..n).map(|i| prior_cov_chol.l_dirty()[(i, i)].ln()).sum();
    let logdet_a_half: f64 = (0..n).map(|i| a_chol.l_dirty()[(i, i)].ln()).sum();
    let log_evidence = ll - 0.5 * quad - logdet_cov_half - logdet_a_half;

    Ok(LaplaceResult { mode: r, log_evidence, neg_hessian: a })
}

/// Fit the preference GP. `latents` holds one row per pooled observation;
/// comparison indices address those rows.
pub fn fit_ptr(
    comparisons: &[ComparisonPair],
    latents: &DMatrix<f64>,
    priors: &PtrHyperPriors,
    rng_seed: u64,
) -> Result<RewardPosterior> {
    fit_ptr_with(comparisons, latents, priors, rng_seed, &PtrFitOptions::default())
}

pub fn fit_ptr_with(
    comparisons: &[ComparisonPair],
    latents: &DMatrix<f64>,
    priors: &PtrHyperPriors,
    rng_seed: u64,
    opts: &PtrFitOptions,
) -> Result<RewardPosterior> {
    if comparisons.is_empty() {
        return Err(Error::invalid("fit_ptr: need at least one comparison"));
    }
    if latents.nrows() == 0 {
        return Err(Error::invalid("fit_ptr: empty latent matrix"));
    }
    if let Some(bad) = comparisons.iter().find(|p| p.first >= latents.nrows() || p.second >= latents.nrows()) {
        return Err(Error::invalid(format!(
            "fit_ptr: comparison ({}, {}) out of range for {} latents",
            bad.first,
            bad.second,
            latents.nrows()
        )));
    }

    let (unique, index_map) = dedup_latents(latents);
    let n = unique.nrows();
    let comparisons: Vec<ComparisonPair> = comparisons
        .iter()
        .map(|p| ComparisonPair { first: index_map[p.first], second: index_map[p.second], outcome: p.outcome })
        .collect();

    // Median pairwise distance seeds the lengthscale search.
    let mut dists: Vec<f64> = Vec::new();
    for i in 0..n.min(40) {
        for j in (i + 1)..n.min(40) {
            let d2: f64 = (0..unique.ncols()).map(|c| (unique[(i, c)] - unique[(j, c)]).powi(2)).sum();
            if d2 > 0.0 {
                dists.push(d2.sqrt());
            }
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_dist = dists.get(dists.len() / 2).copied().unwrap_or(1.0).max(1e-3);

    let trace = std::cell::RefCell::new(Vec::new());
    let warm_mode = std::cell::RefCell::new(DVector::zeros(n));
    let evaluate = |log_l: f64, log_v: f64| -> f64 {
        let l = log_l.exp();
        let v = log_v.exp();
        if !(1e-4..=1e6).contains(&l) || !(1e-8..=1e4).contains(&v) {
            return f64::INFINITY;
        }
        let Ok(spec) = KernelSpec::new(opts.kernel_family, opts.amplitude, l) else {
            return f64::INFINITY;
        };
        let Ok(mut cov) = gp::gram_matrix(&spec, &unique, &unique) else {
            return f64::INFINITY;
        };
        for i in 0..n {
            cov[(i, i)] += v;
        }
        let Ok(chol) = gp::chol_factor(&cov, 0.0) else {
            return f64::INFINITY;
        };
        let precision = chol.inverse();
        let objective = PtrObjective { prior_precision: precision, comparisons: comparisons.clone() };
        let start = warm_mode.borrow().clone();
        match laplace_fit(&objective, &chol, &start, opts) {
            Ok(res) => {
                let obj = res.log_evidence + priors.log_prior(l, v);
                *warm_mode.borrow_mut() = res.mode;
                trace.borrow_mut().push(obj);
                -obj
            }
            Err(_) => f64::INFINITY,
        }
    };

    // Two Nelder-Mead starts: the median heuristic and one draw from the
    // priors, keeping whichever lands higher.
    let mut rng = crate::seed::rng(crate::seed::child(rng_seed, "ptr-hypers"));
    let (shape, rate) = priors.lengthscale_gamma;
    let prior_l: f64 = (0..2).map(|_| -rng.gen_range(0.0_f64..1.0).max(1e-12).ln() / rate).sum::<f64>()
        * (shape / 2.0).max(0.5);
    let starts = [
        vec![median_dist.ln(), (0.25_f64).ln()],
        vec![prior_l.max(1e-2).ln(), rng.gen_range(0.05_f64..1.0).ln()],
    ];
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in &starts {
        let (x, val) = nelder_mead(|p| evaluate(p[0], p[1]), s, 0.7, opts.outer_iters, 1e-8);
        if best.as_ref().map_or(true, |(_, b)| val < *b) {
            best = Some((x, val));
        }
    }
    let (x, neg_obj) = best.expect("at least one start");
    if !neg_obj.is_finite() {
        return Err(Error::Fit {
            message: "hyperparameter search found no feasible kernel".into(),
            iterations: opts.outer_iters,
            last_objective: neg_obj,
            last_iterate: x,
        });
    }
    let lengthscale = x[0].exp();
    let noise_variance = x[1].exp();

    // Final Laplace pass at the MAP hyperparameters.
    let spec = KernelSpec::new(opts.kernel_family, opts.amplitude, lengthscale)?;
    let mut cov = gp::gram_matrix(&spec, &unique, &unique)?;
    for i in 0..n {
        cov[(i, i)] += noise_variance;
    }
    let chol = gp::chol_factor(&cov, 0.0)?;
    let precision = chol.inverse();
    let objective = PtrObjective { prior_precision: precision, comparisons };
    let res = laplace_fit(&objective, &chol, &warm_mode.borrow(), opts)?;

    let a_inv = gp::chol_factor(&res.neg_hessian, 0.0)?.inverse();
    let cov_diag = DVector::from_fn(n, |i, _| a_inv[(i, i)].max(0.0));

    let noise_diag = DVector::from_element(n, noise_variance);
    let dataset = GPDataset::new(unique.clone(), res.mode.clone(), noise_diag.clone())?;
    let predictor = GpPredictor::fit(&dataset, &spec)?;

    let trace = trace.into_inner();
    Ok(RewardPosterior {
        train_latents: unique,
        reward_mode: res.mode,
        reward_cov_diag: cov_diag,
        kernel: spec,
        noise_diag,
        report: PtrFitReport {
            lengthscale,
            noise_variance,
            objective_trace: trace,
            final_objective: -neg_obj,
        },
        predictor,
    })
}
