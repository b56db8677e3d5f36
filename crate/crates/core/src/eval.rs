//! Rank-correlation metrics, benchmark harnesses and report assembly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kendall's tau-b and Spearman's rho between one model's predictions and a
/// ground-truth ordering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReport {
    pub model: String,
    pub kendall_tau: f64,
    pub spearman_rho: f64,
    pub n: usize,
}

/// Aggregated policy returns for one reward model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnReport {
    pub model: String,
    pub mean_return: f64,
    pub std_return: f64,
    pub n_configs: usize,
    pub n_trials: usize,
    /// Configs whose fit failed and were excluded.
    pub n_failed: usize,
}

/// One (model, config, trial) observation for plot-ready long-format dumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnRow {
    pub model: String,
    pub config: usize,
    pub trial: usize,
    pub ret: f64,
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("rank metric: length mismatch {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("rank metric: need at least two samples"));
    }
    Ok(())
}

/// Kendall's tau-b: (P - Q) / sqrt((P + Q + T)(P + Q + U)) over all pairs,
/// where T counts ties only in `a` and U ties only in `b`. Errors when either
/// input is entirely tied.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    let n = a.len();
    let (mut conc, mut disc, mut ties_a, mut ties_b) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..n {
        for j in (i + 1)..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 && db == 0.0 {
                continue;
            } else if da == 0.0 {
                ties_a += 1;
            } else if db == 0.0 {
                ties_b += 1;
            } else if (da > 0.0) == (db > 0.0) {
                conc += 1;
            } else {
                disc += 1;
            }
        }
    }
    let denom_a = (conc + disc + ties_a) as f64;
    let denom_b = (conc + disc + ties_b) as f64;
    if denom_a == 0.0 || denom_b == 0.0 {
        return Err(Error::invalid("kendall_tau: an argument is entirely tied"));
    }
    Ok((conc as f64 - disc as f64) / (denom_a * denom_b).sqrt())
}

/// Mid-ranks with average-rank tie handling.
fn midranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of mid-ranks.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    let ra = midranks(a);
    let rb = midranks(b);
    let n = a.len() as f64;
    let mean_a = ra.iter().sum::<f64>() / n;
    let mean_b = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - mean_a;
        let db = rb[i] - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::invalid("spearman_rho: an argument is entirely tied"));
    }
    Ok(cov / (var_a * var_b).sqrt())
}

/// Score every model on held-out frames against hidden ground-truth quality.
/// `models` supply a score per observation; frames and qualities are paired.
pub fn ranking_benchmark(
    models: &[(&str, &dyn crate::reward::RewardModel)],
    frames: &[Vec<f64>],
    quality: &[f64],
) -> Result<Vec<RankReport>> {
    if frames.len() != quality.len() {
        return Err(Error::invalid("ranking_benchmark: frames/quality length mismatch"));
    }
    let mut out = Vec::with_capacity(models.len());
    for (name, model) in models {
        let preds: Vec<f64> = frames.iter().map(|f| model.score(f)).collect::<Result<_>>()?;
        out.push(RankReport {
            model: (*name).to_string(),
            kendall_tau: kendall_tau(&preds, quality)?,
            spearman_rho: spearman_rho(&preds, quality)?,
            n: frames.len(),
        });
    }
    Ok(out)
}

/// Fits one reward model on grid demonstrations and reports a reward value
/// per grid state, for value iteration.
pub trait GridRewardFitter {
    fn name(&self) -> &str;
    fn fit_grid(
        &self,
        demos: &[crate::trajectory::Trajectory],
        cfg: &crate::envs::GridWorldConfig,
        seed: u64,
    ) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DemoKind {
    Optimal,
    Suboptimal,
}

/// Grid-world returns benchmark: for each randomised configuration, generate
/// demonstrations, fit every model, plan with value iteration on the fitted
/// mean reward, and evaluate the policy on the true reward. Aggregates
/// mean +/- std across all configs x trials. Bit-for-bit reproducible for a
/// given master seed: per-config seeds are derived, and results are reduced
/// in config order.
pub fn returns_benchmark(
    fitters: &[&dyn GridRewardFitter],
    base_cfg: &crate::envs::GridWorldConfig,
    demo_kind: DemoKind,
    n_configs: usize,
    n_trials: usize,
    n_demos: usize,
    master_seed: u64,
) -> Result<(Vec<ReturnReport>, Vec<ReturnRow>)> {
    use crate::envs::gridworld;
    use crate::policies;

    if n_configs == 0 || n_trials == 0 {
        return Err(Error::invalid("returns_benchmark: n_configs and n_trials must be >= 1"));
    }

    let mut per_model_returns: Vec<Vec<f64>> = vec![Vec::new(); fitters.len()];
    let mut per_model_failures = vec![0usize; fitters.len()];
    let mut rows = Vec::new();

    for config_idx in 0..n_configs {
        let cfg_seed = crate::seed::child2(master_seed, "config", config_idx as u64);
        let cfg = gridworld::randomize_goal(base_cfg, cfg_seed);
        let mdp = gridworld::to_mdp(&cfg);
        let true_reward = gridworld::true_reward_vector(&cfg);

        let demo_seed = crate::seed::child2(master_seed, "demos", config_idx as u64);
        let demos = match demo_kind {
            DemoKind::Optimal => gridworld::gen_optimal_demos(&cfg, n_demos, demo_seed)?,
            DemoKind::Suboptimal => gridworld::gen_suboptimal_demos(&cfg, n_demos, demo_seed)?,
        };

        for (m, fitter) in fitters.iter().enumerate() {
            let fit_seed = crate::seed::child2(master_seed, fitter.name(), config_idx as u64);
            let fitted = match fitter.fit_grid(&demos, &cfg, fit_seed) {
                Ok(r) => r,
                Err(_) => {
                    per_model_failures[m] += 1;
                    continue;
                }
            };
            let (_, policy) = policies::value_iteration(&mdp, &fitted, 1e-6)?;
            let eval_seed = crate::seed::child2(master_seed, "eval", config_idx as u64);
            let returns =
                policies::rollout_returns(&mdp, &policies::Policy::Greedy(policy), &true_reward, n_trials, eval_seed);
            for (trial, ret) in returns.iter().enumerate() {
                rows.push(ReturnRow { model: fitter.name().to_string(), config: config_idx, trial, ret: *ret });
            }
            per_model_returns[m].extend(returns);
        }
    }

    let reports = fitters
        .iter()
        .enumerate()
        .map(|(m, fitter)| {
            let xs = &per_model_returns[m];
            let (mean, std) = mean_std(xs);
            ReturnReport {
                model: fitter.name().to_string(),
                mean_return: mean,
                std_return: std,
                n_configs,
                n_trials,
                n_failed: per_model_failures[m],
            }
        })
        .collect();
    Ok((reports, rows))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// CSV for rank reports (provenance header lines prefixed with '#').
pub fn rank_reports_csv(header: &str, reports: &[RankReport]) -> String {
    let mut s = String::new();
    for line in header.lines() {
        s.push_str(&format!("# {line}\n"));
    }
    s.push_str("model,kendall_tau,spearman_rho,n\n");
    for r in reports {
        s.push_str(&format!("{},{},{},{}\n", r.model, r.kendall_tau, r.spearman_rho, r.n));
    }
    s
}

/// CSV for return reports.
pub fn return_reports_csv(header: &str, reports: &[ReturnReport]) -> String {
    let mut s = String::new();
    for line in header.lines() {
        s.push_str(&format!("# {line}\n"));
    }
    s.push_str("model,mean_return,std_return,n_configs,n_trials,n_failed\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.model, r.mean_return, r.std_return, r.n_configs, r.n_trials, r.n_failed
        ));
    }
    s
}

/// Long-format plot data (model, config, trial, return).
pub fn return_rows_csv(header: &str, rows: &[ReturnRow]) -> String {
    let mut s = String::new();
    for line in header.lines() {
        s.push_str(&format!("# {line}\n"));
    }
    s.push_str("model,config,trial,return\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.model, r.config, r.trial, r.ret));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_orderings_give_one() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![10.0, 20.0, 30.0, 40.0];
        assert_eq!(kendall_tau(&a, &b).unwrap(), 1.0);
        assert_eq!(spearman_rho(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn reversed_orderings_give_minus_one() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![4.0, 3.0, 2.0, 1.0];
        assert_eq!(kendall_tau(&a, &b).unwrap(), -1.0);
        assert_eq!(spearman_rho(&a, &b).unwrap(), -1.0);
    }

    #[test]
    fn all_ties_error() {
        let a = vec![1.0, 1.0, 1.0];
        let b = vec![1.0, 2.0, 3.0];
        assert!(kendall_tau(&a, &b).is_err());
        assert!(spearman_rho(&a, &b).is_err());
        assert!(kendall_tau(&b, &a).is_err());
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(kendall_tau(&[1.0, 2.0], &[1.0]).is_err());
        assert!(spearman_rho(&[1.0], &[1.0]).is_err());
    }

    /// Values frozen from scipy.stats.kendalltau / spearmanr (default tie
    /// conventions: tau-b and average ranks).
    #[test]
    fn matches_frozen_reference_values() {
        let a = vec![0.5, 1.2, -0.3, 2.2, 0.0, 1.2, 3.1, -1.0];
        let b = vec![1.0, 0.4, 0.2, 2.0, -0.1, 0.8, 2.5, 0.3];
        assert!((kendall_tau(&a, &b).unwrap() - 0.6182840223353117).abs() < 1e-12);
        assert!((spearman_rho(&a, &b).unwrap() - 0.8263621207201486).abs() < 1e-12);

        let c = vec![3.0, -1.5, 0.25, 7.0, 2.0, -0.5];
        let d = vec![0.1, 0.9, 0.4, -2.0, 0.3, 1.5];
        assert!((kendall_tau(&c, &d).unwrap() - (-0.8666666666666666)).abs() < 1e-12);
        assert!((spearman_rho(&c, &d).unwrap() - (-0.942857142857143)).abs() < 1e-12);

        let e = vec![1.0, 1.0, 2.0, 3.0, 3.0, 3.0];
        let f = vec![2.0, 1.0, 1.0, 5.0, 5.0, 4.0];
        assert!((kendall_tau(&e, &f).unwrap() - 0.6689936080056726).abs() < 1e-12);
        assert!((spearman_rho(&e, &f).unwrap() - 0.8104432008587534).abs() < 1e-12);
    }

    /// Exhaustive check of every permutation pair up to n = 5 against a
    /// test-local concordant/discordant counting oracle.
    #[test]
    fn exhaustive_permutations_match_definition_oracle() {
        fn permutations(n: usize) -> Vec<Vec<f64>> {
            if n == 1 {
                return vec![vec![0.0]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, (n - 1) as f64);
                    out.push(q);
                }
            }
            out
        }
        fn oracle_tau(a: &[f64], b: &[f64]) -> f64 {
            let n = a.len();
            let mut num = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    num += (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
                }
            }
            num / (n * (n - 1)) as f64
        }
        for n in 2..=5usize {
            let perms = permutations(n);
            let identity: Vec<f64> = (0..n).map(|i| i as f64).collect();
            for p in &perms {
                let got = kendall_tau(&identity, p).unwrap();
                let want = oracle_tau(&identity, p);
                assert!((got - want).abs() < 1e-12, "n={n} perm={p:?}");
            }
        }
    }

    #[test]
    fn antisymmetric_under_order_reversal() {
        let a = vec![0.3, 1.9, -0.5, 2.4, 0.9];
        let b = vec![1.0, 0.1, 2.2, -0.7, 0.4];
        let rev: Vec<f64> = b.iter().map(|x| -x).collect();
        assert!((kendall_tau(&a, &rev).unwrap() + kendall_tau(&a, &b).unwrap()).abs() < 1e-12);
        assert!((spearman_rho(&a, &rev).unwrap() + spearman_rho(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn invariant_under_monotone_transforms() {
        let a = vec![0.3, 1.9, -0.5, 2.4, 0.9];
        let b = vec![1.0, 0.1, 2.2, -0.7, 0.4];
        let ta: Vec<f64> = a.iter().map(|x| (3.0 * x).exp()).collect();
        let tb: Vec<f64> = b.iter().map(|x| x.powi(3) + 7.0).collect();
        assert_eq!(kendall_tau(&a, &b).unwrap(), kendall_tau(&ta, &tb).unwrap());
        assert!((spearman_rho(&a, &b).unwrap() - spearman_rho(&ta, &tb).unwrap()).abs() < 1e-12);
    }
}
