//! Kernels, Gram matrices, numerically stable solves and Gaussian-process
//! posterior conditioning. Everything here is a pure function of its inputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Jitter escalation schedule used to repair borderline-PSD systems.
const JITTER_START: f64 = 1e-9;
const JITTER_MAX: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    Matern32,
    Rbf,
}

/// A stationary kernel over Euclidean distance in latent space.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Signal variance k(x, x). The comparison likelihood absorbs reward
    /// scale, so 1.0 is the default everywhere.
    pub amplitude: f64,
    pub lengthscale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, amplitude: f64, lengthscale: f64) -> Result<Self> {
        if !(amplitude > 0.0) || !amplitude.is_finite() {
            return Err(Error::invalid(format!("amplitude must be > 0, got {amplitude}")));
        }
        if !(lengthscale > 0.0) || !lengthscale.is_finite() {
            return Err(Error::invalid(format!("lengthscale must be > 0, got {lengthscale}")));
        }
        Ok(KernelSpec { family, amplitude, lengthscale })
    }

    pub fn matern32(lengthscale: f64) -> Self {
        KernelSpec::new(KernelFamily::Matern32, 1.0, lengthscale).expect("valid lengthscale")
    }

    pub fn rbf(lengthscale: f64) -> Self {
        KernelSpec::new(KernelFamily::Rbf, 1.0, lengthscale).expect("valid lengthscale")
    }

    fn eval_scaled_dist(&self, r: f64) -> f64 {
        match self.family {
            KernelFamily::Matern32 => {
                let s = SQRT3 * r;
                self.amplitude * (1.0 + s) * (-s).exp()
            }
            KernelFamily::Rbf => self.amplitude * (-0.5 * r * r).exp(),
        }
    }
}

/// Evaluate k(x, y).
pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid(format!(
            "kernel_eval: dimension mismatch ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(spec.eval_scaled_dist(d2.sqrt() / spec.lengthscale))
}

/// Gram matrix with entry (i, j) = k(A_i, B_j); rows of `a` and `b` are points.
pub fn gram_matrix(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() || a.ncols() == 0 {
        return Err(Error::invalid(format!(
            "gram_matrix: column dimension mismatch ({} vs {})",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let d2: f64 = (0..a.ncols()).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum();
            out[(i, j)] = spec.eval_scaled_dist(d2.sqrt() / spec.lengthscale);
        }
    }
    Ok(out)
}

/// Cholesky factor of (M + jitter I), escalating jitter by 10x up to
/// `JITTER_MAX` when factorisation fails.
pub(crate) fn chol_factor(m: &DMatrix<f64>, jitter: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid(format!("chol: matrix is {}x{}, not square", m.nrows(), m.ncols())));
    }
    if jitter < 0.0 {
        return Err(Error::invalid(format!("chol: negative jitter {jitter}")));
    }
    let n = m.nrows();
    let mut j = jitter;
    loop {
        let mut work = m.clone();
        for i in 0..n {
            work[(i, i)] += j;
        }
        if let Some(chol) = nalgebra::Cholesky::new(work) {
            return Ok(chol);
        }
        let next = if j == 0.0 { JITTER_START } else { j * 10.0 };
        if next > JITTER_MAX {
            return Err(Error::numerical(format!(
                "Cholesky factorisation failed for {n}x{n} matrix after escalating jitter to {j:.1e}"
            )));
        }
        j = next;
    }
}

/// Solve (M + jitter I) x = b for symmetric PSD M.
pub fn chol_solve(m: &DMatrix<f64>, b: &DVector<f64>, jitter: f64) -> Result<DVector<f64>> {
    if m.nrows() != b.len() {
        return Err(Error::invalid(format!(
            "chol_solve: matrix is {}x{} but rhs has length {}",
            m.nrows(),
            m.ncols(),
            b.len()
        )));
    }
    Ok(chol_factor(m, jitter)?.solve(b))
}

/// Training data for GP regression: rows of `inputs` are latent points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GPDataset {
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    /// Per-point noise variance (the diagonal of the heteroscedastic noise matrix).
    pub noise_diag: DVector<f64>,
}

impl GPDataset {
    pub fn new(inputs: DMatrix<f64>, targets: DVector<f64>, noise_diag: DVector<f64>) -> Result<Self> {
        if inputs.nrows() != targets.len() || inputs.nrows() != noise_diag.len() {
            return Err(Error::invalid(format!(
                "GPDataset: {} input rows vs {} targets vs {} noise entries",
                inputs.nrows(),
                targets.len(),
                noise_diag.len()
            )));
        }
        if noise_diag.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("GPDataset: noise variances must be finite and >= 0"));
        }
        Ok(GPDataset { inputs, targets, noise_diag })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: f64,
    pub variance: f64,
}

/// A conditioned GP with a cached factorisation, for repeated queries against
/// the same training set.
#[derive(Debug, Clone)]
pub struct GpPredictor {
    spec: KernelSpec,
    inputs: DMatrix<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    alpha: DVector<f64>,
}

impl GpPredictor {
    pub fn fit(data: &GPDataset, spec: &KernelSpec) -> Result<Self> {
        if data.is_empty() {
            return Ok(GpPredictor {
                spec: *spec,
                inputs: data.inputs.clone(),
                chol: None,
                alpha: DVector::zeros(0),
            });
        }
        let mut k = gram_matrix(spec, &data.inputs, &data.inputs)?;
        for i in 0..data.len() {
            k[(i, i)] += data.noise_diag[i];
        }
        let chol = chol_factor(&k, 0.0)?;
        let alpha = chol.solve(&data.targets);
        Ok(GpPredictor { spec: *spec, inputs: data.inputs.clone(), chol: Some(chol), alpha })
    }

    pub fn predict(&self, x: &[f64]) -> Result<GaussianPrediction> {
        let prior_var = kernel_eval(&self.spec, x, x)?;
        let Some(chol) = &self.chol else {
            return Ok(GaussianPrediction { mean: 0.0, variance: prior_var });
        };
        if x.len() != self.inputs.ncols() {
            return Err(Error::invalid(format!(
                "predict: query dimension {} vs training dimension {}",
                x.len(),
                self.inputs.ncols()
            )));
        }
        let n = self.inputs.nrows();
        let mut kstar = DVector::zeros(n);
        for i in 0..n {
            let d2: f64 = (0..x.len()).map(|c| (self.inputs[(i, c)] - x[c]).powi(2)).sum();
            kstar[i] = self.spec.eval_scaled_dist(d2.sqrt() / self.spec.lengthscale);
        }
        let mean = kstar.dot(&self.alpha);
        // v = L^{-1} k*; predictive variance = k** - v'v, clamped at 0.
        let mut v = kstar;
        chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let variance = (prior_var - v.norm_squared()).max(0.0);
        Ok(GaussianPrediction { mean, variance })
    }
}

/// Standard GP posterior mean/variance at `x` given the dataset. An empty
/// dataset returns the prior (0, k(x, x)).
pub fn gp_condition(data: &GPDataset, spec: &KernelSpec, x: &[f64]) -> Result<GaussianPrediction> {
    GpPredictor::fit(data, spec)?.predict(x)
}

/// Gaussian log marginal likelihood of the targets under the GP prior plus noise.
pub fn gp_log_marginal(data: &GPDataset, spec: &KernelSpec) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::invalid("gp_log_marginal: dataset must contain at least one point"));
    }
    let mut k = gram_matrix(spec, &data.inputs, &data.inputs)?;
    for i in 0..n {
        k[(i, i)] += data.noise_diag[i];
    }
    let chol = chol_factor(&k, 0.0)?;
    let alpha = chol.solve(&data.targets);
    let log_det_half: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
    Ok(-0.5 * data.targets.dot(&alpha) - log_det_half - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_spec() -> KernelSpec {
        KernelSpec::matern32(1.0)
    }

    #[test]
    fn matern_zero_distance_is_amplitude() {
        let spec = KernelSpec::new(KernelFamily::Matern32, 2.5, 0.7).unwrap();
        let x = [0.3, -1.2, 4.0];
        assert_eq!(kernel_eval(&spec, &x, &x).unwrap(), 2.5);
    }

    #[test]
    fn matern_unit_distance_matches_closed_form() {
        // Independent evaluation of k(r) = s^2 (1 + sqrt(3) r / l) exp(-sqrt(3) r / l).
        let spec = toy_spec();
        let got = kernel_eval(&spec, &[0.0], &[1.0]).unwrap();
        let s = 3.0_f64.sqrt();
        let want = (1.0 + s) * (-s).exp();
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn rbf_at_one_lengthscale() {
        let spec = KernelSpec::rbf(2.0);
        let got = kernel_eval(&spec, &[0.0, 0.0], &[2.0, 0.0]).unwrap();
        assert!((got - (-0.5_f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_dimension_mismatch_errors() {
        let spec = toy_spec();
        assert!(matches!(
            kernel_eval(&spec, &[0.0], &[1.0, 2.0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gram_single_point_is_amplitude() {
        let spec = KernelSpec::new(KernelFamily::Matern32, 1.5, 1.0).unwrap();
        let a = DMatrix::from_row_slice(1, 2, &[0.5, -0.5]);
        let g = gram_matrix(&spec, &a, &a).unwrap();
        assert_eq!(g.nrows(), 1);
        assert_eq!(g[(0, 0)], 1.5);
    }

    #[test]
    fn gram_matches_entrywise_kernel_loop() {
        let mut rng = crate::seed::rng(7);
        let a = DMatrix::from_fn(5, 2, |_, _| rng.gen_range(-2.0..2.0));
        let b = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-2.0..2.0));
        for family in [KernelFamily::Matern32, KernelFamily::Rbf] {
            let spec = KernelSpec::new(family, 0.8, 1.3).unwrap();
            let g = gram_matrix(&spec, &a, &b).unwrap();
            for i in 0..5 {
                for j in 0..4 {
                    let want = kernel_eval(
                        &spec,
                        a.row(i).transpose().as_slice(),
                        b.row(j).transpose().as_slice(),
                    )
                    .unwrap();
                    assert!((g[(i, j)] - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn gram_self_is_symmetric() {
        let mut rng = crate::seed::rng(8);
        let a = DMatrix::from_fn(6, 3, |_, _| rng.gen_range(-3.0..3.0));
        let g = gram_matrix(&toy_spec(), &a, &a).unwrap();
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn chol_solve_identity_returns_rhs() {
        let m = DMatrix::identity(4, 4);
        let b = DVector::from_vec(vec![1.0, -2.0, 3.5, 0.25]);
        let x = chol_solve(&m, &b, 0.0).unwrap();
        assert!((x - b).norm() < 1e-14);
    }

    #[test]
    fn chol_solve_matches_dense_inverse() {
        let mut rng = crate::seed::rng(11);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let m = &a * a.transpose() + DMatrix::identity(3, 3) * 0.5;
        let b = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let x = chol_solve(&m, &b, 0.0).unwrap();
        let want = m.clone().try_inverse().unwrap() * &b;
        assert!((x - want).norm() < 1e-10);
    }

    #[test]
    fn chol_solve_indefinite_errors_after_escalation() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -4.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(chol_solve(&m, &b, 0.0), Err(Error::Numerical(_))));
    }

    fn dense_condition(data: &GPDataset, spec: &KernelSpec, x: &[f64]) -> (f64, f64) {
        // Textbook formulas through an explicit inverse; independent of the
        // Cholesky path used by the implementation.
        let n = data.len();
        let mut c = gram_matrix(spec, &data.inputs, &data.inputs).unwrap();
        for i in 0..n {
            c[(i, i)] += data.noise_diag[i];
        }
        let cinv = c.try_inverse().unwrap();
        let xm = DMatrix::from_row_slice(1, x.len(), x);
        let ks = gram_matrix(spec, &data.inputs, &xm).unwrap();
        let mean = (ks.transpose() * &cinv * &data.targets)[(0, 0)];
        let var = kernel_eval(spec, x, x).unwrap() - (ks.transpose() * &cinv * &ks)[(0, 0)];
        (mean, var)
    }

    #[test]
    fn gp_condition_empty_dataset_is_prior() {
        let spec = KernelSpec::new(KernelFamily::Matern32, 1.7, 1.0).unwrap();
        let data = GPDataset::new(DMatrix::zeros(0, 2), DVector::zeros(0), DVector::zeros(0)).unwrap();
        let p = gp_condition(&data, &spec, &[0.1, 0.2]).unwrap();
        assert_eq!(p.mean, 0.0);
        assert_eq!(p.variance, 1.7);
    }

    #[test]
    fn gp_condition_interpolates_training_point() {
        let spec = toy_spec();
        let data = GPDataset::new(
            DMatrix::from_row_slice(2, 1, &[0.0, 2.0]),
            DVector::from_vec(vec![1.0, -1.0]),
            DVector::from_element(2, 1e-12),
        )
        .unwrap();
        let p = gp_condition(&data, &spec, &[2.0]).unwrap();
        assert!((p.mean - (-1.0)).abs() < 1e-6);
    }

    #[test]
    fn gp_condition_matches_dense_oracle() {
        let spec = toy_spec();
        let data = GPDataset::new(
            DMatrix::from_row_slice(2, 1, &[-0.5, 1.0]),
            DVector::from_vec(vec![0.7, 0.2]),
            DVector::from_vec(vec![0.05, 0.1]),
        )
        .unwrap();
        for q in [-1.0, 0.0, 0.33, 2.5] {
            let p = gp_condition(&data, &spec, &[q]).unwrap();
            let (m, v) = dense_condition(&data, &spec, &[q]);
            assert!((p.mean - m).abs() < 1e-8, "mean at {q}");
            assert!((p.variance - v).abs() < 1e-8, "variance at {q}");
        }
    }

    #[test]
    fn gp_condition_variance_never_exceeds_prior_plus_noise() {
        let mut rng = crate::seed::rng(13);
        let spec = toy_spec();
        let inputs = DMatrix::from_fn(8, 2, |_, _| rng.gen_range(-2.0..2.0));
        let targets = DVector::from_fn(8, |_, _| rng.gen_range(-1.0..1.0));
        let noise = DVector::from_fn(8, |_, _| rng.gen_range(0.01..0.2));
        let max_noise = noise.max();
        let data = GPDataset::new(inputs, targets, noise).unwrap();
        for _ in 0..20 {
            let q = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let p = gp_condition(&data, &spec, &q).unwrap();
            let prior = kernel_eval(&spec, &q, &q).unwrap();
            assert!(p.variance <= prior + max_noise + 1e-12);
            assert!(p.variance >= 0.0);
        }
    }

    #[test]
    fn duplicated_rows_with_halved_noise_equivalence() {
        // Two identical observations with noise v carry the same information
        // as one observation with noise v/2.
        let spec = toy_spec();
        let v = 0.2;
        let dup = GPDataset::new(
            DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.5]),
            DVector::from_vec(vec![0.8, 0.8, -0.3]),
            DVector::from_vec(vec![v, v, 0.1]),
        )
        .unwrap();
        let single = GPDataset::new(
            DMatrix::from_row_slice(2, 1, &[0.0, 1.5]),
            DVector::from_vec(vec![0.8, -0.3]),
            DVector::from_vec(vec![v / 2.0, 0.1]),
        )
        .unwrap();
        for q in [-0.7, 0.0, 0.9, 2.0] {
            let a = gp_condition(&dup, &spec, &[q]).unwrap();
            let b = gp_condition(&single, &spec, &[q]).unwrap();
            let (bm, bv) = dense_condition(&single, &spec, &[q]);
            assert!((a.mean - b.mean).abs() < 1e-8);
            assert!((a.variance - b.variance).abs() < 1e-8);
            assert!((b.mean - bm).abs() < 1e-8 && (b.variance - bv).abs() < 1e-8);
        }
    }

    #[test]
    fn log_marginal_single_standard_normal() {
        let spec = KernelSpec::new(KernelFamily::Matern32, 1.0, 1.0).unwrap();
        let data = GPDataset::new(
            DMatrix::from_row_slice(1, 1, &[0.0]),
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![0.0]),
        )
        .unwrap();
        let got = gp_log_marginal(&data, &spec).unwrap();
        let want = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn log_marginal_matches_dense_density() {
        let mut rng = crate::seed::rng(17);
        let n = 5;
        let inputs = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-2.0..2.0));
        let targets = DVector::from_fn(n, |_, _| rng.gen_range(-1.5..1.5));
        let noise = DVector::from_fn(n, |_, _| rng.gen_range(0.05..0.3));
        let spec = toy_spec();
        let data = GPDataset::new(inputs, targets, noise).unwrap();

        let mut c = gram_matrix(&spec, &data.inputs, &data.inputs).unwrap();
        for i in 0..n {
            c[(i, i)] += data.noise_diag[i];
        }
        let det = c.determinant();
        let cinv = c.try_inverse().unwrap();
        let quad = (data.targets.transpose() * &cinv * &data.targets)[(0, 0)];
        let want = -0.5 * quad - 0.5 * det.ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

        let got = gp_log_marginal(&data, &spec).unwrap();
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn log_marginal_decreases_as_targets_leave_prior_mean() {
        let spec = toy_spec();
        let mk = |scale: f64| {
            GPDataset::new(
                DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]),
                DVector::from_vec(vec![0.5 * scale, -0.2 * scale, 0.9 * scale]),
                DVector::from_element(3, 0.1),
            )
            .unwrap()
        };
        let base = gp_log_marginal(&mk(1.0), &spec).unwrap();
        let far = gp_log_marginal(&mk(10.0), &spec).unwrap();
        let farther = gp_log_marginal(&mk(100.0), &spec).unwrap();
        assert!(base > far && far > farther);
    }

    proptest! {
        #[test]
        fn kernel_symmetric_and_bounded(
            xs in proptest::collection::vec(-50.0_f64..50.0, 1..5),
            ys in proptest::collection::vec(-50.0_f64..50.0, 1..5),
            l in 0.1_f64..10.0,
            amp in 0.1_f64..5.0,
        ) {
            let d = xs.len().min(ys.len());
            let x = &xs[..d];
            let y = &ys[..d];
            for family in [KernelFamily::Matern32, KernelFamily::Rbf] {
                let spec = KernelSpec::new(family, amp, l).unwrap();
                let kxy = kernel_eval(&spec, x, y).unwrap();
                let kyx = kernel_eval(&spec, y, x).unwrap();
                prop_assert_eq!(kxy, kyx);
                prop_assert!(kxy > 0.0 && kxy <= amp + 1e-15);
            }
        }
    }

    #[test]
    fn kernel_decays_below_1e10_at_100_lengthscales() {
        for family in [KernelFamily::Matern32, KernelFamily::Rbf] {
            let spec = KernelSpec::new(family, 1.0, 0.5).unwrap();
            let k = kernel_eval(&spec, &[0.0], &[50.0]).unwrap();
            assert!(k < 1e-10, "{family:?}: {k}");
        }
    }
}
