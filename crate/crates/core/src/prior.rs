//! Recursively conditional Gaussian (RCG) ordinal prior.
//!
//! Each latent dimension carries an independent chain over the K ordered
//! classes: c_1 ~ N(mu1, sigma_1^2) and c_k ~ N(c_{k-1} + delta_k, sigma_k^2).
//! The spacing/spread constraint delta_k >= m * sigma_k holds by construction
//! through the reparameterization delta_k = exp(raw) and
//! sigma_k = (delta_k / m) * sigmoid(raw), so a chain sample violates the
//! per-dimension ordering with probability about Phi(-m) per adjacent pair.
//! The joint over a chain is Gaussian with cumulative mean and running-sum
//! covariance, whose Cholesky factor is known in closed form: L[i][j] = sigma_j
//! for j <= i.

use std::thread;

use crate::error::{Error, Result};
use crate::param::ParamVec;
use crate::tensor::{solve_lower, Matrix, Rng, SpdMatrix, Vector};

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf approximation;
/// absolute error below 1e-7, plenty for comparing Monte Carlo rates whose
/// standard errors sit around 1e-4.
pub fn normal_cdf(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * z.abs());
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf_abs = 1.0 - poly * (-z * z).exp();
    let erf = if z >= 0.0 { erf_abs } else { -erf_abs };
    0.5 * (1.0 + erf)
}

/// Free parameters of the prior, one chain per latent dimension.
///
/// `sigma_1` is fixed to 1 for every dimension; the free per-dimension
/// parameters are `mu1` plus unconstrained `delta_raw`/`sigma_raw` for the
/// steps k = 2..K (there is no step into the first class).
#[derive(Clone, Debug)]
pub struct RcgParams {
    classes: usize,
    dims: usize,
    sigma_rule: f64,
    mu1: Vec<f64>,
    delta_raw: Vec<Vec<f64>>,
    sigma_raw: Vec<Vec<f64>>,
}

impl RcgParams {
    pub fn new(
        classes: usize,
        dims: usize,
        sigma_rule: f64,
        mu1: Vec<f64>,
        delta_raw: Vec<Vec<f64>>,
        sigma_raw: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if classes == 0 || dims == 0 {
            return Err(Error::Invalid("classes and dims must be positive".into()));
        }
        if sigma_rule.is_nan() || sigma_rule <= 0.0 {
            return Err(Error::Invalid("sigma_rule must be positive".into()));
        }
        if mu1.len() != dims {
            return Err(Error::DimMismatch(format!(
                "mu1 has {} entries, expected {dims}",
                mu1.len()
            )));
        }
        for (name, raw) in [("delta_raw", &delta_raw), ("sigma_raw", &sigma_raw)] {
            if raw.len() != dims {
                return Err(Error::DimMismatch(format!(
                    "{name} has {} rows, expected {dims}",
                    raw.len()
                )));
            }
            for (d, row) in raw.iter().enumerate() {
                if row.len() != classes - 1 {
                    return Err(Error::DimMismatch(format!(
                        "{name}[{d}] has {} entries, expected {}",
                        row.len(),
                        classes - 1
                    )));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Invalid(format!("{name}[{d}] has non-finite entries")));
                }
            }
        }
        if mu1.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("mu1 has non-finite entries".into()));
        }
        Ok(Self {
            classes,
            dims,
            sigma_rule,
            mu1,
            delta_raw,
            sigma_raw,
        })
    }

    /// Centered chain with unit steps: mu1 = -(K-1)/2, delta_k = 1,
    /// sigma_k = delta_k / (2m).
    pub fn default_init(classes: usize, dims: usize, sigma_rule: f64) -> Self {
        let mu1 = vec![-0.5 * (classes as f64 - 1.0); dims];
        let raw = vec![vec![0.0; classes.saturating_sub(1)]; dims];
        Self::new(classes, dims, sigma_rule, mu1, raw.clone(), raw).expect("valid default init")
    }

    /// Random raw draws, used by validation commands and property tests.
    pub fn random(classes: usize, dims: usize, sigma_rule: f64, rng: &mut Rng) -> Self {
        let mu1 = (0..dims).map(|_| rng.next_normal()).collect();
        let delta_raw = (0..dims)
            .map(|_| (0..classes - 1).map(|_| rng.next_range(-0.7, 0.9)).collect())
            .collect();
        let sigma_raw = (0..dims)
            .map(|_| (0..classes - 1).map(|_| rng.next_range(-1.5, 1.5)).collect())
            .collect();
        Self::new(classes, dims, sigma_rule, mu1, delta_raw, sigma_raw).expect("valid random init")
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn sigma_rule(&self) -> f64 {
        self.sigma_rule
    }

    pub fn mu1(&self, d: usize) -> f64 {
        self.mu1[d]
    }

    pub fn mu1_all(&self) -> &[f64] {
        &self.mu1
    }

    pub fn delta_raw(&self) -> &[Vec<f64>] {
        &self.delta_raw
    }

    pub fn sigma_raw(&self) -> &[Vec<f64>] {
        &self.sigma_raw
    }

    /// Step size into class `k` (0-based, k >= 1): delta = exp(raw) > 0.
    pub fn delta(&self, d: usize, k: usize) -> f64 {
        debug_assert!((1..self.classes).contains(&k));
        self.delta_raw[d][k - 1].exp()
    }

    /// Conditional spread of class `k` (0-based). sigma_1 = 1 exactly;
    /// for k >= 1, sigma = (delta / m) * sigmoid(raw) in (0, delta/m).
    pub fn sigma(&self, d: usize, k: usize) -> f64 {
        if k == 0 {
            return 1.0;
        }
        (self.delta(d, k) / self.sigma_rule) * sigmoid(self.sigma_raw[d][k - 1])
    }

    /// d sigma / d delta_raw and d sigma / d sigma_raw at step k >= 1.
    pub fn sigma_partials(&self, d: usize, k: usize) -> (f64, f64) {
        debug_assert!(k >= 1);
        let s = sigmoid(self.sigma_raw[d][k - 1]);
        let sigma = self.sigma(d, k);
        (sigma, sigma * (1.0 - s))
    }

    /// Exact joint per dimension: mean a_k = mu1 + sum delta, covariance
    /// C_ij = sum of sigma^2 up to min(i,j), and the structured factor
    /// L_ij = sigma_j for j <= i.
    pub fn build_joint(&self) -> JointGaussianChain {
        let k = self.classes;
        let mut per_dim = Vec::with_capacity(self.dims);
        for d in 0..self.dims {
            let mut mean = Vector::zeros(k);
            mean[0] = self.mu1[d];
            for i in 1..k {
                mean[i] = mean[i - 1] + self.delta(d, i);
            }
            let sigmas: Vec<f64> = (0..k).map(|i| self.sigma(d, i)).collect();

            let mut cov = Matrix::zeros(k, k);
            let mut running = 0.0;
            for i in 0..k {
                running += sigmas[i] * sigmas[i];
                for j in i..k {
                    cov.set(i, j, running);
                    cov.set(j, i, running);
                }
            }

            let mut chol = Matrix::zeros(k, k);
            for i in 0..k {
                for j in 0..=i {
                    chol.set(i, j, sigmas[j]);
                }
            }

            per_dim.push(JointDim {
                mean,
                cov: SpdMatrix::new(cov).expect("chain covariance is symmetric by construction"),
                chol,
                sigmas,
            });
        }
        JointGaussianChain { per_dim }
    }

    /// Ancestral sampling through the conditionals, dimension-major order.
    pub fn sample_chain(&self, rng: &mut Rng) -> PriorSample {
        let mut anchors = Matrix::zeros(self.classes, self.dims);
        for d in 0..self.dims {
            let mut prev = self.mu1[d] + self.sigma(d, 0) * rng.next_normal();
            anchors.set(0, d, prev);
            for k in 1..self.classes {
                let c = prev + self.delta(d, k) + self.sigma(d, k) * rng.next_normal();
                anchors.set(k, d, c);
                prev = c;
            }
        }
        PriorSample { anchors }
    }

    /// Fraction of chain samples with c_k <= c_{k-1}, per adjacent pair and
    /// dimension; (K-1) x D. Splits `n` over `workers` child-seeded streams
    /// and reduces in worker order.
    pub fn poset_violation_rate(&self, n: usize, seed: u64, workers: usize) -> Matrix {
        let workers = workers.max(1);
        let pairs = self.classes - 1;
        let counts = self.map_reduce_samples(n, seed, workers, move |sample, acc: &mut Vec<u64>| {
            for d in 0..sample.anchors.cols() {
                for k in 1..sample.anchors.rows() {
                    if sample.anchors.get(k, d) <= sample.anchors.get(k - 1, d) {
                        acc[(k - 1) * sample.anchors.cols() + d] += 1;
                    }
                }
            }
        });
        let mut rates = Matrix::zeros(pairs, self.dims);
        for p in 0..pairs {
            for d in 0..self.dims {
                rates.set(p, d, counts[p * self.dims + d] as f64 / n as f64);
            }
        }
        rates
    }

    /// Monte Carlo estimate of the per-dimension mean and covariance of the
    /// chain, for checking against `build_joint`.
    pub fn estimate_moments(&self, n: usize, seed: u64, workers: usize) -> MomentEstimate {
        let k = self.classes;
        let d = self.dims;
        // Accumulator layout: per dim, K sums then K*K cross-product sums.
        let stride = k + k * k;
        let sums = self.map_reduce_samples(n, seed, workers.max(1), move |sample, acc: &mut Vec<f64>| {
            for dd in 0..d {
                let base = dd * stride;
                for i in 0..k {
                    let ci = sample.anchors.get(i, dd);
                    acc[base + i] += ci;
                    for j in 0..k {
                        acc[base + k + i * k + j] += ci * sample.anchors.get(j, dd);
                    }
                }
            }
        });
        let nf = n as f64;
        let mut means = Vec::with_capacity(d);
        let mut covs = Vec::with_capacity(d);
        for dd in 0..d {
            let base = dd * stride;
            let mut mean = Vector::zeros(k);
            for i in 0..k {
                mean[i] = sums[base + i] / nf;
            }
            let mut cov = Matrix::zeros(k, k);
            for i in 0..k {
                for j in 0..k {
                    cov.set(i, j, sums[base + k + i * k + j] / nf - mean[i] * mean[j]);
                }
            }
            means.push(mean);
            covs.push(cov);
        }
        MomentEstimate { n, means, covs }
    }

    fn map_reduce_samples<A, F>(&self, n: usize, seed: u64, workers: usize, fold: F) -> A
    where
        A: Accumulator + Send,
        F: Fn(&PriorSample, &mut A) + Sync,
    {
        let size = self.acc_size();
        if workers <= 1 {
            let mut acc = A::zeros(size);
            let mut rng = Rng::new(seed);
            for _ in 0..n {
                let s = self.sample_chain(&mut rng);
                fold(&s, &mut acc);
            }
            return acc;
        }
        let per = n / workers;
        let rem = n % workers;
        let fold_ref = &fold;
        let partials: Vec<A> = thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let count = per + if w == workers - 1 { rem } else { 0 };
                    scope.spawn(move || {
                        let mut acc = A::zeros(size);
                        let mut rng = Rng::new(Rng::child_seed(seed, w as u64));
                        for _ in 0..count {
                            let s = self.sample_chain(&mut rng);
                            fold_ref(&s, &mut acc);
                        }
                        acc
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker")).collect()
        });
        let mut total = A::zeros(size);
        for p in partials {
            total.merge(&p);
        }
        total
    }

    fn acc_size(&self) -> usize {
        let k = self.classes;
        // Large enough for either accumulator shape used above.
        self.dims * (k + k * k)
    }
}

trait Accumulator {
    fn zeros(size: usize) -> Self;
    fn merge(&mut self, other: &Self);
}

impl Accumulator for Vec<u64> {
    fn zeros(size: usize) -> Self {
        vec![0; size]
    }
    fn merge(&mut self, other: &Self) {
        for (a, b) in self.iter_mut().zip(other) {
            *a += b;
        }
    }
}

impl Accumulator for Vec<f64> {
    fn zeros(size: usize) -> Self {
        vec![0.0; size]
    }
    fn merge(&mut self, other: &Self) {
        for (a, b) in self.iter_mut().zip(other) {
            *a += b;
        }
    }
}

/// Exact joint Gaussian of one chain per latent dimension.
#[derive(Clone, Debug)]
pub struct JointGaussianChain {
    per_dim: Vec<JointDim>,
}

#[derive(Clone, Debug)]
pub struct JointDim {
    pub mean: Vector,
    pub cov: SpdMatrix,
    /// Structured factor L_ij = sigma_j for j <= i; equals the generic
    /// Cholesky factor of `cov`.
    pub chol: Matrix,
    pub sigmas: Vec<f64>,
}

impl JointGaussianChain {
    pub fn dims(&self) -> usize {
        self.per_dim.len()
    }

    pub fn classes(&self) -> usize {
        self.per_dim[0].mean.len()
    }

    pub fn dim(&self, d: usize) -> &JointDim {
        &self.per_dim[d]
    }

    /// Joint log density of a K x D anchor matrix, evaluated per dimension
    /// with triangular solves against the structured factor.
    pub fn log_density(&self, anchors: &Matrix) -> Result<f64> {
        let k = self.classes();
        let d = self.dims();
        if anchors.rows() != k || anchors.cols() != d {
            return Err(Error::DimMismatch(format!(
                "anchors are {}x{}, joint expects {k}x{d}",
                anchors.rows(),
                anchors.cols()
            )));
        }
        const LN_2PI: f64 = 1.8378770664093453;
        let mut total = 0.0;
        for dd in 0..d {
            let dim = &self.per_dim[dd];
            let mut diff = Vector::zeros(k);
            for i in 0..k {
                diff[i] = anchors.get(i, dd) - dim.mean[i];
            }
            let w = solve_lower(&dim.chol, &diff)?;
            let quad = w.dot(&w);
            let logdet: f64 = 2.0 * dim.sigmas.iter().map(|s| s.ln()).sum::<f64>();
            total += -0.5 * (k as f64 * LN_2PI + logdet + quad);
        }
        Ok(total)
    }
}

/// One ancestral draw of all class anchors; row k is the anchor of class k.
#[derive(Clone, Debug)]
pub struct PriorSample {
    pub anchors: Matrix,
}

/// Checks the ordinal distance property on a K x D anchor matrix: for every
/// triple i < j < k, the outer pair must be strictly farther apart than both
/// inner pairs.
pub fn triplet_check(anchors: &Matrix) -> bool {
    let k = anchors.rows();
    let dist2 = |a: usize, b: usize| -> f64 {
        let mut acc = 0.0;
        for d in 0..anchors.cols() {
            let diff = anchors.get(a, d) - anchors.get(b, d);
            acc += diff * diff;
        }
        acc
    };
    for i in 0..k {
        for j in (i + 1)..k {
            for l in (j + 1)..k {
                let outer = dist2(i, l);
                if outer <= dist2(i, j) || outer <= dist2(j, l) {
                    return false;
                }
            }
        }
    }
    true
}

/// Gradient container mirroring the free parameters of `RcgParams`.
#[derive(Clone, Debug)]
pub struct RcgGrads {
    pub mu1: Vec<f64>,
    pub delta_raw: Vec<Vec<f64>>,
    pub sigma_raw: Vec<Vec<f64>>,
}

impl RcgGrads {
    pub fn zeros_like(params: &RcgParams) -> Self {
        Self {
            mu1: vec![0.0; params.dims],
            delta_raw: vec![vec![0.0; params.classes - 1]; params.dims],
            sigma_raw: vec![vec![0.0; params.classes - 1]; params.dims],
        }
    }

    pub fn add_scaled(&mut self, other: &RcgGrads, w: f64) {
        for (a, b) in self.mu1.iter_mut().zip(&other.mu1) {
            *a += w * b;
        }
        for (ar, br) in self.delta_raw.iter_mut().zip(&other.delta_raw) {
            for (a, b) in ar.iter_mut().zip(br) {
                *a += w * b;
            }
        }
        for (ar, br) in self.sigma_raw.iter_mut().zip(&other.sigma_raw) {
            for (a, b) in ar.iter_mut().zip(br) {
                *a += w * b;
            }
        }
    }
}

// Flat order: mu1 per dim, then delta_raw rows, then sigma_raw rows.
fn rcg_flat_name(dims: usize, steps: usize, i: usize) -> String {
    if i < dims {
        return format!("prior.mu1[{i}]");
    }
    let i = i - dims;
    if i < dims * steps {
        return format!("prior.delta_raw[{},{}]", i / steps, i % steps);
    }
    let i = i - dims * steps;
    format!("prior.sigma_raw[{},{}]", i / steps, i % steps)
}

impl ParamVec for RcgParams {
    fn param_count(&self) -> usize {
        self.dims + 2 * self.dims * (self.classes - 1)
    }

    fn param(&self, i: usize) -> f64 {
        let steps = self.classes - 1;
        if i < self.dims {
            return self.mu1[i];
        }
        let j = i - self.dims;
        if j < self.dims * steps {
            return self.delta_raw[j / steps][j % steps];
        }
        let j = j - self.dims * steps;
        self.sigma_raw[j / steps][j % steps]
    }

    fn set_param(&mut self, i: usize, v: f64) {
        let steps = self.classes - 1;
        if i < self.dims {
            self.mu1[i] = v;
            return;
        }
        let j = i - self.dims;
        if j < self.dims * steps {
            self.delta_raw[j / steps][j % steps] = v;
            return;
        }
        let j = j - self.dims * steps;
        self.sigma_raw[j / steps][j % steps] = v;
    }

    fn param_name(&self, i: usize) -> String {
        rcg_flat_name(self.dims, self.classes - 1, i)
    }
}

impl ParamVec for RcgGrads {
    fn param_count(&self) -> usize {
        self.mu1.len() + 2 * self.mu1.len() * self.delta_raw[0].len()
    }

    fn param(&self, i: usize) -> f64 {
        let dims = self.mu1.len();
        let steps = self.delta_raw[0].len();
        if i < dims {
            return self.mu1[i];
        }
        let j = i - dims;
        if j < dims * steps {
            return self.delta_raw[j / steps][j % steps];
        }
        let j = j - dims * steps;
        self.sigma_raw[j / steps][j % steps]
    }

    fn set_param(&mut self, i: usize, v: f64) {
        let dims = self.mu1.len();
        let steps = self.delta_raw[0].len();
        if i < dims {
            self.mu1[i] = v;
            return;
        }
        let j = i - dims;
        if j < dims * steps {
            self.delta_raw[j / steps][j % steps] = v;
            return;
        }
        let j = j - dims * steps;
        self.sigma_raw[j / steps][j % steps] = v;
    }

    fn param_name(&self, i: usize) -> String {
        rcg_flat_name(self.mu1.len(), self.delta_raw[0].len(), i)
    }
}

/// One row of the Monte Carlo moment check against the closed forms.
#[derive(Clone, Debug)]
pub struct MomentRow {
    pub kind: &'static str,
    pub dim: usize,
    pub i: usize,
    pub j: usize,
    pub exact: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub z: f64,
}

#[derive(Clone, Debug)]
pub struct MomentEstimate {
    pub n: usize,
    pub means: Vec<Vector>,
    pub covs: Vec<Matrix>,
}

/// Compares Monte Carlo chain moments with the closed-form joint; one row per
/// mean entry and per unique covariance entry, with z = (est - exact)/stderr.
pub fn moment_check(params: &RcgParams, n: usize, seed: u64, workers: usize) -> Vec<MomentRow> {
    let joint = params.build_joint();
    let est = params.estimate_moments(n, seed, workers);
    let nf = n as f64;
    let mut rows = Vec::new();
    for d in 0..params.dims() {
        let dim = joint.dim(d);
        let k = params.classes();
        for i in 0..k {
            let exact = dim.mean[i];
            let stderr = (dim.cov.base().get(i, i) / nf).sqrt();
            let estimate = est.means[d][i];
            rows.push(MomentRow {
                kind: "mean",
                dim: d,
                i,
                j: i,
                exact,
                estimate,
                stderr,
                z: (estimate - exact) / stderr,
            });
        }
        for i in 0..k {
            for j in i..k {
                let exact = dim.cov.base().get(i, j);
                // Var of a Gaussian covariance estimate: (C_ii C_jj + C_ij^2)/n.
                let var = (dim.cov.base().get(i, i) * dim.cov.base().get(j, j)
                    + exact * exact)
                    / nf;
                let stderr = var.sqrt();
                let estimate = est.covs[d].get(i, j);
                rows.push(MomentRow {
                    kind: "cov",
                    dim: d,
                    i,
                    j,
                    exact,
                    estimate,
                    stderr,
                    z: (estimate - exact) / stderr,
                });
            }
        }
    }
    rows
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tensor::cholesky;

    /// Params matching the K=3 worked example: mu1 = 0, delta = 3, sigma = 1.
    /// sigmoid(60) rounds to 1.0 exactly in f64, so sigma = 3/3 = 1 exactly.
    pub(crate) fn eq11_params() -> RcgParams {
        RcgParams::new(
            3,
            1,
            3.0,
            vec![0.0],
            vec![vec![3.0_f64.ln(), 3.0_f64.ln()]],
            vec![vec![60.0, 60.0]],
        )
        .unwrap()
    }

    #[test]
    fn joint_matches_worked_example() {
        let joint = eq11_params().build_joint();
        let dim = joint.dim(0);
        for (i, want) in [0.0, 3.0, 6.0].iter().enumerate() {
            assert!((dim.mean[i] - want).abs() < 1e-12, "mean[{i}]");
        }
        let expected = [
            [1.0, 1.0, 1.0],
            [1.0, 2.0, 2.0],
            [1.0, 2.0, 3.0],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (dim.cov.base().get(i, j) - expected[i][j]).abs() < 1e-12,
                    "cov[{i}][{j}]"
                );
            }
        }
    }

    #[test]
    fn single_class_joint() {
        let p = RcgParams::new(1, 2, 3.0, vec![0.7, -0.2], vec![vec![], vec![]], vec![vec![], vec![]])
            .unwrap();
        let joint = p.build_joint();
        assert_eq!(joint.dim(0).mean[0], 0.7);
        assert_eq!(joint.dim(1).mean[0], -0.2);
        assert_eq!(joint.dim(0).cov.base().get(0, 0), 1.0);
    }

    #[test]
    fn structured_factor_equals_generic_cholesky() {
        let mut rng = Rng::new(31);
        for trial in 0..100 {
            let k = 1 + rng.next_below(6);
            let d = 1 + rng.next_below(3);
            let p = RcgParams::random(k, d, 3.0, &mut rng);
            let joint = p.build_joint();
            for dd in 0..d {
                let generic = cholesky(joint.dim(dd).cov.base()).unwrap();
                let diff = joint.dim(dd).chol.max_abs_diff(&generic);
                assert!(diff < 1e-10, "trial {trial} dim {dd}: diff {diff}");
            }
        }
    }

    #[test]
    fn chain_moments_match_joint() {
        let p = eq11_params();
        let rows = moment_check(&p, 100_000, 90, 1);
        for row in rows {
            assert!(
                row.z.abs() < 3.0,
                "{} d{} ({},{}): z = {}",
                row.kind,
                row.dim,
                row.i,
                row.j,
                row.z
            );
        }
    }

    #[test]
    fn chain_cov_c1_c3_is_sigma1_squared() {
        // Cov(c_1, c_3) = sigma_1^2 = 1 regardless of later steps.
        let p = eq11_params();
        let est = p.estimate_moments(100_000, 7, 1);
        let stderr = ((1.0 * 3.0 + 1.0) / 1e5_f64).sqrt();
        assert!((est.covs[0].get(0, 2) - 1.0).abs() < 3.0 * stderr);
    }

    #[test]
    fn degenerate_spread_gives_exact_steps() {
        // sigma_raw -> -inf: sigmoid underflows to 0, steps become exact.
        let p = RcgParams::new(
            3,
            2,
            3.0,
            vec![0.0, 1.0],
            vec![vec![3.0_f64.ln(); 2]; 2],
            vec![vec![-800.0; 2]; 2],
        )
        .unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let s = p.sample_chain(&mut rng);
            for d in 0..2 {
                for k in 1..3 {
                    // sigma underflows to exactly 0: no noise enters the step.
                    assert_eq!(s.anchors.get(k, d), s.anchors.get(k - 1, d) + p.delta(d, k));
                }
            }
        }
        let rates = p.poset_violation_rate(10_000, 1, 1);
        for pair in 0..2 {
            for d in 0..2 {
                assert_eq!(rates.get(pair, d), 0.0);
            }
        }
    }

    #[test]
    fn log_density_at_mean_is_normalizer() {
        let p = eq11_params();
        let joint = p.build_joint();
        let mut at_mean = Matrix::zeros(3, 1);
        for i in 0..3 {
            at_mean.set(i, 0, joint.dim(0).mean[i]);
        }
        let got = joint.log_density(&at_mean).unwrap();
        let logdet = joint.dim(0).sigmas.iter().map(|s| 2.0 * s.ln()).sum::<f64>();
        let want = -0.5 * (3.0 * 1.8378770664093453 + logdet);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn log_density_scalar_standard_normal() {
        let p = RcgParams::new(1, 1, 3.0, vec![0.0], vec![vec![]], vec![vec![]]).unwrap();
        let joint = p.build_joint();
        let x = Matrix::zeros(1, 1);
        let got = joint.log_density(&x).unwrap();
        assert!((got - (-0.9189385332046727)).abs() < 1e-12);
    }

    #[test]
    fn log_density_matches_chain_factorization() {
        // Chain-rule oracle: log p(c1) + sum log p(ck | c_{k-1}) from the
        // conditionals must equal the joint form within 1e-8.
        let mut rng = Rng::new(17);
        for _ in 0..20 {
            let k = 2 + rng.next_below(4);
            let d = 1 + rng.next_below(3);
            let p = RcgParams::random(k, d, 3.0, &mut rng);
            let joint = p.build_joint();
            let sample = p.sample_chain(&mut rng);

            let mut chain = 0.0;
            for dd in 0..d {
                for kk in 0..k {
                    let (mean, sd) = if kk == 0 {
                        (p.mu1(dd), p.sigma(dd, 0))
                    } else {
                        (sample.anchors.get(kk - 1, dd) + p.delta(dd, kk), p.sigma(dd, kk))
                    };
                    let z = (sample.anchors.get(kk, dd) - mean) / sd;
                    chain += -0.5 * (1.8378770664093453 + z * z) - sd.ln();
                }
            }
            let joint_ld = joint.log_density(&sample.anchors).unwrap();
            assert!(
                (chain - joint_ld).abs() < 1e-8,
                "chain {chain} vs joint {joint_ld}"
            );
        }
    }

    #[test]
    fn violation_rate_matches_gaussian_cdf() {
        // P(c_k <= c_{k-1}) = Phi(-delta/sigma). At ratio 3 that is 0.00135,
        // at ratio 2 it is 0.02275.
        let three = RcgParams::new(
            3,
            1,
            3.0,
            vec![0.0],
            vec![vec![0.3, 0.3]],
            vec![vec![60.0, 60.0]],
        )
        .unwrap();
        let rates3 = three.poset_violation_rate(100_000, 1234, 1);
        for pair in 0..2 {
            let r = rates3.get(pair, 0);
            assert!((r - 0.00135).abs() < 0.0012, "3-sigma pair {pair}: {r}");
        }

        let two = RcgParams::new(
            3,
            1,
            2.0,
            vec![0.0],
            vec![vec![0.3, 0.3]],
            vec![vec![60.0, 60.0]],
        )
        .unwrap();
        let rates2 = two.poset_violation_rate(100_000, 1234, 1);
        for pair in 0..2 {
            let r = rates2.get(pair, 0);
            assert!((r - 0.02275).abs() < 0.003, "2-sigma pair {pair}: {r}");
        }
    }

    #[test]
    fn violation_rate_threaded_reduction_is_reproducible() {
        let p = eq11_params();
        let a = p.poset_violation_rate(20_000, 5, 4);
        let b = p.poset_violation_rate(20_000, 5, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn constraint_holds_for_any_raw_values() {
        let mut rng = Rng::new(99);
        for _ in 0..10_000 {
            let m = [1.0, 2.0, 3.0][rng.next_below(3)];
            let delta_raw = rng.next_range(-6.0, 6.0);
            let sigma_raw = rng.next_range(-30.0, 30.0);
            let p = RcgParams::new(2, 1, m, vec![0.0], vec![vec![delta_raw]], vec![vec![sigma_raw]])
                .unwrap();
            let delta = p.delta(0, 1);
            let sigma = p.sigma(0, 1);
            assert!(sigma > 0.0);
            // Exact in real arithmetic; allow a few ulps of rounding slack.
            assert!(m * sigma <= delta * (1.0 + 4.0 * f64::EPSILON));
        }
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-9);
        assert!((normal_cdf(-3.0) - 0.0013498980316301).abs() < 1e-6);
        assert!((normal_cdf(-2.0) - 0.0227501319481792).abs() < 1e-6);
        for x in [-2.3, -0.4, 0.0, 1.1, 2.9] {
            assert!((normal_cdf(x) + normal_cdf(-x) - 1.0).abs() < 2e-7);
        }
    }

    #[test]
    fn triplet_check_examples() {
        // Elementwise strictly increasing rows satisfy the property.
        let inc = Matrix::new(3, 2, vec![0.0, 0.0, 1.0, 2.0, 3.0, 5.0]).unwrap();
        assert!(triplet_check(&inc));

        let equal = Matrix::new(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(!triplet_check(&equal));

        let unordered = Matrix::new(3, 1, vec![0.0, 5.0, 1.0]).unwrap();
        assert!(!triplet_check(&unordered));
    }

    #[test]
    fn poset_aligned_triples_pass_triplet_check() {
        // Brute-force over random strictly increasing anchor sets.
        let mut rng = Rng::new(8);
        for _ in 0..1000 {
            let k = 3 + rng.next_below(3);
            let d = 1 + rng.next_below(4);
            let mut anchors = Matrix::zeros(k, d);
            for dd in 0..d {
                let mut v = rng.next_range(-2.0, 2.0);
                anchors.set(0, dd, v);
                for kk in 1..k {
                    v += rng.next_range(0.05, 1.5);
                    anchors.set(kk, dd, v);
                }
            }
            assert!(triplet_check(&anchors));
        }
    }

    #[test]
    fn argsort_by_any_coordinate_recovers_class_order() {
        let p = eq11_params();
        let mut rng = Rng::new(21);
        let mut checked = 0;
        while checked < 200 {
            let s = p.sample_chain(&mut rng);
            let aligned = (0..p.dims()).all(|d| {
                (1..p.classes()).all(|k| s.anchors.get(k, d) > s.anchors.get(k - 1, d))
            });
            if !aligned {
                continue;
            }
            for d in 0..p.dims() {
                let mut order: Vec<usize> = (0..p.classes()).collect();
                order.sort_by(|&a, &b| {
                    s.anchors
                        .get(a, d)
                        .partial_cmp(&s.anchors.get(b, d))
                        .unwrap()
                });
                let expected: Vec<usize> = (0..p.classes()).collect();
                assert_eq!(order, expected);
            }
            checked += 1;
        }
    }
}
