//! Posterior machinery: diagonal Gaussians, product-of-experts group fusion,
//! reparameterized sampling, and the three KL terms of the training objective.
//!
//! The content KL is evaluated per latent dimension against the chain joint,
//! using triangular solves against the structured factor rather than an
//! explicit inverse; the cost is O(K^3) per dimension, linear in D overall.

use crate::error::{Error, Result};
use crate::prior::{JointGaussianChain, RcgGrads, RcgParams};
use crate::tensor::{normal_draws, solve_lower, solve_lower_transposed, spd_solve, Rng, Vector};

pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Diagonal Gaussian given by mean and log-variance; log-variances are
/// clamped to [-20, 20] at construction so PoE precision sums cannot overflow.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vector,
    logvar: Vector,
}

impl DiagGaussian {
    pub fn new(mean: Vector, logvar: Vector) -> Result<Self> {
        if mean.len() != logvar.len() {
            return Err(Error::DimMismatch(format!(
                "mean has {} entries, logvar has {}",
                mean.len(),
                logvar.len()
            )));
        }
        let mut logvar = logvar;
        for v in logvar.as_mut_slice() {
            *v = v.clamp(LOGVAR_MIN, LOGVAR_MAX);
        }
        Ok(Self { mean, logvar })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: Vector::zeros(dim),
            logvar: Vector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn logvar(&self) -> &Vector {
        &self.logvar
    }

    pub fn var(&self, i: usize) -> f64 {
        self.logvar[i].exp()
    }

    pub fn log_density(&self, x: &Vector) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        const LN_2PI: f64 = 1.8378770664093453;
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let var = self.var(i);
            let diff = x[i] - self.mean[i];
            acc += -0.5 * (LN_2PI + self.logvar[i] + diff * diff / var);
        }
        acc
    }
}

/// Precision-weighted product of diagonal Gaussians: the fused precision is
/// the sum of member precisions, the fused mean their precision-weighted
/// average.
pub fn poe_fuse(members: &[DiagGaussian]) -> Result<DiagGaussian> {
    let first = members.first().ok_or(Error::EmptyExpertList { class: 0 })?;
    let dim = first.dim();
    let mut precision = Vector::zeros(dim);
    let mut weighted_mean = Vector::zeros(dim);
    for m in members {
        if m.dim() != dim {
            return Err(Error::DimMismatch("PoE members must share dimension".into()));
        }
        for i in 0..dim {
            let p = (-m.logvar()[i]).exp();
            precision[i] += p;
            weighted_mean[i] += p * m.mean()[i];
        }
    }
    let mut mean = Vector::zeros(dim);
    let mut logvar = Vector::zeros(dim);
    for i in 0..dim {
        mean[i] = weighted_mean[i] / precision[i];
        logvar[i] = -precision[i].ln();
    }
    DiagGaussian::new(mean, logvar)
}

/// Pulls gradients w.r.t. the fused (mean, logvar) back onto each member's
/// (mean, logvar). Assumes the fused logvar did not hit the clamp.
pub fn poe_backward(
    members: &[DiagGaussian],
    fused: &DiagGaussian,
    g_mean: &Vector,
    g_logvar: &Vector,
) -> Vec<(Vector, Vector)> {
    let dim = fused.dim();
    let mut grads = Vec::with_capacity(members.len());
    for m in members {
        let mut gm = Vector::zeros(dim);
        let mut gl = Vector::zeros(dim);
        for i in 0..dim {
            let p = (-m.logvar()[i]).exp();
            let total_p = (-fused.logvar()[i]).exp();
            let share = p / total_p;
            // fused mean: m_f = sum(p_n mu_n) / P.
            gm[i] = g_mean[i] * share;
            // d m_f / d lv_n = -p_n (mu_n - m_f) / P; d lv_f / d lv_n = p_n / P.
            gl[i] = g_mean[i] * (-share * (m.mean()[i] - fused.mean()[i]))
                + g_logvar[i] * share;
        }
        grads.push((gm, gl));
    }
    grads
}

/// x = mean + exp(logvar/2) * eps with the given noise.
pub fn reparam_with_eps(q: &DiagGaussian, eps: &Vector) -> Vector {
    debug_assert_eq!(q.dim(), eps.len());
    let mut x = Vector::zeros(q.dim());
    for i in 0..q.dim() {
        x[i] = q.mean()[i] + (0.5 * q.logvar()[i]).exp() * eps[i];
    }
    x
}

/// Reparameterized draw, consuming `dim` normals from the stream.
pub fn reparam_sample(q: &DiagGaussian, rng: &mut Rng) -> Vector {
    let eps = normal_draws(rng, q.dim());
    reparam_with_eps(q, &eps)
}

/// Backward pass of the reparameterization: maps dL/dx to (dL/dmean, dL/dlogvar).
pub fn reparam_backward(q: &DiagGaussian, eps: &Vector, g_x: &Vector) -> (Vector, Vector) {
    let dim = q.dim();
    let mut g_mean = Vector::zeros(dim);
    let mut g_logvar = Vector::zeros(dim);
    for i in 0..dim {
        g_mean[i] = g_x[i];
        g_logvar[i] = g_x[i] * 0.5 * (0.5 * q.logvar()[i]).exp() * eps[i];
    }
    (g_mean, g_logvar)
}

/// KL(q || N(0, I)) for a diagonal Gaussian.
pub fn kl_style(q: &DiagGaussian) -> f64 {
    let mut acc = 0.0;
    for i in 0..q.dim() {
        let var = q.var(i);
        let mu = q.mean()[i];
        acc += mu * mu + var - 1.0 - q.logvar()[i];
    }
    0.5 * acc
}

/// Value plus gradients w.r.t. the posterior mean and logvar.
pub fn kl_style_grad(q: &DiagGaussian) -> (f64, Vector, Vector) {
    let dim = q.dim();
    let mut g_mean = Vector::zeros(dim);
    let mut g_logvar = Vector::zeros(dim);
    for i in 0..dim {
        g_mean[i] = q.mean()[i];
        g_logvar[i] = 0.5 * (q.var(i) - 1.0);
    }
    (kl_style(q), g_mean, g_logvar)
}

/// Per-class fused content posteriors for one group batch. Classes with no
/// members in the batch are flagged as `None`.
#[derive(Clone, Debug)]
pub struct GroupPosterior {
    fused: Vec<Option<DiagGaussian>>,
}

impl GroupPosterior {
    /// Fuses each class's member posteriors with the product-of-experts rule.
    pub fn from_members(member_lists: &[Vec<DiagGaussian>]) -> Result<Self> {
        let mut fused = Vec::with_capacity(member_lists.len());
        for members in member_lists {
            if members.is_empty() {
                fused.push(None);
            } else {
                fused.push(Some(poe_fuse(members)?));
            }
        }
        Ok(Self { fused })
    }

    pub fn from_fused(fused: Vec<DiagGaussian>) -> Self {
        Self {
            fused: fused.into_iter().map(Some).collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.fused.len()
    }

    pub fn fused(&self, k: usize) -> Option<&DiagGaussian> {
        self.fused[k].as_ref()
    }

    pub fn missing_classes(&self) -> Vec<usize> {
        self.fused
            .iter()
            .enumerate()
            .filter_map(|(k, f)| f.is_none().then_some(k))
            .collect()
    }

    fn require_complete(&self) -> Result<Vec<&DiagGaussian>> {
        let mut out = Vec::with_capacity(self.fused.len());
        for (k, f) in self.fused.iter().enumerate() {
            match f {
                Some(g) => out.push(g),
                None => return Err(Error::IncompleteGroup { class: k }),
            }
        }
        Ok(out)
    }
}

/// KL between the fused per-class content posteriors (diagonal across classes)
/// and the chain joint, summed over latent dimensions.
pub fn kl_content(group: &GroupPosterior, joint: &JointGaussianChain) -> Result<f64> {
    let fused = group.require_complete()?;
    let k = joint.classes();
    let d = joint.dims();
    if fused.len() != k {
        return Err(Error::DimMismatch(format!(
            "group has {} classes, joint expects {k}",
            fused.len()
        )));
    }
    for (kk, f) in fused.iter().enumerate() {
        if f.dim() != d {
            return Err(Error::DimMismatch(format!(
                "fused posterior for class {kk} has dim {}, joint expects {d}",
                f.dim()
            )));
        }
    }
    let mut total = 0.0;
    for dd in 0..d {
        total += kl_content_dim(&fused, joint, dd)?.0;
    }
    Ok(total)
}

fn kl_content_dim(
    fused: &[&DiagGaussian],
    joint: &JointGaussianChain,
    dd: usize,
) -> Result<(f64, Vector, Vector)> {
    let k = joint.classes();
    let dim = joint.dim(dd);
    let chol = &dim.chol;

    let mut diff = Vector::zeros(k); // a - m
    let mut s = Vector::zeros(k); // fused variances at this dim
    let mut log_s = 0.0;
    for i in 0..k {
        diff[i] = dim.mean[i] - fused[i].mean()[dd];
        s[i] = fused[i].var(dd);
        log_s += fused[i].logvar()[dd];
    }

    // Quadratic form (a-m)^T C^-1 (a-m) via one forward solve.
    let w = solve_lower(chol, &diff)?;
    let quad = w.dot(&w);

    // Diagonal of C^-1 via forward solves with unit vectors.
    let mut trace = 0.0;
    let mut p_diag = Vector::zeros(k);
    let mut unit = Vector::zeros(k);
    for i in 0..k {
        unit.as_mut_slice().fill(0.0);
        unit[i] = 1.0;
        let col = solve_lower(chol, &unit)?;
        let pii = col.dot(&col);
        p_diag[i] = pii;
        trace += s[i] * pii;
    }

    let logdet_c: f64 = 2.0 * dim.sigmas.iter().map(|v| v.ln()).sum::<f64>();
    let value = 0.5 * (trace + quad - k as f64 + logdet_c - log_s);
    Ok((value, w, p_diag))
}

/// Gradients of the content KL for one group batch.
#[derive(Clone, Debug)]
pub struct ContentKlGrads {
    /// Per class: gradient w.r.t. the fused mean vector (length D).
    pub fused_mean: Vec<Vector>,
    /// Per class: gradient w.r.t. the fused logvar vector (length D).
    pub fused_logvar: Vec<Vector>,
    /// Gradient w.r.t. the raw prior parameters.
    pub prior: RcgGrads,
}

/// Content KL value together with gradients w.r.t. the fused posteriors and
/// the raw chain parameters. Everything is computed from triangular solves
/// against the structured factor.
pub fn kl_content_grad(
    group: &GroupPosterior,
    params: &RcgParams,
) -> Result<(f64, ContentKlGrads)> {
    let joint = params.build_joint();
    let fused = group.require_complete()?;
    let k = params.classes();
    let d = params.dims();
    if fused.len() != k {
        return Err(Error::DimMismatch(format!(
            "group has {} classes, prior expects {k}",
            fused.len()
        )));
    }

    let mut value = 0.0;
    let mut fused_mean = vec![Vector::zeros(d); k];
    let mut fused_logvar = vec![Vector::zeros(d); k];
    let mut prior_grads = RcgGrads::zeros_like(params);

    for dd in 0..d {
        let dim = joint.dim(dd);
        let chol = &dim.chol;
        let (v, w, p_diag) = kl_content_dim(&fused, &joint, dd)?;
        value += v;

        let mut s = Vector::zeros(k);
        for i in 0..k {
            s[i] = fused[i].var(dd);
        }

        // z = C^-1 (a - m).
        let z = solve_lower_transposed(chol, &w)?;

        for i in 0..k {
            // d/d m_i of the quadratic form; the trace and logdet terms do
            // not involve the fused mean.
            fused_mean[i][dd] = -z[i];
            // d/d logvar: 0.5 (P_ii s_i - 1).
            fused_logvar[i][dd] = 0.5 * (p_diag[i] * s[i] - 1.0);
        }

        // mean-path gradients: dKL/da_i = z_i; a_i = mu1 + sum_{j<=i} delta_j.
        let z_total: f64 = z.as_slice().iter().sum();
        prior_grads.mu1[dd] += z_total;
        let mut z_suffix = z_total;
        for j in 1..k {
            z_suffix -= z[j - 1];
            // d a / d delta_raw_j = delta_j on classes i >= j.
            prior_grads.delta_raw[dd][j - 1] += params.delta(dd, j) * z_suffix;
        }

        // covariance-path gradients: C = sum_l sigma_l^2 E_l with E_l the
        // all-ones block on {l..K}. For each free l >= 1:
        //   dKL/d(sigma_l^2) = 0.5 (T1 - T2 - T3)
        // with u = C^-1 1_{>=l}, T1 = sum_{i>=l} u_i, T2 = u^T S u,
        // T3 = (sum_{i>=l} z_i)^2.
        let mut ones_tail = Vector::zeros(k);
        for l in 1..k {
            for i in 0..k {
                ones_tail[i] = if i >= l { 1.0 } else { 0.0 };
            }
            let u = spd_solve(chol, &ones_tail)?;
            let mut t1 = 0.0;
            for i in l..k {
                t1 += u[i];
            }
            let mut t2 = 0.0;
            for i in 0..k {
                t2 += s[i] * u[i] * u[i];
            }
            let mut z_tail = 0.0;
            for i in l..k {
                z_tail += z[i];
            }
            let t3 = z_tail * z_tail;
            let g_sigma_sq = 0.5 * (t1 - t2 - t3);
            let sigma_l = dim.sigmas[l];
            let g_sigma = 2.0 * sigma_l * g_sigma_sq;
            let (d_delta_raw, d_sigma_raw) = params.sigma_partials(dd, l);
            prior_grads.delta_raw[dd][l - 1] += g_sigma * d_delta_raw;
            prior_grads.sigma_raw[dd][l - 1] += g_sigma * d_sigma_raw;
        }
    }

    Ok((
        value,
        ContentKlGrads {
            fused_mean,
            fused_logvar,
            prior: prior_grads,
        },
    ))
}

/// Variational objective from its five pieces; the reconstruction terms are
/// log-likelihood surrogates (negated L1 losses).
pub fn elbo_terms(recon_s: f64, recon_t: f64, kl_u_s: f64, kl_u_t: f64, kl_c: f64) -> f64 {
    recon_s + recon_t - kl_u_s - kl_u_t - kl_c
}

/// Monte Carlo oracle for the content KL: samples the fused across-class
/// product and averages log q - log p against the chain joint. Independent
/// of the closed-form path; used by the validation command and tests.
pub fn kl_content_mc(
    group: &GroupPosterior,
    joint: &JointGaussianChain,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let fused = group.require_complete()?;
    let k = joint.classes();
    let d = joint.dims();
    let mut rng = Rng::new(seed);
    let mut acc = 0.0;
    let mut anchors = crate::tensor::Matrix::zeros(k, d);
    for _ in 0..n {
        let mut log_q = 0.0;
        for (kk, q) in fused.iter().enumerate() {
            let x = reparam_sample(q, &mut rng);
            log_q += q.log_density(&x);
            for dd in 0..d {
                anchors.set(kk, dd, x[dd]);
            }
        }
        acc += log_q - joint.log_density(&anchors)?;
    }
    Ok(acc / n as f64)
}
