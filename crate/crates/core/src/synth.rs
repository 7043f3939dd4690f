//! Synthetic cross-domain ordinal benchmark: a generator that mirrors the
//! content/style graphical model, ordinal evaluation metrics, and the
//! prior-comparison experiment harness.
//!
//! Ground-truth class anchors are drawn from a fixed chain (step 3, spread 1
//! per dimension) and redrawn until they are elementwise increasing, so the
//! task genuinely carries ordinal structure. Observations mix content and
//! style linearly, pass through tanh, and receive additive noise; the target
//! domain perturbs the mixing matrix and rotates the style subspace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::RcgParams;
use crate::tensor::{Matrix, Rng, Vector};
use crate::trainer::{fit, PriorKind, TrainConfig, TrainData};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub content_dim: usize,
    pub style_dim: usize,
    pub obs_dim: usize,
    pub per_class_source: usize,
    pub per_class_target: usize,
    pub per_class_test: usize,
    pub domain_shift_scale: f64,
    pub label_noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            content_dim: 4,
            style_dim: 4,
            obs_dim: 32,
            per_class_source: 40,
            per_class_target: 40,
            per_class_test: 20,
            domain_shift_scale: 1.5,
            label_noise_rate: 0.0,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("classes", self.classes),
            ("content_dim", self.content_dim),
            ("style_dim", self.style_dim),
            ("obs_dim", self.obs_dim),
            ("per_class_source", self.per_class_source),
            ("per_class_target", self.per_class_target),
            ("per_class_test", self.per_class_test),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.domain_shift_scale.is_nan() || self.domain_shift_scale < 0.0 {
            return Err(Error::Config("domain_shift_scale must be >= 0".into()));
        }
        if !(0.0..0.5).contains(&self.label_noise_rate) {
            return Err(Error::Config("label_noise_rate must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Generated benchmark data. Target training labels are dropped at
/// generation time and are not recoverable from this struct.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub source_x: Vec<Vector>,
    pub source_y: Vec<usize>,
    pub target_train_x: Vec<Vector>,
    pub target_test_x: Vec<Vector>,
    pub target_test_y: Vec<usize>,
    /// True class anchors (K x content_dim), for diagnostics.
    pub anchors: Matrix,
}

impl SynthDataset {
    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            source_x: &self.source_x,
            source_y: &self.source_y,
            target_x: &self.target_train_x,
            test_x: &self.target_test_x,
            test_y: &self.target_test_y,
        }
    }
}

const ANCHOR_STEP: f64 = 3.0;
const CONTENT_JITTER: f64 = 0.1;
const OBS_NOISE: f64 = 0.05;
const CONTENT_GAIN: f64 = 0.9;
const STYLE_GAIN: f64 = 0.5;

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let k = spec.classes;
    let cd = spec.content_dim;
    let sd = spec.style_dim;
    let mut rng = Rng::new(spec.seed);

    // Poset-aligned anchors from the fixed chain; redraw on alignment misses.
    let chain = RcgParams::new(
        k,
        cd,
        3.0,
        vec![-0.5 * ANCHOR_STEP * (k as f64 - 1.0); cd],
        vec![vec![ANCHOR_STEP.ln(); k.saturating_sub(1)]; cd],
        vec![vec![60.0; k.saturating_sub(1)]; cd],
    )?;
    let anchors = loop {
        let sample = chain.sample_chain(&mut rng);
        let aligned = (0..cd).all(|d| {
            (1..k).all(|kk| sample.anchors.get(kk, d) > sample.anchors.get(kk - 1, d))
        });
        if aligned {
            break sample.anchors;
        }
    };

    // Source mixing. Column scales put the pre-tanh activations in the
    // responsive range of tanh.
    let anchor_rms = ANCHOR_STEP * (((k * k - 1) as f64) / 12.0).sqrt().max(1.0 / ANCHOR_STEP);
    let c_scale = CONTENT_GAIN / (anchor_rms * (cd as f64).sqrt());
    let s_scale = STYLE_GAIN / (sd as f64).sqrt();
    let mut mix_s = Matrix::zeros(spec.obs_dim, cd + sd);
    for r in 0..spec.obs_dim {
        for c in 0..cd {
            mix_s.set(r, c, c_scale * rng.next_normal());
        }
        for c in 0..sd {
            mix_s.set(r, cd + c, s_scale * rng.next_normal());
        }
    }
    let mut bias_s = Vector::zeros(spec.obs_dim);
    for r in 0..spec.obs_dim {
        bias_s[r] = 0.1 * rng.next_normal();
    }

    // Target mixing: proportional perturbation plus a style-subspace rotation.
    let shift = spec.domain_shift_scale;
    let mut mix_t = mix_s.clone();
    for r in 0..spec.obs_dim {
        for c in 0..cd {
            mix_t.add_at(r, c, shift * c_scale * rng.next_normal());
        }
        for c in 0..sd {
            mix_t.add_at(r, cd + c, shift * s_scale * rng.next_normal());
        }
    }
    let rotation = random_rotation(sd, &mut rng);
    let mut rotated = mix_t.clone();
    for r in 0..spec.obs_dim {
        for c in 0..sd {
            let mut acc = 0.0;
            for m in 0..sd {
                acc += mix_t.get(r, cd + m) * rotation.get(m, c);
            }
            rotated.set(r, cd + c, acc);
        }
    }
    let mix_t = rotated;
    let mut bias_t = bias_s.clone();
    for r in 0..spec.obs_dim {
        bias_t[r] += shift * 0.1 * rng.next_normal();
    }

    let observe = |class: usize, mix: &Matrix, bias: &Vector, rng: &mut Rng| -> Vector {
        let mut latent = Vector::zeros(cd + sd);
        for d in 0..cd {
            latent[d] = anchors.get(class, d) + CONTENT_JITTER * rng.next_normal();
        }
        for d in 0..sd {
            latent[cd + d] = rng.next_normal();
        }
        let mut x = mix.matvec(&latent);
        for r in 0..x.len() {
            x[r] = (x[r] + bias[r]).tanh() + OBS_NOISE * rng.next_normal();
        }
        x
    };

    let mut source_x = Vec::with_capacity(k * spec.per_class_source);
    let mut source_y = Vec::with_capacity(k * spec.per_class_source);
    for class in 0..k {
        for _ in 0..spec.per_class_source {
            source_x.push(observe(class, &mix_s, &bias_s, &mut rng));
            source_y.push(class);
        }
    }
    // Label noise shifts a fraction of source labels one level up or down.
    if spec.label_noise_rate > 0.0 {
        for y in source_y.iter_mut() {
            if rng.next_f64() < spec.label_noise_rate {
                *y = if rng.next_f64() < 0.5 {
                    (*y + 1).min(k - 1)
                } else {
                    y.saturating_sub(1)
                };
            }
        }
    }

    let mut target_train_x = Vec::with_capacity(k * spec.per_class_target);
    for class in 0..k {
        for _ in 0..spec.per_class_target {
            target_train_x.push(observe(class, &mix_t, &bias_t, &mut rng));
        }
    }

    let mut target_test_x = Vec::with_capacity(k * spec.per_class_test);
    let mut target_test_y = Vec::with_capacity(k * spec.per_class_test);
    for class in 0..k {
        for _ in 0..spec.per_class_test {
            target_test_x.push(observe(class, &mix_t, &bias_t, &mut rng));
            target_test_y.push(class);
        }
    }

    Ok(SynthDataset {
        source_x,
        source_y,
        target_train_x,
        target_test_x,
        target_test_y,
        anchors,
    })
}

/// Random orthonormal matrix via Gram-Schmidt on Gaussian columns.
fn random_rotation(n: usize, rng: &mut Rng) -> Matrix {
    let mut cols: Vec<Vector> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v = Vector::zeros(n);
        for i in 0..n {
            v[i] = rng.next_normal();
        }
        for u in &cols {
            let proj = v.dot(u);
            v.add_scaled(u, -proj);
        }
        let norm = v.norm2();
        if norm < 1e-8 {
            continue;
        }
        v.scale(1.0 / norm);
        cols.push(v);
    }
    let mut m = Matrix::zeros(n, n);
    for (c, col) in cols.iter().enumerate() {
        for r in 0..n {
            m.set(r, c, col[r]);
        }
    }
    m
}

/// Integer confusion counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![0; classes * classes],
            classes,
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::DimMismatch(format!(
                "{classes}x{classes} confusion matrix needs {} counts",
                classes * classes
            )));
        }
        Ok(Self { counts, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::LabelOutOfRange {
                label: truth.max(pred),
                classes: self.classes,
            });
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn require_nonempty(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Invalid("empty confusion matrix".into()));
        }
        Ok(total as f64)
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.require_nonempty()?;
        let trace: u64 = (0..self.classes).map(|i| self.get(i, i)).sum();
        Ok(trace as f64 / total)
    }

    pub fn mae(&self) -> Result<f64> {
        let total = self.require_nonempty()?;
        let mut acc = 0.0;
        for i in 0..self.classes {
            for j in 0..self.classes {
                acc += self.get(i, j) as f64 * (i as f64 - j as f64).abs();
            }
        }
        Ok(acc / total)
    }

    /// Quadratic weighted kappa with weights (i-j)^2 / (K-1)^2 and
    /// chance-agreement expectation from the marginals. Returns 0 when the
    /// expected disagreement is 0.
    pub fn qwk(&self) -> Result<f64> {
        let total = self.require_nonempty()?;
        if self.classes < 2 {
            return Err(Error::Invalid("qwk needs at least two classes".into()));
        }
        let k1 = (self.classes - 1) as f64;
        let mut row = vec![0.0; self.classes];
        let mut col = vec![0.0; self.classes];
        for i in 0..self.classes {
            for j in 0..self.classes {
                let c = self.get(i, j) as f64;
                row[i] += c;
                col[j] += c;
            }
        }
        let mut observed = 0.0;
        let mut expected = 0.0;
        for i in 0..self.classes {
            for j in 0..self.classes {
                let w = ((i as f64 - j as f64) / k1).powi(2);
                observed += w * self.get(i, j) as f64;
                expected += w * row[i] * col[j] / total;
            }
        }
        if expected == 0.0 {
            return Ok(0.0);
        }
        Ok(1.0 - observed / expected)
    }
}

/// One experiment arm: a named configuration delta over the base config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub prior_kind: PriorKind,
    pub sigma_rule: f64,
    pub adversarial_enabled: bool,
    /// Overrides the base round count; 0 gives the source-only baseline.
    pub rounds: Option<usize>,
}

impl ArmSpec {
    pub fn preset(name: &str) -> Option<ArmSpec> {
        let arm = |prior_kind, sigma_rule, adversarial_enabled, rounds| ArmSpec {
            name: name.to_string(),
            prior_kind,
            sigma_rule,
            adversarial_enabled,
            rounds,
        };
        match name {
            "source_only" => Some(arm(PriorKind::Rcg, 3.0, false, Some(0))),
            "iid_gaussian" => Some(arm(PriorKind::IidGaussian, 3.0, true, None)),
            "rcg_3sigma" => Some(arm(PriorKind::Rcg, 3.0, true, None)),
            "rcg_2sigma" => Some(arm(PriorKind::Rcg, 2.0, true, None)),
            "rcg_3sigma_noadv" => Some(arm(PriorKind::Rcg, 3.0, false, None)),
            "rcg_2sigma_noadv" => Some(arm(PriorKind::Rcg, 2.0, false, None)),
            _ => None,
        }
    }

    fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            prior_kind: self.prior_kind,
            sigma_rule: self.sigma_rule,
            adversarial_enabled: self.adversarial_enabled,
            rounds: self.rounds.unwrap_or(base.rounds),
            ..base.clone()
        }
    }
}

/// The four standard comparison arms.
pub fn standard_arms() -> Vec<ArmSpec> {
    ["source_only", "iid_gaussian", "rcg_3sigma", "rcg_2sigma"]
        .iter()
        .map(|n| ArmSpec::preset(n).unwrap())
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub arm: String,
    pub seed_index: usize,
    pub world_seed: u64,
    pub accuracy: f64,
    pub mae: f64,
    pub qwk: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub median_accuracy: f64,
    pub median_mae: f64,
    pub median_qwk: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub runs: Vec<RunResult>,
    pub medians: Vec<ArmSummary>,
}

impl ComparisonReport {
    pub fn median_qwk(&self, arm: &str) -> Option<f64> {
        self.medians.iter().find(|m| m.arm == arm).map(|m| m.median_qwk)
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("arm,seed_index,world_seed,accuracy,mae,qwk\n");
        for r in &self.runs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.arm,
                r.seed_index,
                r.world_seed,
                crate::tensor::format_f64(r.accuracy),
                crate::tensor::format_f64(r.mae),
                crate::tensor::format_f64(r.qwk)
            ));
        }
        out
    }

    pub fn medians_csv(&self) -> String {
        let mut out = String::from("arm,median_accuracy,median_mae,median_qwk\n");
        for m in &self.medians {
            out.push_str(&format!(
                "{},{},{},{}\n",
                m.arm,
                crate::tensor::format_f64(m.median_accuracy),
                crate::tensor::format_f64(m.median_mae),
                crate::tensor::format_f64(m.median_qwk)
            ));
        }
        out
    }

    pub fn markdown(&self) -> String {
        let mut out = String::from("| arm | median accuracy | median MAE | median QWK |\n");
        out.push_str("|---|---|---|---|\n");
        for m in &self.medians {
            out.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} |\n",
                m.arm, m.median_accuracy, m.median_mae, m.median_qwk
            ));
        }
        out
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs every arm over `n_seeds` independent worlds (fresh data and fresh
/// initialization per seed) and reports per-run metrics plus per-arm medians.
/// World i uses data seed `spec.seed + i` and training seed `spec.seed + i + 101`.
pub fn run_comparison(
    spec: &SynthSpec,
    base: &TrainConfig,
    arms: &[ArmSpec],
    n_seeds: usize,
) -> Result<ComparisonReport> {
    if arms.is_empty() || n_seeds == 0 {
        return Err(Error::Config("need at least one arm and one seed".into()));
    }
    let mut runs = Vec::with_capacity(arms.len() * n_seeds);
    for arm in arms {
        for i in 0..n_seeds {
            let world_seed = spec.seed + i as u64;
            let data = generate(&SynthSpec {
                seed: world_seed,
                ..spec.clone()
            })?;
            let cfg = TrainConfig {
                seed: world_seed + 101,
                ..arm.apply(base)
            };
            let outcome = fit(data.train_data(), &cfg)?;
            let last = outcome
                .epochs
                .last()
                .ok_or_else(|| Error::Invalid("training produced no epochs".into()))?;
            runs.push(RunResult {
                arm: arm.name.clone(),
                seed_index: i,
                world_seed,
                accuracy: last.accuracy,
                mae: last.mae,
                qwk: last.qwk,
            });
        }
    }
    let mut medians = Vec::with_capacity(arms.len());
    for arm in arms {
        let collect = |f: fn(&RunResult) -> f64| -> f64 {
            let mut vs: Vec<f64> = runs
                .iter()
                .filter(|r| r.arm == arm.name)
                .map(f)
                .collect();
            median(&mut vs)
        };
        medians.push(ArmSummary {
            arm: arm.name.clone(),
            median_accuracy: collect(|r| r.accuracy),
            median_mae: collect(|r| r.mae),
            median_qwk: collect(|r| r.qwk),
        });
    }
    Ok(ComparisonReport { runs, medians })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::triplet_check;

    #[test]
    fn shapes_match_spec() {
        let spec = SynthSpec::default();
        let data = generate(&spec).unwrap();
        assert_eq!(data.source_x.len(), 200);
        assert_eq!(data.source_y.len(), 200);
        assert_eq!(data.target_train_x.len(), 200);
        assert_eq!(data.target_test_x.len(), 100);
        assert_eq!(data.target_test_y.len(), 100);
        assert_eq!(data.source_x[0].len(), 32);
        assert_eq!(data.anchors.rows(), 5);
        assert_eq!(data.anchors.cols(), 4);
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SynthSpec::default();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.source_x, b.source_x);
        assert_eq!(a.source_y, b.source_y);
        assert_eq!(a.target_train_x, b.target_train_x);
        assert_eq!(a.target_test_x, b.target_test_x);
    }

    #[test]
    fn anchors_are_poset_aligned() {
        for seed in 0..5 {
            let data = generate(&SynthSpec {
                seed,
                ..SynthSpec::default()
            })
            .unwrap();
            for d in 0..4 {
                for k in 1..5 {
                    assert!(data.anchors.get(k, d) > data.anchors.get(k - 1, d));
                }
            }
            assert!(triplet_check(&data.anchors));
        }
    }

    #[test]
    fn label_noise_flips_roughly_the_requested_fraction() {
        let clean = generate(&SynthSpec::default()).unwrap();
        let noisy = generate(&SynthSpec {
            label_noise_rate: 0.2,
            ..SynthSpec::default()
        })
        .unwrap();
        // Same seed, labels drawn after observations: sample count identical.
        let flipped = clean
            .source_y
            .iter()
            .zip(&noisy.source_y)
            .filter(|(a, b)| a != b)
            .count();
        let rate = flipped as f64 / clean.source_y.len() as f64;
        // 20% requested, but edge classes can flip onto themselves.
        assert!(rate > 0.08 && rate < 0.25, "flip rate {rate}");
        for (a, b) in clean.source_y.iter().zip(&noisy.source_y) {
            assert!(a.abs_diff(*b) <= 1);
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let mut rng = Rng::new(5);
        let r = random_rotation(4, &mut rng);
        for i in 0..4 {
            for j in 0..4 {
                let mut dot = 0.0;
                for m in 0..4 {
                    dot += r.get(m, i) * r.get(m, j);
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn metrics_examples() {
        let mut conf = ConfusionMatrix::zeros(3);
        conf.record(0, 0).unwrap();
        conf.record(1, 1).unwrap();
        conf.record(2, 2).unwrap();
        assert_eq!(conf.accuracy().unwrap(), 1.0);
        assert_eq!(conf.mae().unwrap(), 0.0);
        assert_eq!(conf.qwk().unwrap(), 1.0);

        // predictions (1,2,3) against truth (1,3,1), as 0-based classes.
        let mut conf = ConfusionMatrix::zeros(3);
        conf.record(0, 0).unwrap();
        conf.record(2, 1).unwrap();
        conf.record(0, 2).unwrap();
        assert!((conf.accuracy().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((conf.mae().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn qwk_hand_example_is_zero() {
        // All mass in one predicted column: observed equals expected.
        let conf = ConfusionMatrix::from_counts(2, vec![5, 0, 5, 0]).unwrap();
        assert_eq!(conf.qwk().unwrap(), 0.0);
    }

    #[test]
    fn qwk_chance_level_is_near_zero() {
        let mut rng = Rng::new(3);
        let mut conf = ConfusionMatrix::zeros(5);
        for _ in 0..10_000 {
            conf.record(rng.next_below(5), rng.next_below(5)).unwrap();
        }
        let kappa = conf.qwk().unwrap();
        assert!(kappa.abs() < 0.05, "kappa {kappa}");
    }

    #[test]
    fn qwk_at_most_one_and_scale_invariant() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let mut counts = vec![0u64; 16];
            for c in counts.iter_mut() {
                *c = rng.next_below(20) as u64;
            }
            counts[0] += 1; // non-empty
            let conf = ConfusionMatrix::from_counts(4, counts.clone()).unwrap();
            let kappa = conf.qwk().unwrap();
            assert!(kappa <= 1.0 + 1e-12);

            let scaled = ConfusionMatrix::from_counts(4, counts.iter().map(|c| c * 7).collect())
                .unwrap();
            assert!((scaled.qwk().unwrap() - kappa).abs() < 1e-12);
        }
    }

    #[test]
    fn mae_is_transpose_invariant_but_accuracy_permutes() {
        let mut rng = Rng::new(6);
        let mut counts = vec![0u64; 9];
        for c in counts.iter_mut() {
            *c = rng.next_below(10) as u64 + 1;
        }
        let conf = ConfusionMatrix::from_counts(3, counts.clone()).unwrap();
        let mut transposed = vec![0u64; 9];
        for i in 0..3 {
            for j in 0..3 {
                transposed[j * 3 + i] = counts[i * 3 + j];
            }
        }
        let conf_t = ConfusionMatrix::from_counts(3, transposed).unwrap();
        assert!((conf.mae().unwrap() - conf_t.mae().unwrap()).abs() < 1e-12);

        // Relabeling classes keeps accuracy but changes MAE in general.
        let perm = [2usize, 0, 1];
        let mut permuted = vec![0u64; 9];
        for i in 0..3 {
            for j in 0..3 {
                permuted[perm[i] * 3 + perm[j]] = counts[i * 3 + j];
            }
        }
        let conf_p = ConfusionMatrix::from_counts(3, permuted).unwrap();
        assert!((conf.accuracy().unwrap() - conf_p.accuracy().unwrap()).abs() < 1e-12);
        assert!((conf.mae().unwrap() - conf_p.mae().unwrap()).abs() > 1e-9);
    }

    #[test]
    fn empty_matrix_errors() {
        let conf = ConfusionMatrix::zeros(3);
        assert!(conf.accuracy().is_err());
        assert!(conf.mae().is_err());
        assert!(conf.qwk().is_err());
    }

    #[test]
    fn zero_shift_source_classifier_transfers() {
        // With no domain shift and no label noise, a source-only classifier
        // performs on target within a couple of points of its source accuracy.
        let spec = SynthSpec {
            domain_shift_scale: 0.0,
            seed: 11,
            ..SynthSpec::default()
        };
        let data = generate(&spec).unwrap();
        let cfg = TrainConfig {
            rounds: 0,
            epochs_per_round: 30,
            adversarial_enabled: false,
            seed: 12,
            ..TrainConfig::default()
        };
        let outcome = fit(data.train_data(), &cfg).unwrap();
        let source_conf = crate::trainer::evaluate(
            &outcome.nets,
            &data.source_x,
            &data.source_y,
            spec.classes,
        )
        .unwrap();
        let target_acc = outcome.epochs.last().unwrap().accuracy;
        let source_acc = source_conf.accuracy().unwrap();
        assert!(
            (source_acc - target_acc).abs() < 0.02 + 1e-9,
            "source {source_acc} vs target {target_acc}"
        );
        assert!(source_acc > 0.9, "source accuracy {source_acc}");
    }
}
