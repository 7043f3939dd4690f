//! End-to-end adaptation training: class-complete group batches, loss
//! assembly, per-network gradient routing, and pseudo-label self-training
//! rounds over a labeled source domain and an unlabeled target domain.
//!
//! Per optimization step the routing is:
//!   shared content encoder <- ce + alpha*kl_c + beta*(l1_s + l1_t)
//!                              + gamma*(adv_s + adv_t)
//!   style encoder (domain) <- l1 + lambda*kl_style + theta*adv
//!   decoder (domain)       <- l1 + theta*adv
//!   classifier             <- ce
//!   discriminator (domain) <- its own discrimination loss
//!   prior raw parameters   <- alpha*kl_c (with the content encoder group)

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{
    adversarial_eval, cross_entropy, l1_loss, softmax, Activation, AdamParams, AdamState,
    GaussianHead, HeadGrads, Mlp, MlpGrads,
};
use crate::param::ParamVec;
use crate::prior::{RcgGrads, RcgParams};
use crate::synth::ConfusionMatrix;
use crate::tensor::{normal_draws, Rng, Vector};
use crate::variational::{
    kl_content_grad, kl_style_grad, poe_backward, poe_fuse, reparam_backward, reparam_with_eps,
    DiagGaussian, GroupPosterior,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Rcg,
    IidGaussian,
}

/// Training configuration. Loss weights follow the framework defaults
/// alpha = lambda = theta = 1, beta = gamma = 0.5.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub theta: f64,
    pub ce_weight: f64,
    pub sigma_rule: f64,
    pub prior_kind: PriorKind,
    pub adversarial_enabled: bool,
    /// Freezes the prior's raw parameters for ablation runs.
    pub freeze_prior: bool,
    pub rounds: usize,
    pub epochs_per_round: usize,
    /// Samples per class per domain in each group batch.
    pub samples_per_class: usize,
    /// Pseudo-label selection portion per round; extended with its last
    /// value when there are more rounds than entries.
    pub portions: Vec<f64>,
    pub learning_rate: f64,
    pub content_dim: usize,
    pub style_dim: usize,
    pub seed: u64,
    /// Named extension point; only "cross_entropy" is implemented.
    pub classification_loss: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.5,
            lambda: 1.0,
            theta: 1.0,
            ce_weight: 1.0,
            sigma_rule: 3.0,
            prior_kind: PriorKind::Rcg,
            adversarial_enabled: true,
            freeze_prior: false,
            rounds: 3,
            epochs_per_round: 20,
            samples_per_class: 4,
            portions: vec![0.2, 0.35, 0.5],
            learning_rate: 1e-3,
            content_dim: 4,
            style_dim: 4,
            seed: 1,
            classification_loss: "cross_entropy".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("theta", self.theta),
            ("ce_weight", self.ce_weight),
        ] {
            if w.is_nan() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be >= 0")));
            }
        }
        if self.sigma_rule.is_nan() || self.sigma_rule <= 0.0 {
            return Err(Error::Config("sigma_rule must be positive".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if self.epochs_per_round == 0 {
            return Err(Error::Config("epochs_per_round must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.content_dim == 0 || self.style_dim == 0 {
            return Err(Error::Config("latent dimensions must be positive".into()));
        }
        if self.portions.is_empty() {
            return Err(Error::Config("portions must not be empty".into()));
        }
        let mut prev = 0.0;
        for (i, p) in self.portions.iter().enumerate() {
            if p.is_nan() || *p <= 0.0 || *p > 1.0 {
                return Err(Error::Config(format!("portions[{i}] must lie in (0, 1]")));
            }
            if *p < prev {
                return Err(Error::Config("portions must be non-decreasing".into()));
            }
            prev = *p;
        }
        if self.classification_loss != "cross_entropy" {
            return Err(Error::Config(format!(
                "classification_loss '{}' is not implemented; only 'cross_entropy' is",
                self.classification_loss
            )));
        }
        Ok(())
    }

    fn portion_for_round(&self, round: usize) -> f64 {
        debug_assert!(round >= 1);
        let ix = (round - 1).min(self.portions.len() - 1);
        self.portions[ix]
    }
}

/// The eight networks of the framework. Only the shared content encoder and
/// the classifier are used at test time.
#[derive(Clone, Debug)]
pub struct ModelNets {
    pub enc_c: GaussianHead,
    pub enc_u_s: GaussianHead,
    pub enc_u_t: GaussianHead,
    pub dec_s: Mlp,
    pub dec_t: Mlp,
    pub cls: Mlp,
    pub dis_s: Mlp,
    pub dis_t: Mlp,
}

pub const ENCODER_HIDDEN: [usize; 2] = [64, 64];
pub const CLASSIFIER_HIDDEN: usize = 32;

impl ModelNets {
    pub fn new(
        obs_dim: usize,
        content_dim: usize,
        style_dim: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Self {
        Self::with_hidden(
            obs_dim,
            content_dim,
            style_dim,
            classes,
            &ENCODER_HIDDEN,
            CLASSIFIER_HIDDEN,
            rng,
        )
    }

    /// Same wiring with custom hidden widths; the gradient checker uses tiny
    /// nets so finite differences stay cheap.
    pub fn with_hidden(
        obs_dim: usize,
        content_dim: usize,
        style_dim: usize,
        classes: usize,
        encoder_hidden: &[usize],
        classifier_hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        // Decoders mirror the encoders.
        let mut dec_dims = vec![content_dim + style_dim];
        dec_dims.extend(encoder_hidden.iter().rev());
        dec_dims.push(obs_dim);
        let mut dis_dims = vec![obs_dim];
        dis_dims.extend_from_slice(encoder_hidden);
        dis_dims.push(1);
        Self {
            enc_c: GaussianHead::new(obs_dim, encoder_hidden, content_dim, rng),
            enc_u_s: GaussianHead::new(obs_dim, encoder_hidden, style_dim, rng),
            enc_u_t: GaussianHead::new(obs_dim, encoder_hidden, style_dim, rng),
            dec_s: Mlp::new(&dec_dims, Activation::Tanh, Activation::Linear, rng),
            dec_t: Mlp::new(&dec_dims, Activation::Tanh, Activation::Linear, rng),
            cls: Mlp::new(
                &[content_dim, classifier_hidden, classes],
                Activation::Tanh,
                Activation::Linear,
                rng,
            ),
            dis_s: Mlp::new(&dis_dims, Activation::Tanh, Activation::Sigmoid, rng),
            dis_t: Mlp::new(&dis_dims, Activation::Tanh, Activation::Sigmoid, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.cls.out_dim()
    }

    pub fn content_dim(&self) -> usize {
        self.enc_c.out_dim()
    }

    pub fn style_dim(&self) -> usize {
        self.enc_u_s.out_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.enc_c.in_dim()
    }
}

/// Content prior used by the content KL: the chain prior, or the factorized
/// standard Gaussian baseline.
#[derive(Clone, Debug)]
pub enum ContentPrior {
    Rcg(RcgParams),
    IidGaussian,
}

impl ContentPrior {
    pub fn for_config(cfg: &TrainConfig, classes: usize) -> Self {
        match cfg.prior_kind {
            PriorKind::Rcg => {
                ContentPrior::Rcg(RcgParams::default_init(classes, cfg.content_dim, cfg.sigma_rule))
            }
            PriorKind::IidGaussian => ContentPrior::IidGaussian,
        }
    }
}

/// Per-class source and target samples for one step; target lists may be
/// empty (the class then trains from source members only), source lists may
/// not.
#[derive(Clone, Debug)]
pub struct GroupBatch {
    pub source: Vec<Vec<Vector>>,
    pub target: Vec<Vec<Vector>>,
}

impl GroupBatch {
    pub fn classes(&self) -> usize {
        self.source.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.len() != self.target.len() {
            return Err(Error::DimMismatch(
                "source and target class lists disagree".into(),
            ));
        }
        for (k, members) in self.source.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::IncompleteGroup { class: k });
            }
        }
        Ok(())
    }
}

/// Pre-drawn reparameterization noise for one step, so a step is a
/// deterministic function of (nets, prior, batch, noise).
#[derive(Clone, Debug)]
pub struct StepNoise {
    /// Per class, per member (source members first, then target): content noise.
    pub content_eps: Vec<Vec<Vector>>,
    /// Per class, per member: style noise.
    pub style_eps: Vec<Vec<Vector>>,
    /// Per class: noise for the fused class anchor fed to the decoders.
    pub class_eps: Vec<Vector>,
}

impl StepNoise {
    pub fn draw(batch: &GroupBatch, content_dim: usize, style_dim: usize, rng: &mut Rng) -> Self {
        let mut content_eps = Vec::with_capacity(batch.classes());
        let mut style_eps = Vec::with_capacity(batch.classes());
        let mut class_eps = Vec::with_capacity(batch.classes());
        for k in 0..batch.classes() {
            let members = batch.source[k].len() + batch.target[k].len();
            content_eps.push((0..members).map(|_| normal_draws(rng, content_dim)).collect());
            style_eps.push((0..members).map(|_| normal_draws(rng, style_dim)).collect());
            class_eps.push(normal_draws(rng, content_dim));
        }
        Self {
            content_eps,
            style_eps,
            class_eps,
        }
    }
}

/// Unweighted loss sums over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub ce: f64,
    pub l1_s: f64,
    pub l1_t: f64,
    pub kl_u_s: f64,
    pub kl_u_t: f64,
    pub kl_c: f64,
    pub adv_gen_s: f64,
    pub adv_gen_t: f64,
    pub adv_disc_s: f64,
    pub adv_disc_t: f64,
}

impl LossReport {
    pub const FIELD_NAMES: [&'static str; 10] = [
        "ce", "l1_s", "l1_t", "kl_u_s", "kl_u_t", "kl_c", "adv_gen_s", "adv_gen_t", "adv_disc_s",
        "adv_disc_t",
    ];

    pub fn fields(&self) -> [f64; 10] {
        [
            self.ce,
            self.l1_s,
            self.l1_t,
            self.kl_u_s,
            self.kl_u_t,
            self.kl_c,
            self.adv_gen_s,
            self.adv_gen_t,
            self.adv_disc_s,
            self.adv_disc_t,
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in Self::FIELD_NAMES.iter().zip(self.fields()) {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: (*name).into(),
                });
            }
        }
        Ok(())
    }

    fn add(&mut self, other: &LossReport) {
        for (mine, theirs) in [
            (&mut self.ce, other.ce),
            (&mut self.l1_s, other.l1_s),
            (&mut self.l1_t, other.l1_t),
            (&mut self.kl_u_s, other.kl_u_s),
            (&mut self.kl_u_t, other.kl_u_t),
            (&mut self.kl_c, other.kl_c),
            (&mut self.adv_gen_s, other.adv_gen_s),
            (&mut self.adv_gen_t, other.adv_gen_t),
            (&mut self.adv_disc_s, other.adv_disc_s),
            (&mut self.adv_disc_t, other.adv_disc_t),
        ] {
            *mine += theirs;
        }
    }

    fn scale(&mut self, w: f64) {
        self.ce *= w;
        self.l1_s *= w;
        self.l1_t *= w;
        self.kl_u_s *= w;
        self.kl_u_t *= w;
        self.kl_c *= w;
        self.adv_gen_s *= w;
        self.adv_gen_t *= w;
        self.adv_disc_s *= w;
        self.adv_disc_t *= w;
    }
}

/// Routed gradient accumulators for one step.
#[derive(Clone, Debug)]
pub struct StepGrads {
    pub enc_c: HeadGrads,
    pub enc_u_s: HeadGrads,
    pub enc_u_t: HeadGrads,
    pub dec_s: MlpGrads,
    pub dec_t: MlpGrads,
    pub cls: MlpGrads,
    pub dis_s: MlpGrads,
    pub dis_t: MlpGrads,
    pub prior: Option<RcgGrads>,
}

impl StepGrads {
    fn zeros_of(nets: &ModelNets, prior: &ContentPrior, freeze_prior: bool) -> Self {
        let prior_grads = match prior {
            ContentPrior::Rcg(p) if !freeze_prior => Some(RcgGrads::zeros_like(p)),
            _ => None,
        };
        Self {
            enc_c: HeadGrads::zeros_of(&nets.enc_c),
            enc_u_s: HeadGrads::zeros_of(&nets.enc_u_s),
            enc_u_t: HeadGrads::zeros_of(&nets.enc_u_t),
            dec_s: MlpGrads::zeros_of(&nets.dec_s),
            dec_t: MlpGrads::zeros_of(&nets.dec_t),
            cls: MlpGrads::zeros_of(&nets.cls),
            dis_s: MlpGrads::zeros_of(&nets.dis_s),
            dis_t: MlpGrads::zeros_of(&nets.dis_t),
            prior: prior_grads,
        }
    }
}

struct MemberState {
    posterior: DiagGaussian,
    // Accumulated gradient on the content posterior across loss paths,
    // with routing weights already applied.
    g_mean: Vector,
    g_logvar: Vector,
}

#[derive(Clone, Copy, PartialEq)]
enum Domain {
    Source,
    Target,
}

/// One full forward/backward pass over a class-complete group batch.
/// Returns the raw loss values and the per-network routed gradients; no
/// parameters are updated.
pub fn compute_step(
    nets: &ModelNets,
    prior: &ContentPrior,
    batch: &GroupBatch,
    noise: &StepNoise,
    cfg: &TrainConfig,
) -> Result<(LossReport, StepGrads)> {
    batch.validate()?;
    let classes = batch.classes();
    if classes != nets.classes() {
        return Err(Error::DimMismatch(format!(
            "batch has {classes} classes, classifier expects {}",
            nets.classes()
        )));
    }
    let content_dim = nets.content_dim();
    let mut report = LossReport::default();
    let mut grads = StepGrads::zeros_of(nets, prior, cfg.freeze_prior);

    // Phase 1: content posteriors for every member, classification loss.
    let mut members: Vec<Vec<MemberState>> = Vec::with_capacity(classes);
    let mut caches: Vec<Vec<crate::neural::HeadCache>> = Vec::with_capacity(classes);
    for k in 0..classes {
        let mut class_members = Vec::new();
        let mut class_caches = Vec::new();
        let xs = batch.source[k].iter();
        let xt = batch.target[k].iter();
        for (m, x) in xs.chain(xt).enumerate() {
            let (posterior, cache) = nets.enc_c.forward(x)?;
            let mut state = MemberState {
                posterior,
                g_mean: Vector::zeros(content_dim),
                g_logvar: Vector::zeros(content_dim),
            };

            // Classify the reparameterized per-sample content code.
            let eps = &noise.content_eps[k][m];
            let code = reparam_with_eps(&state.posterior, eps);
            let (logits, cls_cache) = nets.cls.forward(&code)?;
            let (ce, g_logits) = cross_entropy(&logits, k)?;
            report.ce += ce;
            if cfg.ce_weight > 0.0 {
                let (cls_g, g_code) = nets.cls.backward_from_preact(&cls_cache, &g_logits);
                grads.cls.add_scaled(&cls_g, cfg.ce_weight);
                let (g_mean, g_logvar) = reparam_backward(&state.posterior, eps, &g_code);
                state.g_mean.add_scaled(&g_mean, cfg.ce_weight);
                state.g_logvar.add_scaled(&g_logvar, cfg.ce_weight);
            }

            class_members.push(state);
            class_caches.push(cache);
        }
        members.push(class_members);
        caches.push(class_caches);
    }

    // Phase 2: PoE fusion per class and the content KL.
    let mut fused = Vec::with_capacity(classes);
    for class_members in &members {
        let posteriors: Vec<DiagGaussian> =
            class_members.iter().map(|m| m.posterior.clone()).collect();
        fused.push(poe_fuse(&posteriors)?);
    }
    let group = GroupPosterior::from_fused(fused.clone());
    // Gradient on the fused posteriors, weights folded in as contributions
    // arrive (alpha for kl_c, beta/gamma for the decode paths below).
    let mut g_fused_mean = vec![Vector::zeros(content_dim); classes];
    let mut g_fused_logvar = vec![Vector::zeros(content_dim); classes];
    match prior {
        ContentPrior::Rcg(params) => {
            let (kl_c, kl_grads) = kl_content_grad(&group, params)?;
            report.kl_c = kl_c;
            if cfg.alpha > 0.0 {
                for k in 0..classes {
                    g_fused_mean[k].add_scaled(&kl_grads.fused_mean[k], cfg.alpha);
                    g_fused_logvar[k].add_scaled(&kl_grads.fused_logvar[k], cfg.alpha);
                }
                if let Some(pg) = grads.prior.as_mut() {
                    pg.add_scaled(&kl_grads.prior, cfg.alpha);
                }
            }
        }
        ContentPrior::IidGaussian => {
            for k in 0..classes {
                let (v, g_mean, g_logvar) = kl_style_grad(&fused[k]);
                report.kl_c += v;
                if cfg.alpha > 0.0 {
                    g_fused_mean[k].add_scaled(&g_mean, cfg.alpha);
                    g_fused_logvar[k].add_scaled(&g_logvar, cfg.alpha);
                }
            }
        }
    }

    // Phase 3: style posteriors, reconstruction, adversarial terms.
    for k in 0..classes {
        let class_anchor = reparam_with_eps(&fused[k], &noise.class_eps[k]);
        // Gradient on the sampled class anchor across the class's members.
        let mut g_anchor = Vector::zeros(content_dim);
        let sources = batch.source[k].iter().map(|x| (Domain::Source, x));
        let targets = batch.target[k].iter().map(|x| (Domain::Target, x));
        for (m, (domain, x)) in sources.chain(targets).enumerate() {
            let (enc_u, dec, dis) = match domain {
                Domain::Source => (&nets.enc_u_s, &nets.dec_s, &nets.dis_s),
                Domain::Target => (&nets.enc_u_t, &nets.dec_t, &nets.dis_t),
            };
            let (style_q, style_cache) = enc_u.forward(x)?;
            let (kl_u, kl_g_mean, kl_g_logvar) = kl_style_grad(&style_q);

            let style_eps = &noise.style_eps[k][m];
            let style_code = reparam_with_eps(&style_q, style_eps);
            let mut dec_in = Vector::zeros(content_dim + style_code.len());
            for i in 0..content_dim {
                dec_in[i] = class_anchor[i];
            }
            for i in 0..style_code.len() {
                dec_in[content_dim + i] = style_code[i];
            }
            let (recon, dec_cache) = dec.forward(&dec_in)?;
            let (l1, g_recon) = l1_loss(x, &recon);

            let adv = if cfg.adversarial_enabled {
                Some(adversarial_eval(dis, x, &recon)?)
            } else {
                None
            };

            // Decoder parameters: l1 + theta * adv.
            let (dec_g_l1, in_g_l1) = dec.backward(&dec_cache, &g_recon);
            let (dec_g_adv, in_g_adv) = match &adv {
                Some(a) => {
                    let (g, i) = dec.backward(&dec_cache, &a.fake_input_grad);
                    (Some(g), Some(i))
                }
                None => (None, None),
            };

            // Style posterior: l1 (weight 1) + theta*adv + lambda*kl_style.
            let mut g_style_code = Vector::zeros(style_code.len());
            for i in 0..style_code.len() {
                g_style_code[i] = in_g_l1[content_dim + i];
                if let Some(ia) = &in_g_adv {
                    g_style_code[i] += cfg.theta * ia[content_dim + i];
                }
            }
            let (mut g_style_mean, mut g_style_logvar) =
                reparam_backward(&style_q, style_eps, &g_style_code);
            g_style_mean.add_scaled(&kl_g_mean, cfg.lambda);
            g_style_logvar.add_scaled(&kl_g_logvar, cfg.lambda);
            let (enc_u_g, _) = enc_u.backward(&style_cache, &g_style_mean, &g_style_logvar);

            // Content anchor: beta*l1 + gamma*adv.
            for i in 0..content_dim {
                g_anchor[i] += cfg.beta * in_g_l1[i];
                if let Some(ia) = &in_g_adv {
                    g_anchor[i] += cfg.gamma * ia[i];
                }
            }

            match domain {
                Domain::Source => {
                    report.l1_s += l1;
                    report.kl_u_s += kl_u;
                    grads.dec_s.add_scaled(&dec_g_l1, 1.0);
                    if let Some(g) = &dec_g_adv {
                        grads.dec_s.add_scaled(g, cfg.theta);
                    }
                    grads.enc_u_s.add_scaled(&enc_u_g, 1.0);
                    if let Some(a) = &adv {
                        report.adv_gen_s += a.gen_loss;
                        report.adv_disc_s += a.disc_loss;
                        grads.dis_s.add_scaled(&a.dis_grads, 1.0);
                    }
                }
                Domain::Target => {
                    report.l1_t += l1;
                    report.kl_u_t += kl_u;
                    grads.dec_t.add_scaled(&dec_g_l1, 1.0);
                    if let Some(g) = &dec_g_adv {
                        grads.dec_t.add_scaled(g, cfg.theta);
                    }
                    grads.enc_u_t.add_scaled(&enc_u_g, 1.0);
                    if let Some(a) = &adv {
                        report.adv_gen_t += a.gen_loss;
                        report.adv_disc_t += a.disc_loss;
                        grads.dis_t.add_scaled(&a.dis_grads, 1.0);
                    }
                }
            }
        }

        // Anchor gradient back through the fused posterior's sample.
        let (g_mean, g_logvar) = reparam_backward(&fused[k], &noise.class_eps[k], &g_anchor);
        g_fused_mean[k].add_scaled(&g_mean, 1.0);
        g_fused_logvar[k].add_scaled(&g_logvar, 1.0);
    }

    // Phase 4: fused-posterior gradients back through PoE onto each member.
    for k in 0..classes {
        let posteriors: Vec<DiagGaussian> =
            members[k].iter().map(|m| m.posterior.clone()).collect();
        let member_grads = poe_backward(&posteriors, &fused[k], &g_fused_mean[k], &g_fused_logvar[k]);
        for (m, (g_mean, g_logvar)) in member_grads.into_iter().enumerate() {
            members[k][m].g_mean.add_scaled(&g_mean, 1.0);
            members[k][m].g_logvar.add_scaled(&g_logvar, 1.0);
        }
    }

    // Phase 5: one shared-encoder backward per member.
    for k in 0..classes {
        for (m, state) in members[k].iter().enumerate() {
            let (enc_g, _) = nets.enc_c.backward(&caches[k][m], &state.g_mean, &state.g_logvar);
            grads.enc_c.add_scaled(&enc_g, 1.0);
        }
    }

    report.check_finite()?;
    Ok((report, grads))
}

/// Optimizer bundle: one Adam state per network plus one for the prior.
pub struct Optimizers {
    hyper: AdamParams,
    enc_c: AdamState,
    enc_u_s: AdamState,
    enc_u_t: AdamState,
    dec_s: AdamState,
    dec_t: AdamState,
    cls: AdamState,
    dis_s: AdamState,
    dis_t: AdamState,
    prior: Option<AdamState>,
}

impl Optimizers {
    pub fn new(nets: &ModelNets, prior: &ContentPrior, cfg: &TrainConfig) -> Self {
        let prior_state = match prior {
            ContentPrior::Rcg(p) if !cfg.freeze_prior => Some(AdamState::new(p.param_count())),
            _ => None,
        };
        Self {
            hyper: AdamParams::with_lr(cfg.learning_rate),
            enc_c: AdamState::new(nets.enc_c.param_count()),
            enc_u_s: AdamState::new(nets.enc_u_s.param_count()),
            enc_u_t: AdamState::new(nets.enc_u_t.param_count()),
            dec_s: AdamState::new(nets.dec_s.param_count()),
            dec_t: AdamState::new(nets.dec_t.param_count()),
            cls: AdamState::new(nets.cls.param_count()),
            dis_s: AdamState::new(nets.dis_s.param_count()),
            dis_t: AdamState::new(nets.dis_t.param_count()),
            prior: prior_state,
        }
    }

    pub fn apply(
        &mut self,
        nets: &mut ModelNets,
        prior: &mut ContentPrior,
        grads: &StepGrads,
    ) -> Result<()> {
        let h = self.hyper;
        self.enc_c.step(&h, "enc_c", &mut nets.enc_c, &grads.enc_c)?;
        self.enc_u_s.step(&h, "enc_u_s", &mut nets.enc_u_s, &grads.enc_u_s)?;
        self.enc_u_t.step(&h, "enc_u_t", &mut nets.enc_u_t, &grads.enc_u_t)?;
        self.dec_s.step(&h, "dec_s", &mut nets.dec_s, &grads.dec_s)?;
        self.dec_t.step(&h, "dec_t", &mut nets.dec_t, &grads.dec_t)?;
        self.cls.step(&h, "cls", &mut nets.cls, &grads.cls)?;
        self.dis_s.step(&h, "dis_s", &mut nets.dis_s, &grads.dis_s)?;
        self.dis_t.step(&h, "dis_t", &mut nets.dis_t, &grads.dis_t)?;
        if let (Some(state), Some(pg), ContentPrior::Rcg(params)) =
            (self.prior.as_mut(), grads.prior.as_ref(), prior)
        {
            state.step(&h, "prior", params, pg)?;
        }
        Ok(())
    }
}

/// One optimization step: forward/backward then parameter updates.
pub fn train_step(
    nets: &mut ModelNets,
    prior: &mut ContentPrior,
    opt: &mut Optimizers,
    batch: &GroupBatch,
    noise: &StepNoise,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let (report, grads) = compute_step(nets, prior, batch, noise, cfg)?;
    opt.apply(nets, prior, &grads)?;
    Ok(report)
}

/// Classifier applied to the content-posterior mean; no sampling, no RNG.
pub fn predict(enc_c: &GaussianHead, cls: &Mlp, x: &Vector) -> Result<(usize, Vector)> {
    let (q, _) = enc_c.forward(x)?;
    let (logits, _) = cls.forward(q.mean())?;
    let probs = softmax(&logits);
    let mut best = 0;
    for i in 1..probs.len() {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    Ok((best, probs))
}

/// Per-target pseudo-label assignment for one self-training round.
#[derive(Clone, Debug)]
pub struct PseudoLabelSet {
    /// One entry per target sample: class and max-softmax confidence for
    /// samples selected this round.
    pub assignments: Vec<Option<(usize, f64)>>,
}

impl PseudoLabelSet {
    pub fn counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; classes];
        for a in self.assignments.iter().flatten() {
            counts[a.0] += 1;
        }
        counts
    }

    pub fn labeled_total(&self) -> usize {
        self.assignments.iter().flatten().count()
    }
}

/// Class-balanced confidence selection: for each predicted class, keep the
/// top ceil(portion * n_k) samples by max-softmax confidence. Ties at the
/// cut keep the lower sample index.
pub fn pseudo_label(softmaxes: &[Vector], portion: f64) -> Result<PseudoLabelSet> {
    if softmaxes.is_empty() {
        return Err(Error::Invalid("no target samples to pseudo-label".into()));
    }
    if portion.is_nan() || portion <= 0.0 || portion > 1.0 {
        return Err(Error::Invalid("portion must lie in (0, 1]".into()));
    }
    let classes = softmaxes[0].len();
    let mut per_class: Vec<Vec<(usize, f64)>> = vec![Vec::new(); classes];
    for (ix, probs) in softmaxes.iter().enumerate() {
        let mut best = 0;
        for i in 1..probs.len() {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        per_class[best].push((ix, probs[best]));
    }
    let mut assignments = vec![None; softmaxes.len()];
    for (class, mut entries) in per_class.into_iter().enumerate() {
        if entries.is_empty() {
            continue;
        }
        let keep = (portion * entries.len() as f64).ceil() as usize;
        entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (ix, conf) in entries.into_iter().take(keep) {
            assignments[ix] = Some((class, conf));
        }
    }
    Ok(PseudoLabelSet { assignments })
}

/// Borrowed dataset views used by the self-training loop. The target
/// training pool carries no labels.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub source_x: &'a [Vector],
    pub source_y: &'a [usize],
    pub target_x: &'a [Vector],
    pub test_x: &'a [Vector],
    pub test_y: &'a [usize],
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub round: usize,
    pub epoch: usize,
    pub losses: LossReport,
    pub accuracy: f64,
    pub mae: f64,
    pub qwk: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub portion: f64,
    /// Pseudo-labeled target count per class (empty for the source-only round).
    pub pseudo_counts: Vec<usize>,
    /// Classes whose groups fell back to source-only membership.
    pub fallback_classes: Vec<usize>,
    pub wall_ms: u128,
}

pub struct FitOutcome {
    pub nets: ModelNets,
    pub prior: ContentPrior,
    pub epochs: Vec<EpochRecord>,
    pub rounds: Vec<RoundRecord>,
}

struct ClassPool {
    indices: Vec<usize>,
    cursor: usize,
}

impl ClassPool {
    fn new(indices: Vec<usize>) -> Self {
        Self { indices, cursor: 0 }
    }

    fn shuffle(&mut self, rng: &mut Rng) {
        rng.shuffle(&mut self.indices);
        self.cursor = 0;
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n.min(self.indices.len()));
        for _ in 0..n.min(self.indices.len()) {
            out.push(self.indices[self.cursor]);
            self.cursor = (self.cursor + 1) % self.indices.len();
        }
        out
    }
}

/// Self-training: a source-only bootstrap phase, then `rounds` rounds of
/// pseudo-labeling followed by joint training on source plus selected
/// targets. `rounds = 0` is the source-only baseline. Pseudo-labels are
/// recomputed from scratch each round.
pub fn fit(data: TrainData<'_>, cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.source_x.is_empty() {
        return Err(Error::Invalid("empty source set".into()));
    }
    if data.source_x.len() != data.source_y.len() {
        return Err(Error::DimMismatch("source labels do not match samples".into()));
    }
    let classes = data.source_y.iter().max().unwrap() + 1;
    let obs_dim = data.source_x[0].len();

    let mut rng = Rng::new(cfg.seed);
    let mut nets = ModelNets::new(obs_dim, cfg.content_dim, cfg.style_dim, classes, &mut rng);
    let mut prior = ContentPrior::for_config(cfg, classes);
    let mut opt = Optimizers::new(&nets, &prior, cfg);

    let mut source_pools: Vec<ClassPool> = (0..classes)
        .map(|k| {
            ClassPool::new(
                data.source_y
                    .iter()
                    .enumerate()
                    .filter_map(|(i, y)| (*y == k).then_some(i))
                    .collect(),
            )
        })
        .collect();
    for (k, pool) in source_pools.iter_mut().enumerate() {
        if pool.indices.is_empty() {
            return Err(Error::IncompleteGroup { class: k });
        }
    }
    let max_class = source_pools.iter().map(|p| p.indices.len()).max().unwrap();
    let steps_per_epoch = max_class.div_ceil(cfg.samples_per_class);

    let mut epochs = Vec::new();
    let mut rounds = Vec::new();

    for round in 0..=cfg.rounds {
        let started = Instant::now();
        let (portion, pseudo, fallback) = if round == 0 {
            (0.0, None, Vec::new())
        } else {
            let portion = cfg.portion_for_round(round);
            let mut probs = Vec::with_capacity(data.target_x.len());
            for x in data.target_x {
                probs.push(predict(&nets.enc_c, &nets.cls, x)?.1);
            }
            let set = pseudo_label(&probs, portion)?;
            let counts = set.counts(classes);
            let fallback: Vec<usize> = counts
                .iter()
                .enumerate()
                .filter_map(|(k, c)| (*c == 0).then_some(k))
                .collect();
            (portion, Some(set), fallback)
        };

        let mut target_pools: Vec<ClassPool> = (0..classes).map(|_| ClassPool::new(Vec::new())).collect();
        if let Some(set) = &pseudo {
            for (ix, a) in set.assignments.iter().enumerate() {
                if let Some((class, _)) = a {
                    target_pools[*class].indices.push(ix);
                }
            }
        }

        for epoch in 0..cfg.epochs_per_round {
            for pool in source_pools.iter_mut() {
                pool.shuffle(&mut rng);
            }
            for pool in target_pools.iter_mut() {
                if !pool.indices.is_empty() {
                    pool.shuffle(&mut rng);
                }
            }
            let mut epoch_losses = LossReport::default();
            for _ in 0..steps_per_epoch {
                let mut source = Vec::with_capacity(classes);
                let mut target = Vec::with_capacity(classes);
                for k in 0..classes {
                    source.push(
                        source_pools[k]
                            .take(cfg.samples_per_class)
                            .into_iter()
                            .map(|i| data.source_x[i].clone())
                            .collect::<Vec<_>>(),
                    );
                    // Each pseudo-labeled target appears about once per epoch;
                    // small pools must not recycle within an epoch, which
                    // would amplify early labeling mistakes.
                    let pool = target_pools[k].indices.len();
                    let per_step = pool.div_ceil(steps_per_epoch).min(cfg.samples_per_class);
                    target.push(
                        target_pools[k]
                            .take(per_step)
                            .into_iter()
                            .map(|i| data.target_x[i].clone())
                            .collect::<Vec<_>>(),
                    );
                }
                let batch = GroupBatch { source, target };
                let noise = StepNoise::draw(&batch, cfg.content_dim, cfg.style_dim, &mut rng);
                let report = train_step(&mut nets, &mut prior, &mut opt, &batch, &noise, cfg)?;
                epoch_losses.add(&report);
            }
            epoch_losses.scale(1.0 / steps_per_epoch as f64);

            let conf = evaluate(&nets, data.test_x, data.test_y, classes)?;
            epochs.push(EpochRecord {
                round,
                epoch,
                losses: epoch_losses,
                accuracy: conf.accuracy()?,
                mae: conf.mae()?,
                qwk: conf.qwk()?,
            });
        }

        rounds.push(RoundRecord {
            round,
            portion,
            pseudo_counts: pseudo.map(|s| s.counts(classes)).unwrap_or_default(),
            fallback_classes: fallback,
            wall_ms: started.elapsed().as_millis(),
        });
    }

    Ok(FitOutcome {
        nets,
        prior,
        epochs,
        rounds,
    })
}

/// Confusion matrix of predictions over a labeled evaluation set.
pub fn evaluate(
    nets: &ModelNets,
    xs: &[Vector],
    ys: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix> {
    let mut conf = ConfusionMatrix::zeros(classes);
    for (x, y) in xs.iter().zip(ys) {
        let (pred, _) = predict(&nets.enc_c, &nets.cls, x)?;
        conf.record(*y, pred)?;
    }
    Ok(conf)
}
