//! Finite-difference verification of every loss in the system, differentiated
//! through every network and through the raw prior parameters.
//!
//! Routing means there is no single scalar objective: each parameter group
//! minimizes its own weighted combination of loss terms. For every group the
//! routed analytic gradient is compared against central differences of that
//! group's objective, with deliberately distinct loss weights so that a wrong
//! gradient in any one term (cross-entropy, L1, style KL, content KL
//! including the raw prior parameters, both adversarial sides) cannot cancel.

use crate::error::Result;
use crate::param::ParamVec;
use crate::tensor::{Rng, Vector};
use crate::trainer::{
    compute_step, ContentPrior, GroupBatch, LossReport, ModelNets, StepGrads, StepNoise,
    TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NetId {
    EncC,
    EncUs,
    EncUt,
    DecS,
    DecT,
    Cls,
    DisS,
    DisT,
    Prior,
}

const ALL: [NetId; 9] = [
    NetId::EncC,
    NetId::EncUs,
    NetId::EncUt,
    NetId::DecS,
    NetId::DecT,
    NetId::Cls,
    NetId::DisS,
    NetId::DisT,
    NetId::Prior,
];

fn group_name(id: NetId) -> &'static str {
    match id {
        NetId::EncC => "enc_c",
        NetId::EncUs => "enc_u_s",
        NetId::EncUt => "enc_u_t",
        NetId::DecS => "dec_s",
        NetId::DecT => "dec_t",
        NetId::Cls => "cls",
        NetId::DisS => "dis_s",
        NetId::DisT => "dis_t",
        NetId::Prior => "prior",
    }
}

/// The weighted objective each parameter group receives under the routing.
fn group_objective(id: NetId, r: &LossReport, cfg: &TrainConfig) -> f64 {
    match id {
        NetId::EncC => {
            cfg.ce_weight * r.ce
                + cfg.alpha * r.kl_c
                + cfg.beta * (r.l1_s + r.l1_t)
                + cfg.gamma * (r.adv_gen_s + r.adv_gen_t)
        }
        NetId::EncUs => r.l1_s + cfg.lambda * r.kl_u_s + cfg.theta * r.adv_gen_s,
        NetId::EncUt => r.l1_t + cfg.lambda * r.kl_u_t + cfg.theta * r.adv_gen_t,
        NetId::DecS => r.l1_s + cfg.theta * r.adv_gen_s,
        NetId::DecT => r.l1_t + cfg.theta * r.adv_gen_t,
        NetId::Cls => cfg.ce_weight * r.ce,
        NetId::DisS => r.adv_disc_s,
        NetId::DisT => r.adv_disc_t,
        NetId::Prior => cfg.alpha * r.kl_c,
    }
}

fn param_count(nets: &ModelNets, prior: &ContentPrior, id: NetId) -> usize {
    match id {
        NetId::EncC => nets.enc_c.param_count(),
        NetId::EncUs => nets.enc_u_s.param_count(),
        NetId::EncUt => nets.enc_u_t.param_count(),
        NetId::DecS => nets.dec_s.param_count(),
        NetId::DecT => nets.dec_t.param_count(),
        NetId::Cls => nets.cls.param_count(),
        NetId::DisS => nets.dis_s.param_count(),
        NetId::DisT => nets.dis_t.param_count(),
        NetId::Prior => match prior {
            ContentPrior::Rcg(p) => p.param_count(),
            ContentPrior::IidGaussian => 0,
        },
    }
}

fn add_to_param(nets: &mut ModelNets, prior: &mut ContentPrior, id: NetId, i: usize, dv: f64) {
    match id {
        NetId::EncC => nets.enc_c.add_to_param(i, dv),
        NetId::EncUs => nets.enc_u_s.add_to_param(i, dv),
        NetId::EncUt => nets.enc_u_t.add_to_param(i, dv),
        NetId::DecS => nets.dec_s.add_to_param(i, dv),
        NetId::DecT => nets.dec_t.add_to_param(i, dv),
        NetId::Cls => nets.cls.add_to_param(i, dv),
        NetId::DisS => nets.dis_s.add_to_param(i, dv),
        NetId::DisT => nets.dis_t.add_to_param(i, dv),
        NetId::Prior => {
            if let ContentPrior::Rcg(p) = prior {
                p.add_to_param(i, dv);
            }
        }
    }
}

fn routed_grad(grads: &StepGrads, id: NetId, i: usize) -> f64 {
    match id {
        NetId::EncC => grads.enc_c.param(i),
        NetId::EncUs => grads.enc_u_s.param(i),
        NetId::EncUt => grads.enc_u_t.param(i),
        NetId::DecS => grads.dec_s.param(i),
        NetId::DecT => grads.dec_t.param(i),
        NetId::Cls => grads.cls.param(i),
        NetId::DisS => grads.dis_s.param(i),
        NetId::DisT => grads.dis_t.param(i),
        NetId::Prior => grads.prior.as_ref().map_or(0.0, |p| p.param(i)),
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckCase {
    pub model: usize,
    pub group: &'static str,
    pub params_checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

const FD_STEP: f64 = 1e-5;

/// Runs the routed-objective check over `models` random tiny models. The
/// reported relative error is |analytic - fd| / max(1, |analytic|, |fd|).
pub fn run_gradcheck(models: usize, seed: u64) -> Result<GradcheckReport> {
    let mut cases = Vec::new();
    for model in 0..models {
        let mut rng = Rng::new(seed.wrapping_add(model as u64));
        let classes = 3;
        let obs_dim = 3;
        // Distinct, non-unit weights so coefficient mix-ups cannot cancel.
        let cfg = TrainConfig {
            content_dim: 2,
            style_dim: 2,
            sigma_rule: if model % 2 == 0 { 3.0 } else { 2.0 },
            ce_weight: 0.8,
            alpha: 0.7,
            beta: 0.4,
            gamma: 0.3,
            lambda: 0.9,
            theta: 0.6,
            adversarial_enabled: true,
            ..TrainConfig::default()
        };
        let mut nets =
            ModelNets::with_hidden(obs_dim, cfg.content_dim, cfg.style_dim, classes, &[4], 4, &mut rng);
        let mut prior = ContentPrior::Rcg(crate::prior::RcgParams::random(
            classes,
            cfg.content_dim,
            cfg.sigma_rule,
            &mut rng,
        ));

        let mut batch = GroupBatch {
            source: Vec::new(),
            target: Vec::new(),
        };
        for _ in 0..classes {
            let draw = |rng: &mut Rng| {
                Vector::from_vec((0..obs_dim).map(|_| rng.next_normal()).collect()).unwrap()
            };
            batch.source.push(vec![draw(&mut rng), draw(&mut rng)]);
            batch.target.push(vec![draw(&mut rng)]);
        }
        let noise = StepNoise::draw(&batch, cfg.content_dim, cfg.style_dim, &mut rng);

        let (_, grads) = compute_step(&nets, &prior, &batch, &noise, &cfg)?;
        for id in ALL {
            let count = param_count(&nets, &prior, id);
            let mut worst = 0.0;
            let mut worst_param = String::new();
            for i in 0..count {
                add_to_param(&mut nets, &mut prior, id, i, FD_STEP);
                let (up, _) = compute_step(&nets, &prior, &batch, &noise, &cfg)?;
                add_to_param(&mut nets, &mut prior, id, i, -2.0 * FD_STEP);
                let (down, _) = compute_step(&nets, &prior, &batch, &noise, &cfg)?;
                add_to_param(&mut nets, &mut prior, id, i, FD_STEP);
                let fd = (group_objective(id, &up, &cfg) - group_objective(id, &down, &cfg))
                    / (2.0 * FD_STEP);
                let an = routed_grad(&grads, id, i);
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
                if rel > worst {
                    worst = rel;
                    worst_param = format!("{}[{i}]", group_name(id));
                }
            }
            cases.push(GradcheckCase {
                model,
                group: group_name(id),
                params_checked: count,
                max_rel_err: worst,
                worst_param,
            });
        }
    }
    Ok(GradcheckReport { cases })
}
