//! Small dense networks with exact reverse-mode gradients for a fixed
//! operator set (affine, tanh, relu, sigmoid, softmax cross-entropy, L1,
//! the KL closed forms, reparameterized sampling), plus an Adam optimizer.
//! No general autodiff graph; each loss path is differentiated by hand and
//! checked against central finite differences.

use crate::error::{Error, Result};
use crate::param::ParamVec;
use crate::tensor::{Matrix, Rng, Vector};
use crate::variational::{DiagGaussian, LOGVAR_MAX, LOGVAR_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
            Activation::Sigmoid => crate::prior::sigmoid(z),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vector,
    pub act: Activation,
}

impl Layer {
    /// Scaled-uniform init in +-sqrt(6 / (fan_in + fan_out)); zero biases.
    pub fn init(in_dim: usize, out_dim: usize, act: Activation, rng: &mut Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut weight = Matrix::zeros(out_dim, in_dim);
        for r in 0..out_dim {
            for c in 0..in_dim {
                weight.set(r, c, rng.next_range(-bound, bound));
            }
        }
        Self {
            weight,
            bias: Vector::zeros(out_dim),
            act,
        }
    }

    fn forward(&self, x: &Vector) -> Vector {
        let mut y = self.weight.matvec(x);
        for i in 0..y.len() {
            y[i] = self.act.apply(y[i] + self.bias[i]);
        }
        y
    }
}

/// Affine stack. Layers chain: out_dim of layer i equals in_dim of layer i+1.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs and post-activation outputs captured during `forward`.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Vector>,
    outputs: Vec<Vector>,
}

impl MlpCache {
    pub fn output(&self) -> &Vector {
        self.outputs.last().expect("cache of a non-empty net")
    }
}

impl Mlp {
    /// `dims` lists in_dim, hidden..., out_dim. Hidden layers get
    /// `hidden_act`, the top layer `out_act`.
    pub fn new(dims: &[usize], hidden_act: Activation, out_act: Activation, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let act = if layers.len() + 2 == dims.len() {
                out_act
            } else {
                hidden_act
            };
            layers.push(Layer::init(w[0], w[1], act, rng));
        }
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    /// Pre-activation of the top layer, recomputed from the cached input.
    pub fn top_preactivation(&self, cache: &MlpCache) -> Vector {
        let layer = self.layers.last().unwrap();
        let x = cache.inputs.last().unwrap();
        let mut z = layer.weight.matvec(x);
        for i in 0..z.len() {
            z[i] += layer.bias[i];
        }
        z
    }

    pub fn forward(&self, x: &Vector) -> Result<(Vector, MlpCache)> {
        if x.len() != self.in_dim() {
            return Err(Error::DimMismatch(format!(
                "input has {} entries, net expects {}",
                x.len(),
                self.in_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            inputs.push(cur.clone());
            let y = layer.forward(&cur);
            outputs.push(y.clone());
            cur = y;
        }
        Ok((cur, MlpCache { inputs, outputs }))
    }

    /// Reverse pass from a gradient w.r.t. the network output. Returns the
    /// parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, out_grad: &Vector) -> (MlpGrads, Vector) {
        self.backward_impl(cache, out_grad.clone(), false)
    }

    /// Reverse pass from a gradient w.r.t. the top layer's pre-activation.
    /// Used by losses that fold the output nonlinearity into the loss for
    /// numerical stability (softmax cross-entropy, log-sigmoid).
    pub fn backward_from_preact(&self, cache: &MlpCache, preact_grad: &Vector) -> (MlpGrads, Vector) {
        self.backward_impl(cache, preact_grad.clone(), true)
    }

    fn backward_impl(&self, cache: &MlpCache, mut g: Vector, top_is_preact: bool) -> (MlpGrads, Vector) {
        let mut grads = MlpGrads::zeros_of(self);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let y = &cache.outputs[i];
            let x = &cache.inputs[i];
            let mut gz = Vector::zeros(y.len());
            let skip_act = top_is_preact && i + 1 == self.layers.len();
            for r in 0..y.len() {
                gz[r] = if skip_act {
                    g[r]
                } else {
                    g[r] * layer.act.derivative_from_output(y[r])
                };
            }
            let (gw, gb) = &mut grads.layers[i];
            for r in 0..gz.len() {
                gb[r] += gz[r];
                for c in 0..x.len() {
                    gw.add_at(r, c, gz[r] * x[c]);
                }
            }
            g = layer.weight.matvec_transposed(&gz);
        }
        (grads, g)
    }
}

/// Gradient buffer mirroring an `Mlp`'s layers.
#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub layers: Vec<(Matrix, Vector)>,
}

impl MlpGrads {
    pub fn zeros_of(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.weight.rows(), l.weight.cols()),
                        Vector::zeros(l.bias.len()),
                    )
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, w: f64) {
        for ((gw, gb), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (a, b) in gw.as_mut_slice().iter_mut().zip(ow.as_slice()) {
                *a += w * b;
            }
            gb.add_scaled(ob, w);
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for (gw, gb) in &self.layers {
            for v in gw.as_slice() {
                m = m.max(v.abs());
            }
            for v in gb.as_slice() {
                m = m.max(v.abs());
            }
        }
        m
    }
}

// Flat parameter order shared by Mlp and MlpGrads: per layer, weights
// row-major, then the bias.
#[derive(Clone, Copy)]
enum BlockLoc {
    Weight { block: usize, r: usize, c: usize },
    Bias { block: usize, j: usize },
}

fn locate_in_blocks(shapes: &[(usize, usize)], mut i: usize) -> BlockLoc {
    for (block, (rows, cols)) in shapes.iter().enumerate() {
        let wn = rows * cols;
        if i < wn {
            return BlockLoc::Weight {
                block,
                r: i / cols,
                c: i % cols,
            };
        }
        i -= wn;
        if i < *rows {
            return BlockLoc::Bias { block, j: i };
        }
        i -= rows;
    }
    panic!("parameter index out of range");
}

fn block_count(shapes: &[(usize, usize)]) -> usize {
    shapes.iter().map(|(r, c)| r * c + r).sum()
}

impl Mlp {
    fn block_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.weight.rows(), l.weight.cols()))
            .collect()
    }
}

impl ParamVec for Mlp {
    fn param_count(&self) -> usize {
        block_count(&self.block_shapes())
    }

    fn param(&self, i: usize) -> f64 {
        match locate_in_blocks(&self.block_shapes(), i) {
            BlockLoc::Weight { block, r, c } => self.layers[block].weight.get(r, c),
            BlockLoc::Bias { block, j } => self.layers[block].bias[j],
        }
    }

    fn set_param(&mut self, i: usize, v: f64) {
        match locate_in_blocks(&self.block_shapes(), i) {
            BlockLoc::Weight { block, r, c } => self.layers[block].weight.set(r, c, v),
            BlockLoc::Bias { block, j } => self.layers[block].bias[j] = v,
        }
    }

    fn param_name(&self, i: usize) -> String {
        match locate_in_blocks(&self.block_shapes(), i) {
            BlockLoc::Weight { block, r, c } => format!("layer{block}.weight[{r},{c}]"),
            BlockLoc::Bias { block, j } => format!("layer{block}.bias[{j}]"),
        }
    }
}

impl MlpGrads {
    fn block_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|(w, _)| (w.rows(), w.cols()))
            .collect()
    }
}

impl ParamVec for MlpGrads {
    fn param_count(&self) -> usize {
        block_count(&self.block_shapes())
    }

    fn param(&self, i: usize) -> f64 {
        match locate_in_blocks(&self.block_shapes(), i) {
            BlockLoc::Weight { block, r, c } => self.layers[block].0.get(r, c),
            BlockLoc::Bias { block, j } => self.layers[block].1[j],
        }
    }

    fn set_param(&mut self, i: usize, v: f64) {
        match locate_in_blocks(&self.block_shapes(), i) {
            BlockLoc::Weight { block, r, c } => self.layers[block].0.set(r, c, v),
            BlockLoc::Bias { block, j } => self.layers[block].1[j] = v,
        }
    }

    fn param_name(&self, i: usize) -> String {
        match locate_in_blocks(&self.block_shapes(), i) {
            BlockLoc::Weight { block, r, c } => format!("layer{block}.weight[{r},{c}]"),
            BlockLoc::Bias { block, j } => format!("layer{block}.bias[{j}]"),
        }
    }
}

/// Encoder trunk with affine mean and logvar heads producing a diagonal
/// Gaussian posterior. The logvar head output is clamped like every
/// `DiagGaussian`.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub body: Mlp,
    pub mean_head: Layer,
    pub logvar_head: Layer,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    body: MlpCache,
    hidden: Vector,
    logvar_pre: Vector,
}

impl GaussianHead {
    pub fn new(in_dim: usize, hidden: &[usize], out_dim: usize, rng: &mut Rng) -> Self {
        assert!(!hidden.is_empty());
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        let body = Mlp::new(&dims, Activation::Tanh, Activation::Tanh, rng);
        let h = *hidden.last().unwrap();
        Self {
            body,
            mean_head: Layer::init(h, out_dim, Activation::Linear, rng),
            logvar_head: Layer::init(h, out_dim, Activation::Linear, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.body.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.mean_head.weight.rows()
    }

    pub fn forward(&self, x: &Vector) -> Result<(DiagGaussian, HeadCache)> {
        let (hidden, body) = self.body.forward(x)?;
        let mean = self.mean_head.forward(&hidden);
        let logvar_pre = self.logvar_head.forward(&hidden);
        let q = DiagGaussian::new(mean, logvar_pre.clone())?;
        Ok((
            q,
            HeadCache {
                body,
                hidden,
                logvar_pre,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &HeadCache,
        g_mean: &Vector,
        g_logvar: &Vector,
    ) -> (HeadGrads, Vector) {
        let out = self.out_dim();
        let hid = self.hidden_dim();
        let mut mean_w = Matrix::zeros(out, hid);
        let mut mean_b = Vector::zeros(out);
        let mut logvar_w = Matrix::zeros(out, hid);
        let mut logvar_b = Vector::zeros(out);
        let mut g_hidden = Vector::zeros(hid);
        for r in 0..out {
            let gm = g_mean[r];
            // The clamp zeroes the gradient outside its range.
            let pre = cache.logvar_pre[r];
            let gl = if (LOGVAR_MIN..=LOGVAR_MAX).contains(&pre) {
                g_logvar[r]
            } else {
                0.0
            };
            mean_b[r] += gm;
            logvar_b[r] += gl;
            for c in 0..hid {
                let h = cache.hidden[c];
                mean_w.add_at(r, c, gm * h);
                logvar_w.add_at(r, c, gl * h);
                g_hidden[c] +=
                    gm * self.mean_head.weight.get(r, c) + gl * self.logvar_head.weight.get(r, c);
            }
        }
        let (body, input_grad) = self.body.backward(&cache.body, &g_hidden);
        (
            HeadGrads {
                body,
                mean: (mean_w, mean_b),
                logvar: (logvar_w, logvar_b),
            },
            input_grad,
        )
    }

    fn hidden_dim(&self) -> usize {
        self.mean_head.weight.cols()
    }
}

#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub body: MlpGrads,
    pub mean: (Matrix, Vector),
    pub logvar: (Matrix, Vector),
}

impl HeadGrads {
    pub fn zeros_of(head: &GaussianHead) -> Self {
        let out = head.out_dim();
        let hid = head.hidden_dim();
        Self {
            body: MlpGrads::zeros_of(&head.body),
            mean: (Matrix::zeros(out, hid), Vector::zeros(out)),
            logvar: (Matrix::zeros(out, hid), Vector::zeros(out)),
        }
    }

    pub fn add_scaled(&mut self, other: &HeadGrads, w: f64) {
        self.body.add_scaled(&other.body, w);
        for (mine, theirs) in [(&mut self.mean, &other.mean), (&mut self.logvar, &other.logvar)] {
            for (a, b) in mine.0.as_mut_slice().iter_mut().zip(theirs.0.as_slice()) {
                *a += w * b;
            }
            mine.1.add_scaled(&theirs.1, w);
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = self.body.max_abs();
        for (gw, gb) in [&self.mean, &self.logvar] {
            for v in gw.as_slice() {
                m = m.max(v.abs());
            }
            for v in gb.as_slice() {
                m = m.max(v.abs());
            }
        }
        m
    }
}

// GaussianHead / HeadGrads flat order: body, then mean head, then logvar head.
impl GaussianHead {
    fn head_shapes(&self) -> Vec<(usize, usize)> {
        vec![
            (self.mean_head.weight.rows(), self.mean_head.weight.cols()),
            (self.logvar_head.weight.rows(), self.logvar_head.weight.cols()),
        ]
    }
}

impl ParamVec for GaussianHead {
    fn param_count(&self) -> usize {
        self.body.param_count() + block_count(&self.head_shapes())
    }

    fn param(&self, i: usize) -> f64 {
        let nb = self.body.param_count();
        if i < nb {
            return self.body.param(i);
        }
        match locate_in_blocks(&self.head_shapes(), i - nb) {
            BlockLoc::Weight { block: 0, r, c } => self.mean_head.weight.get(r, c),
            BlockLoc::Weight { r, c, .. } => self.logvar_head.weight.get(r, c),
            BlockLoc::Bias { block: 0, j } => self.mean_head.bias[j],
            BlockLoc::Bias { j, .. } => self.logvar_head.bias[j],
        }
    }

    fn set_param(&mut self, i: usize, v: f64) {
        let nb = self.body.param_count();
        if i < nb {
            return self.body.set_param(i, v);
        }
        match locate_in_blocks(&self.head_shapes(), i - nb) {
            BlockLoc::Weight { block: 0, r, c } => self.mean_head.weight.set(r, c, v),
            BlockLoc::Weight { r, c, .. } => self.logvar_head.weight.set(r, c, v),
            BlockLoc::Bias { block: 0, j } => self.mean_head.bias[j] = v,
            BlockLoc::Bias { j, .. } => self.logvar_head.bias[j] = v,
        }
    }

    fn param_name(&self, i: usize) -> String {
        let nb = self.body.param_count();
        if i < nb {
            return format!("body.{}", self.body.param_name(i));
        }
        match locate_in_blocks(&self.head_shapes(), i - nb) {
            BlockLoc::Weight { block, r, c } => {
                let tag = if block == 0 { "mean" } else { "logvar" };
                format!("{tag}.weight[{r},{c}]")
            }
            BlockLoc::Bias { block, j } => {
                let tag = if block == 0 { "mean" } else { "logvar" };
                format!("{tag}.bias[{j}]")
            }
        }
    }
}

impl HeadGrads {
    fn head_shapes(&self) -> Vec<(usize, usize)> {
        vec![
            (self.mean.0.rows(), self.mean.0.cols()),
            (self.logvar.0.rows(), self.logvar.0.cols()),
        ]
    }
}

impl ParamVec for HeadGrads {
    fn param_count(&self) -> usize {
        self.body.param_count() + block_count(&self.head_shapes())
    }

    fn param(&self, i: usize) -> f64 {
        let nb = self.body.param_count();
        if i < nb {
            return self.body.param(i);
        }
        match locate_in_blocks(&self.head_shapes(), i - nb) {
            BlockLoc::Weight { block: 0, r, c } => self.mean.0.get(r, c),
            BlockLoc::Weight { r, c, .. } => self.logvar.0.get(r, c),
            BlockLoc::Bias { block: 0, j } => self.mean.1[j],
            BlockLoc::Bias { j, .. } => self.logvar.1[j],
        }
    }

    fn set_param(&mut self, i: usize, v: f64) {
        let nb = self.body.param_count();
        if i < nb {
            return self.body.set_param(i, v);
        }
        match locate_in_blocks(&self.head_shapes(), i - nb) {
            BlockLoc::Weight { block: 0, r, c } => self.mean.0.set(r, c, v),
            BlockLoc::Weight { r, c, .. } => self.logvar.0.set(r, c, v),
            BlockLoc::Bias { block: 0, j } => self.mean.1[j] = v,
            BlockLoc::Bias { j, .. } => self.logvar.1[j] = v,
        }
    }

    fn param_name(&self, i: usize) -> String {
        let nb = self.body.param_count();
        if i < nb {
            return format!("body.{}", self.body.param_name(i));
        }
        match locate_in_blocks(&self.head_shapes(), i - nb) {
            BlockLoc::Weight { block, r, c } => {
                let tag = if block == 0 { "mean" } else { "logvar" };
                format!("{tag}.weight[{r},{c}]")
            }
            BlockLoc::Bias { block, j } => {
                let tag = if block == 0 { "mean" } else { "logvar" };
                format!("{tag}.bias[{j}]")
            }
        }
    }
}

/// Softmax cross-entropy from logits. Returns the loss and the gradient
/// w.r.t. the logits (softmax minus one-hot).
pub fn cross_entropy(logits: &Vector, label: usize) -> Result<(f64, Vector)> {
    let k = logits.len();
    if label >= k {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let max = logits.as_slice().iter().cloned().fold(f64::MIN, f64::max);
    let mut exps = Vector::zeros(k);
    let mut sum = 0.0;
    for i in 0..k {
        let e = (logits[i] - max).exp();
        exps[i] = e;
        sum += e;
    }
    let mut grad = Vector::zeros(k);
    for i in 0..k {
        grad[i] = exps[i] / sum;
    }
    let loss = -(grad[label].ln());
    grad[label] -= 1.0;
    Ok((loss, grad))
}

pub fn softmax(logits: &Vector) -> Vector {
    let max = logits.as_slice().iter().cloned().fold(f64::MIN, f64::max);
    let mut out = Vector::zeros(logits.len());
    let mut sum = 0.0;
    for i in 0..logits.len() {
        let e = (logits[i] - max).exp();
        out[i] = e;
        sum += e;
    }
    for i in 0..logits.len() {
        out[i] /= sum;
    }
    out
}

/// L1 reconstruction: sum_i |x_i - recon_i|, plus the (sub)gradient w.r.t.
/// the reconstruction.
pub fn l1_loss(x: &Vector, recon: &Vector) -> (f64, Vector) {
    debug_assert_eq!(x.len(), recon.len());
    let mut loss = 0.0;
    let mut grad = Vector::zeros(x.len());
    for i in 0..x.len() {
        let diff = recon[i] - x[i];
        loss += diff.abs();
        grad[i] = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    (loss, grad)
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

/// Adversarial pair for one (real, fake) sample through a discriminator whose
/// top layer is a single sigmoid unit:
///   discriminator loss = -[log D(real) + log(1 - D(fake))]
///   generator loss     = -log D(fake)            (non-saturating)
/// Returns the two loss values.
pub fn adversarial_losses(dis: &Mlp, real: &Vector, fake: &Vector) -> Result<(f64, f64)> {
    let eval = adversarial_eval(dis, real, fake)?;
    Ok((eval.gen_loss, eval.disc_loss))
}

pub struct AdvEval {
    pub gen_loss: f64,
    pub disc_loss: f64,
    /// Discriminator-loss gradients for the discriminator parameters; the
    /// fake input is treated as constant here.
    pub dis_grads: MlpGrads,
    /// Generator-loss gradient w.r.t. the fake input; discriminator
    /// parameters are treated as constant here.
    pub fake_input_grad: Vector,
}

/// Forward and backward of both adversarial losses, evaluated through the
/// pre-sigmoid logit for stability.
pub fn adversarial_eval(dis: &Mlp, real: &Vector, fake: &Vector) -> Result<AdvEval> {
    debug_assert_eq!(dis.out_dim(), 1);
    let (d_real, cache_real) = dis.forward(real)?;
    let (d_fake, cache_fake) = dis.forward(fake)?;
    let dr = d_real[0];
    let df = d_fake[0];
    // Loss values computed from the pre-sigmoid logits:
    // -log D = softplus(-z), -log(1 - D) = softplus(z).
    let z_real = dis.top_preactivation(&cache_real)[0];
    let z_fake = dis.top_preactivation(&cache_fake)[0];
    let disc_loss = softplus(-z_real) + softplus(z_fake);
    let gen_loss = softplus(-z_fake);

    // d disc / d z_real = D(real) - 1; d disc / d z_fake = D(fake).
    let (mut dis_grads, _) =
        dis.backward_from_preact(&cache_real, &Vector::from_vec(vec![dr - 1.0])?);
    let (fake_side, _) = dis.backward_from_preact(&cache_fake, &Vector::from_vec(vec![df])?);
    dis_grads.add_scaled(&fake_side, 1.0);

    // d gen / d z_fake = D(fake) - 1; only the input gradient is kept.
    let (_, fake_input_grad) =
        dis.backward_from_preact(&cache_fake, &Vector::from_vec(vec![df - 1.0])?);

    Ok(AdvEval {
        gen_loss,
        disc_loss,
        dis_grads,
        fake_input_grad,
    })
}

/// Adam hyperparameters; the documented defaults.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Per-parameter first/second moment accumulators. Deterministic given an
/// identical gradient sequence.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(count: usize) -> Self {
        Self {
            m: vec![0.0; count],
            v: vec![0.0; count],
            t: 0,
        }
    }

    pub fn step<P: ParamVec, G: ParamVec>(
        &mut self,
        hyper: &AdamParams,
        owner: &str,
        params: &mut P,
        grads: &G,
    ) -> Result<()> {
        let n = params.param_count();
        debug_assert_eq!(n, grads.param_count());
        debug_assert_eq!(n, self.m.len());
        self.t += 1;
        let bc1 = 1.0 - hyper.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hyper.beta2.powi(self.t as i32);
        for i in 0..n {
            let g = grads.param(i);
            if !g.is_finite() {
                return Err(Error::NonFiniteGrad {
                    name: format!("{owner}.{}", grads.param_name(i)),
                });
            }
            self.m[i] = hyper.beta1 * self.m[i] + (1.0 - hyper.beta1) * g;
            self.v[i] = hyper.beta2 * self.v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let delta = -hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            params.add_to_param(i, delta);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Vector {
        Vector::from_vec(data.to_vec()).unwrap()
    }

    #[test]
    fn forward_identity_layer() {
        let mut net = Mlp::new(&[3, 3], Activation::Tanh, Activation::Linear, &mut Rng::new(1));
        net.layers[0].weight = Matrix::identity(3);
        net.layers[0].bias = Vector::zeros(3);
        let x = v(&[0.3, -0.8, 2.0]);
        let (y, _) = net.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn forward_zero_weights_through_tanh() {
        let mut net = Mlp::new(&[2, 2], Activation::Tanh, Activation::Tanh, &mut Rng::new(1));
        net.layers[0].weight = Matrix::zeros(2, 2);
        net.layers[0].bias = Vector::zeros(2);
        let (y, _) = net.forward(&v(&[1.0, -1.0])).unwrap();
        assert_eq!(y, Vector::zeros(2));
    }

    #[test]
    fn forward_is_pure() {
        let net = Mlp::new(&[4, 8, 2], Activation::Tanh, Activation::Linear, &mut Rng::new(2));
        let x = v(&[0.1, 0.2, 0.3, 0.4]);
        let (a, _) = net.forward(&x).unwrap();
        let (b, _) = net.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let net = Mlp::new(&[4, 2], Activation::Tanh, Activation::Linear, &mut Rng::new(2));
        assert!(net.forward(&v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn backward_single_linear_layer_hand_rule() {
        // loss = 0.5 ||f(x)||^2 with f = Wx: dW = f(x) x^T.
        let net = Mlp::new(&[2, 2], Activation::Tanh, Activation::Linear, &mut Rng::new(3));
        let x = v(&[0.7, -1.3]);
        let (y, cache) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&cache, &y);
        for r in 0..2 {
            for c in 0..2 {
                let want = y[r] * x[c];
                assert!((grads.layers[0].0.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let net = Mlp::new(&[3, 5, 2], Activation::Tanh, Activation::Linear, &mut Rng::new(4));
        let (_, cache) = net.forward(&v(&[1.0, 2.0, 3.0])).unwrap();
        let (grads, gx) = net.backward(&cache, &Vector::zeros(2));
        assert_eq!(grads.max_abs(), 0.0);
        assert_eq!(gx, Vector::zeros(3));
    }

    #[test]
    fn backward_matches_finite_differences() {
        // 0.5 ||f(x) - t||^2 through random nets with all activations.
        let mut rng = Rng::new(5);
        for trial in 0..20 {
            let acts = [Activation::Tanh, Activation::Relu, Activation::Sigmoid];
            let act = acts[trial % acts.len()];
            let mut net = Mlp::new(&[3, 4, 2], act, Activation::Linear, &mut rng);
            let x = v(&[0.3, -0.5, 0.9]);
            let t = v(&[0.2, -0.1]);
            let loss = |net: &Mlp| {
                let (y, _) = net.forward(&x).unwrap();
                let mut acc = 0.0;
                for i in 0..2 {
                    acc += 0.5 * (y[i] - t[i]) * (y[i] - t[i]);
                }
                acc
            };
            let (y, cache) = net.forward(&x).unwrap();
            let mut up = Vector::zeros(2);
            for i in 0..2 {
                up[i] = y[i] - t[i];
            }
            let (grads, _) = net.backward(&cache, &up);

            let h = 1e-5;
            for i in 0..net.param_count() {
                let orig = net.param(i);
                net.set_param(i, orig + h);
                let a = loss(&net);
                net.set_param(i, orig - h);
                let b = loss(&net);
                net.set_param(i, orig);
                let fd = (a - b) / (2.0 * h);
                let an = grads.param(i);
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
                assert!(rel < 1e-4, "trial {trial} {}: {an} vs {fd}", net.param_name(i));
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, grad) = cross_entropy(&Vector::zeros(5), 2).unwrap();
        assert!((loss - 5.0_f64.ln()).abs() < 1e-12);
        let gsum: f64 = grad.as_slice().iter().sum();
        assert!(gsum.abs() < 1e-12);

        let (loss, _) = cross_entropy(&v(&[10.0, 0.0, 0.0]), 0).unwrap();
        assert!((loss - 9.079573746728087e-5).abs() < 1e-12, "{loss}");

        assert!(matches!(
            cross_entropy(&Vector::zeros(3), 3),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn adversarial_examples() {
        // A constant-0.5 discriminator: zero weights, zero bias, sigmoid top.
        let mut dis = Mlp::new(&[2, 1], Activation::Tanh, Activation::Sigmoid, &mut Rng::new(6));
        dis.layers[0].weight = Matrix::zeros(1, 2);
        dis.layers[0].bias = Vector::zeros(1);
        let (gen, disc) = adversarial_losses(&dis, &v(&[1.0, 1.0]), &v(&[0.0, 0.0])).unwrap();
        assert!((disc - 2.0 * 2.0_f64.ln()).abs() < 1e-12);
        assert!((gen - 2.0_f64.ln()).abs() < 1e-12);

        // Confident discriminator: large positive bias on reals via weights.
        let mut sharp = Mlp::new(&[1, 1], Activation::Tanh, Activation::Sigmoid, &mut Rng::new(7));
        sharp.layers[0].weight = Matrix::new(1, 1, vec![30.0]).unwrap();
        sharp.layers[0].bias = Vector::zeros(1);
        let (_, disc) = adversarial_losses(&sharp, &v(&[1.0]), &v(&[-1.0])).unwrap();
        assert!(disc < 1e-10);

        // Generator loss decreases as D(fake) rises.
        let mut prev = f64::MAX;
        for w in [-2.0, 0.0, 2.0] {
            let mut d = Mlp::new(&[1, 1], Activation::Tanh, Activation::Sigmoid, &mut Rng::new(8));
            d.layers[0].weight = Matrix::new(1, 1, vec![w]).unwrap();
            d.layers[0].bias = Vector::zeros(1);
            let (gen, _) = adversarial_losses(&d, &v(&[1.0]), &v(&[1.0])).unwrap();
            assert!(gen < prev);
            prev = gen;
        }
    }

    #[test]
    fn adversarial_grads_match_finite_differences() {
        let mut rng = Rng::new(9);
        let mut dis = Mlp::new(&[3, 4, 1], Activation::Tanh, Activation::Sigmoid, &mut rng);
        let real = v(&[0.5, -0.2, 0.8]);
        let fake = v(&[-0.4, 0.3, 0.1]);
        let eval = adversarial_eval(&dis, &real, &fake).unwrap();

        let h = 1e-6;
        for i in 0..dis.param_count() {
            let orig = dis.param(i);
            dis.set_param(i, orig + h);
            let up = adversarial_losses(&dis, &real, &fake).unwrap().1;
            dis.set_param(i, orig - h);
            let dn = adversarial_losses(&dis, &real, &fake).unwrap().1;
            dis.set_param(i, orig);
            let fd = (up - dn) / (2.0 * h);
            let an = eval.dis_grads.param(i);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            assert!(rel < 1e-4, "{}", dis.param_name(i));
        }

        for i in 0..3 {
            let bump = |delta: f64| {
                let mut f = fake.clone();
                f[i] += delta;
                adversarial_losses(&dis, &real, &f).unwrap().0
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let an = eval.fake_input_grad[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            assert!(rel < 1e-4, "fake input {i}");
        }
    }

    #[test]
    fn adam_zero_gradients_leave_params_unchanged() {
        let mut net = Mlp::new(&[2, 2], Activation::Tanh, Activation::Linear, &mut Rng::new(10));
        let before: Vec<f64> = (0..net.param_count()).map(|i| net.param(i)).collect();
        let grads = MlpGrads::zeros_of(&net);
        let mut adam = AdamState::new(net.param_count());
        adam.step(&AdamParams::default(), "net", &mut net, &grads).unwrap();
        for (i, b) in before.iter().enumerate() {
            assert_eq!(net.param(i), *b);
        }
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut net = Mlp::new(&[1, 1], Activation::Tanh, Activation::Linear, &mut Rng::new(11));
        let w0 = net.param(0);
        let mut grads = MlpGrads::zeros_of(&net);
        grads.layers[0].0.set(0, 0, 0.37);
        let hyper = AdamParams::default();
        let mut adam = AdamState::new(net.param_count());
        adam.step(&hyper, "net", &mut net, &grads).unwrap();
        let step = net.param(0) - w0;
        assert!((step + hyper.lr).abs() < 1e-6, "step {step}");
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut net = Mlp::new(&[1, 1], Activation::Tanh, Activation::Linear, &mut Rng::new(12));
        let mut grads = MlpGrads::zeros_of(&net);
        grads.layers[0].0.set(0, 0, f64::NAN);
        let mut adam = AdamState::new(net.param_count());
        match adam.step(&AdamParams::default(), "cls", &mut net, &grads) {
            Err(Error::NonFiniteGrad { name }) => {
                assert_eq!(name, "cls.layer0.weight[0,0]");
            }
            other => panic!("expected gradient error, got {other:?}"),
        }
    }

    #[test]
    fn adam_trajectories_are_bitwise_reproducible() {
        let run = || {
            let mut net = Mlp::new(&[2, 3, 1], Activation::Tanh, Activation::Linear, &mut Rng::new(13));
            let mut adam = AdamState::new(net.param_count());
            let x = v(&[0.4, -0.6]);
            for _ in 0..50 {
                let (y, cache) = net.forward(&x).unwrap();
                let (grads, _) = net.backward(&cache, &y);
                adam.step(&AdamParams::default(), "net", &mut net, &grads).unwrap();
            }
            (0..net.param_count()).map(|i| net.param(i)).collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn toy_classifier_separates_within_500_steps() {
        let mut rng = Rng::new(14);
        let mut net = Mlp::new(&[2, 8, 2], Activation::Tanh, Activation::Linear, &mut rng);
        let mut data = Vec::new();
        for i in 0..40 {
            let y = i % 2;
            let center = if y == 0 { -1.5 } else { 1.5 };
            data.push((
                v(&[center + 0.3 * rng.next_normal(), center + 0.3 * rng.next_normal()]),
                y,
            ));
        }
        let mut adam = AdamState::new(net.param_count());
        let hyper = AdamParams::with_lr(5e-3);
        let mut solved_at = None;
        for step in 0..500 {
            let mut grads = MlpGrads::zeros_of(&net);
            let mut correct = 0;
            for (x, y) in &data {
                let (logits, cache) = net.forward(x).unwrap();
                let (_, glogits) = cross_entropy(&logits, *y).unwrap();
                let (g, _) = net.backward_from_preact(&cache, &glogits);
                grads.add_scaled(&g, 1.0 / data.len() as f64);
                let pred = if logits[0] > logits[1] { 0 } else { 1 };
                if pred == *y {
                    correct += 1;
                }
            }
            if correct == data.len() {
                solved_at = Some(step);
                break;
            }
            adam.step(&hyper, "net", &mut net, &grads).unwrap();
        }
        assert!(solved_at.is_some(), "did not reach 100% train accuracy");
    }
}
