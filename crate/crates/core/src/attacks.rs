//! Per-image signed-gradient attacks on depth regressors.
//!
//! All three methods share one routine: take the gradient of an L₂ objective
//! with respect to the input, step by `α·sign(·)` in the chosen direction and
//! clip back into the ε-ball intersected with `[0, 255]`. Non-targeted attacks
//! ascend the error against ground truth; targeted attacks descend toward a
//! composite depth map that is `C` on the object mask and the clean
//! prediction elsewhere.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mmd, ratio_report, rmse, MetricReport, SparseDepth};
use crate::models::DepthModel;
use crate::tensor::{sign, Tensor};

pub const PIXEL_MAX: f64 = 255.0;

/// Attack method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fgsm,
    Ifgsm,
    Mifgsm,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Fgsm, Method::Ifgsm, Method::Mifgsm];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fgsm => "fgsm",
            Method::Ifgsm => "ifgsm",
            Method::Mifgsm => "mifgsm",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(Method::Fgsm),
            "ifgsm" => Ok(Method::Ifgsm),
            "mifgsm" => Ok(Method::Mifgsm),
            _ => Err(Error::config(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    NonTargeted,
    Targeted,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::NonTargeted => "non-targeted",
            Mode::Targeted => "targeted",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non-targeted" => Ok(Mode::NonTargeted),
            "targeted" => Ok(Mode::Targeted),
            _ => Err(Error::config(format!("unknown mode `{s}`"))),
        }
    }
}

/// Whether the attack increases or decreases its objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

impl Direction {
    fn factor(self) -> f64 {
        match self {
            Direction::Ascend => 1.0,
            Direction::Descend => -1.0,
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::NonTargeted => Direction::Ascend,
            Mode::Targeted => Direction::Descend,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L∞ budget in pixel units.
    pub epsilon: f64,
    /// Per-iteration step size.
    pub alpha: f64,
    /// Iteration count; `None` means [`iteration_count`] of `epsilon`.
    pub iterations: Option<usize>,
    pub momentum: f64,
    pub mode: Mode,
    /// Target depth in metres for targeted mode.
    pub target_depth: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 16.0,
            alpha: 1.0,
            iterations: None,
            momentum: 1.0,
            mode: Mode::NonTargeted,
            target_depth: 100.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha must be positive"));
        }
        if self.iterations == Some(0) {
            return Err(Error::config("iteration count must be at least 1"));
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return Err(Error::config("momentum must be non-negative"));
        }
        if !(self.target_depth.is_finite() && self.target_depth > 0.0) {
            return Err(Error::config("target depth must be positive"));
        }
        Ok(())
    }

    /// Effective iteration count.
    pub fn steps(&self) -> usize {
        self.iterations.unwrap_or_else(|| iteration_count(self.epsilon))
    }
}

/// `ceil(min(ε + 4, 1.25ε))`, at least 1.
pub fn iteration_count(epsilon: f64) -> usize {
    let t = (epsilon + 4.0).min(1.25 * epsilon).ceil();
    if t.is_finite() && t >= 1.0 {
        t as usize
    } else {
        1
    }
}

/// Elementwise `min(max(z, x − ε, 0), x + ε, 255)`.
pub fn clip_to_ball(z: &Tensor, x: &Tensor, epsilon: f64) -> Result<Tensor> {
    x.expect_shape(z.shape())?;
    z.zip_map(x, |zv, xv| zv.max(xv - epsilon).max(0.0).min(xv + epsilon).min(PIXEL_MAX))
}

/// Object mask and target depth for a targeted attack.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSpec {
    /// `[H, W]`, values in {0, 1}.
    pub mask: Tensor,
    pub depth: f64,
}

impl TargetSpec {
    pub fn new(mask: Tensor, depth: f64) -> Result<Self> {
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::config("target mask must be binary"));
        }
        if !mask.data().contains(&1.0) {
            return Err(Error::EmptyMask);
        }
        Ok(TargetSpec { mask, depth })
    }
}

/// `C` on the mask, the clean prediction elsewhere. `clean_pred` may be
/// `[H, W]` or `[1, H, W]`; the result is `[H, W]`.
pub fn build_target_depth(clean_pred: &Tensor, spec: &TargetSpec) -> Result<Tensor> {
    if clean_pred.len() != spec.mask.len() {
        return Err(Error::config("prediction and mask sizes differ"));
    }
    if !spec.mask.data().contains(&1.0) {
        return Err(Error::EmptyMask);
    }
    Tensor::new(
        spec.mask.shape().to_vec(),
        clean_pred
            .data()
            .iter()
            .zip(spec.mask.data())
            .map(|(&p, &m)| spec.depth * m + p * (1.0 - m))
            .collect(),
    )
}

/// The L₂ objective an attack optimises: mean squared error against `target`
/// over `mask`, pushed in `direction`.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub target: &'a Tensor,
    pub mask: &'a Tensor,
    pub direction: Direction,
}

/// Final iterate and the objective at iterates `0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub x_adv: Tensor,
    pub losses: Vec<f64>,
}

/// Update rule for one signed step.
#[derive(Clone, Copy, Debug)]
struct StepRule {
    epsilon: f64,
    alpha: f64,
    steps: usize,
    /// `Some(μ)` accumulates L₁-normalised gradients.
    momentum: Option<f64>,
}

/// Runs `rule` from `x`; `observe(t, x_t)` sees each new iterate.
fn signed_steps<F>(
    x: &Tensor,
    mut loss: F,
    rule: StepRule,
    direction: Direction,
    observe: &mut dyn FnMut(usize, &Tensor),
) -> Result<Trace>
where
    F: FnMut(&Tensor) -> Result<crate::models::LossGrad>,
{
    let d = direction.factor();
    let mut current = x.clone();
    let mut accum = rule.momentum.map(|_| Tensor::zeros(x.shape()));
    let mut losses = Vec::with_capacity(rule.steps + 1);
    for t in 0..rule.steps {
        let lg = loss(&current)?;
        if !lg.loss.is_finite() || !lg.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient at iteration {t}")));
        }
        losses.push(lg.loss);
        let direction_field = match (&mut accum, rule.momentum) {
            (Some(acc), Some(mu)) => {
                let n = lg.grad.l1_norm().max(1e-12);
                for (a, g) in acc.data_mut().iter_mut().zip(lg.grad.data()) {
                    *a = mu * *a + g / n;
                }
                &*acc
            }
            _ => &lg.grad,
        };
        let stepped = current.zip_map(direction_field, |v, g| v + d * rule.alpha * sign(g))?;
        current = clip_to_ball(&stepped, x, rule.epsilon)?;
        observe(t + 1, &current);
    }
    losses.push(loss(&current)?.loss);
    Ok(Trace {
        x_adv: current,
        losses,
    })
}

fn objective_fn<'a, M: DepthModel + ?Sized>(
    net: &'a M,
    obj: &'a Objective<'a>,
) -> impl FnMut(&Tensor) -> Result<crate::models::LossGrad> + 'a {
    move |z| net.masked_mse(z, obj.target, obj.mask)
}

/// Single step of size ε.
pub fn fgsm<M: DepthModel + ?Sized>(net: &M, x: &Tensor, obj: &Objective<'_>, cfg: &AttackConfig) -> Result<Trace> {
    run_method(net, x, obj, cfg, Method::Fgsm, &mut |_, _| {})
}

/// `T` steps of size α, each clipped to the ball.
pub fn ifgsm<M: DepthModel + ?Sized>(net: &M, x: &Tensor, obj: &Objective<'_>, cfg: &AttackConfig) -> Result<Trace> {
    run_method(net, x, obj, cfg, Method::Ifgsm, &mut |_, _| {})
}

/// I-FGSM on the momentum-accumulated, L₁-normalised gradient.
pub fn mifgsm<M: DepthModel + ?Sized>(net: &M, x: &Tensor, obj: &Objective<'_>, cfg: &AttackConfig) -> Result<Trace> {
    run_method(net, x, obj, cfg, Method::Mifgsm, &mut |_, _| {})
}

/// Runs `method` with an observer that sees every iterate.
pub fn run_method<M: DepthModel + ?Sized>(
    net: &M,
    x: &Tensor,
    obj: &Objective<'_>,
    cfg: &AttackConfig,
    method: Method,
    observe: &mut dyn FnMut(usize, &Tensor),
) -> Result<Trace> {
    cfg.validate()?;
    let rule = match method {
        Method::Fgsm => StepRule {
            epsilon: cfg.epsilon,
            alpha: cfg.epsilon,
            steps: 1,
            momentum: None,
        },
        Method::Ifgsm => StepRule {
            epsilon: cfg.epsilon,
            alpha: cfg.alpha,
            steps: cfg.steps(),
            momentum: None,
        },
        Method::Mifgsm => StepRule {
            epsilon: cfg.epsilon,
            alpha: cfg.alpha,
            steps: cfg.steps(),
            momentum: Some(cfg.momentum),
        },
    };
    signed_steps(x, objective_fn(net, obj), rule, obj.direction, observe)
}

/// Everything recorded about one attacked image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub x_adv: Tensor,
    pub clean_pred: Tensor,
    pub adv_pred: Tensor,
    /// Objective at iterates `0..=T`.
    pub losses: Vec<f64>,
    pub metrics: MetricReport,
}

/// Attacks `x` on `net` and measures the effect on the same net.
///
/// Non-targeted runs ascend the error against the valid ground truth;
/// targeted runs need `target` and descend toward its composite depth map.
pub fn attack<M: DepthModel + ?Sized>(
    net: &M,
    x: &Tensor,
    gt: &SparseDepth,
    method: Method,
    cfg: &AttackConfig,
    target: Option<&TargetSpec>,
) -> Result<AttackResult> {
    attack_observed(net, x, gt, method, cfg, target, &mut |_, _| {})
}

pub fn attack_observed<M: DepthModel + ?Sized>(
    net: &M,
    x: &Tensor,
    gt: &SparseDepth,
    method: Method,
    cfg: &AttackConfig,
    target: Option<&TargetSpec>,
    observe: &mut dyn FnMut(usize, &Tensor),
) -> Result<AttackResult> {
    cfg.validate()?;
    let clean_pred = net.predict(x)?;
    let trace = match cfg.mode {
        Mode::NonTargeted => {
            let obj = Objective {
                target: &gt.values,
                mask: &gt.valid,
                direction: Direction::Ascend,
            };
            run_method(net, x, &obj, cfg, method, observe)?
        }
        Mode::Targeted => {
            let spec = target.ok_or_else(|| Error::config("targeted mode requires an object mask"))?;
            let composite = build_target_depth(&clean_pred, spec)?;
            let everywhere = Tensor::full(spec.mask.shape(), 1.0);
            let obj = Objective {
                target: &composite,
                mask: &everywhere,
                direction: Direction::Descend,
            };
            run_method(net, x, &obj, cfg, method, observe)?
        }
    };
    let adv_pred = net.predict(&trace.x_adv)?;
    let mask = match cfg.mode {
        Mode::Targeted => target.map(|t| &t.mask),
        Mode::NonTargeted => None,
    };
    let metrics = compare(&clean_pred, &adv_pred, gt, mask)?;
    Ok(AttackResult {
        x_adv: trace.x_adv,
        clean_pred,
        adv_pred,
        losses: trace.losses,
        metrics,
    })
}

/// Clean versus adversarial metrics for two predictions; MMD only with a mask.
pub fn compare(clean_pred: &Tensor, adv_pred: &Tensor, gt: &SparseDepth, mask: Option<&Tensor>) -> Result<MetricReport> {
    let mmds = match mask {
        Some(m) => Some((mmd(clean_pred, m)?, mmd(adv_pred, m)?)),
        None => None,
    };
    Ok(ratio_report(rmse(clean_pred, gt)?, rmse(adv_pred, gt)?, mmds))
}

/// Re-evaluates an attack crafted elsewhere on `net` (black-box transfer).
pub fn evaluate_transfer<M: DepthModel + ?Sized>(
    net: &M,
    x: &Tensor,
    x_adv: &Tensor,
    gt: &SparseDepth,
    mask: Option<&Tensor>,
) -> Result<MetricReport> {
    compare(&net.predict(x)?, &net.predict(x_adv)?, gt, mask)
}

/// Per-pixel arg-min class of `[K, H, W]` probabilities; ties go to the
/// lowest class index.
pub fn least_likely_label(probs: &Tensor) -> Result<Tensor> {
    if probs.rank() != 3 {
        return Err(Error::config(format!("expected [K, H, W] probabilities, got {:?}", probs.shape())));
    }
    let (k, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let plane = h * w;
    let p = probs.data();
    Tensor::new(
        vec![h, w],
        (0..plane)
            .map(|i| {
                let mut best = 0;
                for c in 1..k {
                    if p[c * plane + i] < p[best * plane + i] {
                        best = c;
                    }
                }
                best as f64
            })
            .collect(),
    )
}
