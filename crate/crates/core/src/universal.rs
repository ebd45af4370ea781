//! Universal perturbations shared by every image, trained against a depth
//! net alone or jointly against a depth and a segmentation net.
//!
//! Each minibatch starts from the current `δ` applied to its images, runs `T`
//! momentum sign steps on per-image iterates driven by a batch-averaged
//! multi-task gradient, then folds the mean displacement back into `δ`.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{clip_to_ball, iteration_count, least_likely_label, PIXEL_MAX};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::models::{decode_checkpoint, encode_checkpoint, DepthModel, Params, SegModel};
use crate::parallel;
use crate::rng;
use crate::tensor::{sign, Tensor};

pub const DELTA_MAGIC: &str = "DAVUAP";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskWeights {
    pub w_depth: f64,
    pub w_semantic: f64,
}

impl MultiTaskWeights {
    pub const SINGLE_TASK: MultiTaskWeights = MultiTaskWeights {
        w_depth: 1.0,
        w_semantic: 0.0,
    };
    pub const MULTI_TASK: MultiTaskWeights = MultiTaskWeights {
        w_depth: 0.5,
        w_semantic: 0.5,
    };

    pub fn new(w_depth: f64, w_semantic: f64) -> Result<Self> {
        let w = MultiTaskWeights { w_depth, w_semantic };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.w_depth) || !ok(self.w_semantic) || self.w_depth + self.w_semantic <= 0.0 {
            return Err(Error::config("task weights must be non-negative with a positive sum"));
        }
        Ok(())
    }

    pub fn uses_semantic(&self) -> bool {
        self.w_semantic > 0.0
    }
}

/// `w_d·|L_d| + w_s·|L_s|`.
pub fn multitask_loss(l_depth: f64, l_semantic: f64, w: &MultiTaskWeights) -> f64 {
    let semantic = if w.w_semantic == 0.0 {
        0.0
    } else {
        w.w_semantic * l_semantic.abs()
    };
    w.w_depth * l_depth.abs() + semantic
}

/// `w_d·g_d/‖g_d‖₁ + w_s·g_s/‖g_s‖₁`, norms floored at 1e-12.
pub fn multitask_gradient(g_depth: &Tensor, g_semantic: &Tensor, w: &MultiTaskWeights) -> Result<Tensor> {
    g_depth.expect_shape(g_semantic.shape())?;
    let nd = g_depth.l1_norm().max(1e-12);
    let ns = g_semantic.l1_norm().max(1e-12);
    if w.w_semantic == 0.0 {
        return Ok(g_depth.map(|d| w.w_depth * (d / nd)));
    }
    g_depth.zip_map(g_semantic, |d, s| w.w_depth * (d / nd) + w.w_semantic * (s / ns))
}

/// Where each minibatch's inner loop starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchStart {
    /// Images with the current `δ` applied.
    Perturbed,
    /// Clean images; `δ` never enters the inner loss.
    Clean,
}

impl FromStr for BatchStart {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perturbed" => Ok(BatchStart::Perturbed),
            "clean" => Ok(BatchStart::Clean),
            _ => Err(Error::config(format!("unknown batch start `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaInit {
    /// Uniform in `[−ε, ε]`.
    Uniform,
    Zero,
}

impl FromStr for DeltaInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(DeltaInit::Uniform),
            "zero" => Ok(DeltaInit::Zero),
            _ => Err(Error::config(format!("unknown initialisation `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniversalTrainConfig {
    pub epsilon: f64,
    /// Step `γ` applied to each minibatch displacement.
    pub gamma: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Inner iterations; `None` means the per-image iteration rule.
    pub inner_iterations: Option<usize>,
    /// Inner step size.
    pub alpha: f64,
    pub batch_size: usize,
    pub batch_start: BatchStart,
    pub init: DeltaInit,
    pub seed: u64,
}

impl Default for UniversalTrainConfig {
    fn default() -> Self {
        UniversalTrainConfig {
            epsilon: 16.0,
            gamma: 0.5,
            momentum: 1.0,
            epochs: 2,
            inner_iterations: None,
            alpha: 1.0,
            batch_size: 10,
            batch_start: BatchStart::Perturbed,
            init: DeltaInit::Uniform,
            seed: 0,
        }
    }
}

impl UniversalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.epsilon) || !pos(self.alpha) {
            return Err(Error::config("epsilon and alpha must be positive"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) || !(self.momentum.is_finite() && self.momentum >= 0.0) {
            return Err(Error::config("gamma and momentum must be non-negative"));
        }
        if self.batch_size == 0 || self.inner_iterations == Some(0) {
            return Err(Error::config("batch size and inner iterations must be positive"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.inner_iterations.unwrap_or_else(|| iteration_count(self.epsilon))
    }
}

/// A trained `δ` with everything needed to reproduce it.
#[derive(Clone, Debug, PartialEq)]
pub struct UniversalPerturbation {
    pub delta: Tensor,
    pub epsilon: f64,
    pub weights: MultiTaskWeights,
    pub config: UniversalTrainConfig,
    /// Mean multi-task loss of each minibatch's final inner iterate.
    pub batch_losses: Vec<f64>,
}

fn sample_init(shape: &[usize], cfg: &UniversalTrainConfig) -> Tensor {
    match cfg.init {
        DeltaInit::Zero => Tensor::zeros(shape),
        DeltaInit::Uniform => {
            let mut r = rng::stream(cfg.seed, "universal/init");
            let e = cfg.epsilon;
            Tensor::from_fn(shape, |_| r.gen_range(-e..=e))
        }
    }
}

fn project(delta: &Tensor, epsilon: f64) -> Tensor {
    delta.map(|v| v.clamp(-epsilon, epsilon))
}

/// Per-image losses and task gradients at one inner iterate.
struct ImageEval {
    depth_loss: f64,
    depth_grad: Tensor,
    semantic_loss: f64,
    /// Already negated so that ascent attacks the segmenter.
    semantic_grad: Option<Tensor>,
}

/// RMSE over valid pixels and its input gradient.
fn depth_rmse<D: DepthModel + ?Sized>(net: &D, x: &Tensor, s: &Sample) -> Result<(f64, Tensor)> {
    let lg = net.masked_mse(x, &s.depth, &s.valid)?;
    let r = lg.loss.max(0.0).sqrt();
    let grad = if r > 0.0 {
        let k = 0.5 / r;
        lg.grad.map(|g| g * k)
    } else {
        Tensor::zeros(x.shape())
    };
    Ok((r, grad))
}

fn evaluate<D, S>(depth: &D, seg: Option<&S>, x: &Tensor, s: &Sample, ll: Option<&Tensor>) -> Result<ImageEval>
where
    D: DepthModel + ?Sized,
    S: SegModel + ?Sized,
{
    let (depth_loss, depth_grad) = depth_rmse(depth, x, s)?;
    let (semantic_loss, semantic_grad) = match (seg, ll) {
        (Some(net), Some(labels)) => {
            let lg = net.cross_entropy(x, labels)?;
            (lg.loss, Some(lg.grad.map(|g| -g)))
        }
        _ => (0.0, None),
    };
    Ok(ImageEval {
        depth_loss,
        depth_grad,
        semantic_loss,
        semantic_grad,
    })
}

fn mean_into(acc: &mut Tensor, t: &Tensor, inv: f64) {
    for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
        *a += v * inv;
    }
}

/// Trains a universal perturbation on `data`.
///
/// `seg` is required when `w.w_semantic > 0` and is never called otherwise.
pub fn train_universal<D, S>(
    depth: &D,
    seg: Option<&S>,
    data: &[Sample],
    cfg: &UniversalTrainConfig,
    w: &MultiTaskWeights,
) -> Result<UniversalPerturbation>
where
    D: DepthModel + ?Sized,
    S: SegModel + ?Sized,
{
    cfg.validate()?;
    w.validate()?;
    let first = data.first().ok_or_else(|| Error::config("universal training set is empty"))?;
    let shape = first.rgb.shape().to_vec();
    if data.iter().any(|s| s.rgb.shape() != shape.as_slice()) {
        return Err(Error::config("all images must share one shape"));
    }
    let seg = if w.uses_semantic() {
        Some(seg.ok_or_else(|| Error::config("a segmentation net is required when w_semantic > 0"))?)
    } else {
        None
    };

    // Least-likely labels come from the clean images.
    let ll: Vec<Option<Tensor>> = match seg {
        Some(net) => parallel::try_map(data, |s| Ok(Some(least_likely_label(&net.probabilities(&s.rgb)?)?)))?,
        None => vec![None; data.len()],
    };

    let mut delta = project(&sample_init(&shape, cfg), cfg.epsilon);
    let steps = cfg.steps();
    let mut batch_losses = Vec::new();
    let mut minibatch = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("universal/shuffle/{epoch}")));
        for batch in order.chunks(cfg.batch_size) {
            minibatch += 1;
            let inv = 1.0 / batch.len() as f64;
            let starts: Vec<Tensor> = batch
                .iter()
                .map(|&i| match cfg.batch_start {
                    BatchStart::Perturbed => data[i].rgb.zip_map(&delta, |x, d| (x + d).clamp(0.0, PIXEL_MAX)),
                    BatchStart::Clean => Ok(data[i].rgb.clone()),
                })
                .collect::<Result<_>>()?;
            let mut iterates = starts.clone();
            let mut g = Tensor::zeros(&shape);
            let mut last_loss = 0.0;
            for _ in 0..steps {
                let evals = parallel::try_map(&(0..batch.len()).collect::<Vec<_>>(), |&k| {
                    let i = batch[k];
                    evaluate(depth, seg, &iterates[k], &data[i], ll[i].as_ref())
                })
                .map_err(|e| if e.is_numerical() { Error::UniversalDiverged { minibatch } } else { e })?;
                let mut gd = Tensor::zeros(&shape);
                let mut gs = Tensor::zeros(&shape);
                let (mut ld, mut ls) = (0.0, 0.0);
                for e in &evals {
                    ld += e.depth_loss * inv;
                    ls += e.semantic_loss * inv;
                    mean_into(&mut gd, &e.depth_grad, inv);
                    if let Some(sg) = &e.semantic_grad {
                        mean_into(&mut gs, sg, inv);
                    }
                }
                last_loss = multitask_loss(ld, ls, w);
                let gbar = multitask_gradient(&gd, &gs, w)?;
                if !last_loss.is_finite() || !gbar.is_finite() {
                    return Err(Error::UniversalDiverged { minibatch });
                }
                for (a, v) in g.data_mut().iter_mut().zip(gbar.data()) {
                    *a = cfg.momentum * *a + v;
                }
                for (z, x0) in iterates.iter_mut().zip(&starts) {
                    let stepped = z.zip_map(&g, |v, gv| v + cfg.alpha * sign(gv))?;
                    *z = clip_to_ball(&stepped, x0, cfg.epsilon)?;
                }
            }
            let mut shift = Tensor::zeros(&shape);
            for (z, x0) in iterates.iter().zip(&starts) {
                mean_into(&mut shift, &z.zip_map(x0, |a, b| a - b)?, inv);
            }
            let updated = delta.zip_map(&shift, |d, s| d + cfg.gamma * s)?;
            delta = project(&updated, cfg.epsilon);
            batch_losses.push(last_loss);
        }
    }
    Ok(UniversalPerturbation {
        delta,
        epsilon: cfg.epsilon,
        weights: *w,
        config: cfg.clone(),
        batch_losses,
    })
}

/// `clip(x + δ)` into the pixel range.
pub fn apply_universal(x: &Tensor, delta: &UniversalPerturbation) -> Result<Tensor> {
    x.zip_map(&delta.delta, |a, d| (a + d).clamp(0.0, PIXEL_MAX))
}

const PROVENANCE: &str = "provenance";

/// Encodes `δ` and its provenance in the checkpoint format under
/// [`DELTA_MAGIC`]. The provenance vector holds
/// `[ε, w_depth, w_semantic, γ, μ, epochs, T, α, batch, start, init, seed_hi, seed_lo]`.
pub fn encode_delta(p: &UniversalPerturbation) -> Vec<u8> {
    let c = &p.config;
    let prov = vec![
        p.epsilon,
        p.weights.w_depth,
        p.weights.w_semantic,
        c.gamma,
        c.momentum,
        c.epochs as f64,
        c.steps() as f64,
        c.alpha,
        c.batch_size as f64,
        (c.batch_start == BatchStart::Clean) as u8 as f64,
        (c.init == DeltaInit::Zero) as u8 as f64,
        (c.seed >> 32) as f64,
        (c.seed & 0xffff_ffff) as f64,
    ];
    let mut tensors = Params::new();
    tensors.insert("delta".to_owned(), p.delta.clone());
    tensors.insert(PROVENANCE.to_owned(), Tensor::new(vec![prov.len()], prov).expect("non-empty"));
    encode_checkpoint(DELTA_MAGIC, "delta", &tensors)
}

pub fn decode_delta(bytes: &[u8]) -> Result<UniversalPerturbation> {
    let ck = decode_checkpoint(bytes, DELTA_MAGIC)?;
    let delta = ck
        .tensors
        .get("delta")
        .cloned()
        .ok_or_else(|| Error::format(0, "checkpoint has no `delta` tensor"))?;
    let prov = ck
        .tensors
        .get(PROVENANCE)
        .ok_or_else(|| Error::format(0, "checkpoint has no provenance"))?;
    let v = prov.data();
    if v.len() != 13 {
        return Err(Error::format(0, format!("provenance has {} entries, expected 13", v.len())));
    }
    let config = UniversalTrainConfig {
        epsilon: v[0],
        gamma: v[3],
        momentum: v[4],
        epochs: v[5] as usize,
        inner_iterations: Some(v[6] as usize),
        alpha: v[7],
        batch_size: v[8] as usize,
        batch_start: if v[9] == 1.0 { BatchStart::Clean } else { BatchStart::Perturbed },
        init: if v[10] == 1.0 { DeltaInit::Zero } else { DeltaInit::Uniform },
        seed: ((v[11] as u64) << 32) | v[12] as u64,
    };
    if delta.linf_norm() > config.epsilon + 1e-9 {
        return Err(Error::format(0, "delta exceeds its epsilon"));
    }
    Ok(UniversalPerturbation {
        delta,
        epsilon: v[0],
        weights: MultiTaskWeights {
            w_depth: v[1],
            w_semantic: v[2],
        },
        config,
        batch_losses: Vec::new(),
    })
}

pub fn write_delta(path: &Path, p: &UniversalPerturbation) -> Result<()> {
    Ok(std::fs::write(path, encode_delta(p))?)
}

pub fn read_delta(path: &Path) -> Result<UniversalPerturbation> {
    decode_delta(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dataset::generate_samples, SceneConfig};
    use crate::models::{Arch, DepthNet, LossGrad, SegNet};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn tiny_set(n: usize) -> Vec<Sample> {
        let scene = SceneConfig {
            height: 16,
            width: 16,
            ..Default::default()
        };
        generate_samples(n, &scene, 3).unwrap()
    }

    struct Counting {
        inner: SegNet,
        calls: AtomicUsize,
    }

    impl SegModel for Counting {
        fn classes(&self) -> usize {
            self.inner.classes
        }
        fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.probabilities(x)
        }
        fn cross_entropy(&self, x: &Tensor, labels: &Tensor) -> Result<LossGrad> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.cross_entropy(x, labels)
        }
    }

    fn quick() -> UniversalTrainConfig {
        UniversalTrainConfig {
            epochs: 1,
            inner_iterations: Some(2),
            batch_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn loss_examples() {
        let w = MultiTaskWeights::MULTI_TASK;
        assert_eq!(multitask_loss(4.0, 2.0, &w), 3.0);
        assert_eq!(multitask_loss(-4.0, 0.0, &w), 2.0);
        assert_eq!(multitask_loss(4.0, 123.0, &MultiTaskWeights::SINGLE_TASK), 4.0);
    }

    #[test]
    fn gradient_examples() {
        let g = Tensor::new(vec![4], vec![1.0, -3.0, 0.0, 4.0]).unwrap();
        let other = Tensor::new(vec![4], vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        let single = multitask_gradient(&g, &other, &MultiTaskWeights::SINGLE_TASK).unwrap();
        assert_eq!(single, g.map(|v| v / 8.0));
        let same = multitask_gradient(&g, &g, &MultiTaskWeights::MULTI_TASK).unwrap();
        for (a, b) in same.data().iter().zip(g.map(|v| v / 8.0).data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let zero = multitask_gradient(&Tensor::zeros(&[4]), &Tensor::zeros(&[4]), &MultiTaskWeights::MULTI_TASK).unwrap();
        assert_eq!(zero, Tensor::zeros(&[4]));
    }

    #[test]
    fn weights_are_validated() {
        assert!(MultiTaskWeights::new(0.0, 0.0).is_err());
        assert!(MultiTaskWeights::new(-1.0, 2.0).is_err());
        assert!(MultiTaskWeights::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn single_task_never_touches_segmenter() {
        let data = tiny_set(4);
        let depth = DepthNet::new(Arch::A, 1);
        let seg = Counting {
            inner: SegNet::new(4, 1),
            calls: AtomicUsize::new(0),
        };
        train_universal(&depth, Some(&seg), &data, &quick(), &MultiTaskWeights::SINGLE_TASK).unwrap();
        assert_eq!(seg.calls.load(Ordering::SeqCst), 0);
        train_universal(&depth, Some(&seg), &data, &quick(), &MultiTaskWeights::MULTI_TASK).unwrap();
        assert!(seg.calls.load(Ordering::SeqCst) > 0);
    }

    #[test]
    fn semantic_weight_requires_segmenter() {
        let data = tiny_set(2);
        let depth = DepthNet::new(Arch::A, 1);
        let r = train_universal::<_, SegNet>(&depth, None, &data, &quick(), &MultiTaskWeights::MULTI_TASK);
        assert!(matches!(r, Err(Error::Config(_))));
        assert!(train_universal::<_, SegNet>(&depth, None, &[], &quick(), &MultiTaskWeights::SINGLE_TASK).is_err());
    }

    #[test]
    fn zero_gamma_keeps_initialisation() {
        let data = tiny_set(4);
        let depth = DepthNet::new(Arch::B, 2);
        let cfg = UniversalTrainConfig {
            gamma: 0.0,
            ..quick()
        };
        let p = train_universal::<_, SegNet>(&depth, None, &data, &cfg, &MultiTaskWeights::SINGLE_TASK).unwrap();
        assert_eq!(p.delta, sample_init(&[3, 16, 16], &cfg));
        assert!(p.delta.linf_norm() <= 16.0);
    }

    #[test]
    fn single_step_trace() {
        // One image, one minibatch, zero init, no momentum, one inner step:
        // δ = γ·(clip(x + α·sign(∇)) − x).
        let data = tiny_set(1);
        let depth = DepthNet::new(Arch::A, 4);
        let cfg = UniversalTrainConfig {
            gamma: 0.5,
            momentum: 0.0,
            epochs: 1,
            inner_iterations: Some(1),
            alpha: 16.0,
            batch_size: 1,
            init: DeltaInit::Zero,
            ..Default::default()
        };
        let p = train_universal::<_, SegNet>(&depth, None, &data, &cfg, &MultiTaskWeights::SINGLE_TASK).unwrap();
        let x = &data[0].rgb;
        let g = depth.masked_mse(x, &data[0].depth, &data[0].valid).unwrap().grad;
        let expected = Tensor::from_fn(x.shape(), |i| {
            let stepped = (x.data()[i] + 16.0 * sign(g.data()[i])).clamp(0.0, 255.0);
            0.5 * (stepped - x.data()[i])
        });
        assert_eq!(p.delta, expected);
    }

    #[test]
    fn deterministic_and_bounded() {
        let data = tiny_set(5);
        let depth = DepthNet::new(Arch::A, 6);
        let seg = SegNet::new(4, 6);
        let cfg = UniversalTrainConfig {
            gamma: 3.0,
            ..quick()
        };
        let a = train_universal(&depth, Some(&seg), &data, &cfg, &MultiTaskWeights::MULTI_TASK).unwrap();
        let b = train_universal(&depth, Some(&seg), &data, &cfg, &MultiTaskWeights::MULTI_TASK).unwrap();
        assert_eq!(a.delta, b.delta);
        assert!(a.delta.linf_norm() <= 16.0 + 1e-9);
        assert_eq!(a.batch_losses.len(), 3);
    }

    #[test]
    fn apply_examples() {
        let zero = UniversalPerturbation {
            delta: Tensor::zeros(&[3, 4, 4]),
            epsilon: 16.0,
            weights: MultiTaskWeights::SINGLE_TASK,
            config: UniversalTrainConfig::default(),
            batch_losses: vec![],
        };
        let x = Tensor::from_fn(&[3, 4, 4], |i| i as f64);
        assert_eq!(apply_universal(&x, &zero).unwrap(), x);
        let plus = UniversalPerturbation {
            delta: Tensor::full(&[3, 4, 4], 16.0),
            ..zero.clone()
        };
        let white = Tensor::full(&[3, 4, 4], 255.0);
        assert_eq!(apply_universal(&white, &plus).unwrap(), white);
        assert!(apply_universal(&Tensor::zeros(&[3, 8, 8]), &zero).is_err());
    }

    #[test]
    fn delta_checkpoint_round_trip() {
        let data = tiny_set(2);
        let depth = DepthNet::new(Arch::A, 1);
        let cfg = UniversalTrainConfig {
            seed: u64::MAX - 12345,
            ..quick()
        };
        let p = train_universal::<_, SegNet>(&depth, None, &data, &cfg, &MultiTaskWeights::SINGLE_TASK).unwrap();
        let bytes = encode_delta(&p);
        assert!(bytes.starts_with(b"DAVUAP delta "));
        let back = decode_delta(&bytes).unwrap();
        assert_eq!(back.delta, p.delta);
        assert_eq!(back.weights, p.weights);
        assert_eq!(back.config.seed, cfg.seed);
        assert_eq!(back.config.steps(), 2);
        assert!(decode_delta(&bytes[..bytes.len() - 3]).is_err());
    }
}
